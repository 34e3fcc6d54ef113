//! SUDA1 checkpoint format.
//!
//! Layout: magic "SUDA1", u32 line count, then that many length-prefixed
//! UTF-8 `key=value` config lines, then each parameter tensor in visit
//! order as (u32 name length, name bytes, u32 rank, u32 dims..., f64
//! little-endian values).

use std::fs;
use std::path::Path;

use crate::error::{Result, SudaError};
use crate::network::{SudaConfig, SudaParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"SUDA1";

fn config_lines(cfg: &SudaConfig) -> Vec<String> {
    vec![
        format!("input_dim={}", cfg.input_dim),
        format!("shared_hidden={}", cfg.shared_hidden),
        format!("branch_hidden={}", cfg.branch_hidden),
        format!("conv_channels={}", cfg.conv_channels),
        format!("embedding_dim={}", cfg.embedding_dim),
        format!("n_speakers={}", cfg.n_speakers),
        format!("n_phrases={}", cfg.n_phrases),
        format!("masks_enabled={}", cfg.masks_enabled),
    ]
}

pub fn save_checkpoint(path: &Path, cfg: &SudaConfig, params: &SudaParams) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let lines = config_lines(cfg);
    out.extend_from_slice(&(lines.len() as u32).to_le_bytes());
    for line in &lines {
        out.extend_from_slice(&(line.len() as u32).to_le_bytes());
        out.extend_from_slice(line.as_bytes());
    }
    params.visit(|name, t| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    fs::write(path, out).map_err(|e| SudaError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bad(&self, detail: &str) -> SudaError {
        SudaError::Format {
            format: "SUDA1",
            path: self.path.to_path_buf(),
            detail: detail.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.bad("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec()).map_err(|_| self.bad("invalid UTF-8"))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(SudaConfig, SudaParams)> {
    let bytes = fs::read(path).map_err(|e| SudaError::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(5)? != MAGIC {
        return Err(r.bad("missing SUDA1 magic"));
    }
    let n_lines = r.u32()? as usize;
    let mut cfg = SudaConfig::default();
    for _ in 0..n_lines {
        let line = r.string()?;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| r.bad("config line without '='"))?;
        let parse = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| SudaError::Config(format!("bad value for {key}: {v}")))
        };
        match key {
            "input_dim" => cfg.input_dim = parse(value)?,
            "shared_hidden" => cfg.shared_hidden = parse(value)?,
            "branch_hidden" => cfg.branch_hidden = parse(value)?,
            "conv_channels" => cfg.conv_channels = parse(value)?,
            "embedding_dim" => cfg.embedding_dim = parse(value)?,
            "n_speakers" => cfg.n_speakers = parse(value)?,
            "n_phrases" => cfg.n_phrases = parse(value)?,
            "masks_enabled" => {
                cfg.masks_enabled = value
                    .parse()
                    .map_err(|_| SudaError::Config(format!("bad bool: {value}")))?
            }
            other => return Err(SudaError::Config(format!("unknown checkpoint key: {other}"))),
        }
    }
    cfg.validate()?;
    let mut params = SudaParams::init(&cfg, 0)?;
    let mut err = None;
    params.visit_mut(|name, t| {
        if err.is_some() {
            return;
        }
        let res: Result<()> = (|| {
            let got = r.string()?;
            if got != name {
                return Err(r.bad(&format!("expected tensor {name}, found {got}")));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            if shape != t.shape {
                return Err(r.bad(&format!(
                    "tensor {name}: shape {:?} does not match config {:?}",
                    shape, t.shape
                )));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *t = Tensor { shape, data };
            Ok(())
        })();
        if let Err(e) = res {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if r.pos != bytes.len() {
        return Err(r.bad("trailing bytes"));
    }
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SudaConfig {
        SudaConfig {
            input_dim: 6,
            shared_hidden: 4,
            branch_hidden: 4,
            conv_channels: 8,
            embedding_dim: 8,
            n_speakers: 3,
            n_phrases: 2,
            masks_enabled: true,
        }
    }

    #[test]
    fn roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = cfg();
        let params = SudaParams::init(&cfg, 2020).unwrap();
        save_checkpoint(&path, &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        let a = params.named_tensors();
        let b = params2.named_tensors();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(ta.data, tb.data);
        }
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = cfg();
        let params = SudaParams::init(&cfg, 2020).unwrap();
        save_checkpoint(&path, &cfg, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
