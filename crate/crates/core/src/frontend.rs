//! Acoustic frontend: framing, MFCC, deltas, CMVN and the FEAT1 file format.
//!
//! The pipeline is pure and deterministic: 20 ms frames with 10 ms shift,
//! per-frame pre-emphasis (0.97) and Hamming window, 512-point power
//! spectrum, 26 mel filters over 0..Nyquist, orthonormal DCT-II keeping
//! c0..c19, delta/delta-delta with a +-2 regression window, then
//! utterance-level mean/variance normalization.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};

use crate::error::{Result, SudaError};
use crate::wav::Waveform;

pub const NUM_CEPS: usize = 20;
pub const FEATURE_DIM: usize = 60;
pub const NUM_MEL_FILTERS: usize = 26;
pub const FFT_SIZE: usize = 512;
pub const PRE_EMPHASIS: f64 = 0.97;
pub const LOG_FLOOR: f64 = 1e-10;
pub const VAR_FLOOR: f64 = 1e-10;
pub const FRAME_MS: usize = 20;
pub const SHIFT_MS: usize = 10;

/// NF x 60 feature matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub num_frames: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

fn mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn inv_mel(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the mel filterbank, filters 0..NUM_MEL_FILTERS.
pub fn mel_filter_centers(sample_rate: u32) -> Vec<f64> {
    let nyquist = sample_rate as f64 / 2.0;
    let (lo, hi) = (mel(0.0), mel(nyquist));
    (1..=NUM_MEL_FILTERS)
        .map(|i| inv_mel(lo + (hi - lo) * i as f64 / (NUM_MEL_FILTERS + 1) as f64))
        .collect()
}

/// Triangular mel filterbank as per-filter (bin, weight) lists.
fn mel_filterbank(sample_rate: u32) -> Vec<Vec<(usize, f64)>> {
    let nyquist = sample_rate as f64 / 2.0;
    let (lo, hi) = (mel(0.0), mel(nyquist));
    let points: Vec<f64> = (0..NUM_MEL_FILTERS + 2)
        .map(|i| inv_mel(lo + (hi - lo) * i as f64 / (NUM_MEL_FILTERS + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / FFT_SIZE as f64;
    let n_bins = FFT_SIZE / 2 + 1;
    (0..NUM_MEL_FILTERS)
        .map(|f| {
            let (l, c, r) = (points[f], points[f + 1], points[f + 2]);
            let mut taps = Vec::new();
            for k in 0..n_bins {
                let hz = k as f64 * bin_hz;
                let w = if hz > l && hz < c {
                    (hz - l) / (c - l)
                } else if hz >= c && hz < r {
                    (r - hz) / (r - c)
                } else {
                    0.0
                };
                if w > 0.0 {
                    taps.push((k, w));
                }
            }
            taps
        })
        .collect()
}

/// Orthonormal DCT-II matrix rows for the kept coefficients.
fn dct_matrix() -> Vec<Vec<f64>> {
    let n = NUM_MEL_FILTERS as f64;
    (0..NUM_CEPS)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n).sqrt()
            } else {
                (2.0 / n).sqrt()
            };
            (0..NUM_MEL_FILTERS)
                .map(|j| scale * (PI * k as f64 * (j as f64 + 0.5) / n).cos())
                .collect()
        })
        .collect()
}

/// Cut a signal into pre-emphasized, Hamming-windowed frames.
pub fn frame_signal(wav: &Waveform, frame_ms: usize, shift_ms: usize) -> Result<Vec<Vec<f64>>> {
    let frame_len = wav.sample_rate as usize * frame_ms / 1000;
    let shift = wav.sample_rate as usize * shift_ms / 1000;
    let n = wav.samples.len();
    if n < frame_len {
        return Err(SudaError::UtteranceTooShort {
            needed: frame_len,
            got: n,
            unit: "samples",
        });
    }
    let nf = (n - frame_len) / shift + 1;
    let window: Vec<f64> = (0..frame_len)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (frame_len - 1) as f64).cos())
        .collect();
    let mut frames = Vec::with_capacity(nf);
    for t in 0..nf {
        let start = t * shift;
        let src = &wav.samples[start..start + frame_len];
        let mut frame = vec![0.0; frame_len];
        // frame-local pre-emphasis keeps the pipeline shift-invariant
        frame[0] = src[0] - PRE_EMPHASIS * src[0];
        for i in 1..frame_len {
            frame[i] = src[i] - PRE_EMPHASIS * src[i - 1];
        }
        for i in 0..frame_len {
            frame[i] *= window[i];
        }
        frames.push(frame);
    }
    Ok(frames)
}

struct FftCtx {
    fft: Arc<dyn Fft<f64>>,
}

impl FftCtx {
    fn new() -> Self {
        FftCtx {
            fft: FftPlanner::new().plan_fft_forward(FFT_SIZE),
        }
    }

    fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(FFT_SIZE)
            .collect();
        self.fft.process(&mut buf);
        buf[..FFT_SIZE / 2 + 1]
            .iter()
            .map(|c| c.re * c.re + c.im * c.im)
            .collect()
    }
}

/// Base 20-coefficient MFCC per frame.
pub fn mfcc(frames: &[Vec<f64>], sample_rate: u32) -> FeatureMatrix {
    let bank = mel_filterbank(sample_rate);
    let dct = dct_matrix();
    let ctx = FftCtx::new();
    let mut data = Vec::with_capacity(frames.len() * NUM_CEPS);
    for frame in frames {
        let power = ctx.power_spectrum(frame);
        let log_energies: Vec<f64> = bank
            .iter()
            .map(|taps| {
                let e: f64 = taps.iter().map(|&(k, w)| power[k] * w).sum();
                e.max(LOG_FLOOR).ln()
            })
            .collect();
        for row in &dct {
            data.push(row.iter().zip(&log_energies).map(|(a, b)| a * b).sum());
        }
    }
    FeatureMatrix {
        num_frames: frames.len(),
        dim: NUM_CEPS,
        data,
    }
}

/// Log mel filterbank energies per frame (exposed for analysis/tests).
pub fn mel_log_energies(frames: &[Vec<f64>], sample_rate: u32) -> Vec<Vec<f64>> {
    let bank = mel_filterbank(sample_rate);
    let ctx = FftCtx::new();
    frames
        .iter()
        .map(|frame| {
            let power = ctx.power_spectrum(frame);
            bank.iter()
                .map(|taps| {
                    let e: f64 = taps.iter().map(|&(k, w)| power[k] * w).sum();
                    e.max(LOG_FLOOR).ln()
                })
                .collect()
        })
        .collect()
}

/// Regression delta with a +-2 window and edge replication.
fn delta(x: &FeatureMatrix) -> FeatureMatrix {
    let nf = x.num_frames as isize;
    let dim = x.dim;
    let denom = 2.0 * (1.0 + 4.0); // 2 * sum k^2
    let clamp = |t: isize| t.clamp(0, nf - 1) as usize;
    let mut data = Vec::with_capacity(x.num_frames * dim);
    for t in 0..nf {
        for d in 0..dim {
            let mut acc = 0.0;
            for k in 1..=2isize {
                acc += k as f64 * (x.row(clamp(t + k))[d] - x.row(clamp(t - k))[d]);
            }
            data.push(acc / denom);
        }
    }
    FeatureMatrix {
        num_frames: x.num_frames,
        dim,
        data,
    }
}

/// Concatenate [base, delta, delta-delta] into NF x 60.
pub fn add_deltas(x: &FeatureMatrix) -> FeatureMatrix {
    let d1 = delta(x);
    let d2 = delta(&d1);
    let dim = x.dim * 3;
    let mut data = Vec::with_capacity(x.num_frames * dim);
    for t in 0..x.num_frames {
        data.extend_from_slice(x.row(t));
        data.extend_from_slice(d1.row(t));
        data.extend_from_slice(d2.row(t));
    }
    FeatureMatrix {
        num_frames: x.num_frames,
        dim,
        data,
    }
}

/// Utterance-level mean/variance normalization per column.
pub fn cmvn(x: &FeatureMatrix) -> FeatureMatrix {
    let (nf, dim) = (x.num_frames, x.dim);
    let mut out = x.data.clone();
    for d in 0..dim {
        let mean: f64 = (0..nf).map(|t| x.data[t * dim + d]).sum::<f64>() / nf as f64;
        let var: f64 = (0..nf)
            .map(|t| {
                let v = x.data[t * dim + d] - mean;
                v * v
            })
            .sum::<f64>()
            / nf as f64;
        let inv_std = 1.0 / var.max(VAR_FLOOR).sqrt();
        for t in 0..nf {
            out[t * dim + d] = (x.data[t * dim + d] - mean) * inv_std;
        }
    }
    FeatureMatrix {
        num_frames: nf,
        dim,
        data: out,
    }
}

/// Full frontend: waveform -> normalized NF x 60 features.
pub fn extract_features(wav: &Waveform) -> Result<FeatureMatrix> {
    let frames = frame_signal(wav, FRAME_MS, SHIFT_MS)?;
    let base = mfcc(&frames, wav.sample_rate);
    Ok(cmvn(&add_deltas(&base)))
}

const FEAT1_MAGIC: &[u8; 4] = b"FT01";

/// Write a feature matrix in the FEAT1 binary format (f32 little-endian).
pub fn write_feat(path: &Path, feats: &FeatureMatrix) -> Result<()> {
    let mut out = Vec::with_capacity(8 + 4 + feats.data.len() * 4);
    out.extend_from_slice(FEAT1_MAGIC);
    out.extend_from_slice(&(feats.num_frames as u32).to_le_bytes());
    out.extend_from_slice(&(feats.dim as u32).to_le_bytes());
    for &v in &feats.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| SudaError::io(path, e))
}

pub fn read_feat(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| SudaError::io(path, e))?;
    let bad = |detail: &str| SudaError::Format {
        format: "FEAT1",
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 12 || &bytes[0..4] != FEAT1_MAGIC {
        return Err(bad("missing FT01 magic"));
    }
    let nf = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + nf * dim * 4 {
        return Err(bad("payload size does not match header"));
    }
    let data: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(FeatureMatrix {
        num_frames: nf,
        dim,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, n: usize) -> Waveform {
        Waveform {
            samples: (0..n)
                .map(|i| (2.0 * PI * freq * i as f64 / 16000.0).sin() * 0.5)
                .collect(),
            sample_rate: 16000,
        }
    }

    #[test]
    fn frame_counts() {
        let wav = tone(440.0, 16000);
        assert_eq!(frame_signal(&wav, 20, 10).unwrap().len(), 99);
        let wav = tone(440.0, 320);
        assert_eq!(frame_signal(&wav, 20, 10).unwrap().len(), 1);
        let wav = tone(440.0, 319);
        assert!(matches!(
            frame_signal(&wav, 20, 10),
            Err(SudaError::UtteranceTooShort { .. })
        ));
    }

    #[test]
    fn silence_gives_identical_rows() {
        let wav = Waveform {
            samples: vec![0.0; 3200],
            sample_rate: 16000,
        };
        let frames = frame_signal(&wav, 20, 10).unwrap();
        let base = mfcc(&frames, 16000);
        let first = base.row(0).to_vec();
        for t in 1..base.num_frames {
            assert_eq!(base.row(t), &first[..]);
        }
        // constant input maps to DCT of the floored log energies
        let floor_ceps: Vec<f64> = dct_matrix()
            .iter()
            .map(|row| row.iter().sum::<f64>() * LOG_FLOOR.ln())
            .collect();
        for (a, b) in first.iter().zip(&floor_ceps) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn tone_peaks_at_bracketing_filter() {
        let wav = tone(1000.0, 8000);
        let frames = frame_signal(&wav, 20, 10).unwrap();
        let energies = mel_log_energies(&frames, 16000);
        // average energy across frames, find argmax filter
        let mut mean = vec![0.0; NUM_MEL_FILTERS];
        for row in &energies {
            for (m, &e) in mean.iter_mut().zip(row) {
                *m += e;
            }
        }
        let argmax = mean
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        // the winning filter's center must bracket 1 kHz against its neighbors
        let centers = mel_filter_centers(16000);
        let lo = if argmax == 0 { 0.0 } else { centers[argmax - 1] };
        let hi = if argmax + 1 < centers.len() {
            centers[argmax + 1]
        } else {
            8000.0
        };
        assert!(lo < 1000.0 && 1000.0 < hi, "argmax {} range {}..{}", argmax, lo, hi);
    }

    #[test]
    fn determinism() {
        let wav = tone(523.0, 6400);
        let a = extract_features(&wav).unwrap();
        let b = extract_features(&wav).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deltas_constant_and_ramp() {
        // constant sequence: deltas are zero
        let x = FeatureMatrix {
            num_frames: 5,
            dim: 2,
            data: vec![3.0; 10],
        };
        let full = add_deltas(&x);
        assert_eq!(full.dim, 6);
        for t in 0..5 {
            assert_eq!(&full.row(t)[2..6], &[0.0, 0.0, 0.0, 0.0]);
        }
        // linear ramp: interior delta is 1
        let x = FeatureMatrix {
            num_frames: 7,
            dim: 1,
            data: (0..7).map(|t| t as f64).collect(),
        };
        let full = add_deltas(&x);
        for t in 2..5 {
            assert!((full.row(t)[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deltas_match_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let nf = 7;
        let dim = 3;
        let data: Vec<f64> = (0..nf * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = FeatureMatrix {
            num_frames: nf,
            dim,
            data: data.clone(),
        };
        let full = add_deltas(&x);
        // independent direct-summation oracle for the first delta block
        let get = |t: isize, d: usize| {
            let t = t.clamp(0, nf as isize - 1) as usize;
            data[t * dim + d]
        };
        for t in 0..nf as isize {
            for d in 0..dim {
                let num = 1.0 * (get(t + 1, d) - get(t - 1, d)) + 2.0 * (get(t + 2, d) - get(t - 2, d));
                let expect = num / 10.0;
                assert!((full.row(t as usize)[dim + d] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cmvn_statistics_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nf = 50;
        let dim = 4;
        let data: Vec<f64> = (0..nf * dim).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let x = FeatureMatrix {
            num_frames: nf,
            dim,
            data,
        };
        let y = cmvn(&x);
        for d in 0..dim {
            let mean: f64 = (0..nf).map(|t| y.row(t)[d]).sum::<f64>() / nf as f64;
            let var: f64 = (0..nf).map(|t| (y.row(t)[d] - mean).powi(2)).sum::<f64>() / nf as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
        let z = cmvn(&y);
        for (a, b) in y.data.iter().zip(&z.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cmvn_constant_column_is_zeroed() {
        let x = FeatureMatrix {
            num_frames: 10,
            dim: 1,
            data: vec![4.2; 10],
        };
        let y = cmvn(&x);
        // mean subtraction leaves at most a few ulps, scaled by 1/sqrt(var floor)
        assert!(y.data.iter().all(|&v| v.abs() < 1e-8));
    }

    #[test]
    fn feature_shape_law() {
        let wav = tone(300.0, 16000);
        let f = extract_features(&wav).unwrap();
        assert_eq!(f.num_frames, 99);
        assert_eq!(f.dim, 60);
    }

    #[test]
    fn time_shift_by_one_hop_shifts_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let samples: Vec<f64> = (0..4800).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let wav = Waveform {
            samples: samples.clone(),
            sample_rate: 16000,
        };
        let shifted = Waveform {
            samples: samples[160..].to_vec(),
            sample_rate: 16000,
        };
        let a = mfcc(&frame_signal(&wav, 20, 10).unwrap(), 16000);
        let b = mfcc(&frame_signal(&shifted, 20, 10).unwrap(), 16000);
        for t in 0..b.num_frames {
            for d in 0..NUM_CEPS {
                assert!((a.row(t + 1)[d] - b.row(t)[d]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn feat_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.feat");
        let wav = tone(600.0, 6400);
        let f = extract_features(&wav).unwrap();
        write_feat(&path, &f).unwrap();
        let back = read_feat(&path).unwrap();
        assert_eq!(back.num_frames, f.num_frames);
        assert_eq!(back.dim, 60);
        for (a, b) in f.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-5); // f32 storage
        }
        // writing twice is byte-identical
        let bytes1 = std::fs::read(&path).unwrap();
        write_feat(&path, &f).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }
}
