//! The dual-branch masked network: shared LSTM, per-branch LSTMs,
//! per-branch convolution stacks, cross-branch complement masks,
//! global average pooling and classification heads.
//!
//! The masks are parameter-free: mask_s = 1 - sigmoid(fm_u) and
//! mask_u = 1 - sigmoid(fm_s), computed from the final feature maps and
//! multiplied elementwise into the corresponding stream. Disabling them
//! (`masks_enabled = false`) gives the ablation baseline with an
//! otherwise identical pipeline and parameter count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SudaError};
use crate::frontend::FeatureMatrix;
use crate::tensor::{lstm_forward, LstmVars, Tape, Tensor, Var};

pub const CONV_KERNEL: usize = 5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SudaConfig {
    pub input_dim: usize,
    pub shared_hidden: usize,
    pub branch_hidden: usize,
    pub conv_channels: usize,
    pub embedding_dim: usize,
    pub n_speakers: usize,
    pub n_phrases: usize,
    pub masks_enabled: bool,
}

impl Default for SudaConfig {
    fn default() -> Self {
        SudaConfig {
            input_dim: 60,
            shared_hidden: 256,
            branch_hidden: 256,
            conv_channels: 512,
            embedding_dim: 512,
            n_speakers: 8,
            n_phrases: 4,
            masks_enabled: true,
        }
    }
}

impl SudaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim != self.conv_channels {
            return Err(SudaError::Config(format!(
                "embedding_dim ({}) must equal conv_channels ({}): pooling maps C x NF' -> C",
                self.embedding_dim, self.conv_channels
            )));
        }
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("shared_hidden", self.shared_hidden),
            ("branch_hidden", self.branch_hidden),
            ("conv_channels", self.conv_channels),
            ("n_speakers", self.n_speakers),
            ("n_phrases", self.n_phrases),
        ] {
            if v == 0 {
                return Err(SudaError::Config(format!("{} must be positive", name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LstmWeights {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct ConvWeights {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct LinearWeights {
    pub w: Tensor,
    pub b: Tensor,
}

/// One branch above the shared LSTM: LSTM, conv stack, head.
/// conv1 has the time kernel (5); conv2 is a pointwise mixing layer so
/// the stack keeps the NF - 4 time-shape law.
#[derive(Debug, Clone)]
pub struct BranchWeights {
    pub lstm: LstmWeights,
    pub conv1: ConvWeights,
    pub prelu: Tensor,
    pub conv2: ConvWeights,
    pub fc: LinearWeights,
}

/// All learnable parameters.
#[derive(Debug, Clone)]
pub struct SudaParams {
    pub shared: LstmWeights,
    pub spk: BranchWeights,
    pub utt: BranchWeights,
}

fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor {
        shape: vec![rows, cols],
        data,
    }
}

fn init_lstm(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> LstmWeights {
    let mut b = Tensor::zeros(vec![4 * hidden]);
    // forget-gate bias +1
    for v in &mut b.data[hidden..2 * hidden] {
        *v = 1.0;
    }
    LstmWeights {
        w_x: init_matrix(rng, input, 4 * hidden, input),
        w_h: init_matrix(rng, hidden, 4 * hidden, hidden),
        b,
    }
}

fn init_conv(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> ConvWeights {
    let bound = 1.0 / ((c_in * k) as f64).sqrt();
    let data = (0..c_out * c_in * k).map(|_| rng.gen_range(-bound..bound)).collect();
    ConvWeights {
        w: Tensor {
            shape: vec![c_out, c_in, k],
            data,
        },
        b: Tensor::zeros(vec![c_out]),
    }
}

fn init_branch(rng: &mut ChaCha8Rng, cfg: &SudaConfig, n_classes: usize) -> BranchWeights {
    let c = cfg.conv_channels;
    BranchWeights {
        lstm: init_lstm(rng, cfg.shared_hidden, cfg.branch_hidden),
        conv1: init_conv(rng, c, cfg.branch_hidden, CONV_KERNEL),
        prelu: Tensor {
            shape: vec![c],
            data: vec![0.25; c],
        },
        conv2: init_conv(rng, c, c, 1),
        fc: LinearWeights {
            w: init_matrix(rng, n_classes, c, c),
            b: Tensor::zeros(vec![n_classes]),
        },
    }
}

impl SudaParams {
    pub fn init(cfg: &SudaConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(SudaParams {
            shared: init_lstm(&mut rng, cfg.input_dim, cfg.shared_hidden),
            spk: init_branch(&mut rng, cfg, cfg.n_speakers),
            utt: init_branch(&mut rng, cfg, cfg.n_phrases),
        })
    }

    /// Visit every tensor in the fixed serialization order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(&str, &'a Tensor)) {
        f("shared.w_x", &self.shared.w_x);
        f("shared.w_h", &self.shared.w_h);
        f("shared.b", &self.shared.b);
        for (prefix, br) in [("spk", &self.spk), ("utt", &self.utt)] {
            f(&format!("{prefix}.lstm.w_x"), &br.lstm.w_x);
            f(&format!("{prefix}.lstm.w_h"), &br.lstm.w_h);
            f(&format!("{prefix}.lstm.b"), &br.lstm.b);
            f(&format!("{prefix}.conv1.w"), &br.conv1.w);
            f(&format!("{prefix}.conv1.b"), &br.conv1.b);
            f(&format!("{prefix}.prelu"), &br.prelu);
            f(&format!("{prefix}.conv2.w"), &br.conv2.w);
            f(&format!("{prefix}.conv2.b"), &br.conv2.b);
            f(&format!("{prefix}.fc.w"), &br.fc.w);
            f(&format!("{prefix}.fc.b"), &br.fc.b);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        let shared = &mut self.shared;
        f("shared.w_x", &mut shared.w_x);
        f("shared.w_h", &mut shared.w_h);
        f("shared.b", &mut shared.b);
        for (prefix, br) in [("spk", &mut self.spk), ("utt", &mut self.utt)] {
            f(&format!("{prefix}.lstm.w_x"), &mut br.lstm.w_x);
            f(&format!("{prefix}.lstm.w_h"), &mut br.lstm.w_h);
            f(&format!("{prefix}.lstm.b"), &mut br.lstm.b);
            f(&format!("{prefix}.conv1.w"), &mut br.conv1.w);
            f(&format!("{prefix}.conv1.b"), &mut br.conv1.b);
            f(&format!("{prefix}.prelu"), &mut br.prelu);
            f(&format!("{prefix}.conv2.w"), &mut br.conv2.w);
            f(&format!("{prefix}.conv2.b"), &mut br.conv2.b);
            f(&format!("{prefix}.fc.w"), &mut br.fc.w);
            f(&format!("{prefix}.fc.b"), &mut br.fc.b);
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        self.visit(|name, t| v.push((name.to_string(), t)));
        v
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.numel());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, t| ok &= t.all_finite());
        ok
    }
}

/// Tape handles for the parameters, in visit order.
pub struct BoundParams {
    pub vars: Vec<Var>,
    pub names: Vec<String>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &SudaParams, trainable: bool) -> Self {
        let mut vars = Vec::new();
        let mut names = Vec::new();
        params.visit(|name, t| {
            vars.push(tape.leaf(t.clone(), trainable));
            names.push(name.to_string());
        });
        BoundParams { vars, names }
    }

    fn get(&self, name: &str) -> Var {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[idx]
    }

    fn lstm(&self, prefix: &str) -> LstmVars {
        LstmVars {
            w_x: self.get(&format!("{prefix}.w_x")),
            w_h: self.get(&format!("{prefix}.w_h")),
            b: self.get(&format!("{prefix}.b")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Speaker,
    Utterance,
}

/// Tape handles for everything downstream code needs per utterance.
pub struct BranchActivations {
    pub fm_s: Var,
    pub fm_u: Var,
    pub mask_s: Option<Var>,
    pub mask_u: Option<Var>,
    pub masked_s: Var,
    pub masked_u: Var,
    pub emb_s: Var,
    pub emb_u: Var,
    pub logp_s: Var,
    pub logp_u: Var,
}

/// mask_s = 1 - sigmoid(fm_u), mask_u = 1 - sigmoid(fm_s).
pub fn compute_masks(tape: &mut Tape, fm_s: Var, fm_u: Var) -> Result<(Var, Var)> {
    if tape.shape(fm_s) != tape.shape(fm_u) {
        return Err(SudaError::ShapeMismatch {
            op: "compute_masks",
            detail: format!("{:?} vs {:?}", tape.shape(fm_s), tape.shape(fm_u)),
        });
    }
    let sig_u = tape.sigmoid(fm_u);
    let mask_s = tape.one_minus(sig_u);
    let sig_s = tape.sigmoid(fm_s);
    let mask_u = tape.one_minus(sig_s);
    Ok((mask_s, mask_u))
}

/// Elementwise product of feature map and mask.
pub fn apply_mask(tape: &mut Tape, fm: Var, mask: Var) -> Result<Var> {
    tape.mul(fm, mask)
}

fn branch_feature_map(
    tape: &mut Tape,
    h_shared: Var,
    bp: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    let lstm = bp.lstm(&format!("{prefix}.lstm"));
    let h = lstm_forward(tape, h_shared, &lstm)?;
    let ht = tape.transpose(h)?; // [hidden, NF]
    let c1w = bp.get(&format!("{prefix}.conv1.w"));
    let c1b = bp.get(&format!("{prefix}.conv1.b"));
    let a = tape.conv1d(ht, c1w, c1b)?;
    let slope = bp.get(&format!("{prefix}.prelu"));
    let a = tape.prelu(a, slope)?;
    let c2w = bp.get(&format!("{prefix}.conv2.w"));
    let c2b = bp.get(&format!("{prefix}.conv2.b"));
    tape.conv1d(a, c2w, c2b)
}

/// Full forward pass for one utterance.
pub fn forward(
    tape: &mut Tape,
    features: &FeatureMatrix,
    bp: &BoundParams,
    cfg: &SudaConfig,
) -> Result<BranchActivations> {
    if features.dim != cfg.input_dim {
        return Err(SudaError::ShapeMismatch {
            op: "forward",
            detail: format!("feature dim {} vs input_dim {}", features.dim, cfg.input_dim),
        });
    }
    if features.num_frames < CONV_KERNEL {
        return Err(SudaError::UtteranceTooShort {
            needed: CONV_KERNEL,
            got: features.num_frames,
            unit: "frames",
        });
    }
    let xs = tape.leaf(
        Tensor::new(
            vec![features.num_frames, features.dim],
            features.data.clone(),
        )?,
        false,
    );
    let shared = bp.lstm("shared");
    let h_shared = lstm_forward(tape, xs, &shared)?;
    let fm_s = branch_feature_map(tape, h_shared, bp, "spk")?;
    let fm_u = branch_feature_map(tape, h_shared, bp, "utt")?;

    let (mask_s, mask_u, masked_s, masked_u) = if cfg.masks_enabled {
        let (ms, mu) = compute_masks(tape, fm_s, fm_u)?;
        let xs_ = apply_mask(tape, fm_s, ms)?;
        let xu_ = apply_mask(tape, fm_u, mu)?;
        (Some(ms), Some(mu), xs_, xu_)
    } else {
        (None, None, fm_s, fm_u)
    };

    let emb_s = tape.mean_time(masked_s)?;
    let emb_u = tape.mean_time(masked_u)?;

    let fw_s = bp.get("spk.fc.w");
    let fb_s = bp.get("spk.fc.b");
    let logits_s = tape.affine_vec(fw_s, emb_s, fb_s)?;
    let logp_s = tape.log_softmax(logits_s)?;
    let fw_u = bp.get("utt.fc.w");
    let fb_u = bp.get("utt.fc.b");
    let logits_u = tape.affine_vec(fw_u, emb_u, fb_u)?;
    let logp_u = tape.log_softmax(logits_u)?;

    Ok(BranchActivations {
        fm_s,
        fm_u,
        mask_s,
        mask_u,
        masked_s,
        masked_u,
        emb_s,
        emb_u,
        logp_s,
        logp_u,
    })
}

/// Embedding (post-GAP, pre-FC) for one branch.
pub fn embed(
    features: &FeatureMatrix,
    params: &SudaParams,
    cfg: &SudaConfig,
    branch: Branch,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bp = BoundParams::bind(&mut tape, params, false);
    let acts = forward(&mut tape, features, &bp, cfg)?;
    let v = match branch {
        Branch::Speaker => acts.emb_s,
        Branch::Utterance => acts.emb_u,
    };
    Ok(tape.value(v).data.clone())
}

/// Both embeddings in one forward pass.
pub fn embed_both(
    features: &FeatureMatrix,
    params: &SudaParams,
    cfg: &SudaConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let bp = BoundParams::bind(&mut tape, params, false);
    let acts = forward(&mut tape, features, &bp, cfg)?;
    Ok((
        tape.value(acts.emb_s).data.clone(),
        tape.value(acts.emb_u).data.clone(),
    ))
}
