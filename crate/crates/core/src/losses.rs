//! Training objective: per-branch triplet losses on embeddings plus
//! per-branch negative log-likelihood, summed unweighted.
//!
//! Losses and their gradients w.r.t. the network outputs (embeddings and
//! log-probabilities) are computed in closed form here; the tape then
//! carries those seeds back through each utterance's graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SudaError};

pub const DEFAULT_MARGIN: f64 = 0.2;

/// Indices into a batch forming one (anchor, positive, negative) triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// The four components of the training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub l_tspk: f64,
    pub l_tutt: f64,
    pub l_spk: f64,
    pub l_utt: f64,
    pub l_total: f64,
}

impl LossBundle {
    pub fn new(l_tspk: f64, l_tutt: f64, l_spk: f64, l_utt: f64) -> Self {
        // fixed summation order so the decomposition identity is exact
        let l_total = l_tspk + l_tutt + l_spk + l_utt;
        LossBundle {
            l_tspk,
            l_tutt,
            l_spk,
            l_utt,
            l_total,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Pick one positive and one negative uniformly at random for every
/// anchor that has both available. Anchors lacking either are skipped.
pub fn mine_triplets(labels: &[usize], rng: &mut ChaCha8Rng) -> Vec<Triplet> {
    let mut triples = Vec::new();
    for anchor in 0..labels.len() {
        let positives: Vec<usize> = (0..labels.len())
            .filter(|&j| j != anchor && labels[j] == labels[anchor])
            .collect();
        let negatives: Vec<usize> = (0..labels.len())
            .filter(|&j| labels[j] != labels[anchor])
            .collect();
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        triples.push(Triplet {
            anchor,
            positive: positives[rng.gen_range(0..positives.len())],
            negative: negatives[rng.gen_range(0..negatives.len())],
        });
    }
    triples
}

/// Seeded generator for triplet mining, derived from (seed, step).
pub fn mining_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Mean hinge loss over triples: max(0, d(a,p) - d(a,n) + margin) with
/// squared Euclidean distance.
pub fn triplet_loss(embeddings: &[Vec<f64>], triples: &[Triplet], margin: f64) -> Result<f64> {
    if triples.is_empty() {
        return Err(SudaError::EmptyInput("triplet_loss"));
    }
    let sum: f64 = triples
        .iter()
        .map(|t| {
            let dp = sq_dist(&embeddings[t.anchor], &embeddings[t.positive]);
            let dn = sq_dist(&embeddings[t.anchor], &embeddings[t.negative]);
            (dp - dn + margin).max(0.0)
        })
        .sum();
    Ok(sum / triples.len() as f64)
}

/// Triplet loss plus its gradient w.r.t. each batch embedding.
/// Empty triple sets contribute zero loss and zero gradient.
pub fn triplet_loss_grad(
    embeddings: &[Vec<f64>],
    triples: &[Triplet],
    margin: f64,
) -> (f64, Vec<Vec<f64>>) {
    let dim = embeddings.first().map_or(0, |e| e.len());
    let mut grads = vec![vec![0.0; dim]; embeddings.len()];
    if triples.is_empty() {
        return (0.0, grads);
    }
    let scale = 1.0 / triples.len() as f64;
    let mut sum = 0.0;
    for t in triples {
        let a = &embeddings[t.anchor];
        let p = &embeddings[t.positive];
        let n = &embeddings[t.negative];
        let dp = sq_dist(a, p);
        let dn = sq_dist(a, n);
        let h = dp - dn + margin;
        if h <= 0.0 {
            continue;
        }
        sum += h;
        for i in 0..dim {
            grads[t.anchor][i] += scale * 2.0 * (n[i] - p[i]);
            grads[t.positive][i] += scale * 2.0 * (p[i] - a[i]);
            grads[t.negative][i] += scale * 2.0 * (a[i] - n[i]);
        }
    }
    (sum * scale, grads)
}

/// Negative log-likelihood of one sample given log-probabilities.
pub fn nll_loss(log_probs: &[f64], target: usize) -> Result<f64> {
    if target >= log_probs.len() {
        return Err(SudaError::InvalidArgument(format!(
            "target {} out of range for {} classes",
            target,
            log_probs.len()
        )));
    }
    Ok(-log_probs[target])
}

/// Batch-mean NLL plus gradient w.r.t. each sample's log-probabilities.
pub fn nll_loss_grad(log_probs: &[Vec<f64>], targets: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if log_probs.is_empty() {
        return Err(SudaError::EmptyInput("nll_loss_grad"));
    }
    let batch = log_probs.len() as f64;
    let mut sum = 0.0;
    let mut grads = Vec::with_capacity(log_probs.len());
    for (lp, &t) in log_probs.iter().zip(targets) {
        sum += nll_loss(lp, t)?;
        let mut g = vec![0.0; lp.len()];
        g[t] = -1.0 / batch;
        grads.push(g);
    }
    Ok((sum / batch, grads))
}

/// Gradients of the total loss w.r.t. every network output in the batch.
pub struct BatchGrads {
    pub d_emb_s: Vec<Vec<f64>>,
    pub d_emb_u: Vec<Vec<f64>>,
    pub d_logp_s: Vec<Vec<f64>>,
    pub d_logp_u: Vec<Vec<f64>>,
}

/// Per-batch network outputs needed by the loss.
pub struct BatchOutputs {
    pub emb_s: Vec<Vec<f64>>,
    pub emb_u: Vec<Vec<f64>>,
    pub logp_s: Vec<Vec<f64>>,
    pub logp_u: Vec<Vec<f64>>,
    pub speaker_labels: Vec<usize>,
    pub phrase_labels: Vec<usize>,
}

/// Total loss per the four-term sum, with gradients. Triplets are mined
/// with the given seeded generator; batches without valid triples
/// contribute zero triplet loss.
pub fn total_loss(
    outputs: &BatchOutputs,
    margin: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBundle, BatchGrads, Vec<Triplet>, Vec<Triplet>)> {
    let spk_triples = mine_triplets(&outputs.speaker_labels, rng);
    let utt_triples = mine_triplets(&outputs.phrase_labels, rng);
    let (l_tspk, d_emb_s) = triplet_loss_grad(&outputs.emb_s, &spk_triples, margin);
    let (l_tutt, d_emb_u) = triplet_loss_grad(&outputs.emb_u, &utt_triples, margin);
    let (l_spk, d_logp_s) = nll_loss_grad(&outputs.logp_s, &outputs.speaker_labels)?;
    let (l_utt, d_logp_u) = nll_loss_grad(&outputs.logp_u, &outputs.phrase_labels)?;
    Ok((
        LossBundle::new(l_tspk, l_tutt, l_spk, l_utt),
        BatchGrads {
            d_emb_s,
            d_emb_u,
            d_logp_s,
            d_logp_u,
        },
        spk_triples,
        utt_triples,
    ))
}
