//! Joint training of both branches: SGD with momentum over per-utterance
//! graphs, batched by similar frame count, with closed-form loss seeds
//! backpropagated through each utterance's tape.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::frontend::FeatureMatrix;
use crate::losses::{mining_rng, total_loss, BatchOutputs, LossBundle};
use crate::network::{forward, BoundParams, SudaConfig, SudaParams};
use crate::tensor::Tape;

/// One training item: labels are dense indices into the background set.
pub struct TrainItem {
    pub speaker_label: usize,
    pub phrase_label: usize,
    pub features: FeatureMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub margin: f64,
    pub seed: u64,
    /// epochs without improvement before the learning rate is halved
    pub plateau_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 128,
            epochs: 30,
            margin: 0.2,
            seed: 2020,
            plateau_patience: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub bundle: LossBundle,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    /// optional per-epoch development snapshot (mean EER %, if evaluated)
    pub dev_eer: Vec<(usize, f64)>,
}

/// Forward the whole batch, compute the four-term loss and return
/// analytic gradients for every parameter, summed over the batch.
/// The caller's mining step must match `mining_rng(seed, step)`.
pub fn batch_gradients(
    params: &SudaParams,
    cfg: &SudaConfig,
    batch: &[&TrainItem],
    margin: f64,
    mine: &mut ChaCha8Rng,
) -> Result<(LossBundle, Vec<Vec<f64>>)> {
    let mut tapes = Vec::with_capacity(batch.len());
    let mut outputs = BatchOutputs {
        emb_s: Vec::new(),
        emb_u: Vec::new(),
        logp_s: Vec::new(),
        logp_u: Vec::new(),
        speaker_labels: batch.iter().map(|i| i.speaker_label).collect(),
        phrase_labels: batch.iter().map(|i| i.phrase_label).collect(),
    };
    for item in batch {
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, params, true);
        let acts = forward(&mut tape, &item.features, &bp, cfg)?;
        outputs.emb_s.push(tape.value(acts.emb_s).data.clone());
        outputs.emb_u.push(tape.value(acts.emb_u).data.clone());
        outputs.logp_s.push(tape.value(acts.logp_s).data.clone());
        outputs.logp_u.push(tape.value(acts.logp_u).data.clone());
        tapes.push((tape, bp, acts));
    }
    let (bundle, grads, _, _) = total_loss(&outputs, margin, mine)?;
    let n_params = tapes.first().map_or(0, |(_, bp, _)| bp.vars.len());
    let mut accum: Vec<Vec<f64>> = Vec::new();
    for (i, (tape, bp, acts)) in tapes.iter_mut().enumerate() {
        tape.backward_seeded(&[
            (acts.emb_s, grads.d_emb_s[i].clone()),
            (acts.emb_u, grads.d_emb_u[i].clone()),
            (acts.logp_s, grads.d_logp_s[i].clone()),
            (acts.logp_u, grads.d_logp_u[i].clone()),
        ])?;
        if accum.is_empty() {
            accum = vec![Vec::new(); n_params];
        }
        for (slot, &var) in accum.iter_mut().zip(&bp.vars) {
            let g = tape.grad(var).expect("trainable leaf has grad");
            if slot.is_empty() {
                slot.extend_from_slice(g);
            } else {
                for (a, &b) in slot.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
    Ok((bundle, accum))
}

/// Loss of a batch without gradients; used by finite-difference checks.
pub fn batch_loss(
    params: &SudaParams,
    cfg: &SudaConfig,
    batch: &[&TrainItem],
    margin: f64,
    mine: &mut ChaCha8Rng,
) -> Result<LossBundle> {
    let mut outputs = BatchOutputs {
        emb_s: Vec::new(),
        emb_u: Vec::new(),
        logp_s: Vec::new(),
        logp_u: Vec::new(),
        speaker_labels: batch.iter().map(|i| i.speaker_label).collect(),
        phrase_labels: batch.iter().map(|i| i.phrase_label).collect(),
    };
    for item in batch {
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, params, false);
        let acts = forward(&mut tape, &item.features, &bp, cfg)?;
        outputs.emb_s.push(tape.value(acts.emb_s).data.clone());
        outputs.emb_u.push(tape.value(acts.emb_u).data.clone());
        outputs.logp_s.push(tape.value(acts.logp_s).data.clone());
        outputs.logp_u.push(tape.value(acts.logp_u).data.clone());
    }
    let (bundle, _, _, _) = total_loss(&outputs, margin, mine)?;
    Ok(bundle)
}

/// Batches of similar length: sort by frame count, chunk, then shuffle
/// the chunk order per epoch.
fn epoch_batches(items: &[TrainItem], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by_key(|&i| (items[i].features.num_frames, i));
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    batches.shuffle(&mut rng);
    batches
}

/// Run SGD-with-momentum training, mutating `params` in place.
/// `dev_eval`, when given, is called after each epoch and its value
/// recorded in the log.
pub fn train(
    params: &mut SudaParams,
    cfg: &SudaConfig,
    items: &[TrainItem],
    tc: &TrainConfig,
    mut dev_eval: Option<&mut dyn FnMut(&SudaParams) -> f64>,
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    let mut velocity: Vec<Vec<f64>> = {
        let mut v = Vec::new();
        params.visit(|_, t| v.push(vec![0.0; t.numel()]));
        v
    };
    let mut lr = tc.learning_rate;
    let mut best_epoch_loss = f64::INFINITY;
    let mut stale_epochs = 0usize;
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        let batches = epoch_batches(items, tc.batch_size, tc.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for batch_idx in batches {
            let batch: Vec<&TrainItem> = batch_idx.iter().map(|&i| &items[i]).collect();
            let mut mine = mining_rng(tc.seed, step as u64);
            let (bundle, grads) = batch_gradients(params, cfg, &batch, tc.margin, &mut mine)?;
            let mut slot = 0;
            params.visit_mut(|_, t| {
                let v = &mut velocity[slot];
                let g = &grads[slot];
                for ((p, vel), &gr) in t.data.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vel = tc.momentum * *vel - lr * gr;
                    *p += *vel;
                }
                slot += 1;
            });
            if !params.all_finite() {
                return Err(crate::error::SudaError::NonFinite(
                    "parameters after optimizer step (reduce the learning rate)",
                ));
            }
            log.steps.push(StepLog {
                step,
                epoch,
                bundle,
            });
            epoch_loss += bundle.l_total;
            epoch_steps += 1;
            step += 1;
        }
        let mean_loss = epoch_loss / epoch_steps.max(1) as f64;
        if mean_loss < best_epoch_loss - 1e-4 {
            best_epoch_loss = mean_loss;
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= tc.plateau_patience {
                lr *= 0.5;
                stale_epochs = 0;
            }
        }
        if let Some(eval) = dev_eval.as_mut() {
            log.dev_eer.push((epoch, eval(params)));
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn micro_cfg() -> SudaConfig {
        SudaConfig {
            input_dim: 4,
            shared_hidden: 3,
            branch_hidden: 3,
            conv_channels: 5,
            embedding_dim: 5,
            n_speakers: 2,
            n_phrases: 2,
            masks_enabled: true,
        }
    }

    fn toy_items(cfg: &SudaConfig, n_per_class: usize, nf: usize, seed: u64) -> Vec<TrainItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut items = Vec::new();
        for s in 0..cfg.n_speakers {
            for p in 0..cfg.n_phrases {
                for _ in 0..n_per_class {
                    // class-dependent offsets keep the toy task learnable
                    let data: Vec<f64> = (0..nf * cfg.input_dim)
                        .map(|i| {
                            let base = rng.gen_range(-0.3..0.3);
                            base + 0.8 * (s as f64) * ((i % 2) as f64)
                                + 0.8 * (p as f64) * (((i + 1) % 2) as f64)
                        })
                        .collect();
                    items.push(TrainItem {
                        speaker_label: s,
                        phrase_label: p,
                        features: FeatureMatrix {
                            num_frames: nf,
                            dim: cfg.input_dim,
                            data,
                        },
                    });
                }
            }
        }
        items
    }

    #[test]
    fn batch_gradients_match_finite_differences() {
        let cfg = micro_cfg();
        let params = SudaParams::init(&cfg, 2020).unwrap();
        let items = toy_items(&cfg, 2, 8, 1);
        let batch: Vec<&TrainItem> = items.iter().collect();
        let (_, grads) = batch_gradients(
            &params,
            &cfg,
            &batch,
            0.2,
            &mut mining_rng(2020, 0),
        )
        .unwrap();
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut max_rel: f64 = 0.0;
        let named = params.named_tensors();
        for (slot, (name, t)) in named.iter().enumerate() {
            // sample a few coordinates per tensor
            for _ in 0..4.min(t.numel()) {
                let idx = rng.gen_range(0..t.numel());
                let mut plus = params.clone();
                let mut minus = params.clone();
                let mut s2 = 0;
                plus.visit_mut(|_, tt| {
                    if s2 == slot {
                        tt.data[idx] += h;
                    }
                    s2 += 1;
                });
                let mut s2 = 0;
                minus.visit_mut(|_, tt| {
                    if s2 == slot {
                        tt.data[idx] -= h;
                    }
                    s2 += 1;
                });
                let lp = batch_loss(&plus, &cfg, &batch, 0.2, &mut mining_rng(2020, 0))
                    .unwrap()
                    .l_total;
                let lm = batch_loss(&minus, &cfg, &batch, 0.2, &mut mining_rng(2020, 0))
                    .unwrap()
                    .l_total;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[slot][idx];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "{name}[{idx}]: analytic {an} fd {fd}");
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-4);
    }

    #[test]
    fn divergence_is_an_error_not_nan() {
        let cfg = micro_cfg();
        let items = toy_items(&cfg, 4, 8, 2);
        let tc = TrainConfig {
            learning_rate: 1e30,
            batch_size: 8,
            epochs: 10,
            ..TrainConfig::default()
        };
        let mut p = SudaParams::init(&cfg, 2020).unwrap();
        match train(&mut p, &cfg, &items, &tc, None) {
            Err(crate::error::SudaError::NonFinite(_)) => {}
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let cfg = micro_cfg();
        let items = toy_items(&cfg, 4, 8, 2);
        let tc = TrainConfig {
            learning_rate: 0.05,
            batch_size: 8,
            epochs: 15,
            ..TrainConfig::default()
        };
        let mut p1 = SudaParams::init(&cfg, 2020).unwrap();
        let log1 = train(&mut p1, &cfg, &items, &tc, None).unwrap();
        let first: f64 = log1.steps.iter().take(5).map(|s| s.bundle.l_total).sum();
        let last: f64 = log1
            .steps
            .iter()
            .rev()
            .take(5)
            .map(|s| s.bundle.l_total)
            .sum();
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        assert!(p1.all_finite());
        // reproducibility
        let mut p2 = SudaParams::init(&cfg, 2020).unwrap();
        let log2 = train(&mut p2, &cfg, &items, &tc, None).unwrap();
        for (a, b) in log1.steps.iter().zip(&log2.steps) {
            assert_eq!(a.bundle.l_total, b.bundle.l_total);
        }
        // decomposition identity on every logged step
        for s in &log1.steps {
            assert_eq!(
                s.bundle.l_total,
                s.bundle.l_tspk + s.bundle.l_tutt + s.bundle.l_spk + s.bundle.l_utt
            );
        }
    }

    #[test]
    fn cross_branch_coupling_through_masks() {
        let mut cfg = micro_cfg();
        let params = SudaParams::init(&cfg, 2020).unwrap();
        let items = toy_items(&cfg, 2, 8, 3);
        let batch: Vec<&TrainItem> = items.iter().collect();
        // speaker-branch NLL only: seed just logp_s
        let grad_norm_of_utt_conv = |cfg: &SudaConfig| -> f64 {
            let mut norms = 0.0;
            let mut tapes = Vec::new();
            for item in &batch {
                let mut tape = Tape::new();
                let bp = BoundParams::bind(&mut tape, &params, true);
                let acts = forward(&mut tape, &item.features, &bp, cfg).unwrap();
                tapes.push((tape, bp, acts));
            }
            for (tape, bp, acts) in tapes.iter_mut() {
                let k = tape.shape(acts.logp_s)[0];
                let mut seed = vec![0.0; k];
                seed[0] = 1.0;
                tape.backward_seeded(&[(acts.logp_s, seed)]).unwrap();
                for (name, &var) in bp.names.iter().zip(&bp.vars) {
                    if name.starts_with("utt.conv") {
                        norms += tape
                            .grad(var)
                            .unwrap()
                            .iter()
                            .map(|g| g * g)
                            .sum::<f64>();
                    }
                }
            }
            norms.sqrt()
        };
        cfg.masks_enabled = true;
        assert!(grad_norm_of_utt_conv(&cfg) > 0.0);
        cfg.masks_enabled = false;
        assert_eq!(grad_norm_of_utt_conv(&cfg), 0.0);
    }
}
