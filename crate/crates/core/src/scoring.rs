//! Cosine trial scoring, speaker/utterance score fusion and EER.
//!
//! EER convention: sweep candidate thresholds at every distinct score and
//! the midpoints between adjacent distinct scores; FRR(t) is the fraction
//! of targets below t, FAR(t) the fraction of non-targets at or above t;
//! the reported EER is (FAR + FRR) / 2 at the threshold minimizing
//! |FAR - FRR|, ties broken toward the lower threshold.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, SudaError};
use crate::protocol::{Trial, TrialCategory};

/// Fused and per-branch scores for one trial.
#[derive(Debug, Clone)]
pub struct ScoreRecord {
    pub trial: Trial,
    pub s_spk: f64,
    pub s_utt: f64,
    pub fused: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    /// Percentage in [0, 100].
    pub eer: f64,
    pub threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SudaError::ShapeMismatch {
            op: "cosine_score",
            detail: format!("lengths {} vs {}", a.len(), b.len()),
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(SudaError::InvalidArgument(
            "cosine_score of zero vector".into(),
        ));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Convex combination alpha * s_spk + (1 - alpha) * s_utt.
pub fn fuse(s_spk: f64, s_utt: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SudaError::InvalidArgument(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    Ok(alpha * s_spk + (1.0 - alpha) * s_utt)
}

pub fn compute_eer(targets: &[f64], nontargets: &[f64]) -> Result<EerResult> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(SudaError::EmptyInput("compute_eer"));
    }
    let mut candidates: Vec<f64> = targets.iter().chain(nontargets).cloned().collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let mut sweep: Vec<f64> = Vec::with_capacity(candidates.len() * 2 + 1);
    sweep.push(candidates[0] - 1.0);
    for w in candidates.windows(2) {
        sweep.push(w[0]);
        sweep.push((w[0] + w[1]) / 2.0);
    }
    sweep.push(*candidates.last().unwrap());
    sweep.push(candidates.last().unwrap() + 1.0);

    let nt = targets.len() as f64;
    let nn = nontargets.len() as f64;
    let mut best: Option<(f64, f64, f64)> = None; // (|FAR-FRR|, threshold, eer)
    for &t in &sweep {
        let frr = targets.iter().filter(|&&s| s < t).count() as f64 / nt;
        let far = nontargets.iter().filter(|&&s| s >= t).count() as f64 / nn;
        let gap = (far - frr).abs();
        let eer = (far + frr) / 2.0;
        let better = match best {
            None => true,
            Some((bg, bt, _)) => gap < bg || (gap == bg && t < bt),
        };
        if better {
            best = Some((gap, t, eer));
        }
    }
    let (_, threshold, eer) = best.unwrap();
    Ok(EerResult {
        eer: eer * 100.0,
        threshold,
        n_target: targets.len(),
        n_nontarget: nontargets.len(),
    })
}

/// EER of a condition: TC scores are targets, the condition's category
/// scores are non-targets, over the fused column.
pub fn eval_condition(scores: &[ScoreRecord], condition: TrialCategory) -> Result<EerResult> {
    let targets: Vec<f64> = scores
        .iter()
        .filter(|r| r.trial.category == TrialCategory::TargetCorrect)
        .map(|r| r.fused)
        .collect();
    let nontargets: Vec<f64> = scores
        .iter()
        .filter(|r| r.trial.category == condition)
        .map(|r| r.fused)
        .collect();
    if targets.is_empty() {
        return Err(SudaError::EmptyInput("eval_condition: no TC trials"));
    }
    if nontargets.is_empty() {
        return Err(SudaError::EmptyInput("eval_condition: no trials of the requested category"));
    }
    compute_eer(&targets, &nontargets)
}

/// Score file: model, test, category, s_spk, s_utt, fused at 6 decimals.
pub fn serialize_scores(scores: &[ScoreRecord]) -> String {
    let mut out = String::new();
    for r in scores {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            r.trial.model_id(),
            r.trial.test_utt,
            r.trial.category,
            r.s_spk,
            r.s_utt,
            r.fused
        );
    }
    out
}

pub fn parse_scores(text: &str, path: &Path) -> Result<Vec<ScoreRecord>> {
    let bad = |lineno: usize, detail: String| SudaError::Format {
        format: "scores",
        path: path.to_path_buf(),
        detail: format!("line {}: {}", lineno + 1, detail),
    };
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad(lineno, format!("expected 6 fields, got {}", f.len())));
        }
        let (model_speaker, model_phrase) = f[0]
            .rsplit_once('_')
            .ok_or_else(|| bad(lineno, "model id is not speaker_phrase".into()))?;
        let category = TrialCategory::parse(f[2])?;
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| bad(lineno, format!("bad number {s}")))
        };
        out.push(ScoreRecord {
            trial: Trial {
                model_speaker: model_speaker.to_string(),
                model_phrase: model_phrase.to_string(),
                test_utt: f[1].to_string(),
                category,
            },
            s_spk: num(f[3])?,
            s_utt: num(f[4])?,
            fused: num(f[5])?,
        });
    }
    Ok(out)
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| SudaError::io(path, e))?;
    parse_scores(&text, path)
}

#[cfg(test)]
pub mod oracle {
    /// Independent brute-force EER: evaluate FAR/FRR by direct counting
    /// at every threshold drawn from the pooled scores plus offsets.
    pub fn brute_force_eer(targets: &[f64], nontargets: &[f64]) -> (f64, f64) {
        let mut cands: Vec<f64> = Vec::new();
        for &s in targets.iter().chain(nontargets) {
            cands.push(s - 1.0);
            cands.push(s);
            for &o in targets.iter().chain(nontargets) {
                cands.push((s + o) / 2.0);
            }
            cands.push(s + 1.0);
        }
        cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cands.dedup();
        let mut best_gap = f64::INFINITY;
        let mut best_t = f64::NAN;
        let mut best_eer = f64::NAN;
        for &t in &cands {
            let mut fr = 0usize;
            for &s in targets {
                if s < t {
                    fr += 1;
                }
            }
            let mut fa = 0usize;
            for &s in nontargets {
                if s >= t {
                    fa += 1;
                }
            }
            let frr = fr as f64 / targets.len() as f64;
            let far = fa as f64 / nontargets.len() as f64;
            let gap = (far - frr).abs();
            if gap < best_gap || (gap == best_gap && t < best_t) {
                best_gap = gap;
                best_t = t;
                best_eer = (far + frr) / 2.0 * 100.0;
            }
        }
        (best_eer, best_t)
    }
}
