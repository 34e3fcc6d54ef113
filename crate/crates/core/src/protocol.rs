//! Corpus manifest, enrollment split and the four-way trial taxonomy.
//!
//! Sessions 1, 4 and 7 of every (speaker, phrase) pair enroll the model;
//! the remaining sessions are test material. Trials pair an enrollment
//! model with a test utterance and fall into exactly one of TC, TW, IC,
//! IW depending on whether speaker and phrase match.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Result, SudaError};

pub const ENROLL_SESSIONS: [u32; 3] = [1, 4, 7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Background,
    Development,
    Evaluation,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Background => "background",
            Split::Development => "development",
            Split::Evaluation => "evaluation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "background" => Ok(Split::Background),
            "development" => Ok(Split::Development),
            "evaluation" => Ok(Split::Evaluation),
            other => Err(SudaError::Manifest(format!("unknown split: {other}"))),
        }
    }
}

/// One utterance in the corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker: String,
    pub phrase: String,
    pub session: u32,
    pub split: Split,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TrialCategory {
    TargetCorrect,
    TargetWrong,
    ImpostorCorrect,
    ImpostorWrong,
}

impl TrialCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrialCategory::TargetCorrect => "TC",
            TrialCategory::TargetWrong => "TW",
            TrialCategory::ImpostorCorrect => "IC",
            TrialCategory::ImpostorWrong => "IW",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "TC" => Ok(TrialCategory::TargetCorrect),
            "TW" => Ok(TrialCategory::TargetWrong),
            "IC" => Ok(TrialCategory::ImpostorCorrect),
            "IW" => Ok(TrialCategory::ImpostorWrong),
            other => Err(SudaError::InvalidArgument(format!(
                "unknown trial category: {other}"
            ))),
        }
    }
}

impl fmt::Display for TrialCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Category as a total function of speaker/phrase match.
pub fn categorize(
    model_speaker: &str,
    model_phrase: &str,
    test_speaker: &str,
    test_phrase: &str,
) -> TrialCategory {
    match (model_speaker == test_speaker, model_phrase == test_phrase) {
        (true, true) => TrialCategory::TargetCorrect,
        (true, false) => TrialCategory::TargetWrong,
        (false, true) => TrialCategory::ImpostorCorrect,
        (false, false) => TrialCategory::ImpostorWrong,
    }
}

/// One scored comparison: (speaker, phrase) model vs a test utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub model_speaker: String,
    pub model_phrase: String,
    pub test_utt: String,
    pub category: TrialCategory,
}

impl Trial {
    pub fn model_id(&self) -> String {
        format!("{}_{}", self.model_speaker, self.model_phrase)
    }
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Manifest> {
        let mut utterances = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(SudaError::Manifest(format!(
                    "line {}: expected 6 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let session: u32 = fields[3].parse().map_err(|_| {
                SudaError::Manifest(format!("line {}: bad session {}", lineno + 1, fields[3]))
            })?;
            if !(1..=9).contains(&session) {
                return Err(SudaError::Manifest(format!(
                    "line {}: session {} out of 1..9",
                    lineno + 1,
                    session
                )));
            }
            let split = Split::parse(fields[4])?;
            let key = (fields[1].to_string(), fields[2].to_string(), session, split);
            if !seen.insert(key) {
                return Err(SudaError::Manifest(format!(
                    "line {}: duplicate (speaker, phrase, session) within split",
                    lineno + 1
                )));
            }
            utterances.push(Utterance {
                utt_id: fields[0].to_string(),
                speaker: fields[1].to_string(),
                phrase: fields[2].to_string(),
                session,
                split,
                path: PathBuf::from(fields[5]),
            });
        }
        Ok(Manifest { utterances })
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| SudaError::io(path, e))?;
        Manifest::parse(&text)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for u in &self.utterances {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                u.utt_id,
                u.speaker,
                u.phrase,
                u.session,
                u.split.as_str(),
                u.path.display()
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize()).map_err(|e| SudaError::io(path, e))
    }

    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.split == split).collect()
    }
}

/// Partition a set of utterances into enrollment (sessions 1, 4, 7) and
/// test (the rest), checking every pair has its enrollment sessions.
pub fn split_enrollment<'a>(
    utterances: &[&'a Utterance],
) -> Result<(Vec<&'a Utterance>, Vec<&'a Utterance>)> {
    let mut by_pair: BTreeMap<(&str, &str), Vec<&Utterance>> = BTreeMap::new();
    for u in utterances {
        by_pair
            .entry((u.speaker.as_str(), u.phrase.as_str()))
            .or_default()
            .push(u);
    }
    let mut enroll = Vec::new();
    let mut test = Vec::new();
    for ((spk, phr), utts) in &by_pair {
        for s in ENROLL_SESSIONS {
            if !utts.iter().any(|u| u.session == s) {
                return Err(SudaError::Manifest(format!(
                    "missing enrollment session {} for speaker {} phrase {}",
                    s, spk, phr
                )));
            }
        }
        for u in utts {
            if ENROLL_SESSIONS.contains(&u.session) {
                enroll.push(*u);
            } else {
                test.push(*u);
            }
        }
    }
    Ok((enroll, test))
}

/// All TC trials plus all trials of the requested non-target category,
/// ordered by (model speaker, model phrase, test utterance id).
pub fn generate_trials(
    enroll: &[&Utterance],
    test: &[&Utterance],
    condition: TrialCategory,
) -> Result<Vec<Trial>> {
    if condition == TrialCategory::TargetCorrect {
        return Err(SudaError::InvalidArgument(
            "condition must be a non-target category (TW, IC or IW)".into(),
        ));
    }
    if enroll.is_empty() || test.is_empty() {
        return Err(SudaError::EmptyInput("generate_trials"));
    }
    let mut models: Vec<(&str, &str)> = enroll
        .iter()
        .map(|u| (u.speaker.as_str(), u.phrase.as_str()))
        .collect();
    models.sort();
    models.dedup();
    let mut tests: Vec<&&Utterance> = test.iter().collect();
    tests.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    let mut trials = Vec::new();
    for (spk, phr) in &models {
        for t in &tests {
            let cat = categorize(spk, phr, &t.speaker, &t.phrase);
            if cat == TrialCategory::TargetCorrect || cat == condition {
                trials.push(Trial {
                    model_speaker: spk.to_string(),
                    model_phrase: phr.to_string(),
                    test_utt: t.utt_id.clone(),
                    category: cat,
                });
            }
        }
    }
    Ok(trials)
}

pub fn serialize_trials(trials: &[Trial]) -> String {
    let mut out = String::new();
    for t in trials {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            t.model_id(),
            t.test_utt,
            t.category
        ));
    }
    out
}

/// Inverse of [`serialize_trials`]: model_id, test utterance, category.
pub fn parse_trials(text: &str, path: &Path) -> Result<Vec<Trial>> {
    let mut trials = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| SudaError::Format {
            format: "trials",
            path: path.to_path_buf(),
            detail: format!("line {}: {}", lineno + 1, detail),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", fields.len())));
        }
        let (speaker, phrase) = fields[0]
            .rsplit_once('_')
            .ok_or_else(|| bad(format!("model id without '_': {}", fields[0])))?;
        trials.push(Trial {
            model_speaker: speaker.to_string(),
            model_phrase: phrase.to_string(),
            test_utt: fields[1].to_string(),
            category: TrialCategory::parse(fields[2])
                .map_err(|e| bad(e.to_string()))?,
        });
    }
    Ok(trials)
}

pub fn load_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = std::fs::read_to_string(path).map_err(|e| SudaError::io(path, e))?;
    parse_trials(&text, path)
}

/// Mean-then-length-normalize the three enrollment session embeddings.
pub fn enroll_model(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    if embeddings.len() != ENROLL_SESSIONS.len() {
        return Err(SudaError::InvalidArgument(format!(
            "enrollment needs exactly {} embeddings, got {}",
            ENROLL_SESSIONS.len(),
            embeddings.len()
        )));
    }
    let dim = embeddings[0].len();
    let mut mean = vec![0.0; dim];
    for e in embeddings {
        if e.len() != dim {
            return Err(SudaError::ShapeMismatch {
                op: "enroll_model",
                detail: format!("embedding lengths {} vs {}", dim, e.len()),
            });
        }
        for (m, &v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= embeddings.len() as f64;
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(SudaError::DegenerateEnrollment("model".into()));
    }
    for m in &mut mean {
        *m /= norm;
    }
    Ok(mean)
}
