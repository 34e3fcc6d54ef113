//! Run configuration: `key = value` text files with `#` comments.
//! Unknown keys are rejected so typos surface immediately.

use std::path::{Path, PathBuf};

use crate::error::{Result, SudaError};
use crate::synth::{CorpusConfig, PhraseStyle};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // network
    pub shared_hidden: usize,
    pub branch_hidden: usize,
    pub conv_channels: usize,
    pub embedding_dim: usize,
    pub masks_enabled: bool,
    // corpus
    pub n_speakers: usize,
    pub n_phrases: usize,
    pub n_background: usize,
    pub n_development: usize,
    pub phrase_style: PhraseStyle,
    // training
    pub optimizer: String,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub margin: f64,
    pub plateau_patience: usize,
    pub seed: u64,
    // scoring
    pub alpha: f64,
    // paths
    pub data_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            shared_hidden: 256,
            branch_hidden: 256,
            conv_channels: 512,
            embedding_dim: 512,
            masks_enabled: true,
            n_speakers: 16,
            n_phrases: 4,
            n_background: 8,
            n_development: 4,
            phrase_style: PhraseStyle::Short,
            optimizer: "sgd_momentum".into(),
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 128,
            epochs: 30,
            margin: 0.2,
            plateau_patience: 5,
            seed: 2020,
            alpha: 0.5,
            data_dir: PathBuf::from("data"),
        }
    }
}

fn style_str(s: PhraseStyle) -> &'static str {
    match s {
        PhraseStyle::Short => "short",
        PhraseStyle::Long => "long",
    }
}

fn parse_style(v: &str) -> Result<PhraseStyle> {
    match v {
        "short" => Ok(PhraseStyle::Short),
        "long" => Ok(PhraseStyle::Long),
        other => Err(SudaError::Config(format!(
            "phrase_style must be short or long, got {other}"
        ))),
    }
}

impl RunConfig {
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        s.push_str("# network\n");
        s.push_str(&format!("shared_hidden = {}\n", self.shared_hidden));
        s.push_str(&format!("branch_hidden = {}\n", self.branch_hidden));
        s.push_str(&format!("conv_channels = {}\n", self.conv_channels));
        s.push_str(&format!("embedding_dim = {}\n", self.embedding_dim));
        s.push_str(&format!("masks_enabled = {}\n", self.masks_enabled));
        s.push_str("# corpus\n");
        s.push_str(&format!("n_speakers = {}\n", self.n_speakers));
        s.push_str(&format!("n_phrases = {}\n", self.n_phrases));
        s.push_str(&format!("n_background = {}\n", self.n_background));
        s.push_str(&format!("n_development = {}\n", self.n_development));
        s.push_str(&format!("phrase_style = {}\n", style_str(self.phrase_style)));
        s.push_str("# training\n");
        s.push_str(&format!("optimizer = {}\n", self.optimizer));
        s.push_str(&format!("learning_rate = {}\n", self.learning_rate));
        s.push_str(&format!("momentum = {}\n", self.momentum));
        s.push_str(&format!("batch_size = {}\n", self.batch_size));
        s.push_str(&format!("epochs = {}\n", self.epochs));
        s.push_str(&format!("margin = {}\n", self.margin));
        s.push_str(&format!("plateau_patience = {}\n", self.plateau_patience));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str("# scoring\n");
        s.push_str(&format!("alpha = {}\n", self.alpha));
        s.push_str("# paths\n");
        s.push_str(&format!("data_dir = {}\n", self.data_dir.display()));
        s
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SudaError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            macro_rules! num {
                () => {
                    value.parse().map_err(|_| {
                        SudaError::Config(format!("line {}: bad value for {}: {}", lineno + 1, key, value))
                    })?
                };
            }
            match key {
                "shared_hidden" => cfg.shared_hidden = num!(),
                "branch_hidden" => cfg.branch_hidden = num!(),
                "conv_channels" => cfg.conv_channels = num!(),
                "embedding_dim" => cfg.embedding_dim = num!(),
                "masks_enabled" => cfg.masks_enabled = num!(),
                "n_speakers" => cfg.n_speakers = num!(),
                "n_phrases" => cfg.n_phrases = num!(),
                "n_background" => cfg.n_background = num!(),
                "n_development" => cfg.n_development = num!(),
                "phrase_style" => cfg.phrase_style = parse_style(value)?,
                "optimizer" => cfg.optimizer = value.to_string(),
                "learning_rate" => cfg.learning_rate = num!(),
                "momentum" => cfg.momentum = num!(),
                "batch_size" => cfg.batch_size = num!(),
                "epochs" => cfg.epochs = num!(),
                "margin" => cfg.margin = num!(),
                "plateau_patience" => cfg.plateau_patience = num!(),
                "seed" => cfg.seed = num!(),
                "alpha" => cfg.alpha = num!(),
                "data_dir" => cfg.data_dir = PathBuf::from(value),
                other => {
                    return Err(SudaError::Config(format!(
                        "line {}: unknown key: {}",
                        lineno + 1,
                        other
                    )))
                }
            }
        }
        if cfg.optimizer != "sgd_momentum" {
            return Err(SudaError::Config(format!(
                "unsupported optimizer: {}",
                cfg.optimizer
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| SudaError::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            n_speakers: self.n_speakers,
            n_phrases: self.n_phrases,
            n_background: self.n_background,
            n_development: self.n_development,
            seed: self.seed,
            phrase_style: self.phrase_style,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            margin: self.margin,
            seed: self.seed,
            plateau_patience: self.plateau_patience,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_identity() {
        let cfg = RunConfig {
            learning_rate: 0.0025,
            phrase_style: PhraseStyle::Long,
            epochs: 7,
            ..RunConfig::default()
        };
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::parse("epochz = 3\n").unwrap_err();
        assert!(err.to_string().contains("epochz"));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = RunConfig::parse("# comment\n\nepochs = 3  # trailing\n").unwrap();
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn bad_values_are_named() {
        let err = RunConfig::parse("epochs = many\n").unwrap_err();
        assert!(err.to_string().contains("epochs"));
        assert!(RunConfig::parse("optimizer = adam\n").is_err());
    }
}
