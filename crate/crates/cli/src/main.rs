//! `suda`: operate the verification pipeline end to end — corpus
//! synthesis, feature extraction, training, embedding, trial lists,
//! scoring, evaluation and the masked-vs-unmasked ablation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use suda_core::config::RunConfig;
use suda_core::frontend::{extract_features, read_feat, write_feat, FeatureMatrix, FEATURE_DIM};
use suda_core::network::{embed_both, SudaConfig, SudaParams};
use suda_core::protocol::{
    enroll_model, generate_trials, load_trials, serialize_trials, split_enrollment, Manifest,
    Split, Trial, TrialCategory, Utterance, ENROLL_SESSIONS,
};
use suda_core::scoring::{
    cosine_score, eval_condition, fuse, load_scores, serialize_scores, ScoreRecord,
};
use suda_core::synth::generate_corpus;
use suda_core::trainer::{train, TrainItem, TrainLog};
use suda_core::wav::read_wav;
use suda_core::{checkpoint, SudaError};

#[derive(Parser)]
#[command(name = "suda", version, about = "speaker + utterance verification pipeline")]
struct Cli {
    /// run configuration file (key = value lines)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// override the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Condition {
    Tw,
    Ic,
    Iw,
}

impl Condition {
    fn category(self) -> TrialCategory {
        match self {
            Condition::Tw => TrialCategory::TargetWrong,
            Condition::Ic => TrialCategory::ImpostorCorrect,
            Condition::Iw => TrialCategory::ImpostorWrong,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Background,
    Development,
    Evaluation,
}

impl SplitArg {
    fn split(self) -> Split {
        match self {
            SplitArg::Background => Split::Background,
            SplitArg::Development => Split::Development,
            SplitArg::Evaluation => Split::Evaluation,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifest
    Synth {
        /// output directory (default: the configured data_dir)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract features for every manifest utterance
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        /// directory for per-utterance feature files
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the background split and write a checkpoint
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// directory holding extracted features
        #[arg(long)]
        feats: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// train the unmasked variant
        #[arg(long)]
        no_masks: bool,
        /// write the per-step loss table here
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compute both embeddings for every manifest utterance
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        feats: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a trial list for one non-target condition
    Trials {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        condition: Condition,
        #[arg(long, value_enum, default_value = "evaluation")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trial list from precomputed embeddings
    Score {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// fusion weight on the speaker branch (default from config)
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report EER per condition present in a score file
    Eval {
        #[arg(long)]
        scores: PathBuf,
    },
    /// Train masked and unmasked variants from one init and compare
    Ablate {
        /// working directory for corpus, features and reports
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Synth { out } => cmd_synth(&cfg, out),
        Command::Extract { manifest, out } => cmd_extract(&manifest, &out),
        Command::Train {
            manifest,
            feats,
            out,
            no_masks,
            log,
        } => cmd_train(&cfg, &manifest, &feats, &out, no_masks, log.as_deref()).map(|_| ()),
        Command::Embed {
            checkpoint,
            manifest,
            feats,
            out,
        } => cmd_embed(&checkpoint, &manifest, &feats, &out),
        Command::Trials {
            manifest,
            condition,
            split,
            out,
        } => cmd_trials(&manifest, condition.category(), split.split(), &out),
        Command::Score {
            embeddings,
            manifest,
            trials,
            alpha,
            out,
        } => cmd_score(
            &embeddings,
            &manifest,
            &trials,
            alpha.unwrap_or(cfg.alpha),
            &out,
        ),
        Command::Eval { scores } => cmd_eval(&scores),
        Command::Ablate { out } => cmd_ablate(&cfg, &out),
    }
}

fn cmd_synth(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| cfg.data_dir.clone());
    let manifest = generate_corpus(&cfg.corpus_config(), &out)?;
    let path = out.join("manifest.tsv");
    manifest.save(&path)?;
    println!(
        "wrote {} utterances, manifest {}",
        manifest.utterances.len(),
        path.display()
    );
    Ok(())
}

fn feat_path(dir: &Path, utt_id: &str) -> PathBuf {
    dir.join(format!("{utt_id}.feat"))
}

fn emb_path(dir: &Path, utt_id: &str) -> PathBuf {
    dir.join(format!("{utt_id}.emb"))
}

fn cmd_extract(manifest: &Path, out: &Path) -> Result<()> {
    let manifest = Manifest::load(manifest)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for u in &manifest.utterances {
        let wav = read_wav(&u.path)?;
        let feats = extract_features(&wav)
            .with_context(|| format!("extracting features for {}", u.utt_id))?;
        write_feat(&feat_path(out, &u.utt_id), &feats)?;
    }
    println!("extracted features for {} utterances", manifest.utterances.len());
    Ok(())
}

/// Dense (speaker, phrase) label maps over the background split,
/// in sorted-name order so labels are stable across runs.
fn label_maps(background: &[&Utterance]) -> (BTreeMap<String, usize>, BTreeMap<String, usize>) {
    let mut speakers: Vec<&str> = background.iter().map(|u| u.speaker.as_str()).collect();
    speakers.sort();
    speakers.dedup();
    let mut phrases: Vec<&str> = background.iter().map(|u| u.phrase.as_str()).collect();
    phrases.sort();
    phrases.dedup();
    (
        speakers
            .iter()
            .enumerate()
            .map(|(i, s)| (s.to_string(), i))
            .collect(),
        phrases
            .iter()
            .enumerate()
            .map(|(i, p)| (p.to_string(), i))
            .collect(),
    )
}

fn load_train_items(background: &[&Utterance], feats: &Path) -> Result<(Vec<TrainItem>, usize, usize)> {
    let (spk_map, phr_map) = label_maps(background);
    let mut items = Vec::new();
    for u in background {
        let f = read_feat(&feat_path(feats, &u.utt_id))?;
        items.push(TrainItem {
            speaker_label: spk_map[&u.speaker],
            phrase_label: phr_map[&u.phrase],
            features: f,
        });
    }
    Ok((items, spk_map.len(), phr_map.len()))
}

fn network_config(cfg: &RunConfig, n_speakers: usize, n_phrases: usize, masks: bool) -> SudaConfig {
    SudaConfig {
        input_dim: FEATURE_DIM,
        shared_hidden: cfg.shared_hidden,
        branch_hidden: cfg.branch_hidden,
        conv_channels: cfg.conv_channels,
        embedding_dim: cfg.embedding_dim,
        n_speakers,
        n_phrases,
        masks_enabled: masks,
    }
}

fn write_train_log(path: &Path, cfg: &RunConfig, log: &TrainLog) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "# optimizer = {}", cfg.optimizer);
    let _ = writeln!(out, "# learning_rate = {}", cfg.learning_rate);
    let _ = writeln!(out, "# momentum = {}", cfg.momentum);
    let _ = writeln!(out, "# seed = {}", cfg.seed);
    let _ = writeln!(out, "step\tepoch\tl_tspk\tl_tutt\tl_spk\tl_utt\tl_total");
    for s in &log.steps {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}",
            s.step, s.epoch, s.bundle.l_tspk, s.bundle.l_tutt, s.bundle.l_spk, s.bundle.l_utt,
            s.bundle.l_total
        );
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(
    cfg: &RunConfig,
    manifest: &Path,
    feats: &Path,
    out: &Path,
    no_masks: bool,
    log_path: Option<&Path>,
) -> Result<TrainLog> {
    let manifest = Manifest::load(manifest)?;
    let background = manifest.split(Split::Background);
    if background.is_empty() {
        bail!("manifest has no background utterances to train on");
    }
    let (items, n_speakers, n_phrases) = load_train_items(&background, feats)?;
    let masks = cfg.masks_enabled && !no_masks;
    let net = network_config(cfg, n_speakers, n_phrases, masks);
    net.validate()?;
    let mut params = SudaParams::init(&net, cfg.seed)?;
    let log = train(&mut params, &net, &items, &cfg.train_config(), None)?;
    checkpoint::save_checkpoint(out, &net, &params)?;
    if let Some(p) = log_path {
        write_train_log(p, cfg, &log)?;
    }
    if let (Some(first), Some(last)) = (log.steps.first(), log.steps.last()) {
        println!(
            "trained {} steps: loss {:.4} -> {:.4}, checkpoint {}",
            log.steps.len(),
            first.bundle.l_total,
            last.bundle.l_total,
            out.display()
        );
    }
    Ok(log)
}

fn cmd_embed(checkpoint_path: &Path, manifest: &Path, feats: &Path, out: &Path) -> Result<()> {
    let (net, params) = checkpoint::load_checkpoint(checkpoint_path)?;
    let manifest = Manifest::load(manifest)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for u in &manifest.utterances {
        let f = read_feat(&feat_path(feats, &u.utt_id))?;
        let (emb_s, emb_u) = embed_both(&f, &params, &net)?;
        let dim = emb_s.len();
        let mut data = emb_s;
        data.extend(emb_u);
        // row 0: speaker embedding, row 1: utterance embedding
        let m = FeatureMatrix {
            num_frames: 2,
            dim,
            data,
        };
        write_feat(&emb_path(out, &u.utt_id), &m)?;
    }
    println!("embedded {} utterances", manifest.utterances.len());
    Ok(())
}

fn cmd_trials(manifest: &Path, condition: TrialCategory, split: Split, out: &Path) -> Result<()> {
    let manifest = Manifest::load(manifest)?;
    let utts = manifest.split(split);
    if utts.is_empty() {
        bail!("manifest has no {} utterances", split.as_str());
    }
    let (enroll, test) = split_enrollment(&utts)?;
    let trials = generate_trials(&enroll, &test, condition)?;
    std::fs::write(out, serialize_trials(&trials))
        .with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} trials to {}", trials.len(), out.display());
    Ok(())
}

fn load_embedding(dir: &Path, utt_id: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let path = emb_path(dir, utt_id);
    let m = read_feat(&path)?;
    if m.num_frames != 2 {
        return Err(SudaError::Format {
            format: "embedding",
            path,
            detail: format!("expected 2 rows, got {}", m.num_frames),
        }
        .into());
    }
    Ok((m.row(0).to_vec(), m.row(1).to_vec()))
}

fn score_trials(
    embeddings: &Path,
    manifest: &Manifest,
    trials: &[Trial],
    alpha: f64,
) -> Result<Vec<ScoreRecord>> {
    // one enrollment model per distinct (speaker, phrase) in the trial list
    let mut models: Vec<(String, String)> = trials
        .iter()
        .map(|t| (t.model_speaker.clone(), t.model_phrase.clone()))
        .collect();
    models.sort();
    models.dedup();
    let mut enrolled: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (spk, phr) in models {
        let mut spk_embs = Vec::new();
        let mut utt_embs = Vec::new();
        for session in ENROLL_SESSIONS {
            let u = manifest
                .utterances
                .iter()
                .find(|u| u.speaker == spk && u.phrase == phr && u.session == session)
                .ok_or_else(|| {
                    SudaError::Manifest(format!(
                        "missing enrollment session {session} for speaker {spk} phrase {phr}"
                    ))
                })?;
            let (es, eu) = load_embedding(embeddings, &u.utt_id)?;
            spk_embs.push(es);
            utt_embs.push(eu);
        }
        let model = (enroll_model(&spk_embs)?, enroll_model(&utt_embs)?);
        enrolled.insert((spk, phr), model);
    }
    let mut records = Vec::with_capacity(trials.len());
    for t in trials {
        let model = &enrolled[&(t.model_speaker.clone(), t.model_phrase.clone())];
        let (test_s, test_u) = load_embedding(embeddings, &t.test_utt)?;
        let s_spk = cosine_score(&model.0, &test_s)?;
        let s_utt = cosine_score(&model.1, &test_u)?;
        records.push(ScoreRecord {
            trial: t.clone(),
            s_spk,
            s_utt,
            fused: fuse(s_spk, s_utt, alpha)?,
        });
    }
    Ok(records)
}

fn cmd_score(
    embeddings: &Path,
    manifest: &Path,
    trials: &Path,
    alpha: f64,
    out: &Path,
) -> Result<()> {
    let manifest = Manifest::load(manifest)?;
    let trials = load_trials(trials)?;
    let records = score_trials(embeddings, &manifest, &trials, alpha)?;
    std::fs::write(out, serialize_scores(&records))
        .with_context(|| format!("writing {}", out.display()))?;
    println!("scored {} trials to {}", records.len(), out.display());
    Ok(())
}

fn cmd_eval(scores: &Path) -> Result<()> {
    let records = load_scores(scores)?;
    let mut any = false;
    for cat in [
        TrialCategory::TargetWrong,
        TrialCategory::ImpostorCorrect,
        TrialCategory::ImpostorWrong,
    ] {
        if records.iter().any(|r| r.trial.category == cat) {
            let r = eval_condition(&records, cat)?;
            println!(
                "{}: EER {:.2}% (threshold {:.6}, {} targets, {} nontargets)",
                cat.as_str(),
                r.eer,
                r.threshold,
                r.n_target,
                r.n_nontarget
            );
            any = true;
        }
    }
    if !any {
        bail!("score file contains no non-target trials");
    }
    Ok(())
}

/// Full pipeline for one variant: train, embed the evaluation split and
/// return (condition, EER%) for TW, IC, IW.
fn ablate_variant(
    cfg: &RunConfig,
    manifest: &Manifest,
    feats: &Path,
    work: &Path,
    masks: bool,
) -> Result<Vec<(TrialCategory, f64)>> {
    let background = manifest.split(Split::Background);
    let (items, n_speakers, n_phrases) = load_train_items(&background, feats)?;
    let net = network_config(cfg, n_speakers, n_phrases, masks);
    net.validate()?;
    let mut params = SudaParams::init(&net, cfg.seed)?;
    train(&mut params, &net, &items, &cfg.train_config(), None)?;

    let emb_dir = work.join(if masks { "emb_masked" } else { "emb_unmasked" });
    std::fs::create_dir_all(&emb_dir)?;
    let eval_utts = manifest.split(Split::Evaluation);
    for u in &eval_utts {
        let f = read_feat(&feat_path(feats, &u.utt_id))?;
        let (emb_s, emb_u) = embed_both(&f, &params, &net)?;
        let dim = emb_s.len();
        let mut data = emb_s;
        data.extend(emb_u);
        write_feat(
            &emb_path(&emb_dir, &u.utt_id),
            &FeatureMatrix {
                num_frames: 2,
                dim,
                data,
            },
        )?;
    }
    let (enroll, test) = split_enrollment(&eval_utts)?;
    let mut results = Vec::new();
    for cat in [
        TrialCategory::TargetWrong,
        TrialCategory::ImpostorCorrect,
        TrialCategory::ImpostorWrong,
    ] {
        let trials = generate_trials(&enroll, &test, cat)?;
        let records = score_trials(&emb_dir, manifest, &trials, cfg.alpha)?;
        results.push((cat, eval_condition(&records, cat)?.eer));
    }
    Ok(results)
}

fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest_path = out.join("manifest.tsv");
    let manifest = if manifest_path.exists() {
        Manifest::load(&manifest_path)?
    } else {
        let m = generate_corpus(&cfg.corpus_config(), out)?;
        m.save(&manifest_path)?;
        m
    };
    let feats = out.join("feats");
    if !feats.exists() {
        std::fs::create_dir_all(&feats)?;
        for u in &manifest.utterances {
            let wav = read_wav(&u.path)?;
            write_feat(&feat_path(&feats, &u.utt_id), &extract_features(&wav)?)?;
        }
    }
    let masked = ablate_variant(cfg, &manifest, &feats, out, true)?;
    let unmasked = ablate_variant(cfg, &manifest, &feats, out, false)?;

    use std::fmt::Write as _;
    let mut report = String::new();
    let _ = writeln!(report, "condition\tmasked_eer\tunmasked_eer");
    println!("condition  masked  unmasked");
    for ((cat, m), (_, u)) in masked.iter().zip(&unmasked) {
        let _ = writeln!(report, "{}\t{:.4}\t{:.4}", cat.as_str(), m, u);
        println!("{:<9}  {:>6.2}  {:>8.2}", cat.as_str(), m, u);
    }
    let report_path = out.join("ablation.tsv");
    std::fs::write(&report_path, report)
        .with_context(|| format!("writing {}", report_path.display()))?;
    println!("report written to {}", report_path.display());
    Ok(())
}
