//! Deterministic synthetic speaker x phrase x session corpus.
//!
//! Source-filter synthesis: a glottal impulse train at the speaker's
//! fundamental frequency drives a cascade of formant resonators taken
//! from the phrase's vowel sequence, scaled by the speaker's formant
//! shift and shaped by a spectral tilt. Session variation adds F0
//! jitter (+-2%), gain (+-3 dB) and noise at 30 dB SNR. Every sample is
//! a pure function of (corpus seed, speaker, phrase, session).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SudaError};
use crate::protocol::{Manifest, Split, Utterance};
use crate::wav::{write_wav, Waveform};

pub const SAMPLE_RATE: u32 = 16000;
pub const SESSIONS_PER_PAIR: u32 = 9;

/// Per-speaker voice traits, fully determined by (seed, speaker id).
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerSpec {
    pub id: usize,
    pub f0_hz: f64,
    pub formant_shift: f64,
    /// per-formant deviation from the global shift, a vocal-tract "signature"
    pub formant_warp: [f64; 3],
    pub tilt_db_per_octave: f64,
}

/// One vowel-like segment: formant triple and duration.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub formants_hz: [f64; 3],
    pub duration_ms: f64,
}

/// Per-phrase content, fully determined by (seed, phrase id).
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseSpec {
    pub id: usize,
    pub segments: Vec<Segment>,
}

impl PhraseSpec {
    pub fn duration_ms(&self) -> f64 {
        self.segments.iter().map(|s| s.duration_ms).sum()
    }
}

/// Phrase duration style mirroring the two fixed-phrase corpus parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhraseStyle {
    /// 3-4 s phrases.
    Long,
    /// 1-2 s short commands.
    Short,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub n_phrases: usize,
    pub n_background: usize,
    pub n_development: usize,
    pub seed: u64,
    pub phrase_style: PhraseStyle,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_speakers: 16,
            n_phrases: 4,
            n_background: 8,
            n_development: 4,
            seed: 2020,
            phrase_style: PhraseStyle::Short,
        }
    }
}

fn mix(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    // splitmix-style hash so per-utterance streams are independent of
    // generation order
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(a.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(b.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn speaker_spec(seed: u64, id: usize) -> SpeakerSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 1, id as u64, 0));
    SpeakerSpec {
        id,
        f0_hz: rng.gen_range(80.0..300.0),
        formant_shift: rng.gen_range(0.80..1.25),
        formant_warp: [
            rng.gen_range(0.85..1.15),
            rng.gen_range(0.85..1.15),
            rng.gen_range(0.85..1.15),
        ],
        tilt_db_per_octave: rng.gen_range(-12.0..-3.0),
    }
}

// vowel formant templates (F1, F2, F3) in Hz
const VOWELS: [[f64; 3]; 8] = [
    [730.0, 1090.0, 2440.0], // a
    [270.0, 2290.0, 3010.0], // i
    [300.0, 870.0, 2240.0],  // u
    [530.0, 1840.0, 2480.0], // e
    [570.0, 840.0, 2410.0],  // o
    [660.0, 1720.0, 2410.0], // ae
    [490.0, 1350.0, 1690.0], // er
    [440.0, 1020.0, 2240.0], // aw
];

pub fn phrase_spec(seed: u64, id: usize, style: PhraseStyle) -> PhraseSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 2, id as u64, 0));
    let target_ms = match style {
        PhraseStyle::Long => rng.gen_range(3000.0..4000.0),
        PhraseStyle::Short => rng.gen_range(1000.0..2000.0),
    };
    let mut segments = Vec::new();
    let mut total = 0.0;
    while total < target_ms {
        let duration_ms: f64 = rng.gen_range(120.0..300.0);
        let vowel = VOWELS[rng.gen_range(0..VOWELS.len())];
        segments.push(Segment {
            formants_hz: vowel,
            duration_ms,
        });
        total += duration_ms;
    }
    PhraseSpec { id, segments }
}

struct Resonator {
    b0: f64,
    a1: f64,
    a2: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq_hz: f64, bandwidth_hz: f64) -> Self {
        let fs = SAMPLE_RATE as f64;
        let r = (-std::f64::consts::PI * bandwidth_hz / fs).exp();
        let theta = 2.0 * std::f64::consts::PI * freq_hz / fs;
        Resonator {
            b0: (1.0 - r) * (1.0 - r * r).max(1e-6).sqrt(),
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Render one utterance. Bit-identical for identical arguments.
pub fn synthesize(
    speaker: &SpeakerSpec,
    phrase: &PhraseSpec,
    session: u32,
    seed: u64,
) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(
        seed,
        3,
        speaker.id as u64,
        (phrase.id as u64) << 8 | session as u64,
    ));
    let fs = SAMPLE_RATE as f64;
    let f0 = speaker.f0_hz * (1.0 + rng.gen_range(-0.02..0.02));
    let gain_db: f64 = rng.gen_range(-3.0..3.0);

    // one-pole lowpass strength from the spectral tilt
    let tilt = (-speaker.tilt_db_per_octave - 3.0) / 9.0; // 0..1
    let tilt_pole = 0.2 + 0.6 * tilt;

    let mut samples = Vec::new();
    let mut phase = 0.0f64;
    let mut tilt_state = 0.0f64;
    for seg in &phrase.segments {
        let n = (seg.duration_ms / 1000.0 * fs).round() as usize;
        let bandwidths = [80.0, 120.0, 160.0];
        let mut resonators: Vec<Resonator> = seg
            .formants_hz
            .iter()
            .zip(bandwidths)
            .zip(speaker.formant_warp)
            .map(|((&f, bw), warp)| {
                Resonator::new((f * speaker.formant_shift * warp).min(fs * 0.45), bw)
            })
            .collect();
        for _ in 0..n {
            phase += f0 / fs;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            let mut v = 0.0;
            let mut x = pulse;
            for r in &mut resonators {
                x = r.step(x);
                v += x;
            }
            tilt_state = (1.0 - tilt_pole) * v + tilt_pole * tilt_state;
            samples.push(tilt_state);
        }
    }

    // normalize to a fixed RMS, apply session gain, add noise at 30 dB SNR
    let rms = (samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64).sqrt();
    let scale = if rms > 0.0 { 0.1 / rms } else { 0.0 };
    let gain = 10f64.powf(gain_db / 20.0);
    let noise_std = 0.1 * gain / 10f64.powf(30.0 / 20.0);
    for v in &mut samples {
        let noise: f64 = {
            // Box-Muller from two uniforms keeps the stream simple
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        *v = (*v * scale * gain + noise * noise_std).clamp(-1.0, 1.0);
    }
    Waveform {
        samples,
        sample_rate: SAMPLE_RATE,
    }
}

fn utt_id(speaker: usize, phrase: usize, session: u32) -> String {
    format!("s{:03}_p{:02}_{}", speaker, phrase, session)
}

/// Generate the full corpus on disk and return its manifest.
pub fn generate_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<Manifest> {
    if cfg.n_speakers < 2 || cfg.n_phrases < 2 {
        return Err(SudaError::InvalidArgument(
            "corpus needs at least 2 speakers and 2 phrases".into(),
        ));
    }
    if cfg.n_background + cfg.n_development > cfg.n_speakers {
        return Err(SudaError::Config(
            "split sizes exceed speaker count".into(),
        ));
    }
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| SudaError::io(&wav_dir, e))?;
    let phrases: Vec<PhraseSpec> = (0..cfg.n_phrases)
        .map(|p| phrase_spec(cfg.seed, p, cfg.phrase_style))
        .collect();
    let mut manifest = Manifest::default();
    for s in 0..cfg.n_speakers {
        let split = if s < cfg.n_background {
            Split::Background
        } else if s < cfg.n_background + cfg.n_development {
            Split::Development
        } else {
            Split::Evaluation
        };
        let speaker = speaker_spec(cfg.seed, s);
        for (p, phrase) in phrases.iter().enumerate() {
            for session in 1..=SESSIONS_PER_PAIR {
                let id = utt_id(s, p, session);
                let path: PathBuf = wav_dir.join(format!("{id}.wav"));
                let wav = synthesize(&speaker, phrase, session, cfg.seed);
                write_wav(&path, &wav)?;
                manifest.utterances.push(Utterance {
                    utt_id: id,
                    speaker: format!("s{:03}", s),
                    phrase: format!("p{:02}", p),
                    session,
                    split,
                    path,
                });
            }
        }
    }
    Ok(manifest)
}
