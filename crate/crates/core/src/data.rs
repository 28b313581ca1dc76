//! Synthetic timing-annotated parallel corpus: generation, decoder-side
//! target preparation, duration-noise augmentation, and corpus file I/O.
//!
//! The corpus stands in for paired speech/translation data with a forced
//! phoneme alignment. Every utterance is constructed so that the timing is
//! inferable from the feature rows: each source word contributes one template
//! row repeated for as many frames as the corresponding target phonemes last,
//! and silences contribute a dedicated template.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};
use crate::rng::derive_rng;
use crate::vocab::{Vocab, EOS_ID, OC_ID, RESERVED, SIL_ID};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg} (last valid utterance ends at line {})", line - 1)]
    Parse { line: usize, msg: String },
    #[error("line {line}: alignment durations sum to {sum} but total_frames is {total}")]
    DurationSumMismatch { line: usize, sum: u64, total: u32 },
    #[error("line {line}: features have {rows} rows but total_frames is {total}")]
    FeatureRowMismatch { line: usize, rows: usize, total: u32 },
    #[error("utterance is inconsistent: alignment durations sum to {sum}, total_frames is {total}")]
    Inconsistent { sum: u64, total: u32 },
    #[error("duration noise: sigma must be non-negative, got {0}")]
    NegativeSigma(f64),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// One phoneme (or silence) with its duration in 10 ms frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "(u32, u32, bool)", into = "(u32, u32, bool)")]
pub struct AlignmentEntry {
    pub unit: u32,
    pub duration: u32,
    pub is_silence: bool,
}

impl From<(u32, u32, bool)> for AlignmentEntry {
    fn from((unit, duration, is_silence): (u32, u32, bool)) -> Self {
        AlignmentEntry {
            unit,
            duration,
            is_silence,
        }
    }
}

impl From<AlignmentEntry> for (u32, u32, bool) {
    fn from(e: AlignmentEntry) -> Self {
        (e.unit, e.duration, e.is_silence)
    }
}

/// Source features plus the reference translation and phoneme alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub features: Vec<Vec<f64>>,
    pub total_frames: u32,
    pub target_bpe: Vec<u32>,
    pub alignment: Vec<AlignmentEntry>,
}

impl Utterance {
    pub fn duration_sum(&self) -> u64 {
        self.alignment.iter().map(|e| e.duration as u64).sum()
    }
}

/// Decoder-side ground truth: the joint token sequence and its aligned
/// duration, remaining-frames, and pause-flag sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTarget {
    /// Translation units, then `<OC>`, then phoneme units, then `<eos>`.
    pub tokens: Vec<u32>,
    /// Zero everywhere except phoneme-block positions.
    pub durations: Vec<u32>,
    /// Frames not yet accounted for when this position is emitted.
    pub remaining_frames: Vec<i64>,
    /// True exactly when the previous token was `SIL`.
    pub pause_flags: Vec<bool>,
}

impl PreparedTarget {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Interleave the translation block and the phoneme block into the joint
/// target sequence and derive durations, remaining frames, and pause flags.
pub fn prepare_target(u: &Utterance) -> Result<PreparedTarget, DataError> {
    let sum = u.duration_sum();
    if sum != u.total_frames as u64 {
        return Err(DataError::Inconsistent {
            sum,
            total: u.total_frames,
        });
    }

    let mut tokens = Vec::with_capacity(u.target_bpe.len() + u.alignment.len() + 2);
    tokens.extend_from_slice(&u.target_bpe);
    tokens.push(OC_ID);
    let mut durations = vec![0u32; tokens.len()];
    for e in &u.alignment {
        tokens.push(e.unit);
        durations.push(e.duration);
    }
    tokens.push(EOS_ID);
    durations.push(0);

    let n = tokens.len();
    let mut remaining_frames = Vec::with_capacity(n);
    let mut pause_flags = Vec::with_capacity(n);
    for t in 0..n {
        if t == 0 {
            remaining_frames.push(u.total_frames as i64);
            pause_flags.push(false);
        } else {
            remaining_frames.push(remaining_frames[t - 1] - durations[t - 1] as i64);
            pause_flags.push(tokens[t - 1] == SIL_ID);
        }
    }

    Ok(PreparedTarget {
        tokens,
        durations,
        remaining_frames,
        pause_flags,
    })
}

/// Gaussian noise on the duration sequence, applied only where the duration
/// is positive; zero-padded positions stay exactly zero. The result feeds the
/// duration embedding input only — regression targets keep the clean values.
pub fn add_duration_noise(
    durations: &[u32],
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, DataError> {
    if sigma < 0.0 {
        return Err(DataError::NegativeSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(durations.iter().map(|&d| d as f64).collect());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated above");
    Ok(durations
        .iter()
        .map(|&d| {
            if d > 0 {
                d as f64 + normal.sample(rng)
            } else {
                0.0
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

/// Generator knobs. All fields have documented defaults except `seed`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Source token inventory; the translation dictionary is a bijection, so
    /// this is also the number of translation units.
    pub src_vocab: usize,
    pub n_phonemes: usize,
    pub words_min: usize,
    pub words_max: usize,
    pub phonemes_per_word_min: usize,
    pub phonemes_per_word_max: usize,
    /// Global bounds for the per-unit duration ranges (frames).
    pub dur_min: u32,
    pub dur_max: u32,
    pub sil_prob: f64,
    pub sil_dur_min: u32,
    pub sil_dur_max: u32,
    pub feat_dim: usize,
    pub feat_noise: f64,
}

impl CorpusConfig {
    pub fn from_kv(mut kv: KvConfig) -> Result<Self, DataError> {
        let cfg = CorpusConfig {
            seed: kv.required("seed")?,
            n_train: kv.get("n_train", 2000)?,
            n_dev: kv.get("n_dev", 200)?,
            n_test: kv.get("n_test", 200)?,
            src_vocab: kv.get("src_vocab", 24)?,
            n_phonemes: kv.get("n_phonemes", 16)?,
            words_min: kv.get("words_min", 2)?,
            words_max: kv.get("words_max", 6)?,
            phonemes_per_word_min: kv.get("phonemes_per_word_min", 1)?,
            phonemes_per_word_max: kv.get("phonemes_per_word_max", 3)?,
            dur_min: kv.get("dur_min", 2)?,
            dur_max: kv.get("dur_max", 10)?,
            sil_prob: kv.get("sil_prob", 0.3)?,
            sil_dur_min: kv.get("sil_dur_min", 2)?,
            sil_dur_max: kv.get("sil_dur_max", 8)?,
            feat_dim: kv.get("feat_dim", 8)?,
            feat_noise: kv.get("feat_noise", 0.1)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        Self::from_kv(KvConfig::parse(text)?)
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| DataError::Config(ConfigError::Invalid(msg));
        if self.src_vocab == 0 || self.n_phonemes == 0 || self.feat_dim == 0 {
            return Err(bad("vocabulary sizes and feat_dim must be positive".into()));
        }
        if self.words_min == 0 || self.words_min > self.words_max {
            return Err(bad(format!(
                "invalid word count range {}..{}",
                self.words_min, self.words_max
            )));
        }
        if self.phonemes_per_word_min == 0
            || self.phonemes_per_word_min > self.phonemes_per_word_max
        {
            return Err(bad("invalid phonemes-per-word range".into()));
        }
        if self.dur_min == 0 || self.dur_min > self.dur_max {
            return Err(bad(format!(
                "invalid duration range {}..{}",
                self.dur_min, self.dur_max
            )));
        }
        if self.sil_dur_min == 0 || self.sil_dur_min > self.sil_dur_max {
            return Err(bad("invalid silence duration range".into()));
        }
        if !(0.0..=1.0).contains(&self.sil_prob) {
            return Err(bad(format!("sil_prob {} not in [0, 1]", self.sil_prob)));
        }
        if self.feat_noise < 0.0 {
            return Err(bad("feat_noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Joint vocabulary implied by this configuration.
    pub fn vocab(&self) -> Vocab {
        let words: Vec<String> = (0..self.src_vocab).map(|i| format!("w{i:02}")).collect();
        let phones: Vec<String> = (0..self.n_phonemes).map(|i| format!("p{i:02}")).collect();
        Vocab::new(&words, &phones)
    }

    pub fn vocab_size(&self) -> usize {
        RESERVED.len() + self.src_vocab + self.n_phonemes
    }
}

/// Fixed per-corpus tables derived from the seed: the bijective source-to-
/// translation dictionary, phoneme expansions, per-unit duration ranges, and
/// feature templates.
struct GenTables {
    /// source token -> translation unit id
    word_map: Vec<u32>,
    /// translation unit index -> phoneme unit ids
    expansions: Vec<Vec<u32>>,
    /// phoneme index -> inclusive duration range
    dur_ranges: Vec<(u32, u32)>,
    templates: Vec<Vec<f64>>,
    sil_template: Vec<f64>,
}

impl GenTables {
    fn build(cfg: &CorpusConfig) -> Self {
        let mut rng = derive_rng(cfg.seed, &[0x7ab1e5]);
        let base = RESERVED.len() as u32;
        let phoneme_base = base + cfg.src_vocab as u32;

        // bijective dictionary: a seeded permutation of the unit ids
        let mut perm: Vec<u32> = (0..cfg.src_vocab as u32).collect();
        for i in (1..perm.len()).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let word_map: Vec<u32> = perm.iter().map(|&p| base + p).collect();

        let expansions: Vec<Vec<u32>> = (0..cfg.src_vocab)
            .map(|_| {
                let n = rng.gen_range(cfg.phonemes_per_word_min..=cfg.phonemes_per_word_max);
                (0..n)
                    .map(|_| phoneme_base + rng.gen_range(0..cfg.n_phonemes as u32))
                    .collect()
            })
            .collect();

        let dur_ranges: Vec<(u32, u32)> = (0..cfg.n_phonemes)
            .map(|_| {
                let lo = rng.gen_range(cfg.dur_min..=cfg.dur_max);
                let hi = rng.gen_range(lo..=cfg.dur_max);
                (lo, hi)
            })
            .collect();

        let template = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..cfg.feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let templates: Vec<Vec<f64>> = (0..cfg.src_vocab).map(|_| template(&mut rng)).collect();
        let sil_template = template(&mut rng);

        GenTables {
            word_map,
            expansions,
            dur_ranges,
            templates,
            sil_template,
        }
    }
}

/// Deterministically generate `count` utterances on the given stream.
pub fn generate_corpus(cfg: &CorpusConfig, count: usize, stream: u64) -> Vec<Utterance> {
    let tables = GenTables::build(cfg);
    let mut rng = derive_rng(cfg.seed, &[0xc0fe, stream]);
    let noise = Normal::new(0.0, cfg.feat_noise.max(f64::MIN_POSITIVE)).unwrap();
    let phoneme_base = (RESERVED.len() + cfg.src_vocab) as u32;

    (0..count)
        .map(|_| {
            let n_words = rng.gen_range(cfg.words_min..=cfg.words_max);
            let source: Vec<usize> = (0..n_words)
                .map(|_| rng.gen_range(0..cfg.src_vocab))
                .collect();
            let target_bpe: Vec<u32> = source.iter().map(|&s| tables.word_map[s]).collect();

            // target-side alignment and mirrored source-side feature rows
            let mut alignment = Vec::new();
            let mut features: Vec<Vec<f64>> = Vec::new();
            let mut emit_rows = |template: &[f64], frames: u32, rng: &mut rand_chacha::ChaCha8Rng| {
                for _ in 0..frames {
                    features.push(
                        template
                            .iter()
                            .map(|&t| {
                                if cfg.feat_noise > 0.0 {
                                    t + noise.sample(rng)
                                } else {
                                    t
                                }
                            })
                            .collect(),
                    );
                }
            };
            for (w, &src) in source.iter().enumerate() {
                let unit_idx = (tables.word_map[src] - RESERVED.len() as u32) as usize;
                for &ph in &tables.expansions[unit_idx] {
                    let (lo, hi) = tables.dur_ranges[(ph - phoneme_base) as usize];
                    let dur = rng.gen_range(lo..=hi);
                    alignment.push(AlignmentEntry {
                        unit: ph,
                        duration: dur,
                        is_silence: false,
                    });
                    emit_rows(&tables.templates[src], dur, &mut rng);
                }
                let between = w + 1 < n_words;
                if between && rng.gen_bool(cfg.sil_prob) {
                    let dur = rng.gen_range(cfg.sil_dur_min..=cfg.sil_dur_max);
                    alignment.push(AlignmentEntry {
                        unit: SIL_ID,
                        duration: dur,
                        is_silence: true,
                    });
                    emit_rows(&tables.sil_template, dur, &mut rng);
                }
            }

            let total_frames = alignment.iter().map(|e| e.duration).sum();
            Utterance {
                features,
                total_frames,
                target_bpe,
                alignment,
            }
        })
        .collect()
}

/// The three corpus splits from one configuration.
pub struct CorpusSplits {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

pub fn generate_splits(cfg: &CorpusConfig) -> CorpusSplits {
    CorpusSplits {
        train: generate_corpus(cfg, cfg.n_train, 1),
        dev: generate_corpus(cfg, cfg.n_dev, 2),
        test: generate_corpus(cfg, cfg.n_test, 3),
    }
}

// ---------------------------------------------------------------------------
// corpus file I/O: one JSON utterance per line
// ---------------------------------------------------------------------------

pub fn write_corpus(path: &Path, corpus: &[Utterance]) -> Result<(), DataError> {
    let mut out = std::fs::File::create(path)?;
    let mut buf = String::new();
    for u in corpus {
        buf.push_str(&serde_json::to_string(u).expect("utterance serializes"));
        buf.push('\n');
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Utterance>, DataError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut corpus = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let u: Utterance = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let sum = u.duration_sum();
        if sum != u.total_frames as u64 {
            return Err(DataError::DurationSumMismatch {
                line: lineno,
                sum,
                total: u.total_frames,
            });
        }
        if u.features.len() != u.total_frames as usize {
            return Err(DataError::FeatureRowMismatch {
                line: lineno,
                rows: u.features.len(),
                total: u.total_frames,
            });
        }
        corpus.push(u);
    }
    Ok(corpus)
}
