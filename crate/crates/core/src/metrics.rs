//! Translation-quality and timing-fidelity scoring: corpus BLEU over the
//! translation block and speech overlap between reference and predicted
//! durations.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;
use std::path::Path;

use thiserror::Error;

use crate::data::Utterance;
use crate::inference::DecodedRecord;

pub const BLEU_MAX_N: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("speech overlap: reference duration must be positive")]
    ZeroReferenceDuration,
    #[error("corpus BLEU: reference and hypothesis lists differ in length ({refs} vs {hyps})")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error("corpus BLEU: empty hypothesis set")]
    EmptySet,
    #[error("decoded id {0} is not present in the corpus")]
    UnknownId(usize),
    #[error("decoded id {0} appears more than once")]
    DuplicateId(usize),
    #[error("corpus utterance {0} is missing from the decoded output")]
    MissingId(usize),
    #[error("utterance {0} has zero total_frames; overlap is undefined")]
    ZeroFrames(usize),
    #[error("I/O: {0}")]
    Io(String),
}

/// Unclamped overlap: `1 - |ref - hyp| / ref`. Negative when the hypothesis
/// overshoots the reference by more than the reference itself.
pub fn speech_overlap_raw(ref_frames: u64, hyp_frames: u64) -> Result<f64, MetricsError> {
    if ref_frames == 0 {
        return Err(MetricsError::ZeroReferenceDuration);
    }
    let r = ref_frames as f64;
    let h = hyp_frames as f64;
    Ok(1.0 - (r - h).abs() / r)
}

/// Overlap clamped at zero so corpus means stay in [0, 1]; equals 1 exactly
/// when the durations match.
pub fn speech_overlap(ref_frames: u64, hyp_frames: u64) -> Result<f64, MetricsError> {
    Ok(speech_overlap_raw(ref_frames, hyp_frames)?.max(0.0))
}

/// Clipped n-gram match and total counts for one sentence pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SentenceStats {
    pub matches: [u64; BLEU_MAX_N],
    pub totals: [u64; BLEU_MAX_N],
    pub ref_len: u64,
    pub hyp_len: u64,
}

pub fn sentence_stats<T: Eq + Hash>(reference: &[T], hypothesis: &[T]) -> SentenceStats {
    let mut stats = SentenceStats {
        ref_len: reference.len() as u64,
        hyp_len: hypothesis.len() as u64,
        ..SentenceStats::default()
    };
    for n in 1..=BLEU_MAX_N {
        if hypothesis.len() < n {
            break;
        }
        let mut ref_counts: HashMap<&[T], u64> = HashMap::new();
        if reference.len() >= n {
            for g in reference.windows(n) {
                *ref_counts.entry(g).or_default() += 1;
            }
        }
        let mut hyp_counts: HashMap<&[T], u64> = HashMap::new();
        for g in hypothesis.windows(n) {
            *hyp_counts.entry(g).or_default() += 1;
        }
        let total = (hypothesis.len() - n + 1) as u64;
        let matched: u64 = hyp_counts
            .iter()
            .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
        stats.matches[n - 1] = matched;
        stats.totals[n - 1] = total;
    }
    stats
}

/// BLEU (0-100) from accumulated corpus-level counts: geometric mean of the
/// clipped n-gram precisions times the brevity penalty. When an n-gram order
/// (n >= 2) has zero matches its precision is smoothed to
/// `(matches+1)/(total+1)`.
pub fn bleu_from_stats(stats: &SentenceStats) -> f64 {
    if stats.hyp_len == 0 || stats.matches[0] == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..BLEU_MAX_N {
        let (m, t) = (stats.matches[n], stats.totals[n]);
        let p = if n > 0 && m == 0 {
            (m as f64 + 1.0) / (t as f64 + 1.0)
        } else if t == 0 {
            return 0.0;
        } else {
            m as f64 / t as f64
        };
        log_sum += p.ln();
    }
    let bp = if stats.hyp_len >= stats.ref_len {
        1.0
    } else {
        (1.0 - stats.ref_len as f64 / stats.hyp_len as f64).exp()
    };
    100.0 * bp * (log_sum / BLEU_MAX_N as f64).exp()
}

fn merge(into: &mut SentenceStats, s: &SentenceStats) {
    for n in 0..BLEU_MAX_N {
        into.matches[n] += s.matches[n];
        into.totals[n] += s.totals[n];
    }
    into.ref_len += s.ref_len;
    into.hyp_len += s.hyp_len;
}

/// Corpus-level BLEU over paired token sequences.
pub fn corpus_bleu<T: Eq + Hash>(
    references: &[Vec<T>],
    hypotheses: &[Vec<T>],
    _max_n: usize,
) -> Result<f64, MetricsError> {
    if references.len() != hypotheses.len() {
        return Err(MetricsError::LengthMismatch {
            refs: references.len(),
            hyps: hypotheses.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let mut corpus = SentenceStats::default();
    for (r, h) in references.iter().zip(hypotheses) {
        merge(&mut corpus, &sentence_stats(r, h));
    }
    Ok(bleu_from_stats(&corpus))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: usize,
    pub ref_frames: u64,
    pub hyp_frames: u64,
    pub overlap: f64,
    pub overlap_raw: f64,
    pub stats: SentenceStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub bleu: f64,
    pub mean_overlap: f64,
    pub mean_overlap_raw: f64,
    pub rows: Vec<EvalRow>,
}

/// Score a decoded set against its corpus: BLEU on the translation block
/// only, overlap between the source frame count and the predicted total
/// duration. Every corpus utterance must be decoded exactly once.
pub fn evaluate(decoded: &[DecodedRecord], corpus: &[Utterance]) -> Result<EvalReport, MetricsError> {
    if decoded.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let mut by_id: Vec<Option<&DecodedRecord>> = vec![None; corpus.len()];
    for r in decoded {
        if r.id >= corpus.len() {
            return Err(MetricsError::UnknownId(r.id));
        }
        if by_id[r.id].is_some() {
            return Err(MetricsError::DuplicateId(r.id));
        }
        by_id[r.id] = Some(r);
    }
    if let Some(missing) = by_id.iter().position(Option::is_none) {
        return Err(MetricsError::MissingId(missing));
    }

    let mut corpus_stats = SentenceStats::default();
    let mut rows = Vec::with_capacity(corpus.len());
    let (mut sum_overlap, mut sum_raw) = (0.0, 0.0);
    for (id, u) in corpus.iter().enumerate() {
        let rec = by_id[id].expect("checked above");
        if u.total_frames == 0 {
            return Err(MetricsError::ZeroFrames(id));
        }
        let stats = sentence_stats(&u.target_bpe, &rec.translation_ids());
        merge(&mut corpus_stats, &stats);
        let ref_frames = u.total_frames as u64;
        let hyp_frames = rec.total_duration_frames;
        let overlap_raw = speech_overlap_raw(ref_frames, hyp_frames)?;
        let overlap = overlap_raw.max(0.0);
        sum_overlap += overlap;
        sum_raw += overlap_raw;
        rows.push(EvalRow {
            id,
            ref_frames,
            hyp_frames,
            overlap,
            overlap_raw,
            stats,
        });
    }
    Ok(EvalReport {
        bleu: bleu_from_stats(&corpus_stats),
        mean_overlap: sum_overlap / rows.len() as f64,
        mean_overlap_raw: sum_raw / rows.len() as f64,
        rows,
    })
}

impl EvalReport {
    /// Tab-separated per-utterance rows with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "id\tref_frames\thyp_frames\toverlap\toverlap_raw\tm1\tt1\tm2\tt2\tm3\tt3\tm4\tt4\n",
        );
        for r in &self.rows {
            let _ = write!(out, "{}\t{}\t{}\t{:.6}\t{:.6}", r.id, r.ref_frames, r.hyp_frames, r.overlap, r.overlap_raw);
            for n in 0..BLEU_MAX_N {
                let _ = write!(out, "\t{}\t{}", r.stats.matches[n], r.stats.totals[n]);
            }
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "utterances: {}\nBLEU: {:.2}\nmean speech overlap (clamped): {:.4}\nmean speech overlap (raw): {:.4}",
            self.rows.len(),
            self.bleu,
            self.mean_overlap,
            self.mean_overlap_raw
        )
    }

    pub fn write_tsv(&self, path: &Path) -> Result<(), MetricsError> {
        std::fs::write(path, self.to_tsv()).map_err(|e| MetricsError::Io(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    #[test]
    fn overlap_examples() {
        assert_eq!(speech_overlap(100, 100).unwrap(), 1.0);
        assert!((speech_overlap(100, 80).unwrap() - 0.8).abs() < 1e-15);
        // overshoot past twice the reference clamps to zero
        assert_eq!(speech_overlap(100, 250).unwrap(), 0.0);
        assert!((speech_overlap_raw(100, 250).unwrap() + 0.5).abs() < 1e-15);
        assert_eq!(
            speech_overlap(0, 10).unwrap_err(),
            MetricsError::ZeroReferenceDuration
        );
    }

    #[test]
    fn overlap_is_scale_invariant() {
        let mut rng = derive_rng(2024, &[1]);
        for _ in 0..10_000 {
            let r = rng.gen_range(1u64..500);
            // include the clamp boundary region h ~ 2r
            let h = rng.gen_range(0u64..(3 * r));
            let k = rng.gen_range(2u64..50);
            let a = speech_overlap(r, h).unwrap();
            let b = speech_overlap(k * r, k * h).unwrap();
            assert!((a - b).abs() <= 1e-12, "r={r} h={h} k={k}");
            let ar = speech_overlap_raw(r, h).unwrap();
            let br = speech_overlap_raw(k * r, k * h).unwrap();
            assert!((ar - br).abs() <= 1e-12);
        }
    }

    #[test]
    fn overlap_is_one_iff_equal() {
        let mut rng = derive_rng(7, &[2]);
        for _ in 0..1000 {
            let r = rng.gen_range(1u64..300);
            let h = rng.gen_range(0u64..600);
            let v = speech_overlap(r, h).unwrap();
            assert_eq!(v == 1.0, r == h);
        }
    }

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let refs = vec![words("a b c d"), words("e f g")];
        assert_eq!(corpus_bleu(&refs, &refs, 4).unwrap(), 100.0);

        let hyps = vec![words("x y z w"), words("q r s")];
        assert_eq!(corpus_bleu(&refs, &hyps, 4).unwrap(), 0.0);
    }

    #[test]
    fn bleu_matches_hand_computed_instance() {
        // Single pair, counted by hand: clipped matches 5/5, 3/4, 1/3 and
        // 0/2 at n=4, which smooths to 1/3; BP = exp(1 - 6/5).
        let refs = vec![words("the cat sat on the mat")];
        let hyps = vec![words("the cat on the mat")];
        let got = corpus_bleu(&refs, &hyps, 4).unwrap();
        assert!((got - 43.9891724758422).abs() <= 1e-6, "got {got}");

        let stats = sentence_stats(&refs[0], &hyps[0]);
        assert_eq!(stats.matches, [5, 3, 1, 0]);
        assert_eq!(stats.totals, [5, 4, 3, 2]);
    }

    #[test]
    fn bleu_is_permutation_invariant() {
        let refs = vec![words("a b c d e"), words("f g h"), words("i j k l")];
        let hyps = vec![words("a b d e"), words("f h g"), words("i j k")];
        let base = corpus_bleu(&refs, &hyps, 4).unwrap();
        let perm = [2usize, 0, 1];
        let refs_p: Vec<_> = perm.iter().map(|&i| refs[i].clone()).collect();
        let hyps_p: Vec<_> = perm.iter().map(|&i| hyps[i].clone()).collect();
        let shuffled = corpus_bleu(&refs_p, &hyps_p, 4).unwrap();
        assert!((base - shuffled).abs() < 1e-12);
    }

    #[test]
    fn bleu_self_is_100_on_random_corpora() {
        let mut rng = derive_rng(3, &[3]);
        for _ in 0..20 {
            let corpus: Vec<Vec<u32>> = (0..5)
                .map(|_| (0..rng.gen_range(4..12)).map(|_| rng.gen_range(0..30)).collect())
                .collect();
            assert_eq!(corpus_bleu(&corpus, &corpus, 4).unwrap(), 100.0);
        }
    }

    #[test]
    fn bleu_input_validation() {
        let refs = vec![words("a b")];
        assert_eq!(
            corpus_bleu(&refs, &[], 4).unwrap_err(),
            MetricsError::LengthMismatch { refs: 1, hyps: 0 }
        );
        let empty: Vec<Vec<&str>> = vec![];
        assert_eq!(corpus_bleu(&empty, &empty, 4).unwrap_err(), MetricsError::EmptySet);
    }

    fn oracle_records(corpus: &[Utterance]) -> Vec<DecodedRecord> {
        use crate::data::prepare_target;
        corpus
            .iter()
            .enumerate()
            .map(|(id, u)| {
                let pt = prepare_target(u).unwrap();
                DecodedRecord {
                    id,
                    token_ids: pt.tokens.clone(),
                    tokens: vec![],
                    durations: pt.durations.iter().map(|&d| d as f64).collect(),
                    total_duration_frames: u.total_frames as u64,
                    score: 0.0,
                    finished: true,
                }
            })
            .collect()
    }

    #[test]
    fn evaluate_oracle_decode_is_perfect() {
        use crate::data::{generate_corpus, CorpusConfig};
        let cfg = CorpusConfig::parse("seed = 17\n").unwrap();
        let corpus = generate_corpus(&cfg, 8, 3);
        let records = oracle_records(&corpus);
        let report = evaluate(&records, &corpus).unwrap();
        assert_eq!(report.bleu, 100.0);
        assert_eq!(report.mean_overlap, 1.0);
        assert_eq!(report.rows.len(), corpus.len());
    }

    #[test]
    fn evaluate_validates_id_alignment() {
        use crate::data::{generate_corpus, CorpusConfig};
        let cfg = CorpusConfig::parse("seed = 18\n").unwrap();
        let corpus = generate_corpus(&cfg, 4, 3);
        let mut records = oracle_records(&corpus);

        let dropped = records.split_off(3);
        assert_eq!(evaluate(&records, &corpus).unwrap_err(), MetricsError::MissingId(3));
        records.extend(dropped);

        records[1].id = 0;
        assert_eq!(evaluate(&records, &corpus).unwrap_err(), MetricsError::DuplicateId(0));

        records[1].id = 99;
        assert_eq!(evaluate(&records, &corpus).unwrap_err(), MetricsError::UnknownId(99));

        assert_eq!(evaluate(&[], &corpus).unwrap_err(), MetricsError::EmptySet);
    }

    #[test]
    fn report_tsv_has_one_row_per_utterance() {
        use crate::data::{generate_corpus, CorpusConfig};
        let cfg = CorpusConfig::parse("seed = 19\n").unwrap();
        let corpus = generate_corpus(&cfg, 5, 3);
        let report = evaluate(&oracle_records(&corpus), &corpus).unwrap();
        let tsv = report.to_tsv();
        assert_eq!(tsv.lines().count(), 1 + corpus.len());
        assert!(report.summary().contains("BLEU"));
        // summary mean equals the mean of the per-row overlaps
        let mean: f64 =
            report.rows.iter().map(|r| r.overlap).sum::<f64>() / report.rows.len() as f64;
        assert!((mean - report.mean_overlap).abs() <= 1e-9);
    }
}
