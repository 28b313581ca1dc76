//! Joint token/duration training with AdamW and a linearly decaying learning
//! rate, plus the finite-difference gradient verification harness.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};
use crate::data::{prepare_target, DataError, PreparedTarget, Utterance};
use crate::inference::{greedy_decode, hypothesis_duration, DecodeOptions, InferenceError};
use crate::metrics::{speech_overlap, MetricsError};
use crate::model::{Mode, Model, ModelConfig, ModelError, TrainState};
use crate::optim::{linear_decay_lr, AdamW};
use crate::rng::derive_rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Reduction, Tape};
use crate::tensor::{KernelError, Tensor};
use crate::vocab::{Vocab, PAD_ID};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("non-finite loss at step {step}; aborting")]
    NonFinite { step: u64 },
    #[error("resume: {0}")]
    Resume(String),
}

/// Training knobs. Every key has a default; `TrainConfig::parse` rejects
/// unknown keys.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TrainConfig {
    pub steps: u64,
    /// Frame budget per batch; utterances are packed until it is exceeded.
    pub batch_frames: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Gaussian noise applied to the duration-embedding input during
    /// training (regression targets stay clean).
    pub noise_sigma: f64,
    /// Weight of the duration regression term.
    pub lambda_dur: f64,
    pub label_smoothing: f64,
    /// Restrict the duration loss to positions with a non-zero reference
    /// duration instead of every position.
    pub mse_phoneme_only: bool,
    pub eval_interval: u64,
    /// Dev utterances used for teacher-forced accuracy at each eval.
    pub eval_acc_utts: usize,
    /// Dev utterances greedily decoded for the overlap column at each eval.
    pub eval_decode_utts: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_frames: 2000,
            base_lr: 5e-5,
            weight_decay: 0.01,
            noise_sigma: 0.0,
            lambda_dur: 1.0,
            label_smoothing: 0.0,
            mse_phoneme_only: false,
            eval_interval: 500,
            eval_acc_utts: 64,
            eval_decode_utts: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(mut kv: KvConfig) -> Result<Self, TrainError> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            steps: kv.get("steps", d.steps)?,
            batch_frames: kv.get("batch_frames", d.batch_frames)?,
            base_lr: kv.get("base_lr", d.base_lr)?,
            weight_decay: kv.get("weight_decay", d.weight_decay)?,
            noise_sigma: kv.get("noise_sigma", d.noise_sigma)?,
            lambda_dur: kv.get("lambda_dur", d.lambda_dur)?,
            label_smoothing: kv.get("label_smoothing", d.label_smoothing)?,
            mse_phoneme_only: kv.get("mse_phoneme_only", d.mse_phoneme_only)?,
            eval_interval: kv.get("eval_interval", d.eval_interval)?,
            eval_acc_utts: kv.get("eval_acc_utts", d.eval_acc_utts)?,
            eval_decode_utts: kv.get("eval_decode_utts", d.eval_decode_utts)?,
            seed: kv.get("seed", d.seed)?,
        };
        kv.finish().map_err(TrainError::Config)?;
        if cfg.steps == 0 {
            return Err(TrainError::Config(ConfigError::Invalid(
                "steps must be positive".into(),
            )));
        }
        if cfg.lambda_dur < 0.0 {
            return Err(TrainError::Config(ConfigError::Invalid(
                "lambda_dur must be non-negative".into(),
            )));
        }
        if cfg.noise_sigma < 0.0 {
            return Err(TrainError::Config(ConfigError::Invalid(
                "noise_sigma must be non-negative".into(),
            )));
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        Self::from_kv(KvConfig::parse(text).map_err(TrainError::Config)?)
    }
}

/// The two loss parts plus their weighted sum, all scalar nodes on the tape.
pub struct JointLoss {
    pub total: NodeId,
    pub token_part: NodeId,
    pub dur_part: NodeId,
}

fn duration_mask(pt: &PreparedTarget, phoneme_only: bool) -> Vec<bool> {
    if phoneme_only {
        pt.durations.iter().map(|&d| d > 0).collect()
    } else {
        vec![true; pt.len()]
    }
}

/// `total = token_part + lambda_dur * dur_part`, with the token part a mean
/// cross-entropy over non-pad positions and the duration part a mean squared
/// error in normalized duration space.
pub fn joint_loss<S: Scalar>(
    tape: &mut Tape<S>,
    token_logits: NodeId,
    dur_pred: NodeId,
    pt: &PreparedTarget,
    lambda_dur: f64,
    label_smoothing: f64,
    mse_phoneme_only: bool,
    duration_scale: f64,
) -> Result<JointLoss, TrainError> {
    let token_mask: Vec<bool> = pt.tokens.iter().map(|&t| t != PAD_ID).collect();
    let token_part = tape.cross_entropy_from_logits(
        token_logits,
        &pt.tokens,
        &token_mask,
        S::from_f64(label_smoothing),
        Reduction::Mean,
    )?;
    let target: Vec<S> = pt
        .durations
        .iter()
        .map(|&d| S::from_f64(d as f64 / duration_scale))
        .collect();
    let target = tape.constant(Tensor::new(vec![pt.len()], target)?);
    let dur_mask = duration_mask(pt, mse_phoneme_only);
    let dur_part = tape.mse_loss(dur_pred, target, &dur_mask, Reduction::Mean)?;
    let scaled = tape.scale(dur_part, S::from_f64(lambda_dur));
    let total = tape.add(token_part, scaled)?;
    Ok(JointLoss {
        total,
        token_part,
        dur_part,
    })
}

/// Per-interval training telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub step: u64,
    pub token_loss: f64,
    pub dur_loss: f64,
    pub dev_overlap: f64,
    pub dev_acc: f64,
}

pub struct TrainOutcome<S> {
    pub model: Model<S>,
    pub report: Vec<ReportRow>,
    pub state: TrainState,
}

/// Deterministic epoch batching: shuffle utterance indices with the epoch
/// stream, then pack greedily up to the frame budget (always at least one
/// utterance per batch).
fn epoch_batches(corpus: &[Utterance], seed: u64, epoch: u64, batch_frames: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = derive_rng(seed, &[0xe90c4, epoch]);
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut frames = 0usize;
    for idx in order {
        let f = corpus[idx].total_frames as usize;
        if !cur.is_empty() && frames + f > batch_frames {
            batches.push(std::mem::take(&mut cur));
            frames = 0;
        }
        cur.push(idx);
        frames += f;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

struct BatchLoss {
    token_sum: f64,
    dur_sum: f64,
    token_count: usize,
    dur_count: usize,
}

/// One optimizer step over a packed batch: per-utterance tapes, gradients
/// scaled so the batch loss is the mean over all unmasked positions.
fn train_step<S: Scalar>(
    model: &mut Model<S>,
    corpus: &[Utterance],
    prepared: &[PreparedTarget],
    batch: &[usize],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    step: u64,
) -> Result<BatchLoss, TrainError> {
    let token_count: usize = batch.iter().map(|&i| prepared[i].len()).sum();
    let dur_count: usize = batch
        .iter()
        .map(|&i| duration_mask(&prepared[i], cfg.mse_phoneme_only).iter().filter(|&&m| m).count())
        .sum();
    let w_tok = 1.0 / token_count.max(1) as f64;
    let w_dur = cfg.lambda_dur / dur_count.max(1) as f64;

    let mut totals = BatchLoss {
        token_sum: 0.0,
        dur_sum: 0.0,
        token_count,
        dur_count,
    };
    for (k, &idx) in batch.iter().enumerate() {
        let (u, pt) = (&corpus[idx], &prepared[idx]);
        let mut tape = Tape::new();
        let mut fwd = model.forward(
            &mut tape,
            Mode::Train {
                dropout_seed: derive_rng(cfg.seed, &[0xd70b, step, k as u64]).next_u64(),
            },
        );
        let mut noise_rng = derive_rng(cfg.seed, &[0x4015e, step, k as u64]);
        let (logits, dur) = fwd.teacher_forced(u, pt, cfg.noise_sigma, &mut noise_rng)?;
        let nodes = fwd.param_nodes().to_vec();

        let token_mask: Vec<bool> = pt.tokens.iter().map(|&t| t != PAD_ID).collect();
        let ce_sum = tape.cross_entropy_from_logits(
            logits,
            &pt.tokens,
            &token_mask,
            S::from_f64(cfg.label_smoothing),
            Reduction::Sum,
        )?;
        let target: Vec<S> = pt
            .durations
            .iter()
            .map(|&d| S::from_f64(d as f64 / model_cfg.duration_scale))
            .collect();
        let target = tape.constant(Tensor::new(vec![pt.len()], target)?);
        let dmask = duration_mask(pt, cfg.mse_phoneme_only);
        let se_sum = tape.mse_loss(dur, target, &dmask, Reduction::Sum)?;

        totals.token_sum += tape.value(ce_sum).item().as_f64();
        totals.dur_sum += tape.value(se_sum).item().as_f64();

        let ce_w = tape.scale(ce_sum, S::from_f64(w_tok));
        let se_w = tape.scale(se_sum, S::from_f64(w_dur));
        let loss = tape.add(ce_w, se_w)?;
        tape.backward(loss)?;
        model.accumulate_grads(&tape, &nodes);
    }
    Ok(totals)
}

fn eval_pass<S: Scalar>(
    model: &Model<S>,
    dev: &[Utterance],
    dev_prepared: &[PreparedTarget],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<(f64, f64), TrainError> {
    // teacher-forced token accuracy
    let n_acc = dev.len().min(cfg.eval_acc_utts);
    let (mut hits, mut total) = (0usize, 0usize);
    for (u, pt) in dev.iter().zip(dev_prepared).take(n_acc) {
        let mut tape = Tape::new();
        let mut fwd = model.forward(&mut tape, Mode::Eval);
        let mut rng = derive_rng(0, &[0]);
        let (logits, _) = fwd.teacher_forced(u, pt, 0.0, &mut rng)?;
        let v = model.cfg.vocab_size;
        let data = tape.value(logits).data();
        for (t, &want) in pt.tokens.iter().enumerate() {
            let row = &data[t * v..(t + 1) * v];
            let arg = row
                .iter()
                .enumerate()
                .max_by(|(i, a), (j, b)| a.partial_cmp(b).unwrap().then(j.cmp(i)))
                .map(|(i, _)| i as u32)
                .expect("non-empty row");
            hits += usize::from(arg == want);
            total += 1;
        }
    }
    let acc = if total == 0 { 0.0 } else { hits as f64 / total as f64 };

    // greedy-decode overlap on a dev subset
    let n_dec = dev.len().min(cfg.eval_decode_utts);
    let mut overlap_sum = 0.0;
    for u in dev.iter().take(n_dec) {
        let h = greedy_decode(model, vocab, &u.features, u.total_frames, &DecodeOptions::default())?;
        let hyp_frames = hypothesis_duration(&h, |t| vocab.is_timed(t));
        overlap_sum += speech_overlap(u.total_frames as u64, hyp_frames)?;
    }
    let overlap = if n_dec == 0 { 0.0 } else { overlap_sum / n_dec as f64 };
    Ok((overlap, acc))
}

/// Run (or resume) training. `progress` is called once per report row.
/// `halt_after` optionally stops at an absolute step count before
/// `cfg.steps`, leaving a state that a later call can resume bit-exactly.
pub fn train<S: Scalar>(
    train_corpus: &[Utterance],
    dev_corpus: &[Utterance],
    vocab: &Vocab,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    resume: Option<(Model<S>, TrainState)>,
    halt_after: Option<u64>,
    progress: &mut dyn FnMut(&ReportRow),
) -> Result<TrainOutcome<S>, TrainError> {
    if train_corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let prepared: Vec<PreparedTarget> = train_corpus
        .iter()
        .map(prepare_target)
        .collect::<Result<_, _>>()?;
    let dev_prepared: Vec<PreparedTarget> = dev_corpus
        .iter()
        .map(prepare_target)
        .collect::<Result<_, _>>()?;

    let (mut model, mut opt, mut step, mut epoch, mut cursor) = match resume {
        None => {
            let model = Model::new(model_cfg.clone(), cfg.seed)?;
            let opt = AdamW::new(&model.params, cfg.weight_decay);
            (model, opt, 0u64, 0u64, 0usize)
        }
        Some((model, state)) => {
            if model.cfg != *model_cfg {
                return Err(TrainError::Resume(
                    "checkpoint model config differs from the requested one".into(),
                ));
            }
            let mut opt = AdamW::new(&model.params, cfg.weight_decay);
            let m: Vec<Vec<S>> = state
                .adam_m
                .iter()
                .map(|v| v.iter().map(|&x| S::from_f64(x)).collect())
                .collect();
            let v: Vec<Vec<S>> = state
                .adam_v
                .iter()
                .map(|v| v.iter().map(|&x| S::from_f64(x)).collect())
                .collect();
            opt.restore(state.adam_step, m, v)
                .map_err(|e| TrainError::Resume(e.to_string()))?;
            (model, opt, state.step, state.epoch, state.cursor)
        }
    };

    let mut batches = epoch_batches(train_corpus, cfg.seed, epoch, cfg.batch_frames);
    let mut report = Vec::new();
    while step < cfg.steps {
        if halt_after.is_some_and(|h| step >= h) {
            break;
        }
        if cursor >= batches.len() {
            epoch += 1;
            cursor = 0;
            batches = epoch_batches(train_corpus, cfg.seed, epoch, cfg.batch_frames);
        }
        let batch = batches[cursor].clone();
        cursor += 1;

        let lr = linear_decay_lr(step, cfg.steps, cfg.base_lr);
        model.params.zero_grad();
        let totals =
            match train_step(&mut model, train_corpus, &prepared, &batch, cfg, model_cfg, step) {
                Ok(t) => t,
                Err(TrainError::Model(ModelError::Kernel(KernelError::NonFinite { .. })))
                | Err(TrainError::Kernel(KernelError::NonFinite { .. })) => {
                    return Err(TrainError::NonFinite { step })
                }
                Err(other) => return Err(other),
            };
        let token_loss = totals.token_sum / totals.token_count.max(1) as f64;
        let dur_loss = totals.dur_sum / totals.dur_count.max(1) as f64;
        if !token_loss.is_finite() || !dur_loss.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        opt.step(&mut model.params, lr);
        step += 1;

        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let (dev_overlap, dev_acc) = eval_pass(&model, dev_corpus, &dev_prepared, vocab, cfg)?;
            let row = ReportRow {
                step,
                token_loss,
                dur_loss,
                dev_overlap,
                dev_acc,
            };
            progress(&row);
            report.push(row);
        }
    }

    let (m, v) = opt.moments();
    let state = TrainState {
        step,
        epoch,
        cursor,
        adam_step: opt.step_count(),
        adam_m: m.iter().map(|b| b.iter().map(|x| x.as_f64()).collect()).collect(),
        adam_v: v.iter().map(|b| b.iter().map(|x| x.as_f64()).collect()).collect(),
    };
    Ok(TrainOutcome { model, report, state })
}

// ---------------------------------------------------------------------------
// gradient verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub samples: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// (parameter name, element index, analytic, numeric) of the worst case.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Batch loss used by the checker: sum of per-utterance joint losses in eval
/// mode (no dropout, no noise), double precision.
pub fn gradcheck_loss(
    model: &Model<f64>,
    batch: &[(&Utterance, &PreparedTarget)],
    lambda_dur: f64,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (u, pt) in batch {
        let mut tape = Tape::new();
        let mut fwd = model.forward(&mut tape, Mode::Eval);
        let mut rng = derive_rng(0, &[0]);
        let (logits, dur) = fwd.teacher_forced(u, pt, 0.0, &mut rng)?;
        let loss = joint_loss(
            &mut tape,
            logits,
            dur,
            pt,
            lambda_dur,
            0.0,
            false,
            model.cfg.duration_scale,
        )?;
        total += tape.value(loss.total).item();
    }
    Ok(total)
}

/// Reverse-mode gradients of [`gradcheck_loss`] for every parameter.
pub fn analytic_grads(
    model: &mut Model<f64>,
    batch: &[(&Utterance, &PreparedTarget)],
    lambda_dur: f64,
) -> Result<Vec<Vec<f64>>, TrainError> {
    if model.cfg.dropout != 0.0 {
        return Err(TrainError::Config(ConfigError::Invalid(
            "gradient checks require a dropout-free model config".into(),
        )));
    }
    model.params.zero_grad();
    for (u, pt) in batch {
        let mut tape = Tape::new();
        let mut fwd = model.forward(&mut tape, Mode::Train { dropout_seed: 0 });
        let mut rng = derive_rng(0, &[0]);
        let (logits, dur) = fwd.teacher_forced(u, pt, 0.0, &mut rng)?;
        let nodes = fwd.param_nodes().to_vec();
        let loss = joint_loss(
            &mut tape,
            logits,
            dur,
            pt,
            lambda_dur,
            0.0,
            false,
            model.cfg.duration_scale,
        )?;
        tape.backward(loss.total)?;
        model.accumulate_grads(&tape, &nodes);
    }
    Ok(model
        .params
        .entries()
        .iter()
        .map(|p| p.grad.clone())
        .collect())
}

/// Compare supplied analytic gradients against central finite differences on
/// `samples` randomly chosen parameter elements. The relative error guards
/// against vanishing denominators with a small floor.
pub fn compare_to_finite_differences(
    model: &mut Model<f64>,
    batch: &[(&Utterance, &PreparedTarget)],
    grads: &[Vec<f64>],
    samples: usize,
    epsilon: f64,
    tolerance: f64,
    lambda_dur: f64,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    let mut rng = derive_rng(seed, &[0x9c4d]);
    let n_params = model.params.len();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    for _ in 0..samples {
        let pi = rng.gen_range(0..n_params);
        let len = model.params.entries()[pi].value.len();
        let ei = rng.gen_range(0..len);
        let orig = model.params.entries()[pi].value.data()[ei];

        model.params.entries_mut()[pi].value.data_mut()[ei] = orig + epsilon;
        let up = gradcheck_loss(model, batch, lambda_dur)?;
        model.params.entries_mut()[pi].value.data_mut()[ei] = orig - epsilon;
        let down = gradcheck_loss(model, batch, lambda_dur)?;
        model.params.entries_mut()[pi].value.data_mut()[ei] = orig;

        let numeric = (up - down) / (2.0 * epsilon);
        let analytic = grads[pi][ei];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        if rel > max_rel {
            max_rel = rel;
            worst = Some((
                model.params.entries()[pi].name.clone(),
                ei,
                analytic,
                numeric,
            ));
        }
    }
    Ok(GradCheckReport {
        samples,
        max_rel_err: max_rel,
        tolerance,
        worst,
    })
}

/// Full check: reverse-mode gradients against central finite differences on
/// sampled parameters of a double-precision model.
pub fn gradient_check(
    model: &mut Model<f64>,
    batch: &[(&Utterance, &PreparedTarget)],
    samples: usize,
    epsilon: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    let grads = analytic_grads(model, batch, 1.0)?;
    compare_to_finite_differences(model, batch, &grads, samples, epsilon, tolerance, 1.0, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, CorpusConfig};

    fn tiny_model_cfg(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            feat_dim: 4,
            d_model: 16,
            text_dim: 12,
            timing_dim: 4,
            enc_layers: 1,
            enc_heads: 2,
            dec_layers: 1,
            dec_heads: 2,
            ff_dim: 24,
            dropout: 0.0,
            vocab_size,
            max_positions: 160,
            duration_scale: 100.0,
            frontend_stride: 1,
            ablate_timing: false,
        }
    }

    fn tiny_corpus(seed: u64, n: usize) -> (Vec<Utterance>, CorpusConfig) {
        let cfg = CorpusConfig::parse(&format!(
            "seed = {seed}\nfeat_dim=4\nsrc_vocab=6\nn_phonemes=5\nwords_max=4\ndur_max=6\n"
        ))
        .unwrap();
        (generate_corpus(&cfg, n, 1), cfg)
    }

    #[test]
    fn joint_loss_examples() {
        let (corpus, ccfg) = tiny_corpus(3, 1);
        let pt = prepare_target(&corpus[0]).unwrap();
        let t = pt.len();
        let v = ccfg.vocab_size();

        // perfect logits and exact durations give zero loss
        let mut tape = Tape::<f64>::new();
        let mut logits = vec![0.0f64; t * v];
        for (row, &tok) in pt.tokens.iter().enumerate() {
            logits[row * v + tok as usize] = 1e7;
        }
        let logits = tape.leaf(Tensor::new(vec![t, v], logits).unwrap(), false);
        let durs: Vec<f64> = pt.durations.iter().map(|&d| d as f64 / 100.0).collect();
        let dur = tape.leaf(Tensor::new(vec![t], durs).unwrap(), false);
        let loss = joint_loss(&mut tape, logits, dur, &pt, 1.0, 0.0, false, 100.0).unwrap();
        assert!(tape.value(loss.total).item() < 1e-9);

        // lambda 0 reduces the total to the token part
        let loss0 = joint_loss(&mut tape, logits, dur, &pt, 0.0, 0.0, false, 100.0).unwrap();
        assert_eq!(
            tape.value(loss0.total).item(),
            tape.value(loss0.token_part).item()
        );

        // random case: total equals the independently recomputed sum
        let mut rng = derive_rng(5, &[1]);
        let rl: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let rd: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rln = tape.leaf(Tensor::new(vec![t, v], rl).unwrap(), false);
        let rdn = tape.leaf(Tensor::new(vec![t], rd).unwrap(), false);
        let lam = 0.7;
        let l = joint_loss(&mut tape, rln, rdn, &pt, lam, 0.0, false, 100.0).unwrap();
        let total = tape.value(l.total).item();
        let tok = tape.value(l.token_part).item();
        let dur_part = tape.value(l.dur_part).item();
        assert!((total - (tok + lam * dur_part)).abs() <= 1e-9);
        assert!(tok >= 0.0 && dur_part >= 0.0);
    }

    #[test]
    fn train_config_defaults_and_validation() {
        let cfg = TrainConfig::parse("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert!(TrainConfig::parse("steps = 0").is_err());
        assert!(TrainConfig::parse("lambda_dur = -1").is_err());
        assert!(TrainConfig::parse("mystery = 1").is_err());
    }

    #[test]
    fn token_loss_halves_quickly_on_tiny_corpus() {
        let (corpus, ccfg) = tiny_corpus(11, 16);
        let dev = corpus[..4].to_vec();
        let mcfg = tiny_model_cfg(ccfg.vocab_size());
        let tcfg = TrainConfig {
            steps: 300,
            batch_frames: 400,
            base_lr: 2e-3,
            weight_decay: 0.0,
            eval_interval: 300,
            eval_acc_utts: 4,
            eval_decode_utts: 0,
            seed: 1,
            ..TrainConfig::default()
        };
        let out = train::<f32>(&corpus, &dev, &ccfg.vocab(), &mcfg, &tcfg, None, None, &mut |_| {})
            .unwrap();
        let last = out.report.last().unwrap();
        let ln_v = (ccfg.vocab_size() as f64).ln();
        assert!(
            last.token_loss < ln_v / 2.0,
            "token loss {} should drop below ln(V)/2 = {}",
            last.token_loss,
            ln_v / 2.0
        );
    }

    #[test]
    fn resume_reproduces_uninterrupted_run_bit_exactly() {
        let (corpus, ccfg) = tiny_corpus(13, 8);
        let dev = corpus[..2].to_vec();
        let vocab = ccfg.vocab();
        let mcfg = tiny_model_cfg(ccfg.vocab_size());
        let mk = |steps: u64| TrainConfig {
            steps,
            batch_frames: 200,
            base_lr: 1e-3,
            eval_interval: 5,
            eval_acc_utts: 2,
            eval_decode_utts: 1,
            seed: 3,
            ..TrainConfig::default()
        };

        // one uninterrupted 20-step run
        let full =
            train::<f32>(&corpus, &dev, &vocab, &mcfg, &mk(20), None, None, &mut |_| {}).unwrap();

        // the same run halted at step 10, then resumed to completion
        let half = train::<f32>(&corpus, &dev, &vocab, &mcfg, &mk(20), None, Some(10), &mut |_| {})
            .unwrap();
        assert_eq!(half.state.step, 10);
        let resumed = train::<f32>(
            &corpus,
            &dev,
            &vocab,
            &mcfg,
            &mk(20),
            Some((half.model, half.state)),
            None,
            &mut |_| {},
        )
        .unwrap();

        for (a, b) in full
            .model
            .params
            .entries()
            .iter()
            .zip(resumed.model.params.entries())
        {
            assert_eq!(a.value.data(), b.value.data(), "param {} diverged", a.name);
        }
        let last_full = full.report.last().unwrap();
        let last_res = resumed.report.last().unwrap();
        assert_eq!(last_full.token_loss, last_res.token_loss);
        assert_eq!(last_full.dur_loss, last_res.dur_loss);
    }

    #[test]
    fn lambda_zero_leaves_duration_head_to_weight_decay_only() {
        let (corpus, ccfg) = tiny_corpus(17, 8);
        let vocab = ccfg.vocab();
        let mcfg = tiny_model_cfg(ccfg.vocab_size());
        let tcfg = TrainConfig {
            steps: 10,
            batch_frames: 200,
            base_lr: 1e-3,
            weight_decay: 0.01,
            lambda_dur: 0.0,
            eval_interval: 10,
            eval_acc_utts: 1,
            eval_decode_utts: 0,
            seed: 4,
            ..TrainConfig::default()
        };
        let init = Model::<f32>::new(mcfg.clone(), tcfg.seed).unwrap();
        let out =
            train::<f32>(&corpus, &corpus[..1], &vocab, &mcfg, &tcfg, None, None, &mut |_| {})
                .unwrap();

        // with zero gradient, AdamW moves a weight only by -lr*wd*w each step
        let w0 = init.params.get("head.dur.w").unwrap().value.data().to_vec();
        let w1 = out.model.params.get("head.dur.w").unwrap().value.data().to_vec();
        let mut expect = w0.clone();
        for s in 0..tcfg.steps {
            let lr = linear_decay_lr(s, tcfg.steps, tcfg.base_lr);
            let decay = (lr * tcfg.weight_decay) as f32;
            for w in expect.iter_mut() {
                *w -= decay * *w;
            }
        }
        for (got, want) in w1.iter().zip(&expect) {
            assert!((got - want).abs() <= 1e-7, "{got} vs {want}");
        }
    }

    #[test]
    fn gradient_check_passes_on_tiny_model() {
        let (corpus, ccfg) = tiny_corpus(23, 2);
        let prepared: Vec<PreparedTarget> =
            corpus.iter().map(|u| prepare_target(u).unwrap()).collect();
        let batch: Vec<(&Utterance, &PreparedTarget)> =
            corpus.iter().zip(prepared.iter()).collect();
        let mut model = Model::<f64>::new(tiny_model_cfg(ccfg.vocab_size()), 5).unwrap();
        let report = gradient_check(&mut model, &batch, 20, 1e-4, 1e-5, 7).unwrap();
        assert!(
            report.passed(),
            "max rel err {} (worst {:?})",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn gradient_check_passes_with_zero_layer_decoder() {
        let (corpus, ccfg) = tiny_corpus(29, 2);
        let prepared: Vec<PreparedTarget> =
            corpus.iter().map(|u| prepare_target(u).unwrap()).collect();
        let batch: Vec<(&Utterance, &PreparedTarget)> =
            corpus.iter().zip(prepared.iter()).collect();
        let mut cfg = tiny_model_cfg(ccfg.vocab_size());
        cfg.dec_layers = 0;
        let mut model = Model::<f64>::new(cfg, 6).unwrap();
        let report = gradient_check(&mut model, &batch, 20, 1e-4, 1e-5, 8).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_gradients_fail_the_check() {
        let (corpus, ccfg) = tiny_corpus(31, 2);
        let prepared: Vec<PreparedTarget> =
            corpus.iter().map(|u| prepare_target(u).unwrap()).collect();
        let batch: Vec<(&Utterance, &PreparedTarget)> =
            corpus.iter().zip(prepared.iter()).collect();
        let mut model = Model::<f64>::new(tiny_model_cfg(ccfg.vocab_size()), 9).unwrap();
        let mut grads = analytic_grads(&mut model, &batch, 1.0).unwrap();
        // corrupt every gradient of one parameter, simulating a broken rule
        let idx = model.params.position("enc.l0.attn.wq").unwrap();
        for g in grads[idx].iter_mut() {
            *g = *g * 3.0 + 0.05;
        }
        let report = compare_to_finite_differences(
            &mut model, &batch, &grads, 400, 1e-4, 1e-5, 1.0, 11,
        )
        .unwrap();
        assert!(!report.passed(), "corruption must be detected");
    }

    #[test]
    fn nan_loss_aborts_with_step_number() {
        let (corpus, ccfg) = tiny_corpus(37, 4);
        let vocab = ccfg.vocab();
        let mcfg = tiny_model_cfg(ccfg.vocab_size());
        let tcfg = TrainConfig {
            steps: 50,
            base_lr: 1e6, // guaranteed blow-up
            eval_interval: 50,
            eval_acc_utts: 1,
            eval_decode_utts: 0,
            seed: 5,
            ..TrainConfig::default()
        };
        match train::<f32>(&corpus, &corpus[..1], &vocab, &mcfg, &tcfg, None, None, &mut |_| {}) {
            Err(TrainError::NonFinite { step }) => assert!(step < 50),
            other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn epoch_batches_respect_budget_and_cover_corpus() {
        let (corpus, _) = tiny_corpus(41, 12);
        let batches = epoch_batches(&corpus, 1, 0, 100);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
        for b in &batches {
            let frames: usize = b.iter().map(|&i| corpus[i].total_frames as usize).sum();
            assert!(b.len() == 1 || frames <= 100);
        }
        // deterministic per (seed, epoch), different across epochs
        assert_eq!(batches, epoch_batches(&corpus, 1, 0, 100));
        assert_ne!(batches, epoch_batches(&corpus, 1, 1, 100));
    }
}
