//! Transformer encoder-decoder with timing-conditioned decoder input.
//!
//! The decoder input at each position concatenates four embeddings along the
//! feature axis: token text, previous duration, remaining frames, and pause
//! flag. Two linear heads read disjoint leading slices of the decoder output:
//! the token head reads the text slice, the duration head the next slice.
//! The trailing slices feed no head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};
use crate::data::{add_duration_noise, DataError, PreparedTarget, Utterance};
use crate::optim::ParamStore;
use crate::rng::derive_rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::{KernelError, Tensor};
use crate::vocab::SOS_ID;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Kv(#[from] ConfigError),
    #[error("{what}: width {got} does not match 3*timing_dim + text_dim = {want}")]
    WidthMismatch {
        what: &'static str,
        got: usize,
        want: usize,
    },
    #[error("{what}: length {got}, expected {want}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        want: usize,
    },
    #[error("sequence of length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("{0}: input must be non-empty")]
    EmptyInput(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint parameter `{name}`: expected shape {expected:?}, got {got:?}")]
    CheckpointParam {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Architecture knobs. The decoder feature width is always
/// `3 * timing_dim + text_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub d_model: usize,
    /// Text-embedding width of the decoder input.
    pub text_dim: usize,
    /// Width of each timing embedding (duration, remaining frames, pause).
    pub timing_dim: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Scalar timing inputs are divided by this many frames before their
    /// linear layers; duration head outputs live in the same unit.
    pub duration_scale: f64,
    /// Frame-stacking factor of the encoder frontend; 1 keeps one output
    /// position per input frame.
    pub frontend_stride: usize,
    /// Zero the duration/remaining-frames/pause embeddings, reducing the
    /// model to a plain sequence-to-sequence baseline with an identical
    /// parameter count.
    pub ablate_timing: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 8,
            d_model: 64,
            text_dim: 64,
            timing_dim: 16,
            enc_layers: 2,
            enc_heads: 4,
            dec_layers: 2,
            dec_heads: 4,
            ff_dim: 128,
            dropout: 0.1,
            vocab_size: 45,
            max_positions: 512,
            duration_scale: 100.0,
            frontend_stride: 1,
            ablate_timing: false,
        }
    }
}

impl ModelConfig {
    pub fn decoder_width(&self) -> usize {
        3 * self.timing_dim + self.text_dim
    }

    pub fn from_kv(mut kv: KvConfig) -> Result<Self, ModelError> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            feat_dim: kv.get("feat_dim", d.feat_dim)?,
            d_model: kv.get("d_model", d.d_model)?,
            text_dim: kv.get("text_dim", d.text_dim)?,
            timing_dim: kv.get("timing_dim", d.timing_dim)?,
            enc_layers: kv.get("enc_layers", d.enc_layers)?,
            enc_heads: kv.get("enc_heads", d.enc_heads)?,
            dec_layers: kv.get("dec_layers", d.dec_layers)?,
            dec_heads: kv.get("dec_heads", d.dec_heads)?,
            ff_dim: kv.get("ff_dim", d.ff_dim)?,
            dropout: kv.get("dropout", d.dropout)?,
            vocab_size: kv.get("vocab_size", d.vocab_size)?,
            max_positions: kv.get("max_positions", d.max_positions)?,
            duration_scale: kv.get("duration_scale", d.duration_scale)?,
            frontend_stride: kv.get("frontend_stride", d.frontend_stride)?,
            ablate_timing: kv.get("ablate_timing", d.ablate_timing)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        Self::from_kv(KvConfig::parse(text).map_err(ModelError::Kv)?)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.feat_dim == 0
            || self.d_model == 0
            || self.text_dim == 0
            || self.timing_dim == 0
            || self.ff_dim == 0
        {
            return bad("widths must be positive".into());
        }
        if self.enc_heads == 0 || self.d_model % self.enc_heads != 0 {
            return bad(format!(
                "enc_heads {} must divide d_model {}",
                self.enc_heads, self.d_model
            ));
        }
        if self.dec_heads == 0 || self.decoder_width() % self.dec_heads != 0 {
            return bad(format!(
                "dec_heads {} must divide decoder width {}",
                self.dec_heads,
                self.decoder_width()
            ));
        }
        if self.vocab_size < 6 {
            return bad(format!("vocab_size {} < 6", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.duration_scale <= 0.0 {
            return bad("duration_scale must be positive".into());
        }
        if self.max_positions == 0 || self.frontend_stride == 0 {
            return bad("max_positions and frontend_stride must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    Linear { fan_in: usize },
    Bias,
    Embedding,
    LnGain,
    LnBias,
}

fn attention_params(spec: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, q_dim: usize, kv_dim: usize) {
    for (n, fan_in) in [("wq", q_dim), ("wk", kv_dim), ("wv", kv_dim), ("wo", q_dim)] {
        spec.push((
            format!("{prefix}.{n}"),
            vec![fan_in, q_dim],
            ParamKind::Linear { fan_in },
        ));
        spec.push((format!("{prefix}.b{}", &n[1..]), vec![q_dim], ParamKind::Bias));
    }
}

fn ln_params(spec: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, dim: usize) {
    spec.push((format!("{prefix}.g"), vec![dim], ParamKind::LnGain));
    spec.push((format!("{prefix}.b"), vec![dim], ParamKind::LnBias));
}

fn ff_params(spec: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, dim: usize, ff: usize) {
    spec.push((format!("{prefix}.w1"), vec![dim, ff], ParamKind::Linear { fan_in: dim }));
    spec.push((format!("{prefix}.b1"), vec![ff], ParamKind::Bias));
    spec.push((format!("{prefix}.w2"), vec![ff, dim], ParamKind::Linear { fan_in: ff }));
    spec.push((format!("{prefix}.b2"), vec![dim], ParamKind::Bias));
}

/// Ordered (name, shape, init kind) list; the single source of truth for
/// initialization and checkpoint validation.
fn parameter_spec(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    let mut spec = Vec::new();
    let in_dim = cfg.feat_dim * cfg.frontend_stride;
    let dw = cfg.decoder_width();

    spec.push(("enc.in.w".into(), vec![in_dim, cfg.d_model], ParamKind::Linear { fan_in: in_dim }));
    spec.push(("enc.in.b".into(), vec![cfg.d_model], ParamKind::Bias));
    for i in 0..cfg.enc_layers {
        attention_params(&mut spec, &format!("enc.l{i}.attn"), cfg.d_model, cfg.d_model);
        ln_params(&mut spec, &format!("enc.l{i}.ln1"), cfg.d_model);
        ff_params(&mut spec, &format!("enc.l{i}.ff"), cfg.d_model, cfg.ff_dim);
        ln_params(&mut spec, &format!("enc.l{i}.ln2"), cfg.d_model);
    }

    spec.push(("dec.tok_emb".into(), vec![cfg.vocab_size, cfg.text_dim], ParamKind::Embedding));
    for role in ["dur", "frames", "pause"] {
        spec.push((format!("{role}.w"), vec![1, cfg.timing_dim], ParamKind::Linear { fan_in: 1 }));
        // a zero bias here would make layer_norm(x * w) invariant to the
        // scalar's magnitude, so these biases start non-zero
        spec.push((format!("{role}.b"), vec![cfg.timing_dim], ParamKind::Linear { fan_in: 1 }));
        ln_params(&mut spec, &format!("{role}.ln"), cfg.timing_dim);
    }
    for i in 0..cfg.dec_layers {
        attention_params(&mut spec, &format!("dec.l{i}.self"), dw, dw);
        ln_params(&mut spec, &format!("dec.l{i}.ln1"), dw);
        attention_params(&mut spec, &format!("dec.l{i}.cross"), dw, cfg.d_model);
        ln_params(&mut spec, &format!("dec.l{i}.ln2"), dw);
        ff_params(&mut spec, &format!("dec.l{i}.ff"), dw, cfg.ff_dim);
        ln_params(&mut spec, &format!("dec.l{i}.ln3"), dw);
    }

    spec.push(("head.token.w".into(), vec![cfg.text_dim, cfg.vocab_size], ParamKind::Linear { fan_in: cfg.text_dim }));
    spec.push(("head.token.b".into(), vec![cfg.vocab_size], ParamKind::Bias));
    // output dimension of the duration head is exactly 1
    spec.push(("head.dur.w".into(), vec![cfg.timing_dim, 1], ParamKind::Linear { fan_in: cfg.timing_dim }));
    spec.push(("head.dur.b".into(), vec![1], ParamKind::Bias));
    spec
}

/// Fixed sinusoidal position encoding rows `[len, dim]`.
fn positional_encoding<S: Scalar>(len: usize, dim: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for j in 0..dim {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data.push(S::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, dim], data).expect("pos encoding shape")
}

#[derive(Debug)]
pub struct Model<S> {
    pub cfg: ModelConfig,
    pub params: ParamStore<S>,
}

impl<S: Scalar> Model<S> {
    /// Fresh model with seeded initialization: fan-in scaled uniform for
    /// linear layers, N(0, 0.02) for embeddings, identity layer norms.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = derive_rng(seed, &[0x9a7a9]);
        let mut params = ParamStore::new();
        for (name, shape, kind) in parameter_spec(&cfg) {
            let n: usize = shape.iter().product();
            let data: Vec<S> = match kind {
                ParamKind::Linear { fan_in } => {
                    let a = (1.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| S::from_f64(rng.gen_range(-a..a))).collect()
                }
                ParamKind::Bias | ParamKind::LnBias => vec![S::zero(); n],
                ParamKind::LnGain => vec![S::one(); n],
                ParamKind::Embedding => (0..n)
                    .map(|_| {
                        let (u1, u2): (f64, f64) = (rng.gen_range(f64::MIN_POSITIVE..1.0), rng.gen());
                        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                        S::from_f64(0.02 * z)
                    })
                    .collect(),
            };
            params.insert(&name, Tensor::new(shape, data).expect("init shape"));
        }
        Ok(Model { cfg, params })
    }

    /// Begin a forward pass on `tape`. Training mode enables dropout (seeded)
    /// and marks parameters as differentiable.
    pub fn forward<'a>(&'a self, tape: &'a mut Tape<S>, mode: Mode) -> Forward<'a, S> {
        let training = matches!(mode, Mode::Train { .. });
        let rng = match mode {
            Mode::Train { dropout_seed } => derive_rng(dropout_seed, &[0xd0d0]),
            Mode::Eval => derive_rng(0, &[0xd0d0]),
        };
        let nodes: Vec<NodeId> = self
            .params
            .entries()
            .iter()
            .map(|p| tape.leaf(p.value.clone(), training))
            .collect();
        Forward {
            model: self,
            tape,
            nodes,
            training,
            rng,
        }
    }

    /// Copy gradients accumulated on `forward`'s parameter leaves back into
    /// the store (adding to whatever is already there).
    pub fn accumulate_grads(&mut self, tape: &Tape<S>, nodes: &[NodeId]) {
        for (i, p) in self.params.entries_mut().iter_mut().enumerate() {
            if let Some(g) = tape.grad(nodes[i]) {
                for (pg, &gi) in p.grad.iter_mut().zip(g) {
                    *pg += gi;
                }
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

/// One forward pass: parameter leaves bound to a tape plus dropout state.
pub struct Forward<'a, S: Scalar> {
    model: &'a Model<S>,
    pub tape: &'a mut Tape<S>,
    nodes: Vec<NodeId>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'a, S: Scalar> Forward<'a, S> {
    pub fn param_nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.model.cfg
    }

    fn p(&self, name: &str) -> NodeId {
        let idx = self
            .model
            .params
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.nodes[idx]
    }

    fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId, KernelError> {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let y = self.tape.matmul(x, w)?;
        self.tape.add(y, b)
    }

    fn layer_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId, KernelError> {
        let g = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        self.tape.layer_norm(x, g, b, S::from_f64(1e-5))
    }

    fn dropout(&mut self, x: NodeId) -> NodeId {
        let p = self.model.cfg.dropout;
        if !self.training || p == 0.0 {
            return x;
        }
        let keep = S::from_f64(1.0 / (1.0 - p));
        let shape = self.tape.value(x).shape().to_vec();
        let mask: Vec<S> = (0..self.tape.value(x).len())
            .map(|_| {
                if self.rng.gen_bool(p) {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let m = self.tape.constant(Tensor::new(shape, mask).expect("mask shape"));
        self.tape.mul(x, m).expect("same shape")
    }

    /// Multi-head attention. `q_in: [Tq, q_dim]`, `kv_in: [Tk, kv_dim]`;
    /// parameter names live under `prefix`.
    fn attention(
        &mut self,
        q_in: NodeId,
        kv_in: NodeId,
        prefix: &str,
        heads: usize,
        causal: bool,
    ) -> Result<NodeId, KernelError> {
        let q = {
            let w = self.p(&format!("{prefix}.wq"));
            let b = self.p(&format!("{prefix}.bq"));
            let y = self.tape.matmul(q_in, w)?;
            self.tape.add(y, b)?
        };
        let k = {
            let w = self.p(&format!("{prefix}.wk"));
            let b = self.p(&format!("{prefix}.bk"));
            let y = self.tape.matmul(kv_in, w)?;
            self.tape.add(y, b)?
        };
        let v = {
            let w = self.p(&format!("{prefix}.wv"));
            let b = self.p(&format!("{prefix}.bv"));
            let y = self.tape.matmul(kv_in, w)?;
            self.tape.add(y, b)?
        };

        let dim = self.tape.value(q).last_dim();
        let hd = dim / heads;
        let tq = self.tape.value(q).rows();
        let scale = S::from_f64(1.0 / (hd as f64).sqrt());
        let mask = if causal {
            let mut m = vec![S::zero(); tq * tq];
            for i in 0..tq {
                for j in (i + 1)..tq {
                    m[i * tq + j] = S::from_f64(-1e30);
                }
            }
            Some(self.tape.constant(Tensor::new(vec![tq, tq], m).expect("mask")))
        } else {
            None
        };

        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            let qh = self.tape.slice_last_axis(q, lo, hi)?;
            let kh = self.tape.slice_last_axis(k, lo, hi)?;
            let vh = self.tape.slice_last_axis(v, lo, hi)?;
            let scores = self.tape.matmul_nt(qh, kh)?;
            let mut scores = self.tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = self.tape.add(scores, m)?;
            }
            let probs = self.tape.softmax_last_axis(scores)?;
            head_outs.push(self.tape.matmul(probs, vh)?);
        }
        let ctx = self.tape.concat_last_axis(&head_outs)?;
        let w = self.p(&format!("{prefix}.wo"));
        let b = self.p(&format!("{prefix}.bo"));
        let y = self.tape.matmul(ctx, w)?;
        self.tape.add(y, b)
    }

    fn feed_forward(&mut self, x: NodeId, prefix: &str) -> Result<NodeId, KernelError> {
        let w1 = self.p(&format!("{prefix}.w1"));
        let b1 = self.p(&format!("{prefix}.b1"));
        let w2 = self.p(&format!("{prefix}.w2"));
        let b2 = self.p(&format!("{prefix}.b2"));
        let h = self.tape.matmul(x, w1)?;
        let h = self.tape.add(h, b1)?;
        let h = self.tape.relu(h);
        let h = self.tape.matmul(h, w2)?;
        self.tape.add(h, b2)
    }

    /// Post-norm residual block: `layer_norm(x + dropout(sub))`.
    fn residual(&mut self, x: NodeId, sub: NodeId, ln: &str) -> Result<NodeId, KernelError> {
        let sub = self.dropout(sub);
        let sum = self.tape.add(x, sub)?;
        self.layer_norm(sum, ln)
    }

    /// Encode source features `[N, feat_dim]` into `[N', d_model]`. With the
    /// default stride-1 frontend `N' == N`; a larger stride stacks that many
    /// consecutive frames per output position.
    pub fn encode(&mut self, features: &[Vec<f64>]) -> Result<NodeId, ModelError> {
        if features.is_empty() {
            return Err(ModelError::EmptyInput("encode"));
        }
        let cfg = &self.model.cfg;
        for row in features {
            if row.len() != cfg.feat_dim {
                return Err(ModelError::LengthMismatch {
                    what: "feature row",
                    got: row.len(),
                    want: cfg.feat_dim,
                });
            }
        }
        let stride = cfg.frontend_stride;
        let n_out = features.len().div_ceil(stride);
        if n_out > cfg.max_positions {
            return Err(ModelError::SequenceTooLong {
                len: n_out,
                max: cfg.max_positions,
            });
        }
        let in_dim = cfg.feat_dim * stride;
        let mut stacked = vec![S::zero(); n_out * in_dim];
        for (i, row) in features.iter().enumerate() {
            let (out_row, slot) = (i / stride, i % stride);
            let off = out_row * in_dim + slot * cfg.feat_dim;
            for (j, &x) in row.iter().enumerate() {
                stacked[off + j] = S::from_f64(x);
            }
        }
        let x0 = self
            .tape
            .constant(Tensor::new(vec![n_out, in_dim], stacked).expect("stacked shape"));
        let mut x = self.linear(x0, "enc.in")?;
        let pos = self.tape.constant(positional_encoding::<S>(n_out, cfg.d_model));
        x = self.tape.add(x, pos)?;
        x = self.dropout(x);
        for i in 0..cfg.enc_layers {
            let a = self.attention(x, x, &format!("enc.l{i}.attn"), cfg.enc_heads, false)?;
            x = self.residual(x, a, &format!("enc.l{i}.ln1"))?;
            let f = self.feed_forward(x, &format!("enc.l{i}.ff"))?;
            x = self.residual(x, f, &format!("enc.l{i}.ln2"))?;
        }
        Ok(x)
    }

    /// One timing embedding: scalar per position -> linear `[1, timing_dim]`
    /// -> layer norm -> ReLU.
    fn timing_embedding(&mut self, scalars: &[f64], role: &str) -> Result<NodeId, KernelError> {
        let col: Vec<S> = scalars.iter().map(|&x| S::from_f64(x)).collect();
        let x = self
            .tape
            .constant(Tensor::new(vec![scalars.len(), 1], col).expect("column shape"));
        let lin = self.linear(x, role)?;
        let normed = self.layer_norm(lin, &format!("{role}.ln"))?;
        Ok(self.tape.relu(normed))
    }

    /// Build the decoder input `[T, 3*timing_dim + text_dim]` from the four
    /// per-position input sequences, concatenated in the fixed order
    /// text / duration / remaining-frames / pause.
    pub fn build_decoder_input(
        &mut self,
        prev_tokens: &[u32],
        prev_durations: &[f64],
        remaining_frames: &[f64],
        pause_flags: &[bool],
    ) -> Result<NodeId, ModelError> {
        let t = prev_tokens.len();
        if t == 0 {
            return Err(ModelError::EmptyInput("build_decoder_input"));
        }
        for (what, len) in [
            ("prev_durations", prev_durations.len()),
            ("remaining_frames", remaining_frames.len()),
            ("pause_flags", pause_flags.len()),
        ] {
            if len != t {
                return Err(ModelError::LengthMismatch { what, got: len, want: t });
            }
        }
        let cfg = &self.model.cfg;
        if t > cfg.max_positions {
            return Err(ModelError::SequenceTooLong { len: t, max: cfg.max_positions });
        }

        let table = self.p("dec.tok_emb");
        let emb = self.tape.embedding_lookup(table, prev_tokens)?;
        let pos = self.tape.constant(positional_encoding::<S>(t, cfg.text_dim));
        let z = self.tape.add(emb, pos)?;

        let (d, f, s) = if cfg.ablate_timing {
            let zeros = || Tensor::zeros(vec![t, cfg.timing_dim]);
            (
                self.tape.constant(zeros()),
                self.tape.constant(zeros()),
                self.tape.constant(zeros()),
            )
        } else {
            let c_d = cfg.duration_scale;
            let dur_scaled: Vec<f64> = prev_durations.iter().map(|&x| x / c_d).collect();
            let rem_scaled: Vec<f64> = remaining_frames.iter().map(|&x| x / c_d).collect();
            let pause: Vec<f64> = pause_flags.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            (
                self.timing_embedding(&dur_scaled, "dur")?,
                self.timing_embedding(&rem_scaled, "frames")?,
                self.timing_embedding(&pause, "pause")?,
            )
        };

        let e = self.tape.concat_last_axis(&[z, d, f, s])?;
        let got = self.tape.value(e).last_dim();
        if got != cfg.decoder_width() {
            return Err(ModelError::WidthMismatch {
                what: "decoder input",
                got,
                want: cfg.decoder_width(),
            });
        }
        Ok(e)
    }

    /// Causal transformer decoder over the built input with cross-attention
    /// into the encoder output. A zero-layer configuration is the identity.
    pub fn decode(&mut self, e: NodeId, h: NodeId) -> Result<NodeId, ModelError> {
        let cfg = &self.model.cfg;
        let want = cfg.decoder_width();
        if self.tape.value(e).last_dim() != want {
            return Err(ModelError::WidthMismatch {
                what: "decoder input",
                got: self.tape.value(e).last_dim(),
                want,
            });
        }
        let mut x = e;
        for i in 0..cfg.dec_layers {
            let a = self.attention(x, x, &format!("dec.l{i}.self"), cfg.dec_heads, true)?;
            x = self.residual(x, a, &format!("dec.l{i}.ln1"))?;
            let c = self.attention(x, h, &format!("dec.l{i}.cross"), cfg.dec_heads, false)?;
            x = self.residual(x, c, &format!("dec.l{i}.ln2"))?;
            let f = self.feed_forward(x, &format!("dec.l{i}.ff"))?;
            x = self.residual(x, f, &format!("dec.l{i}.ln3"))?;
        }
        if self.tape.value(x).last_dim() != want {
            return Err(ModelError::WidthMismatch {
                what: "decoder output",
                got: self.tape.value(x).last_dim(),
                want,
            });
        }
        Ok(x)
    }

    /// Token logits from the text slice of `O`, duration predictions from the
    /// following timing slice; the trailing slices feed no head.
    pub fn project_heads(&mut self, o: NodeId) -> Result<(NodeId, NodeId), ModelError> {
        let cfg = &self.model.cfg;
        if self.tape.value(o).last_dim() != cfg.decoder_width() {
            return Err(ModelError::WidthMismatch {
                what: "head input",
                got: self.tape.value(o).last_dim(),
                want: cfg.decoder_width(),
            });
        }
        let t = self.tape.value(o).rows();
        let o1 = self.tape.slice_last_axis(o, 0, cfg.text_dim)?;
        let logits = self.linear(o1, "head.token")?;
        let o2 = self
            .tape
            .slice_last_axis(o, cfg.text_dim, cfg.text_dim + cfg.timing_dim)?;
        let dur_col = self.linear(o2, "head.dur")?;
        let dur = self.tape.reshape(dur_col, vec![t])?;
        Ok((logits, dur))
    }

    /// Full teacher-forced pass: inputs at position `t` are the previous
    /// token and its (optionally noised) duration plus the current remaining
    /// frames and pause flag; predictions at `t` target `(tokens[t],
    /// durations[t])`.
    pub fn teacher_forced(
        &mut self,
        u: &Utterance,
        pt: &PreparedTarget,
        noise_sigma: f64,
        noise_rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, NodeId), ModelError> {
        let t = pt.len();
        if t == 0 {
            return Err(ModelError::EmptyInput("teacher_forced"));
        }
        let mut prev_tokens = Vec::with_capacity(t);
        prev_tokens.push(SOS_ID);
        prev_tokens.extend_from_slice(&pt.tokens[..t - 1]);

        let dur_in = add_duration_noise(&pt.durations, noise_sigma, noise_rng)?;
        let mut prev_durations = Vec::with_capacity(t);
        prev_durations.push(0.0);
        prev_durations.extend_from_slice(&dur_in[..t - 1]);

        let remaining: Vec<f64> = pt.remaining_frames.iter().map(|&f| f as f64).collect();

        let h = self.encode(&u.features)?;
        let e = self.build_decoder_input(&prev_tokens, &prev_durations, &remaining, &pt.pause_flags)?;
        let o = self.decode(e, h)?;
        self.project_heads(o)
    }
}

// ---------------------------------------------------------------------------
// checkpoint file
// ---------------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Optimizer and data-order state needed to resume training bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub cursor: usize,
    pub adam_step: u64,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub version: u32,
    pub precision: String,
    pub model: ModelConfig,
    pub params: Vec<SavedParam>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_state: Option<TrainState>,
}

impl<S: Scalar> Model<S> {
    pub fn to_checkpoint(&self, train_state: Option<TrainState>) -> CheckpointFile {
        CheckpointFile {
            version: CHECKPOINT_VERSION,
            precision: S::NAME.to_string(),
            model: self.cfg.clone(),
            params: self
                .params
                .entries()
                .iter()
                .map(|p| SavedParam {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.to_f64_vec(),
                })
                .collect(),
            train_state,
        }
    }

    pub fn save(&self, path: &std::path::Path, train_state: Option<TrainState>) -> Result<(), ModelError> {
        let file = self.to_checkpoint(train_state);
        let json = serde_json::to_string(&file)
            .map_err(|e| ModelError::Checkpoint(format!("serialize: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Rebuild a model from a checkpoint, validating every parameter shape
    /// against the stored configuration.
    pub fn from_checkpoint(file: &CheckpointFile) -> Result<Self, ModelError> {
        if file.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {}",
                file.version
            )));
        }
        file.model.validate()?;
        let spec = parameter_spec(&file.model);
        if spec.len() != file.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                spec.len(),
                file.params.len()
            )));
        }
        let mut params = ParamStore::new();
        for ((name, shape, _), saved) in spec.iter().zip(&file.params) {
            if *name != saved.name || *shape != saved.shape {
                return Err(ModelError::CheckpointParam {
                    name: if *name == saved.name { name.clone() } else { saved.name.clone() },
                    expected: shape.clone(),
                    got: saved.shape.clone(),
                });
            }
            params.insert(name, Tensor::from_f64_slice(shape.clone(), &saved.data)?);
        }
        Ok(Model {
            cfg: file.model.clone(),
            params,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, Option<TrainState>), ModelError> {
        let text = std::fs::read_to_string(path)?;
        let file: CheckpointFile = serde_json::from_str(&text)
            .map_err(|e| ModelError::Checkpoint(format!("parse: {e}")))?;
        let model = Self::from_checkpoint(&file)?;
        Ok((model, file.train_state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, prepare_target, CorpusConfig};
    use crate::tape::Reduction;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            feat_dim: 4,
            d_model: 16,
            text_dim: 8,
            timing_dim: 4,
            enc_layers: 1,
            enc_heads: 2,
            dec_layers: 1,
            dec_heads: 2,
            ff_dim: 16,
            dropout: 0.0,
            vocab_size: 12,
            max_positions: 160,
            duration_scale: 100.0,
            frontend_stride: 1,
            ablate_timing: false,
        }
    }

    fn feats(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = derive_rng(seed, &[4]);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn config_invariants_are_enforced() {
        let mut cfg = tiny_cfg();
        cfg.dec_heads = 3; // 3 does not divide 20
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.vocab_size = 5;
        assert!(cfg.validate().is_err());
        assert_eq!(tiny_cfg().decoder_width(), 20);
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let model = Model::<f64>::new(tiny_cfg(), 1).unwrap();
        let x = feats(1, 4, 9);
        let mut tape = Tape::new();
        let h = model.forward(&mut tape, Mode::Eval).encode(&x).unwrap();
        assert_eq!(tape.value(h).shape(), &[1, 16]);

        let x = feats(7, 4, 10);
        let run = |x: &[Vec<f64>]| {
            let mut tape = Tape::new();
            let mut fwd = model.forward(&mut tape, Mode::Eval);
            let h = fwd.encode(x).unwrap();
            tape.value(h).data().to_vec()
        };
        assert_eq!(run(&x), run(&x), "eval mode is deterministic");

        // permuting two frames changes h because positions are encoded
        let mut xp = x.clone();
        xp.swap(1, 5);
        assert_ne!(run(&x), run(&xp));

        let mut tape = Tape::<f64>::new();
        let err = model.forward(&mut tape, Mode::Eval).encode(&[]).unwrap_err();
        assert!(matches!(err, ModelError::EmptyInput(_)));
    }

    #[test]
    fn frame_stacking_frontend_shortens_output() {
        let mut cfg = tiny_cfg();
        cfg.frontend_stride = 2;
        let model = Model::<f64>::new(cfg, 1).unwrap();
        let x = feats(7, 4, 12);
        let mut tape = Tape::new();
        let h = model.forward(&mut tape, Mode::Eval).encode(&x).unwrap();
        assert_eq!(tape.value(h).shape(), &[4, 16]);
    }

    #[test]
    fn decoder_input_width_and_zero_scalar_column() {
        let model = Model::<f64>::new(tiny_cfg(), 2).unwrap();
        let mut tape = Tape::new();
        let mut fwd = model.forward(&mut tape, Mode::Eval);
        let e = fwd
            .build_decoder_input(&[SOS_ID], &[0.0], &[0.0], &[false])
            .unwrap();
        assert_eq!(tape.value(e).shape(), &[1, 20]);

        // with a zero scalar input the duration embedding equals
        // relu(layer_norm(bias)) and is input-independent
        let mut tape2 = Tape::new();
        let mut fwd2 = model.forward(&mut tape2, Mode::Eval);
        let b = fwd2.p("dur.b");
        let row = fwd2.tape.reshape(b, vec![1, 4]).unwrap();
        let ln = fwd2.layer_norm(row, "dur.ln").unwrap();
        let want = fwd2.tape.relu(ln);
        let want = tape2.value(want).data().to_vec();

        let mut tape3 = Tape::new();
        let mut fwd3 = model.forward(&mut tape3, Mode::Eval);
        let e3 = fwd3
            .build_decoder_input(&[SOS_ID], &[0.0], &[0.0], &[false])
            .unwrap();
        let d_slice = tape3.value(e3).data()[8..12].to_vec();
        assert_eq!(d_slice, want);
    }

    #[test]
    fn doubling_remaining_frames_touches_only_the_f_slice() {
        let model = Model::<f64>::new(tiny_cfg(), 3).unwrap();
        let tokens = [SOS_ID, 6, 7];
        let durs = [0.0, 0.0, 3.0];
        let rem = [30.0, 30.0, 27.0];
        let pause = [false, false, false];
        let build = |rem: &[f64]| {
            let mut tape = Tape::new();
            let mut fwd = model.forward(&mut tape, Mode::Eval);
            let e = fwd.build_decoder_input(&tokens, &durs, rem, &pause).unwrap();
            tape.value(e).data().to_vec()
        };
        let base = build(&rem);
        let mut rem2 = rem;
        rem2[1] *= 2.0;
        let changed = build(&rem2);
        let (text, timing) = (8usize, 4usize);
        let width = 20usize;
        let mut f_slice_changed = false;
        for row in 0..3 {
            for col in 0..width {
                let in_f_slice = (text + timing..text + 2 * timing).contains(&col);
                let same = base[row * width + col] == changed[row * width + col];
                if row == 1 && in_f_slice {
                    f_slice_changed |= !same;
                } else {
                    assert!(same, "row {row} col {col} changed unexpectedly");
                }
            }
        }
        assert!(f_slice_changed, "row 1 F slice should respond to the input");
    }

    #[test]
    fn decode_is_causal_and_zero_layers_is_identity() {
        let model = Model::<f64>::new(tiny_cfg(), 4).unwrap();
        let x = feats(5, 4, 20);
        let run = |durs: &[f64]| {
            let mut tape = Tape::new();
            let mut fwd = model.forward(&mut tape, Mode::Eval);
            let h = fwd.encode(&x).unwrap();
            let e = fwd
                .build_decoder_input(
                    &[SOS_ID, 6, 7, 8],
                    durs,
                    &[20.0, 20.0, 15.0, 12.0],
                    &[false; 4],
                )
                .unwrap();
            let o = fwd.decode(e, h).unwrap();
            tape.value(o).data().to_vec()
        };
        let base = run(&[0.0, 2.0, 3.0, 4.0]);
        // perturb the input at position 2; outputs before it are unchanged
        let later = run(&[0.0, 2.0, 9.0, 4.0]);
        let width = 20;
        assert_eq!(&base[..2 * width], &later[..2 * width], "causality");
        assert_ne!(&base[2 * width..], &later[2 * width..]);

        // zero-layer decoder passes the input through exactly
        let mut cfg0 = tiny_cfg();
        cfg0.dec_layers = 0;
        let model0 = Model::<f64>::new(cfg0, 4).unwrap();
        let mut tape = Tape::new();
        let mut fwd = model0.forward(&mut tape, Mode::Eval);
        let h = fwd.encode(&x).unwrap();
        let e = fwd
            .build_decoder_input(&[SOS_ID, 6], &[0.0, 1.0], &[9.0, 9.0], &[false, false])
            .unwrap();
        let o = fwd.decode(e, h).unwrap();
        assert_eq!(tape.value(o).data(), tape.value(e).data());

        // single-step decode works
        let mut tape1 = Tape::new();
        let mut fwd1 = model.forward(&mut tape1, Mode::Eval);
        let h1 = fwd1.encode(&x).unwrap();
        let e1 = fwd1
            .build_decoder_input(&[SOS_ID], &[0.0], &[20.0], &[false])
            .unwrap();
        let o1 = fwd1.decode(e1, h1).unwrap();
        assert_eq!(tape1.value(o1).shape(), &[1, 20]);
    }

    #[test]
    fn heads_read_disjoint_slices_and_ignore_the_rest() {
        let model = Model::<f64>::new(tiny_cfg(), 5).unwrap();
        let width = 20;
        let t = 5;
        let mut rng = derive_rng(31, &[7]);
        let o_data: Vec<f64> = (0..t * width).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |o_data: &[f64]| {
            let mut tape = Tape::new();
            let mut fwd = model.forward(&mut tape, Mode::Eval);
            let o = fwd
                .tape
                .constant(Tensor::new(vec![t, width], o_data.to_vec()).unwrap());
            let (logits, dur) = fwd.project_heads(o).unwrap();
            (
                fwd.tape.value(logits).data().to_vec(),
                fwd.tape.value(dur).data().to_vec(),
            )
        };
        let (logits, dur) = run(&o_data);
        assert_eq!(logits.len(), t * 12);
        assert_eq!(dur.len(), t);

        // perturbing the trailing remaining-frames/pause slices changes
        // neither head output
        let mut tail = o_data.clone();
        for r in 0..t {
            for c in 12..20 {
                tail[r * width + c] += 5.0;
            }
        }
        let (logits2, dur2) = run(&tail);
        assert_eq!(logits, logits2);
        assert_eq!(dur, dur2);

        // perturbing the text slice changes only logits; the duration slice
        // changes only durations
        let mut text = o_data.clone();
        text[0] += 1.0;
        let (logits3, dur3) = run(&text);
        assert_ne!(logits, logits3);
        assert_eq!(dur, dur3);

        let mut dcol = o_data.clone();
        dcol[8] += 1.0;
        let (logits4, dur4) = run(&dcol);
        assert_eq!(logits, logits4);
        assert_ne!(dur, dur4);

        // zero O: logits equal the token-head bias, durations the head bias
        let zeros = vec![0.0; t * width];
        let (logits5, dur5) = run(&zeros);
        let bt = model.params.get("head.token.b").unwrap().value.data().to_vec();
        let bd = model.params.get("head.dur.b").unwrap().value.item();
        for row in logits5.chunks(12) {
            assert_eq!(row, &bt[..]);
        }
        assert!(dur5.iter().all(|&v| v == bd));
    }

    #[test]
    fn ablation_flag_zeroes_timing_and_keeps_param_count() {
        let mut cfg = tiny_cfg();
        let base = Model::<f64>::new(cfg.clone(), 6).unwrap();
        cfg.ablate_timing = true;
        let ablated = Model::<f64>::new(cfg, 6).unwrap();
        assert_eq!(
            base.params.element_count(),
            ablated.params.element_count(),
            "identical parameter count"
        );

        // timing inputs have no influence on the ablated model's logits
        let x = feats(6, 4, 40);
        let run = |m: &Model<f64>, durs: &[f64], rem: &[f64], pause: &[bool]| {
            let mut tape = Tape::new();
            let mut fwd = m.forward(&mut tape, Mode::Eval);
            let h = fwd.encode(&x).unwrap();
            let e = fwd
                .build_decoder_input(&[SOS_ID, 6, 7], durs, rem, pause)
                .unwrap();
            let o = fwd.decode(e, h).unwrap();
            let (logits, _) = fwd.project_heads(o).unwrap();
            tape.value(logits).data().to_vec()
        };
        let a = run(&ablated, &[0.0, 1.0, 2.0], &[9.0, 9.0, 8.0], &[false, false, true]);
        let b = run(&ablated, &[0.0, 7.0, 1.0], &[2.0, 5.0, 1.0], &[false, true, false]);
        assert_eq!(a, b, "ablated model ignores timing inputs");

        let c = run(&base, &[0.0, 1.0, 2.0], &[9.0, 9.0, 8.0], &[false, false, true]);
        let d = run(&base, &[0.0, 7.0, 1.0], &[2.0, 5.0, 1.0], &[false, true, false]);
        assert_ne!(c, d, "full model is sensitive to timing inputs");
    }

    #[test]
    fn teacher_forced_initial_loss_is_near_uniform() {
        let cfg = CorpusConfig::parse("seed = 5\nn_train=4\nn_dev=1\nn_test=1\nfeat_dim=4\nsrc_vocab=4\nn_phonemes=3\n").unwrap();
        let corpus = generate_corpus(&cfg, 4, 1);
        let mut mcfg = tiny_cfg();
        mcfg.vocab_size = cfg.vocab_size();
        let model = Model::<f64>::new(mcfg, 7).unwrap();

        let mut total = 0.0;
        let mut count = 0usize;
        for u in &corpus {
            let pt = prepare_target(u).unwrap();
            let mut tape = Tape::new();
            let mut fwd = model.forward(&mut tape, Mode::Eval);
            let mut rng = derive_rng(0, &[0]);
            let (logits, _) = fwd.teacher_forced(u, &pt, 0.0, &mut rng).unwrap();
            let mask = vec![true; pt.len()];
            let ce = tape
                .cross_entropy_from_logits(logits, &pt.tokens, &mask, 0.0, Reduction::Sum)
                .unwrap();
            total += tape.value(ce).item();
            count += pt.len();
        }
        let per_token = total / count as f64;
        let ln_v = (cfg.vocab_size() as f64).ln();
        assert!(
            (per_token - ln_v).abs() <= 0.1 * ln_v,
            "initial loss {per_token} vs ln V {ln_v}"
        );
    }

    #[test]
    fn zero_noise_path_is_bit_identical() {
        let cfg = CorpusConfig::parse("seed = 6\nfeat_dim=4\nsrc_vocab=4\nn_phonemes=3\n").unwrap();
        let u = &generate_corpus(&cfg, 1, 1)[0];
        let pt = prepare_target(u).unwrap();
        let mut mcfg = tiny_cfg();
        mcfg.vocab_size = cfg.vocab_size();
        let model = Model::<f64>::new(mcfg, 8).unwrap();

        let run = |sigma: f64| {
            let mut tape = Tape::new();
            let mut fwd = model.forward(&mut tape, Mode::Eval);
            let mut rng = derive_rng(3, &[1]);
            let (logits, dur) = fwd.teacher_forced(u, &pt, sigma, &mut rng).unwrap();
            (
                tape.value(logits).data().to_vec(),
                tape.value(dur).data().to_vec(),
            )
        };
        assert_eq!(run(0.0), run(0.0));
        assert_ne!(run(0.0).0, run(1.0).0);
    }

    #[test]
    fn dropout_is_applied_in_train_mode_only() {
        let mut cfg = tiny_cfg();
        cfg.dropout = 0.5;
        let model = Model::<f64>::new(cfg, 9).unwrap();
        let x = feats(4, 4, 50);
        let run = |mode: Mode| {
            let mut tape = Tape::new();
            let mut fwd = model.forward(&mut tape, mode);
            let h = fwd.encode(&x).unwrap();
            tape.value(h).data().to_vec()
        };
        let e1 = run(Mode::Eval);
        let e2 = run(Mode::Eval);
        assert_eq!(e1, e2);
        let t1 = run(Mode::Train { dropout_seed: 1 });
        let t2 = run(Mode::Train { dropout_seed: 2 });
        let t1b = run(Mode::Train { dropout_seed: 1 });
        assert_eq!(t1, t1b, "same dropout seed replays the same mask");
        assert_ne!(t1, t2);
        assert_ne!(t1, e1);
    }

    #[test]
    fn checkpoint_round_trip_validates_shapes() {
        let model = Model::<f32>::new(tiny_cfg(), 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt.json");
        model.save(&path, None).unwrap();
        let (back, ts) = Model::<f32>::load(&path).unwrap();
        assert!(ts.is_none());
        assert_eq!(back.cfg, model.cfg);
        for (a, b) in back.params.entries().iter().zip(model.params.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value, "exact parameter round trip: {}", a.name);
        }

        // corrupt one shape; loading must name the parameter
        let mut file: CheckpointFile =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        file.params[3].shape = vec![1, 2, 3];
        let err = Model::<f32>::from_checkpoint(&file).unwrap_err();
        match err {
            ModelError::CheckpointParam { name, .. } => {
                assert_eq!(name, file.params[3].name);
            }
            other => panic!("expected CheckpointParam, got {other}"),
        }
    }
}
