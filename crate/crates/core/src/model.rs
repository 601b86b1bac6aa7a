//! The architecture ladder: linear, MLP, single-block attention and the
//! multi-block transformer, each mapping a context window of `T` token ids to
//! next-token logits.
//!
//! All block-based models are pre-norm: each residual branch applies a layer
//! norm before its sublayer, and one final layer norm precedes the output
//! head. Only the final position's hidden state is projected to logits.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels::RopeTable;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Linear,
    Mlp,
    Attention,
    Transformer,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Linear, Arch::Mlp, Arch::Attention, Arch::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Linear => "linear",
            Arch::Mlp => "mlp",
            Arch::Attention => "attention",
            Arch::Transformer => "transformer",
        }
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, Arch::Attention | Arch::Transformer)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::ModelConfig(format!("unknown architecture {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positional {
    Learned,
    Rope,
}

impl Positional {
    pub fn name(self) -> &'static str {
        match self {
            Positional::Learned => "learned",
            Positional::Rope => "rope",
        }
    }
}

impl FromStr for Positional {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Positional::Learned),
            "rope" => Ok(Positional::Rope),
            _ => Err(Error::ModelConfig(format!(
                "unknown positional encoding {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Context length `T`.
    pub context: usize,
    pub vocab: usize,
    pub d_model: usize,
    /// Width of each of the MLP's two hidden layers.
    pub mlp_hidden: usize,
    pub heads: usize,
    /// Block count for [`Arch::Transformer`]; the attention model always has one.
    pub layers: usize,
    pub ff_width: usize,
    pub dropout: f64,
    /// Dropout on attention weights; off unless explicitly requested.
    pub attn_dropout: f64,
    pub positional: Positional,
}

impl ModelConfig {
    fn base(arch: Arch, context: usize, vocab: usize) -> Self {
        Self {
            arch,
            context,
            vocab,
            d_model: 128,
            mlp_hidden: 256,
            heads: 4,
            layers: 3,
            ff_width: 256,
            dropout: 0.1,
            attn_dropout: 0.0,
            positional: Positional::Learned,
        }
    }

    pub fn linear(context: usize, vocab: usize) -> Self {
        Self::base(Arch::Linear, context, vocab)
    }

    pub fn mlp(context: usize, vocab: usize, hidden: usize) -> Self {
        Self {
            mlp_hidden: hidden,
            ..Self::base(Arch::Mlp, context, vocab)
        }
    }

    /// Single block with a 128 -> 512 -> 128 feed-forward.
    pub fn attention(context: usize, vocab: usize, heads: usize) -> Self {
        Self {
            heads,
            ff_width: 512,
            ..Self::base(Arch::Attention, context, vocab)
        }
    }

    pub fn transformer(context: usize, vocab: usize, layers: usize) -> Self {
        Self {
            layers,
            ..Self::base(Arch::Transformer, context, vocab)
        }
    }

    /// The same configuration with `arch`'s default widths.
    pub fn preset(arch: Arch, context: usize, vocab: usize) -> Self {
        match arch {
            Arch::Linear => Self::linear(context, vocab),
            Arch::Mlp => Self::mlp(context, vocab, 256),
            Arch::Attention => Self::attention(context, vocab, 4),
            Arch::Transformer => Self::transformer(context, vocab, 3),
        }
    }

    pub fn with_rope(self) -> Self {
        Self {
            positional: Positional::Rope,
            ..self
        }
    }

    pub fn blocks(&self) -> usize {
        match self.arch {
            Arch::Attention => 1,
            Arch::Transformer => self.layers,
            _ => 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ModelConfig(msg));
        if self.context == 0 || self.vocab == 0 || self.d_model == 0 {
            return bad("context, vocab and d_model must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.attn_dropout) {
            return bad("dropout probabilities must lie in [0, 1)".into());
        }
        match self.arch {
            Arch::Linear => {}
            Arch::Mlp => {
                if self.mlp_hidden == 0 {
                    return bad("mlp_hidden must be positive".into());
                }
            }
            Arch::Attention | Arch::Transformer => {
                if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
                    return bad(format!(
                        "{} heads do not divide d_model {}",
                        self.heads, self.d_model
                    ));
                }
                if self.ff_width == 0 {
                    return bad("ff_width must be positive".into());
                }
                if self.blocks() == 0 {
                    return bad("transformer needs at least one layer".into());
                }
                if self.positional == Positional::Rope && !self.head_dim().is_multiple_of(2) {
                    return bad(format!(
                        "rope needs an even head dimension, got {}",
                        self.head_dim()
                    ));
                }
            }
        }
        if self.positional == Positional::Rope && !self.arch.uses_attention() {
            return bad(format!(
                "rope positions require an attention model, not {}",
                self.arch
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count, independent of any instantiated model.
    pub fn param_count(&self) -> usize {
        let (t, v, d) = (self.context, self.vocab, self.d_model);
        let embed = v * d;
        match self.arch {
            Arch::Linear => embed + t * d * v + v,
            Arch::Mlp => {
                let h = self.mlp_hidden;
                embed + (t * d * h + h) + (h * h + h) + (h * v + v)
            }
            Arch::Attention | Arch::Transformer => {
                let pos = match self.positional {
                    Positional::Learned => t * d,
                    Positional::Rope => 0,
                };
                let norms = 2 * 2 * d;
                let attn = 4 * (d * d + d);
                let ff = (d * self.ff_width + self.ff_width) + (self.ff_width * d + d);
                embed + pos + self.blocks() * (norms + attn + ff) + 2 * d + (d * v + v)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub tensor: Tensor<F>,
}

#[derive(Debug, Clone)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Norm {
    gain: usize,
    shift: usize,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Norm,
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    ln2: Norm,
    ff1: Dense,
    ff2: Dense,
}

#[derive(Debug, Clone)]
enum Layout {
    Linear {
        out: Dense,
    },
    Mlp {
        fc1: Dense,
        fc2: Dense,
        out: Dense,
    },
    Blocks {
        pos: Option<usize>,
        blocks: Vec<Block>,
        ln_f: Norm,
        head: Dense,
    },
}

/// Parameters initialized from `Normal(0, 0.02)` for weights and
/// embeddings, zeros for biases, ones/zeros for layer norm gain/shift.
struct Builder<F: Scalar> {
    params: Vec<Param<F>>,
    rng: ChaCha8Rng,
}

impl<F: Scalar> Builder<F> {
    fn normal(&mut self, name: String, shape: &[usize]) -> usize {
        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| F::of(dist.sample(&mut self.rng))).collect();
        self.push(name, Tensor::new(shape, data).expect("valid shape"))
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.push(name, Tensor::full(shape, F::of(value)))
    }

    fn push(&mut self, name: String, tensor: Tensor<F>) -> usize {
        self.params.push(Param { name, tensor });
        self.params.len() - 1
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        Dense {
            w: self.normal(format!("{name}.weight"), &[fan_in, fan_out]),
            b: self.constant(format!("{name}.bias"), &[fan_out], 0.0),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.constant(format!("{name}.gain"), &[d], 1.0),
            shift: self.constant(format!("{name}.shift"), &[d], 0.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<F: Scalar = f32> {
    config: ModelConfig,
    params: Vec<Param<F>>,
    layout: Layout,
    rope: Option<Arc<RopeTable<F>>>,
}

const TOKEN_EMBEDDING: usize = 0;

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let (t, v, d) = (config.context, config.vocab, config.d_model);
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(init_seed),
        };
        let emb = b.normal("tok_emb".into(), &[v, d]);
        debug_assert_eq!(emb, TOKEN_EMBEDDING);
        let layout = match config.arch {
            Arch::Linear => Layout::Linear {
                out: b.dense("out", t * d, v),
            },
            Arch::Mlp => {
                let h = config.mlp_hidden;
                Layout::Mlp {
                    fc1: b.dense("fc1", t * d, h),
                    fc2: b.dense("fc2", h, h),
                    out: b.dense("out", h, v),
                }
            }
            Arch::Attention | Arch::Transformer => {
                let pos = (config.positional == Positional::Learned)
                    .then(|| b.normal("pos_emb".into(), &[t, d]));
                let blocks = (0..config.blocks())
                    .map(|i| Block {
                        ln1: b.norm(&format!("block{i}.ln1"), d),
                        q: b.dense(&format!("block{i}.attn.q"), d, d),
                        k: b.dense(&format!("block{i}.attn.k"), d, d),
                        v: b.dense(&format!("block{i}.attn.v"), d, d),
                        o: b.dense(&format!("block{i}.attn.o"), d, d),
                        ln2: b.norm(&format!("block{i}.ln2"), d),
                        ff1: b.dense(&format!("block{i}.ff1"), d, config.ff_width),
                        ff2: b.dense(&format!("block{i}.ff2"), config.ff_width, d),
                    })
                    .collect();
                Layout::Blocks {
                    pos,
                    blocks,
                    ln_f: b.norm("ln_f", d),
                    head: b.dense("head", d, v),
                }
            }
        };
        let rope = (config.positional == Positional::Rope)
            .then(|| Arc::new(RopeTable::new(t, config.head_dim(), ROPE_BASE)));
        Ok(Self {
            config,
            params: b.params,
            layout,
            rope,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Copies of every parameter value, in declaration order.
    pub fn snapshot(&self) -> Vec<Tensor<F>> {
        self.params
            .iter()
            .map(|p| Tensor::new(p.tensor.shape(), p.tensor.data().to_vec()).unwrap())
            .collect()
    }

    /// Replaces parameter values; shapes must match declaration order.
    pub fn restore(&mut self, values: Vec<Tensor<F>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::invalid(
                "restore",
                format!(
                    "expected {} tensors, got {}",
                    self.params.len(),
                    values.len()
                ),
            ));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.tensor.shape() != v.shape() {
                return Err(Error::shape("restore", p.tensor.shape(), v.shape()));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.tensor = v;
        }
        Ok(())
    }

    /// Zeros the output projection, making every prediction uniform.
    pub fn zero_output_head(&mut self) {
        let out = match &self.layout {
            Layout::Linear { out } | Layout::Mlp { out, .. } => out.clone(),
            Layout::Blocks { head, .. } => head.clone(),
        };
        for i in [out.w, out.b] {
            self.params[i]
                .tensor
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = F::zero());
        }
    }

    /// Records every parameter as a tape leaf, in declaration order.
    pub fn bind(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(&p.tensor)).collect()
    }

    /// Adds the tape gradients of bound parameters into their grad buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape<F>, bound: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            if let Some(g) = tape.grad(v) {
                p.tensor.accumulate_grad(g);
            } else {
                p.tensor.grad_mut();
            }
        }
    }

    fn check_batch(&self, batch: &[&[usize]]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("forward batch"));
        }
        if let Some(w) = batch.iter().find(|w| w.len() != self.config.context) {
            return Err(Error::invalid(
                "forward",
                format!(
                    "window of length {} for context length {}",
                    w.len(),
                    self.config.context
                ),
            ));
        }
        Ok(())
    }

    /// Next-token logits `[B, V]` for a batch of windows.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape<F>,
        bound: &[Var],
        batch: &[&[usize]],
        mode: &mut Mode<'_, R>,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let (bsz, d) = (batch.len(), self.config.d_model);
        let p = |i: usize| bound[i];
        match &self.layout {
            Layout::Linear { out } => {
                let x = self.embed_flat(tape, bound, batch)?;
                tape.linear(x, p(out.w), p(out.b))
            }
            Layout::Mlp { fc1, fc2, out } => {
                let x = self.embed_flat(tape, bound, batch)?;
                let mut h = x;
                for layer in [fc1, fc2] {
                    h = tape.linear(h, p(layer.w), p(layer.b))?;
                    h = tape.relu(h);
                    h = tape.dropout(h, self.config.dropout, mode)?;
                }
                tape.linear(h, p(out.w), p(out.b))
            }
            Layout::Blocks { ln_f, head, .. } => {
                let x = self.stream(tape, bound, batch, mode, true)?;
                debug_assert_eq!(tape.shape(x), &[bsz, d]);
                let x = tape.layer_norm(x, p(ln_f.gain), p(ln_f.shift), LAYER_NORM_EPS)?;
                tape.linear(x, p(head.w), p(head.b))
            }
        }
    }

    /// Embeds and concatenates each window: `[B, T*d]`.
    fn embed_flat(&self, tape: &mut Tape<F>, bound: &[Var], batch: &[&[usize]]) -> Result<Var> {
        let ids: Vec<usize> = batch.iter().flat_map(|w| w.iter().copied()).collect();
        let e = tape.embedding(bound[TOKEN_EMBEDDING], &ids)?;
        tape.reshape(e, &[batch.len(), self.config.context * self.config.d_model])
    }

    /// Final residual stream `[B*T, d]` of a block model, before the last
    /// layer norm. Row `b*T + t` depends only on tokens `0..=t` of window `b`.
    pub fn residual_stream<R: Rng>(
        &self,
        tape: &mut Tape<F>,
        bound: &[Var],
        batch: &[&[usize]],
        mode: &mut Mode<'_, R>,
    ) -> Result<Var> {
        self.stream(tape, bound, batch, mode, false)
    }

    /// With `last_only`, the final block computes queries, the feed-forward
    /// and the residual only at the last position of each window: `[B, d]`.
    fn stream<R: Rng>(
        &self,
        tape: &mut Tape<F>,
        bound: &[Var],
        batch: &[&[usize]],
        mode: &mut Mode<'_, R>,
        last_only: bool,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let Layout::Blocks { pos, blocks, .. } = &self.layout else {
            return Err(Error::invalid(
                "residual_stream",
                format!("{} has no residual stream", self.config.arch),
            ));
        };
        let cfg = &self.config;
        let (bsz, t, heads) = (batch.len(), cfg.context, cfg.heads);
        let p = |i: usize| bound[i];
        let ids: Vec<usize> = batch.iter().flat_map(|w| w.iter().copied()).collect();
        let mut x = tape.embedding(p(TOKEN_EMBEDDING), &ids)?;
        if let Some(pos) = pos {
            let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..t).collect();
            let pe = tape.embedding(p(*pos), &positions)?;
            x = tape.add(x, pe)?;
        }
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        let last: Vec<usize> = (0..bsz).map(|b| b * t + t - 1).collect();
        for (i, blk) in blocks.iter().enumerate() {
            let trim = last_only && i + 1 == blocks.len();
            let h = tape.layer_norm(x, p(blk.ln1.gain), p(blk.ln1.shift), LAYER_NORM_EPS)?;
            let heads_of = |tape: &mut Tape<F>, h: Var, dense: &Dense, seq: usize| -> Result<Var> {
                let y = tape.linear(h, p(dense.w), p(dense.b))?;
                tape.split_heads(y, bsz, seq, heads)
            };
            let (hq, tq) = if trim {
                (tape.gather_rows(h, &last)?, 1)
            } else {
                (h, t)
            };
            let mut q = heads_of(tape, hq, &blk.q, tq)?;
            let mut k = heads_of(tape, h, &blk.k, t)?;
            let v = heads_of(tape, h, &blk.v, t)?;
            if let Some(table) = &self.rope {
                q = tape.rope_at(q, table.clone(), t - tq)?;
                k = tape.rope(k, table.clone())?;
            }
            let a = tape.causal_attention(q, k, v, scale, cfg.attn_dropout, mode)?;
            let a = tape.merge_heads(a, bsz, heads)?;
            if trim {
                x = tape.gather_rows(x, &last)?;
            }
            let a = tape.linear(a, p(blk.o.w), p(blk.o.b))?;
            let a = tape.dropout(a, cfg.dropout, mode)?;
            x = tape.add(x, a)?;

            let h = tape.layer_norm(x, p(blk.ln2.gain), p(blk.ln2.shift), LAYER_NORM_EPS)?;
            let f = tape.linear(h, p(blk.ff1.w), p(blk.ff1.b))?;
            let f = tape.relu(f);
            let f = tape.linear(f, p(blk.ff2.w), p(blk.ff2.b))?;
            let f = tape.dropout(f, cfg.dropout, mode)?;
            x = tape.add(x, f)?;
        }
        Ok(x)
    }

    /// Eval-mode logits on a fresh tape.
    pub fn logits(&self, batch: &[&[usize]]) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, batch, &mut Mode::<ChaCha8Rng>::Eval)?;
        Ok(tape.to_tensor(out))
    }

    /// Same architecture and values in another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
            rope: self.rope.as_ref().map(|_| {
                Arc::new(RopeTable::new(
                    self.config.context,
                    self.config.head_dim(),
                    ROPE_BASE,
                ))
            }),
        }
    }
}
