//! The physics-informed decoder: derivative-enriched past encoding with RoPE
//! attention, additive static fusion, a future-covariate stack, and a head
//! that predicts the one-hour temperature change.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{
    window_derivative, Standardizer, WindowConfig, WindowSample, N_PAST_FEATURES, N_RAW, N_STATIC,
};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive mask value for disallowed attention pairs.
const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_layers_past: usize,
    pub n_layers_future: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub context_length: usize,
    pub rope_base: f64,
    pub dropout: f64,
    pub forecast_weather: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            n_layers_past: 2,
            n_layers_future: 1,
            n_heads: 4,
            ffn_dim: 128,
            context_length: 24,
            rope_base: 10_000.0,
            dropout: 0.0,
            forecast_weather: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden_dim", self.hidden_dim),
            ("n_layers_past", self.n_layers_past),
            ("n_layers_future", self.n_layers_future),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("{name} must be > 0")));
            }
        }
        if self.context_length < 2 {
            return Err(Error::config("context_length must be >= 2"));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::config(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config(format!(
                "RoPE needs an even head dimension, got {}",
                self.head_dim()
            )));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::config("rope_base must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn window(&self) -> WindowConfig {
        WindowConfig {
            context_length: self.context_length,
            forecast_weather: self.forecast_weather,
        }
    }

    pub fn future_dim(&self) -> usize {
        self.window().future_dim()
    }

    /// Closed-form trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden_dim;
        let linear = |i: usize, o: usize| i * o + o;
        let block =
            2 * h + 4 * linear(h, h) + 2 * h + linear(h, self.ffn_dim) + linear(self.ffn_dim, h);
        linear(N_PAST_FEATURES, h)
            + linear(N_STATIC, h)
            + linear(self.future_dim(), h)
            + (self.n_layers_past + self.n_layers_future) * block
            + 2 * h
            + linear(h, 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
}

/// Network weights, generic so the same layout can hold tensors, graph
/// handles, or optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub input: Linear<T>,
    pub static_proj: Linear<T>,
    pub future_proj: Linear<T>,
    pub past_blocks: Vec<Block<T>>,
    pub future_blocks: Vec<Block<T>>,
    pub final_gain: T,
    pub final_bias: T,
    pub head: Linear<T>,
}

pub type ModelParams = Params<Tensor>;

impl<T> Linear<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Linear<U> {
        Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn refs(&self) -> [&T; 2] {
        [&self.weight, &self.bias]
    }

    fn refs_mut(&mut self) -> [&mut T; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

impl<T> Block<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Block<U> {
        Block {
            ln1_gain: f(&format!("{prefix}.ln1.gain"), &self.ln1_gain),
            ln1_bias: f(&format!("{prefix}.ln1.bias"), &self.ln1_bias),
            query: self.query.map(&format!("{prefix}.attn.query"), f),
            key: self.key.map(&format!("{prefix}.attn.key"), f),
            value: self.value.map(&format!("{prefix}.attn.value"), f),
            output: self.output.map(&format!("{prefix}.attn.output"), f),
            ln2_gain: f(&format!("{prefix}.ln2.gain"), &self.ln2_gain),
            ln2_bias: f(&format!("{prefix}.ln2.bias"), &self.ln2_bias),
            ffn_in: self.ffn_in.map(&format!("{prefix}.ffn.in"), f),
            ffn_out: self.ffn_out.map(&format!("{prefix}.ffn.out"), f),
        }
    }

    fn refs(&self) -> Vec<&T> {
        let mut v = vec![&self.ln1_gain, &self.ln1_bias];
        v.extend(self.query.refs());
        v.extend(self.key.refs());
        v.extend(self.value.refs());
        v.extend(self.output.refs());
        v.extend([&self.ln2_gain, &self.ln2_bias]);
        v.extend(self.ffn_in.refs());
        v.extend(self.ffn_out.refs());
        v
    }

    fn refs_mut(&mut self) -> Vec<&mut T> {
        let mut v = vec![&mut self.ln1_gain, &mut self.ln1_bias];
        v.extend(self.query.refs_mut());
        v.extend(self.key.refs_mut());
        v.extend(self.value.refs_mut());
        v.extend(self.output.refs_mut());
        v.extend([&mut self.ln2_gain, &mut self.ln2_bias]);
        v.extend(self.ffn_in.refs_mut());
        v.extend(self.ffn_out.refs_mut());
        v
    }
}

impl<T> Params<T> {
    /// Applies `f` to every entry with its dotted name, in canonical order.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        let f = &mut f;
        Params {
            input: self.input.map("input", f),
            static_proj: self.static_proj.map("static", f),
            future_proj: self.future_proj.map("future", f),
            past_blocks: self
                .past_blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("past.{i}"), f))
                .collect(),
            future_blocks: self
                .future_blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("future_stack.{i}"), f))
                .collect(),
            final_gain: f("final_norm.gain", &self.final_gain),
            final_bias: f("final_norm.bias", &self.final_bias),
            head: self.head.map("head", f),
        }
    }

    /// Entries in canonical order.
    pub fn entries(&self) -> Vec<&T> {
        let mut v: Vec<&T> = Vec::new();
        v.extend(self.input.refs());
        v.extend(self.static_proj.refs());
        v.extend(self.future_proj.refs());
        for b in self.past_blocks.iter().chain(&self.future_blocks) {
            v.extend(b.refs());
        }
        v.extend([&self.final_gain, &self.final_bias]);
        v.extend(self.head.refs());
        v
    }

    pub fn entries_mut(&mut self) -> Vec<&mut T> {
        let mut v: Vec<&mut T> = Vec::new();
        v.extend(self.input.refs_mut());
        v.extend(self.static_proj.refs_mut());
        v.extend(self.future_proj.refs_mut());
        for b in self
            .past_blocks
            .iter_mut()
            .chain(self.future_blocks.iter_mut())
        {
            v.extend(b.refs_mut());
        }
        v.extend([&mut self.final_gain, &mut self.final_bias]);
        v.extend(self.head.refs_mut());
        v
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.map(|n, _| names.push(n.to_string()));
        names
    }
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases, unit norm gains. The head starts
    /// small so an untrained model is close to persistence.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_dim;
        let mut linear = |i: usize, o: usize, gain: f64| {
            let a = gain * (6.0 / (i + o) as f64).sqrt();
            let w = (0..i * o).map(|_| rng.random_range(-a..a)).collect();
            Linear {
                weight: Tensor::new(vec![i, o], w).expect("shape"),
                bias: Tensor::zeros(&[o]),
            }
        };
        let block = |linear: &mut dyn FnMut(usize, usize, f64) -> Linear<Tensor>| Block {
            ln1_gain: Tensor::ones(&[h]),
            ln1_bias: Tensor::zeros(&[h]),
            query: linear(h, h, 1.0),
            key: linear(h, h, 1.0),
            value: linear(h, h, 1.0),
            output: linear(h, h, 1.0),
            ln2_gain: Tensor::ones(&[h]),
            ln2_bias: Tensor::zeros(&[h]),
            ffn_in: linear(h, config.ffn_dim, 1.0),
            ffn_out: linear(config.ffn_dim, h, 1.0),
        };
        let input = linear(N_PAST_FEATURES, h, 1.0);
        let static_proj = linear(N_STATIC, h, 1.0);
        let future_proj = linear(config.future_dim(), h, 1.0);
        let past_blocks = (0..config.n_layers_past)
            .map(|_| block(&mut linear))
            .collect();
        let future_blocks = (0..config.n_layers_future)
            .map(|_| block(&mut linear))
            .collect();
        let head = linear(h, 1, 0.1);
        Ok(Params {
            input,
            static_proj,
            future_proj,
            past_blocks,
            future_blocks,
            final_gain: Tensor::ones(&[h]),
            final_bias: Tensor::zeros(&[h]),
            head,
        })
    }

    pub fn count(&self) -> usize {
        self.entries().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|t| t.is_finite())
    }

    /// Checks every tensor shape against `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let reference = Self::init(config, 0)?;
        let expected = reference.map(|n, t| (n.to_string(), t.shape().to_vec()));
        let actual = self.map(|n, t| (n.to_string(), t.shape().to_vec()));
        let (e, a) = (expected.entries(), actual.entries());
        if e.len() != a.len() {
            return Err(Error::config(format!(
                "parameter layout has {} tensors, config expects {}",
                a.len(),
                e.len()
            )));
        }
        for (x, y) in e.iter().zip(&a) {
            if x != y {
                return Err(Error::config(format!(
                    "parameter {} has shape {:?}, config expects {:?}",
                    y.0, y.1, x.1
                )));
            }
        }
        Ok(())
    }
}

// ---- rotary position embedding ----------------------------------------

/// Angle of pair `i` at `pos`: `pos · base^(−2i/head_dim)`.
fn rope_angle(pos: f64, i: usize, head_dim: usize, base: f64) -> f64 {
    pos * base.powf(-2.0 * i as f64 / head_dim as f64)
}

/// Rotates each consecutive pair `(x[2i], x[2i+1])` of `x: [seq, heads, head_dim]`
/// by its position-dependent angle.
pub fn rope_rotate(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::contract(format!(
            "rope_rotate expects [seq, heads, head_dim], got {shape:?}"
        )));
    }
    let (seq, heads, hd) = (shape[0], shape[1], shape[2]);
    if hd % 2 != 0 {
        return Err(Error::config(format!(
            "RoPE needs an even head dimension, got {hd}"
        )));
    }
    if positions.len() != seq {
        return Err(Error::contract(format!(
            "{} positions for a sequence of {seq}",
            positions.len()
        )));
    }
    let mut out = x.data().to_vec();
    for (s, &pos) in positions.iter().enumerate() {
        for h in 0..heads {
            let base_idx = (s * heads + h) * hd;
            for i in 0..hd / 2 {
                let (sin, cos) = rope_angle(pos as f64, i, hd, base).sin_cos();
                let a = out[base_idx + 2 * i];
                let b = out[base_idx + 2 * i + 1];
                out[base_idx + 2 * i] = a * cos - b * sin;
                out[base_idx + 2 * i + 1] = a * sin + b * cos;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Constant tables that express RoPE with tape ops:
/// `rot(x) = x ⊙ cos + (x · P) ⊙ sin` where `P` maps each pair `(a, b)` to `(−b, a)`.
struct RopeTables {
    cos: Tensor,
    sin: Tensor,
    pair_swap: Tensor,
}

impl RopeTables {
    fn new(seq: usize, head_dim: usize, base: f64) -> Self {
        let mut cos = vec![0.0; seq * head_dim];
        let mut sin = vec![0.0; seq * head_dim];
        for s in 0..seq {
            for i in 0..head_dim / 2 {
                let (sn, cs) = rope_angle(s as f64, i, head_dim, base).sin_cos();
                for j in [2 * i, 2 * i + 1] {
                    cos[s * head_dim + j] = cs;
                    sin[s * head_dim + j] = sn;
                }
            }
        }
        let mut p = vec![0.0; head_dim * head_dim];
        for i in 0..head_dim / 2 {
            p[(2 * i + 1) * head_dim + 2 * i] = -1.0;
            p[(2 * i) * head_dim + 2 * i + 1] = 1.0;
        }
        Self {
            cos: Tensor::new(vec![seq, head_dim], cos).expect("shape"),
            sin: Tensor::new(vec![seq, head_dim], sin).expect("shape"),
            pair_swap: Tensor::new(vec![head_dim, head_dim], p).expect("shape"),
        }
    }

    /// `x: [batch·heads, seq, head_dim]`
    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let cos = g.constant(self.cos.clone());
        let sin = g.constant(self.sin.clone());
        let p = g.constant(self.pair_swap.clone());
        let a = g.mul(x, cos)?;
        let swapped = g.matmul(x, p)?;
        let b = g.mul(swapped, sin)?;
        g.add(a, b)
    }
}

/// Single-head RoPE attention logits `rot(q) · rot(k)ᵀ` for
/// `q, k: [seq, head_dim]`, unscaled and unmasked.
pub fn rope_attention_scores(
    q: &Tensor,
    k: &Tensor,
    positions: &[usize],
    base: f64,
) -> Result<Tensor> {
    let (seq, hd) = match q.shape() {
        [s, d] => (*s, *d),
        other => {
            return Err(Error::contract(format!(
                "expected [seq, head_dim], got {other:?}"
            )))
        }
    };
    if k.shape() != q.shape() {
        return Err(Error::Dimension {
            op: "rope_attention_scores",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let qr = rope_rotate(&q.reshaped(vec![seq, 1, hd])?, positions, base)?;
    let kr = rope_rotate(&k.reshaped(vec![seq, 1, hd])?, positions, base)?;
    let mut scores = vec![0.0; seq * seq];
    for i in 0..seq {
        for j in 0..seq {
            scores[i * seq + j] = (0..hd)
                .map(|d| qr.data()[i * hd + d] * kr.data()[j * hd + d])
                .sum();
        }
    }
    Tensor::new(vec![seq, seq], scores)
}

// ---- network ------------------------------------------------------------

fn linear(g: &mut Graph, x: Var, p: &Linear<Var>) -> Result<Var> {
    let y = g.matmul(x, p.weight)?;
    g.add(y, p.bias)
}

fn causal_mask(seq: usize) -> Tensor {
    let mut m = vec![0.0; seq * seq];
    for i in 0..seq {
        for j in i + 1..seq {
            m[i * seq + j] = MASKED;
        }
    }
    Tensor::new(vec![seq, seq], m).expect("shape")
}

fn dropout(g: &mut Graph, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = g.shape(x).to_vec();
    let n = g.value(x).numel();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

/// Pre-norm residual block over `h: [batch·seq, hidden]`:
/// `h + MHA(LN(h))`, then `+ FFN(LN(·))`.
#[allow(clippy::too_many_arguments)]
fn attention_block(
    g: &mut Graph,
    p: &Block<Var>,
    h: Var,
    batch: usize,
    seq: usize,
    config: &ModelConfig,
    causal: bool,
    layer: usize,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let hidden = config.hidden_dim;
    let heads = config.n_heads;
    let hd = config.head_dim();
    let rope = RopeTables::new(seq, hd, config.rope_base);

    let x = g.layer_norm(h, p.ln1_gain, p.ln1_bias, LAYER_NORM_EPS)?;
    let split_heads = |g: &mut Graph, lin: &Linear<Var>| -> Result<Var> {
        let y = linear(g, x, lin)?;
        let y = g.reshape(y, &[batch, seq, heads, hd])?;
        let y = g.transpose(y, 1, 2)?;
        g.reshape(y, &[batch * heads, seq, hd])
    };
    let q = split_heads(g, &p.query)?;
    let k = split_heads(g, &p.key)?;
    let v = split_heads(g, &p.value)?;
    let q = rope.apply(g, q)?;
    let k = rope.apply(g, k)?;

    let kt = g.transpose(k, 1, 2)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
    if causal {
        let mask = g.constant(causal_mask(seq));
        scores = g.add(scores, mask)?;
    }
    let attn = g.softmax(scores, 2)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.reshape(ctx, &[batch, heads, seq, hd])?;
    let ctx = g.transpose(ctx, 1, 2)?;
    let ctx = g.reshape(ctx, &[batch * seq, hidden])?;
    let out = linear(g, ctx, &p.output)?;
    let out = dropout(g, out, config.dropout, rng.as_deref_mut())?;
    let h = g.add(h, out)?;

    let x = g.layer_norm(h, p.ln2_gain, p.ln2_bias, LAYER_NORM_EPS)?;
    let f = linear(g, x, &p.ffn_in)?;
    let f = g.gelu(f);
    let f = linear(g, f, &p.ffn_out)?;
    let f = dropout(g, f, config.dropout, rng)?;
    let h = g.add(h, f)?;

    if !g.value(h).is_finite() {
        return Err(Error::NumericFault(format!(
            "non-finite activation after attention layer {layer}"
        )));
    }
    Ok(h)
}

/// Nearest `d'` to `delta` for which `t + d'` is exact, so the residual
/// and the absolute prediction agree bit for bit.
pub fn euler_representable(t: f64, delta: f64) -> f64 {
    let mut d = delta;
    for _ in 0..4 {
        let next = (t + d) - t;
        if next.to_bits() == d.to_bits() {
            break;
        }
        d = next;
    }
    d
}

fn last_token(g: &mut Graph, h: Var, batch: usize, seq: usize, hidden: usize) -> Result<Var> {
    let h = g.reshape(h, &[batch, seq, hidden])?;
    let h = g.slice(h, 1, seq - 1, seq)?;
    g.reshape(h, &[batch, hidden])
}

/// Weights registered on a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    pub params: Params<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhysicsTransformer {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl PhysicsTransformer {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Registers the weights on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            params: self.params.map(|_, t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            }),
        }
    }

    fn check_sample(&self, s: &WindowSample) -> Result<()> {
        let n = self.config.context_length;
        if s.past.len() != n * N_PAST_FEATURES || s.future.len() != self.config.future_dim() {
            return Err(Error::config(format!(
                "sample has {} past values and {} future covariates; model expects {}x{} and {}",
                s.past.len(),
                s.future.len(),
                n,
                N_PAST_FEATURES,
                self.config.future_dim()
            )));
        }
        Ok(())
    }

    fn batch_inputs(&self, g: &mut Graph, batch: &[&WindowSample]) -> Result<(Var, Var, Var)> {
        for s in batch {
            self.check_sample(s)?;
        }
        let b = batch.len();
        let n = self.config.context_length;
        let past: Vec<f64> = batch.iter().flat_map(|s| s.past.iter().copied()).collect();
        let stat: Vec<f64> = batch.iter().flat_map(|s| s.static_features).collect();
        let fut: Vec<f64> = batch
            .iter()
            .flat_map(|s| s.future.iter().copied())
            .collect();
        let past = g.constant(Tensor::new(vec![b * n, N_PAST_FEATURES], past)?);
        let stat = g.constant(Tensor::new(vec![b, N_STATIC], stat)?);
        let fut = g.constant(Tensor::new(vec![b, self.config.future_dim()], fut)?);
        Ok((past, stat, fut))
    }

    /// Past stack only: the temporal state at the last observed hour,
    /// `[batch, hidden]`, before static fusion.
    pub fn encode_past(
        &self,
        g: &mut Graph,
        bound: &Bound,
        past: Var,
        batch: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let c = &self.config;
        let n = c.context_length;
        let mut h = linear(g, past, &bound.params.input)?;
        for (l, block) in bound.params.past_blocks.iter().enumerate() {
            h = attention_block(g, block, h, batch, n, c, true, l, rng.as_deref_mut())?;
        }
        last_token(g, h, batch, n, c.hidden_dim)
    }

    /// Predicted temperature change for each sample, `[batch, 1]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        batch: &[&WindowSample],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::contract("forward on an empty batch"));
        }
        let c = &self.config;
        let b = batch.len();
        let hidden = c.hidden_dim;
        let (past, stat, fut) = self.batch_inputs(g, batch)?;

        let temporal = self.encode_past(g, bound, past, b, rng.as_deref_mut())?;
        let hs = linear(g, stat, &bound.params.static_proj)?;
        let fused = g.add(temporal, hs)?;
        let hk = linear(g, fut, &bound.params.future_proj)?;

        let fused = g.reshape(fused, &[b, 1, hidden])?;
        let hk = g.reshape(hk, &[b, 1, hidden])?;
        let seq = g.concat(&[fused, hk], 1)?;
        let mut h = g.reshape(seq, &[b * 2, hidden])?;
        let offset = bound.params.past_blocks.len();
        for (l, block) in bound.params.future_blocks.iter().enumerate() {
            h = attention_block(g, block, h, b, 2, c, true, offset + l, rng.as_deref_mut())?;
        }
        let last = last_token(g, h, b, 2, hidden)?;
        let last = g.layer_norm(
            last,
            bound.params.final_gain,
            bound.params.final_bias,
            LAYER_NORM_EPS,
        )?;
        linear(g, last, &bound.params.head)
    }

    /// Predicted one-hour temperature change, °C, on the grid of `t_prev` so
    /// that the Euler step is exact: `(t_prev + d) - t_prev == d`.
    pub fn forward(&self, sample: &WindowSample) -> Result<f64> {
        Ok(self.forward_batch(std::slice::from_ref(sample))?[0])
    }

    pub fn forward_batch(&self, samples: &[WindowSample]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let refs: Vec<&WindowSample> = samples.iter().collect();
        let out = self.forward_graph(&mut g, &bound, &refs, None)?;
        Ok(g.value(out)
            .data()
            .iter()
            .zip(samples)
            .map(|(&d, s)| euler_representable(s.t_prev, d))
            .collect())
    }

    /// [`Self::forward_batch`] over `samples` in parallel chunks.
    pub fn predict_deltas(&self, samples: &[WindowSample]) -> Result<Vec<f64>> {
        const CHUNK: usize = 128;
        let parts: Vec<Vec<f64>> = samples
            .par_chunks(CHUNK)
            .map(|c| self.forward_batch(c))
            .collect::<Result<_>>()?;
        Ok(parts.concat())
    }

    /// Explicit Euler step: `t_prev + forward(sample)`.
    pub fn predict_temperature(&self, sample: &WindowSample) -> Result<f64> {
        Ok(sample.t_prev + self.forward(sample)?)
    }

    /// Multi-step rollout that feeds its own indoor-temperature predictions
    /// back into later windows; all other channels stay observed.
    ///
    /// `samples` must be consecutive windows of one record, standardized
    /// with `std`.
    pub fn rollout(
        &self,
        samples: &[WindowSample],
        std: &Standardizer,
        horizon: usize,
    ) -> Result<Vec<f64>> {
        if horizon == 0 {
            return Err(Error::contract("rollout horizon must be >= 1"));
        }
        if samples.len() < horizon {
            return Err(Error::contract(format!(
                "rollout of {horizon} steps needs as many windows, got {}",
                samples.len()
            )));
        }
        for w in samples[..horizon].windows(2) {
            if w[1].target_index != w[0].target_index + 1 {
                return Err(Error::contract(format!(
                    "non-consecutive windows: target {} followed by {}",
                    w[0].target_index, w[1].target_index
                )));
            }
        }
        let n = self.config.context_length;
        let t0 = samples[0].target_index;
        let mut preds: Vec<f64> = Vec::with_capacity(horizon);
        for (step, sample) in samples[..horizon].iter().enumerate() {
            let mut s = sample.clone();
            if step > 0 {
                let t = s.target_index;
                let mut raw: Vec<f64> = (0..n)
                    .map(|r| std.invert(0, s.past[r * N_PAST_FEATURES]))
                    .collect();
                for (r, v) in raw.iter_mut().enumerate() {
                    let idx = t - n + r;
                    if idx >= t0 {
                        *v = preds[idx - t0];
                    }
                }
                let deriv = window_derivative(&raw)?;
                for r in 0..n {
                    s.past[r * N_PAST_FEATURES] = std.apply(0, raw[r]);
                    s.past[r * N_PAST_FEATURES + N_RAW] = std.apply(N_RAW, deriv[r]);
                }
                s.t_prev = preds[step - 1];
            }
            preds.push(self.predict_temperature(&s)?);
        }
        Ok(preds)
    }
}
