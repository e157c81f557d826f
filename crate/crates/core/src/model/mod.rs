//! Desk-scale models over a named parameter tree: an MLP classifier and a
//! pre-norm decoder-only transformer with learned positions and an untied,
//! prunable LM head.

mod binding;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use binding::Binding;
pub use params::{Param, ParamTree};

use crate::autodiff::{Gradients, Real, Tape, Tensor, Var};
use crate::data::TokenBatch;
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_mult: usize,
    pub context: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            dim: 64,
            heads: 4,
            blocks: 2,
            ff_mult: 4,
            context: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab == 0 || self.dim == 0 || self.blocks == 0 || self.ff_mult == 0 {
            return bad("vocab, dim, blocks and ff_mult must be positive");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim must be divisible by heads");
        }
        if self.context < 2 {
            return bad("context length must be at least 2");
        }
        Ok(())
    }

    /// Closed-form parameter count of [`build_transformer`].
    pub fn param_count(&self) -> usize {
        let (v, d, f) = (self.vocab, self.dim, self.ff_mult * self.dim);
        let per_block = 4 * (d * d + d) + (f * d + f) + (d * f + d) + 4 * d;
        v * d + self.context * d + self.blocks * per_block + 2 * d + v * d + v
    }

    /// Closed-form count of prunable weights.
    pub fn prunable_count(&self) -> usize {
        let (v, d, f) = (self.vocab, self.dim, self.ff_mult * self.dim);
        self.blocks * (4 * d * d + 2 * f * d) + v * d
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub dims: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Architecture {
    Mlp(MlpConfig),
    Transformer(ModelConfig),
}

/// Model input: dense features for the MLP, token ids for the transformer.
#[derive(Clone, Copy)]
pub enum Input<'a, T> {
    Features(&'a Tensor<T>),
    Tokens(&'a TokenBatch),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub arch: Architecture,
    pub params: ParamTree<T>,
}

fn normal_matrix<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    Tensor::from_fn(&[rows, cols], |_| T::from_f64_lossy(dist.sample(rng)))
}

fn ones<T: Real>(n: usize) -> Tensor<T> {
    Tensor::from_fn(&[n], |_| T::one())
}

pub fn build_transformer<T: Real>(cfg: &ModelConfig) -> Result<Model<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (v, d, f) = (cfg.vocab, cfg.dim, cfg.ff_mult * cfg.dim);
    let mut p = ParamTree::new();
    p.insert("tok_emb", normal_matrix(&mut rng, v, d), false)?;
    p.insert("pos_emb", normal_matrix(&mut rng, cfg.context, d), false)?;
    for b in 0..cfg.blocks {
        let n = |s: &str| format!("block{b}.{s}");
        p.insert(n("ln1.gain"), ones(d), false)?;
        p.insert(n("ln1.bias"), Tensor::zeros(&[d]), false)?;
        for w in ["q", "k", "v", "o"] {
            p.insert(n(&format!("attn.w{w}")), normal_matrix(&mut rng, d, d), true)?;
            p.insert(n(&format!("attn.b{w}")), Tensor::zeros(&[d]), false)?;
        }
        p.insert(n("ln2.gain"), ones(d), false)?;
        p.insert(n("ln2.bias"), Tensor::zeros(&[d]), false)?;
        p.insert(n("ff.w1"), normal_matrix(&mut rng, f, d), true)?;
        p.insert(n("ff.b1"), Tensor::zeros(&[f]), false)?;
        p.insert(n("ff.w2"), normal_matrix(&mut rng, d, f), true)?;
        p.insert(n("ff.b2"), Tensor::zeros(&[d]), false)?;
    }
    p.insert("ln_f.gain", ones(d), false)?;
    p.insert("ln_f.bias", Tensor::zeros(&[d]), false)?;
    p.insert("lm_head.w", normal_matrix(&mut rng, v, d), true)?;
    p.insert("lm_head.b", Tensor::zeros(&[v]), false)?;
    Ok(Model {
        arch: Architecture::Transformer(cfg.clone()),
        params: p,
    })
}

pub fn build_mlp<T: Real>(dims: &[usize], seed: u64) -> Result<Model<T>> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::Config(
            "an MLP needs at least two positive layer dims".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamTree::new();
    for (i, w) in dims.windows(2).enumerate() {
        p.insert(format!("layer{i}.w"), normal_matrix(&mut rng, w[1], w[0]), true)?;
        p.insert(format!("layer{i}.b"), Tensor::zeros(&[w[1]]), false)?;
    }
    Ok(Model {
        arch: Architecture::Mlp(MlpConfig {
            dims: dims.to_vec(),
            seed,
        }),
        params: p,
    })
}

/// Records the forward pass of `arch` on `tape` using the bound weights.
///
/// Transformer output is `[B, T, V]` logits; MLP output is `[B, d_out]`.
pub fn forward<T: Real>(
    arch: &Architecture,
    tape: &mut Tape<T>,
    binding: &mut Binding,
    input: Input<'_, T>,
) -> Result<Var> {
    match (arch, input) {
        (Architecture::Mlp(cfg), Input::Features(x)) => forward_mlp(cfg, tape, binding, x),
        (Architecture::Transformer(cfg), Input::Tokens(batch)) => {
            forward_transformer(cfg, tape, binding, batch)
        }
        _ => Err(Error::invalid("input kind does not match the architecture")),
    }
}

fn forward_mlp<T: Real>(
    cfg: &MlpConfig,
    tape: &mut Tape<T>,
    binding: &mut Binding,
    x: &Tensor<T>,
) -> Result<Var> {
    let (_, cols) = x.dims2()?;
    if cols != cfg.dims[0] {
        return Err(Error::shape("mlp input", x.shape(), &[cfg.dims[0]]));
    }
    let mut h = tape.constant(x.clone());
    let layers = cfg.dims.len() - 1;
    for i in 0..layers {
        h = binding.linear(tape, &format!("layer{i}.w"), Some(&format!("layer{i}.b")), h)?;
        if i + 1 < layers {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

fn forward_transformer<T: Real>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    binding: &mut Binding,
    batch: &TokenBatch,
) -> Result<Var> {
    let (b, t) = (batch.batch, batch.seq);
    if t > cfg.context || t == 0 {
        return Err(Error::shape("transformer input", &[b, t], &[cfg.context]));
    }
    if let Some(&bad) = batch.inputs.iter().find(|&&i| i >= cfg.vocab) {
        return Err(Error::invalid(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab
        )));
    }
    let positions: Vec<usize> = (0..b * t).map(|i| i % t).collect();
    let tok = tape.embedding(binding.var("tok_emb")?, &batch.inputs)?;
    let pos = tape.embedding(binding.var("pos_emb")?, &positions)?;
    let mut x = tape.add(tok, pos)?;
    for blk in 0..cfg.blocks {
        let n = |s: &str| format!("block{blk}.{s}");
        let h = tape.layer_norm(
            x,
            binding.var(&n("ln1.gain"))?,
            binding.var(&n("ln1.bias"))?,
            LN_EPS,
        )?;
        let q = binding.linear(tape, &n("attn.wq"), Some(&n("attn.bq")), h)?;
        let k = binding.linear(tape, &n("attn.wk"), Some(&n("attn.bk")), h)?;
        let v = binding.linear(tape, &n("attn.wv"), Some(&n("attn.bv")), h)?;
        let a = tape.causal_attention(q, k, v, b, t, cfg.heads)?;
        let o = binding.linear(tape, &n("attn.wo"), Some(&n("attn.bo")), a)?;
        x = tape.add(x, o)?;
        let h = tape.layer_norm(
            x,
            binding.var(&n("ln2.gain"))?,
            binding.var(&n("ln2.bias"))?,
            LN_EPS,
        )?;
        let f = binding.linear(tape, &n("ff.w1"), Some(&n("ff.b1")), h)?;
        let f = tape.gelu(f);
        let f = binding.linear(tape, &n("ff.w2"), Some(&n("ff.b2")), f)?;
        x = tape.add(x, f)?;
    }
    let h = tape.layer_norm(
        x,
        binding.var("ln_f.gain")?,
        binding.var("ln_f.bias")?,
        LN_EPS,
    )?;
    let logits = binding.linear(tape, "lm_head.w", Some("lm_head.b"), h)?;
    tape.reshape(logits, vec![b, t, cfg.vocab])
}

/// Scalar loss and the gradients of the selected parameters.
pub struct LossAndGrads<T> {
    pub loss: f64,
    pub grads: Vec<(String, Vec<T>)>,
}

/// Next-token cross-entropy of `weights` on `batch`, with gradients for the
/// parameters selected by `trainable`.
pub fn lm_loss_and_grads<T: Real>(
    arch: &Architecture,
    weights: &ParamTree<T>,
    batch: &TokenBatch,
    trainable: impl Fn(&str, &Param<T>) -> bool,
) -> Result<LossAndGrads<T>> {
    let mut tape = Tape::new();
    let mut binding = Binding::bind(&mut tape, weights, trainable);
    let logits = forward(arch, &mut tape, &mut binding, Input::Tokens(batch))?;
    let loss = tape.cross_entropy(logits, &batch.targets)?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    let mut g = tape.backward(loss)?;
    Ok(LossAndGrads {
        loss: value,
        grads: collect_grads(&binding, &mut g),
    })
}

pub(crate) fn collect_grads<T: Real>(binding: &Binding, g: &mut Gradients<T>) -> Vec<(String, Vec<T>)> {
    binding
        .vars()
        .filter_map(|(name, v)| g.take(v).map(|grad| (name.to_string(), grad)))
        .collect()
}

impl<T: Real> Model<T> {
    pub fn forward_logits(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        logits_with(&self.arch, &self.params, batch)
    }

    pub fn forward_features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut binding = Binding::bind(&mut tape, &self.params, |_, _| false);
        let out = forward(&self.arch, &mut tape, &mut binding, Input::Features(x))?;
        Ok(tape.value(out).clone())
    }

    pub fn named_prunable(&self) -> Vec<(&str, &Tensor<T>)> {
        self.params.named_prunable()
    }

    pub fn transformer_config(&self) -> Result<&ModelConfig> {
        match &self.arch {
            Architecture::Transformer(c) => Ok(c),
            Architecture::Mlp(_) => Err(Error::invalid("expected a transformer")),
        }
    }
}

pub fn logits_with<T: Real>(
    arch: &Architecture,
    weights: &ParamTree<T>,
    batch: &TokenBatch,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut binding = Binding::bind(&mut tape, weights, |_, _| false);
    let out = forward(arch, &mut tape, &mut binding, Input::Tokens(batch))?;
    Ok(tape.value(out).clone())
}
