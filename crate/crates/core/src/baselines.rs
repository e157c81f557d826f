//! Low-rank adapter baselines over the pruned base: plain LoRA and LoRA
//! followed by merge and Wanda re-pruning.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{matmul, matmul_nt, Real, Tape, Tensor};
use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::model::{forward, Architecture, Binding, Input, ParamTree};
use crate::optim::{Moments, Optimizer};
use crate::pruner::{apply_mask, prune, MaskSet, Pattern, PrunerKind};

const A_INIT_STD: f64 = 0.02;

/// `delta_W = scale * B · A` with `A: [rank, in]` and `B: [out, rank]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub scale: f64,
}

impl<T: Real> LoraAdapter<T> {
    pub fn new(a: Tensor<T>, b: Tensor<T>, scale: f64) -> Result<Self> {
        let (r, _) = a.dims2()?;
        let (_, rb) = b.dims2()?;
        if r != rb {
            return Err(Error::shape("lora", a.shape(), b.shape()));
        }
        Ok(Self { a, b, scale })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn num_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// The dense `[out, in]` update.
    pub fn delta_weight(&self) -> Result<Tensor<T>> {
        let (r, inp) = self.a.dims2()?;
        let (out, _) = self.b.dims2()?;
        let s = T::from_f64_lossy(self.scale);
        let data = matmul(self.b.data(), self.a.data(), out, r, inp)
            .into_iter()
            .map(|x| x * s)
            .collect();
        Tensor::new(vec![out, inp], data)
    }

    /// `w + scale * B · A`
    pub fn merge_into(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        let dw = self.delta_weight()?;
        if dw.shape() != w.shape() {
            return Err(Error::shape("lora merge", w.shape(), dw.shape()));
        }
        let data = w.data().iter().zip(dw.data()).map(|(&a, &b)| a + b).collect();
        Tensor::new(w.shape().to_vec(), data)
    }
}

/// `x · Wᵀ + (x · Aᵀ) · Bᵀ · scale` for `x: [n, in]`.
pub fn lora_forward<T: Real>(w: &Tensor<T>, adapter: &LoraAdapter<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (out, inp) = w.dims2()?;
    let (n, xin) = x.dims2()?;
    let (r, ain) = adapter.a.dims2()?;
    let (bout, _) = adapter.b.dims2()?;
    if xin != inp || ain != inp || bout != out {
        return Err(Error::shape("lora_forward", w.shape(), x.shape()));
    }
    let base = matmul_nt(x.data(), w.data(), n, inp, out);
    let xa = matmul_nt(x.data(), adapter.a.data(), n, inp, r);
    let xab = matmul_nt(&xa, adapter.b.data(), n, r, out);
    let s = T::from_f64_lossy(adapter.scale);
    let data = base.into_iter().zip(xab).map(|(y, d)| y + d * s).collect();
    Tensor::new(vec![n, out], data)
}

/// One adapter per prunable matrix, with optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraSet<T> {
    adapters: IndexMap<String, LoraAdapter<T>>,
    state: IndexMap<String, (Moments<T>, Moments<T>)>,
    step: u64,
}

impl<T: Real> LoraSet<T> {
    /// `A ~ N(0, 0.02)`, `B = 0`, scale 1, on every prunable matrix.
    pub fn init(tree: &ParamTree<T>, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, A_INIT_STD).expect("valid std");
        let mut adapters = IndexMap::new();
        let mut state = IndexMap::new();
        for (name, w) in tree.named_prunable() {
            let (out, inp) = w.dims2()?;
            let a = Tensor::from_fn(&[rank, inp], |_| T::from_f64_lossy(dist.sample(&mut rng)));
            let b = Tensor::zeros(&[out, rank]);
            state.insert(name.to_string(), (Moments::zeros(a.numel()), Moments::zeros(b.numel())));
            adapters.insert(name.to_string(), LoraAdapter::new(a, b, 1.0)?);
        }
        Ok(Self {
            adapters,
            state,
            step: 0,
        })
    }

    pub fn from_adapters(adapters: IndexMap<String, LoraAdapter<T>>) -> Self {
        let state = adapters
            .iter()
            .map(|(k, a)| (k.clone(), (Moments::zeros(a.a.numel()), Moments::zeros(a.b.numel()))))
            .collect();
        Self {
            adapters,
            state,
            step: 0,
        }
    }

    pub fn get(&self, name: &str) -> Option<&LoraAdapter<T>> {
        self.adapters.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut LoraAdapter<T>> {
        self.adapters.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &LoraAdapter<T>)> {
        self.adapters.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_count(&self) -> usize {
        self.adapters.values().map(LoraAdapter::num_params).sum()
    }

    /// Base tree with every adapter folded into its matrix.
    pub fn merged(&self, base: &ParamTree<T>) -> Result<ParamTree<T>> {
        let mut out = base.clone();
        for (name, ad) in &self.adapters {
            let p = out.get_mut(name)?;
            p.tensor = ad.merge_into(&p.tensor)?;
        }
        Ok(out)
    }

    /// `grads[name] = (dA, dB)`
    pub fn optimizer_step(&mut self, grads: &IndexMap<String, (Vec<T>, Vec<T>)>, opt: &Optimizer) -> Result<()> {
        self.step += 1;
        for (name, ad) in self.adapters.iter_mut() {
            let (ga, gb) = grads
                .get(name)
                .ok_or_else(|| Error::invalid(format!("no adapter gradient for `{name}`")))?;
            let (sa, sb) = self.state.get_mut(name).expect("state per adapter");
            opt.update(ad.a.data_mut(), ga, &mut sa.m, &mut sa.v, self.step)?;
            opt.update(ad.b.data_mut(), gb, &mut sb.m, &mut sb.v, self.step)?;
        }
        Ok(())
    }
}

/// Loss and adapter gradients with the base weights frozen.
pub fn lora_loss_and_grads<T: Real>(
    arch: &Architecture,
    base: &ParamTree<T>,
    lora: &LoraSet<T>,
    batch: &TokenBatch,
) -> Result<(f64, IndexMap<String, (Vec<T>, Vec<T>)>)> {
    let mut tape = Tape::new();
    let mut binding = Binding::bind(&mut tape, base, |_, _| false);
    let mut vars = Vec::new();
    for (name, ad) in lora.iter() {
        let a = tape.leaf(ad.a.clone().with_requires_grad(true));
        let b = tape.leaf(ad.b.clone().with_requires_grad(true));
        binding.attach_lora(&mut tape, name, a, b, ad.scale)?;
        vars.push((name.to_string(), a, b));
    }
    let logits = forward(arch, &mut tape, &mut binding, Input::Tokens(batch))?;
    let loss = tape.cross_entropy(logits, &batch.targets)?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    let mut g = tape.backward(loss)?;
    let mut out = IndexMap::new();
    for (name, a, b) in vars {
        let (na, nb) = (tape.value(a).numel(), tape.value(b).numel());
        let ga = g.take(a).unwrap_or_else(|| vec![T::zero(); na]);
        let gb = g.take(b).unwrap_or_else(|| vec![T::zero(); nb]);
        out.insert(name, (ga, gb));
    }
    Ok((value, out))
}

/// Folds the adapters into the base and Wanda-prunes the result back to
/// `rho`. Returns the new dense weights (already masked) and masks.
pub fn merge_and_reprune<T: Real>(
    arch: &Architecture,
    base: &ParamTree<T>,
    lora: &LoraSet<T>,
    calibration: &[Input<'_, T>],
    rho: f64,
    pattern: Pattern,
) -> Result<(ParamTree<T>, MaskSet)> {
    let mut merged = lora.merged(base)?;
    let masks = prune(arch, &merged, calibration, PrunerKind::Wanda, rho, pattern)?;
    apply_mask(&mut merged, &masks)?;
    Ok((merged, masks))
}
