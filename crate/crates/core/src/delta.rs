//! The learnable sparse update: sorted coordinate lists with values and
//! per-entry optimizer moments, one record per prunable matrix.

use indexmap::IndexMap;

use crate::autodiff::{Real, Tape, Tensor};
use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::model::{forward, Architecture, Binding, Input, ParamTree};
use crate::optim::{Moments, Optimizer};
use crate::pruner::{Mask, MaskSet};

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaTensor<T> {
    shape: Vec<usize>,
    budget: usize,
    indices: Vec<u32>,
    values: Vec<T>,
    state: Moments<T>,
}

impl<T: Real> DeltaTensor<T> {
    pub fn new(shape: Vec<usize>, budget: usize) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if budget > numel {
            return Err(Error::invalid(format!(
                "delta budget {budget} exceeds {numel} coordinates"
            )));
        }
        if numel > u32::MAX as usize {
            return Err(Error::invalid("tensor too large for 32-bit delta indices"));
        }
        Ok(Self {
            shape,
            budget,
            indices: Vec::new(),
            values: Vec::new(),
            state: Moments::default(),
        })
    }

    /// Entries must be strictly increasing and in range. Optimizer moments
    /// start at zero.
    pub fn from_entries(shape: Vec<usize>, budget: usize, indices: Vec<u32>, values: Vec<T>) -> Result<Self> {
        let mut d = Self::new(shape, budget.max(indices.len()))?;
        if indices.len() != values.len() {
            return Err(Error::shape("delta entries", &[indices.len()], &[values.len()]));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invariant("delta indices are not strictly increasing".into()));
        }
        if let Some(&bad) = indices.last().filter(|&&i| i as usize >= d.numel()) {
            return Err(Error::invalid(format!("delta index {bad} out of range {}", d.numel())));
        }
        d.state = Moments::zeros(indices.len());
        d.indices = indices;
        d.values = values;
        Ok(d)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn moments(&self) -> &Moments<T> {
        &self.state
    }

    pub fn position(&self, index: u32) -> Option<usize> {
        self.indices.binary_search(&index).ok()
    }

    pub fn contains(&self, index: u32) -> bool {
        self.position(index).is_some()
    }

    pub fn value_at(&self, index: u32) -> T {
        self.position(index).map_or(T::zero(), |p| self.values[p])
    }

    /// Adds zero-valued entries with zero moments.
    pub fn insert_entries(&mut self, new: &[u32]) -> Result<()> {
        let mut new = new.to_vec();
        new.sort_unstable();
        if new.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate index in delta insert"));
        }
        if let Some(&bad) = new.last().filter(|&&i| i as usize >= self.numel()) {
            return Err(Error::invalid(format!("delta index {bad} out of range {}", self.numel())));
        }
        if let Some(&dup) = new.iter().find(|&&i| self.contains(i)) {
            return Err(Error::invalid(format!("delta index {dup} already present")));
        }
        let total = self.len() + new.len();
        let mut indices = Vec::with_capacity(total);
        let mut values = Vec::with_capacity(total);
        let mut state = Moments {
            m: Vec::with_capacity(total),
            v: Vec::with_capacity(total),
        };
        let (mut a, mut b) = (0, 0);
        while a < self.len() || b < new.len() {
            if b == new.len() || (a < self.len() && self.indices[a] < new[b]) {
                indices.push(self.indices[a]);
                values.push(self.values[a]);
                state.m.push(self.state.m[a]);
                state.v.push(self.state.v[a]);
                a += 1;
            } else {
                indices.push(new[b]);
                values.push(T::zero());
                state.m.push(T::zero());
                state.v.push(T::zero());
                b += 1;
            }
        }
        self.indices = indices;
        self.values = values;
        self.state = state;
        Ok(())
    }

    /// Discards the entries at `drop`, which must all be present.
    pub fn remove_entries(&mut self, drop: &[u32]) -> Result<()> {
        let mut drop = drop.to_vec();
        drop.sort_unstable();
        drop.dedup();
        if let Some(&missing) = drop.iter().find(|&&i| !self.contains(i)) {
            return Err(Error::invalid(format!("delta index {missing} not present")));
        }
        let mut keep = Vec::with_capacity(self.len());
        let mut d = 0;
        for (p, &i) in self.indices.iter().enumerate() {
            if d < drop.len() && drop[d] == i {
                d += 1;
            } else {
                keep.push(p);
            }
        }
        self.indices = keep.iter().map(|&p| self.indices[p]).collect();
        self.values = keep.iter().map(|&p| self.values[p]).collect();
        self.state = Moments {
            m: keep.iter().map(|&p| self.state.m[p]).collect(),
            v: keep.iter().map(|&p| self.state.v[p]).collect(),
        };
        Ok(())
    }

    /// Values of `dense` at the delta's coordinates.
    pub fn gather(&self, dense: &[T]) -> Result<Vec<T>> {
        if dense.len() != self.numel() {
            return Err(Error::shape("gather", &self.shape, &[dense.len()]));
        }
        Ok(self.indices.iter().map(|&i| dense[i as usize]).collect())
    }

    /// `w[i] += phi` for every entry.
    pub fn add_into(&self, w: &mut [T]) -> Result<()> {
        if w.len() != self.numel() {
            return Err(Error::shape("delta add", &self.shape, &[w.len()]));
        }
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            w[i as usize] += v;
        }
        Ok(())
    }

    fn apply_update(&mut self, grads: &[T], opt: &Optimizer, step: u64) -> Result<()> {
        opt.update(&mut self.values, grads, &mut self.state.m, &mut self.state.v, step)
    }

    pub fn cast<U: Real>(&self) -> DeltaTensor<U> {
        let conv = |xs: &[T]| xs.iter().map(|&x| U::from_f64_lossy(x.as_f64())).collect();
        DeltaTensor {
            shape: self.shape.clone(),
            budget: self.budget,
            indices: self.indices.clone(),
            values: conv(&self.values),
            state: Moments {
                m: conv(&self.state.m),
                v: conv(&self.state.v),
            },
        }
    }
}

/// The full update across tensors plus the shared optimizer step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDelta<T> {
    tensors: IndexMap<String, DeltaTensor<T>>,
    step: u64,
}

impl<T: Real> Default for SparseDelta<T> {
    fn default() -> Self {
        Self {
            tensors: IndexMap::new(),
            step: 0,
        }
    }
}

impl<T: Real> SparseDelta<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Empty records for every tensor named in `budgets`.
    pub fn with_budgets(tree: &ParamTree<T>, budgets: &IndexMap<String, usize>) -> Result<Self> {
        let mut d = Self::new();
        for (name, &b) in budgets {
            let shape = tree.tensor(name)?.shape().to_vec();
            d.insert(name.clone(), DeltaTensor::new(shape, b)?)?;
        }
        Ok(d)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: DeltaTensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate delta tensor `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DeltaTensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DeltaTensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DeltaTensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DeltaTensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// d_φ: the summed per-tensor budgets.
    pub fn total_budget(&self) -> usize {
        self.tensors.values().map(|t| t.budget).sum()
    }

    /// Current number of entries across tensors.
    pub fn total_entries(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step. `grads` holds, per tensor, the loss gradient at
    /// each delta coordinate (aligned with the index list).
    pub fn optimizer_step(&mut self, grads: &IndexMap<String, Vec<T>>, opt: &Optimizer) -> Result<()> {
        for (name, t) in &self.tensors {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::invalid(format!("no delta gradient for `{name}`")))?;
            if g.len() != t.len() {
                return Err(Error::shape("delta step", &[t.len()], &[g.len()]));
            }
        }
        self.step += 1;
        let step = self.step;
        for (name, t) in self.tensors.iter_mut() {
            t.apply_update(&grads[name], opt, step)?;
        }
        Ok(())
    }

    /// Support gradients gathered from dense merged-weight gradients.
    pub fn gather_grads<'a>(
        &self,
        dense: impl IntoIterator<Item = (&'a str, &'a [T])>,
    ) -> Result<IndexMap<String, Vec<T>>> {
        let mut out = IndexMap::new();
        for (name, g) in dense {
            if let Some(t) = self.tensors.get(name) {
                out.insert(name.to_string(), t.gather(g)?);
            }
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> SparseDelta<U> {
        SparseDelta {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            step: self.step,
        }
    }
}

/// Per-tensor delta budgets matching a rank-`rank` LoRA on every prunable
/// matrix: `rank * (rows + cols)`.
pub fn allocate_budget<T: Real>(tree: &ParamTree<T>, rank: usize) -> Result<IndexMap<String, usize>> {
    if rank == 0 {
        return Err(Error::Config("rank must be at least 1".into()));
    }
    let mut out = IndexMap::new();
    for (name, w) in tree.named_prunable() {
        let (rows, cols) = w.dims2()?;
        let b = rank * (rows + cols);
        if b > rows * cols {
            return Err(Error::Config(format!(
                "rank {rank} budget {b} exceeds the {} coordinates of `{name}`",
                rows * cols
            )));
        }
        out.insert(name.to_string(), b);
    }
    Ok(out)
}

/// `theta * mask + delta`
pub fn effective_weights<T: Real>(theta: &Tensor<T>, mask: &Mask, delta: Option<&DeltaTensor<T>>) -> Result<Tensor<T>> {
    if mask.numel() != theta.numel() {
        return Err(Error::shape("effective_weights", theta.shape(), &[mask.rows, mask.cols]));
    }
    let mut data: Vec<T> = theta
        .data()
        .iter()
        .zip(mask.bits())
        .map(|(&w, &on)| if on { w } else { T::zero() })
        .collect();
    if let Some(d) = delta {
        d.add_into(&mut data)?;
    }
    Tensor::new(theta.shape().to_vec(), data)
}

/// The tree the model actually evaluates: every masked tensor replaced by
/// its effective weights, everything else copied.
pub fn merged_params<T: Real>(theta: &ParamTree<T>, masks: &MaskSet, delta: &SparseDelta<T>) -> Result<ParamTree<T>> {
    let mut out = theta.clone();
    for (name, p) in out.iter_mut() {
        if let Some(mask) = masks.get(name) {
            p.tensor = effective_weights(&p.tensor, mask, delta.get(name))?;
        } else if delta.get(name).is_some() {
            return Err(Error::invalid(format!("delta on unmasked tensor `{name}`")));
        }
    }
    Ok(out)
}

/// Loss and gradients with respect to the delta values, routed through a
/// sparse scatter-add onto the masked base weights.
pub fn delta_loss_and_grads<T: Real>(
    arch: &Architecture,
    masked_base: &ParamTree<T>,
    delta: &SparseDelta<T>,
    batch: &TokenBatch,
) -> Result<(f64, IndexMap<String, Vec<T>>)> {
    let mut tape = Tape::new();
    let mut binding = Binding::bind(&mut tape, masked_base, |_, _| false);
    let mut value_vars = Vec::new();
    for (name, d) in delta.iter() {
        let base = binding.var(name)?;
        let vals = tape.leaf(Tensor::new(vec![d.len()], d.values().to_vec())?.with_requires_grad(true));
        let w = tape.add_sparse(base, vals, d.indices())?;
        binding.rebind(name, w)?;
        value_vars.push((name.to_string(), vals));
    }
    let logits = forward(arch, &mut tape, &mut binding, Input::Tokens(batch))?;
    let loss = tape.cross_entropy(logits, &batch.targets)?;
    let value = tape.value(loss).data()[0].as_f64();
    let mut g = tape.backward(loss)?;
    let grads = value_vars
        .into_iter()
        .map(|(name, v)| {
            let n = tape.value(v).numel();
            (name, g.take(v).unwrap_or_else(|| vec![T::zero(); n]))
        })
        .collect();
    Ok((value, grads))
}
