//! Periodic drop/grow of delta coordinates: drop the smallest-magnitude
//! entries, grow where the accumulated gradient is largest.

use std::f64::consts::PI;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::delta::{DeltaTensor, SparseDelta};
use crate::error::{Error, Result};
use crate::model::ParamTree;
use crate::pruner::{Mask, MaskSet};
use crate::topk::{bottom_k, top_k};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionSchedule {
    /// Fraction of the delta budget swapped at step 0.
    pub drop_rate: f64,
    /// Total optimizer steps; the cosine decay reaches zero here.
    pub total_steps: usize,
    /// Optimizer steps between topology updates.
    pub frequency: usize,
    /// Restrict growth to coordinates whose mask bit is set.
    pub structured: bool,
    pub cosine: bool,
    pub drop_scope: DropScope,
}

/// Which delta entries the drop step may remove.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropScope {
    /// Every entry.
    All,
    /// Only entries on mask-active coordinates. An entry at a masked
    /// coordinate is the sole carrier of that coordinate, so dropping it
    /// would shrink the merged support below the keep budget; such entries
    /// leave through adaptation instead.
    #[default]
    MaskActive,
}

impl Default for EvolutionSchedule {
    fn default() -> Self {
        Self {
            drop_rate: 0.2,
            total_steps: 1000,
            frequency: 10,
            structured: false,
            cosine: true,
            drop_scope: DropScope::MaskActive,
        }
    }
}

impl EvolutionSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.drop_rate > 0.0 && self.drop_rate < 1.0) {
            return Err(Error::Config(format!("drop rate {} must lie in (0, 1)", self.drop_rate)));
        }
        if self.frequency == 0 {
            return Err(Error::Config("update frequency must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of entries swapped at step `t` for a budget of `budget`.
    pub fn tau(&self, t: usize, budget: usize) -> usize {
        let frac = if !self.cosine {
            self.drop_rate
        } else {
            let progress = if self.total_steps == 0 {
                0.0
            } else {
                (t.min(self.total_steps) as f64) / self.total_steps as f64
            };
            0.5 * self.drop_rate * (1.0 + (PI * progress).cos())
        };
        ((frac * budget as f64).round() as usize).min(budget)
    }

    pub fn is_update_step(&self, t: usize) -> bool {
        t > 0 && t % self.frequency == 0
    }
}

/// Splits `total` across slots proportionally to `weights` by largest
/// remainder. Remainder ties go to the earlier slot.
pub fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let total = total.min(sum);
    let mut shares: Vec<usize> = weights.iter().map(|&w| total * w / sum).collect();
    let mut left = total - shares.iter().sum::<usize>();
    let mut order: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| ((total * w) % sum, i))
        .collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(rem, i) in &order {
        if left == 0 || rem == 0 {
            break;
        }
        shares[i] += 1;
        left -= 1;
    }
    shares
}

/// Signed running sum of dense weight gradients since the last reset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradAccumulator {
    sums: IndexMap<String, Vec<f64>>,
    steps: usize,
}

impl GradAccumulator {
    pub fn new(shapes: impl IntoIterator<Item = (String, usize)>) -> Self {
        Self {
            sums: shapes.into_iter().map(|(k, n)| (k, vec![0.0; n])).collect(),
            steps: 0,
        }
    }

    /// Zeroed sums for every prunable tensor of `tree`.
    pub fn for_prunable<T: Real>(tree: &ParamTree<T>) -> Self {
        Self::new(tree.named_prunable().into_iter().map(|(n, t)| (n.to_string(), t.numel())))
    }

    pub fn accumulate<T: Real>(&mut self, name: &str, grad: &[T]) -> Result<()> {
        let acc = self
            .sums
            .get_mut(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        if acc.len() != grad.len() {
            return Err(Error::shape("accumulate", &[acc.len()], &[grad.len()]));
        }
        for (a, g) in acc.iter_mut().zip(grad) {
            *a += g.as_f64();
        }
        Ok(())
    }

    /// Marks the end of one optimizer step's worth of accumulation.
    pub fn tick(&mut self) {
        self.steps += 1;
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.sums.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sums.keys().map(String::as_str)
    }

    pub fn reset(&mut self) {
        for v in self.sums.values_mut() {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        self.steps = 0;
    }
}

/// The `tau` entries of smallest `|phi|`, as coordinates.
pub fn select_drop<T: Real>(delta: &DeltaTensor<T>, tau: usize) -> Vec<u32> {
    select_drop_where(delta, tau, |_| true)
}

/// [`select_drop`] restricted to coordinates accepted by `eligible`.
pub fn select_drop_where<T: Real>(delta: &DeltaTensor<T>, tau: usize, eligible: impl Fn(u32) -> bool) -> Vec<u32> {
    let cands = delta
        .indices()
        .iter()
        .zip(delta.values())
        .filter(|(&i, _)| eligible(i))
        .map(|(&i, v)| (v.as_f64().abs(), i))
        .collect();
    bottom_k(cands, tau)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GrowSelection {
    pub indices: Vec<u32>,
    /// How many of the requested coordinates had no eligible candidate.
    pub shortfall: usize,
}

/// The `tau` coordinates of largest `|acc|` outside the delta's current
/// index set; with `restrict`, only coordinates whose mask bit is set.
pub fn select_grow<T: Real>(
    acc: &[f64],
    delta: &DeltaTensor<T>,
    mask: &Mask,
    tau: usize,
    restrict: bool,
) -> Result<GrowSelection> {
    if acc.len() != delta.numel() || mask.numel() != delta.numel() {
        return Err(Error::shape("select_grow", delta.shape(), &[acc.len(), mask.numel()]));
    }
    let active = delta.indices();
    let mut next = 0;
    let mut cands = Vec::new();
    for (i, &a) in acc.iter().enumerate() {
        let i = i as u32;
        while next < active.len() && active[next] < i {
            next += 1;
        }
        if next < active.len() && active[next] == i {
            continue;
        }
        if restrict && !mask.get(i as usize) {
            continue;
        }
        cands.push((a.abs(), i));
    }
    let shortfall = tau.saturating_sub(cands.len());
    Ok(GrowSelection {
        indices: top_k(cands, tau),
        shortfall,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvolutionReport {
    pub step: usize,
    pub tau: usize,
    pub dropped: IndexMap<String, Vec<u32>>,
    pub grown: IndexMap<String, Vec<u32>>,
    /// Grown coordinates whose mask bit was clear.
    pub reactivated: usize,
    pub shortfall: usize,
}

impl EvolutionReport {
    pub fn drops(&self) -> usize {
        self.dropped.values().map(Vec::len).sum()
    }

    pub fn grows(&self) -> usize {
        self.grown.values().map(Vec::len).sum()
    }

    pub fn reactivation_fraction(&self) -> f64 {
        match self.grows() {
            0 => 0.0,
            g => self.reactivated as f64 / g as f64,
        }
    }
}

/// Drop then grow `tau(t)` entries, split across tensors in proportion to
/// their current entry counts. Each tensor grows as many entries as it
/// dropped. Leaves the accumulator untouched.
pub fn evolve_topology<T: Real>(
    delta: &mut SparseDelta<T>,
    acc: &GradAccumulator,
    masks: &MaskSet,
    schedule: &EvolutionSchedule,
    t: usize,
) -> Result<EvolutionReport> {
    let sizes: Vec<usize> = delta.iter().map(|(_, d)| d.len()).collect();
    let tau = schedule.tau(t, delta.total_budget()).min(sizes.iter().sum());
    let shares = apportion(tau, &sizes);
    let mut report = EvolutionReport {
        step: t,
        tau,
        ..EvolutionReport::default()
    };
    for ((name, d), share) in delta.iter_mut().zip(shares) {
        let mask = masks
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no mask for delta tensor `{name}`")))?;
        let g = acc.get(name).ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        let dropped = match schedule.drop_scope {
            DropScope::All => select_drop(d, share),
            DropScope::MaskActive => select_drop_where(d, share, |i| mask.get(i as usize)),
        };
        d.remove_entries(&dropped)?;
        let grow = select_grow(g, d, mask, dropped.len(), schedule.structured)?;
        d.insert_entries(&grow.indices)?;
        report.reactivated += grow.indices.iter().filter(|&&i| !mask.get(i as usize)).count();
        report.shortfall += grow.shortfall;
        report.dropped.insert(name.to_string(), dropped);
        report.grown.insert(name.to_string(), grow.indices);
    }
    Ok(report)
}

/// [`evolve_topology`] followed by an accumulator reset.
pub fn evolve<T: Real>(
    delta: &mut SparseDelta<T>,
    acc: &mut GradAccumulator,
    masks: &MaskSet,
    schedule: &EvolutionSchedule,
    t: usize,
) -> Result<EvolutionReport> {
    let r = evolve_topology(delta, acc, masks, schedule, t)?;
    acc.reset();
    Ok(r)
}
