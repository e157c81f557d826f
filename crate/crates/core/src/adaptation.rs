//! Pulls the merged model back to the target sparsity after growth, by
//! pruning the least important coordinates of the current support.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::delta::{DeltaTensor, SparseDelta};
use crate::error::{Error, Result};
use crate::evolution::GradAccumulator;
use crate::model::ParamTree;
use crate::pruner::{keep_count, Mask, MaskSet};
use crate::topk::top_k;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    /// `|g * w|`
    #[default]
    Sensitivity,
    /// `|w|`
    Magnitude,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueSource {
    /// The effective weight `theta * mask + delta`.
    #[default]
    Merged,
    /// The dense pretrained weight, regardless of mask or delta.
    Pretrained,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub criterion: Criterion,
    pub source: ValueSource,
    /// Rank coordinates grown in the preceding evolve call ahead of all
    /// others, so a zero-initialized reactivation is not pruned before it
    /// has taken a single optimizer step.
    pub protect_grown: bool,
    /// Refill delta slots freed by pruning at kept, base-active coordinates.
    pub reseat: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            criterion: Criterion::Sensitivity,
            source: ValueSource::Merged,
            protect_grown: true,
            reseat: true,
        }
    }
}

/// Number of coordinates in the union of the mask and the delta indices.
pub fn support_size<T: Real>(mask: &Mask, delta: Option<&DeltaTensor<T>>) -> usize {
    let extra = delta.map_or(0, |d| d.indices().iter().filter(|&&i| !mask.get(i as usize)).count());
    mask.count_ones() + extra
}

pub fn support_sparsity<T: Real>(mask: &Mask, delta: Option<&DeltaTensor<T>>) -> f64 {
    1.0 - support_size(mask, delta) as f64 / mask.numel() as f64
}

/// Importance of every support coordinate, ascending by coordinate.
pub fn compute_sensitivity<T: Real>(
    acc: &[f64],
    theta: &Tensor<T>,
    mask: &Mask,
    delta: &DeltaTensor<T>,
    criterion: Criterion,
    source: ValueSource,
) -> Result<Vec<(f64, u32)>> {
    let n = theta.numel();
    if acc.len() != n || mask.numel() != n || delta.numel() != n {
        return Err(Error::shape("compute_sensitivity", theta.shape(), &[acc.len(), mask.numel(), delta.numel()]));
    }
    let mut out = Vec::with_capacity(mask.count_ones() + delta.len());
    let (idx, vals) = (delta.indices(), delta.values());
    let mut p = 0;
    for i in 0..n {
        let in_delta = p < idx.len() && idx[p] as usize == i;
        if !in_delta && !mask.get(i) {
            continue;
        }
        let w = match source {
            ValueSource::Pretrained => theta.data()[i].as_f64(),
            ValueSource::Merged => {
                let base = if mask.get(i) { theta.data()[i].as_f64() } else { 0.0 };
                base + if in_delta { vals[p].as_f64() } else { 0.0 }
            }
        };
        if in_delta {
            p += 1;
        }
        let s = match criterion {
            Criterion::Sensitivity => (acc[i] * w).abs(),
            Criterion::Magnitude => w.abs(),
        };
        out.push((s, i as u32));
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("support of `{}`", mask.name)));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RebuildOutcome {
    /// Mask bits cleared.
    pub pruned_base: usize,
    /// Delta entries deleted.
    pub pruned_delta: usize,
    pub kept: usize,
}

/// Keeps the `keep` best-scoring support coordinates and prunes the rest:
/// a pruned coordinate loses both its mask bit and any delta entry.
/// Coordinates in `protected` (sorted) outrank all others.
pub fn rebuild_mask<T: Real>(
    scores: &[(f64, u32)],
    keep: usize,
    protected: &[u32],
    mask: &mut Mask,
    delta: &mut DeltaTensor<T>,
) -> Result<RebuildOutcome> {
    if scores.len() <= keep {
        if scores.len() < keep {
            log::warn!(
                "`{}`: support {} already below keep budget {keep}",
                mask.name,
                scores.len()
            );
        }
        return Ok(RebuildOutcome {
            kept: scores.len(),
            ..RebuildOutcome::default()
        });
    }
    let is_protected = |i: u32| protected.binary_search(&i).is_ok();
    let (first, rest): (Vec<_>, Vec<_>) = scores.iter().copied().partition(|&(_, i)| is_protected(i));
    let mut kept = top_k(first, keep);
    let room = keep - kept.len();
    kept.extend(top_k(rest, room));
    kept.sort_unstable();

    let mut out = RebuildOutcome {
        kept: kept.len(),
        ..RebuildOutcome::default()
    };
    let mut drop_delta = Vec::new();
    for &(_, i) in scores {
        if kept.binary_search(&i).is_ok() {
            continue;
        }
        if mask.get(i as usize) {
            mask.set(i as usize, false);
            out.pruned_base += 1;
        }
        if delta.contains(i) {
            drop_delta.push(i);
        }
    }
    out.pruned_delta = drop_delta.len();
    delta.remove_entries(&drop_delta)?;
    Ok(out)
}

/// Fills free delta slots (budget minus entries) at base-active
/// coordinates outside the delta, largest `|acc|` first. Support is
/// unchanged because those coordinates are already active.
pub fn reseat<T: Real>(acc: &[f64], mask: &Mask, delta: &mut DeltaTensor<T>) -> Result<usize> {
    let free = delta.budget().saturating_sub(delta.len());
    if free == 0 {
        return Ok(0);
    }
    let cands = (0..mask.numel() as u32)
        .filter(|&i| mask.get(i as usize) && !delta.contains(i))
        .map(|i| (acc[i as usize].abs(), i))
        .collect();
    let picked = top_k(cands, free);
    delta.insert_entries(&picked)?;
    Ok(picked.len())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdaptationReport {
    pub step: usize,
    pub pruned_base: usize,
    pub pruned_delta: usize,
    pub reseated: usize,
    pub sparsity: IndexMap<String, f64>,
    pub global_sparsity: f64,
}

/// Per-tensor adaptation to sparsity `rho`. `grown` lists the coordinates
/// added by the evolve call that just ran.
#[allow(clippy::too_many_arguments)]
pub fn adaptation_step<T: Real>(
    theta: &ParamTree<T>,
    masks: &mut MaskSet,
    delta: &mut SparseDelta<T>,
    acc: &GradAccumulator,
    rho: f64,
    grown: &IndexMap<String, Vec<u32>>,
    cfg: &AdaptConfig,
    step: usize,
) -> Result<AdaptationReport> {
    let mut report = AdaptationReport {
        step,
        ..AdaptationReport::default()
    };
    for (name, d) in delta.iter_mut() {
        let mask = masks
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("no mask for delta tensor `{name}`")))?;
        let g = acc.get(name).ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        let w = theta.tensor(name)?;
        let scores = compute_sensitivity(g, w, mask, d, cfg.criterion, cfg.source)?;
        let keep = keep_count(rho, w.numel());
        let protected: &[u32] = match (cfg.protect_grown, grown.get(name)) {
            (true, Some(v)) => v,
            _ => &[],
        };
        let r = rebuild_mask(&scores, keep, protected, mask, d)?;
        report.pruned_base += r.pruned_base;
        report.pruned_delta += r.pruned_delta;
        if cfg.reseat {
            report.reseated += reseat(g, mask, d)?;
        }
    }
    let (sp, global) = merged_sparsity(masks, delta);
    report.sparsity = sp;
    report.global_sparsity = global;
    Ok(report)
}

/// Support-based sparsity of every masked tensor, and over all of them.
pub fn merged_sparsity<T: Real>(masks: &MaskSet, delta: &SparseDelta<T>) -> (IndexMap<String, f64>, f64) {
    let mut per = IndexMap::new();
    let (mut live, mut total) = (0usize, 0usize);
    for (name, m) in masks {
        let s = support_size(m, delta.get(name));
        live += s;
        total += m.numel();
        per.insert(name.clone(), 1.0 - s as f64 / m.numel() as f64);
    }
    let global = if total == 0 { 0.0 } else { 1.0 - live as f64 / total as f64 };
    (per, global)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::pruner::Pattern;

    fn mask(bits: &[u8]) -> Mask {
        Mask::new("w", 1, bits.len(), bits.iter().map(|&b| b == 1).collect(), Pattern::Unstructured).unwrap()
    }

    #[test]
    fn sensitivity_example() {
        let theta = Tensor::new(vec![1, 3], vec![2.0f64, -1.0, 0.5]).unwrap();
        let d = DeltaTensor::new(vec![1, 3], 0).unwrap();
        let s = compute_sensitivity(&[0.1, 1.0, -0.2], &theta, &mask(&[1, 1, 1]), &d, Criterion::Sensitivity, ValueSource::Merged).unwrap();
        let got: Vec<f64> = s.iter().map(|x| x.0).collect();
        for (a, b) in got.iter().zip([0.2, 1.0, 0.1]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sensitivity_zero_cases() {
        let theta = Tensor::new(vec![1, 2], vec![0.0f64, 3.0]).unwrap();
        let d = DeltaTensor::new(vec![1, 2], 0).unwrap();
        let s = compute_sensitivity(&[5.0, 0.0], &theta, &mask(&[1, 1]), &d, Criterion::Sensitivity, ValueSource::Merged).unwrap();
        assert_eq!(s, vec![(0.0, 0), (0.0, 1)]);
        assert!(compute_sensitivity(&[1.0, 1.0], &theta, &mask(&[0, 0]), &d, Criterion::Sensitivity, ValueSource::Merged).is_err());
    }

    #[test]
    fn delta_only_coordinates_use_their_value_under_merged_source() {
        let theta = Tensor::new(vec![1, 2], vec![4.0f64, 3.0]).unwrap();
        let d = DeltaTensor::from_entries(vec![1, 2], 1, vec![0], vec![0.5]).unwrap();
        let merged = compute_sensitivity(&[1.0, 1.0], &theta, &mask(&[0, 1]), &d, Criterion::Magnitude, ValueSource::Merged).unwrap();
        assert_eq!(merged, vec![(0.5, 0), (3.0, 1)]);
        let pre = compute_sensitivity(&[1.0, 1.0], &theta, &mask(&[0, 1]), &d, Criterion::Magnitude, ValueSource::Pretrained).unwrap();
        assert_eq!(pre, vec![(4.0, 0), (3.0, 1)]);
    }

    #[test]
    fn keeps_top_four_of_ten() {
        let mut m = Mask::ones("w", 1, 10);
        let mut d = DeltaTensor::<f64>::new(vec![1, 10], 0).unwrap();
        let scores: Vec<(f64, u32)> = [3., 9., 1., 7., 7., 0., 2., 8., 5., 4.].iter().enumerate().map(|(i, &s)| (s, i as u32)).collect();
        let r = rebuild_mask(&scores, keep_count(0.6, 10), &[], &mut m, &mut d).unwrap();
        assert_eq!(r.kept, 4);
        let on: Vec<usize> = (0..10).filter(|&i| m.get(i)).collect();
        assert_eq!(on, vec![1, 3, 4, 7]);
    }

    #[test]
    fn strong_reactivations_displace_weak_base_weights() {
        // base on {0,1,2,3}, delta grew at masked {4,5}
        let mut m = mask(&[1, 1, 1, 1, 0, 0, 0, 0]);
        let mut d = DeltaTensor::from_entries(vec![1, 8], 2, vec![4, 5], vec![1.0f64, -1.0]).unwrap();
        let theta = Tensor::new(vec![1, 8], vec![0.1f64, 2.0, 0.2, 3.0, 9.0, 9.0, 9.0, 9.0]).unwrap();
        let acc = [1.0; 8];
        let s = compute_sensitivity(&acc, &theta, &m, &d, Criterion::Sensitivity, ValueSource::Merged).unwrap();
        let r = rebuild_mask(&s, 4, &[], &mut m, &mut d).unwrap();
        assert_eq!((r.pruned_base, r.pruned_delta), (2, 0));
        assert_eq!(m.bits(), mask(&[0, 1, 0, 1, 0, 0, 0, 0]).bits());
        assert_eq!(d.indices(), &[4, 5]);
        assert_eq!(support_size(&m, Some(&d)), 4);
    }

    #[test]
    fn protected_entries_survive_their_zero_score() {
        let mut m = mask(&[1, 1, 0]);
        let mut d = DeltaTensor::from_entries(vec![1, 3], 1, vec![2], vec![0.0f64]).unwrap();
        let theta = Tensor::new(vec![1, 3], vec![1.0f64, 2.0, 0.0]).unwrap();
        let s = compute_sensitivity(&[1.0; 3], &theta, &m, &d, Criterion::Sensitivity, ValueSource::Merged).unwrap();
        let mut m2 = m.clone();
        let mut d2 = d.clone();
        rebuild_mask(&s, 2, &[], &mut m2, &mut d2).unwrap();
        assert!(d2.is_empty());
        rebuild_mask(&s, 2, &[2], &mut m, &mut d).unwrap();
        assert_eq!(d.indices(), &[2]);
        assert_eq!(m.bits(), mask(&[0, 1, 0]).bits());
    }

    #[test]
    fn reseat_fills_free_slots_inside_support() {
        let m = mask(&[1, 1, 1, 0]);
        let mut d = DeltaTensor::from_entries(vec![1, 4], 3, vec![0], vec![0.2f64]).unwrap();
        let before = support_size(&m, Some(&d));
        assert_eq!(reseat(&[0.0, 1.0, 5.0, 9.0], &m, &mut d).unwrap(), 2);
        assert_eq!(d.indices(), &[0, 1, 2]);
        assert_eq!(support_size(&m, Some(&d)), before);
    }

    fn random_state(seed: u64, n: usize) -> (Tensor<f64>, Mask, DeltaTensor<f64>, Vec<f64>, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = Tensor::from_fn(&[1, n], |_| rng.random_range(-1.0..1.0));
        let bits: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let idx: Vec<u32> = (0..n as u32).filter(|_| rng.random_bool(0.25)).collect();
        let vals = idx.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let grown: Vec<u32> = idx.iter().copied().filter(|_| rng.random_bool(0.3)).collect();
        let acc = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = DeltaTensor::from_entries(vec![1, n], idx.len(), idx, vals).unwrap();
        (theta, Mask::new("w", 1, n, bits, Pattern::Unstructured).unwrap(), d, acc, grown)
    }

    proptest! {
        #[test]
        fn adaptation_hits_budget_and_only_prunes(seed in 0u64..3000, n in 8usize..64, rho in 0.3f64..0.9) {
            let (theta, mut m, mut d, acc, grown) = random_state(seed, n);
            let old_mask = m.clone();
            let old_delta = d.clone();
            let old_support = support_size(&m, Some(&d));
            let s = compute_sensitivity(&acc, &theta, &m, &d, Criterion::Sensitivity, ValueSource::Merged);
            prop_assume!(s.is_ok());
            let keep = keep_count(rho, n);
            rebuild_mask(&s.unwrap(), keep, &grown, &mut m, &mut d).unwrap();
            prop_assert_eq!(support_size(&m, Some(&d)), keep.min(old_support));
            for i in 0..n {
                let now = m.get(i) || d.contains(i as u32);
                let before = old_mask.get(i) || old_delta.contains(i as u32);
                prop_assert!(!now || before);
                if m.get(i) {
                    prop_assert!(old_mask.get(i));
                }
            }
            let extra = reseat(&acc, &m, &mut d).unwrap();
            prop_assert!(extra <= d.budget());
            prop_assert_eq!(support_size(&m, Some(&d)), keep.min(old_support));
        }

        #[test]
        fn growth_of_m_masked_entries_removes_m_from_support(seed in 0u64..2000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 40;
            let rho = 0.5;
            let keep = keep_count(rho, n);
            let mut bits = vec![false; n];
            for i in 0..n { bits[i] = i % 2 == 0; }
            let mut m = Mask::new("w", 1, n, bits, Pattern::Unstructured).unwrap();
            let grown_masked: Vec<u32> = (0..n as u32).filter(|i| i % 2 == 1 && rng.random_bool(0.3)).collect();
            let extra_m = grown_masked.len();
            let vals = grown_masked.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut d = DeltaTensor::from_entries(vec![1, n], extra_m, grown_masked, vals).unwrap();
            let theta = Tensor::from_fn(&[1, n], |_| rng.random_range(-1.0..1.0));
            let acc: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = compute_sensitivity(&acc, &theta, &m, &d, Criterion::Sensitivity, ValueSource::Merged).unwrap();
            let r = rebuild_mask(&s, keep, &[], &mut m, &mut d).unwrap();
            prop_assert_eq!(r.pruned_base + r.pruned_delta, extra_m);
        }
    }
}
