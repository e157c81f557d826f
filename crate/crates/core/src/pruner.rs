//! Post-training pruning: activation statistics, Wanda or magnitude scores,
//! and per-row or N:M masks.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor};
use crate::model::{forward, Architecture, Binding, Input, ParamTree};
use crate::topk::top_k;
use crate::error::{Error, Result};

/// Tolerance used when turning `rho * n` into an integer count, so that
/// e.g. `0.6 * 10` does not floor to 5.
const COUNT_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Pattern {
    Unstructured,
    /// At most `n` nonzeros in every aligned group of `m` consecutive
    /// input-dimension weights.
    NM { n: usize, m: usize },
}

impl Pattern {
    pub fn validate(self) -> Result<()> {
        match self {
            Pattern::NM { n, m } if m == 0 || n == 0 || n > m => Err(Error::Config(format!(
                "invalid N:M pattern {n}:{m}"
            ))),
            _ => Ok(()),
        }
    }

    /// Sparsity implied by the pattern itself, if any.
    pub fn implied_sparsity(self) -> Option<f64> {
        match self {
            Pattern::Unstructured => None,
            Pattern::NM { n, m } => Some(1.0 - n as f64 / m as f64),
        }
    }

    pub fn is_structured(self) -> bool {
        matches!(self, Pattern::NM { .. })
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::Unstructured => f.write_str("unstructured"),
            Pattern::NM { n, m } => write!(f, "{n}:{m}"),
        }
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("unstructured") {
            return Ok(Pattern::Unstructured);
        }
        let (n, m) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("unknown pattern `{s}`")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("unknown pattern `{s}`")))
        };
        let p = Pattern::NM {
            n: parse(n)?,
            m: parse(m)?,
        };
        p.validate()?;
        Ok(p)
    }
}

impl TryFrom<String> for Pattern {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Pattern> for String {
    fn from(p: Pattern) -> String {
        p.to_string()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrunerKind {
    Magnitude,
    #[default]
    Wanda,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Grouping {
    /// Each output row keeps its own budget.
    #[default]
    PerRow,
    /// One budget over the whole matrix.
    PerMatrix,
}

/// Binary indicator of active base weights for one matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub pattern: Pattern,
    bits: Vec<bool>,
}

pub type MaskSet = IndexMap<String, Mask>;

impl Mask {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, bits: Vec<bool>, pattern: Pattern) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::shape("mask", &[rows, cols], &[bits.len()]));
        }
        Ok(Self {
            name: name.into(),
            rows,
            cols,
            pattern,
            bits,
        })
    }

    pub fn ones(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            pattern: Pattern::Unstructured,
            bits: vec![true; rows * cols],
        }
    }

    pub fn numel(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, on: bool) {
        self.bits[i] = on;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.count_ones() as f64 / self.numel() as f64
    }

    /// Flat offsets of aligned N:M groups holding more than `n` set bits.
    pub fn nm_violations(&self, n: usize, m: usize) -> Vec<usize> {
        nm_violations(&self.bits, self.cols, n, m)
    }
}

/// Flat offsets of aligned groups of `m` along each row with more than `n`
/// nonzeros.
pub fn nm_violations(nonzero: &[bool], cols: usize, n: usize, m: usize) -> Vec<usize> {
    if m == 0 || cols == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (r, row) in nonzero.chunks(cols).enumerate() {
        for (g, group) in row.chunks(m).enumerate() {
            if group.iter().filter(|&&b| b).count() > n {
                out.push(r * cols + g * m);
            }
        }
    }
    out
}

/// Per-input-feature L2 norms of the activations entering each prunable
/// matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationNorms {
    pub norms: IndexMap<String, Vec<f64>>,
    /// Number of activation rows (tokens or examples) seen.
    pub samples: usize,
}

/// Runs `batches` through the model and accumulates column-wise squared
/// activations at the input of every prunable matrix.
pub fn collect_activation_norms<T: Real>(
    arch: &Architecture,
    weights: &ParamTree<T>,
    batches: &[Input<'_, T>],
) -> Result<ActivationNorms> {
    if batches.is_empty() {
        return Err(Error::Empty("calibration set".into()));
    }
    let prunable = weights.prunable_names();
    let mut sumsq: IndexMap<String, Vec<f64>> = IndexMap::new();
    let mut samples = 0usize;
    for input in batches {
        let mut tape = Tape::new();
        let mut binding = Binding::bind(&mut tape, weights, |_, _| false);
        binding.record_linear_inputs();
        forward(arch, &mut tape, &mut binding, *input)?;
        let recorded = binding.linear_inputs().expect("recording enabled");
        let mut rows_seen = None;
        for name in &prunable {
            let var = *recorded
                .get(name)
                .ok_or_else(|| Error::UnknownTensor(name.clone()))?;
            let x = tape.value(var);
            let cols = *x.shape().last().unwrap_or(&1);
            let acc = sumsq.entry(name.clone()).or_insert_with(|| vec![0.0; cols]);
            for row in x.data().chunks(cols) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    let v = v.as_f64();
                    *a += v * v;
                }
            }
            rows_seen.get_or_insert(x.numel() / cols);
        }
        samples += rows_seen.unwrap_or(0);
    }
    let norms = sumsq
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(f64::sqrt).collect()))
        .collect();
    Ok(ActivationNorms { norms, samples })
}

/// `|W[i,j]| * norms[j]`
pub fn score_wanda<T: Real>(w: &Tensor<T>, norms: &[f64]) -> Result<Vec<f64>> {
    let (_, cols) = w.dims2()?;
    if norms.len() != cols {
        return Err(Error::shape("score_wanda", w.shape(), &[norms.len()]));
    }
    Ok(w.data()
        .iter()
        .enumerate()
        .map(|(i, v)| v.as_f64().abs() * norms[i % cols])
        .collect())
}

pub fn score_magnitude<T: Real>(w: &Tensor<T>) -> Vec<f64> {
    w.data().iter().map(|v| v.as_f64().abs()).collect()
}

/// Number of coordinates to clear out of `n` at sparsity `rho` when
/// flooring.
pub fn floor_count(rho: f64, n: usize) -> usize {
    ((rho * n as f64) + COUNT_EPS).floor() as usize
}

/// Number of coordinates kept out of `n` at sparsity `rho`, rounded half
/// up.
pub fn keep_count(rho: f64, n: usize) -> usize {
    ((1.0 - rho) * n as f64 + COUNT_EPS).round() as usize
}

pub fn validate_rho(rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!("sparsity {rho} must lie in [0, 1)")));
    }
    Ok(())
}

/// Keeps the highest-scoring coordinates of a `rows x cols` score matrix.
///
/// Unstructured per-row grouping clears the lowest `floor(rho * cols)` of
/// each row; per-matrix clears `round(rho * numel)` overall; N:M keeps the
/// top `n` of every aligned group of `m` (and ignores `rho`).
pub fn build_mask(
    name: &str,
    scores: &[f64],
    rows: usize,
    cols: usize,
    rho: f64,
    pattern: Pattern,
    grouping: Grouping,
) -> Result<Mask> {
    if scores.len() != rows * cols {
        return Err(Error::shape("build_mask", &[rows, cols], &[scores.len()]));
    }
    pattern.validate()?;
    let mut bits = vec![false; rows * cols];
    match pattern {
        Pattern::NM { n, m } => {
            if cols % m != 0 {
                return Err(Error::Config(format!(
                    "`{name}`: input dim {cols} is not divisible by {m}"
                )));
            }
            for base in (0..rows * cols).step_by(m) {
                let cands = (0..m).map(|j| (scores[base + j], j as u32)).collect();
                for j in top_k(cands, n) {
                    bits[base + j as usize] = true;
                }
            }
        }
        Pattern::Unstructured => {
            validate_rho(rho)?;
            match grouping {
                Grouping::PerRow => {
                    let keep = cols - floor_count(rho, cols);
                    for r in 0..rows {
                        let base = r * cols;
                        let cands = (0..cols).map(|j| (scores[base + j], j as u32)).collect();
                        for j in top_k(cands, keep) {
                            bits[base + j as usize] = true;
                        }
                    }
                }
                Grouping::PerMatrix => {
                    let keep = keep_count(rho, rows * cols);
                    let cands = scores.iter().enumerate().map(|(i, &s)| (s, i as u32)).collect();
                    for i in top_k(cands, keep) {
                        bits[i as usize] = true;
                    }
                }
            }
        }
    }
    Mask::new(name, rows, cols, bits, pattern)
}

/// Zeroes masked coordinates of every prunable tensor in place.
pub fn apply_mask<T: Real>(tree: &mut ParamTree<T>, masks: &MaskSet) -> Result<()> {
    for (name, p) in tree.iter_mut() {
        if !p.prunable {
            continue;
        }
        let mask = masks
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no mask for prunable tensor `{name}`")))?;
        if mask.numel() != p.tensor.numel() {
            return Err(Error::shape("apply_mask", p.tensor.shape(), &[mask.rows, mask.cols]));
        }
        for (v, &on) in p.tensor.data_mut().iter_mut().zip(mask.bits()) {
            if !on {
                *v = T::zero();
            }
        }
    }
    Ok(())
}

/// Builds masks for every prunable tensor of `weights`.
pub fn prune<T: Real>(
    arch: &Architecture,
    weights: &ParamTree<T>,
    calibration: &[Input<'_, T>],
    kind: PrunerKind,
    rho: f64,
    pattern: Pattern,
) -> Result<MaskSet> {
    let norms = match kind {
        PrunerKind::Wanda => Some(collect_activation_norms(arch, weights, calibration)?),
        PrunerKind::Magnitude => None,
    };
    let mut masks = MaskSet::new();
    for (name, w) in weights.named_prunable() {
        let (rows, cols) = w.dims2()?;
        let scores = match &norms {
            Some(n) => score_wanda(w, &n.norms[name])?,
            None => score_magnitude(w),
        };
        let mask = build_mask(name, &scores, rows, cols, rho, pattern, Grouping::PerRow)?;
        masks.insert(name.to_string(), mask);
    }
    Ok(masks)
}
