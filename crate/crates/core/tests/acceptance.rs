//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each; exits nonzero if any fails.
//!
//! `SEFT_ACCEPT_ONLY=1,6` restricts the run to the listed criteria.

use std::cell::{OnceCell, RefCell};
use std::collections::HashMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use seft_core::adaptation::{rebuild_mask, support_size, Criterion, ValueSource};
use seft_core::autodiff::{grad_check, Tensor};
use seft_core::baselines::{lora_forward, LoraAdapter, LoraSet};
use seft_core::checkpoint::{audit, Checkpoint};
use seft_core::data::{DataConfig, Dataset, TaskKind, TokenBatch};
use seft_core::delta::{allocate_budget, delta_loss_and_grads, effective_weights, merged_params, DeltaTensor, SparseDelta};
use seft_core::evolution::{evolve_topology, select_drop, select_grow, DropScope, EvolutionSchedule, GradAccumulator};
use seft_core::model::{build_transformer, lm_loss_and_grads, Architecture, Input, ModelConfig};
use seft_core::pruner::{
    build_mask, collect_activation_norms, keep_count, nm_violations, score_wanda, Grouping, Mask, MaskSet, Pattern,
    PrunerKind,
};
use seft_core::train::{finetune, finetune_observed, prune_checkpoint, pretrain, CycleView, Method, PretrainConfig, RunOutput, TrainConfig};
use seft_core::Error;

type Outcome = Result<String, String>;

fn fail<T>(msg: impl Into<String>) -> Result<T, String> {
    Err(msg.into())
}

fn e2s(e: Error) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- fixtures

const RHO: f64 = 0.6;

/// Character-level model. `rho * cols` is an integer for every prunable
/// matrix, so per-row pruning lands exactly on the target.
fn char_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            vocab: 256,
            dim: 40,
            heads: 2,
            blocks: 1,
            ff_mult: 2,
            context: 8,
            seed,
        },
        data: DataConfig {
            synthetic_bytes: 1 << 20,
            ..DataConfig::default()
        },
        pretrain: PretrainConfig {
            steps: 1500,
            lr: 3e-3,
            batch_size: 16,
            eval_every: 1500,
        },
        rho: RHO,
        rank: 2,
        lr: 1e-3,
        steps: 1000,
        frequency: 10,
        grad_accum: 8,
        batch_size: 8,
        eval_every: 1000,
        eval_samples: Some(2000),
        calibration_batches: 8,
        seed,
        ..TrainConfig::default()
    }
}

fn copy_cfg(seed: u64) -> TrainConfig {
    let mut c = char_cfg(seed);
    c.data = DataConfig {
        task: TaskKind::Copy,
        copy_len: 4,
        copy_alphabet: 16,
        copy_samples: 20_000,
        ..DataConfig::default()
    };
    c.pretrain = PretrainConfig {
        steps: 1500,
        lr: 3e-3,
        batch_size: 32,
        eval_every: 1500,
    };
    c.eval_samples = Some(500);
    c
}

#[derive(Default)]
struct Fixtures {
    char_data: OnceCell<Dataset>,
    copy_data: OnceCell<Dataset>,
    char_dense: RefCell<HashMap<u64, Checkpoint>>,
    copy_dense: RefCell<HashMap<u64, Checkpoint>>,
    char_pruned: RefCell<HashMap<(u64, bool), Checkpoint>>,
    /// Final val perplexity of default SEFT on the char task, by seed.
    seft_ppl: RefCell<HashMap<u64, f64>>,
}

impl Fixtures {
    fn char_data(&self) -> &Dataset {
        self.char_data.get_or_init(|| char_cfg(0).dataset().expect("char dataset"))
    }

    fn copy_data(&self) -> &Dataset {
        self.copy_data.get_or_init(|| copy_cfg(0).dataset().expect("copy dataset"))
    }

    fn char_dense(&self, seed: u64) -> Checkpoint {
        if let Some(c) = self.char_dense.borrow().get(&seed) {
            return c.clone();
        }
        let (c, _) = pretrain(&char_cfg(seed), self.char_data()).expect("pretrain");
        self.char_dense.borrow_mut().insert(seed, c.clone());
        c
    }

    fn copy_dense(&self, seed: u64) -> Checkpoint {
        if let Some(c) = self.copy_dense.borrow().get(&seed) {
            return c.clone();
        }
        let (c, _) = pretrain(&copy_cfg(seed), self.copy_data()).expect("pretrain");
        self.copy_dense.borrow_mut().insert(seed, c.clone());
        c
    }

    /// Wanda-pruned (or magnitude-pruned) char model at `RHO`.
    fn char_pruned(&self, seed: u64, wanda: bool) -> Checkpoint {
        if let Some(c) = self.char_pruned.borrow().get(&(seed, wanda)) {
            return c.clone();
        }
        let mut cfg = char_cfg(seed);
        cfg.pruner = if wanda { PrunerKind::Wanda } else { PrunerKind::Magnitude };
        let c = prune_checkpoint(&self.char_dense(seed), self.char_data(), &cfg).expect("prune");
        self.char_pruned.borrow_mut().insert((seed, wanda), c.clone());
        c
    }

    fn seft_ppl(&self, seed: u64) -> Result<f64, String> {
        if let Some(&p) = self.seft_ppl.borrow().get(&seed) {
            return Ok(p);
        }
        let out = finetune(&self.char_pruned(seed, true), self.char_data(), &char_cfg(seed)).map_err(e2s)?;
        let p = out.final_eval.ppl;
        self.seft_ppl.borrow_mut().insert(seed, p);
        Ok(p)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
}

// ------------------------------------------------------------ criterion 1

fn sparsity_restoration(fx: &Fixtures) -> Outcome {
    let data = fx.char_data();
    let (mut events, mut worst) = (0usize, 0.0f64);
    for i in 0..20u64 {
        let mut cfg = char_cfg(0);
        cfg.seed = 100 + i;
        cfg.steps = 2000;
        cfg.grad_accum = 1;
        cfg.batch_size = 2;
        cfg.eval_every = 2000;
        cfg.eval_samples = Some(64);
        cfg.drop_rate = [0.1, 0.2, 0.3, 0.5][i as usize % 4];
        cfg.frequency = [5, 10, 20][i as usize % 3];
        cfg.adapt.criterion = if i % 2 == 0 { Criterion::Sensitivity } else { Criterion::Magnitude };
        if i % 5 == 4 {
            cfg.adapt.source = ValueSource::Pretrained;
        }
        let base = fx.char_pruned(0, i % 3 != 2);
        let mut bad: Option<String> = None;
        let mut check = |v: &CycleView<'_>| -> seft_core::Result<()> {
            for (name, mask) in v.masks {
                let numel = mask.numel();
                let sp = 1.0 - support_size(mask, v.delta.get(name)) as f64 / numel as f64;
                let dev = (sp - RHO).abs();
                worst = worst.max(dev);
                if dev > 1.0 / numel as f64 + 1e-12 && bad.is_none() {
                    bad = Some(format!("config {i} step {}: `{name}` sparsity {sp}", v.step));
                }
            }
            events += 1;
            Ok(())
        };
        let out = finetune_observed(&base, data, &cfg, &mut check).map_err(e2s)?;
        if let Some(b) = bad {
            return fail(b);
        }
        let final_sp = out.checkpoint.sparsity().map_err(e2s)?;
        if (final_sp - RHO).abs() > 1e-9 {
            return fail(format!("config {i}: final sparsity {final_sp}"));
        }
    }
    Ok(format!("20 configs x 2000 steps, {events} adaptation events, max |sparsity - 0.6| = {worst:.2e}"))
}

// ------------------------------------------------------------ criterion 2

fn random_mask(rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize, p: f64) -> Mask {
    let bits = (0..rows * cols).map(|_| rng.random_bool(p)).collect();
    Mask::new(name, rows, cols, bits, Pattern::Unstructured).unwrap()
}

/// Values drawn from a small grid so that ties are common.
fn tied(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-4i32..=4) as f64 * 0.25
}

fn random_delta(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DeltaTensor<f32> {
    let n = rows * cols;
    let budget = rng.random_range(1..=n);
    let len = rng.random_range(0..=budget);
    let mut idx: Vec<u32> = sample(rng, n, len).into_iter().map(|i| i as u32).collect();
    idx.sort_unstable();
    let vals = idx.iter().map(|_| tied(rng) as f32).collect();
    DeltaTensor::from_entries(vec![rows, cols], budget, idx, vals).unwrap()
}

fn budget_conservation(_: &Fixtures) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cycles = 0;
    let mut swapped = 0;
    for _state in 0..100 {
        let tensors = rng.random_range(1..=4);
        let mut delta = SparseDelta::new();
        let mut masks = MaskSet::new();
        let mut shapes = Vec::new();
        for k in 0..tensors {
            let (r, c) = (rng.random_range(1..=10), rng.random_range(1..=10));
            let name = format!("w{k}");
            let p = rng.random_range(0.1..0.9);
            masks.insert(name.clone(), random_mask(&mut rng, &name, r, c, p));
            delta.insert(name.clone(), random_delta(&mut rng, r, c)).unwrap();
            shapes.push((name, r * c));
        }
        let structured = rng.random_bool(0.5);
        let scope = if !structured && rng.random_bool(0.5) { DropScope::All } else { DropScope::MaskActive };
        let schedule = EvolutionSchedule {
            drop_rate: rng.random_range(0.01..0.99),
            total_steps: rng.random_range(1..200),
            frequency: 1,
            structured,
            cosine: rng.random_bool(0.5),
            drop_scope: scope,
        };
        for _ in 0..10 {
            let mut acc = GradAccumulator::new(shapes.clone());
            for (name, n) in &shapes {
                let g: Vec<f64> = (0..*n).map(|_| tied(&mut rng)).collect();
                acc.accumulate(name, &g).unwrap();
            }
            let before: Vec<Vec<u32>> = delta.iter().map(|(_, d)| d.indices().to_vec()).collect();
            let t = rng.random_range(0..=schedule.total_steps);
            let r = evolve_topology(&mut delta, &acc, &masks, &schedule, t).map_err(e2s)?;
            for ((name, d), b) in delta.iter().zip(&before) {
                if d.len() != b.len() {
                    return fail(format!("cycle {cycles}: `{name}` |eta| {} -> {}", b.len(), d.len()));
                }
                if !d.indices().windows(2).all(|w| w[0] < w[1]) {
                    return fail(format!("cycle {cycles}: `{name}` indices not strictly ascending"));
                }
            }
            if r.drops() != r.grows() || r.shortfall != 0 {
                return fail(format!("cycle {cycles}: {} drops vs {} grows", r.drops(), r.grows()));
            }
            swapped += r.drops();
            cycles += 1;
        }
    }
    Ok(format!("{cycles} evolve cycles, {swapped} entries swapped, |eta| unchanged in every tensor"))
}

// ------------------------------------------------------------ criterion 3

/// Full sort by key descending, then index ascending; first `k`, sorted.
fn brute_top(mut c: Vec<(f64, u32)>, k: usize) -> Vec<u32> {
    c.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out: Vec<u32> = c.into_iter().take(k).map(|x| x.1).collect();
    out.sort_unstable();
    out
}

fn brute_bottom(mut c: Vec<(f64, u32)>, k: usize) -> Vec<u32> {
    c.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out: Vec<u32> = c.into_iter().take(k).map(|x| x.1).collect();
    out.sort_unstable();
    out
}

fn small_shape(rng: &mut ChaCha8Rng) -> (usize, usize) {
    loop {
        let (r, c) = (rng.random_range(1..=8), rng.random_range(1..=8));
        if r * c <= 64 {
            return (r, c);
        }
    }
}

fn topk_oracle(_: &Fixtures) -> Outcome {
    const N: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    for case in 0..N {
        let (r, c) = small_shape(&mut rng);
        let d = random_delta(&mut rng, r, c);
        let tau = rng.random_range(0..=d.len() + 2);
        let want = brute_bottom(d.indices().iter().zip(d.values()).map(|(&i, v)| ((*v as f64).abs(), i)).collect(), tau);
        if select_drop(&d, tau) != want {
            return fail(format!("select_drop case {case}"));
        }
    }

    for case in 0..N {
        let (r, c) = small_shape(&mut rng);
        let d = random_delta(&mut rng, r, c);
        let mask = random_mask(&mut rng, "w", r, c, 0.5);
        let acc: Vec<f64> = (0..r * c).map(|_| tied(&mut rng)).collect();
        let restrict = rng.random_bool(0.5);
        let tau = rng.random_range(0..=r * c);
        let cands: Vec<(f64, u32)> = (0..(r * c) as u32)
            .filter(|&i| !d.indices().contains(&i) && (!restrict || mask.get(i as usize)))
            .map(|i| (acc[i as usize].abs(), i))
            .collect();
        let short = tau.saturating_sub(cands.len());
        let want = brute_top(cands, tau);
        let got = select_grow(&acc, &d, &mask, tau, restrict).map_err(e2s)?;
        if got.indices != want || got.shortfall != short {
            return fail(format!("select_grow case {case}"));
        }
    }

    // rates p/q so the oracle counts in exact integer arithmetic
    const RATES: [(usize, usize); 8] = [(0, 1), (1, 4), (3, 10), (1, 2), (3, 5), (2, 3), (7, 10), (9, 10)];
    for case in 0..N {
        let (p, q) = RATES[rng.random_range(0..RATES.len())];
        let rho = p as f64 / q as f64;
        let variant = rng.random_range(0..3);
        let (rows, cols) = if variant == 2 {
            let m = [2usize, 4, 8][rng.random_range(0..3)];
            let groups = rng.random_range(1..=(8 / m).max(1));
            (rng.random_range(1..=8), m * groups)
        } else {
            small_shape(&mut rng)
        };
        let scores: Vec<f64> = (0..rows * cols).map(|_| tied(&mut rng).abs()).collect();
        let mut want = vec![false; rows * cols];
        let (pattern, grouping) = match variant {
            0 => {
                let keep = cols - p * cols / q;
                for row in 0..rows {
                    let cand = (0..cols).map(|j| (scores[row * cols + j], j as u32)).collect();
                    for j in brute_top(cand, keep) {
                        want[row * cols + j as usize] = true;
                    }
                }
                (Pattern::Unstructured, Grouping::PerRow)
            }
            1 => {
                let n = rows * cols;
                let keep = (2 * (q - p) * n + q) / (2 * q);
                let cand = scores.iter().enumerate().map(|(i, &s)| (s, i as u32)).collect();
                for i in brute_top(cand, keep) {
                    want[i as usize] = true;
                }
                (Pattern::Unstructured, Grouping::PerMatrix)
            }
            _ => {
                let m = if cols % 8 == 0 && rng.random_bool(0.3) { 8 } else if cols % 4 == 0 { 4 } else { 2 };
                let n = rng.random_range(1..m);
                for g in (0..rows * cols).step_by(m) {
                    let cand = (0..m).map(|j| (scores[g + j], j as u32)).collect();
                    for j in brute_top(cand, n) {
                        want[g + j as usize] = true;
                    }
                }
                (Pattern::NM { n, m }, Grouping::PerRow)
            }
        };
        let got = build_mask("w", &scores, rows, cols, rho, pattern, grouping).map_err(e2s)?;
        if got.bits() != want.as_slice() {
            return fail(format!("build_mask case {case} ({pattern}, {grouping:?}, rho {rho})"));
        }
    }

    for case in 0..N {
        let (r, c) = small_shape(&mut rng);
        let mut mask = random_mask(&mut rng, "w", r, c, 0.6);
        let mut d = random_delta(&mut rng, r, c);
        let support: Vec<u32> = (0..(r * c) as u32).filter(|&i| mask.get(i as usize) || d.indices().contains(&i)).collect();
        if support.is_empty() {
            continue;
        }
        let scores: Vec<(f64, u32)> = support.iter().map(|&i| (tied(&mut rng).abs(), i)).collect();
        let protected: Vec<u32> = support.iter().copied().filter(|_| rng.random_bool(0.2)).collect();
        let keep = rng.random_range(0..=support.len() + 1);

        let kept: Vec<u32> = if support.len() <= keep {
            support.clone()
        } else {
            let (first, rest): (Vec<_>, Vec<_>) = scores.iter().copied().partition(|s| protected.contains(&s.1));
            let mut k = brute_top(first, keep);
            let room = keep - k.len();
            k.extend(brute_top(rest, room));
            k.sort_unstable();
            k
        };
        let mut want_mask = mask.bits().to_vec();
        let mut want_delta = Vec::new();
        for &i in &support {
            if !kept.contains(&i) {
                want_mask[i as usize] = false;
            } else if d.indices().contains(&i) {
                want_delta.push(i);
            }
        }
        rebuild_mask(&scores, keep, &protected, &mut mask, &mut d).map_err(e2s)?;
        if mask.bits() != want_mask.as_slice() || d.indices() != want_delta.as_slice() {
            return fail(format!("rebuild_mask case {case}"));
        }
    }
    Ok(format!("{N} instances each of select_drop, select_grow, build_mask, rebuild_mask match full-sort references"))
}

// ------------------------------------------------------------ criterion 4

fn batch_of(data: &Dataset, n: usize, seed: u64) -> TokenBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.sample_batch(&mut rng, n).unwrap()
}

fn gradient_correctness(fx: &Fixtures) -> Outcome {
    let cfg = char_cfg(4).model;
    let model = build_transformer::<f64>(&cfg).map_err(e2s)?;
    let batch = batch_of(fx.char_data(), 2, 4);
    let arch = model.arch.clone();
    let params = model.params.clone();

    let r = lm_loss_and_grads(&arch, &params, &batch, |_, _| true).map_err(e2s)?;
    let grads: HashMap<String, Vec<f64>> = r.grads.into_iter().collect();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut flat = Vec::new();
    let mut analytic = Vec::new();
    for n in &names {
        let t = params.tensor(n).map_err(e2s)?;
        flat.extend_from_slice(t.data());
        analytic.extend_from_slice(&grads[n]);
    }
    let unflatten = |xs: &[f64]| {
        let mut p = params.clone();
        let mut off = 0;
        for n in &names {
            let d = p.get_mut(n).unwrap().tensor.data_mut();
            d.copy_from_slice(&xs[off..off + d.len()]);
            off += d.len();
        }
        p
    };
    let report = grad_check(
        &flat,
        &analytic,
        |xs| lm_loss_and_grads(&arch, &unflatten(xs), &batch, |_, _| false).unwrap().loss,
        1e-5,
        1e-4,
        64,
        4,
    );
    if !report.passed || report.checked != 64 {
        return fail(format!("finite differences: max rel error {:.3e} over {}", report.max_rel_error, report.checked));
    }

    // delta gradient against the dense gradient of the merged weights
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0.0f64;
    let mut coords = 0;
    for trial in 0..5 {
        let mut masks = MaskSet::new();
        let mut delta = SparseDelta::new();
        for (name, w) in params.named_prunable() {
            let (r, c) = w.dims2().map_err(e2s)?;
            masks.insert(name.to_string(), random_mask(&mut rng, name, r, c, 0.4));
            let n = r * c;
            let len = rng.random_range(1..=n / 4);
            let mut idx: Vec<u32> = sample(&mut rng, n, len).into_iter().map(|i| i as u32).collect();
            idx.sort_unstable();
            let vals = idx.iter().map(|_| rng.random_range(-0.1..0.1)).collect();
            delta.insert(name, DeltaTensor::from_entries(vec![r, c], len, idx, vals).map_err(e2s)?).map_err(e2s)?;
        }
        let masked = merged_params(&params, &masks, &SparseDelta::new()).map_err(e2s)?;
        let merged = merged_params(&params, &masks, &delta).map_err(e2s)?;
        let b = batch_of(fx.char_data(), 2, 40 + trial);
        let (_, dg) = delta_loss_and_grads(&arch, &masked, &delta, &b).map_err(e2s)?;
        let dense = lm_loss_and_grads(&arch, &merged, &b, |_, p| p.prunable).map_err(e2s)?;
        let dense: HashMap<String, Vec<f64>> = dense.grads.into_iter().collect();
        for (name, d) in delta.iter() {
            for (k, &i) in d.indices().iter().enumerate() {
                let diff = (dg[name][k] - dense[name][i as usize]).abs();
                worst = worst.max(diff);
                coords += 1;
                if diff > 1e-10 {
                    return fail(format!("delta grad of `{name}`[{i}] off by {diff:.3e}"));
                }
            }
        }
    }
    Ok(format!(
        "64 coordinates, max rel error {:.2e}; delta vs dense grad on {coords} support coordinates, max |diff| {worst:.1e}",
        report.max_rel_error
    ))
}

// ------------------------------------------------------------ criterion 5

fn nm_feasibility(fx: &Fixtures) -> Outcome {
    let mut cfg = char_cfg(0);
    cfg.pattern = Pattern::NM { n: 2, m: 4 };
    cfg.steps = 1000;
    cfg.grad_accum = 1;
    cfg.batch_size = 4;
    cfg.eval_samples = Some(256);
    let data = fx.char_data();
    let base = prune_checkpoint(&fx.char_dense(0), data, &cfg).map_err(e2s)?;
    let mut cycles = 0;
    let mut bad = None;
    let mut check = |v: &CycleView<'_>| -> seft_core::Result<()> {
        for (name, mask) in v.masks {
            let w = effective_weights(v.theta.tensor(name)?, mask, v.delta.get(name))?;
            let nonzero: Vec<bool> = w.data().iter().map(|&x| x != 0.0).collect();
            let support: Vec<bool> = (0..mask.numel())
                .map(|i| mask.get(i) || v.delta.get(name).is_some_and(|d| d.contains(i as u32)))
                .collect();
            let vz = nm_violations(&nonzero, mask.cols, 2, 4);
            let vs = nm_violations(&support, mask.cols, 2, 4);
            if (!vz.is_empty() || !vs.is_empty()) && bad.is_none() {
                bad = Some(format!("step {}: `{name}` groups {vz:?} / {vs:?}", v.step));
            }
        }
        cycles += 1;
        Ok(())
    };
    let out = finetune_observed(&base, data, &cfg, &mut check).map_err(e2s)?;
    if let Some(b) = bad {
        return fail(b);
    }
    let a = audit(&out.checkpoint, Some(Pattern::NM { n: 2, m: 4 })).map_err(e2s)?;
    if a.violations() != 0 {
        return fail(format!("final checkpoint has {} violations", a.violations()));
    }
    Ok(format!("{cycles} evolve+adapt cycles over 1000 steps, 0 violations; final audit clean"))
}

// ------------------------------------------------------------ criterion 6

fn recovery(fx: &Fixtures) -> Outcome {
    let mut frozen = Vec::new();
    let mut seft = Vec::new();
    for seed in 0..3 {
        let mut cfg = char_cfg(seed);
        cfg.method = Method::Frozen;
        let base = fx.char_pruned(seed, true);
        frozen.push(finetune(&base, fx.char_data(), &cfg).map_err(e2s)?.final_eval.ppl);
        seft.push(fx.seft_ppl(seed)?);
    }
    let detail = format!("frozen ppl [{}] vs SEFT [{}]", fmt_list(&frozen), fmt_list(&seft));
    if seft.iter().zip(&frozen).all(|(s, f)| s < f) {
        Ok(detail)
    } else {
        fail(detail)
    }
}

// ------------------------------------------------------------ criterion 7

/// Prunes to `RHO` per row after first removing the `planted` highest
/// Wanda-scoring coordinates of every row.
fn planted_prune(dense: &Checkpoint, data: &Dataset, cfg: &TrainConfig, planted: usize) -> Result<Checkpoint, String> {
    let calib = data.leading_batches(cfg.batch_size, cfg.calibration_batches).map_err(e2s)?;
    let inputs: Vec<Input<f32>> = calib.iter().map(Input::Tokens).collect();
    let norms = collect_activation_norms(&dense.arch, &dense.params, &inputs).map_err(e2s)?;
    let mut masks = MaskSet::new();
    for (name, w) in dense.params.named_prunable() {
        let (rows, cols) = w.dims2().map_err(e2s)?;
        let mut scores = score_wanda(w, &norms.norms[name]).map_err(e2s)?;
        for r in 0..rows {
            let row = &mut scores[r * cols..(r + 1) * cols];
            let cand = row.iter().enumerate().map(|(j, &s)| (s, j as u32)).collect();
            for j in brute_top(cand, planted) {
                row[j as usize] = -1.0;
            }
        }
        masks.insert(name.to_string(), build_mask(name, &scores, rows, cols, RHO, Pattern::Unstructured, Grouping::PerRow).map_err(e2s)?);
    }
    Ok(Checkpoint {
        masks,
        ..dense.clone()
    })
}

fn constraint_ablation(fx: &Fixtures) -> Outcome {
    let data = fx.copy_data();
    let (mut free, mut cons, mut frozen) = (Vec::new(), Vec::new(), Vec::new());
    let (mut re_free, mut re_cons) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let mut cfg = copy_cfg(seed);
        cfg.steps = 600;
        cfg.grad_accum = 1;
        cfg.batch_size = 16;
        cfg.eval_every = 600;
        let base = planted_prune(&fx.copy_dense(seed), data, &cfg, 2)?;
        let mut fz = cfg.clone();
        fz.method = Method::Frozen;
        frozen.push(finetune(&base, data, &fz).map_err(e2s)?.final_eval.ppl);
        for (method, ppl, re) in [(Method::Seft, &mut free, &mut re_free), (Method::SeftConstrained, &mut cons, &mut re_cons)] {
            cfg.method = method;
            let out = finetune(&base, data, &cfg).map_err(e2s)?;
            ppl.push(out.final_eval.ppl);
            re.push(reactivation(&out));
        }
    }
    let detail = format!(
        "frozen [{}]; unconstrained [{}] mean {:.4}, reactivation [{}]; constrained [{}] mean {:.4}, reactivation [{}]",
        fmt_list(&frozen),
        fmt_list(&free),
        mean(&free),
        fmt_list(&re_free),
        fmt_list(&cons),
        mean(&cons),
        fmt_list(&re_cons)
    );
    let ok = mean(&free) <= mean(&cons) && re_free.iter().all(|&r| r > 0.0) && re_cons.iter().all(|&r| r == 0.0);
    if ok {
        Ok(detail)
    } else {
        fail(detail)
    }
}

/// Fraction of all grown coordinates that were masked in the base.
fn reactivation(out: &RunOutput) -> f64 {
    let (re, grown) = out.evolution.iter().fold((0, 0), |(r, g), e| (r + e.reactivated, g + e.grows()));
    if grown == 0 {
        0.0
    } else {
        re as f64 / grown as f64
    }
}

// ------------------------------------------------------------ criterion 8

fn criterion_ablation(fx: &Fixtures) -> Outcome {
    let mut sens = Vec::new();
    let mut mag = Vec::new();
    for seed in 0..3 {
        sens.push(fx.seft_ppl(seed)?);
        let mut cfg = char_cfg(seed);
        cfg.adapt.criterion = Criterion::Magnitude;
        mag.push(finetune(&fx.char_pruned(seed, true), fx.char_data(), &cfg).map_err(e2s)?.final_eval.ppl);
    }
    let (s, m) = (mean(&sens), mean(&mag));
    let detail = format!("sensitivity [{}] mean {s:.4}; magnitude [{}] mean {m:.4}", fmt_list(&sens), fmt_list(&mag));
    if s <= m * 1.01 {
        Ok(detail)
    } else {
        fail(detail)
    }
}

// ------------------------------------------------------------ criterion 9

fn budget_parity(fx: &Fixtures) -> Outcome {
    // wide enough that a rank-64 budget fits inside every kept support
    let mut cfg = char_cfg(9);
    cfg.model = ModelConfig {
        vocab: 512,
        dim: 320,
        heads: 4,
        blocks: 1,
        ff_mult: 4,
        context: 8,
        seed: 9,
    };
    cfg.steps = 1;
    cfg.grad_accum = 1;
    cfg.batch_size = 1;
    cfg.calibration_batches = 1;
    cfg.eval_samples = Some(2);
    let data = fx.char_data();
    let dense = Checkpoint::dense(
        Architecture::Transformer(cfg.model.clone()),
        build_transformer::<f32>(&cfg.model).map_err(e2s)?.params,
    );
    let pruned = prune_checkpoint(&dense, data, &cfg).map_err(e2s)?;
    let mut lines = Vec::new();
    for r in [8, 16, 32, 64] {
        cfg.rank = r;
        let d_phi: usize = allocate_budget(&pruned.params, r).map_err(e2s)?.values().sum();
        let lora = LoraSet::init(&pruned.params, r, 0).map_err(e2s)?.trainable_count();
        cfg.method = Method::Seft;
        let run = finetune(&pruned, data, &cfg).map_err(e2s)?;
        let live = run.checkpoint.delta.total_budget();
        let entries = run.checkpoint.delta.total_entries();
        cfg.method = Method::Lora;
        let run = finetune(&pruned, data, &cfg).map_err(e2s)?;
        let lora_run: usize = run.checkpoint.adapters.values().map(|a| a.num_params()).sum();
        if d_phi != lora || live != lora || entries != lora || lora_run != lora {
            return fail(format!("r={r}: d_phi {d_phi}, run budget {live}, entries {entries}, LoRA {lora} / {lora_run}"));
        }
        lines.push(format!("r={r}: {lora}"));
    }
    Ok(format!("d_phi = LoRA params: {}", lines.join(", ")))
}

// ----------------------------------------------------------- criterion 10

fn lora_star(fx: &Fixtures) -> Outcome {
    let mut cfg = char_cfg(0);
    cfg.method = Method::LoraStar;
    cfg.steps = 300;
    cfg.lr = 2e-3;
    let out = finetune(&fx.char_pruned(0, true), fx.char_data(), &cfg).map_err(e2s)?;
    let ck = &out.checkpoint;
    let merged = ck.merged_params().map_err(e2s)?;
    let (mut nz, mut total) = (0, 0);
    for (name, w) in merged.named_prunable() {
        let keep = keep_count(RHO, w.numel());
        if w.count_nonzero() != keep || ck.masks[name].count_ones() != keep {
            return fail(format!("`{name}`: {} nonzeros, {} mask bits, expected {keep}", w.count_nonzero(), ck.masks[name].count_ones()));
        }
        nz += w.count_nonzero();
        total += w.numel();
    }
    if 5 * nz != 2 * total {
        return fail(format!("global popcount {nz} of {total}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let normal = Normal::new(0.0, 0.02).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (out_d, in_d, r, n) = (rng.random_range(1..=32), rng.random_range(1..=32), rng.random_range(1..=8), rng.random_range(1..=8));
        let bound = 1.0 / (in_d as f32).sqrt();
        let w = Tensor::from_fn(&[out_d, in_d], |_| rng.random_range(-bound..bound));
        let a = Tensor::from_fn(&[r, in_d], |_| normal.sample(&mut rng) as f32);
        let b = Tensor::from_fn(&[out_d, r], |_| rng.random_range(-0.5f32..0.5));
        let x = Tensor::from_fn(&[n, in_d], |_| rng.random_range(-1.0f32..1.0));
        let ad = LoraAdapter::new(a, b, rng.random_range(0.5..2.0)).map_err(e2s)?;
        let y = lora_forward(&w, &ad, &x).map_err(e2s)?;
        let merged = ad.merge_into(&w).map_err(e2s)?;
        for i in 0..n {
            for o in 0..out_d {
                let mut s = 0.0f32;
                for k in 0..in_d {
                    s += x.data()[i * in_d + k] * merged.data()[o * in_d + k];
                }
                let got = y.data()[i * out_d + o];
                let err = ((got - s).abs() / s.abs().max(1.0)) as f64;
                worst = worst.max(err);
            }
        }
    }
    if worst > 1e-6 {
        return fail(format!("lora_forward vs merged forward: max rel error {worst:.2e}"));
    }
    Ok(format!(
        "every tensor at exactly {nz}/{total} kept (val ppl {:.4}); lora_forward max rel error {worst:.1e} over 1000 instances",
        out.final_eval.ppl
    ))
}

// ----------------------------------------------------------- criterion 11

fn determinism(fx: &Fixtures) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = char_cfg(0);
    cfg.steps = 200;
    cfg.eval_every = 50;
    cfg.eval_samples = Some(256);
    let base = fx.char_pruned(0, true);
    for (k, dir) in ["a", "b"].iter().enumerate() {
        let out = finetune(&base, fx.char_data(), &cfg).map_err(e2s)?;
        out.write(&tmp.path().join(dir)).map_err(e2s)?;
        if k == 1 {
            for f in ["metrics.csv", "tensor_sparsity.csv", "model.seft"] {
                let a = fs::read(tmp.path().join("a").join(f)).map_err(|e| e.to_string())?;
                let b = fs::read(tmp.path().join("b").join(f)).map_err(|e| e.to_string())?;
                if a != b {
                    return fail(format!("{f} differs between identical runs"));
                }
            }
        }
    }

    let mut lcfg = cfg.clone();
    lcfg.method = Method::Lora;
    lcfg.steps = 20;
    let lora = finetune(&base, fx.char_data(), &lcfg).map_err(e2s)?.checkpoint;
    let seft = Checkpoint::load(&tmp.path().join("a/model.seft")).map_err(e2s)?;
    for (what, ck) in [("dense", fx.char_dense(0)), ("pruned", base.clone()), ("seft", seft), ("lora", lora)] {
        let p1 = tmp.path().join(format!("{what}1.seft"));
        let p2 = tmp.path().join(format!("{what}2.seft"));
        ck.save(&p1).map_err(e2s)?;
        Checkpoint::load(&p1).map_err(e2s)?.save(&p2).map_err(e2s)?;
        if fs::read(&p1).unwrap() != fs::read(&p2).unwrap() {
            return fail(format!("{what} checkpoint round-trip is not byte-identical"));
        }
    }

    let mut nm = char_cfg(0);
    nm.pattern = Pattern::NM { n: 2, m: 4 };
    let mut ck = prune_checkpoint(&fx.char_dense(0), fx.char_data(), &nm).map_err(e2s)?;
    let good = tmp.path().join("nm.seft");
    ck.save(&good).map_err(e2s)?;
    let (name, mask) = ck.masks.get_index_mut(1).unwrap();
    let name = name.clone();
    let off = (0..4).find(|&i| !mask.get(i)).unwrap();
    mask.set(off, true);
    let bad = tmp.path().join("nm-bad.seft");
    ck.save(&bad).map_err(e2s)?;
    let inspect = |p: &std::path::Path| {
        Command::new(env!("CARGO_BIN_EXE_seft"))
            .arg("inspect")
            .arg(p)
            .env("RUST_LOG", "off")
            .output()
            .expect("spawn seft")
    };
    let ok_run = inspect(&good);
    let bad_run = inspect(&bad);
    let text = String::from_utf8_lossy(&bad_run.stdout);
    if ok_run.status.code() != Some(0) {
        return fail("inspect rejects a valid 2:4 checkpoint");
    }
    if bad_run.status.success() || !text.contains(&format!("violation: {name} group at offset 0")) {
        return fail(format!("inspect on planted violation: exit {:?}", bad_run.status.code()));
    }
    Ok(format!(
        "identical runs byte-equal; 4 checkpoint kinds round-trip byte-identically; inspect exits {} on a planted 2:4 violation in `{name}`",
        bad_run.status.code().unwrap_or(-1)
    ))
}

// ------------------------------------------------------------------ main

struct Check {
    id: u32,
    name: &'static str,
    /// Runtime limit, where one is stated.
    budget: Option<Duration>,
    run: fn(&Fixtures) -> Outcome,
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("SEFT_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let min = |m: u64| Duration::from_secs(60 * m);
    let checks = [
        Check { id: 1, name: "sparsity restoration", budget: Some(min(5)), run: sparsity_restoration },
        Check { id: 2, name: "budget conservation", budget: Some(min(1)), run: budget_conservation },
        Check { id: 3, name: "top-k semantics oracle", budget: Some(min(2)), run: topk_oracle },
        Check { id: 4, name: "gradient correctness", budget: Some(min(2)), run: gradient_correctness },
        Check { id: 5, name: "N:M feasibility", budget: Some(min(3)), run: nm_feasibility },
        Check { id: 6, name: "recovery over frozen", budget: Some(min(30)), run: recovery },
        Check { id: 7, name: "constraint ablation", budget: None, run: constraint_ablation },
        Check { id: 8, name: "criterion ablation", budget: None, run: criterion_ablation },
        Check { id: 9, name: "budget parity", budget: None, run: budget_parity },
        Check { id: 10, name: "LoRA* pipeline", budget: None, run: lora_star },
        Check { id: 11, name: "determinism and format", budget: None, run: determinism },
    ];
    let fx = Fixtures::default();
    let mut failed = 0;
    let mut ran = 0;
    for c in &checks {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| (c.run)(&fx))).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let result = match result {
            Ok(d) if c.budget.is_some_and(|b| took > b) => {
                Err(format!("{d}; exceeded runtime budget of {}s", c.budget.unwrap().as_secs()))
            }
            r => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += usize::from(result.is_err());
        println!("criterion {:>2} {tag} {:<24} [{:>6.1}s] {detail}", c.id, c.name, took.as_secs_f64());
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
