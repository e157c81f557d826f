//! Pretraining, pruning and the fine-tuning loop for every method, plus
//! the CSV outputs.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{adaptation_step, merged_sparsity, AdaptConfig, AdaptationReport};
use crate::baselines::{lora_loss_and_grads, merge_and_reprune, LoraSet};
use crate::checkpoint::Checkpoint;
use crate::data::{build_dataset, DataConfig, Dataset, TokenBatch};
use crate::delta::{allocate_budget, merged_params, DeltaTensor, SparseDelta};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::evolution::{evolve_topology, DropScope, EvolutionReport, EvolutionSchedule, GradAccumulator};
use crate::model::{build_transformer, lm_loss_and_grads, Architecture, Input, ModelConfig, ParamTree};
use crate::optim::{AdamW, Moments, Optimizer};
use crate::pruner::{keep_count, prune, validate_rho, MaskSet, Pattern, PrunerKind};
use crate::topk::top_k;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Seft,
    /// Growth limited to coordinates already active in the mask.
    SeftConstrained,
    Lora,
    /// LoRA, then merge and re-prune to the target sparsity.
    LoraStar,
    /// No fine-tuning: evaluate the pruned model as is.
    Frozen,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Seft,
        Method::SeftConstrained,
        Method::Lora,
        Method::LoraStar,
        Method::Frozen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Seft => "seft",
            Method::SeftConstrained => "seft-constrained",
            Method::Lora => "lora",
            Method::LoraStar => "lora-star",
            Method::Frozen => "frozen",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Peak rate; decays by cosine to a tenth of it.
    pub lr: f64,
    pub batch_size: usize,
    pub eval_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 3e-3,
            batch_size: 16,
            eval_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub method: Method,
    /// Target fraction of zero coordinates in prunable matrices. Under an
    /// N:M pattern the pattern's own sparsity takes precedence.
    pub rho: f64,
    pub pruner: PrunerKind,
    pub pattern: Pattern,
    pub calibration_batches: usize,
    /// LoRA rank, and the rank whose parameter count sizes the delta.
    pub rank: usize,
    pub lr: f64,
    /// Decay the learning rate to zero over the run by a half cosine.
    pub lr_decay: bool,
    /// Optimizer steps.
    pub steps: usize,
    /// Steps between topology updates.
    pub frequency: usize,
    pub drop_rate: f64,
    pub cosine: bool,
    pub drop_scope: DropScope,
    /// Micro-batches averaged per optimizer step.
    pub grad_accum: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Cap on validation samples per evaluation; all when absent.
    pub eval_samples: Option<usize>,
    pub seed: u64,
    pub adapt: AdaptConfig,
    /// Starting checkpoint (dense or pruned).
    pub base: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            method: Method::Seft,
            rho: 0.6,
            pruner: PrunerKind::Wanda,
            pattern: Pattern::Unstructured,
            calibration_batches: 8,
            rank: 32,
            lr: 1e-3,
            lr_decay: true,
            steps: 1000,
            frequency: 10,
            drop_rate: 0.2,
            cosine: true,
            drop_scope: DropScope::MaskActive,
            grad_accum: 8,
            batch_size: 8,
            eval_every: 100,
            eval_samples: None,
            seed: 0,
            adapt: AdaptConfig::default(),
            base: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        validate_rho(self.rho)?;
        self.pattern.validate()?;
        self.schedule().validate()?;
        let positive = [
            ("rank", self.rank),
            ("grad_accum", self.grad_accum),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("calibration_batches", self.calibration_batches),
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("pretrain.eval_every", self.pretrain.eval_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be at least 1")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.pretrain.lr > 0.0 && self.pretrain.lr.is_finite()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if let Some(s) = self.pattern.implied_sparsity() {
            if (s - self.rho).abs() > 1e-9 {
                log::warn!("pattern {} fixes sparsity at {s}; ignoring rho = {}", self.pattern, self.rho);
            }
        }
        Ok(())
    }

    /// Sparsity the merged model is held to.
    pub fn target_rho(&self) -> f64 {
        self.pattern.implied_sparsity().unwrap_or(self.rho)
    }

    pub fn schedule(&self) -> EvolutionSchedule {
        EvolutionSchedule {
            drop_rate: self.drop_rate,
            total_steps: self.steps,
            frequency: self.frequency,
            structured: self.method == Method::SeftConstrained || self.pattern.is_structured(),
            cosine: self.cosine,
            drop_scope: self.drop_scope,
        }
    }

    /// Optimizer for 1-based step `t`.
    pub fn optimizer(&self, t: usize) -> Optimizer {
        let lr = if self.lr_decay && self.steps > 0 {
            let progress = (t.saturating_sub(1)) as f64 / self.steps as f64;
            self.lr * 0.5 * (1.0 + (PI * progress).cos())
        } else {
            self.lr
        };
        Optimizer::AdamW(AdamW { lr, ..AdamW::default() })
    }

    pub fn dataset(&self) -> Result<Dataset> {
        build_dataset(&self.data, self.model.context)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    #[default]
    Eval,
    Evolve,
    Adapt,
    /// Evaluation of the checkpoint the run returns.
    Final,
}

/// One line of `metrics.csv`. Fields that do not apply to a row kind are
/// left empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub kind: RowKind,
    pub train_loss: Option<f64>,
    pub val_ppl: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub global_sparsity: Option<f64>,
    pub tau: Option<usize>,
    pub drops: Option<usize>,
    pub grows: Option<usize>,
    pub reactivation_fraction: Option<f64>,
    pub pruned_base: Option<usize>,
    pub pruned_delta: Option<usize>,
    pub reseated: Option<usize>,
    pub delta_entries: Option<usize>,
}

impl MetricsRow {
    pub const HEADER: [&'static str; 14] = [
        "step",
        "kind",
        "train_loss",
        "val_ppl",
        "val_accuracy",
        "global_sparsity",
        "tau",
        "drops",
        "grows",
        "reactivation_fraction",
        "pruned_base",
        "pruned_delta",
        "reseated",
        "delta_entries",
    ];

    fn eval(step: usize, kind: RowKind, train_loss: Option<f64>, e: &EvalResult, sparsity: f64) -> Self {
        Self {
            step,
            kind,
            train_loss,
            val_ppl: Some(e.ppl),
            val_accuracy: Some(e.accuracy),
            global_sparsity: Some(sparsity),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorSparsityRow {
    pub step: usize,
    pub tensor: String,
    pub sparsity: f64,
}

impl TensorSparsityRow {
    pub const HEADER: [&'static str; 3] = ["step", "tensor", "sparsity"];
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingRow {
    pub step: usize,
    pub seconds: f64,
}

impl TimingRow {
    pub const HEADER: [&'static str; 2] = ["step", "seconds"];
}

/// State handed to an observer after every evolve + adapt cycle.
pub struct CycleView<'a> {
    pub step: usize,
    pub theta: &'a ParamTree<f32>,
    pub masks: &'a MaskSet,
    pub delta: &'a SparseDelta<f32>,
    pub evolution: &'a EvolutionReport,
    pub adaptation: &'a AdaptationReport,
}

pub type Observer<'o> = dyn FnMut(&CycleView<'_>) -> Result<()> + 'o;

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub tensor_sparsity: Vec<TensorSparsityRow>,
    pub timing: Vec<TimingRow>,
    pub evolution: Vec<EvolutionReport>,
    pub adaptation: Vec<AdaptationReport>,
    pub final_eval: EvalResult,
}

impl RunOutput {
    /// Writes `metrics.csv`, `tensor_sparsity.csv`, `timing.csv` and
    /// `model.seft` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_csv(&dir.join("metrics.csv"), &MetricsRow::HEADER, &self.metrics)?;
        write_csv(&dir.join("tensor_sparsity.csv"), &TensorSparsityRow::HEADER, &self.tensor_sparsity)?;
        write_csv(&dir.join("timing.csv"), &TimingRow::HEADER, &self.timing)?;
        self.checkpoint.save(&dir.join("model.seft"))
    }
}

/// CSV with an explicit header line, so even an empty table has one.
pub fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn numeric_at(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
        other => other,
    }
}

fn sample_micro(data: &Dataset, rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> Result<Vec<TokenBatch>> {
    (0..cfg.grad_accum).map(|_| data.sample_batch(rng, cfg.batch_size)).collect()
}

/// Mean loss and mean dense gradient of every prunable weight over
/// `batches`.
fn mean_prunable_grads(
    arch: &Architecture,
    weights: &ParamTree<f32>,
    batches: &[TokenBatch],
) -> Result<(f64, IndexMap<String, Vec<f32>>)> {
    let mut loss = 0.0;
    let mut sum: IndexMap<String, Vec<f32>> = IndexMap::new();
    for b in batches {
        let r = lm_loss_and_grads(arch, weights, b, |_, p| p.prunable)?;
        loss += r.loss;
        for (name, g) in r.grads {
            match sum.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                None => {
                    sum.insert(name, g);
                }
            }
        }
    }
    let n = batches.len() as f32;
    for g in sum.values_mut() {
        g.iter_mut().for_each(|x| *x /= n);
    }
    Ok((loss / batches.len() as f64, sum))
}

fn check_finite(what: &str, xs: &[f32], step: usize) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("step {step}: non-finite values in {what}")))
    }
}

/// Dense next-token training of every parameter from a fresh
/// initialization.
pub fn pretrain(cfg: &TrainConfig, data: &Dataset) -> Result<(Checkpoint, Vec<MetricsRow>)> {
    let model = build_transformer::<f32>(&cfg.model)?;
    let arch = model.arch.clone();
    let mut params = model.params;
    let mut state: IndexMap<String, Moments<f32>> =
        params.iter().map(|(k, p)| (k.to_string(), Moments::zeros(p.tensor.numel()))).collect();
    let pc = &cfg.pretrain;
    let val = data.val_batches(pc.batch_size, cfg.eval_samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9);
    let mut rows = Vec::new();
    let mut window = (0.0, 0usize);
    for t in 1..=pc.steps {
        let batch = data.sample_batch(&mut rng, pc.batch_size)?;
        let r = lm_loss_and_grads(&arch, &params, &batch, |_, _| true).map_err(numeric_at(t))?;
        window.0 += r.loss;
        window.1 += 1;
        let progress = t as f64 / pc.steps as f64;
        let lr = pc.lr * (0.1 + 0.45 * (1.0 + (PI * progress).cos()));
        let opt = Optimizer::AdamW(AdamW { lr, ..AdamW::default() });
        for (name, g) in r.grads {
            let p = params.get_mut(&name)?;
            let s = state.get_mut(&name).expect("state per param");
            opt.update(p.tensor.data_mut(), &g, &mut s.m, &mut s.v, t as u64)?;
            check_finite(&name, p.tensor.data(), t)?;
        }
        if t % pc.eval_every == 0 || t == pc.steps {
            let e = evaluate(&arch, &params, &val)?;
            log::info!("pretrain step {t}: loss {:.4} val ppl {:.3}", window.0 / window.1 as f64, e.ppl);
            rows.push(MetricsRow::eval(t, RowKind::Eval, Some(window.0 / window.1 as f64), &e, 0.0));
            window = (0.0, 0);
        }
    }
    Ok((Checkpoint::dense(arch, params), rows))
}

/// Masks for the (merged) weights of `dense`, scored on the leading
/// training batches. The returned checkpoint retains the dense weights.
pub fn prune_checkpoint(dense: &Checkpoint, data: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    let params = dense.merged_params()?;
    let calib = data.leading_batches(cfg.batch_size, cfg.calibration_batches)?;
    let inputs: Vec<Input<f32>> = calib.iter().map(Input::Tokens).collect();
    let masks = prune(&dense.arch, &params, &inputs, cfg.pruner, cfg.rho, cfg.pattern)?;
    Ok(Checkpoint {
        arch: dense.arch.clone(),
        pattern: cfg.pattern,
        params,
        masks,
        delta: SparseDelta::new(),
        adapters: IndexMap::new(),
    })
}

pub fn finetune(base: &Checkpoint, data: &Dataset, cfg: &TrainConfig) -> Result<RunOutput> {
    finetune_observed(base, data, cfg, &mut |_| Ok(()))
}

/// Runs `cfg.method` from the pruned checkpoint `base`. `observer` sees the
/// state after every evolve + adapt cycle; an error from it aborts the run.
pub fn finetune_observed(
    base: &Checkpoint,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<RunOutput> {
    cfg.validate()?;
    if base.masks.is_empty() {
        return Err(Error::Config("fine-tuning needs a pruned checkpoint".into()));
    }
    if base.delta.total_entries() > 0 || !base.adapters.is_empty() {
        return Err(Error::Config("base checkpoint already carries an update; merge it first".into()));
    }
    for name in base.params.prunable_names() {
        if !base.masks.contains_key(&name) {
            return Err(Error::Config(format!("no mask for `{name}`")));
        }
    }
    if cfg.steps == 0 {
        return run_frozen(base, data, cfg);
    }
    match cfg.method {
        Method::Seft | Method::SeftConstrained => run_seft(base, data, cfg, observer),
        Method::Lora | Method::LoraStar => run_lora(base, data, cfg),
        Method::Frozen => run_frozen(base, data, cfg),
    }
}

fn final_row(out_step: usize, ckpt: &Checkpoint, val: &[TokenBatch]) -> Result<(MetricsRow, EvalResult)> {
    let e = evaluate(&ckpt.arch, &ckpt.merged_params()?, val)?;
    let mut row = MetricsRow::eval(out_step, RowKind::Final, None, &e, ckpt.sparsity()?);
    row.delta_entries = Some(ckpt.delta.total_entries());
    Ok((row, e))
}

fn run_frozen(base: &Checkpoint, data: &Dataset, cfg: &TrainConfig) -> Result<RunOutput> {
    let val = data.val_batches(cfg.batch_size, cfg.eval_samples)?;
    let (row, e) = final_row(0, base, &val)?;
    Ok(RunOutput {
        checkpoint: base.clone(),
        metrics: vec![row],
        tensor_sparsity: Vec::new(),
        timing: Vec::new(),
        evolution: Vec::new(),
        adaptation: Vec::new(),
        final_eval: e,
    })
}

/// Per-tensor delta budgets, capped at the tensor's keep budget so the
/// delta always fits inside the post-adaptation support.
fn capped_delta(theta: &ParamTree<f32>, masks: &MaskSet, cfg: &TrainConfig) -> Result<SparseDelta<f32>> {
    let budgets = allocate_budget(theta, cfg.rank)?;
    let mut delta = SparseDelta::new();
    for (name, b) in budgets {
        let w = theta.tensor(&name)?;
        let cap = keep_count(cfg.target_rho(), w.numel()).min(masks[&name].count_ones());
        if b > cap {
            log::warn!("`{name}`: delta budget {b} capped at {cap}");
        }
        delta.insert(name, DeltaTensor::new(w.shape().to_vec(), b.min(cap))?)?;
    }
    Ok(delta)
}

/// Places every tensor's initial entries at the mask-active coordinates
/// with the largest gradient magnitude.
fn seed_delta(delta: &mut SparseDelta<f32>, masks: &MaskSet, grads: &IndexMap<String, Vec<f32>>) -> Result<()> {
    for (name, d) in delta.iter_mut() {
        let g = grads.get(name).ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        let m = &masks[name];
        let cands = (0..g.len())
            .filter(|&i| m.get(i))
            .map(|i| (g[i].abs() as f64, i as u32))
            .collect();
        d.insert_entries(&top_k(cands, d.budget()))?;
    }
    Ok(())
}

fn run_seft(base: &Checkpoint, data: &Dataset, cfg: &TrainConfig, observer: &mut Observer<'_>) -> Result<RunOutput> {
    let arch = &base.arch;
    let theta = &base.params;
    let mut masks = base.masks.clone();
    let rho = cfg.target_rho();
    let schedule = cfg.schedule();
    let val = data.val_batches(cfg.batch_size, cfg.eval_samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut delta = capped_delta(theta, &masks, cfg)?;
    if cfg.steps > 0 {
        let warm = data.leading_batches(cfg.batch_size, cfg.grad_accum)?;
        let merged = merged_params(theta, &masks, &delta)?;
        let (_, g) = mean_prunable_grads(arch, &merged, &warm).map_err(numeric_at(0))?;
        seed_delta(&mut delta, &masks, &g)?;
    }

    let mut out = RunOutput {
        checkpoint: base.clone(),
        metrics: Vec::new(),
        tensor_sparsity: Vec::new(),
        timing: Vec::new(),
        evolution: Vec::new(),
        adaptation: Vec::new(),
        final_eval: EvalResult::default(),
    };
    let start_eval = evaluate(arch, &merged_params(theta, &masks, &delta)?, &val)?;
    let mut row = MetricsRow::eval(0, RowKind::Eval, None, &start_eval, merged_sparsity(&masks, &delta).1);
    row.delta_entries = Some(delta.total_entries());
    out.metrics.push(row);

    let mut acc = GradAccumulator::for_prunable(theta);
    let mut window = (0.0, 0usize);
    for t in 1..=cfg.steps {
        let clock = Instant::now();
        let micro = sample_micro(data, &mut rng, cfg)?;
        let merged = merged_params(theta, &masks, &delta)?;
        let (loss, grads) = mean_prunable_grads(arch, &merged, &micro).map_err(numeric_at(t))?;
        window.0 += loss;
        window.1 += 1;
        for (name, g) in &grads {
            acc.accumulate(name, g)?;
        }
        acc.tick();
        let support = delta.gather_grads(grads.iter().map(|(n, g)| (n.as_str(), g.as_slice())))?;
        delta.optimizer_step(&support, &cfg.optimizer(t))?;
        for (name, d) in delta.iter() {
            check_finite(name, d.values(), t)?;
        }

        if schedule.is_update_step(t) {
            let ev = evolve_topology(&mut delta, &acc, &masks, &schedule, t)?;
            let ad = adaptation_step(theta, &mut masks, &mut delta, &acc, rho, &ev.grown, &cfg.adapt, t)?;
            acc.reset();
            observer(&CycleView {
                step: t,
                theta,
                masks: &masks,
                delta: &delta,
                evolution: &ev,
                adaptation: &ad,
            })?;
            out.metrics.push(MetricsRow {
                step: t,
                kind: RowKind::Evolve,
                tau: Some(ev.tau),
                drops: Some(ev.drops()),
                grows: Some(ev.grows()),
                reactivation_fraction: Some(ev.reactivation_fraction()),
                delta_entries: Some(delta.total_entries()),
                ..MetricsRow::default()
            });
            out.metrics.push(MetricsRow {
                step: t,
                kind: RowKind::Adapt,
                global_sparsity: Some(ad.global_sparsity),
                pruned_base: Some(ad.pruned_base),
                pruned_delta: Some(ad.pruned_delta),
                reseated: Some(ad.reseated),
                delta_entries: Some(delta.total_entries()),
                ..MetricsRow::default()
            });
            out.tensor_sparsity.extend(ad.sparsity.iter().map(|(k, &s)| TensorSparsityRow {
                step: t,
                tensor: k.clone(),
                sparsity: s,
            }));
            out.evolution.push(ev);
            out.adaptation.push(ad);
        }

        if t % cfg.eval_every == 0 || t == cfg.steps {
            let merged = merged_params(theta, &masks, &delta)?;
            let e = evaluate(arch, &merged, &val)?;
            let mut row = MetricsRow::eval(t, RowKind::Eval, Some(window.0 / window.1 as f64), &e, merged_sparsity(&masks, &delta).1);
            row.delta_entries = Some(delta.total_entries());
            log::info!("step {t}: loss {:.4} val ppl {:.3}", window.0 / window.1 as f64, e.ppl);
            out.metrics.push(row);
            window = (0.0, 0);
        }
        out.timing.push(TimingRow {
            step: t,
            seconds: clock.elapsed().as_secs_f64(),
        });
    }

    out.checkpoint = Checkpoint {
        arch: arch.clone(),
        pattern: base.pattern,
        params: theta.clone(),
        masks,
        delta,
        adapters: IndexMap::new(),
    };
    let (row, e) = final_row(cfg.steps, &out.checkpoint, &val)?;
    out.metrics.push(row);
    out.final_eval = e;
    Ok(out)
}

fn run_lora(base: &Checkpoint, data: &Dataset, cfg: &TrainConfig) -> Result<RunOutput> {
    let arch = &base.arch;
    let masked = merged_params(&base.params, &base.masks, &SparseDelta::new())?;
    let mut lora = LoraSet::init(&masked, cfg.rank, cfg.seed)?;
    let val = data.val_batches(cfg.batch_size, cfg.eval_samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut metrics = Vec::new();
    let mut timing = Vec::new();

    let sparsity_of = |p: &ParamTree<f32>| {
        let (nz, total) = p
            .named_prunable()
            .iter()
            .fold((0, 0), |(a, b), (_, w)| (a + w.count_nonzero(), b + w.numel()));
        1.0 - nz as f64 / total as f64
    };
    let e0 = evaluate(arch, &masked, &val)?;
    metrics.push(MetricsRow::eval(0, RowKind::Eval, None, &e0, sparsity_of(&masked)));

    let mut window = (0.0, 0usize);
    for t in 1..=cfg.steps {
        let clock = Instant::now();
        let micro = sample_micro(data, &mut rng, cfg)?;
        let mut sum: IndexMap<String, (Vec<f32>, Vec<f32>)> = IndexMap::new();
        let mut loss = 0.0;
        for b in &micro {
            let (l, g) = lora_loss_and_grads(arch, &masked, &lora, b).map_err(numeric_at(t))?;
            loss += l;
            for (name, (ga, gb)) in g {
                match sum.get_mut(&name) {
                    Some((sa, sb)) => {
                        sa.iter_mut().zip(&ga).for_each(|(a, x)| *a += x);
                        sb.iter_mut().zip(&gb).for_each(|(a, x)| *a += x);
                    }
                    None => {
                        sum.insert(name, (ga, gb));
                    }
                }
            }
        }
        let n = micro.len() as f32;
        for (ga, gb) in sum.values_mut() {
            ga.iter_mut().chain(gb.iter_mut()).for_each(|x| *x /= n);
        }
        window.0 += loss / micro.len() as f64;
        window.1 += 1;
        lora.optimizer_step(&sum, &cfg.optimizer(t))?;
        for (name, ad) in lora.iter() {
            check_finite(name, ad.a.data(), t)?;
            check_finite(name, ad.b.data(), t)?;
        }
        if t % cfg.eval_every == 0 || t == cfg.steps {
            let merged = lora.merged(&masked)?;
            let e = evaluate(arch, &merged, &val)?;
            metrics.push(MetricsRow::eval(t, RowKind::Eval, Some(window.0 / window.1 as f64), &e, sparsity_of(&merged)));
            window = (0.0, 0);
        }
        timing.push(TimingRow {
            step: t,
            seconds: clock.elapsed().as_secs_f64(),
        });
    }

    let checkpoint = if cfg.method == Method::LoraStar {
        let calib = data.leading_batches(cfg.batch_size, cfg.calibration_batches)?;
        let inputs: Vec<Input<f32>> = calib.iter().map(Input::Tokens).collect();
        let (params, masks) = merge_and_reprune(arch, &masked, &lora, &inputs, cfg.target_rho(), cfg.pattern)?;
        Checkpoint {
            arch: arch.clone(),
            pattern: cfg.pattern,
            params,
            masks,
            delta: SparseDelta::new(),
            adapters: IndexMap::new(),
        }
    } else {
        Checkpoint {
            arch: arch.clone(),
            pattern: base.pattern,
            params: masked,
            masks: base.masks.clone(),
            delta: SparseDelta::new(),
            adapters: lora.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    };
    let (row, e) = final_row(cfg.steps, &checkpoint, &val)?;
    metrics.push(row);
    Ok(RunOutput {
        checkpoint,
        metrics,
        tensor_sparsity: Vec::new(),
        timing,
        evolution: Vec::new(),
        adaptation: Vec::new(),
        final_eval: e,
    })
}
