//! Command-line front end. `run` returns the process exit code: 0 ok,
//! 1 usage or input error, 2 invariant violation, 3 numeric failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::adaptation::{Criterion, ValueSource};
use crate::checkpoint::{audit, Checkpoint};
use crate::data::{Dataset, TaskKind};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::pruner::{Pattern, PrunerKind};
use crate::train::{finetune, prune_checkpoint, pretrain, write_csv, Method, MetricsRow, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVARIANT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const OUT_DIR_ENV: &str = "SEFT_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "seft", version, about = "Sparse-delta fine-tuning of pruned language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a dense model from scratch on the configured task.
    Pretrain(RunArgs),
    /// Prune a dense checkpoint to the configured sparsity and pattern.
    Prune {
        #[command(flatten)]
        run: RunArgs,
        /// Dense input checkpoint; trains one first when absent.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Fine-tune a pruned checkpoint with the configured method.
    Finetune(RunArgs),
    /// Held-out perplexity and accuracy of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Fold mask and delta (or adapters) into explicit dense tensors.
    Merge { input: PathBuf, output: PathBuf },
    /// Per-tensor sparsity and N:M audit; exits 2 on any violation.
    Inspect {
        checkpoint: PathBuf,
        /// Pattern to check; defaults to the one stored in the checkpoint.
        #[arg(long)]
        pattern: Option<Pattern>,
        /// Also require every tensor's merged support to sit at this sparsity.
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Sweep one hyperparameter over several seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        grid: Grid,
        /// Seeds per grid point.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

#[derive(Clone, Debug, Default, Args)]
pub struct RunArgs {
    /// TOML config; flags below override it.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Output directory. Falls back to $SEFT_OUT_DIR, then the config, then `runs`.
    #[arg(short, long)]
    pub out_dir: Option<PathBuf>,
    /// Starting checkpoint.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Prune a dense base (or a freshly pretrained one) before fine-tuning.
    #[arg(long)]
    pub prune: bool,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub pruner: Option<PrunerArg>,
    #[arg(long)]
    pub pattern: Option<Pattern>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub frequency: Option<usize>,
    #[arg(long)]
    pub drop_rate: Option<f64>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any other config key, as `dotted.key=toml-value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    CharLm,
    Copy,
    ModularAdd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PrunerArg {
    Magnitude,
    Wanda,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    DropRate,
    Frequency,
    Lr,
    Criterion,
    Constraint,
    Source,
}

impl Grid {
    fn name(self) -> &'static str {
        match self {
            Grid::DropRate => "drop_rate",
            Grid::Frequency => "frequency",
            Grid::Lr => "lr",
            Grid::Criterion => "criterion",
            Grid::Constraint => "constraint",
            Grid::Source => "source",
        }
    }

    /// Grid points as (label, config edit).
    fn points(self) -> Vec<(String, Box<dyn Fn(&mut TrainConfig)>)> {
        fn pt(label: impl ToString, f: impl Fn(&mut TrainConfig) + 'static) -> (String, Box<dyn Fn(&mut TrainConfig)>) {
            (label.to_string(), Box::new(f))
        }
        match self {
            Grid::DropRate => [0.05, 0.1, 0.2, 0.3].into_iter().map(|a| pt(a, move |c| c.drop_rate = a)).collect(),
            Grid::Frequency => [10, 20, 40, 80].into_iter().map(|k| pt(k, move |c| c.frequency = k)).collect(),
            Grid::Lr => [1e-3, 3e-4, 1e-4].into_iter().map(|lr| pt(lr, move |c| c.lr = lr)).collect(),
            Grid::Criterion => vec![
                pt("sensitivity", |c| c.adapt.criterion = Criterion::Sensitivity),
                pt("magnitude", |c| c.adapt.criterion = Criterion::Magnitude),
            ],
            Grid::Constraint => vec![
                pt("unconstrained", |c| c.method = Method::Seft),
                pt("constrained", |c| c.method = Method::SeftConstrained),
            ],
            Grid::Source => vec![
                pt("merged", |c| c.adapt.source = ValueSource::Merged),
                pt("pretrained", |c| c.adapt.source = ValueSource::Pretrained),
            ],
        }
    }
}

/// Maps an error to its exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Invariant(_) | Error::Format { .. } | Error::Shape { .. } => EXIT_INVARIANT,
        Error::Numeric(_) | Error::NotScalar(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Pretrain(run) => {
            let cfg = resolve(&run)?;
            let dir = out_dir(&run, &cfg);
            let data = cfg.dataset()?;
            let (ckpt, rows) = pretrain(&cfg, &data)?;
            fs::create_dir_all(&dir)?;
            write_csv(&dir.join("pretrain.csv"), &MetricsRow::HEADER, &rows)?;
            ckpt.save(&dir.join("dense.seft"))?;
            println!("wrote {}", dir.join("dense.seft").display());
        }
        Command::Prune { run, input } => {
            let cfg = resolve(&run)?;
            let dir = out_dir(&run, &cfg);
            let data = cfg.dataset()?;
            let dense = match input.or(cfg.base.clone()) {
                Some(p) => Checkpoint::load(&p)?,
                None => pretrain(&cfg, &data)?.0,
            };
            let pruned = prune_checkpoint(&dense, &data, &cfg)?;
            fs::create_dir_all(&dir)?;
            pruned.save(&dir.join("pruned.seft"))?;
            println!("sparsity {:.6}", pruned.sparsity()?);
            println!("wrote {}", dir.join("pruned.seft").display());
        }
        Command::Finetune(run) => {
            let cfg = resolve(&run)?;
            let dir = out_dir(&run, &cfg);
            let data = cfg.dataset()?;
            let base = base_checkpoint(&cfg, &data, run.prune)?;
            let out = finetune(&base, &data, &cfg)?;
            out.write(&dir)?;
            println!(
                "method {} val ppl {:.4} accuracy {:.4} sparsity {:.6}",
                cfg.method.name(),
                out.final_eval.ppl,
                out.final_eval.accuracy,
                out.checkpoint.sparsity()?
            );
            println!("wrote {}", dir.display());
        }
        Command::Eval { checkpoint, run } => {
            let cfg = resolve(&run)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let data = cfg.dataset()?;
            let val = data.val_batches(cfg.batch_size, cfg.eval_samples)?;
            let e = evaluate(&ckpt.arch, &ckpt.merged_params()?, &val)?;
            println!("ppl {:.6}", e.ppl);
            println!("nll {:.6}", e.nll);
            println!("accuracy {:.6}", e.accuracy);
            println!("tokens {}", e.tokens);
        }
        Command::Merge { input, output } => {
            let merged = Checkpoint::load(&input)?.merge()?;
            merged.save(&output)?;
            println!("sparsity {:.6}", merged.sparsity()?);
        }
        Command::Inspect { checkpoint, pattern, rho } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (report, bad) = inspect_report(&ckpt, pattern, rho)?;
            print!("{report}");
            if bad > 0 {
                eprintln!("{bad} invariant violation(s)");
                return Ok(EXIT_INVARIANT);
            }
        }
        Command::Ablate { run, grid, seeds } => ablate(&run, grid, seeds)?,
    }
    Ok(EXIT_OK)
}

/// Audit text for `ckpt` and the number of violations found.
pub fn inspect_report(ckpt: &Checkpoint, pattern: Option<Pattern>, rho: Option<f64>) -> Result<(String, usize)> {
    let a = audit(ckpt, pattern)?;
    let mut out = String::new();
    let mut bad = a.violations();
    let pattern = a.pattern.map_or("none".to_string(), |p| p.to_string());
    writeln!(out, "pattern {pattern}").expect("write to string");
    writeln!(out, "{:<28} {:>9} {:>9} {:>9} {:>9} {:>9} {:>6}", "tensor", "numel", "nonzeros", "support", "delta", "sparsity", "nm_bad")
        .expect("write to string");
    for t in &a.tensors {
        let sparsity = 1.0 - t.support as f64 / t.numel as f64;
        writeln!(
            out,
            "{:<28} {:>9} {:>9} {:>9} {:>9} {:>9.6} {:>6}",
            t.name,
            t.numel,
            t.nonzeros,
            t.support,
            t.delta_entries,
            sparsity,
            t.nm_violations.len()
        )
        .expect("write to string");
        for off in &t.nm_violations {
            writeln!(out, "  violation: {} group at offset {off}", t.name).expect("write to string");
        }
        if let Some(rho) = rho {
            if (sparsity - rho).abs() > 1.0 / t.numel as f64 {
                writeln!(out, "  violation: {} sparsity {sparsity:.6} != {rho}", t.name).expect("write to string");
                bad += 1;
            }
        }
    }
    writeln!(out, "global sparsity {:.6}", a.global_sparsity).expect("write to string");
    writeln!(out, "delta entries {}", a.delta_entries).expect("write to string");
    Ok((out, bad))
}

#[derive(Serialize)]
struct AblationRow {
    grid: &'static str,
    value: String,
    seed: u64,
    val_ppl: f64,
    val_accuracy: f64,
    global_sparsity: f64,
    reactivation_fraction: f64,
}

fn ablate(run: &RunArgs, grid: Grid, seeds: u64) -> Result<()> {
    let cfg = resolve(run)?;
    let dir = out_dir(run, &cfg).join(format!("ablate-{}", grid.name()));
    let data = cfg.dataset()?;
    let base = base_checkpoint(&cfg, &data, true)?;
    let mut rows = Vec::new();
    for (label, edit) in grid.points() {
        for s in 0..seeds {
            let mut c = cfg.clone();
            edit(&mut c);
            c.seed = cfg.seed + s;
            c.validate()?;
            let out = finetune(&base, &data, &c)?;
            out.write(&dir.join(format!("{label}-seed{}", c.seed)))?;
            let (re, grown) = out
                .evolution
                .iter()
                .fold((0, 0), |(r, g), e| (r + e.reactivated, g + e.grows()));
            let row = AblationRow {
                grid: grid.name(),
                value: label.clone(),
                seed: c.seed,
                val_ppl: out.final_eval.ppl,
                val_accuracy: out.final_eval.accuracy,
                global_sparsity: out.checkpoint.sparsity()?,
                reactivation_fraction: if grown == 0 { 0.0 } else { re as f64 / grown as f64 },
            };
            println!("{} = {label} seed {}: val ppl {:.4}", grid.name(), c.seed, row.val_ppl);
            rows.push(row);
        }
    }
    write_csv(
        &dir.join("ablation.csv"),
        &["grid", "value", "seed", "val_ppl", "val_accuracy", "global_sparsity", "reactivation_fraction"],
        &rows,
    )?;
    println!("wrote {}", dir.join("ablation.csv").display());
    Ok(())
}

/// The configured base, pruned when it is dense and `prune` is set. With
/// no base at all and `prune` set, pretrains one first.
fn base_checkpoint(cfg: &TrainConfig, data: &Dataset, prune: bool) -> Result<Checkpoint> {
    let base = match &cfg.base {
        Some(p) => Checkpoint::load(p)?,
        None if prune => pretrain(cfg, data)?.0,
        None => return Err(Error::Config("no base checkpoint given (use --base, or --prune to train one)".into())),
    };
    if base.masks.is_empty() && prune {
        prune_checkpoint(&base, data, cfg)
    } else {
        Ok(base)
    }
}

fn out_dir(run: &RunArgs, cfg: &TrainConfig) -> PathBuf {
    run.out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Config file, then `--set` pairs, then the named flags.
pub fn resolve(run: &RunArgs) -> Result<TrainConfig> {
    let mut table = match &run.config {
        Some(p) => read_table(p)?,
        None => toml::Table::new(),
    };
    for kv in &run.sets {
        apply_set(&mut table, kv)?;
    }
    let mut cfg: TrainConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let r = run.clone();
    if let Some(v) = r.base {
        cfg.base = Some(v);
    }
    if let Some(v) = r.method {
        cfg.method = v;
    }
    if let Some(v) = r.task {
        cfg.data.task = match v {
            TaskArg::CharLm => TaskKind::CharLm,
            TaskArg::Copy => TaskKind::Copy,
            TaskArg::ModularAdd => TaskKind::ModularAdd,
        };
    }
    if let Some(v) = r.corpus {
        cfg.data.corpus = Some(v);
    }
    if let Some(v) = r.rho {
        cfg.rho = v;
    }
    if let Some(v) = r.pruner {
        cfg.pruner = match v {
            PrunerArg::Magnitude => PrunerKind::Magnitude,
            PrunerArg::Wanda => PrunerKind::Wanda,
        };
    }
    if let Some(v) = r.pattern {
        cfg.pattern = v;
    }
    if let Some(v) = r.rank {
        cfg.rank = v;
    }
    if let Some(v) = r.lr {
        cfg.lr = v;
    }
    if let Some(v) = r.steps {
        cfg.steps = v;
    }
    if let Some(v) = r.frequency {
        cfg.frequency = v;
    }
    if let Some(v) = r.drop_rate {
        cfg.drop_rate = v;
    }
    if let Some(v) = r.grad_accum {
        cfg.grad_accum = v;
    }
    if let Some(v) = r.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_table(path: &Path) -> Result<toml::Table> {
    fs::read_to_string(path)?
        .parse::<toml::Table>()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Sets `a.b.c=value` in `table`. The value is parsed as TOML and taken as
/// a bare string when that fails.
fn apply_set(table: &mut toml::Table, kv: &str) -> Result<()> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("`--set {kv}`: expected KEY=VALUE")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in `{kv}`")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_parses_typed_values_and_nests() {
        let mut t = toml::Table::new();
        apply_set(&mut t, "model.dim=40").unwrap();
        apply_set(&mut t, "data.task=copy").unwrap();
        apply_set(&mut t, "rho=0.5").unwrap();
        let cfg: TrainConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.model.dim, 40);
        assert_eq!(cfg.data.task, TaskKind::Copy);
        assert_eq!(cfg.rho, 0.5);
        assert!(apply_set(&mut toml::Table::new(), "novalue").is_err());
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "rho = 0.5\nsteps = 7\n[model]\ndim = 32\n").unwrap();
        let run = RunArgs {
            config: Some(p),
            steps: Some(9),
            sets: vec!["model.heads=2".into()],
            ..RunArgs::default()
        };
        let cfg = resolve(&run).unwrap();
        assert_eq!((cfg.rho, cfg.steps, cfg.model.dim, cfg.model.heads), (0.5, 9, 32, 2));
    }

    #[test]
    fn bad_config_is_a_usage_error() {
        let run = RunArgs {
            sets: vec!["rho=1.5".into()],
            ..RunArgs::default()
        };
        assert_eq!(exit_code(&resolve(&run).unwrap_err()), EXIT_USAGE);
        let run = RunArgs {
            sets: vec!["bogus=1".into()],
            ..RunArgs::default()
        };
        assert!(resolve(&run).is_err());
    }

    #[test]
    fn error_codes() {
        assert_eq!(exit_code(&Error::Invariant("x".into())), EXIT_INVARIANT);
        assert_eq!(exit_code(&Error::Numeric("x".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(run(["seft", "no-such-command"]), EXIT_USAGE);
        assert_eq!(run(["seft", "--help"]), EXIT_OK);
    }
}
