use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use modtune_autodiff::{Float, OpKind};
use modtune_core::data::{self, Dataset, DatasetKind, BOS};
use modtune_core::gradcheck::{GradcheckConfig, GradcheckReport};
use modtune_core::inference::{self, AccelerationReport, CacheMode, Divergence, GenConfig};
use modtune_core::metrics::{self, MetricsRecord, MetricsWriter};
use modtune_core::{checkpoint, lora, trainer, ModHead, ModelConfig, ParamGroup, Preset, TransformerModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Precision, RunConfig};
use crate::error::{CliError, Result};
use crate::output::{write_file, write_json, StagedDir};
use crate::{AnalyzeArgs, EvalArgs, GenerateArgs, GradcheckArgs, SweepArgs, TrainArgs};

/// Environment variable capping the sweep's worker threads.
pub const THREADS_ENV: &str = "MODTUNE_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
}

/// Written as `summary.json` in every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    pub preset: Preset,
    pub seed: u64,
    pub precision: String,
    /// Exits of the routed head, when there is one.
    pub k: Option<usize>,
    pub top_k: Option<usize>,
    pub lambda: Option<f64>,
    pub steps: usize,
    pub tokens_seen: u64,
    pub wall_clock_secs: f64,
    pub params: BTreeMap<String, ParamCount>,
    pub total_params: usize,
    pub trainable_params: usize,
    /// Trainable parameters of the routed head.
    pub mod_params: usize,
    /// Trainable count of adapters on every layer except the top `k`.
    pub reference_trainable_params: Option<usize>,
    /// Trainables beyond the reference: the routed head plus adapters on the top `k`
    /// layers.
    pub added_params: Option<usize>,
    /// `added_params` relative to the reference, in percent.
    pub plus_params_pct: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub final_eval: Option<MetricsRecord>,
    pub answer_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std =
            if values.len() > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Stat { mean, std, values }
    }

    fn collect(values: impl Iterator<Item = Option<f64>>) -> Option<Self> {
        let v: Option<Vec<f64>> = values.collect();
        v.filter(|v| !v.is_empty()).map(Stat::of)
    }
}

/// Written as `aggregate.json` by `tune`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub preset: Preset,
    pub trainable_params: usize,
    pub plus_params_pct: Option<f64>,
    pub final_train_loss: Option<Stat>,
    pub final_eval_loss: Option<Stat>,
    pub answer_accuracy: Option<Stat>,
    pub wall_clock_secs: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub sequences: usize,
    pub record: MetricsRecord,
    pub answer_accuracy: Option<f64>,
    pub params: BTreeMap<String, ParamCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub prompt: String,
    pub completion: String,
    pub tokens: Vec<usize>,
    /// Completion with every layer computed and no cache.
    pub baseline_completion: String,
    pub early_exit: bool,
    pub acceleration: AccelerationReport,
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub top_k: usize,
    pub dense: bool,
    pub steps: usize,
    pub final_train_loss: f64,
    pub final_eval_loss: Option<f64>,
    /// Layer forwards of full computation over those of early exit.
    pub layer_ratio: Option<f64>,
    pub trainable_params: usize,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRun {
    pub name: String,
    pub report: GradcheckReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOutcome {
    pub checks: Vec<GradcheckRun>,
    /// A deliberately corrupted backward rule that the check must flag.
    pub negative_control: GradcheckRun,
    pub negative_control_detected: bool,
    pub passed: bool,
    pub elapsed_secs: f64,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn parse_top_k(s: &str) -> Result<Option<usize>> {
    if s == "none" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| CliError::Usage(format!("--top-k expects an integer or none, got {s:?}")))
}

/// Replaces the architecture with `model`, resizing anything that depends on depth.
fn adopt_model(cfg: &mut RunConfig, model: &ModelConfig) -> Result<()> {
    cfg.model = model.clone();
    cfg.lora.layer_mask = vec![true; model.n_layers];
    cfg.validate()
}

fn apply_train_overrides(cfg: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    if let Some(p) = &a.preset {
        cfg.train.preset = p.parse().map_err(|e| CliError::Usage(format!("{e}")))?;
    }
    if let Some(k) = a.k {
        cfg.head.k = k;
    }
    if let Some(t) = &a.top_k {
        cfg.head.top_k = parse_top_k(t)?;
    }
    if let Some(l) = a.lambda {
        cfg.head.lambda = l;
    }
    if a.max_steps.is_some() {
        cfg.train.max_steps = a.max_steps;
    }
    cfg.train.probe_k = cfg.head.k;
    cfg.validate()
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    Ok(Dataset::load(&cfg.data)?)
}

fn check_fits(data: &Dataset, model: &ModelConfig) -> Result<()> {
    let len = data.max_len();
    if len > model.max_seq_len {
        return Err(CliError::Usage(format!(
            "dataset has sequences of {len} tokens, model.max_seq_len is {}",
            model.max_seq_len
        )));
    }
    Ok(())
}

/// Commits on success, and also after a numerical failure so the abort record
/// survives. Other failures discard the partial output.
fn finish<R>(staged: StagedDir, result: Result<R>) -> Result<R> {
    match result {
        Ok(r) => {
            staged.commit()?;
            Ok(r)
        }
        Err(e) if e.exit_code() == 2 => {
            staged.commit()?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

/// Prints to stdout; a closed pipe is not an error.
fn print_json(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::io("stdout", e)),
        _ => Ok(()),
    }
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

fn breakdown<T: Float>(model: &TransformerModel<T>) -> BTreeMap<String, ParamCount> {
    trainer::param_breakdown(model).into_iter().map(|(g, (total, trainable))| (g, ParamCount { total, trainable })).collect()
}

/// Adds adapters and the routed head that `cfg.train.preset` calls for.
pub fn assemble<T: Float>(base: &TransformerModel<T>, cfg: &RunConfig) -> Result<(TransformerModel<T>, Option<ModHead>)> {
    let mut model = base.clone();
    let preset = cfg.train.preset;
    if preset.uses_lora() {
        let mut l = cfg.lora.clone();
        l.layer_mask = vec![true; model.n_layers()];
        if preset.excludes_top() {
            l = l.excluding_top(cfg.head.k);
        }
        lora::inject(&mut model, l)?;
    }
    let head = if preset.uses_head() { Some(ModHead::attach(&mut model, cfg.head.clone())?) } else { None };
    Ok((model, head))
}

fn base_model<T: Float>(cfg: &mut RunConfig, path: Option<&Path>) -> Result<TransformerModel<T>> {
    let Some(path) = path else {
        return Ok(TransformerModel::new(cfg.model.clone())?);
    };
    let (model, head) = checkpoint::load::<T>(path)?;
    if head.is_some() || model.lora_config().is_some() {
        return Err(CliError::Usage(format!("{} is a tuned checkpoint; start from a base checkpoint", path.display())));
    }
    adopt_model(cfg, model.config())?;
    Ok(model)
}

/// Trainables outside the adapters of layers `1..=n-k`.
fn added_params<T: Float>(model: &TransformerModel<T>, k: usize) -> usize {
    let lowest_top = model.n_layers() - k + 1;
    model
        .params
        .iter()
        .filter(|(_, p)| p.trainable)
        .filter(|(_, p)| {
            p.group != ParamGroup::Lora
                || p.name.split('.').nth(1).and_then(|l| l.parse::<usize>().ok()).is_some_and(|l| l >= lowest_top)
        })
        .map(|(_, p)| p.value.numel())
        .sum()
}

struct RunOptions {
    command: &'static str,
    save_checkpoint: bool,
    accuracy: bool,
}

fn run_training<T: Float>(
    opts: &RunOptions,
    cfg: &RunConfig,
    model: &mut TransformerModel<T>,
    head: Option<&ModHead>,
    data: &Dataset,
    dir: &Path,
) -> Result<RunSummary> {
    let routes = head.map_or(cfg.train.probe_k, ModHead::k);
    let mut writer = MetricsWriter::create(&dir.join("metrics.csv"), routes)?;
    let outcome = trainer::train(model, head, &data.train, &data.eval, &cfg.train, |r| writer.write(r))?;
    if opts.save_checkpoint {
        checkpoint::save(&dir.join("checkpoint.bin"), model, head)?;
    }
    let synthetic = !matches!(data.kind, DatasetKind::TextCorpus { .. });
    let answer_accuracy = if opts.accuracy && synthetic && cfg.eval_samples > 0 {
        Some(inference::answer_accuracy(model, head, &data.eval, cfg.eval_samples)?)
    } else {
        None
    };
    let trainable = model.count_params(true, None);
    let mod_params =
        model.count_params(true, Some(ParamGroup::ModRouting)) + model.count_params(true, Some(ParamGroup::ModNorms));
    let reference =
        (opts.command != "pretrain").then(|| cfg.lora.per_layer_params(&cfg.model) * (cfg.model.n_layers - cfg.head.k));
    let added = reference.map(|_| added_params(model, cfg.head.k));
    let summary = RunSummary {
        command: opts.command.into(),
        preset: cfg.train.preset,
        seed: cfg.train.seed,
        precision: precision_name(cfg.precision).into(),
        k: head.map(ModHead::k),
        top_k: head.and_then(|h| h.config().top_k),
        lambda: head.map(|h| h.config().lambda),
        steps: outcome.steps,
        tokens_seen: outcome.tokens_seen,
        wall_clock_secs: outcome.wall_clock_secs,
        params: breakdown(model),
        total_params: model.count_params(false, None),
        trainable_params: trainable,
        mod_params,
        reference_trainable_params: reference,
        added_params: added,
        plus_params_pct: reference.filter(|&r| r > 0).zip(added).map(|(r, a)| 100.0 * a as f64 / r as f64),
        final_train_loss: outcome.final_loss(),
        final_eval: outcome.evals().last().cloned(),
        answer_accuracy,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn pretrain(a: &TrainArgs) -> Result<()> {
    if a.checkpoint.is_some() || a.preset.is_some() || a.top_k.is_some() || a.lambda.is_some() {
        return Err(CliError::Usage(
            "pretrain trains every parameter and takes no --checkpoint, --preset, --top-k or --lambda".into(),
        ));
    }
    if a.seeds.len() > 1 {
        return Err(CliError::Usage("pretrain takes at most one --seed".into()));
    }
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.train.preset = Preset::FullBaseline;
    apply_train_overrides(&mut cfg, a)?;
    if let Some(&s) = a.seeds.first() {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    let data = load_data(&cfg)?;
    check_fits(&data, &cfg.model)?;
    let staged = StagedDir::create(&a.out, a.force)?;
    write_json(&staged.path().join("config.json"), &cfg)?;
    let opts = RunOptions { command: "pretrain", save_checkpoint: true, accuracy: true };
    let result = match cfg.precision {
        Precision::F32 => pretrain_with::<f32>(&opts, &cfg, &data, staged.path()),
        Precision::F64 => pretrain_with::<f64>(&opts, &cfg, &data, staged.path()),
    };
    let summary = finish(staged, result)?;
    print_json(&summary)
}

fn pretrain_with<T: Float>(opts: &RunOptions, cfg: &RunConfig, data: &Dataset, dir: &Path) -> Result<RunSummary> {
    let mut model = TransformerModel::<T>::new(cfg.model.clone())?;
    run_training(opts, cfg, &mut model, None, data, dir)
}

/// Per-seed copy of `cfg`: the seed drives batch order and adapter and router init.
fn seeded(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.train.seed = seed;
    c.lora.seed = cfg.lora.seed.wrapping_add(seed);
    c.head.seed = cfg.head.seed.wrapping_add(seed);
    c
}

pub fn tune(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    apply_train_overrides(&mut cfg, a)?;
    let seeds = if a.seeds.is_empty() { vec![cfg.train.seed] } else { a.seeds.clone() };
    let mut unique = seeds.clone();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() != seeds.len() {
        return Err(CliError::Usage("--seed values must be distinct".into()));
    }
    let data = load_data(&cfg)?;
    let staged = StagedDir::create(&a.out, a.force)?;
    let result = match cfg.precision {
        Precision::F32 => tune_with::<f32>(&mut cfg, a.checkpoint.as_deref(), &seeds, &data, staged.path()),
        Precision::F64 => tune_with::<f64>(&mut cfg, a.checkpoint.as_deref(), &seeds, &data, staged.path()),
    };
    let aggregate = finish(staged, result)?;
    print_json(&aggregate)
}

fn tune_with<T: Float>(cfg: &mut RunConfig, base: Option<&Path>, seeds: &[u64], data: &Dataset, dir: &Path) -> Result<Aggregate> {
    let base = base_model::<T>(cfg, base)?;
    check_fits(data, &cfg.model)?;
    write_json(&dir.join("config.json"), &*cfg)?;
    let opts = RunOptions { command: "tune", save_checkpoint: true, accuracy: true };
    let mut summaries = Vec::new();
    for &seed in seeds {
        let c = seeded(cfg, seed);
        let (mut model, head) = assemble(&base, &c)?;
        let sub = dir.join(format!("seed-{seed}"));
        std::fs::create_dir(&sub).map_err(|e| CliError::io(&sub, e))?;
        summaries.push(run_training(&opts, &c, &mut model, head.as_ref(), data, &sub)?);
    }
    let first = &summaries[0];
    let aggregate = Aggregate {
        seeds: seeds.to_vec(),
        preset: first.preset,
        trainable_params: first.trainable_params,
        plus_params_pct: first.plus_params_pct,
        final_train_loss: Stat::collect(summaries.iter().map(|s| s.final_train_loss)),
        final_eval_loss: Stat::collect(summaries.iter().map(|s| s.final_eval.as_ref().map(|r| r.loss_total))),
        answer_accuracy: Stat::collect(summaries.iter().map(|s| s.answer_accuracy)),
        wall_clock_secs: Stat::collect(summaries.iter().map(|s| Some(s.wall_clock_secs))),
    };
    write_json(&dir.join("aggregate.json"), &aggregate)?;
    Ok(aggregate)
}

/// Loads the run config and fits it to the checkpoint's architecture and head.
fn config_for_checkpoint(config: Option<&Path>, path: &Path) -> Result<(RunConfig, checkpoint::CheckpointMeta)> {
    let mut cfg = load_config(config)?;
    let meta = checkpoint::read_meta(path)?;
    if let Some(h) = &meta.mod_head {
        cfg.head = h.clone();
    } else {
        cfg.head.k = cfg.head.k.min(meta.model.n_layers);
        cfg.head.top_k = None;
    }
    cfg.train.probe_k = cfg.head.k;
    adopt_model(&mut cfg, &meta.model)?;
    Ok((cfg, meta))
}

fn write_report(out: Option<&Path>, force: bool, value: &impl Serialize) -> Result<()> {
    if let Some(path) = out {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        write_file(path, text.as_bytes(), force)?;
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if let Some(out) = &a.out {
        if out.exists() && !a.force {
            return Err(CliError::Usage(format!("{} already exists; pass --force to replace it", out.display())));
        }
    }
    let (cfg, meta) = config_for_checkpoint(a.config.as_deref(), &a.checkpoint)?;
    let data = load_data(&cfg)?;
    check_fits(&data, &cfg.model)?;
    let report = match meta.dtype.as_str() {
        "f64" => eval_with::<f64>(&a.checkpoint, &cfg, &data)?,
        _ => eval_with::<f32>(&a.checkpoint, &cfg, &data)?,
    };
    write_report(a.out.as_deref(), a.force, &report)?;
    print_json(&report)
}

fn eval_with<T: Float>(path: &Path, cfg: &RunConfig, data: &Dataset) -> Result<EvalReport> {
    let (model, head) = checkpoint::load::<T>(path)?;
    let record = trainer::evaluate(&model, head.as_ref(), &data.eval, &cfg.train, 0, 0)?;
    let synthetic = !matches!(data.kind, DatasetKind::TextCorpus { .. });
    let answer_accuracy = if synthetic && cfg.eval_samples > 0 {
        Some(inference::answer_accuracy(&model, head.as_ref(), &data.eval, cfg.eval_samples)?)
    } else {
        None
    };
    Ok(EvalReport {
        checkpoint: path.to_path_buf(),
        sequences: data.eval.len(),
        record,
        answer_accuracy,
        params: breakdown(&model),
    })
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    if let Some(out) = &a.out {
        if out.exists() && !a.force {
            return Err(CliError::Usage(format!("{} already exists; pass --force to replace it", out.display())));
        }
    }
    let (cfg, meta) = config_for_checkpoint(a.config.as_deref(), &a.checkpoint)?;
    let mut gen = cfg.generation.clone();
    gen.early_exit |= a.early_exit;
    if let Some(c) = &a.cache {
        gen.cache_mode = match c.as_str() {
            "none" => CacheMode::None,
            "propagate" => CacheMode::Propagate,
            other => return Err(CliError::Usage(format!("--cache expects none or propagate, got {other:?}"))),
        };
    }
    if let Some(n) = a.max_new_tokens {
        gen.max_new_tokens = n;
    }
    let top_k = a.top_k.as_deref().map(parse_top_k).transpose()?;
    let mut prompt = vec![BOS];
    prompt.extend(data::encode(&a.prompt));
    let report = match meta.dtype.as_str() {
        "f64" => generate_with::<f64>(&a.checkpoint, &a.prompt, &prompt, &gen, top_k)?,
        _ => generate_with::<f32>(&a.checkpoint, &a.prompt, &prompt, &gen, top_k)?,
    };
    write_report(a.out.as_deref(), a.force, &report)?;
    print_json(&report)
}

fn generate_with<T: Float>(
    path: &Path,
    text: &str,
    prompt: &[usize],
    gen: &GenConfig,
    top_k: Option<Option<usize>>,
) -> Result<GenerateReport> {
    let (model, mut head) = checkpoint::load::<T>(path)?;
    if let Some(t) = top_k {
        head.as_mut().ok_or_else(|| CliError::Usage("--top-k needs a checkpoint with a routed head".into()))?.set_top_k(t)?;
    }
    if gen.early_exit && head.is_none() {
        return Err(CliError::Usage("early exit needs a checkpoint with a routed head".into()));
    }
    let exact = GenConfig { early_exit: false, cache_mode: CacheMode::None, ..gen.clone() };
    let baseline = inference::generate(&model, head.as_ref(), prompt, &exact)?;
    let run = if gen.early_exit || gen.cache_mode != CacheMode::None {
        inference::generate(&model, head.as_ref(), prompt, gen)?
    } else {
        baseline.clone()
    };
    let divergence = Divergence::between(&baseline.tokens, &run.tokens);
    Ok(GenerateReport {
        prompt: text.to_string(),
        completion: data::decode(&run.tokens),
        baseline_completion: data::decode(&baseline.tokens),
        early_exit: gen.early_exit,
        acceleration: inference::acceleration_report(&run.ledger, &baseline.ledger, gen.cache_mode, Some(divergence)),
        tokens: run.tokens,
    })
}

/// Worker count from [`THREADS_ENV`], else the available cores.
pub fn thread_budget() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if !cfg.train.preset.uses_head() {
        return Err(CliError::Usage(format!("sweep needs a preset with a routed head, got {}", cfg.train.preset)));
    }
    if a.checkpoint.is_none() && cfg.sweep_max_k > cfg.model.n_layers {
        return Err(CliError::Usage(format!("sweep.max_k = {} exceeds the {} layers", cfg.sweep_max_k, cfg.model.n_layers)));
    }
    let threads = thread_budget()?;
    let data = load_data(&cfg)?;
    let staged = StagedDir::create(&a.out, a.force)?;
    let result = match cfg.precision {
        Precision::F32 => sweep_with::<f32>(&mut cfg, a.checkpoint.as_deref(), &data, threads, staged.path()),
        Precision::F64 => sweep_with::<f64>(&mut cfg, a.checkpoint.as_deref(), &data, threads, staged.path()),
    };
    let rows = finish(staged, result)?;
    print_json(&rows)
}

fn sweep_with<T: Float>(
    cfg: &mut RunConfig,
    base: Option<&Path>,
    data: &Dataset,
    threads: usize,
    dir: &Path,
) -> Result<Vec<SweepRow>> {
    let base = base_model::<T>(cfg, base)?;
    if cfg.sweep_max_k > cfg.model.n_layers {
        return Err(CliError::Usage(format!("sweep.max_k = {} exceeds the {} layers", cfg.sweep_max_k, cfg.model.n_layers)));
    }
    check_fits(data, &cfg.model)?;
    write_json(&dir.join("config.json"), &*cfg)?;
    let cells: Vec<(usize, usize)> = (1..=cfg.sweep_max_k).flat_map(|k| (1..=k).map(move |t| (k, t))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.min(cells.len()))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} workers: {e}")))?;
    let cfg = &*cfg;
    let rows: Vec<Result<SweepRow>> =
        pool.install(|| cells.par_iter().map(|&(k, t)| sweep_cell(&base, cfg, data, k, t, dir)).collect());
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(rows)
}

fn sweep_cell<T: Float>(
    base: &TransformerModel<T>,
    cfg: &RunConfig,
    data: &Dataset,
    k: usize,
    top_k: usize,
    dir: &Path,
) -> Result<SweepRow> {
    let mut c = cfg.clone();
    c.head.k = k;
    c.head.top_k = Some(top_k);
    c.train.probe_k = k;
    let (mut model, head) = assemble(base, &c)?;
    let cell = dir.join("cells").join(format!("k{k}-top{top_k}"));
    std::fs::create_dir_all(&cell).map_err(|e| CliError::io(&cell, e))?;
    let opts = RunOptions { command: "sweep", save_checkpoint: false, accuracy: false };
    let summary = run_training(&opts, &c, &mut model, head.as_ref(), data, &cell)?;
    let head = head.expect("sweep presets carry a head");
    Ok(SweepRow {
        k,
        top_k,
        dense: top_k == k,
        steps: summary.steps,
        final_train_loss: summary.final_train_loss.unwrap_or(f64::NAN),
        final_eval_loss: summary.final_eval.as_ref().map(|r| r.loss_total),
        layer_ratio: layer_ratio(&model, &head, data, cfg)?,
        trainable_params: summary.trainable_params,
        wall_clock_secs: summary.wall_clock_secs,
    })
}

/// Full-depth layer forwards over early-exit layer forwards, pooled over the first
/// `sweep.prompts` evaluation prompts.
fn layer_ratio<T: Float>(model: &TransformerModel<T>, head: &ModHead, data: &Dataset, cfg: &RunConfig) -> Result<Option<f64>> {
    let (mut computed, mut full) = (0usize, 0usize);
    for seq in data.eval.iter().take(cfg.sweep_prompts) {
        let prompt = match data::prompt_and_answer(seq) {
            Some((p, _)) => p,
            None => seq[..seq.len().min(8)].to_vec(),
        };
        let out = inference::generate_early_exit(model, head, &prompt, &cfg.generation)?;
        computed += out.ledger.layer_forwards();
        full += out.ledger.baseline_layer_forwards();
    }
    Ok((computed > 0).then(|| full as f64 / computed as f64))
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    if let Some(out) = &a.out {
        if out.exists() && !a.force {
            return Err(CliError::Usage(format!("{} already exists; pass --force to replace it", out.display())));
        }
    }
    let outcome = run_gradchecks()?;
    write_report(a.out.as_deref(), a.force, &outcome)?;
    print_json(&outcome)?;
    if !outcome.passed {
        return Err(CliError::Numerical("gradient check failed".into()));
    }
    Ok(())
}

/// Dense and sparse routing under two presets, plus a corrupted-backward control.
pub fn run_gradchecks() -> Result<GradcheckOutcome> {
    let started = Instant::now();
    let mut checks = Vec::new();
    for preset in [Preset::LoraAllPlusMod, Preset::FullBaseline] {
        for top_k in [None, Some(1)] {
            let mut cfg = GradcheckConfig::tiny();
            cfg.preset = preset;
            cfg.head.top_k = top_k;
            let routing = top_k.map_or("dense".to_string(), |t| format!("top{t}"));
            checks.push(GradcheckRun { name: format!("{preset}/{routing}"), report: modtune_core::gradcheck::run(&cfg)? });
        }
    }
    let mut faulty = GradcheckConfig::tiny();
    faulty.fault = Some((OpKind::LayerNorm, 0.05));
    let control =
        GradcheckRun { name: "layer_norm backward scaled by 1.05".into(), report: modtune_core::gradcheck::run(&faulty)? };
    let detected = !control.report.passed;
    Ok(GradcheckOutcome {
        passed: detected && checks.iter().all(|c| c.report.passed),
        checks,
        negative_control: control,
        negative_control_detected: detected,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    if a.out.exists() && !a.force {
        return Err(CliError::Usage(format!("{} already exists; pass --force to replace it", a.out.display())));
    }
    let records = metrics::read_metrics(&a.metrics)?;
    let Some(first) = records.first() else {
        return Err(CliError::Usage(format!("{} holds no records", a.metrics.display())));
    };
    let routes = first.routes.len();
    let smoothed = smooth_records(&records, a.window)?;
    let mut tmp = a.out.as_os_str().to_owned();
    tmp.push(format!(".partial-{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut w = MetricsWriter::create(&tmp, routes)?;
        for r in &smoothed {
            w.write(r)?;
        }
    }
    std::fs::rename(&tmp, &a.out).map_err(|e| CliError::io(&a.out, e))?;
    print_json(&serde_json::json!({ "rows": smoothed.len(), "window": a.window, "out": a.out }))
}

fn flatten(r: &MetricsRecord) -> Vec<Option<f64>> {
    let mut v = vec![Some(r.loss_task), Some(r.loss_distill), Some(r.loss_total)];
    for m in &r.routes {
        v.extend([Some(m.loss), m.sparsity, m.mean, m.var]);
    }
    v
}

fn unflatten(r: &mut MetricsRecord, v: &[Option<f64>]) {
    let get = |i: usize| v[i].expect("core losses are always present");
    r.loss_task = get(0);
    r.loss_distill = get(1);
    r.loss_total = get(2);
    for (i, m) in r.routes.iter_mut().enumerate() {
        let b = 3 + 4 * i;
        m.loss = get(b);
        m.sparsity = v[b + 1];
        m.mean = v[b + 2];
        m.var = v[b + 3];
    }
}

/// Smooths every numeric column within each split, keeping rows in place. Columns
/// with gaps are left as they are.
pub fn smooth_records(records: &[MetricsRecord], window: usize) -> Result<Vec<MetricsRecord>> {
    let mut splits: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        splits.entry(r.split.as_str()).or_default().push(i);
    }
    let mut flat: Vec<Vec<Option<f64>>> = records.iter().map(flatten).collect();
    for rows in splits.values() {
        let width = flat[rows[0]].len();
        for col in 0..width {
            let series: Option<Vec<f64>> = rows.iter().map(|&i| flat[i][col]).collect();
            if let Some(series) = series {
                for (&i, v) in rows.iter().zip(metrics::smooth(&series, window)?) {
                    flat[i][col] = Some(v);
                }
            }
        }
    }
    Ok(records
        .iter()
        .zip(&flat)
        .map(|(r, v)| {
            let mut out = r.clone();
            unflatten(&mut out, v);
            out
        })
        .collect())
}
