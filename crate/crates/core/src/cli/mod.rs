//! Command-line front end.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{hash_text, Checkpoint};
use crate::costmodel::{CostModel, CostSource, LatencyTable, LayerGeometry, PlateauModel, TableMeta};
use crate::error::{Error, Result};
use crate::netspec::{desk_cnn, resnet18, NetworkSpec};
use crate::nn::optim::{OptimizerState, SgdConfig};
use crate::nn::train::{evaluate, train_epoch, Evaluation};
use crate::nn::{Dataset, Network, Route};
use crate::rankspace::{build_rank_space, CompressionTarget, RankSpacePlan};
use crate::report::{compress, model_cost, parse_ranks, reduction_pct, summarize};
use crate::search::{finalize, fine_tune, FineTuneConfig, SearchConfig, SearchContext, SearchState};
use config::RunConfig;

/// Default output directory when neither `--out` nor a config entry is given.
pub const OUT_ENV: &str = "RANKFORGE_OUT";

/// Cost units per FLOP under `--flops-proxy` (MFLOPs).
pub const FLOPS_PROXY_SCALE: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "rankforge", version, about = "Tucker-2 low-rank CNN compression with hardware-aware rank search")]
pub struct Cli {
    /// TOML run configuration; flags override its entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the per-layer candidate rank space.
    Plan(PlanArgs),
    /// Tucker-2 decompose a dense checkpoint at fixed ranks.
    Decompose(DecomposeArgs),
    /// Run the alternating rank search, finalize and fine-tune.
    Search(SearchArgs),
    /// Fine-tune a compressed checkpoint.
    Finetune(FinetuneArgs),
    /// Accuracy, FLOPs, params and cost of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Per-layer size and FLOPs report of a checkpoint.
    Report(ReportArgs),
    /// Train a dense network from scratch.
    Train(TrainArgs),
    /// Write a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Write a synthetic plateau-structured latency table for a network.
    LatencyTable(LatencyTableArgs),
}

#[derive(Debug, Clone, Args, Default)]
pub struct DataArgs {
    /// Dataset: CSV, or IDX images (with --labels).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// IDX label file.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct CostArgs {
    /// Latency table CSV (`layer_id,r1,r2,cost`).
    #[arg(long)]
    pub latency_table: Option<PathBuf>,
    /// Price candidates by FLOPs (in MFLOPs) instead of a table.
    #[arg(long)]
    pub flops_proxy: bool,
}

#[derive(Debug, Clone, Args, Default)]
pub struct OutArgs {
    /// Output directory (default: $RANKFORGE_OUT, else the current directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Network spec file, or `desk` / `resnet18`.
    #[arg(long)]
    pub network: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Dense model checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// `layer_id,r1,r2` CSV.
    #[arg(long)]
    pub ranks: Option<PathBuf>,
    #[arg(long)]
    pub refine_iters: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Pretrained dense checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Plan file; built from --alpha when absent.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[command(flatten)]
    pub cost: CostArgs,
    /// Hardware budget ε in cost units; unbounded when absent.
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub prob_lr: Option<f64>,
    #[arg(long)]
    pub weight_lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    #[arg(long)]
    pub refine_iters: Option<usize>,
    /// Resume from a search checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_lambda: Option<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Compressed checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dense reference checkpoint (needed when --lambda > 0).
    #[arg(long)]
    pub dense: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cost: CostArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dense checkpoint to compute reductions against.
    #[arg(long)]
    pub dense: Option<PathBuf>,
    #[command(flatten)]
    pub cost: CostArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Network spec file, or `desk` / `resnet18`.
    #[arg(long)]
    pub network: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// `CxHxW`
    #[arg(long, default_value = "1x8x8")]
    pub shape: String,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Also write IDX files next to the CSV.
    #[arg(long)]
    pub idx: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct LatencyTableArgs {
    #[arg(long)]
    pub network: Option<String>,
    /// Ranks are padded up to this multiple before pricing.
    #[arg(long, default_value_t = 8)]
    pub granularity: usize,
    /// Spacing of the table's rank grid.
    #[arg(long, default_value_t = 4)]
    pub grid: usize,
    #[arg(long, default_value_t = 0.02)]
    pub base: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub per_flop: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Argument(_)) {
                eprintln!("hint: run `rankforge <command> --help` for usage");
            }
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Plan(a) => cmd_plan(a, &cfg),
        Command::Decompose(a) => cmd_decompose(a, &cfg),
        Command::Search(a) => cmd_search(a, &cfg),
        Command::Finetune(a) => cmd_finetune(a, &cfg),
        Command::Eval(a) => cmd_eval(a, &cfg),
        Command::Report(a) => cmd_report(a, &cfg),
        Command::Train(a) => cmd_train(a, &cfg),
        Command::Synth(a) => cmd_synth(a),
        Command::LatencyTable(a) => cmd_latency_table(a, &cfg),
    }
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| Error::arg(format!("missing --{flag}")))
}

fn out_dir(a: &OutArgs, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = a
        .out
        .clone()
        .or_else(|| cfg.paths.out.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// A network spec file, or one of the built-in `desk` / `resnet18` specs.
pub fn load_network(name: &str, classes: Option<usize>) -> Result<NetworkSpec> {
    match name {
        "desk" => Ok(desk_cnn(classes.unwrap_or(10))),
        "resnet18" => Ok(resnet18()),
        path => NetworkSpec::load(Path::new(path)),
    }
}

fn load_data(a: &DataArgs, cfg: &RunConfig) -> Result<Dataset> {
    let data = required(a.data.clone().or_else(|| cfg.paths.data.clone()), "data")?;
    let labels = a.labels.clone().or_else(|| cfg.paths.labels.clone());
    let d = Dataset::load(&data, labels.as_deref())?;
    if d.is_empty() {
        return Err(Error::arg(format!("{} holds no samples", data.display())));
    }
    Ok(d)
}

fn load_model(path: &Path) -> Result<Network> {
    Network::read_from(&Checkpoint::load(path)?)
}

fn save_model(net: &Network, path: &Path) -> Result<()> {
    let mut c = Checkpoint::new(hash_text(&net.spec.to_text()));
    net.write_to(&mut c);
    write(path, &c.to_bytes()?)
}

fn check_data_fits(net: &Network, data: &Dataset) -> Result<()> {
    if data.shape != net.spec.input || data.classes > net.spec.classes {
        let (c, h, w) = net.spec.input;
        let (dc, dh, dw) = data.shape;
        return Err(Error::data(format!(
            "model takes {c}x{h}x{w} inputs with {} classes; dataset is {dc}x{dh}x{dw} with {} classes",
            net.spec.classes, data.classes
        )));
    }
    Ok(())
}

fn searched_geometries(spec: &NetworkSpec) -> Result<Vec<LayerGeometry>> {
    let searched: Vec<String> = spec.searched_specs().into_iter().map(|s| s.layer_id).collect();
    Ok(spec
        .geometries()?
        .into_iter()
        .filter(|g| searched.contains(&g.spec.layer_id))
        .collect())
}

fn cost_model(a: &CostArgs, cfg: &RunConfig, spec: &NetworkSpec, required_here: bool) -> Result<Option<CostModel>> {
    let geoms = spec.geometries()?;
    let table = a.latency_table.clone().or_else(|| cfg.paths.latency_table.clone());
    let proxy = a.flops_proxy || cfg.search.flops_proxy.unwrap_or(false);
    match (table, proxy) {
        (Some(_), true) => Err(Error::arg("--latency-table and --flops-proxy are mutually exclusive")),
        (Some(t), false) => Ok(Some(CostModel::new(CostSource::Table(LatencyTable::load(&t)?), geoms))),
        (None, true) => Ok(Some(CostModel::new(
            CostSource::FlopsProxy {
                scale: FLOPS_PROXY_SCALE,
            },
            geoms,
        ))),
        (None, false) if required_here => Err(Error::arg("a cost source is required: pass --latency-table or --flops-proxy")),
        (None, false) => Ok(None),
    }
}

fn cmd_plan(a: PlanArgs, cfg: &RunConfig) -> Result<()> {
    let spec = load_network(&required(a.network.or_else(|| cfg.paths.network.clone()), "network")?, None)?;
    let alpha = required(a.alpha.or(cfg.plan.alpha), "alpha")?;
    let plan = build_rank_space(&spec.searched_specs(), CompressionTarget::new(alpha)?)?;
    for w in &plan.warnings {
        warn!("{w}");
    }
    let dir = out_dir(&a.out, cfg)?;
    write(&dir.join("plan.json"), plan.to_json().as_bytes())?;
    let table = plan.render_table();
    write(&dir.join("plan.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn cmd_decompose(a: DecomposeArgs, cfg: &RunConfig) -> Result<()> {
    let dense = load_model(&required(a.model.or_else(|| cfg.paths.model.clone()), "model")?)?;
    let ranks_path = required(a.ranks.or_else(|| cfg.paths.ranks.clone()), "ranks")?;
    let ranks = parse_ranks(&read_text(&ranks_path)?, &ranks_path.display().to_string())?;
    let refine = a.refine_iters.or(cfg.search.refine_iters).unwrap_or(3);
    let (net, report) = compress(&dense, &ranks, refine)?;
    let dir = out_dir(&a.out, cfg)?;
    save_model(&net, &dir.join("compressed.ckpt"))?;
    write(&dir.join("decompose_report.json"), to_json(&report).as_bytes())?;
    let text = report.render();
    write(&dir.join("decompose_report.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn search_config(a: &SearchArgs, cfg: &RunConfig) -> SearchConfig {
    let s = &cfg.search;
    let mut c = SearchConfig::default();
    c.budget = a.budget.or(s.budget).unwrap_or(c.budget);
    c.eta = a.eta.or(s.eta).unwrap_or(c.eta);
    c.theta = a.theta.or(s.theta).unwrap_or(c.theta);
    c.lambda = a.lambda.or(s.lambda).unwrap_or(c.lambda);
    c.epochs = a.epochs.or(s.epochs).unwrap_or(c.epochs);
    c.seed = a.seed.or(s.seed).unwrap_or(c.seed);
    c.prob_lr = a.prob_lr.or(s.prob_lr).unwrap_or(c.prob_lr);
    c.weight.schedule.initial = a.weight_lr.or(s.weight_lr).unwrap_or(c.weight.schedule.initial);
    c.batch_size = a.batch_size.or(s.batch_size).unwrap_or(c.batch_size);
    c.validation_fraction = a.validation_fraction.or(s.validation_fraction).unwrap_or(c.validation_fraction);
    c.refine_iters = a.refine_iters.or(s.refine_iters).unwrap_or(c.refine_iters);
    c
}

fn finetune_config(epochs: Option<usize>, lambda: Option<f64>, lr: Option<f64>, seed: Option<u64>, cfg: &RunConfig) -> FineTuneConfig {
    let f = &cfg.finetune;
    let mut c = FineTuneConfig::default();
    c.epochs = epochs.or(f.epochs).unwrap_or(c.epochs);
    c.lambda = lambda.or(f.lambda).unwrap_or(c.lambda);
    c.sgd.schedule.initial = lr.or(f.lr).unwrap_or(c.sgd.schedule.initial);
    c.seed = seed.or(f.seed).unwrap_or(c.seed);
    c
}

fn cmd_search(a: SearchArgs, cfg: &RunConfig) -> Result<()> {
    let dense = load_model(&required(a.model.clone().or_else(|| cfg.paths.model.clone()), "model")?)?;
    let data = load_data(&a.data, cfg)?;
    check_data_fits(&dense, &data)?;
    let cost = cost_model(&a.cost, cfg, &dense.spec, true)?.expect("required");
    let dir = out_dir(&a.out, cfg)?;
    let mut state = match &a.resume {
        Some(p) => {
            let mut s = SearchState::from_checkpoint(&Checkpoint::load(p)?)?;
            if let Some(e) = a.epochs.or(cfg.search.epochs) {
                s.cfg.epochs = e;
            }
            info!("resuming at epoch {} of {}", s.epoch, s.cfg.epochs);
            s
        }
        None => {
            let scfg = search_config(&a, cfg);
            let plan = match a.plan.clone().or_else(|| cfg.paths.plan.clone()) {
                Some(p) => RankSpacePlan::from_json(&read_text(&p)?)?,
                None => {
                    let alpha = required(a.alpha.or(cfg.plan.alpha), "plan or --alpha")?;
                    build_rank_space(&dense.spec.searched_specs(), CompressionTarget::new(alpha)?)?
                }
            };
            for w in &plan.warnings {
                warn!("{w}");
            }
            SearchState::new(&dense, &plan, &scfg)?
        }
    };
    let ctx = SearchContext::new(&dense, &cost, &data, &state.cfg)?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = if a.resume.is_some() {
        std::fs::OpenOptions::new().append(true).create(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .map_err(|e| Error::io(&metrics_path, e))?;
    let ckpt_path = dir.join("search.ckpt");
    state.run(&ctx, |s, m| {
        info!(
            "epoch {}: train loss {:.4}, val CE {:.4}, expected cost {:.4}",
            m.epoch, m.train_loss, m.val_ce, m.expected_cost
        );
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        s.to_checkpoint().save(&ckpt_path)
    })?;
    if state.epoch == 0 {
        state.to_checkpoint().save(&ckpt_path)?;
    }
    let result = state.selection(&cost)?;
    write(&dir.join("selection.json"), result.to_json().as_bytes())?;
    let mut compressed = finalize(&state.supernet, &result)?;
    let ft = finetune_config(a.finetune_epochs, a.finetune_lambda, None, Some(state.cfg.seed), cfg);
    if ft.epochs > 0 {
        fine_tune(&mut compressed, &dense, &data, &ctx.train, &ft)?;
    }
    save_model(&compressed, &dir.join("compressed.ckpt"))?;
    let before = summarize(&dense)?;
    let after = summarize(&compressed)?;
    let val = evaluate(&compressed, &data, &ctx.val, Route::Path(&[]), 256)?;
    let report = SearchReport {
        selection: result.layers.iter().map(|l| (l.layer_id.clone(), (l.r1, l.r2))).collect(),
        expected_cost: result.expected_cost,
        dense_cost: model_cost(&dense, &cost)?,
        params_before: before.params,
        params_after: after.params,
        params_reduction_pct: reduction_pct(before.params, after.params),
        flops_before: before.flops,
        flops_after: after.flops,
        flops_reduction_pct: reduction_pct(before.flops, after.flops),
        validation: val,
    };
    write(&dir.join("report.json"), to_json(&report).as_bytes())?;
    print!("{}", to_json(&report));
    Ok(())
}

#[derive(Debug, Serialize)]
struct SearchReport {
    selection: BTreeMap<String, (usize, usize)>,
    expected_cost: f64,
    dense_cost: f64,
    params_before: u64,
    params_after: u64,
    params_reduction_pct: f64,
    flops_before: u64,
    flops_after: u64,
    flops_reduction_pct: f64,
    validation: Evaluation,
}

fn cmd_finetune(a: FinetuneArgs, cfg: &RunConfig) -> Result<()> {
    let mut net = load_model(&required(a.model.or_else(|| cfg.paths.model.clone()), "model")?)?;
    let data = load_data(&a.data, cfg)?;
    check_data_fits(&net, &data)?;
    let ft = finetune_config(a.epochs, a.lambda, a.lr, a.seed, cfg);
    let dense = match a.dense.or_else(|| cfg.paths.dense.clone()) {
        Some(p) => load_model(&p)?,
        None if ft.lambda > 0.0 => return Err(Error::arg("--lambda > 0 needs --dense")),
        None => net.clone(),
    };
    let (train, _) = data.split(cfg.search.validation_fraction.unwrap_or(0.2))?;
    let losses = fine_tune(&mut net, &dense, &data, &train, &ft)?;
    for (e, l) in losses.iter().enumerate() {
        info!("fine-tune epoch {}: loss {l:.4}", e + 1);
    }
    let dir = out_dir(&a.out, cfg)?;
    save_model(&net, &dir.join("finetuned.ckpt"))
}

#[derive(Debug, Serialize)]
struct EvalReport {
    accuracy: f64,
    loss: f64,
    samples: usize,
    params: u64,
    flops: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    expected_cost: Option<f64>,
}

fn cmd_eval(a: EvalArgs, cfg: &RunConfig) -> Result<()> {
    let net = load_model(&required(a.model.or_else(|| cfg.paths.model.clone()), "model")?)?;
    let data = load_data(&a.data, cfg)?;
    check_data_fits(&net, &data)?;
    let cost = cost_model(&a.cost, cfg, &net.spec, false)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let ev = evaluate(&net, &data, &all, Route::Path(&[]), 256)?;
    let s = summarize(&net)?;
    let report = EvalReport {
        accuracy: ev.accuracy,
        loss: ev.loss,
        samples: ev.samples,
        params: s.params,
        flops: s.flops,
        expected_cost: cost.map(|c| model_cost(&net, &c)).transpose()?,
    };
    print!("{}", to_json(&report));
    Ok(())
}

fn cmd_report(a: ReportArgs, cfg: &RunConfig) -> Result<()> {
    let net = load_model(&required(a.model.or_else(|| cfg.paths.model.clone()), "model")?)?;
    let s = summarize(&net)?;
    let cost = cost_model(&a.cost, cfg, &net.spec, false)?;
    let mut out = format!("{:<16} {:<8} {:>9} {:>10} {:>12}\n", "layer", "kind", "ranks", "params", "flops");
    for l in &s.layers {
        let ranks = l.ranks.map_or("-".to_string(), |r| format!("({},{})", r.r1, r.r2));
        out += &format!("{:<16} {:<8} {:>9} {:>10} {:>12}\n", l.layer_id, l.kind, ranks, l.params, l.flops);
    }
    out += &format!("total params {}, FLOPs {}\n", s.params, s.flops);
    if let Some(c) = &cost {
        out += &format!("expected cost {:.6}\n", model_cost(&net, c)?);
    }
    if let Some(d) = a.dense.or_else(|| cfg.paths.dense.clone()) {
        let ds = summarize(&load_model(&d)?)?;
        out += &format!(
            "vs dense: params {} -> {} ({:.2}% reduction), FLOPs {} -> {} ({:.2}% reduction)\n",
            ds.params,
            s.params,
            reduction_pct(ds.params, s.params),
            ds.flops,
            s.flops,
            reduction_pct(ds.flops, s.flops)
        );
    }
    print!("{out}");
    Ok(())
}

fn cmd_train(a: TrainArgs, cfg: &RunConfig) -> Result<()> {
    let data = load_data(&a.data, cfg)?;
    let spec = load_network(
        &required(a.network.or_else(|| cfg.paths.network.clone()), "network")?,
        Some(data.classes),
    )?;
    let t = &cfg.train;
    let seed = a.seed.or(t.seed).unwrap_or(0);
    let epochs = a.epochs.or(t.epochs).unwrap_or(10);
    let batch = a.batch_size.or(t.batch_size).unwrap_or(64);
    let mut sgd = SgdConfig::default();
    sgd.schedule.initial = a.lr.or(t.lr).unwrap_or(sgd.schedule.initial);
    let mut net = Network::init(spec, seed)?;
    check_data_fits(&net, &data)?;
    let (train, val) = data.split(cfg.search.validation_fraction.unwrap_or(0.2))?;
    let mut opt = OptimizerState::new(sgd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = out_dir(&a.out, cfg)?;
    let log_path = dir.join("train_metrics.jsonl");
    let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    for e in 0..epochs {
        let losses = train_epoch(&mut net, None, &data, &train, &mut opt, e, batch, 0.0, &mut rng)?;
        let loss = losses.iter().map(|l| l.ce).sum::<f64>() / losses.len() as f64;
        let ev = evaluate(&net, &data, &val, Route::Path(&[]), 256)?;
        info!("epoch {}: train CE {loss:.4}, val CE {:.4}, val acc {:.4}", e + 1, ev.loss, ev.accuracy);
        let rec = serde_json::json!({"epoch": e + 1, "train_ce": loss, "val_ce": ev.loss, "val_accuracy": ev.accuracy});
        writeln!(log, "{rec}").map_err(|err| Error::io(&log_path, err))?;
    }
    save_model(&net, &dir.join("dense.ckpt"))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let dims: Vec<usize> = a
        .shape
        .split('x')
        .map(|p| p.parse().map_err(|_| Error::arg(format!("bad --shape `{}`", a.shape))))
        .collect::<Result<_>>()?;
    let [c, h, w] = dims[..] else {
        return Err(Error::arg(format!("--shape must be CxHxW, got `{}`", a.shape)));
    };
    let d = Dataset::synthetic(a.samples, a.classes, (c, h, w), a.noise, a.seed)?;
    let dir = out_dir(&a.out, &RunConfig::default())?;
    write(&dir.join("data.csv"), d.to_csv().as_bytes())?;
    if a.idx {
        let (images, labels) = d.to_idx_bytes();
        write(&dir.join("images.idx"), &images)?;
        write(&dir.join("labels.idx"), &labels)?;
    }
    Ok(())
}

fn cmd_latency_table(a: LatencyTableArgs, cfg: &RunConfig) -> Result<()> {
    let spec = load_network(&required(a.network.or_else(|| cfg.paths.network.clone()), "network")?, None)?;
    let model = PlateauModel {
        granularity: a.granularity,
        base: a.base,
        per_flop: a.per_flop,
    };
    let geoms = searched_geometries(&spec)?;
    let meta = TableMeta {
        device: "synthetic-plateau".into(),
        batch: 1,
        unit: "ms".into(),
        note: format!("granularity={} base={} per_flop={}", a.granularity, a.base, a.per_flop),
    };
    let table = model.table(&geoms, a.grid, meta)?;
    let dense: f64 = geoms.iter().map(|g| model.dense_cost(g)).sum();
    let dir = out_dir(&a.out, cfg)?;
    write(&dir.join("latency.csv"), table.to_csv().as_bytes())?;
    println!("{} entries; dense cost of searched layers {dense:.6}", table.len());
    Ok(())
}
