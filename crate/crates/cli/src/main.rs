//! `vimoe` command-line entry point. Every command prints one JSON summary
//! line on stdout.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use vimoe::analysis::{self, RoutingLog};
use vimoe::data::{self, GenConfig, Split};
use vimoe::model::{self, ModelConfig, Task, ViMoE};
use vimoe::train::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "vimoe", version, about = "Sparse MoE vision transformer laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic datasets.
    #[command(subcommand)]
    Data(DataCmd),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write its routing log.
    Eval(EvalArgs),
    /// Train a grid of MoE placements.
    Scan(ScanArgs),
    /// Parameter and FLOPs accounting.
    #[command(subcommand)]
    Count(CountCmd),
    /// Number of expert combinations C(N,k)^L.
    Degree(DegreeArgs),
    /// Routing-log analysis.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
}

#[derive(Subcommand)]
enum DataCmd {
    /// Write train.vimd and test.vimd under --out.
    Gen(GenArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Cls,
    Seg,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long)]
    classes: usize,
    /// Training images.
    #[arg(long)]
    count: usize,
    /// Held-out images; defaults to a quarter of --count.
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Held-out set for the per-epoch metric and the routing log.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SharedArg {
    No,
    Yes,
    Both,
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eval_data: PathBuf,
    /// Comma-separated MoE depths.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    last_l: Vec<usize>,
    /// Comma-separated expert counts.
    #[arg(long, value_delimiter = ',', default_value = "4")]
    experts: Vec<usize>,
    #[arg(long, value_enum, default_value = "both")]
    shared: SharedArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ArchArgs {
    #[arg(long, default_value = "vit-s-14")]
    preset: String,
    #[arg(long, default_value_t = 8)]
    experts: usize,
    #[arg(long, default_value_t = 0)]
    last_l: usize,
    #[arg(long)]
    shared: bool,
    #[arg(long, default_value_t = 1)]
    topk: usize,
}

impl ArchArgs {
    fn config(&self) -> vimoe::Result<ModelConfig> {
        let mut c = ModelConfig::preset(&self.preset)?.with_moe(self.experts, self.last_l, self.shared);
        c.top_k = self.topk;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum CountCmd {
    Params(ArchArgs),
    Flops {
        #[command(flatten)]
        arch: ArchArgs,
        /// Input side length; defaults to the preset's.
        #[arg(long)]
        resolution: Option<usize>,
    },
}

#[derive(Args)]
struct DegreeArgs {
    #[arg(long)]
    experts: usize,
    #[arg(long, default_value_t = 1)]
    topk: usize,
    #[arg(long)]
    last_l: usize,
}

#[derive(Args)]
struct LogArgs {
    #[arg(long)]
    log: PathBuf,
    /// Layer index with 1 = deepest block; all MoE layers when omitted.
    #[arg(long)]
    layer: Option<usize>,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Class × expert heatmaps.
    Heatmap {
        #[command(flatten)]
        log: LogArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expert load per layer.
    Load {
        #[command(flatten)]
        log: LogArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Specialization scores and the layers worth keeping.
    Recommend {
        #[command(flatten)]
        log: LogArgs,
        #[arg(long, default_value_t = analysis::DEFAULT_TAU)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distinct expert combinations observed per image.
    Degree {
        #[command(flatten)]
        log: LogArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Patch-level expert allocation image (PPM).
    Allocmap {
        #[command(flatten)]
        log: LogArgs,
        #[arg(long, default_value_t = 0)]
        item: usize,
        #[arg(long, default_value_t = 8)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &vimoe::Error) -> u8 {
    use vimoe::Error::*;
    match e {
        Shape { .. } | Contract(_) | Config(_) => 1,
        Format { .. } | Io(_) => 2,
        Numeric(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let name = cli.cmd.name();
    match run(cli.cmd) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(Failure { error, summary }) => {
            let code = exit_code(&error);
            eprintln!("vimoe: {error}");
            let mut s = summary.unwrap_or_else(|| json!({}));
            s["command"] = json!(name);
            s["error"] = json!(error.to_string());
            s["exit_code"] = json!(code);
            println!("{s}");
            ExitCode::from(code)
        }
    }
}

struct Failure {
    error: vimoe::Error,
    /// Partial results to report alongside the error.
    summary: Option<Value>,
}

impl From<vimoe::Error> for Failure {
    fn from(error: vimoe::Error) -> Self {
        Self { error, summary: None }
    }
}

type CmdResult = Result<Value, Failure>;

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Data(_) => "data gen",
            Cmd::Train(_) => "train",
            Cmd::Eval(_) => "eval",
            Cmd::Scan(_) => "scan",
            Cmd::Count(CountCmd::Params(_)) => "count params",
            Cmd::Count(CountCmd::Flops { .. }) => "count flops",
            Cmd::Degree(_) => "degree",
            Cmd::Analyze(a) => match a {
                AnalyzeCmd::Heatmap { .. } => "analyze heatmap",
                AnalyzeCmd::Load { .. } => "analyze load",
                AnalyzeCmd::Recommend { .. } => "analyze recommend",
                AnalyzeCmd::Degree { .. } => "analyze degree",
                AnalyzeCmd::Allocmap { .. } => "analyze allocmap",
            },
        }
    }
}

fn run(cmd: Cmd) -> CmdResult {
    let name = cmd.name();
    let mut summary = match cmd {
        Cmd::Data(DataCmd::Gen(a)) => data_gen(a)?,
        Cmd::Train(a) => train_cmd(a)?,
        Cmd::Eval(a) => eval_cmd(a)?,
        Cmd::Scan(a) => scan_cmd(a)?,
        Cmd::Count(CountCmd::Params(a)) => count_params(a)?,
        Cmd::Count(CountCmd::Flops { arch, resolution }) => count_flops(arch, resolution)?,
        Cmd::Degree(a) => {
            let d = model::routing_degree(a.experts, a.topk, a.last_l)?;
            json!({"experts": a.experts, "top_k": a.topk, "last_l": a.last_l, "degree": degree_json(d)})
        }
        Cmd::Analyze(a) => analyze(a)?,
    };
    summary["command"] = json!(name);
    Ok(summary)
}

/// A JSON number when it fits in `u64`, otherwise a decimal string.
fn degree_json(d: u128) -> Value {
    u64::try_from(d).map_or_else(|_| json!(d.to_string()), |v| json!(v))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> vimoe::Result<()> {
    vimoe::io::write_file(path, bytes.as_ref())
}

fn data_gen(a: GenArgs) -> CmdResult {
    let cfg = GenConfig::default();
    let test_count = a.test_count.unwrap_or((a.count / 4).max(1));
    let gen = |m, split| match a.task {
        TaskArg::Cls => data::gen_cluster_classification(a.classes, m, a.seed, split, &cfg),
        TaskArg::Seg => data::gen_region_segmentation(a.classes, m, a.seed, split, &cfg),
    };
    let train = gen(a.count, Split::Train)?;
    let test = gen(test_count, Split::Test)?;
    let (tp, ep) = (a.out.join("train.vimd"), a.out.join("test.vimd"));
    data::save_dataset(&tp, &train)?;
    data::save_dataset(&ep, &test)?;
    Ok(json!({
        "task": train.task().to_string(),
        "classes": a.classes,
        "seed": a.seed,
        "train_count": train.len(),
        "test_count": test.len(),
        "train_path": path_str(&tp),
        "test_path": path_str(&ep),
        "train_hash": format!("{:016x}", train.hash()),
        "test_hash": format!("{:016x}", test.hash()),
    }))
}

fn read_run_config(path: &Path, seed: Option<u64>) -> vimoe::Result<(ModelConfig, TrainConfig)> {
    let text = String::from_utf8(vimoe::io::read_file(path)?)
        .map_err(|_| vimoe::Error::Config(format!("{} is not UTF-8", path.display())))?;
    let (m, mut t) = train::parse_run_config(&text)?;
    if let Some(s) = seed {
        t.seed = s;
    }
    Ok((m, t))
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let (mc, tc) = read_run_config(&a.config, a.seed)?;
    let data = data::load_dataset(&a.data)?;
    let eval = a.eval_data.as_deref().map(data::load_dataset).transpose()?;
    let mut m = ViMoE::build(&mc, tc.seed)?;
    let run = train::train(&mut m, &data, eval.as_ref(), &tc)?;

    let record_path = a.out.join("run.csv");
    write(&record_path, run.record.to_csv())?;
    write(&a.out.join("config.cfg"), format!("{}{}", mc.to_kv(), tc.to_kv()))?;
    let mut train_logs = Vec::new();
    for (e, log) in run.logs.iter().enumerate() {
        let p = a.out.join(format!("train_routing_epoch{e:03}.vimr"));
        analysis::save_log(&p, log)?;
        train_logs.push(path_str(&p));
    }
    let last = run.record.epochs.last();
    let mut summary = json!({
        "seed": tc.seed,
        "config_hash": format!("{:016x}", mc.hash()),
        "epochs_completed": run.record.epochs.len(),
        "final_task_loss": last.map(|e| e.task_loss),
        "final_aux_loss": last.map(|e| e.aux_loss),
        "final_metric": run.record.final_metric(),
        "run_record": path_str(&record_path),
        "train_routing_logs": train_logs,
    });
    if let Some(error) = run.failure {
        return Err(Failure {
            error,
            summary: Some(summary),
        });
    }
    let ck = a.out.join("model.vimo");
    model::save_checkpoint(&ck, &m)?;
    let ev = train::evaluate(&m, eval.as_ref().unwrap_or(&data))?;
    let log_path = a.out.join("routing.vimr");
    analysis::save_log(&log_path, &ev.log)?;
    summary["checkpoint"] = json!(path_str(&ck));
    summary["routing_log"] = json!(path_str(&log_path));
    summary["eval_metric"] = json!(ev.metric);
    Ok(summary)
}

fn eval_cmd(a: EvalArgs) -> CmdResult {
    let m = model::load_checkpoint(&a.checkpoint)?;
    let d = data::load_dataset(&a.data)?;
    let ev = train::evaluate(&m, &d)?;
    let log_path = a.out.join("routing.vimr");
    analysis::save_log(&log_path, &ev.log)?;
    let metric_name = match m.config.task {
        Task::Classification => "accuracy",
        Task::Segmentation => "miou",
    };
    Ok(json!({
        "metric_name": metric_name,
        "metric": ev.metric,
        "items": d.len(),
        "routing_log": path_str(&log_path),
    }))
}

fn scan_cmd(a: ScanArgs) -> CmdResult {
    let (mc, tc) = read_run_config(&a.config, a.seed)?;
    let data = data::load_dataset(&a.data)?;
    let eval = data::load_dataset(&a.eval_data)?;
    let shared: &[bool] = match a.shared {
        SharedArg::No => &[false],
        SharedArg::Yes => &[true],
        SharedArg::Both => &[false, true],
    };
    for &n in &a.experts {
        mc.clone().with_moe(n, 1, false).validate()?;
    }
    for &l in &a.last_l {
        mc.clone().with_moe(mc.num_experts, l, false).validate()?;
    }
    let cells = train::layer_scan(&mc, &tc, &a.last_l, &a.experts, shared, &data, &eval);
    let csv = a.out.join("scan.csv");
    write(&csv, train::scan_csv(&cells))?;
    let best = cells
        .iter()
        .filter_map(|c| c.final_metric().map(|m| (c, m)))
        .fold(None::<(&train::ScanCell, f64)>, |acc, (c, m)| match acc {
            Some((_, bm)) if bm >= m => acc,
            _ => Some((c, m)),
        });
    Ok(json!({
        "cells": cells.len(),
        "failed": cells.iter().filter(|c| c.result.is_err()).count(),
        "best": best.map(|(c, m)| json!({"experts": c.num_experts, "last_l": c.last_l, "shared": c.shared, "metric": m})),
        "scan_csv": path_str(&csv),
    }))
}

fn arch_summary(a: &ArchArgs, c: &ModelConfig) -> Value {
    json!({
        "preset": a.preset,
        "experts": a.experts,
        "last_l": a.last_l,
        "shared": a.shared,
        "top_k": a.topk,
        "config_hash": format!("{:016x}", c.hash()),
    })
}

fn count_params(a: ArchArgs) -> CmdResult {
    let c = a.config()?;
    let r = model::count_params(&c)?;
    let mut s = arch_summary(&a, &c);
    s["total_params"] = json!(r.total_params);
    s["activated_params"] = json!(r.activated_params);
    s["total_m"] = json!(format!("{:.1}M", r.total_params as f64 / 1e6));
    s["activated_m"] = json!(format!("{:.1}M", r.activated_params as f64 / 1e6));
    Ok(s)
}

fn count_flops(a: ArchArgs, resolution: Option<usize>) -> CmdResult {
    let c = a.config()?;
    let res = resolution.unwrap_or(c.image_size);
    let r = model::count_flops(&c, res)?;
    let mut s = arch_summary(&a, &c);
    s["resolution"] = json!(res);
    s["flops"] = json!(r.flops);
    s["gflops"] = json!(format!("{:.2}G", r.flops as f64 / 1e9));
    Ok(s)
}

/// MoE blocks selected by `--layer` (all when omitted).
fn selected_blocks(log: &RoutingLog, layer: Option<usize>) -> vimoe::Result<Vec<usize>> {
    match layer {
        Some(ell) => {
            let b = log.block_of_ell(ell)?;
            log.check_layer(b)?;
            Ok(vec![b])
        }
        None => Ok(log.moe_blocks.iter().rev().map(|&b| b as usize).collect()),
    }
}

fn analyze(a: AnalyzeCmd) -> CmdResult {
    match a {
        AnalyzeCmd::Heatmap { log, out } => {
            let l = analysis::load_log(&log.log)?;
            let mut files = Vec::new();
            let mut scores = Vec::new();
            for b in selected_blocks(&l, log.layer)? {
                let h = analysis::build_heatmap(&l, b)?;
                let p = out.join(format!("heatmap_l{}.csv", h.ell));
                write(&p, h.to_csv())?;
                scores.push(json!({"layer": h.ell, "block": b, "score": analysis::specialization_score(&h)?}));
                files.push(path_str(&p));
            }
            Ok(json!({"heatmaps": files, "scores": scores}))
        }
        AnalyzeCmd::Load { log, out } => {
            let l = analysis::load_log(&log.log)?;
            let p = out.join("loads.csv");
            let mut loads = Vec::new();
            for b in selected_blocks(&l, log.layer)? {
                loads.push(json!({"layer": l.ell_of_block(b), "block": b, "load": analysis::expert_load(&l, b)?}));
            }
            write(&p, analysis::loads_csv(&l)?)?;
            Ok(json!({"loads": loads, "loads_csv": path_str(&p)}))
        }
        AnalyzeCmd::Recommend { log, tau, out } => {
            let l = analysis::load_log(&log.log)?;
            let (reports, rec) = analysis::layer_reports(&l, tau)?;
            let p = out.join("reports.csv");
            write(&p, analysis::reports_csv(&reports))?;
            let scores: Vec<Value> = reports
                .iter()
                .map(|r| json!({"layer": r.ell, "block": r.block, "score": r.score, "keep": r.keep}))
                .collect();
            Ok(json!({
                "tau": tau,
                "keep": rec.keep,
                "degree": degree_json(rec.degree),
                "low_degree": rec.low_degree,
                "suggested_experts": rec.suggested_experts,
                "scores": scores,
                "reports_csv": path_str(&p),
            }))
        }
        AnalyzeCmd::Degree { log, out } => {
            let l = analysis::load_log(&log.log)?;
            let blocks: Vec<u32> = selected_blocks(&l, log.layer)?.iter().map(|&b| b as u32).collect();
            let empirical = analysis::empirical_degree(&l, &blocks)?;
            let theoretical = model::routing_degree(l.num_experts, l.top_k, blocks.len())?;
            let mut s = json!({
                "layers": blocks.len(),
                "empirical_degree": empirical,
                "theoretical_degree": degree_json(theoretical),
            });
            if let Some(out) = out {
                let p = out.join("degree.csv");
                write(&p, format!("layers,empirical,theoretical\n{},{empirical},{theoretical}\n", blocks.len()))?;
                s["degree_csv"] = json!(path_str(&p));
            }
            Ok(s)
        }
        AnalyzeCmd::Allocmap { log, item, scale, out } => {
            let l = analysis::load_log(&log.log)?;
            if scale == 0 {
                return Err(vimoe::Error::Config("--scale must be positive".into()).into());
            }
            let mut files = Vec::new();
            for b in selected_blocks(&l, log.layer)? {
                let map = analysis::allocation_map(&l, item, b)?;
                let p = out.join(format!("alloc_l{}_item{item}.ppm", l.ell_of_block(b)));
                write(&p, map.to_ppm(scale))?;
                files.push(path_str(&p));
            }
            Ok(json!({"item": item, "maps": files}))
        }
    }
}
