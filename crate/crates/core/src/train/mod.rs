//! AdamW with layer-wise decay, the training loop, evaluation and layer
//! scans.

mod optim;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::analysis::RoutingLog;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{parse, ModelConfig, Task, ViMoE};
use crate::moe::{total_aux_loss, total_aux_value, AuxLossAccumulator};
use crate::numerics::{Tape, Tensor};
use crate::rng;

pub use optim::{adamw_step, clip_global_norm, lr_multiplier, schedule_lr, AdamState, BETA1, BETA2, EPS};

const SHUFFLE_KEY: u64 = 0x5348_5546;
pub const CLIP_NORM: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    /// Per-block learning-rate factor, counted from the top block.
    pub layer_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    /// Keep a routing log of every training epoch.
    pub log_routing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            peak_lr: 1e-3,
            weight_decay: 0.05,
            layer_decay: 0.65,
            warmup_epochs: 3,
            seed: 0,
            eval_every: 1,
            log_routing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::Config(format!("layer_decay must be in (0, 1], got {}", self.layer_decay)));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr must be finite and >= 0, got {}", self.peak_lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be finite and >= 0".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "peak_lr" => self.peak_lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "layer_decay" => self.layer_decay = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "log_routing" => self.log_routing = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "epochs={}\nbatch_size={}\npeak_lr={:?}\nweight_decay={:?}\nlayer_decay={:?}\nwarmup_epochs={}\nseed={}\neval_every={}\nlog_routing={}\n",
            self.epochs,
            self.batch_size,
            self.peak_lr,
            self.weight_decay,
            self.layer_decay,
            self.warmup_epochs,
            self.seed,
            self.eval_every,
            self.log_routing
        )
    }
}

/// Parses a `key=value` run file. `preset` (if present) is applied first,
/// then `task`, then every other key in file order. Blank lines and `#`
/// comments are ignored; unknown keys are errors.
pub fn parse_run_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let mut pairs = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", no + 1)))?;
        pairs.push((k.trim(), v.trim()));
    }
    let mut model = ModelConfig::vit_tiny_lab();
    if let Some((_, v)) = pairs.iter().find(|(k, _)| *k == "preset") {
        model = ModelConfig::preset(v)?;
    }
    if let Some((_, v)) = pairs.iter().find(|(k, _)| *k == "task") {
        model = model.with_task(v.parse()?);
    }
    let mut train = TrainConfig::default();
    for (k, v) in pairs {
        if k == "preset" || k == "task" {
            continue;
        }
        if !model.set(k, v)? && !train.set(k, v)? {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub aux_loss: f64,
    pub metric: Option<f64>,
    /// Per MoE layer (block order), fraction of routing units whose top-1
    /// expert is `e`.
    pub expert_load: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub moe_blocks: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
}

impl RunRecord {
    pub fn final_metric(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.metric)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,task_loss,aux_loss,metric");
        for b in &self.moe_blocks {
            write!(s, ",load_block{b}").unwrap();
        }
        s.push('\n');
        for e in &self.epochs {
            let metric = e.metric.map(|m| m.to_string()).unwrap_or_default();
            write!(s, "{},{},{},{}", e.epoch, e.task_loss, e.aux_loss, metric).unwrap();
            for load in &e.expert_load {
                let v: Vec<String> = load.iter().map(|x| x.to_string()).collect();
                write!(s, ",{}", v.join(" ")).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Result of a training run. `failure` is set when the run stopped early,
/// in which case `record` holds the completed epochs.
pub struct TrainRun {
    pub record: RunRecord,
    /// Per-epoch training routing logs when `log_routing` is on.
    pub logs: Vec<RoutingLog>,
    pub failure: Option<Error>,
}

/// Epoch `epoch`'s visiting order.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[SHUFFLE_KEY, epoch as u64]));
    order
}

fn check_compat(model: &ViMoE, d: &Dataset) -> Result<()> {
    let c = &model.config;
    if d.task() != c.task {
        return Err(Error::Contract(format!("model task {} vs dataset task {}", c.task, d.task())));
    }
    if d.image_size() != c.image_size || d.channels() != c.in_channels {
        return Err(Error::Contract(format!(
            "dataset images are {}×{}×{}, model expects {}×{}×{}",
            d.channels(),
            d.image_size(),
            d.image_size(),
            c.in_channels,
            c.image_size,
            c.image_size
        )));
    }
    if d.num_classes > c.num_classes {
        return Err(Error::Contract(format!(
            "dataset has {} classes, model head has {}",
            d.num_classes, c.num_classes
        )));
    }
    Ok(())
}

fn targets(model: &ViMoE, d: &Dataset, i: usize) -> Result<Vec<usize>> {
    match model.config.task {
        Task::Classification => Ok(vec![d.class(i).expect("classification dataset")]),
        Task::Segmentation => Ok(d
            .patch_labels(i, model.config.patch_size)?
            .labels
            .iter()
            .map(|&c| c as usize)
            .collect()),
    }
}

fn log_item(log: &mut RoutingLog, model: &ViMoE, d: &Dataset, i: usize, routing: &[Vec<crate::moe::GateDecision>]) -> Result<()> {
    match model.config.task {
        Task::Classification => log.push_item(i, routing, d.class(i), &|_| None),
        Task::Segmentation => {
            let patch = d.patch_labels(i, model.config.patch_size)?;
            log.push_item(i, routing, None, &|t| (t > 0).then(|| patch.labels[t - 1] as usize));
        }
    }
    Ok(())
}

struct StepStats {
    task_loss: f64,
    aux_loss: f64,
    layers: Vec<AuxLossAccumulator>,
}

/// Forward and backward over one batch; returns gradients in parameter
/// order (`None` where a parameter is off the graph, e.g. an unselected
/// expert).
fn batch_gradients(
    model: &ViMoE,
    d: &Dataset,
    batch: &[usize],
    mut log: Option<&mut RoutingLog>,
) -> Result<(Vec<Option<Tensor>>, StepStats)> {
    let mut tape = Tape::new();
    let b = model.store.bind(&mut tape, true);
    let n_moe = model.config.moe_blocks().len();
    let mut layers: Vec<AuxLossAccumulator> = (0..n_moe)
        .map(|_| AuxLossAccumulator::new(model.config.num_experts, model.config.alpha))
        .collect();
    let mut logits = Vec::with_capacity(batch.len());
    let mut all_targets = Vec::new();
    for &i in batch {
        let f = model.forward(&mut tape, &b, &d.image(i))?;
        for (acc, t) in layers.iter_mut().zip(&f.moe) {
            acc.record(&tape, t.probs);
        }
        if let Some(log) = log.as_deref_mut() {
            let routing: Vec<_> = f.moe.into_iter().map(|t| t.decisions).collect();
            log_item(log, model, d, i, &routing)?;
        }
        logits.push(f.logits);
        all_targets.extend(targets(model, d, i)?);
    }
    let logits = tape.concat_rows(&logits)?;
    let ce = tape.cross_entropy(logits, &all_targets)?;
    let aux = total_aux_loss(&mut tape, &layers)?;
    let loss = tape.add(ce, aux)?;
    let task_loss = tape.value(ce).item();
    if !tape.value(loss).item().is_finite() {
        return Err(Error::Numeric(format!("loss became {}", tape.value(loss).item())));
    }
    tape.backward(loss)?;
    let grads = b.vars().iter().map(|&v| tape.grad(v)).collect();
    let aux_loss = total_aux_value(&layers)?;
    Ok((
        grads,
        StepStats {
            task_loss,
            aux_loss,
            layers,
        },
    ))
}

/// Trains in place. Errors are returned only for invalid inputs; numeric
/// failures end the run early and are reported in [`TrainRun::failure`].
pub fn train(model: &mut ViMoE, data: &Dataset, eval: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    check_compat(model, data)?;
    if let Some(e) = eval {
        check_compat(model, e)?;
    }
    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let depth = model.config.depth;
    let multipliers: Vec<f64> = model
        .store
        .iter()
        .map(|(_, p)| lr_multiplier(p.group, depth, cfg.layer_decay))
        .collect();
    let mut state = AdamState::new(&model.store);
    let moe_blocks = model.config.moe_blocks();
    let mut run = TrainRun {
        record: RunRecord {
            moe_blocks: moe_blocks.clone(),
            epochs: Vec::new(),
        },
        logs: Vec::new(),
        failure: None,
    };
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, cfg.seed, epoch);
        let mut log = cfg.log_routing.then(|| RoutingLog::for_model(model, data.hash()));
        let mut task_losses = Vec::with_capacity(steps_per_epoch);
        let mut aux_losses = Vec::with_capacity(steps_per_epoch);
        let mut counts = vec![vec![0u64; model.config.num_experts]; moe_blocks.len()];
        let mut units = vec![0u64; moe_blocks.len()];
        for batch in order.chunks(cfg.batch_size) {
            let outcome = batch_gradients(model, data, batch, log.as_mut()).and_then(|(mut grads, stats)| {
                clip_global_norm(&mut grads, CLIP_NORM);
                let lr = schedule_lr(cfg, step, total_steps, steps_per_epoch);
                let lrs: Vec<f64> = multipliers.iter().map(|m| lr * m).collect();
                adamw_step(&mut model.store, &grads, &mut state, &lrs, cfg.weight_decay)?;
                Ok(stats)
            });
            let stats = match outcome {
                Ok(s) => s,
                Err(e) => {
                    run.failure = Some(e);
                    return Ok(run);
                }
            };
            task_losses.push(stats.task_loss);
            aux_losses.push(stats.aux_loss);
            for (j, acc) in stats.layers.iter().enumerate() {
                for (c, a) in counts[j].iter_mut().zip(&acc.counts) {
                    *c += a;
                }
                units[j] += acc.tokens;
            }
            step += 1;
        }
        let evaluate_now = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let metric = match (evaluate_now, eval) {
            (true, Some(e)) => Some(evaluate(model, e)?.metric),
            _ => None,
        };
        let expert_load = counts
            .iter()
            .zip(&units)
            .map(|(c, &u)| c.iter().map(|&x| x as f64 / u as f64).collect())
            .collect();
        run.record.epochs.push(EpochRecord {
            epoch,
            task_loss: crate::analysis::mean(&task_losses),
            aux_loss: crate::analysis::mean(&aux_losses),
            metric,
            expert_load,
        });
        if let Some(l) = log {
            run.logs.push(l);
        }
    }
    Ok(run)
}

pub struct Evaluation {
    /// Top-1 accuracy, or mean IoU over patch tokens for segmentation.
    pub metric: f64,
    pub log: RoutingLog,
}

pub fn evaluate(model: &ViMoE, d: &Dataset) -> Result<Evaluation> {
    check_compat(model, d)?;
    let mut log = RoutingLog::for_model(model, d.hash());
    let c = model.config.num_classes;
    let mut correct = 0usize;
    let mut inter = vec![0u64; c];
    let mut union = vec![0u64; c];
    for i in 0..d.len() {
        let p = model.predict(&d.image(i))?;
        log_item(&mut log, model, d, i, &p.routing)?;
        let t = targets(model, d, i)?;
        for (r, &truth) in t.iter().enumerate() {
            let row = p.logits.row(r);
            let pred = crate::moe::argmax(row);
            match model.config.task {
                Task::Classification => correct += (pred == truth) as usize,
                Task::Segmentation => {
                    if pred == truth {
                        inter[truth] += 1;
                        union[truth] += 1;
                    } else {
                        union[truth] += 1;
                        union[pred] += 1;
                    }
                }
            }
        }
    }
    let metric = match model.config.task {
        Task::Classification => correct as f64 / d.len() as f64,
        Task::Segmentation => {
            let ious: Vec<f64> = (0..c)
                .filter(|&k| union[k] > 0)
                .map(|k| inter[k] as f64 / union[k] as f64)
                .collect();
            crate::analysis::mean(&ious)
        }
    };
    Ok(Evaluation { metric, log })
}

#[derive(Debug)]
pub struct ScanCell {
    pub num_experts: usize,
    pub last_l: usize,
    pub shared: bool,
    pub result: std::result::Result<RunRecord, String>,
}

impl ScanCell {
    pub fn final_metric(&self) -> Option<f64> {
        self.result.as_ref().ok().and_then(|r| r.final_metric())
    }
}

/// Trains one model per `(N, L, shared)` cell, in parallel. `L = 0` cells
/// collapse to a single dense run.
pub fn layer_scan(
    base: &ModelConfig,
    cfg: &TrainConfig,
    l_values: &[usize],
    n_values: &[usize],
    shared_values: &[bool],
    data: &Dataset,
    eval: &Dataset,
) -> Vec<ScanCell> {
    let mut cells = Vec::new();
    for &l in l_values {
        if l == 0 {
            if !cells.iter().any(|c: &(usize, usize, bool)| c.1 == 0) {
                cells.push((base.num_experts, 0, false));
            }
            continue;
        }
        for &n in n_values {
            for &s in shared_values {
                cells.push((n, l, s));
            }
        }
    }
    cells
        .par_iter()
        .map(|&(n, l, shared)| {
            let result = run_cell(base, cfg, n, l, shared, data, eval).map_err(|e| e.to_string());
            ScanCell {
                num_experts: n,
                last_l: l,
                shared,
                result,
            }
        })
        .collect()
}

fn run_cell(
    base: &ModelConfig,
    cfg: &TrainConfig,
    n: usize,
    l: usize,
    shared: bool,
    data: &Dataset,
    eval: &Dataset,
) -> Result<RunRecord> {
    let mc = base.clone().with_moe(n, l, shared);
    let mut model = ViMoE::build(&mc, cfg.seed)?;
    let run = train(&mut model, data, Some(eval), cfg)?;
    match run.failure {
        Some(e) => Err(e),
        None => Ok(run.record),
    }
}

pub fn scan_csv(cells: &[ScanCell]) -> String {
    let mut s = String::from("N,L,shared,final_metric,error\n");
    for c in cells {
        let metric = c.final_metric().map(|m| m.to_string()).unwrap_or_default();
        let err = c.result.as_ref().err().cloned().unwrap_or_default().replace(',', ";");
        writeln!(s, "{},{},{},{},{}", c.num_experts, c.last_l, c.shared, metric, err).unwrap();
    }
    s
}
