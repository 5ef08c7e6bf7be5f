//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line on
//! stderr; the test fails if any criterion fails.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use vimoe::analysis::{self, build_heatmap, expert_load, specialization_score, RoutingLog, RoutingRecord};
use vimoe::data::{self, gen_cluster_classification, Dataset, GenConfig, Labels, Split};
use vimoe::model::{self, count_flops, count_params, routing_degree, Checkpoint, ModelConfig, Task, ViMoE};
use vimoe::moe::{AuxLossAccumulator, Renorm, RoutingMode};
use vimoe::numerics::{relative_error, Tape, Tensor};
use vimoe::rng::stream;
use vimoe::train::{self, TrainConfig};
use vimoe::vit::Init;

type Outcome = Result<String, String>;

fn report(id: usize, name: &str, outcome: &Outcome, secs: f64) {
    let (tag, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let line = format!("{tag} [{id:>2}] {name} ({detail}; {secs:.1}s)\n");
    std::io::stderr().write_all(line.as_bytes()).unwrap();
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn millions(n: u64) -> String {
    format!("{:.1}", n as f64 / 1e6)
}

fn vit_s(n: usize, l: usize, shared: bool) -> ModelConfig {
    ModelConfig::vit_s_14().with_moe(n, l, shared)
}

fn param_counts() -> Outcome {
    let rows: [(usize, usize, bool, &str, Option<&str>); 6] = [
        (8, 0, false, "22.0", Some("22.0")),
        (2, 5, false, "27.9", None),
        (2, 5, true, "33.8", Some("27.9")),
        (4, 3, true, "36.2", Some("25.6")),
        (8, 2, true, "40.9", Some("24.4")),
        (8, 12, true, "135.5", Some("36.2")),
    ];
    for (n, l, shared, total, active) in rows {
        let r = count_params(&vit_s(n, l, shared)).map_err(|e| e.to_string())?;
        check(millions(r.total_params) == total, || {
            format!("N={n} L={l} shared={shared}: total {} vs {total}M", millions(r.total_params))
        })?;
        if let Some(a) = active {
            check(millions(r.activated_params) == a, || {
                format!("N={n} L={l} shared={shared}: activated {} vs {a}M", millions(r.activated_params))
            })?;
        }
    }
    Ok("6 rows match at 0.1M".into())
}

fn flop_counts() -> Outcome {
    let mut detail = Vec::new();
    for (n, l, expect) in [(8, 0, 6.14), (8, 2, 6.74), (8, 12, 9.77)] {
        let g = count_flops(&vit_s(n, l, l > 0), 224).map_err(|e| e.to_string())?.flops as f64 / 1e9;
        let dev = (g - expect).abs() / expect;
        check(dev <= 0.03, || format!("L={l}: {g:.3}G vs {expect}G"))?;
        detail.push(format!("{g:.2}G"));
    }
    Ok(detail.join(", "))
}

fn degrees() -> Outcome {
    let got: Vec<u128> = [(2, 1, 5), (4, 1, 3), (8, 1, 2)]
        .iter()
        .map(|&(n, k, l)| routing_degree(n, k, l).unwrap())
        .collect();
    check(got == [32, 64, 64], || format!("{got:?}"))?;
    Ok(format!("{got:?}"))
}

fn accumulate(rows: &[Vec<f64>], alpha: f64) -> AuxLossAccumulator {
    let mut acc = AuxLossAccumulator::new(rows[0].len(), alpha);
    for r in rows {
        acc.push_row(r);
    }
    acc
}

/// Straight from the definition, one expert at a time.
fn brute_force_aux(rows: &[Vec<f64>], alpha: f64) -> f64 {
    let (t, n) = (rows.len(), rows[0].len());
    let mut total = 0.0;
    for i in 0..n {
        let mut hits = 0usize;
        let mut mass = 0.0;
        for r in rows {
            let best = (0..n).fold(0, |b, j| if r[j] > r[b] { j } else { b });
            hits += (best == i) as usize;
            mass += r[i];
        }
        total += (hits as f64 / t as f64) * (mass / t as f64);
    }
    alpha * n as f64 * total
}

fn balancing_loss() -> Outcome {
    let alpha = 0.01;
    let uniform = accumulate(&vec![vec![0.25; 4]; 8], alpha).value().unwrap();
    check(uniform == alpha, || format!("uniform gave {uniform}"))?;
    let mut onehot = vec![0.0; 4];
    onehot[2] = 1.0;
    let collapsed = accumulate(&vec![onehot; 6], alpha).value().unwrap();
    check(collapsed == alpha * 4.0, || format!("collapse gave {collapsed}"))?;
    let hand = vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.6, 0.4], vec![0.3, 0.7]];
    let acc = accumulate(&hand, alpha);
    check(acc.f() == vec![0.75, 0.25], || format!("f = {:?}", acc.f()))?;
    let v = acc.value().unwrap();
    check((v - 1.15 * alpha).abs() < 1e-15, || format!("hand example gave {v}"))?;
    check((brute_force_aux(&hand, alpha) - v).abs() < 1e-15, || "hand example vs brute force".into())?;

    let mut rng = stream(42, &[4]);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=8usize);
        let t = rng.random_range(1..=40usize);
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                let z: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0f64).exp()).collect();
                let s: f64 = z.iter().sum();
                z.iter().map(|v| v / s).collect()
            })
            .collect();
        let alpha = rng.random_range(0.001..1.0);
        let acc = accumulate(&rows, alpha);
        let got = acc.value().unwrap();
        worst = worst.max((got - brute_force_aux(&rows, alpha)).abs());
        let mut tape = Tape::new();
        let mut taped = AuxLossAccumulator::new(n, alpha);
        let probs = tape.constant(Tensor::new(vec![t, n], rows.concat()).unwrap());
        taped.record(&tape, probs);
        let l = taped.loss(&mut tape).unwrap();
        worst = worst.max((tape.value(l).item() - got).abs());
    }
    check(worst < 1e-12, || format!("worst oracle gap {worst:e}"))?;
    Ok(format!("uniform = α, collapse = Nα, hand = 1.15α, 100 random within {worst:.1e}"))
}

fn random_image(seed: u64, cfg: &ModelConfig) -> Tensor {
    Init { seed }.normal("probe", &[cfg.in_channels, cfg.image_size, cfg.image_size], 1.0)
}

fn replication() -> Outcome {
    let base = ModelConfig::vit_tiny_lab();
    let mut configs = Vec::new();
    for (n, l, shared) in [(2, 1, false), (4, 2, true), (4, 6, true), (8, 3, false), (3, 6, false)] {
        configs.push(base.clone().with_moe(n, l, shared));
    }
    let mut topk2 = base.clone().with_moe(4, 3, true);
    topk2.top_k = 2;
    configs.push(topk2);
    configs.push(base.clone().with_task(Task::Segmentation).with_moe(4, 2, true));
    let mut worst = 0.0f64;
    for (ci, cfg) in configs.iter().enumerate() {
        check(cfg.renorm == Renorm::TopK, || "renorm must be topk".into())?;
        let moe = ViMoE::build(cfg, 31).map_err(|e| e.to_string())?;
        let dense = ViMoE::build(&cfg.dense(), 31).map_err(|e| e.to_string())?;
        for s in 0..10 {
            let img = random_image(1000 + 10 * ci as u64 + s, cfg);
            let a = moe.predict(&img).unwrap().logits;
            let b = dense.predict(&img).unwrap().logits;
            worst = worst.max(a.max_abs_diff(&b));
        }
    }
    check(worst < 1e-10, || format!("max deviation {worst:e}"))?;
    Ok(format!("{} configs × 10 inputs, max deviation {worst:.1e}", configs.len()))
}

fn total_loss(m: &ViMoE, tape: &mut Tape, bound: &model::params::Bound, images: &[(Tensor, Vec<usize>)]) -> vimoe::Result<vimoe::numerics::Var> {
    let mut accs: Vec<AuxLossAccumulator> = (0..m.config.moe_blocks().len())
        .map(|_| AuxLossAccumulator::new(m.config.num_experts, m.config.alpha))
        .collect();
    let mut logits = Vec::new();
    let mut targets = Vec::new();
    for (img, t) in images {
        let f = m.forward(tape, bound, img)?;
        for (acc, tr) in accs.iter_mut().zip(&f.moe) {
            acc.record(tape, tr.probs);
        }
        logits.push(f.logits);
        targets.extend(t);
    }
    let logits = tape.concat_rows(&logits)?;
    let ce = tape.cross_entropy(logits, &targets)?;
    let aux = vimoe::moe::total_aux_loss(tape, &accs)?;
    tape.add(ce, aux)
}

/// Smallest gap between the k-th and (k+1)-th gate probability, and between
/// the top two, over every decision.
fn decision_margin(m: &ViMoE, images: &[(Tensor, Vec<usize>)]) -> f64 {
    let mut margin = f64::INFINITY;
    for (img, _) in images {
        for layer in m.predict(img).unwrap().routing {
            for d in layer {
                let mut p = d.probs.clone();
                p.sort_by(|a, b| b.total_cmp(a));
                margin = margin.min(p[0] - p[1]);
                margin = margin.min(p[m.config.top_k - 1] - p[m.config.top_k]);
            }
        }
    }
    margin
}

fn gradients() -> Outcome {
    let mut cls = ModelConfig::vit_tiny_lab().with_moe(4, 2, true);
    cls.alpha = 0.5;
    let mut seg = ModelConfig::vit_tiny_lab().with_task(Task::Segmentation).with_moe(4, 2, true);
    seg.top_k = 2;
    seg.alpha = 0.5;
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for (ci, cfg) in [cls, seg].into_iter().enumerate() {
        let mut m = ViMoE::build(&cfg, 17).map_err(|e| e.to_string())?;
        for p in m.store.iter_mut() {
            let noise = Init { seed: 18 }.normal(&p.name, p.value.shape(), 0.1);
            for (a, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
                *a += n;
            }
        }
        let images: Vec<(Tensor, Vec<usize>)> = (0..2)
            .map(|s| {
                let img = random_image(500 + s, &cfg);
                let t = match cfg.task {
                    Task::Classification => vec![s as usize % cfg.num_classes],
                    Task::Segmentation => (0..cfg.token_count() - 1).map(|j| (j + s as usize) % cfg.num_classes).collect(),
                };
                (img, t)
            })
            .collect();
        let margin = decision_margin(&m, &images);
        check(margin > 1e-6, || format!("config {ci}: routing margin {margin:e} is not tie-free"))?;

        let mut tape = Tape::new();
        let bound = m.store.bind(&mut tape, true);
        let loss = total_loss(&m, &mut tape, &bound, &images).map_err(|e| e.to_string())?;
        tape.backward(loss).map_err(|e| e.to_string())?;
        let eval = |m: &ViMoE| {
            let mut tape = Tape::new();
            let b = m.store.bind(&mut tape, false);
            let l = total_loss(m, &mut tape, &b, &images).unwrap();
            tape.value(l).item()
        };

        let mut names: Vec<String> = Vec::new();
        for b in cfg.moe_blocks() {
            names.push(format!("blocks.{b}.moe.gate"));
            for e in 0..cfg.num_experts {
                names.push(format!("blocks.{b}.moe.experts.{e}.fc1.weight"));
                names.push(format!("blocks.{b}.moe.experts.{e}.fc2.bias"));
            }
            names.push(format!("blocks.{b}.moe.shared.fc1.weight"));
            names.push(format!("blocks.{b}.moe.shared.fc2.weight"));
        }
        names.extend(["blocks.0.attn.qkv.weight", "blocks.1.mlp.fc1.weight", "head.weight", "norm.gamma"].map(String::from));
        let mut rng = stream(19, &[ci as u64]);
        let h = 1e-5;
        let mut gate_nonzero = false;
        for name in &names {
            let id = m.store.find(name).ok_or_else(|| format!("missing parameter {name}"))?;
            let analytic = tape.grad(bound.var(id)).unwrap_or_else(|| Tensor::zeros(m.store.value(id).shape()));
            for _ in 0..2 {
                let j = rng.random_range(0..m.store.value(id).len());
                let orig = m.store.value(id).data()[j];
                m.store.value_mut(id).data_mut()[j] = orig + h;
                let up = eval(&m);
                m.store.value_mut(id).data_mut()[j] = orig - h;
                let down = eval(&m);
                m.store.value_mut(id).data_mut()[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let err = relative_error(analytic.data()[j], fd);
                worst = worst.max(err);
                check(err < 1e-4, || format!("{name}[{j}]: analytic {} vs numeric {fd}", analytic.data()[j]))?;
                if name.ends_with("gate") && analytic.data()[j].abs() > 1e-8 {
                    gate_nonzero = true;
                }
                checked += 1;
            }
        }
        check(gate_nonzero, || format!("config {ci}: gate gradients were all zero"))?;
    }
    check(checked >= 20, || format!("only {checked} coordinates"))?;
    Ok(format!("{checked} coordinates, worst relative error {worst:.1e}"))
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const LS: [usize; 4] = [1, 2, 4, 6];
const DATA_SEED: u64 = 2024;

fn lab_training() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 32,
        warmup_epochs: 1,
        eval_every: 5,
        ..TrainConfig::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct Trained {
    model: ViMoE,
    accuracy: f64,
}

fn train_lab(l: usize, shared: bool, seed: u64, data: &Dataset, test: &Dataset) -> Result<Trained, String> {
    let cfg = ModelConfig::vit_tiny_lab().with_moe(4, l, shared);
    let tc = TrainConfig { seed, ..lab_training() };
    let mut model = ViMoE::build(&cfg, seed).map_err(|e| e.to_string())?;
    let run = train::train(&mut model, data, Some(test), &tc).map_err(|e| e.to_string())?;
    if let Some(e) = run.failure {
        return Err(format!("L={l} shared={shared} seed={seed}: {e}"));
    }
    let accuracy = run.record.final_metric().ok_or("no metric")?;
    Ok(Trained { model, accuracy })
}

fn heatmap_csvs(log: &RoutingLog) -> Vec<String> {
    log.moe_blocks.iter().map(|&b| build_heatmap(log, b as usize).unwrap().to_csv()).collect()
}

/// Runs the shared grid once and returns the outcomes of criteria 7 and 8.
fn toy_experiments() -> (Outcome, f64, Outcome, f64) {
    let t0 = Instant::now();
    let g = GenConfig::default();
    let data = gen_cluster_classification(8, 2048, DATA_SEED, Split::Train, &g).unwrap();
    let test = gen_cluster_classification(8, 512, DATA_SEED, Split::Test, &g).unwrap();
    // acc[shared][seed][l]
    let mut acc = vec![vec![vec![0.0; LS.len()]; SEEDS.len()]; 2];
    let mut deep_models = Vec::new();
    for (si, &seed) in SEEDS.iter().enumerate() {
        for (li, &l) in LS.iter().enumerate() {
            for shared in [false, true] {
                match train_lab(l, shared, seed, &data, &test) {
                    Ok(t) => {
                        acc[shared as usize][si][li] = t.accuracy;
                        if shared && l == 6 {
                            deep_models.push(t.model);
                        }
                    }
                    Err(e) => {
                        let out = Err(e);
                        return (out.clone(), t0.elapsed().as_secs_f64(), out, 0.0);
                    }
                }
            }
        }
    }
    let spread = |s: usize| {
        median(
            acc[s]
                .iter()
                .map(|row| row.iter().cloned().fold(f64::MIN, f64::max) - row.iter().cloned().fold(f64::MAX, f64::min))
                .collect(),
        )
    };
    let (spread_plain, spread_shared) = (spread(0), spread(1));
    let shared_medians: Vec<f64> = (0..LS.len()).map(|li| median(acc[1].iter().map(|r| r[li]).collect())).collect();
    let best = shared_medians.iter().cloned().fold(f64::MIN, f64::max);
    let at_depth = shared_medians[LS.len() - 1];
    let c7 = (|| {
        check(spread_shared <= spread_plain, || {
            format!("median spread with shared {spread_shared:.4} > without {spread_plain:.4}")
        })?;
        check(at_depth >= best - 0.01, || format!("L=depth median {at_depth:.4} vs best {best:.4}"))?;
        Ok(format!(
            "median spread shared {spread_shared:.4} vs plain {spread_plain:.4}; shared L=6 {at_depth:.4} vs best {best:.4}"
        ))
    })();
    let t7 = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let c8 = (|| {
        let mut deep = Vec::new();
        let mut shallow = Vec::new();
        for (si, m) in deep_models.iter().enumerate() {
            let log = train::evaluate(m, &test).map_err(|e| e.to_string())?.log;
            let score = |b: usize| specialization_score(&build_heatmap(&log, b).unwrap()).unwrap();
            deep.push(score(5));
            shallow.push(score(0));
            let again = train_lab(6, true, SEEDS[si], &data, &test)?;
            let log2 = train::evaluate(&again.model, &test).map_err(|e| e.to_string())?.log;
            check(heatmap_csvs(&log) == heatmap_csvs(&log2), || format!("seed {si}: heatmap CSVs differ on rerun"))?;
        }
        let (d, s) = (median(deep), median(shallow));
        check(d > s, || format!("deepest median {d:.4} <= shallowest median {s:.4}"))?;
        Ok(format!("median score deepest {d:.4} vs shallowest {s:.4}; CSVs reproducible for 5 seeds"))
    })();
    (c7, t7, c8, t1.elapsed().as_secs_f64())
}

fn load_consistency() -> Outcome {
    let g = GenConfig::default();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut epochs = 0;
    for (ci, cfg) in [
        ModelConfig::vit_tiny_lab().with_moe(4, 3, true),
        ModelConfig::vit_tiny_lab().with_task(Task::Segmentation).with_moe(3, 2, false),
    ]
    .into_iter()
    .enumerate()
    {
        let data = match cfg.task {
            Task::Classification => gen_cluster_classification(8, 192, 5, Split::Train, &g),
            Task::Segmentation => data::gen_region_segmentation(8, 48, 5, Split::Train, &g),
        }
        .unwrap();
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 16,
            warmup_epochs: 1,
            log_routing: true,
            seed: 7,
            ..TrainConfig::default()
        };
        let mut m = ViMoE::build(&cfg, 7).unwrap();
        let run = train::train(&mut m, &data, None, &tc).map_err(|e| e.to_string())?;
        check(run.logs.len() == run.record.epochs.len(), || "one log per epoch".into())?;
        for (e, log) in run.record.epochs.iter().zip(&run.logs) {
            let path = dir.path().join(format!("c{ci}_e{}.vimr", e.epoch));
            analysis::save_log(&path, log).unwrap();
            let back = analysis::load_log(&path).map_err(|e| e.to_string())?;
            for (j, &b) in run.record.moe_blocks.iter().enumerate() {
                let f = expert_load(&back, b).map_err(|e| e.to_string())?;
                check(f == e.expert_load[j], || {
                    format!("config {ci} epoch {} block {b}: {f:?} vs {:?}", e.epoch, e.expert_load[j])
                })?;
            }
            let aux = analysis::aux_loss_from_log(&back, tc.batch_size, cfg.alpha).map_err(|e| e.to_string())?;
            check(aux == e.aux_loss, || format!("aux {aux} vs {}", e.aux_loss))?;
            epochs += 1;
        }
    }
    Ok(format!("{epochs} logged epochs (image and token routing) match exactly"))
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn awkward_value(rng: &mut impl Rng) -> f64 {
    match rng.random_range(0..10) {
        0 => -0.0,
        1 => f64::MIN_POSITIVE,
        2 => rng.random_range(-1e30..1e30),
        _ => rng.random_range(-4.0..4.0),
    }
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = stream(10, &[10]);
    for trial in 0..8 {
        // VIMD
        let (m, c, s) = (rng.random_range(1..5usize), rng.random_range(1..4usize), rng.random_range(1..9usize));
        let classes = rng.random_range(2..20usize);
        let images = Tensor::new(
            vec![m, c, s, s],
            (0..m * c * s * s).map(|_| awkward_value(&mut rng) as f32 as f64).collect(),
        )
        .unwrap();
        let labels = if trial % 2 == 0 {
            Labels::Class((0..m).map(|_| rng.random_range(0..classes) as u16).collect())
        } else {
            Labels::Maps((0..m * s * s).map(|_| rng.random_range(0..classes) as u16).collect())
        };
        let split = if rng.random_bool(0.5) { Split::Train } else { Split::Test };
        let d = Dataset::new(images, labels, classes, split).unwrap();
        let path = dir.path().join(format!("d{trial}.vimd"));
        data::save_dataset(&path, &d).unwrap();
        let back = data::load_dataset(&path).map_err(|e| e.to_string())?;
        check(back.labels == d.labels && back.split == d.split && back.num_classes == d.num_classes, || "dataset fields".into())?;
        check(bits(&back.images) == bits(&d.images), || format!("trial {trial}: dataset pixels"))?;
        check(back.to_bytes().unwrap() == std::fs::read(&path).unwrap(), || "dataset bytes".into())?;

        // VIMO
        let mut cfg = ModelConfig {
            embed_dim: 8,
            heads: 2,
            depth: rng.random_range(1..4),
            mlp_ratio: 2,
            num_classes: 3,
            ..ModelConfig::vit_tiny_lab()
        };
        if trial % 2 == 1 {
            cfg = cfg.with_task(Task::Segmentation);
        }
        let last_l = rng.random_range(0..=cfg.depth);
        let cfg = cfg.with_moe(rng.random_range(2..5), last_l, rng.random_bool(0.5));
        let mut model = ViMoE::build(&cfg, trial).unwrap();
        for p in model.store.iter_mut() {
            for v in p.value.data_mut() {
                *v = awkward_value(&mut rng);
            }
        }
        let path = dir.path().join(format!("m{trial}.vimo"));
        model::save_checkpoint(&path, &model).unwrap();
        let loaded = model::load_checkpoint(&path).map_err(|e| e.to_string())?;
        let (a, b) = (Checkpoint::from_model(&model), Checkpoint::from_model(&loaded));
        check(a.config == b.config, || "checkpoint config".into())?;
        for ((na, ta), (nb, tb)) in a.params.iter().zip(&b.params) {
            check(na == nb && ta.shape() == tb.shape() && bits(ta) == bits(tb), || format!("tensor {na}"))?;
        }
        check(b.to_bytes() == std::fs::read(&path).unwrap(), || "checkpoint bytes".into())?;

        // VIMR
        let n = rng.random_range(1..6usize);
        let k = rng.random_range(1..=n);
        let mode = if trial % 2 == 0 { RoutingMode::Image } else { RoutingMode::Token };
        let depth = 4;
        let moe_blocks: Vec<u32> = (depth - rng.random_range(1..=depth)..depth).map(|b| b as u32).collect();
        let records = (0..rng.random_range(0..30))
            .map(|_| {
                let mut experts: Vec<u16> = (0..n as u16).collect();
                for i in 0..n {
                    experts.swap(i, rng.random_range(i..n));
                }
                RoutingRecord {
                    layer: moe_blocks[rng.random_range(0..moe_blocks.len())],
                    item: rng.random(),
                    token: if mode == RoutingMode::Image { -1 } else { rng.random_range(0..17) },
                    label: rng.random_range(-1..8),
                    selected: experts[..k].to_vec(),
                    probs: (0..n).map(|_| awkward_value(&mut rng).abs()).collect(),
                }
            })
            .collect();
        let log = RoutingLog {
            num_experts: n,
            top_k: k,
            mode,
            depth: depth as usize,
            num_classes: 8,
            grid: 4,
            moe_blocks,
            model_hash: rng.random(),
            dataset_hash: rng.random(),
            records,
        };
        let path = dir.path().join(format!("r{trial}.vimr"));
        analysis::save_log(&path, &log).unwrap();
        let back = analysis::load_log(&path).map_err(|e| e.to_string())?;
        check(back.to_bytes() == log.to_bytes(), || format!("trial {trial}: log bytes"))?;
        let same_bits = back
            .records
            .iter()
            .zip(&log.records)
            .all(|(x, y)| x.probs.iter().zip(&y.probs).all(|(p, q)| p.to_bits() == q.to_bits()));
        check(back.records.len() == log.records.len() && same_bits, || "log records".into())?;
    }
    Ok("8 random instances per format, bitwise identical".into())
}

#[test]
fn acceptance() {
    let mut failures = Vec::new();
    let mut run = |id: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let out = f();
        report(id, name, &out, t.elapsed().as_secs_f64());
        if out.is_err() {
            failures.push(id);
        }
    };
    run(1, "parameter counts of ViT-S/14 variants", &param_counts);
    run(2, "FLOPs at 224×224 within 3%", &flop_counts);
    run(3, "routing degree", &degrees);
    run(4, "load-balancing loss oracles", &balancing_loss);
    run(5, "replication identity", &replication);
    run(6, "end-to-end gradients vs finite differences", &gradients);

    let (c7, t7, c8, t8) = toy_experiments();
    report(7, "shared experts stabilize accuracy across L", &c7, t7);
    report(8, "deep layers specialize more than shallow ones", &c8, t8);
    for (id, out) in [(7, &c7), (8, &c8)] {
        if out.is_err() {
            failures.push(id);
        }
    }

    let mut run = |id: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let out = f();
        report(id, name, &out, t.elapsed().as_secs_f64());
        if out.is_err() {
            failures.push(id);
        }
    };
    run(9, "analysis expert load equals trainer statistics", &load_consistency);
    run(10, "format round trips", &round_trips);
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
