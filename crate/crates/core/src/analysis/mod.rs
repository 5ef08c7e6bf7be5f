//! Routing forensics over [`RoutingLog`]s: heatmaps, specialization, expert
//! load, layer recommendation, allocation maps and routing degree.
//!
//! Public layer numbers count from the top: ℓ = 1 is the deepest
//! block. Internally records carry 0-based block indices.

mod log;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::routing_degree;
use crate::moe::{total_aux_value, AuxLossAccumulator, RoutingMode};

pub use log::{load_log, save_log, RoutingLog, RoutingRecord};

/// Class × expert top-1 fractions for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub block: usize,
    /// Layer number counted from the top, 1 = deepest.
    pub ell: usize,
    pub num_experts: usize,
    /// Row-major `[classes × experts]`, rows in class order.
    pub matrix: Vec<f64>,
    pub counts: Vec<u64>,
    /// Display order of classes (row permutation).
    pub row_order: Vec<usize>,
    /// Display order of experts (column permutation).
    pub col_order: Vec<usize>,
}

impl Heatmap {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.matrix[c * self.num_experts..(c + 1) * self.num_experts]
    }

    /// Matrix in display order.
    pub fn display(&self) -> Vec<Vec<f64>> {
        self.row_order
            .iter()
            .map(|&c| self.col_order.iter().map(|&e| self.row(c)[e]).collect())
            .collect()
    }

    /// Copy with rows and columns physically permuted into display order;
    /// the orders become identities.
    pub fn reordered(&self) -> Heatmap {
        let n = self.num_experts;
        let matrix = self.display().concat();
        Heatmap {
            block: self.block,
            ell: self.ell,
            num_experts: n,
            matrix,
            counts: self.row_order.iter().map(|&c| self.counts[c]).collect(),
            row_order: (0..self.num_classes()).collect(),
            col_order: (0..n).collect(),
        }
    }

    /// CSV with `#` header lines carrying the permutations; values are the
    /// shortest round-trip decimal form of each `f64`.
    pub fn to_csv(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let c = self.num_classes();
        let mut s = String::new();
        writeln!(
            s,
            "# block={} ell={} classes={} experts={}",
            self.block, self.ell, c, self.num_experts
        )
        .unwrap();
        writeln!(s, "# raw_rows={}", join(&(0..c).collect::<Vec<_>>())).unwrap();
        writeln!(s, "# raw_cols={}", join(&(0..self.num_experts).collect::<Vec<_>>())).unwrap();
        writeln!(s, "# display_rows={}", join(&self.row_order)).unwrap();
        writeln!(s, "# display_cols={}", join(&self.col_order)).unwrap();
        s.push_str("class,count");
        for &e in &self.col_order {
            write!(s, ",e{e}").unwrap();
        }
        s.push('\n');
        for &cl in &self.row_order {
            write!(s, "{cl},{}", self.counts[cl]).unwrap();
            for &e in &self.col_order {
                write!(s, ",{}", self.row(cl)[e]).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

fn check_layer(log: &RoutingLog, block: usize) -> Result<()> {
    log.check_layer(block)
}

/// Top-1 fractions per class for `block`. Units without a label (the
/// `[CLS]` token in token mode) are skipped.
pub fn build_heatmap(log: &RoutingLog, block: usize) -> Result<Heatmap> {
    check_layer(log, block)?;
    let (c, n) = (log.num_classes, log.num_experts);
    let mut hits = vec![0u64; c * n];
    let mut counts = vec![0u64; c];
    for r in log.layer_records(block) {
        if r.label < 0 || (log.mode == RoutingMode::Token && r.token == 0) {
            continue;
        }
        let cl = r.label as usize;
        if cl >= c {
            return Err(Error::Contract(format!("label {cl} outside {c} classes")));
        }
        hits[cl * n + r.top1()] += 1;
        counts[cl] += 1;
    }
    let matrix: Vec<f64> = hits
        .iter()
        .enumerate()
        .map(|(i, &h)| if counts[i / n] == 0 { 0.0 } else { h as f64 / counts[i / n] as f64 })
        .collect();
    let (row_order, col_order) = display_order(&hits, &counts, n);
    Ok(Heatmap {
        block,
        ell: log.ell_of_block(block),
        num_experts: n,
        matrix,
        counts,
        row_order,
        col_order,
    })
}

/// Columns by total load descending; rows by the display position of their
/// dominant expert, then by dominance descending. Empty rows go last. All
/// ties fall back to the original index.
fn display_order(hits: &[u64], counts: &[u64], n: usize) -> (Vec<usize>, Vec<usize>) {
    let c = counts.len();
    let load: Vec<u64> = (0..n).map(|e| (0..c).map(|cl| hits[cl * n + e]).sum()).collect();
    let mut cols: Vec<usize> = (0..n).collect();
    cols.sort_by(|&a, &b| load[b].cmp(&load[a]).then(a.cmp(&b)));
    let mut pos = vec![0; n];
    for (p, &e) in cols.iter().enumerate() {
        pos[e] = p;
    }
    let key = |cl: usize| {
        if counts[cl] == 0 {
            return (usize::MAX, 0u128);
        }
        let row = &hits[cl * n..(cl + 1) * n];
        let best = (0..n).fold(0, |b, e| if row[e] > row[b] { e } else { b });
        (pos[best], row[best] as u128)
    };
    let mut rows: Vec<usize> = (0..c).collect();
    // fractions compared exactly by cross-multiplication
    rows.sort_by(|&a, &b| {
        let (pa, ha) = key(a);
        let (pb, hb) = key(b);
        pa.cmp(&pb)
            .then_with(|| (hb * counts[a].max(1) as u128).cmp(&(ha * counts[b].max(1) as u128)))
            .then(a.cmp(&b))
    });
    (rows, cols)
}

/// Mean over non-empty rows of `(max − 1/N)/(1 − 1/N)`.
pub fn specialization_score(h: &Heatmap) -> Result<f64> {
    let n = h.num_experts;
    if n < 2 {
        return Err(Error::Contract("specialization is undefined for a single expert".into()));
    }
    let u = 1.0 / n as f64;
    let mut total = 0.0;
    let mut rows = 0usize;
    for c in 0..h.num_classes() {
        if h.counts[c] == 0 {
            continue;
        }
        let max = h.row(c).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += (max - u) / (1.0 - u);
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Contract("heatmap has no labelled samples".into()));
    }
    Ok(total / rows as f64)
}

/// Fraction of routing units whose top-1 expert is `e`, over every unit of
/// the layer (including `[CLS]` tokens).
pub fn expert_load(log: &RoutingLog, block: usize) -> Result<Vec<f64>> {
    check_layer(log, block)?;
    let mut counts = vec![0u64; log.num_experts];
    let mut total = 0u64;
    for r in log.layer_records(block) {
        counts[r.top1()] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::Contract(format!("no records for block {block}")));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Balancing loss recomputed from a training log whose items appear in
/// processing order: items are chunked into batches of `batch_size`, each
/// batch's per-layer losses are summed, and the batch values averaged.
pub fn aux_loss_from_log(log: &RoutingLog, batch_size: usize, alpha: f64) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }
    let mut batch_values = Vec::new();
    let mut accs: Vec<AuxLossAccumulator> = Vec::new();
    let mut items_in_batch = 0usize;
    let mut last_item: Option<u32> = None;
    let flush = |accs: &mut Vec<AuxLossAccumulator>, out: &mut Vec<f64>| -> Result<()> {
        if !accs.is_empty() {
            out.push(total_aux_value(accs)?);
        }
        *accs = log
            .moe_blocks
            .iter()
            .map(|_| AuxLossAccumulator::new(log.num_experts, alpha))
            .collect();
        Ok(())
    };
    flush(&mut accs, &mut batch_values)?;
    for r in &log.records {
        if last_item != Some(r.item) {
            if items_in_batch == batch_size {
                flush(&mut accs, &mut batch_values)?;
                items_in_batch = 0;
            }
            items_in_batch += 1;
            last_item = Some(r.item);
        }
        let j = log
            .moe_blocks
            .iter()
            .position(|&b| b == r.layer)
            .expect("validated layer");
        accs[j].push_row(&r.probs);
    }
    if items_in_batch > 0 {
        flush(&mut accs, &mut batch_values)?;
    }
    if batch_values.is_empty() {
        return Err(Error::Contract("empty log".into()));
    }
    Ok(mean(&batch_values))
}

/// Index-ordered mean.
pub fn mean(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x;
    }
    s / v.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub block: usize,
    pub ell: usize,
    pub score: f64,
    pub load: Vec<f64>,
    pub keep: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recommendation {
    /// Number of deepest MoE layers to keep.
    pub keep: usize,
    pub degree: u128,
    /// Set when the kept layers give fewer than 32 combinations.
    pub low_degree: bool,
    /// Smallest expert count reaching 32 combinations with the kept
    /// layers, when `low_degree` is set.
    pub suggested_experts: Option<usize>,
}

pub const DEFAULT_TAU: f64 = 0.5;
const MIN_DEGREE: u128 = 32;

/// Keeps the longest run of deepest layers whose score is at least `tau`.
/// `scores` is ordered deepest first.
pub fn recommend_layers(scores: &[f64], n: usize, k: usize, tau: f64) -> Result<Recommendation> {
    let keep = scores.iter().take_while(|&&s| s >= tau).count();
    let degree = routing_degree(n, k, keep)?;
    let low_degree = keep > 0 && degree < MIN_DEGREE;
    let suggested_experts = if low_degree {
        (n + 1..=n + 64).find(|&m| routing_degree(m, k, keep).map_or(true, |d| d >= MIN_DEGREE))
    } else {
        None
    };
    Ok(Recommendation {
        keep,
        degree,
        low_degree,
        suggested_experts,
    })
}

/// Per-layer scores and loads, deepest first, with the keep flags of
/// [`recommend_layers`].
pub fn layer_reports(log: &RoutingLog, tau: f64) -> Result<(Vec<LayerReport>, Recommendation)> {
    let mut reports = Vec::new();
    for &b in log.moe_blocks.iter().rev() {
        let b = b as usize;
        let h = build_heatmap(log, b)?;
        reports.push(LayerReport {
            block: b,
            ell: log.ell_of_block(b),
            score: specialization_score(&h)?,
            load: expert_load(log, b)?,
            keep: false,
        });
    }
    let scores: Vec<f64> = reports.iter().map(|r| r.score).collect();
    let rec = recommend_layers(&scores, log.num_experts, log.top_k, tau)?;
    for r in reports.iter_mut().take(rec.keep) {
        r.keep = true;
    }
    Ok((reports, rec))
}

pub fn reports_csv(reports: &[LayerReport]) -> String {
    let mut s = String::from("ell,block,score,keep,load\n");
    for r in reports {
        let load = r.load.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
        writeln!(s, "{},{},{},{},{}", r.ell, r.block, r.score, r.keep, load).unwrap();
    }
    s
}

pub fn loads_csv(log: &RoutingLog) -> Result<String> {
    let mut s = String::from("ell,block");
    for e in 0..log.num_experts {
        write!(s, ",e{e}").unwrap();
    }
    s.push('\n');
    for &b in log.moe_blocks.iter().rev() {
        let load = expert_load(log, b as usize)?;
        write!(s, "{},{}", log.ell_of_block(b as usize), b).unwrap();
        for v in load {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

/// Fixed 16-colour palette, expert `e` drawn as `PALETTE[e]`.
pub const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [0, 0, 128],
];

/// Patch grid of top-1 experts for one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AllocationMap {
    pub grid: usize,
    pub experts: Vec<u16>,
}

impl AllocationMap {
    /// Binary PPM with each patch drawn as a `scale×scale` block.
    pub fn to_ppm(&self, scale: usize) -> Vec<u8> {
        let side = self.grid * scale;
        let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
        for y in 0..side {
            for x in 0..side {
                let e = self.experts[(y / scale) * self.grid + x / scale] as usize;
                out.extend_from_slice(&PALETTE[e]);
            }
        }
        out
    }
}

pub fn allocation_map(log: &RoutingLog, item: usize, block: usize) -> Result<AllocationMap> {
    if log.mode != RoutingMode::Token {
        return Err(Error::Contract("allocation maps need a token-level routing log".into()));
    }
    if log.num_experts > PALETTE.len() {
        return Err(Error::Contract(format!("palette has {} colours, need {}", PALETTE.len(), log.num_experts)));
    }
    check_layer(log, block)?;
    let g = log.grid;
    let mut experts = vec![None; g * g];
    for r in log.layer_records(block).filter(|r| r.item as usize == item && r.token > 0) {
        let t = r.token as usize - 1;
        if t >= g * g {
            return Err(Error::Contract(format!("token {} outside a {g}×{g} grid", r.token)));
        }
        experts[t] = Some(r.top1() as u16);
    }
    let experts = experts
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Contract(format!("image {item} is missing tokens in block {block}")))?;
    Ok(AllocationMap { grid: g, experts })
}

/// Number of distinct per-image expert tuples across `blocks` (all MoE
/// blocks when empty).
pub fn empirical_degree(log: &RoutingLog, blocks: &[u32]) -> Result<usize> {
    if log.mode != RoutingMode::Image {
        return Err(Error::Contract("empirical degree needs an image-level routing log".into()));
    }
    let blocks: Vec<u32> = if blocks.is_empty() { log.moe_blocks.clone() } else { blocks.to_vec() };
    for &b in &blocks {
        check_layer(log, b as usize)?;
    }
    let mut per_item: std::collections::BTreeMap<u32, Vec<Option<Vec<u16>>>> = Default::default();
    for r in &log.records {
        if let Some(j) = blocks.iter().position(|&b| b == r.layer) {
            let mut sel = r.selected.clone();
            sel.sort_unstable();
            per_item.entry(r.item).or_insert_with(|| vec![None; blocks.len()])[j] = Some(sel);
        }
    }
    let tuples: BTreeSet<Vec<Option<Vec<u16>>>> = per_item.into_values().collect();
    Ok(tuples.len())
}
