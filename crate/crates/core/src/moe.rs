//! Gated sparse mixture of experts with an optional shared expert and the
//! load-balancing auxiliary loss.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::params::{Bound, ParamId};
use crate::numerics::{Tape, Tensor, Var};
use crate::vit::Ffn;

/// Granularity of one gate decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingMode {
    /// One decision per image, taken from the `[CLS]` token.
    Image,
    /// One decision per token.
    Token,
}

/// How the selected gate probabilities become mixing weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Renorm {
    /// Raw gate values `g_i(x)`.
    None,
    /// Selected values rescaled to sum to one.
    TopK,
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoutingMode::Image => "image",
            RoutingMode::Token => "token",
        })
    }
}

impl FromStr for RoutingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(RoutingMode::Image),
            "token" => Ok(RoutingMode::Token),
            _ => Err(Error::Config(format!("unknown routing mode {s:?}"))),
        }
    }
}

impl fmt::Display for Renorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Renorm::None => "none",
            Renorm::TopK => "topk",
        })
    }
}

impl FromStr for Renorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Renorm::None),
            "topk" => Ok(Renorm::TopK),
            _ => Err(Error::Config(format!("unknown renorm mode {s:?}"))),
        }
    }
}

/// Indices of the `k` largest entries, largest first; equal values go to
/// the smaller index.
pub fn top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Index of the largest entry, smallest index on ties.
pub fn argmax(probs: &[f64]) -> usize {
    top_k(probs, 1)[0]
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub probs: Vec<f64>,
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
}

impl GateDecision {
    pub fn from_probs(probs: Vec<f64>, k: usize, renorm: Renorm) -> Self {
        let selected = top_k(&probs, k);
        let denom: f64 = match renorm {
            Renorm::TopK => selected.iter().map(|&e| probs[e]).sum(),
            Renorm::None => 1.0,
        };
        let weights = selected.iter().map(|&e| probs[e] / denom).collect();
        Self {
            probs,
            selected,
            weights,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    /// `[N×D]`, no bias.
    pub gate: ParamId,
    pub experts: Vec<Ffn>,
    pub shared: Option<Ffn>,
    pub k: usize,
    pub routing_mode: RoutingMode,
    pub renorm: Renorm,
}

/// Result of one MoE forward pass.
pub struct MoeOutput {
    pub y: Var,
    /// Gate probabilities, `[R×N]` with `R` routing units.
    pub probs: Var,
    pub decisions: Vec<GateDecision>,
}

/// Gating inputs for a block: the `[CLS]` row in image mode, every row in
/// token mode. `block_hidden` is the normalized post-attention state.
pub fn route_input(tape: &mut Tape, block_hidden: Var, mode: RoutingMode) -> Result<Var> {
    match mode {
        RoutingMode::Image => tape.slice_rows(block_hidden, 0, 1),
        RoutingMode::Token => Ok(block_hidden),
    }
}

impl MoeLayer {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Gate probabilities `softmax(x·Wᵀ)` for `[R×D]` gating inputs.
    pub fn gate_probs(&self, tape: &mut Tape, b: &Bound, gating_input: Var) -> Result<Var> {
        let wt = tape.transpose(b.var(self.gate))?;
        let logits = tape.matmul(gating_input, wt)?;
        tape.softmax(logits)
    }

    /// Gate decision for a single `[D]` vector.
    pub fn gate(&self, tape: &mut Tape, b: &Bound, x: &Tensor) -> Result<GateDecision> {
        let xv = tape.constant(x.clone().reshape(&[1, x.len()])?);
        let p = self.gate_probs(tape, b, xv)?;
        Ok(GateDecision::from_probs(tape.value(p).data().to_vec(), self.k, self.renorm))
    }

    /// `y = Σ_{i∈top-k} w_i·E_i(x) (+ E_shared(x))` for `[T×D]` tokens.
    /// The caller adds the residual.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var, gating_input: Var) -> Result<MoeOutput> {
        let t = tape.value(x).rows();
        let probs = self.gate_probs(tape, b, gating_input)?;
        let units = tape.value(probs).rows();
        let expected = match self.routing_mode {
            RoutingMode::Image => 1,
            RoutingMode::Token => t,
        };
        if units != expected {
            return Err(Error::Contract(format!(
                "{} routing expects {expected} gating inputs, got {units}",
                self.routing_mode
            )));
        }
        let decisions: Vec<GateDecision> = (0..units)
            .map(|r| GateDecision::from_probs(tape.value(probs).row(r).to_vec(), self.k, self.renorm))
            .collect();
        let flat_sel: Vec<usize> = decisions.iter().flat_map(|d| d.selected.iter().copied()).collect();
        let weights = tape.topk_weights(probs, &flat_sel, self.k, self.renorm == Renorm::TopK)?;

        let mut y = match self.routing_mode {
            RoutingMode::Image => {
                let mut acc: Option<Var> = None;
                for (j, &e) in decisions[0].selected.iter().enumerate() {
                    let out = self.experts[e].forward(tape, b, x)?;
                    let w = tape.gather_elems(weights, &[j])?;
                    let term = tape.mul_scalar(out, w)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => tape.add(a, term)?,
                    });
                }
                acc.expect("k >= 1")
            }
            RoutingMode::Token => {
                let mut parts = Vec::new();
                for e in 0..self.num_experts() {
                    let mut rows = Vec::new();
                    let mut widx = Vec::new();
                    for (r, d) in decisions.iter().enumerate() {
                        if let Some(j) = d.selected.iter().position(|&s| s == e) {
                            rows.push(r);
                            widx.push(r * self.k + j);
                        }
                    }
                    if rows.is_empty() {
                        continue;
                    }
                    let xe = tape.gather_rows(x, &rows)?;
                    let ye = self.experts[e].forward(tape, b, xe)?;
                    let we = tape.gather_elems(weights, &widx)?;
                    let ye = tape.mul_rows(ye, we)?;
                    parts.push((ye, rows));
                }
                tape.scatter_rows(parts, t)?
            }
        };
        if let Some(shared) = &self.shared {
            let s = shared.forward(tape, b, x)?;
            y = tape.add(y, s)?;
        }
        Ok(MoeOutput { y, probs, decisions })
    }
}

/// `α·N·Σ f_i·P_i` from hard counts and summed probabilities over
/// `tokens` routing units.
pub fn load_balance_value(counts: &[u64], prob_sums: &[f64], tokens: u64, alpha: f64) -> Result<f64> {
    if tokens == 0 {
        return Err(Error::Contract("load-balancing loss over zero tokens".into()));
    }
    let t = tokens as f64;
    let n = counts.len() as f64;
    let dot: f64 = counts.iter().zip(prob_sums).map(|(&c, &p)| (c as f64 / t) * (p / t)).sum();
    Ok(alpha * n * dot)
}

/// Per-layer statistics for the balancing loss over one batch.
///
/// `f` counts argmax assignments (one per routing unit, even when k > 1)
/// and is treated as a constant; `P` is the mean gate probability and
/// carries the gradient.
#[derive(Clone, Debug)]
pub struct AuxLossAccumulator {
    pub alpha: f64,
    pub counts: Vec<u64>,
    pub prob_sums: Vec<f64>,
    pub tokens: u64,
    prob_nodes: Vec<Var>,
}

impl AuxLossAccumulator {
    pub fn new(num_experts: usize, alpha: f64) -> Self {
        Self {
            alpha,
            counts: vec![0; num_experts],
            prob_sums: vec![0.0; num_experts],
            tokens: 0,
            prob_nodes: Vec::new(),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.counts.len()
    }

    /// Adds one routing unit's probability vector.
    pub fn push_row(&mut self, probs: &[f64]) {
        self.counts[argmax(probs)] += 1;
        for (s, p) in self.prob_sums.iter_mut().zip(probs) {
            *s += p;
        }
        self.tokens += 1;
    }

    /// Adds every row of a `[R×N]` probability node and remembers the node
    /// for the differentiable loss.
    pub fn record(&mut self, tape: &Tape, probs: Var) {
        let pv = tape.value(probs);
        for r in 0..pv.rows() {
            self.push_row(pv.row(r));
        }
        self.prob_nodes.push(probs);
    }

    pub fn f(&self) -> Vec<f64> {
        let t = self.tokens as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }

    pub fn p(&self) -> Vec<f64> {
        let t = self.tokens as f64;
        self.prob_sums.iter().map(|&s| s / t).collect()
    }

    pub fn value(&self) -> Result<f64> {
        load_balance_value(&self.counts, &self.prob_sums, self.tokens, self.alpha)
    }

    /// The loss as a tape scalar; gradient flows through `P` only.
    pub fn loss(&self, tape: &mut Tape) -> Result<Var> {
        if self.tokens == 0 || self.prob_nodes.is_empty() {
            return Err(Error::Contract("load-balancing loss over zero tokens".into()));
        }
        let mut total: Option<Var> = None;
        for &p in &self.prob_nodes {
            let cs = tape.col_sum(p);
            total = Some(match total {
                None => cs,
                Some(a) => tape.add(a, cs)?,
            });
        }
        let t = self.tokens as f64;
        let n = self.num_experts() as f64;
        let coef = Tensor::vector(self.f().iter().map(|fi| self.alpha * n * fi / t).collect());
        let weighted = tape.mul_const(total.expect("non-empty"), &coef)?;
        Ok(tape.sum(weighted))
    }
}

/// Plain-number counterpart of [`total_aux_loss`], summed in layer order.
pub fn total_aux_value(layers: &[AuxLossAccumulator]) -> Result<f64> {
    let mut total = 0.0;
    for acc in layers {
        total += acc.value()?;
    }
    Ok(total)
}

/// Sum of per-layer balancing losses; zero when there are no MoE layers.
pub fn total_aux_loss(tape: &mut Tape, layers: &[AuxLossAccumulator]) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for acc in layers {
        let l = acc.loss(tape)?;
        total = tape.add(total, l)?;
    }
    Ok(total)
}
