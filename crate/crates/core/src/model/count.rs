//! Closed-form parameter and multiply-accumulate counts.

use crate::error::{Error, Result};
use crate::moe::RoutingMode;
use crate::vit::Ffn;

use super::{ModelConfig, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CountReport {
    pub total_params: u64,
    pub activated_params: u64,
    /// Multiply-accumulates for one image.
    pub flops: u64,
}

impl CountReport {
    pub const CSV_HEADER: &'static str = "config_hash,N,L,shared,k,total,activated,flops";

    pub fn csv_row(&self, cfg: &ModelConfig) -> String {
        format!(
            "{:016x},{},{},{},{},{},{},{}",
            cfg.hash(),
            cfg.num_experts,
            cfg.moe_last_l,
            cfg.shared_expert,
            cfg.top_k,
            self.total_params,
            self.activated_params,
            self.flops
        )
    }
}

/// Counts at the config's own resolution.
pub fn count_params(cfg: &ModelConfig) -> Result<CountReport> {
    count_flops(cfg, cfg.image_size)
}

/// Parameter counts for `cfg` plus the MAC count of one forward pass at
/// `resolution`. Norms, activations and softmax are not counted.
pub fn count_flops(cfg: &ModelConfig, resolution: usize) -> Result<CountReport> {
    cfg.validate()?;
    if resolution == 0 || resolution % cfg.patch_size != 0 {
        return Err(Error::Config(format!(
            "resolution {resolution} is not divisible by patch size {}",
            cfg.patch_size
        )));
    }
    let d = cfg.embed_dim as u64;
    let h = cfg.hidden_dim() as u64;
    let c = cfg.num_classes as u64;
    let pd = cfg.patch_config().patch_dim() as u64;
    let t_param = cfg.token_count() as u64;
    let n = cfg.num_experts as u64;
    let k = cfg.top_k as u64;
    let l = cfg.moe_last_l as u64;
    let dense_blocks = cfg.depth as u64 - l;
    let shared = cfg.shared_expert as u64;
    let ffn = Ffn::param_count(cfg.embed_dim, cfg.hidden_dim()) as u64;

    let embed = pd * d + d + d + t_param * d;
    let attn = 4 * d + (3 * d * d + 3 * d) + (d * d + d);
    let head = 2 * d + d * c + c;
    let gate = n * d;
    let backbone = embed + cfg.depth as u64 * attn + head;
    let total = backbone + dense_blocks * ffn + l * ((n + shared) * ffn + gate);
    let activated = backbone + dense_blocks * ffn + l * ((k + shared) * ffn + gate);

    let g = (resolution / cfg.patch_size) as u64;
    let patches = g * g;
    let t = patches + 1;
    let ffn_macs = t * 2 * d * h;
    let attn_macs = t * d * 3 * d + 2 * t * t * d + t * d * d;
    let gate_macs = match cfg.routing_mode {
        RoutingMode::Image => d * n,
        RoutingMode::Token => t * d * n,
    };
    let head_macs = match cfg.task {
        Task::Classification => d * c,
        Task::Segmentation => patches * d * c,
    };
    let flops = patches * pd * d
        + cfg.depth as u64 * attn_macs
        + dense_blocks * ffn_macs
        + l * ((k + shared) * ffn_macs + gate_macs)
        + head_macs;
    Ok(CountReport {
        total_params: total,
        activated_params: activated,
        flops,
    })
}

/// `C(N,k)^L`, the number of distinct expert combinations along the
/// MoE stack.
pub fn routing_degree(n: usize, k: usize, l: usize) -> Result<u128> {
    if n == 0 || k == 0 || k > n {
        return Err(Error::Config(format!("need 1 <= k <= N, got k={k} N={n}")));
    }
    let overflow = || Error::Numeric(format!("routing degree C({n},{k})^{l} overflows u128"));
    let mut binom: u128 = 1;
    for i in 0..k as u128 {
        binom = binom.checked_mul(n as u128 - i).ok_or_else(overflow)? / (i + 1);
    }
    let mut out: u128 = 1;
    for _ in 0..l {
        out = out.checked_mul(binom).ok_or_else(overflow)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ViMoE;

    fn m(v: u64) -> f64 {
        (v as f64 / 1e5).round() / 10.0
    }

    #[test]
    fn dense_total_equals_activated() {
        let r = count_params(&ModelConfig::vit_s_14()).unwrap();
        assert_eq!(r.total_params, r.activated_params);
        assert_eq!(r.total_params, 22_004_584);
        assert_eq!(m(r.total_params), 22.0);
    }

    #[test]
    fn vit_s_reference_rows() {
        let s = ModelConfig::vit_s_14();
        let r = count_params(&s.clone().with_moe(8, 2, true)).unwrap();
        assert_eq!((m(r.total_params), m(r.activated_params)), (40.9, 24.4));
        let r = count_params(&s.clone().with_moe(8, 12, true)).unwrap();
        assert_eq!((m(r.total_params), m(r.activated_params)), (135.5, 36.2));
    }

    #[test]
    fn params_affine_in_l() {
        let base = ModelConfig::vit_tiny_lab();
        for shared in [false, true] {
            let counts: Vec<u64> = (0..=6)
                .map(|l| count_params(&base.clone().with_moe(4, l, shared)).unwrap().total_params)
                .collect();
            let ffn = Ffn::param_count(32, 128) as u64;
            let slope = (3 + shared as u64) * ffn + 4 * 32;
            for w in counts.windows(2) {
                assert_eq!(w[1] - w[0], slope);
            }
        }
    }

    #[test]
    fn formula_matches_built_model() {
        let base = ModelConfig::vit_tiny_lab();
        for (n, l, shared, k) in [(4, 0, false, 1), (4, 2, true, 1), (3, 6, false, 2), (2, 1, true, 2)] {
            for task in [Task::Classification, Task::Segmentation] {
                let mut cfg = base.clone().with_task(task).with_moe(n, l, shared);
                cfg.top_k = k;
                let model = ViMoE::build(&cfg, 0).unwrap();
                assert_eq!(count_params(&cfg).unwrap().total_params, model.store.num_elements() as u64);
            }
        }
    }

    #[test]
    fn doubling_k_doubles_expert_macs() {
        let mut cfg = ModelConfig::vit_s_14().with_moe(8, 2, false);
        let dense = count_flops(&cfg.dense(), 224).unwrap().flops;
        let one = count_flops(&cfg, 224).unwrap().flops;
        cfg.top_k = 2;
        let two = count_flops(&cfg, 224).unwrap().flops;
        let ffn_macs = 257 * 2 * 384 * 1536;
        let gates = 2 * 384 * 8;
        let rest = dense - 2 * ffn_macs + gates;
        assert_eq!(one - rest, 2 * ffn_macs);
        assert_eq!(two - rest, 2 * (one - rest));
    }

    #[test]
    fn degree_values() {
        assert_eq!(routing_degree(2, 1, 5).unwrap(), 32);
        assert_eq!(routing_degree(4, 1, 3).unwrap(), 64);
        assert_eq!(routing_degree(8, 1, 2).unwrap(), 64);
        assert_eq!(routing_degree(8, 2, 0).unwrap(), 1);
        assert_eq!(routing_degree(6, 3, 1).unwrap(), 20);
        assert!(routing_degree(2, 3, 1).is_err());
        assert!(matches!(routing_degree(1000, 500, 100), Err(Error::Numeric(_))));
    }
}
