//! ViMoE assembly: a pre-norm ViT whose last `L` blocks carry MoE layers.

pub mod checkpoint;
pub mod count;
pub mod params;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::moe::{route_input, GateDecision, MoeLayer, Renorm, RoutingMode};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng;
use crate::vit::{AttentionBlock, Ffn, Head, Init, LayerNormParams, PatchEmbed, PatchEmbedConfig};
use params::{Bound, ParamGroup, ParamStore};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use count::{count_flops, count_params, routing_degree, CountReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classification,
    Segmentation,
}

impl Task {
    pub fn default_alpha(self) -> f64 {
        match self {
            Task::Classification => 0.01,
            Task::Segmentation => 0.001,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::Segmentation => "segmentation",
        })
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" | "cls" => Ok(Task::Classification),
            "segmentation" | "seg" => Ok(Task::Segmentation),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

/// Everything needed to build, count and train one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub task: Task,
    /// Number of trailing blocks converted to MoE; 0 is the dense baseline.
    pub moe_last_l: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub shared_expert: bool,
    pub routing_mode: RoutingMode,
    pub renorm: Renorm,
    pub alpha: f64,
}

pub const PRESETS: [&str; 2] = ["vit-tiny-lab", "vit-s-14"];

impl ModelConfig {
    /// 28px images, 7px patches, width 32, 4 heads, 6 blocks.
    pub fn vit_tiny_lab() -> Self {
        Self {
            image_size: 28,
            patch_size: 7,
            in_channels: 3,
            embed_dim: 32,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 8,
            task: Task::Classification,
            moe_last_l: 0,
            num_experts: 4,
            top_k: 1,
            shared_expert: false,
            routing_mode: RoutingMode::Image,
            renorm: Renorm::TopK,
            alpha: Task::Classification.default_alpha(),
        }
    }

    /// ViT-S/14 at 224px with 1000 classes; used for counting only.
    pub fn vit_s_14() -> Self {
        Self {
            image_size: 224,
            patch_size: 14,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            num_classes: 1000,
            num_experts: 8,
            ..Self::vit_tiny_lab()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "vit-tiny-lab" => Ok(Self::vit_tiny_lab()),
            "vit-s-14" => Ok(Self::vit_s_14()),
            _ => Err(Error::Config(format!("unknown preset {name:?}; expected one of {PRESETS:?}"))),
        }
    }

    /// Switches task along with its default balancing coefficient and
    /// routing granularity.
    pub fn with_task(mut self, task: Task) -> Self {
        self.task = task;
        self.alpha = task.default_alpha();
        self.routing_mode = match task {
            Task::Classification => RoutingMode::Image,
            Task::Segmentation => RoutingMode::Token,
        };
        self
    }

    pub fn with_moe(mut self, n: usize, last_l: usize, shared: bool) -> Self {
        self.num_experts = n;
        self.moe_last_l = last_l;
        self.shared_expert = shared;
        self
    }

    /// Same backbone with no MoE layers.
    pub fn dense(&self) -> Self {
        Self {
            moe_last_l: 0,
            ..self.clone()
        }
    }

    pub fn patch_config(&self) -> PatchEmbedConfig {
        PatchEmbedConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            in_channels: self.in_channels,
            embed_dim: self.embed_dim,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    pub fn token_count(&self) -> usize {
        self.patch_config().token_count()
    }

    /// Whether block `i` (0-based from the input side) is an MoE block.
    pub fn is_moe_block(&self, i: usize) -> bool {
        i < self.depth && i + self.moe_last_l >= self.depth
    }

    pub fn moe_blocks(&self) -> Vec<usize> {
        (self.depth - self.moe_last_l.min(self.depth)..self.depth).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.patch_config().validate()?;
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth and mlp_ratio must be positive".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.moe_last_l > self.depth {
            return Err(Error::Config(format!(
                "moe_last_l {} exceeds depth {}",
                self.moe_last_l, self.depth
            )));
        }
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "need 1 <= top_k <= num_experts, got k={} N={}",
                self.top_k, self.num_experts
            )));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Canonical `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let pairs: [(&str, String); 16] = [
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("depth", self.depth.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("task", self.task.to_string()),
            ("moe_last_l", self.moe_last_l.to_string()),
            ("num_experts", self.num_experts.to_string()),
            ("top_k", self.top_k.to_string()),
            ("shared_expert", self.shared_expert.to_string()),
            ("routing_mode", self.routing_mode.to_string()),
            ("renorm_mode", self.renorm.to_string()),
            ("alpha", format!("{:?}", self.alpha)),
        ];
        pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies one `key=value` pair. Returns `false` if the key is not a
    /// model field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "image_size" => self.image_size = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "in_channels" => self.in_channels = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "task" => self.task = value.parse()?,
            "moe_last_l" => self.moe_last_l = parse(key, value)?,
            "num_experts" => self.num_experts = parse(key, value)?,
            "top_k" => self.top_k = parse(key, value)?,
            "shared_expert" => self.shared_expert = parse(key, value)?,
            "routing_mode" => self.routing_mode = value.parse()?,
            "renorm_mode" => self.renorm = value.parse()?,
            "alpha" => self.alpha = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn hash(&self) -> u64 {
        rng::fnv1a(self.to_kv().as_bytes())
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

/// Feed-forward part of a block.
#[derive(Clone, Debug)]
pub enum Mlp {
    Dense(Ffn),
    Moe(MoeLayer),
}

#[derive(Clone, Debug)]
pub struct Block {
    pub attn: AttentionBlock,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct ViMoE {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embed: PatchEmbed,
    pub blocks: Vec<Block>,
    pub norm: LayerNormParams,
    pub head: Head,
}

/// Routing produced by one MoE block during a forward pass.
pub struct MoeTrace {
    pub block: usize,
    /// `[R×N]` gate probabilities on the tape.
    pub probs: Var,
    pub decisions: Vec<GateDecision>,
}

pub struct Forward {
    /// `[1×C]` for classification, `[(T−1)×C]` for segmentation.
    pub logits: Var,
    pub moe: Vec<MoeTrace>,
}

/// Detached forward result.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Tensor,
    /// Per MoE block, in block order.
    pub routing: Vec<Vec<GateDecision>>,
}

impl ViMoE {
    /// Fresh model: the dense backbone is initialized from `seed`, then every
    /// MoE block copies its FFN into each expert with a zero gate.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let dense = Self::assemble(&config.dense(), Init { seed }, None)?;
        if config.moe_last_l == 0 {
            return Ok(dense);
        }
        Self::assemble(config, Init { seed }, Some(&dense.store))
    }

    /// Builds `config` on top of a dense parameter set, e.g. a dense
    /// checkpoint. Every backbone parameter must be present in `base`.
    pub fn from_dense(config: &ModelConfig, base: &ParamStore) -> Result<Self> {
        config.validate()?;
        Self::assemble(config, Init { seed: 0 }, Some(base))
    }

    fn assemble(config: &ModelConfig, init: Init, base: Option<&ParamStore>) -> Result<Self> {
        let mut store = ParamStore::new();
        let embed = PatchEmbed::new(&mut store, init, config.patch_config())?;
        let d = config.embed_dim;
        let mut blocks = Vec::with_capacity(config.depth);
        let mut replicated = Vec::new();
        for i in 0..config.depth {
            let attn = AttentionBlock::new(&mut store, init, i, d, config.heads)?;
            let group = ParamGroup::Block(i);
            let mlp = if config.is_moe_block(i) {
                let base = base.ok_or_else(|| Error::Contract("MoE blocks need a dense base".into()))?;
                let src = Ffn::find(base, &format!("blocks.{i}.mlp"))?;
                let out_scale = if config.shared_expert { 0.5 } else { 1.0 };
                let p = format!("blocks.{i}.moe");
                let before = store.len();
                let gate = store.add(format!("{p}.gate"), Tensor::zeros(&[config.num_experts, d]), ParamGroup::Gate, true);
                let experts = (0..config.num_experts)
                    .map(|e| Ffn::replicate(base, &src, &mut store, &format!("{p}.experts.{e}"), group, out_scale))
                    .collect();
                let shared = config
                    .shared_expert
                    .then(|| Ffn::replicate(base, &src, &mut store, &format!("{p}.shared"), group, out_scale));
                replicated.extend(before..store.len());
                Mlp::Moe(MoeLayer {
                    gate,
                    experts,
                    shared,
                    k: config.top_k,
                    routing_mode: config.routing_mode,
                    renorm: config.renorm,
                })
            } else {
                Mlp::Dense(Ffn::new(&mut store, init, &format!("blocks.{i}.mlp"), d, config.hidden_dim(), group))
            };
            blocks.push(Block { attn, mlp });
        }
        let norm = LayerNormParams::new(&mut store, "norm", d, ParamGroup::Head);
        let head = Head::new(&mut store, init, d, config.num_classes);

        if let Some(base) = base {
            let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
            for id in ids {
                if replicated.contains(&id.index()) {
                    continue;
                }
                let name = store.get(id).name.clone();
                let src = base
                    .find(&name)
                    .ok_or_else(|| Error::Contract(format!("base is missing parameter {name}")))?;
                let v = base.value(src);
                if v.shape() != store.value(id).shape() {
                    return Err(Error::shape("from_dense", store.value(id).shape(), v.shape()));
                }
                *store.value_mut(id) = v.clone();
            }
        }
        Ok(Self {
            config: config.clone(),
            store,
            embed,
            blocks,
            norm,
            head,
        })
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = (usize, &MoeLayer)> {
        self.blocks.iter().enumerate().filter_map(|(i, b)| match &b.mlp {
            Mlp::Moe(m) => Some((i, m)),
            Mlp::Dense(_) => None,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, image: &Tensor) -> Result<Forward> {
        let mut x = self.embed.forward(tape, b, image)?;
        let mut moe = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.attn.forward(tape, b, x)?;
            let h = block.attn.norm2.forward(tape, b, x)?;
            let y = match &block.mlp {
                Mlp::Dense(ffn) => ffn.forward(tape, b, h)?,
                Mlp::Moe(layer) => {
                    let gi = route_input(tape, h, layer.routing_mode)?;
                    let out = layer.forward(tape, b, h, gi)?;
                    moe.push(MoeTrace {
                        block: i,
                        probs: out.probs,
                        decisions: out.decisions,
                    });
                    out.y
                }
            };
            x = tape.add(x, y)?;
        }
        let x = self.norm.forward(tape, b, x)?;
        let logits = match self.config.task {
            Task::Classification => {
                let cls = tape.slice_rows(x, 0, 1)?;
                self.head.classify(tape, b, cls)?
            }
            Task::Segmentation => {
                let t = tape.value(x).rows();
                let patches = tape.slice_rows(x, 1, t - 1)?;
                self.head.segment(tape, b, patches)?
            }
        };
        Ok(Forward { logits, moe })
    }

    /// Forward pass without gradients.
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, false);
        let f = self.forward(&mut tape, &b, image)?;
        Ok(Prediction {
            logits: tape.value(f.logits).clone(),
            routing: f.moe.into_iter().map(|t| t.decisions).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::AuxLossAccumulator;
    use crate::numerics::relative_error;

    fn small(task: Task) -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            heads: 2,
            depth: 3,
            mlp_ratio: 2,
            num_classes: 3,
            ..ModelConfig::vit_tiny_lab()
        }
        .with_task(task)
    }

    fn image(seed: u64) -> Tensor {
        Init { seed }.normal("image", &[3, 28, 28], 1.0)
    }

    #[test]
    fn dense_build_has_no_gates_and_full_moe_covers_every_block() {
        let m = ViMoE::build(&small(Task::Classification), 1).unwrap();
        assert_eq!(m.moe_layers().count(), 0);
        assert!(m.store.iter().all(|(_, p)| p.group != ParamGroup::Gate));

        let cfg = small(Task::Classification).with_moe(4, 3, true);
        let m = ViMoE::build(&cfg, 1).unwrap();
        assert_eq!(m.moe_layers().map(|(i, _)| i).collect::<Vec<_>>(), vec![0, 1, 2]);

        let bad = small(Task::Classification).with_moe(4, 4, false);
        assert!(matches!(ViMoE::build(&bad, 1), Err(Error::Config(_))));
    }

    #[test]
    fn replicated_model_matches_dense_baseline() {
        for task in [Task::Classification, Task::Segmentation] {
            for (n, l, shared) in [(2, 1, false), (4, 2, true), (3, 3, true), (2, 3, false)] {
                let cfg = small(task).with_moe(n, l, shared);
                let moe = ViMoE::build(&cfg, 9).unwrap();
                let dense = ViMoE::build(&cfg.dense(), 9).unwrap();
                for s in 0..3 {
                    let img = image(100 + s);
                    let a = moe.predict(&img).unwrap().logits;
                    let b = dense.predict(&img).unwrap().logits;
                    assert!(a.max_abs_diff(&b) < 1e-10, "{task} n={n} l={l}");
                }
            }
        }
    }

    #[test]
    fn from_dense_copies_backbone_and_replicates_ffn() {
        let cfg = small(Task::Classification).with_moe(2, 1, false);
        let dense = ViMoE::build(&cfg.dense(), 3).unwrap();
        let m = ViMoE::from_dense(&cfg, &dense.store).unwrap();
        let src = dense.store.value(dense.store.find("blocks.2.mlp.fc1.weight").unwrap());
        let e1 = m.store.value(m.store.find("blocks.2.moe.experts.1.fc1.weight").unwrap());
        assert_eq!(src, e1);
        let qkv = |s: &ParamStore| s.value(s.find("blocks.0.attn.qkv.weight").unwrap()).clone();
        assert_eq!(qkv(&dense.store), qkv(&m.store));
        assert!(ViMoE::from_dense(&cfg, &ParamStore::new()).is_err());
    }

    #[test]
    fn config_kv_round_trip_and_unknown_keys() {
        let mut cfg = ModelConfig::vit_s_14().with_moe(8, 2, true);
        cfg.alpha = 0.1 + 0.2;
        let mut back = ModelConfig::vit_tiny_lab();
        for line in cfg.to_kv().lines() {
            let (k, v) = line.split_once('=').unwrap();
            assert!(back.set(k, v).unwrap());
        }
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert!(!back.set("bogus", "1").unwrap());
        assert!(back.set("depth", "x").is_err());
    }

    #[test]
    fn image_routing_is_shared_by_all_tokens() {
        let cfg = small(Task::Classification).with_moe(4, 2, false);
        let mut m = ViMoE::build(&cfg, 5).unwrap();
        for p in m.store.iter_mut() {
            if p.group == ParamGroup::Gate {
                p.value = Init { seed: 6 }.normal(&p.name, p.value.shape(), 1.0);
            }
        }
        let pred = m.predict(&image(7)).unwrap();
        assert_eq!(pred.routing.len(), 2);
        assert!(pred.routing.iter().all(|r| r.len() == 1));

        let cfg = small(Task::Segmentation).with_moe(4, 2, false);
        let m = ViMoE::build(&cfg, 5).unwrap();
        let pred = m.predict(&image(7)).unwrap();
        assert!(pred.routing.iter().all(|r| r.len() == 17));
        assert_eq!(pred.logits.shape(), &[16, 3]);
    }

    fn total_loss(m: &ViMoE, tape: &mut Tape, b: &Bound, img: &Tensor) -> Result<Var> {
        let f = m.forward(tape, b, img)?;
        let ce = tape.cross_entropy(f.logits, &[1])?;
        let mut accs = Vec::new();
        for t in &f.moe {
            let mut acc = AuxLossAccumulator::new(m.config.num_experts, m.config.alpha);
            acc.record(tape, t.probs);
            accs.push(acc);
        }
        let aux = crate::moe::total_aux_loss(tape, &accs)?;
        tape.add(ce, aux)
    }

    #[test]
    fn gate_and_expert_gradients_match_finite_differences() {
        let cfg = small(Task::Classification).with_moe(3, 2, true);
        let mut m = ViMoE::build(&cfg, 11).unwrap();
        // Perturb everything off the symmetric initial point.
        let ids: Vec<_> = m.store.iter().map(|(id, _)| id).collect();
        for id in &ids {
            let p = m.store.get(*id);
            let noise = Init { seed: 12 }.normal(&p.name, p.value.shape(), 0.3);
            let v = m.store.value_mut(*id);
            for (a, n) in v.data_mut().iter_mut().zip(noise.data()) {
                *a += n;
            }
        }
        let img = image(13);
        let mut tape = Tape::new();
        let b = m.store.bind(&mut tape, true);
        let loss = total_loss(&m, &mut tape, &b, &img).unwrap();
        tape.backward(loss).unwrap();

        let eval = |m: &ViMoE| {
            let mut tape = Tape::new();
            let b = m.store.bind(&mut tape, false);
            let l = total_loss(m, &mut tape, &b, &img).unwrap();
            tape.value(l).item()
        };
        let h = 1e-5;
        for name in ["blocks.2.moe.gate", "blocks.1.moe.experts.2.fc1.weight", "blocks.1.moe.shared.fc2.weight"] {
            let id = m.store.find(name).unwrap();
            // unselected experts are off the graph: zero gradient
            let analytic = tape
                .grad(b.var(id))
                .unwrap_or_else(|| Tensor::zeros(m.store.value(id).shape()));
            for j in [0, 5] {
                let orig = m.store.value(id).data()[j];
                m.store.value_mut(id).data_mut()[j] = orig + h;
                let up = eval(&m);
                m.store.value_mut(id).data_mut()[j] = orig - h;
                let down = eval(&m);
                m.store.value_mut(id).data_mut()[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let err = relative_error(analytic.data()[j], fd);
                assert!(err < 1e-4, "{name}[{j}]: {} vs {fd}", analytic.data()[j]);
            }
        }
    }
}
