//! Pre-norm ViT building blocks.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng;

pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchEmbedConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
}

impl PatchEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.in_channels == 0 || self.embed_dim == 0 {
            return Err(Error::Config("channels and embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patches plus the `[CLS]` token.
    pub fn token_count(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }
}

/// Parameter initializer keyed by `(seed, parameter name)`, so the same name
/// always receives the same values regardless of build order.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Tensor {
        let mut r = rng::stream(self.seed, &[rng::fnv1a(name.as_bytes())]);
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut r)).collect()).expect("init shape")
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, group: ParamGroup) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[dim], 1.0), group, false),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[dim]), group, false),
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        tape.layernorm(x, b.var(self.gamma), b.var(self.beta), LN_EPS)
    }
}

/// Affine map `x·W + b` with `W` stored `[in×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: Init,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
    ) -> Self {
        let w = init.normal(&format!("{name}.weight"), &[fan_in, fan_out], INIT_STD);
        Self {
            weight: store.add(format!("{name}.weight"), w, group, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), group, false),
        }
    }

    pub fn find(store: &ParamStore, name: &str) -> Result<Self> {
        let get = |suffix: &str| {
            store
                .find(&format!("{name}.{suffix}"))
                .ok_or_else(|| Error::Contract(format!("missing parameter {name}.{suffix}")))
        };
        Ok(Self {
            weight: get("weight")?,
            bias: get("bias")?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, b.var(self.weight))?;
        tape.add_bias(y, b.var(self.bias))
    }
}

/// Splits a `[C×H×W]` image into flattened non-overlapping patches,
/// row-major over the patch grid, each patch laid out `(c, y, x)`.
pub fn patchify(image: &Tensor, cfg: &PatchEmbedConfig) -> Result<Tensor> {
    let (c, s, p) = (cfg.in_channels, cfg.image_size, cfg.patch_size);
    if image.shape() != [c, s, s] {
        return Err(Error::shape("patchify", image.shape(), &[c, s, s]));
    }
    cfg.validate()?;
    let g = cfg.grid();
    let pd = cfg.patch_dim();
    let mut out = vec![0.0; g * g * pd];
    let px = image.data();
    for gy in 0..g {
        for gx in 0..g {
            let row = &mut out[(gy * g + gx) * pd..(gy * g + gx + 1) * pd];
            let mut o = 0;
            for ch in 0..c {
                for y in 0..p {
                    let base = ch * s * s + (gy * p + y) * s + gx * p;
                    row[o..o + p].copy_from_slice(&px[base..base + p]);
                    o += p;
                }
            }
        }
    }
    Tensor::matrix(g * g, pd, out)
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub cfg: PatchEmbedConfig,
    pub proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, init: Init, cfg: PatchEmbedConfig) -> Result<Self> {
        cfg.validate()?;
        let proj = Linear::new(store, init, "embed.proj", cfg.patch_dim(), cfg.embed_dim, ParamGroup::Embed);
        let cls = store.add(
            "embed.cls",
            init.normal("embed.cls", &[1, cfg.embed_dim], INIT_STD),
            ParamGroup::Embed,
            false,
        );
        let pos = store.add(
            "embed.pos",
            init.normal("embed.pos", &[cfg.token_count(), cfg.embed_dim], INIT_STD),
            ParamGroup::Embed,
            false,
        );
        Ok(Self { cfg, proj, cls, pos })
    }

    /// `[C×H×W]` image to `[T×D]` tokens, `[CLS]` at row 0.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, image: &Tensor) -> Result<Var> {
        let patches = tape.constant(patchify(image, &self.cfg)?);
        let emb = self.proj.forward(tape, b, patches)?;
        let tokens = tape.concat_rows(&[b.var(self.cls), emb])?;
        tape.add(tokens, b.var(self.pos))
    }
}

/// Two-layer GELU MLP. Routed and shared experts use the same structure.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, dim: usize, hidden: usize, group: ParamGroup) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, hidden, group),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, dim, group),
        }
    }

    /// Looks up an FFN registered under `name`.
    pub fn find(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            fc1: Linear::find(store, &format!("{name}.fc1"))?,
            fc2: Linear::find(store, &format!("{name}.fc2"))?,
        })
    }

    /// Registers a copy of `src` (living in `src_store`) under a new name,
    /// with the output layer scaled by `out_scale`.
    pub fn replicate(
        src_store: &ParamStore,
        src: &Ffn,
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        out_scale: f64,
    ) -> Self {
        let mut copy = |lin: &Linear, lname: &str, scale: f64| {
            let mut w = src_store.value(lin.weight).clone();
            let mut bias = src_store.value(lin.bias).clone();
            if scale != 1.0 {
                w.data_mut().iter_mut().for_each(|v| *v *= scale);
                bias.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            Linear {
                weight: store.add(format!("{name}.{lname}.weight"), w, group, true),
                bias: store.add(format!("{name}.{lname}.bias"), bias, group, false),
            }
        };
        let fc1 = copy(&src.fc1, "fc1", 1.0);
        let fc2 = copy(&src.fc2, "fc2", out_scale);
        Self { fc1, fc2 }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, b, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, b, h)
    }

    pub fn param_count(dim: usize, hidden: usize) -> usize {
        2 * dim * hidden + hidden + dim
    }
}

/// Pre-norm attention sub-block plus the FFN-side norm.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm1: LayerNormParams,
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub norm2: LayerNormParams,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, init: Init, block: usize, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("embed_dim {dim} not divisible by {heads} heads")));
        }
        let g = ParamGroup::Block(block);
        let p = format!("blocks.{block}");
        Ok(Self {
            norm1: LayerNormParams::new(store, &format!("{p}.norm1"), dim, g),
            qkv: Linear::new(store, init, &format!("{p}.attn.qkv"), dim, 3 * dim, g),
            proj: Linear::new(store, init, &format!("{p}.attn.proj"), dim, dim, g),
            heads,
            norm2: LayerNormParams::new(store, &format!("{p}.norm2"), dim, g),
        })
    }

    /// `x + Proj(MHSA(LN(x)))`
    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, b, x)?;
        let qkv = self.qkv.forward(tape, b, h)?;
        let a = tape.attention(qkv, self.heads)?;
        let o = self.proj.forward(tape, b, a)?;
        tape.add(x, o)
    }
}

/// Linear classifier on the `[CLS]` token, or per patch token for
/// segmentation.
#[derive(Clone, Debug)]
pub struct Head {
    pub linear: Linear,
}

impl Head {
    pub fn new(store: &mut ParamStore, init: Init, dim: usize, classes: usize) -> Self {
        Self {
            linear: Linear::new(store, init, "head", dim, classes, ParamGroup::Head),
        }
    }

    /// `[1×D]` → `[1×C]`
    pub fn classify(&self, tape: &mut Tape, b: &Bound, cls: Var) -> Result<Var> {
        self.linear.forward(tape, b, cls)
    }

    /// `[(T−1)×D]` → `[(T−1)×C]`
    pub fn segment(&self, tape: &mut Tape, b: &Bound, patches: Var) -> Result<Var> {
        self.linear.forward(tape, b, patches)
    }
}
