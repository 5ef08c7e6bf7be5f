use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Labels, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

const SIGNATURE_KEY: u64 = 0x5349_47;
const ITEM_KEY: u64 = 0x4954_454d;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    pub min_regions: usize,
    pub max_regions: usize,
    /// Smallest region side in pixels.
    pub min_side: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 28,
            channels: 3,
            noise: 0.3,
            min_regions: 2,
            max_regions: 4,
            min_side: 7,
        }
    }
}

impl GenConfig {
    fn validate(&self, num_classes: usize, m: usize) -> Result<()> {
        if num_classes < 2 || num_classes > u16::MAX as usize {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        if m == 0 {
            return Err(Error::Contract("dataset must contain at least one image".into()));
        }
        if self.image_size == 0 || self.channels == 0 || !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("image_size and channels must be positive, noise finite".into()));
        }
        if self.min_regions == 0 || self.min_regions > self.max_regions || self.min_side == 0 {
            return Err(Error::Config("need 1 <= min_regions <= max_regions and min_side >= 1".into()));
        }
        Ok(())
    }
}

/// Oriented sinusoidal grating planted for one class; the phase varies
/// per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Signature {
    /// Cycles per image width.
    pub freq: f64,
    pub theta: f64,
    /// Per-channel amplitude.
    pub weights: Vec<f64>,
}

impl Signature {
    pub fn for_class(seed: u64, class: usize, num_classes: usize, channels: usize) -> Self {
        let mut r = rng::stream(seed, &[SIGNATURE_KEY, class as u64]);
        let freq = r.random_range(1.5..3.5);
        let theta = PI * (class as f64 + r.random_range(-0.25..0.25)) / num_classes as f64;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let raw: Vec<f64> = (0..channels).map(|_| normal.sample(&mut r)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let scale = (channels as f64).sqrt() / norm;
        Self {
            freq,
            theta,
            weights: raw.iter().map(|v| v * scale).collect(),
        }
    }

    pub fn all(seed: u64, num_classes: usize, channels: usize) -> Vec<Self> {
        (0..num_classes)
            .map(|c| Self::for_class(seed, c, num_classes, channels))
            .collect()
    }

    /// Noise-free value at pixel `(y, x)` of channel `ch`.
    pub fn value(&self, size: usize, phase: f64, ch: usize, y: usize, x: usize) -> f64 {
        let s = size as f64;
        let u = (x as f64 + 0.5) / s;
        let v = (y as f64 + 0.5) / s;
        let arg = 2.0 * PI * self.freq * (u * self.theta.cos() + v * self.theta.sin()) + phase;
        self.weights[ch] * arg.cos()
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Balanced classification set: image `i` has class `i mod C`.
pub fn gen_cluster_classification(
    num_classes: usize,
    m: usize,
    seed: u64,
    split: Split,
    cfg: &GenConfig,
) -> Result<Dataset> {
    cfg.validate(num_classes, m)?;
    let sigs = Signature::all(seed, num_classes, cfg.channels);
    let (s, ch) = (cfg.image_size, cfg.channels);
    let noise = Normal::new(0.0, cfg.noise).expect("finite sigma");
    let mut images = Vec::with_capacity(m * ch * s * s);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let class = i % num_classes;
        let mut r = rng::stream(seed, &[ITEM_KEY, split.tag() as u64, i as u64]);
        let phase = r.random_range(0.0..2.0 * PI);
        for c in 0..ch {
            for y in 0..s {
                for x in 0..s {
                    let v = sigs[class].value(s, phase, c, y, x) + noise.sample(&mut r);
                    images.push(round_f32(v));
                }
            }
        }
        labels.push(class as u16);
    }
    let images = Tensor::new(vec![m, ch, s, s], images)?;
    Dataset::new(images, Labels::Class(labels), num_classes, split)
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
}

fn guillotine<R: Rng>(r: &mut R, size: usize, target: usize, min_side: usize) -> Vec<Rect> {
    let mut rects = vec![Rect {
        y: 0,
        x: 0,
        h: size,
        w: size,
    }];
    while rects.len() < target {
        let splittable: Vec<usize> = (0..rects.len())
            .filter(|&i| rects[i].h >= 2 * min_side || rects[i].w >= 2 * min_side)
            .collect();
        if splittable.is_empty() {
            break;
        }
        let i = splittable[r.random_range(0..splittable.len())];
        let rc = rects[i];
        let can_h = rc.h >= 2 * min_side;
        let can_w = rc.w >= 2 * min_side;
        let horizontal = match (can_h, can_w) {
            (true, true) => r.random_bool(0.5),
            (h, _) => h,
        };
        if horizontal {
            let cut = r.random_range(min_side..=rc.h - min_side);
            rects[i] = Rect { h: cut, ..rc };
            rects.push(Rect {
                y: rc.y + cut,
                h: rc.h - cut,
                ..rc
            });
        } else {
            let cut = r.random_range(min_side..=rc.w - min_side);
            rects[i] = Rect { w: cut, ..rc };
            rects.push(Rect {
                x: rc.x + cut,
                w: rc.w - cut,
                ..rc
            });
        }
    }
    rects
}

/// Images tiled by 2–4 axis-aligned rectangles, each filled with one
/// class's grating at its own phase.
pub fn gen_region_segmentation(
    num_classes: usize,
    m: usize,
    seed: u64,
    split: Split,
    cfg: &GenConfig,
) -> Result<Dataset> {
    cfg.validate(num_classes, m)?;
    let sigs = Signature::all(seed, num_classes, cfg.channels);
    let (s, ch) = (cfg.image_size, cfg.channels);
    let noise = Normal::new(0.0, cfg.noise).expect("finite sigma");
    let mut images = Vec::with_capacity(m * ch * s * s);
    let mut labels = Vec::with_capacity(m * s * s);
    for i in 0..m {
        let mut r = rng::stream(seed, &[ITEM_KEY, split.tag() as u64, i as u64]);
        let target = r.random_range(cfg.min_regions..=cfg.max_regions);
        let rects = guillotine(&mut r, s, target, cfg.min_side);
        // distinct classes per image while there are enough of them
        let mut pool: Vec<usize> = (0..num_classes).collect();
        let mut region_class = Vec::with_capacity(rects.len());
        let mut region_phase = Vec::with_capacity(rects.len());
        for _ in &rects {
            if pool.is_empty() {
                pool = (0..num_classes).collect();
            }
            region_class.push(pool.swap_remove(r.random_range(0..pool.len())));
            region_phase.push(r.random_range(0.0..2.0 * PI));
        }
        let mut map = vec![0usize; s * s];
        for (k, rc) in rects.iter().enumerate() {
            for y in rc.y..rc.y + rc.h {
                for x in rc.x..rc.x + rc.w {
                    map[y * s + x] = k;
                }
            }
        }
        for c in 0..ch {
            for y in 0..s {
                for x in 0..s {
                    let k = map[y * s + x];
                    let v = sigs[region_class[k]].value(s, region_phase[k], c, y, x) + noise.sample(&mut r);
                    images.push(round_f32(v));
                }
            }
        }
        labels.extend(map.iter().map(|&k| region_class[k] as u16));
    }
    let images = Tensor::new(vec![m, ch, s, s], images)?;
    Dataset::new(images, Labels::Maps(labels), num_classes, split)
}
