//! Brute-force template matching against the planted signatures.

use std::f64::consts::PI;

use super::{Dataset, Signature};
use crate::numerics::Tensor;

const PHASES: usize = 24;

/// `templates[c][φ]` as flat `[C×S×S]` images.
fn templates(sigs: &[Signature], channels: usize, size: usize) -> Vec<Vec<Vec<f64>>> {
    sigs.iter()
        .map(|sig| {
            (0..PHASES)
                .map(|p| {
                    let phase = 2.0 * PI * p as f64 / PHASES as f64;
                    let mut t = Vec::with_capacity(channels * size * size);
                    for c in 0..channels {
                        for y in 0..size {
                            for x in 0..size {
                                t.push(sig.value(size, phase, c, y, x));
                            }
                        }
                    }
                    t
                })
                .collect()
        })
        .collect()
}

/// Class whose signature, at its best phase on the grid, is nearest to
/// the image in squared distance.
pub fn classify_by_template(image: &Tensor, sigs: &[Signature]) -> usize {
    let (ch, size) = (image.shape()[0], image.shape()[1]);
    let t = templates(sigs, ch, size);
    nearest(image.data(), &t)
}

fn nearest(x: &[f64], t: &[Vec<Vec<f64>>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, phases) in t.iter().enumerate() {
        for tp in phases {
            let d: f64 = x.iter().zip(tp).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (c, d);
            }
        }
    }
    best.0
}

pub fn template_accuracy(d: &Dataset, sigs: &[Signature]) -> f64 {
    let t = templates(sigs, d.channels(), d.image_size());
    let hits = (0..d.len())
        .filter(|&i| Some(nearest(d.image(i).data(), &t)) == d.class(i))
        .count();
    hits as f64 / d.len() as f64
}

/// Per-pixel labels: every `w×w` window is matched to its nearest class
/// template; each pixel takes the class of the best-fitting window that
/// covers it.
pub fn segment_by_template(image: &Tensor, sigs: &[Signature], window: usize) -> Vec<u16> {
    let (ch, s) = (image.shape()[0], image.shape()[1]);
    let t = templates(sigs, ch, s);
    let x = image.data();
    let positions = s + 1 - window;
    let mut win = vec![(0u16, f64::INFINITY); positions * positions];
    for wy in 0..positions {
        for wx in 0..positions {
            let mut best = (0u16, f64::INFINITY);
            for (c, phases) in t.iter().enumerate() {
                for tp in phases {
                    let mut d = 0.0;
                    for k in 0..ch {
                        for y in wy..wy + window {
                            let row = k * s * s + y * s;
                            for xx in wx..wx + window {
                                let e = x[row + xx] - tp[row + xx];
                                d += e * e;
                            }
                        }
                    }
                    if d < best.1 {
                        best = (c as u16, d);
                    }
                }
            }
            win[wy * positions + wx] = best;
        }
    }
    let mut out = vec![0u16; s * s];
    for y in 0..s {
        for x in 0..s {
            let mut best = (0u16, f64::INFINITY);
            for wy in y.saturating_sub(window - 1)..=y.min(positions - 1) {
                for wx in x.saturating_sub(window - 1)..=x.min(positions - 1) {
                    let cand = win[wy * positions + wx];
                    if cand.1 < best.1 {
                        best = cand;
                    }
                }
            }
            out[y * s + x] = best.0;
        }
    }
    out
}

pub fn template_pixel_accuracy(d: &Dataset, sigs: &[Signature], window: usize) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for i in 0..d.len() {
        let pred = segment_by_template(&d.image(i), sigs, window);
        let truth = d.label_map(i).expect("segmentation dataset");
        hits += pred.iter().zip(truth).filter(|(a, b)| a == b).count();
        total += truth.len();
    }
    hits as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_cluster_classification, gen_region_segmentation, GenConfig, Split};

    #[test]
    fn template_matching_learnability() {
        let cfg = GenConfig::default();
        let d = gen_cluster_classification(8, 400, 1, Split::Test, &cfg).unwrap();
        let sigs = Signature::all(1, 8, 3);
        let acc = template_accuracy(&d, &sigs);
        assert!(acc >= 0.95, "template accuracy {acc}");
    }

    #[test]
    fn pixel_template_matching_learnability() {
        let cfg = GenConfig::default();
        let d = gen_region_segmentation(8, 12, 2, Split::Test, &cfg).unwrap();
        let sigs = Signature::all(2, 8, 3);
        let acc = template_pixel_accuracy(&d, &sigs, 7);
        assert!(acc >= 0.90, "pixel accuracy {acc}");
    }
}
