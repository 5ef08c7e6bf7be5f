//! Synthetic datasets, patch-level labels and the `VIMD` container.

mod oracle;
mod synth;

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{self, ByteReader, ByteWriter};
use crate::model::Task;
use crate::numerics::Tensor;
use crate::rng;

pub use oracle::{classify_by_template, segment_by_template, template_accuracy, template_pixel_accuracy};
pub use synth::{gen_cluster_classification, gen_region_segmentation, GenConfig, Signature};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    /// One class per image.
    Class(Vec<u16>),
    /// One `[H×W]` label map per image, concatenated.
    Maps(Vec<u16>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[M×C×H×W]`; every value is exactly representable as `f32`.
    pub images: Tensor,
    pub labels: Labels,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Labels, num_classes: usize, split: Split) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(Error::Contract(format!("images must be [M×C×S×S], got {shape:?}")));
        }
        let (m, hw) = (shape[0], shape[2] * shape[3]);
        let (expect, labels_ref) = match &labels {
            Labels::Class(l) => (m, l),
            Labels::Maps(l) => (m * hw, l),
        };
        if labels_ref.len() != expect {
            return Err(Error::Contract(format!("expected {expect} labels, got {}", labels_ref.len())));
        }
        if let Some(bad) = labels_ref.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::Contract(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn task(&self) -> Task {
        match self.labels {
            Labels::Class(_) => Task::Classification,
            Labels::Maps(_) => Task::Segmentation,
        }
    }

    /// `[C×H×W]` copy of image `i`.
    pub fn image(&self, i: usize) -> Tensor {
        let s = self.image_size();
        let n = self.channels() * s * s;
        Tensor::new(vec![self.channels(), s, s], self.images.data()[i * n..(i + 1) * n].to_vec()).expect("shape")
    }

    /// Class of image `i`, classification only.
    pub fn class(&self, i: usize) -> Option<usize> {
        match &self.labels {
            Labels::Class(l) => Some(l[i] as usize),
            Labels::Maps(_) => None,
        }
    }

    /// `[H×W]` label map of image `i`, segmentation only.
    pub fn label_map(&self, i: usize) -> Option<&[u16]> {
        match &self.labels {
            Labels::Maps(l) => {
                let hw = self.image_size() * self.image_size();
                Some(&l[i * hw..(i + 1) * hw])
            }
            Labels::Class(_) => None,
        }
    }

    /// Patch-majority labels for image `i`, segmentation only.
    pub fn patch_labels(&self, i: usize, patch_size: usize) -> Result<PatchLabelMap> {
        let map = self
            .label_map(i)
            .ok_or_else(|| Error::Contract("patch labels need a segmentation dataset".into()))?;
        let s = self.image_size();
        patch_majority_label(map, s, s, patch_size)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.is_empty() {
            return Err(Error::Contract("refusing to save an empty dataset".into()));
        }
        let mut w = ByteWriter::new();
        w.bytes(b"VIMD");
        w.u32(VIMD_VERSION);
        w.u8(match self.task() {
            Task::Classification => 0,
            Task::Segmentation => 1,
        });
        w.u8(self.split.tag());
        w.u32(self.num_classes as u32);
        for &d in self.images.shape() {
            w.u32(d as u32);
        }
        for &v in self.images.data() {
            w.f32(v as f32);
        }
        let labels = match &self.labels {
            Labels::Class(l) | Labels::Maps(l) => l,
        };
        for &l in labels {
            w.u16(l);
        }
        Ok(w.finish_with_crc())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(b"VIMD")?;
        r.version(VIMD_VERSION)?;
        let mut r = ByteReader::with_crc(bytes)?;
        r.take(8)?;
        let at = r.offset();
        let task = match r.u8()? {
            0 => Task::Classification,
            1 => Task::Segmentation,
            t => return Err(Error::format(at, format!("unknown task tag {t}"))),
        };
        let at = r.offset();
        let split = Split::from_tag(r.u8()?).ok_or_else(|| Error::format(at, "unknown split tag"))?;
        let num_classes = r.u32()? as usize;
        let at = r.offset();
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        if shape.contains(&0) {
            return Err(Error::format(at, format!("zero dimension in {shape:?}")));
        }
        let n = shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(at, "image payload size overflows"))?;
        let raw = r.take(n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let n_labels = match task {
            Task::Classification => shape[0],
            Task::Segmentation => shape[0] * shape[2] * shape[3],
        };
        let raw = r.take(n_labels * 2)?;
        let labels: Vec<u16> = raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")))
            .collect();
        r.expect_end()?;
        let labels = match task {
            Task::Classification => Labels::Class(labels),
            Task::Segmentation => Labels::Maps(labels),
        };
        let images = Tensor::new(shape.to_vec(), data)?;
        Self::new(images, labels, num_classes, split).map_err(|e| Error::format(0, e.to_string()))
    }

    /// Stable content hash, recorded in routing logs.
    pub fn hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.images.len() * 4);
        for &v in self.images.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        match &self.labels {
            Labels::Class(l) | Labels::Maps(l) => {
                for &x in l {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        rng::fnv1a(&bytes)
    }
}

const VIMD_VERSION: u32 = 1;

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<()> {
    io::write_file(path, &d.to_bytes()?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&io::read_file(path)?)
}

/// Per-patch class grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchLabelMap {
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<u16>,
}

/// Most frequent class in each `p×p` patch of an `[h×w]` map; ties go to
/// the smaller class index.
pub fn patch_majority_label(map: &[u16], h: usize, w: usize, p: usize) -> Result<PatchLabelMap> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Contract(format!("{h}×{w} map is not divisible into {p}×{p} patches")));
    }
    if map.len() != h * w {
        return Err(Error::shape("patch_majority_label", &[map.len()], &[h, w]));
    }
    let (rows, cols) = (h / p, w / p);
    let mut labels = Vec::with_capacity(rows * cols);
    let mut counts = std::collections::BTreeMap::new();
    for gy in 0..rows {
        for gx in 0..cols {
            counts.clear();
            for y in gy * p..(gy + 1) * p {
                for &c in &map[y * w + gx * p..y * w + (gx + 1) * p] {
                    *counts.entry(c).or_insert(0usize) += 1;
                }
            }
            // BTreeMap iterates in ascending class order, so the first
            // maximum is the smallest tied class.
            let mut best = (0u16, 0usize);
            for (&c, &n) in &counts {
                if n > best.1 {
                    best = (c, n);
                }
            }
            labels.push(best.0);
        }
    }
    Ok(PatchLabelMap { rows, cols, labels })
}
