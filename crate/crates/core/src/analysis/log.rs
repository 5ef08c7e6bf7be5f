//! Routing logs and the `VIMR` container.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{self, ByteReader, ByteWriter};
use crate::model::ViMoE;
use crate::moe::{GateDecision, RoutingMode};

const VERSION: u32 = 1;

/// One gate decision.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRecord {
    /// Block index, 0 = shallowest.
    pub layer: u32,
    pub item: u32,
    /// Token position, or −1 in image mode.
    pub token: i32,
    /// Ground-truth class of the routing unit, −1 if it has none.
    pub label: i32,
    pub selected: Vec<u16>,
    pub probs: Vec<f64>,
}

impl RoutingRecord {
    /// Top-1 expert, i.e. the first selected one.
    pub fn top1(&self) -> usize {
        self.selected[0] as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingLog {
    pub num_experts: usize,
    pub top_k: usize,
    pub mode: RoutingMode,
    pub depth: usize,
    pub num_classes: usize,
    /// Patches per side, for mapping tokens back onto the image.
    pub grid: usize,
    /// Block indices of the MoE layers, ascending.
    pub moe_blocks: Vec<u32>,
    pub model_hash: u64,
    pub dataset_hash: u64,
    pub records: Vec<RoutingRecord>,
}

impl RoutingLog {
    pub fn for_model(m: &ViMoE, dataset_hash: u64) -> Self {
        let c = &m.config;
        Self {
            num_experts: c.num_experts,
            top_k: c.top_k,
            mode: c.routing_mode,
            depth: c.depth,
            num_classes: c.num_classes,
            grid: c.patch_config().grid(),
            moe_blocks: c.moe_blocks().iter().map(|&b| b as u32).collect(),
            model_hash: c.hash(),
            dataset_hash,
            records: Vec::new(),
        }
    }

    /// Appends the decisions of one forward pass. `token_label(t)` gives the
    /// class of token `t` in token mode; `image_label` is used in image mode.
    pub fn push_item(
        &mut self,
        item: usize,
        routing: &[Vec<GateDecision>],
        image_label: Option<usize>,
        token_label: &dyn Fn(usize) -> Option<usize>,
    ) {
        for (&layer, decisions) in self.moe_blocks.clone().iter().zip(routing) {
            for (t, d) in decisions.iter().enumerate() {
                let (token, label) = match self.mode {
                    RoutingMode::Image => (-1, image_label),
                    RoutingMode::Token => (t as i32, token_label(t)),
                };
                self.records.push(RoutingRecord {
                    layer,
                    item: item as u32,
                    token,
                    label: label.map_or(-1, |l| l as i32),
                    selected: d.selected.iter().map(|&e| e as u16).collect(),
                    probs: d.probs.clone(),
                });
            }
        }
    }

    /// Records of block `layer`, in log order.
    pub fn layer_records(&self, layer: usize) -> impl Iterator<Item = &RoutingRecord> {
        self.records.iter().filter(move |r| r.layer as usize == layer)
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if !self.moe_blocks.contains(&(layer as u32)) {
            return Err(Error::Contract(format!(
                "block {layer} is not an MoE layer; MoE blocks are {:?}",
                self.moe_blocks
            )));
        }
        Ok(())
    }

    /// Converts a block index to the layer numbering where 1 is the
    /// deepest block.
    pub fn ell_of_block(&self, block: usize) -> usize {
        self.depth - block
    }

    pub fn block_of_ell(&self, ell: usize) -> Result<usize> {
        if ell == 0 || ell > self.depth {
            return Err(Error::Contract(format!("layer {ell} outside 1..={}", self.depth)));
        }
        Ok(self.depth - ell)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(b"VIMR");
        w.u32(VERSION);
        w.u32(self.num_experts as u32);
        w.u32(self.top_k as u32);
        w.u8(match self.mode {
            RoutingMode::Image => 0,
            RoutingMode::Token => 1,
        });
        w.u32(self.depth as u32);
        w.u32(self.num_classes as u32);
        w.u32(self.grid as u32);
        w.u32(self.moe_blocks.len() as u32);
        for &b in &self.moe_blocks {
            w.u32(b);
        }
        w.u64(self.model_hash);
        w.u64(self.dataset_hash);
        w.u64(self.records.len() as u64);
        for r in &self.records {
            w.u32(r.layer);
            w.u32(r.item);
            w.i32(r.token);
            w.i32(r.label);
            for &e in &r.selected {
                w.u16(e);
            }
            for &p in &r.probs {
                w.f64(p);
            }
        }
        w.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(b"VIMR")?;
        r.version(VERSION)?;
        let mut r = ByteReader::with_crc(bytes)?;
        r.take(8)?;
        let at = r.offset();
        let num_experts = r.u32()? as usize;
        let top_k = r.u32()? as usize;
        if num_experts == 0 || top_k == 0 || top_k > num_experts {
            return Err(Error::format(at, format!("bad expert counts N={num_experts} k={top_k}")));
        }
        let at = r.offset();
        let mode = match r.u8()? {
            0 => RoutingMode::Image,
            1 => RoutingMode::Token,
            t => return Err(Error::format(at, format!("unknown routing mode tag {t}"))),
        };
        let depth = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let grid = r.u32()? as usize;
        let n_blocks = r.u32()? as usize;
        let mut moe_blocks = Vec::with_capacity(n_blocks.min(1024));
        for _ in 0..n_blocks {
            moe_blocks.push(r.u32()?);
        }
        let model_hash = r.u64()?;
        let dataset_hash = r.u64()?;
        let count = r.u64()? as usize;
        let width = 16 + 2 * top_k + 8 * num_experts;
        if count.checked_mul(width) != Some(r.remaining()) {
            return Err(Error::format(
                r.offset(),
                format!("{count} records of {width} bytes do not match {} payload bytes", r.remaining()),
            ));
        }
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.offset();
            let layer = r.u32()?;
            let item = r.u32()?;
            let token = r.i32()?;
            let label = r.i32()?;
            let selected = (0..top_k).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
            let probs = (0..num_experts).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if !moe_blocks.contains(&layer) || selected.iter().any(|&e| e as usize >= num_experts) {
                return Err(Error::format(at, "record refers to an unknown layer or expert"));
            }
            records.push(RoutingRecord {
                layer,
                item,
                token,
                label,
                selected,
                probs,
            });
        }
        r.expect_end()?;
        Ok(Self {
            num_experts,
            top_k,
            mode,
            depth,
            num_classes,
            grid,
            moe_blocks,
            model_hash,
            dataset_hash,
            records,
        })
    }
}

pub fn save_log(path: &Path, log: &RoutingLog) -> Result<()> {
    io::write_file(path, &log.to_bytes())
}

pub fn load_log(path: &Path) -> Result<RoutingLog> {
    RoutingLog::from_bytes(&io::read_file(path)?)
}
