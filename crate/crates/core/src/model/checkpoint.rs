//! `VIMO` checkpoints: config text, a manifest of named tensors, raw `f64`
//! payload and a CRC-32 trailer.

use std::path::Path;

use super::{ModelConfig, ViMoE};
use crate::error::{Error, Result};
use crate::io::{self, ByteReader, ByteWriter};
use crate::numerics::Tensor;

const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(m: &ViMoE) -> Self {
        Self {
            config: m.config.clone(),
            params: m.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    /// Rebuilds the model; every parameter must be present with the right
    /// shape.
    pub fn to_model(&self) -> Result<ViMoE> {
        let mut m = ViMoE::build(&self.config, 0)?;
        if m.store.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                m.store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = m
                .store
                .find(name)
                .ok_or_else(|| Error::Contract(format!("unexpected tensor {name}")))?;
            if m.store.value(id).shape() != value.shape() {
                return Err(Error::shape("checkpoint", m.store.value(id).shape(), value.shape()));
            }
            *m.store.value_mut(id) = value.clone();
        }
        Ok(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(b"VIMO");
        w.u32(VERSION);
        w.str(&self.config.to_kv());
        w.u32(self.params.len() as u32);
        let mut offset = 0u64;
        for (name, t) in &self.params {
            w.str(name);
            w.u32(t.ndim() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            w.u64(offset);
            offset += t.len() as u64;
        }
        for (_, t) in &self.params {
            for &v in t.data() {
                w.f64(v);
            }
        }
        w.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(b"VIMO")?;
        r.version(VERSION)?;
        let mut r = ByteReader::with_crc(bytes)?;
        r.take(8)?;
        let at = r.offset();
        let text = r.str()?;
        let mut config = ModelConfig::vit_tiny_lab();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(at, format!("bad config line {line:?}")))?;
            if !config.set(k, v).map_err(|e| Error::format(at, e.to_string()))? {
                return Err(Error::format(at, format!("unknown config key {k:?}")));
            }
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        let mut expected = 0u64;
        for _ in 0..count {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let at = r.offset();
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let offset = r.u64()?;
            if offset != expected || shape.is_empty() || shape.contains(&0) {
                return Err(Error::format(at, format!("bad manifest entry for {name}")));
            }
            expected += shape.iter().product::<usize>() as u64;
            manifest.push((name, shape));
        }
        let mut params = Vec::with_capacity(manifest.len());
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f64()?);
            }
            params.push((name, Tensor::new(shape, data)?));
        }
        r.expect_end()?;
        Ok(Self { config, params })
    }
}

pub fn save_checkpoint(path: &Path, m: &ViMoE) -> Result<()> {
    io::write_file(path, &Checkpoint::from_model(m).to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<ViMoE> {
    Checkpoint::from_bytes(&io::read_file(path)?)?.to_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::Init;

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = ModelConfig::vit_tiny_lab().with_moe(3, 2, true);
        let mut m = ViMoE::build(&cfg, 4).unwrap();
        for p in m.store.iter_mut() {
            p.value = Init { seed: 9 }.normal(&p.name, p.value.shape(), 1.0);
        }
        let ck = Checkpoint::from_model(&m);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        for ((_, a), (_, b)) in back.params.iter().zip(&ck.params) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let rebuilt = back.to_model().unwrap();
        assert_eq!(Checkpoint::from_model(&rebuilt), ck);
    }

    #[test]
    fn damaged_files_fail_with_format_errors() {
        let m = ViMoE::build(&ModelConfig::vit_tiny_lab(), 1).unwrap();
        let bytes = Checkpoint::from_model(&m).to_bytes();
        let mut bad = bytes.clone();
        bad[100] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..50]), Err(Error::Format { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"VIMD\x01\0\0\0"), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let m = ViMoE::build(&ModelConfig::vit_tiny_lab(), 1).unwrap();
        let mut ck = Checkpoint::from_model(&m);
        ck.config.moe_last_l = 1;
        assert!(ck.to_model().is_err());
    }
}
