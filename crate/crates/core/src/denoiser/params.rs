//! Parameter snapshots, seeded initialisation and the checkpoint format.

use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::arch::{Arch, ArchConfig, KvEntry, PRESETS};
use crate::binio::{put_name, Reader};
use crate::error::{Error, Result};
use crate::rng;

pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";
pub const CKPT_VERSION: u16 = 1;

/// An immutable parameter vector θ tied to its architecture.
#[derive(Clone, Debug)]
pub struct DenoiserParams {
    pub arch: Arc<Arch>,
    pub values: Vec<f32>,
}

impl PartialEq for DenoiserParams {
    fn eq(&self, other: &Self) -> bool {
        self.fingerprint() == other.fingerprint() && self.values == other.values
    }
}

impl DenoiserParams {
    /// Seeded initialisation: unit-variance embeddings, fan-in scaled
    /// weights, unit norm gains, zero biases. Residual and final output
    /// projections start small.
    pub fn init(config: ArchConfig, seed: u64) -> Result<Self> {
        let arch = Arc::new(Arch::new(config)?);
        let mut rng = rng::stream(seed, 0x1417);
        let mut values = vec![0.0f32; arch.total];
        for t in &arch.tensors {
            let dst = &mut values[t.offset..t.offset + t.len];
            let is_norm = t.name.contains("norm");
            if t.name.ends_with(".bias") {
                continue;
            }
            if is_norm {
                dst.fill(1.0);
                continue;
            }
            let std = if t.name.starts_with("embed.") {
                1.0
            } else {
                let fan_in: usize = t.shape[1..].iter().product();
                let residual_out = t.name.ends_with("conv2.weight")
                    || t.name.ends_with("to_out.weight")
                    || t.name == "conv_out.weight";
                (1.0 / fan_in as f64).sqrt() * if residual_out { 0.2 } else { 1.0 }
            };
            for v in dst.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = (z * std) as f32;
            }
        }
        Ok(DenoiserParams { arch, values })
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.arch.fingerprint()
    }

    pub fn kv_registry(&self) -> &[KvEntry] {
        self.arch.kv_registry()
    }

    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        if values.len() != self.arch.total {
            return Err(Error::invalid(format!(
                "parameter vector has {} values, architecture needs {}",
                values.len(),
                self.arch.total
            )));
        }
        Ok(DenoiserParams {
            arch: self.arch.clone(),
            values,
        })
    }

    /// SHA-256 of the raw parameter bytes, for bit-exactness comparisons.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.values.len() * 4 + 4096);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint());
        out.extend_from_slice(&(self.arch.tensors.len() as u32).to_le_bytes());
        for t in &self.arch.tensors {
            put_name(&mut out, &t.name)?;
            out.push(t.shape.len() as u8);
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &self.values[t.offset..t.offset + t.len] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if &r.array::<4>("magic")? != CKPT_MAGIC {
            return Err(Error::format("magic", "expected \"CKPT\""));
        }
        let version = r.u16("version")?;
        if version != CKPT_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let fingerprint = r.array::<32>("fingerprint")?;
        let count = r.u32("layer count")? as usize;
        let mut layers = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.name("layer name")?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.count(0, "dims")?);
            }
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::format("dims", "overflow"))?;
            let raw = r.bytes(len.checked_mul(4).ok_or_else(|| Error::format("dims", "overflow"))?, "values")?;
            let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            layers.push((name, shape, values));
        }
        r.finish()?;

        let vocab = layers
            .iter()
            .find(|(n, s, _)| n == "embed.token" && s.len() == 2)
            .map(|(_, s, _)| s[0])
            .ok_or_else(|| Error::format("layer name", "missing embed.token"))?;
        let arch = PRESETS
            .iter()
            .filter_map(|p| ArchConfig::preset(p, vocab).ok())
            .filter_map(|c| Arch::new(c).ok())
            .find(|a| a.fingerprint() == fingerprint)
            .ok_or(Error::FingerprintMismatch)?;
        if layers.len() != arch.tensors.len() {
            return Err(Error::format("layer count", format!("expected {}, found {}", arch.tensors.len(), layers.len())));
        }
        let mut values = Vec::with_capacity(arch.total);
        for ((name, shape, v), t) in layers.into_iter().zip(&arch.tensors) {
            if name != t.name || shape != t.shape {
                return Err(Error::format("layer name", format!("unexpected layer {name} {shape:?}, expected {} {:?}", t.name, t.shape)));
            }
            values.extend(v);
        }
        Ok(DenoiserParams {
            arch: Arc::new(arch),
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
