//! Concept-neuron masks: application, concatenation, overlap statistics and
//! the `CONE` sparse file format.
//!
//! A mask lists, per K-V layer, the positions whose mask value is 0 (the
//! concept neurons). Every other position has mask value 1.

use std::path::Path;

use serde::Serialize;

use crate::binio::{put_name, Reader};
use crate::denoiser::{DenoiserParams, KvEntry};
use crate::error::{Error, Result};

pub const CONE_MAGIC: [u8; 4] = *b"CONE";
pub const CONE_VERSION: u16 = 1;
const HEADER_BYTES: usize = 4 + 2 + 32 + 4;
const LAYER_HEADER_BYTES: usize = 2 + 8 + 8;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskLayer {
    pub name: String,
    pub param_count: u64,
    /// Strictly increasing positions within the layer.
    pub indices: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConceptMask {
    pub fingerprint: [u8; 32],
    pub layers: Vec<MaskLayer>,
}

impl ConceptMask {
    /// The all-ones mask over a K-V registry.
    pub fn empty(fingerprint: [u8; 32], kv: &[KvEntry]) -> Self {
        ConceptMask {
            fingerprint,
            layers: kv
                .iter()
                .map(|e| MaskLayer {
                    name: e.name.clone(),
                    param_count: e.len as u64,
                    indices: Vec::new(),
                })
                .collect(),
        }
    }

    /// Builds a mask from per-parameter flags laid out in registry order.
    pub fn from_flags(fingerprint: [u8; 32], kv: &[KvEntry], flags: &[bool]) -> Result<Self> {
        let total: usize = kv.iter().map(|e| e.len).sum();
        if flags.len() != total {
            return Err(Error::invalid(format!("{} flags for {total} K-V parameters", flags.len())));
        }
        let mut mask = ConceptMask::empty(fingerprint, kv);
        let mut start = 0;
        for (layer, e) in mask.layers.iter_mut().zip(kv) {
            layer.indices = flags[start..start + e.len]
                .iter()
                .enumerate()
                .filter(|(_, &f)| f)
                .map(|(i, _)| i as u64)
                .collect();
            start += e.len;
        }
        Ok(mask)
    }

    /// Per-parameter flags in registry order; `true` marks a concept neuron.
    pub fn flags(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.total_params());
        for l in &self.layers {
            let base = out.len();
            out.resize(base + l.param_count as usize, false);
            for &i in &l.indices {
                out[base + i as usize] = true;
            }
        }
        out
    }

    pub fn concept_count(&self) -> usize {
        self.layers.iter().map(|l| l.indices.len()).sum()
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.param_count as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.concept_count() == 0
    }

    /// Checks the ordering and bounds invariants of every layer.
    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            if l.indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!("layer {}: indices not strictly increasing", l.name)));
            }
            if l.indices.last().is_some_and(|&i| i >= l.param_count) {
                return Err(Error::invalid(format!("layer {}: index out of range", l.name)));
            }
        }
        Ok(())
    }

    /// Flat parameter addresses of the concept neurons, checked against the
    /// layer table of `kv`.
    pub fn addresses(&self, kv: &[KvEntry]) -> Result<Vec<usize>> {
        self.check_layers(kv)?;
        Ok(self
            .layers
            .iter()
            .zip(kv)
            .flat_map(|(l, e)| l.indices.iter().map(move |&i| e.offset + i as usize))
            .collect())
    }

    fn check_layers(&self, kv: &[KvEntry]) -> Result<()> {
        let same = self.layers.len() == kv.len()
            && self.layers.iter().zip(kv).all(|(l, e)| l.name == e.name && l.param_count == e.len as u64);
        if !same {
            return Err(Error::invalid("mask layer table does not match the model's K-V registry"));
        }
        Ok(())
    }

    fn compatible(&self, other: &ConceptMask) -> Result<()> {
        if self.fingerprint != other.fingerprint {
            return Err(Error::FingerprintMismatch);
        }
        let same = self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.name == b.name && a.param_count == b.param_count);
        if !same {
            return Err(Error::invalid("mask layer tables differ"));
        }
        Ok(())
    }

    /// True when every concept neuron of `self` is also one of `other`.
    pub fn is_subset_of(&self, other: &ConceptMask) -> Result<bool> {
        self.compatible(other)?;
        Ok(self.layers.iter().zip(&other.layers).all(|(a, b)| {
            a.indices.iter().all(|i| b.indices.binary_search(i).is_ok())
        }))
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES
            + self
                .layers
                .iter()
                .map(|l| LAYER_HEADER_BYTES + l.name.len() + 8 * l.indices.len())
                .sum::<usize>()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&CONE_MAGIC);
        out.extend_from_slice(&CONE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        let count = u32::try_from(self.layers.len()).map_err(|_| Error::invalid("too many layers"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for l in &self.layers {
            put_name(&mut out, &l.name)?;
            out.extend_from_slice(&l.param_count.to_le_bytes());
            out.extend_from_slice(&(l.indices.len() as u64).to_le_bytes());
            for i in &l.indices {
                out.extend_from_slice(&i.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.array::<4>("magic")? != CONE_MAGIC {
            return Err(Error::format("magic", "expected \"CONE\""));
        }
        let version = r.u16("version")?;
        if version != CONE_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let fingerprint = r.array::<32>("fingerprint")?;
        let count = r.u32("layer count")? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.name("layer name")?;
            let param_count = r.u64("param count")?;
            let concept_count = r.count(8, "concept count")?;
            if concept_count as u64 > param_count {
                return Err(Error::format("concept count", format!("{concept_count} exceeds param count {param_count}")));
            }
            let mut indices = Vec::with_capacity(concept_count);
            for _ in 0..concept_count {
                let i = r.u64("indices")?;
                if i >= param_count {
                    return Err(Error::format("indices", format!("index {i} out of range for {name}")));
                }
                if indices.last().is_some_and(|&p| p >= i) {
                    return Err(Error::format("indices", format!("not strictly increasing in {name}")));
                }
                indices.push(i);
            }
            layers.push(MaskLayer {
                name,
                param_count,
                indices,
            });
        }
        r.finish()?;
        Ok(ConceptMask { fingerprint, layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Sets the concept-neuron positions to exactly zero; all other parameters
/// are copied bit for bit.
pub fn apply(params: &DenoiserParams, mask: &ConceptMask) -> Result<DenoiserParams> {
    if mask.fingerprint != params.fingerprint() {
        return Err(Error::FingerprintMismatch);
    }
    let mut values = params.values.clone();
    for a in mask.addresses(params.kv_registry())? {
        values[a] = 0.0;
    }
    params.with_values(values)
}

fn merge(a: &[u64], b: &[u64]) -> Vec<u64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

fn intersect_count(a: &[u64], b: &[u64]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Per-layer union of concept neurons (elementwise minimum of the binary
/// masks).
pub fn concat(a: &ConceptMask, b: &ConceptMask) -> Result<ConceptMask> {
    a.compatible(b)?;
    Ok(ConceptMask {
        fingerprint: a.fingerprint,
        layers: a
            .layers
            .iter()
            .zip(&b.layers)
            .map(|(x, y)| MaskLayer {
                name: x.name.clone(),
                param_count: x.param_count,
                indices: merge(&x.indices, &y.indices),
            })
            .collect(),
    })
}

pub fn concat_all(masks: &[ConceptMask]) -> Result<ConceptMask> {
    let (first, rest) = masks.split_first().ok_or_else(|| Error::invalid("no masks to concatenate"))?;
    rest.iter().try_fold(first.clone(), |acc, m| concat(&acc, m))
}

/// `|A ∩ B|` summed over layers.
pub fn intersection_count(a: &ConceptMask, b: &ConceptMask) -> Result<usize> {
    a.compatible(b)?;
    Ok(a.layers.iter().zip(&b.layers).map(|(x, y)| intersect_count(&x.indices, &y.indices)).sum())
}

/// `|A ∩ B| / |A ∪ B|` over all layers; 0 when both masks are empty.
pub fn intersection_fraction(a: &ConceptMask, b: &ConceptMask) -> Result<f64> {
    let inter = intersection_count(a, b)?;
    let union = a.concept_count() + b.concept_count() - inter;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Alias of [`intersection_fraction`].
pub fn iou(a: &ConceptMask, b: &ConceptMask) -> Result<f64> {
    intersection_fraction(a, b)
}

pub fn sparsity(mask: &ConceptMask, total_kv_params: usize) -> f64 {
    if total_kv_params == 0 {
        return 0.0;
    }
    mask.concept_count() as f64 / total_kv_params as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskStats {
    pub concept_count: usize,
    pub sparsity: f64,
    pub per_layer: Vec<(String, f64)>,
    pub encoded_bytes: usize,
    /// Size of the K-V parameters stored densely as float32.
    pub dense_equivalent_bytes: usize,
    /// `1 − encoded / dense`.
    pub savings: f64,
}

pub fn stats(mask: &ConceptMask) -> MaskStats {
    let total = mask.total_params();
    let encoded = mask.encoded_len();
    let dense = 4 * total;
    MaskStats {
        concept_count: mask.concept_count(),
        sparsity: sparsity(mask, total),
        per_layer: mask
            .layers
            .iter()
            .map(|l| {
                let s = if l.param_count == 0 { 0.0 } else { l.indices.len() as f64 / l.param_count as f64 };
                (l.name.clone(), s)
            })
            .collect(),
        encoded_bytes: encoded,
        dense_equivalent_bytes: dense,
        savings: if dense == 0 { 0.0 } else { 1.0 - encoded as f64 / dense as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ArchConfig;

    fn two_layer(fp: u8, a: &[u64], b: &[u64]) -> ConceptMask {
        ConceptMask {
            fingerprint: [fp; 32],
            layers: vec![
                MaskLayer {
                    name: "l0.to_k".into(),
                    param_count: 10,
                    indices: a.to_vec(),
                },
                MaskLayer {
                    name: "l0.to_v".into(),
                    param_count: 20,
                    indices: b.to_vec(),
                },
            ],
        }
    }

    #[test]
    fn union_and_overlap() {
        let a = two_layer(1, &[3, 7], &[]);
        let b = two_layer(1, &[7, 9], &[]);
        assert_eq!(concat(&a, &b).unwrap().layers[0].indices, vec![3, 7, 9]);
        assert!((intersection_fraction(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(intersection_fraction(&a, &two_layer(1, &[1], &[2])).unwrap(), 0.0);
        assert_eq!(intersection_fraction(&a, &a).unwrap(), 1.0);
        let e = two_layer(1, &[], &[]);
        assert_eq!(intersection_fraction(&e, &e).unwrap(), 0.0);
        assert_eq!(concat(&a, &e).unwrap(), a);
        assert!(matches!(concat(&a, &two_layer(2, &[], &[])), Err(Error::FingerprintMismatch)));
    }

    #[test]
    fn sparsity_counts() {
        let m = ConceptMask {
            fingerprint: [0; 32],
            layers: vec![MaskLayer {
                name: "x".into(),
                param_count: 1000,
                indices: (0..13).collect(),
            }],
        };
        assert!((sparsity(&m, 1000) - 0.013).abs() < 1e-15);
        assert_eq!(sparsity(&two_layer(0, &[], &[]), 30), 0.0);
    }

    #[test]
    fn encoding_layout() {
        let m = two_layer(9, &[3, 7], &[1]);
        let bytes = m.encode().unwrap();
        assert_eq!(&bytes[..4], &[0x43, 0x4F, 0x4E, 0x45]);
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..38], &[9; 32]);
        assert_eq!(&bytes[38..42], &[2, 0, 0, 0]);
        assert_eq!(&bytes[42..44], &[7, 0]);
        assert_eq!(&bytes[44..51], b"l0.to_k");
        assert_eq!(bytes.len(), m.encoded_len());
        assert_eq!(ConceptMask::decode(&bytes).unwrap(), m);

        let empty = two_layer(9, &[], &[]);
        assert_eq!(empty.encode().unwrap().len(), 42 + 2 * 18 + 14);
    }

    #[test]
    fn decode_errors_name_the_field() {
        let m = two_layer(9, &[3, 7], &[1]);
        let good = m.encode().unwrap();
        let field = |b: &[u8]| match ConceptMask::decode(b) {
            Err(Error::Format { field, .. }) => field,
            other => panic!("expected format error, got {other:?}"),
        };
        let mut b = good.clone();
        b[0] = 0;
        assert_eq!(field(&b), "magic");
        let mut b = good.clone();
        b[4] = 2;
        assert_eq!(field(&b), "version");
        let mut b = good.clone();
        b.push(0);
        assert_eq!(field(&b), "trailing bytes");
        // second index of the first layer: 7 → 2 breaks ordering
        let mut b = good.clone();
        b[51 + 16 + 8] = 2;
        assert_eq!(field(&b), "indices");
        let mut b = good.clone();
        b[51 + 16 + 8] = 10;
        assert_eq!(field(&b), "indices");
        assert_eq!(field(&good[..good.len() - 1]), "concept count");
        let mut b = good.clone();
        b[51 + 8] = 11;
        assert_eq!(field(&b), "concept count");
    }

    #[test]
    fn apply_zeroes_listed_positions() {
        let p = DenoiserParams::init(ArchConfig::preset("micro", 10).unwrap(), 1).unwrap();
        let kv = p.kv_registry().to_vec();
        let mut m = ConceptMask::empty(p.fingerprint(), &kv);
        assert_eq!(apply(&p, &m).unwrap(), p);
        m.layers[1].indices = vec![3, 7];
        let q = apply(&p, &m).unwrap();
        let off = kv[1].offset;
        assert_eq!(q.values[off + 3], 0.0);
        assert_eq!(q.values[off + 7], 0.0);
        let changed = p.values.iter().zip(&q.values).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        assert!(changed <= 2);
        assert_eq!(apply(&q, &m).unwrap(), q);
        let mut wrong = m.clone();
        wrong.fingerprint[0] ^= 1;
        assert!(matches!(apply(&p, &wrong), Err(Error::FingerprintMismatch)));
    }

    #[test]
    fn flags_roundtrip() {
        let kv = vec![
            KvEntry {
                name: "a".into(),
                offset: 0,
                len: 4,
            },
            KvEntry {
                name: "b".into(),
                offset: 10,
                len: 3,
            },
        ];
        let flags = vec![false, true, false, true, true, false, false];
        let m = ConceptMask::from_flags([0; 32], &kv, &flags).unwrap();
        assert_eq!(m.layers[0].indices, vec![1, 3]);
        assert_eq!(m.layers[1].indices, vec![0]);
        assert_eq!(m.flags(), flags);
        assert_eq!(m.addresses(&kv).unwrap(), vec![1, 3, 10]);
    }

    #[test]
    fn stats_savings() {
        let m = ConceptMask {
            fingerprint: [0; 32],
            layers: vec![MaskLayer {
                name: "x".into(),
                param_count: 10_000,
                indices: (0..132).collect(),
            }],
        };
        let s = stats(&m);
        assert_eq!(s.dense_equivalent_bytes, 40_000);
        assert!(s.savings >= 0.9);
        let e = stats(&ConceptMask::empty([0; 32], &[]));
        assert_eq!(e.sparsity, 0.0);
    }
}
