//! Architecture descriptor, flat parameter layout and the K-V registry.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scene::{IMAGE_SIZE, MAX_PROMPT_LEN};

/// Width settings of the cross-attention U-Net.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub preset: String,
    /// Channels at 16×16 (after the 2×2 patchify stem).
    pub c1: usize,
    /// Channels at 8×8 and 4×4.
    pub c2: usize,
    /// Token embedding width.
    pub embed: usize,
    pub groups: usize,
    /// Width of the time-embedding MLP output.
    pub time_dim: usize,
    pub vocab_size: usize,
}

/// Sinusoidal features fed to the time MLP.
pub const TIME_FEATURES: usize = 32;
pub const PRESETS: [&str; 2] = ["tiny", "micro"];

impl ArchConfig {
    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        let (c1, c2, embed, groups, time_dim) = match name {
            "tiny" => (32, 64, 64, 8, 64),
            "micro" => (8, 16, 8, 4, 8),
            _ => return Err(Error::invalid(format!("unknown architecture preset \"{name}\""))),
        };
        if vocab_size == 0 {
            return Err(Error::invalid("vocabulary must not be empty"));
        }
        Ok(ArchConfig {
            preset: name.to_string(),
            c1,
            c2,
            embed,
            groups,
            time_dim,
            vocab_size,
        })
    }
}

/// One named parameter tensor inside the flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// A contiguous run of K-V projection parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Affine {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct ResBlockSpec {
    pub cin: usize,
    pub cout: usize,
    pub norm1: Affine,
    pub conv1: Affine,
    pub temb: Affine,
    pub norm2: Affine,
    pub conv2: Affine,
    pub skip: Option<Affine>,
}

#[derive(Clone, Debug)]
pub(crate) struct AttnSpec {
    pub c: usize,
    pub norm: Affine,
    pub to_q: usize,
    pub to_k: usize,
    pub to_v: usize,
    pub out: Affine,
}

#[derive(Clone, Debug)]
pub(crate) struct Stage {
    pub res: ResBlockSpec,
    pub attn: AttnSpec,
}

/// Fully resolved network: configuration, tensor table and block handles.
#[derive(Clone, Debug)]
pub struct Arch {
    pub config: ArchConfig,
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
    pub(crate) token_embed: usize,
    pub(crate) pos_embed: usize,
    pub(crate) time_mlp: Affine,
    pub(crate) conv_in: Affine,
    pub(crate) stages: [Stage; 5],
    pub(crate) norm_out: Affine,
    pub(crate) conv_out: Affine,
    kv: Vec<KvEntry>,
    fingerprint: [u8; 32],
}

struct Builder {
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize]) -> usize {
        let len = shape.iter().product();
        self.tensors.push(TensorInfo {
            name,
            shape: shape.to_vec(),
            offset: self.total,
            len,
        });
        self.total += len;
        self.tensors.len() - 1
    }

    fn norm(&mut self, prefix: &str, c: usize) -> Affine {
        Affine {
            w: self.add(format!("{prefix}.weight"), &[c]),
            b: self.add(format!("{prefix}.bias"), &[c]),
        }
    }

    fn linear(&mut self, prefix: &str, cout: usize, cin: usize) -> Affine {
        Affine {
            w: self.add(format!("{prefix}.weight"), &[cout, cin]),
            b: self.add(format!("{prefix}.bias"), &[cout]),
        }
    }

    fn conv(&mut self, prefix: &str, cout: usize, cin: usize) -> Affine {
        Affine {
            w: self.add(format!("{prefix}.weight"), &[cout, cin, 3, 3]),
            b: self.add(format!("{prefix}.bias"), &[cout]),
        }
    }

    fn stage(&mut self, name: &str, cin: usize, cout: usize, cfg: &ArchConfig) -> Stage {
        let r = format!("{name}.res");
        let res = ResBlockSpec {
            cin,
            cout,
            norm1: self.norm(&format!("{r}.norm1"), cin),
            conv1: self.conv(&format!("{r}.conv1"), cout, cin),
            temb: self.linear(&format!("{r}.time"), cout, cfg.time_dim),
            norm2: self.norm(&format!("{r}.norm2"), cout),
            conv2: self.conv(&format!("{r}.conv2"), cout, cout),
            skip: (cin != cout).then(|| self.linear(&format!("{r}.skip"), cout, cin)),
        };
        let a = format!("{name}.attn");
        let attn = AttnSpec {
            c: cout,
            norm: self.norm(&format!("{a}.norm"), cout),
            to_q: self.add(format!("{a}.to_q.weight"), &[cout, cout]),
            to_k: self.add(format!("{a}.to_k.weight"), &[cout, cfg.embed]),
            to_v: self.add(format!("{a}.to_v.weight"), &[cout, cfg.embed]),
            out: self.linear(&format!("{a}.to_out"), cout, cout),
        };
        Stage { res, attn }
    }
}

impl Arch {
    pub fn new(config: ArchConfig) -> Result<Self> {
        let (c1, c2) = (config.c1, config.c2);
        if config.groups == 0 || [c1, c2, c1 + c2, 2 * c2].iter().any(|c| c % config.groups != 0) {
            return Err(Error::invalid("channel widths must be divisible by the group count"));
        }
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
        };
        let token_embed = b.add("embed.token".into(), &[config.vocab_size, config.embed]);
        let pos_embed = b.add("embed.position".into(), &[MAX_PROMPT_LEN, config.embed]);
        let time_mlp = b.linear("time.mlp", config.time_dim, TIME_FEATURES);
        let conv_in = b.conv("conv_in", c1, 12);
        let stages = [
            b.stage("down1", c1, c1, &config),
            b.stage("down2", c1, c2, &config),
            b.stage("mid", c2, c2, &config),
            b.stage("up2", 2 * c2, c2, &config),
            b.stage("up1", c2 + c1, c1, &config),
        ];
        let norm_out = b.norm("norm_out", c1);
        let conv_out = b.linear("conv_out", 12, c1);

        let kv = stages
            .iter()
            .flat_map(|s| [s.attn.to_k, s.attn.to_v])
            .map(|id| {
                let t = &b.tensors[id];
                KvEntry {
                    name: t.name.trim_end_matches(".weight").to_string(),
                    offset: t.offset,
                    len: t.len,
                }
            })
            .collect();

        let mut arch = Arch {
            config,
            tensors: b.tensors,
            total: b.total,
            token_embed,
            pos_embed,
            time_mlp,
            conv_in,
            stages,
            norm_out,
            conv_out,
            kv,
            fingerprint: [0; 32],
        };
        arch.fingerprint = arch.compute_fingerprint();
        Ok(arch)
    }

    fn compute_fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"cones-unet/1\n");
        let c = &self.config;
        h.update(format!("c1={} c2={} embed={} groups={} time={} vocab={} len={} image={}\n",
            c.c1, c.c2, c.embed, c.groups, c.time_dim, c.vocab_size, MAX_PROMPT_LEN, IMAGE_SIZE));
        for t in &self.tensors {
            h.update(format!("{} {:?}\n", t.name, t.shape));
        }
        h.update((self.total as u64).to_le_bytes());
        h.finalize().into()
    }

    /// 32-byte model identity: hash of the descriptor and parameter count.
    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    /// Key and value projection weights of every cross-attention layer, in
    /// network order.
    pub fn kv_registry(&self) -> &[KvEntry] {
        &self.kv
    }

    pub fn kv_count(&self) -> usize {
        self.kv.iter().map(|e| e.len).sum()
    }

    /// Flat parameter positions of the K-V registry, in registry order.
    pub fn kv_addresses(&self) -> Vec<usize> {
        self.kv.iter().flat_map(|e| e.offset..e.offset + e.len).collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub(crate) fn range(&self, id: usize) -> std::ops::Range<usize> {
        let t = &self.tensors[id];
        t.offset..t.offset + t.len
    }

    /// Tensor ids whose parameters intersect any of `addresses`.
    pub fn tensors_touching(&self, addresses: &[usize]) -> Vec<bool> {
        let mut need = vec![false; self.tensors.len()];
        for &a in addresses {
            let id = self.tensors.partition_point(|t| t.offset + t.len <= a);
            if id < need.len() {
                need[id] = true;
            }
        }
        need
    }
}
