//! Experiment configuration: one JSON document, every field optional.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cones_core::denoiser::{Optimizer, TrainConfig};
use cones_core::implant::{AccuracyMode, ConceptLossConfig};
use cones_core::rng;
use cones_core::scene::{identifier_word, make_subject, SubjectSpec, IDENTIFIER_SLOTS};
use cones_core::scope::{MaskSearchConfig, ThresholdMode};
use serde::{Deserialize, Serialize};

use crate::exit::Invalid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub schedule_steps: usize,
    pub preset: String,
    /// Vocabulary file; the built-in vocabulary when absent.
    pub vocabulary: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub base: BaseConfig,
    pub subjects: Vec<SubjectConfig>,
    pub data: DataConfig,
    pub loss: LossConfig,
    pub search: SearchConfig,
    pub finetune: FinetuneConfig,
    pub cotune: CotuneConfig,
    pub sampling: SamplingConfig,
    pub masks: Vec<PathBuf>,
    /// First-subject mask for `sequential`.
    pub mask_a: Option<PathBuf>,
    pub prompt: Option<String>,
    /// Input image for `attention`.
    pub image: Option<PathBuf>,
    /// Timestep for `attention`.
    pub t: usize,
    /// Minimum acceptable first-subject rate after `sequential`.
    pub retention_floor: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            threads: None,
            schedule_steps: 50,
            preset: "tiny".into(),
            vocabulary: None,
            checkpoint: None,
            base: BaseConfig::default(),
            subjects: Vec::new(),
            data: DataConfig::default(),
            loss: LossConfig::default(),
            search: SearchConfig::default(),
            finetune: FinetuneConfig::default(),
            cotune: CotuneConfig::default(),
            sampling: SamplingConfig::default(),
            masks: Vec::new(),
            mask_a: None,
            prompt: None,
            image: None,
            t: 25,
            retention_floor: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    pub corpus_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub cond_dropout: f64,
    pub clip: f64,
    pub optimizer: Optimizer,
    pub cosine_decay: bool,
    pub ema: f64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        BaseConfig {
            corpus_size: 8192,
            steps: t.steps,
            lr: t.lr,
            momentum: t.momentum,
            batch_size: t.batch_size,
            cond_dropout: t.cond_dropout,
            clip: t.clip,
            optimizer: t.optimizer,
            cosine_decay: t.cosine_decay,
            ema: t.ema,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectConfig {
    pub category: String,
    pub seed: u64,
    /// `V1*` .. `V8*`; defaults to the subject's position in the list.
    #[serde(default)]
    pub identifier: Option<String>,
}

impl SubjectConfig {
    /// Parses `category:seed[:identifier]`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if !(2..=3).contains(&parts.len()) {
            return Err(Invalid(format!("subject \"{s}\" is not category:seed[:identifier]")).into());
        }
        let seed = parts[1]
            .parse()
            .map_err(|_| Invalid(format!("subject seed \"{}\" is not an integer", parts[1])))?;
        Ok(SubjectConfig {
            category: parts[0].to_string(),
            seed,
            identifier: parts.get(2).map(|p| p.to_string()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub subject_images: usize,
    pub prior_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            subject_images: 5,
            prior_images: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub subject_batch_size: usize,
    pub prior_batch_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        let c = ConceptLossConfig::default();
        LossConfig {
            lambda: c.lambda,
            subject_batch_size: c.subject_batch_size,
            prior_batch_size: c.prior_batch_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Naive,
    Accelerated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub algorithm: Algorithm,
    pub rho: f64,
    pub k: usize,
    pub threshold: ThresholdMode,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let c = MaskSearchConfig::default();
        SearchConfig {
            algorithm: Algorithm::Accelerated,
            rho: c.rho,
            k: c.k,
            threshold: c.threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub mode: AccuracyMode,
    pub steps: usize,
    pub lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: AccuracyMode::Binary,
            steps: 0,
            lr: 2e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CotuneConfig {
    /// Search steps per involved subject; the total grows linearly with the
    /// subject count.
    pub k_per_subject: usize,
    pub rho: f64,
    /// Selection within the union mask.
    pub threshold: ThresholdMode,
}

impl Default for CotuneConfig {
    fn default() -> Self {
        CotuneConfig {
            k_per_subject: 10,
            rho: 1e-2,
            threshold: ThresholdMode::Quantile(0.8),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub n: usize,
    pub guidance: f64,
    pub columns: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            n: 50,
            guidance: 3.0,
            columns: 10,
        }
    }
}

/// Independent seed streams derived from the experiment seed.
pub mod streams {
    pub const TRAIN: u64 = 0x7a1;
    pub const CORPUS: u64 = 0xc0a;
    pub const INIT: u64 = 0x1a1;
    pub const SEARCH: u64 = 0x5e4;
    pub const LOSS: u64 = 0x105;
    pub const SAMPLE: u64 = 0x5a9;
    pub const DATA: u64 = 0xda7;
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.len() > IDENTIFIER_SLOTS as usize {
            return Err(Invalid(format!("at most {IDENTIFIER_SLOTS} subjects")).into());
        }
        let specs = self.subject_specs()?;
        for (i, a) in specs.iter().enumerate() {
            if specs[..i].iter().any(|b| b.identifier == a.identifier) {
                return Err(Invalid(format!("identifier {} is used twice", a.identifier)).into());
            }
        }
        if !cones_core::denoiser::arch::PRESETS.contains(&self.preset.as_str()) {
            return Err(Invalid(format!("unknown preset \"{}\"", self.preset)).into());
        }
        if self.threads == Some(0) {
            return Err(Invalid("threads must be positive".into()).into());
        }
        if !(self.sampling.guidance >= 0.0) || self.sampling.columns == 0 {
            return Err(Invalid("sampling needs guidance ≥ 0 and at least one column".into()).into());
        }
        self.concept_loss(0).validate()?;
        Ok(())
    }

    pub fn derive(&self, stream: u64) -> u64 {
        rng::derive(self.seed, stream)
    }

    pub fn train_config(&self) -> TrainConfig {
        let b = &self.base;
        TrainConfig {
            steps: b.steps,
            lr: b.lr,
            momentum: b.momentum,
            batch_size: b.batch_size,
            seed: self.derive(streams::TRAIN),
            cond_dropout: b.cond_dropout,
            clip: b.clip,
            optimizer: b.optimizer,
            cosine_decay: b.cosine_decay,
            ema: b.ema,
        }
    }

    /// Loss configuration for subject `index`.
    pub fn concept_loss(&self, index: usize) -> ConceptLossConfig {
        ConceptLossConfig {
            lambda: self.loss.lambda,
            subject_batch_size: self.loss.subject_batch_size,
            prior_batch_size: self.loss.prior_batch_size,
            seed: rng::derive(self.derive(streams::LOSS), index as u64),
        }
    }

    pub fn search_config(&self, index: usize) -> MaskSearchConfig {
        MaskSearchConfig {
            rho: self.search.rho,
            threshold: self.search.threshold,
            k: self.search.k,
            seed: rng::derive(self.derive(streams::SEARCH), index as u64),
        }
    }

    /// Subject specs with identifiers resolved.
    pub fn subject_specs(&self) -> Result<Vec<SubjectSpec>> {
        self.subjects
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let spec = make_subject(&s.category, s.seed)?;
                let word = s.identifier.clone().unwrap_or_else(|| identifier_word(i as u8 + 1));
                let slot = (1..=IDENTIFIER_SLOTS)
                    .find(|&k| identifier_word(k) == word)
                    .ok_or_else(|| Invalid(format!("identifier \"{word}\" is not one of V1*..V{IDENTIFIER_SLOTS}*")))?;
                Ok(spec.with_identifier(slot)?)
            })
            .collect()
    }
}
