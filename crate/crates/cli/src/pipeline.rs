//! Building blocks shared by the subcommands and the acceptance suite.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cones_core::denoiser::{self, make_schedule, ArchConfig, DenoiserParams, NoiseSchedule};
use cones_core::implant::{ConceptObjective, ConceptTerm};
use cones_core::mask::ConceptMask;
use cones_core::rng;
use cones_core::scene::{
    build_base_corpus, build_dataset, build_prior_dataset, detect_subject, Image, PriorDataset, PromptTokens,
    SubjectDataset, SubjectSpec, Vocabulary, PRESENCE_THRESHOLD,
};
use cones_core::scope::{mask_accel, mask_accel_within, mask_naive, MaskScore, MaskSearchConfig, SearchSpace};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{streams, Algorithm, ExperimentConfig};
use crate::exit::Invalid;

/// A validated configuration together with what it implies.
pub struct Env {
    pub cfg: ExperimentConfig,
    pub vocab: Vocabulary,
    pub schedule: NoiseSchedule,
}

impl Env {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = match &cfg.vocabulary {
            Some(p) => Vocabulary::load(p).with_context(|| format!("loading vocabulary {}", p.display()))?,
            None => Vocabulary::standard(),
        };
        let schedule = make_schedule(cfg.schedule_steps)?;
        Ok(Env { cfg, vocab, schedule })
    }

    pub fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.cfg.out)
            .with_context(|| format!("creating output directory {}", self.cfg.out.display()))?;
        Ok(&self.cfg.out)
    }

    pub fn out_path(&self, name: &str) -> Result<PathBuf> {
        Ok(self.out_dir()?.join(name))
    }

    pub fn load_model(&self) -> Result<DenoiserParams> {
        let path = self
            .cfg
            .checkpoint
            .as_ref()
            .ok_or_else(|| Invalid("a checkpoint is required (--checkpoint or \"checkpoint\")".into()))?;
        let model = DenoiserParams::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        if model.arch.config.vocab_size != self.vocab.len() {
            return Err(Invalid(format!(
                "checkpoint expects {} tokens but the vocabulary has {}",
                model.arch.config.vocab_size,
                self.vocab.len()
            ))
            .into());
        }
        Ok(model)
    }

    pub fn tokenize(&self, prompt: &str) -> Result<PromptTokens> {
        Ok(self.vocab.tokenize(prompt)?)
    }
}

/// Trains the base model described by the configuration.
pub fn train_base(env: &Env, observe: impl FnMut(usize, f64)) -> Result<DenoiserParams> {
    let cfg = &env.cfg;
    let corpus = build_base_corpus(cfg.base.corpus_size, cfg.derive(streams::CORPUS), &env.vocab)?;
    let init = DenoiserParams::init(ArchConfig::preset(&cfg.preset, env.vocab.len())?, cfg.derive(streams::INIT))?;
    Ok(denoiser::train_base(init, &corpus, &env.schedule, &cfg.train_config(), observe)?)
}

/// Training data for one subject.
pub struct SubjectData {
    pub spec: SubjectSpec,
    pub subject: SubjectDataset,
    pub prior: PriorDataset,
}

pub fn subject_data(env: &Env, spec: &SubjectSpec, index: usize) -> Result<SubjectData> {
    let seed = rng::derive(env.cfg.derive(streams::DATA), index as u64);
    let subject = build_dataset(spec, env.cfg.data.subject_images, seed, &env.vocab)?;
    let prior = build_prior_dataset(spec.category.name(), env.cfg.data.prior_images, spec, seed, &env.vocab)?;
    Ok(SubjectData {
        spec: spec.clone(),
        subject,
        prior,
    })
}

pub fn all_subject_data(env: &Env) -> Result<Vec<SubjectData>> {
    let specs = env.cfg.subject_specs()?;
    if specs.is_empty() {
        return Err(Invalid("no subjects configured (\"subjects\" or --subject)".into()).into());
    }
    specs.iter().enumerate().map(|(i, s)| subject_data(env, s, i)).collect()
}

/// The implanting objective over `data`; subject `j` of `data` uses the
/// loss seed of configured subject `indices[j]`.
pub fn objective<'a>(
    env: &'a Env,
    model: &'a DenoiserParams,
    data: &'a [SubjectData],
    loss_cfgs: &'a [cones_core::implant::ConceptLossConfig],
) -> Result<ConceptObjective<'a>> {
    let terms = data
        .iter()
        .zip(loss_cfgs)
        .map(|(d, cfg)| ConceptTerm {
            subject: &d.subject,
            prior: &d.prior,
            cfg,
        })
        .collect();
    Ok(ConceptObjective::new(&model.arch, &env.schedule, terms)?)
}

pub fn search(
    algorithm: Algorithm,
    model: &DenoiserParams,
    obj: &ConceptObjective,
    cfg: &MaskSearchConfig,
    within: Option<&ConceptMask>,
) -> Result<(MaskScore, ConceptMask)> {
    let space = SearchSpace::from(model);
    Ok(match (algorithm, within) {
        (_, Some(w)) => mask_accel_within(&space, obj, cfg, w)?,
        (Algorithm::Accelerated, None) => mask_accel(&space, obj, cfg)?,
        (Algorithm::Naive, None) => mask_naive(&space, obj, cfg)?,
    })
}

/// `"a V1* cat a V2* pot"` for the given subjects.
pub fn identifier_prompt(specs: &[SubjectSpec]) -> String {
    specs
        .iter()
        .map(|s| format!("a {} {}", s.identifier, s.category.name()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `n` samples; image `k` uses a seed derived from `(seed, k)`, so any
/// prefix of a run reproduces a shorter run.
pub fn sample_images(env: &Env, model: &DenoiserParams, tokens: &PromptTokens, n: usize, seed: u64) -> Result<Vec<Image>> {
    let base = rng::derive(seed, streams::SAMPLE);
    (0..n)
        .into_par_iter()
        .map(|k| Ok(denoiser::sample(model, tokens, &env.schedule, env.cfg.sampling.guidance, rng::derive(base, k as u64))?))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubjectRate {
    pub identifier: String,
    pub subject_id: String,
    pub rate: f64,
}

/// Detector-based presence rates for one prompt.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub prompt: String,
    pub samples: usize,
    pub subjects: Vec<SubjectRate>,
    /// Share of samples in which every subject is present.
    pub all_present: f64,
    pub mean_rate: f64,
}

pub fn alignment(prompt: &str, images: &[Image], specs: &[SubjectSpec]) -> AlignmentReport {
    let present: Vec<Vec<bool>> = images
        .par_iter()
        .map(|im| specs.iter().map(|s| detect_subject(im, s) >= PRESENCE_THRESHOLD).collect())
        .collect();
    let n = images.len().max(1) as f64;
    let subjects: Vec<SubjectRate> = specs
        .iter()
        .enumerate()
        .map(|(j, s)| SubjectRate {
            identifier: s.identifier.clone(),
            subject_id: s.subject_id.clone(),
            rate: present.iter().filter(|p| p[j]).count() as f64 / n,
        })
        .collect();
    let all_present = if specs.is_empty() {
        0.0
    } else {
        present.iter().filter(|p| p.iter().all(|&b| b)).count() as f64 / n
    };
    let mean_rate = if subjects.is_empty() {
        0.0
    } else {
        subjects.iter().map(|s| s.rate).sum::<f64>() / subjects.len() as f64
    };
    AlignmentReport {
        prompt: prompt.to_string(),
        samples: images.len(),
        subjects,
        all_present,
        mean_rate,
    }
}

/// Samples `prompt` and scores it against `specs`.
pub fn measure(env: &Env, model: &DenoiserParams, prompt: &str, specs: &[SubjectSpec], seed: u64) -> Result<(Vec<Image>, AlignmentReport)> {
    let tokens = env.tokenize(prompt)?;
    let images = sample_images(env, model, &tokens, env.cfg.sampling.n, seed)?;
    let report = alignment(prompt, &images, specs);
    Ok((images, report))
}

pub fn save_grid(env: &Env, images: &[Image], name: &str) -> Result<PathBuf> {
    let path = env.out_path(name)?;
    if !images.is_empty() {
        Image::grid(images, env.cfg.sampling.columns)?
            .save_ppm(&path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// File stem for a subject's artefacts, e.g. `V1` for `V1*`.
pub fn stem(spec: &SubjectSpec) -> String {
    spec.identifier.trim_end_matches('*').to_string()
}
