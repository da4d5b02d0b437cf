//! Concept-implanting losses and mask-restricted fine-tuning.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::denoiser::{self, Arch, Batch, DenoiserParams, LossTerms, NoiseSchedule, Predictor};
use crate::error::{Error, Result};
use crate::mask::ConceptMask;
use crate::rng;
use crate::scene::{PriorDataset, SubjectDataset};
use crate::scope::Objective;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptLossConfig {
    pub lambda: f64,
    pub subject_batch_size: usize,
    pub prior_batch_size: usize,
    pub seed: u64,
}

impl Default for ConceptLossConfig {
    fn default() -> Self {
        ConceptLossConfig {
            lambda: 1.0,
            subject_batch_size: 4,
            prior_batch_size: 8,
            seed: 0,
        }
    }
}

const SUBJECT_STREAM: u64 = 0x5b;
const PRIOR_STREAM: u64 = 0x9a;

impl ConceptLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(format!("λ must be ≥ 0, got {}", self.lambda)));
        }
        if self.subject_batch_size == 0 || self.prior_batch_size == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        Ok(())
    }

    /// Seed of the subject term for stochastic draw `draw`.
    pub fn subject_seed(&self, draw: u64) -> u64 {
        rng::derive(rng::derive(self.seed, draw), SUBJECT_STREAM)
    }

    /// Seed of the prior term for stochastic draw `draw`.
    pub fn prior_seed(&self, draw: u64) -> u64 {
        rng::derive(rng::derive(self.seed, draw), PRIOR_STREAM)
    }
}

fn check_subject(dataset: &SubjectDataset) -> Result<()> {
    if dataset.items.is_empty() {
        return Err(Error::invalid("subject dataset is empty"));
    }
    let id = &dataset.subject.identifier;
    if let Some(ex) = dataset.items.iter().find(|e| !e.text.split_whitespace().any(|w| w == id)) {
        return Err(Error::invalid(format!("prompt \"{}\" lacks identifier {id}", ex.text)));
    }
    Ok(())
}

pub fn subject_batch(dataset: &SubjectDataset, schedule: &NoiseSchedule, seed: u64, size: usize) -> Result<Batch> {
    check_subject(dataset)?;
    Batch::sample(&dataset.items, size, schedule, seed)
}

pub fn prior_batch(dataset: &PriorDataset, schedule: &NoiseSchedule, seed: u64, size: usize) -> Result<Batch> {
    if dataset.items.is_empty() {
        return Err(Error::invalid("prior dataset is empty"));
    }
    Batch::sample(&dataset.items, size, schedule, seed)
}

/// Subject-preserving loss on a seeded batch of the subject's images.
pub fn subject_loss<P: Predictor + ?Sized>(
    model: &P,
    dataset: &SubjectDataset,
    schedule: &NoiseSchedule,
    seed: u64,
    batch_size: usize,
) -> Result<f64> {
    denoiser::diffusion_loss(model, &subject_batch(dataset, schedule, seed, batch_size)?, schedule)
}

/// Prior-preserving loss on a seeded batch of same-category pairs.
pub fn prior_loss<P: Predictor + ?Sized>(
    model: &P,
    dataset: &PriorDataset,
    schedule: &NoiseSchedule,
    seed: u64,
    batch_size: usize,
) -> Result<f64> {
    denoiser::diffusion_loss(model, &prior_batch(dataset, schedule, seed, batch_size)?, schedule)
}

/// One subject's share of an implanting objective.
#[derive(Clone, Copy, Debug)]
pub struct ConceptTerm<'a> {
    pub subject: &'a SubjectDataset,
    pub prior: &'a PriorDataset,
    pub cfg: &'a ConceptLossConfig,
}

fn check_terms(terms: &[ConceptTerm]) -> Result<()> {
    if terms.is_empty() {
        return Err(Error::invalid("at least one subject is required"));
    }
    for (i, t) in terms.iter().enumerate() {
        t.cfg.validate()?;
        if terms[..i].iter().any(|o| o.subject.subject.identifier == t.subject.subject.identifier) {
            return Err(Error::invalid(format!(
                "identifier {} used by more than one subject",
                t.subject.subject.identifier
            )));
        }
    }
    Ok(())
}

/// The weighted batches making up `Σ_j (ℒ_sub,j + λ_j ℒ_pr,j)` for draw `draw`.
pub fn concept_terms(terms: &[ConceptTerm], schedule: &NoiseSchedule, draw: u64) -> Result<LossTerms> {
    check_terms(terms)?;
    let mut out = LossTerms::default();
    for t in terms {
        out.terms.push((
            1.0,
            subject_batch(t.subject, schedule, t.cfg.subject_seed(draw), t.cfg.subject_batch_size)?,
        ));
        if t.cfg.lambda > 0.0 {
            out.terms.push((
                t.cfg.lambda,
                prior_batch(t.prior, schedule, t.cfg.prior_seed(draw), t.cfg.prior_batch_size)?,
            ));
        }
    }
    Ok(out)
}

/// `ℒ_con = ℒ_sub + λ ℒ_pr` with independent seeds derived from `cfg.seed`.
pub fn concept_loss<P: Predictor + ?Sized>(
    model: &P,
    subject: &SubjectDataset,
    prior: &PriorDataset,
    cfg: &ConceptLossConfig,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    cfg.validate()?;
    let sub = subject_loss(model, subject, schedule, cfg.subject_seed(0), cfg.subject_batch_size)?;
    if cfg.lambda == 0.0 {
        return Ok(sub);
    }
    let pr = prior_loss(model, prior, schedule, cfg.prior_seed(0), cfg.prior_batch_size)?;
    Ok(sub + cfg.lambda * pr)
}

/// Sum of the concept-implanting losses of all subjects.
pub fn multi_concept_loss<P: Predictor + ?Sized>(
    model: &P,
    terms: &[ConceptTerm],
    schedule: &NoiseSchedule,
) -> Result<f64> {
    check_terms(terms)?;
    let mut total = 0.0;
    for t in terms {
        total += concept_loss(model, t.subject, t.prior, t.cfg, schedule)?;
    }
    Ok(total)
}

/// The (multi-)concept-implanting loss of a model architecture as a search
/// objective; each draw resamples timesteps and noise.
pub struct ConceptObjective<'a> {
    pub arch: &'a Arch,
    pub schedule: &'a NoiseSchedule,
    pub terms: Vec<ConceptTerm<'a>>,
}

impl<'a> ConceptObjective<'a> {
    pub fn new(arch: &'a Arch, schedule: &'a NoiseSchedule, terms: Vec<ConceptTerm<'a>>) -> Result<Self> {
        check_terms(&terms)?;
        Ok(ConceptObjective { arch, schedule, terms })
    }

    pub fn loss_terms(&self, draw: u64) -> Result<LossTerms> {
        concept_terms(&self.terms, self.schedule, draw)
    }
}

impl Objective for ConceptObjective<'_> {
    fn eval(&self, theta: &[f32], draw: u64, subset: &[usize]) -> Result<(f64, Vec<f64>)> {
        denoiser::grad_at(self.arch, theta, &self.loss_terms(draw)?, self.schedule, subset)
    }

    fn value(&self, theta: &[f32], draw: u64) -> Result<f64> {
        let model = ThetaView { arch: self.arch, theta };
        denoiser::weighted_loss(&model, &self.loss_terms(draw)?, self.schedule)
    }
}

struct ThetaView<'a> {
    arch: &'a Arch,
    theta: &'a [f32],
}

impl Predictor for ThetaView<'_> {
    fn predict(&self, x_t: &[f32], s: f64, tokens: &crate::scene::PromptTokens) -> Vec<f32> {
        denoiser::net::forward::<f32>(self.arch, self.theta, x_t, s, tokens).0
    }
}

/// Numeric resolution of the per-neuron scaling factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    Float32,
    Float16,
    Quaternary,
    Binary,
}

impl AccuracyMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "float32" => Ok(AccuracyMode::Float32),
            "float16" => Ok(AccuracyMode::Float16),
            "quaternary" => Ok(AccuracyMode::Quaternary),
            "binary" => Ok(AccuracyMode::Binary),
            _ => Err(Error::invalid(format!("unknown accuracy mode \"{s}\""))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub mode: AccuracyMode,
    pub steps: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub changed_param_count: usize,
}

/// Draw used for the before/after loss evaluations of a fine-tune run.
pub const REPORT_DRAW: u64 = u64::MAX;

fn snap_quaternary(s: f64) -> f64 {
    ((s.clamp(0.0, 1.0) * 3.0).round()) / 3.0
}

/// Optimises a scale `s` per concept neuron (value `θ·s`, `s` starting at 1)
/// with plain SGD while every other parameter stays bit-identical. Binary
/// mode sets `s = 0` without any optimisation, which is exactly shutting.
pub fn finetune_masked(
    params: &DenoiserParams,
    mask: &ConceptMask,
    objective: &dyn Objective,
    mode: AccuracyMode,
    steps: usize,
    lr: f64,
) -> Result<(DenoiserParams, FinetuneReport)> {
    if mask.fingerprint != params.fingerprint() {
        return Err(Error::FingerprintMismatch);
    }
    if mode == AccuracyMode::Binary && steps > 0 {
        return Err(Error::invalid("binary mode performs no optimisation steps"));
    }
    if !(lr > 0.0) && steps > 0 {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let addrs = mask.addresses(params.kv_registry())?;
    let base: Vec<f64> = addrs.iter().map(|&a| params.values[a] as f64).collect();
    let loss_before = objective.value(&params.values, REPORT_DRAW)?;

    let mut theta = params.values.clone();
    let write = |theta: &mut [f32], scales: &[f64]| {
        for ((&a, &b), &s) in addrs.iter().zip(&base).zip(scales) {
            theta[a] = (b * s) as f32;
        }
    };
    // `latent` holds the optimised variable; `effective` is what the network sees
    let mut latent = vec![1.0f64; addrs.len()];
    let effective = |latent: &[f64]| -> Vec<f64> {
        match mode {
            AccuracyMode::Float32 => latent.iter().map(|&s| s as f32 as f64).collect(),
            AccuracyMode::Float16 => latent.iter().map(|&s| f16::from_f64(s).to_f64()).collect(),
            AccuracyMode::Quaternary => latent.iter().map(|&s| snap_quaternary(s)).collect(),
            AccuracyMode::Binary => vec![0.0; latent.len()],
        }
    };
    for step in 0..steps {
        let scales = effective(&latent);
        write(&mut theta, &scales);
        let (loss, g) = objective.eval(&theta, step as u64, &addrs)?;
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(step, "non-finite loss or gradient during fine-tuning"));
        }
        for ((l, &b), &gi) in latent.iter_mut().zip(&base).zip(&g) {
            // ∂ℒ/∂s = θ · ∂ℒ/∂θ(θ·s)
            *l -= lr * b * gi;
            match mode {
                AccuracyMode::Float32 => *l = *l as f32 as f64,
                AccuracyMode::Float16 => *l = f16::from_f64(*l).to_f64(),
                // the latent stays continuous; only its snapped value is used
                AccuracyMode::Quaternary => *l = l.clamp(-0.5, 1.5),
                AccuracyMode::Binary => {}
            }
        }
    }
    write(&mut theta, &effective(&latent));
    let out = params.with_values(theta)?;
    let loss_after = objective.value(&out.values, REPORT_DRAW)?;
    let changed = params
        .values
        .iter()
        .zip(&out.values)
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    Ok((
        out,
        FinetuneReport {
            mode,
            steps,
            loss_before,
            loss_after,
            changed_param_count: changed,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{make_schedule, ArchConfig};
    use crate::mask::apply;
    use crate::scene::{make_subject, Category, Example, Image, PromptTokens, Vocabulary, IMAGE_SIZE};

    /// Predicts a constant grey level, independent of the input.
    struct Constant(f32);

    impl Predictor for Constant {
        fn predict(&self, _x: &[f32], _s: f64, _tokens: &PromptTokens) -> Vec<f32> {
            vec![self.0; 3 * IMAGE_SIZE * IMAGE_SIZE]
        }
    }

    fn flat(level: f32, text: &str, vocab: &Vocabulary) -> Example {
        Example {
            image: Image::filled(IMAGE_SIZE, IMAGE_SIZE, [level; 3]),
            prompt: vocab.tokenize(text).unwrap(),
            text: text.into(),
        }
    }

    fn flat_sets(identifier: &str) -> (SubjectDataset, PriorDataset) {
        let v = Vocabulary::standard();
        let subject = make_subject("cat", 0).unwrap().with_identifier(identifier[1..2].parse().unwrap()).unwrap();
        let s = SubjectDataset {
            items: (0..3).map(|_| flat(0.5, &format!("a {identifier} cat"), &v)).collect(),
            subject,
        };
        let p = PriorDataset {
            category: Category::Cat,
            items: (0..3).map(|_| flat(0.5, "a cat", &v)).collect(),
        };
        (s, p)
    }

    /// Grey level whose per-item loss against 0.5 images is `target`.
    fn offset_for(target: f64) -> f32 {
        0.5 + (target / (3 * IMAGE_SIZE * IMAGE_SIZE) as f64).sqrt() as f32
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let sched = make_schedule(20).unwrap();
        let (s, p) = flat_sets("V1*");
        assert_eq!(subject_loss(&Constant(0.5), &s, &sched, 3, 4).unwrap(), 0.0);
        assert_eq!(prior_loss(&Constant(0.5), &p, &sched, 3, 4).unwrap(), 0.0);
    }

    #[test]
    fn concept_loss_arithmetic() {
        let sched = make_schedule(20).unwrap();
        let (s, p) = flat_sets("V1*");
        let m = Constant(offset_for(0.5));
        let cfg = ConceptLossConfig::default();
        let l = concept_loss(&m, &s, &p, &cfg, &sched).unwrap();
        assert!((l - 1.0).abs() < 1e-5, "{l}");
        let l0 = concept_loss(&m, &s, &p, &ConceptLossConfig { lambda: 0.0, ..cfg.clone() }, &sched).unwrap();
        let sub = subject_loss(&m, &s, &sched, cfg.subject_seed(0), cfg.subject_batch_size).unwrap();
        assert_eq!(l0, sub);
        let l2 = concept_loss(&m, &s, &p, &ConceptLossConfig { lambda: 2.0, ..cfg.clone() }, &sched).unwrap();
        assert!(((l2 - l0) - 2.0 * (l - l0)).abs() < 1e-9);
        assert!(concept_loss(&m, &s, &p, &ConceptLossConfig { lambda: -1.0, ..cfg }, &sched).is_err());
    }

    #[test]
    fn multi_concept_sums_and_rejects_duplicates() {
        let sched = make_schedule(20).unwrap();
        let (s1, p1) = flat_sets("V1*");
        let (s2, p2) = flat_sets("V2*");
        let cfg = ConceptLossConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let m = Constant(offset_for(0.5));
        let one = [ConceptTerm {
            subject: &s1,
            prior: &p1,
            cfg: &cfg,
        }];
        let single = multi_concept_loss(&m, &one, &sched).unwrap();
        assert_eq!(single, concept_loss(&m, &s1, &p1, &cfg, &sched).unwrap());
        let two = [one[0], ConceptTerm {
            subject: &s2,
            prior: &p2,
            cfg: &cfg,
        }];
        assert!((multi_concept_loss(&m, &two, &sched).unwrap() - 1.0).abs() < 1e-5);
        let dup = [one[0], one[0]];
        assert!(multi_concept_loss(&m, &dup, &sched).is_err());
    }

    #[test]
    fn losses_are_seeded() {
        let sched = make_schedule(20).unwrap();
        let v = Vocabulary::standard();
        let subject = make_subject("pot", 1).unwrap();
        let s = crate::scene::build_dataset(&subject, 3, 0, &v).unwrap();
        let model = DenoiserParams::init(ArchConfig::preset("micro", v.len()).unwrap(), 0).unwrap();
        let a = subject_loss(&model, &s, &sched, 9, 2).unwrap();
        assert_eq!(a, subject_loss(&model, &s, &sched, 9, 2).unwrap());
        assert!(a >= 0.0);
        let mut no_id = s.clone();
        no_id.items[0].text = "a pot".into();
        assert!(subject_loss(&model, &no_id, &sched, 9, 2).is_err());
    }

    /// `ℒ(θ) = Σ θ²` over every parameter.
    struct Quadratic;

    impl Objective for Quadratic {
        fn eval(&self, theta: &[f32], _draw: u64, subset: &[usize]) -> Result<(f64, Vec<f64>)> {
            let l = theta.iter().map(|&v| (v as f64).powi(2)).sum();
            Ok((l, subset.iter().map(|&a| 2.0 * theta[a] as f64).collect()))
        }
    }

    fn masked_model() -> (DenoiserParams, ConceptMask) {
        let p = DenoiserParams::init(ArchConfig::preset("micro", 10).unwrap(), 2).unwrap();
        let mut m = ConceptMask::empty(p.fingerprint(), p.kv_registry());
        m.layers[0].indices = vec![0, 5, 9];
        m.layers[3].indices = vec![2];
        (p, m)
    }

    #[test]
    fn binary_mode_is_shutting() {
        let (p, m) = masked_model();
        let (q, r) = finetune_masked(&p, &m, &Quadratic, AccuracyMode::Binary, 0, 0.02).unwrap();
        assert_eq!(q, apply(&p, &m).unwrap());
        assert_eq!(r.steps, 0);
        assert!(r.loss_after < r.loss_before);
        assert!(finetune_masked(&p, &m, &Quadratic, AccuracyMode::Binary, 1, 0.02).is_err());
    }

    #[test]
    fn float32_step_follows_negative_gradient() {
        let (p, m) = masked_model();
        let lr = 0.02;
        let (q, r) = finetune_masked(&p, &m, &Quadratic, AccuracyMode::Float32, 1, lr).unwrap();
        for a in m.addresses(p.kv_registry()).unwrap() {
            let th = p.values[a] as f64;
            // ∂/∂s (θ s)² at s = 1 is 2θ², so s = 1 − 2·lr·θ²
            let expect = th * (1.0 - lr * 2.0 * th * th);
            assert!((q.values[a] as f64 - expect).abs() < 1e-6);
        }
        assert!(r.changed_param_count <= 4);
    }

    #[test]
    fn every_mode_freezes_the_rest() {
        let (p, m) = masked_model();
        let addrs = m.addresses(p.kv_registry()).unwrap();
        for (mode, steps) in [
            (AccuracyMode::Float32, 3),
            (AccuracyMode::Float16, 3),
            (AccuracyMode::Quaternary, 3),
            (AccuracyMode::Binary, 0),
        ] {
            let (q, _) = finetune_masked(&p, &m, &Quadratic, mode, steps, 0.5).unwrap();
            for (i, (a, b)) in p.values.iter().zip(&q.values).enumerate() {
                if !addrs.contains(&i) {
                    assert_eq!(a.to_bits(), b.to_bits(), "{mode:?} changed {i}");
                }
            }
        }
        let mut other = m.clone();
        other.fingerprint[0] ^= 1;
        assert!(finetune_masked(&p, &other, &Quadratic, AccuracyMode::Float32, 1, 0.1).is_err());
    }

    #[test]
    fn quaternary_values_lie_on_grid() {
        let (p, m) = masked_model();
        let (q, _) = finetune_masked(&p, &m, &Quadratic, AccuracyMode::Quaternary, 20, 5.0).unwrap();
        for a in m.addresses(p.kv_registry()).unwrap() {
            let s = q.values[a] as f64 / p.values[a] as f64;
            let snapped = (s * 3.0).round() / 3.0;
            assert!((s - snapped).abs() < 1e-5, "{s}");
        }
    }
}
