//! The acceptance checks. `cones verify` and the `acceptance` test target
//! both run these; each check returns one pass/fail line.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use cones_core::denoiser::{self, attention_maps, make_schedule, noisify, ArchConfig, DenoiserParams};
use cones_core::implant::{finetune_masked, AccuracyMode, REPORT_DRAW};
use cones_core::mask::{self, apply, concat_all, intersection_fraction, iou, ConceptMask};
use cones_core::rng;
use cones_core::scene::{build_base_corpus, make_subject, SubjectSpec};
use cones_core::scope::{cn_criterion, Objective, ThresholdMode};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::commands;
use crate::config::{Algorithm, ExperimentConfig, SubjectConfig};
use crate::pipeline::{self, all_subject_data, identifier_prompt, measure, objective, subject_data, Env, SubjectData};

/// Relative error bound of the gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-4;
pub const GRAD_ADDRESSES: usize = 100;
pub const CRITERION_ADDRESSES: usize = 1000;
pub const SIGN_AGREEMENT: f64 = 0.98;
/// Addresses with `|θg| < AMBIGUITY_BAND · |ℒ|` are not scored.
pub const AMBIGUITY_BAND: f64 = 1e-6;
pub const PEARSON_MIN: f64 = 0.9;
pub const SPEARMAN_MIN: f64 = 0.95;
pub const IOU_MIN: f64 = 0.8;
/// Matched sparsity of the naive/accelerated comparison.
pub const MATCHED_SPARSITY: f64 = 0.01;
/// Draws averaged when comparing implanting losses.
pub const LOSS_DRAWS: u64 = 16;
pub const RATE_WITH_MASK: f64 = 0.7;
pub const RATE_WITHOUT_MASK: f64 = 0.3;
pub const ACCURACY_GAP: f64 = 0.15;
pub const STORAGE_SPARSITY: f64 = 0.015;
pub const STORAGE_RATIO: f64 = 0.10;
pub const ROUNDTRIP_MASKS: usize = 100;
pub const CONSERVATION_TOLERANCE: f64 = 1e-12;
pub const NORMALISATION_TOLERANCE: f64 = 1e-6;

pub const NAMES: [&str; 12] = [
    "gradient oracle",
    "criterion correctness",
    "naive/accelerated equivalence",
    "shutting lowers the implanting loss",
    "concept generation",
    "additivity",
    "collaborative fine-tuning",
    "digital-accuracy robustness",
    "freeze outside the mask",
    "storage",
    "conservation and normalisation",
    "determinism",
];

#[derive(Clone, Debug, Serialize)]
pub struct Outcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {:>2} {} {}: {} ({:.1} s)",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

/// Subjects used when the configuration names none: one per category.
pub fn default_subjects() -> Vec<SubjectConfig> {
    ["cat", "pot", "glasses", "lake"]
        .iter()
        .map(|c| SubjectConfig {
            category: c.to_string(),
            seed: 0,
            identifier: None,
        })
        .collect()
}

/// Shared state of one verification run.
pub struct Suite {
    pub env: Env,
    base: Option<DenoiserParams>,
    /// Per configured subject: mask found on the base model.
    masks: Vec<Option<ConceptMask>>,
}

impl Suite {
    pub fn new(mut cfg: ExperimentConfig) -> Result<Self> {
        if cfg.subjects.is_empty() {
            cfg.subjects = default_subjects();
        }
        let env = Env::new(cfg)?;
        let n = env.cfg.subjects.len();
        Ok(Suite {
            env,
            base: None,
            masks: vec![None; n],
        })
    }

    /// The configured checkpoint, or a base trained from the configuration.
    pub fn base(&mut self) -> Result<&DenoiserParams> {
        if self.base.is_none() {
            let model = match &self.env.cfg.checkpoint {
                Some(_) => self.env.load_model()?,
                None => pipeline::train_base(&self.env, |_, _| {})?,
            };
            self.base = Some(model);
        }
        Ok(self.base.as_ref().unwrap())
    }

    fn data(&self, index: usize) -> Result<SubjectData> {
        let specs = self.env.cfg.subject_specs()?;
        subject_data(&self.env, &specs[index], index)
    }

    fn mask(&mut self, index: usize) -> Result<ConceptMask> {
        if let Some(m) = &self.masks[index] {
            return Ok(m.clone());
        }
        let data = self.data(index)?;
        let base = self.base()?.clone();
        let loss = [self.env.cfg.concept_loss(index)];
        let obj = objective(&self.env, &base, std::slice::from_ref(&data), &loss)?;
        let (_, m) = pipeline::search(self.env.cfg.search.algorithm, &base, &obj, &self.env.cfg.search_config(index), None)?;
        self.masks[index] = Some(m.clone());
        Ok(m)
    }

    fn need_subjects(&self, n: usize) -> Result<()> {
        if self.env.cfg.subjects.len() < n {
            return Err(crate::exit::Invalid(format!("this check needs {n} configured subjects")).into());
        }
        Ok(())
    }

    pub fn run_one(&mut self, id: usize) -> Result<Outcome> {
        let start = Instant::now();
        let (passed, detail) = match id {
            1 => gradient_oracle(&self.env)?,
            2 => criterion_correctness(self)?,
            3 => equivalence(self)?,
            4 => shutting_lowers_loss(self)?,
            5 => concept_generation(self)?,
            6 => additivity(self)?,
            7 => collaborative(self)?,
            8 => accuracy_robustness(self)?,
            9 => freeze(self)?,
            10 => storage(&self.env)?,
            11 => conservation(self)?,
            12 => determinism(&self.env.cfg)?,
            _ => return Err(crate::exit::Invalid(format!("no criterion {id}")).into()),
        };
        Ok(Outcome {
            id,
            name: NAMES[id - 1],
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Runs the selected criteria (all when `only` is empty), reporting each
/// as it finishes, and writes `verify_report.json`.
pub fn run(env: &Env, only: &[usize], mut report: impl FnMut(&Outcome)) -> Result<Vec<Outcome>> {
    let mut suite = Suite::new(env.cfg.clone())?;
    let ids: Vec<usize> = if only.is_empty() { (1..=12).collect() } else { only.to_vec() };
    let mut out = Vec::new();
    for id in ids {
        let o = suite.run_one(id)?;
        report(&o);
        out.push(o);
    }
    pipeline::write_json(&env.out_path("verify_report.json")?, &out)?;
    Ok(out)
}

fn random_addresses(kv: &[usize], n: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, 0xadd);
    (0..n).map(|_| kv[r.gen_range(0..kv.len())]).collect()
}

/// Largest relative error between autodiff and central differences over
/// `subset`, all in f64.
pub fn worst_gradient_error(model: &DenoiserParams, terms: &denoiser::LossTerms, schedule: &denoiser::NoiseSchedule, subset: &[usize]) -> Result<f64> {
    let theta: Vec<f64> = model.values.iter().map(|&v| v as f64).collect();
    let (_, g) = denoiser::grad_f64(&model.arch, &theta, terms, schedule, subset)?;
    let errors: Vec<f64> = subset
        .par_iter()
        .zip(&g)
        .map(|(&a, &ga)| {
            let eval = |delta: f64| {
                let mut t = theta.clone();
                t[a] += delta;
                denoiser::grad_f64(&model.arch, &t, terms, schedule, &[]).map(|x| x.0)
            };
            let fd = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            Ok((fd - ga).abs() / fd.abs().max(ga.abs()).max(1e-6))
        })
        .collect::<Result<_>>()?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}

fn gradient_oracle(env: &Env) -> Result<(bool, String)> {
    let mut model = DenoiserParams::init(ArchConfig::preset("micro", env.vocab.len())?, env.cfg.derive(0x9a))?;
    // away from the symmetric initialisation
    let mut r = rng::stream(env.cfg.seed, 0x9b);
    for v in &mut model.values {
        *v += r.gen_range(-0.2f32..0.2);
    }
    let schedule = make_schedule(20)?;
    let specs = [make_subject("cat", 4)?, make_subject("lake", 8)?.with_identifier(2)?];
    let data: Vec<SubjectData> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut tiny = env.cfg.clone();
            tiny.data.subject_images = 3;
            tiny.data.prior_images = 4;
            let e = Env::new(tiny)?;
            subject_data(&e, s, i)
        })
        .collect::<Result<_>>()?;
    let mut loss = env.cfg.loss.clone();
    loss.subject_batch_size = 2;
    loss.prior_batch_size = 2;
    loss.lambda = 0.5;
    let cfgs: Vec<_> = (0..2)
        .map(|i| {
            let mut c = env.cfg.concept_loss(i);
            c.lambda = loss.lambda;
            c.subject_batch_size = loss.subject_batch_size;
            c.prior_batch_size = loss.prior_batch_size;
            c
        })
        .collect();
    let local = Env {
        cfg: env.cfg.clone(),
        vocab: env.vocab.clone(),
        schedule: schedule.clone(),
    };
    let subset = random_addresses(&model.arch.kv_addresses(), GRAD_ADDRESSES, env.cfg.derive(0x9c));
    let single = objective(&local, &model, &data[..1], &cfgs[..1])?.loss_terms(0)?;
    let multi = objective(&local, &model, &data, &cfgs)?.loss_terms(0)?;
    let e1 = worst_gradient_error(&model, &single, &schedule, &subset)?;
    let e2 = worst_gradient_error(&model, &multi, &schedule, &subset)?;
    Ok((
        e1 < GRAD_TOLERANCE && e2 < GRAD_TOLERANCE,
        format!("worst relative error {e1:.2e} (one subject), {e2:.2e} (two subjects) over {GRAD_ADDRESSES} K-V parameters, bound {GRAD_TOLERANCE:.0e}"),
    ))
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Ranks starting at 1, ties sharing their mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

/// Flags of the `n` highest scores, ties broken by position.
pub fn top_n(scores: &[f64], n: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut flags = vec![false; scores.len()];
    for &i in order.iter().take(n) {
        flags[i] = true;
    }
    flags
}

fn criterion_correctness(s: &mut Suite) -> Result<(bool, String)> {
    let base = s.base()?.clone();
    let data = s.data(0)?;
    let loss = [s.env.cfg.concept_loss(0)];
    let obj = objective(&s.env, &base, std::slice::from_ref(&data), &loss)?;
    let terms = obj.loss_terms(0)?;
    let theta: Vec<f64> = base.values.iter().map(|&v| v as f64).collect();
    let addrs = random_addresses(&base.arch.kv_addresses(), CRITERION_ADDRESSES, s.env.cfg.derive(0xc2));
    let (l0, g) = denoiser::grad_f64(&base.arch, &theta, &terms, &s.env.schedule, &addrs)?;
    let drops: Vec<f64> = addrs
        .par_iter()
        .map(|&a| {
            let mut t = theta.clone();
            t[a] *= 0.99;
            Ok(l0 - denoiser::grad_f64(&base.arch, &t, &terms, &s.env.schedule, &[])?.0)
        })
        .collect::<Result<_>>()?;
    let tg: Vec<f64> = addrs.iter().zip(&g).map(|(&a, &ga)| theta[a] * ga).collect();
    let (mut scored, mut agree) = (0usize, 0usize);
    for (i, &a) in addrs.iter().enumerate() {
        if tg[i].abs() < AMBIGUITY_BAND * l0.abs() {
            continue;
        }
        scored += 1;
        if cn_criterion(theta[a], g[i])? == (drops[i] > 0.0) {
            agree += 1;
        }
    }
    let share = agree as f64 / scored.max(1) as f64;
    let r = pearson(&tg, &drops);
    Ok((
        scored > 0 && share >= SIGN_AGREEMENT && r >= PEARSON_MIN,
        format!("sign agreement {agree}/{scored} = {share:.4} (≥ {SIGN_AGREEMENT}), Pearson {r:.4} (≥ {PEARSON_MIN})"),
    ))
}

fn equivalence(s: &mut Suite) -> Result<(bool, String)> {
    let base = s.base()?.clone();
    let data = s.data(0)?;
    let loss = [s.env.cfg.concept_loss(0)];
    let obj = objective(&s.env, &base, std::slice::from_ref(&data), &loss)?;
    let mut cfg = s.env.cfg.search_config(0);
    cfg.k = 10;
    cfg.rho = 1e-2;
    let (naive, _) = pipeline::search(Algorithm::Naive, &base, &obj, &cfg, None)?;
    let (accel, _) = pipeline::search(Algorithm::Accelerated, &base, &obj, &cfg, None)?;
    let rho = spearman(&naive.scores, &accel.scores);
    let n = (MATCHED_SPARSITY * naive.scores.len() as f64).round() as usize;
    let fp = base.fingerprint();
    let kv = base.kv_registry();
    let a = ConceptMask::from_flags(fp, kv, &top_n(&naive.scores, n))?;
    let b = ConceptMask::from_flags(fp, kv, &top_n(&accel.scores, n))?;
    let overlap = iou(&a, &b)?;
    Ok((
        rho >= SPEARMAN_MIN && overlap >= IOU_MIN,
        format!("Spearman {rho:.4} (≥ {SPEARMAN_MIN}), IoU {overlap:.4} (≥ {IOU_MIN}) at {n} neurons"),
    ))
}

/// Implanting loss averaged over `LOSS_DRAWS` evaluation draws, none of
/// which the search uses.
pub fn expected_loss(obj: &dyn Objective, theta: &[f32]) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..LOSS_DRAWS {
        total += obj.value(theta, REPORT_DRAW - i)?;
    }
    Ok(total / LOSS_DRAWS as f64)
}

fn shutting_lowers_loss(s: &mut Suite) -> Result<(bool, String)> {
    s.need_subjects(3)?;
    let base = s.base()?.clone();
    let mut lines = Vec::new();
    let mut wins = 0;
    for run in 0..3u64 {
        let mut cfg = s.env.cfg.clone();
        cfg.seed = rng::derive(cfg.seed, 0x400 + run);
        let env = Env::new(cfg)?;
        let specs = env.cfg.subject_specs()?;
        for (i, spec) in specs.iter().take(3).enumerate() {
            let data = subject_data(&env, spec, i)?;
            let loss = [env.cfg.concept_loss(i)];
            let obj = objective(&env, &base, std::slice::from_ref(&data), &loss)?;
            let (_, m) = pipeline::search(env.cfg.search.algorithm, &base, &obj, &env.cfg.search_config(i), None)?;
            let before = expected_loss(&obj, &base.values)?;
            let after = expected_loss(&obj, &apply(&base, &m)?.values)?;
            if after < before {
                wins += 1;
            }
            lines.push(format!("{}/{run}: {before:.3}->{after:.3}", spec.identifier));
        }
    }
    Ok((wins == 9, format!("{wins}/9 lowered [{}]", lines.join(", "))))
}

fn concept_generation(s: &mut Suite) -> Result<(bool, String)> {
    let base = s.base()?.clone();
    let m = s.mask(0)?;
    let specs = s.env.cfg.subject_specs()?;
    let spec = std::slice::from_ref(&specs[0]);
    let prompt = identifier_prompt(spec);
    let seed = s.env.cfg.derive(0x55);
    let (_, without) = measure(&s.env, &base, &prompt, spec, seed)?;
    let (_, with) = measure(&s.env, &apply(&base, &m)?, &prompt, spec, seed)?;
    Ok((
        with.mean_rate >= RATE_WITH_MASK && without.mean_rate <= RATE_WITHOUT_MASK,
        format!(
            "\"{prompt}\" over {} seeds: with mask {:.2} (≥ {RATE_WITH_MASK}), without {:.2} (≤ {RATE_WITHOUT_MASK}), {} neurons",
            with.samples,
            with.mean_rate,
            without.mean_rate,
            m.concept_count()
        ),
    ))
}

fn additivity(s: &mut Suite) -> Result<(bool, String)> {
    s.need_subjects(2)?;
    let base = s.base()?.clone();
    let (a, b) = (s.mask(0)?, s.mask(1)?);
    let both = concat_all(&[a.clone(), b.clone()])?;
    let specs = &s.env.cfg.subject_specs()?[..2];
    let prompt = identifier_prompt(specs);
    let seed = s.env.cfg.derive(0x66);
    let rate = |m: &ConceptMask| -> Result<f64> { Ok(measure(&s.env, &apply(&base, m)?, &prompt, specs, seed)?.1.all_present) };
    let (ra, rb, rab) = (rate(&a)?, rate(&b)?, rate(&both)?);
    let overlap = intersection_fraction(&a, &b)?;
    Ok((
        rab > ra && rab > rb,
        format!("both-subjects rate: composed {rab:.2}, first mask {ra:.2}, second mask {rb:.2}; intersection fraction {overlap:.4}"),
    ))
}

fn collaborative(s: &mut Suite) -> Result<(bool, String)> {
    s.need_subjects(4)?;
    let base = s.base()?.clone();
    let all = all_subject_data(&s.env)?;
    let mut lines = Vec::new();
    let mut passed = true;
    for n in [2usize, 4] {
        let masks: Vec<ConceptMask> = (0..n).map(|i| s.mask(i)).collect::<Result<_>>()?;
        let union = concat_all(&masks)?;
        let data = &all[..n];
        let (_, tuned, _) = commands::cotune_model(&s.env, &base, data, &union)?;
        let specs: Vec<SubjectSpec> = data.iter().map(|d| d.spec.clone()).collect();
        let prompt = identifier_prompt(&specs);
        let seed = s.env.cfg.derive(0x77 + n as u64);
        let (_, concat) = measure(&s.env, &apply(&base, &union)?, &prompt, &specs, seed)?;
        let (_, co) = measure(&s.env, &tuned, &prompt, &specs, seed)?;
        let ok = co.mean_rate >= concat.mean_rate && (n < 4 || co.subjects.iter().all(|r| r.rate > 0.0));
        passed &= ok;
        let per: Vec<String> = co.subjects.iter().map(|r| format!("{:.2}", r.rate)).collect();
        lines.push(format!(
            "{n} subjects: cotuned mean {:.2} vs concatenation {:.2} (per subject {})",
            co.mean_rate,
            concat.mean_rate,
            per.join("/")
        ));
    }
    Ok((passed, lines.join("; ")))
}

fn tuned_rate(s: &mut Suite, mode: AccuracyMode) -> Result<f64> {
    let base = s.base()?.clone();
    let m = s.mask(0)?;
    let data = s.data(0)?;
    let loss = [s.env.cfg.concept_loss(0)];
    let obj = objective(&s.env, &base, std::slice::from_ref(&data), &loss)?;
    let steps = if mode == AccuracyMode::Binary { 0 } else { s.env.cfg.finetune.steps.max(1) };
    let (tuned, _) = finetune_masked(&base, &m, &obj, mode, steps, s.env.cfg.finetune.lr)?;
    let spec = std::slice::from_ref(&data.spec);
    Ok(measure(&s.env, &tuned, &identifier_prompt(spec), spec, s.env.cfg.derive(0x88))?.1.mean_rate)
}

fn accuracy_robustness(s: &mut Suite) -> Result<(bool, String)> {
    let binary = tuned_rate(s, AccuracyMode::Binary)?;
    let float = tuned_rate(s, AccuracyMode::Float32)?;
    Ok((
        (binary - float).abs() <= ACCURACY_GAP,
        format!("binary {binary:.2}, float32 {float:.2}, gap {:.2} (≤ {ACCURACY_GAP})", (binary - float).abs()),
    ))
}

/// Digest of the parameters outside `mask`: masked entries are zeroed first.
pub fn outside_digest(model: &DenoiserParams, mask: &ConceptMask) -> Result<[u8; 32]> {
    let mut values = model.values.clone();
    for a in mask.addresses(model.kv_registry())? {
        values[a] = 0.0;
    }
    Ok(model.with_values(values)?.digest())
}

fn freeze(s: &mut Suite) -> Result<(bool, String)> {
    s.need_subjects(2)?;
    let base = s.base()?.clone();
    let m = s.mask(0)?;
    let data = s.data(0)?;
    let loss = [s.env.cfg.concept_loss(0)];
    let obj = objective(&s.env, &base, std::slice::from_ref(&data), &loss)?;
    let reference = outside_digest(&base, &m)?;
    let mut checked = Vec::new();
    let mut passed = true;
    for mode in [AccuracyMode::Float32, AccuracyMode::Float16, AccuracyMode::Quaternary, AccuracyMode::Binary] {
        let steps = if mode == AccuracyMode::Binary { 0 } else { 2 };
        let (tuned, _) = finetune_masked(&base, &m, &obj, mode, steps, s.env.cfg.finetune.lr)?;
        passed &= outside_digest(&tuned, &m)? == reference;
        checked.push(format!("{mode:?}"));
    }
    let union = concat_all(&[m.clone(), s.mask(1)?])?;
    let all = all_subject_data(&s.env)?;
    let (refined, tuned, _) = commands::cotune_model(&s.env, &base, &all[..2], &union)?;
    passed &= refined.is_subset_of(&union)?;
    passed &= outside_digest(&tuned, &union)? == outside_digest(&base, &union)?;
    checked.push("cotune".into());
    Ok((passed, format!("outside-mask digests unchanged after {}", checked.join(", "))))
}

fn storage(env: &Env) -> Result<(bool, String)> {
    let model = DenoiserParams::init(ArchConfig::preset("tiny", env.vocab.len())?, 0)?;
    let (fp, kv) = (model.fingerprint(), model.kv_registry());
    let total: usize = kv.iter().map(|e| e.len).sum();
    let mut r = rng::stream(env.cfg.seed, 0x10);
    let mut worst_ratio = 0.0f64;
    let mut roundtrips = 0;
    for i in 0..ROUNDTRIP_MASKS {
        // every other mask sits at the storage bound, the rest anywhere up to 5%
        let p = if i % 2 == 0 { STORAGE_SPARSITY } else { r.gen_range(0.0..0.05) };
        let flags: Vec<bool> = (0..total).map(|_| r.gen_bool(p)).collect();
        let m = ConceptMask::from_flags(fp, kv, &flags)?;
        let bytes = m.encode()?;
        if ConceptMask::decode(&bytes)? == m && m.flags() == flags {
            roundtrips += 1;
        }
        if mask::sparsity(&m, total) <= STORAGE_SPARSITY {
            worst_ratio = worst_ratio.max(bytes.len() as f64 / (4 * total) as f64);
        }
    }
    Ok((
        roundtrips == ROUNDTRIP_MASKS && worst_ratio <= STORAGE_RATIO,
        format!(
            "largest encoded/dense ratio at ≤ {:.1}% sparsity {:.4} (≤ {STORAGE_RATIO}), {roundtrips}/{ROUNDTRIP_MASKS} roundtrips exact",
            100.0 * STORAGE_SPARSITY,
            worst_ratio
        ),
    ))
}

fn conservation(s: &mut Suite) -> Result<(bool, String)> {
    let schedule = s.env.schedule.clone();
    let worst_sum = (0..=schedule.steps)
        .map(|t| (schedule.alpha[t].powi(2) + schedule.sigma[t].powi(2) - 1.0).abs())
        .fold(0.0, f64::max);
    let base = s.base()?.clone();
    let corpus = build_base_corpus(4, s.env.cfg.derive(0x11), &s.env.vocab)?;
    let mut r = rng::stream(s.env.cfg.seed, 0x11);
    let mut worst_map = 0.0f64;
    let mut maps = 0;
    for (k, ex) in corpus.iter().enumerate() {
        let t = 1 + (k * schedule.steps) / corpus.len();
        let eps: Vec<f32> = (0..ex.image.data.len()).map(|_| r.sample(StandardNormal)).collect();
        let x_t = noisify(&ex.image.data, t, &eps, &schedule)?;
        let set = attention_maps(&base, &x_t, schedule.fraction(t), &ex.prompt)?;
        for layer in &set.layers {
            for m in &layer.maps {
                worst_map = worst_map.max((m.iter().sum::<f64>() - 1.0).abs());
                maps += 1;
            }
        }
    }
    Ok((
        worst_sum <= CONSERVATION_TOLERANCE && worst_map <= NORMALISATION_TOLERANCE,
        format!(
            "max |α²+σ²−1| {worst_sum:.1e} (≤ {CONSERVATION_TOLERANCE:.0e}), max |Σ map − 1| {worst_map:.1e} over {maps} maps (≤ {NORMALISATION_TOLERANCE:.0e})"
        ),
    ))
}

/// The small end-to-end pipeline whose artefacts must be reproducible:
/// train a micro base, implant two subjects, compose and sample.
pub fn determinism_config(cfg: &ExperimentConfig, out: &Path) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.out = out.to_path_buf();
    c.preset = "micro".into();
    c.checkpoint = None;
    c.schedule_steps = 20;
    c.base.corpus_size = 64;
    c.base.steps = 20;
    c.base.batch_size = 4;
    c.subjects = default_subjects().into_iter().take(2).collect();
    c.data.subject_images = 3;
    c.data.prior_images = 8;
    c.search.k = 2;
    c.search.threshold = ThresholdMode::Quantile(0.01);
    c.finetune.mode = AccuracyMode::Float32;
    c.finetune.steps = 2;
    c.sampling.n = 4;
    c.masks = Vec::new();
    c
}

/// Runs the determinism pipeline into `out` and returns its files.
pub fn determinism_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let c = determinism_config(cfg, out);
    let env = Env::new(c.clone())?;
    let trained = commands::train_base(&env)?;
    let mut c2 = c;
    c2.checkpoint = Some(trained.checkpoint);
    let env = Env::new(c2.clone())?;
    let reports = commands::implant(&env)?;
    c2.masks = reports.iter().map(|r| r.mask.clone()).collect();
    let env = Env::new(c2)?;
    commands::compose(&env)?;
    commands::sample(&env)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(out)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.sort();
    Ok(files)
}

fn determinism(cfg: &ExperimentConfig) -> Result<(bool, String)> {
    let root = cfg.out.join("determinism");
    let (a, b) = (root.join("run_a"), root.join("run_b"));
    for d in [&a, &b] {
        if d.exists() {
            std::fs::remove_dir_all(d).with_context(|| format!("clearing {}", d.display()))?;
        }
    }
    let fa = determinism_pipeline(cfg, &a)?;
    let fb = determinism_pipeline(cfg, &b)?;
    let names = |fs: &[PathBuf]| -> Vec<_> { fs.iter().map(|p| p.file_name().map(|n| n.to_owned())).collect() };
    let mut differing = Vec::new();
    if names(&fa) != names(&fb) {
        differing.push("file list".to_string());
    }
    let mut compared = 0;
    for (x, y) in fa.iter().zip(&fb) {
        let text = x.extension().is_some_and(|e| e == "json");
        let (bx, by) = (std::fs::read(x)?, std::fs::read(y)?);
        // reports name their own output directory; compare them with it masked
        let same = if text {
            let strip = |b: &[u8], dir: &Path| String::from_utf8_lossy(b).replace(&*dir.to_string_lossy(), "<out>");
            strip(&bx, &a) == strip(&by, &b)
        } else {
            bx == by
        };
        compared += 1;
        if !same {
            differing.push(x.file_name().unwrap_or_default().to_string_lossy().into_owned());
        }
    }
    let kinds = ["ckpt", "cone", "ppm"];
    let artefacts = fa.iter().filter(|p| p.extension().is_some_and(|e| kinds.iter().any(|k| e == *k))).count();
    Ok((
        differing.is_empty() && artefacts > 0,
        if differing.is_empty() {
            format!("{compared} files identical across two runs, {artefacts} of them checkpoints, masks or grids")
        } else {
            format!("differing: {}", differing.join(", "))
        },
    ))
}
