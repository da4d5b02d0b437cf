//! Concept-neuron identification: the first-order criterion, self-adaptive
//! sampling, naive and accelerated mask search, and score reporting.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::Reader;
use crate::denoiser::{DenoiserParams, KvEntry};
use crate::error::{Error, Result};
use crate::mask::ConceptMask;
use crate::rng;

/// A differentiable stochastic loss over the full parameter vector.
pub trait Objective: Sync {
    /// Loss at `theta` for the stochastic draw `draw`, and its gradient with
    /// respect to the flat addresses in `subset`.
    fn eval(&self, theta: &[f32], draw: u64, subset: &[usize]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, theta: &[f32], draw: u64) -> Result<f64> {
        Ok(self.eval(theta, draw, &[])?.0)
    }
}

/// `true` iff `θ · ∂ℒ/∂θ > 0`: slightly scaling θ down lowers the loss.
pub fn cn_criterion(theta: f64, grad: f64) -> Result<bool> {
    if theta.is_nan() || grad.is_nan() {
        return Err(Error::invalid("criterion input is NaN"));
    }
    Ok(theta * grad > 0.0)
}

/// One self-adaptive sampling step `θ(1 − ρθ∇ℒ)`.
pub fn sample_step(theta: f64, grad: f64, rho: f64) -> f64 {
    theta * (1.0 - rho * theta * grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum ThresholdMode {
    FixedTau(f64),
    /// Keep (about) this fraction of the search space as concept neurons.
    Quantile(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSearchConfig {
    pub rho: f64,
    pub threshold: ThresholdMode,
    pub k: usize,
    pub seed: u64,
}

pub const MAX_RHO: f64 = 0.1;

impl Default for MaskSearchConfig {
    fn default() -> Self {
        MaskSearchConfig {
            rho: 1e-2,
            threshold: ThresholdMode::Quantile(0.02),
            k: 10,
            seed: 0,
        }
    }
}

impl MaskSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= MAX_RHO) {
            return Err(Error::invalid(format!("ρ must lie in (0, {MAX_RHO}], got {}", self.rho)));
        }
        if self.k < 2 {
            return Err(Error::invalid(format!("K must be at least 2, got {}", self.k)));
        }
        match self.threshold {
            ThresholdMode::FixedTau(t) if !(t > 0.0) => Err(Error::invalid(format!("τ must be positive, got {t}"))),
            ThresholdMode::Quantile(q) if !(q > 0.0 && q < 1.0) => {
                Err(Error::invalid(format!("quantile must lie in (0, 1), got {q}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Naive,
    Accelerated,
}

/// Accumulated score `M_p` for every K-V address, in registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskScore {
    pub scores: Vec<f64>,
    pub provenance: Provenance,
}

/// Visited states: θ¹…θ^K (naive) or ξ¹…ξ^K (accelerated), restricted to the
/// search space.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScalingTrace {
    pub states: Vec<Vec<f64>>,
}

/// The model view a search runs over.
#[derive(Clone, Copy, Debug)]
pub struct SearchSpace<'a> {
    pub fingerprint: [u8; 32],
    pub kv: &'a [KvEntry],
    pub theta: &'a [f32],
}

impl<'a> From<&'a DenoiserParams> for SearchSpace<'a> {
    fn from(p: &'a DenoiserParams) -> Self {
        SearchSpace {
            fingerprint: p.fingerprint(),
            kv: p.kv_registry(),
            theta: &p.values,
        }
    }
}

impl SearchSpace<'_> {
    pub fn addresses(&self) -> Vec<usize> {
        self.kv.iter().flat_map(|e| e.offset..e.offset + e.len).collect()
    }
}

/// Seed of the stochastic draw used at step `k`, shared by both algorithms.
pub fn step_draw(seed: u64, k: usize) -> u64 {
    rng::derive(seed, 0x5c0e_0000 + k as u64)
}

fn check_finite(k: usize, loss: f64, g: &[f64]) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::numerical(k, format!("loss is {loss}")));
    }
    if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
        return Err(Error::numerical(k, format!("gradient entry is {bad}")));
    }
    Ok(())
}

/// Positions (in registry order) the search may touch.
fn searchable(space: &SearchSpace, allowed: Option<&ConceptMask>) -> Result<Vec<usize>> {
    let all = space.addresses();
    match allowed {
        None => Ok((0..all.len()).collect()),
        Some(m) => {
            if m.fingerprint != space.fingerprint {
                return Err(Error::FingerprintMismatch);
            }
            m.addresses(space.kv)?;
            Ok(m.flags().iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect())
        }
    }
}

/// Naive search: accumulate `θ^k ⊙ ∇ℒ(θ^k)` along the self-adaptive
/// trajectory for `k` states. Positions outside `allowed` stay frozen and
/// score 0.
pub fn naive_scores(
    space: &SearchSpace,
    objective: &dyn Objective,
    rho: f64,
    k: usize,
    seed: u64,
    allowed: Option<&ConceptMask>,
    record: bool,
) -> Result<(MaskScore, ScalingTrace)> {
    let all = space.addresses();
    let active = searchable(space, allowed)?;
    let subset: Vec<usize> = active.iter().map(|&i| all[i]).collect();
    let mut theta = space.theta.to_vec();
    let mut state: Vec<f64> = subset.iter().map(|&a| theta[a] as f64).collect();
    let mut acc = vec![0.0f64; subset.len()];
    let mut trace = ScalingTrace::default();
    for step in 0..k {
        if record {
            trace.states.push(state.clone());
        }
        for (&a, &v) in subset.iter().zip(&state) {
            theta[a] = v as f32;
        }
        let (loss, g) = objective.eval(&theta, step_draw(seed, step), &subset)?;
        check_finite(step, loss, &g)?;
        acc.par_iter_mut()
            .zip(state.par_iter_mut())
            .zip(g.par_iter())
            .for_each(|((m, th), &gi)| {
                *m += *th * gi;
                *th = sample_step(*th, gi, rho);
            });
    }
    let mut scores = vec![0.0; all.len()];
    for (&i, m) in active.iter().zip(acc) {
        scores[i] = m;
    }
    Ok((
        MaskScore {
            scores,
            provenance: Provenance::Naive,
        },
        trace,
    ))
}

/// Accelerated search: gradient descent with step `ρ` on per-address scales ξ
/// (starting at 1) of `ℒ(ξ ⊙ θ)`; the score is `(1 − ξ^K) / ρ`.
pub fn accel_scores(
    space: &SearchSpace,
    objective: &dyn Objective,
    rho: f64,
    k: usize,
    seed: u64,
    allowed: Option<&ConceptMask>,
    record: bool,
) -> Result<(MaskScore, ScalingTrace)> {
    let all = space.addresses();
    let active = searchable(space, allowed)?;
    let subset: Vec<usize> = active.iter().map(|&i| all[i]).collect();
    let base: Vec<f64> = subset.iter().map(|&a| space.theta[a] as f64).collect();
    let mut theta = space.theta.to_vec();
    let mut xi = vec![1.0f64; subset.len()];
    let mut trace = ScalingTrace::default();
    for step in 0..k {
        if record {
            trace.states.push(xi.clone());
        }
        for ((&a, &b), &x) in subset.iter().zip(&base).zip(&xi) {
            theta[a] = (x * b) as f32;
        }
        let (loss, g) = objective.eval(&theta, step_draw(seed, step), &subset)?;
        check_finite(step, loss, &g)?;
        xi.par_iter_mut()
            .zip(base.par_iter())
            .zip(g.par_iter())
            .for_each(|((x, &b), &gi)| *x -= rho * b * gi);
    }
    let mut scores = vec![0.0; all.len()];
    for (&i, x) in active.iter().zip(xi) {
        scores[i] = (1.0 - x) / rho;
    }
    Ok((
        MaskScore {
            scores,
            provenance: Provenance::Accelerated,
        },
        trace,
    ))
}

/// Resolves the threshold τ for `scores`. Quantile mode picks τ so that
/// about a fraction `q` of the considered scores lies strictly above it,
/// never going below 0, so only positive-score neurons can be selected.
pub fn resolve_tau(scores: &[f64], mode: ThresholdMode, considered: Option<&[usize]>) -> f64 {
    match mode {
        ThresholdMode::FixedTau(t) => t,
        ThresholdMode::Quantile(q) => {
            let mut v: Vec<f64> = match considered {
                Some(idx) => idx.iter().map(|&i| scores[i]).collect(),
                None => scores.to_vec(),
            };
            if v.is_empty() {
                return 0.0;
            }
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let keep = ((q * n as f64).round() as usize).min(n);
            if keep == 0 {
                return v[n - 1].max(0.0);
            }
            if keep == n {
                return 0.0;
            }
            v[n - keep - 1].max(0.0)
        }
    }
}

/// Concept-neuron flags `M_p > τ`.
pub fn select(scores: &[f64], tau: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > tau).collect()
}

fn finish(space: &SearchSpace, score: &MaskScore, mode: ThresholdMode, allowed: Option<&ConceptMask>) -> Result<ConceptMask> {
    let considered = allowed.map(|m| {
        m.flags().iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect::<Vec<_>>()
    });
    let tau = resolve_tau(&score.scores, mode, considered.as_deref());
    let mut flags = select(&score.scores, tau);
    if let Some(m) = allowed {
        flags.iter_mut().zip(m.flags()).for_each(|(f, a)| *f &= a);
    }
    ConceptMask::from_flags(space.fingerprint, space.kv, &flags)
}

/// Naive search with thresholding; returns the score vector and the mask.
pub fn mask_naive(space: &SearchSpace, objective: &dyn Objective, cfg: &MaskSearchConfig) -> Result<(MaskScore, ConceptMask)> {
    cfg.validate()?;
    let (score, _) = naive_scores(space, objective, cfg.rho, cfg.k, cfg.seed, None, false)?;
    let mask = finish(space, &score, cfg.threshold, None)?;
    Ok((score, mask))
}

/// Accelerated search with thresholding; returns the score vector and the mask.
pub fn mask_accel(space: &SearchSpace, objective: &dyn Objective, cfg: &MaskSearchConfig) -> Result<(MaskScore, ConceptMask)> {
    cfg.validate()?;
    let (score, _) = accel_scores(space, objective, cfg.rho, cfg.k, cfg.seed, None, false)?;
    let mask = finish(space, &score, cfg.threshold, None)?;
    Ok((score, mask))
}

/// A2 restricted to the concept neurons of `within`: every other parameter
/// is frozen, and the resulting mask is a subset of `within`. Quantile mode
/// is taken relative to the size of `within`.
pub fn mask_accel_within(
    space: &SearchSpace,
    objective: &dyn Objective,
    cfg: &MaskSearchConfig,
    within: &ConceptMask,
) -> Result<(MaskScore, ConceptMask)> {
    cfg.validate()?;
    let (score, _) = accel_scores(space, objective, cfg.rho, cfg.k, cfg.seed, Some(within), false)?;
    let mask = finish(space, &score, cfg.threshold, Some(within))?;
    Ok((score, mask))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// `(q, value)` pairs.
    pub quantiles: Vec<(f64, f64)>,
    /// Equal-width bins over `[min, max]`.
    pub histogram: Vec<usize>,
    pub tau: f64,
    pub above_tau: usize,
    pub per_layer: Vec<(String, usize)>,
}

pub const HISTOGRAM_BINS: usize = 20;

/// Histogram, quantiles, count above τ and per-layer breakdown of a score
/// vector laid out along `kv`.
pub fn score_report(score: &MaskScore, kv: &[KvEntry], tau: f64) -> Result<ScoreSummary> {
    let total: usize = kv.iter().map(|e| e.len).sum();
    if total != score.scores.len() {
        return Err(Error::invalid(format!("{} scores for {total} K-V parameters", score.scores.len())));
    }
    let s = &score.scores;
    let n = s.len();
    let mut sorted = s.clone();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = if n == 0 { (0.0, 0.0) } else { (sorted[0], sorted[n - 1]) };
    let mean = if n == 0 { 0.0 } else { s.iter().sum::<f64>() / n as f64 };
    let quantiles = [0.5, 0.9, 0.98, 0.99, 0.999]
        .iter()
        .map(|&q| {
            let v = if n == 0 { 0.0 } else { sorted[((q * (n - 1) as f64).round() as usize).min(n - 1)] };
            (q, v)
        })
        .collect();
    let mut histogram = vec![0usize; HISTOGRAM_BINS];
    let width = (max - min) / HISTOGRAM_BINS as f64;
    for &v in s {
        let b = if width > 0.0 { (((v - min) / width) as usize).min(HISTOGRAM_BINS - 1) } else { 0 };
        histogram[b] += 1;
    }
    let mut per_layer = Vec::with_capacity(kv.len());
    let mut start = 0;
    for e in kv {
        per_layer.push((e.name.clone(), s[start..start + e.len].iter().filter(|&&v| v > tau).count()));
        start += e.len;
    }
    Ok(ScoreSummary {
        count: n,
        min,
        max,
        mean,
        quantiles,
        histogram,
        tau,
        above_tau: s.iter().filter(|&&v| v > tau).count(),
        per_layer,
    })
}

pub const MSCR_MAGIC: [u8; 4] = *b"MSCR";
pub const MSCR_VERSION: u16 = 1;

pub fn encode_scores(score: &MaskScore, fingerprint: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(46 + 8 * score.scores.len());
    out.extend_from_slice(&MSCR_MAGIC);
    out.extend_from_slice(&MSCR_VERSION.to_le_bytes());
    out.extend_from_slice(fingerprint);
    out.extend_from_slice(&(score.scores.len() as u64).to_le_bytes());
    for v in &score.scores {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a score dump into `(fingerprint, scores)`.
pub fn decode_scores(buf: &[u8]) -> Result<([u8; 32], Vec<f64>)> {
    let mut r = Reader::new(buf);
    if r.array::<4>("magic")? != MSCR_MAGIC {
        return Err(Error::format("magic", "expected \"MSCR\""));
    }
    let version = r.u16("version")?;
    if version != MSCR_VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let fp = r.array::<32>("fingerprint")?;
    let n = r.count(8, "count")?;
    let scores = (0..n).map(|_| r.f64("scores")).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok((fp, scores))
}

pub fn save_scores(path: &Path, score: &MaskScore, fingerprint: &[u8; 32]) -> Result<()> {
    std::fs::write(path, encode_scores(score, fingerprint))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `ℒ(θ) = Σ_{a ∈ watched} θ_a²`, deterministic.
    struct Quadratic;

    impl Objective for Quadratic {
        fn eval(&self, theta: &[f32], _draw: u64, subset: &[usize]) -> Result<(f64, Vec<f64>)> {
            let l = theta.iter().map(|&v| (v as f64).powi(2)).sum();
            Ok((l, subset.iter().map(|&a| 2.0 * theta[a] as f64).collect()))
        }
    }

    struct Constant;

    impl Objective for Constant {
        fn eval(&self, _theta: &[f32], _draw: u64, subset: &[usize]) -> Result<(f64, Vec<f64>)> {
            Ok((3.0, vec![0.0; subset.len()]))
        }
    }

    fn scalar_space(theta: &[f32]) -> (Vec<KvEntry>, [u8; 32]) {
        (
            vec![KvEntry {
                name: "probe.to_k".into(),
                offset: 0,
                len: theta.len(),
            }],
            [7; 32],
        )
    }

    #[test]
    fn criterion_examples() {
        assert!(cn_criterion(2.0, 3.0).unwrap());
        assert!(!cn_criterion(0.5, -1.0).unwrap());
        assert!(!cn_criterion(0.0, 5.0).unwrap());
        assert!(cn_criterion(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn sampling_step_examples() {
        assert!((sample_step(2.0, 4.0, 0.01) - 1.84).abs() < 1e-12);
        assert_eq!(sample_step(1.3, 0.0, 0.01), 1.3);
        assert_eq!(sample_step(1.3, 5.0, 0.0), 1.3);
    }

    #[test]
    fn single_step_scores_on_quadratic_probe() {
        for (theta, expected) in [(2.0f32, 8.0), (1.0, 2.0)] {
            let th = [theta];
            let (kv, fp) = scalar_space(&th);
            let space = SearchSpace {
                fingerprint: fp,
                kv: &kv,
                theta: &th,
            };
            let (naive, _) = naive_scores(&space, &Quadratic, 0.01, 1, 0, None, false).unwrap();
            let (accel, trace) = accel_scores(&space, &Quadratic, 0.01, 1, 0, None, true).unwrap();
            assert!((naive.scores[0] - expected).abs() < 1e-9);
            assert!((accel.scores[0] - expected).abs() < 1e-4);
            assert_eq!(trace.states[0], vec![1.0]);
            let flags = select(&naive.scores, 5.0);
            assert_eq!(flags[0], expected > 5.0);
        }
    }

    #[test]
    fn accelerated_formula() {
        // ξ^K = 0.9 ⇒ M_p = 10 at ρ = 0.01
        assert!(((1.0f64 - 0.9) / 0.01 - 10.0).abs() < 1e-9);
    }

    #[test]
    fn constant_loss_gives_empty_mask() {
        let th = [0.5f32, -1.0, 2.0];
        let (kv, fp) = scalar_space(&th);
        let space = SearchSpace {
            fingerprint: fp,
            kv: &kv,
            theta: &th,
        };
        let cfg = MaskSearchConfig {
            threshold: ThresholdMode::FixedTau(1e-9),
            ..Default::default()
        };
        for (score, mask) in [mask_naive(&space, &Constant, &cfg).unwrap(), mask_accel(&space, &Constant, &cfg).unwrap()] {
            assert!(score.scores.iter().all(|&s| s == 0.0));
            assert!(mask.is_empty());
        }
    }

    #[test]
    fn config_validation() {
        let ok = MaskSearchConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            MaskSearchConfig { rho: 0.0, ..ok.clone() },
            MaskSearchConfig { rho: 0.2, ..ok.clone() },
            MaskSearchConfig { k: 1, ..ok.clone() },
            MaskSearchConfig { threshold: ThresholdMode::FixedTau(0.0), ..ok.clone() },
            MaskSearchConfig { threshold: ThresholdMode::Quantile(1.0), ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn quantile_threshold_hits_target_count() {
        let scores: Vec<f64> = (0..1000).map(|i| i as f64 / 10.0).collect();
        let tau = resolve_tau(&scores, ThresholdMode::Quantile(0.02), None);
        assert_eq!(select(&scores, tau).iter().filter(|&&f| f).count(), 20);
        let neg = vec![-1.0; 10];
        assert_eq!(resolve_tau(&neg, ThresholdMode::Quantile(0.5), None), 0.0);
    }

    #[test]
    fn report_counts() {
        let kv = vec![
            KvEntry {
                name: "a".into(),
                offset: 0,
                len: 2,
            },
            KvEntry {
                name: "b".into(),
                offset: 2,
                len: 1,
            },
        ];
        let s = MaskScore {
            scores: vec![1.0, 2.0, 3.0],
            provenance: Provenance::Naive,
        };
        let r = score_report(&s, &kv, 2.0).unwrap();
        assert_eq!(r.above_tau, 1);
        assert_eq!(r.per_layer.iter().map(|p| p.1).sum::<usize>(), 1);
        assert_eq!(r.histogram.iter().sum::<usize>(), 3);
        let zero = MaskScore {
            scores: vec![0.0; 3],
            provenance: Provenance::Naive,
        };
        assert_eq!(score_report(&zero, &kv, 0.5).unwrap().above_tau, 0);
    }

    #[test]
    fn score_dump_roundtrip() {
        let s = MaskScore {
            scores: vec![1.5, -2.0, 0.0],
            provenance: Provenance::Accelerated,
        };
        let bytes = encode_scores(&s, &[3; 32]);
        assert_eq!(&bytes[..4], b"MSCR");
        let (fp, back) = decode_scores(&bytes).unwrap();
        assert_eq!(fp, [3; 32]);
        assert_eq!(back, s.scores);
        assert!(decode_scores(&bytes[..bytes.len() - 1]).is_err());
    }
}
