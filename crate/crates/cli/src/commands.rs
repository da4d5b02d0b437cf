//! One function per subcommand. Each writes its artefacts under the output
//! directory and returns the JSON report it also saved.

use std::io::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use cones_core::denoiser::{attention_maps, noisify, DenoiserParams};
use cones_core::implant::{finetune_masked, AccuracyMode, ConceptLossConfig, FinetuneReport, REPORT_DRAW};
use cones_core::mask::{self, apply, concat_all, intersection_fraction, ConceptMask, MaskStats};
use cones_core::rng;
use cones_core::scene::{Image, SubjectSpec};
use cones_core::scope::{resolve_tau, save_scores, score_report, MaskSearchConfig, Objective, ScoreSummary};
use serde::Serialize;

use crate::config::{streams, Algorithm};
use crate::exit::Invalid;
use crate::pipeline::{
    self, all_subject_data, identifier_prompt, measure, objective, save_grid, stem, write_json, AlignmentReport, Env,
};

/// Training progress goes to stderr every this many steps.
const PROGRESS_EVERY: usize = 500;

/// Composition accepts this many masks at most.
pub const MAX_COMPOSED: usize = 4;

#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub initial_loss: Option<f64>,
    /// Mean loss over the last tenth of the run.
    pub final_loss: Option<f64>,
    pub parameters: usize,
    pub checkpoint: PathBuf,
    pub digest: String,
}

pub fn train_base(env: &Env) -> Result<TrainReport> {
    let mut log = Vec::with_capacity(env.cfg.base.steps);
    let model = pipeline::train_base(env, |step, loss| {
        log.push((step, loss));
        if (step + 1) % PROGRESS_EVERY == 0 {
            let recent = &log[log.len() - PROGRESS_EVERY..];
            eprintln!("step {} loss {:.3}", step + 1, recent.iter().map(|x| x.1).sum::<f64>() / PROGRESS_EVERY as f64);
        }
    })?;
    let ckpt = env.out_path("base.ckpt")?;
    model.save(&ckpt).with_context(|| format!("writing {}", ckpt.display()))?;
    env.vocab.save(&env.out_path("vocab.txt")?)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(env.out_path("train_log.csv")?)?);
    writeln!(f, "step,loss")?;
    for (s, l) in &log {
        writeln!(f, "{s},{l}")?;
    }
    f.flush()?;
    let tail = (log.len() / 10).max(1);
    let report = TrainReport {
        steps: log.len(),
        initial_loss: log.first().map(|x| x.1),
        final_loss: (!log.is_empty()).then(|| log[log.len() - tail..].iter().map(|x| x.1).sum::<f64>() / tail as f64),
        parameters: model.values.len(),
        checkpoint: ckpt,
        digest: hex(&model.digest()),
    };
    write_json(&env.out_path("train_report.json")?, &report)?;
    Ok(report)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct ImplantReport {
    pub identifier: String,
    pub subject_id: String,
    pub algorithm: Algorithm,
    pub concept_count: usize,
    pub sparsity: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub rate_without_mask: f64,
    pub rate_with_mask: f64,
    pub finetune: FinetuneReport,
    pub scores: ScoreSummary,
    pub mask: PathBuf,
}

/// Searches and applies concept neurons for one subject of the experiment.
pub fn implant_one(env: &Env, model: &DenoiserParams, data: &pipeline::SubjectData, index: usize) -> Result<(ImplantReport, DenoiserParams)> {
    let cfg = &env.cfg;
    let loss_cfg = [cfg.concept_loss(index)];
    let obj = objective(env, model, std::slice::from_ref(data), &loss_cfg)?;
    let search_cfg = cfg.search_config(index);
    let (score, found) = pipeline::search(cfg.search.algorithm, model, &obj, &search_cfg, None)?;
    let (tuned, ft) = finetune_masked(model, &found, &obj, cfg.finetune.mode, cfg.finetune.steps, cfg.finetune.lr)?;

    let name = stem(&data.spec);
    let mask_path = env.out_path(&format!("{name}.cone"))?;
    found.save(&mask_path)?;
    save_scores(&env.out_path(&format!("{name}.mscr"))?, &score, &model.fingerprint())?;
    if cfg.finetune.mode != AccuracyMode::Binary {
        tuned.save(&env.out_path(&format!("{name}.ckpt"))?)?;
    }

    let specs = std::slice::from_ref(&data.spec);
    let prompt = identifier_prompt(specs);
    let seed = rng::derive(cfg.seed, index as u64);
    let (before_imgs, before) = measure(env, model, &prompt, specs, seed)?;
    let (after_imgs, after) = measure(env, &tuned, &prompt, specs, seed)?;
    save_grid(env, &before_imgs, &format!("{name}_without_mask.ppm"))?;
    save_grid(env, &after_imgs, &format!("{name}_with_mask.ppm"))?;

    let tau = resolve_tau(&score.scores, search_cfg.threshold, None);
    let report = ImplantReport {
        identifier: data.spec.identifier.clone(),
        subject_id: data.spec.subject_id.clone(),
        algorithm: cfg.search.algorithm,
        concept_count: found.concept_count(),
        sparsity: mask::sparsity(&found, found.total_params()),
        loss_before: ft.loss_before,
        loss_after: ft.loss_after,
        rate_without_mask: before.mean_rate,
        rate_with_mask: after.mean_rate,
        finetune: ft,
        scores: score_report(&score, model.kv_registry(), tau)?,
        mask: mask_path,
    };
    write_json(&env.out_path(&format!("{name}_implant.json"))?, &report)?;
    write_json(&env.out_path(&format!("{name}_finetune.json"))?, &report.finetune)?;
    Ok((report, tuned))
}

pub fn implant(env: &Env) -> Result<Vec<ImplantReport>> {
    let model = env.load_model()?;
    let data = all_subject_data(env)?;
    data.iter()
        .enumerate()
        .map(|(i, d)| implant_one(env, &model, d, i).map(|(r, _)| r))
        .collect()
}

fn load_masks(paths: &[PathBuf]) -> Result<Vec<ConceptMask>> {
    paths
        .iter()
        .map(|p| ConceptMask::load(p).with_context(|| format!("loading mask {}", p.display())))
        .collect()
}

#[derive(Debug, Serialize)]
pub struct Overlap {
    pub a: usize,
    pub b: usize,
    pub intersection_fraction: f64,
}

#[derive(Debug, Serialize)]
pub struct ComposeReport {
    pub inputs: Vec<PathBuf>,
    pub output: PathBuf,
    pub stats: MaskStats,
    pub overlaps: Vec<Overlap>,
}

pub fn pairwise_overlaps(masks: &[ConceptMask]) -> Result<Vec<Overlap>> {
    let mut out = Vec::new();
    for a in 0..masks.len() {
        for b in a + 1..masks.len() {
            out.push(Overlap {
                a,
                b,
                intersection_fraction: intersection_fraction(&masks[a], &masks[b])?,
            });
        }
    }
    Ok(out)
}

pub fn compose(env: &Env) -> Result<ComposeReport> {
    let paths = &env.cfg.masks;
    if !(2..=MAX_COMPOSED).contains(&paths.len()) {
        return Err(Invalid(format!("compose takes 2 to {MAX_COMPOSED} masks, got {}", paths.len())).into());
    }
    let masks = load_masks(paths)?;
    let union = concat_all(&masks)?;
    let output = env.out_path("composed.cone")?;
    union.save(&output)?;
    let report = ComposeReport {
        inputs: paths.clone(),
        output,
        stats: mask::stats(&union),
        overlaps: pairwise_overlaps(&masks)?,
    };
    write_json(&env.out_path("compose_report.json")?, &report)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct CotuneReport {
    pub union_count: usize,
    pub refined_count: usize,
    pub steps: usize,
    pub concatenation: AlignmentReport,
    pub cotuned: AlignmentReport,
    pub finetune: FinetuneReport,
    pub mask: PathBuf,
    pub checkpoint: PathBuf,
}

/// Refines a union mask for all configured subjects jointly and returns the
/// refined mask with the resulting model.
pub fn cotune_model(
    env: &Env,
    model: &DenoiserParams,
    data: &[pipeline::SubjectData],
    union: &ConceptMask,
) -> Result<(ConceptMask, DenoiserParams, FinetuneReport)> {
    let cfg = &env.cfg;
    let loss_cfgs: Vec<ConceptLossConfig> = (0..data.len()).map(|i| cfg.concept_loss(i)).collect();
    let obj = objective(env, model, data, &loss_cfgs)?;
    let search_cfg = MaskSearchConfig {
        rho: cfg.cotune.rho,
        threshold: cfg.cotune.threshold,
        k: cfg.cotune.k_per_subject * data.len(),
        seed: rng::derive(cfg.derive(streams::SEARCH), 0xc0),
    };
    let (_, refined) = pipeline::search(Algorithm::Accelerated, model, &obj, &search_cfg, Some(union))?;
    let (tuned, ft) = finetune_masked(model, &refined, &obj, cfg.finetune.mode, cfg.finetune.steps, cfg.finetune.lr)?;
    Ok((refined, tuned, ft))
}

pub fn cotune(env: &Env) -> Result<CotuneReport> {
    let model = env.load_model()?;
    let masks = load_masks(&env.cfg.masks)?;
    if masks.is_empty() {
        return Err(Invalid("cotune needs the composed mask (--mask)".into()).into());
    }
    let union = concat_all(&masks)?;
    let data = all_subject_data(env)?;
    let specs: Vec<SubjectSpec> = data.iter().map(|d| d.spec.clone()).collect();
    let (refined, tuned, ft) = cotune_model(env, &model, &data, &union)?;

    let prompt = identifier_prompt(&specs);
    let seed = env.cfg.derive(0xc07);
    let (concat_imgs, concatenation) = measure(env, &apply(&model, &union)?, &prompt, &specs, seed)?;
    let (tuned_imgs, cotuned) = measure(env, &tuned, &prompt, &specs, seed)?;
    save_grid(env, &concat_imgs, "concatenation.ppm")?;
    save_grid(env, &tuned_imgs, "cotuned.ppm")?;

    let mask_path = env.out_path("cotuned.cone")?;
    refined.save(&mask_path)?;
    let ckpt = env.out_path("cotuned.ckpt")?;
    tuned.save(&ckpt)?;
    let report = CotuneReport {
        union_count: union.concept_count(),
        refined_count: refined.concept_count(),
        steps: env.cfg.cotune.k_per_subject * data.len(),
        concatenation,
        cotuned,
        finetune: ft,
        mask: mask_path,
        checkpoint: ckpt,
    };
    write_json(&env.out_path("cotune_report.json")?, &report)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct SequentialReport {
    pub first: AlignmentReport,
    pub first_after: AlignmentReport,
    pub second: ImplantReport,
    pub retained: bool,
}

/// Shuts the first subject's mask, implants the second subject (the last
/// configured one) on top, and reports how well the first is retained.
pub fn sequential(env: &Env) -> Result<SequentialReport> {
    let model = env.load_model()?;
    let data = all_subject_data(env)?;
    if data.len() != 2 {
        return Err(Invalid(format!("sequential takes exactly two subjects, got {}", data.len())).into());
    }
    let path = env
        .cfg
        .mask_a
        .as_ref()
        .ok_or_else(|| Invalid("sequential needs the first subject's mask (--mask-a)".into()))?;
    let mask_a = ConceptMask::load(path).with_context(|| format!("loading mask {}", path.display()))?;
    let shut_a = apply(&model, &mask_a)?;
    let first_spec = std::slice::from_ref(&data[0].spec);
    let prompt_a = identifier_prompt(first_spec);
    let seed = env.cfg.derive(0x5e9);
    let (_, first) = measure(env, &shut_a, &prompt_a, first_spec, seed)?;
    let (second, both) = implant_one(env, &shut_a, &data[1], 1)?;
    let (_, first_after) = measure(env, &both, &prompt_a, first_spec, seed)?;
    let report = SequentialReport {
        retained: first_after.mean_rate >= env.cfg.retention_floor,
        first,
        first_after,
        second,
    };
    write_json(&env.out_path("sequential_report.json")?, &report)?;
    Ok(report)
}

pub fn sample(env: &Env) -> Result<AlignmentReport> {
    let model = env.load_model()?;
    let masks = load_masks(&env.cfg.masks)?;
    let model = if masks.is_empty() { model } else { apply(&model, &concat_all(&masks)?)? };
    let specs = env.cfg.subject_specs()?;
    let prompt = match &env.cfg.prompt {
        Some(p) => p.clone(),
        None if !specs.is_empty() => identifier_prompt(&specs),
        None => return Err(Invalid("sample needs a prompt (--prompt) or subjects".into()).into()),
    };
    // only subjects whose identifier occurs in the prompt are scored
    let words: Vec<&str> = prompt.split_whitespace().collect();
    let scored: Vec<SubjectSpec> = specs.into_iter().filter(|s| words.contains(&s.identifier.as_str())).collect();
    let (images, report) = measure(env, &model, &prompt, &scored, env.cfg.seed)?;
    save_grid(env, &images, "samples.ppm")?;
    write_json(&env.out_path("alignment.json")?, &report)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct StatsRow {
    pub file: PathBuf,
    #[serde(flatten)]
    pub stats: MaskStats,
}

pub fn stats(env: &Env) -> Result<Vec<StatsRow>> {
    if env.cfg.masks.is_empty() {
        return Err(Invalid("stats needs at least one mask (--mask)".into()).into());
    }
    let masks = load_masks(&env.cfg.masks)?;
    let rows: Vec<StatsRow> = env
        .cfg
        .masks
        .iter()
        .zip(&masks)
        .map(|(p, m)| StatsRow {
            file: p.clone(),
            stats: mask::stats(m),
        })
        .collect();
    write_json(&env.out_path("stats.json")?, &rows)?;
    Ok(rows)
}

pub fn stats_table(rows: &[StatsRow]) -> String {
    let mut s = format!(
        "{:<32} {:>10} {:>9} {:>12} {:>12} {:>8}\n",
        "mask", "neurons", "sparsity", "encoded B", "dense B", "savings"
    );
    for r in rows {
        let name = r.file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        s += &format!(
            "{:<32} {:>10} {:>8.3}% {:>12} {:>12} {:>7.1}%\n",
            name,
            r.stats.concept_count,
            100.0 * r.stats.sparsity,
            r.stats.encoded_bytes,
            r.stats.dense_equivalent_bytes,
            100.0 * r.stats.savings
        );
    }
    s
}

#[derive(Debug, Serialize)]
pub struct AttentionReport {
    pub prompt: String,
    pub t: usize,
    pub grids: Vec<PathBuf>,
    /// Per token, the mean over layers of the largest map value.
    pub peak: Vec<f64>,
}

/// Renders every token's map of every layer, upsampled to the image size,
/// one row per layer and one column per token.
pub fn attention_grid(model: &DenoiserParams, x_t: &[f32], s: f64, tokens: &cones_core::scene::PromptTokens) -> Result<(Image, Vec<f64>)> {
    let set = attention_maps(model, x_t, s, tokens)?;
    let size = cones_core::scene::IMAGE_SIZE;
    let l = cones_core::scene::MAX_PROMPT_LEN;
    let mut tiles = Vec::with_capacity(set.layers.len() * l);
    let mut peak = vec![0.0; l];
    for layer in &set.layers {
        for (tok, m) in layer.maps.iter().enumerate() {
            let max = m.iter().cloned().fold(0.0f64, f64::max);
            peak[tok] += max / set.layers.len() as f64;
            let scale = size / layer.side;
            let mut data = vec![0.0f32; 3 * size * size];
            for y in 0..size {
                for x in 0..size {
                    let v = if max > 0.0 { (m[(y / scale) * layer.side + x / scale] / max) as f32 } else { 0.0 };
                    for c in 0..3 {
                        data[c * size * size + y * size + x] = v;
                    }
                }
            }
            tiles.push(Image::from_data(size, size, data)?);
        }
    }
    Ok((Image::grid(&tiles, l)?, peak))
}

pub fn attention(env: &Env) -> Result<AttentionReport> {
    let model = env.load_model()?;
    let prompt = env
        .cfg
        .prompt
        .clone()
        .ok_or_else(|| Invalid("attention needs a prompt (--prompt)".into()))?;
    let tokens = env.tokenize(&prompt)?;
    let image_path = env
        .cfg
        .image
        .as_ref()
        .ok_or_else(|| Invalid("attention needs an input image (--image)".into()))?;
    let image = Image::load_ppm(image_path).with_context(|| format!("loading {}", image_path.display()))?;
    let t = env.cfg.t;
    if t == 0 || t > env.schedule.steps {
        return Err(Invalid(format!("t must lie in 1..={}", env.schedule.steps)).into());
    }
    let mut noise_rng = rng::stream(env.cfg.seed, 0xa77);
    let eps: Vec<f32> = (0..image.data.len())
        .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut noise_rng))
        .collect();
    let x_t = noisify(&image.data, t, &eps, &env.schedule)?;
    let s = env.schedule.fraction(t);
    let (grid, peak) = attention_grid(&model, &x_t, s, &tokens)?;
    let mut grids = vec![env.out_path("attention.ppm")?];
    grid.upscale(2).save_ppm(&grids[0])?;
    let masks = load_masks(&env.cfg.masks)?;
    if !masks.is_empty() {
        let shut = apply(&model, &concat_all(&masks)?)?;
        let (after, _) = attention_grid(&shut, &x_t, s, &tokens)?;
        let p = env.out_path("attention_masked.ppm")?;
        after.upscale(2).save_ppm(&p)?;
        grids.push(p);
    }
    let report = AttentionReport { prompt, t, grids, peak };
    write_json(&env.out_path("attention_report.json")?, &report)?;
    Ok(report)
}

/// Loss of `model` under the implanting objective of configured subject
/// `index`, evaluated on the reporting draw.
pub fn concept_loss_value(env: &Env, model: &DenoiserParams, data: &pipeline::SubjectData, index: usize) -> Result<f64> {
    let loss_cfg = [env.cfg.concept_loss(index)];
    let obj = objective(env, model, std::slice::from_ref(data), &loss_cfg)?;
    Ok(obj.value(&model.values, REPORT_DRAW)?)
}
