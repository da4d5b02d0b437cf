use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use cones_cli::commands;
use cones_cli::config::{Algorithm, ExperimentConfig, SubjectConfig};
use cones_cli::exit;
use cones_cli::pipeline::Env;
use cones_cli::verify;
use cones_core::denoiser::Optimizer;
use cones_core::implant::AccuracyMode;
use cones_core::scope::ThresholdMode;

/// Concept neurons in a tiny text-conditioned diffusion model.
///
/// Every flag has a key in the JSON config; flags win over the config.
#[derive(Parser)]
#[command(name = "cones", version)]
struct Cli {
    /// JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; all results are independent of this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model on the procedural corpus.
    TrainBase(TrainArgs),
    /// Find and shut the concept neurons of each configured subject.
    Implant(ImplantArgs),
    /// Union two to four masks.
    Compose(MaskArgs),
    /// Refine a composed mask for all subjects jointly.
    Cotune(CotuneArgs),
    /// Implant a second subject on top of a first subject's mask.
    Sequential(SequentialArgs),
    /// Sample a prompt and score subject presence.
    Sample(SampleArgs),
    /// Sparsity and storage of masks.
    Stats(MaskArgs),
    /// Cross-attention maps before and after shutting a mask.
    Attention(AttentionArgs),
    /// Run the acceptance checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Common {
    /// Base (or fine-tuned) checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Vocabulary file, one token per line.
    #[arg(long)]
    vocabulary: Option<PathBuf>,
    #[arg(long)]
    schedule_steps: Option<usize>,
}

#[derive(Args)]
struct SubjectArgs {
    /// `category:seed[:identifier]`, repeatable.
    #[arg(long = "subject")]
    subjects: Vec<String>,
    #[arg(long)]
    subject_images: Option<usize>,
    #[arg(long)]
    prior_images: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct SamplingArgs {
    /// Samples per evaluated prompt.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// binary, float32, float16 or quaternary.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    finetune_steps: Option<usize>,
    #[arg(long)]
    finetune_lr: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    corpus_size: Option<usize>,
    /// sgd or adam.
    #[arg(long)]
    optimizer: Option<String>,
}

#[derive(Args)]
struct ImplantArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    subjects: SubjectArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[command(flatten)]
    finetune: FinetuneArgs,
    /// naive or accelerated.
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    /// `quantile:F` or `tau:X`.
    #[arg(long)]
    threshold: Option<String>,
}

#[derive(Args)]
struct MaskArgs {
    /// Mask file, repeatable.
    #[arg(long = "mask")]
    masks: Vec<PathBuf>,
}

#[derive(Args)]
struct CotuneArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    subjects: SubjectArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[command(flatten)]
    finetune: FinetuneArgs,
    #[command(flatten)]
    masks: MaskArgs,
    #[arg(long)]
    k_per_subject: Option<usize>,
}

#[derive(Args)]
struct SequentialArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    subjects: SubjectArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[command(flatten)]
    finetune: FinetuneArgs,
    #[arg(long)]
    mask_a: Option<PathBuf>,
    #[arg(long)]
    retention_floor: Option<f64>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    subjects: SubjectArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[command(flatten)]
    masks: MaskArgs,
    #[arg(long)]
    prompt: Option<String>,
}

#[derive(Args)]
struct AttentionArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    masks: MaskArgs,
    #[arg(long)]
    prompt: Option<String>,
    /// P6 PPM input image.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    t: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Run only the listed criteria (1-12), repeatable.
    #[arg(long = "criterion")]
    criteria: Vec<usize>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

fn parse_serde<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| exit::Invalid(format!("unknown {what} \"{s}\"")).into())
}

fn parse_threshold(s: &str) -> Result<ThresholdMode> {
    let bad = || exit::Invalid(format!("threshold \"{s}\" is not quantile:F or tau:X"));
    let (kind, value) = s.split_once(':').ok_or_else(bad)?;
    let v: f64 = value.parse().map_err(|_| bad())?;
    match kind {
        "quantile" => Ok(ThresholdMode::Quantile(v)),
        "tau" => Ok(ThresholdMode::FixedTau(v)),
        _ => Err(bad().into()),
    }
}

impl Common {
    fn apply(self, cfg: &mut ExperimentConfig) {
        set_opt(&mut cfg.checkpoint, self.checkpoint);
        set_opt(&mut cfg.vocabulary, self.vocabulary);
        set(&mut cfg.schedule_steps, self.schedule_steps);
    }
}

impl SubjectArgs {
    fn apply(self, cfg: &mut ExperimentConfig) -> Result<()> {
        if !self.subjects.is_empty() {
            cfg.subjects = self.subjects.iter().map(|s| SubjectConfig::parse(s)).collect::<Result<_>>()?;
        }
        set(&mut cfg.data.subject_images, self.subject_images);
        set(&mut cfg.data.prior_images, self.prior_images);
        set(&mut cfg.loss.lambda, self.lambda);
        Ok(())
    }
}

impl SamplingArgs {
    fn apply(self, cfg: &mut ExperimentConfig) {
        set(&mut cfg.sampling.n, self.samples);
        set(&mut cfg.sampling.guidance, self.guidance);
    }
}

impl FinetuneArgs {
    fn apply(self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(m) = self.mode {
            cfg.finetune.mode = AccuracyMode::parse(&m).map_err(|e| exit::Invalid(e.to_string()))?;
        }
        set(&mut cfg.finetune.steps, self.finetune_steps);
        set(&mut cfg.finetune.lr, self.finetune_lr);
        Ok(())
    }
}

impl MaskArgs {
    fn apply(self, cfg: &mut ExperimentConfig) {
        if !self.masks.is_empty() {
            cfg.masks = self.masks;
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.out, cli.out);
    set_opt(&mut cfg.threads, cli.threads);

    match cli.command {
        Command::TrainBase(a) => {
            a.common.apply(&mut cfg);
            set(&mut cfg.preset, a.preset);
            set(&mut cfg.base.steps, a.steps);
            set(&mut cfg.base.lr, a.lr);
            set(&mut cfg.base.momentum, a.momentum);
            set(&mut cfg.base.batch_size, a.batch_size);
            set(&mut cfg.base.corpus_size, a.corpus_size);
            if let Some(o) = a.optimizer {
                cfg.base.optimizer = parse_serde::<Optimizer>("optimizer", &o)?;
            }
            let env = start(cfg)?;
            let r = commands::train_base(&env)?;
            println!(
                "trained {} steps, loss {:.3} -> {:.3}, checkpoint {}",
                r.steps,
                r.initial_loss.unwrap_or(f64::NAN),
                r.final_loss.unwrap_or(f64::NAN),
                r.checkpoint.display()
            );
        }
        Command::Implant(a) => {
            a.common.apply(&mut cfg);
            a.subjects.apply(&mut cfg)?;
            a.sampling.apply(&mut cfg);
            a.finetune.apply(&mut cfg)?;
            if let Some(s) = a.algorithm {
                cfg.search.algorithm = parse_serde::<Algorithm>("algorithm", &s)?;
            }
            set(&mut cfg.search.rho, a.rho);
            set(&mut cfg.search.k, a.k);
            if let Some(t) = a.threshold {
                cfg.search.threshold = parse_threshold(&t)?;
            }
            let env = start(cfg)?;
            for r in commands::implant(&env)? {
                println!(
                    "{} ({}): {} neurons ({:.3}%), loss {:.4} -> {:.4}, rate {:.2} -> {:.2}, mask {}",
                    r.identifier,
                    r.subject_id,
                    r.concept_count,
                    100.0 * r.sparsity,
                    r.loss_before,
                    r.loss_after,
                    r.rate_without_mask,
                    r.rate_with_mask,
                    r.mask.display()
                );
            }
        }
        Command::Compose(a) => {
            a.apply(&mut cfg);
            let env = start(cfg)?;
            let r = commands::compose(&env)?;
            println!("composed {} masks into {} neurons: {}", r.inputs.len(), r.stats.concept_count, r.output.display());
            for o in &r.overlaps {
                println!("  masks {} and {}: intersection fraction {:.4}", o.a, o.b, o.intersection_fraction);
            }
        }
        Command::Cotune(a) => {
            a.common.apply(&mut cfg);
            a.subjects.apply(&mut cfg)?;
            a.sampling.apply(&mut cfg);
            a.finetune.apply(&mut cfg)?;
            a.masks.apply(&mut cfg);
            set(&mut cfg.cotune.k_per_subject, a.k_per_subject);
            let env = start(cfg)?;
            let r = commands::cotune(&env)?;
            println!("refined {} -> {} neurons in {} steps", r.union_count, r.refined_count, r.steps);
            for (c, t) in r.concatenation.subjects.iter().zip(&r.cotuned.subjects) {
                println!("  {}: concatenation {:.2}, cotuned {:.2}", c.identifier, c.rate, t.rate);
            }
            println!("  mean: concatenation {:.2}, cotuned {:.2}", r.concatenation.mean_rate, r.cotuned.mean_rate);
        }
        Command::Sequential(a) => {
            a.common.apply(&mut cfg);
            a.subjects.apply(&mut cfg)?;
            a.sampling.apply(&mut cfg);
            a.finetune.apply(&mut cfg)?;
            set_opt(&mut cfg.mask_a, a.mask_a);
            set(&mut cfg.retention_floor, a.retention_floor);
            let env = start(cfg)?;
            let r = commands::sequential(&env)?;
            println!(
                "first subject rate {:.2} -> {:.2} ({}), second subject rate {:.2}",
                r.first.mean_rate,
                r.first_after.mean_rate,
                if r.retained { "retained" } else { "lost" },
                r.second.rate_with_mask
            );
        }
        Command::Sample(a) => {
            a.common.apply(&mut cfg);
            a.subjects.apply(&mut cfg)?;
            a.sampling.apply(&mut cfg);
            a.masks.apply(&mut cfg);
            set_opt(&mut cfg.prompt, a.prompt);
            let env = start(cfg)?;
            let r = commands::sample(&env)?;
            println!("\"{}\": {} samples", r.prompt, r.samples);
            for s in &r.subjects {
                println!("  {}: {:.2}", s.identifier, s.rate);
            }
        }
        Command::Stats(a) => {
            a.apply(&mut cfg);
            let env = start(cfg)?;
            print!("{}", commands::stats_table(&commands::stats(&env)?));
        }
        Command::Attention(a) => {
            a.common.apply(&mut cfg);
            a.masks.apply(&mut cfg);
            set_opt(&mut cfg.prompt, a.prompt);
            set_opt(&mut cfg.image, a.image);
            set(&mut cfg.t, a.t);
            let env = start(cfg)?;
            let r = commands::attention(&env)?;
            for g in &r.grids {
                println!("{}", g.display());
            }
        }
        Command::Verify(a) => {
            a.common.apply(&mut cfg);
            let env = start(cfg)?;
            let results = verify::run(&env, &a.criteria, |r| println!("{r}"))?;
            if results.iter().any(|r| !r.passed) {
                return Err(exit::Invalid("some acceptance criteria failed".into()).into());
            }
        }
    }
    Ok(())
}

fn start(cfg: ExperimentConfig) -> Result<Env> {
    if let Some(n) = cfg.threads {
        // a second call only fails if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Env::new(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::VALIDATION } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code(&e) as u8)
        }
    }
}
