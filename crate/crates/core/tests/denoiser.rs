use cones_core::denoiser::{
    attention_maps, diffusion_loss, make_schedule, sample, train_base, ArchConfig, Batch, DenoiserParams, Predictor,
    TrainConfig,
};
use cones_core::scene::{build_base_corpus, PromptTokens, Vocabulary};

fn micro(seed: u64) -> (DenoiserParams, Vocabulary) {
    let vocab = Vocabulary::standard();
    let p = DenoiserParams::init(ArchConfig::preset("micro", vocab.len()).unwrap(), seed).unwrap();
    (p, vocab)
}

#[test]
fn unguided_sampling_ignores_the_prompt() {
    let (p, vocab) = micro(1);
    let sched = make_schedule(12).unwrap();
    let a = sample(&p, &vocab.tokenize("a cat").unwrap(), &sched, 0.0, 5).unwrap();
    let b = sample(&p, &vocab.tokenize("a striped pot on snow").unwrap(), &sched, 0.0, 5).unwrap();
    assert_eq!(a, b);
    let c = sample(&p, &vocab.tokenize("a cat").unwrap(), &sched, 3.0, 5).unwrap();
    assert_eq!(c, sample(&p, &vocab.tokenize("a cat").unwrap(), &sched, 3.0, 5).unwrap());
    assert_ne!(c, sample(&p, &vocab.tokenize("a cat").unwrap(), &sched, 3.0, 6).unwrap());
    assert!(c.data.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(sample(&p, &PromptTokens::null(), &sched, -1.0, 0).is_err());
}

#[test]
fn prediction_is_deterministic_and_per_item() {
    let (p, vocab) = micro(2);
    let sched = make_schedule(20).unwrap();
    let corpus = build_base_corpus(8, 3, &vocab).unwrap();
    let batch = Batch::sample(&corpus, 5, &sched, 4).unwrap();
    let mut rev = batch.clone();
    rev.items.reverse();
    let a = diffusion_loss(&p, &batch, &sched).unwrap();
    let b = diffusion_loss(&p, &rev, &sched).unwrap();
    assert!((a - b).abs() <= 1e-12 * a.abs());
    let it = &batch.items[1];
    assert_eq!(p.predict(&it.x, 0.3, &it.tokens), p.predict(&it.x, 0.3, &it.tokens));
    assert!(diffusion_loss(&p, &Batch::default(), &sched).is_err());
}

#[test]
fn doubling_omega_doubles_the_loss() {
    let (p, vocab) = micro(3);
    let sched = make_schedule(20).unwrap();
    let mut heavy = sched.clone();
    heavy.omega.iter_mut().for_each(|w| *w *= 2.0);
    let corpus = build_base_corpus(4, 1, &vocab).unwrap();
    let batch = Batch::sample(&corpus, 3, &sched, 0).unwrap();
    let a = diffusion_loss(&p, &batch, &sched).unwrap();
    let b = diffusion_loss(&p, &batch, &heavy).unwrap();
    assert!(a > 0.0);
    assert!((b - 2.0 * a).abs() <= 1e-12 * a);
}

#[test]
fn attention_maps_are_normalised() {
    let (p, vocab) = micro(4);
    let x: Vec<f32> = (0..3072).map(|i| ((i * 37) % 101) as f32 / 101.0).collect();
    let set = attention_maps(&p, &x, 0.4, &vocab.tokenize("a dotted lake on dusk").unwrap()).unwrap();
    assert_eq!(set.layers.len(), 5);
    for l in &set.layers {
        assert_eq!(l.maps.len(), 12);
        for m in &l.maps {
            assert_eq!(m.len(), l.side * l.side);
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    assert!(attention_maps(&p, &x[1..], 0.4, &PromptTokens::null()).is_err());
}

#[test]
fn zero_queries_give_uniform_maps() {
    let (p, vocab) = micro(5);
    let mut values = p.values.clone();
    for stage in ["down1", "down2", "mid", "up2", "up1"] {
        for part in ["weight", "bias"] {
            if let Some(t) = p.arch.tensor(&format!("{stage}.attn.to_q.{part}")) {
                values[t.offset..t.offset + t.len].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    let q = p.with_values(values).unwrap();
    let x = vec![0.3f32; 3072];
    let set = attention_maps(&q, &x, 0.9, &vocab.tokenize("a cat").unwrap()).unwrap();
    for l in &set.layers {
        let u = 1.0 / (l.side * l.side) as f64;
        for m in &l.maps {
            assert!(m.iter().all(|v| (v - u).abs() < 1e-12));
        }
    }
}

#[test]
fn training_is_deterministic_and_lowers_the_loss() {
    let (p, vocab) = micro(6);
    let sched = make_schedule(20).unwrap();
    let corpus = build_base_corpus(64, 2, &vocab).unwrap();
    let zero = TrainConfig {
        steps: 0,
        ..Default::default()
    };
    assert_eq!(train_base(p.clone(), &corpus, &sched, &zero, |_, _| {}).unwrap(), p);

    let cfg = TrainConfig {
        steps: 60,
        lr: 2e-3,
        batch_size: 8,
        seed: 9,
        ..Default::default()
    };
    let mut log = Vec::new();
    let a = train_base(p.clone(), &corpus, &sched, &cfg, |s, l| log.push((s, l))).unwrap();
    let b = train_base(p.clone(), &corpus, &sched, &cfg, |_, _| {}).unwrap();
    assert_eq!(a.digest(), b.digest());
    assert_eq!(log.len(), 60);
    assert!(log.windows(2).all(|w| w[1].0 == w[0].0 + 1));

    let held_out = Batch::sample(&build_base_corpus(64, 77, &vocab).unwrap(), 32, &sched, 123).unwrap();
    let before = diffusion_loss(&p, &held_out, &sched).unwrap();
    let after = diffusion_loss(&a, &held_out, &sched).unwrap();
    assert!(after < before, "{after} ≥ {before}");
}

#[test]
fn divergence_is_reported_with_the_step() {
    let (p, vocab) = micro(7);
    let sched = make_schedule(20).unwrap();
    let corpus = build_base_corpus(16, 2, &vocab).unwrap();
    let cfg = TrainConfig {
        steps: 50,
        lr: 50.0,
        batch_size: 4,
        clip: 0.0,
        ..Default::default()
    };
    match train_base(p, &corpus, &sched, &cfg, |_, _| {}) {
        Err(cones_core::Error::Numerical { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

/// Exact posterior mean `E[x | x_t]` for data spread uniformly over a few
/// fixed images.
struct Mixture {
    images: Vec<Vec<f32>>,
    schedule: cones_core::denoiser::NoiseSchedule,
}

impl Predictor for Mixture {
    fn predict(&self, x_t: &[f32], s: f64, _tokens: &PromptTokens) -> Vec<f32> {
        let t = (s * self.schedule.steps as f64).round() as usize;
        let (a, sg) = (self.schedule.alpha[t], self.schedule.sigma[t]);
        let logits: Vec<f64> = self
            .images
            .iter()
            .map(|im| {
                -im.iter().zip(x_t).map(|(&x, &y)| (y as f64 - a * x as f64).powi(2)).sum::<f64>() / (2.0 * sg * sg)
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        (0..x_t.len())
            .map(|i| (self.images.iter().zip(&w).map(|(im, wk)| im[i] as f64 * wk).sum::<f64>() / z) as f32)
            .collect()
    }
}

#[test]
fn sampling_with_the_exact_denoiser_recovers_a_data_point() {
    let schedule = make_schedule(50).unwrap();
    let images: Vec<Vec<f32>> = [0.1f32, 0.4, 0.7, 0.9]
        .iter()
        .enumerate()
        .map(|(k, &v)| (0..3072).map(|i| if (i / 32 + k) % 3 == 0 { v } else { 1.0 - v }).collect())
        .collect();
    let model = Mixture { images: images.clone(), schedule: schedule.clone() };
    for seed in 0..6 {
        let img = sample(&model, &PromptTokens::null(), &schedule, 1.0, seed).unwrap();
        let nearest = images
            .iter()
            .map(|im| im.iter().zip(&img.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max))
            .fold(f32::INFINITY, f32::min);
        assert!(nearest < 1e-3, "seed {seed}: {nearest}");
    }
}
