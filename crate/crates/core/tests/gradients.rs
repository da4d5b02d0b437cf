use cones_core::denoiser::{self, make_schedule, ArchConfig, Batch, DenoiserParams, LossTerms};
use cones_core::implant::{concept_terms, multi_concept_loss, ConceptLossConfig, ConceptTerm};
use cones_core::scene::{build_dataset, build_prior_dataset, make_subject, Vocabulary};
use rand::{Rng, SeedableRng};

fn random_model(seed: u64) -> DenoiserParams {
    let vocab = Vocabulary::standard();
    let mut p = DenoiserParams::init(ArchConfig::preset("micro", vocab.len()).unwrap(), seed).unwrap();
    // move away from the symmetric initialisation (unit gains, zero biases)
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    for v in &mut p.values {
        *v += rng.gen_range(-0.2..0.2);
    }
    p
}

fn loss_terms(seed: u64) -> LossTerms {
    let vocab = Vocabulary::standard();
    let schedule = make_schedule(20).unwrap();
    let subject = make_subject("cat", seed).unwrap();
    let data = build_dataset(&subject, 3, seed, &vocab).unwrap();
    let a = Batch::sample(&data.items, 2, &schedule, seed).unwrap();
    let b = Batch::sample(&data.items, 1, &schedule, seed + 1).unwrap();
    LossTerms {
        terms: vec![(1.0, a), (0.7, b)],
    }
}

fn check(subset: &[usize], seed: u64) {
    check_terms(subset, seed, &loss_terms(seed));
}

fn check_terms(subset: &[usize], seed: u64, terms: &LossTerms) {
    let p = random_model(seed);
    let schedule = make_schedule(20).unwrap();
    let theta: Vec<f64> = p.values.iter().map(|&v| v as f64).collect();
    let (_, g) = denoiser::grad_f64(&p.arch, &theta, terms, &schedule, subset).unwrap();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for (i, &a) in subset.iter().enumerate() {
        let mut plus = theta.clone();
        plus[a] += h;
        let mut minus = theta.clone();
        minus[a] -= h;
        let lp = denoiser::grad_f64(&p.arch, &plus, terms, &schedule, &[]).unwrap().0;
        let lm = denoiser::grad_f64(&p.arch, &minus, terms, &schedule, &[]).unwrap().0;
        let fd = (lp - lm) / (2.0 * h);
        let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn kv_gradients_match_central_differences() {
    let p = random_model(1);
    let kv = p.arch.kv_addresses();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let subset: Vec<usize> = (0..100).map(|_| kv[rng.gen_range(0..kv.len())]).collect();
    check(&subset, 1);
}

#[test]
fn all_parameter_gradients_match_central_differences() {
    let p = random_model(3);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    // one address from every tensor, so every backward path is exercised
    let subset: Vec<usize> = p.arch.tensors.iter().map(|t| t.offset + rng.gen_range(0..t.len)).collect();
    check(&subset, 3);
}

#[test]
fn gradient_of_parameter_outside_loss_is_zero() {
    let p = random_model(5);
    let schedule = make_schedule(20).unwrap();
    let terms = loss_terms(5);
    // identifier V8* never appears in the batch prompts
    let vocab = Vocabulary::standard();
    let v8 = vocab.id("V8*").unwrap() as usize;
    let tok = p.arch.tensor("embed.token").unwrap();
    let e = tok.shape[1];
    let subset: Vec<usize> = (0..e).map(|j| tok.offset + v8 * e + j).collect();
    let (_, g) = denoiser::grad(&p, &terms, &schedule, &subset).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
    assert!(denoiser::grad(&p, &terms, &schedule, &[p.arch.total]).is_err());
}

#[test]
fn multi_concept_gradients_match_central_differences() {
    let vocab = Vocabulary::standard();
    let schedule = make_schedule(20).unwrap();
    let a = make_subject("cat", 4).unwrap();
    let b = make_subject("lake", 8).unwrap().with_identifier(2).unwrap();
    let (sa, sb) = (build_dataset(&a, 3, 1, &vocab).unwrap(), build_dataset(&b, 3, 2, &vocab).unwrap());
    let pa = build_prior_dataset("cat", 4, &a, 3, &vocab).unwrap();
    let pb = build_prior_dataset("lake", 4, &b, 4, &vocab).unwrap();
    let cfg = ConceptLossConfig {
        lambda: 0.5,
        subject_batch_size: 1,
        prior_batch_size: 1,
        seed: 11,
    };
    let terms = [
        ConceptTerm { subject: &sa, prior: &pa, cfg: &cfg },
        ConceptTerm { subject: &sb, prior: &pb, cfg: &cfg },
    ];
    let loss = concept_terms(&terms, &schedule, 0).unwrap();
    assert_eq!(loss.terms.len(), 4);
    let p = random_model(7);
    let direct = multi_concept_loss(&p, &terms, &schedule).unwrap();
    let via_terms = denoiser::weighted_loss(&p, &loss, &schedule).unwrap();
    assert!((direct - via_terms).abs() <= 1e-9 * direct.abs());

    let kv = p.arch.kv_addresses();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    let subset: Vec<usize> = (0..100).map(|_| kv[rng.gen_range(0..kv.len())]).collect();
    check_terms(&subset, 7, &loss);
}
