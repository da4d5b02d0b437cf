use cones_core::scene::{
    build_dataset, build_prior_dataset, detect_class, detect_subject, make_subject, read_manifest, render_scene,
    write_manifest, Category, Vocabulary, BACKGROUNDS, PRESENCE_THRESHOLD,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CATEGORIES: [&str; 4] = ["cat", "pot", "glasses", "lake"];

#[test]
fn rendered_subjects_are_detected() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let cat = CATEGORIES[r.gen_range(0..CATEGORIES.len())];
        let spec = make_subject(cat, r.gen()).unwrap();
        let img = render_scene(&[spec.clone()], r.gen_range(0..BACKGROUNDS.len()), r.gen()).unwrap();
        let score = detect_subject(&img, &spec);
        assert!(score >= PRESENCE_THRESHOLD, "{spec:?} scored {score}");
        assert!(detect_class(&img, spec.category) >= PRESENCE_THRESHOLD);
    }
}

#[test]
fn separated_subjects_are_not_confused() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let mut checked = 0;
    while checked < 100 {
        let cat = CATEGORIES[r.gen_range(0..CATEGORIES.len())];
        let a = make_subject(cat, r.gen()).unwrap();
        let b = make_subject(cat, r.gen()).unwrap();
        if !a.separated_from(&b) {
            continue;
        }
        let img = render_scene(&[b.clone()], r.gen_range(0..BACKGROUNDS.len()), r.gen()).unwrap();
        let score = detect_subject(&img, &a);
        assert!(score < PRESENCE_THRESHOLD, "{a:?} found in a render of {b:?}: {score}");
        checked += 1;
    }
}

#[test]
fn empty_scene_has_no_subject() {
    for cat in CATEGORIES {
        let spec = make_subject(cat, 3).unwrap();
        for bg in 0..BACKGROUNDS.len() {
            let img = render_scene(&[], bg, 0).unwrap();
            assert!(detect_subject(&img, &spec) < PRESENCE_THRESHOLD);
            assert!(detect_class(&img, Category::parse(cat).unwrap()) < PRESENCE_THRESHOLD);
        }
    }
}

#[test]
fn datasets_roundtrip_through_manifests() {
    let vocab = Vocabulary::standard();
    let spec = make_subject("lake", 9).unwrap();
    let subject = build_dataset(&spec, 5, 4, &vocab).unwrap();
    let prior = build_prior_dataset("lake", 6, &spec, 4, &vocab).unwrap();
    assert_eq!(subject, build_dataset(&spec, 5, 4, &vocab).unwrap());
    assert!(subject.items.iter().all(|e| detect_subject(&e.image, &spec) >= PRESENCE_THRESHOLD));
    assert!(prior.items.iter().all(|e| !e.text.contains(&spec.identifier)));
    let dir = tempfile::tempdir().unwrap();
    let path = write_manifest(dir.path(), "subject", &subject.items).unwrap();
    let back = read_manifest(&path, &vocab).unwrap();
    assert_eq!(back.len(), subject.items.len());
    for (a, b) in back.iter().zip(&subject.items) {
        assert_eq!(a.prompt, b.prompt);
        assert_eq!(a.text, b.text);
        for (x, y) in a.image.data.iter().zip(&b.image.data) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}

#[test]
fn unknown_inputs_are_rejected() {
    let vocab = Vocabulary::standard();
    assert!(make_subject("teapot", 0).is_err());
    assert!(vocab.tokenize("a purple cat").is_err());
    assert!(build_dataset(&make_subject("cat", 0).unwrap(), 2, 0, &vocab).is_err());
    assert!(build_dataset(&make_subject("cat", 0).unwrap(), 9, 0, &vocab).is_err());
}
