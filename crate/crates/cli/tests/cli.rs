use std::path::Path;
use std::process::Command;

use cones_cli::config::{ExperimentConfig, SubjectConfig};
use cones_cli::exit;
use cones_cli::verify::{pearson, ranks, spearman, top_n};
use cones_core::denoiser::{ArchConfig, DenoiserParams};
use cones_core::mask::ConceptMask;
use cones_core::scene::{build_base_corpus, Vocabulary};

fn cones(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_cones"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn config_defaults_roundtrip_and_reject_unknown_keys() {
    let cfg = ExperimentConfig::default();
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
    let partial: ExperimentConfig = serde_json::from_str(r#"{"seed": 7, "search": {"k": 3}}"#).unwrap();
    assert_eq!(partial.seed, 7);
    assert_eq!(partial.search.k, 3);
    assert_eq!(partial.search.rho, cfg.search.rho);
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 7}"#).is_err());
}

#[test]
fn subjects_parse_and_resolve_identifiers() {
    let s = SubjectConfig::parse("pot:12:V3*").unwrap();
    assert_eq!((s.category.as_str(), s.seed, s.identifier.as_deref()), ("pot", 12, Some("V3*")));
    assert!(SubjectConfig::parse("pot").is_err());
    assert!(SubjectConfig::parse("pot:x").is_err());

    let mut cfg = ExperimentConfig::default();
    cfg.subjects = vec![SubjectConfig::parse("cat:1").unwrap(), SubjectConfig::parse("lake:2").unwrap()];
    let specs = cfg.subject_specs().unwrap();
    assert_eq!(specs[0].identifier, "V1*");
    assert_eq!(specs[1].identifier, "V2*");
    cfg.subjects[1].identifier = Some("V1*".into());
    assert!(cfg.validate().is_err());
    cfg.subjects[1].identifier = Some("V9*".into());
    assert!(cfg.validate().is_err());
    cfg.subjects[1] = SubjectConfig::parse("dog:1").unwrap();
    assert!(cfg.validate().is_err());
}

#[test]
fn rank_statistics_match_hand_values() {
    assert_eq!(ranks(&[3.0, 1.0, 2.0, 1.0]), vec![4.0, 1.5, 3.0, 1.5]);
    assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 8.0, 27.0, 64.0]) - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    assert_eq!(top_n(&[0.1, 0.5, 0.5, -1.0], 2), vec![false, true, true, false]);
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // validation: bad flags, bad values, missing inputs
    assert_eq!(cones(d, &["implant", "--bogus"]).0, exit::VALIDATION);
    assert_eq!(cones(d, &["implant", "--subject", "cat:1"]).0, exit::VALIDATION);
    assert_eq!(cones(d, &["compose", "--mask", "only-one.cone"]).0, exit::VALIDATION);
    assert_eq!(cones(d, &["train-base", "--preset", "huge"]).0, exit::VALIDATION);
    assert_eq!(cones(d, &["train-base", "--threads", "0"]).0, exit::VALIDATION);

    // I/O and format
    std::fs::write(d.join("bad.json"), "{ not json").unwrap();
    assert_eq!(cones(d, &["--config", "bad.json", "stats", "--mask", "x.cone"]).0, exit::IO_FORMAT);
    assert_eq!(cones(d, &["stats", "--mask", "missing.cone"]).0, exit::IO_FORMAT);
    std::fs::write(d.join("junk.cone"), b"CONE\x01").unwrap();
    assert_eq!(cones(d, &["stats", "--mask", "junk.cone"]).0, exit::IO_FORMAT);

    // numerical: a learning rate that diverges
    let (code, _, err) = cones(
        d,
        &["--out", "div", "train-base", "--preset", "micro", "--steps", "40", "--lr", "1e6", "--corpus-size", "16", "--batch-size", "2"],
    );
    assert_eq!(code, exit::NUMERICAL, "{err}");
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("cfg.json"),
        r#"{"out": "from_config", "preset": "micro", "schedule_steps": 10,
            "base": {"steps": 3, "batch_size": 2, "corpus_size": 8}}"#,
    )
    .unwrap();
    let (code, _, err) = cones(d, &["--config", "cfg.json", "--out", "from_flag", "train-base", "--steps", "2"]);
    assert_eq!(code, 0, "{err}");
    assert!(!d.join("from_config").exists());
    let log = std::fs::read_to_string(d.join("from_flag/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let model = DenoiserParams::load(&d.join("from_flag/base.ckpt")).unwrap();
    assert_eq!(model.arch.config, ArchConfig::preset("micro", Vocabulary::standard().len()).unwrap());
    assert_eq!(Vocabulary::load(&d.join("from_flag/vocab.txt")).unwrap(), Vocabulary::standard());
}

#[test]
fn pipeline_commands_write_their_artefacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("cfg.json"),
        r#"{"preset": "micro", "schedule_steps": 10,
            "base": {"steps": 4, "batch_size": 2, "corpus_size": 16},
            "data": {"subject_images": 3, "prior_images": 4},
            "search": {"k": 2, "threshold": {"mode": "quantile", "value": 0.01}},
            "sampling": {"n": 2, "columns": 2}}"#,
    )
    .unwrap();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", "cfg.json"];
        all.extend_from_slice(args);
        let (code, out, err) = cones(d, &all);
        assert_eq!(code, 0, "{args:?}: {err}");
        out
    };
    run(&["--out", "base", "train-base"]);
    let ck = "base/base.ckpt";
    run(&["--out", "imp", "implant", "--checkpoint", ck, "--subject", "cat:1", "--subject", "lake:2"]);
    for f in ["V1.cone", "V1.mscr", "V1_implant.json", "V1_finetune.json", "V1_with_mask.ppm", "V2_without_mask.ppm"] {
        assert!(d.join("imp").join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("imp/V1_finetune.json")).unwrap()).unwrap();
    for key in ["mode", "steps", "loss_before", "loss_after", "changed_param_count"] {
        assert!(report.get(key).is_some(), "{key}");
    }

    let out = run(&["--out", "comp", "compose", "--mask", "imp/V1.cone", "--mask", "imp/V2.cone"]);
    assert!(out.contains("intersection fraction"));
    let union = ConceptMask::load(&d.join("comp/composed.cone")).unwrap();
    let a = ConceptMask::load(&d.join("imp/V1.cone")).unwrap();
    assert!(a.is_subset_of(&union).unwrap());

    let out = run(&["--out", "st", "stats", "--mask", "imp/V1.cone", "--mask", "comp/composed.cone"]);
    assert!(out.contains("savings") && out.contains("composed.cone"));

    run(&["--out", "co", "cotune", "--checkpoint", ck, "--subject", "cat:1", "--subject", "lake:2", "--mask", "comp/composed.cone", "--mode", "float32", "--finetune-steps", "1"]);
    let refined = ConceptMask::load(&d.join("co/cotuned.cone")).unwrap();
    assert!(refined.is_subset_of(&union).unwrap());

    run(&["--out", "seq", "sequential", "--checkpoint", ck, "--subject", "cat:1", "--subject", "lake:2", "--mask-a", "imp/V1.cone"]);
    assert!(d.join("seq/sequential_report.json").exists());

    run(&["--out", "smp", "sample", "--checkpoint", ck, "--subject", "cat:1", "--mask", "imp/V1.cone"]);
    let alignment: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("smp/alignment.json")).unwrap()).unwrap();
    assert_eq!(alignment["prompt"], "a V1* cat");
    assert_eq!(alignment["samples"], 2);

    let corpus = build_base_corpus(1, 3, &Vocabulary::standard()).unwrap();
    corpus[0].image.save_ppm(&d.join("scene.ppm")).unwrap();
    run(&["--out", "att", "attention", "--checkpoint", ck, "--prompt", "a V1* cat", "--image", "scene.ppm", "--mask", "imp/V1.cone", "--t", "5"]);
    assert!(d.join("att/attention.ppm").exists() && d.join("att/attention_masked.ppm").exists());
}
