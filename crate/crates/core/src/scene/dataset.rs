use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{
    detect_subject, render_scene, subject_from_seed, Category, Image, PromptTokens, SubjectSpec,
    Vocabulary, BACKGROUNDS, MAX_PROMPT_LEN, MAX_SCENE_SUBJECTS, PRESENCE_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::rng;

pub const MIN_SUBJECT_IMAGES: usize = 3;
pub const MAX_SUBJECT_IMAGES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: Image,
    pub prompt: PromptTokens,
    pub text: String,
}

/// Few-shot images of one subject, prompted as `a V* <category> on <background>`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectDataset {
    pub subject: SubjectSpec,
    pub items: Vec<Example>,
}

/// Same-category pairs showing other subject instances.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorDataset {
    pub category: Category,
    pub items: Vec<Example>,
}

pub fn build_dataset(
    subject: &SubjectSpec,
    n_images: usize,
    context_seed: u64,
    vocab: &Vocabulary,
) -> Result<SubjectDataset> {
    if !(MIN_SUBJECT_IMAGES..=MAX_SUBJECT_IMAGES).contains(&n_images) {
        return Err(Error::invalid(format!(
            "subject dataset needs {MIN_SUBJECT_IMAGES}..={MAX_SUBJECT_IMAGES} images, got {n_images}"
        )));
    }
    let mut rng = rng::stream(context_seed, 0xda7a);
    let bg_offset = rng.gen_range(0..BACKGROUNDS.len());
    let items = (0..n_images)
        .map(|i| {
            let bg = (bg_offset + i) % BACKGROUNDS.len();
            let pose = rng::derive(context_seed, 1000 + i as u64);
            let image = render_scene(std::slice::from_ref(subject), bg, pose)?;
            let text = format!(
                "a {} {} on {}",
                subject.identifier,
                subject.category.name(),
                BACKGROUNDS[bg].0
            );
            let prompt = vocab.tokenize(&text)?;
            Ok(Example { image, prompt, text })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SubjectDataset {
        subject: subject.clone(),
        items,
    })
}

/// `n` images of other `category` subjects, none of which the oracle
/// confuses with `exclude`.
pub fn build_prior_dataset(
    category: &str,
    n: usize,
    exclude: &SubjectSpec,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<PriorDataset> {
    let category = Category::parse(category)?;
    if n == 0 {
        return Err(Error::invalid("prior dataset needs at least one item"));
    }
    let mut rng = rng::stream(seed, 0x9e10);
    let mut items = Vec::with_capacity(n);
    while items.len() < n {
        let spec = subject_from_seed(category, rng.gen());
        let bg = rng.gen_range(0..BACKGROUNDS.len());
        let image = render_scene(std::slice::from_ref(&spec), bg, rng.gen())?;
        if detect_subject(&image, exclude) >= PRESENCE_THRESHOLD {
            continue;
        }
        let text = format!("a {} on {}", category.name(), BACKGROUNDS[bg].0);
        let prompt = vocab.tokenize(&text)?;
        items.push(Example { image, prompt, text });
    }
    Ok(PriorDataset { category, items })
}

/// Share of base-corpus scenes that hold two to four subjects.
const MULTI_SUBJECT_SHARE: f64 = 0.3;

fn attribute_words(spec: &SubjectSpec, rng: &mut rng::Rng, p: f64) -> Vec<String> {
    let mut words = Vec::new();
    if rng.gen_bool(p) {
        words.push(spec.color_word());
    }
    if rng.gen_bool(p) {
        words.push(spec.texture.name().to_string());
    }
    if rng.gen_bool(p) {
        words.push(spec.family.name().to_string());
    }
    words
}

/// Generic text-image pairs for base training: random subjects of every
/// category, described by class, optional attributes (colour, texture,
/// shape) and background. Identifier tokens never occur.
pub fn build_base_corpus(n: usize, seed: u64, vocab: &Vocabulary) -> Result<Vec<Example>> {
    let mut rng = rng::stream(seed, 0xba5e);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let bg = rng.gen_range(0..BACKGROUNDS.len());
        let multi = rng.gen_bool(MULTI_SUBJECT_SHARE);
        let count = if multi { rng.gen_range(2..=MAX_SCENE_SUBJECTS) } else { 1 };
        let mut cats = Category::ALL.to_vec();
        let mut specs = Vec::with_capacity(count);
        for _ in 0..count {
            let c = cats.swap_remove(rng.gen_range(0..cats.len()));
            specs.push(subject_from_seed(c, rng.gen()));
        }
        let mut words: Vec<String> = Vec::new();
        for spec in &specs {
            words.push("a".into());
            if multi {
                if rng.gen_bool(0.5) {
                    let mut attrs = attribute_words(spec, &mut rng, 0.5);
                    attrs.truncate(1);
                    words.extend(attrs);
                }
            } else if rng.gen_bool(0.75) {
                words.extend(attribute_words(spec, &mut rng, 0.7));
            }
            words.push(spec.category.name().into());
        }
        if words.len() + 2 <= MAX_PROMPT_LEN && rng.gen_bool(0.5) {
            words.push("on".into());
            words.push(BACKGROUNDS[bg].0.into());
        }
        let text = words.join(" ");
        let prompt = vocab.tokenize(&text)?;
        let image = render_scene(&specs, bg, rng.gen())?;
        out.push(Example { image, prompt, text });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    image: String,
    prompt: String,
}

/// Writes `<prefix>_NNN.ppm` images and a JSON-lines manifest into `dir`.
pub fn write_manifest(dir: &Path, prefix: &str, items: &[Example]) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let manifest = dir.join(format!("{prefix}.jsonl"));
    let mut out = std::io::BufWriter::new(std::fs::File::create(&manifest)?);
    for (i, ex) in items.iter().enumerate() {
        let name = format!("{prefix}_{i:03}.ppm");
        ex.image.save_ppm(&dir.join(&name))?;
        let rec = ManifestRecord {
            image: name,
            prompt: ex.text.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    out.flush()?;
    Ok(manifest)
}

/// Reads a manifest; image paths are relative to the manifest's directory.
pub fn read_manifest(path: &Path, vocab: &Vocabulary) -> Result<Vec<Example>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)?;
        let image = Image::load_ppm(&base.join(&rec.image))?;
        let prompt = vocab.tokenize(&rec.prompt)?;
        out.push(Example {
            image,
            prompt,
            text: rec.prompt,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::make_subject;

    #[test]
    fn subject_dataset_is_oracle_positive_and_deterministic() {
        let v = Vocabulary::standard();
        let s = make_subject("cat", 0).unwrap();
        let d = build_dataset(&s, 4, 17, &v).unwrap();
        assert_eq!(d.items.len(), 4);
        for ex in &d.items {
            assert!(detect_subject(&ex.image, &s) >= PRESENCE_THRESHOLD);
            assert!(ex.text.starts_with("a V1* cat"));
        }
        assert_eq!(d, build_dataset(&s, 4, 17, &v).unwrap());
        let distinct: std::collections::HashSet<_> =
            d.items.iter().map(|e| format!("{:?}", e.image.data)).collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn subject_dataset_size_bounds() {
        let v = Vocabulary::standard();
        let s = make_subject("cat", 0).unwrap();
        assert!(build_dataset(&s, 2, 0, &v).is_err());
        assert!(build_dataset(&s, 9, 0, &v).is_err());
    }

    #[test]
    fn prior_dataset_excludes_target() {
        let v = Vocabulary::standard();
        let s = make_subject("cat", 0).unwrap();
        let p = build_prior_dataset("cat", 16, &s, 3, &v).unwrap();
        assert_eq!(p.items.len(), 16);
        for ex in &p.items {
            assert!(detect_subject(&ex.image, &s) < PRESENCE_THRESHOLD);
            assert!(ex.text.starts_with("a cat"));
        }
        assert_eq!(build_prior_dataset("cat", 1, &s, 3, &v).unwrap().items.len(), 1);
        let pots = build_prior_dataset("pot", 8, &s, 3, &v).unwrap();
        assert_eq!(pots.category, Category::Pot);
        assert_eq!(pots.items.len(), 8);
    }

    #[test]
    fn base_corpus_is_deterministic_and_identifier_free() {
        let v = Vocabulary::standard();
        let c = build_base_corpus(64, 5, &v).unwrap();
        assert_eq!(c.len(), 64);
        assert_eq!(c, build_base_corpus(64, 5, &v).unwrap());
        for ex in &c {
            assert!(ex.prompt.ids().iter().all(|&id| !v.is_identifier(id)));
        }
        assert!(c.iter().any(|e| e.text.matches(" a ").count() >= 1));
    }

    #[test]
    fn manifest_roundtrip() {
        let v = Vocabulary::standard();
        let s = make_subject("lake", 2).unwrap();
        let d = build_dataset(&s, 3, 1, &v).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), "subject", &d.items).unwrap();
        let back = read_manifest(&path, &v).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in d.items.iter().zip(&back) {
            assert_eq!(a.prompt, b.prompt);
            assert!(detect_subject(&b.image, &s) >= PRESENCE_THRESHOLD);
        }
        let first = std::fs::read_to_string(&path).unwrap();
        assert!(first.starts_with("{\"image\":\"subject_000.ppm\",\"prompt\":\"a V1* lake on "));
    }
}
