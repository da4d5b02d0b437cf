//! Procedural subjects, scenes, prompts and the oracle detector that stands
//! in for learned image-alignment metrics.

mod dataset;
mod detect;
mod image;
mod render;
mod vocab;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    build_base_corpus, build_dataset, build_prior_dataset, read_manifest, write_manifest, Example, PriorDataset,
    SubjectDataset, MAX_SUBJECT_IMAGES, MIN_SUBJECT_IMAGES,
};
pub use detect::{detect_class, detect_subject, presence_rate};
pub use image::Image;
pub use render::{glyph_mask, render_scene, subject_template, MAX_SCENE_SUBJECTS};
pub use vocab::{PromptTokens, Vocabulary, MAX_PROMPT_LEN, NULL_TOKEN};

/// Side length of every generated image.
pub const IMAGE_SIZE: usize = 32;
/// Side length of a subject glyph.
pub const GLYPH_SIZE: usize = 12;
/// Detector score at or above which a subject counts as present.
pub const PRESENCE_THRESHOLD: f32 = 0.6;
/// Number of reserved identifier tokens `V1*` .. `V8*`.
pub const IDENTIFIER_SLOTS: u8 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Cat,
    Pot,
    Glasses,
    Lake,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Cat, Category::Pot, Category::Glasses, Category::Lake];

    pub fn name(self) -> &'static str {
        match self {
            Category::Cat => "cat",
            Category::Pot => "pot",
            Category::Glasses => "glasses",
            Category::Lake => "lake",
        }
    }

    pub fn parse(s: &str) -> Result<Category> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownCategory(s.to_string()))
    }

    pub fn families(self) -> [ShapeFamily; 2] {
        use ShapeFamily::*;
        match self {
            Category::Cat => [Triangle, Cross],
            Category::Pot => [Square, Ring],
            Category::Glasses => [TwinDots, Bar],
            Category::Lake => [Diamond, Chevron],
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Triangle,
    Cross,
    Square,
    Ring,
    TwinDots,
    Bar,
    Diamond,
    Chevron,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 8] = [
        ShapeFamily::Triangle,
        ShapeFamily::Cross,
        ShapeFamily::Square,
        ShapeFamily::Ring,
        ShapeFamily::TwinDots,
        ShapeFamily::Bar,
        ShapeFamily::Diamond,
        ShapeFamily::Chevron,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Cross => "cross",
            ShapeFamily::Square => "square",
            ShapeFamily::Ring => "ring",
            ShapeFamily::TwinDots => "twindots",
            ShapeFamily::Bar => "bar",
            ShapeFamily::Diamond => "diamond",
            ShapeFamily::Chevron => "chevron",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Solid,
    Striped,
    Dotted,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Solid, Texture::Striped, Texture::Dotted];

    pub fn name(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::Striped => "striped",
            Texture::Dotted => "dotted",
        }
    }
}

/// Channel levels of the subject palette. Distinct palette colours differ by
/// at least 1/3 in some channel.
pub const PALETTE_LEVELS: [f32; 3] = [1.0 / 12.0, 5.0 / 12.0, 9.0 / 12.0];

/// The 24 non-grey colours of the 3x3x3 level grid, with their vocabulary words.
pub fn palette() -> Vec<([f32; 3], String)> {
    let mut out = Vec::with_capacity(24);
    for r in 0..3 {
        for g in 0..3 {
            for b in 0..3 {
                if r == g && g == b {
                    continue;
                }
                out.push((
                    [PALETTE_LEVELS[r], PALETTE_LEVELS[g], PALETTE_LEVELS[b]],
                    format!("rgb{r}{g}{b}"),
                ));
            }
        }
    }
    out
}

/// Second tone used by striped and dotted textures: each channel shifted by 1/2.
pub fn secondary_tone(rgb: [f32; 3]) -> [f32; 3] {
    rgb.map(|v| if v < 0.5 { v + 0.5 } else { v - 0.5 })
}

/// Backgrounds: (context word, colour).
pub const BACKGROUNDS: [(&str, [f32; 3]); 4] = [
    ("plain", [0.50, 0.50, 0.50]),
    ("night", [0.12, 0.12, 0.18]),
    ("snow", [0.92, 0.92, 0.95]),
    ("dusk", [0.35, 0.30, 0.40]),
];

/// Number of distinct subjects a category can produce.
pub const SUBJECTS_PER_CATEGORY: u64 = 2 * 24 * 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub subject_id: String,
    pub category: Category,
    pub family: ShapeFamily,
    pub size: usize,
    pub color: [f32; 3],
    pub texture: Texture,
    pub identifier: String,
}

/// Deterministically generates a subject of `category` from `seed`.
///
/// Seeds are mapped through a bijection of `Z_144` onto (family, colour,
/// texture) combinations, so seeds that differ modulo 144 always give
/// distinct subjects. The identifier defaults to `V1*`.
pub fn make_subject(category: &str, seed: u64) -> Result<SubjectSpec> {
    let category = Category::parse(category)?;
    Ok(subject_from_seed(category, seed))
}

pub(crate) fn subject_from_seed(category: Category, seed: u64) -> SubjectSpec {
    let n = SUBJECTS_PER_CATEGORY;
    // 89 is coprime with 144, so this is a permutation of the combo space.
    let idx = ((seed % n) * 89 + category.index() * 37) % n;
    let family = category.families()[(idx / 72) as usize];
    let colors = palette();
    let color = colors[((idx / 3) % 24) as usize].0;
    let texture = Texture::ALL[(idx % 3) as usize];
    SubjectSpec {
        subject_id: format!("{}-{}", category.name(), seed),
        category,
        family,
        size: GLYPH_SIZE,
        color,
        texture,
        identifier: identifier_word(1),
    }
}

pub fn identifier_word(slot: u8) -> String {
    format!("V{slot}*")
}

impl SubjectSpec {
    /// Binds the subject to identifier token `V<slot>*`.
    pub fn with_identifier(mut self, slot: u8) -> Result<Self> {
        if slot == 0 || slot > IDENTIFIER_SLOTS {
            return Err(Error::invalid(format!(
                "identifier slot {slot} outside 1..={IDENTIFIER_SLOTS}"
            )));
        }
        self.identifier = identifier_word(slot);
        Ok(self)
    }

    pub fn color_word(&self) -> String {
        palette()
            .into_iter()
            .find(|(c, _)| *c == self.color)
            .map(|(_, w)| w)
            .unwrap_or_else(|| "rgb000".into())
    }

    /// True when the two specs are separated in the sense of the generator:
    /// different family, texture, or a colour gap of at least 0.25 in L∞.
    pub fn separated_from(&self, other: &SubjectSpec) -> bool {
        let linf = self
            .color
            .iter()
            .zip(&other.color)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        self.family != other.family || self.texture != other.texture || linf >= 0.25
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn make_subject_is_deterministic() {
        assert_eq!(make_subject("cat", 0).unwrap(), make_subject("cat", 0).unwrap());
    }

    #[test]
    fn neighbouring_seeds_are_separated() {
        let a = make_subject("cat", 0).unwrap();
        let b = make_subject("cat", 1).unwrap();
        assert!(a.separated_from(&b));
    }

    #[test]
    fn all_seeds_in_one_period_are_pairwise_separated() {
        for cat in Category::ALL {
            let specs: Vec<_> = (0..SUBJECTS_PER_CATEGORY)
                .map(|s| subject_from_seed(cat, s))
                .collect();
            for i in 0..specs.len() {
                for j in i + 1..specs.len() {
                    assert!(specs[i].separated_from(&specs[j]), "{cat} seeds {i} {j}");
                }
                assert!(cat.families().contains(&specs[i].family));
            }
        }
    }

    #[test]
    fn unknown_category_is_rejected() {
        let err = make_subject("dragon", 0).unwrap_err();
        assert_eq!(err.to_string(), "unknown category \"dragon\"");
    }

    #[test]
    fn palette_is_well_separated() {
        let p = palette();
        assert_eq!(p.len(), 24);
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                let d = (0..3).map(|c| (p[i].0[c] - p[j].0[c]).abs()).fold(0.0, f32::max);
                assert!(d >= 0.25);
            }
        }
    }

    #[test]
    fn identifier_slots_are_bounded() {
        let s = make_subject("pot", 3).unwrap();
        assert_eq!(s.clone().with_identifier(4).unwrap().identifier, "V4*");
        assert!(s.clone().with_identifier(0).is_err());
        assert!(s.with_identifier(9).is_err());
    }
}
