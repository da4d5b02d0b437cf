use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{secondary_tone, Image, ShapeFamily, SubjectSpec, Texture, BACKGROUNDS, GLYPH_SIZE, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::rng;

/// Canvas packing is only guaranteed up to four subjects.
pub const MAX_SCENE_SUBJECTS: usize = 4;

const POSE_STREAM: u64 = 0x706f_7365;

/// Coverage of a family's glyph on the `GLYPH_SIZE`² grid, row-major.
pub fn glyph_mask(family: ShapeFamily) -> Vec<bool> {
    let n = GLYPH_SIZE;
    let c = n as f32 / 2.0;
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let (dx, dy) = (px - c, py - c);
            let inside = match family {
                ShapeFamily::Triangle => dx.abs() <= py * 0.5,
                ShapeFamily::Cross => dx.abs() <= 2.0 || dy.abs() <= 2.0,
                ShapeFamily::Square => (1..=10).contains(&x) && (1..=10).contains(&y),
                ShapeFamily::Ring => {
                    let r = (dx * dx + dy * dy).sqrt();
                    (3.0..=6.0).contains(&r)
                }
                ShapeFamily::TwinDots => {
                    let l = ((px - 3.0).powi(2) + dy * dy).sqrt();
                    let r = ((px - 9.0).powi(2) + dy * dy).sqrt();
                    l <= 3.0 || r <= 3.0
                }
                ShapeFamily::Bar => (dx - dy).abs() <= 2.0,
                ShapeFamily::Diamond => dx.abs() + dy.abs() <= 5.0,
                ShapeFamily::Chevron => {
                    let v = 9.5 - dx.abs() * 1.3;
                    (py - v).abs() <= 1.8
                }
            };
            out.push(inside);
        }
    }
    out
}

/// Colour of glyph pixel (x, y) for a subject, ignoring coverage.
pub(crate) fn texel(spec: &SubjectSpec, x: usize, y: usize) -> [f32; 3] {
    let secondary = secondary_tone(spec.color);
    match spec.texture {
        Texture::Solid => spec.color,
        Texture::Striped => {
            if (y / 2) % 2 == 1 {
                secondary
            } else {
                spec.color
            }
        }
        Texture::Dotted => {
            let dot = matches!(x % 4, 1 | 2) && matches!(y % 4, 1 | 2);
            if dot {
                spec.color
            } else {
                secondary
            }
        }
    }
}

fn paint(img: &mut Image, spec: &SubjectSpec, x0: usize, y0: usize) {
    let mask = glyph_mask(spec.family);
    for y in 0..GLYPH_SIZE {
        for x in 0..GLYPH_SIZE {
            if mask[y * GLYPH_SIZE + x] {
                let rgb = texel(spec, x, y);
                for (c, v) in rgb.iter().enumerate() {
                    img.set(c, y0 + y, x0 + x, *v);
                }
            }
        }
    }
}

/// The subject on a flat background with a one-pixel margin, plus the glyph
/// coverage over that padded box.
pub fn subject_template(spec: &SubjectSpec, background: [f32; 3]) -> (Image, Vec<bool>) {
    let side = GLYPH_SIZE + 2;
    let mut img = Image::filled(side, side, background);
    paint(&mut img, spec, 1, 1);
    let glyph = glyph_mask(spec.family);
    let mut mask = vec![false; side * side];
    for y in 0..GLYPH_SIZE {
        for x in 0..GLYPH_SIZE {
            mask[(y + 1) * side + x + 1] = glyph[y * GLYPH_SIZE + x];
        }
    }
    (img, mask)
}

/// Renders up to four subjects on background `background_id`.
///
/// One subject is placed near the centre; two go into the left/right halves;
/// three or four occupy distinct quadrants. `pose_seed` picks the slot
/// assignment and a small positional jitter. Glyph boxes never overlap and
/// keep a one-pixel margin from the border.
pub fn render_scene(subjects: &[SubjectSpec], background_id: usize, pose_seed: u64) -> Result<Image> {
    if subjects.len() > MAX_SCENE_SUBJECTS {
        return Err(Error::invalid(format!(
            "at most {MAX_SCENE_SUBJECTS} subjects per scene, got {}",
            subjects.len()
        )));
    }
    let (_, bg) = BACKGROUNDS
        .get(background_id)
        .ok_or_else(|| Error::invalid(format!("unknown background id {background_id}")))?;
    let mut img = Image::filled(IMAGE_SIZE, IMAGE_SIZE, *bg);
    let mut rng = rng::stream(pose_seed, POSE_STREAM);
    let mut slots: Vec<(i32, i32, i32, i32)> = match subjects.len() {
        0 => vec![],
        // (x0, y0, x-jitter, y-jitter)
        1 => vec![(10, 10, 4, 4)],
        2 => vec![(2, 10, 1, 4), (18, 10, 1, 4)],
        _ => vec![(2, 2, 1, 1), (18, 2, 1, 1), (2, 18, 1, 1), (18, 18, 1, 1)],
    };
    slots.shuffle(&mut rng);
    for (spec, &(x0, y0, jx, jy)) in subjects.iter().zip(&slots) {
        let x = x0 + rng.gen_range(-jx..=jx);
        let y = y0 + rng.gen_range(-jy..=jy);
        paint(&mut img, spec, x as usize, y as usize);
    }
    Ok(img)
}
