//! Oracle detector: at every translation, the smaller of two normalized
//! cross-correlations (the canonical rendering against the patch, and the
//! glyph coverage against the foreground-contrast map), multiplied by a
//! colour-histogram match on the glyph pixels.

use super::render::{glyph_mask, texel};
use super::{Category, Image, SubjectSpec, GLYPH_SIZE, PRESENCE_THRESHOLD};

const BOX: usize = GLYPH_SIZE + 2;
const BINS: usize = 6;

/// Best placement of a subject in an image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub score: f32,
    /// Top-left corner of the padded template box.
    pub x: usize,
    pub y: usize,
}

struct Template {
    mask: Vec<bool>,
    coverage: Vec<f32>,
    texels: Vec<[f32; 3]>,
    hist: [[f32; BINS]; 3],
}

impl Template {
    fn new(spec: &SubjectSpec) -> Self {
        let glyph = glyph_mask(spec.family);
        let mut mask = vec![false; BOX * BOX];
        let mut texels = vec![[0.0; 3]; BOX * BOX];
        for y in 0..GLYPH_SIZE {
            for x in 0..GLYPH_SIZE {
                let i = (y + 1) * BOX + x + 1;
                mask[i] = glyph[y * GLYPH_SIZE + x];
                texels[i] = texel(spec, x, y);
            }
        }
        let glyph_px: Vec<[f32; 3]> = (0..BOX * BOX).filter(|&i| mask[i]).map(|i| texels[i]).collect();
        let hist = histogram(&glyph_px);
        let coverage = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Template {
            mask,
            coverage,
            texels,
            hist,
        }
    }
}

fn histogram(pixels: &[[f32; 3]]) -> [[f32; BINS]; 3] {
    let mut h = [[0.0f32; BINS]; 3];
    if pixels.is_empty() {
        return h;
    }
    let w = 1.0 / pixels.len() as f32;
    for p in pixels {
        for c in 0..3 {
            // linear soft binning; bin k is centred on (k + 0.5) / BINS
            let u = (p[c].clamp(0.0, 1.0) * BINS as f32 - 0.5).clamp(0.0, (BINS - 1) as f32);
            let k = (u.floor() as usize).min(BINS - 2);
            let frac = u - k as f32;
            h[c][k] += w * (1.0 - frac);
            h[c][k + 1] += w * frac;
        }
    }
    h
}

fn intersection(a: &[[f32; BINS]; 3], b: &[[f32; BINS]; 3]) -> f32 {
    (0..3)
        .map(|c| (0..BINS).map(|k| a[c][k].min(b[c][k])).sum::<f32>())
        .fold(f32::INFINITY, f32::min)
}

fn ncc(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let denom = (saa * sbb).sqrt();
    if denom < 1e-9 || saa < 1e-6 * n || sbb < 1e-6 * n {
        0.0
    } else {
        (sab / denom) as f32
    }
}

fn score_at(img: &Image, t: &Template, ox: usize, oy: usize, patch: &mut Vec<f32>, tmpl: &mut Vec<f32>) -> f32 {
    // background estimate: mean of the patch outside the glyph coverage
    let mut bg = [0.0f32; 3];
    let mut n_bg = 0usize;
    for y in 0..BOX {
        for x in 0..BOX {
            if !t.mask[y * BOX + x] {
                let p = img.pixel(oy + y, ox + x);
                for c in 0..3 {
                    bg[c] += p[c];
                }
                n_bg += 1;
            }
        }
    }
    for v in &mut bg {
        *v /= n_bg.max(1) as f32;
    }
    patch.clear();
    tmpl.clear();
    let mut glyph_px = Vec::with_capacity(BOX * BOX);
    for c in 0..3 {
        for y in 0..BOX {
            for x in 0..BOX {
                let i = y * BOX + x;
                patch.push(img.get(c, oy + y, ox + x));
                tmpl.push(if t.mask[i] { t.texels[i][c] } else { bg[c] });
            }
        }
    }
    for y in 0..BOX {
        for x in 0..BOX {
            if t.mask[y * BOX + x] {
                glyph_px.push(img.pixel(oy + y, ox + x));
            }
        }
    }
    let corr = ncc(tmpl, patch).max(0.0);
    if corr == 0.0 {
        return 0.0;
    }
    let fg: Vec<f32> = (0..BOX * BOX)
        .map(|i| {
            let p = img.pixel(oy + i / BOX, ox + i % BOX);
            (0..3).map(|c| (p[c] - bg[c]).powi(2)).sum::<f32>().sqrt()
        })
        .collect();
    let shape = ncc(&t.coverage, &fg).max(0.0);
    corr.min(shape) * intersection(&t.hist, &histogram(&glyph_px))
}

/// Best-scoring placement of `spec` in `img`.
pub fn locate_subject(img: &Image, spec: &SubjectSpec) -> Detection {
    let t = Template::new(spec);
    let mut best = Detection {
        score: 0.0,
        x: 0,
        y: 0,
    };
    if img.width < BOX || img.height < BOX {
        return best;
    }
    let mut patch = Vec::with_capacity(3 * BOX * BOX);
    let mut tmpl = Vec::with_capacity(3 * BOX * BOX);
    for oy in 0..=img.height - BOX {
        for ox in 0..=img.width - BOX {
            let s = score_at(img, &t, ox, oy, &mut patch, &mut tmpl);
            if s > best.score {
                best = Detection { score: s, x: ox, y: oy };
            }
        }
    }
    best
}

/// Presence score of `spec` in `img`, in [0, 1].
pub fn detect_subject(img: &Image, spec: &SubjectSpec) -> f32 {
    locate_subject(img, spec).score.clamp(0.0, 1.0)
}

/// Shape-only detector for a category: correlation of any of the category's
/// glyph masks with the foreground-contrast map, ignoring colour and texture.
pub fn detect_class(img: &Image, category: Category) -> f32 {
    if img.width < BOX || img.height < BOX {
        return 0.0;
    }
    let mut best = 0.0f32;
    for family in category.families() {
        let glyph = glyph_mask(family);
        let mut mask = vec![0.0f32; BOX * BOX];
        for y in 0..GLYPH_SIZE {
            for x in 0..GLYPH_SIZE {
                if glyph[y * GLYPH_SIZE + x] {
                    mask[(y + 1) * BOX + x + 1] = 1.0;
                }
            }
        }
        let mut fg = vec![0.0f32; BOX * BOX];
        for oy in 0..=img.height - BOX {
            for ox in 0..=img.width - BOX {
                let mut bg = [0.0f32; 3];
                let mut n = 0.0f32;
                for y in 0..BOX {
                    for x in 0..BOX {
                        if mask[y * BOX + x] == 0.0 {
                            let p = img.pixel(oy + y, ox + x);
                            for c in 0..3 {
                                bg[c] += p[c];
                            }
                            n += 1.0;
                        }
                    }
                }
                bg.iter_mut().for_each(|v| *v /= n);
                for y in 0..BOX {
                    for x in 0..BOX {
                        let p = img.pixel(oy + y, ox + x);
                        fg[y * BOX + x] = (0..3).map(|c| (p[c] - bg[c]).powi(2)).sum::<f32>().sqrt();
                    }
                }
                best = best.max(ncc(&mask, &fg));
            }
        }
    }
    best.clamp(0.0, 1.0)
}

/// Fraction of images in which `spec` is detected.
pub fn presence_rate(images: &[Image], spec: &SubjectSpec) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    let hits = images
        .iter()
        .filter(|im| detect_subject(im, spec) >= PRESENCE_THRESHOLD)
        .count();
    hits as f64 / images.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{make_subject, render_scene, subject_from_seed, Texture, BACKGROUNDS};

    #[test]
    fn self_match_is_near_one() {
        let s = make_subject("cat", 0).unwrap();
        for bg in 0..BACKGROUNDS.len() {
            let img = render_scene(&[s.clone()], bg, 3).unwrap();
            assert!(detect_subject(&img, &s) > 0.99, "bg {bg}");
        }
    }

    #[test]
    fn absent_subject_scores_below_threshold() {
        let s = make_subject("pot", 4).unwrap();
        let img = render_scene(&[], 0, 0).unwrap();
        assert!(detect_subject(&img, &s) < PRESENCE_THRESHOLD);
    }

    #[test]
    fn histogram_bins_palette_levels_exactly() {
        let h = histogram(&[[1.0 / 12.0, 5.0 / 12.0, 9.0 / 12.0]]);
        assert_eq!(h[0][0], 1.0);
        assert_eq!(h[1][2], 1.0);
        assert_eq!(h[2][4], 1.0);
    }

    #[test]
    fn distinct_families_do_not_cross_detect() {
        // same colour, every texture, both family orders within each category
        let mut worst = (0.0f32, String::new());
        for texture in Texture::ALL {
            for cat in Category::ALL {
                let [f, g] = cat.families();
                for (a, b) in [(f, g), (g, f)] {
                    let mut sa = subject_from_seed(Category::Cat, 0);
                    sa.family = a;
                    sa.texture = texture;
                    let mut sb = sa.clone();
                    sb.family = b;
                    let img = render_scene(&[sa.clone()], 0, 1).unwrap();
                    let s = detect_subject(&img, &sb);
                    if s > worst.0 {
                        worst = (s, format!("{a:?} as {b:?}, {texture:?}"));
                    }
                }
            }
        }
        assert!(worst.0 < PRESENCE_THRESHOLD, "{worst:?}");
    }

    #[test]
    fn class_detector_fires_on_own_category() {
        let s = make_subject("glasses", 2).unwrap();
        let img = render_scene(&[s], 3, 5).unwrap();
        assert!(detect_class(&img, Category::Glasses) > 0.9);
        assert!(detect_class(&render_scene(&[], 3, 5).unwrap(), Category::Glasses) < 0.1);
    }
}
