use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Planar RGB image (channel-major, row-major within a channel), values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for (c, v) in rgb.iter().enumerate() {
            data[c * plane..(c + 1) * plane].fill(*v);
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::invalid(format!(
                "image data has {} values, expected {}",
                data.len(),
                3 * width * height
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Tiles equally sized images into a grid with `cols` columns and a
    /// one-pixel white gutter.
    pub fn grid(images: &[Image], cols: usize) -> Result<Image> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("cannot tile an empty image list"))?;
        let (w, h) = (first.width, first.height);
        if images.iter().any(|im| im.width != w || im.height != h) {
            return Err(Error::invalid("grid images must share one size"));
        }
        let cols = cols.clamp(1, images.len());
        let rows = images.len().div_ceil(cols);
        let gw = cols * (w + 1) + 1;
        let gh = rows * (h + 1) + 1;
        let mut out = Image::filled(gw, gh, [1.0, 1.0, 1.0]);
        for (i, im) in images.iter().enumerate() {
            let ox = 1 + (i % cols) * (w + 1);
            let oy = 1 + (i / cols) * (h + 1);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        out.set(c, oy + y, ox + x, im.get(c, y, x));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Binary PPM ("P6", maxval 255).
    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut bytes = Vec::with_capacity(3 * self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let v = self.get(c, y, x).clamp(0.0, 1.0);
                    bytes.push((v * 255.0).round() as u8);
                }
            }
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_ppm<R: Read>(mut r: R) -> Result<Image> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < buf.len() && (buf[pos].is_ascii_whitespace() || buf[pos] == b'#') {
                if buf[pos] == b'#' {
                    while pos < buf.len() && buf[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format("ppm header", "truncated header"));
            }
            fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(Error::format("ppm magic", format!("expected P6, got {}", fields[0])));
        }
        let parse = |s: &str, field: &'static str| {
            s.parse::<usize>()
                .map_err(|_| Error::format(field, format!("not a number: {s}")))
        };
        let width = parse(&fields[1], "ppm width")?;
        let height = parse(&fields[2], "ppm height")?;
        let maxval = parse(&fields[3], "ppm maxval")?;
        if maxval != 255 {
            return Err(Error::format("ppm maxval", format!("expected 255, got {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = 3 * width * height;
        if buf.len() < pos + need {
            return Err(Error::format("ppm raster", "truncated pixel data"));
        }
        let raster = &buf[pos..pos + need];
        let mut img = Image::filled(width, height, [0.0; 3]);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    img.set(c, y, x, raster[(y * width + x) * 3 + c] as f32 / 255.0);
                }
            }
        }
        Ok(img)
    }

    pub fn save_ppm(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_ppm(std::io::BufWriter::new(file))
    }

    pub fn load_ppm(path: &std::path::Path) -> Result<Image> {
        Image::read_ppm(std::fs::File::open(path)?)
    }

    /// Nearest-neighbour upscale, used for readable heatmap dumps.
    pub fn upscale(&self, factor: usize) -> Image {
        let mut out = Image::filled(self.width * factor, self.height * factor, [0.0; 3]);
        for c in 0..3 {
            for y in 0..out.height {
                for x in 0..out.width {
                    out.set(c, y, x, self.get(c, y / factor, x / factor));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_quantizes_to_8_bits() {
        let mut img = Image::filled(3, 2, [0.2, 0.5, 1.0]);
        img.set(1, 1, 2, 0.0);
        let mut bytes = Vec::new();
        img.write_ppm(&mut bytes).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        let back = Image::read_ppm(&bytes[..]).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn rejects_wrong_magic() {
        let err = Image::read_ppm(&b"P3\n1 1\n255\n000"[..]).unwrap_err();
        assert!(err.to_string().contains("ppm magic"));
    }

    #[test]
    fn grid_layout() {
        let a = Image::filled(2, 2, [0.0; 3]);
        let g = Image::grid(&[a.clone(), a.clone(), a], 2).unwrap();
        assert_eq!((g.width, g.height), (7, 7));
        assert_eq!(g.get(0, 0, 0), 1.0);
        assert_eq!(g.get(0, 1, 1), 0.0);
    }
}
