//! Per-image layer kernels with hand-written backward passes. Activations are
//! stored channel-major as `[channels][pixels]`.

use super::real::{matmul, Real};

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// im2col for a 3×3, stride-1, zero-padded convolution: `[cin·9][h·w]`.
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize) -> Vec<T> {
    let n = h * w;
    let mut cols = vec![T::zero(); cin * 9 * n];
    for ci in 0..cin {
        let plane = &x[ci * n..(ci + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize) -> Vec<T> {
    let n = h * w;
    let mut x = vec![T::zero(); cin * n];
    for ci in 0..cin {
        let plane = &mut x[ci * n..(ci + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
    x
}

pub struct ConvCache<T> {
    cols: Vec<T>,
}

pub fn conv3x3<T: Real>(
    weight: &[T],
    bias: &[T],
    x: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, ConvCache<T>) {
    let n = h * w;
    let cols = im2col(x, cin, h, w);
    let mut y = vec![T::zero(); cout * n];
    for (co, b) in bias.iter().enumerate() {
        y[co * n..(co + 1) * n].fill(*b);
    }
    matmul(cout, cin * 9, n, weight, false, &cols, false, &mut y, true);
    (y, ConvCache { cols })
}

#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<T: Real>(
    weight: &[T],
    cache: &ConvCache<T>,
    dy: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Vec<T>> {
    let n = h * w;
    if let Some(dw) = dweight {
        matmul(cout, n, cin * 9, dy, false, &cache.cols, true, dw, true);
    }
    if let Some(db) = dbias {
        for (co, g) in db.iter_mut().enumerate() {
            *g += dy[co * n..(co + 1) * n].iter().copied().sum::<T>();
        }
    }
    if !need_dx {
        return None;
    }
    let mut dcols = vec![T::zero(); cin * 9 * n];
    matmul(cin * 9, cout, n, weight, true, dy, false, &mut dcols, false);
    Some(col2im(&dcols, cin, h, w))
}

/// Channel-mixing linear map `y = W x (+ b)` with `W: [cout][cin]`, `x: [cin][n]`.
pub fn linear<T: Real>(weight: &[T], bias: Option<&[T]>, x: &[T], cin: usize, cout: usize, n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); cout * n];
    if let Some(b) = bias {
        for (co, v) in b.iter().enumerate() {
            y[co * n..(co + 1) * n].fill(*v);
        }
    }
    matmul(cout, cin, n, weight, false, x, false, &mut y, bias.is_some());
    y
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    weight: &[T],
    x: &[T],
    dy: &[T],
    cin: usize,
    cout: usize,
    n: usize,
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Vec<T>> {
    if let Some(dw) = dweight {
        matmul(cout, n, cin, dy, false, x, true, dw, true);
    }
    if let Some(db) = dbias {
        for (co, g) in db.iter_mut().enumerate() {
            *g += dy[co * n..(co + 1) * n].iter().copied().sum::<T>();
        }
    }
    if !need_dx {
        return None;
    }
    let mut dx = vec![T::zero(); cin * n];
    matmul(cin, cout, n, weight, true, dy, false, &mut dx, false);
    Some(dx)
}

pub struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

pub const GN_EPS: f64 = 1e-5;

pub fn group_norm<T: Real>(
    gamma: &[T],
    beta: &[T],
    x: &[T],
    c: usize,
    n: usize,
    groups: usize,
) -> (Vec<T>, NormCache<T>) {
    let per = c / groups;
    let count = T::of((per * n) as f64);
    let mut xhat = vec![T::zero(); c * n];
    let mut inv_std = vec![T::zero(); groups];
    let mut y = vec![T::zero(); c * n];
    for g in 0..groups {
        let span = g * per * n..(g + 1) * per * n;
        let xs = &x[span.clone()];
        let mean = xs.iter().copied().sum::<T>() / count;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let istd = T::one() / (var + T::of(GN_EPS)).sqrt();
        inv_std[g] = istd;
        for (o, &v) in xhat[span].iter_mut().zip(xs) {
            *o = (v - mean) * istd;
        }
        for ch in g * per..(g + 1) * per {
            let (ga, be) = (gamma[ch], beta[ch]);
            for i in ch * n..(ch + 1) * n {
                y[i] = xhat[i] * ga + be;
            }
        }
    }
    (y, NormCache { xhat, inv_std })
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Real>(
    gamma: &[T],
    cache: &NormCache<T>,
    dy: &[T],
    c: usize,
    n: usize,
    groups: usize,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) -> Vec<T> {
    let per = c / groups;
    let count = T::of((per * n) as f64);
    let mut dx = vec![T::zero(); c * n];
    let mut dxhat = vec![T::zero(); per * n];
    for g in 0..groups {
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for ch in g * per..(g + 1) * per {
            let row = ch * n..(ch + 1) * n;
            let (mut sg, mut sb) = (T::zero(), T::zero());
            for (j, i) in row.enumerate() {
                let d = dy[i];
                sg += d * cache.xhat[i];
                sb += d;
                let dh = d * gamma[ch];
                dxhat[(ch - g * per) * n + j] = dh;
                sum_d += dh;
                sum_dx += dh * cache.xhat[i];
            }
            if let Some(dg) = dgamma.as_deref_mut() {
                dg[ch] += sg;
            }
            if let Some(db) = dbeta.as_deref_mut() {
                db[ch] += sb;
            }
        }
        let istd = cache.inv_std[g];
        let base = g * per * n;
        for j in 0..per * n {
            let xh = cache.xhat[base + j];
            dx[base + j] = istd * (dxhat[j] - sum_d / count - xh * sum_dx / count);
        }
    }
    dx
}

pub fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

pub fn avg_pool2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut y = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ch * h * w + 2 * oy * w + 2 * ox;
                y[(ch * oh + oy) * ow + ox] = (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]) * quarter;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Real>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(ch * oh + oy) * ow + ox] * quarter;
                let base = ch * h * w + 2 * oy * w + 2 * ox;
                dx[base] = g;
                dx[base + 1] = g;
                dx[base + w] = g;
                dx[base + w + 1] = g;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling of `[c][h][w]`.
pub fn upsample2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                y[(ch * oh + oy) * ow + ox] = x[(ch * h + oy / 2) * w + ox / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[(ch * h + oy / 2) * w + ox / 2] += dy[(ch * oh + oy) * ow + ox];
            }
        }
    }
    dx
}

/// `[c][2h][2w]` → `[4c][h][w]`; channel `(ci·4 + dy·2 + dx)` holds the
/// pixel at offset (dy, dx) of each 2×2 cell.
pub fn space_to_depth<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y0 in 0..oh {
            for x0 in 0..ow {
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    y[((ci * 4 + d) * oh + y0) * ow + x0] = x[(ci * h + 2 * y0 + dy) * w + 2 * x0 + dx];
                }
            }
        }
    }
    y
}

/// Inverse of [`space_to_depth`]; `h`, `w` are the full-resolution sizes.
pub fn depth_to_space<T: Real>(y: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y0 in 0..oh {
            for x0 in 0..ow {
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    x[(ci * h + 2 * y0 + dy) * w + 2 * x0 + dx] = y[((ci * 4 + d) * oh + y0) * ow + x0];
                }
            }
        }
    }
    x
}

/// Row-wise softmax of `[rows][cols]` in place.
pub fn softmax_rows<T: Real>(s: &mut [T], cols: usize) {
    for row in s.chunks_mut(cols) {
        let m = row.iter().copied().fold(row[0], T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
}
