//! Forward and reverse passes of the cross-attention U-Net for one image.

use super::arch::{Affine, Arch, AttnSpec, ResBlockSpec, TIME_FEATURES};
use super::ops::*;
use super::real::{matmul, Real};
use crate::scene::{PromptTokens, IMAGE_SIZE, MAX_PROMPT_LEN};

const H1: usize = IMAGE_SIZE / 2;
const N1: usize = H1 * H1;

/// Writable gradient buffer that only exposes tensors flagged as needed.
pub struct GradSink<'a, T> {
    pub data: &'a mut [T],
    arch: &'a Arch,
    need: &'a [bool],
}

impl<'a, T: Real> GradSink<'a, T> {
    pub fn new(arch: &'a Arch, data: &'a mut [T], need: &'a [bool]) -> Self {
        assert_eq!(data.len(), arch.total);
        assert_eq!(need.len(), arch.tensors.len());
        GradSink { data, arch, need }
    }

    fn needs(&self, id: usize) -> bool {
        self.need[id]
    }

    fn one(&mut self, id: usize) -> Option<&mut [T]> {
        if self.need[id] {
            Some(&mut self.data[self.arch.range(id)])
        } else {
            None
        }
    }

    fn pair(&mut self, a: Affine) -> (Option<&mut [T]>, Option<&mut [T]>) {
        let (ra, rb) = (self.arch.range(a.w), self.arch.range(a.b));
        debug_assert!(ra.end <= rb.start);
        let (left, right) = self.data.split_at_mut(rb.start);
        let w = self.need[a.w].then(|| &mut left[ra]);
        let b = self.need[a.b].then(|| &mut right[..rb.end - rb.start]);
        (w, b)
    }
}

fn slice<'a, T>(p: &'a [T], arch: &Arch, id: usize) -> &'a [T] {
    &p[arch.range(id)]
}

/// Sinusoidal features of the normalised timestep `s = t / T`.
pub fn time_features<T: Real>(s: f64) -> Vec<T> {
    let half = TIME_FEATURES / 2;
    let mut out = vec![T::zero(); TIME_FEATURES];
    for i in 0..half {
        let freq = (-(1000f64).ln() * i as f64 / half as f64).exp();
        let a = 1000.0 * s * freq;
        out[i] = T::of(a.sin());
        out[half + i] = T::of(a.cos());
    }
    out
}

struct ResTape<T> {
    x: Vec<T>,
    n1: NormCache<T>,
    a1: Vec<T>,
    conv1: ConvCache<T>,
    n2: NormCache<T>,
    a2: Vec<T>,
    conv2: ConvCache<T>,
}

struct AttnTape<T> {
    n: NormCache<T>,
    normed: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    attn: Vec<T>,
    o: Vec<T>,
}

/// Everything the reverse pass needs from one forward evaluation.
pub struct Tape<T> {
    c_out: T,
    temb_pre: Vec<T>,
    temb: Vec<T>,
    tfeat: Vec<T>,
    ctx: Vec<T>,
    tokens: PromptTokens,
    conv_in: ConvCache<T>,
    res: Vec<ResTape<T>>,
    attn: Vec<AttnTape<T>>,
    norm_out: NormCache<T>,
    pre_out: Vec<T>,
    act_out: Vec<T>,
}

impl<T: Real> Tape<T> {
    /// Softmax attention weights `[pixels][tokens]` of each cross-attention
    /// layer, in network order.
    pub fn attention(&self) -> impl Iterator<Item = &[T]> {
        self.attn.iter().map(|a| a.attn.as_slice())
    }
}

fn res_forward<T: Real>(
    arch: &Arch,
    p: &[T],
    spec: &ResBlockSpec,
    x: Vec<T>,
    temb: &[T],
    hw: usize,
) -> (Vec<T>, ResTape<T>) {
    let n = hw * hw;
    let g = arch.config.groups;
    let (h, n1) = group_norm(slice(p, arch, spec.norm1.w), slice(p, arch, spec.norm1.b), &x, spec.cin, n, g);
    let a1 = h;
    let s1 = silu(&a1);
    let (mut c1, conv1) = conv3x3(
        slice(p, arch, spec.conv1.w),
        slice(p, arch, spec.conv1.b),
        &s1,
        spec.cin,
        spec.cout,
        hw,
        hw,
    );
    let proj = linear(
        slice(p, arch, spec.temb.w),
        Some(slice(p, arch, spec.temb.b)),
        temb,
        arch.config.time_dim,
        spec.cout,
        1,
    );
    for (co, v) in proj.iter().enumerate() {
        c1[co * n..(co + 1) * n].iter_mut().for_each(|e| *e += *v);
    }
    let (a2, n2) = group_norm(slice(p, arch, spec.norm2.w), slice(p, arch, spec.norm2.b), &c1, spec.cout, n, g);
    let s2 = silu(&a2);
    let (c2, conv2) = conv3x3(
        slice(p, arch, spec.conv2.w),
        slice(p, arch, spec.conv2.b),
        &s2,
        spec.cout,
        spec.cout,
        hw,
        hw,
    );
    let mut out = match spec.skip {
        Some(sk) => linear(slice(p, arch, sk.w), Some(slice(p, arch, sk.b)), &x, spec.cin, spec.cout, n),
        None => x.clone(),
    };
    out.iter_mut().zip(&c2).for_each(|(o, c)| *o += *c);
    let tape = ResTape {
        x,
        n1,
        a1,
        conv1,
        n2,
        a2,
        conv2,
    };
    (out, tape)
}

#[allow(clippy::too_many_arguments)]
fn res_backward<T: Real>(
    arch: &Arch,
    p: &[T],
    spec: &ResBlockSpec,
    tape: &ResTape<T>,
    dout: &[T],
    temb: &[T],
    dtemb: &mut [T],
    hw: usize,
    g: &mut GradSink<T>,
) -> Vec<T> {
    let n = hw * hw;
    let groups = arch.config.groups;
    let (dw, db) = g.pair(spec.conv2);
    let ds2 = conv3x3_backward(slice(p, arch, spec.conv2.w), &tape.conv2, dout, spec.cout, spec.cout, hw, hw, dw, db, true)
        .expect("dx requested");
    let da2 = silu_backward(&tape.a2, &ds2);
    let (dgam, dbet) = g.pair(spec.norm2);
    let dc1 = group_norm_backward(slice(p, arch, spec.norm2.w), &tape.n2, &da2, spec.cout, n, groups, dgam, dbet);

    let dproj: Vec<T> = (0..spec.cout).map(|co| dc1[co * n..(co + 1) * n].iter().copied().sum()).collect();
    let (dw, db) = g.pair(spec.temb);
    if let Some(dx) = linear_backward(slice(p, arch, spec.temb.w), temb, &dproj, arch.config.time_dim, spec.cout, 1, dw, db, true) {
        dtemb.iter_mut().zip(&dx).for_each(|(a, b)| *a += *b);
    }

    let (dw, db) = g.pair(spec.conv1);
    let ds1 = conv3x3_backward(slice(p, arch, spec.conv1.w), &tape.conv1, &dc1, spec.cin, spec.cout, hw, hw, dw, db, true)
        .expect("dx requested");
    let da1 = silu_backward(&tape.a1, &ds1);
    let (dgam, dbet) = g.pair(spec.norm1);
    let mut dx = group_norm_backward(slice(p, arch, spec.norm1.w), &tape.n1, &da1, spec.cin, n, groups, dgam, dbet);

    match spec.skip {
        Some(sk) => {
            let (dw, db) = g.pair(sk);
            let dskip = linear_backward(slice(p, arch, sk.w), &tape.x, dout, spec.cin, spec.cout, n, dw, db, true)
                .expect("dx requested");
            dx.iter_mut().zip(&dskip).for_each(|(a, b)| *a += *b);
        }
        None => dx.iter_mut().zip(dout).for_each(|(a, b)| *a += *b),
    }
    dx
}

fn attn_forward<T: Real>(arch: &Arch, p: &[T], spec: &AttnSpec, h: Vec<T>, ctx: &[T], n: usize) -> (Vec<T>, AttnTape<T>) {
    let (c, e, l) = (spec.c, arch.config.embed, MAX_PROMPT_LEN);
    let (normed, ncache) = group_norm(slice(p, arch, spec.norm.w), slice(p, arch, spec.norm.b), &h, c, n, arch.config.groups);
    let q = linear(slice(p, arch, spec.to_q), None, &normed, c, c, n);
    let k = linear(slice(p, arch, spec.to_k), None, ctx, e, c, l);
    let v = linear(slice(p, arch, spec.to_v), None, ctx, e, c, l);
    let scale = T::of(1.0 / (c as f64).sqrt());
    let mut attn = vec![T::zero(); n * l];
    matmul(n, c, l, &q, true, &k, false, &mut attn, false);
    attn.iter_mut().for_each(|s| *s *= scale);
    softmax_rows(&mut attn, l);
    let mut o = vec![T::zero(); c * n];
    matmul(c, l, n, &v, false, &attn, true, &mut o, false);
    let y = linear(slice(p, arch, spec.out.w), Some(slice(p, arch, spec.out.b)), &o, c, c, n);
    let mut out = h;
    out.iter_mut().zip(&y).for_each(|(a, b)| *a += *b);
    let tape = AttnTape {
        n: ncache,
        normed,
        q,
        k,
        v,
        attn,
        o,
    };
    (out, tape)
}

#[allow(clippy::too_many_arguments)]
fn attn_backward<T: Real>(
    arch: &Arch,
    p: &[T],
    spec: &AttnSpec,
    tape: &AttnTape<T>,
    dout: &[T],
    ctx: &[T],
    dctx: &mut [T],
    n: usize,
    g: &mut GradSink<T>,
) -> Vec<T> {
    let (c, e, l) = (spec.c, arch.config.embed, MAX_PROMPT_LEN);
    let scale = T::of(1.0 / (c as f64).sqrt());
    let (dw, db) = g.pair(spec.out);
    let d_o = linear_backward(slice(p, arch, spec.out.w), &tape.o, dout, c, c, n, dw, db, true).expect("dx requested");

    let mut dv = vec![T::zero(); c * l];
    matmul(c, n, l, &d_o, false, &tape.attn, false, &mut dv, false);
    let mut da = vec![T::zero(); n * l];
    matmul(n, c, l, &d_o, true, &tape.v, false, &mut da, false);
    // softmax backward, folded with the logit scale
    for (arow, drow) in tape.attn.chunks(l).zip(da.chunks_mut(l)) {
        let dot: T = arow.iter().zip(drow.iter()).map(|(a, d)| *a * *d).sum();
        for (a, d) in arow.iter().zip(drow.iter_mut()) {
            *d = *a * (*d - dot) * scale;
        }
    }
    let ds = da;
    let mut dq = vec![T::zero(); c * n];
    matmul(c, l, n, &tape.k, false, &ds, true, &mut dq, false);
    let mut dk = vec![T::zero(); c * l];
    matmul(c, n, l, &tape.q, false, &ds, false, &mut dk, false);

    let need_ctx = g.needs(arch.token_embed) || g.needs(arch.pos_embed);
    for (id, d) in [(spec.to_k, &dk), (spec.to_v, &dv)] {
        if let Some(dctx_part) = linear_backward(slice(p, arch, id), ctx, d, e, c, l, g.one(id), None, need_ctx) {
            dctx.iter_mut().zip(&dctx_part).for_each(|(a, b)| *a += *b);
        }
    }

    let dn = linear_backward(slice(p, arch, spec.to_q), &tape.normed, &dq, c, c, n, g.one(spec.to_q), None, true)
        .expect("dx requested");
    let (dgam, dbet) = g.pair(spec.norm);
    let mut dh = group_norm_backward(slice(p, arch, spec.norm.w), &tape.n, &dn, c, n, arch.config.groups, dgam, dbet);
    dh.iter_mut().zip(dout).for_each(|(a, b)| *a += *b);
    dh
}

/// Context matrix `[embed][tokens]` = token embedding + position embedding.
fn context<T: Real>(arch: &Arch, p: &[T], tokens: &PromptTokens) -> Vec<T> {
    let e = arch.config.embed;
    let tok = slice(p, arch, arch.token_embed);
    let pos = slice(p, arch, arch.pos_embed);
    let mut ctx = vec![T::zero(); e * MAX_PROMPT_LEN];
    for (l, &id) in tokens.ids().iter().enumerate() {
        let id = id as usize;
        for j in 0..e {
            ctx[j * MAX_PROMPT_LEN + l] = tok[id * e + j] + pos[l * e + j];
        }
    }
    ctx
}

/// Predicts the clean image from `x_t` (`[3][32][32]`), the normalised
/// timestep `s = t / T`, and the prompt.
/// Assumed per-pixel mean and spread of clean images.
pub const DATA_MEAN: f64 = 0.5;
pub const DATA_STD: f64 = 0.3;

/// Input/output scalings wrapping the network body `F`:
/// `x̂ = μ + c_skip (x_t − αμ) + c_out F(c_in (x_t − αμ))`, so the body starts
/// from the best linear estimate and only learns a unit-scale correction.
#[derive(Clone, Copy, Debug)]
pub struct Precond {
    pub alpha: f64,
    pub c_in: f64,
    pub c_skip: f64,
    pub c_out: f64,
}

impl Precond {
    pub fn at(s: f64) -> Self {
        let alpha = super::schedule::alpha_at(s);
        let var = 1.0 - alpha * alpha;
        let total = alpha * alpha * DATA_STD * DATA_STD + var;
        Precond {
            alpha,
            c_in: 1.0 / total.sqrt(),
            c_skip: alpha * DATA_STD * DATA_STD / total,
            c_out: var.sqrt() * DATA_STD / total.sqrt(),
        }
    }
}

pub fn forward<T: Real>(arch: &Arch, p: &[T], x_t: &[T], s: f64, tokens: &PromptTokens) -> (Vec<T>, Tape<T>) {
    assert_eq!(p.len(), arch.total, "parameter vector length");
    assert_eq!(x_t.len(), 3 * IMAGE_SIZE * IMAGE_SIZE, "image length");
    let cfg = &arch.config;
    let (c1, c2) = (cfg.c1, cfg.c2);

    let tfeat = time_features::<T>(s);
    let temb_pre = linear(
        slice(p, arch, arch.time_mlp.w),
        Some(slice(p, arch, arch.time_mlp.b)),
        &tfeat,
        TIME_FEATURES,
        cfg.time_dim,
        1,
    );
    let temb = silu(&temb_pre);
    let ctx = context(arch, p, tokens);

    let pc = Precond::at(s);
    let shifted: Vec<f64> = x_t.iter().map(|v| v.to_f64() - pc.alpha * DATA_MEAN).collect();
    let x_in: Vec<T> = shifted.iter().map(|&v| T::of(pc.c_in * v)).collect();
    let x12 = space_to_depth(&x_in, 3, IMAGE_SIZE, IMAGE_SIZE);
    let (h0, conv_in) = conv3x3(
        slice(p, arch, arch.conv_in.w),
        slice(p, arch, arch.conv_in.b),
        &x12,
        12,
        c1,
        H1,
        H1,
    );

    let mut res = Vec::with_capacity(5);
    let mut attn = Vec::with_capacity(5);
    let stage = |i: usize, x: Vec<T>, hw: usize, res: &mut Vec<ResTape<T>>, attn: &mut Vec<AttnTape<T>>| {
        let st = &arch.stages[i];
        let (h, rt) = res_forward(arch, p, &st.res, x, &temb, hw);
        let (h, at) = attn_forward(arch, p, &st.attn, h, &ctx, hw * hw);
        res.push(rt);
        attn.push(at);
        h
    };

    let s1 = stage(0, h0, H1, &mut res, &mut attn);
    let s2 = stage(1, avg_pool2(&s1, c1, H1, H1), H1 / 2, &mut res, &mut attn);
    let m = stage(2, avg_pool2(&s2, c2, H1 / 2, H1 / 2), H1 / 4, &mut res, &mut attn);
    let mut cat = upsample2(&m, c2, H1 / 4, H1 / 4);
    cat.extend_from_slice(&s2);
    let u2 = stage(3, cat, H1 / 2, &mut res, &mut attn);
    let mut cat = upsample2(&u2, c2, H1 / 2, H1 / 2);
    cat.extend_from_slice(&s1);
    let u1 = stage(4, cat, H1, &mut res, &mut attn);

    let (pre_out, norm_out) = group_norm(
        slice(p, arch, arch.norm_out.w),
        slice(p, arch, arch.norm_out.b),
        &u1,
        c1,
        N1,
        cfg.groups,
    );
    let act_out = silu(&pre_out);
    let o = linear(
        slice(p, arch, arch.conv_out.w),
        Some(slice(p, arch, arch.conv_out.b)),
        &act_out,
        c1,
        12,
        N1,
    );
    let f = depth_to_space(&o, 3, IMAGE_SIZE, IMAGE_SIZE);
    let c_out = T::of(pc.c_out);
    let out = f
        .iter()
        .zip(&shifted)
        .map(|(&fi, &v)| T::of(DATA_MEAN + pc.c_skip * v) + c_out * fi)
        .collect();
    let tape = Tape {
        c_out,
        temb_pre,
        temb,
        tfeat,
        ctx,
        tokens: *tokens,
        conv_in,
        res,
        attn,
        norm_out,
        pre_out,
        act_out,
    };
    (out, tape)
}

/// Accumulates `∂(dout · x̂)/∂θ` into the sink for every needed tensor.
pub fn backward<T: Real>(arch: &Arch, p: &[T], tape: &Tape<T>, dout: &[T], g: &mut GradSink<T>) {
    let cfg = &arch.config;
    let (c1, c2) = (cfg.c1, cfg.c2);
    let mut dtemb = vec![T::zero(); cfg.time_dim];
    let mut dctx = vec![T::zero(); cfg.embed * MAX_PROMPT_LEN];

    let dout: Vec<T> = dout.iter().map(|&d| d * tape.c_out).collect();
    let do12 = space_to_depth(&dout, 3, IMAGE_SIZE, IMAGE_SIZE);
    let (dw, db) = g.pair(arch.conv_out);
    let dact = linear_backward(slice(p, arch, arch.conv_out.w), &tape.act_out, &do12, c1, 12, N1, dw, db, true)
        .expect("dx requested");
    let dpre = silu_backward(&tape.pre_out, &dact);
    let (dgam, dbet) = g.pair(arch.norm_out);
    let du1 = group_norm_backward(slice(p, arch, arch.norm_out.w), &tape.norm_out, &dpre, c1, N1, cfg.groups, dgam, dbet);

    let mut stage_back = |i: usize, d: Vec<T>, hw: usize, g: &mut GradSink<T>| {
        let st = &arch.stages[i];
        let d = attn_backward(arch, p, &st.attn, &tape.attn[i], &d, &tape.ctx, &mut dctx, hw * hw, g);
        res_backward(arch, p, &st.res, &tape.res[i], &d, &tape.temb, &mut dtemb, hw, g)
    };

    // up1: input was [upsampled u2 (c2); s1 (c1)] at 16×16
    let dcat = stage_back(4, du1, H1, g);
    let (du_up, ds1_skip) = dcat.split_at(c2 * N1);
    let mut du2 = upsample2_backward(du_up, c2, H1 / 2, H1 / 2);
    let ds1_skip = ds1_skip.to_vec();

    // up2: input was [upsampled mid (c2); s2 (c2)] at 8×8
    let n2 = N1 / 4;
    du2 = stage_back(3, du2, H1 / 2, g);
    let (dm_up, ds2_skip) = du2.split_at(c2 * n2);
    let dm = upsample2_backward(dm_up, c2, H1 / 4, H1 / 4);
    let ds2_skip = ds2_skip.to_vec();

    let dp2 = stage_back(2, dm, H1 / 4, g);
    let mut ds2 = avg_pool2_backward(&dp2, c2, H1 / 2, H1 / 2);
    ds2.iter_mut().zip(&ds2_skip).for_each(|(a, b)| *a += *b);

    let dp1 = stage_back(1, ds2, H1 / 2, g);
    let mut ds1 = avg_pool2_backward(&dp1, c1, H1, H1);
    ds1.iter_mut().zip(&ds1_skip).for_each(|(a, b)| *a += *b);

    let dh0 = stage_back(0, ds1, H1, g);
    let (dw, db) = g.pair(arch.conv_in);
    conv3x3_backward(slice(p, arch, arch.conv_in.w), &tape.conv_in, &dh0, 12, c1, H1, H1, dw, db, false);

    if g.needs(arch.time_mlp.w) || g.needs(arch.time_mlp.b) {
        let dpre = silu_backward(&tape.temb_pre, &dtemb);
        let (dw, db) = g.pair(arch.time_mlp);
        linear_backward(
            slice(p, arch, arch.time_mlp.w),
            &tape.tfeat,
            &dpre,
            TIME_FEATURES,
            cfg.time_dim,
            1,
            dw,
            db,
            false,
        );
    }

    let e = cfg.embed;
    if let Some(dtok) = g.one(arch.token_embed) {
        for (l, &id) in tape.tokens.ids().iter().enumerate() {
            for j in 0..e {
                dtok[id as usize * e + j] += dctx[j * MAX_PROMPT_LEN + l];
            }
        }
    }
    if let Some(dpos) = g.one(arch.pos_embed) {
        for l in 0..MAX_PROMPT_LEN {
            for j in 0..e {
                dpos[l * e + j] += dctx[j * MAX_PROMPT_LEN + l];
            }
        }
    }
}
