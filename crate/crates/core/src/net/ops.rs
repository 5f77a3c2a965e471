//! Kernels for the segmentation network. Everything is CHW, row-major, f32,
//! with zero "same" padding.

/// A `[C, H, W]` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Fmap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Fmap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Fmap {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w, "fmap size");
        Fmap { c, h, w, data }
    }

    pub fn plane(&self, i: usize) -> &[f32] {
        let n = self.h * self.w;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn plane_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.h * self.w;
        &mut self.data[i * n..(i + 1) * n]
    }
}

#[inline]
fn valid_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// `dst[y, x] += Σ kernel[ky, kx] * src[y + ky - p, x + kx - p]`
fn corr_add(dst: &mut [f32], src: &[f32], h: usize, w: usize, kernel: &[f32], k: usize) {
    let p = (k / 2) as isize;
    for ky in 0..k {
        let dy = ky as isize - p;
        let (y0, y1) = valid_range(h, dy);
        for kx in 0..k {
            let dx = kx as isize - p;
            let (x0, x1) = valid_range(w, dx);
            if x0 >= x1 {
                continue;
            }
            let wv = kernel[ky * k + kx];
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let s0 = (sy * w) as isize + x0 as isize + dx;
                let s = &src[s0 as usize..s0 as usize + (x1 - x0)];
                let d = &mut dst[y * w + x0..y * w + x1];
                for (dv, &sv) in d.iter_mut().zip(s) {
                    *dv += wv * sv;
                }
            }
        }
    }
}

/// `dst[y + ky - p, x + kx - p] += kernel[ky, kx] * src[y, x]` (transpose of [`corr_add`]).
fn corr_add_transpose(dst: &mut [f32], src: &[f32], h: usize, w: usize, kernel: &[f32], k: usize) {
    let p = (k / 2) as isize;
    for ky in 0..k {
        let dy = ky as isize - p;
        let (y0, y1) = valid_range(h, dy);
        for kx in 0..k {
            let dx = kx as isize - p;
            let (x0, x1) = valid_range(w, dx);
            if x0 >= x1 {
                continue;
            }
            let wv = kernel[ky * k + kx];
            for y in y0..y1 {
                let dyy = (y as isize + dy) as usize;
                let d0 = ((dyy * w) as isize + x0 as isize + dx) as usize;
                let d = &mut dst[d0..d0 + (x1 - x0)];
                let s = &src[y * w + x0..y * w + x1];
                for (dv, &sv) in d.iter_mut().zip(s) {
                    *dv += wv * sv;
                }
            }
        }
    }
}

/// `Σ_{y,x} g[y, x] * src[y + ky - p, x + kx - p]` for every kernel tap, in f64.
fn corr_weight_grad(acc: &mut [f64], g: &[f32], src: &[f32], h: usize, w: usize, k: usize) {
    let p = (k / 2) as isize;
    for ky in 0..k {
        let dy = ky as isize - p;
        let (y0, y1) = valid_range(h, dy);
        for kx in 0..k {
            let dx = kx as isize - p;
            let (x0, x1) = valid_range(w, dx);
            if x0 >= x1 {
                continue;
            }
            let mut sum = 0.0f64;
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let s0 = ((sy * w) as isize + x0 as isize + dx) as usize;
                let s = &src[s0..s0 + (x1 - x0)];
                let gr = &g[y * w + x0..y * w + x1];
                let row: f32 = gr.iter().zip(s).map(|(&a, &b)| a * b).sum();
                sum += row as f64;
            }
            acc[ky * k + kx] += sum;
        }
    }
}

/// Weights `[out, in, k, k]` and bias `[out]` of one convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub out_c: usize,
    pub in_c: usize,
    pub k: usize,
}

/// Same-padded convolution.
///
/// With `canonical` set, per-input-channel partial sums are added in sorted
/// order so that the output is bit-identical under any joint permutation of
/// input channels and weight slices.
pub fn conv_forward(
    x: &Fmap,
    shape: ConvShape,
    weight: &[f32],
    bias: &[f32],
    canonical: bool,
) -> Fmap {
    let ConvShape { out_c, in_c, k } = shape;
    debug_assert_eq!(x.c, in_c);
    let (h, w) = (x.h, x.w);
    let n = h * w;
    let mut out = Fmap::zeros(out_c, h, w);
    let kk = k * k;
    if canonical && in_c > 1 {
        let mut partial = vec![0.0f32; in_c * n];
        let mut scratch = vec![0.0f32; in_c];
        for o in 0..out_c {
            partial.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..in_c {
                let ker = &weight[(o * in_c + i) * kk..(o * in_c + i + 1) * kk];
                corr_add(&mut partial[i * n..(i + 1) * n], x.plane(i), h, w, ker, k);
            }
            let b = bias[o];
            let dst = out.plane_mut(o);
            for (px, d) in dst.iter_mut().enumerate() {
                for i in 0..in_c {
                    scratch[i] = partial[i * n + px];
                }
                scratch.sort_unstable_by(|a, b| a.total_cmp(b));
                let mut s = 0.0f32;
                for &v in scratch.iter() {
                    s += v;
                }
                *d = b + s;
            }
        }
    } else {
        for o in 0..out_c {
            let dst = out.plane_mut(o);
            for i in 0..in_c {
                let ker = &weight[(o * in_c + i) * kk..(o * in_c + i + 1) * kk];
                corr_add(dst, x.plane(i), h, w, ker, k);
            }
            let b = bias[o];
            dst.iter_mut().for_each(|v| *v += b);
        }
    }
    out
}

/// Gradients of a convolution given the upstream gradient `g` (shape of the output).
/// Returns `(dx, dweight, dbias)`; parameter gradients are skipped when
/// `want_params` is false.
pub fn conv_backward(
    x: &Fmap,
    g: &Fmap,
    shape: ConvShape,
    weight: &[f32],
    want_params: bool,
    want_input: bool,
) -> (Option<Fmap>, Option<(Vec<f32>, Vec<f32>)>) {
    let ConvShape { out_c, in_c, k } = shape;
    let (h, w) = (x.h, x.w);
    let kk = k * k;
    let dx = want_input.then(|| {
        let mut dx = Fmap::zeros(in_c, h, w);
        for i in 0..in_c {
            let dst = dx.plane_mut(i);
            for o in 0..out_c {
                let ker = &weight[(o * in_c + i) * kk..(o * in_c + i + 1) * kk];
                corr_add_transpose(dst, g.plane(o), h, w, ker, k);
            }
        }
        dx
    });
    let params = want_params.then(|| {
        let mut dw = vec![0.0f64; out_c * in_c * kk];
        let mut db = vec![0.0f32; out_c];
        for o in 0..out_c {
            let go = g.plane(o);
            db[o] = go.iter().map(|&v| v as f64).sum::<f64>() as f32;
            for i in 0..in_c {
                let acc = &mut dw[(o * in_c + i) * kk..(o * in_c + i + 1) * kk];
                corr_weight_grad(acc, go, x.plane(i), h, w, k);
            }
        }
        (dw.into_iter().map(|v| v as f32).collect(), db)
    });
    (dx, params)
}

pub fn relu(x: &Fmap) -> Fmap {
    Fmap {
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
        ..*x
    }
}

pub fn relu_backward(input: &Fmap, g: &mut Fmap) {
    for (gv, &xv) in g.data.iter_mut().zip(&input.data) {
        if xv <= 0.0 {
            *gv = 0.0;
        }
    }
}

/// 2×2 max pooling, stride 2. Returns the pooled map and the flat source index
/// of each selected maximum (first maximum in scan order on ties).
pub fn maxpool2(x: &Fmap) -> (Fmap, Vec<u32>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Fmap::zeros(x.c, h2, w2);
    let mut idx = Vec::with_capacity(x.c * h2 * w2);
    for c in 0..x.c {
        let src = x.plane(c);
        let base = c * x.h * x.w;
        for y in 0..h2 {
            for xx in 0..w2 {
                let cand = [
                    (2 * y) * x.w + 2 * xx,
                    (2 * y) * x.w + 2 * xx + 1,
                    (2 * y + 1) * x.w + 2 * xx,
                    (2 * y + 1) * x.w + 2 * xx + 1,
                ];
                let mut best = cand[0];
                for &ci in &cand[1..] {
                    if src[ci] > src[best] {
                        best = ci;
                    }
                }
                out.data[c * h2 * w2 + y * w2 + xx] = src[best];
                idx.push((base + best) as u32);
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward(input: &Fmap, idx: &[u32], g: &Fmap) -> Fmap {
    let mut dx = Fmap::zeros(input.c, input.h, input.w);
    for (&i, &gv) in idx.iter().zip(&g.data) {
        dx.data[i as usize] += gv;
    }
    dx
}

pub fn upsample2(x: &Fmap) -> Fmap {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Fmap::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(g: &Fmap) -> Fmap {
    let (h, w) = (g.h / 2, g.w / 2);
    let mut dx = Fmap::zeros(g.c, h, w);
    for c in 0..g.c {
        let src = g.plane(c);
        let dst = dx.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * g.w + 2 * x;
                dst[y * w + x] = src[i] + src[i + 1] + src[i + g.w] + src[i + g.w + 1];
            }
        }
    }
    dx
}

/// Channel concatenation `[a; b]`.
pub fn concat(a: &Fmap, b: &Fmap) -> Fmap {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Fmap::from_vec(a.c + b.c, a.h, a.w, data)
}

/// Split a gradient of `[a; b]` back into the `a` part (first `a_c` channels) and the rest.
pub fn split_channels(g: Fmap, a_c: usize) -> (Fmap, Fmap) {
    let n = g.h * g.w;
    let mut data = g.data;
    let rest = data.split_off(a_c * n);
    (
        Fmap::from_vec(a_c, g.h, g.w, data),
        Fmap::from_vec(g.c - a_c, g.h, g.w, rest),
    )
}

#[inline]
pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
