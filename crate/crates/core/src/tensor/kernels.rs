//! Slice-level forward and backward kernels.
//!
//! Layouts are row-major. Spatial tensors are `(batch, channels, sites)` where
//! `sites = height * width`; a rank-3 tensor is treated as a batch of one.

use super::{shape_err, Real, Result};
use crate::par;

/// Geometry of a valid (unpadded) 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize) -> Result<Self> {
        let (batch, c, h, w) = match *input {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return shape_err("conv2d", "input C x H x W or B x C x H x W", input),
        };
        let [o, kc, kh, kw] = *kernel else {
            return shape_err("conv2d", "kernel O x C x Kh x Kw", kernel);
        };
        if kc != c {
            return shape_err("conv2d", format!("kernel with {c} input channels"), kernel);
        }
        if stride == 0 {
            return shape_err("conv2d", "positive stride", &[stride]);
        }
        if h < kh || w < kw {
            return shape_err("conv2d", format!("input at least {kh}x{kw} spatially"), input);
        }
        Ok(Self {
            batch,
            in_ch: c,
            in_h: h,
            in_w: w,
            out_ch: o,
            k_h: kh,
            k_w: kw,
            stride,
            out_h: (h - kh) / stride + 1,
            out_w: (w - kw) / stride + 1,
        })
    }

    pub fn patch(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }

    pub fn out_sites(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_ch * self.out_sites()
    }
}

/// Unfolds one sample into a `(patch, out_sites)` matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let sites = g.out_sites();
    if g.k_h == 1 && g.k_w == 1 && g.stride == 1 {
        cols.copy_from_slice(x);
        return;
    }
    for c in 0..g.in_ch {
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let dst = &mut cols[row * sites..(row + 1) * sites];
                for oy in 0..g.out_h {
                    let src = c * g.in_h * g.in_w + (oy * g.stride + ky) * g.in_w + kx;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        *v = x[src + ox * g.stride];
                    }
                }
            }
        }
    }
}

/// Scatter-adds a `(patch, out_sites)` matrix back onto one input sample.
pub fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let sites = g.out_sites();
    if g.k_h == 1 && g.k_w == 1 && g.stride == 1 {
        dx.iter_mut().zip(cols).for_each(|(d, &c)| *d += c);
        return;
    }
    for c in 0..g.in_ch {
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let src = &cols[row * sites..(row + 1) * sites];
                for oy in 0..g.out_h {
                    let dst = c * g.in_h * g.in_w + (oy * g.stride + ky) * g.in_w + kx;
                    for ox in 0..g.out_w {
                        dx[dst + ox * g.stride] += src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], kernel: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let (patch, sites) = (g.patch(), g.out_sites());
    let mut out = vec![T::zero(); g.batch * g.out_len()];
    par::for_each_chunk_mut(&mut out, g.out_len(), |b, y| {
        let mut cols = vec![T::zero(); patch * sites];
        im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], g, &mut cols);
        for (o, row) in y.chunks_mut(sites).enumerate() {
            row.fill(bias[o]);
        }
        T::gemm(
            g.out_ch,
            patch,
            sites,
            T::one(),
            kernel,
            (patch, 1),
            &cols,
            (sites, 1),
            T::one(),
            y,
            (sites, 1),
        );
    });
    out
}

/// Kernel and bias gradients are empty when parameters were not requested.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_input: bool,
    need_params: bool,
) -> ConvGrads<T> {
    let (patch, sites) = (g.patch(), g.out_sites());
    let per_sample = par::map_indexed(g.batch, |b| {
        let mut cols = vec![T::zero(); patch * sites];
        if need_params {
            im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], g, &mut cols);
        }
        let dy_b = &dy[b * g.out_len()..(b + 1) * g.out_len()];
        let mut dk = vec![T::zero(); if need_params { g.out_ch * patch } else { 0 }];
        // dK = dY (O x sites) * cols^T (sites x patch)
        if need_params {
            T::gemm(
                g.out_ch,
                sites,
                patch,
                T::one(),
                dy_b,
                (sites, 1),
                &cols,
                (1, sites),
                T::zero(),
                &mut dk,
                (patch, 1),
            );
        }
        let dx = need_input.then(|| {
            // dcols = K^T (patch x O) * dY (O x sites)
            T::gemm(
                patch,
                g.out_ch,
                sites,
                T::one(),
                kernel,
                (1, patch),
                dy_b,
                (sites, 1),
                T::zero(),
                &mut cols,
                (sites, 1),
            );
            let mut dx = vec![T::zero(); g.in_len()];
            col2im_add(&cols, g, &mut dx);
            dx
        });
        (dk, dx)
    });
    let mut kernel_grad = vec![T::zero(); if need_params { g.out_ch * patch } else { 0 }];
    let mut input_grad = need_input.then(|| Vec::with_capacity(g.batch * g.in_len()));
    for (dk, dx) in per_sample {
        kernel_grad.iter_mut().zip(&dk).for_each(|(a, &b)| *a += b);
        if let (Some(acc), Some(dx)) = (input_grad.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
    }
    let mut bias_grad = vec![T::zero(); g.out_ch];
    for b in 0..g.batch {
        for (o, acc) in bias_grad.iter_mut().enumerate() {
            let start = b * g.out_len() + o * sites;
            *acc += dy[start..start + sites].iter().copied().sum::<T>();
        }
    }
    ConvGrads {
        input: input_grad,
        kernel: kernel_grad,
        bias: bias_grad,
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Row-wise matrix-vector products are memory bound; below this batch size
/// they beat a blocked GEMM.
pub const SMALL_BATCH: usize = 2;

/// `y = x W^T + b` for `x: (batch, in)`, `W: (out, in)`.
pub fn linear_forward<T: Real>(x: &[T], w: &[T], b: &[T], batch: usize, inp: usize, out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(batch * out);
    if batch <= SMALL_BATCH {
        for xb in x.chunks(inp) {
            y.extend(w.chunks(inp).zip(b).map(|(row, &bias)| bias + dot(xb, row)));
        }
        return y;
    }
    for _ in 0..batch {
        y.extend_from_slice(b);
    }
    T::gemm(
        batch,
        inp,
        out,
        T::one(),
        x,
        (inp, 1),
        w,
        (1, inp),
        T::one(),
        &mut y,
        (out, 1),
    );
    y
}

pub struct LinearGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    batch: usize,
    inp: usize,
    out: usize,
    need_input: bool,
    need_params: bool,
) -> LinearGrads<T> {
    let input = need_input.then(|| {
        let mut dx = vec![T::zero(); batch * inp];
        T::gemm(
            batch,
            out,
            inp,
            T::one(),
            dy,
            (out, 1),
            w,
            (inp, 1),
            T::zero(),
            &mut dx,
            (inp, 1),
        );
        dx
    });
    let mut weight = Vec::new();
    if need_params {
        weight = vec![T::zero(); out * inp];
        T::gemm(
            out,
            batch,
            inp,
            T::one(),
            dy,
            (1, out),
            x,
            (inp, 1),
            T::zero(),
            &mut weight,
            (inp, 1),
        );
    }
    let mut bias = vec![T::zero(); out];
    for row in dy.chunks(out) {
        bias.iter_mut().zip(row).for_each(|(a, &d)| *a += d);
    }
    LinearGrads { input, weight, bias }
}

/// `sign(x) * sqrt(|x|)`, applied to raw Gaussian draws for factorized noise.
pub fn factorized_noise<T: Real>(x: T) -> T {
    x.signum() * x.abs().sqrt()
}

/// Effective noisy weight `mu + sigma * (eps_out outer eps_in)`.
pub fn noisy_weight<T: Real>(mu: &[T], sigma: &[T], eps_in: &[T], eps_out: &[T]) -> Vec<T> {
    let inp = eps_in.len();
    let mut w = vec![T::zero(); mu.len()];
    for (o, &eo) in eps_out.iter().enumerate() {
        let r = o * inp..(o + 1) * inp;
        for (((wv, &m), &s), &ei) in w[r.clone()].iter_mut().zip(&mu[r.clone()]).zip(&sigma[r]).zip(eps_in) {
            *wv = m + s * (eo * ei);
        }
    }
    w
}

/// Noisy layer for tiny batches without materializing the weight:
/// `y = x mu^T + mu_b + eps_out * ((x * eps_in) sigma^T + sigma_b)`.
#[allow(clippy::too_many_arguments)]
pub fn noisy_forward_factored<T: Real>(
    x: &[T],
    mu_w: &[T],
    sigma_w: &[T],
    mu_b: &[T],
    sigma_b: &[T],
    eps_in: &[T],
    eps_out: &[T],
    inp: usize,
) -> Vec<T> {
    let mut y = Vec::with_capacity(x.len() / inp * eps_out.len());
    for xb in x.chunks(inp) {
        let scaled: Vec<T> = xb.iter().zip(eps_in).map(|(&a, &e)| a * e).collect();
        for o in 0..eps_out.len() {
            let r = o * inp..(o + 1) * inp;
            let mean = dot(xb, &mu_w[r.clone()]) + mu_b[o];
            let noise = dot(&scaled, &sigma_w[r]) + sigma_b[o];
            y.push(mean + eps_out[o] * noise);
        }
    }
    y
}

/// `dx = dy W` for tiny batches with `W = mu + sigma * (eps_out outer eps_in)`
/// (or `W = mu` when `noise` is `None`), reading each weight row once.
pub fn noisy_input_grad_factored<T: Real>(
    dy: &[T],
    mu_w: &[T],
    sigma_w: &[T],
    noise: Option<(&[T], &[T])>,
    inp: usize,
    out: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); dy.len() / out * inp];
    for (gb, db) in dy.chunks(out).zip(dx.chunks_mut(inp)) {
        for o in 0..out {
            let r = o * inp..(o + 1) * inp;
            let a = gb[o];
            match noise {
                Some((ei, eo)) => {
                    let c = a * eo[o];
                    for (((d, &m), &s), &e) in db.iter_mut().zip(&mu_w[r.clone()]).zip(&sigma_w[r]).zip(ei) {
                        *d += a * m + c * e * s;
                    }
                }
                None => {
                    for (d, &m) in db.iter_mut().zip(&mu_w[r]) {
                        *d += a * m;
                    }
                }
            }
        }
    }
    dx
}

pub fn noisy_bias<T: Real>(mu: &[T], sigma: &[T], eps_out: &[T]) -> Vec<T> {
    mu.iter().zip(sigma).zip(eps_out).map(|((&m, &s), &e)| m + s * e).collect()
}

pub fn relu<T: Real>(x: T) -> T {
    x.max(T::zero())
}

pub fn elu<T: Real>(x: T) -> T {
    if x >= T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_grad<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Normalizes each channel column `x[:, s]` to unit Euclidean length.
pub fn l2_normalize_channels<T: Real>(x: &[T], channels: usize, sites: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let batch = x.len() / (channels * sites);
    let mut y = vec![T::zero(); x.len()];
    let mut norms = vec![T::zero(); batch * sites];
    for b in 0..batch {
        let xb = &x[b * channels * sites..(b + 1) * channels * sites];
        let yb = &mut y[b * channels * sites..(b + 1) * channels * sites];
        let nb = &mut norms[b * sites..(b + 1) * sites];
        for c in 0..channels {
            for s in 0..sites {
                let v = xb[c * sites + s];
                nb[s] += v * v;
            }
        }
        nb.iter_mut().for_each(|n| *n = (*n + eps).sqrt());
        for c in 0..channels {
            for s in 0..sites {
                yb[c * sites + s] = xb[c * sites + s] / nb[s];
            }
        }
    }
    (y, norms)
}

pub fn l2_normalize_channels_backward<T: Real>(y: &[T], norms: &[T], dy: &[T], channels: usize, sites: usize) -> Vec<T> {
    // dx = (dy - y * <dy, y>) / n
    let batch = y.len() / (channels * sites);
    let mut dx = vec![T::zero(); y.len()];
    for b in 0..batch {
        let off = b * channels * sites;
        let mut dots = vec![T::zero(); sites];
        for c in 0..channels {
            for s in 0..sites {
                dots[s] += dy[off + c * sites + s] * y[off + c * sites + s];
            }
        }
        for c in 0..channels {
            for s in 0..sites {
                let i = off + c * sites + s;
                dx[i] = (dy[i] - y[i] * dots[s]) / norms[b * sites + s];
            }
        }
    }
    dx
}

/// Softmax over each contiguous row of length `width`, max-subtracted.
pub fn softmax_rows<T: Real>(x: &[T], width: usize) -> Vec<T> {
    let mut y = x.to_vec();
    for row in y.chunks_mut(width) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    y
}

pub fn softmax_rows_backward<T: Real>(y: &[T], dy: &[T], width: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks(width).zip(dy.chunks(width)).zip(dx.chunks_mut(width)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    dx
}

pub fn log_softmax_rows<T: Real>(x: &[T], width: usize) -> Vec<T> {
    let mut y = x.to_vec();
    for row in y.chunks_mut(width) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    y
}

pub fn log_softmax_rows_backward<T: Real>(y: &[T], dy: &[T], width: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks(width).zip(dy.chunks(width)).zip(dx.chunks_mut(width)) {
        let total: T = gr.iter().copied().sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = gv - yv.exp() * total;
        }
    }
    dx
}

/// `F[b, c, s] = (sum_n P[b, n, s]) * I[b, c, s]`.
pub fn weight_aggregate<T: Real>(p: &[T], i: &[T], maps: usize, channels: usize, sites: usize) -> Vec<T> {
    let batch = i.len() / (channels * sites);
    let mut f = vec![T::zero(); i.len()];
    for b in 0..batch {
        let weights = summed_maps(&p[b * maps * sites..(b + 1) * maps * sites], maps, sites);
        let off = b * channels * sites;
        for c in 0..channels {
            for s in 0..sites {
                f[off + c * sites + s] = weights[s] * i[off + c * sites + s];
            }
        }
    }
    f
}

fn summed_maps<T: Real>(p: &[T], maps: usize, sites: usize) -> Vec<T> {
    let mut w = vec![T::zero(); sites];
    for n in 0..maps {
        w.iter_mut().zip(&p[n * sites..(n + 1) * sites]).for_each(|(a, &v)| *a += v);
    }
    w
}

/// Returns `(dP, dI)`.
pub fn weight_aggregate_backward<T: Real>(
    p: &[T],
    i: &[T],
    df: &[T],
    maps: usize,
    channels: usize,
    sites: usize,
) -> (Vec<T>, Vec<T>) {
    let batch = i.len() / (channels * sites);
    let mut dp = vec![T::zero(); p.len()];
    let mut di = vec![T::zero(); i.len()];
    for b in 0..batch {
        let weights = summed_maps(&p[b * maps * sites..(b + 1) * maps * sites], maps, sites);
        let off = b * channels * sites;
        let mut site_dot = vec![T::zero(); sites];
        for c in 0..channels {
            for s in 0..sites {
                let k = off + c * sites + s;
                di[k] = df[k] * weights[s];
                site_dot[s] += df[k] * i[k];
            }
        }
        for n in 0..maps {
            dp[(b * maps + n) * sites..(b * maps + n + 1) * sites].copy_from_slice(&site_dot);
        }
    }
    (dp, di)
}

/// Dueling combination in logit space:
/// `out[b, a, k] = v[b, k] + adv[b, a, k] - mean_a adv[b, a, k]`.
pub fn dueling<T: Real>(v: &[T], adv: &[T], actions: usize, atoms: usize) -> Vec<T> {
    let batch = v.len() / atoms;
    let inv = T::one() / T::lit(actions as f64);
    let mut out = vec![T::zero(); adv.len()];
    for b in 0..batch {
        let a_b = &adv[b * actions * atoms..(b + 1) * actions * atoms];
        for k in 0..atoms {
            let mean = (0..actions).map(|a| a_b[a * atoms + k]).sum::<T>() * inv;
            for a in 0..actions {
                out[(b * actions + a) * atoms + k] = v[b * atoms + k] + a_b[a * atoms + k] - mean;
            }
        }
    }
    out
}

/// Returns `(dV, dAdv)`.
pub fn dueling_backward<T: Real>(dy: &[T], actions: usize, atoms: usize) -> (Vec<T>, Vec<T>) {
    let batch = dy.len() / (actions * atoms);
    let inv = T::one() / T::lit(actions as f64);
    let mut dv = vec![T::zero(); batch * atoms];
    let mut dadv = vec![T::zero(); dy.len()];
    for b in 0..batch {
        for k in 0..atoms {
            let total = (0..actions).map(|a| dy[(b * actions + a) * atoms + k]).sum::<T>();
            dv[b * atoms + k] = total;
            for a in 0..actions {
                let i = (b * actions + a) * atoms + k;
                dadv[i] = dy[i] - total * inv;
            }
        }
    }
    (dv, dadv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_geometry_chain() {
        let g1 = ConvGeom::new(&[4, 84, 84], &[32, 4, 8, 8], 4).unwrap();
        assert_eq!((g1.out_h, g1.out_w), (20, 20));
        let g2 = ConvGeom::new(&[32, 20, 20], &[64, 32, 4, 4], 2).unwrap();
        assert_eq!((g2.out_h, g2.out_w), (9, 9));
        let g3 = ConvGeom::new(&[64, 9, 9], &[64, 64, 3, 3], 1).unwrap();
        assert_eq!((g3.out_h, g3.out_w), (7, 7));
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        assert!(ConvGeom::new(&[3, 5, 5], &[2, 4, 3, 3], 1).is_err());
        assert!(ConvGeom::new(&[4, 2, 5], &[2, 4, 3, 3], 1).is_err());
        assert!(ConvGeom::new(&[4, 5, 5], &[2, 4, 3], 1).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let g = ConvGeom::new(&[2, 5, 6], &[3, 2, 3, 2], 2).unwrap();
        let x: Vec<f64> = (0..g.in_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..3 * g.patch()).map(|i| (i as f64 * 0.11).cos()).collect();
        let b = [0.1, -0.2, 0.3];
        let y = conv2d_forward(&x, &k, &b, &g);
        for o in 0..3 {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = b[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..2 {
                                acc += k[((o * 2 + c) * 3 + ky) * 2 + kx] * x[(c * 5 + oy * 2 + ky) * 6 + ox * 2 + kx];
                            }
                        }
                    }
                    let got = y[(o * g.out_h + oy) * g.out_w + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn factorized_noise_transform() {
        assert_eq!(factorized_noise(4.0f64), 2.0);
        assert_eq!(factorized_noise(-9.0f64), -3.0);
    }

    #[test]
    fn activations() {
        assert_eq!(relu(-2.0f64), 0.0);
        assert_eq!(relu(3.0f64), 3.0);
        assert_eq!(elu(0.0f64), 0.0);
        assert!((elu(-20.0f64) + 1.0).abs() < 1e-8);
        assert_eq!(sigmoid(0.0f64), 0.5);
    }

    #[test]
    fn l2_norm_examples() {
        let (y, _) = l2_normalize_channels(&[3.0f64, 4.0], 2, 1, 1e-12);
        assert!((y[0] - 0.6).abs() < 1e-12 && (y[1] - 0.8).abs() < 1e-12);
        let (z, _) = l2_normalize_channels(&[0.0f64, 0.0], 2, 1, 1e-12);
        assert_eq!(z, vec![0.0, 0.0]);
        let (s, _) = l2_normalize_channels(&[21.0f64, 28.0], 2, 1, 1e-12);
        assert!((s[0] - y[0]).abs() < 1e-12 && (s[1] - y[1]).abs() < 1e-12);
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let y = softmax_rows(&[0.3f64; 49], 49);
        assert!(y.iter().all(|&v| (v - 1.0 / 49.0).abs() < 1e-12));
        assert!((y[0] - 0.0204082).abs() < 1e-7);
        let x: Vec<f64> = (0..49).map(|i| (i as f64).sin()).collect();
        let shifted: Vec<f64> = x.iter().map(|v| v + 12.5).collect();
        let (a, b) = (softmax_rows(&x, 49), softmax_rows(&shifted, 49));
        assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn dueling_is_shift_invariant_per_atom_column() {
        let v = [0.1f64, 0.2, 0.3];
        let adv = [1.0f64, 2.0, 3.0, -1.0, 0.5, 0.0];
        let mut shifted = adv;
        shifted[1] += 5.0;
        shifted[4] += 5.0;
        let (a, b) = (dueling(&v, &adv, 2, 3), dueling(&v, &shifted, 2, 3));
        assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
    }
}
