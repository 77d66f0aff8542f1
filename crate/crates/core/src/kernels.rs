//! Numeric kernels behind the differentiable ops in [`crate::autograd`].
//!
//! Everything works on NCHW tensors and is single threaded so that seeded
//! runs reproduce bit for bit.

use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (n, ci, h, w) = x.dims4()?;
        let (co, wci, kh, kw) = weight.dims4()?;
        ensure!(wci == ci, "conv2d: input has {ci} channels, weight expects {wci}");
        ensure!(kh == kw, "conv2d: only square kernels are supported");
        ensure!(stride >= 1, "conv2d: stride must be positive");
        ensure!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "conv2d: kernel {kh} larger than padded input {h}x{w}"
        );
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            ci,
            h,
            w,
            co,
            k: kh,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.ci * self.k * self.k
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad` lies inside the row.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let off = kx as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let hi_excl = (g.w as isize - off + s - 1) / s;
    let hi = hi_excl.clamp(0, g.wo as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let out_hw = g.ho * g.wo;
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * out_hw..(row + 1) * out_hw];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let seg = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    let ix0 = (lo * g.stride + kx) - g.pad;
                    if g.stride == 1 {
                        seg[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (d, s) in seg[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let out_hw = g.ho * g.wo;
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * out_hw..(row + 1) * out_hw];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let ix0 = (lo * g.stride + kx) - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let seg = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &s) in dst[ix0..ix0 + seg.len()].iter_mut().zip(seg) {
                            *d = *d + s;
                        }
                    } else {
                        for (d, &s) in dst[ix0..].iter_mut().step_by(g.stride).zip(seg) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, weight, stride, pad)?;
    if let Some(b) = bias {
        ensure!(b.len() == g.co, "conv2d: bias length {} != {}", b.len(), g.co);
    }
    let in_len = g.ci * g.h * g.w;
    let out_hw = g.ho * g.wo;
    let kk = g.patch_len();
    let mut out = Tensor::zeros(&[g.n, g.co, g.ho, g.wo]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * out_hw]
    };
    for s in 0..g.n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        let ys = &mut out.data_mut()[s * g.co * out_hw..(s + 1) * g.co * out_hw];
        unsafe {
            T::gemm(
                g.co,
                kk,
                out_hw,
                weight.data().as_ptr(),
                kk as isize,
                1,
                src.as_ptr(),
                out_hw as isize,
                1,
                T::zero(),
                ys.as_mut_ptr(),
                out_hw as isize,
                1,
            );
        }
        if let Some(b) = bias {
            for (c, row) in ys.chunks_exact_mut(out_hw).enumerate() {
                let bv = b.data()[c];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(x, weight, stride, pad)?;
    let in_len = g.ci * g.h * g.w;
    let out_hw = g.ho * g.wo;
    let kk = g.patch_len();
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[g.co]);
    let mut cols = vec![T::zero(); kk * out_hw];
    let mut gcols = vec![T::zero(); kk * out_hw];
    for s in 0..g.n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let gys = &gy.data()[s * g.co * out_hw..(s + 1) * g.co * out_hw];
        for (c, row) in gys.chunks_exact(out_hw).enumerate() {
            let acc: T = row.iter().copied().sum();
            gb.data_mut()[c] = gb.data()[c] + acc;
        }
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        // grad_weight += gy · colsᵀ
        unsafe {
            T::gemm(
                g.co,
                out_hw,
                kk,
                gys.as_ptr(),
                out_hw as isize,
                1,
                src.as_ptr(),
                1,
                out_hw as isize,
                T::one(),
                gw.data_mut().as_mut_ptr(),
                kk as isize,
                1,
            );
        }
        // grad_cols = wᵀ · gy
        let gxs = &mut gx.data_mut()[s * in_len..(s + 1) * in_len];
        if g.is_pointwise() {
            unsafe {
                T::gemm(
                    kk,
                    g.co,
                    out_hw,
                    weight.data().as_ptr(),
                    1,
                    kk as isize,
                    gys.as_ptr(),
                    out_hw as isize,
                    1,
                    T::zero(),
                    gxs.as_mut_ptr(),
                    out_hw as isize,
                    1,
                );
            }
        } else {
            unsafe {
                T::gemm(
                    kk,
                    g.co,
                    out_hw,
                    weight.data().as_ptr(),
                    1,
                    kk as isize,
                    gys.as_ptr(),
                    out_hw as isize,
                    1,
                    T::zero(),
                    gcols.as_mut_ptr(),
                    out_hw as isize,
                    1,
                );
            }
            col2im(&gcols, &g, gxs);
        }
    }
    Ok((gx, gw, gb))
}

/// `y = x · wᵀ + b` for `x: (n, d)`, `w: (o, d)`.
pub(crate) fn linear_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    let (o, wd) = weight.dims2()?;
    ensure!(d == wd, "linear: input width {d} != weight width {wd}");
    ensure!(bias.len() == o, "linear: bias length {} != {o}", bias.len());
    let mut out = Tensor::zeros(&[n, o]);
    for row in out.data_mut().chunks_exact_mut(o) {
        row.copy_from_slice(bias.data());
    }
    unsafe {
        T::gemm(
            n,
            d,
            o,
            x.data().as_ptr(),
            d as isize,
            1,
            weight.data().as_ptr(),
            1,
            d as isize,
            T::one(),
            out.data_mut().as_mut_ptr(),
            o as isize,
            1,
        );
    }
    Ok(out)
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, d) = x.dims2()?;
    let (o, _) = weight.dims2()?;
    let mut gx = Tensor::zeros(&[n, d]);
    let mut gw = Tensor::zeros(&[o, d]);
    let mut gb = Tensor::zeros(&[o]);
    unsafe {
        T::gemm(
            n,
            o,
            d,
            gy.data().as_ptr(),
            o as isize,
            1,
            weight.data().as_ptr(),
            d as isize,
            1,
            T::zero(),
            gx.data_mut().as_mut_ptr(),
            d as isize,
            1,
        );
        T::gemm(
            o,
            n,
            d,
            gy.data().as_ptr(),
            1,
            o as isize,
            x.data().as_ptr(),
            d as isize,
            1,
            T::zero(),
            gw.data_mut().as_mut_ptr(),
            d as isize,
            1,
        );
    }
    for row in gy.data().chunks_exact(o) {
        for (g, &v) in gb.data_mut().iter_mut().zip(row) {
            *g = *g + v;
        }
    }
    Ok((gx, gw, gb))
}

/// Normalized activations and per-group reciprocal standard deviations.
pub(crate) struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn group_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (n, c, h, w) = x.dims4()?;
    ensure!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible into {groups} groups");
    ensure!(gamma.len() == c && beta.len() == c, "group_norm: affine parameters must have {c} entries");
    let hw = h * w;
    let block = (c / groups) * hw;
    let count = T::lit(block as f64);
    let mut xhat = Tensor::zeros(x.shape());
    let mut rstd = Vec::with_capacity(n * groups);
    for (src, dst) in x.data().chunks_exact(block).zip(xhat.data_mut().chunks_exact_mut(block)) {
        let mean = src.iter().copied().sum::<T>() / count;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * r;
        }
    }
    let mut y = xhat.clone();
    for (i, plane) in y.data_mut().chunks_exact_mut(hw).enumerate() {
        let (gm, bt) = (gamma.data()[i % c], beta.data()[i % c]);
        plane.iter_mut().for_each(|v| *v = *v * gm + bt);
    }
    Ok((y, NormCache { xhat, rstd }))
}

pub(crate) fn group_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    groups: usize,
    gamma: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (_, c, h, w) = gy.dims4()?;
    let hw = h * w;
    let per_group = c / groups;
    let count = T::lit((per_group * hw) as f64);
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    // gh = gy · γ, reused for the input gradient
    let mut gx = gy.clone();
    for (i, (plane, xh)) in gx
        .data_mut()
        .chunks_exact_mut(hw)
        .zip(cache.xhat.data().chunks_exact(hw))
        .enumerate()
    {
        let ch = i % c;
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        for (g, &xv) in plane.iter_mut().zip(xh) {
            sg = sg + *g;
            sgx = sgx + *g * xv;
            *g = *g * gamma.data()[ch];
        }
        gbeta.data_mut()[ch] = gbeta.data()[ch] + sg;
        ggamma.data_mut()[ch] = ggamma.data()[ch] + sgx;
    }
    let block = per_group * hw;
    for (bi, (ghs, xhs)) in gx
        .data_mut()
        .chunks_exact_mut(block)
        .zip(cache.xhat.data().chunks_exact(block))
        .enumerate()
    {
        let r = cache.rstd[bi];
        let (mut m1, mut m2) = (T::zero(), T::zero());
        for (&gh, &xh) in ghs.iter().zip(xhs) {
            m1 = m1 + gh;
            m2 = m2 + gh * xh;
        }
        m1 = m1 / count;
        m2 = m2 / count;
        for (d, &xh) in ghs.iter_mut().zip(xhs) {
            *d = r * (*d - m1 - xh * m2);
        }
    }
    Ok((gx, ggamma, gbeta))
}

/// Zero-mean, unit-variance normalization over channels at every spatial position.
pub(crate) fn channel_norm_forward<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<NormCache<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let count = T::lit(c as f64);
    let mut xhat = Tensor::zeros(x.shape());
    let mut rstd = Vec::with_capacity(n * hw);
    for s in 0..n {
        let base = s * c * hw;
        for p in 0..hw {
            let at = |ch: usize| base + ch * hw + p;
            let mean = (0..c).map(|ch| x.data()[at(ch)]).sum::<T>() / count;
            let var = (0..c)
                .map(|ch| {
                    let d = x.data()[at(ch)] - mean;
                    d * d
                })
                .sum::<T>()
                / count;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for ch in 0..c {
                xhat.data_mut()[at(ch)] = (x.data()[at(ch)] - mean) * r;
            }
        }
    }
    Ok(NormCache { xhat, rstd })
}

pub(crate) fn channel_norm_backward<T: Scalar>(cache: &NormCache<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = gy.dims4()?;
    let hw = h * w;
    let count = T::lit(c as f64);
    let mut gx = Tensor::zeros(gy.shape());
    for s in 0..n {
        let base = s * c * hw;
        for p in 0..hw {
            let at = |ch: usize| base + ch * hw + p;
            let r = cache.rstd[s * hw + p];
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for ch in 0..c {
                let g = gy.data()[at(ch)];
                m1 = m1 + g;
                m2 = m2 + g * cache.xhat.data()[at(ch)];
            }
            m1 = m1 / count;
            m2 = m2 / count;
            for ch in 0..c {
                let i = at(ch);
                gx.data_mut()[i] = r * (gy.data()[i] - m1 - cache.xhat.data()[i] * m2);
            }
        }
    }
    Ok(gx)
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub(crate) fn upsample2x_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let (src, dst) = (x.data(), y.data_mut());
    for p in 0..n * c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[(p * 2 * h + i) * 2 * w + j] = src[(p * h + i / 2) * w + j / 2];
            }
        }
    }
    Ok(y)
}

pub(crate) fn upsample2x_backward<T: Scalar>(gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h2, w2) = gy.dims4()?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    let (src, dst) = (gy.data(), gx.data_mut());
    for p in 0..n * c {
        for i in 0..h2 {
            for j in 0..w2 {
                let d = &mut dst[(p * h + i / 2) * w + j / 2];
                *d = *d + src[(p * h2 + i) * w2 + j];
            }
        }
    }
    Ok(gx)
}

pub(crate) fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    ensure!(
        n == nb && h == hb && w == wb,
        "concat: incompatible shapes {:?} and {:?}",
        a.shape(),
        b.shape()
    );
    let (la, lb) = (ca * h * w, cb * h * w);
    let mut data = Vec::with_capacity(n * (la + lb));
    for s in 0..n {
        data.extend_from_slice(&a.data()[s * la..(s + 1) * la]);
        data.extend_from_slice(&b.data()[s * lb..(s + 1) * lb]);
    }
    Tensor::from_vec(&[n, ca + cb, h, w], data)
}

pub(crate) fn split_channels<T: Scalar>(g: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = g.dims4()?;
    let cb = c - ca;
    let (la, lb) = (ca * h * w, cb * h * w);
    let mut a = Vec::with_capacity(n * la);
    let mut b = Vec::with_capacity(n * lb);
    for s in 0..n {
        let chunk = &g.data()[s * (la + lb)..(s + 1) * (la + lb)];
        a.extend_from_slice(&chunk[..la]);
        b.extend_from_slice(&chunk[la..]);
    }
    Ok((Tensor::from_vec(&[n, ca, h, w], a)?, Tensor::from_vec(&[n, cb, h, w], b)?))
}
