//! Reference kernels over NHWC buffers (batch 1).
//!
//! Accumulation order inside one output element is fixed: kernel rows, then
//! kernel columns, then input channels, with the bias added last. Results are
//! therefore bitwise reproducible for a given element type.

use std::ops::{AddAssign, Mul};

use num_traits::Zero;

use crate::tensor::Real;

/// Element type of the forward kernels: floats, or i32 for the integer
/// executor (int8 operands widened, int32 accumulation).
pub(crate) trait Scalar: Copy + Zero + AddAssign + Mul<Output = Self> + PartialEq {}

impl<T: Copy + Zero + AddAssign + Mul<Output = T> + PartialEq> Scalar for T {}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub ih: usize,
    pub iw: usize,
    pub ic: usize,
    pub oh: usize,
    pub ow: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    /// Input row/col read by output `o` at kernel offset `k`, if inside.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let p = (o * stride + k).checked_sub(pad)?;
        (p < len).then_some(p)
    }
}

pub(crate) fn conv2d<T: Scalar>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let (ic, oc) = (g.ic, g.oc);
    let mut out = vec![T::zero(); g.oh * g.ow * oc];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let acc = &mut out[(oy * g.ow + ox) * oc..][..oc];
            for ky in 0..g.kh {
                let Some(iy) = ConvGeom::src(oy, ky, g.sh, g.pad_top, g.ih) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = ConvGeom::src(ox, kx, g.sw, g.pad_left, g.iw) else { continue };
                    let xrow = &x[(iy * g.iw + ix) * ic..][..ic];
                    let wk = &w[(ky * g.kw + kx) * ic * oc..][..ic * oc];
                    for (c, &v) in xrow.iter().enumerate() {
                        if v == T::zero() {
                            continue;
                        }
                        let wrow = &wk[c * oc..][..oc];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += v * wv;
                        }
                    }
                }
            }
            for (a, &bv) in acc.iter_mut().zip(b) {
                *a += bv;
            }
        }
    }
    out
}

/// Accumulates input, kernel and bias gradients of a convolution.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &ConvGeom,
    gx: Option<&mut [T]>,
    gw: &mut [T],
    gb: &mut [T],
) {
    let (ic, oc) = (g.ic, g.oc);
    // kernel transposed to [kh, kw, oc, ic] so the input-gradient inner loop
    // runs over contiguous input channels
    let mut wt = vec![T::zero(); w.len()];
    for k in 0..g.kh * g.kw {
        for c in 0..ic {
            for o in 0..oc {
                wt[(k * oc + o) * ic + c] = w[(k * ic + c) * oc + o];
            }
        }
    }
    let mut gx = gx;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let grow = &gy[(oy * g.ow + ox) * oc..][..oc];
            for (b, &gv) in gb.iter_mut().zip(grow) {
                *b += gv;
            }
            for ky in 0..g.kh {
                let Some(iy) = ConvGeom::src(oy, ky, g.sh, g.pad_top, g.ih) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = ConvGeom::src(ox, kx, g.sw, g.pad_left, g.iw) else { continue };
                    let base = (iy * g.iw + ix) * ic;
                    let k = ky * g.kw + kx;
                    let xrow = &x[base..][..ic];
                    let gwk = &mut gw[k * ic * oc..][..ic * oc];
                    for (c, &v) in xrow.iter().enumerate() {
                        if v == T::zero() {
                            continue;
                        }
                        for (a, &gv) in gwk[c * oc..][..oc].iter_mut().zip(grow) {
                            *a += v * gv;
                        }
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        let gxrow = &mut gx[base..][..ic];
                        let wtk = &wt[k * oc * ic..][..oc * ic];
                        for (o, &gv) in grow.iter().enumerate() {
                            if gv == T::zero() {
                                continue;
                            }
                            for (a, &wv) in gxrow.iter_mut().zip(&wtk[o * ic..][..ic]) {
                                *a += gv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct TConvGeom {
    pub ih: usize,
    pub iw: usize,
    pub ic: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl TConvGeom {
    pub fn oh(&self) -> usize {
        self.ih * self.stride
    }
    pub fn ow(&self) -> usize {
        self.iw * self.stride
    }
    #[inline]
    fn dst(&self, i: usize, k: usize, len: usize) -> Option<usize> {
        let p = (i * self.stride + k).checked_sub(self.pad)?;
        (p < len).then_some(p)
    }
}

/// Transposed convolution: each input pixel scatters `x[c] * w[ky, kx, c, :]`
/// into output position `(iy * s + ky - pad, ix * s + kx - pad)`.
pub(crate) fn tconv2d<T: Scalar>(x: &[T], w: &[T], b: &[T], g: &TConvGeom) -> Vec<T> {
    let (ic, oc, oh, ow) = (g.ic, g.oc, g.oh(), g.ow());
    let mut out = vec![T::zero(); oh * ow * oc];
    for iy in 0..g.ih {
        for ix in 0..g.iw {
            let xrow = &x[(iy * g.iw + ix) * ic..][..ic];
            for ky in 0..g.kh {
                let Some(oy) = g.dst(iy, ky, oh) else { continue };
                for kx in 0..g.kw {
                    let Some(ox) = g.dst(ix, kx, ow) else { continue };
                    let acc = &mut out[(oy * ow + ox) * oc..][..oc];
                    let wk = &w[(ky * g.kw + kx) * ic * oc..][..ic * oc];
                    for (c, &v) in xrow.iter().enumerate() {
                        if v == T::zero() {
                            continue;
                        }
                        for (a, &wv) in acc.iter_mut().zip(&wk[c * oc..][..oc]) {
                            *a += v * wv;
                        }
                    }
                }
            }
        }
    }
    for px in out.chunks_exact_mut(oc) {
        for (a, &bv) in px.iter_mut().zip(b) {
            *a += bv;
        }
    }
    out
}

pub(crate) fn tconv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &TConvGeom,
    gx: Option<&mut [T]>,
    gw: &mut [T],
    gb: &mut [T],
) {
    let (ic, oc, oh, ow) = (g.ic, g.oc, g.oh(), g.ow());
    for grow in gy.chunks_exact(oc) {
        for (b, &gv) in gb.iter_mut().zip(grow) {
            *b += gv;
        }
    }
    let mut gx = gx;
    for iy in 0..g.ih {
        for ix in 0..g.iw {
            let base = (iy * g.iw + ix) * ic;
            for ky in 0..g.kh {
                let Some(oy) = g.dst(iy, ky, oh) else { continue };
                for kx in 0..g.kw {
                    let Some(ox) = g.dst(ix, kx, ow) else { continue };
                    let grow = &gy[(oy * ow + ox) * oc..][..oc];
                    let k = ky * g.kw + kx;
                    for c in 0..ic {
                        let v = x[base + c];
                        let wrow = &w[(k * ic + c) * oc..][..oc];
                        if let Some(gx) = gx.as_deref_mut() {
                            let mut s = T::zero();
                            for (&wv, &gv) in wrow.iter().zip(grow) {
                                s += wv * gv;
                            }
                            gx[base + c] += s;
                        }
                        if v != T::zero() {
                            for (a, &gv) in gw[(k * ic + c) * oc..][..oc].iter_mut().zip(grow) {
                                *a += v * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn dense<T: Scalar>(x: &[T], w: &[T], b: &[T], units: usize) -> Vec<T> {
    let mut out = vec![T::zero(); units];
    for (i, &v) in x.iter().enumerate() {
        if v == T::zero() {
            continue;
        }
        for (a, &wv) in out.iter_mut().zip(&w[i * units..][..units]) {
            *a += v * wv;
        }
    }
    for (a, &bv) in out.iter_mut().zip(b) {
        *a += bv;
    }
    out
}

pub(crate) fn dense_backward<T: Real>(
    x: &[T],
    w: &[T],
    gy: &[T],
    units: usize,
    gx: Option<&mut [T]>,
    gw: &mut [T],
    gb: &mut [T],
) {
    for (b, &gv) in gb.iter_mut().zip(gy) {
        *b += gv;
    }
    for (i, &v) in x.iter().enumerate() {
        if v == T::zero() {
            continue;
        }
        for (a, &gv) in gw[i * units..][..units].iter_mut().zip(gy) {
            *a += v * gv;
        }
    }
    if let Some(gx) = gx {
        for (i, gxi) in gx.iter_mut().enumerate() {
            let mut s = T::zero();
            for (&wv, &gv) in w[i * units..][..units].iter().zip(gy) {
                s += wv * gv;
            }
            *gxi += s;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub ih: usize,
    pub iw: usize,
    pub c: usize,
    pub oh: usize,
    pub ow: usize,
    pub ph: usize,
    pub pw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Max pooling; the returned index is the first maximal input position in
/// window scan order.
pub(crate) fn max_pool<T: PartialOrd + Copy>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<u32>) {
    let c = g.c;
    let mut out = Vec::with_capacity(g.oh * g.ow * c);
    let mut arg = Vec::with_capacity(g.oh * g.ow * c);
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            for ch in 0..c {
                let mut best: Option<(T, usize)> = None;
                for ky in 0..g.ph {
                    let Some(iy) = ConvGeom::src(oy, ky, g.sh, g.pad_top, g.ih) else { continue };
                    for kx in 0..g.pw {
                        let Some(ix) = ConvGeom::src(ox, kx, g.sw, g.pad_left, g.iw) else { continue };
                        let idx = (iy * g.iw + ix) * c + ch;
                        let v = x[idx];
                        if best.is_none_or(|(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                let (v, idx) = best.expect("pool window is never empty");
                out.push(v);
                arg.push(idx as u32);
            }
        }
    }
    (out, arg)
}
