//! Forward and backward passes of the kernel's primitive operations.
//!
//! Every reduction accumulates in `f64` in a fixed order, so results are
//! bit-reproducible for identical inputs regardless of the element type.

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `y = x W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
pub fn dense_forward<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, din, dout) = dense_dims(x, w, b)?;
    let xd = x.data();
    let wd = w.data();
    let mut out = Vec::with_capacity(n * dout);
    let mut acc = vec![0f64; dout];
    for r in 0..n {
        for (a, bv) in acc.iter_mut().zip(b.data()) {
            *a = bv.widen();
        }
        for i in 0..din {
            let xi = xd[r * din + i].widen();
            if xi == 0.0 {
                continue;
            }
            let wrow = &wd[i * dout..(i + 1) * dout];
            for (a, wv) in acc.iter_mut().zip(wrow) {
                *a += xi * wv.widen();
            }
        }
        out.extend(acc.iter().map(|&v| F::narrow(v)));
    }
    Tensor::new(vec![n, dout], out)
}

pub struct DenseGrads<F: Scalar> {
    pub dx: Tensor<F>,
    pub dw: Tensor<F>,
    pub db: Tensor<F>,
}

pub fn dense_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    dy: &Tensor<F>,
) -> Result<DenseGrads<F>> {
    let (n, din, dout) = dense_dims(x, w, b)?;
    if dy.shape() != [n, dout] {
        return Err(Error::shape(
            "dense_backward",
            format!("dy {:?}, expected [{n}, {dout}]", dy.shape()),
        ));
    }
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    let mut dw = vec![0f64; din * dout];
    let mut db = vec![0f64; dout];
    let mut dx = Vec::with_capacity(n * din);
    let mut dyrow = vec![0f64; dout];
    for r in 0..n {
        for (d, v) in dyrow.iter_mut().zip(&dyd[r * dout..(r + 1) * dout]) {
            *d = v.widen();
        }
        for (acc, d) in db.iter_mut().zip(&dyrow) {
            *acc += d;
        }
        for i in 0..din {
            let xi = xd[r * din + i].widen();
            let wrow = &wd[i * dout..(i + 1) * dout];
            let mut s = 0f64;
            for (wv, d) in wrow.iter().zip(&dyrow) {
                s += wv.widen() * d;
            }
            dx.push(F::narrow(s));
            if xi != 0.0 {
                for (acc, d) in dw[i * dout..(i + 1) * dout].iter_mut().zip(&dyrow) {
                    *acc += xi * d;
                }
            }
        }
    }
    Ok(DenseGrads {
        dx: Tensor::new(vec![n, din], dx)?,
        dw: Tensor::from_f64(&[din, dout], &dw)?,
        db: Tensor::from_f64(&[dout], &db)?,
    })
}

fn dense_dims<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<(usize, usize, usize)> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || b.shape() != [ws[1]] {
        return Err(Error::shape(
            "dense",
            format!("x {xs:?}, W {ws:?}, b {:?}", b.shape()),
        ));
    }
    Ok((xs[0], xs[1], ws[1]))
}

/// Raster-causal mask flavour. Type A hides the centre tap, type B keeps it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    A,
    B,
}

/// Per-tap visibility for a `k x k` kernel, row-major.
pub fn causal_taps(k: usize, kind: MaskKind) -> Vec<bool> {
    let c = k / 2;
    let mut taps = Vec::with_capacity(k * k);
    for ky in 0..k {
        for kx in 0..k {
            let visible = ky < c
                || (ky == c
                    && match kind {
                        MaskKind::A => kx < c,
                        MaskKind::B => kx <= c,
                    });
            taps.push(visible);
        }
    }
    taps
}

/// Binary mask with the full kernel shape `[cout, cin, k, k]`.
pub fn causal_mask<F: Scalar>(cout: usize, cin: usize, k: usize, kind: MaskKind) -> Tensor<F> {
    let taps = causal_taps(k, kind);
    let mut data = Vec::with_capacity(cout * cin * k * k);
    for _ in 0..cout * cin {
        data.extend(taps.iter().map(|&t| if t { F::one() } else { F::zero() }));
    }
    Tensor::new(vec![cout, cin, k, k], data).expect("mask shape is consistent")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn same(k: usize) -> Self {
        ConvGeometry {
            stride: 1,
            padding: k / 2,
        }
    }

    pub fn output_size(&self, input: usize, k: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < k || self.stride == 0 {
            return None;
        }
        Some((padded - k) / self.stride + 1)
    }
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims<F: Scalar>(
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    geom: ConvGeometry,
    mask: Option<&Tensor<F>>,
) -> Result<ConvDims> {
    let (xs, ks) = (x.shape(), kernel.shape());
    if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || ks[2] != ks[3] {
        return Err(Error::shape("conv2d", format!("x {xs:?}, kernel {ks:?}")));
    }
    if let Some(m) = mask {
        if m.shape() != ks {
            return Err(Error::shape(
                "conv2d",
                format!("mask {:?} != kernel {ks:?}", m.shape()),
            ));
        }
    }
    let k = ks[2];
    let ho = geom.output_size(xs[2], k);
    let wo = geom.output_size(xs[3], k);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(ConvDims {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ks[0],
            k,
            ho,
            wo,
        }),
        _ => Err(Error::shape(
            "conv2d",
            format!("kernel {k} does not fit input {xs:?} with {geom:?}"),
        )),
    }
}

/// Effective weights (kernel ⊙ mask) and the taps that carry any weight.
fn masked_weights<F: Scalar>(kernel: &Tensor<F>, mask: Option<&Tensor<F>>, kk: usize) -> (Vec<f64>, Vec<bool>) {
    let w: Vec<f64> = match mask {
        Some(m) => kernel
            .data()
            .iter()
            .zip(m.data())
            .map(|(w, m)| if m.is_zero() { 0.0 } else { w.widen() })
            .collect(),
        None => kernel.to_f64_vec(),
    };
    let active = match mask {
        Some(m) => (0..kk)
            .map(|t| m.data().chunks(kk).any(|c| !c[t].is_zero()))
            .collect(),
        None => vec![true; kk],
    };
    (w, active)
}

/// Gathers the input patch for one tap into `col[cin][ho*wo]` (zeros at padding).
fn gather_tap<F: Scalar>(xs: &[F], d: &ConvDims, geom: ConvGeometry, ky: usize, kx: usize, col: &mut [f64]) {
    let p = d.ho * d.wo;
    for ci in 0..d.cin {
        let plane = &xs[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        let dst = &mut col[ci * p..(ci + 1) * p];
        for oy in 0..d.ho {
            let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
            for ox in 0..d.wo {
                let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                dst[oy * d.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < d.h && (ix as usize) < d.w {
                    plane[iy as usize * d.w + ix as usize].widen()
                } else {
                    0.0
                };
            }
        }
    }
}

/// 2-D convolution over `x: [n, cin, h, w]` with `kernel: [cout, cin, k, k]`.
///
/// Taps whose mask is zero across all channel pairs are skipped outright, so
/// inputs seen only through masked taps cannot influence the output bits.
pub fn conv2d_forward<F: Scalar>(
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    geom: ConvGeometry,
    mask: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    let d = conv_dims(x, kernel, geom, mask)?;
    if let Some(b) = bias {
        if b.shape() != [d.cout] {
            return Err(Error::shape("conv2d", format!("bias {:?}", b.shape())));
        }
    }
    let kk = d.k * d.k;
    let (w, active) = masked_weights(kernel, mask, kk);
    let p = d.ho * d.wo;
    let in_len = d.cin * d.h * d.w;
    let mut out = Vec::with_capacity(d.n * d.cout * p);
    let mut col = vec![0f64; d.cin * p];
    let mut acc = vec![0f64; d.cout * p];
    for s in 0..d.n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        for co in 0..d.cout {
            let bv = bias.map_or(0.0, |b| b.data()[co].widen());
            acc[co * p..(co + 1) * p].fill(bv);
        }
        for ky in 0..d.k {
            for kx in 0..d.k {
                let tap = ky * d.k + kx;
                if !active[tap] {
                    continue;
                }
                gather_tap(xs, &d, geom, ky, kx, &mut col);
                for co in 0..d.cout {
                    let dst = &mut acc[co * p..(co + 1) * p];
                    for ci in 0..d.cin {
                        let wv = w[(co * d.cin + ci) * kk + tap];
                        if wv == 0.0 {
                            continue;
                        }
                        for (a, c) in dst.iter_mut().zip(&col[ci * p..(ci + 1) * p]) {
                            *a += wv * c;
                        }
                    }
                }
            }
        }
        out.extend(acc.iter().map(|&v| F::narrow(v)));
    }
    Tensor::new(vec![d.n, d.cout, d.ho, d.wo], out)
}

/// Masked convolution; `mask` must have the kernel's shape.
pub fn masked_conv2d_forward<F: Scalar>(
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    mask: &Tensor<F>,
) -> Result<Tensor<F>> {
    let k = kernel.shape().get(2).copied().unwrap_or(1);
    conv2d_forward(x, kernel, None, ConvGeometry::same(k), Some(mask))
}

pub struct ConvGrads<F: Scalar> {
    pub dx: Tensor<F>,
    pub dw: Tensor<F>,
    pub db: Tensor<F>,
}

pub fn conv2d_backward<F: Scalar>(
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    geom: ConvGeometry,
    mask: Option<&Tensor<F>>,
    dy: &Tensor<F>,
) -> Result<ConvGrads<F>> {
    let d = conv_dims(x, kernel, geom, mask)?;
    if dy.shape() != [d.n, d.cout, d.ho, d.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("dy {:?}", dy.shape()),
        ));
    }
    let kk = d.k * d.k;
    let (w, active) = masked_weights(kernel, mask, kk);
    let p = d.ho * d.wo;
    let in_len = d.cin * d.h * d.w;
    let mut dw = vec![0f64; d.cout * d.cin * kk];
    let mut db = vec![0f64; d.cout];
    let mut dx = vec![0f64; d.n * in_len];
    let mut col = vec![0f64; d.cin * p];
    let mut dcol = vec![0f64; d.cin * p];
    let mut g = vec![0f64; d.cout * p];
    for s in 0..d.n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        for (gv, v) in g.iter_mut().zip(&dy.data()[s * d.cout * p..(s + 1) * d.cout * p]) {
            *gv = v.widen();
        }
        for co in 0..d.cout {
            db[co] += g[co * p..(co + 1) * p].iter().sum::<f64>();
        }
        let dxs = &mut dx[s * in_len..(s + 1) * in_len];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let tap = ky * d.k + kx;
                if !active[tap] {
                    continue;
                }
                gather_tap(xs, &d, geom, ky, kx, &mut col);
                dcol.fill(0.0);
                for co in 0..d.cout {
                    let gco = &g[co * p..(co + 1) * p];
                    for ci in 0..d.cin {
                        let widx = (co * d.cin + ci) * kk + tap;
                        let masked_out = mask.is_some_and(|m| m.data()[widx].is_zero());
                        if masked_out {
                            continue;
                        }
                        let c = &col[ci * p..(ci + 1) * p];
                        dw[widx] += gco.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
                        let wv = w[widx];
                        if wv != 0.0 {
                            for (dc, gv) in dcol[ci * p..(ci + 1) * p].iter_mut().zip(gco) {
                                *dc += wv * gv;
                            }
                        }
                    }
                }
                // scatter back through the same index map used by gather_tap
                for ci in 0..d.cin {
                    let plane = &mut dxs[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                    for oy in 0..d.ho {
                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                        if iy < 0 || iy as usize >= d.h {
                            continue;
                        }
                        for ox in 0..d.wo {
                            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                            if ix < 0 || ix as usize >= d.w {
                                continue;
                            }
                            plane[iy as usize * d.w + ix as usize] += dcol[ci * p + oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        dx: Tensor::from_f64(x.shape(), &dx)?,
        dw: Tensor::from_f64(kernel.shape(), &dw)?,
        db: Tensor::from_f64(&[d.cout], &db)?,
    })
}

/// Nearest-neighbour 2x upsampling of `[n, c, h, w]`.
pub fn upsample2x_forward<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("upsample2x", format!("{s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(n * c * 4 * h * w);
    for plane in x.data().chunks(h * w) {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out.push(plane[(y / 2) * w + xx / 2]);
            }
        }
    }
    Tensor::new(vec![n, c, 2 * h, 2 * w], out)
}

pub fn upsample2x_backward<F: Scalar>(x_shape: &[usize], dy: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let planes = x_shape[0] * x_shape[1];
    if dy.shape() != [x_shape[0], x_shape[1], 2 * h, 2 * w] {
        return Err(Error::shape("upsample2x_backward", format!("dy {:?}", dy.shape())));
    }
    let mut dx = vec![0f64; planes * h * w];
    for (pi, plane) in dy.data().chunks(4 * h * w).enumerate() {
        let dst = &mut dx[pi * h * w..(pi + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(y / 2) * w + xx / 2] += plane[y * 2 * w + xx].widen();
            }
        }
    }
    Tensor::from_f64(x_shape, &dx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn forward<F: Scalar>(self, x: &Tensor<F>) -> Tensor<F> {
        match self {
            Activation::Relu => x.map(|v| if v > F::zero() { v } else { F::zero() }),
            Activation::Sigmoid => x.map(|v| F::narrow(sigmoid(v.widen()))),
            Activation::Tanh => x.map(|v| v.tanh()),
        }
    }

    /// Gradient given the layer input `x` and output `y`.
    pub fn backward<F: Scalar>(self, x: &Tensor<F>, y: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
        let data = match self {
            Activation::Relu => x
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&xv, &g)| if xv > F::zero() { g } else { F::zero() })
                .collect(),
            Activation::Sigmoid => y
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&yv, &g)| {
                    let s = yv.widen();
                    F::narrow(g.widen() * s * (1.0 - s))
                })
                .collect(),
            Activation::Tanh => y
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&yv, &g)| {
                    let t = yv.widen();
                    F::narrow(g.widen() * (1.0 - t * t))
                })
                .collect(),
        };
        Tensor::new(x.shape().to_vec(), data).expect("activation preserves shape")
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax in f64.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
