//! Forward and backward kernels on plain tensors. The [`Tape`](super::Tape)
//! wires these together; they are also usable directly for inference.

use rayon::prelude::*;

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Resolved geometry of a 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        let (n, c_in, h, w) = match *x_shape {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::shape(
                    OP,
                    format!("input must be [N,C,H,W], got {x_shape:?}"),
                ))
            }
        };
        let (c_out, cg, kh, kw) = match *w_shape {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => {
                return Err(Error::shape(
                    OP,
                    format!("weight must be [C_out,C_in/groups,kh,kw], got {w_shape:?}"),
                ))
            }
        };
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be positive"));
        }
        if groups == 0 || c_in % groups != 0 {
            return Err(Error::shape(
                OP,
                format!("C_in={c_in} not divisible by groups={groups}"),
            ));
        }
        if c_out % groups != 0 {
            return Err(Error::shape(
                OP,
                format!("C_out={c_out} not divisible by groups={groups}"),
            ));
        }
        if cg != c_in / groups {
            return Err(Error::shape(
                OP,
                format!(
                    "weight C_in/groups={cg} but input C_in/groups={}",
                    c_in / groups
                ),
            ));
        }
        if kh == 0 || kw == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                OP,
                format!(
                    "kernel {kh}x{kw} does not fit padded input {}x{}",
                    h + 2 * pad,
                    w + 2 * pad
                ),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Conv2dGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            groups,
            ho,
            wo,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.ho, self.wo]
    }

    /// Multiply-adds × 2 for the whole batch.
    pub fn flops(&self) -> u64 {
        2 * (self.kh
            * self.kw
            * (self.c_in / self.groups)
            * self.c_out
            * self.ho
            * self.wo
            * self.n) as u64
    }

    fn cg(&self) -> usize {
        self.c_in / self.groups
    }

    fn og(&self) -> usize {
        self.c_out / self.groups
    }

    fn k_len(&self) -> usize {
        self.cg() * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_depthwise(&self) -> bool {
        self.cg() == 1 && self.og() == 1
    }
}

/// Unfold group `g` of one image (`x_img` is `[C, H, W]`) into
/// `[Cg·kh·kw, Ho·Wo]`.
fn im2col<T: Float>(x_img: &[T], geo: &Conv2dGeom, g: usize, col: &mut [T]) {
    let (h, w, ho, wo) = (geo.h as isize, geo.w as isize, geo.ho, geo.wo);
    let hw = geo.h * geo.w;
    let mut row = 0;
    for c in 0..geo.cg() {
        let plane = &x_img[(g * geo.cg() + c) * hw..][..hw];
        for i in 0..geo.kh {
            for j in 0..geo.kw {
                let dst = &mut col[row * ho * wo..][..ho * wo];
                for oh in 0..ho {
                    let ih = (oh * geo.stride + i) as isize - geo.pad as isize;
                    let dst_row = &mut dst[oh * wo..][..wo];
                    if ih < 0 || ih >= h {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * geo.w..][..geo.w];
                    for (ow, d) in dst_row.iter_mut().enumerate() {
                        let iw = (ow * geo.stride + j) as isize - geo.pad as isize;
                        *d = if iw < 0 || iw >= w {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold `[Cg·kh·kw, Ho·Wo]` back into group `g` of `dx_img`, accumulating.
fn col2im<T: Float>(col: &[T], geo: &Conv2dGeom, g: usize, dx_img: &mut [T]) {
    let (h, w, ho, wo) = (geo.h as isize, geo.w as isize, geo.ho, geo.wo);
    let hw = geo.h * geo.w;
    let mut row = 0;
    for c in 0..geo.cg() {
        let plane = &mut dx_img[(g * geo.cg() + c) * hw..][..hw];
        for i in 0..geo.kh {
            for j in 0..geo.kw {
                let src = &col[row * ho * wo..][..ho * wo];
                for oh in 0..ho {
                    let ih = (oh * geo.stride + i) as isize - geo.pad as isize;
                    if ih < 0 || ih >= h {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * geo.stride + j) as isize - geo.pad as isize;
                        if iw >= 0 && iw < w {
                            plane[ih as usize * geo.w + iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation (no kernel flip) with zero padding.
pub fn conv2d<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let geo = Conv2dGeom::new(x.shape(), w.shape(), stride, pad, groups)?;
    if let Some(b) = bias {
        if b.numel() != geo.c_out {
            return Err(Error::shape(
                "conv2d",
                format!("bias length {} != C_out {}", b.numel(), geo.c_out),
            ));
        }
    }
    let out_img = geo.c_out * geo.ho * geo.wo;
    let in_img = geo.c_in * geo.h * geo.w;
    let mut out = vec![T::zero(); geo.n * out_img];
    out.par_chunks_mut(out_img.max(1))
        .enumerate()
        .for_each(|(n, out_n)| {
            let x_n = &x.data()[n * in_img..][..in_img];
            conv2d_image(x_n, w.data(), &geo, out_n);
            if let Some(b) = bias {
                let plane = geo.ho * geo.wo;
                for (o, chunk) in out_n.chunks_mut(plane).enumerate() {
                    let bo = b.data()[o];
                    chunk.iter_mut().for_each(|v| *v += bo);
                }
            }
        });
    let out = Tensor::new(&geo.out_shape(), out)?;
    Ok(out)
}

fn conv2d_image<T: Float>(x_n: &[T], w: &[T], geo: &Conv2dGeom, out_n: &mut [T]) {
    let plane = geo.ho * geo.wo;
    if geo.is_depthwise() {
        depthwise_image(x_n, w, geo, out_n);
        return;
    }
    let k = geo.k_len();
    let og = geo.og();
    let mut col = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for g in 0..geo.groups {
        let w_g = &w[g * og * k..][..og * k];
        let b: &[T] = if geo.is_pointwise() {
            &x_n[g * k * plane..][..k * plane]
        } else {
            im2col(x_n, geo, g, &mut col);
            &col
        };
        let out_g = &mut out_n[g * og * plane..][..og * plane];
        T::gemm(
            og,
            k,
            plane,
            w_g,
            k as isize,
            1,
            b,
            plane as isize,
            1,
            T::zero(),
            out_g,
        );
    }
}

fn depthwise_image<T: Float>(x_n: &[T], w: &[T], geo: &Conv2dGeom, out_n: &mut [T]) {
    let (h, wd) = (geo.h as isize, geo.w as isize);
    let kk = geo.kh * geo.kw;
    for c in 0..geo.c_in {
        let plane = &x_n[c * geo.h * geo.w..][..geo.h * geo.w];
        let ker = &w[c * kk..][..kk];
        let dst = &mut out_n[c * geo.ho * geo.wo..][..geo.ho * geo.wo];
        for oh in 0..geo.ho {
            for ow in 0..geo.wo {
                let mut acc = T::zero();
                for i in 0..geo.kh {
                    let ih = (oh * geo.stride + i) as isize - geo.pad as isize;
                    if ih < 0 || ih >= h {
                        continue;
                    }
                    for j in 0..geo.kw {
                        let iw = (ow * geo.stride + j) as isize - geo.pad as isize;
                        if iw >= 0 && iw < wd {
                            acc += ker[i * geo.kw + j] * plane[ih as usize * geo.w + iw as usize];
                        }
                    }
                }
                dst[oh * geo.wo + ow] = acc;
            }
        }
    }
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias.
pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    geo: &Conv2dGeom,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let plane = geo.ho * geo.wo;
    let out_img = geo.c_out * plane;
    let in_img = geo.c_in * geo.h * geo.w;
    let k = geo.k_len();
    let og = geo.og();

    let per_image: Vec<(Vec<T>, Vec<T>)> = (0..geo.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &x.data()[n * in_img..][..in_img];
            let dy_n = &dy.data()[n * out_img..][..out_img];
            let mut dx_n = vec![T::zero(); in_img];
            let mut dw_n = vec![T::zero(); w.numel()];
            if geo.is_depthwise() {
                depthwise_backward_image(x_n, w.data(), dy_n, geo, &mut dx_n, &mut dw_n);
                return (dx_n, dw_n);
            }
            let mut col = vec![T::zero(); k * plane];
            for g in 0..geo.groups {
                let w_g = &w.data()[g * og * k..][..og * k];
                let dy_g = &dy_n[g * og * plane..][..og * plane];
                let dw_g = &mut dw_n[g * og * k..][..og * k];
                if geo.is_pointwise() {
                    let x_g = &x_n[g * k * plane..][..k * plane];
                    // dW = dY · Xᵀ
                    T::gemm(
                        og,
                        plane,
                        k,
                        dy_g,
                        plane as isize,
                        1,
                        x_g,
                        1,
                        plane as isize,
                        T::zero(),
                        dw_g,
                    );
                    // dX = Wᵀ · dY
                    let dx_g = &mut dx_n[g * k * plane..][..k * plane];
                    T::gemm(
                        k,
                        og,
                        plane,
                        w_g,
                        1,
                        k as isize,
                        dy_g,
                        plane as isize,
                        1,
                        T::zero(),
                        dx_g,
                    );
                } else {
                    im2col(x_n, geo, g, &mut col);
                    T::gemm(
                        og,
                        plane,
                        k,
                        dy_g,
                        plane as isize,
                        1,
                        &col,
                        1,
                        plane as isize,
                        T::zero(),
                        dw_g,
                    );
                    T::gemm(
                        k,
                        og,
                        plane,
                        w_g,
                        1,
                        k as isize,
                        dy_g,
                        plane as isize,
                        1,
                        T::zero(),
                        &mut col,
                    );
                    col2im(&col, geo, g, &mut dx_n);
                }
            }
            (dx_n, dw_n)
        })
        .collect();

    let mut dx = Vec::with_capacity(geo.n * in_img);
    let mut dw = vec![T::zero(); w.numel()];
    for (dx_n, dw_n) in per_image {
        dx.extend_from_slice(&dx_n);
        for (a, b) in dw.iter_mut().zip(&dw_n) {
            *a += *b;
        }
    }
    let mut db = vec![T::zero(); geo.c_out];
    for n in 0..geo.n {
        for (o, acc) in db.iter_mut().enumerate() {
            let s = &dy.data()[n * out_img + o * plane..][..plane];
            for &v in s {
                *acc += v;
            }
        }
    }
    (
        Tensor::new(x.shape(), dx).expect("dx shape"),
        Tensor::new(w.shape(), dw).expect("dw shape"),
        db,
    )
}

fn depthwise_backward_image<T: Float>(
    x_n: &[T],
    w: &[T],
    dy_n: &[T],
    geo: &Conv2dGeom,
    dx_n: &mut [T],
    dw_n: &mut [T],
) {
    let (h, wd) = (geo.h as isize, geo.w as isize);
    let kk = geo.kh * geo.kw;
    for c in 0..geo.c_in {
        let base = c * geo.h * geo.w;
        let ker = &w[c * kk..][..kk];
        let dker = &mut dw_n[c * kk..][..kk];
        let g = &dy_n[c * geo.ho * geo.wo..][..geo.ho * geo.wo];
        for oh in 0..geo.ho {
            for ow in 0..geo.wo {
                let d = g[oh * geo.wo + ow];
                for i in 0..geo.kh {
                    let ih = (oh * geo.stride + i) as isize - geo.pad as isize;
                    if ih < 0 || ih >= h {
                        continue;
                    }
                    for j in 0..geo.kw {
                        let iw = (ow * geo.stride + j) as isize - geo.pad as isize;
                        if iw >= 0 && iw < wd {
                            let xi = base + ih as usize * geo.w + iw as usize;
                            dker[i * geo.kw + j] += d * x_n[xi];
                            dx_n[xi] += d * ker[i * geo.kw + j];
                        }
                    }
                }
            }
        }
    }
}

/// Length-preserving 1D cross-correlation of `[N, 1, L]` with an odd kernel
/// `[1, 1, k]`, zero padded by `k / 2`.
pub fn conv1d<T: Float>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, l, k) = conv1d_dims(x, w)?;
    let half = (k / 2) as isize;
    let mut out = vec![T::zero(); n * l];
    for b in 0..n {
        let xs = &x.data()[b * l..][..l];
        for (i, o) in out[b * l..][..l].iter_mut().enumerate() {
            let mut acc = T::zero();
            for (j, &wj) in w.data().iter().enumerate() {
                let src = i as isize + j as isize - half;
                if src >= 0 && (src as usize) < l {
                    acc += wj * xs[src as usize];
                }
            }
            *o = acc;
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn conv1d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, l, k) = conv1d_dims(x, w).expect("validated in forward");
    let half = (k / 2) as isize;
    let mut dx = vec![T::zero(); n * l];
    let mut dw = vec![T::zero(); k];
    for b in 0..n {
        let xs = &x.data()[b * l..][..l];
        let gs = &dy.data()[b * l..][..l];
        for i in 0..l {
            for j in 0..k {
                let src = i as isize + j as isize - half;
                if src >= 0 && (src as usize) < l {
                    dw[j] += gs[i] * xs[src as usize];
                    dx[b * l + src as usize] += gs[i] * w.data()[j];
                }
            }
        }
    }
    (
        Tensor::new(x.shape(), dx).expect("dx"),
        Tensor::new(w.shape(), dw).expect("dw"),
    )
}

fn conv1d_dims<T: Float>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    const OP: &str = "conv1d";
    let (n, l) = match *x.shape() {
        [n, 1, l] => (n, l),
        ref s => {
            return Err(Error::shape(
                OP,
                format!("input must be [N,1,L], got {s:?}"),
            ))
        }
    };
    let k = match *w.shape() {
        [1, 1, k] => k,
        ref s => {
            return Err(Error::shape(
                OP,
                format!("kernel must be [1,1,k], got {s:?}"),
            ))
        }
    };
    if k % 2 == 0 {
        return Err(Error::invalid(OP, format!("kernel size k={k} must be odd")));
    }
    Ok((n, l, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

/// Per-channel statistics saved by a normalization forward pass.
#[derive(Debug, Clone)]
pub struct NormSaved<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.03;

/// Batch statistics of `[N, C, H, W]` per channel: (mean, biased variance).
pub fn channel_stats<T: Float>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c, h, w) = x.dims4("batch_norm")?;
    let m = n * h * w;
    if m == 0 {
        return Err(Error::invalid("batch_norm", "zero batch in train mode"));
    }
    let plane = h * w;
    let inv_m = T::c(1.0 / m as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            for &v in &x.data()[(b * c + ch) * plane..][..plane] {
                s += v;
            }
        }
        let mu = s * inv_m;
        let mut q = T::zero();
        for b in 0..n {
            for &v in &x.data()[(b * c + ch) * plane..][..plane] {
                q += (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = q * inv_m;
    }
    Ok((mean, var))
}

/// Batch normalization over `[N, C, H, W]`. In train mode the running
/// statistics are updated in place by an exponential moving average
/// (`running ← (1 − momentum)·running + momentum·batch`, unbiased batch
/// variance); in infer mode only the running statistics are read.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Float>(
    x: &Tensor<T>,
    gain: &[T],
    shift: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    mode: NormMode,
    eps: f64,
    momentum: f64,
) -> Result<(Tensor<T>, NormSaved<T>)> {
    let (n, c, h, w) = x.dims4("batch_norm")?;
    for (what, len) in [
        ("gain", gain.len()),
        ("shift", shift.len()),
        ("running_mean", running_mean.len()),
        ("running_var", running_var.len()),
    ] {
        if len != c {
            return Err(Error::shape(
                "batch_norm",
                format!("{what} length {len} != channels {c}"),
            ));
        }
    }
    let saved = match mode {
        NormMode::Train => {
            let (mean, var) = channel_stats(x)?;
            let m = n * h * w;
            let unbias = if m > 1 {
                m as f64 / (m - 1) as f64
            } else {
                1.0
            };
            let mom = T::c(momentum);
            for ch in 0..c {
                running_mean[ch] = (T::one() - mom) * running_mean[ch] + mom * mean[ch];
                running_var[ch] = (T::one() - mom) * running_var[ch] + mom * var[ch] * T::c(unbias);
            }
            let inv_std = var
                .iter()
                .map(|&v| T::one() / (v + T::c(eps)).sqrt())
                .collect();
            NormSaved { mean, inv_std }
        }
        NormMode::Infer => NormSaved {
            mean: running_mean.to_vec(),
            inv_std: running_var
                .iter()
                .map(|&v| T::one() / (v + T::c(eps)).sqrt())
                .collect(),
        },
    };
    let y = bn_apply(x, gain, shift, &saved);
    Ok((y, saved))
}

pub(crate) fn bn_apply<T: Float>(
    x: &Tensor<T>,
    gain: &[T],
    shift: &[T],
    saved: &NormSaved<T>,
) -> Tensor<T> {
    let s = x.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let mut out = x.data().to_vec();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let ch = i % c;
        let (mu, is, g, b) = (saved.mean[ch], saved.inv_std[ch], gain[ch], shift[ch]);
        chunk.iter_mut().for_each(|v| *v = (*v - mu) * is * g + b);
    }
    Tensor::new(s, out).expect("bn shape")
}

/// Returns (dx, dgain, dshift).
pub fn batch_norm_backward<T: Float>(
    x: &Tensor<T>,
    gain: &[T],
    dy: &Tensor<T>,
    saved: &NormSaved<T>,
    mode: NormMode,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let m = T::c((n * plane) as f64);
    let mut dgain = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in 0..plane {
                let xh = (x.data()[off + i] - saved.mean[ch]) * saved.inv_std[ch];
                dgain[ch] += dy.data()[off + i] * xh;
                dshift[ch] += dy.data()[off + i];
            }
        }
    }
    let mut dx = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let k = gain[ch] * saved.inv_std[ch];
            for i in 0..plane {
                dx[off + i] = match mode {
                    NormMode::Infer => dy.data()[off + i] * k,
                    NormMode::Train => {
                        let xh = (x.data()[off + i] - saved.mean[ch]) * saved.inv_std[ch];
                        k / m * (m * dy.data()[off + i] - dshift[ch] - xh * dgain[ch])
                    }
                };
            }
        }
    }
    (Tensor::new(s, dx).expect("dx"), dgain, dshift)
}

/// Layer normalization over the channel axis at every (n, h, w) position.
/// Saved statistics are indexed by `n·H·W + h·W + w`.
pub fn layer_norm<T: Float>(
    x: &Tensor<T>,
    gain: &[T],
    shift: &[T],
    eps: f64,
) -> Result<(Tensor<T>, NormSaved<T>)> {
    let (n, c, h, w) = x.dims4("layer_norm")?;
    if gain.len() != c || shift.len() != c {
        return Err(Error::shape(
            "layer_norm",
            format!("gain/shift length must equal channels {c}"),
        ));
    }
    if c == 0 {
        return Err(Error::invalid("layer_norm", "zero channels"));
    }
    let plane = h * w;
    let inv_c = T::c(1.0 / c as f64);
    let mut mean = vec![T::zero(); n * plane];
    let mut inv_std = vec![T::zero(); n * plane];
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    for b in 0..n {
        for p in 0..plane {
            let at = |ch: usize| (b * c + ch) * plane + p;
            let mut s = T::zero();
            for ch in 0..c {
                s += xd[at(ch)];
            }
            let mu = s * inv_c;
            let mut q = T::zero();
            for ch in 0..c {
                let d = xd[at(ch)] - mu;
                q += d * d;
            }
            let is = T::one() / (q * inv_c + T::c(eps)).sqrt();
            for ch in 0..c {
                out[at(ch)] = (xd[at(ch)] - mu) * is * gain[ch] + shift[ch];
            }
            mean[b * plane + p] = mu;
            inv_std[b * plane + p] = is;
        }
    }
    Ok((Tensor::new(x.shape(), out)?, NormSaved { mean, inv_std }))
}

pub fn layer_norm_backward<T: Float>(
    x: &Tensor<T>,
    gain: &[T],
    dy: &Tensor<T>,
    saved: &NormSaved<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let cf = T::c(c as f64);
    let (xd, gd) = (x.data(), dy.data());
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgain = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    for b in 0..n {
        for p in 0..plane {
            let at = |ch: usize| (b * c + ch) * plane + p;
            let (mu, is) = (saved.mean[b * plane + p], saved.inv_std[b * plane + p]);
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for ch in 0..c {
                let xh = (xd[at(ch)] - mu) * is;
                let g = gd[at(ch)] * gain[ch];
                sum_g += g;
                sum_gx += g * xh;
                dgain[ch] += gd[at(ch)] * xh;
                dshift[ch] += gd[at(ch)];
            }
            for ch in 0..c {
                let xh = (xd[at(ch)] - mu) * is;
                let g = gd[at(ch)] * gain[ch];
                dx[at(ch)] = is / cf * (cf * g - sum_g - xh * sum_gx);
            }
        }
    }
    (Tensor::new(s, dx).expect("dx"), dgain, dshift)
}

/// Spatial mean per channel: `[N, C, H, W]` → `[N, C, 1, 1]`.
pub fn global_avg_pool<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let plane = h * w;
    if plane == 0 {
        return Err(Error::invalid("global_avg_pool", "zero spatial extent"));
    }
    let inv = T::c(1.0 / plane as f64);
    let out = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[n, c, 1, 1], out)
}

/// Channel permutation: reshape C → (groups, C/groups), transpose, flatten.
/// Output channel `j·groups + i` holds input channel `i·(C/groups) + j`.
pub fn shuffle_source_channel(c: usize, groups: usize, out_ch: usize) -> usize {
    let per = c / groups;
    let (j, i) = (out_ch / groups, out_ch % groups);
    i * per + j
}

pub fn channel_shuffle<T: Float>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("channel_shuffle")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(
            "channel_shuffle",
            format!("C={c} not divisible by groups={groups}"),
        ));
    }
    let plane = h * w;
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..n {
        for oc in 0..c {
            let ic = shuffle_source_channel(c, groups, oc);
            out[(b * c + oc) * plane..][..plane]
                .copy_from_slice(&x.data()[(b * c + ic) * plane..][..plane]);
        }
    }
    Tensor::new(x.shape(), out)
}

/// Inverse of [`channel_shuffle`] with the same `groups`.
pub fn channel_unshuffle<T: Float>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4("channel_unshuffle")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(
            "channel_unshuffle",
            format!("C={c} not divisible by groups={groups}"),
        ));
    }
    channel_shuffle(x, c / groups)
}

/// Channels `[start, start + len)` of `[N, C, H, W]`.
pub fn narrow_channels<T: Float>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("split_channels")?;
    if start + len > c {
        return Err(Error::shape(
            "split_channels",
            format!("range {start}..{} exceeds C={c}", start + len),
        ));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        out.extend_from_slice(&x.data()[(b * c + start) * plane..][..len * plane]);
    }
    Tensor::new(&[n, len, h, w], out)
}

pub fn split_channels<T: Float>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (_, c, _, _) = x.dims4("split_channels")?;
    let total: usize = sizes.iter().sum();
    if total != c {
        return Err(Error::shape(
            "split_channels",
            format!("sizes {sizes:?} sum to {total}, expected C={c}"),
        ));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let t = narrow_channels(x, start, len);
            start += len;
            t
        })
        .collect()
}

pub fn concat_channels<T: Float>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "empty input list"))?;
    let (n, _, h, w) = first.dims4("concat_channels")?;
    let mut c_total = 0;
    for t in xs {
        let (tn, tc, th, tw) = t.dims4("concat_channels")?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("operand [{tn},{tc},{th},{tw}] incompatible with N={n}, H={h}, W={w}"),
            ));
        }
        c_total += tc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * c_total * plane);
    for b in 0..n {
        for t in xs {
            let tc = t.shape()[1];
            out.extend_from_slice(&t.data()[b * tc * plane..][..tc * plane]);
        }
    }
    Tensor::new(&[n, c_total, h, w], out)
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample_nearest2<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("upsample_nearest")?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * h2 * w2];
    for (p, dst) in out.chunks_mut(h2 * w2).enumerate() {
        let src = &x.data()[p * h * w..][..h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(&[n, c, h2, w2], out)
}

pub fn upsample_nearest2_backward<T: Float>(dy: &Tensor<T>) -> Tensor<T> {
    let s = dy.shape();
    let (n, c, h2, w2) = (s[0], s[1], s[2], s[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (p, dst) in dx.chunks_mut(h * w).enumerate() {
        let src = &dy.data()[p * h2 * w2..][..h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    Tensor::new(&[n, c, h, w], dx).expect("dx")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Sigmoid,
    Softplus,
}

#[inline]
pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Float>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    #[inline]
    pub fn apply<T: Float>(self, x: T) -> T {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative at input `x`.
    #[inline]
    pub fn derivative<T: Float>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

pub fn activation<T: Float>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}
