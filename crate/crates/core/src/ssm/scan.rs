use rayon::prelude::*;

use super::Discretization;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Input (`B`) or observation (`P`) projection of the SSM.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection<T> {
    /// Time-invariant, `[D, N]`.
    Shared(Tensor<T>),
    /// Input-dependent, one state vector per step shared by all channels,
    /// `[L, N]`.
    PerStep(Tensor<T>),
}

impl<T: Float> Projection<T> {
    #[inline]
    fn at(&self, t: usize, d: usize, n: usize, n_state: usize) -> T {
        match self {
            Projection::Shared(m) => m.data()[d * n_state + n],
            Projection::PerStep(m) => m.data()[t * n_state + n],
        }
    }

    fn check(&self, what: &str, l: usize, d: usize, n: usize) -> Result<()> {
        let (expected, got) = match self {
            Projection::Shared(m) => ([d, n], m.shape()),
            Projection::PerStep(m) => ([l, n], m.shape()),
        };
        if got != expected {
            return Err(Error::shape(
                "selective_scan",
                format!("{what} has shape {got:?}, expected {expected:?}"),
            ));
        }
        Ok(())
    }
}

/// Continuous-time parameters of a diagonal selective SSM.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<T> {
    /// Diagonal state matrix `[D, N]`.
    pub a: Tensor<T>,
    pub b: Projection<T>,
    pub p: Projection<T>,
    /// Skip coefficient per channel, length `D`.
    pub q: Vec<T>,
    /// Step sizes `[L, D]`, strictly positive.
    pub delta: Tensor<T>,
    pub discretization: Discretization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanResult<T> {
    /// `[L, D]`
    pub y: Tensor<T>,
    /// `[D, N]`
    pub h_final: Tensor<T>,
}

struct Dims {
    l: usize,
    d: usize,
    n: usize,
}

fn validate<T: Float>(x: &Tensor<T>, p: &SsmParams<T>) -> Result<Dims> {
    const OP: &str = "selective_scan";
    let (l, d) = match *x.shape() {
        [l, d] => (l, d),
        ref s => return Err(Error::shape(OP, format!("x must be [L,D], got {s:?}"))),
    };
    if l == 0 {
        return Err(Error::invalid(OP, "sequence length must be at least 1"));
    }
    let n = match *p.a.shape() {
        [ad, n] if ad == d => n,
        ref s => {
            return Err(Error::shape(
                OP,
                format!("A has shape {s:?}, expected [D={d},N]"),
            ))
        }
    };
    p.b.check("B", l, d, n)?;
    p.p.check("P", l, d, n)?;
    if p.q.len() != d {
        return Err(Error::shape(
            OP,
            format!("Q has {} entries, expected D={d}", p.q.len()),
        ));
    }
    if p.delta.shape() != [l, d] {
        return Err(Error::shape(
            OP,
            format!("Δ has shape {:?}, expected [{l},{d}]", p.delta.shape()),
        ));
    }
    if let Some(i) = p.delta.data().iter().position(|v| !(v.as_f64() > 0.0)) {
        return Err(Error::invalid(
            OP,
            format!("Δ[{}, {}] is not positive", i / d, i % d),
        ));
    }
    Ok(Dims { l, d, n })
}

/// Reference sequential scan: the ground truth for every other scan path.
pub fn selective_scan_seq<T: Float>(x: &Tensor<T>, params: &SsmParams<T>) -> Result<ScanResult<T>> {
    let Dims { l, d, n } = validate(x, params)?;
    let mut h = vec![T::zero(); d * n];
    let mut y = vec![T::zero(); l * d];
    for t in 0..l {
        for c in 0..d {
            let xv = x.data()[t * d + c];
            let dt = params.delta.data()[t * d + c];
            let mut acc = T::zero();
            for s in 0..n {
                let (a_bar, gain) = params.discretization.coeffs(dt, params.a.data()[c * n + s]);
                let u = gain * params.b.at(t, c, s, n) * xv;
                let hs = &mut h[c * n + s];
                *hs = a_bar * *hs + u;
                acc += params.p.at(t, c, s, n) * *hs;
            }
            y[t * d + c] = acc + params.q[c] * xv;
        }
    }
    Ok(ScanResult {
        y: Tensor::new(&[l, d], y)?,
        h_final: Tensor::new(&[d, n], h)?,
    })
}

/// Chunked scan: channels run in parallel, time is processed in chunks of
/// `block_len` steps whose discretized coefficients are precomputed before
/// the recurrence runs over them. Per-entry arithmetic is identical to
/// [`selective_scan_seq`].
pub fn selective_scan_blocked<T: Float>(
    x: &Tensor<T>,
    params: &SsmParams<T>,
    block_len: usize,
) -> Result<ScanResult<T>> {
    if block_len == 0 {
        return Err(Error::invalid(
            "selective_scan_blocked",
            "block_len must be at least 1",
        ));
    }
    let Dims { l, d, n } = validate(x, params)?;
    let columns: Vec<(Vec<T>, Vec<T>)> = (0..d)
        .into_par_iter()
        .map(|c| {
            let mut h = vec![T::zero(); n];
            let mut y = vec![T::zero(); l];
            let mut a_bar = vec![T::zero(); block_len * n];
            let mut u = vec![T::zero(); block_len * n];
            let mut start = 0;
            while start < l {
                let len = block_len.min(l - start);
                for i in 0..len {
                    let t = start + i;
                    let xv = x.data()[t * d + c];
                    let dt = params.delta.data()[t * d + c];
                    for s in 0..n {
                        let (ab, gain) =
                            params.discretization.coeffs(dt, params.a.data()[c * n + s]);
                        a_bar[i * n + s] = ab;
                        u[i * n + s] = gain * params.b.at(t, c, s, n) * xv;
                    }
                }
                for i in 0..len {
                    let t = start + i;
                    let mut acc = T::zero();
                    for s in 0..n {
                        h[s] = a_bar[i * n + s] * h[s] + u[i * n + s];
                        acc += params.p.at(t, c, s, n) * h[s];
                    }
                    y[t] = acc + params.q[c] * x.data()[t * d + c];
                }
                start += len;
            }
            (y, h)
        })
        .collect();
    let mut y = vec![T::zero(); l * d];
    let mut h_final = Vec::with_capacity(d * n);
    for (c, (yc, hc)) in columns.into_iter().enumerate() {
        for t in 0..l {
            y[t * d + c] = yc[t];
        }
        h_final.extend_from_slice(&hc);
    }
    Ok(ScanResult {
        y: Tensor::new(&[l, d], y)?,
        h_final: Tensor::new(&[d, n], h_final)?,
    })
}

/// FLOPs of one scan call: 2·L·D·N for each of the three projection terms
/// (Ā·h, B̄·x, P·h).
pub fn scan_flops(batch: usize, l: usize, d: usize, n: usize) -> u64 {
    3 * 2 * (batch * l * d * n) as u64
}

/// Batched selective scan with input-dependent Δ, B, P, as used inside the
/// vision SSM block. Shapes: `x, delta: [Bt, L, D]`, `a: [D, N]`,
/// `b, p: [Bt, L, N]`, `q: [D]`.
#[derive(Debug, Clone, Copy)]
pub struct BatchedScan {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub discretization: Discretization,
}

/// Gradients of a [`BatchedScan`] w.r.t. its six inputs.
#[derive(Debug, Clone)]
pub struct ScanGrads<T> {
    pub x: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub p: Vec<T>,
    pub q: Vec<T>,
}

impl BatchedScan {
    pub fn infer<T: Float>(
        x: &Tensor<T>,
        delta: &Tensor<T>,
        a: &Tensor<T>,
        b: &Tensor<T>,
        p: &Tensor<T>,
        q: &Tensor<T>,
        discretization: Discretization,
    ) -> Result<Self> {
        const OP: &str = "selective_scan";
        let (bt, l, d) = match *x.shape() {
            [bt, l, d] => (bt, l, d),
            ref s => return Err(Error::shape(OP, format!("x must be [B,L,D], got {s:?}"))),
        };
        let n = match *a.shape() {
            [ad, n] if ad == d => n,
            ref s => {
                return Err(Error::shape(
                    OP,
                    format!("A has shape {s:?}, expected [D={d},N]"),
                ))
            }
        };
        for (what, t, want) in [
            ("Δ", delta, [bt, l, d]),
            ("B", b, [bt, l, n]),
            ("P", p, [bt, l, n]),
        ] {
            if t.shape() != want {
                return Err(Error::shape(
                    OP,
                    format!("{what} has shape {:?}, expected {want:?}", t.shape()),
                ));
            }
        }
        if q.numel() != d {
            return Err(Error::shape(
                OP,
                format!("Q has {} entries, expected D={d}", q.numel()),
            ));
        }
        Ok(BatchedScan {
            batch: bt,
            len: l,
            channels: d,
            state: n,
            discretization,
        })
    }

    /// Returns `y: [Bt, L, D]` and every hidden state `[Bt, L, D, N]`.
    pub fn forward<T: Float>(
        &self,
        x: &[T],
        delta: &[T],
        a: &[T],
        b: &[T],
        p: &[T],
        q: &[T],
    ) -> (Vec<T>, Vec<T>) {
        let BatchedScan {
            batch,
            len: l,
            channels: d,
            state: n,
            discretization,
        } = *self;
        let mut y = vec![T::zero(); batch * l * d];
        let mut hs = vec![T::zero(); batch * l * d * n];
        y.par_chunks_mut(l * d)
            .zip(hs.par_chunks_mut(l * d * n))
            .enumerate()
            .for_each(|(bi, (y_b, hs_b))| {
                let (x_b, dt_b) = (&x[bi * l * d..][..l * d], &delta[bi * l * d..][..l * d]);
                let (b_b, p_b) = (&b[bi * l * n..][..l * n], &p[bi * l * n..][..l * n]);
                let mut h = vec![T::zero(); d * n];
                for t in 0..l {
                    for c in 0..d {
                        let xv = x_b[t * d + c];
                        let mut acc = T::zero();
                        for s in 0..n {
                            let (a_bar, gain) =
                                discretization.coeffs(dt_b[t * d + c], a[c * n + s]);
                            let hv = &mut h[c * n + s];
                            *hv = a_bar * *hv + gain * b_b[t * n + s] * xv;
                            acc += p_b[t * n + s] * *hv;
                        }
                        y_b[t * d + c] = acc + q[c] * xv;
                    }
                    hs_b[t * d * n..][..d * n].copy_from_slice(&h);
                }
            });
        (y, hs)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Float>(
        &self,
        x: &[T],
        delta: &[T],
        a: &[T],
        b: &[T],
        p: &[T],
        q: &[T],
        hs: &[T],
        dy: &[T],
    ) -> ScanGrads<T> {
        let BatchedScan {
            batch,
            len: l,
            channels: d,
            state: n,
            discretization,
        } = *self;
        struct Part<T> {
            x: Vec<T>,
            delta: Vec<T>,
            b: Vec<T>,
            p: Vec<T>,
            a: Vec<T>,
            q: Vec<T>,
        }
        let parts: Vec<Part<T>> = (0..batch)
            .into_par_iter()
            .map(|bi| {
                let off_ld = bi * l * d;
                let off_ln = bi * l * n;
                let hs_b = &hs[bi * l * d * n..][..l * d * n];
                let mut g = Part {
                    x: vec![T::zero(); l * d],
                    delta: vec![T::zero(); l * d],
                    b: vec![T::zero(); l * n],
                    p: vec![T::zero(); l * n],
                    a: vec![T::zero(); d * n],
                    q: vec![T::zero(); d],
                };
                let mut dh = vec![T::zero(); n];
                for c in 0..d {
                    dh.fill(T::zero());
                    for t in (0..l).rev() {
                        let gy = dy[off_ld + t * d + c];
                        let xv = x[off_ld + t * d + c];
                        let dt = delta[off_ld + t * d + c];
                        g.q[c] += gy * xv;
                        let mut dx = q[c] * gy;
                        let mut ddt = T::zero();
                        for s in 0..n {
                            let h_t = hs_b[(t * d + c) * n + s];
                            let h_prev = if t == 0 {
                                T::zero()
                            } else {
                                hs_b[((t - 1) * d + c) * n + s]
                            };
                            let pv = p[off_ln + t * n + s];
                            let bv = b[off_ln + t * n + s];
                            let av = a[c * n + s];
                            g.p[t * n + s] += gy * h_t;
                            let dhs = dh[s] + gy * pv;
                            let (a_bar, gain) = discretization.coeffs(dt, av);
                            let (gd, ga) = discretization.gain_partials(dt, av);
                            dx += dhs * gain * bv;
                            let d_u = dhs * xv; // ∂/∂(gain·B)
                            let d_abar = dhs * h_prev;
                            ddt += d_abar * a_bar * av + d_u * bv * gd;
                            g.a[c * n + s] += d_abar * a_bar * dt + d_u * bv * ga;
                            g.b[t * n + s] += d_u * gain;
                            dh[s] = dhs * a_bar;
                        }
                        g.x[t * d + c] = dx;
                        g.delta[t * d + c] = ddt;
                    }
                }
                g
            })
            .collect();
        let mut out = ScanGrads {
            x: Vec::with_capacity(batch * l * d),
            delta: Vec::with_capacity(batch * l * d),
            a: vec![T::zero(); d * n],
            b: Vec::with_capacity(batch * l * n),
            p: Vec::with_capacity(batch * l * n),
            q: vec![T::zero(); d],
        };
        for part in parts {
            out.x.extend_from_slice(&part.x);
            out.delta.extend_from_slice(&part.delta);
            out.b.extend_from_slice(&part.b);
            out.p.extend_from_slice(&part.p);
            for (acc, v) in out.a.iter_mut().zip(&part.a) {
                *acc += *v;
            }
            for (acc, v) in out.q.iter_mut().zip(&part.q) {
                *acc += *v;
            }
        }
        out
    }
}
