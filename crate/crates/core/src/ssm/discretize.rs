use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Below this |A| the zero-order-hold gain `(e^{ΔA} − 1)/A` is replaced by
/// its limit `Δ`.
pub const ZOH_SINGULAR_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discretization {
    /// `B̄ = (e^{ΔA} − 1)/A · B`
    Zoh,
    /// `B̄ = Δ · B`
    #[default]
    Taylor,
}

/// Scalar input gain `g` with `B̄ = g · B`, plus `∂g/∂Δ` and `∂g/∂A`.
#[inline]
pub fn zoh_input_gain<T: Float>(delta: T, a: T) -> (T, T, T) {
    if a.abs() < T::c(ZOH_SINGULAR_EPS) {
        return (delta, T::one(), delta * delta * T::c(0.5));
    }
    let e = (delta * a).exp();
    let g = (e - T::one()) / a;
    let dg_da = (delta * e * a - (e - T::one())) / (a * a);
    (g, e, dg_da)
}

impl Discretization {
    /// (Ā, gain) for one (step, channel, state) entry; `B̄ = gain · B`.
    #[inline]
    pub fn coeffs<T: Float>(self, delta: T, a: T) -> (T, T) {
        let a_bar = (delta * a).exp();
        let gain = match self {
            Discretization::Taylor => delta,
            Discretization::Zoh => zoh_input_gain(delta, a).0,
        };
        (a_bar, gain)
    }

    /// Partial derivatives of the gain w.r.t. Δ and A.
    #[inline]
    pub fn gain_partials<T: Float>(self, delta: T, a: T) -> (T, T) {
        match self {
            Discretization::Taylor => (T::one(), T::zero()),
            Discretization::Zoh => {
                let (_, dd, da) = zoh_input_gain(delta, a);
                (dd, da)
            }
        }
    }
}

fn check(
    a: &Tensor<impl Float>,
    b: &Tensor<impl Float>,
    delta: &[impl Float],
    op: &'static str,
) -> Result<(usize, usize)> {
    let (d, n) = match *a.shape() {
        [d, n] => (d, n),
        ref s => return Err(Error::shape(op, format!("A must be [D,N], got {s:?}"))),
    };
    if b.shape() != a.shape() {
        return Err(Error::shape(
            op,
            format!("B shape {:?} != A shape {:?}", b.shape(), a.shape()),
        ));
    }
    if delta.len() != d {
        return Err(Error::shape(
            op,
            format!("Δ has {} entries, expected D={d}", delta.len()),
        ));
    }
    if let Some(i) = delta.iter().position(|v| !(v.as_f64() > 0.0)) {
        return Err(Error::invalid(
            op,
            format!("Δ[{i}] = {} is not positive", delta[i]),
        ));
    }
    Ok((d, n))
}

fn discretize<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    delta: &[T],
    how: Discretization,
    op: &'static str,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, n) = check(a, b, delta, op)?;
    let mut a_bar = Vec::with_capacity(a.numel());
    let mut b_bar = Vec::with_capacity(a.numel());
    for (i, (&av, &bv)) in a.data().iter().zip(b.data()).enumerate() {
        let (ab, gain) = how.coeffs(delta[i / n], av);
        a_bar.push(ab);
        b_bar.push(gain * bv);
    }
    Ok((
        Tensor::new(a.shape(), a_bar)?,
        Tensor::new(a.shape(), b_bar)?,
    ))
}

/// Exact zero-order hold: `Ā = e^{ΔA}`, `B̄ = (e^{ΔA} − 1)/A · B`
/// elementwise over `[D, N]` with one Δ per channel.
pub fn discretize_zoh<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    delta: &[T],
) -> Result<(Tensor<T>, Tensor<T>)> {
    discretize(a, b, delta, Discretization::Zoh, "discretize_zoh")
}

/// `Ā = e^{ΔA}`, `B̄ = Δ · B`.
pub fn discretize_taylor<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    delta: &[T],
) -> Result<(Tensor<T>, Tensor<T>)> {
    discretize(a, b, delta, Discretization::Taylor, "discretize_taylor")
}
