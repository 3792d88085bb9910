//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Inputs larger than this are checked on a random subset of this size.
pub const FD_MAX_ELEMENTS: usize = 10_000;
/// Relative errors are measured against `max(|analytic|, |numeric|, floor)`.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, flat element)` with the largest error.
    pub worst: (usize, usize),
    pub checked: usize,
    pub pass: bool,
}

/// Builds a scalar from `inputs` on `tape`.
pub trait ScalarFn: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>> ScalarFn for F {}

fn eval(f: &impl ScalarFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("closure must return a scalar, got {:?}", t.shape()),
        ));
    }
    Ok(t.data()[0])
}

/// Compare the tape gradient of `f` against central differences with step
/// [`FD_STEP`] on every input element (or a seeded sample of
/// [`FD_MAX_ELEMENTS`] elements for larger inputs). NaN anywhere fails with
/// its location.
pub fn grad_check(
    f: impl ScalarFn,
    inputs: &[Tensor<f64>],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
        pass: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    for (i, input) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(input.shape());
        let analytic = grads.get(vars[i]).unwrap_or(&zeros);
        let elems: Vec<usize> = if input.numel() > FD_MAX_ELEMENTS {
            let mut v = sample(&mut rng, input.numel(), FD_MAX_ELEMENTS).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..input.numel()).collect()
        };
        let mut probe = inputs.to_vec();
        for j in elems {
            let x0 = input.data()[j];
            probe[i].data_mut()[j] = x0 + FD_STEP;
            let fp = eval(&f, &probe)?;
            probe[i].data_mut()[j] = x0 - FD_STEP;
            let fm = eval(&f, &probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            if a.is_nan() || numeric.is_nan() {
                let which = if a.is_nan() { "analytic" } else { "numeric" };
                return Err(Error::NonFinite {
                    what: format!("{which} gradient"),
                    location: format!("input {i}, element {j}"),
                });
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    report.pass = report.max_rel_err <= tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::sigmoid;

    fn rand_input(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, -2.0, 2.0, &mut rng)
    }

    #[test]
    fn identity_is_exact() {
        let x = rand_input(1, &[7]);
        let w = rand_input(2, &[7]);
        let r = grad_check(
            move |t: &mut Tape<f64>, v: &[Var]| t.dot_const(v[0], w.clone()),
            &[x],
            1e-10,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.max_rel_err <= 1e-10);
    }

    #[test]
    fn sigmoid_passes() {
        let x = rand_input(3, &[2, 3, 2, 2]);
        let r = grad_check(
            |t: &mut Tape<f64>, v: &[Var]| {
                let y = t.sigmoid(v[0]);
                Ok(t.sum(y))
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn corrupted_backward_fails() {
        let x = rand_input(4, &[10]);
        let r = grad_check(
            |t: &mut Tape<f64>, v: &[Var]| {
                // derivative deliberately off by a factor of 1.1
                let y = t.elementwise(v[0], sigmoid, |z| 1.1 * sigmoid(z) * (1.0 - sigmoid(z)));
                Ok(t.sum(y))
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn nan_reports_location() {
        let x = Tensor::from_f64(&[3], &[1.0, -1.0, 2.0]).unwrap();
        let err = grad_check(
            |t: &mut Tape<f64>, v: &[Var]| {
                let y = t.elementwise(
                    v[0],
                    |z| z.abs().sqrt(),
                    |z| if z < 0.0 { f64::NAN } else { 0.5 / z.sqrt() },
                );
                Ok(t.sum(y))
            },
            &[x],
            1e-4,
        )
        .unwrap_err();
        assert!(err.to_string().contains("element 1"), "{err}");
    }
}
