//! Network building blocks. Block structs describe architecture only; their
//! weights live in a [`ParamStore`] under dotted names and are read through
//! a [`Ctx`] during the forward pass.

mod csp;
mod eca;
mod ffn;
mod layers;
mod params;
mod simvss;
mod stem;
mod vss;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use csp::{EcaCsp, EcaUnit};
pub use eca::{
    adaptive_kernel, attended_channels, channel_map_phi, strip_ratio, EcaConfig, EcaConv,
};
pub use ffn::Ffn;
pub use layers::{BatchNorm2d, Conv2d, ConvBnAct, LayerNorm2d};
pub use params::{Ctx, Init, LayerSummary, ParamStore, Summary};
pub use simvss::SimVss;
pub use stem::Stem;
pub use vss::{Vss, VssConfig};

use crate::error::Result;
use crate::tensor::gradcheck::{grad_check, GradCheckReport};
use crate::tensor::kernels::NormMode;
use crate::tensor::{Float, Tape, Tensor, Var};

/// A layer or composite block operating on `[N, C, H, W]` feature maps.
pub trait Block {
    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var>;

    /// Output shape for `input`, appending one summary row per leaf layer.
    fn trace(&self, input: [usize; 4], summary: &mut Summary) -> Result<[usize; 4]>;
}

/// Run `block` on `x` with a fresh forward-only tape.
pub fn run_block<T: Float, B: Block>(
    block: &B,
    store: &ParamStore<T>,
    x: &Tensor<T>,
    mode: NormMode,
) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let mut ctx = Ctx::new(&mut tape, store, mode);
    let xv = ctx.tape.constant(x.clone());
    let y = block.forward(&mut ctx, xv)?;
    Ok(tape.value(y).clone())
}

/// Finite-difference check of `block` with respect to its input and every
/// parameter. The scalar probed is a fixed random projection of the output.
pub fn grad_check_block<B: Block>(
    block: &B,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    mode: NormMode,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let out = run_block(block, store, x, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = Tensor::<f64>::rand_uniform(out.shape(), -1.0, 1.0, &mut rng);
    let names = store.param_names();
    let mut inputs = vec![x.clone()];
    for n in &names {
        inputs.push(store.param(n)?.clone());
    }
    grad_check(
        |tape: &mut Tape<f64>, vars: &[Var]| {
            let y = {
                let mut ctx = Ctx::new(tape, store, mode);
                for (n, &v) in names.iter().zip(&vars[1..]) {
                    ctx.bind(n, v);
                }
                block.forward(&mut ctx, vars[0])?
            };
            tape.dot_const(y, probe.clone())
        },
        &inputs,
        tolerance,
    )
}
