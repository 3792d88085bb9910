//! Pointwise feed-forward network: expand, SiLU, project back.

use super::layers::Conv2d;
use super::params::{Ctx, Init, Summary};
use super::Block;
use crate::error::Result;
use crate::tensor::{Float, Var};

#[derive(Debug, Clone)]
pub struct Ffn {
    pub name: String,
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl Ffn {
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        name: &str,
        c: usize,
        ratio: usize,
    ) -> Result<Self> {
        let hidden = c * ratio;
        let fc1 = Conv2d::new(init, &format!("{name}.fc1"), c, hidden, 1, 1, 1, true)?;
        let fc2 = Conv2d::new(init, &format!("{name}.fc2"), hidden, c, 1, 1, 1, true)?;
        Ok(Ffn {
            name: name.to_string(),
            fc1,
            fc2,
        })
    }

    /// Names of the output layer's parameters.
    pub fn output_params(&self) -> Vec<String> {
        let mut v = vec![self.fc2.weight_name()];
        v.extend(self.fc2.bias_name());
        v
    }
}

impl Block for Ffn {
    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.silu(h);
        self.fc2.forward(ctx, h)
    }

    fn trace(&self, input: [usize; 4], summary: &mut Summary) -> Result<[usize; 4]> {
        let h = self.fc1.trace(input, summary)?;
        self.fc2.trace(h, summary)
    }
}
