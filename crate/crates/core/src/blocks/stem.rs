//! Two stride-2 conv units taking an image to quarter resolution.

use super::layers::ConvBnAct;
use super::params::{Ctx, Init, Summary};
use super::Block;
use crate::error::{Error, Result};
use crate::tensor::{Float, Var};

#[derive(Debug, Clone)]
pub struct Stem {
    pub first: ConvBnAct,
    pub second: ConvBnAct,
}

impl Stem {
    /// `3 → c1 / 2 → c1`, each step a 3×3 stride-2 conv + BN + SiLU.
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        name: &str,
        c_in: usize,
        c1: usize,
    ) -> Result<Self> {
        let mid = (c1 / 2).max(1);
        Ok(Stem {
            first: ConvBnAct::new(init, &format!("{name}.0"), c_in, mid, 3, 2, 1, true)?,
            second: ConvBnAct::new(init, &format!("{name}.1"), mid, c1, 3, 2, 1, true)?,
        })
    }

    fn check(h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(4) || !w.is_multiple_of(4) {
            return Err(Error::shape(
                "stem",
                format!("input {h}x{w} must have sides divisible by 4"),
            ));
        }
        Ok(())
    }
}

impl Block for Stem {
    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (_, _, h, w) = ctx.tape.value(x).dims4("stem")?;
        Self::check(h, w)?;
        let y = self.first.forward(ctx, x)?;
        self.second.forward(ctx, y)
    }

    fn trace(&self, input: [usize; 4], summary: &mut Summary) -> Result<[usize; 4]> {
        Self::check(input[2], input[3])?;
        let y = self.first.trace(input, summary)?;
        self.second.trace(y, summary)
    }
}
