//! SimVSS fusion block.
//!
//! ```text
//! (main, pass) = split(SiLU(BN(conv1x1(I))))
//! Z1 = main + VSS(LN(main))
//! Z2 = Z1 + FFN(BN(Z1))
//! out = SiLU(BN(conv1x1(concat(Z2, pass))))
//! ```

use super::ffn::Ffn;
use super::layers::{BatchNorm2d, ConvBnAct, LayerNorm2d};
use super::params::{Ctx, Init, Summary};
use super::vss::{Vss, VssConfig};
use super::Block;
use crate::error::{Error, Result};
use crate::tensor::{Float, Var};

#[derive(Debug, Clone)]
pub struct SimVss {
    pub name: String,
    pub c: usize,
    pub in_proj: ConvBnAct,
    pub ln: LayerNorm2d,
    pub vss: Vss,
    pub bn: BatchNorm2d,
    pub ffn: Ffn,
    pub out_proj: ConvBnAct,
}

impl SimVss {
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        name: &str,
        c: usize,
        ffn_ratio: usize,
        vss: &VssConfig,
    ) -> Result<Self> {
        if !c.is_multiple_of(2) || c == 0 {
            return Err(Error::shape(
                "simvss",
                format!("{name}: channel count {c} must be even to split in halves"),
            ));
        }
        let half = c / 2;
        Ok(SimVss {
            name: name.to_string(),
            c,
            in_proj: ConvBnAct::new(init, &format!("{name}.in_proj"), c, c, 1, 1, 1, true)?,
            ln: LayerNorm2d::new(init, &format!("{name}.ln"), half)?,
            vss: Vss::new(init, &format!("{name}.vss"), half, vss)?,
            bn: BatchNorm2d::new(init, &format!("{name}.bn"), half)?,
            ffn: Ffn::new(init, &format!("{name}.ffn"), half, ffn_ratio)?,
            out_proj: ConvBnAct::new(init, &format!("{name}.out_proj"), c, c, 1, 1, 1, true)?,
        })
    }

    /// Parameters of the last layer in each residual branch; zeroing them
    /// reduces the block to its input and output projections.
    pub fn residual_output_params(&self) -> Vec<String> {
        let mut v = self.vss.output_params();
        v.extend(self.ffn.output_params());
        v
    }
}

impl Block for SimVss {
    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let half = self.c / 2;
        let y = self.in_proj.forward(ctx, x)?;
        let parts = ctx.tape.split_channels(y, &[half, half])?;
        let (main, pass) = (parts[0], parts[1]);
        let normed = self.ln.forward(ctx, main)?;
        let mixed = self.vss.forward(ctx, normed)?;
        let z1 = ctx.tape.add(main, mixed)?;
        let normed = self.bn.forward(ctx, z1)?;
        let fed = self.ffn.forward(ctx, normed)?;
        let z2 = ctx.tape.add(z1, fed)?;
        let cat = ctx.tape.concat_channels(&[z2, pass])?;
        self.out_proj.forward(ctx, cat)
    }

    fn trace(&self, input: [usize; 4], summary: &mut Summary) -> Result<[usize; 4]> {
        let y = self.in_proj.trace(input, summary)?;
        let half = [y[0], self.c / 2, y[2], y[3]];
        self.ln.trace(half, summary)?;
        self.vss.trace(half, summary)?;
        self.bn.trace(half, summary)?;
        self.ffn.trace(half, summary)?;
        self.out_proj.trace(y, summary)
    }
}
