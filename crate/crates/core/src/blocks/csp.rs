//! ECACSP: a cross-stage-partial block with stacked ECAConv pairs on the
//! main path and a depthwise-separable side path.

use super::eca::{EcaConfig, EcaConv};
use super::layers::ConvBnAct;
use super::params::{Ctx, Init, Summary};
use super::Block;
use crate::error::{Error, Result};
use crate::tensor::{Float, Var};

/// Two stride-1 3×3 ECAConvs, optionally wrapped in a residual add.
#[derive(Debug, Clone)]
pub struct EcaUnit {
    pub first: EcaConv,
    pub second: EcaConv,
    pub shortcut: bool,
}

impl Block for EcaUnit {
    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.first.forward(ctx, x)?;
        let y = self.second.forward(ctx, y)?;
        if self.shortcut {
            ctx.tape.add(x, y)
        } else {
            Ok(y)
        }
    }

    fn trace(&self, input: [usize; 4], summary: &mut Summary) -> Result<[usize; 4]> {
        let y = self.first.trace(input, summary)?;
        self.second.trace(y, summary)
    }
}

#[derive(Debug, Clone)]
pub struct EcaCsp {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub reduce: ConvBnAct,
    pub units: Vec<EcaUnit>,
    pub depthwise: ConvBnAct,
    pub pointwise: ConvBnAct,
    pub merge: ConvBnAct,
}

impl EcaCsp {
    /// `c_out` must be a multiple of 4: the main and side paths each carry
    /// `c_out / 2` channels, which ECAConv splits again in two.
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        repeats: usize,
        shortcut: bool,
        cfg: &EcaConfig,
    ) -> Result<Self> {
        if !c_out.is_multiple_of(4) {
            return Err(Error::shape(
                "eca_csp",
                format!("{name}: C_out={c_out} must be a multiple of 4"),
            ));
        }
        let c_h = c_out / 2;
        let reduce = ConvBnAct::new(init, &format!("{name}.reduce"), c_in, c_h, 1, 1, 1, true)?;
        let units = (0..repeats)
            .map(|i| {
                let p = format!("{name}.units.{i}");
                Ok(EcaUnit {
                    first: EcaConv::new(init, &format!("{p}.first"), c_h, c_h, 3, 1, cfg)?,
                    second: EcaConv::new(init, &format!("{p}.second"), c_h, c_h, 3, 1, cfg)?,
                    shortcut,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let depthwise = ConvBnAct::new(
            init,
            &format!("{name}.side.dw"),
            c_in,
            c_in,
            3,
            1,
            c_in,
            true,
        )?;
        let pointwise = ConvBnAct::new(init, &format!("{name}.side.pw"), c_in, c_h, 1, 1, 1, true)?;
        let merge = ConvBnAct::new(
            init,
            &format!("{name}.merge"),
            2 * c_h,
            c_out,
            1,
            1,
            1,
            true,
        )?;
        Ok(EcaCsp {
            name: name.to_string(),
            c_in,
            c_out,
            reduce,
            units,
            depthwise,
            pointwise,
            merge,
        })
    }
}

impl Block for EcaCsp {
    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut main = self.reduce.forward(ctx, x)?;
        for unit in &self.units {
            main = unit.forward(ctx, main)?;
        }
        let side = self.depthwise.forward(ctx, x)?;
        let side = self.pointwise.forward(ctx, side)?;
        let cat = ctx.tape.concat_channels(&[main, side])?;
        let mixed = ctx.tape.channel_shuffle(cat, 2)?;
        self.merge.forward(ctx, mixed)
    }

    fn trace(&self, input: [usize; 4], summary: &mut Summary) -> Result<[usize; 4]> {
        let mut main = self.reduce.trace(input, summary)?;
        for unit in &self.units {
            main = unit.trace(main, summary)?;
        }
        let side = self.depthwise.trace(input, summary)?;
        let side = self.pointwise.trace(side, summary)?;
        self.merge
            .trace([main[0], main[1] + side[1], main[2], main[3]], summary)
    }
}
