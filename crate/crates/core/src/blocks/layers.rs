//! Basic layers: convolution, batch and layer norm, and conv-BN-SiLU units.

use super::params::{Ctx, Init, Summary};
use super::Block;
use crate::error::{Error, Result};
use crate::tensor::kernels::Conv2dGeom;
use crate::tensor::{Float, Tensor, Var};

/// 2D convolution with "same" padding `k / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
            return Err(Error::shape(
                "conv2d",
                format!("{name}: C_in={c_in} and C_out={c_out} must both be divisible by groups={groups}"),
            ));
        }
        let conv = Conv2d {
            name: name.to_string(),
            c_in,
            c_out,
            k,
            stride,
            groups,
            bias,
        };
        let fan_in = (c_in / groups * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        init.uniform(&conv.weight_name(), &conv.weight_shape(), bound)?;
        if bias {
            init.uniform(&format!("{name}.bias"), &[c_out], bound)?;
        }
        Ok(conv)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> Option<String> {
        self.bias.then(|| format!("{}.bias", self.name))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in / self.groups, self.k, self.k]
    }

    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn num_params(&self) -> u64 {
        (self.weight_shape().iter().product::<usize>() + if self.bias { self.c_out } else { 0 })
            as u64
    }
}

impl Block for Conv2d {
    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight_name())?;
        let b = match self.bias_name() {
            Some(n) => Some(ctx.param(&n)?),
            None => None,
        };
        ctx.tape
            .conv2d(x, w, b, self.stride, self.pad(), self.groups)
    }

    fn trace(&self, input: [usize; 4], summary: &mut Summary) -> Result<[usize; 4]> {
        let geo = Conv2dGeom::new(
            &input,
            &self.weight_shape(),
            self.stride,
            self.pad(),
            self.groups,
        )
        .map_err(|e| Error::shape("conv2d", format!("{}: {e}", self.name)))?;
        let out = geo.out_shape();
        summary.push(&self.name, &out, self.num_params(), geo.flops());
        Ok(out)
    }
}

/// Batch norm over the channel axis with learned gain and shift.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub c: usize,
}

impl BatchNorm2d {
    pub fn new<T: Float>(init: &mut Init<'_, T>, name: &str, c: usize) -> Result<Self> {
        init.constant(&format!("{name}.weight"), &[c], 1.0)?;
        init.constant(&format!("{name}.bias"), &[c], 0.0)?;
        init.buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c]))?;
        init.buffer(&format!("{name}.running_var"), Tensor::ones(&[c]))?;
        Ok(BatchNorm2d {
            name: name.to_string(),
            c,
        })
    }
}

impl Block for BatchNorm2d {
    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gain = ctx.param(&format!("{}.weight", self.name))?;
        let shift = ctx.param(&format!("{}.bias", self.name))?;
        let mean = ctx.store.buffer(&format!("{}.running_mean", self.name))?;
        let var = ctx.store.buffer(&format!("{}.running_var", self.name))?;
        let mode = ctx.mode();
        ctx.tape
            .batch_norm(x, gain, shift, (mean.data(), var.data()), mode, &self.name)
    }

    fn trace(&self, input: [usize; 4], summary: &mut Summary) -> Result<[usize; 4]> {
        check_channels(&self.name, input, self.c)?;
        summary.push(&self.name, &input, 2 * self.c as u64, 0);
        Ok(input)
    }
}

/// Normalization across channels at each spatial position.
#[derive(Debug, Clone)]
pub struct LayerNorm2d {
    pub name: String,
    pub c: usize,
}

impl LayerNorm2d {
    pub fn new<T: Float>(init: &mut Init<'_, T>, name: &str, c: usize) -> Result<Self> {
        init.constant(&format!("{name}.weight"), &[c], 1.0)?;
        init.constant(&format!("{name}.bias"), &[c], 0.0)?;
        Ok(LayerNorm2d {
            name: name.to_string(),
            c,
        })
    }
}

impl Block for LayerNorm2d {
    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gain = ctx.param(&format!("{}.weight", self.name))?;
        let shift = ctx.param(&format!("{}.bias", self.name))?;
        ctx.tape.layer_norm(x, gain, shift)
    }

    fn trace(&self, input: [usize; 4], summary: &mut Summary) -> Result<[usize; 4]> {
        check_channels(&self.name, input, self.c)?;
        summary.push(&self.name, &input, 2 * self.c as u64, 0);
        Ok(input)
    }
}

pub(crate) fn check_channels(name: &str, input: [usize; 4], c: usize) -> Result<()> {
    if input[1] != c {
        return Err(Error::shape(
            "block",
            format!("{name}: expected {c} input channels, got {}", input[1]),
        ));
    }
    Ok(())
}

/// Bias-free convolution, batch norm and optional SiLU.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: bool,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        act: bool,
    ) -> Result<Self> {
        let conv = Conv2d::new(
            init,
            &format!("{name}.conv"),
            c_in,
            c_out,
            k,
            stride,
            groups,
            false,
        )?;
        let bn = BatchNorm2d::new(init, &format!("{name}.bn"), c_out)?;
        Ok(ConvBnAct { conv, bn, act })
    }

    pub fn c_out(&self) -> usize {
        self.conv.c_out
    }
}

impl Block for ConvBnAct {
    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(if self.act { ctx.tape.silu(y) } else { y })
    }

    fn trace(&self, input: [usize; 4], summary: &mut Summary) -> Result<[usize; 4]> {
        let y = self.conv.trace(input, summary)?;
        self.bn.trace(y, summary)
    }
}
