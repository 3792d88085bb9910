//! ECAConv: a convolution whose first Ĉ output channels are re-weighted by
//! efficient channel attention and then interleaved with the rest.

use super::layers::ConvBnAct;
use super::params::{Ctx, Init, Summary};
use super::Block;
use crate::error::{Error, Result};
use crate::tensor::{Float, Var};

/// Fraction of channels to attend for a layer with `c` channels:
/// `min(1, max(0.1, log2(c) / 10))`.
pub fn strip_ratio(c: usize) -> Result<f64> {
    if c < 1 {
        return Err(Error::invalid(
            "strip_ratio",
            "channel count must be at least 1",
        ));
    }
    Ok(((c as f64).log2() / 10.0).clamp(0.1, 1.0))
}

/// Attention kernel size for `c_hat` attended channels:
/// `(log2(c_hat) + b) / gamma`, rounded down to an odd integer, at least 1.
pub fn adaptive_kernel(c_hat: usize, gamma: f64, b: f64) -> usize {
    let raw = ((c_hat.max(1) as f64).log2() + b) / gamma;
    let k = raw.floor().max(1.0) as usize;
    if k.is_multiple_of(2) {
        k - 1
    } else {
        k
    }
}

/// Channel count associated with kernel size `k`: `2^(gamma·k − b)`.
pub fn channel_map_phi(k: usize, gamma: f64, b: f64) -> f64 {
    (gamma * k as f64 - b).exp2()
}

/// Attended channel count `floor(sigma · c_out)`, at least 1.
pub fn attended_channels(sigma: f64, c_out: usize) -> usize {
    ((sigma * c_out as f64).floor() as usize).clamp(1, c_out.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcaConfig {
    pub sigma: f64,
    pub kernel: usize,
    /// Derive `sigma` and `kernel` from the channel count instead.
    pub adaptive: bool,
    pub gamma: f64,
    pub b: f64,
    pub shuffle_groups: usize,
}

impl Default for EcaConfig {
    fn default() -> Self {
        EcaConfig {
            sigma: 0.5,
            kernel: 3,
            adaptive: false,
            gamma: 2.0,
            b: 1.0,
            shuffle_groups: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EcaConv {
    pub name: String,
    pub conv: ConvBnAct,
    pub c_hat: usize,
    pub k: usize,
    pub shuffle_groups: usize,
}

impl EcaConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        cfg: &EcaConfig,
    ) -> Result<Self> {
        const OP: &str = "eca_conv";
        let (sigma, k) = if cfg.adaptive {
            let sigma = strip_ratio(c_out)?;
            (
                sigma,
                adaptive_kernel(attended_channels(sigma, c_out), cfg.gamma, cfg.b),
            )
        } else {
            (cfg.sigma, cfg.kernel)
        };
        if !(sigma > 0.0 && sigma <= 1.0) {
            return Err(Error::invalid(
                OP,
                format!("{name}: sigma={sigma} outside (0, 1]"),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::invalid(
                OP,
                format!("{name}: attention kernel k={k} must be odd"),
            ));
        }
        if cfg.shuffle_groups == 0 || !c_out.is_multiple_of(cfg.shuffle_groups) {
            return Err(Error::shape(
                OP,
                format!(
                    "{name}: C_out={c_out} not divisible by shuffle groups {}",
                    cfg.shuffle_groups
                ),
            ));
        }
        let c_hat = attended_channels(sigma, c_out);
        assert!(c_hat <= c_out && c_hat + (c_out - c_hat) == c_out);
        let conv = ConvBnAct::new(
            init,
            &format!("{name}.conv"),
            c_in,
            c_out,
            kernel,
            stride,
            1,
            true,
        )?;
        let bound = 1.0 / (k as f64).sqrt();
        init.uniform(&format!("{name}.attn.weight"), &[1, 1, k], bound)?;
        Ok(EcaConv {
            name: name.to_string(),
            conv,
            c_hat,
            k,
            shuffle_groups: cfg.shuffle_groups,
        })
    }

    pub fn c_out(&self) -> usize {
        self.conv.c_out()
    }

    /// Channel attention weights `[N, Ĉ, 1, 1]` for the attended slice.
    pub fn attention<T: Float>(&self, ctx: &mut Ctx<'_, T>, attended: Var) -> Result<Var> {
        let n = ctx.tape.shape(attended)[0];
        let pooled = ctx.tape.global_avg_pool(attended)?;
        let seq = ctx.tape.reshape(pooled, &[n, 1, self.c_hat])?;
        let w = ctx.param(&format!("{}.attn.weight", self.name))?;
        let mixed = ctx.tape.conv1d(seq, w)?;
        let gate = ctx.tape.sigmoid(mixed);
        ctx.tape.reshape(gate, &[n, self.c_hat, 1, 1])
    }

    /// Everything up to and including the concat, before the shuffle.
    pub fn forward_unshuffled<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let c = self.c_out();
        let attended = if self.c_hat == c {
            y
        } else {
            ctx.tape.narrow_channels(y, 0, self.c_hat)?
        };
        let gate = self.attention(ctx, attended)?;
        let scaled = ctx.tape.scale_channels(attended, gate)?;
        if self.c_hat == c {
            return Ok(scaled);
        }
        let bypass = ctx.tape.narrow_channels(y, self.c_hat, c - self.c_hat)?;
        ctx.tape.concat_channels(&[scaled, bypass])
    }
}

impl Block for EcaConv {
    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.forward_unshuffled(ctx, x)?;
        ctx.tape.channel_shuffle(y, self.shuffle_groups)
    }

    fn trace(&self, input: [usize; 4], summary: &mut Summary) -> Result<[usize; 4]> {
        let out = self.conv.trace(input, summary)?;
        let flops = 2 * (out[0] * self.c_hat * self.k) as u64;
        summary.push(
            &format!("{}.attn", self.name),
            &[out[0], self.c_hat, 1, 1],
            self.k as u64,
            flops,
        );
        Ok(out)
    }
}
