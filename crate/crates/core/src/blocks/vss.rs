//! Visual state space module: a gated SSM mixer that scans the feature map
//! in four directions and merges the results.

use super::layers::{check_channels, Conv2d, LayerNorm2d};
use super::params::{Ctx, Init, Summary};
use super::Block;
use crate::error::{Error, Result};
use crate::ssm::{cross_merge_index, cross_scan_index, scan_flops, Discretization, DIRECTIONS};
use crate::tensor::{Float, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VssConfig {
    /// Inner width is `expand · C`.
    pub expand: usize,
    /// SSM state size per channel.
    pub state: usize,
    /// Rank of the step-size projection; `None` means `ceil(inner / 16)`.
    pub dt_rank: Option<usize>,
    pub discretization: Discretization,
}

impl Default for VssConfig {
    fn default() -> Self {
        VssConfig {
            expand: 2,
            state: 16,
            dt_rank: None,
            discretization: Discretization::default(),
        }
    }
}

const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

#[derive(Debug, Clone)]
pub struct Vss {
    pub name: String,
    pub c: usize,
    pub inner: usize,
    pub state: usize,
    pub dt_rank: usize,
    pub discretization: Discretization,
    pub in_proj: Conv2d,
    pub dw: Conv2d,
    pub x_proj: Vec<Conv2d>,
    pub dt_proj: Vec<Conv2d>,
    pub norm: LayerNorm2d,
    pub out_proj: Conv2d,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl Vss {
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        name: &str,
        c: usize,
        cfg: &VssConfig,
    ) -> Result<Self> {
        if cfg.expand == 0 || cfg.state == 0 {
            return Err(Error::invalid(
                "vss",
                format!("{name}: expand and state must be positive"),
            ));
        }
        let e = cfg.expand * c;
        let n = cfg.state;
        let r = cfg.dt_rank.unwrap_or(e.div_ceil(16)).max(1);
        let in_proj = Conv2d::new(init, &format!("{name}.in_proj"), c, 2 * e, 1, 1, 1, false)?;
        let dw = Conv2d::new(init, &format!("{name}.dw"), e, e, 3, 1, e, true)?;
        let mut x_proj = Vec::with_capacity(4);
        let mut dt_proj = Vec::with_capacity(4);
        for k in 0..DIRECTIONS.len() {
            x_proj.push(Conv2d::new(
                init,
                &format!("{name}.x_proj.{k}"),
                e,
                r + 2 * n,
                1,
                1,
                1,
                false,
            )?);
            let dt_name = format!("{name}.dt_proj.{k}");
            let proj = Conv2d {
                name: dt_name.clone(),
                c_in: r,
                c_out: e,
                k: 1,
                stride: 1,
                groups: 1,
                bias: true,
            };
            init.uniform(
                &proj.weight_name(),
                &proj.weight_shape(),
                1.0 / (r as f64).sqrt(),
            )?;
            let bias: Vec<f64> = (0..e)
                .map(|_| {
                    let u = init.sample(0.0, 1.0);
                    let dt = (DT_MIN.ln() + u * (DT_MAX.ln() - DT_MIN.ln())).exp();
                    inverse_softplus(dt)
                })
                .collect();
            init.param(&format!("{dt_name}.bias"), Tensor::new(&[e], bias)?)?;
            dt_proj.push(proj);
            let a_log: Vec<f64> = (0..e)
                .flat_map(|_| (1..=n).map(|s| (s as f64).ln()))
                .collect();
            init.param(&format!("{name}.a_log.{k}"), Tensor::new(&[e, n], a_log)?)?;
            init.constant(&format!("{name}.q.{k}"), &[e], 1.0)?;
        }
        let norm = LayerNorm2d::new(init, &format!("{name}.norm"), e)?;
        let out_proj = Conv2d::new(init, &format!("{name}.out_proj"), e, c, 1, 1, 1, false)?;
        Ok(Vss {
            name: name.to_string(),
            c,
            inner: e,
            state: n,
            dt_rank: r,
            discretization: cfg.discretization,
            in_proj,
            dw,
            x_proj,
            dt_proj,
            norm,
            out_proj,
        })
    }

    pub fn output_params(&self) -> Vec<String> {
        vec![self.out_proj.weight_name()]
    }
}

impl Block for Vss {
    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (nb, _, h, w) = ctx.tape.value(x).dims4("vss")?;
        let (e, n, r, l) = (self.inner, self.state, self.dt_rank, h * w);
        let proj = self.in_proj.forward(ctx, x)?;
        let parts = ctx.tape.split_channels(proj, &[e, e])?;
        let (xs, z) = (parts[0], parts[1]);
        let xs = self.dw.forward(ctx, xs)?;
        let xs = ctx.tape.silu(xs);

        let mut merged: Option<Var> = None;
        for (k, &dir) in DIRECTIONS.iter().enumerate() {
            let xp = self.x_proj[k].forward(ctx, xs)?;
            let parts = ctx.tape.split_channels(xp, &[r, n, n])?;
            let dt = self.dt_proj[k].forward(ctx, parts[0])?;
            let delta = ctx.tape.softplus(dt);

            let wide = cross_scan_index(dir, nb, e, h, w);
            let narrow = cross_scan_index(dir, nb, n, h, w);
            let x_seq = ctx.tape.gather(xs, wide.clone(), &[nb, l, e])?;
            let d_seq = ctx.tape.gather(delta, wide, &[nb, l, e])?;
            let b_seq = ctx.tape.gather(parts[1], narrow.clone(), &[nb, l, n])?;
            let p_seq = ctx.tape.gather(parts[2], narrow, &[nb, l, n])?;

            let a_log = ctx.param(&format!("{}.a_log.{k}", self.name))?;
            let a = ctx.tape.neg_exp(a_log);
            let q = ctx.param(&format!("{}.q.{k}", self.name))?;
            let y =
                ctx.tape
                    .selective_scan(x_seq, d_seq, a, b_seq, p_seq, q, self.discretization)?;
            let y = ctx
                .tape
                .gather(y, cross_merge_index(dir, nb, e, h, w), &[nb, e, h, w])?;
            merged = Some(match merged {
                Some(acc) => ctx.tape.add(acc, y)?,
                None => y,
            });
        }
        let y = self.norm.forward(ctx, merged.expect("four directions"))?;
        let gate = ctx.tape.silu(z);
        let y = ctx.tape.mul(y, gate)?;
        self.out_proj.forward(ctx, y)
    }

    fn trace(&self, input: [usize; 4], summary: &mut Summary) -> Result<[usize; 4]> {
        check_channels(&self.name, input, self.c)?;
        let [nb, _, h, w] = input;
        let (e, n, r) = (self.inner, self.state, self.dt_rank);
        let proj = self.in_proj.trace(input, summary)?;
        let half = [proj[0], e, proj[2], proj[3]];
        let xs = self.dw.trace(half, summary)?;
        for k in 0..DIRECTIONS.len() {
            self.x_proj[k].trace(xs, summary)?;
            self.dt_proj[k].trace([nb, r, h, w], summary)?;
            let scan_params = (e * n + e) as u64;
            summary.push(
                &format!("{}.scan.{k}", self.name),
                &[nb, h * w, e],
                scan_params,
                scan_flops(nb, h * w, e, n),
            );
        }
        self.norm.trace(xs, summary)?;
        self.out_proj.trace(xs, summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_softplus_roundtrip() {
        for y in [1e-3, 0.05, 0.1, 2.0] {
            let x = inverse_softplus(y);
            assert!((crate::tensor::kernels::softplus(x) - y).abs() < 1e-12);
        }
    }
}
