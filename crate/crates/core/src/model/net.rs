//! Detector assembly: stem, ECA backbone, SimVSS fusion, PAFPN neck and the
//! decoupled head.

use super::scale::ModelConfig;
use crate::blocks::{
    Block, Conv2d, ConvBnAct, Ctx, EcaConv, EcaCsp, Init, ParamStore, SimVss, Stem, Summary,
};
use crate::error::{Error, Result};
use crate::tensor::kernels::NormMode;
use crate::tensor::{Float, Tape, Tensor, Var};

/// Strides of the three output levels.
pub const STRIDES: [usize; 3] = [8, 16, 32];
/// Prior foreground probability used to initialize class logits.
pub const CLS_PRIOR: f64 = 0.01;
/// Initial regression output in stride units.
pub const REG_INIT: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: Stem,
    pub stage2: EcaCsp,
    /// Stride-2 ECAConv followed by an ECACSP, for P3, P4 and P5.
    pub stages: Vec<(EcaConv, EcaCsp)>,
}

#[derive(Debug, Clone)]
pub struct Neck {
    pub top_down4: EcaCsp,
    pub top_down3: EcaCsp,
    pub down3: ConvBnAct,
    pub bottom_up4: EcaCsp,
    pub down4: ConvBnAct,
    pub bottom_up5: EcaCsp,
}

#[derive(Debug, Clone)]
pub struct HeadLevel {
    pub cls: [ConvBnAct; 2],
    pub cls_out: Conv2d,
    pub reg: [ConvBnAct; 2],
    pub reg_out: Conv2d,
}

/// Architecture description; weights live in the model's [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Arch {
    pub config: ModelConfig,
    pub channels: [usize; 5],
    pub backbone: Backbone,
    pub fusion: Vec<SimVss>,
    pub neck: Neck,
    pub head: Vec<HeadLevel>,
}

/// Forward-pass outputs as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    /// Fused P3, P4, P5.
    pub pyramid: [Var; 3],
    /// Class logits `[N, num_classes, h, w]` per level.
    pub cls: [Var; 3],
    /// Non-negative left/top/right/bottom distances in stride units, `[N, 4, h, w]`.
    pub reg: [Var; 3],
}

/// Concrete head outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps<T> {
    pub cls: Vec<Tensor<T>>,
    pub reg: Vec<Tensor<T>>,
    pub strides: [usize; 3],
}

/// Concrete forward outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult<T> {
    pub pyramid: Vec<Tensor<T>>,
    pub maps: HeadMaps<T>,
}

impl HeadLevel {
    /// Class branch ending in `nc` logits initialized to the class prior, and
    /// a box branch ending in four distances initialized near [`REG_INIT`].
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        name: &str,
        c: usize,
        c_cls: usize,
        c_reg: usize,
        nc: usize,
    ) -> Result<Self> {
        let level = HeadLevel {
            cls: [
                ConvBnAct::new(init, &format!("{name}.cls.0"), c, c_cls, 3, 1, 1, true)?,
                ConvBnAct::new(init, &format!("{name}.cls.1"), c_cls, c_cls, 3, 1, 1, true)?,
            ],
            cls_out: Conv2d::new(init, &format!("{name}.cls.out"), c_cls, nc, 1, 1, 1, true)?,
            reg: [
                ConvBnAct::new(init, &format!("{name}.reg.0"), c, c_reg, 3, 1, 1, true)?,
                ConvBnAct::new(init, &format!("{name}.reg.1"), c_reg, c_reg, 3, 1, 1, true)?,
            ],
            reg_out: Conv2d::new(init, &format!("{name}.reg.out"), c_reg, 4, 1, 1, 1, true)?,
        };
        let prior = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        let reg_bias = REG_INIT + (-(-REG_INIT).exp_m1()).ln();
        init.set(&level.cls_out.bias_name().expect("bias"), prior)?;
        init.set(&level.reg_out.bias_name().expect("bias"), reg_bias)?;
        Ok(level)
    }

    /// Class logits and softplus distances.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let mut a = x;
        for l in &self.cls {
            a = l.forward(ctx, a)?;
        }
        let cls = self.cls_out.forward(ctx, a)?;
        let mut b = x;
        for l in &self.reg {
            b = l.forward(ctx, b)?;
        }
        let r = self.reg_out.forward(ctx, b)?;
        Ok((cls, ctx.tape.softplus(r)))
    }

    pub fn trace(
        &self,
        input: [usize; 4],
        summary: &mut Summary,
    ) -> Result<([usize; 4], [usize; 4])> {
        let mut a = input;
        for l in &self.cls {
            a = l.trace(a, summary)?;
        }
        let cls = self.cls_out.trace(a, summary)?;
        let mut b = input;
        for l in &self.reg {
            b = l.trace(b, summary)?;
        }
        Ok((cls, self.reg_out.trace(b, summary)?))
    }
}

impl Arch {
    fn build<T: Float>(config: &ModelConfig, init: &mut Init<'_, T>) -> Result<Self> {
        config.scale.validate()?;
        let ch = config.scale.channels()?;
        let reps = config.scale.repeats();
        let eca = &config.eca;
        let nc = config.scale.num_classes;

        let stem = Stem::new(init, "backbone.stem", 3, ch[0])?;
        let stage2 = EcaCsp::new(
            init,
            "backbone.stage2.csp",
            ch[0],
            ch[1],
            reps[0],
            true,
            eca,
        )?;
        let mut stages = Vec::new();
        for i in 0..3 {
            let name = format!("backbone.stage{}", i + 3);
            let down = EcaConv::new(
                init,
                &format!("{name}.ecaconv"),
                ch[i + 1],
                ch[i + 2],
                3,
                2,
                eca,
            )?;
            let csp = EcaCsp::new(
                init,
                &format!("{name}.csp"),
                ch[i + 2],
                ch[i + 2],
                reps[i + 1],
                true,
                eca,
            )?;
            stages.push((down, csp));
        }
        let fusion = (0..3)
            .map(|i| {
                SimVss::new(
                    init,
                    &format!("fusion.p{}", i + 3),
                    ch[i + 2],
                    config.ffn_ratio,
                    &config.vss,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let (c3, c4, c5, n) = (ch[2], ch[3], ch[4], reps[4]);
        let neck = Neck {
            top_down4: EcaCsp::new(init, "neck.top_down4", c5 + c4, c4, n, false, eca)?,
            top_down3: EcaCsp::new(init, "neck.top_down3", c4 + c3, c3, n, false, eca)?,
            down3: ConvBnAct::new(init, "neck.down3", c3, c3, 3, 2, 1, true)?,
            bottom_up4: EcaCsp::new(init, "neck.bottom_up4", c3 + c4, c4, n, false, eca)?,
            down4: ConvBnAct::new(init, "neck.down4", c4, c4, 3, 2, 1, true)?,
            bottom_up5: EcaCsp::new(init, "neck.bottom_up5", c4 + c5, c5, n, false, eca)?,
        };

        let c_cls = c3.max(nc);
        let c_reg = (c3 / 4).max(16);
        let head = [c3, c4, c5]
            .iter()
            .enumerate()
            .map(|(i, &c)| HeadLevel::new(init, &format!("head.p{}", i + 3), c, c_cls, c_reg, nc))
            .collect::<Result<Vec<_>>>()?;
        let arch = Arch {
            config: config.clone(),
            channels: ch,
            backbone: Backbone {
                stem,
                stage2,
                stages,
            },
            fusion,
            neck,
            head,
        };
        Ok(arch)
    }

    pub fn num_classes(&self) -> usize {
        self.config.scale.num_classes
    }

    /// Reject inputs whose sides are not multiples of 32.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = STRIDES[2];
        if !h.is_multiple_of(s) || !w.is_multiple_of(s) || h == 0 || w == 0 {
            let (ph, pw) = (h.div_ceil(s).max(1) * s, w.div_ceil(s).max(1) * s);
            return Err(Error::shape(
                "model",
                format!("input {h}x{w} is not divisible by {s}; pad to {ph}x{pw} (add {} rows, {} columns)", ph - h, pw - w),
            ));
        }
        Ok(())
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<Outputs> {
        let (_, c, h, w) = ctx.tape.value(images).dims4("model")?;
        if c != 3 {
            return Err(Error::shape(
                "model",
                format!("expected 3 input channels, got {c}"),
            ));
        }
        self.check_input(h, w)?;
        let bb = &self.backbone;
        let mut x = bb.stem.forward(ctx, images)?;
        x = bb.stage2.forward(ctx, x)?;
        let mut feats = Vec::with_capacity(3);
        for (down, csp) in &bb.stages {
            x = down.forward(ctx, x)?;
            x = csp.forward(ctx, x)?;
            feats.push(x);
        }
        let mut p = [feats[0], feats[1], feats[2]];
        for (f, block) in p.iter_mut().zip(&self.fusion) {
            *f = block.forward(ctx, *f)?;
        }

        let nk = &self.neck;
        let up5 = ctx.tape.upsample_nearest2(p[2])?;
        let cat = ctx.tape.concat_channels(&[up5, p[1]])?;
        let t4 = nk.top_down4.forward(ctx, cat)?;
        let up4 = ctx.tape.upsample_nearest2(t4)?;
        let cat = ctx.tape.concat_channels(&[up4, p[0]])?;
        let o3 = nk.top_down3.forward(ctx, cat)?;
        let d3 = nk.down3.forward(ctx, o3)?;
        let cat = ctx.tape.concat_channels(&[d3, t4])?;
        let o4 = nk.bottom_up4.forward(ctx, cat)?;
        let d4 = nk.down4.forward(ctx, o4)?;
        let cat = ctx.tape.concat_channels(&[d4, p[2]])?;
        let o5 = nk.bottom_up5.forward(ctx, cat)?;

        let mut cls = Vec::with_capacity(3);
        let mut reg = Vec::with_capacity(3);
        for (level, x) in self.head.iter().zip([o3, o4, o5]) {
            let (c, r) = level.forward(ctx, x)?;
            cls.push(c);
            reg.push(r);
        }
        Ok(Outputs {
            pyramid: p,
            cls: [cls[0], cls[1], cls[2]],
            reg: [reg[0], reg[1], reg[2]],
        })
    }

    /// Per-layer analytic parameters and FLOPs for a single `h × w` image.
    pub fn summary(&self, h: usize, w: usize) -> Result<Summary> {
        self.check_input(h, w)?;
        let mut s = Summary::default();
        let bb = &self.backbone;
        let mut x = bb.stem.trace([1, 3, h, w], &mut s)?;
        x = bb.stage2.trace(x, &mut s)?;
        let mut feats = Vec::new();
        for (down, csp) in &bb.stages {
            x = down.trace(x, &mut s)?;
            x = csp.trace(x, &mut s)?;
            feats.push(x);
        }
        for (f, block) in feats.iter_mut().zip(&self.fusion) {
            *f = block.trace(*f, &mut s)?;
        }
        let up = |t: [usize; 4]| [t[0], t[1], 2 * t[2], 2 * t[3]];
        let cat = |a: [usize; 4], b: [usize; 4]| [a[0], a[1] + b[1], a[2], a[3]];
        let nk = &self.neck;
        let t4 = nk.top_down4.trace(cat(up(feats[2]), feats[1]), &mut s)?;
        let o3 = nk.top_down3.trace(cat(up(t4), feats[0]), &mut s)?;
        let d3 = nk.down3.trace(o3, &mut s)?;
        let o4 = nk.bottom_up4.trace(cat(d3, t4), &mut s)?;
        let d4 = nk.down4.trace(o4, &mut s)?;
        let o5 = nk.bottom_up5.trace(cat(d4, feats[2]), &mut s)?;
        for (level, x) in self.head.iter().zip([o3, o4, o5]) {
            level.trace(x, &mut s)?;
        }
        Ok(s)
    }
}

/// A detector: architecture plus weights.
#[derive(Debug, Clone)]
pub struct Model<T: Float> {
    pub arch: Arch,
    pub store: ParamStore<T>,
}

impl<T: Float> Model<T> {
    /// Deterministic for a fixed `(config, seed)`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = Arch::build(config, &mut Init::new(&mut store, seed))?;
        Ok(Model { arch, store })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    pub fn count_params(&self) -> u64 {
        self.store.num_params()
    }

    /// Analytic FLOPs (2 × multiply-adds) for one `h × w` image.
    pub fn count_flops(&self, h: usize, w: usize) -> Result<u64> {
        Ok(self.arch.summary(h, w)?.total_flops())
    }

    /// Inference-mode forward pass on `[N, 3, H, W]` images.
    pub fn forward(&self, images: &Tensor<T>) -> Result<ForwardResult<T>> {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &self.store, NormMode::Infer);
        let x = ctx.tape.constant(images.clone());
        let out = self.arch.forward(&mut ctx, x)?;
        let get = |vs: &[Var; 3]| {
            vs.iter()
                .map(|&v| tape.value(v).clone())
                .collect::<Vec<_>>()
        };
        Ok(ForwardResult {
            pyramid: get(&out.pyramid),
            maps: HeadMaps {
                cls: get(&out.cls),
                reg: get(&out.reg),
                strides: STRIDES,
            },
        })
    }
}
