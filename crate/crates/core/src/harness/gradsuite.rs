//! Registry of finite-difference gradient checks at micro shapes, one entry
//! per differentiable layer or block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    grad_check_block, BatchNorm2d, Block, Conv2d, Ctx, EcaConfig, EcaConv, EcaCsp, Ffn, Init,
    LayerNorm2d, ParamStore, SimVss, Stem, Summary, Vss, VssConfig,
};
use crate::error::Result;
use crate::model::HeadLevel;
use crate::ssm::Discretization;
use crate::tensor::gradcheck::{grad_check, GradCheckReport};
use crate::tensor::kernels::NormMode;
use crate::tensor::{Float, Tape, Tensor, Var};

/// Relative-error ceiling used by the suite.
pub const SUITE_TOLERANCE: f64 = 1e-4;

pub struct GradCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<GradCheckReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseOutcome {
    pub name: &'static str,
    pub seeds: usize,
    pub passed: usize,
    pub max_rel_err: f64,
    /// First failing seed, if any.
    pub first_failure: Option<u64>,
}

impl CaseOutcome {
    pub fn pass(&self) -> bool {
        self.passed == self.seeds
    }
}

fn rand<T: Float>(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::rand_uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn micro_vss() -> VssConfig {
    VssConfig {
        state: 3,
        ..VssConfig::default()
    }
}

fn check_block<B: Block>(
    build: impl FnOnce(&mut Init<'_, f64>) -> Result<B>,
    shape: &[usize],
    mode: NormMode,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let block = build(&mut Init::new(&mut store, seed))?;
    let x = rand(seed ^ 0x5eed, shape, -1.0, 1.0);
    grad_check_block(&block, &store, &x, mode, SUITE_TOLERANCE, seed)
}

/// Head level with both branches concatenated so it fits [`Block`].
struct HeadProbe(HeadLevel);

impl Block for HeadProbe {
    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (cls, reg) = self.0.forward(ctx, x)?;
        ctx.tape.concat_channels(&[cls, reg])
    }

    fn trace(&self, input: [usize; 4], summary: &mut Summary) -> Result<[usize; 4]> {
        let (c, r) = self.0.trace(input, summary)?;
        Ok([c[0], c[1] + r[1], c[2], c[3]])
    }
}

fn probe_scalar(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let probe = rand(seed ^ 0x9e37, tape.shape(y), -1.0, 1.0);
    tape.dot_const(y, probe)
}

fn case_conv2d(seed: u64) -> Result<GradCheckReport> {
    let stride = 1 + (seed % 2) as usize;
    let groups = 1 + ((seed / 2) % 2) as usize;
    check_block(
        |i| Conv2d::new(i, "conv", 4, 4, 3, stride, groups, true),
        &[2, 4, 5, 5],
        NormMode::Infer,
        seed,
    )
}

fn case_conv1d(seed: u64) -> Result<GradCheckReport> {
    let k = [1, 3, 5][(seed % 3) as usize];
    let inputs = [
        rand(seed, &[2, 1, 7], -1.0, 1.0),
        rand(seed + 1, &[1, 1, k], -1.0, 1.0),
    ];
    grad_check(
        |tape: &mut Tape<f64>, v: &[Var]| {
            let y = tape.conv1d(v[0], v[1])?;
            probe_scalar(tape, y, seed)
        },
        &inputs,
        SUITE_TOLERANCE,
    )
}

fn case_batch_norm(seed: u64) -> Result<GradCheckReport> {
    check_block(
        |i| BatchNorm2d::new(i, "bn", 3),
        &[2, 3, 3, 3],
        NormMode::Train,
        seed,
    )
}

fn case_layer_norm(seed: u64) -> Result<GradCheckReport> {
    check_block(
        |i| LayerNorm2d::new(i, "ln", 4),
        &[2, 4, 3, 2],
        NormMode::Train,
        seed,
    )
}

fn case_activations(seed: u64) -> Result<GradCheckReport> {
    let inputs = [rand(seed, &[3, 7], -3.0, 3.0)];
    grad_check(
        |tape: &mut Tape<f64>, v: &[Var]| {
            let parts = [
                tape.silu(v[0]),
                tape.sigmoid(v[0]),
                tape.softplus(v[0]),
                tape.neg_exp(v[0]),
            ];
            let mut acc = parts[0];
            for &p in &parts[1..] {
                acc = tape.add(acc, p)?;
            }
            probe_scalar(tape, acc, seed)
        },
        &inputs,
        SUITE_TOLERANCE,
    )
}

fn case_eca(seed: u64) -> Result<GradCheckReport> {
    let cfg = EcaConfig {
        adaptive: seed % 2 == 1,
        ..EcaConfig::default()
    };
    check_block(
        |i| EcaConv::new(i, "eca", 4, 8, 3, 1, &cfg),
        &[2, 4, 4, 4],
        NormMode::Train,
        seed,
    )
}

fn case_csp(seed: u64) -> Result<GradCheckReport> {
    let shortcut = seed.is_multiple_of(2);
    check_block(
        |i| EcaCsp::new(i, "csp", 8, 8, 1, shortcut, &EcaConfig::default()),
        &[1, 8, 4, 4],
        NormMode::Train,
        seed,
    )
}

fn case_vss(seed: u64) -> Result<GradCheckReport> {
    let disc = if seed.is_multiple_of(2) {
        Discretization::Taylor
    } else {
        Discretization::Zoh
    };
    let cfg = VssConfig {
        discretization: disc,
        ..micro_vss()
    };
    check_block(
        |i| Vss::new(i, "vss", 4, &cfg),
        &[1, 4, 3, 3],
        NormMode::Infer,
        seed,
    )
}

fn case_simvss(seed: u64) -> Result<GradCheckReport> {
    check_block(
        |i| SimVss::new(i, "sv", 8, 2, &micro_vss()),
        &[1, 8, 3, 3],
        NormMode::Train,
        seed,
    )
}

fn case_ffn(seed: u64) -> Result<GradCheckReport> {
    check_block(
        |i| Ffn::new(i, "ffn", 4, 2),
        &[2, 4, 3, 3],
        NormMode::Infer,
        seed,
    )
}

fn case_stem(seed: u64) -> Result<GradCheckReport> {
    check_block(
        |i| Stem::new(i, "stem", 3, 8),
        &[1, 3, 8, 8],
        NormMode::Train,
        seed,
    )
}

fn case_head(seed: u64) -> Result<GradCheckReport> {
    check_block(
        |i| Ok(HeadProbe(HeadLevel::new(i, "head", 8, 4, 4, 3)?)),
        &[2, 8, 3, 3],
        NormMode::Train,
        seed,
    )
}

fn case_scan(seed: u64) -> Result<GradCheckReport> {
    let disc = if seed.is_multiple_of(2) {
        Discretization::Taylor
    } else {
        Discretization::Zoh
    };
    let (bt, l, d, n) = (2, 5, 3, 4);
    let inputs = [
        rand(seed, &[bt, l, d], -1.0, 1.0),
        rand(seed + 1, &[bt, l, d], 0.05, 0.8),
        rand(seed + 2, &[d, n], -2.0, -0.1),
        rand(seed + 3, &[bt, l, n], -1.0, 1.0),
        rand(seed + 4, &[bt, l, n], -1.0, 1.0),
        rand(seed + 5, &[d], -1.0, 1.0),
    ];
    grad_check(
        |tape: &mut Tape<f64>, v: &[Var]| {
            let y = tape.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], disc)?;
            probe_scalar(tape, y, seed)
        },
        &inputs,
        SUITE_TOLERANCE,
    )
}

/// Every registered check, in report order.
pub fn grad_suite() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "conv2d",
            run: case_conv2d,
        },
        GradCase {
            name: "conv1d",
            run: case_conv1d,
        },
        GradCase {
            name: "batch_norm",
            run: case_batch_norm,
        },
        GradCase {
            name: "layer_norm",
            run: case_layer_norm,
        },
        GradCase {
            name: "activations",
            run: case_activations,
        },
        GradCase {
            name: "scan",
            run: case_scan,
        },
        GradCase {
            name: "ecaconv",
            run: case_eca,
        },
        GradCase {
            name: "ecacsp",
            run: case_csp,
        },
        GradCase {
            name: "vss",
            run: case_vss,
        },
        GradCase {
            name: "simvss",
            run: case_simvss,
        },
        GradCase {
            name: "ffn",
            run: case_ffn,
        },
        GradCase {
            name: "stem",
            run: case_stem,
        },
        GradCase {
            name: "head",
            run: case_head,
        },
    ]
}

/// Run one case over seeds `0..seeds`. Errors count as failures.
pub fn run_case(case: &GradCase, seeds: usize) -> CaseOutcome {
    let mut out = CaseOutcome {
        name: case.name,
        seeds,
        passed: 0,
        max_rel_err: 0.0,
        first_failure: None,
    };
    for seed in 0..seeds as u64 {
        match (case.run)(seed) {
            Ok(r) => {
                out.max_rel_err = out.max_rel_err.max(r.max_rel_err);
                if r.pass {
                    out.passed += 1;
                    continue;
                }
            }
            Err(_) => out.max_rel_err = f64::INFINITY,
        }
        out.first_failure.get_or_insert(seed);
    }
    out
}

/// Run every case whose name is in `only` (all when empty).
pub fn run_grad_suite(seeds: usize, only: &[String]) -> Vec<CaseOutcome> {
    grad_suite()
        .iter()
        .filter(|c| only.is_empty() || only.iter().any(|o| o == c.name))
        .map(|c| run_case(c, seeds))
        .collect()
}
