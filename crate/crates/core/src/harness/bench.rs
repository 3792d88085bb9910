//! Wall-clock benchmark of the sequential and blocked selective scans.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ssm::{
    selective_scan_blocked, selective_scan_seq, Discretization, Projection, ScanResult, SsmParams,
};
use crate::tensor::Tensor;

pub const BENCH_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub d: usize,
    pub n: usize,
    pub block_lens: Vec<usize>,
    /// Timed runs per row; the median is reported.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![1024, 2048, 4096],
            d: 16,
            n: 16,
            block_lens: vec![16, 64],
            repeats: 11,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    /// `sequential` or `blocked`.
    pub implementation: &'static str,
    pub l: usize,
    pub d: usize,
    pub n: usize,
    /// 0 for the sequential scan.
    pub block_len: usize,
    pub wall_ns_median: u128,
    pub checksum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# dsmyolo-scan-bench {BENCH_VERSION}\nimpl,L,D,N,block_len,wall_ns_median,checksum\n"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.17e}",
                r.implementation, r.l, r.d, r.n, r.block_len, r.wall_ns_median, r.checksum
            );
        }
        out
    }

    /// Median sequential time at length `l`.
    pub fn sequential_ns(&self, l: usize) -> Option<u128> {
        self.rows
            .iter()
            .find(|r| r.implementation == "sequential" && r.l == l)
            .map(|r| r.wall_ns_median)
    }
}

/// Random scan problem with input-dependent `B`, `P` and step sizes.
pub fn random_problem(
    l: usize,
    d: usize,
    n: usize,
    rng: &mut impl Rng,
) -> (Tensor<f64>, SsmParams<f64>) {
    let x = Tensor::rand_uniform(&[l, d], -1.0, 1.0, rng);
    let a = Tensor::rand_uniform(&[d, n], -2.0, -0.05, rng);
    let params = SsmParams {
        a,
        b: Projection::PerStep(Tensor::rand_uniform(&[l, n], -1.0, 1.0, rng)),
        p: Projection::PerStep(Tensor::rand_uniform(&[l, n], -1.0, 1.0, rng)),
        q: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        delta: Tensor::rand_uniform(&[l, d], 1e-3, 0.1, rng),
        discretization: Discretization::Zoh,
    };
    (x, params)
}

fn checksum(r: &ScanResult<f64>) -> f64 {
    r.y.data().iter().sum()
}

fn median_ns(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<u128> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_nanos());
    }
    times.sort_unstable();
    Ok(times[times.len() / 2])
}

pub fn bench_scan(cfg: &BenchConfig) -> Result<BenchReport> {
    bench_scan_with(cfg, selective_scan_blocked)
}

/// [`bench_scan`] with a caller-supplied blocked implementation. Its output
/// checksum must equal the sequential one bit for bit, else the run aborts
/// before any timing.
pub fn bench_scan_with(
    cfg: &BenchConfig,
    blocked: impl Fn(&Tensor<f64>, &SsmParams<f64>, usize) -> Result<ScanResult<f64>>,
) -> Result<BenchReport> {
    if cfg.lengths.is_empty() || cfg.d == 0 || cfg.n == 0 || cfg.block_lens.contains(&0) {
        return Err(Error::invalid(
            "bench_scan",
            "need lengths, D, N and block lengths all positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for &l in &cfg.lengths {
        let (x, params) = random_problem(l, cfg.d, cfg.n, &mut rng);
        let reference = checksum(&selective_scan_seq(&x, &params)?);
        for &bl in &cfg.block_lens {
            let got = checksum(&blocked(&x, &params, bl)?);
            if got.to_bits() != reference.to_bits() {
                return Err(Error::invalid(
                    "bench_scan",
                    format!("checksum mismatch at L={l}, block_len={bl}: {got:e} vs sequential {reference:e}"),
                ));
            }
        }
        let t = median_ns(cfg.repeats, || selective_scan_seq(&x, &params).map(|_| ()))?;
        rows.push(BenchRow {
            implementation: "sequential",
            l,
            d: cfg.d,
            n: cfg.n,
            block_len: 0,
            wall_ns_median: t,
            checksum: reference,
        });
        for &bl in &cfg.block_lens {
            let t = median_ns(cfg.repeats, || blocked(&x, &params, bl).map(|_| ()))?;
            rows.push(BenchRow {
                implementation: "blocked",
                l,
                d: cfg.d,
                n: cfg.n,
                block_len: bl,
                wall_ns_median: t,
                checksum: reference,
            });
        }
    }
    Ok(BenchReport { rows })
}
