//! Diagonal state space models: discretization, selective scans and the
//! four-direction 2D cross-scan.
//!
//! The recurrence implemented everywhere is
//!
//! ```text
//! h_k = Ā_k ⊙ h_{k-1} + B̄_k · x_k,     h_0 = 0
//! y_k = Σ_n P_k[n] · h_k[n] + Q · x_k
//! ```
//!
//! with `Ā_k = exp(Δ_k · A)` and `B̄_k` from either the exact zero-order hold
//! or its first-order approximation `Δ_k · B_k`.

mod cross;
mod discretize;
mod scan;

pub use cross::{
    cross_merge, cross_merge_index, cross_scan, cross_scan_index, scan_position, scan_time,
    Direction, DIRECTIONS,
};
pub use discretize::{
    discretize_taylor, discretize_zoh, zoh_input_gain, Discretization, ZOH_SINGULAR_EPS,
};
pub use scan::{
    scan_flops, selective_scan_blocked, selective_scan_seq, BatchedScan, Projection, ScanGrads,
    ScanResult, SsmParams,
};
