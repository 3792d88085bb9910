//! Model scales and derived stage widths.

use serde::{Deserialize, Serialize};

use crate::blocks::{EcaConfig, VssConfig};
use crate::error::{Error, Result};
use crate::ssm::Discretization;

/// Stage widths before scaling, for strides 4, 4, 8, 16, 32. The last two
/// are widened from the usual 512/1024 so that scale N lands at about 4.0M
/// parameters and 8.8 GFLOPs at 640×640.
pub const BASE_CHANNELS: [usize; 5] = [64, 128, 256, 576, 1280];
/// ECACSP repeat counts before depth scaling: four backbone stages, then the neck.
pub const BASE_REPEATS: [usize; 5] = [3, 6, 6, 3, 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSpec {
    pub name: String,
    pub width: f64,
    pub depth: f64,
    pub base_channels: [usize; 5],
    pub num_classes: usize,
}

impl ScaleSpec {
    pub fn new(name: &str, width: f64, depth: f64, num_classes: usize) -> Self {
        ScaleSpec {
            name: name.to_string(),
            width,
            depth,
            base_channels: BASE_CHANNELS,
            num_classes,
        }
    }

    pub fn nano(num_classes: usize) -> Self {
        Self::new("N", 0.25, 0.33, num_classes)
    }

    pub fn small(num_classes: usize) -> Self {
        Self::new("S", 0.5, 0.33, num_classes)
    }

    pub fn medium(num_classes: usize) -> Self {
        Self::new("M", 0.75, 0.67, num_classes)
    }

    /// Width 0.125, depth 0.33: small enough to train in tests.
    pub fn tiny(num_classes: usize) -> Self {
        Self::new("T", 0.125, 0.33, num_classes)
    }

    /// `N`, `S`, `M`, or the test-only `T`.
    pub fn from_name(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "N" | "n" => Ok(Self::nano(num_classes)),
            "S" | "s" => Ok(Self::small(num_classes)),
            "M" | "m" => Ok(Self::medium(num_classes)),
            "T" | "t" => Ok(Self::tiny(num_classes)),
            _ => Err(Error::Config(format!(
                "unknown scale `{name}` (expected N, S, M or T)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.depth > 0.0) {
            return Err(Error::Config(format!(
                "scale {}: multipliers must be positive",
                self.name
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        self.channels().map(|_| ())
    }

    /// Scaled stage widths, rounded up to multiples of 8.
    pub fn channels(&self) -> Result<[usize; 5]> {
        let mut out = [0; 5];
        for (o, &b) in out.iter_mut().zip(&self.base_channels) {
            let c = ((b as f64 * self.width / 8.0).ceil() as usize).max(1) * 8;
            if !c.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "scale {}: derived channel count {c} is odd",
                    self.name
                )));
            }
            *o = c;
        }
        Ok(out)
    }

    pub fn repeats(&self) -> [usize; 5] {
        BASE_REPEATS.map(|r| ((r as f64 * self.depth).round() as usize).max(1))
    }
}

/// Everything needed to build a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub scale: ScaleSpec,
    pub eca: EcaConfig,
    pub vss: VssConfig,
    pub ffn_ratio: usize,
}

impl ModelConfig {
    pub fn new(scale: ScaleSpec) -> Self {
        ModelConfig {
            scale,
            eca: EcaConfig::default(),
            vss: VssConfig::default(),
            ffn_ratio: 2,
        }
    }

    pub fn with_discretization(mut self, d: Discretization) -> Self {
        self.vss.discretization = d;
        self
    }
}
