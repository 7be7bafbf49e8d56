//! State-space kernels: ZOH discretization, the linear recurrence computed
//! sequentially or by a work-efficient associative scan, the LTI convolution
//! view, and the selective (input-dependent) scan.

mod discretize;
mod lti;
mod scan;
pub mod selective;

use serde::{Deserialize, Serialize};

pub use discretize::{discretize, discretize_zoh, zoh_factor, Discretized};
pub use lti::{lti_conv_kernel, lti_forward_conv, ConvKernel, LtiParams, StepSize};
pub use scan::{
    max_relative_error, recurrence_blelloch, recurrence_sequential, scan_parallel,
    scan_sequential, DiscretizedSteps,
};
pub use selective::{selective_scan, SelectiveConfig, SelectiveParams};

/// Forward backend for the linear recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanBackend {
    #[default]
    Sequential,
    Parallel,
}

/// How the input matrix is discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BDiscretization {
    /// `B̄ = (exp(ΔA) − 1)/A · B`
    #[default]
    Zoh,
    /// `B̄ = Δ·B`
    Euler,
}

impl std::str::FromStr for ScanBackend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" => Ok(ScanBackend::Sequential),
            "parallel" => Ok(ScanBackend::Parallel),
            other => Err(format!("unknown scan backend `{other}`")),
        }
    }
}
