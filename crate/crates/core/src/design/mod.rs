//! Fixed multi-loudspeaker feedback controller design.
//!
//! The controller is a bank of `L` FIR filters of `N` taps each, driven by
//! the virtual eardrum estimate. Its coefficients are chosen by maximizing
//! the weighted sum `Σ_k G1_k |1 + Wᵀ(Ω_k) Ŝ(Ω_k)|²` over the DFT grid subject
//! to a hyperbolic stability boundary, an amplification cap and a per-channel
//! gain limit at every bin.

mod bank;
mod problem;
mod profiles;
mod solver;

pub use bank::{ControllerBank, ControllerManifest, DesignInfo};
pub use problem::{
    amplification_residuals, channel_responses, gain_residuals, hyperbola_residuals,
    loop_response, max_violation, objective_gradient, objective_value, DesignProblem,
};
pub use profiles::{db_to_lin, default_profiles, Profiles, WeightProfile};
pub use solver::{solve, SolveReport, SolverOptions};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperbola parameters: `rho` is the real-axis intersect `(−ρ, 0)` and
/// `varrho` the focus `(−ϱ, 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct StabilitySpec {
    pub rho: f64,
    pub varrho: f64,
}

impl Default for StabilitySpec {
    fn default() -> Self {
        Self {
            rho: 0.8,
            varrho: 2.0,
        }
    }
}

impl StabilitySpec {
    pub fn new(rho: f64, varrho: f64) -> Result<Self> {
        let s = Self { rho, varrho };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "rho must lie in (0, 1), got {}",
                self.rho
            )));
        }
        if !(self.varrho.is_finite() && self.varrho > self.rho) {
            return Err(Error::InvalidParameter(format!(
                "varrho must be finite and exceed rho ({}), got {}",
                self.rho, self.varrho
            )));
        }
        Ok(())
    }
}

/// Guaranteed gain margin (linear) of a loop inside the hyperbola.
pub fn gm_bound(spec: &StabilitySpec) -> f64 {
    1.0 / spec.rho
}

/// Guaranteed phase margin in radians: the hyperbola meets the unit circle
/// where `cos φ = √((ρ²ϱ² + ρ² − ρ⁴)/ϱ²)`.
pub fn pm_bound(spec: &StabilitySpec) -> Result<f64> {
    let (r2, v2) = (spec.rho * spec.rho, spec.varrho * spec.varrho);
    let arg = ((r2 * v2 + r2 - r2 * r2) / v2).sqrt();
    if !(0.0..=1.0).contains(&arg) {
        return Err(Error::InvalidParameter(format!(
            "phase margin bound undefined for rho={}, varrho={}",
            spec.rho, spec.varrho
        )));
    }
    Ok(arg.acos())
}
