use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::SpectrumGrid;

/// Piecewise frequency profile, linear in dB over log-frequency between
/// breakpoints and held constant beyond the first and last breakpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct WeightProfile {
    /// `(frequency Hz, linear value)` pairs.
    pub breakpoints: Vec<(f64, f64)>,
}

impl WeightProfile {
    pub fn new(breakpoints: Vec<(f64, f64)>) -> Result<Self> {
        let p = Self { breakpoints };
        p.validate()?;
        Ok(p)
    }

    pub fn constant(value: f64) -> Self {
        Self {
            breakpoints: vec![(1.0, value)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.breakpoints.is_empty() {
            return Err(Error::InvalidParameter("profile needs at least one breakpoint".into()));
        }
        for &(f, v) in &self.breakpoints {
            if !(f.is_finite() && f > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "profile breakpoint frequency must be positive, got {f}"
                )));
            }
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "profile value must be positive, got {v}"
                )));
            }
        }
        if self.breakpoints.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidParameter(
                "profile breakpoint frequencies must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn eval(&self, f: f64) -> f64 {
        let bp = &self.breakpoints;
        let (f0, v0) = bp[0];
        if f <= f0 {
            return v0;
        }
        let (fl, vl) = bp[bp.len() - 1];
        if f >= fl {
            return vl;
        }
        let i = bp.partition_point(|&(fb, _)| fb <= f);
        let (fa, va) = bp[i - 1];
        let (fb, vb) = bp[i];
        let t = (f.ln() - fa.ln()) / (fb.ln() - fa.ln());
        (va.ln() + t * (vb.ln() - va.ln())).exp()
    }

    pub fn sample(&self, grid: &SpectrumGrid) -> Vec<f64> {
        (0..grid.num_bins()).map(|k| self.eval(grid.freq(k))).collect()
    }
}

pub fn db_to_lin(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

/// The three frequency-dependent design functions: objective weighting
/// `g1`, maximum allowed amplification `g2` and maximum controller gain `g3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct Profiles {
    pub g1: WeightProfile,
    pub g2: WeightProfile,
    pub g3: WeightProfile,
}

impl Default for Profiles {
    fn default() -> Self {
        default_profiles()
    }
}

impl Profiles {
    pub fn validate(&self) -> Result<()> {
        self.g1.validate()?;
        self.g2.validate()?;
        self.g3.validate()?;
        Ok(())
    }
}

/// Low-frequency emphasis for `g1` (unity to 500 Hz, down to 0.01 at 5 kHz),
/// a flat 4 dB amplification cap for `g2`, and a controller gain limit of
/// 20 dB up to 1 kHz falling to 0 dB at 10 kHz for `g3`.
pub fn default_profiles() -> Profiles {
    Profiles {
        g1: WeightProfile {
            breakpoints: vec![(500.0, 1.0), (5_000.0, 0.01)],
        },
        g2: WeightProfile::constant(db_to_lin(4.0)),
        g3: WeightProfile {
            breakpoints: vec![(1_000.0, db_to_lin(20.0)), (10_000.0, db_to_lin(0.0))],
        },
    }
}
