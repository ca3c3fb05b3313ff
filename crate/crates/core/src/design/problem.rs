use num_complex::Complex64;
use rustfft::FftPlanner;

use super::{Profiles, StabilitySpec};
use crate::error::{Error, Result};
use crate::paths::{freq_response, taps_response, PlantModel};
use crate::spectral::{ComplexSpectrum, SpectrumGrid};

/// Everything the optimizer needs: measured eardrum paths on the design
/// grid, sampled profiles and the stability boundary.
#[derive(Clone, Debug)]
pub struct DesignProblem {
    grid: SpectrumGrid,
    s_hat: Vec<ComplexSpectrum>,
    taps_per_channel: usize,
    profiles: Profiles,
    stability: StabilitySpec,
    g1: Vec<f64>,
    g2: Vec<f64>,
    g3: Vec<f64>,
}

impl DesignProblem {
    pub fn new(
        s_hat: Vec<ComplexSpectrum>,
        taps_per_channel: usize,
        profiles: Profiles,
        stability: StabilitySpec,
    ) -> Result<Self> {
        let grid = match s_hat.first() {
            Some(s) => s.grid,
            None => return Err(Error::InvalidParameter("design needs at least one loudspeaker".into())),
        };
        if let Some(s) = s_hat.iter().find(|s| s.grid != grid || s.values.len() != grid.num_bins()) {
            return Err(Error::Dimension {
                what: "plant response length",
                expected: grid.num_bins(),
                got: s.values.len(),
            });
        }
        if taps_per_channel == 0 {
            return Err(Error::InvalidParameter("taps per channel must be positive".into()));
        }
        profiles.validate()?;
        stability.validate()?;
        let g1 = profiles.g1.sample(&grid);
        let g2 = profiles.g2.sample(&grid);
        let g3 = profiles.g3.sample(&grid);
        if let Some(k) = g2.iter().position(|&v| v < 1.0) {
            return Err(Error::InfeasibleProblem(format!(
                "maximum amplification G2 = {} < 1 at {} Hz makes the open loop infeasible",
                g2[k],
                grid.freq(k)
            )));
        }
        Ok(Self {
            grid,
            s_hat,
            taps_per_channel,
            profiles,
            stability,
            g1,
            g2,
            g3,
        })
    }

    /// Builds the problem from the plant's measured eardrum paths `Ŝ`.
    pub fn from_plant(
        plant: &PlantModel,
        grid: SpectrumGrid,
        taps_per_channel: usize,
        profiles: Profiles,
        stability: StabilitySpec,
    ) -> Result<Self> {
        plant.validate()?;
        let s_hat = plant
            .s_model
            .iter()
            .map(|ir| freq_response(ir, grid))
            .collect::<Result<Vec<_>>>()?;
        Self::new(s_hat, taps_per_channel, profiles, stability)
    }

    pub fn grid(&self) -> SpectrumGrid {
        self.grid
    }

    pub fn num_channels(&self) -> usize {
        self.s_hat.len()
    }

    pub fn taps_per_channel(&self) -> usize {
        self.taps_per_channel
    }

    pub fn num_variables(&self) -> usize {
        self.num_channels() * self.taps_per_channel
    }

    pub fn s_hat(&self) -> &[ComplexSpectrum] {
        &self.s_hat
    }

    pub fn profiles(&self) -> &Profiles {
        &self.profiles
    }

    pub fn stability(&self) -> StabilitySpec {
        self.stability
    }

    pub fn g1(&self) -> &[f64] {
        &self.g1
    }

    pub fn g2(&self) -> &[f64] {
        &self.g2
    }

    pub fn g3(&self) -> &[f64] {
        &self.g3
    }

    pub(crate) fn check(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.num_variables() {
            return Err(Error::Dimension {
                what: "design vector",
                expected: self.num_variables(),
                got: w.len(),
            });
        }
        Ok(())
    }
}

/// `W_l(Ω_k)` for every channel.
pub fn channel_responses(w: &[f64], p: &DesignProblem) -> Result<Vec<Vec<Complex64>>> {
    p.check(w)?;
    Ok(w.chunks(p.taps_per_channel)
        .map(|taps| taps_response(taps, p.grid.l_dft()))
        .collect())
}

/// Open-loop value `T_k = Wᵀ(Ω_k) Ŝ(Ω_k)` per bin.
pub fn loop_response(w: &[f64], p: &DesignProblem) -> Result<Vec<Complex64>> {
    let responses = channel_responses(w, p)?;
    Ok(loop_from_channels(&responses, p))
}

fn loop_from_channels(responses: &[Vec<Complex64>], p: &DesignProblem) -> Vec<Complex64> {
    let mut t = vec![Complex64::new(0.0, 0.0); p.grid.num_bins()];
    for (resp, s) in responses.iter().zip(&p.s_hat) {
        for ((t, r), s) in t.iter_mut().zip(resp).zip(&s.values) {
            *t += r * s;
        }
    }
    t
}

pub fn objective_value(w: &[f64], p: &DesignProblem) -> Result<f64> {
    let t = loop_response(w, p)?;
    Ok(t.iter()
        .zip(&p.g1)
        .map(|(t, g)| (1.0 + t).norm_sqr() * g)
        .sum())
}

/// Gradient of the objective with respect to `w`; each channel's component
/// is a forward DFT of the per-bin weights `2·G1·conj(1 + T)·Ŝ_l`.
pub fn objective_gradient(w: &[f64], p: &DesignProblem) -> Result<Vec<f64>> {
    let t = loop_response(w, p)?;
    let l_dft = p.grid.l_dft();
    let fft = FftPlanner::new().plan_fft_forward(l_dft);
    let mut grad = Vec::with_capacity(w.len());
    let mut buf = vec![Complex64::new(0.0, 0.0); l_dft];
    for s in &p.s_hat {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for (k, b) in buf.iter_mut().take(t.len()).enumerate() {
            *b = (1.0 + t[k]).conj() * s.values[k] * p.g1[k];
        }
        fft.process(&mut buf);
        grad.extend((0..p.taps_per_channel).map(|i| 2.0 * buf[i % l_dft].re));
    }
    Ok(grad)
}

/// `|ϱ − T_k| − |ϱ + T_k| − 2ρ`; non-positive inside the stability region.
pub fn hyperbola_residuals(w: &[f64], p: &DesignProblem) -> Result<Vec<f64>> {
    let t = loop_response(w, p)?;
    Ok(hyperbola_residuals_of(&t, &p.stability))
}

pub(crate) fn hyperbola_residuals_of(t: &[Complex64], spec: &StabilitySpec) -> Vec<f64> {
    t.iter().map(|&t| hyperbola_residual(t, spec)).collect()
}

pub(crate) fn hyperbola_residual(t: Complex64, spec: &StabilitySpec) -> f64 {
    (spec.varrho - t).norm() - (spec.varrho + t).norm() - 2.0 * spec.rho
}

/// `1 − G2_k |1 + T_k|`; non-positive where amplification stays under G2.
pub fn amplification_residuals(w: &[f64], p: &DesignProblem) -> Result<Vec<f64>> {
    let t = loop_response(w, p)?;
    Ok(t.iter()
        .zip(&p.g2)
        .map(|(t, g2)| 1.0 - g2 * (1.0 + t).norm())
        .collect())
}

/// `|W_l(Ω_k)| − G3_k`, channel-major (`L·(l_dft/2 + 1)` entries).
pub fn gain_residuals(w: &[f64], p: &DesignProblem) -> Result<Vec<f64>> {
    let responses = channel_responses(w, p)?;
    Ok(responses
        .iter()
        .flat_map(|resp| resp.iter().zip(&p.g3).map(|(r, g3)| r.norm() - g3))
        .collect())
}

/// Largest residual over all three constraint families.
pub fn max_violation(w: &[f64], p: &DesignProblem) -> Result<f64> {
    let responses = channel_responses(w, p)?;
    let t = loop_from_channels(&responses, p);
    let hyp = t.iter().map(|&t| hyperbola_residual(t, &p.stability));
    let amp = t.iter().zip(&p.g2).map(|(t, g2)| 1.0 - g2 * (1.0 + t).norm());
    let gain = responses
        .iter()
        .flat_map(|resp| resp.iter().zip(&p.g3).map(|(r, g3)| r.norm() - g3));
    Ok(hyp.chain(amp).chain(gain).fold(f64::NEG_INFINITY, f64::max))
}
