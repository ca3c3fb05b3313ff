//! Frequency grids and Welch spectral estimation.
//!
//! All spectra in this crate live on the one-sided DFT grid
//! `k = 0..=l_dft/2` with normalized frequency `Ω_k = 2πk/l_dft` and
//! physical frequency `f_k = k·fs/l_dft`. PSD estimates are one-sided
//! densities (signal²/Hz) normalized so that `Σ_k density[k]·Δf` equals the
//! mean-square value of the input.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpectrumGrid {
    l_dft: usize,
    sample_rate: u32,
}

/// Builds the one-sided DFT grid used for design and analysis.
pub fn dft_grid(l_dft: usize, sample_rate: u32) -> Result<SpectrumGrid> {
    SpectrumGrid::new(l_dft, sample_rate)
}

impl SpectrumGrid {
    pub fn new(l_dft: usize, sample_rate: u32) -> Result<Self> {
        if l_dft < 2 || !l_dft.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "DFT length must be even and at least 2, got {l_dft}"
            )));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidParameter("sample rate must be positive".into()));
        }
        Ok(Self { l_dft, sample_rate })
    }

    pub fn l_dft(&self) -> usize {
        self.l_dft
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Number of one-sided bins, `l_dft/2 + 1`.
    pub fn num_bins(&self) -> usize {
        self.l_dft / 2 + 1
    }

    pub fn bin_spacing(&self) -> f64 {
        self.sample_rate as f64 / self.l_dft as f64
    }

    pub fn freq(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate as f64 / self.l_dft as f64
    }

    pub fn omega(&self, k: usize) -> f64 {
        2.0 * PI * k as f64 / self.l_dft as f64
    }

    pub fn freqs(&self) -> Vec<f64> {
        (0..self.num_bins()).map(|k| self.freq(k)).collect()
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate as f64 / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexSpectrum {
    pub values: Vec<Complex64>,
    pub grid: SpectrumGrid,
}

impl ComplexSpectrum {
    pub fn new(values: Vec<Complex64>, grid: SpectrumGrid) -> Result<Self> {
        if values.len() != grid.num_bins() {
            return Err(Error::Dimension {
                what: "spectrum length",
                expected: grid.num_bins(),
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { values, grid })
    }

    pub fn zeros(grid: SpectrumGrid) -> Self {
        Self {
            values: vec![Complex64::new(0.0, 0.0); grid.num_bins()],
            grid,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
}

impl Window {
    /// Periodic window of the given length.
    pub fn coefficients(&self, len: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdEstimate {
    pub density: Vec<f64>,
    pub grid: SpectrumGrid,
    pub num_segments: usize,
    pub window: Window,
    pub overlap_fraction: f64,
}

impl PsdEstimate {
    /// Wraps an analytically computed density (no estimation metadata).
    pub fn from_density(density: Vec<f64>, grid: SpectrumGrid) -> Result<Self> {
        if density.len() != grid.num_bins() {
            return Err(Error::Dimension {
                what: "density length",
                expected: grid.num_bins(),
                got: density.len(),
            });
        }
        ensure_finite(&density)?;
        if let Some(k) = density.iter().position(|&d| d < 0.0) {
            return Err(Error::InvalidParameter(format!("negative density at bin {k}")));
        }
        Ok(Self {
            density,
            grid,
            num_segments: 0,
            window: Window::Hann,
            overlap_fraction: 0.0,
        })
    }

    /// `Σ_k density[k]·Δf`.
    pub fn integrated_power(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.grid.bin_spacing()
    }

    pub fn to_db(&self) -> Vec<f64> {
        self.density.iter().map(|&d| 10.0 * d.log10()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("f_hz,density\n");
        for (k, d) in self.density.iter().enumerate() {
            let _ = writeln!(out, "{},{}", self.grid.freq(k), d);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct WelchConfig {
    pub segment_length: usize,
    pub overlap_fraction: f64,
    #[serde(default)]
    pub window: Window,
}

impl Default for WelchConfig {
    fn default() -> Self {
        Self {
            segment_length: 8192,
            overlap_fraction: 0.5,
            window: Window::Hann,
        }
    }
}

impl WelchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segment_length < 8 {
            return Err(Error::InvalidParameter(format!(
                "Welch segment length must be at least 8, got {}",
                self.segment_length
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::InvalidParameter(format!(
                "overlap fraction must lie in [0, 1), got {}",
                self.overlap_fraction
            )));
        }
        Ok(())
    }

    pub fn hop(&self) -> usize {
        let overlap = (self.overlap_fraction * self.segment_length as f64).round() as usize;
        (self.segment_length - overlap).max(1)
    }

    pub fn num_segments(&self, len: usize) -> usize {
        if len < self.segment_length {
            0
        } else {
            (len - self.segment_length) / self.hop() + 1
        }
    }
}

/// Shared machinery for segment-wise transforms.
struct Welch {
    cfg: WelchConfig,
    grid: SpectrumGrid,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    scale: Vec<f64>,
}

impl Welch {
    fn new(cfg: &WelchConfig, grid: SpectrumGrid) -> Result<Self> {
        cfg.validate()?;
        if cfg.segment_length > grid.l_dft() {
            return Err(Error::InvalidParameter(format!(
                "segment length {} exceeds DFT length {}",
                cfg.segment_length,
                grid.l_dft()
            )));
        }
        let window = cfg.window.coefficients(cfg.segment_length);
        let energy: f64 = window.iter().map(|w| w * w).sum();
        let base = 1.0 / (grid.sample_rate() as f64 * energy);
        let last = grid.num_bins() - 1;
        let scale = (0..grid.num_bins())
            .map(|k| if k == 0 || k == last { base } else { 2.0 * base })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(grid.l_dft());
        Ok(Self {
            cfg: cfg.clone(),
            grid,
            window,
            fft,
            scale,
        })
    }

    fn segments(&self, len: usize) -> Result<usize> {
        let count = self.cfg.num_segments(len);
        if count == 0 {
            return Err(Error::SignalTooShort {
                needed: self.cfg.segment_length,
                got: len,
            });
        }
        Ok(count)
    }

    fn transform(&self, x: &[f64], seg: usize, buf: &mut [Complex64]) {
        let start = seg * self.cfg.hop();
        for v in buf.iter_mut() {
            *v = Complex64::new(0.0, 0.0);
        }
        for (i, (&s, &w)) in x[start..start + self.cfg.segment_length]
            .iter()
            .zip(&self.window)
            .enumerate()
        {
            buf[i] = Complex64::new(s * w, 0.0);
        }
        self.fft.process(buf);
    }

    fn psd(&self, x: &[f64]) -> Result<PsdEstimate> {
        let count = self.segments(x.len())?;
        let bins = self.grid.num_bins();
        let mut acc = vec![0.0; bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.grid.l_dft()];
        for seg in 0..count {
            self.transform(x, seg, &mut buf);
            for (a, v) in acc.iter_mut().zip(&buf[..bins]) {
                *a += v.norm_sqr();
            }
        }
        let density = acc
            .iter()
            .zip(&self.scale)
            .map(|(a, s)| a / count as f64 * s)
            .collect();
        Ok(self.estimate(density, count))
    }

    fn cross(&self, x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<Complex64>, usize)> {
        if x.len() != y.len() {
            return Err(Error::Dimension {
                what: "cross-spectrum signal lengths",
                expected: x.len(),
                got: y.len(),
            });
        }
        let count = self.segments(x.len())?;
        let bins = self.grid.num_bins();
        let mut sxx = vec![0.0; bins];
        let mut syy = vec![0.0; bins];
        let mut sxy = vec![Complex64::new(0.0, 0.0); bins];
        let mut bx = vec![Complex64::new(0.0, 0.0); self.grid.l_dft()];
        let mut by = bx.clone();
        for seg in 0..count {
            self.transform(x, seg, &mut bx);
            self.transform(y, seg, &mut by);
            for k in 0..bins {
                sxx[k] += bx[k].norm_sqr();
                syy[k] += by[k].norm_sqr();
                sxy[k] += bx[k].conj() * by[k];
            }
        }
        let n = count as f64;
        for k in 0..bins {
            sxx[k] = sxx[k] / n * self.scale[k];
            syy[k] = syy[k] / n * self.scale[k];
            sxy[k] = sxy[k] / n * self.scale[k];
        }
        Ok((sxx, syy, sxy, count))
    }

    fn estimate(&self, density: Vec<f64>, num_segments: usize) -> PsdEstimate {
        PsdEstimate {
            density,
            grid: self.grid,
            num_segments,
            window: self.cfg.window,
            overlap_fraction: self.cfg.overlap_fraction,
        }
    }
}

/// One-sided Welch PSD estimate of `x`.
pub fn welch_psd(x: &[f64], cfg: &WelchConfig, grid: SpectrumGrid) -> Result<PsdEstimate> {
    Welch::new(cfg, grid)?.psd(x)
}

/// One-sided Welch CPSD with the convention `E[conj(X)·Y]`, so that
/// `welch_cpsd(x, y) / welch_psd(x)` estimates the transfer function from
/// `x` to `y`.
pub fn welch_cpsd(
    x: &[f64],
    y: &[f64],
    cfg: &WelchConfig,
    grid: SpectrumGrid,
) -> Result<ComplexSpectrum> {
    let (_, _, sxy, _) = Welch::new(cfg, grid)?.cross(x, y)?;
    Ok(ComplexSpectrum { values: sxy, grid })
}

/// Auto- and cross-spectra from one pass over both signals.
pub fn welch_spectra(
    x: &[f64],
    y: &[f64],
    cfg: &WelchConfig,
    grid: SpectrumGrid,
) -> Result<(PsdEstimate, PsdEstimate, ComplexSpectrum)> {
    let welch = Welch::new(cfg, grid)?;
    let (sxx, syy, sxy, count) = welch.cross(x, y)?;
    Ok((
        welch.estimate(sxx, count),
        welch.estimate(syy, count),
        ComplexSpectrum { values: sxy, grid },
    ))
}

/// Magnitude-squared coherence, clamped to `[0, 1]`. Bins where either
/// auto-spectrum vanishes report zero.
pub fn coherence(x: &[f64], y: &[f64], cfg: &WelchConfig, grid: SpectrumGrid) -> Result<Vec<f64>> {
    let welch = Welch::new(cfg, grid)?;
    let count = cfg.num_segments(x.len());
    if count < 4 {
        return Err(Error::InvalidParameter(format!(
            "coherence needs at least 4 segments, signal yields {count}"
        )));
    }
    let (sxx, syy, sxy, _) = welch.cross(x, y)?;
    Ok(sxx
        .iter()
        .zip(&syy)
        .zip(&sxy)
        .map(|((&a, &b), c)| {
            let denom = a * b;
            if denom > 0.0 {
                (c.norm_sqr() / denom).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect())
}
