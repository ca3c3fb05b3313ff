//! Closed-loop simulation of the virtual-microphone feedback system and the
//! matching analytic PSD predictions.
//!
//! Per sample, the inner microphone hears the primary noise minus the
//! loudspeaker contribution through `B_r`. The controller then reconstructs
//! the primary noise at the microphone, takes it as the eardrum's primary
//! noise, subtracts its own contribution through `Ŝ` to estimate the eardrum
//! pressure, and filters that estimate with `W`.

use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::design::ControllerBank;
use crate::error::{Error, Result};
use crate::paths::{freq_response, taps_response, write_csv_column, write_wav_f32, ImpulseResponse, PlantModel};
use crate::spectral::{welch_spectra, ComplexSpectrum, PsdEstimate, SpectrumGrid, WelchConfig};

/// Eardrum pressure magnitude above which a run is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Smallest `|1 + T|` accepted by the analytic predictions.
pub const SINGULAR_SENSITIVITY: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// One source filtered through both primary paths.
    #[default]
    FilteredCommonSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "lowercase")]
pub enum SourceSpectrum {
    #[default]
    White,
    /// Power falling 3 dB per octave.
    Pink,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct NoiseFieldConfig {
    pub duration_s: f64,
    pub sample_rate: u32,
    #[serde(default)]
    pub kind: NoiseKind,
    #[serde(default)]
    pub source_spectrum: SourceSpectrum,
    pub seed: u64,
    /// Standard deviation of independent white noise added at the eardrum,
    /// relative to the standard deviation of `d`.
    #[serde(default)]
    pub drum_noise_rel: f64,
}

impl Default for NoiseFieldConfig {
    fn default() -> Self {
        Self {
            duration_s: 10.0,
            sample_rate: 44_100,
            kind: NoiseKind::default(),
            source_spectrum: SourceSpectrum::default(),
            seed: 0,
            drum_noise_rel: 0.0,
        }
    }
}

impl NoiseFieldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise duration must be positive, got {}",
                self.duration_s
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidParameter("sample rate must be positive".into()));
        }
        if !(self.drum_noise_rel.is_finite() && self.drum_noise_rel >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "drum_noise_rel must be non-negative, got {}",
                self.drum_noise_rel
            )));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn pinken(x: &mut [f64]) {
    let n = x.len();
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex64::new(0.0, 0.0);
    for k in 1..n {
        let bin = k.min(n - k) as f64;
        buf[k] /= bin.sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    for (v, b) in x.iter_mut().zip(&buf) {
        *v = b.re;
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
}

/// Causal filtering of `x` by `taps`, output length `x.len()`.
fn filter(taps: &[f64], x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (i, &t) in taps.iter().enumerate() {
        if t == 0.0 || i >= x.len() {
            continue;
        }
        for (out, &v) in y[i..].iter_mut().zip(x) {
            *out += t * v;
        }
    }
    y
}

/// Eardrum and microphone primary noise `(d, r)` from one seeded source.
/// The source runs for one primary-path length before the returned window,
/// so both signals start in steady state.
pub fn gen_noise(plant: &PlantModel, cfg: &NoiseFieldConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    if cfg.sample_rate != plant.sample_rate {
        return Err(Error::SampleRateMismatch {
            left: plant.sample_rate,
            right: cfg.sample_rate,
        });
    }
    let n = cfg.num_samples();
    let warmup = plant.primary_drum.len().max(plant.primary_mic.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut source = gaussian(&mut rng, n + warmup);
    if cfg.source_spectrum == SourceSpectrum::Pink {
        pinken(&mut source);
    }
    let mut d = filter(plant.primary_drum.taps(), &source).split_off(warmup);
    let r = filter(plant.primary_mic.taps(), &source).split_off(warmup);
    if cfg.drum_noise_rel > 0.0 {
        let std = (d.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
        rng.set_stream(1);
        for (v, z) in d.iter_mut().zip(gaussian(&mut rng, n)) {
            *v += cfg.drum_noise_rel * std * z;
        }
    }
    Ok((d, r))
}

/// Reversed history with a mirrored copy, so the last `len` samples are
/// always one contiguous slice, newest first.
struct DelayLine {
    buf: Vec<f64>,
    pos: usize,
    len: usize,
}

impl DelayLine {
    fn new(len: usize) -> Self {
        let len = len.max(1);
        Self {
            buf: vec![0.0; 2 * len],
            pos: 0,
            len,
        }
    }

    fn push(&mut self, x: f64) {
        self.pos = (self.pos + self.len - 1) % self.len;
        self.buf[self.pos] = x;
        self.buf[self.pos + self.len] = x;
    }

    /// `Σ_i taps[i]·x(n − i)` with `x(n)` the most recent push.
    fn dot(&self, taps: &[f64]) -> f64 {
        taps.iter()
            .zip(&self.buf[self.pos..self.pos + self.len])
            .map(|(t, x)| t * x)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimResult {
    pub e: Vec<f64>,
    pub mic: Vec<f64>,
    pub r_hat: Vec<f64>,
    pub d_hat: Vec<f64>,
    pub e_hat: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub d: Vec<f64>,
    pub r: Vec<f64>,
    pub stable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "lowercase")]
pub enum SignalFormat {
    #[default]
    Wav,
    Csv,
}

impl SimResult {
    pub fn len(&self) -> usize {
        self.e.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e.is_empty()
    }

    pub fn signals(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("e".into(), &self.e),
            ("mic".into(), &self.mic),
            ("r_hat".into(), &self.r_hat),
            ("d_hat".into(), &self.d_hat),
            ("e_hat".into(), &self.e_hat),
            ("d".into(), &self.d),
            ("r".into(), &self.r),
        ];
        for (l, u) in self.u.iter().enumerate() {
            out.push((format!("u_{}", l + 1), u));
        }
        out
    }

    /// Writes one file per signal into `dir`.
    pub fn save(&self, dir: &Path, format: SignalFormat, sample_rate: u32) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, x) in self.signals() {
            match format {
                SignalFormat::Wav => write_wav_f32(&dir.join(format!("{name}.wav")), x, sample_rate)?,
                SignalFormat::Csv => write_csv_column(&dir.join(format!("{name}.csv")), x)?,
            }
        }
        Ok(())
    }
}

/// Sample-by-sample simulation of the feedback loop driven by `(d, r)`.
pub fn run_closed_loop(plant: &PlantModel, c: &ControllerBank, d: &[f64], r: &[f64]) -> Result<SimResult> {
    plant.validate()?;
    let l = plant.num_loudspeakers();
    if c.num_channels() != l {
        return Err(Error::Dimension {
            what: "controller channels vs plant loudspeakers",
            expected: l,
            got: c.num_channels(),
        });
    }
    if c.sample_rate() != plant.sample_rate {
        return Err(Error::SampleRateMismatch {
            left: plant.sample_rate,
            right: c.sample_rate(),
        });
    }
    if d.len() != r.len() {
        return Err(Error::Dimension {
            what: "primary noise length",
            expected: r.len(),
            got: d.len(),
        });
    }
    crate::error::ensure_finite(d)?;
    crate::error::ensure_finite(r)?;

    // loudspeaker paths all start with a zero tap, so only past u is needed
    let tail = |ir: &ImpulseResponse| ir.taps()[1..].to_vec();
    let s_true: Vec<Vec<f64>> = plant.s_true.iter().map(tail).collect();
    let s_model: Vec<Vec<f64>> = plant.s_model.iter().map(tail).collect();
    let br_true: Vec<Vec<f64>> = plant.br_true.iter().map(tail).collect();
    let br_model: Vec<Vec<f64>> = plant.br_model.iter().map(tail).collect();
    let hist = s_true
        .iter()
        .chain(&s_model)
        .chain(&br_true)
        .chain(&br_model)
        .map(Vec::len)
        .max()
        .unwrap_or(1);
    let mut u_lines: Vec<DelayLine> = (0..l).map(|_| DelayLine::new(hist)).collect();
    let mut e_hat_line = DelayLine::new(c.taps_per_channel());

    let n = d.len();
    let mut out = SimResult {
        e: Vec::with_capacity(n),
        mic: Vec::with_capacity(n),
        r_hat: Vec::with_capacity(n),
        d_hat: Vec::with_capacity(n),
        e_hat: Vec::with_capacity(n),
        u: vec![Vec::with_capacity(n); l],
        d: Vec::with_capacity(n),
        r: Vec::with_capacity(n),
        stable: true,
    };
    for i in 0..n {
        let mut through_br = 0.0;
        let mut through_br_model = 0.0;
        let mut through_s = 0.0;
        let mut through_s_model = 0.0;
        for ch in 0..l {
            let line = &u_lines[ch];
            through_br += line.dot(&br_true[ch]);
            through_br_model += line.dot(&br_model[ch]);
            through_s += line.dot(&s_true[ch]);
            through_s_model += line.dot(&s_model[ch]);
        }
        let mic = r[i] - through_br;
        let r_hat = mic + through_br_model;
        let d_hat = r_hat;
        let e_hat = d_hat - through_s_model;
        let e = d[i] - through_s;
        e_hat_line.push(e_hat);
        for ch in 0..l {
            let u = e_hat_line.dot(c.channel(ch));
            u_lines[ch].push(u);
            out.u[ch].push(u);
        }
        out.e.push(e);
        out.mic.push(mic);
        out.r_hat.push(r_hat);
        out.d_hat.push(d_hat);
        out.e_hat.push(e_hat);
        out.d.push(d[i]);
        out.r.push(r[i]);
        if !(e.abs() <= DIVERGENCE_THRESHOLD) {
            out.stable = false;
            break;
        }
    }
    Ok(out)
}

/// Auto- and cross-spectra of the primary noise. `phi_dr` follows the
/// convention `E[conj(R)·D]`, so `phi_dr / phi_rr` is the transfer function
/// from `r` to `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFactors {
    pub phi_rr: PsdEstimate,
    pub phi_dd: PsdEstimate,
    pub phi_dr: ComplexSpectrum,
}

impl SpectralFactors {
    pub fn new(phi_rr: PsdEstimate, phi_dd: PsdEstimate, phi_dr: ComplexSpectrum) -> Result<Self> {
        let grid = phi_rr.grid;
        if phi_dd.grid != grid || phi_dr.grid != grid {
            return Err(Error::InvalidParameter("spectral factors must share one grid".into()));
        }
        for k in 0..grid.num_bins() {
            let bound = phi_dd.density[k] * phi_rr.density[k];
            if phi_dr.values[k].norm_sqr() > bound * (1.0 + 1e-6) + f64::MIN_POSITIVE {
                return Err(Error::InvalidParameter(format!(
                    "cross spectrum violates Cauchy-Schwarz at bin {k}"
                )));
            }
        }
        Ok(Self {
            phi_rr,
            phi_dd,
            phi_dr,
        })
    }

    pub fn from_signals(d: &[f64], r: &[f64], cfg: &WelchConfig, grid: SpectrumGrid) -> Result<Self> {
        let (phi_rr, phi_dd, phi_dr) = welch_spectra(r, d, cfg, grid)?;
        Self::new(phi_rr, phi_dd, phi_dr)
    }

    pub fn grid(&self) -> SpectrumGrid {
        self.phi_rr.grid
    }
}

/// `Σ_l W_l(Ω_k)·P_l(Ω_k)` on the grid.
fn weighted_sum(c: &ControllerBank, paths: &[ImpulseResponse], grid: SpectrumGrid) -> Result<Vec<Complex64>> {
    if paths.len() != c.num_channels() {
        return Err(Error::Dimension {
            what: "paths per controller channel",
            expected: c.num_channels(),
            got: paths.len(),
        });
    }
    if c.sample_rate() != grid.sample_rate() {
        return Err(Error::SampleRateMismatch {
            left: grid.sample_rate(),
            right: c.sample_rate(),
        });
    }
    let mut t = vec![Complex64::new(0.0, 0.0); grid.num_bins()];
    for (w, p) in c.channels().iter().zip(paths) {
        let wr = taps_response(w, grid.l_dft());
        let pr = freq_response(p, grid)?;
        for ((t, a), b) in t.iter_mut().zip(&wr).zip(&pr.values) {
            *t += a * b;
        }
    }
    Ok(t)
}

fn check_sensitivity(t: &[Complex64]) -> Result<()> {
    for (bin, t) in t.iter().enumerate() {
        let magnitude = (1.0 + t).norm();
        if magnitude < SINGULAR_SENSITIVITY {
            return Err(Error::SingularSensitivity { bin, magnitude });
        }
    }
    Ok(())
}

/// Eardrum PSD under the virtual-microphone assumptions:
/// `Φ_ee = Φ_rr / |1 + Wᵀ Ŝ|²`.
pub fn predicted_psd_vma(c: &ControllerBank, s_hat: &[ImpulseResponse], phi_rr: &PsdEstimate) -> Result<PsdEstimate> {
    let t = weighted_sum(c, s_hat, phi_rr.grid)?;
    check_sensitivity(&t)?;
    let density = t
        .iter()
        .zip(&phi_rr.density)
        .map(|(t, p)| p / (1.0 + t).norm_sqr())
        .collect();
    PsdEstimate::from_density(density, phi_rr.grid)
}

/// The two addends of the general eardrum PSD and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct FullPrediction {
    /// `(1 − |Φ_dr|²/(Φ_dd Φ_rr))·Φ_dd`, the floor set by incoherent noise.
    pub minimum: PsdEstimate,
    /// `|Φ_dr/Φ_rr − WᵀS/(1 + Wᵀ(Ŝ + B_r − B̂_r))|²·Φ_rr`.
    pub controllable: PsdEstimate,
    pub total: PsdEstimate,
}

/// Eardrum PSD with model mismatch and partially coherent primary noise.
pub fn predicted_psd_full(c: &ControllerBank, plant: &PlantModel, factors: &SpectralFactors) -> Result<FullPrediction> {
    plant.validate()?;
    let grid = factors.grid();
    let ws = weighted_sum(c, &plant.s_true, grid)?;
    let ws_hat = weighted_sum(c, &plant.s_model, grid)?;
    let wb = weighted_sum(c, &plant.br_true, grid)?;
    let wb_hat = weighted_sum(c, &plant.br_model, grid)?;
    let loop_t: Vec<Complex64> = (0..grid.num_bins()).map(|k| ws_hat[k] + wb[k] - wb_hat[k]).collect();
    check_sensitivity(&loop_t)?;

    let mut minimum = Vec::with_capacity(grid.num_bins());
    let mut controllable = Vec::with_capacity(grid.num_bins());
    for k in 0..grid.num_bins() {
        let (rr, dd, dr) = (factors.phi_rr.density[k], factors.phi_dd.density[k], factors.phi_dr.values[k]);
        let cross = dr.norm_sqr();
        let (floor, ctrl) = if rr == 0.0 {
            (dd, 0.0)
        } else {
            let floor = if dd == 0.0 { 0.0 } else { ((1.0 - cross / (dd * rr)) * dd).max(0.0) };
            let residual = dr / rr - ws[k] / (1.0 + loop_t[k]);
            (floor, residual.norm_sqr() * rr)
        };
        minimum.push(floor);
        controllable.push(ctrl);
    }
    let total = minimum.iter().zip(&controllable).map(|(a, b)| a + b).collect();
    Ok(FullPrediction {
        minimum: PsdEstimate::from_density(minimum, grid)?,
        controllable: PsdEstimate::from_density(controllable, grid)?,
        total: PsdEstimate::from_density(total, grid)?,
    })
}

/// `10·log10(off/on)` per bin; positive values are attenuation.
pub fn attenuation_curve(psd_off: &PsdEstimate, psd_on: &PsdEstimate) -> Result<Vec<f64>> {
    if psd_off.grid != psd_on.grid {
        return Err(Error::InvalidParameter("PSDs must share one grid".into()));
    }
    psd_off
        .density
        .iter()
        .zip(&psd_on.density)
        .enumerate()
        .map(|(bin, (&off, &on))| {
            if off == 0.0 {
                Err(Error::ZeroReference { bin })
            } else {
                Ok(10.0 * (off / on).log10())
            }
        })
        .collect()
}

fn band_bins(curve: &[f64], f_lo: f64, f_hi: f64, grid: &SpectrumGrid) -> Result<Vec<f64>> {
    if curve.len() != grid.num_bins() {
        return Err(Error::Dimension {
            what: "curve length",
            expected: grid.num_bins(),
            got: curve.len(),
        });
    }
    let band: Vec<f64> = curve
        .iter()
        .enumerate()
        .filter(|&(k, _)| (f_lo..=f_hi).contains(&grid.freq(k)))
        .map(|(_, &v)| v)
        .collect();
    if !(f_lo < f_hi) || band.is_empty() {
        return Err(Error::EmptyBand { f_lo, f_hi });
    }
    Ok(band)
}

/// Mean of `curve` over the bins with `f_lo ≤ f ≤ f_hi`.
pub fn band_attenuation(curve: &[f64], f_lo: f64, f_hi: f64, grid: &SpectrumGrid) -> Result<f64> {
    let band = band_bins(curve, f_lo, f_hi, grid)?;
    Ok(band.iter().sum::<f64>() / band.len() as f64)
}

/// Largest amplification (negated attenuation) over the band.
pub fn band_max_amplification(curve: &[f64], f_lo: f64, f_hi: f64, grid: &SpectrumGrid) -> Result<f64> {
    let band = band_bins(curve, f_lo, f_hi, grid)?;
    Ok(band.iter().map(|v| -v).fold(f64::NEG_INFINITY, f64::max))
}

/// CSV with `f_hz`, `psd_off_db` and one `psd_<label>_db` column per entry.
pub fn comparison_csv(psd_off: &PsdEstimate, on: &[(&str, &PsdEstimate)]) -> Result<String> {
    let grid = psd_off.grid;
    if on.iter().any(|(_, p)| p.grid != grid) {
        return Err(Error::InvalidParameter("PSDs must share one grid".into()));
    }
    let mut out = String::from("f_hz,psd_off_db");
    for (label, _) in on {
        out.push_str(&format!(",psd_{label}_db"));
    }
    out.push('\n');
    let db = |v: f64| 10.0 * v.log10();
    for k in 0..grid.num_bins() {
        out.push_str(&format!("{},{}", grid.freq(k), db(psd_off.density[k])));
        for (_, p) in on {
            out.push_str(&format!(",{}", db(p.density[k])));
        }
        out.push('\n');
    }
    Ok(out)
}
