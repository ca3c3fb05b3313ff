//! Closed-loop stability audit of a designed controller.
//!
//! The open loop `T(Ω) = Σ_l W_l(Ω) Ŝ_l(Ω)` is an FIR response, so the closed
//! loop is stable exactly when the Nyquist curve does not encircle `−1`.
//! Crossover frequencies for the margins are located on a dense grid and
//! refined by bisection on the exact frequency response of the loop taps.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::design::{gm_bound, pm_bound, ControllerBank, StabilitySpec};
use crate::error::{Error, Result};
use crate::paths::{convolve, dtft, ImpulseResponse, PlantModel};

/// Closest approach to the critical point treated as passing through it.
pub const MARGINAL_DISTANCE: f64 = 1e-9;

/// Slack on the dense-grid hyperbola residual accepted by [`verify_design`].
pub const DENSE_RESIDUAL_SLACK: f64 = 1e-6 + 1e-3;

/// Open-loop response sampled at `Ω_m = 2πm/M`, together with the loop's
/// impulse response for evaluation between samples.
#[derive(Clone, Debug)]
pub struct NyquistCurve {
    loop_values: Vec<Complex64>,
    taps: Vec<f64>,
}

impl NyquistCurve {
    /// Samples the FIR loop `taps` at `grid_size` points on the unit circle.
    pub fn from_taps(taps: Vec<f64>, grid_size: usize) -> Result<Self> {
        if grid_size < 4 {
            return Err(Error::InvalidParameter(format!(
                "Nyquist grid needs at least 4 points, got {grid_size}"
            )));
        }
        crate::error::ensure_finite(&taps)?;
        let mut buf = vec![Complex64::new(0.0, 0.0); grid_size];
        for (n, &t) in taps.iter().enumerate() {
            buf[n % grid_size].re += t;
        }
        FftPlanner::new().plan_fft_forward(grid_size).process(&mut buf);
        Ok(Self {
            loop_values: buf,
            taps,
        })
    }

    pub fn loop_values(&self) -> &[Complex64] {
        &self.loop_values
    }

    pub fn grid_size(&self) -> usize {
        self.loop_values.len()
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn omega(&self, m: usize) -> f64 {
        TAU * m as f64 / self.grid_size() as f64
    }

    /// Exact loop value at any frequency.
    pub fn eval(&self, omega: f64) -> Complex64 {
        dtft(&self.taps, omega)
    }

    /// CSV with columns `omega,re,im`, one row per grid point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("omega,re,im\n");
        for (m, t) in self.loop_values.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.omega(m), t.re, t.im));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Loop `Σ_l w_l ∗ s_l` of a controller bank and one path per channel.
pub fn open_loop_response(
    c: &ControllerBank,
    s_hat: &[ImpulseResponse],
    grid_size: usize,
) -> Result<NyquistCurve> {
    NyquistCurve::from_taps(loop_taps(c, s_hat)?, grid_size)
}

fn loop_taps(c: &ControllerBank, paths: &[ImpulseResponse]) -> Result<Vec<f64>> {
    if paths.len() != c.num_channels() {
        return Err(Error::Dimension {
            what: "loop paths per controller channel",
            expected: c.num_channels(),
            got: paths.len(),
        });
    }
    if let Some(p) = paths.iter().find(|p| p.sample_rate() != c.sample_rate()) {
        return Err(Error::SampleRateMismatch {
            left: c.sample_rate(),
            right: p.sample_rate(),
        });
    }
    let mut taps = Vec::new();
    for (w, s) in c.channels().iter().zip(paths) {
        let y = convolve(w, s.taps());
        if y.len() > taps.len() {
            taps.resize(y.len(), 0.0);
        }
        for (t, v) in taps.iter_mut().zip(&y) {
            *t += v;
        }
    }
    Ok(taps)
}

/// Number of counter-clockwise turns of `T(Ω) − point` for `Ω: 0 → 2π`.
pub fn winding_number(curve: &NyquistCurve, point: Complex64) -> Result<i64> {
    let m = curve.grid_size();
    let step = TAU / m as f64;
    let mut total = 0.0;
    for i in 0..m {
        let a = curve.loop_values[i] - point;
        let b = curve.loop_values[(i + 1) % m] - point;
        let om = curve.omega(i);
        total += phase_increment(curve, point, om, om + step, a, b, 0)?;
    }
    for (index, t) in curve.loop_values.iter().enumerate() {
        let distance = (t - point).norm();
        if distance < MARGINAL_DISTANCE {
            return Err(Error::MarginalCurve { index, distance });
        }
    }
    Ok((total / TAU).round() as i64)
}

fn phase_increment(
    curve: &NyquistCurve,
    point: Complex64,
    w0: f64,
    w1: f64,
    a: Complex64,
    b: Complex64,
    depth: u32,
) -> Result<f64> {
    let da = (b / a).arg();
    if da.abs() <= PI / 2.0 || depth >= 40 {
        return Ok(da);
    }
    let wm = 0.5 * (w0 + w1);
    let mid = curve.eval(wm) - point;
    if mid.norm() < MARGINAL_DISTANCE {
        return Err(Error::MarginalCurve {
            index: (wm / TAU * curve.grid_size() as f64) as usize,
            distance: mid.norm(),
        });
    }
    Ok(phase_increment(curve, point, w0, wm, a, mid, depth + 1)?
        + phase_increment(curve, point, wm, w1, mid, b, depth + 1)?)
}

/// Bisection for a sign change of `f` on `[lo, hi]`.
fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut f_lo = f(lo);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm > 0.0) == (f_lo > 0.0) {
            lo = mid;
            f_lo = fm;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi.abs().max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Root frequencies of `f` on `[0, π]` located from sign changes between
/// consecutive grid samples.
fn crossings(curve: &NyquistCurve, f: impl Fn(Complex64) -> f64) -> Vec<f64> {
    let half = curve.grid_size() / 2;
    let mut roots = Vec::new();
    for m in 0..=half {
        let v = f(curve.loop_values[m]);
        if v == 0.0 {
            roots.push(curve.omega(m));
            continue;
        }
        if m < half {
            let next = f(curve.loop_values[m + 1]);
            if next != 0.0 && (v > 0.0) != (next > 0.0) {
                roots.push(bisect(|om| f(curve.eval(om)), curve.omega(m), curve.omega(m + 1)));
            }
        }
    }
    roots
}

/// Gain margin (linear) and phase margin (radians) of a stable loop. Either
/// is `+∞` when the corresponding crossover does not exist.
pub fn measured_margins(curve: &NyquistCurve) -> Result<(f64, f64)> {
    let winding = winding_number(curve, Complex64::new(-1.0, 0.0))?;
    if winding != 0 {
        return Err(Error::Unstable { winding });
    }
    // the grid holds T(0) and T(π) exactly, where the loop is real
    let mut gm = f64::INFINITY;
    for om in crossings(curve, |t| t.im) {
        let t = curve.eval(om);
        if t.re < 0.0 {
            gm = gm.min(1.0 / t.re.abs());
        }
    }
    let mut pm = f64::INFINITY;
    for om in crossings(curve, |t| t.norm() - 1.0) {
        pm = pm.min(PI - curve.eval(om).arg().abs());
    }
    Ok((gm, pm))
}

/// Largest hyperbola residual `|ϱ − T| − |ϱ + T| − 2ρ` over the grid.
pub fn dense_hyperbola_residual(curve: &NyquistCurve, spec: &StabilitySpec) -> f64 {
    curve.loop_values[..=curve.grid_size() / 2]
        .iter()
        .map(|&t| (spec.varrho - t).norm() - (spec.varrho + t).norm() - 2.0 * spec.rho)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct VerificationReport {
    pub passed: bool,
    /// `None` when the curve passes through `−1`.
    pub winding_number: Option<i64>,
    pub dense_max_hyperbola_residual: f64,
    /// Linear gain margin; `None` means no phase crossover (infinite margin).
    pub gain_margin: Option<f64>,
    pub gain_margin_db: Option<f64>,
    /// Phase margin in radians; `None` means `|T| < 1` everywhere.
    pub phase_margin: Option<f64>,
    pub gain_margin_bound: f64,
    pub phase_margin_bound: f64,
    pub grid_size: usize,
    pub rho: f64,
    pub varrho: f64,
}

impl VerificationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }
}

/// Loop paths seen by the running controller: `Ŝ_l + B_{r,l} − B̂_{r,l}`,
/// which reduce to `Ŝ_l` when the inner-microphone paths are modelled exactly.
pub fn effective_loop_paths(plant: &PlantModel) -> Result<Vec<ImpulseResponse>> {
    plant.validate()?;
    (0..plant.num_loudspeakers())
        .map(|l| {
            let (s, bt, bm) = (
                plant.s_model[l].taps(),
                plant.br_true[l].taps(),
                plant.br_model[l].taps(),
            );
            let len = s.len().max(bt.len()).max(bm.len());
            let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
            let taps = (0..len).map(|i| at(s, i) + at(bt, i) - at(bm, i)).collect();
            ImpulseResponse::new(taps, plant.sample_rate)
        })
        .collect()
}

/// Audits a controller against a plant: Nyquist winding about `−1`, measured
/// margins and the hyperbola constraint on `grid_size` points.
pub fn verify_design(
    c: &ControllerBank,
    plant: &PlantModel,
    spec: &StabilitySpec,
    grid_size: usize,
) -> Result<VerificationReport> {
    spec.validate()?;
    let paths = effective_loop_paths(plant)?;
    let curve = open_loop_response(c, &paths, grid_size)?;
    let residual = dense_hyperbola_residual(&curve, spec);
    let winding = match winding_number(&curve, Complex64::new(-1.0, 0.0)) {
        Ok(w) => Some(w),
        Err(Error::MarginalCurve { .. }) => None,
        Err(e) => return Err(e),
    };
    let (gm, pm) = match winding {
        Some(0) => {
            let (gm, pm) = measured_margins(&curve)?;
            (finite(gm), finite(pm))
        }
        _ => (None, None),
    };
    let passed = winding == Some(0) && residual <= DENSE_RESIDUAL_SLACK;
    Ok(VerificationReport {
        passed,
        winding_number: winding,
        dense_max_hyperbola_residual: residual,
        gain_margin: gm,
        gain_margin_db: gm.map(|g| 20.0 * g.log10()),
        phase_margin: pm,
        gain_margin_bound: gm_bound(spec),
        phase_margin_bound: pm_bound(spec)?,
        grid_size,
        rho: spec.rho,
        varrho: spec.varrho,
    })
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}
