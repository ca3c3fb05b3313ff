//! Primal log-barrier interior-point method for the controller design.
//!
//! The non-smooth residuals are replaced by smooth equivalents with the same
//! zero sets and signs. With `T = x + jy`, `b² = ϱ² − ρ²` and `W_l = u + jv`:
//!
//! * hyperbola: `φ = −x − ρ·√(1 + y²/b²) ≤ 0`
//! * amplification: `p = 1/G2² − |1 + T|² ≤ 0`
//! * gain: `q = |W_l|² − G3² ≤ 0`
//!
//! Both the objective and every constraint depend on `w` only through the
//! per-bin quantities `(x, y)` and `(u, v)`, which are linear in `w`, so
//! gradients and Hessians are assembled from per-bin 2×2 blocks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::problem::{max_violation, objective_value, DesignProblem};
use super::ControllerBank;
use crate::error::{Error, Result};

/// Smallest amplification cap used internally, so that `w = 0` stays strictly
/// inside the barrier when the profile sits exactly at unity.
const MIN_G2: f64 = 1.0 + 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    /// Largest accepted constraint residual of the returned point.
    pub feasibility_tol: f64,
    /// Relative duality-gap target `m·μ` of the barrier path.
    pub optimality_tol: f64,
    /// Cap on the total number of Newton iterations per start.
    pub max_iterations: usize,
    /// Additional starts from random feasible points.
    pub restarts: usize,
    pub seed: u64,
    /// Extra clearance from the hyperbola, in units of the loop value.
    pub constraint_margin: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            feasibility_tol: 1e-6,
            optimality_tol: 1e-6,
            max_iterations: 500,
            restarts: 0,
            seed: 0,
            constraint_margin: 0.0,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.feasibility_tol > 0.0 && self.optimality_tol > 0.0) {
            return Err(Error::InvalidParameter("solver tolerances must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter("max_iterations must be positive".into()));
        }
        if !(self.constraint_margin >= 0.0 && self.constraint_margin.is_finite()) {
            return Err(Error::InvalidParameter("constraint_margin must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub controller: ControllerBank,
    pub objective_value: f64,
    pub max_constraint_violation: f64,
    pub iterations: usize,
    pub initial_objective: f64,
    pub converged: bool,
}

impl SolveReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }
}

pub fn solve(p: &DesignProblem, opts: &SolverOptions) -> Result<SolveReport> {
    opts.validate()?;
    if opts.constraint_margin >= p.stability().rho {
        return Err(Error::InvalidParameter(format!(
            "constraint_margin {} must stay below rho {}",
            opts.constraint_margin,
            p.stability().rho
        )));
    }
    let barrier = Barrier::new(p, opts.constraint_margin);
    let n = p.num_variables();
    let zero = vec![0.0; n];
    let initial_objective = objective_value(&zero, p)?;

    let mut best = barrier.run(DVector::zeros(n), opts);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.restarts {
        let Some(start) = barrier.random_start(&mut rng) else {
            continue;
        };
        let run = barrier.run(start, opts);
        if run.objective > best.objective {
            best = Run {
                iterations: best.iterations + run.iterations,
                ..run
            };
        } else {
            best.iterations += run.iterations;
        }
    }

    let mut w: Vec<f64> = best.w.iter().copied().collect();
    let mut objective = objective_value(&w, p)?;
    let mut violation = max_violation(&w, p)?;
    if objective < initial_objective || violation > opts.feasibility_tol {
        w = zero;
        objective = initial_objective;
        violation = max_violation(&w, p)?;
    }
    if violation > opts.feasibility_tol {
        return Err(Error::SolverFailure(format!(
            "no point within feasibility tolerance (violation {violation:e})"
        )));
    }
    let controller = ControllerBank::from_vector(&w, p.num_channels(), p.grid().sample_rate())?;
    Ok(SolveReport {
        controller,
        objective_value: objective,
        max_constraint_violation: violation,
        iterations: best.iterations,
        initial_objective,
        converged: best.converged,
    })
}

struct Run {
    w: DVector<f64>,
    objective: f64,
    iterations: usize,
    converged: bool,
}

struct Barrier {
    num_channels: usize,
    taps: usize,
    /// Rows `2k`, `2k+1` map `w` to `Re T_k`, `Im T_k`.
    b: DMatrix<f64>,
    /// Rows `2k`, `2k+1` map one channel's taps to `Re W`, `Im W` at bin `k`.
    e: DMatrix<f64>,
    g1: Vec<f64>,
    inv_g2_sq: Vec<f64>,
    g3_sq: Vec<f64>,
    rho: f64,
    b_sq: f64,
    margin: f64,
    j0: f64,
}

struct Point {
    xy: DVector<f64>,
    uv: Vec<DVector<f64>>,
    hyp: Vec<f64>,
    amp: Vec<f64>,
    gain: Vec<Vec<f64>>,
}

impl Barrier {
    fn new(p: &DesignProblem, margin: f64) -> Self {
        let grid = p.grid();
        let l_dft = grid.l_dft();
        let k_bins = grid.num_bins();
        let taps = p.taps_per_channel();
        let num_channels = p.num_channels();
        let angle = |k: usize, i: usize| {
            std::f64::consts::TAU * ((k * i) % l_dft) as f64 / l_dft as f64
        };
        let e = DMatrix::from_fn(2 * k_bins, taps, |r, i| {
            let a = angle(r / 2, i);
            if r % 2 == 0 {
                a.cos()
            } else {
                -a.sin()
            }
        });
        let s_hat = p.s_hat();
        let b = DMatrix::from_fn(2 * k_bins, num_channels * taps, |r, c| {
            let (k, l, i) = (r / 2, c / taps, c % taps);
            let s = s_hat[l].values[k];
            let (ec, es) = (e[(2 * k, i)], e[(2 * k + 1, i)]);
            if r % 2 == 0 {
                s.re * ec - s.im * es
            } else {
                s.re * es + s.im * ec
            }
        });
        let spec = p.stability();
        Self {
            num_channels,
            taps,
            b,
            e,
            g1: p.g1().to_vec(),
            inv_g2_sq: p.g2().iter().map(|g| 1.0 / g.max(MIN_G2).powi(2)).collect(),
            g3_sq: p.g3().iter().map(|g| g * g).collect(),
            rho: spec.rho,
            b_sq: spec.varrho * spec.varrho - spec.rho * spec.rho,
            margin,
            j0: p.g1().iter().sum::<f64>().max(f64::MIN_POSITIVE),
        }
    }

    fn num_constraints(&self) -> usize {
        self.g1.len() * (2 + self.num_channels)
    }

    /// Evaluates the smooth constraints; `None` unless all are strictly negative.
    fn point(&self, w: &DVector<f64>) -> Option<Point> {
        let xy = &self.b * w;
        let k_bins = self.g1.len();
        let mut hyp = Vec::with_capacity(k_bins);
        let mut amp = Vec::with_capacity(k_bins);
        for k in 0..k_bins {
            let (x, y) = (xy[2 * k], xy[2 * k + 1]);
            let h = -x - self.rho * (1.0 + y * y / self.b_sq).sqrt() + self.margin;
            let a = self.inv_g2_sq[k] - ((1.0 + x).powi(2) + y * y);
            if !(h < 0.0 && a < 0.0) {
                return None;
            }
            hyp.push(h);
            amp.push(a);
        }
        let mut uv = Vec::with_capacity(self.num_channels);
        let mut gain = Vec::with_capacity(self.num_channels);
        for l in 0..self.num_channels {
            let wl = w.rows(l * self.taps, self.taps);
            let c = &self.e * wl;
            let mut g = Vec::with_capacity(k_bins);
            for k in 0..k_bins {
                let q = c[2 * k].powi(2) + c[2 * k + 1].powi(2) - self.g3_sq[k];
                if !(q < 0.0) {
                    return None;
                }
                g.push(q);
            }
            uv.push(c);
            gain.push(g);
        }
        Some(Point {
            xy,
            uv,
            hyp,
            amp,
            gain,
        })
    }

    fn objective(&self, pt: &Point) -> f64 {
        (0..self.g1.len())
            .map(|k| self.g1[k] * ((1.0 + pt.xy[2 * k]).powi(2) + pt.xy[2 * k + 1].powi(2)))
            .sum()
    }

    fn merit(&self, pt: &Point, mu: f64) -> f64 {
        let log_sum: f64 = pt
            .hyp
            .iter()
            .chain(&pt.amp)
            .chain(pt.gain.iter().flatten())
            .map(|c| (-c).ln())
            .sum();
        -self.objective(pt) / self.j0 - mu * log_sum
    }

    /// Gradient and Hessian of the merit, plus the local metric
    /// `Σ c'c'ᵀ/c² + Σ_convex c''/(−c)` that defines the trust region.
    fn derivatives(&self, pt: &Point, mu: f64) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let k_bins = self.g1.len();
        let mut gxy = DVector::zeros(2 * k_bins);
        let mut blocks = Vec::with_capacity(k_bins);
        let mut metric_blocks = Vec::with_capacity(k_bins);
        for k in 0..k_bins {
            let (x, y) = (pt.xy[2 * k], pt.xy[2 * k + 1]);
            let w1 = 2.0 * self.g1[k] / self.j0;
            let mut g = [-w1 * (1.0 + x), -w1 * y];
            let mut h = [-w1, 0.0, -w1];
            let mut m = [0.0; 3];

            let s = (1.0 + y * y / self.b_sq).sqrt();
            let d = [-1.0, -self.rho * y / (self.b_sq * s)];
            let dyy = -self.rho / (self.b_sq * s * s * s);
            add_barrier(&mut g, &mut h, mu, pt.hyp[k], d, [0.0, 0.0, dyy]);
            add_barrier(&mut [0.0; 2], &mut m, 1.0, pt.hyp[k], d, [0.0; 3]);

            let d = [-2.0 * (1.0 + x), -2.0 * y];
            add_barrier(&mut g, &mut h, mu, pt.amp[k], d, [-2.0, 0.0, -2.0]);
            add_barrier(&mut [0.0; 2], &mut m, 1.0, pt.amp[k], d, [0.0; 3]);

            gxy[2 * k] = g[0];
            gxy[2 * k + 1] = g[1];
            blocks.push(h);
            metric_blocks.push(m);
        }
        let mut grad = self.b.tr_mul(&gxy);
        let mut hess = self.b.tr_mul(&apply_blocks(&self.b, &blocks));
        let mut metric = self.b.tr_mul(&apply_blocks(&self.b, &metric_blocks));

        for l in 0..self.num_channels {
            let mut guv = DVector::zeros(2 * k_bins);
            blocks.clear();
            metric_blocks.clear();
            for k in 0..k_bins {
                let (u, v) = (pt.uv[l][2 * k], pt.uv[l][2 * k + 1]);
                let mut g = [0.0, 0.0];
                let mut h = [0.0, 0.0, 0.0];
                let d = [2.0 * u, 2.0 * v];
                add_barrier(&mut g, &mut h, mu, pt.gain[l][k], d, [2.0, 0.0, 2.0]);
                let mut m = [0.0; 3];
                add_barrier(&mut [0.0; 2], &mut m, 1.0, pt.gain[l][k], d, [2.0, 0.0, 2.0]);
                guv[2 * k] = g[0];
                guv[2 * k + 1] = g[1];
                blocks.push(h);
                metric_blocks.push(m);
            }
            let off = l * self.taps;
            let mut gl = grad.rows_mut(off, self.taps);
            gl += self.e.tr_mul(&guv);
            let mut hl = hess.view_mut((off, off), (self.taps, self.taps));
            hl += self.e.tr_mul(&apply_blocks(&self.e, &blocks));
            let mut ml = metric.view_mut((off, off), (self.taps, self.taps));
            ml += self.e.tr_mul(&apply_blocks(&self.e, &metric_blocks));
        }
        (grad, hess, metric)
    }

    fn model(&self, pt: &Point, mu: f64) -> TrustModel {
        let (g, h, metric) = self.derivatives(pt, mu);
        TrustModel::new(&g, &h, metric)
    }

    /// Trust-region Newton iterations on the barrier merit for a decreasing
    /// sequence of barrier weights `μ`.
    fn run(&self, start: DVector<f64>, opts: &SolverOptions) -> Run {
        let m = self.num_constraints() as f64;
        let mut w = start;
        let mut pt = self.point(&w).expect("start point is strictly feasible");
        let mut mu = 1.0 / m;
        let mut radius = 0.5;
        let mut iterations = 0;
        let mut converged = false;
        'levels: loop {
            let centering_tol = (1e-2 * mu * m).max(1e-13);
            let mut f = self.merit(&pt, mu);
            let mut model = self.model(&pt, mu);
            loop {
                if iterations >= opts.max_iterations {
                    break 'levels;
                }
                if model.step(1.0).1 <= centering_tol || radius < 1e-12 {
                    break;
                }
                let (d, pred) = model.step(radius);
                if !(pred > 0.0) {
                    break;
                }
                iterations += 1;
                let trial = &w + &d;
                let step_norm = radius.min(model.scaled_norm(&d));
                let Some(tp) = self.point(&trial) else {
                    radius = 0.25 * step_norm;
                    continue;
                };
                let ft = self.merit(&tp, mu);
                let ratio = (f - ft) / pred;
                if ratio < 0.25 {
                    radius = 0.25 * step_norm;
                } else if ratio > 0.75 && step_norm > 0.99 * radius {
                    radius *= 2.0;
                }
                if ratio > 1e-4 {
                    w = trial;
                    pt = tp;
                    f = ft;
                    model = self.model(&pt, mu);
                }
            }
            if m * mu <= opts.optimality_tol {
                converged = true;
                break;
            }
            mu /= 10.0;
        }
        Run {
            objective: self.objective(&pt),
            w,
            iterations,
            converged,
        }
    }

    /// Random direction scaled down until it is strictly feasible.
    fn random_start(&self, rng: &mut ChaCha8Rng) -> Option<DVector<f64>> {
        let n = self.num_channels * self.taps;
        let dir = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let mut scale = 1.0;
        for _ in 0..60 {
            let w = &dir * scale;
            if self.point(&w).is_some() {
                return Some(w);
            }
            scale *= 0.5;
        }
        None
    }
}

/// Rows `2k`, `2k+1` of the result are the 2×2 block `k` times the
/// matching rows of `a`.
fn apply_blocks(a: &DMatrix<f64>, blocks: &[[f64; 3]]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for j in 0..a.ncols() {
        let col = a.column(j);
        let mut dst = out.column_mut(j);
        for (k, h) in blocks.iter().enumerate() {
            let (r0, r1) = (col[2 * k], col[2 * k + 1]);
            dst[2 * k] = h[0] * r0 + h[1] * r1;
            dst[2 * k + 1] = h[1] * r0 + h[2] * r1;
        }
    }
    out
}

/// Quadratic model `gᵀd + ½dᵀHd` minimized exactly over the ellipsoid
/// `‖Lᵀd‖ ≤ Δ`, where `LLᵀ` is the metric. Work is done in the eigenbasis of
/// the transformed Hessian `L⁻¹HL⁻ᵀ`.
struct TrustModel {
    chol: DMatrix<f64>,
    vectors: DMatrix<f64>,
    values: DVector<f64>,
    proj: DVector<f64>,
}

impl TrustModel {
    fn new(g: &DVector<f64>, h: &DMatrix<f64>, mut metric: DMatrix<f64>) -> Self {
        let n = g.len();
        let ridge = 1e-12 * metric.diagonal().amax().max(f64::MIN_POSITIVE);
        for i in 0..n {
            metric[(i, i)] += ridge;
        }
        let l = metric
            .cholesky()
            .map(|c| c.unpack())
            .unwrap_or_else(|| DMatrix::identity(n, n));
        let x = l.solve_lower_triangular(h).expect("cholesky factor is invertible");
        let mut ht = l
            .solve_lower_triangular(&x.transpose())
            .expect("cholesky factor is invertible");
        ht = (&ht + ht.transpose()) * 0.5;
        let gt = l.solve_lower_triangular(g).expect("cholesky factor is invertible");
        let eig = ht.symmetric_eigen();
        let proj = eig.eigenvectors.tr_mul(&gt);
        Self {
            chol: l,
            vectors: eig.eigenvectors,
            values: eig.eigenvalues,
            proj,
        }
    }

    fn coeffs(&self, sigma: f64) -> DVector<f64> {
        DVector::from_fn(self.proj.len(), |i, _| {
            let den = self.values[i] + sigma;
            if den > 0.0 {
                -self.proj[i] / den
            } else {
                0.0
            }
        })
    }

    fn scaled_norm(&self, d: &DVector<f64>) -> f64 {
        self.chol.tr_mul(d).norm()
    }

    /// Returns the minimizing step within `radius` and its predicted decrease.
    fn step(&self, radius: f64) -> (DVector<f64>, f64) {
        let (imin, lmin) = self.values.argmin();
        let scale = self.values.amax().max(f64::MIN_POSITIVE);
        let floor = (-lmin).max(0.0);
        let lo_shift = floor + 1e-14 * scale;
        let mut c = if lmin > 1e-14 * scale {
            self.coeffs(0.0)
        } else {
            self.coeffs(lo_shift)
        };
        if c.norm() > radius {
            // ‖c(σ)‖ is decreasing in σ; bracket and bisect on a log scale
            let (mut lo, mut hi) = (floor.max(0.0), floor.max(0.0) + scale.max(1.0));
            while self.coeffs(hi).norm() > radius {
                hi *= 2.0;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if self.coeffs(mid).norm() > radius {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-15 * hi {
                    break;
                }
            }
            c = self.coeffs(hi);
        } else if lmin <= 1e-14 * scale {
            // negative curvature: move along the lowest eigenvector to the boundary
            let extra = (radius * radius - c.norm_squared()).max(0.0).sqrt();
            let sign = if self.proj[imin] > 0.0 { -1.0 } else { 1.0 };
            c[imin] += sign * extra;
        }
        let pred = -(0..c.len())
            .map(|i| self.proj[i] * c[i] + 0.5 * self.values[i] * c[i] * c[i])
            .sum::<f64>();
        let z = &self.vectors * c;
        let d = self
            .chol
            .tr_solve_lower_triangular(&z)
            .expect("cholesky factor is invertible");
        (d, pred)
    }
}

/// Adds the gradient and Hessian of `−μ·log(−c)` for a constraint with
/// gradient `d` and Hessian `dd = (c_xx, c_xy, c_yy)`.
#[inline]
fn add_barrier(g: &mut [f64; 2], h: &mut [f64; 3], mu: f64, c: f64, d: [f64; 2], dd: [f64; 3]) {
    let inv = 1.0 / -c;
    let inv2 = inv * inv;
    g[0] += mu * d[0] * inv;
    g[1] += mu * d[1] * inv;
    h[0] += mu * (d[0] * d[0] * inv2 + dd[0] * inv);
    h[1] += mu * (d[0] * d[1] * inv2 + dd[1] * inv);
    h[2] += mu * (d[1] * d[1] * inv2 + dd[2] * inv);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{
        amplification_residuals, gain_residuals, hyperbola_residuals, Profiles, StabilitySpec,
        WeightProfile,
    };
    use crate::spectral::{dft_grid, ComplexSpectrum};
    use num_complex::Complex64;

    fn toy(l_dft: usize, taps: usize, g3: f64) -> DesignProblem {
        let grid = dft_grid(l_dft, l_dft as u32).unwrap();
        let values = (0..grid.num_bins())
            .map(|k| Complex64::from_polar(0.5, -grid.omega(k) * 1.5))
            .collect();
        let s = ComplexSpectrum::new(values, grid).unwrap();
        let profiles = Profiles {
            g1: WeightProfile::constant(1.0),
            g2: WeightProfile::constant(1.5849),
            g3: WeightProfile::constant(g3),
        };
        DesignProblem::new(vec![s], taps, profiles, StabilitySpec::default()).unwrap()
    }

    #[test]
    fn dead_plant_returns_zero_controller() {
        let grid = dft_grid(32, 32).unwrap();
        let p = DesignProblem::new(
            vec![ComplexSpectrum::zeros(grid)],
            4,
            Profiles::default(),
            StabilitySpec::default(),
        )
        .unwrap();
        let rep = solve(&p, &SolverOptions::default()).unwrap();
        assert!(rep.controller.to_vector().iter().all(|&c| c.abs() < 1e-12));
        assert!((rep.objective_value - rep.initial_objective).abs() < 1e-12);
    }

    #[test]
    fn toy_solution_is_feasible_and_improves() {
        let p = toy(16, 4, 2.0);
        let rep = solve(&p, &SolverOptions::default()).unwrap();
        let w = rep.controller.to_vector();
        assert!(rep.converged);
        assert!(rep.objective_value > rep.initial_objective);
        for r in [
            hyperbola_residuals(&w, &p).unwrap(),
            amplification_residuals(&w, &p).unwrap(),
            gain_residuals(&w, &p).unwrap(),
        ] {
            assert!(r.iter().all(|&v| v <= 1e-6));
        }
        assert!(rep.max_constraint_violation <= 1e-6);
    }

    #[test]
    fn deterministic_for_fixed_options() {
        let p = toy(16, 3, 2.0);
        let opts = SolverOptions {
            restarts: 2,
            seed: 7,
            ..SolverOptions::default()
        };
        let a = solve(&p, &opts).unwrap();
        let b = solve(&p, &opts).unwrap();
        assert_eq!(a.controller, b.controller);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn rejects_bad_options() {
        let p = toy(8, 2, 2.0);
        let bad = SolverOptions {
            max_iterations: 0,
            ..SolverOptions::default()
        };
        assert!(solve(&p, &bad).is_err());
        let bad = SolverOptions {
            constraint_margin: 0.9,
            ..SolverOptions::default()
        };
        assert!(solve(&p, &bad).is_err());
    }

    #[test]
    fn report_serializes() {
        let p = toy(8, 2, 2.0);
        let rep = solve(&p, &SolverOptions::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        assert!(v["objective_value"].as_f64().unwrap() >= v["initial_objective"].as_f64().unwrap());
        assert!(v["controller"]["coefficients"].is_array());
    }
}
