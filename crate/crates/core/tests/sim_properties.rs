mod common;

use anc_core::design::ControllerBank;
use anc_core::paths::{synth_plant, ImpulseResponse, PlantModel, PlantSynthesisSpec};
use anc_core::sim::{
    gen_noise, predicted_psd_full, predicted_psd_vma, run_closed_loop, NoiseFieldConfig, SpectralFactors,
};
use anc_core::spectral::{coherence, dft_grid, ComplexSpectrum, PsdEstimate, WelchConfig};
use common::{random_path, random_vector, rng};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::Rng;

const FS: u32 = 8000;

fn random_plant(seed: u64, channels: usize, perfect: bool) -> PlantModel {
    let mut r = rng(seed);
    let mut paths = |n: usize| -> Vec<ImpulseResponse> { (0..n).map(|_| random_path(&mut r, 12, FS)).collect() };
    let s_true = paths(channels);
    let br_true = paths(channels);
    let (s_model, br_model) = if perfect {
        (s_true.clone(), br_true.clone())
    } else {
        (paths(channels), paths(channels))
    };
    let mut r = rng(seed ^ 0x55);
    let primary = |r: &mut rand_chacha::ChaCha8Rng| ImpulseResponse::new(random_vector(r, 6, 1.0), FS).unwrap();
    PlantModel {
        sample_rate: FS,
        s_true,
        s_model,
        br_true,
        br_model,
        primary_drum: primary(&mut r),
        primary_mic: primary(&mut r),
    }
}

fn random_bank(seed: u64, channels: usize, taps: usize, scale: f64) -> ControllerBank {
    let mut r = rng(seed);
    ControllerBank::new((0..channels).map(|_| random_vector(&mut r, taps, scale)).collect(), FS).unwrap()
}

/// Direct evaluation of the loop from full signal histories.
fn oracle_error(plant: &PlantModel, c: &ControllerBank, d: &[f64], r: &[f64]) -> Vec<f64> {
    let l = plant.num_loudspeakers();
    let n = d.len();
    let mut u = vec![vec![0.0; n]; l];
    let mut e_hat = vec![0.0; n];
    let mut e = vec![0.0; n];
    let past = |taps: &[f64], x: &[f64], i: usize| -> f64 {
        (1..taps.len()).filter(|&j| j <= i).map(|j| taps[j] * x[i - j]).sum()
    };
    for i in 0..n {
        let mut mic = r[i];
        let mut s_hat_u = 0.0;
        let mut s_u = 0.0;
        for ch in 0..l {
            mic -= past(plant.br_true[ch].taps(), &u[ch], i);
            mic += past(plant.br_model[ch].taps(), &u[ch], i);
            s_hat_u += past(plant.s_model[ch].taps(), &u[ch], i);
            s_u += past(plant.s_true[ch].taps(), &u[ch], i);
        }
        e_hat[i] = mic - s_hat_u;
        e[i] = d[i] - s_u;
        for ch in 0..l {
            u[ch][i] = c.channel(ch).iter().enumerate().filter(|&(j, _)| j <= i).map(|(j, w)| w * e_hat[i - j]).sum();
        }
    }
    e
}

fn small_noise(seed: u64) -> NoiseFieldConfig {
    NoiseFieldConfig {
        duration_s: 0.25,
        sample_rate: FS,
        seed,
        ..NoiseFieldConfig::default()
    }
}

#[test]
fn loop_matches_direct_oracle_with_mismatch() {
    for seed in 0..4 {
        let plant = random_plant(seed, 2, false);
        let c = random_bank(seed + 10, 2, 5, 0.1);
        let (d, r) = gen_noise(&plant, &small_noise(seed)).unwrap();
        let (d, r) = (&d[..600], &r[..600]);
        let sim = run_closed_loop(&plant, &c, d, r).unwrap();
        assert!(sim.stable);
        let oracle = oracle_error(&plant, &c, d, r);
        for (a, b) in sim.e.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn common_source_noise_is_coherent() {
    let plant = synth_plant(&PlantSynthesisSpec::default(), 0).unwrap();
    let cfg = NoiseFieldConfig {
        duration_s: 2.0,
        ..NoiseFieldConfig::default()
    };
    let (d, r) = gen_noise(&plant, &cfg).unwrap();
    let grid = dft_grid(1024, plant.sample_rate).unwrap();
    let welch = WelchConfig {
        segment_length: 1024,
        ..WelchConfig::default()
    };
    let c = coherence(&r, &d, &welch, grid).unwrap();
    for k in 1..grid.num_bins() {
        if grid.freq(k) < 4_000.0 {
            assert!(c[k] > 0.99, "bin {k}: {}", c[k]);
        }
    }
    let noisy = gen_noise(&plant, &NoiseFieldConfig { drum_noise_rel: 1.0, ..cfg }).unwrap();
    let c2 = coherence(&noisy.1, &noisy.0, &welch, grid).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&c2) < mean(&c) - 0.2);
}

#[test]
fn simulation_is_deterministic() {
    let plant = random_plant(3, 2, false);
    let c = random_bank(4, 2, 6, 0.1);
    let a = gen_noise(&plant, &small_noise(9)).unwrap();
    let b = gen_noise(&plant, &small_noise(9)).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        run_closed_loop(&plant, &c, &a.0, &a.1).unwrap(),
        run_closed_loop(&plant, &c, &b.0, &b.1).unwrap()
    );
    assert_ne!(a, gen_noise(&plant, &small_noise(10)).unwrap());
}

fn analytic_factors(seed: u64, coherent: bool) -> SpectralFactors {
    let grid = dft_grid(64, FS).unwrap();
    let mut r = rng(seed);
    let rr: Vec<f64> = (0..grid.num_bins()).map(|_| r.random_range(0.1..10.0)).collect();
    let (dd, dr): (Vec<f64>, Vec<Complex64>) = if coherent {
        (rr.clone(), rr.iter().map(|&v| Complex64::new(v, 0.0)).collect())
    } else {
        rr.iter()
            .map(|&v| {
                let h = Complex64::from_polar(r.random_range(0.1..2.0), r.random_range(-3.0..3.0));
                let gamma = r.random_range(0.0..1.0f64);
                (h.norm_sqr() * v, h * v * gamma.sqrt())
            })
            .unzip()
    };
    SpectralFactors::new(
        PsdEstimate::from_density(rr, grid).unwrap(),
        PsdEstimate::from_density(dd, grid).unwrap(),
        ComplexSpectrum::new(dr, grid).unwrap(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn perfect_model_estimate_is_exact(seed in 0u64..10_000, channels in 1usize..3) {
        let plant = random_plant(seed, channels, true).with_identical_primary();
        let c = random_bank(seed + 1, channels, 4, 0.1);
        let (d, r) = gen_noise(&plant, &small_noise(seed)).unwrap();
        prop_assert_eq!(&d, &r);
        let sim = run_closed_loop(&plant, &c, &d, &r).unwrap();
        for (a, b) in sim.e.iter().zip(&sim.e_hat) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn simulation_is_linear(seed in 0u64..10_000, alpha in -4.0f64..4.0) {
        let plant = random_plant(seed, 2, false);
        let c = random_bank(seed + 1, 2, 4, 0.1);
        let (d, r) = gen_noise(&plant, &small_noise(seed)).unwrap();
        let base = run_closed_loop(&plant, &c, &d, &r).unwrap();
        let scale = |x: &[f64], a: f64| -> Vec<f64> { x.iter().map(|v| a * v).collect() };

        // Power-of-two factors commute exactly with every product and sum.
        let exact = run_closed_loop(&plant, &c, &scale(&d, 4.0), &scale(&r, 4.0)).unwrap();
        prop_assert_eq!(exact.e, scale(&base.e, 4.0));
        for (u, ub) in exact.u.iter().zip(&base.u) {
            prop_assert_eq!(u, &scale(ub, 4.0));
        }

        let general = run_closed_loop(&plant, &c, &scale(&d, alpha), &scale(&r, alpha)).unwrap();
        let peak = base.e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in general.e.iter().zip(&base.e) {
            prop_assert!((a - alpha * b).abs() <= 1e-12 * alpha.abs() * peak.max(1.0));
        }
    }

    #[test]
    fn full_prediction_reduces_to_vma(seed in 0u64..10_000, channels in 1usize..3, scale in 0.01f64..0.5) {
        let plant = random_plant(seed, channels, true);
        let c = random_bank(seed + 1, channels, 6, scale);
        let factors = analytic_factors(seed, true);
        let full = predicted_psd_full(&c, &plant, &factors).unwrap();
        let vma = predicted_psd_vma(&c, &plant.s_model, &factors.phi_rr).unwrap();
        for (a, b) in full.total.density.iter().zip(&vma.density) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs());
        }
        prop_assert!(full.minimum.density.iter().all(|&m| m.abs() <= 1e-9));
    }

    // Zero controller: the full prediction is the eardrum PSD for any
    // coherence between d and r.
    #[test]
    fn zero_controller_full_prediction_is_open_loop(seed in 0u64..10_000) {
        let plant = random_plant(seed, 2, false);
        let c = ControllerBank::zeros(2, 4, FS).unwrap();
        let factors = analytic_factors(seed, false);
        let full = predicted_psd_full(&c, &plant, &factors).unwrap();
        for (a, b) in full.total.density.iter().zip(&factors.phi_dd.density) {
            prop_assert!((a - b).abs() <= 1e-9 * b);
        }
    }
}
