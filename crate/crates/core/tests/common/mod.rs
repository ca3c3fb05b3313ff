#![allow(dead_code)]

use anc_core::design::{DesignProblem, Profiles, StabilitySpec, WeightProfile};
use anc_core::paths::{freq_response, ImpulseResponse};
use anc_core::spectral::{dft_grid, SpectrumGrid};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random causal path with a zero first tap and decaying taps.
pub fn random_path(rng: &mut ChaCha8Rng, len: usize, fs: u32) -> ImpulseResponse {
    let mut taps = vec![0.0];
    taps.extend((1..len).map(|i| rng.random_range(-1.0..1.0) * 0.8f64.powi(i as i32)));
    ImpulseResponse::new(taps, fs).unwrap()
}

pub fn random_profiles(rng: &mut ChaCha8Rng, fs: u32) -> Profiles {
    let nyq = fs as f64 / 2.0;
    Profiles {
        g1: WeightProfile::new(vec![
            (nyq * 0.05, rng.random_range(0.5..2.0)),
            (nyq * 0.5, rng.random_range(0.01..0.5)),
        ])
        .unwrap(),
        g2: WeightProfile::constant(rng.random_range(1.2..2.0)),
        g3: WeightProfile::constant(rng.random_range(1.0..10.0)),
    }
}

pub fn random_problem(seed: u64, channels: usize, taps: usize, l_dft: usize) -> (DesignProblem, Vec<ImpulseResponse>) {
    let mut r = rng(seed);
    let fs = 8_000;
    let grid = dft_grid(l_dft, fs).unwrap();
    let paths: Vec<ImpulseResponse> = (0..channels).map(|_| random_path(&mut r, 24, fs)).collect();
    let s_hat = paths.iter().map(|p| freq_response(p, grid).unwrap()).collect();
    let profiles = random_profiles(&mut r, fs);
    (
        DesignProblem::new(s_hat, taps, profiles, StabilitySpec::default()).unwrap(),
        paths,
    )
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Direct DTFT on the design grid, independent of any FFT.
pub fn direct_response(taps: &[f64], grid: &SpectrumGrid, k: usize) -> Complex64 {
    taps.iter()
        .enumerate()
        .map(|(n, &t)| Complex64::from_polar(t, -grid.omega(k) * n as f64))
        .sum()
}
