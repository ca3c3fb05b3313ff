//! Subcommand implementations. Each takes an already validated configuration.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anc_core::design::{solve, ControllerBank, DesignInfo, DesignProblem, SolveReport};
use anc_core::paths::{apply_mismatch, synth_plant, PlantModel};
use anc_core::sim::{
    attenuation_curve, band_attenuation, band_max_amplification, comparison_csv, gen_noise, run_closed_loop,
};
use anc_core::spectral::{welch_psd, PsdEstimate};
use anc_core::stability::{effective_loop_paths, open_loop_response, verify_design};
use anyhow::anyhow;
use serde::Serialize;

use crate::config::{DesignJob, RunConfig};
use crate::failure::Failure;

pub struct Log {
    verbose: bool,
    start: Instant,
}

impl Log {
    pub fn new(verbose: bool) -> Self {
        Self {
            verbose,
            start: Instant::now(),
        }
    }

    pub fn info(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[{:8.2}s] {}", self.start.elapsed().as_secs_f64(), msg.as_ref());
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Io(anyhow!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Io(anyhow!("cannot write {}: {e}", path.display())))
}

fn load_plant(cfg: &RunConfig) -> Result<PlantModel, Failure> {
    let path = cfg.plant_manifest();
    let plant = PlantModel::load(&path).map_err(|e| match Failure::from(e) {
        Failure::Io(e) => Failure::Io(anyhow!("cannot load plant {}: {e}", path.display())),
        other => other,
    })?;
    if plant.num_loudspeakers() != cfg.design.num_loudspeakers {
        return Err(Failure::Validation(anyhow!(
            "plant {} has {} loudspeakers but design.num_loudspeakers = {}",
            path.display(),
            plant.num_loudspeakers(),
            cfg.design.num_loudspeakers
        )));
    }
    Ok(plant)
}

/// Controller manifests named on the command line, or every design of the
/// configuration.
fn controller_paths(cfg: &RunConfig, explicit: &[PathBuf]) -> Vec<PathBuf> {
    if explicit.is_empty() {
        cfg.design_jobs().iter().map(|j| cfg.controller_manifest(&j.label)).collect()
    } else {
        explicit.to_vec()
    }
}

struct LoadedController {
    label: String,
    bank: ControllerBank,
}

/// Loads a controller and spreads it over all plant loudspeakers.
fn load_controller(path: &Path, plant: &PlantModel) -> Result<LoadedController, Failure> {
    let (bank, manifest) = ControllerBank::load(path).map_err(|e| match Failure::from(e) {
        Failure::Io(e) => Failure::Io(anyhow!("cannot load controller {}: {e}", path.display())),
        other => other,
    })?;
    if bank.sample_rate() != plant.sample_rate {
        return Err(Failure::Validation(anyhow!(
            "controller {} runs at {} Hz but the plant at {} Hz",
            path.display(),
            bank.sample_rate(),
            plant.sample_rate
        )));
    }
    let bank = bank.embed(&manifest.loudspeakers, plant.num_loudspeakers())?;
    let label = path
        .parent()
        .and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "controller".into());
    Ok(LoadedController { label, bank })
}

pub fn synth_plant_cmd(cfg: &RunConfig, log: &Log) -> Result<PathBuf, Failure> {
    if cfg.plant.manifest.is_some() {
        return Err(Failure::Validation(anyhow!(
            "plant.manifest is set, so there is no plant to synthesize"
        )));
    }
    log.info(format!("synthesizing plant with seed {}", cfg.plant.seed));
    let plant = synth_plant(&cfg.plant.synth, cfg.plant.seed)?;
    let dir = cfg.output.directory.join("plant");
    let path = plant.save(&dir)?;
    println!("plant: {}", path.display());
    Ok(path)
}

fn design_one(plant: &PlantModel, cfg: &RunConfig, job: &DesignJob) -> Result<SolveReport, Failure> {
    let sub = plant.select_loudspeakers(&job.loudspeakers)?;
    let grid = cfg.grid(plant.sample_rate)?;
    let problem = DesignProblem::from_plant(&sub, grid, job.taps, cfg.design.profiles.clone(), cfg.stability())?;
    Ok(solve(&problem, &cfg.design.solver)?)
}

pub fn design_cmd(cfg: &RunConfig, log: &Log) -> Result<(), Failure> {
    let plant = load_plant(cfg)?;
    let jobs = cfg.design_jobs();
    let results: Vec<Result<SolveReport, Failure>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|job| {
                let plant = &plant;
                s.spawn(move || {
                    log.info(format!("designing {} ({} x {} taps)", job.label, job.loudspeakers.len(), job.taps));
                    let out = design_one(plant, cfg, job);
                    log.info(format!("finished {}", job.label));
                    out
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("design thread panicked")).collect()
    });
    let reports = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut unconverged = Vec::new();
    for (job, report) in jobs.iter().zip(&reports) {
        let manifest = cfg.controller_manifest(&job.label);
        let dir = manifest.parent().expect("manifest lives in a directory");
        report.controller.save(
            dir,
            DesignInfo {
                l_dft: cfg.design.l_dft,
                loudspeakers: job.loudspeakers.clone(),
                stability: cfg.stability(),
                profiles: cfg.design.profiles.clone(),
            },
        )?;
        write_file(&dir.join("report.json"), &(report.to_json() + "\n"))?;
        println!(
            "{}: objective {:.4} (zero controller {:.4}), max violation {:.2e}, {} iterations, converged {} -> {}",
            job.label,
            report.objective_value,
            report.initial_objective,
            report.max_constraint_violation,
            report.iterations,
            report.converged,
            manifest.display()
        );
        if !report.converged || report.max_constraint_violation > cfg.design.solver.feasibility_tol {
            unconverged.push(job.label.clone());
        }
    }
    if unconverged.is_empty() {
        Ok(())
    } else {
        Err(Failure::Solver(anyhow!("designs did not converge: {}", unconverged.join(", "))))
    }
}

pub fn verify_cmd(cfg: &RunConfig, controllers: &[PathBuf], gain: f64, log: &Log) -> Result<(), Failure> {
    if !(gain.is_finite() && gain > 0.0) {
        return Err(Failure::Validation(anyhow!("--gain must be positive, got {gain}")));
    }
    let plant = load_plant(cfg)?;
    let loaded = controller_paths(cfg, controllers)
        .iter()
        .map(|p| load_controller(p, &plant))
        .collect::<Result<Vec<_>, _>>()?;
    let dir = cfg.output.directory.join("verify");
    create_dir(&dir)?;
    let grid_size = cfg.design.verify_grid_factor * cfg.design.l_dft;
    let loop_paths = effective_loop_paths(&plant)?;
    let mut failed = Vec::new();
    for c in loaded {
        let label = if gain == 1.0 {
            c.label
        } else {
            format!("{}_gain{gain}", c.label)
        };
        let bank = c.bank.scaled(gain);
        log.info(format!("verifying {label} on {grid_size} points"));
        let report = verify_design(&bank, &plant, &cfg.stability(), grid_size)?;
        write_file(&dir.join(format!("{label}.json")), &(report.to_json() + "\n"))?;
        open_loop_response(&bank, &loop_paths, grid_size)?.write_csv(&dir.join(format!("{label}_nyquist.csv")))?;
        let fmt = |v: Option<f64>| match (report.winding_number, v) {
            (Some(0), Some(v)) => format!("{v:.3}"),
            (Some(0), None) => "inf".into(),
            _ => "n/a".into(),
        };
        println!(
            "{label}: {} winding {} GM {} PM {} rad (bounds {:.3}, {:.3}) dense residual {:.2e}",
            if report.passed { "PASS" } else { "FAIL" },
            report.winding_number.map_or("marginal".into(), |w| w.to_string()),
            fmt(report.gain_margin),
            fmt(report.phase_margin),
            report.gain_margin_bound,
            report.phase_margin_bound,
            report.dense_max_hyperbola_residual
        );
        if !report.passed {
            failed.push(label);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Instability(anyhow!("verification failed for {}", failed.join(", "))))
    }
}

#[derive(Serialize)]
struct ControllerSummary {
    label: String,
    stable: bool,
    /// Mean attenuation over the attenuation band; `None` if the run diverged.
    band_attenuation_db: Option<f64>,
    /// Largest amplification over the amplification band.
    max_amplification_db: Option<f64>,
    samples_simulated: usize,
}

#[derive(Serialize)]
struct SimSummary {
    sample_rate: u32,
    duration_s: f64,
    noise_seed: u64,
    mismatch_applied: bool,
    attenuation_band_hz: [f64; 2],
    amplification_band_hz: [f64; 2],
    comparison_csv: String,
    controllers: Vec<ControllerSummary>,
}

pub fn simulate_cmd(cfg: &RunConfig, controllers: &[PathBuf], log: &Log) -> Result<(), Failure> {
    let mut plant = load_plant(cfg)?;
    let loaded = controller_paths(cfg, controllers)
        .iter()
        .map(|p| load_controller(p, &plant))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(m) = &cfg.sim.mismatch {
        plant = apply_mismatch(&plant, m)?;
    }
    let grid = cfg.grid(plant.sample_rate)?;
    let welch = &cfg.sim.welch;
    log.info(format!("generating {} s of noise", cfg.noise.duration_s));
    let (d, r) = gen_noise(&plant, &cfg.noise_config(plant.sample_rate))?;
    let psd_off = welch_psd(&d, welch, grid)?;

    let runs = std::thread::scope(|s| {
        let handles: Vec<_> = loaded
            .iter()
            .map(|c| {
                let (plant, d, r) = (&plant, &d, &r);
                s.spawn(move || {
                    log.info(format!("simulating {}", c.label));
                    run_closed_loop(plant, &c.bank, d, r)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let dir = cfg.output.directory.join("sim");
    create_dir(&dir)?;
    let [att_lo, att_hi] = cfg.sim.attenuation_band_hz;
    let [amp_lo, amp_hi] = cfg.sim.amplification_band_hz;
    let mut summaries = Vec::new();
    let mut psds: Vec<(String, PsdEstimate)> = Vec::new();
    for (c, run) in loaded.iter().zip(&runs) {
        let mut summary = ControllerSummary {
            label: c.label.clone(),
            stable: run.stable,
            band_attenuation_db: None,
            max_amplification_db: None,
            samples_simulated: run.len(),
        };
        if run.stable {
            let psd = welch_psd(&run.e, welch, grid)?;
            let curve = attenuation_curve(&psd_off, &psd)?;
            summary.band_attenuation_db = Some(band_attenuation(&curve, att_lo, att_hi, &grid)?);
            summary.max_amplification_db = Some(band_max_amplification(&curve, amp_lo, amp_hi, &grid)?);
            psds.push((c.label.clone(), psd));
        }
        if let Some(format) = cfg.sim.save_signals {
            run.save(&dir.join("signals").join(&c.label), format, plant.sample_rate)?;
        }
        println!(
            "{}: stable {} band attenuation {} dB, max amplification {} dB",
            c.label,
            run.stable,
            summary.band_attenuation_db.map_or("n/a".into(), |v| format!("{v:.2}")),
            summary.max_amplification_db.map_or("n/a".into(), |v| format!("{v:.2}"))
        );
        summaries.push(summary);
    }

    let columns: Vec<(&str, &PsdEstimate)> = psds.iter().map(|(l, p)| (l.as_str(), p)).collect();
    write_file(&dir.join("comparison.csv"), &comparison_csv(&psd_off, &columns)?)?;
    let summary = SimSummary {
        sample_rate: plant.sample_rate,
        duration_s: cfg.noise.duration_s,
        noise_seed: cfg.noise.seed,
        mismatch_applied: cfg.sim.mismatch.is_some(),
        attenuation_band_hz: cfg.sim.attenuation_band_hz,
        amplification_band_hz: cfg.sim.amplification_band_hz,
        comparison_csv: "comparison.csv".into(),
        controllers: summaries,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&dir.join("summary.json"), &(json + "\n"))?;
    println!("comparison: {}", dir.join("comparison.csv").display());

    let unstable: Vec<&str> = summary.controllers.iter().filter(|c| !c.stable).map(|c| c.label.as_str()).collect();
    if unstable.is_empty() {
        Ok(())
    } else {
        Err(Failure::Instability(anyhow!("simulation diverged for {}", unstable.join(", "))))
    }
}

/// Full pipeline: plant, designs, audit and comparison.
pub fn run_cmd(cfg: &RunConfig, log: &Log) -> Result<(), Failure> {
    if cfg.plant.manifest.is_none() {
        synth_plant_cmd(cfg, log)?;
    }
    design_cmd(cfg, log)?;
    verify_cmd(cfg, &[], 1.0, log)?;
    simulate_cmd(cfg, &[], log)
}
