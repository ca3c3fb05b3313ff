//! Run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use anc_core::design::{Profiles, SolverOptions, StabilitySpec};
use anc_core::paths::{MismatchSpec, PlantSynthesisSpec};
use anc_core::sim::{NoiseFieldConfig, SignalFormat, SourceSpectrum};
use anc_core::spectral::{SpectrumGrid, WelchConfig};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub plant: PlantSection,
    #[serde(default)]
    pub design: DesignSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PlantSection {
    /// Seed for the synthesis jitter.
    pub seed: u64,
    /// Synthetic plant family, used when `manifest` is absent.
    pub synth: PlantSynthesisSpec,
    /// Existing plant manifest (for example imported measurements). When set,
    /// `synth-plant` is not needed and the other commands read this file.
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct DesignSection {
    /// Number of loudspeakers `L` driven by the multi-loudspeaker design.
    #[serde(alias = "L")]
    pub num_loudspeakers: usize,
    /// Taps per channel `N` of the multi-loudspeaker design.
    #[serde(alias = "N")]
    pub taps_per_channel: usize,
    /// Also design one controller per loudspeaker, each with `single_taps`
    /// taps, for the comparison protocol.
    pub single_loudspeaker_designs: bool,
    /// Defaults to `L·N`, so all designs have the same coefficient count.
    pub single_taps: Option<usize>,
    pub l_dft: usize,
    pub rho: f64,
    pub varrho: f64,
    pub profiles: Profiles,
    pub solver: SolverOptions,
    /// Dense verification grid size as a multiple of `l_dft`.
    pub verify_grid_factor: usize,
}

impl Default for DesignSection {
    fn default() -> Self {
        let spec = StabilitySpec::default();
        Self {
            num_loudspeakers: 2,
            taps_per_channel: 64,
            single_loudspeaker_designs: true,
            single_taps: None,
            l_dft: 8192,
            rho: spec.rho,
            varrho: spec.varrho,
            profiles: Profiles::default(),
            solver: SolverOptions::default(),
            verify_grid_factor: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub duration_s: f64,
    pub seed: u64,
    pub source_spectrum: SourceSpectrum,
    /// Independent eardrum noise, relative to the standard deviation of `d`.
    pub drum_noise_rel: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let n = NoiseFieldConfig::default();
        Self {
            duration_s: n.duration_s,
            seed: n.seed,
            source_spectrum: n.source_spectrum,
            drum_noise_rel: n.drum_noise_rel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    /// Perturbation of the true loudspeaker paths during simulation.
    pub mismatch: Option<MismatchSpec>,
    pub welch: WelchConfig,
    /// Band for the averaged attenuation in the summary.
    pub attenuation_band_hz: [f64; 2],
    /// Band for the worst-case amplification in the summary.
    pub amplification_band_hz: [f64; 2],
    /// Write every simulated signal in this format.
    pub save_signals: Option<SignalFormat>,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            mismatch: None,
            welch: WelchConfig::default(),
            attenuation_band_hz: [20.0, 300.0],
            amplification_band_hz: [1_000.0, 4_000.0],
            save_signals: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("anc-out"),
        }
    }
}

/// One controller to design: which loudspeakers it drives and its length.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignJob {
    pub label: String,
    pub loudspeakers: Vec<usize>,
    pub taps: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Io(anyhow::anyhow!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::Validation(anyhow::anyhow!("config {}: {e}", path.display())))
    }

    pub fn schema() -> String {
        serde_json::to_string_pretty(&schemars::schema_for!(RunConfig)).expect("schema serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Replaces every seed in the configuration.
    pub fn override_seed(&mut self, seed: u64) {
        self.plant.seed = seed;
        self.noise.seed = seed;
        self.design.solver.seed = seed;
        if let Some(m) = &mut self.sim.mismatch {
            m.seed = seed;
        }
    }

    pub fn stability(&self) -> StabilitySpec {
        StabilitySpec {
            rho: self.design.rho,
            varrho: self.design.varrho,
        }
    }

    pub fn single_taps(&self) -> usize {
        self.design
            .single_taps
            .unwrap_or(self.design.num_loudspeakers * self.design.taps_per_channel)
    }

    /// Single-loudspeaker designs first, then the joint design, matching the
    /// column order of the comparison report.
    pub fn design_jobs(&self) -> Vec<DesignJob> {
        let l = self.design.num_loudspeakers;
        let mut jobs = Vec::new();
        if self.design.single_loudspeaker_designs && l > 1 {
            for ls in 0..l {
                jobs.push(DesignJob {
                    label: format!("ch{}", ls + 1),
                    loudspeakers: vec![ls],
                    taps: self.single_taps(),
                });
            }
        }
        jobs.push(DesignJob {
            label: "multi".into(),
            loudspeakers: (0..l).collect(),
            taps: self.design.taps_per_channel,
        });
        jobs
    }

    pub fn plant_manifest(&self) -> PathBuf {
        self.plant
            .manifest
            .clone()
            .unwrap_or_else(|| self.output.directory.join("plant").join("plant.json"))
    }

    pub fn controller_manifest(&self, label: &str) -> PathBuf {
        self.output
            .directory
            .join("controllers")
            .join(label)
            .join("controller.json")
    }

    pub fn noise_config(&self, sample_rate: u32) -> NoiseFieldConfig {
        NoiseFieldConfig {
            duration_s: self.noise.duration_s,
            sample_rate,
            source_spectrum: self.noise.source_spectrum,
            seed: self.noise.seed,
            drum_noise_rel: self.noise.drum_noise_rel,
            ..NoiseFieldConfig::default()
        }
    }

    pub fn grid(&self, sample_rate: u32) -> Result<SpectrumGrid, Failure> {
        SpectrumGrid::new(self.design.l_dft, sample_rate).map_err(Failure::from)
    }

    /// Checks everything that can be checked without touching the disk.
    pub fn validate(&self) -> Result<(), Failure> {
        let bad = |msg: String| Err(Failure::Validation(anyhow::anyhow!(msg)));
        let d = &self.design;
        if d.num_loudspeakers == 0 {
            return bad("design.num_loudspeakers must be at least 1".into());
        }
        if d.taps_per_channel == 0 || self.single_taps() == 0 {
            return bad("controller tap counts must be at least 1".into());
        }
        if d.taps_per_channel.max(self.single_taps()) > d.l_dft {
            return bad(format!("controller taps must not exceed l_dft = {}", d.l_dft));
        }
        if d.verify_grid_factor < 4 {
            return bad("design.verify_grid_factor must be at least 4".into());
        }
        self.stability().validate()?;
        d.profiles.validate()?;
        if let Some(&(f, v)) = d.profiles.g2.breakpoints.iter().find(|b| b.1 < 1.0) {
            return bad(format!("g2 must be at least 1 (0 dB) everywhere, got {v} at {f} Hz"));
        }
        d.solver.validate()?;

        let sample_rate = match &self.plant.manifest {
            Some(_) => None,
            None => {
                self.plant.synth.validate()?;
                if self.plant.synth.loudspeakers.len() != d.num_loudspeakers {
                    return bad(format!(
                        "design.num_loudspeakers = {} but the synthetic plant has {} loudspeakers",
                        d.num_loudspeakers,
                        self.plant.synth.loudspeakers.len()
                    ));
                }
                Some(self.plant.synth.sample_rate)
            }
        };
        SpectrumGrid::new(d.l_dft, sample_rate.unwrap_or(1))?;
        self.noise_config(sample_rate.unwrap_or(1)).validate()?;

        self.sim.welch.validate()?;
        if self.sim.welch.segment_length > d.l_dft {
            return bad("sim.welch.segment_length must not exceed design.l_dft".into());
        }
        if let Some(m) = &self.sim.mismatch {
            m.validate(d.num_loudspeakers)?;
        }
        for (name, [lo, hi]) in [
            ("attenuation_band_hz", self.sim.attenuation_band_hz),
            ("amplification_band_hz", self.sim.amplification_band_hz),
        ] {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi) {
                return bad(format!("sim.{name} must satisfy 0 <= lo < hi, got [{lo}, {hi}]"));
            }
        }
        if self.output.directory.as_os_str().is_empty() {
            return bad("output.directory must not be empty".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_document_is_default() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"design": {"tapz": 3}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn short_aliases() {
        let cfg: RunConfig = serde_json::from_str(r#"{"design": {"L": 2, "N": 32}}"#).unwrap();
        assert_eq!(cfg.design.taps_per_channel, 32);
        assert_eq!(cfg.single_taps(), 64);
    }

    #[test]
    fn jobs_follow_report_order() {
        let labels: Vec<String> = RunConfig::default().design_jobs().into_iter().map(|j| j.label).collect();
        assert_eq!(labels, ["ch1", "ch2", "multi"]);
    }

    #[test]
    fn invalid_values() {
        let mut cfg = RunConfig::default();
        cfg.design.num_loudspeakers = 0;
        assert!(matches!(cfg.validate(), Err(Failure::Validation(_))));

        let mut cfg = RunConfig::default();
        cfg.design.rho = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.design.profiles.g2 = anc_core::design::WeightProfile::constant(0.5);
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.sim.attenuation_band_hz = [300.0, 20.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seed_override_reaches_every_seed() {
        let mut cfg = RunConfig::default();
        cfg.sim.mismatch = Some(MismatchSpec::default());
        cfg.override_seed(7);
        assert_eq!(
            (cfg.plant.seed, cfg.noise.seed, cfg.design.solver.seed, cfg.sim.mismatch.unwrap().seed),
            (7, 7, 7, 7)
        );
    }

    #[test]
    fn schema_mentions_sections() {
        let s = RunConfig::schema();
        for key in ["plant", "design", "noise", "sim", "output", "additionalProperties"] {
            assert!(s.contains(key), "{key}");
        }
    }
}
