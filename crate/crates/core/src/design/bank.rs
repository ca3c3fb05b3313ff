use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Profiles, StabilitySpec};
use crate::error::{ensure_finite, Error, Result};
use crate::paths::{load_ir, read_json, write_csv_column, write_json, IrFormat};

/// `L` FIR controllers of `N` taps. Concatenating the channels gives the
/// design vector `w` of length `L·N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerBank {
    coefficients: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl ControllerBank {
    pub fn new(coefficients: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        let n = coefficients.first().map_or(0, Vec::len);
        if coefficients.is_empty() || n == 0 {
            return Err(Error::Empty("controller bank needs at least one non-empty channel"));
        }
        for ch in &coefficients {
            if ch.len() != n {
                return Err(Error::Dimension {
                    what: "taps per channel",
                    expected: n,
                    got: ch.len(),
                });
            }
            ensure_finite(ch)?;
        }
        if sample_rate == 0 {
            return Err(Error::InvalidParameter("sample rate must be positive".into()));
        }
        Ok(Self {
            coefficients,
            sample_rate,
        })
    }

    pub fn zeros(num_channels: usize, taps_per_channel: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![vec![0.0; taps_per_channel]; num_channels], sample_rate)
    }

    pub fn from_vector(w: &[f64], num_channels: usize, sample_rate: u32) -> Result<Self> {
        if num_channels == 0 || !w.len().is_multiple_of(num_channels) {
            return Err(Error::Dimension {
                what: "design vector length (multiple of channel count)",
                expected: num_channels.max(1) * (w.len() / num_channels.max(1)),
                got: w.len(),
            });
        }
        let n = w.len() / num_channels;
        Self::new(w.chunks(n).map(<[f64]>::to_vec).collect(), sample_rate)
    }

    pub fn to_vector(&self) -> Vec<f64> {
        self.coefficients.concat()
    }

    pub fn num_channels(&self) -> usize {
        self.coefficients.len()
    }

    pub fn taps_per_channel(&self) -> usize {
        self.coefficients[0].len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, l: usize) -> &[f64] {
        &self.coefficients[l]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.coefficients
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            coefficients: self
                .coefficients
                .iter()
                .map(|ch| ch.iter().map(|c| c * gain).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Expands to a bank for `total` loudspeakers, placing channel `i` on
    /// loudspeaker `loudspeakers[i]` and silencing the rest.
    pub fn embed(&self, loudspeakers: &[usize], total: usize) -> Result<Self> {
        if loudspeakers.len() != self.num_channels() {
            return Err(Error::Dimension {
                what: "loudspeaker map",
                expected: self.num_channels(),
                got: loudspeakers.len(),
            });
        }
        let mut coefficients = vec![vec![0.0; self.taps_per_channel()]; total];
        for (ch, &ls) in loudspeakers.iter().enumerate() {
            if ls >= total {
                return Err(Error::InvalidParameter(format!(
                    "loudspeaker index {ls} out of range for {total} loudspeakers"
                )));
            }
            coefficients[ls] = self.coefficients[ch].clone();
        }
        Self::new(coefficients, self.sample_rate)
    }

    /// Writes `channel_<l>.csv` files plus `controller.json` into `dir`.
    pub fn save(&self, dir: &Path, design: DesignInfo) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut channel_files = Vec::new();
        for (l, ch) in self.coefficients.iter().enumerate() {
            let file = format!("channel_{}.csv", l + 1);
            write_csv_column(&dir.join(&file), ch)?;
            channel_files.push(file);
        }
        let manifest = ControllerManifest {
            num_channels: self.num_channels(),
            taps_per_channel: self.taps_per_channel(),
            sample_rate: self.sample_rate,
            l_dft: design.l_dft,
            loudspeakers: design.loudspeakers,
            stability: design.stability,
            profiles: design.profiles,
            channel_files,
        };
        let path = dir.join("controller.json");
        write_json(&path, &manifest)?;
        Ok(path)
    }

    pub fn load(manifest_path: &Path) -> Result<(Self, ControllerManifest)> {
        let manifest: ControllerManifest = read_json(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let fmt = IrFormat::Csv {
            sample_rate: manifest.sample_rate,
        };
        let coefficients = manifest
            .channel_files
            .iter()
            .map(|f| load_ir(&dir.join(f), fmt).map(|ir| ir.taps().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let bank = Self::new(coefficients, manifest.sample_rate)?;
        if bank.num_channels() != manifest.num_channels
            || bank.taps_per_channel() != manifest.taps_per_channel
        {
            return Err(Error::Dimension {
                what: "controller manifest taps",
                expected: manifest.num_channels * manifest.taps_per_channel,
                got: bank.num_channels() * bank.taps_per_channel(),
            });
        }
        Ok((bank, manifest))
    }
}

/// Design context recorded next to the coefficients.
#[derive(Clone, Debug)]
pub struct DesignInfo {
    pub l_dft: usize,
    pub loudspeakers: Vec<usize>,
    pub stability: StabilitySpec,
    pub profiles: Profiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerManifest {
    pub num_channels: usize,
    pub taps_per_channel: usize,
    pub sample_rate: u32,
    pub l_dft: usize,
    /// Plant loudspeaker driven by each channel (zero-based).
    pub loudspeakers: Vec<usize>,
    pub stability: StabilitySpec,
    pub profiles: Profiles,
    pub channel_files: Vec<String>,
}
