//! Acoustic impulse responses and the headphone plant.
//!
//! A plant holds, per loudspeaker, the true and measured paths to the
//! eardrum (`S`, `Ŝ`) and to the inner microphone (`B_r`, `B̂_r`), plus the
//! primary noise paths to both sensors. Loudspeaker paths always start with
//! a zero tap so every loop in the closed-loop simulation carries at least
//! one sample of delay.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::spectral::{ComplexSpectrum, SpectrumGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponse {
    taps: Vec<f64>,
    sample_rate: u32,
}

impl ImpulseResponse {
    pub fn new(taps: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::Empty("impulse response has no taps"));
        }
        ensure_finite(&taps)?;
        if sample_rate == 0 {
            return Err(Error::InvalidParameter("sample rate must be positive".into()));
        }
        Ok(Self { taps, sample_rate })
    }

    /// Pure delay of `samples` samples.
    pub fn delay(samples: usize, sample_rate: u32) -> Result<Self> {
        let mut taps = vec![0.0; samples + 1];
        taps[samples] = 1.0;
        Self::new(taps, sample_rate)
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn leading_zeros(&self) -> usize {
        self.taps.iter().take_while(|&&t| t == 0.0).count()
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            taps: self.taps.iter().map(|t| t * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn convolve(&self, other: &ImpulseResponse) -> Result<Self> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::SampleRateMismatch {
                left: self.sample_rate,
                right: other.sample_rate,
            });
        }
        Self::new(convolve(&self.taps, &other.taps), self.sample_rate)
    }

    /// DTFT at a single normalized frequency.
    pub fn response_at(&self, omega: f64) -> Complex64 {
        dtft(&self.taps, omega)
    }
}

pub(crate) fn dtft(taps: &[f64], omega: f64) -> Complex64 {
    taps.iter()
        .enumerate()
        .filter(|(_, &t)| t != 0.0)
        .map(|(n, &t)| Complex64::from_polar(t, -omega * n as f64))
        .sum()
}

/// Full linear convolution, skipping zero taps of `b`.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (j, &bj) in b.iter().enumerate() {
        if bj == 0.0 {
            continue;
        }
        for (o, &ai) in out[j..].iter_mut().zip(a) {
            *o += ai * bj;
        }
    }
    out
}

/// Evaluates `Σ_n taps[n]·exp(−jΩ_k n)` on the one-sided grid. Taps longer
/// than the DFT are folded modulo `l_dft`, which is exact on the grid.
pub fn freq_response(ir: &ImpulseResponse, grid: SpectrumGrid) -> Result<ComplexSpectrum> {
    if ir.sample_rate != grid.sample_rate() {
        return Err(Error::SampleRateMismatch {
            left: ir.sample_rate,
            right: grid.sample_rate(),
        });
    }
    Ok(ComplexSpectrum {
        values: taps_response(&ir.taps, grid.l_dft()),
        grid,
    })
}

pub(crate) fn taps_response(taps: &[f64], l_dft: usize) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); l_dft];
    for (n, &t) in taps.iter().enumerate() {
        buf[n % l_dft].re += t;
    }
    FftPlanner::new().plan_fft_forward(l_dft).process(&mut buf);
    buf.truncate(l_dft / 2 + 1);
    buf
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IrFormat {
    /// One decimal tap per line; CSV carries no rate so it is supplied here.
    Csv { sample_rate: u32 },
    /// 32-bit float mono WAV; the header's rate is authoritative.
    WavFloat,
}

pub fn load_ir(path: &Path, format: IrFormat) -> Result<ImpulseResponse> {
    match format {
        IrFormat::Csv { sample_rate } => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let taps = parse_csv_column(&text, path)?;
            if taps.is_empty() {
                return Err(Error::Empty("impulse response file has no taps"));
            }
            ImpulseResponse::new(taps, sample_rate)
        }
        IrFormat::WavFloat => {
            let wav_err = |msg: String| Error::Wav {
                path: path.to_path_buf(),
                msg,
            };
            let mut reader = hound::WavReader::open(path).map_err(|e| match e {
                hound::Error::IoError(io) => Error::io(path, io),
                other => wav_err(other.to_string()),
            })?;
            let spec = reader.spec();
            if spec.channels != 1
                || spec.sample_format != hound::SampleFormat::Float
                || spec.bits_per_sample != 32
            {
                return Err(wav_err(format!(
                    "expected 32-bit float mono, got {} channel(s) {:?} {}-bit",
                    spec.channels, spec.sample_format, spec.bits_per_sample
                )));
            }
            let taps = reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| wav_err(e.to_string()))?;
            if taps.is_empty() {
                return Err(Error::Empty("impulse response file has no taps"));
            }
            ImpulseResponse::new(taps, spec.sample_rate)
        }
    }
}

pub fn save_ir(ir: &ImpulseResponse, path: &Path, format: IrFormat) -> Result<()> {
    match format {
        IrFormat::Csv { .. } => write_csv_column(path, &ir.taps),
        IrFormat::WavFloat => write_wav_f32(path, &ir.taps, ir.sample_rate),
    }
}

pub(crate) fn parse_csv_column(text: &str, path: &Path) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let value: f64 = line.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("malformed value {line:?}"),
        })?;
        if !value.is_finite() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "non-finite value".into(),
            });
        }
        out.push(value);
    }
    Ok(out)
}

pub(crate) fn write_csv_column(path: &Path, values: &[f64]) -> Result<()> {
    let mut text = String::with_capacity(values.len() * 24);
    for v in values {
        text.push_str(&v.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_wav_f32(path: &Path, values: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wav_err = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &v in values {
        writer.write_sample(v as f32).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantModel {
    pub sample_rate: u32,
    /// Loudspeaker → eardrum, true paths `S`.
    pub s_true: Vec<ImpulseResponse>,
    /// Loudspeaker → eardrum, measured paths `Ŝ`.
    pub s_model: Vec<ImpulseResponse>,
    /// Loudspeaker → inner microphone, true paths `B_r`.
    pub br_true: Vec<ImpulseResponse>,
    /// Loudspeaker → inner microphone, measured paths `B̂_r`.
    pub br_model: Vec<ImpulseResponse>,
    /// Noise source → eardrum, produces `d(n)`.
    pub primary_drum: ImpulseResponse,
    /// Noise source → inner microphone, produces `r(n)`.
    pub primary_mic: ImpulseResponse,
}

impl PlantModel {
    pub fn num_loudspeakers(&self) -> usize {
        self.s_true.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.s_true.len();
        if l == 0 {
            return Err(Error::InvalidParameter("plant needs at least one loudspeaker".into()));
        }
        let sets: [(&'static str, &Vec<ImpulseResponse>); 4] = [
            ("s_true", &self.s_true),
            ("s_model", &self.s_model),
            ("br_true", &self.br_true),
            ("br_model", &self.br_model),
        ];
        for (name, set) in sets {
            if set.len() != l {
                return Err(Error::Dimension {
                    what: name,
                    expected: l,
                    got: set.len(),
                });
            }
            for (channel, ir) in set.iter().enumerate() {
                self.check_rate(ir)?;
                if ir.taps[0] != 0.0 {
                    return Err(Error::NonCausalPath { path: name, channel });
                }
            }
        }
        self.check_rate(&self.primary_drum)?;
        self.check_rate(&self.primary_mic)?;
        Ok(())
    }

    fn check_rate(&self, ir: &ImpulseResponse) -> Result<()> {
        if ir.sample_rate != self.sample_rate {
            return Err(Error::SampleRateMismatch {
                left: self.sample_rate,
                right: ir.sample_rate,
            });
        }
        Ok(())
    }

    /// Copy in which the measured paths equal the true ones.
    pub fn with_perfect_model(&self) -> Self {
        Self {
            s_model: self.s_true.clone(),
            br_model: self.br_true.clone(),
            ..self.clone()
        }
    }

    /// Copy in which the eardrum sees exactly the microphone's primary noise.
    pub fn with_identical_primary(&self) -> Self {
        Self {
            primary_drum: self.primary_mic.clone(),
            ..self.clone()
        }
    }

    /// Copy restricted to the given loudspeakers, in the given order.
    pub fn select_loudspeakers(&self, channels: &[usize]) -> Result<Self> {
        let l = self.num_loudspeakers();
        if channels.is_empty() {
            return Err(Error::InvalidParameter("no loudspeakers selected".into()));
        }
        if let Some(&c) = channels.iter().find(|&&c| c >= l) {
            return Err(Error::InvalidParameter(format!(
                "loudspeaker index {c} out of range for a {l}-loudspeaker plant"
            )));
        }
        let pick = |set: &[ImpulseResponse]| channels.iter().map(|&c| set[c].clone()).collect();
        Ok(Self {
            s_true: pick(&self.s_true),
            s_model: pick(&self.s_model),
            br_true: pick(&self.br_true),
            br_model: pick(&self.br_model),
            ..self.clone()
        })
    }

    /// Writes a JSON manifest plus one CSV per path into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = PlantManifest {
            sample_rate: self.sample_rate,
            num_loudspeakers: self.num_loudspeakers(),
            s_true: Vec::new(),
            s_model: Vec::new(),
            br_true: Vec::new(),
            br_model: Vec::new(),
            primary_drum: "primary_drum.csv".into(),
            primary_mic: "primary_mic.csv".into(),
        };
        let sets = [
            ("s_true", &self.s_true, &mut manifest.s_true),
            ("s_model", &self.s_model, &mut manifest.s_model),
            ("br_true", &self.br_true, &mut manifest.br_true),
            ("br_model", &self.br_model, &mut manifest.br_model),
        ];
        for (name, set, files) in sets {
            for (l, ir) in set.iter().enumerate() {
                let file = format!("{name}_{}.csv", l + 1);
                write_csv_column(&dir.join(&file), ir.taps())?;
                files.push(file);
            }
        }
        write_csv_column(&dir.join(&manifest.primary_drum), self.primary_drum.taps())?;
        write_csv_column(&dir.join(&manifest.primary_mic), self.primary_mic.taps())?;
        let path = dir.join("plant.json");
        write_json(&path, &manifest)?;
        Ok(path)
    }

    /// Loads a plant from its manifest; CSV paths are relative to the manifest.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: PlantManifest = read_json(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let fs = manifest.sample_rate;
        let load = |file: &str| load_ir(&dir.join(file), IrFormat::Csv { sample_rate: fs });
        let load_set = |files: &[String]| files.iter().map(|f| load(f)).collect::<Result<Vec<_>>>();
        let plant = Self {
            sample_rate: fs,
            s_true: load_set(&manifest.s_true)?,
            s_model: load_set(&manifest.s_model)?,
            br_true: load_set(&manifest.br_true)?,
            br_model: load_set(&manifest.br_model)?,
            primary_drum: load(&manifest.primary_drum)?,
            primary_mic: load(&manifest.primary_mic)?,
        };
        if plant.num_loudspeakers() != manifest.num_loudspeakers {
            return Err(Error::Dimension {
                what: "manifest loudspeaker count",
                expected: manifest.num_loudspeakers,
                got: plant.num_loudspeakers(),
            });
        }
        plant.validate()?;
        Ok(plant)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlantManifest {
    sample_rate: u32,
    num_loudspeakers: usize,
    s_true: Vec<String>,
    s_model: Vec<String>,
    br_true: Vec<String>,
    br_model: Vec<String>,
    primary_drum: String,
    primary_mic: String,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Second-order resonance (peaking section) in a loudspeaker path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct Resonance {
    pub freq_hz: f64,
    pub gain_db: f64,
    pub q: f64,
}

/// Loudspeaker path family: pure delay, Butterworth low-pass roll-off and
/// one to three damped resonances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct LoudspeakerPathSpec {
    pub gain: f64,
    pub delay_samples: usize,
    pub lowpass_hz: f64,
    /// Number of cascaded second-order low-pass sections.
    #[serde(default = "one")]
    pub lowpass_sections: usize,
    pub resonances: Vec<Resonance>,
}

fn one() -> usize {
    1
}

/// Primary noise path: delay followed by a one-pole low-pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct PrimaryPathSpec {
    pub gain: f64,
    pub delay_samples: usize,
    pub lowpass_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct LoudspeakerSpec {
    pub to_drum: LoudspeakerPathSpec,
    pub to_mic: LoudspeakerPathSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct PlantSynthesisSpec {
    pub sample_rate: u32,
    /// Length of every synthesized impulse response.
    pub ir_length: usize,
    pub loudspeakers: Vec<LoudspeakerSpec>,
    pub primary_drum: PrimaryPathSpec,
    pub primary_mic: PrimaryPathSpec,
    /// Relative random spread applied to corner/resonance frequencies, Q and
    /// resonance gains. Zero makes the seed irrelevant.
    #[serde(default)]
    pub jitter: f64,
}

impl Default for PlantSynthesisSpec {
    /// Two-driver in-ear headphone. Driver 1 is the larger, closer one;
    /// driver 2 sits further back in the shell with a lower corner and a
    /// pronounced low-frequency dip.
    fn default() -> Self {
        let res = |freq_hz, gain_db, q| Resonance { freq_hz, gain_db, q };
        Self {
            sample_rate: 44_100,
            ir_length: 512,
            loudspeakers: vec![
                LoudspeakerSpec {
                    to_drum: LoudspeakerPathSpec {
                        gain: 1.0,
                        delay_samples: 2,
                        lowpass_hz: 3_000.0,
                        lowpass_sections: 1,
                        resonances: vec![res(120.0, -9.0, 1.2), res(2_500.0, 6.0, 2.0)],
                    },
                    to_mic: LoudspeakerPathSpec {
                        gain: 1.2,
                        delay_samples: 1,
                        lowpass_hz: 5_000.0,
                        lowpass_sections: 1,
                        resonances: vec![res(3_500.0, 4.0, 2.0)],
                    },
                },
                LoudspeakerSpec {
                    to_drum: LoudspeakerPathSpec {
                        gain: 0.8,
                        delay_samples: 3,
                        lowpass_hz: 1_500.0,
                        lowpass_sections: 1,
                        resonances: vec![res(400.0, -8.0, 1.0), res(1_800.0, 5.0, 2.0)],
                    },
                    to_mic: LoudspeakerPathSpec {
                        gain: 1.0,
                        delay_samples: 2,
                        lowpass_hz: 2_500.0,
                        lowpass_sections: 1,
                        resonances: vec![res(2_200.0, 3.0, 2.0)],
                    },
                },
            ],
            primary_drum: PrimaryPathSpec {
                gain: 1.0,
                delay_samples: 4,
                lowpass_hz: 2_000.0,
            },
            primary_mic: PrimaryPathSpec {
                gain: 1.0,
                delay_samples: 2,
                lowpass_hz: 2_000.0,
            },
            jitter: 0.0,
        }
    }
}

impl PlantSynthesisSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.sample_rate == 0 {
            return bad("sample rate must be positive".into());
        }
        if self.loudspeakers.is_empty() {
            return bad("at least one loudspeaker is required".into());
        }
        if !(self.jitter.is_finite() && (0.0..0.5).contains(&self.jitter)) {
            return bad(format!("jitter must lie in [0, 0.5), got {}", self.jitter));
        }
        let nyq = self.sample_rate as f64 / 2.0;
        let check_freq = |what: &str, f: f64| {
            if !(f.is_finite() && f > 0.0 && f < nyq * 0.95) {
                return bad(format!("{what} frequency {f} Hz outside (0, 0.95·fs/2)"));
            }
            Ok(())
        };
        for (l, ls) in self.loudspeakers.iter().enumerate() {
            for (name, p) in [("to_drum", &ls.to_drum), ("to_mic", &ls.to_mic)] {
                let ctx = format!("loudspeaker {} {name}", l + 1);
                if p.delay_samples < 1 {
                    return bad(format!("{ctx}: delay must be at least 1 sample"));
                }
                if p.delay_samples >= self.ir_length {
                    return bad(format!("{ctx}: delay exceeds the impulse response length"));
                }
                if !(p.gain.is_finite() && p.gain != 0.0) {
                    return bad(format!("{ctx}: gain must be finite and non-zero"));
                }
                check_freq(&ctx, p.lowpass_hz)?;
                if p.lowpass_sections == 0 || p.lowpass_sections > 4 {
                    return bad(format!("{ctx}: low-pass sections must be 1..=4"));
                }
                if p.resonances.is_empty() || p.resonances.len() > 3 {
                    return bad(format!("{ctx}: one to three resonances are required"));
                }
                for r in &p.resonances {
                    check_freq(&ctx, r.freq_hz)?;
                    if !(r.gain_db.is_finite() && r.gain_db.abs() <= 40.0) {
                        return bad(format!("{ctx}: resonance gain must be within ±40 dB"));
                    }
                    if !(r.q.is_finite() && r.q > 0.05 && r.q <= 20.0) {
                        return bad(format!("{ctx}: resonance Q must lie in (0.05, 20]"));
                    }
                }
            }
        }
        for (name, p) in [("primary_drum", &self.primary_drum), ("primary_mic", &self.primary_mic)] {
            if p.delay_samples < 1 || p.delay_samples >= self.ir_length {
                return bad(format!("{name}: delay must lie in [1, ir_length)"));
            }
            if !(p.gain.is_finite() && p.gain != 0.0) {
                return bad(format!("{name}: gain must be finite and non-zero"));
            }
            check_freq(name, p.lowpass_hz)?;
        }
        if self.primary_mic.delay_samples >= self.primary_drum.delay_samples {
            return bad("primary noise must reach the inner microphone before the eardrum".into());
        }
        Ok(())
    }
}

/// Direct-form biquad coefficients `[b0, b1, b2, a1, a2]` (normalized a0 = 1).
type Biquad = [f64; 5];

fn lowpass_biquad(f0: f64, q: f64, fs: f64) -> Biquad {
    let w0 = 2.0 * PI * f0 / fs;
    let (s, c) = w0.sin_cos();
    let alpha = s / (2.0 * q);
    let a0 = 1.0 + alpha;
    [
        (1.0 - c) / 2.0 / a0,
        (1.0 - c) / a0,
        (1.0 - c) / 2.0 / a0,
        -2.0 * c / a0,
        (1.0 - alpha) / a0,
    ]
}

fn peaking_biquad(f0: f64, gain_db: f64, q: f64, fs: f64) -> Biquad {
    let a = 10f64.powf(gain_db / 40.0);
    let w0 = 2.0 * PI * f0 / fs;
    let (s, c) = w0.sin_cos();
    let alpha = s / (2.0 * q);
    let a0 = 1.0 + alpha / a;
    [
        (1.0 + alpha * a) / a0,
        -2.0 * c / a0,
        (1.0 - alpha * a) / a0,
        -2.0 * c / a0,
        (1.0 - alpha / a) / a0,
    ]
}

fn run_biquad(x: &mut [f64], bq: &Biquad) {
    let [b0, b1, b2, a1, a2] = *bq;
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in x.iter_mut() {
        let y = b0 * *v + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = *v;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

/// Butterworth Q values for `sections` cascaded second-order sections.
fn butterworth_qs(sections: usize) -> Vec<f64> {
    let order = 2 * sections;
    (0..sections)
        .map(|k| 1.0 / (2.0 * (PI * (2 * k + 1) as f64 / (2 * order) as f64).cos()))
        .collect()
}

struct Jitter {
    rng: ChaCha8Rng,
    spread: f64,
}

impl Jitter {
    fn apply(&mut self, value: f64) -> f64 {
        if self.spread == 0.0 {
            return value;
        }
        value * (1.0 + self.spread * self.rng.random_range(-1.0..1.0))
    }
}

fn synth_loudspeaker_path(p: &LoudspeakerPathSpec, spec: &PlantSynthesisSpec, jitter: &mut Jitter) -> Vec<f64> {
    let fs = spec.sample_rate as f64;
    let cap = 0.95 * fs / 2.0;
    let mut h = vec![0.0; spec.ir_length];
    h[p.delay_samples] = p.gain;
    let corner = jitter.apply(p.lowpass_hz).min(cap);
    for q in butterworth_qs(p.lowpass_sections) {
        run_biquad(&mut h, &lowpass_biquad(corner, q, fs));
    }
    for r in &p.resonances {
        let f0 = jitter.apply(r.freq_hz).min(cap);
        let gain = jitter.apply(r.gain_db);
        let q = jitter.apply(r.q);
        run_biquad(&mut h, &peaking_biquad(f0, gain, q, fs));
    }
    fade_tail(&mut h);
    h
}

fn synth_primary_path(p: &PrimaryPathSpec, spec: &PlantSynthesisSpec, jitter: &mut Jitter) -> Vec<f64> {
    let fs = spec.sample_rate as f64;
    let corner = jitter.apply(p.lowpass_hz).min(0.95 * fs / 2.0);
    let pole = (-2.0 * PI * corner / fs).exp();
    let mut h = vec![0.0; spec.ir_length];
    let mut y = p.gain * (1.0 - pole);
    for v in h[p.delay_samples..].iter_mut() {
        *v = y;
        y *= pole;
    }
    fade_tail(&mut h);
    h
}

/// Half-Hann fade over the last eighth of the response.
fn fade_tail(h: &mut [f64]) {
    let len = h.len() / 8;
    let start = h.len() - len;
    for (i, v) in h[start..].iter_mut().enumerate() {
        *v *= 0.5 + 0.5 * (PI * (i + 1) as f64 / len as f64).cos();
    }
}

/// Synthesizes a plant whose measured paths equal the true ones.
pub fn synth_plant(spec: &PlantSynthesisSpec, seed: u64) -> Result<PlantModel> {
    spec.validate()?;
    let fs = spec.sample_rate;
    let mut jitter = Jitter {
        rng: ChaCha8Rng::seed_from_u64(seed),
        spread: spec.jitter,
    };
    let mut s_true = Vec::new();
    let mut br_true = Vec::new();
    for ls in &spec.loudspeakers {
        s_true.push(ImpulseResponse::new(synth_loudspeaker_path(&ls.to_drum, spec, &mut jitter), fs)?);
        br_true.push(ImpulseResponse::new(synth_loudspeaker_path(&ls.to_mic, spec, &mut jitter), fs)?);
    }
    let primary_drum = ImpulseResponse::new(synth_primary_path(&spec.primary_drum, spec, &mut jitter), fs)?;
    let primary_mic = ImpulseResponse::new(synth_primary_path(&spec.primary_mic, spec, &mut jitter), fs)?;
    let plant = PlantModel {
        sample_rate: fs,
        s_model: s_true.clone(),
        br_model: br_true.clone(),
        s_true,
        br_true,
        primary_drum,
        primary_mic,
    };
    plant.validate()?;
    Ok(plant)
}

/// Perturbation of the true loudspeaker paths relative to the measured ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct MismatchSpec {
    /// Per-loudspeaker gain change in dB, applied to both `S` and `B_r`.
    pub gain_perturbation_db: Vec<f64>,
    /// Per-loudspeaker extra delay in samples, applied to both `S` and `B_r`.
    /// Negative values advance the path and are only allowed while leading
    /// zeros remain.
    pub delay_perturbation_samples: Vec<i64>,
    /// Relative standard deviation of multiplicative tap noise.
    pub tap_noise_rel: f64,
    pub seed: u64,
}

impl MismatchSpec {
    pub fn is_identity(&self) -> bool {
        self.gain_perturbation_db.iter().all(|&g| g == 0.0)
            && self.delay_perturbation_samples.iter().all(|&d| d == 0)
            && self.tap_noise_rel == 0.0
    }

    pub fn validate(&self, l: usize) -> Result<()> {
        for (what, len) in [
            ("gain_perturbation_db", self.gain_perturbation_db.len()),
            ("delay_perturbation_samples", self.delay_perturbation_samples.len()),
        ] {
            if len != 0 && len != l {
                return Err(Error::Dimension {
                    what,
                    expected: l,
                    got: len,
                });
            }
        }
        ensure_finite(&self.gain_perturbation_db)?;
        if !(self.tap_noise_rel.is_finite() && self.tap_noise_rel >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tap noise must be finite and non-negative, got {}",
                self.tap_noise_rel
            )));
        }
        Ok(())
    }
}

pub fn apply_mismatch(plant: &PlantModel, m: &MismatchSpec) -> Result<PlantModel> {
    plant.validate()?;
    let l = plant.num_loudspeakers();
    m.validate(l)?;
    if m.is_identity() {
        return Ok(plant.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
    let mut out = plant.clone();
    for ch in 0..l {
        let gain = m
            .gain_perturbation_db
            .get(ch)
            .map_or(1.0, |db| 10f64.powf(db / 20.0));
        let delay = m.delay_perturbation_samples.get(ch).copied().unwrap_or(0);
        for (name, set) in [("s_true", &mut out.s_true), ("br_true", &mut out.br_true)] {
            let ir = &set[ch];
            let mut taps: Vec<f64> = ir.taps.iter().map(|t| t * gain).collect();
            if delay > 0 {
                let mut shifted = vec![0.0; delay as usize];
                shifted.extend_from_slice(&taps);
                taps = shifted;
            } else if delay < 0 {
                let advance = delay.unsigned_abs() as usize;
                if advance >= ir.leading_zeros() {
                    return Err(Error::NonCausalPath { path: name, channel: ch });
                }
                taps.drain(..advance);
            }
            if m.tap_noise_rel > 0.0 {
                for t in taps.iter_mut().skip(1) {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    *t *= 1.0 + m.tap_noise_rel * eps;
                }
            }
            set[ch] = ImpulseResponse::new(taps, ir.sample_rate)?;
        }
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::dft_grid;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn identity_filter_has_flat_response() {
        let g = dft_grid(16, 100).unwrap();
        let ir = ImpulseResponse::new(vec![1.0], 100).unwrap();
        let r = freq_response(&ir, g).unwrap();
        assert!(r.values.iter().all(|v| (v - c(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn unit_delay_phase() {
        let g = dft_grid(32, 100).unwrap();
        let ir = ImpulseResponse::new(vec![0.0, 1.0], 100).unwrap();
        let r = freq_response(&ir, g).unwrap();
        for (k, v) in r.values.iter().enumerate() {
            assert!((v.norm() - 1.0).abs() < 1e-14);
            let expected = Complex64::from_polar(1.0, -g.omega(k));
            assert!((v - expected).norm() < 1e-14);
        }
    }

    #[test]
    fn two_tap_average_by_hand() {
        let g = dft_grid(8, 8).unwrap();
        let ir = ImpulseResponse::new(vec![0.5, 0.5], 8).unwrap();
        let r = freq_response(&ir, g).unwrap();
        assert!((r.values[0] - c(1.0, 0.0)).norm() < 1e-15);
        assert!(r.values[4].norm() < 1e-15);
    }

    #[test]
    fn folding_matches_direct_dtft_for_long_filters() {
        let g = dft_grid(8, 8).unwrap();
        let taps: Vec<f64> = (0..21).map(|n| ((n * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let ir = ImpulseResponse::new(taps.clone(), 8).unwrap();
        let r = freq_response(&ir, g).unwrap();
        for (k, v) in r.values.iter().enumerate() {
            assert!((v - dtft(&taps, g.omega(k))).norm() < 1e-12);
        }
    }

    #[test]
    fn sample_rate_mismatch_is_rejected() {
        let g = dft_grid(8, 8).unwrap();
        let ir = ImpulseResponse::new(vec![1.0], 16).unwrap();
        assert!(matches!(freq_response(&ir, g), Err(Error::SampleRateMismatch { .. })));
    }

    #[test]
    fn impulse_response_invariants() {
        assert!(ImpulseResponse::new(vec![], 100).is_err());
        assert!(ImpulseResponse::new(vec![1.0, f64::INFINITY], 100).is_err());
        assert!(ImpulseResponse::new(vec![1.0], 0).is_err());
    }

    #[test]
    fn csv_parse_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ir.csv");
        std::fs::write(&path, "0\n0.5\n-0.25").unwrap();
        let ir = load_ir(&path, IrFormat::Csv { sample_rate: 44100 }).unwrap();
        assert_eq!(ir.taps(), &[0.0, 0.5, -0.25]);
        assert_eq!(ir.sample_rate(), 44100);
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let fmt = IrFormat::Csv { sample_rate: 44100 };
        let nan = dir.path().join("nan.csv");
        std::fs::write(&nan, "0\nNaN\n").unwrap();
        let err = load_ir(&nan, fmt).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "0\n1,2\n").unwrap();
        assert!(matches!(load_ir(&bad, fmt), Err(Error::Parse { line: 2, .. })));
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "\n").unwrap();
        assert!(matches!(load_ir(&empty, fmt), Err(Error::Empty(_))));
        assert!(matches!(
            load_ir(&dir.path().join("missing.csv"), fmt),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ir.csv");
        let taps = vec![0.0, 0.1, -1.0 / 3.0, 1e-300, 12345.678901234567];
        let ir = ImpulseResponse::new(taps.clone(), 48000).unwrap();
        save_ir(&ir, &path, IrFormat::Csv { sample_rate: 48000 }).unwrap();
        let back = load_ir(&path, IrFormat::Csv { sample_rate: 48000 }).unwrap();
        assert_eq!(back.taps(), taps.as_slice());
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ir.wav");
        let taps: Vec<f64> = [0.0f32, 0.5, -0.25, 0.125, 1e-3].iter().map(|&v| v as f64).collect();
        let ir = ImpulseResponse::new(taps.clone(), 22050).unwrap();
        save_ir(&ir, &path, IrFormat::WavFloat).unwrap();
        let back = load_ir(&path, IrFormat::WavFloat).unwrap();
        assert_eq!(back.taps(), taps.as_slice());
        assert_eq!(back.sample_rate(), 22050);
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = PlantSynthesisSpec {
            jitter: 0.2,
            ..Default::default()
        };
        assert_eq!(synth_plant(&spec, 7).unwrap(), synth_plant(&spec, 7).unwrap());
        assert_ne!(synth_plant(&spec, 7).unwrap(), synth_plant(&spec, 8).unwrap());
    }

    #[test]
    fn synth_primary_delays() {
        let mut spec = PlantSynthesisSpec::default();
        spec.primary_drum.delay_samples = 8;
        spec.primary_mic.delay_samples = 4;
        let p = synth_plant(&spec, 0).unwrap();
        assert_eq!(p.primary_drum.leading_zeros(), 8);
        assert_eq!(p.primary_mic.leading_zeros(), 4);
    }

    #[test]
    fn synth_rejects_bad_specs() {
        let mut spec = PlantSynthesisSpec::default();
        spec.loudspeakers[0].to_drum.delay_samples = 0;
        assert!(synth_plant(&spec, 0).is_err());
        let mut spec = PlantSynthesisSpec::default();
        spec.loudspeakers[1].to_mic.lowpass_hz = f64::NAN;
        assert!(synth_plant(&spec, 0).is_err());
        let mut spec = PlantSynthesisSpec::default();
        spec.primary_mic.delay_samples = spec.primary_drum.delay_samples;
        assert!(synth_plant(&spec, 0).is_err());
        let mut spec = PlantSynthesisSpec::default();
        spec.loudspeakers.clear();
        assert!(synth_plant(&spec, 0).is_err());
    }

    #[test]
    fn rolloff_from_1k_to_20k() {
        let mut spec = PlantSynthesisSpec::default();
        for ls in &mut spec.loudspeakers {
            ls.to_drum.lowpass_hz = 1_000.0;
            ls.to_mic.lowpass_hz = 1_000.0;
        }
        let p = synth_plant(&spec, 0).unwrap();
        for ir in p.s_true.iter().chain(&p.br_true) {
            let w1 = 2.0 * PI * 1_000.0 / 44_100.0;
            let w20 = 2.0 * PI * 20_000.0 / 44_100.0;
            let drop = 20.0 * (ir.response_at(w1).norm() / ir.response_at(w20).norm()).log10();
            assert!(drop >= 20.0, "roll-off only {drop} dB");
        }
    }

    #[test]
    fn zero_mismatch_is_identity() {
        let p = synth_plant(&PlantSynthesisSpec::default(), 0).unwrap();
        let out = apply_mismatch(&p, &MismatchSpec::default()).unwrap();
        assert_eq!(out, p);
        let zeros = MismatchSpec {
            gain_perturbation_db: vec![0.0, 0.0],
            delay_perturbation_samples: vec![0, 0],
            tap_noise_rel: 0.0,
            seed: 99,
        };
        assert_eq!(apply_mismatch(&p, &zeros).unwrap(), p);
    }

    #[test]
    fn mismatch_gain_and_delay() {
        let p = synth_plant(&PlantSynthesisSpec::default(), 0).unwrap();
        let m = MismatchSpec {
            gain_perturbation_db: vec![20.0 * 2f64.log10(), 0.0],
            ..Default::default()
        };
        assert!((20.0 * 2f64.log10() - 6.0206).abs() < 1e-4);
        let out = apply_mismatch(&p, &m).unwrap();
        for (a, b) in out.s_true[0].taps().iter().zip(p.s_true[0].taps()) {
            assert!((a - 2.0 * b).abs() <= 1e-9 * b.abs().max(1e-300));
        }
        assert_eq!(out.s_true[1], p.s_true[1]);
        assert_eq!(out.s_model, p.s_model);
        assert_eq!(out.br_model, p.br_model);

        let m = MismatchSpec {
            delay_perturbation_samples: vec![2, 0],
            ..Default::default()
        };
        let out = apply_mismatch(&p, &m).unwrap();
        assert_eq!(&out.s_true[0].taps()[..2], &[0.0, 0.0]);
        assert_eq!(&out.s_true[0].taps()[2..], p.s_true[0].taps());
    }

    #[test]
    fn mismatch_advance_past_leading_zeros_fails() {
        let p = synth_plant(&PlantSynthesisSpec::default(), 0).unwrap();
        let lz = p.s_true[1].leading_zeros().min(p.br_true[1].leading_zeros()) as i64;
        let m = MismatchSpec {
            delay_perturbation_samples: vec![0, -lz],
            ..Default::default()
        };
        assert!(matches!(apply_mismatch(&p, &m), Err(Error::NonCausalPath { .. })));
        let m = MismatchSpec {
            delay_perturbation_samples: vec![0, -(lz - 1)],
            ..Default::default()
        };
        let out = apply_mismatch(&p, &m).unwrap();
        assert_eq!(out.s_true[1].leading_zeros() as i64, p.s_true[1].leading_zeros() as i64 - lz + 1);
    }

    #[test]
    fn tap_noise_keeps_first_tap_zero() {
        let p = synth_plant(&PlantSynthesisSpec::default(), 0).unwrap();
        let m = MismatchSpec {
            tap_noise_rel: 0.1,
            seed: 3,
            ..Default::default()
        };
        let out = apply_mismatch(&p, &m).unwrap();
        assert!(out.s_true.iter().all(|ir| ir.taps()[0] == 0.0));
        assert_ne!(out.s_true, p.s_true);
        assert_eq!(out, apply_mismatch(&p, &m).unwrap());
    }

    #[test]
    fn plant_rejects_first_tap() {
        let mut p = synth_plant(&PlantSynthesisSpec::default(), 0).unwrap();
        p.s_model[1] = ImpulseResponse::new(vec![0.1, 1.0], 44100).unwrap();
        assert!(matches!(p.validate(), Err(Error::NonCausalPath { path: "s_model", channel: 1 })));
    }

    #[test]
    fn plant_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = synth_plant(&PlantSynthesisSpec::default(), 0).unwrap();
        let manifest = p.save(dir.path()).unwrap();
        assert_eq!(PlantModel::load(&manifest).unwrap(), p);
    }
}
