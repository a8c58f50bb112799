//! Test-sequence generation and CSV ingestion.
//!
//! Generated observations are scalar sinusoids (optionally amplitude
//! modulated, optionally with additive Gaussian noise); multi-channel data
//! enters through CSV. Time is the integer sample index: the base step is one
//! sample, and all coarser sampling is handled by strides downstream.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{invalid_config, GpcError, Result};

/// Waveform family of a sequence source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    Sine,
    ModulatedSine,
    Csv,
}

impl fmt::Display for SequenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SequenceKind::Sine => write!(f, "sine"),
            SequenceKind::ModulatedSine => write!(f, "modulated_sine"),
            SequenceKind::Csv => write!(f, "csv"),
        }
    }
}

/// Description of an observation sequence: either a synthetic sinusoid or a
/// pointer to a CSV file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    pub kind: SequenceKind,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Samples per carrier cycle.
    #[serde(default = "default_period")]
    pub period: f64,
    /// Carrier phase offset in radians.
    #[serde(default)]
    pub phase: f64,
    /// Samples per envelope cycle; required for `modulated_sine`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope_period: Option<f64>,
    /// Standard deviation of additive observation noise.
    #[serde(default)]
    pub noise_std: f64,
    pub length: usize,
    #[serde(default)]
    pub seed: u64,
    /// Source file; required for `csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    /// Observation dimension of a CSV source.
    #[serde(default = "default_dimension")]
    pub dimension: usize,
}

fn default_amplitude() -> f64 {
    1.0
}

fn default_period() -> f64 {
    10.0
}

fn default_dimension() -> usize {
    1
}

impl SequenceConfig {
    /// Synthetic sine with everything else at defaults.
    pub fn sine(length: usize) -> Self {
        SequenceConfig {
            kind: SequenceKind::Sine,
            amplitude: default_amplitude(),
            period: default_period(),
            phase: 0.0,
            envelope_period: None,
            noise_std: 0.0,
            length,
            seed: 0,
            path: None,
            dimension: default_dimension(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(invalid_config("period", "must be a positive finite number"));
        }
        if self.length == 0 {
            return Err(invalid_config("length", "must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(invalid_config(
                "noise_std",
                "must be finite and not negative",
            ));
        }
        if !self.amplitude.is_finite() {
            return Err(invalid_config("amplitude", "must be finite"));
        }
        if !self.phase.is_finite() {
            return Err(invalid_config("phase", "must be finite"));
        }
        match self.kind {
            SequenceKind::ModulatedSine => match self.envelope_period {
                Some(p) if p > 0.0 && p.is_finite() => {}
                Some(_) => {
                    return Err(invalid_config(
                        "envelope_period",
                        "must be a positive finite number",
                    ))
                }
                None => {
                    return Err(invalid_config(
                        "envelope_period",
                        "required when kind is modulated_sine",
                    ))
                }
            },
            SequenceKind::Csv => {
                if self.path.is_none() {
                    return Err(invalid_config("path", "required when kind is csv"));
                }
                if self.dimension == 0 {
                    return Err(invalid_config("dimension", "must be positive"));
                }
            }
            SequenceKind::Sine => {}
        }
        Ok(())
    }

    /// Produce the sequence this config describes, generating or loading as
    /// appropriate.
    pub fn build(&self) -> Result<Sequence> {
        match self.kind {
            SequenceKind::Csv => {
                self.validate()?;
                let path = self.path.as_deref().expect("validated");
                load_csv(path, self.dimension)
            }
            _ => generate(self),
        }
    }
}

/// An ordered run of observation vectors sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    samples: Vec<Tensor>,
}

impl Sequence {
    pub fn from_samples(samples: Vec<Tensor>) -> Result<Self> {
        if samples.is_empty() {
            return Err(GpcError::EmptySequence);
        }
        let dim = samples[0].shape().len();
        for s in &samples {
            if s.shape().len() != dim {
                return Err(GpcError::ShapeMismatch {
                    op: "sequence",
                    lhs: samples[0].shape().to_string(),
                    rhs: s.shape().to_string(),
                });
            }
            if !s.is_finite() {
                return Err(invalid_config("samples", "must be finite"));
            }
        }
        Ok(Sequence { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Observation dimension d.
    pub fn dim(&self) -> usize {
        self.samples[0].shape().len()
    }

    pub fn sample(&self, t: usize) -> &Tensor {
        &self.samples[t]
    }

    pub fn samples(&self) -> &[Tensor] {
        &self.samples
    }

    /// Mean of per-channel population variances; the normalizer for
    /// reporting scale-free prediction error.
    pub fn variance(&self) -> f64 {
        let d = self.dim();
        let n = self.len() as f64;
        let mut var_sum = 0.0;
        for c in 0..d {
            let mean: f64 = self.samples.iter().map(|s| s.data()[c]).sum::<f64>() / n;
            var_sum += self
                .samples
                .iter()
                .map(|s| (s.data()[c] - mean).powi(2))
                .sum::<f64>()
                / n;
        }
        var_sum / d as f64
    }
}

/// Generate a synthetic sequence. Deterministic in the config, including the
/// noise seed.
///
/// Sample t is `amplitude * sin(2 pi t / period + phase)`, multiplied by
/// `sin(2 pi t / envelope_period)` for the modulated kind, plus Gaussian
/// noise of standard deviation `noise_std`. The carrier argument is reduced
/// modulo the period before multiplying, so integer periods repeat exactly.
pub fn generate(config: &SequenceConfig) -> Result<Sequence> {
    config.validate()?;
    if config.kind == SequenceKind::Csv {
        return Err(invalid_config(
            "kind",
            "csv sequences are loaded, not generated",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_std)
        .map_err(|_| invalid_config("noise_std", "not a valid standard deviation"))?;

    let phase_at = |t: usize, period: f64| std::f64::consts::TAU * ((t as f64) % period) / period;

    let mut samples = Vec::with_capacity(config.length);
    for t in 0..config.length {
        let mut v = config.amplitude * (phase_at(t, config.period) + config.phase).sin();
        if config.kind == SequenceKind::ModulatedSine {
            let envelope = config.envelope_period.expect("validated");
            v *= phase_at(t, envelope).sin();
        }
        if config.noise_std > 0.0 {
            v += noise.sample(&mut rng);
        }
        samples.push(Tensor::vector(vec![v]));
    }
    Sequence::from_samples(samples)
}

/// Load a sequence from CSV: one observation per row, `d` comma-separated
/// numeric fields, no header.
pub fn load_csv(path: impl AsRef<Path>, d: usize) -> Result<Sequence> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GpcError::io(path, e))?;

    let mut samples = Vec::new();
    for (row_idx, line) in text.lines().enumerate() {
        let row = row_idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d {
            return Err(GpcError::Csv {
                row,
                column: fields.len(),
                reason: format!("expected {d} fields, found {}", fields.len()),
            });
        }
        let mut values = Vec::with_capacity(d);
        for (col_idx, field) in fields.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| GpcError::Csv {
                row,
                column: col_idx + 1,
                reason: format!("not a number: {:?}", field.trim()),
            })?;
            values.push(v);
        }
        samples.push(Tensor::vector(values));
    }

    Sequence::from_samples(samples)
}

/// Write a sequence as CSV in the format `load_csv` reads. Floats are
/// printed with the shortest representation that parses back bit-identical,
/// so a save/load round trip is lossless.
pub fn save_csv(seq: &Sequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for s in seq.samples() {
        let row: Vec<String> = s.data().iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|e| GpcError::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| GpcError::io(path, e))
}
