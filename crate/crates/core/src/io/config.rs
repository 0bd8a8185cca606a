//! Run configuration files (TOML) and small text outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::DenoiserConfig;
use crate::schedule::ScheduleParams;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    #[default]
    None,
    Score,
    Outpaint,
    Reference,
}

/// How the set diversity is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientMode {
    /// Mean over the `n(n-1)/2` unordered pairs.
    #[default]
    PairMean,
    /// Pair sum times `2 / ((n-1)(n-2))`.
    PaperLiteral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub count: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection {
            height: 64,
            width: 64,
            seed: 0,
            count: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub mode: GuidanceMode,
    /// Guidance scale `s` for score mode.
    pub scale: f64,
    /// Score plug-in: `mean-color` or `patch-template`.
    pub score: String,
    /// Target colour in [-1, 1] for `mean-color`.
    pub target_color: Vec<f64>,
    /// Template image for `patch-template`.
    pub template: Option<PathBuf>,
    /// Single-channel mask, 255 marks the region to generate.
    pub mask: Option<PathBuf>,
    /// Source image for outpainting; defaults to `paths.image`.
    pub source: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub downsample_factor: usize,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            mode: GuidanceMode::None,
            scale: 1.0,
            score: "mean-color".into(),
            target_color: vec![0.0, 0.0, 0.0],
            template: None,
            mask: None,
            source: None,
            reference: None,
            downsample_factor: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Seed of the random default extractor.
    pub extractor_seed: u64,
    /// Weight archive replacing the seeded extractor.
    pub extractor_weights: Option<PathBuf>,
    pub coefficient_mode: CoefficientMode,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            extractor_seed: 0,
            extractor_weights: None,
            coefficient_mode: CoefficientMode::PairMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub image: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            image: None,
            checkpoint: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Denoisers to compare; empty means the built-in three-config preset.
    pub configs: Vec<DenoiserConfig>,
    pub train_steps: usize,
    pub samples_per_config: usize,
    pub seed: u64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            configs: Vec::new(),
            train_steps: 5000,
            samples_per_config: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleParams,
    pub denoiser: DenoiserConfig,
    pub training: TrainConfig,
    pub sampling: SamplingSection,
    pub guidance: GuidanceSection,
    pub metrics: MetricsSection,
    pub paths: PathsSection,
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("{}: file not found", path.display())),
            _ => Error::Config(format!("{}: {e}", path.display())),
        })?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The effective configuration with every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.denoiser.validate()?;
        self.training.validate()?;
        let s = &self.sampling;
        if s.count == 0 || s.height == 0 || s.width == 0 {
            return Err(Error::Config("sampling height, width and count must be positive".into()));
        }
        if self.guidance.downsample_factor == 0 {
            return Err(Error::Config("guidance.downsample_factor must be positive".into()));
        }
        Ok(())
    }
}

/// Writes a JSON manifest holding `fields` and the full effective config.
pub fn write_manifest(path: impl AsRef<Path>, command: &str, config: &RunConfig, fields: &[(&str, String)]) -> Result<()> {
    let path = path.as_ref();
    let mut doc = serde_json::Map::new();
    doc.insert("command".into(), command.into());
    for (k, v) in fields {
        doc.insert((*k).into(), v.clone().into());
    }
    doc.insert("config".into(), config.to_json());
    let text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `step,loss` lines, one per step starting at 1.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{},{}", i + 1, l).expect("write to string");
    }
    out
}

pub fn write_loss_csv(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, loss_csv(losses)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.training.ema_decay, 0.9999);
        assert_eq!(c.denoiser.channels, vec![64, 128, 256]);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.training.total_steps = 7;
        c.guidance.mode = GuidanceMode::Reference;
        c.metrics.coefficient_mode = CoefficientMode::PaperLiteral;
        c.paths.image = Some("a.png".into());
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[training]\nsteps = 3\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[nonsense]\n"), Err(Error::Config(_))));
    }

    #[test]
    fn partial_section_keeps_other_defaults() {
        let c = RunConfig::from_toml("[denoiser]\nstages = 1\nchannels = [16]\n").unwrap();
        assert_eq!(c.denoiser.stages, 1);
        assert_eq!(c.denoiser.kernel_size, 3);
    }

    #[test]
    fn missing_file_is_a_config_error() {
        let e = RunConfig::load("/nonexistent/run.toml").unwrap_err();
        assert!(e.is_validation());
        assert!(e.to_string().contains("file not found"));
    }

    #[test]
    fn csv_layout() {
        assert_eq!(loss_csv(&[0.5, 0.25]), "step,loss\n1,0.5\n2,0.25\n");
    }
}
