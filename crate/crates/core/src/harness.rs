//! Receptive-field sweeps and evaluation sample sets.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::archive::file_sha256;
use crate::io::config::CoefficientMode;
use crate::io::image::save_image;
use crate::metrics::{diversity, sifid, FeatureExtractor};
use crate::nn::{receptive_field, DenoiserConfig, ReceptiveField};
use crate::sample::sample_uncond;
use crate::schedule::ScheduleParams;
use crate::tensor::Tensor;
use crate::train::{train, Checkpoint, TrainConfig};

/// Seed of the `index`-th sample drawn under `seed` (SplitMix64 finalizer).
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Three small networks whose receptive fields cover about 0.2, 0.34 and 0.72
/// of a 64 x 64 image.
pub fn sweep_preset() -> Vec<(String, DenoiserConfig)> {
    let base = DenoiserConfig {
        image_channels: 3,
        time_embed_dim: 32,
        norm_groups: 4,
        ..DenoiserConfig::default()
    };
    let mk = |channels: Vec<usize>, e, d| DenoiserConfig {
        stages: channels.len(),
        channels,
        enc_resblocks: e,
        dec_resblocks: d,
        ..base.clone()
    };
    vec![
        ("rf13".into(), mk(vec![16], 1, 1)),
        ("rf22".into(), mk(vec![16, 32], 1, 0)),
        ("rf46".into(), mk(vec![16, 32], 1, 2)),
    ]
}

pub struct SweepSpec {
    /// Label of the training image in reports, usually its path.
    pub image_label: String,
    pub image: Tensor<f32>,
    pub configs: Vec<(String, DenoiserConfig)>,
    pub schedule: ScheduleParams,
    /// `total_steps` is the per-config training budget.
    pub training: TrainConfig,
    pub samples_per_config: usize,
    pub extractor: FeatureExtractor,
    pub coefficient_mode: CoefficientMode,
    /// Sample seeds; the same seeds are reused for every config.
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.configs.len() < 2 {
            return Err(Error::InvalidConfig(format!("a sweep needs at least 2 configs, got {}", self.configs.len())));
        }
        if self.samples_per_config < 2 {
            return Err(Error::InvalidConfig("samples_per_config must be at least 2".into()));
        }
        self.training.validate()?;
        self.schedule.build()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepScores {
    pub param_count: usize,
    /// Mean over the last 100 steps.
    pub final_loss: f64,
    /// Mean over samples of the distance to the training image.
    pub sifid: f64,
    pub diversity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub id: String,
    pub config: DenoiserConfig,
    pub rf_px: usize,
    pub rf_ratio: f64,
    /// Scores, or the error that stopped this row.
    pub result: std::result::Result<SweepScores, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub image: String,
    pub extractor: String,
    pub coefficient_mode: CoefficientMode,
    pub train_steps: usize,
    pub samples_per_config: usize,
    pub seed: u64,
    /// Ascending by `rf_ratio`.
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<10} {:>6} {:>8} {:>10} {:>10} {:>10}", "config", "rf_px", "ratio", "sifid", "diversity", "loss").unwrap();
        for r in &self.rows {
            match &r.result {
                Ok(v) => writeln!(
                    s,
                    "{:<10} {:>6} {:>8.3} {:>10.4} {:>10.4} {:>10.4}",
                    r.id, r.rf_px, r.rf_ratio, v.sifid, v.diversity, v.final_loss
                ),
                Err(e) => writeln!(s, "{:<10} {:>6} {:>8.3} failed: {e}", r.id, r.rf_px, r.rf_ratio),
            }
            .unwrap();
        }
        s
    }

    /// `(ratio, sifid, diversity)` of the rows that finished.
    pub fn scored(&self) -> Vec<(f64, f64, f64)> {
        self.rows
            .iter()
            .filter_map(|r| r.result.as_ref().ok().map(|v| (r.rf_ratio, v.sifid, v.diversity)))
            .collect()
    }
}

fn run_row(spec: &SweepSpec, config: &DenoiserConfig, log: &mut dyn FnMut(&str)) -> Result<SweepScores> {
    let schedule = spec.schedule.build()?;
    let outcome = train(&spec.image, config, &spec.training, &schedule)?;
    let tail = &outcome.losses[outcome.losses.len().saturating_sub(100)..];
    let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;
    log(&format!("trained, final loss {final_loss:.4}"));
    let net = outcome.checkpoint.ema_denoiser()?;
    let (_, h, w) = spec.image.shape();
    let mut samples = Vec::with_capacity(spec.samples_per_config);
    let mut total = 0.0;
    for i in 0..spec.samples_per_config {
        let x: Tensor<f32> = sample_uncond(&net, &schedule, h, w, sub_seed(spec.seed, i as u64))?;
        total += sifid(&x, &spec.image, &spec.extractor)?;
        samples.push(x);
    }
    let div = diversity(&samples, &spec.extractor, spec.coefficient_mode)?;
    let scores = SweepScores {
        param_count: net.param_count(),
        final_loss,
        sifid: total / spec.samples_per_config as f64,
        diversity: div.mean_diversity,
    };
    if !(scores.sifid.is_finite() && scores.diversity.is_finite()) {
        return Err(Error::NonFinite {
            what: "sweep score".into(),
            step: 0,
        });
    }
    Ok(scores)
}

/// Trains and scores every config. A failing config is recorded in its row
/// and the sweep goes on; only a sweep where every row fails is an error.
pub fn run_rf_sweep(spec: &SweepSpec, log: &mut dyn FnMut(&str)) -> Result<SweepReport> {
    spec.validate()?;
    let (_, h, w) = spec.image.shape();
    let mut rows = Vec::new();
    for (id, config) in &spec.configs {
        let rf = receptive_field(config).map(|r| r.relative_to(h, w));
        let (rf_px, rf_ratio) = rf.as_ref().map(|r: &ReceptiveField| (r.width_px, r.ratio)).unwrap_or((0, f64::NAN));
        log(&format!("{id}: receptive field {rf_px} px, ratio {rf_ratio:.3}"));
        let result = rf.and_then(|_| run_row(spec, config, &mut |m| log(&format!("{id}: {m}"))));
        if let Err(e) = &result {
            log(&format!("{id}: failed: {e}"));
        }
        rows.push(SweepRow {
            id: id.clone(),
            config: config.clone(),
            rf_px,
            rf_ratio,
            result: result.map_err(|e| e.to_string()),
        });
    }
    if rows.iter().all(|r| r.result.is_err()) {
        return Err(Error::SweepFailed(rows.len()));
    }
    rows.sort_by(|a, b| a.rf_ratio.total_cmp(&b.rf_ratio));
    Ok(SweepReport {
        image: spec.image_label.clone(),
        extractor: spec.extractor.provenance().to_string(),
        coefficient_mode: spec.coefficient_mode,
        train_steps: spec.training.total_steps,
        samples_per_config: spec.samples_per_config,
        seed: spec.seed,
        rows,
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation, ties given their average rank. `None` when
/// either side is constant or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalImage {
    pub file: String,
    pub sub_seed: u64,
    pub shape: [usize; 3],
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalManifest {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub checkpoint_hash: String,
    pub images: Vec<EvalImage>,
    /// Whatever the caller wants echoed, such as the effective run config.
    pub config: serde_json::Value,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Draws `count` unconditional samples from the checkpoint's EMA weights into
/// `out_dir` as `sample_XXX.png`, plus `manifest.json`.
#[allow(clippy::too_many_arguments)]
pub fn generate_eval_set(
    checkpoint: &Checkpoint<f32>,
    checkpoint_hash: &str,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
    out_dir: &Path,
    config: serde_json::Value,
) -> Result<(EvalManifest, Vec<Tensor<f32>>)> {
    if count == 0 {
        return Err(Error::InvalidRange("count must be at least 1".into()));
    }
    let net = checkpoint.ema_denoiser()?;
    net.check_size(height, width)?;
    let schedule = checkpoint.schedule()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut images = Vec::with_capacity(count);
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let s = sub_seed(seed, i as u64);
        let x: Tensor<f32> = sample_uncond(&net, &schedule, height, width, s)?;
        let file = format!("sample_{i:03}.png");
        let path: PathBuf = out_dir.join(&file);
        save_image(&x, &path)?;
        entries.push(EvalImage {
            file,
            sub_seed: s,
            shape: [x.channels(), height, width],
            sha256: file_sha256(&path)?,
        });
        images.push(x);
    }
    let manifest = EvalManifest {
        seed,
        count,
        height,
        width,
        checkpoint_hash: checkpoint_hash.to_string(),
        images: entries,
        config,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok((manifest, images))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 25.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn preset_ratios_are_separated() {
        let r: Vec<f64> = sweep_preset()
            .iter()
            .map(|(_, c)| receptive_field(c).unwrap().relative_to(64, 64).ratio)
            .collect();
        assert!(r.windows(2).all(|w| w[0] < w[1]), "{r:?}");
        assert!((r[0] - 0.17).abs() < 0.05 && (r[1] - 0.36).abs() < 0.05 && (r[2] - 0.74).abs() < 0.05);
    }

    #[test]
    fn sub_seeds_differ() {
        let s: Vec<u64> = (0..100).map(|i| sub_seed(7, i)).collect();
        let mut d = s.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 100);
        assert_ne!(sub_seed(7, 0), sub_seed(8, 0));
    }
}
