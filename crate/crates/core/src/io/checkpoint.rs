//! Checkpoints stored as named-array archives.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::archive::{Archive, RawArray};
use crate::nn::{Denoiser, DenoiserConfig};
use crate::scalar::Scalar;
use crate::schedule::ScheduleParams;
use crate::train::{Checkpoint, TrainConfig, CHECKPOINT_FORMAT_VERSION};

pub const CHECKPOINT_KIND: &str = "checkpoint";
const RAW_PREFIX: &str = "raw/";
const EMA_PREFIX: &str = "ema/";

/// Config echo kept in the archive metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointInfo {
    checkpoint_version: u32,
    step: usize,
    denoiser: DenoiserConfig,
    schedule: ScheduleParams,
    training: TrainConfig,
}

pub fn checkpoint_to_archive<T: Scalar>(ckpt: &Checkpoint<T>) -> Archive {
    let info = CheckpointInfo {
        checkpoint_version: ckpt.format_version,
        step: ckpt.step,
        denoiser: ckpt.denoiser_config.clone(),
        schedule: ckpt.schedule_params,
        training: ckpt.train_config.clone(),
    };
    let mut arrays: Vec<RawArray> = Vec::new();
    Archive::push_params(&mut arrays, RAW_PREFIX, &ckpt.raw_params);
    Archive::push_params(&mut arrays, EMA_PREFIX, &ckpt.ema_params);
    Archive::new(CHECKPOINT_KIND, serde_json::to_value(info).expect("info serializes"), arrays)
}

/// Rebuilds a checkpoint, checking every array against the shapes implied by
/// the stored denoiser config. Arrays stored at the other float width are
/// converted.
pub fn checkpoint_from_archive<T: Scalar>(archive: &Archive) -> Result<Checkpoint<T>> {
    if archive.meta.kind != CHECKPOINT_KIND {
        return Err(Error::Format(format!("archive holds {:?}, not a checkpoint", archive.meta.kind)));
    }
    let info: CheckpointInfo =
        serde_json::from_value(archive.meta.info.clone()).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    if info.checkpoint_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: info.checkpoint_version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let template = Denoiser::<T>::new(&info.denoiser, 0)?;
    let ckpt = Checkpoint {
        raw_params: archive.read_params(RAW_PREFIX, template.params())?,
        ema_params: archive.read_params(EMA_PREFIX, template.params())?,
        denoiser_config: info.denoiser,
        schedule_params: info.schedule,
        step: info.step,
        train_config: info.training,
        format_version: info.checkpoint_version,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    checkpoint_to_archive(ckpt).save(path)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    checkpoint_from_archive(&Archive::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::train::Trainer;

    fn tiny() -> Checkpoint<f32> {
        let dcfg = DenoiserConfig {
            image_channels: 3,
            stages: 1,
            channels: vec![6],
            enc_resblocks: 0,
            dec_resblocks: 1,
            time_embed_dim: 4,
            norm_groups: 2,
            ..DenoiserConfig::default()
        };
        let tcfg = TrainConfig {
            total_steps: 2,
            batch: 1,
            ..TrainConfig::default()
        };
        let image = Tensor::from_fn(3, 8, 8, |c, y, x| ((c + y * 3 + x) as f32 * 0.3).sin());
        let schedule = ScheduleParams {
            steps: 20,
            ..ScheduleParams::default()
        }
        .build()
        .unwrap();
        let mut tr = Trainer::new(image, &dcfg, &tcfg, &schedule).unwrap();
        tr.step().unwrap();
        tr.checkpoint()
    }

    #[test]
    fn file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = tiny();
        save_checkpoint(&c, &path).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back.raw_params, c.raw_params);
        assert_eq!(back.ema_params, c.ema_params);
        assert_eq!(back.step, 1);
        assert_eq!(back.denoiser_config, c.denoiser_config);
        let wide: Checkpoint<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(wide.raw_params, c.raw_params.cast::<f64>());
    }

    #[test]
    fn edited_channel_count_names_the_array() {
        let mut a = checkpoint_to_archive(&tiny());
        a.meta.info["denoiser"]["channels"] = serde_json::json!([8]);
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        match checkpoint_from_archive::<f32>(&b) {
            Err(Error::ArrayShape { name, .. }) => assert!(name.starts_with("raw/"), "{name}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_array_is_reported() {
        let mut a = checkpoint_to_archive(&tiny());
        let gone = a.arrays.pop().unwrap().name;
        let b = Archive::new(&a.meta.kind, a.meta.info.clone(), a.arrays);
        match checkpoint_from_archive::<f32>(&b) {
            Err(Error::MissingArray(name)) => assert_eq!(name, gone),
            other => panic!("unexpected {other:?}"),
        }
    }
}
