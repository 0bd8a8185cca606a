//! Files: images, the named-array archive and run configuration.

pub mod archive;
pub mod checkpoint;
pub mod config;
pub mod image;

pub use archive::{file_sha256, Archive, ArchiveMeta, RawArray, MAGIC};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{loss_csv, write_loss_csv, write_manifest, CoefficientMode, GuidanceMode, RunConfig};
pub use image::{load_image, load_mask, save_image, CropInfo, LoadedImage};
