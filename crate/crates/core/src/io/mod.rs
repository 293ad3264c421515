//! On-disk formats shared by the pipeline stages.

pub mod blob;
pub mod video;

pub use blob::{load_latent, load_params, save_latent, save_params, DType};
pub use video::{read_image, read_mask, read_video, write_mask, write_video, VideoMeta};
