//! Distortion and perception measurements.

mod features;
mod fid;
mod metrics;

pub use features::{
    perceptual_distance, perceptual_distance_value, FeatureExtractor, RandomConvExtractor, FEATURE_CHANNELS,
    STANDARD_EXTRACTOR_SEED,
};
pub use fid::{fid_proxy, patchify};
pub use metrics::{gmsd, luma, mse, psnr, psnr_from_mse, GMSD_C};
