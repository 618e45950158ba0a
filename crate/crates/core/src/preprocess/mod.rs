//! Whole-slide preprocessing: tiling, resizing, optical-density stain
//! normalization, grayscale conversion and autoencoder-based background
//! filtering.

mod cae;
mod cluster;
mod color;
mod patch;
mod stain;

pub use cae::{train_cae, Cae, CaeConfig, CaeReport};
pub use cluster::{filter_patches, kmeans, ClusterAssignment, KMeans};
pub use color::{
    channel_from_od, channel_od, gray_value, image_od, mean_intensity, od_to_rgb, rgb_to_od, to_grayscale,
};
pub use patch::{extract_patches, patch_count, patch_grid, resize_patch, RawPatch};
pub use stain::{angle_deg, concentrations, fit_stain_model, normalize_stain, percentile, StainFit, StainModel, StainParams};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use image::RgbImage;

/// Stack equally sized RGB images into `[N, 3, H, W]` scaled to `[0, 1]`.
pub fn rgb_batch<T: Scalar>(images: &[RgbImage]) -> Result<Tensor<T>> {
    let (w, h) = images.first().map_or((0, 0), |i| i.dimensions());
    let mut data = Vec::with_capacity(images.len() * 3 * (w * h) as usize);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(crate::Error::InvalidArgument(format!(
                "image is {:?}, expected {:?}",
                img.dimensions(),
                (w, h)
            )));
        }
        for c in 0..3 {
            data.extend(img.pixels().map(|p| T::of(f64::from(p.0[c]) / 255.0)));
        }
    }
    Tensor::new(&[images.len(), 3, h as usize, w as usize], data)
}
