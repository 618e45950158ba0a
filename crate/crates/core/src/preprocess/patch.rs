use image::imageops::{self, FilterType};
use image::RgbImage;

use crate::error::{Error, Result};

/// Top-left corners of a sliding window over a `width x height` raster.
pub fn patch_grid(width: u32, height: u32, window: u32, stride: u32) -> Result<Vec<(u32, u32)>> {
    if stride == 0 || window == 0 {
        return Err(Error::InvalidArgument("window and stride must be positive".into()));
    }
    if window > width || window > height {
        return Err(Error::InvalidArgument(format!(
            "window {window} does not fit a {width}x{height} image"
        )));
    }
    let xs: Vec<u32> = (0..=width - window).step_by(stride as usize).collect();
    let ys: Vec<u32> = (0..=height - window).step_by(stride as usize).collect();
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect())
}

/// `(floor((W-w)/s)+1) * (floor((H-w)/s)+1)`
pub fn patch_count(width: u32, height: u32, window: u32, stride: u32) -> Result<usize> {
    if stride == 0 || window == 0 || window > width || window > height {
        return Err(Error::InvalidArgument(format!(
            "window {window}, stride {stride} invalid for a {width}x{height} image"
        )));
    }
    Ok((((width - window) / stride + 1) * ((height - window) / stride + 1)) as usize)
}

/// A window cut from a larger image.
#[derive(Clone, Debug)]
pub struct RawPatch {
    pub x: u32,
    pub y: u32,
    pub pixels: RgbImage,
}

pub fn extract_patches(img: &RgbImage, window: u32, stride: u32) -> Result<Vec<RawPatch>> {
    let grid = patch_grid(img.width(), img.height(), window, stride)?;
    Ok(grid
        .into_iter()
        .map(|(x, y)| RawPatch {
            x,
            y,
            pixels: imageops::crop_imm(img, x, y, window, window).to_image(),
        })
        .collect())
}

/// Linear-filter resize of a square patch to `size x size`.
pub fn resize_patch(patch: &RgbImage, size: u32) -> Result<RgbImage> {
    if patch.width() != patch.height() {
        return Err(Error::InvalidArgument(format!(
            "patch must be square, got {}x{}",
            patch.width(),
            patch.height()
        )));
    }
    if patch.width() == size {
        return Ok(patch.clone());
    }
    Ok(imageops::resize(patch, size, size, FilterType::Triangle))
}
