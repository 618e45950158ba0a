use image::{GrayImage, Luma, RgbImage};

/// Optical density of one 8-bit channel: `-log10(max(I,1)/255)`.
pub fn channel_od(i: u8) -> f64 {
    -(f64::from(i.max(1)) / 255.0).log10()
}

/// Inverse of [`channel_od`], rounded and clamped to 8 bits.
pub fn channel_from_od(od: f64) -> u8 {
    (255.0 * 10f64.powf(-od)).round().clamp(0.0, 255.0) as u8
}

pub fn rgb_to_od(px: [u8; 3]) -> [f64; 3] {
    px.map(channel_od)
}

pub fn od_to_rgb(od: [f64; 3]) -> [u8; 3] {
    od.map(channel_from_od)
}

/// Per-pixel optical densities in raster order.
pub fn image_od(img: &RgbImage) -> Vec<[f64; 3]> {
    img.pixels().map(|p| rgb_to_od(p.0)).collect()
}

/// `round(0.299 R + 0.587 G + 0.114 B)`
pub fn gray_value(px: [u8; 3]) -> u8 {
    let [r, g, b] = px.map(f64::from);
    (0.299 * r + 0.587 * g + 0.114 * b).round().clamp(0.0, 255.0) as u8
}

pub fn to_grayscale(img: &RgbImage) -> GrayImage {
    GrayImage::from_fn(img.width(), img.height(), |x, y| Luma([gray_value(img.get_pixel(x, y).0)]))
}

/// Mean over all channels and pixels.
pub fn mean_intensity(img: &RgbImage) -> f64 {
    let raw = img.as_raw();
    raw.iter().map(|&v| f64::from(v)).sum::<f64>() / raw.len().max(1) as f64
}
