use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestRow};
use crate::error::{Error, Result};
use crate::model::ClassHierarchy;
use crate::preprocess::od_to_rgb;

const HEMATOXYLIN: [f64; 3] = [0.650, 0.704, 0.286];
const EOSIN: [f64; 3] = [0.072, 0.990, 0.105];
const BACKGROUND: f64 = 245.0;

/// Stand-in corpus: one striped base texture per coarse family, with a
/// perpendicular finer grating whose frequency identifies the fine class.
///
/// The base stripes have a fixed phase, so families are separable by a
/// linear readout of the pixels. With `noise > 0` each image draws a random
/// phase for its fine grating, which leaves the per-pixel class mean
/// unchanged and hides the fine class from any linear probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub hierarchy: ClassHierarchy,
    pub width: u32,
    pub height: u32,
    pub samples_per_class: usize,
    /// Std of additive texture noise, in units of the [0, 1] texture range.
    pub noise: f64,
    /// Fraction of columns on the right rendered as blank background.
    pub blank_margin: f64,
    /// Pixels per base stripe period times two.
    pub pattern_scale: f64,
    /// Texture amplitude of the family stripes.
    pub base_amplitude: f64,
    /// Texture amplitude of the class grating.
    pub fine_amplitude: f64,
    pub max_images_per_patient: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            hierarchy: ClassHierarchy::default(),
            width: 32,
            height: 32,
            samples_per_class: 50,
            noise: 0.2,
            blank_margin: 0.0,
            pattern_scale: 32.0,
            base_amplitude: 0.08,
            fine_amplitude: 0.2,
            max_images_per_patient: 3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        self.hierarchy.validate()?;
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.width < 4 || self.height < 4 {
            return bad(format!("synthetic image {}x{} is smaller than 4x4", self.width, self.height));
        }
        if self.samples_per_class == 0 || self.max_images_per_patient == 0 {
            return bad("samples_per_class and max_images_per_patient must be positive".into());
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("noise {} must be finite and non-negative", self.noise));
        }
        if !(0.0..1.0).contains(&self.blank_margin) {
            return bad(format!("blank_margin {} must lie in [0, 1)", self.blank_margin));
        }
        if [self.base_amplitude, self.fine_amplitude].iter().any(|a| !(0.0..=0.5).contains(a)) {
            return bad(format!(
                "amplitudes {} and {} must lie in [0, 0.5]",
                self.base_amplitude, self.fine_amplitude
            ));
        }
        if !(self.pattern_scale.is_finite() && self.pattern_scale > 0.0) {
            return bad(format!("pattern_scale {} must be positive", self.pattern_scale));
        }
        Ok(())
    }

    /// Grating frequency (cycles per `pattern_scale`) of each fine class.
    pub fn fine_frequency(&self, fine: usize) -> f64 {
        let coarse = self.hierarchy.parent_of(fine);
        let rank = self.hierarchy.children(coarse).position(|c| c == fine).unwrap_or(0);
        3.0 + 2.0 * rank as f64
    }

    fn render(&self, fine: usize, rng: &mut ChaCha8Rng) -> RgbImage {
        let coarse = self.hierarchy.parent_of(fine);
        let theta = std::f64::consts::PI * coarse as f64 / self.hierarchy.num_coarse() as f64;
        let (c, s) = (theta.cos(), theta.sin());
        let k = self.fine_frequency(fine);
        let tau = std::f64::consts::TAU;
        let phase = if self.noise > 0.0 { rng.random::<f64>() * tau } else { 0.0 };
        let normal = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE)).expect("validated noise");
        let tissue_cols = self.width - (self.width as f64 * self.blank_margin).round() as u32;
        let mut img = RgbImage::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let eps = if self.noise > 0.0 { normal.sample(rng) } else { 0.0 };
                let px = if x >= tissue_cols {
                    let v = (BACKGROUND + 40.0 * eps).round().clamp(0.0, 255.0) as u8;
                    [v; 3]
                } else {
                    let u = x as f64 / self.pattern_scale;
                    let v = y as f64 / self.pattern_scale;
                    let along = u * c + v * s;
                    let across = -u * s + v * c;
                    let t = 0.5
                        + self.base_amplitude * (tau * 1.5 * along).sin()
                        + self.fine_amplitude * (tau * k * across + phase).sin()
                        + eps;
                    let t = t.clamp(0.0, 1.0);
                    let (ch, ce) = (0.2 + 0.8 * t, 0.3 + 0.4 * (1.0 - t));
                    od_to_rgb([0, 1, 2].map(|i| ch * HEMATOXYLIN[i] + ce * EOSIN[i]))
                };
                img.put_pixel(x, y, Rgb(px));
            }
        }
        img
    }
}

fn slug(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_ascii_alphanumeric() || *c == '-')
        .collect::<String>()
        .to_ascii_lowercase()
}

/// Generated images in manifest order.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub images: Vec<RgbImage>,
    pub manifest: Manifest,
}

impl SyntheticCorpus {
    /// Writes `images/<wsi_id>.png` and `manifest.csv` under `dir`; image
    /// paths in the manifest are relative to `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for (img, row) in self.images.iter().zip(self.manifest.rows()) {
            let path = dir.join(&row.image_path);
            img.save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
        }
        let path = dir.join("manifest.csv");
        self.manifest.save(&path)?;
        Ok(path)
    }
}

/// Deterministic in `spec.seed`: every image has its own random stream.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let h = &spec.hierarchy;
    let n = spec.samples_per_class;
    let mut group_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    group_rng.set_stream(u64::MAX);
    let mut rows = Vec::with_capacity(h.num_fine() * n);
    for fine in 0..h.num_fine() {
        let name = slug(&h.fine_names[fine]);
        let (mut patient, mut left) = (0, 0);
        for i in 0..n {
            if left == 0 {
                patient += 1;
                left = group_rng.random_range(1..=spec.max_images_per_patient);
            }
            left -= 1;
            let wsi_id = format!("{name}-{i:04}");
            rows.push(ManifestRow {
                patient_id: format!("{name}-p{patient:03}"),
                image_path: format!("images/{wsi_id}.png"),
                wsi_id,
                coarse_label: h.coarse_names[h.parent_of(fine)].clone(),
                fine_label: h.fine_names[fine].clone(),
            });
        }
    }
    let images = (0..rows.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            spec.render(i / n, &mut rng)
        })
        .collect();
    Ok(SyntheticCorpus {
        images,
        manifest: Manifest::new(rows, h)?,
    })
}
