//! Two-stain (H&E) sparse non-negative factorization of optical densities.
//!
//! With `V` the 3 x n tissue OD matrix, fitting solves
//! `min ||V - W H||_F^2 + lambda * sum(H)` over `W >= 0` with unit columns and
//! `H >= 0` by alternating an exact per-pixel `H` step with a monotone `W`
//! step.

use image::{Rgb, RgbImage};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::color::{od_to_rgb, rgb_to_od};
use crate::error::{Error, Result};

type Vec3 = [f64; 3];

/// Typical unit-norm eosin OD direction, used when a slide shows one stain.
const EOSIN: Vec3 = [0.0704, 0.9908, 0.1159];
const HEMATOXYLIN: Vec3 = [0.6500, 0.7040, 0.2860];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainParams {
    /// Sparsity weight on concentrations.
    pub lambda: f64,
    /// Pixels whose largest OD channel is at most this are background.
    pub beta: f64,
    pub iterations: usize,
    pub min_tissue: usize,
    /// Tissue pixels beyond this count are subsampled (seeded).
    pub max_pixels: usize,
}

impl Default for StainParams {
    fn default() -> Self {
        StainParams {
            lambda: 0.1,
            beta: 0.15,
            iterations: 200,
            min_tissue: 1000,
            max_pixels: 20_000,
        }
    }
}

/// Stain OD vectors (hematoxylin first) and the 99th percentile of each
/// stain's concentration over the fitted tissue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainModel {
    pub stains: [Vec3; 2],
    pub p99: [f64; 2],
    pub lambda: f64,
    pub beta: f64,
}

#[derive(Clone, Debug)]
pub struct StainFit {
    pub model: StainModel,
    /// Objective after initialization and after every iteration.
    pub objective: Vec<f64>,
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: Vec3) -> Option<Vec3> {
    let n = norm(a);
    (n > 1e-12).then(|| a.map(|v| v / n))
}

/// Angle between two directions in degrees.
pub fn angle_deg(a: Vec3, b: Vec3) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Exact minimizer of `h'Gh - 2b'h + lambda*(h0+h1)` over `h >= 0`.
fn solve_pixel(g: [[f64; 2]; 2], b: [f64; 2], lambda: f64) -> [f64; 2] {
    let q = |h: [f64; 2]| {
        h[0] * (g[0][0] * h[0] + 2.0 * g[0][1] * h[1]) + g[1][1] * h[1] * h[1] - 2.0 * (b[0] * h[0] + b[1] * h[1])
            + lambda * (h[0] + h[1])
    };
    let r = [b[0] - lambda / 2.0, b[1] - lambda / 2.0];
    let mut best = [0.0, 0.0];
    let mut best_q = 0.0;
    let mut consider = |h: [f64; 2]| {
        let v = q(h);
        if v < best_q {
            best_q = v;
            best = h;
        }
    };
    if g[0][0] > 0.0 {
        consider([(r[0] / g[0][0]).max(0.0), 0.0]);
    }
    if g[1][1] > 0.0 {
        consider([0.0, (r[1] / g[1][1]).max(0.0)]);
    }
    let det = g[0][0] * g[1][1] - g[0][1] * g[0][1];
    if det > 1e-12 * (g[0][0] * g[1][1]).max(1e-300) {
        let h = [(g[1][1] * r[0] - g[0][1] * r[1]) / det, (g[0][0] * r[1] - g[0][1] * r[0]) / det];
        if h[0] >= 0.0 && h[1] >= 0.0 {
            consider(h);
        }
    }
    best
}

fn gram(w: &[Vec3; 2]) -> [[f64; 2]; 2] {
    let off = dot(w[0], w[1]);
    [[dot(w[0], w[0]), off], [off, dot(w[1], w[1])]]
}

/// Non-negative concentrations of every OD pixel under `stains`.
pub fn concentrations(od: &[Vec3], stains: &[Vec3; 2], lambda: f64) -> Vec<[f64; 2]> {
    let g = gram(stains);
    od.iter()
        .map(|&v| solve_pixel(g, [dot(stains[0], v), dot(stains[1], v)], lambda))
        .collect()
}

/// Sufficient statistics for the `W` step and the objective.
struct Stats {
    vtv: f64,
    /// `V H^T`, one 3-vector per stain.
    vh: [Vec3; 2],
    /// `H H^T`
    hh: [[f64; 2]; 2],
    h_sum: f64,
}

fn stats(od: &[Vec3], h: &[[f64; 2]]) -> Stats {
    let mut s = Stats {
        vtv: 0.0,
        vh: [[0.0; 3]; 2],
        hh: [[0.0; 2]; 2],
        h_sum: 0.0,
    };
    for (v, c) in od.iter().zip(h) {
        s.vtv += dot(*v, *v);
        for k in 0..2 {
            for ch in 0..3 {
                s.vh[k][ch] += v[ch] * c[k];
            }
            for l in 0..2 {
                s.hh[k][l] += c[k] * c[l];
            }
        }
        s.h_sum += c[0] + c[1];
    }
    s
}

fn objective(s: &Stats, w: &[Vec3; 2], lambda: f64) -> f64 {
    let g = gram(w);
    let cross = dot(w[0], s.vh[0]) + dot(w[1], s.vh[1]);
    let quad = g[0][0] * s.hh[0][0] + 2.0 * g[0][1] * s.hh[0][1] + g[1][1] * s.hh[1][1];
    (s.vtv - 2.0 * cross + quad).max(0.0) + lambda * s.h_sum
}

/// Clamp to the non-negative orthant and rescale columns to unit length;
/// columns that vanish keep their previous direction.
fn project(cand: [Vec3; 2], prev: &[Vec3; 2]) -> [Vec3; 2] {
    let mut out = *prev;
    for k in 0..2 {
        if let Some(u) = unit(cand[k].map(|v| v.max(0.0))) {
            out[k] = u;
        }
    }
    out
}

fn w_candidates(s: &Stats, w: &[Vec3; 2]) -> Vec<[Vec3; 2]> {
    let mut out = Vec::new();
    // Unconstrained least squares W = (V H^T)(H H^T)^-1, then projected.
    let a = s.hh;
    let det = a[0][0] * a[1][1] - a[0][1] * a[0][1];
    if det > 1e-12 * (a[0][0] * a[1][1]).max(1e-300) {
        let inv = [[a[1][1] / det, -a[0][1] / det], [-a[0][1] / det, a[0][0] / det]];
        let mut ls = [[0.0; 3]; 2];
        for k in 0..2 {
            for ch in 0..3 {
                ls[k][ch] = s.vh[0][ch] * inv[0][k] + s.vh[1][ch] * inv[1][k];
            }
        }
        out.push(project(ls, w));
    }
    // Multiplicative update W <- W * (V H^T) / (W H H^T).
    let mut mu = *w;
    for k in 0..2 {
        for ch in 0..3 {
            let denom = w[0][ch] * a[0][k] + w[1][ch] * a[1][k];
            if denom > 0.0 {
                mu[k][ch] = w[k][ch] * s.vh[k][ch].max(0.0) / denom;
            }
        }
    }
    out.push(project(mu, w));
    out
}

/// Most angularly separated pair among a seeded sample of tissue pixels.
fn initial_stains<R: Rng + ?Sized>(od: &[Vec3], rng: &mut R) -> [Vec3; 2] {
    let picks = index::sample(rng, od.len(), od.len().min(2000)).into_vec();
    let dirs: Vec<Vec3> = picks.iter().filter_map(|&i| unit(od[i])).collect();
    let mut best = (f64::INFINITY, 0, 0);
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            let c = dot(dirs[i], dirs[j]);
            if c < best.0 {
                best = (c, i, j);
            }
        }
    }
    // Within one degree: effectively a single stain.
    if best.0 > 1f64.to_radians().cos() || dirs.len() < 2 {
        let mean = dirs.iter().fold([0.0; 3], |acc, d| [acc[0] + d[0], acc[1] + d[1], acc[2] + d[2]]);
        let first = unit(mean).unwrap_or(HEMATOXYLIN);
        let second = if angle_deg(first, EOSIN) > 10.0 { EOSIN } else { HEMATOXYLIN };
        return [first, second];
    }
    [dirs[best.1], dirs[best.2]]
}

/// Linear-interpolated percentile (`q` in [0, 100]).
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Fit a two-stain model to the tissue pixels of `od`.
pub fn fit_stain_model<R: Rng + ?Sized>(od: &[Vec3], params: &StainParams, rng: &mut R) -> Result<StainFit> {
    let mut tissue: Vec<Vec3> = od
        .iter()
        .copied()
        .filter(|v| v.iter().copied().fold(f64::NEG_INFINITY, f64::max) > params.beta)
        .collect();
    if tissue.len() < params.min_tissue {
        return Err(Error::Data(format!(
            "only {} tissue pixels (need {}); skip this slide",
            tissue.len(),
            params.min_tissue
        )));
    }
    if tissue.len() > params.max_pixels {
        let mut keep = index::sample(rng, tissue.len(), params.max_pixels).into_vec();
        keep.sort_unstable();
        tissue = keep.into_iter().map(|i| tissue[i]).collect();
    }
    let lambda = params.lambda;
    let mut w = initial_stains(&tissue, rng);
    let mut h = concentrations(&tissue, &w, lambda);
    let mut s = stats(&tissue, &h);
    let mut current = objective(&s, &w, lambda);
    let mut trace = vec![current];
    for _ in 0..params.iterations {
        for cand in w_candidates(&s, &w) {
            let v = objective(&s, &cand, lambda);
            if v <= current {
                current = v;
                w = cand;
            }
        }
        h = concentrations(&tissue, &w, lambda);
        s = stats(&tissue, &h);
        // The exact H step cannot increase the objective; guard rounding.
        current = objective(&s, &w, lambda).min(current);
        trace.push(current);
    }
    let order = if w[0][0] >= w[1][0] { [0, 1] } else { [1, 0] };
    let stains = [w[order[0]], w[order[1]]];
    let p99 = order.map(|k| {
        let mut row: Vec<f64> = h.iter().map(|c| c[k]).collect();
        percentile(&mut row, 99.0)
    });
    Ok(StainFit {
        model: StainModel {
            stains,
            p99,
            lambda,
            beta: params.beta,
        },
        objective: trace,
    })
}

/// Map `img` onto the target model's stains: concentrations under the
/// source model (non-negative least squares), rescaled per stain by the
/// ratio of 99th percentiles, recombined with the target stain vectors.
///
/// The part of each pixel's OD that the two source stains cannot express
/// is added back unchanged, so normalizing to the source model itself
/// returns the input up to 8-bit rounding.
pub fn normalize_stain(img: &RgbImage, source: &StainModel, target: &StainModel) -> RgbImage {
    let scale: [f64; 2] = std::array::from_fn(|k| {
        if source.p99[k] > 1e-6 {
            target.p99[k] / source.p99[k]
        } else {
            log::warn!("stain {k}: source 99th percentile is ~0, leaving its scale unchanged");
            1.0
        }
    });
    let g = gram(&source.stains);
    let [s0, s1] = source.stains;
    let [t0, t1] = target.stains;
    let mut out = img.clone();
    for px in out.pixels_mut() {
        let v = rgb_to_od(px.0);
        let c = solve_pixel(g, [dot(s0, v), dot(s1, v)], 0.0);
        let (a, b) = (c[0] * scale[0], c[1] * scale[1]);
        let od = [0, 1, 2].map(|ch| {
            let residual = v[ch] - c[0] * s0[ch] - c[1] * s1[ch];
            (a * t0[ch] + b * t1[ch] + residual).max(0.0)
        });
        *px = Rgb(od_to_rgb(od));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_solver_matches_brute_force() {
        let w = [HEMATOXYLIN, EOSIN];
        let g = gram(&w);
        for v in [[0.5, 0.9, 0.3], [0.1, 0.05, 0.02], [0.9, 0.2, 0.4], [0.0, 0.0, 0.0]] {
            let b = [dot(w[0], v), dot(w[1], v)];
            for lambda in [0.0, 0.1] {
                let h = solve_pixel(g, b, lambda);
                let f = |h: [f64; 2]| {
                    let r = [0, 1, 2].map(|c| v[c] - h[0] * w[0][c] - h[1] * w[1][c]);
                    dot(r, r) + lambda * (h[0] + h[1])
                };
                let mut best = f64::INFINITY;
                for i in 0..=300 {
                    for j in 0..=300 {
                        best = best.min(f([i as f64 / 200.0, j as f64 / 200.0]));
                    }
                }
                assert!(f(h) <= best + 1e-9, "{v:?} {lambda}: {} vs {best}", f(h));
            }
        }
    }

    #[test]
    fn percentile_interpolates() {
        let mut v: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(percentile(&mut v, 99.0), 99.0);
        let mut v = vec![0.0, 10.0];
        assert!((percentile(&mut v, 99.0) - 9.9).abs() < 1e-12);
    }
}
