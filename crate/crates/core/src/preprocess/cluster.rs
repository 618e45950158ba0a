use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares after seeding and after every update.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, dist2(p, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Lloyd's algorithm with k-means++ seeding; stops when assignments are
/// stable or after `max_iter` updates.
pub fn kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut R) -> Result<KMeans> {
    if k == 0 || points.len() < k {
        return Err(Error::InvalidArgument(format!("need at least {k} points for k={k}, got {}", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidArgument("points differ in dimension".into()));
    }
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let next = match WeightedIndex::new(&d) {
            Ok(w) => w.sample(rng),
            // Every point coincides with a centroid already.
            Err(_) => rng.random_range(0..points.len()),
        };
        centroids.push(points[next].clone());
    }
    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut total = 0.0;
        let labels = points
            .iter()
            .map(|p| {
                let (i, d) = nearest(p, centroids);
                total += d;
                i
            })
            .collect();
        (labels, total)
    };
    let (mut labels, obj) = assign(&centroids);
    let mut objective = vec![obj];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (j, v) in centroid.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
            }
        }
        let (next, obj) = assign(&centroids);
        objective.push(obj);
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(KMeans {
        centroids,
        labels,
        objective,
        iterations,
    })
}

/// Two-way split of patch embeddings into useful tissue and useless
/// (background) patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub centroids: Vec<Vec<f64>>,
    pub cluster: Vec<usize>,
    /// Cluster whose members are brighter on average; `None` when every
    /// embedding was identical and nothing was dropped.
    pub useless_cluster: Option<usize>,
    pub kept: Vec<bool>,
}

/// Cluster embeddings with k=2 and mark the brighter cluster useless.
/// `brightness[i]` is the mean pixel intensity of patch `i`.
pub fn filter_patches<R: Rng + ?Sized>(
    embeddings: &[Vec<f64>],
    brightness: &[f64],
    rng: &mut R,
) -> Result<ClusterAssignment> {
    if embeddings.len() < 2 || brightness.len() != embeddings.len() {
        return Err(Error::Data(format!(
            "filtering needs at least 2 patches with one brightness each (got {} and {})",
            embeddings.len(),
            brightness.len()
        )));
    }
    if embeddings.iter().all(|e| e == &embeddings[0]) {
        log::warn!("all patch embeddings are identical; keeping every patch");
        return Ok(ClusterAssignment {
            centroids: vec![embeddings[0].clone()],
            cluster: vec![0; embeddings.len()],
            useless_cluster: None,
            kept: vec![true; embeddings.len()],
        });
    }
    let km = kmeans(embeddings, 2, 100, rng)?;
    let mean_of = |c: usize| {
        let v: Vec<f64> = brightness.iter().zip(&km.labels).filter(|(_, &l)| l == c).map(|(b, _)| *b).collect();
        if v.is_empty() { f64::NEG_INFINITY } else { v.iter().sum::<f64>() / v.len() as f64 }
    };
    let useless = if mean_of(1) > mean_of(0) { 1 } else { 0 };
    Ok(ClusterAssignment {
        kept: km.labels.iter().map(|&l| l != useless).collect(),
        centroids: km.centroids,
        cluster: km.labels,
        useless_cluster: Some(useless),
    })
}
