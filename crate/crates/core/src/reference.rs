//! Fixed encoders that the encoding layer generalizes: nearest-codeword
//! assignment, bag-of-words histograms, VLAD, sum/average pooling, plus
//! k-means for building a dictionary without labels.

use rand::seq::index;

use crate::encoding::{AssignmentMatrix, Codebook, DescriptorSet};
use crate::error::{Error, Result};
use crate::matrix::{dot, Mat};
use crate::rng;

/// Nearest codeword per descriptor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardAssignment {
    pub idx: Vec<usize>,
    pub k: usize,
}

/// Occupancy of each codeword as a `1 x K` row.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub counts: Mat,
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

fn check_dims(op: &'static str, x: &DescriptorSet, c: &Codebook) -> Result<()> {
    if x.dim() != c.dim() {
        return Err(Error::shape(
            op,
            format!("descriptor dim {} vs codeword dim {}", x.dim(), c.dim()),
        ));
    }
    Ok(())
}

/// Squared Euclidean nearest codeword; ties go to the lowest index.
pub fn hard_assign(x: &DescriptorSet, c: &Codebook) -> Result<HardAssignment> {
    check_dims("hard_assign", x, c)?;
    let idx = (0..x.len()).map(|i| nearest(x.as_mat().row(i), c.as_mat()).0).collect();
    Ok(HardAssignment { idx, k: c.len() })
}

fn nearest(v: &[f64], c: &Mat) -> (usize, f64) {
    let mut best = (0, sqdist(v, c.row(0)));
    for k in 1..c.rows() {
        let d = sqdist(v, c.row(k));
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

pub fn bow_histogram(assignment: &HardAssignment) -> Histogram {
    let mut counts = Mat::zeros(1, assignment.k);
    for &k in &assignment.idx {
        counts[(0, k)] += 1.0;
    }
    Histogram { counts }
}

/// Column sums of the soft assignment weights.
pub fn soft_bow(a: &AssignmentMatrix) -> Histogram {
    Histogram {
        counts: a.weights().colsum(),
    }
}

/// Raw VLAD: residuals summed per nearest codeword, no normalization.
pub fn vlad(x: &DescriptorSet, c: &Codebook) -> Result<Mat> {
    let hard = hard_assign(x, c)?;
    let mut v = Mat::zeros(c.len(), c.dim());
    for (i, &k) in hard.idx.iter().enumerate() {
        let xi = x.as_mat().row(i);
        let ck = c.as_mat().row(k);
        for ((o, a), b) in v.row_mut(k).iter_mut().zip(xi).zip(ck) {
            *o += a - b;
        }
    }
    Ok(v)
}

pub fn sum_pool(x: &DescriptorSet) -> Mat {
    x.as_mat().colsum()
}

pub fn avg_pool(x: &DescriptorSet) -> Mat {
    sum_pool(x).scale(1.0 / x.len() as f64)
}

/// Result of a k-means run, with the objective recorded after each
/// assignment step.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    pub objective: Vec<f64>,
    pub iterations: usize,
}

/// `sum_i min_k |x_i - c_k|^2`.
pub fn kmeans_objective(x: &DescriptorSet, c: &Codebook) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        acc += nearest(x.as_mat().row(i), c.as_mat()).1;
    }
    acc
}

pub fn kmeans(x: &DescriptorSet, k: usize, max_iters: usize, seed: u64) -> Result<Codebook> {
    kmeans_fit(x, k, max_iters, seed).map(|f| f.codebook)
}

/// Lloyd's algorithm started from `k` distinct rows drawn with `seed`.
///
/// A centroid left without members moves onto the descriptor that is farthest
/// from its own nearest centroid (lowest index on ties); several empty
/// clusters are filled in index order, each one taking the next farthest
/// descriptor after the previous move.
pub fn kmeans_fit(x: &DescriptorSet, k: usize, max_iters: usize, seed: u64) -> Result<KMeansFit> {
    let n = x.len();
    if k == 0 || n < k {
        return Err(Error::Argument(format!(
            "k-means needs 1 <= K <= N, got K={k} with N={n}"
        )));
    }
    if max_iters == 0 {
        return Err(Error::Argument("k-means needs max_iters >= 1".into()));
    }
    let data = x.as_mat();
    let d = x.dim();
    let mut r = rng::seeded(seed);
    let picks = index::sample(&mut r, n, k);
    let mut centroids = Mat::zeros(k, d);
    for (slot, row) in picks.iter().enumerate() {
        centroids.row_mut(slot).copy_from_slice(data.row(row));
    }

    let mut labels: Vec<usize> = vec![usize::MAX; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let mut changed = false;
        let mut total = 0.0;
        for i in 0..n {
            let (best, dist) = nearest(data.row(i), &centroids);
            total += dist;
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        objective.push(total);
        if !changed {
            break;
        }

        let mut sums = Mat::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &lab) in labels.iter().enumerate() {
            counts[lab] += 1;
            for (o, v) in sums.row_mut(lab).iter_mut().zip(data.row(i)) {
                *o += v;
            }
        }
        for kk in 0..k {
            if counts[kk] > 0 {
                let inv = 1.0 / counts[kk] as f64;
                for (o, s) in centroids.row_mut(kk).iter_mut().zip(sums.row(kk)) {
                    *o = s * inv;
                }
            }
        }
        for kk in 0..k {
            if counts[kk] == 0 {
                let far = farthest_from_nearest(data, &centroids);
                centroids.row_mut(kk).copy_from_slice(data.row(far));
            }
        }
    }

    Ok(KMeansFit {
        codebook: Codebook::new(centroids)?,
        objective,
        iterations,
    })
}

fn farthest_from_nearest(data: &Mat, centroids: &Mat) -> usize {
    let mut best = (0, -1.0);
    for i in 0..data.rows() {
        let d = nearest(data.row(i), centroids).1;
        if d > best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Squared distance from `v` to every codeword.
pub fn distances(v: &[f64], c: &Codebook) -> Vec<f64> {
    (0..c.len())
        .map(|k| {
            let ck = c.as_mat().row(k);
            let diff: Vec<f64> = v.iter().zip(ck).map(|(a, b)| a - b).collect();
            dot(&diff, &diff)
        })
        .collect()
}
