//! Instance builders and independent oracles shared by the integration tests.

#![allow(dead_code)]

use deepten::encoding::{Codebook, DescriptorSet, SmoothingFactors};
use deepten::matrix::Mat;
use deepten::rng::{self, derive_seed};

/// Descriptors uniform in `±scale`, codewords and smoothing factors uniform
/// in `±1/sqrt(K)` (the initialization range, negative values included).
pub fn instance(n: usize, k: usize, d: usize, scale: f64, seed: u64) -> (DescriptorSet, Codebook, SmoothingFactors) {
    let b = 1.0 / (k as f64).sqrt();
    let x = Mat::seeded_uniform(n, d, -scale, scale, derive_seed(seed, 1)).unwrap();
    let c = Mat::seeded_uniform(k, d, -b, b, derive_seed(seed, 2)).unwrap();
    let s = Mat::seeded_uniform(1, k, -b, b, derive_seed(seed, 3)).unwrap();
    (
        DescriptorSet::new(x).unwrap(),
        Codebook::new(c).unwrap(),
        SmoothingFactors::new(s).unwrap(),
    )
}

pub fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gap between the second-nearest and nearest squared distance.
pub fn margin(v: &[f64], c: &Mat) -> f64 {
    let mut d: Vec<f64> = (0..c.rows()).map(|k| sqdist(v, c.row(k))).collect();
    d.sort_by(f64::total_cmp);
    d[1] - d[0]
}

/// Descriptors placed within `0.3` per coordinate of random codewords.
/// Codewords are redrawn until every pair sits far enough apart that each
/// descriptor's nearest-codeword margin exceeds `min_margin`. Needs `K >= 2`.
pub fn well_separated(n: usize, k: usize, d: usize, min_margin: f64, seed: u64) -> (DescriptorSet, Codebook) {
    let jitter = 0.3 * (d as f64).sqrt();
    let gap = 2.0 * jitter + min_margin.max(1.0);
    let half = gap * k as f64;
    let c = (0u64..)
        .map(|attempt| Mat::seeded_uniform(k, d, -half, half, derive_seed(seed, 100 + attempt)).unwrap())
        .find(|c| (0..k).all(|a| (a + 1..k).all(|b| sqdist(c.row(a), c.row(b)).sqrt() >= gap)))
        .unwrap();
    let mut r = rng::seeded(derive_seed(seed, 2));
    let mut x = Mat::zeros(n, d);
    for i in 0..n {
        let kk = (rng::unit_f64(&mut r) * k as f64) as usize;
        for (j, v) in x.row_mut(i).iter_mut().enumerate() {
            *v = c[(kk, j)] + rng::uniform_f64(&mut r, -0.3, 0.3);
        }
        assert!(margin(x.row(i), &c) > min_margin);
    }
    (DescriptorSet::new(x).unwrap(), Codebook::new(c).unwrap())
}

/// Softmax assignment without the overflow shift, straight from the
/// definition: `exp(-s_k |x_i - c_k|^2) / sum_j exp(-s_j |x_i - c_j|^2)`.
pub fn unshifted_assign(x: &Mat, c: &Mat, s: &[f64]) -> Mat {
    let mut a = Mat::zeros(x.rows(), c.rows());
    for i in 0..x.rows() {
        let e: Vec<f64> = (0..c.rows())
            .map(|k| (-s[k] * sqdist(x.row(i), c.row(k))).exp())
            .collect();
        let total: f64 = e.iter().sum();
        for k in 0..c.rows() {
            a[(i, k)] = e[k] / total;
        }
    }
    a
}

/// Residuals grouped by nearest codeword, by brute force.
pub fn brute_vlad(x: &Mat, c: &Mat) -> Mat {
    let mut v = Mat::zeros(c.rows(), c.cols());
    for i in 0..x.rows() {
        let mut best = 0;
        for k in 1..c.rows() {
            if sqdist(x.row(i), c.row(k)) < sqdist(x.row(i), c.row(best)) {
                best = k;
            }
        }
        for j in 0..c.cols() {
            v[(best, j)] += x[(i, j)] - c[(best, j)];
        }
    }
    v
}

pub fn permute_rows(x: &Mat, perm: &[usize]) -> Mat {
    let mut out = Mat::zeros(x.rows(), x.cols());
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(i).copy_from_slice(x.row(p));
    }
    out
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Property-test settings with a fixed seed, so every run draws the same cases.
pub fn proptest_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x7e5),
        ..proptest::test_runner::Config::default()
    }
}
