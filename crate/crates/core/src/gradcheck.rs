//! Central finite differences and the checks built on them.
//!
//! The numeric derivative is the reference: an analytic gradient passes when
//! its largest element-wise relative error against central differences stays
//! below the tolerance.

use std::fmt;

use crate::encoding::{
    encode_backward, encode_forward, normalize, normalize_backward, Codebook, DescriptorSet, ForwardCache,
    NormalizeMode, SmoothingFactors,
};
use crate::error::{Error, Result};
use crate::matrix::{dot, Mat};
use crate::network::{softmax_xent, NetworkParams, TENSOR_NAMES};
use crate::rng::derive_seed;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-5;

/// Per-element `(loss(θ + h e) - loss(θ - h e)) / 2h`.
pub fn central_diff<F>(mut loss: F, theta: &Mat, h: f64) -> Result<Mat>
where
    F: FnMut(&Mat) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Argument(format!("step must be > 0, got {h}")));
    }
    let (rows, cols) = theta.shape();
    let mut probe = theta.clone();
    let mut grad = Mat::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let orig = theta[(r, c)];
            probe[(r, c)] = orig + h;
            let plus = loss(&probe)?;
            probe[(r, c)] = orig - h;
            let minus = loss(&probe)?;
            probe[(r, c)] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric {
                    row: r,
                    col: c,
                    detail: format!("loss is not finite around this coordinate ({plus}, {minus})"),
                });
            }
            grad[(r, c)] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// `max |a - b| / max(|a|, |b|, 1e-10)` over all elements.
pub fn rel_error(a: &Mat, b: &Mat) -> Result<f64> {
    Ok(worst_element(a, b)?.map_or(0.0, |w| w.0))
}

fn worst_element(a: &Mat, b: &Mat) -> Result<Option<(f64, usize)>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("rel_error", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut worst: Option<(f64, usize)> = None;
    for (i, (x, y)) in a.as_slice().iter().zip(b.as_slice()).enumerate() {
        let e = (x - y).abs() / x.abs().max(y.abs()).max(1e-10);
        if worst.is_none_or(|(w, _)| e > w) {
            worst = Some((e, i));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub argmax: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

impl GradReport {
    pub fn compare(name: impl Into<String>, analytic: &Mat, numeric: &Mat) -> Result<Self> {
        let worst = worst_element(analytic, numeric)?;
        let (err, idx) = worst.unwrap_or((0.0, 0));
        let cols = analytic.cols().max(1);
        let (r, c) = (idx / cols, idx % cols);
        let at = |m: &Mat| if m.is_empty() { 0.0 } else { m[(r, c)] };
        Ok(GradReport {
            name: name.into(),
            max_rel_err: err,
            argmax: (r, c),
            analytic: at(analytic),
            numeric: at(numeric),
        })
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<10} max_rel_err={:.3e} at ({}, {}) analytic={:.9e} numeric={:.9e}",
            self.name, self.max_rel_err, self.argmax.0, self.argmax.1, self.analytic, self.numeric
        )
    }
}

/// A seeded encoding problem with a fixed linear probe on the normalized
/// output: `loss = w . normalize(E)`.
#[derive(Debug, Clone)]
pub struct EncodingInstance {
    pub x: Mat,
    pub codebook: Mat,
    pub smoothing: Mat,
    pub probe: Vec<f64>,
}

impl EncodingInstance {
    /// Descriptors and probe weights uniform in `[-1, 1)`; codewords and
    /// smoothing factors uniform in `+-1/sqrt(K)` as at network
    /// initialization. Each draws from its own stream.
    pub fn seeded(n: usize, k: usize, d: usize, seed: u64) -> Result<Self> {
        if n == 0 || k == 0 || d == 0 {
            return Err(Error::Argument(format!(
                "instance dims must be >= 1, got N={n} K={k} D={d}"
            )));
        }
        let bound = 1.0 / (k as f64).sqrt();
        Ok(EncodingInstance {
            x: Mat::seeded_uniform(n, d, -1.0, 1.0, derive_seed(seed, 1))?,
            codebook: Mat::seeded_uniform(k, d, -bound, bound, derive_seed(seed, 2))?,
            smoothing: Mat::seeded_uniform(1, k, -bound, bound, derive_seed(seed, 3))?,
            probe: Mat::seeded_uniform(1, k * d, -1.0, 1.0, derive_seed(seed, 4))?.into_vec(),
        })
    }

    pub fn loss_at(&self, x: &Mat, c: &Mat, s: &Mat) -> Result<f64> {
        let (e, _) = encode_forward(
            &DescriptorSet::new(x.clone())?,
            &Codebook::new(c.clone())?,
            &SmoothingFactors::new(s.clone())?,
        )?;
        Ok(dot(&normalize(&e, NormalizeMode::Global).values, &self.probe))
    }

    /// Forward cache and `dl/dE` of the probe loss at the instance point.
    pub fn upstream(&self) -> Result<(ForwardCache, Mat)> {
        let (e, cache) = encode_forward(
            &DescriptorSet::new(self.x.clone())?,
            &Codebook::new(self.codebook.clone())?,
            &SmoothingFactors::new(self.smoothing.clone())?,
        )?;
        let norm = normalize(&e, NormalizeMode::Global);
        let de = normalize_backward(&norm, &self.probe)?;
        Ok((cache, de))
    }

    pub fn numeric_grads(&self, h: f64) -> Result<[Mat; 3]> {
        let dx = central_diff(|x| self.loss_at(x, &self.codebook, &self.smoothing), &self.x, h)?;
        let dc = central_diff(|c| self.loss_at(&self.x, c, &self.smoothing), &self.codebook, h)?;
        let ds = central_diff(|s| self.loss_at(&self.x, &self.codebook, s), &self.smoothing, h)?;
        Ok([dx, dc, ds])
    }
}

/// Outcome of checking one encoding instance.
#[derive(Debug, Clone)]
pub struct EncodingCheck {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub seed: u64,
    pub reports: [GradReport; 3],
    pub passed: bool,
}

impl fmt::Display for EncodingCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let worst = self
            .reports
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("three reports");
        write!(
            f,
            "{} N={:<3} K={:<2} D={:<3} seed={:<3} dX={:.2e} dC={:.2e} ds={:.2e} (worst {})",
            if self.passed { "PASS" } else { "FAIL" },
            self.n,
            self.k,
            self.d,
            self.seed,
            self.reports[0].max_rel_err,
            self.reports[1].max_rel_err,
            self.reports[2].max_rel_err,
            worst.name
        )
    }
}

/// Compares `encode_backward` against central differences of the probe loss
/// on a seeded instance.
pub fn check_encoding(n: usize, k: usize, d: usize, seed: u64, h: f64, tol: f64) -> Result<EncodingCheck> {
    let inst = EncodingInstance::seeded(n, k, d, seed)?;
    let (cache, de) = inst.upstream()?;
    let analytic = encode_backward(&cache, &de)?;
    let [nx, nc, ns] = inst.numeric_grads(h)?;
    let reports = [
        GradReport::compare("dX", &analytic.dx, &nx)?,
        GradReport::compare("dC", &analytic.dc, &nc)?,
        GradReport::compare("ds", &analytic.ds, &ns)?,
    ];
    let passed = reports.iter().all(|r| r.passes(tol));
    Ok(EncodingCheck {
        n,
        k,
        d,
        seed,
        reports,
        passed,
    })
}

/// Codeword gradient that keeps only the `j = k` term of the softmax
/// Jacobian, i.e. `da_ik/dc_k = 2 s_k f_ik g_ik / h_i^2 * r_ik` with the
/// coupling to other codewords dropped. Exact for `K = 1`, wrong otherwise;
/// kept to show the difference against finite differences.
pub fn diagonal_codeword_grad(cache: &ForwardCache, de: &Mat) -> Result<Mat> {
    let r = &cache.residuals;
    let (n, k, d) = r.shape();
    if de.shape() != (k, d) {
        return Err(Error::shape(
            "diagonal_codeword_grad",
            format!("{:?} for {k}x{d}", de.shape()),
        ));
    }
    let asg = &cache.assignment;
    let s = cache.smoothing.as_slice();
    let mut dc = Mat::zeros(k, d);
    for i in 0..n {
        let h = asg.row_sums()[(i, 0)];
        for kk in 0..k {
            let rik = r.get(i, kk);
            let f = asg.shifted_exp()[(i, kk)];
            let da_scale = 2.0 * s[kk] * f * asg.g(i, kk) / (h * h);
            let u = dot(de.row(kk), rik);
            let aik = asg.weights()[(i, kk)];
            for j in 0..d {
                dc[(kk, j)] += u * da_scale * rik[j] - aik * de[(kk, j)];
            }
        }
    }
    Ok(dc)
}

/// Runs the codeword check with [`diagonal_codeword_grad`] in place of the
/// full gradient.
pub fn check_diagonal_codeword(n: usize, k: usize, d: usize, seed: u64, h: f64) -> Result<GradReport> {
    let inst = EncodingInstance::seeded(n, k, d, seed)?;
    let (cache, de) = inst.upstream()?;
    let diag = diagonal_codeword_grad(&cache, &de)?;
    let [_, nc, _] = inst.numeric_grads(h)?;
    GradReport::compare("dC(diag)", &diag, &nc)
}

/// Which instance grid the gradient check sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    /// N in {1, 5, 17} x K in {1, 4, 8} x D in {2, 16}, 20 instances.
    Default,
    /// Four quick instances.
    Small,
}

/// `(N, K, D, seed)` tuples for a grid. The default grid walks the 18
/// combinations and wraps for the last two seeds.
pub fn grid_instances(grid: Grid) -> Vec<(usize, usize, usize, u64)> {
    match grid {
        Grid::Default => {
            let mut combos = Vec::new();
            for n in [1, 5, 17] {
                for k in [1, 4, 8] {
                    for d in [2, 16] {
                        combos.push((n, k, d));
                    }
                }
            }
            (0..20u64)
                .map(|seed| {
                    let (n, k, d) = combos[seed as usize % combos.len()];
                    (n, k, d, seed)
                })
                .collect()
        }
        Grid::Small => vec![(1, 1, 1, 0), (5, 4, 2, 1), (3, 2, 3, 2), (17, 4, 2, 3)],
    }
}

/// The small end-to-end network used for the whole-model check:
/// `D_in = 3, D_proj = 2, K = 2`, two classes, four descriptors.
pub fn tiny_network(seed: u64) -> Result<(NetworkParams, DescriptorSet, usize)> {
    let params = NetworkParams::init(3, 2, 2, 2, derive_seed(seed, 10))?;
    let x = DescriptorSet::new(Mat::seeded_uniform(4, 3, -1.0, 1.0, derive_seed(seed, 11))?)?;
    Ok((params, x, (seed % 2) as usize))
}

/// Checks every parameter gradient of `params` on one labelled sample
/// against central differences of the cross-entropy loss.
pub fn check_network(
    params: &NetworkParams,
    x: &DescriptorSet,
    label: usize,
    mode: NormalizeMode,
    h: f64,
) -> Result<Vec<GradReport>> {
    let (logits, cache) = params.forward(x, mode)?;
    let (_, dlogits) = softmax_xent(&logits, label)?;
    let grads = params.backward(&cache, &dlogits)?;

    let loss_of = |p: &NetworkParams| -> Result<f64> {
        let (z, _) = p.forward(x, mode)?;
        Ok(softmax_xent(&z, label)?.0)
    };
    let mut reports = Vec::with_capacity(6);
    for (idx, name) in TENSOR_NAMES.iter().enumerate() {
        let theta = params.tensors()[idx].clone();
        let numeric = central_diff(
            |t| {
                let mut p = params.clone();
                *p.tensors_mut()[idx] = t.clone();
                loss_of(&p)
            },
            &theta,
            h,
        )?;
        reports.push(GradReport::compare(*name, grads.tensors()[idx], &numeric)?);
    }
    Ok(reports)
}
