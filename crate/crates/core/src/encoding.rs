//! The residual encoding layer.
//!
//! A set of `N` descriptors `x_i` is encoded against a learnable codebook of
//! `K` codewords `c_k` with per-codeword smoothing factors `s_k`:
//!
//! ```text
//! r_ik = x_i - c_k
//! a_ik = exp(-s_k |r_ik|^2) / sum_j exp(-s_j |r_ij|^2)
//! e_k  = sum_i a_ik r_ik
//! ```
//!
//! The output `E = (e_1 .. e_K)` has `K x D` entries whatever `N` is, and is
//! invariant to the order of the descriptors. The backward pass is the full
//! chain rule, including the coupling between codewords that comes from the
//! shared softmax denominator.
//!
//! Smoothing factors carry no sign constraint. A negative `s_k` makes codeword
//! `k` prefer distant descriptors; the softmax stays well defined because of
//! the per-row shift `phi_i = min_k s_k |r_ik|^2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Mat};

/// Guard for L2 normalization; vectors shorter than this are divided by it.
pub const NORM_EPS: f64 = 1e-12;

/// An unordered set of `N` descriptors of dimension `D`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet(Mat);

impl DescriptorSet {
    pub fn new(x: Mat) -> Result<Self> {
        if x.rows() == 0 || x.cols() == 0 {
            return Err(Error::Argument(format!(
                "descriptor set needs N >= 1 and D >= 1, got {}x{}",
                x.rows(),
                x.cols()
            )));
        }
        if let Some((row, col)) = x.first_non_finite() {
            return Err(Error::Numeric {
                row,
                col,
                detail: "descriptor entry is not finite".into(),
            });
        }
        Ok(DescriptorSet(x))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }
}

/// `K` codewords of dimension `D`, one per row. Duplicate rows are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook(Mat);

impl Codebook {
    pub fn new(c: Mat) -> Result<Self> {
        if c.rows() == 0 || c.cols() == 0 {
            return Err(Error::Argument(format!(
                "codebook needs K >= 1 and D >= 1, got {}x{}",
                c.rows(),
                c.cols()
            )));
        }
        if let Some((row, col)) = c.first_non_finite() {
            return Err(Error::Numeric {
                row,
                col,
                detail: "codeword entry is not finite".into(),
            });
        }
        Ok(Codebook(c))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }

    pub(crate) fn as_mut_mat(&mut self) -> &mut Mat {
        &mut self.0
    }
}

/// Per-codeword smoothing factors as a `1 x K` row.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingFactors(Mat);

impl SmoothingFactors {
    pub fn new(s: Mat) -> Result<Self> {
        if s.rows() != 1 || s.cols() == 0 {
            return Err(Error::Argument(format!(
                "smoothing factors must be 1xK with K >= 1, got {}x{}",
                s.rows(),
                s.cols()
            )));
        }
        if let Some((row, col)) = s.first_non_finite() {
            return Err(Error::Numeric {
                row,
                col,
                detail: "smoothing factor is not finite".into(),
            });
        }
        Ok(SmoothingFactors(s))
    }

    /// The single shared smoothing factor of plain soft assignment.
    pub fn uniform(k: usize, beta: f64) -> Result<Self> {
        Self::new(Mat::filled(1, k, beta))
    }

    pub fn len(&self) -> usize {
        self.0.cols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn scaled(&self, t: f64) -> Result<Self> {
        Self::new(self.0.scale(t))
    }

    pub(crate) fn as_mut_mat(&mut self) -> &mut Mat {
        &mut self.0
    }
}

/// `r_ik = x_i - c_k`, stored as an `N x K x D` block.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTensor {
    n: usize,
    k: usize,
    d: usize,
    data: Vec<f64>,
}

impl ResidualTensor {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n, self.k, self.d)
    }

    pub fn get(&self, i: usize, k: usize) -> &[f64] {
        let start = (i * self.k + k) * self.d;
        &self.data[start..start + self.d]
    }

    /// `|r_ik|^2` for every pair, as an `N x K` matrix.
    pub fn sqnorms(&self) -> Mat {
        let mut out = Mat::zeros(self.n, self.k);
        for i in 0..self.n {
            for k in 0..self.k {
                let r = self.get(i, k);
                out[(i, k)] = dot(r, r);
            }
        }
        out
    }
}

/// Soft assignment weights together with the quantities the backward pass
/// reuses: the shifted exponentials `f`, their row sums `h` and the shifts
/// `phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    a: Mat,
    f: Mat,
    h: Mat,
    phi: Mat,
}

impl AssignmentMatrix {
    /// `N x K` weights; each row sums to one.
    pub fn weights(&self) -> &Mat {
        &self.a
    }

    pub fn shifted_exp(&self) -> &Mat {
        &self.f
    }

    pub fn row_sums(&self) -> &Mat {
        &self.h
    }

    pub fn shifts(&self) -> &Mat {
        &self.phi
    }

    /// `g_ik = h_i - f_ik`, the mass on every other codeword.
    pub fn g(&self, i: usize, k: usize) -> f64 {
        self.h[(i, 0)] - self.f[(i, k)]
    }

    pub fn n(&self) -> usize {
        self.a.rows()
    }

    pub fn k(&self) -> usize {
        self.a.cols()
    }
}

/// The aggregated residuals `E`, `K x D`, before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVector {
    e: Mat,
}

impl EncodedVector {
    pub fn as_mat(&self) -> &Mat {
        &self.e
    }

    pub fn into_mat(self) -> Mat {
        self.e
    }

    /// Row-major flattening `e_1 | e_2 | ... | e_K`.
    pub fn flat(&self) -> &[f64] {
        self.e.as_slice()
    }
}

/// Everything `encode_backward` needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub x: DescriptorSet,
    pub codebook: Codebook,
    pub smoothing: SmoothingFactors,
    pub residuals: ResidualTensor,
    pub assignment: AssignmentMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodingGrads {
    pub dx: Mat,
    pub dc: Mat,
    pub ds: Mat,
}

pub fn residuals(x: &DescriptorSet, c: &Codebook) -> Result<ResidualTensor> {
    if x.dim() != c.dim() {
        return Err(Error::shape(
            "residuals",
            format!("descriptor dim {} vs codeword dim {}", x.dim(), c.dim()),
        ));
    }
    let (n, k, d) = (x.len(), c.len(), x.dim());
    let mut data = Vec::with_capacity(n * k * d);
    for i in 0..n {
        let xi = x.as_mat().row(i);
        for kk in 0..k {
            let ck = c.as_mat().row(kk);
            data.extend(xi.iter().zip(ck).map(|(a, b)| a - b));
        }
    }
    Ok(ResidualTensor { n, k, d, data })
}

/// Soft assignment with learnable smoothing. Each row is shifted by
/// `phi_i = min_k s_k |r_ik|^2` before exponentiation, so the largest `f_ik`
/// is exactly one and `h_i >= 1`.
pub fn assign(r: &ResidualTensor, s: &SmoothingFactors) -> Result<AssignmentMatrix> {
    let (n, k, _) = r.shape();
    if s.len() != k {
        return Err(Error::shape(
            "assign",
            format!("{} smoothing factors for {k} codewords", s.len()),
        ));
    }
    let sk = s.as_slice();
    let sq = r.sqnorms();
    let mut a = Mat::zeros(n, k);
    let mut f = Mat::zeros(n, k);
    let mut h = Mat::zeros(n, 1);
    let mut phi = Mat::zeros(n, 1);
    let mut dist = vec![0.0; k];
    for i in 0..n {
        for kk in 0..k {
            dist[kk] = sk[kk] * sq[(i, kk)];
        }
        let shift = dist.iter().copied().fold(f64::INFINITY, f64::min);
        let mut total = 0.0;
        for kk in 0..k {
            let v = (-dist[kk] + shift).exp();
            f[(i, kk)] = v;
            total += v;
        }
        for kk in 0..k {
            a[(i, kk)] = f[(i, kk)] / total;
        }
        h[(i, 0)] = total;
        phi[(i, 0)] = shift;
    }
    Ok(AssignmentMatrix { a, f, h, phi })
}

/// `e_k = sum_i a_ik r_ik`, accumulated in ascending `i`.
pub fn aggregate(a: &AssignmentMatrix, r: &ResidualTensor) -> Result<EncodedVector> {
    let (n, k, d) = r.shape();
    if a.n() != n || a.k() != k {
        return Err(Error::shape(
            "aggregate",
            format!("assignment {}x{} vs residuals {n}x{k}", a.n(), a.k()),
        ));
    }
    let w = a.weights();
    let mut e = Mat::zeros(k, d);
    for i in 0..n {
        for kk in 0..k {
            let aik = w[(i, kk)];
            for (o, &rv) in e.row_mut(kk).iter_mut().zip(r.get(i, kk)) {
                *o += aik * rv;
            }
        }
    }
    Ok(EncodedVector { e })
}

pub fn encode_forward(x: &DescriptorSet, c: &Codebook, s: &SmoothingFactors) -> Result<(EncodedVector, ForwardCache)> {
    let r = residuals(x, c)?;
    let a = assign(&r, s)?;
    let e = aggregate(&a, &r)?;
    let cache = ForwardCache {
        x: x.clone(),
        codebook: c.clone(),
        smoothing: s.clone(),
        residuals: r,
        assignment: a,
    };
    Ok((e, cache))
}

/// Gradients of a scalar loss with respect to the descriptors, the codewords
/// and the smoothing factors, given `dE = dl/dE` (`K x D`).
///
/// With `u_ik = dE_k . r_ik` and `d_ik = s_k |r_ik|^2`, the softmax gives
/// `dl/dd_ik = -a_ik (u_ik - sum_j a_ij u_ij)`. The `sum_j` term is what ties
/// every codeword to every other one through the shared denominator.
pub fn encode_backward(cache: &ForwardCache, de: &Mat) -> Result<EncodingGrads> {
    let r = &cache.residuals;
    let (n, k, d) = r.shape();
    if de.shape() != (k, d) {
        return Err(Error::shape(
            "encode_backward",
            format!("upstream {}x{} for a {k}x{d} encoding", de.rows(), de.cols()),
        ));
    }
    let a = cache.assignment.weights();
    let s = cache.smoothing.as_slice();

    let mut dx = Mat::zeros(n, d);
    let mut dc = Mat::zeros(k, d);
    let mut ds = Mat::zeros(1, k);
    let mut u = vec![0.0; k];

    for i in 0..n {
        let mut mean_u = 0.0;
        for kk in 0..k {
            u[kk] = dot(de.row(kk), r.get(i, kk));
            mean_u += a[(i, kk)] * u[kk];
        }
        for kk in 0..k {
            let aik = a[(i, kk)];
            let rik = r.get(i, kk);
            let d_dist = -aik * (u[kk] - mean_u);
            let coef = 2.0 * s[kk] * d_dist;
            let dek = de.row(kk);
            for j in 0..d {
                let g = aik * dek[j] + coef * rik[j];
                dx[(i, j)] += g;
                dc[(kk, j)] -= g;
            }
            ds[(0, kk)] += d_dist * dot(rik, rik);
        }
    }
    Ok(EncodingGrads { dx, dc, ds })
}

/// How the flattened encoding is L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    /// One norm over the whole `K * D` vector.
    #[default]
    Global,
    /// Each codeword's `D`-vector normalized on its own.
    PerCodeword,
}

#[derive(Debug, Clone, PartialEq)]
pub struct L2Cache {
    pub normalized: Vec<f64>,
    pub norm: f64,
}

/// `v / max(|v|, eps)`; the zero vector maps to zero.
pub fn l2norm_forward(v: &[f64]) -> (Vec<f64>, L2Cache) {
    let norm = dot(v, v).sqrt();
    let denom = norm.max(NORM_EPS);
    let out: Vec<f64> = v.iter().map(|x| x / denom).collect();
    (out.clone(), L2Cache { normalized: out, norm })
}

pub fn l2norm_backward(cache: &L2Cache, d_out: &[f64]) -> Result<Vec<f64>> {
    if d_out.len() != cache.normalized.len() {
        return Err(Error::shape(
            "l2norm_backward",
            format!("{} upstream values for length {}", d_out.len(), cache.normalized.len()),
        ));
    }
    if cache.norm <= NORM_EPS {
        // below the guard the map is the linear v / eps
        return Ok(d_out.iter().map(|g| g / NORM_EPS).collect());
    }
    let radial = dot(&cache.normalized, d_out);
    Ok(d_out
        .iter()
        .zip(&cache.normalized)
        .map(|(g, vh)| (g - vh * radial) / cache.norm)
        .collect())
}

/// Normalized, flattened encoding plus what its backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedEncoding {
    pub values: Vec<f64>,
    mode: NormalizeMode,
    k: usize,
    d: usize,
    caches: Vec<L2Cache>,
}

impl NormalizedEncoding {
    pub fn mode(&self) -> NormalizeMode {
        self.mode
    }
}

pub fn normalize(e: &EncodedVector, mode: NormalizeMode) -> NormalizedEncoding {
    let (k, d) = e.as_mat().shape();
    let (values, caches) = match mode {
        NormalizeMode::Global => {
            let (v, c) = l2norm_forward(e.flat());
            (v, vec![c])
        }
        NormalizeMode::PerCodeword => {
            let mut values = Vec::with_capacity(k * d);
            let mut caches = Vec::with_capacity(k);
            for kk in 0..k {
                let (v, c) = l2norm_forward(e.as_mat().row(kk));
                values.extend(v);
                caches.push(c);
            }
            (values, caches)
        }
    };
    NormalizedEncoding {
        values,
        mode,
        k,
        d,
        caches,
    }
}

/// Maps `dl/d(normalized)` back to `dl/dE` as a `K x D` matrix.
pub fn normalize_backward(norm: &NormalizedEncoding, d_out: &[f64]) -> Result<Mat> {
    let (k, d) = (norm.k, norm.d);
    if d_out.len() != k * d {
        return Err(Error::shape(
            "normalize_backward",
            format!("{} upstream values for a {k}x{d} encoding", d_out.len()),
        ));
    }
    let flat = match norm.mode {
        NormalizeMode::Global => l2norm_backward(&norm.caches[0], d_out)?,
        NormalizeMode::PerCodeword => {
            let mut out = Vec::with_capacity(k * d);
            for (kk, cache) in norm.caches.iter().enumerate() {
                out.extend(l2norm_backward(cache, &d_out[kk * d..(kk + 1) * d])?);
            }
            out
        }
    };
    Mat::from_vec(k, d, flat)
}
