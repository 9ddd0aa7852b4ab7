//! A small orderless classifier built around the encoding layer:
//!
//! ```text
//! X (N x D_in) -> X W_proj + b_proj -> encode -> flatten -> L2 -> W_fc, b_fc -> logits
//! ```
//!
//! The linear projection plays the part of a channel-reducing 1x1 convolution
//! over a feature map whose positions are the descriptors.

mod checkpoint;
mod joint;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, read_tensors, save_checkpoint, write_tensors, Checkpoint};
pub use joint::{joint_train_epoch, JointGrads, JointNetwork};
pub use optim::{sgd_step, OptimizerState, ParamKind, SgdConfig};
pub use train::{
    evaluate, fit, fit_joint, predict, resample_descriptors, train_epoch, EpochMetrics, FitOptions, JointFitOptions,
    TrainOptions,
};

use crate::encoding::{
    encode_backward, encode_forward, normalize, normalize_backward, Codebook, DescriptorSet, ForwardCache,
    NormalizeMode, NormalizedEncoding, SmoothingFactors,
};
use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::rng;

/// Encoding layer plus classifier: everything above the projection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingHead {
    pub codebook: Codebook,
    pub smoothing: SmoothingFactors,
    pub w_fc: Mat,
    pub b_fc: Mat,
}

impl EncodingHead {
    fn init(r: &mut rng::SeededRng, d_proj: usize, k: usize, n_classes: usize) -> Result<Self> {
        let bound = 1.0 / (k as f64).sqrt();
        let codebook = Codebook::new(Mat::uniform_from(r, k, d_proj, -bound, bound)?)?;
        let smoothing = SmoothingFactors::new(Mat::uniform_from(r, 1, k, -bound, bound)?)?;
        let fc_bound = 1.0 / ((k * d_proj) as f64).sqrt();
        let w_fc = Mat::uniform_from(r, k * d_proj, n_classes, -fc_bound, fc_bound)?;
        Ok(EncodingHead {
            codebook,
            smoothing,
            w_fc,
            b_fc: Mat::zeros(1, n_classes),
        })
    }

    pub fn k(&self) -> usize {
        self.codebook.len()
    }

    pub fn n_classes(&self) -> usize {
        self.w_fc.cols()
    }

    fn check(&self, d_proj: usize) -> Result<()> {
        let k = self.codebook.len();
        if self.codebook.dim() != d_proj
            || self.smoothing.len() != k
            || self.w_fc.rows() != k * d_proj
            || self.b_fc.shape() != (1, self.w_fc.cols())
        {
            return Err(Error::shape(
                "encoding head",
                format!(
                    "codebook {}x{}, smoothing 1x{}, w_fc {}x{}, b_fc {}x{} do not chain from D_proj={d_proj}",
                    k,
                    self.codebook.dim(),
                    self.smoothing.len(),
                    self.w_fc.rows(),
                    self.w_fc.cols(),
                    self.b_fc.rows(),
                    self.b_fc.cols()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub codebook: Mat,
    pub smoothing: Mat,
    pub w_fc: Mat,
    pub b_fc: Mat,
}

impl HeadGrads {
    fn zeros_like(head: &EncodingHead) -> Self {
        HeadGrads {
            codebook: Mat::zeros(head.codebook.len(), head.codebook.dim()),
            smoothing: Mat::zeros(1, head.smoothing.len()),
            w_fc: Mat::zeros(head.w_fc.rows(), head.w_fc.cols()),
            b_fc: Mat::zeros(1, head.b_fc.cols()),
        }
    }

    fn tensors(&self) -> [&Mat; 4] {
        [&self.codebook, &self.smoothing, &self.w_fc, &self.b_fc]
    }

    fn tensors_mut(&mut self) -> [&mut Mat; 4] {
        [&mut self.codebook, &mut self.smoothing, &mut self.w_fc, &mut self.b_fc]
    }
}

/// Trainable parameters of the single-dataset network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub w_proj: Mat,
    pub b_proj: Mat,
    pub head: EncodingHead,
}

/// One gradient per parameter of [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub w_proj: Mat,
    pub b_proj: Mat,
    pub head: HeadGrads,
}

/// Intermediates kept by [`NetworkParams::forward`].
#[derive(Debug, Clone)]
pub struct NetworkCache {
    x: Mat,
    encoding: ForwardCache,
    normalized: NormalizedEncoding,
}

impl NetworkCache {
    pub fn encoding(&self) -> &ForwardCache {
        &self.encoding
    }

    pub fn normalized(&self) -> &NormalizedEncoding {
        &self.normalized
    }
}

pub(crate) const TENSOR_NAMES: [&str; 6] = ["w_proj", "b_proj", "codebook", "smoothing", "w_fc", "b_fc"];
pub(crate) const TENSOR_KINDS: [ParamKind; 6] = [
    ParamKind::Weight,
    ParamKind::Bias,
    ParamKind::Weight,
    ParamKind::Smoothing,
    ParamKind::Weight,
    ParamKind::Bias,
];

/// Uniform init: projection and classifier weights in `±1/sqrt(fan_in)`,
/// codewords and smoothing factors in `±1/sqrt(K)`, biases zero.
pub fn init_params(d_in: usize, d_proj: usize, k: usize, n_classes: usize, seed: u64) -> Result<NetworkParams> {
    NetworkParams::init(d_in, d_proj, k, n_classes, seed)
}

impl NetworkParams {
    pub fn init(d_in: usize, d_proj: usize, k: usize, n_classes: usize, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        Self::init_from(&mut r, d_in, d_proj, k, n_classes)
    }

    pub(crate) fn init_from(
        r: &mut rng::SeededRng,
        d_in: usize,
        d_proj: usize,
        k: usize,
        n_classes: usize,
    ) -> Result<Self> {
        if d_in == 0 || d_proj == 0 || k == 0 || n_classes == 0 {
            return Err(Error::Argument(format!(
                "network dims must all be >= 1, got D_in={d_in} D_proj={d_proj} K={k} classes={n_classes}"
            )));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        let w_proj = Mat::uniform_from(r, d_in, d_proj, -bound, bound)?;
        let head = EncodingHead::init(r, d_proj, k, n_classes)?;
        Ok(NetworkParams {
            w_proj,
            b_proj: Mat::zeros(1, d_proj),
            head,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w_proj.rows()
    }

    pub fn d_proj(&self) -> usize {
        self.w_proj.cols()
    }

    pub fn k(&self) -> usize {
        self.head.k()
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_classes()
    }

    /// Checks that the shape chain `D_in -> D_proj -> K*D_proj -> classes`
    /// holds.
    pub fn validate(&self) -> Result<()> {
        if self.b_proj.shape() != (1, self.w_proj.cols()) {
            return Err(Error::shape(
                "network",
                format!("b_proj {:?} for w_proj {:?}", self.b_proj.shape(), self.w_proj.shape()),
            ));
        }
        self.head.check(self.d_proj())
    }

    pub fn tensors(&self) -> [&Mat; 6] {
        [
            &self.w_proj,
            &self.b_proj,
            self.head.codebook.as_mat(),
            self.head.smoothing.as_mat(),
            &self.head.w_fc,
            &self.head.b_fc,
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Mat; 6] {
        let EncodingHead {
            codebook,
            smoothing,
            w_fc,
            b_fc,
        } = &mut self.head;
        [
            &mut self.w_proj,
            &mut self.b_proj,
            codebook.as_mut_mat(),
            smoothing.as_mut_mat(),
            w_fc,
            b_fc,
        ]
    }

    pub fn forward(&self, x: &DescriptorSet, mode: NormalizeMode) -> Result<(Mat, NetworkCache)> {
        forward_parts(&self.w_proj, &self.b_proj, &self.head, x, mode)
    }

    pub fn backward(&self, cache: &NetworkCache, dlogits: &Mat) -> Result<GradBuffer> {
        let (w_proj, b_proj, head) = backward_parts(&self.w_proj, &self.head, cache, dlogits)?;
        Ok(GradBuffer { w_proj, b_proj, head })
    }

    /// Identity projection with zero bias; `D_in` must equal `D_proj`.
    pub fn with_identity_projection(mut self) -> Result<Self> {
        if self.d_in() != self.d_proj() {
            return Err(Error::Argument(format!(
                "identity projection needs D_in == D_proj, got {} and {}",
                self.d_in(),
                self.d_proj()
            )));
        }
        self.w_proj = Mat::identity(self.d_in());
        self.b_proj = Mat::zeros(1, self.d_in());
        Ok(self)
    }
}

impl GradBuffer {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        GradBuffer {
            w_proj: Mat::zeros(params.w_proj.rows(), params.w_proj.cols()),
            b_proj: Mat::zeros(1, params.b_proj.cols()),
            head: HeadGrads::zeros_like(&params.head),
        }
    }

    pub fn tensors(&self) -> [&Mat; 6] {
        let [c, s, w, b] = self.head.tensors();
        [&self.w_proj, &self.b_proj, c, s, w, b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Mat; 6] {
        let [c, s, w, b] = self.head.tensors_mut();
        [&mut self.w_proj, &mut self.b_proj, c, s, w, b]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

pub(crate) fn forward_parts(
    w_proj: &Mat,
    b_proj: &Mat,
    head: &EncodingHead,
    x: &DescriptorSet,
    mode: NormalizeMode,
) -> Result<(Mat, NetworkCache)> {
    if x.dim() != w_proj.rows() {
        return Err(Error::shape(
            "forward",
            format!("descriptor dim {} for D_in={}", x.dim(), w_proj.rows()),
        ));
    }
    let projected = x.as_mat().matmul(w_proj)?.add_row_broadcast(b_proj)?;
    let projected = DescriptorSet::new(projected)?;
    let (e, encoding) = encode_forward(&projected, &head.codebook, &head.smoothing)?;
    let normalized = normalize(&e, mode);
    let logits = Mat::row_vector(&normalized.values)
        .matmul(&head.w_fc)?
        .add(&head.b_fc)?;
    Ok((
        logits,
        NetworkCache {
            x: x.as_mat().clone(),
            encoding,
            normalized,
        },
    ))
}

pub(crate) fn backward_parts(
    w_proj: &Mat,
    head: &EncodingHead,
    cache: &NetworkCache,
    dlogits: &Mat,
) -> Result<(Mat, Mat, HeadGrads)> {
    if dlogits.shape() != (1, head.n_classes()) {
        return Err(Error::shape(
            "backward",
            format!("dlogits {:?} for {} classes", dlogits.shape(), head.n_classes()),
        ));
    }
    let features = Mat::row_vector(&cache.normalized.values);
    let w_fc = features.t_matmul(dlogits)?;
    let b_fc = dlogits.clone();
    let d_features = dlogits.matmul_t(&head.w_fc)?;
    let de = normalize_backward(&cache.normalized, d_features.as_slice())?;
    let enc = encode_backward(&cache.encoding, &de)?;
    let dw_proj = cache.x.t_matmul(&enc.dx)?;
    debug_assert_eq!(dw_proj.shape(), w_proj.shape());
    let db_proj = enc.dx.colsum();
    Ok((
        dw_proj,
        db_proj,
        HeadGrads {
            codebook: enc.dc,
            smoothing: enc.ds,
            w_fc,
            b_fc,
        },
    ))
}

/// Max-shifted softmax cross-entropy. Returns the loss and
/// `dl/dlogits = softmax - onehot`.
pub fn softmax_xent(logits: &Mat, label: usize) -> Result<(f64, Mat)> {
    let n = logits.len();
    if logits.rows() != 1 || n == 0 {
        return Err(Error::shape(
            "softmax_xent",
            format!("logits must be 1xC, got {:?}", logits.shape()),
        ));
    }
    if label >= n {
        return Err(Error::Argument(format!("label {label} out of range for {n} classes")));
    }
    let z = logits.as_slice();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = crate::matrix::sum(&exps);
    let loss = total.ln() - (z[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    Ok((loss, Mat::row_vector(&grad)))
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &Mat) -> usize {
    let z = logits.as_slice();
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (NetworkParams, DescriptorSet) {
        let p = NetworkParams::init(3, 2, 2, 2, 17).unwrap();
        let x = DescriptorSet::new(Mat::seeded_uniform(4, 3, -1.0, 1.0, 18).unwrap()).unwrap();
        (p, x)
    }

    #[test]
    fn init_follows_bounds() {
        let p = NetworkParams::init(16, 8, 32, 5, 3).unwrap();
        let bound = 1.0 / 32f64.sqrt();
        assert!((bound - 0.17678).abs() < 1e-5);
        assert!(p.head.codebook.as_mat().as_slice().iter().all(|v| v.abs() <= bound));
        assert!(p.head.smoothing.as_slice().iter().all(|v| v.abs() <= bound));
        assert!(p.head.smoothing.as_slice().iter().any(|&v| v < 0.0));
        assert!(p.w_proj.max_abs() <= 0.25);
        assert!(p.head.w_fc.max_abs() <= 1.0 / 256f64.sqrt());
        assert_eq!(p.head.b_fc, Mat::zeros(1, 5));
        assert_eq!(p.b_proj, Mat::zeros(1, 8));
        assert_eq!(p, NetworkParams::init(16, 8, 32, 5, 3).unwrap());
        p.validate().unwrap();
        assert!(NetworkParams::init(0, 8, 32, 5, 3).is_err());
    }

    #[test]
    fn logits_have_fixed_length() {
        let p = NetworkParams::init(5, 3, 4, 6, 1).unwrap();
        for n in [1, 50, 500] {
            let x = DescriptorSet::new(Mat::seeded_uniform(n, 5, -1.0, 1.0, n as u64).unwrap()).unwrap();
            let (logits, _) = p.forward(&x, NormalizeMode::Global).unwrap();
            assert_eq!(logits.shape(), (1, 6));
        }
        let bad = DescriptorSet::new(Mat::zeros(3, 4)).unwrap();
        assert!(p.forward(&bad, NormalizeMode::Global).is_err());
    }

    #[test]
    fn forward_matches_stage_by_stage_oracle() {
        let (p, x) = tiny();
        let (logits, _) = p.forward(&x, NormalizeMode::Global).unwrap();

        // straight-line recomputation of the five stages
        let xm = x.as_mat();
        let (n, k, dp) = (4, 2, 2);
        let mut proj = vec![[0.0; 2]; n];
        for i in 0..n {
            for j in 0..dp {
                let mut acc = p.b_proj[(0, j)];
                for m in 0..3 {
                    acc += xm[(i, m)] * p.w_proj[(m, j)];
                }
                proj[i][j] = acc;
            }
        }
        let c = p.head.codebook.as_mat();
        let s = p.head.smoothing.as_slice();
        let mut e = [[0.0; 2]; 2];
        for i in 0..n {
            let mut w = [0.0; 2];
            for kk in 0..k {
                let d2: f64 = (0..dp).map(|j| (proj[i][j] - c[(kk, j)]).powi(2)).sum();
                w[kk] = (-s[kk] * d2).exp();
            }
            let total = w[0] + w[1];
            for kk in 0..k {
                for j in 0..dp {
                    e[kk][j] += w[kk] / total * (proj[i][j] - c[(kk, j)]);
                }
            }
        }
        let flat = [e[0][0], e[0][1], e[1][0], e[1][1]];
        let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
        for cls in 0..2 {
            let mut z = p.head.b_fc[(0, cls)];
            for (f, v) in flat.iter().enumerate() {
                z += v / norm * p.head.w_fc[(f, cls)];
            }
            assert!((z - logits[(0, cls)]).abs() < 1e-12, "{z} vs {}", logits[(0, cls)]);
        }
    }

    #[test]
    fn softmax_cases() {
        let (loss, _) = softmax_xent(&Mat::zeros(1, 4), 2).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!((loss - 1.386294).abs() < 1e-6);

        let (loss, grad) = softmax_xent(&Mat::from_rows(&[[1e3, 0.0]]), 0).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(grad.is_finite());

        assert!(matches!(softmax_xent(&Mat::zeros(1, 3), 3), Err(Error::Argument(_))));
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let z = Mat::seeded_uniform(1, 5, -3.0, 3.0, 4).unwrap();
        let (_, grad) = softmax_xent(&z, 3).unwrap();
        let h = 1e-6;
        for j in 0..5 {
            let mut plus = z.clone();
            plus[(0, j)] += h;
            let mut minus = z.clone();
            minus[(0, j)] -= h;
            let num = (softmax_xent(&plus, 3).unwrap().0 - softmax_xent(&minus, 3).unwrap().0) / (2.0 * h);
            let rel = (num - grad[(0, j)]).abs() / num.abs().max(grad[(0, j)].abs()).max(1e-10);
            assert!(rel < 1e-7, "coord {j}: {rel}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_buffer() {
        let (p, x) = tiny();
        let (_, cache) = p.forward(&x, NormalizeMode::Global).unwrap();
        let g = p.backward(&cache, &Mat::zeros(1, 2)).unwrap();
        assert!(g.tensors().iter().all(|t| t.max_abs() == 0.0));
        assert!(p.backward(&cache, &Mat::zeros(1, 3)).is_err());
    }

    #[test]
    fn identity_projection_reproduces_layer_gradients() {
        let p = NetworkParams::init(3, 3, 4, 3, 5)
            .unwrap()
            .with_identity_projection()
            .unwrap();
        let x = DescriptorSet::new(Mat::seeded_uniform(6, 3, -1.0, 1.0, 6).unwrap()).unwrap();
        let (logits, cache) = p.forward(&x, NormalizeMode::Global).unwrap();
        let (_, dlogits) = softmax_xent(&logits, 1).unwrap();
        let g = p.backward(&cache, &dlogits).unwrap();

        let (e, enc_cache) = encode_forward(&x, &p.head.codebook, &p.head.smoothing).unwrap();
        let norm = normalize(&e, NormalizeMode::Global);
        let d_features = dlogits.matmul_t(&p.head.w_fc).unwrap();
        let de = normalize_backward(&norm, d_features.as_slice()).unwrap();
        let direct = encode_backward(&enc_cache, &de).unwrap();
        assert_eq!(g.head.codebook, direct.dc);
        assert_eq!(g.head.smoothing, direct.ds);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&Mat::from_rows(&[[1.0, 3.0, 3.0]])), 1);
        assert_eq!(argmax(&Mat::zeros(1, 4)), 0);
    }
}
