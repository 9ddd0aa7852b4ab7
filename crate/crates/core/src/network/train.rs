use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::joint::{joint_train_epoch, JointNetwork};
use super::optim::{sgd_step, OptimizerState, SgdConfig};
use super::{argmax, softmax_xent, GradBuffer, NetworkParams};
use crate::data::DescriptorDataset;
use crate::encoding::{DescriptorSet, NormalizeMode};
use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::rng::{self, derive_seed, SeededRng};

/// Per-run switches that are not hyperparameters of the update itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub batch: usize,
    pub normalize: NormalizeMode,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch: 8,
            normalize: NormalizeMode::Global,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Descriptors per sample this epoch; `None` keeps each sample's own count.
    pub descriptor_count: Option<usize>,
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Draws `n` descriptors from `x`: a random subset when `n <= N`, otherwise
/// every row followed by `n - N` rows drawn with replacement.
pub fn resample_descriptors(x: &DescriptorSet, n: usize, r: &mut SeededRng) -> Result<DescriptorSet> {
    if n == 0 {
        return Err(Error::Argument("descriptor count must be >= 1".into()));
    }
    let total = x.len();
    let rows: Vec<usize> = if n <= total {
        index::sample(r, total, n).into_vec()
    } else {
        let mut rows: Vec<usize> = (0..total).collect();
        rows.extend((0..n - total).map(|_| r.random_range(0..total)));
        rows
    };
    let src = x.as_mat();
    let mut data = Vec::with_capacity(n * x.dim());
    for i in rows {
        data.extend_from_slice(src.row(i));
    }
    DescriptorSet::new(Mat::from_vec(n, x.dim(), data)?)
}

/// Shuffled mini-batches over one dataset, with descriptor resampling drawn
/// from a stream separate from the shuffle.
pub(crate) struct BatchStream<'a> {
    dataset: &'a DescriptorDataset,
    order: Vec<usize>,
    pos: usize,
    shuffle_rng: SeededRng,
    resample_rng: SeededRng,
    descriptor_count: Option<usize>,
}

impl<'a> BatchStream<'a> {
    pub(crate) fn new(dataset: &'a DescriptorDataset, seed: u64, slot: u64, descriptor_count: Option<usize>) -> Self {
        let mut shuffle_rng = rng::seeded(derive_seed(seed, 2 * slot));
        let resample_rng = rng::seeded(derive_seed(seed, 2 * slot + 1));
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut shuffle_rng);
        BatchStream {
            dataset,
            order,
            pos: 0,
            shuffle_rng,
            resample_rng,
            descriptor_count,
        }
    }

    /// Next batch of (descriptors, label); `None` once one pass is done.
    pub(crate) fn next_batch(&mut self, batch: usize) -> Result<Option<Vec<(DescriptorSet, usize)>>> {
        if self.pos >= self.order.len() {
            return Ok(None);
        }
        let end = (self.pos + batch).min(self.order.len());
        let mut out = Vec::with_capacity(end - self.pos);
        for &idx in &self.order[self.pos..end] {
            let s = &self.dataset.samples()[idx];
            let x = match self.descriptor_count {
                Some(n) => resample_descriptors(&s.x, n, &mut self.resample_rng)?,
                None => s.x.clone(),
            };
            out.push((x, s.label));
        }
        self.pos = end;
        Ok(Some(out))
    }

    /// Like `next_batch` but starts a freshly shuffled pass when exhausted.
    pub(crate) fn next_batch_cycling(&mut self, batch: usize) -> Result<Vec<(DescriptorSet, usize)>> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.shuffle_rng);
            self.pos = 0;
        }
        Ok(self.next_batch(batch)?.expect("non-empty dataset"))
    }
}

/// Running loss/accuracy over the samples seen in an epoch.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct Tally {
    loss: f64,
    correct: usize,
    seen: usize,
}

impl Tally {
    pub(crate) fn finish(&self, epoch: usize, lr: f64, descriptor_count: Option<usize>) -> EpochMetrics {
        let seen = self.seen.max(1) as f64;
        EpochMetrics {
            epoch,
            learning_rate: lr,
            descriptor_count,
            mean_loss: self.loss / seen,
            accuracy: self.correct as f64 / seen,
        }
    }
}

/// Forward and backward over one batch; returns the batch-mean gradient.
pub(crate) fn batch_gradient(
    w_proj: &Mat,
    b_proj: &Mat,
    head: &super::EncodingHead,
    batch: &[(DescriptorSet, usize)],
    normalize: NormalizeMode,
    want_grads: bool,
    tally: &mut Tally,
) -> Result<Option<(Mat, Mat, super::HeadGrads)>> {
    let mut acc: Option<(Mat, Mat, super::HeadGrads)> = None;
    for (x, label) in batch {
        let (logits, cache) = super::forward_parts(w_proj, b_proj, head, x, normalize)?;
        let (loss, dlogits) = softmax_xent(&logits, *label)?;
        tally.loss += loss;
        tally.seen += 1;
        if argmax(&logits) == *label {
            tally.correct += 1;
        }
        if !want_grads {
            continue;
        }
        let (dw, db, dh) = super::backward_parts(w_proj, head, &cache, &dlogits)?;
        match acc.as_mut() {
            None => acc = Some((dw, db, dh)),
            Some((aw, ab, ah)) => {
                aw.axpy(1.0, &dw)?;
                ab.axpy(1.0, &db)?;
                for (a, b) in ah.tensors_mut().into_iter().zip(dh.tensors()) {
                    a.axpy(1.0, b)?;
                }
            }
        }
    }
    if let Some((aw, ab, ah)) = acc.as_mut() {
        let inv = 1.0 / batch.len() as f64;
        for t in [aw, ab].into_iter().chain(ah.tensors_mut()) {
            for v in t.as_mut_slice() {
                *v *= inv;
            }
        }
    }
    Ok(acc)
}

/// One pass over `dataset` in seeded shuffled order, one SGD step per
/// mini-batch with the batch-mean gradient. With `descriptor_count` set, each
/// sample is resampled to that many descriptors first.
pub fn train_epoch(
    params: &mut NetworkParams,
    dataset: &DescriptorDataset,
    state: &mut OptimizerState,
    opts: &TrainOptions,
    descriptor_count: Option<usize>,
    seed: u64,
) -> Result<EpochMetrics> {
    if dataset.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }
    if dataset.dim() != params.d_in() {
        return Err(Error::shape(
            "train_epoch",
            format!("dataset D={} for network D_in={}", dataset.dim(), params.d_in()),
        ));
    }
    if opts.batch == 0 {
        return Err(Error::Argument("batch size must be >= 1".into()));
    }
    let mut stream = BatchStream::new(dataset, seed, 0, descriptor_count);
    let mut tally = Tally::default();
    while let Some(batch) = stream.next_batch(opts.batch)? {
        let grads = batch_gradient(
            &params.w_proj,
            &params.b_proj,
            &params.head,
            &batch,
            opts.normalize,
            true,
            &mut tally,
        )?
        .expect("non-empty batch");
        let buffer = GradBuffer {
            w_proj: grads.0,
            b_proj: grads.1,
            head: grads.2,
        };
        sgd_step(params, &buffer, state)?;
    }
    Ok(tally.finish(0, state.learning_rate, descriptor_count))
}

/// Predicted class per sample, using each sample's full descriptor set.
pub fn predict(params: &NetworkParams, dataset: &DescriptorDataset, normalize: NormalizeMode) -> Result<Vec<usize>> {
    dataset
        .samples()
        .iter()
        .map(|s| params.forward(&s.x, normalize).map(|(z, _)| argmax(&z)))
        .collect()
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(params: &NetworkParams, dataset: &DescriptorDataset, normalize: NormalizeMode) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Argument("cannot evaluate on an empty dataset".into()));
    }
    let preds = predict(params, dataset, normalize)?;
    let correct = preds
        .iter()
        .zip(dataset.samples())
        .filter(|(p, s)| **p == s.label)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub epochs: usize,
    pub sgd: SgdConfig,
    pub normalize: NormalizeMode,
    /// Descriptor counts cycled per epoch; empty keeps native counts.
    pub size_cycle: Vec<usize>,
    pub seed: u64,
    /// Keep the codebook fixed (used with `K = 1` and a zero codebook to get
    /// plain average pooling).
    pub freeze_codebook: bool,
}

impl FitOptions {
    pub fn new(epochs: usize, sgd: SgdConfig, seed: u64) -> Self {
        FitOptions {
            epochs,
            sgd,
            normalize: NormalizeMode::Global,
            size_cycle: Vec::new(),
            seed,
            freeze_codebook: false,
        }
    }

    pub(crate) fn size_for(cycle: &[usize], epoch: usize) -> Option<usize> {
        if cycle.is_empty() {
            None
        } else {
            Some(cycle[epoch % cycle.len()])
        }
    }
}

/// Runs `opts.epochs` epochs with the step schedule and size cycle, returning
/// per-epoch metrics.
pub fn fit(params: &mut NetworkParams, train: &DescriptorDataset, opts: &FitOptions) -> Result<Vec<EpochMetrics>> {
    opts.sgd.validate()?;
    let mut state = OptimizerState::new(opts.sgd.clone(), params);
    if opts.freeze_codebook {
        state.freeze("codebook");
    }
    let train_opts = TrainOptions {
        batch: opts.sgd.batch,
        normalize: opts.normalize,
    };
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        state.learning_rate = opts.sgd.lr_at(epoch);
        let size = FitOptions::size_for(&opts.size_cycle, epoch);
        let mut m = train_epoch(
            params,
            train,
            &mut state,
            &train_opts,
            size,
            derive_seed(opts.seed, epoch as u64),
        )?;
        m.epoch = epoch;
        history.push(m);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointFitOptions {
    pub base: FitOptions,
    pub size_cycle_b: Vec<usize>,
    pub loss_weights: (f64, f64),
}

/// Joint counterpart of [`fit`]; returns per-epoch metrics for both heads.
pub fn fit_joint(
    net: &mut JointNetwork,
    train_a: &DescriptorDataset,
    train_b: &DescriptorDataset,
    opts: &JointFitOptions,
) -> Result<Vec<(EpochMetrics, EpochMetrics)>> {
    opts.base.sgd.validate()?;
    let mut state = net.optimizer(opts.base.sgd.clone());
    if opts.base.freeze_codebook {
        state.freeze("a.codebook");
        state.freeze("b.codebook");
    }
    let mut history = Vec::with_capacity(opts.base.epochs);
    for epoch in 0..opts.base.epochs {
        state.learning_rate = opts.base.sgd.lr_at(epoch);
        let sizes = (
            FitOptions::size_for(&opts.base.size_cycle, epoch),
            FitOptions::size_for(&opts.size_cycle_b, epoch),
        );
        let (mut a, mut b) = joint_train_epoch(
            net,
            train_a,
            train_b,
            &mut state,
            &TrainOptions {
                batch: opts.base.sgd.batch,
                normalize: opts.base.normalize,
            },
            sizes,
            opts.loss_weights,
            derive_seed(opts.base.seed, epoch as u64),
        )?;
        a.epoch = epoch;
        b.epoch = epoch;
        history.push((a, b));
    }
    Ok(history)
}
