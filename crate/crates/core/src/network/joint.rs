//! Two datasets, one shared projection, one encoding head each. Every step
//! draws a batch from each dataset, weights the two batch-mean losses, sums
//! the projection gradients from both heads and updates each head only with
//! its own dataset's gradient.

use super::optim::{OptimizerState, ParamKind, SgdConfig};
use super::train::{batch_gradient, BatchStream, EpochMetrics, Tally, TrainOptions};
use super::{EncodingHead, HeadGrads, NetworkParams};
use crate::data::DescriptorDataset;
use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::rng::{self, derive_seed};

#[derive(Debug, Clone, PartialEq)]
pub struct JointNetwork {
    pub w_proj: Mat,
    pub b_proj: Mat,
    pub heads: [EncodingHead; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointGrads {
    pub w_proj: Mat,
    pub b_proj: Mat,
    pub heads: [HeadGrads; 2],
}

pub(crate) const JOINT_TENSOR_NAMES: [&str; 10] = [
    "w_proj",
    "b_proj",
    "a.codebook",
    "a.smoothing",
    "a.w_fc",
    "a.b_fc",
    "b.codebook",
    "b.smoothing",
    "b.w_fc",
    "b.b_fc",
];

const JOINT_TENSOR_KINDS: [ParamKind; 10] = [
    ParamKind::Weight,
    ParamKind::Bias,
    ParamKind::Weight,
    ParamKind::Smoothing,
    ParamKind::Weight,
    ParamKind::Bias,
    ParamKind::Weight,
    ParamKind::Smoothing,
    ParamKind::Weight,
    ParamKind::Bias,
];

impl JointNetwork {
    /// The projection and head A are drawn exactly as
    /// `NetworkParams::init(d_in, d_proj, k, classes_a, seed)` would draw
    /// them; head B comes from a derived stream.
    pub fn init(d_in: usize, d_proj: usize, k: usize, classes_a: usize, classes_b: usize, seed: u64) -> Result<Self> {
        let single = NetworkParams::init(d_in, d_proj, k, classes_a, seed)?;
        if classes_b == 0 {
            return Err(Error::Argument("head B needs at least one class".into()));
        }
        let mut r = rng::seeded(derive_seed(seed, 0xB));
        let head_b = EncodingHead::init(&mut r, d_proj, k, classes_b)?;
        Ok(JointNetwork {
            w_proj: single.w_proj,
            b_proj: single.b_proj,
            heads: [single.head, head_b],
        })
    }

    pub fn d_in(&self) -> usize {
        self.w_proj.rows()
    }

    pub fn validate(&self) -> Result<()> {
        for h in &self.heads {
            self.head_params_ref(h).validate()?;
        }
        Ok(())
    }

    fn head_params_ref(&self, head: &EncodingHead) -> NetworkParams {
        NetworkParams {
            w_proj: self.w_proj.clone(),
            b_proj: self.b_proj.clone(),
            head: head.clone(),
        }
    }

    /// Single-dataset view of head `which` (0 = A, 1 = B) over the shared
    /// projection.
    pub fn head_params(&self, which: usize) -> NetworkParams {
        self.head_params_ref(&self.heads[which])
    }

    pub fn tensors(&self) -> [&Mat; 10] {
        let [a, b] = &self.heads;
        [
            &self.w_proj,
            &self.b_proj,
            a.codebook.as_mat(),
            a.smoothing.as_mat(),
            &a.w_fc,
            &a.b_fc,
            b.codebook.as_mat(),
            b.smoothing.as_mat(),
            &b.w_fc,
            &b.b_fc,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let [a, b] = &mut self.heads;
        vec![
            &mut self.w_proj,
            &mut self.b_proj,
            a.codebook.as_mut_mat(),
            a.smoothing.as_mut_mat(),
            &mut a.w_fc,
            &mut a.b_fc,
            b.codebook.as_mut_mat(),
            b.smoothing.as_mut_mat(),
            &mut b.w_fc,
            &mut b.b_fc,
        ]
    }

    pub fn optimizer(&self, config: SgdConfig) -> OptimizerState {
        let shapes: Vec<(String, (usize, usize))> = JOINT_TENSOR_NAMES
            .iter()
            .zip(self.tensors())
            .map(|(n, t)| (n.to_string(), t.shape()))
            .collect();
        OptimizerState::for_tensors(config, &shapes)
    }

    pub fn step(&mut self, grads: &JointGrads, state: &mut OptimizerState) -> Result<()> {
        let [ga, gb] = &grads.heads;
        let g: Vec<&Mat> = [&grads.w_proj, &grads.b_proj]
            .into_iter()
            .chain(ga.tensors())
            .chain(gb.tensors())
            .collect();
        state.apply(self.tensors_mut(), &JOINT_TENSOR_KINDS, g)
    }
}

fn check_dataset(net: &JointNetwork, ds: &DescriptorDataset, which: usize) -> Result<()> {
    let name = ["A", "B"][which];
    if ds.is_empty() {
        return Err(Error::Argument(format!("joint training: dataset {name} is empty")));
    }
    if ds.dim() != net.d_in() {
        return Err(Error::shape(
            "joint_train_epoch",
            format!(
                "dataset {name} has D={} but the shared projection expects {}",
                ds.dim(),
                net.d_in()
            ),
        ));
    }
    if ds.n_classes() != net.heads[which].n_classes() {
        return Err(Error::shape(
            "joint_train_epoch",
            format!(
                "dataset {name} has {} classes but head {name} has {}",
                ds.n_classes(),
                net.heads[which].n_classes()
            ),
        ));
    }
    Ok(())
}

fn weighted(g: Option<HeadGrads>, w: f64, like: &EncodingHead) -> HeadGrads {
    match g {
        Some(mut g) if w != 0.0 => {
            if w != 1.0 {
                for t in g.tensors_mut() {
                    for v in t.as_mut_slice() {
                        *v *= w;
                    }
                }
            }
            g
        }
        _ => HeadGrads::zeros_like(like),
    }
}

/// One joint epoch. Its length is one pass over dataset A; dataset B is
/// cycled, reshuffling on every wrap. `sizes` gives the per-dataset
/// descriptor counts for this epoch. A head whose loss weight is zero still
/// reports metrics but contributes no gradient.
#[allow(clippy::too_many_arguments)]
pub fn joint_train_epoch(
    net: &mut JointNetwork,
    dataset_a: &DescriptorDataset,
    dataset_b: &DescriptorDataset,
    state: &mut OptimizerState,
    opts: &TrainOptions,
    sizes: (Option<usize>, Option<usize>),
    loss_weights: (f64, f64),
    seed: u64,
) -> Result<(EpochMetrics, EpochMetrics)> {
    check_dataset(net, dataset_a, 0)?;
    check_dataset(net, dataset_b, 1)?;
    if opts.batch == 0 {
        return Err(Error::Argument("batch size must be >= 1".into()));
    }
    let (wa, wb) = loss_weights;
    let mut stream_a = BatchStream::new(dataset_a, seed, 0, sizes.0);
    let mut stream_b = BatchStream::new(dataset_b, seed, 1, sizes.1);
    let (mut tally_a, mut tally_b) = (Tally::default(), Tally::default());

    while let Some(batch_a) = stream_a.next_batch(opts.batch)? {
        let batch_b = stream_b.next_batch_cycling(opts.batch)?;
        let ga = batch_gradient(
            &net.w_proj,
            &net.b_proj,
            &net.heads[0],
            &batch_a,
            opts.normalize,
            wa != 0.0,
            &mut tally_a,
        )?;
        let gb = batch_gradient(
            &net.w_proj,
            &net.b_proj,
            &net.heads[1],
            &batch_b,
            opts.normalize,
            wb != 0.0,
            &mut tally_b,
        )?;

        let mut w_proj = Mat::zeros(net.w_proj.rows(), net.w_proj.cols());
        let mut b_proj = Mat::zeros(1, net.b_proj.cols());
        let mut first = true;
        let mut head_grads = [None, None];
        for (slot, (g, w)) in [(ga, wa), (gb, wb)].into_iter().enumerate() {
            let Some((dw, db, dh)) = g else { continue };
            if w == 0.0 {
                continue;
            }
            if first {
                w_proj = if w == 1.0 { dw } else { dw.scale(w) };
                b_proj = if w == 1.0 { db } else { db.scale(w) };
                first = false;
            } else {
                w_proj.axpy(w, &dw)?;
                b_proj.axpy(w, &db)?;
            }
            head_grads[slot] = Some(dh);
        }
        let [ha, hb] = head_grads;
        let grads = JointGrads {
            w_proj,
            b_proj,
            heads: [weighted(ha, wa, &net.heads[0]), weighted(hb, wb, &net.heads[1])],
        };
        net.step(&grads, state)?;
    }
    let lr = state.learning_rate;
    Ok((tally_a.finish(0, lr, sizes.0), tally_b.finish(0, lr, sizes.1)))
}
