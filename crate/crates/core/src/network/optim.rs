use serde::{Deserialize, Serialize};

use super::{GradBuffer, NetworkParams, TENSOR_KINDS, TENSOR_NAMES};
use crate::error::{Error, Result};
use crate::matrix::Mat;

/// Role of a tensor, which decides whether weight decay touches it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Smoothing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Epochs (0-based) at which the learning rate is divided by ten.
    #[serde(default)]
    pub lr_milestones: Vec<usize>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Apply weight decay to the smoothing factors as well.
    #[serde(default)]
    pub decay_smoothing: bool,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_batch() -> usize {
    8
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            lr_milestones: Vec::new(),
            batch: default_batch(),
            decay_smoothing: false,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Argument(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !self.momentum.is_finite() || !self.weight_decay.is_finite() {
            return Err(Error::Argument("momentum and weight decay must be finite".into()));
        }
        if self.batch == 0 {
            return Err(Error::Argument("batch size must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        let mut lr = self.lr;
        for _ in 0..drops {
            lr /= 10.0;
        }
        lr
    }
}

/// Momentum buffers plus the hyperparameters of the update
/// `v <- momentum * v + grad + decay * param; param <- param - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: SgdConfig,
    /// Learning rate used by the next step; the trainer sets it per epoch.
    pub learning_rate: f64,
    pub frozen: Vec<String>,
    velocity: Vec<Mat>,
    names: Vec<String>,
}

impl OptimizerState {
    pub fn new(config: SgdConfig, params: &NetworkParams) -> Self {
        let shapes: Vec<(String, (usize, usize))> = TENSOR_NAMES
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| (n.to_string(), t.shape()))
            .collect();
        Self::for_tensors(config, &shapes)
    }

    pub fn for_tensors(config: SgdConfig, tensors: &[(String, (usize, usize))]) -> Self {
        OptimizerState {
            learning_rate: config.lr,
            config,
            frozen: Vec::new(),
            velocity: tensors.iter().map(|(_, (r, c))| Mat::zeros(*r, *c)).collect(),
            names: tensors.iter().map(|(n, _)| n.clone()).collect(),
        }
    }

    pub fn velocity(&self) -> &[Mat] {
        &self.velocity
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.push(name.to_string());
    }

    /// One update over parallel lists of parameters, their kinds and their
    /// gradients, in the order the state was built with.
    pub(crate) fn apply(&mut self, params: Vec<&mut Mat>, kinds: &[ParamKind], grads: Vec<&Mat>) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::shape(
                "sgd_step",
                format!(
                    "{} params / {} grads for {} velocity buffers",
                    params.len(),
                    grads.len(),
                    self.velocity.len()
                ),
            ));
        }
        let lr = self.learning_rate;
        let momentum = self.config.momentum;
        for (((p, g), v), (kind, name)) in params
            .into_iter()
            .zip(grads)
            .zip(self.velocity.iter_mut())
            .zip(kinds.iter().zip(&self.names))
        {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!(
                        "{name}: param {:?}, grad {:?}, velocity {:?}",
                        p.shape(),
                        g.shape(),
                        v.shape()
                    ),
                ));
            }
            if self.frozen.iter().any(|f| f == name) {
                continue;
            }
            let decay = match kind {
                ParamKind::Weight => self.config.weight_decay,
                ParamKind::Smoothing if self.config.decay_smoothing => self.config.weight_decay,
                _ => 0.0,
            };
            for ((pv, &gv), vv) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(v.as_mut_slice()) {
                *vv = momentum * *vv + gv + decay * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

pub fn sgd_step(params: &mut NetworkParams, grads: &GradBuffer, state: &mut OptimizerState) -> Result<()> {
    state.apply(params.tensors_mut().into(), &TENSOR_KINDS, grads.tensors().into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(lr: f64, momentum: f64, wd: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum,
            weight_decay: wd,
            ..SgdConfig::default()
        }
    }

    fn grads_from(params: &NetworkParams, seed: u64) -> GradBuffer {
        let mut g = GradBuffer::zeros_like(params);
        for (i, t) in g.tensors_mut().into_iter().enumerate() {
            let (r, c) = t.shape();
            *t = Mat::seeded_uniform(r, c, -1.0, 1.0, seed + i as u64).unwrap();
        }
        g
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = NetworkParams::init(3, 2, 2, 2, 1).unwrap();
        let before = p.clone();
        let g = grads_from(&p, 10);
        let mut st = OptimizerState::new(plain(0.1, 0.0, 0.0), &p);
        sgd_step(&mut p, &g, &mut st).unwrap();
        for ((a, b), gr) in p.tensors().iter().zip(before.tensors()).zip(g.tensors()) {
            for ((&x, &y), &gv) in a.as_slice().iter().zip(b.as_slice()).zip(gr.as_slice()) {
                assert_eq!(x, y - 0.1 * gv);
            }
        }
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = NetworkParams::init(3, 2, 2, 2, 1).unwrap();
        let before = p.clone();
        let g = GradBuffer::zeros_like(&p);
        let mut st = OptimizerState::new(plain(0.1, 0.9, 0.0), &p);
        sgd_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_on_quadratic_matches_hand_iteration() {
        // loss x^2/2 on a single scalar, stored in b_fc
        let mut p = NetworkParams::init(1, 1, 1, 1, 0).unwrap();
        p.head.b_fc = Mat::from_rows(&[[1.0]]);
        let mut st = OptimizerState::new(plain(0.1, 0.9, 0.0), &p);
        for _ in 0..2 {
            let mut g = GradBuffer::zeros_like(&p);
            g.head.b_fc = p.head.b_fc.clone();
            sgd_step(&mut p, &g, &mut st).unwrap();
        }
        // v1 = 1, x1 = 0.9; v2 = 0.9 + 0.9 = 1.8, x2 = 0.9 - 0.18 = 0.72
        let (mut x, mut v) = (1.0f64, 0.0f64);
        for _ in 0..2 {
            v = 0.9 * v + x;
            x -= 0.1 * v;
        }
        assert_eq!(p.head.b_fc[(0, 0)], x);
        assert!((x - 0.72).abs() < 1e-15);
    }

    #[test]
    fn decay_skips_biases_and_smoothing() {
        let mut p = NetworkParams::init(2, 2, 2, 2, 4).unwrap();
        p.b_proj = Mat::filled(1, 2, 1.0);
        p.head.b_fc = Mat::filled(1, 2, 1.0);
        let before = p.clone();
        let mut st = OptimizerState::new(plain(0.5, 0.0, 0.1), &p);
        let zero = GradBuffer::zeros_like(&p);
        sgd_step(&mut p, &zero, &mut st).unwrap();
        assert_eq!(p.b_proj, before.b_proj);
        assert_eq!(p.head.b_fc, before.head.b_fc);
        assert_eq!(p.head.smoothing, before.head.smoothing);
        let decayed = before.w_proj.map(|w| w - 0.5 * (0.1 * w));
        assert_eq!(p.w_proj, decayed);

        let mut st = OptimizerState::new(
            SgdConfig {
                decay_smoothing: true,
                ..plain(0.5, 0.0, 0.1)
            },
            &before,
        );
        let mut q = before.clone();
        let zero = GradBuffer::zeros_like(&q);
        sgd_step(&mut q, &zero, &mut st).unwrap();
        assert_ne!(q.head.smoothing, before.head.smoothing);
    }

    #[test]
    fn frozen_tensors_do_not_move() {
        let mut p = NetworkParams::init(2, 2, 2, 2, 4).unwrap();
        let before = p.clone();
        let g = grads_from(&p, 3);
        let mut st = OptimizerState::new(plain(0.5, 0.9, 0.1), &p);
        st.freeze("codebook");
        sgd_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p.head.codebook, before.head.codebook);
        assert_ne!(p.w_proj, before.w_proj);
    }

    #[test]
    fn milestones_divide_by_ten() {
        let c = SgdConfig {
            lr: 0.1,
            lr_milestones: vec![10, 20],
            ..SgdConfig::default()
        };
        assert_eq!(c.lr_at(0), 0.1);
        assert_eq!(c.lr_at(10), 0.1 / 10.0);
        assert_eq!(c.lr_at(25), 0.1 / 10.0 / 10.0);
    }
}
