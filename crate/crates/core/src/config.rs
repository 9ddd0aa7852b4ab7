//! Run configuration, read from JSON. Unknown keys are errors.
//!
//! ```json
//! {
//!   "model": { "D_in": 8, "D_proj": 8, "K": 8, "n_classes": 4 },
//!   "optim": { "lr": 0.01, "momentum": 0.9, "weight_decay": 0.0001,
//!              "lr_milestones": [35], "batch": 8 },
//!   "schedule": { "epochs": 50, "size_cycle": [] },
//!   "joint": { "enabled": false },
//!   "seed": 0,
//!   "normalize": "global"
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoding::{Codebook, NormalizeMode, SmoothingFactors};
use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::network::{EncodingHead, FitOptions, JointFitOptions, JointNetwork, NetworkParams, SgdConfig};

/// What sits between the projection and the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Learnable residual encoding.
    #[default]
    Encoding,
    /// A single codeword frozen at zero: sum pooling, i.e. the normalized
    /// average. Requires `K = 1`.
    Avg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "D_in")]
    pub d_in: usize,
    #[serde(rename = "D_proj")]
    pub d_proj: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub pooling: Pooling,
    /// Start every smoothing factor at this value instead of drawing them
    /// uniformly in `+-1/sqrt(K)`.
    #[serde(default)]
    pub smoothing_init: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    /// Descriptors per sample, cycled per epoch; empty keeps native counts.
    #[serde(default)]
    pub size_cycle: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    #[serde(default)]
    pub enabled: bool,
    /// Second dataset; relative paths resolve against the config file.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default = "default_loss_weights")]
    pub loss_weights: [f64; 2],
    /// Size cycle for the second dataset; empty keeps native counts.
    #[serde(default)]
    pub size_cycle: Vec<usize>,
}

fn default_loss_weights() -> [f64; 2] {
    [1.0, 1.0]
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            enabled: false,
            data: None,
            loss_weights: default_loss_weights(),
            size_cycle: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: SgdConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub joint: JointConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub normalize: NormalizeMode,
}

impl RunConfig {
    /// Reads, parses and validates a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        if let Some(data) = &cfg.joint.data {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.joint.data = Some(dir.join(data));
                }
            }
        }
        cfg.validate(&path.display().to_string())?;
        Ok(cfg)
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config {
            path: origin.to_string(),
            detail: e.to_string(),
        })
    }

    /// Freshly initialized network with the config's pooling and smoothing
    /// choices applied.
    pub fn init_network(&self) -> Result<NetworkParams> {
        let m = &self.model;
        let mut params = NetworkParams::init(m.d_in, m.d_proj, m.k, m.n_classes, self.seed)?;
        self.prepare_head(&mut params.head)?;
        Ok(params)
    }

    /// Joint counterpart of [`RunConfig::init_network`]; head B gets
    /// `classes_b` outputs.
    pub fn init_joint(&self, classes_b: usize) -> Result<JointNetwork> {
        let m = &self.model;
        let mut net = JointNetwork::init(m.d_in, m.d_proj, m.k, m.n_classes, classes_b, self.seed)?;
        for head in &mut net.heads {
            self.prepare_head(head)?;
        }
        Ok(net)
    }

    fn prepare_head(&self, head: &mut EncodingHead) -> Result<()> {
        let m = &self.model;
        if m.pooling == Pooling::Avg {
            head.codebook = Codebook::new(Mat::zeros(1, m.d_proj))?;
        }
        if let Some(beta) = m.smoothing_init {
            head.smoothing = SmoothingFactors::uniform(m.k, beta)?;
        }
        Ok(())
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            epochs: self.schedule.epochs,
            sgd: self.optim.clone(),
            normalize: self.normalize,
            size_cycle: self.schedule.size_cycle.clone(),
            seed: self.seed,
            freeze_codebook: self.model.pooling == Pooling::Avg,
        }
    }

    pub fn joint_fit_options(&self) -> JointFitOptions {
        JointFitOptions {
            base: self.fit_options(),
            size_cycle_b: self.joint.size_cycle.clone(),
            loss_weights: (self.joint.loss_weights[0], self.joint.loss_weights[1]),
        }
    }

    pub fn validate(&self, origin: &str) -> Result<()> {
        let fail = |detail: String| {
            Err(Error::Config {
                path: origin.to_string(),
                detail,
            })
        };
        let m = &self.model;
        if m.d_in == 0 || m.d_proj == 0 || m.k == 0 || m.n_classes == 0 {
            return fail("model dimensions must all be >= 1".into());
        }
        if m.pooling == Pooling::Avg && m.k != 1 {
            return fail(format!("pooling \"avg\" needs K = 1, got K = {}", m.k));
        }
        if m.smoothing_init.is_some_and(|b| !b.is_finite()) {
            return fail("model.smoothing_init must be finite".into());
        }
        if let Err(e) = self.optim.validate() {
            return fail(e.to_string());
        }
        if self.schedule.epochs == 0 {
            return fail("schedule.epochs must be >= 1".into());
        }
        if self.schedule.size_cycle.contains(&0) || self.joint.size_cycle.contains(&0) {
            return fail("size_cycle entries must be >= 1".into());
        }
        if self.joint.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return fail("joint.loss_weights must be finite and >= 0".into());
        }
        if self.joint.enabled {
            match &self.joint.data {
                Some(p) if !p.exists() => return fail(format!("joint.data {} does not exist", p.display())),
                _ => {}
            }
        }
        Ok(())
    }
}
