use serde::{Deserialize, Serialize};

use crate::data::SplitProtocol;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::LossWeights;

/// Everything that determines a training run. Field names double as config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Inner-loop learning rate.
    pub alpha: f64,
    /// Outer-loop Adam learning rate for the model parameters.
    pub beta: f64,
    /// Outer-loop Adam learning rate for FT parameters and regulariser weights.
    pub beta_hyper: f64,
    pub inner_steps: usize,
    pub meta_batch: usize,
    pub epochs: usize,
    /// Epochs `0..warmup_epochs` train the plain model without episodes.
    pub warmup_epochs: usize,
    pub lambda1_start: f64,
    pub lambda1_end: f64,
    pub lambda1_ramp_last_epochs: usize,
    /// `weights.lambda1` is replaced each epoch by the schedule.
    pub weights: LossWeights,
    pub d: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub channels: Vec<usize>,
    pub seed: u64,
    pub no_ft: bool,
    pub no_regd: bool,
    pub fixed_ft: bool,
    pub no_meta: bool,
    pub first_order: bool,
    /// Normalize each inner step per coordinate instead of a plain gradient step.
    pub adaptive_inner: bool,
    pub photo_to_sketch: bool,
    /// Uniform negatives from other tasks instead of nearest ones.
    pub random_negatives: bool,
    /// Hard negatives are drawn among this many nearest other-task photos.
    pub hard_negative_pool: usize,
    pub warmup_lr: f64,
    pub warmup_batch: usize,
    /// Outer steps per meta epoch; defaults to `ceil(tasks / meta_batch)`.
    pub steps_per_epoch: Option<usize>,
    pub clip_norm: f64,
    pub psi_init: f64,
    pub ft_init_std_omega: f64,
    pub ft_init_std_eta: f64,
    pub fixed_ft_std_omega: f64,
    pub fixed_ft_std_eta: f64,
    /// Share of each task's pairs held out for the outer loss.
    pub val_fraction: f64,
    pub split: SplitProtocol,
    /// Training pairs whose fixed-weight loss is logged every epoch.
    pub probe_pairs: usize,
    pub precision_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            alpha: 0.0005,
            beta: 0.0001,
            beta_hyper: 0.0001,
            inner_steps: 1,
            meta_batch: 16,
            epochs: 200,
            warmup_epochs: 20,
            lambda1_start: 0.001,
            lambda1_end: 1.8,
            lambda1_ramp_last_epochs: 75,
            weights: LossWeights::default(),
            d: m.d,
            image_size: m.image_size,
            image_channels: m.image_channels,
            channels: m.channels,
            seed: 0,
            no_ft: false,
            no_regd: false,
            fixed_ft: false,
            no_meta: false,
            first_order: false,
            adaptive_inner: false,
            photo_to_sketch: false,
            random_negatives: false,
            hard_negative_pool: 3,
            warmup_lr: 0.0005,
            warmup_batch: 16,
            steps_per_epoch: None,
            clip_norm: 10.0,
            psi_init: 0.001,
            ft_init_std_omega: m.ft_init_std_omega,
            ft_init_std_eta: m.ft_init_std_eta,
            fixed_ft_std_omega: 0.6,
            fixed_ft_std_eta: 0.25,
            val_fraction: 0.2,
            split: SplitProtocol::default(),
            probe_pairs: 32,
            precision_k: 200,
        }
    }
}

impl TrainConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            image_channels: self.image_channels,
            channels: self.channels.clone(),
            d: self.d,
            ft_init_std_omega: self.ft_init_std_omega,
            ft_init_std_eta: self.ft_init_std_eta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1");
        }
        if self.meta_batch == 0 || self.warmup_batch == 0 {
            return bad("batch sizes must be at least 1");
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad("need warmup_epochs < epochs");
        }
        if self.steps_per_epoch == Some(0) || self.probe_pairs == 0 || self.hard_negative_pool == 0 {
            return bad("steps_per_epoch, probe_pairs and hard_negative_pool must be positive");
        }
        let rates = [self.alpha, self.beta, self.beta_hyper, self.warmup_lr, self.clip_norm, self.psi_init];
        if rates.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("learning rates, clip_norm and psi_init must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if !(self.fixed_ft_std_omega > 0.0 && self.fixed_ft_std_eta > 0.0) {
            return bad("fixed FT deviations must be positive");
        }
        self.weights.validate()?;
        self.model().validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lambda1(&self, epoch: usize) -> Result<f64> {
        super::schedule::lambda1_schedule(
            epoch,
            self.epochs,
            self.lambda1_start,
            self.lambda1_end,
            self.lambda1_ramp_last_epochs,
        )
    }
}
