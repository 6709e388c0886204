//! Training configuration.

use pseudoheal_autograd::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::losses::LossWeights;
use crate::nets::NetConfig;
use crate::{Error, Result};

/// How much mask supervision the Segmentor receives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Setting {
    /// Every pathological slice carries its ground-truth mask.
    Paired,
    /// No ground-truth masks; a mask critic judges the Segmentor.
    Unpaired,
    /// A seeded fraction `ratio` of the pathological slices carries masks.
    Semi { ratio: f64 },
}

impl Setting {
    /// Fraction of pathological training slices with ground-truth masks.
    pub fn ratio(self) -> f64 {
        match self {
            Setting::Paired => 1.0,
            Setting::Unpaired => 0.0,
            Setting::Semi { ratio } => ratio,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    /// Drops Cycle H-H and the Reconstructor's image game.
    NoCycleHh,
    /// Replaces Cycle H-H with a healthy-to-pathological cycle and a
    /// pathological-image critic.
    CycleHp,
    /// Least-squares critic objectives instead of Wasserstein with penalty.
    Lsgan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    /// Generator plus image critic, adversarial loss only.
    ConditionalGan,
    /// Two generators and two critics with two-direction cycle losses.
    Cyclegan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScheme {
    /// G, S and R take one step on the combined objective.
    Joint,
    /// G, S and R take sequential steps, each on a fresh evaluation.
    Alternating,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl From<OptimizerConfig> for AdamConfig {
    fn from(o: OptimizerConfig) -> Self {
        AdamConfig {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub setting: Setting,
    pub epochs: usize,
    pub batch_size: usize,
    /// Critic updates per generator update during the first `warm_epochs`.
    pub critic_iters_warm: usize,
    pub warm_epochs: usize,
    /// Critic updates per generator update afterwards.
    pub critic_iters: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub ablation: Ablation,
    pub baseline: Baseline,
    pub update: UpdateScheme,
    pub net: NetConfig,
    pub weights: LossWeights,
    /// Stop after this many generator updates (the last epoch may be partial).
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            setting: Setting::Paired,
            epochs: 300,
            batch_size: 4,
            critic_iters_warm: 50,
            warm_epochs: 20,
            critic_iters: 5,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            ablation: Ablation::None,
            baseline: Baseline::None,
            update: UpdateScheme::Joint,
            net: NetConfig::default(),
            weights: LossWeights::default(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Settings sized for 64x64 phantoms on a single CPU core: 30 epochs,
    /// narrow networks and a one-epoch critic warm-up.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            warm_epochs: 1,
            net: NetConfig {
                base_channels: 8,
                critic_channels: 8,
                segmentor_norm: true,
                ..NetConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Setting::Semi { ratio } = self.setting {
            if !(0.0..=1.0).contains(&ratio) {
                return Err(Error::config("train.setting.semi.ratio", "must lie in [0, 1]"));
            }
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.critic_iters == 0 || self.critic_iters_warm == 0 {
            return Err(Error::config("train.critic_iters", "critics need at least one update per step"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::config("train.optimizer", "needs lr > 0, betas in [0, 1) and eps > 0"));
        }
        if self.baseline != Baseline::None && self.ablation != Ablation::None {
            return Err(Error::config("train.ablation", "ablations apply to the proposed model only"));
        }
        self.net.validate()?;
        self.weights.validate()
    }

    /// Critic updates per generator update in `epoch` (zero-based).
    pub fn critic_iters_for(&self, epoch: usize) -> usize {
        if epoch < self.warm_epochs {
            self.critic_iters_warm
        } else {
            self.critic_iters
        }
    }

    /// Whether training needs a pool of pathological masks from other subjects.
    pub fn needs_mask_pool(&self) -> bool {
        self.baseline == Baseline::None && (self.setting.ratio() < 1.0 || self.ablation == Ablation::CycleHp)
    }
}
