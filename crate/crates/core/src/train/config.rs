use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Optimizer hyper-parameters. Accepts the bare name `"AdamW"` / `"adamw"`
/// (defaults) or an object with `beta1`, `beta2`, `eps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<'de> Deserialize<'de> for AdamWConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;

        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Full {
            #[serde(default)]
            name: Option<String>,
            #[serde(default = "b1")]
            beta1: f64,
            #[serde(default = "b2")]
            beta2: f64,
            #[serde(default = "eps")]
            eps: f64,
        }
        fn b1() -> f64 {
            0.9
        }
        fn b2() -> f64 {
            0.999
        }
        fn eps() -> f64 {
            1e-8
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Name(String),
            Full(Full),
        }
        let check = |name: &str| {
            if name.eq_ignore_ascii_case("adamw") {
                Ok(())
            } else {
                Err(D::Error::custom(format!("unsupported optimizer {name:?} (only AdamW)")))
            }
        };
        match Repr::deserialize(d)? {
            Repr::Name(n) => {
                check(&n)?;
                Ok(Self::default())
            }
            Repr::Full(f) => {
                if let Some(n) = &f.name {
                    check(n)?;
                }
                Ok(Self {
                    beta1: f.beta1,
                    beta2: f.beta2,
                    eps: f.eps,
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrSchedule {
    #[default]
    #[serde(rename = "cosine", alias = "Cosine")]
    Cosine,
}

/// Training hyper-parameters. Field names follow the usual rows of an
/// ImageNet recipe table (epochs, optimizer, batch size, start learning
/// rate, LR schedule, warmup epochs, weight decay, label smoothing), so a
/// recipe column can be transcribed directly. Augmentation rows are accepted
/// and ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Passes over the dataset; exactly one of `epochs` and `steps` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    #[serde(alias = "start_learning_rate")]
    pub base_lr: f64,
    #[serde(default, alias = "schedule")]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub warmup_epochs: usize,
    /// Overrides `warmup_epochs` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    #[serde(default = "default_final_fraction")]
    pub final_lr_fraction: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the descriptor's MoE auxiliary-loss weight (LM only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_loss_weight: Option<f64>,
    /// Global gradient-norm clip.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Steps between JSONL log records.
    #[serde(default = "one")]
    pub log_every: usize,
    // Augmentation and regularisation rows; accepted and ignored at toy scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_decay: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stochastic_path: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rand_augment: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixup: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutmix: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_erasing: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema: Option<serde_json::Value>,
}

fn default_final_fraction() -> f64 {
    0.1
}

fn one() -> usize {
    1
}

impl TrainConfig {
    /// Step-budgeted AdamW with cosine decay to 10% and no regularisation.
    pub fn with_steps(steps: usize, batch_size: usize, base_lr: f64, seed: u64) -> Self {
        Self {
            epochs: None,
            steps: Some(steps),
            optimizer: AdamWConfig::default(),
            batch_size,
            base_lr,
            lr_schedule: LrSchedule::Cosine,
            warmup_epochs: 0,
            warmup_steps: None,
            final_lr_fraction: default_final_fraction(),
            weight_decay: 0.0,
            label_smoothing: 0.0,
            seed,
            aux_loss_weight: None,
            grad_clip: None,
            log_every: 1,
            layer_decay: None,
            stochastic_path: None,
            rand_augment: None,
            mixup: None,
            cutmix: None,
            random_erasing: None,
            ema: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |location: &str, message: String| Error::Validation {
            location: location.into(),
            message,
        };
        match (self.epochs, self.steps) {
            (Some(0), _) | (_, Some(0)) => return Err(fail("epochs", "budget must be positive".into())),
            (Some(_), Some(_)) | (None, None) => {
                return Err(fail("epochs", "set exactly one of `epochs` and `steps`".into()))
            }
            _ => {}
        }
        if self.batch_size == 0 {
            return Err(fail("batch_size", "must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(fail("base_lr", format!("{} must be finite and non-negative", self.base_lr)));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(fail("final_lr_fraction", format!("{} outside [0, 1]", self.final_lr_fraction)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(fail("label_smoothing", format!("{} outside [0, 1)", self.label_smoothing)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(fail("weight_decay", format!("{} must be non-negative", self.weight_decay)));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(fail("optimizer", format!("invalid AdamW settings {o:?}")));
        }
        if let Some(w) = self.aux_loss_weight {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(fail("aux_loss_weight", format!("{w} must be non-negative")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(fail("grad_clip", format!("{c} must be positive")));
            }
        }
        if self.log_every == 0 {
            return Err(fail("log_every", "must be positive".into()));
        }
        Ok(())
    }

    /// `(total_steps, warmup_steps, steps_per_epoch)` for `examples` items.
    pub fn budget(&self, examples: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        if examples == 0 {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let per_epoch = examples.div_ceil(self.batch_size);
        let total = match (self.epochs, self.steps) {
            (Some(e), None) => e * per_epoch,
            (None, Some(s)) => s,
            _ => unreachable!("validated"),
        };
        let warmup = self.warmup_steps.unwrap_or(self.warmup_epochs * per_epoch);
        if warmup >= total {
            return Err(Error::Validation {
                location: "warmup_epochs".into(),
                message: format!("warmup of {warmup} steps does not fit in {total} total steps"),
            });
        }
        Ok((total, warmup, per_epoch))
    }
}

/// Hex SHA-256 of the canonical JSON of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(&serde_json::to_value(value)?)?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
