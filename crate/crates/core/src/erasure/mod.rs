//! Bidirectional concept erasure: push the model's prediction for the target
//! concept away from the frozen reference while pulling a designated safe
//! concept's prediction beyond the reference. Contains the guidance/weight
//! schedules, the push–pull target algebra, the training loop, and the
//! one-sided baseline variants.

mod run;
mod targets;

pub use run::{erase, zt_source, ErasureSummary, TraceRow};
pub use targets::{build_neg_target, build_pos_target, bidirectional_loss, LossParts};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::DatagenError;
use crate::encoder::EncoderError;
use crate::generative::GenerativeError;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum ErasureError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Generative(#[from] GenerativeError),
    #[error("corpus has no samples of class {class:?}")]
    MissingClass { class: String },
    #[error("erasure diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("step observer failed at iteration {iteration}: {source}")]
    Observer {
        iteration: usize,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T, E = ErasureError> = std::result::Result<T, E>;

/// How the two loss weights evolve over the run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum WeightMode {
    /// Constant weights for the whole run.
    Fixed { lambda_neg: f64, lambda_pos: f64 },
    /// Push-first: full push throughout, pull ramping in after a quarter of
    /// the run and saturating at three quarters.
    Dynamic,
}

/// The fixed-ratio grid used for weight comparisons.
pub const FIXED_RATIO_GRID: [(u32, u32); 5] = [(1, 9), (3, 7), (5, 5), (7, 3), (9, 1)];

impl WeightMode {
    /// Fixed weights from the ratio grid, e.g. 3:7 → (0.3, 0.7).
    pub fn from_ratio(neg: u32, pos: u32) -> Result<Self> {
        if !FIXED_RATIO_GRID.contains(&(neg, pos)) {
            return Err(ErasureError::Contract(format!(
                "ratio {neg}:{pos} is not in the supported grid {FIXED_RATIO_GRID:?}"
            )));
        }
        Ok(WeightMode::Fixed {
            lambda_neg: f64::from(neg) / 10.0,
            lambda_pos: f64::from(pos) / 10.0,
        })
    }
}

/// Loss weights at one iteration of a T_max-long run.
pub fn weight_schedule(iter: usize, t_max: usize, mode: &WeightMode) -> Result<(f64, f64)> {
    if iter >= t_max {
        return Err(ErasureError::Contract(format!(
            "iteration {iter} outside run of {t_max} iterations"
        )));
    }
    match *mode {
        WeightMode::Fixed { lambda_neg, lambda_pos } => {
            if lambda_neg < 0.0 || lambda_pos < 0.0 || lambda_neg + lambda_pos <= 0.0 {
                return Err(ErasureError::Contract(format!(
                    "fixed weights ({lambda_neg}, {lambda_pos}) must be non-negative and not both zero"
                )));
            }
            Ok((lambda_neg, lambda_pos))
        }
        WeightMode::Dynamic => {
            let t = t_max as f64;
            let ramp = ((iter as f64 - 0.25 * t) / (0.5 * t)).clamp(0.0, 1.0);
            Ok((1.0, ramp))
        }
    }
}

/// Strengths and weight trajectory of one erasure run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSchedule {
    /// Negative (push) strength η.
    pub eta: f64,
    /// Positive (pull) strength ω.
    pub omega: f64,
    pub t_max: usize,
    pub mode: WeightMode,
}

impl GuidanceSchedule {
    pub fn new(eta: f64, omega: f64, t_max: usize, mode: WeightMode) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(ErasureError::Contract(format!("η must be positive, got {eta}")));
        }
        if !(omega > 0.0) || !omega.is_finite() {
            return Err(ErasureError::Contract(format!("ω must be positive, got {omega}")));
        }
        if let WeightMode::Fixed { lambda_neg, lambda_pos } = mode {
            if lambda_neg < 0.0 || lambda_pos < 0.0 || lambda_neg + lambda_pos <= 0.0 {
                return Err(ErasureError::Contract(format!(
                    "fixed weights ({lambda_neg}, {lambda_pos}) must be non-negative and not both zero"
                )));
            }
        }
        Ok(GuidanceSchedule { eta, omega, t_max, mode })
    }

    pub fn weights(&self, iter: usize) -> Result<(f64, f64)> {
        weight_schedule(iter, self.t_max, &self.mode)
    }
}

impl Default for GuidanceSchedule {
    fn default() -> Self {
        GuidanceSchedule { eta: 1.0, omega: 0.5, t_max: 1000, mode: WeightMode::Dynamic }
    }
}

/// Which loss branches run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Bidirectional,
    NegativeOnly,
    PositiveOnly,
}

/// Full configuration of one erasure run. The flags span the component
/// matrix: text-token conditioning, image-token guidance, and foreground
/// masking can each be switched independently of the loss variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErasureConfig {
    pub variant: Variant,
    /// Concept to erase.
    pub target: String,
    /// Concept the pull branch steers toward.
    pub safe: String,
    /// Append the target concept's text token to conditional queries.
    pub use_text: bool,
    /// Attach encoder-projected image tokens to conditional queries.
    pub use_image: bool,
    /// Mask conditioning images to their foreground before encoding.
    pub use_mask: bool,
    /// Pool size per role for conditioning images.
    pub n_train_images: usize,
    pub lr: f64,
    pub seed: u64,
    /// Keep the image-token projector at its pretrained weights.
    pub freeze_projector: bool,
    /// Train every denoiser weight instead of the cross-attention K/V (+
    /// projector) subset.
    pub train_full: bool,
    /// Draw Z_t as pure Gaussian noise instead of noised target images.
    pub zt_pure_noise: bool,
}

impl Default for ErasureConfig {
    fn default() -> Self {
        ErasureConfig {
            variant: Variant::Bidirectional,
            target: "circle".to_string(),
            safe: "square".to_string(),
            use_text: true,
            use_image: true,
            use_mask: true,
            n_train_images: 16,
            lr: 1e-5,
            seed: 0,
            freeze_projector: false,
            train_full: false,
            zt_pure_noise: false,
        }
    }
}

impl ErasureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target == self.safe {
            return Err(ErasureError::Contract(format!(
                "target and safe concept are both {:?}",
                self.target
            )));
        }
        if !self.use_text && !self.use_image {
            return Err(ErasureError::Contract(
                "at least one conditioning pathway (text or image) must be enabled".into(),
            ));
        }
        if self.variant != Variant::NegativeOnly && !self.use_image {
            return Err(ErasureError::Contract(
                "the pull branch tells safe content apart from the target via image \
                 guidance; enable use_image or use the negative_only variant"
                    .into(),
            ));
        }
        if self.n_train_images == 0 {
            return Err(ErasureError::Contract("n_train_images must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(ErasureError::Contract(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// Decides which parameters the erasure optimizer may touch.
    pub fn trains(&self, name: &str) -> bool {
        if self.train_full {
            return name.starts_with("unet.");
        }
        let attn_kv = name.contains(".attn.")
            && (name.ends_with("w_tk")
                || name.ends_with("w_tv")
                || name.ends_with("w_ik")
                || name.ends_with("w_iv"));
        attn_kv || (!self.freeze_projector && name.starts_with("unet.proj"))
    }
}
