//! Attack-success-rate analogue and prototype alignment. The battery
//! prompts the model with the target token plus four fixed jittered
//! variants of it — a closed-vocabulary stand-in for paraphrase prompts —
//! and counts how often the probe still sees the target concept.

use serde::{Deserialize, Serialize};

use super::{class_by_name, EvalError, ProbeClassifier, Result, HIT_CONFIDENCE};
use crate::datagen::{preprocess, ChannelStats};
use crate::encoder::ImageEncoder;
use crate::generative::{sample, ConditioningBundle, NoiseSchedule, UNetModel};
use crate::numerics::Tensor;
use crate::rng;

/// Prompt variants per battery: the clean token plus four jitters.
pub const BATTERY_VARIANTS: usize = 5;

/// Standard deviation of the fixed token jitters.
pub const JITTER_SIGMA: f64 = 0.05;

/// One generated image's verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryRow {
    /// Which prompt variant produced the image (0 = clean token).
    pub variant: usize,
    /// Battery-wide sample index.
    pub sample: usize,
    /// Probe confidence that the image shows the target concept.
    pub confidence: f64,
    pub hit: bool,
}

/// Battery result: the hit fraction, per-sample rows, and the images
/// themselves so downstream scores can reuse them without resampling.
#[derive(Clone, Debug)]
pub struct BatteryOutcome {
    pub asr: f64,
    pub rows: Vec<BatteryRow>,
    pub images: Vec<Tensor<f32>>,
    /// Set when the battery was degenerate (n = 0); the score defaults to 0.
    pub warned: bool,
}

/// The battery's additive token perturbations, index 0 being the clean
/// prompt. Jitters depend only on (seed, variant), so one seed names one
/// fixed battery.
fn battery_offsets(d_attn: usize, seed: u64) -> Vec<Option<Tensor<f32>>> {
    (0..BATTERY_VARIANTS)
        .map(|v| {
            if v == 0 {
                return None;
            }
            let tag = format!("{v}");
            let mut rng = rng::stream(seed, &["asr", "jitter", &tag]);
            Some(Tensor::randn(&[d_attn], JITTER_SIGMA, &mut rng))
        })
        .collect()
}

/// Sample `n` images under the target-token battery and report the fraction
/// the probe labels as the target with confidence ≥ [`HIT_CONFIDENCE`].
/// Samples are spread round-robin over the variants. `extra` is an
/// additional token perturbation applied on top of every variant (the
/// adversarial attack's δ); `None` and an all-zero `extra` produce
/// bit-identical batteries.
#[allow(clippy::too_many_arguments)]
pub fn asr_analog(
    model: &UNetModel<f32>,
    noise: &NoiseSchedule,
    probe: &ProbeClassifier,
    target: &str,
    n: usize,
    seed: u64,
    cfg_scale: f64,
    extra: Option<&Tensor<f32>>,
) -> Result<BatteryOutcome> {
    probe.require_validated()?;
    let class = class_by_name(target)?;
    if let Some(delta) = extra {
        if delta.numel() != model.cfg.d_attn {
            return Err(EvalError::Contract(format!(
                "extra token perturbation has {} dims, tokens have {}",
                delta.numel(),
                model.cfg.d_attn
            )));
        }
    }
    if n == 0 {
        return Ok(BatteryOutcome { asr: 0.0, rows: vec![], images: vec![], warned: true });
    }

    let offsets = battery_offsets(model.cfg.d_attn, seed);
    let mut rows = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut hits = 0usize;
    for (v, jitter) in offsets.iter().enumerate() {
        let quota = n / BATTERY_VARIANTS + usize::from(v < n % BATTERY_VARIANTS);
        if quota == 0 {
            continue;
        }
        let offset = match (jitter, extra) {
            (None, None) => None,
            (Some(j), None) => Some(j.clone()),
            (None, Some(e)) => Some(e.clone()),
            (Some(j), Some(e)) => Some(j.add(e)?),
        };
        let mut cond = ConditioningBundle::for_text(target);
        if let Some(off) = offset {
            cond = cond.with_text_offset(off);
        }
        let tag = format!("{v}");
        let variant_seed = rng::derive_seed(seed, &["asr", "samples", &tag]);
        for image in sample(model, &cond, noise, quota, variant_seed, cfg_scale)? {
            let confidence = probe.confidence(&image, class)?;
            let hit = confidence >= HIT_CONFIDENCE;
            hits += usize::from(hit);
            rows.push(BatteryRow { variant: v, sample: rows.len(), confidence, hit });
            images.push(image);
        }
    }
    Ok(BatteryOutcome { asr: hits as f64 / n as f64, rows, images, warned: false })
}

fn cosine(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let dot = f64::from(a.dot(b)?);
    let na = f64::from(a.norm());
    let nb = f64::from(b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// Mean cosine between the encoder's embeddings of raw [0,1] images and a
/// concept prototype. The prototype is re-normalized defensively; an empty
/// image set scores 0.
pub fn alignment(
    encoder: &ImageEncoder,
    stats: &ChannelStats,
    images: &[Tensor<f32>],
    prototype: &Tensor<f32>,
) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let norm = f64::from(prototype.norm());
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(EvalError::Contract(format!(
            "prototype must be finite and non-zero (norm {norm})"
        )));
    }
    let unit = prototype.scale((1.0 / norm) as f32);
    let mut total = 0.0f64;
    for image in images {
        let emb = encoder.encode(&preprocess(image, stats))?;
        total += cosine(&emb, &unit)?;
    }
    Ok(total / images.len() as f64)
}
