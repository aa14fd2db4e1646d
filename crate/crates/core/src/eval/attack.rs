//! Adversarial conditioning attack. The vocabulary is closed, so prompt
//! paraphrasing has nowhere to go; instead the attacker perturbs the target
//! text token directly with a norm-bounded additive δ found by random
//! search, then the battery is re-run under the winning δ.

use rand::Rng;

use super::asr::{asr_analog, BatteryOutcome};
use super::{class_by_name, EvalError, ProbeClassifier, Result};
use crate::generative::{sample, ConditioningBundle, NoiseSchedule, UNetModel};
use crate::numerics::Tensor;
use crate::rng;

/// Images scored per candidate during the search. All candidates are judged
/// on samples drawn with the same seed, so only δ varies between them.
pub const SELECTION_BATCH: usize = 16;

/// Search result. The reported pair is best-of including the null
/// perturbation: a δ that loses to "no attack" on the final battery is
/// discarded, so `post_asr ≥ pre_asr` holds by construction.
#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub pre_asr: f64,
    pub post_asr: f64,
    /// Winning perturbation; all zeros when no candidate beat the baseline.
    pub delta: Tensor<f32>,
    pub delta_norm: f64,
    /// Candidates scored during the search, the null δ included.
    pub candidates_scored: usize,
    pub pre: BatteryOutcome,
    pub post: BatteryOutcome,
}

/// Random-search attack on the target token. `budget` counts the random
/// candidates tried beyond the always-included δ = 0; `radius` bounds each
/// ‖δ‖ as a fraction of the target token's norm. With `budget` = 0 the
/// search degenerates to the null perturbation and `post_asr == pre_asr`
/// exactly.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_probe(
    model: &UNetModel<f32>,
    noise: &NoiseSchedule,
    probe: &ProbeClassifier,
    target: &str,
    budget: usize,
    radius: f64,
    n: usize,
    seed: u64,
    cfg_scale: f64,
) -> Result<AttackOutcome> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(EvalError::Contract(format!(
            "attack radius must be positive and finite, got {radius}"
        )));
    }
    probe.require_validated()?;
    let class = class_by_name(target)?;
    let token_norm = f64::from(model.vocab.token(target)?.norm());
    let d_attn = model.cfg.d_attn;

    let mut candidates = vec![Tensor::<f32>::zeros(&[d_attn])];
    for i in 1..=budget {
        let tag = format!("{i}");
        let mut draw = rng::stream(seed, &["attack", "delta", &tag]);
        let direction = Tensor::<f32>::randn(&[d_attn], 1.0, &mut draw);
        let scale = radius * token_norm * draw.gen::<f64>() / f64::from(direction.norm()).max(1e-30);
        candidates.push(direction.scale(scale as f32));
    }

    let select_seed = rng::derive_seed(seed, &["attack", "select"]);
    let mut best_index = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, delta) in candidates.iter().enumerate() {
        let cond = ConditioningBundle::for_text(target).with_text_offset(delta.clone());
        let images = sample(model, &cond, noise, SELECTION_BATCH, select_seed, cfg_scale)?;
        let mut score = 0.0f64;
        for image in &images {
            score += probe.confidence(image, class)?;
        }
        score /= images.len().max(1) as f64;
        // Strict improvement only, so ties keep the earlier (null-first) δ.
        if score > best_score {
            best_score = score;
            best_index = i;
        }
    }

    let eval_seed = rng::derive_seed(seed, &["attack", "eval"]);
    let pre = asr_analog(model, noise, probe, target, n, eval_seed, cfg_scale, None)?;
    let (post, winner) = if best_index == 0 {
        // The null δ adds exact zeros, which the battery treats as absent;
        // re-running it would reproduce `pre` bit for bit.
        (pre.clone(), 0)
    } else {
        let delta = &candidates[best_index];
        let attacked =
            asr_analog(model, noise, probe, target, n, eval_seed, cfg_scale, Some(delta))?;
        if attacked.asr >= pre.asr {
            (attacked, best_index)
        } else {
            // The attacker keeps whichever of {δ*, no attack} scores higher
            // on the final battery, so the attack never undercuts baseline.
            (pre.clone(), 0)
        }
    };

    let delta = candidates.swap_remove(winner);
    Ok(AttackOutcome {
        pre_asr: pre.asr,
        post_asr: post.asr,
        delta_norm: f64::from(delta.norm()),
        delta,
        candidates_scored: budget + 1,
        pre,
        post,
    })
}
