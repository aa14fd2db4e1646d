//! Denoiser pretraining: standard ε-prediction MSE over uniformly sampled
//! timesteps, conditioned on the concept's learned text token with a 10%
//! dropout to the null token so the model also learns the unconditional
//! distribution (the ingredient classifier-free guidance needs).

use rand::seq::SliceRandom;
use rand::Rng;

use super::{q_sample, ConditioningBundle, GenerativeError, NoiseSchedule, Result, UNetModel};
use crate::datagen::{preprocess, Corpus};
use crate::nn::Binder;
use crate::numerics::{NumericsError, Scalar, Tape, Tensor, Var};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Probability of replacing the concept token with the null token.
    pub cond_dropout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 30, batch: 8, lr: 1e-4, seed: 0, cond_dropout: 0.1 }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub epoch_losses: Vec<f64>,
}

impl PretrainSummary {
    /// Final epoch loss over initial epoch loss; < 1 means training helped.
    pub fn improvement_ratio(&self) -> f64 {
        match (self.epoch_losses.first(), self.epoch_losses.last()) {
            (Some(first), Some(last)) if *first > 0.0 => last / first,
            _ => f64::NAN,
        }
    }
}

/// Train the denoiser in place on the corpus. The corpus pixel statistics
/// are recorded on the model so sampling can map back to display space.
pub fn pretrain<T: Scalar>(
    model: &mut UNetModel<T>,
    corpus: &Corpus,
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
) -> Result<PretrainSummary> {
    if corpus.samples.is_empty() {
        return Err(GenerativeError::Contract("cannot pretrain on an empty corpus".into()));
    }
    if schedule.steps() != model.cfg.t_steps {
        return Err(GenerativeError::Contract(format!(
            "schedule has {} steps but the model was built for {}",
            schedule.steps(),
            model.cfg.t_steps
        )));
    }
    if corpus.spec.size != model.cfg.size {
        return Err(GenerativeError::Contract(format!(
            "corpus size {} does not match model size {}",
            corpus.spec.size, model.cfg.size
        )));
    }
    model.stats = corpus.stats;
    let s = model.cfg.size;
    let inputs: Vec<Tensor<T>> = corpus
        .samples
        .iter()
        .map(|smp| Ok(super::cast::<T>(&preprocess(&smp.image, &corpus.stats)).reshape(&[3, s * s])?))
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let tag = format!("{epoch}");
        let mut order: Vec<usize> = (0..corpus.samples.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &["pretrain", "order", &tag]));
        let mut draw = rng::stream(cfg.seed, &["pretrain", "draw", &tag]);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let tape = Tape::new();
            let mut binder = Binder::train_all(&tape);
            let mut total: Option<Var> = None;
            for &i in chunk {
                let t = draw.gen_range(0..schedule.steps());
                let eps = Tensor::<T>::randn(&[3, s * s], 1.0, &mut draw);
                let dropped = draw.gen::<f64>() < cfg.cond_dropout;
                let cond = if dropped {
                    ConditioningBundle::uncond()
                } else {
                    ConditioningBundle::for_text(corpus.samples[i].label.name())
                };
                let z = tape.leaf(&q_sample(&inputs[i], t, &eps, schedule)?);
                let out = step_forward(model, &mut binder, z, t, &cond, step)?;
                let target = tape.leaf(&eps);
                let loss = tape.mse(out, target)?;
                total = Some(match total {
                    None => loss,
                    Some(acc) => tape.add(acc, loss)?,
                });
            }
            let mean = tape.scale(total.expect("non-empty chunk"), T::of(1.0 / chunk.len() as f64));
            let loss_value = tape.value(mean).data()[0].as_f64();
            if !loss_value.is_finite() {
                return Err(GenerativeError::Diverged { iteration: step, loss: loss_value });
            }
            epoch_loss += loss_value * chunk.len() as f64;
            let bindings = binder.finish();
            let grads = tape.backward(mean)?;
            let gmap = bindings.grads(&grads)?;
            adam.step_with(&gmap, |f| model.visit_mut(f))?;
            step += 1;
        }
        epoch_losses.push(epoch_loss / corpus.samples.len() as f64);
    }
    Ok(PretrainSummary { epoch_losses })
}

/// Forward pass that reports numeric blowups as divergence at this step.
fn step_forward<T: Scalar>(
    model: &UNetModel<T>,
    binder: &mut Binder<'_, '_, T>,
    z: Var,
    t: usize,
    cond: &ConditioningBundle,
    step: usize,
) -> Result<Var> {
    model.forward(binder, z, t, cond).map_err(|e| match e {
        GenerativeError::Numerics(NumericsError::NonFinite { .. }) => {
            GenerativeError::Diverged { iteration: step, loss: f64::NAN }
        }
        other => other,
    })
}
