//! The erasure training loop: frozen-reference targets, selective parameter
//! updates, and the noisy-latent source it trains on.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    bidirectional_loss, build_neg_target, build_pos_target, ErasureConfig, ErasureError,
    GuidanceSchedule, Result, Variant,
};
use crate::datagen::{apply_mask, preprocess, Corpus, ShapeClass};
use crate::encoder::ImageEncoder;
use crate::generative::{predict_noise, q_sample, ConditioningBundle, GenerativeError, NoiseSchedule, UNetModel};
use crate::nn::{Binder, Filter, GradMap};
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::optim::{Adam, AdamConfig};
use crate::rng;

/// One optimizer step's record in the training trace.
#[derive(Clone, Copy, Debug)]
pub struct TraceRow {
    pub iter: usize,
    pub lambda_neg: f64,
    pub lambda_pos: f64,
    /// Unweighted push-branch MSE; zero when the variant skips the branch.
    pub loss_neg: f64,
    /// Unweighted pull-branch MSE; zero when the variant skips the branch.
    pub loss_pos: f64,
    /// Weighted total that was differentiated.
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct ErasureSummary {
    pub trace: Vec<TraceRow>,
    /// Parameter names the optimizer touched, sorted.
    pub trained: Vec<String>,
    pub initial_hash: u64,
    pub final_hash: u64,
}

fn class_by_name(name: &str) -> Result<ShapeClass> {
    ShapeClass::ALL.into_iter().find(|c| c.name() == name).ok_or_else(|| {
        ErasureError::Contract(format!(
            "unknown concept {name:?}; corpus classes are {:?}",
            ShapeClass::ALL.map(|c| c.name())
        ))
    })
}

/// Draw one training latent: a real target-concept image pushed a uniformly
/// random number of steps into the forward process (or pure Gaussian noise
/// when `pure_noise` is set). Returns the standardized (3 × size²) latent and
/// the timestep it sits at.
pub fn zt_source(
    corpus: &Corpus,
    target: ShapeClass,
    schedule: &NoiseSchedule,
    pure_noise: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, usize)> {
    let t = rng.gen_range(0..schedule.steps());
    let size = corpus.spec.size;
    let shape = [3, size * size];
    if pure_noise {
        return Ok((Tensor::randn(&shape, 1.0, rng), t));
    }
    let pool: Vec<_> = corpus.by_class(target).collect();
    if pool.is_empty() {
        return Err(ErasureError::MissingClass { class: target.name().to_string() });
    }
    let pick = rng.gen_range(0..pool.len());
    let x0 = preprocess(&pool[pick].image, &corpus.stats).reshape(&shape)?;
    let eps = Tensor::randn(&shape, 1.0, rng);
    Ok((q_sample(&x0, t, &eps, schedule)?, t))
}

/// Encoder embeddings for the first `n` samples of a class, masked to their
/// foreground first when requested. The pool is computed once; the loop only
/// draws indices into it.
fn embedding_pool(
    corpus: &Corpus,
    encoder: &ImageEncoder,
    class: ShapeClass,
    n: usize,
    use_mask: bool,
) -> Result<Vec<Tensor<f32>>> {
    let samples: Vec<_> = corpus.by_class(class).take(n).collect();
    if samples.is_empty() {
        return Err(ErasureError::MissingClass { class: class.name().to_string() });
    }
    samples
        .iter()
        .map(|s| {
            let image = if use_mask {
                apply_mask(&s.image, &s.mask, s.mean_color)?
            } else {
                s.image.clone()
            };
            Ok(encoder.encode(&preprocess(&image, &corpus.stats))?)
        })
        .collect()
}

fn is_non_finite(e: &ErasureError) -> bool {
    matches!(
        e,
        ErasureError::Numerics(NumericsError::NonFinite { .. })
            | ErasureError::Generative(GenerativeError::Numerics(NumericsError::NonFinite { .. }))
    )
}

/// Run the enabled branch forwards on one tape and combine their errors.
#[allow(clippy::too_many_arguments)]
fn step_loss(
    model: &UNetModel<f32>,
    binder: &mut Binder<'_, '_, f32>,
    z: Var,
    t: usize,
    variant: Variant,
    cond_neg: &ConditioningBundle,
    cond_pos: &ConditioningBundle,
    target_neg: Option<&Tensor<f32>>,
    target_pos: Option<&Tensor<f32>>,
    lambda_neg: f64,
    lambda_pos: f64,
) -> Result<(Var, f64, f64)> {
    let tape = binder.tape();
    match variant {
        Variant::Bidirectional => {
            let pred_neg = model.forward(binder, z, t, cond_neg)?;
            let pred_pos = model.forward(binder, z, t, cond_pos)?;
            let parts = bidirectional_loss(
                tape,
                pred_neg,
                pred_pos,
                target_neg.expect("push target present"),
                target_pos.expect("pull target present"),
                lambda_neg,
                lambda_pos,
            )?;
            Ok((parts.total, parts.mse_neg, parts.mse_pos))
        }
        Variant::NegativeOnly => {
            let pred = model.forward(binder, z, t, cond_neg)?;
            let mse = tape.mse(pred, tape.leaf(target_neg.expect("push target present")))?;
            let total = tape.scale(mse, lambda_neg as f32);
            Ok((total, f64::from(tape.value(mse).data()[0]), 0.0))
        }
        Variant::PositiveOnly => {
            let pred = model.forward(binder, z, t, cond_pos)?;
            let mse = tape.mse(pred, tape.leaf(target_pos.expect("pull target present")))?;
            let total = tape.scale(mse, lambda_pos as f32);
            Ok((total, 0.0, f64::from(tape.value(mse).data()[0])))
        }
    }
}

/// Erase `cfg.target` from `model` in place.
///
/// Each iteration draws a noisy latent from the target concept, queries the
/// frozen `reference` for unconditional and conditional predictions, builds
/// the push/pull targets from them, and regresses the trainable subset of
/// `model` (cross-attention K/V plus the image-token projector by default)
/// onto those targets. `reference` is only ever read outside the tape, so no
/// gradient can reach it. `on_step`, when given, runs after every update —
/// callers hook checkpointing in there; its failure aborts the run.
#[allow(clippy::too_many_arguments)]
pub fn erase(
    model: &mut UNetModel<f32>,
    reference: &UNetModel<f32>,
    corpus: &Corpus,
    encoder: &ImageEncoder,
    cfg: &ErasureConfig,
    schedule: &GuidanceSchedule,
    noise: &NoiseSchedule,
    mut on_step: Option<&mut dyn FnMut(usize, &UNetModel<f32>) -> std::io::Result<()>>,
) -> Result<ErasureSummary> {
    cfg.validate()?;
    let initial_hash = model.weight_hash();
    if initial_hash != reference.weight_hash() {
        return Err(ErasureError::Contract(
            "reference must be a frozen copy of the model's pre-erasure weights".into(),
        ));
    }
    if noise.steps() != model.cfg.t_steps {
        return Err(ErasureError::Contract(format!(
            "noise schedule has {} steps but the model was built for {}",
            noise.steps(),
            model.cfg.t_steps
        )));
    }
    let target = class_by_name(&cfg.target)?;
    let safe = class_by_name(&cfg.safe)?;
    if corpus.by_class(target).next().is_none() {
        return Err(ErasureError::MissingClass { class: target.name().to_string() });
    }

    let (neg_pool, pos_pool) = if cfg.use_image {
        if !encoder.frozen() {
            return Err(ErasureError::Contract(
                "conditioning encoder must be frozen before erasure".into(),
            ));
        }
        (
            embedding_pool(corpus, encoder, target, cfg.n_train_images, cfg.use_mask)?,
            embedding_pool(corpus, encoder, safe, cfg.n_train_images, cfg.use_mask)?,
        )
    } else {
        (Vec::new(), Vec::new())
    };

    let trains = |name: &str| cfg.trains(name);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut trace = Vec::with_capacity(schedule.t_max);
    let mut trained: Vec<String> = Vec::new();

    for iter in 0..schedule.t_max {
        let (lambda_neg, lambda_pos) = schedule.weights(iter)?;
        let tag = iter.to_string();

        // Independent draw streams per purpose: conditioning-image picks
        // never shift the latent draws, so variants that skip a branch see
        // identical data.
        let mut pick = rng::stream(cfg.seed, &["erase", "pick", &tag]);
        let neg_emb = cfg.use_image.then(|| neg_pool[pick.gen_range(0..neg_pool.len())].clone());
        let pos_emb = cfg.use_image.then(|| pos_pool[pick.gen_range(0..pos_pool.len())].clone());
        let mut zt_rng = rng::stream(cfg.seed, &["erase", "zt", &tag]);
        let (z_t, t) = zt_source(corpus, target, noise, cfg.zt_pure_noise, &mut zt_rng)?;

        let mut cond_neg = ConditioningBundle::default();
        let mut cond_pos = ConditioningBundle::default();
        if cfg.use_text {
            cond_neg.text = Some(cfg.target.clone());
            cond_pos.text = Some(cfg.target.clone());
        }
        cond_neg.image_neg = neg_emb;
        cond_pos.image_pos = pos_emb;

        // Frozen references become fixed regression targets — plain tensors,
        // structurally outside every gradient path.
        let eps_u = predict_noise(reference, &z_t, t, &ConditioningBundle::uncond())?;
        let target_neg = if cfg.variant != Variant::PositiveOnly {
            let r = predict_noise(reference, &z_t, t, &cond_neg)?;
            Some(build_neg_target(&eps_u, &r, schedule.eta)?)
        } else {
            None
        };
        let target_pos = if cfg.variant != Variant::NegativeOnly {
            let r = predict_noise(reference, &z_t, t, &cond_pos)?;
            Some(build_pos_target(&eps_u, &r, schedule.omega)?)
        } else {
            None
        };

        let tape: Tape<f32> = Tape::new();
        let mut binder = Binder::new(&tape, Filter::Pred(&trains));
        let z = tape.leaf(&z_t);
        let step = step_loss(
            model,
            &mut binder,
            z,
            t,
            cfg.variant,
            &cond_neg,
            &cond_pos,
            target_neg.as_ref(),
            target_pos.as_ref(),
            lambda_neg,
            lambda_pos,
        );
        let (total, loss_neg, loss_pos) = match step {
            Ok(v) => v,
            Err(e) if is_non_finite(&e) => {
                return Err(ErasureError::Diverged { iteration: iter, loss: f64::NAN })
            }
            Err(e) => return Err(e),
        };
        let loss = f64::from(tape.value(total).data()[0]);
        if !loss.is_finite() {
            return Err(ErasureError::Diverged { iteration: iter, loss });
        }

        let bindings = binder.finish();
        let grads = tape.backward(total)?;
        let map: GradMap<f32> = bindings.grads(&grads)?;
        if map.is_empty() {
            return Err(ErasureError::Contract(
                "erasure selected no trainable parameters".into(),
            ));
        }
        if trained.is_empty() {
            trained = map.keys().cloned().collect();
            trained.sort();
        }
        adam.step_with(&map, |f| model.visit_mut(f))?;

        trace.push(TraceRow { iter, lambda_neg, lambda_pos, loss_neg, loss_pos, loss });
        if let Some(hook) = on_step.as_mut() {
            hook(iter, model)
                .map_err(|source| ErasureError::Observer { iteration: iter, source })?;
        }
    }

    Ok(ErasureSummary { trace, trained, initial_hash, final_hash: model.weight_hash() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, CorpusSpec};
    use crate::encoder::{train_encoder, EncoderConfig};
    use crate::erasure::WeightMode;
    use crate::generative::UNetConfig;
    use std::collections::HashMap;
    use std::sync::OnceLock;

    /// Critical value of χ² with 19 degrees of freedom at p = 0.01.
    const CHI2_19_P01: f64 = 36.19087;

    struct Fixture {
        corpus: Corpus,
        encoder: ImageEncoder,
        model: UNetModel<f32>,
        noise: NoiseSchedule,
    }

    /// Small corpus, cheap frozen encoder, and a fresh denoiser whose
    /// zero-initialized output projections are randomized — otherwise no
    /// gradient reaches the cross-attention K/V at initialization and every
    /// erasure step would be a no-op.
    fn fixture() -> &'static Fixture {
        static FIX: OnceLock<Fixture> = OnceLock::new();
        FIX.get_or_init(|| {
            let corpus =
                generate_corpus(&CorpusSpec { n_per_class: 12, seed: 21, ..Default::default() })
                    .unwrap();
            let enc_cfg = EncoderConfig {
                d_embed: 8,
                channels: (4, 8),
                epochs: 2,
                train_per_class: 8,
                seed: 3,
                ..Default::default()
            };
            let (encoder, _) = train_encoder(&corpus, &enc_cfg).unwrap();
            let unet_cfg = UNetConfig {
                size: 16,
                channels: (4, 8),
                d_attn: 8,
                d_temb: 8,
                d_embed: 8,
                n_proj_tokens: 2,
                groups: 2,
                t_steps: 20,
            };
            let mut rng = rng::stream(9, &["erasure-fixture", "model"]);
            let names: Vec<&str> = ShapeClass::ALL.iter().map(|c| c.name()).collect();
            let mut model = UNetModel::<f32>::new(unet_cfg, &names, &mut rng).unwrap();
            let mut randomize = rng::stream(9, &["erasure-fixture", "unblock"]);
            model.visit_mut(&mut |name, t| {
                if name.contains("w_o") || name.contains("head.conv") {
                    *t = Tensor::randn(t.shape(), 0.2, &mut randomize);
                }
            });
            model.stats = corpus.stats;
            let noise = NoiseSchedule::new(20, 1e-4, 0.02).unwrap();
            Fixture { corpus, encoder, model, noise }
        })
    }

    fn quick_cfg() -> ErasureConfig {
        ErasureConfig { n_train_images: 4, lr: 1e-3, seed: 11, ..Default::default() }
    }

    fn quick_schedule(t_max: usize) -> GuidanceSchedule {
        GuidanceSchedule::new(1.0, 0.5, t_max, WeightMode::Dynamic).unwrap()
    }

    #[test]
    fn latent_timesteps_are_uniform() {
        let fix = fixture();
        let schedule = NoiseSchedule::new(200, 1e-4, 0.02).unwrap();
        let mut rng = rng::stream(4, &["zt-uniformity"]);
        let mut bins = [0u64; 20];
        let draws = 10_000;
        for _ in 0..draws {
            let (_, t) =
                zt_source(&fix.corpus, ShapeClass::Circle, &schedule, false, &mut rng).unwrap();
            assert!(t < 200);
            bins[t / 10] += 1;
        }
        let expected = draws as f64 / bins.len() as f64;
        let chi2: f64 =
            bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < CHI2_19_P01, "χ² = {chi2} exceeds the p=0.01 critical value");
    }

    #[test]
    fn latents_are_deterministic_per_stream() {
        let fix = fixture();
        for pure in [false, true] {
            let mut a = rng::stream(7, &["zt-determinism"]);
            let mut b = rng::stream(7, &["zt-determinism"]);
            let (za, ta) =
                zt_source(&fix.corpus, ShapeClass::Circle, &fix.noise, pure, &mut a).unwrap();
            let (zb, tb) =
                zt_source(&fix.corpus, ShapeClass::Circle, &fix.noise, pure, &mut b).unwrap();
            assert_eq!(ta, tb);
            assert_eq!(za.data(), zb.data());
        }
        // The two modes share the timestep draw but not the latent.
        let mut a = rng::stream(7, &["zt-determinism"]);
        let mut b = rng::stream(7, &["zt-determinism"]);
        let (zi, ti) = zt_source(&fix.corpus, ShapeClass::Circle, &fix.noise, false, &mut a).unwrap();
        let (zn, tn) = zt_source(&fix.corpus, ShapeClass::Circle, &fix.noise, true, &mut b).unwrap();
        assert_eq!(ti, tn);
        assert_ne!(zi.data(), zn.data());
    }

    #[test]
    fn empty_class_pool_is_reported() {
        let fix = fixture();
        let mut corpus = fix.corpus.clone();
        corpus.samples.retain(|s| s.label != ShapeClass::Circle);
        let mut rng = rng::stream(0, &["zt-missing"]);
        let err = zt_source(&corpus, ShapeClass::Circle, &fix.noise, false, &mut rng).unwrap_err();
        assert!(matches!(err, ErasureError::MissingClass { ref class } if class == "circle"));

        let mut model = fix.model.clone();
        let reference = fix.model.clone();
        let err = erase(
            &mut model,
            &reference,
            &corpus,
            &fix.encoder,
            &quick_cfg(),
            &quick_schedule(2),
            &fix.noise,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, ErasureError::MissingClass { ref class } if class == "circle"));
    }

    #[test]
    fn unknown_concept_name_is_rejected() {
        let fix = fixture();
        let mut model = fix.model.clone();
        let reference = fix.model.clone();
        let cfg = ErasureConfig { target: "hexagon".into(), ..quick_cfg() };
        let err = erase(
            &mut model,
            &reference,
            &fix.corpus,
            &fix.encoder,
            &cfg,
            &quick_schedule(2),
            &fix.noise,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, ErasureError::Contract(_)), "{err}");
    }

    #[test]
    fn zero_iterations_leave_the_model_untouched() {
        let fix = fixture();
        let mut model = fix.model.clone();
        let reference = fix.model.clone();
        let summary = erase(
            &mut model,
            &reference,
            &fix.corpus,
            &fix.encoder,
            &quick_cfg(),
            &quick_schedule(0),
            &fix.noise,
            None,
        )
        .unwrap();
        assert!(summary.trace.is_empty());
        assert_eq!(summary.initial_hash, summary.final_hash);
        assert_eq!(model.weight_hash(), fix.model.weight_hash());
    }

    #[test]
    fn only_the_selected_subset_moves_and_the_reference_never_does() {
        let fix = fixture();
        let mut model = fix.model.clone();
        let reference = fix.model.clone();
        let cfg = quick_cfg();
        let before_ref = reference.weight_hash();
        let summary = erase(
            &mut model,
            &reference,
            &fix.corpus,
            &fix.encoder,
            &cfg,
            &quick_schedule(4),
            &fix.noise,
            None,
        )
        .unwrap();
        assert_eq!(reference.weight_hash(), before_ref);
        assert_eq!(summary.trace.len(), 4);
        assert_ne!(summary.initial_hash, summary.final_hash);
        for row in &summary.trace {
            assert!(row.loss.is_finite() && row.loss >= 0.0);
            assert!(row.loss_neg > 0.0, "push branch should see a nonzero error");
        }

        let mut baseline: HashMap<String, Vec<f32>> = HashMap::new();
        fix.model.visit(&mut |name, t| {
            baseline.insert(name.to_string(), t.data().to_vec());
        });
        let mut changed = Vec::new();
        model.visit(&mut |name, t| {
            if baseline[name] != t.data() {
                changed.push(name.to_string());
            }
        });
        assert!(!changed.is_empty());
        for name in &changed {
            assert!(cfg.trains(name), "{name} moved but was not selected for training");
            assert!(summary.trained.contains(name), "{name} moved outside the bound set");
        }
        // With a single text token its softmax is constant, so w_tk sits in
        // the trainable set with exactly zero gradient; the value path and
        // the two-token image path must actually move.
        assert!(changed.iter().any(|n| n.ends_with("w_tv")));
        assert!(changed.iter().any(|n| n.ends_with("w_ik")));
        assert!(changed.iter().any(|n| n.ends_with("w_iv")));
        assert!(changed.iter().any(|n| n.starts_with("unet.proj")));
        assert!(summary.trained.iter().any(|n| n.ends_with("w_tk")));
    }

    #[test]
    fn erasure_is_deterministic_per_seed() {
        let fix = fixture();
        let run = |seed: u64| {
            let mut model = fix.model.clone();
            let reference = fix.model.clone();
            let cfg = ErasureConfig { seed, ..quick_cfg() };
            erase(
                &mut model,
                &reference,
                &fix.corpus,
                &fix.encoder,
                &cfg,
                &quick_schedule(3),
                &fix.noise,
                None,
            )
            .unwrap();
            model.weight_hash()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    /// Dropping the pull branch entirely must equal running it with zero
    /// weight — same losses, same updates, bit for bit.
    #[test]
    fn negative_only_equals_bidirectional_with_zero_pull_weight() {
        let fix = fixture();
        let mode = WeightMode::Fixed { lambda_neg: 1.0, lambda_pos: 0.0 };
        let schedule = GuidanceSchedule::new(1.0, 0.5, 5, mode).unwrap();
        let run = |variant: Variant| {
            let mut model = fix.model.clone();
            let reference = fix.model.clone();
            let cfg = ErasureConfig { variant, ..quick_cfg() };
            let summary = erase(
                &mut model,
                &reference,
                &fix.corpus,
                &fix.encoder,
                &cfg,
                &schedule,
                &fix.noise,
                None,
            )
            .unwrap();
            (model.weight_hash(), summary)
        };
        let (hash_bi, sum_bi) = run(Variant::Bidirectional);
        let (hash_neg, sum_neg) = run(Variant::NegativeOnly);
        assert_eq!(hash_bi, hash_neg);
        for (a, b) in sum_bi.trace.iter().zip(&sum_neg.trace) {
            assert_eq!(a.loss, b.loss, "iteration {} diverged", a.iter);
            assert_eq!(a.loss_neg, b.loss_neg);
        }
    }

    #[test]
    fn dynamic_trace_records_the_weight_ramp() {
        let fix = fixture();
        let mut model = fix.model.clone();
        let reference = fix.model.clone();
        let schedule = quick_schedule(8);
        let summary = erase(
            &mut model,
            &reference,
            &fix.corpus,
            &fix.encoder,
            &quick_cfg(),
            &schedule,
            &fix.noise,
            None,
        )
        .unwrap();
        for (i, row) in summary.trace.iter().enumerate() {
            assert_eq!(row.iter, i);
            let (ln, lp) = schedule.weights(i).unwrap();
            assert_eq!((row.lambda_neg, row.lambda_pos), (ln, lp));
            assert!(row.loss_pos >= 0.0);
        }
        assert_eq!(summary.trace[0].lambda_pos, 0.0);
        assert!(summary.trace[7].lambda_pos > 0.9);
    }

    #[test]
    fn absurd_learning_rate_diverges() {
        let fix = fixture();
        let mut model = fix.model.clone();
        let reference = fix.model.clone();
        let cfg = ErasureConfig { lr: 1e30, ..quick_cfg() };
        let err = erase(
            &mut model,
            &reference,
            &fix.corpus,
            &fix.encoder,
            &cfg,
            &quick_schedule(10),
            &fix.noise,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, ErasureError::Diverged { .. }), "{err}");
    }

    #[test]
    fn tampered_reference_is_rejected() {
        let fix = fixture();
        let mut model = fix.model.clone();
        let mut reference = fix.model.clone();
        reference.visit_mut(&mut |name, t| {
            if name == "unet.stem.w" {
                t.data_mut()[0] += 1.0;
            }
        });
        let err = erase(
            &mut model,
            &reference,
            &fix.corpus,
            &fix.encoder,
            &quick_cfg(),
            &quick_schedule(1),
            &fix.noise,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, ErasureError::Contract(_)), "{err}");
    }

    #[test]
    fn unfrozen_encoder_is_rejected() {
        let fix = fixture();
        let mut model = fix.model.clone();
        let reference = fix.model.clone();
        let mut rng = rng::stream(1, &["raw-encoder"]);
        let raw = ImageEncoder::new(16, 8, (4, 8), &mut rng);
        let err = erase(
            &mut model,
            &reference,
            &fix.corpus,
            &raw,
            &quick_cfg(),
            &quick_schedule(1),
            &fix.noise,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, ErasureError::Contract(_)), "{err}");
    }

    #[test]
    fn step_observer_sees_every_iteration_and_can_abort() {
        let fix = fixture();
        let mut model = fix.model.clone();
        let reference = fix.model.clone();
        let mut seen = Vec::new();
        let mut hook = |iter: usize, m: &UNetModel<f32>| -> std::io::Result<()> {
            seen.push((iter, m.weight_hash()));
            Ok(())
        };
        erase(
            &mut model,
            &reference,
            &fix.corpus,
            &fix.encoder,
            &quick_cfg(),
            &quick_schedule(3),
            &fix.noise,
            Some(&mut hook),
        )
        .unwrap();
        assert_eq!(seen.iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(seen[2].1, model.weight_hash());

        let mut model = fix.model.clone();
        let mut failing = |iter: usize, _: &UNetModel<f32>| {
            if iter == 1 {
                Err(std::io::Error::other("disk full"))
            } else {
                Ok(())
            }
        };
        let err = erase(
            &mut model,
            &reference,
            &fix.corpus,
            &fix.encoder,
            &quick_cfg(),
            &quick_schedule(3),
            &fix.noise,
            Some(&mut failing),
        )
        .unwrap_err();
        assert!(matches!(err, ErasureError::Observer { iteration: 1, .. }), "{err}");
    }

    #[test]
    fn text_only_variant_runs_without_the_encoder_pathway() {
        let fix = fixture();
        let mut model = fix.model.clone();
        let reference = fix.model.clone();
        let cfg = ErasureConfig {
            variant: Variant::NegativeOnly,
            use_image: false,
            use_mask: false,
            ..quick_cfg()
        };
        let summary = erase(
            &mut model,
            &reference,
            &fix.corpus,
            &fix.encoder,
            &cfg,
            &quick_schedule(3),
            &fix.noise,
            None,
        )
        .unwrap();
        assert_eq!(summary.trace.len(), 3);
        assert_ne!(summary.initial_hash, summary.final_hash);
        // Image-token weights may still move: the projector is excluded from
        // binding only when no image tokens exist, but its K/V mates see the
        // zero token. The text K/V must move.
        assert!(summary.trained.iter().any(|n| n.ends_with("w_tk")));
        assert!(summary.trained.iter().all(|n| !n.starts_with("unet.proj")));
    }
}
