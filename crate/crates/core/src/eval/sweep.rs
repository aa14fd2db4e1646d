//! Sweep and ablation drivers: run the erasure under a grid of push
//! strengths or the five component combinations, scoring every run with
//! the same battery so rows are comparable.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::asr::{alignment, asr_analog};
use super::frechet::ffd_from_features;
use super::{class_by_name, EvalError, ProbeClassifier, Result};
use crate::datagen::{Corpus, ShapeClass};
use crate::encoder::{concept_prototype, ImageEncoder};
use crate::erasure::{erase, ErasureConfig, GuidanceSchedule, Variant};
use crate::generative::{sample, ConditioningBundle, NoiseSchedule, UNetModel};
use crate::rng;

/// Everything a grid point needs to erase and score one model. The erasure
/// seed and the swept knob are overridden per run; the rest is shared.
pub struct SweepContext<'a> {
    /// Pre-erasure model every run starts from.
    pub model: &'a UNetModel<f32>,
    pub corpus: &'a Corpus,
    /// Conditioning encoder (also used for alignment scores).
    pub encoder: &'a ImageEncoder,
    pub probe: &'a ProbeClassifier,
    pub noise: &'a NoiseSchedule,
    pub erasure: &'a ErasureConfig,
    pub guidance: &'a GuidanceSchedule,
    /// Battery size per scored run.
    pub n_eval: usize,
    /// Benign images sampled per distractor class for the distance score.
    pub n_benign: usize,
    pub cfg_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eta: f64,
    pub seed: u64,
    pub asr: f64,
    pub ffd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub asr: f64,
    pub align_target: f64,
    pub ffd_benign: f64,
}

impl<'a> SweepContext<'a> {
    fn validate(&self) -> Result<()> {
        self.erasure.validate()?;
        if self.n_eval == 0 {
            return Err(EvalError::Contract("n_eval must be positive".into()));
        }
        if self.n_benign < 1 {
            return Err(EvalError::Contract("n_benign must be positive".into()));
        }
        Ok(())
    }

    fn benign_classes(&self) -> Vec<ShapeClass> {
        ShapeClass::ALL
            .into_iter()
            .filter(|c| c.name() != self.erasure.target && c.name() != self.erasure.safe)
            .collect()
    }

    /// Probe features of the corpus benign images, computed once and shared
    /// by every grid point's distance score.
    fn benign_reference(&self) -> Result<Vec<Vec<f64>>> {
        self.benign_classes()
            .into_iter()
            .flat_map(|c| self.corpus.by_class(c))
            .map(|s| self.probe.features(&s.image))
            .collect()
    }

    /// Erase a fresh copy of the model under (cfg, guidance), then score it:
    /// battery hit rate, target alignment, and benign feature distance.
    fn run_point(
        &self,
        cfg: &ErasureConfig,
        guidance: &GuidanceSchedule,
        reference: &[Vec<f64>],
    ) -> Result<(f64, f64, f64)> {
        let mut model = self.model.clone();
        let pristine = self.model.clone();
        erase(
            &mut model,
            &pristine,
            self.corpus,
            self.encoder,
            cfg,
            guidance,
            self.noise,
            None,
        )?;

        let battery_seed = rng::derive_seed(cfg.seed, &["sweep", "asr"]);
        let battery = asr_analog(
            &model,
            self.noise,
            self.probe,
            &cfg.target,
            self.n_eval,
            battery_seed,
            self.cfg_scale,
            None,
        )?;

        let target = class_by_name(&cfg.target)?;
        let proto = concept_prototype(self.encoder, self.corpus, &self.corpus.stats, target)?;
        let align_target =
            alignment(self.encoder, &self.corpus.stats, &battery.images, &proto)?;

        let mut gen_features = Vec::new();
        for class in self.benign_classes() {
            let class_seed = rng::derive_seed(cfg.seed, &["sweep", "benign", class.name()]);
            let images = sample(
                &model,
                &ConditioningBundle::for_text(class.name()),
                self.noise,
                self.n_benign,
                class_seed,
                self.cfg_scale,
            )?;
            for image in &images {
                gen_features.push(self.probe.features(image)?);
            }
        }
        let ffd = ffd_from_features(&gen_features, reference)?;
        Ok((battery.asr, align_target, ffd))
    }
}

/// One erasure-and-score run per (η, seed), rows in grid-major order. The
/// grid must be strictly ascending with at least 4 points and 2 seeds so
/// the emitted curve can support a trend reading.
pub fn sweep_eta(ctx: &SweepContext<'_>, grid: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    ctx.validate()?;
    if grid.len() < 4 {
        return Err(EvalError::Contract(format!(
            "η grid needs at least 4 points, got {}",
            grid.len()
        )));
    }
    if seeds.len() < 2 {
        return Err(EvalError::Contract(format!(
            "sweep needs at least 2 seeds, got {}",
            seeds.len()
        )));
    }
    for eta in grid {
        if !(*eta > 0.0) || !eta.is_finite() {
            return Err(EvalError::Contract(format!("η must be positive, got {eta}")));
        }
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::Contract("η grid must be sorted strictly ascending".into()));
    }

    let reference = ctx.benign_reference()?;
    let jobs: Vec<(f64, u64)> = grid
        .iter()
        .flat_map(|&eta| seeds.iter().map(move |&seed| (eta, seed)))
        .collect();
    jobs.into_par_iter()
        .map(|(eta, seed)| {
            let guidance =
                GuidanceSchedule::new(eta, ctx.guidance.omega, ctx.guidance.t_max, ctx.guidance.mode)?;
            let mut cfg = ctx.erasure.clone();
            cfg.seed = seed;
            let (asr, _, ffd) = ctx.run_point(&cfg, &guidance, &reference)?;
            Ok(SweepRow { eta, seed, asr, ffd })
        })
        .collect()
}

/// The five component combinations, in presentation order: push-only text
/// guidance, then bidirectional guidance with image tokens joining, text
/// dropping out, masking joining, and finally everything on.
pub fn ablation_rows(template: &ErasureConfig) -> Vec<(String, ErasureConfig)> {
    let combo = |variant, use_text, use_image, use_mask| {
        let mut cfg = template.clone();
        cfg.variant = variant;
        cfg.use_text = use_text;
        cfg.use_image = use_image;
        cfg.use_mask = use_mask;
        cfg
    };
    vec![
        ("text".to_string(), combo(Variant::NegativeOnly, true, false, false)),
        ("text+bi".to_string(), combo(Variant::Bidirectional, true, true, false)),
        ("bi".to_string(), combo(Variant::Bidirectional, false, true, false)),
        ("bi+mask".to_string(), combo(Variant::Bidirectional, false, true, true)),
        ("full".to_string(), combo(Variant::Bidirectional, true, true, true)),
    ]
}

/// Erase and score every component combination under every seed. Rows come
/// back combination-major in [`ablation_rows`] order.
pub fn ablation_matrix(ctx: &SweepContext<'_>, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    ctx.validate()?;
    if seeds.is_empty() {
        return Err(EvalError::Contract("ablation needs at least one seed".into()));
    }
    let rows = ablation_rows(ctx.erasure);
    for (name, cfg) in &rows {
        cfg.validate().map_err(|e| {
            EvalError::Contract(format!("ablation row {name:?} is invalid: {e}"))
        })?;
    }
    let reference = ctx.benign_reference()?;
    let jobs: Vec<(String, ErasureConfig, u64)> = rows
        .into_iter()
        .flat_map(|(name, cfg)| {
            seeds.iter().map(move |&seed| (name.clone(), cfg.clone(), seed))
        })
        .collect();
    jobs.into_par_iter()
        .map(|(name, mut cfg, seed)| {
            cfg.seed = seed;
            let (asr, align_target, ffd_benign) = ctx.run_point(&cfg, ctx.guidance, &reference)?;
            Ok(AblationRow { config: name, seed, asr, align_target, ffd_benign })
        })
        .collect()
}
