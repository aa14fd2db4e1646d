//! Concept encoder: a small CNN classifier over the shape corpus whose
//! penultimate activations serve as concept embeddings. From it derive
//! unit-norm class prototypes (measured on masked samples, i.e. the concept
//! with background and clutter stripped), plus the bias-free projector that
//! expands one embedding into a short token sequence for cross-attention and
//! the learned text-token vocabulary with an all-zeros null token.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{apply_mask, preprocess, ChannelStats, Corpus, ShapeClass};
use crate::nn::{Binder, Conv2d, GradMap, Linear};
use crate::numerics::{NumericsError, Scalar, Tape, Tensor, Var};
use crate::optim::{Adam, AdamConfig};
use crate::rng;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("training diverged at step {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("encoder is frozen; parameters are immutable")]
    Frozen,
    #[error("unknown concept {name:?}; vocabulary has {known:?}")]
    UnknownConcept { name: String, known: Vec<String> },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_embed: usize,
    /// Widths of the three conv stages (stage two reuses the first width).
    pub channels: (usize, usize),
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Per-class samples used for training; the rest are held out.
    pub train_per_class: usize,
    /// Train-time per-channel color jitter (standardized units). Colors are
    /// nuisance variation in this corpus; jitter keeps the classifier off
    /// that shortcut. Accuracy is always measured on clean inputs.
    pub aug_color: f64,
    /// Train-time i.i.d. pixel noise (standardized units).
    pub aug_noise: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_embed: 32,
            channels: (8, 16),
            epochs: 30,
            batch: 8,
            lr: 1e-3,
            seed: 0,
            train_per_class: 160,
            aug_color: 0.3,
            aug_noise: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderSummary {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

/// Full-resolution conv, two stride-2 convs, an embedding layer, and a
/// classification head. Expects preprocessed (standardized) images.
#[derive(Debug)]
pub struct ImageEncoder {
    conv0: Conv2d<f32>,
    conv1: Conv2d<f32>,
    conv2: Conv2d<f32>,
    fc: Linear<f32>,
    head: Linear<f32>,
    size: usize,
    d_embed: usize,
    channels: (usize, usize),
    frozen: bool,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(
        size: usize,
        d_embed: usize,
        channels: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let (c1, c2) = channels;
        ImageEncoder {
            conv0: Conv2d::new("enc.conv0", 3, c1, 3, 1, 1, rng),
            conv1: Conv2d::new("enc.conv1", c1, c1, 3, 2, 1, rng),
            conv2: Conv2d::new("enc.conv2", c1, c2, 3, 2, 1, rng),
            fc: Linear::new(
                "enc.fc",
                2 * (2 * c1 + c2),
                d_embed,
                false,
                crate::nn::he_std(2 * (2 * c1 + c2)),
                rng,
            ),
            head: Linear::new("enc.head", d_embed, 4, true, crate::nn::xavier_std(d_embed), rng),
            size,
            d_embed,
            channels,
            frozen: false,
        }
    }

    pub fn d_embed(&self) -> usize {
        self.d_embed
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> (usize, usize) {
        self.channels
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Embedding column (d_embed × 1) for a (3 × size²) input node.
    /// Conv features at two scales are pooled over space before the
    /// embedding layer, so the representation tracks what is in the image
    /// rather than where.
    pub fn features(&self, binder: &mut Binder<'_, '_, f32>, x: Var) -> Result<Var> {
        let tape = binder.tape();
        let (h0, oh0, ow0) = self.conv0.forward(binder, x, self.size, self.size)?;
        let a0 = tape.silu(h0);
        let (h1, oh1, ow1) = self.conv1.forward(binder, a0, oh0, ow0)?;
        let a1 = tape.silu(h1);
        let (h2, oh2, ow2) = self.conv2.forward(binder, a1, oh1, ow1)?;
        let a2 = tape.silu(h2);
        // Dual readout at two scales: the mean keeps aggregate statistics
        // while log-sum-exp keeps sharp localized detector hits (a soft max)
        // that averaging would dilute; the mid-resolution map contributes
        // boundary detail the coarsest map has already blurred away. All
        // four readouts are position-independent.
        // Each readout block is standardized on its own (parameter-free):
        // removing common-mode activation energy keeps the class means from
        // collapsing onto one shared direction, and the mean/softmax halves
        // live on different scales.
        let readout = |m: Var, ch: usize, n: usize| -> Result<Var> {
            let pool = tape.leaf(&Tensor::full(&[n, 1], 1.0 / n as f32));
            let mean_pool = tape.matmul(m, pool)?;
            let lse_pool = tape.logsumexp_rows(m);
            let cat = tape.concat_rows(mean_pool, lse_pool)?;
            let gamma = tape.leaf(&Tensor::full(&[2 * ch, 1], 1.0));
            let beta = tape.leaf(&Tensor::zeros(&[2 * ch, 1]));
            Ok(tape.group_norm(cat, gamma, beta, 2, 1e-5)?)
        };
        let (c1, c2) = self.channels;
        let fine = readout(a0, c1, oh0 * ow0)?;
        let mid = readout(a1, c1, oh1 * ow1)?;
        let coarse = readout(a2, c2, oh2 * ow2)?;
        let z = tape.concat_rows(tape.concat_rows(fine, mid)?, coarse)?;
        self.fc.forward(binder, z).map_err(Into::into)
    }

    /// (features, logits) for one input node.
    pub fn features_and_logits(
        &self,
        binder: &mut Binder<'_, '_, f32>,
        x: Var,
    ) -> Result<(Var, Var)> {
        let features = self.features(binder, x)?;
        let hidden = binder.tape().silu(features);
        let logits = self.head.forward(binder, hidden)?;
        Ok((features, logits))
    }

    /// Embedding for one preprocessed image, as a flat tensor of d_embed.
    pub fn encode(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        if image.numel() != 3 * self.size * self.size {
            return Err(NumericsError::dim(
                "encode",
                image.shape(),
                &[3, self.size, self.size],
            )
            .into());
        }
        let tape = Tape::new();
        let mut binder = Binder::frozen(&tape);
        let x = tape.leaf(image);
        let emb = self.features(&mut binder, x)?;
        Ok(tape.value_shaped(emb, &[self.d_embed])?)
    }

    /// Class probabilities for one preprocessed image.
    pub fn classify(&self, image: &Tensor<f32>) -> Result<(ShapeClass, [f32; 4])> {
        let tape = Tape::new();
        let mut binder = Binder::frozen(&tape);
        let x = tape.leaf(image);
        let (_, logits) = self.features_and_logits(&mut binder, x)?;
        let col = tape.value(logits);
        let probs = crate::numerics::softmax(&col, 0)?;
        let mut best = 0usize;
        for i in 1..4 {
            if probs.data()[i] > probs.data()[best] {
                best = i;
            }
        }
        let mut out = [0.0f32; 4];
        out.copy_from_slice(probs.data());
        Ok((ShapeClass::from_index(best).expect("4 classes"), out))
    }

    /// Optimizer entry point; refuses to touch a frozen encoder.
    pub fn apply_grads(&mut self, adam: &mut Adam<f32>, grads: &GradMap<f32>) -> Result<usize> {
        if self.frozen {
            return Err(EncoderError::Frozen);
        }
        Ok(adam.step_with(grads, |f| self.visit_mut_unchecked(f))?)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        self.conv0.visit(f);
        self.conv1.visit(f);
        self.conv2.visit(f);
        self.fc.visit(f);
        self.head.visit(f);
    }

    /// Weight walker for checkpoint restore; does not consult the frozen
    /// flag (loading a frozen encoder from disk is legitimate).
    pub fn visit_mut_unchecked(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        self.conv0.visit_mut(f);
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.fc.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Cross-entropy on a (k × 1) logit column.
fn cross_entropy(tape: &Tape<f32>, logits: Var, label: usize) -> Result<Var> {
    let row = tape.transpose(logits);
    let lse = tape.logsumexp_rows(row);
    let picked = tape.row_select(logits, label)?;
    Ok(tape.sub(lse, picked)?)
}

/// Train a classifier on the corpus (preprocessed with corpus stats) and
/// freeze it. Returns the encoder and a training summary.
pub fn train_encoder(corpus: &Corpus, cfg: &EncoderConfig) -> Result<(ImageEncoder, EncoderSummary)> {
    let classes: std::collections::HashSet<ShapeClass> =
        corpus.samples.iter().map(|s| s.label).collect();
    if classes.len() < 2 {
        return Err(EncoderError::Contract(format!(
            "need ≥2 classes to train a concept encoder, corpus has {}",
            classes.len()
        )));
    }
    let mut init_rng = rng::stream(cfg.seed, &["encoder", "init"]);
    let mut enc = ImageEncoder::new(corpus.spec.size, cfg.d_embed, cfg.channels, &mut init_rng);
    let (train_idx, held_idx) = corpus.split(cfg.train_per_class);
    if train_idx.is_empty() {
        return Err(EncoderError::Contract("empty training split".to_string()));
    }
    let inputs: Vec<Tensor<f32>> = corpus
        .samples
        .iter()
        .map(|s| preprocess(&s.image, &corpus.stats))
        .collect();

    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let pixels = corpus.spec.size * corpus.spec.size;
    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let tag = format!("{epoch}");
        order.shuffle(&mut rng::stream(cfg.seed, &["encoder", "shuffle", &tag]));
        let mut aug_rng = rng::stream(cfg.seed, &["encoder", "aug", &tag]);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let tape = Tape::new();
            let mut binder = Binder::train_all(&tape);
            let mut total: Option<Var> = None;
            for &i in chunk {
                let mut image = inputs[i].clone();
                for c in 0..3 {
                    let shift = f32::sample_normal(&mut aug_rng) * cfg.aug_color as f32;
                    let gain = 1.0 + f32::sample_normal(&mut aug_rng) * 0.5 * cfg.aug_color as f32;
                    for v in &mut image.data_mut()[c * pixels..(c + 1) * pixels] {
                        *v = *v * gain + shift + f32::sample_normal(&mut aug_rng) * cfg.aug_noise as f32;
                    }
                }
                let x = tape.leaf(&image);
                let (_, logits) = enc.features_and_logits(&mut binder, x)?;
                let loss = cross_entropy(&tape, logits, corpus.samples[i].label.index())?;
                total = Some(match total {
                    None => loss,
                    Some(t) => tape.add(t, loss)?,
                });
            }
            let mean = tape.scale(total.expect("non-empty chunk"), 1.0 / chunk.len() as f32);
            let loss_value = f64::from(tape.value(mean).data()[0]);
            if !loss_value.is_finite() {
                return Err(EncoderError::Diverged { iteration: step, loss: loss_value });
            }
            epoch_loss += loss_value * chunk.len() as f64;
            let bindings = binder.finish();
            let grads = tape.backward(mean)?;
            let gmap = bindings.grads(&grads)?;
            enc.apply_grads(&mut adam, &gmap)?;
            step += 1;
        }
        epoch_losses.push(epoch_loss / train_idx.len() as f64);
    }
    enc.set_frozen(true);

    let accuracy = |idx: &[usize]| -> Result<f64> {
        if idx.is_empty() {
            return Ok(f64::NAN);
        }
        let mut hits = 0usize;
        for &i in idx {
            let (label, _) = enc.classify(&inputs[i])?;
            hits += usize::from(label == corpus.samples[i].label);
        }
        Ok(hits as f64 / idx.len() as f64)
    };
    let summary = EncoderSummary {
        epoch_losses,
        train_accuracy: accuracy(&train_idx)?,
        heldout_accuracy: accuracy(&held_idx)?,
    };
    Ok((enc, summary))
}

/// Unit-norm mean embedding of one class, measured on masked samples (the
/// concept with background and clutter replaced by the foreground mean).
pub fn concept_prototype(
    encoder: &ImageEncoder,
    corpus: &Corpus,
    stats: &ChannelStats,
    class: ShapeClass,
) -> Result<Tensor<f32>> {
    let mut acc = Tensor::<f32>::zeros(&[encoder.d_embed()]);
    let mut count = 0usize;
    for sample in corpus.by_class(class) {
        let masked = apply_mask(&sample.image, &sample.mask, sample.mean_color)
            .map_err(|e| EncoderError::Contract(e.to_string()))?;
        let emb = encoder.encode(&preprocess(&masked, stats))?;
        acc = acc.add(&emb)?;
        count += 1;
    }
    if count == 0 {
        return Err(EncoderError::Contract(format!(
            "no samples of class {} to build a prototype from",
            class.name()
        )));
    }
    let mean = acc.scale(1.0 / count as f32);
    let norm = mean.norm() as f32;
    if norm <= 0.0 {
        return Err(EncoderError::Contract("prototype collapsed to zero".to_string()));
    }
    Ok(mean.scale(1.0 / norm))
}

/// Learned text tokens, one d_token-wide row per concept name. The null
/// token is all zeros: downstream attention sees zero keys and values, so
/// null conditioning cannot move the residual stream. Generic over the
/// scalar so a double-precision denoiser can own and train its tokens.
#[derive(Clone, Debug, Default)]
pub struct ConceptVocabulary<T: Scalar = f32> {
    d_token: usize,
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ConceptVocabulary<T> {
    pub fn new(d_token: usize) -> Self {
        ConceptVocabulary { d_token, entries: BTreeMap::new() }
    }

    /// Fresh trainable tokens for the given names.
    pub fn init_random<R: Rng + ?Sized>(names: &[&str], d_token: usize, rng: &mut R) -> Self {
        let mut vocab = ConceptVocabulary::new(d_token);
        for name in names {
            let token = Tensor::randn(&[1, d_token], 0.1, rng);
            vocab.entries.insert((*name).to_string(), token);
        }
        vocab
    }

    pub fn d_token(&self) -> usize {
        self.d_token
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: &str, token: Tensor<T>) -> Result<()> {
        if token.numel() != self.d_token {
            return Err(EncoderError::Contract(format!(
                "token for {name:?} has {} dims, vocabulary is {}",
                token.numel(),
                self.d_token
            )));
        }
        self.entries
            .insert(name.to_string(), token.reshape(&[1, self.d_token])?);
        Ok(())
    }

    /// Concept token as a (1 × d_token) row for attention.
    pub fn token(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).ok_or_else(|| EncoderError::UnknownConcept {
            name: name.to_string(),
            known: self.entries.keys().cloned().collect(),
        })
    }

    /// All-zeros token row (1 × d_token).
    pub fn null(&self) -> Tensor<T> {
        Tensor::zeros(&[1, self.d_token])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (name, token) in &self.entries {
            f(&format!("vocab.{name}"), token);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (name, token) in self.entries.iter_mut() {
            f(&format!("vocab.{name}"), token);
        }
    }
}

/// Bias-free linear map from one embedding to `n_tokens` attention tokens.
/// Strict linearity keeps the null pathway exact: a zero embedding projects
/// to zero tokens, which attention treats as an exact no-op.
#[derive(Clone, Debug)]
pub struct Projector<T: Scalar = f32> {
    lin: Linear<T>,
    n_tokens: usize,
    d_token: usize,
}

impl<T: Scalar> Projector<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        d_embed: usize,
        n_tokens: usize,
        d_token: usize,
        rng: &mut R,
    ) -> Self {
        Projector {
            lin: Linear::new(name, d_embed, n_tokens * d_token, false, crate::nn::xavier_std(d_embed), rng),
            n_tokens,
            d_token,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn d_token(&self) -> usize {
        self.d_token
    }

    pub fn d_embed(&self) -> usize {
        self.lin.d_in()
    }

    /// embedding: (d_embed × 1) node → (n_tokens × d_token) token matrix.
    pub fn project(&self, binder: &mut Binder<'_, '_, T>, embedding: Var) -> Result<Var> {
        let col = self.lin.forward(binder, embedding)?;
        Ok(binder.tape().reshape(col, self.n_tokens, self.d_token)?)
    }

    /// Tensor-level projection for callers outside a tape.
    pub fn project_tensor(&self, embedding: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let mut binder = Binder::frozen(&tape);
        let e = tape.leaf(&embedding.clone().reshape(&[embedding.numel(), 1])?);
        let tokens = self.project(&mut binder, e)?;
        Ok(tape.value(tokens))
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.lin.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.lin.visit_mut(f);
    }
}
