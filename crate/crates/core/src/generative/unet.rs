//! The noise-prediction UNet: a 16×16 → 8×8 → 4×4 encoder/decoder with
//! group-norm residual blocks, sinusoidal timestep conditioning, and a
//! decoupled text/image cross-attention block at every resolution. The model
//! owns its learned text-token vocabulary and the projector that turns one
//! image embedding into a short token sequence, so a checkpoint restores the
//! full conditional denoiser.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{cast, ConditioningBundle, GenerativeError, Result};
use crate::datagen::ChannelStats;
use crate::encoder::{ConceptVocabulary, Projector};
use crate::nn::{Binder, Conv2d, DecoupledCrossAttention, GroupNorm, Linear};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Sinusoidal position table for timesteps plus a two-layer MLP.
#[derive(Clone, Debug)]
pub struct TimeEmbed<T: Scalar> {
    table: Tensor<T>,
    l1: Linear<T>,
    l2: Linear<T>,
    dim: usize,
}

impl<T: Scalar> TimeEmbed<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, steps: usize, dim: usize, rng: &mut R) -> Self {
        let half = dim / 2;
        let table = Tensor::from_fn(&[steps, dim], |i| {
            let (t, j) = (i / dim, i % dim);
            let k = j % half;
            let freq = (-(10_000.0f64).ln() * k as f64 / half as f64).exp();
            let angle = t as f64 * freq;
            T::of(if j < half { angle.sin() } else { angle.cos() })
        });
        TimeEmbed {
            table,
            l1: Linear::new(&format!("{name}.l1"), dim, dim, true, crate::nn::he_std(dim), rng),
            l2: Linear::new(&format!("{name}.l2"), dim, dim, true, crate::nn::he_std(dim), rng),
            dim,
        }
    }

    pub fn steps(&self) -> usize {
        self.table.shape()[0]
    }

    /// Embedding column (dim × 1) for timestep t.
    pub fn forward(&self, binder: &mut Binder<'_, '_, T>, t: usize) -> Result<Var> {
        if t >= self.steps() {
            return Err(GenerativeError::Contract(format!(
                "timestep {t} outside embedding table of {} steps",
                self.steps()
            )));
        }
        let tape = binder.tape();
        let row = Tensor::from_fn(&[self.dim, 1], |i| self.table.data()[t * self.dim + i]);
        let x = tape.leaf(&row);
        let h = tape.silu(self.l1.forward(binder, x)?);
        Ok(self.l2.forward(binder, h)?)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.l1.visit(f);
        self.l2.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.l1.visit_mut(f);
        self.l2.visit_mut(f);
    }
}

/// Pre-norm residual block with a timestep bias injected between the convs.
#[derive(Clone, Debug)]
pub struct ResBlock<T: Scalar> {
    gn1: GroupNorm<T>,
    conv1: Conv2d<T>,
    t_proj: Linear<T>,
    gn2: GroupNorm<T>,
    conv2: Conv2d<T>,
    skip: Option<Conv2d<T>>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        c_in: usize,
        c_out: usize,
        d_temb: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        ResBlock {
            gn1: GroupNorm::new(&format!("{name}.gn1"), c_in, groups),
            conv1: Conv2d::new(&format!("{name}.conv1"), c_in, c_out, 3, 1, 1, rng),
            t_proj: Linear::new(
                &format!("{name}.temb"),
                d_temb,
                c_out,
                true,
                crate::nn::xavier_std(d_temb),
                rng,
            ),
            gn2: GroupNorm::new(&format!("{name}.gn2"), c_out, groups),
            conv2: Conv2d::new(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng),
            skip: (c_in != c_out)
                .then(|| Conv2d::new(&format!("{name}.skip"), c_in, c_out, 1, 1, 0, rng)),
        }
    }

    pub fn forward(
        &self,
        binder: &mut Binder<'_, '_, T>,
        x: Var,
        temb: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let tape = binder.tape();
        let y = tape.silu(self.gn1.forward(binder, x)?);
        let (y, oh, ow) = self.conv1.forward(binder, y, h, w)?;
        let bias = self.t_proj.forward(binder, temb)?;
        let y = tape.row_bias(y, bias)?;
        let y = tape.silu(self.gn2.forward(binder, y)?);
        let (y, _, _) = self.conv2.forward(binder, y, oh, ow)?;
        let shortcut = match &self.skip {
            Some(conv) => conv.forward(binder, x, h, w)?.0,
            None => x,
        };
        Ok(tape.add(shortcut, y)?)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.gn1.visit(f);
        self.conv1.visit(f);
        self.t_proj.visit(f);
        self.gn2.visit(f);
        self.conv2.visit(f);
        if let Some(s) = &self.skip {
            s.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.gn1.visit_mut(f);
        self.conv1.visit_mut(f);
        self.t_proj.visit_mut(f);
        self.gn2.visit_mut(f);
        self.conv2.visit_mut(f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(f);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub size: usize,
    /// Channel widths at full and half/quarter resolution.
    pub channels: (usize, usize),
    pub d_attn: usize,
    pub d_temb: usize,
    /// Width of the image-encoder embeddings the projector consumes.
    pub d_embed: usize,
    pub n_proj_tokens: usize,
    pub groups: usize,
    pub t_steps: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            size: 16,
            channels: (8, 16),
            d_attn: 32,
            d_temb: 32,
            d_embed: 32,
            n_proj_tokens: 4,
            groups: 4,
            t_steps: super::NoiseSchedule::DEFAULT_STEPS,
        }
    }
}

/// Conditional ε-predictor. Input and output are (3 × size²) maps in the
/// standardized pixel space recorded in `stats`.
#[derive(Clone, Debug)]
pub struct UNetModel<T: Scalar = f32> {
    pub cfg: UNetConfig,
    /// Pixel statistics of the corpus the model was trained on; sampling
    /// uses them to map back to display space.
    pub stats: ChannelStats,
    temb: TimeEmbed<T>,
    stem: Conv2d<T>,
    enc0_res: ResBlock<T>,
    enc0_attn: DecoupledCrossAttention<T>,
    down0: Conv2d<T>,
    enc1_res: ResBlock<T>,
    enc1_attn: DecoupledCrossAttention<T>,
    down1: Conv2d<T>,
    mid_res1: ResBlock<T>,
    mid_attn: DecoupledCrossAttention<T>,
    mid_res2: ResBlock<T>,
    up1: Conv2d<T>,
    dec1_res: ResBlock<T>,
    dec1_attn: DecoupledCrossAttention<T>,
    up0: Conv2d<T>,
    dec0_res: ResBlock<T>,
    dec0_attn: DecoupledCrossAttention<T>,
    head_gn: GroupNorm<T>,
    head: Conv2d<T>,
    pub vocab: ConceptVocabulary<T>,
    pub projector: Projector<T>,
}

impl<T: Scalar> UNetModel<T> {
    pub fn new<R: Rng + ?Sized>(cfg: UNetConfig, concepts: &[&str], rng: &mut R) -> Result<Self> {
        if cfg.size % 4 != 0 {
            return Err(GenerativeError::Contract(format!(
                "size {} must be divisible by 4 for two downsampling stages",
                cfg.size
            )));
        }
        let (c1, c2) = cfg.channels;
        if c1 % cfg.groups != 0 || c2 % cfg.groups != 0 {
            return Err(GenerativeError::Contract(format!(
                "channel widths {c1}/{c2} must be divisible by {} norm groups",
                cfg.groups
            )));
        }
        let attn = |name: &str, ch: usize, rng: &mut R| {
            DecoupledCrossAttention::new(name, ch, cfg.d_attn, cfg.d_attn, rng)
        };
        let mut head = Conv2d::new("unet.head.conv", c1, 3, 3, 1, 1, rng);
        // Zero-init the output conv: a fresh model predicts ε̂ = 0, which
        // keeps the first training steps numerically tame.
        head.visit_mut(&mut |_, t| *t = Tensor::zeros(t.shape()));
        Ok(UNetModel {
            cfg,
            stats: ChannelStats::identity(),
            temb: TimeEmbed::new("unet.temb", cfg.t_steps, cfg.d_temb, rng),
            stem: Conv2d::new("unet.stem", 3, c1, 3, 1, 1, rng),
            enc0_res: ResBlock::new("unet.enc0.res", c1, c1, cfg.d_temb, cfg.groups, rng),
            enc0_attn: attn("unet.enc0.attn", c1, rng),
            down0: Conv2d::new("unet.down0", c1, c2, 3, 2, 1, rng),
            enc1_res: ResBlock::new("unet.enc1.res", c2, c2, cfg.d_temb, cfg.groups, rng),
            enc1_attn: attn("unet.enc1.attn", c2, rng),
            down1: Conv2d::new("unet.down1", c2, c2, 3, 2, 1, rng),
            mid_res1: ResBlock::new("unet.mid.res1", c2, c2, cfg.d_temb, cfg.groups, rng),
            mid_attn: attn("unet.mid.attn", c2, rng),
            mid_res2: ResBlock::new("unet.mid.res2", c2, c2, cfg.d_temb, cfg.groups, rng),
            up1: Conv2d::new("unet.up1", c2, c2, 3, 1, 1, rng),
            dec1_res: ResBlock::new("unet.dec1.res", 2 * c2, c2, cfg.d_temb, cfg.groups, rng),
            dec1_attn: attn("unet.dec1.attn", c2, rng),
            up0: Conv2d::new("unet.up0", c2, c1, 3, 1, 1, rng),
            dec0_res: ResBlock::new("unet.dec0.res", 2 * c1, c1, cfg.d_temb, cfg.groups, rng),
            dec0_attn: attn("unet.dec0.attn", c1, rng),
            head_gn: GroupNorm::new("unet.head.gn", c1, cfg.groups),
            head,
            vocab: ConceptVocabulary::init_random(concepts, cfg.d_attn, rng),
            projector: Projector::new("unet.proj", cfg.d_embed, cfg.n_proj_tokens, cfg.d_attn, rng),
        })
    }

    /// Resolve the bundle into (text_tokens, image_tokens) tape nodes.
    /// Text goes through the learned vocabulary (trainable when the binder
    /// says so); image embeddings go through the trainable projector. Absent
    /// sides contribute an all-zeros token, which attention ignores exactly.
    fn condition_tokens(
        &self,
        binder: &mut Binder<'_, '_, T>,
        cond: &ConditioningBundle,
    ) -> Result<(Var, Var)> {
        let tape = binder.tape();
        let mut text = match &cond.text {
            Some(name) => binder.bind(&format!("vocab.{name}"), self.vocab.token(name)?),
            None => tape.leaf(&self.vocab.null()),
        };
        if let Some(offset) = &cond.text_offset {
            if cond.text.is_none() {
                return Err(GenerativeError::Contract(
                    "text offset given without a text token to perturb".into(),
                ));
            }
            if offset.numel() != self.cfg.d_attn {
                return Err(GenerativeError::Contract(format!(
                    "text offset has {} dims, tokens have {}",
                    offset.numel(),
                    self.cfg.d_attn
                )));
            }
            let row = cast::<T>(offset).reshape(&[1, self.cfg.d_attn])?;
            text = tape.add(text, tape.leaf(&row))?;
        }
        let mut image: Option<Var> = None;
        for emb in [&cond.image_neg, &cond.image_pos].into_iter().flatten() {
            if emb.numel() != self.cfg.d_embed {
                return Err(GenerativeError::Contract(format!(
                    "image embedding has {} dims, projector expects {}",
                    emb.numel(),
                    self.cfg.d_embed
                )));
            }
            let col = cast::<T>(emb).reshape(&[self.cfg.d_embed, 1])?;
            let tokens = self.projector.project(binder, tape.leaf(&col))?;
            image = Some(match image {
                None => tokens,
                Some(prev) => tape.concat_rows(prev, tokens)?,
            });
        }
        let image = match image {
            Some(v) => v,
            None => tape.leaf(&Tensor::zeros(&[1, self.cfg.d_attn])),
        };
        Ok((text, image))
    }

    /// Predict ε̂ for a (3 × size²) latent node at timestep t.
    pub fn forward(
        &self,
        binder: &mut Binder<'_, '_, T>,
        z: Var,
        t: usize,
        cond: &ConditioningBundle,
    ) -> Result<Var> {
        let tape = binder.tape();
        let s = self.cfg.size;
        let (text, image) = self.condition_tokens(binder, cond)?;
        let temb = self.temb.forward(binder, t)?;

        let (x, h0, w0) = self.stem.forward(binder, z, s, s)?;
        tape.check_finite(x, "unet.stem")?;
        let x = self.enc0_res.forward(binder, x, temb, h0, w0)?;
        let skip0 = self.enc0_attn.forward(binder, x, text, image)?;
        tape.check_finite(skip0, "unet.enc0")?;

        let (x, h1, w1) = self.down0.forward(binder, skip0, h0, w0)?;
        let x = self.enc1_res.forward(binder, x, temb, h1, w1)?;
        let skip1 = self.enc1_attn.forward(binder, x, text, image)?;
        tape.check_finite(skip1, "unet.enc1")?;

        let (x, h2, w2) = self.down1.forward(binder, skip1, h1, w1)?;
        let x = self.mid_res1.forward(binder, x, temb, h2, w2)?;
        let x = self.mid_attn.forward(binder, x, text, image)?;
        let x = self.mid_res2.forward(binder, x, temb, h2, w2)?;
        tape.check_finite(x, "unet.mid")?;

        let (c1, c2) = self.cfg.channels;
        let x = tape.upsample2(x, c2, h2, w2)?;
        let (x, _, _) = self.up1.forward(binder, x, h1, w1)?;
        let x = tape.concat_rows(x, skip1)?;
        let x = self.dec1_res.forward(binder, x, temb, h1, w1)?;
        let x = self.dec1_attn.forward(binder, x, text, image)?;
        tape.check_finite(x, "unet.dec1")?;

        let x = tape.upsample2(x, c2, h1, w1)?;
        let (x, _, _) = self.up0.forward(binder, x, h0, w0)?;
        let x = tape.concat_rows(x, skip0)?;
        let x = self.dec0_res.forward(binder, x, temb, h0, w0)?;
        let x = self.dec0_attn.forward(binder, x, text, image)?;
        tape.check_finite(x, "unet.dec0")?;

        let x = tape.silu(self.head_gn.forward(binder, x)?);
        let (out, _, _) = self.head.forward(binder, x, h0, w0)?;
        tape.check_finite(out, "unet.head")?;
        let _ = c1;
        Ok(out)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.temb.visit(f);
        self.stem.visit(f);
        self.enc0_res.visit(f);
        self.enc0_attn.visit(f);
        self.down0.visit(f);
        self.enc1_res.visit(f);
        self.enc1_attn.visit(f);
        self.down1.visit(f);
        self.mid_res1.visit(f);
        self.mid_attn.visit(f);
        self.mid_res2.visit(f);
        self.up1.visit(f);
        self.dec1_res.visit(f);
        self.dec1_attn.visit(f);
        self.up0.visit(f);
        self.dec0_res.visit(f);
        self.dec0_attn.visit(f);
        self.head_gn.visit(f);
        self.head.visit(f);
        self.vocab.visit(f);
        self.projector.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.temb.visit_mut(f);
        self.stem.visit_mut(f);
        self.enc0_res.visit_mut(f);
        self.enc0_attn.visit_mut(f);
        self.down0.visit_mut(f);
        self.enc1_res.visit_mut(f);
        self.enc1_attn.visit_mut(f);
        self.down1.visit_mut(f);
        self.mid_res1.visit_mut(f);
        self.mid_attn.visit_mut(f);
        self.mid_res2.visit_mut(f);
        self.up1.visit_mut(f);
        self.dec1_res.visit_mut(f);
        self.dec1_attn.visit_mut(f);
        self.up0.visit_mut(f);
        self.dec0_res.visit_mut(f);
        self.dec0_attn.visit_mut(f);
        self.head_gn.visit_mut(f);
        self.head.visit_mut(f);
        self.vocab.visit_mut(f);
        self.projector.visit_mut(f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// FNV-1a over parameter names and values; constant iff the weights are.
    pub fn weight_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        self.visit(&mut |name, t| {
            eat(name.as_bytes());
            for v in t.data() {
                eat(&v.as_f64().to_le_bytes());
            }
        });
        h
    }
}

/// One-off forward pass outside any training tape. The latent may be shaped
/// [3, s, s] or [3, s²]; the prediction comes back as [3, s, s].
pub fn predict_noise<T: Scalar>(
    model: &UNetModel<T>,
    z_t: &Tensor<T>,
    t: usize,
    cond: &ConditioningBundle,
) -> Result<Tensor<T>> {
    let s = model.cfg.size;
    let flat = z_t.clone().reshape(&[3, s * s])?;
    let tape = Tape::new();
    let mut binder = Binder::frozen(&tape);
    let z = tape.leaf(&flat);
    let out = model.forward(&mut binder, z, t, cond)?;
    Ok(tape.value_shaped(out, &[3, s, s])?)
}
