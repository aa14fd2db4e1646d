//! Basic layers. Feature maps are (channels × pixels) matrices; batch is
//! handled by running one tape per sample, which keeps shapes static and the
//! op set small. Every layer exposes `visit`/`visit_mut` so optimizers and
//! checkpoints can walk named weights without knowing the architecture.

use rand::Rng;

use super::Binder;
use crate::numerics::{ConvGeom, Result, Scalar, Tensor, Var};

/// Dense layer computing `w·x (+ b)` on column-token input (in × n).
#[derive(Clone, Debug)]
pub struct Linear<T: Scalar> {
    name: String,
    pub w: Tensor<T>,
    pub b: Option<Tensor<T>>,
    d_in: usize,
    d_out: usize,
}

impl<T: Scalar> Linear<T> {
    /// Weights drawn from N(0, std²); pass `he_std(d_in)` or `xavier_std`.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Linear {
            name: name.to_string(),
            w: Tensor::randn(&[d_out, d_in], std, rng),
            b: bias.then(|| Tensor::zeros(&[d_out, 1])),
            d_in,
            d_out,
        }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    /// x: (d_in × n) → (d_out × n).
    pub fn forward(&self, binder: &mut Binder<'_, '_, T>, x: Var) -> Result<Var> {
        let tape = binder.tape();
        let w = binder.bind(&format!("{}.w", self.name), &self.w);
        let mut y = tape.matmul(w, x)?;
        if let Some(b) = &self.b {
            let b = binder.bind(&format!("{}.b", self.name), b);
            y = tape.row_bias(y, b)?;
        }
        Ok(y)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{}.w", self.name), &self.w);
        if let Some(b) = &self.b {
            f(&format!("{}.b", self.name), b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{}.w", self.name), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&format!("{}.b", self.name), b);
        }
    }
}

/// 3×3 (or 1×1) convolution stored as a (out × in·k²) kernel matrix and
/// applied as im2col + matmul.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    name: String,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            name: name.to_string(),
            w: Tensor::randn(&[out_ch, fan_in], he_std(fan_in), rng),
            b: Tensor::zeros(&[out_ch, 1]),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_ch(&self) -> usize {
        self.out_ch
    }

    /// x: (in_ch × h·w) → (out_ch × oh·ow); returns the output map and size.
    pub fn forward(
        &self,
        binder: &mut Binder<'_, '_, T>,
        x: Var,
        h: usize,
        w: usize,
    ) -> Result<(Var, usize, usize)> {
        let tape = binder.tape();
        let geom = ConvGeom {
            channels: self.in_ch,
            h,
            w,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        let cols = tape.im2col(x, geom)?;
        let wv = binder.bind(&format!("{}.w", self.name), &self.w);
        let y = tape.matmul(wv, cols)?;
        let b = binder.bind(&format!("{}.b", self.name), &self.b);
        let y = tape.row_bias(y, b)?;
        Ok((y, geom.out_h(), geom.out_w()))
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{}.w", self.name), &self.w);
        f(&format!("{}.b", self.name), &self.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{}.w", self.name), &mut self.w);
        f(&format!("{}.b", self.name), &mut self.b);
    }
}

/// Group normalization with learned per-channel scale and shift.
#[derive(Clone, Debug)]
pub struct GroupNorm<T: Scalar> {
    name: String,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    groups: usize,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(name: &str, channels: usize, groups: usize) -> Self {
        GroupNorm {
            name: name.to_string(),
            gamma: Tensor::full(&[channels, 1], T::one()),
            beta: Tensor::zeros(&[channels, 1]),
            groups,
        }
    }

    pub fn forward(&self, binder: &mut Binder<'_, '_, T>, x: Var) -> Result<Var> {
        let tape = binder.tape();
        let gamma = binder.bind(&format!("{}.gamma", self.name), &self.gamma);
        let beta = binder.bind(&format!("{}.beta", self.name), &self.beta);
        tape.group_norm(x, gamma, beta, self.groups, T::of(1e-5))
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{}.gamma", self.name), &self.gamma);
        f(&format!("{}.beta", self.name), &self.beta);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma);
        f(&format!("{}.beta", self.name), &mut self.beta);
    }
}

/// Kaiming init scale for layers followed by a roughly-ReLU nonlinearity.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Xavier init scale for linear projections.
pub fn xavier_std(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}
