//! Decoupled cross-attention: the query stream attends to text tokens and
//! image tokens through two separate key/value projections, and the two
//! attention readouts are summed before the output projection. Keeping the
//! pathways separate is what lets an editing pass retune how the model
//! listens to each conditioning source independently.

use rand::Rng;

use super::layers::xavier_std;
use super::Binder;
use crate::numerics::{NumericsError, Result, Scalar, Tape, Tensor, Var};

/// Pure-tensor reference of the fused readout:
/// `softmax(q·k_tᵀ/√d)·v_t + softmax(q·k_iᵀ/√d)·v_i`.
/// All inputs share the attention width d = q.cols; k/v row counts must match
/// within each branch.
pub fn attention_fuse<T: Scalar>(
    q: &Tensor<T>,
    k_text: &Tensor<T>,
    v_text: &Tensor<T>,
    k_image: &Tensor<T>,
    v_image: &Tensor<T>,
) -> Result<Tensor<T>> {
    let branch = |k: &Tensor<T>, v: &Tensor<T>| -> Result<Tensor<T>> {
        if k.shape()[0] != v.shape()[0] || k.shape()[1] != q.shape()[1] || v.shape()[1] != q.shape()[1]
        {
            return Err(NumericsError::dim("attention_fuse", k.shape(), v.shape()));
        }
        let d = q.shape()[1];
        let scores = q
            .matmul(&k.transpose2()?)?
            .scale(T::of(1.0 / (d as f64).sqrt()));
        let att = crate::numerics::softmax(&scores, 1)?;
        att.matmul(v)
    };
    branch(k_text, v_text)?.add(&branch(k_image, v_image)?)
}

/// Tape-side twin of [`attention_fuse`], used inside the layer forward.
pub fn fuse_on_tape<T: Scalar>(
    tape: &Tape<T>,
    q: Var,
    k_text: Var,
    v_text: Var,
    k_image: Var,
    v_image: Var,
) -> Result<Var> {
    let d = q.cols();
    let scale = T::of(1.0 / (d as f64).sqrt());
    let branch = |k: Var, v: Var| -> Result<Var> {
        let scores = tape.scale(tape.matmul(q, tape.transpose(k))?, scale);
        let att = tape.softmax_rows(scores)?;
        tape.matmul(att, v)
    };
    tape.add(branch(k_text, v_text)?, branch(k_image, v_image)?)
}

/// Cross-attention block over a (channels × pixels) feature map with a
/// residual connection. Output projection starts at zero so a freshly
/// initialized block is an exact identity.
#[derive(Clone, Debug)]
pub struct DecoupledCrossAttention<T: Scalar> {
    name: String,
    pub w_q: Tensor<T>,
    pub w_tk: Tensor<T>,
    pub w_tv: Tensor<T>,
    pub w_ik: Tensor<T>,
    pub w_iv: Tensor<T>,
    pub w_o: Tensor<T>,
}

impl<T: Scalar> DecoupledCrossAttention<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        channels: usize,
        d_cond: usize,
        d_attn: usize,
        rng: &mut R,
    ) -> Self {
        let pq = xavier_std(channels);
        let pc = xavier_std(d_cond);
        DecoupledCrossAttention {
            name: name.to_string(),
            w_q: Tensor::randn(&[channels, d_attn], pq, rng),
            w_tk: Tensor::randn(&[d_cond, d_attn], pc, rng),
            w_tv: Tensor::randn(&[d_cond, d_attn], pc, rng),
            w_ik: Tensor::randn(&[d_cond, d_attn], pc, rng),
            w_iv: Tensor::randn(&[d_cond, d_attn], pc, rng),
            w_o: Tensor::zeros(&[d_attn, channels]),
        }
    }

    /// x: (C × HW); text: (n_t × d_cond); image: (n_i × d_cond).
    pub fn forward(
        &self,
        binder: &mut Binder<'_, '_, T>,
        x: Var,
        text: Var,
        image: Var,
    ) -> Result<Var> {
        let tape = binder.tape();
        let w_q = binder.bind(&format!("{}.w_q", self.name), &self.w_q);
        let w_tk = binder.bind(&format!("{}.w_tk", self.name), &self.w_tk);
        let w_tv = binder.bind(&format!("{}.w_tv", self.name), &self.w_tv);
        let w_ik = binder.bind(&format!("{}.w_ik", self.name), &self.w_ik);
        let w_iv = binder.bind(&format!("{}.w_iv", self.name), &self.w_iv);
        let w_o = binder.bind(&format!("{}.w_o", self.name), &self.w_o);

        let tokens = tape.transpose(x); // (HW × C)
        let q = tape.matmul(tokens, w_q)?;
        let k_t = tape.matmul(text, w_tk)?;
        let v_t = tape.matmul(text, w_tv)?;
        let k_i = tape.matmul(image, w_ik)?;
        let v_i = tape.matmul(image, w_iv)?;
        let fused = fuse_on_tape(tape, q, k_t, v_t, k_i, v_i)?;
        let out_tokens = tape.matmul(fused, w_o)?;
        tape.add(x, tape.transpose(out_tokens))
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{}.w_q", self.name), &self.w_q);
        f(&format!("{}.w_tk", self.name), &self.w_tk);
        f(&format!("{}.w_tv", self.name), &self.w_tv);
        f(&format!("{}.w_ik", self.name), &self.w_ik);
        f(&format!("{}.w_iv", self.name), &self.w_iv);
        f(&format!("{}.w_o", self.name), &self.w_o);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{}.w_q", self.name), &mut self.w_q);
        f(&format!("{}.w_tk", self.name), &mut self.w_tk);
        f(&format!("{}.w_tv", self.name), &mut self.w_tv);
        f(&format!("{}.w_ik", self.name), &mut self.w_ik);
        f(&format!("{}.w_iv", self.name), &mut self.w_iv);
        f(&format!("{}.w_o", self.name), &mut self.w_o);
    }
}
