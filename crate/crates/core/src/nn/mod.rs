//! Model-building layer on top of the tape: named parameters, a binder that
//! decides per forward pass which weights are trainable, and the small set of
//! layers the denoiser and encoder are made of.
//!
//! Weights live in plain structs as named tensors. Each forward pass binds
//! them onto a fresh tape through a [`Binder`]; the binder's filter decides
//! whether a weight becomes a differentiable leaf or a constant. A frozen
//! model therefore has no gradient paths at all — not zeroed gradients,
//! structurally absent ones. Binding is cached by name, so two forward passes
//! through the same weights on one tape share a single leaf and their
//! gradients accumulate.

mod attention;
mod layers;

pub use attention::{attention_fuse, fuse_on_tape, DecoupledCrossAttention};
pub use layers::{he_std, xavier_std, Conv2d, GroupNorm, Linear};

use std::collections::HashMap;

use crate::numerics::{NumericsError, Result, Scalar, Tape, Tensor, Var};

/// Which named weights a forward pass may train.
#[derive(Clone, Copy)]
pub enum Filter<'f> {
    /// Inference / reference mode: every weight is a constant.
    Freeze,
    /// Pretraining mode: every weight is differentiable.
    TrainAll,
    /// Selective mode: differentiable iff the predicate accepts the name.
    Pred(&'f dyn Fn(&str) -> bool),
}

impl Filter<'_> {
    fn trains(&self, name: &str) -> bool {
        match self {
            Filter::Freeze => false,
            Filter::TrainAll => true,
            Filter::Pred(p) => p(name),
        }
    }
}

/// Gradients keyed by parameter name, as produced by [`Binder::grads`].
pub type GradMap<T> = HashMap<String, Tensor<T>>;

/// Binds named weights onto one tape for one (or several, accumulating)
/// forward passes. Call [`Binder::finish`] before `tape.backward` — it drops
/// the tape borrow and keeps only the name → node table.
pub struct Binder<'t, 'f, T: Scalar> {
    tape: &'t Tape<T>,
    filter: Filter<'f>,
    cache: HashMap<String, Var>,
    order: Vec<(String, Vec<usize>, bool)>,
}

impl<'t, 'f, T: Scalar> Binder<'t, 'f, T> {
    pub fn new(tape: &'t Tape<T>, filter: Filter<'f>) -> Self {
        Binder { tape, filter, cache: HashMap::new(), order: Vec::new() }
    }

    pub fn frozen(tape: &'t Tape<T>) -> Self {
        Self::new(tape, Filter::Freeze)
    }

    pub fn train_all(tape: &'t Tape<T>) -> Self {
        Self::new(tape, Filter::TrainAll)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Bind a named weight. Repeat binds of the same name return the same
    /// tape node so gradients from multiple passes accumulate in one place.
    pub fn bind(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&var) = self.cache.get(name) {
            return var;
        }
        let trains = self.filter.trains(name);
        let var = if trains {
            self.tape.param(value)
        } else {
            self.tape.leaf(value)
        };
        self.cache.insert(name.to_string(), var);
        self.order.push((name.to_string(), value.shape().to_vec(), trains));
        var
    }

    /// Seal the pass: the returned table outlives the tape and resolves
    /// parameter gradients after backward.
    pub fn finish(self) -> Bindings<T> {
        Bindings { cache: self.cache, order: self.order, _marker: std::marker::PhantomData }
    }
}

/// Name → tape-node table for one sealed forward pass.
pub struct Bindings<T: Scalar> {
    cache: HashMap<String, Var>,
    order: Vec<(String, Vec<usize>, bool)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Bindings<T> {
    /// Names bound as trainable during the pass, in bind order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.order
            .iter()
            .filter(|(_, _, trains)| *trains)
            .map(|(name, _, _)| name.clone())
            .collect()
    }

    /// Extract per-parameter gradients after `tape.backward`. Parameters the
    /// loss never reached get explicit zero gradients so optimizer steps stay
    /// well-defined.
    pub fn grads(&self, grads: &crate::numerics::Gradients<T>) -> Result<GradMap<T>> {
        let mut out = GradMap::new();
        for (name, shape, trains) in &self.order {
            if !trains {
                continue;
            }
            let var = self.cache[name];
            let g = grads
                .shaped(var, shape)
                .unwrap_or_else(|| Tensor::zeros(shape));
            if out.insert(name.clone(), g).is_some() {
                return Err(NumericsError::contract(format!(
                    "duplicate parameter name {name}"
                )));
            }
        }
        Ok(out)
    }
}
