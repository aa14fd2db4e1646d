//! Finite-difference verification of tape gradients. Central differences at
//! f64 keep truncation error at O(eps²), so analytic and numeric gradients of
//! a correct backward rule agree to ~1e-9 — far inside the tolerances used by
//! the layer tests.

use rand::seq::SliceRandom;
use rand::Rng;

use super::error::{NumericsError, Result};
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Outcome of a gradient check. `max_rel_err` uses the hybrid denominator
/// max(|analytic|, |numeric|, 1): tiny gradients are compared absolutely so
/// finite-difference noise on a true zero cannot fail the check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// (input index, element index, analytic, numeric) at the worst coord.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn ok(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Check the gradient of a scalar-valued function at every coordinate of
/// every input. `f` must build the computation from the given vars and return
/// the scalar loss var; it is re-invoked on a fresh tape per perturbation.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    grad_check_at(f, inputs, eps, &all)
}

/// Like `grad_check` but verifying only `max_coords` randomly chosen
/// coordinates per input — the only affordable option for whole-model checks.
pub fn grad_check_sampled<F, R>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    max_coords: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let mut idx: Vec<usize> = (0..t.numel()).collect();
            idx.shuffle(rng);
            idx.truncate(max_coords);
            idx.sort_unstable();
            idx
        })
        .collect();
    grad_check_at(f, inputs, eps, &coords)
}

fn grad_check_at<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    coords: &[Vec<usize>],
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(NumericsError::contract(format!("grad_check: bad step {eps}")));
    }

    // Analytic pass.
    let tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&tape, &vars)?;
    if loss.numel() != 1 {
        return Err(NumericsError::contract(
            "grad_check: function must return a scalar".to_string(),
        ));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    // Forward-only evaluation helper used for the ±eps probes.
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, idx_list) in coords.iter().enumerate() {
        for &j in idx_list {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let err = rel_err(analytic[i][j], numeric);
            report.coords_checked += 1;
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((i, j, analytic[i][j], numeric));
            }
        }
    }
    Ok(report)
}
