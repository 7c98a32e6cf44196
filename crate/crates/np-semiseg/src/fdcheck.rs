//! Central finite-difference gradient verification.
//!
//! The oracle re-evaluates the scalar objective at `f64` on perturbed
//! copies of the (widened) parameters, so the only f32 rounding in the
//! comparison sits in the analytic gradients under test. Every kernel in
//! this crate is generic over the scalar type precisely so the same graph
//! code can be replayed here in double precision.

use crate::rng::StreamRng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::{NpError, Result};

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-4;

/// A scalar-valued computation that can be rebuilt at any kernel scalar.
/// `build` consumes one tensor per differentiable input (fixed order) and
/// returns the scalar root plus the leaf var of each input.
pub trait ScalarGraph {
    fn build<T: Real>(&self, tape: &Tape<T>, params: &[Tensor<T>]) -> Result<(Var, Vec<Var>)>;
}

/// End-to-end gradient check of a [`ScalarGraph`]: analytic gradients
/// from the f32 tape against f64 central differences of the same graph.
pub fn check_gradients<G: ScalarGraph>(
    graph: &G,
    params: &[Tensor<f32>],
    step: f64,
    max_coords_per_tensor: usize,
    seed: u64,
) -> Result<FdReport> {
    let tape: Tape<f32> = Tape::new();
    let (root, leaves) = graph.build(&tape, params)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor<f32>> = leaves
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();
    let mut f = |vals: &[Tensor<f64>]| -> Result<f64> {
        let t64: Tape<f64> = Tape::new();
        let (r, _) = graph.build(&t64, vals)?;
        t64.value(r).item()
    };
    finite_difference_check(&mut f, params, &analytic, step, max_coords_per_tensor, seed)
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// max over sampled coordinates of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_err: f64,
    /// coordinates actually checked
    pub checked: usize,
}

/// Compares analytic gradients against central differences of `f`.
///
/// `f` evaluates the objective on a full set of parameter tensors (same
/// order and shapes as `params`); `analytic` holds the gradients produced
/// by the implementation under test. Up to `max_coords_per_tensor`
/// coordinates are sampled per tensor (all of them when the tensor is at
/// most that large), drawn deterministically from `seed`.
pub fn finite_difference_check(
    f: &mut dyn FnMut(&[Tensor<f64>]) -> Result<f64>,
    params: &[Tensor<f32>],
    analytic: &[Tensor<f32>],
    step: f64,
    max_coords_per_tensor: usize,
    seed: u64,
) -> Result<FdReport> {
    if params.len() != analytic.len() {
        return Err(NpError::Shape(format!(
            "{} parameter tensors vs {} gradient tensors",
            params.len(),
            analytic.len()
        )));
    }
    let mut wide: Vec<Tensor<f64>> = params.iter().map(|p| p.widen()).collect();
    let mut rng = StreamRng::new(seed);
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for ti in 0..params.len() {
        if params[ti].shape() != analytic[ti].shape() {
            return Err(NpError::Shape(format!(
                "parameter {ti}: value shape {:?} vs grad shape {:?}",
                params[ti].shape(),
                analytic[ti].shape()
            )));
        }
        let numel = params[ti].numel();
        let coords: Vec<usize> = if numel <= max_coords_per_tensor {
            (0..numel).collect()
        } else {
            // distinct sample without replacement
            let mut idx: Vec<usize> = (0..numel).collect();
            rng.shuffle(&mut idx);
            idx.truncate(max_coords_per_tensor);
            idx
        };
        for &ci in &coords {
            let base = wide[ti].data()[ci];
            wide[ti].data_mut()[ci] = base + step;
            let fp = f(&wide)?;
            wide[ti].data_mut()[ci] = base - step;
            let fm = f(&wide)?;
            wide[ti].data_mut()[ci] = base;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(NpError::Numeric(
                    "finite-difference oracle hit a non-finite objective".into(),
                ));
            }
            let numeric = (fp - fm) / (2.0 * step);
            let ana = analytic[ti].data()[ci] as f64;
            let rel = (ana - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(FdReport {
        max_rel_err: max_rel,
        checked,
    })
}
