//! Central finite-difference gradient checking.
//!
//! The harness treats a computation as a closure that rebuilds its graph on a
//! fresh [`Tape`] from a slice of leaf tensors and returns a scalar root. The
//! analytic gradient comes from one backward pass; the reference gradient
//! perturbs every input element by ±`step` and recomputes the scalar, so the
//! two derivations share no code path beyond the forward evaluation itself.
//!
//! Comparison uses a guarded relative error,
//! `|a - fd| / max(|a|, |fd|, guard)`, so near-zero gradients are judged on
//! an absolute scale where central differences still have ~1e-11 headroom
//! at the default step.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Value};

/// Default perturbation for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default guarded relative-error tolerance.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor in the guarded relative error.
pub const REL_ERR_GUARD: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    /// Largest guarded relative error across all input elements.
    pub max_rel_err: f64,
    /// `(input index, element index)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} (tol {:.1e}) -> {}",
            self.name,
            self.max_rel_err,
            self.tolerance,
            if self.passed { "ok" } else { "FAIL" }
        )
    }
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Value]) -> Result<Value>,
{
    let mut tape = Tape::new();
    let vals: Vec<Value> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let root = f(&mut tape, &vals)?;
    let out = tape.value(root);
    if out.numel() != 1 {
        return Err(Error::shape(format!(
            "gradient check target must be scalar, got {:?}",
            out.shape()
        )));
    }
    Ok(out.data()[0])
}

/// One backward pass; gradients per input, zeros where the graph ignores an
/// input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Value]) -> Result<Value>,
{
    let mut tape = Tape::new();
    let vals: Vec<Value> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = f(&mut tape, &vals)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::shape(format!(
            "gradient check target must be scalar, got {:?}",
            tape.value(root).shape()
        )));
    }
    let grads = tape.backward(root)?;
    Ok(vals
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}

/// Central finite differences, one (±step) pair per input element.
pub fn fd_gradients<F>(f: &F, inputs: &[Tensor], step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Value]) -> Result<Value>,
{
    let mut out = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        let n = inputs[i].numel();
        let mut g = Vec::with_capacity(n);
        for e in 0..n {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + step;
            let up = eval_scalar(f, &work)?;
            work[i].data_mut()[e] = orig - step;
            let down = eval_scalar(f, &work)?;
            work[i].data_mut()[e] = orig;
            g.push((up - down) / (2.0 * step));
        }
        out.push(g);
    }
    Ok(out)
}

/// Guarded relative error between two gradient sets; returns the maximum and
/// its location.
pub fn max_rel_err(analytic: &[Vec<f64>], fd: &[Vec<f64>]) -> (f64, Option<(usize, usize)>) {
    let mut worst = 0.0;
    let mut at = None;
    for (i, (ga, gf)) in analytic.iter().zip(fd).enumerate() {
        for (e, (&a, &d)) in ga.iter().zip(gf).enumerate() {
            let rel = (a - d).abs() / a.abs().max(d.abs()).max(REL_ERR_GUARD);
            if rel > worst {
                worst = rel;
                at = Some((i, e));
            }
        }
    }
    (worst, at)
}

/// Run a full check: analytic vs central differences on every element.
pub fn check<F>(name: &str, f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Value]) -> Result<Value>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let fd = fd_gradients(&f, inputs, step)?;
    let (max, worst) = max_rel_err(&analytic, &fd);
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err: max,
        worst,
        tolerance: tol,
        passed: max <= tol,
    })
}

/// [`check`] with the default step and tolerance.
pub fn check_default<F>(name: &str, f: F, inputs: &[Tensor]) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Value]) -> Result<Value>,
{
    check(name, f, inputs, DEFAULT_STEP, DEFAULT_TOLERANCE)
}
