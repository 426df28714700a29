//! Finite-difference gradient oracle.
//!
//! Central differences on the f64 losses give an implementation-independent
//! check of every backward rule. The reported figure is the worst relative
//! error over all coordinates: |analytic - numeric| / (|numeric| + 1e-8).

use crate::error::Result;
use crate::params::{shared, SharedTensor};
use crate::tensor::{Tape, Tensor, Var};

/// Check the tape gradient of `f` at `at` against central differences with
/// step `h`. `f` builds a scalar loss from the lifted input and must be
/// deterministic (reseed any internal randomness per call).
pub fn finite_diff_check<F>(f: F, at: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let leaf = shared(at.clone().with_grad());
    let mut tape = Tape::new();
    let v = tape.leaf(&leaf);
    let loss = f(&mut tape, v)?;
    tape.backward(loss)?;
    let analytic = leaf.borrow_mut().take_grad().expect("leaf gradient");

    let mut probe = at.clone();
    let mut max_rel: f64 = 0.0;
    for i in 0..probe.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Check the gradient of a loss w.r.t. one shared parameter of a live model.
/// `build` constructs the scalar loss on a fresh tape using the current
/// parameter values; the parameter is perturbed in place for the numeric
/// side and restored afterwards.
pub fn finite_diff_check_param<F>(build: F, param: &SharedTensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape)?;
    tape.backward(loss)?;
    let analytic = param.borrow_mut().take_grad().expect("parameter gradient");

    let n = param.borrow().numel();
    let mut max_rel: f64 = 0.0;
    for i in 0..n {
        let orig = param.borrow().data()[i];
        param.borrow_mut().data_mut()[i] = orig + h;
        let fp = forward_scalar(&build)?;
        param.borrow_mut().data_mut()[i] = orig - h;
        let fm = forward_scalar(&build)?;
        param.borrow_mut().data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

fn eval_scalar<F>(f: &F, at: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let v = tape.constant(at);
    let loss = f(&mut tape, v)?;
    tape.scalar(loss)
}

fn forward_scalar<F>(build: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let loss = build(&mut tape)?;
    tape.scalar(loss)
}
