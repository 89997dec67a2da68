//! Central finite-difference oracle for gradient verification.
//!
//! Deliberately independent of the tape's backward pass: it only calls
//! the forward evaluation, once per perturbed entry. Used by unit tests
//! and by the acceptance suite.

use crate::diffcore::tape::{NodeId, Tape};
use crate::diffcore::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Builds a scalar loss from leaves created from `inputs`, in order.
pub trait BuildLoss: Fn(&mut Tape, &[NodeId]) -> NodeId {}
impl<F: Fn(&mut Tape, &[NodeId]) -> NodeId> BuildLoss for F {}

fn eval_loss(build: &impl BuildLoss, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &leaves);
    tape.value(loss).item()
}

/// Analytic gradients of the loss w.r.t. every input, via the tape.
pub fn analytic_grads(build: &impl BuildLoss, inputs: &[Tensor]) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &leaves);
    let grads = tape.backward(loss).expect("finite loss");
    leaves.iter().map(|&l| grads.dense(&tape, l)).collect()
}

/// Central finite differences with step `h`, one full re-evaluation per
/// perturbed entry.
pub fn fd_grads(build: &impl BuildLoss, inputs: &[Tensor], h: f64) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[which].rows(), inputs[which].cols());
        for i in 0..inputs[which].len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= h;
            let d = (eval_loss(build, &plus) - eval_loss(build, &minus)) / (2.0 * h);
            g.data_mut()[i] = d;
        }
        out.push(g);
    }
    out
}

/// Largest mixed error `|a-b| / max(|b|, 1)` ... actually reported as
/// `|a-b| / (atol/rtol + |b|)` so it reads as a relative error with an
/// absolute floor.
pub fn max_mixed_error(analytic: &[Tensor], fd: &[Tensor], rtol: f64, atol: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, b) in analytic.iter().zip(fd) {
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let denom = atol / rtol + y.abs();
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Asserts analytic gradients match central finite differences at
/// `|a - fd| <= atol + rtol * |fd|`, with step `DEFAULT_STEP`.
pub fn fd_check(inputs: &[Tensor], rtol: f64, atol: f64, build: impl BuildLoss) {
    fd_check_h(inputs, DEFAULT_STEP, rtol, atol, build)
}

pub fn fd_check_h(inputs: &[Tensor], h: f64, rtol: f64, atol: f64, build: impl BuildLoss) {
    let analytic = analytic_grads(&build, inputs);
    let fd = fd_grads(&build, inputs, h);
    for (which, (a, b)) in analytic.iter().zip(&fd).enumerate() {
        for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
            let tol = atol + rtol * y.abs();
            assert!(
                (x - y).abs() <= tol,
                "gradient mismatch input {which} entry {i}: analytic {x} vs fd {y} (tol {tol})"
            );
        }
    }
}
