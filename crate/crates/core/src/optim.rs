//! Levenberg–Marquardt for small dense least-squares problems.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Stop when `‖J' r‖_∞` falls below this.
    pub grad_tol: f64,
    /// Stop when an accepted step is this small relative to `‖x‖`.
    pub step_tol: f64,
    pub initial_damping: f64,
    /// Iterates whose matrix condition number exceeds this are rejected.
    pub max_condition: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions { max_iter: 500, grad_tol: 1e-10, step_tol: 1e-13, initial_damping: 1e-3, max_condition: 1e6 }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub x: DVector<f64>,
    /// `‖r(x)‖²`.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

/// Minimizes `‖r(x)‖²`. `eval` returns the residual and its Jacobian;
/// `feasible` may veto a trial point.
pub fn levenberg_marquardt<F, G>(x0: DVector<f64>, mut eval: F, feasible: G, opts: &LmOptions) -> Result<LmOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<(DVector<f64>, Matrix)>,
    G: Fn(&DVector<f64>) -> bool,
{
    let mut x = x0;
    let (mut r, mut j) = eval(&x)?;
    let mut cost = r.norm_squared();
    let mut lambda = opts.initial_damping;
    let p = x.len();
    let mut grad = j.transpose() * &r;
    let mut gnorm = grad.amax();
    let mut iterations = 0;
    let mut converged = gnorm <= opts.grad_tol;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let jtj = j.transpose() * &j;
        let mut accepted = false;
        while lambda < 1e16 {
            let mut h = jtj.clone();
            for k in 0..p {
                h[(k, k)] += lambda * (1.0 + jtj[(k, k)]);
            }
            let step = match h.cholesky() {
                Some(ch) => -ch.solve(&grad),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let trial = &x + &step;
            if !trial.iter().all(|v| v.is_finite()) || !feasible(&trial) {
                lambda *= 10.0;
                continue;
            }
            let (rt, jt) = eval(&trial)?;
            let ct = rt.norm_squared();
            if ct.is_finite() && ct < cost {
                let small = step.norm() <= opts.step_tol * (x.norm() + opts.step_tol);
                x = trial;
                r = rt;
                j = jt;
                cost = ct;
                lambda = (lambda / 10.0).max(1e-15);
                accepted = true;
                grad = j.transpose() * &r;
                gnorm = grad.amax();
                if gnorm <= opts.grad_tol || small {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no decrease possible even for tiny steps: a numerical minimum
            converged = true;
            break;
        }
    }
    Ok(LmOutcome { x, cost, iterations, converged, grad_norm: gnorm })
}
