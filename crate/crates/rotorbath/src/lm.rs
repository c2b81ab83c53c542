//! Deterministic damped least-squares core used by the fitting routines.
//!
//! Fixed policy, identical on every run: Marquardt damping starting at
//! `lambda = 1e-3`, scaled by 10 down on accepted steps (floor 1e-12) and 10
//! up on rejected ones (stall above 1e14), iteration cap supplied by the
//! caller, convergence declared when an accepted step improves the squared
//! error by less than 1e-14 relative and moves the parameters by less than
//! 1e-12 relative. No randomness anywhere; given the same data the iterate
//! path is reproduced exactly.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub(crate) struct FitOutcome {
    pub params: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub residual_rms: f64,
    /// Linearized parameter variances: diag of `rms^2 (J^T J)^{-1} n/(n-p)`.
    pub variance_diag: Vec<f64>,
}

/// Minimize `|r(p)|^2` where `eval(p, r, jac)` fills the residual vector and
/// the row-major `n_data x n_params` Jacobian. `project` clamps parameters
/// into their admissible box after every trial step.
pub(crate) fn levenberg_marquardt(
    n_data: usize,
    p0: &[f64],
    mut eval: impl FnMut(&[f64], &mut [f64], &mut [f64]),
    mut project: impl FnMut(&mut [f64]),
    max_iterations: usize,
) -> FitOutcome {
    let n_params = p0.len();
    let mut p = p0.to_vec();
    project(&mut p);

    let mut r = vec![0.0; n_data];
    let mut jac = vec![0.0; n_data * n_params];
    eval(&p, &mut r, &mut jac);
    let mut sse: f64 = r.iter().map(|v| v * v).sum();

    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    let mut r_trial = vec![0.0; n_data];
    let mut jac_trial = vec![0.0; n_data * n_params];

    for iter in 0..max_iterations {
        iterations = iter + 1;
        // Normal equations J^T J delta = -J^T r with Marquardt scaling.
        let j = DMatrix::from_row_slice(n_data, n_params, &jac);
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * DVector::from_column_slice(&r);
        let mut damped = jtj.clone();
        for k in 0..n_params {
            let d = jtj[(k, k)];
            damped[(k, k)] = d + lambda * if d > 0.0 { d } else { 1.0 };
        }
        let delta = match damped.clone().cholesky() {
            Some(chol) => chol.solve(&(-&jtr)),
            None => match damped.lu().solve(&(-&jtr)) {
                Some(d) => d,
                None => {
                    lambda *= 10.0;
                    if lambda > 1e14 {
                        break;
                    }
                    continue;
                }
            },
        };

        let mut p_trial: Vec<f64> = p.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
        project(&mut p_trial);
        eval(&p_trial, &mut r_trial, &mut jac_trial);
        let sse_trial: f64 = r_trial.iter().map(|v| v * v).sum();

        if sse_trial.is_finite() && sse_trial < sse {
            let improvement = (sse - sse_trial) / sse.max(f64::MIN_POSITIVE);
            let step: f64 = p
                .iter()
                .zip(&p_trial)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = 1.0 + p.iter().map(|v| v * v).sum::<f64>().sqrt();
            p = p_trial.clone();
            std::mem::swap(&mut r, &mut r_trial);
            std::mem::swap(&mut jac, &mut jac_trial);
            sse = sse_trial;
            lambda = (lambda / 10.0).max(1e-12);
            if improvement < 1e-14 && step < 1e-12 * scale {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e14 {
                break;
            }
        }
    }
    // A residual already at the numerical floor counts as converged even if
    // the loop ran out before the relative-improvement test fired.
    if !converged && sse <= 1e-28 * n_data as f64 {
        converged = true;
    }

    let dof = (n_data.saturating_sub(n_params)).max(1) as f64;
    let rms = (sse / n_data as f64).sqrt();
    let j = DMatrix::from_row_slice(n_data, n_params, &jac);
    let mut jtj = j.transpose() * &j;
    // Light ridge so the variance report stays finite near-degenerate fits.
    let ridge = 1e-12 * jtj.diagonal().iter().cloned().fold(0.0, f64::max).max(1e-300);
    for k in 0..n_params {
        jtj[(k, k)] += ridge;
    }
    let variance_diag = match jtj.try_inverse() {
        Some(inv) => (0..n_params)
            .map(|k| inv[(k, k)] * sse / dof)
            .collect(),
        None => vec![f64::NAN; n_params],
    };

    FitOutcome {
        params: p,
        converged,
        iterations,
        residual_rms: rms,
        variance_diag,
    }
}
