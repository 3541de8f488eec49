//! L1-penalized least squares by cyclic coordinate descent.
//!
//! `lasso_fit` solves `min_b 1/(2n) ||y~ - X~ b||^2 + alpha ||b||_1` where
//! `X~` has internally standardized columns (population statistics) and `y~`
//! is centered. Coefficients are reported both in that standardized space
//! (`beta_std`, the space every optimality statement below refers to) and
//! de-standardized back to the caller's units (`beta`, `intercept`).
//! Zero-variance columns cannot carry signal and are pinned to zero rather
//! than poisoning the standardization.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

#[derive(Clone, Debug)]
pub struct LassoFitBase<S> {
    pub alpha: S,
    /// Coefficients in the caller's feature units.
    pub beta: Vec<S>,
    pub intercept: S,
    /// Coefficients of the standardized problem.
    pub beta_std: Vec<S>,
    pub sweeps: usize,
    /// Whether the final sweep moved every coordinate by less than `tol`.
    pub converged: bool,
}

pub type LassoFit = LassoFitBase<crate::Elem>;

/// `sign(v) * max(|v| - t, 0)`.
pub fn soft_threshold<S: Scalar>(v: S, t: S) -> S {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        S::zero()
    }
}

struct Standardized<S> {
    /// Column-major standardized design, zero-variance columns left as-is.
    cols: Vec<Vec<S>>,
    means: Vec<S>,
    /// Population standard deviations; exactly zero marks a dead column.
    stds: Vec<S>,
    y_centered: Vec<S>,
    y_mean: S,
}

fn standardize<S: Scalar>(x: &TensorBase<S>, y: &[S]) -> Result<Standardized<S>> {
    let &[n, p] = x.shape() else {
        return Err(Error::ShapeMismatch {
            op: "lasso",
            detail: format!("design must be (n, p), got {:?}", x.shape()),
        });
    };
    if y.len() != n {
        return Err(Error::ShapeMismatch {
            op: "lasso",
            detail: format!("{} rows but {} targets", n, y.len()),
        });
    }
    if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lasso inputs must be finite".into()));
    }
    let n_s = S::of(n as f64);
    let y_mean = y.iter().copied().sum::<S>() / n_s;
    let y_centered: Vec<S> = y.iter().map(|&v| v - y_mean).collect();
    let data = x.data();
    let mut cols = Vec::with_capacity(p);
    let mut means = Vec::with_capacity(p);
    let mut stds = Vec::with_capacity(p);
    for j in 0..p {
        let mut col: Vec<S> = (0..n).map(|i| data[i * p + j]).collect();
        let mean = col.iter().copied().sum::<S>() / n_s;
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n_s;
        let std = var.sqrt();
        if std > S::zero() {
            for v in &mut col {
                *v = (*v - mean) / std;
            }
        }
        cols.push(col);
        means.push(mean);
        stds.push(std);
    }
    Ok(Standardized { cols, means, stds, y_centered, y_mean })
}

fn check_hyper<S: Scalar>(alpha: S, tol: S) -> Result<()> {
    if !alpha.is_finite() || alpha < S::zero() {
        return Err(Error::InvalidArgument(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    if !tol.is_finite() || tol <= S::zero() {
        return Err(Error::InvalidArgument(format!("tol must be finite and > 0, got {tol}")));
    }
    Ok(())
}

/// Smallest penalty at which the solution is identically zero:
/// `max_j |x~_j^T y~| / n`.
pub fn alpha_max<S: Scalar>(x: &TensorBase<S>, y: &[S]) -> Result<S> {
    let std = standardize(x, y)?;
    let n = S::of(std.y_centered.len() as f64);
    let mut best = S::zero();
    for (col, &sd) in std.cols.iter().zip(&std.stds) {
        if sd <= S::zero() {
            continue;
        }
        let dot = col.iter().zip(&std.y_centered).map(|(&a, &b)| a * b).sum::<S>() / n;
        best = best.max(dot.abs());
    }
    Ok(best)
}

/// Geometric grid of `count` penalties from `alpha_max` down three decades.
pub fn default_alpha_grid<S: Scalar>(alpha_max: S, count: usize) -> Vec<S> {
    assert!(count >= 2, "a path needs at least two penalties");
    let lo_ratio = S::of(1e-3);
    (0..count)
        .map(|i| {
            let frac = S::of(i as f64 / (count - 1) as f64);
            alpha_max * lo_ratio.powf(frac)
        })
        .collect()
}

/// Cyclic coordinate descent from the zero vector.
pub fn lasso_fit<S: Scalar>(
    x: &TensorBase<S>,
    y: &[S],
    alpha: S,
    tol: S,
    max_sweeps: usize,
) -> Result<LassoFitBase<S>> {
    let p = x.shape().get(1).copied().unwrap_or(0);
    lasso_fit_from(x, y, alpha, tol, max_sweeps, &vec![S::zero(); p])
}

/// Coordinate descent warm-started from `init` (standardized-space
/// coefficients), the workhorse for penalty paths.
pub fn lasso_fit_from<S: Scalar>(
    x: &TensorBase<S>,
    y: &[S],
    alpha: S,
    tol: S,
    max_sweeps: usize,
    init: &[S],
) -> Result<LassoFitBase<S>> {
    check_hyper(alpha, tol)?;
    if max_sweeps == 0 {
        return Err(Error::InvalidArgument("max_sweeps must be positive".into()));
    }
    let std = standardize(x, y)?;
    let (n, p) = (std.y_centered.len(), std.cols.len());
    if n == 0 || p == 0 {
        return Err(Error::InvalidArgument("lasso needs at least one row and one column".into()));
    }
    if init.len() != p {
        return Err(Error::ShapeMismatch {
            op: "lasso",
            detail: format!("warm start has {} coefficients for {} columns", init.len(), p),
        });
    }
    let n_s = S::of(n as f64);
    let mut beta: Vec<S> = init
        .iter()
        .zip(&std.stds)
        .map(|(&b, &sd)| if sd > S::zero() { b } else { S::zero() })
        .collect();
    // Residual r = y~ - X~ beta, kept in sync with every coordinate move.
    let mut resid = std.y_centered.clone();
    for (j, &b) in beta.iter().enumerate() {
        if b != S::zero() {
            for (r, &v) in resid.iter_mut().zip(&std.cols[j]) {
                *r = *r - v * b;
            }
        }
    }

    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut max_delta = S::zero();
        for j in 0..p {
            if std.stds[j] <= S::zero() {
                continue;
            }
            let col = &std.cols[j];
            let old = beta[j];
            // With unit-variance columns the coordinate-wise curvature is 1,
            // so the update is a plain soft threshold of rho_j.
            let rho = old + col.iter().zip(&resid).map(|(&a, &b)| a * b).sum::<S>() / n_s;
            let new = soft_threshold(rho, alpha);
            if new != old {
                let delta = old - new;
                for (r, &v) in resid.iter_mut().zip(col) {
                    *r = v.mul_add(delta, *r);
                }
                beta[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < tol {
            converged = true;
            break;
        }
    }

    let mut intercept = std.y_mean;
    let mut beta_orig = vec![S::zero(); p];
    for j in 0..p {
        if std.stds[j] > S::zero() && beta[j] != S::zero() {
            beta_orig[j] = beta[j] / std.stds[j];
            intercept = intercept - beta_orig[j] * std.means[j];
        }
    }
    Ok(LassoFitBase { alpha, beta: beta_orig, intercept, beta_std: beta, sweeps, converged })
}

/// Standardized-space objective `1/(2n) ||y~ - X~ b||^2 + alpha ||b||_1`
/// evaluated at `fit.beta_std`.
pub fn objective<S: Scalar>(x: &TensorBase<S>, y: &[S], fit: &LassoFitBase<S>) -> Result<S> {
    let (resid, _) = residual(x, y, fit)?;
    let n = S::of(y.len() as f64);
    let half = S::of(0.5);
    let quad = resid.iter().map(|&r| r * r).sum::<S>() / n * half;
    let l1 = fit.beta_std.iter().map(|b| b.abs()).sum::<S>();
    Ok(quad + fit.alpha * l1)
}

/// Per-coordinate violation of the subgradient optimality conditions, in the
/// standardized space: zero everywhere at an exact solution.
pub fn kkt_residuals<S: Scalar>(
    x: &TensorBase<S>,
    y: &[S],
    fit: &LassoFitBase<S>,
) -> Result<Vec<S>> {
    let (resid, std) = residual(x, y, fit)?;
    let n = S::of(y.len() as f64);
    let mut out = Vec::with_capacity(std.cols.len());
    for (j, col) in std.cols.iter().enumerate() {
        if std.stds[j] <= S::zero() {
            out.push(S::zero());
            continue;
        }
        // Gradient of the smooth part at beta_std.
        let g = -(col.iter().zip(&resid).map(|(&a, &b)| a * b).sum::<S>()) / n;
        let b = fit.beta_std[j];
        let v = if b > S::zero() {
            (g + fit.alpha).abs()
        } else if b < S::zero() {
            (g - fit.alpha).abs()
        } else {
            (g.abs() - fit.alpha).max(S::zero())
        };
        out.push(v);
    }
    Ok(out)
}

fn residual<S: Scalar>(
    x: &TensorBase<S>,
    y: &[S],
    fit: &LassoFitBase<S>,
) -> Result<(Vec<S>, Standardized<S>)> {
    let std = standardize(x, y)?;
    if fit.beta_std.len() != std.cols.len() {
        return Err(Error::ShapeMismatch {
            op: "lasso",
            detail: format!("fit has {} coefficients for {} columns", fit.beta_std.len(), std.cols.len()),
        });
    }
    let mut resid = std.y_centered.clone();
    for (j, col) in std.cols.iter().enumerate() {
        let b = fit.beta_std[j];
        if b != S::zero() && std.stds[j] > S::zero() {
            for (r, &v) in resid.iter_mut().zip(col) {
                *r = *r - v * b;
            }
        }
    }
    Ok((resid, std))
}
