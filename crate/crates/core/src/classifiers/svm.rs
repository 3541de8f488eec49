//! Stacked RBF support-vector classifier: SMO-trained base machines on
//! bootstrap replicas, blended by a logistic meta-estimator fed with
//! out-of-bag decision values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{rng, Elem, Tensor};

/// KKT violation threshold: optimization stops once the most violating pair
/// disagrees by less than this.
pub const SVM_TOL: f64 = 1e-3;
/// Default cap on pair updates before the solver gives up and flags itself.
pub const SVM_MAX_ITER: usize = 200_000;
/// Bootstrap replicas drawn before a single-class resample becomes an error.
const MAX_BOOTSTRAP_RETRIES: usize = 32;

/// `exp(-gamma * ||u - v||^2)`.
pub fn rbf_kernel(u: &[Elem], v: &[Elem], gamma: f64) -> Result<Elem> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "rbf_kernel",
            detail: format!("{} vs {} dimensions", u.len(), v.len()),
        });
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let d2: Elem = u.iter().zip(v).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok((-gamma * d2).exp())
}

/// The library default `gamma = 1 / (p * var(X))`, with a `1/p` fallback for
/// (near-)constant designs.
pub fn gamma_scale(x: &Tensor) -> Result<f64> {
    let &[_, p] = x.shape() else {
        return Err(Error::ShapeMismatch {
            op: "gamma_scale",
            detail: format!("expected an n x p matrix, got {:?}", x.shape()),
        });
    };
    let n = x.numel() as f64;
    let mean = x.sum() / n;
    let var = x.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var < 1e-12 {
        return Ok(1.0 / p as f64);
    }
    Ok(1.0 / (p as f64 * var))
}

/// One RBF-SVM trained on the dual with sequential minimal optimization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SvmModel {
    /// Support vectors, one row per retained training point.
    pub support: Vec<Vec<Elem>>,
    /// `alpha_i * y_i` for each support vector; `|coef| <= C`.
    pub dual_coef: Vec<Elem>,
    pub bias: f64,
    pub gamma: f64,
    pub c: f64,
    /// False when the iteration cap fired before the KKT gap closed.
    pub converged: bool,
}

impl SvmModel {
    /// `f(x) = sum_i alpha_i y_i k(x_i, x) + b`.
    pub fn decision(&self, x: &[Elem]) -> Result<f64> {
        let mut f = self.bias;
        for (sv, &coef) in self.support.iter().zip(&self.dual_coef) {
            f += coef * rbf_kernel(sv, x, self.gamma)?;
        }
        Ok(f)
    }

    /// Label in {-1, +1}; the boundary itself goes to +1.
    pub fn predict(&self, x: &[Elem]) -> Result<f64> {
        Ok(if self.decision(x)? >= 0.0 { 1.0 } else { -1.0 })
    }
}

fn check_design(x: &Tensor) -> Result<(usize, usize)> {
    let &[n, p] = x.shape() else {
        return Err(Error::ShapeMismatch {
            op: "svm",
            detail: format!("expected an n x p design, got {:?}", x.shape()),
        });
    };
    if !x.is_finite() {
        return Err(Error::NonFinite("design matrix contains non-finite values".into()));
    }
    Ok((n, p))
}

/// SMO on the dual with maximal-violating-pair selection.
pub fn svm_train(x: &Tensor, y: &[Elem], c: f64, gamma: f64) -> Result<SvmModel> {
    svm_train_capped(x, y, c, gamma, SVM_MAX_ITER)
}

/// [`svm_train`] with an explicit cap on pair updates. Hitting the cap is not
/// an error: the model comes back with `converged == false`.
pub fn svm_train_capped(
    x: &Tensor,
    y: &[Elem],
    c: f64,
    gamma: f64,
    max_iter: usize,
) -> Result<SvmModel> {
    let (n, p) = check_design(x)?;
    if y.len() != n {
        return Err(Error::InvalidArgument(format!("{n} rows but {} labels", y.len())));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::InvalidArgument("svm labels must be -1 or +1".into()));
    }
    if !y.contains(&1.0) || !y.contains(&-1.0) {
        return Err(Error::InvalidArgument("svm training needs both classes".into()));
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidArgument(format!("C must be positive, got {c}")));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }

    let row = |i: usize| &x.data()[i * p..(i + 1) * p];
    // Full Gram matrix; training sets here are small (tens of cases).
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = rbf_kernel(row(i), row(j), gamma)?;
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }

    let mut alpha = vec![0.0; n];
    // F_i = f(x_i) - y_i without the bias term; starts at -y_i.
    let mut f: Vec<f64> = y.iter().map(|&yi| -yi).collect();
    let in_up = |i: usize, alpha: &[f64]| {
        (y[i] > 0.0 && alpha[i] < c) || (y[i] < 0.0 && alpha[i] > 0.0)
    };
    let in_low = |i: usize, alpha: &[f64]| {
        (y[i] > 0.0 && alpha[i] > 0.0) || (y[i] < 0.0 && alpha[i] < c)
    };

    let mut converged = false;
    let mut b_up = 0.0;
    let mut b_low = 0.0;
    for _ in 0..max_iter {
        // Most violating pair: u attains b_up, v attains b_low.
        let mut u = None;
        let mut v = None;
        b_up = f64::INFINITY;
        b_low = f64::NEG_INFINITY;
        for i in 0..n {
            if in_up(i, &alpha) && f[i] < b_up {
                b_up = f[i];
                u = Some(i);
            }
            if in_low(i, &alpha) && f[i] > b_low {
                b_low = f[i];
                v = Some(i);
            }
        }
        let (Some(u), Some(v)) = (u, v) else {
            converged = true;
            break;
        };
        if b_low - b_up < SVM_TOL {
            converged = true;
            break;
        }

        // Optimize the pair along alpha_u += y_u * t, alpha_v -= y_v * t,
        // which keeps sum(alpha .* y) fixed. The dual gain is
        // (F_v - F_u) * t - eta * t^2 / 2 with eta = K_uu + K_vv - 2 K_uv.
        let mut t_lo = f64::NEG_INFINITY;
        let mut t_hi = f64::INFINITY;
        for (idx, sign) in [(u, 1.0), (v, -1.0)] {
            let dir = sign * y[idx];
            if dir > 0.0 {
                t_lo = t_lo.max(-alpha[idx]);
                t_hi = t_hi.min(c - alpha[idx]);
            } else {
                t_lo = t_lo.max(alpha[idx] - c);
                t_hi = t_hi.min(alpha[idx]);
            }
        }
        let eta = k[u * n + u] + k[v * n + v] - 2.0 * k[u * n + v];
        let slope = b_low - b_up;
        let t = if eta > 0.0 {
            (slope / eta).clamp(t_lo, t_hi)
        } else {
            // Degenerate curvature: the gain is linear (or convex), so one of
            // the feasible endpoints is optimal. Evaluate both.
            let gain = |t: f64| slope * t - 0.5 * eta * t * t;
            if gain(t_hi) >= gain(t_lo) {
                t_hi
            } else {
                t_lo
            }
        };
        if !t.is_finite() || t.abs() < 1e-14 {
            break;
        }
        alpha[u] = (alpha[u] + y[u] * t).clamp(0.0, c);
        alpha[v] = (alpha[v] - y[v] * t).clamp(0.0, c);
        for i in 0..n {
            f[i] += t * (k[u * n + i] - k[v * n + i]);
        }
    }

    let bias = -(b_up + b_low) / 2.0;
    let mut support = Vec::new();
    let mut dual_coef = Vec::new();
    for i in 0..n {
        if alpha[i] > 1e-12 {
            support.push(row(i).to_vec());
            dual_coef.push(alpha[i] * y[i]);
        }
    }
    Ok(SvmModel { support, dual_coef, bias, gamma, c, converged })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Bootstrap-bagged RBF-SVMs with a logistic-regression meta-estimator over
/// their squashed decision values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SvmStackModel {
    pub bases: Vec<SvmModel>,
    /// Logistic weights over the `n_base` meta features.
    pub meta_w: Vec<f64>,
    pub meta_b: f64,
    pub seed: u64,
}

impl SvmStackModel {
    /// Meta probability of class 1.
    pub fn predict_score(&self, x: &[Elem]) -> Result<f64> {
        let mut z = self.meta_b;
        for (base, w) in self.bases.iter().zip(&self.meta_w) {
            z += w * sigmoid(base.decision(x)?);
        }
        Ok(sigmoid(z))
    }

    /// Label in {0, 1} at the 0.5 threshold.
    pub fn predict(&self, x: &[Elem]) -> Result<u8> {
        Ok(if self.predict_score(x)? >= 0.5 { 1 } else { 0 })
    }
}

/// Iterations of full-batch gradient descent for the meta logistic
/// regression; the spec-pinned rate 1e-4 needs many small steps.
const META_GD_ITERS: usize = 100_000;

/// Train `n_base` SVMs on bootstrap replicas and a logistic meta-estimator on
/// out-of-bag decision values (in-bag cells take the column mean).
pub fn svm_stack_train(
    x: &Tensor,
    y: &[u8],
    n_base: usize,
    c: f64,
    gamma: f64,
    meta_lr: f64,
    seed: u64,
) -> Result<SvmStackModel> {
    let (n, p) = check_design(x)?;
    if y.len() != n {
        return Err(Error::InvalidArgument(format!("{n} rows but {} labels", y.len())));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::InvalidArgument("stack labels must be 0 or 1".into()));
    }
    if n_base == 0 {
        return Err(Error::InvalidArgument("need at least one base estimator".into()));
    }
    if !(meta_lr > 0.0) || !meta_lr.is_finite() {
        return Err(Error::InvalidArgument(format!("meta_lr must be positive, got {meta_lr}")));
    }
    let y_signed: Vec<f64> = y.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();

    let mut bases = Vec::with_capacity(n_base);
    let mut oob: Vec<Vec<bool>> = Vec::with_capacity(n_base);
    for b in 0..n_base {
        let mut r = rng::stream(seed, "svm-stack-boot", b as u64);
        let mut replica = None;
        for _ in 0..MAX_BOOTSTRAP_RETRIES {
            let idx: Vec<usize> = (0..n).map(|_| r.gen_range(0..n)).collect();
            let first = y[idx[0]];
            if idx.iter().any(|&i| y[i] != first) {
                replica = Some(idx);
                break;
            }
        }
        let Some(idx) = replica else {
            return Err(Error::InvalidArgument(format!(
                "bootstrap replica {b} stayed single-class after {MAX_BOOTSTRAP_RETRIES} draws"
            )));
        };
        let rows: Vec<Elem> =
            idx.iter().flat_map(|&i| x.data()[i * p..(i + 1) * p].to_vec()).collect();
        let bx = Tensor::new(&[idx.len(), p], rows)?;
        let by: Vec<f64> = idx.iter().map(|&i| y_signed[i]).collect();
        bases.push(svm_train(&bx, &by, c, gamma)?);
        let mut in_bag = vec![false; n];
        for &i in &idx {
            in_bag[i] = true;
        }
        oob.push(in_bag.iter().map(|&v| !v).collect());
    }

    // Meta design: sigma(decision) where the row was out-of-bag, column mean
    // otherwise so never-held-out rows stay neutral.
    let mut z = vec![0.5; n * n_base];
    for (b, base) in bases.iter().enumerate() {
        let mut observed = Vec::new();
        for i in 0..n {
            if oob[b][i] {
                let v = sigmoid(base.decision(&x.data()[i * p..(i + 1) * p])?);
                z[i * n_base + b] = v;
                observed.push(v);
            }
        }
        let fill = if observed.is_empty() {
            0.5
        } else {
            observed.iter().sum::<f64>() / observed.len() as f64
        };
        for i in 0..n {
            if !oob[b][i] {
                z[i * n_base + b] = fill;
            }
        }
    }

    let mut meta_w = vec![0.0; n_base];
    let mut meta_b = 0.0;
    let inv_n = 1.0 / n as f64;
    for _ in 0..META_GD_ITERS {
        let mut gw = vec![0.0; n_base];
        let mut gb = 0.0;
        for i in 0..n {
            let zi = &z[i * n_base..(i + 1) * n_base];
            let mut s = meta_b;
            for (w, &f) in meta_w.iter().zip(zi) {
                s += w * f;
            }
            let err = sigmoid(s) - y[i] as f64;
            for (g, &f) in gw.iter_mut().zip(zi) {
                *g += err * f;
            }
            gb += err;
        }
        for (w, g) in meta_w.iter_mut().zip(&gw) {
            *w -= meta_lr * g * inv_n;
        }
        meta_b -= meta_lr * gb * inv_n;
    }
    if meta_w.iter().any(|w| !w.is_finite()) || !meta_b.is_finite() {
        return Err(Error::NonFinite("meta weights diverged".into()));
    }

    Ok(SvmStackModel { bases, meta_w, meta_b, seed })
}
