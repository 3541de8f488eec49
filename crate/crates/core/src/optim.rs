//! Adam optimizer and the exponential learning-rate schedule.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Adam with bias correction. First and second moments are kept per
/// parameter tensor, elementwise.
pub struct AdamState<S> {
    m: Vec<TensorBase<S>>,
    v: Vec<TensorBase<S>>,
    step: u64,
    beta1: S,
    beta2: S,
    epsilon: S,
}

impl<S: Scalar> AdamState<S> {
    /// Moments start at zero, matching the shapes of `params`.
    pub fn new(params: &[TensorBase<S>], beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::InvalidConfig(format!(
                "adam betas must lie in [0, 1): got {}, {}",
                beta1, beta2
            )));
        }
        if epsilon <= 0.0 {
            return Err(Error::InvalidConfig(format!("adam epsilon must be positive: {}", epsilon)));
        }
        Ok(Self {
            m: params.iter().map(|p| TensorBase::zeros(p.shape())).collect(),
            v: params.iter().map(|p| TensorBase::zeros(p.shape())).collect(),
            step: 0,
            beta1: S::of(beta1),
            beta2: S::of(beta2),
            epsilon: S::of(epsilon),
        })
    }

    /// The paper's settings: beta1 0.9, beta2 0.999, epsilon 1e-8.
    pub fn with_defaults(params: &[TensorBase<S>]) -> Self {
        Self::new(params, 0.9, 0.999, 1e-8).expect("default adam hyperparameters are valid")
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter tensor. Gradients must line up with
    /// the parameter list one to one.
    pub fn step(
        &mut self,
        params: &mut [TensorBase<S>],
        grads: &[TensorBase<S>],
        lr: S,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                detail: format!(
                    "state tracks {} tensors, got {} params and {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        for ((p, g), idx) in params.iter().zip(grads).zip(0..) {
            if p.shape() != g.shape() || p.shape() != self.m[idx].shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    detail: format!(
                        "tensor {}: param {:?}, grad {:?}, state {:?}",
                        idx,
                        p.shape(),
                        g.shape(),
                        self.m[idx].shape()
                    ),
                });
            }
        }
        self.step += 1;
        let one = S::one();
        let b1 = self.beta1;
        let b2 = self.beta2;
        // Bias corrections 1 - beta^t.
        let c1 = one - b1.powi(self.step as i32);
        let c2 = one - b2.powi(self.step as i32);
        for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            for ((pi, &gi), (mi, vi)) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi = *pi - lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// `lr0 * exp(-decay * epoch)`; the pipeline uses decay 0.05.
pub fn lr_schedule<S: Scalar>(epoch: usize, lr0: S, decay: S) -> S {
    lr0 * (-decay * S::of(epoch as f64)).exp()
}
