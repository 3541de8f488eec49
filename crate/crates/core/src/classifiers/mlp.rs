//! Multilayer perceptron head: 64/256/512 ReLU layers with dropout after
//! each, a 2-unit softmax output, and Adam on a cross-entropy loss assembled
//! from graph primitives so the gradients come from the shared tape.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::{rng, Elem, Graph, Tensor};

/// Hidden widths, in order; fixed by the architecture.
pub const MLP_WIDTHS: [usize; 3] = [64, 256, 512];
/// Keeps `log(softmax)` finite when a class probability underflows.
const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 16, lr: 1e-3, dropout: 0.5, seed: 0 }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MlpModel {
    pub input_dim: usize,
    /// Alternating weight/bias tensors: `(p,64), (64,), (64,256), (256,),
    /// (256,512), (512,), (512,2), (2,)`.
    pub params: Vec<Tensor>,
    pub cfg: MlpConfig,
}

/// The `(rows, cols)` of each weight matrix for input dimension `p`.
pub fn layer_dims(input_dim: usize) -> [(usize, usize); 4] {
    [
        (input_dim, MLP_WIDTHS[0]),
        (MLP_WIDTHS[0], MLP_WIDTHS[1]),
        (MLP_WIDTHS[1], MLP_WIDTHS[2]),
        (MLP_WIDTHS[2], 2),
    ]
}

fn init_params(input_dim: usize, seed: u64) -> Vec<Tensor> {
    let mut params = Vec::with_capacity(8);
    for (idx, (rows, cols)) in layer_dims(input_dim).into_iter().enumerate() {
        let bound = (6.0 / rows as f64).sqrt();
        let mut r = rng::stream(seed, "mlp-init", idx as u64);
        params.push(Tensor::uniform(&[rows, cols], -bound, bound, &mut r));
        params.push(Tensor::zeros(&[cols]));
    }
    params
}

impl MlpModel {
    /// Wire the network onto `g`; `dropout` is only passed during training.
    fn logits_node(
        &self,
        g: &mut Graph,
        x: NodeId,
        param_ids: &[NodeId],
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<NodeId> {
        let mut h = x;
        for layer in 0..4 {
            h = g.dense(h, param_ids[2 * layer], Some(param_ids[2 * layer + 1]))?;
            if layer < 3 {
                h = g.relu(h);
                if let Some((rate, rng)) = dropout.as_mut() {
                    h = g.dropout(h, *rate, Some(rng))?;
                }
            }
        }
        Ok(h)
    }

    /// Mean cross-entropy of the softmax output against one-hot labels.
    fn loss_node(g: &mut Graph, logits: NodeId, onehot: NodeId, batch: usize) -> Result<NodeId> {
        let probs = g.softmax(logits, 1)?;
        let probs = g.add_scalar(probs, LOG_EPS);
        let logp = g.log(probs)?;
        let picked = g.mul(logp, onehot)?;
        let total = g.reduce_sum(picked);
        Ok(g.scale(total, -1.0 / batch as f64))
    }

    /// Class probabilities `[p0, p1]`; dropout is inert at inference.
    pub fn predict(&self, x: &[Elem]) -> Result<[f64; 2]> {
        if x.len() != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "mlp_predict",
                detail: format!("{} features, model expects {}", x.len(), self.input_dim),
            });
        }
        let mut g = Graph::new();
        let param_ids: Vec<NodeId> = self.params.iter().map(|p| g.leaf(p.clone())).collect();
        let input = g.leaf(Tensor::new(&[1, self.input_dim], x.to_vec())?);
        let logits = self.logits_node(&mut g, input, &param_ids, None)?;
        let probs = g.softmax(logits, 1)?;
        let out = g.value(probs).data();
        Ok([out[0], out[1]])
    }

    /// Label in {0, 1}; ties at 0.5 go to class 1.
    pub fn predict_label(&self, x: &[Elem]) -> Result<u8> {
        Ok(if self.predict(x)?[1] >= 0.5 { 1 } else { 0 })
    }
}

/// Train from scratch with Adam on mean cross-entropy. A non-finite loss
/// aborts with the epoch index.
pub fn mlp_train(x: &Tensor, y: &[u8], cfg: &MlpConfig) -> Result<MlpModel> {
    cfg.validate()?;
    let &[n, p] = x.shape() else {
        return Err(Error::ShapeMismatch {
            op: "mlp_train",
            detail: format!("expected an n x p design, got {:?}", x.shape()),
        });
    };
    if n == 0 || y.len() != n {
        return Err(Error::InvalidArgument(format!("{n} rows but {} labels", y.len())));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::InvalidArgument("mlp labels must be 0 or 1".into()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("design matrix contains non-finite values".into()));
    }

    let mut model = MlpModel { input_dim: p, params: init_params(p, cfg.seed), cfg: cfg.clone() };
    let mut adam = AdamState::with_defaults(&model.params);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::stream(cfg.seed, "mlp-epoch", epoch as u64);
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let rows: Vec<Elem> =
                batch.iter().flat_map(|&i| x.data()[i * p..(i + 1) * p].to_vec()).collect();
            let mut onehot = vec![0.0; batch.len() * 2];
            for (bi, &i) in batch.iter().enumerate() {
                onehot[bi * 2 + y[i] as usize] = 1.0;
            }

            let mut g = Graph::new();
            let param_ids: Vec<NodeId> = model.params.iter().map(|t| g.param(t.clone())).collect();
            let input = g.leaf(Tensor::new(&[batch.len(), p], rows)?);
            let target = g.leaf(Tensor::new(&[batch.len(), 2], onehot)?);
            let mut drop_rng = rng::stream(
                cfg.seed,
                "mlp-dropout",
                (epoch * (n / cfg.batch_size + 1) + batch_idx) as u64,
            );
            let dropout = (cfg.dropout > 0.0).then_some((cfg.dropout, &mut drop_rng));
            let logits = model.logits_node(&mut g, input, &param_ids, dropout)?;
            let loss = MlpModel::loss_node(&mut g, logits, target, batch.len())?;
            if !g.value(loss).data()[0].is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let mut grads = g.backward(loss)?;
            let grad_tensors: Vec<Tensor> = param_ids
                .iter()
                .map(|&id| grads.take(id).expect("all mlp parameters reach the loss"))
                .collect();
            adam.step(&mut model.params, &grad_tensors, cfg.lr)?;
        }
    }
    if model.params.iter().any(|t| !t.is_finite()) {
        return Err(Error::Diverged { epoch: cfg.epochs - 1 });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy(n: usize, seed: u64) -> (Tensor, Vec<u8>) {
        let mut r = rng::stream(seed, "mlp-toy", 0);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = (i % 2) as u8;
            let center = if label == 1 { 1.5 } else { -1.5 };
            rows.push(center + r.gen_range(-0.5..0.5));
            rows.push(-center + r.gen_range(-0.5..0.5));
            rows.push(r.gen_range(-0.5..0.5));
            labels.push(label);
        }
        (Tensor::new(&[n, 3], rows).unwrap(), labels)
    }

    #[test]
    fn layer_widths_are_fixed() {
        let model =
            MlpModel { input_dim: 7, params: init_params(7, 0), cfg: MlpConfig::default() };
        assert_eq!(model.params.len(), 8);
        assert_eq!(model.params[0].shape(), &[7, 64]);
        assert_eq!(model.params[2].shape(), &[64, 256]);
        assert_eq!(model.params[4].shape(), &[256, 512]);
        assert_eq!(model.params[6].shape(), &[512, 2]);
        assert_eq!(model.params[7].shape(), &[2]);
    }

    #[test]
    fn probabilities_form_a_two_simplex() {
        let mut r = rng::stream(1, "mlp-simplex", 0);
        for trial in 0..10u64 {
            let model =
                MlpModel { input_dim: 5, params: init_params(5, trial), cfg: MlpConfig::default() };
            let x: Vec<f64> = (0..5).map(|_| r.gen_range(-3.0..3.0)).collect();
            let [p0, p1] = model.predict(&x).unwrap();
            assert!((p0 + p1 - 1.0).abs() < 1e-9, "sum {}", p0 + p1);
            assert!(p0 >= 0.0 && p1 >= 0.0);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (x, y) = toy(5, 2);
        let model =
            MlpModel { input_dim: 3, params: init_params(3, 7), cfg: MlpConfig::default() };
        let mut onehot = vec![0.0; 10];
        for (i, &label) in y.iter().enumerate() {
            onehot[i * 2 + label as usize] = 1.0;
        }
        let loss_at = |params: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = params.iter().map(|t| g.leaf(t.clone())).collect();
            let input = g.leaf(x.clone());
            let target = g.leaf(Tensor::new(&[5, 2], onehot.clone()).unwrap());
            let m = MlpModel { input_dim: 3, params: params.to_vec(), cfg: MlpConfig::default() };
            let logits = m.logits_node(&mut g, input, &ids, None).unwrap();
            let loss = MlpModel::loss_node(&mut g, logits, target, 5).unwrap();
            g.value(loss).data()[0]
        };

        let mut g = Graph::new();
        let ids: Vec<NodeId> = model.params.iter().map(|t| g.param(t.clone())).collect();
        let input = g.leaf(x.clone());
        let target = g.leaf(Tensor::new(&[5, 2], onehot.clone()).unwrap());
        let logits = model.logits_node(&mut g, input, &ids, None).unwrap();
        let loss = MlpModel::loss_node(&mut g, logits, target, 5).unwrap();
        let mut grads = g.backward(loss).unwrap();

        let h = 1e-5;
        let mut r = rng::stream(3, "mlp-fd", 0);
        for (t_idx, id) in ids.iter().enumerate() {
            let grad = grads.take(*id).unwrap();
            for _ in 0..3 {
                let coord = r.gen_range(0..model.params[t_idx].numel());
                let mut plus = model.params.clone();
                plus[t_idx].data_mut()[coord] += h;
                let mut minus = model.params.clone();
                minus[t_idx].data_mut()[coord] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let an = grad.data()[coord];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel < 1e-5, "tensor {t_idx} coord {coord}: fd {fd:.3e} vs {an:.3e}");
            }
        }
    }

    #[test]
    fn overfits_ten_separable_samples() {
        let (x, y) = toy(10, 4);
        let cfg = MlpConfig { seed: 1, ..MlpConfig::default() };
        let model = mlp_train(&x, &y, &cfg).unwrap();
        for i in 0..10 {
            let xi = &x.data()[i * 3..(i + 1) * 3];
            assert_eq!(model.predict_label(xi).unwrap(), y[i], "sample {i}");
        }
    }

    #[test]
    fn training_and_prediction_are_deterministic() {
        let (x, y) = toy(8, 5);
        let cfg = MlpConfig { epochs: 20, seed: 9, ..MlpConfig::default() };
        let a = mlp_train(&x, &y, &cfg).unwrap();
        let b = mlp_train(&x, &y, &cfg).unwrap();
        for (ta, tb) in a.params.iter().zip(&b.params) {
            assert_eq!(ta.data(), tb.data());
        }
        let probe = [0.3, -0.4, 0.1];
        assert_eq!(a.predict(&probe).unwrap(), a.predict(&probe).unwrap());
    }

    #[test]
    fn absurd_learning_rate_reports_divergence() {
        let (x, y) = toy(8, 6);
        let cfg = MlpConfig { epochs: 8, lr: 1e155, ..MlpConfig::default() };
        match mlp_train(&x, &y, &cfg) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_and_inputs_are_validated() {
        let (x, y) = toy(4, 7);
        let bad = MlpConfig { epochs: 0, ..MlpConfig::default() };
        assert!(mlp_train(&x, &y, &bad).is_err());
        let bad = MlpConfig { dropout: 1.0, ..MlpConfig::default() };
        assert!(mlp_train(&x, &y, &bad).is_err());
        assert!(mlp_train(&x, &[1, 0], &MlpConfig::default()).is_err());
        assert!(mlp_train(&x, &[2, 0, 1, 0], &MlpConfig::default()).is_err());
        let model = mlp_train(&x, &y, &MlpConfig { epochs: 1, ..MlpConfig::default() }).unwrap();
        assert!(model.predict(&[1.0]).is_err());
    }
}
