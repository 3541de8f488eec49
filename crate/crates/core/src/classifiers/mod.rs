//! The three binary disease classifiers and their shared plumbing: feature
//! standardization, a unified train/predict dispatch, and on-disk model
//! files (`clf.json` manifest; MLP weights ride in LTSR tensors, the other
//! two serialize flat into the manifest itself).

pub mod forest;
pub mod mlp;
pub mod svm;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{io, Elem, Tensor};
use forest::{rf_ones_fraction, rf_predict, rf_train, RfModel};
use mlp::{mlp_train, MlpConfig, MlpModel};
use svm::{gamma_scale, svm_stack_train, SvmStackModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Svmc,
    Mlp,
    Rfc,
}

/// Per-column zero-mean unit-variance scaling fit on training features;
/// constant columns are centered and passed through unscaled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Scaler {
    pub fn fit(x: &Tensor) -> Result<Self> {
        let &[n, p] = x.shape() else {
            return Err(Error::ShapeMismatch {
                op: "scaler",
                detail: format!("expected an n x p matrix, got {:?}", x.shape()),
            });
        };
        if n == 0 {
            return Err(Error::InvalidArgument("cannot fit a scaler on zero rows".into()));
        }
        let mut means = vec![0.0; p];
        for i in 0..n {
            for j in 0..p {
                means[j] += x.at(&[i, j]);
            }
        }
        for m in &mut means {
            *m /= n as f64;
        }
        let mut stds = vec![0.0; p];
        for i in 0..n {
            for j in 0..p {
                let d = x.at(&[i, j]) - means[j];
                stds[j] += d * d;
            }
        }
        for s in &mut stds {
            *s = (*s / n as f64).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Ok(Self { means, stds })
    }

    pub fn transform_row(&self, row: &[Elem]) -> Result<Vec<Elem>> {
        if row.len() != self.means.len() {
            return Err(Error::ShapeMismatch {
                op: "scaler",
                detail: format!("{} features, scaler expects {}", row.len(), self.means.len()),
            });
        }
        Ok(row
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect())
    }

    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        let &[n, p] = x.shape() else {
            return Err(Error::ShapeMismatch {
                op: "scaler",
                detail: format!("expected an n x p matrix, got {:?}", x.shape()),
            });
        };
        let mut out = Vec::with_capacity(n * p);
        for i in 0..n {
            out.extend(self.transform_row(&x.data()[i * p..(i + 1) * p])?);
        }
        Tensor::new(&[n, p], out)
    }
}

/// Hyperparameters for all three classifiers; unused fields are ignored by
/// the kinds that do not consume them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierParams {
    pub svm_c: f64,
    /// `None` selects `1 / (p * var(X))` at training time.
    pub svm_gamma: Option<f64>,
    pub svm_bases: usize,
    pub meta_lr: f64,
    pub mlp_epochs: usize,
    pub mlp_batch_size: usize,
    pub mlp_lr: f64,
    pub mlp_dropout: f64,
    pub rf_trees: usize,
    pub rf_depth: usize,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        Self {
            svm_c: 1.0,
            svm_gamma: None,
            svm_bases: 5,
            meta_lr: 1e-4,
            mlp_epochs: 200,
            mlp_batch_size: 16,
            mlp_lr: 1e-3,
            mlp_dropout: 0.5,
            rf_trees: 100,
            rf_depth: 11,
        }
    }
}

#[derive(Clone, Debug)]
pub enum TrainedClassifier {
    Svmc { scaler: Scaler, model: SvmStackModel },
    Mlp { scaler: Scaler, model: MlpModel },
    Rfc { scaler: Scaler, model: RfModel },
}

impl TrainedClassifier {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            Self::Svmc { .. } => ClassifierKind::Svmc,
            Self::Mlp { .. } => ClassifierKind::Mlp,
            Self::Rfc { .. } => ClassifierKind::Rfc,
        }
    }

    /// Predicted label in {0, 1} plus the model's class-1 score in [0, 1].
    pub fn predict(&self, row: &[Elem]) -> Result<(u8, f64)> {
        match self {
            Self::Svmc { scaler, model } => {
                let z = scaler.transform_row(row)?;
                let score = model.predict_score(&z)?;
                Ok((u8::from(score >= 0.5), score))
            }
            Self::Mlp { scaler, model } => {
                let z = scaler.transform_row(row)?;
                let [_, p1] = model.predict(&z)?;
                Ok((u8::from(p1 >= 0.5), p1))
            }
            Self::Rfc { scaler, model } => {
                let z = scaler.transform_row(row)?;
                let (label, _) = rf_predict(model, &z)?;
                Ok((label, rf_ones_fraction(model, &z)?))
            }
        }
    }
}

/// Standardize features and train the requested classifier.
pub fn train_classifier(
    kind: ClassifierKind,
    x: &Tensor,
    y: &[u8],
    params: &ClassifierParams,
    seed: u64,
) -> Result<TrainedClassifier> {
    let scaler = Scaler::fit(x)?;
    let z = scaler.transform(x)?;
    Ok(match kind {
        ClassifierKind::Svmc => {
            let gamma = match params.svm_gamma {
                Some(g) => g,
                None => gamma_scale(&z)?,
            };
            let model =
                svm_stack_train(&z, y, params.svm_bases, params.svm_c, gamma, params.meta_lr, seed)?;
            TrainedClassifier::Svmc { scaler, model }
        }
        ClassifierKind::Mlp => {
            let cfg = MlpConfig {
                epochs: params.mlp_epochs,
                batch_size: params.mlp_batch_size,
                lr: params.mlp_lr,
                dropout: params.mlp_dropout,
                seed,
            };
            TrainedClassifier::Mlp { scaler, model: mlp_train(&z, y, &cfg)? }
        }
        ClassifierKind::Rfc => TrainedClassifier::Rfc {
            scaler,
            model: rf_train(&z, y, params.rf_trees, params.rf_depth, seed)?,
        },
    })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ClfManifest {
    Svmc { seed: u64, scaler: Scaler, model: SvmStackModel },
    Mlp {
        seed: u64,
        scaler: Scaler,
        config: MlpConfig,
        input_dim: usize,
        /// LTSR files next to the manifest, in [`mlp::layer_dims`] order
        /// (weight then bias per layer).
        weights: Vec<String>,
    },
    Rfc { seed: u64, scaler: Scaler, model: RfModel },
}

/// Write `clf.json` (plus LTSR weight tensors for the MLP) into `dir`.
pub fn save_classifier(dir: &Path, clf: &TrainedClassifier) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = match clf {
        TrainedClassifier::Svmc { scaler, model } => ClfManifest::Svmc {
            seed: model.seed,
            scaler: scaler.clone(),
            model: model.clone(),
        },
        TrainedClassifier::Rfc { scaler, model } => ClfManifest::Rfc {
            seed: model.seed,
            scaler: scaler.clone(),
            model: model.clone(),
        },
        TrainedClassifier::Mlp { scaler, model } => {
            let mut weights = Vec::with_capacity(model.params.len());
            for (idx, tensor) in model.params.iter().enumerate() {
                let file = format!("w{idx:03}.ltsr");
                io::write_tensor(&dir.join(&file), tensor)?;
                weights.push(file);
            }
            ClfManifest::Mlp {
                seed: model.cfg.seed,
                scaler: scaler.clone(),
                config: model.cfg.clone(),
                input_dim: model.input_dim,
                weights,
            }
        }
    };
    io::write_json(&dir.join("clf.json"), &manifest)
}

pub fn load_classifier(dir: &Path) -> Result<TrainedClassifier> {
    let manifest: ClfManifest = io::read_json(&dir.join("clf.json"))?;
    Ok(match manifest {
        ClfManifest::Svmc { scaler, model, .. } => TrainedClassifier::Svmc { scaler, model },
        ClfManifest::Rfc { scaler, model, .. } => TrainedClassifier::Rfc { scaler, model },
        ClfManifest::Mlp { scaler, config, input_dim, weights, .. } => {
            let dims = mlp::layer_dims(input_dim);
            if weights.len() != 2 * dims.len() {
                return Err(Error::format(
                    dir.join("clf.json"),
                    format!("expected {} weight files, found {}", 2 * dims.len(), weights.len()),
                ));
            }
            let mut params = Vec::with_capacity(weights.len());
            for (idx, file) in weights.iter().enumerate() {
                let tensor: Tensor = io::read_tensor(&dir.join(file))?;
                let (rows, cols) = dims[idx / 2];
                let want: &[usize] = if idx % 2 == 0 { &[rows, cols] } else { &[cols] };
                if tensor.shape() != want {
                    return Err(Error::format(
                        dir.join(file),
                        format!("tensor shape {:?} does not match layer {want:?}", tensor.shape()),
                    ));
                }
                params.push(tensor);
            }
            TrainedClassifier::Mlp {
                scaler,
                model: MlpModel { input_dim, params, cfg: config },
            }
        }
    })
}
