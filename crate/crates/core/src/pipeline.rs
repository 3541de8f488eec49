//! Experiment orchestration: dataset ingestion, stratified k-fold
//! cross-validation, the selection × classifier variant grid, metric
//! aggregation, and report/artifact emission.
//!
//! Within a fold the segmentation network is trained once on the training
//! split and shared by every variant; feature selection and classifier
//! training see training-split data only. Label 1 (TTS-like) is the
//! positive class throughout.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classifiers::{
    save_classifier, train_classifier, ClassifierKind, ClassifierParams,
};
use crate::error::{Error, Result};
use crate::featsel::{
    self, fsl_select_net, fsr_select_net, gradcam_map, kernel_weights, upsample_nearest,
    Normalization, Pooling, Selection, SelectionMethod,
};
use crate::metrics::{compute_metrics, Confusion, MetricsEntry};
use crate::phantom::{self, LabeledEcho};
use crate::segnet::{normalize, SegNet, TrainConfig};
use crate::{io, rng, Elem, Tensor};

/// Which selections an experiment covers; `All` expands to the three-block
/// grid (pass-through, FSR, FSL).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionSpec {
    None,
    Fsr,
    Fsl,
    All,
}

impl SelectionSpec {
    pub fn methods(self) -> Vec<SelectionMethod> {
        match self {
            Self::None => vec![SelectionMethod::None],
            Self::Fsr => vec![SelectionMethod::Fsr],
            Self::Fsl => vec![SelectionMethod::Fsl],
            Self::All => vec![SelectionMethod::None, SelectionMethod::Fsr, SelectionMethod::Fsl],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierSpec {
    Svmc,
    Mlp,
    Rfc,
    All,
}

impl ClassifierSpec {
    pub fn kinds(self) -> Vec<ClassifierKind> {
        match self {
            Self::Svmc => vec![ClassifierKind::Svmc],
            Self::Mlp => vec![ClassifierKind::Mlp],
            Self::Rfc => vec![ClassifierKind::Rfc],
            Self::All => vec![ClassifierKind::Svmc, ClassifierKind::Mlp, ClassifierKind::Rfc],
        }
    }
}

/// Segmentation-stage hyperparameters: architecture plus the training
/// schedule fields of [`TrainConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegnetParams {
    pub levels: usize,
    pub base_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lambda_dice: f64,
    pub augment: f64,
}

impl Default for SegnetParams {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            levels: 3,
            base_channels: 8,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr0: t.lr0,
            lr_decay: t.lr_decay,
            lambda_dice: t.lambda_dice,
            augment: t.augment,
        }
    }
}

impl SegnetParams {
    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            lr_decay: self.lr_decay,
            lambda_dice: self.lambda_dice,
            augment: self.augment,
            seed,
        }
    }
}

fn default_folds() -> usize {
    4
}
fn default_selection() -> SelectionSpec {
    SelectionSpec::All
}
fn default_classifier() -> ClassifierSpec {
    ClassifierSpec::All
}
fn default_pooling() -> Pooling {
    Pooling::TemporalMean
}
fn default_target_keep() -> f64 {
    0.10
}

/// One experiment: a dataset, a fold count, the variant grid to run, and
/// every module hyperparameter. Mirrors the JSON accepted by
/// `pipeline run --config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_selection")]
    pub selection: SelectionSpec,
    #[serde(default = "default_classifier")]
    pub classifier: ClassifierSpec,
    #[serde(default)]
    pub segnet: SegnetParams,
    #[serde(default)]
    pub classifier_params: ClassifierParams,
    #[serde(default = "default_pooling")]
    pub pooling: Pooling,
    /// FSL support-size target as a fraction of the pooled feature count.
    #[serde(default = "default_target_keep")]
    pub target_keep: f64,
    #[serde(default)]
    pub seed: u64,
    /// Emit per-case GradCAM heatmaps for held-out cases when FSR runs.
    #[serde(default)]
    pub heatmaps: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidConfig(format!(
                "cross-validation needs at least 2 folds, got {}",
                self.folds
            )));
        }
        let runs_fsl = matches!(self.selection, SelectionSpec::Fsl | SelectionSpec::All);
        if runs_fsl && !(self.target_keep > 0.0 && self.target_keep < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "target_keep must lie strictly inside (0, 1), got {}",
                self.target_keep
            )));
        }
        Ok(())
    }

    /// Stable hex digest of the serialized config, stamped into reports.
    pub fn fingerprint(&self) -> Result<String> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::InvalidArgument(format!("config not serializable: {e}")))?;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in json.bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Ok(format!("{h:016x}"))
    }
}

/// Held-out results for one fold of one variant.
#[derive(Clone, Debug, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub case_ids: Vec<String>,
    pub truth: Vec<u8>,
    pub predicted: Vec<u8>,
    pub scores: Vec<f64>,
    pub confusion: Confusion,
}

/// Aggregated results for one selection × classifier variant.
#[derive(Clone, Debug, Serialize)]
pub struct VariantReport {
    /// Human-readable row label, e.g. `LV-SegNet + FSL + RFC`.
    pub label: String,
    pub selection: SelectionMethod,
    pub classifier: ClassifierKind,
    pub folds: Vec<FoldResult>,
    pub per_fold: Vec<MetricsEntry>,
    pub pooled_confusion: Confusion,
    pub pooled: MetricsEntry,
    /// Feature-reduction ratio, averaged over folds.
    pub reduction: f64,
    /// Seconds spent training and evaluating this variant's classifier.
    pub clf_seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub fingerprint: String,
    pub folds: usize,
    pub cases: usize,
    pub variants: Vec<VariantReport>,
    pub runtime_s: f64,
}

/// Reference metrics reported by the original study. Context rows for
/// reports only — never recomputed here.
pub const REFERENCE_RESULTS: [(&str, f64, f64, f64, f64); 13] = [
    ("DCNN (2D [SCI])", 0.67, 0.78, 0.69, 0.73),
    ("DCNN (2D [MCI])", 0.73, 0.77, 0.73, 0.75),
    ("RNN", 0.71, 0.79, 0.72, 0.75),
    ("DCNN (2D+t)", 0.79, 0.80, 0.78, 0.80),
    ("LV-SegNet + SVMC", 0.76, 0.84, 0.80, 0.80),
    ("LV-SegNet + MLP", 0.81, 0.79, 0.81, 0.80),
    ("LV-SegNet + RFC", 0.67, 0.75, 0.71, 0.71),
    ("LV-SegNet + FSR + SVMC", 0.76, 0.72, 0.75, 0.74),
    ("LV-SegNet + FSR + MLP", 0.75, 0.66, 0.73, 0.71),
    ("LV-SegNet + FSR + RFC", 0.58, 0.75, 0.57, 0.67),
    ("LV-SegNet + FSL + SVMC", 0.73, 0.82, 0.76, 0.78),
    ("LV-SegNet + FSL + MLP", 0.73, 0.87, 0.80, 0.81),
    ("LV-SegNet + FSL + RFC", 0.78, 0.85, 0.82, 0.82),
];

/// Stratified k-fold split: indices are dealt round-robin within each class
/// after a per-class shuffle, so every fold's class counts sit within one
/// case of `n_class / k` and fold sizes within one case of `n / k`.
pub fn kfold_split(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k-fold needs k >= 2, got {k}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("labels must be 0 or 1, got {bad}")));
    }
    for class in [0u8, 1u8] {
        let count = labels.iter().filter(|&&l| l == class).count();
        if count < k {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {count} cases, fewer than k = {k}"
            )));
        }
    }
    let mut folds = vec![Vec::new(); k];
    let mut cursor = 0usize;
    for class in [0u8, 1u8] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng::stream(seed, "kfold-class", u64::from(class)));
        for i in idx {
            folds[cursor % k].push(i);
            cursor += 1;
        }
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

/// Fit the configured selection from the training slice of `cases` only;
/// held-out features and labels never reach this function's inputs.
pub fn fit_selection(
    net: &SegNet,
    cases: &[LabeledEcho],
    train: &[usize],
    method: SelectionMethod,
    pooling: Pooling,
    target_keep: f64,
) -> Result<Selection> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("selection needs a non-empty training split".into()));
    }
    let videos: Vec<Tensor> = train.iter().map(|&i| cases[i].video.clone()).collect();
    match method {
        SelectionMethod::None => {
            let (_, shape) = featsel::latent_features(net, &videos[..1], pooling)?;
            Ok(Selection::keep_all(&shape, pooling))
        }
        SelectionMethod::Fsr => fsr_select_net(net, &videos, pooling),
        SelectionMethod::Fsl => {
            let labels: Vec<u8> = train.iter().map(|&i| cases[i].label).collect();
            fsl_select_net(net, &videos, &labels, pooling, target_keep)
        }
    }
}

fn sel_slug(method: SelectionMethod) -> &'static str {
    match method {
        SelectionMethod::None => "none",
        SelectionMethod::Fsr => "fsr",
        SelectionMethod::Fsl => "fsl",
    }
}

fn kind_slug(kind: ClassifierKind) -> &'static str {
    match kind {
        ClassifierKind::Svmc => "svmc",
        ClassifierKind::Mlp => "mlp",
        ClassifierKind::Rfc => "rfc",
    }
}

fn method_label(method: SelectionMethod, kind: ClassifierKind) -> String {
    let clf = match kind {
        ClassifierKind::Svmc => "SVMC",
        ClassifierKind::Mlp => "MLP",
        ClassifierKind::Rfc => "RFC",
    };
    match method {
        SelectionMethod::None => format!("LV-SegNet + {clf}"),
        SelectionMethod::Fsr => format!("LV-SegNet + FSR + {clf}"),
        SelectionMethod::Fsl => format!("LV-SegNet + FSL + {clf}"),
    }
}

/// Mid-frame GradCAM heatmap for each listed case, min-max scaled to 8-bit
/// and written as `<case id>.pgm`.
pub fn write_heatmaps(net: &SegNet, cases: &[LabeledEcho], idx: &[usize], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for &i in idx {
        let case = &cases[i];
        let video = normalize(&case.video)?;
        let mut fwd = net.forward(&video, true)?;
        let alphas = kernel_weights(&mut fwd, Normalization::SpatialCount)?;
        let map = gradcam_map(fwd.graph.value(fwd.bottleneck), &alphas)?;
        let &[t, h, w] = case.video.shape() else {
            return Err(Error::ShapeMismatch {
                op: "heatmap",
                detail: format!("video shape {:?} is not (T, H, W)", case.video.shape()),
            });
        };
        let up = upsample_nearest(&map, &[t, h, w])?;
        let frame = &up.data()[(t / 2) * h * w..(t / 2 + 1) * h * w];
        let lo = frame.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = frame.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
        let pixels: Vec<u8> = frame.iter().map(|&v| ((v - lo) * scale).round() as u8).collect();
        io::write_pgm(&dir.join(format!("{}.pgm", case.id)), w, h, &pixels)?;
    }
    Ok(())
}

struct VariantAcc {
    selection: SelectionMethod,
    classifier: ClassifierKind,
    folds: Vec<FoldResult>,
    reduction_sum: f64,
    clf_seconds: f64,
}

/// Run the configured experiment grid: per fold, train the segmentation
/// network on the training split, extract pooled bottleneck features for
/// every case, fit each selection on training data only, then train and
/// evaluate each classifier. When `out` is given, checkpoints, selections,
/// trained classifiers, optional heatmaps, and the two report files are
/// written beneath it.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<MetricsReport> {
    let started = Instant::now();
    cfg.validate()?;
    let cases = phantom::read_dataset(&cfg.dataset)?;
    let labels: Vec<u8> = cases.iter().map(|c| c.label).collect();
    let folds = kfold_split(&labels, cfg.folds, rng::derive_seed(cfg.seed, "kfold", 0))?;
    let methods = cfg.selection.methods();
    let kinds = cfg.classifier.kinds();
    let mut accs: Vec<VariantAcc> = methods
        .iter()
        .flat_map(|&m| {
            kinds.iter().map(move |&k| VariantAcc {
                selection: m,
                classifier: k,
                folds: Vec::new(),
                reduction_sum: 0.0,
                clf_seconds: 0.0,
            })
        })
        .collect();
    let all_videos: Vec<Tensor> = cases.iter().map(|c| c.video.clone()).collect();

    for (f, test_idx) in folds.iter().enumerate() {
        let train_idx: Vec<usize> = (0..cases.len()).filter(|i| !test_idx.contains(i)).collect();
        let train_videos: Vec<Tensor> = train_idx.iter().map(|&i| all_videos[i].clone()).collect();
        let train_masks: Vec<Tensor> = train_idx.iter().map(|&i| cases[i].mask.clone()).collect();
        let train_labels: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();

        let mut net = SegNet::build(
            cfg.segnet.levels,
            cfg.segnet.base_channels,
            rng::derive_seed(cfg.seed, "fold-build", f as u64),
        )
        .map_err(|e| Error::stage("segnet-build", f, e))?;
        let tc = cfg.segnet.train_config(rng::derive_seed(cfg.seed, "fold-train", f as u64));
        net.train(&train_videos, &train_masks, &tc)
            .map_err(|e| Error::stage("segnet-train", f, e))?;
        let fold_dir = out.map(|o| o.join(format!("fold{f}")));
        if let Some(dir) = &fold_dir {
            net.save(&dir.join("segnet")).map_err(|e| Error::stage("checkpoint", f, e))?;
        }

        let (rows, _) = featsel::latent_features(&net, &all_videos, cfg.pooling)
            .map_err(|e| Error::stage("extract", f, e))?;

        for (mi, &method) in methods.iter().enumerate() {
            let selection = fit_selection(&net, &cases, &train_idx, method, cfg.pooling, cfg.target_keep)
                .map_err(|e| Error::stage("selection", f, e))?;
            if let Some(dir) = &fold_dir {
                let sel_dir = dir.join(format!("sel-{}", sel_slug(method)));
                std::fs::create_dir_all(&sel_dir).map_err(|e| Error::io(&sel_dir, e))?;
                io::write_json(&sel_dir.join("selection.json"), &selection)
                    .map_err(|e| Error::stage("selection", f, e))?;
                if method == SelectionMethod::Fsr && cfg.heatmaps {
                    write_heatmaps(&net, &cases, test_idx, &sel_dir.join("heatmaps"))
                        .map_err(|e| Error::stage("heatmaps", f, e))?;
                }
            }

            let x_train: Vec<Vec<Elem>> = train_idx
                .iter()
                .map(|&i| selection.apply(&rows[i]))
                .collect::<Result<_>>()
                .map_err(|e| Error::stage("selection", f, e))?;
            let kept = selection.features.len();
            let x_train = Tensor::new(
                &[train_idx.len(), kept],
                x_train.into_iter().flatten().collect(),
            )
            .map_err(|e| Error::stage("selection", f, e))?;

            for (ki, &kind) in kinds.iter().enumerate() {
                let acc = &mut accs[mi * kinds.len() + ki];
                let t0 = Instant::now();
                let clf_seed = rng::derive_seed(
                    cfg.seed,
                    &format!("clf-{}-{}", sel_slug(method), kind_slug(kind)),
                    f as u64,
                );
                let clf = train_classifier(kind, &x_train, &train_labels, &cfg.classifier_params, clf_seed)
                    .map_err(|e| Error::stage("classifier", f, e))?;
                if let Some(dir) = &fold_dir {
                    let clf_dir = dir.join(format!("clf-{}-{}", sel_slug(method), kind_slug(kind)));
                    save_classifier(&clf_dir, &clf).map_err(|e| Error::stage("classifier", f, e))?;
                }
                let mut predicted = Vec::with_capacity(test_idx.len());
                let mut scores = Vec::with_capacity(test_idx.len());
                for &i in test_idx {
                    let row = selection.apply(&rows[i]).map_err(|e| Error::stage("predict", f, e))?;
                    let (label, score) =
                        clf.predict(&row).map_err(|e| Error::stage("predict", f, e))?;
                    predicted.push(label);
                    scores.push(score);
                }
                let truth: Vec<u8> = test_idx.iter().map(|&i| labels[i]).collect();
                let confusion = Confusion::tally(&truth, &predicted)
                    .map_err(|e| Error::stage("evaluate", f, e))?;
                acc.folds.push(FoldResult {
                    fold: f,
                    case_ids: test_idx.iter().map(|&i| cases[i].id.clone()).collect(),
                    truth,
                    predicted,
                    scores,
                    confusion,
                });
                acc.reduction_sum += selection.reduction;
                acc.clf_seconds += t0.elapsed().as_secs_f64();
            }
        }
    }

    let mut variants = Vec::with_capacity(accs.len());
    for acc in accs {
        let per_fold: Vec<MetricsEntry> =
            acc.folds.iter().map(|fr| compute_metrics(&fr.confusion)).collect::<Result<_>>()?;
        let mut pooled_confusion = Confusion::default();
        for fr in &acc.folds {
            pooled_confusion.merge(&fr.confusion);
        }
        let pooled = compute_metrics(&pooled_confusion)?;
        variants.push(VariantReport {
            label: method_label(acc.selection, acc.classifier),
            selection: acc.selection,
            classifier: acc.classifier,
            per_fold,
            pooled_confusion,
            pooled,
            reduction: acc.reduction_sum / folds.len() as f64,
            clf_seconds: acc.clf_seconds,
            folds: acc.folds,
        });
    }
    let report = MetricsReport {
        fingerprint: cfg.fingerprint()?,
        folds: cfg.folds,
        cases: cases.len(),
        variants,
        runtime_s: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        emit_report(&report, dir)?;
    }
    Ok(report)
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v?;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Write `report.csv` (pooled metrics, one row per variant) and `report.md`
/// (pooled + per-fold views plus the reference table) into `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut csv = String::from("method,sensitivity,specificity,f1,accuracy,reduction\n");
    for v in &report.variants {
        csv.push_str(&format!(
            "{},{},{},{},{},{:.4}\n",
            v.label,
            MetricsEntry::fmt(v.pooled.sensitivity),
            MetricsEntry::fmt(v.pooled.specificity),
            MetricsEntry::fmt(v.pooled.f1),
            MetricsEntry::fmt(Some(v.pooled.accuracy)),
            v.reduction,
        ));
    }
    let csv_path = dir.join("report.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let mut md = String::from("# Differential diagnosis report\n\n");
    md.push_str(&format!(
        "- config fingerprint: `{}`\n- cases: {}\n- folds: {}\n- total runtime: {:.1} s\n\n",
        report.fingerprint, report.cases, report.folds, report.runtime_s
    ));
    md.push_str("Positive class is the TTS-like motion pattern (label 1).\n\n");

    md.push_str("## Pooled over folds\n\n");
    md.push_str("| Method | Sensitivity | Specificity | F1 | Accuracy | Reduction | Classifier stage (s) |\n");
    md.push_str("|---|---|---|---|---|---|---|\n");
    for v in &report.variants {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.4} | {:.2} |\n",
            v.label,
            MetricsEntry::fmt(v.pooled.sensitivity),
            MetricsEntry::fmt(v.pooled.specificity),
            MetricsEntry::fmt(v.pooled.f1),
            MetricsEntry::fmt(Some(v.pooled.accuracy)),
            v.reduction,
            v.clf_seconds,
        ));
    }

    md.push_str("\n## Averaged per fold\n\n");
    md.push_str("| Method | Sensitivity | Specificity | F1 | Accuracy |\n|---|---|---|---|---|\n");
    for v in &report.variants {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            v.label,
            MetricsEntry::fmt(mean_defined(v.per_fold.iter().map(|m| m.sensitivity))),
            MetricsEntry::fmt(mean_defined(v.per_fold.iter().map(|m| m.specificity))),
            MetricsEntry::fmt(mean_defined(v.per_fold.iter().map(|m| m.f1))),
            MetricsEntry::fmt(mean_defined(v.per_fold.iter().map(|m| Some(m.accuracy)))),
        ));
    }

    md.push_str("\n## Per-fold accuracy\n\n| Method |");
    for f in 0..report.folds {
        md.push_str(&format!(" fold {f} |"));
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(report.folds));
    md.push('\n');
    for v in &report.variants {
        md.push_str(&format!("| {} |", v.label));
        for m in &v.per_fold {
            md.push_str(&format!(" {:.4} |", m.accuracy));
        }
        md.push('\n');
    }

    md.push_str("\n## Reference results (paper-reported, not reproduced)\n\n");
    md.push_str(
        "The original study's Table 1 rows are reprinted below for context. They came \
         from a private 300-patient clinical dataset and are not comparable to the \
         synthetic-phantom numbers above.\n\n",
    );
    md.push_str("| Method | Sensitivity | Specificity | F1 | Accuracy |\n|---|---|---|---|---|\n");
    for (label, sens, spec, f1, acc) in REFERENCE_RESULTS {
        md.push_str(&format!("| {label} | {sens:.2} | {spec:.2} | {f1:.2} | {acc:.2} |\n"));
    }

    let md_path = dir.join("report.md");
    std::fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::PhantomConfig;

    fn class_counts(labels: &[u8], fold: &[usize]) -> (usize, usize) {
        let ones = fold.iter().filter(|&&i| labels[i] == 1).count();
        (fold.len() - ones, ones)
    }

    #[test]
    fn kfold_eight_cases_split_exactly() {
        let labels = [0, 1, 0, 1, 0, 1, 0, 1];
        let folds = kfold_split(&labels, 4, 9).unwrap();
        for fold in &folds {
            assert_eq!(fold.len(), 2);
            assert_eq!(class_counts(&labels, fold), (1, 1));
        }
    }

    #[test]
    fn kfold_three_hundred_cases_split_arithmetically() {
        let labels: Vec<u8> = (0..300).map(|i| u8::from(i % 15 < 8)).collect();
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 160);
        let folds = kfold_split(&labels, 4, 3).unwrap();
        for fold in &folds {
            assert_eq!(fold.len(), 75);
            assert_eq!(class_counts(&labels, fold), (35, 40));
        }
    }

    #[test]
    fn kfold_partitions_arbitrary_label_vectors() {
        for (n, k, seed) in [(11, 2, 0), (29, 3, 1), (64, 5, 2)] {
            let labels: Vec<u8> = (0..n).map(|i| u8::from((i * 7 + seed as usize) % 3 == 0)).collect();
            let folds = kfold_split(&labels, k, seed).unwrap();
            let mut seen = vec![false; n];
            for fold in &folds {
                for &i in fold {
                    assert!(!seen[i], "index {i} appears in two folds");
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "folds must cover every index");
            let global_ones = labels.iter().filter(|&&l| l == 1).count();
            for fold in &folds {
                let (_, ones) = class_counts(&labels, fold);
                let expected = global_ones as f64 * fold.len() as f64 / n as f64;
                assert!(
                    (ones as f64 - expected).abs() <= 1.0 + 1e-9,
                    "fold class ratio off by more than one case"
                );
            }
        }
    }

    #[test]
    fn kfold_rejects_thin_classes_and_degenerate_k() {
        assert!(kfold_split(&[0, 1, 0, 1], 1, 0).is_err());
        assert!(kfold_split(&[0, 0, 0, 1], 2, 0).is_err());
        assert!(kfold_split(&[0, 2, 1, 1], 2, 0).is_err());
    }

    #[test]
    fn config_json_fills_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"dataset": "cases"}"#).unwrap();
        assert_eq!(cfg.folds, 4);
        assert_eq!(cfg.selection, SelectionSpec::All);
        assert_eq!(cfg.classifier, ClassifierSpec::All);
        assert_eq!(cfg.pooling, Pooling::TemporalMean);
        assert_eq!(cfg.target_keep, 0.10);
        assert_eq!(cfg.segnet.levels, 3);
        assert_eq!(cfg.segnet.base_channels, 8);
        assert!(!cfg.heatmaps);
        assert_eq!(cfg.selection.methods().len() * cfg.classifier.kinds().len(), 9);

        let bad: ExperimentConfig =
            serde_json::from_str(r#"{"dataset": "cases", "folds": 1}"#).unwrap();
        assert!(bad.validate().is_err());
        let bad: ExperimentConfig =
            serde_json::from_str(r#"{"dataset": "cases", "target_keep": 1.0}"#).unwrap();
        assert!(bad.validate().is_err());
    }

    fn tiny_dataset_dir(dir: &Path, n: usize) -> Vec<LabeledEcho> {
        let cfg = PhantomConfig {
            frames: 8,
            height: 16,
            width: 16,
            artifact_prob: 0.0,
            speckle: 0.05,
            master_seed: 21,
            ..PhantomConfig::default()
        };
        let cases: Vec<LabeledEcho> = (0..n)
            .map(|i| {
                phantom::generate_case(&cfg, 400 + i as u64, (i % 2) as u8, &format!("c{i:03}"))
                    .unwrap()
            })
            .collect();
        phantom::write_dataset(dir, &cases).unwrap();
        cases
    }

    #[test]
    fn experiment_is_deterministic_and_writes_artifacts() {
        let data_dir = tempfile::tempdir().unwrap();
        tiny_dataset_dir(data_dir.path(), 8);
        let cfg = ExperimentConfig {
            dataset: data_dir.path().to_path_buf(),
            folds: 2,
            selection: SelectionSpec::Fsr,
            classifier: ClassifierSpec::Rfc,
            segnet: SegnetParams {
                levels: 4,
                base_channels: 4,
                epochs: 2,
                ..SegnetParams::default()
            },
            classifier_params: ClassifierParams { rf_trees: 20, ..ClassifierParams::default() },
            pooling: Pooling::TemporalMean,
            target_keep: 0.10,
            seed: 5,
            heatmaps: true,
        };
        let out_a = tempfile::tempdir().unwrap();
        let out_b = tempfile::tempdir().unwrap();
        let report = run_experiment(&cfg, Some(out_a.path())).unwrap();
        run_experiment(&cfg, Some(out_b.path())).unwrap();

        assert_eq!(report.variants.len(), 1);
        let v = &report.variants[0];
        assert_eq!(v.label, "LV-SegNet + FSR + RFC");
        assert_eq!(v.pooled_confusion.total(), 8);
        for fr in &v.folds {
            assert_eq!(fr.confusion.total(), fr.case_ids.len());
        }
        assert!((v.reduction - (1.0 - 3.0 / 32.0)).abs() < 1e-12);

        let csv_a = std::fs::read(out_a.path().join("report.csv")).unwrap();
        let csv_b = std::fs::read(out_b.path().join("report.csv")).unwrap();
        assert_eq!(csv_a, csv_b, "same config and seed must give identical report.csv");

        for f in 0..2 {
            let fold_dir = out_a.path().join(format!("fold{f}"));
            assert!(fold_dir.join("segnet").join("segnet.json").exists());
            assert!(fold_dir.join("sel-fsr").join("selection.json").exists());
            assert!(fold_dir.join("clf-fsr-rfc").join("clf.json").exists());
            let heatmaps = fold_dir.join("sel-fsr").join("heatmaps");
            assert!(std::fs::read_dir(&heatmaps).unwrap().count() > 0);
        }
        let md = std::fs::read_to_string(out_a.path().join("report.md")).unwrap();
        assert!(md.contains("paper-reported, not reproduced"));
        assert!(md.contains("| LV-SegNet + FSL + RFC | 0.78 | 0.85 | 0.82 | 0.82 |"));
    }

    #[test]
    fn poisoned_held_out_labels_never_move_the_selection() {
        let data_dir = tempfile::tempdir().unwrap();
        let cases = tiny_dataset_dir(data_dir.path(), 8);
        let net = SegNet::build(4, 4, 12).unwrap();
        let train: Vec<usize> = (0..6).collect();
        let mut poisoned = cases.clone();
        for i in 6..8 {
            poisoned[i].label ^= 1;
        }
        for method in [SelectionMethod::None, SelectionMethod::Fsr, SelectionMethod::Fsl] {
            let clean = fit_selection(&net, &cases, &train, method, Pooling::TemporalMean, 0.2)
                .unwrap();
            let dirty = fit_selection(&net, &poisoned, &train, method, Pooling::TemporalMean, 0.2)
                .unwrap();
            assert_eq!(clean, dirty, "{method:?} selection moved under poisoned held-out labels");
        }
    }

    #[test]
    fn emitting_the_same_report_twice_is_byte_identical() {
        let entry = MetricsEntry {
            sensitivity: Some(0.8),
            specificity: Some(0.9),
            f1: None,
            accuracy: 0.85,
        };
        let confusion = Confusion { true_pos: 4, false_pos: 1, true_neg: 9, false_neg: 1 };
        let report = MetricsReport {
            fingerprint: "abc123".into(),
            folds: 2,
            cases: 15,
            variants: vec![VariantReport {
                label: "LV-SegNet + FSL + RFC".into(),
                selection: SelectionMethod::Fsl,
                classifier: ClassifierKind::Rfc,
                folds: vec![],
                per_fold: vec![entry, entry],
                pooled_confusion: confusion,
                pooled: entry,
                reduction: 0.9,
                clf_seconds: 1.25,
            }],
            runtime_s: 3.5,
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        emit_report(&report, dir_a.path()).unwrap();
        emit_report(&report, dir_b.path()).unwrap();
        for name in ["report.csv", "report.md"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b);
        }
        let csv = std::fs::read_to_string(dir_a.path().join("report.csv")).unwrap();
        assert_eq!(
            csv,
            "method,sensitivity,specificity,f1,accuracy,reduction\n\
             LV-SegNet + FSL + RFC,0.8000,0.9000,NA,0.8500,0.9000\n"
        );
    }
}
