//! `lvdx` — phantom generation, segmentation training, latent-feature
//! selection, classification, and full cross-validated experiments.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use lvdx_core::classifiers::{self, ClassifierKind, ClassifierParams};
use lvdx_core::featsel::{self, lasso, Normalization, Pooling, Selection};
use lvdx_core::phantom::{self, PhantomConfig};
use lvdx_core::pipeline::{self, ExperimentConfig};
use lvdx_core::segnet::{self, SegNet, TrainConfig, BOTTLENECK_CHANNELS};
use lvdx_core::{io, Tensor};

#[derive(Parser)]
#[command(name = "lvdx", version, about = "Left-ventricle latent-feature diagnosis pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic 2D+t echo phantom datasets.
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Segmentation network: train, segment, extract latent features.
    #[command(subcommand)]
    Segnet(SegnetCmd),
    /// Feature selection over extracted latent features.
    #[command(subcommand)]
    Featsel(FeatselCmd),
    /// Disease classifiers over selected features.
    #[command(subcommand)]
    Clf(ClfCmd),
    /// Cross-validated experiment grids.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    TemporalMean,
    None,
}

impl From<PoolingArg> for Pooling {
    fn from(value: PoolingArg) -> Self {
        match value {
            PoolingArg::TemporalMean => Pooling::TemporalMean,
            PoolingArg::None => Pooling::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Svmc,
    Mlp,
    Rfc,
}

impl From<KindArg> for ClassifierKind {
    fn from(value: KindArg) -> Self {
        match value {
            KindArg::Svmc => ClassifierKind::Svmc,
            KindArg::Mlp => ClassifierKind::Mlp,
            KindArg::Rfc => ClassifierKind::Rfc,
        }
    }
}

#[derive(Subcommand)]
enum PhantomCmd {
    /// Generate a labeled dataset directory.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    cases: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Fraction of cases carrying the TTS-like motion pattern (label 1).
    #[arg(long, default_value_t = 140.0 / 300.0)]
    class_a_fraction: f64,
    #[arg(long, default_value_t = 0.15)]
    speckle: f64,
    #[arg(long, default_value_t = 0.1)]
    artifact_prob: f64,
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

#[derive(Subcommand)]
enum SegnetCmd {
    /// Train on a dataset directory and write a checkpoint.
    Train(SegnetTrainArgs),
    /// Segment one video into cavity probabilities and a binary mask.
    Segment(SegmentArgs),
    /// Extract pooled bottleneck features for every case.
    Extract(ExtractArgs),
}

#[derive(Args)]
struct SegnetTrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 8)]
    base: usize,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr0: f64,
    #[arg(long, default_value_t = 0.05)]
    lr_decay: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda_dice: f64,
    #[arg(long, default_value_t = 0.1)]
    augment: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    video: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = PoolingArg::TemporalMean)]
    pooling: PoolingArg,
    /// Also write per-case GradCAM kernel weights (`alphas.ltsr`) for FSR.
    #[arg(long)]
    alphas: bool,
}

#[derive(Subcommand)]
enum FeatselCmd {
    /// GradCAM kernel-frequency ranking over extracted weights.
    Fsr(FsrArgs),
    /// LASSO path selection targeting a support-size fraction.
    Fsl(FslArgs),
}

#[derive(Args)]
struct FsrArgs {
    /// Directory written by `segnet extract --alphas`.
    #[arg(long)]
    extract: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Render per-case heatmaps (needs --model and --dataset).
    #[arg(long, requires = "model", requires = "dataset")]
    heatmaps: bool,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct FslArgs {
    /// Directory written by `segnet extract`.
    #[arg(long)]
    extract: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.10)]
    target_keep: f64,
    /// Read labels from a dataset manifest.csv instead of extract.json.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ClfCmd {
    /// Train a classifier on extracted (optionally selected) features.
    Train(ClfTrainArgs),
    /// Predict labels for extracted features with a saved classifier.
    Predict(ClfPredictArgs),
}

#[derive(Args)]
struct ClfTrainArgs {
    #[arg(long)]
    extract: PathBuf,
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    out: PathBuf,
    /// selection.json restricting the feature columns.
    #[arg(long)]
    selection: Option<PathBuf>,
    /// JSON file overriding classifier hyperparameters.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ClfPredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    extract: PathBuf,
    /// Output CSV (id,truth,predicted,score).
    #[arg(long)]
    out: PathBuf,
    /// selection.json used when the classifier was trained.
    #[arg(long)]
    selection: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Run the configured experiment grid and write reports.
    Run(PipelineRunArgs),
}

#[derive(Args)]
struct PipelineRunArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Sidecar metadata for an extracted feature matrix.
#[derive(Serialize, Deserialize)]
struct ExtractManifest {
    pooling: Pooling,
    feature_shape: Vec<usize>,
    ids: Vec<String>,
    labels: Vec<u8>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Phantom(PhantomCmd::Generate(args)) => generate(args),
        Command::Segnet(SegnetCmd::Train(args)) => segnet_train(args),
        Command::Segnet(SegnetCmd::Segment(args)) => segnet_segment(args),
        Command::Segnet(SegnetCmd::Extract(args)) => segnet_extract(args),
        Command::Featsel(FeatselCmd::Fsr(args)) => featsel_fsr(args),
        Command::Featsel(FeatselCmd::Fsl(args)) => featsel_fsl(args),
        Command::Clf(ClfCmd::Train(args)) => clf_train(args),
        Command::Clf(ClfCmd::Predict(args)) => clf_predict(args),
        Command::Pipeline(PipelineCmd::Run(args)) => pipeline_run(args),
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let config = PhantomConfig {
        frames: args.frames,
        height: args.height,
        width: args.width,
        class_a_fraction: args.class_a_fraction,
        speckle: args.speckle,
        artifact_prob: args.artifact_prob,
        master_seed: args.seed,
    };
    let cases = phantom::generate_dataset(&config, args.cases)?;
    phantom::write_dataset(&args.out, &cases)?;
    let positives = cases.iter().filter(|c| c.label == 1).count();
    println!(
        "wrote {} cases ({} positive) to {}",
        cases.len(),
        positives,
        args.out.display()
    );
    Ok(())
}

fn segnet_train(args: SegnetTrainArgs) -> Result<()> {
    let cases = phantom::read_dataset(&args.dataset)?;
    let videos: Vec<Tensor> = cases.iter().map(|c| c.video.clone()).collect();
    let masks: Vec<Tensor> = cases.iter().map(|c| c.mask.clone()).collect();
    let mut net = SegNet::build(args.levels, args.base, args.seed)?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        lr0: args.lr0,
        lr_decay: args.lr_decay,
        lambda_dice: args.lambda_dice,
        augment: args.augment,
        seed: args.seed,
    };
    let losses = net.train(&videos, &masks, &cfg)?;
    net.save(&args.out)?;
    println!(
        "trained {} epochs on {} cases; loss {:.4} -> {:.4}; checkpoint in {}",
        cfg.epochs,
        videos.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn segnet_segment(args: SegmentArgs) -> Result<()> {
    let net = SegNet::load(&args.model)?;
    let video: Tensor = io::read_tensor(&args.video)?;
    let prob = net.segment(&video)?;
    let mask = segnet::binarize(&prob);
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    io::write_tensor(&args.out.join("prob.ltsr"), &prob)?;
    io::write_tensor(&args.out.join("mask.ltsr"), &mask)?;
    let cavity = mask.data().iter().sum::<f64>() / mask.data().len() as f64;
    println!(
        "segmented {:?}; cavity fills {:.1}% of voxels; wrote {}",
        video.shape(),
        100.0 * cavity,
        args.out.display()
    );
    Ok(())
}

fn segnet_extract(args: ExtractArgs) -> Result<()> {
    let net = SegNet::load(&args.model)?;
    let cases = phantom::read_dataset(&args.dataset)?;
    let videos: Vec<Tensor> = cases.iter().map(|c| c.video.clone()).collect();
    let pooling: Pooling = args.pooling.into();
    let (rows, feature_shape) = featsel::latent_features(&net, &videos, pooling)?;
    let (n, p) = (rows.len(), rows[0].len());
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    io::write_tensor(&args.out.join("features.ltsr"), &Tensor::new(&[n, p], rows.concat())?)?;
    let manifest = ExtractManifest {
        pooling,
        feature_shape,
        ids: cases.iter().map(|c| c.id.clone()).collect(),
        labels: cases.iter().map(|c| c.label).collect(),
    };
    io::write_json(&args.out.join("extract.json"), &manifest)?;
    if args.alphas {
        let mut data = Vec::with_capacity(n * BOTTLENECK_CHANNELS);
        for video in &videos {
            let mut fwd = net.forward(&segnet::normalize(video)?, true)?;
            data.extend(featsel::kernel_weights(&mut fwd, Normalization::SpatialCount)?);
        }
        io::write_tensor(
            &args.out.join("alphas.ltsr"),
            &Tensor::new(&[n, BOTTLENECK_CHANNELS], data)?,
        )?;
    }
    println!("extracted {n} cases x {p} features to {}", args.out.display());
    Ok(())
}

fn featsel_fsr(args: FsrArgs) -> Result<()> {
    let manifest: ExtractManifest = io::read_json(&args.extract.join("extract.json"))?;
    let alphas: Tensor = io::read_tensor(&args.extract.join("alphas.ltsr"))
        .context("FSR needs alphas.ltsr; rerun `segnet extract` with --alphas")?;
    let &[n, k] = alphas.shape() else {
        bail!("alphas.ltsr must be a 2-D (cases, kernels) tensor, got {:?}", alphas.shape());
    };
    let weights: Vec<Vec<f64>> =
        (0..n).map(|i| alphas.data()[i * k..(i + 1) * k].to_vec()).collect();
    let selection = featsel::fsr_select(&weights, &manifest.feature_shape, manifest.pooling)?;
    write_selection(&args.out, &selection)?;
    if args.heatmaps {
        let net = SegNet::load(args.model.as_deref().unwrap())?;
        let cases = phantom::read_dataset(args.dataset.as_deref().unwrap())?;
        let idx: Vec<usize> = (0..cases.len()).collect();
        pipeline::write_heatmaps(&net, &cases, &idx, &args.out.join("heatmaps"))?;
        println!("rendered {} heatmaps", cases.len());
    }
    Ok(())
}

fn featsel_fsl(args: FslArgs) -> Result<()> {
    let manifest: ExtractManifest = io::read_json(&args.extract.join("extract.json"))?;
    let x: Tensor = io::read_tensor(&args.extract.join("features.ltsr"))?;
    let labels = match &args.manifest {
        Some(path) => manifest_labels(path, &manifest.ids)?,
        None => manifest.labels.clone(),
    };
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let amax = lasso::alpha_max(&x, &y)?;
    ensure!(amax > 0.0, "features carry no signal about the labels (alpha_max is zero)");
    let grid = lasso::default_alpha_grid(amax * (1.0 - 1e-6), 25);
    let selection =
        featsel::fsl_select(&x, &y, args.target_keep, &grid, &manifest.feature_shape, manifest.pooling)?;
    write_selection(&args.out, &selection)?;
    Ok(())
}

fn write_selection(dir: &Path, selection: &Selection) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    io::write_json(&dir.join("selection.json"), selection)?;
    let alpha = selection.alpha.map_or("-".to_string(), |a| format!("{a:.6e}"));
    println!(
        "kept {} of {} features over kernels {:?} (alpha {}, reduction {:.4}); wrote {}",
        selection.features.len(),
        selection.total_features,
        selection.kernels,
        alpha,
        selection.reduction,
        dir.join("selection.json").display()
    );
    Ok(())
}

/// Labels from a dataset `manifest.csv`, returned in `ids` order.
fn manifest_labels(path: &Path, ids: &[String]) -> Result<Vec<u8>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut by_id = std::collections::HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or("").trim().to_string();
        let label: u8 = fields
            .next()
            .unwrap_or("")
            .trim()
            .parse()
            .with_context(|| format!("{}: line {} has no parsable label", path.display(), lineno + 1))?;
        by_id.insert(id, label);
    }
    ids.iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .with_context(|| format!("{}: no label for case {id}", path.display()))
        })
        .collect()
}

/// Feature matrix from an extract directory, with the columns of
/// `selection.json` applied when given.
fn load_features(dir: &Path, selection: Option<&Path>) -> Result<(Tensor, ExtractManifest)> {
    let manifest: ExtractManifest = io::read_json(&dir.join("extract.json"))?;
    let full: Tensor = io::read_tensor(&dir.join("features.ltsr"))?;
    let &[n, p] = full.shape() else {
        bail!("features.ltsr must be a 2-D (cases, features) tensor, got {:?}", full.shape());
    };
    ensure!(
        n == manifest.ids.len(),
        "features.ltsr has {n} rows but extract.json lists {} cases",
        manifest.ids.len()
    );
    let x = match selection {
        None => full,
        Some(path) => {
            let sel: Selection = io::read_json(path)?;
            ensure!(
                sel.total_features == p,
                "selection covers {} features but the matrix has {p} columns",
                sel.total_features
            );
            let mut data = Vec::with_capacity(n * sel.features.len());
            for i in 0..n {
                data.extend(sel.apply(&full.data()[i * p..(i + 1) * p])?);
            }
            Tensor::new(&[n, sel.features.len()], data)?
        }
    };
    Ok((x, manifest))
}

fn clf_train(args: ClfTrainArgs) -> Result<()> {
    let (x, manifest) = load_features(&args.extract, args.selection.as_deref())?;
    let params: ClassifierParams = match &args.params {
        Some(path) => io::read_json(path)?,
        None => ClassifierParams::default(),
    };
    let kind: ClassifierKind = args.kind.into();
    let clf = classifiers::train_classifier(kind, &x, &manifest.labels, &params, args.seed)?;
    classifiers::save_classifier(&args.out, &clf)?;
    println!(
        "trained {kind:?} on {} cases x {} features; model in {}",
        x.shape()[0],
        x.shape()[1],
        args.out.display()
    );
    Ok(())
}

fn clf_predict(args: ClfPredictArgs) -> Result<()> {
    let clf = classifiers::load_classifier(&args.model)?;
    let (x, manifest) = load_features(&args.extract, args.selection.as_deref())?;
    let &[n, p] = x.shape() else { unreachable!("load_features returns matrices") };
    let mut csv = String::from("id,truth,predicted,score\n");
    let mut correct = 0usize;
    for i in 0..n {
        let (label, score) = clf.predict(&x.data()[i * p..(i + 1) * p])?;
        csv.push_str(&format!("{},{},{},{:.6}\n", manifest.ids[i], manifest.labels[i], label, score));
        correct += usize::from(label == manifest.labels[i]);
    }
    if let Some(parent) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(&args.out, csv).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "predicted {n} cases, {correct} match the recorded labels; wrote {}",
        args.out.display()
    );
    Ok(())
}

fn pipeline_run(args: PipelineRunArgs) -> Result<()> {
    let cfg: ExperimentConfig = io::read_json(&args.config)?;
    let report = pipeline::run_experiment(&cfg, Some(&args.out))?;
    for v in &report.variants {
        println!(
            "{}: accuracy {:.4}, f1 {}, reduction {:.4}",
            v.label,
            v.pooled.accuracy,
            lvdx_core::metrics::MetricsEntry::fmt(v.pooled.f1),
            v.reduction
        );
    }
    println!(
        "{} variants over {} folds in {:.1} s; reports in {}",
        report.variants.len(),
        report.folds,
        report.runtime_s,
        args.out.display()
    );
    Ok(())
}
