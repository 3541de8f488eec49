//! LV-SegNet: a 2D+t U-Net that segments the cavity and exposes its 32-kernel
//! bottleneck activation as the diagnostic feature map.
//!
//! The network is symmetric: `levels` resolution stages where each encoder
//! stage is two same-padded 3x3x3 convolutions + ReLU followed by a 2x2x2 max
//! pool, the deepest stage (no pool) is the bottleneck, and each decoder
//! stage upsamples with a stride-2 transposed convolution, concatenates the
//! matching encoder skip, and applies two more convolutions. A 1x1x1 head
//! plus sigmoid yields a per-voxel cavity probability. `base_channels`
//! doubles per stage and must reach exactly [`BOTTLENECK_CHANNELS`] at the
//! deepest one, because downstream feature selection indexes those kernels.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv3dAttrs, NodeId, Pool3dAttrs};
use crate::error::{Error, Result};
use crate::optim::{lr_schedule, AdamState};
use crate::{io, rng, Graph, Tensor};

/// Kernel count at the deepest stage; the latent space the whole diagnosis
/// pipeline is built around.
pub const BOTTLENECK_CHANNELS: usize = 32;

#[derive(Clone, Debug)]
pub struct SegNet {
    levels: usize,
    base_channels: usize,
    params: Vec<Tensor>,
}

/// One forward pass kept alive so callers can read interior activations and
/// run backward from any scalar derived from them.
pub struct Forward {
    pub graph: Graph,
    /// Node ids of the parameter tensors, in [`SegNet::param_names`] order.
    pub param_ids: Vec<NodeId>,
    /// Deepest activation, shape `(32, T', H', W')`.
    pub bottleneck: NodeId,
    /// Pre-sigmoid head output, shape `(1, T, H, W)`.
    pub logits: NodeId,
    /// Cavity probability, shape `(1, T, H, W)`.
    pub prob: NodeId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Exponential decay rate: epoch `e` trains at `lr0 * exp(-decay * e)`.
    pub lr_decay: f64,
    /// Weight of the soft-Dice term next to voxel BCE.
    pub lambda_dice: f64,
    /// Half-width of the uniform intensity shift applied to each normalized
    /// training video; 0 disables augmentation.
    pub augment: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 4,
            lr0: 1e-3,
            lr_decay: 0.05,
            lambda_dice: 0.5,
            augment: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        for (name, v) in [
            ("lr0", self.lr0),
            ("lr_decay", self.lr_decay),
            ("lambda_dice", self.lambda_dice),
            ("augment", self.augment),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.lambda_dice > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda_dice {} is a mix weight and must stay within [0, 1]",
                self.lambda_dice
            )));
        }
        Ok(())
    }
}

/// Parameter names and shapes in build/checkpoint order, derived only from
/// the architecture so `build`, `save` and `load` can never drift apart.
fn layer_specs(levels: usize, base_channels: usize) -> Vec<(String, Vec<usize>)> {
    let ch = |l: usize| base_channels << l;
    let mut specs = Vec::new();
    for l in 0..levels {
        let cin = if l == 0 { 1 } else { ch(l - 1) };
        let c = ch(l);
        let stage =
            if l == levels - 1 { "bottleneck".to_string() } else { format!("enc{l}") };
        specs.push((format!("{stage}.conv0.weight"), vec![c, cin, 3, 3, 3]));
        specs.push((format!("{stage}.conv0.bias"), vec![c]));
        specs.push((format!("{stage}.conv1.weight"), vec![c, c, 3, 3, 3]));
        specs.push((format!("{stage}.conv1.bias"), vec![c]));
    }
    for l in (0..levels - 1).rev() {
        let c = ch(l);
        specs.push((format!("dec{l}.up.weight"), vec![ch(l + 1), c, 2, 2, 2]));
        specs.push((format!("dec{l}.up.bias"), vec![c]));
        specs.push((format!("dec{l}.conv0.weight"), vec![c, 2 * c, 3, 3, 3]));
        specs.push((format!("dec{l}.conv0.bias"), vec![c]));
        specs.push((format!("dec{l}.conv1.weight"), vec![c, c, 3, 3, 3]));
        specs.push((format!("dec{l}.conv1.bias"), vec![c]));
    }
    specs.push(("head.weight".into(), vec![1, base_channels, 1, 1, 1]));
    specs.push(("head.bias".into(), vec![1]));
    specs
}

fn check_arch(levels: usize, base_channels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::InvalidConfig("segnet needs at least 1 level".into()));
    }
    if base_channels == 0 || base_channels << (levels - 1) != BOTTLENECK_CHANNELS {
        return Err(Error::InvalidConfig(format!(
            "base_channels {base_channels} with {levels} levels reaches {} bottleneck \
             kernels, the pipeline requires exactly {BOTTLENECK_CHANNELS}",
            base_channels << (levels - 1)
        )));
    }
    Ok(())
}

/// Zero-mean unit-variance normalization over the whole video.
pub fn normalize(video: &Tensor) -> Result<Tensor> {
    if !video.is_finite() {
        return Err(Error::NonFinite("video contains non-finite values".into()));
    }
    let n = video.numel() as f64;
    let mean = video.sum() / n;
    let var = video.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var < 1e-12 {
        return Err(Error::InvalidArgument(
            "cannot normalize a constant video (zero variance)".into(),
        ));
    }
    let inv = 1.0 / var.sqrt();
    Ok(video.map(|v| (v - mean) * inv))
}

/// Like [`normalize`], but a constant video maps to all zeros instead of
/// erroring so inference on degenerate inputs stays finite.
fn inference_normalize(video: &Tensor) -> Result<Tensor> {
    if !video.is_finite() {
        return Err(Error::NonFinite("video contains non-finite values".into()));
    }
    match normalize(video) {
        Ok(z) => Ok(z),
        Err(_) => Ok(Tensor::zeros(video.shape())),
    }
}

/// Additive per-voxel noise drawn i.i.d. from `uniform(-amplitude, amplitude)`.
/// Amplitude 0 returns the input unchanged; a fixed seed reproduces the same
/// perturbation.
pub fn augment(video: &Tensor, amplitude: f64, seed: u64) -> Result<Tensor> {
    if !amplitude.is_finite() || amplitude < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "augment amplitude must be finite and >= 0, got {amplitude}"
        )));
    }
    if amplitude == 0.0 {
        return Ok(video.clone());
    }
    let mut r = rng::stream(seed, "augment-noise", 0);
    let data = video
        .data()
        .iter()
        .map(|&v| v + r.gen_range(-amplitude..=amplitude))
        .collect();
    Tensor::new(video.shape(), data)
}

/// Hard mask at probability threshold 0.5 (ties go to cavity).
pub fn binarize(prob: &Tensor) -> Tensor {
    prob.map(|p| if p >= 0.5 { 1.0 } else { 0.0 })
}

/// Dice coefficient between two binary masks of identical shape; two empty
/// masks count as perfect agreement.
pub fn dice(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "dice",
            detail: format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        });
    }
    for t in [pred, truth] {
        if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("dice expects binary masks".into()));
        }
    }
    let inter: f64 = pred.data().iter().zip(truth.data()).map(|(&a, &b)| a * b).sum();
    let total = pred.sum() + truth.sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / total)
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    levels: usize,
    base_channels: usize,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

impl SegNet {
    /// Weights start from a fan-in-scaled uniform draw seeded per tensor;
    /// `base_channels << (levels - 1)` must equal [`BOTTLENECK_CHANNELS`].
    pub fn build(levels: usize, base_channels: usize, seed: u64) -> Result<Self> {
        check_arch(levels, base_channels)?;
        let params = layer_specs(levels, base_channels)
            .into_iter()
            .enumerate()
            .map(|(idx, (name, shape))| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                // Fan-in is input channels x kernel volume; transposed-conv
                // weights keep input channels first rather than second.
                let cin = if name.contains(".up.") { shape[0] } else { shape[1] };
                let fan_in = (cin * shape[2] * shape[3] * shape[4]) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let mut r = rng::stream(seed, "segnet-init", idx as u64);
                Tensor::uniform(&shape, -bound, bound, &mut r)
            })
            .collect();
        Ok(Self { levels, base_channels, params })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        layer_specs(self.levels, self.base_channels).into_iter().map(|(n, _)| n).collect()
    }

    /// Spatial downsampling factor between the input and the bottleneck.
    pub fn reduction_factor(&self) -> usize {
        1 << (self.levels - 1)
    }

    fn check_input(&self, video: &Tensor) -> Result<[usize; 3]> {
        let &[t, h, w] = video.shape() else {
            return Err(Error::ShapeMismatch {
                op: "segnet",
                detail: format!("expected a (T, H, W) video, got {:?}", video.shape()),
            });
        };
        let f = self.reduction_factor();
        for (axis, n) in [("T", t), ("H", h), ("W", w)] {
            if n == 0 || n % f != 0 {
                return Err(Error::InvalidArgument(format!(
                    "video {axis}={n} must be a positive multiple of {f} \
                     for a {}-level net",
                    self.levels
                )));
            }
        }
        Ok([t, h, w])
    }

    /// Build the full forward graph for a normalized `(T, H, W)` video.
    /// With `trainable` the parameters are registered as graph parameters so
    /// `backward` reaches them; otherwise they are plain leaves.
    pub fn forward(&self, video: &Tensor, trainable: bool) -> Result<Forward> {
        let [t, h, w] = self.check_input(video)?;
        let mut g = Graph::new();
        let param_ids: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.leaf(p.clone()) })
            .collect();
        let mut next = param_ids.iter().copied();
        let mut take2 = || {
            let w = next.next().expect("param list matches layer specs");
            let b = next.next().expect("param list matches layer specs");
            (w, b)
        };

        let input = g.leaf(video.reshape(&[1, t, h, w])?);
        let conv = Conv3dAttrs::same(3);
        let up_attrs = Conv3dAttrs { stride: [2, 2, 2], padding: [0, 0, 0] };

        let mut x = input;
        let mut skips = Vec::with_capacity(self.levels - 1);
        for l in 0..self.levels {
            for _ in 0..2 {
                let (wt, bias) = take2();
                x = g.conv3d(x, wt, Some(bias), conv)?;
                x = g.relu(x);
            }
            if l + 1 < self.levels {
                skips.push(x);
                x = g.maxpool3d(x, Pool3dAttrs::cube(2))?;
            }
        }
        let bottleneck = x;

        for l in (0..self.levels - 1).rev() {
            let (wu, bu) = take2();
            x = g.transposed_conv3d(x, wu, Some(bu), up_attrs)?;
            x = g.concat(&[x, skips[l]], 0)?;
            for _ in 0..2 {
                let (wt, bias) = take2();
                x = g.conv3d(x, wt, Some(bias), conv)?;
                x = g.relu(x);
            }
        }

        let (wh, bh) = take2();
        let logits = g.conv3d(x, wh, Some(bh), Conv3dAttrs::same(1))?;
        let prob = g.sigmoid(logits);
        Ok(Forward { graph: g, param_ids, bottleneck, logits, prob })
    }

    /// Convex mix `lambda * (1 - soft-Dice) + (1 - lambda) * mean voxel BCE`.
    fn loss_node(g: &mut Graph, fwd_logits: NodeId, fwd_prob: NodeId, mask: NodeId, lambda_dice: f64) -> Result<NodeId> {
        const EPS: f64 = 1e-6;
        let bce = g.bce_with_logits(fwd_logits, mask)?;
        let bce = g.reduce_mean(bce);
        let bce = g.scale(bce, 1.0 - lambda_dice);
        let inter = g.mul(fwd_prob, mask)?;
        let inter = g.reduce_sum(inter);
        let num = g.scale(inter, 2.0);
        let num = g.add_scalar(num, EPS);
        let p_sum = g.reduce_sum(fwd_prob);
        let t_sum = g.reduce_sum(mask);
        let den = g.add(p_sum, t_sum)?;
        let den = g.add_scalar(den, EPS);
        let overlap = g.div(num, den)?;
        let dice_loss = g.scale(overlap, -1.0);
        let dice_loss = g.add_scalar(dice_loss, 1.0);
        let dice_loss = g.scale(dice_loss, lambda_dice);
        g.add(bce, dice_loss)
    }

    /// Train on `(video, mask)` pairs; masks are `(T, H, W)` in {0, 1}.
    /// Videos are normalized internally. Returns the mean per-case loss of
    /// each epoch; a non-finite loss aborts with [`Error::Diverged`].
    pub fn train(&mut self, videos: &[Tensor], masks: &[Tensor], cfg: &TrainConfig) -> Result<Vec<f64>> {
        cfg.validate()?;
        if videos.is_empty() || videos.len() != masks.len() {
            return Err(Error::InvalidArgument(format!(
                "need matching non-empty video/mask lists, got {} and {}",
                videos.len(),
                masks.len()
            )));
        }
        let mut inputs = Vec::with_capacity(videos.len());
        for (video, mask) in videos.iter().zip(masks) {
            let [t, h, w] = self.check_input(video)?;
            if mask.shape() != video.shape() {
                return Err(Error::ShapeMismatch {
                    op: "segnet train",
                    detail: format!("mask {:?} vs video {:?}", mask.shape(), video.shape()),
                });
            }
            if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument("training masks must be binary".into()));
            }
            inputs.push((normalize(video)?, mask.reshape(&[1, t, h, w])?));
        }

        let mut adam = AdamState::with_defaults(&self.params);
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let lr = lr_schedule(epoch, cfg.lr0, cfg.lr_decay);
            let mut order: Vec<usize> = (0..inputs.len()).collect();
            let mut r = rng::stream(cfg.seed, "segnet-epoch", epoch as u64);
            order.shuffle(&mut r);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let mut grads: Vec<Tensor> =
                    self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                let mut batch_loss = 0.0;
                for &i in batch {
                    let (video, mask) = &inputs[i];
                    let noise_seed =
                        rng::derive_seed(cfg.seed, "segnet-augment", (epoch * inputs.len() + i) as u64);
                    let video = augment(video, cfg.augment, noise_seed)?;
                    let mut fwd = self.forward(&video, true)?;
                    let mask_id = fwd.graph.leaf(mask.clone());
                    let loss =
                        Self::loss_node(&mut fwd.graph, fwd.logits, fwd.prob, mask_id, cfg.lambda_dice)?;
                    let loss_value = fwd.graph.value(loss).data()[0];
                    if !loss_value.is_finite() {
                        return Err(Error::Diverged { epoch });
                    }
                    batch_loss += loss_value;
                    let mut case_grads = fwd.graph.backward(loss)?;
                    for (acc, &id) in grads.iter_mut().zip(&fwd.param_ids) {
                        let g = case_grads
                            .take(id)
                            .expect("every parameter reaches the training loss");
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                }
                let inv = 1.0 / batch.len() as f64;
                for g in &mut grads {
                    for v in g.data_mut() {
                        *v *= inv;
                    }
                }
                adam.step(&mut self.params, &grads, lr)?;
                epoch_loss += batch_loss;
            }
            history.push(epoch_loss / inputs.len() as f64);
        }
        Ok(history)
    }

    /// Per-voxel cavity probability `(T, H, W)`, every value in [0, 1].
    /// Threshold with [`binarize`] for a hard mask.
    pub fn segment(&self, video: &Tensor) -> Result<Tensor> {
        let fwd = self.forward(&inference_normalize(video)?, false)?;
        fwd.graph.value(fwd.prob).reshape(video.shape())
    }

    /// Bottleneck activation `(32, T', H', W')` for a raw video.
    pub fn extract_bottleneck(&self, video: &Tensor) -> Result<Tensor> {
        let fwd = self.forward(&inference_normalize(video)?, false)?;
        Ok(fwd.graph.value(fwd.bottleneck).clone())
    }

    /// Overwrite the parameter tensors; shapes must match the architecture.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        let specs = layer_specs(self.levels, self.base_channels);
        if params.len() != specs.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (p, (name, shape)) in params.iter().zip(&specs) {
            if p.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "segnet set_params",
                    detail: format!("{name} expects {shape:?}, got {:?}", p.shape()),
                });
            }
        }
        self.params = params;
        Ok(())
    }

    /// Write a JSON manifest plus one LTSR file per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let names = self.param_names();
        let mut entries = Vec::with_capacity(names.len());
        for (idx, (name, tensor)) in names.iter().zip(&self.params).enumerate() {
            let file = format!("p{idx:03}.ltsr");
            io::write_tensor(&dir.join(&file), tensor)?;
            entries.push(ParamEntry {
                name: name.clone(),
                file,
                shape: tensor.shape().to_vec(),
            });
        }
        let manifest = CheckpointManifest {
            levels: self.levels,
            base_channels: self.base_channels,
            params: entries,
        };
        io::write_json(&dir.join("segnet.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = io::read_json(&dir.join("segnet.json"))?;
        check_arch(manifest.levels, manifest.base_channels)?;
        let specs = layer_specs(manifest.levels, manifest.base_channels);
        if manifest.params.len() != specs.len() {
            return Err(Error::format(
                dir.join("segnet.json"),
                format!("expected {} parameters, manifest lists {}", specs.len(), manifest.params.len()),
            ));
        }
        let mut params = Vec::with_capacity(specs.len());
        for (entry, (name, shape)) in manifest.params.iter().zip(&specs) {
            if &entry.name != name || &entry.shape != shape {
                return Err(Error::format(
                    dir.join("segnet.json"),
                    format!(
                        "parameter {} should be {name} {shape:?}, manifest has {} {:?}",
                        params.len(),
                        entry.name,
                        entry.shape
                    ),
                ));
            }
            let tensor: Tensor = io::read_tensor(&dir.join(&entry.file))?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::format(
                    dir.join(&entry.file),
                    format!("tensor shape {:?} does not match manifest {shape:?}", tensor.shape()),
                ));
            }
            params.push(tensor);
        }
        Ok(Self { levels: manifest.levels, base_channels: manifest.base_channels, params })
    }
}
