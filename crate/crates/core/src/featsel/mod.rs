//! Selection of diagnostic features from the 32 bottleneck kernels.
//!
//! Two strategies over the same latent space:
//!
//! * FSR — rank kernels by their GradCAM weights (mean gradient of the
//!   summed cavity probability w.r.t. each kernel map), take each case's
//!   top five, keep the three kernels that appear most often across the
//!   training cases, and feed every coordinate of those kernels onward.
//! * FSL — flatten the (optionally temporally pooled) latent grid and let a
//!   LASSO path pick individual coordinates, keeping the penalty whose
//!   support fraction lands closest to the requested budget.

pub mod lasso;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::{normalize, Forward, SegNet, BOTTLENECK_CHANNELS};
use crate::{Elem, Tensor};

/// Cases vote with this many of their highest-weighted kernels.
pub const FSR_TOP_PER_CASE: usize = 5;
/// Kernels kept after frequency ranking.
pub const FSR_KEEP: usize = 3;

/// Denominator of the GradCAM weight average.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    /// Number of spatial positions per kernel map.
    SpatialCount,
    /// Number of kernels (a constant, so rankings cannot change).
    KernelCount,
}

/// How the `(32, T', H', W')` latent grid is flattened into a feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Keep every voxel.
    None,
    /// Average over the temporal axis first.
    TemporalMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Fsr,
    Fsl,
    /// Pass-through: every pooled coordinate survives.
    None,
}

/// A fitted feature selection: which pooled coordinates survive, and the
/// bookkeeping needed to apply it to unseen cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub method: SelectionMethod,
    pub pooling: Pooling,
    /// Pooled per-case feature grid, e.g. `[32, 8, 8]` under temporal mean.
    pub feature_shape: Vec<usize>,
    /// Distinct kernels contributing at least one kept coordinate, sorted.
    pub kernels: Vec<usize>,
    /// Kept flat indices into the pooled feature vector, sorted.
    pub features: Vec<usize>,
    /// FSL's chosen LASSO penalty; absent for FSR and pass-through.
    pub alpha: Option<f64>,
    pub total_features: usize,
    /// `1 - kept / total`.
    pub reduction: f64,
}

impl Selection {
    /// The identity selection over a pooled feature grid.
    pub fn keep_all(feature_shape: &[usize], pooling: Pooling) -> Self {
        let total: usize = feature_shape.iter().product();
        Self {
            method: SelectionMethod::None,
            pooling,
            feature_shape: feature_shape.to_vec(),
            kernels: (0..feature_shape.first().copied().unwrap_or(0)).collect(),
            features: (0..total).collect(),
            alpha: None,
            total_features: total,
            reduction: 0.0,
        }
    }

    /// Gather the kept coordinates from one case's flattened features.
    pub fn apply(&self, flat: &[Elem]) -> Result<Vec<Elem>> {
        if flat.len() != self.total_features {
            return Err(Error::ShapeMismatch {
                op: "selection",
                detail: format!("case has {} features, selection expects {}", flat.len(), self.total_features),
            });
        }
        Ok(self.features.iter().map(|&i| flat[i]).collect())
    }
}

/// Eq. 1 kernel weights: backward of the summed cavity probability, averaged
/// over each bottleneck kernel's spatial grid. Needs a forward pass that was
/// built trainable so the interior gradient exists.
pub fn kernel_weights(fwd: &mut Forward, norm: Normalization) -> Result<Vec<Elem>> {
    let y = fwd.graph.reduce_sum(fwd.prob);
    let grads = fwd.graph.backward(y)?;
    let g = grads.get(fwd.bottleneck).ok_or_else(|| {
        Error::InvalidArgument("bottleneck received no gradient; was the forward pass trainable?".into())
    })?;
    let &[c, t, h, w] = g.shape() else {
        return Err(Error::ShapeMismatch {
            op: "kernel_weights",
            detail: format!("bottleneck gradient has shape {:?}", g.shape()),
        });
    };
    let spatial = t * h * w;
    let denom = match norm {
        Normalization::SpatialCount => spatial as Elem,
        Normalization::KernelCount => c as Elem,
    };
    Ok((0..c)
        .map(|k| g.data()[k * spatial..(k + 1) * spatial].iter().sum::<Elem>() / denom)
        .collect())
}

/// Eq. 2 activation map: `relu(sum_k alpha_k F_k)` on the latent grid.
pub fn gradcam_map(feature: &Tensor, alphas: &[Elem]) -> Result<Tensor> {
    let &[c, t, h, w] = feature.shape() else {
        return Err(Error::ShapeMismatch {
            op: "gradcam_map",
            detail: format!("expected (C, T, H, W) features, got {:?}", feature.shape()),
        });
    };
    if alphas.len() != c {
        return Err(Error::ShapeMismatch {
            op: "gradcam_map",
            detail: format!("{} weights for {} kernels", alphas.len(), c),
        });
    }
    let spatial = t * h * w;
    let mut out = vec![0.0; spatial];
    for (k, &a) in alphas.iter().enumerate() {
        let block = &feature.data()[k * spatial..(k + 1) * spatial];
        for (o, &f) in out.iter_mut().zip(block) {
            *o += a * f;
        }
    }
    for v in &mut out {
        *v = v.max(0.0);
    }
    Tensor::new(&[t, h, w], out)
}

/// Nearest-neighbor upsampling of a `(t, h, w)` map onto a coarser-or-equal
/// aligned grid, for rendering heatmaps at video resolution.
pub fn upsample_nearest(map: &Tensor, shape: &[usize; 3]) -> Result<Tensor> {
    let &[t, h, w] = map.shape() else {
        return Err(Error::ShapeMismatch {
            op: "upsample",
            detail: format!("expected a rank-3 map, got {:?}", map.shape()),
        });
    };
    let &[t2, h2, w2] = shape;
    if t2 < t || h2 < h || w2 < w || t2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot upsample {:?} to {:?}",
            map.shape(),
            shape
        )));
    }
    let mut out = Vec::with_capacity(t2 * h2 * w2);
    for ot in 0..t2 {
        let st = ot * t / t2;
        for oh in 0..h2 {
            let sh = oh * h / h2;
            for ow in 0..w2 {
                let sw = ow * w / w2;
                out.push(map.data()[(st * h + sh) * w + sw]);
            }
        }
    }
    Tensor::new(&[t2, h2, w2], out)
}

/// Indices of the `k` largest weights, descending, lower index on ties.
pub fn top_kernels(alphas: &[Elem], k: usize) -> Result<Vec<usize>> {
    if alphas.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel weights must be finite".into()));
    }
    if k > alphas.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot take top {k} of {} kernels",
            alphas.len()
        )));
    }
    let mut order: Vec<usize> = (0..alphas.len()).collect();
    order.sort_by(|&a, &b| alphas[b].total_cmp(&alphas[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Frequency ranking across per-case top lists: most votes first, lower
/// kernel index on ties, `keep` winners returned sorted by index.
pub fn rank_by_frequency(votes: &[Vec<usize>], kernel_count: usize, keep: usize) -> Result<Vec<usize>> {
    if keep > kernel_count {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {keep} of {kernel_count} kernels"
        )));
    }
    let mut counts = vec![0usize; kernel_count];
    for case in votes {
        for &k in case {
            let slot = counts.get_mut(k).ok_or_else(|| {
                Error::InvalidArgument(format!("kernel index {k} out of range {kernel_count}"))
            })?;
            *slot += 1;
        }
    }
    let mut order: Vec<usize> = (0..kernel_count).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Pooled feature-grid shape for a `(32, T', H', W')` bottleneck.
pub fn pooled_shape(latent: &[usize], pooling: Pooling) -> Result<Vec<usize>> {
    let &[c, t, h, w] = latent else {
        return Err(Error::ShapeMismatch {
            op: "flatten_features",
            detail: format!("expected (C, T, H, W) features, got {latent:?}"),
        });
    };
    Ok(match pooling {
        Pooling::None => vec![c, t, h, w],
        Pooling::TemporalMean => vec![c, h, w],
    })
}

/// Flatten one case's latent grid kernel-major; each kernel owns a
/// contiguous block of the result.
pub fn flatten_features(feature: &Tensor, pooling: Pooling) -> Result<Vec<Elem>> {
    let shape = pooled_shape(feature.shape(), pooling)?;
    let &[c, t, h, w] = feature.shape() else { unreachable!() };
    match pooling {
        Pooling::None => Ok(feature.data().to_vec()),
        Pooling::TemporalMean => {
            let spatial = h * w;
            let mut out = vec![0.0; shape.iter().product()];
            for k in 0..c {
                for ti in 0..t {
                    let src = &feature.data()[(k * t + ti) * spatial..(k * t + ti + 1) * spatial];
                    let dst = &mut out[k * spatial..(k + 1) * spatial];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
            let inv = 1.0 / t as Elem;
            for v in &mut out {
                *v *= inv;
            }
            Ok(out)
        }
    }
}

/// Flat-index block owned by `kernel` in a pooled feature vector.
pub fn kernel_columns(feature_shape: &[usize], kernel: usize) -> Result<std::ops::Range<usize>> {
    let (&c, rest) = feature_shape.split_first().ok_or_else(|| {
        Error::InvalidArgument("empty feature shape".into())
    })?;
    if kernel >= c {
        return Err(Error::InvalidArgument(format!("kernel {kernel} out of range {c}")));
    }
    let per: usize = rest.iter().product();
    Ok(kernel * per..(kernel + 1) * per)
}

/// Pooled bottleneck features for a batch of cases: one flattened row per
/// case plus the shared pooled grid shape.
pub fn latent_features(net: &SegNet, videos: &[Tensor], pooling: Pooling) -> Result<(Vec<Vec<Elem>>, Vec<usize>)> {
    if videos.is_empty() {
        return Err(Error::InvalidArgument("feature selection needs at least one case".into()));
    }
    let mut rows = Vec::with_capacity(videos.len());
    let mut shape = Vec::new();
    for video in videos {
        let latent = net.extract_bottleneck(video)?;
        let this_shape = pooled_shape(latent.shape(), pooling)?;
        if shape.is_empty() {
            shape = this_shape;
        } else if shape != this_shape {
            return Err(Error::ShapeMismatch {
                op: "featsel",
                detail: format!("case feature grids differ: {shape:?} vs {this_shape:?}"),
            });
        }
        rows.push(flatten_features(&latent, pooling)?);
    }
    Ok((rows, shape))
}

/// GradCAM-ranked kernel selection from per-case weight vectors: each case
/// votes with its top five kernels, the three most frequent survive.
pub fn fsr_select(
    per_case_weights: &[Vec<Elem>],
    feature_shape: &[usize],
    pooling: Pooling,
) -> Result<Selection> {
    if per_case_weights.is_empty() {
        return Err(Error::InvalidArgument("feature selection needs at least one case".into()));
    }
    if feature_shape.first() != Some(&BOTTLENECK_CHANNELS) {
        return Err(Error::ShapeMismatch {
            op: "fsr_select",
            detail: format!("feature shape {feature_shape:?} does not lead with {BOTTLENECK_CHANNELS} kernels"),
        });
    }
    let mut votes = Vec::with_capacity(per_case_weights.len());
    for (i, alphas) in per_case_weights.iter().enumerate() {
        if alphas.len() != BOTTLENECK_CHANNELS {
            return Err(Error::InvalidArgument(format!(
                "case {i} has {} kernel weights, expected {BOTTLENECK_CHANNELS}",
                alphas.len()
            )));
        }
        votes.push(top_kernels(alphas, FSR_TOP_PER_CASE)?);
    }
    let kernels = rank_by_frequency(&votes, BOTTLENECK_CHANNELS, FSR_KEEP)?;
    let total: usize = feature_shape.iter().product();
    let mut features = Vec::new();
    for &k in &kernels {
        features.extend(kernel_columns(feature_shape, k)?);
    }
    Ok(Selection {
        method: SelectionMethod::Fsr,
        pooling,
        feature_shape: feature_shape.to_vec(),
        reduction: 1.0 - features.len() as f64 / total as f64,
        kernels,
        features,
        alpha: None,
        total_features: total,
    })
}

/// Run the net over training videos, compute Eq. 1 weights per case, and
/// apply [`fsr_select`].
pub fn fsr_select_net(net: &SegNet, videos: &[Tensor], pooling: Pooling) -> Result<Selection> {
    if videos.is_empty() {
        return Err(Error::InvalidArgument("feature selection needs at least one case".into()));
    }
    let mut weights = Vec::with_capacity(videos.len());
    let mut latent_shape = Vec::new();
    for video in videos {
        let mut fwd = net.forward(&normalize(video)?, true)?;
        weights.push(kernel_weights(&mut fwd, Normalization::SpatialCount)?);
        let shape = fwd.graph.value(fwd.bottleneck).shape().to_vec();
        if latent_shape.is_empty() {
            latent_shape = shape;
        } else if latent_shape != shape {
            return Err(Error::ShapeMismatch {
                op: "featsel",
                detail: format!("case latent grids differ: {latent_shape:?} vs {shape:?}"),
            });
        }
    }
    fsr_select(&weights, &pooled_shape(&latent_shape, pooling)?, pooling)
}

/// LASSO path over a feature matrix; keeps the penalty whose support-size
/// fraction lands closest to `target_keep` (earlier grid entry on ties).
/// The fits warm-start along the grid in the order given.
pub fn fsl_select(
    x: &Tensor,
    y: &[Elem],
    target_keep: f64,
    alpha_grid: &[f64],
    feature_shape: &[usize],
    pooling: Pooling,
) -> Result<Selection> {
    let &[n, p] = x.shape() else {
        return Err(Error::ShapeMismatch {
            op: "fsl_select",
            detail: format!("expected an n x p feature matrix, got {:?}", x.shape()),
        });
    };
    if y.len() != n {
        return Err(Error::InvalidArgument(format!("{n} cases but {} labels", y.len())));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument("fsl labels must be 0 or 1".into()));
    }
    if !(target_keep > 0.0 && target_keep < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target_keep {target_keep} outside (0, 1)"
        )));
    }
    if alpha_grid.is_empty() {
        return Err(Error::InvalidArgument("alpha grid is empty".into()));
    }
    if alpha_grid.iter().any(|a| !a.is_finite() || *a <= 0.0) {
        return Err(Error::InvalidArgument("alpha grid must be finite and positive".into()));
    }
    if feature_shape.iter().product::<usize>() != p {
        return Err(Error::ShapeMismatch {
            op: "fsl_select",
            detail: format!("feature shape {feature_shape:?} does not flatten to {p} columns"),
        });
    }

    let mut warm = vec![0.0; p];
    let mut best: Option<(f64, f64, Vec<usize>)> = None;
    for &alpha in alpha_grid {
        let fit = lasso::lasso_fit_from(x, y, alpha, 1e-7, 2000, &warm)?;
        warm.clone_from(&fit.beta_std);
        let support: Vec<usize> = (0..p).filter(|&j| fit.beta_std[j] != 0.0).collect();
        if support.is_empty() {
            continue;
        }
        let gap = (support.len() as f64 / p as f64 - target_keep).abs();
        if best.as_ref().is_none_or(|(g, _, _)| gap < *g) {
            best = Some((gap, alpha, support));
        }
    }
    let Some((_, alpha, features)) = best else {
        let lo = alpha_grid.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = alpha_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return Err(Error::InvalidArgument(format!(
            "every penalty in the grid [{lo:.6e}, {hi:.6e}] produced an empty support"
        )));
    };
    let per: usize = feature_shape[1..].iter().product();
    let mut kernels: Vec<usize> = features.iter().map(|&f| f / per.max(1)).collect();
    kernels.dedup();
    Ok(Selection {
        method: SelectionMethod::Fsl,
        pooling,
        feature_shape: feature_shape.to_vec(),
        reduction: 1.0 - features.len() as f64 / p as f64,
        kernels,
        features,
        alpha: Some(alpha),
        total_features: p,
    })
}

/// Extract latent features with the net, build a geometric penalty grid from
/// the data's null threshold, and apply [`fsl_select`].
pub fn fsl_select_net(
    net: &SegNet,
    videos: &[Tensor],
    labels: &[u8],
    pooling: Pooling,
    target_keep: f64,
) -> Result<Selection> {
    if videos.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} videos but {} labels",
            videos.len(),
            labels.len()
        )));
    }
    let (rows, feature_shape) = latent_features(net, videos, pooling)?;
    let (n, p) = (rows.len(), rows[0].len());
    let x = Tensor::new(&[n, p], rows.into_iter().flatten().collect())?;
    let y: Vec<Elem> = labels.iter().map(|&l| l as Elem).collect();
    let amax = lasso::alpha_max(&x, &y)?;
    if amax == 0.0 {
        return Err(Error::InvalidArgument(
            "features carry no signal about the labels (alpha_max is zero)".into(),
        ));
    }
    // Start just under the null threshold so the sparse end is non-empty.
    let grid = lasso::default_alpha_grid(amax * (1.0 - 1e-6), 25);
    fsl_select(&x, &y, target_keep, &grid, &feature_shape, pooling)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{self, PhantomConfig};
    use crate::rng;

    fn small_net_and_videos(n: usize) -> (SegNet, Vec<Tensor>, Vec<u8>) {
        let cfg = PhantomConfig {
            frames: 4,
            height: 16,
            width: 16,
            artifact_prob: 0.0,
            speckle: 0.05,
            master_seed: 31,
            ..PhantomConfig::default()
        };
        let net = SegNet::build(2, 16, 5).unwrap();
        let mut videos = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = (i % 2) as u8;
            let case = phantom::generate_case(&cfg, 600 + i as u64, label, "t").unwrap();
            videos.push(case.video);
            labels.push(label);
        }
        (net, videos, labels)
    }

    #[test]
    fn kernel_weights_normalization_cannot_reorder() {
        let (net, videos, _) = small_net_and_videos(1);
        let video = normalize(&videos[0]).unwrap();
        let mut fwd = net.forward(&video, true).unwrap();
        let spatial = kernel_weights(&mut fwd, Normalization::SpatialCount).unwrap();
        let mut fwd = net.forward(&video, true).unwrap();
        let kernel = kernel_weights(&mut fwd, Normalization::KernelCount).unwrap();
        assert_eq!(spatial.len(), 32);
        assert_eq!(kernel.len(), 32);
        let rank = |v: &[f64]| top_kernels(v, 32).unwrap();
        assert_eq!(rank(&spatial), rank(&kernel));
        // The two denominators differ by spatial/kernel count.
        let latent = fwd.graph.value(fwd.bottleneck).shape().to_vec();
        let ratio = (latent[1] * latent[2] * latent[3]) as f64 / 32.0;
        for (s, k) in spatial.iter().zip(&kernel) {
            assert!((s * ratio - k).abs() <= 1e-12 * k.abs().max(1.0));
        }
    }

    #[test]
    fn kernel_weights_requires_a_trainable_pass() {
        let (net, videos, _) = small_net_and_videos(1);
        let video = normalize(&videos[0]).unwrap();
        let mut fwd = net.forward(&video, false).unwrap();
        assert!(kernel_weights(&mut fwd, Normalization::SpatialCount).is_err());
    }

    #[test]
    fn gradcam_map_matches_hand_computation() {
        // Two kernels on a 1x1x2 grid.
        let feature = Tensor::new(&[2, 1, 1, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let map = gradcam_map(&feature, &[2.0, -1.0]).unwrap();
        // position 0: 2*1 - 1*3 = -1 -> relu 0; position 1: 2*(-2) - 1*0.5 = -4.5 -> 0
        assert_eq!(map.data(), &[0.0, 0.0]);
        let map = gradcam_map(&feature, &[1.0, 1.0]).unwrap();
        // position 0: 1+3 = 4; position 1: -2+0.5 = -1.5 -> 0
        assert_eq!(map.data(), &[4.0, 0.0]);
        assert_eq!(map.shape(), &[1, 1, 2]);
        assert!(gradcam_map(&feature, &[1.0]).is_err());
    }

    #[test]
    fn gradcam_map_is_nonnegative_on_random_inputs() {
        let mut r = rng::stream(2, "gradcam-test", 0);
        for _ in 0..200 {
            let feature = Tensor::uniform(&[4, 2, 3, 3], -1.0, 1.0, &mut r);
            let alphas: Vec<f64> =
                Tensor::uniform(&[4], -1.0, 1.0, &mut r).data().to_vec();
            let map = gradcam_map(&feature, &alphas).unwrap();
            assert!(map.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn upsampling_replicates_blocks() {
        let map = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample_nearest(&map, &[2, 4, 4]).unwrap();
        assert_eq!(up.shape(), &[2, 4, 4]);
        for t in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let expect = map.at(&[0, i / 2, j / 2]);
                    assert_eq!(up.at(&[t, i, j]), expect);
                }
            }
        }
        assert!(upsample_nearest(&map, &[1, 1, 4]).is_err());
    }

    #[test]
    fn top_kernels_breaks_ties_toward_lower_indices() {
        let alphas = vec![0.5, 0.9, 0.5, 0.1, 0.9];
        assert_eq!(top_kernels(&alphas, 3).unwrap(), vec![1, 4, 0]);
        assert_eq!(top_kernels(&alphas, 5).unwrap(), vec![1, 4, 0, 2, 3]);
        assert!(top_kernels(&alphas, 6).is_err());
        assert!(top_kernels(&[f64::NAN], 1).is_err());
    }

    #[test]
    fn frequency_ranking_reproduces_a_hand_count() {
        // Votes: kernel 2 appears 3x, kernel 0 and 5 twice, kernel 7 once,
        // kernels 1 and 3 once each. Ties at two votes resolve toward 0.
        let votes = vec![
            vec![2, 0, 5],
            vec![2, 5, 1],
            vec![2, 0, 3],
            vec![7],
        ];
        assert_eq!(rank_by_frequency(&votes, 8, 3).unwrap(), vec![0, 2, 5]);
        // keep=4: next tie group is {1, 3, 7} with one vote; kernel 1 wins.
        assert_eq!(rank_by_frequency(&votes, 8, 4).unwrap(), vec![0, 1, 2, 5]);
        assert!(rank_by_frequency(&votes, 8, 9).is_err());
        assert!(rank_by_frequency(&[vec![8]], 8, 1).is_err());
    }

    #[test]
    fn flattening_is_kernel_major_and_pools_time() {
        // (2 kernels, 2 frames, 1x2 spatial)
        let feature =
            Tensor::new(&[2, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]).unwrap();
        let flat = flatten_features(&feature, Pooling::None).unwrap();
        assert_eq!(flat, feature.data());
        let pooled = flatten_features(&feature, Pooling::TemporalMean).unwrap();
        assert_eq!(pooled, vec![2.0, 3.0, 20.0, 30.0]);
        assert_eq!(pooled_shape(&[2, 2, 1, 2], Pooling::TemporalMean).unwrap(), vec![2, 1, 2]);
        assert_eq!(kernel_columns(&[2, 1, 2], 1).unwrap(), 2..4);
        assert!(kernel_columns(&[2, 1, 2], 2).is_err());
    }

    #[test]
    fn fsr_keeps_three_kernels_and_is_deterministic() {
        let (net, videos, _) = small_net_and_videos(6);
        let sel = fsr_select_net(&net, &videos, Pooling::TemporalMean).unwrap();
        assert_eq!(sel.method, SelectionMethod::Fsr);
        assert_eq!(sel.kernels.len(), FSR_KEEP);
        assert!(sel.kernels.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sel.feature_shape, vec![32, 8, 8]);
        assert_eq!(sel.total_features, 32 * 64);
        assert_eq!(sel.features.len(), FSR_KEEP * 64);
        assert!((sel.reduction - (1.0 - 3.0 / 32.0)).abs() < 1e-12);
        // Every kept coordinate belongs to a kept kernel block.
        for &f in &sel.features {
            assert!(sel.kernels.contains(&(f / 64)));
        }
        let again = fsr_select_net(&net, &videos, Pooling::TemporalMean).unwrap();
        assert_eq!(sel, again);
    }

    #[test]
    fn fsr_resolves_a_constructed_frequency_table() {
        // Hand-built tally: kernel 2 gets 10 votes, kernel 7 gets 9, kernel
        // 11 gets 8, kernel 30 one deliberate stray; rotating fillers pad
        // every ballot to five votes without any filler exceeding 2.
        let mut filler = (12..32).cycle();
        let mut weights = Vec::new();
        for i in 0..10 {
            let mut w = vec![0.0; 32];
            w[2] = 1.0;
            let mut pad = 4;
            if i < 9 {
                w[7] = 0.9;
                pad -= 1;
            }
            if i < 8 {
                w[11] = 0.8;
                pad -= 1;
            }
            if i == 0 {
                w[30] = 0.7;
                pad -= 1;
            }
            for _ in 0..pad {
                let k = filler.next().unwrap();
                w[k] += 0.1 + k as f64 * 1e-3;
            }
            weights.push(w);
        }
        let sel = fsr_select(&weights, &[32, 2, 2], Pooling::TemporalMean).unwrap();
        assert_eq!(sel.kernels, vec![2, 7, 11]);
        assert_eq!(sel.features, vec![8, 9, 10, 11, 28, 29, 30, 31, 44, 45, 46, 47]);
        assert!((sel.reduction - (1.0 - 3.0 / 32.0)).abs() < 1e-12);
        assert!(fsr_select(&[vec![0.0; 31]], &[32, 2, 2], Pooling::None).is_err());
        assert!(fsr_select(&weights, &[16, 2, 2], Pooling::None).is_err());
        assert!(fsr_select(&[], &[32, 2, 2], Pooling::None).is_err());
    }

    #[test]
    fn fsl_finds_label_carrying_coordinates() {
        let (net, videos, labels) = small_net_and_videos(12);
        let sel = fsl_select_net(&net, &videos, &labels, Pooling::TemporalMean, 0.02).unwrap();
        assert_eq!(sel.method, SelectionMethod::Fsl);
        assert!(!sel.features.is_empty());
        assert!(sel.features.len() <= videos.len(), "lasso support exceeds sample count");
        assert!(sel.reduction > 0.9);
        assert!(sel.features.windows(2).all(|w| w[0] < w[1]));
        // Kernels list is the distinct sorted block owners.
        let per = sel.feature_shape[1..].iter().product::<usize>();
        let mut owners: Vec<usize> = sel.features.iter().map(|&f| f / per).collect();
        owners.dedup();
        assert_eq!(sel.kernels, owners);
        // Deterministic and serializable.
        let again = fsl_select_net(&net, &videos, &labels, Pooling::TemporalMean, 0.02).unwrap();
        assert_eq!(sel, again);
        let text = serde_json::to_string(&sel).unwrap();
        let back: Selection = serde_json::from_str(&text).unwrap();
        assert_eq!(back, sel);
    }

    /// 40 cases x 320 features, a handful of label-carrying columns, target
    /// 10%: the chosen support beats every cold refit's gap to 32 features.
    #[test]
    fn fsl_targets_ten_percent_of_320_features() {
        let n = 40;
        let p = 320;
        let mut r = rng::stream(8, "fsl-320", 0);
        let x = Tensor::uniform(&[n, p], -1.0, 1.0, &mut r);
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let row = &x.data()[i * p..(i + 1) * p];
                let score = row[3] + row[17] - row[200] + 0.4 * row[250] - 0.2 * row[90];
                if score > 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let amax = lasso::alpha_max(&x, &y).unwrap();
        let grid = lasso::default_alpha_grid(amax * (1.0 - 1e-6), 30);
        let sel = fsl_select(&x, &y, 0.10, &grid, &[32, 10], Pooling::TemporalMean).unwrap();
        let chosen_gap = (sel.features.len() as f64 / p as f64 - 0.10).abs();
        for &alpha in &grid {
            let fit = lasso::lasso_fit(&x, &y, alpha, 1e-9, 20_000).unwrap();
            let count = fit.beta_std.iter().filter(|&&b| b != 0.0).count();
            if count == 0 {
                continue;
            }
            let gap = (count as f64 / p as f64 - 0.10).abs();
            assert!(
                chosen_gap <= gap + 1e-12,
                "alpha {alpha}: support {count} has gap {gap:.4} < chosen {chosen_gap:.4}"
            );
        }
        let count = sel.features.len() as i64;
        assert!((count - 32).abs() <= 12, "selected {count} of 320 features");
    }

    #[test]
    fn fsl_support_is_monotone_along_an_ascending_grid() {
        let n = 60;
        let p = 20;
        let mut r = rng::stream(4, "fsl-mono", 0);
        let x = Tensor::uniform(&[n, p], -1.0, 1.0, &mut r);
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let row = &x.data()[i * p..(i + 1) * p];
                if row[1] - row[7] + 0.5 * row[15] > 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let amax = lasso::alpha_max(&x, &y).unwrap();
        let ascending: Vec<f64> =
            (0..20).map(|i| amax * 1e-3 * (1e3f64).powf(i as f64 / 19.0)).collect();
        let mut last = usize::MAX;
        for &alpha in &ascending {
            let fit = lasso::lasso_fit(&x, &y, alpha, 1e-9, 20_000).unwrap();
            assert!(fit.converged);
            let count = fit.beta_std.iter().filter(|&&b| b != 0.0).count();
            assert!(
                count <= last,
                "support grew from {last} to {count} when alpha rose to {alpha}"
            );
            last = count;
        }
        assert_eq!(last, 0, "the null threshold should empty the support");
    }

    #[test]
    fn fsl_rejects_grids_that_only_produce_empty_supports() {
        let n = 10;
        let p = 6;
        let mut r = rng::stream(6, "fsl-empty", 0);
        let x = Tensor::uniform(&[n, p], -1.0, 1.0, &mut r);
        let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let amax = lasso::alpha_max(&x, &y).unwrap();
        let err = fsl_select(&x, &y, 0.5, &[amax, amax * 2.0], &[6], Pooling::None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("empty support"), "unexpected message: {msg}");
        assert!(msg.contains(&format!("{amax:.6e}")), "bounds missing from: {msg}");
        // Degenerate arguments.
        assert!(fsl_select(&x, &y, 0.0, &[amax], &[6], Pooling::None).is_err());
        assert!(fsl_select(&x, &y, 1.0, &[amax], &[6], Pooling::None).is_err());
        assert!(fsl_select(&x, &y, 0.5, &[], &[6], Pooling::None).is_err());
        assert!(fsl_select(&x, &y, 0.5, &[-1.0], &[6], Pooling::None).is_err());
        assert!(fsl_select(&x, &y, 0.5, &[amax], &[7], Pooling::None).is_err());
        let bad_labels = vec![0.5; n];
        assert!(fsl_select(&x, &bad_labels, 0.5, &[amax], &[6], Pooling::None).is_err());
    }

    #[test]
    fn keep_all_selection_is_the_identity() {
        let sel = Selection::keep_all(&[32, 4, 4], Pooling::TemporalMean);
        assert_eq!(sel.method, SelectionMethod::None);
        assert_eq!(sel.total_features, 512);
        assert_eq!(sel.features.len(), 512);
        assert_eq!(sel.kernels.len(), 32);
        assert_eq!(sel.reduction, 0.0);
        let flat: Vec<f64> = (0..512).map(|i| i as f64).collect();
        assert_eq!(sel.apply(&flat).unwrap(), flat);
    }

    #[test]
    fn selection_apply_gathers_and_validates() {
        let sel = Selection {
            method: SelectionMethod::Fsr,
            pooling: Pooling::None,
            feature_shape: vec![2, 1, 1, 2],
            kernels: vec![1],
            features: vec![2, 3],
            alpha: None,
            total_features: 4,
            reduction: 0.5,
        };
        assert_eq!(sel.apply(&[9.0, 8.0, 7.0, 6.0]).unwrap(), vec![7.0, 6.0]);
        assert!(sel.apply(&[1.0, 2.0]).is_err());
    }
}
