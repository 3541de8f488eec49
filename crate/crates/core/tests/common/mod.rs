//! Shared helpers for integration tests: the finite-difference gradient
//! checker and its randomized op-instance generator.

#![allow(dead_code)]

use lvdx_core::autodiff::{Conv3dAttrs, NodeId, Pool3dAttrs};
use lvdx_core::{Graph, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>;

/// One gradient-check instance: differentiable inputs plus a closure that
/// rebuilds the graph from them and returns a scalar root.
pub struct CheckCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

/// Number of distinct op-kind templates below.
pub const KIND_COUNT: usize = 20;

/// Scaled gradient error for a case: max over all input elements of
/// `|analytic - fd| / max(1, |analytic|, |fd|)` with centered differences.
pub fn max_scaled_err(case: &CheckCase, h: f64) -> f64 {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.param(t.clone())).collect();
        let root = (case.build)(&mut g, &ids);
        g.value(root).data()[0]
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = (case.build)(&mut g, &ids);
    assert_eq!(g.value(root).numel(), 1, "{}: root must be scalar", case.name);
    let grads = g.backward(root).unwrap();

    let mut worst = 0.0f64;
    for (i, input) in case.inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[i])
            .unwrap_or_else(|| panic!("{}: missing gradient for input {}", case.name, i));
        for j in 0..input.numel() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Uniform draw excluding a band around zero, for ops with kinks or poles.
fn rand_tensor_off_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, -1.0, 1.0, rng);
    for v in t.data_mut() {
        *v += if *v >= 0.0 { margin } else { -margin };
    }
    t
}

/// Appends `reduce_sum(out * probe)` so non-scalar outputs get a scalar root
/// with non-uniform upstream gradient.
fn probed_root(g: &mut Graph, out: NodeId, probe: Tensor) -> NodeId {
    let p = g.leaf(probe);
    let prod = g.mul(out, p).unwrap();
    g.reduce_sum(prod)
}

/// Deterministic case for `index`; kinds cycle so a run of `KIND_COUNT * k`
/// indices covers every op kind k times at different shapes.
pub fn gradcheck_case(index: usize) -> CheckCase {
    let mut rng = ChaCha8Rng::seed_from_u64(lvdx_core::rng::derive_seed(900, "gradcheck", index as u64));
    let kind = index % KIND_COUNT;
    match kind {
        0 => {
            let (ci, co) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let k = [rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)];
            let attrs = Conv3dAttrs {
                stride: [rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3)],
                padding: [rng.gen_range(0..2), rng.gen_range(0..2), rng.gen_range(0..2)],
            };
            let dims = [
                rng.gen_range(k[0]..k[0] + 3),
                rng.gen_range(k[1]..k[1] + 3),
                rng.gen_range(k[2]..k[2] + 3),
            ];
            let input = rand_tensor(&[ci, dims[0], dims[1], dims[2]], -1.0, 1.0, &mut rng);
            let weight = rand_tensor(&[co, ci, k[0], k[1], k[2]], -1.0, 1.0, &mut rng);
            let bias = rand_tensor(&[co], -0.5, 0.5, &mut rng);
            let probe_rng = rng.clone();
            CheckCase {
                name: format!("conv3d[{}]", index),
                inputs: vec![input, weight, bias],
                build: Box::new(move |g, ids| {
                    let out = g.conv3d(ids[0], ids[1], Some(ids[2]), attrs).unwrap();
                    let probe =
                        rand_tensor(&g.value(out).shape().to_vec(), -1.0, 1.0, &mut probe_rng.clone());
                    probed_root(g, out, probe)
                }),
            }
        }
        1 => {
            let (ci, co) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let k = [rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3)];
            let attrs = Conv3dAttrs {
                stride: [rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3)],
                padding: [0, 0, 0],
            };
            let input = rand_tensor(
                &[ci, rng.gen_range(2..4), rng.gen_range(2..4), rng.gen_range(2..4)],
                -1.0,
                1.0,
                &mut rng,
            );
            let weight = rand_tensor(&[ci, co, k[0], k[1], k[2]], -1.0, 1.0, &mut rng);
            let bias = rand_tensor(&[co], -0.5, 0.5, &mut rng);
            let probe_rng = rng.clone();
            CheckCase {
                name: format!("transposed_conv3d[{}]", index),
                inputs: vec![input, weight, bias],
                build: Box::new(move |g, ids| {
                    let out = g.transposed_conv3d(ids[0], ids[1], Some(ids[2]), attrs).unwrap();
                    let probe =
                        rand_tensor(&g.value(out).shape().to_vec(), -1.0, 1.0, &mut probe_rng.clone());
                    probed_root(g, out, probe)
                }),
            }
        }
        2 => {
            let c = rng.gen_range(1..3);
            let dims = [rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(2..6)];
            let attrs = Pool3dAttrs {
                kernel: [
                    rng.gen_range(1..=dims[0].min(3)),
                    rng.gen_range(1..=dims[1].min(3)),
                    rng.gen_range(1..=dims[2].min(3)),
                ],
                stride: [1, 1, 1],
            };
            let attrs = Pool3dAttrs { stride: attrs.kernel, ..attrs };
            let input = rand_tensor(&[c, dims[0], dims[1], dims[2]], -1.0, 1.0, &mut rng);
            let probe_rng = rng.clone();
            CheckCase {
                name: format!("maxpool3d[{}]", index),
                inputs: vec![input],
                build: Box::new(move |g, ids| {
                    let out = g.maxpool3d(ids[0], attrs).unwrap();
                    let probe =
                        rand_tensor(&g.value(out).shape().to_vec(), -1.0, 1.0, &mut probe_rng.clone());
                    probed_root(g, out, probe)
                }),
            }
        }
        3 => {
            let (n, p, m) = (rng.gen_range(1..4), rng.gen_range(2..6), rng.gen_range(1..4));
            let x = rand_tensor(&[n, p], -1.0, 1.0, &mut rng);
            let w = rand_tensor(&[p, m], -1.0, 1.0, &mut rng);
            let b = rand_tensor(&[m], -0.5, 0.5, &mut rng);
            let probe = rand_tensor(&[n, m], -1.0, 1.0, &mut rng);
            CheckCase {
                name: format!("dense[{}]", index),
                inputs: vec![x, w, b],
                build: Box::new(move |g, ids| {
                    let out = g.dense(ids[0], ids[1], Some(ids[2])).unwrap();
                    probed_root(g, out, probe.clone())
                }),
            }
        }
        4 => {
            let shape = [rng.gen_range(2..4), rng.gen_range(2..5)];
            let input = rand_tensor_off_zero(&shape, 0.05, &mut rng);
            let probe = rand_tensor(&shape, -1.0, 1.0, &mut rng);
            CheckCase {
                name: format!("relu[{}]", index),
                inputs: vec![input],
                build: Box::new(move |g, ids| {
                    let out = g.relu(ids[0]);
                    probed_root(g, out, probe.clone())
                }),
            }
        }
        5 => {
            let shape = [rng.gen_range(2..4), rng.gen_range(2..5)];
            let input = rand_tensor(&shape, -3.0, 3.0, &mut rng);
            let probe = rand_tensor(&shape, -1.0, 1.0, &mut rng);
            CheckCase {
                name: format!("sigmoid[{}]", index),
                inputs: vec![input],
                build: Box::new(move |g, ids| {
                    let out = g.sigmoid(ids[0]);
                    probed_root(g, out, probe.clone())
                }),
            }
        }
        6 => {
            let shape = [rng.gen_range(2..4), rng.gen_range(2..4)];
            let input = rand_tensor(&shape, -2.0, 2.0, &mut rng);
            let probe = rand_tensor(&shape, -1.0, 1.0, &mut rng);
            CheckCase {
                name: format!("softmax_axis1[{}]", index),
                inputs: vec![input],
                build: Box::new(move |g, ids| {
                    let out = g.softmax(ids[0], 1).unwrap();
                    probed_root(g, out, probe.clone())
                }),
            }
        }
        7 => {
            let shape = [rng.gen_range(2..4), rng.gen_range(1..3), rng.gen_range(2..4), rng.gen_range(2..4)];
            let input = rand_tensor(&shape, -2.0, 2.0, &mut rng);
            let probe = rand_tensor(&shape, -1.0, 1.0, &mut rng);
            CheckCase {
                name: format!("softmax_axis0[{}]", index),
                inputs: vec![input],
                build: Box::new(move |g, ids| {
                    let out = g.softmax(ids[0], 0).unwrap();
                    probed_root(g, out, probe.clone())
                }),
            }
        }
        8 => {
            let shape = [rng.gen_range(3..6), rng.gen_range(3..6)];
            let input = rand_tensor(&shape, -1.0, 1.0, &mut rng);
            let probe = rand_tensor(&shape, -1.0, 1.0, &mut rng);
            let mask_seed: u64 = rng.gen();
            CheckCase {
                name: format!("dropout[{}]", index),
                inputs: vec![input],
                build: Box::new(move |g, ids| {
                    // Same seed every rebuild: the mask is part of the
                    // function being differentiated.
                    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                    let out = g.dropout(ids[0], 0.4, Some(&mut mask_rng)).unwrap();
                    probed_root(g, out, probe.clone())
                }),
            }
        }
        9 => {
            let base = [0, rng.gen_range(1..3), rng.gen_range(2..4), rng.gen_range(2..4)];
            let e: Vec<usize> = (0..3).map(|_| rng.gen_range(1..3)).collect();
            let inputs: Vec<Tensor> = e
                .iter()
                .map(|&c| rand_tensor(&[c, base[1], base[2], base[3]], -1.0, 1.0, &mut rng))
                .collect();
            let total: usize = e.iter().sum();
            let probe = rand_tensor(&[total, base[1], base[2], base[3]], -1.0, 1.0, &mut rng);
            CheckCase {
                name: format!("concat[{}]", index),
                inputs,
                build: Box::new(move |g, ids| {
                    let out = g.concat(ids, 0).unwrap();
                    probed_root(g, out, probe.clone())
                }),
            }
        }
        10 | 11 | 12 => {
            let shape = [rng.gen_range(2..4), rng.gen_range(2..5)];
            let a = rand_tensor(&shape, -1.0, 1.0, &mut rng);
            let b = rand_tensor(&shape, -1.0, 1.0, &mut rng);
            let probe = rand_tensor(&shape, -1.0, 1.0, &mut rng);
            let which = ["add", "sub", "mul"][kind - 10];
            CheckCase {
                name: format!("{}[{}]", which, index),
                inputs: vec![a, b],
                build: Box::new(move |g, ids| {
                    let out = match which {
                        "add" => g.add(ids[0], ids[1]),
                        "sub" => g.sub(ids[0], ids[1]),
                        _ => g.mul(ids[0], ids[1]),
                    }
                    .unwrap();
                    probed_root(g, out, probe.clone())
                }),
            }
        }
        13 => {
            let shape = [rng.gen_range(2..4), rng.gen_range(2..5)];
            let a = rand_tensor(&shape, -1.0, 1.0, &mut rng);
            let b = rand_tensor_off_zero(&shape, 0.3, &mut rng);
            let probe = rand_tensor(&shape, -1.0, 1.0, &mut rng);
            CheckCase {
                name: format!("div[{}]", index),
                inputs: vec![a, b],
                build: Box::new(move |g, ids| {
                    let out = g.div(ids[0], ids[1]).unwrap();
                    probed_root(g, out, probe.clone())
                }),
            }
        }
        14 => {
            let shape = [rng.gen_range(2..4), rng.gen_range(2..5)];
            let input = rand_tensor(&shape, 0.2, 1.8, &mut rng);
            let probe = rand_tensor(&shape, -1.0, 1.0, &mut rng);
            CheckCase {
                name: format!("log[{}]", index),
                inputs: vec![input],
                build: Box::new(move |g, ids| {
                    let out = g.log(ids[0]).unwrap();
                    probed_root(g, out, probe.clone())
                }),
            }
        }
        15 => {
            let shape = [rng.gen_range(2..4), rng.gen_range(2..5)];
            let input = rand_tensor(&shape, -1.0, 1.0, &mut rng);
            let probe = rand_tensor(&shape, -1.0, 1.0, &mut rng);
            let factor = rng.gen_range(-2.0..2.0);
            let offset = rng.gen_range(-1.0..1.0);
            CheckCase {
                name: format!("scale_add_scalar[{}]", index),
                inputs: vec![input],
                build: Box::new(move |g, ids| {
                    let s = g.scale(ids[0], factor);
                    let out = g.add_scalar(s, offset);
                    probed_root(g, out, probe.clone())
                }),
            }
        }
        16 => {
            let shape = [rng.gen_range(2..4), rng.gen_range(2..5)];
            let input = rand_tensor(&shape, -1.0, 1.0, &mut rng);
            CheckCase {
                name: format!("reduce_sum[{}]", index),
                inputs: vec![input],
                build: Box::new(move |g, ids| g.reduce_sum(ids[0])),
            }
        }
        17 => {
            let shape = [rng.gen_range(2..4), rng.gen_range(2..5)];
            let input = rand_tensor(&shape, -1.0, 1.0, &mut rng);
            CheckCase {
                name: format!("reduce_mean[{}]", index),
                inputs: vec![input],
                build: Box::new(move |g, ids| g.reduce_mean(ids[0])),
            }
        }
        18 => {
            let shape = [rng.gen_range(2..5), rng.gen_range(2..4)];
            let logits = rand_tensor(&shape, -2.0, 2.0, &mut rng);
            let targets = {
                let mut t = Tensor::zeros(&shape);
                for v in t.data_mut() {
                    *v = f64::from(rng.gen_bool(0.5));
                }
                t
            };
            let probe = rand_tensor(&shape, -1.0, 1.0, &mut rng);
            CheckCase {
                name: format!("bce_with_logits[{}]", index),
                inputs: vec![logits],
                build: Box::new(move |g, ids| {
                    let t = g.leaf(targets.clone());
                    let out = g.bce_with_logits(ids[0], t).unwrap();
                    probed_root(g, out, probe.clone())
                }),
            }
        }
        _ => {
            // Composite: conv -> relu -> pool -> transposed conv -> sigmoid
            // -> soft dice against a fixed mask. Exercises the chain the
            // segmentation loss actually uses.
            let input = rand_tensor(&[1, 4, 6, 6], -1.0, 1.0, &mut rng);
            let wc = rand_tensor(&[2, 1, 3, 3, 3], -0.5, 0.5, &mut rng);
            let wt = rand_tensor(&[2, 1, 2, 2, 2], -0.5, 0.5, &mut rng);
            let mask = {
                let mut m = Tensor::zeros(&[1, 4, 6, 6]);
                for v in m.data_mut() {
                    *v = f64::from(rng.gen_bool(0.4));
                }
                m
            };
            CheckCase {
                name: format!("composite_dice[{}]", index),
                inputs: vec![input, wc, wt],
                build: Box::new(move |g, ids| {
                    let c = g.conv3d(ids[0], ids[1], None, Conv3dAttrs::same(3)).unwrap();
                    let r = g.relu(c);
                    let p = g.maxpool3d(r, Pool3dAttrs::cube(2)).unwrap();
                    let u = g
                        .transposed_conv3d(
                            p,
                            ids[2],
                            None,
                            Conv3dAttrs { stride: [2, 2, 2], padding: [0, 0, 0] },
                        )
                        .unwrap();
                    let prob = g.sigmoid(u);
                    let m = g.leaf(mask.clone());
                    let inter = g.mul(prob, m).unwrap();
                    let num_sum = g.reduce_sum(inter);
                    let num2 = g.scale(num_sum, 2.0);
                    let num = g.add_scalar(num2, 1.0);
                    let ps = g.reduce_sum(prob);
                    let ms = g.reduce_sum(m);
                    let den_sum = g.add(ps, ms).unwrap();
                    let den = g.add_scalar(den_sum, 1.0);
                    let ratio = g.div(num, den).unwrap();
                    let neg = g.scale(ratio, -1.0);
                    g.add_scalar(neg, 1.0)
                }),
            }
        }
    }
}
