#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semicircle_core::angle::{decompose, mirror, orientation_similarity, reconstruct, step_epsilon, wrap};
use semicircle_core::eval::AosInput;
use semicircle_core::kitti::{load_label_dir, to_aos_input};
use semicircle_core::nn::{loss_ce, loss_mse_cos, loss_unsupervised, Graph, NodeId, Tensor};
use semicircle_core::synth::{generate, Dataset, GeneratorSpec};
use semicircle_core::Orientation;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/kitti")
}

/// Every shipped KITTI fixture as `(name, gt dir, pred dir)`.
pub fn kitti_fixtures() -> Vec<(String, PathBuf, PathBuf)> {
    let mut out: Vec<_> = std::fs::read_dir(fixture_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p.join("gt"), p.join("pred")))
        .collect();
    out.sort();
    out
}

pub fn fixture_input(gt: &Path, pred: &Path, class: &str) -> AosInput {
    to_aos_input(&load_label_dir(gt).unwrap(), &load_label_dir(pred).unwrap(), class).unwrap()
}

fn box_iou(a: &semicircle_core::eval::BoundingBox, b: &semicircle_core::eval::BoundingBox) -> f64 {
    let iw = (a.right.min(b.right) - a.left.max(b.left)).max(0.0);
    let ih = (a.bottom.min(b.bottom) - a.top.max(b.top)).max(0.0);
    let inter = iw * ih;
    let area = |x: &semicircle_core::eval::BoundingBox| (x.right - x.left) * (x.bottom - x.top);
    inter / (area(a) + area(b) - inter)
}

/// Brute-force AOS: for every score cut-off, keep the detections at or above
/// it, redo the matching from scratch, and record (recall, similarity
/// precision). Each recall level then takes the best point that reaches it,
/// compared in exact integer arithmetic.
pub fn brute_force_aos(input: &AosInput, iou_threshold: f64) -> f64 {
    let n_gt: usize = input.images.iter().map(|i| i.ground_truths.len()).sum();
    let mut cutoffs: Vec<f64> = input.images.iter().flat_map(|i| i.predictions.iter().map(|p| p.score)).collect();
    cutoffs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    cutoffs.dedup();
    let mut points: Vec<(usize, f64)> = Vec::new();
    for &cut in &cutoffs {
        let mut kept = 0usize;
        let mut tp = 0usize;
        let mut sim = 0.0;
        for image in &input.images {
            let mut dets: Vec<_> = image.predictions.iter().filter(|p| p.score >= cut).collect();
            dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            kept += dets.len();
            let mut used = vec![false; image.ground_truths.len()];
            for d in dets {
                let best = image
                    .ground_truths
                    .iter()
                    .enumerate()
                    .filter(|(g, _)| !used[*g])
                    .map(|(g, gt)| (g, box_iou(&d.bbox, &gt.bbox), gt.orientation))
                    .filter(|(_, iou, _)| *iou >= iou_threshold)
                    .fold(None::<(usize, f64, f64)>, |acc, c| match acc {
                        Some(a) if a.1 >= c.1 => Some(a),
                        _ => Some(c),
                    });
                if let Some((g, _, truth)) = best {
                    used[g] = true;
                    tp += 1;
                    sim += (1.0 + (d.orientation - truth).cos()) / 2.0;
                }
            }
        }
        points.push((tp, sim / kept as f64));
    }
    let mut total = 0.0;
    for level in 0..=10usize {
        let best = points
            .iter()
            .filter(|(tp, _)| tp * 10 >= level * n_gt)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += best;
    }
    total / 11.0
}

/// Angle-algebra invariants on a uniform 10,000-point grid; returns the
/// largest deviation seen.
pub fn angle_suite() -> Result<f64, String> {
    let n = 10_000;
    let mut worst = 0.0f64;
    for k in 1..=n {
        let theta = Orientation::new(-PI + 2.0 * PI * k as f64 / n as f64).unwrap();
        let t = theta.radians();
        let d = decompose(theta);
        let back = reconstruct(d.class_index, d.folded).map_err(|e| e.to_string())?;
        let dev = wrap(back.radians() - t).unwrap().radians().abs();
        worst = worst.max(dev);
        if dev > 1e-12 {
            return Err(format!("roundtrip at θ={t}: got {back}"));
        }
        let eps = f64::from(step_epsilon(theta));
        let direct = (t + (eps - 1.0) * PI).cos();
        worst = worst.max((d.cos_target - direct).abs());
        if (d.cos_target - direct).abs() > 1e-12 {
            return Err(format!("folding identity at θ={t}"));
        }
        let twice = mirror(mirror(theta));
        let dev = wrap(twice.radians() - t).unwrap().radians().abs();
        worst = worst.max(dev);
        if dev > 1e-12 {
            return Err(format!("mirror involution at θ={t}"));
        }
        if t.abs().min((PI - t).abs()).min((PI + t).abs()) > 1e-6 {
            let m = decompose(mirror(theta));
            if m.epsilon != 1 - d.epsilon {
                return Err(format!("label complementation at θ={t}"));
            }
            let dev = (m.cos_target + d.cos_target).abs();
            worst = worst.max(dev);
            if dev > 1e-12 {
                return Err(format!("target antisymmetry at θ={t}"));
            }
        }
        let delta = semicircle_core::angular_error(theta, Orientation::default());
        let s = orientation_similarity(delta);
        if !(0.0..=1.0).contains(&s) {
            return Err(format!("similarity {s} out of bounds at Δ={t}"));
        }
        if (s == 1.0) != (t == 0.0) {
            return Err(format!("similarity 1 iff Δ=0 fails at Δ={t}"));
        }
        if (s == 0.0) != (t == PI) {
            return Err(format!("similarity 0 iff Δ=π fails at Δ={t}"));
        }
    }
    let zero = semicircle_core::angular_error(Orientation::default(), Orientation::default());
    let opposite = semicircle_core::angular_error(Orientation::new(PI).unwrap(), Orientation::default());
    if orientation_similarity(zero) != 1.0 || orientation_similarity(opposite) != 0.0 {
        return Err("similarity endpoints".into());
    }
    Ok(worst)
}

const STEP: f64 = 1e-4;
const TOLERANCE: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

/// Compares analytic gradients of `build` (a scalar function of the leaf
/// tensors) against central differences; returns the worst relative error.
pub fn check_gradients(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
) -> Result<f64, String> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &ids);
    g.backward(out).map_err(|e| e.to_string())?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).to_vec()).collect();
    let eval = |perturbed: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &ids);
        g.value(out).item().unwrap()
    };
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
            if rel > TOLERANCE {
                return Err(format!("input {i} element {j}: analytic {a}, numeric {numeric}"));
            }
        }
    }
    Ok(worst)
}

/// Values in `±[0.1, 1]`, clear of the ReLU kink at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced well beyond the finite-difference step, so no max
/// pooling window is near a tie.
fn distinct(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let mut v: Vec<f64> = (0..n).map(|k| 0.01 * k as f64 - 0.005 * n as f64).collect();
    v.shuffle(rng);
    v
}

/// Gradient checks for every differentiable operation and loss, one seed.
/// Returns `(name, worst relative error)` per check.
pub fn gradient_suite(seed: u64) -> Result<Vec<(&'static str, f64)>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let target = |rng: &mut ChaCha8Rng, n: usize| uniform(rng, n);

    let t1 = target(&mut rng, 12);
    let a = tensor(&[3, 4], uniform(&mut rng, 12));
    let b = tensor(&[3, 4], uniform(&mut rng, 12));
    results.push((
        "add",
        check_gradients(&[a, b], &|g, x| {
            let s = g.add(x[0], x[1]).unwrap();
            g.mse(s, &t1).unwrap()
        })?,
    ));

    let a = tensor(&[2, 5], uniform(&mut rng, 10));
    results.push((
        "sum",
        check_gradients(&[a], &|g, x| {
            let t = g.tanh(x[0]);
            g.sum(t)
        })?,
    ));

    let t2 = target(&mut rng, 10);
    let a = tensor(&[2, 5], away_from_zero(&mut rng, 10));
    results.push((
        "relu",
        check_gradients(&[a], &|g, x| {
            let r = g.relu(x[0]);
            g.mse(r, &t2).unwrap()
        })?,
    ));

    let t3 = target(&mut rng, 10);
    let a = tensor(&[10, 1], uniform(&mut rng, 10).iter().map(|v| 2.0 * v).collect());
    results.push((
        "tanh",
        check_gradients(&[a], &|g, x| {
            let r = g.tanh(x[0]);
            g.mse(r, &t3).unwrap()
        })?,
    ));

    for pad in [0usize, 1] {
        let (h, k) = (5, 3);
        let out = h + 2 * pad - k + 1;
        let t = target(&mut rng, 2 * 3 * out * out);
        let x = tensor(&[2, 2, h, h], uniform(&mut rng, 2 * 2 * h * h));
        let w = tensor(&[3, 2, k, k], uniform(&mut rng, 3 * 2 * k * k));
        let bias = tensor(&[3], uniform(&mut rng, 3));
        let name = if pad == 0 { "conv2d" } else { "conv2d_padded" };
        results.push((
            name,
            check_gradients(&[x, w, bias], &|g, x| {
                let c = g.conv2d(x[0], x[1], x[2], pad).unwrap();
                g.mse(c, &t).unwrap()
            })?,
        ));
    }

    let t4 = target(&mut rng, 2 * 2 * 2 * 3);
    let a = tensor(&[2, 2, 4, 6], distinct(&mut rng, 96));
    results.push((
        "max_pool2",
        check_gradients(&[a], &|g, x| {
            let p = g.max_pool2(x[0]).unwrap();
            g.mse(p, &t4).unwrap()
        })?,
    ));

    let t5 = target(&mut rng, 6);
    let a = tensor(&[2, 3, 4, 4], uniform(&mut rng, 96));
    results.push((
        "global_avg_pool",
        check_gradients(&[a], &|g, x| {
            let p = g.global_avg_pool(x[0]).unwrap();
            g.mse(p, &t5).unwrap()
        })?,
    ));

    let t6 = target(&mut rng, 8);
    let x = tensor(&[4, 3], uniform(&mut rng, 12));
    let w = tensor(&[2, 3], uniform(&mut rng, 6));
    let bias = tensor(&[2], uniform(&mut rng, 2));
    results.push((
        "linear",
        check_gradients(&[x, w, bias], &|g, x| {
            let l = g.linear(x[0], x[1], x[2]).unwrap();
            g.mse(l, &t6).unwrap()
        })?,
    ));

    let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..2)).collect();
    let logits = tensor(&[6, 2], uniform(&mut rng, 12).iter().map(|v| 3.0 * v).collect());
    results.push((
        "loss_ce",
        check_gradients(&[logits], &|g, x| loss_ce(g, x[0], &labels).unwrap())?,
    ));

    let thetas: Vec<Orientation> = (0..6).map(|_| Orientation::new(rng.gen_range(-PI..PI)).unwrap()).collect();
    let raw = tensor(&[6, 1], uniform(&mut rng, 6));
    results.push((
        "loss_mse_cos",
        check_gradients(&[raw], &|g, x| {
            let c = g.tanh(x[0]);
            loss_mse_cos(g, c, &thetas).unwrap()
        })?,
    ));

    let orig = tensor(&[5, 2], uniform(&mut rng, 10).iter().map(|v| 3.0 * v).collect());
    let flipped = tensor(&[5, 2], distinct(&mut rng, 10).iter().map(|v| 30.0 * v).collect());
    results.push((
        "loss_unsupervised",
        check_gradients(&[orig, flipped], &|g, x| loss_unsupervised(g, x[0], x[1]).unwrap())?,
    ));
    Ok(results)
}

/// Flip-paired logit batches with near-zero supervised cross entropy on both
/// halves; returns the largest flip-consistency loss seen over `trials`.
pub fn implication_suite(trials: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let n = rng.gen_range(1..=32);
        let thetas: Vec<Orientation> = (0..n)
            .map(|_| loop {
                let t = rng.gen_range(-PI..PI);
                if t.abs().min(PI - t.abs()) > 1e-6 {
                    break Orientation::new(t).unwrap();
                }
            })
            .collect();
        let confident = |rng: &mut ChaCha8Rng, label: usize| {
            let base = rng.gen_range(-5.0..5.0);
            let margin = rng.gen_range(7.7..25.0);
            if label == 0 {
                [base + margin, base]
            } else {
                [base, base + margin]
            }
        };
        let labels: Vec<usize> = thetas.iter().map(|&t| decompose(t).logit_index()).collect();
        let flipped_labels: Vec<usize> = thetas.iter().map(|&t| decompose(mirror(t)).logit_index()).collect();
        let orig: Vec<f64> = labels.iter().flat_map(|&l| confident(&mut rng, l)).collect();
        let flip: Vec<f64> = flipped_labels.iter().flat_map(|&l| confident(&mut rng, l)).collect();
        let mut g = Graph::new();
        let lo = g.leaf(tensor(&[n, 2], orig), false);
        let lf = g.leaf(tensor(&[n, 2], flip), false);
        let ce_o = loss_ce(&mut g, lo, &labels).unwrap();
        let ce_f = loss_ce(&mut g, lf, &flipped_labels).unwrap();
        let (co, cf) = (g.value(ce_o).item().unwrap(), g.value(ce_f).item().unwrap());
        if co >= 1e-3 || cf >= 1e-3 {
            return Err(format!("trial {trial}: construction has CE {co}, {cf}"));
        }
        let u = loss_unsupervised(&mut g, lo, lf).unwrap();
        let uv = g.value(u).item().unwrap();
        worst = worst.max(uv);
        if uv >= 2e-3 {
            return Err(format!("trial {trial}: unsupervised loss {uv}"));
        }
    }
    Ok(worst)
}

/// 5,000 samples from `(kappa, seed)`, split into the first 4,000 for
/// training and the last 1,000 for testing.
pub fn split_fixture(kappa: f64, seed: u64) -> (Dataset, Dataset) {
    let all = generate(&GeneratorSpec {
        count: 5000,
        asymmetry_kappa: kappa,
        seed,
        ..Default::default()
    })
    .unwrap();
    let train = Dataset {
        spec: all.spec.clone(),
        samples: all.samples[..4000].to_vec(),
    };
    let test = Dataset {
        spec: all.spec,
        samples: all.samples[4000..].to_vec(),
    };
    (train, test)
}
