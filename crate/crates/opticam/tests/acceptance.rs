//! Acceptance gate: one test per criterion, each printing a PASS/FAIL
//! line. The shared fixture is the seed-42 synthetic dataset (3 classes,
//! 32x32, 300 images per class) and a toy CNN trained on it to at least
//! 90% held-out accuracy.

use std::collections::BTreeMap;
use std::panic::AssertUnwindSafe;
use std::path::PathBuf;
use std::sync::LazyLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use opticam::dataset::{generate_synthetic_dataset, Split, SyntheticDataset};
use opticam::graph::{Graph, NodeId};
use opticam::harness::{run_evaluation, run_inner, sanity_check, RunConfig};
use opticam::metrics::{
    self, box_accuracy, box_study_masks, eval_record, insertion_deletion, localization_suite,
    predicted_bbox, BBox, EvalRecord,
};
use opticam::nn::{self, argmax, build_toy_cnn, train, Network, TrainConfig};
use opticam::saliency::{
    compute_saliency, mask_objective, objective_gradient, opti_cam, score_cam_channel_scores,
    Objective, OptiConfig, METHODS,
};
use opticam::Tensor;

struct Fixture {
    net: Network,
    data: SyntheticDataset,
    accuracy: f64,
    test_idx: Vec<usize>,
    /// Adapted Opti-CAM (Mask x Range) map per test image.
    opti_maps: Vec<Tensor>,
    opti_records: Vec<EvalRecord>,
    opti_eval_secs: f64,
}

static FIXTURE: LazyLock<Fixture> = LazyLock::new(|| {
    let data = generate_synthetic_dataset(42, 300, 32, 3).unwrap();
    let net = build_toy_cnn(3, (3, 32, 32), 42).unwrap();
    let cfg = TrainConfig {
        seed: 42,
        ..TrainConfig::default()
    };
    let (net, accuracy) = train(
        &net,
        &data.labeled_set(Split::Train),
        &data.labeled_set(Split::Val),
        &cfg,
    )
    .unwrap();
    assert!(accuracy >= 0.9, "fixture accuracy {accuracy} below 0.9");
    let test_idx = data.split_indices(Split::Test);
    let opti = OptiConfig::default();
    let start = Instant::now();
    let mut opti_maps = Vec::with_capacity(test_idx.len());
    let mut opti_records = Vec::with_capacity(test_idx.len());
    for &i in &test_idx {
        let (map, _) = opti_cam(&net, &data.images[i], data.labels[i], "feat", &opti).unwrap();
        let rec = eval_record(&net, &data.images[i], i, data.labels[i], &map.adapted).unwrap();
        opti_maps.push(map.adapted);
        opti_records.push(rec);
    }
    let opti_eval_secs = start.elapsed().as_secs_f64();
    Fixture {
        net,
        data,
        accuracy,
        test_idx,
        opti_maps,
        opti_records,
        opti_eval_secs,
    }
});

/// Per-method (p, o) records over the test split, all CAM baselines.
static METHOD_RECORDS: LazyLock<BTreeMap<String, Vec<EvalRecord>>> = LazyLock::new(|| {
    let fx = &*FIXTURE;
    let mut out = BTreeMap::new();
    let opti = OptiConfig::default();
    for &method in METHODS {
        if method == "opti-cam" {
            out.insert(method.to_string(), fx.opti_records.clone());
            continue;
        }
        let mut records = Vec::with_capacity(fx.test_idx.len());
        for &i in &fx.test_idx {
            let map =
                compute_saliency(&fx.net, &fx.data.images[i], fx.data.labels[i], "feat", method, &opti)
                    .unwrap();
            records.push(
                eval_record(&fx.net, &fx.data.images[i], i, fx.data.labels[i], &map.adapted)
                    .unwrap(),
            );
        }
        out.insert(method.to_string(), records);
    }
    out
});

fn criterion(label: &str, body: impl FnOnce()) {
    match std::panic::catch_unwind(AssertUnwindSafe(body)) {
        Ok(()) => println!("{label}: PASS"),
        Err(e) => {
            println!("{label}: FAIL");
            std::panic::resume_unwind(e);
        }
    }
}

// ---------------------------------------------------------------- 1

/// Central finite difference of a scalar-valued rebuild function.
fn finite_diff(
    inputs: &[Tensor],
    eval: &dyn Fn(&[Tensor]) -> f64,
) -> Vec<Vec<f64>> {
    let step = 1e-4;
    inputs
        .iter()
        .enumerate()
        .map(|(which, t)| {
            (0..t.numel())
                .map(|j| {
                    let mut plus = inputs.to_vec();
                    plus[which].data_mut()[j] += step;
                    let mut minus = inputs.to_vec();
                    minus[which].data_mut()[j] -= step;
                    (eval(&plus) - eval(&minus)) / (2.0 * step)
                })
                .collect()
        })
        .collect()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Check one op: `build` wires leaves into a scalar root.
fn check_op(
    name: &str,
    inputs: Vec<Tensor>,
    build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
) {
    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let root = build(&mut g, &ids);
        g.value(root).item()
    };
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = build(&mut g, &ids);
    let grads = g.backward(root).unwrap();
    let numeric = finite_diff(&inputs, &eval);
    for (which, id) in ids.iter().enumerate() {
        let analytic = grads[id.index()]
            .clone()
            .map(|t| t.into_data())
            .unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        for (j, (&a, &n)) in analytic.iter().zip(&numeric[which]).enumerate() {
            assert!(
                rel_err(a, n) < 1e-5,
                "{name}: input {which} entry {j}: analytic {a} vs numeric {n}"
            );
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Like rand_tensor but keeping every entry away from zero, for ops with
/// a kink at the origin.
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.01..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn criterion_01_gradient_suite() {
    criterion("criterion 01 gradient suite", || {
        let fx = &*FIXTURE; // build the fixture outside the timed region
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..20 {
            let a = rand_tensor(&mut rng, vec![2, 3], -1.0, 1.0);
            let b = rand_tensor(&mut rng, vec![2, 3], -1.0, 1.0);
            check_op("add", vec![a.clone(), b.clone()], &|g, ids| {
                let s = g.add(ids[0], ids[1]).unwrap();
                g.sum(s)
            });
            check_op("sub", vec![a.clone(), b.clone()], &|g, ids| {
                let s = g.sub(ids[0], ids[1]).unwrap();
                g.sum(s)
            });
            check_op("mul", vec![a.clone(), b.clone()], &|g, ids| {
                let s = g.mul(ids[0], ids[1]).unwrap();
                g.sum(s)
            });
            check_op("add_scalar", vec![a.clone()], &|g, ids| {
                let s = g.add_scalar(ids[0], 0.7);
                g.sum(s)
            });
            check_op("mul_scalar", vec![a.clone()], &|g, ids| {
                let s = g.mul_scalar(ids[0], -1.3);
                g.sum(s)
            });
            check_op("sub_from_scalar", vec![a.clone()], &|g, ids| {
                let s = g.sub_from_scalar(1.0, ids[0]);
                g.sum(s)
            });
            check_op("reshape+mean", vec![a.clone()], &|g, ids| {
                let r = g.reshape(ids[0], vec![6]).unwrap();
                let sq = g.mul(r, r).unwrap();
                g.mean(sq)
            });

            let m1 = rand_tensor(&mut rng, vec![2, 3], -1.0, 1.0);
            let m2 = rand_tensor(&mut rng, vec![3, 2], -1.0, 1.0);
            check_op("matmul", vec![m1, m2], &|g, ids| {
                let s = g.matmul(ids[0], ids[1]).unwrap();
                g.sum(s)
            });

            let x = rand_tensor(&mut rng, vec![2, 5, 5], -1.0, 1.0);
            let w = rand_tensor(&mut rng, vec![3, 2, 3, 3], -1.0, 1.0);
            let bias = rand_tensor(&mut rng, vec![3], -1.0, 1.0);
            check_op("conv2d", vec![x, w, bias], &|g, ids| {
                let c = g.conv2d(ids[0], ids[1], ids[2]).unwrap();
                g.sum(c)
            });

            let off = rand_tensor_off_zero(&mut rng, vec![2, 4]);
            check_op("relu", vec![off.clone()], &|g, ids| {
                let r = g.relu(ids[0]);
                g.sum(r)
            });
            check_op("abs", vec![off.clone()], &|g, ids| {
                let r = g.abs(ids[0]);
                g.sum(r)
            });
            check_op("sigmoid", vec![a.clone()], &|g, ids| {
                let r = g.sigmoid(ids[0]);
                g.sum(r)
            });

            let pool_in = rand_tensor(&mut rng, vec![2, 4, 4], -1.0, 1.0);
            check_op("max_pool2x2", vec![pool_in], &|g, ids| {
                let p = g.max_pool2x2(ids[0]).unwrap();
                g.sum(p)
            });
            let gap_in = rand_tensor(&mut rng, vec![3, 4, 4], -1.0, 1.0);
            check_op("global_avg_pool", vec![gap_in], &|g, ids| {
                let p = g.global_avg_pool(ids[0]).unwrap();
                g.sum(p)
            });

            let lx = rand_tensor(&mut rng, vec![3], -1.0, 1.0);
            let lw = rand_tensor(&mut rng, vec![4, 3], -1.0, 1.0);
            let lb = rand_tensor(&mut rng, vec![4], -1.0, 1.0);
            check_op("linear", vec![lx, lw, lb], &|g, ids| {
                let l = g.linear(ids[0], ids[1], ids[2]).unwrap();
                g.sum(l)
            });

            let sm = rand_tensor(&mut rng, vec![5], -1.0, 1.0);
            check_op("softmax", vec![sm.clone()], &|g, ids| {
                let s = g.softmax(ids[0]);
                g.select(s, 0).unwrap()
            });
            check_op("select", vec![sm.clone()], &|g, ids| {
                g.select(ids[0], 2).unwrap()
            });
            check_op("cross_entropy", vec![sm], &|g, ids| {
                g.cross_entropy(ids[0], 1).unwrap()
            });

            let up_in = rand_tensor(&mut rng, vec![3, 3], -1.0, 1.0);
            check_op("bilinear_upsample", vec![up_in], &|g, ids| {
                let u = g.bilinear_upsample(ids[0], 7, 7).unwrap();
                let sq = g.mul(u, u).unwrap();
                g.sum(sq)
            });

            let rn = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
            check_op("range_normalize", vec![rn], &|g, ids| {
                let r = g.range_normalize(ids[0]).unwrap();
                let sq = g.mul(r, r).unwrap();
                g.sum(sq)
            });
            let mn = rand_tensor(&mut rng, vec![3, 4], 0.1, 1.0);
            check_op("max_normalize", vec![mn], &|g, ids| {
                let r = g.max_normalize(ids[0]).unwrap();
                let sq = g.mul(r, r).unwrap();
                g.sum(sq)
            });

            let c1 = rand_tensor(&mut rng, vec![2, 3, 3], -1.0, 1.0);
            let c2 = rand_tensor(&mut rng, vec![1, 3, 3], -1.0, 1.0);
            check_op("concat_channels", vec![c1, c2], &|g, ids| {
                let c = g.concat_channels(ids[0], ids[1]).unwrap();
                let sq = g.mul(c, c).unwrap();
                g.sum(sq)
            });

            let img = rand_tensor(&mut rng, vec![3, 4, 4], -1.0, 1.0);
            let mask = rand_tensor(&mut rng, vec![4, 4], -1.0, 1.0);
            check_op("mul_channel_broadcast", vec![img.clone(), mask], &|g, ids| {
                let m = g.mul_channel_broadcast(ids[0], ids[1]).unwrap();
                g.sum(m)
            });

            let mean = rand_tensor(&mut rng, vec![3], -1.0, 1.0);
            let std = rand_tensor(&mut rng, vec![3], 0.5, 1.5);
            check_op("channel_normalize", vec![img, mean, std], &|g, ids| {
                let n = g.channel_normalize(ids[0], ids[1], ids[2]).unwrap();
                let sq = g.mul(n, n).unwrap();
                g.sum(sq)
            });
        }

        // end-to-end dF/du for the Mask objective through the full network
        let cfg = OptiConfig::default();
        let image = &fx.data.images[fx.test_idx[0]];
        let class = fx.data.labels[fx.test_idx[0]];
        let step = 1e-4;
        for inst in 0..20 {
            let mut r = ChaCha8Rng::seed_from_u64(9000 + inst);
            let u: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
            let (_, grad) = objective_gradient(&fx.net, image, class, "feat", &u, &cfg).unwrap();
            for j in 0..16 {
                let mut up = u.clone();
                up[j] += step;
                let mut dn = u.clone();
                dn[j] -= step;
                let (fp, _) = objective_gradient(&fx.net, image, class, "feat", &up, &cfg).unwrap();
                let (fm, _) = objective_gradient(&fx.net, image, class, "feat", &dn, &cfg).unwrap();
                let numeric = (fp - fm) / (2.0 * step);
                assert!(
                    rel_err(grad[j], numeric) < 1e-4,
                    "dF/du[{j}] instance {inst}: analytic {} vs numeric {numeric}",
                    grad[j]
                );
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        assert!(elapsed < 30.0, "gradient suite took {elapsed:.1}s");
    });
}

// ---------------------------------------------------------------- 2

fn rec(p: f64, o: f64) -> EvalRecord {
    EvalRecord {
        image_id: 0,
        class: 0,
        p,
        o,
        predicted: 0,
        p_predicted: p,
    }
}

#[test]
fn criterion_02_metric_oracles() {
    criterion("criterion 02 metric oracles", || {
        let records = [
            rec(0.8, 0.6),
            rec(0.5, 0.7),
            rec(0.3, 0.3),
            rec(0.9, 0.45),
            rec(0.2, 0.9),
        ];
        // independent loop oracle
        let n = records.len() as f64;
        let mut ad = 0.0;
        let mut ag = 0.0;
        let mut ai = 0.0;
        for r in &records {
            ad += (r.p - r.o).max(0.0) / r.p;
            ag += (r.o - r.p).max(0.0) / (1.0 - r.p);
            if r.p < r.o {
                ai += 1.0;
            }
        }
        ad = ad / n * 100.0;
        ag = ag / n * 100.0;
        ai = ai / n * 100.0;
        assert!((metrics::average_drop(&records).unwrap() - ad).abs() < 1e-12);
        assert!((metrics::average_gain(&records).unwrap() - ag).abs() < 1e-12);
        assert!((metrics::average_increase(&records).unwrap() - ai).abs() < 1e-12);
        // worked single-record values
        let ad1 = metrics::average_drop(&[rec(0.8, 0.6)]).unwrap();
        assert_eq!(ad1, (0.8f64 - 0.6).max(0.0) / 0.8 * 100.0);
        assert!((ad1 - 25.0).abs() < 1e-12);
        let ag1 = metrics::average_gain(&[rec(0.5, 0.75)]).unwrap();
        assert_eq!(ag1, 50.0);
    });
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_drop_gain_exclusivity() {
    criterion("criterion 03 AD/AG exclusivity", || {
        let mut checked = 0usize;
        for (method, records) in METHOD_RECORDS.iter() {
            for r in records {
                let drop = (r.p - r.o).max(0.0);
                let gain = (r.o - r.p).max(0.0);
                assert_eq!(drop * gain, 0.0, "violation: {method} image {}", r.image_id);
                checked += 1;
            }
        }
        assert_eq!(checked, METHODS.len() * FIXTURE.test_idx.len());
    });
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_fake_cam_pattern() {
    criterion("criterion 04 Fake-CAM pattern", || {
        let fake = &METHOD_RECORDS["fake-cam"];
        let fake_ad = metrics::average_drop(fake).unwrap();
        let fake_ag = metrics::average_gain(fake).unwrap();
        let opti_ag = metrics::average_gain(&FIXTURE.opti_records).unwrap();
        assert!(fake_ad < 5.0, "Fake-CAM AD {fake_ad}");
        assert!(fake_ag < 5.0, "Fake-CAM AG {fake_ag}");
        assert!(
            opti_ag >= 5.0 * fake_ag,
            "Opti-CAM AG {opti_ag} not >= 5 x Fake-CAM AG {fake_ag}"
        );
    });
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_method_ordering() {
    criterion("criterion 05 method ordering", || {
        let fx = &*FIXTURE;
        assert!(
            fx.opti_eval_secs < 300.0,
            "full Opti-CAM eval took {:.1}s",
            fx.opti_eval_secs
        );
        let opti_ad = metrics::average_drop(&fx.opti_records).unwrap();
        let opti_ag = metrics::average_gain(&fx.opti_records).unwrap();
        let grad = &METHOD_RECORDS["grad-cam"];
        let grad_ad = metrics::average_drop(grad).unwrap();
        let grad_ag = metrics::average_gain(grad).unwrap();
        println!(
            "  AD margin (Grad-CAM - Opti-CAM): {:.3}; AG margin (Opti-CAM - Grad-CAM): {:.3}",
            grad_ad - opti_ad,
            opti_ag - grad_ag
        );
        assert!(opti_ad <= grad_ad, "AD: opti {opti_ad} vs grad {grad_ad}");
        assert!(opti_ag >= grad_ag, "AG: opti {opti_ag} vs grad {grad_ag}");

        // Mask beats Diff on AG
        let mut cfg = RunConfig::new("opti-cam", PathBuf::new());
        cfg.opti.objective = Objective::Diff;
        let diff = run_inner(&fx.net, &fx.data, &cfg).unwrap();
        let diff_ag = diff.metrics["ag"];
        println!("  AG margin (Mask - Diff objective): {:.3}", opti_ag - diff_ag);
        assert!(opti_ag >= diff_ag, "AG: mask {opti_ag} vs diff {diff_ag}");
    });
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_score_cam_identity() {
    criterion("criterion 06 Score-CAM identity", || {
        let fx = &*FIXTURE;
        for &i in fx.test_idx.iter().take(10) {
            let image = &fx.data.images[i];
            let class = fx.data.labels[i];
            let scores = score_cam_channel_scores(&fx.net, image, class, "feat").unwrap();
            let f0 = mask_objective(&fx.net, image, class, "feat", &[0.0; 16]).unwrap();
            for (ch, &u_k) in scores.iter().enumerate() {
                let mut e_k = vec![0.0; 16];
                e_k[ch] = 1.0;
                let f_ek = mask_objective(&fx.net, image, class, "feat", &e_k).unwrap();
                assert!(
                    (u_k - (f_ek - f0)).abs() < 1e-10,
                    "image {i} channel {ch}: {u_k} vs {}",
                    f_ek - f0
                );
            }
        }
    });
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_insertion_deletion_invariants() {
    criterion("criterion 07 insertion/deletion invariants", || {
        let fx = &*FIXTURE;
        let steps = 32usize;
        for (pos, &i) in fx.test_idx.iter().take(20).enumerate() {
            let image = &fx.data.images[i];
            let map = &fx.opti_maps[pos];
            let id = insertion_deletion(&fx.net, image, map, steps, None).unwrap();
            assert_eq!(id.insertion.len(), steps + 1);
            assert_eq!(id.deletion.len(), steps + 1);
            let c = argmax(fx.net.probabilities(image).unwrap().data());
            let p_full = fx.net.probabilities(image).unwrap().data()[c];
            let p_zero = fx
                .net
                .probabilities(&Tensor::zeros(vec![3, 32, 32]))
                .unwrap()
                .data()[c];
            assert!((id.deletion[0].1 - p_full).abs() < 1e-12);
            assert!((id.deletion.last().unwrap().1 - p_zero).abs() < 1e-12);
            assert!((id.insertion.last().unwrap().1 - p_full).abs() < 1e-12);
            assert_eq!(id.deletion[0].0, 0.0);
            assert_eq!(id.deletion.last().unwrap().0, 1.0);
            for pair in id.insertion.windows(2) {
                assert!(pair[1].0 > pair[0].0);
            }
        }
        // tie-break: a constant map deletes pixels in raster order
        let uniform = Tensor::full(vec![32, 32], 0.5);
        let order = metrics::saliency_pixel_order(&uniform);
        assert_eq!(order, (0..1024).collect::<Vec<_>>());
    });
}

// ---------------------------------------------------------------- 8

fn oracle_bbox(m: &Tensor) -> BBox {
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let mean = m.data().iter().sum::<f64>() / m.numel() as f64;
    let mut label = vec![usize::MAX; h * w];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for i in 0..h * w {
        if m.data()[i] <= mean || label[i] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut pix = vec![];
        let mut queue = std::collections::VecDeque::from([i]);
        label[i] = id;
        while let Some(p) = queue.pop_front() {
            pix.push(p);
            let (y, x) = (p / w, p % w);
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i32 || nx >= w as i32 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if m.data()[q] > mean && label[q] == usize::MAX {
                        label[q] = id;
                        queue.push_back(q);
                    }
                }
            }
        }
        comps.push(pix);
    }
    if comps.is_empty() {
        return BBox { x0: 0, y0: 0, x1: w - 1, y1: h - 1 };
    }
    let mut best = 0;
    for (i, c) in comps.iter().enumerate() {
        if c.len() > comps[best].len() {
            best = i;
        }
    }
    let c = &comps[best];
    BBox {
        x0: c.iter().map(|p| p % w).min().unwrap(),
        y0: c.iter().map(|p| p / w).min().unwrap(),
        x1: c.iter().map(|p| p % w).max().unwrap(),
        y1: c.iter().map(|p| p / w).max().unwrap(),
    }
}

#[test]
fn criterion_08_localization_suite() {
    criterion("criterion 08 localization suite", || {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        // EP == precision on random maps
        for _ in 0..20 {
            let m = Tensor::new(
                vec![16, 16],
                (0..256).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
            .unwrap();
            let gt = BBox {
                x0: rng.gen_range(0..8),
                y0: rng.gen_range(0..8),
                x1: rng.gen_range(8..16),
                y1: rng.gen_range(8..16),
            };
            let scores = localization_suite(&m, &[gt], 0, 0, 0.5).unwrap();
            let mut num = 0.0;
            let mut den = 0.0;
            for y in 0..16 {
                for x in 0..16 {
                    den += m.at2(y, x);
                    if gt.contains(y, x) {
                        num += m.at2(y, x);
                    }
                }
            }
            assert!((scores.ep - num / den * 100.0).abs() < 1e-12);
        }
        // predicted_bbox against the flood-fill oracle
        for _ in 0..50 {
            let m = Tensor::new(
                vec![16, 16],
                (0..256)
                    .map(|_| if rng.gen_bool(0.3) { rng.gen_range(0.5..1.0) } else { 0.0 })
                    .collect(),
            )
            .unwrap();
            assert_eq!(predicted_bbox(&m), oracle_bbox(&m));
        }
        // gt-box indicator maps on the synthetic set
        let fx = &*FIXTURE;
        let mut maps = Vec::new();
        for &i in &fx.test_idx {
            let gt = fx.data.boxes[i][0];
            let mut ind = Tensor::zeros(vec![32, 32]);
            for y in gt.y0..=gt.y1 {
                for x in gt.x0..=gt.x1 {
                    ind.data_mut()[y * 32 + x] = 1.0;
                }
            }
            let class = fx.data.labels[i];
            let s = localization_suite(&ind, &fx.data.boxes[i], class, class, 0.9).unwrap();
            assert_eq!(s.om, 0.0, "image {i}");
            maps.push(ind);
        }
        let pairs: Vec<(&Tensor, &[BBox])> = fx
            .test_idx
            .iter()
            .enumerate()
            .map(|(pos, &i)| (&maps[pos], fx.data.boxes[i].as_slice()))
            .collect();
        let ba = box_accuracy(&pairs, metrics::DEFAULT_BOX_ETAS, metrics::DEFAULT_BOX_DELTAS)
            .unwrap();
        assert_eq!(ba, 100.0);
    });
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_bounding_box_study() {
    criterion("criterion 09 bounding-box study", || {
        let fx = &*FIXTURE;
        let mut records_bs = Vec::with_capacity(fx.test_idx.len());
        for (pos, &i) in fx.test_idx.iter().enumerate() {
            let masks = box_study_masks(&fx.opti_maps[pos], &fx.data.boxes[i]);
            assert_eq!(masks[1].0, "BS");
            records_bs.push(
                eval_record(&fx.net, &fx.data.images[i], i, fx.data.labels[i], &masks[1].1)
                    .unwrap(),
            );
        }
        let ad_s = metrics::average_drop(&fx.opti_records).unwrap();
        let ad_bs = metrics::average_drop(&records_bs).unwrap();
        println!("  AD(S) = {ad_s:.3}, AD(B \u{2229} S) = {ad_bs:.3}");
        assert!(ad_s < ad_bs, "AD(S) {ad_s} not strictly below AD(B n S) {ad_bs}");
    });
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_sanity_check() {
    criterion("criterion 10 parameter-randomization sanity", || {
        let fx = &*FIXTURE;
        let cfg = RunConfig::new("opti-cam", PathBuf::new());
        let full = fx.net.parameterized_layer_count();
        let rows = sanity_check(&fx.net, &fx.data, &cfg, &[0, full]).unwrap();
        assert_eq!(rows[0].spearman, 1.0);
        assert_eq!(rows[0].spearman_abs, 1.0);
        assert_eq!(rows[0].ssim, 1.0);
        println!(
            "  fully-randomized (stage {full}) mean signed Spearman = {:.4}",
            rows[1].spearman
        );
        assert!(rows[1].spearman < 0.5, "stage-{full} Spearman {}", rows[1].spearman);
        assert!(rows[1].spearman < rows[0].spearman);
    });
}

// ---------------------------------------------------------------- 11

#[test]
fn criterion_11_pipeline_determinism() {
    criterion("criterion 11 pipeline determinism", || {
        let run_pipeline = |workers: usize| -> Vec<u8> {
            let dir = tempfile::tempdir().unwrap();
            let data_dir = dir.path().join("data");
            generate_synthetic_dataset(42, 300, 32, 3)
                .unwrap()
                .save(&data_dir)
                .unwrap();
            let data = SyntheticDataset::load(&data_dir).unwrap();
            let net = build_toy_cnn(3, (3, 32, 32), 42).unwrap();
            let cfg = TrainConfig {
                seed: 42,
                ..TrainConfig::default()
            };
            let (net, _) = train(
                &net,
                &data.labeled_set(Split::Train),
                &data.labeled_set(Split::Val),
                &cfg,
            )
            .unwrap();
            let weights = dir.path().join("weights.ocw");
            nn::save_weights(&net, &weights).unwrap();
            let net = nn::load_weights(&weights).unwrap();
            let mut run_cfg = RunConfig::new("opti-cam", dir.path().join("eval"));
            run_cfg.workers = workers;
            run_cfg.metrics = vec!["ad".into(), "ag".into(), "ai".into(), "loc".into()];
            run_evaluation(&net, &data, &run_cfg).unwrap();
            std::fs::read(dir.path().join("eval/aggregate.json")).unwrap()
        };
        let a = run_pipeline(1);
        let b = run_pipeline(4);
        assert!(!a.is_empty());
        assert_eq!(a, b, "aggregate JSON differs between 1 and 4 workers");
    });
}

// ----------------------------------------------------------------

#[test]
fn fixture_accuracy_gate() {
    criterion("fixture: held-out accuracy >= 0.9", || {
        assert!(FIXTURE.accuracy >= 0.9, "accuracy {}", FIXTURE.accuracy);
    });
}
