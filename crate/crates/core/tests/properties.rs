//! Property tests for invariants that hold on every input.

use std::sync::Arc;

use fedmid::attack::{benign_statistics, lie_calibrate, poison_targeted, poison_untargeted, TriggerPatch};
use fedmid::data::Dataset;
use fedmid::defense::{
    build_aggregator, coordinate_median, dnc, geometric_median, multi_krum, trimmed_mean, Aggregate,
    AggregatorParams, DncParams, GeometricMedian, AGGREGATORS,
};
use fedmid::federation::RoundContext;
use fedmid::fedmid::{client_distance_matrices, min_max, normality_scores, score_updates, ScoreBoard};
use fedmid::model::{Architecture, Layout, Model, ParamVector};
use fedmid::rng::SimRng;
use fedmid::tensor::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

fn flat(rows: &[Vec<f32>]) -> Vec<ParamVector> {
    let layout = Arc::new(Layout::flat(rows[0].len()));
    rows.iter()
        .map(|r| ParamVector::new(layout.clone(), r.clone()).unwrap())
        .collect()
}

fn small_arch() -> Arc<Architecture> {
    Architecture::mlp(&[4], [6, 5], 3, false).unwrap()
}

fn round_context(seed: u64, n: usize) -> RoundContext {
    let arch = small_arch();
    let mut rng = SimRng::seed_from_u64(seed);
    let global = Model::init(arch.clone(), &mut rng).flatten_params();
    let d = global.len();
    let updates: Vec<ParamVector> = (0..n)
        .map(|_| global.with_values((0..d).map(|_| rng.random_range(-0.1f32..0.1)).collect()).unwrap())
        .collect();
    let server = global.with_values((0..d).map(|_| rng.random_range(-0.1f32..0.1)).collect()).unwrap();
    let mut ids: Vec<usize> = (0..20).collect();
    ids.shuffle(&mut rng);
    ids.truncate(n);
    RoundContext {
        round: 3,
        client_ids: ids,
        arch,
        global,
        updates,
        dataset_sizes: (0..n).map(|_| rng.random_range(5..50)).collect(),
        seed: seed ^ 0xABCD,
        server_update: Some(server),
    }
}

fn permuted(ctx: &RoundContext, perm: &[usize]) -> RoundContext {
    let mut p = ctx.clone();
    p.client_ids = perm.iter().map(|&i| ctx.client_ids[i]).collect();
    p.updates = perm.iter().map(|&i| ctx.updates[i].clone()).collect();
    p.dataset_sizes = perm.iter().map(|&i| ctx.dataset_sizes[i]).collect();
    p
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn aggregators_are_permutation_equivariant(seed in 0u64..10_000, n in 4usize..9) {
        let ctx = round_context(seed, n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut SimRng::seed_from_u64(seed + 1));
        let pctx = permuted(&ctx, &perm);
        let params = AggregatorParams { num_clients: 20, ..Default::default() };
        for name in AGGREGATORS {
            let a = build_aggregator(name, &params).unwrap().aggregate(&ctx).unwrap().aggregate;
            let b = build_aggregator(name, &params).unwrap().aggregate(&pctx).unwrap().aggregate;
            match (a, b) {
                (Aggregate::Update(x), Aggregate::Update(y)) => {
                    prop_assert!(x.same_layout(&y), "{name}");
                    for (u, v) in x.as_slice().iter().zip(y.as_slice()) {
                        prop_assert!(u.is_finite());
                        prop_assert!(close(*u as f64, *v as f64, 1e-4), "{name}: {u} vs {v}");
                    }
                }
                (Aggregate::Weights(x), Aggregate::Weights(y))
                | (Aggregate::RawWeights(x), Aggregate::RawWeights(y)) => {
                    for (k, &i) in perm.iter().enumerate() {
                        prop_assert!(x[i] >= 0.0);
                        prop_assert!(close(y[k], x[i], 1e-9), "{name}: weight {} vs {}", y[k], x[i]);
                    }
                }
                _ => prop_assert!(false, "{name}: output kind changed under permutation"),
            }
        }
    }

    #[test]
    fn normalized_normality_ignores_layer_scale(
        anomalies in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 3), 2..12),
        layer in 0usize..3,
        scale in 1e-3f64..1e3,
        shift in -5.0f64..5.0,
    ) {
        let (_, base) = normality_scores(&anomalies).unwrap();
        let scaled: Vec<Vec<f64>> = anomalies
            .iter()
            .map(|a| a.iter().enumerate().map(|(l, v)| if l == layer { v * scale + shift } else { *v }).collect())
            .collect();
        let (_, got) = normality_scores(&scaled).unwrap();
        for (x, y) in base.iter().zip(&got) {
            prop_assert!((0.0..=1.0).contains(y));
            prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn min_max_is_affine_invariant(values in prop::collection::vec(-100.0f64..100.0, 1..20), a in 0.01f64..100.0, b in -50.0f64..50.0) {
        let base = min_max(&values);
        let mapped: Vec<f64> = values.iter().map(|v| a * v + b).collect();
        for (x, y) in base.iter().zip(min_max(&mapped)) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn fedmid_weight_bounds(anomalies in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 1..4), 2..15)) {
        let layers = anomalies.iter().map(|a| a.len()).min().unwrap();
        let anomalies: Vec<Vec<f64>> = anomalies.into_iter().map(|mut a| { a.truncate(layers); a }).collect();
        let n = anomalies.len();
        let board = ScoreBoard::from_anomalies((0..n).collect(), (0..layers).collect(), anomalies).unwrap();
        for i in 0..n {
            prop_assert!((0.0..=1.0).contains(&board.normalized[i]));
            prop_assert!((0.0..=1.0).contains(&board.weights[i]));
            prop_assert!((0.0..=1.0).contains(&board.aggregation[i]));
        }
        prop_assert!(board.aggregation.iter().filter(|&&w| w > 0.0).count() >= n.div_ceil(2));
        prop_assert!(board.aggregation.iter().any(|&w| w == 0.0));
    }

    #[test]
    fn weiszfeld_objective_never_increases(seed in 0u64..10_000, n in 3usize..12, d in 1usize..20) {
        let mut rng = SimRng::seed_from_u64(seed);
        let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-3.0f32..3.0)).collect()).collect();
        let (_, trace) = geometric_median(&flat(&rows), &GeometricMedian::default()).unwrap();
        for w in trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn lie_is_affine_in_z(seed in 0u64..10_000, z1 in -4.0f64..4.0, z2 in -4.0f64..4.0) {
        let mut rng = SimRng::seed_from_u64(seed);
        let rows: Vec<Vec<f32>> = (0..5).map(|_| (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
        let (m, s) = benign_statistics(&flat(&rows)).unwrap();
        let at = |z| lie_calibrate(&m, &s, z).unwrap();
        let (a, b, c, zero) = (at(z1), at(z2), at(z1 + z2), at(0.0));
        for j in 0..8 {
            let lhs = a.as_slice()[j] as f64 + b.as_slice()[j] as f64 - 2.0 * zero.as_slice()[j] as f64;
            let rhs = c.as_slice()[j] as f64 - zero.as_slice()[j] as f64;
            prop_assert!((lhs - rhs).abs() < 1e-5, "{lhs} vs {rhs}");
            prop_assert!((rhs - (z1 + z2) * s.as_slice()[j] as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn poisoning_touches_exactly_floor_gamma_n(seed in 0u64..10_000, n in 1usize..60, ratio in 0.01f64..1.0, targeted: bool) {
        let side = 6;
        let inputs: Vec<f32> = (0..n * side * side).map(|i| ((i * 7919) % 13) as f32 * 0.05).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let clean = Dataset::new(vec![1, side, side], inputs, labels, 4).unwrap();
        let mut rng = SimRng::seed_from_u64(seed);
        let trigger = TriggerPatch::checkerboard(3, 1.0, 2);
        let poisoned = if targeted {
            poison_targeted(&clean, ratio, &trigger, &mut rng).unwrap()
        } else {
            poison_untargeted(&clean, ratio, &mut rng).unwrap()
        };
        let expected = ((ratio * n as f64).floor() as usize).max(1);
        let mut touched = 0;
        for i in 0..n {
            let same_input = clean.input(i) == poisoned.input(i);
            let same_label = clean.labels()[i] == poisoned.labels()[i];
            if targeted {
                let mut stamped = clean.input(i).to_vec();
                trigger.stamp(&mut stamped, &[1, side, side]).unwrap();
                if stamped.as_slice() == poisoned.input(i) && poisoned.labels()[i] == 2 && !(same_input && same_label) {
                    touched += 1;
                } else {
                    prop_assert!(same_input && same_label);
                }
            } else {
                prop_assert!(same_input);
                if !same_label {
                    touched += 1;
                }
            }
        }
        if targeted {
            // A sample already stamped and in the target class is indistinguishable.
            prop_assert!(touched <= expected);
        } else {
            prop_assert_eq!(touched, expected);
        }
    }

    #[test]
    fn breakdown_stays_within_twice_benign_box(seed in 0u64..10_000, n in 5usize..15, d in 2usize..12) {
        let mut rng = SimRng::seed_from_u64(seed);
        let bad = n / 5;
        let mut rows: Vec<Vec<f32>> = (0..n - bad).map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
        let benign_norm = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f32>().sqrt()).fold(0.0, f32::max);
        let dir: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let dn = dir.iter().map(|v| v * v).sum::<f32>().sqrt();
        let outlier: Vec<f32> = dir.iter().map(|v| v / dn * 100.0 * benign_norm).collect();
        let (lo, hi): (Vec<f32>, Vec<f32>) = (0..d)
            .map(|j| rows.iter().map(|r| r[j]).fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v))))
            .unzip();
        rows.extend(std::iter::repeat_n(outlier, bad));
        let u = flat(&rows);
        let outputs = vec![
            ("median", coordinate_median(&u).unwrap()),
            ("trimmed_mean", trimmed_mean(&u, bad).unwrap()),
            ("multi_krum", multi_krum(&u, bad, n - bad).unwrap().0),
            ("rfa", geometric_median(&u, &GeometricMedian::default()).unwrap().0),
            (
                "dnc",
                dnc(&u, &DncParams { iters: 1, filter: 1.0, sub_dim: 10_000, n_mal: bad }, &mut SimRng::seed_from_u64(seed))
                    .unwrap()
                    .0,
            ),
        ];
        for (name, out) in outputs {
            for j in 0..d {
                let (c, half) = ((lo[j] + hi[j]) / 2.0, (hi[j] - lo[j]) / 2.0);
                let v = out.as_slice()[j];
                prop_assert!((v - c).abs() <= 2.0 * half + 1e-5, "{name}[{j}] = {v} outside 2x box [{}, {}]", lo[j], hi[j]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn fedmid_ignores_probe_sample_order(seed in 0u64..10_000) {
        let ctx = round_context(seed, 6);
        let mut rng = SimRng::seed_from_u64(seed);
        let m = 24;
        let probe: Vec<f32> = (0..m * 4).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<f32> = order.iter().flat_map(|&k| probe[k * 4..(k + 1) * 4].to_vec()).collect();
        let a = Tensor::new(vec![m, 4], probe).unwrap();
        let b = Tensor::new(vec![m, 4], shuffled).unwrap();
        // Distance matrices are permuted exactly.
        for u in &ctx.updates {
            let ma = client_distance_matrices(&ctx.arch, &ctx.global, u, &a, &[0, 1, 2]).unwrap();
            let mb = client_distance_matrices(&ctx.arch, &ctx.global, u, &b, &[0, 1, 2]).unwrap();
            for (x, y) in ma.iter().zip(&mb) {
                for (k1, &p1) in order.iter().enumerate() {
                    for (k2, &p2) in order.iter().enumerate() {
                        prop_assert_eq!(y.get(k1, k2), x.get(p1, p2));
                    }
                }
            }
        }
        // Downstream scores only differ by summation order.
        let sa = score_updates(&ctx.arch, &ctx.global, &ctx.updates, &ctx.client_ids, &a, None).unwrap();
        let sb = score_updates(&ctx.arch, &ctx.global, &ctx.updates, &ctx.client_ids, &b, None).unwrap();
        for (x, y) in sa.anomaly.iter().flatten().zip(sb.anomaly.iter().flatten()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-3), "{x} vs {y}");
        }
        for (x, y) in sa.raw_weights.iter().zip(&sb.raw_weights) {
            prop_assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
        prop_assert_eq!(sa.weights.iter().map(|w| *w > 0.0).collect::<Vec<_>>(), sb.weights.iter().map(|w| *w > 0.0).collect::<Vec<_>>());
        for (x, y) in sa.aggregation.iter().zip(&sb.aggregation) {
            prop_assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
    }
}
