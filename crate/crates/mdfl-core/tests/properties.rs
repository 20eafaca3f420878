//! Property tests over the public core API.

use std::collections::BTreeSet;

use proptest::prelude::*;

use mdfl_core::data::{
    partition, synthesize, train_test_split, PartitionConfig, SynthConfig,
};
use mdfl_core::heterogeneity::{sliced_wasserstein, wasserstein_1d, EmpiricalCloud};
use mdfl_core::model::{
    batch_from_rows, forward, init_model, loss_and_grads, prox_grad, weighted_average,
    Activation, ArchSpec,
};

fn small_arch() -> impl Strategy<Value = ArchSpec> {
    (1usize..5, proptest::collection::vec(1usize..6, 0..3), 2usize..5, prop_oneof![
        Just(Activation::Relu),
        Just(Activation::Tanh)
    ])
        .prop_map(|(input, hidden, classes, activation)| {
            ArchSpec::new(input, hidden, classes, activation).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_rows_are_distributions(arch in small_arch(), seed in 0u64..1000, rows in 1usize..9) {
        let m = init_model(&arch, seed).unwrap();
        let features: Vec<Vec<f64>> = (0..rows)
            .map(|r| (0..arch.input_dim).map(|i| ((seed as f64) + (r * arch.input_dim + i) as f64 * 0.37).sin()).collect())
            .collect();
        let row_refs: Vec<(&[f64], usize)> = features
            .iter()
            .enumerate()
            .map(|(r, f)| (f.as_slice(), r % arch.num_classes))
            .collect();
        let batch = batch_from_rows(&row_refs, arch.input_dim).unwrap();
        let probs = forward(&m, &batch).unwrap();
        for r in 0..probs.rows() {
            let row = probs.row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }

        let (mean, per, grads) = loss_and_grads(&m, &batch).unwrap();
        let recomputed = per.iter().sum::<f64>() / per.len() as f64;
        prop_assert!((mean - recomputed).abs() < 1e-12);
        prop_assert_eq!(grads.len(), m.param_count());
    }

    #[test]
    fn prox_grad_lambda_zero_is_bitwise(arch in small_arch(), sa in 0u64..500, sb in 0u64..500) {
        let v = init_model(&arch, sa).unwrap();
        let w = init_model(&arch, sb).unwrap();
        let grads: Vec<f64> = (0..v.param_count()).map(|i| (i as f64 * 0.73).cos()).collect();
        let out = prox_grad(&grads, &v, &w, 0.0).unwrap();
        prop_assert_eq!(
            out.iter().map(|g| g.to_bits()).collect::<Vec<_>>(),
            grads.iter().map(|g| g.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn weighted_average_stays_in_convex_hull(seed in 0u64..300, counts in proptest::collection::vec(1u64..20, 1..6)) {
        let arch = ArchSpec::new(2, vec![3], 2, Activation::Relu).unwrap();
        let entries: Vec<_> = counts
            .iter()
            .enumerate()
            .map(|(i, &n)| (init_model(&arch, seed + i as u64).unwrap(), n))
            .collect();
        let avg = weighted_average(&entries).unwrap();
        for i in 0..avg.param_count() {
            let lo = entries.iter().map(|(w, _)| w.params()[i]).fold(f64::INFINITY, f64::min);
            let hi = entries.iter().map(|(w, _)| w.params()[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(avg.params()[i] >= lo - 1e-12 && avg.params()[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn w1_is_a_symmetric_premetric(
        a in proptest::collection::vec(-50.0f64..50.0, 1..40),
        b in proptest::collection::vec(-50.0f64..50.0, 1..40),
    ) {
        let ab = wasserstein_1d(&a, &b).unwrap();
        let ba = wasserstein_1d(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(wasserstein_1d(&a, &a).unwrap() < 1e-12);
    }

    #[test]
    fn swd_translation_monotone(step in 0.1f64..2.0, seed in 0u64..100) {
        let pts: Vec<f64> = (0..12).map(|i| ((seed + i) as f64 * 0.61).sin() * 2.0).collect();
        let base = EmpiricalCloud::new(pts.clone(), 2).unwrap();
        let mut last = 0.0;
        for k in 1..=3 {
            let t = step * k as f64;
            let shifted: Vec<f64> = pts
                .iter()
                .enumerate()
                .map(|(i, &v)| if i % 2 == 0 { v + t } else { v })
                .collect();
            let cloud = EmpiricalCloud::new(shifted, 2).unwrap();
            let d = sliced_wasserstein(&base, &cloud, 128, 17).unwrap();
            prop_assert!(d <= t + 1e-9);
            prop_assert!(d + 1e-9 >= last);
            last = d;
        }
    }

    #[test]
    fn partition_conserves_windows(
        users in 2usize..5,
        devices in 1usize..4,
        classes in 2usize..5,
        multiple in 2usize..4,
        extra_users in 0usize..3,
    ) {
        let windows_per_class = multiple + 3;
        let ds = synthesize(&SynthConfig {
            num_users: users,
            devices_per_user: devices,
            num_classes: classes,
            windows_per_class,
            channels: 1,
            window_len: 2,
            seed: 42,
            ..SynthConfig::default()
        }).unwrap();
        let target = users * multiple + extra_users.min(users - 1);
        let out = partition(&ds, &PartitionConfig { target_users: target, seed: 0 }).unwrap();

        prop_assert_eq!(out.users.len(), target);
        prop_assert_eq!(out.total_windows(), ds.total_windows());
        out.validate().unwrap();

        // Same global multiset of (features, label).
        let key = |d: &mdfl_core::data::MultiDeviceDataset| {
            let mut all: Vec<(Vec<u64>, usize)> = d
                .iter_devices()
                .flat_map(|dev| dev.windows.iter())
                .map(|w| (w.features.iter().map(|f| f.to_bits()).collect(), w.label))
                .collect();
            all.sort();
            all
        };
        prop_assert_eq!(key(&ds), key(&out));

        // Device-set preservation: per output user, every class present on
        // one device is present on all of them with the same count.
        for user in &out.users {
            let per_dev: Vec<Vec<(usize, usize)>> = user
                .devices
                .iter()
                .map(|d| {
                    let mut m = std::collections::BTreeMap::new();
                    for w in &d.windows {
                        *m.entry(w.label).or_insert(0usize) += 1;
                    }
                    m.into_iter().collect()
                })
                .collect();
            prop_assert!(per_dev.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn split_partitions_windows_without_overlap(
        users in 1usize..4,
        devices in 1usize..3,
        windows_per_class in 2usize..6,
        frac in 0.2f64..0.8,
    ) {
        let ds = synthesize(&SynthConfig {
            num_users: users,
            devices_per_user: devices,
            num_classes: 2,
            windows_per_class,
            channels: 1,
            window_len: 2,
            seed: 9,
            ..SynthConfig::default()
        }).unwrap();
        let (train, test) = train_test_split(&ds, frac).unwrap();
        for ((full, tr), te) in ds
            .iter_devices()
            .zip(train.iter_devices())
            .zip(test.iter_devices())
        {
            prop_assert_eq!(tr.windows.len() + te.windows.len(), full.windows.len());
            let tr_ts: BTreeSet<usize> = tr.windows.iter().map(|w| w.timestamp_index).collect();
            let te_ts: BTreeSet<usize> = te.windows.iter().map(|w| w.timestamp_index).collect();
            prop_assert!(tr_ts.is_disjoint(&te_ts));
            prop_assert!(!tr.windows.is_empty());
            prop_assert!(!te.windows.is_empty());
            // Train strictly precedes test in time.
            let max_train = tr.windows.iter().map(|w| w.timestamp_index).max().unwrap();
            let min_test = te.windows.iter().map(|w| w.timestamp_index).min().unwrap();
            prop_assert!(max_train < min_test);
        }
    }
}
