use proptest::prelude::*;
use prunebench_core::data::{Dataset, DeviceDataset};
use prunebench_core::pruner::{apply_mask, retained_count, select_random, select_top_m};
use prunebench_core::Error;

/// `floor(rho * n)`, exact in integers when `rho` is a whole number of tenths.
fn expected_m(rho: f64, n: usize) -> usize {
    let tenths = (rho * 10.0).round();
    if tenths / 10.0 == rho {
        tenths as usize * n / 10
    } else {
        (rho * n as f64).floor() as usize
    }
}

/// Stable descending sort, then the first `floor(rho * n)` positions.
fn oracle(scores: &[f64], rho: f64) -> Vec<bool> {
    let m = expected_m(rho, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut mask = vec![false; scores.len()];
    for &i in &order[..m.min(scores.len())] {
        mask[i] = true;
    }
    mask
}

/// Score vectors with deliberate ties: few distinct values, or all equal.
fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(-1e3f64..1e3, 1..512),
        prop::collection::vec((0u8..4).prop_map(f64::from), 1..512),
        (1usize..512, -5.0f64..5.0).prop_map(|(n, v)| vec![v; n]),
    ]
}

fn rho() -> impl Strategy<Value = f64> {
    prop_oneof![(1u32..=10).prop_map(|k| k as f64 / 10.0), 0.001f64..=1.0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn agrees_with_sort_oracle(scores in scores(), rho in rho()) {
        let m = expected_m(rho, scores.len());
        prop_assert_eq!(retained_count(rho, scores.len()), m);
        match select_top_m(&scores, rho) {
            Ok(mask) => {
                prop_assert_eq!(mask.count(), m);
                prop_assert_eq!(mask.retained(), &oracle(&scores, rho)[..]);
            }
            Err(Error::EmptySelection { .. }) => prop_assert_eq!(m, 0),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn masks_nest_and_ignore_affine_maps(scores in scores()) {
        let shifted: Vec<f64> = scores.iter().map(|s| 3.0 * s + 7.0).collect();
        let mut previous: Option<Vec<bool>> = None;
        for k in 1..=10 {
            let rho = k as f64 / 10.0;
            let Ok(mask) = select_top_m(&scores, rho) else { continue };
            let moved = select_top_m(&shifted, rho).unwrap();
            prop_assert_eq!(moved.retained(), mask.retained());
            if let Some(prev) = &previous {
                prop_assert!(prev.iter().zip(mask.retained()).all(|(&a, &b)| !a || b));
            }
            previous = Some(mask.retained().to_vec());
        }
    }

    #[test]
    fn random_masks_have_exact_cardinality(n in 1usize..2000, rho in rho(), seed in any::<u64>()) {
        match select_random(n, rho, seed) {
            Ok(mask) => {
                prop_assert_eq!(mask.count(), expected_m(rho, n));
                prop_assert_eq!(select_random(n, rho, seed).unwrap(), mask);
            }
            Err(Error::EmptySelection { .. }) => prop_assert_eq!(expected_m(rho, n), 0),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }
}

#[test]
fn top_m_examples() {
    let mask = select_top_m(&[0.9, 0.1, 0.5, 0.5, 0.2], 0.4).unwrap();
    assert_eq!(mask.indices(), vec![0, 2]);
    assert_eq!(
        select_top_m(&[1.0; 10], 0.3).unwrap().indices(),
        vec![0, 1, 2]
    );
    assert_eq!(select_top_m(&[3.0, 1.0, 2.0], 1.0).unwrap().count(), 3);
}

#[test]
fn random_selection_is_uniform() {
    let trials = 10_000;
    let mut hits = [0usize; 10];
    for seed in 0..trials {
        for i in select_random(10, 0.3, seed).unwrap().indices() {
            hits[i] += 1;
        }
    }
    for (i, &h) in hits.iter().enumerate() {
        let freq = h as f64 / trials as f64;
        assert!((freq - 0.3).abs() <= 0.02, "index {i}: {freq}");
    }
}

#[test]
fn random_selection_depends_on_seed() {
    assert_ne!(
        select_random(1000, 0.5, 1).unwrap(),
        select_random(1000, 0.5, 2).unwrap()
    );
    assert_eq!(select_random(1000, 1.0, 1).unwrap().count(), 1000);
}

#[test]
fn applied_mask_keeps_order() {
    let data = Dataset::new(
        1,
        2,
        vec![10.0, 11.0, 12.0, 13.0, 14.0],
        vec![0, 1, 0, 1, 0],
    )
    .unwrap();
    let shard = DeviceDataset::new(3, data);
    let mask = select_top_m(&[0.9, 0.1, 0.5, 0.5, 0.2], 0.4).unwrap();
    let pruned = apply_mask(&shard, &mask).unwrap();
    assert_eq!(pruned.device_id, 3);
    assert_eq!(pruned.len(), 2);
    assert_eq!(pruned.features(0), &[10.0]);
    assert_eq!(pruned.features(1), &[12.0]);
    let single = apply_mask(
        &shard,
        &select_top_m(&[0.9, 0.1, 0.5, 0.5, 0.2], 0.2).unwrap(),
    )
    .unwrap();
    assert_eq!(single.features(0), &[10.0]);
}
