mod common;

use proptest::prelude::*;
use synthvlp::metrics::{arand, dice_slices, voi, ContingencyTable, LogBase};

use common::{canonical_labelings, exhaustive_dice_sweep, exhaustive_instance_sweep};

#[test]
fn small_grids_match_brute_force() {
    let s = exhaustive_instance_sweep(&[1, 2, 4]);
    assert_eq!(s.violations, 0, "{s:?}");
    assert!(s.worst_entropy_error < 1e-12);
    let d = exhaustive_dice_sweep(&[1, 2, 4]);
    assert_eq!(d.violations, 0, "{d:?}");
}

#[test]
fn canonical_enumeration_counts_set_partitions() {
    // Stirling numbers S(8,1) + S(8,2) + S(8,3).
    assert_eq!(canonical_labelings(8, 3).len(), 1 + 127 + 966);
    assert_eq!(canonical_labelings(4, 3).len(), 1 + 7 + 6);
}

fn labeling(max_n: usize, k: u32) -> impl Strategy<Value = (Vec<u32>, Vec<u32>)> {
    (2..max_n).prop_flat_map(move |n| {
        (
            proptest::collection::vec(0..k, n),
            proptest::collection::vec(0..k, n),
        )
    })
}

fn relabel(v: &[u32], perm: &[u32]) -> Vec<u32> {
    v.iter().map(|&l| perm[l as usize]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn voi_and_arand_ignore_label_names(
        (a, b) in labeling(64, 5),
        perm_b in Just((0..5u32).collect::<Vec<_>>()).prop_shuffle(),
        perm_a_fg in Just((1..5u32).collect::<Vec<_>>()).prop_shuffle(),
        exclude in any::<bool>(),
    ) {
        let mut perm_a = vec![0];
        perm_a.extend(perm_a_fg);
        let t = ContingencyTable::from_slices(&a, &b, exclude).unwrap();
        let u = ContingencyTable::from_slices(&relabel(&a, &perm_a), &relabel(&b, &perm_b), exclude).unwrap();
        prop_assume!(t.total() >= 2);
        let (v, w) = (voi(&t, LogBase::Nats).unwrap(), voi(&u, LogBase::Nats).unwrap());
        prop_assert!((v.split - w.split).abs() < 1e-12);
        prop_assert!((v.merge - w.merge).abs() < 1e-12);
        prop_assert!((arand(&t).unwrap() - arand(&u).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn voi_vanishes_only_on_identical_partitions((a, b) in labeling(32, 4)) {
        let t = ContingencyTable::from_slices(&a, &b, false).unwrap();
        let v = voi(&t, LogBase::Nats).unwrap();
        let same_partition = a.iter().zip(&b).all(|(&x, &y)| {
            a.iter().zip(&b).all(|(&x2, &y2)| (x == x2) == (y == y2))
        });
        prop_assert_eq!(v.total == 0.0, same_partition);
        let s = ContingencyTable::from_slices(&a, &a, false).unwrap();
        prop_assert_eq!(voi(&s, LogBase::Nats).unwrap().total, 0.0);
        prop_assert_eq!(arand(&s).unwrap(), 0.0);
    }

    #[test]
    fn dice_is_symmetric_and_bounded((p, g) in labeling(32, 3)) {
        let d = dice_slices(&p, &g, &[0, 1, 2]).unwrap();
        let e = dice_slices(&g, &p, &[0, 1, 2]).unwrap();
        prop_assert_eq!(&d, &e);
        prop_assert!(d.per_class.values().all(|&s| (0.0..=1.0).contains(&s)));
        prop_assert_eq!(dice_slices(&g, &g, &[0, 1, 2]).unwrap().mean, 1.0);
    }

    #[test]
    fn chunked_tables_equal_single_pass((a, b) in labeling(64, 4), cut in 0.0f64..1.0, exclude in any::<bool>()) {
        let k = (cut * a.len() as f64) as usize;
        let mut t = ContingencyTable::new();
        t.accumulate(&a[..k], &b[..k], exclude);
        let mut rest = ContingencyTable::new();
        rest.accumulate(&a[k..], &b[k..], exclude);
        t.merge(&rest);
        prop_assert_eq!(t, ContingencyTable::from_slices(&a, &b, exclude).unwrap());
    }
}
