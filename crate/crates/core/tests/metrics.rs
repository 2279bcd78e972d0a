use gvcl::metrics::{acc, bwt, calibration_bins, delta_acc, ece, fwt, net, ResultMatrix};
use gvcl::verify;
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = ResultMatrix> {
    (1usize..7).prop_flat_map(|t| {
        let rows: Vec<_> = (0..t).map(|i| prop::collection::vec(0.0..=1.0f64, i + 1)).collect();
        (rows, prop::collection::vec(0.0..=1.0f64, t))
            .prop_map(|(rows, ind)| ResultMatrix::new(rows, Some(ind)).unwrap())
    })
}

proptest! {
    #[test]
    fn summaries_stay_in_range(r in matrix()) {
        let a = acc(&r).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((-1.0..=1.0).contains(&bwt(&r).unwrap()));
        prop_assert!((-1.0..=1.0).contains(&fwt(&r).unwrap()));
        prop_assert!((net(&r).unwrap() - fwt(&r).unwrap() - bwt(&r).unwrap()).abs() < 1e-15);
        prop_assert_eq!(delta_acc(&r, r.tasks()).unwrap(), 0.0);
    }

    #[test]
    fn no_forgetting_means_zero_bwt(diag in prop::collection::vec(0.0..=1.0f64, 1..7)) {
        let rows: Vec<Vec<f64>> = (0..diag.len()).map(|i| diag[..=i].to_vec()).collect();
        let r = ResultMatrix::new(rows, None).unwrap();
        prop_assert_eq!(bwt(&r).unwrap(), 0.0);
        prop_assert!(fwt(&r).is_err());
    }

    #[test]
    fn ece_is_bounded_and_bins_partition(
        pairs in prop::collection::vec((0.0..=1.0f64, any::<bool>()), 1..200), bins in 1usize..30
    ) {
        let (conf, correct): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        let e = ece(&conf, &correct, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        let total: usize = calibration_bins(&conf, &correct, bins).unwrap().iter().map(|b| b.count).sum();
        prop_assert_eq!(total, conf.len());
    }
}

#[test]
fn worked_example() {
    let r = ResultMatrix::new(vec![vec![0.90], vec![0.80, 0.85]], Some(vec![0.88, 0.84])).unwrap();
    for (got, want) in [(acc(&r), 0.825), (bwt(&r), -0.05), (fwt(&r), 0.015), (net(&r), -0.035)] {
        assert!((got.unwrap() - want).abs() < 1e-12);
    }
    // accuracy on task 1 right after it minus at the end
    assert!((delta_acc(&r, 1).unwrap() - 0.10).abs() < 1e-12);
}

#[test]
fn ece_edge_cases() {
    assert_eq!(ece(&[1.0; 3], &[true; 3], 15).unwrap(), 0.0);
    assert_eq!(ece(&[1.0; 3], &[false; 3], 15).unwrap(), 1.0);
    assert_eq!(ece(&[0.0; 3], &[false; 3], 15).unwrap(), 0.0);
    assert_eq!(ece(&[0.5, 0.5], &[true, false], 15).unwrap(), 0.0);
    assert!(ece(&[], &[], 15).is_err());
    assert!(ece(&[0.5], &[true, false], 15).is_err());
    assert!(ece(&[1.5], &[true], 15).is_err());
    assert!(ResultMatrix::new(vec![vec![0.9, 0.8]], None).is_err());
}

#[test]
fn metrics_ignore_task_labels_and_ece_tracks_calibration() {
    verify::metric_relabelling(200).unwrap();
    verify::ece_range_and_calibration().unwrap();
}
