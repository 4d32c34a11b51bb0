mod common;

use common::oracles::{ap_oracle, best_ba_oracle, fuzz_case};
use common::rng;
use freqdetect::metrics::{accuracy, average_precision, calibrate_threshold, candidate_thresholds, Confusion};
use proptest::prelude::*;

#[test]
fn ap_matches_the_enumeration_oracle() {
    let mut r = rng("ap-fuzz");
    for _ in 0..100 {
        let (s, l) = fuzz_case(&mut r);
        assert_eq!(average_precision(&s, &l).unwrap(), ap_oracle(&s, &l), "{s:?} {l:?}");
    }
    let worked = average_precision(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap();
    assert_eq!(worked, ap_oracle(&[0.9, 0.8, 0.3], &[1, 0, 1]));
    assert!((worked - 5.0 / 6.0).abs() < 1e-15);
}

#[test]
fn calibration_matches_the_enumeration_oracle() {
    let mut r = rng("cal-fuzz");
    for _ in 0..100 {
        let (s, l) = fuzz_case(&mut r);
        let t = calibrate_threshold(&s, &l).unwrap();
        let ba = Confusion::at(&s, &l, t).balanced_accuracy();
        assert_eq!(ba, best_ba_oracle(&s, &l), "{s:?} {l:?}");
        let cands = candidate_thresholds(&s);
        assert!(cands.contains(&t));
        // ties go to the lowest candidate
        let first = cands.iter().find(|&&c| Confusion::at(&s, &l, c).balanced_accuracy() == ba).unwrap();
        assert_eq!(*first, t);
    }
}

#[test]
fn threshold_is_strict() {
    assert_eq!(accuracy(&[0.5, 0.5], &[1, 0], 0.5).unwrap(), 0.5);
    let c = Confusion::at(&[0.5, 0.6], &[1, 0], 0.5);
    assert_eq!((c.tp, c.fp, c.tn, c.fn_), (0, 1, 0, 1));
    assert_eq!(c.balanced_accuracy(), 0.0);
    assert!(average_precision(&[f64::NAN, 0.1], &[1, 0]).is_err());
}

#[test]
fn candidates_bracket_the_scores() {
    assert_eq!(candidate_thresholds(&[2.0, 1.0, 2.0, 4.0]), vec![0.0, 1.5, 3.0, 5.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ap_ignores_monotone_transforms(
        raw in prop::collection::vec((0u8..8, 0u8..=1), 2..30),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let mut labels: Vec<u8> = raw.iter().map(|r| r.1).collect();
        labels[0] = 1;
        let s: Vec<f64> = raw.iter().map(|r| f64::from(r.0)).collect();
        let base = average_precision(&s, &labels).unwrap();
        let affine: Vec<f64> = s.iter().map(|v| v * scale + shift).collect();
        let cubed: Vec<f64> = s.iter().map(|v| (v - 3.5).powi(3)).collect();
        prop_assert_eq!(average_precision(&affine, &labels).unwrap(), base);
        prop_assert_eq!(average_precision(&cubed, &labels).unwrap(), base);
        prop_assert!((0.0..=1.0).contains(&base));
    }
}
