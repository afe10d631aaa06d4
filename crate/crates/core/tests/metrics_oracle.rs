//! Fairness metrics against straightforward counting oracles.

use proptest::prelude::*;
use rnf_core::metrics::{accuracy, confidence_gap, demographic_parity, equalized_odds, Measure};

fn count(preds: &[usize], labels: &[usize], groups: &[usize], g: usize, y: Option<usize>) -> (f64, f64) {
    let mut n = 0.0;
    let mut pos = 0.0;
    for i in 0..preds.len() {
        if groups[i] == g && y.is_none_or(|y| labels[i] == y) {
            n += 1.0;
            if preds[i] == 1 {
                pos += 1.0;
            }
        }
    }
    (n, pos)
}

fn instance() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, Vec<usize>, Vec<f64>)> {
    (1usize..=100).prop_flat_map(|n| {
        (
            prop::collection::vec(0usize..2, n),
            prop::collection::vec(0usize..2, n),
            prop::collection::vec(0usize..2, n),
            prop::collection::vec(0.0f64..=1.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_equal_counting_oracle((preds, labels, groups, conf) in instance()) {
        let hits = preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
        prop_assert_eq!(accuracy(&preds, &labels).unwrap(), hits as f64 / preds.len() as f64);

        let (n0, p0) = count(&preds, &labels, &groups, 0, None);
        let (n1, p1) = count(&preds, &labels, &groups, 1, None);
        match demographic_parity(&preds, &groups) {
            Err(_) => prop_assert!(n0 == 0.0 || n1 == 0.0),
            Ok(Measure::Undefined(_)) => prop_assert_eq!(p1, 0.0),
            Ok(Measure::Value(v)) => prop_assert_eq!(v, (p0 / n0) / (p1 / n1)),
        }

        let cells: Vec<(f64, f64)> = [(0, 1), (1, 1), (0, 0), (1, 0)]
            .iter()
            .map(|&(g, y)| count(&preds, &labels, &groups, g, Some(y)))
            .collect();
        match equalized_odds(&preds, &labels, &groups).unwrap() {
            Measure::Undefined(_) => prop_assert!(cells.iter().any(|c| c.0 == 0.0)),
            Measure::Value(v) => {
                let r = |k: usize| cells[k].1 / cells[k].0;
                prop_assert_eq!(v, (r(0) - r(1)) + (r(2) - r(3)));
            }
        }

        let gap = confidence_gap(&conf, &labels, &groups).unwrap();
        let mean = |g: usize, y: usize| {
            let v: Vec<f64> = (0..conf.len()).filter(|&i| groups[i] == g && labels[i] == y).map(|i| conf[i]).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        match (mean(1, 1), mean(0, 1)) {
            (Some(p), Some(u)) => prop_assert_eq!(gap.gap_desired.value(), Some(p - u)),
            _ => prop_assert!(!gap.gap_desired.is_defined()),
        }
        match (mean(0, 0), mean(1, 0)) {
            (Some(u), Some(p)) => prop_assert_eq!(gap.gap_undesired.value(), Some((1.0 - u) - (1.0 - p))),
            _ => prop_assert!(!gap.gap_undesired.is_defined()),
        }
    }

    #[test]
    fn perfect_predictions_have_zero_eo((labels, groups) in (4usize..=100).prop_flat_map(|n| (prop::collection::vec(0usize..2, n), prop::collection::vec(0usize..2, n)))) {
        if let Measure::Value(v) = equalized_odds(&labels, &labels, &groups).unwrap() {
            prop_assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn constant_favorable_predictions_have_unit_dp(groups in prop::collection::vec(0usize..2, 2..=100)) {
        prop_assume!(groups.contains(&0) && groups.contains(&1));
        let preds = vec![1; groups.len()];
        prop_assert_eq!(demographic_parity(&preds, &groups).unwrap(), Measure::Value(1.0));
    }

    #[test]
    fn swapping_groups_negates_eo((preds, labels, groups, _) in instance()) {
        let swapped: Vec<usize> = groups.iter().map(|g| 1 - g).collect();
        if let (Measure::Value(a), Measure::Value(b)) = (equalized_odds(&preds, &labels, &groups).unwrap(), equalized_odds(&preds, &labels, &swapped).unwrap()) {
            prop_assert_eq!(a, -b);
        }
    }
}
