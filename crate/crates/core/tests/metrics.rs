use milbench::metrics::{aggregate, auc, aucpr, froc, froc_curve, FrocBag};
use proptest::prelude::*;

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut twice = 0u64;
    let (mut p, mut n) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] == 0 {
            n += 1;
            continue;
        }
        p += 1;
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] == 0 {
                twice += match si.partial_cmp(&sj).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice as f64 / (2 * p * n) as f64
}

fn enumerated_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut ts = scores.to_vec();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    let mut prev = 0.0;
    let mut ap = 0.0;
    for t in ts {
        let flagged: Vec<u8> = scores
            .iter()
            .zip(labels)
            .filter(|(s, _)| **s >= t)
            .map(|(_, l)| *l)
            .collect();
        let tp = flagged.iter().filter(|&&l| l == 1).count() as f64;
        ap += (tp / pos - prev) * tp / flagged.len() as f64;
        prev = tp / pos;
    }
    ap
}

/// Scores on a coarse integer grid (many ties) with both classes present.
fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=200)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0u32..50, n),
                prop::collection::vec(0u8..=1, n),
            )
        })
        .prop_map(|(s, mut l)| {
            l[0] = 1;
            l[1] = 0;
            (s.into_iter().map(f64::from).collect(), l)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn auc_matches_pairwise_counting((scores, labels) in scored_labels()) {
        prop_assert_eq!(auc(&scores, &labels).unwrap(), pairwise_auc(&scores, &labels));
    }

    #[test]
    fn auc_ignores_strictly_increasing_maps((scores, labels) in scored_labels()) {
        // Exact in f64: integer inputs below 50 stay far under 2^53.
        let mapped: Vec<f64> = scores.iter().map(|x| x * x * x + 7.0 * x - 3.0).collect();
        prop_assert_eq!(auc(&mapped, &labels).unwrap(), auc(&scores, &labels).unwrap());
    }

    #[test]
    fn aucpr_matches_threshold_enumeration((scores, labels) in scored_labels()) {
        let got = aucpr(&scores, &labels).unwrap();
        prop_assert!((got - enumerated_ap(&scores, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn froc_curve_is_monotone(
        bags in prop::collection::vec(
            prop::collection::vec((0u32..20, prop::option::weighted(0.2, 1u32..3)), 1..15),
            1..6,
        )
    ) {
        let mut bags: Vec<FrocBag> = bags
            .into_iter()
            .map(|inst| FrocBag {
                scores: inst.iter().map(|(s, _)| f64::from(*s) / 20.0).collect(),
                lesions: inst.iter().map(|(_, l)| *l).collect(),
            })
            .collect();
        bags[0].lesions[0] = Some(9);
        let curve = froc_curve(&bags).unwrap();
        prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn aggregate_mean_lies_in_interval(values in prop::collection::vec(0.0f64..1.0, 2..12)) {
        let a = aggregate(&values).unwrap();
        prop_assert!(a.ci_low <= a.mean && a.mean <= a.ci_high);
    }
}

#[test]
fn froc_matches_hand_enumeration() {
    // Operating points (fp/bag, sensitivity): (0, .5) (.5, .5) (1, .5)
    // (1, 1) (1.5, 1) (2, 1).
    let bags = vec![
        FrocBag {
            scores: vec![0.9, 0.8, 0.3],
            lesions: vec![Some(1), None, None],
        },
        FrocBag {
            scores: vec![0.7, 0.6, 0.2, 0.0],
            lesions: vec![None, Some(1), None, None],
        },
    ];
    assert_eq!(froc_curve(&bags).unwrap(), [0.5, 0.5, 1.0, 1.0, 1.0, 1.0]);
    assert!((froc(&bags).unwrap() - 5.0 / 6.0).abs() < 1e-15);
}

#[test]
fn five_run_interval_matches_t_table() {
    let runs = [0.80, 0.85, 0.78, 0.90, 0.82];
    let a = aggregate(&runs).unwrap();
    let mean = 4.15 / 5.0;
    let ss: f64 = runs.iter().map(|v| (v - mean) * (v - mean)).sum();
    let s = (ss / 4.0).sqrt();
    // Two-sided 95% quantile for 4 degrees of freedom.
    let t = 2.776_445_105_197_799;
    assert!((a.mean - mean).abs() < 1e-12);
    assert!((a.std - s).abs() < 1e-12);
    assert!((a.half_width() - t * s / 5f64.sqrt()).abs() < 1e-12);
    assert_eq!(a.n, 5);
}
