//! Property tests over the numerical invariants.

use proptest::prelude::*;

use tpn_core::losses::symmetric_kl;
use tpn_core::proto::{
    compute_prototypes, pseudo_label, supervised_loss, DomainTag, LabeledSet, ScoreDistribution,
};
use tpn_core::tape::Tape;
use tpn_core::tensor::Tensor;

fn distribution(classes: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0..1.0f64, classes).prop_map(|raw| {
        let s: f64 = raw.iter().sum();
        if s == 0.0 {
            vec![1.0 / raw.len() as f64; raw.len()]
        } else {
            raw.into_iter().map(|v| v / s).collect()
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_are_stochastic(
        rows in 1..6usize,
        cols in 1..8usize,
        seed in 0..1000u64,
    ) {
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| ((i as f64 + seed as f64) * 0.61).sin() * 40.0)
            .collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(rows, cols, data).unwrap());
        let s = tape.softmax_last(x).unwrap();
        let out = tape.value(s);
        for r in 0..rows {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "row sums to {}", sum);
        }
    }

    #[test]
    fn symmetric_kl_is_symmetric_and_nonnegative(
        p in distribution(5),
        q in distribution(5),
    ) {
        let a = symmetric_kl(&p, &q).unwrap();
        let b = symmetric_kl(&q, &p).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert!(a >= 0.0);
        prop_assert!(a.is_finite());
    }

    #[test]
    fn kl_of_identical_distributions_is_zero(p in distribution(6)) {
        prop_assert_eq!(symmetric_kl(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn raising_the_threshold_shrinks_the_assignment_set(
        rows in proptest::collection::vec(distribution(4), 1..30),
        lo in 0.05..0.9f64,
        gap in 0.01..0.5f64,
    ) {
        let hi = (lo + gap).min(1.0);
        let scores = ScoreDistribution::new(Tensor::from_rows(&rows).unwrap()).unwrap();
        let loose = pseudo_label(&scores, lo).unwrap();
        let tight = pseudo_label(&scores, hi).unwrap();
        prop_assert!(tight.assignments.len() <= loose.assignments.len());
        for a in &tight.assignments {
            prop_assert!(loose.assignments.contains(a), "{:?} appeared only at the higher threshold", a);
        }
    }

    #[test]
    fn supervised_loss_is_nonnegative_and_zero_only_at_certainty(
        rows in proptest::collection::vec(distribution(3), 1..20),
    ) {
        let labels: Vec<usize> = (0..rows.len()).map(|i| i % 3).collect();
        let all_certain = rows.iter().zip(&labels).all(|(r, &y)| r[y] == 1.0);
        let scores = ScoreDistribution::new(Tensor::from_rows(&rows).unwrap()).unwrap();
        let loss = supervised_loss(&scores, &labels).unwrap();
        prop_assert!(loss >= 0.0);
        if all_certain {
            prop_assert_eq!(loss, 0.0);
        } else {
            prop_assert!(loss > 0.0);
        }
    }

    #[test]
    fn prototypes_match_a_direct_mean(
        rows in proptest::collection::vec(proptest::collection::vec(-3.0..3.0f64, 3), 1..40),
        seed in 0..100u64,
    ) {
        let classes = 4usize;
        let labels: Vec<usize> = (0..rows.len())
            .map(|i| ((i as u64 * 7 + seed) % classes as u64) as usize)
            .collect();
        let set = LabeledSet::new(
            Tensor::from_rows(&rows).unwrap(),
            labels.clone(),
            DomainTag::Source,
        )
        .unwrap();
        let protos = compute_prototypes(&set, classes).unwrap();
        for c in 0..classes {
            let members: Vec<&Vec<f64>> = rows
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(r, _)| r)
                .collect();
            prop_assert_eq!(protos.valid[c], !members.is_empty());
            for d in 0..3 {
                if members.is_empty() {
                    continue;
                }
                let mean: f64 =
                    members.iter().map(|r| r[d]).sum::<f64>() / members.len() as f64;
                prop_assert!((protos.centroids.row(c)[d] - mean).abs() <= 1e-9);
            }
        }
    }
}
