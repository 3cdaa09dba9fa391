//! Invariants of attacks and losses, checked over generated inputs.

mod common;

use common::*;
use curda::attacks::{label_free_attack, pgd_attack, project, AttackBudget, Norm};
use curda::evaluation::evaluate;
use curda::losses::{
    contrastive_loss, saa_contrastive_loss, trade_kl_from_logits, trade_kl_loss, AcceptedTarget, PairSet,
};
use curda::nn::softmax_rows;
use ndarray::{Array2, Array4};
use proptest::prelude::*;

fn budget(epsilon: f64, steps: usize, random_start: bool) -> AttackBudget {
    AttackBudget {
        norm: Norm::LInf,
        epsilon,
        step_size: (epsilon / 2.0).max(f64::MIN_POSITIVE),
        num_steps: steps,
        random_start,
    }
}

fn assert_contained(adv: &Array4<f32>, x: &Array4<f32>, epsilon: f64) {
    for (&a, &c) in adv.iter().zip(x) {
        let (a, c) = (f64::from(a), f64::from(c));
        assert!((a - c).abs() <= epsilon + 1e-7, "|{a} - {c}| exceeds {epsilon}");
        assert!((0.0..=1.0).contains(&a), "{a} outside [0, 1]");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn attacks_stay_in_the_epsilon_ball(
        seed in 0u64..1_000_000,
        epsilon in 0.0f64..0.5,
        steps in 1usize..4,
        random_start: bool,
        supervised: bool,
    ) {
        let (enc, clf, _) = tiny_models_of::<f32>(seed % 7);
        let x = images_f32(seed, 2, 16);
        let b = budget(epsilon, steps, random_start);
        let mut r = rng(seed);
        let adv = if supervised {
            pgd_attack(&enc, &clf, &x, Some(&[1, 3]), &b, &mut r).unwrap()
        } else {
            label_free_attack(&enc, &clf, &x, &b, &mut r).unwrap()
        };
        assert_contained(&adv, &x, epsilon);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn projection_is_contained_and_idempotent(
        z in proptest::collection::vec(-1.0f64..2.0, 12),
        x in proptest::collection::vec(0.0f64..=1.0, 12),
        epsilon in 0.0f64..0.6,
    ) {
        let z = Array4::from_shape_vec((1, 1, 3, 4), z).unwrap();
        let x = Array4::from_shape_vec((1, 1, 3, 4), x).unwrap();
        let once = project(&z, &x, epsilon);
        prop_assert_eq!(&once, &project(&once, &x, epsilon));
        for (&a, &c) in once.iter().zip(&x) {
            prop_assert!((a - c).abs() <= epsilon + 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn contrastive_matches_brute_force(
        feats in proptest::collection::vec(-4.0f64..4.0, 18),
        labels in proptest::collection::vec(0usize..3, 6),
        n in 0usize..=6,
        margin in 0.5f64..8.0,
    ) {
        let f = Array2::from_shape_vec((6, 3), feats).unwrap().slice(ndarray::s![..n, ..]).to_owned();
        let labels = &labels[..n];
        let out = contrastive_loss(&f, labels, margin, &PairSet::all_pairs(labels)).unwrap();
        let (mut total, mut count) = (0.0, 0usize);
        for i in 0..n {
            for j in 0..n {
                if i < j {
                    total += brute_pair(f.row(i).to_vec(), f.row(j).to_vec(), labels[i] == labels[j], margin);
                    count += 1;
                }
            }
        }
        let expected = if count == 0 { 0.0 } else { total / count as f64 };
        prop_assert!((out.value - expected).abs() <= 1e-9, "{} vs {}", out.value, expected);
        prop_assert_eq!(out.empty, count == 0);
    }

    #[test]
    fn saa_matches_brute_force(
        anchors in proptest::collection::vec(-4.0f64..4.0, 12),
        anchor_labels in proptest::collection::vec(0usize..3, 4),
        targets in proptest::collection::vec(-4.0f64..4.0, 24),
        accepted_mask in proptest::collection::vec(any::<bool>(), 4),
        classes in proptest::collection::vec(0usize..3, 4),
    ) {
        let a = Array2::from_shape_vec((4, 3), anchors).unwrap();
        let t = Array2::from_shape_vec((8, 3), targets).unwrap();
        let clean = t.slice(ndarray::s![..4, ..]).to_owned();
        let adv = t.slice(ndarray::s![4.., ..]).to_owned();
        let accepted: Vec<AcceptedTarget> = (0..4)
            .filter(|&r| accepted_mask[r])
            .map(|row| AcceptedTarget { row, class: classes[row] })
            .collect();
        let out = saa_contrastive_loss(&a, &anchor_labels, &clean, &adv, &accepted, 10.0).unwrap();
        let (mut clean_sum, mut adv_sum, mut count) = (0.0, 0.0, 0usize);
        for acc in &accepted {
            for (s, &ys) in anchor_labels.iter().enumerate() {
                let same = ys == acc.class;
                clean_sum += brute_pair(clean.row(acc.row).to_vec(), a.row(s).to_vec(), same, 10.0);
                adv_sum += brute_pair(adv.row(acc.row).to_vec(), a.row(s).to_vec(), same, 10.0);
                count += 1;
            }
        }
        let mean = |v: f64| if count == 0 { 0.0 } else { v / count as f64 };
        prop_assert!((out.clean_term - mean(clean_sum)).abs() <= 1e-9);
        prop_assert!((out.adv_term - mean(adv_sum)).abs() <= 1e-9);
        prop_assert!((out.value - mean(clean_sum) - mean(adv_sum)).abs() <= 1e-9);
        prop_assert_eq!(out.skipped, accepted.is_empty());
    }

    #[test]
    fn saa_clean_term_ignores_adversarial_features(
        targets in proptest::collection::vec(-4.0f64..4.0, 9),
        shift in proptest::collection::vec(-2.0f64..2.0, 9),
    ) {
        let anchors = matrix(1, 4, 3, 3.0);
        let clean = Array2::from_shape_vec((3, 3), targets).unwrap();
        let adv = matrix(2, 3, 3, 3.0);
        let moved = &adv + &Array2::from_shape_vec((3, 3), shift).unwrap();
        let accepted = [AcceptedTarget { row: 0, class: 1 }, AcceptedTarget { row: 2, class: 0 }];
        let labels = [0, 1, 2, 1];
        let base = saa_contrastive_loss(&anchors, &labels, &clean, &adv, &accepted, 10.0).unwrap();
        let other = saa_contrastive_loss(&anchors, &labels, &clean, &moved, &accepted, 10.0).unwrap();
        // the clean term and its gradient do not depend on the adversarial branch
        prop_assert_eq!(base.clean_term, other.clean_term);
        prop_assert_eq!(&base.grad_clean, &other.grad_clean);
    }

    #[test]
    fn kl_is_non_negative_and_zero_only_for_equal_distributions(
        a in proptest::collection::vec(-5.0f64..5.0, 8),
        b in proptest::collection::vec(-5.0f64..5.0, 8),
    ) {
        let la = Array2::from_shape_vec((2, 4), a).unwrap();
        let lb = Array2::from_shape_vec((2, 4), b).unwrap();
        let kl = trade_kl_from_logits(&la, &lb).unwrap().value;
        prop_assert!(kl >= -1e-15);
        prop_assert!(trade_kl_from_logits(&la, &la).unwrap().value.abs() <= 1e-15);
        let (pa, pb) = (softmax_rows(&la), softmax_rows(&lb));
        let gap = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if gap > 1e-3 {
            prop_assert!(kl > 0.0);
            prop_assert!(trade_kl_loss(&pa, &pb).unwrap().value > 0.0);
        }
        prop_assert!(trade_kl_loss(&pa, &pa).unwrap().value.abs() <= 1e-9);
    }
}

fn brute_pair(u: Vec<f64>, v: Vec<f64>, same: bool, margin: f64) -> f64 {
    let d = u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if same {
        0.5 * d * d
    } else {
        0.5 * (margin - d).max(0.0).powi(2)
    }
}

#[test]
fn zero_budget_is_the_identity() {
    let (enc, clf, _) = tiny_models_of::<f32>(3);
    let x = images_f32(4, 5, 16);
    for random_start in [false, true] {
        let b = AttackBudget {
            epsilon: 0.0,
            step_size: 0.0,
            ..budget(0.0, 20, random_start)
        };
        let pgd = pgd_attack(&enc, &clf, &x, Some(&[0, 1, 2, 3, 0]), &b, &mut rng(1)).unwrap();
        let lf = label_free_attack(&enc, &clf, &x, &b, &mut rng(1)).unwrap();
        assert!(pgd.iter().zip(&x).all(|(a, c)| a.to_bits() == c.to_bits()));
        assert!(lf.iter().zip(&x).all(|(a, c)| a.to_bits() == c.to_bits()));
    }
}

#[test]
fn zero_budget_robust_accuracy_equals_clean_accuracy() {
    let (enc, clf, _) = tiny_models_of::<f32>(5);
    let x = images_f32(6, 300, 16);
    let labels: Vec<usize> = (0..300).map(|i| i % 4).collect();
    let b = AttackBudget {
        step_size: 0.0,
        ..budget(0.0, 20, true)
    };
    let e = evaluate(&enc, &clf, &x, &labels, &b, 9).unwrap();
    assert_eq!(e.clean_acc, e.adv_rob);
    assert_eq!(e.per_class_clean, e.per_class_adv);
}

#[test]
fn attacks_are_deterministic_per_seed() {
    let (enc, clf, _) = tiny_models_of::<f32>(8);
    let x = images_f32(9, 4, 16);
    let b = budget(0.3, 5, true);
    let run = |seed| {
        (
            pgd_attack(&enc, &clf, &x, Some(&[0, 1, 2, 3]), &b, &mut rng(seed)).unwrap(),
            label_free_attack(&enc, &clf, &x, &b, &mut rng(seed)).unwrap(),
        )
    };
    assert_eq!(run(11), run(11));
    assert_ne!(run(11).0, run(12).0);
}

#[test]
fn pgd_increases_the_loss_it_ascends() {
    let (enc, clf, _) = tiny_models_of::<f64>(10);
    let x = images(11, 6);
    let labels = [0, 1, 2, 3, 0, 1];
    let b = budget(0.3, 10, false);
    let mut trace = curda::attacks::AttackTrace::default();
    curda::attacks::pgd_attack_traced(&enc, &clf, &x, Some(&labels), &b, &mut rng(0), Some(&mut trace)).unwrap();
    assert_eq!(trace.objective.len(), 11);
    assert!(trace.objective.last().unwrap() > &trace.objective[0]);
}
