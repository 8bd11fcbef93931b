mod common;

use proptest::prelude::*;
use radformer_core::data::Class;
use radformer_core::metrics::*;
use rand::Rng;

fn onehot(c: usize) -> Vec<f64> {
    let mut v = vec![0.1; 3];
    v[c] = 0.8;
    v
}

#[test]
fn perfect_predictor_scores_one() {
    let labels = [Class::Normal, Class::Benign, Class::Malignant, Class::Malignant, Class::Benign];
    let scores: Vec<Vec<f64>> = labels.iter().map(|l| onehot(l.index())).collect();
    let r = evaluate(&scores, &labels).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!((r.sensitivity, r.specificity, r.auc), (Some(1.0), Some(1.0), Some(1.0)));
    assert_eq!(r.per_class, [Some(1.0); 3]);
}

#[test]
fn hand_confusion_matrix() {
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    let mut add = |truth: Class, pred: usize, n: usize| {
        for _ in 0..n {
            labels.push(truth);
            scores.push(onehot(pred));
        }
    };
    add(Class::Malignant, 2, 9);
    add(Class::Malignant, 1, 1);
    add(Class::Normal, 0, 9);
    add(Class::Normal, 2, 1);
    add(Class::Benign, 1, 9);
    add(Class::Benign, 2, 1);
    let r = evaluate(&scores, &labels).unwrap();
    assert_eq!(r.sensitivity, Some(0.9));
    assert_eq!(r.specificity, Some(0.9));
    assert_eq!(r.accuracy, 0.9);
    assert_eq!(r.per_class, [Some(0.9); 3]);
    assert_eq!(r.confusion, [[9, 0, 1], [0, 9, 1], [0, 1, 9]]);
}

#[test]
fn single_class_has_no_auc() {
    let labels = [Class::Benign, Class::Benign, Class::Benign];
    let scores = vec![onehot(1), onehot(2), onehot(1)];
    let r = evaluate(&scores, &labels).unwrap();
    assert_eq!(r.auc, None);
    assert_eq!(r.sensitivity, None);
    assert_eq!(r.specificity, Some(2.0 / 3.0));
    assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(r.per_class, [None, Some(2.0 / 3.0), None]);
}

#[test]
fn mismatched_lengths_rejected() {
    assert!(evaluate(&[onehot(0)], &[Class::Normal, Class::Benign]).is_err());
    assert!(evaluate(&[], &[]).is_err());
}

fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

#[test]
fn auc_matches_pairwise_oracle() {
    let mut r = common::rng(21);
    for set in 0..50 {
        let n = r.random_range(2..60);
        let mut positive: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        positive[0] = true;
        positive[1] = false;
        let coarse = set % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = r.random_range(0.0..1.0);
                if coarse { (s * 5.0).floor() / 5.0 } else { s }
            })
            .collect();
        let a = auc(&scores, &positive).unwrap();
        assert!((a - pairwise_auc(&scores, &positive)).abs() < 1e-9, "set {set}");
    }
}

#[test]
fn summary_uses_sample_deviation() {
    let s = summarize([1.0, 2.0, 3.0, 4.0].map(Some)).unwrap();
    assert_eq!(s.mean, 2.5);
    assert!((s.sd - 1.2909944487358056).abs() < 1e-15);
    assert_eq!(summarize([Some(0.5)]).unwrap().sd, 0.0);
    assert!(summarize([None, None]).is_none());
}

proptest! {
    #[test]
    fn overall_accuracy_is_pooled_class_accuracy(rows in prop::collection::vec((0usize..3, prop::collection::vec(0.0f64..1.0, 3)), 1..60)) {
        let labels: Vec<Class> = rows.iter().map(|(l, _)| Class::from_index(*l).unwrap()).collect();
        let scores: Vec<Vec<f64>> = rows.iter().map(|(_, s)| s.clone()).collect();
        let r = evaluate(&scores, &labels).unwrap();
        let correct: usize = (0..3).map(|c| r.confusion[c][c]).sum();
        prop_assert!((r.accuracy - correct as f64 / labels.len() as f64).abs() < 1e-15);
        let mut pooled = 0.0;
        for c in 0..3 {
            let n = labels.iter().filter(|l| l.index() == c).count() as f64;
            pooled += r.per_class[c].unwrap_or(0.0) * n;
        }
        prop_assert!((pooled / labels.len() as f64 - r.accuracy).abs() < 1e-12);
        for v in r.row().into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
