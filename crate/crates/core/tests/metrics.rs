use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segadapt::metrics::{f1, iou, precision, recall, summarize, ConfusionMatrix};

/// Class 0 with tp=3, fp=1, fn=2 in a three-class matrix (rows: truth).
fn hand_matrix() -> ConfusionMatrix {
    #[rustfmt::skip]
    let counts = vec![
        3, 2, 0,
        1, 4, 0,
        0, 0, 5,
    ];
    ConfusionMatrix::from_counts(3, counts).unwrap()
}

#[test]
fn hand_counts_give_half_iou_and_two_thirds_f1() {
    let cm = hand_matrix();
    assert_eq!(
        (cm.true_positives(0), cm.false_positives(0), cm.false_negatives(0)),
        (3, 1, 2)
    );
    assert_eq!(iou(&cm, 0), Some(0.5));
    assert_eq!(precision(&cm, 0), Some(0.75));
    assert_eq!(recall(&cm, 0), Some(0.6));
    assert_eq!(f1(&cm, 0), Some(2.0 / 3.0));
    assert_eq!(iou(&cm, 2), Some(1.0));
}

#[test]
fn accumulate_tallies_a_mixed_case() {
    let mut cm = ConfusionMatrix::new(2);
    // truth 0 0 1 1 / pred 0 1 1 1
    cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1], 255).unwrap();
    assert_eq!(cm.counts(), &[1, 1, 0, 2]);
    assert_eq!(cm.get(0, 1), 1);
    assert_eq!(iou(&cm, 0), Some(0.5));
    assert_eq!(iou(&cm, 1), Some(2.0 / 3.0));
}

#[test]
fn perfect_and_ignored_predictions() {
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&[0, 2, 2, 0], &[0, 2, 2, 0], 255).unwrap();
    assert_eq!(cm.counts(), &[2, 0, 0, 0, 0, 0, 0, 0, 2]);
    let before = cm.clone();
    cm.accumulate(&[1, 2], &[255, 255], 255).unwrap();
    assert_eq!(cm, before);
    let r = summarize(&cm, &["a".into(), "b".into(), "c".into()]);
    assert_eq!(r.classes[0].iou, Some(1.0));
    assert_eq!(r.classes[2].f1, Some(1.0));
    // class 1 never occurs: no score, excluded from the means
    assert_eq!(r.classes[1].iou, None);
    assert_eq!(r.miou, Some(1.0));
    assert_eq!(r.mf1, Some(1.0));
    assert!(r.to_table().contains("n/a"));
}

#[test]
fn missed_class_scores_zero() {
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&[0, 0], &[1, 0], 255).unwrap();
    assert_eq!(iou(&cm, 1), Some(0.0));
    assert_eq!(f1(&cm, 1), Some(0.0));
}

#[test]
fn invalid_ids_change_nothing() {
    let mut cm = ConfusionMatrix::new(2);
    assert!(cm.accumulate(&[0, 2], &[0, 0], 255).is_err());
    assert!(cm.accumulate(&[0, 0], &[0, 7], 255).is_err());
    assert!(cm.accumulate(&[0], &[0, 0], 255).is_err());
    assert_eq!(cm.total(), 0);
    assert!(cm.merge(&ConfusionMatrix::new(3)).is_err());
}

#[test]
fn report_json_round_trips() {
    let r = summarize(&hand_matrix(), &[]);
    assert_eq!(r.classes[1].name, "class1");
    let back: segadapt::metrics::EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
}

fn arb_pairs(k: u32) -> impl Strategy<Value = Vec<(u32, u32)>> {
    prop::collection::vec((0..k, prop_oneof![9 => 0..k, 1 => Just(255u32)]), 0..200)
}

fn tally(k: usize, pairs: &[(u32, u32)]) -> ConfusionMatrix {
    let (p, l): (Vec<u32>, Vec<u32>) = pairs.iter().cloned().unzip();
    let mut cm = ConfusionMatrix::new(k);
    cm.accumulate(&p, &l, 255).unwrap();
    cm
}

proptest! {
    #[test]
    fn iou_never_exceeds_f1(pairs in arb_pairs(5)) {
        let cm = tally(5, &pairs);
        for c in 0..5 {
            match (iou(&cm, c), f1(&cm, c)) {
                (Some(i), Some(f)) => prop_assert!((0.0..=1.0).contains(&i) && i <= f && f <= 1.0),
                (None, None) => {}
                other => prop_assert!(false, "inconsistent {:?}", other),
            }
        }
    }

    #[test]
    fn merged_shards_equal_joint_accumulation(pairs in arb_pairs(4), cut in 0usize..200) {
        let cut = cut.min(pairs.len());
        let mut a = tally(4, &pairs[..cut]);
        a.merge(&tally(4, &pairs[cut..])).unwrap();
        let joint = tally(4, &pairs);
        prop_assert_eq!(&a, &joint);
        prop_assert_eq!(summarize(&a, &[]), summarize(&joint, &[]));
    }

    #[test]
    fn order_does_not_matter(mut pairs in arb_pairs(4), seed in any::<u64>()) {
        let before = tally(4, &pairs);
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(tally(4, &pairs), before);
    }
}
