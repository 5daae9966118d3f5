mod common;

use common::*;
use dwinkit_core::autodiff::{gradcheck, GradcheckOptions};
use dwinkit_core::losses::{cross_entropy_loss, segmentation_loss, soft_dice_loss};
use dwinkit_core::metrics::{dsc, hd95, jaccard, SegMetricsReport};
use dwinkit_core::volume::LabelVolume;
use dwinkit_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn random_labels(shape: [usize; 3], k: u16, seed: u64) -> LabelVolume {
    let mut r = rng(seed);
    let n = shape.iter().product();
    LabelVolume::new(shape, (0..n).map(|_| r.random_range(0..k)).collect()).unwrap()
}

fn loss_value(
    logits: &Tensor<f64>,
    labels: &LabelVolume,
    f: fn(&mut Tape<f64>, dwinkit_core::Var, &LabelVolume) -> dwinkit_core::Result<dwinkit_core::Var>,
) -> f64 {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let v = f(&mut tape, l, labels).unwrap();
    tape.value(v).data()[0]
}

fn peaked(labels: &LabelVolume, k: usize, margin: f64) -> Tensor<f64> {
    let [h, w, d] = labels.shape();
    let mut data = vec![0.0; labels.len() * k];
    for (i, &l) in labels.data().iter().enumerate() {
        data[i * k + l as usize] = margin;
    }
    Tensor::new(vec![h, w, d, k], data).unwrap()
}

#[test]
fn dice_loss_examples() {
    let labels = random_labels([4, 4, 4], 3, 1);
    assert!(loss_value(&peaked(&labels, 3, 20.0), &labels, soft_dice_loss) < 0.01);

    let mut data = vec![0u16; 64];
    data[32..].iter_mut().for_each(|v| *v = 1);
    let balanced = LabelVolume::new([4, 4, 4], data).unwrap();
    let uniform = Tensor::zeros(vec![4, 4, 4, 2]);
    let loss = loss_value(&uniform, &balanced, soft_dice_loss);
    // dice_c = (2·16 + ε) / (32 + 32 + ε) on each class.
    let eps = 1e-5;
    let expected = 1.0 - (32.0 + eps) / (64.0 + eps);
    assert!((loss - expected).abs() < 1e-12);
    assert!((loss - 0.5).abs() < 1e-6);
}

#[test]
fn cross_entropy_examples() {
    let labels = random_labels([3, 3, 3], 4, 2);
    let loss = loss_value(&Tensor::zeros(vec![3, 3, 3, 4]), &labels, cross_entropy_loss);
    assert!((loss - 4f64.ln()).abs() < 1e-12);
    let mut prev = f64::INFINITY;
    for margin in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
        let l = loss_value(&peaked(&labels, 4, margin), &labels, cross_entropy_loss);
        assert!(l < prev);
        prev = l;
    }
    assert!(prev < 1e-12);
}

#[test]
fn losses_reject_bad_labels() {
    let labels = LabelVolume::new([1, 1, 2], vec![0, 3]).unwrap();
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::zeros(vec![1, 1, 2, 3]));
    assert!(soft_dice_loss(&mut tape, l, &labels).is_err());
    assert!(cross_entropy_loss(&mut tape, l, &labels).is_err());
    let wrong_shape = LabelVolume::new([1, 2, 1], vec![0, 1]).unwrap();
    assert!(cross_entropy_loss(&mut tape, l, &wrong_shape).is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    for (i, k) in [2usize, 3, 4].into_iter().enumerate() {
        let labels = random_labels([3, 3, 3], k as u16, 10 + i as u64);
        let logits = randn(&[3, 3, 3, k], 20 + i as u64);
        let inputs = vec![("logits".to_string(), logits)];
        for f in [soft_dice_loss::<f64>, cross_entropy_loss::<f64>] {
            let report = gradcheck(|t, v| f(t, v[0], &labels), &inputs, &GradcheckOptions::default()).unwrap();
            assert!(report.passed(), "{:?}", report.inputs);
        }
        let report = gradcheck(
            |t, v| Ok(segmentation_loss(t, v[0], &labels)?.total),
            &inputs,
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed());
    }
}

#[test]
fn losses_are_invariant_to_voxel_permutation() {
    use rand::seq::SliceRandom;
    let k = 3;
    let labels = random_labels([3, 4, 2], 3, 30);
    let logits = randn(&[3, 4, 2, k], 31);
    let mut perm: Vec<usize> = (0..24).collect();
    perm.shuffle(&mut rng(32));
    let pl = LabelVolume::new([24, 1, 1], perm.iter().map(|&i| labels.data()[i]).collect()).unwrap();
    let px = Tensor::new(vec![24, 1, 1, k], perm.iter().flat_map(|&i| logits.data()[i * k..(i + 1) * k].to_vec()).collect())
        .unwrap();
    for f in [soft_dice_loss::<f64>, cross_entropy_loss::<f64>] {
        let a = loss_value(&logits, &labels, f);
        let b = loss_value(&px, &pl, f);
        assert!((a - b).abs() < 1e-12);
    }
}

fn boxes(shape: [usize; 3], boxes: &[([usize; 3], [usize; 3], u16)]) -> LabelVolume {
    let mut v = LabelVolume::filled(shape, 0);
    for &(lo, hi, c) in boxes {
        for i in lo[0]..hi[0] {
            for j in lo[1]..hi[1] {
                for l in lo[2]..hi[2] {
                    let idx = v.index(i, j, l);
                    v.data_mut()[idx] = c;
                }
            }
        }
    }
    v
}

#[test]
fn overlap_examples() {
    let a = random_labels([4, 4, 4], 3, 40);
    assert_eq!(dsc(&a, &a, 1).unwrap(), 1.0);
    assert_eq!(jaccard(&a, &a, 1).unwrap(), 1.0);
    let p = boxes([6, 6, 6], &[([0, 0, 0], [2, 2, 2], 1)]);
    let g = boxes([6, 6, 6], &[([3, 3, 3], [5, 5, 5], 1)]);
    assert_eq!(dsc(&p, &g, 1).unwrap(), 0.0);
    assert_eq!(jaccard(&p, &g, 1).unwrap(), 0.0);
    let g = boxes([6, 6, 6], &[([1, 0, 0], [3, 2, 2], 1)]);
    assert_eq!(dsc(&p, &g, 1).unwrap(), 0.5);
    assert!((jaccard(&p, &g, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    let empty = LabelVolume::filled([6, 6, 6], 0);
    assert_eq!(dsc(&empty, &empty, 2).unwrap(), 1.0);
    assert_eq!(jaccard(&empty, &empty, 2).unwrap(), 1.0);
    assert!(dsc(&empty, &LabelVolume::filled([6, 6, 5], 0), 0).is_err());
}

#[test]
fn hd95_examples() {
    let a = boxes([8, 8, 8], &[([2, 2, 2], [5, 5, 5], 1)]);
    assert_eq!(hd95(&a, &a, 1).unwrap(), Some(0.0));
    let b = boxes([8, 8, 8], &[([3, 2, 2], [6, 5, 5], 1)]);
    assert_eq!(hd95(&a, &b, 1).unwrap(), Some(1.0));
    assert_eq!(hd95_oracle(&a, &b, 1), Some(1.0));
    let empty = LabelVolume::filled([8, 8, 8], 0);
    assert_eq!(hd95(&a, &empty, 1).unwrap(), None);
    assert_eq!(hd95(&empty, &empty, 1).unwrap(), None);
}

#[test]
fn hd95_zero_does_not_imply_identical_surfaces() {
    let gt = boxes([12, 12, 12], &[([2, 2, 2], [6, 6, 6], 1)]);
    let mut pred = gt.clone();
    let stray = pred.index(10, 10, 10);
    pred.data_mut()[stray] = 1;
    assert_ne!(pred, gt);
    assert_eq!(hd95(&pred, &gt, 1).unwrap(), Some(0.0));
    assert_eq!(hd95_oracle(&pred, &gt, 1), Some(0.0));
}

#[test]
fn hd95_matches_brute_force_and_is_symmetric() {
    let mut r = rng(50);
    for case in 0..120 {
        let shape = [r.random_range(1..=12), r.random_range(1..=12), r.random_range(1..=12)];
        let p = blob_masks(shape, 1000 + case);
        let g = blob_masks(shape, 2000 + case);
        let got = hd95(&p, &g, 1).unwrap();
        assert_eq!(got, hd95_oracle(&p, &g, 1), "case {case} shape {shape:?}");
        assert_eq!(got, hd95(&g, &p, 1).unwrap());
        let d = dsc(&p, &g, 1).unwrap();
        let j = jaccard(&p, &g, 1).unwrap();
        assert!((j - d / (2.0 - d)).abs() < 1e-12);
        assert!(d >= j);
    }
}

#[test]
fn hd95_is_translation_invariant() {
    let a = boxes([10, 10, 10], &[([1, 1, 1], [4, 5, 3], 1), ([2, 2, 2], [3, 3, 3], 0)]);
    let b = boxes([10, 10, 10], &[([2, 1, 0], [5, 3, 4], 1)]);
    let shift = |v: &LabelVolume, s: [usize; 3]| {
        let mut out = LabelVolume::filled([10, 10, 10], 0);
        for i in 0..10 - s[0] {
            for j in 0..10 - s[1] {
                for l in 0..10 - s[2] {
                    let idx = out.index(i + s[0], j + s[1], l + s[2]);
                    out.data_mut()[idx] = v.get(i, j, l);
                }
            }
        }
        out
    };
    let base = hd95(&a, &b, 1).unwrap();
    for s in [[1, 2, 3], [4, 0, 1], [0, 5, 5]] {
        assert_eq!(hd95(&shift(&a, s), &shift(&b, s), 1).unwrap(), base);
    }
}

#[test]
fn report_json_roundtrip_and_null_sentinel() {
    let gt = boxes([8, 8, 8], &[([1, 1, 1], [4, 4, 4], 1), ([5, 5, 5], [7, 7, 7], 2)]);
    let all_bg = LabelVolume::filled([8, 8, 8], 0);
    let report = SegMetricsReport::compute(&all_bg, &gt, 3).unwrap();
    assert_eq!(report.mean_foreground.dsc, 0.0);
    assert_eq!(report.mean_foreground.hd95, None);
    let json = report.to_json().unwrap();
    let value: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(value["1"]["hd95"].is_null());
    assert!(value["mean_foreground"]["hd95"].is_null());
    assert_eq!(value.as_object().unwrap().len(), 4);
    assert_eq!(SegMetricsReport::from_json(&json).unwrap(), report);

    let report = SegMetricsReport::compute(&gt, &gt, 3).unwrap();
    assert_eq!(report.mean_foreground.dsc, 1.0);
    assert_eq!(report.mean_foreground.hd95, Some(0.0));
    assert_eq!(SegMetricsReport::from_json(&report.to_json().unwrap()).unwrap(), report);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_jaccard_identity(h in 1usize..6, w in 1usize..6, d in 1usize..6, seed in any::<u64>(), class in 0u16..3) {
        let p = random_labels([h, w, d], 3, seed);
        let g = random_labels([h, w, d], 3, seed.wrapping_add(1));
        let dd = dsc(&p, &g, class).unwrap();
        let jj = jaccard(&p, &g, class).unwrap();
        prop_assert!((jj - dd / (2.0 - dd)).abs() < 1e-12);
        prop_assert!(dd >= jj);
        prop_assert!((0.0..=1.0).contains(&dd));
    }
}
