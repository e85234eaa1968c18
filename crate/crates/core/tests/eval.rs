use eln_autograd::Tensor;
use eln_core::eval::{localization_metrics, miou, secn_valid_mask, threshold_mask, threshold_sweep, ConfusionMatrix};
use eln_core::losses::BinaryMap;
use proptest::prelude::*;

fn cm_from(pred: &[usize], truth: &[usize], c: usize) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new(c);
    cm.accumulate(pred, truth).unwrap();
    cm
}

// Brute-force per-image counting, written independently of the library.
fn localization_oracle(valid: &[u8], correct: &[u8], batch: usize) -> (f64, f64, f64) {
    let hw = valid.len() / batch;
    let (mut ps, mut rs) = (0.0, 0.0);
    for b in 0..batch {
        let (mut tp, mut fp, mut fn_) = (0u32, 0u32, 0u32);
        for i in b * hw..(b + 1) * hw {
            match (valid[i], correct[i]) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => {}
            }
        }
        if tp + fp > 0 {
            ps += f64::from(tp) / f64::from(tp + fp);
        }
        if tp + fn_ > 0 {
            rs += f64::from(tp) / f64::from(tp + fn_);
        }
    }
    let (p, r) = (ps / batch as f64, rs / batch as f64);
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

#[test]
fn perfect_predictions_score_one() {
    let truth: Vec<usize> = (0..64).map(|i| i % 4).collect();
    assert_eq!(miou(&cm_from(&truth, &truth, 4)).unwrap(), 1.0);
    // absent classes do not count
    let truth = vec![2usize; 16];
    assert_eq!(miou(&cm_from(&truth, &truth, 4)).unwrap(), 1.0);
}

#[test]
fn empty_matrix_is_an_error() {
    assert!(miou(&ConfusionMatrix::new(3)).is_err());
}

#[test]
fn sweep_covers_half_to_ninety_five() {
    let s = threshold_sweep();
    assert_eq!(s.len(), 10);
    assert!((s[0] - 0.5).abs() < 1e-12 && (s[9] - 0.95).abs() < 1e-12);
}

#[test]
fn secn_mask_identity_and_disagreement() {
    let p = Tensor::from_vec(&[1, 2, 1, 2], vec![0.9f32, 0.2, 0.1, 0.8]).unwrap();
    assert_eq!(secn_valid_mask(&p, &p).unwrap().values, vec![1, 1]);
    let q = Tensor::from_vec(&[1, 2, 1, 2], vec![0.1f32, 0.8, 0.9, 0.2]).unwrap();
    assert_eq!(secn_valid_mask(&q, &p).unwrap().values, vec![0, 0]);
    let wrong = Tensor::from_vec(&[1, 3, 1, 2], vec![0.0f32; 6]).unwrap();
    assert!(secn_valid_mask(&wrong, &p).is_err());
}

fn probs_strategy() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (1usize..3, 2usize..5, 1usize..6).prop_flat_map(|(b, c, hw)| {
        proptest::collection::vec(0.01f64..1.0, b * c * hw).prop_map(move |raw| {
            let mut p = raw.clone();
            for n in 0..b {
                for px in 0..hw {
                    let s: f64 = (0..c).map(|ch| raw[(n * c + ch) * hw + px]).sum();
                    for ch in 0..c {
                        p[(n * c + ch) * hw + px] /= s;
                    }
                }
            }
            (b, c, hw, p)
        })
    })
}

proptest! {
    #[test]
    fn miou_in_unit_interval_and_permutation_invariant(
        pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = miou(&cm_from(&pred, &truth, 4)).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        let rp: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
        let rt: Vec<usize> = truth.iter().map(|&c| perm[c]).collect();
        let m2 = miou(&cm_from(&rp, &rt, 4)).unwrap();
        prop_assert!((m - m2).abs() < 1e-12);
    }

    #[test]
    fn threshold_mask_is_monotone((b, c, hw, p) in probs_strategy(), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let probs = Tensor::from_vec(&[b, c, 1, hw], p).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = threshold_mask(&probs, lo).unwrap();
        let z = threshold_mask(&probs, hi).unwrap();
        for (x, y) in a.values.iter().zip(&z.values) {
            prop_assert!(y <= x);
        }
    }

    #[test]
    fn secn_mask_matches_argmax_loop(
        (b, c, hw, p, q) in probs_strategy().prop_flat_map(|(b, c, hw, p)| {
            let n = p.len();
            (Just(b), Just(c), Just(hw), Just(p), proptest::collection::vec(0.0f64..1.0, n))
        })
    ) {
        let orig = Tensor::from_vec(&[b, c, 1, hw], p.clone()).unwrap();
        let corr = Tensor::from_vec(&[b, c, 1, hw], q.clone()).unwrap();
        let got = secn_valid_mask(&corr, &orig).unwrap();
        let argmax = |v: &[f64], n: usize, px: usize| {
            let mut best = 0;
            for ch in 1..c {
                if v[(n * c + ch) * hw + px] > v[(n * c + best) * hw + px] {
                    best = ch;
                }
            }
            best
        };
        for n in 0..b {
            for px in 0..hw {
                let want = u8::from(argmax(&p, n, px) == argmax(&q, n, px));
                prop_assert_eq!(got.values[n * hw + px], want);
            }
        }
    }

    #[test]
    fn localization_matches_counting_oracle(
        (batch, bits) in (1usize..4, 1usize..20).prop_flat_map(|(b, hw)| (Just(b), proptest::collection::vec((0u8..2, 0u8..2), b * hw)))
    ) {
        let hw = bits.len() / batch;
        let (v, c): (Vec<u8>, Vec<u8>) = bits.into_iter().unzip();
        let rep = localization_metrics(
            &BinaryMap::new(batch, 1, hw, v.clone()).unwrap(),
            &BinaryMap::new(batch, 1, hw, c.clone()).unwrap(),
        ).unwrap();
        let (p, r, f) = localization_oracle(&v, &c, batch);
        prop_assert!((rep.precision - p).abs() < 1e-12);
        prop_assert!((rep.recall - r).abs() < 1e-12);
        prop_assert!((rep.f1 - f).abs() < 1e-12);
    }
}
