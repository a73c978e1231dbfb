use csen_core::ops::{self, Mode, RunningStats, BN_EPS};
use csen_core::{Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn linear_value(x: &Tensor, w: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
    let y = ops::linear(&mut t, xv, wv, None).unwrap();
    t.value(y).clone()
}

proptest! {
    #[test]
    fn linear_is_linear(
        x in matrix(3, 4),
        y in matrix(3, 4),
        w in matrix(4, 2),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        let mixed: Vec<f64> = x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = linear_value(&Tensor::new(vec![3, 4], mixed).unwrap(), &w);
        let fx = linear_value(&x, &w);
        let fy = linear_value(&y, &w);
        for ((l, a), b) in lhs.data().iter().zip(fx.data()).zip(fy.data()) {
            prop_assert!((l - (alpha * a + beta * b)).abs() <= 1e-10);
        }
    }

    #[test]
    fn batch_norm_train_columns_are_standardized(x in matrix(6, 3)) {
        // Skip near-constant columns, where eps dominates the variance.
        for c in 0..3 {
            let col: Vec<f64> = (0..6).map(|r| x.data()[r * 3 + c]).collect();
            let m = col.iter().sum::<f64>() / 6.0;
            prop_assume!(col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 6.0 > 1e-2);
        }
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let g = t.constant(Tensor::full(&[3], 1.0));
        let b = t.constant(Tensor::zeros(&[3]));
        let out = ops::batch_norm(&mut t, xv, g, b, Mode::Train, &RunningStats::identity(3), BN_EPS).unwrap().out;
        let y = t.value(out);
        for c in 0..3 {
            let col: Vec<f64> = (0..6).map(|r| y.data()[r * 3 + c]).collect();
            let mean = col.iter().sum::<f64>() / 6.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            let raw: Vec<f64> = (0..6).map(|r| x.data()[r * 3 + c]).collect();
            let rm = raw.iter().sum::<f64>() / 6.0;
            let rv = raw.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / 6.0;
            prop_assert!(mean.abs() <= 1e-10);
            prop_assert!((var - rv / (rv + BN_EPS)).abs() <= 1e-10);
        }
    }

    #[test]
    fn concat_then_slice_recovers_inputs(da in 0usize..4, db in 1usize..4, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[3, da], 1.0, &mut rng);
        let b = Tensor::randn(&[3, db], 1.0, &mut rng);
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = ops::concat_last(&mut t, av, bv).unwrap();
        let joined = t.value(c);
        prop_assert_eq!(ops::slice_cols(joined, 0, da), a);
        prop_assert_eq!(ops::slice_cols(joined, da, da + db), b);
    }

    #[test]
    fn grouped_gate_is_homogeneous_in_scale(
        y in matrix(2, 8),
        w in prop::collection::vec(-1.0f64..1.0, 5),
        alpha in 0.1f64..4.0,
    ) {
        // Scaling every (1 + w0 + wg) by alpha scales the output by alpha.
        let groups = 4;
        let run = |w: Vec<f64>| {
            let mut t = Tape::new();
            let yv = t.constant(y.clone());
            let wv = t.constant(Tensor::new(vec![groups + 1], w).unwrap());
            let out = ops::group_gate(&mut t, yv, wv, groups).unwrap();
            t.value(out).clone()
        };
        let base = run(w.clone());
        // alpha·(1 + w0 + wg) = 1 + w0' + wg' with w0' = alpha·(1 + w0) − 1, wg' = alpha·wg.
        let mut scaled = vec![alpha * (1.0 + w[0]) - 1.0];
        scaled.extend(w[1..].iter().map(|v| alpha * v));
        let out = run(scaled);
        for (o, b) in out.data().iter().zip(base.data()) {
            prop_assert!((o - alpha * b).abs() <= 1e-10);
        }
    }
}

#[test]
fn relu_mask_matches_finite_differences_away_from_zero() {
    let x = Tensor::new(vec![1, 6], vec![-2.0, -0.5, -0.1, 0.1, 0.5, 2.0]).unwrap();
    let mut t = Tape::new();
    let xv = t.input(x.clone());
    let y = ops::relu(&mut t, xv).unwrap();
    let ones = t.constant(Tensor::full(&[6, 1], 1.0));
    let s = ops::linear(&mut t, y, ones, None).unwrap();
    let g = t.backward(s).unwrap();
    let analytic = g.get(xv).unwrap();
    let h = 1e-6;
    for i in 0..6 {
        let v = x.data()[i];
        let numeric = ((v + h).max(0.0) - (v - h).max(0.0)) / (2.0 * h);
        assert!((analytic[i] - numeric).abs() < 1e-9);
        assert_eq!(analytic[i], if v > 0.0 { 1.0 } else { 0.0 });
    }
}

#[test]
fn global_avg_pool_matches_loop() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let y = ops::global_avg_pool(&mut t, xv).unwrap();
    for n in 0..2 {
        for c in 0..2 {
            let mut acc = 0.0;
            for i in 0..9 {
                acc += x.data()[(n * 2 + c) * 9 + i];
            }
            assert_eq!(t.value(y).data()[n * 2 + c], acc / 9.0);
        }
    }
}

#[test]
fn l2_normalize_rows_have_unit_norm() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[5, 7], 2.0, &mut rng);
    let mut t = Tape::new();
    let xv = t.constant(x);
    let y = ops::l2_normalize(&mut t, xv, 1e-12).unwrap();
    for r in 0..5 {
        let n: f64 = t.value(y).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-12);
    }
}
