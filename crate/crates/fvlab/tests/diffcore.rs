use fvlab::diffcore::{grad_check, grad_check_with, op_suite, softmax_ce_loss, Adam, Tape, Tensor};
use fvlab::rng::substream;
use fvlab::Error;
use proptest::prelude::*;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity_hand_and_zero_cases() {
    let mut t = Tape::new();
    let i2 = t.constant(Tensor::eye(2));
    let x = t.constant(Tensor::matrix(2, 3, vec![1.5, -2.0, 0.25, 4.0, 5.0, -6.0]).unwrap());
    let y = t.matmul(i2, x).unwrap();
    assert_eq!(t.data(y), t.data(x));

    let a = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = t.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
    let ab = t.matmul(a, b).unwrap();
    assert_eq!(t.shape(ab), &[2, 1]);
    assert_eq!(t.data(ab), &[3.0, 7.0]);

    let z = t.constant(Tensor::zeros(&[2, 3]));
    let o = t.constant(Tensor::ones(&[3, 2]));
    let zo = t.matmul(z, o).unwrap();
    assert_eq!(t.data(zo), &[0.0; 4]);
}

#[test]
fn matmul_inner_dimension_mismatch_is_a_dimension_error() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(t.matmul(a, b), Err(Error::Dimension(_))));
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::new();
    let flat = t.constant(Tensor::vector(vec![0.3; 4]));
    let l = softmax_ce_loss(&mut t, flat, 1).unwrap();
    assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-15);

    let sharp = t.constant(Tensor::vector(vec![0.0, 800.0, 0.0, 0.0]));
    let l = softmax_ce_loss(&mut t, sharp, 1).unwrap();
    assert!(t.value(l).item().abs() < 1e-300 + 1e-15);

    let x = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let l = softmax_ce_loss(&mut t, x, 2).unwrap();
    let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    let expect = -(3f64.exp() / z).ln();
    assert!((t.value(l).item() - expect).abs() < 1e-14);

    assert!(matches!(softmax_ce_loss(&mut t, x, 3), Err(Error::Index(_))));
}

#[test]
fn backward_of_sum_and_quadratic() {
    let x0 = Tensor::vector(vec![0.5, -1.0, 2.0, 3.5]);
    let mut t = Tape::new();
    let x = t.param(x0.clone());
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0; 4]);

    let mut t = Tape::new();
    let x = t.param(x0.clone());
    let q = t.sum_squares(x);
    let g = t.backward(q).unwrap();
    let two_x: Vec<f64> = x0.data.iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.get(x).unwrap(), two_x.as_slice());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.param(Tensor::ones(&[2, 2]));
    assert!(matches!(t.backward(x), Err(Error::Contract(_))));
}

#[test]
fn grad_check_passes_on_sum_of_squares_at_tight_tolerance() {
    let x = Tensor::matrix(4, 5, (0..20).map(|i| (i as f64 * 0.37).cos()).collect()).unwrap();
    let mut rng = substream(1, "t");
    let r = grad_check(|t, v| Ok(t.sum_squares(v)), &x, 1e-5, 1e-6, 64, &mut rng).unwrap();
    assert!(r.passed, "max rel err {}", r.max_rel_err);
    assert_eq!(r.checked, 20);
}

#[test]
fn grad_check_flags_a_corrupted_gradient() {
    let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.1 - 0.4).collect();
    let value = |v: &[f64]| -> fvlab::Result<f64> { Ok(v.iter().map(|a| a * a).sum()) };
    // correct rule is 2x; use 3x
    let wrong: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
    let coords: Vec<usize> = (0..10).collect();
    let r = grad_check_with(value, &wrong, &x, &coords, 1e-5, 1e-4).unwrap();
    assert!(!r.passed);
    let right: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
    assert!(grad_check_with(value, &right, &x, &coords, 1e-5, 1e-4).unwrap().passed);
}

#[test]
fn grad_check_reports_nan_as_numeric_error() {
    let x = Tensor::vector(vec![1.0, 2.0]);
    let mut rng = substream(1, "t");
    let r = grad_check(
        |t, v| {
            let s = t.sum(v);
            Ok(t.scale(s, f64::NAN))
        },
        &x,
        1e-5,
        1e-4,
        8,
        &mut rng,
    );
    assert!(matches!(r, Err(Error::Numeric(_))));
}

#[test]
fn every_primitive_passes_central_differences_at_1e_6() {
    let mut rng = substream(3, "ops");
    let reports = op_suite(1e-5, 1e-6, 64, &mut rng).unwrap();
    assert!(reports.len() >= 20);
    for (name, r) in &reports {
        assert!(r.passed, "{name}: max rel err {}", r.max_rel_err);
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let x0 = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
    let w = Tensor::matrix(4, 2, (0..8).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
    let build = |t: &mut Tape, x| {
        let wv = t.constant(w.clone());
        let y = t.matmul(x, wv).unwrap();
        let f = t.sum_squares(y);
        let s = t.softmax(x).unwrap();
        let g = t.sum_squares(s);
        (f, g)
    };
    let (a, b) = (0.7, -1.3);
    let grad_of = |which: u8| {
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let (f, g) = build(&mut t, x);
        let out = match which {
            0 => f,
            1 => g,
            _ => {
                let fa = t.scale(f, a);
                let gb = t.scale(g, b);
                t.add(fa, gb).unwrap()
            }
        };
        t.backward(out).unwrap().get(x).unwrap().to_vec()
    };
    let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
    let combo: Vec<f64> = gf.iter().zip(&gg).map(|(p, q)| a * p + b * q).collect();
    assert!(close(&gc, &combo, 1e-12));
}

#[test]
fn identical_seeds_give_bit_identical_trajectories() {
    let run = || {
        let mut rng = substream(9, "traj");
        use rand::Rng;
        let mut x: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target = Tensor::matrix(4, 6, (0..24).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let mut adam = Adam::new(1e-2, 0.9, 0.999, 1e-8, 1e-4);
        for _ in 0..25 {
            let mut t = Tape::new();
            let xv = t.param(Tensor::matrix(4, 6, x.clone()).unwrap());
            let tv = t.constant(target.clone());
            let d = t.sub(xv, tv).unwrap();
            let s = t.softmax(d).unwrap();
            let l = t.sum_squares(s);
            let g = t.backward(l).unwrap().get(xv).unwrap().to_vec();
            adam.step(&mut [x.as_mut_slice()], &[g.as_slice()]);
        }
        x
    };
    let (a, b) = (run(), run());
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn kl_teacher_must_be_normalized() {
    let mut t = Tape::new();
    let l = t.param(Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap());
    let bad = Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
    assert!(matches!(t.kl_div(l, &bad), Err(Error::Numeric(_))));
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in 0u64..1000) {
        use rand::Rng;
        let mut r = substream(seed, "mm");
        let a: Vec<f64> = (0..m * k).map(|_| r.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mut t = Tape::new();
        let av = t.constant(Tensor::matrix(m, k, a.clone()).unwrap());
        let bv = t.constant(Tensor::matrix(k, n, b.clone()).unwrap());
        let c = t.matmul(av, bv).unwrap();
        prop_assert!(close(t.data(c), &naive_matmul(&a, &b, m, k, n), 1e-12));
    }

    #[test]
    fn softmax_rows_are_distributions(xs in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(3, 4, xs).unwrap());
        let s = t.softmax(x).unwrap();
        for row in t.data(s).chunks(4) {
            prop_assert!(row.iter().all(|p| *p >= 0.0 && *p <= 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(xs in prop::collection::vec(-5.0f64..5.0, 5), ys in prop::collection::vec(-5.0f64..5.0, 5)) {
        let logq = |v: &[f64]| {
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            Tensor::matrix(1, 5, v.iter().map(|x| x - lse).collect()).unwrap()
        };
        let mut t = Tape::new();
        let p = t.constant(Tensor::matrix(1, 5, xs.clone()).unwrap());
        let kl = t.kl_div(p, &logq(&ys)).unwrap();
        prop_assert!(t.value(kl).item() >= -1e-15);
        let self_kl = t.kl_div(p, &logq(&xs)).unwrap();
        prop_assert!(t.value(self_kl).item().abs() < 1e-12);
    }
}
