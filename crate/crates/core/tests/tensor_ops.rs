use grouptron::tensor::{grad_check, grad_check_with, Tape, Tensor, Var};
use grouptron::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Weighted sum so that every output element gets a distinct adjoint.
fn weighted<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&y.shape(), &mut rng);
    y.mul(y.tape().constant(w))?.sum()
}

fn check<F>(name: &str, x: &Tensor, f: F)
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let r = grad_check(f, x, H, TOL).unwrap();
    assert!(r.passed, "{name}: {r:?}");
}

#[test]
fn matmul_small_integers() {
    let tape = Tape::new();
    let a = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let b = tape.constant(t(&[3, 2], &[7., 8., 9., 10., 11., 12.]));
    // Hand multiplication: [1*7+2*9+3*11, 1*8+2*10+3*12; 4*7+5*9+6*11, 4*8+5*10+6*12].
    assert_eq!(a.matmul(b).unwrap().value(), t(&[2, 2], &[58., 64., 139., 154.]));
    assert!(matches!(a.matmul(a), Err(Error::Shape { .. })));
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let tape = Tape::new();
    let y = tape.constant(Tensor::zeros(vec![3])).softmax().unwrap().value();
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn impulse_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[8, 3, 4], &mut rng);
    let mut k = Tensor::zeros(vec![3, 4, 4]);
    for c in 0..4 {
        k.data_mut()[16 + c * 4 + c] = 1.0;
    }
    let tape = Tape::new();
    let y = tape.constant(x.clone()).temporal_conv(tape.constant(k)).unwrap();
    assert_eq!(y.value(), x);
}

#[test]
fn temporal_conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (steps, lanes, cin, cout) = (6, 2, 3, 2);
    let x = random(&[steps, lanes, cin], &mut rng);
    let k = random(&[3, cin, cout], &mut rng);
    let tape = Tape::new();
    let y = tape.constant(x.clone()).temporal_conv(tape.constant(k.clone())).unwrap().value();
    for t in 0..steps {
        for m in 0..lanes {
            for o in 0..cout {
                let mut acc = 0.0;
                for j in 0..3 {
                    let s = t as isize + j as isize - 1;
                    if s < 0 || s >= steps as isize {
                        continue;
                    }
                    for c in 0..cin {
                        acc += x.at(&[s as usize, m, c]) * k.at(&[j, c, o]);
                    }
                }
                assert!((y.at(&[t, m, o]) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::filled(vec![2, 3], 0.7));
    tape.backward(x.sum().unwrap()).unwrap();
    assert_eq!(tape.grad(x).unwrap(), Tensor::filled(vec![2, 3], 1.0));

    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    let loss = x.mul(x).unwrap().sum().unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    // A second call accumulates.
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());

    assert!(matches!(tape.backward(x), Err(Error::Argument(_))));
}

#[test]
fn reused_tensor_accumulates_both_paths() {
    // loss = sum(x * 3x + x) has gradient 6x + 1.
    let tape = Tape::new();
    let x = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]));
    let y = x.mul(x.scale(3.0).unwrap()).unwrap().add(x).unwrap().sum().unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[4.0, -5.0, 13.0]);
}

#[test]
fn non_finite_results_are_trapped() {
    let tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 1.0]));
    assert!(matches!(x.ln(), Err(Error::Numeric(_))));
    let big = tape.constant(t(&[1], &[1000.0]));
    assert!(matches!(big.exp(), Err(Error::Numeric(_))));
}

#[test]
fn constants_are_not_recorded_for_grad() {
    let tape = Tape::new();
    let a = tape.constant(t(&[2], &[1.0, 2.0]));
    let y = a.mul(a).unwrap();
    assert!(!y.requires_grad());
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    assert!(y.add(x).unwrap().requires_grad());
}

#[test]
fn gradients_of_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let w = random(&[4, 2], &mut rng);
    let bias = random(&[4], &mut rng);

    let bb = b.clone();
    check("add", &a, |x| weighted(x.add(x.tape().constant(bb.clone()))?, 1));
    let bb = b.clone();
    check("sub", &a, |x| weighted(x.tape().constant(bb.clone()).sub(x)?, 2));
    let bb = b.clone();
    check("mul", &a, |x| weighted(x.mul(x.tape().constant(bb.clone()))?, 3));
    check("mul-self", &a, |x| weighted(x.mul(x)?, 3));
    let ww = w.clone();
    check("matmul-left", &a, |x| weighted(x.matmul(x.tape().constant(ww.clone()))?, 4));
    let aa = a.clone();
    check("matmul-right", &w, |x| weighted(x.tape().constant(aa.clone()).matmul(x)?, 5));
    let aa = a.clone();
    check("add_row-bias", &bias, |x| weighted(x.tape().constant(aa.clone()).add_row(x)?, 6));
    check("scale", &a, |x| weighted(x.scale(-1.7)?, 7));
    check("add_scalar", &a, |x| weighted(x.add_scalar(0.3)?, 7));
    check("concat", &a, |x| {
        let c = x.tape().constant(Tensor::filled(vec![3, 2], 0.5));
        weighted(Var::concat(&[c, x, x], 1)?, 8)
    });
    check("concat-axis0", &a, |x| weighted(Var::concat(&[x, x.scale(2.0)?], 0)?, 8));
    check("slice", &a, |x| weighted(x.slice(1, 1, 3)?, 9));
    check("slice-axis0", &a, |x| weighted(x.slice(0, 2, 3)?, 9));
    check("index_select", &a, |x| weighted(x.index_select(&[2, 0, 2, 1])?, 10));
    check("reshape", &a, |x| weighted(x.reshape(&[2, 6])?, 10));
    check("sum_axis", &a, |x| weighted(x.sum_axis(0)?, 11));
    check("mean_axis", &a, |x| weighted(x.mean_axis(1)?, 12));
    check("sigmoid", &a, |x| weighted(x.sigmoid()?, 13));
    check("tanh", &a, |x| weighted(x.tanh()?, 14));
    check("exp", &a, |x| weighted(x.exp()?, 15));
    let pos = Tensor::new(vec![3, 4], a.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    check("ln", &pos, |x| weighted(x.ln()?, 16));
    check("softmax", &a, |x| weighted(x.softmax()?, 17));
    check("log_softmax", &a, |x| weighted(x.log_softmax()?, 18));

    let seq = random(&[8, 3, 4], &mut rng);
    let kernel = random(&[3, 4, 2], &mut rng);
    let kk = kernel.clone();
    check("temporal_conv-x", &seq, |x| weighted(x.temporal_conv(x.tape().constant(kk.clone()))?, 19));
    let ss = seq.clone();
    check("temporal_conv-kernel", &kernel, |x| weighted(x.tape().constant(ss.clone()).temporal_conv(x)?, 20));

    let adj = random(&[8, 3, 3], &mut rng);
    let aa = adj.clone();
    check("batch_matmul-right", &seq, |x| weighted(x.tape().constant(aa.clone()).batch_matmul(x)?, 21));
    let ss = seq.clone();
    check("batch_matmul-left", &adj, |x| weighted(x.batch_matmul(x.tape().constant(ss.clone()))?, 22));
}

#[test]
fn relu_gradient_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[5, 5], &mut rng);
    let r = grad_check_with(|v| weighted(v.relu()?, 1), &x, H, TOL, |_, v| v.abs() < 10.0 * H).unwrap();
    assert!(r.passed, "{r:?}");

    // At the kink the one-sided slopes disagree, so the entry must be excluded.
    let kink = t(&[2], &[0.0, 1.0]);
    let raw = grad_check(|v| v.relu()?.sum(), &kink, H, TOL).unwrap();
    assert!(!raw.passed);
    let excluded = grad_check_with(|v| v.relu()?.sum(), &kink, H, TOL, |_, v| v.abs() < 10.0 * H).unwrap();
    assert!(excluded.passed);
    assert_eq!(excluded.skipped, 1);
}

#[test]
fn grad_check_report_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[4, 3], &mut rng);
    let r = grad_check(|v| v.sum(), &x, H, TOL).unwrap();
    assert!(r.max_rel_error < 1e-9, "{r:?}");
    assert_eq!(r.checked, 12);

    let w = random(&[5, 4], &mut rng);
    let xv = random(&[4, 1], &mut rng);
    let r = grad_check(|x| x.tape().constant(w.clone()).matmul(x)?.tanh()?.sum(), &xv, H, TOL).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-20.0..20.0f64, 12)) {
        let tape = Tape::new();
        let y = tape.constant(t(&[3, 4], &data)).softmax().unwrap().value();
        for row in y.data().chunks(4) {
            prop_assert!(row.iter().all(|v| *v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_slices_is_exact(
        a in prop::collection::vec(-1e6..1e6f64, 6),
        b in prop::collection::vec(-1e6..1e6f64, 4),
    ) {
        let tape = Tape::new();
        let (ta, tb) = (t(&[2, 3], &a), t(&[2, 2], &b));
        let c = Var::concat(&[tape.constant(ta.clone()), tape.constant(tb.clone())], 1).unwrap();
        prop_assert_eq!(c.slice(1, 0, 3).unwrap().value(), ta);
        prop_assert_eq!(c.slice(1, 3, 5).unwrap().value(), tb);
    }
}
