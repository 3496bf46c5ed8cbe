use cdkd_autograd::{finite_diff_check, AutogradError, DiffTensor, Result, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

/// Keeps values clear of the relu kink so central differences stay exact.
fn away_from_zero(v: Vec<f64>) -> Vec<f64> {
    v.into_iter()
        .map(|x| if x.abs() < 0.05 { x.signum() * 0.05 + x } else { x })
        .collect()
}

fn check<F>(shape: &[usize], values: Vec<f64>, f: F) -> f64
where
    F: Fn(&DiffTensor) -> Result<DiffTensor>,
{
    let tape = Tape::new();
    let x = tape.constant(shape, values).unwrap();
    finite_diff_check(f, &x, 1e-5).unwrap()
}

/// Weighted sum so every output element contributes a distinct gradient.
fn probe(y: &DiffTensor) -> Result<DiffTensor> {
    let n = y.numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
    let wt = y.tape().constant(y.shape(), w)?;
    y.mul(&wt)?.sum()
}

#[test]
fn relu_definition() {
    let tape = Tape::new();
    let x = tape.constant(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
    assert_eq!(x.relu().unwrap().values(), &[0.0, 0.0, 2.0]);
}

#[test]
fn identity_kernel_convolution() {
    let tape = Tape::new();
    let x = tape.constant(&[1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
    let w = tape.constant(&[1, 1, 1, 1], vec![1.0]).unwrap();
    let y = x.conv2d(&w, 1, 0).unwrap();
    assert_eq!(y.values(), x.values());
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let tape = Tape::new();
    let x = tape.constant(&[4], vec![1.0; 4]).unwrap();
    assert_eq!(x.softmax_last(3.0).unwrap().values(), &[0.25; 4]);
}

#[test]
fn softmax_rejects_nonpositive_temperature() {
    let tape = Tape::new();
    let x = tape.constant(&[2], vec![1.0, 2.0]).unwrap();
    assert_eq!(
        x.softmax_last(0.0).unwrap_err(),
        AutogradError::NonPositiveTemperature(0.0)
    );
    assert!(x.log_softmax_last(-1.0).is_err());
}

#[test]
fn shape_mismatch_is_reported() {
    let tape = Tape::new();
    let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    assert!(matches!(a.matmul(&b), Err(AutogradError::ShapeMismatch { .. })));
    let c = tape.constant(&[3], vec![0.0; 3]).unwrap();
    assert!(matches!(a.add(&c), Err(AutogradError::ShapeMismatch { .. })));
}

#[test]
fn nan_in_forward_is_an_error() {
    let tape = Tape::new();
    let x = tape.constant(&[2], vec![-1.0, 1.0]).unwrap();
    assert!(matches!(x.log(), Err(AutogradError::NonFinite { op: "log" })));
    assert!(tape.constant(&[1], vec![f64::NAN]).is_err());
}

#[test]
fn constants_do_not_record() {
    let tape = Tape::new();
    let x = tape.constant(&[2], vec![1.0, 2.0]).unwrap();
    let _ = x.relu().unwrap().sum().unwrap();
    assert_eq!(tape.num_records(), 0);
    let v = tape.variable(&[2], vec![1.0, 2.0]).unwrap();
    let _ = v.relu().unwrap();
    assert_eq!(tape.num_records(), 1);
}

#[test]
fn sum_gradient_is_ones() {
    let tape = Tape::new();
    let x = tape.variable(&[3], vec![0.3, -2.0, 5.0]).unwrap();
    x.sum().unwrap().backprop().unwrap();
    assert_eq!(x.grad(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn mean_of_squares_gradient() {
    // Frozen from central differences at h = 1e-5: d/dx mean(x²) = x at n = 2.
    let f = |x: &DiffTensor| x.mul(x)?.mean();
    let tape = Tape::new();
    let x = tape.constant(&[2], vec![1.0, 2.0]).unwrap();
    let numeric = cdkd_autograd::numeric_gradient(f, &[2], x.values(), 1e-5).unwrap();
    assert!((numeric[0] - 1.0).abs() < 1e-9 && (numeric[1] - 2.0).abs() < 1e-9);

    let tape = Tape::new();
    let x = tape.variable(&[2], vec![1.0, 2.0]).unwrap();
    f(&x).unwrap().backprop().unwrap();
    let g = x.grad();
    assert!((g[0] - 1.0).abs() < 1e-12 && (g[1] - 2.0).abs() < 1e-12);
}

#[test]
fn gradients_accumulate_across_backprops() {
    let tape = Tape::new();
    let x = tape.variable(&[2], vec![1.0, -3.0]).unwrap();
    let l1 = x.sum().unwrap();
    let l2 = x.mul(&x).unwrap().sum().unwrap();
    l1.backprop().unwrap();
    l2.backprop().unwrap();
    assert_eq!(x.grad(), vec![1.0 + 2.0, 1.0 - 6.0]);
    x.zero_grad();
    assert_eq!(x.grad(), vec![0.0, 0.0]);
}

#[test]
fn backprop_contract_errors() {
    let tape = Tape::new();
    let x = tape.variable(&[2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(x.relu().unwrap().backprop(), Err(AutogradError::NotScalar(_))));
    let l = x.sum().unwrap();
    l.backprop().unwrap();
    assert_eq!(l.backprop(), Err(AutogradError::TapeConsumed(l.id())));
    let other = Tape::new();
    assert_eq!(other.backprop(&l), Err(AutogradError::ForeignTape));
}

#[test]
fn grad_reverse_forward_and_backward() {
    let tape = Tape::new();
    let x = tape.variable(&[2], vec![3.0, -1.0]).unwrap();
    let y = x.grad_reverse(1.0).unwrap();
    assert_eq!(y.values(), &[3.0, -1.0]);
    y.sum().unwrap().backprop().unwrap();
    assert_eq!(x.grad(), vec![-1.0, -1.0]);

    let tape = Tape::new();
    let x = tape.variable(&[2], vec![3.0, -1.0]).unwrap();
    let up = tape.constant(&[2], vec![2.0, 4.0]).unwrap();
    x.grad_reverse(0.5).unwrap().mul(&up).unwrap().sum().unwrap().backprop().unwrap();
    assert_eq!(x.grad(), vec![-1.0, -2.0]);

    assert_eq!(x.grad_reverse(-0.1).unwrap_err(), AutogradError::NegativeScale(-0.1));
}

#[test]
fn finite_diff_check_is_exact_for_sum() {
    // Linear f has no truncation error; a coarse step keeps roundoff below 1e-12.
    let tape = Tape::new();
    let x = tape.constant(&[4, 3], random(&[4, 3], 0)).unwrap();
    let err = finite_diff_check(|x| x.sum(), &x, 1.0 / 16.0).unwrap();
    assert!(err < 1e-12, "{err}");
}

#[test]
fn finite_diff_check_rejects_bad_step() {
    let tape = Tape::new();
    let x = tape.constant(&[1], vec![1.0]).unwrap();
    assert!(finite_diff_check(|x| x.sum(), &x, 0.0).is_err());
    let x = tape.constant(&[1], vec![1e-6]).unwrap();
    assert!(matches!(
        finite_diff_check(|x| x.log()?.sum(), &x, 1e-5),
        Err(AutogradError::NonFinite { .. })
    ));
}

const SHAPES: [[usize; 4]; 3] = [[1, 2, 4, 4], [2, 3, 5, 5], [3, 1, 6, 6]];
const SEEDS: [u64; 3] = [0, 1, 2];

fn sweep<F>(name: &str, f: F)
where
    F: Fn(&[usize; 4], u64) -> f64,
{
    for shape in &SHAPES {
        for &seed in &SEEDS {
            let err = f(shape, seed);
            assert!(err < 1e-4, "{name} {shape:?} seed {seed}: {err}");
        }
    }
}

#[test]
fn gradcheck_every_primitive() {
    sweep("matmul", |s, seed| {
        let (m, k, n) = (s[0] + 1, s[1] + 1, s[2]);
        let b = random(&[k, n], seed + 100);
        let a = random(&[m, k], seed);
        let ea = check(&[m, k], a.clone(), |x| {
            probe(&x.matmul(&x.tape().constant(&[k, n], b.clone())?)?)
        });
        let eb = check(&[k, n], b, |y| probe(&y.tape().constant(&[m, k], a.clone())?.matmul(y)?));
        ea.max(eb)
    });
    sweep("bias_add", |s, seed| {
        let bias = random(&[s[1]], seed + 7);
        let ex = check(s, random(s, seed), |x| {
            probe(&x.bias_add(&x.tape().constant(&[s[1]], bias.clone())?, 1)?)
        });
        let x0 = random(s, seed);
        let eb = check(&[s[1]], bias.clone(), |b| {
            probe(&b.tape().constant(s, x0.clone())?.bias_add(b, 1)?)
        });
        ex.max(eb)
    });
    sweep("conv2d", |s, seed| {
        let cout = 2;
        let ws = [cout, s[1], 3, 3];
        let w = random(&ws, seed + 11);
        let x0 = random(s, seed);
        let ex = check(s, x0.clone(), |x| {
            probe(&x.conv2d(&x.tape().constant(&ws, w.clone())?, 2, 1)?)
        });
        let ew = check(&ws, w, |w| probe(&w.tape().constant(s, x0.clone())?.conv2d(w, 1, 1)?));
        ex.max(ew)
    });
    sweep("relu", |s, seed| check(s, away_from_zero(random(s, seed)), |x| probe(&x.relu()?)));
    sweep("softmax", |s, seed| {
        let tau = 0.5 + seed as f64;
        let ex = check(s, random(s, seed), |x| probe(&x.softmax(3, &x.tape().scalar(tau)?)?));
        let x0 = random(s, seed);
        let et = check(&[1], vec![tau], |t| probe(&t.tape().constant(s, x0.clone())?.softmax(1, t)?));
        ex.max(et)
    });
    sweep("log_softmax", |s, seed| {
        let tau = 0.7 + seed as f64;
        let ex = check(s, random(s, seed), |x| probe(&x.log_softmax(2, &x.tape().scalar(tau)?)?));
        let x0 = random(s, seed);
        let et = check(&[1], vec![tau], |t| {
            probe(&t.tape().constant(s, x0.clone())?.log_softmax(3, t)?)
        });
        ex.max(et)
    });
    sweep("log", |s, seed| {
        let v = random(s, seed).into_iter().map(|x| x.abs() + 0.5).collect();
        check(s, v, |x| probe(&x.log()?))
    });
    sweep("exp", |s, seed| check(s, random(s, seed), |x| probe(&x.exp()?)));
    sweep("add/sub/mul", |s, seed| {
        let other = random(s, seed + 3);
        check(s, random(s, seed), |x| {
            let o = x.tape().constant(s, other.clone())?;
            probe(&x.add(&o)?.mul(x)?.sub(&o.mul(x)?)?)
        })
    });
    sweep("scale/add_scalar", |s, seed| {
        check(s, random(s, seed), |x| probe(&x.scale(-1.7)?.add_scalar(0.3)?))
    });
    sweep("mul_prefix", |s, seed| {
        let x0 = random(s, seed);
        let y0 = random(&s[..2], seed + 5);
        let ex = check(s, x0.clone(), |x| {
            probe(&x.mul_prefix(&x.tape().constant(&s[..2], y0.clone())?)?)
        });
        let ey = check(&s[..2], y0, |y| probe(&y.tape().constant(s, x0.clone())?.mul_prefix(y)?));
        ex.max(ey)
    });
    sweep("concat", |s, seed| {
        let other = random(s, seed + 9);
        check(s, random(s, seed), |x| {
            let o = x.tape().constant(s, other.clone())?;
            probe(&DiffTensor::concat(&[&o, x, &x.scale(2.0)?], 1)?)
        })
    });
    sweep("global_avg_pool", |s, seed| check(s, random(s, seed), |x| probe(&x.global_avg_pool()?)));
    sweep("avg_pool2d", |s, seed| {
        let k = if s[2] % 2 == 0 { 2 } else { 5 };
        check(s, random(s, seed), |x| probe(&x.avg_pool2d(k)?))
    });
    sweep("l2_normalize", |s, seed| check(s, random(s, seed), |x| probe(&x.l2_normalize(1e-12)?)));
    sweep("sum/mean/sum_axis", |s, seed| {
        check(s, random(s, seed), |x| {
            let a = x.sum_axis(2)?.sum_axis(0)?;
            probe(&a)?.add(&x.mean()?)?.add(&x.sum()?.scale(0.1)?)
        })
    });
    sweep("reshape/narrow", |s, seed| {
        check(s, random(s, seed), |x| {
            let n = x.numel();
            probe(&x.reshape(&[n])?.narrow(0, 1, n - 2)?)?.add(&probe(&x.narrow(3, 1, 2)?)?)
        })
    });
    sweep("block_sum/block_logsumexp", |s, seed| {
        check(s, random(s, seed), |x| {
            let k = s[3];
            let flat = x.reshape(&[s[0] * s[1] * s[2], k])?;
            let b = if k % 2 == 0 { 2 } else { k };
            probe(&flat.block_sum(b)?)?.add(&probe(&flat.block_logsumexp(b)?)?)
        })
    });
    sweep("grad_reverse", |s, seed| {
        // The reversed rule is not the derivative of the forward map, so
        // compare against −scale × (derivative of the identity path).
        let tape = Tape::new();
        let x = tape.variable(s, random(s, seed)).unwrap();
        probe(&x.grad_reverse(0.3).unwrap()).unwrap().backprop().unwrap();
        let reversed = x.grad();
        let tape = Tape::new();
        let x = tape.variable(s, random(s, seed)).unwrap();
        probe(&x).unwrap().backprop().unwrap();
        reversed
            .iter()
            .zip(x.grad())
            .map(|(r, g)| (r + 0.3 * g).abs())
            .fold(0.0, f64::max)
    });
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let tape = Tape::new();
        let x = tape.variable(&[2, 3, 4, 4], random(&[2, 3, 4, 4], 5)).unwrap();
        let w = tape.variable(&[4, 3, 3, 3], random(&[4, 3, 3, 3], 6)).unwrap();
        let y = x.conv2d_same(&w).unwrap().relu().unwrap().global_avg_pool().unwrap();
        let loss = y.log_softmax_last(2.0).unwrap().sum().unwrap();
        loss.backprop().unwrap();
        (loss.values().to_vec(), x.grad(), w.grad())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        logits in prop::collection::vec(-30.0f64..30.0, 1..40),
        tau in 0.5f64..10.0,
    ) {
        let tape = Tape::new();
        let n = logits.len();
        let x = tape.constant(&[n], logits).unwrap();
        let p = x.softmax_last(tau).unwrap();
        let s: f64 = p.values().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
        prop_assert!(p.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn grad_reverse_is_exact_negated_scaling(
        up in prop::collection::vec(-1e3f64..1e3, 1..20),
        scale in 0.0f64..5.0,
    ) {
        let tape = Tape::new();
        let n = up.len();
        let x = tape.variable(&[n], vec![1.0; n]).unwrap();
        let y = x.grad_reverse(scale).unwrap();
        prop_assert_eq!(y.values(), x.values());
        let u = tape.constant(&[n], up.clone()).unwrap();
        y.mul(&u).unwrap().sum().unwrap().backprop().unwrap();
        let want: Vec<f64> = up.iter().map(|g| -scale * g).collect();
        prop_assert_eq!(x.grad(), want);
    }
}
