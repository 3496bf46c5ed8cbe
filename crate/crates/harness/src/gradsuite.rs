//! Finite-difference gradient suite over every differentiable primitive and
//! the composite losses used in training.
//!
//! Each case builds a scalar function of one input, evaluates it on fixed
//! pseudo-random data for every shape and seed, and records the worst
//! relative error between the analytic and central-difference gradients.

use cdkd_autograd::{finite_diff_check, DiffTensor, Tape};
use cdkd_core::cca::{logit_loss, total_loss, LossWeights};
use cdkd_core::params::{ParamSet, Role};
use cdkd_core::sape::{feature_loss, init_sape, sape_forward, SapeConfig};
use cdkd_core::simcc::{task_loss, AxisDistribution, DistKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const SHAPES: [[usize; 4]; 3] = [[1, 2, 4, 4], [2, 3, 5, 5], [3, 1, 6, 6]];
pub const SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub name: &'static str,
    pub shape: [usize; 4],
    pub seed: u64,
    pub error: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.error < GRAD_TOL
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub cases: Vec<GradCase>,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.cases.iter().map(|c| c.error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCase> {
        self.cases.iter().filter(|c| !c.passed())
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    /// Distinct case names in the order they ran.
    pub fn names(&self) -> Vec<&'static str> {
        let mut names: Vec<&'static str> = Vec::new();
        for c in &self.cases {
            if !names.contains(&c.name) {
                names.push(c.name);
            }
        }
        names
    }
}

type Shape = [usize; 4];

fn random(shape: &[usize], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

/// Nudges values out of a small band around zero, where relu has its kink.
fn away_from_zero(values: Vec<f64>) -> Vec<f64> {
    values
        .into_iter()
        .map(|x| if x.abs() < 0.05 { x + x.signum() * 0.05 } else { x })
        .collect()
}

/// Random probability rows over the last axis of `shape`.
fn random_distribution(shape: &[usize], seed: u64) -> Vec<f64> {
    let bins = *shape.last().expect("non-empty shape");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    for row in values.chunks_exact_mut(bins) {
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
    }
    values
}

/// Weighted sum so every output element contributes a distinct gradient.
fn probe(y: &DiffTensor) -> cdkd_autograd::Result<DiffTensor> {
    let weights: Vec<f64> = (0..y.numel()).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
    let w = y.tape().constant(y.shape(), weights)?;
    y.mul(&w)?.sum()
}

fn check<F>(shape: &[usize], values: Vec<f64>, f: F) -> Result<f64>
where
    F: Fn(&DiffTensor) -> cdkd_autograd::Result<DiffTensor>,
{
    let tape = Tape::new();
    let x = tape.constant(shape, values)?;
    Ok(finite_diff_check(f, &x, GRAD_STEP)?)
}

/// Core-level functions report [`cdkd_core::CoreError`]; the checker wants
/// autograd errors, so non-autograd failures are surfaced as argument errors.
fn lift<T>(r: cdkd_core::Result<T>) -> cdkd_autograd::Result<T> {
    r.map_err(|e| match e {
        cdkd_core::CoreError::Autograd(inner) => inner,
        other => cdkd_autograd::AutogradError::InvalidArgument {
            op: "gradient suite",
            detail: other.to_string(),
        },
    })
}

type CaseFn = fn(&Shape, u64) -> Result<f64>;

fn primitive_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("matmul", matmul_case),
        ("bias_add", bias_add_case),
        ("conv2d", conv2d_case),
        ("relu", |s, seed| check(s, away_from_zero(random(s, seed)), |x| probe(&x.relu()?))),
        ("softmax", softmax_case),
        ("log_softmax", log_softmax_case),
        ("log", |s, seed| {
            let v = random(s, seed).into_iter().map(|x| x.abs() + 0.5).collect();
            check(s, v, |x| probe(&x.log()?))
        }),
        ("exp", |s, seed| check(s, random(s, seed), |x| probe(&x.exp()?))),
        ("add/sub/mul", |s, seed| {
            let other = random(s, seed + 3);
            check(s, random(s, seed), |x| {
                let o = x.tape().constant(s, other.clone())?;
                probe(&x.add(&o)?.mul(x)?.sub(&o.mul(x)?)?)
            })
        }),
        ("scale/add_scalar", |s, seed| {
            check(s, random(s, seed), |x| probe(&x.scale(-1.7)?.add_scalar(0.3)?))
        }),
        ("mul_prefix", mul_prefix_case),
        ("concat", |s, seed| {
            let other = random(s, seed + 9);
            check(s, random(s, seed), |x| {
                let o = x.tape().constant(s, other.clone())?;
                probe(&DiffTensor::concat(&[&o, x, &x.scale(2.0)?], 1)?)
            })
        }),
        ("global_avg_pool", |s, seed| check(s, random(s, seed), |x| probe(&x.global_avg_pool()?))),
        ("avg_pool2d", |s, seed| {
            let k = if s[2] % 2 == 0 { 2 } else { s[2] };
            check(s, random(s, seed), |x| probe(&x.avg_pool2d(k)?))
        }),
        ("l2_normalize", |s, seed| check(s, random(s, seed), |x| probe(&x.l2_normalize(1e-12)?))),
        ("sum/mean/sum_axis", |s, seed| {
            check(s, random(s, seed), |x| {
                let reduced = x.sum_axis(2)?.sum_axis(0)?;
                probe(&reduced)?.add(&x.mean()?)?.add(&x.sum()?.scale(0.1)?)
            })
        }),
        ("reshape/narrow", |s, seed| {
            check(s, random(s, seed), |x| {
                let n = x.numel();
                probe(&x.reshape(&[n])?.narrow(0, 1, n - 2)?)?.add(&probe(&x.narrow(3, 1, 2)?)?)
            })
        }),
        ("block_sum/block_logsumexp", |s, seed| {
            check(s, random(s, seed), |x| {
                let width = s[3];
                let flat = x.reshape(&[s[0] * s[1] * s[2], width])?;
                let block = if width % 2 == 0 { 2 } else { width };
                probe(&flat.block_sum(block)?)?.add(&probe(&flat.block_logsumexp(block)?)?)
            })
        }),
        ("grad_reverse", grad_reverse_case),
    ]
}

fn composite_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("task_loss", task_loss_case),
        ("feature_loss", feature_loss_case),
        ("sape_feature_loss", sape_feature_loss_case),
        ("logit_loss/student", logit_student_case),
        ("logit_loss/tau", logit_tau_case),
        ("total_loss", total_loss_case),
    ]
}

fn matmul_case(s: &Shape, seed: u64) -> Result<f64> {
    let (m, k, n) = (s[0] + 1, s[1] + 1, s[2]);
    let a = random(&[m, k], seed);
    let b = random(&[k, n], seed + 100);
    let ea = check(&[m, k], a.clone(), |x| probe(&x.matmul(&x.tape().constant(&[k, n], b.clone())?)?))?;
    let eb = check(&[k, n], b, |y| probe(&y.tape().constant(&[m, k], a.clone())?.matmul(y)?))?;
    Ok(ea.max(eb))
}

fn bias_add_case(s: &Shape, seed: u64) -> Result<f64> {
    let bias = random(&[s[1]], seed + 7);
    let input = random(s, seed);
    let ex = check(s, input.clone(), |x| probe(&x.bias_add(&x.tape().constant(&[s[1]], bias.clone())?, 1)?))?;
    let eb = check(&[s[1]], bias, |b| probe(&b.tape().constant(s, input.clone())?.bias_add(b, 1)?))?;
    Ok(ex.max(eb))
}

fn conv2d_case(s: &Shape, seed: u64) -> Result<f64> {
    let ws = [2, s[1], 3, 3];
    let weight = random(&ws, seed + 11);
    let input = random(s, seed);
    let ex = check(s, input.clone(), |x| probe(&x.conv2d(&x.tape().constant(&ws, weight.clone())?, 2, 1)?))?;
    let ew = check(&ws, weight, |w| probe(&w.tape().constant(s, input.clone())?.conv2d(w, 1, 1)?))?;
    Ok(ex.max(ew))
}

fn softmax_case(s: &Shape, seed: u64) -> Result<f64> {
    let tau = 0.5 + seed as f64;
    let input = random(s, seed);
    let ex = check(s, input.clone(), |x| probe(&x.softmax(3, &x.tape().scalar(tau)?)?))?;
    let et = check(&[1], vec![tau], |t| probe(&t.tape().constant(s, input.clone())?.softmax(1, t)?))?;
    Ok(ex.max(et))
}

fn log_softmax_case(s: &Shape, seed: u64) -> Result<f64> {
    let tau = 0.7 + seed as f64;
    let input = random(s, seed);
    let ex = check(s, input.clone(), |x| probe(&x.log_softmax(2, &x.tape().scalar(tau)?)?))?;
    let et = check(&[1], vec![tau], |t| probe(&t.tape().constant(s, input.clone())?.log_softmax(3, t)?))?;
    Ok(ex.max(et))
}

fn mul_prefix_case(s: &Shape, seed: u64) -> Result<f64> {
    let input = random(s, seed);
    let factor = random(&s[..2], seed + 5);
    let ex = check(s, input.clone(), |x| probe(&x.mul_prefix(&x.tape().constant(&s[..2], factor.clone())?)?))?;
    let ef = check(&s[..2], factor, |y| probe(&y.tape().constant(s, input.clone())?.mul_prefix(y)?))?;
    Ok(ex.max(ef))
}

/// The reversed rule is not the derivative of its forward map, so it is
/// compared with `−scale` times the gradient of the identity path.
fn grad_reverse_case(s: &Shape, seed: u64) -> Result<f64> {
    let scale = 0.3 + 0.2 * seed as f64;
    let gradient = |reverse: bool| -> Result<Vec<f64>> {
        let tape = Tape::new();
        let x = tape.variable(s, random(s, seed))?;
        let y = if reverse { x.grad_reverse(scale)? } else { x.clone() };
        probe(&y)?.backprop()?;
        Ok(x.grad())
    };
    let reversed = gradient(true)?;
    let plain = gradient(false)?;
    Ok(reversed.iter().zip(&plain).map(|(r, g)| (r + scale * g).abs()).fold(0.0, f64::max))
}

/// Logits `[B, K, bins]` for both axes, packed along the last axis.
fn axis_targets(s: &Shape, seed: u64) -> Result<(AxisDistribution, AxisDistribution, Vec<bool>)> {
    let (batch, keypoints, bins) = (s[0], s[1], s[2] * 2);
    let tx = AxisDistribution::new(batch, keypoints, bins, DistKind::Probabilities, random_distribution(&[batch, keypoints, bins], seed + 21))?;
    let ty = AxisDistribution::new(batch, keypoints, bins, DistKind::Probabilities, random_distribution(&[batch, keypoints, bins], seed + 22))?;
    let mut visible: Vec<bool> = (0..batch * keypoints).map(|i| (i + seed as usize) % 3 != 0).collect();
    visible[0] = true;
    Ok((tx, ty, visible))
}

fn split_axes(x: &DiffTensor, bins: usize) -> cdkd_autograd::Result<(DiffTensor, DiffTensor)> {
    Ok((x.narrow(2, 0, bins)?, x.narrow(2, bins, bins)?))
}

fn task_loss_case(s: &Shape, seed: u64) -> Result<f64> {
    let (tx, ty, visible) = axis_targets(s, seed)?;
    let bins = tx.bins;
    let shape = [s[0], s[1], 2 * bins];
    check(&shape, random(&shape, seed), |x| {
        let (lx, ly) = split_axes(x, bins)?;
        lift(task_loss((&lx, &ly), (&tx, &ty), &visible))
    })
}

fn feature_loss_case(s: &Shape, seed: u64) -> Result<f64> {
    let teacher = random(s, seed + 31);
    check(s, random(s, seed), |x| {
        let t = x.tape().constant(s, teacher.clone())?;
        lift(feature_loss(x, &t))
    })
}

/// The student feature passes through the projector ensemble before the
/// cosine distance, exercising convolution branches, pooling and merging.
fn sape_feature_loss_case(s: &Shape, seed: u64) -> Result<f64> {
    let cfg = SapeConfig {
        num_projectors: 2 + seed as usize % 2,
        kernels: vec![1, 3, 5],
        descriptor_dim: 4,
        scale: 2,
    };
    let mut params = ParamSet::new();
    init_sape(&mut params, &cfg, s[1], s[2], s[3], &mut ChaCha8Rng::seed_from_u64(seed + 41))?;
    let names: Vec<String> = params.iter().map(|(name, _)| name.clone()).collect();
    for (i, name) in names.iter().enumerate() {
        let p = params.get(name)?;
        let (shape, role) = (p.shape.clone(), p.role);
        debug_assert_eq!(role, Role::Sape);
        // Nonzero biases keep every path active and distinct.
        params.set_values(name, random(&shape, seed * 1000 + i as u64).iter().map(|v| v * 0.5).collect())?;
    }
    params.freeze();
    let teacher_shape = [s[0], s[1], s[2] * cfg.scale, s[3] * cfg.scale];
    let teacher = random(&teacher_shape, seed + 51);
    check(s, random(s, seed), |x| {
        let bound = lift(params.bind(x.tape()))?;
        let projected = lift(sape_forward(&bound, x, &cfg))?;
        let t = x.tape().constant(&teacher_shape, teacher.clone())?;
        lift(feature_loss(&projected, &t))
    })
}

fn merge_ratio(seed: u64) -> usize {
    [1, 2, 4][seed as usize % 3]
}

fn logit_student_case(s: &Shape, seed: u64) -> Result<f64> {
    let m = merge_ratio(seed);
    let student = [s[0], s[1], s[2]];
    let teacher = [s[0], s[1], s[2] * m];
    let t_logits = random(&teacher, seed + 61);
    let tau = 1.5 + seed as f64;
    check(&student, random(&student, seed), |x| {
        let tape = x.tape();
        let t = tape.constant(&teacher, t_logits.clone())?;
        lift(logit_loss(&[t], &[x.clone()], &tape.scalar(tau)?, m))
    })
}

fn logit_tau_case(s: &Shape, seed: u64) -> Result<f64> {
    let m = merge_ratio(seed);
    let student = [s[0], s[1], s[2]];
    let teacher = [s[0], s[1], s[2] * m];
    let (t_logits, s_logits) = (random(&teacher, seed + 71), random(&student, seed + 72));
    check(&[1], vec![1.2 + seed as f64], |tau| {
        let tape = tau.tape();
        let t = tape.constant(&teacher, t_logits.clone())?;
        let st = tape.constant(&student, s_logits.clone())?;
        lift(logit_loss(&[t], &[st], tau, m))
    })
}

/// Student logits feed the task and logit terms while a projection of the
/// same logits feeds the feature term, so all three paths reach the input.
fn total_loss_case(s: &Shape, seed: u64) -> Result<f64> {
    let (tx, ty, visible) = axis_targets(s, seed)?;
    let bins = tx.bins;
    let m = merge_ratio(seed);
    let shape = [s[0], s[1], 2 * bins];
    let teacher_shape = [s[0], s[1], bins * m];
    let teacher_x = random(&teacher_shape, seed + 81);
    let teacher_y = random(&teacher_shape, seed + 82);
    let feature_target = random(&shape, seed + 83);
    let weights = LossWeights { alpha: 0.7, beta: 1.3 };
    let tau = 2.0;
    check(&shape, random(&shape, seed), |x| {
        let tape = x.tape();
        let (lx, ly) = split_axes(x, bins)?;
        let ori = lift(task_loss((&lx, &ly), (&tx, &ty), &visible))?;
        let fea = lift(feature_loss(&x.scale(1.5)?, &tape.constant(&shape, feature_target.clone())?))?;
        let teachers = [
            tape.constant(&teacher_shape, teacher_x.clone())?,
            tape.constant(&teacher_shape, teacher_y.clone())?,
        ];
        let logit = lift(logit_loss(&teachers, &[lx, ly], &tape.scalar(tau)?, m))?;
        lift(total_loss(&ori, &fea, &logit, &weights))
    })
}

/// Runs every case over all shapes and seeds.
pub fn run_suite() -> Result<GradReport> {
    let mut report = GradReport::default();
    for (name, case) in primitive_cases().into_iter().chain(composite_cases()) {
        for shape in &SHAPES {
            for &seed in &SEEDS {
                let error = case(shape, seed)?;
                report.cases.push(GradCase { name, shape: *shape, seed, error });
            }
        }
    }
    Ok(report)
}
