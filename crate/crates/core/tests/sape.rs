use cdkd_autograd::{DiffTensor, Tape};
use cdkd_core::model::{init_rng, InitStream};
use cdkd_core::params::{count_params, ParamSet, Role};
use cdkd_core::sape::{
    branch_names, feature_loss, init_sape, projector_forward, projector_names, sape_forward, sape_merge, sau_weights,
    select_names, SapeConfig, FUSE_BIAS, FUSE_WEIGHT,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const B: usize = 2;
const C: usize = 8;
const SIDE: usize = 4;

fn fixture_config(scale: usize) -> SapeConfig {
    SapeConfig {
        num_projectors: 3,
        kernels: vec![3, 5, 7, 7],
        descriptor_dim: 32,
        scale,
    }
}

/// Seed-0 parameters with small random biases so every bias path matters.
fn fixture_params(cfg: &SapeConfig) -> ParamSet {
    let mut params = ParamSet::new();
    init_sape(&mut params, cfg, C, SIDE, SIDE, &mut init_rng(0, InitStream::Sape)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let names: Vec<String> = params
        .iter()
        .filter(|(n, _)| n.ends_with(".bias"))
        .map(|(n, _)| n.clone())
        .collect();
    for name in names {
        let n = params.get(&name).unwrap().numel();
        params.set_values(&name, (0..n).map(|_| rng.random_range(-0.2..0.2)).collect()).unwrap();
    }
    params
}

fn fixture_input(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..B * C * SIDE * SIDE).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn values(params: &ParamSet, name: &str) -> Vec<f64> {
    params.get(name).unwrap().value.to_vec()
}

/// Second, loop-by-loop implementation of the selection unit.
fn naive_sau(params: &ParamSet, cfg: &SapeConfig, x: &[f64]) -> Vec<f64> {
    let hw = SIDE * SIDE;
    let mut weights = vec![0.0; B * cfg.num_projectors * C];
    for b in 0..B {
        let mut pooled = Vec::new();
        for (i, &k) in cfg.kernels.iter().enumerate() {
            let (wn, bn) = branch_names(i);
            let w = values(params, &wn);
            let bias = values(params, &bn);
            let pad = (k / 2) as isize;
            for o in 0..C {
                let mut total = 0.0;
                for r in 0..SIDE {
                    for c in 0..SIDE {
                        let mut acc = bias[o];
                        for ci in 0..C {
                            for kr in 0..k {
                                for kc in 0..k {
                                    let rr = r as isize + kr as isize - pad;
                                    let cc = c as isize + kc as isize - pad;
                                    if (0..SIDE as isize).contains(&rr) && (0..SIDE as isize).contains(&cc) {
                                        acc += w[((o * C + ci) * k + kr) * k + kc]
                                            * x[((b * C + ci) * SIDE + rr as usize) * SIDE + cc as usize];
                                    }
                                }
                            }
                        }
                        total += acc.max(0.0);
                    }
                }
                pooled.push(total / hw as f64);
            }
        }
        let fw = values(params, FUSE_WEIGHT);
        let fb = values(params, FUSE_BIAS);
        let d = cfg.descriptor_dim;
        // Sum of per-branch dense contributions.
        let mut z = fb.clone();
        for (row, &p) in pooled.iter().enumerate() {
            for j in 0..d {
                z[j] += p * fw[row * d + j];
            }
        }
        for ch in 0..C {
            let scores: Vec<f64> = (0..cfg.num_projectors)
                .map(|k| {
                    let (wn, bn) = select_names(k);
                    let w = values(params, &wn);
                    values(params, &bn)[ch] + (0..d).map(|j| z[j] * w[j * C + ch]).sum::<f64>()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = e.iter().sum();
            for k in 0..cfg.num_projectors {
                weights[(b * cfg.num_projectors + k) * C + ch] = e[k] / total;
            }
        }
    }
    weights
}

fn naive_projector(params: &ParamSet, index: usize, scale: usize, x: &[f64]) -> Vec<f64> {
    let (wn, bn) = projector_names(index);
    let w = values(params, &wn);
    let bias = values(params, &bn);
    let src = SIDE * SIDE;
    let dst = src * scale * scale;
    let mut out = vec![0.0; B * C * dst];
    for plane in 0..B * C {
        for j in 0..dst {
            let mut acc = bias[j];
            for i in 0..src {
                acc += x[plane * src + i] * w[i * dst + j];
            }
            out[plane * dst + j] = acc.max(0.0);
        }
    }
    out
}

#[test]
fn projector_matches_dense_oracle() {
    let cfg = fixture_config(4);
    let params = fixture_params(&cfg);
    let x = fixture_input(0);
    let tape = Tape::new();
    let bound = params.bind(&tape).unwrap();
    let f = tape.constant(&[B, C, SIDE, SIDE], x.clone()).unwrap();
    for k in 0..cfg.num_projectors {
        let out = projector_forward(&bound, &f, k, cfg.scale).unwrap();
        assert_eq!(out.shape(), &[B, C, SIDE * 4, SIDE * 4]);
        for (g, w) in out.values().iter().zip(naive_projector(&params, k, cfg.scale, &x)) {
            assert!((g - w).abs() < 1e-10);
        }
    }
}

#[test]
fn identity_projector_is_relu() {
    let mut params = ParamSet::new();
    let cfg = SapeConfig {
        num_projectors: 1,
        scale: 1,
        ..fixture_config(1)
    };
    cfg.validate(true).unwrap();
    let n = SIDE * SIDE;
    let identity: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
    let (wn, bn) = projector_names(0);
    params.insert(&wn, Role::Sape, &[n, n], identity).unwrap();
    params.insert_zeros(&bn, Role::Sape, &[n]).unwrap();
    let x = fixture_input(3);
    let tape = Tape::new();
    let bound = params.bind(&tape).unwrap();
    let f = tape.constant(&[B, C, SIDE, SIDE], x.clone()).unwrap();
    let out = projector_forward(&bound, &f, 0, 1).unwrap();
    let want: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
    assert_eq!(out.values(), want.as_slice());
}

#[test]
fn unit_scale_is_only_a_test_mode() {
    assert!(fixture_config(1).validate(false).is_err());
    assert!(fixture_config(1).validate(true).is_ok());
    assert!(SapeConfig { kernels: vec![3, 4], ..fixture_config(4) }.validate(false).is_err());
    assert!(SapeConfig { num_projectors: 0, ..fixture_config(4) }.validate(false).is_err());
}

#[test]
fn sau_matches_independent_forward() {
    let cfg = fixture_config(4);
    let params = fixture_params(&cfg);
    let x = fixture_input(0);
    let tape = Tape::new();
    let bound = params.bind(&tape).unwrap();
    let f = tape.constant(&[B, C, SIDE, SIDE], x.clone()).unwrap();
    let w = sau_weights(&bound, &f, &cfg).unwrap();
    assert_eq!(w.shape(), &[B, 3, C]);
    for (g, r) in w.values().iter().zip(naive_sau(&params, &cfg, &x)) {
        assert!((g - r).abs() < 1e-10, "{g} vs {r}");
    }
}

#[test]
fn identical_select_heads_give_uniform_weights() {
    let cfg = fixture_config(4);
    let mut params = fixture_params(&cfg);
    let (w0, b0) = select_names(0);
    let (wv, bv) = (values(&params, &w0), values(&params, &b0));
    for k in 1..cfg.num_projectors {
        let (wn, bn) = select_names(k);
        params.set_values(&wn, wv.clone()).unwrap();
        params.set_values(&bn, bv.clone()).unwrap();
    }
    let tape = Tape::new();
    let bound = params.bind(&tape).unwrap();
    let f = tape.constant(&[B, C, SIDE, SIDE], fixture_input(4)).unwrap();
    let w = sau_weights(&bound, &f, &cfg).unwrap();
    assert!(w.values().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
}

fn projections(tape: &Tape, count: usize, seed: u64) -> Vec<DiffTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v = (0..B * C * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
            tape.constant(&[B, C, 4, 4], v).unwrap()
        })
        .collect()
}

#[test]
fn merge_with_one_projector_returns_it() {
    let tape = Tape::new();
    let p = projections(&tape, 1, 0);
    let w = tape.constant(&[B, 1, C], vec![1.0; B * C]).unwrap();
    assert_eq!(sape_merge(&p, &w).unwrap().values(), p[0].values());
}

#[test]
fn one_hot_weights_select_a_projection() {
    let tape = Tape::new();
    let p = projections(&tape, 3, 1);
    let mut w = vec![0.0; B * 3 * C];
    for b in 0..B {
        for c in 0..C {
            w[(b * 3 + 2) * C + c] = 1.0;
        }
    }
    let w = tape.constant(&[B, 3, C], w).unwrap();
    assert_eq!(sape_merge(&p, &w).unwrap().values(), p[2].values());
}

#[test]
fn merge_rejects_mismatched_weights() {
    let tape = Tape::new();
    let p = projections(&tape, 2, 1);
    let w = tape.constant(&[B, 3, C], vec![1.0 / 3.0; B * 3 * C]).unwrap();
    assert!(sape_merge(&p, &w).is_err());
    assert!(sape_merge(&[], &w).is_err());
}

#[test]
fn feature_loss_examples() {
    let tape = Tape::new();
    let t = |v: Vec<f64>| tape.constant(&[1, 2], v).unwrap();
    let value = |a: Vec<f64>, b: Vec<f64>| feature_loss(&t(a), &t(b)).unwrap().item().unwrap();
    assert!(value(vec![0.3, -2.0], vec![0.3, -2.0]).abs() < 1e-12);
    assert!((value(vec![1.0, 0.0], vec![0.0, 1.0]) - 1.0).abs() < 1e-12);
    assert!((value(vec![1.0, 1.0], vec![-1.0, -1.0]) - 2.0).abs() < 1e-12);
}

#[test]
fn feature_loss_sends_no_gradient_to_the_teacher() {
    let tape = Tape::new();
    let s = tape.variable(&[2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3]).unwrap();
    let t = tape.variable(&[2, 3], vec![1.0, 1.0, -1.0, 0.4, -0.3, 0.9]).unwrap();
    feature_loss(&s, &t).unwrap().backprop().unwrap();
    assert!(s.has_grad());
    assert!(!t.has_grad());
}

#[test]
fn sape_parameters_stay_out_of_inference_count() {
    let cfg = fixture_config(4);
    let params = fixture_params(&cfg);
    assert_eq!(count_params(&params, &Role::INFERENCE), 0);
    assert_eq!(
        count_params(&params, &[Role::Sape]),
        3 * (16 * 256 + 256) + (8 * 8 * (9 + 25 + 49 + 49) + 4 * 8) + (32 * 32 + 32) + 3 * (32 * 8 + 8)
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sau_weights_form_a_simplex(seed in 0u64..1000) {
        let cfg = fixture_config(4);
        let mut params = ParamSet::new();
        init_sape(&mut params, &cfg, C, SIDE, SIDE, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let tape = Tape::new();
        let bound = params.bind(&tape).unwrap();
        let f = tape.constant(&[B, C, SIDE, SIDE], fixture_input(seed + 1)).unwrap();
        let w = sau_weights(&bound, &f, &cfg).unwrap();
        let v = w.values();
        for b in 0..B {
            for c in 0..C {
                let s: f64 = (0..3).map(|k| v[(b * 3 + k) * C + c]).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!((0..3).all(|k| v[(b * 3 + k) * C + c] >= 0.0));
            }
        }
    }

    #[test]
    fn merge_of_identical_projections_is_the_projection(seed in 0u64..1000, raw in prop::collection::vec(0.01f64..5.0, B * 3 * C)) {
        let tape = Tape::new();
        let one = projections(&tape, 1, seed).remove(0);
        let same = vec![one.clone(), one.clone(), one.clone()];
        let mut w = raw.clone();
        for b in 0..B {
            for c in 0..C {
                let s: f64 = (0..3).map(|k| raw[(b * 3 + k) * C + c]).sum();
                (0..3).for_each(|k| w[(b * 3 + k) * C + c] /= s);
            }
        }
        let w = tape.constant(&[B, 3, C], w).unwrap();
        let merged = sape_merge(&same, &w).unwrap();
        for (m, p) in merged.values().iter().zip(one.values()) {
            prop_assert!((m - p).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_loss_is_bounded_and_scale_invariant(
        a in prop::collection::vec(-3.0f64..3.0, 12),
        b in prop::collection::vec(-3.0f64..3.0, 12),
        scale in 1e-3f64..1e3,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let tape = Tape::new();
        let s = tape.constant(&[2, 6], a.clone()).unwrap();
        let t = tape.constant(&[2, 6], b.clone()).unwrap();
        let base = feature_loss(&s, &t).unwrap().item().unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&base));
        let scaled = tape.constant(&[2, 6], a.iter().map(|v| v * scale).collect()).unwrap();
        let again = feature_loss(&scaled, &t).unwrap().item().unwrap();
        prop_assert!((base - again).abs() < 1e-9);
    }

    #[test]
    fn full_path_output_shape(seed in 0u64..50) {
        let cfg = fixture_config(4);
        let mut params = ParamSet::new();
        init_sape(&mut params, &cfg, C, SIDE, SIDE, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let tape = Tape::new();
        let bound = params.bind(&tape).unwrap();
        let f = tape.constant(&[B, C, SIDE, SIDE], fixture_input(seed)).unwrap();
        let out = sape_forward(&bound, &f, &cfg).unwrap();
        prop_assert_eq!(out.shape(), &[B, C, 16, 16]);
    }
}
