use cdkd_core::synth::{
    epoch_order, generate_sample, make_dataset, read_dump, sample_stream, write_dump, SceneConfig, Split,
};
use proptest::prelude::*;

fn quiet_pinned() -> SceneConfig {
    let base = SceneConfig::default();
    SceneConfig {
        noise_std: 0.0,
        pose: base.pose.collapsed(),
        ..base
    }
}

#[test]
fn same_stream_gives_identical_samples() {
    let cfg = SceneConfig::default();
    let a = generate_sample(&mut sample_stream(11, Split::Train, 4), &cfg).unwrap();
    let b = generate_sample(&mut sample_stream(11, Split::Train, 4), &cfg).unwrap();
    assert_eq!(a, b);
    let c = generate_sample(&mut sample_stream(11, Split::Train, 5), &cfg).unwrap();
    assert_ne!(a.high, c.high);
}

#[test]
fn joint_centres_are_bright_without_noise() {
    for keypoints in [5, 9] {
        let cfg = SceneConfig {
            num_keypoints: keypoints,
            ..quiet_pinned()
        };
        let s = generate_sample(&mut sample_stream(0, Split::Train, 0), &cfg).unwrap();
        let side = cfg.high_side;
        for kp in s.keypoints_high.chunks(2) {
            // The joint centre lies inside the pixel whose index is its floor.
            let (c, r) = (kp[0].floor() as usize, kp[1].floor() as usize);
            assert!(s.high[r * side + c] >= 0.9, "pixel at {kp:?} is {}", s.high[r * side + c]);
        }
    }
}

#[test]
fn pinned_pose_ignores_the_seed() {
    let cfg = quiet_pinned();
    let a = generate_sample(&mut sample_stream(0, Split::Train, 0), &cfg).unwrap();
    let b = generate_sample(&mut sample_stream(9, Split::Val, 3), &cfg).unwrap();
    assert_eq!(a.high, b.high);
}

#[test]
fn low_view_is_the_block_mean() {
    let cfg = SceneConfig::default();
    let s = generate_sample(&mut sample_stream(3, Split::Val, 17), &cfg).unwrap();
    let (side, m) = (cfg.high_side, cfg.m);
    let low = side / m;
    for i in 0..low {
        for j in 0..low {
            let mut total = 0.0;
            for di in 0..m {
                for dj in 0..m {
                    total += s.high[(i * m + di) * side + j * m + dj];
                }
            }
            let mean = total / (m * m) as f64;
            assert!((s.low[i * low + j] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn dataset_sizes_and_disjoint_streams() {
    let cfg = SceneConfig::default();
    let (train, val) = make_dataset(5, 40, 12, &cfg).unwrap();
    assert_eq!((train.len(), val.len()), (40, 12));
    assert_eq!(train.split, Split::Train);
    for v in &val.samples {
        assert!(train.samples.iter().all(|t| t.high != v.high));
    }
    let (again, _) = make_dataset(5, 40, 12, &cfg).unwrap();
    assert_eq!(train, again);
    let (other, _) = make_dataset(6, 40, 12, &cfg).unwrap();
    assert_ne!(train.samples, other.samples);
    assert!(make_dataset(5, 0, 12, &cfg).is_err());
}

#[test]
fn full_default_counts() {
    let cfg = SceneConfig::default();
    let (train, val) = make_dataset(0, 2000, 500, &cfg).unwrap();
    assert_eq!((train.len(), val.len()), (2000, 500));
}

#[test]
fn epoch_orders_are_permutations_that_differ() {
    let one = epoch_order(0, 1, 100);
    let two = epoch_order(0, 2, 100);
    assert_ne!(one, two);
    let mut a = one.clone();
    let mut b = two.clone();
    a.sort_unstable();
    b.sort_unstable();
    assert_eq!(a, b);
    assert_eq!(a, (0..100).collect::<Vec<_>>());
    assert_eq!(one, epoch_order(0, 1, 100));
}

#[test]
fn batches_stack_samples_in_order() {
    let cfg = SceneConfig::default();
    let (train, _) = make_dataset(1, 6, 1, &cfg).unwrap();
    let b = train.batch(&[4, 1]).unwrap();
    let hs = cfg.high_side * cfg.high_side;
    assert_eq!(&b.high[..hs], train.samples[4].high.as_slice());
    assert_eq!(&b.high[hs..], train.samples[1].high.as_slice());
    assert_eq!(b.gt_low.batch, 2);
    assert_eq!(&b.gt_low.coords[..10], train.samples[4].keypoints_low.as_slice());
    assert!(train.batch(&[6]).is_err());
}

#[test]
fn dump_round_trips() {
    let cfg = SceneConfig::default();
    let (_, val) = make_dataset(2, 1, 5, &cfg).unwrap();
    let mut bytes = Vec::new();
    write_dump(&val, &mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"CDKS");
    let back = read_dump(&mut bytes.as_slice()).unwrap();
    assert_eq!(back, val);
    let mut again = Vec::new();
    write_dump(&back, &mut again).unwrap();
    assert_eq!(bytes, again);
    assert!(read_dump(&mut &bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(read_dump(&mut bad.as_slice()).is_err());
}

#[test]
fn invalid_scene_configs_are_rejected() {
    let base = SceneConfig::default();
    assert!(SceneConfig { m: 3, ..base.clone() }.validate().is_err());
    assert!(SceneConfig { num_keypoints: 7, ..base.clone() }.validate().is_err());
    assert!(SceneConfig { noise_std: -0.1, ..base.clone() }.validate().is_err());
    assert!(SceneConfig { limb_thickness: 0.0, ..base }.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn samples_respect_their_contracts(seed in any::<u64>(), index in 0u64..1_000_000, m in prop::sample::select(vec![1usize, 2, 4, 8]), nine in any::<bool>()) {
        let cfg = SceneConfig { m, num_keypoints: if nine { 9 } else { 5 }, ..SceneConfig::default() };
        let s = generate_sample(&mut sample_stream(seed, Split::Train, index), &cfg).unwrap();
        let side = cfg.high_side as f64;
        prop_assert!(s.high.iter().chain(&s.low).all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(s.keypoints_high.iter().all(|v| (0.0..side).contains(v)));
        prop_assert_eq!(s.keypoints_high.len(), 2 * cfg.num_keypoints);
        for (h, l) in s.keypoints_high.iter().zip(&s.keypoints_low) {
            prop_assert_eq!(*l, h / m as f64);
        }
        prop_assert!(s.visible.iter().all(|&v| v));
    }
}
