use std::path::Path;

use cdkd_core::etht::TAU_PARAM;
use cdkd_core::params::{count_params, Role};
use cdkd_harness::checkpoint::Checkpoint;
use cdkd_harness::config::RunConfig;
use cdkd_harness::metrics::read_metrics;
use cdkd_harness::train::{build_data, run, train_student, train_teacher, Stage, Trainer, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE};
use cdkd_harness::HarnessError;

fn small(out: &Path, extra: &[&str]) -> RunConfig {
    let mut flags: Vec<String> = vec![
        "data.n_train=48".into(),
        "data.n_val=24".into(),
        "optim.batch_size=16".into(),
        "optim.epochs=2".into(),
        format!("paths.out_dir={}", out.display()),
    ];
    flags.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::resolve(None, &flags).unwrap()
}

fn teacher(dir: &Path) -> Checkpoint {
    let cfg = small(&dir.join("teacher"), &["optim.epochs=1"]);
    train_teacher(&cfg).unwrap().checkpoint
}

#[test]
fn zero_epochs_saves_the_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &["optim.epochs=0"]);
    let out = train_teacher(&cfg).unwrap();
    assert!(out.rows.is_empty());
    assert_eq!(out.best_pck, None);
    let init = cdkd_harness::train::build_net(&cfg, Stage::Teacher).unwrap().init(cfg.train_seed).unwrap();
    for ((n, a), (_, b)) in out.checkpoint.params.iter().zip(init.iter()) {
        assert_eq!(a.value, b.value, "{n}");
    }
    let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert_eq!(std::fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap(), cfg.echo());
    assert!(dir.path().join(CHECKPOINT_FILE).exists());
}

#[test]
fn zero_weights_reproduce_the_baseline_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = teacher(dir.path());
    let flags = ["optim.epochs=3", "distill.alpha=0", "distill.beta=0"];
    let base = train_student(&small(&dir.path().join("base"), &flags), None).unwrap();
    let distilled = train_student(&small(&dir.path().join("kd"), &flags), Some(&ckpt)).unwrap();
    assert_eq!(base.step_losses.len(), 9);
    assert_eq!(base.step_losses.len(), distilled.step_losses.len());
    for (i, (a, b)) in base.step_losses.iter().zip(&distilled.step_losses).enumerate() {
        assert!((a - b).abs() <= 1e-9, "step {i}: {a} vs {b}");
    }
}

#[test]
fn runs_are_deterministic_to_the_byte() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = teacher(dir.path());
    // The checkpoint embeds the run directory, so both runs use the same one.
    let out = dir.path().join("run");
    let mut outputs = Vec::new();
    for _ in 0..2 {
        train_student(&small(&out, &[]), Some(&ckpt)).unwrap();
        outputs.push((std::fs::read(out.join(METRICS_FILE)).unwrap(), std::fs::read(out.join(CHECKPOINT_FILE)).unwrap()));
    }
    assert!(outputs[0].0 == outputs[1].0, "metrics differ");
    assert!(outputs[0].1 == outputs[1].1, "checkpoints differ");
    let bytes = &outputs[0].1;
    assert!(&Checkpoint::from_bytes(bytes).unwrap().to_bytes().unwrap() == bytes);
}

fn trainer(dir: &Path, ckpt: &Checkpoint, extra: &[&str]) -> Trainer {
    let cfg = small(dir, extra);
    let (train, val) = build_data(&cfg).unwrap();
    Trainer::new(&cfg, Stage::Student, Some(ckpt), train, val).unwrap()
}

#[test]
fn one_step_moves_weights_down_and_temperature_up_the_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = teacher(dir.path());
    let indices: Vec<usize> = (0..16).collect();
    let epoch = 1;
    let flags = ["optim.epochs=3", "etht.tau_init=2.0"];
    let mut t = trainer(dir.path(), &ckpt, &flags);
    let before = t.params().clone();
    let tau0 = t.tau();
    let xi = t.xi(epoch).unwrap();
    assert!(xi > 0.0);
    t.step(&indices, epoch).unwrap();
    let lr = t.config().optim.lr_at(epoch);
    for (name, p) in t.params().iter() {
        let g = p.grad.as_ref().unwrap();
        let old = before.get(name).unwrap();
        if p.role == Role::Etht {
            continue;
        }
        for ((new, old), g) in p.value.iter().zip(old.value.iter()).zip(g) {
            assert_eq!(*new, old - lr * g, "{name}");
        }
    }

    // The loss slope in τ, measured with the temperature held fixed.
    // The slope is small at this point of training, so a wide step keeps
    // rounding noise in the difference well below it.
    let h = 1e-3;
    let loss_at = |tau: f64| {
        let fixed = format!("etht.tau_init={tau}");
        let mut f = trainer(dir.path(), &ckpt, &["optim.epochs=3", "etht.enabled=false", &fixed]);
        f.step(&indices, epoch).unwrap().total
    };
    let slope = (loss_at(tau0 + h) - loss_at(tau0 - h)) / (2.0 * h);
    let moved = t.tau() - tau0;
    assert!(moved * slope > 0.0, "τ moved {moved} against slope {slope}");
    assert!((moved - lr * xi * slope).abs() <= 1e-2 * moved.abs(), "{moved} vs {}", lr * xi * slope);
    assert_eq!(t.params().get(TAU_PARAM).unwrap().value[0], t.tau());
}

#[test]
fn temperature_is_untouched_on_the_first_linear_step() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = teacher(dir.path());
    let mut t = trainer(dir.path(), &ckpt, &["etht.schedule=linear"]);
    assert_eq!(t.xi(0).unwrap(), 0.0);
    let tau0 = t.tau();
    t.step(&(0..16).collect::<Vec<_>>(), 0).unwrap();
    assert_eq!(t.tau(), tau0);
}

#[test]
fn logged_temperature_and_difficulty_respect_their_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = teacher(dir.path());
    for schedule in ["linear", "half-cosine"] {
        let out_dir = dir.path().join(schedule);
        let flag = format!("etht.schedule={schedule}");
        train_student(&small(&out_dir, &["optim.epochs=4", "etht.tau_init=9.99", "optim.lr=0.5", &flag]), Some(&ckpt)).unwrap();
        let rows = read_metrics(std::fs::File::open(out_dir.join(METRICS_FILE)).unwrap()).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| (0.5..=10.0).contains(&r.tau)));
        let xis: Vec<f64> = rows.iter().filter(|r| r.split == "train").map(|r| r.xi).collect();
        assert!(xis.windows(2).all(|w| w[1] >= w[0]), "{xis:?}");
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.pck)));
    }
}

#[test]
fn distillation_adds_no_inference_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = teacher(dir.path());
    let cfg = small(&dir.path().join("s"), &["optim.epochs=1"]);
    let base = train_student(&cfg, None).unwrap();
    let kd = train_student(&cfg, Some(&ckpt)).unwrap();
    let inference = |c: &Checkpoint| count_params(&c.params, &Role::INFERENCE);
    assert_eq!(inference(&base.checkpoint), inference(&kd.checkpoint));
    assert!(count_params(&kd.checkpoint.params, &Role::ALL) > count_params(&base.checkpoint.params, &Role::ALL));
}

#[test]
fn incompatible_teachers_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let narrow = small(&dir.path().join("narrow"), &["optim.epochs=0", "model.stage_channels=4,4,4"]);
    let odd = train_teacher(&narrow).unwrap().checkpoint;
    let cfg = small(&dir.path().join("s"), &[]);
    let (train, val) = build_data(&cfg).unwrap();
    let e = Trainer::new(&cfg, Stage::Student, Some(&odd), train.clone(), val.clone()).err().unwrap();
    assert_eq!(e.exit_code(), 4, "{e}");
    let mut missing = teacher(dir.path());
    missing.params = missing.params.with_roles(&[Role::Backbone]);
    let e = Trainer::new(&cfg, Stage::Student, Some(&missing), train.clone(), val.clone()).err().unwrap();
    assert_eq!(e.exit_code(), 4, "{e}");
    let e = Trainer::new(&cfg, Stage::Teacher, Some(&odd), train, val).err().unwrap();
    assert_eq!(e.exit_code(), 2, "{e}");
}

#[test]
fn divergence_aborts_with_a_diagnostic_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &["optim.lr=1e300", "optim.epochs=3"]);
    let (train, val) = build_data(&cfg).unwrap();
    let e = run(Trainer::new(&cfg, Stage::Teacher, None, train, val).unwrap(), dir.path()).err().unwrap();
    assert!(matches!(e, HarnessError::Numeric(_)), "{e}");
    assert_eq!(e.exit_code(), 3);
    let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let last = text.lines().last().unwrap();
    assert!(last.contains("NaN"), "{last}");
}
