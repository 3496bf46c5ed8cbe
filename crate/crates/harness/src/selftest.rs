//! Quick end-to-end health check: gradients, a miniature teacher and
//! distilled student, checkpoint round trip, evaluation parity and report.

use std::fs;
use std::path::{Path, PathBuf};

use cdkd_core::params::{count_params, Role};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::Result;
use crate::eval::evaluate;
use crate::gradsuite::run_suite;
use crate::report::emit_report;
use crate::train::{train_student, train_teacher, CHECKPOINT_FILE};
use cdkd_core::synth::Split;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Small settings that exercise every path in a few seconds.
pub fn miniature_config(out_dir: &Path) -> Result<RunConfig> {
    RunConfig::resolve(
        None,
        &[
            "data.n_train=64".into(),
            "data.n_val=32".into(),
            "optim.epochs=2".into(),
            "optim.batch_size=16".into(),
            format!("paths.out_dir={}", out_dir.display()),
        ],
    )
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name,
        passed,
        detail: detail.into(),
    }
}

/// Runs every check under `scratch`, which is created and left in place.
pub fn run_selftest(scratch: &Path) -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    let grads = run_suite()?;
    checks.push(check(
        "gradients",
        grads.passed(),
        format!("{} cases, max error {:.2e}", grads.cases.len(), grads.max_error()),
    ));

    let teacher_dir = scratch.join("teacher");
    let teacher_cfg = miniature_config(&teacher_dir)?;
    let teacher = train_teacher(&teacher_cfg)?;
    checks.push(check(
        "teacher run",
        teacher.rows.len() == 2 * teacher_cfg.optim.epochs,
        format!("best val pck {:?}", teacher.best_pck),
    ));

    let student_dir = scratch.join("student");
    let mut student_cfg = miniature_config(&student_dir)?;
    student_cfg.teacher = Some(teacher_dir.join(CHECKPOINT_FILE));
    let loaded = Checkpoint::load(&teacher_dir.join(CHECKPOINT_FILE))?;
    let student = train_student(&student_cfg, Some(&loaded))?;
    let taus_ok = student.rows.iter().all(|r| (student_cfg.etht.tau_min..=student_cfg.etht.tau_max).contains(&r.tau));
    checks.push(check("distilled student run", taus_ok, format!("best val pck {:?}", student.best_pck)));

    let path = student_dir.join(CHECKPOINT_FILE);
    let bytes = fs::read(&path)?;
    let again = Checkpoint::from_bytes(&bytes)?.to_bytes()?;
    checks.push(check("checkpoint round trip", bytes == again, format!("{} bytes", bytes.len())));

    let full = evaluate(&student.checkpoint, Split::Val, &student_cfg)?;
    let stripped = evaluate(&student.checkpoint.stripped(), Split::Val, &student_cfg)?;
    let logged = full.at(student_cfg.pck_threshold);
    checks.push(check(
        "evaluation parity",
        full == stripped && logged == student.best_pck,
        format!("eval {logged:?}, logged {:?}", student.best_pck),
    ));

    let baseline_count = count_params(&student.checkpoint.params.with_roles(&Role::INFERENCE), &Role::ALL);
    let inference_count = count_params(&student.checkpoint.params, &Role::INFERENCE);
    checks.push(check(
        "inference parameter count",
        baseline_count == inference_count && inference_count < count_params(&student.checkpoint.params, &Role::ALL),
        format!("{inference_count} inference parameters"),
    ));

    let report = emit_report(&student_dir)?;
    let points_ok = report
        .plots
        .iter()
        .all(|p| p.series.iter().all(|s| s.points.len() == report.epochs));
    checks.push(check("report", points_ok, format!("{} files", report.files.len())));

    Ok(checks)
}

/// A fresh directory under the system temp dir for one selftest.
pub fn scratch_dir() -> PathBuf {
    std::env::temp_dir().join(format!("cdkd-selftest-{}", std::process::id()))
}
