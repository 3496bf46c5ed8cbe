//! Cross-class alignment and the logit distillation loss.
//!
//! A teacher seeing an input `m` times larger predicts over `m` times more
//! bins. Summing each run of `m` adjacent teacher probabilities yields a
//! distribution over the student's bins, which the student then matches
//! under a shared temperature.

use cdkd_autograd::DiffTensor;

use crate::error::{CoreError, Result};
use crate::simcc::{AxisDistribution, DistKind};

/// Hard limits on the distillation temperature.
pub const TAU_MIN: f64 = 0.5;
pub const TAU_MAX: f64 = 10.0;

/// Sums every `m` adjacent entries of each row.
pub fn merge_classes(p: &AxisDistribution, m: usize) -> Result<AxisDistribution> {
    if p.kind != DistKind::Probabilities {
        return Err(CoreError::Kind { expected: "probabilities" });
    }
    if m == 0 || p.bins % m != 0 {
        return Err(CoreError::Indivisible { bins: p.bins, m });
    }
    if p.values.iter().any(|&v| v < 0.0) {
        return Err(CoreError::NegativeProbability);
    }
    let merged = p.values.chunks_exact(m).map(|c| c.iter().sum()).collect();
    AxisDistribution::new(p.batch, p.keypoints, p.bins / m, DistKind::Probabilities, merged)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(CoreError::Config(format!(
                "loss weights must be finite and nonnegative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// `τ² · mean_rows KL(merge(softmax(t/τ), m) ‖ softmax(s/τ))` over every
/// axis pair. Teacher logits are detached; gradient reaches the student
/// logits and `tau`.
pub fn logit_loss(teacher: &[DiffTensor], student: &[DiffTensor], tau: &DiffTensor, m: usize) -> Result<DiffTensor> {
    if teacher.is_empty() || teacher.len() != student.len() {
        return Err(CoreError::Shape(format!(
            "{} teacher axes against {} student axes",
            teacher.len(),
            student.len()
        )));
    }
    let t = tau.item()?;
    if !(TAU_MIN..=TAU_MAX).contains(&t) {
        return Err(CoreError::TauOutOfBounds { tau: t, min: TAU_MIN, max: TAU_MAX });
    }
    let rows: usize = student.iter().map(|s| s.numel() / s.shape().last().unwrap()).sum();
    let mut total: Option<DiffTensor> = None;
    for (te, st) in teacher.iter().zip(student) {
        let (ts, ss) = (te.shape(), st.shape());
        let ratio_ok = ts.len() == ss.len()
            && ts[..ts.len() - 1] == ss[..ss.len() - 1]
            && m > 0
            && ts[ts.len() - 1] == m * ss[ss.len() - 1];
        if !ratio_ok {
            return Err(CoreError::Shape(format!(
                "teacher {ts:?} must have {m}× the bins of student {ss:?}"
            )));
        }
        let axis = ss.len() - 1;
        let log_pt = te.detach().log_softmax(axis, tau)?.block_logsumexp(m)?;
        let pt = log_pt.exp()?;
        let log_ps = st.log_softmax(axis, tau)?;
        let kl = pt.mul(&log_pt.sub(&log_ps)?)?.sum()?;
        total = Some(match total {
            Some(acc) => acc.add(&kl)?,
            None => kl,
        });
    }
    let mean = total.expect("non-empty").scale(1.0 / rows as f64)?;
    Ok(mean.mul_prefix(&tau.mul(tau)?)?)
}

/// `L_ori + α·L_fea + β·L_logit`.
pub fn total_loss(ori: &DiffTensor, fea: &DiffTensor, logit: &DiffTensor, w: &LossWeights) -> Result<DiffTensor> {
    w.validate()?;
    check_scalar_terms(&[ori, fea, logit])?;
    Ok(ori.add(&fea.scale(w.alpha)?)?.add(&logit.scale(w.beta)?)?)
}

/// As [`total_loss`] with the weights given as single-element tensors, for
/// runs that learn them.
pub fn total_loss_with(
    ori: &DiffTensor,
    fea: &DiffTensor,
    logit: &DiffTensor,
    alpha: &DiffTensor,
    beta: &DiffTensor,
) -> Result<DiffTensor> {
    check_scalar_terms(&[ori, fea, logit, alpha, beta])?;
    Ok(ori.add(&fea.mul_prefix(alpha)?)?.add(&logit.mul_prefix(beta)?)?)
}

fn check_scalar_terms(terms: &[&DiffTensor]) -> Result<()> {
    for t in terms {
        if t.numel() != 1 {
            return Err(CoreError::Shape(format!("loss term must be scalar, got {:?}", t.shape())));
        }
        if !t.values()[0].is_finite() {
            return Err(CoreError::NonFinite("total_loss"));
        }
    }
    Ok(())
}
