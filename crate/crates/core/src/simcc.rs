//! Coordinate classification: each keypoint coordinate is predicted as a
//! distribution over `round(k · side)` bins per axis.

use cdkd_autograd::DiffTensor;
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::params::{Bound, ParamSet, Role};

#[derive(Debug, Clone, PartialEq)]
pub struct SimccConfig {
    /// Bins per input pixel.
    pub split_factor: f64,
    pub num_keypoints: usize,
    /// Width of the Gaussian training target, in bins.
    pub label_sigma: f64,
}

impl Default for SimccConfig {
    fn default() -> Self {
        Self {
            split_factor: 2.0,
            num_keypoints: 5,
            label_sigma: 2.0,
        }
    }
}

impl SimccConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split_factor > 0.0) || !self.split_factor.is_finite() {
            return Err(CoreError::Config(format!(
                "split factor must be positive, got {}",
                self.split_factor
            )));
        }
        if !(self.label_sigma > 0.0) || !self.label_sigma.is_finite() {
            return Err(CoreError::Config(format!(
                "label sigma must be positive, got {}",
                self.label_sigma
            )));
        }
        if self.num_keypoints == 0 {
            return Err(CoreError::Config("at least one keypoint is required".into()));
        }
        Ok(())
    }

    /// Bins per axis for an input of side `side`.
    pub fn bins(&self, side: usize) -> Result<usize> {
        let bins = (self.split_factor * side as f64).round() as usize;
        if bins < 2 {
            return Err(CoreError::Config(format!(
                "side {side} at split factor {} gives {bins} bins; need at least 2",
                self.split_factor
            )));
        }
        Ok(bins)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistKind {
    Logits,
    Probabilities,
}

/// Per-keypoint distributions over the bins of one axis, `[B, K, bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisDistribution {
    pub batch: usize,
    pub keypoints: usize,
    pub bins: usize,
    pub kind: DistKind,
    pub values: Vec<f64>,
}

impl AxisDistribution {
    pub fn new(batch: usize, keypoints: usize, bins: usize, kind: DistKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != batch * keypoints * bins || bins == 0 {
            return Err(CoreError::Shape(format!(
                "[{batch}, {keypoints}, {bins}] needs {} values, got {}",
                batch * keypoints * bins,
                values.len()
            )));
        }
        Ok(Self {
            batch,
            keypoints,
            bins,
            kind,
            values,
        })
    }

    /// Copies the values of a `[B, K, bins]` tensor.
    pub fn from_tensor(t: &DiffTensor, kind: DistKind) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(CoreError::Shape(format!("expected [B, K, bins], got {s:?}")));
        }
        Self::new(s[0], s[1], s[2], kind, t.values().to_vec())
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.keypoints, self.bins]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.bins)
    }

    /// Checks the probability contract: nonnegative rows summing to 1 ± 1e-9.
    pub fn check_probabilities(&self) -> Result<()> {
        if self.kind != DistKind::Probabilities {
            return Err(CoreError::Kind { expected: "probabilities" });
        }
        for row in self.rows() {
            if row.iter().any(|&p| p < 0.0) {
                return Err(CoreError::NegativeProbability);
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(CoreError::Shape(format!("probability row sums to {s}")));
            }
        }
        Ok(())
    }
}

/// Keypoint coordinates `[B, K, 2]` (x then y) in pixels of one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub batch: usize,
    pub keypoints: usize,
    pub coords: Vec<f64>,
    pub visible: Vec<bool>,
}

impl KeypointSet {
    pub fn new(batch: usize, keypoints: usize, coords: Vec<f64>, visible: Vec<bool>) -> Result<Self> {
        if coords.len() != batch * keypoints * 2 || visible.len() != batch * keypoints {
            return Err(CoreError::Shape(format!(
                "keypoint set [{batch}, {keypoints}] with {} coordinates and {} flags",
                coords.len(),
                visible.len()
            )));
        }
        Ok(Self {
            batch,
            keypoints,
            coords,
            visible,
        })
    }

    pub fn xy(&self, index: usize) -> (f64, f64) {
        (self.coords[2 * index], self.coords[2 * index + 1])
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

pub fn head_param_names(axis: char) -> (String, String) {
    (format!("head.{axis}.weight"), format!("head.{axis}.bias"))
}

/// Registers one dense layer per axis mapping the flattened feature
/// (`feature_len` values) to `num_keypoints · bins` logits.
pub fn init_head<R: Rng>(
    params: &mut ParamSet,
    feature_len: usize,
    bins: usize,
    cfg: &SimccConfig,
    rng: &mut R,
) -> Result<()> {
    let out = cfg.num_keypoints * bins;
    for axis in ['x', 'y'] {
        let (w, b) = head_param_names(axis);
        params.insert_glorot(&w, Role::Head, &[feature_len, out], feature_len, out, rng)?;
        params.insert_zeros(&b, Role::Head, &[out])?;
    }
    Ok(())
}

/// Flattens the feature and applies the per-axis dense layers, returning
/// logits `[B, K, bins]` for x and for y.
pub fn head_forward(bound: &Bound, feature: &DiffTensor, cfg: &SimccConfig) -> Result<(DiffTensor, DiffTensor)> {
    let batch = feature.shape()[0];
    let flat = feature.reshape(&[batch, feature.numel() / batch])?;
    let mut out = Vec::with_capacity(2);
    for axis in ['x', 'y'] {
        let (w, b) = head_param_names(axis);
        let w = bound.get(&w)?;
        let total = w.shape()[1];
        if total % cfg.num_keypoints != 0 || total / cfg.num_keypoints < 2 {
            return Err(CoreError::Config(format!(
                "head width {total} does not give at least 2 bins for {} keypoints",
                cfg.num_keypoints
            )));
        }
        let logits = flat.matmul(w)?.bias_add(bound.get(&b)?, 1)?;
        out.push(logits.reshape(&[batch, cfg.num_keypoints, total / cfg.num_keypoints])?);
    }
    let y = out.pop().expect("two axes");
    let x = out.pop().expect("two axes");
    Ok((x, y))
}

/// Gaussian targets over the bins of each axis, centred at `coordinate · k`
/// with standard deviation `label_sigma` bins.
pub fn encode_labels(
    gt: &KeypointSet,
    cfg: &SimccConfig,
    side: usize,
) -> Result<(AxisDistribution, AxisDistribution)> {
    let bins = cfg.bins(side)?;
    let n = gt.batch * gt.keypoints;
    let mut xs = vec![0.0; n * bins];
    let mut ys = vec![0.0; n * bins];
    for i in 0..n {
        let (x, y) = gt.xy(i);
        for (value, row) in [(x, &mut xs), (y, &mut ys)] {
            if !(0.0..side as f64).contains(&value) {
                return Err(CoreError::OutOfRange { value, side });
            }
            gaussian_row(value * cfg.split_factor, cfg.label_sigma, &mut row[i * bins..(i + 1) * bins]);
        }
    }
    Ok((
        AxisDistribution::new(gt.batch, gt.keypoints, bins, DistKind::Probabilities, xs)?,
        AxisDistribution::new(gt.batch, gt.keypoints, bins, DistKind::Probabilities, ys)?,
    ))
}

/// Writes a normalized Gaussian over bin indices. Exponents are shifted by
/// the smallest squared distance so even a vanishing sigma stays finite.
fn gaussian_row(center: f64, sigma: f64, row: &mut [f64]) {
    let d2 = |i: usize| (i as f64 - center).powi(2);
    let nearest = (0..row.len()).map(d2).fold(f64::INFINITY, f64::min);
    let denom = 2.0 * sigma * sigma;
    for (i, v) in row.iter_mut().enumerate() {
        *v = (-(d2(i) - nearest) / denom).exp();
    }
    let z: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= z);
}

/// Mean of `KL(target ‖ softmax(pred))` over visible keypoints and both axes.
///
/// `visible` has one flag per `(batch, keypoint)`.
pub fn task_loss(
    pred: (&DiffTensor, &DiffTensor),
    target: (&AxisDistribution, &AxisDistribution),
    visible: &[bool],
) -> Result<DiffTensor> {
    let count = visible.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(CoreError::NoVisibleKeypoints);
    }
    let norm = 1.0 / (2 * count) as f64;
    let mut total: Option<DiffTensor> = None;
    for (logits, t) in [(pred.0, target.0), (pred.1, target.1)] {
        if t.kind != DistKind::Probabilities {
            return Err(CoreError::Kind { expected: "probabilities" });
        }
        if logits.shape() != t.shape() || visible.len() != t.batch * t.keypoints {
            return Err(CoreError::Shape(format!(
                "prediction {:?} against target {:?} with {} visibility flags",
                logits.shape(),
                t.shape(),
                visible.len()
            )));
        }
        let mut masked = t.values.clone();
        let mut neg_entropy = 0.0;
        for (row, &vis) in masked.chunks_exact_mut(t.bins).zip(visible) {
            if vis {
                neg_entropy += row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
            } else {
                row.iter_mut().for_each(|p| *p = 0.0);
            }
        }
        let tape = logits.tape();
        let weights = tape.constant(logits.shape(), masked)?;
        let cross = logits.log_softmax_last(1.0)?.mul(&weights)?.sum()?;
        let kl = cross.scale(-norm)?.add_scalar(neg_entropy * norm)?;
        total = Some(match total {
            Some(acc) => acc.add(&kl)?,
            None => kl,
        });
    }
    Ok(total.expect("two axes"))
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Coordinate of each keypoint as `(argmax + 0.5) / k`. Works on logits or
/// probabilities alike since softmax preserves the argmax.
pub fn decode(pred: (&AxisDistribution, &AxisDistribution), cfg: &SimccConfig) -> Result<KeypointSet> {
    let (px, py) = pred;
    if px.batch != py.batch || px.keypoints != py.keypoints {
        return Err(CoreError::Shape(format!("{:?} vs {:?}", px.shape(), py.shape())));
    }
    let mut coords = Vec::with_capacity(px.batch * px.keypoints * 2);
    for (rx, ry) in px.rows().zip(py.rows()) {
        coords.push((argmax(rx) as f64 + 0.5) / cfg.split_factor);
        coords.push((argmax(ry) as f64 + 0.5) / cfg.split_factor);
    }
    let n = px.batch * px.keypoints;
    KeypointSet::new(px.batch, px.keypoints, coords, vec![true; n])
}

fn check_pck_args(pred: &KeypointSet, gt: &KeypointSet, threshold: f64) -> Result<()> {
    if pred.batch != gt.batch || pred.keypoints != gt.keypoints {
        return Err(CoreError::Shape(format!(
            "prediction [{}, {}] against ground truth [{}, {}]",
            pred.batch, pred.keypoints, gt.batch, gt.keypoints
        )));
    }
    if !(threshold > 0.0) {
        return Err(CoreError::Config(format!("PCK threshold must be positive, got {threshold}")));
    }
    Ok(())
}

fn is_correct(pred: &KeypointSet, gt: &KeypointSet, i: usize, radius: f64) -> bool {
    let (px, py) = pred.xy(i);
    let (gx, gy) = gt.xy(i);
    (px - gx).hypot(py - gy) < radius
}

/// Fraction of ground-truth-visible keypoints predicted within
/// `threshold · norm_side` pixels.
pub fn pck(pred: &KeypointSet, gt: &KeypointSet, threshold: f64, norm_side: usize) -> Result<f64> {
    check_pck_args(pred, gt, threshold)?;
    let radius = threshold * norm_side as f64;
    let (mut hit, mut seen) = (0usize, 0usize);
    for i in 0..gt.batch * gt.keypoints {
        if gt.visible[i] {
            seen += 1;
            hit += usize::from(is_correct(pred, gt, i, radius));
        }
    }
    if seen == 0 {
        return Err(CoreError::NoVisibleKeypoints);
    }
    Ok(hit as f64 / seen as f64)
}

/// Per-keypoint PCK; `None` where a keypoint is never visible.
pub fn pck_per_keypoint(
    pred: &KeypointSet,
    gt: &KeypointSet,
    threshold: f64,
    norm_side: usize,
) -> Result<Vec<Option<f64>>> {
    check_pck_args(pred, gt, threshold)?;
    let radius = threshold * norm_side as f64;
    let mut hit = vec![0usize; gt.keypoints];
    let mut seen = vec![0usize; gt.keypoints];
    for i in 0..gt.batch * gt.keypoints {
        if gt.visible[i] {
            let k = i % gt.keypoints;
            seen[k] += 1;
            hit[k] += usize::from(is_correct(pred, gt, i, radius));
        }
    }
    Ok(hit
        .iter()
        .zip(&seen)
        .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
        .collect())
}
