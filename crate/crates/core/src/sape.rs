//! Scale-adaptive projector ensemble.
//!
//! `K` projectors lift the student's last feature `[B, C, H, W]` to the
//! teacher's spatial size `[B, C, mH, mW]`. A selection unit looks at the
//! student feature through convolution branches of several kernel sizes,
//! squeezes them into a descriptor `z`, and turns `z` into per-channel
//! softmax weights over the projectors. Everything here is training-only:
//! all parameters carry [`Role::Sape`].

use cdkd_autograd::DiffTensor;
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::params::{Bound, ParamSet, Role};

/// Guards the square root in the cosine distance.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SapeConfig {
    pub num_projectors: usize,
    /// One convolution branch per entry; sizes may repeat.
    pub kernels: Vec<usize>,
    pub descriptor_dim: usize,
    /// Teacher-to-student spatial ratio.
    pub scale: usize,
}

impl Default for SapeConfig {
    fn default() -> Self {
        Self {
            num_projectors: 3,
            kernels: vec![3, 5, 7, 7],
            descriptor_dim: 32,
            scale: 4,
        }
    }
}

impl SapeConfig {
    /// `allow_unit_scale` admits `m = 1`, used only to test projectors as
    /// plain maps.
    pub fn validate(&self, allow_unit_scale: bool) -> Result<()> {
        if self.num_projectors == 0 {
            return Err(CoreError::Config("at least one projector is required".into()));
        }
        if self.kernels.is_empty() || self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(CoreError::Config(format!(
                "branch kernels must be a non-empty list of odd sizes, got {:?}",
                self.kernels
            )));
        }
        if self.descriptor_dim == 0 {
            return Err(CoreError::Config("descriptor dimension must be positive".into()));
        }
        let min_scale = if allow_unit_scale { 1 } else { 2 };
        if self.scale < min_scale {
            return Err(CoreError::Config(format!("scale factor must be at least {min_scale}, got {}", self.scale)));
        }
        Ok(())
    }
}

pub fn projector_names(index: usize) -> (String, String) {
    (format!("sape.proj{index}.weight"), format!("sape.proj{index}.bias"))
}

pub fn branch_names(index: usize) -> (String, String) {
    (format!("sape.branch{index}.weight"), format!("sape.branch{index}.bias"))
}

pub fn select_names(index: usize) -> (String, String) {
    (format!("sape.select{index}.weight"), format!("sape.select{index}.bias"))
}

pub const FUSE_WEIGHT: &str = "sape.fuse.weight";
pub const FUSE_BIAS: &str = "sape.fuse.bias";

/// Registers all projector and selection parameters for a student feature
/// with `channels` channels and spatial size `height × width`.
pub fn init_sape<R: Rng>(
    params: &mut ParamSet,
    cfg: &SapeConfig,
    channels: usize,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<()> {
    let src = height * width;
    let dst = src * cfg.scale * cfg.scale;
    for p in 0..cfg.num_projectors {
        let (w, b) = projector_names(p);
        params.insert_glorot(&w, Role::Sape, &[src, dst], src, dst, rng)?;
        params.insert_zeros(&b, Role::Sape, &[dst])?;
    }
    for (i, &k) in cfg.kernels.iter().enumerate() {
        let (w, b) = branch_names(i);
        let fan = channels * k * k;
        params.insert_glorot(&w, Role::Sape, &[channels, channels, k, k], fan, fan, rng)?;
        params.insert_zeros(&b, Role::Sape, &[channels])?;
    }
    let d = cfg.descriptor_dim;
    let fused = cfg.kernels.len() * channels;
    params.insert_glorot(FUSE_WEIGHT, Role::Sape, &[fused, d], fused, d, rng)?;
    params.insert_zeros(FUSE_BIAS, Role::Sape, &[d])?;
    for p in 0..cfg.num_projectors {
        let (w, b) = select_names(p);
        params.insert_glorot(&w, Role::Sape, &[d, channels], d, channels, rng)?;
        params.insert_zeros(&b, Role::Sape, &[channels])?;
    }
    Ok(())
}

fn check_feature(f: &DiffTensor) -> Result<[usize; 4]> {
    match *f.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(CoreError::Shape(format!("feature must be [B, C, H, W], got {s:?}"))),
    }
}

/// `relu(F · W + b)` on each channel's flattened spatial vector, with one
/// `[H·W, H′·W′]` matrix shared across channels and samples.
pub fn projector_forward(bound: &Bound, student: &DiffTensor, index: usize, scale: usize) -> Result<DiffTensor> {
    let [b, c, h, w] = check_feature(student)?;
    let (wn, bn) = projector_names(index);
    let weight = bound.get(&wn)?;
    let (ho, wo) = (h * scale, w * scale);
    if weight.shape() != [h * w, ho * wo] {
        return Err(CoreError::Shape(format!(
            "projector {index} maps {:?}, feature needs [{}, {}]",
            weight.shape(),
            h * w,
            ho * wo
        )));
    }
    student
        .reshape(&[b * c, h * w])?
        .matmul(weight)?
        .bias_add(bound.get(&bn)?, 1)?
        .relu()?
        .reshape(&[b, c, ho, wo])
        .map_err(Into::into)
}

/// Per-channel softmax weights `[B, K, C]` over the projectors.
pub fn sau_weights(bound: &Bound, student: &DiffTensor, cfg: &SapeConfig) -> Result<DiffTensor> {
    let [b, c, _, _] = check_feature(student)?;
    let branches = cfg
        .kernels
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let (wn, bn) = branch_names(i);
            student
                .conv2d_same(bound.get(&wn)?)?
                .bias_add(bound.get(&bn)?, 1)?
                .relu()
                .map_err(CoreError::from)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&DiffTensor> = branches.iter().collect();
    // A dense layer over the concatenated channels is the sum of one dense
    // slice per branch, so this realises fuse-then-sum in a single product.
    let z = DiffTensor::concat(&refs, 1)?
        .global_avg_pool()?
        .matmul(bound.get(FUSE_WEIGHT)?)?
        .bias_add(bound.get(FUSE_BIAS)?, 1)?;
    let scores = (0..cfg.num_projectors)
        .map(|p| {
            let (wn, bn) = select_names(p);
            z.matmul(bound.get(&wn)?)?
                .bias_add(bound.get(&bn)?, 1)?
                .reshape(&[b, 1, c])
                .map_err(CoreError::from)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&DiffTensor> = scores.iter().collect();
    let one = student.tape().scalar(1.0)?;
    Ok(DiffTensor::concat(&refs, 1)?.softmax(1, &one)?)
}

/// `Σ_k w_k ⊗ P_k`, broadcasting each `[B, C]` weight slice over space.
pub fn sape_merge(projections: &[DiffTensor], weights: &DiffTensor) -> Result<DiffTensor> {
    let Some(first) = projections.first() else {
        return Err(CoreError::Shape("no projections to merge".into()));
    };
    let [b, c, _, _] = check_feature(first)?;
    if weights.shape() != [b, projections.len(), c] {
        return Err(CoreError::Shape(format!(
            "weights {:?} for {} projections of {:?}",
            weights.shape(),
            projections.len(),
            first.shape()
        )));
    }
    let mut out: Option<DiffTensor> = None;
    for (k, proj) in projections.iter().enumerate() {
        if proj.shape() != first.shape() {
            return Err(CoreError::Shape(format!("{:?} vs {:?}", proj.shape(), first.shape())));
        }
        let w = weights.narrow(1, k, 1)?.reshape(&[b, c])?;
        let term = proj.mul_prefix(&w)?;
        out = Some(match out {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(out.expect("non-empty"))
}

/// All projectors plus their weighted merge.
pub fn sape_forward(bound: &Bound, student: &DiffTensor, cfg: &SapeConfig) -> Result<DiffTensor> {
    let projections = (0..cfg.num_projectors)
        .map(|k| projector_forward(bound, student, k, cfg.scale))
        .collect::<Result<Vec<_>>>()?;
    let weights = sau_weights(bound, student, cfg)?;
    sape_merge(&projections, &weights)
}

/// Mean over the batch of `1 − cos(F_out, F_t)` with each sample flattened.
/// The teacher side never receives gradient.
pub fn feature_loss(student_out: &DiffTensor, teacher: &DiffTensor) -> Result<DiffTensor> {
    if student_out.shape() != teacher.shape() {
        return Err(CoreError::Shape(format!(
            "student {:?} vs teacher {:?}",
            student_out.shape(),
            teacher.shape()
        )));
    }
    let batch = student_out.shape()[0];
    let s = student_out.l2_normalize(NORM_EPS)?;
    let t = teacher.detach().l2_normalize(NORM_EPS)?;
    let dots = s.mul(&t)?.sum()?;
    Ok(dots.scale(-1.0 / batch as f64)?.add_scalar(1.0)?)
}
