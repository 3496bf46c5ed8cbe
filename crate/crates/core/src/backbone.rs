//! Small convolutional backbone shared by teacher and student.
//!
//! Blocks are `conv → relu`; a 2× average pool follows each of the first
//! `log2(total_stride)` blocks. The same weights accept any input side that
//! the stride divides, so a teacher at side `m·s` and a student at side `s`
//! built from one config have feature maps whose sides differ by exactly `m`.

use cdkd_autograd::DiffTensor;
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::params::{Bound, ParamSet, Role};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub total_stride: usize,
    pub kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stage_channels: vec![16, 32, 32],
            total_stride: 4,
            kernel: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(CoreError::Config("stage channels must be non-empty and positive".into()));
        }
        if self.in_channels == 0 {
            return Err(CoreError::Config("in_channels must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(CoreError::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if !self.total_stride.is_power_of_two() || self.pool_count() > self.stage_channels.len() {
            return Err(CoreError::Config(format!(
                "total stride {} must be a power of two with at most one pool per block",
                self.total_stride
            )));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated non-empty")
    }

    fn pool_count(&self) -> usize {
        self.total_stride.trailing_zeros() as usize
    }

    /// Side of the last feature map for an input of side `side`.
    pub fn feature_side(&self, side: usize) -> Result<usize> {
        if side == 0 || side % self.total_stride != 0 {
            return Err(CoreError::Shape(format!(
                "input side {side} is not divisible by total stride {}",
                self.total_stride
            )));
        }
        Ok(side / self.total_stride)
    }

    pub fn weight_name(block: usize) -> String {
        format!("backbone.block{block}.weight")
    }

    pub fn bias_name(block: usize) -> String {
        format!("backbone.block{block}.bias")
    }
}

/// Registers Glorot-initialized conv weights and zero biases.
pub fn init_backbone<R: Rng>(params: &mut ParamSet, cfg: &BackboneConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let k = cfg.kernel;
    let mut cin = cfg.in_channels;
    for (i, &cout) in cfg.stage_channels.iter().enumerate() {
        params.insert_glorot(
            &BackboneConfig::weight_name(i),
            Role::Backbone,
            &[cout, cin, k, k],
            cin * k * k,
            cout * k * k,
            rng,
        )?;
        params.insert_zeros(&BackboneConfig::bias_name(i), Role::Backbone, &[cout])?;
        cin = cout;
    }
    Ok(())
}

/// Runs `images` (`[B, in_channels, side, side]`) through the backbone and
/// returns the last feature map `[B, C_last, side/stride, side/stride]`.
pub fn backbone_forward(bound: &Bound, images: &DiffTensor, cfg: &BackboneConfig) -> Result<DiffTensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != cfg.in_channels {
        return Err(CoreError::Shape(format!(
            "backbone expects [B, {}, H, W], got {s:?}",
            cfg.in_channels
        )));
    }
    cfg.feature_side(s[2])?;
    cfg.feature_side(s[3])?;
    let pools = cfg.pool_count();
    let mut x = images.clone();
    for i in 0..cfg.stage_channels.len() {
        let w = bound.get(&BackboneConfig::weight_name(i))?;
        let b = bound.get(&BackboneConfig::bias_name(i))?;
        x = x.conv2d_same(w)?.bias_add(b, 1)?.relu()?;
        if i < pools {
            x = x.avg_pool2d(2)?;
        }
    }
    Ok(x)
}
