//! Run configuration: a flat set of dotted keys with typed values.
//!
//! Files hold one `key = value` per line; `#` starts a comment. Values are
//! resolved as defaults, then the file, then `--set key=value` overrides.
//! Unknown keys and malformed values are errors.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use cdkd_core::backbone::BackboneConfig;
use cdkd_core::cca::LossWeights;
use cdkd_core::etht::Schedule;
use cdkd_core::sape::SapeConfig;
use cdkd_core::simcc::SimccConfig;
use cdkd_core::synth::{PoseRanges, SceneConfig, Span};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub scene: SceneConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EthtConfig {
    pub enabled: bool,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub schedule: Schedule,
    pub learn_alpha: bool,
    pub learn_beta: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epoch at which the learning rate drops; `None` means two thirds of
    /// the way through.
    pub decay_epoch: Option<usize>,
    pub decay_factor: f64,
}

impl OptimConfig {
    pub fn decay_at(&self) -> usize {
        self.decay_epoch.unwrap_or(self.epochs * 2 / 3)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_at() {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub simcc: SimccConfig,
    pub weights: LossWeights,
    pub sape: SapeConfig,
    pub etht: EthtConfig,
    pub optim: OptimConfig,
    pub train_seed: u64,
    pub pck_threshold: f64,
    pub out_dir: PathBuf,
    pub teacher: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig {
                seed: 0,
                n_train: 2000,
                n_val: 500,
                scene: SceneConfig::default(),
            },
            backbone: BackboneConfig::default(),
            simcc: SimccConfig::default(),
            weights: LossWeights::default(),
            sape: SapeConfig::default(),
            etht: EthtConfig {
                enabled: true,
                tau_init: 1.0,
                tau_min: 0.5,
                tau_max: 10.0,
                schedule: Schedule::Linear,
                learn_alpha: false,
                learn_beta: false,
            },
            optim: OptimConfig {
                lr: 0.01,
                momentum: 0.9,
                epochs: 30,
                batch_size: 32,
                decay_epoch: None,
                decay_factor: 0.1,
            },
            train_seed: 0,
            pck_threshold: 0.1,
            out_dir: PathBuf::from("runs/default"),
            teacher: None,
        }
    }
}

/// Every accepted key with a one-line description, in echo order.
pub const SCHEMA: &[(&str, &str)] = &[
    ("data.seed", "seed of the synthetic dataset"),
    ("data.n_train", "training samples"),
    ("data.n_val", "validation samples"),
    ("data.high_side", "teacher input side in pixels"),
    ("data.m", "teacher/student side ratio"),
    ("data.num_keypoints", "5 or 9"),
    ("data.limb_thickness", "limb stroke width in high-resolution pixels"),
    ("data.joint_radius", "radius of hand and foot disks"),
    ("data.head_radius", "radius of the head disk"),
    ("data.noise_std", "standard deviation of pixel noise"),
    ("data.pose.center_x", "torso centre x range as fraction of side: lo,hi"),
    ("data.pose.center_y", "torso centre y range as fraction of side: lo,hi"),
    ("data.pose.scale", "figure scale range: lo,hi"),
    ("data.pose.lean", "torso lean range in radians: lo,hi"),
    ("data.pose.arm_raise", "arm elevation range in radians: lo,hi"),
    ("data.pose.arm_bend", "elbow bend range in radians: lo,hi"),
    ("data.pose.leg_spread", "leg spread range in radians: lo,hi"),
    ("data.pose.leg_bend", "knee bend range in radians: lo,hi"),
    ("model.stage_channels", "comma-separated output channels per block"),
    ("model.total_stride", "backbone downsampling factor (power of two)"),
    ("model.kernel", "backbone convolution kernel size"),
    ("simcc.split_factor", "bins per input pixel"),
    ("simcc.label_sigma", "target Gaussian width in bins"),
    ("distill.alpha", "feature loss weight"),
    ("distill.beta", "logit loss weight"),
    ("sape.num_projectors", "number of projectors"),
    ("sape.kernels", "comma-separated odd kernel sizes of the selection branches"),
    ("sape.descriptor_dim", "width of the fused descriptor"),
    ("etht.enabled", "learn the temperature adversarially (false keeps it at tau_init)"),
    ("etht.tau_init", "initial temperature"),
    ("etht.tau_min", "lower temperature clamp"),
    ("etht.tau_max", "upper temperature clamp"),
    ("etht.schedule", "linear or half-cosine"),
    ("etht.learn_alpha", "also learn alpha adversarially"),
    ("etht.learn_beta", "also learn beta adversarially"),
    ("optim.lr", "learning rate"),
    ("optim.momentum", "SGD momentum"),
    ("optim.epochs", "number of epochs"),
    ("optim.batch_size", "samples per step"),
    ("optim.decay_epoch", "epoch of the learning-rate drop, or auto (two thirds)"),
    ("optim.decay_factor", "learning-rate multiplier at the drop"),
    ("train.seed", "seed for initialization and shuffling"),
    ("eval.pck_threshold", "PCK threshold as a fraction of the image side"),
    ("paths.out_dir", "run directory"),
    ("paths.teacher", "teacher checkpoint; empty trains without distillation"),
];

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("{key} = {value}: {why}"))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_span(key: &str, value: &str) -> Result<Span> {
    match value.split(',').map(str::trim).collect::<Vec<_>>()[..] {
        [lo, hi] => Ok(Span::new(parse(key, lo)?, parse(key, hi)?)),
        [v] => Ok(Span::point(parse(key, v)?)),
        _ => Err(bad(key, value, "expected lo,hi")),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn span(s: &Span) -> String {
    format!("{},{}", s.lo, s.hi)
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let pose = &mut self.data.scene.pose;
        match key {
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.n_train" => self.data.n_train = parse(key, v)?,
            "data.n_val" => self.data.n_val = parse(key, v)?,
            "data.high_side" => self.data.scene.high_side = parse(key, v)?,
            "data.m" => self.data.scene.m = parse(key, v)?,
            "data.num_keypoints" => {
                self.data.scene.num_keypoints = parse(key, v)?;
                self.simcc.num_keypoints = self.data.scene.num_keypoints;
            }
            "data.limb_thickness" => self.data.scene.limb_thickness = parse(key, v)?,
            "data.joint_radius" => self.data.scene.joint_radius = parse(key, v)?,
            "data.head_radius" => self.data.scene.head_radius = parse(key, v)?,
            "data.noise_std" => self.data.scene.noise_std = parse(key, v)?,
            "data.pose.center_x" => pose.center_x = parse_span(key, v)?,
            "data.pose.center_y" => pose.center_y = parse_span(key, v)?,
            "data.pose.scale" => pose.scale = parse_span(key, v)?,
            "data.pose.lean" => pose.lean = parse_span(key, v)?,
            "data.pose.arm_raise" => pose.arm_raise = parse_span(key, v)?,
            "data.pose.arm_bend" => pose.arm_bend = parse_span(key, v)?,
            "data.pose.leg_spread" => pose.leg_spread = parse_span(key, v)?,
            "data.pose.leg_bend" => pose.leg_bend = parse_span(key, v)?,
            "model.stage_channels" => self.backbone.stage_channels = parse_list(key, v)?,
            "model.total_stride" => self.backbone.total_stride = parse(key, v)?,
            "model.kernel" => self.backbone.kernel = parse(key, v)?,
            "simcc.split_factor" => self.simcc.split_factor = parse(key, v)?,
            "simcc.label_sigma" => self.simcc.label_sigma = parse(key, v)?,
            "distill.alpha" => self.weights.alpha = parse(key, v)?,
            "distill.beta" => self.weights.beta = parse(key, v)?,
            "sape.num_projectors" => self.sape.num_projectors = parse(key, v)?,
            "sape.kernels" => self.sape.kernels = parse_list(key, v)?,
            "sape.descriptor_dim" => self.sape.descriptor_dim = parse(key, v)?,
            "etht.enabled" => self.etht.enabled = parse(key, v)?,
            "etht.tau_init" => self.etht.tau_init = parse(key, v)?,
            "etht.tau_min" => self.etht.tau_min = parse(key, v)?,
            "etht.tau_max" => self.etht.tau_max = parse(key, v)?,
            "etht.schedule" => self.etht.schedule = parse(key, v)?,
            "etht.learn_alpha" => self.etht.learn_alpha = parse(key, v)?,
            "etht.learn_beta" => self.etht.learn_beta = parse(key, v)?,
            "optim.lr" => self.optim.lr = parse(key, v)?,
            "optim.momentum" => self.optim.momentum = parse(key, v)?,
            "optim.epochs" => self.optim.epochs = parse(key, v)?,
            "optim.batch_size" => self.optim.batch_size = parse(key, v)?,
            "optim.decay_epoch" => {
                self.optim.decay_epoch = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "optim.decay_factor" => self.optim.decay_factor = parse(key, v)?,
            "train.seed" => self.train_seed = parse(key, v)?,
            "eval.pck_threshold" => self.pck_threshold = parse(key, v)?,
            "paths.out_dir" => self.out_dir = PathBuf::from(v),
            "paths.teacher" => self.teacher = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(HarnessError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// The textual value of `key`, as it would be echoed.
    pub fn get(&self, key: &str) -> Result<String> {
        let s = &self.data.scene;
        let p: &PoseRanges = &s.pose;
        Ok(match key {
            "data.seed" => self.data.seed.to_string(),
            "data.n_train" => self.data.n_train.to_string(),
            "data.n_val" => self.data.n_val.to_string(),
            "data.high_side" => s.high_side.to_string(),
            "data.m" => s.m.to_string(),
            "data.num_keypoints" => s.num_keypoints.to_string(),
            "data.limb_thickness" => s.limb_thickness.to_string(),
            "data.joint_radius" => s.joint_radius.to_string(),
            "data.head_radius" => s.head_radius.to_string(),
            "data.noise_std" => s.noise_std.to_string(),
            "data.pose.center_x" => span(&p.center_x),
            "data.pose.center_y" => span(&p.center_y),
            "data.pose.scale" => span(&p.scale),
            "data.pose.lean" => span(&p.lean),
            "data.pose.arm_raise" => span(&p.arm_raise),
            "data.pose.arm_bend" => span(&p.arm_bend),
            "data.pose.leg_spread" => span(&p.leg_spread),
            "data.pose.leg_bend" => span(&p.leg_bend),
            "model.stage_channels" => join(&self.backbone.stage_channels),
            "model.total_stride" => self.backbone.total_stride.to_string(),
            "model.kernel" => self.backbone.kernel.to_string(),
            "simcc.split_factor" => self.simcc.split_factor.to_string(),
            "simcc.label_sigma" => self.simcc.label_sigma.to_string(),
            "distill.alpha" => self.weights.alpha.to_string(),
            "distill.beta" => self.weights.beta.to_string(),
            "sape.num_projectors" => self.sape.num_projectors.to_string(),
            "sape.kernels" => join(&self.sape.kernels),
            "sape.descriptor_dim" => self.sape.descriptor_dim.to_string(),
            "etht.enabled" => self.etht.enabled.to_string(),
            "etht.tau_init" => self.etht.tau_init.to_string(),
            "etht.tau_min" => self.etht.tau_min.to_string(),
            "etht.tau_max" => self.etht.tau_max.to_string(),
            "etht.schedule" => self.etht.schedule.name().to_string(),
            "etht.learn_alpha" => self.etht.learn_alpha.to_string(),
            "etht.learn_beta" => self.etht.learn_beta.to_string(),
            "optim.lr" => self.optim.lr.to_string(),
            "optim.momentum" => self.optim.momentum.to_string(),
            "optim.epochs" => self.optim.epochs.to_string(),
            "optim.batch_size" => self.optim.batch_size.to_string(),
            "optim.decay_epoch" => self
                .optim
                .decay_epoch
                .map_or_else(|| "auto".to_string(), |e| e.to_string()),
            "optim.decay_factor" => self.optim.decay_factor.to_string(),
            "train.seed" => self.train_seed.to_string(),
            "eval.pck_threshold" => self.pck_threshold.to_string(),
            "paths.out_dir" => self.out_dir.display().to_string(),
            "paths.teacher" => self
                .teacher
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            _ => return Err(HarnessError::Config(format!("unknown key `{key}`"))),
        })
    }

    /// Applies the lines of a config file.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| HarnessError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(key.trim(), value)
    }

    /// Defaults, then `file_text`, then `overrides`, then validation.
    pub fn resolve(file_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(text) = file_text {
            cfg.apply_text(text)?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key in schema order, in the file format.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (key, _) in SCHEMA {
            let value = self.get(key).expect("schema keys are known");
            writeln!(out, "{key} = {value}").expect("writing to a String");
        }
        out
    }

    pub fn student_side(&self) -> usize {
        self.data.scene.low_side()
    }

    /// Projector settings with the scale tied to the data ratio.
    pub fn sape_config(&self) -> SapeConfig {
        SapeConfig {
            scale: self.data.scene.m,
            ..self.sape.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: cdkd_core::CoreError| HarnessError::Config(e.to_string());
        self.data.scene.validate().map_err(cfg_err)?;
        self.backbone.validate().map_err(cfg_err)?;
        self.simcc.validate().map_err(cfg_err)?;
        self.weights.validate().map_err(cfg_err)?;
        self.sape_config().validate(false).map_err(cfg_err)?;
        if self.data.scene.num_keypoints != self.simcc.num_keypoints {
            return Err(HarnessError::Config(format!(
                "data.num_keypoints = {} but the head predicts {}",
                self.data.scene.num_keypoints, self.simcc.num_keypoints
            )));
        }
        let low = self.student_side();
        for side in [low, self.data.scene.high_side] {
            self.backbone.feature_side(side).map_err(cfg_err)?;
        }
        let (lo, hi) = (self.simcc.bins(low).map_err(cfg_err)?, self.simcc.bins(self.data.scene.high_side).map_err(cfg_err)?);
        if hi != lo * self.data.scene.m {
            return Err(HarnessError::Config(format!(
                "teacher bins {hi} are not {} × student bins {lo}",
                self.data.scene.m
            )));
        }
        if self.data.n_train == 0 || self.data.n_val == 0 {
            return Err(HarnessError::Config("data.n_train and data.n_val must be positive".into()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.momentum) || o.batch_size == 0 {
            return Err(HarnessError::Config(
                "optim.lr must be positive, optim.momentum in [0, 1) and optim.batch_size positive".into(),
            ));
        }
        if !(o.decay_factor > 0.0 && o.decay_factor <= 1.0) {
            return Err(HarnessError::Config(format!(
                "optim.decay_factor must lie in (0, 1], got {}",
                o.decay_factor
            )));
        }
        let e = &self.etht;
        if !(0.5 <= e.tau_min && e.tau_min <= e.tau_init && e.tau_init <= e.tau_max && e.tau_max <= 10.0) {
            return Err(HarnessError::Config(format!(
                "need 0.5 <= tau_min <= tau_init <= tau_max <= 10, got {} / {} / {}",
                e.tau_min, e.tau_init, e.tau_max
            )));
        }
        if !(self.pck_threshold > 0.0) {
            return Err(HarnessError::Config("eval.pck_threshold must be positive".into()));
        }
        Ok(())
    }
}
