//! Checkpoint evaluation on one data split.

use std::fmt;

use cdkd_core::model::PoseNet;
use cdkd_core::simcc::{decode, pck, pck_per_keypoint, AxisDistribution, DistKind, KeypointSet};
use cdkd_core::synth::Split;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::train::{build_data, build_net, concat_keypoints, Stage};

pub const THRESHOLDS: [f64; 3] = [0.05, 0.1, 0.2];

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdScore {
    pub threshold: f64,
    pub aggregate: f64,
    /// `None` for a keypoint never visible in the split.
    pub per_keypoint: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PckReport {
    pub stage: Stage,
    pub split: Split,
    pub samples: usize,
    pub scores: Vec<ThresholdScore>,
}

impl PckReport {
    /// Aggregate PCK at `threshold`, if it was one of the evaluated ones.
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.scores.iter().find(|s| s.threshold == threshold).map(|s| s.aggregate)
    }
}

impl fmt::Display for PckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stage = match self.stage {
            Stage::Teacher => "teacher",
            Stage::Student => "student",
        };
        let split = match self.split {
            Split::Train => "train",
            Split::Val => "val",
        };
        writeln!(f, "{stage} on {split} ({} samples)", self.samples)?;
        for s in &self.scores {
            let per: Vec<String> = s
                .per_keypoint
                .iter()
                .map(|v| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}")))
                .collect();
            writeln!(f, "pck@{:<4} {:.4}  per keypoint [{}]", s.threshold, s.aggregate, per.join(", "))?;
        }
        Ok(())
    }
}

/// Works out whether `ckpt` holds a teacher or a student for `cfg` by
/// matching every backbone and head shape against both networks.
pub fn infer_stage(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<(Stage, PoseNet)> {
    let mut reasons = Vec::new();
    for stage in [Stage::Teacher, Stage::Student] {
        let net = build_net(cfg, stage)?;
        match net.check_params(&ckpt.params) {
            Ok(()) => return Ok((stage, net)),
            Err(e) => reasons.push(format!("{stage:?}: {e}")),
        }
    }
    Err(HarnessError::Checkpoint(format!(
        "checkpoint matches neither network of this config ({})",
        reasons.join("; ")
    )))
}

/// PCK of `ckpt` on `split` at every threshold in [`THRESHOLDS`]. Only the
/// backbone and head tensors are read, and batches follow the same chunking
/// as validation during training, so scores match the training log exactly.
pub fn evaluate(ckpt: &Checkpoint, split: Split, cfg: &RunConfig) -> Result<PckReport> {
    let (stage, net) = infer_stage(ckpt, cfg)?;
    let (train, val) = build_data(cfg)?;
    let data = match split {
        Split::Train => &train,
        Split::Val => &val,
    };
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(cfg.optim.batch_size) {
        let batch = data.batch(chunk)?;
        let (images, gt) = match stage {
            Stage::Teacher => (&batch.high, &batch.gt_high),
            Stage::Student => (&batch.low, &batch.gt_low),
        };
        let out = net.predict(&ckpt.params, images, chunk.len())?;
        let x = AxisDistribution::from_tensor(&out.logits_x, DistKind::Logits)?;
        let y = AxisDistribution::from_tensor(&out.logits_y, DistKind::Logits)?;
        preds.push(decode((&x, &y), &net.simcc)?);
        gts.push(gt.clone());
    }
    let pred: KeypointSet = concat_keypoints(&preds)?;
    let gt = concat_keypoints(&gts)?;
    let scores = THRESHOLDS
        .iter()
        .map(|&threshold| {
            Ok(ThresholdScore {
                threshold,
                aggregate: pck(&pred, &gt, threshold, net.side)?,
                per_keypoint: pck_per_keypoint(&pred, &gt, threshold, net.side)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PckReport {
        stage,
        split,
        samples: data.len(),
        scores,
    })
}
