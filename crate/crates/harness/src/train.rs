//! Training loops for the teacher, the baseline student and the distilled
//! student.
//!
//! All three share [`Trainer`]. A teacher trains on high-resolution images
//! with the task loss only. A student trains on low-resolution images and,
//! when a teacher is supplied, adds the feature and logit distillation
//! terms. Teacher outputs are computed once per sample up front: the
//! teacher is frozen and the data fixed, so this is the same as running it
//! at every step.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use cdkd_autograd::{DiffTensor, Tape};
use cdkd_core::cca::{logit_loss, total_loss, total_loss_with};
use cdkd_core::etht::{
    etht_step, init_etht, init_learned_weight, reversed, xi_schedule, EthtState, ALPHA_PARAM, BETA_PARAM,
    TAU_PARAM,
};
use cdkd_core::model::{init_rng, InitStream, PoseNet};
use cdkd_core::params::{sgd_step, Bound, OptimState, ParamSet};
use cdkd_core::sape::{feature_loss, init_sape, sape_forward, SapeConfig};
use cdkd_core::simcc::{decode, encode_labels, pck, task_loss, AxisDistribution, DistKind, KeypointSet, SimccConfig};
use cdkd_core::synth::{epoch_order, make_dataset, Batch, Dataset, Split};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::{MetricRow, MetricsWriter};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.resolved";
pub const CHECKPOINT_FILE: &str = "best.ckpt";

/// Which network is being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Teacher,
    Student,
}

impl Stage {
    pub fn side(self, cfg: &RunConfig) -> usize {
        match self {
            Stage::Teacher => cfg.data.scene.high_side,
            Stage::Student => cfg.student_side(),
        }
    }

    fn images(self, batch: &Batch) -> &[f64] {
        match self {
            Stage::Teacher => &batch.high,
            Stage::Student => &batch.low,
        }
    }

    fn keypoints(self, batch: &Batch) -> &KeypointSet {
        match self {
            Stage::Teacher => &batch.gt_high,
            Stage::Student => &batch.gt_low,
        }
    }
}

pub fn build_net(cfg: &RunConfig, stage: Stage) -> Result<PoseNet> {
    Ok(PoseNet::new(cfg.backbone.clone(), cfg.simcc.clone(), stage.side(cfg))?)
}

pub fn build_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    Ok(make_dataset(cfg.data.seed, cfg.data.n_train, cfg.data.n_val, &cfg.data.scene)?)
}

/// Frozen teacher outputs for every sample of one split.
#[derive(Debug, Clone)]
pub struct TeacherOutputs {
    feature_shape: [usize; 3],
    keypoints: usize,
    bins: usize,
    features: Vec<f64>,
    logits_x: Vec<f64>,
    logits_y: Vec<f64>,
}

impl TeacherOutputs {
    pub fn compute(net: &PoseNet, params: &ParamSet, data: &Dataset, batch_size: usize) -> Result<Self> {
        let fs = net.feature_side();
        let mut out = Self {
            feature_shape: [net.backbone.out_channels(), fs, fs],
            keypoints: net.simcc.num_keypoints,
            bins: net.bins(),
            features: Vec::new(),
            logits_x: Vec::new(),
            logits_y: Vec::new(),
        };
        let order: Vec<usize> = (0..data.len()).collect();
        for chunk in order.chunks(batch_size) {
            let batch = data.batch(chunk)?;
            let pred = net.predict(params, &batch.high, chunk.len())?;
            out.features.extend_from_slice(pred.feature.values());
            out.logits_x.extend_from_slice(pred.logits_x.values());
            out.logits_y.extend_from_slice(pred.logits_y.values());
        }
        Ok(out)
    }

    fn gather(values: &[f64], width: usize, indices: &[usize]) -> Vec<f64> {
        let mut v = Vec::with_capacity(width * indices.len());
        for &i in indices {
            v.extend_from_slice(&values[i * width..(i + 1) * width]);
        }
        v
    }

    fn feature(&self, tape: &Tape, indices: &[usize]) -> Result<DiffTensor> {
        let [c, h, w] = self.feature_shape;
        let values = Self::gather(&self.features, c * h * w, indices);
        Ok(tape.constant(&[indices.len(), c, h, w], values)?)
    }

    fn logits(&self, tape: &Tape, indices: &[usize]) -> Result<[DiffTensor; 2]> {
        let width = self.keypoints * self.bins;
        let shape = [indices.len(), self.keypoints, self.bins];
        Ok([
            tape.constant(&shape, Self::gather(&self.logits_x, width, indices))?,
            tape.constant(&shape, Self::gather(&self.logits_y, width, indices))?,
        ])
    }
}

struct Distill {
    sape: SapeConfig,
    train: TeacherOutputs,
    val: TeacherOutputs,
}

/// Loss values of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub total: f64,
    pub ori: f64,
    pub fea: f64,
    pub logit: f64,
    pub tau: f64,
    pub xi: f64,
}

struct Forward {
    total: DiffTensor,
    ori: DiffTensor,
    fea: Option<DiffTensor>,
    logit: Option<DiffTensor>,
    logits: [DiffTensor; 2],
}

pub struct Trainer {
    cfg: RunConfig,
    stage: Stage,
    net: PoseNet,
    params: ParamSet,
    opt: OptimState,
    etht: Option<EthtState>,
    distill: Option<Distill>,
    train: Dataset,
    val: Dataset,
    step_losses: Vec<f64>,
}

impl Trainer {
    /// A teacher trainer, or a student trainer that distills from
    /// `teacher` when given.
    pub fn new(
        cfg: &RunConfig,
        stage: Stage,
        teacher: Option<&Checkpoint>,
        train: Dataset,
        val: Dataset,
    ) -> Result<Self> {
        cfg.validate()?;
        let net = build_net(cfg, stage)?;
        let mut params = net.init(cfg.train_seed)?;
        let opt = OptimState::new(cfg.optim.lr, cfg.optim.momentum)?;
        let mut etht = None;
        let mut distill = None;
        if let Some(ckpt) = teacher {
            if stage == Stage::Teacher {
                return Err(HarnessError::Config("a teacher cannot itself be distilled".into()));
            }
            let tnet = build_net(cfg, Stage::Teacher)?;
            tnet.check_params(&ckpt.params)
                .map_err(|e| HarnessError::Checkpoint(format!("teacher does not fit the configured model: {e}")))?;
            let mut tparams = ckpt.params.with_roles(&cdkd_core::params::Role::INFERENCE);
            tparams.freeze();
            let sape = cfg.sape_config();
            let fs = net.feature_side();
            if tnet.feature_side() != fs * sape.scale || tnet.bins() != net.bins() * sape.scale {
                return Err(HarnessError::Config(format!(
                    "teacher feature side {} and bins {} are not {}× the student's {} and {}",
                    tnet.feature_side(),
                    tnet.bins(),
                    sape.scale,
                    fs,
                    net.bins()
                )));
            }
            init_sape(
                &mut params,
                &sape,
                net.backbone.out_channels(),
                fs,
                fs,
                &mut init_rng(cfg.train_seed, InitStream::Sape),
            )?;
            if cfg.etht.enabled {
                init_etht(&mut params, cfg.etht.tau_init)?;
                if cfg.etht.learn_alpha {
                    init_learned_weight(&mut params, ALPHA_PARAM, cfg.weights.alpha)?;
                }
                if cfg.etht.learn_beta {
                    init_learned_weight(&mut params, BETA_PARAM, cfg.weights.beta)?;
                }
                etht = Some(EthtState::new(
                    cfg.etht.tau_min,
                    cfg.etht.tau_max,
                    cfg.etht.schedule,
                    cfg.optim.epochs.max(1),
                )?);
            }
            let bs = cfg.optim.batch_size;
            distill = Some(Distill {
                sape,
                train: TeacherOutputs::compute(&tnet, &tparams, &train, bs)?,
                val: TeacherOutputs::compute(&tnet, &tparams, &val, bs)?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            stage,
            net,
            params,
            opt,
            etht,
            distill,
            train,
            val,
            step_losses: Vec::new(),
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn net(&self) -> &PoseNet {
        &self.net
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn train_data(&self) -> &Dataset {
        &self.train
    }

    pub fn val_data(&self) -> &Dataset {
        &self.val
    }

    /// Total loss of every step taken so far.
    pub fn step_losses(&self) -> &[f64] {
        &self.step_losses
    }

    pub fn is_distilling(&self) -> bool {
        self.distill.is_some()
    }

    /// Current temperature (the fixed one when it is not learned).
    pub fn tau(&self) -> f64 {
        match (&self.distill, self.params.get(TAU_PARAM)) {
            (Some(_), Ok(p)) => p.value[0],
            (Some(_), Err(_)) => self.cfg.etht.tau_init,
            (None, _) => 1.0,
        }
    }

    /// Difficulty coefficient for `epoch`; zero when the temperature is fixed.
    pub fn xi(&self, epoch: usize) -> Result<f64> {
        match &self.etht {
            Some(state) => {
                let mut s = state.clone();
                s.epoch = epoch;
                Ok(xi_schedule(&s)?)
            }
            None => Ok(0.0),
        }
    }

    fn forward(&self, tape: &Tape, bound: &Bound, split: Split, indices: &[usize], xi: f64) -> Result<Forward> {
        let data = match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        };
        let batch = data.batch(indices)?;
        let side = self.net.side;
        let images = tape.constant(&[indices.len(), 1, side, side], self.stage.images(&batch).to_vec())?;
        let out = self.net.forward(bound, &images)?;
        let gt = self.stage.keypoints(&batch);
        let (tx, ty) = encode_labels(gt, &self.net.simcc, side)?;
        let ori = task_loss((&out.logits_x, &out.logits_y), (&tx, &ty), &gt.visible)?;
        let logits = [out.logits_x.clone(), out.logits_y.clone()];
        let Some(d) = &self.distill else {
            return Ok(Forward {
                total: ori.clone(),
                ori,
                fea: None,
                logit: None,
                logits,
            });
        };
        let cache = match split {
            Split::Train => &d.train,
            Split::Val => &d.val,
        };
        let student_out = sape_forward(bound, &out.feature, &d.sape)?;
        let fea = feature_loss(&student_out, &cache.feature(tape, indices)?)?;
        let tau = if self.etht.is_some() {
            reversed(bound, TAU_PARAM, xi)?
        } else {
            tape.scalar(self.cfg.etht.tau_init)?
        };
        let logit = logit_loss(&cache.logits(tape, indices)?, &logits, &tau, d.sape.scale)?;
        let learned = |name: &str, fixed: f64| -> Result<DiffTensor> {
            if bound.contains(name) {
                Ok(reversed(bound, name, xi)?)
            } else {
                Ok(tape.scalar(fixed)?)
            }
        };
        let total = if self.cfg.etht.enabled && (self.cfg.etht.learn_alpha || self.cfg.etht.learn_beta) {
            let alpha = learned(ALPHA_PARAM, self.cfg.weights.alpha)?;
            let beta = learned(BETA_PARAM, self.cfg.weights.beta)?;
            total_loss_with(&ori, &fea, &logit, &alpha, &beta)?
        } else {
            total_loss(&ori, &fea, &logit, &self.cfg.weights)?
        };
        Ok(Forward {
            total,
            ori,
            fea: Some(fea),
            logit: Some(logit),
            logits,
        })
    }

    fn stats(&self, f: &Forward, xi: f64) -> Result<StepStats> {
        let item = |t: &Option<DiffTensor>| -> Result<f64> { Ok(t.as_ref().map(|t| t.item()).transpose()?.unwrap_or(0.0)) };
        Ok(StepStats {
            total: f.total.item()?,
            ori: f.ori.item()?,
            fea: item(&f.fea)?,
            logit: item(&f.logit)?,
            tau: self.tau(),
            xi,
        })
    }

    /// One optimization step on the training samples `indices` during
    /// `epoch`: descent for the network and projectors, reversed-gradient
    /// ascent for the temperature.
    pub fn step(&mut self, indices: &[usize], epoch: usize) -> Result<StepStats> {
        let (stats, _) = self.step_with_predictions(indices, epoch)?;
        Ok(stats)
    }

    fn step_with_predictions(&mut self, indices: &[usize], epoch: usize) -> Result<(StepStats, KeypointSet)> {
        let lr = self.cfg.optim.lr_at(epoch);
        let xi = self.xi(epoch)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape)?;
        let f = self.forward(&tape, &bound, Split::Train, indices, xi)?;
        let stats = self.stats(&f, xi)?;
        if ![stats.total, stats.ori, stats.fea, stats.logit].iter().all(|v| v.is_finite()) {
            return Err(HarnessError::Numeric(format!("non-finite loss at epoch {epoch}: {stats:?}")));
        }
        f.total.backprop()?;
        self.params.zero_grad();
        self.params.accumulate_grads(&bound)?;
        let pred = decode_pair(&self.net.simcc, &f.logits)?;
        // Releasing the tape drops its references to the parameter buffers,
        // so the update below can write them in place.
        drop((f, bound, tape));
        self.opt.lr = lr;
        sgd_step(&mut self.params, &mut self.opt)?;
        if let Some(state) = &self.etht {
            let mut s = state.clone();
            s.epoch = epoch;
            etht_step(&mut self.params, &s, lr)?;
        }
        self.step_losses.push(stats.total);
        Ok((StepStats { tau: self.tau(), ..stats }, pred))
    }

    /// One pass over the shuffled training split. Returns the train row.
    pub fn train_epoch(&mut self, epoch: usize) -> Result<MetricRow> {
        let n = self.train.len();
        let order = epoch_order(self.cfg.train_seed, epoch, n);
        let mut acc = Accumulator::default();
        for chunk in order.chunks(self.cfg.optim.batch_size) {
            let (stats, pred) = self.step_with_predictions(chunk, epoch)?;
            let batch = self.train.batch(chunk)?;
            acc.add(&stats, chunk.len(), pred, self.stage.keypoints(&batch).clone());
        }
        acc.row(epoch, "train", self.tau(), self.xi(epoch)?, self.cfg.pck_threshold, self.net.side)
    }

    /// Loss and PCK on the validation split with the current parameters.
    pub fn validate(&self, epoch: usize) -> Result<MetricRow> {
        let xi = self.xi(epoch)?;
        let mut frozen = self.params.clone();
        frozen.freeze();
        let mut acc = Accumulator::default();
        let order: Vec<usize> = (0..self.val.len()).collect();
        for chunk in order.chunks(self.cfg.optim.batch_size) {
            let tape = Tape::new();
            let bound = frozen.bind(&tape)?;
            let f = self.forward(&tape, &bound, Split::Val, chunk, xi)?;
            let stats = self.stats(&f, xi)?;
            let batch = self.val.batch(chunk)?;
            acc.add(&stats, chunk.len(), decode_pair(&self.net.simcc, &f.logits)?, self.stage.keypoints(&batch).clone());
        }
        acc.row(epoch, "val", self.tau(), xi, self.cfg.pck_threshold, self.net.side)
    }
}

fn decode_pair(simcc: &SimccConfig, logits: &[DiffTensor; 2]) -> Result<KeypointSet> {
    let x = AxisDistribution::from_tensor(&logits[0], DistKind::Logits)?;
    let y = AxisDistribution::from_tensor(&logits[1], DistKind::Logits)?;
    Ok(decode((&x, &y), simcc)?)
}

#[derive(Default)]
struct Accumulator {
    n: usize,
    total: f64,
    ori: f64,
    fea: f64,
    logit: f64,
    preds: Vec<KeypointSet>,
    gts: Vec<KeypointSet>,
}

impl Accumulator {
    fn add(&mut self, s: &StepStats, n: usize, pred: KeypointSet, gt: KeypointSet) {
        let w = n as f64;
        self.n += n;
        self.total += s.total * w;
        self.ori += s.ori * w;
        self.fea += s.fea * w;
        self.logit += s.logit * w;
        self.preds.push(pred);
        self.gts.push(gt);
    }

    fn row(self, epoch: usize, split: &str, tau: f64, xi: f64, threshold: f64, side: usize) -> Result<MetricRow> {
        let n = self.n.max(1) as f64;
        let pred = concat_keypoints(&self.preds)?;
        let gt = concat_keypoints(&self.gts)?;
        Ok(MetricRow {
            epoch,
            split: split.to_string(),
            loss_total: self.total / n,
            loss_ori: self.ori / n,
            loss_fea: self.fea / n,
            loss_logit: self.logit / n,
            tau,
            xi,
            pck: pck(&pred, &gt, threshold, side)?,
        })
    }
}

pub(crate) fn concat_keypoints(parts: &[KeypointSet]) -> Result<KeypointSet> {
    let k = parts.first().map_or(0, |p| p.keypoints);
    let mut out = KeypointSet::new(0, k, vec![], vec![])?;
    for p in parts {
        out.batch += p.batch;
        out.coords.extend_from_slice(&p.coords);
        out.visible.extend_from_slice(&p.visible);
    }
    Ok(out)
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricRow>,
    pub step_losses: Vec<f64>,
    /// Best validation PCK, or `None` for a zero-epoch run.
    pub best_pck: Option<f64>,
    pub checkpoint: Checkpoint,
    pub final_params: ParamSet,
}

/// Runs `trainer` for the configured epochs, writing the resolved config,
/// `metrics.csv` and the best-validation checkpoint into `out_dir`.
pub fn run(mut trainer: Trainer, out_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    let echo = trainer.cfg.echo();
    fs::write(out_dir.join(CONFIG_FILE), &echo)?;
    let mut metrics = MetricsWriter::new(BufWriter::new(File::create(out_dir.join(METRICS_FILE))?))?;
    let mut rows = Vec::new();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    for epoch in 0..trainer.cfg.optim.epochs {
        let train_row = match trainer.train_epoch(epoch) {
            Ok(r) => r,
            Err(e) if e.exit_code() == 3 => {
                metrics.write(&MetricRow {
                    epoch,
                    split: "train".into(),
                    loss_total: f64::NAN,
                    loss_ori: f64::NAN,
                    loss_fea: f64::NAN,
                    loss_logit: f64::NAN,
                    tau: trainer.tau(),
                    xi: trainer.xi(epoch)?,
                    pck: f64::NAN,
                })?;
                return Err(match e {
                    HarnessError::Numeric(msg) => HarnessError::Numeric(msg),
                    other => HarnessError::Numeric(format!("epoch {epoch}: {other}")),
                });
            }
            Err(e) => return Err(e),
        };
        let val_row = trainer.validate(epoch)?;
        metrics.write(&train_row)?;
        metrics.write(&val_row)?;
        if best.as_ref().is_none_or(|(p, _, _)| val_row.pck > *p) {
            best = Some((val_row.pck, epoch, trainer.params.clone()));
        }
        rows.push(train_row);
        rows.push(val_row);
    }
    let (best_pck, epoch, params) = match best {
        Some((p, e, params)) => (Some(p), e, params),
        None => (None, 0, trainer.params.clone()),
    };
    let checkpoint = Checkpoint {
        epoch: epoch as u32,
        config: echo,
        params,
    };
    checkpoint.save(&out_dir.join(CHECKPOINT_FILE))?;
    Ok(TrainOutcome {
        rows,
        step_losses: trainer.step_losses,
        best_pck,
        checkpoint,
        final_params: trainer.params,
    })
}

pub fn train_teacher(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (train, val) = build_data(cfg)?;
    run(Trainer::new(cfg, Stage::Teacher, None, train, val)?, &cfg.out_dir)
}

/// Trains a student; with `teacher = None` this is the plain baseline.
pub fn train_student(cfg: &RunConfig, teacher: Option<&Checkpoint>) -> Result<TrainOutcome> {
    let (train, val) = build_data(cfg)?;
    run(Trainer::new(cfg, Stage::Student, teacher, train, val)?, &cfg.out_dir)
}
