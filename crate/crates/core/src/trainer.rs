//! Teacher-student training loop.
//!
//! Every random draw comes from a substream keyed by `(seed, tag, step, ...)`,
//! so a run resumed from a checkpoint replays exactly the steps an
//! uninterrupted run would have taken.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{align_pseudo, strong_augment, weak_augment, CutMixBatch, StrongPolicy, StrongRecord};
use crate::config::ConfigFile;
use crate::datagen::Scene;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_scenes, miou_mdice, predict, EvalImage};
use crate::losses::{make_pseudo, LdNormalize, LossReport, PseudoPack};
use crate::model::{
    ema_update, forward_backward, is_encoder_param, sample_complementary_masks, Checkpoint, LossSpec, ParamSet,
    Role, StrongPair, TrainBatch, FEAT_CHANNELS, PARAM_NAMES,
};
use crate::tensor::{substream, BinaryMask, ImageTensor, LabelMask};

const TAG_INIT: u64 = 1;
const TAG_PERM: u64 = 2;
const TAG_CLEAN_PICK: u64 = 3;
const TAG_WEAK_CLEAN: u64 = 4;
const TAG_WEAK_DEGRADED: u64 = 5;
const TAG_STRONG: u64 = 6;
const TAG_MASK: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    CleanOnly,
    #[default]
    Semi,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean_only" => Ok(Self::CleanOnly),
            "semi" => Ok(Self::Semi),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected clean_only or semi)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub lr: f64,
    /// Decoder learning rate is `lr · head_lr_mult`.
    pub head_lr_mult: f64,
    pub momentum: f64,
    pub batch_clean: usize,
    pub batch_degraded: usize,
    pub epochs: usize,
    pub crop: usize,
    pub seed: u64,
    pub freeze_encoder: bool,
    pub strong_policy: StrongPolicy,
    pub mode: TrainMode,
    pub deterministic: bool,
    pub keep_prob: f64,
    pub ld_normalize: LdNormalize,
    /// Supervised-only steps before the unlabelled branch switches on.
    pub burnin_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            lambda: 1.0,
            gamma: 0.99,
            lr: 1e-3,
            head_lr_mult: 1.0,
            momentum: 0.9,
            batch_clean: 8,
            batch_degraded: 8,
            epochs: 60,
            crop: 64,
            seed: 42,
            freeze_encoder: false,
            strong_policy: StrongPolicy::default(),
            mode: TrainMode::Semi,
            deterministic: true,
            keep_prob: 0.5,
            ld_normalize: LdNormalize::AllPixels,
            burnin_steps: 0,
        }
    }
}

impl TrainConfig {
    /// Hard errors for invalid values; soft warnings are returned.
    pub fn validate(&self) -> Result<Vec<String>> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0,1], got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0,1), got {}", self.gamma));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.head_lr_mult > 0.0 && self.head_lr_mult.is_finite()) {
            return bad(format!("head_lr_mult must be positive, got {}", self.head_lr_mult));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if self.batch_clean == 0 || self.batch_degraded == 0 {
            return bad("batch_clean and batch_degraded must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.crop == 0 || self.crop % 2 != 0 {
            return bad(format!("crop must be a positive even number, got {}", self.crop));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob < 1.0) {
            return bad(format!("keep_prob must lie in (0,1), got {}", self.keep_prob));
        }
        self.strong_policy.validate()?;
        let mut warnings = Vec::new();
        if self.keep_prob != 0.5 {
            warnings.push(format!(
                "keep_prob = {} makes the x2 dropout rescale biased (unbiased only at 0.5)",
                self.keep_prob
            ));
        }
        Ok(warnings)
    }
}

/// What happened on one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub step: u64,
    pub epoch: u64,
    pub loss_report: LossReport,
    pub ema_applied: bool,
    pub lr_used: f64,
}

/// `v ← momentum·v + g; p ← p − lr_group·v` with the decoder group at `lr·head_lr_mult`.
pub fn sgd_step(
    params: &mut ParamSet<f32>,
    grads: &ParamSet<f32>,
    momentum_state: &mut ParamSet<f32>,
    lr: f64,
    head_lr_mult: f64,
    freeze_encoder: bool,
    momentum: f64,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(momentum_state) {
        return Err(Error::ShapeMismatch("parameter, gradient and momentum layouts differ".into()));
    }
    let mu = momentum as f32;
    for (ti, name) in PARAM_NAMES.iter().enumerate() {
        let encoder = is_encoder_param(name);
        if encoder && freeze_encoder {
            continue;
        }
        let step = if encoder { lr } else { lr * head_lr_mult } as f32;
        let v = &mut momentum_state.tensors[ti].data;
        let p = &mut params.tensors[ti].data;
        for ((pv, vv), &g) in p.iter_mut().zip(v.iter_mut()).zip(&grads.tensors[ti].data) {
            *vv = mu * *vv + g;
            *pv -= step * *vv;
        }
    }
    Ok(())
}

/// `lr · (1 − step/total)^0.9`.
pub fn poly_lr(lr: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return lr;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    lr * (1.0 - frac).powf(0.9)
}

pub const LOG_HEADER: &str = "step,epoch,l_c,l_d,total,confident_fraction,lr,val_miou";

pub struct Trainer {
    config: TrainConfig,
    provenance: String,
    num_classes: usize,
    clean: Vec<(ImageTensor, LabelMask)>,
    degraded: Vec<ImageTensor>,
    val: Vec<Scene>,
    degraded_reads: u64,
    pub student: ParamSet<f32>,
    pub teacher: ParamSet<f32>,
    pub momentum: ParamSet<f32>,
    pub step: u64,
}

impl Trainer {
    /// The first half of `train` supplies labelled clean pairs; only the
    /// degraded images of the second half are used, without labels.
    pub fn new(config: TrainConfig, train: &[Scene], val: Vec<Scene>, num_classes: usize) -> Result<Self> {
        config.validate()?;
        if !(2..=32).contains(&num_classes) {
            return Err(Error::Config(format!("num_classes must lie in [2, 32], got {num_classes}")));
        }
        let half = train.len() / 2;
        if half == 0 {
            return Err(Error::Config(format!("train shard needs at least 2 scenes, has {}", train.len())));
        }
        let n_d = train.len() - half;
        if n_d < config.batch_degraded {
            return Err(Error::Config(format!(
                "{n_d} degraded images cannot fill a batch of {}",
                config.batch_degraded
            )));
        }
        for s in train.iter().chain(&val) {
            if let Some(&bad) = s.label.data.iter().find(|&&l| l as usize >= num_classes && l != 255) {
                return Err(Error::Config(format!(
                    "scene {} has label {bad} but the run uses {num_classes} classes",
                    s.seed
                )));
            }
        }
        let clean = train[..half].iter().map(|s| (s.clean.clone(), s.label.clone())).collect();
        let degraded = train[half..].iter().map(|s| s.degraded.clone()).collect();
        let student = ParamSet::<f32>::init(num_classes, &mut substream(config.seed, &[TAG_INIT]));
        let teacher = student.clone().with_role(Role::Teacher);
        let momentum = student.zeros_like();
        let provenance = serde_json::to_string(&config).expect("config serializes");
        Ok(Self {
            config,
            provenance,
            num_classes,
            clean,
            degraded,
            val,
            degraded_reads: 0,
            student,
            teacher,
            momentum,
            step: 0,
        })
    }

    /// JSON recorded in the log header and checkpoint.
    pub fn with_provenance(mut self, json: String) -> Self {
        self.provenance = json;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Continues from `ckpt`, keeping its step counter and optimizer state.
    pub fn restore(&mut self, ckpt: Checkpoint) -> Result<()> {
        if ckpt.student.num_classes != self.num_classes {
            return Err(Error::Config(format!(
                "checkpoint has {} classes, data has {}",
                ckpt.student.num_classes, self.num_classes
            )));
        }
        if ckpt.step > self.total_steps() {
            return Err(Error::Config(format!(
                "checkpoint step {} exceeds the run length of {} steps",
                ckpt.step,
                self.total_steps()
            )));
        }
        self.student = ckpt.student.with_role(Role::Student);
        self.teacher = ckpt.teacher.with_role(Role::Teacher);
        self.momentum = ckpt.momentum;
        self.step = ckpt.step;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config_json: self.provenance.clone(),
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            momentum: self.momentum.clone(),
        }
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.degraded.len() / self.config.batch_degraded) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.epochs as u64
    }

    /// Degraded images handed to the model so far.
    pub fn degraded_reads(&self) -> u64 {
        self.degraded_reads
    }

    fn degraded_indices(&self, epoch: u64, pos: u64) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.degraded.len()).collect();
        perm.shuffle(&mut substream(self.config.seed, &[TAG_PERM, epoch]));
        let b = self.config.batch_degraded;
        let start = pos as usize * b;
        perm[start..start + b].to_vec()
    }

    fn build_batch(&mut self) -> Result<TrainBatch<f32>> {
        let cfg = &self.config;
        let step = self.step;
        let spe = self.steps_per_epoch();
        let mut pick = substream(cfg.seed, &[TAG_CLEAN_PICK, step]);
        let clean_idx: Vec<usize> = (0..cfg.batch_clean)
            .map(|_| pick.random_range(0..self.clean.len()))
            .collect();
        let clean = clean_idx
            .par_iter()
            .enumerate()
            .map(|(i, &ci)| {
                let (img, lab) = &self.clean[ci];
                let mut rng = substream(cfg.seed, &[TAG_WEAK_CLEAN, step, i as u64]);
                let (view, label, _) = weak_augment(img, Some(lab), cfg.crop, &mut rng)?;
                Ok((view, label.expect("label requested")))
            })
            .collect::<Result<Vec<_>>>()?;

        let semi = cfg.mode == TrainMode::Semi && step >= cfg.burnin_steps;
        if !semi {
            return Ok(TrainBatch { clean, strong: Vec::new() });
        }

        let idx = self.degraded_indices(step / spe, step % spe);
        self.degraded_reads += idx.len() as u64;
        let cfg = &self.config;
        let teacher = &self.teacher;
        let weak: Vec<(ImageTensor, PseudoPack)> = idx
            .par_iter()
            .enumerate()
            .map(|(i, &di)| {
                let mut rng = substream(cfg.seed, &[TAG_WEAK_DEGRADED, step, i as u64]);
                let (view, _, rec) = weak_augment(&self.degraded[di], None, cfg.crop, &mut rng)?;
                let mut pack = make_pseudo(&predict(teacher, &view)?, cfg.tau)?;
                mask_invalid(&mut pack.conf, &rec.valid_mask());
                Ok((view, pack))
            })
            .collect::<Result<_>>()?;
        let views: Vec<ImageTensor> = weak.iter().map(|(v, _)| v.clone()).collect();

        let strong = (0..weak.len())
            .into_par_iter()
            .map(|i| {
                let batch = Some(CutMixBatch {
                    self_index: i,
                    views: &views,
                });
                let mut out_views = Vec::with_capacity(2);
                let mut targets = Vec::with_capacity(2);
                for k in 0..2u64 {
                    let mut rng = substream(cfg.seed, &[TAG_STRONG, step, i as u64, k]);
                    let (v, rec) = strong_augment(&views[i], &mut rng, &cfg.strong_policy, batch)?;
                    targets.push(aligned_target(&weak, i, &rec)?);
                    out_views.push(v);
                }
                let (m1, m2) = sample_complementary_masks(
                    &mut substream(cfg.seed, &[TAG_MASK, step, i as u64]),
                    cfg.keep_prob,
                    FEAT_CHANNELS,
                );
                let [t1, t2]: [PseudoPack; 2] = targets.try_into().expect("two targets");
                let [v1, v2]: [ImageTensor; 2] = out_views.try_into().expect("two views");
                Ok(StrongPair {
                    views: [v1, v2],
                    masks: [m1, m2],
                    targets: [t1, t2],
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainBatch { clean, strong })
    }

    /// One optimizer step followed by one EMA update.
    pub fn train_step(&mut self) -> Result<StepTrace> {
        let spe = self.steps_per_epoch();
        let epoch = self.step / spe;
        let lr = poly_lr(self.config.lr, self.step, self.total_steps());
        let teacher_sum = cfg!(debug_assertions).then(|| self.teacher.checksum());
        let step = self.step;
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } | Error::Unnormalized { .. } => Error::Diverged {
                step,
                trace: format!("epoch {epoch}, lr {lr}: {e}"),
            },
            other => other,
        };
        let batch = self.build_batch().map_err(diverged)?;
        let spec = LossSpec {
            lambda: self.config.lambda,
            ld_normalize: self.config.ld_normalize,
            freeze_encoder: self.config.freeze_encoder,
        };
        let fb = forward_backward(&self.student, &batch, &spec).map_err(diverged)?;
        sgd_step(
            &mut self.student,
            &fb.grads,
            &mut self.momentum,
            lr,
            self.config.head_lr_mult,
            self.config.freeze_encoder,
            self.config.momentum,
        )?;
        if let Some((tensor, index)) = self.student.first_non_finite() {
            return Err(Error::Diverged {
                step,
                trace: format!(
                    "epoch {epoch}, lr {lr}, l_c {}, l_d {}: update made {tensor}[{index}] non-finite",
                    fb.l_c, fb.l_d
                ),
            });
        }
        if let Some(sum) = teacher_sum {
            debug_assert_eq!(sum, self.teacher.checksum(), "teacher changed outside ema_update");
        }
        ema_update(&mut self.teacher, &self.student, self.config.gamma)?;
        self.step += 1;
        Ok(StepTrace {
            step,
            epoch,
            loss_report: LossReport {
                l_c: fb.l_c,
                l_d: fb.l_d,
                total: fb.total,
                lambda: self.config.lambda,
                confident_fraction: fb.confident_fraction,
            },
            ema_applied: true,
            lr_used: lr,
        })
    }

    /// Teacher mIoU on the degraded validation images; `None` when undefined.
    pub fn validate(&self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let (cm, _) = evaluate_scenes(&self.teacher, &self.val, EvalImage::Degraded, None)?;
        match miou_mdice(&cm) {
            Ok(m) => Ok(Some(m.miou)),
            Err(Error::EmptyMetric) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Trains until `stop_at` (or the end of the schedule), writing one log
    /// row per step. `val_miou` is filled on the last step of each epoch.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>, stop_at: Option<u64>) -> Result<Vec<StepTrace>> {
        let end = stop_at.map_or(self.total_steps(), |s| s.min(self.total_steps()));
        let spe = self.steps_per_epoch();
        let mut traces = Vec::new();
        while self.step < end {
            let t = self.train_step()?;
            let val = if self.step % spe == 0 { self.validate()? } else { None };
            if let Some(w) = log.as_deref_mut() {
                write_log_row(w, &t, val)?;
            }
            traces.push(t);
        }
        Ok(traces)
    }
}

fn mask_invalid(conf: &mut BinaryMask, valid: &BinaryMask) {
    for (c, &v) in conf.data.iter_mut().zip(&valid.data) {
        *c &= v;
    }
}

fn aligned_target(weak: &[(ImageTensor, PseudoPack)], i: usize, rec: &StrongRecord) -> Result<PseudoPack> {
    let own = &weak[i].1;
    let partner = rec.cutmix.as_ref().map_or(own, |c| &weak[c.partner_index].1);
    let (label, conf) = align_pseudo(&own.label, &own.conf, rec, &partner.label, &partner.conf)?;
    Ok(PseudoPack {
        label,
        conf,
        tau: own.tau,
    })
}

pub fn write_log_header(w: &mut dyn Write, config_json: &str) -> Result<()> {
    writeln!(w, "# config: {config_json}")
        .and_then(|_| writeln!(w, "{LOG_HEADER}"))
        .map_err(|e| Error::io("metrics log", e))
}

fn write_log_row(w: &mut dyn Write, t: &StepTrace, val: Option<f64>) -> Result<()> {
    let r = &t.loss_report;
    let val = val.map(|v| v.to_string()).unwrap_or_default();
    writeln!(
        w,
        "{},{},{},{},{},{},{},{}",
        t.step, t.epoch, r.l_c, r.l_d, r.total, r.confident_fraction, t.lr_used, val
    )
    .map_err(|e| Error::io("metrics log", e))
}

/// Result of a complete run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub traces: Vec<StepTrace>,
    pub degraded_reads: u64,
}

/// Fresh run from step 0 to the end of the schedule.
pub fn train(
    config: TrainConfig,
    train_scenes: &[Scene],
    val_scenes: Vec<Scene>,
    num_classes: usize,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, train_scenes, val_scenes, num_classes)?;
    let mut log = log;
    if let Some(w) = log.as_deref_mut() {
        write_log_header(w, trainer.provenance())?;
    }
    let traces = trainer.run(log, None)?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        traces,
        degraded_reads: trainer.degraded_reads(),
    })
}

pub const CHECKPOINT_FILE: &str = "checkpoint.wpsckpt";
pub const LOG_FILE: &str = "metrics.csv";

/// Trains one configuration inside `dir`, writing `metrics.csv` and
/// `checkpoint.wpsckpt`. With `resume`, the log is appended to.
pub fn run_training(
    cfg: &ConfigFile,
    train_scenes: &[Scene],
    val_scenes: Vec<Scene>,
    num_classes: usize,
    dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    let provenance = cfg.to_json();
    let mut trainer =
        Trainer::new(cfg.train_config(), train_scenes, val_scenes, num_classes)?.with_provenance(provenance.clone());
    let resuming = resume.is_some();
    if let Some(ckpt) = resume {
        trainer.restore(ckpt)?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join(LOG_FILE);
    let append = resuming && log_path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    if !append {
        write_log_header(&mut log, &provenance)?;
    }
    let traces = trainer.run(Some(&mut log), None);
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let traces = traces?;
    let checkpoint = trainer.checkpoint();
    checkpoint.save(dir.join(CHECKPOINT_FILE))?;
    Ok(TrainOutcome {
        checkpoint,
        traces,
        degraded_reads: trainer.degraded_reads(),
    })
}
