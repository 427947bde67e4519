//! Plain and test-time-augmented inference, confusion matrices, mIoU/mDice.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ConfigFile;
use crate::datagen::Scene;
use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::model::{forward_logits, ParamSet};
use crate::trainer::{run_training, TrainMode};
use crate::tensor::{resize_bilinear, LabelMask, ProbMap, Real, Tensor3, IGNORE_LABEL};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    /// Row-major `[gt][pred]`.
    pub counts: Vec<u64>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            ignored: 0,
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.ignored
    }

    pub fn add(&mut self, gt: &LabelMask, pred: &LabelMask) -> Result<()> {
        if !gt.same_shape(pred) {
            return Err(Error::ShapeMismatch(format!(
                "ground truth {}x{} vs prediction {}x{}",
                gt.height, gt.width, pred.height, pred.width
            )));
        }
        let c = self.num_classes;
        for (i, (&g, &p)) in gt.data.iter().zip(&pred.data).enumerate() {
            if g == IGNORE_LABEL {
                self.ignored += 1;
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::InvalidLabel {
                    label: if g as usize >= c { g } else { p },
                    index: i,
                    num_classes: c,
                });
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub class: usize,
    /// `None` when the class never occurs in ground truth or prediction.
    pub iou: Option<f64>,
    pub dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: f64,
    pub mdice: f64,
    pub per_class: Vec<ClassMetric>,
}

/// Per-class IoU and Dice, averaged over classes with a nonzero denominator.
pub fn miou_mdice(cm: &ConfusionMatrix) -> Result<Metrics> {
    let c = cm.num_classes;
    let mut per_class = Vec::with_capacity(c);
    let (mut iou_sum, mut dice_sum, mut n) = (0.0, 0.0, 0usize);
    for k in 0..c {
        let tp = cm.get(k, k);
        let fn_: u64 = (0..c).filter(|&j| j != k).map(|j| cm.get(k, j)).sum();
        let fp: u64 = (0..c).filter(|&i| i != k).map(|i| cm.get(i, k)).sum();
        let denom = tp + fp + fn_;
        if denom == 0 {
            per_class.push(ClassMetric {
                class: k,
                iou: None,
                dice: None,
            });
            continue;
        }
        let iou = tp as f64 / denom as f64;
        let dice = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        iou_sum += iou;
        dice_sum += dice;
        n += 1;
        per_class.push(ClassMetric {
            class: k,
            iou: Some(iou),
            dice: Some(dice),
        });
    }
    if n == 0 {
        return Err(Error::EmptyMetric);
    }
    Ok(Metrics {
        miou: iou_sum / n as f64,
        mdice: dice_sum / n as f64,
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipMode {
    None,
    Horizontal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaPolicy {
    pub flips: FlipMode,
    pub scales: Vec<f64>,
}

impl Default for TtaPolicy {
    fn default() -> Self {
        Self {
            flips: FlipMode::Horizontal,
            scales: vec![0.75, 1.0, 1.25],
        }
    }
}

impl TtaPolicy {
    pub fn identity() -> Self {
        Self {
            flips: FlipMode::None,
            scales: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("TTA policy needs at least one scale".into()));
        }
        if let Some(s) = self.scales.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("TTA scale {s} must be positive")));
        }
        Ok(())
    }

    fn views(&self) -> Vec<(f64, bool)> {
        let flips: &[bool] = match self.flips {
            FlipMode::None => &[false],
            FlipMode::Horizontal => &[false, true],
        };
        self.scales
            .iter()
            .flat_map(|&s| flips.iter().map(move |&f| (s, f)))
            .collect()
    }
}

/// `softmax(decode(encode(img)))`.
pub fn predict<T: Real>(params: &ParamSet<T>, img: &Tensor3<T>) -> Result<ProbMap<T>> {
    Ok(softmax(&forward_logits(params, img, None)?))
}

fn even_dim(n: usize, scale: f64) -> usize {
    ((n as f64 * scale / 2.0).round() as usize).max(1) * 2
}

/// Mean of the per-view probability maps, mapped back to the input frame and
/// renormalized per pixel.
pub fn tta_predict<T: Real>(params: &ParamSet<T>, img: &Tensor3<T>, policy: &TtaPolicy) -> Result<ProbMap<T>> {
    policy.validate()?;
    let views = policy.views();
    let (h, w) = (img.height, img.width);
    if let [(s, false)] = views.as_slice() {
        if even_dim(h, *s) == h && even_dim(w, *s) == w {
            return predict(params, img);
        }
    }
    let mut acc: Option<ProbMap<T>> = None;
    for &(scale, flip) in &views {
        let (vh, vw) = (even_dim(h, scale), even_dim(w, scale));
        let mut view = resize_bilinear(img, vh, vw);
        if flip {
            view = view.flip_horizontal();
        }
        let mut p = predict(params, &view)?;
        if flip {
            p = p.flip_horizontal();
        }
        let p = resize_bilinear(&p, h, w);
        match acc.as_mut() {
            None => acc = Some(p),
            Some(a) => a.data.iter_mut().zip(&p.data).for_each(|(x, &y)| *x += y),
        }
    }
    let mut out = acc.expect("at least one view");
    let n = out.plane_len();
    for u in 0..n {
        let s: T = (0..out.channels).map(|k| out.data[k * n + u]).sum();
        for k in 0..out.channels {
            out.data[k * n + u] /= s;
        }
    }
    Ok(out)
}

/// Per-pixel argmax, lowest class index on ties.
pub fn argmax_labels<T: Real>(probs: &ProbMap<T>) -> LabelMask {
    let n = probs.plane_len();
    let data = (0..n)
        .map(|u| {
            let mut best = 0;
            for k in 1..probs.channels {
                if probs.data[k * n + u] > probs.data[best * n + u] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMask {
        height: probs.height,
        width: probs.width,
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalImage {
    Clean,
    Degraded,
}

/// Predicts every scene and accumulates one confusion matrix. Also returns
/// the predicted masks in scene order.
pub fn evaluate_scenes(
    params: &ParamSet<f32>,
    scenes: &[Scene],
    which: EvalImage,
    tta: Option<&TtaPolicy>,
) -> Result<(ConfusionMatrix, Vec<LabelMask>)> {
    let per: Vec<Result<(ConfusionMatrix, LabelMask)>> = scenes
        .par_iter()
        .map(|s| {
            let img = match which {
                EvalImage::Clean => &s.clean,
                EvalImage::Degraded => &s.degraded,
            };
            let probs = match tta {
                Some(p) => tta_predict(params, img, p)?,
                None => predict(params, img)?,
            };
            let pred = argmax_labels(&probs);
            let mut cm = ConfusionMatrix::new(params.num_classes);
            cm.add(&s.label, &pred)?;
            Ok((cm, pred))
        })
        .collect();
    let mut cm = ConfusionMatrix::new(params.num_classes);
    let mut preds = Vec::with_capacity(scenes.len());
    for r in per {
        let (c, p) = r?;
        cm.merge(&c);
        preds.push(p);
    }
    Ok((cm, preds))
}

/// Row labels of the ablation table, in output order.
pub const ABLATION_SETTINGS: [&str; 3] = ["Clean only", "Clean + Degraded", "Clean + Degraded + TTA"];

/// Why an ablation row has no metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RowFailure {
    pub message: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub setting: &'static str,
    pub outcome: std::result::Result<Metrics, RowFailure>,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, setting: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    pub fn miou(&self, setting: &str) -> Option<f64> {
        self.row(setting).and_then(|r| r.outcome.as_ref().ok()).map(|m| m.miou)
    }

    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| r.outcome.is_ok())
    }

    /// `setting,miou,mdice,status`; failed rows leave the metrics blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,miou,mdice,status\n");
        for r in &self.rows {
            match &r.outcome {
                Ok(m) => out.push_str(&format!("{},{},{},ok\n", r.setting, m.miou, m.mdice)),
                Err(e) => out.push_str(&format!("{},,,\"error: {}\"\n", r.setting, e.message.replace('"', "'"))),
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<26} {:>8} {:>8}\n", "Setting", "mIoU", "mDice");
        for r in &self.rows {
            match &r.outcome {
                Ok(m) => out.push_str(&format!("{:<26} {:>8.4} {:>8.4}\n", r.setting, m.miou, m.mdice)),
                Err(e) => out.push_str(&format!("{:<26} FAILED: {}\n", r.setting, e.message)),
            }
        }
        out
    }
}

impl From<&Error> for RowFailure {
    fn from(e: &Error) -> Self {
        Self {
            message: e.to_string(),
            exit_code: e.exit_code(),
        }
    }
}

/// Scenes shared by every ablation row.
pub struct AblationData {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
    pub num_classes: usize,
}

fn test_metrics(params: &ParamSet<f32>, test: &[Scene], tta: Option<&TtaPolicy>) -> Result<Metrics> {
    let (cm, _) = evaluate_scenes(params, test, EvalImage::Degraded, tta)?;
    miou_mdice(&cm)
}

/// Trains `clean_only` and `semi` from the same seed and data, then scores
/// each teacher on the degraded test images. Runs go to `out_dir/<mode>/`.
/// A failure in one run is recorded in its rows and does not stop the others.
pub fn ablate(cfg: &ConfigFile, data: &AblationData, out_dir: &Path) -> AblationTable {
    let run = |mode: TrainMode| -> Result<ParamSet<f32>> {
        let mode_cfg = ConfigFile { mode, ..cfg.clone() };
        mode_cfg.train_config().validate()?;
        let dir = out_dir.join(match mode {
            TrainMode::CleanOnly => "clean_only",
            TrainMode::Semi => "semi",
        });
        let out = run_training(&mode_cfg, &data.train, data.val.clone(), data.num_classes, &dir, None)?;
        Ok(out.checkpoint.teacher)
    };
    let tta = cfg.tta_policy();
    let clean = run(TrainMode::CleanOnly).and_then(|p| test_metrics(&p, &data.test, None));
    let (semi, semi_tta) = match run(TrainMode::Semi) {
        Ok(p) => (
            test_metrics(&p, &data.test, None).map_err(|e| RowFailure::from(&e)),
            tta.validate()
                .and_then(|_| test_metrics(&p, &data.test, Some(&tta)))
                .map_err(|e| RowFailure::from(&e)),
        ),
        Err(e) => {
            let f = RowFailure::from(&e);
            (Err(f.clone()), Err(f))
        }
    };
    let clean = clean.map_err(|e| RowFailure::from(&e));
    let rows = ABLATION_SETTINGS
        .iter()
        .zip([clean, semi, semi_tta])
        .map(|(&setting, r)| AblationRow {
            setting,
            outcome: r,
        })
        .collect();
    AblationTable { rows }
}
