//! Release acceptance suite. Each test prints one `PASS`/`FAIL` line straight
//! to stderr, so the verdicts show up even when output capture is on.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use wps_core::config::ConfigFile;
use wps_core::datagen::{generate_split, read_shard, write_shard};
use wps_core::evaluate::{ablate, miou_mdice, AblationData, ConfusionMatrix, ABLATION_SETTINGS};
use wps_core::gradcheck::{check_gradients, random_problem, GradCheckOptions};
use wps_core::losses::{make_pseudo, softmax, supervised_loss, unsupervised_loss, LdNormalize, PseudoPack};
use wps_core::model::{
    apply_channel_dropout, ema_update, sample_complementary_masks, Checkpoint, LossSpec, ParamSet, Role,
    FEAT_CHANNELS,
};
use wps_core::tensor::{substream, BinaryMask, LabelMask, Logits, ProbMap, Tensor3, IGNORE_LABEL};
use wps_core::Error;

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-3;
const GRAD_BUDGET_SECS: f64 = 120.0;
const LOSS_TOL: f64 = 1e-10;
const EMA_TOL: f64 = 1e-12;
const DROPOUT_MC_REL_TOL: f64 = 0.05;
const TAU: f64 = 0.95;
const ABLATION_SEMI_GAIN: f64 = 0.03;
const ABLATION_TTA_SLACK: f64 = 0.005;
const ABLATION_BUDGET_SECS: f64 = 30.0 * 60.0;

/// Prints the verdict line, then fails the test if the criterion failed.
fn verdict(n: u32, name: &str, outcome: Result<String, String>) {
    let line = match &outcome {
        Ok(d) => format!("[acceptance] criterion {n} PASS {name}: {d}\n"),
        Err(d) => format!("[acceptance] criterion {n} FAIL {name}: {d}\n"),
    };
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    if let Err(d) = outcome {
        panic!("criterion {n} ({name}) failed: {d}");
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let outcome = (|| {
        let spec = LossSpec {
            lambda: 1.0,
            ld_normalize: LdNormalize::AllPixels,
            freeze_encoder: false,
        };
        let mut worst = 0.0f64;
        let mut probes = 0;
        for seed in 0..5 {
            let (params, batch) = random_problem(seed, 16, 2, 2, 6);
            let opts = GradCheckOptions {
                eps: GRAD_EPS,
                seed,
                ..Default::default()
            };
            let report = check_gradients(&params, &batch, &spec, &opts).map_err(|e| e.to_string())?;
            ensure(report.tensors.len() == 10 && report.tensors.iter().all(|t| t.probes > 0), || {
                "some parameter tensor was not probed".into()
            })?;
            probes += report.probes();
            if report.max_rel_err() >= GRAD_REL_TOL {
                let bad: Vec<_> = report.tensors.iter().filter(|t| t.rel_err >= GRAD_REL_TOL).map(|t| (t.name, t.rel_err)).collect();
                return Err(format!("batch {seed}: {bad:?}"));
            }
            worst = worst.max(report.max_rel_err());
        }
        let secs = start.elapsed().as_secs_f64();
        ensure(secs < GRAD_BUDGET_SECS, || format!("took {secs:.1}s"))?;
        Ok(format!("5 batches, {probes} probes, max rel err {worst:.2e} < {GRAD_REL_TOL:e}, {secs:.1}s"))
    })();
    verdict(1, "gradient correctness", outcome);
}

fn random_probs(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ProbMap<f64> {
    let mut t = Tensor3::<f64>::zeros(c, h, w);
    for y in 0..h {
        for x in 0..w {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0f64).powi(3) + 1e-6).collect();
            let s: f64 = raw.iter().sum();
            for (k, v) in raw.iter().enumerate() {
                *t.at_mut(k, y, x) = v / s;
            }
        }
    }
    t
}

/// Per-pixel reference: mean of `-ln p[label]` over non-ignored pixels.
fn reference_supervised(probs: &[ProbMap<f64>], labels: &[LabelMask]) -> f64 {
    let mut terms = Vec::new();
    for (p, l) in probs.iter().zip(labels) {
        for y in 0..l.height {
            for x in 0..l.width {
                let k = l.at(y, x);
                if k != IGNORE_LABEL {
                    terms.push(-p.at(k as usize, y, x).max(1e-12).ln());
                }
            }
        }
    }
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}

fn reference_unsupervised(views: [(&[ProbMap<f64>], &[PseudoPack]); 2], normalize: LdNormalize) -> f64 {
    let (mut sum, mut confident, mut pixels) = (0.0, 0usize, 0usize);
    for (probs, packs) in views {
        for (p, pk) in probs.iter().zip(packs) {
            for y in 0..p.height {
                for x in 0..p.width {
                    pixels += 1;
                    if pk.conf.at(y, x) == 1 {
                        sum += -p.at(pk.label.at(y, x) as usize, y, x).max(1e-12).ln();
                        confident += 1;
                    }
                }
            }
        }
    }
    let denom = match normalize {
        LdNormalize::AllPixels => pixels,
        LdNormalize::ConfidentPixels => confident,
    };
    if denom == 0 {
        0.0
    } else {
        sum / denom as f64
    }
}

#[test]
fn criterion_2_loss_oracle_equivalence() {
    let outcome = (|| {
        let mut rng = substream(2, &[0]);
        let mut worst = 0.0f64;
        let (mut all_ignored, mut no_confident) = (0, 0);
        for i in 0..100 {
            let c = rng.random_range(2..7);
            let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
            let b = rng.random_range(1..4);
            let ignore_p = if i % 10 == 0 { 1.0 } else { 0.25 };
            let conf_p = if i % 10 == 5 { 0.0 } else { 0.5 };
            let probs: Vec<_> = (0..b).map(|_| random_probs(&mut rng, c, h, w)).collect();
            let labels: Vec<LabelMask> = (0..b)
                .map(|_| {
                    let data = (0..h * w)
                        .map(|_| {
                            if rng.random_bool(ignore_p) {
                                IGNORE_LABEL
                            } else {
                                rng.random_range(0..c) as u8
                            }
                        })
                        .collect();
                    LabelMask::from_vec(h, w, data).unwrap()
                })
                .collect();
            if labels.iter().all(|l| l.data.iter().all(|&v| v == IGNORE_LABEL)) {
                all_ignored += 1;
            }
            let got = supervised_loss(&probs, &labels).map_err(|e| e.to_string())?;
            worst = worst.max((got - reference_supervised(&probs, &labels)).abs());

            let probs2: Vec<_> = (0..b).map(|_| random_probs(&mut rng, c, h, w)).collect();
            let packs = |rng: &mut ChaCha8Rng| -> Vec<PseudoPack> {
                (0..b)
                    .map(|_| PseudoPack {
                        label: LabelMask::from_vec(h, w, (0..h * w).map(|_| rng.random_range(0..c) as u8).collect())
                            .unwrap(),
                        conf: BinaryMask::from_vec(
                            h,
                            w,
                            (0..h * w).map(|_| u8::from(rng.random_bool(conf_p))).collect(),
                        )
                        .unwrap(),
                        tau: TAU,
                    })
                    .collect()
            };
            let k1 = packs(&mut rng);
            let k2 = packs(&mut rng);
            if k1.iter().chain(&k2).all(|k| k.confident_pixels() == 0) {
                no_confident += 1;
            }
            for norm in [LdNormalize::AllPixels, LdNormalize::ConfidentPixels] {
                let got = unsupervised_loss(&probs, &probs2, &k1, &k2, norm).map_err(|e| e.to_string())?;
                let want = reference_unsupervised([(&probs, &k1), (&probs2, &k2)], norm);
                worst = worst.max((got - want).abs());
            }
        }
        ensure(all_ignored >= 10 && no_confident >= 10, || {
            format!("edge cases not exercised ({all_ignored} all-ignored, {no_confident} zero-confidence)")
        })?;
        ensure(worst <= LOSS_TOL, || format!("max abs diff {worst:e}"))?;
        Ok(format!(
            "100 instances ({all_ignored} all-ignored, {no_confident} zero-confidence), max abs diff {worst:.1e} <= {LOSS_TOL:e}"
        ))
    })();
    verdict(2, "loss-oracle equivalence", outcome);
}

#[test]
fn criterion_3_ema_exactness() {
    let outcome = (|| {
        let mut teacher = ParamSet::<f64>::zeros(2, Role::Teacher);
        let mut student = ParamSet::<f64>::zeros(2, Role::Student);
        teacher.tensors.iter_mut().for_each(|t| t.data.fill(1.0));
        student.tensors.iter_mut().for_each(|t| t.data.fill(0.5));
        ema_update(&mut teacher, &student, 0.99).map_err(|e| e.to_string())?;
        let probe = teacher
            .tensors
            .iter()
            .flat_map(|t| &t.data)
            .map(|v| (v - 0.995).abs())
            .fold(0.0, f64::max);
        ensure(probe <= EMA_TOL, || format!("probe off by {probe:e}"))?;

        let mut rng = substream(3, &[0]);
        let mut teacher = ParamSet::<f64>::init(3, &mut rng);
        let student = ParamSet::<f64>::init(3, &mut rng);
        let start = teacher.clone();
        let gamma = 0.95;
        let mut worst = 0.0f64;
        for n in 1..=100 {
            ema_update(&mut teacher, &student, gamma).map_err(|e| e.to_string())?;
            let g = gamma.powi(n);
            for ((t, t0), s) in teacher.tensors.iter().zip(&start.tensors).zip(&student.tensors) {
                for ((&tv, &t0v), &sv) in t.data.iter().zip(&t0.data).zip(&s.data) {
                    worst = worst.max((tv - (sv + g * (t0v - sv))).abs());
                }
            }
        }
        ensure(worst <= EMA_TOL, || format!("geometric decay off by {worst:e}"))?;
        Ok(format!("probe err {probe:.1e}; 100-step decay max err {worst:.1e} <= {EMA_TOL:e}"))
    })();
    verdict(3, "EMA exactness", outcome);
}

#[test]
fn criterion_4_complementary_dropout() {
    let outcome = (|| {
        let mut rng = substream(4, &[0]);
        let (h, w) = (3, 3);
        let feat = Tensor3::from_vec(
            FEAT_CHANNELS,
            h,
            w,
            (0..FEAT_CHANNELS * h * w).map(|_| rng.random_range(0.5..1.0)).collect(),
        )
        .unwrap();
        let draws = 10_000;
        let mut mean = vec![0.0f64; feat.data.len()];
        for _ in 0..draws {
            let (m1, m2) = sample_complementary_masks(&mut rng, 0.5, FEAT_CHANNELS);
            let a = apply_channel_dropout(&feat, &m1).map_err(|e| e.to_string())?;
            let b = apply_channel_dropout(&feat, &m2).map_err(|e| e.to_string())?;
            for c in 0..FEAT_CHANNELS {
                let in_a = a.plane(c).iter().any(|&v| v != 0.0);
                let in_b = b.plane(c).iter().any(|&v| v != 0.0);
                ensure(in_a != in_b, || format!("channel {c}: supports overlap or leave a gap"))?;
            }
            for (m, v) in mean.iter_mut().zip(&a.data) {
                *m += v / draws as f64;
            }
        }
        let worst = mean
            .iter()
            .zip(&feat.data)
            .map(|(m, e)| (m - e).abs() / e)
            .fold(0.0, f64::max);
        ensure(worst <= DROPOUT_MC_REL_TOL, || format!("Monte-Carlo mean off by {worst:.3} relative"))?;
        Ok(format!(
            "{draws} pairs disjoint and exhaustive; MC mean max rel err {worst:.4} <= {DROPOUT_MC_REL_TOL}"
        ))
    })();
    verdict(4, "complementary dropout", outcome);
}

#[test]
fn criterion_5_pseudo_label_contract() {
    let outcome = (|| {
        let mut rng = substream(5, &[0]);
        let mut checked = 0usize;
        let mut confident = 0usize;
        for _ in 0..50 {
            let c = rng.random_range(2..7);
            let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
            let mut probs = random_probs(&mut rng, c, h, w);
            // Pin some pixels exactly at and just around the threshold.
            for (i, target) in [TAU, 0.9500001, 0.9499999, 1.0].into_iter().enumerate() {
                if i < h * w {
                    let (y, x) = (i / w, i % w);
                    for k in 0..c {
                        *probs.at_mut(k, y, x) = if k == 0 { target } else { (1.0 - target) / (c - 1) as f64 };
                    }
                }
            }
            let pack = make_pseudo(&probs, TAU).map_err(|e| e.to_string())?;
            for y in 0..h {
                for x in 0..w {
                    let max = (0..c).map(|k| probs.at(k, y, x)).fold(f64::MIN, f64::max);
                    let want = u8::from(max >= TAU);
                    ensure(pack.conf.at(y, x) == want, || format!("conf at ({y},{x}) for max {max}"))?;
                    confident += want as usize;
                    checked += 1;
                }
            }
        }

        for _ in 0..50 {
            let c = rng.random_range(2..7);
            let logits: Logits<f64> = Tensor3::from_vec(c, 4, 4, (0..c * 16).map(|_| rng.random_range(-5.0..5.0)).collect())
                .unwrap();
            let base = make_pseudo(&softmax(&logits), TAU).map_err(|e| e.to_string())?.label;
            for t in [0.25, 0.5, 2.0, 5.0] {
                let scaled = logits.map(|v| v / t);
                let lab = make_pseudo(&softmax(&scaled), TAU).map_err(|e| e.to_string())?.label;
                ensure(lab == base, || format!("argmax changed at temperature {t}"))?;
            }
        }
        Ok(format!(
            "{checked} pixels ({confident} confident) match 1[max p >= {TAU}]; argmax stable over 4 temperatures"
        ))
    })();
    verdict(5, "pseudo-label contract", outcome);
}

#[test]
fn criterion_6_ablation_trend() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let outcome = (|| {
        let cfg = ConfigFile::default();
        let data = AblationData {
            train: generate_split(42, 0, 512, 64, 6).map_err(|e| e.to_string())?,
            val: generate_split(42, 1, 128, 64, 6).map_err(|e| e.to_string())?,
            test: generate_split(42, 2, 128, 64, 6).map_err(|e| e.to_string())?,
            num_classes: 6,
        };
        let table = ablate(&cfg, &data, dir.path());
        let _ = std::io::stderr().lock().write_all(table.to_text().as_bytes());
        let order: Vec<&str> = table.rows.iter().map(|r| r.setting).collect();
        ensure(order == ABLATION_SETTINGS, || format!("row order {order:?}"))?;
        ensure(table.all_ok(), || table.to_csv())?;
        let clean = table.miou(ABLATION_SETTINGS[0]).unwrap();
        let semi = table.miou(ABLATION_SETTINGS[1]).unwrap();
        let tta = table.miou(ABLATION_SETTINGS[2]).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let summary = format!(
            "clean {clean:.4}, semi {semi:.4} (gain {:+.4}, need >= {ABLATION_SEMI_GAIN}), tta {tta:.4} ({:+.4}, need >= -{ABLATION_TTA_SLACK}), {secs:.0}s",
            semi - clean,
            tta - semi
        );
        ensure(semi >= clean + ABLATION_SEMI_GAIN, || summary.clone())?;
        ensure(tta >= semi - ABLATION_TTA_SLACK, || summary.clone())?;
        ensure(secs < ABLATION_BUDGET_SECS, || summary.clone())?;
        Ok(summary)
    })();
    verdict(6, "ablation trend", outcome);
}

fn run_train(config: &Path, threads: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_wps"))
        .args(["train", "--config", config.to_str().unwrap()])
        .env("WPS_THREADS", threads)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn criterion_7_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = (|| {
        let d = dir.path();
        write_shard(&generate_split(7, 0, 32, 32, 5).unwrap(), 5, d.join("train.wps")).map_err(|e| e.to_string())?;
        write_shard(&generate_split(7, 1, 8, 32, 5).unwrap(), 5, d.join("val.wps")).map_err(|e| e.to_string())?;
        let mut cfg = ConfigFile::default();
        cfg.epochs = 3;
        cfg.batch_clean = 4;
        cfg.batch_degraded = 4;
        cfg.crop = 32;
        cfg.tau = 0.5;
        cfg.strong_cutmix = true;
        cfg.train_shard = d.join("train.wps");
        cfg.val_shard = d.join("val.wps");
        cfg.out_dir = d.join("runs");
        let config = d.join("config.json");
        std::fs::write(&config, cfg.to_json_pretty()).unwrap();
        let read = || -> Result<(Vec<u8>, Vec<u8>), String> {
            let run = d.join("runs/semi");
            Ok((
                std::fs::read(run.join("metrics.csv")).map_err(|e| e.to_string())?,
                std::fs::read(run.join("checkpoint.wpsckpt")).map_err(|e| e.to_string())?,
            ))
        };
        run_train(&config, "1")?;
        let (log_a, ckpt_a) = read()?;
        run_train(&config, "4")?;
        let (log_b, ckpt_b) = read()?;
        ensure(log_a == log_b, || "metrics CSVs differ".into())?;
        ensure(ckpt_a == ckpt_b, || "checkpoints differ".into())?;
        let rows = String::from_utf8_lossy(&log_a).lines().count() - 2;
        ensure(rows == 12, || format!("expected 12 logged steps, got {rows}"))?;
        Ok(format!(
            "two runs (1 and 4 workers): identical {}-byte CSV and {}-byte checkpoint",
            log_a.len(),
            ckpt_a.len()
        ))
    })();
    verdict(7, "determinism", outcome);
}

#[test]
fn criterion_8_metric_oracle() {
    let outcome = (|| {
        let mut rng = substream(8, &[0]);
        for i in 0..100 {
            let c = rng.random_range(2..8);
            let (h, w) = (rng.random_range(1..17), rng.random_range(1..17));
            let gt = LabelMask::from_vec(
                h,
                w,
                (0..h * w)
                    .map(|_| if rng.random_bool(0.1) { IGNORE_LABEL } else { rng.random_range(0..c) as u8 })
                    .collect(),
            )
            .unwrap();
            let pred = LabelMask::from_vec(h, w, (0..h * w).map(|_| rng.random_range(0..c) as u8).collect()).unwrap();
            let mut cm = ConfusionMatrix::new(c);
            cm.add(&gt, &pred).map_err(|e| e.to_string())?;

            let mut counts = vec![vec![0u64; c]; c];
            let mut ignored = 0u64;
            for (&g, &p) in gt.data.iter().zip(&pred.data) {
                if g == IGNORE_LABEL {
                    ignored += 1;
                } else {
                    counts[g as usize][p as usize] += 1;
                }
            }
            for (g, row) in counts.iter().enumerate() {
                for (p, &n) in row.iter().enumerate() {
                    ensure(cm.get(g, p) == n, || format!("instance {i}: count[{g}][{p}]"))?;
                }
            }
            ensure(cm.ignored == ignored && cm.total() == (h * w) as u64, || {
                format!("instance {i}: pixel conservation")
            })?;

            let (mut iou_sum, mut dice_sum, mut n) = (0.0, 0.0, 0usize);
            let mut per = Vec::new();
            for k in 0..c {
                let tp = counts[k][k];
                let fp: u64 = (0..c).filter(|&g| g != k).map(|g| counts[g][k]).sum();
                let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| counts[k][p]).sum();
                if tp + fp + fn_ == 0 {
                    per.push(None);
                    continue;
                }
                let iou = tp as f64 / (tp + fp + fn_) as f64;
                let dice = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
                iou_sum += iou;
                dice_sum += dice;
                n += 1;
                per.push(Some((iou, dice)));
            }
            match miou_mdice(&cm) {
                Ok(m) => {
                    ensure(n > 0, || format!("instance {i}: metrics for an empty matrix"))?;
                    ensure(m.miou == iou_sum / n as f64 && m.mdice == dice_sum / n as f64, || {
                        format!("instance {i}: means differ")
                    })?;
                    for (cm_k, want) in m.per_class.iter().zip(&per) {
                        let got = cm_k.iou.zip(cm_k.dice);
                        ensure(got == *want, || format!("instance {i}: class {}", cm_k.class))?;
                        if let Some((iou, dice)) = got {
                            ensure((0.0..=1.0).contains(&iou) && iou <= dice && dice <= 1.0, || {
                                format!("instance {i}: bounds for class {}", cm_k.class)
                            })?;
                        }
                    }
                }
                Err(Error::EmptyMetric) => ensure(n == 0, || format!("instance {i}: spurious empty metric"))?,
                Err(e) => return Err(e.to_string()),
            }
        }
        Ok("100 instances match brute-force counts exactly; 0 <= IoU <= Dice <= 1 everywhere".into())
    })();
    verdict(8, "metric oracle", outcome);
}

#[test]
fn criterion_9_format_stability() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = (|| {
        let d = dir.path();
        let scenes = generate_split(9, 0, 8, 32, 6).map_err(|e| e.to_string())?;
        let shard = d.join("a.wps");
        write_shard(&scenes, 6, &shard).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&shard).unwrap();
        let (_, back) = read_shard(&shard).map_err(|e| e.to_string())?;
        ensure(back == scenes, || "shard scenes differ after round trip".into())?;
        write_shard(&back, 6, d.join("b.wps")).map_err(|e| e.to_string())?;
        ensure(std::fs::read(d.join("b.wps")).unwrap() == bytes, || "shard bytes differ".into())?;

        let mut rng = substream(9, &[0]);
        let student = ParamSet::<f32>::init(6, &mut rng);
        let ckpt = Checkpoint {
            step: 1234,
            config_json: ConfigFile::default().to_json(),
            teacher: ParamSet::<f32>::init(6, &mut rng).with_role(Role::Teacher),
            momentum: ParamSet::<f32>::init(6, &mut rng),
            student,
        };
        let cpath = d.join("c.wpsckpt");
        ckpt.save(&cpath).map_err(|e| e.to_string())?;
        let loaded = Checkpoint::load(&cpath).map_err(|e| e.to_string())?;
        ensure(loaded == ckpt, || "checkpoint differs after round trip".into())?;
        ensure(loaded.to_bytes() == std::fs::read(&cpath).unwrap(), || "checkpoint bytes differ".into())?;

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(d.join("magic.wps"), &bad).unwrap();
        match read_shard(d.join("magic.wps")) {
            Err(e @ Error::MagicMismatch { .. }) => {
                ensure(e.to_string().contains("magic.wps") && e.exit_code() == 3, || e.to_string())?
            }
            other => return Err(format!("corrupted shard magic: {other:?}")),
        }
        let cut = bytes.len() - 100;
        std::fs::write(d.join("cut.wps"), &bytes[..cut]).unwrap();
        match read_shard(d.join("cut.wps")) {
            Err(e @ Error::Truncated { .. }) => {
                let msg = e.to_string();
                ensure(
                    msg.contains(&bytes.len().to_string()) && msg.contains(&cut.to_string()) && e.exit_code() == 3,
                    || msg.clone(),
                )?
            }
            other => return Err(format!("truncated shard: {other:?}")),
        }

        let cbytes = ckpt.to_bytes();
        let mut bad = cbytes.clone();
        bad[3] ^= 0xff;
        match Checkpoint::from_bytes(Path::new("bad.wpsckpt"), &bad) {
            Err(Error::MagicMismatch { .. }) => {}
            other => return Err(format!("corrupted checkpoint magic: {other:?}")),
        }
        match Checkpoint::from_bytes(Path::new("cut.wpsckpt"), &cbytes[..cbytes.len() / 2]) {
            Err(e @ Error::Truncated { .. }) => ensure(e.exit_code() == 3, || e.to_string())?,
            other => return Err(format!("truncated checkpoint: {other:?}")),
        }
        Ok(format!(
            "shard ({} B) and checkpoint ({} B) round trips bit-exact; magic and truncation errors diagnosed",
            bytes.len(),
            cbytes.len()
        ))
    })();
    verdict(9, "format stability", outcome);
}
