use wps_core::config::ConfigFile;
use wps_core::datagen::{generate_split, Scene};
use wps_core::losses::LdNormalize;
use wps_core::model::{forward_backward, is_encoder_param, LossSpec, TrainBatch, PARAM_NAMES};
use wps_core::trainer::{run_training, train, TrainConfig, TrainMode, Trainer, CHECKPOINT_FILE, LOG_FILE};

fn scenes(split: u64, n: usize, size: usize) -> Vec<Scene> {
    generate_split(3, split, n, size, 4).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_clean: 2,
        batch_degraded: 2,
        epochs: 2,
        crop: 16,
        tau: 0.3,
        ..TrainConfig::default()
    }
}

#[test]
fn clean_only_never_touches_degraded_images() {
    let train_set = scenes(0, 8, 16);
    let cfg = TrainConfig {
        mode: TrainMode::CleanOnly,
        ..small_config()
    };
    let mut log = Vec::new();
    let out = train(cfg, &train_set, scenes(1, 2, 16), 4, Some(&mut log)).unwrap();
    assert_eq!(out.degraded_reads, 0);
    assert!(!out.traces.is_empty());
    assert!(out.traces.iter().all(|t| t.loss_report.l_d == 0.0));
    let text = String::from_utf8(log).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), out.traces.len());
    assert!(rows.iter().all(|r| r.split(',').nth(3) == Some("0")), "{text}");
}

#[test]
fn semi_mode_reads_degraded_images_and_learns_from_them() {
    let train_set = scenes(0, 8, 16);
    let out = train(small_config(), &train_set, Vec::new(), 4, None).unwrap();
    assert_eq!(out.degraded_reads, out.traces.len() as u64 * 2);
    assert!(out.traces.iter().any(|t| t.loss_report.l_d > 0.0));
}

#[test]
fn gamma_zero_teacher_tracks_student_every_step() {
    let train_set = scenes(0, 8, 16);
    let cfg = TrainConfig {
        gamma: 0.0,
        ..small_config()
    };
    let mut t = Trainer::new(cfg, &train_set, Vec::new(), 4).unwrap();
    for _ in 0..t.total_steps() {
        let trace = t.train_step().unwrap();
        assert!(trace.ema_applied);
        assert_eq!(t.teacher.tensors, t.student.tensors);
    }
}

#[test]
fn teacher_starts_as_exact_copy_and_moves_once_per_step() {
    let train_set = scenes(0, 8, 16);
    let mut t = Trainer::new(small_config(), &train_set, Vec::new(), 4).unwrap();
    assert_eq!(t.teacher.tensors, t.student.tensors);
    let mut steps = Vec::new();
    while t.step < t.total_steps() {
        steps.push(t.train_step().unwrap().step);
    }
    assert_eq!(steps, (0..t.total_steps()).collect::<Vec<_>>());
    assert_ne!(t.teacher.tensors, t.student.tensors);
}

#[test]
fn frozen_encoder_is_bit_identical_after_training() {
    let train_set = scenes(0, 8, 16);
    let cfg = TrainConfig {
        freeze_encoder: true,
        ..small_config()
    };
    let mut t = Trainer::new(cfg, &train_set, Vec::new(), 4).unwrap();
    let before = t.student.clone();
    t.run(None, None).unwrap();
    for (ti, name) in PARAM_NAMES.iter().enumerate() {
        let same = t.student.tensors[ti] == before.tensors[ti];
        assert_eq!(same, is_encoder_param(name), "{name}");
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let train_set = scenes(0, 8, 16);
    let val = scenes(1, 2, 16);
    let mut full = Trainer::new(small_config(), &train_set, val.clone(), 4).unwrap();
    full.run(None, None).unwrap();

    let mut first = Trainer::new(small_config(), &train_set, val.clone(), 4).unwrap();
    first.run(None, Some(3)).unwrap();
    let bytes = first.checkpoint().to_bytes();
    let ckpt = wps_core::model::Checkpoint::from_bytes(std::path::Path::new("mem"), &bytes).unwrap();
    assert_eq!(ckpt.step, 3);
    let mut second = Trainer::new(small_config(), &train_set, val, 4).unwrap();
    second.restore(ckpt).unwrap();
    assert_eq!(second.step, 3);
    second.run(None, None).unwrap();
    assert_eq!(second.checkpoint().to_bytes(), full.checkpoint().to_bytes());
}

#[test]
fn run_training_writes_log_and_checkpoint_and_appends_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let train_set = scenes(0, 8, 16);
    let mut cfg = ConfigFile::default();
    cfg.batch_clean = 2;
    cfg.batch_degraded = 2;
    cfg.crop = 16;
    cfg.epochs = 1;
    let out = run_training(&cfg, &train_set, scenes(1, 2, 16), 4, dir.path(), None).unwrap();
    assert_eq!(out.checkpoint.step, 2);
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert!(log.starts_with(&format!("# config: {}\n", cfg.to_json())));
    let ckpt = wps_core::model::Checkpoint::load(dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.config_json, cfg.to_json());

    cfg.epochs = 2;
    let again = run_training(&cfg, &train_set, scenes(1, 2, 16), 4, dir.path(), Some(ckpt)).unwrap();
    assert_eq!(again.traces.first().unwrap().step, 2);
    assert_eq!(again.checkpoint.step, 4);
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let steps: Vec<&str> = log
        .lines()
        .filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit()))
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(steps, ["0", "1", "2", "3"]);
    assert_eq!(log.matches("step,epoch").count(), 1);
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let train_set = scenes(0, 8, 16);
    let other = Trainer::new(small_config(), &generate_split(3, 0, 8, 16, 5).unwrap(), Vec::new(), 5).unwrap();
    let mut t = Trainer::new(small_config(), &train_set, Vec::new(), 4).unwrap();
    let err = t.restore(other.checkpoint()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn too_few_degraded_images_is_a_config_error() {
    let cfg = TrainConfig {
        batch_degraded: 8,
        ..small_config()
    };
    let err = Trainer::new(cfg, &scenes(0, 8, 16), Vec::new(), 4).err().unwrap();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn divergence_reports_the_step() {
    let cfg = TrainConfig {
        lr: 1e30,
        ..small_config()
    };
    let mut t = Trainer::new(cfg, &scenes(0, 8, 16), Vec::new(), 4).unwrap();
    let err = t.run(None, None).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
    assert!(err.to_string().contains("step"), "{err}");
}

/// Supervised loss of the student on a fixed set of full, unaugmented clean images.
fn probe_loss(t: &Trainer, probe: &[Scene]) -> f64 {
    let batch = TrainBatch {
        clean: probe.iter().map(|s| (s.clean.clone(), s.label.clone())).collect(),
        strong: Vec::new(),
    };
    let spec = LossSpec {
        lambda: 1.0,
        ld_normalize: LdNormalize::AllPixels,
        freeze_encoder: false,
    };
    forward_backward(&t.student, &batch, &spec).unwrap().l_c
}

#[test]
fn probe_loss_drops_by_a_fifth_within_200_steps() {
    let train_set = generate_split(42, 0, 64, 64, 6).unwrap();
    let probe = generate_split(42, 1, 8, 64, 6).unwrap();
    let mut t = Trainer::new(TrainConfig::default(), &train_set, Vec::new(), 6).unwrap();
    let before = probe_loss(&t, &probe);
    t.run(None, Some(200)).unwrap();
    let after = probe_loss(&t, &probe);
    assert!(after <= 0.8 * before, "probe loss {before} -> {after}");
}
