use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use wps_core::config::ConfigFile;
use wps_core::datagen::{generate_split, read_shard, write_shard, Scene, ShardHeader};
use wps_core::evaluate::{ablate, evaluate_scenes, miou_mdice, AblationData, EvalImage, Metrics, TtaPolicy};
use wps_core::model::Checkpoint;
use wps_core::selfcheck::{self, SelfCheckOptions};
use wps_core::trainer::{run_training, TrainMode, CHECKPOINT_FILE, LOG_FILE};
use wps_core::Error;

/// Semi-supervised segmentation of weather-degraded synthetic scenes.
#[derive(Parser)]
#[command(name = "wps", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test shards of paired clean/degraded scenes.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        train: usize,
        #[arg(long, default_value_t = 128)]
        val: usize,
        #[arg(long, default_value_t = 128)]
        test: usize,
        /// Image height and width.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train one model; writes a checkpoint and metrics log under `<out_dir>/<mode>/`.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Continue from this checkpoint, keeping its step counter.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a shard; prints JSON metrics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Toggle::Off)]
        tta: Toggle,
        /// Evaluate the student instead of the EMA teacher.
        #[arg(long)]
        use_student: bool,
        #[arg(long, value_enum, default_value_t = ImageArg::Degraded)]
        images: ImageArg,
        /// Also write per-class metrics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write predicted masks as raw u8 grids, one after another in shard order.
        #[arg(long)]
        dump_masks: Option<PathBuf>,
    },
    /// Train clean-only and semi-supervised models and tabulate test mIoU/mDice.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the fast invariant suite.
    Selfcheck {
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "clean_only")]
    CleanOnly,
    Semi,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ImageArg {
    Clean,
    Degraded,
}

fn mode_dir(out_dir: &Path, mode: TrainMode) -> PathBuf {
    out_dir.join(match mode {
        TrainMode::CleanOnly => "clean_only",
        TrainMode::Semi => "semi",
    })
}

fn load_config(path: &Path) -> Result<ConfigFile> {
    let (cfg, warnings) = ConfigFile::load(path)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn load_shard(path: &Path) -> Result<(ShardHeader, Vec<Scene>)> {
    Ok(read_shard(path)?)
}

fn check_compatible(a: &ShardHeader, b: &ShardHeader, what: &str) -> Result<()> {
    if a.num_classes != b.num_classes || a.height != b.height || a.width != b.width {
        return Err(Error::Config(format!(
            "{what} shard has {} classes at {}x{}, train shard has {} classes at {}x{}",
            b.num_classes, b.height, b.width, a.num_classes, a.height, a.width
        ))
        .into());
    }
    Ok(())
}

fn gen_data(out: &Path, counts: [usize; 3], size: usize, classes: usize, seed: u64) -> Result<()> {
    if !(2..=32).contains(&classes) {
        return Err(Error::Config(format!("--classes must lie in [2, 32], got {classes}")).into());
    }
    if size < 16 || size % 2 != 0 {
        return Err(Error::Config(format!("--size must be even and at least 16, got {size}")).into());
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (split, (name, count)) in ["train", "val", "test"].into_iter().zip(counts).enumerate() {
        let scenes = generate_split(seed, split as u64, count, size, classes)?;
        let path = out.join(format!("{name}.wps"));
        write_shard(&scenes, classes, &path)?;
        println!("wrote {} ({count} scenes)", path.display());
    }
    Ok(())
}

fn train(config: &Path, mode: Option<ModeArg>, resume: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(m) = mode {
        cfg.mode = match m {
            ModeArg::CleanOnly => TrainMode::CleanOnly,
            ModeArg::Semi => TrainMode::Semi,
        };
    }
    let (th, train) = load_shard(&cfg.train_shard)?;
    let (vh, val) = load_shard(&cfg.val_shard)?;
    check_compatible(&th, &vh, "val")?;
    let ckpt = resume.map(Checkpoint::load).transpose()?;
    if let Some(c) = &ckpt {
        if c.config_json != cfg.to_json() {
            eprintln!("warning: resuming with a config that differs from the checkpoint's");
        }
    }
    let dir = mode_dir(&cfg.out_dir, cfg.mode);
    eprintln!("resolved config: {}", cfg.to_json());
    let out = run_training(&cfg, &train, val, th.num_classes as usize, &dir, ckpt)?;
    let last = out.traces.last();
    println!(
        "trained to step {} ({} steps this run); final total loss {}",
        out.checkpoint.step,
        out.traces.len(),
        last.map_or("n/a".to_string(), |t| t.loss_report.total.to_string())
    );
    println!("checkpoint: {}", dir.join(CHECKPOINT_FILE).display());
    println!("metrics log: {}", dir.join(LOG_FILE).display());
    Ok(())
}

fn metrics_csv(m: &Metrics) -> String {
    let mut s = String::from("class,iou,dice\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in &m.per_class {
        s.push_str(&format!("{},{},{}\n", c.class, opt(c.iou), opt(c.dice)));
    }
    s.push_str(&format!("mean,{},{}\n", m.miou, m.mdice));
    s
}

struct EvalArgs<'a> {
    ckpt: &'a Path,
    data: &'a Path,
    tta: bool,
    use_student: bool,
    images: EvalImage,
    csv: Option<&'a Path>,
    dump_masks: Option<&'a Path>,
}

fn eval(a: EvalArgs<'_>) -> Result<()> {
    let ckpt = Checkpoint::load(a.ckpt)?;
    let (header, scenes) = load_shard(a.data)?;
    if header.num_classes as usize != ckpt.teacher.num_classes {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes, shard has {}",
            ckpt.teacher.num_classes, header.num_classes
        ))
        .into());
    }
    let policy = ConfigFile::parse(&ckpt.config_json)
        .map(|c| c.tta_policy())
        .unwrap_or_else(|_| TtaPolicy::default());
    let params = if a.use_student { &ckpt.student } else { &ckpt.teacher };
    let tta = a.tta.then_some(&policy);
    let (cm, preds) = evaluate_scenes(params, &scenes, a.images, tta)?;
    let metrics = miou_mdice(&cm)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    if let Some(path) = a.csv {
        fs::write(path, metrics_csv(&metrics)).map_err(|e| Error::io(path, e))?;
    }
    if let Some(path) = a.dump_masks {
        let mut bytes = Vec::with_capacity(preds.len() * (header.height * header.width) as usize);
        for p in &preds {
            bytes.extend_from_slice(&p.data);
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        eprintln!(
            "dumped {} masks of {}x{} u8 to {}",
            preds.len(),
            header.height,
            header.width,
            path.display()
        );
    }
    Ok(())
}

fn run_ablation(config: &Path) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let (th, train) = load_shard(&cfg.train_shard)?;
    let (vh, val) = load_shard(&cfg.val_shard)?;
    let (sh, test) = load_shard(&cfg.test_shard)?;
    check_compatible(&th, &vh, "val")?;
    check_compatible(&th, &sh, "test")?;
    let data = AblationData {
        train,
        val,
        test,
        num_classes: th.num_classes as usize,
    };
    let table = ablate(&cfg, &data, &cfg.out_dir);
    let csv_path = cfg.out_dir.join("ablation.csv");
    let txt_path = cfg.out_dir.join("ablation.txt");
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    fs::write(&csv_path, table.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    fs::write(&txt_path, table.to_text()).map_err(|e| Error::io(&txt_path, e))?;
    print!("{}", table.to_text());
    let code = table
        .rows
        .iter()
        .filter_map(|r| r.outcome.as_ref().err())
        .map(|f| f.exit_code)
        .max()
        .unwrap_or(0);
    Ok(ExitCode::from(code as u8))
}

fn run_selfcheck(corrupt_gradient: bool) -> ExitCode {
    let outcomes = selfcheck::run(&SelfCheckOptions { corrupt_gradient });
    let mut out = std::io::stdout().lock();
    for o in &outcomes {
        let _ = writeln!(out, "{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed == 0 {
        let _ = writeln!(out, "selfcheck: all {} checks passed", outcomes.len());
        ExitCode::SUCCESS
    } else {
        let _ = writeln!(out, "selfcheck: {failed} of {} checks FAILED", outcomes.len());
        ExitCode::from(4)
    }
}

/// `WPS_THREADS` caps the worker pool; 0 means a single worker.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("WPS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("WPS_THREADS must be a non-negative integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .context("building worker pool")?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    configure_threads()?;
    match cli.command {
        Command::GenData {
            out,
            train,
            val,
            test,
            size,
            classes,
            seed,
        } => gen_data(&out, [train, val, test], size, classes, seed)?,
        Command::Train { config, mode, resume } => train(&config, mode, resume.as_deref())?,
        Command::Eval {
            ckpt,
            data,
            tta,
            use_student,
            images,
            csv,
            dump_masks,
        } => eval(EvalArgs {
            ckpt: &ckpt,
            data: &data,
            tta: tta == Toggle::On,
            use_student,
            images: match images {
                ImageArg::Clean => EvalImage::Clean,
                ImageArg::Degraded => EvalImage::Degraded,
            },
            csv: csv.as_deref(),
            dump_masks: dump_masks.as_deref(),
        })?,
        Command::Ablate { config } => return run_ablation(&config),
        Command::Selfcheck { corrupt_gradient } => return Ok(run_selfcheck(corrupt_gradient)),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
