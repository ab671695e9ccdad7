use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use cardioseg::checkpoint::Checkpoint;
use cardioseg::config::{parse_overrides, RunConfig};
use cardioseg::phantom::{self, Dataset, SegSample};
use cardioseg::pso::SearchSpace;
use cardioseg::train::{self, TrainOptions};
use cardioseg::{gradsuite, model, optim, report, tune, Error};

#[derive(Parser)]
#[command(name = "cardioseg", version, about = "Cardiac MRI segmentation on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable): --set epochs=5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset directory written by gen-data; generated in memory when absent
    #[arg(long)]
    data: Option<PathBuf>,
    /// Patients to generate when --data is absent
    #[arg(long, default_value_t = 30)]
    patients: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a phantom cohort to disk
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 30)]
        patients: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split, validating on val
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint directory
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs
        #[arg(long)]
        halt_after: Option<usize>,
    },
    /// Score a checkpoint on one split
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Pixel spacing in mm for HD95 and volumes
        #[arg(long)]
        spacing: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Architecture and loss ablation tables
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated k-fold cross-validation
    Cv {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSO search over loss weights, decoder lr and width
    Tune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 8)]
        particles: usize,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        /// Cap on objective evaluations; shortens --iters to fit
        #[arg(long)]
        budget: Option<usize>,
        /// Epochs per trial
        #[arg(long, default_value_t = 5)]
        trial_epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment images (.png or .tns) or a dataset split
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: PathBuf,
        images: Vec<PathBuf>,
    },
    /// Finite-difference gradient suite
    Gradcheck {
        /// Also write the results as JSON
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

type Res<T> = Result<T, Error>;

fn threads() -> usize {
    train::threads_from_env()
}

fn load_config(a: &ConfigArgs) -> Res<RunConfig> {
    let overrides = parse_overrides(&a.set)?;
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p, &overrides)?,
        None => RunConfig::from_text("", &overrides)?,
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(a: &DataArgs, cfg: &RunConfig) -> Res<Dataset> {
    match &a.data {
        Some(d) => {
            let ds = Dataset::read(d)?;
            if ds.meta.config != cfg.phantom {
                log::warn!("dataset {} was generated with a different phantom config", d.display());
            }
            Ok(ds)
        }
        None => Dataset::generate(a.patients, cfg.seed, &cfg.phantom, threads()),
    }
}

fn write(path: &Path, text: &str) -> Res<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cmd: Cmd) -> Res<()> {
    match cmd {
        Cmd::GenData { cfg, patients, out } => {
            let cfg = load_config(&cfg)?;
            let ds = Dataset::generate(patients, cfg.seed, &cfg.phantom, threads())?;
            ds.write(&out)?;
            println!("{} patients, {} slices -> {}", patients, ds.samples.len(), out.display());
        }
        Cmd::Train { cfg, data, out, resume, halt_after } => {
            let cfg = load_config(&cfg)?;
            let ds = load_data(&data, &cfg)?;
            let opts = TrainOptions { out_dir: Some(out.clone()), halt_after, resume, threads: threads() };
            let (res, split) = train::train_dataset(&cfg, &ds, &opts)?;
            write(&out.join("split.json"), &serde_json::to_string_pretty(&split)?)?;
            let logs = train::read_log(&out.join("train_log.ndjson"))?;
            write(&out.join("loss_curves.csv"), &report::loss_curves_csv(&logs))?;
            let steps = ds.of_patients(&split.train).count().div_ceil(cfg.batch_size) * cfg.epochs;
            write(&out.join("lr_schedule.csv"), &optim::schedule_csv(steps, cfg.lr.decoder_lr, cfg.lr.decoder_lr * cfg.lr_min_ratio)?)?;
            if let Some(l) = res.logs.last() {
                println!("epoch {} loss {:.4} val dice {}", l.epoch, l.loss.total, l.val_dice.map_or("-".into(), |d| format!("{d:.4}")));
            }
        }
        Cmd::Eval { data, ckpt, split, spacing, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let mut cfg = ck.config;
            if let Some(s) = spacing {
                cfg.spacing_mm = s;
            }
            let ds = load_data(&data, &cfg)?;
            let sp = train::split_for(&cfg, &ds)?;
            let samples: Vec<&SegSample> = ds.of_patients(sp.get(&split)?).collect();
            if samples.is_empty() {
                return Err(Error::Config(format!("split `{split}` is empty")));
            }
            let ev = train::evaluate(&ck.store, &cfg, &samples, threads())?;
            ev.write(&out)?;
            print!("{}", ev.report.to_text());
        }
        Cmd::Ablate { cfg, data, out } => {
            let cfg = load_config(&cfg)?;
            let ds = load_data(&data, &cfg)?;
            let t = train::ablate(&cfg, &ds, threads())?;
            write(&out.join("architecture.csv"), &t.architecture_csv())?;
            write(&out.join("loss.csv"), &t.loss_csv())?;
            write(&out.join("ablation.json"), &serde_json::to_string_pretty(&t)?)?;
            print!("{}", t.to_text());
        }
        Cmd::Cv { cfg, data, folds, repeats, out } => {
            let cfg = load_config(&cfg)?;
            let ds = load_data(&data, &cfg)?;
            let r = train::cross_validate(&cfg, &ds, folds, repeats, Some(&out), threads())?;
            write(&out.join("folds.csv"), &r.folds_csv())?;
            write(&out.join("cv.json"), &serde_json::to_string_pretty(&r)?)?;
            print!("{}", r.to_text());
        }
        Cmd::Tune { cfg, data, particles, iters, budget, trial_epochs, out } => {
            let cfg = load_config(&cfg)?;
            let ds = load_data(&data, &cfg)?;
            let space: SearchSpace = tune::default_space();
            let iterations = match budget {
                Some(b) if b < particles => return Err(Error::Config(format!("budget {b} is below one swarm of {particles}"))),
                Some(b) => iters.min(b / particles - 1),
                None => iters,
            };
            let opts = tune::TuneOptions { particles, iterations, trial_epochs: Some(trial_epochs), seed: cfg.seed, threads: threads() };
            let r = tune::tune(&cfg, &space, &ds, &opts)?;
            write(&out.join("leaderboard.csv"), &r.pso.leaderboard_csv(&space))?;
            write(&out.join("best.cfg"), &r.best_config)?;
            println!("incumbent {:.4}, best {:.4} after {} evaluations", r.incumbent_value, r.pso.best_value, r.pso.evaluations.len());
        }
        Cmd::Predict { ckpt, data, split, out, images } => {
            let ck = Checkpoint::load(&ckpt)?;
            let (names, tensors): (Vec<String>, Vec<_>) = match (&data, images.is_empty()) {
                (Some(d), true) => {
                    let ds = Dataset::read(d)?;
                    let ids = match split.as_deref() {
                        Some(s) => train::split_for(&ck.config, &ds)?.get(s)?.to_vec(),
                        None => ds.meta.patients.clone(),
                    };
                    ds.of_patients(&ids).map(|s| (s.case_id(), s.image.clone())).unzip()
                }
                (None, false) => images
                    .iter()
                    .map(|p| {
                        let stem = p.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
                        Ok((stem, phantom::load_image(p)?))
                    })
                    .collect::<Res<Vec<_>>>()?
                    .into_iter()
                    .unzip(),
                _ => return Err(Error::Config("give either --data or image paths".into())),
            };
            let refs: Vec<_> = tensors.iter().collect();
            let masks = model::predict(&ck.store, &ck.config.model, &refs, ck.config.batch_size, threads())?;
            fs::create_dir_all(&out)?;
            for (n, m) in names.iter().zip(&masks) {
                m.write_png(&out.join(format!("{n}.png")))?;
                m.to_tensor().write_tns(&out.join(format!("{n}_mask.tns")), cardioseg::tensor::DType::F32)?;
            }
            println!("{} masks -> {}", masks.len(), out.display());
        }
        Cmd::Gradcheck { out } => {
            let checks = gradsuite::run_suite()?;
            let mut failed = 0;
            for c in &checks {
                let ok = c.passes();
                failed += !ok as usize;
                println!("{:<4} {:<9} {:<20} {:.3e} (tol {:.0e})", if ok { "ok" } else { "FAIL" }, c.group, c.report.name, c.report.max_rel_err, c.tol);
            }
            if let Some(p) = out {
                let rows: Vec<_> = checks
                    .iter()
                    .map(|c| serde_json::json!({"group": c.group, "name": c.report.name, "max_rel_err": c.report.max_rel_err, "tol": c.tol, "pass": c.passes()}))
                    .collect();
                write(&p, &serde_json::to_string_pretty(&rows)?)?;
            }
            if failed > 0 {
                return Err(Error::GradCheck(format!("{failed} of {} checks above tolerance", checks.len())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::*;
            if matches!(e.kind(), DisplayHelp | DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            if !matches!(e.kind(), DisplayHelpOnMissingArgumentOrSubcommand | MissingSubcommand) {
                eprintln!("{}", Cli::command().render_help());
            }
            return ExitCode::from(1);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
