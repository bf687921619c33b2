//! `cdkit` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data or format error,
//! 3 numeric failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cdkit::checkpoint::Checkpoint;
use cdkit::config::{DataKind, RunConfig};
use cdkit::data::{write_cifar_binary, write_csv, CIFAR_GEOM};
use cdkit::eval::{evaluate_model, export_embeddings, ClusteringReport, Stage, REPORT_CSV_HEADER};
use cdkit::gradcheck::{check_model, ModelCheckOptions, MODEL_TOLERANCE};
use cdkit::train::{train_loop, write_loss_csv, Trainer};
use cdkit::{Error, OpKind};

const CONFIG_FILE: &str = "config.resolved";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const LOSS_FILE: &str = "loss.csv";

#[derive(Parser)]
#[command(name = "cdkit", version, about = "Contrastive disentangling: train, evaluate, check")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes config.resolved, loss.csv and checkpoint.bin
    /// into the run directory.
    Train {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Continue from a checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides: `--section.key value`, or `--epochs`, `--seed`, `--lr`,
        /// `--batch-size`, `--out`.
        #[arg(allow_hyphen_values = true, trailing_var_arg = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Cluster embeddings of a trained model and report NMI, ARI, ACC.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma list of backbone, final_output.
        #[arg(long)]
        stages: Option<String>,
        #[arg(long)]
        kmeans_seed: Option<u64>,
        /// Report CSV; defaults to report.csv next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write embeddings_<stage>.csv files here.
        #[arg(long)]
        export_dir: Option<PathBuf>,
        /// Dataset overrides such as `--data.path file`.
        #[arg(allow_hyphen_values = true, trailing_var_arg = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Compare analytic and finite-difference gradients of the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 6)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Corrupt one backward rule (harness self-test).
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Train and evaluate over a grid of ablation switches.
    Ablate {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Switches to vary: any of ne, head, view, sched.
        #[arg(long, default_value = "ne,head,view,sched")]
        vary: String,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Table CSV; defaults to ablation.csv in the run directory.
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(allow_hyphen_values = true, trailing_var_arg = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Write a synthetic dataset: pattern images as CIFAR binary, Gaussian
    /// mixtures as CSV.
    Gendata {
        #[arg(long)]
        out: PathBuf,
        /// Data overrides such as `--data.kind pattern_images`.
        #[arg(allow_hyphen_values = true, trailing_var_arg = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Format(_) | Error::Version { .. } | Error::Checksum { .. } => 2,
            Error::Numeric(_) | Error::DegenerateRow { .. } | Error::Domain { .. } => 3,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 1, msg: msg.into() }
}

type CliResult<T = ()> = Result<T, Failure>;

fn pairs(args: &[String]) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| usage(format!("expected an override like --train.lr, got `{flag}`")))?;
        let value = it.next().ok_or_else(|| usage(format!("override --{key} needs a value")))?;
        out.push((key.to_string(), value.clone()));
    }
    Ok(out)
}

/// Config file (or defaults) plus overrides. A missing file is a usage
/// error naming the path.
fn load_config(path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => usage(e.to_string()),
            other => other.into(),
        })?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&pairs(overrides)?)?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn cmd_train(config: Option<PathBuf>, resume: Option<PathBuf>, overrides: Vec<String>) -> CliResult {
    let (mut trainer, cfg) = match resume {
        Some(ckpt) => {
            let mut c = Checkpoint::load(&ckpt)?;
            c.config.apply_overrides(&pairs(&overrides)?)?;
            let cfg = c.config.clone();
            (Trainer::from_checkpoint(c)?, cfg)
        }
        None => {
            let cfg = load_config(config.as_deref(), &overrides)?.resolved();
            cfg.validate()?;
            let shape = cfg.data.load()?.samples().shape();
            (Trainer::new(&cfg, shape)?, cfg)
        }
    };
    let dir = PathBuf::from(&cfg.out_dir);
    create_dir(&dir)?;
    cfg.save(dir.join(CONFIG_FILE))?;
    let ds = cfg.data.load()?;
    let mut log = Vec::new();
    while !trainer.is_finished() {
        let rec = trainer.train_epoch(ds.samples())?;
        eprintln!(
            "epoch {:>4}  inst {:.4}  feat {:.4}  ent {:.4}  total {:.4}  lr {:.2e}",
            rec.epoch, rec.losses.l_inst, rec.losses.l_feat, rec.losses.l_entropy, rec.losses.l_total, rec.lr
        );
        log.push(rec);
        write_loss_csv(dir.join(LOSS_FILE), &log)?;
    }
    trainer.checkpoint().save(dir.join(CHECKPOINT_FILE))?;
    println!("run directory: {}", dir.display());
    Ok(())
}

fn parse_stages(s: &str) -> CliResult<Vec<Stage>> {
    s.split(',').map(|x| x.trim().parse::<Stage>().map_err(usage)).collect()
}

fn reports_csv(reports: &[ClusteringReport]) -> String {
    let mut s = format!("{REPORT_CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

fn cmd_eval(
    checkpoint: PathBuf,
    stages: Option<String>,
    kmeans_seed: Option<u64>,
    out: Option<PathBuf>,
    export_dir: Option<PathBuf>,
    overrides: Vec<String>,
) -> CliResult {
    let ckpt = Checkpoint::load(&checkpoint)?;
    let mut data_cfg = ckpt.config.clone();
    data_cfg.apply_overrides(&pairs(&overrides)?)?;
    let ds = data_cfg.data.load()?;
    let stages = match stages {
        Some(s) => parse_stages(&s)?,
        None => ckpt.config.eval.stages.clone(),
    };
    let seed = kmeans_seed.unwrap_or(ckpt.config.eval.kmeans_seed);
    let mut reports = Vec::new();
    for stage in stages {
        let r = evaluate_model(&ckpt, &ds, stage, seed)?;
        println!("{r}");
        reports.push(r);
        if let Some(dir) = &export_dir {
            create_dir(dir)?;
            export_embeddings(&ckpt, &ds, stage, dir.join(format!("embeddings_{}.csv", stage.name())))?;
        }
    }
    let out = out.unwrap_or_else(|| checkpoint.with_file_name("report.csv"));
    fs::write(&out, reports_csv(&reports)).map_err(|e| Error::Io { path: out, source: e })?;
    Ok(())
}

fn cmd_gradcheck(batch: usize, heads: usize, dim: usize, seed: u64, eps: f64, fault: Option<String>) -> CliResult {
    if batch < 2 || heads < 2 || dim == 0 || batch > 6 || heads > 6 {
        return Err(usage("gradcheck needs 2 <= batch, heads <= 6 and dim >= 1"));
    }
    let fault = match fault {
        Some(name) => Some(OpKind::from_name(&name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            usage(format!("unknown op `{name}`; one of {}", known.join(", ")))
        })?),
        None => None,
    };
    let opts = ModelCheckOptions {
        batch,
        heads,
        input_dim: dim,
        eps,
        seed,
        fault,
        ..Default::default()
    };
    let report = check_model(&opts)?;
    let w = report.worst();
    println!(
        "checked {} coordinates; max relative error {:.3e} in {}[{}]",
        report.coordinates, w.max_error, w.name, w.index
    );
    if report.passed() {
        println!("PASS (tolerance {MODEL_TOLERANCE:e})");
        Ok(())
    } else {
        let bad: Vec<&str> = report
            .per_param
            .iter()
            .filter(|p| p.max_error >= MODEL_TOLERANCE)
            .map(|p| p.name.as_str())
            .collect();
        Err(Failure {
            code: 3,
            msg: format!("gradient check FAILED (tolerance {MODEL_TOLERANCE:e}); offending: {}", bad.join(", ")),
        })
    }
}

const AXES: [&str; 4] = ["ne", "head", "view", "sched"];

fn apply_axis(cfg: &mut RunConfig, axis: &str, on: bool) {
    match axis {
        "ne" => cfg.train.use_entropy_loss = on,
        "head" => cfg.train.use_feature_head = on,
        "view" => cfg.train.dual_view = on,
        "sched" => {
            cfg.train.use_scheduler = on;
            cfg.train.use_clipping = on;
        }
        _ => unreachable!("validated axis"),
    }
}

fn axis_value(cfg: &RunConfig, axis: &str) -> bool {
    match axis {
        "ne" => cfg.train.use_entropy_loss,
        "head" => cfg.train.use_feature_head,
        "view" => cfg.train.dual_view,
        _ => cfg.train.use_scheduler && cfg.train.use_clipping,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median reports over seeds for one cell, in `stages` order.
fn run_cell(cfg: &RunConfig, seeds: u64) -> Result<Vec<ClusteringReport>, Error> {
    let ds = cfg.data.load()?;
    let mut per_seed: Vec<Vec<ClusteringReport>> = Vec::new();
    for s in 0..seeds {
        let mut c = cfg.clone();
        c.seeds.master = cfg.seeds.master.wrapping_add(s);
        c.seeds.init = None;
        c.seeds.augment = None;
        c.seeds.shuffle = None;
        let (ckpt, _) = train_loop(&c, ds.samples())?;
        let reps = c
            .eval
            .stages
            .iter()
            .map(|&st| evaluate_model(&ckpt, &ds, st, c.eval.kmeans_seed))
            .collect::<Result<Vec<_>, _>>()?;
        per_seed.push(reps);
    }
    Ok(cfg
        .eval
        .stages
        .iter()
        .enumerate()
        .map(|(i, &stage)| ClusteringReport {
            stage,
            nmi: median(per_seed.iter().map(|r| r[i].nmi).collect()),
            ari: median(per_seed.iter().map(|r| r[i].ari).collect()),
            acc: median(per_seed.iter().map(|r| r[i].acc).collect()),
        })
        .collect())
}

fn cmd_ablate(config: Option<PathBuf>, vary: String, seeds: u64, table: Option<PathBuf>, overrides: Vec<String>) -> CliResult {
    let cfg = load_config(config.as_deref(), &overrides)?;
    cfg.validate()?;
    if seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let mut varied: Vec<&str> = Vec::new();
    for v in vary.split(',').map(str::trim).filter(|v| !v.is_empty()) {
        let axis = AXES
            .iter()
            .find(|a| **a == v)
            .ok_or_else(|| usage(format!("unknown ablation axis `{v}`; use ne, head, view, sched")))?;
        if !varied.contains(axis) {
            varied.push(axis);
        }
    }
    let mut header = String::from("ne,head,view,sched");
    for st in &cfg.eval.stages {
        for m in ["nmi", "ari", "acc"] {
            let _ = write!(header, ",{}_{m}", st.name());
        }
    }
    header.push_str(",error\n");
    let mut csv = header;
    let cells = 1usize << varied.len();
    let mut failed = 0;
    for mask in 0..cells {
        let mut c = cfg.clone();
        // First row has every varied switch on.
        for (b, axis) in varied.iter().enumerate() {
            apply_axis(&mut c, axis, mask & (1 << b) == 0);
        }
        let flags: Vec<&str> = AXES.iter().map(|a| if axis_value(&c, a) { "on" } else { "off" }).collect();
        eprintln!("cell {}/{}: {}", mask + 1, cells, flags.join(" "));
        let _ = write!(csv, "{}", flags.join(","));
        match run_cell(&c, seeds) {
            Ok(reports) => {
                for r in &reports {
                    let _ = write!(csv, ",{},{},{}", r.nmi, r.ari, r.acc);
                    println!("[{}] {r}", flags.join(" "));
                }
                csv.push_str(",\n");
            }
            Err(e) => {
                failed += 1;
                eprintln!("cell failed: {e}");
                csv.push_str(&",".repeat(3 * cfg.eval.stages.len()));
                let _ = writeln!(csv, ",{}", e.to_string().replace([',', '\n'], ";"));
            }
        }
    }
    let path = match table {
        Some(p) => p,
        None => {
            let dir = PathBuf::from(&cfg.out_dir);
            create_dir(&dir)?;
            dir.join("ablation.csv")
        }
    };
    fs::write(&path, csv).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    println!("table: {}", path.display());
    if failed == cells {
        return Err(Failure {
            code: 3,
            msg: "every ablation cell failed".into(),
        });
    }
    Ok(())
}

fn cmd_gendata(out: PathBuf, overrides: Vec<String>) -> CliResult {
    let cfg = load_config(None, &overrides)?;
    let data = &cfg.data;
    match data.kind {
        DataKind::PatternImages => {
            if data.image != CIFAR_GEOM {
                return Err(usage("CIFAR output needs --data.image 3x32x32"));
            }
            if data.num_classes > 10 {
                return Err(usage("CIFAR output holds at most 10 classes"));
            }
            write_cifar_binary(&data.load()?, &out)?;
        }
        DataKind::GaussianMixture => write_csv(&data.load()?, &out)?,
        other => return Err(usage(format!("gendata synthesizes data; data.kind = {} is a file", other.name()))),
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train {
            config,
            resume,
            overrides,
        } => cmd_train(config, resume, overrides),
        Command::Eval {
            checkpoint,
            stages,
            kmeans_seed,
            out,
            export_dir,
            overrides,
        } => cmd_eval(checkpoint, stages, kmeans_seed, out, export_dir, overrides),
        Command::Gradcheck {
            batch,
            heads,
            dim,
            seed,
            eps,
            inject_fault,
        } => cmd_gradcheck(batch, heads, dim, seed, eps, inject_fault),
        Command::Ablate {
            config,
            vary,
            seeds,
            table,
            overrides,
        } => cmd_ablate(config, vary, seeds, table, overrides),
        Command::Gendata { out, overrides } => cmd_gendata(out, overrides),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
