//! Command line driver for the distillation pipeline.
//!
//! Exit codes: 0 success, 2 configuration, 3 data/format, 4 numeric
//! divergence, 5 missing dependency.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};

use lss_core::augment::AugPolicy;
use lss_core::data::{ingest, load_store, DatasetStore};
use lss_core::error::{Error, Result};
use lss_core::eval::{
    ablation_grid, baseline_random_subset, evaluate_state, EvalConfig,
};
use lss_core::expert::{build_buffer, load_buffer, ExpertConfig};
use lss_core::labels::LabelInit;
use lss_core::lowrank::{plan_budget, InitScheme, StoragePlan};
use lss_core::matcher::{
    distill, init_state, DistillState, MatchConfig,
};
use lss_core::models::ConvNetSpec;
use lss_core::schedule::ScheduleConfig;

#[derive(Parser)]
#[command(name = "lss", version, about = "Low-rank synthetic-set distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download-free ingestion: convert a raw dataset into the normalized
    /// internal store.
    Ingest {
        /// desk, cifar10, cifar100, svhn, mnist, fashion or idx
        #[arg(long)]
        dataset: String,
        /// Directory holding the raw files (not needed for desk)
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resolve a storage plan against the pixel budget and print it.
    Budget {
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 1)]
        ipc: usize,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
    },
    /// Train expert trajectories into a buffer directory.
    Buffer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value override, repeatable; wins over the config file
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Run the meta-optimization against a buffer.
    Distill {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        buffer: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Train fresh students on a distilled container and report accuracy.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// LSS1 container to evaluate
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Also score an ipc-matched random real subset
        #[arg(long, default_value_t = false)]
        baseline: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// The eight-row component ablation (soft labels x progressive
    /// schedule x low-rank parameterization).
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        buffer: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Render a distilled container as PNG grids.
    Export {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Known configuration keys with their desk-preset defaults. Values are
/// kept as strings; typed access parses on demand.
const DEFAULTS: &[(&str, &str)] = &[
    ("model_depth", "3"),
    ("model_width", "16"),
    ("expert_epochs", "10"),
    ("expert_count", "5"),
    ("expert_lr", "0.01"),
    ("expert_momentum", "0.9"),
    ("expert_batch", "32"),
    ("expert_seed", "100"),
    ("rank", "2"),
    ("k", "4"),
    ("m", "46"),
    ("ipc", "1"),
    ("init", "svd_real"),
    ("label_init", "round_robin_smoothed"),
    ("iterations", "100"),
    ("student_steps", "6"),
    ("expert_steps", "1"),
    ("batch", "24"),
    ("lr_mappers", "0.3"),
    ("lr_basis", "0.3"),
    ("lr_labels", "0.1"),
    ("lr_alpha", "0.01"),
    ("alpha_init", "0.1"),
    ("learn_alpha", "true"),
    ("max_start", "3"),
    ("delta", "1"),
    ("window", "2"),
    ("progressive", "true"),
    ("augment", "true"),
    ("seed", "0"),
    ("checkpoint_interval", "100"),
    ("eval_epochs", "100"),
    ("eval_lr", "0.01"),
    ("eval_batch", "32"),
    ("eval_seeds", "5"),
];

#[derive(Clone, Debug)]
struct Cfg {
    values: BTreeMap<String, String>,
}

impl Cfg {
    fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Cfg> {
        let mut values: BTreeMap<String, String> = DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let known = |key: &str| DEFAULTS.iter().any(|(k, _)| *k == key);
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!(
                        "{}:{}: expected key=value, got '{line}'",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                let key = key.trim();
                if !known(key) {
                    return Err(Error::Config(format!(
                        "{}:{}: unknown key '{key}'",
                        path.display(),
                        lineno + 1
                    )));
                }
                values.insert(key.to_string(), value.trim().to_string());
            }
        }
        // command line overrides win over the file
        for set in sets {
            let (key, value) = set.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects key=value, got '{set}'"))
            })?;
            if !known(key) {
                return Err(Error::Config(format!("unknown key '{key}'")));
            }
            values.insert(key.to_string(), value.to_string());
        }
        Ok(Cfg { values })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .values
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing key '{key}'")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{raw}'")))
    }

    /// Echo the resolved configuration before any work happens so a run
    /// directory always records what produced it.
    fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={v}\n"));
        }
        let path = dir.join("config.txt");
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))
    }
}

fn load_split(dir: &Path, split: &str) -> Result<DatasetStore> {
    load_store(&dir.join(format!("{split}.lssd")))
}

fn model_spec(cfg: &Cfg, store: &DatasetStore) -> Result<ConvNetSpec> {
    let (c, h, w) = store.shape();
    Ok(ConvNetSpec {
        depth: cfg.get("model_depth")?,
        width: cfg.get("model_width")?,
        num_classes: store.num_classes,
        in_channels: c,
        height: h,
        width_px: w,
    })
}

fn aug_policy(cfg: &Cfg, store: &DatasetStore) -> Result<AugPolicy> {
    let enabled: bool = cfg.get("augment")?;
    let (c, h, _) = store.shape();
    Ok(if !enabled {
        AugPolicy::empty()
    } else if c > 1 {
        AugPolicy::default_color(h)
    } else {
        AugPolicy::default_gray(h)
    })
}

fn storage_plan(cfg: &Cfg, store: &DatasetStore) -> Result<StoragePlan> {
    let (c, h, w) = store.shape();
    plan_budget(
        c,
        h,
        w,
        store.num_classes,
        cfg.get("ipc")?,
        cfg.get("rank")?,
        Some(cfg.get("k")?),
        Some(cfg.get("m")?),
    )
}

fn match_config(cfg: &Cfg, store: &DatasetStore) -> Result<MatchConfig> {
    let iterations: usize = cfg.get("iterations")?;
    Ok(MatchConfig {
        student_steps: cfg.get("student_steps")?,
        expert_steps: cfg.get("expert_steps")?,
        batch_size: cfg.get("batch")?,
        iterations,
        lr_mappers: cfg.get("lr_mappers")?,
        lr_basis: cfg.get("lr_basis")?,
        lr_labels: cfg.get("lr_labels")?,
        lr_alpha: cfg.get("lr_alpha")?,
        alpha_init: cfg.get("alpha_init")?,
        learn_alpha: cfg.get("learn_alpha")?,
        schedule: ScheduleConfig {
            max_start: cfg.get("max_start")?,
            delta: cfg.get("delta")?,
            w: cfg.get("window")?,
            total_iterations: iterations.max(1),
            progressive: cfg.get("progressive")?,
        },
        policy: aug_policy(cfg, store)?,
        seed: cfg.get("seed")?,
    })
}

fn eval_config(cfg: &Cfg, store: &DatasetStore) -> Result<EvalConfig> {
    let n_seeds: usize = cfg.get("eval_seeds")?;
    Ok(EvalConfig {
        epochs: cfg.get("eval_epochs")?,
        lr: cfg.get("eval_lr")?,
        momentum: 0.9,
        batch_size: cfg.get("eval_batch")?,
        seeds: (0..n_seeds as u64).collect(),
        policy: aug_policy(cfg, store)?,
    })
}

fn cmd_budget(
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    ipc: usize,
    rank: usize,
    k: Option<usize>,
    m: Option<usize>,
) -> Result<()> {
    let plan = plan_budget(channels, height, width, classes, ipc, rank, k, m)?;
    println!("{}", serde_json::to_string_pretty(&plan).unwrap());
    Ok(())
}

fn cmd_buffer(data: &Path, out: &Path, cfg: &Cfg) -> Result<()> {
    cfg.echo(out)?;
    let train = load_split(data, "train")?;
    let spec = model_spec(cfg, &train)?;
    let (c, h, _) = train.shape();
    let base = ExpertConfig {
        epochs: cfg.get("expert_epochs")?,
        lr: cfg.get("expert_lr")?,
        momentum: cfg.get("expert_momentum")?,
        batch_size: cfg.get("expert_batch")?,
        seed: cfg.get("expert_seed")?,
        ..ExpertConfig::new(cfg.get("expert_epochs")?, 0, h, c)
    };
    let count: usize = cfg.get("expert_count")?;
    let manifest = build_buffer(&train, &spec, &base, count, out, |i, traj| {
        println!(
            "expert {i}: {} epochs, {} snapshots",
            traj.meta.epochs,
            traj.snapshots.len()
        );
    })?;
    println!("buffer: {} trajectories in {}", manifest.entries.len(), out.display());
    Ok(())
}

fn cmd_distill(data: &Path, buffer: &Path, run: &Path, cfg: &Cfg) -> Result<()> {
    cfg.echo(run)?;
    let train = load_split(data, "train")?;
    let spec = model_spec(cfg, &train)?;
    let trajectories = load_buffer(buffer, Some(spec.spec_hash()))?;
    let plan = storage_plan(cfg, &train)?;
    let mcfg = match_config(cfg, &train)?;
    let init: InitScheme = cfg.get::<String>("init")?.parse()?;
    let label_init: LabelInit = cfg.get::<String>("label_init")?.parse()?;
    let mut state = init_state(&train, &plan, init, label_init, mcfg.alpha_init, mcfg.seed)?;
    let interval: usize = cfg.get("checkpoint_interval")?;
    let log_path = run.join("loss_log.txt");
    let mut log = String::new();
    distill(
        &mut state,
        &spec,
        &trajectories,
        &mcfg,
        Some((run, interval)),
        |rec| {
            let line = format!(
                "{} {} {:.6} {:.6} {:.3e}",
                rec.iteration, rec.start_epoch, rec.loss, rec.alpha, rec.grad_norm
            );
            if rec.iteration % 20 == 0 {
                println!("{line}");
            }
            log.push_str(&line);
            log.push('\n');
        },
    )?;
    std::fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
    if state.clip_events > 0 {
        eprintln!("warning: meta-gradient clipped {} times", state.clip_events);
    }
    println!(
        "distill: {} iterations, final checkpoint in {}",
        state.iteration,
        run.display()
    );
    Ok(())
}

fn cmd_eval(data: &Path, input: &Path, run: &Path, baseline: bool, cfg: &Cfg) -> Result<()> {
    cfg.echo(run)?;
    let train = load_split(data, "train")?;
    let test = load_split(data, "test")?;
    let spec = model_spec(cfg, &test)?;
    let (dataset, labels) = lss_core::container::load_dataset(input)?;
    let state = DistillState::new(dataset, labels, cfg.get("alpha_init")?);
    let ecfg = eval_config(cfg, &test)?;
    let report = evaluate_state(&state, &spec, &test, &ecfg)?;
    let mut out = serde_json::json!({ "distilled": report });
    if baseline {
        let base = baseline_random_subset(&train, &test, &spec, cfg.get("ipc")?, &ecfg, cfg.get("seed")?)?;
        out["random_baseline"] = serde_json::to_value(&base).unwrap();
    }
    let text = serde_json::to_string_pretty(&out).unwrap();
    let path = run.join("eval.json");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    println!("{text}");
    Ok(())
}

fn cmd_ablate(data: &Path, buffer: &Path, run: &Path, cfg: &Cfg) -> Result<()> {
    cfg.echo(run)?;
    let train = load_split(data, "train")?;
    let test = load_split(data, "test")?;
    let spec = model_spec(cfg, &train)?;
    let trajectories = load_buffer(buffer, Some(spec.spec_hash()))?;
    let plan = storage_plan(cfg, &train)?;
    let mcfg = match_config(cfg, &train)?;
    let ecfg = eval_config(cfg, &test)?;
    let init: InitScheme = cfg.get::<String>("init")?.parse()?;
    println!("soft  prog  lowrank  mean    std");
    let rows = ablation_grid(
        &train,
        &test,
        &plan,
        &spec,
        &trajectories,
        &mcfg,
        &ecfg,
        init,
        mcfg.seed,
        |row| {
            println!(
                "{:<5} {:<5} {:<8} {:.4}  {:.4}",
                row.soft_labels, row.progressive, row.lowrank, row.mean, row.std
            );
        },
    )?;
    let path = run.join("ablation.json");
    std::fs::write(&path, serde_json::to_string_pretty(&rows).unwrap())
        .map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn cmd_export(data: &Path, input: &Path, out: &Path) -> Result<()> {
    let train = load_split(data, "train")?;
    let (dataset, _labels) = lss_core::container::load_dataset(input)?;
    let files = lss_core::export::export_dataset(&dataset, &train.mean, &train.std, out)?;
    for f in &files {
        println!("{}", f.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { dataset, source, out } => {
            ingest(&dataset, source.as_deref(), &out)?;
            println!("ingested '{dataset}' into {}", out.display());
            Ok(())
        }
        Command::Budget { channels, height, width, classes, ipc, rank, k, m } => {
            cmd_budget(channels, height, width, classes, ipc, rank, k, m)
        }
        Command::Buffer { data, out, config, sets } => {
            let cfg = Cfg::resolve(config.as_deref(), &sets)?;
            cmd_buffer(&data, &out, &cfg)
        }
        Command::Distill { data, buffer, run: run_dir, config, sets } => {
            let cfg = Cfg::resolve(config.as_deref(), &sets)?;
            cmd_distill(&data, &buffer, &run_dir, &cfg)
        }
        Command::Eval { data, input, run: run_dir, baseline, config, sets } => {
            let cfg = Cfg::resolve(config.as_deref(), &sets)?;
            cmd_eval(&data, &input, &run_dir, baseline, &cfg)
        }
        Command::Ablate { data, buffer, run: run_dir, config, sets } => {
            let cfg = Cfg::resolve(config.as_deref(), &sets)?;
            cmd_ablate(&data, &buffer, &run_dir, &cfg)
        }
        Command::Export { data, input, out } => cmd_export(&data, &input, &out),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version print and exit 0; real argument errors exit 2
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
