use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use divnorm_core::gradcheck::{self, END_TO_END_TOLERANCE, LAYER_TOLERANCE};
use divnorm_core::retrieval::{build_stores, evaluate_stores, EvalReport, Protocol};
use divnorm_core::synth::{drop_outfits, generate, Dataset};
use divnorm_core::trainer::{train_run, Checkpoint, EpochLog};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{ExperimentConfig, KEYS, OUT_ENV};
use crate::dataset::{load_dataset, save_dataset};
use crate::error::{CliError, Result};
use crate::manifest::Manifest;
use crate::reports::{self, DropClothesRow, SeededReport};

#[derive(Debug, Parser)]
#[command(name = "divnorm", version, about = "Cloth-changing re-identification experiments on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` config file (see `divnorm keys`)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: $DIVNORM_OUT, else `out`]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write dataset.csv
    Synth(Common),
    /// Train on a dataset and write checkpoint.bin and train_log.csv
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under every protocol and strategy and write report.csv
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write per_query_<protocol>_<strategy>.csv
        #[arg(long)]
        per_query: bool,
    },
    /// Synthesize, train and evaluate every strategy for each seed; writes query_strategy.csv
    AblateQueryStrategy(Common),
    /// Retrain with fewer outfits per identity and evaluate the cc protocol; writes drop_clothes.csv
    AblateDropClothes(Common),
    /// Run the finite-difference gradient suite
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random points per layer
        #[arg(long)]
        points: Option<usize>,
    },
    /// Replay the command recorded in a manifest
    Rerun {
        manifest: PathBuf,
        /// Write outputs here instead of the recorded directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List every config key with its default
    Keys,
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("divnorm: error: {e}");
            e.exit_code() as i32
        }
    }
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_env();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("--set expects KEY=VALUE, found `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(common) => synth(resolve(&common)?),
        Command::Train { common, data } => {
            let mut cfg = resolve(&common)?;
            cfg.data = data.or(cfg.data);
            train(cfg)
        }
        Command::Eval { common, data, checkpoint, per_query } => {
            let mut cfg = resolve(&common)?;
            cfg.data = data.or(cfg.data);
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cfg.per_query |= per_query;
            eval(cfg)
        }
        Command::AblateQueryStrategy(common) => ablate_query_strategy(resolve(&common)?),
        Command::AblateDropClothes(common) => ablate_drop_clothes(resolve(&common)?),
        Command::Gradcheck { common, points } => {
            let mut cfg = resolve(&common)?;
            if let Some(p) = points {
                cfg.gradcheck_points = p;
            }
            run_gradcheck(&cfg)
        }
        Command::Rerun { manifest, out } => {
            let m = Manifest::load(&manifest)?;
            let mut cfg = m.config;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            match m.command.as_str() {
                "synth" => synth(cfg),
                "train" => train(cfg),
                "eval" => eval(cfg),
                "ablate-query-strategy" => ablate_query_strategy(cfg),
                "ablate-drop-clothes" => ablate_drop_clothes(cfg),
                other => Err(CliError::Validation(format!("{}: cannot rerun command `{other}`", manifest.display()))),
            }
        }
        Command::Keys => {
            let defaults = ExperimentConfig::default();
            for (key, doc) in KEYS {
                println!("{key} = {}  # {doc}", defaults.get(key).unwrap_or_default());
            }
            println!("# {OUT_ENV} sets the default out_dir");
            Ok(())
        }
    }
}

fn prepare_out_dir(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|source| CliError::Write { path: cfg.out_dir.clone(), source })
}

fn finish(command: &str, cfg: ExperimentConfig, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>) -> Result<()> {
    for p in &outputs {
        println!("wrote {}", p.display());
    }
    let path = Manifest { command: command.into(), config: cfg, inputs, outputs }.save()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn synth(cfg: ExperimentConfig) -> Result<()> {
    prepare_out_dir(&cfg)?;
    let ds = generate(&cfg.synth_config(cfg.seed))?;
    let path = cfg.out_dir.join("dataset.csv");
    save_dataset(&ds, &path)?;
    println!("{} samples, {} features", ds.len(), ds.dim());
    finish("synth", cfg, vec![], vec![path])
}

fn train_dataset(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<(Checkpoint, Vec<EpochLog>)> {
    let n_classes = ds.train_label_map().len();
    let net = cfg.network_config(ds.dim(), n_classes);
    Ok(train_run(ds, net, cfg.train_config(seed))?)
}

fn train(mut cfg: ExperimentConfig) -> Result<()> {
    let data = cfg.data_path();
    cfg.data = Some(data.clone());
    prepare_out_dir(&cfg)?;
    let ds = load_dataset(&data)?;
    let (ck, logs) = train_dataset(&cfg, &ds, cfg.seed)?;
    if let Some(last) = logs.last() {
        println!("epoch {}: loss {:.6}, mean w_c {:.4}", last.epoch, last.loss_total, last.mean_w_c);
    }
    let ck_path = cfg.out_dir.join("checkpoint.bin");
    let log_path = cfg.out_dir.join("train_log.csv");
    save_checkpoint(&ck, &ck_path)?;
    reports::write_train_log(&logs, &log_path)?;
    finish("train", cfg, vec![data], vec![ck_path, log_path])
}

fn evaluate_all(cfg: &ExperimentConfig, ck: &Checkpoint, ds: &Dataset, protocols: &[Protocol]) -> Result<Vec<EvalReport>> {
    let (q, g) = build_stores(&ck.network, ds)?;
    let mut out = Vec::new();
    for &protocol in protocols {
        for &strategy in &cfg.strategies {
            out.push(evaluate_stores(&q, &g, protocol, strategy)?);
        }
    }
    Ok(out)
}

fn print_report(prefix: &str, r: &EvalReport) {
    println!(
        "{prefix}{:<8} {:<9} mAP {:.4}  R1 {:.4}  R5 {:.4}  R10 {:.4}  queries {} (skipped {})",
        r.protocol.name(),
        r.strategy.name(),
        r.map,
        r.rank(1),
        r.rank(5),
        r.rank(10),
        r.n_queries,
        r.skipped
    );
}

fn eval(mut cfg: ExperimentConfig) -> Result<()> {
    let data = cfg.data_path();
    let ck_path = cfg.checkpoint_path();
    cfg.data = Some(data.clone());
    cfg.checkpoint = Some(ck_path.clone());
    cfg.validate()?;
    if !ck_path.is_file() {
        return Err(CliError::Validation(format!(
            "checkpoint {} does not exist; run `divnorm train` first or pass --checkpoint",
            ck_path.display()
        )));
    }
    prepare_out_dir(&cfg)?;
    let ds = load_dataset(&data)?;
    let ck = load_checkpoint(&ck_path)?;
    let results = evaluate_all(&cfg, &ck, &ds, &cfg.protocols)?;
    let report_path = cfg.out_dir.join("report.csv");
    reports::write_reports(&results, &report_path)?;
    let mut outputs = vec![report_path];
    for r in &results {
        print_report("", r);
        if cfg.per_query {
            let p = cfg.out_dir.join(format!("per_query_{}_{}.csv", r.protocol.name(), r.strategy.name()));
            reports::write_per_query(r, &p)?;
            outputs.push(p);
        }
    }
    finish("eval", cfg, vec![data, ck_path], outputs)
}

fn ablate_query_strategy(cfg: ExperimentConfig) -> Result<()> {
    prepare_out_dir(&cfg)?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let ds = generate(&cfg.synth_config(seed))?;
        let (ck, _) = train_dataset(&cfg, &ds, seed)?;
        for report in evaluate_all(&cfg, &ck, &ds, &cfg.protocols)? {
            print_report(&format!("seed {seed:<3} "), &report);
            rows.push(SeededReport { seed, report });
        }
    }
    let path = cfg.out_dir.join("query_strategy.csv");
    reports::write_query_strategy(&rows, &path)?;
    finish("ablate-query-strategy", cfg, vec![], vec![path])
}

fn drop_clothes_point(cfg: &ExperimentConfig, base: &Dataset, seed: u64, keep_fraction: f64) -> Result<DropClothesRow> {
    let ds = drop_outfits(base, keep_fraction, seed)?;
    let (ck, _) = train_dataset(cfg, &ds, seed)?;
    let report = evaluate_all(cfg, &ck, &ds, &[Protocol::ClothesChanging])?.swap_remove(0);
    Ok(DropClothesRow { seed, keep_fraction, report })
}

/// Sweep points run on their own threads; rows are collected in (seed, keep_fraction) order.
fn ablate_drop_clothes(mut cfg: ExperimentConfig) -> Result<()> {
    cfg.strategies.truncate(1);
    prepare_out_dir(&cfg)?;
    let bases = cfg.seeds.iter().map(|&s| generate(&cfg.synth_config(s))).collect::<Result<Vec<_>, _>>()?;
    let results: Vec<Result<DropClothesRow>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .zip(&bases)
            .flat_map(|(&seed, base)| cfg.keep_fractions.iter().map(move |&f| (seed, base, f)))
            .map(|(seed, base, f)| {
                let cfg = &cfg;
                scope.spawn(move || drop_clothes_point(cfg, base, seed, f))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Failed("a sweep worker panicked".into()))))
            .collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    for r in &rows {
        print_report(&format!("seed {:<3} keep {:<5} ", r.seed, r.keep_fraction), &r.report);
    }
    let path = cfg.out_dir.join("drop_clothes.csv");
    reports::write_drop_clothes(&rows, &path)?;
    finish("ablate-drop-clothes", cfg, vec![], vec![path])
}

fn run_gradcheck(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.gradcheck_points == 0 {
        return Err(CliError::Validation("gradcheck_points must be positive".into()));
    }
    let report = gradcheck::run_suite(cfg.seed, cfg.gradcheck_points)?;
    let mut out = std::io::stdout().lock();
    let mut line = |s: String| writeln!(out, "{s}").map_err(|e| CliError::Failed(e.to_string()));
    for l in &report.layers {
        line(format!("layer {:<24} points {:<4} max relative error {:.3e}", l.layer, l.points, l.max_relative_error))?;
    }
    line(format!(
        "end-to-end over {} seeds: max relative error {:.3e}",
        report.end_to_end.len(),
        report.max_end_to_end_error()
    ))?;
    line(format!(
        "max layer error {:.3e} (tolerance {LAYER_TOLERANCE:e}), max end-to-end error {:.3e} (tolerance {END_TO_END_TOLERANCE:e})",
        report.max_layer_error(),
        report.max_end_to_end_error()
    ))?;
    if report.passed() {
        line("gradcheck passed".into())
    } else {
        Err(CliError::Failed("gradcheck failed: an error exceeds its tolerance".into()))
    }
}

