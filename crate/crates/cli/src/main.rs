//! `prostate-seg`: ingest, split, train, evaluate, matrix, overlay and
//! synthetic-data generation over one run root.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prostate_seg::config::TrainConfig;
use prostate_seg::overlay::write_case_overlays;
use prostate_seg::preprocess::volume_to_samples;
use prostate_seg::protocol::evaluate::mean_dsc;
use prostate_seg::protocol::run::load_cases;
use prostate_seg::protocol::{self, build_matrix, evaluate_model, RunRoot, Source};
use prostate_seg::synthetic::{self, Family};
use prostate_seg::unet::{predict_mask, Checkpoint};
use prostate_seg::volume_io::{load_case, DatasetId, Layout, ManifestOptions};
use prostate_seg::Error;

const BUILTIN_CONFIGS: [(&str, &str); 2] = [
    ("default.cfg", include_str!("../../../configs/default.cfg")),
    ("synthetic.cfg", include_str!("../../../configs/synthetic.cfg")),
];

#[derive(Parser, Debug)]
#[command(name = "prostate-seg", version, about = "Prostate MR segmentation benchmark")]
struct Cli {
    /// Run root holding manifests, splits, runs and reports.
    #[arg(long, global = true, env = "PROSTATE_SEG_RUN_ROOT", default_value = "runs")]
    run_root: PathBuf,
    /// Do not read or write the preprocessed-sample cache.
    #[arg(long, global = true)]
    no_cache: bool,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic four-family benchmark.
    Synth(SynthArgs),
    /// Scan a dataset root and write its manifest.
    Ingest(IngestArgs),
    /// Write seeded train/val/test splits.
    Split(SplitArgs),
    /// Train one source's model.
    Train(TrainArgs),
    /// Score one model on one dataset's test split.
    Evaluate(EvaluateArgs),
    /// Evaluate all models on all test splits and write the matrix report.
    Matrix(MatrixArgs),
    /// Render contour overlays for one case.
    Overlay(OverlayArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    cases: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Only this family (written directly under --out).
    #[arg(long)]
    family: Option<Family>,
    #[arg(long, default_value_t = synthetic::DEFAULT_DIMS.0)]
    depth: usize,
    #[arg(long, default_value_t = synthetic::DEFAULT_DIMS.1)]
    size: usize,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    dataset: DatasetId,
    #[arg(long)]
    root: PathBuf,
    /// Directory layout; defaults to the dataset's native layout.
    #[arg(long)]
    layout: Option<Layout>,
    /// Separate directory holding the masks.
    #[arg(long)]
    mask_root: Option<PathBuf>,
    /// Channel of 4D NIfTI images.
    #[arg(long, default_value_t = 0)]
    channel: usize,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// A dataset or `all`.
    #[arg(long, default_value = "all")]
    dataset: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Config file; `default.cfg` and `synthetic.cfg` are built in.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; also creates missing splits.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs1: Option<usize>,
    #[arg(long)]
    epochs2: Option<usize>,
    /// Override any config key, e.g. `--set batch_size=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    source: Source,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    source: Source,
    #[arg(long)]
    dataset: DatasetId,
}

#[derive(Args, Debug)]
struct MatrixArgs {
    /// Fail when any cell is missing.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct OverlayArgs {
    #[arg(long)]
    source: Source,
    #[arg(long)]
    dataset: DatasetId,
    #[arg(long)]
    case: String,
    #[arg(long)]
    out: PathBuf,
}

/// Errors carry the exit code they map to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let mut root = RunRoot::new(&cli.run_root);
    root.use_cache = !cli.no_cache;
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Ingest(a) => cmd_ingest(&root, a),
        Command::Split(a) => cmd_split(&root, a),
        Command::Train(a) => cmd_train(&root, a),
        Command::Evaluate(a) => cmd_evaluate(&root, a),
        Command::Matrix(a) => cmd_matrix(&root, a),
        Command::Overlay(a) => cmd_overlay(&root, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let dims = (a.depth, a.size, a.size);
    match a.family {
        Some(f) => {
            synthetic::generate_dataset_with_dims(f, a.cases, a.seed, &a.out, dims)?;
            println!("{f}: {} cases in {}", a.cases, a.out.display());
        }
        None => {
            for (d, dir) in synthetic::generate_benchmark(&a.out, a.cases, a.seed, dims)? {
                println!(
                    "{}: {} cases in {} (ingest with --dataset {d} --layout promise12)",
                    Family::for_dataset(d),
                    a.cases,
                    dir.display()
                );
            }
        }
    }
    Ok(())
}

fn cmd_ingest(root: &RunRoot, a: IngestArgs) -> CmdResult {
    let opts = ManifestOptions {
        layout: a.layout,
        mask_root: a.mask_root,
        channel: a.channel,
    };
    let m = protocol::ingest(root, a.dataset, &a.root, &opts)?;
    println!(
        "{}: {} cases found, {} excluded -> {}",
        a.dataset,
        m.cases.len(),
        m.excluded.len(),
        root.manifest_path(a.dataset).display()
    );
    for ex in &m.excluded {
        println!("  excluded {}: {}", ex.case_id, ex.reason);
    }
    Ok(())
}

fn parse_datasets(s: &str) -> Result<Vec<DatasetId>, Failure> {
    if s.eq_ignore_ascii_case("all") {
        Ok(DatasetId::TABLE_ORDER.to_vec())
    } else {
        Ok(vec![s.parse()?])
    }
}

fn cmd_split(root: &RunRoot, a: SplitArgs) -> CmdResult {
    let all = a.dataset.eq_ignore_ascii_case("all");
    for d in parse_datasets(&a.dataset)? {
        if all && !root.manifest_path(d).is_file() {
            continue;
        }
        let s = protocol::split(root, d, a.seed)?;
        println!(
            "{d}: {} train, {} val, {} test (seed {})",
            s.train_cases.len(),
            s.val_cases.len(),
            s.test_cases.len(),
            s.seed
        );
    }
    Ok(())
}

fn read_config(path: &Path) -> Result<TrainConfig, Failure> {
    if path.is_file() {
        return Ok(TrainConfig::load(path)?);
    }
    let builtin = path
        .to_str()
        .and_then(|name| BUILTIN_CONFIGS.iter().find(|(n, _)| *n == name));
    match builtin {
        Some((_, text)) => Ok(TrainConfig::parse(text)?),
        None => Err(Failure {
            code: 2,
            message: format!("config file {} not found", path.display()),
        }),
    }
}

/// File, then flags; validated before any work starts.
fn resolve_config(a: &ConfigArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs1 {
        cfg.epochs_stage1 = e;
    }
    if let Some(e) = a.epochs2 {
        cfg.epochs_stage2 = e;
    }
    let mut problems = Vec::new();
    for o in &a.overrides {
        match o.split_once('=') {
            Some((k, v)) => {
                if let Err(e) = cfg.set(k, v) {
                    problems.push(e.to_string());
                }
            }
            None => problems.push(format!("--set {o}: expected KEY=VALUE")),
        }
    }
    if let Err(e) = cfg.validate() {
        problems.push(e.to_string());
    }
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Failure {
            code: 2,
            message: problems.join("\n"),
        })
    }
}

fn cmd_train(root: &RunRoot, a: TrainArgs) -> CmdResult {
    let cfg = resolve_config(&a.cfg)?;
    let needed: Vec<DatasetId> = match a.source {
        Source::Dataset(d) => vec![d],
        Source::Combined => DatasetId::TABLE_ORDER
            .into_iter()
            .filter(|d| root.manifest_path(*d).is_file())
            .collect(),
    };
    if let Some(seed) = a.cfg.seed {
        for d in needed {
            if !root.split_path(d).is_file() {
                let s = protocol::split(root, d, seed)?;
                eprintln!("created split for {d} (seed {seed}): {} train cases", s.train_cases.len());
            }
        }
    }
    let source = a.source;
    let outcome = protocol::train_source(root, source, &cfg, &mut |row| {
        eprintln!(
            "{source} stage {} epoch {:>3}: loss {:.4} (dice {:.4} focal {:.4} ce {:.4}) lr {:.2e} val dsc {}",
            row.stage,
            row.epoch,
            row.loss,
            row.dice,
            row.focal,
            row.ce,
            row.lr,
            row.val_dsc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "NA".into())
        );
    })?;
    println!("run directory: {}", root.run_dir(source).display());
    match outcome.best_val_dsc {
        Some(v) => println!("best val DSC: {v:.4} (epoch {})", outcome.checkpoint.epoch),
        None => println!("best val DSC: NA (no validation cases; epoch {})", outcome.checkpoint.epoch),
    }
    Ok(())
}

/// Checkpoint and resolved config of a trained source.
fn load_run(root: &RunRoot, source: Source) -> Result<(Checkpoint, TrainConfig), Failure> {
    let ckpt = root.checkpoint_path(source);
    if !ckpt.is_file() {
        return Err(Error::Missing(format!("checkpoint for {source} ({}); run `train` first", ckpt.display())).into());
    }
    Ok((Checkpoint::load(&ckpt)?, TrainConfig::load(&root.config_path(source))?))
}

fn cmd_evaluate(root: &RunRoot, a: EvaluateArgs) -> CmdResult {
    let (ckpt, cfg) = load_run(root, a.source)?;
    let manifest = root.load_manifest(a.dataset)?;
    let split = root.load_split(a.dataset)?;
    let mut params = cfg.preprocess;
    params.skip_empty_slices = false;
    let cases = load_cases(&manifest, &split.test_cases, &params, root.cache().as_ref())?;
    let scores = evaluate_model(&ckpt.model()?, &cases, cfg.dsc_mode, cfg.eval_batch_size)?;
    println!("case_id,dsc");
    for s in &scores {
        println!("{},{:.6}", s.case_id, s.dsc);
    }
    println!("mean,{:.6}", mean_dsc(&scores));
    Ok(())
}

fn cmd_matrix(root: &RunRoot, a: MatrixArgs) -> CmdResult {
    let m = build_matrix(root)?;
    m.write(root)?;
    print!("{}", m.to_text());
    let holes = m.holes();
    if !holes.is_empty() {
        let msg = format!("{} matrix cell(s) missing", holes.len());
        if a.strict {
            return Err(Failure { code: 1, message: msg });
        }
        eprintln!("warning: {msg}");
    }
    Ok(())
}

fn cmd_overlay(root: &RunRoot, a: OverlayArgs) -> CmdResult {
    let (ckpt, cfg) = load_run(root, a.source)?;
    let manifest = root.load_manifest(a.dataset)?;
    let entry = manifest
        .case(&a.case)
        .ok_or_else(|| Error::Missing(format!("unknown case {} in {}", a.case, a.dataset)))?;
    let (vol, mask) = load_case(entry, a.dataset)?;
    let mut params = cfg.preprocess;
    params.skip_empty_slices = false;
    let samples = volume_to_samples(&vol, &mask, &params)?;
    let pred = predict_mask(&ckpt.model()?, &samples, mask.spacing, cfg.eval_batch_size)?;
    let files = write_case_overlays(&a.out, &vol, &pred, &mask)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}
