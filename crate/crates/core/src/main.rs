use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sedlab::audiofeat::NormStats;
use sedlab::harness::{
    evaluate, fit_norm, grid_cells, load_split, norm_path, parse_results_csv, report_markdown, results_csv, run_grid,
    seconds_to_label_frames, train_executor, train_run, write_atomic, DataCache, ExperimentConfig, GridKind,
    GridOptions, ResultRow,
};
use sedlab::nn::Checkpoint;
use sedlab::scenegen::{generate_dataset, DatasetConfig, FormatKind, Split};
use sedlab::{Error, Result};

#[derive(Parser)]
#[command(name = "sedlab", version, about = "Multichannel sound event detection experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a dataset (FOA and MIC renderings plus labels).
    Gen(GenArgs),
    /// Fit per-bin normalization statistics on the training split.
    FitNorm(FitNormArgs),
    /// Train one configuration and evaluate its best checkpoint.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on a split.
    Eval(EvalArgs),
    /// Run an experiment grid.
    Grid(GridArgs),
    /// Render a results CSV as a Markdown table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Generator settings as key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Scene length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FitNormArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// foa, mic or both.
    #[arg(long, default_value = "both")]
    format: String,
}

/// Experiment settings: defaults, then `--config`, then named flags, then
/// `--set` pairs.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    format: Option<String>,
    /// mono or all.
    #[arg(long)]
    channels: Option<String>,
    /// none, or e.g. MU+CO+FS+CS.
    #[arg(long)]
    augment: Option<String>,
    /// bce, dice or bce_dice.
    #[arg(long)]
    loss: Option<String>,
    /// scratch or mono_pretrained.
    #[arg(long)]
    transfer: Option<String>,
    #[arg(long)]
    chunk_s: Option<String>,
    #[arg(long)]
    chunk_hop_s: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// e.g. 16:2x2,32:2x2,64:1x2 (channels:pool_t x pool_f).
    #[arg(long)]
    conv_blocks: Option<String>,
    #[arg(long)]
    gru_units: Option<String>,
    #[arg(long)]
    pretrain_dataset: Option<String>,
    #[arg(long)]
    pretrain_epochs: Option<String>,
    /// Any config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let named = [
            ("dataset", &self.dataset),
            ("format", &self.format),
            ("channels", &self.channels),
            ("augment", &self.augment),
            ("loss", &self.loss),
            ("transfer", &self.transfer),
            ("chunk_s", &self.chunk_s),
            ("chunk_hop_s", &self.chunk_hop_s),
            ("epochs", &self.epochs),
            ("batch", &self.batch),
            ("seed", &self.seed),
            ("conv_blocks", &self.conv_blocks),
            ("gru_units", &self.gru_units),
            ("pretrain_dataset", &self.pretrain_dataset),
            ("pretrain_epochs", &self.pretrain_epochs),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Run directory for config.lock, best.ckpt, record.txt, results.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the config.lock next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct GridArgs {
    /// single, augmentation, loss-transfer, chunk or channels.
    #[arg(long)]
    kind: String,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated seeds; defaults to the configured seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Reuse finished cells from a previous run in the same directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this many newly executed cells.
    #[arg(long)]
    max_cells: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    results: PathBuf,
    /// Write report.md and results.csv here instead of printing.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn gen(a: &GenArgs) -> Result<()> {
    let mut c = match &a.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?.parse()?,
        None => DatasetConfig::default(),
    };
    if let Some(v) = a.n_train {
        c.n_train = v;
    }
    if let Some(v) = a.n_val {
        c.n_val = v;
    }
    if let Some(v) = a.n_test {
        c.n_test = v;
    }
    if let Some(v) = a.duration {
        c.scene_duration_s = v;
    }
    if let Some(v) = a.seed {
        c.master_seed = v;
    }
    let entries = generate_dataset(&c, &a.out)?;
    println!("wrote {} scenes to {}", entries.len(), a.out.display());
    Ok(())
}

fn fit_norm_cmd(a: &FitNormArgs) -> Result<()> {
    let formats = match a.format.as_str() {
        "both" => vec![FormatKind::Foa, FormatKind::Mic],
        f => vec![f.parse()?],
    };
    for f in formats {
        let stats: NormStats = fit_norm(&load_split(&a.dataset, f, Split::Train)?)?;
        let p = norm_path(&a.dataset, f);
        stats.save(&p)?;
        println!("{f}: {}x{} statistics -> {}", stats.channels, stats.bins, p.display());
    }
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let out = train_run(&cfg, &DataCache::default(), Some(&a.out))?;
    let r = &out.record;
    println!("config {}  best epoch {}  ({:.1} s)", r.config_hash, r.best_epoch, r.wall_time_s);
    println!("{}", r.test);
    print!("{}", results_csv(&[ResultRow::new(&cfg, &r.test)]));
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let cfg_path = match &a.config {
        Some(p) => p.clone(),
        None => a
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("config.lock"),
    };
    let cfg = ExperimentConfig::load(&cfg_path)?;
    let mut ck = Checkpoint::load(&a.checkpoint)?;
    if ck.config_hash != cfg.hash_u64() {
        return Err(Error::Config(format!(
            "checkpoint was trained with config {:016x}, {} is {}",
            ck.config_hash,
            cfg_path.display(),
            cfg.hash_hex()
        )));
    }
    let split: Split = a.split.parse()?;
    let data = DataCache::default().get(&cfg.dataset, cfg.format, cfg.channels == sedlab::harness::Channels::Mono)?;
    let m = evaluate(&mut ck.model, data.split(split), seconds_to_label_frames(cfg.chunk_s)?, cfg.threshold)?;
    println!("{split} split, threshold {}", cfg.threshold);
    println!("{m}");
    Ok(())
}

fn grid_cmd(a: &GridArgs) -> Result<()> {
    let kind: GridKind = a.kind.parse()?;
    let base = a.cfg.resolve()?;
    let cells = grid_cells(kind, &base, &a.seeds);
    let cache = DataCache::default();
    let opts = GridOptions {
        workers: a.workers,
        resume: a.resume,
        max_cells: a.max_cells,
    };
    let o = run_grid(&cells, &a.out, &opts, train_executor(&cache))?;
    if !o.rows.is_empty() {
        write_atomic(&a.out.join("report.md"), report_markdown(&o.rows)?.as_bytes())?;
    }
    println!(
        "{} grid: {} finished, {} failed, {} pending -> {}",
        kind,
        o.rows.len(),
        o.failures.len(),
        o.pending,
        a.out.join("results.csv").display()
    );
    for (h, m) in &o.failures {
        eprintln!("cell {h} failed: {m}");
    }
    Ok(())
}

fn report_cmd(a: &ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.results).map_err(|e| Error::io(&a.results, e))?;
    let rows = parse_results_csv(&text)?;
    let md = report_markdown(&rows)?;
    match &a.out {
        Some(dir) => {
            write_atomic(&dir.join("report.md"), md.as_bytes())?;
            write_atomic(&dir.join("results.csv"), results_csv(&rows).as_bytes())?;
        }
        None => print!("{md}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let r = match &cli.cmd {
        Cmd::Gen(a) => gen(a),
        Cmd::FitNorm(a) => fit_norm_cmd(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::Grid(a) => grid_cmd(a),
        Cmd::Report(a) => report_cmd(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
