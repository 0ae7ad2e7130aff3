//! `bofnet` command-line harness: single runs, grid sweeps and codebook
//! reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bofnet::bof::{CodebookInit, Distance};
use bofnet::decorrelation::Similarity;
use bofnet::experiment::{
    self, load_source, resolve_data_dir, DatasetName, Method, RunConfig, RunRecord, SweepSpec, DATA_DIR_ENV,
};
use bofnet::model::Pooling;
use bofnet::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bofnet", version, about = "Train and compare BoF, GMP and GAP pooling CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its run record.
    Run(RunArgs),
    /// Run a grid of methods, filter counts, codebook sizes, betas and seeds.
    Sweep(SweepArgs),
    /// Codebook diagnostics for run records (files or directories).
    Report(ReportArgs),
    /// Print the resolved run config as JSON without training.
    Config(RunArgs),
}

/// Settings shared by `run` and `sweep`.
#[derive(Args)]
struct CommonArgs {
    /// Start from a named preset (desk-mnist, desk-fashion-mnist, desk-cifar10).
    #[arg(long)]
    preset: Option<String>,
    /// Start from a JSON run config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse::<DatasetName>)]
    dataset: Option<DatasetName>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Cap on training samples (taken before the validation split).
    #[arg(long)]
    train_subset: Option<usize>,
    #[arg(long)]
    test_subset: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Seed for subsets and the validation split.
    #[arg(long)]
    data_seed: Option<u64>,
    /// pearson or cosine.
    #[arg(long, value_parser = parse_similarity)]
    similarity: Option<Similarity>,
    /// euclidean or squared-euclidean.
    #[arg(long, value_parser = parse_distance)]
    distance: Option<Distance>,
    /// sample or gaussian.
    #[arg(long, value_parser = parse_init)]
    codebook_init: Option<CodebookInit>,
    /// Pad-crop-flip augmentation (cifar10 only).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    augment: Option<bool>,
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_parser = parse::<Pooling>)]
    pooling: Option<Pooling>,
    #[arg(long)]
    filters: Option<usize>,
    #[arg(long)]
    codebook_size: Option<usize>,
    /// Decorrelation weight; omit to train without the penalty.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated: gmp, gap, bof, bof-decorrelated.
    #[arg(long, value_delimiter = ',', value_parser = parse::<Method>)]
    methods: Vec<Method>,
    #[arg(long, value_delimiter = ',')]
    filters: Vec<usize>,
    /// Defaults to the dataset's grid.
    #[arg(long, value_delimiter = ',')]
    codebook_size: Vec<usize>,
    /// Defaults to 0.1,0.01,0.001,0.0001.
    #[arg(long, value_delimiter = ',')]
    beta: Vec<f64>,
    /// Defaults to 0..5 (mnist, fashion-mnist) or 0..3 (cifar10).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Parallel worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Run record files, or directories searched for `runs/*.json`.
    #[arg(required = true)]
    records: Vec<PathBuf>,
    /// Emit JSON instead of text.
    #[arg(long)]
    json: bool,
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_similarity(s: &str) -> std::result::Result<Similarity, String> {
    match s {
        "pearson" => Ok(Similarity::Pearson),
        "cosine" => Ok(Similarity::Cosine),
        _ => Err(format!("unknown similarity {s:?} (pearson, cosine)")),
    }
}

fn parse_distance(s: &str) -> std::result::Result<Distance, String> {
    match s {
        "euclidean" => Ok(Distance::Euclidean),
        "squared-euclidean" => Ok(Distance::SquaredEuclidean),
        _ => Err(format!("unknown distance {s:?} (euclidean, squared-euclidean)")),
    }
}

fn parse_init(s: &str) -> std::result::Result<CodebookInit, String> {
    match s {
        "sample" => Ok(CodebookInit::Sample),
        "gaussian" => Ok(CodebookInit::Gaussian),
        _ => Err(format!("unknown codebook init {s:?} (sample, gaussian)")),
    }
}

impl CommonArgs {
    /// Preset, config file or dataset defaults, then flag overrides.
    fn base(&self, pooling: Option<Pooling>) -> Result<RunConfig> {
        let mut c = if let Some(p) = &self.preset {
            RunConfig::preset(p)?
        } else if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            RunConfig::from_json(&text)?
        } else {
            let dataset = self.dataset.unwrap_or(DatasetName::Mnist);
            let pooling = pooling.unwrap_or(Pooling::Bof);
            let k = (pooling == Pooling::Bof).then_some(32);
            RunConfig::new(dataset, pooling, 64, k)
        };
        if let Some(d) = self.dataset {
            if d != c.dataset {
                c.dataset = d;
                c.lr = d.default_lr();
                c.augment = d == DatasetName::Cifar10;
            }
        }
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = self.$field { c.$field = v; })* };
        }
        set!(epochs, lr, batch_size, val_fraction, data_seed, similarity, distance, codebook_init, augment);
        if self.train_subset.is_some() {
            c.train_subset = self.train_subset;
        }
        if self.test_subset.is_some() {
            c.test_subset = self.test_subset;
        }
        Ok(c)
    }

    fn data_dir(&self) -> PathBuf {
        resolve_data_dir(self.data_dir.as_deref())
    }
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = self.common.base(self.pooling)?;
        if let Some(p) = self.pooling {
            c.pooling = p;
            if p != Pooling::Bof && self.codebook_size.is_none() {
                c.codebook_size = None;
                c.beta = None;
            }
        }
        if let Some(f) = self.filters {
            c.filters = f;
        }
        if self.codebook_size.is_some() {
            c.codebook_size = self.codebook_size;
        }
        if self.beta.is_some() {
            c.beta = self.beta;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(args: &RunArgs) -> Result<()> {
    let config = args.config()?;
    let source = load_source(config.dataset, &args.common.data_dir())?;
    let out = &args.common.out_dir;
    let record = experiment::run(&config, &source, Some(out))?;
    println!(
        "{}  epoch {} kept  val {:.2}%  test {:.2}%  {:.1}s",
        config.label(),
        record.selected_epoch,
        record.val_error,
        record.test_error,
        record.wall_clock_secs
    );
    println!("record: {}", experiment::record_path(out, &config).display());
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let base = args.common.base(None)?;
    let mut spec = SweepSpec::new(base);
    if !args.methods.is_empty() {
        spec.methods = args.methods.clone();
    }
    if !args.filters.is_empty() {
        spec.filters = args.filters.clone();
    }
    if !args.codebook_size.is_empty() {
        spec.codebook_sizes = args.codebook_size.clone();
    }
    if !args.beta.is_empty() {
        spec.betas = args.beta.clone();
    }
    if !args.seeds.is_empty() {
        spec.seeds = args.seeds.clone();
    }
    spec.jobs = args.jobs;
    spec.validate()?;
    let source = load_source(spec.base.dataset, &args.common.data_dir())?;
    std::fs::create_dir_all(&args.common.out_dir).map_err(|e| Error::Io {
        path: args.common.out_dir.clone(),
        source: e,
    })?;
    let outcome = experiment::sweep(&spec, &source, Some(&args.common.out_dir))?;
    print!("{}", experiment::summary_csv(&outcome.summary));
    if !outcome.failures.is_empty() {
        eprintln!("{} run(s) failed:", outcome.failures.len());
        for f in &outcome.failures {
            eprintln!("  {} [{}]: {}", f.config.label(), f.category, f.message);
        }
    }
    Ok(())
}

fn collect_records(paths: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let dir = if p.join("runs").is_dir() { p.join("runs") } else { p.clone() };
            let entries = std::fs::read_dir(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    files.iter().map(|f| RunRecord::read(Path::new(f))).collect()
}

fn report(args: &ReportArgs) -> Result<()> {
    let records = collect_records(&args.records)?;
    let reports = experiment::report(&records)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
    } else {
        for r in &reports {
            print!("{}", r.to_text());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => 3,
        "data" => 4,
        "io" => 5,
        "numeric" => 6,
        "serde" => 7,
        _ => 10,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
        Command::Config(a) => a.config().map(|c| println!("{}", c.to_json())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
