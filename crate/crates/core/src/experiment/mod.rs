//! Run configuration, dataset plumbing and single training runs.
//!
//! A [`RunRecord`] holds everything needed to repeat a run: the full config,
//! data file checksums, the code version, and per-epoch metrics to compare
//! against.

mod report;
mod sweep;

pub use report::{report, CodebookReport};
pub use sweep::{summarize, summary_csv, sweep, CellSummary, Method, SelectedRun, SweepFailure, SweepOutcome, SweepSpec};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bof::{CodebookInit, CodebookSnapshot, Distance};
use crate::data::{self, Dataset, FileChecksum, SplitSpec};
use crate::decorrelation::{RegularizerConfig, Similarity, BETA_GRID, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::model::{build_model, Architecture, ModelSpec, Pooling};
use crate::optim::AdamConfig;
use crate::train::{self, EpochMetrics, TrainConfig};

/// Environment variable consulted when no data directory is given.
pub const DATA_DIR_ENV: &str = "BOFNET_DATA_DIR";

pub const CODE_VERSION: &str = match option_env!("BOFNET_GIT_REV") {
    Some(rev) => rev,
    None => concat!("bofnet-", env!("CARGO_PKG_VERSION")),
};

const NORMALIZATION: &str = "pixel / 255, no standardization";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl DatasetName {
    pub fn architecture(self) -> Architecture {
        match self {
            DatasetName::Mnist | DatasetName::FashionMnist => Architecture::Mnist,
            DatasetName::Cifar10 => Architecture::Cifar,
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            DatasetName::Cifar10 => 1e-4,
            _ => 1e-3,
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            DatasetName::Cifar10 => 200,
            _ => 50,
        }
    }

    pub fn default_seed_count(self) -> usize {
        match self {
            DatasetName::Cifar10 => 3,
            _ => 5,
        }
    }

    /// Codebook sizes searched in grid mode.
    pub fn codebook_grid(self) -> &'static [usize] {
        match self {
            DatasetName::Cifar10 => &[32, 64, 128, 256],
            _ => &[8, 16, 32, 64, 128],
        }
    }

    /// Subdirectory of the data directory holding this dataset's files.
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion-mnist",
            DatasetName::Cifar10 => "cifar10",
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for DatasetName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetName::Mnist),
            "fashion-mnist" | "fashionmnist" | "fashion_mnist" => Ok(DatasetName::FashionMnist),
            "cifar10" | "cifar-10" => Ok(DatasetName::Cifar10),
            _ => Err(Error::config(format!("unknown dataset {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetName,
    pub pooling: Pooling,
    /// Filters in the last conv layer.
    pub filters: usize,
    pub codebook_size: Option<usize>,
    /// Decorrelation weight; `None` disables the regularizer entirely.
    pub beta: Option<f64>,
    #[serde(default)]
    pub similarity: Similarity,
    #[serde(default)]
    pub distance: Distance,
    #[serde(default)]
    pub codebook_init: CodebookInit,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Seed of the train subset, test subset and validation split. Kept apart
    /// from `seed` so that multi-seed runs share their data.
    #[serde(default)]
    pub data_seed: u64,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub val_fraction: f64,
    /// Pad-crop-flip augmentation; defaults to on for CIFAR-10.
    pub augment: bool,
}

impl RunConfig {
    /// Full-length defaults for `dataset`.
    pub fn new(dataset: DatasetName, pooling: Pooling, filters: usize, codebook_size: Option<usize>) -> Self {
        RunConfig {
            dataset,
            pooling,
            filters,
            codebook_size,
            beta: None,
            similarity: Similarity::Pearson,
            distance: Distance::Euclidean,
            codebook_init: CodebookInit::default(),
            epochs: dataset.default_epochs(),
            lr: dataset.default_lr(),
            batch_size: 128,
            seed: 0,
            data_seed: 0,
            train_subset: None,
            test_subset: None,
            val_fraction: 0.2,
            augment: dataset == DatasetName::Cifar10,
        }
    }

    pub const PRESETS: [&'static str; 3] = ["desk-mnist", "desk-fashion-mnist", "desk-cifar10"];

    /// Small configurations that train in minutes on one CPU core.
    pub fn preset(name: &str) -> Result<Self> {
        let (dataset, filters, k, train, test) = match name {
            "desk-mnist" => (DatasetName::Mnist, 16, 16, 10_000, 10_000),
            "desk-fashion-mnist" => (DatasetName::FashionMnist, 16, 16, 10_000, 10_000),
            "desk-cifar10" => (DatasetName::Cifar10, 32, 32, 10_000, 2_000),
            _ => {
                return Err(Error::config(format!(
                    "unknown preset {name:?} (expected one of {})",
                    Self::PRESETS.join(", ")
                )))
            }
        };
        let mut c = RunConfig::new(dataset, Pooling::Bof, filters, Some(k));
        c.epochs = 5;
        c.train_subset = Some(train);
        c.test_subset = Some(test);
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if matches!(self.train_subset, Some(0)) || matches!(self.test_subset, Some(0)) {
            return Err(Error::config("subset sizes must be >= 1"));
        }
        if self.beta.is_some() && self.pooling != Pooling::Bof {
            return Err(Error::config(format!("beta applies to bof pooling only, not {}", self.pooling)));
        }
        if let Some(r) = self.regularizer() {
            r.validate()?;
        }
        if self.augment && self.dataset != DatasetName::Cifar10 {
            return Err(Error::config("augmentation is defined for cifar10 only"));
        }
        self.model_spec().validate()
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::new(self.dataset.architecture(), self.filters, self.pooling, self.codebook_size);
        spec.distance = self.distance;
        spec.codebook_init = self.codebook_init;
        spec
    }

    pub fn regularizer(&self) -> Option<RegularizerConfig> {
        self.beta.map(|beta| RegularizerConfig {
            beta,
            epsilon: DEFAULT_EPSILON,
            similarity: self.similarity,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig::with_lr(self.lr),
            regularizer: self.regularizer(),
            augment: self.augment,
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Stable identifier of this config: the first 16 hex digits of the
    /// SHA-256 of its compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// Short human-readable label, e.g. `mnist/bof/C16/K16/b0.01/s0`.
    pub fn label(&self) -> String {
        let mut s = format!("{}/{}/C{}", self.dataset, self.pooling, self.filters);
        if self.pooling == Pooling::Bof {
            if let Some(k) = self.codebook_size {
                s += &format!("/K{k}");
            }
            if let Some(b) = self.beta {
                s += &format!("/b{b}");
            }
        }
        s + &format!("/s{}", self.seed)
    }

    /// Whether `beta` and `codebook_size` lie on the standard search grids.
    pub fn check_grid(&self) -> Result<()> {
        if let Some(k) = self.codebook_size.filter(|_| self.pooling == Pooling::Bof) {
            if !self.dataset.codebook_grid().contains(&k) {
                return Err(Error::config(format!(
                    "codebook size {k} is not in the {} grid {:?}",
                    self.dataset,
                    self.dataset.codebook_grid()
                )));
            }
        }
        if let Some(b) = self.beta {
            if !BETA_GRID.contains(&b) {
                return Err(Error::config(format!("beta {b} is not in the grid {BETA_GRID:?}")));
            }
        }
        Ok(())
    }
}

/// Explicit directory, else `$BOFNET_DATA_DIR`, else `./data`.
pub fn resolve_data_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Train and test sets as shipped, before subsetting and splitting.
#[derive(Debug, Clone)]
pub struct DataSource {
    pub name: DatasetName,
    pub train: Dataset,
    pub test: Dataset,
}

impl DataSource {
    pub fn checksums(&self) -> Vec<FileChecksum> {
        let mut v = self.train.provenance.files.clone();
        v.extend(self.test.provenance.files.iter().cloned());
        v
    }
}

/// Loads `<data_dir>/<dataset>/`: IDX files (optionally gzipped) for MNIST
/// and Fashion-MNIST, binary batches for CIFAR-10.
pub fn load_source(name: DatasetName, data_dir: &Path) -> Result<DataSource> {
    let dir = data_dir.join(name.dir_name());
    let need = |names: &[&str]| {
        data::find_file(&dir, names).ok_or_else(|| Error::Io {
            path: dir.join(names[0]),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "dataset file missing (see scripts/fetch_data.py)",
            ),
        })
    };
    let (train, test) = match name {
        DatasetName::Mnist | DatasetName::FashionMnist => {
            let train = data::load_idx(
                need(&["train-images-idx3-ubyte", "train-images.idx3-ubyte"])?,
                need(&["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"])?,
            )?;
            let test = data::load_idx(
                need(&["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"])?,
                need(&["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"])?,
            )?;
            (train, test)
        }
        DatasetName::Cifar10 => {
            let dir = if dir.join("cifar-10-batches-bin").is_dir() {
                dir.join("cifar-10-batches-bin")
            } else {
                dir.clone()
            };
            let need = |n: &str| {
                data::find_file(&dir, &[n]).ok_or_else(|| Error::Io {
                    path: dir.join(n),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file missing"),
                })
            };
            let train_files = (1..=5)
                .map(|i| need(&format!("data_batch_{i}.bin")))
                .collect::<Result<Vec<_>>>()?;
            (data::load_cifar10(&train_files)?, data::load_cifar10(&[need("test_batch.bin")?])?)
        }
    };
    log::info!("loaded {name}: {} train, {} test from {}", train.len(), test.len(), dir.display());
    Ok(DataSource { name, train, test })
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Applies the config's subsets and validation split to `source`.
pub fn make_splits(config: &RunConfig, source: &DataSource) -> Result<Splits> {
    if source.name != config.dataset {
        return Err(Error::config(format!(
            "config wants {} but the data source is {}",
            config.dataset, source.name
        )));
    }
    let train_all = match config.train_subset {
        Some(n) => source.train.subsample(n, config.data_seed)?,
        None => source.train.clone(),
    };
    if let Some(n) = config.train_subset.filter(|&n| n > source.train.len()) {
        log::warn!("train subset {n} exceeds the {} available samples", source.train.len());
    }
    let test = match config.test_subset {
        Some(n) => source.test.subsample(n, config.data_seed)?,
        None => source.test.clone(),
    };
    let (train, val) = data::split(&train_all, &SplitSpec::new(config.val_fraction, config.data_seed))?;
    Ok(Splits { train, val, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub config_hash: String,
    pub epochs: Vec<EpochMetrics>,
    /// 1-based epoch whose parameters were kept (lowest validation error).
    pub selected_epoch: usize,
    pub val_error: f64,
    pub test_error: f64,
    pub sizes: SplitSizes,
    pub normalization: String,
    pub data_files: Vec<FileChecksum>,
    pub code_version: String,
    /// SHA-256 over the little-endian bytes of every kept parameter.
    pub params_sha256: String,
    pub codebook: Option<CodebookSnapshot>,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Final-codebook mean off-diagonal squared correlation, for bof runs.
    pub fn mean_sq_corr(&self) -> Option<f64> {
        self.epochs[self.selected_epoch - 1].mean_sq_corr
    }

    /// Equality on everything except timestamps.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        self.epochs == other.epochs
            && self.selected_epoch == other.selected_epoch
            && self.test_error.to_bits() == other.test_error.to_bits()
            && self.params_sha256 == other.params_sha256
            && self.codebook == other.codebook
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<RunRecord> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Path of a run's record under an output directory.
pub fn record_path(out_dir: &Path, config: &RunConfig) -> PathBuf {
    out_dir.join("runs").join(format!("{}.json", config.hash()))
}

/// Trains one model and returns its record. With `out_dir`, the record is
/// also written to `<out_dir>/runs/<config hash>.json`.
pub fn run(config: &RunConfig, source: &DataSource, out_dir: Option<&Path>) -> Result<RunRecord> {
    config.validate()?;
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let splits = make_splits(config, source)?;
    let seed_batch = splits.train.images.slice_outer(0, config.batch_size.min(splits.train.len()))?;
    let mut model = build_model(&config.model_spec(), config.seed, Some(&seed_batch))?;
    log::info!("run {} ({}): {} params", config.label(), config.hash(), model.param_count());
    let outcome = train::train(&mut model, &splits.train, &splits.val, Some(&splits.test), &config.train_config())?;
    let best = outcome.best_metrics().clone();
    let mut digest = Sha256::new();
    for p in model.params() {
        for v in p.value.data() {
            digest.update(v.to_le_bytes());
        }
    }
    let record = RunRecord {
        config: config.clone(),
        config_hash: config.hash(),
        selected_epoch: best.epoch,
        val_error: best.val_error,
        test_error: best.test_error.expect("test split evaluated every epoch"),
        epochs: outcome.epochs,
        sizes: SplitSizes {
            train: splits.train.len(),
            val: splits.val.len(),
            test: splits.test.len(),
        },
        normalization: NORMALIZATION.into(),
        data_files: source.checksums(),
        code_version: CODE_VERSION.into(),
        params_sha256: hex::encode(digest.finalize()),
        codebook: model.codebook_snapshot(),
        started_unix,
        wall_clock_secs: clock.elapsed().as_secs_f64(),
    };
    log::info!(
        "run {}: epoch {} kept, val {:.2}% test {:.2}% in {:.1}s",
        config.label(),
        record.selected_epoch,
        record.val_error,
        record.test_error,
        record.wall_clock_secs
    );
    if let Some(dir) = out_dir {
        record.write(&record_path(dir, config))?;
    }
    Ok(record)
}
