//! Grid sweeps: every method × filter count × seed, with the codebook size
//! and β of each seed picked by validation error.

use std::fmt::{self, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{record_path, run, DataSource, RunConfig, RunRecord};
use crate::decorrelation::BETA_GRID;
use crate::error::{Error, Result};
use crate::model::Pooling;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Gmp,
    Gap,
    /// BoF without the decorrelation term.
    Bof,
    /// BoF with the decorrelation term, β from the grid.
    BofDecorrelated,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Gmp, Method::Gap, Method::Bof, Method::BofDecorrelated];

    pub fn of(config: &RunConfig) -> Method {
        match (config.pooling, config.beta) {
            (Pooling::Gmp, _) => Method::Gmp,
            (Pooling::Gap, _) => Method::Gap,
            (Pooling::Bof, None) => Method::Bof,
            (Pooling::Bof, Some(_)) => Method::BofDecorrelated,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Gmp => "gmp",
            Method::Gap => "gap",
            Method::Bof => "bof",
            Method::BofDecorrelated => "bof-decorrelated",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gmp" => Ok(Method::Gmp),
            "gap" => Ok(Method::Gap),
            "bof" => Ok(Method::Bof),
            "bof-decorrelated" | "bof-dec" => Ok(Method::BofDecorrelated),
            _ => Err(Error::config(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// Shared settings; pooling, filters, codebook size, β and seed are
    /// overwritten per run.
    pub base: RunConfig,
    pub methods: Vec<Method>,
    pub filters: Vec<usize>,
    pub codebook_sizes: Vec<usize>,
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Worker threads; each run stays single-threaded.
    pub jobs: usize,
}

impl SweepSpec {
    /// All methods, the dataset's codebook grid, the β grid and the
    /// dataset's default seed count, at `base.filters`.
    pub fn new(base: RunConfig) -> Self {
        let d = base.dataset;
        SweepSpec {
            methods: Method::ALL.to_vec(),
            filters: vec![base.filters],
            codebook_sizes: d.codebook_grid().to_vec(),
            betas: BETA_GRID.to_vec(),
            seeds: (0..d.default_seed_count() as u64).collect(),
            jobs: 1,
            base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.filters.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("a sweep needs at least one method, filter count and seed"));
        }
        let bof = self.methods.iter().any(|m| matches!(m, Method::Bof | Method::BofDecorrelated));
        if bof && self.codebook_sizes.is_empty() {
            return Err(Error::config("bof methods need at least one codebook size"));
        }
        if self.methods.contains(&Method::BofDecorrelated) && self.betas.is_empty() {
            return Err(Error::config("bof-decorrelated needs at least one beta"));
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs must be >= 1"));
        }
        for c in self.configs() {
            c.validate()?;
            c.check_grid()?;
        }
        Ok(())
    }

    /// Summary cells in output order.
    pub fn cells(&self) -> Vec<(Method, usize)> {
        self.methods
            .iter()
            .flat_map(|&m| self.filters.iter().map(move |&f| (m, f)))
            .collect()
    }

    /// Every run of the sweep, grouped by cell, then seed, then (K, β).
    pub fn configs(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for (method, filters) in self.cells() {
            for &seed in &self.seeds {
                let mut c = self.base.clone();
                c.filters = filters;
                c.seed = seed;
                c.beta = None;
                c.codebook_size = None;
                match method {
                    Method::Gmp | Method::Gap => {
                        c.pooling = if method == Method::Gmp { Pooling::Gmp } else { Pooling::Gap };
                        out.push(c);
                    }
                    Method::Bof | Method::BofDecorrelated => {
                        c.pooling = Pooling::Bof;
                        for &k in &self.codebook_sizes {
                            c.codebook_size = Some(k);
                            if method == Method::Bof {
                                out.push(c.clone());
                            } else {
                                for &b in &self.betas {
                                    c.beta = Some(b);
                                    out.push(c.clone());
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub config: RunConfig,
    pub config_hash: String,
    pub category: String,
    pub message: String,
}

/// The run kept for one seed of a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedRun {
    pub seed: u64,
    pub config_hash: String,
    pub codebook_size: Option<usize>,
    pub beta: Option<f64>,
    pub val_error: f64,
    pub test_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Method,
    pub filters: usize,
    pub selected: Vec<SelectedRun>,
    /// Mean test error (percent) over seeds with a completed run.
    pub mean_test_error: Option<f64>,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std_test_error: Option<f64>,
    /// Lowest mean among the methods sharing this filter count.
    pub best: bool,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub failures: Vec<SweepFailure>,
    pub summary: Vec<CellSummary>,
}

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, std))
}

/// Builds the summary table from raw records alone. For each cell and seed
/// the run with the lowest validation error wins (earliest in grid order on
/// ties); its test error enters the cell statistics.
pub fn summarize(spec: &SweepSpec, records: &[RunRecord], failures: &[SweepFailure]) -> Vec<CellSummary> {
    let order: Vec<String> = spec.configs().iter().map(RunConfig::hash).collect();
    let rank = |h: &str| order.iter().position(|o| o == h).unwrap_or(usize::MAX);
    let mut cells: Vec<CellSummary> = spec
        .cells()
        .into_iter()
        .map(|(method, filters)| {
            let in_cell = |c: &RunConfig| Method::of(c) == method && c.filters == filters;
            let mut selected = Vec::new();
            for &seed in &spec.seeds {
                let winner = records
                    .iter()
                    .filter(|r| in_cell(&r.config) && r.config.seed == seed)
                    .min_by(|a, b| {
                        a.val_error
                            .total_cmp(&b.val_error)
                            .then(rank(&a.config_hash).cmp(&rank(&b.config_hash)))
                    });
                if let Some(r) = winner {
                    selected.push(SelectedRun {
                        seed,
                        config_hash: r.config_hash.clone(),
                        codebook_size: r.config.codebook_size,
                        beta: r.config.beta,
                        val_error: r.val_error,
                        test_error: r.test_error,
                    });
                }
            }
            let tests: Vec<f64> = selected.iter().map(|s| s.test_error).collect();
            let stats = mean_std(&tests);
            CellSummary {
                method,
                filters,
                selected,
                mean_test_error: stats.map(|s| s.0),
                std_test_error: stats.map(|s| s.1),
                best: false,
                failures: failures.iter().filter(|f| in_cell(&f.config)).count(),
            }
        })
        .collect();
    for &f in &spec.filters {
        let best = cells
            .iter()
            .filter(|c| c.filters == f)
            .filter_map(|c| c.mean_test_error)
            .min_by(f64::total_cmp);
        for c in cells.iter_mut().filter(|c| c.filters == f) {
            c.best = best.is_some() && c.mean_test_error == best;
        }
    }
    cells
}

/// Comma-separated summary; a `*` after the mean marks the best method
/// for a filter count.
pub fn summary_csv(summary: &[CellSummary]) -> String {
    let mut out = String::from("method,filters,seeds,mean_test_error,std_test_error,best,failures,selected\n");
    for c in summary {
        let num = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.4}"));
        let picks: Vec<String> = c
            .selected
            .iter()
            .map(|s| {
                let mut p = format!("s{}", s.seed);
                if let Some(k) = s.codebook_size {
                    let _ = write!(p, ":K{k}");
                }
                if let Some(b) = s.beta {
                    let _ = write!(p, ":b{b}");
                }
                p
            })
            .collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            c.method,
            c.filters,
            c.selected.len(),
            num(c.mean_test_error),
            num(c.std_test_error),
            if c.best { "*" } else { "" },
            c.failures,
            picks.join(" ")
        );
    }
    out
}

fn load_cached(out_dir: Option<&Path>, config: &RunConfig) -> Option<RunRecord> {
    let path = record_path(out_dir?, config);
    if !path.is_file() {
        return None;
    }
    match RunRecord::read(&path) {
        Ok(r) if r.config == *config => Some(r),
        Ok(_) => {
            log::warn!("{} holds a different config; rerunning", path.display());
            None
        }
        Err(e) => {
            log::warn!("unreadable record {}: {e}; rerunning", path.display());
            None
        }
    }
}

/// Runs every config of `spec` not already recorded under `out_dir`, on
/// `spec.jobs` threads. A failing run is recorded and the sweep carries on.
/// With `out_dir`, writes `summary.csv` and `summary.json` there.
pub fn sweep(spec: &SweepSpec, source: &DataSource, out_dir: Option<&Path>) -> Result<SweepOutcome> {
    spec.validate()?;
    let configs = spec.configs();
    let results: Mutex<Vec<Option<std::result::Result<RunRecord, SweepFailure>>>> =
        Mutex::new(vec![None; configs.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(config) = configs.get(i) else { break };
        let outcome = match load_cached(out_dir, config) {
            Some(r) => {
                log::info!("skipping {} ({}): already recorded", config.label(), r.config_hash);
                Ok(r)
            }
            None => run(config, source, out_dir).map_err(|e| {
                log::error!("run {} failed: {e}", config.label());
                SweepFailure {
                    config: config.clone(),
                    config_hash: config.hash(),
                    category: e.category().into(),
                    message: e.to_string(),
                }
            }),
        };
        results.lock().expect("no worker panicked")[i] = Some(outcome);
    };
    std::thread::scope(|s| {
        for _ in 0..spec.jobs.min(configs.len()) {
            s.spawn(worker);
        }
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for r in results.into_inner().expect("no worker panicked").into_iter().flatten() {
        match r {
            Ok(rec) => records.push(rec),
            Err(f) => failures.push(f),
        }
    }
    let summary = summarize(spec, &records, &failures);
    if let Some(dir) = out_dir {
        let csv = dir.join("summary.csv");
        std::fs::write(&csv, summary_csv(&summary)).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("summary.json");
        let body = serde_json::json!({ "spec": spec, "summary": summary, "failures": failures });
        std::fs::write(&json, serde_json::to_string_pretty(&body)?).map_err(|e| Error::io(&json, e))?;
    }
    Ok(SweepOutcome {
        records,
        failures,
        summary,
    })
}
