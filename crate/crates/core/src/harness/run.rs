use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::trainer::{tail_mean, train, MetricsTable, MetricsWriter};

use super::checkpoint;
use super::config::{ExperimentConfig, Variant};
use super::HarnessError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RECORD_FILE: &str = "run.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RUNS_FILE: &str = "runs.csv";

/// Fraction of updates at the end of training that make up the final return.
pub const FINAL_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub variant: Variant,
    pub n_agents: usize,
    pub seed: u64,
    pub run_seed: u64,
    /// Relative to the run directory.
    pub metrics_csv: PathBuf,
    /// Mean of `mean_return` over the last 10% of updates; `None` when no
    /// episode finished there.
    pub final_return: Option<f64>,
}

impl RunRecord {
    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(dir.join(RECORD_FILE))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", dir.display())))
    }
}

/// Final return of a metrics table.
pub fn final_return(table: &MetricsTable) -> Option<f64> {
    let returns = table.column("mean_return")?;
    Some(tail_mean(&returns, FINAL_FRACTION)).filter(|r| r.is_finite())
}

/// Output directory: the explicit flag, else `SAF_MARL_OUT`, else the
/// config's `output_dir`, else `runs`.
pub fn resolve_out_dir(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os("SAF_MARL_OUT").filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

/// Trains one run into `dir`: metrics CSV, checkpoint and run record.
pub fn run_one(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<RunRecord, HarnessError> {
    cfg.validate()?;
    let train_cfg = cfg.resolved_train()?;
    fs::create_dir_all(dir)?;
    let file = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
    let mut writer = MetricsWriter::new(file, train_cfg.pool_size)?;
    let run_seed = cfg.run_seed(seed);
    let run = train(&cfg.env, &train_cfg, run_seed, |m| writer.write(m))?;
    writer.into_inner().flush()?;
    checkpoint::save(&run.model.params, &dir.join(CHECKPOINT_FILE))?;
    let returns: Vec<f64> = run.metrics.iter().map(|m| m.mean_return).collect();
    let record = RunRecord {
        config_hash: cfg.hash()?,
        variant: cfg.variant,
        n_agents: cfg.env.n_agents,
        seed,
        run_seed,
        metrics_csv: PathBuf::from(METRICS_FILE),
        final_return: Some(tail_mean(&returns, FINAL_FRACTION)).filter(|r| r.is_finite()),
    };
    let json = serde_json::to_string_pretty(&record).map_err(|e| HarnessError::Config(e.to_string()))?;
    fs::write(dir.join(RECORD_FILE), json + "\n")?;
    Ok(record)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixSpec {
    pub variants: Vec<Variant>,
    pub agents: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Ghosts per agent; `None` keeps the configured ghost count.
    pub ghost_scale: Option<usize>,
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixCell {
    pub variant: Variant,
    pub n_agents: usize,
    pub seed: u64,
}

impl MatrixCell {
    pub fn dir_name(&self) -> String {
        format!("{}_n{}_s{}", self.variant.slug(), self.n_agents, self.seed)
    }
}

impl MatrixSpec {
    /// Cross product in variant, agent count, seed order.
    pub fn cells(&self) -> Vec<MatrixCell> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &n_agents in &self.agents {
                for &seed in &self.seeds {
                    out.push(MatrixCell { variant, n_agents, seed });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: Variant,
    pub n_agents: usize,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

pub fn summary_header() -> &'static str {
    "variant,n_agents,runs,mean_final_return,std_final_return"
}

impl SummaryRow {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.variant, self.n_agents, self.runs, self.mean, self.std)
    }
}

pub fn runs_header() -> &'static str {
    "variant,n_agents,seed,run_seed,config_hash,final_return,metrics_csv"
}

impl RunRecord {
    /// Row of `runs.csv`; `dir` is the run directory relative to the matrix
    /// output. An absent final return is written as `NaN`.
    pub fn csv_row(&self, dir: &str) -> String {
        format!(
            "{},{},{},{},{},{},{}/{}",
            self.variant,
            self.n_agents,
            self.seed,
            self.run_seed,
            self.config_hash,
            self.final_return.unwrap_or(f64::NAN),
            dir,
            self.metrics_csv.display()
        )
    }
}

pub fn mean_and_sample_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates records per `(variant, n_agents)` in first-seen order. Runs
/// without a final return are skipped.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Variant, usize)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.variant, r.n_agents)) {
            keys.push((r.variant, r.n_agents));
        }
    }
    keys.into_iter()
        .map(|(variant, n_agents)| {
            let finals: Vec<f64> = records
                .iter()
                .filter(|r| r.variant == variant && r.n_agents == n_agents)
                .filter_map(|r| r.final_return)
                .collect();
            let (mean, std) = mean_and_sample_std(&finals);
            SummaryRow { variant, n_agents, runs: finals.len(), mean, std }
        })
        .collect()
}

pub struct MatrixOutcome {
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
    pub failures: Vec<(MatrixCell, HarnessError)>,
}

/// Runs every cell of `spec` as an independent training run under `out`
/// and writes `runs.csv` (one row per run) and `summary.csv`. Output does
/// not depend on `jobs`.
pub fn run_matrix(base: &ExperimentConfig, spec: &MatrixSpec, out: &Path) -> Result<MatrixOutcome, HarnessError> {
    let cells = spec.cells();
    let mut configs = Vec::with_capacity(cells.len());
    for cell in &cells {
        let cfg = base.with_variant(cell.variant).with_agents(cell.n_agents, spec.ghost_scale);
        cfg.validate()?;
        configs.push(cfg);
    }
    fs::create_dir_all(out)?;
    let work: Vec<(MatrixCell, ExperimentConfig)> = cells.into_iter().zip(configs).collect();
    let results = crate::par::with_jobs(spec.jobs, || {
        crate::par::map(work, |(cell, cfg)| {
            let result = run_one(&cfg, cell.seed, &out.join(cell.dir_name()));
            (cell, result)
        })
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut runs = format!("{}\n", runs_header());
    for (cell, result) in results {
        match result {
            Ok(r) => {
                runs.push_str(&r.csv_row(&cell.dir_name()));
                runs.push('\n');
                records.push(r);
            }
            Err(e) => failures.push((cell, e)),
        }
    }
    fs::write(out.join(RUNS_FILE), runs)?;
    let summary = summarize(&records);
    let mut text = String::from(summary_header());
    text.push('\n');
    for row in &summary {
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    fs::write(out.join(SUMMARY_FILE), text)?;
    Ok(MatrixOutcome { records, summary, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(variant: Variant, n: usize, r: Option<f64>) -> RunRecord {
        RunRecord {
            config_hash: String::new(),
            variant,
            n_agents: n,
            seed: 0,
            run_seed: 0,
            metrics_csv: PathBuf::from(METRICS_FILE),
            final_return: r,
        }
    }

    #[test]
    fn cells_cross_product() {
        let spec = MatrixSpec {
            variants: vec![Variant::SafSp, Variant::I],
            agents: vec![2, 5],
            seeds: (0..5).collect(),
            ghost_scale: None,
            jobs: 1,
        };
        let cells = spec.cells();
        assert_eq!(cells.len(), 20);
        let names: std::collections::HashSet<String> = cells.iter().map(MatrixCell::dir_name).collect();
        assert_eq!(names.len(), 20);
        assert_eq!(cells[0].dir_name(), "saf-sp_n2_s0");
    }

    #[test]
    fn summary_statistics() {
        let rows = summarize(&[
            record(Variant::I, 2, Some(-10.0)),
            record(Variant::I, 2, Some(-20.0)),
            record(Variant::Saf, 2, Some(-5.0)),
            record(Variant::I, 2, None),
        ]);
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].runs, rows[0].mean), (2, -15.0));
        assert!((rows[0].std - 50f64.sqrt()).abs() < 1e-12);
        assert_eq!((rows[1].runs, rows[1].std), (1, 0.0));
    }
}
