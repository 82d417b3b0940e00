//! Monte Carlo harness for the simulation designs in [`crate::dgp`].
//!
//! An experiment is the Cartesian product of designs (model, noise case,
//! sample size, gamma) and replications. Every (design, replication) pair
//! derives its own seed, so results do not depend on scheduling, and all
//! estimators of a design share one simulated dataset.

use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::covariance::{sample_cov, Dataset};
use crate::dgp::{generate_dataset, GeneratedData, Model, ModelSpec, NoiseCase, DEFAULT_BURN_IN, DEFAULT_N_FOURIER, SIGMA_MIN};
use crate::error::{Error, Result};
use crate::hilbert::{make_grid, Grid};
use crate::predictor::{
    default_ridge_tau, empirical_mspe, fit_fpca_ls, fit_fpca_ls_reduced, fit_ridge, ElbowParams, FittedPredictor,
    ReductionBasis,
};

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "FLPRED_WORKERS";

/// Share of failed replications in a cell above which the run is flagged.
pub const FAILURE_WARN_FRACTION: f64 = 0.10;

pub const CSV_HEADER: [&str; 11] = [
    "model",
    "case",
    "T",
    "gamma",
    "estimator",
    "ell_rule",
    "replications",
    "mean_excess_mspe",
    "stderr_excess_mspe",
    "mean_k",
    "failures",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "fpca_ls")]
    FpcaLs,
    #[serde(rename = "reduced_y")]
    ReducedY,
    #[serde(rename = "reduced_x")]
    ReducedX,
    #[serde(rename = "ridge")]
    Ridge,
}

impl Estimator {
    pub fn label(self) -> &'static str {
        match self {
            Estimator::FpcaLs => "fpca_ls",
            Estimator::ReducedY => "reduced_y",
            Estimator::ReducedX => "reduced_x",
            Estimator::Ridge => "ridge",
        }
    }

    fn is_reduced(self) -> bool {
        matches!(self, Estimator::ReducedY | Estimator::ReducedX)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fpca_ls" => Ok(Estimator::FpcaLs),
            "reduced_y" => Ok(Estimator::ReducedY),
            "reduced_x" => Ok(Estimator::ReducedX),
            "ridge" => Ok(Estimator::Ridge),
            other => Err(Error::Config(format!("unknown estimator {other:?}"))),
        }
    }
}

/// Rank rule for the output projection of the reduced estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum EllRule {
    /// `ℓ_T = ⌊√T⌋`.
    #[default]
    #[serde(rename = "floor_sqrt_T")]
    FloorSqrtT,
}

impl EllRule {
    pub fn label(self) -> &'static str {
        match self {
            EllRule::FloorSqrtT => "floor_sqrt_T",
        }
    }

    pub fn ell(self, t: usize) -> usize {
        match self {
            EllRule::FloorSqrtT => ((t as f64).sqrt().floor() as usize).max(1),
        }
    }
}

/// Where the MSPE is measured. In-sample is the reference quantity;
/// out-of-sample continues the simulated path for another `T` steps and is
/// reported under estimator labels suffixed `_oos`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Evaluation {
    #[default]
    InSample,
    OutOfSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub models: Vec<Model>,
    pub cases: Vec<NoiseCase>,
    pub sample_sizes: Vec<usize>,
    pub gammas: Vec<f64>,
    pub estimators: Vec<Estimator>,
    pub replications: usize,
    pub base_seed: u64,
    pub grid_points: usize,
    pub c_tau: f64,
    pub c_cap: f64,
    pub ell_rule: EllRule,
    pub evaluation: Evaluation,
    pub n_fourier: usize,
    pub burn_in: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            models: vec![Model::M1],
            cases: vec![NoiseCase::Bb],
            sample_sizes: vec![50, 100, 200, 400, 800],
            gammas: vec![0.475],
            estimators: vec![Estimator::FpcaLs],
            replications: 300,
            base_seed: 42,
            grid_points: 200,
            c_tau: 0.01,
            c_cap: 0.5,
            ell_rule: EllRule::FloorSqrtT,
            evaluation: Evaluation::InSample,
            n_fourier: DEFAULT_N_FOURIER,
            burn_in: DEFAULT_BURN_IN,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.models.is_empty() || self.cases.is_empty() || self.sample_sizes.is_empty() {
            return fail("models, cases and sample_sizes must be non-empty".into());
        }
        if self.gammas.is_empty() || self.estimators.is_empty() {
            return fail("gammas and estimators must be non-empty".into());
        }
        if self.replications < 1 {
            return fail("replications must be at least 1".into());
        }
        if let Some(g) = self.gammas.iter().find(|g| !(**g > 0.0 && **g < 0.5)) {
            return fail(format!("gamma {g} outside (0, 0.5)"));
        }
        if let Some(t) = self.sample_sizes.iter().find(|&&t| t < 10) {
            return fail(format!("sample size {t} below 10"));
        }
        if !(self.c_tau > 0.0) || !(self.c_cap > 0.0) {
            return fail("c_tau and c_cap must be positive".into());
        }
        let grid = make_grid(self.grid_points).map_err(|e| Error::Config(e.to_string()))?;
        for &model in &self.models {
            let mut spec = ModelSpec::new(model, NoiseCase::Bb, 10, grid.clone());
            spec.n_fourier = self.n_fourier;
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn elbow(&self, gamma: f64) -> Result<ElbowParams> {
        ElbowParams::new(self.c_tau, self.c_cap, gamma)
    }
}

/// Unit that owns one simulated dataset per replication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Design {
    pub model: Model,
    pub case: NoiseCase,
    pub t: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub design: Design,
    pub estimator: Estimator,
}

/// Seed of replication `rep_index` of `design`: SHA-256 of the identifying
/// tuple, truncated to 64 bits.
pub fn child_seed(base_seed: u64, design: &Design, rep_index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update([design.model.id(), design.case.code()]);
    h.update((design.t as u64).to_le_bytes());
    h.update(design.gamma.to_bits().to_le_bytes());
    h.update((rep_index as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub model: Model,
    pub case: NoiseCase,
    pub t: usize,
    pub gamma: f64,
    pub estimator: Estimator,
    pub rep_index: usize,
    pub seed: u64,
    pub k_selected: usize,
    pub ell_used: Option<usize>,
    pub empirical_mspe: Option<f64>,
    pub excess_mspe: Option<f64>,
    pub failure: Option<String>,
}

impl ReplicationRecord {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

/// Executes replications for one configuration.
#[derive(Debug, Clone)]
pub struct Runner {
    config: ExperimentConfig,
    grid: Grid,
}

impl Runner {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let grid = make_grid(config.grid_points)?;
        Ok(Self { config, grid })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn designs(&self) -> Vec<Design> {
        let c = &self.config;
        let mut out = Vec::new();
        for &case in &c.cases {
            for &gamma in &c.gammas {
                for &model in &c.models {
                    for &t in &c.sample_sizes {
                        out.push(Design { model, case, t, gamma });
                    }
                }
            }
        }
        out
    }

    fn simulate(&self, design: &Design, seed: u64) -> Result<GeneratedData> {
        let horizon = match self.config.evaluation {
            Evaluation::InSample => design.t,
            Evaluation::OutOfSample => 2 * design.t,
        };
        let mut spec = ModelSpec::new(design.model, design.case, horizon, self.grid.clone());
        spec.n_fourier = self.config.n_fourier;
        spec.burn_in = self.config.burn_in;
        generate_dataset(&spec, seed)
    }

    fn fit(&self, estimator: Estimator, gamma: f64, x: &Dataset, y: &Dataset) -> Result<FittedPredictor> {
        let params = self.config.elbow(gamma)?;
        let ell = self.config.ell_rule.ell(x.len()).min(x.dim());
        match estimator {
            Estimator::FpcaLs => fit_fpca_ls(x, y, &params),
            Estimator::ReducedY => fit_fpca_ls_reduced(x, y, &params, ell, ReductionBasis::YEigs),
            Estimator::ReducedX => fit_fpca_ls_reduced(x, y, &params, ell, ReductionBasis::XEigs),
            Estimator::Ridge => {
                let tau = default_ridge_tau(&sample_cov(x), x.len(), gamma);
                fit_ridge(x, y, tau)
            }
        }
    }

    /// All estimators of one replication of `design`, on a shared dataset.
    pub fn run_design(&self, design: &Design, estimators: &[Estimator], rep_index: usize) -> Vec<ReplicationRecord> {
        let seed = child_seed(self.config.base_seed, design, rep_index);
        let blank = |estimator: Estimator| ReplicationRecord {
            model: design.model,
            case: design.case,
            t: design.t,
            gamma: design.gamma,
            estimator,
            rep_index,
            seed,
            k_selected: 0,
            ell_used: None,
            empirical_mspe: None,
            excess_mspe: None,
            failure: None,
        };
        let data = match self.simulate(design, seed) {
            Ok(d) => d,
            Err(e) => {
                return estimators
                    .iter()
                    .map(|&est| ReplicationRecord {
                        failure: Some(format!("simulation: {e}")),
                        ..blank(est)
                    })
                    .collect()
            }
        };
        let (train_x, train_y, eval_x, eval_y) = match self.config.evaluation {
            Evaluation::InSample => (data.x.clone(), data.y.clone(), data.x, data.y),
            Evaluation::OutOfSample => {
                let t = design.t;
                let split = |d: &Dataset, start: usize| {
                    Dataset::new(d.grid().clone(), d.matrix().rows(start, t).into_owned())
                        .expect("split of a valid dataset")
                };
                (split(&data.x, 0), split(&data.y, 0), split(&data.x, t), split(&data.y, t))
            }
        };
        estimators
            .iter()
            .map(|&est| {
                let outcome = self
                    .fit(est, design.gamma, &train_x, &train_y)
                    .and_then(|fit| empirical_mspe(&fit.operator, &eval_x, &eval_y).map(|m| (fit, m)));
                match outcome {
                    Ok((fit, mspe)) => ReplicationRecord {
                        k_selected: fit.k,
                        ell_used: fit.ell,
                        empirical_mspe: Some(mspe),
                        excess_mspe: Some(mspe - SIGMA_MIN),
                        ..blank(est)
                    },
                    Err(e) => ReplicationRecord {
                        failure: Some(e.to_string()),
                        ..blank(est)
                    },
                }
            })
            .collect()
    }

    pub fn run_replication(&self, cell: &Cell, rep_index: usize) -> ReplicationRecord {
        self.run_design(&cell.design, &[cell.estimator], rep_index)
            .pop()
            .expect("one estimator in, one record out")
    }

    /// Every replication of every design, in design-major order.
    pub fn run_records(&self, workers: usize) -> Result<Vec<ReplicationRecord>> {
        let designs = self.designs();
        let units: Vec<(usize, usize)> = (0..designs.len())
            .flat_map(|d| (0..self.config.replications).map(move |r| (d, r)))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        let estimators = &self.config.estimators;
        let nested: Vec<Vec<ReplicationRecord>> = pool.install(|| {
            units
                .par_iter()
                .map(|&(d, r)| self.run_design(&designs[d], estimators, r))
                .collect()
        });
        Ok(nested.into_iter().flatten().collect())
    }

    pub fn run(&self, workers: usize) -> Result<SummaryTable> {
        let records = self.run_records(workers)?;
        Ok(summarize(&self.config, &records))
    }
}

/// Worker count from [`WORKERS_ENV`], falling back to available cores.
pub fn default_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&w| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<SummaryTable> {
    run_experiment_with_workers(config, default_workers())
}

pub fn run_experiment_with_workers(config: &ExperimentConfig, workers: usize) -> Result<SummaryTable> {
    Runner::new(config.clone())?.run(workers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: Model,
    pub case: NoiseCase,
    #[serde(rename = "T")]
    pub t: usize,
    pub gamma: f64,
    pub estimator: String,
    pub ell_rule: String,
    pub replications: usize,
    pub mean_excess_mspe: f64,
    pub stderr_excess_mspe: f64,
    pub mean_k: f64,
    pub failures: usize,
}

impl SummaryRow {
    pub fn successes(&self) -> usize {
        self.replications - self.failures
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
    pub warnings: Vec<String>,
}

impl SummaryTable {
    pub fn find(&self, model: Model, case: NoiseCase, t: usize, gamma: f64, estimator: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| {
            r.model == model && r.case == case && r.t == t && r.gamma == gamma && r.estimator == estimator
        })
    }

    pub fn exceeds_failure_threshold(&self) -> bool {
        !self.warnings.is_empty()
    }
}

fn estimator_label(estimator: Estimator, evaluation: Evaluation) -> String {
    match evaluation {
        Evaluation::InSample => estimator.label().to_string(),
        Evaluation::OutOfSample => format!("{}_oos", estimator.label()),
    }
}

/// Mean, standard error and mean selected rank per cell. Output rows follow
/// the configuration order (case, gamma, model, estimator, T).
pub fn summarize(config: &ExperimentConfig, records: &[ReplicationRecord]) -> SummaryTable {
    let mut table = SummaryTable::default();
    for &case in &config.cases {
        for &gamma in &config.gammas {
            for &model in &config.models {
                for &estimator in &config.estimators {
                    for &t in &config.sample_sizes {
                        let cell: Vec<&ReplicationRecord> = records
                            .iter()
                            .filter(|r| {
                                r.case == case
                                    && r.gamma == gamma
                                    && r.model == model
                                    && r.estimator == estimator
                                    && r.t == t
                            })
                            .collect();
                        let row = summarize_cell(config, model, case, t, gamma, estimator, &cell);
                        if row.failures as f64 > FAILURE_WARN_FRACTION * row.replications as f64 {
                            table.warnings.push(format!(
                                "model {model} case {case} T={t} gamma={gamma} {}: {} of {} replications failed",
                                row.estimator, row.failures, row.replications
                            ));
                        }
                        table.rows.push(row);
                    }
                }
            }
        }
    }
    table
}

fn summarize_cell(
    config: &ExperimentConfig,
    model: Model,
    case: NoiseCase,
    t: usize,
    gamma: f64,
    estimator: Estimator,
    cell: &[&ReplicationRecord],
) -> SummaryRow {
    let ok: Vec<&ReplicationRecord> = cell.iter().copied().filter(|r| !r.failed()).collect();
    let n = ok.len() as f64;
    let excess: Vec<f64> = ok.iter().filter_map(|r| r.excess_mspe).collect();
    let mean = excess.iter().sum::<f64>() / n;
    let stderr = if ok.len() > 1 {
        let var = excess.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        f64::NAN
    };
    let mean_k = ok.iter().map(|r| r.k_selected as f64).sum::<f64>() / n;
    SummaryRow {
        model,
        case,
        t,
        gamma,
        estimator: estimator_label(estimator, config.evaluation),
        ell_rule: if estimator.is_reduced() {
            config.ell_rule.label().to_string()
        } else {
            "none".to_string()
        },
        replications: config.replications,
        mean_excess_mspe: mean,
        stderr_excess_mspe: stderr,
        mean_k,
        failures: cell.len() - ok.len(),
    }
}

/// Serializes the table as CSV with [`CSV_HEADER`] columns. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_csv<W: std::io::Write>(table: &SummaryTable, sink: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
    w.write_record(CSV_HEADER)?;
    for row in &table.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(table: &SummaryTable, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(table, std::io::BufWriter::new(file))
}

pub fn csv_string(table: &SummaryTable) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(table, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

pub fn read_csv<R: std::io::Read>(source: R) -> Result<SummaryTable> {
    let mut r = csv::Reader::from_reader(source);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::InvalidArgument(format!("unexpected CSV header {header:?}")));
    }
    let rows = r.deserialize().collect::<std::result::Result<Vec<SummaryRow>, _>>()?;
    Ok(SummaryTable { rows, warnings: Vec::new() })
}

pub fn load_csv(path: &Path) -> Result<SummaryTable> {
    read_csv(std::fs::File::open(path)?)
}

/// Text rendering grouped by case then gamma, one line per model and
/// estimator, one column per sample size.
pub fn emit_console(table: &SummaryTable) -> String {
    let mut out = String::new();
    let mut cases: Vec<NoiseCase> = Vec::new();
    for r in &table.rows {
        if !cases.contains(&r.case) {
            cases.push(r.case);
        }
    }
    for case in cases {
        let in_case: Vec<&SummaryRow> = table.rows.iter().filter(|r| r.case == case).collect();
        let mut gammas: Vec<f64> = Vec::new();
        for r in &in_case {
            if !gammas.contains(&r.gamma) {
                gammas.push(r.gamma);
            }
        }
        for gamma in gammas {
            let block: Vec<&SummaryRow> = in_case.iter().copied().filter(|r| r.gamma == gamma).collect();
            let ts: BTreeSet<usize> = block.iter().map(|r| r.t).collect();
            let _ = writeln!(out, "Case {case}, gamma = {gamma}");
            let _ = write!(out, "{:<22}", "T");
            for t in &ts {
                let _ = write!(out, "{t:>10}");
            }
            let _ = writeln!(out);
            let mut keys: Vec<(Model, String)> = Vec::new();
            for r in &block {
                let key = (r.model, r.estimator.clone());
                if !keys.contains(&key) {
                    keys.push(key);
                }
            }
            for (model, est) in keys {
                let _ = write!(out, "{:<22}", format!("Model {model} {est}"));
                for t in &ts {
                    match block.iter().find(|r| r.model == model && r.estimator == est && r.t == *t) {
                        Some(r) => {
                            let _ = write!(out, "{:>10.3}", r.mean_excess_mspe);
                        }
                        None => {
                            let _ = write!(out, "{:>10}", "-");
                        }
                    }
                }
                let _ = writeln!(out);
            }
            let _ = writeln!(out);
        }
    }
    for w in &table.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}
