//! Experiment runner: config parsing, seeded Monte Carlo sweeps, baseline
//! comparison, convergence traces and BER validation tables.
//!
//! Output files (all deterministic for a fixed config):
//!
//! | file | contents |
//! |------|----------|
//! | `resolved_config.toml` | input config with defaults filled in, plus linear-unit echo |
//! | `summary.csv` | per sweep point and system: counts, mean/median power over usable runs |
//! | `runs.csv` | one row per (point, realization, system) |
//! | `results.json` | `w`, `φ` per run for re-verification |
//! | `trace_<system>.csv` | convergence trace |
//! | `ber_validation.csv` | closed form vs Monte Carlo BER |
//!
//! Wall-clock times go to `timing.json` so that the CSVs stay byte-stable.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, csr_gamma_s, BaselineSpec};
use crate::channelgen::{sample_channels, GeometryConfig, Point};
use crate::detector::{ratio_ber, simulate_energy_detection, solve_lambda_s};
use crate::error::{Error, Result};
use crate::model::{
    check_feasibility, db_to_linear, dbm_to_watts, linear_to_db, ChannelSet, FeasibilityReport, Precoder, RisPhase,
    SystemConfig,
};
use crate::solver::{self, write_trace_csv, SolveResult, SolveStatus, SolverOptions, SystemKind, FEAS_TOL};

/// System parameters as written in the config (dB / dBm units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub n_tx: usize,
    pub n_ris: usize,
    pub n_pr: usize,
    pub t_symbols: u32,
    pub noise_dbm: f64,
    pub gamma_p_db: f64,
    pub ber_target: f64,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self {
            n_tx: 4,
            n_ris: 64,
            n_pr: 2,
            t_symbols: 50,
            noise_dbm: -80.0,
            gamma_p_db: 15.0,
            ber_target: 0.0786,
        }
    }
}

impl SystemSection {
    pub fn resolve(&self, n_pr: usize) -> Result<SystemConfig> {
        SystemConfig::new(
            self.n_tx,
            self.n_ris,
            n_pr,
            self.t_symbols,
            dbm_to_watts(self.noise_dbm),
            db_to_linear(self.gamma_p_db),
            self.ber_target,
        )
    }
}

fn default_direction() -> Point {
    [1.0, 0.0, 0.0]
}

/// Sweep axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "axis", rename_all = "snake_case")]
pub enum SweepSpec {
    #[default]
    None,
    /// Moves the BRx and PRs by `offset · direction` (metres).
    Deployment {
        offsets: Vec<f64>,
        #[serde(default = "default_direction")]
        direction: Point,
    },
    /// Number of PRs.
    NPr { values: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceSection {
    pub realization: u64,
    pub system: SystemKind,
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        Self {
            realization: 0,
            system: SystemKind::IdSr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BerValidationSection {
    /// Variance ratios `σ1²/σ0²` (σ0² = 1).
    pub ratios: Vec<f64>,
    pub t_values: Vec<u32>,
    pub trials: u64,
    /// Adds the row `ratio = λ_s(ber_target, T)` for every `T`.
    pub include_lambda_s: bool,
    pub seed: u64,
}

impl Default for BerValidationSection {
    fn default() -> Self {
        Self {
            ratios: vec![1.0, 1.5, 2.0, 4.0, 8.0],
            t_values: vec![10, 50],
            trials: 1_000_000,
            include_lambda_s: true,
            seed: 2024,
        }
    }
}

/// Linear-unit values derived at parse time; written to the resolved dump
/// and ignored on input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedEcho {
    pub noise_power_w: f64,
    pub gamma_p: f64,
    pub rate_target_bps_hz: f64,
    pub lambda_s: f64,
    pub gamma_s: f64,
}

/// The config file as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentFile {
    pub n_realizations: u64,
    pub systems: Vec<SystemKind>,
    pub seed_base: u64,
    pub output_dir: PathBuf,
    pub system: SystemSection,
    pub geometry: GeometryConfig,
    pub solver: SolverOptions,
    pub sweep: SweepSpec,
    pub convergence: ConvergenceSection,
    pub ber_validation: BerValidationSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolved: Option<ResolvedEcho>,
}

impl Default for ExperimentFile {
    fn default() -> Self {
        Self {
            n_realizations: 1,
            systems: vec![SystemKind::IdSr, SystemKind::Woris, SystemKind::Wobrx, SystemKind::Csr],
            seed_base: 0,
            output_dir: PathBuf::from("out"),
            system: SystemSection::default(),
            geometry: GeometryConfig::default(),
            solver: SolverOptions::default(),
            sweep: SweepSpec::None,
            convergence: ConvergenceSection::default(),
            ber_validation: BerValidationSection::default(),
            resolved: None,
        }
    }
}

/// Validated experiment with linear-unit system parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub file: ExperimentFile,
    pub system: SystemConfig,
    pub gamma_s: f64,
}

/// One point of the sweep axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub index: usize,
    pub value: f64,
    pub geometry: GeometryConfig,
    pub system: SystemConfig,
}

impl ExperimentConfig {
    pub fn new(mut file: ExperimentFile) -> Result<Self> {
        file.resolved = None;
        if file.n_realizations == 0 {
            return Err(Error::Config("n_realizations must be at least 1".into()));
        }
        if file.systems.is_empty() {
            return Err(Error::Config("systems must list at least one system".into()));
        }
        let mut seen = file.systems.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != file.systems.len() {
            return Err(Error::Config("systems lists a system twice".into()));
        }
        file.solver.validate()?;
        let system = file.system.resolve(file.system.n_pr)?;
        let gamma_s = csr_gamma_s(file.system.ber_target)?;
        let cfg = Self { file, system, gamma_s };
        match &cfg.file.sweep {
            SweepSpec::None => {}
            SweepSpec::Deployment { offsets, direction } => {
                if offsets.is_empty() {
                    return Err(Error::Config("deployment sweep needs at least one offset".into()));
                }
                if offsets.iter().chain(direction.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::Config("deployment sweep values must be finite".into()));
                }
            }
            SweepSpec::NPr { values } => {
                if values.is_empty() || values.contains(&0) {
                    return Err(Error::Config("n_pr sweep needs nonempty positive values".into()));
                }
            }
        }
        for p in cfg.points()? {
            p.geometry.validate(p.system.n_pr)?;
        }
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ExperimentFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::new(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn output_dir(&self) -> &Path {
        &self.file.output_dir
    }

    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.file.output_dir = dir.into();
        self
    }

    pub fn with_seed_base(mut self, seed: u64) -> Self {
        self.file.seed_base = seed;
        self
    }

    /// The config with defaults filled in and the linear-unit echo attached,
    /// in the input format.
    pub fn resolved_toml(&self) -> String {
        let mut file = self.file.clone();
        file.resolved = Some(ResolvedEcho {
            noise_power_w: self.system.noise_power,
            gamma_p: self.system.gamma_p,
            rate_target_bps_hz: self.system.rate_target(),
            lambda_s: self.system.lambda_s,
            gamma_s: self.gamma_s,
        });
        toml::to_string(&file).expect("config serializes")
    }

    pub fn points(&self) -> Result<Vec<SweepPoint>> {
        let base = &self.file.geometry;
        let n_pr = self.file.system.n_pr;
        Ok(match &self.file.sweep {
            SweepSpec::None => vec![SweepPoint {
                index: 0,
                value: 0.0,
                geometry: base.clone(),
                system: self.system.clone(),
            }],
            SweepSpec::Deployment { offsets, direction } => offsets
                .iter()
                .enumerate()
                .map(|(index, &off)| SweepPoint {
                    index,
                    value: off,
                    geometry: base.shifted(*direction, off, n_pr),
                    system: self.system.clone(),
                })
                .collect(),
            SweepSpec::NPr { values } => values
                .iter()
                .enumerate()
                .map(|(index, &k)| {
                    Ok(SweepPoint {
                        index,
                        value: k as f64,
                        geometry: base.clone(),
                        system: self.file.system.resolve(k)?,
                    })
                })
                .collect::<Result<_>>()?,
        })
    }

    fn csr_spec(&self) -> BaselineSpec {
        BaselineSpec {
            kind: SystemKind::Csr,
            gamma_s: self.gamma_s,
            include_brx_rate: true,
        }
    }
}

/// Realization seed; depends only on `(seed_base, index)`.
pub fn realization_seed(seed_base: u64, realization: u64) -> u64 {
    seed_base.wrapping_add(realization)
}

/// Solves one system on one channel draw.
pub fn solve_system(
    kind: SystemKind,
    ch: &ChannelSet,
    cfg: &SystemConfig,
    spec: &BaselineSpec,
    opts: &SolverOptions,
) -> Result<SolveResult> {
    match kind {
        SystemKind::IdSr => solver::solve(ch, cfg, opts),
        SystemKind::Woris => baselines::solve_woris(ch, cfg, opts),
        SystemKind::Wobrx => baselines::solve_wobrx(ch, cfg, opts),
        SystemKind::Csr => baselines::solve_csr(ch, cfg, spec, opts),
    }
}

/// Re-evaluates the constraints of `kind` at `(w, φ)` from scratch.
pub fn recheck(
    kind: SystemKind,
    ch: &ChannelSet,
    cfg: &SystemConfig,
    spec: &BaselineSpec,
    phi: &RisPhase,
    w: &Precoder,
) -> Result<FeasibilityReport> {
    Ok(match kind {
        SystemKind::IdSr => check_feasibility(ch, phi, w, cfg, FEAS_TOL),
        SystemKind::Woris => baselines::woris_problem(ch, cfg)?.feasibility(phi, w, FEAS_TOL),
        SystemKind::Wobrx => baselines::wobrx_problem(ch, cfg)?.feasibility(phi, w, FEAS_TOL),
        SystemKind::Csr => baselines::csr_problem(ch, cfg, spec)?.feasibility(phi, w, FEAS_TOL),
    })
}

/// One solved (point, realization, system) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub point: usize,
    pub value: f64,
    pub realization: u64,
    pub seed: u64,
    pub system: SystemKind,
    pub status: SolveStatus,
    pub feasible: bool,
    pub power_w: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub eq_violation: f64,
    pub feasibility_scale: f64,
    #[serde(skip)]
    pub wall_time_s: f64,
    #[serde(skip)]
    pub result: Option<SolveResult>,
}

impl RunRecord {
    pub fn usable(&self) -> bool {
        self.status == SolveStatus::Converged && self.feasible
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub point: usize,
    pub value: f64,
    pub system: SystemKind,
    pub n_runs: usize,
    pub n_usable: usize,
    /// Flagged infeasible before iterating.
    pub n_infeasible: usize,
    pub n_not_converged: usize,
    /// Converged but failed the final feasibility check.
    pub n_failed_check: usize,
    pub mean_power_w: f64,
    pub median_power_w: f64,
    pub mean_power_dbm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredSolution {
    pub point: usize,
    pub realization: u64,
    pub seed: u64,
    pub system: SystemKind,
    pub status: SolveStatus,
    pub feasible: bool,
    pub power_w: f64,
    #[serde(with = "solver::cvec_serde")]
    pub w: crate::model::CVector,
    #[serde(with = "solver::cvec_serde")]
    pub phi: crate::model::CVector,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
    pub dir: PathBuf,
}

/// Runs `f` on a pool of `threads` workers (`None`: rayon's default).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn solve_cell(
    cfg: &ExperimentConfig,
    point: &SweepPoint,
    realization: u64,
    keep_result: bool,
) -> Result<Vec<RunRecord>> {
    let seed = realization_seed(cfg.file.seed_base, realization);
    let ch = sample_channels(&point.geometry, &point.system, seed)?;
    let opts = SolverOptions {
        seed,
        ..cfg.file.solver.clone()
    };
    let spec = cfg.csr_spec();
    cfg.file
        .systems
        .iter()
        .map(|&kind| {
            let t = Instant::now();
            let res = solve_system(kind, &ch, &point.system, &spec, &opts)?;
            let wall = t.elapsed().as_secs_f64();
            Ok(RunRecord {
                point: point.index,
                value: point.value,
                realization,
                seed,
                system: kind,
                status: res.status,
                feasible: res.feasible,
                power_w: res.power,
                outer_iterations: res.outer_iterations,
                inner_iterations: res.inner_iterations,
                eq_violation: res.eq_violation,
                feasibility_scale: res.feasibility_scale,
                wall_time_s: wall,
                result: keep_result.then_some(res),
            })
        })
        .collect()
}

/// Solves every (point, realization, system) cell in parallel; the output
/// order is the job order.
pub fn collect_runs(cfg: &ExperimentConfig, keep_results: bool) -> Result<Vec<RunRecord>> {
    let points = cfg.points()?;
    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| (0..cfg.file.n_realizations).map(move |r| (p, r)))
        .collect();
    let nested: Vec<Vec<RunRecord>> = jobs
        .par_iter()
        .map(|&(p, r)| solve_cell(cfg, &points[p], r, keep_results))
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

fn median(sorted: &[f64]) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

/// Per (point, system) aggregates over usable runs.
pub fn summarize(cfg: &ExperimentConfig, records: &[RunRecord]) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for point in cfg.points()? {
        for &system in &cfg.file.systems {
            let cell: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.point == point.index && r.system == system)
                .collect();
            let mut powers: Vec<f64> = cell.iter().filter(|r| r.usable()).map(|r| r.power_w).collect();
            powers.sort_by(f64::total_cmp);
            let mean = if powers.is_empty() {
                f64::NAN
            } else {
                powers.iter().sum::<f64>() / powers.len() as f64
            };
            let count = |f: &dyn Fn(&RunRecord) -> bool| cell.iter().filter(|r| f(r)).count();
            rows.push(SummaryRow {
                point: point.index,
                value: point.value,
                system,
                n_runs: cell.len(),
                n_usable: powers.len(),
                n_infeasible: count(&|r| r.status == SolveStatus::Infeasible),
                n_not_converged: count(&|r| matches!(r.status, SolveStatus::MaxOuterReached | SolveStatus::Stalled)),
                n_failed_check: count(&|r| r.status == SolveStatus::Converged && !r.feasible),
                mean_power_w: mean,
                median_power_w: median(&powers),
                mean_power_dbm: linear_to_db(mean) + 30.0,
            });
        }
    }
    Ok(rows)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in rows {
        wtr.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

#[derive(Serialize)]
struct TimingRow {
    point: usize,
    realization: u64,
    system: SystemKind,
    wall_time_s: f64,
}

fn stored(records: &[RunRecord]) -> Vec<StoredSolution> {
    records
        .iter()
        .filter_map(|r| {
            r.result.as_ref().map(|res| StoredSolution {
                point: r.point,
                realization: r.realization,
                seed: r.seed,
                system: r.system,
                status: r.status,
                feasible: r.feasible,
                power_w: r.power_w,
                w: res.w.clone(),
                phi: res.phi.clone(),
            })
        })
        .collect()
}

fn write_run_outputs(cfg: &ExperimentConfig, dir: &Path, records: &[RunRecord]) -> Result<()> {
    write_file(&dir.join("resolved_config.toml"), cfg.resolved_toml())?;
    write_file(&dir.join("runs.csv"), csv_string(records)?)?;
    let json = serde_json::to_string_pretty(&stored(records)).map_err(|e| Error::Parse(e.to_string()))?;
    write_file(&dir.join("results.json"), json)?;
    let timing: Vec<TimingRow> = records
        .iter()
        .map(|r| TimingRow {
            point: r.point,
            realization: r.realization,
            system: r.system,
            wall_time_s: r.wall_time_s,
        })
        .collect();
    let json = serde_json::to_string_pretty(&timing).map_err(|e| Error::Parse(e.to_string()))?;
    write_file(&dir.join("timing.json"), json)
}

/// Full sweep: every point × realization × system.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let dir = cfg.output_dir().to_path_buf();
    ensure_dir(&dir)?;
    let records = collect_runs(cfg, true)?;
    let summary = summarize(cfg, &records)?;
    write_run_outputs(cfg, &dir, &records)?;
    write_file(&dir.join("summary.csv"), csv_string(&summary)?)?;
    Ok(ExperimentOutput { records, summary, dir })
}

/// Single instance (first sweep point, realization 0) for every selected
/// system, with traces.
pub fn run_solve(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let dir = cfg.output_dir().to_path_buf();
    ensure_dir(&dir)?;
    let point = cfg.points()?.remove(0);
    let records = solve_cell(cfg, &point, 0, true)?;
    for r in &records {
        let res = r.result.as_ref().expect("kept");
        write_file(&dir.join(format!("trace_{}.csv", r.system)), write_trace_csv(&res.trace))?;
    }
    let summary = summarize(cfg, &records)?;
    write_run_outputs(cfg, &dir, &records)?;
    write_file(&dir.join("summary.csv"), csv_string(&summary)?)?;
    Ok(ExperimentOutput { records, summary, dir })
}

#[derive(Debug, Clone)]
pub struct ConvergenceOutput {
    pub result: SolveResult,
    pub trace_path: PathBuf,
}

/// Solver trace of one realization at the first sweep point.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceOutput> {
    let dir = cfg.output_dir().to_path_buf();
    ensure_dir(&dir)?;
    let point = cfg.points()?.remove(0);
    let realization = cfg.file.convergence.realization;
    let seed = realization_seed(cfg.file.seed_base, realization);
    let ch = sample_channels(&point.geometry, &point.system, seed)?;
    let opts = SolverOptions {
        seed,
        ..cfg.file.solver.clone()
    };
    let kind = cfg.file.convergence.system;
    let result = solve_system(kind, &ch, &point.system, &cfg.csr_spec(), &opts)?;
    let trace_path = dir.join(format!("trace_{kind}.csv"));
    write_file(&dir.join("resolved_config.toml"), cfg.resolved_toml())?;
    write_file(&trace_path, result.trace_csv())?;
    Ok(ConvergenceOutput { result, trace_path })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BerValidationRow {
    pub ratio: f64,
    pub t_symbols: u32,
    pub closed_form: f64,
    pub monte_carlo: f64,
    pub trials: u64,
    pub errors: u64,
    /// Binomial standard deviation at the closed-form BER.
    pub sigma: f64,
    pub half_width_99: f64,
    pub pass: bool,
}

/// Closed form vs Monte Carlo over the configured (ratio, T) grid; a row
/// passes when the two agree within 3 binomial σ.
pub fn ber_validation_rows(section: &BerValidationSection, ber_target: f64) -> Result<Vec<BerValidationRow>> {
    let mut cells = Vec::new();
    for &t in &section.t_values {
        for &r in &section.ratios {
            cells.push((r, t));
        }
        if section.include_lambda_s && ber_target > 0.0 && ber_target < 0.5 {
            cells.push((solve_lambda_s(ber_target, t)?, t));
        }
    }
    cells
        .iter()
        .enumerate()
        .map(|(i, &(ratio, t))| {
            let closed = ratio_ber(ratio, t)?;
            let mc = simulate_energy_detection(1.0, ratio, t, section.trials, section.seed.wrapping_add(i as u64))?;
            let sigma = mc.binomial_sigma(closed);
            Ok(BerValidationRow {
                ratio,
                t_symbols: t,
                closed_form: closed,
                monte_carlo: mc.ber,
                trials: mc.trials,
                errors: mc.errors,
                sigma,
                half_width_99: mc.half_width,
                pass: (mc.ber - closed).abs() <= 3.0 * sigma,
            })
        })
        .collect()
}

pub fn run_ber_validation(cfg: &ExperimentConfig) -> Result<Vec<BerValidationRow>> {
    let dir = cfg.output_dir().to_path_buf();
    ensure_dir(&dir)?;
    let rows = ber_validation_rows(&cfg.file.ber_validation, cfg.file.system.ber_target)?;
    write_file(&dir.join("resolved_config.toml"), cfg.resolved_toml())?;
    write_file(&dir.join("ber_validation.csv"), csv_string(&rows)?)?;
    Ok(rows)
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checked: usize,
    pub passed: usize,
    pub failures: Vec<String>,
}

/// Reloads `results.json` from `dir`, regenerates each run's channels and
/// re-checks every run that was reported feasible.
pub fn verify_results(cfg: &ExperimentConfig, dir: &Path) -> Result<VerifyReport> {
    let path = dir.join("results.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let stored: Vec<StoredSolution> = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    let points = cfg.points()?;
    let spec = cfg.csr_spec();
    let mut report = VerifyReport::default();
    for s in stored.iter().filter(|s| s.feasible) {
        let point = points
            .get(s.point)
            .ok_or(Error::Index { index: s.point, limit: points.len() })?;
        let ch = sample_channels(&point.geometry, &point.system, s.seed)?;
        let phi = RisPhase::normalized(s.phi.clone());
        let w = Precoder::new(s.w.clone())?;
        let rep = recheck(s.system, &ch, &point.system, &spec, &phi, &w)?;
        report.checked += 1;
        if rep.all_pass() && (rep.power - s.power_w).abs() <= 1e-9 * s.power_w.max(1e-300) {
            report.passed += 1;
        } else {
            report.failures.push(format!(
                "point {} realization {} {}: worst residual {:.3e}",
                s.point,
                s.realization,
                s.system,
                rep.worst_residual()
            ));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> ExperimentConfig {
        let file = ExperimentFile {
            n_realizations: 3,
            output_dir: dir.to_path_buf(),
            system: SystemSection {
                n_ris: 8,
                ..SystemSection::default()
            },
            ..ExperimentFile::default()
        };
        ExperimentConfig::new(file).unwrap()
    }

    #[test]
    fn defaults_resolve_units() {
        let cfg = ExperimentConfig::new(ExperimentFile::default()).unwrap();
        assert!((cfg.system.noise_power - 1e-11).abs() < 1e-24);
        assert!((cfg.system.gamma_p - 10f64.powf(1.5)).abs() < 1e-12);
        assert!((cfg.gamma_s - 1.000_478_153_877_930_3).abs() < 1e-9);
    }

    #[test]
    fn resolved_dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.file.sweep = SweepSpec::Deployment {
            offsets: vec![-5.0, 0.0, 5.0],
            direction: [0.0, 1.0, 0.0],
        };
        let cfg = ExperimentConfig::new(cfg.file).unwrap();
        let text = cfg.resolved_toml();
        assert!(text.contains("[resolved]"));
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ExperimentConfig::from_toml_str("n_realizations = 0").is_err());
        assert!(ExperimentConfig::from_toml_str("systems = []").is_err());
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("[sweep]\naxis = \"n_pr\"\nvalues = []").is_err());
        assert!(ExperimentConfig::from_toml_str("[sweep]\naxis = \"deployment\"\noffsets = []").is_err());
        assert!(ExperimentConfig::from_toml_str("[geometry]\nprs = [[30.0, 0.0, 1.5]]").is_err());
        let ok = ExperimentConfig::from_toml_str("systems = [\"WORIS\", \"CSR\"]\n[system]\ngamma_p_db = 10.0").unwrap();
        assert_eq!(ok.file.systems, vec![SystemKind::Woris, SystemKind::Csr]);
    }

    #[test]
    fn n_pr_sweep_points() {
        let cfg = ExperimentConfig::from_toml_str("[sweep]\naxis = \"n_pr\"\nvalues = [1, 3]").unwrap();
        let pts = cfg.points().unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1].system.n_pr, 3);
        assert_eq!(pts[1].value, 3.0);
    }

    #[test]
    fn woris_single_pr_pipeline_matches_closed_form() {
        let dir = tempfile::tempdir().unwrap();
        let file = ExperimentFile {
            n_realizations: 1,
            systems: vec![SystemKind::Woris],
            output_dir: dir.path().to_path_buf(),
            system: SystemSection {
                n_pr: 1,
                n_ris: 4,
                ..SystemSection::default()
            },
            ..ExperimentFile::default()
        };
        let cfg = ExperimentConfig::new(file).unwrap();
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.summary.len(), 1);
        let pt = &cfg.points().unwrap()[0];
        let ch = sample_channels(&pt.geometry, &pt.system, 0).unwrap();
        let want = pt.system.noise_power * pt.system.gamma_p / ch.direct(1).norm_squared();
        let got = out.summary[0].mean_power_w;
        assert!((got - want).abs() <= 1e-6 * want, "{got} vs {want}");
        let text = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn parallel_and_serial_agree() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let serial = with_threads(Some(1), || collect_runs(&cfg, false)).unwrap().unwrap();
        let parallel = with_threads(Some(4), || collect_runs(&cfg, false)).unwrap().unwrap();
        let a = csv_string(&summarize(&cfg, &serial).unwrap()).unwrap();
        let b = csv_string(&summarize(&cfg, &parallel).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(csv_string(&serial).unwrap(), csv_string(&parallel).unwrap());
    }

    #[test]
    fn results_dump_reverifies() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let out = run_experiment(&cfg).unwrap();
        let report = verify_results(&cfg, &out.dir).unwrap();
        let feasible = out.records.iter().filter(|r| r.feasible).count();
        assert_eq!(report.checked, feasible);
        assert_eq!(report.passed, report.checked, "{:?}", report.failures);
        assert!(feasible > 0);
    }

    #[test]
    fn ber_validation_rows_pass() {
        let section = BerValidationSection {
            ratios: vec![1.0, 2.0],
            t_values: vec![10],
            trials: 200_000,
            ..BerValidationSection::default()
        };
        let rows = ber_validation_rows(&section, 0.0786).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].closed_form, 0.5);
        assert!(rows.iter().all(|r| r.pass), "{rows:?}");
        assert!((rows[2].closed_form - 0.0786).abs() < 1e-9);
    }

    #[test]
    fn convergence_trace_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let out = run_convergence(&cfg).unwrap();
        let text = fs::read_to_string(&out.trace_path).unwrap();
        assert_eq!(text.lines().count(), out.result.trace.len() + 1);
        assert!(text.starts_with("outer_iter,inner_iter,rho,penalty_objective,transmit_power,eq_violation_inf"));
    }

    #[test]
    fn median_cases() {
        assert!(median(&[]).is_nan());
        assert_eq!(median(&[1.0]), 1.0);
        assert_eq!(median(&[1.0, 3.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 9.0]), 2.0);
    }
}
