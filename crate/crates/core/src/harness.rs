//! Runs ensembles: configuration files, single points, steady-state
//! detection, (L, ζ) sweeps, oracle comparisons and classical runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{first_non_finite, Dynamics, EngineError, FieldEnsemble, NoiseProcess, Stepper};
use crate::model::{
    derive_seed, validate, ChainParams, InitialCondition, IntegrationControls, ValidatedConfig, Violations,
    DEFAULT_RING_RADIUS,
};
use crate::observables::{
    self, site_table, Estimate, Grid2D, MomentAccumulator, ObservableError, SiteRow, WignerHistogram,
};
use crate::oracle::{self, ExpectationSeries, FockConfig, McwfOptions, OracleError};
use crate::otoc::{self, LateTimeAveraging, OtocError, OtocSeries, OtocSpec};
use crate::thermofit::{self, FitError, MaxwellBoltzmann, ThermoRow};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config parse: {0}")]
    ConfigParse(String),
    #[error("invalid config: {0}")]
    Validation(#[from] Violations),
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Observable(#[from] ObservableError),
    #[error(transparent)]
    Otoc(#[from] OtocError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("no steady state within t = {t_end}: block means still drifting")]
    NotSteadyWithinBudget { t_end: f64 },
    #[error("series spans {blocks} blocks, need at least 2")]
    SeriesTooShort { blocks: usize },
    #[error("sweep has an empty axis")]
    EmptySweep,
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

impl HarnessError {
    /// Pipeline stage the error belongs to.
    pub fn stage(&self) -> &'static str {
        match self {
            HarnessError::ConfigParse(_) => "config",
            HarnessError::Validation(_) | HarnessError::Invalid { .. } | HarnessError::EmptySweep => "validate",
            HarnessError::Engine(_) => "engine",
            HarnessError::Observable(_) => "observables",
            HarnessError::Otoc(_) => "otoc",
            HarnessError::Fit(_) => "thermofit",
            HarnessError::Oracle(_) => "oracle",
            HarnessError::NotSteadyWithinBudget { .. } | HarnessError::SeriesTooShort { .. } => "harness",
            HarnessError::Io(_) => "io",
        }
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            HarnessError::ConfigParse(_) => "ConfigParse",
            HarnessError::Validation(_) | HarnessError::Invalid { .. } => "Validation",
            HarnessError::EmptySweep => "EmptySweep",
            HarnessError::Engine(EngineError::NonFiniteField { .. }) => "NonFiniteField",
            HarnessError::Engine(EngineError::PerturbSiteOutOfRange { .. }) => "PerturbSiteOutOfRange",
            HarnessError::Engine(EngineError::Checkpoint(_)) => "Checkpoint",
            HarnessError::Observable(_) => "Observable",
            HarnessError::Otoc(OtocError::NotSteady) => "NotSteady",
            HarnessError::Otoc(_) => "Otoc",
            HarnessError::Fit(_) => "Fit",
            HarnessError::Oracle(OracleError::CutoffLeakage { .. }) => "CutoffLeakage",
            HarnessError::Oracle(OracleError::DimensionCap { .. }) => "DimensionCap",
            HarnessError::Oracle(_) => "Oracle",
            HarnessError::NotSteadyWithinBudget { .. } => "NotSteadyWithinBudget",
            HarnessError::SeriesTooShort { .. } => "SeriesTooShort",
            HarnessError::Io(_) => "Io",
        }
    }
}

/// Sites selected for histograms and fits (1-based in files).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SiteSelection {
    Keyword(SiteKeyword),
    List(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKeyword {
    /// Sites 1, L/2 and L.
    Edges,
    All,
    None,
}

impl SiteSelection {
    /// 0-based, sorted, deduplicated.
    pub fn resolve(&self, sites: usize) -> Result<Vec<usize>, HarnessError> {
        let mut v = match self {
            SiteSelection::Keyword(SiteKeyword::Edges) => monitor_sites(sites),
            SiteSelection::Keyword(SiteKeyword::All) => (0..sites).collect(),
            SiteSelection::Keyword(SiteKeyword::None) => Vec::new(),
            SiteSelection::List(l) => {
                if let Some(bad) = l.iter().find(|&&s| s == 0 || s > sites) {
                    return Err(HarnessError::Invalid {
                        field: "site selection",
                        reason: format!("site {bad} outside 1..={sites}"),
                    });
                }
                l.iter().map(|s| s - 1).collect()
            }
        };
        v.sort_unstable();
        v.dedup();
        Ok(v)
    }
}

/// 0-based sites 1, L/2 and L.
pub fn monitor_sites(sites: usize) -> Vec<usize> {
    let mut v = vec![0, (sites / 2).max(1) - 1, sites - 1];
    v.dedup();
    v.sort_unstable();
    v.dedup();
    v
}

fn default_edges() -> SiteSelection {
    SiteSelection::Keyword(SiteKeyword::Edges)
}
fn default_mb_sites() -> SiteSelection {
    SiteSelection::Keyword(SiteKeyword::None)
}
fn default_bins() -> usize {
    101
}
fn default_m_max() -> usize {
    3
}
fn default_one() -> usize {
    1
}
fn default_true() -> bool {
    true
}

/// What a point writes besides the per-site table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Sites with Wigner histograms.
    #[serde(default = "default_edges")]
    pub wigner_sites: SiteSelection,
    /// Bins per axis of every histogram.
    #[serde(default = "default_bins")]
    pub wigner_bins: usize,
    /// Thermodynamic fits at every histogram site.
    #[serde(default = "default_true")]
    pub thermo: bool,
    /// Sites with a Maxwell-Boltzmann check of the momentum quadrature.
    #[serde(default = "default_mb_sites")]
    pub mb_sites: SiteSelection,
    /// Highest circular moment.
    #[serde(default = "default_m_max")]
    pub m_max: usize,
    /// Reference site of `g⁽¹⁾` (1-based).
    #[serde(default = "default_one")]
    pub g1_reference: usize,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            wigner_sites: default_edges(),
            wigner_bins: default_bins(),
            thermo: true,
            mb_sites: default_mb_sites(),
            m_max: default_m_max(),
            g1_reference: 1,
        }
    }
}

fn default_t_block() -> f64 {
    10.0
}
fn default_n_se() -> f64 {
    3.0
}

/// Block-mean steadiness test on `n` at sites 1, L/2 and L.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteadyCriterion {
    #[serde(default = "default_t_block")]
    pub t_block: f64,
    /// Allowed difference of consecutive block means in combined standard errors.
    #[serde(default = "default_n_se")]
    pub n_se: f64,
}

impl Default for SteadyCriterion {
    fn default() -> Self {
        SteadyCriterion {
            t_block: default_t_block(),
            n_se: default_n_se(),
        }
    }
}

fn default_epsilon() -> f64 {
    crate::engine::DEFAULT_EPSILON
}

/// OTOC requests of a point, run on the ensemble at the end of the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OtocConfig {
    /// Perturbed site (1-based).
    #[serde(default = "default_one")]
    pub perturb_site: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Full `D(τ)` on `0, d_tau, …, tau_max` when set.
    #[serde(default)]
    pub tau_max: Option<f64>,
    #[serde(default)]
    pub d_tau: Option<f64>,
    #[serde(default = "default_one")]
    pub n_starts: usize,
    /// Late-time value `D(τ → ∞)` when set.
    #[serde(default)]
    pub late: Option<LateTimeAveraging>,
}

fn default_cutoff() -> usize {
    56
}
fn default_oracle_traj() -> usize {
    300
}
fn default_t_max() -> f64 {
    40.0
}
fn default_checkpoints() -> usize {
    20
}
fn default_conv_traj() -> usize {
    2
}
fn default_conv_tol() -> f64 {
    5e-3
}

/// Exact reference run for L ≤ 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Fock levels per site.
    #[serde(default = "default_cutoff")]
    pub cutoff: usize,
    #[serde(default = "default_oracle_traj")]
    pub n_traj: usize,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    /// Equally spaced comparison times in `(0, t_max]`.
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
    /// Trajectories of the cutoff doubling test; 0 skips it.
    #[serde(default = "default_conv_traj")]
    pub convergence_traj: usize,
    #[serde(default = "default_conv_tol")]
    pub convergence_tolerance: f64,
    /// Largest inner step of the jump integrator.
    #[serde(default)]
    pub max_step: Option<f64>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            cutoff: default_cutoff(),
            n_traj: default_oracle_traj(),
            t_max: default_t_max(),
            checkpoints: default_checkpoints(),
            convergence_traj: default_conv_traj(),
            convergence_tolerance: default_conv_tol(),
            max_step: None,
        }
    }
}

impl OracleConfig {
    /// `0, t_max/k, …, t_max`.
    pub fn time_grid(&self) -> Vec<f64> {
        (0..=self.checkpoints)
            .map(|i| self.t_max * i as f64 / self.checkpoints as f64)
            .collect()
    }
}

/// Classical run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GpConfig {
    /// Initial amplitude on every site; by default the ring radius for
    /// n ≥ 3 and 10⁻² otherwise.
    #[serde(default)]
    pub amplitude: Option<f64>,
}

/// Replaces budgets at matching sweep points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointOverride {
    #[serde(default, alias = "L")]
    pub sites: Option<usize>,
    #[serde(default, alias = "zeta")]
    pub drive: Option<f64>,
    #[serde(default)]
    pub n_traj: Option<usize>,
    #[serde(default)]
    pub t_transient: Option<f64>,
    #[serde(default)]
    pub t_window: Option<f64>,
}

/// Axes of a phase-diagram sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(alias = "L")]
    pub sites: Vec<usize>,
    #[serde(alias = "zeta")]
    pub drives: Vec<f64>,
    #[serde(default)]
    pub overrides: Vec<PointOverride>,
}

/// Complete configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub chain: ChainParams,
    #[serde(default)]
    pub initial: Option<InitialCondition>,
    pub integration: IntegrationControls,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub steady: SteadyCriterion,
    #[serde(default)]
    pub otoc: Option<OtocConfig>,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
    #[serde(default)]
    pub gp: Option<GpConfig>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, HarnessError> {
        toml::from_str(s).map_err(|e| HarnessError::ConfigParse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::ConfigParse(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Fills every default (initial state policy included) and validates.
    pub fn resolved(&self) -> Result<RunConfig, HarnessError> {
        let mut c = self.clone();
        if c.initial.is_none() {
            c.initial = Some(InitialCondition::default_for(c.chain.photon_order));
        }
        c.validated()?;
        let l = c.chain.sites;
        c.output.wigner_sites.resolve(l)?;
        c.output.mb_sites.resolve(l)?;
        if c.output.g1_reference == 0 || c.output.g1_reference > l {
            return Err(HarnessError::Invalid {
                field: "output.g1_reference",
                reason: format!("{} outside 1..={l}", c.output.g1_reference),
            });
        }
        if c.output.wigner_bins < 3 {
            return Err(HarnessError::Invalid {
                field: "output.wigner_bins",
                reason: "need at least 3".into(),
            });
        }
        if c.integration.master_seed > i64::MAX as u64 {
            return Err(HarnessError::Invalid {
                field: "integration.master_seed",
                reason: "must be below 2^63".into(),
            });
        }
        if !(c.steady.t_block > 0.0) {
            return Err(HarnessError::Invalid {
                field: "steady.t_block",
                reason: "must be positive".into(),
            });
        }
        if let Some(o) = &c.otoc {
            if o.perturb_site == 0 || o.perturb_site > l {
                return Err(HarnessError::Invalid {
                    field: "otoc.perturb_site",
                    reason: format!("{} outside 1..={l}", o.perturb_site),
                });
            }
            if o.tau_max.is_some() != o.d_tau.is_some() {
                return Err(HarnessError::Invalid {
                    field: "otoc",
                    reason: "tau_max and d_tau go together".into(),
                });
            }
        }
        if let Some(s) = &c.sweep {
            if s.sites.is_empty() || s.drives.is_empty() {
                return Err(HarnessError::EmptySweep);
            }
        }
        Ok(c)
    }

    /// Validated physical and numerical parameters.
    pub fn validated(&self) -> Result<ValidatedConfig, HarnessError> {
        let initial = self
            .initial
            .clone()
            .unwrap_or_else(|| InitialCondition::default_for(self.chain.photon_order));
        Ok(validate(self.chain.clone(), initial, self.integration.clone())?)
    }

    /// TOML text of the configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON of the resolved configuration.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Per-trajectory photon numbers `|α|² − 1/2` at monitored sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorSeries {
    pub times: Vec<f64>,
    /// Monitored sites, 0-based.
    pub sites: Vec<usize>,
    /// `values[traj][time * sites.len() + k]`.
    pub values: Vec<Vec<f64>>,
}

impl MonitorSeries {
    /// Ensemble mean `[time][k]`.
    pub fn mean(&self) -> Vec<Vec<f64>> {
        let k = self.sites.len();
        let n = self.values.len() as f64;
        (0..self.times.len())
            .map(|i| (0..k).map(|s| self.values.iter().map(|v| v[i * k + s]).sum::<f64>() / n).collect())
            .collect()
    }

    /// CSV `t, n_<site>…` of ensemble means.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t[1/gamma]".to_string()];
        header.extend(self.sites.iter().map(|s| format!("n_{}", s + 1)));
        wtr.write_record(&header)?;
        for (t, row) in self.times.iter().zip(self.mean()) {
            let mut rec = vec![format!("{t:.6}")];
            rec.extend(row.iter().map(|v| format!("{v:.8e}")));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// First time at which two consecutive blocks of length `t_block` have means
/// agreeing within `n_se` combined standard errors at every monitored site.
/// The returned time is the boundary between the two blocks. Standard errors
/// come from per-trajectory block means, or from the samples inside a block
/// when there is a single trajectory.
pub fn detect_steady(series: &MonitorSeries, criterion: &SteadyCriterion) -> Result<f64, HarnessError> {
    let times = &series.times;
    let Some(&t0) = times.first() else {
        return Err(HarnessError::SeriesTooShort { blocks: 0 });
    };
    let t_end = *times.last().unwrap();
    let tb = criterion.t_block;
    let blocks = ((t_end - t0) / tb + 1e-9).floor() as usize;
    if blocks < 2 {
        return Err(HarnessError::SeriesTooShort { blocks });
    }
    let k = series.sites.len();
    let block_of = |t: f64| ((t - t0) / tb + 1e-9).floor() as usize;
    let n_traj = series.values.len();
    // stats[b][s] = (mean, se)
    let mut stats = vec![vec![(0.0, 0.0); k]; blocks];
    for (b, row) in stats.iter_mut().enumerate() {
        let idx: Vec<usize> = (0..times.len()).filter(|&i| block_of(times[i]) == b).collect();
        for (s, cell) in row.iter_mut().enumerate() {
            if n_traj >= 2 {
                let means: Vec<f64> = series
                    .values
                    .iter()
                    .map(|v| idx.iter().map(|&i| v[i * k + s]).sum::<f64>() / idx.len() as f64)
                    .collect();
                let nf = n_traj as f64;
                let m = means.iter().sum::<f64>() / nf;
                let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (nf - 1.0);
                *cell = (m, (var / nf).sqrt());
            } else {
                let xs: Vec<f64> = idx.iter().map(|&i| series.values[0][i * k + s]).collect();
                let nf = xs.len() as f64;
                let m = xs.iter().sum::<f64>() / nf;
                let var = if xs.len() > 1 {
                    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (nf - 1.0)
                } else {
                    0.0
                };
                *cell = (m, (var / nf).sqrt());
            }
        }
    }
    for b in 0..blocks - 1 {
        let ok = (0..k).all(|s| {
            let (m1, e1) = stats[b][s];
            let (m2, e2) = stats[b + 1][s];
            (m1 - m2).abs() <= criterion.n_se * (e1 * e1 + e2 * e2).sqrt()
        });
        if ok {
            return Ok(t0 + (b + 1) as f64 * tb);
        }
    }
    Err(HarnessError::NotSteadyWithinBudget { t_end })
}

/// Outcome of steady-state detection for a point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyReport {
    /// First time passing the block test, if any.
    pub steady_time: Option<f64>,
    /// Set when steadiness came after the averaging window began or never.
    pub flagged: bool,
    pub criterion: SteadyCriterion,
    pub method: String,
}

/// Everything a point produces.
#[derive(Debug, Clone)]
pub struct PointResult {
    pub config: RunConfig,
    pub hash: String,
    pub rows: Vec<SiteRow>,
    pub accumulator: MomentAccumulator,
    /// `(site, histogram)`, sites 0-based.
    pub wigner: Vec<(usize, WignerHistogram)>,
    pub thermo: Vec<ThermoRow>,
    pub maxwell_boltzmann: Vec<(usize, Result<MaxwellBoltzmann, FitError>)>,
    pub monitor: MonitorSeries,
    pub steady: SteadyReport,
    pub otoc: Option<OtocSeries>,
    /// `D_{k,ℓ}(τ → ∞)` per site.
    pub late_otoc: Option<Vec<f64>>,
    pub final_state: FieldEnsemble,
    pub flags: Vec<String>,
    pub wall_time: f64,
}

impl PointResult {
    /// Row of site `site` (0-based).
    pub fn row(&self, site: usize) -> &SiteRow {
        &self.rows[site]
    }
}

struct Trajectory {
    fields: Vec<Complex64>,
    noise: NoiseProcess,
    monitor: Vec<f64>,
}

struct WindowOutput {
    acc: MomentAccumulator,
    counts: Vec<Vec<u32>>,
    momenta: Vec<Vec<f64>>,
}

/// Grid symmetric about the origin covering the ensemble values of one site
/// with margin.
fn site_grid(values: &[Complex64], bins: usize) -> Grid2D {
    let n = values.len().max(1) as f64;
    let rms = (values.iter().map(|a| a.norm_sqr()).sum::<f64>() / n).sqrt();
    let max = values.iter().map(|a| a.re.abs().max(a.im.abs())).fold(0.0, f64::max);
    let half = (1.5 * max).max(4.0 * rms).max(3.0);
    Grid2D::square(half, bins)
}

fn check_trajectory(fields: &[Complex64], traj: usize, time: f64) -> Result<(), EngineError> {
    match first_non_finite(fields) {
        Some(site) => Err(EngineError::NonFiniteField { traj, site, time }),
        None => Ok(()),
    }
}

/// Burns in for `t_transient`, then averages over `t_window`, sampling every
/// `sample_interval`. A single non-finite trajectory fails the point.
pub fn run_point(config: &RunConfig) -> Result<PointResult, HarnessError> {
    let start = Instant::now();
    let config = config.resolved()?;
    let hash = config.hash();
    let vc = config.validated()?;
    let params = vc.params().clone();
    let ctrl = vc.controls().clone();
    let l = params.sites;
    let dt = ctrl.dt;
    let stride = ((ctrl.sample_interval / dt).round() as usize).max(1);
    let n_tr = ctrl.steps_for(ctrl.t_transient);
    let n_total = n_tr + ctrl.steps_for(ctrl.t_window);
    let mon_sites = monitor_sites(l);
    let k = mon_sites.len();
    let hist_sites = config.output.wigner_sites.resolve(l)?;
    let mb_sites = config.output.mb_sites.resolve(l)?;
    let m_max = config.output.m_max;
    let reference = config.output.g1_reference - 1;
    let stepper = Stepper::new(&params, Dynamics::Twa, dt);

    let (ens, noises) = FieldEnsemble::sample(vc.initial(), l, ctrl.n_traj, ctrl.master_seed);
    let mut trajs: Vec<Trajectory> = noises
        .into_iter()
        .enumerate()
        .map(|(i, noise)| Trajectory {
            fields: ens.trajectory(i).to_vec(),
            noise,
            monitor: Vec::with_capacity((n_total / stride + 1) * k),
        })
        .collect();

    let record = |t: &mut Trajectory| {
        for &s in &mon_sites {
            t.monitor.push(t.fields[s].norm_sqr() - 0.5);
        }
    };

    // Transient.
    trajs
        .par_iter_mut()
        .enumerate()
        .map(|(i, t)| {
            let mut st = stepper.clone();
            for step in 0..n_tr {
                if step % stride == 0 {
                    record(t);
                }
                st.step_with(&mut t.fields, &mut t.noise);
                check_trajectory(&t.fields, i, (step + 1) as f64 * dt)?;
            }
            Ok(())
        })
        .collect::<Result<Vec<()>, EngineError>>()?;

    let grids: Vec<Grid2D> = hist_sites
        .iter()
        .map(|&s| {
            let v: Vec<Complex64> = trajs.iter().map(|t| t.fields[s]).collect();
            site_grid(&v, config.output.wigner_bins)
        })
        .collect();

    // Window, in index-ordered chunks so the reduction is deterministic.
    let mut acc = MomentAccumulator::with_reference(l, m_max, reference);
    let mut counts: Vec<Vec<u64>> = grids.iter().map(|g| vec![0; g.len()]).collect();
    let mut momenta: Vec<Vec<f64>> = vec![Vec::new(); mb_sites.len()];
    let mut total_samples = 0usize;
    let chunk = 4 * rayon::current_num_threads();
    for (c, block) in trajs.chunks_mut(chunk).enumerate() {
        let outs: Vec<WindowOutput> = block
            .par_iter_mut()
            .enumerate()
            .map(|(j, t)| {
                let idx = c * chunk + j;
                let mut st = stepper.clone();
                let mut out = WindowOutput {
                    acc: MomentAccumulator::with_reference(l, m_max, reference),
                    counts: grids.iter().map(|g| vec![0; g.len()]).collect(),
                    momenta: vec![Vec::new(); mb_sites.len()],
                };
                out.acc.begin_block();
                for step in n_tr..=n_total {
                    if step % stride == 0 {
                        record(t);
                        if step < n_total || n_total == n_tr {
                            out.acc.push(&t.fields);
                            for (h, (&s, g)) in hist_sites.iter().zip(&grids).enumerate() {
                                if let Some(cell) = g.index_of(t.fields[s]) {
                                    out.counts[h][cell] += 1;
                                }
                            }
                            for (m, &s) in mb_sites.iter().enumerate() {
                                out.momenta[m].push(std::f64::consts::SQRT_2 * t.fields[s].im);
                            }
                        }
                    }
                    if step < n_total {
                        st.step_with(&mut t.fields, &mut t.noise);
                        check_trajectory(&t.fields, idx, (step + 1) as f64 * dt)?;
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>, EngineError>>()?;
        for o in outs {
            total_samples += o.acc.count(0) as usize;
            acc.merge(&o.acc)?;
            for (tot, part) in counts.iter_mut().zip(&o.counts) {
                for (a, b) in tot.iter_mut().zip(part) {
                    *a += *b as u64;
                }
            }
            for (tot, part) in momenta.iter_mut().zip(o.momenta) {
                tot.extend(part);
            }
        }
    }

    let rows = site_table(&acc, reference, params.detuning)?;
    let mut flags = Vec::new();
    let mut wigner = Vec::new();
    for ((&s, g), c) in hist_sites.iter().zip(&grids).zip(&counts) {
        let c: Vec<f64> = c.iter().map(|&x| x as f64).collect();
        match WignerHistogram::from_counts(*g, &c, total_samples) {
            Ok(h) => {
                if h.coverage() < 0.99 {
                    flags.push(format!("site {}: histogram covers {:.4} of samples", s + 1, h.coverage()));
                }
                wigner.push((s, h));
            }
            Err(e) => flags.push(format!("site {}: no histogram ({e})", s + 1)),
        }
    }
    let thermo: Vec<ThermoRow> = if config.output.thermo {
        wigner
            .par_iter()
            .map(|(s, h)| thermofit::fit_site(s + 1, h, params.kerr, Some(rows[*s].t_eq)))
            .collect()
    } else {
        Vec::new()
    };
    let maxwell_boltzmann = mb_sites
        .iter()
        .zip(&momenta)
        .map(|(&s, p)| (s, thermofit::maxwell_boltzmann_check(p, params.detuning)))
        .collect();

    let times: Vec<f64> = (0..=n_total).step_by(stride).map(|s| s as f64 * dt).collect();
    let final_fields: Vec<Vec<Complex64>> = trajs.iter().map(|t| t.fields.clone()).collect();
    let mut noises: Vec<NoiseProcess> = Vec::with_capacity(trajs.len());
    let mut monitor_values = Vec::with_capacity(trajs.len());
    for t in trajs {
        noises.push(t.noise);
        monitor_values.push(t.monitor);
    }
    let monitor = MonitorSeries {
        times,
        sites: mon_sites,
        values: monitor_values,
    };
    let steady_time = detect_steady(&monitor, &config.steady).ok();
    let flagged = steady_time.map_or(true, |t| t > ctrl.t_transient + 1e-9);
    if flagged {
        flags.push(match steady_time {
            Some(t) => format!("steady only from t = {t}, after the window began"),
            None => "no steady state detected".to_string(),
        });
    }
    let steady = SteadyReport {
        steady_time,
        flagged,
        criterion: config.steady,
        method: "consecutive block means of n at sites 1, L/2, L within n_se combined standard errors".into(),
    };

    let final_state = FieldEnsemble::from_trajectories(l, final_fields, n_total as f64 * dt);
    let mut otoc_series = None;
    let mut late_otoc = None;
    if let Some(o) = &config.otoc {
        let site = o.perturb_site - 1;
        let is_steady = steady_time.is_some();
        if !is_steady {
            flags.push("OTOC skipped: no steady state".into());
        } else {
            if let (Some(tau_max), Some(d_tau)) = (o.tau_max, o.d_tau) {
                let mut spec = OtocSpec::uniform(site, o.epsilon, tau_max, d_tau);
                spec.n_starts = o.n_starts;
                let mut nz = noises.clone();
                otoc_series = Some(otoc::compute_otoc(&final_state, &mut nz, &spec, &params, Dynamics::Twa, dt, true)?);
            }
            if let Some(mode) = o.late {
                let mut nz = noises.clone();
                late_otoc = Some(otoc::late_time_otoc(&final_state, &mut nz, site, o.epsilon, mode, &params, dt)?);
            }
        }
    }

    Ok(PointResult {
        config,
        hash,
        rows,
        accumulator: acc,
        wigner,
        thermo,
        maxwell_boltzmann,
        monitor,
        steady,
        otoc: otoc_series,
        late_otoc,
        final_state,
        flags,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Key scalars of a point, also stored as its completion marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub sites: usize,
    pub drive: f64,
    pub photon_order: u32,
    pub hash: String,
    pub n_last: Estimate,
    pub dn_last: Estimate,
    pub n_mid: Estimate,
    pub dn_mid: Estimate,
    /// `D_{k,L}(∞)` when computed.
    pub otoc_last: Option<f64>,
    pub steady_time: Option<f64>,
    pub flags: Vec<String>,
}

impl PointResult {
    /// Velocity and rate fits over every unperturbed site.
    pub fn chaos(&self) -> Option<otoc::ChaosDiagnostics> {
        self.otoc.as_ref().map(|o| {
            let sites: Vec<usize> = (0..o.sites()).filter(|&l| l != o.perturb_site).collect();
            otoc::ChaosDiagnostics::from_series(o, &sites)
        })
    }

    pub fn summary(&self) -> PointSummary {
        let l = self.config.chain.sites;
        let mid = (l / 2).max(1) - 1;
        PointSummary {
            sites: l,
            drive: self.config.chain.drive,
            photon_order: self.config.chain.photon_order,
            hash: self.hash.clone(),
            n_last: self.rows[l - 1].n,
            dn_last: self.rows[l - 1].dn,
            n_mid: self.rows[mid].n,
            dn_mid: self.rows[mid].dn,
            otoc_last: self.late_otoc.as_ref().map(|d| d[l - 1]),
            steady_time: self.steady.steady_time,
            flags: self.flags.clone(),
        }
    }

    /// Writes tables, histograms, fits and the resolved config into `dir`.
    /// Returns the written file names.
    pub fn write(&self, dir: &Path) -> Result<Vec<String>, HarnessError> {
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        let mut put = |name: &str| {
            files.push(name.to_string());
            dir.join(name)
        };
        fs::write(put("config.resolved.toml"), self.config.to_toml())?;
        observables::write_site_table(&self.rows, fs::File::create(put("sites.csv"))?)?;
        self.monitor.write_csv(fs::File::create(put("monitor.csv"))?)?;
        for (s, h) in &self.wigner {
            h.write_csv(fs::File::create(put(&format!("wigner_site{}.csv", s + 1)))?)?;
            fs::write(
                put(&format!("wigner_site{}.json", s + 1)),
                serde_json::to_string_pretty(&h.metadata(*s)).unwrap(),
            )?;
        }
        if !self.thermo.is_empty() {
            thermofit::write_thermo_profile(&self.thermo, fs::File::create(put("thermo.csv"))?)?;
        }
        if let Some(o) = &self.otoc {
            o.write_csv(fs::File::create(put("otoc.csv"))?)?;
            fs::write(put("otoc_fit.json"), serde_json::to_string_pretty(&self.chaos().unwrap()).unwrap())?;
        }
        if let Some(d) = &self.late_otoc {
            let mut w = csv::Writer::from_path(put("otoc_late.csv"))?;
            w.write_record(["site", "D_inf"])?;
            for (i, v) in d.iter().enumerate() {
                w.write_record(&[(i + 1).to_string(), format!("{v:.10e}")])?;
            }
            w.flush()?;
        }
        let mb: Vec<serde_json::Value> = self
            .maxwell_boltzmann
            .iter()
            .map(|(s, r)| match r {
                Ok(m) => serde_json::json!({"site": s + 1, "temperature": m.temperature, "goodness": m.goodness, "degenerate": m.degenerate}),
                Err(e) => serde_json::json!({"site": s + 1, "error": e.to_string()}),
            })
            .collect();
        let summary = serde_json::json!({
            "summary": self.summary(),
            "steady": self.steady,
            "maxwell_boltzmann": mb,
            "wall_time_s": self.wall_time,
        });
        fs::write(put("summary.json"), serde_json::to_string_pretty(&summary).unwrap())?;
        Ok(files)
    }
}

/// Reads back the histogram of `site` (1-based) written by [`PointResult::write`].
pub fn read_histogram(dir: &Path, site: usize) -> Result<WignerHistogram, HarnessError> {
    #[derive(Deserialize)]
    struct Meta {
        grid: Grid2D,
        total_samples: usize,
        in_grid: usize,
    }
    let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join(format!("wigner_site{site}.json")))?)
        .map_err(|e| HarnessError::Io(e.to_string()))?;
    let mut rdr = csv::Reader::from_path(dir.join(format!("wigner_site{site}.csv")))?;
    let mut weights = Vec::with_capacity(meta.grid.len());
    for rec in rdr.records() {
        let rec = rec?;
        for v in rec.iter().skip(1) {
            weights.push(v.parse::<f64>().map_err(|e| HarnessError::Io(e.to_string()))?);
        }
    }
    if weights.len() != meta.grid.len() {
        return Err(HarnessError::Io(format!("site {site}: {} weights for {} cells", weights.len(), meta.grid.len())));
    }
    Ok(WignerHistogram {
        grid: meta.grid,
        weights,
        total_samples: meta.total_samples,
        in_grid: meta.in_grid,
    })
}

/// Sites with a histogram in a point directory (1-based, sorted).
pub fn histogram_sites(dir: &Path) -> Vec<usize> {
    let mut v: Vec<usize> = list_files(dir)
        .iter()
        .filter_map(|f| f.strip_prefix("wigner_site")?.strip_suffix(".json")?.parse().ok())
        .collect();
    v.sort_unstable();
    v
}

/// Status of one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointStatus {
    Completed,
    /// Already complete on disk from an earlier run.
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sites: usize,
    pub drive: f64,
    pub hash: String,
    pub dir: String,
    pub status: PointStatus,
    pub outputs: Vec<String>,
    pub error: Option<String>,
    pub wall_time: f64,
}

/// Record of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub master_seed: u64,
    pub points: Vec<ManifestEntry>,
    pub wall_time: f64,
}

/// Outcome of a sweep.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub summaries: Vec<PointSummary>,
    pub manifest: RunManifest,
}

/// Configuration of one sweep point; its seed derives from the point's own
/// hash so it does not depend on the rest of the sweep.
pub fn sweep_point_config(base: &RunConfig, sites: usize, drive: f64) -> Result<RunConfig, HarnessError> {
    let mut c = base.clone();
    c.sweep = None;
    c.chain.sites = sites;
    c.chain.drive = drive;
    if let Some(spec) = &base.sweep {
        for o in &spec.overrides {
            if o.sites.map_or(true, |s| s == sites) && o.drive.map_or(true, |z| z == drive) {
                if let Some(n) = o.n_traj {
                    c.integration.n_traj = n;
                }
                if let Some(t) = o.t_transient {
                    c.integration.t_transient = t;
                }
                if let Some(t) = o.t_window {
                    c.integration.t_window = t;
                }
            }
        }
    }
    let c = c.resolved()?;
    // Seeds stay below 2⁶³ so the resolved config remains valid TOML.
    let seed = derive_seed(base.integration.master_seed, &c.hash()) >> 1;
    let mut c = c;
    c.integration.master_seed = seed;
    Ok(c)
}

fn point_dir(c: &RunConfig) -> String {
    format!(
        "L{}_zeta{}_n{}_{}",
        c.chain.sites,
        c.chain.drive,
        c.chain.photon_order,
        &c.hash()[..12]
    )
}

const DONE_MARKER: &str = "done.json";

/// Runs every `(L, ζ)` point of `base.sweep` into `out`, skipping points with
/// a completion marker when `resume` is set. Writes `sweep.csv` and
/// `manifest.json`.
pub fn run_sweep(base: &RunConfig, out: &Path, resume: bool) -> Result<SweepOutcome, HarnessError> {
    let start = Instant::now();
    let spec = base.sweep.clone().ok_or(HarnessError::EmptySweep)?;
    if spec.sites.is_empty() || spec.drives.is_empty() {
        return Err(HarnessError::EmptySweep);
    }
    fs::create_dir_all(out)?;
    let mut configs = Vec::new();
    for &l in &spec.sites {
        for &z in &spec.drives {
            configs.push(sweep_point_config(base, l, z)?);
        }
    }
    let results: Vec<(ManifestEntry, Option<PointSummary>)> = configs
        .par_iter()
        .map(|c| {
            let dir_name = point_dir(c);
            let dir = out.join(&dir_name);
            let hash = c.hash();
            let marker = dir.join(DONE_MARKER);
            let mut entry = ManifestEntry {
                sites: c.chain.sites,
                drive: c.chain.drive,
                hash: hash.clone(),
                dir: dir_name,
                status: PointStatus::Failed,
                outputs: Vec::new(),
                error: None,
                wall_time: 0.0,
            };
            if resume {
                if let Some(s) = fs::read_to_string(&marker)
                    .ok()
                    .and_then(|t| serde_json::from_str::<PointSummary>(&t).ok())
                    .filter(|s| s.hash == hash)
                {
                    entry.status = PointStatus::Skipped;
                    entry.outputs = list_files(&dir);
                    return (entry, Some(s));
                }
            }
            let t = Instant::now();
            let res = run_point(c).and_then(|r| {
                let files = r.write(&dir)?;
                let s = r.summary();
                write_atomic(&marker, &serde_json::to_string_pretty(&s).unwrap())?;
                Ok((files, s))
            });
            entry.wall_time = t.elapsed().as_secs_f64();
            match res {
                Ok((files, s)) => {
                    entry.status = PointStatus::Completed;
                    entry.outputs = files;
                    (entry, Some(s))
                }
                Err(e) => {
                    entry.error = Some(format!("{}: {e}", e.code()));
                    (entry, None)
                }
            }
        })
        .collect();
    let mut points = Vec::new();
    let mut summaries = Vec::new();
    for (e, s) in results {
        points.push(e);
        summaries.extend(s);
    }
    write_sweep_table(&summaries, &out.join("sweep.csv"))?;
    let manifest = RunManifest {
        config_hash: base.hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: base.integration.master_seed,
        points,
        wall_time: start.elapsed().as_secs_f64(),
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(SweepOutcome { summaries, manifest })
}

fn list_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .map(|d| {
            d.filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n != DONE_MARKER)
                .collect()
        })
        .unwrap_or_default();
    v.sort();
    v
}

fn write_atomic(path: &Path, text: &str) -> Result<(), HarnessError> {
    let tmp: PathBuf = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.10e}")).unwrap_or_default()
}

/// Long-format phase-diagram table.
pub fn write_sweep_table(rows: &[PointSummary], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["L", "zeta[gamma]", "n", "n_L", "n_L_se", "dn_L", "dn_L_se", "D_1L_inf", "steady_time[1/gamma]"])?;
    for r in rows {
        w.write_record(&[
            r.sites.to_string(),
            format!("{}", r.drive),
            r.photon_order.to_string(),
            format!("{:.10e}", r.n_last.value),
            format!("{:.4e}", r.n_last.stderr),
            format!("{:.10e}", r.dn_last.value),
            format!("{:.4e}", r.dn_last.stderr),
            fmt_opt(r.otoc_last),
            fmt_opt(r.steady_time),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// TWA `n` and `δn` at every site on `t_grid` (multiples of `dt`), with
/// delta-method standard errors over trajectories.
pub fn twa_time_series(config: &RunConfig, t_grid: &[f64]) -> Result<ExpectationSeries, HarnessError> {
    let config = config.resolved()?;
    let vc = config.validated()?;
    let params = vc.params();
    let ctrl = vc.controls();
    let dt = ctrl.dt;
    let steps: Vec<usize> = t_grid.iter().map(|t| (t / dt).round() as usize).collect();
    if steps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(HarnessError::Invalid {
            field: "time grid",
            reason: "must increase by at least one step".into(),
        });
    }
    let stepper = Stepper::new(params, Dynamics::Twa, dt);
    let (ens, noises) = FieldEnsemble::sample(vc.initial(), params.sites, ctrl.n_traj, ctrl.master_seed);
    let per: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = noises
        .into_par_iter()
        .enumerate()
        .map(|(i, mut noise)| {
            let mut st = stepper.clone();
            let mut f = ens.trajectory(i).to_vec();
            let mut n = Vec::with_capacity(steps.len());
            let mut m = Vec::with_capacity(steps.len());
            let mut done = 0usize;
            for &target in &steps {
                while done < target {
                    st.step_with(&mut f, &mut noise);
                    done += 1;
                    check_trajectory(&f, i, done as f64 * dt)?;
                }
                let x: Vec<f64> = f.iter().map(|a| a.norm_sqr()).collect();
                n.push(x.iter().map(|x| x - 0.5).collect());
                m.push(x.iter().map(|x| x * x - 2.0 * x + 0.5).collect());
            }
            Ok((n, m))
        })
        .collect::<Result<_, EngineError>>()?;
    let (n, m): (Vec<_>, Vec<_>) = per.into_iter().unzip();
    Ok(ExpectationSeries::from_samples(t_grid.to_vec(), &n, &m))
}

/// One checkpoint of a TWA–oracle comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub t: f64,
    pub twa_n: f64,
    pub twa_n_se: f64,
    pub oracle_n: f64,
    pub oracle_n_se: f64,
    pub n_agree: bool,
    pub twa_dn: f64,
    pub twa_dn_se: f64,
    pub oracle_dn: f64,
    pub oracle_dn_se: f64,
    pub dn_agree: bool,
}

/// Overlay of two series at one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// 0-based site.
    pub site: usize,
    /// Allowed difference in combined standard errors.
    pub k_se: f64,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn n_agreeing(&self) -> usize {
        self.rows.iter().filter(|r| r.n_agree).count()
    }

    pub fn dn_agreeing(&self) -> usize {
        self.rows.iter().filter(|r| r.dn_agree).count()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "t[1/gamma]",
            "twa_n",
            "twa_n_se",
            "oracle_n",
            "oracle_n_se",
            "n_agree",
            "twa_dn",
            "twa_dn_se",
            "oracle_dn",
            "oracle_dn_se",
            "dn_agree",
        ])?;
        for r in &self.rows {
            wtr.write_record(&[
                format!("{:.6}", r.t),
                format!("{:.8e}", r.twa_n),
                format!("{:.4e}", r.twa_n_se),
                format!("{:.8e}", r.oracle_n),
                format!("{:.4e}", r.oracle_n_se),
                r.n_agree.to_string(),
                format!("{:.8e}", r.twa_dn),
                format!("{:.4e}", r.twa_dn_se),
                format!("{:.8e}", r.oracle_dn),
                format!("{:.4e}", r.oracle_dn_se),
                r.dn_agree.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Compares `a` and `b` at `site` on their common grid, skipping `t = 0`.
pub fn compare_series(a: &ExpectationSeries, b: &ExpectationSeries, site: usize, k_se: f64) -> Result<Comparison, HarnessError> {
    if a.times != b.times {
        return Err(HarnessError::Invalid {
            field: "comparison",
            reason: "time grids differ".into(),
        });
    }
    let agree = |x: f64, ex: f64, y: f64, ey: f64| (x - y).abs() <= k_se * (ex * ex + ey * ey).sqrt();
    let rows = a
        .times
        .iter()
        .enumerate()
        .filter(|(_, t)| **t > 0.0)
        .map(|(i, &t)| {
            let (tn, tne, on, one) = (a.n[site][i], a.n_se[site][i], b.n[site][i], b.n_se[site][i]);
            let (td, tde, od, ode) = (a.dn[site][i], a.dn_se[site][i], b.dn[site][i], b.dn_se[site][i]);
            ComparisonRow {
                t,
                twa_n: tn,
                twa_n_se: tne,
                oracle_n: on,
                oracle_n_se: one,
                n_agree: agree(tn, tne, on, one),
                twa_dn: td,
                twa_dn_se: tde,
                oracle_dn: od,
                oracle_dn_se: ode,
                dn_agree: agree(td, tde, od, ode),
            }
        })
        .collect();
    Ok(Comparison { site, k_se, rows })
}

/// Exact reference series for a two-site (or single-site) configuration.
#[derive(Debug, Clone)]
pub struct OracleRun {
    pub result: oracle::McwfResult,
    pub convergence: Option<oracle::CutoffConvergence>,
}

/// Runs the quantum-jump oracle described by `config.oracle`, after the
/// cutoff doubling check.
pub fn run_oracle(config: &RunConfig) -> Result<OracleRun, HarnessError> {
    let config = config.resolved()?;
    let oc = config.oracle.clone().unwrap_or_default();
    let params = &config.chain;
    let grid = oc.time_grid();
    let seed = config.integration.master_seed;
    let convergence = if oc.convergence_traj > 0 {
        Some(oracle::check_cutoff_convergence(
            params,
            oc.cutoff,
            oc.convergence_traj,
            &grid,
            seed,
            oc.convergence_tolerance,
        )?)
    } else {
        None
    };
    let opts = McwfOptions {
        max_step: oc.max_step,
        initial: None,
    };
    let result = oracle::evolve_mcwf(params, FockConfig::new(oc.cutoff, params.sites), oc.n_traj, &grid, seed, &opts)?;
    Ok(OracleRun { result, convergence })
}

/// One row of a classical (Gross-Pitaevskii) profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpRow {
    /// 1-based.
    pub site: usize,
    /// Time-averaged `|α|²`.
    pub intensity: f64,
    /// `|⟨e^{imφ}⟩|` over time, `m = 1..`.
    pub circular_moments: Vec<f64>,
}

impl GpRow {
    pub fn circular_variance(&self, m: usize) -> f64 {
        1.0 - self.circular_moments[m - 1]
    }
}

/// Classical run from a uniform real field, time-averaged over the window.
pub fn run_gp(config: &RunConfig) -> Result<Vec<GpRow>, HarnessError> {
    let config = config.resolved()?;
    let params = config.chain.clone();
    let ctrl = config.integration.clone();
    let l = params.sites;
    let amplitude = config.gp.as_ref().and_then(|g| g.amplitude).unwrap_or_else(|| {
        if params.photon_order >= 3 {
            match config.initial {
                Some(InitialCondition::RingState { radius, .. }) => radius,
                _ => DEFAULT_RING_RADIUS,
            }
        } else {
            1e-2
        }
    });
    let mut f = vec![Complex64::new(amplitude, 0.0); l];
    let mut st = Stepper::new(&params, Dynamics::Gp, ctrl.dt);
    let stride = ((ctrl.sample_interval / ctrl.dt).round() as usize).max(1);
    let n_tr = ctrl.steps_for(ctrl.t_transient);
    let n_total = n_tr + ctrl.steps_for(ctrl.t_window);
    let m_max = config.output.m_max;
    let mut intensity = vec![0.0; l];
    let mut phases = vec![vec![Complex64::default(); m_max]; l];
    let mut count = 0usize;
    for step in 0..n_total {
        if step >= n_tr && step % stride == 0 {
            count += 1;
            for (s, a) in f.iter().enumerate() {
                intensity[s] += a.norm_sqr();
                if a.norm() > 0.0 {
                    let u = a / a.norm();
                    for m in 0..m_max {
                        phases[s][m] += u.powu(m as u32 + 1);
                    }
                }
            }
        }
        st.step(&mut f, None);
        check_trajectory(&f, 0, (step + 1) as f64 * ctrl.dt)?;
    }
    let c = count.max(1) as f64;
    Ok((0..l)
        .map(|s| GpRow {
            site: s + 1,
            intensity: intensity[s] / c,
            circular_moments: phases[s].iter().map(|z| z.norm() / c).collect(),
        })
        .collect())
}

/// CSV `site, intensity, C1…, dphi1…`.
pub fn write_gp_table<W: std::io::Write>(rows: &[GpRow], w: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let m_max = rows.first().map(|r| r.circular_moments.len()).unwrap_or(0);
    let mut header = vec!["site".to_string(), "abs_alpha2".to_string()];
    header.extend((1..=m_max).map(|m| format!("C{m}")));
    header.extend((1..=m_max).map(|m| format!("dphi{m}")));
    wtr.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.site.to_string(), format!("{:.10e}", r.intensity)];
        rec.extend(r.circular_moments.iter().map(|c| format!("{c:.10e}")));
        rec.extend(r.circular_moments.iter().map(|c| format!("{:.10e}", 1.0 - c)));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    const BASE: &str = r#"
[chain]
L = 4
n = 2
delta = 5.6
J = 2.2
zeta = 3.5

[integration]
t_transient = 5.0
t_window = 5.0
n_traj = 8
master_seed = 11
"#;

    fn single(times: Vec<f64>, v: Vec<f64>) -> MonitorSeries {
        MonitorSeries {
            times,
            sites: vec![0],
            values: vec![v],
        }
    }

    #[test]
    fn constant_series_is_steady_at_first_boundary() {
        let t: Vec<f64> = (0..=400).map(|i| 0.1 * i as f64).collect();
        let s = single(t.clone(), vec![2.0; t.len()]);
        let c = SteadyCriterion { t_block: 10.0, n_se: 3.0 };
        assert_eq!(detect_steady(&s, &c).unwrap(), 10.0);
    }

    #[test]
    fn ramp_is_never_steady() {
        let t: Vec<f64> = (0..=400).map(|i| 0.1 * i as f64).collect();
        let s = single(t.clone(), t.iter().map(|x| 0.5 * x).collect());
        let c = SteadyCriterion::default();
        assert!(matches!(detect_steady(&s, &c), Err(HarnessError::NotSteadyWithinBudget { .. })));
    }

    #[test]
    fn noisy_exponential_settles_after_five_time_constants() {
        // n(t) = e^{−t/5} + noise of width 0.05, 100 samples per block:
        // block differences 0.374 e^{−t/5} fall below 3·√2·0.005 for t > 14.4,
        // so the first qualifying pair is [20, 30), [30, 40).
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let t: Vec<f64> = (0..1000).map(|i| 0.1 * i as f64).collect();
        let v = t.iter().map(|x| (-x / 5.0).exp() + noise.sample(&mut rng)).collect();
        let got = detect_steady(&single(t, v), &SteadyCriterion::default()).unwrap();
        assert!((20.0..=30.0).contains(&got), "{got}");
    }

    #[test]
    fn short_series_is_rejected() {
        let s = single(vec![0.0, 1.0, 2.0], vec![1.0; 3]);
        assert!(matches!(detect_steady(&s, &SteadyCriterion::default()), Err(HarnessError::SeriesTooShort { .. })));
    }

    #[test]
    fn config_round_trip_and_defaults() {
        let c = RunConfig::from_toml_str(BASE).unwrap();
        assert_eq!(c.chain.kerr, crate::model::DEFAULT_KERR);
        let r = c.resolved().unwrap();
        assert_eq!(r.initial, Some(InitialCondition::Vacuum));
        let back = RunConfig::from_toml_str(&r.to_toml()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.hash(), r.hash());
    }

    #[test]
    fn ring_state_is_default_for_three_photons() {
        let c = RunConfig::from_toml_str(&BASE.replace("n = 2", "n = 3")).unwrap();
        assert_eq!(c.resolved().unwrap().initial, Some(InitialCondition::RingState { radius: 10.0, shared_phase: false }));
    }

    #[test]
    fn bad_configs() {
        assert!(matches!(RunConfig::from_toml_str("[chain]\nL = 'x'"), Err(HarnessError::ConfigParse(_))));
        let c = RunConfig::from_toml_str(&BASE.replace("L = 4", "L = 0")).unwrap();
        assert!(matches!(c.resolved(), Err(HarnessError::Validation(_))));
        let mut c = RunConfig::from_toml_str(BASE).unwrap();
        c.sweep = Some(SweepSpec {
            sites: vec![],
            drives: vec![1.0],
            overrides: vec![],
        });
        let e = c.resolved().unwrap_err();
        assert!(matches!(e, HarnessError::EmptySweep));
        assert_eq!(e.stage(), "validate");
    }

    #[test]
    fn site_selection() {
        assert_eq!(monitor_sites(1), vec![0]);
        assert_eq!(monitor_sites(2), vec![0, 1]);
        assert_eq!(monitor_sites(30), vec![0, 14, 29]);
        let s: SiteSelection = serde_json::from_str("\"all\"").unwrap();
        assert_eq!(s.resolve(3).unwrap(), vec![0, 1, 2]);
        let s: SiteSelection = serde_json::from_str("[3, 1, 3]").unwrap();
        assert_eq!(s.resolve(3).unwrap(), vec![0, 2]);
        assert!(SiteSelection::List(vec![4]).resolve(3).is_err());
    }

    #[test]
    fn small_point_runs() {
        let c = RunConfig::from_toml_str(BASE).unwrap();
        let r = run_point(&c).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.accumulator.n_blocks(), 8);
        assert_eq!(r.wigner.len(), 3);
        assert_eq!(r.monitor.times.len(), 11);
        let again = run_point(&c).unwrap();
        assert_eq!(again.rows, r.rows);
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        assert_eq!(histogram_sites(dir.path()), vec![1, 2, 4]);
        let h = read_histogram(dir.path(), 4).unwrap();
        let (_, orig) = &r.wigner[2];
        assert_eq!(h.grid, orig.grid);
        for (a, b) in h.weights.iter().zip(&orig.weights) {
            assert!((a - b).abs() <= 1e-7 * b.abs());
        }
    }

    #[test]
    fn comparison_counts() {
        let s = ExpectationSeries::from_samples(
            vec![0.0, 1.0],
            &[vec![vec![0.0], vec![1.0]], vec![vec![0.0], vec![3.0]]],
            &[vec![vec![0.0], vec![0.0]], vec![vec![0.0], vec![6.0]]],
        );
        let c = compare_series(&s, &s, 0, 3.0).unwrap();
        assert_eq!(c.rows.len(), 1);
        assert_eq!(c.n_agreeing(), 1);
        assert_eq!(c.dn_agreeing(), 1);
    }

    #[test]
    fn gp_from_vacuum_stays_dark() {
        let mut c = RunConfig::from_toml_str(BASE).unwrap();
        c.gp = Some(GpConfig { amplitude: Some(0.0) });
        let rows = run_gp(&c).unwrap();
        assert!(rows.iter().all(|r| r.intensity == 0.0));
    }
}
