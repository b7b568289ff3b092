//! Experiment definitions, replica execution and file output.
//!
//! An [`ExperimentConfig`] is a TOML document. [`run`] dispatches on its kind,
//! runs replicas on the rayon pool with seeds `child_seed(block_seed, offset + i)`
//! and aggregates them in replica order, so the output depends only on the
//! config. [`write_outputs`] emits a versioned CSV and a JSON sidecar.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kingman::KingmanVector;
use crate::model::{gamma_logistic_a1, ControlState, ModelError, ModelParams};
use crate::moments::{solve_hierarchy, MomentSystem, DEFAULT_MAX_DEGREE};
use crate::ode::{integrate, ControlModulation, OdeError};
use crate::pd::{default_truncation, sample_pd_scaled, wf_step, WfScheme, WfState, WfWork};
use crate::rng::child_seed;
use crate::sim::{InitialCondition, Observable, SimError, SimState};
use crate::verify::{run_suite, VerifyOptions, VerifyReport};

/// Version written in the first line of every CSV.
pub const SCHEMA_VERSION: u32 = 1;

pub fn schema_header() -> String {
    format!("# condensate-sim v{SCHEMA_VERSION}")
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("replica {replica}: {source}")]
    Replica { replica: u64, source: SimError },
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("grids differ: {0}")]
    GridMismatch(String),
    #[error("no column named `{0}`")]
    UnknownColumn(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config(_) | Self::Model(_))
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    IpSim,
    Ode,
    Wf,
    PdSample,
    Moments,
    Verify,
    Figure2,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::IpSim => "ip-sim",
            Self::Ode => "ode",
            Self::Wf => "wf",
            Self::PdSample => "pd-sample",
            Self::Moments => "moments",
            Self::Verify => "verify",
            Self::Figure2 => "figure2",
        }
    }
}

/// Observation times: `points` equally spaced values on `[0, T]`, or explicit `times`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Uniform { points: usize },
    Explicit { times: Vec<f64> },
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::Uniform { points: 31 }
    }
}

impl GridSpec {
    pub fn times(&self, horizon: f64) -> Vec<f64> {
        match self {
            Self::Uniform { points: 1 } => vec![horizon],
            Self::Uniform { points } => {
                let n = *points - 1;
                (0..=n).map(|i| horizon * i as f64 / n as f64).collect()
            }
            Self::Explicit { times } => times.clone(),
        }
    }
}

/// System sizes. `N = round(rho L)` when `particles` is omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sizes {
    pub sites: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WfOptions {
    pub loci: usize,
    pub dt: f64,
    pub scheme: WfScheme,
    pub moments: Vec<u32>,
}

impl Default for WfOptions {
    fn default() -> Self {
        Self {
            loci: 50,
            dt: 1e-3,
            scheme: WfScheme::default(),
            moments: vec![2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdOptions {
    pub theta: f64,
    pub gamma: f64,
    pub samples: usize,
    /// Truncation error of the stick-breaking series.
    pub eps: f64,
    pub moments: Vec<u32>,
}

impl Default for PdOptions {
    fn default() -> Self {
        Self {
            theta: 1.0,
            gamma: 1.0,
            samples: 100_000,
            eps: 1e-12,
            moments: vec![2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentOptions {
    pub max_degree: u32,
    pub step: f64,
    /// Initial cluster vector; a single cluster of mass `gamma(Y(0))` when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

impl Default for MomentOptions {
    fn default() -> Self {
        Self {
            max_degree: DEFAULT_MAX_DEGREE,
            step: 1e-3,
            x0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Figure2Options {
    /// Initial fast-phase masses `gamma(0)`.
    pub initial_masses: Vec<f64>,
}

impl Default for Figure2Options {
    fn default() -> Self {
        Self {
            initial_masses: vec![0.025, 0.25, 0.65, 1.0],
        }
    }
}

fn one() -> usize {
    1
}

fn default_initial() -> InitialCondition {
    InitialCondition::SinglePile
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub master_seed: u64,
    #[serde(default = "one")]
    pub replicas: usize,
    /// Index of the first replica; lets two runs be pooled into one.
    #[serde(default)]
    pub replica_offset: u64,
    pub horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Slow-phase fractions `y_0..y_{A-1}` at time 0; all sites empty when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_initial: Option<Vec<f64>>,
    #[serde(default)]
    pub observables: Vec<Observable>,
    #[serde(default)]
    pub grid: GridSpec,
    pub model: ModelParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Sizes>,
    #[serde(default = "default_initial")]
    pub initial: InitialCondition,
    #[serde(default)]
    pub wf: WfOptions,
    #[serde(default)]
    pub pd: PdOptions,
    #[serde(default)]
    pub moments: MomentOptions,
    #[serde(default)]
    pub figure2: Figure2Options,
}

impl ExperimentConfig {
    /// Defaults for `kind` with the leading example at `A = 1`, `Theta = 1`, `rho = 1`.
    pub fn template(kind: ExperimentKind) -> Self {
        let spec = crate::model::RateSpec::leading_example(1, 1.0).expect("valid rates");
        Self {
            kind,
            master_seed: if kind == ExperimentKind::Verify {
                VerifyOptions::default().master_seed
            } else {
                1
            },
            replicas: if kind == ExperimentKind::IpSim { 20 } else { 1 },
            replica_offset: 0,
            horizon: 3.0,
            output: None,
            control_initial: None,
            observables: Vec::new(),
            grid: GridSpec::default(),
            model: ModelParams::new(spec, 1.0).expect("valid density"),
            sizes: (kind == ExperimentKind::IpSim).then(|| Sizes {
                sites: vec![1000],
                particles: None,
            }),
            initial: default_initial(),
            wf: WfOptions::default(),
            pd: PdOptions::default(),
            moments: MomentOptions::default(),
            figure2: Figure2Options::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let config: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Canonical TOML form.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }

    pub fn grid_times(&self) -> Vec<f64> {
        self.grid.times(self.horizon)
    }

    /// `(L, N)` pairs.
    pub fn size_pairs(&self) -> Result<Vec<(usize, u64)>, HarnessError> {
        let sizes = self
            .sizes
            .as_ref()
            .ok_or_else(|| HarnessError::Config("`sizes` is required for this kind".into()))?;
        match &sizes.particles {
            None => Ok(sizes
                .sites
                .iter()
                .map(|&l| (l, (self.model.rho * l as f64).round() as u64))
                .collect()),
            Some(ns) => {
                if ns.len() != sizes.sites.len() {
                    return Err(HarnessError::Config(
                        "`sizes.sites` and `sizes.particles` differ in length".into(),
                    ));
                }
                sizes
                    .sites
                    .iter()
                    .zip(ns)
                    .map(|(&l, &n)| {
                        let expected = (self.model.rho * l as f64).round() as u64;
                        if n != expected {
                            Err(HarnessError::Config(format!(
                                "L = {l}, N = {n} is inconsistent with rho = {} (expected N = {expected})",
                                self.model.rho
                            )))
                        } else {
                            Ok((l, n))
                        }
                    })
                    .collect()
            }
        }
    }

    pub fn control_initial_state(&self) -> Result<ControlState, HarnessError> {
        match &self.control_initial {
            Some(y) => Ok(ControlState::new(y.clone())?),
            None => Ok(self.model.empty_slow_phase()),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        self.model.spec.validate()?;
        ModelParams::new(self.model.spec.clone(), self.model.rho)?;
        if self.replicas < 1 {
            return bad("replicas must be at least 1".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if let GridSpec::Uniform { points: 0 } = self.grid {
            return bad("grid needs at least one point".into());
        }
        let times = self.grid_times();
        if times.is_empty()
            || times.iter().any(|&t| !(0.0..=self.horizon).contains(&t))
            || times.windows(2).any(|w| w[1] <= w[0])
        {
            return bad(format!(
                "grid must be strictly increasing within [0, {}]",
                self.horizon
            ));
        }
        if self.control_initial.is_some() {
            let y = self.control_initial_state()?;
            if y.len() != self.model.threshold() {
                return bad(format!(
                    "control_initial has {} entries, expected A = {}",
                    y.len(),
                    self.model.threshold()
                ));
            }
        }
        match self.kind {
            ExperimentKind::IpSim => {
                let pairs = self.size_pairs()?;
                if pairs.iter().any(|&(l, n)| l == 0 || n == 0) {
                    return bad("sizes must be positive".into());
                }
            }
            ExperimentKind::Wf => {
                let wf = &self.wf;
                if wf.loci < 2 || !(wf.dt > 0.0) || wf.moments.iter().any(|&m| m < 1) {
                    return bad("wf needs loci >= 2, dt > 0 and moments >= 1".into());
                }
                for &t in &times {
                    let k = t / wf.dt;
                    if (k - k.round()).abs() > 1e-9 * k.max(1.0) {
                        return bad(format!("grid time {t} is not a multiple of dt = {}", wf.dt));
                    }
                }
            }
            ExperimentKind::PdSample => {
                let pd = &self.pd;
                if !(pd.theta > 0.0) || !(0.0..=1.0).contains(&pd.gamma) || pd.samples < 2 {
                    return bad("pd-sample needs theta > 0, gamma in [0, 1], samples >= 2".into());
                }
                if !(pd.eps > 0.0 && pd.eps < 1.0) || pd.moments.iter().any(|&m| m < 1) {
                    return bad("pd-sample needs eps in (0, 1) and moments >= 1".into());
                }
            }
            ExperimentKind::Moments => {
                if self.moments.max_degree < 2 || !(self.moments.step > 0.0) {
                    return bad("moments needs max_degree >= 2 and step > 0".into());
                }
            }
            ExperimentKind::Figure2 => {
                let spec = &self.model.spec;
                if spec.threshold() != 1 || !spec.is_leading_example() {
                    return bad("figure2 needs the leading example with A = 1".into());
                }
                for &g in &self.figure2.initial_masses {
                    let y0 = 1.0 - self.model.rho * (1.0 - g);
                    if !(0.0..=1.0).contains(&g) || !(0.0..=1.0).contains(&y0) {
                        return bad(format!("initial mass {g} is not reachable at rho = {}", self.model.rho));
                    }
                }
            }
            ExperimentKind::Ode | ExperimentKind::Verify => {}
        }
        Ok(())
    }
}

/// Per-replica series with their aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesBlock {
    pub label: String,
    pub columns: Vec<String>,
    pub times: Vec<f64>,
    /// `replicas[r][i][c]`: replica `r`, grid point `i`, column `c`.
    pub replicas: Vec<Vec<Vec<f64>>>,
    pub mean: Vec<Vec<f64>>,
    pub std_error: Vec<Vec<f64>>,
}

impl SeriesBlock {
    /// Aggregates in replica order. A single stochastic replica has undefined (NaN) error;
    /// a deterministic block has zero error.
    pub fn from_replicas(
        label: String,
        columns: Vec<String>,
        times: Vec<f64>,
        replicas: Vec<Vec<Vec<f64>>>,
        stochastic: bool,
    ) -> Self {
        let r = replicas.len() as f64;
        let mut mean = vec![vec![0.0; columns.len()]; times.len()];
        let mut std_error = mean.clone();
        for i in 0..times.len() {
            for c in 0..columns.len() {
                let m = replicas.iter().map(|rep| rep[i][c]).sum::<f64>() / r;
                mean[i][c] = m;
                std_error[i][c] = if !stochastic {
                    0.0
                } else if replicas.len() < 2 {
                    f64::NAN
                } else {
                    let ss: f64 = replicas.iter().map(|rep| (rep[i][c] - m).powi(2)).sum();
                    (ss / (r - 1.0) / r).sqrt()
                };
            }
        }
        Self {
            label,
            columns,
            times,
            replicas,
            mean,
            std_error,
        }
    }

    pub fn deterministic(label: String, columns: Vec<String>, times: Vec<f64>, rows: Vec<Vec<f64>>) -> Self {
        Self::from_replicas(label, columns, times, vec![rows], false)
    }

    /// The block obtained by concatenating the replicas of `self` and `other`.
    pub fn pooled(&self, other: &Self) -> Result<Self, HarnessError> {
        if self.columns != other.columns {
            return Err(HarnessError::GridMismatch("column sets differ".into()));
        }
        check_grid(&self.times, &other.times)?;
        let mut replicas = self.replicas.clone();
        replicas.extend(other.replicas.iter().cloned());
        Ok(Self::from_replicas(
            self.label.clone(),
            self.columns.clone(),
            self.times.clone(),
            replicas,
            true,
        ))
    }

    pub fn column_index(&self, name: &str) -> Result<usize, HarnessError> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| HarnessError::UnknownColumn(name.into()))
    }

    pub fn mean_column(&self, name: &str) -> Result<Vec<f64>, HarnessError> {
        let c = self.column_index(name)?;
        Ok(self.mean.iter().map(|row| row[c]).collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub schema_version: u32,
    pub kind: String,
    pub master_seed: u64,
    pub replica_offset: u64,
    /// Seeds per block, in replica order.
    pub seeds: Vec<Vec<u64>>,
    /// Accepted and rejected events per block and replica (particle simulations only).
    pub events: Vec<Vec<(u64, u64)>>,
    pub wall_seconds: f64,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub kind: ExperimentKind,
    pub blocks: Vec<SeriesBlock>,
    pub metadata: RunMetadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyReport>,
}

impl RunResult {
    pub fn block(&self, label: &str) -> Option<&SeriesBlock> {
        self.blocks.iter().find(|b| b.label == label)
    }
}

/// Runs the experiment described by `config`.
pub fn run(config: &ExperimentConfig) -> Result<RunResult, HarnessError> {
    config.validate()?;
    let start = Instant::now();
    let mut metadata = RunMetadata {
        schema_version: SCHEMA_VERSION,
        kind: config.kind.name().into(),
        master_seed: config.master_seed,
        replica_offset: config.replica_offset,
        ..Default::default()
    };
    let mut verify = None;
    let blocks = match config.kind {
        ExperimentKind::IpSim => run_ip(config, &mut metadata)?,
        ExperimentKind::Ode => vec![run_ode(config)?],
        ExperimentKind::Figure2 => vec![run_figure2(config)?],
        ExperimentKind::Wf => vec![run_wf(config, &mut metadata)?],
        ExperimentKind::PdSample => vec![run_pd(config, &mut metadata)],
        ExperimentKind::Moments => vec![run_moments(config)?],
        ExperimentKind::Verify => {
            let report = run_suite(&VerifyOptions {
                master_seed: config.master_seed,
                out_dir: config.output.clone(),
                check_reproducibility: true,
            })?;
            let rows = report
                .outcomes
                .iter()
                .map(|o| vec![if o.passed { 1.0 } else { 0.0 }])
                .collect();
            let times = report.outcomes.iter().map(|o| o.id as f64).collect();
            let block = SeriesBlock::deterministic("verify".into(), vec!["passed".into()], times, rows);
            verify = Some(report);
            vec![block]
        }
    };
    metadata.wall_seconds = start.elapsed().as_secs_f64();
    Ok(RunResult {
        kind: config.kind,
        blocks,
        metadata,
        verify,
    })
}

fn replica_seeds(config: &ExperimentConfig, block: u64, count: usize) -> Vec<u64> {
    let block_seed = child_seed(config.master_seed, block);
    (0..count as u64)
        .map(|i| child_seed(block_seed, config.replica_offset + i))
        .collect()
}

fn run_ip(config: &ExperimentConfig, metadata: &mut RunMetadata) -> Result<Vec<SeriesBlock>, HarnessError> {
    let grid = config.grid_times();
    let observables = if config.observables.is_empty() {
        vec![Observable::GammaN, Observable::SlowFractions, Observable::FastFraction]
    } else {
        config.observables.clone()
    };
    let mut blocks = Vec::new();
    for (b, (l, n)) in config.size_pairs()?.into_iter().enumerate() {
        let seeds = replica_seeds(config, b as u64, config.replicas);
        let runs: Vec<_> = seeds
            .par_iter()
            .enumerate()
            .map(|(i, &seed)| {
                let tag = |source| HarnessError::Replica {
                    replica: config.replica_offset + i as u64,
                    source,
                };
                let mut sim = SimState::init(config.model.spec.clone(), l, n, &config.initial, seed).map_err(tag)?;
                let series = sim.run_observed(&grid, &observables).map_err(tag)?;
                let stats = sim.stats();
                Ok((series, (stats.accepted, stats.rejected)))
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        let columns = runs[0].0.columns.clone();
        metadata.seeds.push(seeds);
        metadata.events.push(runs.iter().map(|r| r.1).collect());
        let replicas = runs.into_iter().map(|r| r.0.values).collect();
        blocks.push(SeriesBlock::from_replicas(
            format!("L={l},N={n}"),
            columns,
            grid.clone(),
            replicas,
            true,
        ));
    }
    Ok(blocks)
}

fn run_ode(config: &ExperimentConfig) -> Result<SeriesBlock, HarnessError> {
    let params = &config.model;
    let y0 = config.control_initial_state()?;
    let grid = config.grid_times();
    let sol = integrate(params, &y0, &grid)?;
    let a = params.threshold();
    let mut columns: Vec<String> = vec!["gamma".into(), "theta".into(), "beta_bar".into()];
    columns.extend((0..a).map(|k| format!("y_{k}")));
    let closed = match params.spec.theta_cap() {
        Some(theta) if a == 1 => {
            columns.push("gamma_closed_form".into());
            Some((theta, params.gamma(&y0)))
        }
        _ => None,
    };
    let rows = sol
        .states
        .iter()
        .zip(&grid)
        .map(|(y, &t)| {
            let mut row = vec![params.gamma(y), params.theta(y), params.beta_bar(y)];
            row.extend_from_slice(y.as_slice());
            if let Some((theta, g0)) = closed {
                row.push(gamma_logistic_a1(theta, params.rho, g0, t));
            }
            row
        })
        .collect();
    Ok(SeriesBlock::deterministic("ode".into(), columns, grid, rows))
}

fn run_figure2(config: &ExperimentConfig) -> Result<SeriesBlock, HarnessError> {
    let params = &config.model;
    let theta = params.spec.theta_cap().expect("validated leading example");
    let grid = config.grid_times();
    let masses = &config.figure2.initial_masses;
    let mut columns = Vec::new();
    let mut curves = Vec::new();
    for &g0 in masses {
        let y0 = ControlState::new(vec![1.0 - params.rho * (1.0 - g0)])?;
        let sol = integrate(params, &y0, &grid)?;
        columns.push(format!("gamma_from_{g0}"));
        columns.push(format!("closed_form_from_{g0}"));
        curves.push((sol.gamma_track, g0));
    }
    let upper = (1.0 - params.spec.rho_crit() / params.rho).max(0.0);
    columns.push("asymptote_0".into());
    columns.push("asymptote_upper".into());
    let rows = grid
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut row = Vec::with_capacity(columns.len());
            for (track, g0) in &curves {
                row.push(track[i]);
                row.push(gamma_logistic_a1(theta, params.rho, *g0, t));
            }
            row.push(0.0);
            row.push(upper);
            row
        })
        .collect();
    Ok(SeriesBlock::deterministic("figure2".into(), columns, grid, rows))
}

fn run_wf(config: &ExperimentConfig, metadata: &mut RunMetadata) -> Result<SeriesBlock, HarnessError> {
    let params = &config.model;
    let opts = &config.wf;
    let y0 = config.control_initial_state()?;
    let grid = config.grid_times();
    let targets: Vec<u64> = grid.iter().map(|t| (t / opts.dt).round() as u64).collect();
    let seeds = replica_seeds(config, 0, config.replicas);
    let mut columns = vec!["gamma".to_string()];
    columns.extend(opts.moments.iter().map(|m| format!("phi{m}")));
    let runs: Vec<(Vec<Vec<f64>>, u64)> = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = crate::rng::rng_from_seed(seed);
            let mut state = WfState::uniform(opts.loci, y0.clone());
            let mut work = WfWork::default();
            let mut rows = Vec::with_capacity(grid.len());
            for &target in &targets {
                while state.steps < target {
                    wf_step(&mut state, params, opts.dt, opts.scheme, &mut rng, &mut work);
                }
                let mut row = vec![params.gamma(state.y())];
                row.extend(opts.moments.iter().map(|&m| state.phi(params, m)));
                rows.push(row);
            }
            (rows, state.projected_steps)
        })
        .collect();
    let projected: u64 = runs.iter().map(|r| r.1).sum();
    let steps = targets.last().copied().unwrap_or(0) * config.replicas as u64;
    metadata.notes.push(format!("projected steps: {projected} of {steps}"));
    metadata.seeds.push(seeds);
    let replicas = runs.into_iter().map(|r| r.0).collect();
    Ok(SeriesBlock::from_replicas("wf".into(), columns, grid, replicas, true))
}

fn run_pd(config: &ExperimentConfig, metadata: &mut RunMetadata) -> SeriesBlock {
    let opts = &config.pd;
    let k = default_truncation(opts.theta, opts.eps);
    let seeds = replica_seeds(config, 0, opts.samples);
    let replicas: Vec<Vec<Vec<f64>>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = crate::rng::rng_from_seed(seed);
            let sample = sample_pd_scaled(opts.theta, opts.gamma, k, &mut rng);
            vec![opts.moments.iter().map(|&m| sample.x.phi(m)).collect()]
        })
        .collect();
    metadata.notes.push(format!("stick-breaking truncation K = {k}"));
    let columns = opts.moments.iter().map(|m| format!("phi{m}")).collect();
    SeriesBlock::from_replicas("pd".into(), columns, vec![0.0], replicas, true)
}

fn run_moments(config: &ExperimentConfig) -> Result<SeriesBlock, HarnessError> {
    let params = &config.model;
    let opts = &config.moments;
    let y0 = config.control_initial_state()?;
    let x0 = match &opts.x0 {
        Some(x) => KingmanVector::from_unsorted(x.clone()),
        None => KingmanVector::from_unsorted(vec![params.gamma(&y0)]),
    };
    let modulation = ControlModulation::new(params, &y0, config.horizon, 2e-3)?;
    let system = MomentSystem::new(opts.max_degree);
    let table = solve_hierarchy(&system, &modulation, &x0, &config.grid_times(), opts.step);
    Ok(SeriesBlock::deterministic("moments".into(), table.labels, table.times, table.values))
}

/// Acceptance rule for [`compare_series`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    /// Largest allowed `|mean - ref|`.
    pub sup: Option<f64>,
    /// Largest allowed `|mean - ref| / SE`.
    pub max_z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub sup_distance: f64,
    pub z_scores: Vec<f64>,
    pub max_z: f64,
    pub passed: bool,
}

fn check_grid(a: &[f64], b: &[f64]) -> Result<(), HarnessError> {
    if a.len() != b.len() {
        return Err(HarnessError::GridMismatch(format!("{} vs {} points", a.len(), b.len())));
    }
    if let Some((x, y)) = a.iter().zip(b).find(|(x, y)| (*x - *y).abs() > 1e-12 * (1.0 + x.abs())) {
        return Err(HarnessError::GridMismatch(format!("{x} vs {y}")));
    }
    Ok(())
}

/// Compares the mean of `column` with a reference curve on the same grid.
pub fn compare_series(
    block: &SeriesBlock,
    column: &str,
    reference_times: &[f64],
    reference: &[f64],
    tolerance: Tolerance,
) -> Result<Comparison, HarnessError> {
    check_grid(&block.times, reference_times)?;
    if reference.len() != reference_times.len() {
        return Err(HarnessError::GridMismatch("reference values and times differ in length".into()));
    }
    let c = block.column_index(column)?;
    let mut sup_distance = 0.0_f64;
    let mut z_scores = Vec::with_capacity(reference.len());
    for (i, &r) in reference.iter().enumerate() {
        let d = (block.mean[i][c] - r).abs();
        sup_distance = sup_distance.max(d);
        let se = block.std_error[i][c];
        z_scores.push(if d == 0.0 { 0.0 } else { d / se });
    }
    let max_z = z_scores.iter().fold(0.0_f64, |m, &z| if z.is_nan() { f64::INFINITY } else { m.max(z) });
    let passed = tolerance.sup.is_none_or(|s| sup_distance < s) && tolerance.max_z.is_none_or(|z| max_z < z);
    Ok(Comparison {
        sup_distance,
        z_scores,
        max_z,
        passed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

fn fmt_num(out: &mut String, v: f64) {
    let _ = write!(out, "{v}");
}

/// Aggregate CSV: one row per block and grid point, with `<col>_mean` and `<col>_se`.
pub fn render_aggregate_csv(result: &RunResult) -> String {
    let mut out = schema_header();
    out.push('\n');
    let columns = result.blocks.first().map(|b| b.columns.clone()).unwrap_or_default();
    out.push_str("block,t");
    for c in &columns {
        let _ = write!(out, ",{c}_mean,{c}_se");
    }
    out.push('\n');
    for block in &result.blocks {
        for (i, &t) in block.times.iter().enumerate() {
            out.push_str(&block.label.replace(',', ";"));
            out.push(',');
            fmt_num(&mut out, t);
            for c in 0..block.columns.len() {
                out.push(',');
                fmt_num(&mut out, block.mean[i][c]);
                out.push(',');
                fmt_num(&mut out, block.std_error[i][c]);
            }
            out.push('\n');
        }
    }
    out
}

/// Long-format CSV of every replica.
pub fn render_replica_csv(result: &RunResult) -> String {
    let mut out = schema_header();
    out.push('\n');
    let columns = result.blocks.first().map(|b| b.columns.clone()).unwrap_or_default();
    out.push_str("block,replica,t");
    for c in &columns {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for block in &result.blocks {
        for (r, rows) in block.replicas.iter().enumerate() {
            for (t, row) in block.times.iter().zip(rows) {
                let _ = write!(out, "{},{},", block.label.replace(',', ";"), result.metadata.replica_offset + r as u64);
                fmt_num(&mut out, *t);
                for v in row {
                    out.push(',');
                    fmt_num(&mut out, *v);
                }
                out.push('\n');
            }
        }
    }
    out
}

/// The whole result as pretty-printed JSON.
pub fn render_json(result: &RunResult) -> String {
    serde_json::to_string_pretty(result).expect("serializable") + "\n"
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

/// Writes `<kind>.csv`, `<kind>_replicas.csv` and the `<kind>.json` sidecar, or a single
/// `<kind>.json` holding the whole result in JSON format.
pub fn write_outputs(result: &RunResult, dir: &Path, format: OutputFormat) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let stem = result.kind.name();
    let json_path = dir.join(format!("{stem}.json"));
    let mut written = Vec::new();
    match format {
        OutputFormat::Csv => {
            let csv = dir.join(format!("{stem}.csv"));
            write_file(&csv, &render_aggregate_csv(result))?;
            written.push(csv);
            if result.blocks.iter().any(|b| b.replicas.len() > 1) {
                let reps = dir.join(format!("{stem}_replicas.csv"));
                write_file(&reps, &render_replica_csv(result))?;
                written.push(reps);
            }
            let sidecar = serde_json::json!({
                "metadata": result.metadata,
                "blocks": result.blocks.iter().map(|b| &b.label).collect::<Vec<_>>(),
                "verify": result.verify,
            });
            write_file(&json_path, &serde_json::to_string_pretty(&sidecar).expect("serializable"))?;
        }
        OutputFormat::Json => {
            write_file(&json_path, &render_json(result))?;
        }
    }
    written.push(json_path);
    Ok(written)
}
