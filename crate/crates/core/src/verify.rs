//! The acceptance suite.
//!
//! Each criterion returns a pass/fail outcome and a table that is written as
//! `criterion_NN.csv`. Criterion 12 reruns the others with the same master seed
//! and compares the CSV bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::configuration::{check_coupling_bounds, embed, Configuration, ConfigurationError, CouplingBranch};
use crate::harness::{compare_series, run, schema_header, ExperimentConfig, ExperimentKind, GridSpec, HarnessError, Sizes, Tolerance};
use crate::kingman::KingmanVector;
use crate::model::{gamma_closed_form_a1, ControlState, ModelParams, RateSpec};
use crate::moments::{solve_hierarchy, MomentSystem};
use crate::ode::{integrate, long_time_gamma, ControlModulation};
use crate::pd::{default_truncation, pd_moment, stick_break, stick_break_from_uniforms};
use crate::rng::{child_rng, child_seed, rng_from_seed};
use crate::sim::{Event, InitialCondition, SimError, SimState};
use crate::stats::RunningStats;

/// Criteria that cannot pass as stated, with the reason.
///
/// Criterion 5 starts from one particle per site at `rho = A = 1`. That
/// configuration has no fast mass, `gamma_N(0) = 0`, which is the unstable
/// equilibrium of the control equation, while the reference curve starts at
/// `gamma(0) = 1`. The sup distance at `t = 0` is therefore 1.
pub const UNATTAINABLE: &[(u32, &str)] = &[(
    5,
    "all-ones at rho = A = 1 has gamma_N(0) = 0 but the reference curve starts at 1",
)];

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub master_seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Run everything a second time and compare the CSV bytes (criterion 12).
    pub check_reproducibility: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            master_seed: 20_240_601,
            out_dir: None,
            check_reproducibility: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionOutcome {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub summary: String,
    pub seconds: f64,
}

impl CriterionOutcome {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {} {} ({:.1} s): {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.summary
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub outcomes: Vec<CriterionOutcome>,
    /// Extra checks that do not decide any criterion.
    pub diagnostics: Vec<String>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failed_ids(&self) -> Vec<u32> {
        self.outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect()
    }

    pub fn outcome(&self, id: u32) -> Option<&CriterionOutcome> {
        self.outcomes.iter().find(|o| o.id == id)
    }
}

/// Numeric table written as one CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn render(&self) -> String {
        let mut out = schema_header();
        out.push('\n');
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

struct Checked {
    outcome: CriterionOutcome,
    table: Table,
    diagnostics: Vec<String>,
}

fn checked(id: u32, name: &str, passed: bool, summary: String, table: Table) -> Checked {
    Checked {
        outcome: CriterionOutcome {
            id,
            name: name.into(),
            passed,
            summary,
            seconds: 0.0,
        },
        table,
        diagnostics: Vec::new(),
    }
}

fn leading(a: usize, theta: f64, rho: f64) -> ModelParams {
    ModelParams::new(RateSpec::leading_example(a, theta).expect("valid"), rho).expect("valid")
}

fn linspace(a: f64, b: f64, points: usize) -> Vec<f64> {
    (0..points).map(|i| a + (b - a) * i as f64 / (points - 1) as f64).collect()
}

/// Control ODE against the closed form at `A = 1`.
fn c1() -> Result<Checked, HarnessError> {
    let start = Instant::now();
    let grid = linspace(0.0, 3.0, 301);
    let rhos = [0.025, 0.25, 0.65, 1.0];
    let mut table = Table::new(&["t", "rho", "gamma_ode", "gamma_closed_form", "error"]);
    let mut worst = 0.0_f64;
    for &rho in &rhos {
        let params = leading(1, 1.0, rho);
        let sol = integrate(&params, &params.empty_slow_phase(), &grid)?;
        for (&t, &g) in grid.iter().zip(&sol.gamma_track) {
            let cf = gamma_closed_form_a1(1.0, rho, t);
            worst = worst.max((g - cf).abs());
            table.rows.push(vec![t, rho, g, cf, (g - cf).abs()]);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(checked(
        1,
        "closed-form control ODE",
        worst < 1e-8 && secs < 1.0,
        format!("sup error {worst:.2e} (< 1e-8), runtime {secs:.3} s (< 1 s)"),
        table,
    ))
}

fn random_rates<R: Rng>(rng: &mut R, a: usize) -> RateSpec {
    let q: Vec<f64> = (0..a).map(|_| rng.random_range(0.1..2.0)).collect();
    let mut r = vec![rng.random_range(0.1..2.0)];
    r.extend(q.iter().map(|qk| qk + rng.random_range(0.0..2.0)));
    RateSpec::generic(&q, &r, rng.random_range(0.0..1.0)).expect("valid random rates")
}

fn c2(seed: u64) -> Checked {
    let mut table = Table::new(&["A", "generic", "rho_crit", "target", "ybar_sum_error"]);
    let mut ok = true;
    let p = RateSpec::leading_example(1, 1.0).unwrap();
    let exact = p.rho_crit() == 0.5;
    ok &= exact;
    let mut worst_sum = 0.0_f64;
    let mut worst_rho = 0.0_f64;
    for a in 1..=8 {
        for theta in [0.5, 1.0, 3.0] {
            let spec = RateSpec::leading_example(a, theta).unwrap();
            let sum_err = (spec.fixed_point().iter().sum::<f64>() - 1.0).abs();
            let rho_err = (spec.rho_crit() - a as f64 / 2.0).abs();
            worst_sum = worst_sum.max(sum_err);
            worst_rho = worst_rho.max(rho_err / a as f64);
            table.rows.push(vec![a as f64, 0.0, spec.rho_crit(), a as f64 / 2.0, sum_err]);
        }
    }
    let mut rng = rng_from_seed(seed);
    for i in 0..20 {
        let spec = random_rates(&mut rng, 1 + i % 5);
        let sum_err = (spec.fixed_point().iter().sum::<f64>() - 1.0).abs();
        worst_sum = worst_sum.max(sum_err);
        table.rows.push(vec![spec.threshold() as f64, 1.0, spec.rho_crit(), f64::NAN, sum_err]);
    }
    ok &= worst_sum < 1e-14 && worst_rho <= 4.0 * f64::EPSILON;
    checked(
        2,
        "critical density",
        ok,
        format!(
            "rho_c(A=1) == 1/2: {exact}; max |rho_c - A/2| / A = {worst_rho:.1e}; max |sum ybar - 1| = {worst_sum:.1e} (< 1e-14)"
        ),
        table,
    )
}

/// Uniform point of `S_Y` with `gamma(y) > 0`, by rejection.
fn random_control<R: Rng>(rng: &mut R, params: &ModelParams) -> Option<ControlState> {
    let a = params.threshold();
    for _ in 0..10_000 {
        let e: Vec<f64> = (0..=a).map(|_| Exp1.sample(rng)).collect();
        let s: f64 = e.iter().sum();
        let y = ControlState::new(e[..a].iter().map(|v| v / s).collect()).ok()?;
        if params.gamma(&y) > 0.0 {
            return Some(y);
        }
    }
    None
}

fn c3(seed: u64) -> Checked {
    let mut rng = rng_from_seed(seed);
    let mut table = Table::new(&["spec", "A", "rho", "points", "max_error"]);
    let mut worst = 0.0_f64;
    let mut missing = 0;
    for i in 0..20 {
        let a = 1 + rng.random_range(0..5);
        let spec = random_rates(&mut rng, a);
        let rho = rng.random_range(0.4 * a as f64..2.0 * a as f64);
        let params = ModelParams::new(spec, rho).unwrap();
        let r_top = params.spec.r()[a];
        let mut spec_worst = 0.0_f64;
        let mut points = 0;
        for _ in 0..1000 {
            let Some(y) = random_control(&mut rng, &params) else {
                missing += 1;
                continue;
            };
            let err = match params.beta(&y) {
                Ok(b) => (b - r_top * y.y_top()).abs(),
                Err(_) => f64::INFINITY,
            };
            spec_worst = spec_worst.max(err);
            points += 1;
        }
        worst = worst.max(spec_worst);
        table.rows.push(vec![i as f64, a as f64, rho, points as f64, spec_worst]);
    }
    checked(
        3,
        "beta identity",
        worst < 1e-12 && missing == 0,
        format!("max |beta - r_A y_A| = {worst:.2e} (< 1e-12) over 20 specs x 1000 points"),
        table,
    )
}

fn c4() -> Result<Checked, HarnessError> {
    let mut table = Table::new(&["A", "rho", "gamma", "target", "error", "time"]);
    let mut ok = true;
    let mut parts = Vec::new();
    for (a, rho) in [(1, 2.0), (2, 3.0), (1, 0.25)] {
        let params = leading(a, 1.0, rho);
        let target = (1.0 - params.spec.rho_crit() / rho).max(0.0);
        let res = long_time_gamma(&params, &params.empty_slow_phase(), 1000.0, 1e-13)?;
        let err = (res.gamma - target).abs();
        ok &= err < 1e-6;
        parts.push(format!("A={a} rho={rho}: {:.8} vs {target:.8}", res.gamma));
        table.rows.push(vec![a as f64, rho, res.gamma, target, err, res.time]);
    }
    Ok(checked(
        4,
        "long-time mass",
        ok,
        format!("{} (tol 1e-6)", parts.join("; ")),
        table,
    ))
}

/// Seed-averaged particle-system series with the harness.
fn ip_block(
    seed: u64,
    sites: usize,
    initial: InitialCondition,
    replicas: usize,
    grid: &[f64],
) -> Result<crate::harness::SeriesBlock, HarnessError> {
    let mut config = ExperimentConfig::template(ExperimentKind::IpSim);
    config.master_seed = seed;
    config.replicas = replicas;
    config.horizon = *grid.last().unwrap();
    config.grid = GridSpec::Explicit { times: grid.to_vec() };
    config.sizes = Some(Sizes { sites: vec![sites], particles: None });
    config.initial = initial;
    Ok(run(&config)?.blocks.remove(0))
}

fn c5(seed: u64) -> Result<Checked, HarnessError> {
    let start = Instant::now();
    let params = leading(1, 1.0, 1.0);
    let grid = linspace(0.0, 3.0, 30);
    let block = ip_block(seed, 1000, InitialCondition::AllOnes, 20, &grid)?;
    let closed: Vec<f64> = grid.iter().map(|&t| gamma_closed_form_a1(1.0, 1.0, t)).collect();
    let ode = integrate(&params, &params.empty_slow_phase(), &grid)?;
    let ode_y0: Vec<f64> = ode.states.iter().map(|y| y.as_slice()[0]).collect();
    let loose = Tolerance { sup: Some(0.05), max_z: None };
    let gamma_cmp = compare_series(&block, "gamma_n", &grid, &closed, loose)?;
    let y_cmp = compare_series(&block, "y_0", &grid, &ode_y0, loose)?;
    let secs = start.elapsed().as_secs_f64();

    // Diagnostics: the limit started from each run's own initial embedding.
    let mut diagnostics = Vec::new();
    let from_all_ones = integrate(&params, &ControlState::new(vec![0.0])?, &grid)?;
    let g0: Vec<f64> = from_all_ones.gamma_track.clone();
    let d = compare_series(&block, "gamma_n", &grid, &g0, loose)?;
    diagnostics.push(format!(
        "criterion 5 aux: all-ones gamma_N vs limit from gamma(0) = 0: sup {:.4}",
        d.sup_distance
    ));
    let pile = ip_block(child_seed(seed, 1), 1000, InitialCondition::SinglePile, 20, &grid)?;
    let y_start = ControlState::new(vec![999.0 / 1000.0])?;
    let pile_ode = integrate(&params, &y_start, &grid)?;
    let pile_closed: Vec<f64> = grid
        .iter()
        .map(|&t| crate::model::gamma_logistic_a1(1.0, 1.0, params.gamma(&y_start), t))
        .collect();
    let pg = compare_series(&pile, "gamma_n", &grid, &pile_closed, loose)?;
    let py = compare_series(
        &pile,
        "y_0",
        &grid,
        &pile_ode.states.iter().map(|y| y.as_slice()[0]).collect::<Vec<_>>(),
        loose,
    )?;
    diagnostics.push(format!(
        "criterion 5 aux: single-pile gamma_N vs its limit: sup {:.4}; #0/L vs Y_0: sup {:.4}",
        pg.sup_distance, py.sup_distance
    ));

    let mut table = Table::new(&[
        "t",
        "gamma_n_mean",
        "gamma_n_se",
        "gamma_closed_form",
        "y0_mean",
        "y0_ode",
        "pile_gamma_n_mean",
        "pile_gamma_limit",
        "pile_y0_mean",
        "pile_y0_limit",
    ]);
    let gi = block.column_index("gamma_n")?;
    let yi = block.column_index("y_0")?;
    for i in 0..grid.len() {
        table.rows.push(vec![
            grid[i],
            block.mean[i][gi],
            block.std_error[i][gi],
            closed[i],
            block.mean[i][yi],
            ode_y0[i],
            pile.mean[i][gi],
            pile_closed[i],
            pile.mean[i][yi],
            pile_ode.states[i].as_slice()[0],
        ]);
    }
    let passed = gamma_cmp.passed && y_cmp.passed && secs < 120.0;
    let mut out = checked(
        5,
        "pre-limit tracks the limit",
        passed,
        format!(
            "gamma_N sup {:.4}, #0/L sup {:.4} (< 0.05), runtime {secs:.1} s (< 120 s)",
            gamma_cmp.sup_distance, y_cmp.sup_distance
        ),
        table,
    );
    out.diagnostics = diagnostics;
    Ok(out)
}

fn c6(seed: u64) -> Result<Checked, HarnessError> {
    let spec = RateSpec::leading_example(1, 1.0).unwrap();
    let sizes = [250usize, 500, 1000, 2000];
    let replicas = 400;
    let mut table = Table::new(&["L", "mean", "se"]);
    let mut means = Vec::new();
    for (b, &l) in sizes.iter().enumerate() {
        let block_seed = child_seed(seed, b as u64);
        let values: Vec<f64> = (0..replicas as u64)
            .into_par_iter()
            .map(|i| {
                let mut sim = SimState::init(spec.clone(), l, l as u64, &InitialCondition::AllOnes, child_seed(block_seed, i))
                    .map_err(|source| HarnessError::Replica { replica: i, source })?;
                sim.integrated_fast_fraction(1.0)
                    .map_err(|source| HarnessError::Replica { replica: i, source })
            })
            .collect::<Result<_, _>>()?;
        let stats: RunningStats = values.iter().copied().collect();
        means.push(stats.mean());
        table.rows.push(vec![l as f64, stats.mean(), stats.std_error()]);
    }
    let decreasing = means.windows(2).all(|w| w[1] < w[0]);
    let halved = means[3] < means[0] / 2.0;
    let shown: Vec<String> = means.iter().map(|m| format!("{m:.3e}")).collect();
    Ok(checked(
        6,
        "instantaneous condensation",
        decreasing && halved,
        format!(
            "L = 250..2000: [{}]; strictly decreasing: {decreasing}; last < first / 2: {halved}",
            shown.join(", ")
        ),
        table,
    ))
}

fn c7(seed: u64) -> Result<Checked, HarnessError> {
    let spec = RateSpec::leading_example(1, 1.0).unwrap();
    let params = ModelParams::new(spec.clone(), 1.0).unwrap();
    let replicas = 50u64;
    let values: Vec<f64> = (0..replicas)
        .into_par_iter()
        .map(|i| {
            let tag = |source| HarnessError::Replica { replica: i, source };
            let mut sim =
                SimState::init(spec.clone(), 1000, 1000, &InitialCondition::SinglePile, child_seed(seed, i)).map_err(tag)?;
            sim.advance_to(10.0).map_err(tag)?;
            Ok(embed(sim.config()).x.phi(2))
        })
        .collect::<Result<_, HarnessError>>()?;
    let stats: RunningStats = values.iter().copied().collect();
    let (mean, se) = (stats.mean(), stats.std_error());
    let gamma_star = params.gamma_stationary();
    let theta_control = params.theta(&params.fixed_point_state());
    let theta_rates = spec.theta_cap().unwrap();
    let mut table = Table::new(&["candidate", "theta_star", "gamma_star", "target", "mean", "se", "z"]);
    let mut within = Vec::new();
    for (i, (name, theta)) in [("theta(ybar)", theta_control), ("Theta", theta_rates)].into_iter().enumerate() {
        let target = gamma_star * gamma_star / (1.0 + theta);
        let z = (mean - target).abs() / se;
        if z <= 3.0 {
            within.push(format!("{name} = {theta}"));
        }
        table.rows.push(vec![i as f64, theta, gamma_star, target, mean, se, z]);
    }
    let summary = format!(
        "E[phi2] = {mean:.4} +- {se:.4}; theta(ybar) = {theta_control} gives {:.4} (z = {:.2}), Theta = {theta_rates} gives {:.4} (z = {:.2}); within 3 SE: {}",
        table.rows[0][3],
        table.rows[0][6],
        table.rows[1][3],
        table.rows[1][6],
        if within.is_empty() { "none".to_string() } else { within.join(", ") }
    );
    Ok(checked(7, "stationary condensate statistics", !within.is_empty(), summary, table))
}

fn c8(seed: u64) -> Result<Checked, HarnessError> {
    let params = leading(1, 1.0, 1.0);
    let times = [0.5, 1.0, 2.0];
    let mut config = ExperimentConfig::template(ExperimentKind::Wf);
    config.master_seed = seed;
    config.replicas = 10_000;
    config.horizon = 2.0;
    config.grid = GridSpec::Explicit { times: times.to_vec() };
    config.control_initial = Some(vec![1.0]);
    config.model = params.clone();
    let result = run(&config)?;
    let block = &result.blocks[0];
    let y0 = ControlState::new(vec![1.0])?;
    let modulation = ControlModulation::new(&params, &y0, 2.0, 2e-3)?;
    let loci = config.wf.loci;
    let x0 = KingmanVector::from_unsorted(vec![params.gamma(&y0) / loci as f64; loci]);
    let mut grid = vec![0.0];
    grid.extend_from_slice(&times);
    let moments = solve_hierarchy(&MomentSystem::new(3), &modulation, &x0, &grid, 1e-3);
    let mut table = Table::new(&["t", "m", "wf_mean", "wf_se", "hierarchy", "z"]);
    let mut max_z = 0.0_f64;
    for m in [2u32, 3] {
        let reference: Vec<f64> = moments.column(&format!("phi{m}")).unwrap()[1..].to_vec();
        let cmp = compare_series(block, &format!("phi{m}"), &times, &reference, Tolerance { sup: None, max_z: Some(3.0) })?;
        max_z = max_z.max(cmp.max_z);
        let c = block.column_index(&format!("phi{m}"))?;
        for (i, &t) in times.iter().enumerate() {
            table.rows.push(vec![t, m as f64, block.mean[i][c], block.std_error[i][c], reference[i], cmp.z_scores[i]]);
        }
    }
    Ok(checked(
        8,
        "Wright-Fisher vs moment hierarchy",
        max_z <= 3.0,
        format!("max |z| = {max_z:.2} over phi2, phi3 at t = 0.5, 1, 2 (<= 3); {}", result.metadata.notes.join("; ")),
        table,
    ))
}

fn c9(seed: u64) -> Checked {
    let mut table = Table::new(&["theta", "m", "mean", "se", "exact", "z"]);
    let mut max_z = 0.0_f64;
    for (b, theta) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        let k = default_truncation(theta, 1e-12);
        let block_seed = child_seed(seed, b as u64);
        let samples: Vec<[f64; 3]> = (0..100_000u64)
            .into_par_iter()
            .map(|i| {
                let s = stick_break(theta, k, &mut child_rng(block_seed, i));
                [s.x.phi(2), s.x.phi(3), s.x.phi(4)]
            })
            .collect();
        for (j, m) in [2u32, 3, 4].into_iter().enumerate() {
            let stats: RunningStats = samples.iter().map(|s| s[j]).collect();
            let exact = pd_moment(m, theta, 1.0);
            let z = (stats.mean() - exact).abs() / stats.std_error();
            max_z = max_z.max(z);
            table.rows.push(vec![theta, m as f64, stats.mean(), stats.std_error(), exact, z]);
        }
    }
    let det = stick_break_from_uniforms(&[0.5, 0.5, 0.5]);
    let exact = det.v == vec![0.5, 0.25, 0.125];
    checked(
        9,
        "Poisson-Dirichlet sampler",
        max_z <= 3.0 && exact,
        format!("max |z| = {max_z:.2} (<= 3); U = (1/2,1/2,1/2) gives {:?}", det.v),
        table,
    )
}

/// Random configuration with the tracked site 0 in the fast phase (`fast`) or not.
fn coupling_configuration<R: Rng>(rng: &mut R, a: usize, sites: usize, particles: u64, fast: bool) -> Configuration {
    let au = a as u64;
    loop {
        let mut occ = vec![0u64; sites];
        let first_pile = if fast { 0 } else { 1 };
        let gamma: f64 = if fast { rng.random_range(0.1..0.95) } else { rng.random_range(0.0..0.95) };
        let excess = if fast {
            ((gamma * particles as f64).floor() as u64 + 1).max(1)
        } else {
            (gamma * particles as f64).floor() as u64
        };
        let piles = if excess == 0 { 0 } else { rng.random_range(1..=10usize).min(excess as usize) };
        if !fast {
            occ[0] = rng.random_range(0..=au);
        }
        if piles > 0 {
            let mut cuts: Vec<u64> = sample_indices(rng, excess as usize - 1, piles - 1)
                .into_iter()
                .map(|c| c as u64 + 1)
                .collect();
            cuts.sort_unstable();
            cuts.insert(0, 0);
            cuts.push(excess);
            for p in 0..piles {
                occ[first_pile + p] = au + cuts[p + 1] - cuts[p];
            }
        }
        let used: u64 = occ.iter().sum();
        let slow_sites: Vec<usize> = (first_pile + piles..sites).collect();
        let capacity = slow_sites.len() * a;
        if used > particles || (particles - used) as usize > capacity {
            continue;
        }
        for slot in sample_indices(rng, capacity, (particles - used) as usize) {
            occ[slow_sites[slot / a]] += 1;
        }
        return Configuration::new(occ, a).expect("valid configuration");
    }
}

fn c10(seed: u64) -> Checked {
    let mut rng = rng_from_seed(seed);
    let (sites, particles, delta) = (1000usize, 1000u64, 0.1);
    let mut violations = 0usize;
    let mut misrouted = 0usize;
    let mut min_slack: BTreeMap<String, f64> = BTreeMap::new();
    let mut counts = [0usize; 2];
    let mut first_violation = None;
    for fast in [true, false] {
        for i in 0..1000 {
            let a = 1 + i % 2;
            let spec = RateSpec::leading_example(a, 1.0).unwrap();
            let eta = coupling_configuration(&mut rng, a, sites, particles, fast);
            match check_coupling_bounds(&eta, &spec, delta, 0) {
                Ok(report) => {
                    let expected = if fast { CouplingBranch::Fast } else { CouplingBranch::Slow };
                    if report.branch != expected {
                        misrouted += 1;
                    }
                    counts[usize::from(!fast)] += 1;
                    for c in report.checks {
                        let e = min_slack.entry(c.name.to_string()).or_insert(f64::INFINITY);
                        *e = e.min(c.slack);
                    }
                }
                Err(ConfigurationError::BoundViolation { check, value, bound, .. }) => {
                    violations += 1;
                    first_violation.get_or_insert(format!("{check}: {value} vs {bound}"));
                }
                Err(e) => {
                    violations += 1;
                    first_violation.get_or_insert(e.to_string());
                }
            }
        }
    }
    let mut table = Table::new(&["check", "min_slack"]);
    for (i, (_, slack)) in min_slack.iter().enumerate() {
        table.rows.push(vec![i as f64, *slack]);
    }
    let slack_text: Vec<String> = min_slack.iter().map(|(k, v)| format!("{k}: min slack {v:.3e}")).collect();
    checked(
        10,
        "coupling rate bounds",
        violations == 0 && misrouted == 0,
        format!(
            "{violations} violations, {misrouted} misrouted over {} fast + {} slow configurations; {}{}",
            counts[0],
            counts[1],
            slack_text.join("; "),
            first_violation.map(|v| format!("; first: {v}")).unwrap_or_default()
        ),
        table,
    )
}

fn c11(seed: u64) -> Result<Checked, HarnessError> {
    let (a, theta, l, n) = (1u64, 1.0, 2usize, 3u64);
    // u1, u2 of the leading example written out directly
    let u1 = |k: u64| if k > a { (k - a) as f64 } else if k > 0 { theta / l as f64 } else { 0.0 };
    let u2 = |k: u64| if k > a { (k - a) as f64 } else { 0.0 } + theta / l as f64;
    let spec = RateSpec::leading_example(a as usize, theta).unwrap();
    let mut sim = SimState::init(spec, l, n, &InitialCondition::SinglePile, seed)
        .map_err(|source| HarnessError::Replica { replica: 0, source })?;
    let mut time_in = [0.0f64; 4];
    let mut jumps = [[0u64; 2]; 4]; // [state][0: site 0 -> 1, 1: site 1 -> 0]
    let mut state = sim.config().occupations()[0] as usize;
    let mut entered = 0.0;
    for _ in 0..1_000_000 {
        let ev = sim.step().map_err(|source: SimError| HarnessError::Replica { replica: 0, source })?;
        if let Event::Move { from, time, .. } = ev {
            time_in[state] += time - entered;
            jumps[state][from] += 1;
            entered = time;
            state = sim.config().occupations()[0] as usize;
        }
    }
    time_in[state] += sim.clock() - entered;
    let mut table = Table::new(&["eta0", "direction", "count", "time", "estimate", "se", "exact", "z"]);
    let mut max_z = 0.0_f64;
    for eta0 in 0..=n {
        let eta1 = n - eta0;
        for (dir, exact) in [(0usize, u1(eta0) * u2(eta1)), (1usize, u1(eta1) * u2(eta0))] {
            if exact == 0.0 {
                if jumps[eta0 as usize][dir] != 0 {
                    max_z = f64::INFINITY;
                }
                continue;
            }
            let count = jumps[eta0 as usize][dir];
            let t = time_in[eta0 as usize];
            let est = count as f64 / t;
            let se = (count as f64).sqrt() / t;
            let z = (est - exact).abs() / se;
            max_z = max_z.max(z);
            table.rows.push(vec![eta0 as f64, dir as f64, count as f64, t, est, se, exact, z]);
        }
    }
    Ok(checked(
        11,
        "small-instance generator",
        max_z <= 3.0,
        format!(
            "L = 2, N = 3, 10^6 events, {} transitions: max |z| = {max_z:.2} (<= 3)",
            table.rows.len()
        ),
        table,
    ))
}

fn timed(f: impl FnOnce() -> Result<Checked, HarnessError>) -> Result<Checked, HarnessError> {
    let start = Instant::now();
    let mut c = f()?;
    c.outcome.seconds = start.elapsed().as_secs_f64();
    Ok(c)
}

fn run_criteria(master: u64) -> Result<Vec<Checked>, HarnessError> {
    let s = |id: u64| child_seed(master, id);
    Ok(vec![
        timed(c1)?,
        timed(|| Ok(c2(s(2))))?,
        timed(|| Ok(c3(s(3))))?,
        timed(c4)?,
        timed(|| c5(s(5)))?,
        timed(|| c6(s(6)))?,
        timed(|| c7(s(7)))?,
        timed(|| c8(s(8)))?,
        timed(|| Ok(c9(s(9))))?,
        timed(|| Ok(c10(s(10))))?,
        timed(|| c11(s(11)))?,
    ])
}

fn csv_name(id: u32) -> String {
    format!("criterion_{id:02}.csv")
}

fn write_tables(dir: &Path, checks: &[Checked]) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    for c in checks {
        let path = dir.join(csv_name(c.outcome.id));
        fs::write(&path, c.table.render()).map_err(|e| HarnessError::io(&path, e))?;
    }
    Ok(())
}

fn read_tables(dir: &Path, checks: &[Checked]) -> Result<Vec<Vec<u8>>, HarnessError> {
    checks
        .iter()
        .map(|c| {
            let path = dir.join(csv_name(c.outcome.id));
            fs::read(&path).map_err(|e| HarnessError::io(&path, e))
        })
        .collect()
}

/// Runs criteria 1 to 11, then 12 when requested, writing CSVs to `out_dir` if given.
pub fn run_suite(opts: &VerifyOptions) -> Result<VerifyReport, HarnessError> {
    let first = run_criteria(opts.master_seed)?;
    if let Some(dir) = &opts.out_dir {
        write_tables(dir, &first)?;
    }
    let mut diagnostics: Vec<String> = first.iter().flat_map(|c| c.diagnostics.clone()).collect();
    let mut outcomes: Vec<CriterionOutcome> = first.iter().map(|c| c.outcome.clone()).collect();
    if opts.check_reproducibility {
        let start = Instant::now();
        let second = run_criteria(opts.master_seed)?;
        let (a, b) = match &opts.out_dir {
            Some(dir) => {
                let rerun = dir.join("rerun");
                write_tables(&rerun, &second)?;
                (read_tables(dir, &first)?, read_tables(&rerun, &second)?)
            }
            None => (
                first.iter().map(|c| c.table.render().into_bytes()).collect(),
                second.iter().map(|c| c.table.render().into_bytes()).collect(),
            ),
        };
        let differing: Vec<String> = first
            .iter()
            .zip(a.iter().zip(&b))
            .filter(|(_, (x, y))| x != y)
            .map(|(c, _)| csv_name(c.outcome.id))
            .collect();
        let mut summary = String::new();
        let total: usize = a.iter().map(Vec::len).sum();
        if differing.is_empty() {
            let _ = write!(summary, "{} CSVs ({total} bytes) identical across two runs", a.len());
        } else {
            let _ = write!(summary, "differing: {}", differing.join(", "));
        }
        outcomes.push(CriterionOutcome {
            id: 12,
            name: "reproducibility".into(),
            passed: differing.is_empty(),
            summary,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    for &(id, why) in UNATTAINABLE {
        if outcomes.iter().any(|o| o.id == id && !o.passed) {
            diagnostics.push(format!("criterion {id} is unattainable as stated: {why}"));
        }
    }
    Ok(VerifyReport { outcomes, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_criteria_pass() {
        assert!(c1().unwrap().outcome.passed);
        assert!(c2(1).outcome.passed);
        assert!(c4().unwrap().outcome.passed);
    }

    #[test]
    fn coupling_configurations_land_in_the_right_branch() {
        let mut rng = rng_from_seed(3);
        for fast in [true, false] {
            for a in [1, 2] {
                let eta = coupling_configuration(&mut rng, a, 200, 200, fast);
                assert_eq!(eta.particles(), 200);
                assert_eq!(eta.occupations()[0] > a as u64, fast);
                if fast {
                    assert!(crate::configuration::gamma_n(&eta) > 0.1);
                }
            }
        }
    }

    #[test]
    fn table_rendering() {
        let mut t = Table::new(&["a", "b"]);
        t.rows.push(vec![0.5, f64::NAN]);
        assert_eq!(t.render(), "# condensate-sim v1\na,b\n0.5,NaN\n");
    }
}
