//! Fixed-step RK4 integration of the control system `dY/dt = b(Y)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ControlState, ModelError, ModelParams};

/// Largest simplex violation absorbed by clamping.
pub const CLAMP_BUDGET: f64 = 1e-9;
/// Endpoint change under step halving accepted as converged.
pub const HALVING_TOL: f64 = 1e-10;
/// Default drift threshold for fixed-point detection.
pub const FIXED_POINT_TOL: f64 = 1e-12;

const INITIAL_STEP: f64 = 0.05;
const MAX_HALVINGS: u32 = 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("step at t = {time} left the simplex by {violation:e}")]
    StepRejected { time: f64, violation: f64 },
    #[error("step halving did not converge below {HALVING_TOL:e} (last change {change:e})")]
    NoStepConvergence { change: f64 },
    #[error("time grid must be non-empty, start at 0 or later and be non-decreasing")]
    BadGrid,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeSolution {
    pub times: Vec<f64>,
    pub states: Vec<ControlState>,
    pub gamma_track: Vec<f64>,
    pub theta_track: Vec<f64>,
    /// Largest substep used on any grid interval.
    pub step: f64,
}

impl OdeSolution {
    pub fn final_state(&self) -> &ControlState {
        self.states.last().expect("solution has at least one point")
    }
}

/// Drift of the full vector `(y_0..y_A)`, written into `out[..A]`.
fn drift(params: &ModelParams, y: &[f64], out: &mut [f64], full: &mut Vec<f64>) {
    full.clear();
    full.extend_from_slice(y);
    full.push(1.0 - y.iter().sum::<f64>());
    let slow_mass: f64 = full.iter().enumerate().map(|(k, v)| k as f64 * v).sum();
    let gamma = (1.0 - slow_mass / params.rho).max(0.0);
    params.drift_into(full, gamma, out);
}

/// Scratch buffers for [`rk4_step`].
#[derive(Debug, Clone, Default)]
pub(crate) struct Rk4Work {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
    full: Vec<f64>,
}

/// One classical RK4 step of size `h` in place.
pub(crate) fn rk4_step(params: &ModelParams, y: &mut [f64], h: f64, w: &mut Rk4Work) {
    let n = y.len();
    for k in w.k.iter_mut() {
        k.resize(n, 0.0);
    }
    w.tmp.resize(n, 0.0);
    drift(params, y, &mut w.k[0], &mut w.full);
    for stage in 1..4 {
        let c = if stage == 3 { h } else { h / 2.0 };
        for i in 0..n {
            w.tmp[i] = y[i] + c * w.k[stage - 1][i];
        }
        drift(params, &w.tmp, &mut w.k[stage], &mut w.full);
    }
    for i in 0..n {
        y[i] += h / 6.0 * (w.k[0][i] + 2.0 * w.k[1][i] + 2.0 * w.k[2][i] + w.k[3][i]);
    }
}

/// Distance of `y` (with implied last entry) outside the simplex.
fn simplex_violation(y: &[f64]) -> f64 {
    let sum: f64 = y.iter().sum();
    let mut v = (sum - 1.0).max(0.0);
    for &x in y {
        v = v.max(-x).max(x - 1.0);
    }
    v
}

/// Clamps `y` back onto the simplex if it is within budget.
pub(crate) fn clamp_to_simplex(y: &mut [f64], time: f64) -> Result<(), OdeError> {
    let violation = simplex_violation(y);
    if violation == 0.0 {
        return Ok(());
    }
    if violation > CLAMP_BUDGET {
        return Err(OdeError::StepRejected { time, violation });
    }
    for x in y.iter_mut() {
        *x = x.clamp(0.0, 1.0);
    }
    let sum: f64 = y.iter().sum();
    if sum > 1.0 {
        for x in y.iter_mut() {
            *x /= sum;
        }
    }
    Ok(())
}

fn check_grid(grid: &[f64]) -> Result<(), OdeError> {
    if grid.is_empty() || !(grid[0] >= 0.0) || grid.windows(2).any(|w| !(w[1] >= w[0])) {
        return Err(OdeError::BadGrid);
    }
    Ok(())
}

/// Integrates with substeps of size at most `h` on every grid interval.
pub fn integrate_fixed(
    params: &ModelParams,
    y0: &ControlState,
    grid: &[f64],
    h: f64,
) -> Result<Vec<Vec<f64>>, OdeError> {
    check_grid(grid)?;
    let mut y = y0.as_slice().to_vec();
    let mut w = Rk4Work::default();
    let mut out = Vec::with_capacity(grid.len());
    let mut t = grid[0];
    out.push(y.clone());
    for &t_next in &grid[1..] {
        let span = t_next - t;
        let n = (span / h).ceil().max(1.0) as usize;
        let hs = span / n as f64;
        if span > 0.0 {
            for i in 0..n {
                rk4_step(params, &mut y, hs, &mut w);
                clamp_to_simplex(&mut y, t + (i + 1) as f64 * hs)?;
            }
        }
        t = t_next;
        out.push(y.clone());
    }
    Ok(out)
}

fn max_change(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

/// RK4 solution on `grid`, halving the substep until the grid values change by less than `1e-10`.
pub fn integrate(
    params: &ModelParams,
    y0: &ControlState,
    grid: &[f64],
) -> Result<OdeSolution, OdeError> {
    check_grid(grid)?;
    let mut h = INITIAL_STEP;
    let mut coarse = integrate_fixed(params, y0, grid, h)?;
    let mut change = f64::INFINITY;
    for _ in 0..MAX_HALVINGS {
        h /= 2.0;
        let fine = integrate_fixed(params, y0, grid, h)?;
        change = max_change(&coarse, &fine);
        coarse = fine;
        if change < HALVING_TOL {
            return Ok(assemble(params, grid, coarse, h));
        }
    }
    Err(OdeError::NoStepConvergence { change })
}

fn assemble(params: &ModelParams, grid: &[f64], ys: Vec<Vec<f64>>, h: f64) -> OdeSolution {
    let states: Vec<ControlState> = ys.into_iter().map(ControlState::from_vec_unchecked).collect();
    OdeSolution {
        times: grid.to_vec(),
        gamma_track: states.iter().map(|y| params.gamma(y)).collect(),
        theta_track: states.iter().map(|y| params.theta(y)).collect(),
        states,
        step: h,
    }
}

/// Result of a run towards a fixed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTimeGamma {
    pub gamma: f64,
    pub state: ControlState,
    pub time: f64,
    pub drift_norm: f64,
    /// `false` when the horizon was reached with `|b|_inf >= tol`.
    pub converged: bool,
}

/// Integrates until `|b(Y)|_inf < tol` or `horizon`, returning `gamma(Y(end))`.
pub fn long_time_gamma(
    params: &ModelParams,
    y0: &ControlState,
    horizon: f64,
    tol: f64,
) -> Result<LongTimeGamma, OdeError> {
    let h: f64 = 0.01;
    let mut y = y0.as_slice().to_vec();
    let mut w = Rk4Work::default();
    let mut b = vec![0.0; y.len()];
    let mut full = Vec::new();
    let mut t = 0.0;
    let norm = |b: &[f64]| b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    drift(params, &y, &mut b, &mut full);
    while norm(&b) >= tol && t < horizon {
        let step = h.min(horizon - t);
        rk4_step(params, &mut y, step, &mut w);
        t += step;
        clamp_to_simplex(&mut y, t)?;
        drift(params, &y, &mut b, &mut full);
    }
    let drift_norm = norm(&b);
    let state = ControlState::from_vec_unchecked(y);
    Ok(LongTimeGamma {
        gamma: params.gamma(&state),
        state,
        time: t,
        drift_norm,
        converged: drift_norm < tol,
    })
}

/// Time-dependent `gamma(t)` and `theta(t)` driving the limit diffusion.
pub trait Modulation: Sync {
    fn gamma(&self, t: f64) -> f64;
    fn theta(&self, t: f64) -> f64;
    /// `beta(t)`, the rescaled resampling drift; defaults to `theta(t)`.
    fn beta(&self, t: f64) -> f64 {
        self.theta(t)
    }
}

/// Constant `gamma`, `theta` and `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantModulation {
    pub gamma: f64,
    pub theta: f64,
    pub beta: f64,
}

impl ConstantModulation {
    pub fn new(gamma: f64, theta: f64) -> Self {
        Self { gamma, theta, beta: theta }
    }
}

impl Modulation for ConstantModulation {
    fn gamma(&self, _t: f64) -> f64 {
        self.gamma
    }
    fn theta(&self, _t: f64) -> f64 {
        self.theta
    }
    fn beta(&self, _t: f64) -> f64 {
        self.beta
    }
}

/// `gamma`, `theta` and `beta_bar` along a control trajectory, by cubic Hermite interpolation.
#[derive(Debug, Clone)]
pub struct ControlModulation {
    h: f64,
    /// Per node: values and time derivatives of `(gamma, theta, beta_bar)`.
    nodes: Vec<[f64; 6]>,
}

impl ControlModulation {
    /// Tabulates the trajectory from `y0` on `[0, horizon]` with node spacing `h`.
    pub fn new(
        params: &ModelParams,
        y0: &ControlState,
        horizon: f64,
        h: f64,
    ) -> Result<Self, OdeError> {
        let n = (horizon / h).ceil().max(1.0) as usize;
        let h = horizon / n as f64;
        let a = params.threshold();
        let (q, r) = (params.spec.q(), params.spec.r());
        let mut y = y0.as_slice().to_vec();
        let mut w = Rk4Work::default();
        let mut b = vec![0.0; a];
        let mut full = Vec::new();
        let mut nodes = Vec::with_capacity(n + 1);
        for i in 0..=n {
            if i > 0 {
                rk4_step(params, &mut y, h, &mut w);
                clamp_to_simplex(&mut y, i as f64 * h)?;
            }
            drift(params, &y, &mut b, &mut full);
            let state = ControlState::from_vec_unchecked(y.clone());
            let gamma = params.gamma(&state);
            let outflow: f64 = b.iter().sum();
            let dgamma = if gamma > 0.0 {
                b.iter().enumerate().map(|(k, bk)| (a - k) as f64 * bk).sum::<f64>() / params.rho
            } else {
                0.0
            };
            let dtheta = b.iter().enumerate().map(|(k, bk)| (r[k] - q[k]) * bk).sum::<f64>()
                - (r[a] - q[a]) * outflow;
            nodes.push([
                gamma,
                params.theta(&state),
                params.beta_bar(&state),
                dgamma,
                dtheta,
                -r[a] * outflow,
            ]);
        }
        Ok(Self { h, nodes })
    }

    fn eval(&self, t: f64, which: usize) -> f64 {
        let last = self.nodes.len() - 1;
        let s = (t / self.h).clamp(0.0, last as f64);
        let i = (s.floor() as usize).min(last.saturating_sub(1));
        if last == 0 {
            return self.nodes[0][which];
        }
        let u = s - i as f64;
        let (p0, p1) = (self.nodes[i][which], self.nodes[i + 1][which]);
        let (m0, m1) = (self.nodes[i][which + 3] * self.h, self.nodes[i + 1][which + 3] * self.h);
        let u2 = u * u;
        let u3 = u2 * u;
        (2.0 * u3 - 3.0 * u2 + 1.0) * p0
            + (u3 - 2.0 * u2 + u) * m0
            + (-2.0 * u3 + 3.0 * u2) * p1
            + (u3 - u2) * m1
    }
}

impl Modulation for ControlModulation {
    fn gamma(&self, t: f64) -> f64 {
        self.eval(t, 0)
    }
    fn theta(&self, t: f64) -> f64 {
        self.eval(t, 1)
    }
    fn beta(&self, t: f64) -> f64 {
        self.eval(t, 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gamma_closed_form_a1, RateSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(a: usize, theta: f64, rho: f64) -> ModelParams {
        ModelParams::new(RateSpec::leading_example(a, theta).unwrap(), rho).unwrap()
    }

    fn grid(t: f64, n: usize) -> Vec<f64> {
        (0..=n).map(|i| t * i as f64 / n as f64).collect()
    }

    #[test]
    fn fixed_point_is_constant() {
        let p = params(2, 1.0, 3.0);
        let ybar = p.fixed_point_state();
        let sol = integrate(&p, &ybar, &grid(2.0, 10)).unwrap();
        for s in &sol.states {
            for (a, b) in s.as_slice().iter().zip(ybar.as_slice()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn matches_closed_form() {
        for rho in [0.025, 0.25, 0.65, 1.0] {
            let p = params(1, 1.0, rho);
            let sol = integrate(&p, &p.empty_slow_phase(), &grid(3.0, 60)).unwrap();
            for (t, g) in sol.times.iter().zip(&sol.gamma_track) {
                assert!((g - gamma_closed_form_a1(1.0, rho, *t)).abs() < 1e-8, "rho {rho} t {t}");
            }
        }
    }

    #[test]
    fn absorbing_level_set() {
        // A = 1, rho = 1, y_0 = 0: gamma = 0
        let p = params(1, 1.0, 1.0);
        let y0 = ControlState::new(vec![0.0]).unwrap();
        let sol = integrate(&p, &y0, &grid(5.0, 5)).unwrap();
        assert!(sol.states.iter().all(|s| s.as_slice() == [0.0]));
        // A = 2, rho = 0.5: y = (0.5, 0, 0.5) gives slow mass 1 > rho
        let p = params(2, 1.0, 0.5);
        let y0 = ControlState::new(vec![0.5, 0.0]).unwrap();
        let sol = integrate(&p, &y0, &grid(5.0, 5)).unwrap();
        assert!(sol.states.iter().all(|s| s.as_slice() == [0.5, 0.0]));
    }

    #[test]
    fn fourth_order_convergence() {
        let p = params(1, 1.0, 1.0);
        let y0 = p.empty_slow_phase();
        let exact = gamma_closed_form_a1(1.0, 1.0, 3.0);
        let err = |h: f64| {
            let ys = integrate_fixed(&p, &y0, &[0.0, 3.0], h).unwrap();
            let s = ControlState::from_vec_unchecked(ys[1].clone());
            (p.gamma(&s) - exact).abs()
        };
        let (e1, e2) = (err(0.2), err(0.02));
        let order = (e1 / e2).log10();
        assert!((order - 4.0).abs() < 0.3, "observed order {order}");
    }

    #[test]
    fn long_time_limits() {
        let p = params(1, 1.0, 1.0);
        let r = long_time_gamma(&p, &p.empty_slow_phase(), 1e4, FIXED_POINT_TOL).unwrap();
        assert!(r.converged);
        assert!((r.gamma - 0.5).abs() < 1e-6);
        let p = params(1, 1.0, 2.0);
        let r = long_time_gamma(&p, &p.empty_slow_phase(), 1e4, FIXED_POINT_TOL).unwrap();
        assert!((r.gamma - 0.75).abs() < 1e-6);
        let p = params(1, 1.0, 0.25);
        let r = long_time_gamma(&p, &p.empty_slow_phase(), 1e4, FIXED_POINT_TOL).unwrap();
        assert!(r.gamma < 1e-6);
        let short = long_time_gamma(&p, &p.empty_slow_phase(), 0.1, FIXED_POINT_TOL).unwrap();
        assert!(!short.converged);
    }

    #[test]
    fn random_trajectories_stay_in_simplex_and_conserve_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = rng.random_range(1..=4);
            let q: Vec<f64> = (0..a).map(|_| rng.random_range(0.2..3.0)).collect();
            let r: Vec<f64> = (0..=a)
                .map(|k| if k == 0 { rng.random_range(0.2..3.0) } else { q[k - 1] + rng.random_range(0.0..2.0) })
                .collect();
            let spec = RateSpec::generic(&q, &r, 1.0).unwrap();
            let p = ModelParams::new(spec, rng.random_range(0.1..6.0)).unwrap();
            let mut y: Vec<f64> = (0..=a).map(|_| rng.random::<f64>()).collect();
            let z: f64 = y.iter().sum();
            y.iter_mut().for_each(|v| *v /= z);
            y.pop();
            let y0 = ControlState::new(y).unwrap();
            let ys = integrate_fixed(&p, &y0, &grid(2.0, 4), 0.01).unwrap();
            let mass = |s: &ControlState| {
                p.rho * p.gamma_raw(s)
                    + s.full().iter().enumerate().map(|(k, v)| k as f64 * v).sum::<f64>()
            };
            for v in ys {
                let s = ControlState::new(v).unwrap();
                if p.gamma(&s) > 0.0 {
                    assert!((mass(&s) - p.rho).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn clamping_budget() {
        let mut y = vec![-5e-10, 0.5];
        clamp_to_simplex(&mut y, 0.0).unwrap();
        assert_eq!(y, vec![0.0, 0.5]);
        let mut y = vec![-1e-6, 0.5];
        assert!(matches!(clamp_to_simplex(&mut y, 1.0), Err(OdeError::StepRejected { .. })));
    }

    #[test]
    fn hermite_modulation_tracks_closed_form() {
        let p = params(1, 1.0, 1.0);
        let m = ControlModulation::new(&p, &p.empty_slow_phase(), 3.0, 2e-3).unwrap();
        for i in 0..300 {
            let t = 0.00731 * i as f64;
            let err = (m.gamma(t) - gamma_closed_form_a1(1.0, 1.0, t)).abs();
            assert!(err < 1e-9, "t {t}: {err:e}");
            // theta = Theta y_0 and beta_bar = Theta y_1 for the leading example
            assert!((m.theta(t) + m.beta(t) - 1.0).abs() < 1e-9);
        }
    }
}
