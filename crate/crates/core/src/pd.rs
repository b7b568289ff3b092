//! Poisson-Dirichlet samplers and the multi-loci Wright-Fisher approximation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::configuration::EmbeddedState;
use crate::kingman::KingmanVector;
use crate::model::{ControlState, ModelParams};
use crate::ode::{clamp_to_simplex, rk4_step, Rk4Work};

/// Stick-breaking output: raw weights in draw order and the sorted cluster vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdSample {
    pub v: Vec<f64>,
    /// Mass left after the last stick, `prod (1 - U_i)`, before scaling.
    pub residual: f64,
    pub x: KingmanVector,
}

/// Stick-breaking from given uniforms `U_i`.
pub fn stick_break_from_uniforms(us: &[f64]) -> PdSample {
    let mut v = Vec::with_capacity(us.len());
    let mut rest = 1.0;
    for &u in us {
        v.push(u * rest);
        rest *= 1.0 - u;
    }
    PdSample {
        x: KingmanVector::from_unsorted(v.clone()),
        v,
        residual: rest,
    }
}

/// Number of sticks leaving expected residual mass `eps`: `E[prod(1-U_i)] = (theta/(1+theta))^K`.
pub fn default_truncation(theta: f64, eps: f64) -> usize {
    assert!(theta > 0.0 && eps > 0.0 && eps < 1.0);
    (eps.ln() / (theta / (1.0 + theta)).ln()).ceil().max(1.0) as usize
}

/// `K` sticks with `U_i ~ Beta(1, theta)`.
pub fn stick_break<R: Rng + ?Sized>(theta: f64, k: usize, rng: &mut R) -> PdSample {
    assert!(theta > 0.0, "theta must be positive");
    assert!(k >= 1, "need at least one stick");
    let beta = Beta::new(1.0, theta).expect("valid Beta(1, theta)");
    let us: Vec<f64> = (0..k).map(|_| beta.sample(rng)).collect();
    stick_break_from_uniforms(&us)
}

/// A draw from `PD(theta)` scaled by `gamma`; `gamma = 0` gives the zero vector.
pub fn sample_pd_scaled<R: Rng + ?Sized>(theta: f64, gamma: f64, k: usize, rng: &mut R) -> PdSample {
    let s = stick_break(theta, k, rng);
    if gamma == 1.0 {
        return s;
    }
    PdSample {
        x: s.x.scaled(gamma),
        v: s.v.iter().map(|v| v * gamma).collect(),
        residual: s.residual,
    }
}

/// `E[phi_m]` under `PD(theta)` scaled by `gamma`: `gamma^m (m-1)! / prod_{j=1}^{m-1} (theta + j)`.
pub fn pd_moment(m: u32, theta: f64, gamma: f64) -> f64 {
    assert!(m >= 2, "phi_m is defined here for m >= 2");
    let ratio: f64 = (1..m).map(|j| j as f64 / (theta + j as f64)).product();
    gamma.powi(m as i32) * ratio
}

/// How the Wright-Fisher noise `B` with `B B^T = diag(z) - z z^T` is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFactor {
    /// `B xi = sqrt(z) * xi - z <sqrt(z), xi>` over all `M` coordinates; `O(M)`.
    #[default]
    Exact,
    /// Dense Cholesky of `diag(z) - z z^T + eps I` on the first `M - 1` coordinates; `O(M^3)`.
    Cholesky,
}

/// Time stepping of the frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "noise")]
pub enum WfScheme {
    /// Exact squared-Bessel transitions for unnormalised weights started at `zbar`,
    /// run for clock time `dt` and renormalised. Stays on the simplex.
    #[default]
    BesselSplit,
    /// Euler-Maruyama with clipping and rescaling back onto `K_{M-1}`.
    EulerMaruyama(NoiseFactor),
}

const CHOLESKY_JITTER: f64 = 1e-14;

/// State of the `M`-loci Wright-Fisher diffusion with its control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WfState {
    /// All `M` frequencies; the first `M - 1` form the point of `K_{M-1}`.
    zbar: Vec<f64>,
    y: ControlState,
    pub steps: u64,
    /// Steps that needed the projection back to `K_{M-1}`.
    pub projected_steps: u64,
}

impl WfState {
    /// From the first `M - 1` coordinates `z`.
    pub fn new(z: &[f64], y: ControlState) -> Self {
        assert!(!z.is_empty(), "need M >= 2 loci");
        let sum: f64 = z.iter().sum();
        assert!(
            z.iter().all(|&v| v >= 0.0) && sum <= 1.0 + 1e-12,
            "z must lie in K_(M-1)"
        );
        let mut zbar = z.to_vec();
        zbar.push((1.0 - sum).max(0.0));
        Self {
            zbar,
            y,
            steps: 0,
            projected_steps: 0,
        }
    }

    /// Equal frequencies `1/M` on all loci.
    pub fn uniform(loci: usize, y: ControlState) -> Self {
        assert!(loci >= 2);
        Self::new(&vec![1.0 / loci as f64; loci - 1], y)
    }

    pub fn loci(&self) -> usize {
        self.zbar.len()
    }

    /// The point `z` of `K_{M-1}`.
    pub fn z(&self) -> &[f64] {
        &self.zbar[..self.zbar.len() - 1]
    }

    /// `(z, 1 - sum z)`.
    pub fn zbar(&self) -> &[f64] {
        &self.zbar
    }

    pub fn y(&self) -> &ControlState {
        &self.y
    }

    pub fn projection_fraction(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.projected_steps as f64 / self.steps as f64
        }
    }

    /// `phi_m` of the projected cluster vector, `gamma^m sum zbar_i^m`, without sorting.
    pub fn phi(&self, params: &ModelParams, m: u32) -> f64 {
        let g = params.gamma(&self.y);
        g.powi(m as i32) * self.zbar.iter().map(|z| z.powi(m as i32)).sum::<f64>()
    }
}

/// Scratch space for [`wf_step`].
#[derive(Debug, Clone, Default)]
pub struct WfWork {
    xi: Vec<f64>,
    noise: Vec<f64>,
    rk4: Rk4Work,
}

fn exact_noise(zbar: &[f64], xi: &[f64], out: &mut [f64]) {
    let roots: f64 = zbar.iter().zip(xi).map(|(z, x)| z.max(0.0).sqrt() * x).sum();
    for ((o, z), x) in out.iter_mut().zip(zbar).zip(xi) {
        *o = z.max(0.0).sqrt() * x - z * roots;
    }
}

fn cholesky_noise(zbar: &[f64], xi: &[f64], out: &mut [f64]) {
    let d = zbar.len() - 1;
    let z = DVector::from_column_slice(&zbar[..d]);
    let mut cov = DMatrix::from_diagonal(&z) - &z * z.transpose();
    for i in 0..d {
        cov[(i, i)] += CHOLESKY_JITTER;
    }
    let l = cov
        .cholesky()
        .expect("diag(z) - z z^T + eps I is positive definite")
        .unpack();
    let b = l * DVector::from_column_slice(&xi[..d]);
    out[..d].copy_from_slice(b.as_slice());
    out[d] = -b.sum();
}

fn euler_step<R: Rng + ?Sized>(
    zbar: &mut [f64],
    beta: f64,
    dt: f64,
    noise: NoiseFactor,
    rng: &mut R,
    work: &mut WfWork,
) {
    let m = zbar.len();
    work.xi.resize(m, 0.0);
    work.noise.resize(m, 0.0);
    for x in work.xi.iter_mut() {
        *x = rng.sample(StandardNormal);
    }
    match noise {
        NoiseFactor::Exact => exact_noise(zbar, &work.xi, &mut work.noise),
        NoiseFactor::Cholesky => cholesky_noise(zbar, &work.xi, &mut work.noise),
    }
    let mutation = 1.0 / (m - 1) as f64;
    let amp = (2.0 * dt).sqrt();
    for (z, n) in zbar.iter_mut().zip(&work.noise) {
        *z += beta * (mutation * (1.0 - *z) - *z) * dt + amp * n;
    }
    // the last coordinate stays 1 - sum of the others
    let head: f64 = zbar[..m - 1].iter().sum();
    zbar[m - 1] = 1.0 - head;
}

/// Weights `X_i` with generator `x d^2 + a d`, `a = beta / (M - 1)`, started at `zbar`
/// and run for time `dt`: `X = dt * Gamma(a + N)`, `N ~ Poisson(z / dt)`.
/// Normalising gives the Wright-Fisher frequencies after the random time change `dt / S`.
fn bessel_step<R: Rng + ?Sized>(zbar: &mut [f64], beta: f64, dt: f64, rng: &mut R) {
    let a = beta / (zbar.len() - 1) as f64;
    let old = zbar.to_vec();
    let mut total = 0.0;
    for z in zbar.iter_mut() {
        let n = if *z > 0.0 {
            Poisson::new(*z / dt).expect("finite Poisson mean").sample(rng)
        } else {
            0.0
        };
        let shape = a + n;
        *z = if shape > 0.0 {
            dt * Gamma::new(shape, 1.0).expect("positive Gamma shape").sample(rng)
        } else {
            0.0
        };
        total += *z;
    }
    if total > 0.0 {
        zbar.iter_mut().for_each(|z| *z /= total);
    } else {
        zbar.copy_from_slice(&old);
    }
}

/// One step of size `dt`: frequencies, then one RK4 step of the control, then the projection.
///
/// The frequency update uses `beta_bar(y)` at the start of the step for Euler-Maruyama and
/// the average over the step's endpoints for the Bessel split.
pub fn wf_step<R: Rng + ?Sized>(
    state: &mut WfState,
    params: &ModelParams,
    dt: f64,
    scheme: WfScheme,
    rng: &mut R,
    work: &mut WfWork,
) {
    let beta_start = params.beta_bar(&state.y);
    let mut y = state.y.as_slice().to_vec();
    if !y.is_empty() {
        rk4_step(params, &mut y, dt, &mut work.rk4);
        clamp_to_simplex(&mut y, 0.0).expect("control step left the simplex");
    }
    let y_next = ControlState::from_vec_unchecked(y);
    match scheme {
        WfScheme::EulerMaruyama(noise) => {
            euler_step(&mut state.zbar, beta_start, dt, noise, rng, work)
        }
        WfScheme::BesselSplit => {
            let beta = 0.5 * (beta_start + params.beta_bar(&y_next));
            bessel_step(&mut state.zbar, beta, dt, rng);
        }
    }
    state.y = y_next;
    state.steps += 1;
    if project_to_simplex(&mut state.zbar) {
        state.projected_steps += 1;
    }
}

/// Clips negative frequencies and rescales if the total exceeds 1; returns whether anything changed.
fn project_to_simplex(zbar: &mut [f64]) -> bool {
    let mut changed = false;
    for z in zbar.iter_mut() {
        if *z < 0.0 {
            *z = 0.0;
            changed = true;
        }
    }
    if changed {
        let sum: f64 = zbar.iter().sum();
        if sum > 1.0 {
            zbar.iter_mut().for_each(|z| *z /= sum);
        }
    }
    changed
}

/// `Pi(z, y) = (gamma(y) * sorted(zbar), y)`.
pub fn project_pi(state: &WfState, params: &ModelParams) -> EmbeddedState {
    let g = params.gamma(&state.y);
    EmbeddedState {
        x: KingmanVector::from_unsorted(state.zbar.clone()).scaled(g),
        y: state.y.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RateSpec;
    use crate::stats::RunningStats;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn halving_sticks() {
        let s = stick_break_from_uniforms(&[0.5, 0.5, 0.5]);
        assert_eq!(s.v, vec![0.5, 0.25, 0.125]);
        assert_eq!(s.residual, 0.125);
        assert_eq!(s.x.entries(), &[0.5, 0.25, 0.125]);
    }

    #[test]
    fn residual_is_product_of_complements() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s = stick_break(0.7, 20, &mut rng);
            let sum: f64 = s.v.iter().sum();
            assert!((1.0 - sum - s.residual).abs() < 1e-12);
            assert!(s.x.entries().windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn truncation_rule() {
        // theta = 1: ceil(ln 1e-10 / ln(1/2)) = 34
        assert_eq!(default_truncation(1.0, 1e-10), 34);
        assert_eq!(default_truncation(2.0, 1e-10), 57);
    }

    #[test]
    fn moment_closed_form() {
        assert!((pd_moment(2, 1.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((pd_moment(3, 1.0, 1.0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((pd_moment(2, 1.0, 0.5) - 0.125).abs() < 1e-15);
        assert_eq!(pd_moment(2, 1.0, 0.0), 0.0);
    }

    #[test]
    fn scaled_samples() {
        let mut a = ChaCha8Rng::seed_from_u64(2);
        let mut b = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(sample_pd_scaled(1.0, 1.0, 30, &mut a), stick_break(1.0, 30, &mut b));
        let z = sample_pd_scaled(1.0, 0.0, 30, &mut a);
        assert_eq!(z.x, KingmanVector::zero());
        let mut stats = RunningStats::new();
        for _ in 0..20_000 {
            stats.push(sample_pd_scaled(1.0, 0.5, 40, &mut a).x.phi(2));
        }
        assert!((stats.mean() - 0.125).abs() < 4.0 * stats.std_error());
    }

    #[test]
    fn exact_noise_covariance() {
        // E[n n^T] = diag(z) - z z^T, checked exactly via the linear map xi -> n
        let zbar = [0.1, 0.2, 0.3, 0.4];
        let m = zbar.len();
        let mut cov = vec![vec![0.0; m]; m];
        for basis in 0..m {
            let mut xi = vec![0.0; m];
            xi[basis] = 1.0;
            let mut n = vec![0.0; m];
            exact_noise(&zbar, &xi, &mut n);
            for i in 0..m {
                for j in 0..m {
                    cov[i][j] += n[i] * n[j];
                }
            }
        }
        for i in 0..m {
            for j in 0..m {
                let want = if i == j { zbar[i] } else { 0.0 } - zbar[i] * zbar[j];
                assert!((cov[i][j] - want).abs() < 1e-15);
            }
        }
        // the Cholesky factor realises the same covariance on the first M - 1 coordinates
        let mut chol = vec![vec![0.0; m - 1]; m - 1];
        for basis in 0..m {
            let mut xi = vec![0.0; m];
            xi[basis] = 1.0;
            let mut n = vec![0.0; m];
            cholesky_noise(&zbar, &xi, &mut n);
            for i in 0..m - 1 {
                for j in 0..m - 1 {
                    chol[i][j] += n[i] * n[j];
                }
            }
        }
        for i in 0..m - 1 {
            for j in 0..m - 1 {
                assert!((chol[i][j] - cov[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vertex_is_fixed_without_mutation() {
        // A = 1, rho = 1, y_0 = 1: beta_bar = Theta y_1 = 0 and the noise vanishes at a vertex
        let p = ModelParams::new(RateSpec::leading_example(1, 1.0).unwrap(), 1.0).unwrap();
        let mut s = WfState::new(&[1.0, 0.0], p.empty_slow_phase());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = WfWork::default();
        wf_step(&mut s, &p, 1e-3, WfScheme::BesselSplit, &mut rng, &mut w);
        assert_eq!(s.z(), &[1.0, 0.0]);
    }

    #[test]
    fn projection_examples() {
        let p = ModelParams::new(RateSpec::leading_example(1, 1.0).unwrap(), 1.0).unwrap();
        let s = WfState::new(&[0.2, 0.3], p.empty_slow_phase());
        let e = project_pi(&s, &p);
        let want = [0.5, 0.3, 0.2];
        for (a, b) in e.x.entries().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let dead = WfState::new(&[0.2, 0.3], ControlState::new(vec![0.0]).unwrap());
        assert_eq!(project_pi(&dead, &p).x, KingmanVector::zero());
        let half = WfState::new(&[0.2, 0.3], ControlState::new(vec![0.5]).unwrap());
        assert!((project_pi(&half, &p).x.sum() - p.gamma(half.y())).abs() < 1e-15);
    }

    /// `A = 0` gives constant `gamma = 1` and `beta_bar = Theta`.
    fn classical(theta: f64) -> ModelParams {
        ModelParams::new(RateSpec::leading_example(0, theta).unwrap(), 1.0).unwrap()
    }

    #[test]
    fn two_loci_moments() {
        // dE z = b (1 - 2 E z), dE z^2 = 2 b (E z - 2 E z^2) + 2 (E z - E z^2)
        let p = classical(1.0);
        let (dt, t_end, paths): (f64, f64, usize) = (1e-3, 0.5, 4000);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut w = WfWork::default();
        let mut m1 = RunningStats::new();
        let mut m2 = RunningStats::new();
        for _ in 0..paths {
            let mut s = WfState::new(&[0.8], p.empty_slow_phase());
            for _ in 0..(t_end / dt).round() as usize {
                wf_step(&mut s, &p, dt, WfScheme::BesselSplit, &mut rng, &mut w);
            }
            m1.push(s.z()[0]);
            m2.push(s.z()[0] * s.z()[0]);
        }
        let (mut e1, mut e2) = (0.8, 0.64);
        let h = 1e-4;
        for _ in 0..(t_end / h).round() as usize {
            let d1 = 1.0 - 2.0 * e1;
            let d2 = 2.0 * (e1 - 2.0 * e2) + 2.0 * (e1 - e2);
            e1 += h * d1;
            e2 += h * d2;
        }
        assert!((m1.mean() - e1).abs() < 4.0 * m1.std_error(), "{} vs {e1}", m1.mean());
        assert!((m2.mean() - e2).abs() < 4.0 * m2.std_error(), "{} vs {e2}", m2.mean());
    }

    #[test]
    fn constant_beta_rescaling() {
        // psi = sum zbar^2 solves dE psi = 2 + 2b/(M-1) - (2 + 2b + 2b/(M-1)) E psi
        let b = 1.0;
        let p = classical(b);
        let loci = 10;
        let (dt, t_end, paths): (f64, f64, usize) = (1e-3, 0.4, 2000);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut w = WfWork::default();
        let mut phi2 = RunningStats::new();
        for _ in 0..paths {
            let mut s = WfState::uniform(loci, p.empty_slow_phase());
            for _ in 0..(t_end / dt).round() as usize {
                wf_step(&mut s, &p, dt, WfScheme::BesselSplit, &mut rng, &mut w);
            }
            phi2.push(project_pi(&s, &p).x.phi(2));
        }
        let mu = b / (loci - 1) as f64;
        let rate = 2.0 + 2.0 * b + 2.0 * mu;
        let stationary = (2.0 + 2.0 * mu) / rate;
        let psi0 = 1.0 / loci as f64;
        let exact = stationary + (psi0 - stationary) * (-rate * t_end).exp();
        assert!((phi2.mean() - exact).abs() < 4.0 * phi2.std_error(), "{} vs {exact}", phi2.mean());
    }

    #[test]
    fn cholesky_and_exact_agree_in_law() {
        let p = classical(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut w = WfWork::default();
        let mut means = Vec::new();
        for noise in [NoiseFactor::Exact, NoiseFactor::Cholesky] {
            let mut stats = RunningStats::new();
            for _ in 0..1500 {
                let mut s = WfState::uniform(5, p.empty_slow_phase());
                for _ in 0..200 {
                    wf_step(&mut s, &p, 1e-3, WfScheme::EulerMaruyama(noise), &mut rng, &mut w);
                }
                stats.push(s.phi(&p, 2));
            }
            means.push(stats);
        }
        let se = (means[0].std_error().powi(2) + means[1].std_error().powi(2)).sqrt();
        assert!((means[0].mean() - means[1].mean()).abs() < 4.0 * se);
    }

    #[test]
    fn simplex_after_every_step() {
        let p = ModelParams::new(RateSpec::leading_example(1, 1.0).unwrap(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut w = WfWork::default();
        for scheme in [WfScheme::BesselSplit, WfScheme::EulerMaruyama(NoiseFactor::Exact)] {
            let mut s = WfState::uniform(50, p.empty_slow_phase());
            for _ in 0..2000 {
                wf_step(&mut s, &p, 1e-3, scheme, &mut rng, &mut w);
                assert!(s.z().iter().all(|&z| z >= 0.0));
                assert!(s.z().iter().sum::<f64>() <= 1.0 + 1e-10);
            }
            if scheme == WfScheme::BesselSplit {
                assert!(s.projection_fraction() < 0.05);
            }
        }
    }

    #[test]
    fn euler_vertex_is_fixed() {
        let p = ModelParams::new(RateSpec::leading_example(1, 1.0).unwrap(), 1.0).unwrap();
        let mut s = WfState::new(&[0.0, 1.0, 0.0], p.empty_slow_phase());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = WfWork::default();
        wf_step(&mut s, &p, 1e-3, WfScheme::EulerMaruyama(NoiseFactor::Exact), &mut rng, &mut w);
        assert_eq!(s.z(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn euler_bias_shrinks_with_step() {
        let p = classical(1.0);
        let loci = 10;
        let mu = 1.0 / (loci - 1) as f64;
        let rate = 4.0 + 2.0 * mu;
        let stationary = (2.0 + 2.0 * mu) / rate;
        let t_end: f64 = 0.4;
        let exact = stationary + (0.1 - stationary) * (-rate * t_end).exp();
        let bias = |dt: f64| {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let mut w = WfWork::default();
            let mut stats = RunningStats::new();
            for _ in 0..4000 {
                let mut s = WfState::uniform(loci, p.empty_slow_phase());
                for _ in 0..(t_end / dt).round() as usize {
                    wf_step(&mut s, &p, dt, WfScheme::EulerMaruyama(NoiseFactor::Exact), &mut rng, &mut w);
                }
                stats.push(s.phi(&p, 2));
            }
            (stats.mean() - exact).abs()
        };
        assert!(bias(1e-3) < bias(4e-3));
    }
}
