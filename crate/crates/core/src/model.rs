//! Two-phase jump rates and the closed-form scalar functions of the limit model.
//!
//! A [`RateSpec`] describes the slow phase (sites holding at most `A`
//! particles, rates of order `1/L`) and the fast phase (sites above `A`,
//! rates `n - A`). [`ModelParams`] adds the density `rho` and evaluates the
//! fast-phase mass `gamma(y)`, the mutation parameter `theta(y)`, the control
//! drift `b(y)` and the rescaled drift `beta(y)` on the slow-phase simplex.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid rate specification: {0}")]
    InvalidRates(String),
    #[error("density must be positive and finite, got {0}")]
    InvalidDensity(f64),
    #[error("control state outside the slow-phase simplex: {0}")]
    InvalidControlState(String),
    #[error("beta is undefined where gamma(y) = 0")]
    DegenerateGamma,
}

/// Jump-rate family of an inclusion process with a slow phase.
///
/// `q[k]` and `r[k]` are the limiting values of `L * u1(k)` and `L * u2(k)`
/// for `k = 0..=A`, with `q[0] = 0`. When `theta_cap` is set the rates are
/// evaluated in the leading-example form `u1(n) = (n-A)1{n>A} + Theta/L 1{0<n<=A}`,
/// `u2(n) = (n-A)1{n>A} + Theta/L`; otherwise the exact representative
/// `q_n/L`, `r_n/L`, `n - A` is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RateSpecFile", into = "RateSpecFile")]
pub struct RateSpec {
    threshold: usize,
    q: Vec<f64>,
    r: Vec<f64>,
    zeta_scale: f64,
    theta_cap: Option<f64>,
}

impl RateSpec {
    /// Leading-example rates with threshold `a` and dissipation `theta`.
    pub fn leading_example(a: usize, theta: f64) -> Result<Self, ModelError> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(ModelError::InvalidRates(format!(
                "theta must be positive, got {theta}"
            )));
        }
        let mut q = vec![theta; a + 1];
        q[0] = 0.0;
        Ok(Self {
            threshold: a,
            q,
            r: vec![theta; a + 1],
            zeta_scale: theta,
            theta_cap: Some(theta),
        })
    }

    /// Generic rates from `q_1..q_A` and `r_0..r_A`.
    pub fn generic(q_slow: &[f64], r: &[f64], zeta_scale: f64) -> Result<Self, ModelError> {
        let spec = Self::from_parts_unchecked(q_slow, r, zeta_scale);
        spec.validate()?;
        Ok(spec)
    }

    /// Builds a generic spec without checking `r_k >= q_k > 0`.
    ///
    /// Used for boundary cases such as `r_A = 0` and for fault injection.
    pub fn from_parts_unchecked(q_slow: &[f64], r: &[f64], zeta_scale: f64) -> Self {
        let mut q = Vec::with_capacity(q_slow.len() + 1);
        q.push(0.0);
        q.extend_from_slice(q_slow);
        Self {
            threshold: q_slow.len(),
            q,
            r: r.to_vec(),
            zeta_scale,
            theta_cap: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let a = self.threshold;
        if self.q.len() != a + 1 || self.r.len() != a + 1 {
            return Err(ModelError::InvalidRates(format!(
                "expected {a} slow send rates and {} target rates, got {} and {}",
                a + 1,
                self.q.len() - 1,
                self.r.len()
            )));
        }
        if self.q[0] != 0.0 {
            return Err(ModelError::InvalidRates("q_0 must be 0".into()));
        }
        if !(self.r[0] > 0.0 && self.r[0].is_finite()) {
            return Err(ModelError::InvalidRates(format!(
                "r_0 must be positive, got {}",
                self.r[0]
            )));
        }
        for k in 1..=a {
            let (q, r) = (self.q[k], self.r[k]);
            if !(q > 0.0 && q.is_finite() && r >= q && r.is_finite()) {
                return Err(ModelError::InvalidRates(format!(
                    "need r_{k} >= q_{k} > 0, got q_{k} = {q}, r_{k} = {r}"
                )));
            }
        }
        if !(self.zeta_scale >= 0.0 && self.zeta_scale.is_finite()) {
            return Err(ModelError::InvalidRates(format!(
                "zeta_scale must be non-negative, got {}",
                self.zeta_scale
            )));
        }
        Ok(())
    }

    /// The threshold `A`.
    pub fn threshold(&self) -> usize {
        self.threshold
    }

    /// `q_0..q_A` with `q_0 = 0`.
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// `r_0..r_A`.
    pub fn r(&self) -> &[f64] {
        &self.r
    }

    pub fn zeta_scale(&self) -> f64 {
        self.zeta_scale
    }

    /// `zeta_L = zeta_scale / L`, the uniform rate perturbation at size `L`.
    pub fn zeta(&self, l: usize) -> f64 {
        self.zeta_scale / l as f64
    }

    pub fn theta_cap(&self) -> Option<f64> {
        self.theta_cap
    }

    pub fn is_leading_example(&self) -> bool {
        self.theta_cap.is_some()
    }

    /// `max_k r_k`.
    pub fn r_max(&self) -> f64 {
        self.r.iter().copied().fold(0.0, f64::max)
    }

    /// `min_{k>=1} q_k`, or `None` when `A = 0`.
    pub fn q_min(&self) -> Option<f64> {
        self.q[1..].iter().copied().reduce(f64::min)
    }

    /// Send rate of a site holding `n` particles in a system of `l` sites.
    pub fn u1(&self, l: usize, n: u64) -> f64 {
        let a = self.threshold as u64;
        if n > a {
            return (n - a) as f64;
        }
        if n == 0 {
            return 0.0;
        }
        match self.theta_cap {
            Some(theta) => theta / l as f64,
            None => self.q[n as usize] / l as f64,
        }
    }

    /// Target (attraction) rate of a site holding `n` particles.
    pub fn u2(&self, l: usize, n: u64) -> f64 {
        let a = self.threshold as u64;
        match self.theta_cap {
            Some(theta) => {
                let fast = if n > a { (n - a) as f64 } else { 0.0 };
                fast + theta / l as f64
            }
            None if n > a => (n - a) as f64,
            None => self.r[n as usize] / l as f64,
        }
    }

    /// Rates at a fixed system size, split into slow tables and fast offsets.
    pub fn rate_table(&self, l: usize) -> RateTable {
        let a = self.threshold as u64;
        let slow_u1 = (0..=a).map(|k| self.u1(l, k)).collect();
        let slow_u2 = (0..=a).map(|k| self.u2(l, k)).collect();
        RateTable {
            slow_u1,
            slow_u2,
            fast_offset1: 0.0,
            fast_offset2: self.theta_cap.map_or(0.0, |theta| theta / l as f64),
        }
    }

    /// Stationary point `ybar` of the control drift, a probability vector on `0..=A`.
    pub fn fixed_point(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.threshold + 1);
        w.push(1.0);
        for k in 1..=self.threshold {
            let prev = w[k - 1];
            w.push(prev * self.r[k - 1] / self.q[k]);
        }
        let z: f64 = w.iter().sum();
        w.iter().map(|v| v / z).collect()
    }

    /// Critical density `rho_c`, the mean of `ybar`.
    pub fn rho_crit(&self) -> f64 {
        self.fixed_point()
            .iter()
            .enumerate()
            .map(|(k, y)| k as f64 * y)
            .sum()
    }
}

/// Rates of a [`RateSpec`] at a fixed system size.
///
/// A fast site with excess `e = n - A >= 1` has rates `e + fast_offset1`
/// and `e + fast_offset2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    pub slow_u1: Vec<f64>,
    pub slow_u2: Vec<f64>,
    pub fast_offset1: f64,
    pub fast_offset2: f64,
}

/// On-disk form of [`RateSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSpecFile {
    #[serde(rename = "A")]
    pub threshold: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    /// `q_1..q_A`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
    /// `r_0..r_A`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta_scale: Option<f64>,
}

impl TryFrom<RateSpecFile> for RateSpec {
    type Error = ModelError;

    fn try_from(file: RateSpecFile) -> Result<Self, Self::Error> {
        match (file.theta, file.q, file.r) {
            (Some(theta), None, None) => {
                let mut spec = RateSpec::leading_example(file.threshold, theta)?;
                if let Some(z) = file.zeta_scale {
                    spec.zeta_scale = z;
                    spec.validate()?;
                }
                Ok(spec)
            }
            (None, Some(q), Some(r)) => {
                if q.len() != file.threshold {
                    return Err(ModelError::InvalidRates(format!(
                        "A = {} but {} send rates given",
                        file.threshold,
                        q.len()
                    )));
                }
                RateSpec::generic(&q, &r, file.zeta_scale.unwrap_or(0.0))
            }
            _ => Err(ModelError::InvalidRates(
                "give either `theta` (leading example) or both `q` and `r`".into(),
            )),
        }
    }
}

impl From<RateSpec> for RateSpecFile {
    fn from(spec: RateSpec) -> Self {
        match spec.theta_cap {
            Some(theta) => RateSpecFile {
                threshold: spec.threshold,
                theta: Some(theta),
                q: None,
                r: None,
                zeta_scale: (spec.zeta_scale != theta).then_some(spec.zeta_scale),
            },
            None => RateSpecFile {
                threshold: spec.threshold,
                theta: None,
                q: Some(spec.q[1..].to_vec()),
                r: Some(spec.r),
                zeta_scale: Some(spec.zeta_scale),
            },
        }
    }
}

/// A point of the slow-phase simplex `S_Y`: fractions of sites holding
/// `0..A-1` particles. The fraction `y_A` is implied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ControlState {
    y: Vec<f64>,
}

/// Slack allowed when validating membership of the simplex.
const SIMPLEX_SLACK: f64 = 1e-12;

impl ControlState {
    pub fn new(y: Vec<f64>) -> Result<Self, ModelError> {
        let state = Self { y };
        state.check()?;
        Ok(state)
    }

    /// Wraps `y` without validation; callers must keep it in `S_Y`.
    pub(crate) fn from_vec_unchecked(y: Vec<f64>) -> Self {
        Self { y }
    }

    fn check(&self) -> Result<(), ModelError> {
        if let Some((k, v)) = self
            .y
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= -SIMPLEX_SLACK && **v <= 1.0 + SIMPLEX_SLACK))
        {
            return Err(ModelError::InvalidControlState(format!("y_{k} = {v}")));
        }
        let s: f64 = self.y.iter().sum();
        if s > 1.0 + SIMPLEX_SLACK {
            return Err(ModelError::InvalidControlState(format!("sum = {s}")));
        }
        Ok(())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// `y_A = 1 - sum_{k<A} y_k`.
    pub fn y_top(&self) -> f64 {
        1.0 - self.y.iter().sum::<f64>()
    }

    /// `(y_0, .., y_{A-1}, y_A)`.
    pub fn full(&self) -> Vec<f64> {
        let mut v = self.y.clone();
        v.push(self.y_top());
        v
    }
}

/// A rate specification together with the particle density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub spec: RateSpec,
    pub rho: f64,
}

impl ModelParams {
    pub fn new(spec: RateSpec, rho: f64) -> Result<Self, ModelError> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(ModelError::InvalidDensity(rho));
        }
        Ok(Self { spec, rho })
    }

    pub fn threshold(&self) -> usize {
        self.spec.threshold
    }

    fn expect_dim(&self, y: &ControlState) {
        assert_eq!(
            y.len(),
            self.spec.threshold,
            "control state has {} entries, expected A = {}",
            y.len(),
            self.spec.threshold
        );
    }

    /// Control state with all slow sites empty (`y_0 = 1`), i.e. `gamma = 1`.
    pub fn empty_slow_phase(&self) -> ControlState {
        let mut y = vec![0.0; self.spec.threshold];
        if let Some(y0) = y.first_mut() {
            *y0 = 1.0;
        }
        ControlState::from_vec_unchecked(y)
    }

    /// The fixed point `ybar` restricted to `k < A`.
    pub fn fixed_point_state(&self) -> ControlState {
        let mut ybar = self.spec.fixed_point();
        ybar.pop();
        ControlState::from_vec_unchecked(ybar)
    }

    /// `1 - (1/rho) sum_k k y_k` before taking the positive part.
    pub fn gamma_raw(&self, y: &ControlState) -> f64 {
        self.expect_dim(y);
        let slow_mass: f64 = y
            .full()
            .iter()
            .enumerate()
            .map(|(k, v)| k as f64 * v)
            .sum();
        1.0 - slow_mass / self.rho
    }

    /// Relative mass of the fast phase, `gamma(y)` in `[0, 1]`.
    pub fn gamma(&self, y: &ControlState) -> f64 {
        self.gamma_raw(y).max(0.0)
    }

    /// `theta(y) = sum_{k=0}^{A} (r_k - q_k) y_k`.
    pub fn theta(&self, y: &ControlState) -> f64 {
        self.expect_dim(y);
        let spec = &self.spec;
        y.full()
            .iter()
            .enumerate()
            .map(|(k, v)| (spec.r[k] - spec.q[k]) * v)
            .sum()
    }

    /// Control drift `b_k(y)` for `k = 0..A`.
    pub fn drift(&self, y: &ControlState) -> Vec<f64> {
        let gamma = self.gamma(y);
        let full = y.full();
        let mut b = vec![0.0; self.spec.threshold];
        self.drift_into(&full, gamma, &mut b);
        b
    }

    /// Drift from the full vector `(y_0..y_A)` and a precomputed `gamma`.
    pub(crate) fn drift_into(&self, full: &[f64], gamma: f64, out: &mut [f64]) {
        let (q, r) = (&self.spec.q, &self.spec.r);
        let scale = self.rho * gamma;
        for (k, bk) in out.iter_mut().enumerate() {
            let down = if k >= 1 { r[k - 1] * full[k - 1] } else { 0.0 };
            *bk = scale * (q[k + 1] * full[k + 1] + down - (q[k] + r[k]) * full[k]);
        }
    }

    /// `beta(y) = theta(y) + sum_k b_k(y) d_k gamma(y) / gamma(y)` on `supp gamma`.
    pub fn beta(&self, y: &ControlState) -> Result<f64, ModelError> {
        let gamma = self.gamma(y);
        if gamma <= 0.0 {
            return Err(ModelError::DegenerateGamma);
        }
        let a = self.spec.threshold;
        let b = self.drift(y);
        let transfer: f64 = b
            .iter()
            .enumerate()
            .map(|(k, bk)| bk * (a - k) as f64 / self.rho)
            .sum();
        Ok(self.theta(y) + transfer / gamma)
    }

    /// Continuous extension `r_A y_A` of `beta` to all of `S_Y`.
    pub fn beta_bar(&self, y: &ControlState) -> f64 {
        self.expect_dim(y);
        self.spec.r[self.spec.threshold] * y.y_top()
    }

    /// Stationary fast-phase mass `(1 - rho_c / rho)_+`.
    pub fn gamma_stationary(&self) -> f64 {
        (1.0 - self.spec.rho_crit() / self.rho).max(0.0)
    }
}

/// Width of the band around `rho = 1/2` where the closed form switches to
/// its limit `1 / (1 + Theta t)`.
const CRITICAL_BAND: f64 = 1e-8;

/// Fast-phase mass `gamma(t)` of the leading example with `A = 1`, started from `gamma(0) = 1`.
pub fn gamma_closed_form_a1(theta: f64, rho: f64, t: f64) -> f64 {
    let eps = 1.0 - 2.0 * rho;
    if eps.abs() < CRITICAL_BAND {
        return 1.0 / (1.0 + theta * t);
    }
    // e^{x} - 2 rho == expm1(x) + eps
    eps / ((theta * t * eps).exp_m1() + eps)
}

/// Logistic solution of `gamma' = Theta gamma (2 rho (1 - gamma) - 1)` from an arbitrary `gamma0`.
pub fn gamma_logistic_a1(theta: f64, rho: f64, gamma0: f64, t: f64) -> f64 {
    if gamma0 <= 0.0 {
        return 0.0;
    }
    let growth = theta * (2.0 * rho - 1.0);
    if growth.abs() < CRITICAL_BAND {
        // gamma' = -Theta gamma^2 (times 2 rho = 1)
        return gamma0 / (1.0 + 2.0 * rho * theta * gamma0 * t);
    }
    let capacity = (2.0 * rho - 1.0) / (2.0 * rho);
    capacity / (1.0 + (capacity / gamma0 - 1.0) * (-growth * t).exp())
}
