//! Moment hierarchy of the modulated Poisson-Dirichlet diffusion.
//!
//! On a product of power sums `phi_m = phi_{m_1} ... phi_{m_k}` the generator
//! acts as `gamma * g^(m) - a(theta, m) * phi_m`, where `g^(m)` has strictly
//! lower degree. Expectations therefore solve a triangular linear ODE system,
//! integrated here bottom-up with RK4. Inside `g^(m)` every `phi_1` is read
//! as `gamma(t)`.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::kingman::KingmanVector;
use crate::model::{ControlState, ModelParams};
use crate::ode::Modulation;

/// Multiset of exponents `m_l >= 2`, stored sorted ascending; empty is the constant 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MonomialIndex(Vec<u32>);

impl MonomialIndex {
    pub fn new(mut parts: Vec<u32>) -> Self {
        assert!(parts.iter().all(|&m| m >= 2), "exponents must be at least 2");
        parts.sort_unstable();
        Self(parts)
    }

    pub fn constant() -> Self {
        Self(Vec::new())
    }

    pub fn parts(&self) -> &[u32] {
        &self.0
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_constant(&self) -> bool {
        self.0.is_empty()
    }

    /// `phi_m(x)`.
    pub fn evaluate(&self, x: &KingmanVector) -> f64 {
        self.0.iter().map(|&m| x.phi(m)).product()
    }

    /// `a(theta, m) = a0 + a1 * theta`, returned as `(a0, a1)`.
    pub fn decay(&self) -> (f64, f64) {
        let m: Vec<f64> = self.0.iter().map(|&v| v as f64).collect();
        let total: f64 = m.iter().sum();
        let own: f64 = m.iter().map(|v| v * (v - 1.0)).sum();
        let squares: f64 = m.iter().map(|v| v * v).sum();
        // sum over ordered pairs l != l' of m_l m_l'
        let cross = total * total - squares;
        (own + cross, total)
    }
}

impl fmt::Display for MonomialIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "1");
        }
        let labels: Vec<String> = self.0.iter().map(|m| format!("phi{m}")).collect();
        write!(f, "{}", labels.join("*"))
    }
}

/// A term `coeff * phi_1^phi1_power * phi_m` of `g^(m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GTerm {
    pub coeff: f64,
    pub phi1_power: u32,
    pub monomial: MonomialIndex,
}

/// Generator action on one monomial: `gamma * sum(g) - (a0 + a1 theta) phi_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonomialAction {
    pub g: Vec<GTerm>,
    pub a0: f64,
    pub a1: f64,
}

impl MonomialAction {
    pub fn a(&self, theta: f64) -> f64 {
        self.a0 + self.a1 * theta
    }
}

fn push_term(terms: &mut Vec<GTerm>, coeff: f64, phi1_power: u32, parts: Vec<u32>) {
    let monomial = MonomialIndex::new(parts);
    match terms
        .iter_mut()
        .find(|t| t.phi1_power == phi1_power && t.monomial == monomial)
    {
        Some(t) => t.coeff += coeff,
        None => terms.push(GTerm {
            coeff,
            phi1_power,
            monomial,
        }),
    }
}

/// Applies the generator to `phi_m`, keeping `phi_1` symbolic.
pub fn act_on_monomial(m: &MonomialIndex) -> MonomialAction {
    let parts = m.parts();
    let k = parts.len();
    let mut g = Vec::new();
    for l in 0..k {
        let ml = parts[l];
        let rest: Vec<u32> = (0..k).filter(|&i| i != l).map(|i| parts[i]).collect();
        let coeff = (ml * (ml - 1)) as f64;
        if ml == 2 {
            push_term(&mut g, coeff, 1, rest);
        } else {
            let mut p = rest;
            p.push(ml - 1);
            push_term(&mut g, coeff, 0, p);
        }
    }
    for l in 0..k {
        for lp in 0..k {
            if l == lp {
                continue;
            }
            let mut p: Vec<u32> = (0..k).filter(|&i| i != l && i != lp).map(|i| parts[i]).collect();
            p.push(parts[l] + parts[lp] - 1);
            push_term(&mut g, (parts[l] * parts[lp]) as f64, 0, p);
        }
    }
    g.sort_by(|a, b| (a.phi1_power, &a.monomial).cmp(&(b.phi1_power, &b.monomial)));
    let (a0, a1) = m.decay();
    MonomialAction { g, a0, a1 }
}

fn partitions(n: u32, min: u32, current: &mut Vec<u32>, out: &mut Vec<MonomialIndex>) {
    if n == 0 {
        out.push(MonomialIndex::new(current.clone()));
        return;
    }
    for part in min..=n {
        if n - part != 0 && n - part < part {
            continue;
        }
        current.push(part);
        partitions(n - part, part, current, out);
        current.pop();
    }
}

/// All monomials of degree `2..=n` with their generator actions.
#[derive(Debug, Clone)]
pub struct MomentSystem {
    indices: Vec<MonomialIndex>,
    actions: Vec<MonomialAction>,
    /// Per index: `(coeff, phi1 power, position of the lower monomial or None for the constant)`.
    links: Vec<Vec<(f64, u32, Option<usize>)>>,
    max_degree: u32,
}

pub const DEFAULT_MAX_DEGREE: u32 = 6;

impl MomentSystem {
    pub fn new(max_degree: u32) -> Self {
        let mut indices = Vec::new();
        for d in 2..=max_degree {
            partitions(d, 2, &mut Vec::new(), &mut indices);
        }
        let position: HashMap<MonomialIndex, usize> =
            indices.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        let actions: Vec<MonomialAction> = indices.iter().map(act_on_monomial).collect();
        let links = actions
            .iter()
            .map(|act| {
                act.g
                    .iter()
                    .map(|t| {
                        let pos = (!t.monomial.is_constant()).then(|| position[&t.monomial]);
                        (t.coeff, t.phi1_power, pos)
                    })
                    .collect()
            })
            .collect();
        Self {
            indices,
            actions,
            links,
            max_degree,
        }
    }

    pub fn indices(&self) -> &[MonomialIndex] {
        &self.indices
    }

    pub fn actions(&self) -> &[MonomialAction] {
        &self.actions
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    pub fn position(&self, m: &MonomialIndex) -> Option<usize> {
        self.indices.iter().position(|i| i == m)
    }

    fn rhs(&self, mu: &[f64], gamma: f64, theta: f64, out: &mut [f64]) {
        for (i, (links, act)) in self.links.iter().zip(&self.actions).enumerate() {
            let g: f64 = links
                .iter()
                .map(|&(c, p1, pos)| c * gamma.powi(p1 as i32) * pos.map_or(1.0, |j| mu[j]))
                .sum();
            out[i] = gamma * g - act.a(theta) * mu[i];
        }
    }
}

/// Expected monomials on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    pub labels: Vec<String>,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl MomentTable {
    pub fn column(&self, label: &str) -> Option<Vec<f64>> {
        let idx = self.labels.iter().position(|l| l == label)?;
        Some(self.values.iter().map(|row| row[idx]).collect())
    }
}

/// Integrates the hierarchy from `mu_0(phi_m) = phi_m(x0)` with RK4 substeps of at most `h`.
pub fn solve_hierarchy(
    system: &MomentSystem,
    modulation: &dyn Modulation,
    x0: &KingmanVector,
    grid: &[f64],
    h: f64,
) -> MomentTable {
    assert!(!grid.is_empty() && grid.windows(2).all(|w| w[1] >= w[0]));
    let n = system.indices.len();
    let mut mu: Vec<f64> = system.indices.iter().map(|m| m.evaluate(x0)).collect();
    let mut k = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut tmp = vec![0.0; n];
    let mut values = vec![mu.clone()];
    let mut t = grid[0];
    for &t_next in &grid[1..] {
        let span = t_next - t;
        let steps = (span / h).ceil().max(1.0) as usize;
        let hs = span / steps as f64;
        for s in 0..steps {
            let t0 = t + s as f64 * hs;
            let nodes = [t0, t0 + hs / 2.0, t0 + hs / 2.0, t0 + hs];
            for stage in 0..4 {
                let c = if stage == 3 { hs } else { hs / 2.0 };
                for i in 0..n {
                    tmp[i] = if stage == 0 { mu[i] } else { mu[i] + c * k[stage - 1][i] };
                }
                let tt = nodes[stage];
                system.rhs(&tmp, modulation.gamma(tt), modulation.theta(tt), &mut k[stage]);
            }
            for i in 0..n {
                mu[i] += hs / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
            }
        }
        t = t_next;
        values.push(mu.clone());
    }
    MomentTable {
        labels: system.indices.iter().map(|m| m.to_string()).collect(),
        times: grid.to_vec(),
        values,
    }
}

/// Outcome of one structural check on the control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemCheck {
    pub item: String,
    pub passed: bool,
    /// Largest violation (or estimate) seen.
    pub worst: f64,
    pub witness: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub points: usize,
    pub items: Vec<ItemCheck>,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    pub fn item(&self, prefix: &str) -> Option<&ItemCheck> {
        self.items.iter().find(|i| i.item.starts_with(prefix))
    }
}

/// Integer grid points `n_0..n_{A-1} >= 0` with `sum <= n`.
fn simplex_grid(dim: usize, n: u32, f: &mut dyn FnMut(&[u32])) {
    fn rec(dim: usize, left: u32, cur: &mut Vec<u32>, f: &mut dyn FnMut(&[u32])) {
        if cur.len() == dim {
            f(cur);
            return;
        }
        for v in 0..=left {
            cur.push(v);
            rec(dim, left - v, cur, f);
            cur.pop();
        }
    }
    rec(dim, n, &mut Vec::with_capacity(dim), f);
}

/// Default grid resolution keeping the number of points near `10^6`.
pub fn default_resolution(threshold: usize) -> u32 {
    match threshold {
        0 | 1 => 1000,
        2 => 1000,
        3 => 150,
        4 => 60,
        _ => 20,
    }
}

const ZERO_TOL: f64 = 1e-14;
const BETA_TOL: f64 = 1e-12;

/// Checks the structural conditions on the control on the grid `y = n / resolution`:
/// the drift vanishes where `gamma = 0`, points inward on the faces of `S_Y`,
/// `gamma` and `theta` stay within their Lipschitz constants, and `beta = r_A y_A >= 0`.
pub fn validate_control_assumptions(params: &ModelParams, resolution: u32) -> AssumptionReport {
    validate_with_drift(params, resolution, &|y: &ControlState| params.drift(y))
}

/// As [`validate_control_assumptions`], with `drift` in place of the model drift.
pub fn validate_with_drift(
    params: &ModelParams,
    resolution: u32,
    drift: &dyn Fn(&ControlState) -> Vec<f64>,
) -> AssumptionReport {
    let a = params.threshold();
    let spec = &params.spec;
    let r_top = spec.r()[a];
    let mut absorbing = ItemCheck::new("absorbing: b = 0 where gamma = 0");
    let mut boundary = ItemCheck::new("boundary: b points into S_Y on its faces");
    let mut lipschitz = ItemCheck::new("lipschitz: gamma and theta");
    let mut beta = ItemCheck::new("beta: beta >= 0 and beta = r_A y_A");
    let mut points = 0;

    let gamma_const = a as f64 / params.rho;
    let top = spec.r()[a] - spec.q()[a];
    let theta_const = (0..a)
        .map(|k| ((spec.r()[k] - spec.q()[k]) - top).abs())
        .fold(0.0, f64::max);
    let mut max_quotient = 0.0_f64;
    let mut max_bound = 0.0_f64;
    let mut lipschitz_witness = None;

    simplex_grid(a, resolution, &mut |n| {
        points += 1;
        let y: Vec<f64> = n.iter().map(|&v| v as f64 / resolution as f64).collect();
        let state = ControlState::from_vec_unchecked(y.clone());
        let b = drift(&state);
        let gamma = params.gamma(&state);
        if gamma <= 0.0 {
            let norm = b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            absorbing.record(norm, norm > ZERO_TOL, &y);
        }
        for k in 0..a {
            if n[k] == 0 {
                boundary.record(-b[k], b[k] < -ZERO_TOL, &y);
            }
        }
        if n.iter().sum::<u32>() == resolution {
            let s: f64 = b.iter().sum();
            boundary.record(s, s > ZERO_TOL, &y);
        }
        // one-sided difference quotients along each coordinate, in the l1 norm
        for k in 0..a {
            if n.iter().sum::<u32>() < resolution {
                let mut y2 = y.clone();
                y2[k] += 1.0 / resolution as f64;
                let s2 = ControlState::from_vec_unchecked(y2);
                let dist = 1.0 / resolution as f64;
                for (q, bound) in [
                    ((params.gamma(&s2) - gamma).abs() / dist, gamma_const),
                    ((params.theta(&s2) - params.theta(&state)).abs() / dist, theta_const),
                ] {
                    if q - bound > max_quotient - max_bound {
                        lipschitz_witness = Some(y.clone());
                    }
                    max_quotient = max_quotient.max(q);
                    max_bound = max_bound.max(bound);
                    if !q.is_finite() || q > bound * (1.0 + 1e-6) + 1e-9 {
                        lipschitz.passed = false;
                        lipschitz.witness.get_or_insert_with(|| y.clone());
                    }
                }
            }
        }
        if gamma > 0.0 {
            let transfer: f64 =
                b.iter().enumerate().map(|(k, bk)| bk * (a - k) as f64 / params.rho).sum();
            let value = params.theta(&state) + transfer / gamma;
            let target = r_top * state.y_top();
            let err = (value - target).abs().max(-value);
            beta.record(err, err > BETA_TOL || value < -BETA_TOL, &y);
        }
    });
    lipschitz.worst = max_quotient;
    if lipschitz.passed {
        lipschitz.witness = lipschitz_witness;
    }
    AssumptionReport {
        points,
        items: vec![absorbing, boundary, lipschitz, beta],
    }
}

impl ItemCheck {
    fn new(item: &str) -> Self {
        Self {
            item: item.into(),
            passed: true,
            worst: 0.0,
            witness: None,
        }
    }

    fn record(&mut self, value: f64, violated: bool, y: &[f64]) {
        if value > self.worst {
            self.worst = value;
            if !violated && self.passed {
                self.witness = Some(y.to_vec());
            }
        }
        if violated && self.passed {
            self.passed = false;
            self.witness = Some(y.to_vec());
        }
    }
}
