//! Particle configurations on the complete graph and their observables.
//!
//! A [`Configuration`] keeps, next to the occupation vector, the list of
//! sites in every slow category `0..=A` and in the fast category `> A`, plus
//! a Fenwick index over the fast excesses `eta_i - A`. A single-particle move
//! touches at most two categories, so bookkeeping is `O(log F)` per event
//! with `F` the number of fast sites.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fenwick::FenwickIndex;
use crate::kingman::KingmanVector;
use crate::model::{ControlState, RateSpec, RateTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigurationError {
    #[error("configuration needs at least one site")]
    NoSites,
    #[error("configuration needs at least one particle")]
    NoParticles,
    #[error("total jump rate c(eta) vanishes at site {0}")]
    ZeroRate(usize),
    #[error("rate bound violated: {check} (value {value}, bound {bound}) for occupations {occupations:?}")]
    BoundViolation {
        check: &'static str,
        value: f64,
        bound: f64,
        occupations: Vec<u64>,
    },
}

/// Occupation counts as `(k, number of sites holding k particles)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OccupationHistogram(pub Vec<(u64, usize)>);

impl OccupationHistogram {
    pub fn sites(&self) -> usize {
        self.0.iter().map(|(_, c)| c).sum()
    }

    pub fn particles(&self) -> u64 {
        self.0.iter().map(|(k, c)| k * *c as u64).sum()
    }

    /// Merges duplicate keys, drops empty entries and sorts by occupation.
    pub fn canonical(&self) -> Self {
        let mut merged = std::collections::BTreeMap::new();
        for (k, c) in &self.0 {
            *merged.entry(*k).or_insert(0usize) += c;
        }
        Self(merged.into_iter().filter(|(_, c)| *c > 0).collect())
    }
}

/// Which rate a site is sampled by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateKind {
    /// `u1`, the send rate.
    Send,
    /// `u2`, the target rate.
    Target,
}

/// A particle configuration `eta` with category bookkeeping.
#[derive(Debug, Clone)]
pub struct Configuration {
    occ: Vec<u64>,
    threshold: u64,
    particles: u64,
    /// `members[k]` lists the sites holding `k` particles for `k <= A`;
    /// `members[A + 1]` lists the fast sites.
    members: Vec<Vec<usize>>,
    slot: Vec<usize>,
    fast: FenwickIndex,
}

impl Configuration {
    pub fn new(occupations: Vec<u64>, threshold: usize) -> Result<Self, ConfigurationError> {
        if occupations.is_empty() {
            return Err(ConfigurationError::NoSites);
        }
        let particles: u64 = occupations.iter().sum();
        if particles == 0 {
            return Err(ConfigurationError::NoParticles);
        }
        let a = threshold as u64;
        let mut members = vec![Vec::new(); threshold + 2];
        let mut slot = vec![0; occupations.len()];
        let mut fast = FenwickIndex::new();
        for (i, &n) in occupations.iter().enumerate() {
            let cat = Self::category_of(n, a);
            slot[i] = members[cat].len();
            members[cat].push(i);
            if n > a {
                fast.push(n - a);
            }
        }
        Ok(Self {
            occ: occupations,
            threshold: a,
            particles,
            members,
            slot,
            fast,
        })
    }

    pub fn from_histogram(
        hist: &OccupationHistogram,
        threshold: usize,
    ) -> Result<Self, ConfigurationError> {
        let mut occ = Vec::with_capacity(hist.sites());
        for (k, c) in &hist.canonical().0 {
            occ.extend(std::iter::repeat_n(*k, *c));
        }
        Self::new(occ, threshold)
    }

    fn category_of(n: u64, a: u64) -> usize {
        n.min(a + 1) as usize
    }

    pub fn occupations(&self) -> &[u64] {
        &self.occ
    }

    pub fn sites(&self) -> usize {
        self.occ.len()
    }

    pub fn particles(&self) -> u64 {
        self.particles
    }

    pub fn threshold(&self) -> usize {
        self.threshold as usize
    }

    /// `#_k eta` for `k <= A`.
    pub fn count(&self, k: usize) -> usize {
        self.members[k].len()
    }

    /// `#_{>A} eta`, the number of fast sites.
    pub fn fast_sites(&self) -> usize {
        self.members[self.threshold as usize + 1].len()
    }

    /// `sum_i (eta_i - A)_+`.
    pub fn fast_excess(&self) -> u64 {
        self.fast.total()
    }

    pub fn histogram(&self) -> OccupationHistogram {
        let mut h = std::collections::BTreeMap::new();
        for &n in &self.occ {
            *h.entry(n).or_insert(0usize) += 1;
        }
        OccupationHistogram(h.into_iter().collect())
    }

    /// Moves one particle from `from` to `to`; `from` must be occupied.
    pub fn move_particle(&mut self, from: usize, to: usize) {
        assert!(self.occ[from] > 0, "site {from} is empty");
        if from == to {
            return;
        }
        self.set_occupation(from, self.occ[from] - 1);
        self.set_occupation(to, self.occ[to] + 1);
    }

    fn set_occupation(&mut self, site: usize, n: u64) {
        let a = self.threshold;
        let fast_cat = a as usize + 1;
        let old = self.occ[site];
        let (old_cat, new_cat) = (Self::category_of(old, a), Self::category_of(n, a));
        self.occ[site] = n;
        if old_cat == new_cat {
            if new_cat == fast_cat {
                self.fast.set(self.slot[site], n - a);
            }
            return;
        }
        // leave old category
        let s = self.slot[site];
        let list = &mut self.members[old_cat];
        list.swap_remove(s);
        if let Some(&moved) = list.get(s) {
            self.slot[moved] = s;
        }
        if old_cat == fast_cat {
            self.fast.swap_remove(s);
        }
        // join new category
        self.slot[site] = self.members[new_cat].len();
        self.members[new_cat].push(site);
        if new_cat == fast_cat {
            self.fast.push(n - a);
        }
    }

    /// `S_1 = sum_i u1(eta_i)` and `S_2 = sum_i u2(eta_i)` from category counts.
    pub fn aggregates(&self, table: &RateTable) -> (f64, f64) {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for k in 0..=self.threshold as usize {
            let c = self.members[k].len() as f64;
            s1 += c * table.slow_u1[k];
            s2 += c * table.slow_u2[k];
        }
        let f = self.fast_sites() as f64;
        let e = self.fast_excess() as f64;
        (s1 + e + f * table.fast_offset1, s2 + e + f * table.fast_offset2)
    }

    /// Samples a site with probability proportional to its send or target rate.
    ///
    /// `total` must be the matching aggregate from [`Self::aggregates`].
    pub fn sample_site<R: Rng + ?Sized>(
        &self,
        table: &RateTable,
        kind: RateKind,
        total: f64,
        rng: &mut R,
    ) -> usize {
        let (slow, offset) = match kind {
            RateKind::Send => (&table.slow_u1, table.fast_offset1),
            RateKind::Target => (&table.slow_u2, table.fast_offset2),
        };
        let mut u = rng.random::<f64>() * total;
        let mut last_nonempty = None;
        for (k, rate) in slow.iter().enumerate() {
            let sites = &self.members[k];
            let w = sites.len() as f64 * rate;
            if w <= 0.0 {
                continue;
            }
            last_nonempty = Some((k, *rate));
            if u < w {
                let idx = ((u / rate) as usize).min(sites.len() - 1);
                return sites[idx];
            }
            u -= w;
        }
        let fast_sites = &self.members[self.threshold as usize + 1];
        if !fast_sites.is_empty() {
            let excess = self.fast.total() as f64;
            if u < excess {
                let target = (u as u64).min(self.fast.total() - 1);
                return fast_sites[self.fast.find(target)];
            }
            u -= excess;
            if offset > 0.0 {
                let idx = ((u / offset) as usize).min(fast_sites.len() - 1);
                return fast_sites[idx];
            }
            // rounding overflow lands on the largest fast pile
            return fast_sites[self.fast.find(self.fast.total() - 1)];
        }
        let (k, _) = last_nonempty.expect("sampling from a configuration with zero total rate");
        *self.members[k].last().unwrap()
    }

    /// Full recount of the cached bookkeeping; used by tests.
    pub fn check_consistency(&self) -> Result<(), String> {
        let a = self.threshold;
        if self.occ.iter().sum::<u64>() != self.particles {
            return Err("particle count drifted".into());
        }
        for (cat, list) in self.members.iter().enumerate() {
            for (s, &site) in list.iter().enumerate() {
                if Self::category_of(self.occ[site], a) != cat {
                    return Err(format!("site {site} filed under category {cat}"));
                }
                if self.slot[site] != s {
                    return Err(format!("slot of site {site} is stale"));
                }
                if cat == a as usize + 1 && self.fast.weight(s) != self.occ[site] - a {
                    return Err(format!("fast weight of site {site} is stale"));
                }
            }
        }
        let listed: usize = self.members.iter().map(Vec::len).sum();
        if listed != self.occ.len() {
            return Err("category lists do not cover all sites".into());
        }
        let excess: u64 = self.occ.iter().map(|n| n.saturating_sub(a)).sum();
        if excess != self.fast.total() {
            return Err("fast excess total drifted".into());
        }
        Ok(())
    }
}

/// Image of a configuration in the limit state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedState {
    pub x: KingmanVector,
    pub y: ControlState,
}

/// The embedding `Phi`: sorted fast excesses over `N`, and slow fractions `#_k / L` for `k < A`.
pub fn embed(eta: &Configuration) -> EmbeddedState {
    let a = eta.threshold;
    let n = eta.particles as f64;
    let x = KingmanVector::from_unsorted(
        eta.occ
            .iter()
            .filter(|v| **v > a)
            .map(|v| (v - a) as f64 / n)
            .collect(),
    );
    let l = eta.sites() as f64;
    let y = (0..a as usize).map(|k| eta.count(k) as f64 / l).collect();
    EmbeddedState {
        x,
        y: ControlState::from_vec_unchecked(y),
    }
}

/// Relative mass of the fast phase, `sum_i (eta_i - A)_+ / N`.
pub fn gamma_n(eta: &Configuration) -> f64 {
    eta.fast_excess() as f64 / eta.particles as f64
}

/// `c(eta)`: total rate at which `site` gains or loses a particle.
pub fn total_rate_c(eta: &Configuration, spec: &RateSpec, site: usize) -> f64 {
    let (up, down) = up_down_rates(eta, spec, site);
    up + down
}

fn up_down_rates(eta: &Configuration, spec: &RateSpec, site: usize) -> (f64, f64) {
    let l = eta.sites();
    let table = spec.rate_table(l);
    let (s1, s2) = eta.aggregates(&table);
    let n = eta.occ[site];
    let (u1, u2) = (spec.u1(l, n), spec.u2(l, n));
    (u2 * (s1 - u1), u1 * (s2 - u2))
}

/// `p(eta)`: probability that the next jump at `site` is upward.
pub fn up_probability_p(
    eta: &Configuration,
    spec: &RateSpec,
    site: usize,
) -> Result<f64, ConfigurationError> {
    let (up, down) = up_down_rates(eta, spec, site);
    let c = up + down;
    if c <= 0.0 {
        return Err(ConfigurationError::ZeroRate(site));
    }
    Ok(up / c)
}

/// Which side of the tracked-site threshold a configuration falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CouplingBranch {
    /// Tracked site above `A` with `gamma_N > delta`.
    Fast,
    /// Tracked site at or below `A`.
    Slow,
    /// Tracked site above `A` but `gamma_N <= delta`.
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub name: &'static str,
    pub value: f64,
    pub bound: f64,
    /// Positive when the inequality holds.
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingReport {
    pub branch: CouplingBranch,
    pub checks: Vec<BoundCheck>,
}

/// Checks the excursion-coupling rate inequalities at `site`.
///
/// Fast branch: `p <= 1/2 + 15 zeta_L` and `c >= a L` with
/// `a = N/(4L) max(q_min, 1) delta`. Slow branch: `c <= 4 rho (r_max + 1)`
/// with `rho = N / L`.
pub fn check_coupling_bounds(
    eta: &Configuration,
    spec: &RateSpec,
    delta: f64,
    site: usize,
) -> Result<CouplingReport, ConfigurationError> {
    let l = eta.sites() as f64;
    let n = eta.particles as f64;
    let rho = n / l;
    let c = total_rate_c(eta, spec, site);
    let mut checks = Vec::new();
    let branch = if eta.occ[site] <= eta.threshold {
        let bound = 4.0 * rho * (spec.r_max() + 1.0);
        checks.push(BoundCheck {
            name: "c <= 4 rho (r_max + 1)",
            value: c,
            bound,
            slack: bound - c,
        });
        CouplingBranch::Slow
    } else if gamma_n(eta) > delta {
        let p = up_probability_p(eta, spec, site)?;
        let p_bound = 0.5 + 15.0 * spec.zeta(eta.sites());
        checks.push(BoundCheck {
            name: "p <= 1/2 + 15 zeta_L",
            value: p,
            bound: p_bound,
            slack: p_bound - p,
        });
        let a = n / (4.0 * l) * spec.q_min().unwrap_or(1.0).max(1.0) * delta;
        checks.push(BoundCheck {
            name: "c >= a L",
            value: c,
            bound: a * l,
            slack: c - a * l,
        });
        CouplingBranch::Fast
    } else {
        CouplingBranch::NotApplicable
    };
    if let Some(bad) = checks.iter().find(|c| c.slack < 0.0) {
        return Err(ConfigurationError::BoundViolation {
            check: bad.name,
            value: bad.value,
            bound: bad.bound,
            occupations: eta.occ.clone(),
        });
    }
    Ok(CouplingReport { branch, checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn conf(occ: &[u64], a: usize) -> Configuration {
        Configuration::new(occ.to_vec(), a).unwrap()
    }

    /// Direct `O(L)` evaluation of `c(eta)` and the upward part.
    fn naive_c(occ: &[u64], spec: &RateSpec, site: usize) -> (f64, f64) {
        let l = occ.len();
        let mut up = 0.0;
        let mut down = 0.0;
        for (j, &n) in occ.iter().enumerate() {
            if j != site {
                up += spec.u2(l, occ[site]) * spec.u1(l, n);
                down += spec.u1(l, occ[site]) * spec.u2(l, n);
            }
        }
        (up + down, up)
    }

    #[test]
    fn embed_examples() {
        let e = embed(&conf(&[3, 1, 0, 2], 1));
        assert_eq!(e.x.entries(), &[2.0 / 6.0, 1.0 / 6.0]);
        assert_eq!(e.y.as_slice(), &[0.25]);
        let e = embed(&conf(&[1, 1, 1, 1], 1));
        assert_eq!(e.x.support_len(), 0);
        assert_eq!(e.y.as_slice(), &[0.0]);
        let e = embed(&conf(&[7, 0, 0, 0], 0));
        assert_eq!(e.x.entries(), &[1.0]);
        assert!(e.y.is_empty());
    }

    #[test]
    fn gamma_n_examples() {
        let eta = conf(&[3, 1, 0, 2], 1);
        assert_eq!(gamma_n(&eta), 0.5);
        assert_eq!(gamma_n(&conf(&[1, 1, 0, 1], 1)), 0.0);
        assert!((embed(&eta).x.sum() - gamma_n(&eta)).abs() < 1e-15);
    }

    #[test]
    fn total_rate_examples() {
        let spec = RateSpec::leading_example(1, 1.0).unwrap();
        let eta = conf(&[3, 2], 1);
        assert_eq!(total_rate_c(&eta, &spec, 0), 5.5);
        assert!((up_probability_p(&eta, &spec, 0).unwrap() - 5.0 / 11.0).abs() < 1e-15);
        let eta = conf(&[0, 9, 0], 1);
        let expected = spec.u2(3, 0) * spec.u1(3, 9);
        assert!((total_rate_c(&eta, &spec, 0) - expected).abs() < 1e-15);
        assert_eq!(up_probability_p(&eta, &spec, 0).unwrap(), 1.0);
    }

    #[test]
    fn total_rate_matches_direct_sum() {
        let mut rng = rng_from_seed(11);
        let spec = RateSpec::generic(&[0.5, 1.5], &[0.7, 0.9, 2.0], 0.0).unwrap();
        for _ in 0..100 {
            let l = rng.random_range(2..40);
            let occ: Vec<u64> = (0..l).map(|_| rng.random_range(0..6)).collect();
            if occ.iter().sum::<u64>() == 0 {
                continue;
            }
            let eta = conf(&occ, 2);
            let site = rng.random_range(0..l);
            let (c, up) = naive_c(&occ, &spec, site);
            assert!((total_rate_c(&eta, &spec, site) - c).abs() < 1e-12 * c.max(1.0));
            if c > 0.0 {
                let p = up_probability_p(&eta, &spec, site).unwrap();
                assert!((p - up / c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classical_symmetric_case_is_nearly_fair() {
        // A = 0 with both sites fast: the only asymmetry is the Theta/L term of u2
        let spec = RateSpec::leading_example(0, 1.0).unwrap();
        let eta = conf(&[5, 5, 5, 5, 5, 5, 5, 5, 5, 5], 0);
        let p = up_probability_p(&eta, &spec, 0).unwrap();
        let (c, up) = naive_c(eta.occupations(), &spec, 0);
        assert!((p - up / c).abs() < 1e-14);
        assert!((p - 0.5).abs() < 0.01);
    }

    #[test]
    fn zero_rate_error() {
        let spec = RateSpec::leading_example(1, 1.0).unwrap();
        // single site: nothing else to exchange with
        let eta = conf(&[4], 1);
        assert_eq!(
            up_probability_p(&eta, &spec, 0),
            Err(ConfigurationError::ZeroRate(0))
        );
    }

    #[test]
    fn moves_keep_bookkeeping_consistent() {
        let mut rng = rng_from_seed(5);
        let mut eta = conf(&[4, 0, 1, 2, 0, 7, 1, 1], 2);
        for _ in 0..5000 {
            let from = loop {
                let s = rng.random_range(0..eta.sites());
                if eta.occupations()[s] > 0 {
                    break s;
                }
            };
            let to = rng.random_range(0..eta.sites());
            eta.move_particle(from, to);
            eta.check_consistency().unwrap();
        }
        assert_eq!(eta.particles(), 16);
    }

    #[test]
    fn count_identities() {
        let eta = conf(&[3, 1, 0, 2, 0, 0, 5, 1], 2);
        let (l, n, a) = (eta.sites() as f64, eta.particles() as f64, 2.0);
        let slow: f64 = (0..2).map(|k| eta.count(k) as f64 / l).sum();
        let top = eta.count(2) as f64 / l;
        assert!((top - (1.0 - slow - eta.fast_sites() as f64 / l)).abs() < 1e-15);
        // the fast-site count cancels once #_A is eliminated
        let below: f64 = (0..2)
            .map(|k| (k as f64 - a) * eta.count(k) as f64 / l)
            .sum();
        let rearranged = 1.0 - (l / n) * (a + below);
        assert!((gamma_n(&eta) - rearranged).abs() < 1e-15);
    }

    #[test]
    fn histogram_round_trip() {
        let eta = conf(&[3, 1, 0, 2, 0, 0], 1);
        let h = eta.histogram();
        assert_eq!(h, OccupationHistogram(vec![(0, 3), (1, 1), (2, 1), (3, 1)]));
        let back = Configuration::from_histogram(&h, 1).unwrap();
        assert_eq!(back.histogram(), h);
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct Doc {
            histogram: OccupationHistogram,
        }
        let text = toml::to_string(&Doc { histogram: h.clone() }).unwrap();
        let parsed: Doc = toml::from_str(&text).unwrap();
        assert_eq!(parsed.histogram, h);
    }

    #[test]
    fn coupling_bounds_degenerate_cases() {
        let spec = RateSpec::leading_example(0, 1.0).unwrap();
        let mut occ = vec![0; 50];
        occ[0] = 100;
        let r = check_coupling_bounds(&conf(&occ, 0), &spec, 0.99, 0).unwrap();
        assert_eq!(r.branch, CouplingBranch::Fast);
        let spec = RateSpec::leading_example(1, 1.0).unwrap();
        let mut occ = vec![1; 50];
        occ[0] = 0;
        occ[1] = 30;
        let r = check_coupling_bounds(&conf(&occ, 1), &spec, 0.1, 0).unwrap();
        assert_eq!(r.branch, CouplingBranch::Slow);
        assert!(r.checks[0].slack > 0.0);
    }

    #[test]
    fn sampling_frequencies_follow_rates() {
        let spec = RateSpec::leading_example(1, 1.0).unwrap();
        let eta = conf(&[0, 1, 1, 3, 5, 0, 2], 1);
        let l = eta.sites();
        let table = spec.rate_table(l);
        let (s1, s2) = eta.aggregates(&table);
        let mut rng = rng_from_seed(3);
        let draws = 200_000;
        for (kind, total) in [(RateKind::Send, s1), (RateKind::Target, s2)] {
            let mut hits = vec![0usize; l];
            for _ in 0..draws {
                hits[eta.sample_site(&table, kind, total, &mut rng)] += 1;
            }
            for (i, &h) in hits.iter().enumerate() {
                let n = eta.occupations()[i];
                let rate = match kind {
                    RateKind::Send => spec.u1(l, n),
                    RateKind::Target => spec.u2(l, n),
                };
                let p = rate / total;
                let se = (p * (1.0 - p) / draws as f64).sqrt();
                let phat = h as f64 / draws as f64;
                assert!((phat - p).abs() <= 4.0 * se + 1e-12, "site {i}: {phat} vs {p}");
            }
        }
    }
}
