//! Benchmark fixtures.

use condensate_core::model::{ModelParams, RateSpec};
use condensate_core::pd::WfState;
use condensate_core::sim::{InitialCondition, SimState};

pub fn leading_params(a: usize, rho: f64) -> ModelParams {
    ModelParams::new(RateSpec::leading_example(a, 1.0).expect("valid rates"), rho).expect("valid density")
}

/// A particle system at `rho = 1` run for `burn_in` time units from a single pile.
pub fn warm_simulation(sites: usize, burn_in: f64, seed: u64) -> SimState {
    let spec = RateSpec::leading_example(1, 1.0).expect("valid rates");
    let mut sim = SimState::init(spec, sites, sites as u64, &InitialCondition::SinglePile, seed).expect("feasible");
    sim.advance_to(burn_in).expect("not frozen");
    sim
}

/// Uniform frequencies on `loci` loci with an empty slow phase.
pub fn wf_start(params: &ModelParams, loci: usize) -> WfState {
    WfState::uniform(loci, params.empty_slow_phase())
}
