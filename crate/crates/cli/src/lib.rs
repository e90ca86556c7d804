//! Experiment drivers behind the `sidelink` command line: Monte-Carlo
//! sweeps, bound heatmaps, coverage studies, codebook comparisons, and
//! single-shot localization.
//!
//! All drivers are deterministic under a fixed scenario seed regardless of
//! the worker count: every random stream is derived from the seed plus a
//! stable index, and parallel reductions collect by index.

pub mod cdf_study;
pub mod codebook_eval;
pub mod localize;
pub mod maps;
pub mod mc_sweep;
pub mod output;

use sidelink_core::scenario::Scenario;

/// Applies the fast profile: a quarter of the pilots and transmissions and
/// a proportionally reduced trial budget, for CI-scale runs.
pub fn apply_fast_profile(scenario: &mut Scenario) {
    scenario.radio.n_subcarriers = 128;
    scenario.radio.n_transmissions = 48;
}

/// Loads a scenario file or falls back to the built-in two-anchor default,
/// applying a seed override when given.
pub fn load_or_default(
    path: Option<&std::path::Path>,
    seed: Option<u64>,
) -> anyhow::Result<Scenario> {
    let mut scenario = match path {
        Some(p) => sidelink_core::scenario::load_scenario(p)?,
        None => Scenario::default_two_ris(),
    };
    if let Some(s) = seed {
        scenario.seed = s;
    }
    scenario.validate()?;
    Ok(scenario)
}
