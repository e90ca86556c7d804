//! End-to-end localization of a single trial: synthesize (or consume a
//! stored channel estimate), run both estimation stages, and emit the fix.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sidelink_core::channel::{enumerate_paths, synthesize_from_paths, unit_pilots};
use sidelink_core::codebook::random_codebook_expanded;
use sidelink_core::estimator::{estimate_channel, ChannelEstimate, EstimateDiag, EstimatorOptions};
use sidelink_core::locator::{
    coarse_locate, refine_locate, LocateMode, PositionFix, SearchSpec,
};
use sidelink_core::scenario::Scenario;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizeConfig {
    pub trial: u64,
    pub with_noise: bool,
    pub block_count: usize,
    pub estimator: EstimatorOptions,
    pub search_half_extent_m: f64,
    pub search_step_m: f64,
    /// When set, the synthesized received block is dumped to this path as
    /// little-endian interleaved complex32 with a `K, G` header.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dump_rx: Option<std::path::PathBuf>,
}

impl LocalizeConfig {
    pub fn for_scenario(scenario: &Scenario) -> Self {
        Self {
            trial: 0,
            with_noise: true,
            block_count: scenario.n_ris() + 1,
            estimator: EstimatorOptions::default(),
            search_half_extent_m: 1.0,
            search_step_m: 0.2,
            dump_rx: None,
        }
    }
}

/// Everything a localization run produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizeOutput {
    pub coarse: PositionFix,
    pub refined: PositionFix,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channel_diag: Option<EstimateDiag>,
    pub estimate: ChannelEstimate,
}

/// Runs the two-stage positioning on top of a channel estimate.
pub fn locate_from_estimate(
    scenario: &Scenario,
    estimate: &ChannelEstimate,
    cfg: &LocalizeConfig,
) -> anyhow::Result<LocalizeOutput> {
    let mode = if scenario.los_blocked {
        LocateMode::Blocked
    } else {
        LocateMode::LosAvailable
    };
    let search = SearchSpec {
        center_m: scenario.tx_position_m,
        half_extent_m: [cfg.search_half_extent_m; 3],
        step_m: cfg.search_step_m,
        pair_weights: None,
        path_weights: None,
    };
    let coarse = coarse_locate(estimate, &scenario.anchors, &search, mode)?;
    let refined = refine_locate(&coarse, estimate, &scenario.anchors, None);
    Ok(LocalizeOutput {
        coarse,
        refined,
        channel_diag: None,
        estimate: estimate.clone(),
    })
}

/// Full pipeline: synthesize one trial, estimate channel parameters, and
/// position both UEs.
pub fn run_localize(scenario: &Scenario, cfg: &LocalizeConfig) -> anyhow::Result<LocalizeOutput> {
    let mut gain_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let paths = enumerate_paths(scenario, &mut gain_rng)?;
    let codebook = random_codebook_expanded(
        scenario,
        cfg.block_count,
        &mut ChaCha8Rng::seed_from_u64(scenario.seed ^ 0xc0de_b00c),
    )?;
    let delta = DVector::from_element(scenario.radio.n_transmissions, 1.0);
    let pilots = unit_pilots(&scenario.radio);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ cfg.trial);
    let y = synthesize_from_paths(
        scenario,
        &codebook,
        &delta,
        &paths,
        &pilots,
        &mut noise_rng,
        cfg.with_noise,
    )?;
    if let Some(path) = &cfg.dump_rx {
        sidelink_core::channel::write_rx_block(&y, path)?;
    }
    let (estimate, diag) = estimate_channel(scenario, &codebook, &delta, &y, &cfg.estimator)?;
    let mut out = locate_from_estimate(scenario, &estimate, cfg)?;
    out.channel_diag = Some(diag);
    Ok(out)
}
