//! PEB heatmaps over RX positions and coarse-cost landscapes over TX
//! candidates.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sidelink_core::codebook::random_codebook_expanded;
use sidelink_core::crb::{peb_heatmap, GridSpec, Knowns};
use sidelink_core::locator::{cost_landscape, exact_channel_estimate, LocateMode};
use sidelink_core::scenario::Scenario;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrbMapConfig {
    pub grid: GridSpec,
    pub knowns: Knowns,
    pub block_count: usize,
}

/// RX position-error-bound map with a random codebook drawn from the
/// scenario seed.
pub fn run_crb_map(
    scenario: &Scenario,
    cfg: &CrbMapConfig,
) -> anyhow::Result<(Vec<f64>, Vec<f64>, DMatrix<f64>)> {
    let codebook = random_codebook_expanded(
        scenario,
        cfg.block_count,
        &mut ChaCha8Rng::seed_from_u64(scenario.seed ^ 0xc0de_b00c),
    )?;
    let delta = DVector::from_element(scenario.radio.n_transmissions, 1.0);
    Ok(peb_heatmap(scenario, &codebook, &delta, &cfg.grid, cfg.knowns))
}

/// Serializable heatmap payload for the JSON emitter.
#[derive(Debug, Serialize)]
pub struct HeatmapJson<'a> {
    pub scenario: &'a Scenario,
    pub grid: &'a GridSpec,
    pub knowns: Knowns,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Row-major, rows indexed by y.
    pub peb_m: Vec<Vec<f64>>,
}

pub fn heatmap_rows(xs: &[f64], ys: &[f64], map: &DMatrix<f64>) -> Vec<Vec<String>> {
    let mut rows = Vec::with_capacity(xs.len() * ys.len());
    for (iy, y) in ys.iter().enumerate() {
        for (ix, x) in xs.iter().enumerate() {
            rows.push(vec![
                crate::output::fmt(*x),
                crate::output::fmt(*y),
                crate::output::fmt(map[(iy, ix)]),
            ]);
        }
    }
    rows
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostMapConfig {
    pub grid: GridSpec,
}

/// Coarse-positioning cost over TX candidates using the noise-free channel
/// parameters of the scenario (the blind-area lens).
pub fn run_cost_map(
    scenario: &Scenario,
    cfg: &CostMapConfig,
) -> anyhow::Result<(Vec<f64>, Vec<f64>, DMatrix<f64>)> {
    let estimate = exact_channel_estimate(scenario)
        .ok_or_else(|| anyhow::anyhow!("degenerate geometry: a UE coincides with an anchor"))?;
    let mode = if scenario.los_blocked {
        LocateMode::Blocked
    } else {
        LocateMode::LosAvailable
    };
    let xs = cfg.grid.xs();
    let ys = cfg.grid.ys();
    let map = cost_landscape(&estimate, &scenario.anchors, mode, &xs, &ys, cfg.grid.z_m);
    Ok((xs, ys, map))
}
