//! Coverage study: RX position error bound over every TX-RX pair of a UE
//! grid, for several anchor layouts.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use sidelink_core::codebook::random_codebook_expanded;
use sidelink_core::crb::{positioning_bounds, Knowns};
use sidelink_core::scenario::{RisAnchor, Scenario};

/// Down-tilt applied to every anchor in the candidate layouts, radians.
const TILT: f64 = std::f64::consts::FRAC_PI_6;

/// Candidate anchor at one of the four wall positions, facing the area
/// center with a 30-degree down-tilt.
fn candidate_anchor(position: [f64; 3]) -> RisAnchor {
    let yaw = match position {
        p if p[0] < 0.0 => 0.0,
        p if p[0] > 0.0 => std::f64::consts::PI,
        p if p[1] > 0.0 => -std::f64::consts::FRAC_PI_2,
        _ => std::f64::consts::FRAC_PI_2,
    };
    RisAnchor::new(position, [yaw, TILT, 0.0], 10, 10)
}

/// Anchor layouts of the coverage study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    TwoRisL,
    TwoRisParallel,
    ThreeRis,
    FourRis,
}

impl Layout {
    pub fn name(&self) -> &'static str {
        match self {
            Layout::TwoRisL => "2ris_l",
            Layout::TwoRisParallel => "2ris_p",
            Layout::ThreeRis => "3ris",
            Layout::FourRis => "4ris",
        }
    }

    pub fn anchors(&self) -> Vec<RisAnchor> {
        let west = candidate_anchor([-4.0, 0.0, 2.0]);
        let north = candidate_anchor([0.0, 4.0, 2.0]);
        let east = candidate_anchor([4.0, 0.0, 2.0]);
        let south = candidate_anchor([0.0, -4.0, 2.0]);
        match self {
            Layout::TwoRisL => vec![west, north],
            Layout::TwoRisParallel => vec![west, east],
            Layout::ThreeRis => vec![west, north, east],
            Layout::FourRis => vec![west, north, east, south],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CdfStudyConfig {
    pub layouts: Vec<Layout>,
    /// Extra rows for the L-shaped layout with a known clock offset and
    /// known heights.
    pub include_knowns_variants: bool,
    /// Grid coordinate step; 1 m enumerates the full reference grid, 2 m is
    /// the fast profile's 4x subsample.
    pub ue_grid_step_m: f64,
}

impl Default for CdfStudyConfig {
    fn default() -> Self {
        Self {
            layouts: vec![
                Layout::TwoRisL,
                Layout::TwoRisParallel,
                Layout::ThreeRis,
                Layout::FourRis,
            ],
            include_knowns_variants: true,
            ue_grid_step_m: 1.0,
        }
    }
}

/// Smallest orthogonal block count that separates `n_ris + 1` paths and
/// divides the transmission count.
pub fn block_count_for(n_transmissions: usize, n_ris: usize) -> Option<usize> {
    (n_ris + 1..=n_transmissions).find(|b| n_transmissions.is_multiple_of(*b))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairResult {
    pub layout: String,
    pub pair: usize,
    pub tx_m: [f64; 3],
    pub rx_m: [f64; 3],
    pub peb_r_m: f64,
}

/// UE candidate grid: `x, y` from -3 to 3 at the configured step, heights 0
/// and 0.5 m.
pub fn ue_grid(step_m: f64) -> Vec<[f64; 3]> {
    let n = (6.0 / step_m).round() as usize + 1;
    let coords: Vec<f64> = (0..n).map(|i| -3.0 + i as f64 * step_m).collect();
    let mut pts = Vec::new();
    for &z in &[0.0, 0.5] {
        for &y in &coords {
            for &x in &coords {
                pts.push([x, y, z]);
            }
        }
    }
    pts
}

/// Evaluates the RX bound for every unordered UE pair under every layout
/// (and the known-offset / known-height variants of the L layout when
/// enabled).
pub fn run_cdf_study(
    base: &Scenario,
    cfg: &CdfStudyConfig,
) -> anyhow::Result<Vec<PairResult>> {
    let grid = ue_grid(cfg.ue_grid_step_m);
    let mut pairs = Vec::new();
    for i in 0..grid.len() {
        for j in (i + 1)..grid.len() {
            pairs.push((i, j));
        }
    }

    let mut cases: Vec<(String, Vec<RisAnchor>, Knowns)> = Vec::new();
    for layout in &cfg.layouts {
        cases.push((layout.name().into(), layout.anchors(), Knowns::None));
        if cfg.include_knowns_variants && *layout == Layout::TwoRisL {
            cases.push((
                format!("{}_sync", layout.name()),
                layout.anchors(),
                Knowns::ClockOffset,
            ));
            cases.push((
                format!("{}_2d", layout.name()),
                layout.anchors(),
                Knowns::Height,
            ));
        }
    }

    let mut results = Vec::new();
    for (name, anchors, knowns) in cases {
        let mut template = base.clone();
        template.anchors = anchors;
        let block_count = block_count_for(template.radio.n_transmissions, template.n_ris())
            .ok_or_else(|| {
                anyhow::anyhow!(
                    "no usable block count for G = {} and {} anchors",
                    template.radio.n_transmissions,
                    template.n_ris()
                )
            })?;
        let codebook = random_codebook_expanded(
            &template,
            block_count,
            &mut ChaCha8Rng::seed_from_u64(template.seed ^ 0xc0de_b00c),
        )?;
        let delta = DVector::from_element(template.radio.n_transmissions, 1.0);
        let case: Vec<PairResult> = pairs
            .par_iter()
            .enumerate()
            .map(|(idx, &(i, j))| {
                let mut s = template.clone();
                s.tx_position_m = grid[i];
                s.rx_position_m = grid[j];
                // Fresh gain phases per pair, deterministic in the pair index.
                s.seed = template.seed.wrapping_add(idx as u64);
                let peb = match positioning_bounds(&s, &codebook, &delta, knowns) {
                    Ok(report) => report.peb_r_m,
                    Err(_) => f64::INFINITY,
                };
                PairResult {
                    layout: name.clone(),
                    pair: idx,
                    tx_m: grid[i],
                    rx_m: grid[j],
                    peb_r_m: peb,
                }
            })
            .collect();
        results.extend(case);
    }
    Ok(results)
}

/// Empirical CDF of the given values at each threshold.
pub fn empirical_cdf(values: &[f64], epsilons: &[f64]) -> Vec<f64> {
    epsilons
        .iter()
        .map(|&e| values.iter().filter(|&&v| v < e).count() as f64 / values.len() as f64)
        .collect()
}

/// Log-spaced thresholds matching the reference coverage plots.
pub fn default_epsilons() -> Vec<f64> {
    (0..34)
        .map(|i| 10f64.powf(-2.0 + 2.0 * i as f64 / 33.0))
        .collect()
}
