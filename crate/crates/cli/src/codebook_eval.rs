//! Codebook comparison: RX position error bound versus prior error level
//! for random, directional, and power-controlled directional+derivative
//! profiles.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sidelink_core::codebook::{
    build_codebook, optimize_gamma, power_vector_from_gamma, random_codebook_expanded,
    CodebookKind, PriorState,
};
use sidelink_core::crb::{positioning_bounds, Knowns};
use sidelink_core::scenario::Scenario;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodebookEvalConfig {
    pub sigma_levels: Vec<f64>,
    pub block_count: usize,
    /// Transmit power of the evaluation; the profile-design comparison is
    /// run in a lower-power regime than the estimator experiments.
    pub power_dbm: f64,
}

impl Default for CodebookEvalConfig {
    fn default() -> Self {
        Self {
            sigma_levels: (0..11)
                .map(|i| 10f64.powf(-2.0 + 3.0 * i as f64 / 10.0))
                .collect(),
            block_count: 3,
            power_dbm: 18.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodebookEvalRow {
    pub sigma_pri: f64,
    pub peb_random_m: f64,
    pub peb_dir_m: f64,
    pub peb_dir_der_opt_m: f64,
    pub gamma_opt: f64,
}

/// Evaluates each codebook kind at every prior level. The random codebook
/// ignores the prior, so its column is constant by construction.
pub fn run_codebook_eval(
    scenario: &Scenario,
    cfg: &CodebookEvalConfig,
) -> anyhow::Result<Vec<CodebookEvalRow>> {
    let mut s = scenario.clone();
    s.radio.avg_power_dbm = cfg.power_dbm;
    let delta = DVector::from_element(s.radio.n_transmissions, 1.0);

    let random = random_codebook_expanded(
        &s,
        cfg.block_count,
        &mut ChaCha8Rng::seed_from_u64(s.seed ^ 0xc0de_b00c),
    )?;
    let peb_random = positioning_bounds(&s, &random, &delta, Knowns::None)?.peb_r_m;

    let mut rows = Vec::new();
    for (idx, &sigma) in cfg.sigma_levels.iter().enumerate() {
        let prior = PriorState::isotropic(&s, sigma);
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0xd1f0 ^ ((idx as u64) << 8));
        let dir = build_codebook(CodebookKind::Dir, &s, &prior, cfg.block_count, &mut rng)?;
        let peb_dir = positioning_bounds(&s, &dir, &delta, Knowns::None)?.peb_r_m;

        let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0xdeed ^ ((idx as u64) << 8));
        let (opt, design) = optimize_gamma(&s, &prior, cfg.block_count, &mut rng)?;
        let delta_opt = power_vector_from_gamma(opt.gamma_p, &design.codebook)?;
        let peb_opt = positioning_bounds(&s, &design.codebook, delta_opt.as_vector(), Knowns::None)?
            .peb_r_m;

        rows.push(CodebookEvalRow {
            sigma_pri: sigma,
            peb_random_m: peb_random,
            peb_dir_m: peb_dir,
            peb_dir_der_opt_m: peb_opt,
            gamma_opt: opt.gamma_p,
        });
    }
    Ok(rows)
}
