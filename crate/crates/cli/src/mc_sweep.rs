//! Monte-Carlo sweep over transmit power: synthesize, run both estimation
//! stages, and tabulate RMSEs against the matching error bounds.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use sidelink_core::channel::{enumerate_paths, synthesize_from_paths, unit_pilots};
use sidelink_core::codebook::random_codebook_expanded;
use sidelink_core::crb::{positioning_bounds_with_paths, Knowns};
use sidelink_core::estimator::{estimate_channel, EstimatorOptions};
use sidelink_core::geometry::PathKind;
use sidelink_core::locator::{coarse_locate, refine_locate, LocateMode, SearchSpec};
use sidelink_core::scenario::Scenario;

/// Sweep configuration; defaults follow the reference experiment recipe
/// (2 m search cube at 0.2 m steps around the true TX, random codebook with
/// `L + 1` orthogonal blocks).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McSweepConfig {
    pub powers_dbm: Vec<f64>,
    pub trials: usize,
    pub block_count: usize,
    pub n_fft: usize,
    pub sf_step: f64,
    pub search_half_extent_m: f64,
    pub search_step_m: f64,
    /// Redraw scatterer placement and gain phases every trial instead of
    /// conditioning on one channel realization. Bound-attainment studies
    /// keep this off; multipath studies sample the scatterer ensemble.
    pub redraw_paths_per_trial: bool,
}

impl McSweepConfig {
    pub fn for_scenario(scenario: &Scenario) -> Self {
        Self {
            powers_dbm: (5..=15).map(|i| 2.0 * i as f64).collect(),
            trials: 200,
            block_count: scenario.n_ris() + 1,
            n_fft: 1024,
            sf_step: 0.02,
            search_half_extent_m: 1.0,
            search_step_m: 0.2,
            redraw_paths_per_trial: false,
        }
    }
}

/// Per-trial estimation errors; `NaN` entries mark skipped stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub power_dbm: f64,
    pub trial: u64,
    /// Empty when the trial succeeded; otherwise comma-joined failure tags.
    pub flags: String,
    pub err_ctau1_coarse_m: f64,
    pub err_ctau1_fine_m: f64,
    pub err_xi1_coarse: f64,
    pub err_xi1_fine: f64,
    pub err_zeta1_coarse: f64,
    pub err_zeta1_fine: f64,
    pub err_pt_coarse_m: f64,
    pub err_pt_fine_m: f64,
    pub err_pr_coarse_m: f64,
    pub err_pr_fine_m: f64,
    pub err_b_coarse_m: f64,
    pub err_b_fine_m: f64,
}

/// One sweep row: RMSEs over successful trials next to the bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McSweepRow {
    pub power_dbm: f64,
    pub trials: usize,
    pub failures: usize,
    pub coarse_rmse_ctau1_m: f64,
    pub fine_rmse_ctau1_m: f64,
    pub deb1_m: f64,
    pub coarse_rmse_xi1: f64,
    pub fine_rmse_xi1: f64,
    pub seb_xi1: f64,
    pub coarse_rmse_zeta1: f64,
    pub fine_rmse_zeta1: f64,
    pub seb_zeta1: f64,
    pub coarse_rmse_pt_m: f64,
    pub fine_rmse_pt_m: f64,
    pub peb_t_m: f64,
    pub coarse_rmse_pr_m: f64,
    pub fine_rmse_pr_m: f64,
    pub peb_r_m: f64,
    pub coarse_rmse_b_m: f64,
    pub fine_rmse_b_m: f64,
    pub ceb_m: f64,
}

fn rmse<'a, I: Iterator<Item = &'a f64>>(values: I) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for v in values {
        acc += v * v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        (acc / n as f64).sqrt()
    }
}

/// Runs the full sweep. Per power point the codebook and path gains are
/// fixed (drawn from the scenario seed) and only the noise varies across
/// trials, seeded as `seed xor trial`.
pub fn run_mc_sweep(
    scenario: &Scenario,
    cfg: &McSweepConfig,
) -> anyhow::Result<(Vec<McSweepRow>, Vec<TrialRecord>)> {
    anyhow::ensure!(cfg.trials >= 1, "trials must be at least 1");
    anyhow::ensure!(
        cfg.powers_dbm.windows(2).all(|w| w[0] < w[1])
            && cfg.powers_dbm.iter().all(|p| p.is_finite()),
        "sweep powers must be finite and strictly increasing"
    );
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &power in &cfg.powers_dbm {
        let mut s = scenario.clone();
        s.radio.avg_power_dbm = power;
        let (row, trials) = run_power_point(&s, cfg)?;
        rows.push(row);
        records.extend(trials);
    }
    Ok((rows, records))
}

fn run_power_point(
    s: &Scenario,
    cfg: &McSweepConfig,
) -> anyhow::Result<(McSweepRow, Vec<TrialRecord>)> {
    let power = s.radio.avg_power_dbm;
    let mut gain_rng = ChaCha8Rng::seed_from_u64(s.seed);
    let paths = enumerate_paths(s, &mut gain_rng)?;
    let codebook = random_codebook_expanded(
        s,
        cfg.block_count,
        &mut ChaCha8Rng::seed_from_u64(s.seed ^ 0xc0de_b00c),
    )?;
    let delta = DVector::from_element(s.radio.n_transmissions, 1.0);
    let pilots = unit_pilots(&s.radio);
    // Bounds are referenced to the multipath-free problem (clustered
    // scatterers are generally unresolvable and would make the joint CRB
    // blow up); the scatterers still enter the synthesized trials below.
    let primary: Vec<_> = paths
        .iter()
        .filter(|p| matches!(p.kind, PathKind::Los | PathKind::Ris { .. }))
        .cloned()
        .collect();
    let bounds = positioning_bounds_with_paths(s, &codebook, &delta, &primary, Knowns::None)?;

    let ris1 = paths
        .iter()
        .position(|p| p.kind == PathKind::Ris { ris: 0 })
        .expect("at least one RIS path");
    let truth_r1 = paths[ris1].delay.range_m;
    let truth_sf1 = paths[ris1].spatial_freq.unwrap();
    let los_offset = usize::from(!s.los_blocked);
    let est_opts = EstimatorOptions {
        n_fft: cfg.n_fft,
        sf_step: cfg.sf_step,
        sf_windows: None,
    };
    let mode = if s.los_blocked {
        LocateMode::Blocked
    } else {
        LocateMode::LosAvailable
    };
    let search = SearchSpec {
        center_m: s.tx_position_m,
        half_extent_m: [cfg.search_half_extent_m; 3],
        step_m: cfg.search_step_m,
        pair_weights: None,
        path_weights: None,
    };

    let records: Vec<TrialRecord> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut flags: Vec<&str> = Vec::new();
            let mut rec = TrialRecord {
                power_dbm: power,
                trial,
                flags: String::new(),
                err_ctau1_coarse_m: f64::NAN,
                err_ctau1_fine_m: f64::NAN,
                err_xi1_coarse: f64::NAN,
                err_xi1_fine: f64::NAN,
                err_zeta1_coarse: f64::NAN,
                err_zeta1_fine: f64::NAN,
                err_pt_coarse_m: f64::NAN,
                err_pt_fine_m: f64::NAN,
                err_pr_coarse_m: f64::NAN,
                err_pr_fine_m: f64::NAN,
                err_b_coarse_m: f64::NAN,
                err_b_fine_m: f64::NAN,
            };
            // Noise comes from its own stream so that scenario variants
            // (e.g. with and without scatterers) see identical noise fields
            // and identical primary gains: the comparison is paired.
            let mut noise_rng = ChaCha8Rng::seed_from_u64((s.seed ^ trial) ^ 0xa5a1_1ce0_f00d);
            let trial_paths;
            let active_paths = if cfg.redraw_paths_per_trial {
                let mut s_t = s.clone();
                s_t.seed = s.seed ^ trial;
                let mut gain_rng = ChaCha8Rng::seed_from_u64(s.seed ^ trial);
                trial_paths = match enumerate_paths(&s_t, &mut gain_rng) {
                    Ok(p) => p,
                    Err(_) => {
                        rec.flags = "synthesis_failed".into();
                        return rec;
                    }
                };
                &trial_paths
            } else {
                &paths
            };
            let y = match synthesize_from_paths(
                s,
                &codebook,
                &delta,
                active_paths,
                &pilots,
                &mut noise_rng,
                true,
            ) {
                Ok(y) => y,
                Err(_) => {
                    rec.flags = "synthesis_failed".into();
                    return rec;
                }
            };
            let (est, diag) = match estimate_channel(s, &codebook, &delta, &y, &est_opts) {
                Ok(v) => v,
                Err(_) => {
                    rec.flags = "estimation_failed".into();
                    return rec;
                }
            };
            if diag.paths.iter().any(|p| !p.converged) {
                flags.push("channel_mle_diverged");
            }
            let p1 = &diag.paths[los_offset];
            rec.err_ctau1_coarse_m = p1.coarse.range_m - truth_r1;
            rec.err_ctau1_fine_m = p1.refined.range_m - truth_r1;
            let c_sf = p1.coarse.spatial_freq.unwrap();
            let f_sf = p1.refined.spatial_freq.unwrap();
            rec.err_xi1_coarse = c_sf.xi - truth_sf1.xi;
            rec.err_xi1_fine = f_sf.xi - truth_sf1.xi;
            rec.err_zeta1_coarse = c_sf.zeta - truth_sf1.zeta;
            rec.err_zeta1_fine = f_sf.zeta - truth_sf1.zeta;

            match coarse_locate(&est, &s.anchors, &search, mode) {
                Ok(coarse) => {
                    rec.err_pt_coarse_m = (coarse.tx() - s.tx()).norm();
                    rec.err_pr_coarse_m = (coarse.rx() - s.rx()).norm();
                    rec.err_b_coarse_m = coarse.clock_offset_m - s.radio.clock_offset_m;
                    let refined = refine_locate(&coarse, &est, &s.anchors, None);
                    if !refined.converged {
                        flags.push("position_mle_diverged");
                    }
                    rec.err_pt_fine_m = (refined.tx() - s.tx()).norm();
                    rec.err_pr_fine_m = (refined.rx() - s.rx()).norm();
                    rec.err_b_fine_m = refined.clock_offset_m - s.radio.clock_offset_m;
                }
                Err(_) => flags.push("coarse_position_infeasible"),
            }
            rec.flags = flags.join(",");
            rec
        })
        .collect();

    let ok: Vec<&TrialRecord> = records.iter().filter(|r| r.flags.is_empty()).collect();
    let failures = records.len() - ok.len();
    let row = McSweepRow {
        power_dbm: power,
        trials: records.len(),
        failures,
        coarse_rmse_ctau1_m: rmse(ok.iter().map(|r| &r.err_ctau1_coarse_m)),
        fine_rmse_ctau1_m: rmse(ok.iter().map(|r| &r.err_ctau1_fine_m)),
        deb1_m: bounds.channel_bounds.deb_m[los_offset],
        coarse_rmse_xi1: rmse(ok.iter().map(|r| &r.err_xi1_coarse)),
        fine_rmse_xi1: rmse(ok.iter().map(|r| &r.err_xi1_fine)),
        seb_xi1: bounds.channel_bounds.seb_xi[0],
        coarse_rmse_zeta1: rmse(ok.iter().map(|r| &r.err_zeta1_coarse)),
        fine_rmse_zeta1: rmse(ok.iter().map(|r| &r.err_zeta1_fine)),
        seb_zeta1: bounds.channel_bounds.seb_zeta[0],
        coarse_rmse_pt_m: rmse(ok.iter().map(|r| &r.err_pt_coarse_m)),
        fine_rmse_pt_m: rmse(ok.iter().map(|r| &r.err_pt_fine_m)),
        peb_t_m: bounds.peb_t_m.unwrap_or(f64::INFINITY),
        coarse_rmse_pr_m: rmse(ok.iter().map(|r| &r.err_pr_coarse_m)),
        fine_rmse_pr_m: rmse(ok.iter().map(|r| &r.err_pr_fine_m)),
        peb_r_m: bounds.peb_r_m,
        coarse_rmse_b_m: rmse(ok.iter().map(|r| &r.err_b_coarse_m)),
        fine_rmse_b_m: rmse(ok.iter().map(|r| &r.err_b_fine_m)),
        ceb_m: bounds.ceb_m.unwrap_or(f64::INFINITY),
    };
    Ok((row, records))
}

/// Column names of the sweep table, in emission order.
pub const SWEEP_COLUMNS: &[&str] = &[
    "power_dbm",
    "trials",
    "failures",
    "coarse_rmse_ctau1_m",
    "fine_rmse_ctau1_m",
    "deb1_m",
    "coarse_rmse_xi1",
    "fine_rmse_xi1",
    "seb_xi1",
    "coarse_rmse_zeta1",
    "fine_rmse_zeta1",
    "seb_zeta1",
    "coarse_rmse_pt_m",
    "fine_rmse_pt_m",
    "peb_t_m",
    "coarse_rmse_pr_m",
    "fine_rmse_pr_m",
    "peb_r_m",
    "coarse_rmse_b_m",
    "fine_rmse_b_m",
    "ceb_m",
];

impl McSweepRow {
    pub fn to_csv_row(&self) -> Vec<String> {
        use crate::output::fmt;
        vec![
            fmt(self.power_dbm),
            self.trials.to_string(),
            self.failures.to_string(),
            fmt(self.coarse_rmse_ctau1_m),
            fmt(self.fine_rmse_ctau1_m),
            fmt(self.deb1_m),
            fmt(self.coarse_rmse_xi1),
            fmt(self.fine_rmse_xi1),
            fmt(self.seb_xi1),
            fmt(self.coarse_rmse_zeta1),
            fmt(self.fine_rmse_zeta1),
            fmt(self.seb_zeta1),
            fmt(self.coarse_rmse_pt_m),
            fmt(self.fine_rmse_pt_m),
            fmt(self.peb_t_m),
            fmt(self.coarse_rmse_pr_m),
            fmt(self.fine_rmse_pr_m),
            fmt(self.peb_r_m),
            fmt(self.coarse_rmse_b_m),
            fmt(self.fine_rmse_b_m),
            fmt(self.ceb_m),
        ]
    }
}

/// Column names of the per-trial table.
pub const TRIAL_COLUMNS: &[&str] = &[
    "power_dbm",
    "trial",
    "flags",
    "err_ctau1_coarse_m",
    "err_ctau1_fine_m",
    "err_xi1_coarse",
    "err_xi1_fine",
    "err_zeta1_coarse",
    "err_zeta1_fine",
    "err_pt_coarse_m",
    "err_pt_fine_m",
    "err_pr_coarse_m",
    "err_pr_fine_m",
    "err_b_coarse_m",
    "err_b_fine_m",
];

impl TrialRecord {
    pub fn to_csv_row(&self) -> Vec<String> {
        use crate::output::fmt;
        vec![
            fmt(self.power_dbm),
            self.trial.to_string(),
            self.flags.clone(),
            fmt(self.err_ctau1_coarse_m),
            fmt(self.err_ctau1_fine_m),
            fmt(self.err_xi1_coarse),
            fmt(self.err_xi1_fine),
            fmt(self.err_zeta1_coarse),
            fmt(self.err_zeta1_fine),
            fmt(self.err_pt_coarse_m),
            fmt(self.err_pt_fine_m),
            fmt(self.err_pr_coarse_m),
            fmt(self.err_pr_fine_m),
            fmt(self.err_b_coarse_m),
            fmt(self.err_b_fine_m),
        ]
    }
}
