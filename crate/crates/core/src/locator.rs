//! 3D-search coarse positioning and maximum-likelihood refinement.
//!
//! For each candidate TX position the spatial-frequency estimates fix one
//! departure bearing per RIS; the RX candidate is the weighted combination
//! of pairwise closest points between those bearing lines, the clock
//! offset follows from the direct-path (or shortest RIS-path) delay, and
//! the remaining delays score the candidate. The grid minimizer seeds a
//! weighted nonlinear least-squares refinement of all seven unknowns.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::ChannelEstimate;
use crate::geometry::Vec3;
use crate::optim::{levenberg_marquardt, LmOptions};
use crate::scenario::RisAnchor;

#[derive(Debug, Error)]
pub enum LocatorError {
    #[error("no feasible candidate in the search area")]
    NoFeasibleCandidate,
    #[error("estimate is missing {0}")]
    MissingEstimate(String),
    #[error("weights: {0}")]
    BadWeights(String),
}

/// Estimation stage that produced a fix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixStage {
    Coarse,
    Refined,
}

/// Positioning output: both UE positions and the clock offset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PositionFix {
    pub tx_m: [f64; 3],
    pub rx_m: [f64; 3],
    pub clock_offset_m: f64,
    /// Value of the stage's cost function at the fix.
    pub cost: f64,
    pub stage: FixStage,
    /// Cleared when the refinement stopped without meeting its tolerance.
    pub converged: bool,
    pub iterations: usize,
}

impl PositionFix {
    pub fn tx(&self) -> Vec3 {
        Vec3::from(self.tx_m)
    }

    pub fn rx(&self) -> Vec3 {
        Vec3::from(self.rx_m)
    }
}

/// Grid specification for the coarse 3D search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSpec {
    pub center_m: [f64; 3],
    pub half_extent_m: [f64; 3],
    pub step_m: f64,
    /// Weights over anchor pairs `(i < j)` in lexicographic order; must sum
    /// to one. Defaults to equal weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_weights: Option<Vec<f64>>,
    /// Per-anchor weights of the delay-residual cost; defaults to one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_weights: Option<Vec<f64>>,
}

impl SearchSpec {
    /// Cube of the given half extent centered at `center`, with the default
    /// weighting.
    pub fn cube(center: Vec3, half_extent_m: f64, step_m: f64) -> Self {
        Self {
            center_m: [center.x, center.y, center.z],
            half_extent_m: [half_extent_m; 3],
            step_m,
            pair_weights: None,
            path_weights: None,
        }
    }

    fn axis(&self, i: usize) -> Vec<f64> {
        let lo = self.center_m[i] - self.half_extent_m[i];
        let n = (2.0 * self.half_extent_m[i] / self.step_m).round() as usize + 1;
        (0..n).map(|k| lo + k as f64 * self.step_m).collect()
    }
}

/// Availability of the direct path for clock-offset recovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocateMode {
    LosAvailable,
    Blocked,
}

/// Departure direction consistent with a candidate arrival direction and
/// the estimated spatial frequencies, in the anchor's local frame.
///
/// Takes the positive-boresight root; a negative radicand means no
/// direction in front of the array matches and the candidate is rejected.
pub fn candidate_rx_direction(t_tx_local: &Vec3, xi: f64, zeta: f64) -> Option<Vec3> {
    let ty = xi - t_tx_local.y;
    let tz = zeta - t_tx_local.z;
    let rad = 1.0 - ty * ty - tz * tz;
    if rad < 0.0 {
        return None;
    }
    Some(Vec3::new(rad.sqrt(), ty, tz))
}

/// Closest point on the line `o1 + s d1` to the line `o2 + t d2`, skipping
/// near-parallel pairs.
fn closest_point_on_first(o1: &Vec3, d1: &Vec3, o2: &Vec3, d2: &Vec3) -> Option<Vec3> {
    if d1.cross(d2).norm() < 1e-9 {
        return None;
    }
    let r = o1 - o2;
    let b = d1.dot(d2);
    let c = d1.dot(&r);
    let f = d2.dot(&r);
    let denom = 1.0 - b * b;
    let s = (b * f - c) / denom;
    Some(o1 + d1 * s)
}

/// Weighted combination of pairwise closest points between bearing lines
/// (per pair, the point on the first line). Near-parallel pairs are
/// skipped with their weight renormalized away; returns `None` when no
/// usable pair remains.
pub fn triangulate_rx(
    origins: &[Vec3],
    directions: &[Vec3],
    pair_weights: Option<&[f64]>,
) -> Option<Vec3> {
    let l = origins.len();
    let default_w = 2.0 / (l as f64 * (l as f64 - 1.0));
    let mut acc = Vec3::zeros();
    let mut total_w = 0.0;
    let mut pair_idx = 0;
    for i in 0..l {
        for j in (i + 1)..l {
            let w = pair_weights.map_or(default_w, |w| w[pair_idx]);
            pair_idx += 1;
            if w == 0.0 {
                continue;
            }
            if let Some(p) =
                closest_point_on_first(&origins[i], &directions[i], &origins[j], &directions[j])
            {
                acc += p * w;
                total_w += w;
            }
        }
    }
    if total_w <= 0.0 {
        return None;
    }
    Some(acc / total_w)
}

/// RX candidate, clock offset, and delay-residual cost for one TX
/// candidate; `None` when the candidate is infeasible.
fn evaluate_candidate(
    tx: &Vec3,
    estimate: &ChannelEstimate,
    anchors: &[RisAnchor],
    mode: LocateMode,
    pair_weights: Option<&[f64]>,
    path_weights: Option<&[f64]>,
) -> Option<(Vec3, f64, f64)> {
    let l = anchors.len();
    let mut origins = Vec::with_capacity(l);
    let mut dirs = Vec::with_capacity(l);
    for (idx, anchor) in anchors.iter().enumerate() {
        let p = anchor.position();
        let rot = anchor.rotation();
        let t_tx = crate::geometry::local_direction(tx, &p, &rot).ok()?;
        let sf = estimate.ris[idx].spatial_freq?;
        let t_rx = candidate_rx_direction(&t_tx, sf.xi, sf.zeta)?;
        origins.push(p);
        dirs.push(rot * t_rx);
    }
    let rx = triangulate_rx(&origins, &dirs, pair_weights)?;

    // Index of the shortest RIS path, used for clock recovery when the
    // direct path is blocked.
    let shortest = estimate
        .ris
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.range_m.partial_cmp(&b.1.range_m).unwrap())
        .map(|(i, _)| i)?;

    let (b, skip) = match mode {
        LocateMode::LosAvailable => {
            let r0 = estimate.los_range_m?;
            (r0 - (rx - tx).norm(), usize::MAX)
        }
        LocateMode::Blocked => {
            let p = anchors[shortest].position();
            (
                estimate.ris[shortest].range_m - (rx - p).norm() - (tx - p).norm(),
                shortest,
            )
        }
    };

    let mut cost = 0.0;
    for (idx, anchor) in anchors.iter().enumerate() {
        if idx == skip {
            continue;
        }
        let w = path_weights.map_or(1.0, |w| w[idx]);
        let p = anchor.position();
        let predicted = b + (tx - p).norm() + (rx - p).norm();
        cost += w * (predicted - estimate.ris[idx].range_m).abs();
    }
    Some((rx, b, cost))
}

/// Coarse positioning: exhaustive TX grid search, RX triangulation, clock
/// recovery, and delay-residual scoring. Ties break toward the lowest
/// linear grid index.
pub fn coarse_locate(
    estimate: &ChannelEstimate,
    anchors: &[RisAnchor],
    spec: &SearchSpec,
    mode: LocateMode,
) -> Result<PositionFix, LocatorError> {
    if mode == LocateMode::LosAvailable && estimate.los_range_m.is_none() {
        return Err(LocatorError::MissingEstimate("the direct-path delay".into()));
    }
    if estimate.ris.len() != anchors.len() {
        return Err(LocatorError::MissingEstimate(format!(
            "estimates for all {} anchors",
            anchors.len()
        )));
    }
    if let Some(w) = &spec.pair_weights {
        let l = anchors.len();
        if w.len() != l * (l - 1) / 2 {
            return Err(LocatorError::BadWeights(format!(
                "expected {} pair weights, got {}",
                l * (l - 1) / 2,
                w.len()
            )));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(LocatorError::BadWeights(format!(
                "pair weights sum to {sum}, expected 1"
            )));
        }
    }

    let xs = spec.axis(0);
    let ys = spec.axis(1);
    let zs = spec.axis(2);
    let candidates: Vec<Vec3> = zs
        .iter()
        .flat_map(|&z| {
            let xs = &xs;
            ys.iter()
                .flat_map(move |&y| xs.iter().map(move |&x| Vec3::new(x, y, z)))
                .collect::<Vec<_>>()
        })
        .collect();

    let results: Vec<Option<(Vec3, f64, f64)>> = candidates
        .par_iter()
        .map(|tx| {
            evaluate_candidate(
                tx,
                estimate,
                anchors,
                mode,
                spec.pair_weights.as_deref(),
                spec.path_weights.as_deref(),
            )
        })
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for (idx, r) in results.iter().enumerate() {
        if let Some((_, _, cost)) = r {
            if best.is_none_or(|(_, c)| *cost < c) {
                best = Some((idx, *cost));
            }
        }
    }
    let (idx, cost) = best.ok_or(LocatorError::NoFeasibleCandidate)?;
    let (rx, b, _) = results[idx].unwrap();
    let tx = candidates[idx];
    Ok(PositionFix {
        tx_m: [tx.x, tx.y, tx.z],
        rx_m: [rx.x, rx.y, rx.z],
        clock_offset_m: b,
        cost,
        stage: FixStage::Coarse,
        converged: true,
        iterations: 0,
    })
}

/// Nuisance-free parameters predicted by a state: `[r0?, (xi, zeta, r) per
/// anchor]`, matching [`ChannelEstimate::to_vector`].
pub fn predict_parameters(
    tx: &Vec3,
    rx: &Vec3,
    b: f64,
    anchors: &[RisAnchor],
    los: bool,
) -> Option<DVector<f64>> {
    let mut v = Vec::new();
    if los {
        v.push((tx - rx).norm() + b);
    }
    for anchor in anchors {
        let p = anchor.position();
        let rot = anchor.rotation();
        let t_tx = crate::geometry::local_direction(tx, &p, &rot).ok()?;
        let t_rx = crate::geometry::local_direction(rx, &p, &rot).ok()?;
        v.push(t_tx.y + t_rx.y);
        v.push(t_tx.z + t_rx.z);
        v.push((tx - p).norm() + (rx - p).norm() + b);
    }
    Some(DVector::from_vec(v))
}

/// Analytic Jacobian of [`predict_parameters`] w.r.t. `[tx, rx, b]`
/// (rows index parameters, columns the seven state entries).
fn prediction_jacobian(tx: &Vec3, rx: &Vec3, anchors: &[RisAnchor], los: bool) -> DMatrix<f64> {
    let rows = if los { 1 } else { 0 } + 3 * anchors.len();
    let mut j = DMatrix::zeros(rows, 7);
    let mut row = 0;
    if los {
        let diff = tx - rx;
        let u = diff / diff.norm();
        for i in 0..3 {
            j[(row, i)] = u[i];
            j[(row, 3 + i)] = -u[i];
        }
        j[(row, 6)] = 1.0;
        row += 1;
    }
    for anchor in anchors {
        let p = anchor.position();
        let rot = anchor.rotation();
        let (row_xi, row_zeta, row_r) = (row, row + 1, row + 2);
        for (col0, ue) in [(0usize, tx), (3usize, rx)] {
            let diff = ue - p;
            let d = diff.norm();
            let u = diff / d;
            let proj = (nalgebra::Matrix3::identity() - u * u.transpose()) / d;
            let dt = rot.transpose() * proj;
            for i in 0..3 {
                j[(row_xi, col0 + i)] = dt[(1, i)];
                j[(row_zeta, col0 + i)] = dt[(2, i)];
                j[(row_r, col0 + i)] = u[i];
            }
        }
        j[(row_r, 6)] = 1.0;
        row += 3;
    }
    j
}

/// Weighted nonlinear least-squares refinement of the seven state unknowns
/// against the estimated channel parameters.
///
/// `covariance` weighs the residual by its inverse; identity when absent.
/// Stops when the step drops below `1e-10` or after 100 iterations. If the
/// solver fails to produce a finite improvement, the coarse fix is
/// returned with the convergence flag cleared.
pub fn refine_locate(
    coarse: &PositionFix,
    estimate: &ChannelEstimate,
    anchors: &[RisAnchor],
    covariance: Option<&DMatrix<f64>>,
) -> PositionFix {
    let los = estimate.los_range_m.is_some();
    let observed = estimate.to_vector();
    let n = observed.len();
    // Whitening via the Cholesky factor of the covariance.
    let white: DMatrix<f64> = match covariance {
        Some(cov) => {
            assert_eq!(cov.nrows(), n, "covariance must match the estimate size");
            match cov.clone().cholesky() {
                Some(ch) => ch
                    .l()
                    .solve_lower_triangular(&DMatrix::identity(n, n))
                    .expect("triangular solve"),
                None => DMatrix::identity(n, n),
            }
        }
        None => DMatrix::identity(n, n),
    };

    let unpack = |x: &DVector<f64>| {
        (
            Vec3::new(x[0], x[1], x[2]),
            Vec3::new(x[3], x[4], x[5]),
            x[6],
        )
    };
    let big = 1e6;
    let residual = |x: &DVector<f64>| -> DVector<f64> {
        let (tx, rx, b) = unpack(x);
        match predict_parameters(&tx, &rx, b, anchors, los) {
            Some(pred) => &white * (&observed - pred),
            None => DVector::from_element(n, big),
        }
    };
    let jacobian = |x: &DVector<f64>| -> DMatrix<f64> {
        let (tx, rx, _) = unpack(x);
        -(&white * prediction_jacobian(&tx, &rx, anchors, los))
    };

    let x0 = DVector::from_vec(vec![
        coarse.tx_m[0],
        coarse.tx_m[1],
        coarse.tx_m[2],
        coarse.rx_m[0],
        coarse.rx_m[1],
        coarse.rx_m[2],
        coarse.clock_offset_m,
    ]);
    let result = levenberg_marquardt(
        x0,
        residual,
        jacobian,
        LmOptions {
            max_iterations: 100,
            step_tol: 1e-10,
        },
    );
    if !result.cost.is_finite() {
        let mut fix = coarse.clone();
        fix.converged = false;
        return fix;
    }
    let (tx, rx, b) = unpack(&result.params);
    PositionFix {
        tx_m: [tx.x, tx.y, tx.z],
        rx_m: [rx.x, rx.y, rx.z],
        clock_offset_m: b,
        cost: 2.0 * result.cost,
        stage: FixStage::Refined,
        converged: result.converged,
        iterations: result.iterations,
    }
}

/// Noise-free nuisance-free channel parameters of a scenario, i.e. the
/// estimate an ideal first stage would deliver.
pub fn exact_channel_estimate(scenario: &crate::scenario::Scenario) -> Option<ChannelEstimate> {
    let tx = scenario.tx();
    let rx = scenario.rx();
    let b = scenario.radio.clock_offset_m;
    let los_range_m = if scenario.los_blocked {
        None
    } else {
        Some((tx - rx).norm() + b)
    };
    let mut ris = Vec::with_capacity(scenario.anchors.len());
    for anchor in &scenario.anchors {
        let p = anchor.position();
        let rot = anchor.rotation();
        let t_tx = crate::geometry::local_direction(&tx, &p, &rot).ok()?;
        let t_rx = crate::geometry::local_direction(&rx, &p, &rot).ok()?;
        ris.push(crate::estimator::PathParams {
            range_m: (tx - p).norm() + (rx - p).norm() + b,
            spatial_freq: Some(crate::geometry::SpatialFreq::new(
                t_tx.y + t_rx.y,
                t_tx.z + t_rx.z,
            )),
        });
    }
    Some(ChannelEstimate { los_range_m, ris })
}

/// Coarse-stage cost over a 2D slice of TX candidates at fixed height.
/// Infeasible candidates carry `f64::INFINITY`.
pub fn cost_landscape(
    estimate: &ChannelEstimate,
    anchors: &[RisAnchor],
    mode: LocateMode,
    xs: &[f64],
    ys: &[f64],
    z: f64,
) -> DMatrix<f64> {
    let mut map = DMatrix::zeros(ys.len(), xs.len());
    for (iy, &y) in ys.iter().enumerate() {
        for (ix, &x) in xs.iter().enumerate() {
            let tx = Vec3::new(x, y, z);
            map[(iy, ix)] = evaluate_candidate(&tx, estimate, anchors, mode, None, None)
                .map_or(f64::INFINITY, |(_, _, cost)| cost);
        }
    }
    map
}
