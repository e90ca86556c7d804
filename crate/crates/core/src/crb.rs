//! Fisher information and Cramér–Rao bounds for channel parameters and the
//! seven positioning unknowns, plus PEB heatmap generation.
//!
//! Internals use well-conditioned canonical units: delays as equivalent
//! ranges in meters, gain amplitudes relative to their true values, phases
//! in radians. All reported bounds are therefore in meters (delays,
//! positions, clock offset) or dimensionless (spatial frequencies).
//!
//! The per-sample derivative of the noise-free observation separates into a
//! subcarrier factor and a transmission factor for every parameter, so the
//! information matrix is assembled as a Hadamard product of two small Gram
//! matrices instead of a sum over all `K * G` samples.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{
    delay_vector, enumerate_paths, ris_response, PathDescriptor,
};
use crate::codebook::Codebook;
use crate::geometry::PathKind;
use crate::scenario::{element_positions, Scenario};
use crate::{C64, SPEED_OF_LIGHT};

/// Condition number above which a Fisher matrix is treated as singular and
/// the affected bounds reported as infinite.
pub const SINGULAR_CONDITION: f64 = 1e12;

#[derive(Debug, Error)]
pub enum CrbError {
    #[error("channel: {0}")]
    Channel(#[from] crate::channel::ChannelError),
    #[error("nuisance block is numerically singular (condition {0:.3e})")]
    SingularNuisance(f64),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
}

/// One entry of the channel-parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Equivalent range `c * tau`, meters.
    Range,
    /// Spatial frequency along the array's local y axis.
    Xi,
    /// Spatial frequency along the array's local z axis.
    Zeta,
    /// Gain amplitude relative to its true value.
    Alpha,
    /// Gain phase, radians.
    Beta,
}

/// Maps channel parameters to (path, kind) pairs.
///
/// Layout: direct path `[range, alpha, beta]` (when present), then each RIS
/// path `[xi, zeta, range, alpha, beta]`, then the scattered paths with the
/// same per-path layout. `n_primary` counts the non-multipath entries.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub entries: Vec<(usize, ParamKind)>,
    pub n_primary: usize,
    /// Indices of the non-multipath paths, in layout order.
    pub primary_paths: Vec<usize>,
}

impl ParamLayout {
    pub fn for_paths(paths: &[PathDescriptor]) -> Self {
        let mut entries = Vec::new();
        let mut primary_paths = Vec::new();
        let push_path = |entries: &mut Vec<(usize, ParamKind)>, idx: usize, ris: bool| {
            if ris {
                entries.push((idx, ParamKind::Xi));
                entries.push((idx, ParamKind::Zeta));
            }
            entries.push((idx, ParamKind::Range));
            entries.push((idx, ParamKind::Alpha));
            entries.push((idx, ParamKind::Beta));
        };
        for (idx, p) in paths.iter().enumerate() {
            match p.kind {
                PathKind::Los => {
                    push_path(&mut entries, idx, false);
                    primary_paths.push(idx);
                }
                PathKind::Ris { .. } => {
                    push_path(&mut entries, idx, true);
                    primary_paths.push(idx);
                }
                _ => {}
            }
        }
        let n_primary = entries.len();
        for (idx, p) in paths.iter().enumerate() {
            match p.kind {
                PathKind::MpLos => push_path(&mut entries, idx, false),
                PathKind::MpRisInbound { .. } | PathKind::MpRisOutbound { .. } => {
                    push_path(&mut entries, idx, true)
                }
                _ => {}
            }
        }
        Self {
            entries,
            n_primary,
            primary_paths,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Column of a given path/kind pair, if present.
    pub fn index_of(&self, path: usize, kind: ParamKind) -> Option<usize> {
        self.entries
            .iter()
            .position(|&(p, k)| p == path && k == kind)
    }
}

/// Separable factors of the observation Jacobian at unit transmit power:
/// column `a` of the derivative w.r.t. parameter `a` evaluates to
/// `sqrt(P) * u[(k, a)] * v[(g, a)] * delta_g`.
///
/// Power and noise enter only through the scalar `scale = 2 P / sigma^2`,
/// so matrix inversions run on power-independent matrices and the
/// `P^{-1/2}` law of every bound holds exactly, not just to rounding.
pub struct FimFactors {
    pub u: DMatrix<C64>,
    pub v_unit: DMatrix<C64>,
    /// `2 P / sigma^2`.
    pub scale: f64,
    pub sqrt_power: f64,
    pub layout: ParamLayout,
}

impl FimFactors {
    /// Unit-scale information matrix (geometry and codebook only).
    pub fn fim_unit(&self, delta: &DVector<f64>) -> DMatrix<f64> {
        let mut w = self.v_unit.clone();
        for g in 0..w.nrows() {
            let d = delta[g];
            for a in 0..w.ncols() {
                w[(g, a)] *= d;
            }
        }
        let gu = self.u.adjoint() * &self.u;
        let gv = w.adjoint() * &w;
        let p = self.layout.len();
        DMatrix::from_fn(p, p, |a, b| (gu[(a, b)] * gv[(a, b)]).re)
    }

    /// Information matrix for the power-control vector `delta`.
    pub fn fim(&self, delta: &DVector<f64>) -> DMatrix<f64> {
        self.fim_unit(delta) * self.scale
    }

    /// Observation derivative w.r.t. parameter `a` at sample `(k, g)`.
    pub fn jacobian_entry(&self, k: usize, g: usize, a: usize, delta: &DVector<f64>) -> C64 {
        self.u[(k, a)] * self.v_unit[(g, a)] * delta[g] * self.sqrt_power
    }

    /// Per-transmission contributions `O_g` such that the information matrix
    /// equals `sum_g delta_g^2 O_g`.
    pub fn per_transmission(&self) -> Vec<DMatrix<f64>> {
        let gu = self.u.adjoint() * &self.u;
        let p = self.layout.len();
        (0..self.v_unit.nrows())
            .map(|g| {
                DMatrix::from_fn(p, p, |a, b| {
                    let vv = self.v_unit[(g, a)].conj() * self.v_unit[(g, b)];
                    self.scale * (gu[(a, b)] * vv).re
                })
            })
            .collect()
    }
}

/// Builds the separable Jacobian factors of the noise-free observation for
/// the given paths.
pub fn fim_factors(
    scenario: &Scenario,
    codebook: &Codebook,
    paths: &[PathDescriptor],
    layout: &ParamLayout,
) -> FimFactors {
    let radio = &scenario.radio;
    let k_count = radio.n_subcarriers;
    let g_count = radio.n_transmissions;
    let kappa = std::f64::consts::TAU * radio.carrier_freq_hz / SPEED_OF_LIGHT;
    let delay_rate = std::f64::consts::TAU * radio.subcarrier_spacing_hz / SPEED_OF_LIGHT;

    // Per-path precomputations.
    let delay_vecs: Vec<DVector<C64>> = paths
        .iter()
        .map(|p| delay_vector(p.delay.range_m, radio))
        .collect();
    let gain_rows: Vec<DVector<C64>> = paths
        .iter()
        .map(|p| crate::channel::ris_gain_per_transmission(p, scenario, codebook))
        .collect();
    // omega_g^T (a_R .* j kappa y) and the z analogue, for RIS-modulated paths.
    let der_rows: Vec<Option<(DVector<C64>, DVector<C64>)>> = paths
        .iter()
        .map(|p| {
            let (ris, sf) = (p.ris_index()?, p.spatial_freq.as_ref()?);
            let anchor = &scenario.anchors[ris];
            let a = ris_response(anchor, sf, radio.carrier_freq_hz);
            let elements = element_positions(anchor, radio.carrier_freq_hz);
            let ay = DVector::from_iterator(
                a.len(),
                a.iter()
                    .zip(elements.iter())
                    .map(|(x, z)| x * C64::new(0.0, kappa * z.y)),
            );
            let az = DVector::from_iterator(
                a.len(),
                a.iter()
                    .zip(elements.iter())
                    .map(|(x, z)| x * C64::new(0.0, kappa * z.z)),
            );
            let profile = &codebook.profiles[ris];
            let vy = DVector::from_iterator(
                g_count,
                (0..g_count).map(|col| profile.column(col).dot(&ay)),
            );
            let vz = DVector::from_iterator(
                g_count,
                (0..g_count).map(|col| profile.column(col).dot(&az)),
            );
            Some((vy, vz))
        })
        .collect();

    let p_count = layout.len();
    let mut u = DMatrix::zeros(k_count, p_count);
    let mut v = DMatrix::zeros(g_count, p_count);
    for (a, &(pi, kind)) in layout.entries.iter().enumerate() {
        let path = &paths[pi];
        let d = &delay_vecs[pi];
        match kind {
            ParamKind::Range => {
                // d/dr = -j 2 pi k delta_f / c times the path term.
                for k in 0..k_count {
                    u[(k, a)] = d[k] * C64::new(0.0, -delay_rate * (k + 1) as f64);
                }
                for g in 0..g_count {
                    v[(g, a)] = path.gain * gain_rows[pi][g];
                }
            }
            ParamKind::Alpha => {
                for k in 0..k_count {
                    u[(k, a)] = d[k];
                }
                for g in 0..g_count {
                    v[(g, a)] = path.gain * gain_rows[pi][g];
                }
            }
            ParamKind::Beta => {
                for k in 0..k_count {
                    u[(k, a)] = d[k];
                }
                for g in 0..g_count {
                    v[(g, a)] = C64::new(0.0, -1.0) * path.gain * gain_rows[pi][g];
                }
            }
            ParamKind::Xi | ParamKind::Zeta => {
                let (vy, vz) = der_rows[pi]
                    .as_ref()
                    .expect("spatial parameters only exist for RIS-modulated paths");
                let row = if kind == ParamKind::Xi { vy } else { vz };
                for k in 0..k_count {
                    u[(k, a)] = d[k];
                }
                for g in 0..g_count {
                    v[(g, a)] = path.gain * row[g];
                }
            }
        }
    }

    let power = radio.power_watts();
    FimFactors {
        u,
        v_unit: v,
        scale: 2.0 * power / scenario.noise_variance_w(),
        sqrt_power: power.sqrt(),
        layout: layout.clone(),
    }
}

/// Noise-free observation as a function of the canonical parameter vector;
/// the Jacobian factors above are the analytic derivatives of this model.
/// Used by finite-difference validation.
pub fn model_observation(
    scenario: &Scenario,
    codebook: &Codebook,
    delta: &DVector<f64>,
    paths: &[PathDescriptor],
    layout: &ParamLayout,
    theta: &DVector<f64>,
) -> DMatrix<C64> {
    let mut perturbed: Vec<PathDescriptor> = paths.to_vec();
    for (a, &(pi, kind)) in layout.entries.iter().enumerate() {
        let p = &mut perturbed[pi];
        match kind {
            ParamKind::Range => {
                p.delay = crate::geometry::PathDelay::from_range_m(theta[a]);
            }
            ParamKind::Xi => p.spatial_freq.as_mut().unwrap().xi = theta[a],
            ParamKind::Zeta => p.spatial_freq.as_mut().unwrap().zeta = theta[a],
            ParamKind::Alpha | ParamKind::Beta => {}
        }
    }
    // Gains: alpha is relative to the true amplitude.
    for (a, &(pi, kind)) in layout.entries.iter().enumerate() {
        if kind == ParamKind::Alpha {
            let beta_idx = layout
                .index_of(pi, ParamKind::Beta)
                .expect("alpha and beta always paired");
            let alpha_true = paths[pi].amplitude();
            perturbed[pi].gain =
                C64::from_polar(theta[a] * alpha_true, -theta[beta_idx]);
        }
    }
    let pilots = crate::channel::unit_pilots(&scenario.radio);
    let mut y = DMatrix::zeros(scenario.radio.n_subcarriers, scenario.radio.n_transmissions);
    for p in &perturbed {
        y += crate::channel::path_matrix(p, scenario, codebook, delta, &pilots);
    }
    y
}

/// Canonical parameter values of the given paths in layout order.
pub fn true_parameters(paths: &[PathDescriptor], layout: &ParamLayout) -> DVector<f64> {
    DVector::from_iterator(
        layout.len(),
        layout.entries.iter().map(|&(pi, kind)| match kind {
            ParamKind::Range => paths[pi].delay.range_m,
            ParamKind::Xi => paths[pi].spatial_freq.unwrap().xi,
            ParamKind::Zeta => paths[pi].spatial_freq.unwrap().zeta,
            ParamKind::Alpha => 1.0,
            ParamKind::Beta => paths[pi].beta(),
        }),
    )
}

/// Fisher information of all channel parameters (multipath included when
/// present). Gain phases are drawn deterministically from the scenario
/// seed.
pub fn fim_channel(
    scenario: &Scenario,
    codebook: &Codebook,
    delta: &DVector<f64>,
) -> Result<(DMatrix<f64>, ParamLayout, Vec<PathDescriptor>), CrbError> {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let paths = enumerate_paths(scenario, &mut rng)?;
    let layout = ParamLayout::for_paths(&paths);
    let factors = fim_factors(scenario, codebook, &paths, &layout);
    Ok((factors.fim(delta), layout, paths))
}

/// Equivalent Fisher information of the kept parameters: the Schur
/// complement over the discarded block.
pub fn efim(fim: &DMatrix<f64>, keep: &[usize]) -> Result<DMatrix<f64>, CrbError> {
    let n = fim.nrows();
    let drop: Vec<usize> = (0..n).filter(|i| !keep.contains(i)).collect();
    if drop.is_empty() {
        return Ok(fim.clone());
    }
    let a = fim.select_rows(keep).select_columns(keep);
    let b = fim.select_rows(keep).select_columns(&drop);
    let d = fim.select_rows(&drop).select_columns(&drop);
    let (d_inv, cond) = invert_spd(&d);
    let d_inv = d_inv.ok_or(CrbError::SingularNuisance(cond))?;
    Ok(&a - &b * d_inv * b.transpose())
}

/// Symmetric PSD inverse with a condition estimate; `None` when the matrix
/// is numerically singular.
fn invert_spd(m: &DMatrix<f64>) -> (Option<DMatrix<f64>>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if !max.is_finite() || max <= 0.0 || min <= 0.0 {
        return (None, f64::INFINITY);
    }
    let cond = max / min;
    if cond > SINGULAR_CONDITION {
        return (None, cond);
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    (
        Some(&eig.eigenvectors * inv_diag * eig.eigenvectors.transpose()),
        cond,
    )
}

/// Per-path delay and spatial-frequency error bounds from a channel FIM
/// restricted to the non-multipath block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelBounds {
    /// Delay error bound per primary path, meters (range units).
    pub deb_m: Vec<f64>,
    /// Spatial-frequency bounds per RIS path.
    pub seb_xi: Vec<f64>,
    pub seb_zeta: Vec<f64>,
    pub condition: f64,
}

/// Error bounds on the primary channel parameters: square roots of the
/// designated diagonal entries of the inverse FIM.
pub fn error_bounds(fim_primary: &DMatrix<f64>, layout: &ParamLayout) -> ChannelBounds {
    error_bounds_scaled(fim_primary, layout, 1.0)
}

/// Bounds from a unit-scale FIM whose true value is `scale` times larger.
fn error_bounds_scaled(fim_unit: &DMatrix<f64>, layout: &ParamLayout, scale: f64) -> ChannelBounds {
    let (inv, cond) = invert_spd(fim_unit);
    let mut deb = Vec::new();
    let mut seb_xi = Vec::new();
    let mut seb_zeta = Vec::new();
    for &pi in &layout.primary_paths {
        let get = |kind: ParamKind| -> Option<f64> {
            let idx = layout.index_of(pi, kind)?;
            if idx >= layout.n_primary {
                return None;
            }
            Some(match &inv {
                Some(m) => (m[(idx, idx)].max(0.0) / scale).sqrt(),
                None => f64::INFINITY,
            })
        };
        if let Some(v) = get(ParamKind::Range) {
            deb.push(v);
        }
        if let Some(v) = get(ParamKind::Xi) {
            seb_xi.push(v);
        }
        if let Some(v) = get(ParamKind::Zeta) {
            seb_zeta.push(v);
        }
    }
    ChannelBounds {
        deb_m: deb,
        seb_xi,
        seb_zeta,
        condition: cond,
    }
}

/// State vector layout: `[tx(3), rx(3), clock offset, (alpha, beta) per
/// primary path]`.
pub fn state_dim(layout: &ParamLayout) -> usize {
    7 + 2 * layout.primary_paths.len()
}

/// Jacobian of the primary channel parameters w.r.t. the state
/// (denominator layout: rows index the state, columns index parameters).
///
/// Delays are in range units, so `d(range)/d(clock offset) = 1` and the
/// position gradients are unit vectors along the propagation segments.
pub fn state_jacobian(
    scenario: &Scenario,
    paths: &[PathDescriptor],
    layout: &ParamLayout,
) -> Result<DMatrix<f64>, CrbError> {
    let tx = scenario.tx();
    let rx = scenario.rx();
    let mut jac = DMatrix::zeros(state_dim(layout), layout.n_primary);

    let gain_row_base = 7;
    for (slot, &pi) in layout.primary_paths.iter().enumerate() {
        let path = &paths[pi];
        match path.kind {
            PathKind::Los => {
                let col = layout.index_of(pi, ParamKind::Range).unwrap();
                let diff = tx - rx;
                let d = diff.norm();
                if d < 1e-9 {
                    return Err(CrbError::Degenerate("TX and RX coincide".into()));
                }
                let u = diff / d;
                for i in 0..3 {
                    jac[(i, col)] = u[i];
                    jac[(3 + i, col)] = -u[i];
                }
                jac[(6, col)] = 1.0;
            }
            PathKind::Ris { ris } => {
                let anchor = &scenario.anchors[ris];
                let p = anchor.position();
                let rot = anchor.rotation();
                let col_r = layout.index_of(pi, ParamKind::Range).unwrap();
                let col_xi = layout.index_of(pi, ParamKind::Xi).unwrap();
                let col_zeta = layout.index_of(pi, ParamKind::Zeta).unwrap();

                for (ue_row, ue) in [(0usize, tx), (3usize, rx)] {
                    let diff = ue - p;
                    let d = diff.norm();
                    if d < 1e-9 {
                        return Err(CrbError::Degenerate(format!(
                            "UE coincides with anchor {ris}"
                        )));
                    }
                    let u = diff / d;
                    for i in 0..3 {
                        jac[(ue_row + i, col_r)] = u[i];
                    }
                    // d t_local / d ue = R^T (I - u u^T) / d; xi and zeta are
                    // its y and z components.
                    let proj = (nalgebra::Matrix3::identity() - u * u.transpose()) / d;
                    let dt = rot.transpose() * proj;
                    for i in 0..3 {
                        jac[(ue_row + i, col_xi)] = dt[(1, i)];
                        jac[(ue_row + i, col_zeta)] = dt[(2, i)];
                    }
                }
                jac[(6, col_r)] = 1.0;
            }
            _ => unreachable!("primary paths are direct or RIS paths"),
        }
        let col_a = layout.index_of(pi, ParamKind::Alpha).unwrap();
        let col_b = layout.index_of(pi, ParamKind::Beta).unwrap();
        jac[(gain_row_base + 2 * slot, col_a)] = 1.0;
        jac[(gain_row_base + 2 * slot + 1, col_b)] = 1.0;
    }
    Ok(jac)
}

/// Nuisance-free parameter values `(range, xi, zeta per path)` of the
/// primary paths, in layout order with gains skipped.
pub fn nuisance_free_indices(layout: &ParamLayout) -> Vec<usize> {
    layout
        .entries
        .iter()
        .take(layout.n_primary)
        .enumerate()
        .filter(|(_, (_, kind))| {
            matches!(kind, ParamKind::Range | ParamKind::Xi | ParamKind::Zeta)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Parameters assumed known when inverting the state information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Knowns {
    #[default]
    None,
    /// Clock offset known (round-trip synchronized).
    ClockOffset,
    /// Both UE heights known.
    Height,
    /// TX position fully known.
    TxPosition,
}

impl Knowns {
    fn removed_rows(&self) -> Vec<usize> {
        match self {
            Knowns::None => vec![],
            Knowns::ClockOffset => vec![6],
            Knowns::Height => vec![2, 5],
            Knowns::TxPosition => vec![0, 1, 2],
        }
    }
}

/// Fisher matrices, error bounds, and conditioning diagnostics.
#[derive(Debug, Clone)]
pub struct FimReport {
    pub fim_eta: DMatrix<f64>,
    pub fim_state: DMatrix<f64>,
    pub channel_bounds: ChannelBounds,
    /// TX position error bound, meters; `None` when the TX is known.
    pub peb_t_m: Option<f64>,
    /// RX position error bound, meters.
    pub peb_r_m: f64,
    /// Clock offset error bound, meters; `None` when the offset is known.
    pub ceb_m: Option<f64>,
    pub condition_eta: f64,
    pub condition_state: f64,
    /// Set when the state information was numerically singular.
    pub blind: bool,
}

/// End-to-end bound computation: channel FIM (multipath marginalized),
/// state FIM through the geometry Jacobian, and the requested bounds.
pub fn positioning_bounds(
    scenario: &Scenario,
    codebook: &Codebook,
    delta: &DVector<f64>,
    knowns: Knowns,
) -> Result<FimReport, CrbError> {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let paths = enumerate_paths(scenario, &mut rng)?;
    positioning_bounds_with_paths(scenario, codebook, delta, &paths, knowns)
}

/// Same as [`positioning_bounds`] with an explicit path list (useful when
/// the gain realization must be shared with a synthesized signal).
pub fn positioning_bounds_with_paths(
    scenario: &Scenario,
    codebook: &Codebook,
    delta: &DVector<f64>,
    paths: &[PathDescriptor],
    knowns: Knowns,
) -> Result<FimReport, CrbError> {
    let layout = ParamLayout::for_paths(paths);
    let factors = fim_factors(scenario, codebook, paths, &layout);
    let unit_all = factors.fim_unit(delta);
    let scale = factors.scale;

    // Marginalize multipath parameters first; the Schur complement commutes
    // with the overall scale.
    let keep: Vec<usize> = (0..layout.n_primary).collect();
    let unit_eta = efim(&unit_all, &keep)?;
    let channel_bounds = error_bounds_scaled(&unit_eta, &layout, scale);

    let jac = state_jacobian(scenario, paths, &layout)?;
    let unit_state = &jac * &unit_eta * jac.transpose();

    let removed = knowns.removed_rows();
    let kept: Vec<usize> = (0..unit_state.nrows())
        .filter(|i| !removed.contains(i))
        .collect();
    let reduced = unit_state.select_rows(&kept).select_columns(&kept);
    let (inv, condition_state) = invert_spd(&reduced);

    let pos = |state_row: usize| kept.iter().position(|&r| r == state_row);
    // Trace over whichever block rows remain; with known heights this is
    // the 2D position bound. `None` only when the whole block is known.
    let block_trace = |inv: &DMatrix<f64>, rows: [usize; 3]| -> Option<f64> {
        let mut acc = 0.0;
        let mut hits = 0;
        for r in rows {
            if let Some(i) = pos(r) {
                acc += inv[(i, i)];
                hits += 1;
            }
        }
        (hits > 0).then_some(acc)
    };

    let (peb_t, peb_r, ceb, blind) = match &inv {
        Some(inv) => {
            let peb_t = block_trace(inv, [0, 1, 2]).map(|t| (t.max(0.0) / scale).sqrt());
            let peb_r = block_trace(inv, [3, 4, 5])
                .map(|t| (t.max(0.0) / scale).sqrt())
                .unwrap_or(f64::INFINITY);
            let ceb = pos(6).map(|i| (inv[(i, i)].max(0.0) / scale).sqrt());
            (peb_t, peb_r, ceb, false)
        }
        None => (
            match knowns {
                Knowns::TxPosition => None,
                _ => Some(f64::INFINITY),
            },
            f64::INFINITY,
            match knowns {
                Knowns::ClockOffset => None,
                _ => Some(f64::INFINITY),
            },
            true,
        ),
    };

    let condition_eta = channel_bounds.condition;
    Ok(FimReport {
        fim_eta: unit_eta * scale,
        fim_state: unit_state * scale,
        channel_bounds,
        peb_t_m: peb_t,
        peb_r_m: peb_r,
        ceb_m: ceb,
        condition_eta,
        condition_state,
        blind,
    })
}

/// Rectangular sweep grid for PEB heatmaps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub step_m: f64,
    pub z_m: f64,
}

impl GridSpec {
    pub fn xs(&self) -> Vec<f64> {
        let n = ((self.x_max - self.x_min) / self.step_m).round() as usize + 1;
        (0..n).map(|i| self.x_min + i as f64 * self.step_m).collect()
    }

    pub fn ys(&self) -> Vec<f64> {
        let n = ((self.y_max - self.y_min) / self.step_m).round() as usize + 1;
        (0..n).map(|i| self.y_min + i as f64 * self.step_m).collect()
    }
}

/// RX position error bound over a grid of RX positions with the TX fixed.
/// Cells with singular information (or degenerate geometry) carry
/// `f64::INFINITY`. Returns `(xs, ys, row-major map)` with rows indexed by
/// `y` and columns by `x`.
pub fn peb_heatmap(
    scenario: &Scenario,
    codebook: &Codebook,
    delta: &DVector<f64>,
    grid: &GridSpec,
    knowns: Knowns,
) -> (Vec<f64>, Vec<f64>, DMatrix<f64>) {
    let xs = grid.xs();
    let ys = grid.ys();
    let cells: Vec<(usize, usize)> = (0..ys.len())
        .flat_map(|iy| (0..xs.len()).map(move |ix| (iy, ix)))
        .collect();
    let values: Vec<f64> = cells
        .par_iter()
        .map(|&(iy, ix)| {
            let mut s = scenario.clone();
            s.rx_position_m = [xs[ix], ys[iy], grid.z_m];
            if s.rx_position_m == s.tx_position_m {
                return f64::INFINITY;
            }
            match positioning_bounds(&s, codebook, delta, knowns) {
                Ok(report) => report.peb_r_m,
                Err(_) => f64::INFINITY,
            }
        })
        .collect();
    let mut map = DMatrix::zeros(ys.len(), xs.len());
    for (idx, &(iy, ix)) in cells.iter().enumerate() {
        map[(iy, ix)] = values[idx];
    }
    (xs, ys, map)
}

/// Scenario with the UE states replaced by a prior sample and scatterers
/// removed (profile design ignores multipath).
pub fn scenario_at_sample(
    scenario: &Scenario,
    sample: &crate::codebook::StateSample,
) -> Scenario {
    let mut s = scenario.clone();
    s.tx_position_m = [sample.tx.x, sample.tx.y, sample.tx.z];
    s.rx_position_m = [sample.rx.x, sample.rx.y, sample.rx.z];
    s.radio.clock_offset_m = sample.clock_offset_m;
    s.scatterers.clear();
    s.clusters.clear();
    s
}

/// Deterministic seed for a prior sample, derived from the sample content
/// so that reordering samples reorders (not changes) their contributions.
fn sample_seed(base: u64, sample: &crate::codebook::StateSample) -> u64 {
    let mut h = base ^ 0xcbf2_9ce4_8422_2325;
    let mut mix = |v: f64| {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for v in [
        sample.tx.x,
        sample.tx.y,
        sample.tx.z,
        sample.rx.x,
        sample.rx.y,
        sample.rx.z,
        sample.clock_offset_m,
    ] {
        mix(v);
    }
    h
}

/// Squared RX PEB at one prior sample, or `None` when the information is
/// singular there. Gain phases derive from the scenario seed and the sample
/// content.
pub fn sample_peb_squared(
    scenario: &Scenario,
    sample: &crate::codebook::StateSample,
    codebook: &Codebook,
    delta: &DVector<f64>,
) -> Option<f64> {
    let mut s = scenario_at_sample(scenario, sample);
    s.seed = sample_seed(scenario.seed, sample);
    let report = positioning_bounds(&s, codebook, delta, Knowns::None).ok()?;
    if report.blind || !report.peb_r_m.is_finite() {
        None
    } else {
        Some(report.peb_r_m * report.peb_r_m)
    }
}

/// Per-transmission state information matrices `S_g` at one prior sample:
/// the state FIM for a power vector `delta` is `sum_g delta_g^2 S_g`.
pub fn sample_state_matrices(
    scenario: &Scenario,
    sample: &crate::codebook::StateSample,
    codebook: &Codebook,
) -> Result<Vec<DMatrix<f64>>, CrbError> {
    let mut s = scenario_at_sample(scenario, sample);
    s.seed = sample_seed(scenario.seed, sample);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let paths = enumerate_paths(&s, &mut rng)?;
    let layout = ParamLayout::for_paths(&paths);
    let factors = fim_factors(&s, codebook, &paths, &layout);
    let jac = state_jacobian(&s, &paths, &layout)?;
    Ok(factors
        .per_transmission()
        .into_iter()
        .map(|o| &jac * o * jac.transpose())
        .collect())
}
