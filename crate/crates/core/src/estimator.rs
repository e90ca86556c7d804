//! Two-stage channel-parameter estimation: orthogonal path separation,
//! coarse delay / spatial-frequency search, and per-path maximum-likelihood
//! refinement with the complex gain eliminated in closed form.
//!
//! Every operation is pure; the per-path refinements run independently.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{delay_vector, ris_response, RxBlock};
use crate::codebook::Codebook;
use crate::geometry::SpatialFreq;
use crate::optim::{levenberg_marquardt, LmOptions};
use crate::scenario::{RadioConfig, RisAnchor, Scenario};
use crate::{C64, SPEED_OF_LIGHT};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("transmission count {g} is not divisible by the block count {gamma}")]
    Divisibility { g: usize, gamma: usize },
    #[error("channel: {0}")]
    Channel(#[from] crate::channel::ChannelError),
    #[error("codebook: {0}")]
    Codebook(#[from] crate::codebook::CodebookError),
}

/// Per-path observations after orthogonal combining: index 0 is the direct
/// path, indices `1..=L` the RIS paths. Each matrix is `K x G/Gamma` and
/// carries noise of variance `sigma^2 / Gamma`.
#[derive(Debug, Clone)]
pub struct SeparatedPaths {
    pub matrices: Vec<DMatrix<C64>>,
}

/// Linear path separation: per-block received signal combined with the
/// block coefficients, `(1/Gamma) sum_i b[i, l] Y_block_i`. Noise-free,
/// each output equals the path's base-block contribution exactly;
/// cross-talk vanishes by column orthogonality.
pub fn separate_paths(
    y: &RxBlock,
    block_matrix: &DMatrix<C64>,
) -> Result<SeparatedPaths, EstimatorError> {
    let gamma = block_matrix.nrows();
    let g = y.n_transmissions();
    if !g.is_multiple_of(gamma) {
        return Err(EstimatorError::Divisibility { g, gamma });
    }
    let base_len = g / gamma;
    let k = y.n_subcarriers();
    let mut matrices = Vec::with_capacity(block_matrix.ncols());
    for l in 0..block_matrix.ncols() {
        let mut m = DMatrix::zeros(k, base_len);
        for i in 0..gamma {
            let coeff = block_matrix[(i, l)] / gamma as f64;
            for gb in 0..base_len {
                let src = y.samples.column(i * base_len + gb);
                for kk in 0..k {
                    m[(kk, gb)] += coeff * src[kk];
                }
            }
        }
        matrices.push(m);
    }
    Ok(SeparatedPaths { matrices })
}

/// De-pilots a separated path matrix: entrywise multiplication with the
/// conjugate pilots.
fn depilot(path: &DMatrix<C64>, pilots: &DVector<C64>) -> DMatrix<C64> {
    let mut m = path.clone();
    for g in 0..m.ncols() {
        for k in 0..m.nrows() {
            m[(k, g)] *= pilots[k].conj();
        }
    }
    m
}

/// Squared correlation magnitudes over the `n_fft`-point delay grid
/// `tau_n = n / (n_fft delta_f)`, accumulated across columns.
fn delay_spectrum(h: &DMatrix<C64>, n_fft: usize) -> Vec<f64> {
    let k = h.nrows();
    assert!(n_fft > k, "delay grid must cover all subcarriers");
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_inverse(n_fft);
    let mut acc = vec![0.0f64; n_fft];
    let mut buf = vec![rustfft::num_complex::Complex::<f64>::default(); n_fft];
    for g in 0..h.ncols() {
        buf.iter_mut().for_each(|v| *v = Default::default());
        for kk in 0..k {
            // Subcarrier index runs 1..=K; bin k+1 holds row k so the
            // inverse transform evaluates sum_k h_k e^{+j 2 pi k n / n_fft}.
            let v = h[(kk, g)];
            buf[kk + 1] = rustfft::num_complex::Complex::new(v.re, v.im);
        }
        fft.process(&mut buf);
        for (a, v) in acc.iter_mut().zip(buf.iter()) {
            *a += v.norm_sqr();
        }
    }
    acc
}

fn grid_range_of_bin(bin: usize, n_fft: usize, radio: &RadioConfig) -> f64 {
    bin as f64 / (n_fft as f64 * radio.subcarrier_spacing_hz) * SPEED_OF_LIGHT
}

/// Coarse direct-path delay: sums the de-piloted observation across
/// transmissions and maximizes the delay-matched correlation on the grid.
/// Returns an equivalent range in meters.
pub fn coarse_delay_los(
    path: &DMatrix<C64>,
    pilots: &DVector<C64>,
    radio: &RadioConfig,
    n_fft: usize,
) -> f64 {
    let h = depilot(path, pilots);
    let summed = DMatrix::from_fn(h.nrows(), 1, |k, _| {
        (0..h.ncols()).map(|g| h[(k, g)]).sum::<C64>()
    });
    let spec = delay_spectrum(&summed, n_fft);
    let best = spec
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    grid_range_of_bin(best, n_fft, radio)
}

/// Coarse RIS-path delay: the profiles differ across transmissions, so the
/// correlation power is accumulated per column before the grid search.
pub fn coarse_delay_ris(
    path: &DMatrix<C64>,
    pilots: &DVector<C64>,
    radio: &RadioConfig,
    n_fft: usize,
) -> f64 {
    let h = depilot(path, pilots);
    let spec = delay_spectrum(&h, n_fft);
    let best = spec
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    grid_range_of_bin(best, n_fft, radio)
}

/// Search window for the spatial-frequency grid, clipped to the
/// unambiguous domain `[-1, 1)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SfWindow {
    pub xi: (f64, f64),
    pub zeta: (f64, f64),
}

impl SfWindow {
    /// Window of three prior standard deviations around nominal spatial
    /// frequencies, clipped to the unambiguous domain.
    pub fn around(sf: SpatialFreq, three_sigma: f64) -> Self {
        let clip = |lo: f64, hi: f64| (lo.max(-1.0), hi.min(1.0 - 1e-9));
        Self {
            xi: clip(sf.xi - three_sigma, sf.xi + three_sigma),
            zeta: clip(sf.zeta - three_sigma, sf.zeta + three_sigma),
        }
    }

    /// Maps a position prior (mean UE positions, isotropic sigma in meters)
    /// through the spatial-frequency geometry of one anchor: the window is
    /// three sigma wide under a first-order propagation of both UE
    /// perturbations, clipped to the unambiguous domain.
    pub fn from_position_prior(
        anchor: &RisAnchor,
        tx: &crate::geometry::Vec3,
        rx: &crate::geometry::Vec3,
        sigma_m: f64,
    ) -> Option<Self> {
        let p = anchor.position();
        let rot = anchor.rotation();
        let t_tx = crate::geometry::local_direction(tx, &p, &rot).ok()?;
        let t_rx = crate::geometry::local_direction(rx, &p, &rot).ok()?;
        let sf = SpatialFreq::new(t_tx.y + t_rx.y, t_tx.z + t_rx.z);
        // d t_local / d ue = R^T (I - u u^T) / d for each UE.
        let mut grad_xi = 0.0;
        let mut grad_zeta = 0.0;
        for ue in [tx, rx] {
            let diff = ue - p;
            let d = diff.norm();
            let u = diff / d;
            let proj = (nalgebra::Matrix3::identity() - u * u.transpose()) / d;
            let dt = rot.transpose() * proj;
            grad_xi += dt.row(1).norm();
            grad_zeta += dt.row(2).norm();
        }
        let three_sigma_xi = 3.0 * sigma_m * grad_xi;
        let three_sigma_zeta = 3.0 * sigma_m * grad_zeta;
        let clip = |lo: f64, hi: f64| (lo.max(-1.0), hi.min(1.0 - 1e-9));
        Some(Self {
            xi: clip(sf.xi - three_sigma_xi, sf.xi + three_sigma_xi),
            zeta: clip(sf.zeta - three_sigma_zeta, sf.zeta + three_sigma_zeta),
        })
    }

    fn full() -> Self {
        Self {
            xi: (-1.0, 1.0 - 1e-9),
            zeta: (-1.0, 1.0 - 1e-9),
        }
    }
}

/// Coarse spatial-frequency estimate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SfEstimate {
    pub xi: f64,
    pub zeta: f64,
    /// Set when no prior window restricted the search: the estimate is only
    /// known modulo the period-2 aliasing of a half-wavelength array, so
    /// true frequencies outside `[-1, 1)` fold back into the domain.
    pub ambiguous: bool,
}

/// 2D grid maximization of the matched-filter magnitude
/// `|sum_{k,g} omega_g^T a_R(xi, zeta) d_k(tau) x_k conj(y_kg)|`.
///
/// The transmission sum collapses into one profile-weighted vector, so each
/// candidate costs a single length-`N` inner product.
#[allow(clippy::too_many_arguments)]
pub fn coarse_spatial_freq(
    path: &DMatrix<C64>,
    anchor: &RisAnchor,
    base_profiles: &DMatrix<C64>,
    pilots: &DVector<C64>,
    radio: &RadioConfig,
    range_m: f64,
    step: f64,
    window: Option<SfWindow>,
) -> SfEstimate {
    let ambiguous = window.is_none();
    let win = window.unwrap_or_else(SfWindow::full);
    let d = delay_vector(range_m, radio);
    let g_count = path.ncols();

    // s_g = sum_k d_k x_k conj(y_kg); the candidate metric is then
    // |(sum_g s_g omega_g)^T a_R|.
    let n = base_profiles.nrows();
    let mut weighted = DVector::<C64>::zeros(n);
    for g in 0..g_count {
        let mut s = C64::new(0.0, 0.0);
        for k in 0..path.nrows() {
            s += d[k] * pilots[k] * path[(k, g)].conj();
        }
        for e in 0..n {
            weighted[e] += s * base_profiles[(e, g)];
        }
    }

    let axis = |lo: f64, hi: f64| -> Vec<f64> {
        let count = ((hi - lo) / step).floor() as usize + 1;
        (0..count).map(|i| lo + i as f64 * step).collect()
    };
    let xis = axis(win.xi.0, win.xi.1);
    let zetas = axis(win.zeta.0, win.zeta.1);

    let mut best = (f64::MIN, win.xi.0, win.zeta.0);
    for &zeta in &zetas {
        for &xi in &xis {
            let a = ris_response(anchor, &SpatialFreq::new(xi, zeta), radio.carrier_freq_hz);
            let metric: C64 = weighted.iter().zip(a.iter()).map(|(w, x)| w * x).sum();
            let m = metric.norm_sqr();
            if m > best.0 {
                best = (m, xi, zeta);
            }
        }
    }
    SfEstimate {
        xi: best.1,
        zeta: best.2,
        ambiguous,
    }
}

/// Nuisance-free parameters of one path.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PathParams {
    /// Equivalent range `c tau`, meters.
    pub range_m: f64,
    /// Spatial frequencies, present for RIS paths.
    pub spatial_freq: Option<SpatialFreq>,
}

/// Refined per-path estimate with diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathEstimate {
    pub coarse: PathParams,
    pub refined: PathParams,
    /// Estimated gain as `(amplitude, phase)` with `rho = a e^{-j beta}`.
    pub gain: (f64, f64),
    pub coarse_residual: f64,
    pub refined_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Spatial-frequency ambiguity flag propagated from the coarse search.
    pub ambiguous: bool,
}

/// Model of one separated path over the base block for candidate
/// parameters; the complex gain is applied separately.
fn path_model(
    params: &PathParams,
    anchor: Option<&RisAnchor>,
    base_profiles: Option<&DMatrix<C64>>,
    pilots: &DVector<C64>,
    base_delta: &DVector<f64>,
    radio: &RadioConfig,
) -> DMatrix<C64> {
    let k_count = radio.n_subcarriers;
    let g_count = base_delta.len();
    let d = delay_vector(params.range_m, radio);
    let sqrt_p = radio.power_watts().sqrt();
    let gains: DVector<C64> = match (params.spatial_freq, anchor, base_profiles) {
        (Some(sf), Some(anchor), Some(profiles)) => {
            let a = ris_response(anchor, &sf, radio.carrier_freq_hz);
            DVector::from_iterator(g_count, (0..g_count).map(|g| profiles.column(g).dot(&a)))
        }
        _ => DVector::from_element(g_count, C64::new(1.0, 0.0)),
    };
    DMatrix::from_fn(k_count, g_count, |k, g| {
        d[k] * pilots[k] * gains[g] * sqrt_p * base_delta[g]
    })
}

/// Residual norm of the concentrated least squares at given parameters: the
/// gain minimizing `||y - rho mu||` is `rho = mu^H y / ||mu||^2`.
fn concentrated_residual(observation: &DMatrix<C64>, model: &DMatrix<C64>) -> (f64, C64) {
    let mut inner = C64::new(0.0, 0.0);
    let mut norm2 = 0.0;
    for (y, m) in observation.iter().zip(model.iter()) {
        inner += m.conj() * y;
        norm2 += m.norm_sqr();
    }
    let rho = if norm2 > 0.0 {
        inner / norm2
    } else {
        C64::new(0.0, 0.0)
    };
    let mut res = 0.0;
    for (y, m) in observation.iter().zip(model.iter()) {
        res += (y - rho * m).norm_sqr();
    }
    (res.sqrt(), rho)
}

/// Maximum-likelihood refinement of one path's nuisance-free parameters by
/// damped least squares on the gain-concentrated residual.
///
/// Terminates when the accepted step falls below `1e-10` or after 100
/// iterations; the residual never exceeds the coarse one.
pub fn refine_channel_mle(
    observation: &DMatrix<C64>,
    coarse: &PathParams,
    anchor: Option<&RisAnchor>,
    base_profiles: Option<&DMatrix<C64>>,
    pilots: &DVector<C64>,
    base_delta: &DVector<f64>,
    radio: &RadioConfig,
) -> PathEstimate {
    let is_ris = coarse.spatial_freq.is_some();
    let dim = if is_ris { 3 } else { 1 };
    let pack = |p: &PathParams| -> DVector<f64> {
        if is_ris {
            let sf = p.spatial_freq.unwrap();
            DVector::from_vec(vec![p.range_m, sf.xi, sf.zeta])
        } else {
            DVector::from_vec(vec![p.range_m])
        }
    };
    let unpack = |x: &DVector<f64>| -> PathParams {
        PathParams {
            range_m: x[0],
            spatial_freq: if is_ris {
                Some(SpatialFreq::new(x[1], x[2]))
            } else {
                None
            },
        }
    };

    let residual_vec = |x: &DVector<f64>| -> DVector<f64> {
        let params = unpack(x);
        let model = path_model(&params, anchor, base_profiles, pilots, base_delta, radio);
        let (_, rho) = concentrated_residual(observation, &model);
        let len = observation.len();
        let mut r = DVector::zeros(2 * len);
        for (i, (y, m)) in observation.iter().zip(model.iter()).enumerate() {
            let e = y - rho * m;
            r[2 * i] = e.re;
            r[2 * i + 1] = e.im;
        }
        r
    };
    // Central-difference Jacobian of the concentrated residual; at most
    // three columns.
    let jacobian = |x: &DVector<f64>| -> DMatrix<f64> {
        let len = 2 * observation.len();
        let mut j = DMatrix::zeros(len, dim);
        for a in 0..dim {
            let h = 1e-6 * x[a].abs().max(1e-3);
            let mut xp = x.clone();
            xp[a] += h;
            let mut xm = x.clone();
            xm[a] -= h;
            let col = (residual_vec(&xp) - residual_vec(&xm)) / (2.0 * h);
            j.set_column(a, &col);
        }
        j
    };

    let x0 = pack(coarse);
    let coarse_residual = residual_vec(&x0).norm();
    let result = levenberg_marquardt(
        x0,
        residual_vec,
        jacobian,
        LmOptions {
            max_iterations: 100,
            step_tol: 1e-10,
        },
    );
    let refined = unpack(&result.params);
    let model = path_model(&refined, anchor, base_profiles, pilots, base_delta, radio);
    let (refined_residual, rho) = concentrated_residual(observation, &model);
    let diverged = !refined_residual.is_finite() || refined_residual > coarse_residual + 1e-12;
    let (refined, refined_residual, rho) = if diverged {
        let model = path_model(coarse, anchor, base_profiles, pilots, base_delta, radio);
        let (res, rho) = concentrated_residual(observation, &model);
        (*coarse, res, rho)
    } else {
        (refined, refined_residual, rho)
    };
    let beta = {
        let b = -rho.arg();
        if b < 0.0 {
            b + std::f64::consts::TAU
        } else {
            b
        }
    };
    PathEstimate {
        coarse: *coarse,
        refined,
        gain: (rho.norm(), beta),
        coarse_residual,
        refined_residual,
        iterations: result.iterations,
        converged: result.converged && !diverged,
        ambiguous: false,
    }
}

/// Tuning knobs of the two-stage channel estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorOptions {
    /// Delay-grid size (must exceed `K`).
    pub n_fft: usize,
    /// Spatial-frequency grid step.
    pub sf_step: f64,
    /// Optional per-RIS prior windows for the 2D search.
    pub sf_windows: Option<Vec<SfWindow>>,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            sf_step: 0.02,
            sf_windows: None,
        }
    }
}

/// Nuisance-free channel estimate for the whole scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelEstimate {
    /// Direct-path equivalent range, absent for blocked scenarios.
    pub los_range_m: Option<f64>,
    /// Per-RIS parameters.
    pub ris: Vec<PathParams>,
}

impl ChannelEstimate {
    /// Stacks the estimate as `[r0?, xi_1, zeta_1, r_1, xi_2, ...]`,
    /// matching the primary-parameter layout of the bound engine with gains
    /// skipped.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = Vec::new();
        if let Some(r0) = self.los_range_m {
            v.push(r0);
        }
        for p in &self.ris {
            let sf = p.spatial_freq.unwrap_or(SpatialFreq::new(0.0, 0.0));
            v.push(sf.xi);
            v.push(sf.zeta);
            v.push(p.range_m);
        }
        DVector::from_vec(v)
    }
}

/// Per-trial diagnostics of the channel-estimation stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateDiag {
    /// Direct path first (when present), then one entry per RIS.
    pub paths: Vec<PathEstimate>,
}

/// Runs the full channel-parameter estimation stage: separation, coarse
/// search, and per-path refinement (RIS paths in parallel).
pub fn estimate_channel(
    scenario: &Scenario,
    codebook: &Codebook,
    delta: &DVector<f64>,
    y: &RxBlock,
    opts: &EstimatorOptions,
) -> Result<(ChannelEstimate, EstimateDiag), EstimatorError> {
    let radio = &scenario.radio;
    let l = scenario.n_ris();
    let block = crate::codebook::orthogonal_block_matrix(codebook.block_count, l)?;
    let separated = separate_paths(y, &block)?;
    let pilots = crate::channel::unit_pilots(radio);
    let base_len = codebook.base_len;
    let base_delta = DVector::from_fn(base_len, |g, _| delta[g]);

    let mut diag_paths = Vec::new();
    let mut los_range = None;
    if !scenario.los_blocked {
        let obs = &separated.matrices[0];
        let coarse = PathParams {
            range_m: coarse_delay_los(obs, &pilots, radio, opts.n_fft),
            spatial_freq: None,
        };
        let est = refine_channel_mle(obs, &coarse, None, None, &pilots, &base_delta, radio);
        los_range = Some(est.refined.range_m);
        diag_paths.push(est);
    }

    let ris_estimates: Vec<PathEstimate> = (0..l)
        .into_par_iter()
        .map(|idx| {
            let obs = &separated.matrices[idx + 1];
            let anchor = &scenario.anchors[idx];
            let base_profiles = codebook.profiles[idx].columns(0, base_len).into_owned();
            let range = coarse_delay_ris(obs, &pilots, radio, opts.n_fft);
            let window = opts.sf_windows.as_ref().map(|w| w[idx]);
            let sf = coarse_spatial_freq(
                obs,
                anchor,
                &base_profiles,
                &pilots,
                radio,
                range,
                opts.sf_step,
                window,
            );
            let coarse = PathParams {
                range_m: range,
                spatial_freq: Some(SpatialFreq::new(sf.xi, sf.zeta)),
            };
            let mut est = refine_channel_mle(
                obs,
                &coarse,
                Some(anchor),
                Some(&base_profiles),
                &pilots,
                &base_delta,
                radio,
            );
            est.ambiguous = sf.ambiguous;
            est
        })
        .collect();

    let ris: Vec<PathParams> = ris_estimates.iter().map(|e| e.refined).collect();
    diag_paths.extend(ris_estimates);
    Ok((
        ChannelEstimate {
            los_range_m: los_range,
            ris,
        },
        EstimateDiag { paths: diag_paths },
    ))
}

/// Coarse-only variant of [`estimate_channel`], for saturation studies.
/// The coarse stage never de-weights transmissions, so no power vector is
/// taken.
pub fn estimate_channel_coarse(
    scenario: &Scenario,
    codebook: &Codebook,
    y: &RxBlock,
    opts: &EstimatorOptions,
) -> Result<ChannelEstimate, EstimatorError> {
    let radio = &scenario.radio;
    let l = scenario.n_ris();
    let block = crate::codebook::orthogonal_block_matrix(codebook.block_count, l)?;
    let separated = separate_paths(y, &block)?;
    let pilots = crate::channel::unit_pilots(radio);
    let base_len = codebook.base_len;

    let los_range = if scenario.los_blocked {
        None
    } else {
        Some(coarse_delay_los(
            &separated.matrices[0],
            &pilots,
            radio,
            opts.n_fft,
        ))
    };
    let ris = (0..l)
        .map(|idx| {
            let obs = &separated.matrices[idx + 1];
            let base_profiles = codebook.profiles[idx].columns(0, base_len).into_owned();
            let range = coarse_delay_ris(obs, &pilots, radio, opts.n_fft);
            let window = opts.sf_windows.as_ref().map(|w| w[idx]);
            let sf = coarse_spatial_freq(
                obs,
                &scenario.anchors[idx],
                &base_profiles,
                &pilots,
                radio,
                range,
                opts.sf_step,
                window,
            );
            PathParams {
                range_m: range,
                spatial_freq: Some(SpatialFreq::new(sf.xi, sf.zeta)),
            }
        })
        .collect();
    Ok(ChannelEstimate {
        los_range_m: los_range,
        ris,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{enumerate_paths, synthesize_from_paths, unit_pilots};
    use crate::codebook::{orthogonal_block_matrix, random_codebook_expanded};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scenario_small() -> Scenario {
        let mut s = Scenario::default_two_ris();
        s.radio.n_subcarriers = 64;
        s.radio.n_transmissions = 24;
        s
    }

    #[test]
    fn separation_recovers_each_path_exactly() {
        let s = scenario_small();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cb = random_codebook_expanded(&s, 3, &mut rng).unwrap();
        let delta = DVector::from_element(24, 1.0);
        let pilots = unit_pilots(&s.radio);
        let paths = enumerate_paths(&s, &mut rng).unwrap();
        let y = synthesize_from_paths(&s, &cb, &delta, &paths, &pilots, &mut rng, false).unwrap();
        let block = orthogonal_block_matrix(3, 2).unwrap();
        let sep = separate_paths(&y, &block).unwrap();

        for (idx, path) in paths.iter().enumerate() {
            let alone = synthesize_from_paths(
                &s,
                &cb,
                &delta,
                std::slice::from_ref(path),
                &pilots,
                &mut rng,
                false,
            )
            .unwrap();
            let base = alone.samples.columns(0, 8).into_owned();
            let err = (&sep.matrices[idx] - &base).norm();
            assert!(
                err / base.norm() < 1e-10,
                "path {idx} separation error {err:e}"
            );
        }
    }

    #[test]
    fn separation_cross_talk_is_zero() {
        let s = scenario_small();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let cb = random_codebook_expanded(&s, 3, &mut rng).unwrap();
        let delta = DVector::from_element(24, 1.0);
        let pilots = unit_pilots(&s.radio);
        let paths = enumerate_paths(&s, &mut rng).unwrap();
        // Direct-path-only signal: the RIS outputs vanish and the direct
        // output reproduces the base block.
        let y = synthesize_from_paths(&s, &cb, &delta, &paths[0..1], &pilots, &mut rng, false)
            .unwrap();
        let block = orthogonal_block_matrix(3, 2).unwrap();
        let sep = separate_paths(&y, &block).unwrap();
        let scale = y.samples.norm();
        assert!(sep.matrices[1].norm() / scale < 1e-13);
        assert!(sep.matrices[2].norm() / scale < 1e-13);
        let base = y.samples.columns(0, 8).into_owned();
        assert!((&sep.matrices[0] - &base).norm() / scale < 1e-13);
    }

    #[test]
    fn coarse_delay_recovers_on_grid_truth() {
        let mut s = scenario_small();
        let n_fft = 512;
        // Put the direct-path range exactly on a grid cell.
        let cell = SPEED_OF_LIGHT / (n_fft as f64 * s.radio.subcarrier_spacing_hz);
        let d0 = (s.tx() - s.rx()).norm();
        s.radio.clock_offset_m = 3.0 * cell - d0;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cb = random_codebook_expanded(&s, 3, &mut rng).unwrap();
        let delta = DVector::from_element(24, 1.0);
        let pilots = unit_pilots(&s.radio);
        let paths = enumerate_paths(&s, &mut rng).unwrap();
        let y = synthesize_from_paths(&s, &cb, &delta, &paths[0..1], &pilots, &mut rng, false)
            .unwrap();
        let block = orthogonal_block_matrix(3, 2).unwrap();
        let sep = separate_paths(&y, &block).unwrap();
        let r = coarse_delay_los(&sep.matrices[0], &pilots, &s.radio, n_fft);
        assert_relative_eq!(r, 3.0 * cell, epsilon = 1e-9);
    }

    #[test]
    fn coarse_delay_error_is_bounded_by_half_cell() {
        let s = scenario_small();
        let n_fft = 1024;
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let cb = random_codebook_expanded(&s, 3, &mut rng).unwrap();
        let delta = DVector::from_element(24, 1.0);
        let pilots = unit_pilots(&s.radio);
        let paths = enumerate_paths(&s, &mut rng).unwrap();
        let y = synthesize_from_paths(&s, &cb, &delta, &paths, &pilots, &mut rng, false).unwrap();
        let block = orthogonal_block_matrix(3, 2).unwrap();
        let sep = separate_paths(&y, &block).unwrap();
        let cell = SPEED_OF_LIGHT / (n_fft as f64 * s.radio.subcarrier_spacing_hz);
        let r0 = coarse_delay_los(&sep.matrices[0], &pilots, &s.radio, n_fft);
        assert!((r0 - paths[0].delay.range_m).abs() <= cell / 2.0 + 1e-9);
        for l in 0..2 {
            let r = coarse_delay_ris(&sep.matrices[l + 1], &pilots, &s.radio, n_fft);
            assert!((r - paths[l + 1].delay.range_m).abs() <= cell / 2.0 + 1e-9);
        }
    }

    #[test]
    fn coarse_spatial_freq_lands_near_truth() {
        // With finitely many random profiles the matched-filter peak carries
        // a small realization bias on top of the grid quantization, so the
        // coarse stage is only expected within a couple of grid steps; the
        // refinement closes the gap.
        let mut s = Scenario::default_two_ris();
        s.radio.n_subcarriers = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let cb = random_codebook_expanded(&s, 3, &mut rng).unwrap();
        let delta = DVector::from_element(192, 1.0);
        let pilots = unit_pilots(&s.radio);
        let paths = enumerate_paths(&s, &mut rng).unwrap();
        let y = synthesize_from_paths(&s, &cb, &delta, &paths, &pilots, &mut rng, false).unwrap();
        let block = orthogonal_block_matrix(3, 2).unwrap();
        let sep = separate_paths(&y, &block).unwrap();
        for l in 0..2 {
            let truth = paths[l + 1].spatial_freq.unwrap();
            let base = cb.profiles[l].columns(0, 64).into_owned();
            let est = coarse_spatial_freq(
                &sep.matrices[l + 1],
                &s.anchors[l],
                &base,
                &pilots,
                &s.radio,
                paths[l + 1].delay.range_m,
                0.02,
                None,
            );
            assert!(est.ambiguous);
            assert!(
                (est.xi - truth.xi).abs() <= 0.045,
                "xi {} vs {}",
                est.xi,
                truth.xi
            );
            assert!(
                (est.zeta - truth.zeta).abs() <= 0.045,
                "zeta {} vs {}",
                est.zeta,
                truth.zeta
            );
        }
    }

    #[test]
    fn coarse_spatial_freq_exact_for_matched_profiles() {
        // With a conjugate-matched profile repeated over the block the peak
        // has no realization bias: on-grid truth is recovered exactly.
        let s = scenario_small();
        let anchor = &s.anchors[0];
        let radio = &s.radio;
        let pilots = unit_pilots(radio);
        let truth = SpatialFreq::new(-0.38, -0.7);
        let a = ris_response(anchor, &truth, radio.carrier_freq_hz);
        let base = DMatrix::from_fn(a.len(), 8, |n, _| a[n].conj());
        let d = delay_vector(14.0, radio);
        let obs = DMatrix::from_fn(radio.n_subcarriers, 8, |k, g| {
            d[k] * base.column(g).dot(&a) * C64::new(3e-7, 1e-7)
        });
        let est = coarse_spatial_freq(&obs, anchor, &base, &pilots, radio, 14.0, 0.02, None);
        assert_relative_eq!(est.xi, -0.38, epsilon = 1e-9);
        assert_relative_eq!(est.zeta, -0.7, epsilon = 1e-9);
    }

    #[test]
    fn prior_window_contains_truth_and_speeds_search() {
        let s = Scenario::default_two_ris();
        let anchor = &s.anchors[0];
        let win =
            SfWindow::from_position_prior(anchor, &s.tx(), &s.rx(), 0.1).unwrap();
        let truth = crate::locator::exact_channel_estimate(&s).unwrap().ris[0]
            .spatial_freq
            .unwrap();
        assert!(win.xi.0 <= truth.xi && truth.xi <= win.xi.1);
        assert!(win.zeta.0 <= truth.zeta && truth.zeta <= win.zeta.1);
        // Tighter than the full domain for a 10 cm prior.
        assert!(win.xi.1 - win.xi.0 < 0.6);
        assert!(win.zeta.1 - win.zeta.0 < 0.6);
        // And perturbed UEs within the prior stay inside the window.
        let t2 = s.tx() + crate::geometry::Vec3::new(0.05, -0.05, 0.05);
        let r2 = s.rx() + crate::geometry::Vec3::new(-0.05, 0.05, -0.05);
        let p = anchor.position();
        let rot = anchor.rotation();
        let tt = crate::geometry::local_direction(&t2, &p, &rot).unwrap();
        let tr = crate::geometry::local_direction(&r2, &p, &rot).unwrap();
        let sf2 = SpatialFreq::new(tt.y + tr.y, tt.z + tr.z);
        assert!(win.xi.0 <= sf2.xi && sf2.xi <= win.xi.1);
        assert!(win.zeta.0 <= sf2.zeta && sf2.zeta <= win.zeta.1);
    }

    #[test]
    fn out_of_domain_truth_folds_back() {
        // A path with xi = -1.2 aliases to 0.8 on a half-wavelength grid:
        // the unwindowed search reports the folded value and flags the
        // ambiguity.
        let s = scenario_small();
        let anchor = &s.anchors[0];
        let radio = &s.radio;
        let pilots = unit_pilots(radio);
        let truth = SpatialFreq::new(-1.2, 0.3);
        let a = ris_response(anchor, &truth, radio.carrier_freq_hz);
        let base = DMatrix::from_fn(a.len(), 8, |n, _| a[n].conj());
        let d = delay_vector(12.0, radio);
        let obs = DMatrix::from_fn(radio.n_subcarriers, 8, |k, g| {
            d[k] * base.column(g).dot(&a) * C64::new(1e-6, 0.0)
        });
        let est = coarse_spatial_freq(&obs, anchor, &base, &pilots, radio, 12.0, 0.02, None);
        assert!(est.ambiguous);
        assert!((est.xi - 0.8).abs() <= 1e-9, "aliased xi {}", est.xi);
        assert!((est.zeta - 0.3).abs() <= 1e-9);
    }

    #[test]
    fn refinement_reaches_truth_noise_free() {
        // Full transmission count: the coarse search needs enough profiles
        // for its peak to stay within the refinement basin.
        let mut s = Scenario::default_two_ris();
        s.radio.n_subcarriers = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let cb = random_codebook_expanded(&s, 3, &mut rng).unwrap();
        let delta = DVector::from_element(192, 1.0);
        let paths = enumerate_paths(&s, &mut ChaCha8Rng::seed_from_u64(s.seed)).unwrap();
        let y = synthesize_from_paths(
            &s,
            &cb,
            &delta,
            &paths,
            &unit_pilots(&s.radio),
            &mut rng,
            false,
        )
        .unwrap();
        let (est, diag) =
            estimate_channel(&s, &cb, &delta, &y, &EstimatorOptions::default()).unwrap();
        assert!((est.los_range_m.unwrap() - paths[0].delay.range_m).abs() < 3e-3);
        for l in 0..2 {
            let truth = &paths[l + 1];
            let got = &est.ris[l];
            assert!((got.range_m - truth.delay.range_m).abs() < 3e-3);
            let sf = got.spatial_freq.unwrap();
            assert!((sf.xi - truth.spatial_freq.unwrap().xi).abs() < 1e-8);
            assert!((sf.zeta - truth.spatial_freq.unwrap().zeta).abs() < 1e-8);
        }
        for p in &diag.paths {
            assert!(p.refined_residual <= p.coarse_residual + 1e-12);
            // Noise-free the residual collapses to numerical zero.
            assert!(p.refined_residual < 1e-8 * p.coarse_residual.max(1e-300));
        }
    }

    #[test]
    fn concentrated_gain_identity_holds_at_optimum() {
        let s = scenario_small();
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let cb = random_codebook_expanded(&s, 3, &mut rng).unwrap();
        let delta = DVector::from_element(24, 1.0);
        let pilots = unit_pilots(&s.radio);
        let paths = enumerate_paths(&s, &mut rng).unwrap();
        let y = synthesize_from_paths(&s, &cb, &delta, &paths, &pilots, &mut rng, true).unwrap();
        let block = orthogonal_block_matrix(3, 2).unwrap();
        let sep = separate_paths(&y, &block).unwrap();
        let base = cb.profiles[0].columns(0, 8).into_owned();
        let base_delta = DVector::from_element(8, 1.0);
        let coarse = PathParams {
            range_m: paths[1].delay.range_m,
            spatial_freq: paths[1].spatial_freq,
        };
        let est = refine_channel_mle(
            &sep.matrices[1],
            &coarse,
            Some(&s.anchors[0]),
            Some(&base),
            &pilots,
            &base_delta,
            &s.radio,
        );
        // residual^2 = ||y||^2 - |mu^H y|^2 / ||mu||^2 at the optimum.
        let model = path_model(
            &est.refined,
            Some(&s.anchors[0]),
            Some(&base),
            &pilots,
            &base_delta,
            &s.radio,
        );
        let obs = &sep.matrices[1];
        let y2: f64 = obs.iter().map(|v| v.norm_sqr()).sum();
        let mut inner = C64::new(0.0, 0.0);
        let mut m2 = 0.0;
        for (yv, mv) in obs.iter().zip(model.iter()) {
            inner += mv.conj() * yv;
            m2 += mv.norm_sqr();
        }
        let expected = (y2 - inner.norm_sqr() / m2).sqrt();
        assert_relative_eq!(est.refined_residual, expected, max_relative = 1e-9);
    }
}
