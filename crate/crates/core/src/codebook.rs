//! RIS phase-profile construction: time-orthogonal expansion, random /
//! directional / directional+derivative codebooks, and power control.
//!
//! Profiles are designed per block of `base_len = G / block_count`
//! transmissions and replicated to the remaining blocks with conjugated
//! orthogonal code coefficients, which lets the receiver separate the
//! direct path and every RIS path by linear combining.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::ris_response;
use crate::geometry::{local_direction, SpatialFreq, Vec3};
use crate::scenario::{element_positions, RisAnchor, Scenario};
use crate::{C64, SPEED_OF_LIGHT};

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("block count {gamma} must be at least L + 1 = {min}")]
    TooFewBlocks { gamma: usize, min: usize },
    #[error("transmission count {g} is not divisible by {div}")]
    Divisibility { g: usize, div: usize },
    #[error("prior covariance is not positive semidefinite (min eigenvalue {0:.3e})")]
    PriorNotPsd(f64),
    #[error("power coefficient must be nonnegative (got {0})")]
    NegativeGamma(f64),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed codebook file: {0}")]
    Malformed(String),
}

/// Role of one base-block transmission slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamSlot {
    /// Energy-maximizing directional beam (also used for random profiles).
    Dir,
    /// Derivative beam along the xi spatial frequency.
    DerXi,
    /// Derivative beam along the zeta spatial frequency.
    DerZeta,
}

/// Codebook family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookKind {
    Random,
    Dir,
    DirDer,
}

/// Per-RIS phase-profile sequence over all `G` transmissions.
#[derive(Debug, Clone)]
pub struct Codebook {
    /// One `N x G` unit-modulus matrix per RIS.
    pub profiles: Vec<DMatrix<C64>>,
    /// Number of orthogonal blocks.
    pub block_count: usize,
    /// Transmissions per block.
    pub base_len: usize,
    /// Role of each base-block slot (shared by all RISs).
    pub slots: Vec<BeamSlot>,
}

impl Codebook {
    /// Trivial single-block all-ones codebook; useful for tests and for
    /// scenarios that exercise synthesis only.
    pub fn all_ones(scenario: &Scenario) -> Codebook {
        let g = scenario.radio.n_transmissions;
        Codebook {
            profiles: scenario
                .anchors
                .iter()
                .map(|a| DMatrix::from_element(a.n_elements(), g, C64::new(1.0, 0.0)))
                .collect(),
            block_count: 1,
            base_len: g,
            slots: vec![BeamSlot::Dir; g],
        }
    }

    pub fn n_transmissions(&self) -> usize {
        self.block_count * self.base_len
    }

    /// Slot role of an absolute transmission index.
    pub fn slot_of(&self, g: usize) -> BeamSlot {
        self.slots[g % self.base_len]
    }
}

/// Mean and covariance of the seven state unknowns
/// `(tx, rx, clock offset)` used to design prior-informed codebooks.
#[derive(Debug, Clone)]
pub struct PriorState {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// One state draw from the prior.
#[derive(Debug, Clone, Copy)]
pub struct StateSample {
    pub tx: Vec3,
    pub rx: Vec3,
    pub clock_offset_m: f64,
}

impl PriorState {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Self {
        assert_eq!(mean.len(), 7);
        assert_eq!(covariance.shape(), (7, 7));
        Self { mean, covariance }
    }

    /// Isotropic prior centered on the scenario's true state.
    pub fn isotropic(scenario: &Scenario, sigma: f64) -> Self {
        let mut mean = DVector::zeros(7);
        mean.fixed_rows_mut::<3>(0).copy_from(&scenario.tx());
        mean.fixed_rows_mut::<3>(3).copy_from(&scenario.rx());
        mean[6] = scenario.radio.clock_offset_m;
        Self {
            mean,
            covariance: DMatrix::identity(7, 7) * sigma * sigma,
        }
    }

    /// Square root of the covariance via symmetric eigendecomposition;
    /// tolerates semidefinite matrices, rejects indefinite ones.
    fn sqrt_factor(&self) -> Result<DMatrix<f64>, CodebookError> {
        let eig = self.covariance.clone().symmetric_eigen();
        let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
        if min < -1e-9 * max.max(1.0) {
            return Err(CodebookError::PriorNotPsd(min));
        }
        let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
        Ok(&eig.eigenvectors * sqrt)
    }

    /// Draws `count` state samples.
    pub fn sample<R: Rng>(
        &self,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<StateSample>, CodebookError> {
        use rand_distr::{Distribution, StandardNormal};
        let l = self.sqrt_factor()?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let z = DVector::from_iterator(7, (0..7).map(|_| {
                let x: f64 = StandardNormal.sample(rng);
                x
            }));
            let s = &self.mean + &l * z;
            out.push(StateSample {
                tx: Vec3::new(s[0], s[1], s[2]),
                rx: Vec3::new(s[3], s[4], s[5]),
                clock_offset_m: s[6],
            });
        }
        Ok(out)
    }
}

/// Orthogonal block matrix: the first `L + 1` columns of the `gamma`-point
/// DFT matrix. Column 0 is all-ones, so the unmodulated direct path aligns
/// with it, and `B^H B = gamma * I`.
pub fn orthogonal_block_matrix(gamma: usize, n_ris: usize) -> Result<DMatrix<C64>, CodebookError> {
    if gamma < n_ris + 1 {
        return Err(CodebookError::TooFewBlocks {
            gamma,
            min: n_ris + 1,
        });
    }
    Ok(DMatrix::from_fn(gamma, n_ris + 1, |i, j| {
        C64::from_polar(1.0, -TAU * (i * j) as f64 / gamma as f64)
    }))
}

/// Expands per-RIS base profiles (`N x base_len`) to all `G` transmissions:
/// block `i` of RIS `l` is the base scaled by `conj(B[i, l + 1])`.
pub fn expand_orthogonal(
    base: Vec<DMatrix<C64>>,
    slots: Vec<BeamSlot>,
    block_matrix: &DMatrix<C64>,
) -> Result<Codebook, CodebookError> {
    let gamma = block_matrix.nrows();
    let base_len = base.first().map_or(0, |m| m.ncols());
    assert_eq!(slots.len(), base_len, "one slot role per base column");
    let mut profiles = Vec::with_capacity(base.len());
    for (l, b) in base.iter().enumerate() {
        let n = b.nrows();
        let mut full = DMatrix::zeros(n, gamma * base_len);
        for i in 0..gamma {
            let coeff = block_matrix[(i, l + 1)].conj();
            for g in 0..base_len {
                for r in 0..n {
                    full[(r, i * base_len + g)] = coeff * b[(r, g)];
                }
            }
        }
        profiles.push(full);
    }
    Ok(Codebook {
        profiles,
        block_count: gamma,
        base_len,
        slots,
    })
}

/// Unit-modulus random base profiles for one anchor.
pub fn random_codebook<R: Rng>(
    anchor: &RisAnchor,
    base_len: usize,
    rng: &mut R,
) -> DMatrix<C64> {
    DMatrix::from_fn(anchor.n_elements(), base_len, |_, _| {
        C64::from_polar(1.0, rng.random_range(0.0..TAU))
    })
}

/// Fully expanded random codebook with the given block count.
pub fn random_codebook_expanded<R: Rng>(
    scenario: &Scenario,
    block_count: usize,
    rng: &mut R,
) -> Result<Codebook, CodebookError> {
    let g = scenario.radio.n_transmissions;
    if !g.is_multiple_of(block_count) {
        return Err(CodebookError::Divisibility {
            g,
            div: block_count,
        });
    }
    let base_len = g / block_count;
    let b = orthogonal_block_matrix(block_count, scenario.n_ris())?;
    let base: Vec<_> = scenario
        .anchors
        .iter()
        .map(|a| random_codebook(a, base_len, rng))
        .collect();
    expand_orthogonal(base, vec![BeamSlot::Dir; base_len], &b)
}

/// Directional beam of one anchor toward a TX/RX pair: the conjugate of the
/// combined steering response, which maximizes the received energy.
pub fn dir_beam(
    anchor: &RisAnchor,
    carrier_freq_hz: f64,
    tx: &Vec3,
    rx: &Vec3,
) -> Result<DVector<C64>, CodebookError> {
    let rot = anchor.rotation();
    let p = anchor.position();
    let t_tx = local_direction(tx, &p, &rot)
        .map_err(|e| CodebookError::Degenerate(e.to_string()))?;
    let t_rx = local_direction(rx, &p, &rot)
        .map_err(|e| CodebookError::Degenerate(e.to_string()))?;
    let sf = SpatialFreq::new(t_tx.y + t_rx.y, t_tx.z + t_rx.z);
    Ok(ris_response(anchor, &sf, carrier_freq_hz).map(|x| x.conj()))
}

/// Derivative beams of one anchor: the xi and zeta partials of the
/// conjugate response, projected entrywise back to unit modulus. Elements
/// whose pre-projection amplitude is below `1e-12` get phase zero.
pub fn der_beams(
    anchor: &RisAnchor,
    carrier_freq_hz: f64,
    tx: &Vec3,
    rx: &Vec3,
) -> Result<(DVector<C64>, DVector<C64>), CodebookError> {
    let dir = dir_beam(anchor, carrier_freq_hz, tx, rx)?;
    let kappa = TAU * carrier_freq_hz / SPEED_OF_LIGHT;
    let elements = element_positions(anchor, carrier_freq_hz);
    let project = |weight: f64, base: C64| -> C64 {
        let pre = base * C64::new(0.0, -kappa * weight);
        if pre.norm() < 1e-12 {
            C64::new(1.0, 0.0)
        } else {
            C64::from_polar(1.0, pre.arg())
        }
    };
    let der_xi = DVector::from_iterator(
        dir.len(),
        elements.iter().zip(dir.iter()).map(|(z, &d)| project(z.y, d)),
    );
    let der_zeta = DVector::from_iterator(
        dir.len(),
        elements.iter().zip(dir.iter()).map(|(z, &d)| project(z.z, d)),
    );
    Ok((der_xi, der_zeta))
}

/// Number of prior samples a codebook kind consumes for a given base length.
pub fn samples_needed(kind: CodebookKind, base_len: usize) -> usize {
    match kind {
        CodebookKind::Random => 0,
        CodebookKind::Dir => base_len,
        CodebookKind::DirDer => {
            let triplets = base_len / 3;
            triplets + (base_len - 3 * triplets)
        }
    }
}

/// Builds base profiles from explicit state samples and expands them.
///
/// `dir` consumes one sample per slot; `dir_der` consumes one sample per
/// `(dir, der_xi, der_zeta)` triplet, and any remainder slots are filled
/// with directional beams at additional samples.
pub fn codebook_from_samples(
    kind: CodebookKind,
    scenario: &Scenario,
    samples: &[StateSample],
    block_count: usize,
) -> Result<Codebook, CodebookError> {
    let g = scenario.radio.n_transmissions;
    if !g.is_multiple_of(block_count) {
        return Err(CodebookError::Divisibility {
            g,
            div: block_count,
        });
    }
    let base_len = g / block_count;
    let fc = scenario.radio.carrier_freq_hz;
    assert!(
        samples.len() >= samples_needed(kind, base_len),
        "not enough prior samples"
    );

    let mut slots = Vec::with_capacity(base_len);
    let mut base: Vec<DMatrix<C64>> = scenario
        .anchors
        .iter()
        .map(|a| DMatrix::zeros(a.n_elements(), base_len))
        .collect();

    match kind {
        CodebookKind::Random => unreachable!("random codebooks use random_codebook_expanded"),
        CodebookKind::Dir => {
            for (g_base, s) in samples.iter().take(base_len).enumerate() {
                for (l, anchor) in scenario.anchors.iter().enumerate() {
                    let w = dir_beam(anchor, fc, &s.tx, &s.rx)?;
                    base[l].set_column(g_base, &w);
                }
                slots.push(BeamSlot::Dir);
            }
        }
        CodebookKind::DirDer => {
            let triplets = base_len / 3;
            for (t, s) in samples.iter().take(triplets).enumerate() {
                for (l, anchor) in scenario.anchors.iter().enumerate() {
                    let w1 = dir_beam(anchor, fc, &s.tx, &s.rx)?;
                    let (w2, w3) = der_beams(anchor, fc, &s.tx, &s.rx)?;
                    base[l].set_column(3 * t, &w1);
                    base[l].set_column(3 * t + 1, &w2);
                    base[l].set_column(3 * t + 2, &w3);
                }
                slots.extend([BeamSlot::Dir, BeamSlot::DerXi, BeamSlot::DerZeta]);
            }
            // Remainder slots keep the SNR of directional beams at extra
            // prior samples.
            for (r, g_base) in (3 * triplets..base_len).enumerate() {
                let s = &samples[triplets + r];
                for (l, anchor) in scenario.anchors.iter().enumerate() {
                    let w = dir_beam(anchor, fc, &s.tx, &s.rx)?;
                    base[l].set_column(g_base, &w);
                }
                slots.push(BeamSlot::Dir);
            }
        }
    }

    let b = orthogonal_block_matrix(block_count, scenario.n_ris())?;
    expand_orthogonal(base, slots, &b)
}

/// Builds a codebook of the given kind, drawing any prior samples from
/// `rng`.
pub fn build_codebook<R: Rng>(
    kind: CodebookKind,
    scenario: &Scenario,
    prior: &PriorState,
    block_count: usize,
    rng: &mut R,
) -> Result<Codebook, CodebookError> {
    if kind == CodebookKind::Random {
        return random_codebook_expanded(scenario, block_count, rng);
    }
    let g = scenario.radio.n_transmissions;
    if !g.is_multiple_of(block_count) {
        return Err(CodebookError::Divisibility {
            g,
            div: block_count,
        });
    }
    let base_len = g / block_count;
    let samples = prior.sample(samples_needed(kind, base_len), rng)?;
    codebook_from_samples(kind, scenario, &samples, block_count)
}

/// Power-control vector over all transmissions with `||delta||^2 = G`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerVector {
    values: DVector<f64>,
}

impl PowerVector {
    /// Wraps a nonnegative vector, rescaling it so `||delta||^2 = len`.
    pub fn normalized(mut values: DVector<f64>) -> Self {
        let g = values.len() as f64;
        let scale = (g / values.norm_squared()).sqrt();
        values *= scale;
        Self { values }
    }

    pub fn uniform(g: usize) -> Self {
        Self {
            values: DVector::from_element(g, 1.0),
        }
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }
}

/// Power vector for a DIR/DER slot pattern: directional slots get
/// `sqrt(3) / sqrt(1 + 2 gamma^2)`, derivative slots
/// `sqrt(3) gamma / sqrt(1 + 2 gamma^2)`, tiled over all blocks and then
/// normalized exactly (the normalization is a no-op when the base length is
/// a multiple of three).
pub fn power_vector_from_gamma(
    gamma_p: f64,
    codebook: &Codebook,
) -> Result<PowerVector, CodebookError> {
    if gamma_p < 0.0 {
        return Err(CodebookError::NegativeGamma(gamma_p));
    }
    let denom = (1.0 + 2.0 * gamma_p * gamma_p).sqrt();
    let dir = 3.0f64.sqrt() / denom;
    let der = 3.0f64.sqrt() * gamma_p / denom;
    let g = codebook.n_transmissions();
    let values = DVector::from_iterator(
        g,
        (0..g).map(|i| match codebook.slot_of(i) {
            BeamSlot::Dir => dir,
            BeamSlot::DerXi | BeamSlot::DerZeta => der,
        }),
    );
    Ok(PowerVector::normalized(values))
}

/// Scalar power-split optimum: ratio of derivative-beam power to
/// directional-beam power.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GammaOptimum {
    pub gamma_p: f64,
    /// Mean squared RX position error bound over the design samples.
    pub objective: f64,
}

/// Result of the projected-gradient power allocation.
#[derive(Debug, Clone)]
pub struct PowerAllocation {
    pub delta: PowerVector,
    pub objective: f64,
    pub iterations: usize,
    /// Cleared when the iteration budget ran out before the objective
    /// settled; the best iterate is still returned.
    pub converged: bool,
    /// Largest simplex-constraint violation seen across accepted iterates.
    pub max_feasibility_violation: f64,
}

/// Shared state for power-control optimization over a DIR+DER codebook:
/// prior samples, the codebook built from them, and the per-transmission
/// state information matrices at every design sample.
pub struct PowerControlDesign {
    pub codebook: Codebook,
    /// Samples the squared-PEB objective is averaged over (one per beam
    /// triplet).
    pub objective_samples: Vec<StateSample>,
    state_matrices: Vec<Vec<DMatrix<f64>>>,
    n_transmissions: usize,
}

impl PowerControlDesign {
    /// Draws prior samples, builds the DIR+DER codebook, and precomputes the
    /// per-transmission information matrices at each design sample.
    pub fn new<R: Rng>(
        scenario: &Scenario,
        prior: &PriorState,
        block_count: usize,
        rng: &mut R,
    ) -> Result<Self, CodebookError> {
        let g = scenario.radio.n_transmissions;
        if !g.is_multiple_of(block_count) {
            return Err(CodebookError::Divisibility {
                g,
                div: block_count,
            });
        }
        let base_len = g / block_count;
        let samples = prior.sample(samples_needed(CodebookKind::DirDer, base_len), rng)?;
        Self::from_samples(scenario, &samples, block_count)
    }

    /// Builds the design from explicit prior samples (one per beam triplet
    /// plus any remainder slots).
    pub fn from_samples(
        scenario: &Scenario,
        samples: &[StateSample],
        block_count: usize,
    ) -> Result<Self, CodebookError> {
        let g = scenario.radio.n_transmissions;
        if !g.is_multiple_of(block_count) {
            return Err(CodebookError::Divisibility {
                g,
                div: block_count,
            });
        }
        let base_len = g / block_count;
        let triplets = base_len / 3;
        if triplets == 0 {
            return Err(CodebookError::Divisibility { g: base_len, div: 3 });
        }
        let codebook = codebook_from_samples(CodebookKind::DirDer, scenario, samples, block_count)?;
        let objective_samples: Vec<StateSample> = samples[..triplets].to_vec();
        let mut state_matrices = Vec::with_capacity(triplets);
        for sample in objective_samples.iter() {
            let mats = crate::crb::sample_state_matrices(scenario, sample, &codebook)
                .map_err(|e| CodebookError::Degenerate(e.to_string()))?;
            state_matrices.push(mats);
        }
        Ok(Self {
            codebook,
            objective_samples,
            state_matrices,
            n_transmissions: g,
        })
    }

    /// Mean squared RX PEB over the design samples for per-transmission
    /// powers `gamma` (`gamma_g = delta_g^2`). Infinite when any sample's
    /// information is singular.
    pub fn objective(&self, gamma: &[f64]) -> f64 {
        let mut acc = 0.0;
        for mats in &self.state_matrices {
            let n = mats[0].nrows();
            let mut m = DMatrix::zeros(n, n);
            for (g, s) in mats.iter().enumerate() {
                if gamma[g] != 0.0 {
                    m += s * gamma[g];
                }
            }
            let chol = match m.cholesky() {
                Some(c) => c,
                None => return f64::INFINITY,
            };
            let mut tr = 0.0;
            for i in 3..6 {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                let col = chol.solve(&e);
                tr += col[i];
            }
            if !tr.is_finite() || tr < 0.0 {
                return f64::INFINITY;
            }
            acc += tr;
        }
        acc / self.objective_samples.len() as f64
    }

    /// Gradient of [`Self::objective`]; `None` when some sample's
    /// information is singular at `gamma`.
    fn gradient(&self, gamma: &[f64]) -> Option<Vec<f64>> {
        let g_count = self.n_transmissions;
        let mut grad = vec![0.0; g_count];
        for mats in &self.state_matrices {
            let n = mats[0].nrows();
            let mut m = DMatrix::zeros(n, n);
            for (g, s) in mats.iter().enumerate() {
                if gamma[g] != 0.0 {
                    m += s * gamma[g];
                }
            }
            let chol = m.cholesky()?;
            // W = M^{ -1} E with E the RX-position selector.
            let mut w = DMatrix::zeros(n, 3);
            for (j, i) in (3..6).enumerate() {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                w.set_column(j, &chol.solve(&e));
            }
            for (g, s) in mats.iter().enumerate() {
                // d tr(E^T M^{-1} E) / d gamma_g = -tr(W^T S_g W)
                let sw = s * &w;
                let mut t = 0.0;
                for j in 0..3 {
                    t += w.column(j).dot(&sw.column(j));
                }
                grad[g] -= t;
            }
        }
        let scale = 1.0 / self.objective_samples.len() as f64;
        for v in &mut grad {
            *v *= scale;
        }
        Some(grad)
    }

    /// Objective of the scalar split `gamma_p` applied through the slot
    /// pattern.
    pub fn objective_of_gamma_p(&self, gamma_p: f64) -> f64 {
        let delta = match power_vector_from_gamma(gamma_p, &self.codebook) {
            Ok(d) => d,
            Err(_) => return f64::INFINITY,
        };
        let gamma: Vec<f64> = delta.as_vector().iter().map(|d| d * d).collect();
        self.objective(&gamma)
    }

    /// Golden-section search for the best scalar split over
    /// `gamma_p in [1e-2, 1e2]` (log-spaced), also checking `0` and `1`.
    pub fn optimize_gamma_p(&self) -> Result<GammaOptimum, CodebookError> {
        let (log_opt, f_opt) =
            crate::optim::golden_section_min(-2.0, 2.0, 1e-4, |lg| {
                self.objective_of_gamma_p(10f64.powf(lg))
            });
        let mut best = (10f64.powf(log_opt), f_opt);
        for candidate in [0.0, 1e-2, 1.0, 1e2] {
            let f = self.objective_of_gamma_p(candidate);
            if f < best.1 {
                best = (candidate, f);
            }
        }
        if !best.1.is_finite() {
            return Err(CodebookError::Degenerate(
                "state information is singular at every power split; the prior \
                 samples leave the geometry unobservable"
                    .into(),
            ));
        }
        Ok(GammaOptimum {
            gamma_p: best.0,
            objective: best.1,
        })
    }

    /// Projected-gradient minimization of the sampled squared-PEB objective
    /// over `{gamma >= 0, sum gamma = G}`. Starts from the better of the
    /// uniform point and the best scalar split, so the result can only
    /// improve on both.
    pub fn optimize_allocation(&self) -> Result<PowerAllocation, CodebookError> {
        let g = self.n_transmissions;
        let total = g as f64;
        let scalar = self.optimize_gamma_p()?;
        let scalar_gamma: Vec<f64> = power_vector_from_gamma(scalar.gamma_p, &self.codebook)?
            .as_vector()
            .iter()
            .map(|d| d * d)
            .collect();
        let uniform = vec![1.0; g];
        let (mut x, mut fx) = {
            let fu = self.objective(&uniform);
            if scalar.objective < fu {
                (scalar_gamma, scalar.objective)
            } else {
                (uniform, fu)
            }
        };

        let mut max_violation: f64 = feasibility_violation(&x, total);
        let mut step = 1.0;
        let mut converged = false;
        let mut iterations = 0;
        let max_iterations = 4000;
        // Relative progress over a trailing window decides convergence; a
        // plain per-step threshold never fires on the long flat tail.
        let window = 50;
        let mut history = vec![fx];

        while iterations < max_iterations {
            iterations += 1;
            let grad = match self.gradient(&x) {
                Some(gr) => gr,
                None => break,
            };
            let gnorm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gnorm == 0.0 {
                converged = true;
                break;
            }
            // Backtracking projected step, monotone by construction.
            let mut accepted = false;
            let mut t = step;
            for _ in 0..60 {
                let trial: Vec<f64> =
                    x.iter().zip(grad.iter()).map(|(xi, gi)| xi - t * gi).collect();
                let proj = crate::optim::project_simplex(&trial, total);
                let f_new = self.objective(&proj);
                if f_new < fx {
                    x = proj;
                    max_violation = max_violation.max(feasibility_violation(&x, total));
                    fx = f_new;
                    step = t * 2.0;
                    accepted = true;
                    break;
                }
                t *= 0.25;
                if t < 1e-20 {
                    break;
                }
            }
            if !accepted {
                converged = true;
                break;
            }
            history.push(fx);
            if history.len() > window {
                let past = history[history.len() - 1 - window];
                if (past - fx) / fx.max(1e-300) < 1e-9 {
                    converged = true;
                    break;
                }
            }
        }

        let delta = PowerVector::normalized(DVector::from_iterator(
            g,
            x.iter().map(|v| v.max(0.0).sqrt()),
        ));
        Ok(PowerAllocation {
            objective: fx,
            delta,
            iterations,
            converged,
            max_feasibility_violation: max_violation,
        })
    }
}

fn feasibility_violation(gamma: &[f64], total: f64) -> f64 {
    let neg: f64 = gamma.iter().map(|v| (-v).max(0.0)).sum();
    let sum: f64 = gamma.iter().sum();
    neg + (sum - total).abs() / total
}

/// Best scalar DER/DIR power split for a prior, building the DIR+DER
/// codebook from `rng`-drawn samples.
pub fn optimize_gamma<R: Rng>(
    scenario: &Scenario,
    prior: &PriorState,
    block_count: usize,
    rng: &mut R,
) -> Result<(GammaOptimum, PowerControlDesign), CodebookError> {
    let design = PowerControlDesign::new(scenario, prior, block_count, rng)?;
    let opt = design.optimize_gamma_p()?;
    Ok((opt, design))
}

/// Projected-gradient power allocation over all transmissions for a prior.
pub fn optimize_power_allocation<R: Rng>(
    scenario: &Scenario,
    prior: &PriorState,
    block_count: usize,
    rng: &mut R,
) -> Result<(PowerAllocation, PowerControlDesign), CodebookError> {
    let design = PowerControlDesign::new(scenario, prior, block_count, rng)?;
    let alloc = design.optimize_allocation()?;
    Ok((alloc, design))
}

/// Writes per-RIS profile phases (radians) plus the block structure as a
/// plain-text matrix file.
pub fn save_codebook(codebook: &Codebook, path: &std::path::Path) -> Result<(), CodebookError> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "{} {} {}",
        codebook.profiles.len(),
        codebook.block_count,
        codebook.base_len
    )?;
    let slot_names: Vec<&str> = codebook
        .slots
        .iter()
        .map(|s| match s {
            BeamSlot::Dir => "dir",
            BeamSlot::DerXi => "der_xi",
            BeamSlot::DerZeta => "der_zeta",
        })
        .collect();
    writeln!(f, "{}", slot_names.join(" "))?;
    for p in &codebook.profiles {
        writeln!(f, "{} {}", p.nrows(), p.ncols())?;
        for r in 0..p.nrows() {
            let row: Vec<String> = (0..p.ncols()).map(|c| p[(r, c)].arg().to_string()).collect();
            writeln!(f, "{}", row.join(" "))?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Reads a codebook written by [`save_codebook`].
pub fn load_codebook(path: &std::path::Path) -> Result<Codebook, CodebookError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let mut next = || {
        lines
            .next()
            .ok_or_else(|| CodebookError::Malformed("unexpected end of file".into()))
    };
    let header: Vec<usize> = next()?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| CodebookError::Malformed(format!("bad header token {t}"))))
        .collect::<Result<_, _>>()?;
    if header.len() != 3 {
        return Err(CodebookError::Malformed("header must be: ris_count block_count base_len".into()));
    }
    let (ris_count, block_count, base_len) = (header[0], header[1], header[2]);
    let slots: Vec<BeamSlot> = next()?
        .split_whitespace()
        .map(|t| match t {
            "dir" => Ok(BeamSlot::Dir),
            "der_xi" => Ok(BeamSlot::DerXi),
            "der_zeta" => Ok(BeamSlot::DerZeta),
            other => Err(CodebookError::Malformed(format!("unknown slot role {other}"))),
        })
        .collect::<Result<_, _>>()?;
    if slots.len() != base_len {
        return Err(CodebookError::Malformed(format!(
            "expected {base_len} slot roles, found {}",
            slots.len()
        )));
    }
    let mut profiles = Vec::with_capacity(ris_count);
    for _ in 0..ris_count {
        let dims: Vec<usize> = next()?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| CodebookError::Malformed(format!("bad dimension {t}"))))
            .collect::<Result<_, _>>()?;
        if dims.len() != 2 {
            return Err(CodebookError::Malformed("profile header must be: n g".into()));
        }
        let (n, g) = (dims[0], dims[1]);
        if g != block_count * base_len {
            return Err(CodebookError::Malformed(format!(
                "profile has {g} columns, expected {}",
                block_count * base_len
            )));
        }
        let mut m = DMatrix::zeros(n, g);
        for r in 0..n {
            let row = next()?;
            let mut count = 0;
            for (c, tok) in row.split_whitespace().enumerate() {
                let phase: f64 = tok
                    .parse()
                    .map_err(|_| CodebookError::Malformed(format!("bad phase {tok}")))?;
                if c >= g {
                    return Err(CodebookError::Malformed("row too long".into()));
                }
                m[(r, c)] = C64::from_polar(1.0, phase);
                count += 1;
            }
            if count != g {
                return Err(CodebookError::Malformed(format!(
                    "row has {count} entries, expected {g}"
                )));
            }
        }
        profiles.push(m);
    }
    Ok(Codebook {
        profiles,
        block_count,
        base_len,
        slots,
    })
}
