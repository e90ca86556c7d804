//! Received-signal synthesis for the SISO-OFDM multi-RIS model.
//!
//! The noise-free observation is a sum of per-path rank-structured terms:
//! element `(k, g)` of the contribution of a RIS path is
//! `rho * d_k(tau) * (omega_g^T a_R(xi, zeta)) * sqrt(P) * x_k * delta_g`,
//! where `d_k` is the delay phasor on subcarrier `k` and `a_R` the combined
//! arrival/departure steering vector of the array. The direct path and
//! scattered paths follow the same form without (or with their own) RIS
//! modulation.
//!
//! The subcarrier index `k` runs `1..=K`; the same convention is used by the
//! estimators and the Fisher-information code, which keeps all phase
//! references consistent.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::codebook::Codebook;
use crate::geometry::{
    direction_to_angles, local_direction, path_delay, spatial_frequencies, AnglePair, PathDelay,
    PathGeometry, PathKind, SpatialFreq,
};
use crate::scenario::{element_positions, Affects, GainKind, RadioConfig, Scenario};
use crate::{C64, SPEED_OF_LIGHT};

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("geometry: {0}")]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("power vector must satisfy ||delta||^2 = G (got {0:.6})")]
    PowerConstraint(f64),
    #[error(
        "path delay {range_m:.3} m falls outside the unambiguous period \
         {period_m:.3} m; delay estimation would alias"
    )]
    DelayOutOfRange { range_m: f64, period_m: f64 },
}

/// One propagation path with everything needed to synthesize its
/// contribution.
#[derive(Debug, Clone)]
pub struct PathDescriptor {
    pub kind: PathKind,
    /// Complex gain `rho = alpha * exp(-j beta)`.
    pub gain: C64,
    pub delay: PathDelay,
    /// Spatial frequencies for RIS-modulated paths, `None` for the direct
    /// and TX-SP-RX paths.
    pub spatial_freq: Option<SpatialFreq>,
}

impl PathDescriptor {
    /// Index of the RIS modulating this path, if any.
    pub fn ris_index(&self) -> Option<usize> {
        match self.kind {
            PathKind::Los | PathKind::MpLos => None,
            PathKind::Ris { ris }
            | PathKind::MpRisInbound { ris }
            | PathKind::MpRisOutbound { ris } => Some(ris),
        }
    }

    pub fn amplitude(&self) -> f64 {
        self.gain.norm()
    }

    /// Phase parameter `beta` with `rho = alpha e^{-j beta}`, in `[0, 2pi)`.
    pub fn beta(&self) -> f64 {
        let b = -self.gain.arg();
        if b < 0.0 {
            b + std::f64::consts::TAU
        } else {
            b
        }
    }
}

/// Received signal block: `K x G` complex samples.
#[derive(Debug, Clone)]
pub struct RxBlock {
    pub samples: DMatrix<C64>,
}

impl RxBlock {
    pub fn n_subcarriers(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_transmissions(&self) -> usize {
        self.samples.ncols()
    }
}

/// Steering vector of an anchor toward the given angles:
/// `a_n = exp(j kappa z_n . t(angles))` with `kappa = 2 pi f_c / c`.
pub fn steering_vector(
    anchor: &crate::scenario::RisAnchor,
    angles: &AnglePair,
    carrier_freq_hz: f64,
) -> DVector<C64> {
    let t = crate::geometry::angles_to_direction(angles);
    let kappa = 2.0 * std::f64::consts::PI * carrier_freq_hz / SPEED_OF_LIGHT;
    let elements = element_positions(anchor, carrier_freq_hz);
    DVector::from_iterator(
        elements.len(),
        elements
            .iter()
            .map(|z| C64::from_polar(1.0, kappa * z.dot(&t))),
    )
}

/// Combined arrival/departure response of an anchor at spatial frequencies
/// `(xi, zeta)`: `exp(j kappa Z^T [0, xi, zeta])`.
///
/// Equals the Hadamard product of the arrival and departure steering
/// vectors whenever `(xi, zeta)` are the spatial frequencies of those
/// angles (the array has no x extent).
pub fn ris_response(
    anchor: &crate::scenario::RisAnchor,
    sf: &SpatialFreq,
    carrier_freq_hz: f64,
) -> DVector<C64> {
    let kappa = 2.0 * std::f64::consts::PI * carrier_freq_hz / SPEED_OF_LIGHT;
    let elements = element_positions(anchor, carrier_freq_hz);
    DVector::from_iterator(
        elements.len(),
        elements
            .iter()
            .map(|z| C64::from_polar(1.0, kappa * (z.y * sf.xi + z.z * sf.zeta))),
    )
}

/// Delay phasors across subcarriers: `d_k = exp(-j 2 pi k delta_f tau)`,
/// `k = 1..=K`, with the delay given as an equivalent range in meters.
pub fn delay_vector(range_m: f64, radio: &RadioConfig) -> DVector<C64> {
    let tau = range_m / SPEED_OF_LIGHT;
    let w = -2.0 * std::f64::consts::PI * radio.subcarrier_spacing_hz * tau;
    DVector::from_iterator(
        radio.n_subcarriers,
        (1..=radio.n_subcarriers).map(|k| C64::from_polar(1.0, w * k as f64)),
    )
}

/// Enumerates every propagation path of a scenario: the direct path (unless
/// blocked), one path per RIS, and one per resolved scatter point. Gain
/// phases are drawn from `rng` in enumeration order.
pub fn enumerate_paths<R: Rng>(
    scenario: &Scenario,
    rng: &mut R,
) -> Result<Vec<PathDescriptor>, ChannelError> {
    let tx = scenario.tx();
    let rx = scenario.rx();
    let b = scenario.radio.clock_offset_m;
    let lambda = scenario.radio.wavelength_m();
    let mut paths = Vec::new();

    let mut geo = PathGeometry {
        tx,
        rx,
        anchor: None,
        scatterer: None,
    };

    if !scenario.los_blocked {
        let delay = path_delay(PathKind::Los, &geo, b)?;
        let d0 = (tx - rx).norm();
        paths.push(PathDescriptor {
            kind: PathKind::Los,
            gain: crate::scenario::path_gain(GainKind::Los { d0 }, lambda, rng),
            delay,
            spatial_freq: None,
        });
    }

    for (idx, anchor) in scenario.anchors.iter().enumerate() {
        let p = anchor.position();
        let rot = anchor.rotation();
        geo.anchor = Some(p);
        let delay = path_delay(PathKind::Ris { ris: idx }, &geo, b)?;
        let aoa = direction_to_angles(&local_direction(&tx, &p, &rot)?);
        let aod = direction_to_angles(&local_direction(&rx, &p, &rot)?);
        let d_tx = (tx - p).norm();
        let d_rx = (rx - p).norm();
        paths.push(PathDescriptor {
            kind: PathKind::Ris { ris: idx },
            gain: crate::scenario::path_gain(GainKind::Ris { d_tx, d_rx }, lambda, rng),
            delay,
            spatial_freq: Some(spatial_frequencies(&aoa, &aod)),
        });
    }

    for sp in scenario.resolved_scatterers() {
        let spos = sp.position();
        geo.scatterer = Some(spos);
        match sp.affects {
            Affects::Los => {
                geo.anchor = None;
                let delay = path_delay(PathKind::MpLos, &geo, b)?;
                paths.push(PathDescriptor {
                    kind: PathKind::MpLos,
                    gain: crate::scenario::path_gain(
                        GainKind::MpLos {
                            rcs_m2: sp.rcs_m2,
                            d_tx: (tx - spos).norm(),
                            d_rx: (rx - spos).norm(),
                        },
                        lambda,
                        rng,
                    ),
                    delay,
                    spatial_freq: None,
                });
            }
            Affects::RisInbound { ris } => {
                let anchor = &scenario.anchors[ris];
                let p = anchor.position();
                let rot = anchor.rotation();
                geo.anchor = Some(p);
                let delay = path_delay(PathKind::MpRisInbound { ris }, &geo, b)?;
                // Arrival from the scatterer, departure toward RX.
                let aoa = direction_to_angles(&local_direction(&spos, &p, &rot)?);
                let aod = direction_to_angles(&local_direction(&rx, &p, &rot)?);
                paths.push(PathDescriptor {
                    kind: PathKind::MpRisInbound { ris },
                    gain: crate::scenario::path_gain(
                        GainKind::MpRis {
                            rcs_m2: sp.rcs_m2,
                            d_first: (tx - spos).norm(),
                            d_mid: (p - spos).norm(),
                            d_last: (rx - p).norm(),
                        },
                        lambda,
                        rng,
                    ),
                    delay,
                    spatial_freq: Some(spatial_frequencies(&aoa, &aod)),
                });
            }
            Affects::RisOutbound { ris } => {
                let anchor = &scenario.anchors[ris];
                let p = anchor.position();
                let rot = anchor.rotation();
                geo.anchor = Some(p);
                let delay = path_delay(PathKind::MpRisOutbound { ris }, &geo, b)?;
                // Arrival from TX, departure toward the scatterer.
                let aoa = direction_to_angles(&local_direction(&tx, &p, &rot)?);
                let aod = direction_to_angles(&local_direction(&spos, &p, &rot)?);
                paths.push(PathDescriptor {
                    kind: PathKind::MpRisOutbound { ris },
                    gain: crate::scenario::path_gain(
                        GainKind::MpRis {
                            rcs_m2: sp.rcs_m2,
                            d_first: (tx - p).norm(),
                            d_mid: (p - spos).norm(),
                            d_last: (rx - spos).norm(),
                        },
                        lambda,
                        rng,
                    ),
                    delay,
                    spatial_freq: None,
                });
                // The outbound bounce is still modulated by the RIS with the
                // TX arrival / scatterer departure response computed above.
                let last = paths.last_mut().unwrap();
                last.spatial_freq = Some(spatial_frequencies(&aoa, &aod));
            }
        }
    }
    Ok(paths)
}

/// Equivalent RIS gain of a path on every transmission:
/// `omega_g^T a_R(xi, zeta)` for RIS-modulated paths, all-ones otherwise.
pub fn ris_gain_per_transmission(
    path: &PathDescriptor,
    scenario: &Scenario,
    codebook: &Codebook,
) -> DVector<C64> {
    let g = scenario.radio.n_transmissions;
    match (path.ris_index(), path.spatial_freq.as_ref()) {
        (Some(ris), Some(sf)) => {
            let a = ris_response(&scenario.anchors[ris], sf, scenario.radio.carrier_freq_hz);
            let profile = &codebook.profiles[ris];
            DVector::from_iterator(g, (0..g).map(|col| profile.column(col).dot(&a)))
        }
        _ => DVector::from_element(g, C64::new(1.0, 0.0)),
    }
}

/// Noise-free `K x G` contribution of one path.
pub fn path_matrix(
    path: &PathDescriptor,
    scenario: &Scenario,
    codebook: &Codebook,
    delta: &DVector<f64>,
    pilots: &DVector<C64>,
) -> DMatrix<C64> {
    let radio = &scenario.radio;
    let sqrt_p = radio.power_watts().sqrt();
    let d = delay_vector(path.delay.range_m, radio);
    let v = ris_gain_per_transmission(path, scenario, codebook);
    let mut out = DMatrix::zeros(radio.n_subcarriers, radio.n_transmissions);
    for g in 0..radio.n_transmissions {
        let col_factor = path.gain * v[g] * sqrt_p * delta[g];
        for k in 0..radio.n_subcarriers {
            out[(k, g)] = col_factor * d[k] * pilots[k];
        }
    }
    out
}

/// Unit pilots (`x_k = 1` for every subcarrier).
pub fn unit_pilots(radio: &RadioConfig) -> DVector<C64> {
    DVector::from_element(radio.n_subcarriers, C64::new(1.0, 0.0))
}

/// Synthesizes the received block for the listed paths, optionally adding
/// circularly-symmetric complex Gaussian noise of the scenario's variance.
pub fn synthesize_from_paths<R: Rng>(
    scenario: &Scenario,
    codebook: &Codebook,
    delta: &DVector<f64>,
    paths: &[PathDescriptor],
    pilots: &DVector<C64>,
    rng: &mut R,
    with_noise: bool,
) -> Result<RxBlock, ChannelError> {
    let radio = &scenario.radio;
    if codebook.profiles.len() != scenario.anchors.len() {
        return Err(ChannelError::Dimension(format!(
            "codebook has {} profiles for {} anchors",
            codebook.profiles.len(),
            scenario.anchors.len()
        )));
    }
    if delta.len() != radio.n_transmissions {
        return Err(ChannelError::Dimension(format!(
            "power vector has {} entries for G = {}",
            delta.len(),
            radio.n_transmissions
        )));
    }
    if pilots.len() != radio.n_subcarriers {
        return Err(ChannelError::Dimension(format!(
            "pilot vector has {} entries for K = {}",
            pilots.len(),
            radio.n_subcarriers
        )));
    }
    let g = radio.n_transmissions as f64;
    let norm2 = delta.norm_squared();
    if (norm2 - g).abs() > 1e-6 * g {
        return Err(ChannelError::PowerConstraint(norm2));
    }
    for p in &codebook.profiles {
        if p.nrows() == 0 || p.ncols() != radio.n_transmissions {
            return Err(ChannelError::Dimension(format!(
                "profile is {}x{}, expected N x {}",
                p.nrows(),
                p.ncols(),
                radio.n_transmissions
            )));
        }
    }
    // Delays must stay within one unambiguous period of the subcarrier
    // comb or the delay search cannot recover them.
    let period_m = crate::SPEED_OF_LIGHT / radio.subcarrier_spacing_hz;
    for path in paths {
        if path.delay.range_m < 0.0 || path.delay.range_m >= period_m {
            return Err(ChannelError::DelayOutOfRange {
                range_m: path.delay.range_m,
                period_m,
            });
        }
    }

    let mut y = DMatrix::zeros(radio.n_subcarriers, radio.n_transmissions);
    for path in paths {
        y += path_matrix(path, scenario, codebook, delta, pilots);
    }
    if with_noise {
        let sigma = (scenario.noise_variance_w() / 2.0).sqrt();
        for v in y.iter_mut() {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            *v += C64::new(sigma * re, sigma * im);
        }
    }
    Ok(RxBlock { samples: y })
}

/// Enumerates the scenario's paths and synthesizes the received block with
/// unit pilots.
pub fn synthesize<R: Rng>(
    scenario: &Scenario,
    codebook: &Codebook,
    delta: &DVector<f64>,
    rng: &mut R,
    with_noise: bool,
) -> Result<RxBlock, ChannelError> {
    let paths = enumerate_paths(scenario, rng)?;
    let pilots = unit_pilots(&scenario.radio);
    synthesize_from_paths(scenario, codebook, delta, &paths, &pilots, rng, with_noise)
}

/// Dumps a received block as `u32 K, u32 G` followed by row-major
/// little-endian `f32` re/im pairs.
pub fn write_rx_block(block: &RxBlock, path: &std::path::Path) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&(block.n_subcarriers() as u32).to_le_bytes())?;
    f.write_all(&(block.n_transmissions() as u32).to_le_bytes())?;
    for k in 0..block.n_subcarriers() {
        for g in 0..block.n_transmissions() {
            let v = block.samples[(k, g)];
            f.write_all(&(v.re as f32).to_le_bytes())?;
            f.write_all(&(v.im as f32).to_le_bytes())?;
        }
    }
    f.flush()
}

/// Reads a block written by [`write_rx_block`].
pub fn read_rx_block(path: &std::path::Path) -> std::io::Result<RxBlock> {
    let bytes = std::fs::read(path)?;
    let too_short =
        || std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated rx block file");
    if bytes.len() < 8 {
        return Err(too_short());
    }
    let k = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let g = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 8 * k * g {
        return Err(too_short());
    }
    let mut samples = DMatrix::zeros(k, g);
    let mut off = 8;
    for row in 0..k {
        for col in 0..g {
            let re = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            let im = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
            samples[(row, col)] = C64::new(re as f64, im as f64);
            off += 8;
        }
    }
    Ok(RxBlock { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook;
    use crate::scenario::RisAnchor;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn all_ones_codebook(scenario: &Scenario) -> Codebook {
        codebook::Codebook::all_ones(scenario)
    }

    #[test]
    fn boresight_steering_is_all_ones() {
        let a = RisAnchor::new([0.0; 3], [0.0; 3], 4, 4);
        let v = steering_vector(&a, &AnglePair::new(0.0, 0.0), 30.0e9);
        for x in v.iter() {
            assert_relative_eq!(x.re, 1.0, epsilon = 1e-12);
            assert_relative_eq!(x.im, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn steering_entries_are_unit_modulus() {
        let a = RisAnchor::new([0.0; 3], [0.0; 3], 5, 3);
        let v = steering_vector(&a, &AnglePair::new(0.7, -0.3), 30.0e9);
        for x in v.iter() {
            assert_relative_eq!(x.norm(), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn two_element_steering_phases() {
        let mut a = RisAnchor::new([0.0; 3], [0.0; 3], 1, 2);
        let lambda = SPEED_OF_LIGHT / 30.0e9;
        a.element_spacing_m = Some(lambda / 2.0);
        // Direction [0, 1, 0].
        let v = steering_vector(&a, &AnglePair::new(std::f64::consts::FRAC_PI_2, 0.0), 30.0e9);
        assert_relative_eq!(v[0].arg(), -std::f64::consts::FRAC_PI_2, epsilon = 1e-9);
        assert_relative_eq!(v[1].arg(), std::f64::consts::FRAC_PI_2, epsilon = 1e-9);
    }

    #[test]
    fn ris_response_zero_is_all_ones() {
        let a = RisAnchor::new([0.0; 3], [0.0; 3], 3, 3);
        let v = ris_response(&a, &SpatialFreq::new(0.0, 0.0), 30.0e9);
        for x in v.iter() {
            assert_relative_eq!((x - C64::new(1.0, 0.0)).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn ris_response_equals_steering_hadamard() {
        let a = RisAnchor::new([0.0; 3], [0.0; 3], 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let aoa = AnglePair::new(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5));
            let aod = AnglePair::new(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5));
            let sf = crate::geometry::spatial_frequencies(&aoa, &aod);
            let lhs = ris_response(&a, &sf, 30.0e9);
            let va = steering_vector(&a, &aoa, 30.0e9);
            let vd = steering_vector(&a, &aod, 30.0e9);
            for n in 0..lhs.len() {
                assert_relative_eq!((lhs[n] - va[n] * vd[n]).norm(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn conjugate_profile_attains_array_size() {
        let a = RisAnchor::new([0.0; 3], [0.0; 3], 10, 10);
        let sf = SpatialFreq::new(-0.4443, -0.5039);
        let ar = ris_response(&a, &sf, 30.0e9);
        let omega = ar.map(|x| x.conj());
        let gain: C64 = omega.iter().zip(ar.iter()).map(|(w, x)| w * x).sum();
        assert_relative_eq!(gain.norm(), 100.0, epsilon = 1e-9);
    }

    #[test]
    fn any_profile_is_bounded_by_array_size() {
        let a = RisAnchor::new([0.0; 3], [0.0; 3], 8, 8);
        let n = a.n_elements() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sf = SpatialFreq::new(0.3, -0.7);
        let ar = ris_response(&a, &sf, 30.0e9);
        for _ in 0..200 {
            let omega = DVector::from_iterator(
                ar.len(),
                (0..ar.len()).map(|_| {
                    C64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU))
                }),
            );
            let gain: C64 = omega.iter().zip(ar.iter()).map(|(w, x)| w * x).sum();
            assert!(gain.norm() <= n + 1e-9);
        }
    }

    #[test]
    fn delay_vector_limits() {
        let radio = Scenario::default_two_ris().radio;
        let v = delay_vector(0.0, &radio);
        assert!(v.iter().all(|x| (x - C64::new(1.0, 0.0)).norm() < 1e-12));

        // Full wrap at tau = 1/delta_f.
        let range = SPEED_OF_LIGHT / radio.subcarrier_spacing_hz;
        let v = delay_vector(range, &radio);
        assert!(v.iter().all(|x| (x - C64::new(1.0, 0.0)).norm() < 1e-6));

        // Linear ramp reaching -pi at k = K for tau = 1/(2 K delta_f).
        let k = radio.n_subcarriers as f64;
        let range = SPEED_OF_LIGHT / (2.0 * k * radio.subcarrier_spacing_hz);
        let v = delay_vector(range, &radio);
        let last = v[radio.n_subcarriers - 1];
        assert_relative_eq!(last.arg().abs(), std::f64::consts::PI, epsilon = 1e-9);
    }

    #[test]
    fn single_los_path_synthesis_matches_closed_form() {
        let mut scenario = Scenario::default_two_ris();
        scenario.radio.clock_offset_m = 0.0;
        scenario.radio.n_subcarriers = 16;
        scenario.radio.n_transmissions = 6;
        let cb = all_ones_codebook(&scenario);
        let delta = DVector::from_element(6, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let paths = enumerate_paths(&scenario, &mut rng).unwrap();
        let los = paths[0].clone();
        let pilots = unit_pilots(&scenario.radio);
        let y = synthesize_from_paths(
            &scenario, &cb, &delta, std::slice::from_ref(&los), &pilots, &mut rng, false,
        )
        .unwrap();
        let sqrt_p = scenario.radio.power_watts().sqrt();
        let d = delay_vector(los.delay.range_m, &scenario.radio);
        for k in 0..16 {
            for g in 0..6 {
                let expected = los.gain * d[k] * sqrt_p;
                assert_relative_eq!((y.samples[(k, g)] - expected).norm(), 0.0, epsilon = 1e-18);
            }
        }
    }

    #[test]
    fn boresight_ris_path_is_rank_one() {
        // Symmetric geometry around the first anchor's boresight so that the
        // spatial frequencies vanish and a_R sums to N.
        let mut scenario = Scenario::default_two_ris();
        scenario.anchors[0] = RisAnchor::new([0.0, 0.0, 0.0], [0.0; 3], 10, 10);
        scenario.tx_position_m = [5.0, 2.0, 1.0];
        scenario.rx_position_m = [5.0, -2.0, -1.0];
        scenario.radio.n_subcarriers = 32;
        scenario.radio.n_transmissions = 4;
        let cb = all_ones_codebook(&scenario);
        let delta = DVector::from_element(4, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let paths = enumerate_paths(&scenario, &mut rng).unwrap();
        let ris = paths
            .iter()
            .find(|p| p.kind == PathKind::Ris { ris: 0 })
            .unwrap();
        let sf = ris.spatial_freq.unwrap();
        assert_relative_eq!(sf.xi, 0.0, epsilon = 1e-12);
        assert_relative_eq!(sf.zeta, 0.0, epsilon = 1e-12);

        let pilots = unit_pilots(&scenario.radio);
        let y = synthesize_from_paths(
            &scenario,
            &cb,
            &delta,
            std::slice::from_ref(ris),
            &pilots,
            &mut rng,
            false,
        )
        .unwrap();
        let n = scenario.anchors[0].n_elements() as f64;
        let sqrt_p = scenario.radio.power_watts().sqrt();
        let d = delay_vector(ris.delay.range_m, &scenario.radio);
        for k in 0..32 {
            for g in 0..4 {
                let expected = ris.gain * n * d[k] * sqrt_p;
                assert_relative_eq!(
                    (y.samples[(k, g)] - expected).norm() / expected.norm(),
                    0.0,
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn synthesis_is_additive_over_paths() {
        let mut scenario = Scenario::default_two_ris();
        scenario.radio.n_subcarriers = 24;
        scenario.radio.n_transmissions = 6;
        scenario.scatterers.push(crate::scenario::ScatterPoint {
            position_m: [0.0, 2.0, 3.0],
            rcs_m2: 0.5,
            affects: Affects::RisInbound { ris: 0 },
        });
        let cb = codebook::random_codebook_expanded(&scenario, 3, &mut ChaCha8Rng::seed_from_u64(8))
            .unwrap();
        let delta = DVector::from_element(6, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let paths = enumerate_paths(&scenario, &mut rng).unwrap();
        let pilots = unit_pilots(&scenario.radio);
        let total = synthesize_from_paths(&scenario, &cb, &delta, &paths, &pilots, &mut rng, false)
            .unwrap();
        let mut sum = DMatrix::zeros(24, 6);
        for p in &paths {
            sum += synthesize_from_paths(
                &scenario,
                &cb,
                &delta,
                std::slice::from_ref(p),
                &pilots,
                &mut rng,
                false,
            )
            .unwrap()
            .samples;
        }
        assert!((&total.samples - &sum).norm() / total.samples.norm() < 1e-14);
    }

    #[test]
    fn power_scales_amplitude_exactly() {
        let mut scenario = Scenario::default_two_ris();
        scenario.radio.n_subcarriers = 16;
        scenario.radio.n_transmissions = 6;
        let cb = all_ones_codebook(&scenario);
        let delta = DVector::from_element(6, 1.0);
        let y1 = synthesize(
            &scenario,
            &cb,
            &delta,
            &mut ChaCha8Rng::seed_from_u64(4),
            false,
        )
        .unwrap();
        scenario.radio.avg_power_dbm += 10.0 * 4.0f64.log10();
        let y4 = synthesize(
            &scenario,
            &cb,
            &delta,
            &mut ChaCha8Rng::seed_from_u64(4),
            false,
        )
        .unwrap();
        let ratio = &y4.samples - &y1.samples.map(|v| v * 2.0);
        assert!(ratio.norm() / y4.samples.norm() < 1e-12);
    }

    #[test]
    fn noise_only_variance_matches_configuration() {
        let mut scenario = Scenario::default_two_ris();
        scenario.radio.avg_power_dbm = -400.0;
        let cb = all_ones_codebook(&scenario);
        let delta = DVector::from_element(scenario.radio.n_transmissions, 1.0);
        let y = synthesize(
            &scenario,
            &cb,
            &delta,
            &mut ChaCha8Rng::seed_from_u64(5),
            true,
        )
        .unwrap();
        let var: f64 =
            y.samples.iter().map(|v| v.norm_sqr()).sum::<f64>() / y.samples.len() as f64;
        let sigma2 = scenario.noise_variance_w();
        assert!(
            (var - sigma2).abs() / sigma2 < 0.05,
            "sample variance {var:e} vs configured {sigma2:e}"
        );
    }

    #[test]
    fn invalid_power_vector_is_rejected() {
        let scenario = Scenario::default_two_ris();
        let cb = all_ones_codebook(&scenario);
        let delta = DVector::from_element(scenario.radio.n_transmissions, 0.5);
        let err = synthesize(
            &scenario,
            &cb,
            &delta,
            &mut ChaCha8Rng::seed_from_u64(6),
            false,
        );
        assert!(matches!(err, Err(ChannelError::PowerConstraint(_))));
    }

    #[test]
    fn rx_block_file_round_trip() {
        let dir = std::env::temp_dir().join(format!("rxblock-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("block.bin");
        let mut samples = DMatrix::zeros(3, 2);
        samples[(0, 0)] = C64::new(1.5, -2.5);
        samples[(2, 1)] = C64::new(-0.125, 8.0);
        let block = RxBlock { samples };
        write_rx_block(&block, &path).unwrap();
        let back = read_rx_block(&path).unwrap();
        assert_eq!(back.n_subcarriers(), 3);
        assert_eq!(back.n_transmissions(), 2);
        assert_relative_eq!(back.samples[(0, 0)].re, 1.5);
        assert_relative_eq!(back.samples[(2, 1)].im, 8.0);
        std::fs::remove_dir_all(&dir).ok();
    }
}
