//! Experiment description: UE and anchor states, scatter points, radio
//! configuration, path-gain models, and file persistence.
//!
//! Scenario values are immutable after load and freely shareable across
//! parallel workers. Per-trial randomness is derived from `seed` and the
//! trial index by the callers.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{euler_to_rotation, Rotation, Vec3};
use crate::{C64, SPEED_OF_LIGHT};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid scenario: {field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

/// One RIS anchor: a planar array of unit-modulus phase shifters with a
/// known position and orientation.
///
/// Elements lie in the local Y-Z plane (local x is the boresight), arranged
/// as an `n_rows x n_cols` grid centered on the array origin.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RisAnchor {
    pub position_m: [f64; 3],
    /// Euler triple `[yaw, pitch, roll]`, radians, intrinsic Z-Y-X.
    pub orientation_rad: [f64; 3],
    pub n_rows: usize,
    pub n_cols: usize,
    /// Inter-element spacing; defaults to half the carrier wavelength.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_spacing_m: Option<f64>,
}

impl RisAnchor {
    pub fn new(position_m: [f64; 3], orientation_rad: [f64; 3], n_rows: usize, n_cols: usize) -> Self {
        Self {
            position_m,
            orientation_rad,
            n_rows,
            n_cols,
            element_spacing_m: None,
        }
    }

    pub fn position(&self) -> Vec3 {
        Vec3::from(self.position_m)
    }

    pub fn rotation(&self) -> Rotation {
        euler_to_rotation(&self.orientation_rad)
    }

    pub fn n_elements(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn spacing(&self, carrier_freq_hz: f64) -> f64 {
        self.element_spacing_m
            .unwrap_or_else(|| 0.5 * SPEED_OF_LIGHT / carrier_freq_hz)
    }
}

/// Element positions in the anchor's local frame, row-major
/// (rows advance along local z, columns along local y), centered grid.
pub fn element_positions(anchor: &RisAnchor, carrier_freq_hz: f64) -> Vec<Vec3> {
    let s = anchor.spacing(carrier_freq_hz);
    let y0 = 0.5 * (anchor.n_cols as f64 - 1.0);
    let z0 = 0.5 * (anchor.n_rows as f64 - 1.0);
    let mut out = Vec::with_capacity(anchor.n_elements());
    for r in 0..anchor.n_rows {
        for c in 0..anchor.n_cols {
            out.push(Vec3::new(0.0, (c as f64 - y0) * s, (r as f64 - z0) * s));
        }
    }
    out
}

/// Which channel a scatter point perturbs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case", tag = "channel")]
pub enum Affects {
    /// TX-SP-RX multipath on the direct channel.
    Los,
    /// TX-SP-RIS-RX multipath (scatterer on the TX leg of RIS `ris`).
    RisInbound { ris: usize },
    /// TX-RIS-SP-RX multipath (scatterer on the RX leg of RIS `ris`).
    RisOutbound { ris: usize },
}

/// A point scatterer generating one multipath component.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScatterPoint {
    pub position_m: [f64; 3],
    /// Radar cross-section, square meters.
    pub rcs_m2: f64,
    pub affects: Affects,
}

impl ScatterPoint {
    pub fn position(&self) -> Vec3 {
        Vec3::from(self.position_m)
    }
}

/// Which leg of the RIS channels a scatter cluster perturbs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ClusterSide {
    /// Scatterers sit between TX and the RISs (TX-SP-RIS-RX bounces).
    Tx,
    /// Scatterers sit between the RISs and RX (TX-RIS-SP-RX bounces).
    Rx,
}

/// Generator directive for a disk of scatter points, expanded
/// deterministically from the scenario seed.
///
/// Each generated point contributes one multipath component to the direct
/// channel and one to every RIS channel on the configured side.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScatterCluster {
    pub center_m: [f64; 3],
    pub radius_m: f64,
    pub count: usize,
    pub rcs_m2: f64,
    pub side: ClusterSide,
}

/// OFDM radio parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RadioConfig {
    pub carrier_freq_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub n_subcarriers: usize,
    pub n_transmissions: usize,
    pub avg_power_dbm: f64,
    pub noise_psd_dbm_hz: f64,
    pub noise_figure_db: f64,
    /// TX-RX clock offset expressed in meters.
    pub clock_offset_m: f64,
}

impl RadioConfig {
    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq_hz
    }

    pub fn power_watts(&self) -> f64 {
        10f64.powf((self.avg_power_dbm - 30.0) / 10.0)
    }

    /// Occupied bandwidth `K * delta_f`, Hz.
    pub fn occupied_bandwidth_hz(&self) -> f64 {
        self.n_subcarriers as f64 * self.subcarrier_spacing_hz
    }
}

/// Noise variance per received sample, watts: PSD times noise figure times
/// the occupied bandwidth.
pub fn noise_variance(radio: &RadioConfig) -> f64 {
    let n0 = 10f64.powf((radio.noise_psd_dbm_hz - 30.0) / 10.0);
    let nf = 10f64.powf(radio.noise_figure_db / 10.0);
    n0 * nf * radio.occupied_bandwidth_hz()
}

/// Full experiment description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Scenario {
    pub tx_position_m: [f64; 3],
    pub rx_position_m: [f64; 3],
    /// When set, the direct TX-RX path is absent and positioning relies on
    /// the RIS paths alone (at least three anchors required).
    #[serde(default)]
    pub los_blocked: bool,
    pub seed: u64,
    pub radio: RadioConfig,
    pub anchors: Vec<RisAnchor>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scatterers: Vec<ScatterPoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clusters: Vec<ScatterCluster>,
}

impl Scenario {
    pub fn tx(&self) -> Vec3 {
        Vec3::from(self.tx_position_m)
    }

    pub fn rx(&self) -> Vec3 {
        Vec3::from(self.rx_position_m)
    }

    pub fn n_ris(&self) -> usize {
        self.anchors.len()
    }

    pub fn noise_variance_w(&self) -> f64 {
        noise_variance(&self.radio)
    }

    /// Explicit scatter points plus the deterministic expansion of every
    /// cluster directive.
    pub fn resolved_scatterers(&self) -> Vec<ScatterPoint> {
        let mut out = self.scatterers.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5ca7_7e12_9e3d_71f4);
        for cluster in &self.clusters {
            for _ in 0..cluster.count {
                // Uniform draw inside a disk on the x-y plane.
                let r = cluster.radius_m * rng.random::<f64>().sqrt();
                let phi = rng.random_range(0.0..2.0 * PI);
                let pos = [
                    cluster.center_m[0] + r * phi.cos(),
                    cluster.center_m[1] + r * phi.sin(),
                    cluster.center_m[2],
                ];
                out.push(ScatterPoint {
                    position_m: pos,
                    rcs_m2: cluster.rcs_m2,
                    affects: Affects::Los,
                });
                for ris in 0..self.anchors.len() {
                    out.push(ScatterPoint {
                        position_m: pos,
                        rcs_m2: cluster.rcs_m2,
                        affects: match cluster.side {
                            ClusterSide::Tx => Affects::RisInbound { ris },
                            ClusterSide::Rx => Affects::RisOutbound { ris },
                        },
                    });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let min_ris = if self.los_blocked { 3 } else { 2 };
        if self.anchors.len() < min_ris {
            return Err(invalid(
                "anchors",
                format!(
                    "{} anchor(s) configured but at least {min_ris} RISs are needed \
                     ({} scenario)",
                    self.anchors.len(),
                    if self.los_blocked { "LOS-blocked" } else { "LOS" },
                ),
            ));
        }
        if self.tx_position_m == self.rx_position_m {
            return Err(invalid("rx_position_m", "TX and RX positions coincide"));
        }
        for (i, a) in self.anchors.iter().enumerate() {
            if a.n_rows == 0 || a.n_cols == 0 {
                return Err(invalid(
                    &format!("anchors[{i}]"),
                    "array must have at least one row and one column",
                ));
            }
            if let Some(s) = a.element_spacing_m {
                if s <= 0.0 {
                    return Err(invalid(
                        &format!("anchors[{i}].element_spacing_m"),
                        "spacing must be positive",
                    ));
                }
            }
        }
        for (i, sp) in self.scatterers.iter().enumerate() {
            if sp.rcs_m2 <= 0.0 {
                return Err(invalid(
                    &format!("scatterers[{i}].rcs_m2"),
                    "radar cross-section must be positive",
                ));
            }
            let ris = match sp.affects {
                Affects::Los => None,
                Affects::RisInbound { ris } | Affects::RisOutbound { ris } => Some(ris),
            };
            if let Some(r) = ris {
                if r >= self.anchors.len() {
                    return Err(invalid(
                        &format!("scatterers[{i}].affects"),
                        format!("references RIS {r} but only {} configured", self.anchors.len()),
                    ));
                }
            }
        }
        for (i, c) in self.clusters.iter().enumerate() {
            if c.rcs_m2 <= 0.0 || c.radius_m < 0.0 {
                return Err(invalid(
                    &format!("clusters[{i}]"),
                    "rcs must be positive and radius nonnegative",
                ));
            }
        }
        let r = &self.radio;
        for (field, value) in [
            ("carrier_freq_hz", r.carrier_freq_hz),
            ("subcarrier_spacing_hz", r.subcarrier_spacing_hz),
        ] {
            if !value.is_finite() || value <= 0.0 {
                return Err(invalid(&format!("radio.{field}"), "must be positive"));
            }
        }
        if r.n_subcarriers == 0 || r.n_transmissions == 0 {
            return Err(invalid("radio", "n_subcarriers and n_transmissions must be positive"));
        }
        if r.clock_offset_m < 0.0 {
            return Err(invalid("radio.clock_offset_m", "must be nonnegative"));
        }
        Ok(())
    }

    /// Default layout used throughout the experiments: two 10x10 anchors at
    /// `[-4,0,2]` and `[4,0,2]` facing each other, UEs at `[-2,-4,0]` and
    /// `[2,3,0]`, 30 GHz, 192 transmissions, 512 positioning pilots spread
    /// over the 400 MHz system bandwidth.
    ///
    /// The pilot spacing is the bandwidth divided by the pilot count
    /// (781.25 kHz), and the noise bandwidth is correspondingly the full
    /// 400 MHz, which reproduces the reference error-bound levels for this
    /// layout.
    pub fn default_two_ris() -> Scenario {
        Scenario {
            tx_position_m: [-2.0, -4.0, 0.0],
            rx_position_m: [2.0, 3.0, 0.0],
            los_blocked: false,
            seed: 1,
            radio: RadioConfig {
                carrier_freq_hz: 30.0e9,
                subcarrier_spacing_hz: 400.0e6 / 512.0,
                n_subcarriers: 512,
                n_transmissions: 192,
                avg_power_dbm: 30.0,
                noise_psd_dbm_hz: -173.855,
                noise_figure_db: 0.0,
                clock_offset_m: 5.0,
            },
            anchors: vec![
                RisAnchor::new([-4.0, 0.0, 2.0], [0.0, 0.0, 0.0], 10, 10),
                RisAnchor::new([4.0, 0.0, 2.0], [PI, 0.0, 0.0], 10, 10),
            ],
            scatterers: Vec::new(),
            clusters: Vec::new(),
        }
    }
}

/// Amplitude of the complex gain of each propagation path.
///
/// Direct path: `lambda / (4 pi d0)`. RIS path:
/// `lambda^2 / (16 pi^2 d_t d_r)`. Scattered paths carry an additional
/// `sqrt(4 pi rcs)` radar term and one more `1/(4 pi d)` spreading factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GainKind {
    Los { d0: f64 },
    Ris { d_tx: f64, d_rx: f64 },
    MpLos { rcs_m2: f64, d_tx: f64, d_rx: f64 },
    MpRis { rcs_m2: f64, d_first: f64, d_mid: f64, d_last: f64 },
}

/// Gain amplitude of a path per the free-space models above.
pub fn gain_amplitude(kind: GainKind, wavelength_m: f64) -> f64 {
    let l = wavelength_m;
    match kind {
        GainKind::Los { d0 } => l / (4.0 * PI * d0),
        GainKind::Ris { d_tx, d_rx } => l * l / (16.0 * PI * PI * d_tx * d_rx),
        GainKind::MpLos { rcs_m2, d_tx, d_rx } => {
            (4.0 * PI * rcs_m2).sqrt() * l / (16.0 * PI * PI * d_tx * d_rx)
        }
        GainKind::MpRis {
            rcs_m2,
            d_first,
            d_mid,
            d_last,
        } => (4.0 * PI * rcs_m2).sqrt() * l * l / (64.0 * PI * PI * PI * d_first * d_mid * d_last),
    }
}

/// Complex gain with the model amplitude and a phase drawn uniformly from
/// `[0, 2 pi)`.
pub fn path_gain<R: Rng>(kind: GainKind, wavelength_m: f64, rng: &mut R) -> C64 {
    let amp = gain_amplitude(kind, wavelength_m);
    let phase = rng.random_range(0.0..2.0 * PI);
    C64::from_polar(amp, phase)
}

/// Writes a scenario as TOML.
pub fn save_scenario(scenario: &Scenario, path: &Path) -> Result<(), ScenarioError> {
    let text = toml::to_string_pretty(scenario).map_err(|e| ScenarioError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Loads and validates a scenario from a TOML file.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let scenario: Scenario = toml::from_str(&text).map_err(|e| ScenarioError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    scenario.validate()?;
    Ok(scenario)
}
