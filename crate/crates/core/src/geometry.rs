//! Pure geometric kernel: rotations, angles, direction vectors, spatial
//! frequencies, and propagation delays.
//!
//! All functions are pure and operate on immutable values; they are safe to
//! call from any number of threads.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::SPEED_OF_LIGHT;

/// 3D position or direction, meters (dimensionless when used as a unit
/// direction).
pub type Vec3 = Vector3<f64>;

/// Rotation matrix in SO(3).
pub type Rotation = Matrix3<f64>;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
}

/// Azimuth/elevation angle pair, radians.
///
/// Azimuth lies in `(-pi, pi]`, elevation in `[-pi/2, pi/2]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnglePair {
    pub azimuth: f64,
    pub elevation: f64,
}

impl AnglePair {
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Self { azimuth, elevation }
    }
}

/// Spatial frequencies of a RIS path: the estimable y/z components of the
/// sum of the arrival and departure direction vectors on a planar array.
/// Both lie in `[-2, 2]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpatialFreq {
    pub xi: f64,
    pub zeta: f64,
}

impl SpatialFreq {
    pub fn new(xi: f64, zeta: f64) -> Self {
        Self { xi, zeta }
    }
}

/// Propagation delay of one path.
///
/// Stored in seconds together with the equivalent range (delay times the
/// speed of light, meters). The equivalent range includes the clock offset.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PathDelay {
    pub seconds: f64,
    pub range_m: f64,
}

impl PathDelay {
    pub fn from_range_m(range_m: f64) -> Self {
        Self {
            seconds: range_m / SPEED_OF_LIGHT,
            range_m,
        }
    }

    pub fn from_seconds(seconds: f64) -> Self {
        Self {
            seconds,
            range_m: seconds * SPEED_OF_LIGHT,
        }
    }
}

/// Maps an Euler angle triple `[yaw, pitch, roll]` (radians) to a rotation
/// matrix, intrinsic Z-Y-X convention.
///
/// With this convention an orientation of `[pi, 0, 0]` turns the local +x
/// boresight to the global -x axis, and a positive pitch tilts the boresight
/// downward.
pub fn euler_to_rotation(o: &[f64; 3]) -> Rotation {
    let (yaw, pitch, roll) = (o[0], o[1], o[2]);
    // nalgebra's from_euler_angles(roll, pitch, yaw) builds R_z(yaw) R_y(pitch) R_x(roll).
    *nalgebra::Rotation3::from_euler_angles(roll, pitch, yaw).matrix()
}

/// Unit direction from `anchor_pos` toward `target`, expressed in the
/// anchor's local frame.
pub fn local_direction(
    target: &Vec3,
    anchor_pos: &Vec3,
    anchor_rot: &Rotation,
) -> Result<Vec3, GeometryError> {
    let diff = target - anchor_pos;
    let norm = diff.norm();
    if norm < 1e-12 {
        return Err(GeometryError::Degenerate(
            "target coincides with anchor position".into(),
        ));
    }
    Ok(anchor_rot.transpose() * (diff / norm))
}

/// Azimuth/elevation of a unit direction vector.
///
/// At the poles (`t_x = t_y = 0`) the azimuth is defined as `atan2(0, 0) = 0`.
pub fn direction_to_angles(t: &Vec3) -> AnglePair {
    AnglePair {
        azimuth: t.y.atan2(t.x),
        elevation: t.z.clamp(-1.0, 1.0).asin(),
    }
}

/// Unit direction vector of an azimuth/elevation pair.
pub fn angles_to_direction(a: &AnglePair) -> Vec3 {
    let (sin_az, cos_az) = a.azimuth.sin_cos();
    let (sin_el, cos_el) = a.elevation.sin_cos();
    Vec3::new(cos_az * cos_el, sin_az * cos_el, sin_el)
}

/// Spatial frequencies of an arrival/departure angle pair.
///
/// `xi = sin(az_a)cos(el_a) + sin(az_d)cos(el_d)`,
/// `zeta = sin(el_a) + sin(el_d)`. Symmetric under swapping the two angles.
pub fn spatial_frequencies(aoa: &AnglePair, aod: &AnglePair) -> SpatialFreq {
    let ta = angles_to_direction(aoa);
    let td = angles_to_direction(aod);
    SpatialFreq {
        xi: ta.y + td.y,
        zeta: ta.z + td.z,
    }
}

/// Path kind for delay computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    /// Direct TX-RX path.
    Los,
    /// TX-RIS-RX path via anchor `ris`.
    Ris { ris: usize },
    /// TX-SP-RX multipath via a scatter point.
    MpLos,
    /// TX-SP-RIS-RX multipath (scatterer on the TX side of anchor `ris`).
    MpRisInbound { ris: usize },
    /// TX-RIS-SP-RX multipath (scatterer on the RX side of anchor `ris`).
    MpRisOutbound { ris: usize },
}

/// Geometry needed by [`path_delay`]: UE positions plus, when relevant, the
/// anchor and scatter-point positions.
#[derive(Debug, Clone, Copy)]
pub struct PathGeometry {
    pub tx: Vec3,
    pub rx: Vec3,
    pub anchor: Option<Vec3>,
    pub scatterer: Option<Vec3>,
}

fn segment(a: &Vec3, b: &Vec3) -> Result<f64, GeometryError> {
    let d = (a - b).norm();
    if d < 1e-12 {
        return Err(GeometryError::Degenerate(
            "zero-length propagation segment".into(),
        ));
    }
    Ok(d)
}

/// Total propagation delay of a path, including the clock offset `b_m`
/// (meters).
pub fn path_delay(kind: PathKind, geo: &PathGeometry, b_m: f64) -> Result<PathDelay, GeometryError> {
    let missing = |what: &str| GeometryError::Degenerate(format!("path requires {what}"));
    let length = match kind {
        PathKind::Los => segment(&geo.tx, &geo.rx)?,
        PathKind::Ris { .. } => {
            let p = geo.anchor.ok_or_else(|| missing("an anchor position"))?;
            segment(&geo.tx, &p)? + segment(&geo.rx, &p)?
        }
        PathKind::MpLos => {
            let sp = geo.scatterer.ok_or_else(|| missing("a scatter point"))?;
            segment(&geo.tx, &sp)? + segment(&geo.rx, &sp)?
        }
        PathKind::MpRisInbound { .. } => {
            let p = geo.anchor.ok_or_else(|| missing("an anchor position"))?;
            let sp = geo.scatterer.ok_or_else(|| missing("a scatter point"))?;
            segment(&geo.tx, &sp)? + segment(&p, &sp)? + segment(&geo.rx, &p)?
        }
        PathKind::MpRisOutbound { .. } => {
            let p = geo.anchor.ok_or_else(|| missing("an anchor position"))?;
            let sp = geo.scatterer.ok_or_else(|| missing("a scatter point"))?;
            segment(&geo.tx, &p)? + segment(&p, &sp)? + segment(&geo.rx, &sp)?
        }
    };
    Ok(PathDelay::from_range_m(length + b_m))
}
