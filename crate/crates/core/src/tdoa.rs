//! Two-camera arrival-time difference -> hyperbola band.
//!
//! For a muzzle blast heard at two synchronized cameras, every source
//! location `P` satisfies `|P - far| - |P - near| = vs * t_diff` where `near`
//! is the camera that heard it first. Uncertainty in the speed of sound and
//! in the synchronization (`sync_epsilon`) widens the single curve into a
//! band bounded by a lower and an upper hyperbola.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{self, EnuPoint, GeoError};
use crate::interval::Interval;

/// Half a frame at 30 FPS, rounded up: the frame-matching sync margin.
pub const DEFAULT_SYNC_EPSILON: f64 = 0.033;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TdoaError {
    #[error("cameras are coincident")]
    CoincidentCameras,
    #[error(
        "even the lower 2a = {two_a_lower:.2} m reaches the camera separation {separation:.2} m"
    )]
    FullyInfeasible { two_a_lower: f64, separation: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(&'static str),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// `2a = vs * t_diff`.
pub fn compute_two_a(vs: f64, t_diff: f64) -> Result<f64, TdoaError> {
    let two_a = vs * t_diff;
    if two_a.is_finite() {
        Ok(two_a)
    } else {
        Err(TdoaError::InvalidInput("non-finite 2a"))
    }
}

/// Formula for the middle line of the band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterLine {
    /// `mean(vs) * t_diff`.
    #[default]
    Mean,
    /// `(vs_min + vs_max) * (t_diff - epsilon) / 2`, kept for comparison with
    /// earlier published results.
    Legacy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdoaInputs {
    pub cam_a: EnuPoint,
    /// Muzzle-blast arrival at camera A on the global timeline, seconds.
    pub hear_a: f64,
    pub cam_b: EnuPoint,
    pub hear_b: f64,
    pub vs_range: Interval,
    #[serde(default = "default_epsilon")]
    pub sync_epsilon: f64,
    #[serde(default)]
    pub center_line: CenterLine,
}

fn default_epsilon() -> f64 {
    DEFAULT_SYNC_EPSILON
}

impl TdoaInputs {
    pub fn new(
        cam_a: EnuPoint,
        hear_a: f64,
        cam_b: EnuPoint,
        hear_b: f64,
        vs_range: Interval,
    ) -> Self {
        TdoaInputs {
            cam_a,
            hear_a,
            cam_b,
            hear_b,
            vs_range,
            sync_epsilon: DEFAULT_SYNC_EPSILON,
            center_line: CenterLine::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineRole {
    Lower,
    Center,
    Upper,
}

impl LineRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            LineRole::Lower => "lower",
            LineRole::Center => "center",
            LineRole::Upper => "upper",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperbolaBand {
    /// Earlier-hearing camera.
    pub near: EnuPoint,
    pub far: EnuPoint,
    /// True when camera A is the near focus.
    pub a_is_near: bool,
    pub t_diff: f64,
    pub two_a_lower: f64,
    pub two_a_center: f64,
    pub two_a_upper: f64,
    /// Zero arrival difference: the band collapses onto the bisector.
    pub degenerate: bool,
    /// Per line (lower, center, upper): `2a` below the camera separation.
    pub feasible: [bool; 3],
}

impl HyperbolaBand {
    pub fn separation(&self) -> f64 {
        self.near.horizontal_distance(&self.far)
    }

    pub fn two_a(&self, role: LineRole) -> f64 {
        match role {
            LineRole::Lower => self.two_a_lower,
            LineRole::Center => self.two_a_center,
            LineRole::Upper => self.two_a_upper,
        }
    }

    /// `|P - far| - |P - near|` for a point, using horizontal distances.
    pub fn range_difference(&self, p: &EnuPoint) -> f64 {
        p.horizontal_distance(&self.far) - p.horizontal_distance(&self.near)
    }
}

pub fn band(inputs: &TdoaInputs) -> Result<HyperbolaBand, TdoaError> {
    let TdoaInputs {
        cam_a,
        hear_a,
        cam_b,
        hear_b,
        vs_range,
        sync_epsilon,
        center_line,
    } = *inputs;
    if !(cam_a.is_finite() && cam_b.is_finite() && hear_a.is_finite() && hear_b.is_finite()) {
        return Err(TdoaError::InvalidInput("non-finite camera or arrival time"));
    }
    if !vs_range.is_valid() || vs_range.min <= 0.0 {
        return Err(TdoaError::InvalidInput(
            "speed of sound range must satisfy 0 < min <= max",
        ));
    }
    if !(sync_epsilon.is_finite() && sync_epsilon >= 0.0) {
        return Err(TdoaError::InvalidInput("sync epsilon must be >= 0"));
    }
    let separation = cam_a.horizontal_distance(&cam_b);
    if separation <= 0.0 {
        return Err(TdoaError::CoincidentCameras);
    }

    let a_is_near = hear_a <= hear_b;
    let (near, far) = if a_is_near {
        (cam_a, cam_b)
    } else {
        (cam_b, cam_a)
    };
    let t_diff = (hear_a - hear_b).abs();

    let two_a_lower = compute_two_a(vs_range.min, (t_diff - sync_epsilon).max(0.0))?;
    let two_a_upper = compute_two_a(vs_range.max, t_diff + sync_epsilon)?;
    let two_a_center = match center_line {
        CenterLine::Mean => compute_two_a(vs_range.mean(), t_diff)?,
        CenterLine::Legacy => {
            compute_two_a(vs_range.min + vs_range.max, t_diff - sync_epsilon)? / 2.0
        }
    };
    if two_a_lower >= separation {
        return Err(TdoaError::FullyInfeasible {
            two_a_lower,
            separation,
        });
    }
    let feasible = [
        two_a_lower < separation,
        (0.0..separation).contains(&two_a_center),
        two_a_upper < separation,
    ];
    Ok(HyperbolaBand {
        near,
        far,
        a_is_near,
        t_diff,
        two_a_lower,
        two_a_center,
        two_a_upper,
        degenerate: t_diff == 0.0,
        feasible,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandLine {
    pub role: LineRole,
    pub two_a: f64,
    pub points: Vec<EnuPoint>,
    /// The center line is the most likely source locus.
    pub most_likely: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BandGeometry {
    pub lines: Vec<BandLine>,
    pub warnings: Vec<String>,
}

/// Polylines for the feasible lines of a band. A degenerate band yields the
/// single bisector line, tagged as the center.
pub fn band_geometry(b: &HyperbolaBand, extent: f64, step: f64) -> Result<BandGeometry, TdoaError> {
    if !b.feasible[0] {
        return Err(TdoaError::FullyInfeasible {
            two_a_lower: b.two_a_lower,
            separation: b.separation(),
        });
    }
    let mut out = BandGeometry::default();
    if b.degenerate {
        let line = geo::hyperbola_polyline(&b.near, &b.far, 0.0, extent, step)?;
        out.lines.push(BandLine {
            role: LineRole::Center,
            two_a: 0.0,
            points: line.points,
            most_likely: true,
        });
        return Ok(out);
    }
    for (i, role) in [LineRole::Lower, LineRole::Center, LineRole::Upper]
        .into_iter()
        .enumerate()
    {
        let two_a = b.two_a(role);
        if !b.feasible[i] {
            out.warnings.push(alloc::format!(
                "{} line omitted: 2a = {:.2} m is outside [0, {:.2}) m",
                role.as_str(),
                two_a,
                b.separation()
            ));
            continue;
        }
        let line = geo::hyperbola_polyline(&b.near, &b.far, two_a, extent, step)?;
        out.lines.push(BandLine {
            role,
            two_a,
            points: line.points,
            most_likely: role == LineRole::Center,
        });
    }
    Ok(out)
}
