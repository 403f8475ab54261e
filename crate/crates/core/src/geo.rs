//! Geographic <-> local planar conversion and map geometry.
//!
//! The local frame is an equirectangular tangent approximation around a
//! chosen origin using the mean Earth radius. At event scales (< 10 km) the
//! planar distances agree with great-circle distances to better than 0.2%.

use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Largest great-circle distance from the frame origin accepted by [`to_enu`].
pub const MAX_FRAME_RADIUS_M: f64 = 100_000.0;

pub const DEFAULT_SEGMENTS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeoError {
    #[error("invalid coordinate")]
    InvalidCoordinate,
    #[error("point is {distance_m:.0} m from the frame origin (limit 100 km)")]
    OutOfFrame { distance_m: f64 },
    #[error("degenerate annulus: r_min {r_min} >= r_max {r_max}")]
    DegenerateAnnulus { r_min: f64, r_max: f64 },
    #[error("annulus needs at least 16 segments, got {0}")]
    TooFewSegments(usize),
    #[error("2a = {two_a} m is not below the focal separation {separation} m")]
    InfeasibleSeparation { two_a: f64, separation: f64 },
    #[error("invalid polyline parameters")]
    InvalidPolyline,
}

/// WGS84 latitude/longitude in degrees, elevation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub elev: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        GeoPoint {
            lat,
            lon,
            elev: 0.0,
        }
    }

    pub fn with_elev(lat: f64, lon: f64, elev: f64) -> Self {
        GeoPoint { lat, lon, elev }
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        let ok = self.lat.is_finite()
            && self.lon.is_finite()
            && self.elev.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon);
        if ok {
            Ok(())
        } else {
            Err(GeoError::InvalidCoordinate)
        }
    }

    /// Great-circle distance on the mean-radius sphere (haversine).
    pub fn haversine_m(&self, other: &GeoPoint) -> f64 {
        let (p1, p2) = (self.lat.to_radians(), other.lat.to_radians());
        let dp = p2 - p1;
        let dl = (other.lon - self.lon).to_radians();
        let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
    }
}

/// East/North/Up offsets in meters relative to a [`LocalFrame`] origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnuPoint {
    pub east: f64,
    pub north: f64,
    #[serde(default)]
    pub up: f64,
}

impl EnuPoint {
    pub const ORIGIN: EnuPoint = EnuPoint {
        east: 0.0,
        north: 0.0,
        up: 0.0,
    };

    pub fn new(east: f64, north: f64, up: f64) -> Self {
        EnuPoint { east, north, up }
    }

    pub fn planar(east: f64, north: f64) -> Self {
        EnuPoint {
            east,
            north,
            up: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.east.is_finite() && self.north.is_finite() && self.up.is_finite()
    }

    pub fn distance(&self, other: &EnuPoint) -> f64 {
        let (de, dn, du) = (
            self.east - other.east,
            self.north - other.north,
            self.up - other.up,
        );
        (de * de + dn * dn + du * du).sqrt()
    }

    pub fn horizontal_distance(&self, other: &EnuPoint) -> f64 {
        (self.east - other.east).hypot(self.north - other.north)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalFrame {
    pub origin: GeoPoint,
}

impl LocalFrame {
    pub fn new(origin: GeoPoint) -> Result<Self, GeoError> {
        origin.validate()?;
        if origin.lat.abs() >= 90.0 {
            return Err(GeoError::InvalidCoordinate);
        }
        Ok(LocalFrame { origin })
    }

    fn meters_per_degree_lat(&self) -> f64 {
        EARTH_RADIUS_M * PI / 180.0
    }

    fn meters_per_degree_lon(&self) -> f64 {
        self.meters_per_degree_lat() * self.origin.lat.to_radians().cos()
    }
}

pub fn to_enu(frame: &LocalFrame, p: &GeoPoint) -> Result<EnuPoint, GeoError> {
    p.validate()?;
    let distance_m = frame.origin.haversine_m(p);
    if distance_m > MAX_FRAME_RADIUS_M {
        return Err(GeoError::OutOfFrame { distance_m });
    }
    Ok(EnuPoint {
        east: (p.lon - frame.origin.lon) * frame.meters_per_degree_lon(),
        north: (p.lat - frame.origin.lat) * frame.meters_per_degree_lat(),
        up: p.elev - frame.origin.elev,
    })
}

pub fn from_enu(frame: &LocalFrame, e: &EnuPoint) -> Result<GeoPoint, GeoError> {
    if !e.is_finite() {
        return Err(GeoError::InvalidCoordinate);
    }
    Ok(GeoPoint {
        lat: frame.origin.lat + e.north / frame.meters_per_degree_lat(),
        lon: frame.origin.lon + e.east / frame.meters_per_degree_lon(),
        elev: frame.origin.elev + e.up,
    })
}

/// `[lon, lat]` pair as used by GeoJSON.
pub type LonLat = [f64; 2];

/// A polygon ring list: the outer ring first, then an optional hole.
/// Rings are closed (first vertex repeated last); the outer ring is
/// counter-clockwise and the hole clockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnulusPolygon {
    pub outer: Vec<LonLat>,
    pub inner: Option<Vec<LonLat>>,
}

impl AnnulusPolygon {
    pub fn rings(&self) -> Vec<Vec<LonLat>> {
        let mut rings = alloc::vec![self.outer.clone()];
        if let Some(inner) = &self.inner {
            rings.push(inner.clone());
        }
        rings
    }
}

fn circle_ring(
    frame: &LocalFrame,
    center: &EnuPoint,
    radius: f64,
    segments: usize,
    clockwise: bool,
) -> Result<Vec<LonLat>, GeoError> {
    let mut ring = Vec::with_capacity(segments + 1);
    for k in 0..segments {
        let mut phi = 2.0 * PI * k as f64 / segments as f64;
        if clockwise {
            phi = -phi;
        }
        let p = EnuPoint::new(
            center.east + radius * phi.cos(),
            center.north + radius * phi.sin(),
            center.up,
        );
        let g = from_enu(frame, &p)?;
        ring.push([g.lon, g.lat]);
    }
    ring.push(ring[0]);
    Ok(ring)
}

/// Ring polygon between `r_min` and `r_max` around `center`.
///
/// With `r_min == 0` the result is a disc with no hole.
pub fn annulus_polygon(
    frame: &LocalFrame,
    center: &EnuPoint,
    r_min: f64,
    r_max: f64,
    segments: usize,
) -> Result<AnnulusPolygon, GeoError> {
    if !(r_min.is_finite() && r_max.is_finite()) || r_min < 0.0 || !center.is_finite() {
        return Err(GeoError::InvalidCoordinate);
    }
    if r_min >= r_max {
        return Err(GeoError::DegenerateAnnulus { r_min, r_max });
    }
    if segments < 16 {
        return Err(GeoError::TooFewSegments(segments));
    }
    let outer = circle_ring(frame, center, r_max, segments, false)?;
    let inner = if r_min > 0.0 {
        Some(circle_ring(frame, center, r_min, segments, true)?)
    } else {
        None
    };
    Ok(AnnulusPolygon { outer, inner })
}

/// Sampled branch of a hyperbola.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperbolaPolyline {
    pub points: Vec<EnuPoint>,
    /// `two_a == 0`: the branch is the perpendicular bisector of the foci.
    pub degenerate: bool,
}

const MAX_POLYLINE_POINTS: usize = 200_000;

/// Points `P` with `|P - f_far| - |P - f_near| = two_a`, i.e. the branch
/// wrapping `f_near`, out to `extent` meters from the focal midpoint.
///
/// The curve is computed in the horizontal plane at the foci's mean height.
pub fn hyperbola_polyline(
    f_near: &EnuPoint,
    f_far: &EnuPoint,
    two_a: f64,
    extent: f64,
    step: f64,
) -> Result<HyperbolaPolyline, GeoError> {
    if !(f_near.is_finite() && f_far.is_finite())
        || !two_a.is_finite()
        || two_a < 0.0
        || !(extent > 0.0 && extent.is_finite())
        || !(step > 0.0 && step.is_finite())
    {
        return Err(GeoError::InvalidPolyline);
    }
    let separation = f_near.horizontal_distance(f_far);
    if two_a >= separation {
        return Err(GeoError::InfeasibleSeparation { two_a, separation });
    }

    let c = separation / 2.0;
    let a = two_a / 2.0;
    let b = (c * c - a * a).sqrt();
    let mid = EnuPoint::new(
        (f_near.east + f_far.east) / 2.0,
        (f_near.north + f_far.north) / 2.0,
        (f_near.up + f_far.up) / 2.0,
    );
    // u points from the midpoint toward the near focus, v is its left normal.
    let (ue, un) = ((f_near.east - mid.east) / c, (f_near.north - mid.north) / c);
    let (ve, vn) = (-un, ue);
    let at = |t: f64| {
        let (x, y) = (a * t.cosh(), b * t.sinh());
        EnuPoint::new(
            mid.east + x * ue + y * ve,
            mid.north + x * un + y * vn,
            mid.up,
        )
    };
    let radius = |t: f64| {
        let (x, y) = (a * t.cosh(), b * t.sinh());
        x.hypot(y)
    };

    let mut half = Vec::new();
    let mut t = 0.0_f64;
    loop {
        let speed = (a * a * t.sinh().powi(2) + b * b * t.cosh().powi(2)).sqrt();
        t += step / speed;
        if radius(t) > extent || half.len() >= MAX_POLYLINE_POINTS / 2 {
            break;
        }
        half.push(t);
    }

    let mut points = Vec::with_capacity(2 * half.len() + 1);
    points.extend(half.iter().rev().map(|&t| at(-t)));
    points.push(at(0.0));
    points.extend(half.iter().map(|&t| at(t)));
    Ok(HyperbolaPolyline {
        points,
        degenerate: two_a == 0.0,
    })
}
