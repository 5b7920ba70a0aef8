//! Spherical-earth geodesy: WGS84 points, a local east/north tangent plane,
//! great-circle distances and compass bearings.
//!
//! All metric computations in the crate (ray intersections, clustering, the
//! map prior) run in the east/north plane of a [`LocalFrame`]. Points are
//! converted back to latitude/longitude only for reporting.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Mean earth radius used for every spherical computation, in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Largest distance from the frame origin at which [`LocalFrame::to_enu`]
/// accepts a point.
pub const MAX_FRAME_DISTANCE_M: f64 = 10_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeodesyError {
    #[error("latitude {0} outside [-90, 90]")]
    InvalidLatitude(f64),
    #[error("non-finite coordinate ({lat}, {lon})")]
    NonFinite { lat: f64, lon: f64 },
    #[error("point is {distance_m:.1} m from the frame origin (limit {limit_m} m)")]
    DistanceExceeded { distance_m: f64, limit_m: f64 },
}

/// Normalizes a longitude in degrees to `[-180, 180)`.
pub fn normalize_lon(lon: f64) -> f64 {
    let l = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if l >= 180.0 {
        l - 360.0
    } else {
        l
    }
}

/// Wraps an angle difference in degrees to `(-180, 180]`.
pub fn wrap_angle_deg(a: f64) -> f64 {
    let w = a.rem_euclid(360.0);
    if w > 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// A WGS84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    /// Validates the latitude and normalizes the longitude to `[-180, 180)`.
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeodesyError> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(GeodesyError::NonFinite { lat, lon });
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeodesyError::InvalidLatitude(lat));
        }
        Ok(Self {
            lat,
            lon: normalize_lon(lon),
        })
    }

    /// Mean of a set of points, computed on raw degrees. Meant for
    /// city-scale sets that do not straddle the antimeridian.
    pub fn centroid(points: &[GeoPoint]) -> Option<GeoPoint> {
        if points.is_empty() {
            return None;
        }
        let n = points.len() as f64;
        let lat = points.iter().map(|p| p.lat).sum::<f64>() / n;
        let lon = points.iter().map(|p| p.lon).sum::<f64>() / n;
        GeoPoint::new(lat, lon).ok()
    }
}

/// Great-circle distance in meters on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    haversine_with_radius(a, b, EARTH_RADIUS_M)
}

pub fn haversine_with_radius(a: GeoPoint, b: GeoPoint, radius: f64) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let s_lat = (dlat * 0.5).sin();
    let s_lon = (dlon * 0.5).sin();
    let h = (s_lat * s_lat + lat1.cos() * lat2.cos() * s_lon * s_lon).clamp(0.0, 1.0);
    2.0 * radius * h.sqrt().atan2((1.0 - h).sqrt())
}

/// Meters east (`x`) and north (`y`) of a [`LocalFrame`] origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnuPoint {
    pub x: f64,
    pub y: f64,
}

impl EnuPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(&self, other: &EnuPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn distance_sq(&self, other: &EnuPoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Equidistant tangent-plane projection about a fixed origin.
///
/// `x = Δlon·cos(lat₀)·R·π/180`, `y = Δlat·R·π/180`. The approximation is
/// only accepted within [`MAX_FRAME_DISTANCE_M`] of the origin; inside 2 km
/// the projected norm agrees with the Haversine distance to well under 0.1%.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalFrame {
    pub origin: GeoPoint,
    pub earth_radius: f64,
}

impl LocalFrame {
    pub fn new(origin: GeoPoint) -> Self {
        Self {
            origin,
            earth_radius: EARTH_RADIUS_M,
        }
    }

    pub fn with_radius(origin: GeoPoint, earth_radius: f64) -> Self {
        Self {
            origin,
            earth_radius,
        }
    }

    fn meters_per_degree(&self) -> f64 {
        self.earth_radius * PI / 180.0
    }

    /// Projects `p`, rejecting points farther than 10 km from the origin.
    pub fn to_enu(&self, p: GeoPoint) -> Result<EnuPoint, GeodesyError> {
        let d = haversine_with_radius(self.origin, p, self.earth_radius);
        if d > MAX_FRAME_DISTANCE_M {
            return Err(GeodesyError::DistanceExceeded {
                distance_m: d,
                limit_m: MAX_FRAME_DISTANCE_M,
            });
        }
        Ok(self.project(p))
    }

    /// Same formulas as [`to_enu`](Self::to_enu) without the distance check.
    pub fn project(&self, p: GeoPoint) -> EnuPoint {
        let k = self.meters_per_degree();
        let dlon = normalize_lon(p.lon - self.origin.lon);
        EnuPoint {
            x: dlon * self.origin.lat.to_radians().cos() * k,
            y: (p.lat - self.origin.lat) * k,
        }
    }

    pub fn from_enu(&self, e: EnuPoint) -> GeoPoint {
        let k = self.meters_per_degree();
        let lat = self.origin.lat + e.y / k;
        let lon = self.origin.lon + e.x / (k * self.origin.lat.to_radians().cos());
        GeoPoint {
            lat: lat.clamp(-90.0, 90.0),
            lon: normalize_lon(lon),
        }
    }
}

/// Compass bearing in degrees clockwise from true north, kept in `[0, 360)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(from = "f64", into = "f64")]
pub struct Bearing(f64);

impl From<f64> for Bearing {
    fn from(deg: f64) -> Self {
        Bearing::new(deg)
    }
}

impl From<Bearing> for f64 {
    fn from(b: Bearing) -> f64 {
        b.0
    }
}

impl Bearing {
    pub fn new(deg: f64) -> Self {
        Self(Self::normalize(deg))
    }

    pub fn normalize(deg: f64) -> f64 {
        let b = deg.rem_euclid(360.0);
        // rem_euclid of a tiny negative value rounds up to 360.0
        if b >= 360.0 {
            0.0
        } else {
            b
        }
    }

    pub fn degrees(self) -> f64 {
        self.0
    }

    pub fn radians(self) -> f64 {
        self.0.to_radians()
    }

    /// Signed difference `self - other` wrapped to `(-180, 180]`.
    pub fn diff(self, other: Bearing) -> f64 {
        wrap_angle_deg(self.0 - other.0)
    }

    /// Unit direction `(east, north)`.
    pub fn to_direction(self) -> (f64, f64) {
        bearing_to_direction(self)
    }

    /// Bearing of a direction vector `(east, north)`.
    pub fn from_direction(east: f64, north: f64) -> Self {
        Self::new(east.atan2(north).to_degrees())
    }
}

pub fn bearing_to_direction(b: Bearing) -> (f64, f64) {
    let (s, c) = b.radians().sin_cos();
    (s, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DUBLIN: (f64, f64) = (53.3498, -6.2603);

    fn dublin() -> GeoPoint {
        GeoPoint::new(DUBLIN.0, DUBLIN.1).unwrap()
    }

    // Textbook haversine on raw radians, kept separate from the library path.
    fn oracle_haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
        let r = 6_371_000.0_f64;
        let p1 = lat1 * PI / 180.0;
        let p2 = lat2 * PI / 180.0;
        let dp = p2 - p1;
        let dl = (lon2 - lon1) * PI / 180.0;
        let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * r * a.sqrt().asin()
    }

    #[test]
    fn haversine_identity_is_zero() {
        assert_eq!(haversine_distance(dublin(), dublin()), 0.0);
    }

    #[test]
    fn haversine_half_great_circle() {
        let d = haversine_distance(GeoPoint::new(0.0, 0.0).unwrap(), GeoPoint::new(0.0, 180.0).unwrap());
        assert!((d - PI * 6_371_000.0).abs() < 1e-6);
        assert!((d - 20_015_086.796).abs() < 1e-3);
    }

    #[test]
    fn haversine_matches_independent_oracle() {
        let a = dublin();
        let b = GeoPoint::new(53.3500, -6.2580).unwrap();
        let expected = oracle_haversine(53.3498, -6.2603, 53.3500, -6.2580);
        assert!((haversine_distance(a, b) - expected).abs() < 1e-6);
        assert!((expected - 154.274_306_033_320_2).abs() < 1e-6);
    }

    #[test]
    fn latitude_out_of_range_rejected() {
        assert_eq!(GeoPoint::new(91.0, 0.0), Err(GeodesyError::InvalidLatitude(91.0)));
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn longitude_normalized() {
        assert_eq!(GeoPoint::new(0.0, 180.0).unwrap().lon, -180.0);
        assert_eq!(GeoPoint::new(0.0, 190.0).unwrap().lon, -170.0);
        assert_eq!(GeoPoint::new(0.0, -180.0).unwrap().lon, -180.0);
    }

    #[test]
    fn origin_maps_to_zero() {
        let f = LocalFrame::new(dublin());
        assert_eq!(f.to_enu(dublin()).unwrap(), EnuPoint::new(0.0, 0.0));
        assert_eq!(f.from_enu(EnuPoint::new(0.0, 0.0)), dublin());
    }

    #[test]
    fn one_degree_north() {
        let f = LocalFrame::new(GeoPoint::new(0.0, 0.0).unwrap());
        let e = f.to_enu(GeoPoint::new(0.05, 0.0).unwrap()).unwrap();
        assert!((e.y - 0.05 * 111_194.926_644).abs() < 1e-3);
        // the 10 km limit keeps a full degree out of to_enu, project has no limit
        let e = f.project(GeoPoint::new(1.0, 0.0).unwrap());
        assert_eq!(e.x, 0.0);
        assert!((e.y - 111_194.93).abs() < 0.01);
        let back = f.from_enu(EnuPoint::new(0.0, 111_194.93));
        assert!((back.lat - 1.0).abs() < 1e-6);
        assert_eq!(back.lon, 0.0);
    }

    #[test]
    fn far_point_rejected() {
        let f = LocalFrame::new(dublin());
        let far = GeoPoint::new(DUBLIN.0 + 0.2, DUBLIN.1).unwrap();
        assert!(matches!(f.to_enu(far), Err(GeodesyError::DistanceExceeded { .. })));
    }

    #[test]
    fn bearing_directions() {
        let (x, y) = bearing_to_direction(Bearing::new(0.0));
        assert!(x.abs() < 1e-15 && (y - 1.0).abs() < 1e-15);
        let (x, y) = bearing_to_direction(Bearing::new(90.0));
        assert!((x - 1.0).abs() < 1e-15 && y.abs() < 1e-15);
        let (x, y) = bearing_to_direction(Bearing::new(225.0));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((x + h).abs() < 1e-12 && (y + h).abs() < 1e-12);
    }

    #[test]
    fn bearing_normalization_edges() {
        assert_eq!(Bearing::new(360.0).degrees(), 0.0);
        assert_eq!(Bearing::new(-1e-18).degrees(), 0.0);
        assert_eq!(Bearing::new(-90.0).degrees(), 270.0);
        assert_eq!(Bearing::new(10.0).diff(Bearing::new(350.0)), 20.0);
        assert_eq!(Bearing::new(0.0).diff(Bearing::new(180.0)), 180.0);
    }

    fn near_dublin(max_m: f64) -> impl Strategy<Value = GeoPoint> {
        (0.0..max_m, 0.0..360.0f64).prop_map(move |(r, b)| {
            let f = LocalFrame::new(dublin());
            let (dx, dy) = bearing_to_direction(Bearing::new(b));
            f.from_enu(EnuPoint::new(r * dx, r * dy))
        })
    }

    proptest! {
        #[test]
        fn haversine_symmetric_and_triangle(
            a in (-80.0..80.0f64, -179.0..179.0f64),
            b in (-80.0..80.0f64, -179.0..179.0f64),
            c in (-80.0..80.0f64, -179.0..179.0f64),
        ) {
            let a = GeoPoint::new(a.0, a.1).unwrap();
            let b = GeoPoint::new(b.0, b.1).unwrap();
            let c = GeoPoint::new(c.0, c.1).unwrap();
            let ab = haversine_distance(a, b);
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - haversine_distance(b, a)).abs() < 1e-6);
            prop_assert!(ab <= haversine_distance(a, c) + haversine_distance(c, b) + 1e-6);
        }

        #[test]
        fn enu_round_trip_within_5km(p in near_dublin(5_000.0)) {
            let f = LocalFrame::new(dublin());
            let back = f.from_enu(f.to_enu(p).unwrap());
            prop_assert!((back.lat - p.lat).abs() < 1e-9);
            prop_assert!((back.lon - p.lon).abs() < 1e-9);
        }

        #[test]
        fn enu_norm_agrees_with_haversine_within_2km(p in near_dublin(2_000.0)) {
            let f = LocalFrame::new(dublin());
            let d = haversine_distance(dublin(), p);
            let n = f.to_enu(p).unwrap().norm();
            prop_assert!((d - n).abs() <= 1e-3 * d + 1e-9);
        }

        // The equidistant approximation holds cos(lat) at its origin value,
        // so the centimeter bound is checked at a low-latitude origin.
        #[test]
        fn enu_norm_within_1cm_inside_1km(r in 0.0..1_000.0f64, b in 0.0..360.0f64, lat0 in -10.0..10.0f64) {
            let origin = GeoPoint::new(lat0, 30.0).unwrap();
            let f = LocalFrame::new(origin);
            let (dx, dy) = bearing_to_direction(Bearing::new(b));
            let p = f.from_enu(EnuPoint::new(r * dx, r * dy));
            let d = haversine_distance(origin, p);
            prop_assert!((d - f.to_enu(p).unwrap().norm()).abs() < 0.01);
        }

        #[test]
        fn bearing_normalize_idempotent(b in -1e4..1e4f64) {
            let n = Bearing::normalize(b);
            prop_assert!((0.0..360.0).contains(&n));
            prop_assert_eq!(Bearing::normalize(n), n);
        }

        #[test]
        fn direction_is_unit(b in -1e4..1e4f64) {
            let (x, y) = bearing_to_direction(Bearing::new(b));
            prop_assert!(((x * x + y * y).sqrt() - 1.0).abs() < 1e-12);
        }
    }
}
