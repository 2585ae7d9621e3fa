//! Geographic helpers.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Mean Earth radius in meters used for every great-circle distance.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// A WGS84 coordinate in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon<S = f64> {
    pub lat: S,
    pub lon: S,
}

impl<S: Scalar> LatLon<S> {
    pub fn new(lat: S, lon: S) -> Self {
        Self { lat, lon }
    }
}

/// Great-circle distance in meters.
pub fn haversine<S: Scalar>(a: LatLon<S>, b: LatLon<S>) -> S {
    let two = S::of(2.0);
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / two).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / two).sin().powi(2);
    two * S::of(EARTH_RADIUS_M) * h.sqrt().min(S::one()).asin()
}

/// Axis-aligned lat/lon rectangle given by its north-east and south-west corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox<S = f64> {
    pub ne: LatLon<S>,
    pub sw: LatLon<S>,
}

impl<S: Scalar> BoundingBox<S> {
    pub fn new(ne: LatLon<S>, sw: LatLon<S>) -> Self {
        Self { ne, sw }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.ne.lat > self.sw.lat && self.ne.lon > self.sw.lon)
    }

    pub fn contains(&self, p: LatLon<S>) -> bool {
        p.lat >= self.sw.lat && p.lat <= self.ne.lat && p.lon >= self.sw.lon && p.lon <= self.ne.lon
    }

    pub fn center(&self) -> LatLon<S> {
        let two = S::of(2.0);
        LatLon::new((self.ne.lat + self.sw.lat) / two, (self.ne.lon + self.sw.lon) / two)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_degree_of_latitude() {
        let d: f64 = haversine(LatLon::new(51.0, 5.0), LatLon::new(52.0, 5.0));
        // R * pi / 180
        assert!((d - 111_194.926_644_558_73).abs() < 1e-6);
    }

    #[test]
    fn zero_distance() {
        let p = LatLon::new(51.44, 5.47);
        assert_eq!(haversine(p, p), 0.0);
    }

    #[test]
    fn bbox_containment() {
        let b = BoundingBox::new(LatLon::new(2.0, 2.0), LatLon::new(1.0, 1.0));
        assert!(b.contains(LatLon::new(1.5, 1.5)));
        assert!(!b.contains(LatLon::new(2.5, 1.5)));
        assert!(!b.is_degenerate());
        assert!(BoundingBox::new(LatLon::new(1.0, 2.0), LatLon::new(1.0, 1.0)).is_degenerate());
    }
}
