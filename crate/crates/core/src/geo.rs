//! Small geodesy helpers: great-circle distance and a local planar projection.

use crate::ingest::GeoPoint;

pub const EARTH_RADIUS_M: f64 = 6_371_008.8;
pub const METERS_PER_MILE: f64 = 1609.34;

pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Equirectangular projection anchored at `origin`, in meters.
#[derive(Debug, Clone, Copy)]
pub struct LocalProjection {
    origin: GeoPoint,
    cos_lat: f64,
}

impl LocalProjection {
    pub fn new(origin: GeoPoint) -> Self {
        Self {
            origin,
            cos_lat: origin.lat.to_radians().cos(),
        }
    }

    /// Anchored at the mean of `points`.
    pub fn centered_on(points: impl IntoIterator<Item = GeoPoint>) -> Self {
        let (mut lat, mut lon, mut n) = (0.0, 0.0, 0usize);
        for p in points {
            lat += p.lat;
            lon += p.lon;
            n += 1;
        }
        let n = n.max(1) as f64;
        Self::new(GeoPoint {
            lat: lat / n,
            lon: lon / n,
        })
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    pub fn project(&self, p: GeoPoint) -> (f64, f64) {
        let x = (p.lon - self.origin.lon).to_radians() * self.cos_lat * EARTH_RADIUS_M;
        let y = (p.lat - self.origin.lat).to_radians() * EARTH_RADIUS_M;
        (x, y)
    }

    pub fn unproject(&self, x: f64, y: f64) -> GeoPoint {
        GeoPoint {
            lat: self.origin.lat + (y / EARTH_RADIUS_M).to_degrees(),
            lon: self.origin.lon + (x / (EARTH_RADIUS_M * self.cos_lat)).to_degrees(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn haversine_one_degree_latitude() {
        let d = haversine_m(GeoPoint { lat: 36.0, lon: -86.0 }, GeoPoint { lat: 37.0, lon: -86.0 });
        assert!((d - 111_195.0).abs() < 50.0, "{d}");
    }

    #[test]
    fn projection_roundtrip() {
        let proj = LocalProjection::new(GeoPoint { lat: 36.16, lon: -86.78 });
        let p = GeoPoint { lat: 36.2, lon: -86.7 };
        let (x, y) = proj.project(p);
        let q = proj.unproject(x, y);
        assert!((p.lat - q.lat).abs() < 1e-12 && (p.lon - q.lon).abs() < 1e-12);
        // Planar distance agrees with great-circle distance at city scale.
        let planar = (x * x + y * y).sqrt();
        let sphere = haversine_m(proj.origin(), p);
        assert!((planar - sphere).abs() / sphere < 1e-3);
    }
}
