//! WGS84 points, great-circle distance, and the planar boundary polygon.
//!
//! All geometry is done in one of two frames: spherical (haversine distances
//! between centroids, mean Earth radius 6,371 km) or a local equirectangular
//! frame in meters used for tessellation and point location. The local frame
//! is anchored at a fixed origin with the longitude scale taken at a fixed
//! reference latitude, so conversions are exact inverses of each other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Meters per degree of latitude on the reference sphere.
pub const M_PER_DEG_LAT: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

/// A WGS84 coordinate in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    /// Validates that `lat` is within [-90, 90] and `lon` within [-180, 180].
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !lat.is_finite() {
            return Err(Error::InvalidParameter(format!("latitude {lat} out of range")));
        }
        if !(-180.0..=180.0).contains(&lon) || !lon.is_finite() {
            return Err(Error::InvalidParameter(format!("longitude {lon} out of range")));
        }
        Ok(GeoPoint { lat, lon })
    }
}

/// Haversine great-circle distance in meters.
pub fn great_circle_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();
    let s1 = (dlat / 2.0).sin();
    let s2 = (dlon / 2.0).sin();
    let h = s1 * s1 + lat1.cos() * lat2.cos() * s2 * s2;
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Local planar frame: x meters east of the origin, y meters north.
///
/// The longitude scale is fixed at `ref_lat`, so the mapping is a bijection
/// and independent of the points being converted.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LocalFrame {
    pub origin: GeoPoint,
    m_per_deg_lon: f64,
}

impl LocalFrame {
    pub fn new(origin: GeoPoint, ref_lat_deg: f64) -> Self {
        LocalFrame {
            origin,
            m_per_deg_lon: M_PER_DEG_LAT * ref_lat_deg.to_radians().cos(),
        }
    }

    pub fn to_local(&self, p: GeoPoint) -> (f64, f64) {
        (
            (p.lon - self.origin.lon) * self.m_per_deg_lon,
            (p.lat - self.origin.lat) * M_PER_DEG_LAT,
        )
    }

    pub fn to_geo(&self, x: f64, y: f64) -> GeoPoint {
        GeoPoint {
            lat: self.origin.lat + y / M_PER_DEG_LAT,
            lon: self.origin.lon + x / self.m_per_deg_lon,
        }
    }
}

/// Signed shoelace area of a closed ring given as (x, y) pairs; the last
/// point is implicitly joined back to the first.
pub(crate) fn signed_area(ring: &[(f64, f64)]) -> f64 {
    let n = ring.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = ring[i];
        let (x1, y1) = ring[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

/// Strict even-odd point-in-polygon test on local coordinates. Points on an
/// edge are classified by the crossing rule and may fall either way; callers
/// that need deterministic edge handling use the convex-cell test instead.
pub(crate) fn point_in_ring(ring: &[(f64, f64)], x: f64, y: f64) -> bool {
    let n = ring.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = ring[i];
        let (xj, yj) = ring[j];
        if (yi > y) != (yj > y) {
            let x_cross = xj + (y - yj) / (yi - yj) * (xi - xj);
            if x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn segments_properly_intersect(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    fn orient(p: (f64, f64), q: (f64, f64), r: (f64, f64)) -> f64 {
        (q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0)
    }
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    o1 * o2 < 0.0 && o3 * o4 < 0.0
}

/// A simple (non-self-intersecting) polygon on the sphere, stored as the
/// exterior ring in WGS84 with an attached local frame for planar work.
#[derive(Debug, Clone)]
pub struct Boundary {
    ring: Vec<GeoPoint>,
    frame: LocalFrame,
    local_ring: Vec<(f64, f64)>,
    bbox: (GeoPoint, GeoPoint),
}

impl Boundary {
    /// Builds a boundary from an exterior ring (closing vertex optional).
    ///
    /// Rejects rings with fewer than three distinct vertices, zero area, or
    /// properly self-intersecting edges.
    pub fn new(mut ring: Vec<GeoPoint>) -> Result<Self> {
        if ring.len() >= 2 {
            let first = ring[0];
            let last = *ring.last().unwrap();
            if first == last {
                ring.pop();
            }
        }
        if ring.len() < 3 {
            return Err(Error::InvalidBoundary("ring has fewer than 3 vertices".into()));
        }
        let (min_lat, max_lat) = ring
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.lat), hi.max(p.lat)));
        let (min_lon, max_lon) = ring
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.lon), hi.max(p.lon)));
        let sw = GeoPoint { lat: min_lat, lon: min_lon };
        let ne = GeoPoint { lat: max_lat, lon: max_lon };
        let frame = LocalFrame::new(sw, 0.5 * (min_lat + max_lat));
        let local_ring: Vec<(f64, f64)> = ring.iter().map(|&p| frame.to_local(p)).collect();
        let area = signed_area(&local_ring).abs();
        if area <= 0.0 {
            return Err(Error::InvalidBoundary("polygon has zero area".into()));
        }
        let n = local_ring.len();
        for i in 0..n {
            for j in (i + 1)..n {
                // skip adjacent edges (they share an endpoint)
                if j == i || (j + 1) % n == i || (i + 1) % n == j {
                    continue;
                }
                let (a, b) = (local_ring[i], local_ring[(i + 1) % n]);
                let (c, d) = (local_ring[j], local_ring[(j + 1) % n]);
                if segments_properly_intersect(a, b, c, d) {
                    return Err(Error::InvalidBoundary(format!(
                        "edges {i} and {j} intersect"
                    )));
                }
            }
        }
        Ok(Boundary { ring, frame, local_ring, bbox: (sw, ne) })
    }

    /// Axis-aligned rectangle from southwest to northeast corner.
    pub fn rectangle(sw: GeoPoint, ne: GeoPoint) -> Result<Self> {
        Boundary::new(vec![
            sw,
            GeoPoint { lat: sw.lat, lon: ne.lon },
            ne,
            GeoPoint { lat: ne.lat, lon: sw.lon },
        ])
    }

    /// Parses a GeoJSON-style polygon: either a bare `Polygon` geometry, a
    /// `Feature` wrapping one, or a `FeatureCollection` (first feature).
    /// Coordinates are `[lon, lat]` in WGS84; only the exterior ring is used.
    pub fn from_geojson_str(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)
            .map_err(|e| Error::InvalidBoundary(format!("not valid JSON: {e}")))?;
        let geom = extract_polygon_geometry(&v)
            .ok_or_else(|| Error::InvalidBoundary("no Polygon geometry found".into()))?;
        let coords = geom
            .get("coordinates")
            .and_then(|c| c.as_array())
            .and_then(|rings| rings.first())
            .and_then(|r| r.as_array())
            .ok_or_else(|| Error::InvalidBoundary("Polygon has no exterior ring".into()))?;
        let mut ring = Vec::with_capacity(coords.len());
        for pair in coords {
            let xy = pair
                .as_array()
                .filter(|a| a.len() >= 2)
                .ok_or_else(|| Error::InvalidBoundary("coordinate is not a [lon, lat] pair".into()))?;
            let lon = xy[0].as_f64().ok_or_else(|| Error::InvalidBoundary("non-numeric lon".into()))?;
            let lat = xy[1].as_f64().ok_or_else(|| Error::InvalidBoundary("non-numeric lat".into()))?;
            ring.push(GeoPoint::new(lat, lon).map_err(|e| Error::InvalidBoundary(e.to_string()))?);
        }
        Boundary::new(ring)
    }

    pub fn from_geojson_file(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Boundary::from_geojson_str(&s)
    }

    pub fn ring(&self) -> &[GeoPoint] {
        &self.ring
    }

    pub fn frame(&self) -> &LocalFrame {
        &self.frame
    }

    /// (southwest, northeast) corners of the bounding box.
    pub fn bbox(&self) -> (GeoPoint, GeoPoint) {
        self.bbox
    }

    pub fn area_km2(&self) -> f64 {
        signed_area(&self.local_ring).abs() / 1.0e6
    }

    /// Strict interior test in the boundary's local frame.
    pub fn contains_local(&self, x: f64, y: f64) -> bool {
        point_in_ring(&self.local_ring, x, y)
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        let (x, y) = self.frame.to_local(p);
        self.contains_local(x, y)
    }
}

fn extract_polygon_geometry(v: &serde_json::Value) -> Option<&serde_json::Value> {
    match v.get("type").and_then(|t| t.as_str()) {
        Some("Polygon") => Some(v),
        Some("Feature") => v.get("geometry").and_then(extract_polygon_geometry),
        Some("FeatureCollection") => v
            .get("features")
            .and_then(|f| f.as_array())
            .and_then(|fs| fs.iter().find_map(extract_polygon_geometry)),
        _ => None,
    }
}
