//! Hexagonal tessellation of a boundary polygon and point-in-cell location.
//!
//! Cells are regular flat-top hexagons on an axial lattice anchored at the
//! southwest corner of the boundary's bounding box. A lattice cell belongs to
//! the grid iff its centroid lies strictly inside the boundary polygon, so
//! boundary cells are clipped logically but kept whole. Location of points is
//! O(1): fractional axial coordinates are cube-rounded to the candidate cell
//! and its ring of neighbors, then resolved with an exact convex containment
//! test (boundary ties go to the lowest cell id).

use std::collections::HashMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::geo::{signed_area, Boundary, GeoPoint, LocalFrame};

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Axial neighbor offsets for flat-top hexagons.
const AXIAL_NEIGHBORS: [(i32, i32); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];

/// One hexagonal cell: dense id, centroid, vertex ring, and area.
#[derive(Debug, Clone)]
pub struct Cell {
    pub id: u32,
    pub centroid: GeoPoint,
    /// Six vertices in counterclockwise order; the ring closes implicitly.
    pub vertices: [GeoPoint; 6],
    pub area_km2: f64,
}

/// A hexagonal grid over a boundary polygon.
#[derive(Debug, Clone)]
pub struct HexGrid {
    cells: Vec<Cell>,
    nominal_cell_area_km2: f64,
    boundary: Boundary,
    frame: LocalFrame,
    side_m: f64,
    axial: Vec<(i32, i32)>,
    axial_index: HashMap<(i32, i32), u32>,
}

/// Hexagon side (circumradius) in meters for a given cell area in km².
fn side_from_area_km2(area_km2: f64) -> f64 {
    (area_km2 * 1.0e6 * 2.0 / (3.0 * SQRT3)).sqrt()
}

fn axial_center(side_m: f64, q: i32, r: i32) -> (f64, f64) {
    (
        side_m * 1.5 * q as f64,
        side_m * SQRT3 * (r as f64 + q as f64 / 2.0),
    )
}

fn axial_fractional(side_m: f64, x: f64, y: f64) -> (f64, f64) {
    let q = (2.0 / 3.0) * x / side_m;
    let r = (-x / 3.0 + SQRT3 / 3.0 * y) / side_m;
    (q, r)
}

fn cube_round(qf: f64, rf: f64) -> (i32, i32) {
    let xf = qf;
    let zf = rf;
    let yf = -xf - zf;
    let mut rx = xf.round();
    let mut ry = yf.round();
    let mut rz = zf.round();
    let dx = (rx - xf).abs();
    let dy = (ry - yf).abs();
    let dz = (rz - zf).abs();
    if dx > dy && dx > dz {
        rx = -ry - rz;
    } else if dy > dz {
        ry = -rx - rz;
    } else {
        rz = -rx - ry;
    }
    let _ = ry;
    (rx as i32, rz as i32)
}

fn hex_vertices_local(cx: f64, cy: f64, side_m: f64) -> [(f64, f64); 6] {
    let mut v = [(0.0, 0.0); 6];
    for (k, slot) in v.iter_mut().enumerate() {
        let ang = std::f64::consts::PI / 3.0 * k as f64;
        *slot = (cx + side_m * ang.cos(), cy + side_m * ang.sin());
    }
    v
}

/// Inclusive containment in a counterclockwise convex ring.
fn convex_contains(ring: &[(f64, f64)], x: f64, y: f64, eps: f64) -> bool {
    let n = ring.len();
    for i in 0..n {
        let (x0, y0) = ring[i];
        let (x1, y1) = ring[(i + 1) % n];
        let cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
        if cross < -eps {
            return false;
        }
    }
    true
}

/// Strict interior test: points on the ring count as outside.
fn strictly_inside(ring: &[(f64, f64)], x: f64, y: f64) -> bool {
    let n = ring.len();
    for i in 0..n {
        let (x0, y0) = ring[i];
        let (x1, y1) = ring[(i + 1) % n];
        let ex = x1 - x0;
        let ey = y1 - y0;
        let px = x - x0;
        let py = y - y0;
        let len2 = ex * ex + ey * ey;
        if len2 == 0.0 {
            continue;
        }
        let cross = ex * py - ey * px;
        let dot = ex * px + ey * py;
        if cross.abs() <= 1e-9 * len2.sqrt() && dot >= -1e-9 && dot <= len2 + 1e-9 {
            return false;
        }
    }
    crate::geo::point_in_ring(ring, x, y)
}

/// Tessellates `boundary` with hexagons of the given nominal area.
///
/// The lattice is anchored at the bounding-box southwest corner; a cell is
/// kept iff its centroid lies strictly inside the polygon. If the boundary is
/// smaller than a single cell the grid degenerates to the one lattice cell
/// containing the boundary's vertex centroid.
pub fn build_hex_grid(boundary: &Boundary, nominal_cell_area_km2: f64) -> Result<HexGrid> {
    if !(nominal_cell_area_km2 > 0.0) || !nominal_cell_area_km2.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "nominal cell area must be positive, got {nominal_cell_area_km2}"
        )));
    }
    let side_m = side_from_area_km2(nominal_cell_area_km2);
    let frame = *boundary.frame();
    let (sw, ne) = boundary.bbox();
    let (w, h) = frame.to_local(ne);
    debug_assert!({
        let o = frame.to_local(sw);
        o.0.abs() < 1e-9 && o.1.abs() < 1e-9
    });

    let q_max = (w / (1.5 * side_m)).floor() as i32 + 1;
    let mut selected: Vec<(i32, i32)> = Vec::new();
    for q in 0..=q_max {
        let r_lo = (-(q as f64) / 2.0).floor() as i32 - 1;
        let r_hi = (h / (SQRT3 * side_m) - q as f64 / 2.0).ceil() as i32 + 1;
        for r in r_lo..=r_hi {
            let (cx, cy) = axial_center(side_m, q, r);
            let (px, py) = frame.to_local(frame.to_geo(cx, cy));
            // exact round-trip by construction; test strict interior
            if boundary_strictly_contains(boundary, px, py) {
                selected.push((q, r));
            }
        }
    }

    if selected.is_empty() {
        // minimal cover: the lattice cell under the boundary's vertex centroid
        let ring = boundary.ring();
        let mut sx = 0.0;
        let mut sy = 0.0;
        for &p in ring {
            let (x, y) = frame.to_local(p);
            sx += x;
            sy += y;
        }
        let (qf, rf) = axial_fractional(side_m, sx / ring.len() as f64, sy / ring.len() as f64);
        selected.push(cube_round(qf, rf));
    }

    Ok(HexGrid::from_axial(selected, nominal_cell_area_km2, boundary.clone(), frame, side_m))
}

fn boundary_strictly_contains(boundary: &Boundary, x: f64, y: f64) -> bool {
    let ring: Vec<(f64, f64)> = boundary
        .ring()
        .iter()
        .map(|&p| boundary.frame().to_local(p))
        .collect();
    strictly_inside(&ring, x, y)
}

impl HexGrid {
    fn from_axial(
        axial: Vec<(i32, i32)>,
        nominal_cell_area_km2: f64,
        boundary: Boundary,
        frame: LocalFrame,
        side_m: f64,
    ) -> Self {
        let mut cells = Vec::with_capacity(axial.len());
        let mut axial_index = HashMap::with_capacity(axial.len());
        for (id, &(q, r)) in axial.iter().enumerate() {
            let (cx, cy) = axial_center(side_m, q, r);
            let verts_local = hex_vertices_local(cx, cy, side_m);
            let vertices: [GeoPoint; 6] =
                std::array::from_fn(|k| frame.to_geo(verts_local[k].0, verts_local[k].1));
            let area_km2 = signed_area(&verts_local).abs() / 1.0e6;
            cells.push(Cell {
                id: id as u32,
                centroid: frame.to_geo(cx, cy),
                vertices,
                area_km2,
            });
            axial_index.insert((q, r), id as u32);
        }
        HexGrid { cells, nominal_cell_area_km2, boundary, frame, side_m, axial, axial_index }
    }

    /// A free-standing lattice of exactly `n_cells` hexagons arranged in an
    /// approximately square block, anchored at `origin`. Used by the
    /// synthetic data generator and in tests.
    pub fn synthetic(n_cells: u32, cell_area_km2: f64, origin: GeoPoint) -> Result<HexGrid> {
        if n_cells == 0 {
            return Err(Error::InvalidParameter("n_cells must be positive".into()));
        }
        if !(cell_area_km2 > 0.0) {
            return Err(Error::InvalidParameter("cell area must be positive".into()));
        }
        let side_m = side_from_area_km2(cell_area_km2);
        // column pitch 1.5 s, row pitch sqrt(3) s: pick a near-square block
        let n_rows = ((n_cells as f64 / (SQRT3 / 1.5)).sqrt().ceil() as u32).max(1);
        let mut axial = Vec::with_capacity(n_cells as usize);
        let mut q = 0i32;
        'outer: loop {
            for row in 0..n_rows {
                // odd columns shift down half a row pitch in offset coords
                let r = row as i32 - (q - (q & 1)) / 2;
                axial.push((q, r));
                if axial.len() == n_cells as usize {
                    break 'outer;
                }
            }
            q += 1;
        }
        let frame = LocalFrame::new(origin, origin.lat);
        // enclosing rectangle, padded by one circumradius
        let mut max_x: f64 = 0.0;
        let mut max_y: f64 = 0.0;
        for &(q, r) in &axial {
            let (cx, cy) = axial_center(side_m, q, r);
            max_x = max_x.max(cx);
            max_y = max_y.max(cy);
        }
        let sw = frame.to_geo(-side_m, -side_m);
        let ne = frame.to_geo(max_x + side_m, max_y + side_m);
        let boundary = Boundary::rectangle(sw, ne)?;
        Ok(HexGrid::from_axial(axial, cell_area_km2, boundary, frame, side_m))
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, id: u32) -> &Cell {
        &self.cells[id as usize]
    }

    pub fn nominal_cell_area_km2(&self) -> f64 {
        self.nominal_cell_area_km2
    }

    pub fn boundary(&self) -> &Boundary {
        &self.boundary
    }

    pub fn side_m(&self) -> f64 {
        self.side_m
    }

    #[allow(dead_code)]
    pub(crate) fn frame(&self) -> &LocalFrame {
        &self.frame
    }

    pub(crate) fn centroid_local(&self, id: u32) -> (f64, f64) {
        let (q, r) = self.axial[id as usize];
        axial_center(self.side_m, q, r)
    }

    pub fn mean_cell_area_km2(&self) -> f64 {
        if self.cells.is_empty() {
            return 0.0;
        }
        self.cells.iter().map(|c| c.area_km2).sum::<f64>() / self.cells.len() as f64
    }

    /// Ids of border-sharing lattice neighbors present in the grid.
    pub fn contiguous_neighbors(&self, id: u32) -> Vec<u32> {
        let (q, r) = self.axial[id as usize];
        let mut out: Vec<u32> = AXIAL_NEIGHBORS
            .iter()
            .filter_map(|&(dq, dr)| self.axial_index.get(&(q + dq, r + dr)).copied())
            .collect();
        out.sort_unstable();
        out
    }

    /// The unique cell containing `p`, if any. Points on a shared edge or
    /// vertex resolve to the lowest cell id.
    pub fn locate(&self, p: GeoPoint) -> Option<u32> {
        let (x, y) = self.frame.to_local(p);
        let (qf, rf) = axial_fractional(self.side_m, x, y);
        let (q0, r0) = cube_round(qf, rf);
        let eps = 1e-9 * self.side_m;
        let mut best: Option<u32> = None;
        let mut candidates = [(q0, r0); 7];
        for (k, &(dq, dr)) in AXIAL_NEIGHBORS.iter().enumerate() {
            candidates[k + 1] = (q0 + dq, r0 + dr);
        }
        for &(q, r) in &candidates {
            if let Some(&id) = self.axial_index.get(&(q, r)) {
                let (cx, cy) = axial_center(self.side_m, q, r);
                let verts = hex_vertices_local(cx, cy, self.side_m);
                if convex_contains(&verts, x, y, eps) {
                    best = Some(match best {
                        Some(b) => b.min(id),
                        None => id,
                    });
                }
            }
        }
        best
    }

    /// Writes `id,lat,lon,area_km2` rows for every cell.
    pub fn write_cells_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "id,lat,lon,area_km2")?;
        for c in &self.cells {
            writeln!(out, "{},{},{},{}", c.id, c.centroid.lat, c.centroid.lon, c.area_km2)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{great_circle_distance, M_PER_DEG_LAT};

    fn square_boundary_km(side_km: f64) -> Boundary {
        let d = side_km * 1000.0 / M_PER_DEG_LAT;
        Boundary::rectangle(GeoPoint { lat: 0.0, lon: 0.0 }, GeoPoint { lat: d, lon: d }).unwrap()
    }

    /// Independent enumeration of lattice centroids strictly inside an
    /// axis-aligned square of side `side_m`, from first principles.
    fn oracle_count_square(side_m: f64, area_km2: f64) -> usize {
        let s = side_from_area_km2(area_km2);
        let mut count = 0;
        let mut q = 0;
        loop {
            let x = 1.5 * s * q as f64;
            if x >= side_m {
                break;
            }
            let mut r = -(q as f64 / 2.0).ceil() as i32 - 2;
            loop {
                let y = SQRT3 * s * (r as f64 + q as f64 / 2.0);
                if y >= side_m {
                    break;
                }
                if x > 0.0 && y > 0.0 {
                    count += 1;
                }
                r += 1;
            }
            q += 1;
        }
        count
    }

    #[test]
    fn unit_square_produces_seven_to_nine_cells() {
        let b = square_boundary_km(1.0);
        let grid = build_hex_grid(&b, 0.126).unwrap();
        assert!((7..=9).contains(&grid.n_cells()), "got {}", grid.n_cells());
        // the local frame of a 1 km square at the equator is metric to ~1e-8,
        // so the independent planar enumeration must agree exactly
        assert_eq!(grid.n_cells(), oracle_count_square(1000.0, 0.126));
    }

    #[test]
    fn city_sized_rectangle_matches_area_ratio() {
        // 313.82 km² rectangle: 18.46 km x 17.0 km
        let dx = 18.46 * 1000.0 / M_PER_DEG_LAT;
        let dy = 17.0 * 1000.0 / M_PER_DEG_LAT;
        let b = Boundary::rectangle(
            GeoPoint { lat: -3.9, lon: -38.6 },
            GeoPoint { lat: -3.9 + dy, lon: -38.6 + dx },
        )
        .unwrap();
        let grid = build_hex_grid(&b, 0.126).unwrap();
        let expected = b.area_km2() / 0.126;
        let n = grid.n_cells() as f64;
        assert!(
            (n - expected).abs() <= 0.05 * expected,
            "count {n} vs expected {expected}"
        );
    }

    #[test]
    fn boundary_smaller_than_one_cell_yields_single_cell() {
        let b = square_boundary_km(0.05);
        let grid = build_hex_grid(&b, 0.126).unwrap();
        assert_eq!(grid.n_cells(), 1);
    }

    #[test]
    fn ids_are_dense_and_areas_near_nominal() {
        let b = square_boundary_km(3.0);
        let grid = build_hex_grid(&b, 0.126).unwrap();
        for (i, c) in grid.cells().iter().enumerate() {
            assert_eq!(c.id as usize, i);
            assert!((c.area_km2 - 0.126).abs() <= 0.1 * 0.126);
            // centroid inside its own hexagon
            assert_eq!(grid.locate(c.centroid), Some(c.id));
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let b = square_boundary_km(2.0);
        let g1 = build_hex_grid(&b, 0.126).unwrap();
        let g2 = build_hex_grid(&b, 0.126).unwrap();
        assert_eq!(g1.n_cells(), g2.n_cells());
        for (a, b) in g1.cells().iter().zip(g2.cells()) {
            assert_eq!(a.centroid, b.centroid);
        }
    }

    #[test]
    fn locate_far_outside_is_none() {
        let b = square_boundary_km(1.0);
        let grid = build_hex_grid(&b, 0.126).unwrap();
        assert_eq!(grid.locate(GeoPoint { lat: 5.0, lon: 5.0 }), None);
    }

    #[test]
    fn locate_agrees_with_brute_force_containment() {
        let b = square_boundary_km(2.0);
        let grid = build_hex_grid(&b, 0.126).unwrap();
        let mut state = 42u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let (sw, ne) = b.bbox();
        for _ in 0..2000 {
            let p = GeoPoint {
                lat: sw.lat + next() * (ne.lat - sw.lat),
                lon: sw.lon + next() * (ne.lon - sw.lon),
            };
            let (x, y) = grid.frame().to_local(p);
            // brute force: strict containment over every cell's hexagon
            let mut hits = Vec::new();
            for c in grid.cells() {
                let (cx, cy) = grid.centroid_local(c.id);
                let verts = hex_vertices_local(cx, cy, grid.side_m());
                if strictly_inside(&verts, x, y) {
                    hits.push(c.id);
                }
            }
            assert!(hits.len() <= 1, "point in two strict interiors");
            if let Some(&id) = hits.first() {
                assert_eq!(grid.locate(p), Some(id));
                // interior points also minimize centroid distance
                let nearest = grid
                    .cells()
                    .iter()
                    .min_by(|a, b| {
                        great_circle_distance(a.centroid, p)
                            .partial_cmp(&great_circle_distance(b.centroid, p))
                            .unwrap()
                    })
                    .unwrap()
                    .id;
                assert_eq!(id, nearest);
            }
        }
    }

    #[test]
    fn interior_points_are_covered_exactly_once() {
        // sample away from the boundary so the containing lattice cell is
        // guaranteed to have been retained
        let b = square_boundary_km(3.0);
        let grid = build_hex_grid(&b, 0.126).unwrap();
        let margin = 2.0 * grid.side_m();
        let mut state = 7u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..10_000 {
            let x = margin + next() * (3000.0 - 2.0 * margin);
            let y = margin + next() * (3000.0 - 2.0 * margin);
            let p = grid.frame().to_geo(x, y);
            assert!(grid.locate(p).is_some(), "uncovered interior point ({x:.1},{y:.1})");
        }
    }

    #[test]
    fn synthetic_lattice_has_exact_cell_count_and_interior_degree_six() {
        let grid = HexGrid::synthetic(400, 0.126, GeoPoint { lat: 0.0, lon: 0.0 }).unwrap();
        assert_eq!(grid.n_cells(), 400);
        let six = grid
            .cells()
            .iter()
            .filter(|c| grid.contiguous_neighbors(c.id).len() == 6)
            .count();
        assert!(six > 200, "expected mostly interior cells, got {six}");
    }
}
