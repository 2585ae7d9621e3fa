//! Synthetic planar grid networks.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::graph::{EdgeRecord, GraphFile, NodeRecord};
use super::{NetworkError, RoadGraph};
use crate::geo::{haversine, BoundingBox, LatLon};
use crate::scalar::Scalar;

/// A node path whose edges (both directions) get a fixed free-flow speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corridor {
    pub nodes: Vec<String>,
    pub speed_mps: f64,
}

/// Row/column dimensions of a grid laid over a bounding box.
///
/// Rows run south to north, columns west to east. Node ids are
/// `g{row:03}_{col:03}` so lexicographic id order equals (row, col) order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
    bbox: BoundingBox<f64>,
    lat_step: f64,
    lon_step: f64,
}

impl GridLayout {
    pub fn for_bbox(bbox: BoundingBox<f64>, spacing_m: f64) -> Result<Self, NetworkError> {
        if !(spacing_m.is_finite() && spacing_m > 0.0) {
            return Err(NetworkError::invalid("spacing", "must be > 0"));
        }
        if bbox.is_degenerate() {
            return Err(NetworkError::DegenerateBbox);
        }
        let mid_lat = (bbox.ne.lat + bbox.sw.lat) / 2.0;
        let height = haversine(bbox.sw, LatLon::new(bbox.ne.lat, bbox.sw.lon));
        let width = haversine(LatLon::new(mid_lat, bbox.sw.lon), LatLon::new(mid_lat, bbox.ne.lon));
        // Tolerate rounding when the extent is an exact multiple of the spacing.
        let count = |extent: f64| (extent / spacing_m + 1e-9).floor() as usize + 1;
        let (rows, cols) = (count(height), count(width));
        if rows < 2 && cols < 2 {
            return Err(NetworkError::invalid("spacing", "larger than the bounding box"));
        }
        Ok(Self {
            rows,
            cols,
            bbox,
            lat_step: (bbox.ne.lat - bbox.sw.lat) * spacing_m / height,
            lon_step: (bbox.ne.lon - bbox.sw.lon) * spacing_m / width,
        })
    }

    pub fn node_id(row: usize, col: usize) -> String {
        format!("g{row:03}_{col:03}")
    }

    pub fn position(&self, row: usize, col: usize) -> LatLon<f64> {
        LatLon::new(self.bbox.sw.lat + row as f64 * self.lat_step, self.bbox.sw.lon + col as f64 * self.lon_step)
    }

    /// Grid cell closest to a coordinate, clamped into the grid.
    pub fn cell_near(&self, p: LatLon<f64>) -> (usize, usize) {
        let r = ((p.lat - self.bbox.sw.lat) / self.lat_step).round().max(0.0) as usize;
        let c = ((p.lon - self.bbox.sw.lon) / self.lon_step).round().max(0.0) as usize;
        (r.min(self.rows - 1), c.min(self.cols - 1))
    }

    /// Four-neighbour staircase path approximating the straight segment
    /// between two cells.
    pub fn line_path(&self, from: (usize, usize), to: (usize, usize)) -> Vec<String> {
        let (mut r, mut c) = (from.0 as i64, from.1 as i64);
        let (r1, c1) = (to.0 as i64, to.1 as i64);
        let (dr, dc) = ((r1 - r).abs(), (c1 - c).abs());
        let (sr, sc) = ((r1 - r).signum(), (c1 - c).signum());
        let mut path = vec![Self::node_id(r as usize, c as usize)];
        let (mut moved_r, mut moved_c) = (0i64, 0i64);
        while r != r1 || c != c1 {
            // advance along whichever axis lags its share of the segment
            let take_row = moved_c == dc || (moved_r < dr && (moved_r + 1) * dc <= (moved_c + 1) * dr);
            if take_row {
                r += sr;
                moved_r += 1;
            } else {
                c += sc;
                moved_c += 1;
            }
            path.push(Self::node_id(r as usize, c as usize));
        }
        path
    }

    /// Closed rectangular loop through the four given corner rows/columns.
    pub fn ring_path(&self, south: usize, west: usize, north: usize, east: usize) -> Vec<String> {
        let mut path = Vec::new();
        for c in west..east {
            path.push(Self::node_id(south, c));
        }
        for r in south..north {
            path.push(Self::node_id(r, east));
        }
        for c in (west + 1..=east).rev() {
            path.push(Self::node_id(north, c));
        }
        for r in (south + 1..=north).rev() {
            path.push(Self::node_id(r, west));
        }
        path.push(Self::node_id(south, west));
        path
    }
}

/// Builds a bidirectional grid over `bbox` with nodes every `spacing_m` meters.
pub fn generate_grid_graph<S: Scalar>(
    bbox: BoundingBox<f64>,
    spacing_m: f64,
    default_speed_mps: f64,
    corridors: &[Corridor],
) -> Result<RoadGraph<S>, NetworkError> {
    if !(default_speed_mps.is_finite() && default_speed_mps > 0.0) {
        return Err(NetworkError::invalid("default_speed", "must be > 0"));
    }
    let layout = GridLayout::for_bbox(bbox, spacing_m)?;
    let mut file = GraphFile::default();
    for r in 0..layout.rows {
        for c in 0..layout.cols {
            let p = layout.position(r, c);
            file.nodes.push(NodeRecord { id: GridLayout::node_id(r, c), lat: p.lat, lon: p.lon });
        }
    }
    let mut push_pair = |a: (usize, usize), b: (usize, usize)| {
        let (ida, idb) = (GridLayout::node_id(a.0, a.1), GridLayout::node_id(b.0, b.1));
        let length_m = haversine(layout.position(a.0, a.1), layout.position(b.0, b.1));
        for (from, to) in [(&ida, &idb), (&idb, &ida)] {
            file.edges.push(EdgeRecord {
                id: format!("{from}>{to}"),
                from: from.clone(),
                to: to.clone(),
                length_m,
                speed_mps: default_speed_mps,
            });
        }
    };
    for r in 0..layout.rows {
        for c in 0..layout.cols {
            if c + 1 < layout.cols {
                push_pair((r, c), (r, c + 1));
            }
            if r + 1 < layout.rows {
                push_pair((r, c), (r + 1, c));
            }
        }
    }

    let index: HashMap<String, usize> = file.edges.iter().enumerate().map(|(i, e)| (e.id.clone(), i)).collect();
    for (k, corridor) in corridors.iter().enumerate() {
        if !(corridor.speed_mps.is_finite() && corridor.speed_mps > 0.0) {
            return Err(NetworkError::invalid(format!("corridors[{k}].speed"), "must be > 0"));
        }
        for pair in corridor.nodes.windows(2) {
            for (from, to) in [(&pair[0], &pair[1]), (&pair[1], &pair[0])] {
                let id = format!("{from}>{to}");
                let &i = index.get(&id).ok_or_else(|| {
                    NetworkError::invalid(format!("corridors[{k}]"), format!("{from} and {to} are not adjacent"))
                })?;
                file.edges[i].speed_mps = corridor.speed_mps;
            }
        }
    }
    RoadGraph::from_records(&file)
}

/// Directed edge ids covered by a corridor (both directions).
pub fn corridor_edge_ids(corridor: &Corridor) -> Vec<String> {
    corridor.nodes.windows(2).flat_map(|p| [format!("{}>{}", p[0], p[1]), format!("{}>{}", p[1], p[0])]).collect()
}
