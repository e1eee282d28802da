//! Hierarchical geocells.
//!
//! A level-`L` cell is one tile of a uniform `2^L × 2^L` grid laid over the
//! Equal Earth bounding rectangle `[-X_MAX, X_MAX) × [-Y_MAX, Y_MAX)`. Columns
//! count from the west edge, rows from the south edge. Cells are half-open, so
//! a point on a shared edge belongs to the cell to its east / north; the outer
//! east and north edges are folded into the last column / row.
//!
//! This is a planar quadtree, not S2: ids differ from S2 cell ids, and cells
//! are equal-area but not square on the ground.

use std::fmt;
use std::str::FromStr;

use super::equal_earth::{equal_earth_forward, equal_earth_inverse, ProjectedPoint, X_MAX, Y_MAX};
use super::{haversine_distance, GeoCoordinate, EARTH_RADIUS_M};
use crate::error::{Error, Result};

pub const MAX_LEVEL: u8 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId {
    level: u8,
    col: u32,
    row: u32,
}

impl CellId {
    pub fn new(level: u8, col: u32, row: u32) -> Result<Self> {
        if level > MAX_LEVEL {
            return Err(Error::Domain(format!("cell level {level} > {MAX_LEVEL}")));
        }
        let n = 1u64 << level;
        if col as u64 >= n || row as u64 >= n {
            return Err(Error::Domain(format!(
                "cell index ({col}, {row}) outside {n}x{n} grid at level {level}"
            )));
        }
        Ok(Self { level, col, row })
    }

    pub fn root() -> Self {
        Self {
            level: 0,
            col: 0,
            row: 0,
        }
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn col(&self) -> u32 {
        self.col
    }

    pub fn row(&self) -> u32 {
        self.row
    }

    pub fn parent(&self) -> Option<Self> {
        (self.level > 0).then(|| Self {
            level: self.level - 1,
            col: self.col / 2,
            row: self.row / 2,
        })
    }

    /// Children in (col, row) order: SW, SE, NW, NE.
    pub fn children(&self) -> Option<[Self; 4]> {
        if self.level >= MAX_LEVEL {
            return None;
        }
        let (c, r, l) = (self.col * 2, self.row * 2, self.level + 1);
        let child = |dc, dr| Self {
            level: l,
            col: c + dc,
            row: r + dr,
        };
        Some([child(0, 0), child(1, 0), child(0, 1), child(1, 1)])
    }

    /// Planar width and height of cells at this level.
    pub fn planar_size(&self) -> (f64, f64) {
        let n = (1u64 << self.level) as f64;
        (2.0 * X_MAX / n, 2.0 * Y_MAX / n)
    }

    /// Planar bounds `(x0, y0, x1, y1)`.
    pub fn planar_bounds(&self) -> (f64, f64, f64, f64) {
        let (w, h) = self.planar_size();
        let x0 = -X_MAX + self.col as f64 * w;
        let y0 = -Y_MAX + self.row as f64 * h;
        (x0, y0, x0 + w, y0 + h)
    }

    pub fn planar_center(&self) -> ProjectedPoint {
        let (x0, y0, x1, y1) = self.planar_bounds();
        ProjectedPoint::new(0.5 * (x0 + x1), 0.5 * (y0 + y1))
    }

    /// Half of the cell's corner-to-corner ground distance, in meters.
    ///
    /// Falls back to the planar diagonal scaled by the Earth radius when a
    /// corner lies outside the projection outline.
    pub fn half_diagonal_m(&self) -> f64 {
        let (x0, y0, x1, y1) = self.planar_bounds();
        let sw = equal_earth_inverse(ProjectedPoint::new(x0, y0));
        let ne = equal_earth_inverse(ProjectedPoint::new(x1, y1));
        match (sw, ne) {
            (Ok(a), Ok(b)) => 0.5 * haversine_distance(a, b),
            _ => 0.5 * (x1 - x0).hypot(y1 - y0) * EARTH_RADIUS_M,
        }
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}:{}:{}", self.level, self.col, self.row)
    }
}

impl FromStr for CellId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("malformed cell id {s:?}"));
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let mut parts = rest.split(':');
        let level = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let col = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let row = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        CellId::new(level, col, row)
    }
}

fn grid_index(v: f64, half_extent: f64, n: u64) -> u32 {
    let t = ((v + half_extent) / (2.0 * half_extent) * n as f64).floor();
    (t.max(0.0) as u64).min(n - 1) as u32
}

/// Cell containing the projected coordinate at the given level.
pub fn cell_of(c: GeoCoordinate, level: u8) -> Result<CellId> {
    if level > MAX_LEVEL {
        return Err(Error::Domain(format!("cell level {level} > {MAX_LEVEL}")));
    }
    let p = equal_earth_forward(c);
    let n = 1u64 << level;
    Ok(CellId {
        level,
        col: grid_index(p.x, X_MAX, n),
        row: grid_index(p.y, Y_MAX, n),
    })
}

/// Inverse projection of the planar cell center.
///
/// Near the rectangle's corners the center can fall outside the projection
/// outline, in which case a domain error is returned.
pub fn cell_centroid(id: CellId) -> Result<GeoCoordinate> {
    equal_earth_inverse(id.planar_center())
}
