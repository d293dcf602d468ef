//! Uniform 1-D grids of cells over a closed interval.
//!
//! A [`Grid`] is one axis of a rectangular discretization. Multi-dimensional
//! objects ([`crate::joint::JointDensity`], conditioning tables) hold one
//! `Grid` per axis. Densities store mass per cell (pdf value times cell
//! width), so integrals become plain sums over cells.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid lower bound {lower} must be strictly below upper bound {upper}")]
    EmptyInterval { lower: f64, upper: f64 },
    #[error("grid needs at least 2 cells, got {0}")]
    TooFewCells(usize),
    #[error("grid bounds must be finite, got [{lower}, {upper}]")]
    NonFiniteBounds { lower: f64, upper: f64 },
}

/// A uniform grid of `cells` cells covering `[lower, upper]`.
///
/// Cell `i` is the interval `[lower + i*w, lower + (i+1)*w]` with width
/// `w = (upper - lower) / cells`; its center is `lower + (i + 0.5) * w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    lower: f64,
    upper: f64,
    cells: usize,
}

impl Grid {
    pub fn new(lower: f64, upper: f64, cells: usize) -> Result<Self, GridError> {
        if !lower.is_finite() || !upper.is_finite() {
            return Err(GridError::NonFiniteBounds { lower, upper });
        }
        if lower >= upper {
            return Err(GridError::EmptyInterval { lower, upper });
        }
        if cells < 2 {
            return Err(GridError::TooFewCells(cells));
        }
        Ok(Grid { lower, upper, cells })
    }

    /// Grid whose cell centers are exactly `0, 1, ..., cells-1`.
    ///
    /// Convenient for tests phrased over integer supports.
    pub fn unit(cells: usize) -> Result<Self, GridError> {
        Grid::new(-0.5, cells as f64 - 0.5, cells)
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn width(&self) -> f64 {
        (self.upper - self.lower) / self.cells as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        debug_assert!(i < self.cells);
        self.lower + (i as f64 + 0.5) * self.width()
    }

    pub fn centers(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.cells).map(move |i| self.center(i))
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower && v <= self.upper
    }

    /// Cell index of `v`, or `None` if `v` lies outside the grid.
    /// The upper bound maps to the last cell.
    pub fn index_of(&self, v: f64) -> Option<usize> {
        if !self.contains(v) {
            return None;
        }
        let raw = ((v - self.lower) / self.width()) as usize;
        Some(raw.min(self.cells - 1))
    }

    /// Index of the cell whose center is nearest to `v`, clamping values
    /// outside the grid to the boundary cells.
    pub fn nearest(&self, v: f64) -> usize {
        if v <= self.lower {
            return 0;
        }
        if v >= self.upper {
            return self.cells - 1;
        }
        // round to nearest center
        let pos = (v - self.lower) / self.width() - 0.5;
        let i = pos.round();
        (i.max(0.0) as usize).min(self.cells - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn centers_are_strictly_increasing() {
        let g = Grid::new(0.0, 300.0, 300).unwrap();
        let centers: Vec<f64> = g.centers().collect();
        assert_eq!(centers.len(), 300);
        for w in centers.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert_abs_diff_eq!(centers[0], 0.5);
        assert_abs_diff_eq!(centers[299], 299.5);
    }

    #[test]
    fn unit_grid_centers_are_integers() {
        let g = Grid::unit(4).unwrap();
        let centers: Vec<f64> = g.centers().collect();
        assert_eq!(centers, vec![0.0, 1.0, 2.0, 3.0]);
        assert_abs_diff_eq!(g.width(), 1.0);
    }

    #[test]
    fn invalid_grids_are_rejected() {
        assert!(matches!(
            Grid::new(1.0, 1.0, 4),
            Err(GridError::EmptyInterval { .. })
        ));
        assert!(matches!(
            Grid::new(2.0, 1.0, 4),
            Err(GridError::EmptyInterval { .. })
        ));
        assert!(matches!(Grid::new(0.0, 1.0, 1), Err(GridError::TooFewCells(1))));
        assert!(matches!(
            Grid::new(f64::NAN, 1.0, 4),
            Err(GridError::NonFiniteBounds { .. })
        ));
    }

    #[test]
    fn index_lookup_handles_boundaries() {
        let g = Grid::new(0.0, 4.0, 4).unwrap();
        assert_eq!(g.index_of(0.0), Some(0));
        assert_eq!(g.index_of(3.999), Some(3));
        assert_eq!(g.index_of(4.0), Some(3));
        assert_eq!(g.index_of(-0.1), None);
        assert_eq!(g.index_of(4.1), None);
        assert_eq!(g.nearest(-10.0), 0);
        assert_eq!(g.nearest(10.0), 3);
        assert_eq!(g.nearest(1.4), 1); // centers at 0.5, 1.5, ...: 1.4 is nearest 1.5
    }
}
