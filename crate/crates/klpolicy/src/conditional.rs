//! Families of densities over one variable indexed by conditioning grid
//! cells.
//!
//! A [`ConditionalDensity`] stores one normalized row per conditioning cell
//! (or per pair of cells when conditioning on two variables, e.g. the
//! transition model `f(x_k | u_k, x_{k-1})`). Rows are laid out row-major in
//! the order of the conditioning grids.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{self, Density, DensityError, NORMALIZATION_TOL};
use crate::grid::Grid;
use crate::joint::{flatten, unflatten};

#[derive(Debug, Error)]
pub enum ConditionalError {
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error("conditioning grids differ between the two conditional densities")]
    GridMismatch,
    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: DensityError,
    },
}

/// Diagnostic flag attached to a conditioning row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowFlag {
    /// The conditioning cell had zero marginal mass in the data; the row was
    /// filled with the uniform density.
    EmptyMarginal,
    /// The analytic row mean fell outside the target grid; the discretized
    /// row piles up at the boundary.
    OutOfGridMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalDensity {
    cond: Vec<Grid>,
    target: Grid,
    /// Flattened rows: `rows[r * target.cells() + t]`.
    rows: Vec<f64>,
    /// `(row index, flag)` pairs, sorted by row index.
    flags: Vec<(usize, RowFlag)>,
}

impl ConditionalDensity {
    pub(crate) fn from_parts(
        cond: Vec<Grid>,
        target: Grid,
        rows: Vec<f64>,
        mut flags: Vec<(usize, RowFlag)>,
    ) -> Self {
        flags.sort_by_key(|(r, _)| *r);
        ConditionalDensity { cond, target, rows, flags }
    }

    /// Builds a conditional density from explicit rows, validating that each
    /// row is a density (nonnegative, sums to 1 within tolerance).
    pub fn from_rows(
        cond: Vec<Grid>,
        target: Grid,
        rows: Vec<f64>,
    ) -> Result<Self, ConditionalError> {
        let n_rows: usize = cond.iter().map(|g| g.cells()).product();
        let nt = target.cells();
        if rows.len() != n_rows * nt {
            return Err(ConditionalError::Density(DensityError::LengthMismatch {
                got: rows.len(),
                expected: n_rows * nt,
            }));
        }
        let mut rows = rows;
        for r in 0..n_rows {
            let row = &mut rows[r * nt..(r + 1) * nt];
            for (i, &m) in row.iter().enumerate() {
                if !m.is_finite() {
                    return Err(ConditionalError::Row {
                        row: r,
                        source: DensityError::NonFiniteMass { cell: i },
                    });
                }
                if m < 0.0 {
                    return Err(ConditionalError::Row {
                        row: r,
                        source: DensityError::NegativeMass { cell: i, value: m },
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > NORMALIZATION_TOL {
                return Err(ConditionalError::Row {
                    row: r,
                    source: DensityError::NotNormalized { sum },
                });
            }
            if sum != 1.0 {
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        Ok(ConditionalDensity::from_parts(cond, target, rows, Vec::new()))
    }

    /// Builds rows by evaluating a closure per conditioning cell tuple.
    /// The closure receives the conditioning cell centers and must return a
    /// valid mass vector over the target grid.
    pub fn from_fn<F>(cond: Vec<Grid>, target: Grid, mut f: F) -> Self
    where
        F: FnMut(&[f64]) -> Vec<f64>,
    {
        let cond_shape: Vec<usize> = cond.iter().map(|g| g.cells()).collect();
        let n_rows: usize = cond_shape.iter().product();
        let nt = target.cells();
        let mut rows = Vec::with_capacity(n_rows * nt);
        for r in 0..n_rows {
            let idx = unflatten(r, &cond_shape);
            let centers: Vec<f64> = idx
                .iter()
                .zip(&cond)
                .map(|(&i, g)| g.center(i))
                .collect();
            let row = f(&centers);
            assert_eq!(row.len(), nt, "row length must match target grid");
            rows.extend_from_slice(&row);
        }
        ConditionalDensity::from_parts(cond, target, rows, Vec::new())
    }

    pub fn cond_grids(&self) -> &[Grid] {
        &self.cond
    }

    pub fn target_grid(&self) -> &Grid {
        &self.target
    }

    pub fn n_rows(&self) -> usize {
        self.cond.iter().map(|g| g.cells()).product()
    }

    fn cond_shape(&self) -> Vec<usize> {
        self.cond.iter().map(|g| g.cells()).collect()
    }

    pub fn row_index(&self, idx: &[usize]) -> usize {
        flatten(idx, &self.cond_shape())
    }

    /// Mass vector of the row for the given conditioning cell indices.
    pub fn row(&self, idx: &[usize]) -> &[f64] {
        self.row_at(self.row_index(idx))
    }

    /// Mass vector of the row at a flat row index.
    pub fn row_at(&self, r: usize) -> &[f64] {
        let nt = self.target.cells();
        &self.rows[r * nt..(r + 1) * nt]
    }

    /// The row as an owned [`Density`].
    pub fn row_density(&self, idx: &[usize]) -> Density {
        Density::new(self.target.clone(), self.row(idx).to_vec())
            .expect("rows are valid by construction")
    }

    pub fn flags(&self) -> &[(usize, RowFlag)] {
        &self.flags
    }

    pub(crate) fn push_flag(&mut self, row: usize, flag: RowFlag) {
        self.flags.push((row, flag));
        self.flags.sort_by_key(|(r, _)| *r);
    }

    /// Applies a support floor to every row (see
    /// [`Density::with_support_floor`]).
    pub fn with_support_floor(&self, floor: f64) -> ConditionalDensity {
        if floor <= 0.0 {
            return self.clone();
        }
        let nt = self.target.cells();
        let mut rows = self.rows.clone();
        for r in 0..self.n_rows() {
            let row = &mut rows[r * nt..(r + 1) * nt];
            for v in row.iter_mut() {
                if *v == 0.0 {
                    *v = floor;
                }
            }
            let sum: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        ConditionalDensity {
            cond: self.cond.clone(),
            target: self.target.clone(),
            rows,
            flags: self.flags.clone(),
        }
    }

    /// Per-row `KL(f_row || g_row)`, the alpha-hat table of the backward
    /// recursion. Errors identify the offending conditioning row.
    pub fn kl_conditional(&self, g: &ConditionalDensity) -> Result<Vec<f64>, ConditionalError> {
        if self.cond != g.cond || self.target != g.target {
            return Err(ConditionalError::GridMismatch);
        }
        let nt = self.target.cells();
        let mut out = Vec::with_capacity(self.n_rows());
        for r in 0..self.n_rows() {
            let f_row = &self.rows[r * nt..(r + 1) * nt];
            let g_row = &g.rows[r * nt..(r + 1) * nt];
            let kl = density::kl_between(f_row, g_row)
                .map_err(|source| ConditionalError::Row { row: r, source })?;
            out.push(kl);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(n: usize) -> Grid {
        Grid::unit(n).unwrap()
    }

    #[test]
    fn kl_conditional_identity_is_zero_table() {
        let c = ConditionalDensity::from_rows(
            vec![grid(2)],
            grid(2),
            vec![0.3, 0.7, 0.5, 0.5],
        )
        .unwrap();
        let table = c.kl_conditional(&c).unwrap();
        assert_eq!(table, vec![0.0, 0.0]);
    }

    #[test]
    fn kl_conditional_per_row_values() {
        let f = ConditionalDensity::from_rows(
            vec![grid(2)],
            grid(2),
            vec![0.5, 0.5, 0.5, 0.5],
        )
        .unwrap();
        let g = ConditionalDensity::from_rows(
            vec![grid(2)],
            grid(2),
            vec![0.25, 0.75, 0.5, 0.5],
        )
        .unwrap();
        let table = f.kl_conditional(&g).unwrap();
        assert_abs_diff_eq!(table[0], 0.14384103622589045, epsilon = 1e-15);
        assert_abs_diff_eq!(table[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn kl_conditional_identifies_offending_row() {
        let f = ConditionalDensity::from_rows(
            vec![grid(2)],
            grid(2),
            vec![0.5, 0.5, 0.5, 0.5],
        )
        .unwrap();
        let g = ConditionalDensity::from_rows(
            vec![grid(2)],
            grid(2),
            vec![0.5, 0.5, 1.0, 0.0],
        )
        .unwrap();
        match f.kl_conditional(&g) {
            Err(ConditionalError::Row { row: 1, .. }) => {}
            other => panic!("expected row-1 violation, got {other:?}"),
        }
    }

    #[test]
    fn two_axis_conditioning_layout() {
        // cond grids (2, 3): row index = iu * 3 + ix
        let nt = 2;
        let rows: Vec<f64> = (0..6)
            .flat_map(|r| {
                let p = (r + 1) as f64 / 10.0;
                vec![p, 1.0 - p]
            })
            .collect();
        let c = ConditionalDensity::from_rows(vec![grid(2), grid(3)], grid(nt), rows).unwrap();
        assert_eq!(c.n_rows(), 6);
        assert_abs_diff_eq!(c.row(&[1, 2])[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(c.row(&[0, 0])[0], 0.1, epsilon = 1e-15);
    }

    #[test]
    fn from_rows_rejects_denormalized_rows() {
        let bad = ConditionalDensity::from_rows(
            vec![grid(2)],
            grid(2),
            vec![0.5, 0.6, 0.5, 0.5],
        );
        assert!(matches!(bad, Err(ConditionalError::Row { row: 0, .. })));
    }
}
