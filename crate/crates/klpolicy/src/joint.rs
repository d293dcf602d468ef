//! Multi-dimensional joint densities on rectangular grids.
//!
//! Mass is stored row-major (axis 0 slowest). Marginalization sums over
//! dropped axes; conditioning produces a [`ConditionalDensity`] with one row
//! per conditioning cell.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditional::{ConditionalDensity, RowFlag};
use crate::density::{self, Density, DensityError, NORMALIZATION_TOL};
use crate::grid::Grid;

#[derive(Debug, Error)]
pub enum JointError {
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error("axis {axis} out of range for a {ndim}-dimensional joint")]
    BadAxis { axis: usize, ndim: usize },
    #[error("kept axes must be a nonempty, duplicate-free subset of the joint's axes")]
    BadAxisSet,
    #[error("mass length {got} does not match grid shape product {expected}")]
    ShapeMismatch { got: usize, expected: usize },
}

/// A normalized nonnegative mass array over the product of `grids`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDensity {
    grids: Vec<Grid>,
    mass: Vec<f64>,
}

impl JointDensity {
    pub fn new(grids: Vec<Grid>, mass: Vec<f64>) -> Result<Self, JointError> {
        let expected: usize = grids.iter().map(|g| g.cells()).product();
        if mass.len() != expected {
            return Err(JointError::ShapeMismatch { got: mass.len(), expected });
        }
        for (i, &m) in mass.iter().enumerate() {
            if !m.is_finite() {
                return Err(DensityError::NonFiniteMass { cell: i }.into());
            }
            if m < 0.0 {
                return Err(DensityError::NegativeMass { cell: i, value: m }.into());
            }
        }
        let sum: f64 = mass.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(DensityError::NotNormalized { sum }.into());
        }
        Ok(Self::rescaled(grids, mass, sum))
    }

    /// Normalizes an arbitrary nonnegative array into a joint density.
    pub fn normalize(grids: Vec<Grid>, raw: Vec<f64>) -> Result<Self, JointError> {
        let expected: usize = grids.iter().map(|g| g.cells()).product();
        if raw.len() != expected {
            return Err(JointError::ShapeMismatch { got: raw.len(), expected });
        }
        for (i, &m) in raw.iter().enumerate() {
            if !m.is_finite() {
                return Err(DensityError::NonFiniteMass { cell: i }.into());
            }
            if m < 0.0 {
                return Err(DensityError::NegativeMass { cell: i, value: m }.into());
            }
        }
        let sum: f64 = raw.iter().sum();
        if sum == 0.0 {
            return Err(DensityError::AllZero.into());
        }
        Ok(Self::rescaled(grids, raw, sum))
    }

    fn rescaled(grids: Vec<Grid>, mut mass: Vec<f64>, sum: f64) -> Self {
        if sum != 1.0 {
            for m in &mut mass {
                *m /= sum;
            }
        }
        JointDensity { grids, mass }
    }

    /// Outer product of independent marginals.
    pub fn product(factors: &[&Density]) -> Self {
        let grids: Vec<Grid> = factors.iter().map(|d| d.grid().clone()).collect();
        let shape: Vec<usize> = grids.iter().map(|g| g.cells()).collect();
        let total: usize = shape.iter().product();
        let mut mass = vec![0.0; total];
        for (flat, m) in mass.iter_mut().enumerate() {
            let idx = unflatten(flat, &shape);
            *m = idx
                .iter()
                .zip(factors)
                .map(|(&i, d)| d.mass()[i])
                .product();
        }
        JointDensity { grids, mass }
    }

    pub fn ndim(&self) -> usize {
        self.grids.len()
    }

    pub fn grids(&self) -> &[Grid] {
        &self.grids
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn shape(&self) -> Vec<usize> {
        self.grids.iter().map(|g| g.cells()).collect()
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.mass[flatten(idx, &self.shape())]
    }

    /// Sums mass over all axes not in `kept`, preserving the order given in
    /// `kept`.
    pub fn marginalize(&self, kept: &[usize]) -> Result<JointDensity, JointError> {
        self.validate_axes(kept)?;
        let shape = self.shape();
        let out_grids: Vec<Grid> = kept.iter().map(|&a| self.grids[a].clone()).collect();
        let out_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
        let mut out = vec![0.0; out_shape.iter().product()];
        for (flat, &m) in self.mass.iter().enumerate() {
            let idx = unflatten(flat, &shape);
            let out_idx: Vec<usize> = kept.iter().map(|&a| idx[a]).collect();
            out[flatten(&out_idx, &out_shape)] += m;
        }
        // Total mass is preserved by construction; renormalize to absorb
        // floating-point drift.
        let sum: f64 = out.iter().sum();
        Ok(JointDensity::rescaled(out_grids, out, sum))
    }

    /// Marginal over a single axis, as a 1-D [`Density`].
    pub fn marginal_density(&self, axis: usize) -> Result<Density, JointError> {
        let j = self.marginalize(&[axis])?;
        Ok(Density::new(j.grids[0].clone(), j.mass)?)
    }

    /// Conditions the joint on the axes in `cond` (in the given order); the
    /// remaining axis becomes the row variable. Rows with zero conditioning
    /// marginal are filled with the uniform density and flagged.
    pub fn condition(&self, cond: &[usize]) -> Result<ConditionalDensity, JointError> {
        self.validate_axes(cond)?;
        if cond.len() != self.ndim() - 1 {
            // exactly one target axis must remain
            return Err(JointError::BadAxisSet);
        }
        let target_axis = (0..self.ndim())
            .find(|a| !cond.contains(a))
            .expect("one axis remains");
        let shape = self.shape();
        let cond_grids: Vec<Grid> = cond.iter().map(|&a| self.grids[a].clone()).collect();
        let cond_shape: Vec<usize> = cond.iter().map(|&a| shape[a]).collect();
        let target_grid = self.grids[target_axis].clone();
        let nt = target_grid.cells();
        let n_rows: usize = cond_shape.iter().product();

        let mut rows = vec![0.0; n_rows * nt];
        for (flat, &m) in self.mass.iter().enumerate() {
            let idx = unflatten(flat, &shape);
            let row_idx: Vec<usize> = cond.iter().map(|&a| idx[a]).collect();
            let r = flatten(&row_idx, &cond_shape);
            rows[r * nt + idx[target_axis]] += m;
        }
        let mut flags = Vec::new();
        for r in 0..n_rows {
            let row = &mut rows[r * nt..(r + 1) * nt];
            let sum: f64 = row.iter().sum();
            if sum == 0.0 {
                let u = 1.0 / nt as f64;
                row.fill(u);
                flags.push((r, RowFlag::EmptyMarginal));
            } else {
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        Ok(ConditionalDensity::from_parts(
            cond_grids,
            target_grid,
            rows,
            flags,
        ))
    }

    /// `KL(self || g)` over cells, with the usual `f ln f -> 0` convention.
    pub fn kl_divergence(&self, g: &JointDensity) -> Result<f64, JointError> {
        if self.grids != g.grids {
            return Err(DensityError::GridMismatch.into());
        }
        Ok(density::kl_between(&self.mass, &g.mass)?)
    }

    fn validate_axes(&self, axes: &[usize]) -> Result<(), JointError> {
        if axes.is_empty() {
            return Err(JointError::BadAxisSet);
        }
        for (i, &a) in axes.iter().enumerate() {
            if a >= self.ndim() {
                return Err(JointError::BadAxis { axis: a, ndim: self.ndim() });
            }
            if axes[..i].contains(&a) {
                return Err(JointError::BadAxisSet);
            }
        }
        Ok(())
    }
}

/// Decomposes `KL(f || g)` for 2-D joints into the marginal term on
/// `marginal_axis` plus the expected conditional term (the chain rule).
///
/// Returns `(marginal_kl, expected_conditional_kl)`.
pub fn chain_rule_terms(
    f: &JointDensity,
    g: &JointDensity,
    marginal_axis: usize,
) -> Result<(f64, f64), JointError> {
    if f.ndim() != 2 || g.ndim() != 2 {
        return Err(JointError::BadAxisSet);
    }
    if f.grids != g.grids {
        return Err(DensityError::GridMismatch.into());
    }
    if marginal_axis > 1 {
        return Err(JointError::BadAxis { axis: marginal_axis, ndim: 2 });
    }
    let f_marg = f.marginal_density(marginal_axis)?;
    let g_marg = g.marginal_density(marginal_axis)?;
    let term1 = f_marg.kl_divergence(&g_marg)?;

    // Expected conditional KL, computed from raw slices so that the
    // conditional rows of f and g are weighted by f's marginal.
    let other = 1 - marginal_axis;
    let shape = f.shape();
    let (ny, nz) = (shape[marginal_axis], shape[other]);
    let mut term2 = 0.0;
    for y in 0..ny {
        let fy = f_marg.mass()[y];
        if fy == 0.0 {
            continue;
        }
        let gy = g_marg.mass()[y];
        let mut row_kl = 0.0;
        for z in 0..nz {
            let mut idx = [0usize; 2];
            idx[marginal_axis] = y;
            idx[other] = z;
            let fm = f.at(&idx) / fy;
            if fm > 0.0 {
                if gy == 0.0 {
                    return Err(DensityError::AbsContinuityViolation {
                        cell: flatten(&idx, &shape),
                        f_mass: fm,
                    }
                    .into());
                }
                let gm = g.at(&idx) / gy;
                if gm == 0.0 {
                    return Err(DensityError::AbsContinuityViolation {
                        cell: flatten(&idx, &shape),
                        f_mass: fm,
                    }
                    .into());
                }
                row_kl += fm * (fm / gm).ln();
            }
        }
        term2 += fy * row_kl;
    }
    Ok((term1, term2))
}

pub(crate) fn flatten(idx: &[usize], shape: &[usize]) -> usize {
    debug_assert_eq!(idx.len(), shape.len());
    let mut flat = 0;
    for (i, (&ix, &n)) in idx.iter().zip(shape).enumerate() {
        debug_assert!(ix < n, "index {ix} out of bounds {n} at axis {i}");
        flat = flat * n + ix;
    }
    flat
}

pub(crate) fn unflatten(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0usize; shape.len()];
    for (i, &n) in shape.iter().enumerate().rev() {
        idx[i] = flat % n;
        flat /= n;
    }
    idx
}
