//! Discretized probability densities on 1-D grids.
//!
//! A [`Density`] stores one nonnegative mass per grid cell (pdf value times
//! cell width), normalized to total mass 1. Expectations, moments and KL
//! divergences are therefore plain weighted sums over cell centers
//! (midpoint rule); no cell-volume factors appear anywhere downstream.
//!
//! All types are immutable after construction, so any operation may run
//! concurrently on shared inputs. Sampling takes a caller-owned RNG.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid, GridError};

/// Tolerance on total mass for a vector to count as normalized.
pub const NORMALIZATION_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DensityError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("mass vector length {got} does not match grid cell count {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("all mass entries are zero")]
    AllZero,
    #[error("negative mass {value} at cell {cell}")]
    NegativeMass { cell: usize, value: f64 },
    #[error("mass vector sums to {sum}, not 1 within {NORMALIZATION_TOL:e}")]
    NotNormalized { sum: f64 },
    #[error("non-finite mass at cell {cell}")]
    NonFiniteMass { cell: usize },
    #[error("h evaluates to a non-finite value on cell {cell} with positive mass")]
    NonFiniteH { cell: usize },
    #[error("absolute continuity violated: f has mass {f_mass} at cell {cell} where g is zero")]
    AbsContinuityViolation { cell: usize, f_mass: f64 },
    #[error("grids differ between the two densities")]
    GridMismatch,
}

/// A normalized, nonnegative mass vector over a [`Grid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density {
    grid: Grid,
    mass: Vec<f64>,
}

impl Density {
    /// Validates nonnegativity and normalization (within
    /// [`NORMALIZATION_TOL`]), then rescales so the stored mass sums to
    /// exactly 1.
    pub fn new(grid: Grid, mass: Vec<f64>) -> Result<Self, DensityError> {
        if mass.len() != grid.cells() {
            return Err(DensityError::LengthMismatch {
                got: mass.len(),
                expected: grid.cells(),
            });
        }
        validate_nonnegative(&mass)?;
        let sum: f64 = mass.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(DensityError::NotNormalized { sum });
        }
        Ok(Self::rescaled(grid, mass, sum))
    }

    /// Normalizes an arbitrary nonnegative vector into a `Density`.
    pub fn normalize(raw: Vec<f64>, grid: Grid) -> Result<Self, DensityError> {
        if raw.len() != grid.cells() {
            return Err(DensityError::LengthMismatch {
                got: raw.len(),
                expected: grid.cells(),
            });
        }
        validate_nonnegative(&raw)?;
        let sum: f64 = raw.iter().sum();
        if sum == 0.0 {
            return Err(DensityError::AllZero);
        }
        Ok(Self::rescaled(grid, raw, sum))
    }

    fn rescaled(grid: Grid, mut mass: Vec<f64>, sum: f64) -> Self {
        if sum != 1.0 {
            for m in &mut mass {
                *m /= sum;
            }
        }
        Density { grid, mass }
    }

    pub fn uniform(grid: Grid) -> Self {
        let n = grid.cells();
        Density {
            grid,
            mass: vec![1.0 / n as f64; n],
        }
    }

    pub fn point_mass(grid: Grid, cell: usize) -> Self {
        let mut mass = vec![0.0; grid.cells()];
        mass[cell.min(grid.cells() - 1)] = 1.0;
        Density { grid, mass }
    }

    /// Discretization of a Gaussian pdf, truncated and renormalized on the
    /// grid. Computed through a max-shifted exponential so that arbitrarily
    /// small `sigma2` degrades gracefully to a point mass at the nearest
    /// cell instead of underflowing to all zeros.
    pub fn gaussian(grid: Grid, mean: f64, sigma2: f64) -> Self {
        assert!(sigma2 > 0.0, "gaussian needs sigma2 > 0");
        let log_pdf: Vec<f64> = grid
            .centers()
            .map(|c| -(c - mean) * (c - mean) / (2.0 * sigma2))
            .collect();
        let max = log_pdf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = log_pdf.iter().map(|lp| (lp - max).exp()).collect();
        let sum: f64 = raw.iter().sum();
        Density::rescaled(grid, raw, sum)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// `E_f[h(Z)]` as the mass-weighted sum of `h` over cell centers.
    pub fn expectation<F: Fn(f64) -> f64>(&self, h: F) -> Result<f64, DensityError> {
        let mut acc = 0.0;
        for (i, (&m, c)) in self.mass.iter().zip(self.grid.centers()).enumerate() {
            if m > 0.0 {
                let v = h(c);
                if !v.is_finite() {
                    return Err(DensityError::NonFiniteH { cell: i });
                }
                acc += m * v;
            }
        }
        Ok(acc)
    }

    /// Expectation of a pre-tabulated function (one value per cell).
    /// Cells with zero mass contribute nothing even if the table is
    /// non-finite there.
    pub fn expectation_table(&self, h: &[f64]) -> f64 {
        debug_assert_eq!(h.len(), self.mass.len());
        self.mass
            .iter()
            .zip(h)
            .filter(|(m, _)| **m > 0.0)
            .map(|(m, v)| m * v)
            .sum()
    }

    /// Mean of the density; the mean-mode control value.
    pub fn mean(&self) -> f64 {
        self.mass
            .iter()
            .zip(self.grid.centers())
            .map(|(m, c)| m * c)
            .sum()
    }

    /// Raw moment `E[Z^order]`.
    pub fn moment(&self, order: u32) -> f64 {
        self.mass
            .iter()
            .zip(self.grid.centers())
            .map(|(m, c)| m * c.powi(order as i32))
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        (self.moment(2) - m * m).max(0.0)
    }

    /// `KL(f || g) = sum f ln(f/g)` over cells with `f > 0`.
    ///
    /// Cells where both masses vanish contribute 0 (the `f ln f -> 0`
    /// limit convention). A cell with `f > 0` and `g == 0` violates
    /// absolute continuity and is an error.
    pub fn kl_divergence(&self, g: &Density) -> Result<f64, DensityError> {
        if self.grid != g.grid {
            return Err(DensityError::GridMismatch);
        }
        kl_between(&self.mass, &g.mass)
    }

    /// Replaces zero cells of the density by `floor` and renormalizes.
    /// With `floor == 0` this is the identity. Used to restore absolute
    /// continuity against histograms with empty cells.
    pub fn with_support_floor(&self, floor: f64) -> Density {
        if floor <= 0.0 {
            return self.clone();
        }
        let raw: Vec<f64> = self.mass.iter().map(|&m| if m == 0.0 { floor } else { m }).collect();
        let sum: f64 = raw.iter().sum();
        Density::rescaled(self.grid.clone(), raw, sum)
    }

    /// Draws a cell index with probability equal to its mass.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen::<f64>();
        let mut acc = 0.0;
        for (i, &m) in self.mass.iter().enumerate() {
            acc += m;
            if u < acc {
                return i;
            }
        }
        // Rounding may leave acc marginally below 1; fall back to the last
        // positive-mass cell.
        self.mass
            .iter()
            .rposition(|&m| m > 0.0)
            .unwrap_or(self.mass.len() - 1)
    }

    /// Draws a cell center with probability equal to the cell mass.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.grid.center(self.sample_index(rng))
    }
}

fn validate_nonnegative(mass: &[f64]) -> Result<(), DensityError> {
    for (i, &m) in mass.iter().enumerate() {
        if !m.is_finite() {
            return Err(DensityError::NonFiniteMass { cell: i });
        }
        if m < 0.0 {
            return Err(DensityError::NegativeMass { cell: i, value: m });
        }
    }
    Ok(())
}

/// KL between two mass vectors of equal length (assumed normalized).
pub(crate) fn kl_between(f: &[f64], g: &[f64]) -> Result<f64, DensityError> {
    let mut acc = 0.0;
    for (i, (&fm, &gm)) in f.iter().zip(g).enumerate() {
        if fm > 0.0 {
            if gm == 0.0 {
                return Err(DensityError::AbsContinuityViolation { cell: i, f_mass: fm });
            }
            acc += fm * (fm / gm).ln();
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(n: usize) -> Grid {
        Grid::unit(n).unwrap()
    }

    #[test]
    fn normalize_uniform_and_point_mass() {
        let d = Density::normalize(vec![1.0, 1.0, 1.0, 1.0], unit(4)).unwrap();
        assert_eq!(d.mass(), &[0.25, 0.25, 0.25, 0.25]);
        let d = Density::normalize(vec![0.0, 2.0, 0.0, 0.0], unit(4)).unwrap();
        assert_eq!(d.mass(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_two_cells() {
        // 1/(1+3), 3/(1+3)
        let d = Density::normalize(vec![1.0, 3.0], unit(2)).unwrap();
        assert_eq!(d.mass(), &[0.25, 0.75]);
    }

    #[test]
    fn normalize_rejects_bad_input() {
        assert!(matches!(
            Density::normalize(vec![0.0, 0.0], unit(2)),
            Err(DensityError::AllZero)
        ));
        assert!(matches!(
            Density::normalize(vec![1.0, -0.5], unit(2)),
            Err(DensityError::NegativeMass { cell: 1, .. })
        ));
    }

    #[test]
    fn expectation_examples() {
        let d = Density::uniform(unit(4));
        assert_abs_diff_eq!(d.expectation(|z| z).unwrap(), 1.5);

        let d = Density::point_mass(unit(4), 2);
        assert_abs_diff_eq!(d.expectation(|z| z * z).unwrap(), 4.0);

        let d = Density::new(unit(2), vec![0.25, 0.75]).unwrap();
        assert_abs_diff_eq!(d.expectation(|z| z).unwrap(), 0.75);
    }

    #[test]
    fn expectation_rejects_non_finite_h_on_support() {
        let d = Density::new(unit(2), vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            d.expectation(|z| 1.0 / z), // infinite at the z = 0 center
            Err(DensityError::NonFiniteH { cell: 0 })
        ));
        // but fine if the offending cell carries no mass
        let d = Density::point_mass(unit(2), 1);
        assert_abs_diff_eq!(d.expectation(|z| 1.0 / z).unwrap(), 1.0);
    }

    #[test]
    fn kl_examples() {
        let g = unit(2);
        let f = Density::new(g.clone(), vec![0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(f.kl_divergence(&f).unwrap(), 0.0);

        let q = Density::new(g.clone(), vec![0.25, 0.75]).unwrap();
        // 0.5 ln 2 + 0.5 ln(2/3)
        assert_abs_diff_eq!(
            f.kl_divergence(&q).unwrap(),
            0.14384103622589045,
            epsilon = 1e-15
        );

        let degenerate = Density::new(g, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            f.kl_divergence(&degenerate),
            Err(DensityError::AbsContinuityViolation { cell: 1, .. })
        ));
    }

    #[test]
    fn support_floor_restores_continuity() {
        let g = unit(2);
        let f = Density::new(g.clone(), vec![0.5, 0.5]).unwrap();
        let degenerate = Density::new(g, vec![1.0, 0.0]).unwrap();
        let floored = degenerate.with_support_floor(1e-9);
        assert!(f.kl_divergence(&floored).is_ok());
        assert_abs_diff_eq!(floored.mass().iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn sampling_point_mass_is_degenerate() {
        let d = Density::point_mass(unit(4), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            assert_eq!(d.sample_index(&mut rng), 3);
        }
    }

    #[test]
    fn sampling_frequencies_match_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let d = Density::uniform(unit(4));
        let mut counts = [0u32; 4];
        for _ in 0..100_000 {
            counts[d.sample_index(&mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / 100_000.0 - 0.25).abs() < 0.01);
        }

        let d = Density::new(unit(2), vec![0.9, 0.1]).unwrap();
        let mut counts = [0u32; 2];
        for _ in 0..100_000 {
            counts[d.sample_index(&mut rng)] += 1;
        }
        assert!((counts[0] as f64 / 100_000.0 - 0.9).abs() < 0.01);
        assert!((counts[1] as f64 / 100_000.0 - 0.1).abs() < 0.01);
    }

    #[test]
    fn sampling_is_reproducible() {
        let d = Density::new(unit(3), vec![0.2, 0.5, 0.3]).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..32).map(|_| d.sample_index(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    #[test]
    fn gaussian_tiny_sigma_is_point_mass() {
        let g = Grid::new(0.0, 10.0, 10).unwrap();
        let d = Density::gaussian(g.clone(), 3.6, 1e-12);
        let idx = g.nearest(3.6);
        assert_abs_diff_eq!(d.mass()[idx], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_symmetric_grid_is_symmetric() {
        let g = Grid::new(-5.0, 5.0, 11).unwrap();
        let d = Density::gaussian(g, 0.0, 2.0);
        let m = d.mass();
        for i in 0..5 {
            assert_abs_diff_eq!(m[i], m[10 - i], epsilon = 1e-14);
        }
    }

    fn mass_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, n)
    }

    proptest! {
        #[test]
        fn gibbs_inequality(fm in mass_strategy(8), gm in mass_strategy(8)) {
            let grid = unit(8);
            let f = Density::normalize(fm, grid.clone()).unwrap();
            let g = Density::normalize(gm, grid).unwrap();
            let d = f.kl_divergence(&g).unwrap();
            prop_assert!(d >= -1e-12);
            let same = f.kl_divergence(&f).unwrap();
            prop_assert!(same.abs() <= 1e-12);
        }

        #[test]
        fn normalization_survives_operations(raw in mass_strategy(6), floor in 0.0f64..0.1) {
            let grid = unit(6);
            let d = Density::normalize(raw, grid).unwrap();
            prop_assert!((d.mass().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let fl = d.with_support_floor(floor);
            prop_assert!((fl.mass().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
