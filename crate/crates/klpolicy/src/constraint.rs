//! Expectation-form constraint functionals `c[f] = E_f[h] - H` on the
//! control grid, their standard families, and a constructive Slater
//! feasibility check.
//!
//! All inequalities are normalized to the `c[f] <= 0` orientation at
//! construction. The normalization constraint (`h = 1`, `H = 1`) is always
//! implicitly present and never stored.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::Density;
use crate::grid::Grid;

#[derive(Debug, Error)]
pub enum ConstraintError {
    #[error("constraint function must be finite on every grid cell (cell {cell})")]
    NonFiniteH { cell: usize },
    #[error("empty interval: lower {lower} exceeds upper {upper}")]
    EmptyInterval { lower: f64, upper: f64 },
    #[error("subset of grid cells must be nonempty")]
    EmptySubset,
    #[error("target must be finite, got {0}")]
    NonFiniteTarget(f64),
    #[error("constraint tabulated on {got} cells, grid has {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error(
        "constraint set infeasible or Slater's condition not strictly satisfiable: \
         best equality residual {eq_residual:.3e}, best inequality slack {best_slack:.3e}"
    )]
    Infeasible { eq_residual: f64, best_slack: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintKind {
    Equality,
    /// `E_f[h] - H <= 0`.
    Inequality,
}

/// One expectation constraint `E_f[h] - H (= | <=) 0` with `h` tabulated on
/// the grid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    name: String,
    h: Vec<f64>,
    target: f64,
    kind: ConstraintKind,
}

impl Constraint {
    pub fn new(
        name: impl Into<String>,
        h: Vec<f64>,
        target: f64,
        kind: ConstraintKind,
        grid: &Grid,
    ) -> Result<Self, ConstraintError> {
        if h.len() != grid.cells() {
            return Err(ConstraintError::LengthMismatch { got: h.len(), expected: grid.cells() });
        }
        if let Some(cell) = h.iter().position(|v| !v.is_finite()) {
            return Err(ConstraintError::NonFiniteH { cell });
        }
        if !target.is_finite() {
            return Err(ConstraintError::NonFiniteTarget(target));
        }
        Ok(Constraint { name: name.into(), h, target, kind })
    }

    /// Raw-moment equality `E[Z^order] = target`.
    pub fn moment_equality(
        order: u32,
        target: f64,
        grid: &Grid,
    ) -> Result<Self, ConstraintError> {
        let h = grid.centers().map(|z| z.powi(order as i32)).collect();
        Constraint::new(
            format!("moment{order}_eq"),
            h,
            target,
            ConstraintKind::Equality,
            grid,
        )
    }

    /// Raw-moment upper bound `E[Z^order] <= target`.
    pub fn moment_upper_bound(
        order: u32,
        target: f64,
        grid: &Grid,
    ) -> Result<Self, ConstraintError> {
        let h = grid.centers().map(|z| z.powi(order as i32)).collect();
        Constraint::new(
            format!("moment{order}_ub"),
            h,
            target,
            ConstraintKind::Inequality,
            grid,
        )
    }

    /// Raw-moment lower bound `E[Z^order] >= target`, stored negated as
    /// `-E[Z^order] + target <= 0`.
    pub fn moment_lower_bound(
        order: u32,
        target: f64,
        grid: &Grid,
    ) -> Result<Self, ConstraintError> {
        let h = grid.centers().map(|z| -z.powi(order as i32)).collect();
        Constraint::new(
            format!("moment{order}_lb"),
            h,
            -target,
            ConstraintKind::Inequality,
            grid,
        )
    }

    /// The rectangular bound `lower <= E[Z^order] <= upper` as a pair of
    /// inequality constraints.
    pub fn rectangular_bound(
        order: u32,
        lower: f64,
        upper: f64,
        grid: &Grid,
    ) -> Result<(Self, Self), ConstraintError> {
        if lower > upper {
            return Err(ConstraintError::EmptyInterval { lower, upper });
        }
        Ok((
            Constraint::moment_upper_bound(order, upper, grid)?,
            Constraint::moment_lower_bound(order, lower, grid)?,
        ))
    }

    /// The probabilistic bound `P(Z in subset) >= 1 - epsilon`, stored as
    /// `E[-1_subset] + (1 - epsilon) <= 0`.
    pub fn bound_probability(
        subset: &[usize],
        epsilon: f64,
        grid: &Grid,
    ) -> Result<Self, ConstraintError> {
        if subset.is_empty() {
            return Err(ConstraintError::EmptySubset);
        }
        let mut h = vec![0.0; grid.cells()];
        for &i in subset {
            if i >= grid.cells() {
                return Err(ConstraintError::LengthMismatch { got: i + 1, expected: grid.cells() });
            }
            h[i] = -1.0;
        }
        Constraint::new(
            "bound_probability",
            h,
            -(1.0 - epsilon),
            ConstraintKind::Inequality,
            grid,
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    pub fn kind(&self) -> ConstraintKind {
        self.kind
    }

    /// `c[f] = E_f[h] - H`.
    pub fn evaluate(&self, f: &Density) -> f64 {
        self.evaluate_mass(f.mass())
    }

    pub(crate) fn evaluate_mass(&self, mass: &[f64]) -> f64 {
        debug_assert_eq!(mass.len(), self.h.len());
        let e: f64 = mass.iter().zip(&self.h).map(|(m, h)| m * h).sum();
        e - self.target
    }
}

/// Per-stage list of constraints, equalities ordered first.
///
/// Constraint `j` in the problem numbering is `1 + position` here (index 0
/// is the implicit normalization constraint).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    constraints: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn new(mut constraints: Vec<Constraint>) -> Self {
        constraints.sort_by_key(|c| match c.kind {
            ConstraintKind::Equality => 0,
            ConstraintKind::Inequality => 1,
        });
        ConstraintSet { constraints }
    }

    pub fn empty() -> Self {
        ConstraintSet { constraints: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn n_equalities(&self) -> usize {
        self.constraints
            .iter()
            .filter(|c| c.kind == ConstraintKind::Equality)
            .count()
    }

    pub fn n_inequalities(&self) -> usize {
        self.len() - self.n_equalities()
    }

    pub fn all(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn get(&self, i: usize) -> &Constraint {
        &self.constraints[i]
    }

    /// Evaluates every constraint on `f`, in set order.
    pub fn evaluate(&self, f: &Density) -> Vec<f64> {
        self.constraints.iter().map(|c| c.evaluate(f)).collect()
    }
}

/// Options for the constructive Slater check.
#[derive(Debug, Clone)]
pub struct SlaterOptions {
    /// Equality residual below which the witness counts as feasible, and
    /// strict-inequality slack the witness must exceed.
    pub slack_tol: f64,
    pub max_iters: usize,
}

impl Default for SlaterOptions {
    fn default() -> Self {
        SlaterOptions { slack_tol: 1e-8, max_iters: 10_000 }
    }
}

/// A strictly feasible density certifying Slater's condition.
#[derive(Debug, Clone)]
pub struct SlaterWitness {
    pub witness: Density,
    /// Maximum equality residual `|c_j|` at the witness.
    pub eq_residual: f64,
    /// Minimum inequality slack `-c_j` at the witness (infinity when there
    /// are no inequality constraints).
    pub min_slack: f64,
}

/// Constructively checks feasibility and Slater's condition of `cs` relative
/// to the support of `g`.
///
/// Searches for a density satisfying every equality within `slack_tol` and
/// every inequality strictly, by exponentiated-gradient descent on a
/// quadratic penalty starting from the uniform density on `g`'s support.
/// Constraints that can only bind at the boundary of the achievable set are
/// first converted into support restrictions (see
/// [`binding_support_reduction`]).
pub fn check_slater(
    cs: &ConstraintSet,
    g: &Density,
    opts: &SlaterOptions,
) -> Result<SlaterWitness, ConstraintError> {
    let support: Vec<bool> = g.mass().iter().map(|&m| m > 0.0).collect();
    let (reduced, support) = binding_support_reduction(cs, support)?;
    if reduced.is_empty() {
        // Any density on the (possibly reduced) support is a witness;
        // constraints absorbed by the reduction hold there by construction.
        let witness = uniform_on(&support, g.grid().clone());
        let eq = eq_residual(cs, &witness);
        return Ok(SlaterWitness { witness, eq_residual: eq, min_slack: f64::INFINITY });
    }

    // Scale-normalize each constraint for conditioning.
    let scales: Vec<f64> = reduced
        .all()
        .iter()
        .map(|c| {
            c.h.iter()
                .zip(&support)
                .filter(|(_, &s)| s)
                .map(|(h, _)| h.abs())
                .fold(1.0f64, f64::max)
        })
        .collect();

    let n = g.grid().cells();
    let on_support: Vec<usize> = (0..n).filter(|&i| support[i]).collect();
    let mut f: Vec<f64> = vec![0.0; n];
    for &i in &on_support {
        f[i] = 1.0 / on_support.len() as f64;
    }

    // Descend the penalty for a margin schedule, accepting the largest
    // margin that reaches strict feasibility.
    let margins = [1e-2, 1e-4, 1e-6];
    let iters_per_margin = opts.max_iters / margins.len();
    let mut best_eq = f64::INFINITY;
    let mut best_slack = f64::NEG_INFINITY;
    for &margin in &margins {
        let mut eta = 1.0;
        let mut phi = penalty(&reduced, &scales, &f, margin);
        for _ in 0..iters_per_margin {
            let grad = penalty_gradient(&reduced, &scales, &f, margin);
            // Exponentiated-gradient step with backtracking on the penalty.
            let mut step_ok = false;
            for _ in 0..60 {
                let cand = eg_step(&f, &grad, eta, &on_support);
                let cand_phi = penalty(&reduced, &scales, &cand, margin);
                if cand_phi < phi {
                    f = cand;
                    phi = cand_phi;
                    eta *= 1.5;
                    step_ok = true;
                    break;
                }
                eta *= 0.5;
            }
            if !step_ok || phi <= 1e-30 {
                break;
            }
        }
        let witness = Density::normalize(f.clone(), g.grid().clone()).expect("positive on support");
        let eq_res = eq_residual(cs, &witness);
        let slack = min_slack(&reduced, &witness);
        best_eq = best_eq.min(eq_res);
        best_slack = best_slack.max(slack);
        if eq_res <= opts.slack_tol && slack > opts.slack_tol {
            return Ok(SlaterWitness { witness, eq_residual: eq_res, min_slack: slack });
        }
    }
    Err(ConstraintError::Infeasible { eq_residual: best_eq, best_slack })
}

/// Detects constraints whose target sits exactly at the extreme of the
/// achievable expectation range on the current support. Such constraints can
/// only hold by concentrating all mass on the extremal cells, so they are
/// replaced by a support restriction and removed from the set. Returns the
/// reduced set and the shrunken support mask.
///
/// The probabilistic bound with `epsilon = 0` is the canonical case: it
/// forces all mass inside the subset.
pub fn binding_support_reduction(
    cs: &ConstraintSet,
    mut support: Vec<bool>,
) -> Result<(ConstraintSet, Vec<bool>), ConstraintError> {
    let mut remaining: Vec<Constraint> = cs.all().to_vec();
    loop {
        let mut changed = false;
        let mut keep = Vec::with_capacity(remaining.len());
        for c in remaining.drain(..) {
            let (hmin, hmax) = support_extremes(&c.h, &support);
            let tol = 1e-14 * hmin.abs().max(hmax.abs()).max(1.0);
            let at_min = (c.target - hmin).abs() <= tol;
            let at_max = (c.target - hmax).abs() <= tol;
            let infeasible = match c.kind {
                ConstraintKind::Equality => c.target < hmin - tol || c.target > hmax + tol,
                ConstraintKind::Inequality => c.target < hmin - tol,
            };
            if infeasible {
                return Err(ConstraintError::Infeasible {
                    eq_residual: (c.target - hmin).abs().min((c.target - hmax).abs()),
                    best_slack: hmin - c.target,
                });
            }
            let binds_at_min = at_min; // E[h] <= hmin or E[h] = hmin: mass on argmin cells
            let binds_at_max = c.kind == ConstraintKind::Equality && at_max && !at_min;
            if binds_at_min || binds_at_max {
                let pick = if binds_at_min { hmin } else { hmax };
                for (i, s) in support.iter_mut().enumerate() {
                    if *s && (c.h[i] - pick).abs() > tol {
                        *s = false;
                    }
                }
                if !support.iter().any(|&s| s) {
                    return Err(ConstraintError::Infeasible {
                        eq_residual: f64::INFINITY,
                        best_slack: f64::NEG_INFINITY,
                    });
                }
                changed = true;
            } else {
                keep.push(c);
            }
        }
        remaining = keep;
        if !changed {
            break;
        }
    }
    Ok((ConstraintSet::new(remaining), support))
}

fn support_extremes(h: &[f64], support: &[bool]) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for (v, &s) in h.iter().zip(support) {
        if s {
            min = min.min(*v);
            max = max.max(*v);
        }
    }
    (min, max)
}

fn uniform_on(support: &[bool], grid: Grid) -> Density {
    let count = support.iter().filter(|&&s| s).count().max(1);
    let mass: Vec<f64> = support
        .iter()
        .map(|&s| if s { 1.0 / count as f64 } else { 0.0 })
        .collect();
    Density::new(grid, mass).expect("uniform on support is normalized")
}

fn penalty(cs: &ConstraintSet, scales: &[f64], f: &[f64], margin: f64) -> f64 {
    let mut phi = 0.0;
    for (c, &s) in cs.all().iter().zip(scales) {
        let v = c.evaluate_mass(f) / s;
        match c.kind {
            ConstraintKind::Equality => phi += v * v,
            ConstraintKind::Inequality => {
                let viol = (v + margin).max(0.0);
                phi += viol * viol;
            }
        }
    }
    phi
}

fn penalty_gradient(cs: &ConstraintSet, scales: &[f64], f: &[f64], margin: f64) -> Vec<f64> {
    let mut grad = vec![0.0; f.len()];
    for (c, &s) in cs.all().iter().zip(scales) {
        let v = c.evaluate_mass(f) / s;
        let w = match c.kind {
            ConstraintKind::Equality => 2.0 * v,
            ConstraintKind::Inequality => 2.0 * (v + margin).max(0.0),
        };
        if w != 0.0 {
            for (g_i, h_i) in grad.iter_mut().zip(&c.h) {
                *g_i += w * h_i / s;
            }
        }
    }
    grad
}

fn eg_step(f: &[f64], grad: &[f64], eta: f64, on_support: &[usize]) -> Vec<f64> {
    let max_g = on_support
        .iter()
        .map(|&i| -eta * grad[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; f.len()];
    let mut sum = 0.0;
    for &i in on_support {
        let v = f[i] * (-eta * grad[i] - max_g).exp();
        out[i] = v;
        sum += v;
    }
    for &i in on_support {
        out[i] /= sum;
    }
    out
}

fn eq_residual(cs: &ConstraintSet, f: &Density) -> f64 {
    cs.all()
        .iter()
        .filter(|c| c.kind == ConstraintKind::Equality)
        .map(|c| c.evaluate(f).abs())
        .fold(0.0, f64::max)
}

/// Minimum inequality slack `-c_j` over the set; infinity when the set has
/// no inequality constraints.
fn min_slack(cs: &ConstraintSet, f: &Density) -> f64 {
    cs.all()
        .iter()
        .filter(|c| c.kind == ConstraintKind::Inequality)
        .map(|c| -c.evaluate(f))
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid(n: usize) -> Grid {
        Grid::unit(n).unwrap()
    }

    #[test]
    fn moment_equality_examples() {
        let g = grid(2);
        let c = Constraint::moment_equality(1, 0.75, &g).unwrap();
        let f = Density::new(g.clone(), vec![0.25, 0.75]).unwrap();
        assert_abs_diff_eq!(c.evaluate(&f), 0.0, epsilon = 1e-15);
        let u = Density::uniform(g.clone());
        assert_abs_diff_eq!(c.evaluate(&u), -0.25, epsilon = 1e-15);

        let c2 = Constraint::moment_equality(2, 4.0, &grid(5)).unwrap();
        let pm = Density::point_mass(grid(5), 2);
        assert_abs_diff_eq!(c2.evaluate(&pm), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn rectangular_bound_examples() {
        let g = grid(5);
        let (ub, lb) = Constraint::rectangular_bound(2, 1.0, 4.0, &g).unwrap();
        let pm = Density::point_mass(g.clone(), 2); // E[z^2] = 4
        assert_abs_diff_eq!(ub.evaluate(&pm), 0.0, epsilon = 1e-15); // active at upper
        assert!(lb.evaluate(&pm) <= 0.0);

        let g2 = grid(2);
        let (_, lb) = Constraint::rectangular_bound(2, 5.0, 6.0, &g2).unwrap();
        let u = Density::uniform(g2); // E[z^2] = 0.5
        assert_abs_diff_eq!(lb.evaluate(&u), 4.5, epsilon = 1e-15); // violated

        assert!(matches!(
            Constraint::rectangular_bound(2, 2.0, 1.0, &grid(4)),
            Err(ConstraintError::EmptyInterval { .. })
        ));
    }

    #[test]
    fn bound_probability_examples() {
        let g = grid(10);
        let subset: Vec<usize> = (0..9).collect();
        let c = Constraint::bound_probability(&subset, 0.1, &g).unwrap();
        let u = Density::uniform(g.clone());
        assert_abs_diff_eq!(c.evaluate(&u), 0.0, epsilon = 1e-15); // active, satisfied

        let pm_out = Density::point_mass(g.clone(), 9);
        let c_half = Constraint::bound_probability(&subset, 0.5, &g).unwrap();
        assert_abs_diff_eq!(c_half.evaluate(&pm_out), 0.5, epsilon = 1e-15); // violated

        assert!(matches!(
            Constraint::bound_probability(&[], 0.1, &g),
            Err(ConstraintError::EmptySubset)
        ));
    }

    #[test]
    fn constraint_set_orders_equalities_first() {
        let g = grid(4);
        let ineq = Constraint::moment_upper_bound(2, 5.0, &g).unwrap();
        let eq = Constraint::moment_equality(1, 1.5, &g).unwrap();
        let cs = ConstraintSet::new(vec![ineq, eq]);
        assert_eq!(cs.n_equalities(), 1);
        assert_eq!(cs.n_inequalities(), 1);
        assert_eq!(cs.get(0).kind(), ConstraintKind::Equality);
        assert_eq!(cs.get(1).kind(), ConstraintKind::Inequality);
    }

    #[test]
    fn slater_witness_for_interior_mean_target() {
        let g = grid(5);
        let cs = ConstraintSet::new(vec![Constraint::moment_equality(1, 2.5, &g).unwrap()]);
        let w = check_slater(&cs, &Density::uniform(g), &SlaterOptions::default()).unwrap();
        assert!(w.eq_residual <= 1e-8);
        assert_abs_diff_eq!(w.witness.mean(), 2.5, epsilon = 1e-8);
    }

    #[test]
    fn slater_infeasible_when_target_outside_support() {
        let g = grid(5); // centers 0..4
        let cs = ConstraintSet::new(vec![Constraint::moment_equality(1, 9.0, &g).unwrap()]);
        let r = check_slater(&cs, &Density::uniform(g), &SlaterOptions::default());
        assert!(matches!(r, Err(ConstraintError::Infeasible { .. })));
    }

    #[test]
    fn slater_empty_set_is_feasible() {
        let g = grid(3);
        let w = check_slater(&ConstraintSet::empty(), &Density::uniform(g), &SlaterOptions::default())
            .unwrap();
        assert_eq!(w.min_slack, f64::INFINITY);
    }

    #[test]
    fn slater_with_mean_and_variance_style_set() {
        // mean equality plus second-moment upper bound with real interior
        let g = grid(9); // centers 0..8
        let cs = ConstraintSet::new(vec![
            Constraint::moment_equality(1, 4.0, &g).unwrap(),
            Constraint::moment_upper_bound(2, 20.0, &g).unwrap(),
        ]);
        let w = check_slater(&cs, &Density::uniform(g), &SlaterOptions::default()).unwrap();
        assert!(w.eq_residual <= 1e-8);
        assert!(w.min_slack > 1e-8);
    }

    #[test]
    fn binding_probability_bound_restricts_support() {
        let g = grid(6);
        let subset = vec![1usize, 2, 3];
        let cs = ConstraintSet::new(vec![Constraint::bound_probability(&subset, 0.0, &g).unwrap()]);
        let support = vec![true; 6];
        let (reduced, support) = binding_support_reduction(&cs, support).unwrap();
        assert!(reduced.is_empty());
        assert_eq!(support, vec![false, true, true, true, false, false]);
    }

    proptest! {
        #[test]
        fn evaluate_is_linear_in_f(
            fm in prop::collection::vec(0.01f64..1.0, 6),
            gm in prop::collection::vec(0.01f64..1.0, 6),
            lambda in 0.0f64..1.0,
        ) {
            let g = grid(6);
            let c = Constraint::moment_equality(2, 3.0, &g).unwrap();
            let f1 = Density::normalize(fm, g.clone()).unwrap();
            let f2 = Density::normalize(gm, g.clone()).unwrap();
            let mix_mass: Vec<f64> = f1.mass().iter().zip(f2.mass())
                .map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
            let mix = Density::new(g, mix_mass).unwrap();
            let lhs = c.evaluate(&mix);
            let rhs = lambda * c.evaluate(&f1) + (1.0 - lambda) * c.evaluate(&f2);
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }
    }
}
