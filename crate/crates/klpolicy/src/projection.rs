//! The constrained KL projection: minimize `KL(f||g) + E_f[alpha]` over
//! densities on `g`'s support, subject to expectation equality and
//! inequality constraints.
//!
//! The optimum has the exponential-family form
//!
//! ```text
//! f*(z) = g(z) exp(-{alpha(z) + sum_j lambda_j h_j(z)}) / exp(1 + lambda_0)
//! ```
//!
//! where the multipliers maximize the concave dual
//! `L^D(lambda) = -<lambda, H> - integral g exp(-{1 + alpha + <lambda, h>})`.
//! The normalization multiplier `lambda_0` is eliminated analytically, which
//! leaves a smooth concave problem in the remaining coordinates; we solve it
//! by projected gradient ascent with Armijo backtracking, inequality
//! multipliers clamped to `[0, inf)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraint::{
    binding_support_reduction, Constraint, ConstraintError, ConstraintKind, ConstraintSet,
};
use crate::density::{Density, DensityError};
use crate::grid::Grid;

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error("alpha must be finite on g's support (cell {cell})")]
    NonFiniteAlpha { cell: usize },
    #[error("alpha table length {got} does not match grid cell count {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("reference g has no positive cell after support reduction")]
    DegenerateSupport,
    #[error(
        "dual ascent did not converge: {iterations} iterations, \
         projected gradient norm {grad_norm:.3e}"
    )]
    NotConverged { iterations: usize, grad_norm: f64 },
}

/// Inputs of one projection: reference density `g`, cost tilt `alpha`
/// (in nats, tabulated on `g`'s grid), and the constraint set.
#[derive(Debug, Clone, Copy)]
pub struct TiltSpec<'a> {
    pub grid: &'a Grid,
    pub g: &'a [f64],
    pub alpha: &'a [f64],
    pub constraints: &'a ConstraintSet,
}

impl<'a> TiltSpec<'a> {
    pub fn new(
        grid: &'a Grid,
        g: &'a [f64],
        alpha: &'a [f64],
        constraints: &'a ConstraintSet,
    ) -> Result<Self, ProjectionError> {
        if g.len() != grid.cells() {
            return Err(ProjectionError::LengthMismatch { got: g.len(), expected: grid.cells() });
        }
        if alpha.len() != grid.cells() {
            return Err(ProjectionError::LengthMismatch {
                got: alpha.len(),
                expected: grid.cells(),
            });
        }
        for (i, (&gm, &a)) in g.iter().zip(alpha).enumerate() {
            if gm > 0.0 && !a.is_finite() {
                return Err(ProjectionError::NonFiniteAlpha { cell: i });
            }
        }
        if !g.iter().any(|&m| m > 0.0) {
            return Err(ProjectionError::DegenerateSupport);
        }
        Ok(TiltSpec { grid, g, alpha, constraints })
    }

    fn from_density(
        g: &'a Density,
        alpha: &'a [f64],
        constraints: &'a ConstraintSet,
    ) -> Result<Self, ProjectionError> {
        TiltSpec::new(g.grid(), g.mass(), alpha, constraints)
    }
}

/// Multipliers of one solved projection. `lambda[0]` is the normalization
/// multiplier; `lambda[1..=n_e]` belong to the equalities,
/// `lambda[n_e+1..]` to the inequalities, in constraint-set order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualSolution {
    pub lambda: Vec<f64>,
    /// Active index set: 0, every equality index, and each inequality index
    /// whose constraint holds with equality at the optimum.
    pub active_set: Vec<usize>,
    pub dual_value: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub f_star: Density,
    pub dual: DualSolution,
    /// The attained primal optimum `KL(f*||g) + E_{f*}[alpha]`.
    pub minimum: f64,
}

/// Dual-ascent controls. Defaults match the values used throughout the
/// test-suite tolerances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop when the projected dual gradient (constraint residuals, in
    /// original constraint units) has infinity norm at or below this.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// `|c_j[f*]| <= active_tol` classifies an inequality as active.
    pub active_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { grad_tol: 1e-9, max_iters: 50_000, active_tol: 1e-6 }
    }
}

/// The unnormalized tilted density `g(z) e^{-{1 + alpha(z) + <lambda, h(z)>}}`
/// for a full multiplier vector (`lambda[0]` pairs with `h_0 = 1`).
/// Exponents are clamped at 700 to keep pathological inputs finite.
pub fn tilted_density(spec: &TiltSpec, lambda: &[f64]) -> Vec<f64> {
    assert_eq!(lambda.len(), spec.constraints.len() + 1);
    spec.g
        .iter()
        .enumerate()
        .map(|(i, &gm)| {
            if gm == 0.0 {
                return 0.0;
            }
            let mut t = -1.0 - spec.alpha[i] - lambda[0];
            for (j, c) in spec.constraints.all().iter().enumerate() {
                t -= lambda[j + 1] * c.h()[i];
            }
            gm * t.min(700.0).exp()
        })
        .collect()
}

/// The full dual `L^D(lambda) = -<lambda, H> - sum tilted_density`, with
/// `H_0 = 1`. Concave in `lambda`; `-inf` signals overflow of the integral
/// term.
pub fn dual_value(spec: &TiltSpec, lambda: &[f64]) -> f64 {
    let tilt_sum: f64 = tilted_density(spec, lambda).iter().sum();
    let mut v = -lambda[0] - tilt_sum;
    for (j, c) in spec.constraints.all().iter().enumerate() {
        v -= lambda[j + 1] * c.target();
    }
    v
}

/// The reduced dual with `lambda_0` eliminated by normalization:
/// `-sum_j lambda_j H_j - ln(integral g e^{-{alpha + <lambda,h>}})`.
/// `lambda` excludes the normalization coordinate. Shares its maximizer (in
/// the remaining coordinates) with [`dual_value`].
pub fn dual_value_reduced(spec: &TiltSpec, lambda: &[f64]) -> f64 {
    assert_eq!(lambda.len(), spec.constraints.len());
    let ln_z = log_tilt_integral(spec, lambda);
    let mut v = -ln_z;
    for (j, c) in spec.constraints.all().iter().enumerate() {
        v -= lambda[j] * c.target();
    }
    v
}

/// The unique `lambda_0` normalizing the tilted density:
/// `1 + lambda_0 = ln(integral g e^{-{alpha + <lambda,h>}})`.
pub fn lambda0_of(spec: &TiltSpec, lambda_rest: &[f64]) -> Result<f64, ProjectionError> {
    let ln_z = log_tilt_integral(spec, lambda_rest);
    if !ln_z.is_finite() {
        return Err(ProjectionError::DegenerateSupport);
    }
    Ok(ln_z - 1.0)
}

/// `ln ( sum_i g_i e^{t_i} )` with `t_i = -alpha_i - <lambda, h(z_i)>`,
/// computed with a max shift so large tilts cannot overflow.
fn log_tilt_integral(spec: &TiltSpec, lambda_rest: &[f64]) -> f64 {
    let (shifted, max_t) = shifted_tilt(spec, lambda_rest);
    let s: f64 = shifted.iter().sum();
    max_t + s.ln()
}

/// Returns `(g_i e^{t_i - max_t}, max_t)` over all cells (zeros off
/// support).
fn shifted_tilt(spec: &TiltSpec, lambda_rest: &[f64]) -> (Vec<f64>, f64) {
    let n = spec.grid.cells();
    let mut t = vec![f64::NEG_INFINITY; n];
    let mut max_t = f64::NEG_INFINITY;
    for i in 0..n {
        if spec.g[i] > 0.0 {
            let mut ti = -spec.alpha[i];
            for (j, c) in spec.constraints.all().iter().enumerate() {
                ti -= lambda_rest[j] * c.h()[i];
            }
            t[i] = ti;
            max_t = max_t.max(ti);
        }
    }
    let shifted: Vec<f64> = spec
        .g
        .iter()
        .zip(&t)
        .map(|(&gm, &ti)| if gm > 0.0 { gm * (ti - max_t).exp() } else { 0.0 })
        .collect();
    (shifted, max_t)
}

/// Normalized tilted density at `lambda_rest` (the primal candidate
/// `f_hat(lambda)`).
fn candidate(spec: &TiltSpec, lambda_rest: &[f64]) -> Vec<f64> {
    let (mut shifted, _) = shifted_tilt(spec, lambda_rest);
    let s: f64 = shifted.iter().sum();
    for v in &mut shifted {
        *v /= s;
    }
    shifted
}

/// Solves the constrained projection.
///
/// The returned multipliers are in original constraint units; internally
/// each constraint is rescaled by `max |h|` for conditioning. Constraints
/// whose target sits at the boundary of the achievable range are converted
/// into support restrictions first and carry a zero multiplier in the
/// result.
pub fn solve(spec: &TiltSpec, opts: &SolverOptions) -> Result<ProjectionResult, ProjectionError> {
    let support: Vec<bool> = spec.g.iter().map(|&m| m > 0.0).collect();
    let (reduced_set, support) = binding_support_reduction(spec.constraints, support)?;

    // Map reduced constraints back to their original indices so multipliers
    // land in the right slot.
    let reduced_pos: Vec<usize> = reduced_set
        .all()
        .iter()
        .map(|rc| {
            spec.constraints
                .all()
                .iter()
                .position(|c| std::ptr::eq(c.h().as_ptr(), rc.h().as_ptr()) || c == rc)
                .expect("reduced constraint originates from the set")
        })
        .collect();

    let g_reduced: Vec<f64> = spec
        .g
        .iter()
        .zip(&support)
        .map(|(&m, &s)| if s { m } else { 0.0 })
        .collect();
    if !g_reduced.iter().any(|&m| m > 0.0) {
        return Err(ProjectionError::DegenerateSupport);
    }
    let g_sum: f64 = g_reduced.iter().sum();
    // Renormalize the restricted reference so the tilt stays a density
    // problem; lambda_0 is corrected for the lost mass afterward.
    let g_norm: Vec<f64> = g_reduced.iter().map(|&m| m / g_sum).collect();
    let inner = TiltSpec {
        grid: spec.grid,
        g: &g_norm,
        alpha: spec.alpha,
        constraints: &reduced_set,
    };

    let m = reduced_set.len();
    let n_e = reduced_set.n_equalities();
    let scales: Vec<f64> = reduced_set
        .all()
        .iter()
        .map(|c| {
            c.h()
                .iter()
                .zip(&support)
                .filter(|(_, &s)| s)
                .map(|(h, _)| h.abs())
                .fold(1.0f64, f64::max)
        })
        .collect();
    let scaled: Vec<Constraint> = reduced_set
        .all()
        .iter()
        .zip(&scales)
        .map(|(c, &s)| {
            let h: Vec<f64> = c.h().iter().map(|v| v / s).collect();
            Constraint::new(c.name(), h, c.target() / s, c.kind(), spec.grid)
                .expect("rescaled constraint stays valid")
        })
        .collect();
    let scaled_set = ConstraintSet::new(scaled);
    let scaled_spec = TiltSpec {
        grid: spec.grid,
        g: &g_norm,
        alpha: spec.alpha,
        constraints: &scaled_set,
    };

    // Projected gradient ascent on the reduced dual, lambda = 0 start.
    let mut lambda = vec![0.0; m];
    let mut iterations = 0usize;
    let mut converged = m == 0;
    let mut eta = 1.0;
    if m > 0 {
        let mut value = dual_value_reduced(&scaled_spec, &lambda);
        loop {
            let f_hat = candidate(&scaled_spec, &lambda);
            // grad_j = -H_j + E_{f_hat}[h_j], in scaled units.
            let grad: Vec<f64> = scaled_set
                .all()
                .iter()
                .map(|c| c.evaluate_mass(&f_hat))
                .collect();
            // Projected gradient in original units for the stop test.
            let mut pg_norm = 0.0f64;
            for (j, &gj) in grad.iter().enumerate() {
                let unscaled = gj * scales[j];
                let blocked = j >= n_e && lambda[j] == 0.0 && gj < 0.0;
                if !blocked {
                    pg_norm = pg_norm.max(unscaled.abs());
                }
            }
            if pg_norm <= opts.grad_tol {
                converged = true;
                break;
            }
            if iterations >= opts.max_iters {
                return Err(ProjectionError::NotConverged { iterations, grad_norm: pg_norm });
            }
            iterations += 1;

            let mut accepted = false;
            for _ in 0..80 {
                let cand: Vec<f64> = lambda
                    .iter()
                    .zip(&grad)
                    .enumerate()
                    .map(|(j, (&l, &g))| {
                        let v = l + eta * g;
                        if j >= n_e {
                            v.max(0.0)
                        } else {
                            v
                        }
                    })
                    .collect();
                let cand_value = dual_value_reduced(&scaled_spec, &cand);
                let dir_gain: f64 = cand
                    .iter()
                    .zip(&lambda)
                    .zip(&grad)
                    .map(|((c, l), g)| (c - l) * g)
                    .sum();
                if cand_value >= value + 1e-4 * dir_gain && cand_value.is_finite() {
                    lambda = cand;
                    value = cand_value;
                    eta = (eta * 1.5).min(1e6);
                    accepted = true;
                    break;
                }
                eta *= 0.5;
            }
            if !accepted {
                // Step size exhausted; treat the current iterate as the
                // best attainable point and fall through to the stop test.
                let f_hat = candidate(&scaled_spec, &lambda);
                let pg: f64 = scaled_set
                    .all()
                    .iter()
                    .enumerate()
                    .map(|(j, c)| {
                        let gj = c.evaluate_mass(&f_hat);
                        let blocked = j >= n_e && lambda[j] == 0.0 && gj < 0.0;
                        if blocked {
                            0.0
                        } else {
                            (gj * scales[j]).abs()
                        }
                    })
                    .fold(0.0, f64::max);
                if pg <= opts.grad_tol {
                    converged = true;
                    break;
                }
                return Err(ProjectionError::NotConverged { iterations, grad_norm: pg });
            }
        }
    }

    // Recover the solution and unscaled multipliers.
    let f_mass = candidate(&scaled_spec, &lambda);
    let f_star = Density::new(spec.grid.clone(), f_mass)?;
    // lambda_0 over the *original* g: ln integral includes the lost-mass
    // factor g_sum.
    let ln_z_norm = log_tilt_integral(&scaled_spec, &lambda);
    let lambda0 = ln_z_norm + g_sum.ln() - 1.0;

    let mut full_lambda = vec![0.0; spec.constraints.len() + 1];
    full_lambda[0] = lambda0;
    for (r, &orig) in reduced_pos.iter().enumerate() {
        full_lambda[orig + 1] = lambda[r] / scales[r];
    }

    // Active set from the solution, in problem numbering.
    let mut active_set = vec![0usize];
    for (j, c) in spec.constraints.all().iter().enumerate() {
        let cj = c.evaluate(&f_star);
        match c.kind() {
            ConstraintKind::Equality => active_set.push(j + 1),
            ConstraintKind::Inequality => {
                if cj.abs() <= opts.active_tol {
                    active_set.push(j + 1);
                } else {
                    // complementary slackness: zero out the multiplier of an
                    // inactive inequality (it is already ~0 numerically)
                    full_lambda[j + 1] = 0.0;
                }
            }
        }
    }

    let dv = dual_value(spec, &full_lambda);
    let minimum = primal_value(spec, &f_star)?;
    Ok(ProjectionResult {
        f_star,
        dual: DualSolution {
            lambda: full_lambda,
            active_set,
            dual_value: dv,
            converged,
            iterations,
        },
        minimum,
    })
}

/// `KL(f||g) + E_f[alpha]`, the primal objective.
pub fn primal_value(spec: &TiltSpec, f: &Density) -> Result<f64, ProjectionError> {
    let g = Density::new(spec.grid.clone(), spec.g.to_vec())?;
    let kl = f.kl_divergence(&g)?;
    Ok(kl + f.expectation_table(spec.alpha))
}

/// Convenience entry point for one projection against an owned reference
/// density.
pub fn solve_projection(
    g: &Density,
    alpha: &[f64],
    constraints: &ConstraintSet,
    opts: &SolverOptions,
) -> Result<ProjectionResult, ProjectionError> {
    let spec = TiltSpec::from_density(g, alpha, constraints)?;
    solve(&spec, opts)
}

/// The constrained maximum-entropy special case: uniform reference, zero
/// tilt.
pub fn maxent_solve(
    grid: &Grid,
    constraints: &ConstraintSet,
    opts: &SolverOptions,
) -> Result<ProjectionResult, ProjectionError> {
    let g = Density::uniform(grid.clone());
    let alpha = vec![0.0; grid.cells()];
    let spec = TiltSpec::from_density(&g, &alpha, constraints)?;
    solve(&spec, opts)
}

/// Karush-Kuhn-Tucker residuals of a solved projection, plus the minimum
/// identity and the duality gap. All residuals should be at numerical noise
/// level for a correct solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KktReport {
    /// max |c_j[f*]| over equalities.
    pub primal_eq: f64,
    /// max c_j[f*] over inequalities (positive means violated).
    pub primal_ineq: f64,
    /// min lambda_j over inequalities (negative means dual infeasible).
    pub dual_feasibility: f64,
    /// max |lambda_j c_j[f*]| over inequalities.
    pub complementary_slackness: f64,
    /// max |ln(f*/g) + alpha + <lambda, h> + 1| over cells with f* > 1e-12.
    pub stationarity: f64,
    /// |minimum + (1 + sum_{active} lambda_j H_j)|.
    pub minimum_identity: f64,
    /// |dual value - minimum|.
    pub duality_gap: f64,
}

pub fn verify_kkt(spec: &TiltSpec, result: &ProjectionResult) -> KktReport {
    let f = &result.f_star;
    let lambda = &result.dual.lambda;
    let mut primal_eq = 0.0f64;
    let mut primal_ineq = f64::NEG_INFINITY;
    let mut dual_feasibility = f64::INFINITY;
    let mut comp_slack = 0.0f64;
    for (j, c) in spec.constraints.all().iter().enumerate() {
        let cj = c.evaluate(f);
        match c.kind() {
            ConstraintKind::Equality => primal_eq = primal_eq.max(cj.abs()),
            ConstraintKind::Inequality => {
                primal_ineq = primal_ineq.max(cj);
                dual_feasibility = dual_feasibility.min(lambda[j + 1]);
                comp_slack = comp_slack.max((lambda[j + 1] * cj).abs());
            }
        }
    }
    if primal_ineq == f64::NEG_INFINITY {
        primal_ineq = 0.0;
    }
    if dual_feasibility == f64::INFINITY {
        dual_feasibility = 0.0;
    }

    let mut stationarity = 0.0f64;
    for i in 0..spec.grid.cells() {
        let fm = f.mass()[i];
        if fm > 1e-12 && spec.g[i] > 0.0 {
            let mut r = (fm / spec.g[i]).ln() + spec.alpha[i] + lambda[0] + 1.0;
            for (j, c) in spec.constraints.all().iter().enumerate() {
                r += lambda[j + 1] * c.h()[i];
            }
            stationarity = stationarity.max(r.abs());
        }
    }

    let mut lambda_dot_h_active = lambda[0]; // H_0 = 1
    for &j in &result.dual.active_set {
        if j > 0 {
            lambda_dot_h_active += lambda[j] * spec.constraints.get(j - 1).target();
        }
    }
    let minimum_identity = (result.minimum + (1.0 + lambda_dot_h_active)).abs();
    let duality_gap = (result.dual.dual_value - result.minimum).abs();

    KktReport {
        primal_eq,
        primal_ineq,
        dual_feasibility,
        complementary_slackness: comp_slack,
        stationarity,
        minimum_identity,
        duality_gap,
    }
}
