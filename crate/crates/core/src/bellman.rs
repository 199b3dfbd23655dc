//! Exact, matrix-analytic oracle for the projected-Bellman-error objective:
//! the generalized Bellman operator for state-dependent (and composite
//! state-dependent) lambda, the objective and both of its gradient
//! expressions, constrained optima on a ball, TD fixed points, and the
//! minimax saddle point that the single-time-scale algorithms converge to.
//!
//! Everything downstream is tested against this module, so it prefers
//! exactness over speed: pseudo-inverse solves with a fixed singular-value
//! cutoff, bisection to 1e-12, and KKT residuals to 1e-8.

use alloc::format;
use alloc::string::String;
use core::fmt;

use nalgebra::{DMatrix, DVector};

use crate::linalg::{
    self, kkt_residual_ball, min_norm_solve, min_quadratic_on_ball, project_affine_ball,
    project_ball, pseudo_inverse, sym_eig_range, SpanBasis,
};
use crate::mdp::{FeatureMap, ModelError, ValidatedMdp};
use crate::trace::{CellLambda, LambdaScheme};

/// Residual tolerance for the feature-space linear solve `C x = A theta + b`.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-8;
/// Two gradient expressions must agree this closely or an assembly bug is
/// reported.
pub const GRADIENT_MISMATCH_TOL: f64 = 1e-8;
/// Inner (best-response) and outer (saddle search) stopping tolerances.
pub const INNER_TOL: f64 = 1e-10;
pub const OUTER_KKT_TOL: f64 = 1e-8;
/// Iteration caps for the iterative solvers.
pub const SOLVER_ITER_CAP: usize = 100_000;
/// Bisection tolerance for ball-constrained quadratic minimization.
pub const BISECTION_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum OracleError {
    Model(ModelError),
    /// `I - P Gamma Lambda` failed to invert (precluded by validation).
    Singular(String),
    /// The Gram matrix is not symmetric PSD within tolerance.
    BadGram(String),
    /// `b` or a column of `A` has a component outside the column space of
    /// the Gram matrix.
    OffSpan { residual: f64 },
    /// The feature-space solve left a residual above tolerance.
    SolveResidual { residual: f64 },
    /// The two gradient expressions disagree beyond tolerance.
    GradientMismatch { gap: f64 },
    /// An iterative solver hit its cap; carries the final KKT residuals.
    NonConvergence { kkt_theta: f64, kkt_x: f64 },
    BadParameter(String),
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::Model(e) => write!(f, "{e}"),
            OracleError::Singular(msg) => write!(f, "singular system: {msg}"),
            OracleError::BadGram(msg) => write!(f, "invalid Gram matrix: {msg}"),
            OracleError::OffSpan { residual } => {
                write!(f, "right-hand side off the feature span (residual {residual:.3e})")
            }
            OracleError::SolveResidual { residual } => {
                write!(f, "feature-space solve residual {residual:.3e} above tolerance")
            }
            OracleError::GradientMismatch { gap } => {
                write!(f, "gradient expressions disagree by {gap:.3e}")
            }
            OracleError::NonConvergence { kkt_theta, kkt_x } => write!(
                f,
                "saddle solver hit the iteration cap (KKT residuals {kkt_theta:.3e}, {kkt_x:.3e})"
            ),
            OracleError::BadParameter(msg) => write!(f, "bad parameter: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for OracleError {}

impl From<ModelError> for OracleError {
    fn from(e: ModelError) -> Self {
        OracleError::Model(e)
    }
}

/// Smooth convex regularizer added to the objective.
#[derive(Clone, Debug, PartialEq)]
pub enum RegularizerSpec {
    None,
    /// `p(theta) = (weight / 2) || theta - center ||^2`.
    Quadratic { weight: f64, center: DVector<f64> },
}

impl RegularizerSpec {
    pub fn quadratic(weight: f64, center: DVector<f64>) -> Self {
        RegularizerSpec::Quadratic { weight, center }
    }

    pub fn value(&self, theta: &DVector<f64>) -> f64 {
        match self {
            RegularizerSpec::None => 0.0,
            RegularizerSpec::Quadratic { weight, center } => {
                0.5 * weight * (theta - center).norm_squared()
            }
        }
    }

    pub fn grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        match self {
            RegularizerSpec::None => DVector::zeros(theta.len()),
            RegularizerSpec::Quadratic { weight, center } => (theta - center) * *weight,
        }
    }

    /// Curvature added to the objective Hessian (zero or `weight * I`).
    pub fn curvature(&self) -> f64 {
        match self {
            RegularizerSpec::None => 0.0,
            RegularizerSpec::Quadratic { weight, .. } => *weight,
        }
    }
}

/// The affine generalized Bellman operator `v -> reward + transition * v`,
/// with the true value function as its unique fixed point.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineBellman {
    /// Substochastic matrix applied to the argument.
    pub transition: DMatrix<f64>,
    /// Constant reward term.
    pub reward: DVector<f64>,
}

impl AffineBellman {
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.reward + &self.transition * v
    }

    /// Sup-norm of `v - reward - transition v`; near zero at the true
    /// value function.
    pub fn fixed_point_residual(&self, v: &DVector<f64>) -> f64 {
        (v - self.apply(v)).amax()
    }
}

/// Bellman operator induced by a state-dependent lambda vector:
/// `transition = (I - P G L)^{-1} P G (I - L)` and
/// `reward = (I - P G L)^{-1} r`, where `G` and `L` are the diagonal
/// discount and lambda matrices.
pub fn bellman_state_dependent(
    mdp: &ValidatedMdp,
    lambda: &DVector<f64>,
) -> Result<AffineBellman, OracleError> {
    let n = mdp.n_states();
    if lambda.len() != n {
        return Err(OracleError::BadParameter(format!(
            "lambda vector has length {}, expected {n}",
            lambda.len()
        )));
    }
    if lambda.iter().any(|&l| !(0.0..=1.0).contains(&l)) {
        return Err(OracleError::BadParameter(String::from(
            "lambda outside [0, 1]",
        )));
    }
    let discounted = mdp.discounted_target();
    let mut damped = discounted.clone();
    let mut leftover = discounted;
    for c in 0..n {
        for r in 0..n {
            damped[(r, c)] *= lambda[c];
            leftover[(r, c)] *= 1.0 - lambda[c];
        }
    }
    let system = DMatrix::<f64>::identity(n, n) - damped;
    let lu = system.lu();
    let reward = lu
        .solve(&mdp.expected_reward())
        .ok_or_else(|| OracleError::Singular(String::from("I - P Gamma Lambda")))?;
    let transition = lu
        .solve(&leftover)
        .ok_or_else(|| OracleError::Singular(String::from("I - P Gamma Lambda")))?;
    Ok(AffineBellman { transition, reward })
}

/// Bellman operator for any scheme whose cells are all state-dependent:
/// rows of the composite operator are taken from the per-cell operators.
/// Returns `None` when a history-dependent cell is present (that operator
/// has no closed form; use the empirical estimator instead).
pub fn bellman_for_scheme(
    mdp: &ValidatedMdp,
    scheme: &LambdaScheme,
) -> Result<Option<AffineBellman>, OracleError> {
    match scheme {
        LambdaScheme::StateDependent(lambda) => {
            Ok(Some(bellman_state_dependent(mdp, lambda)?))
        }
        LambdaScheme::HistoryDependent { .. } => Ok(None),
        LambdaScheme::Composite { partition, cells } => {
            let n = mdp.n_states();
            let mut transition = DMatrix::<f64>::zeros(n, n);
            let mut reward = DVector::<f64>::zeros(n);
            for (i, cell) in cells.iter().enumerate() {
                let lambda = match cell {
                    CellLambda::StateDependent(v) => v,
                    CellLambda::HistoryDependent { .. } => return Ok(None),
                };
                let op = bellman_state_dependent(mdp, lambda)?;
                for s in (0..n).filter(|&s| partition[s] == i) {
                    transition.set_row(s, &op.transition.row(s));
                    reward[s] = op.reward[s];
                }
            }
            Ok(Some(AffineBellman { transition, reward }))
        }
    }
}

/// One optimum of the regularized objective over the coefficient ball,
/// with its KKT multiplier. `flat` marks a degenerate optimum set (an
/// affine slice of the ball); distance queries then project onto the set.
#[derive(Clone, Debug)]
pub struct BallOptimum {
    pub theta: DVector<f64>,
    pub multiplier: f64,
    pub value: f64,
    pub flat: bool,
}

/// Saddle point summary of the ball-constrained minimax problem.
#[derive(Clone, Debug)]
pub struct SaddlePoint {
    /// One primal optimizer.
    pub theta: DVector<f64>,
    /// The unique dual optimizer inside the feature span.
    pub x_bar: DVector<f64>,
    pub value: f64,
    /// True when the dual optimizer is strictly inside its ball, in which
    /// case the saddle coincides with the unconstrained-dual solution.
    pub x_interior: bool,
    pub kkt_theta: f64,
    pub kkt_x: f64,
    pub iterations: usize,
}

/// TD fixed-point solve: either the unique solution with a negative-
/// definiteness certificate, or the certificate alone when the mean-update
/// matrix is not negative definite.
#[derive(Clone, Debug)]
pub enum TdFixedPoint {
    Found {
        theta: DVector<f64>,
        /// Largest eigenvalue of the symmetrized mean-update matrix
        /// (negative; its magnitude is the definiteness margin).
        sym_max_eig: f64,
        residual: f64,
    },
    NotNegativeDefinite { sym_max_eig: f64 },
}

/// The projected problem in coefficient space. `residual(theta)` is the
/// feature-space image of the Bellman error at `Phi theta`; the objective
/// is half the Gram-weighted squared norm of its span representation.
#[derive(Clone, Debug)]
pub struct ProjectedProblem {
    residual_slope: DMatrix<f64>,
    residual_offset: DVector<f64>,
    gram: DMatrix<f64>,
    pub regularizer: RegularizerSpec,
    pub r_theta: f64,
    pub r_x: f64,
    span: SpanBasis,
}

impl ProjectedProblem {
    /// Builds the problem from raw matrices, checking that the Gram matrix
    /// is symmetric PSD and that the offset and slope columns stay inside
    /// its column space.
    pub fn new(
        residual_slope: DMatrix<f64>,
        residual_offset: DVector<f64>,
        gram: DMatrix<f64>,
        regularizer: RegularizerSpec,
        r_theta: f64,
        r_x: f64,
    ) -> Result<Self, OracleError> {
        let d = gram.nrows();
        if residual_slope.nrows() != d
            || residual_slope.ncols() != d
            || residual_offset.len() != d
        {
            return Err(OracleError::BadParameter(String::from(
                "matrix dimensions disagree",
            )));
        }
        let scale = gram.amax().max(1.0);
        let asym = (&gram - gram.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(OracleError::BadGram(format!(
                "asymmetry {asym:.3e} above tolerance"
            )));
        }
        let (min_eig, _) = sym_eig_range(&gram);
        if min_eig < -1e-10 * scale {
            return Err(OracleError::BadGram(format!(
                "negative eigenvalue {min_eig:.3e}"
            )));
        }
        let span = SpanBasis::of_columns(&gram);
        let mut off = span.residual_off(&residual_offset);
        for c in 0..d {
            off = off.max(span.residual_off(&residual_slope.column(c).into()));
        }
        if off > SOLVE_RESIDUAL_TOL {
            return Err(OracleError::OffSpan { residual: off });
        }
        Ok(ProjectedProblem {
            residual_slope,
            residual_offset,
            gram,
            regularizer,
            r_theta,
            r_x,
            span,
        })
    }

    /// Assembles the problem from a model, features and a Bellman operator.
    pub fn from_bellman(
        mdp: &ValidatedMdp,
        features: &FeatureMap,
        bellman: &AffineBellman,
        regularizer: RegularizerSpec,
        r_theta: f64,
        r_x: f64,
    ) -> Result<Self, OracleError> {
        let phi = features.matrix();
        let n = mdp.n_states();
        let shifted = &bellman.transition - DMatrix::<f64>::identity(n, n);
        let mut weighted = phi.transpose();
        for s in 0..n {
            let w = mdp.stationary()[s];
            for r in 0..weighted.nrows() {
                weighted[(r, s)] *= w;
            }
        }
        let slope = &weighted * shifted * phi;
        let offset = &weighted * &bellman.reward;
        let gram = &weighted * phi;
        // Symmetrize rounding noise; the Gram matrix is PSD by construction.
        let gram = (&gram + gram.transpose()) * 0.5;
        ProjectedProblem::new(slope, offset, gram, regularizer, r_theta, r_x)
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    pub fn slope(&self) -> &DMatrix<f64> {
        &self.residual_slope
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.residual_offset
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Orthonormal basis of the feature span in coefficient space.
    pub fn span(&self) -> &SpanBasis {
        &self.span
    }

    /// Feature-space image of the Bellman error at `theta`.
    pub fn residual(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.residual_slope * theta + &self.residual_offset
    }

    /// The unique solution in the feature span of
    /// `gram * x = residual(theta)`.
    pub fn solve_x(&self, theta: &DVector<f64>) -> Result<DVector<f64>, OracleError> {
        let rhs = self.residual(theta);
        let x = min_norm_solve(&self.gram, &rhs);
        let residual = (&self.gram * &x - rhs).norm();
        if residual > SOLVE_RESIDUAL_TOL {
            return Err(OracleError::SolveResidual { residual });
        }
        Ok(x)
    }

    /// The projected-Bellman-error objective (half the Gram-weighted
    /// squared norm of the span solution).
    pub fn objective(&self, theta: &DVector<f64>) -> Result<f64, OracleError> {
        let x = self.solve_x(theta)?;
        Ok(0.5 * x.dot(&(&self.gram * &x)))
    }

    /// Objective plus regularizer.
    pub fn objective_reg(&self, theta: &DVector<f64>) -> Result<f64, OracleError> {
        Ok(self.objective(theta)? + self.regularizer.value(theta))
    }

    /// Gradient through the adjoint of the slope.
    pub fn grad_primary(&self, theta: &DVector<f64>) -> Result<DVector<f64>, OracleError> {
        Ok(self.residual_slope.transpose() * self.solve_x(theta)?)
    }

    /// Gradient assembled from the residual and the shifted slope
    /// (`slope + gram` recovers the unshifted weighted cross moment).
    pub fn grad_alt(&self, theta: &DVector<f64>) -> Result<DVector<f64>, OracleError> {
        let x = self.solve_x(theta)?;
        Ok((&self.residual_slope + &self.gram).transpose() * x - self.residual(theta))
    }

    /// Both gradient expressions, checked against each other.
    pub fn grad_checked(&self, theta: &DVector<f64>) -> Result<DVector<f64>, OracleError> {
        let a = self.grad_primary(theta)?;
        let b = self.grad_alt(theta)?;
        let gap = (&a - &b).norm();
        if gap > GRADIENT_MISMATCH_TOL * (1.0 + a.norm()) {
            return Err(OracleError::GradientMismatch { gap });
        }
        Ok(a)
    }

    /// Gradient of the regularized objective.
    pub fn grad_reg(&self, theta: &DVector<f64>) -> Result<DVector<f64>, OracleError> {
        Ok(self.grad_primary(theta)? + self.regularizer.grad(theta))
    }

    /// Hessian of the regularized objective:
    /// `slope' gram^+ slope + weight I`.
    pub fn hessian_reg(&self) -> DMatrix<f64> {
        let pinv = pseudo_inverse(&self.gram);
        let mut h = self.residual_slope.transpose() * pinv * &self.residual_slope;
        let w = self.regularizer.curvature();
        for i in 0..h.nrows() {
            h[(i, i)] += w;
        }
        (&h + h.transpose()) * 0.5
    }

    /// Linear term of the regularized objective gradient at the origin.
    fn grad_at_origin(&self) -> DVector<f64> {
        let pinv = pseudo_inverse(&self.gram);
        let mut g = self.residual_slope.transpose() * (pinv * &self.residual_offset);
        if let RegularizerSpec::Quadratic { weight, center } = &self.regularizer {
            g -= center * *weight;
        }
        g
    }

    /// Minimizes the regularized objective over the coefficient ball via
    /// the ball-constrained quadratic characterization.
    pub fn theta_opt_ball(&self) -> Result<BallOptimum, OracleError> {
        if !(self.r_theta > 0.0) {
            return Err(OracleError::BadParameter(String::from(
                "r_theta must be positive",
            )));
        }
        let h = self.hessian_reg();
        let g = self.grad_at_origin();
        let sol = min_quadratic_on_ball(&h, &g, self.r_theta, BISECTION_TOL);
        let value = self.objective_reg(&sol.point)?;
        Ok(BallOptimum {
            theta: sol.point,
            multiplier: sol.multiplier,
            value,
            flat: sol.flat,
        })
    }

    /// Distance from `theta` to the optimum set certified by
    /// [`ProjectedProblem::theta_opt_ball`]. For a point optimum this is
    /// plain Euclidean distance; for a flat optimum set it is the distance
    /// to the (stationary affine set) intersected with the ball.
    pub fn distance_to_opt(&self, opt: &BallOptimum, theta: &DVector<f64>) -> f64 {
        if !opt.flat {
            return (theta - &opt.theta).norm();
        }
        let h = self.hessian_reg();
        let projected = project_affine_ball(theta, &h, &opt.theta, self.r_theta, 10_000);
        (theta - projected).norm()
    }

    /// The bilinear-concave payoff of the minimax form:
    /// `x' residual(theta) - 0.5 x' gram x + p(theta)`.
    pub fn payoff(&self, theta: &DVector<f64>, x: &DVector<f64>) -> f64 {
        x.dot(&self.residual(theta)) - 0.5 * x.dot(&(&self.gram * x))
            + self.regularizer.value(theta)
    }

    /// Best response of the dual variable on its ball, by projected
    /// gradient ascent on the concave inner problem to [`INNER_TOL`].
    pub fn inner_argmax(&self, theta: &DVector<f64>) -> Result<DVector<f64>, OracleError> {
        let (_, lmax) = sym_eig_range(&self.gram);
        let step = 1.0 / lmax.max(1e-8);
        let rhs = self.residual(theta);
        let mut x = DVector::<f64>::zeros(self.dim());
        for _ in 0..SOLVER_ITER_CAP {
            let grad = &rhs - &self.gram * &x;
            let next = project_ball(&(&x + &grad * step), self.r_x);
            let movement = (&next - &x).norm() / step;
            x = next;
            if movement <= INNER_TOL {
                return Ok(x);
            }
        }
        Err(OracleError::NonConvergence {
            kkt_theta: 0.0,
            kkt_x: INNER_TOL,
        })
    }

    /// Value of the outer (primal) objective of the ball-constrained
    /// minimax: the payoff at the dual best response.
    pub fn outer_objective(&self, theta: &DVector<f64>) -> Result<f64, OracleError> {
        let x = self.inner_argmax(theta)?;
        Ok(self.payoff(theta, &x))
    }

    /// Gradient of the outer objective (envelope form): the slope adjoint
    /// at the dual best response plus the regularizer gradient.
    pub fn outer_grad(&self, theta: &DVector<f64>) -> Result<DVector<f64>, OracleError> {
        let x = self.inner_argmax(theta)?;
        Ok(self.residual_slope.transpose() * x + self.regularizer.grad(theta))
    }

    /// KKT residual of the outer minimization at `theta` (membership test
    /// for the primal optimum set of the ball-constrained minimax).
    pub fn outer_kkt(&self, theta: &DVector<f64>) -> Result<f64, OracleError> {
        let grad = self.outer_grad(theta)?;
        Ok(kkt_residual_ball(theta, &grad, self.r_theta))
    }

    /// Solves the ball-constrained minimax: outer projected gradient
    /// descent with backtracking on the envelope objective, inner projected
    /// gradient ascent. Returns one primal optimizer and the unique dual
    /// optimizer in the feature span.
    pub fn saddle_point(&self) -> Result<SaddlePoint, OracleError> {
        if !(self.r_theta > 0.0) || !(self.r_x > 0.0) {
            return Err(OracleError::BadParameter(String::from(
                "ball radii must be positive",
            )));
        }
        let mut theta = DVector::<f64>::zeros(self.dim());
        let mut value = self.outer_objective(&theta)?;
        // Curvature estimate of the envelope objective for the initial step.
        let (_, amax) = sym_eig_range(&(self.residual_slope.transpose() * &self.residual_slope));
        let cmin = linalg::min_nonzero_eigenvalue(&self.gram);
        let lips = amax / cmin.max(1e-12) + self.regularizer.curvature();
        let mut step = 1.0 / lips.max(1e-12);
        let mut kkt = f64::INFINITY;
        for iter in 0..SOLVER_ITER_CAP {
            let grad = self.outer_grad(&theta)?;
            kkt = kkt_residual_ball(&theta, &grad, self.r_theta);
            if kkt <= OUTER_KKT_TOL {
                let x_tilde = self.inner_argmax(&theta)?;
                let x_bar = self.span.project(&x_tilde);
                let grad_x = self.residual(&theta) - &self.gram * &x_bar;
                return Ok(SaddlePoint {
                    value: self.payoff(&theta, &x_bar),
                    x_interior: x_bar.norm() < self.r_x - 1e-8,
                    kkt_theta: kkt,
                    kkt_x: kkt_residual_ball(&x_bar, &-grad_x, self.r_x),
                    iterations: iter,
                    theta,
                    x_bar,
                });
            }
            // Backtracking projected-gradient step on the envelope value.
            let mut t = step * 2.0;
            loop {
                let candidate = project_ball(&(&theta - &grad * t), self.r_theta);
                let cand_value = self.outer_objective(&candidate)?;
                let decrease = (&candidate - &theta).norm_squared() * (1e-4 / t);
                if cand_value <= value - decrease {
                    theta = candidate;
                    value = cand_value;
                    step = t;
                    break;
                }
                t *= 0.5;
                if t < 1e-18 {
                    // No descent possible at floating precision.
                    theta = candidate;
                    value = cand_value;
                    break;
                }
            }
        }
        Err(OracleError::NonConvergence {
            kkt_theta: kkt,
            kkt_x: f64::NAN,
        })
    }

    /// TD fixed point: requires the mean-update matrix to be negative
    /// definite, then solves the linear system `slope theta = -offset`.
    pub fn td_fixed_point(&self) -> TdFixedPoint {
        let (_, hi) = sym_eig_range(&self.residual_slope);
        if hi >= 0.0 {
            return TdFixedPoint::NotNegativeDefinite { sym_max_eig: hi };
        }
        let rhs = -&self.residual_offset;
        let theta = self
            .residual_slope
            .clone()
            .lu()
            .solve(&rhs)
            .unwrap_or_else(|| min_norm_solve(&self.residual_slope, &rhs));
        let residual = (self.residual(&theta)).norm();
        TdFixedPoint::Found {
            theta,
            sym_max_eig: hi,
            residual,
        }
    }

    /// The problem describing the stepsize-scaled minimax with dual scale
    /// `a = sqrt(eta)`: payoff `a x'(residual) - (a^2/2) x' gram x + p`.
    /// Its dual optimizer relates to this problem's by `x / sqrt(eta)`,
    /// and its dual ball shrinks accordingly.
    pub fn eta_scaled(&self, eta: f64) -> Result<ProjectedProblem, OracleError> {
        if !(eta > 0.0) {
            return Err(OracleError::BadParameter(String::from(
                "eta must be positive",
            )));
        }
        let a = libm::sqrt(eta);
        ProjectedProblem::new(
            &self.residual_slope * a,
            &self.residual_offset * a,
            &self.gram * eta,
            self.regularizer.clone(),
            self.r_theta,
            self.r_x / a,
        )
    }

    /// A dual-ball radius sufficient to contain every span solution over
    /// the coefficient ball: `(||slope|| r_theta + ||offset||) / c`, where
    /// `c` is the smallest nonzero Gram eigenvalue.
    pub fn sufficient_x_radius(&self) -> f64 {
        let (_, a2) = sym_eig_range(&(self.residual_slope.transpose() * &self.residual_slope));
        let slope_norm = libm::sqrt(a2.max(0.0));
        let c = linalg::min_nonzero_eigenvalue(&self.gram);
        (slope_norm * self.r_theta + self.residual_offset.norm()) / c.max(1e-300)
    }
}

/// Convenience assembly: exact problem for a scheme with a closed-form
/// Bellman operator. Errors if the scheme has a history-dependent cell.
pub fn exact_projected_problem(
    mdp: &ValidatedMdp,
    features: &FeatureMap,
    scheme: &LambdaScheme,
    regularizer: RegularizerSpec,
    r_theta: f64,
    r_x: f64,
) -> Result<ProjectedProblem, OracleError> {
    match bellman_for_scheme(mdp, scheme)? {
        Some(op) => {
            ProjectedProblem::from_bellman(mdp, features, &op, regularizer, r_theta, r_x)
        }
        None => Err(OracleError::BadParameter(String::from(
            "scheme has no closed-form Bellman operator; use the empirical estimator",
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::trace::CellLambda;
    use alloc::vec;
    use alloc::vec::Vec;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};

    fn mdp_a_problem(r_theta: f64, r_x: f64) -> ProjectedProblem {
        let (mdp, features) = presets::mdp_a();
        let op = bellman_state_dependent(&mdp, &DVector::from_element(2, 0.0)).unwrap();
        ProjectedProblem::from_bellman(&mdp, &features, &op, RegularizerSpec::None, r_theta, r_x)
            .unwrap()
    }

    /// Independent state-space evaluation of the objective: builds the
    /// stationary-weighted projection matrix directly and measures the
    /// weighted norm of the projected Bellman error.
    fn objective_direct(
        mdp: &crate::mdp::ValidatedMdp,
        features: &crate::mdp::FeatureMap,
        op: &AffineBellman,
        theta: &DVector<f64>,
    ) -> f64 {
        let phi = features.matrix();
        let n = mdp.n_states();
        let mut weighted = phi.transpose();
        for s in 0..n {
            for r in 0..weighted.nrows() {
                weighted[(r, s)] *= mdp.stationary()[s];
            }
        }
        let gram = &weighted * phi;
        let proj = phi * crate::linalg::pseudo_inverse(&gram) * weighted;
        let v = features.values(theta);
        let error = op.apply(&v) - v;
        let projected = proj * error;
        let mut norm2 = 0.0;
        for s in 0..n {
            norm2 += mdp.stationary()[s] * projected[s] * projected[s];
        }
        0.5 * norm2
    }

    #[test]
    fn lambda_endpoints_recover_known_operators() {
        let (mdp, _) = presets::mdp_b();
        let zero = bellman_state_dependent(&mdp, &DVector::from_element(2, 0.0)).unwrap();
        assert!((zero.transition.clone() - mdp.discounted_target()).amax() <= 1e-12);
        assert!((zero.reward.clone() - mdp.expected_reward()).amax() <= 1e-12);

        let one = bellman_state_dependent(&mdp, &DVector::from_element(2, 1.0)).unwrap();
        let v_pi = crate::mdp::true_value_function(&mdp).unwrap();
        assert!(one.transition.amax() <= 1e-12);
        assert!((one.reward.clone() - v_pi).amax() <= 1e-10);
    }

    /// Independent route: form the damped-resolvent inverse by a truncated
    /// geometric series rather than an LU solve.
    #[test]
    fn state_dependent_operator_matches_series_expansion() {
        let (mdp, _) = presets::mdp_b();
        let lambda = DVector::from_row_slice(&[0.3, 0.7]);
        let op = bellman_state_dependent(&mdp, &lambda).unwrap();

        let n = mdp.n_states();
        let mut damped = mdp.discounted_target();
        let mut leftover = mdp.discounted_target();
        for c in 0..n {
            for r in 0..n {
                damped[(r, c)] *= lambda[c];
                leftover[(r, c)] *= 1.0 - lambda[c];
            }
        }
        let mut inv = DMatrix::<f64>::identity(n, n);
        let mut power = DMatrix::<f64>::identity(n, n);
        for _ in 0..400 {
            power = &power * &damped;
            inv += &power;
        }
        assert!((op.transition.clone() - &inv * leftover).amax() < 1e-10);
        assert!((op.reward.clone() - inv * mdp.expected_reward()).amax() < 1e-10);

        // The true value function is the fixed point.
        let v_pi = crate::mdp::true_value_function(&mdp).unwrap();
        assert!(op.fixed_point_residual(&v_pi) <= 1e-8);
    }

    #[test]
    fn fixed_point_holds_for_random_lambdas() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (mdp, _, lambda) = presets::random_mdp(4, 2, &mut rng);
            let op = bellman_state_dependent(&mdp, &lambda).unwrap();
            let v_pi = crate::mdp::true_value_function(&mdp).unwrap();
            assert!(op.fixed_point_residual(&v_pi) <= 1e-8);
            // Row sums stay below the largest discount (substochasticity).
            for s in 0..mdp.n_states() {
                let sum: f64 = op.transition.row(s).iter().sum();
                assert!(sum >= -1e-12 && sum <= mdp.discount().max() + 1e-10);
            }
        }
    }

    #[test]
    fn composite_operator_stitches_rows() {
        let (mdp, _) = presets::mdp_b();
        let low = DVector::from_element(2, 0.2);
        let high = DVector::from_element(2, 0.9);
        let scheme = crate::trace::LambdaScheme::Composite {
            partition: vec![0, 1],
            cells: vec![
                CellLambda::StateDependent(low.clone()),
                CellLambda::StateDependent(high.clone()),
            ],
        };
        let composite = bellman_for_scheme(&mdp, &scheme).unwrap().unwrap();
        let op_low = bellman_state_dependent(&mdp, &low).unwrap();
        let op_high = bellman_state_dependent(&mdp, &high).unwrap();
        assert!((composite.transition.row(0) - op_low.transition.row(0)).amax() <= 1e-15);
        assert!((composite.transition.row(1) - op_high.transition.row(1)).amax() <= 1e-15);
        assert!((composite.reward[0] - op_low.reward[0]).abs() <= 1e-15);
        assert!((composite.reward[1] - op_high.reward[1]).abs() <= 1e-15);
        // The composite operator keeps the true value function fixed.
        let v_pi = crate::mdp::true_value_function(&mdp).unwrap();
        assert!(composite.fixed_point_residual(&v_pi) <= 1e-8);
        // History cells have no closed form.
        let hist = crate::trace::LambdaScheme::Composite {
            partition: vec![0, 1],
            cells: vec![
                CellLambda::StateDependent(low),
                CellLambda::HistoryDependent { bound: 1.0 },
            ],
        };
        assert!(bellman_for_scheme(&mdp, &hist).unwrap().is_none());
    }

    #[test]
    fn dual_solve_cases() {
        // Zero slope and offset: zero solution.
        let gram = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let p = ProjectedProblem::new(
            DMatrix::zeros(2, 2),
            DVector::zeros(2),
            gram,
            RegularizerSpec::None,
            1.0,
            1.0,
        )
        .unwrap();
        assert_eq!(p.solve_x(&DVector::zeros(2)).unwrap(), DVector::zeros(2));

        // Scalar case worked by hand: gram 1, offset 1, slope -0.1.
        let p = mdp_a_problem(10.0, 10.0);
        assert!((p.gram()[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((p.offset()[0] - 1.0).abs() < 1e-12);
        assert!((p.slope()[(0, 0)] + 0.1).abs() < 1e-12);
        let x = p.solve_x(&DVector::zeros(1)).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn objective_scalar_values_and_direct_cross_check() {
        let p = mdp_a_problem(10.0, 10.0);
        assert!((p.objective(&DVector::from_element(1, 10.0)).unwrap()).abs() < 1e-20);
        assert!((p.objective(&DVector::from_element(1, 0.0)).unwrap() - 0.5).abs() < 1e-12);

        let (mdp, features) = presets::mdp_a();
        let op = bellman_state_dependent(&mdp, &DVector::from_element(2, 0.0)).unwrap();
        for t in [-3.0, 0.0, 2.5, 10.0] {
            let theta = DVector::from_element(1, t);
            let via_problem = p.objective(&theta).unwrap();
            let direct = objective_direct(&mdp, &features, &op, &theta);
            assert!(
                (via_problem - direct).abs() < 1e-12,
                "objective mismatch at {t}: {via_problem} vs {direct}"
            );
        }
    }

    #[test]
    fn gradient_scalar_value_and_zero_at_flat_point() {
        let p = mdp_a_problem(10.0, 10.0);
        let g = p.grad_checked(&DVector::zeros(1)).unwrap();
        assert!((g[0] + 0.1).abs() < 1e-12);
        // At the Bellman solution the dual solve is zero and so are both
        // gradient expressions.
        let g = p.grad_checked(&DVector::from_element(1, 10.0)).unwrap();
        assert!(g[0].abs() < 1e-14);
    }

    #[test]
    fn gradients_agree_and_match_finite_differences_on_random_models() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let (mdp, features, lambda) = presets::random_mdp(5, 3, &mut rng);
            let op = bellman_state_dependent(&mdp, &lambda).unwrap();
            let p = ProjectedProblem::from_bellman(
                &mdp,
                &features,
                &op,
                RegularizerSpec::None,
                5.0,
                5.0,
            )
            .unwrap();
            for _ in 0..5 {
                let theta = DVector::from_fn(3, |_, _| 4.0 * rng.random::<f64>() - 2.0);
                let a = p.grad_primary(&theta).unwrap();
                let b = p.grad_alt(&theta).unwrap();
                assert!((&a - &b).norm() <= 1e-10 * (1.0 + a.norm()));
                // Central finite differences of the objective.
                let h = 1e-5;
                let mut fd = DVector::zeros(3);
                for i in 0..3 {
                    let mut plus = theta.clone();
                    plus[i] += h;
                    let mut minus = theta.clone();
                    minus[i] -= h;
                    fd[i] =
                        (p.objective(&plus).unwrap() - p.objective(&minus).unwrap()) / (2.0 * h);
                }
                assert!(
                    (&a - &fd).norm() <= 1e-6 * (1.0 + fd.norm()),
                    "gradient {a} vs finite difference {fd}"
                );
            }
        }
    }

    #[test]
    fn ball_optimum_interior_and_boundary() {
        // Unconstrained optimum at 10 is inside a radius-20 ball.
        let p = mdp_a_problem(20.0, 10.0);
        let opt = p.theta_opt_ball().unwrap();
        assert_eq!(opt.multiplier, 0.0);
        assert!((opt.theta[0] - 10.0).abs() < 1e-9);
        assert!(p.grad_reg(&opt.theta).unwrap().norm() < 1e-9);
        assert!(opt.value.abs() < 1e-18);

        // Radius 5 clips it to the boundary; grid search confirms.
        let p = mdp_a_problem(5.0, 10.0);
        let opt = p.theta_opt_ball().unwrap();
        assert!(opt.multiplier > 0.0);
        assert!((opt.theta[0] - 5.0).abs() < 1e-9);
        let mut best = f64::INFINITY;
        let mut best_t = 0.0;
        let mut t = -5.0;
        while t <= 5.0 {
            let v = p.objective(&DVector::from_element(1, t)).unwrap();
            if v < best {
                best = v;
                best_t = t;
            }
            t += 1e-4;
        }
        assert!((best_t - opt.theta[0]).abs() < 1e-3);
        assert!((best - opt.value).abs() < 1e-4);
    }

    #[test]
    fn strong_regularization_pulls_optimum_to_center() {
        let (mdp, features) = presets::mdp_a();
        let op = bellman_state_dependent(&mdp, &DVector::from_element(2, 0.0)).unwrap();
        let mut norms = Vec::new();
        for weight in [1e2, 1e4] {
            let p = ProjectedProblem::from_bellman(
                &mdp,
                &features,
                &op,
                RegularizerSpec::quadratic(weight, DVector::zeros(1)),
                20.0,
                10.0,
            )
            .unwrap();
            norms.push(p.theta_opt_ball().unwrap().theta.norm());
        }
        assert!(norms[1] < norms[0]);
        assert!(norms[1] < 1e-2);
    }

    #[test]
    fn flat_optimum_set_distance_uses_projection() {
        // Zero slope and offset make the objective identically zero: the
        // optimum set is the whole ball.
        let gram = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let p = ProjectedProblem::new(
            DMatrix::zeros(2, 2),
            DVector::zeros(2),
            gram,
            RegularizerSpec::None,
            2.0,
            2.0,
        )
        .unwrap();
        let opt = p.theta_opt_ball().unwrap();
        assert!(opt.flat);
        // Any interior point is optimal: distance zero.
        let inside = DVector::from_row_slice(&[0.5, -0.5]);
        assert!(p.distance_to_opt(&opt, &inside) < 1e-9);
        // Points outside the ball project onto it.
        let outside = DVector::from_row_slice(&[4.0, 0.0]);
        assert!((p.distance_to_opt(&opt, &outside) - 2.0).abs() < 1e-8);
    }

    #[test]
    fn saddle_interior_case_matches_ball_optimum() {
        // Unconstrained optimum inside the primal ball and a generous dual
        // ball: the saddle coincides with the plain optimum and the dual
        // solve, and the dual part sits at the origin because the Bellman
        // error is fully reducible.
        let p = mdp_a_problem(20.0, 10.0);
        let saddle = p.saddle_point().unwrap();
        assert!(saddle.x_interior);
        assert!((saddle.theta[0] - 10.0).abs() < 1e-6);
        assert!(saddle.x_bar.norm() < 1e-6);

        // Boundary primal optimum: the dual part tracks the dual solve.
        let p = mdp_a_problem(5.0, 10.0);
        let saddle = p.saddle_point().unwrap();
        let opt = p.theta_opt_ball().unwrap();
        assert!(saddle.x_interior);
        assert!((saddle.theta[0] - opt.theta[0]).abs() < 1e-6);
        let x_at_opt = p.solve_x(&saddle.theta).unwrap();
        assert!((&saddle.x_bar - &x_at_opt).norm() < 1e-6);
    }

    #[test]
    fn saddle_degenerate_payoff_is_zero() {
        let gram = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let p = ProjectedProblem::new(
            DMatrix::zeros(2, 2),
            DVector::zeros(2),
            gram,
            RegularizerSpec::None,
            3.0,
            3.0,
        )
        .unwrap();
        let saddle = p.saddle_point().unwrap();
        assert!(saddle.x_bar.norm() < 1e-8);
        assert!(saddle.value.abs() < 1e-12);
    }

    #[test]
    fn danskin_envelope_dominates_payoff_and_matches_differences() {
        let (mdp, features) = presets::mdp_b();
        let op = bellman_state_dependent(&mdp, &DVector::from_row_slice(&[0.4, 0.6])).unwrap();
        let p = ProjectedProblem::from_bellman(
            &mdp,
            &features,
            &op,
            RegularizerSpec::quadratic(0.05, DVector::zeros(2)),
            4.0,
            1.0,
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let theta = DVector::from_fn(2, |_, _| 8.0 * rng.random::<f64>() - 4.0);
            let envelope = p.outer_objective(&theta).unwrap();
            for _ in 0..10 {
                let x = crate::linalg::project_ball(
                    &DVector::from_fn(2, |_, _| 2.0 * rng.random::<f64>() - 1.0),
                    p.r_x,
                );
                assert!(envelope >= p.payoff(&theta, &x) - 1e-10);
            }
            // Finite differences of the envelope objective.
            let h = 1e-6;
            let grad = p.outer_grad(&theta).unwrap();
            for i in 0..2 {
                let mut plus = theta.clone();
                plus[i] += h;
                let mut minus = theta.clone();
                minus[i] -= h;
                let fd = (p.outer_objective(&plus).unwrap()
                    - p.outer_objective(&minus).unwrap())
                    / (2.0 * h);
                assert!(
                    (grad[i] - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "envelope gradient {} vs fd {fd}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn td_fixed_point_scalar_and_failure_certificate() {
        let p = mdp_a_problem(20.0, 10.0);
        match p.td_fixed_point() {
            TdFixedPoint::Found {
                theta,
                sym_max_eig,
                residual,
            } => {
                assert!((theta[0] - 10.0).abs() < 1e-10);
                assert!((sym_max_eig + 0.1).abs() < 1e-10);
                assert!(residual <= 1e-10);
            }
            other => panic!("expected fixed point, got {other:?}"),
        }

        // A singular slope yields a certificate, not a guess.
        let gram = DMatrix::<f64>::identity(2, 2);
        let slope = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 0.0]);
        let p = ProjectedProblem::new(
            slope,
            DVector::zeros(2),
            gram,
            RegularizerSpec::None,
            1.0,
            1.0,
        )
        .unwrap();
        assert!(matches!(
            p.td_fixed_point(),
            TdFixedPoint::NotNegativeDefinite { .. }
        ));
    }

    #[test]
    fn td_fixed_point_residual_on_random_negative_definite_slopes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let d = 3;
            let m = DMatrix::from_fn(d, d, |_, _| 2.0 * rng.random::<f64>() - 1.0);
            // Symmetric negative definite part plus a skew perturbation.
            let slope = -(&m * m.transpose()) - DMatrix::<f64>::identity(d, d) * 0.1;
            let offset = DVector::from_fn(d, |_, _| 2.0 * rng.random::<f64>() - 1.0);
            let p = ProjectedProblem::new(
                slope,
                offset,
                DMatrix::<f64>::identity(d, d),
                RegularizerSpec::None,
                1.0,
                1.0,
            )
            .unwrap();
            match p.td_fixed_point() {
                TdFixedPoint::Found { residual, .. } => assert!(residual <= 1e-10),
                other => panic!("expected fixed point, got {other:?}"),
            }
        }
    }

    #[test]
    fn eta_scaling_identity_and_dual_rescaling() {
        let p = mdp_a_problem(5.0, 10.0);
        let same = p.eta_scaled(1.0).unwrap();
        assert!((same.slope() - p.slope()).amax() <= 1e-15);
        assert!((same.offset() - p.offset()).amax() <= 1e-15);
        assert!((same.gram() - p.gram()).amax() <= 1e-15);

        let eta = 4.0;
        let scaled = p.eta_scaled(eta).unwrap();
        let saddle = p.saddle_point().unwrap();
        let scaled_saddle = scaled.saddle_point().unwrap();
        // Dual optimum rescales by 1/sqrt(eta); the primal set is unchanged
        // when the dual optimum is interior.
        assert!(saddle.x_interior && scaled_saddle.x_interior);
        assert!(
            (&scaled_saddle.x_bar * libm::sqrt(eta) - &saddle.x_bar).norm() < 1e-6,
            "x {} vs scaled {}",
            saddle.x_bar,
            scaled_saddle.x_bar
        );
        assert!((&scaled_saddle.theta - &saddle.theta).norm() < 1e-6);
        assert!(p.eta_scaled(0.0).is_err());
    }

    #[test]
    fn sufficient_dual_radius_contains_all_dual_solves() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let (mdp, features, lambda) = presets::random_mdp(4, 2, &mut rng);
            let op = bellman_state_dependent(&mdp, &lambda).unwrap();
            let p = ProjectedProblem::from_bellman(
                &mdp,
                &features,
                &op,
                RegularizerSpec::None,
                3.0,
                1.0,
            )
            .unwrap();
            let radius = p.sufficient_x_radius();
            for _ in 0..20 {
                let raw = DVector::from_fn(2, |_, _| 2.0 * rng.random::<f64>() - 1.0);
                let theta = crate::linalg::project_ball(&(raw * 3.0), 3.0);
                assert!(p.solve_x(&theta).unwrap().norm() <= radius + 1e-9);
            }
        }
    }

    #[test]
    fn problem_construction_rejects_bad_inputs() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            ProjectedProblem::new(
                DMatrix::zeros(2, 2),
                DVector::zeros(2),
                asym,
                RegularizerSpec::None,
                1.0,
                1.0
            ),
            Err(OracleError::BadGram(_))
        ));

        // Rank-one Gram matrix with an offset outside its column space.
        let gram = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let off_span = DVector::from_row_slice(&[0.0, 1.0]);
        assert!(matches!(
            ProjectedProblem::new(
                DMatrix::zeros(2, 2),
                off_span,
                gram,
                RegularizerSpec::None,
                1.0,
                1.0
            ),
            Err(OracleError::OffSpan { .. })
        ));
    }
}

#[cfg(test)]
mod oracle_document_tests {
    use super::*;
    use crate::presets;
    use nalgebra::DVector;

    #[test]
    fn unit_lambda_offset_encodes_the_value_function_image() {
        let (mdp, features) = presets::mdp_b();
        let op = bellman_state_dependent(&mdp, &DVector::from_element(2, 1.0)).unwrap();
        let p = ProjectedProblem::from_bellman(
            &mdp,
            &features,
            &op,
            RegularizerSpec::None,
            1.0,
            1.0,
        )
        .unwrap();
        let v_pi = crate::mdp::true_value_function(&mdp).unwrap();
        let expected = mdp.weighted_feature_product(&features, &v_pi);
        assert!((p.offset() - expected).norm() < 1e-10);
    }

    /// Continuity smoke test: a vanishing regularizer weight perturbs the
    /// reported optimum only slightly.
    #[test]
    fn tiny_regularizer_weight_barely_moves_the_optimum() {
        let (mdp, features) = presets::mdp_b();
        let op = bellman_state_dependent(&mdp, &DVector::from_row_slice(&[0.5, 0.5])).unwrap();
        let solve = |weight: f64| {
            let reg = if weight == 0.0 {
                RegularizerSpec::None
            } else {
                RegularizerSpec::quadratic(weight, DVector::zeros(2))
            };
            ProjectedProblem::from_bellman(&mdp, &features, &op, reg, 22.0, 16.0)
                .unwrap()
                .theta_opt_ball()
                .unwrap()
                .theta
        };
        let base = solve(0.0);
        let perturbed = solve(1e-6);
        assert!(
            (base - perturbed).norm() < 1e-3,
            "optimum jumped under a vanishing weight"
        );
    }
}
