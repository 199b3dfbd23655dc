//! Dense linear-algebra helpers shared by the oracle and the simulation
//! side: rank-aware least squares, ball projections, power iteration, and
//! the exact minimizer of a convex quadratic over a Euclidean ball.
//!
//! Everything here works on rank-deficient inputs; singular values below
//! [`SV_CUTOFF_REL`] times the largest one are treated as zero.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative singular-value cutoff used by every pseudo-inverse style solve.
pub const SV_CUTOFF_REL: f64 = 1e-10;

/// Euclidean projection onto the origin-centered ball of the given radius.
pub fn project_ball(v: &DVector<f64>, radius: f64) -> DVector<f64> {
    let norm = v.norm();
    if norm <= radius {
        v.clone()
    } else {
        v * (radius / norm)
    }
}

/// Spectral radius of a nonnegative matrix by power iteration.
///
/// Iterates on `m + I` (same eigenvector structure, eigenvalues shifted by
/// one) so that periodic chains cannot stall the iteration, then shifts the
/// estimate back.
pub fn spectral_radius(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> f64 {
    let n = m.nrows();
    let shifted = m + DMatrix::<f64>::identity(n, n);
    let mut x = DVector::<f64>::from_element(n, 1.0 / libm::sqrt(n as f64));
    let mut lambda = 0.0f64;
    for _ in 0..max_iter {
        let y = &shifted * &x;
        let next = y.norm();
        if next == 0.0 {
            return 0.0;
        }
        x = y / next;
        if libm::fabs(next - lambda) <= tol * next.max(1.0) {
            return next - 1.0;
        }
        lambda = next;
    }
    lambda - 1.0
}

/// Orthonormal basis of the column space of a matrix, with singular values
/// below the relative cutoff discarded.
#[derive(Clone, Debug)]
pub struct SpanBasis {
    /// Columns form an orthonormal basis of the subspace.
    pub basis: DMatrix<f64>,
}

impl SpanBasis {
    pub fn of_columns(m: &DMatrix<f64>) -> Self {
        let svd = m.clone().svd(true, false);
        let u = svd.u.expect("SVD requested U");
        let smax = svd.singular_values.max();
        let cutoff = SV_CUTOFF_REL * smax.max(1e-300);
        let kept: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > cutoff)
            .collect();
        let mut basis = DMatrix::<f64>::zeros(m.nrows(), kept.len());
        for (j, &i) in kept.iter().enumerate() {
            basis.set_column(j, &u.column(i));
        }
        SpanBasis { basis }
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Orthogonal projection of `v` onto the subspace.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.basis * (self.basis.transpose() * v)
    }

    /// Norm of the component of `v` orthogonal to the subspace.
    pub fn residual_off(&self, v: &DVector<f64>) -> f64 {
        (v - self.project(v)).norm()
    }
}

/// Minimum-norm least-squares solution of `m x = rhs` via SVD with the
/// relative singular-value cutoff.
pub fn min_norm_solve(m: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = SV_CUTOFF_REL * smax.max(1e-300);
    let u = svd.u.as_ref().expect("SVD requested U");
    let v_t = svd.v_t.as_ref().expect("SVD requested V^T");
    let mut coeff = u.transpose() * rhs;
    for i in 0..svd.singular_values.len() {
        if svd.singular_values[i] > cutoff {
            coeff[i] /= svd.singular_values[i];
        } else {
            coeff[i] = 0.0;
        }
    }
    v_t.transpose() * coeff
}

/// Moore-Penrose pseudo-inverse with the relative cutoff.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = SV_CUTOFF_REL * smax.max(1e-300);
    let u = svd.u.expect("SVD requested U");
    let v_t = svd.v_t.expect("SVD requested V^T");
    let mut sigma_inv = DMatrix::<f64>::zeros(v_t.nrows(), u.ncols());
    for i in 0..svd.singular_values.len() {
        if svd.singular_values[i] > cutoff {
            sigma_inv[(i, i)] = 1.0 / svd.singular_values[i];
        }
    }
    v_t.transpose() * sigma_inv * u.transpose()
}

/// Eigenvalue range `(min, max)` of the symmetrized part of a matrix.
pub fn sym_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in eig.eigenvalues.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// Smallest eigenvalue of a symmetric PSD matrix that exceeds the relative
/// cutoff, or zero when the matrix vanishes.
pub fn min_nonzero_eigenvalue(psd: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(psd.clone());
    let emax = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let cutoff = SV_CUTOFF_REL * emax.max(1e-300);
    eig.eigenvalues
        .iter()
        .copied()
        .filter(|&v| v > cutoff)
        .fold(f64::INFINITY, f64::min)
        .min(emax)
}

/// Result of minimizing a convex quadratic over an origin-centered ball.
#[derive(Clone, Debug)]
pub struct BallQuadMin {
    /// A minimizer (the minimum-norm one when the constraint is inactive).
    pub point: DVector<f64>,
    /// Lagrange multiplier of the ball constraint (zero when inactive).
    pub multiplier: f64,
    /// True when the Hessian is singular and the constraint inactive, so
    /// the minimizer set is an affine slice of the ball rather than a point.
    pub flat: bool,
}

/// Exact minimizer of `u -> 0.5 u' H u + g' u` over the ball of the given
/// radius, for symmetric PSD `H` with `g` in its column space.
///
/// When the unconstrained minimum-norm solution fits inside the ball it is
/// returned with a zero multiplier; otherwise the multiplier is located by
/// bisection on `mu` in `(H + mu I) u = -g`, whose solution norm decreases
/// monotonically in `mu`.
pub fn min_quadratic_on_ball(
    hessian: &DMatrix<f64>,
    linear: &DVector<f64>,
    radius: f64,
    tol: f64,
) -> BallQuadMin {
    let d = hessian.nrows();
    let minus_g = -linear;
    let base = min_norm_solve(hessian, &minus_g);
    if base.norm() <= radius * (1.0 + 1e-12) {
        let svd = hessian.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let cutoff = SV_CUTOFF_REL * smax.max(1e-300);
        let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
        return BallQuadMin {
            point: base,
            multiplier: 0.0,
            flat: rank < d,
        };
    }
    let solve_at = |mu: f64| -> DVector<f64> {
        let shifted = hessian + DMatrix::<f64>::identity(d, d) * mu;
        shifted
            .clone()
            .lu()
            .solve(&minus_g)
            .unwrap_or_else(|| min_norm_solve(&shifted, &minus_g))
    };
    let mut lo = 0.0f64;
    let mut hi = (linear.norm() / radius).max(tol);
    while solve_at(hi).norm() > radius {
        hi *= 2.0;
    }
    while hi - lo > tol * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if solve_at(mid).norm() > radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    BallQuadMin {
        point: solve_at(hi),
        multiplier: hi,
        flat: false,
    }
}

/// Projected-gradient stationarity residual for minimization over a ball:
/// `|| point - proj(point - grad) ||`. Zero exactly at KKT points.
pub fn kkt_residual_ball(point: &DVector<f64>, grad: &DVector<f64>, radius: f64) -> f64 {
    (point - project_ball(&(point - grad), radius)).norm()
}

/// Euclidean projection of `v` onto the intersection of the ball of the
/// given radius and the affine set `{ u : H (u - anchor) = 0 }`, by
/// Dykstra's alternating projections.
///
/// The intersection is assumed nonempty (it contains `anchor` whenever
/// `anchor` is feasible for the ball).
pub fn project_affine_ball(
    v: &DVector<f64>,
    hessian: &DMatrix<f64>,
    anchor: &DVector<f64>,
    radius: f64,
    iters: usize,
) -> DVector<f64> {
    let d = hessian.nrows();
    let null_proj = DMatrix::<f64>::identity(d, d) - pseudo_inverse(hessian) * hessian;
    let onto_affine = |u: &DVector<f64>| anchor + &null_proj * (u - anchor);
    let mut x = v.clone();
    let mut p = DVector::<f64>::zeros(d);
    let mut q = DVector::<f64>::zeros(d);
    for _ in 0..iters {
        let y = onto_affine(&(&x + &p));
        p = &x + &p - &y;
        let next = project_ball(&(&y + &q), radius);
        q = &y + &q - &next;
        if (&next - &x).norm() <= 1e-14 * (1.0 + next.norm()) {
            x = next;
            break;
        }
        x = next;
    }
    x
}
