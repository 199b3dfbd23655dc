//! One-step update rules for the full algorithm family: two- and
//! single-time-scale GTDa/GTDb, their trace-truncated (biased) variants,
//! the mirror-descent variants, mirror-descent TD, and the unconstrained
//! single-time-scale form with a divergence guard.
//!
//! A step consumes one observed transition plus the *current* trace (which
//! contains the feature vector of the transition's origin state). Both
//! iterates are updated synchronously from the same snapshot; the trace is
//! advanced by the caller afterwards.

use alloc::format;
use alloc::string::String;
use core::fmt;

use nalgebra::DVector;

use crate::bellman::RegularizerSpec;
use crate::linalg::project_ball;
use crate::mdp::{FeatureMap, ValidatedMdp};
use crate::trace::{LambdaScheme, TraceError, TraceState};

/// Stepsize schedules: constant, power decay `a (n+1)^-c`, or `a / (n+1)`.
#[derive(Clone, Debug, PartialEq)]
pub enum StepsizeSchedule {
    Constant { a: f64 },
    Power { a: f64, exponent: f64 },
    OneOverN { a: f64 },
}

impl StepsizeSchedule {
    pub fn at(&self, n: u64) -> f64 {
        match self {
            StepsizeSchedule::Constant { a } => *a,
            StepsizeSchedule::Power { a, exponent } => {
                a * libm::pow((n + 1) as f64, -exponent)
            }
            StepsizeSchedule::OneOverN { a } => a / ((n + 1) as f64),
        }
    }

    pub fn coefficient(&self) -> f64 {
        match self {
            StepsizeSchedule::Constant { a }
            | StepsizeSchedule::Power { a, .. }
            | StepsizeSchedule::OneOverN { a } => *a,
        }
    }

    /// Polynomial decay rate (0 for constant, 1 for `a/(n+1)`).
    pub fn decay_exponent(&self) -> f64 {
        match self {
            StepsizeSchedule::Constant { .. } => 0.0,
            StepsizeSchedule::Power { exponent, .. } => *exponent,
            StepsizeSchedule::OneOverN { .. } => 1.0,
        }
    }

    /// True for decays with square-summable steps (`c in (1/2, 1]`).
    pub fn is_square_summable(&self) -> bool {
        let c = self.decay_exponent();
        c > 0.5 && c <= 1.0
    }
}

/// Algorithm selector with its variant-specific parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum AlgoVariant {
    /// Two-time-scale GTDa (gradient through the slope adjoint).
    Gtda2Ts,
    /// Two-time-scale GTDb (gradient through the residual form).
    Gtdb2Ts,
    /// Single-time-scale GTDa (saddle-point dynamics).
    Gtda1Ts,
    /// Single-time-scale GTDa with dual stepsizes scaled by `eta`.
    Gtda1TsEta { eta: f64 },
    /// Single-time-scale GTDa without projections (guarded).
    GtdaUnconstrained,
    /// Biased variants: traces pass through a ball truncation of radius
    /// `trunc` inside the updates (never inside the trace recursion).
    BiasedGtda2Ts { trunc: f64 },
    BiasedGtdb2Ts { trunc: f64 },
    BiasedGtda1Ts { trunc: f64 },
    /// Mirror-descent variants with dual potential exponent `q >= 2`.
    MdGtda { q: f64 },
    MdGtdb { q: f64 },
    MdTd { q: f64 },
}

impl AlgoVariant {
    pub fn is_two_time_scale(&self) -> bool {
        matches!(
            self,
            AlgoVariant::Gtda2Ts
                | AlgoVariant::Gtdb2Ts
                | AlgoVariant::BiasedGtda2Ts { .. }
                | AlgoVariant::BiasedGtdb2Ts { .. }
                | AlgoVariant::MdGtda { .. }
                | AlgoVariant::MdGtdb { .. }
        )
    }

    pub fn is_mirror(&self) -> bool {
        matches!(
            self,
            AlgoVariant::MdGtda { .. } | AlgoVariant::MdGtdb { .. } | AlgoVariant::MdTd { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AlgoError {
    BadParameter(String),
    /// Two-time-scale runs need the slow stepsizes to vanish relative to
    /// the fast ones.
    StepsizeIncompatible(String),
}

impl fmt::Display for AlgoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlgoError::BadParameter(msg) => write!(f, "bad algorithm parameter: {msg}"),
            AlgoError::StepsizeIncompatible(msg) => write!(f, "incompatible stepsizes: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for AlgoError {}

/// Full algorithm specification: variant, constraint radii, mirror level,
/// stepsize pair and regularizer.
#[derive(Clone, Debug, PartialEq)]
pub struct AlgorithmSpec {
    pub variant: AlgoVariant,
    pub r_theta: f64,
    pub r_x: f64,
    /// Level of the dual potential defining the mirror constraint set.
    pub level: f64,
    pub alpha: StepsizeSchedule,
    pub beta: StepsizeSchedule,
    pub regularizer: RegularizerSpec,
    /// Iterate-norm threshold that aborts unconstrained runs.
    pub divergence_guard: f64,
}

impl AlgorithmSpec {
    pub fn new(variant: AlgoVariant, alpha: StepsizeSchedule, beta: StepsizeSchedule) -> Self {
        AlgorithmSpec {
            variant,
            r_theta: 1.0,
            r_x: 1.0,
            level: 1.0,
            alpha,
            beta,
            regularizer: RegularizerSpec::None,
            divergence_guard: 1e6,
        }
    }

    pub fn with_radii(mut self, r_theta: f64, r_x: f64) -> Self {
        self.r_theta = r_theta;
        self.r_x = r_x;
        self
    }

    pub fn with_level(mut self, level: f64) -> Self {
        self.level = level;
        self
    }

    pub fn with_regularizer(mut self, regularizer: RegularizerSpec) -> Self {
        self.regularizer = regularizer;
        self
    }

    pub fn validate(&self) -> Result<(), AlgoError> {
        match &self.variant {
            AlgoVariant::Gtda1TsEta { eta } if !(*eta > 0.0) => {
                return Err(AlgoError::BadParameter(String::from("eta must be positive")));
            }
            AlgoVariant::BiasedGtda2Ts { trunc }
            | AlgoVariant::BiasedGtdb2Ts { trunc }
            | AlgoVariant::BiasedGtda1Ts { trunc }
                if !(*trunc > 0.0) =>
            {
                return Err(AlgoError::BadParameter(String::from(
                    "truncation radius must be positive",
                )));
            }
            AlgoVariant::MdGtda { q } | AlgoVariant::MdGtdb { q } | AlgoVariant::MdTd { q }
                if !(*q >= 2.0) =>
            {
                return Err(AlgoError::BadParameter(String::from(
                    "mirror exponent must be at least 2",
                )));
            }
            AlgoVariant::GtdaUnconstrained => {
                match &self.regularizer {
                    RegularizerSpec::Quadratic { weight, .. } if *weight > 0.0 => {}
                    _ => {
                        return Err(AlgoError::BadParameter(String::from(
                            "unconstrained runs need a quadratic regularizer with positive weight",
                        )));
                    }
                }
                if !(self.divergence_guard > 0.0) {
                    return Err(AlgoError::BadParameter(String::from(
                        "divergence guard must be positive",
                    )));
                }
            }
            _ => {}
        }
        if self.variant.is_mirror() && !(self.level > 0.0) {
            return Err(AlgoError::BadParameter(String::from(
                "mirror level must be positive",
            )));
        }
        if !matches!(self.variant, AlgoVariant::GtdaUnconstrained)
            && (!(self.r_theta > 0.0) || !(self.r_x > 0.0))
        {
            return Err(AlgoError::BadParameter(String::from(
                "constraint radii must be positive",
            )));
        }
        if self.variant.is_two_time_scale() {
            let ca = self.alpha.decay_exponent();
            let cb = self.beta.decay_exponent();
            let compatible = if ca == 0.0 && cb == 0.0 {
                self.alpha.coefficient() < self.beta.coefficient()
            } else {
                ca > cb
            };
            if !compatible {
                return Err(AlgoError::StepsizeIncompatible(format!(
                    "slow/fast stepsize ratio must vanish: alpha decay {ca}, beta decay {cb}"
                )));
            }
        }
        Ok(())
    }
}

/// Gradient of the dual potential `(1/q) ||u||^q`:
/// `u -> ||u||^(q-2) u`. The identity map for `q = 2`.
pub fn mirror_image(u: &DVector<f64>, q: f64) -> DVector<f64> {
    if q == 2.0 {
        return u * 1.0;
    }
    let norm = u.norm();
    if norm == 0.0 {
        return DVector::zeros(u.len());
    }
    u * libm::pow(norm, q - 2.0)
}

/// Inverse of [`mirror_image`]: the dual point whose image is `theta`.
pub fn mirror_preimage(theta: &DVector<f64>, q: f64) -> DVector<f64> {
    if q == 2.0 {
        return theta * 1.0;
    }
    let norm = theta.norm();
    if norm == 0.0 {
        return DVector::zeros(theta.len());
    }
    theta * libm::pow(norm, (2.0 - q) / (q - 1.0))
}

/// Radius of the level set `{ u : (1/q)||u||^q <= level }`.
pub fn level_radius(q: f64, level: f64) -> f64 {
    if q == 2.0 {
        libm::sqrt(2.0 * level)
    } else {
        libm::pow(q * level, 1.0 / q)
    }
}

/// Projection onto the dual level set (a ball of [`level_radius`]).
pub fn level_project(u: &DVector<f64>, q: f64, level: f64) -> DVector<f64> {
    project_ball(u, level_radius(q, level))
}

/// Ball truncation used by the biased variants: identity inside radius
/// `trunc`, radial scaling outside. Bounded, Lipschitz, norm-nonincreasing
/// and span-preserving.
pub fn truncate_trace(e: &DVector<f64>, trunc: f64) -> DVector<f64> {
    project_ball(e, trunc)
}

/// One observed transition of the behavior chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub from: usize,
    pub to: usize,
    pub reward: f64,
}

/// Iterate bundle: primal coefficients, dual tracker, and the dual-space
/// point for mirror variants (the primal is its image, stored derived).
#[derive(Clone, Debug, PartialEq)]
pub struct IterateState {
    pub theta: DVector<f64>,
    pub x: DVector<f64>,
    pub theta_star: Option<DVector<f64>>,
    pub n: u64,
}

impl IterateState {
    /// Zero initialization (inside every constraint set and the feature
    /// span).
    pub fn zeros(spec: &AlgorithmSpec, dim: usize) -> IterateState {
        IterateState {
            theta: DVector::zeros(dim),
            x: DVector::zeros(dim),
            theta_star: spec.variant.is_mirror().then(|| DVector::zeros(dim)),
            n: 0,
        }
    }

    /// Initialization at explicit iterates. Mirror variants receive the
    /// dual preimage of `theta` so that the stored primal is its image.
    pub fn at(spec: &AlgorithmSpec, theta: DVector<f64>, x: DVector<f64>) -> IterateState {
        let theta_star = match &spec.variant {
            AlgoVariant::MdGtda { q } | AlgoVariant::MdGtdb { q } | AlgoVariant::MdTd { q } => {
                Some(mirror_preimage(&theta, *q))
            }
            _ => None,
        };
        IterateState {
            theta,
            x,
            theta_star,
            n: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepError {
    /// The unconstrained iterates crossed the divergence guard.
    Diverged { n: u64, norm: f64 },
    /// A non-finite value appeared in an update.
    NonFinite { n: u64 },
    Trace(TraceError),
}

impl fmt::Display for StepError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepError::Diverged { n, norm } => {
                write!(f, "iterates diverged at step {n} (norm {norm:.3e})")
            }
            StepError::NonFinite { n } => write!(f, "non-finite update at step {n}"),
            StepError::Trace(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for StepError {}

impl From<TraceError> for StepError {
    fn from(e: TraceError) -> Self {
        StepError::Trace(e)
    }
}

/// Applies one algorithm update for the observed transition. The trace
/// must still hold the pre-transition state's feature contribution; the
/// caller advances it afterwards.
pub fn step(
    iter: &mut IterateState,
    spec: &AlgorithmSpec,
    mdp: &ValidatedMdp,
    features: &FeatureMap,
    scheme: &LambdaScheme,
    trace: &TraceState,
    sample: &Sample,
) -> Result<(), StepError> {
    let n = iter.n;
    let alpha = spec.alpha.at(n);
    let gamma_next = mdp.discount()[sample.to];
    let rho = mdp
        .importance_ratio(sample.from, sample.to)
        .expect("validated model has no undefined ratios");
    let phi = features.of_state(sample.from);
    let phi_next = features.of_state(sample.to);

    // Temporal-difference term at the current value estimate.
    let td = rho
        * (sample.reward + gamma_next * phi_next.dot(&iter.theta) - phi.dot(&iter.theta));

    // Direction of the dual update shared by every variant with a dual
    // iterate: e * td - phi (phi' x).
    let x_direction = |e: &DVector<f64>| e * td - &phi * phi.dot(&iter.x);

    // Direction used by the GTDa family for the primal update.
    let gtda_direction = |e: &DVector<f64>| {
        (&phi - &phi_next * gamma_next) * (rho * e.dot(&iter.x))
    };

    // Direction used by the GTDb family: per-cell correction with the
    // lambda each cell will apply on the upcoming trace step.
    let gtdb_direction = |cells: &mut dyn Iterator<Item = DVector<f64>>,
                          total: &DVector<f64>|
     -> Result<DVector<f64>, StepError> {
        let lambdas = scheme.next_lambdas(mdp, trace, sample.from, sample.to)?;
        let mut dir = total * td;
        for (i, cell) in cells.enumerate() {
            let weight = rho * (1.0 - lambdas[i]) * gamma_next * cell.dot(&iter.x);
            dir -= &phi_next * weight;
        }
        Ok(dir)
    };

    let reg_grad = spec.regularizer.grad(&iter.theta);
    let e_total = trace.total();

    let (theta_next, x_next, theta_star_next) = match &spec.variant {
        AlgoVariant::Gtda2Ts | AlgoVariant::Gtda1Ts | AlgoVariant::Gtda1TsEta { .. } => {
            let beta = match &spec.variant {
                AlgoVariant::Gtda2Ts => spec.beta.at(n),
                AlgoVariant::Gtda1Ts => alpha,
                AlgoVariant::Gtda1TsEta { eta } => eta * alpha,
                _ => unreachable!(),
            };
            let theta = project_ball(
                &(&iter.theta + gtda_direction(e_total) * alpha - &reg_grad * alpha),
                spec.r_theta,
            );
            let x = project_ball(&(&iter.x + x_direction(e_total) * beta), spec.r_x);
            (theta, x, None)
        }
        AlgoVariant::GtdaUnconstrained => {
            let theta = &iter.theta + gtda_direction(e_total) * alpha - &reg_grad * alpha;
            let x = &iter.x + x_direction(e_total) * alpha;
            let norm = libm::sqrt(theta.norm_squared() + x.norm_squared());
            if norm > spec.divergence_guard {
                return Err(StepError::Diverged { n, norm });
            }
            (theta, x, None)
        }
        AlgoVariant::Gtdb2Ts => {
            let beta = spec.beta.at(n);
            let mut cells = trace.cells().iter().cloned();
            let dir = gtdb_direction(&mut cells, e_total)?;
            let theta = project_ball(
                &(&iter.theta + dir * alpha - &reg_grad * alpha),
                spec.r_theta,
            );
            let x = project_ball(&(&iter.x + x_direction(e_total) * beta), spec.r_x);
            (theta, x, None)
        }
        AlgoVariant::BiasedGtda2Ts { trunc } | AlgoVariant::BiasedGtda1Ts { trunc } => {
            let beta = match &spec.variant {
                AlgoVariant::BiasedGtda2Ts { .. } => spec.beta.at(n),
                _ => alpha,
            };
            let truncated = truncate_trace(e_total, *trunc);
            let theta = project_ball(
                &(&iter.theta + gtda_direction(&truncated) * alpha - &reg_grad * alpha),
                spec.r_theta,
            );
            let x = project_ball(&(&iter.x + x_direction(&truncated) * beta), spec.r_x);
            (theta, x, None)
        }
        AlgoVariant::BiasedGtdb2Ts { trunc } => {
            let beta = spec.beta.at(n);
            let truncated = truncate_trace(e_total, *trunc);
            let mut cells = trace.cells().iter().map(|e| truncate_trace(e, *trunc));
            let dir = gtdb_direction(&mut cells, &truncated)?;
            let theta = project_ball(
                &(&iter.theta + dir * alpha - &reg_grad * alpha),
                spec.r_theta,
            );
            let x = project_ball(&(&iter.x + x_direction(&truncated) * beta), spec.r_x);
            (theta, x, None)
        }
        AlgoVariant::MdGtda { q } => {
            let beta = spec.beta.at(n);
            let star = iter.theta_star.as_ref().expect("mirror variant has a dual point");
            let star_next = level_project(
                &(star + gtda_direction(e_total) * alpha - &reg_grad * alpha),
                *q,
                spec.level,
            );
            let theta = mirror_image(&star_next, *q);
            let x = project_ball(&(&iter.x + x_direction(e_total) * beta), spec.r_x);
            (theta, x, Some(star_next))
        }
        AlgoVariant::MdGtdb { q } => {
            let beta = spec.beta.at(n);
            let mut cells = trace.cells().iter().cloned();
            let dir = gtdb_direction(&mut cells, e_total)?;
            let star = iter.theta_star.as_ref().expect("mirror variant has a dual point");
            let star_next = level_project(&(star + dir * alpha - &reg_grad * alpha), *q, spec.level);
            let theta = mirror_image(&star_next, *q);
            let x = project_ball(&(&iter.x + x_direction(e_total) * beta), spec.r_x);
            (theta, x, Some(star_next))
        }
        AlgoVariant::MdTd { q } => {
            let star = iter.theta_star.as_ref().expect("mirror variant has a dual point");
            let star_next = level_project(&(star + e_total * (td * alpha)), *q, spec.level);
            let theta = mirror_image(&star_next, *q);
            (theta, iter.x.clone(), Some(star_next))
        }
    };

    if theta_next.iter().any(|v| !v.is_finite()) || x_next.iter().any(|v| !v.is_finite()) {
        return Err(StepError::NonFinite { n });
    }
    iter.theta = theta_next;
    iter.x = x_next;
    iter.theta_star = theta_star_next;
    iter.n = n + 1;
    Ok(())
}
