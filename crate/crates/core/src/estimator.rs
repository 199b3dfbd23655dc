//! Empirical estimation of the projected-problem matrices from a long
//! simulated run of the behavior chain. This is the only route to the
//! projected problem for history-dependent lambda schemes, whose Bellman
//! operator has no closed form; for state-dependent schemes it doubles as
//! a consistency check against the exact matrices.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};

use crate::bellman::{OracleError, ProjectedProblem, RegularizerSpec};
use crate::mdp::{FeatureMap, ValidatedMdp};
use crate::rng::SimRng;
use crate::sim;
use crate::trace::{LambdaScheme, TraceState};

/// Horizons below this raise the short-horizon warning flag.
pub const SHORT_HORIZON: usize = 10_000;
/// Number of batch-means blocks for standard errors.
pub const DEFAULT_BLOCKS: usize = 20;
/// Steps dropped before accumulation starts, letting the trace forget its
/// initialization.
pub const DEFAULT_BURN_IN: usize = 10_000;

#[derive(Clone, Debug)]
pub enum EstimateError {
    Oracle(OracleError),
    NonFinite(String),
}

impl fmt::Display for EstimateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimateError::Oracle(e) => write!(f, "{e}"),
            EstimateError::NonFinite(what) => write!(f, "non-finite average in {what}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for EstimateError {}

impl From<OracleError> for EstimateError {
    fn from(e: OracleError) -> Self {
        EstimateError::Oracle(e)
    }
}

/// Estimated projected problem plus batch-means standard errors for the
/// simulated entries (the Gram matrix is computed exactly).
#[derive(Clone, Debug)]
pub struct EmpiricalEstimate {
    pub problem: ProjectedProblem,
    pub slope_se: DMatrix<f64>,
    pub offset_se: DVector<f64>,
    pub horizon: usize,
    pub blocks: usize,
    pub short_horizon_warning: bool,
}

/// Long-run averages of the trace-weighted update moments:
/// slope from `e * rho (gamma' phi(next) - phi(cur))'`, offset from
/// `e * rho * mean-reward`, with standard errors over equal blocks.
#[allow(clippy::too_many_arguments)]
pub fn estimate_projected_problem(
    mdp: &ValidatedMdp,
    features: &FeatureMap,
    scheme: &LambdaScheme,
    horizon: usize,
    seed: u64,
    regularizer: RegularizerSpec,
    r_theta: f64,
    r_x: f64,
) -> Result<EmpiricalEstimate, EstimateError> {
    estimate_with_blocks(
        mdp,
        features,
        scheme,
        horizon,
        seed,
        regularizer,
        r_theta,
        r_x,
        DEFAULT_BLOCKS,
        DEFAULT_BURN_IN,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_with_blocks(
    mdp: &ValidatedMdp,
    features: &FeatureMap,
    scheme: &LambdaScheme,
    horizon: usize,
    seed: u64,
    regularizer: RegularizerSpec,
    r_theta: f64,
    r_x: f64,
    blocks: usize,
    burn_in: usize,
) -> Result<EmpiricalEstimate, EstimateError> {
    let d = features.dim();
    let blocks = blocks.max(1);
    let block_len = (horizon / blocks).max(1);
    let total = block_len * blocks;

    let mut rng = SimRng::new(seed);
    let mut s = sim::sample_initial_state(mdp, None, &mut rng);
    let mut trace = TraceState::init(features, scheme, s);
    for _ in 0..burn_in {
        let s_next = sim::sample_next_state(mdp, s, rng.chain());
        trace
            .step(mdp, features, scheme, s, s_next)
            .map_err(|e| EstimateError::NonFinite(alloc::format!("burn-in: {e}")))?;
        s = s_next;
    }

    let mut slope_blocks: Vec<DMatrix<f64>> = Vec::with_capacity(blocks);
    let mut offset_blocks: Vec<DVector<f64>> = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        let mut slope_sum = DMatrix::<f64>::zeros(d, d);
        let mut offset_sum = DVector::<f64>::zeros(d);
        for _ in 0..block_len {
            let s_next = sim::sample_next_state(mdp, s, rng.chain());
            let rho = mdp
                .importance_ratio(s, s_next)
                .expect("validated model has no undefined ratios");
            let gamma_next = mdp.discount()[s_next];
            let phi = features.of_state(s);
            let phi_next = features.of_state(s_next);
            let weighted = &phi_next * gamma_next - &phi;
            let e = trace.total().clone();
            slope_sum += &e * weighted.transpose() * rho;
            offset_sum += &e * (rho * mdp.reward_mean()[(s, s_next)]);
            trace
                .step(mdp, features, scheme, s, s_next)
                .map_err(|e| EstimateError::NonFinite(alloc::format!("trace: {e}")))?;
            s = s_next;
        }
        slope_blocks.push(slope_sum / block_len as f64);
        offset_blocks.push(offset_sum / block_len as f64);
    }

    let mut slope = DMatrix::<f64>::zeros(d, d);
    let mut offset = DVector::<f64>::zeros(d);
    for (sb, ob) in slope_blocks.iter().zip(&offset_blocks) {
        slope += sb;
        offset += ob;
    }
    slope /= blocks as f64;
    offset /= blocks as f64;
    if slope.iter().any(|v| !v.is_finite()) {
        return Err(EstimateError::NonFinite(String::from("slope estimate")));
    }
    if offset.iter().any(|v| !v.is_finite()) {
        return Err(EstimateError::NonFinite(String::from("offset estimate")));
    }

    // Standard error of the overall mean from the block means.
    let mut slope_var = DMatrix::<f64>::zeros(d, d);
    let mut offset_var = DVector::<f64>::zeros(d);
    for (sb, ob) in slope_blocks.iter().zip(&offset_blocks) {
        let ds = sb - &slope;
        let dv = ob - &offset;
        slope_var += ds.component_mul(&ds);
        offset_var += dv.component_mul(&dv);
    }
    let denom = (blocks.max(2) - 1) as f64 * blocks as f64;
    let slope_se = (slope_var / denom).map(libm::sqrt);
    let offset_se = (offset_var / denom).map(libm::sqrt);

    // The Gram matrix is available exactly.
    let phi = features.matrix();
    let mut weighted = phi.transpose();
    for s in 0..mdp.n_states() {
        let w = mdp.stationary()[s];
        for r in 0..d {
            weighted[(r, s)] *= w;
        }
    }
    let gram = &weighted * phi;
    let gram = (&gram + gram.transpose()) * 0.5;

    let problem = ProjectedProblem::new(slope, offset, gram, regularizer, r_theta, r_x)?;
    Ok(EmpiricalEstimate {
        problem,
        slope_se,
        offset_se,
        horizon: total,
        blocks,
        short_horizon_warning: horizon < SHORT_HORIZON,
    })
}
