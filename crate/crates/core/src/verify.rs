//! Cross-checks between simulation and the analytic oracle: stationary
//! expectation identities, gradient agreement, mean-update fixed points,
//! exact reduction identities between algorithm variants, and the trace
//! conditions. Each check produces a machine-readable report with its
//! measured margin and threshold.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::algo::{
    self, AlgoVariant, AlgorithmSpec, IterateState, Sample, StepsizeSchedule,
};
use crate::bellman::{bellman_for_scheme, ProjectedProblem, RegularizerSpec};
use crate::linalg::{kkt_residual_ball, project_ball};
use crate::mdp::{true_value_function, FeatureMap, ValidatedMdp};
use crate::rng::SimRng;
use crate::sim::{self, SimError};
use crate::trace::{CellLambda, LambdaScheme, TraceState};

/// Outcome of one named check: the measured margin against its threshold.
/// The margin is oriented so that `margin <= threshold` means pass.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub margin: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckReport {
    fn new(name: String, margin: f64, threshold: f64, detail: String) -> Self {
        CheckReport {
            passed: margin <= threshold,
            name,
            margin,
            threshold,
            detail,
        }
    }
}

/// True when every check in the slice passed.
pub fn all_passed(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

// ---------------------------------------------------------------------
// Stationary expectation identities
// ---------------------------------------------------------------------

struct MomentAverages {
    feature_outer: DMatrix<f64>,
    probe_terms: Vec<DVector<f64>>,
    residual_outer: DMatrix<f64>,
    shifted_outer: DMatrix<f64>,
}

/// Accumulates the four trace moments over `blocks` equal blocks and
/// returns (mean, standard error) pairs entrywise.
#[allow(clippy::too_many_arguments)]
fn moment_block_averages(
    mdp: &ValidatedMdp,
    features: &FeatureMap,
    scheme: &LambdaScheme,
    probes: &[DVector<f64>],
    horizon: usize,
    seed: u64,
    blocks: usize,
    burn_in: usize,
) -> Result<(MomentAverages, MomentAverages), SimError> {
    let d = features.dim();
    let block_len = (horizon / blocks).max(1);
    let mut rng = SimRng::new(seed);
    let mut s = sim::sample_initial_state(mdp, None, &mut rng);
    let mut trace = TraceState::init(features, scheme, s);
    for _ in 0..burn_in {
        let s_next = sim::sample_next_state(mdp, s, rng.chain());
        trace.step(mdp, features, scheme, s, s_next)?;
        s = s_next;
    }

    let zero = || MomentAverages {
        feature_outer: DMatrix::zeros(d, d),
        probe_terms: probes.iter().map(|_| DVector::zeros(d)).collect(),
        residual_outer: DMatrix::zeros(d, d),
        shifted_outer: DMatrix::zeros(d, d),
    };
    let mut block_means: Vec<MomentAverages> = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        let mut acc = zero();
        for _ in 0..block_len {
            let s_next = sim::sample_next_state(mdp, s, rng.chain());
            let rho = mdp.importance_ratio(s, s_next).expect("validated model");
            let gamma_next = mdp.discount()[s_next];
            let phi = features.of_state(s);
            let phi_next = features.of_state(s_next);
            let lambdas = scheme.next_lambdas(mdp, &trace, s, s_next)?;
            let e = trace.total().clone();

            acc.feature_outer += &phi * phi.transpose();
            for (k, v) in probes.iter().enumerate() {
                let td = rho * (mdp.reward_mean()[(s, s_next)] + gamma_next * v[s_next] - v[s]);
                acc.probe_terms[k] += &e * td;
            }
            acc.residual_outer += &e * (&phi - &phi_next * gamma_next).transpose() * rho;
            for (i, cell) in trace.cells().iter().enumerate() {
                let w = rho * (1.0 - lambdas[i]) * gamma_next;
                acc.shifted_outer += cell * phi_next.transpose() * w;
            }

            trace.step(mdp, features, scheme, s, s_next)?;
            s = s_next;
        }
        let inv = 1.0 / block_len as f64;
        acc.feature_outer *= inv;
        for t in &mut acc.probe_terms {
            *t *= inv;
        }
        acc.residual_outer *= inv;
        acc.shifted_outer *= inv;
        block_means.push(acc);
    }

    let mut mean = zero();
    for b in &block_means {
        mean.feature_outer += &b.feature_outer;
        for (k, t) in b.probe_terms.iter().enumerate() {
            mean.probe_terms[k] += t;
        }
        mean.residual_outer += &b.residual_outer;
        mean.shifted_outer += &b.shifted_outer;
    }
    let inv = 1.0 / blocks as f64;
    mean.feature_outer *= inv;
    for t in &mut mean.probe_terms {
        *t *= inv;
    }
    mean.residual_outer *= inv;
    mean.shifted_outer *= inv;

    let mut var = zero();
    for b in &block_means {
        let df = &b.feature_outer - &mean.feature_outer;
        var.feature_outer += df.component_mul(&df);
        for (k, t) in b.probe_terms.iter().enumerate() {
            let dt = t - &mean.probe_terms[k];
            var.probe_terms[k] += dt.component_mul(&dt);
        }
        let dr = &b.residual_outer - &mean.residual_outer;
        var.residual_outer += dr.component_mul(&dr);
        let ds = &b.shifted_outer - &mean.shifted_outer;
        var.shifted_outer += ds.component_mul(&ds);
    }
    let denom = ((blocks.max(2) - 1) * blocks) as f64;
    let se = MomentAverages {
        feature_outer: (var.feature_outer / denom).map(libm::sqrt),
        probe_terms: var
            .probe_terms
            .into_iter()
            .map(|t| (t / denom).map(libm::sqrt))
            .collect(),
        residual_outer: (var.residual_outer / denom).map(libm::sqrt),
        shifted_outer: (var.shifted_outer / denom).map(libm::sqrt),
    };
    Ok((mean, se))
}

fn max_se_ratio(
    est: &[f64],
    reference: &[f64],
    se: &[f64],
    extra_se: Option<&[f64]>,
) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..est.len() {
        let combined = match extra_se {
            Some(other) => libm::sqrt(se[i] * se[i] + other[i] * other[i]),
            None => se[i],
        };
        let floor = combined.max(1e-12 * (1.0 + libm::fabs(reference[i])));
        worst = worst.max(libm::fabs(est[i] - reference[i]) / floor);
    }
    worst
}

/// Checks the four stationary-expectation identities against their exact
/// right-hand sides (closed-form schemes) or against an independent second
/// run (history-dependent schemes), with a 3-standard-error criterion from
/// batch means.
pub fn check_stationary_expectations(
    mdp: &ValidatedMdp,
    features: &FeatureMap,
    scheme: &LambdaScheme,
    horizon: usize,
    seed: u64,
) -> Result<Vec<CheckReport>, SimError> {
    let blocks = 20;
    let burn_in = 10_000.min(horizon / 10);
    let n = mdp.n_states();
    let v_pi = true_value_function(mdp).map_err(|e| SimError::Config(format!("{e}")))?;

    // Probe value functions: zero, the true value function, and three
    // random points of the approximation subspace.
    let mut rng = SimRng::new(seed ^ 0x9e3779b97f4a7c15);
    let mut probes: Vec<DVector<f64>> = alloc::vec![DVector::zeros(n), v_pi.clone()];
    for _ in 0..3 {
        let theta =
            DVector::from_fn(features.dim(), |_, _| 2.0 * rng.aux().random::<f64>() - 1.0);
        probes.push(features.values(&theta));
    }

    let (mean, se) =
        moment_block_averages(mdp, features, scheme, &probes, horizon, seed, blocks, burn_in)?;

    let exact = bellman_for_scheme(mdp, scheme).map_err(SimError::Oracle)?;
    let mut reports = Vec::new();
    match exact {
        Some(op) => {
            let problem = ProjectedProblem::from_bellman(
                mdp,
                features,
                &op,
                RegularizerSpec::None,
                1.0,
                1.0,
            )
            .map_err(SimError::Oracle)?;
            let gram = problem.gram().clone();
            reports.push(CheckReport::new(
                String::from("stationary_feature_outer"),
                max_se_ratio(
                    mean.feature_outer.as_slice(),
                    gram.as_slice(),
                    se.feature_outer.as_slice(),
                    None,
                ),
                3.0,
                String::from("time average of phi phi' vs the exact Gram matrix"),
            ));
            for (k, probe) in probes.iter().enumerate() {
                let reference = mdp.weighted_feature_product(features, &(op.apply(probe) - probe));
                reports.push(CheckReport::new(
                    format!("stationary_td_moment_probe_{k}"),
                    max_se_ratio(
                        mean.probe_terms[k].as_slice(),
                        reference.as_slice(),
                        se.probe_terms[k].as_slice(),
                        None,
                    ),
                    3.0,
                    format!("time average of e * td(probe {k}) vs the exact Bellman error image"),
                ));
            }
            let minus_slope = -problem.slope();
            reports.push(CheckReport::new(
                String::from("stationary_residual_outer"),
                max_se_ratio(
                    mean.residual_outer.as_slice(),
                    minus_slope.as_slice(),
                    se.residual_outer.as_slice(),
                    None,
                ),
                3.0,
                String::from("time average of e rho (phi - gamma phi')' vs the exact slope"),
            ));
            let shifted = problem.slope() + &gram;
            reports.push(CheckReport::new(
                String::from("stationary_shifted_outer"),
                max_se_ratio(
                    mean.shifted_outer.as_slice(),
                    shifted.as_slice(),
                    se.shifted_outer.as_slice(),
                    None,
                ),
                3.0,
                String::from(
                    "time average of e rho (1 - lambda') gamma phi'' vs the exact shifted slope",
                ),
            ));
        }
        None => {
            // No closed form available: compare two independent runs.
            let (mean2, se2) = moment_block_averages(
                mdp,
                features,
                scheme,
                &probes,
                horizon,
                seed.wrapping_add(1),
                blocks,
                burn_in,
            )?;
            reports.push(CheckReport::new(
                String::from("stationary_feature_outer_two_seed"),
                max_se_ratio(
                    mean.feature_outer.as_slice(),
                    mean2.feature_outer.as_slice(),
                    se.feature_outer.as_slice(),
                    Some(se2.feature_outer.as_slice()),
                ),
                3.0,
                String::from("two-seed agreement of the feature outer product"),
            ));
            for k in 0..probes.len() {
                reports.push(CheckReport::new(
                    format!("stationary_td_moment_probe_{k}_two_seed"),
                    max_se_ratio(
                        mean.probe_terms[k].as_slice(),
                        mean2.probe_terms[k].as_slice(),
                        se.probe_terms[k].as_slice(),
                        Some(se2.probe_terms[k].as_slice()),
                    ),
                    3.0,
                    format!("two-seed agreement of the td moment for probe {k}"),
                ));
            }
            reports.push(CheckReport::new(
                String::from("stationary_residual_outer_two_seed"),
                max_se_ratio(
                    mean.residual_outer.as_slice(),
                    mean2.residual_outer.as_slice(),
                    se.residual_outer.as_slice(),
                    Some(se2.residual_outer.as_slice()),
                ),
                3.0,
                String::from("two-seed agreement of the residual outer product"),
            ));
            reports.push(CheckReport::new(
                String::from("stationary_shifted_outer_two_seed"),
                max_se_ratio(
                    mean.shifted_outer.as_slice(),
                    mean2.shifted_outer.as_slice(),
                    se.shifted_outer.as_slice(),
                    Some(se2.shifted_outer.as_slice()),
                ),
                3.0,
                String::from("two-seed agreement of the shifted outer product"),
            ));
        }
    }
    Ok(reports)
}

// ---------------------------------------------------------------------
// Gradient agreement
// ---------------------------------------------------------------------

/// Central finite difference of the unregularized objective.
pub fn finite_difference_gradient(
    problem: &ProjectedProblem,
    theta: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>, SimError> {
    let mut grad = DVector::zeros(theta.len());
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus[i] += h;
        let mut minus = theta.clone();
        minus[i] -= h;
        grad[i] = (problem.objective(&plus).map_err(SimError::Oracle)?
            - problem.objective(&minus).map_err(SimError::Oracle)?)
            / (2.0 * h);
    }
    Ok(grad)
}

/// Compares the two gradient expressions against each other and against
/// central finite differences at random points.
pub fn check_gradients(
    problem: &ProjectedProblem,
    n_points: usize,
    seed: u64,
) -> Result<Vec<CheckReport>, SimError> {
    let mut rng = SimRng::new(seed);
    let d = problem.dim();
    let mut worst_pair = 0.0f64;
    let mut worst_fd = 0.0f64;
    for _ in 0..n_points {
        let theta = DVector::from_fn(d, |_, _| 4.0 * rng.aux().random::<f64>() - 2.0);
        let a = problem.grad_primary(&theta).map_err(SimError::Oracle)?;
        let b = problem.grad_alt(&theta).map_err(SimError::Oracle)?;
        worst_pair = worst_pair.max((&a - &b).norm() / (1.0 + a.norm()));
        let fd = finite_difference_gradient(problem, &theta, 1e-5)?;
        worst_fd = worst_fd.max((&a - &fd).norm() / (1.0 + fd.norm()));
    }
    Ok(alloc::vec![
        CheckReport::new(
            String::from("gradient_expressions_agree"),
            worst_pair,
            1e-10,
            format!("worst relative gap between the two expressions over {n_points} points"),
        ),
        CheckReport::new(
            String::from("gradient_matches_finite_difference"),
            worst_fd,
            1e-6,
            format!("worst relative gap to central differences over {n_points} points"),
        ),
    ])
}

// ---------------------------------------------------------------------
// Mean-update fixed points and saddle stationarity
// ---------------------------------------------------------------------

/// Verifies stationarity systems at the oracle solutions: the span solve
/// residual, the ball-optimum KKT system, and the saddle KKT residuals.
pub fn check_mean_ode_fixed_points(
    problem: &ProjectedProblem,
    seed: u64,
) -> Result<Vec<CheckReport>, SimError> {
    let mut rng = SimRng::new(seed);
    let d = problem.dim();
    let mut reports = Vec::new();

    let mut worst_solve = 0.0f64;
    for _ in 0..10 {
        let theta = DVector::from_fn(d, |_, _| 4.0 * rng.aux().random::<f64>() - 2.0);
        let x = problem.solve_x(&theta).map_err(SimError::Oracle)?;
        worst_solve = worst_solve.max((problem.gram() * &x - problem.residual(&theta)).norm());
    }
    reports.push(CheckReport::new(
        String::from("dual_solve_residual"),
        worst_solve,
        crate::bellman::SOLVE_RESIDUAL_TOL,
        String::from("gram * x(theta) matches the Bellman-error image"),
    ));

    let opt = problem.theta_opt_ball().map_err(SimError::Oracle)?;
    let grad = problem.grad_reg(&opt.theta).map_err(SimError::Oracle)?;
    let stationarity = (&grad + &opt.theta * opt.multiplier).norm();
    reports.push(CheckReport::new(
        String::from("optimum_kkt_stationarity"),
        stationarity,
        1e-8,
        format!(
            "gradient plus multiplier times theta at the ball optimum (multiplier {:.3e})",
            opt.multiplier
        ),
    ));
    reports.push(CheckReport::new(
        String::from("optimum_projected_gradient"),
        kkt_residual_ball(&opt.theta, &grad, problem.r_theta),
        1e-8,
        String::from("projected-gradient residual at the ball optimum"),
    ));

    let saddle = problem.saddle_point().map_err(SimError::Oracle)?;
    reports.push(CheckReport::new(
        String::from("saddle_kkt_theta"),
        saddle.kkt_theta,
        1e-8,
        String::from("primal KKT residual at the saddle"),
    ));
    reports.push(CheckReport::new(
        String::from("saddle_kkt_x"),
        saddle.kkt_x,
        1e-8,
        String::from("dual KKT residual at the saddle"),
    ));
    Ok(reports)
}

/// Deterministic surrogate update: the algorithm step with every sampled
/// quantity replaced by its stationary expectation. Fixed points of this
/// iteration satisfy the variant's stationarity system.
pub fn mean_step(
    spec: &AlgorithmSpec,
    problem: &ProjectedProblem,
    iter: &IterateState,
) -> IterateState {
    let n = iter.n;
    let alpha = spec.alpha.at(n);
    let residual = problem.residual(&iter.theta);
    let x_dir = &residual - problem.gram() * &iter.x;
    let gtda_dir = -(problem.slope().transpose() * &iter.x);
    let gtdb_dir = &residual - (problem.slope() + problem.gram()).transpose() * &iter.x;
    let reg_grad = spec.regularizer.grad(&iter.theta);

    let (theta, x, star) = match &spec.variant {
        AlgoVariant::Gtda2Ts | AlgoVariant::Gtda1Ts | AlgoVariant::Gtda1TsEta { .. } => {
            let beta = match &spec.variant {
                AlgoVariant::Gtda2Ts => spec.beta.at(n),
                AlgoVariant::Gtda1Ts => alpha,
                AlgoVariant::Gtda1TsEta { eta } => eta * alpha,
                _ => unreachable!(),
            };
            (
                project_ball(&(&iter.theta + &gtda_dir * alpha - &reg_grad * alpha), spec.r_theta),
                project_ball(&(&iter.x + &x_dir * beta), spec.r_x),
                None,
            )
        }
        AlgoVariant::GtdaUnconstrained => (
            &iter.theta + &gtda_dir * alpha - &reg_grad * alpha,
            &iter.x + &x_dir * alpha,
            None,
        ),
        AlgoVariant::Gtdb2Ts => (
            project_ball(&(&iter.theta + &gtdb_dir * alpha - &reg_grad * alpha), spec.r_theta),
            project_ball(&(&iter.x + &x_dir * spec.beta.at(n)), spec.r_x),
            None,
        ),
        AlgoVariant::MdGtda { q } => {
            let star = iter.theta_star.as_ref().expect("mirror state");
            let next = algo::level_project(
                &(star + &gtda_dir * alpha - &reg_grad * alpha),
                *q,
                spec.level,
            );
            (
                algo::mirror_image(&next, *q),
                project_ball(&(&iter.x + &x_dir * spec.beta.at(n)), spec.r_x),
                Some(next),
            )
        }
        AlgoVariant::MdGtdb { q } => {
            let star = iter.theta_star.as_ref().expect("mirror state");
            let next = algo::level_project(
                &(star + &gtdb_dir * alpha - &reg_grad * alpha),
                *q,
                spec.level,
            );
            (
                algo::mirror_image(&next, *q),
                project_ball(&(&iter.x + &x_dir * spec.beta.at(n)), spec.r_x),
                Some(next),
            )
        }
        AlgoVariant::MdTd { q } => {
            let star = iter.theta_star.as_ref().expect("mirror state");
            let next = algo::level_project(&(star + &residual * alpha), *q, spec.level);
            (algo::mirror_image(&next, *q), iter.x.clone(), Some(next))
        }
        AlgoVariant::BiasedGtda2Ts { .. }
        | AlgoVariant::BiasedGtdb2Ts { .. }
        | AlgoVariant::BiasedGtda1Ts { .. } => {
            // The mean field of a biased variant involves truncated-trace
            // moments that have no closed form; surrogate not defined.
            (iter.theta.clone(), iter.x.clone(), iter.theta_star.clone())
        }
    };
    IterateState {
        theta,
        x,
        theta_star: star,
        n: n + 1,
    }
}

// ---------------------------------------------------------------------
// Reduction identities
// ---------------------------------------------------------------------

/// Runs one variant over a seeded stream without metric collection and
/// returns iterate snapshots every `record_every` steps.
pub fn run_trajectory(
    mdp: &ValidatedMdp,
    features: &FeatureMap,
    scheme: &LambdaScheme,
    spec: &AlgorithmSpec,
    horizon: usize,
    seed: u64,
    record_every: usize,
) -> Result<Vec<IterateState>, SimError> {
    spec.validate()?;
    scheme.validate(mdp.n_states())?;
    let mut rng = SimRng::new(seed);
    let mut s = sim::sample_initial_state(mdp, None, &mut rng);
    let mut trace = TraceState::init(features, scheme, s);
    let mut iter = IterateState::zeros(spec, features.dim());
    let mut snapshots = alloc::vec![iter.clone()];
    for n in 0..horizon {
        let s_next = sim::sample_next_state(mdp, s, rng.chain());
        let reward = sim::sample_reward(mdp, s, s_next, &mut rng);
        let sample = Sample {
            from: s,
            to: s_next,
            reward,
        };
        algo::step(&mut iter, spec, mdp, features, scheme, &trace, &sample)
            .map_err(SimError::Step)?;
        trace.step(mdp, features, scheme, s, s_next)?;
        s = s_next;
        if (n + 1) % record_every == 0 || n + 1 == horizon {
            snapshots.push(iter.clone());
        }
    }
    Ok(snapshots)
}

fn exact_equal(a: &[IterateState], b: &[IterateState]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(u, v)| u.theta == v.theta && u.x == v.x)
}

fn worst_gap(a: &[IterateState], b: &[IterateState]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| ((&u.theta - &v.theta).norm()).max((&u.x - &v.x).norm()))
        .fold(0.0, f64::max)
}

/// The stepsize-scaled single-time-scale run in its rescaled-dual form:
/// dual ball shrunk by `sqrt(eta)`, both directions scaled by `sqrt(eta)`,
/// and the dual iterate related to the plain form by `x = sqrt(eta) x~`.
#[allow(clippy::too_many_arguments)]
fn run_eta_rescaled_form(
    mdp: &ValidatedMdp,
    features: &FeatureMap,
    scheme: &LambdaScheme,
    spec: &AlgorithmSpec,
    eta: f64,
    horizon: usize,
    seed: u64,
    record_every: usize,
) -> Result<Vec<IterateState>, SimError> {
    let root = libm::sqrt(eta);
    let shrunk_r_x = spec.r_x / root;
    let mut rng = SimRng::new(seed);
    let mut s = sim::sample_initial_state(mdp, None, &mut rng);
    let mut trace = TraceState::init(features, scheme, s);
    let dim = features.dim();
    let mut theta = DVector::<f64>::zeros(dim);
    let mut x_tilde = DVector::<f64>::zeros(dim);
    let mut snapshots = alloc::vec![IterateState {
        theta: theta.clone(),
        x: x_tilde.clone(),
        theta_star: None,
        n: 0,
    }];
    for n in 0..horizon {
        let s_next = sim::sample_next_state(mdp, s, rng.chain());
        let reward = sim::sample_reward(mdp, s, s_next, &mut rng);
        let alpha = spec.alpha.at(n as u64);
        let gamma_next = mdp.discount()[s_next];
        let rho = mdp.importance_ratio(s, s_next).expect("validated model");
        let phi = features.of_state(s);
        let phi_next = features.of_state(s_next);
        let td = rho * (reward + gamma_next * phi_next.dot(&theta) - phi.dot(&theta));
        let e = trace.total();
        let reg = spec.regularizer.grad(&theta);
        let theta_next = project_ball(
            &(&theta + (&phi - &phi_next * gamma_next) * (alpha * root * rho * e.dot(&x_tilde))
                - reg * alpha),
            spec.r_theta,
        );
        let x_next = project_ball(
            &(&x_tilde + (e * td - &phi * (root * phi.dot(&x_tilde))) * (alpha * root)),
            shrunk_r_x,
        );
        theta = theta_next;
        x_tilde = x_next;
        trace.step(mdp, features, scheme, s, s_next)?;
        s = s_next;
        if (n + 1) % record_every == 0 || n + 1 == horizon {
            snapshots.push(IterateState {
                theta: theta.clone(),
                x: x_tilde.clone(),
                theta_star: None,
                n: (n + 1) as u64,
            });
        }
    }
    Ok(snapshots)
}

/// Exact reduction identities on shared streams: the mirror variant with
/// exponent 2 equals plain projection, scale 1 equals the unscaled run,
/// the rescaled-dual form matches after rescaling, truncation wider than
/// the trace bound is the identity, and a one-cell composite equals the
/// plain scheme.
pub fn check_reduction_identities(
    mdp: &ValidatedMdp,
    features: &FeatureMap,
    seed: u64,
) -> Result<Vec<CheckReport>, SimError> {
    let horizon = 20_000;
    let every = 1_000;
    let d = features.dim();
    let n = mdp.n_states();
    let mut reports = Vec::new();

    let alpha = StepsizeSchedule::Power { a: 0.5, exponent: 0.8 };
    let beta = StepsizeSchedule::Power { a: 0.5, exponent: 0.6 };
    let state_scheme = LambdaScheme::StateDependent(DVector::from_element(n, 0.5));
    let hist_scheme = LambdaScheme::HistoryDependent { bound: 2.0 };

    // Mirror exponent 2 with the level set matching the coefficient ball.
    let r_theta = 5.0f64;
    let base = AlgorithmSpec::new(AlgoVariant::Gtda2Ts, alpha.clone(), beta.clone())
        .with_radii(r_theta, 10.0);
    let mirror = AlgorithmSpec::new(AlgoVariant::MdGtda { q: 2.0 }, alpha.clone(), beta.clone())
        .with_radii(r_theta, 10.0)
        .with_level(r_theta * r_theta / 2.0);
    let a = run_trajectory(mdp, features, &state_scheme, &base, horizon, seed, every)?;
    let b = run_trajectory(mdp, features, &state_scheme, &mirror, horizon, seed, every)?;
    reports.push(CheckReport::new(
        String::from("reduction_mirror_q2_identity"),
        if exact_equal(&a, &b) { 0.0 } else { worst_gap(&a, &b).max(f64::MIN_POSITIVE) },
        0.0,
        String::from("mirror exponent 2 with matching level reproduces the plain run bit-for-bit"),
    ));

    // Unit dual scale equals the single-time-scale run.
    let one_ts = AlgorithmSpec::new(AlgoVariant::Gtda1Ts, alpha.clone(), alpha.clone())
        .with_radii(r_theta, 10.0);
    let eta_one =
        AlgorithmSpec::new(AlgoVariant::Gtda1TsEta { eta: 1.0 }, alpha.clone(), alpha.clone())
            .with_radii(r_theta, 10.0);
    let a = run_trajectory(mdp, features, &state_scheme, &one_ts, horizon, seed, every)?;
    let b = run_trajectory(mdp, features, &state_scheme, &eta_one, horizon, seed, every)?;
    reports.push(CheckReport::new(
        String::from("reduction_unit_scale_identity"),
        if exact_equal(&a, &b) { 0.0 } else { worst_gap(&a, &b).max(f64::MIN_POSITIVE) },
        0.0,
        String::from("dual scale 1 reproduces the single-time-scale run bit-for-bit"),
    ));

    // Rescaled-dual form of the scaled run agrees after rescaling.
    let eta = 4.0f64;
    let scaled =
        AlgorithmSpec::new(AlgoVariant::Gtda1TsEta { eta }, alpha.clone(), alpha.clone())
            .with_radii(r_theta, 10.0);
    let plain_form =
        run_trajectory(mdp, features, &state_scheme, &scaled, horizon, seed, every)?;
    let tilde_form = run_eta_rescaled_form(
        mdp, features, &state_scheme, &scaled, eta, horizon, seed, every,
    )?;
    let root = libm::sqrt(eta);
    let mut worst = 0.0f64;
    for (u, v) in plain_form.iter().zip(&tilde_form) {
        worst = worst.max((&u.theta - &v.theta).norm() / (1.0 + u.theta.norm()));
        worst = worst.max((&u.x - &v.x * root).norm() / (1.0 + u.x.norm()));
    }
    reports.push(CheckReport::new(
        String::from("reduction_rescaled_dual_form"),
        worst,
        1e-12,
        format!("dual-rescaled form agrees with the plain form at scale {eta}"),
    ));

    // Truncation radius above the trace bound is the identity.
    let phi_max = (0..n)
        .map(|s| features.of_state(s).norm())
        .fold(0.0f64, f64::max);
    let wide = 2.0 + phi_max + 1.0;
    let biased = AlgorithmSpec::new(
        AlgoVariant::BiasedGtda2Ts { trunc: wide },
        alpha.clone(),
        beta.clone(),
    )
    .with_radii(r_theta, 10.0);
    let unbiased =
        AlgorithmSpec::new(AlgoVariant::Gtda2Ts, alpha.clone(), beta.clone()).with_radii(r_theta, 10.0);
    let a = run_trajectory(mdp, features, &hist_scheme, &biased, horizon, seed, every)?;
    let b = run_trajectory(mdp, features, &hist_scheme, &unbiased, horizon, seed, every)?;
    reports.push(CheckReport::new(
        String::from("reduction_wide_truncation_identity"),
        if exact_equal(&a, &b) { 0.0 } else { worst_gap(&a, &b).max(f64::MIN_POSITIVE) },
        0.0,
        String::from("truncation beyond the trace bound reproduces the unbiased run bit-for-bit"),
    ));

    // One-cell composite equals the plain scheme (exercises the per-cell
    // correction of the second update family).
    let composite = LambdaScheme::Composite {
        partition: alloc::vec![0; n],
        cells: alloc::vec![CellLambda::StateDependent(DVector::from_element(n, 0.5))],
    };
    let gtdb = AlgorithmSpec::new(AlgoVariant::Gtdb2Ts, alpha.clone(), beta.clone())
        .with_radii(r_theta, 10.0);
    let a = run_trajectory(mdp, features, &state_scheme, &gtdb, horizon, seed, every)?;
    let b = run_trajectory(mdp, features, &composite, &gtdb, horizon, seed, every)?;
    reports.push(CheckReport::new(
        String::from("reduction_one_cell_composite_identity"),
        if exact_equal(&a, &b) { 0.0 } else { worst_gap(&a, &b).max(f64::MIN_POSITIVE) },
        0.0,
        String::from("a one-cell composite scheme reproduces the plain scheme bit-for-bit"),
    ));

    let _ = d;
    Ok(reports)
}

// ---------------------------------------------------------------------
// Trace conditions
// ---------------------------------------------------------------------

/// Property tests for the trace rules: nonexpansiveness of the bounded
/// lambda map over random pairs, and the norm bound along a simulated run.
pub fn check_trace_conditions(
    mdp: &ValidatedMdp,
    features: &FeatureMap,
    scheme: &LambdaScheme,
    n_samples: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<CheckReport>, SimError> {
    let mut rng = SimRng::new(seed);
    let d = features.dim();
    let bounds: Vec<f64> = match scheme {
        LambdaScheme::HistoryDependent { bound } => alloc::vec![*bound],
        LambdaScheme::Composite { cells, .. } => cells
            .iter()
            .filter_map(|c| match c {
                CellLambda::HistoryDependent { bound } => Some(*bound),
                CellLambda::StateDependent(_) => None,
            })
            .collect(),
        LambdaScheme::StateDependent(_) => alloc::vec![1.0],
    };

    let mut worst_expansion = 0.0f64;
    for _ in 0..n_samples {
        let bound = bounds[rng.aux().random_range(0..bounds.len())];
        let scale: f64 = 2.0 * rng.aux().random::<f64>();
        let sample_vec = |rng: &mut SimRng| {
            DVector::from_fn(d, |_, _| 20.0 * rng.aux().random::<f64>() - 10.0)
        };
        let e = sample_vec(&mut rng);
        let f = sample_vec(&mut rng);
        let lambda = |v: &DVector<f64>| {
            let carried = scale * v.norm();
            if carried <= bound {
                1.0
            } else {
                bound / carried
            }
        };
        let gap = (&e * lambda(&e) - &f * lambda(&f)).norm() - (&e - &f).norm();
        worst_expansion = worst_expansion.max(gap);
    }
    let mut reports = alloc::vec![CheckReport::new(
        String::from("trace_lambda_nonexpansive"),
        worst_expansion,
        1e-12,
        format!("worst expansion of the bounded lambda map over {n_samples} random pairs"),
    )];

    if scheme.is_bounded() || matches!(scheme, LambdaScheme::Composite { .. }) {
        let mut s = sim::sample_initial_state(mdp, None, &mut rng);
        let mut trace = TraceState::init(features, scheme, s);
        let mut worst_violation = 0.0f64;
        for _ in 0..horizon {
            let s_next = sim::sample_next_state(mdp, s, rng.chain());
            let gamma = mdp.discount()[s_next];
            let rho = mdp.importance_ratio(s, s_next).expect("validated model");
            let before: Vec<f64> = trace.cells().iter().map(|e| e.norm()).collect();
            let lambdas = trace.step(mdp, features, scheme, s, s_next)?;
            for i in 0..lambdas.len() {
                if let CellLambda::HistoryDependent { bound } = match scheme {
                    LambdaScheme::HistoryDependent { bound } => {
                        CellLambda::HistoryDependent { bound: *bound }
                    }
                    LambdaScheme::Composite { cells, .. } => cells[i].clone(),
                    LambdaScheme::StateDependent(_) => break,
                } {
                    worst_violation =
                        worst_violation.max(gamma * rho * lambdas[i] * before[i] - bound);
                }
            }
            s = s_next;
        }
        reports.push(CheckReport::new(
            String::from("trace_bound_holds"),
            worst_violation,
            1e-12,
            format!("worst carried-norm excess over {horizon} simulated steps"),
        ));
    }
    Ok(reports)
}
