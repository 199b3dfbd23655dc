//! Finite MDP instances for off-policy policy evaluation: the target and
//! behavior transition matrices, per-state discounts, transition rewards,
//! and the standing conditions every downstream component relies on.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Deref;

use nalgebra::{DMatrix, DVector};

use crate::linalg;

/// Row sums of a transition matrix must match 1 within this tolerance;
/// rows inside the tolerance are renormalized, anything worse is rejected.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Convergence tolerance and iteration cap for the power-iteration
/// spectral-radius check.
pub const SPECTRAL_TOL: f64 = 1e-12;
pub const SPECTRAL_MAX_ITER: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    /// Matrix or vector dimensions disagree with `n_states`.
    Dimension(String),
    /// A standing condition failed; the report lists which ones.
    Invalid(ValidationReport),
    /// The behavior chain is not irreducible; holds the unreachable states.
    Reducible(Vec<usize>),
    /// An importance ratio is undefined (target positive, behavior zero).
    UndefinedRatio { from: usize, to: usize },
    /// A linear solve that the standing conditions guarantee failed anyway.
    SingularSystem(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Dimension(msg) => write!(f, "dimension mismatch: {msg}"),
            ModelError::Invalid(report) => {
                write!(f, "model violates standing conditions: ")?;
                let mut first = true;
                for check in report.checks.iter().filter(|c| !c.passed) {
                    if !first {
                        write!(f, ", ")?;
                    }
                    write!(f, "{}", check.name)?;
                    first = false;
                }
                Ok(())
            }
            ModelError::Reducible(states) => {
                write!(f, "behavior chain is reducible; disconnected class {states:?}")
            }
            ModelError::UndefinedRatio { from, to } => write!(
                f,
                "importance ratio undefined for transition {from} -> {to} (behavior probability is zero)"
            ),
            ModelError::SingularSystem(msg) => write!(f, "singular linear system: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ModelError {}

/// Outcome of one named standing-condition check.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Pass/fail report over all standing conditions. Failures are not fatal
/// here; constructors of downstream objects reject invalid models.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ValidationReport {
    pub checks: Vec<ConditionCheck>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &'static str, passed: bool, detail: String) {
        self.checks.push(ConditionCheck { name, passed, detail });
    }
}

/// A finite MDP for policy evaluation: two Markov chains on the same state
/// space (the target chain being evaluated and the behavior chain that
/// generates data), state-dependent discounting, and transition rewards
/// with optional zero-mean Gaussian noise.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteMdp {
    n_states: usize,
    target: DMatrix<f64>,
    behavior: DMatrix<f64>,
    discount: DVector<f64>,
    reward_mean: DMatrix<f64>,
    reward_noise_scale: DMatrix<f64>,
}

impl FiniteMdp {
    /// Builds the model, checking dimensions (hard error) and renormalizing
    /// transition rows whose sums are within [`ROW_SUM_TOL`] of one. Other
    /// standing conditions are reported by [`validate_model`] and enforced
    /// by [`ValidatedMdp::new`].
    pub fn new(
        target: DMatrix<f64>,
        behavior: DMatrix<f64>,
        discount: DVector<f64>,
        reward_mean: DMatrix<f64>,
        reward_noise_scale: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        let n = target.nrows();
        let square = |m: &DMatrix<f64>, name: &str| -> Result<(), ModelError> {
            if m.nrows() != n || m.ncols() != n {
                return Err(ModelError::Dimension(format!(
                    "{name} is {}x{}, expected {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            Ok(())
        };
        square(&target, "target_P")?;
        square(&behavior, "behavior_P")?;
        square(&reward_mean, "reward_mean")?;
        square(&reward_noise_scale, "reward_noise_scale")?;
        if discount.len() != n {
            return Err(ModelError::Dimension(format!(
                "discount has length {}, expected {n}",
                discount.len()
            )));
        }
        let mut mdp = FiniteMdp {
            n_states: n,
            target,
            behavior,
            discount,
            reward_mean,
            reward_noise_scale,
        };
        mdp.renormalize_rows();
        Ok(mdp)
    }

    fn renormalize_rows(&mut self) {
        for m in [&mut self.target, &mut self.behavior] {
            for r in 0..m.nrows() {
                let sum: f64 = m.row(r).iter().sum();
                if libm::fabs(sum - 1.0) <= ROW_SUM_TOL && sum != 1.0 && sum > 0.0 {
                    for c in 0..m.ncols() {
                        m[(r, c)] /= sum;
                    }
                }
            }
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn target(&self) -> &DMatrix<f64> {
        &self.target
    }

    pub fn behavior(&self) -> &DMatrix<f64> {
        &self.behavior
    }

    pub fn discount(&self) -> &DVector<f64> {
        &self.discount
    }

    pub fn reward_mean(&self) -> &DMatrix<f64> {
        &self.reward_mean
    }

    pub fn reward_noise_scale(&self) -> &DMatrix<f64> {
        &self.reward_noise_scale
    }

    /// The target chain weighted by the successor-state discount:
    /// entry `(s, s')` is `P[s,s'] * discount[s']`.
    pub fn discounted_target(&self) -> DMatrix<f64> {
        let mut m = self.target.clone();
        for c in 0..self.n_states {
            for r in 0..self.n_states {
                m[(r, c)] *= self.discount[c];
            }
        }
        m
    }

    /// Importance ratio `target_P[s,s'] / behavior_P[s,s']`, with the 0/0
    /// convention resolving to zero.
    pub fn importance_ratio(&self, s: usize, s_next: usize) -> Result<f64, ModelError> {
        let p = self.target[(s, s_next)];
        let q = self.behavior[(s, s_next)];
        if q == 0.0 {
            if p == 0.0 {
                Ok(0.0)
            } else {
                Err(ModelError::UndefinedRatio { from: s, to: s_next })
            }
        } else {
            Ok(p / q)
        }
    }

    /// Expected one-stage reward under the target chain:
    /// `r(s) = sum_{s'} P[s,s'] r(s,s')`.
    pub fn expected_reward(&self) -> DVector<f64> {
        let mut r = DVector::zeros(self.n_states);
        for s in 0..self.n_states {
            r[s] = (0..self.n_states)
                .map(|t| self.target[(s, t)] * self.reward_mean[(s, t)])
                .sum();
        }
        r
    }
}

/// States of the behavior chain not strongly connected to state 0 through
/// positive-probability transitions; empty iff the chain is irreducible.
fn unreachable_states(behavior: &DMatrix<f64>) -> Vec<usize> {
    let n = behavior.nrows();
    let reach = |transposed: bool| -> Vec<bool> {
        let mut seen = alloc::vec![false; n];
        let mut stack = alloc::vec![0usize];
        seen[0] = true;
        while let Some(s) = stack.pop() {
            for t in 0..n {
                let p = if transposed { behavior[(t, s)] } else { behavior[(s, t)] };
                if p > 0.0 && !seen[t] {
                    seen[t] = true;
                    stack.push(t);
                }
            }
        }
        seen
    };
    let forward = reach(false);
    let backward = reach(true);
    (0..n).filter(|&s| !forward[s] || !backward[s]).collect()
}

/// Runs every standing-condition check and reports pass/fail with
/// diagnostics. Never errors; dimension mismatches are impossible for a
/// constructed [`FiniteMdp`].
pub fn validate_model(mdp: &FiniteMdp) -> ValidationReport {
    let n = mdp.n_states;
    let mut report = ValidationReport::default();

    for (name, m) in [
        ("target_rows_stochastic", &mdp.target),
        ("behavior_rows_stochastic", &mdp.behavior),
    ] {
        let mut worst_row = 0usize;
        let mut worst = 0.0f64;
        let mut negative = None;
        for r in 0..n {
            let sum: f64 = m.row(r).iter().sum();
            let err = libm::fabs(sum - 1.0);
            if err > worst {
                worst = err;
                worst_row = r;
            }
            if m.row(r).iter().any(|&p| p < 0.0) {
                negative.get_or_insert(r);
            }
        }
        let passed = worst <= ROW_SUM_TOL && negative.is_none();
        let detail = match negative {
            Some(r) => format!("row {r} has a negative entry"),
            None => format!("worst row {worst_row} deviates from 1 by {worst:.3e}"),
        };
        report.push(name, passed, detail);
    }

    let mut violation = None;
    for s in 0..n {
        for t in 0..n {
            if mdp.behavior[(s, t)] == 0.0 && mdp.target[(s, t)] > 0.0 {
                violation.get_or_insert((s, t));
            }
        }
    }
    report.push(
        "absolute_continuity",
        violation.is_none(),
        match violation {
            Some((s, t)) => format!("target_P[{s},{t}] > 0 but behavior_P[{s},{t}] = 0"),
            None => String::from("every target transition is covered by the behavior chain"),
        },
    );

    let out_of_range = (0..n).find(|&s| !(0.0..=1.0).contains(&mdp.discount[s]));
    report.push(
        "discount_in_unit_interval",
        out_of_range.is_none(),
        match out_of_range {
            Some(s) => format!("discount[{s}] = {} outside [0, 1]", mdp.discount[s]),
            None => String::from("all discounts in [0, 1]"),
        },
    );

    let rad = linalg::spectral_radius(&mdp.discounted_target(), SPECTRAL_TOL, SPECTRAL_MAX_ITER);
    report.push(
        "discounted_target_spectral_radius",
        rad < 1.0 - 1e-10,
        format!("spectral radius of P*Gamma is {rad:.12}"),
    );

    let missing = unreachable_states(&mdp.behavior);
    report.push(
        "behavior_irreducible",
        missing.is_empty(),
        if missing.is_empty() {
            String::from("single communicating class")
        } else {
            format!("states {missing:?} are not strongly connected to state 0")
        },
    );

    let mut bad_noise = None;
    'outer: for s in 0..n {
        for t in 0..n {
            if mdp.reward_noise_scale[(s, t)] < 0.0 {
                bad_noise = Some((s, t));
                break 'outer;
            }
        }
    }
    report.push(
        "reward_noise_nonnegative",
        bad_noise.is_none(),
        match bad_noise {
            Some((s, t)) => format!("reward_noise_scale[{s},{t}] < 0"),
            None => String::from("all noise scales nonnegative"),
        },
    );

    report
}

/// Stationary distribution of the behavior chain, from the null space of
/// `behavior_P' - I` normalized to a probability vector.
pub fn stationary_distribution(mdp: &FiniteMdp) -> Result<DVector<f64>, ModelError> {
    let missing = unreachable_states(&mdp.behavior);
    if !missing.is_empty() {
        return Err(ModelError::Reducible(missing));
    }
    let n = mdp.n_states;
    let m = mdp.behavior.transpose() - DMatrix::<f64>::identity(n, n);
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("SVD requested V^T");
    let mut best = 0usize;
    for i in 0..svd.singular_values.len() {
        if svd.singular_values[i] < svd.singular_values[best] {
            best = i;
        }
    }
    let mut xi = v_t.row(best).transpose();
    let total: f64 = xi.iter().sum();
    if total == 0.0 {
        return Err(ModelError::SingularSystem(String::from(
            "null vector of behavior_P' - I sums to zero",
        )));
    }
    xi /= total;
    if xi.iter().any(|&p| p <= 0.0) {
        return Err(ModelError::SingularSystem(String::from(
            "stationary distribution has a nonpositive component",
        )));
    }
    Ok(xi)
}

/// Value function of the target chain: the unique solution of
/// `v = r + P Gamma v`.
pub fn true_value_function(mdp: &FiniteMdp) -> Result<DVector<f64>, ModelError> {
    let n = mdp.n_states;
    let system = DMatrix::<f64>::identity(n, n) - mdp.discounted_target();
    let reward = mdp.expected_reward();
    system
        .lu()
        .solve(&reward)
        .ok_or_else(|| ModelError::SingularSystem(String::from("I - P*Gamma is singular")))
}

/// A model that passed every standing-condition check, with the stationary
/// distribution of its behavior chain computed once and cached.
///
/// Dereferences to [`FiniteMdp`]; immutable after construction and safe to
/// share across concurrent runs.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidatedMdp {
    mdp: FiniteMdp,
    stationary: DVector<f64>,
}

impl ValidatedMdp {
    pub fn new(mdp: FiniteMdp) -> Result<Self, ModelError> {
        let report = validate_model(&mdp);
        if !report.all_passed() {
            return Err(ModelError::Invalid(report));
        }
        let stationary = stationary_distribution(&mdp)?;
        Ok(ValidatedMdp { mdp, stationary })
    }

    /// Stationary distribution of the behavior chain.
    pub fn stationary(&self) -> &DVector<f64> {
        &self.stationary
    }

    /// `Phi' Xi v` for a state-space vector `v`, i.e. the feature-space
    /// image under the stationary weighting.
    pub fn weighted_feature_product(&self, features: &FeatureMap, v: &DVector<f64>) -> DVector<f64> {
        let mut scaled = v.clone();
        for s in 0..self.mdp.n_states {
            scaled[s] *= self.stationary[s];
        }
        features.matrix().transpose() * scaled
    }

    pub fn into_inner(self) -> FiniteMdp {
        self.mdp
    }
}

impl Deref for ValidatedMdp {
    type Target = FiniteMdp;

    fn deref(&self) -> &FiniteMdp {
        &self.mdp
    }
}

/// Linear feature map: row `s` holds the feature vector of state `s`.
/// Columns may be linearly dependent; rank deficiency is handled downstream
/// through the span of the feature vectors.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    phi: DMatrix<f64>,
    span: linalg::SpanBasis,
}

impl FeatureMap {
    pub fn new(phi: DMatrix<f64>) -> Result<Self, ModelError> {
        if phi.nrows() == 0 || phi.ncols() == 0 {
            return Err(ModelError::Dimension(String::from(
                "feature matrix must be nonempty",
            )));
        }
        if (0..phi.nrows()).all(|s| phi.row(s).iter().all(|&v| v == 0.0)) {
            return Err(ModelError::Dimension(String::from(
                "feature matrix must have at least one nonzero row",
            )));
        }
        let span = linalg::SpanBasis::of_columns(&phi.transpose());
        Ok(FeatureMap { phi, span })
    }

    pub fn n_states(&self) -> usize {
        self.phi.nrows()
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// Feature vector of one state.
    pub fn of_state(&self, s: usize) -> DVector<f64> {
        self.phi.row(s).transpose()
    }

    /// Orthonormal basis of `span{ phi(s) }` in coefficient space.
    pub fn span(&self) -> &linalg::SpanBasis {
        &self.span
    }

    /// Value predictions `Phi theta` over all states.
    pub fn values(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.phi * theta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    pub(crate) fn uniform_two_state(discount: f64) -> FiniteMdp {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        FiniteMdp::new(
            p.clone(),
            p,
            DVector::from_element(2, discount),
            DMatrix::from_element(2, 2, 1.0),
            DMatrix::zeros(2, 2),
        )
        .unwrap()
    }

    #[test]
    fn uniform_model_passes_all_checks() {
        let report = validate_model(&uniform_two_state(0.9));
        assert!(report.all_passed(), "{report:?}");
    }

    #[test]
    fn absolute_continuity_violation_detected() {
        let target = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let behavior = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.5]);
        let mdp = FiniteMdp::new(
            target,
            behavior,
            DVector::from_element(2, 0.9),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let report = validate_model(&mdp);
        let check = report
            .checks
            .iter()
            .find(|c| c.name == "absolute_continuity")
            .unwrap();
        assert!(!check.passed);
    }

    #[test]
    fn undiscounted_chain_fails_spectral_radius() {
        let report = validate_model(&uniform_two_state(1.0));
        let check = report
            .checks
            .iter()
            .find(|c| c.name == "discounted_target_spectral_radius")
            .unwrap();
        assert!(!check.passed, "{check:?}");
    }

    #[test]
    fn stationary_distribution_uniform_and_periodic() {
        let xi = stationary_distribution(&uniform_two_state(0.9)).unwrap();
        assert!((xi[0] - 0.5).abs() < 1e-12 && (xi[1] - 0.5).abs() < 1e-12);

        let flip = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let mdp = FiniteMdp::new(
            flip.clone(),
            flip,
            DVector::from_element(2, 0.5),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let xi = stationary_distribution(&mdp).unwrap();
        assert!((xi[0] - 0.5).abs() < 1e-12 && (xi[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stationary_distribution_asymmetric_chain() {
        // Solving xi' P = xi' by hand for P = [[0.9, 0.1], [0.2, 0.8]]:
        // 0.1 xi0 = 0.2 xi1, so xi = (2/3, 1/3).
        let p = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]);
        let mdp = FiniteMdp::new(
            p.clone(),
            p,
            DVector::from_element(2, 0.5),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let xi = stationary_distribution(&mdp).unwrap();
        assert!((xi[0] - 2.0 / 3.0).abs() < 1e-12, "xi = {xi}");
        assert!((xi[1] - 1.0 / 3.0).abs() < 1e-12, "xi = {xi}");
    }

    #[test]
    fn reducible_chain_reports_disconnected_class() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.5]);
        let mdp = FiniteMdp::new(
            p.clone(),
            p,
            DVector::from_element(2, 0.5),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        match stationary_distribution(&mdp) {
            Err(ModelError::Reducible(states)) => assert_eq!(states, vec![1]),
            other => panic!("expected reducible error, got {other:?}"),
        }
    }

    #[test]
    fn importance_ratios() {
        let target = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.5, 0.5]);
        let behavior = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let mdp = FiniteMdp::new(
            target,
            behavior,
            DVector::from_element(2, 0.5),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        assert!((mdp.importance_ratio(0, 0).unwrap() - 1.8).abs() < 1e-15);
        assert!((mdp.importance_ratio(0, 1).unwrap() - 0.2).abs() < 1e-15);
        let on_policy = uniform_two_state(0.9);
        for s in 0..2 {
            for t in 0..2 {
                assert_eq!(on_policy.importance_ratio(s, t).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn undefined_ratio_is_an_error() {
        let target = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.5, 0.5]);
        let behavior = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.5]);
        let mdp = FiniteMdp::new(
            target,
            behavior,
            DVector::from_element(2, 0.5),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        assert!(matches!(
            mdp.importance_ratio(0, 1),
            Err(ModelError::UndefinedRatio { from: 0, to: 1 })
        ));
    }

    #[test]
    fn value_function_trivial_cases() {
        // No discounting: v equals the expected one-stage reward.
        let mdp = uniform_two_state(0.0);
        let v = true_value_function(&mdp).unwrap();
        assert!((v - mdp.expected_reward()).norm() < 1e-14);

        // Constant reward 1 and discount 0.9: v = 1 / (1 - 0.9) = 10.
        let v = true_value_function(&uniform_two_state(0.9)).unwrap();
        assert!((v[0] - 10.0).abs() < 1e-10 && (v[1] - 10.0).abs() < 1e-10);
    }

    /// Independent check: the inverse in the value function agrees with a
    /// truncated geometric series of the discounted chain.
    fn neumann_value(mdp: &FiniteMdp, terms: usize) -> DVector<f64> {
        let r = mdp.expected_reward();
        let m = mdp.discounted_target();
        let mut acc = r.clone();
        let mut power = r;
        for _ in 0..terms {
            power = &m * &power;
            acc += &power;
        }
        acc
    }

    #[test]
    fn value_function_matches_neumann_series() {
        // Slowly mixing chain with successor-indexed rewards.
        let p = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]);
        let rewards = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        let mdp = FiniteMdp::new(
            p.clone(),
            p,
            DVector::from_element(2, 0.8),
            rewards,
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let direct = true_value_function(&mdp).unwrap();
        let series = neumann_value(&mdp, 200);
        assert!((&direct - &series).norm() < 1e-8, "direct {direct} series {series}");
        // Bellman residual of the direct solve.
        let residual = &direct - mdp.expected_reward() - mdp.discounted_target() * &direct;
        assert!(residual.amax() < 1e-10);
    }

    #[test]
    fn validated_mdp_caches_stationary_distribution() {
        let v = ValidatedMdp::new(uniform_two_state(0.9)).unwrap();
        let xi = v.stationary();
        let residual = (v.behavior().transpose() * xi - xi).amax();
        assert!(residual <= 1e-10);
        assert!(xi.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn feature_map_rejects_all_zero_rows() {
        assert!(FeatureMap::new(DMatrix::zeros(2, 1)).is_err());
        let phi = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let map = FeatureMap::new(phi).unwrap();
        // Rank-deficient columns are allowed; the span has dimension 1.
        assert_eq!(map.span().dim(), 1);
    }
}
