//! Small benchmark models used across tests, examples and the CLI demos.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::mdp::{FeatureMap, FiniteMdp, ValidatedMdp};

/// On-policy two-state chain with uniform transitions, discount 0.9,
/// constant reward 1 and a single constant feature. The value function is
/// 10 in both states, and with the constant feature the best coefficient
/// is exactly 10.
pub fn mdp_a() -> (ValidatedMdp, FeatureMap) {
    let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
    let mdp = FiniteMdp::new(
        p.clone(),
        p,
        DVector::from_element(2, 0.9),
        DMatrix::from_element(2, 2, 1.0),
        DMatrix::zeros(2, 2),
    )
    .expect("static model");
    let features = FeatureMap::new(DMatrix::from_element(2, 1, 1.0)).expect("static features");
    (ValidatedMdp::new(mdp).expect("static model validates"), features)
}

/// Off-policy two-state chain: slowly mixing target, faster-mixing
/// behavior, discount 0.8, reward `s' + 1` plus Gaussian noise, identity
/// features.
pub fn mdp_b() -> (ValidatedMdp, FeatureMap) {
    let target = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]);
    let behavior = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.3, 0.7]);
    let rewards = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
    let mdp = FiniteMdp::new(
        target,
        behavior,
        DVector::from_element(2, 0.8),
        rewards,
        DMatrix::from_element(2, 2, 0.25),
    )
    .expect("static model");
    let features = FeatureMap::new(DMatrix::identity(2, 2)).expect("static features");
    (ValidatedMdp::new(mdp).expect("static model validates"), features)
}

/// Aggressively off-policy two-state chain built to produce heavy-tailed
/// eligibility traces: self-loop importance ratio 1.8 with discount 0.95,
/// so that a large state-dependent lambda lets trace norms spike far above
/// their typical level.
pub fn mdp_c() -> (ValidatedMdp, FeatureMap) {
    let target = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]);
    let behavior = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
    let rewards = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
    let mdp = FiniteMdp::new(
        target,
        behavior,
        DVector::from_element(2, 0.95),
        rewards,
        DMatrix::from_element(2, 2, 0.25),
    )
    .expect("static model");
    let features = FeatureMap::new(DMatrix::identity(2, 2)).expect("static features");
    (ValidatedMdp::new(mdp).expect("static model validates"), features)
}

/// Random validated model with fully supported behavior transitions, for
/// randomized test sweeps: `n_states` up to a handful, feature dimension
/// `dim`, discounts in `[0.3, 0.95]`.
pub fn random_mdp<R: Rng>(
    n_states: usize,
    dim: usize,
    rng: &mut R,
) -> (ValidatedMdp, FeatureMap, DVector<f64>) {
    let random_stochastic = |rng: &mut R| -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n_states, n_states);
        for r in 0..n_states {
            let mut row: Vec<f64> = (0..n_states)
                .map(|_| 0.05 + rng.random::<f64>())
                .collect();
            let sum: f64 = row.iter().sum();
            for v in &mut row {
                *v /= sum;
            }
            for (c, v) in row.iter().enumerate() {
                m[(r, c)] = *v;
            }
        }
        m
    };
    let target = random_stochastic(rng);
    let behavior = random_stochastic(rng);
    let discount = DVector::from_fn(n_states, |_, _| 0.3 + 0.65 * rng.random::<f64>());
    let reward_mean = DMatrix::from_fn(n_states, n_states, |_, _| 2.0 * rng.random::<f64>() - 1.0);
    let noise = DMatrix::from_fn(n_states, n_states, |_, _| 0.3 * rng.random::<f64>());
    let mdp = FiniteMdp::new(target, behavior, discount, reward_mean, noise)
        .expect("dimensions are consistent");
    let mdp = ValidatedMdp::new(mdp).expect("fully supported random model validates");
    let phi = loop {
        let candidate =
            DMatrix::from_fn(n_states, dim, |_, _| 2.0 * rng.random::<f64>() - 1.0);
        if candidate.iter().any(|&v| v != 0.0) {
            break candidate;
        }
    };
    let features = FeatureMap::new(phi).expect("nonzero random features");
    let lambda = DVector::from_fn(n_states, |_, _| rng.random::<f64>());
    (mdp, features, lambda)
}
