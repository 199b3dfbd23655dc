//! The `check` subcommand's battery: model validation plus every
//! simulation-vs-oracle cross-check, merged into one deterministic report.

use gtdlab_core::mdp::{validate_model, ValidatedMdp};
use gtdlab_core::sim::OracleRefs;
use gtdlab_core::verify::{
    check_gradients, check_mean_ode_fixed_points, check_reduction_identities,
    check_stationary_expectations, check_trace_conditions, CheckReport,
};
use serde::Serialize;

use crate::config::RootConfig;

#[derive(Serialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub margin: f64,
    pub threshold: f64,
    pub detail: String,
}

impl From<&CheckReport> for CheckLine {
    fn from(r: &CheckReport) -> Self {
        CheckLine {
            name: r.name.clone(),
            passed: r.passed,
            margin: r.margin,
            threshold: r.threshold,
            detail: r.detail.clone(),
        }
    }
}

#[derive(Serialize)]
pub struct CheckDocument {
    pub lines: Vec<CheckLine>,
    pub all_passed: bool,
}

/// Runs the full battery for a config. The simulation-based checks reuse
/// the config's horizon (capped for the heavier ones) and seed list.
pub fn run_battery(root: &RootConfig) -> anyhow::Result<CheckDocument> {
    let mut reports: Vec<CheckReport> = Vec::new();
    let seed = root.seeds().first().copied().unwrap_or(0);

    let raw = root.build_raw_model()?;
    let model_report = validate_model(&raw);
    for check in &model_report.checks {
        reports.push(CheckReport {
            name: format!("model_{}", check.name),
            passed: check.passed,
            margin: if check.passed { 0.0 } else { 1.0 },
            threshold: 0.5,
            detail: check.detail.clone(),
        });
    }
    if !model_report.all_passed() {
        return Ok(finish(reports));
    }
    let mdp = ValidatedMdp::new(raw)?;
    let features = root.build_features()?;
    let scheme = root.build_scheme()?;

    let horizon = root.horizon.clamp(50_000, 1_000_000);
    reports.extend(check_stationary_expectations(
        &mdp, &features, &scheme, horizon, seed,
    )?);

    let config = root.build_experiment()?;
    let refs = OracleRefs::for_config(&config).map_err(|e| anyhow::anyhow!("{e}"))?;
    reports.extend(check_gradients(&refs.problem, 20, seed)?);
    reports.extend(check_mean_ode_fixed_points(&refs.problem, seed)?);
    reports.extend(check_reduction_identities(&mdp, &features, seed)?);
    reports.extend(check_trace_conditions(
        &mdp,
        &features,
        &scheme,
        10_000,
        horizon.min(200_000),
        seed,
    )?);
    Ok(finish(reports))
}

fn finish(reports: Vec<CheckReport>) -> CheckDocument {
    let lines: Vec<CheckLine> = reports.iter().map(CheckLine::from).collect();
    let all_passed = lines.iter().all(|l| l.passed);
    CheckDocument { lines, all_passed }
}
