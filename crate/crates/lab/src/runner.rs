//! Parallel execution of seeded runs and sweep cells. Seeds execute
//! independently on a configurable worker pool; results merge in seed
//! order so output files are deterministic functions of (config, seeds).

use std::path::Path;
use std::time::Instant;

use gtdlab_core::sim::{run_experiment, ExperimentConfig, OracleRefs, RunRecord, SimError};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{apply_cell, expand_sweep, RootConfig, SweepCell};
use crate::output;

/// Builds a rayon pool with the requested worker count (0 = default).
pub fn worker_pool(workers: usize) -> rayon::ThreadPool {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        builder = builder.num_threads(workers);
    }
    builder.build().expect("thread pool")
}

/// Runs every seed on the pool and returns records in seed order.
pub fn run_seeds(
    pool: &rayon::ThreadPool,
    config: &ExperimentConfig,
    refs: &OracleRefs,
    seeds: &[u64],
) -> Result<Vec<RunRecord>, SimError> {
    let results: Vec<Result<RunRecord, SimError>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let start = Instant::now();
                run_experiment(config, refs, seed).map(|mut record| {
                    record.wall_seconds = Some(start.elapsed().as_secs_f64());
                    record
                })
            })
            .collect()
    });
    results.into_iter().collect()
}

/// Runs one experiment end to end: oracle references, all seeds, one CSV
/// per seed plus a summary document.
pub fn execute_run(
    pool: &rayon::ThreadPool,
    root: &RootConfig,
    out_dir: &Path,
    seeds: &[u64],
) -> anyhow::Result<output::RunSummary> {
    let config = root.build_experiment()?;
    let refs = OracleRefs::for_config(&config).map_err(|e| anyhow::anyhow!("{e}"))?;
    let records = run_seeds(pool, &config, &refs, seeds).map_err(|e| anyhow::anyhow!("{e}"))?;
    std::fs::create_dir_all(out_dir)?;
    for record in &records {
        let path = out_dir.join(format!("run_seed{}.csv", record.seed));
        output::write_run_csv(&path, record, config.features.dim())?;
    }
    let summary = output::RunSummary::build(&records, &refs.problem)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    output::write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Serialize)]
pub struct SweepCellResult {
    pub cell: SweepCell,
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_final_dist_theta_opt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_final_j_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_diverged: Option<usize>,
}

#[derive(Serialize)]
pub struct SweepSummary {
    pub cells: Vec<SweepCellResult>,
}

/// Runs the declared grid: one sub-directory per feasible cell, one
/// summary row per cell (skipped cells carry their reason). Divergence in
/// a cell is recorded and the sweep continues.
pub fn execute_sweep(
    pool: &rayon::ThreadPool,
    root: &RootConfig,
    out_dir: &Path,
    seeds: &[u64],
) -> anyhow::Result<SweepSummary> {
    let sweep = root.sweep.clone().unwrap_or_default();
    let cells = expand_sweep(&sweep);
    std::fs::create_dir_all(out_dir)?;
    let mut results = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        match apply_cell(root, cell) {
            Err(reason) => results.push(SweepCellResult {
                cell: cell.clone(),
                label: cell.label(),
                skipped: Some(reason),
                median_final_dist_theta_opt: None,
                median_final_j_gap: None,
                n_diverged: None,
            }),
            Ok(cell_config) => {
                let cell_dir = out_dir.join(format!("cell_{i}"));
                let summary = execute_run(pool, &cell_config, &cell_dir, seeds)?;
                results.push(SweepCellResult {
                    cell: cell.clone(),
                    label: cell.label(),
                    skipped: None,
                    median_final_dist_theta_opt: Some(summary.median_final_dist_theta_opt),
                    median_final_j_gap: Some(summary.median_final_j_gap),
                    n_diverged: Some(summary.n_diverged),
                });
            }
        }
    }
    let summary = SweepSummary { cells: results };
    output::write_json(&out_dir.join("sweep_summary.json"), &summary)?;
    // Flat CSV companion: one row per cell.
    let mut csv = String::from("cell,label,skipped,median_final_dist_theta_opt,median_final_J_gap,n_diverged\n");
    for (i, r) in summary.cells.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            r.label,
            r.skipped.clone().unwrap_or_default(),
            r.median_final_dist_theta_opt
                .map(output::fmt_f64)
                .unwrap_or_default(),
            r.median_final_j_gap.map(output::fmt_f64).unwrap_or_default(),
            r.n_diverged.map(|n| n.to_string()).unwrap_or_default(),
        ));
    }
    std::fs::write(out_dir.join("sweep_summary.csv"), csv)?;
    Ok(summary)
}
