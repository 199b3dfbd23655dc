//! File formats: per-run CSV series, run summaries and oracle documents as
//! JSON. Numeric CSV fields carry 17 significant digits so records
//! round-trip bit-stably.

use std::io::Write;
use std::path::Path;

use gtdlab_core::bellman::{BallOptimum, ProjectedProblem, SaddlePoint, TdFixedPoint};
use gtdlab_core::sim::RunRecord;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// 17 significant digits, lowercase, bit-stable for f64 round-trips.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::from("nan")
    } else {
        format!("{v:.16e}")
    }
}

fn vec_json(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn mat_json(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect()
}

/// Writes one run's checkpoint series:
/// `n,theta_0..theta_{d-1},x_0..x_{d-1},dist_theta_opt,J_gap,x_tracking,dist_saddle`.
pub fn write_run_csv(path: &Path, record: &RunRecord, dim: usize) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = String::from("n");
    for i in 0..dim {
        header.push_str(&format!(",theta_{i}"));
    }
    for i in 0..dim {
        header.push_str(&format!(",x_{i}"));
    }
    header.push_str(",dist_theta_opt,J_gap,x_tracking,dist_saddle");
    writeln!(out, "{header}")?;
    for row in &record.rows {
        let mut line = row.n.to_string();
        for v in row.theta.iter().chain(row.x.iter()) {
            line.push(',');
            line.push_str(&fmt_f64(*v));
        }
        for v in [row.dist_theta_opt, row.j_gap, row.x_tracking, row.dist_saddle] {
            line.push(',');
            line.push_str(&fmt_f64(v));
        }
        writeln!(out, "{line}")?;
    }
    out.flush()
}

#[derive(Serialize)]
pub struct OptimumDoc {
    pub theta: Vec<f64>,
    pub multiplier: f64,
    pub value: f64,
    pub flat: bool,
}

impl From<&BallOptimum> for OptimumDoc {
    fn from(o: &BallOptimum) -> Self {
        OptimumDoc {
            theta: vec_json(&o.theta),
            multiplier: o.multiplier,
            value: o.value,
            flat: o.flat,
        }
    }
}

#[derive(Serialize)]
pub struct SaddleDoc {
    pub theta: Vec<f64>,
    pub x_bar: Vec<f64>,
    pub value: f64,
    pub x_interior: bool,
    pub kkt_theta: f64,
    pub kkt_x: f64,
}

impl From<&SaddlePoint> for SaddleDoc {
    fn from(s: &SaddlePoint) -> Self {
        SaddleDoc {
            theta: vec_json(&s.theta),
            x_bar: vec_json(&s.x_bar),
            value: s.value,
            x_interior: s.x_interior,
            kkt_theta: s.kkt_theta,
            kkt_x: s.kkt_x,
        }
    }
}

#[derive(Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TdFixedPointDoc {
    Found {
        theta: Vec<f64>,
        sym_max_eig: f64,
        residual: f64,
    },
    NotNegativeDefinite {
        sym_max_eig: f64,
    },
}

impl From<&TdFixedPoint> for TdFixedPointDoc {
    fn from(t: &TdFixedPoint) -> Self {
        match t {
            TdFixedPoint::Found {
                theta,
                sym_max_eig,
                residual,
            } => TdFixedPointDoc::Found {
                theta: vec_json(theta),
                sym_max_eig: *sym_max_eig,
                residual: *residual,
            },
            TdFixedPoint::NotNegativeDefinite { sym_max_eig } => {
                TdFixedPointDoc::NotNegativeDefinite {
                    sym_max_eig: *sym_max_eig,
                }
            }
        }
    }
}

/// Full oracle document: problem matrices, optimum, saddle, TD fixed point
/// and the sufficient dual-ball radius.
#[derive(Serialize)]
pub struct OracleDoc {
    pub slope: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    pub gram: Vec<Vec<f64>>,
    pub r_theta: f64,
    pub r_x: f64,
    pub optimum: OptimumDoc,
    pub saddle: SaddleDoc,
    pub td_fixed_point: TdFixedPointDoc,
    pub sufficient_r_x: f64,
}

impl OracleDoc {
    pub fn build(problem: &ProjectedProblem) -> Result<Self, gtdlab_core::bellman::OracleError> {
        let optimum = problem.theta_opt_ball()?;
        let saddle = problem.saddle_point()?;
        let td = problem.td_fixed_point();
        Ok(OracleDoc {
            slope: mat_json(problem.slope()),
            offset: vec_json(problem.offset()),
            gram: mat_json(problem.gram()),
            r_theta: problem.r_theta,
            r_x: problem.r_x,
            optimum: OptimumDoc::from(&optimum),
            saddle: SaddleDoc::from(&saddle),
            td_fixed_point: TdFixedPointDoc::from(&td),
            sufficient_r_x: problem.sufficient_x_radius(),
        })
    }
}

/// Per-seed summary row.
#[derive(Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_n: usize,
    pub final_theta: Vec<f64>,
    pub final_x: Vec<f64>,
    pub final_dist_theta_opt: f64,
    pub final_j_gap: f64,
    pub final_x_tracking: f64,
    pub final_dist_saddle: f64,
    pub final_theta_norm: f64,
    pub final_x_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub averaged_theta: Option<Vec<f64>>,
    pub max_trace_norm: f64,
    pub diverged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
}

impl SeedSummary {
    pub fn from_record(record: &RunRecord) -> Self {
        let last = record.rows.last().expect("records have an initial row");
        SeedSummary {
            seed: record.seed,
            final_n: last.n,
            final_theta: vec_json(&last.theta),
            final_x: vec_json(&last.x),
            final_dist_theta_opt: last.dist_theta_opt,
            final_j_gap: last.j_gap,
            final_x_tracking: last.x_tracking,
            final_dist_saddle: last.dist_saddle,
            final_theta_norm: last.theta.norm(),
            final_x_norm: last.x.norm(),
            averaged_theta: record.averaged_theta.as_ref().map(vec_json),
            max_trace_norm: record.max_trace_norm,
            diverged: record.diverged,
            wall_seconds: record.wall_seconds,
        }
    }
}

/// Median of a sample (empty slices give NaN).
pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

#[derive(Serialize)]
pub struct RunSummary {
    pub seeds: Vec<SeedSummary>,
    pub median_final_dist_theta_opt: f64,
    pub median_final_j_gap: f64,
    pub median_final_dist_saddle: f64,
    pub n_diverged: usize,
    pub oracle: OracleDoc,
}

impl RunSummary {
    pub fn build(records: &[RunRecord], problem: &ProjectedProblem) -> Result<Self, gtdlab_core::bellman::OracleError> {
        let seeds: Vec<SeedSummary> = records.iter().map(SeedSummary::from_record).collect();
        let mut dist: Vec<f64> = seeds.iter().map(|s| s.final_dist_theta_opt).collect();
        let mut gap: Vec<f64> = seeds.iter().map(|s| s.final_j_gap).collect();
        let mut saddle: Vec<f64> = seeds.iter().map(|s| s.final_dist_saddle).collect();
        Ok(RunSummary {
            median_final_dist_theta_opt: median(&mut dist),
            median_final_j_gap: median(&mut gap),
            median_final_dist_saddle: median(&mut saddle),
            n_diverged: seeds.iter().filter(|s| s.diverged).count(),
            seeds,
            oracle: OracleDoc::build(problem)?,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable document");
    std::fs::write(path, text + "\n")
}
