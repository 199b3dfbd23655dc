//! JSON configuration schema and its conversion into validated experiment
//! objects. One structured config file drives every subcommand; flags
//! never change numerics.

use gtdlab_core::algo::{AlgoVariant, AlgorithmSpec, StepsizeSchedule};
use gtdlab_core::bellman::RegularizerSpec;
use gtdlab_core::mdp::{FeatureMap, FiniteMdp, ValidatedMdp};
use gtdlab_core::sim::{ExperimentConfig, MetricSet, OracleReference};
use gtdlab_core::trace::{CellLambda, LambdaScheme};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config key `{key}`: {message}")]
    Schema { key: &'static str, message: String },
    #[error("{0}")]
    Model(#[from] gtdlab_core::mdp::ModelError),
}

fn schema(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Schema {
        key,
        message: message.into(),
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_states: usize,
    #[serde(rename = "target_P")]
    pub target_p: Vec<Vec<f64>>,
    #[serde(rename = "behavior_P")]
    pub behavior_p: Vec<Vec<f64>>,
    pub discount: Vec<f64>,
    pub reward_mean: Vec<Vec<f64>>,
    pub reward_noise_scale: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaCellConfig {
    State { values: Vec<f64> },
    History { bound: f64 },
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaConfig {
    State { values: Vec<f64> },
    History { bound: f64 },
    Composite {
        partition: Vec<usize>,
        cells: Vec<LambdaCellConfig>,
    },
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepsizeConfig {
    Constant { a: f64 },
    Power { a: f64, c: f64 },
    OneOverN { a: f64 },
}

impl From<&StepsizeConfig> for StepsizeSchedule {
    fn from(c: &StepsizeConfig) -> Self {
        match c {
            StepsizeConfig::Constant { a } => StepsizeSchedule::Constant { a: *a },
            StepsizeConfig::Power { a, c } => StepsizeSchedule::Power {
                a: *a,
                exponent: *c,
            },
            StepsizeConfig::OneOverN { a } => StepsizeSchedule::OneOverN { a: *a },
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegularizerConfig {
    None,
    Quadratic { weight: f64, center: Vec<f64> },
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub variant: String,
    #[serde(default)]
    pub r_theta: Option<f64>,
    #[serde(default)]
    pub r_x: Option<f64>,
    /// Truncation radius of the biased variants.
    #[serde(default, rename = "K")]
    pub trunc: Option<f64>,
    /// Mirror exponent.
    #[serde(default)]
    pub q: Option<f64>,
    /// Mirror level.
    #[serde(default)]
    pub level: Option<f64>,
    #[serde(default)]
    pub eta: Option<f64>,
    pub stepsize_alpha: StepsizeConfig,
    #[serde(default)]
    pub stepsize_beta: Option<StepsizeConfig>,
    #[serde(default)]
    pub regularizer: Option<RegularizerConfig>,
    #[serde(default)]
    pub divergence_guard: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AveragingConfig {
    pub enabled: bool,
    #[serde(default)]
    pub burn_in: usize,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceConfig {
    Auto,
    Exact,
    Empirical { horizon: usize, seed: u64 },
}

/// Parameter grid for the sweep subcommand (cartesian product).
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default, rename = "K")]
    pub trunc: Option<Vec<f64>>,
    #[serde(default)]
    pub eta: Option<Vec<f64>>,
    #[serde(default)]
    pub c_alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub c_beta: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RootConfig {
    pub model: ModelConfig,
    pub lambda: LambdaConfig,
    pub algorithm: AlgorithmConfig,
    pub horizon: usize,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub metrics: Option<Vec<String>>,
    #[serde(default)]
    pub averaging: Option<AveragingConfig>,
    #[serde(default)]
    pub init_state: Option<usize>,
    #[serde(default)]
    pub reference: Option<ReferenceConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

impl RootConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![0])
    }

    /// Builds the raw model (dimension checks only), for validation
    /// reporting.
    pub fn build_raw_model(&self) -> Result<FiniteMdp, ConfigError> {
        let m = &self.model;
        let n = m.n_states;
        let matrix = |rows: &Vec<Vec<f64>>, key: &'static str| -> Result<DMatrix<f64>, ConfigError> {
            if rows.len() != n {
                return Err(schema(key, format!("expected {n} rows, found {}", rows.len())));
            }
            let cols = rows.first().map(|r| r.len()).unwrap_or(0);
            if rows.iter().any(|r| r.len() != cols) {
                return Err(schema(key, "ragged rows"));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            Ok(DMatrix::from_row_slice(n, cols, &flat))
        };
        let target = matrix(&m.target_p, "model.target_P")?;
        let behavior = matrix(&m.behavior_p, "model.behavior_P")?;
        let reward_mean = matrix(&m.reward_mean, "model.reward_mean")?;
        let reward_noise = matrix(&m.reward_noise_scale, "model.reward_noise_scale")?;
        if m.discount.len() != n {
            return Err(schema(
                "model.discount",
                format!("expected {n} entries, found {}", m.discount.len()),
            ));
        }
        let discount = DVector::from_row_slice(&m.discount);
        Ok(FiniteMdp::new(target, behavior, discount, reward_mean, reward_noise)?)
    }

    pub fn build_features(&self) -> Result<FeatureMap, ConfigError> {
        let m = &self.model;
        let n = m.n_states;
        if m.features.len() != n {
            return Err(schema(
                "model.features",
                format!("expected {n} rows, found {}", m.features.len()),
            ));
        }
        let d = m.features.first().map(|r| r.len()).unwrap_or(0);
        if m.features.iter().any(|r| r.len() != d) {
            return Err(schema("model.features", "ragged rows"));
        }
        let flat: Vec<f64> = m.features.iter().flatten().copied().collect();
        Ok(FeatureMap::new(DMatrix::from_row_slice(n, d, &flat))?)
    }

    pub fn build_scheme(&self) -> Result<LambdaScheme, ConfigError> {
        let cell = |c: &LambdaCellConfig| match c {
            LambdaCellConfig::State { values } => {
                CellLambda::StateDependent(DVector::from_row_slice(values))
            }
            LambdaCellConfig::History { bound } => CellLambda::HistoryDependent { bound: *bound },
        };
        let scheme = match &self.lambda {
            LambdaConfig::State { values } => {
                LambdaScheme::StateDependent(DVector::from_row_slice(values))
            }
            LambdaConfig::History { bound } => LambdaScheme::HistoryDependent { bound: *bound },
            LambdaConfig::Composite { partition, cells } => LambdaScheme::Composite {
                partition: partition.clone(),
                cells: cells.iter().map(cell).collect(),
            },
        };
        scheme
            .validate(self.model.n_states)
            .map_err(|e| schema("lambda", e.to_string()))?;
        Ok(scheme)
    }

    pub fn build_algorithm(&self, dim: usize) -> Result<AlgorithmSpec, ConfigError> {
        let a = &self.algorithm;
        let need = |value: Option<f64>, key: &'static str| {
            value.ok_or_else(|| schema(key, "required by this variant"))
        };
        let variant = match a.variant.as_str() {
            "gtda_2ts" => AlgoVariant::Gtda2Ts,
            "gtdb_2ts" => AlgoVariant::Gtdb2Ts,
            "gtda_1ts" => AlgoVariant::Gtda1Ts,
            "gtda_1ts_eta" => AlgoVariant::Gtda1TsEta {
                eta: need(a.eta, "algorithm.eta")?,
            },
            "gtda_unconstrained" => AlgoVariant::GtdaUnconstrained,
            "biased_gtda_2ts" => AlgoVariant::BiasedGtda2Ts {
                trunc: need(a.trunc, "algorithm.K")?,
            },
            "biased_gtdb_2ts" => AlgoVariant::BiasedGtdb2Ts {
                trunc: need(a.trunc, "algorithm.K")?,
            },
            "biased_gtda_1ts" => AlgoVariant::BiasedGtda1Ts {
                trunc: need(a.trunc, "algorithm.K")?,
            },
            "md_gtda" => AlgoVariant::MdGtda {
                q: need(a.q, "algorithm.q")?,
            },
            "md_gtdb" => AlgoVariant::MdGtdb {
                q: need(a.q, "algorithm.q")?,
            },
            "md_td" => AlgoVariant::MdTd {
                q: need(a.q, "algorithm.q")?,
            },
            other => {
                return Err(schema("algorithm.variant", format!("unknown variant `{other}`")));
            }
        };
        let alpha: StepsizeSchedule = (&a.stepsize_alpha).into();
        let beta: StepsizeSchedule = a
            .stepsize_beta
            .as_ref()
            .map(StepsizeSchedule::from)
            .unwrap_or_else(|| alpha.clone());
        let regularizer = match &a.regularizer {
            None | Some(RegularizerConfig::None) => RegularizerSpec::None,
            Some(RegularizerConfig::Quadratic { weight, center }) => {
                if center.len() != dim {
                    return Err(schema(
                        "algorithm.regularizer.center",
                        format!("expected {dim} entries, found {}", center.len()),
                    ));
                }
                RegularizerSpec::quadratic(*weight, DVector::from_row_slice(center))
            }
        };
        let unconstrained = matches!(variant, AlgoVariant::GtdaUnconstrained);
        let mirror = variant.is_mirror();
        let mut spec = AlgorithmSpec::new(variant, alpha, beta).with_regularizer(regularizer);
        if !unconstrained {
            spec = spec.with_radii(
                need(a.r_theta, "algorithm.r_theta")?,
                need(a.r_x, "algorithm.r_x")?,
            );
        }
        if mirror {
            spec = spec.with_level(need(a.level, "algorithm.level")?);
        }
        if let Some(guard) = a.divergence_guard {
            spec.divergence_guard = guard;
        }
        spec.validate().map_err(|e| schema("algorithm", e.to_string()))?;
        Ok(spec)
    }

    pub fn build_metrics(&self) -> Result<MetricSet, ConfigError> {
        match &self.metrics {
            None => Ok(MetricSet::default()),
            Some(names) => {
                let mut set = MetricSet {
                    dist_theta_opt: false,
                    j_gap: false,
                    x_tracking: false,
                    dist_saddle: false,
                    iterate_norms: false,
                };
                for name in names {
                    match name.as_str() {
                        "dist_theta_opt" => set.dist_theta_opt = true,
                        "J_gap" => set.j_gap = true,
                        "x_tracking" => set.x_tracking = true,
                        "dist_saddle" => set.dist_saddle = true,
                        "iterate_norms" => set.iterate_norms = true,
                        other => {
                            return Err(schema("metrics", format!("unknown metric `{other}`")));
                        }
                    }
                }
                Ok(set)
            }
        }
    }

    /// Builds the full experiment (validating the model along the way).
    pub fn build_experiment(&self) -> Result<ExperimentConfig, ConfigError> {
        let mdp = ValidatedMdp::new(self.build_raw_model()?)?;
        let features = self.build_features()?;
        let scheme = self.build_scheme()?;
        let algorithm = self.build_algorithm(features.dim())?;
        let reference = match &self.reference {
            None | Some(ReferenceConfig::Auto) => OracleReference::Auto,
            Some(ReferenceConfig::Exact) => OracleReference::Exact,
            Some(ReferenceConfig::Empirical { horizon, seed }) => OracleReference::Empirical {
                horizon: *horizon,
                seed: *seed,
            },
        };
        let averaging = match &self.averaging {
            Some(a) if a.enabled => Some(a.burn_in),
            _ => None,
        };
        let config = ExperimentConfig {
            mdp,
            features,
            scheme,
            algorithm,
            horizon: self.horizon,
            checkpoint_every: self
                .checkpoint_every
                .unwrap_or_else(|| (self.horizon / 10).max(1)),
            metrics: self.build_metrics()?,
            averaging,
            init_state: self.init_state,
            init_theta: None,
            init_x: None,
            reference,
        };
        config
            .validate()
            .map_err(|e| schema("experiment", e.to_string()))?;
        Ok(config)
    }
}

/// One sweep cell: the parameter overrides applied to the base config.
#[derive(Clone, Debug, Serialize)]
pub struct SweepCell {
    #[serde(rename = "K", skip_serializing_if = "Option::is_none")]
    pub trunc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_beta: Option<f64>,
}

impl SweepCell {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(v) = self.trunc {
            parts.push(format!("K={v}"));
        }
        if let Some(v) = self.eta {
            parts.push(format!("eta={v}"));
        }
        if let Some(v) = self.c_alpha {
            parts.push(format!("c_alpha={v}"));
        }
        if let Some(v) = self.c_beta {
            parts.push(format!("c_beta={v}"));
        }
        if parts.is_empty() {
            String::from("base")
        } else {
            parts.join(",")
        }
    }
}

/// Expands the sweep grid into cells (cartesian product; absent axes
/// contribute a single pass-through value).
pub fn expand_sweep(sweep: &SweepConfig) -> Vec<SweepCell> {
    let axis = |values: &Option<Vec<f64>>| -> Vec<Option<f64>> {
        match values {
            Some(v) if !v.is_empty() => v.iter().copied().map(Some).collect(),
            _ => vec![None],
        }
    };
    let mut cells = Vec::new();
    for &trunc in &axis(&sweep.trunc) {
        for &eta in &axis(&sweep.eta) {
            for &c_alpha in &axis(&sweep.c_alpha) {
                for &c_beta in &axis(&sweep.c_beta) {
                    cells.push(SweepCell {
                        trunc,
                        eta,
                        c_alpha,
                        c_beta,
                    });
                }
            }
        }
    }
    cells
}

/// Applies a sweep cell to a copy of the root config. Returns a reason
/// string when the cell is infeasible for the configured variant.
pub fn apply_cell(base: &RootConfig, cell: &SweepCell) -> Result<RootConfig, String> {
    let mut config = base.clone();
    if let Some(k) = cell.trunc {
        if !base.algorithm.variant.starts_with("biased_") {
            return Err(format!(
                "K sweep needs a biased variant, got `{}`",
                base.algorithm.variant
            ));
        }
        config.algorithm.trunc = Some(k);
    }
    if let Some(eta) = cell.eta {
        if base.algorithm.variant != "gtda_1ts_eta" {
            return Err(format!(
                "eta sweep needs variant `gtda_1ts_eta`, got `{}`",
                base.algorithm.variant
            ));
        }
        config.algorithm.eta = Some(eta);
    }
    let override_exponent = |s: &StepsizeConfig, c: f64| -> Result<StepsizeConfig, String> {
        match s {
            StepsizeConfig::Power { a, .. } => Ok(StepsizeConfig::Power { a: *a, c }),
            _ => Err(String::from("exponent sweep needs a power stepsize")),
        }
    };
    if let Some(c) = cell.c_alpha {
        config.algorithm.stepsize_alpha = override_exponent(&config.algorithm.stepsize_alpha, c)?;
    }
    if let Some(c) = cell.c_beta {
        let beta = config
            .algorithm
            .stepsize_beta
            .as_ref()
            .ok_or_else(|| String::from("c_beta sweep needs an explicit stepsize_beta"))?;
        config.algorithm.stepsize_beta = Some(override_exponent(beta, c)?);
    }
    // Stepsize-pair feasibility is checked when the algorithm is rebuilt.
    let features = config.build_features().map_err(|e| e.to_string())?;
    config
        .build_algorithm(features.dim())
        .map_err(|e| e.to_string())?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(variant: &str, extra: &str) -> String {
        format!(
            r#"{{
            "model": {{
                "n_states": 2,
                "target_P": [[0.5, 0.5], [0.5, 0.5]],
                "behavior_P": [[0.5, 0.5], [0.5, 0.5]],
                "discount": [0.9, 0.9],
                "reward_mean": [[1.0, 1.0], [1.0, 1.0]],
                "reward_noise_scale": [[0.0, 0.0], [0.0, 0.0]],
                "features": [[1.0], [1.0]]
            }},
            "lambda": {{ "kind": "state", "values": [0.5, 0.5] }},
            "algorithm": {{
                "variant": "{variant}",
                "r_theta": 20.0,
                "r_x": 10.0,
                {extra}
                "stepsize_alpha": {{ "kind": "power", "a": 1.0, "c": 0.8 }},
                "stepsize_beta": {{ "kind": "power", "a": 1.0, "c": 0.6 }}
            }},
            "horizon": 100
        }}"#
        )
    }

    #[test]
    fn parses_and_builds_a_minimal_config() {
        let config = RootConfig::from_json(&minimal("gtda_2ts", "")).unwrap();
        let experiment = config.build_experiment().unwrap();
        assert_eq!(experiment.horizon, 100);
        assert_eq!(experiment.checkpoint_every, 10);
        assert_eq!(config.seeds(), vec![0]);
    }

    #[test]
    fn unknown_variant_is_a_schema_error() {
        let config = RootConfig::from_json(&minimal("gtdx", "")).unwrap();
        let err = config.build_experiment().unwrap_err();
        assert!(err.to_string().contains("algorithm.variant"), "{err}");
    }

    #[test]
    fn variant_specific_parameters_are_required() {
        let config = RootConfig::from_json(&minimal("biased_gtda_2ts", "")).unwrap();
        let err = config.build_experiment().unwrap_err();
        assert!(err.to_string().contains("algorithm.K"), "{err}");
        let config =
            RootConfig::from_json(&minimal("biased_gtda_2ts", r#""K": 4.0,"#)).unwrap();
        assert!(config.build_experiment().is_ok());
        let config = RootConfig::from_json(&minimal("md_gtda", r#""q": 2.0,"#)).unwrap();
        let err = config.build_experiment().unwrap_err();
        assert!(err.to_string().contains("algorithm.level"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = minimal("gtda_2ts", "").replace("\"horizon\": 100", "\"horizon\": 100, \"horizno\": 2");
        assert!(RootConfig::from_json(&text).is_err());
    }

    #[test]
    fn unknown_metric_names_are_rejected() {
        let mut value: serde_json::Value =
            serde_json::from_str(&minimal("gtda_2ts", "")).unwrap();
        value["metrics"] = serde_json::json!(["dist_theta_opt", "wat"]);
        let config: RootConfig = serde_json::from_value(value).unwrap();
        assert!(config.build_metrics().is_err());
    }

    #[test]
    fn sweep_grid_expansion_and_feasibility() {
        let sweep = SweepConfig {
            trunc: Some(vec![1.0, 4.0]),
            eta: None,
            c_alpha: Some(vec![0.8, 0.9]),
            c_beta: None,
        };
        let cells = expand_sweep(&sweep);
        assert_eq!(cells.len(), 4);

        let base = RootConfig::from_json(&minimal("gtda_2ts", "")).unwrap();
        // A truncation sweep needs a biased variant.
        let err = apply_cell(&base, &cells[0]).unwrap_err();
        assert!(err.contains("biased"), "{err}");

        let biased =
            RootConfig::from_json(&minimal("biased_gtda_2ts", r#""K": 2.0,"#)).unwrap();
        let applied = apply_cell(&biased, &cells[0]).unwrap();
        assert_eq!(applied.algorithm.trunc, Some(1.0));
    }
}
