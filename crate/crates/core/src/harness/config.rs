//! Experiment configuration: a TOML document mapping onto
//! [`FederationConfig`], schema-validated before any run.

use crate::aggregator::AggregatorKind;
use crate::update::PartyId;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

/// Task model with its generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskModel {
    LinearRegression {
        dim: usize,
        #[serde(default = "default_one")]
        label_noise: f64,
        #[serde(default = "default_one")]
        feature_scale: f64,
    },
    LogisticRegression {
        dim: usize,
        classes: usize,
        #[serde(default = "default_one")]
        class_spread: f64,
        #[serde(default)]
        label_flip_rate: f64,
    },
}

fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    #[default]
    Full,
    Minibatch {
        size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", rename_all = "snake_case", deny_unknown_fields)]
pub enum LearningRate {
    Constant { eta: f64 },
    /// eta / (1 + t).
    InvT { eta: f64 },
}

impl Default for LearningRate {
    fn default() -> Self {
        LearningRate::Constant { eta: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    #[default]
    MultiRoundSgd,
    OneRound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub model: TaskModel,
    #[serde(default)]
    pub batch: BatchMode,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub learning_rate: LearningRate,
    #[serde(default)]
    pub mode: TaskMode,
}

fn default_rounds() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartyBehavior {
    Genuine {
        sample_size: usize,
    },
    GaussianAdversary {
        #[serde(default = "default_one")]
        scale: f64,
    },
    RandomUpdateAdversary {
        #[serde(default = "default_one")]
        scale: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartySpec {
    pub id: PartyId,
    pub behavior: PartyBehavior,
    /// Data-noise multiplier; drawn log-uniform from
    /// `data.noise_level_range` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_level: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum ParticipationRule {
    #[default]
    Full,
    RandomSubset {
        k: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum OverlapDesign {
    #[default]
    Disjoint,
    /// One block of examples shared by every genuine party.
    SharedBlock { shared: usize },
    /// Exact pairwise overlap counts over the genuine parties, realized by
    /// dedicated per-pair blocks.
    Pairwise { counts: Vec<Vec<usize>> },
    /// Named groups of genuine parties, each sharing one dedicated block;
    /// expands to pairwise overlaps of `shared` within every group.
    Groups { groups: Vec<OverlapGroup> },
}

/// One shared block among a set of genuine parties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlapGroup {
    pub parties: Vec<PartyId>,
    pub shared: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub pool_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default)]
    pub overlap: OverlapDesign,
    #[serde(default = "default_noise_range")]
    pub noise_level_range: (f64, f64),
}

fn default_test_size() -> usize {
    500
}

fn default_noise_range() -> (f64, f64) {
    (0.5, 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    /// Report directory; the CLI falls back to --out or FEDBAYES_OUT_DIR.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Sliding window W of rounds kept in the aggregator noise state.
    #[serde(default = "default_window")]
    pub state_window: usize,
    #[serde(default)]
    pub reset_state_each_round: bool,
}

fn default_window() -> usize {
    10
}

/// Everything one experiment needs: the task, the party roster, the
/// participation rule, the aggregator, and the run plan.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub task: TaskSpec,
    pub data: DataConfig,
    pub parties: Vec<PartySpec>,
    pub participation: ParticipationRule,
    pub aggregator: AggregatorKind,
    pub run: RunConfig,
}

/// Raw document shape: identical to [`FederationConfig`] except that the
/// aggregator section is a flat struct, so type-level parse errors carry
/// full key paths.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    task: TaskSpec,
    data: DataConfig,
    parties: Vec<PartySpec>,
    participation: ParticipationRule,
    aggregator: AggregatorConfig,
    run: RunConfig,
}

/// The `[aggregator]` section: a method name plus whichever
/// hyperparameters apply to it. Setting a hyperparameter the named method
/// does not use is a validation error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AggregatorConfig {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_weights: Option<Vec<(PartyId, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothing: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robust_start: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_sq_init: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_party_noise: Option<bool>,
}

impl AggregatorConfig {
    /// Resolve to a configured aggregator, rejecting unknown kinds and
    /// hyperparameters that do not belong to the kind.
    pub fn to_kind(&self) -> Result<AggregatorKind, Vec<String>> {
        use crate::aggregator as agg;
        let mut errors = Vec::new();
        let mut used: Vec<&str> = vec![];
        macro_rules! take {
            ($field:ident) => {{
                used.push(stringify!($field));
                self.$field.clone()
            }};
        }
        let kind = match self.kind.as_str() {
            "uniform_avg" => Some(AggregatorKind::UniformAvg {
                sample_weights: take!(sample_weights),
            }),
            "coord_median" => Some(AggregatorKind::CoordMedian),
            "geom_median" => {
                let d = agg::GeomMedianParams::default();
                Some(AggregatorKind::GeomMedian {
                    params: agg::GeomMedianParams {
                        smoothing: take!(smoothing).unwrap_or(d.smoothing),
                        tol: take!(tol).unwrap_or(d.tol),
                        max_iter: take!(max_iter).unwrap_or(d.max_iter),
                    },
                })
            }
            "ivar_mle" => {
                let d = agg::IvarMleHyper::default();
                Some(AggregatorKind::IvarMle {
                    params: agg::IvarMleHyper {
                        iters: take!(iters).unwrap_or(d.iters),
                        tol: take!(tol).unwrap_or(d.tol),
                        floor: take!(floor).unwrap_or(d.floor),
                        robust_start: take!(robust_start).unwrap_or(d.robust_start),
                    },
                })
            }
            "ivar_vb" => {
                let d = agg::IvarVbHyper::default();
                Some(AggregatorKind::IvarVb {
                    params: agg::IvarVbHyper {
                        iters: take!(iters).unwrap_or(d.iters),
                        tol: take!(tol).unwrap_or(d.tol),
                        tau_sq_init: take!(tau_sq_init).unwrap_or(d.tau_sq_init),
                    },
                })
            }
            "icov_mle" => {
                let d = agg::IcovMleHyper::default();
                Some(AggregatorKind::IcovMle {
                    params: agg::IcovMleHyper {
                        latent_dim: take!(latent_dim).unwrap_or(d.latent_dim),
                        lr: take!(lr).unwrap_or(d.lr),
                        epochs: take!(epochs).unwrap_or(d.epochs),
                        init_scale: take!(init_scale).unwrap_or(d.init_scale),
                    },
                })
            }
            "icov_vb" => {
                let d = agg::IcovVbHyper::default();
                Some(AggregatorKind::IcovVb {
                    params: agg::IcovVbHyper {
                        latent_dim: take!(latent_dim).unwrap_or(d.latent_dim),
                        iters: take!(iters).unwrap_or(d.iters),
                        tol: take!(tol).unwrap_or(d.tol),
                        init_scale: take!(init_scale).unwrap_or(d.init_scale),
                        per_party_noise: take!(per_party_noise).unwrap_or(d.per_party_noise),
                    },
                })
            }
            other => {
                errors.push(format!("aggregator.kind: unknown aggregator {other:?}"));
                None
            }
        };
        if kind.is_some() {
            let set: [(&str, bool); 13] = [
                ("sample_weights", self.sample_weights.is_some()),
                ("smoothing", self.smoothing.is_some()),
                ("tol", self.tol.is_some()),
                ("max_iter", self.max_iter.is_some()),
                ("iters", self.iters.is_some()),
                ("floor", self.floor.is_some()),
                ("robust_start", self.robust_start.is_some()),
                ("tau_sq_init", self.tau_sq_init.is_some()),
                ("latent_dim", self.latent_dim.is_some()),
                ("lr", self.lr.is_some()),
                ("epochs", self.epochs.is_some()),
                ("init_scale", self.init_scale.is_some()),
                ("per_party_noise", self.per_party_noise.is_some()),
            ];
            for (name, is_set) in set {
                if is_set && !used.contains(&name) {
                    errors.push(format!(
                        "aggregator.{name}: not a parameter of {}",
                        self.kind
                    ));
                }
            }
        }
        match (kind, errors.is_empty()) {
            (Some(k), true) => Ok(k),
            (_, _) => Err(errors),
        }
    }
}

/// Config failures: either the document does not parse, or it parses but
/// violates invariants (every violation listed with its path).
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error at {path}: {source}")]
    Parse {
        /// Dotted path to the offending key.
        path: String,
        source: toml::de::Error,
    },
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid config:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

impl FederationConfig {
    /// Check every invariant, collecting violations with their paths.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errors = Vec::new();

        match &self.task.model {
            TaskModel::LinearRegression {
                dim, label_noise, ..
            } => {
                if *dim == 0 {
                    errors.push("task.model.dim: must be >= 1".into());
                }
                if *label_noise < 0.0 {
                    errors.push("task.model.label_noise: must be >= 0".into());
                }
            }
            TaskModel::LogisticRegression {
                dim,
                classes,
                label_flip_rate,
                ..
            } => {
                if *dim == 0 {
                    errors.push("task.model.dim: must be >= 1".into());
                }
                if *classes < 2 {
                    errors.push("task.model.classes: must be >= 2".into());
                }
                if !(0.0..=1.0).contains(label_flip_rate) {
                    errors.push("task.model.label_flip_rate: must be in [0, 1]".into());
                }
            }
        }
        if self.task.rounds == 0 {
            errors.push("task.rounds: must be >= 1".into());
        }
        match &self.task.learning_rate {
            LearningRate::Constant { eta } | LearningRate::InvT { eta } => {
                if !(*eta > 0.0) {
                    errors.push("task.learning_rate.eta: must be > 0".into());
                }
            }
        }

        let genuine_sizes: Vec<usize> = self
            .parties
            .iter()
            .filter_map(|p| match p.behavior {
                PartyBehavior::Genuine { sample_size } => Some(sample_size),
                _ => None,
            })
            .collect();
        if genuine_sizes.is_empty() {
            errors.push("parties: at least one genuine party is required".into());
        }
        for (i, p) in self.parties.iter().enumerate() {
            match p.behavior {
                PartyBehavior::Genuine { sample_size } => {
                    if sample_size == 0 {
                        errors.push(format!("parties[{i}].behavior.sample_size: must be >= 1"));
                    }
                }
                PartyBehavior::GaussianAdversary { scale }
                | PartyBehavior::RandomUpdateAdversary { scale } => {
                    if !(scale > 0.0) {
                        errors.push(format!("parties[{i}].behavior.scale: must be > 0"));
                    }
                }
            }
            if let Some(level) = p.noise_level {
                if !(level > 0.0) {
                    errors.push(format!("parties[{i}].noise_level: must be > 0"));
                }
            }
            for q in &self.parties[..i] {
                if q.id == p.id {
                    errors.push(format!("parties[{i}].id: duplicate id {}", p.id));
                }
            }
        }

        if let BatchMode::Minibatch { size } = self.task.batch {
            if size == 0 {
                errors.push("task.batch.minibatch.size: must be >= 1".into());
            }
            if let Some(&smallest) = genuine_sizes.iter().min() {
                if size > smallest {
                    errors.push(format!(
                        "task.batch.minibatch.size: {size} exceeds the smallest genuine sample size {smallest}"
                    ));
                }
            }
        }

        if let ParticipationRule::RandomSubset { k } = self.participation {
            if k == 0 || k > self.parties.len() {
                errors.push(format!(
                    "participation.k: must be in 1..={}",
                    self.parties.len()
                ));
            }
        }

        if self.data.pool_size == 0 {
            errors.push("data.pool_size: must be >= 1".into());
        }
        if self.data.test_size == 0 {
            errors.push("data.test_size: must be >= 1".into());
        }
        let (lo, hi) = self.data.noise_level_range;
        if !(lo > 0.0 && hi >= lo) {
            errors.push("data.noise_level_range: need 0 < lo <= hi".into());
        }

        if let Err(e) = self.aggregator.validate() {
            errors.push(format!("aggregator: {e}"));
        }
        if self.run.seeds.is_empty() {
            errors.push("run.seeds: at least one seed is required".into());
        }
        if self.run.state_window == 0 {
            errors.push("run.state_window: must be >= 1".into());
        }

        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }
}

/// Parse and validate a TOML config document. Type-level failures report
/// the dotted path of the offending key.
pub fn parse_config(text: &str) -> Result<FederationConfig, ConfigError> {
    let value: toml::Value = toml::from_str(text)?;
    let raw: RawConfig =
        serde_path_to_error::deserialize(value).map_err(|e| ConfigError::Parse {
            path: e.path().to_string(),
            source: e.into_inner(),
        })?;
    let mut errors = Vec::new();
    let aggregator = match raw.aggregator.to_kind() {
        Ok(kind) => kind,
        Err(mut e) => {
            errors.append(&mut e);
            AggregatorKind::CoordMedian
        }
    };
    let cfg = FederationConfig {
        task: raw.task,
        data: raw.data,
        parties: raw.parties,
        participation: raw.participation,
        aggregator,
        run: raw.run,
    };
    match cfg.validate() {
        Ok(()) if errors.is_empty() => Ok(cfg),
        Ok(()) => Err(ConfigError::Invalid(errors)),
        Err(mut more) => {
            errors.append(&mut more);
            Err(ConfigError::Invalid(errors))
        }
    }
}

/// Serialize a config back to TOML.
pub fn to_toml(cfg: &FederationConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}
