//! Versioned JSON scenario files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autocache::CacheConfig;
use crate::autopipe::BalanceCriterion;
use crate::engine::{CostModel, Features, Scenario, TransitionOverheads};
use crate::error::{Error, Result};
use crate::freeze::{GradNormSource, GradNormTrace, SyntheticNorms, SyntheticProfile};
use crate::model::{preset, ActivationProfile, ClusterSpec, LayerProfile, ModelSpec, TrainingConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Either a named preset or an explicit layer profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerProfile>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_bytes: Option<ActivationProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes_per_param: Option<u64>,
}

impl ModelConfig {
    pub fn preset(name: &str) -> Self {
        ModelConfig {
            preset: Some(name.to_string()),
            name: None,
            layers: None,
            activation_bytes: None,
            bytes_per_param: None,
        }
    }

    pub fn build(&self) -> Result<ModelSpec> {
        match (&self.preset, &self.layers) {
            (Some(name), None) => {
                if self.activation_bytes.is_some() || self.bytes_per_param.is_some() || self.name.is_some() {
                    return Err(Error::config(
                        "model",
                        "a preset cannot be combined with explicit sizes",
                    ));
                }
                preset(name).map_err(|e| Error::config("model.preset", e.to_string()))
            }
            (None, Some(layers)) => {
                let acts = self.activation_bytes.clone().ok_or_else(|| {
                    Error::config("model.activation_bytes", "required with explicit layers")
                })?;
                ModelSpec::new(
                    self.name.clone().unwrap_or_else(|| "custom".into()),
                    layers.clone(),
                    acts,
                    self.bytes_per_param.unwrap_or(4),
                )
                .map_err(|e| Error::config("model.layers", e.to_string()))
            }
            _ => Err(Error::config(
                "model",
                "give exactly one of `preset` or `layers`",
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileName {
    Monotone,
    EarlyRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum GradNormConfig {
    Synthetic {
        profile: ProfileName,
        /// Timestep from which `early_random` turns monotone.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        switchover: Option<usize>,
        /// Defaults to the scenario seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        decay: Option<f64>,
    },
    /// CSV `epoch,layer,grad_norm`; relative paths resolve against the
    /// config file's directory.
    Trace { path: PathBuf },
}

impl Default for GradNormConfig {
    fn default() -> Self {
        GradNormConfig::Synthetic {
            profile: ProfileName::Monotone,
            switchover: None,
            seed: None,
            decay: None,
        }
    }
}

/// File names written under the output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub report: String,
    pub timeline: String,
    pub cache_events: String,
    pub transitions: String,
    pub summary: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            report: "report.csv".into(),
            timeline: "timeline.json".into(),
            cache_events: "cache_events.json".into(),
            transitions: "transitions.jsonl".into(),
            summary: "summary.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub cluster: ClusterSpec,
    pub training: TrainingConfig,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default)]
    pub transition_overheads: TransitionOverheads,
    #[serde(default)]
    pub cache: CacheConfig,
    #[serde(default)]
    pub partition: BalanceCriterion,
    #[serde(default)]
    pub grad_norms: GradNormConfig,
    #[serde(default = "all_features")]
    pub features: Features,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub outputs: OutputConfig,
}

fn all_features() -> Features {
    Features::ALL
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", cfg.schema_version),
            ));
        }
        Ok(cfg)
    }

    /// Canonical pretty-printed form; parsing it yields an equal config.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Resolves presets and loads traces. `base_dir` anchors relative trace
    /// paths.
    pub fn build(&self, base_dir: &Path) -> Result<Scenario> {
        let model = self.model.build()?;
        let norms = match &self.grad_norms {
            GradNormConfig::Synthetic {
                profile,
                switchover,
                seed,
                decay,
            } => {
                let profile = match (profile, switchover) {
                    (ProfileName::Monotone, None) => SyntheticProfile::Monotone,
                    (ProfileName::Monotone, Some(_)) => {
                        return Err(Error::config(
                            "grad_norms.switchover",
                            "only applies to the early_random profile",
                        ))
                    }
                    (ProfileName::EarlyRandom, s) => SyntheticProfile::EarlyRandom {
                        switchover: s.unwrap_or(3),
                    },
                };
                let mut s = SyntheticNorms::new(profile, seed.unwrap_or(self.seed));
                if let Some(d) = decay {
                    if !(d.is_finite() && *d > 0.0) {
                        return Err(Error::config("grad_norms.decay", "must be positive"));
                    }
                    s.decay = *d;
                }
                GradNormSource::Synthetic(s)
            }
            GradNormConfig::Trace { path } => {
                let full = base_dir.join(path);
                if !full.is_file() {
                    return Err(Error::config(
                        "grad_norms.path",
                        format!("trace file {} does not exist", full.display()),
                    ));
                }
                GradNormSource::Trace(GradNormTrace::load(&full)?)
            }
        };
        let scenario = Scenario {
            model,
            cluster: self.cluster.clone(),
            training: self.training.clone(),
            cost: self.cost,
            overheads: self.transition_overheads.clone(),
            cache: self.cache,
            criterion: self.partition,
            norms,
            seed: self.seed,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

/// Reads and validates a scenario file. Validation errors name the line of
/// the offending key when it can be found.
pub fn load(path: &Path) -> Result<(ScenarioConfig, Scenario)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let result = ScenarioConfig::from_json(&text).and_then(|cfg| {
        let scenario = cfg.build(base)?;
        Ok((cfg, scenario))
    });
    result.map_err(|e| match e {
        Error::Config { path: key, message } => match key_line(&text, &key) {
            Some(line) => Error::Config {
                path: key,
                message: format!("{message} (line {line})"),
            },
            None => Error::Config { path: key, message },
        },
        other => other,
    })
}

/// 1-based line of the last segment of a dotted key path, searching after
/// each parent key in turn.
pub fn key_line(text: &str, dotted: &str) -> Option<usize> {
    let mut offset = 0;
    for segment in dotted.split('.') {
        let name = segment.split('[').next().unwrap_or(segment);
        let needle = format!("\"{name}\"");
        offset += text[offset..].find(&needle)?;
    }
    Some(text[..offset].matches('\n').count() + 1)
}
