//! Run configuration: profile defaults, JSON config files and dotted
//! `--set` overrides, resolved into one validated document.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use csen_core::data::SynthConfig;
use csen_core::encoders::{AppearanceConfig, ConvStage, SemanticConfig, SideInfoConfig};
use csen_core::evaluation::EvalProtocol;
use csen_core::losses::LossConfig;
use csen_core::model::ModelConfig;
use csen_core::training::{AugmentConfig, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalProtocol,
    /// Dataset manifest; the `--data` flag takes precedence.
    pub data: Option<PathBuf>,
}

/// Named starting points that a config file and `--set` refine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    /// Component defaults: the full-scale hyperparameters.
    #[default]
    Full,
    /// Tuned for the 64×64 synthetic corpus on a single CPU core.
    Desk,
    /// Seconds-long end-to-end run on a tiny corpus and model.
    Smoke,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            "smoke" => Ok(Profile::Smoke),
            other => Err(format!("unknown profile `{other}` (expected full, desk or smoke)")),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Full => "full",
            Profile::Desk => "desk",
            Profile::Smoke => "smoke",
        })
    }
}

fn desk_train() -> TrainConfig {
    TrainConfig {
        p: 8,
        k: 8,
        epochs: 12,
        lr: Some(3e-3),
        augment: AugmentConfig {
            crop: false,
            erase: false,
            ..AugmentConfig::default()
        },
        ..TrainConfig::default()
    }
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Full => Self::default(),
            Profile::Desk => {
                let mut model = ModelConfig::default();
                model.side_info.enabled = false;
                Self {
                    model,
                    train: desk_train(),
                    ..Self::default()
                }
            }
            Profile::Smoke => Self {
                synth: SynthConfig {
                    num_ids: 16,
                    images_per_id: 6,
                    image_size: 32,
                    ..SynthConfig::default()
                },
                model: ModelConfig {
                    appearance: AppearanceConfig {
                        stages: [8, 16, 32]
                            .into_iter()
                            .map(|channels| ConvStage { channels, stride: 2 })
                            .collect(),
                        input_size: [32, 32],
                        conv_bias: false,
                    },
                    semantic: SemanticConfig {
                        d_s: 16,
                        depth: 1,
                        ..SemanticConfig::default()
                    },
                    d_f: 32,
                    groups: 4,
                    side_info: SideInfoConfig::default(),
                    ..ModelConfig::default()
                },
                train: TrainConfig {
                    p: 4,
                    k: 4,
                    epochs: 2,
                    ..desk_train()
                },
                ..Self::default()
            },
        }
    }

    pub fn validate(&self) -> csen_core::Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.eval.validate()
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form (object keys sorted).
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_value()).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Builds the resolved config: `profile` defaults, then the file at
/// `config`, then each `key=value` override in order.
pub fn resolve(profile: Profile, config: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let base = RunConfig::profile(profile).to_value();
    let mut doc = base.clone();
    if let Some(path) = config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        if !file.is_object() {
            return Err(CliError::Usage(format!("config {} must be a JSON object", path.display())));
        }
        merge(&mut doc, file);
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    unknown_field(&base, &doc, "")?;
    let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
    cfg.validate().map_err(CliError::from)?;
    Ok(cfg)
}

/// Names the first key of `doc` absent from the fully populated `base`.
/// Subtrees under a `null` default (unset optional blocks) are left to
/// deserialization.
fn unknown_field(base: &Value, doc: &Value, prefix: &str) -> Result<(), CliError> {
    let (Value::Object(b), Value::Object(d)) = (base, doc) else {
        return Ok(());
    };
    for (k, v) in d {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match b.get(k) {
            None => return Err(CliError::Usage(format!("unknown config field `{path}`"))),
            Some(bv) => unknown_field(bv, v, &path)?,
        }
    }
    Ok(())
}

/// Recursive object merge; non-object values in `over` replace `base`.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// `a.b.c=value`; the value is parsed as JSON and kept as a string if
/// that fails, so `--set data=/tmp/m.jsonl` needs no quoting.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{spec}` must look like key.path=value")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("override `{spec}` has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = doc;
    for seg in path.split('.') {
        let obj = match slot {
            Value::Object(m) => m,
            // A null section (an unset optional block) becomes an object.
            v @ Value::Null => {
                *v = Value::Object(Default::default());
                v.as_object_mut().expect("just set")
            }
            _ => return Err(CliError::Usage(format!("override `{path}`: `{seg}` is not inside an object"))),
        };
        slot = obj.entry(seg.to_string()).or_insert(Value::Null);
    }
    *slot = value;
    Ok(())
}
