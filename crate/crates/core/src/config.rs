//! Flat dotted-key run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::concepts::EMBED_SEED;
use crate::error::{io_at, Error, Result};
use crate::graphprompt::Activation;
use crate::model::{Arm, ModelConfig};
use crate::trainer::TrainConfig;
use crate::voltok::{PatchStrategy, PatchVariant};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub embed_seed: u64,
    pub concept_endpoint: Option<String>,
    pub concept_token: Option<String>,
    pub data: Option<PathBuf>,
    pub bank: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            embed_seed: EMBED_SEED,
            concept_endpoint: None,
            concept_token: None,
            data: None,
            bank: None,
        }
    }
}

fn variant_name(v: PatchVariant) -> &'static str {
    match v {
        PatchVariant::Cube3D => "cube3d",
        PatchVariant::AxialSlice2D => "axial2d",
        PatchVariant::Slice2D => "slice2d",
    }
}

fn bad(key: &str, v: &Value, want: &str) -> Error {
    Error::Config(format!("{key}: expected {want}, got {v}"))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64().map(|x| x as usize).ok_or_else(|| bad(key, v, "a non-negative integer"))
}

fn as_f32(key: &str, v: &Value) -> Result<f32> {
    v.as_f64().map(|x| x as f32).ok_or_else(|| bad(key, v, "a number"))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64().ok_or_else(|| bad(key, v, "a number"))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| bad(key, v, "true or false"))
}

fn as_opt_string(key: &str, v: &Value) -> Result<Option<String>> {
    match v {
        Value::Null => Ok(None),
        Value::String(s) => Ok(Some(s.clone())),
        _ => Err(bad(key, v, "a string or null")),
    }
}

fn opt(v: &Option<impl serde::Serialize>) -> Value {
    serde_json::to_value(v).expect("serializable")
}

impl RunConfig {
    /// Every key with its current value.
    pub fn entries(&self) -> Vec<(&'static str, Value)> {
        let m = &self.model;
        let t = &self.train;
        vec![
            ("seed", json!(self.seed)),
            ("patch.strategy", json!(variant_name(m.strategy.variant))),
            ("patch.size", json!(m.strategy.patch_size)),
            ("patch.slice_axis", json!(m.strategy.slice_axis)),
            ("model.dim", json!(m.dim)),
            ("concepts.dim", json!(m.text_dim)),
            ("concepts.seed", json!(self.embed_seed)),
            ("concept_endpoint", opt(&self.concept_endpoint)),
            ("concept_token", opt(&self.concept_token)),
            ("relevance.tau", json!(m.tau_s)),
            ("graph.tau", json!(m.tau_g)),
            ("graph.layers", json!(m.graph_layers)),
            ("graph.topk", opt(&m.graph_topk)),
            ("graph.activation", json!(m.graph_activation.name())),
            ("graph.residual", json!(m.graph_residual)),
            ("encoder.layers", json!(m.encoder.layers)),
            ("encoder.heads", json!(m.encoder.heads)),
            ("encoder.mlp_hidden", json!(m.encoder.mlp_hidden)),
            ("encoder.frozen", json!(m.encoder.frozen)),
            ("head.tau", json!(m.tau_h)),
            ("train.arm", json!(m.arm.name())),
            ("train.epochs", json!(t.epochs)),
            ("train.lr", json!(t.base_lr)),
            ("train.lr_decay", json!(t.lr_decay)),
            ("train.decay_epochs", json!(t.decay_epochs)),
            ("train.batch_size", json!(t.batch_size)),
            ("train.weight_decay", json!(t.weight_decay)),
            ("train.folds", json!(t.folds)),
            ("train.repeats", json!(t.repeats)),
            ("paths.data", opt(&self.data)),
            ("paths.bank", opt(&self.bank)),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key; unknown keys and ill-typed values are config errors.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = v.as_u64().ok_or_else(|| bad(key, v, "a non-negative integer"))?,
            "patch.strategy" => {
                m.strategy.variant = match v.as_str() {
                    Some("cube3d") => PatchVariant::Cube3D,
                    Some("axial2d") => PatchVariant::AxialSlice2D,
                    Some("slice2d") => PatchVariant::Slice2D,
                    _ => return Err(bad(key, v, "one of cube3d, axial2d, slice2d")),
                }
            }
            "patch.size" => m.strategy.patch_size = as_usize(key, v)?,
            "patch.slice_axis" => m.strategy.slice_axis = as_usize(key, v)?,
            "model.dim" => {
                m.dim = as_usize(key, v)?;
                m.encoder.dim = m.dim;
            }
            "concepts.dim" => m.text_dim = as_usize(key, v)?,
            "concepts.seed" => self.embed_seed = v.as_u64().ok_or_else(|| bad(key, v, "a non-negative integer"))?,
            "concept_endpoint" => self.concept_endpoint = as_opt_string(key, v)?,
            "concept_token" => self.concept_token = as_opt_string(key, v)?,
            "relevance.tau" => m.tau_s = as_f32(key, v)?,
            "graph.tau" => m.tau_g = as_f32(key, v)?,
            "graph.layers" => m.graph_layers = as_usize(key, v)?,
            "graph.topk" => {
                m.graph_topk = match v {
                    Value::Null => None,
                    _ => Some(as_usize(key, v)?),
                }
            }
            "graph.activation" => {
                m.graph_activation = v
                    .as_str()
                    .and_then(Activation::parse)
                    .ok_or_else(|| bad(key, v, "relu or identity"))?
            }
            "graph.residual" => m.graph_residual = as_bool(key, v)?,
            "encoder.layers" => m.encoder.layers = as_usize(key, v)?,
            "encoder.heads" => m.encoder.heads = as_usize(key, v)?,
            "encoder.mlp_hidden" => m.encoder.mlp_hidden = as_usize(key, v)?,
            "encoder.frozen" => m.encoder.frozen = as_bool(key, v)?,
            "head.tau" => m.tau_h = as_f32(key, v)?,
            "train.arm" => m.arm = v.as_str().and_then(Arm::parse).ok_or_else(|| bad(key, v, "B, BW, BG or BWG"))?,
            "train.epochs" => t.epochs = as_usize(key, v)?,
            "train.lr" => t.base_lr = as_f64(key, v)?,
            "train.lr_decay" => t.lr_decay = as_f64(key, v)?,
            "train.decay_epochs" => {
                t.decay_epochs = v
                    .as_array()
                    .ok_or_else(|| bad(key, v, "a list of integers"))?
                    .iter()
                    .map(|e| as_usize(key, e))
                    .collect::<Result<_>>()?
            }
            "train.batch_size" => t.batch_size = as_usize(key, v)?,
            "train.weight_decay" => t.weight_decay = as_f64(key, v)?,
            "train.folds" => t.folds = as_usize(key, v)?,
            "train.repeats" => t.repeats = as_usize(key, v)?,
            "paths.data" => self.data = as_opt_string(key, v)?.map(PathBuf::from),
            "paths.bank" => self.bank = as_opt_string(key, v)?.map(PathBuf::from),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Sets a key from command-line text: JSON if it parses, a bare string otherwise.
    pub fn set_text(&mut self, key: &str, raw: &str) -> Result<()> {
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.set(key, &v)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Applies every key of a JSON object on top of `self`.
    pub fn merge_json(&mut self, text: &str) -> Result<()> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not JSON: {e}")))?;
        let Value::Object(map) = v else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        for (k, v) in &map {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.merge_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let map: Map<String, Value> = self.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        serde_json::to_string_pretty(&Value::Object(map)).expect("config serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        RunConfig::from_json(&text)
    }

    pub fn strategy(&self) -> PatchStrategy {
        self.model.strategy
    }
}
