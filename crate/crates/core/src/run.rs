//! Glue shared by the command line and experiments: loading data, banks and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::concepts::{embed_bank, ConceptBank, ConceptEmbeddings};
use crate::config::RunConfig;
use crate::error::{io_at, Error, Result};
use crate::model::{shapes_of, ModalityShape, Model, SubjectInput};
use crate::voltok::{load_dataset, Subject};

/// A dataset partitioned under one strategy plus the embedded concept bank.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub inputs: Vec<SubjectInput>,
    pub shapes: Vec<ModalityShape>,
    pub bank: ConceptBank,
    pub concepts: ConceptEmbeddings,
}

impl Prepared {
    pub fn from_subjects(subjects: &[Subject], bank: ConceptBank, cfg: &RunConfig) -> Result<Self> {
        let first = subjects.first().ok_or_else(|| Error::Data("dataset has no subjects".into()))?;
        let shapes = shapes_of(first);
        let strategy = cfg.strategy();
        let inputs = subjects
            .iter()
            .map(|s| {
                if shapes_of(s) != shapes {
                    return Err(Error::Data(format!("subject {} differs in modality shapes", s.id)));
                }
                if s.label >= bank.num_classes() {
                    return Err(Error::Data(format!(
                        "subject {} has label {} but the bank has {} classes",
                        s.id,
                        s.label,
                        bank.num_classes()
                    )));
                }
                SubjectInput::prepare(s, &strategy)
            })
            .collect::<Result<Vec<_>>>()?;
        let concepts = embed_bank(&bank, cfg.model.text_dim, cfg.embed_seed)?;
        Ok(Prepared {
            inputs,
            shapes,
            bank,
            concepts,
        })
    }

    pub fn load(manifest: &Path, bank: &Path, cfg: &RunConfig) -> Result<Self> {
        let subjects = load_dataset(manifest)?;
        let bank = ConceptBank::load(bank)?;
        Prepared::from_subjects(&subjects, bank, cfg)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.inputs.iter().map(|s| s.label).collect()
    }

    pub fn find(&self, subject_id: &str) -> Option<usize> {
        self.inputs.iter().position(|s| s.id == subject_id)
    }

    pub fn model(&self, cfg: &RunConfig, seed: u64) -> Result<Model> {
        Model::new(cfg.model.clone(), self.shapes.clone(), self.concepts.clone(), seed)
    }
}

/// Sidecar written next to a checkpoint so it can be reloaded without flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: serde_json::Value,
    pub data: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub shapes: Vec<ModalityShape>,
}

pub fn meta_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Writes the checkpoint and its sidecar.
pub fn save_checkpoint(model: &Model, cfg: &RunConfig, data: Option<&Path>, bank: Option<&Path>, ckpt: &Path) -> Result<()> {
    model.save(ckpt)?;
    // credentials stay out of artifacts
    let cfg = RunConfig {
        concept_token: None,
        ..cfg.clone()
    };
    let meta = CheckpointMeta {
        config: serde_json::from_str(&cfg.to_json())?,
        data: data.map(absolute),
        bank: bank.map(absolute),
        shapes: model.shapes.clone(),
    };
    let path = meta_path(ckpt);
    fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(io_at(&path))
}

pub fn read_meta(ckpt: &Path) -> Result<(CheckpointMeta, RunConfig)> {
    let path = meta_path(ckpt);
    let text = fs::read_to_string(&path).map_err(io_at(&path))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let cfg = RunConfig::from_json(&meta.config.to_string())?;
    Ok((meta, cfg))
}

/// Rebuilds a trained model from its checkpoint against an embedded bank.
pub fn load_model(ckpt: &Path, cfg: &RunConfig, shapes: Vec<ModalityShape>, concepts: ConceptEmbeddings) -> Result<Model> {
    let mut model = Model::new(cfg.model.clone(), shapes, concepts, cfg.seed)?;
    model.load_params(ckpt)?;
    Ok(model)
}
