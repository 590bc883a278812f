//! The full pipeline: tokenizer → concept weighting → graph prompt → encoder → head.

use mmgpl_diffcore::{Bound, ParamId, ParamStore, SeedFan, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::concepts::ConceptEmbeddings;
use crate::encoder::{self, EncoderConfig, HeadVars, LayerVars};
use crate::error::{Error, Result};
use crate::graphprompt::{self, Activation};
use crate::relevance::{self, CategorySource, Mode, ProjectionVars};
use crate::voltok::{self, PatchStrategy, Patches, Subject, TokenizerVars};

/// Ablation arm: which of token weighting (W) and the graph prompt (G) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    B,
    BW,
    BG,
    BWG,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::B, Arm::BW, Arm::BG, Arm::BWG];

    pub fn weights(self) -> bool {
        matches!(self, Arm::BW | Arm::BWG)
    }

    pub fn graph(self) -> bool {
        matches!(self, Arm::BG | Arm::BWG)
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::B => "B",
            Arm::BW => "BW",
            Arm::BG => "BG",
            Arm::BWG => "BWG",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Arm::ALL.into_iter().find(|a| a.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub strategy: PatchStrategy,
    /// Token dimension `D_tok`.
    pub dim: usize,
    /// Text embedding dimension `D_txt`.
    pub text_dim: usize,
    pub tau_s: f32,
    pub tau_g: f32,
    pub tau_h: f32,
    pub graph_layers: usize,
    pub graph_topk: Option<usize>,
    pub graph_activation: Activation,
    /// Adds the weighted tokens back onto the GCN output.
    pub graph_residual: bool,
    pub encoder: EncoderConfig,
    pub arm: Arm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            strategy: PatchStrategy::cube(16),
            dim: 64,
            text_dim: 64,
            tau_s: 0.1,
            tau_g: 0.1,
            tau_h: 0.1,
            graph_layers: 1,
            graph_topk: None,
            graph_activation: Activation::Relu,
            graph_residual: false,
            encoder: EncoderConfig::default(),
            arm: Arm::BWG,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, tau) in [("relevance.tau", self.tau_s), ("graph.tau", self.tau_g), ("head.tau", self.tau_h)] {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::Config(format!("{name} must be a positive number, got {tau}")));
            }
        }
        if self.dim == 0 || self.text_dim == 0 {
            return Err(Error::Config("model.dim and concepts.dim must be positive".into()));
        }
        if self.graph_topk == Some(0) {
            return Err(Error::Config("graph.topk must be at least 1".into()));
        }
        if self.encoder.dim != self.dim {
            return Err(Error::Config(format!(
                "encoder dim {} differs from token dim {}",
                self.encoder.dim, self.dim
            )));
        }
        self.encoder.validate()
    }
}

/// Shape of one modality as the model expects it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityShape {
    pub modality_id: u32,
    pub dims: [usize; 4],
}

/// A subject partitioned once, ready for repeated forward passes.
#[derive(Clone, Debug)]
pub struct SubjectInput {
    pub id: String,
    pub label: usize,
    pub patches: Vec<Patches>,
}

impl SubjectInput {
    pub fn prepare(subject: &Subject, strategy: &PatchStrategy) -> Result<Self> {
        let patches = subject
            .volumes
            .iter()
            .map(|v| voltok::partition(v, strategy))
            .collect::<Result<Vec<_>>>()?;
        Ok(SubjectInput {
            id: subject.id.clone(),
            label: subject.label,
            patches,
        })
    }

    pub fn token_count(&self) -> usize {
        self.patches.iter().map(Patches::len).sum()
    }

    /// `(modality, h, w, d)` origin of every token, in sequence order.
    pub fn origins(&self) -> Vec<(u32, [usize; 3])> {
        self.patches
            .iter()
            .flat_map(|p| p.origins.iter().map(move |&o| (p.modality_id, o)))
            .collect()
    }
}

pub fn shapes_of(subject: &Subject) -> Vec<ModalityShape> {
    subject
        .volumes
        .iter()
        .map(|v| ModalityShape {
            modality_id: v.modality_id,
            dims: v.dims,
        })
        .collect()
}

#[derive(Clone, Debug)]
struct Ids {
    tokenizer: Vec<[ParamId; 3]>,
    align: [ParamId; 2],
    modality: ParamId,
    projection: [ParamId; 2],
    graph: Vec<ParamId>,
    layers: Vec<Vec<ParamId>>,
    head: [ParamId; 2],
}

/// Values recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `1×C` class logits.
    pub logits: Var,
    /// `1×(C·K)` concept scores.
    pub concept_scores: Var,
    pub tokens: Var,
    pub similarity: Option<Var>,
    pub weights: Option<Var>,
    pub adjacency: Option<Var>,
    pub category: Option<CategorySource>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub shapes: Vec<ModalityShape>,
    pub concepts: ConceptEmbeddings,
    pub params: ParamStore,
    ids: Ids,
}

impl Model {
    /// Glorot-initialized model; every parameter seed derives from `seed` and its name.
    pub fn new(config: ModelConfig, shapes: Vec<ModalityShape>, concepts: ConceptEmbeddings, seed: u64) -> Result<Self> {
        config.validate()?;
        if shapes.is_empty() {
            return Err(Error::Data("model needs at least one modality".into()));
        }
        if concepts.dim() != config.text_dim {
            return Err(Error::Config(format!(
                "concept embeddings have dim {}, config says {}",
                concepts.dim(),
                config.text_dim
            )));
        }
        let fan = SeedFan::new(seed);
        let mut params = ParamStore::new();
        let d = config.dim;
        let glorot = |params: &mut ParamStore, name: String, r: usize, c: usize| params.insert(name.clone(), fan.glorot(&name, r, c));
        let zeros = |params: &mut ParamStore, name: String, c: usize| params.insert(name, Tensor::zeros(&[1, c]));
        let ones = |params: &mut ParamStore, name: String, c: usize| params.insert(name, Tensor::filled(&[1, c], 1.0));

        let mut tokenizer = Vec::new();
        for s in &shapes {
            let len = config.strategy.patch_len(s.dims[3]);
            let n = config.strategy.patch_count(s.dims)?;
            let m = s.modality_id;
            tokenizer.push([
                glorot(&mut params, format!("tokenizer.m{m}.proj"), len, d)?,
                zeros(&mut params, format!("tokenizer.m{m}.bias"), d)?,
                glorot(&mut params, format!("tokenizer.m{m}.pos"), n, d)?,
            ]);
        }
        let align = [
            glorot(&mut params, "tokenizer.align.weight".into(), d, d)?,
            zeros(&mut params, "tokenizer.align.bias".into(), d)?,
        ];
        let modalities = shapes.iter().map(|s| s.modality_id as usize).max().unwrap() + 1;
        let modality = glorot(&mut params, "tokenizer.modality".into(), modalities, d)?;
        let projection = [
            glorot(&mut params, "relevance.proj.weight".into(), d, config.text_dim)?,
            zeros(&mut params, "relevance.proj.bias".into(), config.text_dim)?,
        ];
        let graph = (0..config.graph_layers)
            .map(|l| glorot(&mut params, format!("graph.l{l}.theta"), d, d))
            .collect::<Result<Vec<_>, _>>()?;
        let mut layers = Vec::new();
        for l in 0..config.encoder.layers {
            let mut ids = Vec::new();
            for (name, [r, c]) in encoder::layer_shapes(d, config.encoder.mlp_hidden) {
                let full = format!("encoder.l{l}.{name}");
                let id = if name.ends_with("gain") {
                    ones(&mut params, full, c)?
                } else if r == 1 {
                    zeros(&mut params, full, c)?
                } else {
                    glorot(&mut params, full, r, c)?
                };
                ids.push(id);
            }
            layers.push(ids);
        }
        let head = [
            glorot(&mut params, "head.proj.weight".into(), d, config.text_dim)?,
            zeros(&mut params, "head.proj.bias".into(), config.text_dim)?,
        ];
        if config.encoder.frozen {
            for id in layers.iter().flatten() {
                params.set_trainable(*id, false);
            }
        }
        Ok(Model {
            config,
            shapes,
            concepts,
            params,
            ids: Ids {
                tokenizer,
                align,
                modality,
                projection,
                graph,
                layers,
                head,
            },
        })
    }

    pub fn classes(&self) -> usize {
        self.concepts.classes
    }

    pub fn per_class(&self) -> usize {
        self.concepts.per_class
    }

    /// Ids of the encoder-stack parameters.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.ids.layers.iter().flatten().copied().collect()
    }

    pub fn check_input(&self, input: &SubjectInput) -> Result<()> {
        if input.patches.len() != self.shapes.len() {
            return Err(Error::Data(format!(
                "subject {} has {} modalities, model expects {}",
                input.id,
                input.patches.len(),
                self.shapes.len()
            )));
        }
        for (p, s) in input.patches.iter().zip(&self.shapes) {
            let want = (
                self.config.strategy.patch_count(s.dims)?,
                self.config.strategy.patch_len(s.dims[3]),
            );
            if p.modality_id != s.modality_id || p.data.matrix_dims() != want {
                return Err(Error::Data(format!(
                    "subject {} modality {} does not match the model's {:?}",
                    input.id, p.modality_id, s
                )));
            }
        }
        Ok(())
    }

    /// Records one subject's forward pass on `tape`.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        bound: &Bound,
        input: &'p SubjectInput,
        mode: Mode,
    ) -> Result<Forward> {
        self.check_input(input)?;
        let cfg = &self.config;
        let (classes, per_class) = (self.classes(), self.per_class());
        let mut per_modality = Vec::with_capacity(input.patches.len());
        for (p, ids) in input.patches.iter().zip(&self.ids.tokenizer) {
            let patches = tape.borrowed_constant(&p.data);
            let vars = TokenizerVars {
                proj: bound.var(ids[0]),
                bias: bound.var(ids[1]),
                pos: bound.var(ids[2]),
            };
            per_modality.push((p.modality_id, voltok::tokenize(tape, patches, &vars)?));
        }
        let (mut tokens, _) = voltok::align(
            tape,
            &per_modality,
            bound.var(self.ids.align[0]),
            bound.var(self.ids.align[1]),
            bound.var(self.ids.modality),
        )?;
        let z = tape.borrowed_constant(&self.concepts.z);

        let arm = cfg.arm;
        let mut similarity = None;
        let mut weights = None;
        let mut adjacency = None;
        let mut category = None;
        if arm.weights() || arm.graph() {
            let proj = ProjectionVars {
                w: bound.var(self.ids.projection[0]),
                b: bound.var(self.ids.projection[1]),
            };
            let s = relevance::similarity(tape, tokens, z, &proj, cfg.tau_s)?;
            similarity = Some(s);
            if arm.weights() {
                let source = relevance::weighting_category(mode, tape.data(s), classes, per_class);
                let w = relevance::token_weights_for(tape, s, source, mode, classes, per_class)?;
                tokens = relevance::apply_weights(tape, tokens, w)?;
                weights = Some(w);
                category = Some(source);
            }
            if arm.graph() {
                let mut a = graphprompt::build_graph(tape, s, cfg.tau_g)?;
                if let Some(k) = cfg.graph_topk {
                    a = graphprompt::sparsify_topk(tape, a, k.min(tape.dims(a).0))?;
                }
                let thetas: Vec<Var> = self.ids.graph.iter().map(|&id| bound.var(id)).collect();
                tokens = graphprompt::prompt_tokens(tape, a, tokens, &thetas, cfg.graph_activation, cfg.graph_residual)?;
                adjacency = Some(a);
            }
        }

        let layers: Vec<LayerVars> = self
            .ids
            .layers
            .iter()
            .map(|ids| LayerVars::from_slice(&ids.iter().map(|&id| bound.var(id)).collect::<Vec<_>>()))
            .collect();
        let pooled = encoder::encode(tape, tokens, &layers, cfg.encoder.heads)?;
        let head = HeadVars {
            w: bound.var(self.ids.head[0]),
            b: bound.var(self.ids.head[1]),
        };
        let concept_scores = encoder::concept_logits(tape, pooled, z, &head, cfg.tau_h)?;
        let logits = encoder::class_logits(tape, concept_scores, classes, per_class)?;
        Ok(Forward {
            logits,
            concept_scores,
            tokens,
            similarity,
            weights,
            adjacency,
            category,
        })
    }

    /// Class probabilities, predicted class and the inferred weighting category (if any).
    pub fn predict(&self, input: &SubjectInput) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let f = self.forward(&mut tape, &bound, input, Mode::Eval)?;
        let logits = tape.data(f.logits).to_vec();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logits for subject {}", input.id)));
        }
        Ok(Prediction {
            class: argmax(&logits),
            probs: softmax(&logits),
            category: f.category.map(CategorySource::index),
            weights: f.weights.map(|w| tape.data(w).to_vec()),
            similarity: f.similarity.map(|s| tape.data(s).to_vec()),
            adjacency: f.adjacency.map(|a| tape.data(a).to_vec()),
            concept_scores: tape.data(f.concept_scores).to_vec(),
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(crate::error::io_at(path))?;
        let mut w = std::io::BufWriter::new(f);
        mmgpl_diffcore::write_checkpoint(&mut w, self.params.iter().map(|(_, p)| (p.name.as_str(), &p.tensor)))?;
        Ok(())
    }

    pub fn load_params(&mut self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::open(path).map_err(crate::error::io_at(path))?;
        let records = mmgpl_diffcore::read_checkpoint(std::io::BufReader::new(f))?;
        self.params.load_values(records)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probs: Vec<f32>,
    pub category: Option<usize>,
    pub weights: Option<Vec<f32>>,
    pub similarity: Option<Vec<f32>>,
    pub adjacency: Option<Vec<f32>>,
    pub concept_scores: Vec<f32>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn softmax(v: &[f32]) -> Vec<f32> {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f32 = e.iter().sum();
    e.iter().map(|x| x / total).collect()
}
