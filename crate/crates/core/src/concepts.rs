//! Concept banks, the deterministic text embedder, and the remote concept client.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::Duration;

use mmgpl_diffcore::init::keyed_hash;
use mmgpl_diffcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{io_at, Error, Result};

/// Hash key of the default embedder.
pub const EMBED_SEED: u64 = 0x6d6d_6770_6c5f_7478;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub concepts: Vec<String>,
}

/// `C` categories with exactly `K` concept texts each, in file order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptBank {
    pub classes: Vec<Category>,
}

impl ConceptBank {
    pub fn new(classes: Vec<Category>) -> Result<Self> {
        let bank = ConceptBank { classes };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |location: String, msg: &str| Error::Bank {
            location,
            msg: msg.to_string(),
        };
        if self.classes.len() < 2 {
            return Err(bad("classes".into(), "need at least 2 categories"));
        }
        let k = self.classes[0].concepts.len();
        let mut seen = HashSet::new();
        for (c, cat) in self.classes.iter().enumerate() {
            if cat.name.trim().is_empty() {
                return Err(bad(format!("classes[{c}].name"), "empty class name"));
            }
            if !seen.insert(cat.name.as_str()) {
                return Err(bad(format!("classes[{c}].name"), "duplicate class name"));
            }
            if cat.concepts.is_empty() {
                return Err(bad(format!("classes[{c}].concepts"), "no concepts"));
            }
            if cat.concepts.len() != k {
                return Err(Error::Bank {
                    location: format!("classes[{c}].concepts"),
                    msg: format!("has {} concepts, expected {k}", cat.concepts.len()),
                });
            }
            if let Some(j) = cat.concepts.iter().position(|t| t.trim().is_empty()) {
                return Err(bad(format!("classes[{c}].concepts[{j}]"), "empty concept text"));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn per_class(&self) -> usize {
        self.classes[0].concepts.len()
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bank: ConceptBank = serde_json::from_str(text).map_err(|e| Error::Bank {
            location: format!("line {} column {}", e.line(), e.column()),
            msg: e.to_string(),
        })?;
        bank.validate()?;
        Ok(bank)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bank serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        ConceptBank::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(io_at(path))
    }
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|ch: char| !ch.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Signed feature hashing of words and word bigrams into `dim` buckets, L2-normalized.
pub fn embed_text(text: &str, dim: usize, seed: u64) -> Result<Vec<f32>> {
    if dim == 0 {
        return Err(Error::Config("text embedding dimension must be positive".into()));
    }
    let ws = words(text);
    if ws.is_empty() {
        return Err(Error::Numeric(format!("cannot embed empty text {text:?}")));
    }
    let mut v = vec![0.0f64; dim];
    let mut add = |feature: &str| {
        let h = keyed_hash(seed, feature);
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % dim as u64) as usize] += sign;
    };
    for w in &ws {
        add(w);
    }
    for pair in ws.windows(2) {
        add(&format!("{}\u{1f}{}", pair[0], pair[1]));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Numeric(format!("hashed features of {text:?} cancel to zero")));
    }
    Ok(v.iter().map(|x| (x / norm) as f32).collect())
}

/// Unit-norm concept embeddings; row `c·K + k` is concept `k` of category `c`.
#[derive(Clone, Debug)]
pub struct ConceptEmbeddings {
    pub z: Tensor,
    pub classes: usize,
    pub per_class: usize,
}

impl ConceptEmbeddings {
    pub fn index(&self, c: usize, k: usize) -> usize {
        c * self.per_class + k
    }

    pub fn dim(&self) -> usize {
        self.z.matrix_dims().1
    }

    pub fn len(&self) -> usize {
        self.classes * self.per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Embeds `concept + " " + class_name` for every concept of the bank.
pub fn embed_bank(bank: &ConceptBank, dim: usize, seed: u64) -> Result<ConceptEmbeddings> {
    bank.validate()?;
    let mut data = Vec::with_capacity(bank.num_classes() * bank.per_class() * dim);
    for cat in &bank.classes {
        for concept in &cat.concepts {
            data.extend(embed_text(&format!("{concept} {}", cat.name), dim, seed)?);
        }
    }
    let rows = bank.num_classes() * bank.per_class();
    Ok(ConceptEmbeddings {
        z: Tensor::new(vec![rows, dim], data)?,
        classes: bank.num_classes(),
        per_class: bank.per_class(),
    })
}

/// Remote text-generation endpoint used by `fetch_concepts`.
#[derive(Clone, Debug, Default)]
pub struct FetchConfig {
    pub endpoint: Option<String>,
    pub token: Option<String>,
    pub timeout: Option<Duration>,
}

pub const FETCH_TIMEOUT: Duration = Duration::from_secs(30);

/// Placeholder instruction; not a reproduction of any published prompt.
pub fn concept_prompt(class_name: &str, k: usize) -> String {
    format!(
        "List {k} radiological/biomarker concepts characteristic of {class_name}. \
         Answer with a numbered list, one short concept per line."
    )
}

/// Strips list numbering such as `1.`, `2)`, `-` or `*` from one completion line.
fn strip_numbering(line: &str) -> &str {
    let t = line.trim();
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    let rest = if digits > 0 {
        t[digits..].trim_start_matches(['.', ')', ':'])
    } else {
        t.trim_start_matches(['-', '*', '•'])
    };
    rest.trim()
}

/// Parses completion items into concept texts; items may hold several numbered lines.
pub fn parse_items(items: &[String]) -> Vec<String> {
    items
        .iter()
        .flat_map(|item| item.lines())
        .map(strip_numbering)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Asks the endpoint for `k` concepts per class. Any failure aborts the whole fetch.
pub fn fetch_concepts(cfg: &FetchConfig, class_names: &[String], k: usize) -> Result<ConceptBank> {
    let endpoint = cfg
        .endpoint
        .as_deref()
        .filter(|e| !e.trim().is_empty())
        .ok_or_else(|| Error::Config("concept_endpoint is not configured".into()))?;
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let agent = ureq::AgentBuilder::new()
        .timeout(cfg.timeout.unwrap_or(FETCH_TIMEOUT))
        .build();
    let mut classes = Vec::with_capacity(class_names.len());
    for name in class_names {
        let mut req = agent.post(endpoint);
        if let Some(token) = cfg.token.as_deref().filter(|t| !t.is_empty()) {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        let body = serde_json::json!({ "prompt": concept_prompt(name, k), "max_items": k });
        let resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::Status(code, _) => Error::Network(format!("class {name}: HTTP status {code}")),
            ureq::Error::Transport(t) => Error::Network(format!("class {name}: {t}")),
        })?;
        let reply: serde_json::Value = resp
            .into_json()
            .map_err(|e| Error::Fetch(format!("class {name}: malformed completion: {e}")))?;
        let items: Vec<String> = reply
            .get("items")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| Error::Fetch(format!("class {name}: completion lacks an \"items\" string list")))?;
        let mut concepts = parse_items(&items);
        if concepts.len() < k {
            return Err(Error::Fetch(format!(
                "class {name}: parsed {} concepts, need {k}",
                concepts.len()
            )));
        }
        concepts.truncate(k);
        classes.push(Category {
            name: name.clone(),
            concepts,
        });
    }
    ConceptBank::new(classes)
}
