//! Planted-signal multimodal volumes and matching concept banks.

use std::fs;
use std::path::{Path, PathBuf};

use mmgpl_diffcore::SeedFan;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::{Category, ConceptBank};
use crate::error::{io_at, Error, Result};
use crate::voltok::{Manifest, ManifestEntry, Subject, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub n_classes: usize,
    /// Spatial dims `(H, W, D)`; every volume has one channel.
    pub dims: [usize; 3],
    pub n_modalities: usize,
    /// Per class, the voxel centers of its spherical blobs.
    pub lesion_centers: Vec<Vec<[usize; 3]>>,
    pub lesion_radius: f64,
    pub signal_amplitude: f32,
    pub noise_std: f32,
    /// Patch size the dims must be divisible by.
    pub patch_size: usize,
    pub concepts_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_subjects: 200,
            n_classes: 3,
            dims: [32, 32, 32],
            n_modalities: 2,
            // each blob sits at a different offset inside its patch, so classes differ
            // in patch content and not only in patch position
            lesion_centers: vec![vec![[6, 6, 6]], vec![[26, 26, 10]], vec![[6, 26, 26]]],
            lesion_radius: 5.0,
            signal_amplitude: 1.0,
            noise_std: 0.25,
            patch_size: 16,
            concepts_per_class: 4,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synthetic spec: {msg}")));
        if self.n_classes < 2 || self.n_subjects < self.n_classes || self.n_modalities == 0 {
            return bad("need ≥ 2 classes, ≥ 1 subject per class and ≥ 1 modality".into());
        }
        if self.lesion_centers.len() != self.n_classes {
            return bad(format!(
                "{} lesion center lists for {} classes",
                self.lesion_centers.len(),
                self.n_classes
            ));
        }
        if self.patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        for (axis, &d) in ["H", "W", "D"].iter().zip(&self.dims) {
            if d == 0 || d % self.patch_size != 0 {
                return bad(format!("axis {axis} of length {d} is not divisible by {}", self.patch_size));
            }
        }
        if !(self.lesion_radius >= 0.0) || !(self.noise_std >= 0.0) || !self.signal_amplitude.is_finite() {
            return bad("radius and noise must be non-negative, amplitude finite".into());
        }
        for (c, centers) in self.lesion_centers.iter().enumerate() {
            for center in centers {
                for (a, (&x, &d)) in center.iter().zip(&self.dims).enumerate() {
                    let x = x as f64;
                    if x - self.lesion_radius < 0.0 || x + self.lesion_radius > (d - 1) as f64 {
                        return bad(format!(
                            "lesion {center:?} of class {c} leaves the volume along axis {a}"
                        ));
                    }
                }
            }
        }
        if self.concepts_per_class == 0 || self.concepts_per_class > TEMPLATES.len() {
            return bad(format!("concepts_per_class must be in 1..={}", TEMPLATES.len()));
        }
        Ok(())
    }

    pub fn label_of(&self, subject: usize) -> usize {
        subject % self.n_classes
    }

    /// Sign of the planted signal in modality `m`; the second modality is the complement.
    pub fn modality_sign(m: usize) -> f32 {
        if m % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// 0/1 mask of the voxels inside class `c`'s blobs.
    pub fn lesion_mask(&self, c: usize) -> Vec<bool> {
        let [h, w, d] = self.dims;
        let r2 = self.lesion_radius * self.lesion_radius;
        let mut mask = vec![false; h * w * d];
        for center in &self.lesion_centers[c] {
            for i in 0..h {
                for j in 0..w {
                    for k in 0..d {
                        let dist2: f64 = [i, j, k]
                            .iter()
                            .zip(center)
                            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                            .sum();
                        if dist2 <= r2 {
                            mask[(i * w + j) * d + k] = true;
                        }
                    }
                }
            }
        }
        mask
    }
}

/// Volumes of one subject: background noise plus its class's blobs.
pub fn generate_subject(spec: &SynthSpec, index: usize, masks: &[Vec<bool>]) -> Result<Subject> {
    let label = spec.label_of(index);
    let [h, w, d] = spec.dims;
    let fan = SeedFan::new(spec.seed);
    let noise = Normal::new(0.0f32, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let volumes = (0..spec.n_modalities)
        .map(|m| {
            let mut rng = fan.rng_for(&format!("subject{index}.modality{m}"));
            let amp = spec.signal_amplitude * SynthSpec::modality_sign(m);
            let voxels = masks[label]
                .iter()
                .map(|&inside| {
                    let v = noise.sample(&mut rng);
                    if inside {
                        v + amp
                    } else {
                        v
                    }
                })
                .collect();
            Volume::new(m as u32, [h, w, d, 1], voxels)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Subject {
        id: format!("sub-{index:04}"),
        label,
        volumes,
    })
}

/// All subjects, labels balanced round-robin; a pure function of the spec.
pub fn generate(spec: &SynthSpec) -> Result<Vec<Subject>> {
    spec.validate()?;
    let masks: Vec<Vec<bool>> = (0..spec.n_classes).map(|c| spec.lesion_mask(c)).collect();
    (0..spec.n_subjects)
        .into_par_iter()
        .map(|i| generate_subject(spec, i, &masks))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionMap {
    pub class: usize,
    pub centers: Vec<[usize; 3]>,
    pub radius: f64,
    /// Mask volume file (1 inside a blob, 0 elsewhere).
    pub mask: PathBuf,
}

/// Writes volumes, `manifest.json`, `bank.json`, `lesions.json` and per-class masks.
pub fn write_dataset(spec: &SynthSpec, dir: &Path) -> Result<PathBuf> {
    let subjects = generate(spec)?;
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let entries = subjects
        .par_iter()
        .map(|s| {
            let mut paths = Vec::new();
            for v in &s.volumes {
                let name = PathBuf::from(format!("{}_m{}.mmgv", s.id, v.modality_id));
                v.write(&dir.join(&name))?;
                paths.push(name);
            }
            Ok(ManifestEntry {
                subject_id: s.id.clone(),
                label: s.label,
                modalities: paths,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest_path = dir.join("manifest.json");
    Manifest { subjects: entries }.write(&manifest_path)?;
    synth_concepts(spec)?.save(&dir.join("bank.json"))?;
    let [h, w, d] = spec.dims;
    let mut lesions = Vec::new();
    for c in 0..spec.n_classes {
        let mask = spec.lesion_mask(c);
        let name = PathBuf::from(format!("lesion_c{c}.mmgv"));
        let voxels = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Volume::new(0, [h, w, d, 1], voxels)?.write(&dir.join(&name))?;
        lesions.push(LesionMap {
            class: c,
            centers: spec.lesion_centers[c].clone(),
            radius: spec.lesion_radius,
            mask: name,
        });
    }
    let path = dir.join("lesions.json");
    fs::write(&path, serde_json::to_string_pretty(&lesions)? + "\n").map_err(io_at(&path))?;
    let path = dir.join("spec.json");
    fs::write(&path, serde_json::to_string_pretty(spec)? + "\n").map_err(io_at(&path))?;
    Ok(manifest_path)
}

const TEMPLATES: [&str; 8] = [
    "elevated intensity in {r} region",
    "focal {r} hyperintensity",
    "{r} lesion with increased signal",
    "localized {r} abnormality",
    "bright {r} focus",
    "{r} signal elevation",
    "abnormal {r} tissue intensity",
    "{r} blob of raised voxel values",
];

/// Anatomical-style words for a voxel position.
pub fn region_words(center: [usize; 3], dims: [usize; 3]) -> String {
    let pick = |x: usize, n: usize, lo: &'static str, hi: &'static str| if 2 * x < n { lo } else { hi };
    format!(
        "{} {} {}",
        pick(center[0], dims[0], "superior", "inferior"),
        pick(center[1], dims[1], "left", "right"),
        pick(center[2], dims[2], "anterior", "posterior"),
    )
}

/// `K` templated texts per class naming the class's planted regions.
pub fn synth_concepts(spec: &SynthSpec) -> Result<ConceptBank> {
    spec.validate()?;
    let k = spec.concepts_per_class;
    // rotate templates per seed so banks differ across seeds but stay deterministic
    let offset = (spec.seed % TEMPLATES.len() as u64) as usize;
    let classes = (0..spec.n_classes)
        .map(|c| {
            let region = spec.lesion_centers[c]
                .iter()
                .map(|&ctr| region_words(ctr, spec.dims))
                .collect::<Vec<_>>()
                .join(" and ");
            Category {
                name: format!("{}-pattern-{c}", region.replace(' ', "-")),
                concepts: (0..k)
                    .map(|j| TEMPLATES[(offset + j) % TEMPLATES.len()].replace("{r}", &region))
                    .collect(),
            }
        })
        .collect();
    ConceptBank::new(classes)
}
