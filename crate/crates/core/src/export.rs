//! Plot-ready exports: relevance heat maps, token graphs and concept flows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::concepts::ConceptBank;
use crate::error::{io_at, Result};
use crate::model::{ModalityShape, Prediction, SubjectInput};
use crate::voltok::PatchStrategy;

/// Per-voxel weight volume of one modality: every voxel carries its patch's weight.
pub fn weight_volume(
    weights: &[f32],
    input: &SubjectInput,
    shape: &ModalityShape,
    strategy: &PatchStrategy,
) -> Vec<f32> {
    let [h, w, d, _] = shape.dims;
    let [eh, ew, ed] = strategy.extent();
    let mut grid = vec![0.0; h * w * d];
    let mut offset = 0;
    for p in &input.patches {
        if p.modality_id == shape.modality_id {
            for (row, &[h0, w0, d0]) in p.origins.iter().enumerate() {
                let value = weights[offset + row];
                for i in h0..h0 + eh {
                    for j in w0..w0 + ew {
                        for k in d0..d0 + ed {
                            grid[(i * w + j) * d + k] = value;
                        }
                    }
                }
            }
        }
        offset += p.len();
    }
    grid
}

/// Binary 8-bit greyscale image, `rows × cols`, values already in 0..=255.
pub fn pgm(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes `heatmap_m{m}.csv` (h,w,d,weight) and one PGM per axial slice and modality.
///
/// Weights are min-max scaled over the whole subject; a constant map renders black.
pub fn export_heatmap(
    weights: &[f32],
    input: &SubjectInput,
    shapes: &[ModalityShape],
    strategy: &PatchStrategy,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let lo = weights.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = weights.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let mut written = Vec::new();
    for shape in shapes {
        let m = shape.modality_id;
        let [h, w, d, _] = shape.dims;
        let grid = weight_volume(weights, input, shape, strategy);
        let mut csv = String::from("h,w,d,weight\n");
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    let _ = writeln!(csv, "{i},{j},{k},{}", grid[(i * w + j) * d + k]);
                }
            }
        }
        let path = dir.join(format!("heatmap_m{m}.csv"));
        fs::write(&path, csv).map_err(io_at(&path))?;
        written.push(path);
        for k in 0..d {
            let pixels: Vec<u8> = (0..h * w)
                .map(|idx| {
                    let v = grid[idx * d + k];
                    if span > 0.0 {
                        (((v - lo) / span) * 255.0).round() as u8
                    } else {
                        0
                    }
                })
                .collect();
            let path = dir.join(format!("heatmap_m{m}_d{k:03}.pgm"));
            fs::write(&path, pgm(h, w, &pixels)).map_err(io_at(&path))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Edge list `i,j,a_ij` of entries at or above `threshold`.
pub fn edges_csv(adjacency: &[f32], n: usize, threshold: f32) -> String {
    let mut out = String::from("i,j,a_ij\n");
    for i in 0..n {
        for j in 0..n {
            let a = adjacency[i * n + j];
            if a >= threshold {
                let _ = writeln!(out, "{i},{j},{a}");
            }
        }
    }
    out
}

/// Token × concept similarity matrix with `c{class}k{concept}` column names.
pub fn similarity_csv(s: &[f32], classes: usize, per_class: usize) -> String {
    let cols = classes * per_class;
    let mut out = String::from("token");
    for c in 0..classes {
        for k in 0..per_class {
            let _ = write!(out, ",c{c}k{k}");
        }
    }
    out.push('\n');
    for (i, row) in s.chunks_exact(cols).enumerate() {
        let _ = write!(out, "{i}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Sankey source rows: `flow` (true class → activated category) and `concept`
/// (activated category → its most activated concept) counts.
///
/// The activated category is the inferred weighting category; arms without
/// weighting infer it from the similarity matrix, and arm B falls back to the
/// predicted class.
pub fn concept_flows_csv(bank: &ConceptBank, records: &[(usize, Prediction)]) -> String {
    let k = bank.per_class();
    let mut flows: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut concepts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (label, p) in records {
        let activated = p
            .category
            .or_else(|| p.similarity.as_ref().map(|s| crate::relevance::infer_category(s, bank.num_classes(), k)))
            .unwrap_or(p.class);
        *flows.entry((*label, activated)).or_default() += 1;
        let scores = &p.concept_scores[activated * k..(activated + 1) * k];
        let top = crate::model::argmax(scores);
        *concepts.entry((activated, top)).or_default() += 1;
    }
    let quote = |s: &str| format!("\"{}\"", s.replace('"', "\"\""));
    let mut out = String::from("kind,source,target,count\n");
    for ((from, to), n) in flows {
        let _ = writeln!(
            out,
            "flow,{},{},{n}",
            quote(&bank.classes[from].name),
            quote(&bank.classes[to].name)
        );
    }
    for ((c, j), n) in concepts {
        let _ = writeln!(
            out,
            "concept,{},{},{n}",
            quote(&bank.classes[c].name),
            quote(&bank.classes[c].concepts[j])
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header() {
        let img = pgm(2, 3, &[0, 1, 2, 3, 4, 255]);
        assert!(img.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(img.len(), 11 + 6);
    }

    #[test]
    fn edges_filtered() {
        let csv = edges_csv(&[0.9, 0.1, 0.5, 0.5], 2, 0.5);
        assert_eq!(csv, "i,j,a_ij\n0,0,0.9\n1,0,0.5\n1,1,0.5\n");
    }
}
