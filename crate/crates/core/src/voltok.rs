//! Volumes, patch partitioning and the multimodal tokenizer.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mmgpl_diffcore::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{io_at, Error, Result};

const VOLUME_MAGIC: &[u8; 4] = b"MMGV";
const VOLUME_VERSION: u32 = 1;
const AXES: [&str; 3] = ["H", "W", "D"];

/// One modality of one subject: an `H×W×D×C` grid, `H` outermost, channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub modality_id: u32,
    pub dims: [usize; 4],
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(modality_id: u32, dims: [usize; 4], voxels: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Data(format!("volume dims {dims:?} contain zero")));
        }
        let n: usize = dims.iter().product();
        if voxels.len() != n {
            return Err(Error::Data(format!(
                "volume dims {dims:?} need {n} voxels, got {}",
                voxels.len()
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("voxel {i} is not finite")));
        }
        Ok(Volume {
            modality_id,
            dims,
            voxels,
        })
    }

    pub fn zeros(modality_id: u32, dims: [usize; 4]) -> Self {
        Volume {
            modality_id,
            dims,
            voxels: vec![0.0; dims.iter().product()],
        }
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, d: usize, c: usize) -> usize {
        let [_, dw, dd, dc] = self.dims;
        ((h * dw + w) * dd + d) * dc + c
    }

    pub fn at(&self, h: usize, w: usize, d: usize, c: usize) -> f32 {
        self.voxels[self.index(h, w, d, c)]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 4 * self.voxels.len());
        out.extend_from_slice(VOLUME_MAGIC);
        out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
        out.extend_from_slice(&self.modality_id.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(i * 4..i * 4 + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or_else(|| Error::Data("volume header truncated".into()))
        };
        if bytes.get(..4) != Some(VOLUME_MAGIC.as_slice()) {
            return Err(Error::Data("volume magic is not MMGV".into()));
        }
        let version = word(1)?;
        if version != VOLUME_VERSION {
            return Err(Error::Data(format!("unsupported volume version {version}")));
        }
        let modality_id = word(2)?;
        let dims = [word(3)?, word(4)?, word(5)?, word(6)?].map(|d| d as usize);
        let n: usize = dims.iter().product();
        let body = &bytes[28..];
        if body.len() != n * 4 {
            return Err(Error::Data(format!(
                "volume body has {} bytes, dims {dims:?} need {}",
                body.len(),
                n * 4
            )));
        }
        let voxels = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Volume::new(modality_id, dims, voxels)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(io_at(path))?;
        f.write_all(&self.to_bytes()).map_err(io_at(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_at(path))?;
        Volume::from_bytes(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchVariant {
    /// In-plane patches of every slice along `PatchStrategy::slice_axis`.
    Slice2D,
    /// In-plane patches of every slice along the depth axis.
    AxialSlice2D,
    Cube3D,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchStrategy {
    pub variant: PatchVariant,
    pub patch_size: usize,
    /// Slicing axis for `Slice2D` (0 = H, 1 = W, 2 = D); ignored otherwise.
    pub slice_axis: usize,
}

impl PatchStrategy {
    pub fn cube(patch_size: usize) -> Self {
        PatchStrategy {
            variant: PatchVariant::Cube3D,
            patch_size,
            slice_axis: 0,
        }
    }

    pub fn axial(patch_size: usize) -> Self {
        PatchStrategy {
            variant: PatchVariant::AxialSlice2D,
            patch_size,
            slice_axis: 2,
        }
    }

    pub fn slice(patch_size: usize, slice_axis: usize) -> Self {
        PatchStrategy {
            variant: PatchVariant::Slice2D,
            patch_size,
            slice_axis,
        }
    }

    fn outer_axis(&self) -> usize {
        match self.variant {
            PatchVariant::Slice2D => self.slice_axis,
            PatchVariant::AxialSlice2D | PatchVariant::Cube3D => 2,
        }
    }

    /// Spatial extent of one patch along (H, W, D).
    pub fn extent(&self) -> [usize; 3] {
        let s = self.patch_size;
        match self.variant {
            PatchVariant::Cube3D => [s, s, s],
            _ => {
                let mut e = [s; 3];
                e[self.outer_axis()] = 1;
                e
            }
        }
    }

    fn validate(&self, dims: [usize; 4]) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if self.variant == PatchVariant::Slice2D && self.slice_axis > 2 {
            return Err(Error::Config(format!("slice axis {} is not 0, 1 or 2", self.slice_axis)));
        }
        for (axis, (&len, &e)) in dims.iter().zip(&self.extent()).enumerate() {
            if e > 1 && len % e != 0 {
                return Err(Error::Partition {
                    axis: AXES[axis],
                    len,
                    size: e,
                });
            }
        }
        Ok(())
    }

    /// Patch origins in emission order: slice-major, then row-major in plane.
    pub fn origins(&self, dims: [usize; 4]) -> Result<Vec<[usize; 3]>> {
        self.validate(dims)?;
        let e = self.extent();
        let outer = self.outer_axis();
        let plane: Vec<usize> = (0..3).filter(|&a| a != outer).collect();
        let (p, q) = (plane[0], plane[1]);
        let mut out = Vec::new();
        for a in (0..dims[outer]).step_by(e[outer]) {
            for i in (0..dims[p]).step_by(e[p]) {
                for j in (0..dims[q]).step_by(e[q]) {
                    let mut o = [0; 3];
                    o[outer] = a;
                    o[p] = i;
                    o[q] = j;
                    out.push(o);
                }
            }
        }
        Ok(out)
    }

    pub fn patch_len(&self, channels: usize) -> usize {
        self.extent().iter().product::<usize>() * channels
    }

    pub fn patch_count(&self, dims: [usize; 4]) -> Result<usize> {
        self.validate(dims)?;
        Ok(dims[..3].iter().zip(&self.extent()).map(|(d, e)| d / e).product())
    }
}

/// Flat patch vectors of one volume, one row per patch.
#[derive(Clone, Debug)]
pub struct Patches {
    pub modality_id: u32,
    pub data: Tensor,
    pub origins: Vec<[usize; 3]>,
}

impl Patches {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Splits a volume into patches; within a patch voxels keep the volume's row-major order.
pub fn partition(v: &Volume, strat: &PatchStrategy) -> Result<Patches> {
    let origins = strat.origins(v.dims)?;
    let [eh, ew, ed] = strat.extent();
    let c = v.dims[3];
    let len = strat.patch_len(c);
    let mut data = Vec::with_capacity(origins.len() * len);
    for &[h0, w0, d0] in &origins {
        for h in h0..h0 + eh {
            for w in w0..w0 + ew {
                let start = v.index(h, w, d0, 0);
                data.extend_from_slice(&v.voxels[start..start + ed * c]);
            }
        }
    }
    Ok(Patches {
        modality_id: v.modality_id,
        data: Tensor::new(vec![origins.len(), len], data)?,
        origins,
    })
}

/// Inverse of [`partition`]: writes every patch back at its origin.
pub fn reassemble(p: &Patches, dims: [usize; 4], strat: &PatchStrategy) -> Result<Volume> {
    let [eh, ew, ed] = strat.extent();
    let c = dims[3];
    let mut v = Volume::zeros(p.modality_id, dims);
    for (row, &[h0, w0, d0]) in p.origins.iter().enumerate() {
        let src = p.data.row(row);
        let mut k = 0;
        for h in h0..h0 + eh {
            for w in w0..w0 + ew {
                let start = v.index(h, w, d0, 0);
                v.voxels[start..start + ed * c].copy_from_slice(&src[k..k + ed * c]);
                k += ed * c;
            }
        }
    }
    Ok(v)
}

/// Tape handles of one modality's tokenizer parameters.
#[derive(Clone, Copy, Debug)]
pub struct TokenizerVars {
    pub proj: Var,
    pub bias: Var,
    pub pos: Var,
}

/// `patches · W + b + E^pos`.
pub fn tokenize<T: Real>(tape: &mut Tape<'_, T>, patches: Var, p: &TokenizerVars) -> Result<Var> {
    let (n, len) = tape.dims(patches);
    let (rows, _) = tape.dims(p.proj);
    if rows != len {
        return Err(mmgpl_diffcore::DiffError::Shape {
            op: "tokenize",
            lhs: vec![n, len],
            rhs: vec![rows, tape.dims(p.proj).1],
        }
        .into());
    }
    let projected = tape.matmul(patches, p.proj)?;
    let biased = tape.add_row(projected, p.bias)?;
    Ok(tape.add(biased, p.pos)?)
}

/// Shared alignment projection plus modality embedding, concatenated over modalities.
///
/// Returns the token sequence and the block boundaries `[0, N_0, N_0 + N_1, …]`.
pub fn align<T: Real>(
    tape: &mut Tape<'_, T>,
    per_modality: &[(u32, Var)],
    align_w: Var,
    align_b: Var,
    modality_table: Var,
) -> Result<(Var, Vec<usize>)> {
    let mut blocks = Vec::with_capacity(per_modality.len());
    let mut boundaries = vec![0];
    for &(m, tokens) in per_modality {
        let n = tape.dims(tokens).0;
        let shared = tape.matmul(tokens, align_w)?;
        let shared = tape.add_row(shared, align_b)?;
        let emb = tape.gather_rows(modality_table, &vec![m as usize; n])?;
        blocks.push(tape.add(shared, emb)?);
        boundaries.push(boundaries.last().unwrap() + n);
    }
    if blocks.is_empty() {
        return Err(Error::Data("no modalities to align".into()));
    }
    Ok((tape.concat_rows(&blocks)?, boundaries))
}

/// One row of the dataset manifest; modality paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub label: usize,
    pub modalities: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subjects: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub label: usize,
    pub volumes: Vec<Volume>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(io_at(path))
    }

    /// Reads every volume listed in the manifest at `path`.
    pub fn load_subjects(&self, path: &Path) -> Result<Vec<Subject>> {
        let base = path.parent().unwrap_or(Path::new("."));
        self.subjects
            .iter()
            .map(|e| {
                let volumes = e
                    .modalities
                    .iter()
                    .map(|p| Volume::read(&base.join(p)))
                    .collect::<Result<Vec<_>>>()?;
                if volumes.is_empty() {
                    return Err(Error::Data(format!("subject {} has no modalities", e.subject_id)));
                }
                Ok(Subject {
                    id: e.subject_id.clone(),
                    label: e.label,
                    volumes,
                })
            })
            .collect()
    }
}

pub fn load_dataset(manifest: &Path) -> Result<Vec<Subject>> {
    Manifest::read(manifest)?.load_subjects(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 4]) -> Volume {
        let n = dims.iter().product();
        Volume::new(0, dims, (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn cube_counts() {
        let v = ramp([32, 32, 32, 1]);
        let p = partition(&v, &PatchStrategy::cube(16)).unwrap();
        assert_eq!(p.data.shape(), &[8, 4096]);
    }

    #[test]
    fn axial_counts() {
        let v = ramp([32, 32, 32, 1]);
        let p = partition(&v, &PatchStrategy::axial(16)).unwrap();
        assert_eq!(p.data.shape(), &[128, 256]);
        // first four patches come from slice d = 0
        assert!(p.origins[..4].iter().all(|o| o[2] == 0));
        assert_eq!(p.origins[4][2], 1);
    }

    #[test]
    fn slice_along_h() {
        let v = ramp([4, 8, 8, 2]);
        let strat = PatchStrategy::slice(4, 0);
        let p = partition(&v, &strat).unwrap();
        assert_eq!(p.data.shape(), &[16, 32]);
        let back = reassemble(&p, v.dims, &strat).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn rejects_non_divisible_axis() {
        let v = ramp([32, 30, 32, 1]);
        let err = partition(&v, &PatchStrategy::cube(16)).unwrap_err();
        assert!(err.to_string().contains("axis W"), "{err}");
        // in-plane only: D need not divide for axial slices
        let v = ramp([32, 32, 5, 1]);
        assert!(partition(&v, &PatchStrategy::axial(16)).is_ok());
    }

    #[test]
    fn volume_bytes_round_trip() {
        let v = Volume::new(3, [2, 1, 2, 1], vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        let bytes = v.to_bytes();
        assert_eq!(&bytes[..4], b"MMGV");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[28..32], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 28 + 16);
        assert_eq!(Volume::from_bytes(&bytes).unwrap(), v);
        assert!(Volume::from_bytes(&bytes[..30]).is_err());
    }
}
