//! 3D cases to padded 2D slice samples along the three orthogonal planes, and
//! per-slice predictions back into plane-aligned volumes.
//!
//! Plane geometry (row axis, column axis of the 2D slice):
//!
//! | plane    | fixed axis | rows | cols |
//! |----------|------------|------|------|
//! | axial    | z          | x    | y    |
//! | coronal  | y          | x    | z    |
//! | sagittal | x          | y    | z    |
//!
//! Each slice is centred in an `S x S` zero field with offset
//! `floor((S - d) / 2)` per axis.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::volio::{Dims, MultiModalCase, Spacing, Volume3D, VoxelData};

#[derive(Debug, Error)]
pub enum SlicerError {
    #[error("pad size {size} is smaller than slice dimension {dim}")]
    PadTooSmall { size: usize, dim: usize },
    #[error("slice {index} of case {case_id:?} has no target")]
    MissingTarget { case_id: String, index: usize },
    #[error("missing prediction for slice {0}")]
    MissingSlice(usize),
    #[error("duplicate prediction for slice {0}")]
    DuplicateSlice(usize),
    #[error("prediction for slice {index} has {found} pixels, expected {expected}")]
    PredictionShape {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("unknown plane {0:?}")]
    UnknownPlane(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SlicePlane {
    Axial,
    Coronal,
    Sagittal,
}

impl SlicePlane {
    pub const ALL: [SlicePlane; 3] = [SlicePlane::Axial, SlicePlane::Coronal, SlicePlane::Sagittal];

    /// Index of the fixed axis: 0 = x, 1 = y, 2 = z.
    pub fn axis(self) -> usize {
        match self {
            SlicePlane::Axial => 2,
            SlicePlane::Coronal => 1,
            SlicePlane::Sagittal => 0,
        }
    }

    /// Number of slices along the fixed axis.
    pub fn slice_count(self, dims: Dims) -> usize {
        [dims.0, dims.1, dims.2][self.axis()]
    }

    /// `(rows, cols)` of an unpadded slice.
    pub fn slice_dims(self, dims: Dims) -> (usize, usize) {
        match self {
            SlicePlane::Axial => (dims.0, dims.1),
            SlicePlane::Coronal => (dims.0, dims.2),
            SlicePlane::Sagittal => (dims.1, dims.2),
        }
    }

    /// Voxel coordinate of pixel `(row, col)` of slice `index`.
    #[inline]
    pub fn voxel(self, index: usize, row: usize, col: usize) -> (usize, usize, usize) {
        match self {
            SlicePlane::Axial => (row, col, index),
            SlicePlane::Coronal => (row, index, col),
            SlicePlane::Sagittal => (index, row, col),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SlicePlane::Axial => "axial",
            SlicePlane::Coronal => "coronal",
            SlicePlane::Sagittal => "sagittal",
        }
    }
}

impl fmt::Display for SlicePlane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SlicePlane {
    type Err = SlicerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "axial" => Ok(SlicePlane::Axial),
            "coronal" => Ok(SlicePlane::Coronal),
            "sagittal" => Ok(SlicePlane::Sagittal),
            other => Err(SlicerError::UnknownPlane(other.to_string())),
        }
    }
}

/// One padded 2D slice of every modality, with its optional target.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub case_id: String,
    pub plane: SlicePlane,
    pub index: usize,
    /// Side length `S` of the padded square.
    pub size: usize,
    /// Modality name to `S * S` row-major pixels.
    pub inputs: BTreeMap<String, Vec<f32>>,
    pub target: Option<Vec<u8>>,
    /// `(row, col)` of the original slice's top-left corner inside the square.
    pub crop_offsets: (usize, usize),
    /// `(rows, cols)` of the original slice.
    pub slice_dims: (usize, usize),
}

impl SliceSample {
    pub fn has_lesion(&self) -> bool {
        self.target.as_ref().is_some_and(|t| t.iter().any(|&v| v != 0))
    }
}

pub fn pad_size(dims: Dims) -> usize {
    dims.0.max(dims.1).max(dims.2)
}

fn offsets(plane: SlicePlane, dims: Dims, size: usize) -> Result<(usize, usize), SlicerError> {
    let (rows, cols) = plane.slice_dims(dims);
    for d in [rows, cols] {
        if d > size {
            return Err(SlicerError::PadTooSmall { size, dim: d });
        }
    }
    Ok(((size - rows) / 2, (size - cols) / 2))
}

/// Copies slice `index` of `vol` into a zeroed `size x size` square.
pub fn padded_slice(vol: &Volume3D, plane: SlicePlane, index: usize, size: usize) -> Result<Vec<f32>, SlicerError> {
    let dims = vol.dims();
    let (r0, c0) = offsets(plane, dims, size)?;
    let (rows, cols) = plane.slice_dims(dims);
    let mut out = vec![0.0f32; size * size];
    for r in 0..rows {
        for c in 0..cols {
            let (x, y, z) = plane.voxel(index, r, c);
            out[(r + r0) * size + c + c0] = vol.get(x, y, z);
        }
    }
    Ok(out)
}

pub fn extract_slices(case: &MultiModalCase, plane: SlicePlane, size: usize) -> Result<Vec<SliceSample>, SlicerError> {
    let dims = case.dims();
    let crop_offsets = offsets(plane, dims, size)?;
    let slice_dims = plane.slice_dims(dims);
    let count = plane.slice_count(dims);
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let mut inputs = BTreeMap::new();
        for (name, vol) in case.modalities() {
            inputs.insert(name.clone(), padded_slice(vol, plane, index, size)?);
        }
        let target = match case.truth() {
            Some(t) => Some(
                padded_slice(t, plane, index, size)?
                    .into_iter()
                    .map(|v| u8::from(v != 0.0))
                    .collect(),
            ),
            None => None,
        };
        out.push(SliceSample {
            case_id: case.case_id().to_string(),
            plane,
            index,
            size,
            inputs,
            target,
            crop_offsets,
            slice_dims,
        });
    }
    Ok(out)
}

/// Keeps samples whose target contains at least one lesion pixel, in order.
pub fn select_training_slices(samples: Vec<SliceSample>) -> Result<Vec<SliceSample>, SlicerError> {
    if let Some(s) = samples.iter().find(|s| s.target.is_none()) {
        return Err(SlicerError::MissingTarget {
            case_id: s.case_id.clone(),
            index: s.index,
        });
    }
    Ok(samples.into_iter().filter(SliceSample::has_lesion).collect())
}

/// Inverse of [`extract_slices`] geometry: un-pads each `S x S` map and
/// stacks them along the plane axis. Needs exactly one map per slice index.
pub fn assemble_plane_volume(
    preds: &[(usize, Vec<f32>)],
    plane: SlicePlane,
    dims: Dims,
    spacing: Spacing,
    size: usize,
) -> Result<Volume3D, SlicerError> {
    let (r0, c0) = offsets(plane, dims, size)?;
    let (rows, cols) = plane.slice_dims(dims);
    let count = plane.slice_count(dims);
    let mut seen = vec![false; count];
    let mut data = vec![0.0f32; dims.0 * dims.1 * dims.2];
    for (index, map) in preds {
        let index = *index;
        if index >= count {
            return Err(SlicerError::MissingSlice(index));
        }
        if std::mem::replace(&mut seen[index], true) {
            return Err(SlicerError::DuplicateSlice(index));
        }
        if map.len() != size * size {
            return Err(SlicerError::PredictionShape {
                index,
                expected: size * size,
                found: map.len(),
            });
        }
        for r in 0..rows {
            for c in 0..cols {
                let (x, y, z) = plane.voxel(index, r, c);
                data[x + dims.0 * (y + dims.1 * z)] = map[(r + r0) * size + c + c0];
            }
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(SlicerError::MissingSlice(missing));
    }
    Ok(Volume3D::from_parts_unchecked(dims, spacing, VoxelData::F32(data)))
}
