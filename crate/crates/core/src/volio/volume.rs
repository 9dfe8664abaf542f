use std::collections::BTreeMap;
use std::fmt;

use super::VolumeError;

/// Storage kind of a volume's voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ElementKind {
    F32,
    U8,
}

impl ElementKind {
    pub fn tag(self) -> &'static str {
        match self {
            ElementKind::F32 => "f32",
            ElementKind::U8 => "u8",
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            ElementKind::F32 => 4,
            ElementKind::U8 => 1,
        }
    }
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VoxelData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::F32(v) => v.len(),
            VoxelData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ElementKind {
        match self {
            VoxelData::F32(_) => ElementKind::F32,
            VoxelData::U8(_) => ElementKind::U8,
        }
    }
}

/// Grid extent `(nx, ny, nz)`.
pub type Dims = (usize, usize, usize);
/// Voxel spacing in millimetres `(sx, sy, sz)`.
pub type Spacing = (f64, f64, f64);

/// Dense 3D scalar grid, x fastest.
///
/// `u8` volumes are binary masks and may only hold 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    spacing: Spacing,
    data: VoxelData,
}

impl Volume3D {
    pub fn new(dims: Dims, spacing: Spacing, data: VoxelData) -> Result<Self, VolumeError> {
        let (nx, ny, nz) = dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(VolumeError::InvalidDims(dims));
        }
        let (sx, sy, sz) = spacing;
        let positive = |s: f64| s.is_finite() && s > 0.0;
        if !(positive(sx) && positive(sy) && positive(sz)) {
            return Err(VolumeError::InvalidSpacing(spacing));
        }
        let expected = nx * ny * nz;
        if data.len() != expected {
            return Err(VolumeError::DimsMismatch {
                expected,
                found: data.len(),
            });
        }
        if let VoxelData::U8(mask) = &data {
            if let Some(pos) = mask.iter().position(|&v| v > 1) {
                return Err(VolumeError::NonBinaryMask {
                    index: pos,
                    value: mask[pos],
                });
            }
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn from_f32(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self, VolumeError> {
        Self::new(dims, spacing, VoxelData::F32(data))
    }

    pub fn from_mask(dims: Dims, spacing: Spacing, data: Vec<u8>) -> Result<Self, VolumeError> {
        Self::new(dims, spacing, VoxelData::U8(data))
    }

    pub fn zeros_f32(dims: Dims, spacing: Spacing) -> Result<Self, VolumeError> {
        Self::from_f32(dims, spacing, vec![0.0; dims.0 * dims.1 * dims.2])
    }

    pub fn empty_mask(dims: Dims, spacing: Spacing) -> Result<Self, VolumeError> {
        Self::from_mask(dims, spacing, vec![0; dims.0 * dims.1 * dims.2])
    }

    /// Builds a volume without re-validating; callers guarantee the invariants.
    pub(crate) fn from_parts_unchecked(dims: Dims, spacing: Spacing, data: VoxelData) -> Self {
        debug_assert_eq!(data.len(), dims.0 * dims.1 * dims.2);
        Self {
            dims,
            spacing,
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn kind(&self) -> ElementKind {
        self.data.kind()
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub fn into_data(self) -> VoxelData {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.0 * self.spacing.1 * self.spacing.2
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let (nx, ny, _) = self.dims;
        (idx % nx, (idx / nx) % ny, idx / (nx * ny))
    }

    /// Voxel value widened to `f32` regardless of storage kind.
    #[inline]
    pub fn value(&self, idx: usize) -> f32 {
        match &self.data {
            VoxelData::F32(v) => v[idx],
            VoxelData::U8(v) => v[idx] as f32,
        }
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.value(self.index(x, y, z))
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            VoxelData::F32(v) => Some(v),
            VoxelData::U8(_) => None,
        }
    }

    pub fn as_mask(&self) -> Option<&[u8]> {
        match &self.data {
            VoxelData::U8(v) => Some(v),
            VoxelData::F32(_) => None,
        }
    }

    /// All voxels widened to `f32`.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            VoxelData::F32(v) => v.clone(),
            VoxelData::U8(v) => v.iter().map(|&b| b as f32).collect(),
        }
    }

    pub fn mask(&self) -> Result<&[u8], VolumeError> {
        self.as_mask().ok_or(VolumeError::NotAMask)
    }

    pub fn foreground_count(&self) -> usize {
        match &self.data {
            VoxelData::U8(v) => v.iter().filter(|&&b| b != 0).count(),
            VoxelData::F32(v) => v.iter().filter(|&&f| f != 0.0).count(),
        }
    }

    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    /// Strict threshold: voxels strictly above `tau` become foreground.
    pub fn binarize(&self, tau: f32) -> Volume3D {
        let mask = match &self.data {
            VoxelData::F32(v) => v.iter().map(|&p| u8::from(p > tau)).collect(),
            VoxelData::U8(v) => v.iter().map(|&p| u8::from(p as f32 > tau)).collect(),
        };
        Volume3D::from_parts_unchecked(self.dims, self.spacing, VoxelData::U8(mask))
    }
}

/// One subject: named modalities sharing a grid plus an optional truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalCase {
    case_id: String,
    modalities: BTreeMap<String, Volume3D>,
    truth: Option<Volume3D>,
}

impl MultiModalCase {
    pub fn new(
        case_id: impl Into<String>,
        modalities: BTreeMap<String, Volume3D>,
        truth: Option<Volume3D>,
    ) -> Result<Self, VolumeError> {
        let first = modalities.values().next().ok_or(VolumeError::NoModalities)?;
        for (name, vol) in &modalities {
            if !vol.same_grid(first) {
                return Err(VolumeError::GridMismatch(name.clone()));
            }
        }
        if let Some(t) = &truth {
            if !t.same_grid(first) {
                return Err(VolumeError::GridMismatch("truth".into()));
            }
            if t.kind() != ElementKind::U8 {
                return Err(VolumeError::NotAMask);
            }
        }
        Ok(Self {
            case_id: case_id.into(),
            modalities,
            truth,
        })
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn with_case_id(mut self, case_id: impl Into<String>) -> Self {
        self.case_id = case_id.into();
        self
    }

    pub fn modalities(&self) -> &BTreeMap<String, Volume3D> {
        &self.modalities
    }

    pub fn modality(&self, name: &str) -> Option<&Volume3D> {
        self.modalities.get(name)
    }

    pub fn truth(&self) -> Option<&Volume3D> {
        self.truth.as_ref()
    }

    pub fn dims(&self) -> Dims {
        self.modalities.values().next().map(|v| v.dims()).unwrap_or((0, 0, 0))
    }

    pub fn spacing(&self) -> Spacing {
        self.modalities
            .values()
            .next()
            .map(|v| v.spacing())
            .unwrap_or((1.0, 1.0, 1.0))
    }
}
