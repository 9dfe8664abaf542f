//! Volume data model, the MVOL file format and synthetic phantoms.

mod mvol;
mod phantom;
mod volume;

use thiserror::Error;

pub use mvol::{decode, encode, header_line, read_volume, write_volume, MAGIC};
pub(crate) use mvol::write_atomic;
pub use phantom::{
    brain_ellipsoid, generate_phantom, generate_phantom_detailed, voxel_position, Ellipsoid,
    Phantom, PhantomSpec, BACKGROUND, LESION_BRIGHT, LESION_DARK, MODALITIES, TISSUE,
};
pub use volume::{Dims, ElementKind, MultiModalCase, Spacing, Volume3D, VoxelData};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("malformed MVOL header: {0}")]
    MalformedHeader(String),
    #[error("payload holds {found} elements but dims require {expected}")]
    DimsMismatch { expected: usize, found: usize },
    #[error("unsupported element kind {0:?}")]
    UnsupportedKind(String),
    #[error("invalid dims {0:?}")]
    InvalidDims(Dims),
    #[error("invalid spacing {0:?}")]
    InvalidSpacing(Spacing),
    #[error("mask voxel {index} holds {value}, expected 0 or 1")]
    NonBinaryMask { index: usize, value: u8 },
    #[error("volume is not a u8 mask")]
    NotAMask,
    #[error("case has no modalities")]
    NoModalities,
    #[error("volume {0:?} does not share the case grid")]
    GridMismatch(String),
    #[error("invalid phantom spec: {0}")]
    InvalidPhantom(String),
    #[error("could not place lesion {lesion} inside the brain region")]
    PlacementFailed { lesion: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
