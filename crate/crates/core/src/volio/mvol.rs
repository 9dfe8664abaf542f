//! MVOL on-disk format.
//!
//! ```text
//! MVOL1 nx ny nz sx sy sz kind\n
//! <raw little-endian payload, x fastest, nx*ny*nz elements>
//! ```
//!
//! `kind` is `f32` or `u8`. Spacing values are written in shortest
//! round-trip decimal form so a read/write cycle is byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::volume::{ElementKind, Volume3D, VoxelData};
use super::VolumeError;

pub const MAGIC: &str = "MVOL1";

pub fn header_line(v: &Volume3D) -> String {
    let (nx, ny, nz) = v.dims();
    let (sx, sy, sz) = v.spacing();
    format!("{MAGIC} {nx} {ny} {nz} {sx} {sy} {sz} {}\n", v.kind())
}

pub fn encode(v: &Volume3D) -> Vec<u8> {
    let header = header_line(v);
    let mut out = Vec::with_capacity(header.len() + v.len() * v.kind().byte_width());
    out.extend_from_slice(header.as_bytes());
    match v.data() {
        VoxelData::F32(vals) => {
            for x in vals {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        VoxelData::U8(vals) => out.extend_from_slice(vals),
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Volume3D, VolumeError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| VolumeError::MalformedHeader("missing header terminator".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| VolumeError::MalformedHeader("header is not ASCII".into()))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 8 {
        return Err(VolumeError::MalformedHeader(format!(
            "expected 8 fields, found {}",
            fields.len()
        )));
    }
    if fields[0] != MAGIC {
        return Err(VolumeError::MalformedHeader(format!("bad magic {:?}", fields[0])));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| VolumeError::MalformedHeader(format!("bad dimension {s:?}")))
    };
    let spc = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| VolumeError::MalformedHeader(format!("bad spacing {s:?}")))
    };
    let dims = (dim(fields[1])?, dim(fields[2])?, dim(fields[3])?);
    let spacing = (spc(fields[4])?, spc(fields[5])?, spc(fields[6])?);
    let kind = match fields[7] {
        "f32" => ElementKind::F32,
        "u8" => ElementKind::U8,
        other => return Err(VolumeError::UnsupportedKind(other.to_string())),
    };

    let payload = &bytes[nl + 1..];
    let width = kind.byte_width();
    let expected = dims
        .0
        .checked_mul(dims.1)
        .and_then(|n| n.checked_mul(dims.2))
        .ok_or_else(|| VolumeError::MalformedHeader("dimensions overflow".into()))?;
    if !payload.len().is_multiple_of(width) || payload.len() / width != expected {
        return Err(VolumeError::DimsMismatch {
            expected,
            found: payload.len() / width,
        });
    }
    let data = match kind {
        ElementKind::F32 => VoxelData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        ElementKind::U8 => VoxelData::U8(payload.to_vec()),
    };
    Volume3D::new(dims, spacing, data)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D, VolumeError> {
    let bytes = fs::read(path.as_ref())?;
    decode(&bytes)
}

/// Writes atomically: the payload lands in a sibling temp file that is then renamed.
pub fn write_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    // Re-validate: a mask built through unchecked paths must still be binary.
    let v = Volume3D::new(v.dims(), v.spacing(), v.data().clone())?;
    write_atomic(path.as_ref(), &encode(&v))?;
    Ok(())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
