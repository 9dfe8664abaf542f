//! Deterministic synthetic multi-modal phantoms.
//!
//! Randomness comes from a ChaCha8 stream seeded with `PhantomSpec::seed`.
//! Draw order is fixed: lesion count, then per lesion its three radii and
//! rejection-sampled centre, then Gaussian noise for `flair`, `t1`, `t2` in
//! voxel order.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::volume::{Dims, MultiModalCase, Spacing, Volume3D, VoxelData};
use super::VolumeError;

pub const MODALITIES: [&str; 3] = ["flair", "t1", "t2"];

pub const BACKGROUND: f32 = 0.0;
pub const TISSUE: f32 = 0.5;
pub const LESION_BRIGHT: f32 = 0.9;
pub const LESION_DARK: f32 = 0.2;

/// Brain semi-axis as a fraction of the grid extent along each axis.
const BRAIN_FRACTION: f64 = 0.42;
const PLACEMENT_RETRIES: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    pub lesion_count_range: (usize, usize),
    pub lesion_radius_range_mm: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: (64, 64, 64),
            spacing: (1.0, 1.0, 1.0),
            lesion_count_range: (3, 6),
            lesion_radius_range_mm: (2.0, 6.0),
            noise_sigma: 0.05,
            seed: 1,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), VolumeError> {
        let (nx, ny, nz) = self.dims;
        if nx < 16 || ny < 16 || nz < 16 {
            return Err(VolumeError::InvalidPhantom(format!(
                "dims {:?} below the 16 voxel minimum",
                self.dims
            )));
        }
        let (sx, sy, sz) = self.spacing;
        if !(sx > 0.0 && sy > 0.0 && sz > 0.0) {
            return Err(VolumeError::InvalidSpacing(self.spacing));
        }
        let (cmin, cmax) = self.lesion_count_range;
        if cmin > cmax {
            return Err(VolumeError::InvalidPhantom("empty lesion count range".into()));
        }
        let (rmin, rmax) = self.lesion_radius_range_mm;
        if !(rmin > 0.0 && rmin <= rmax && rmax.is_finite()) {
            return Err(VolumeError::InvalidPhantom("invalid lesion radius range".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(VolumeError::InvalidPhantom("noise sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Axis-aligned ellipsoid in millimetre coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center_mm: (f64, f64, f64),
    pub radii_mm: (f64, f64, f64),
}

impl Ellipsoid {
    #[inline]
    pub fn contains(&self, p: (f64, f64, f64)) -> bool {
        let dx = (p.0 - self.center_mm.0) / self.radii_mm.0;
        let dy = (p.1 - self.center_mm.1) / self.radii_mm.1;
        let dz = (p.2 - self.center_mm.2) / self.radii_mm.2;
        dx * dx + dy * dy + dz * dz <= 1.0
    }

    pub fn volume_mm3(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radii_mm.0 * self.radii_mm.1 * self.radii_mm.2
    }

    /// Inclusive voxel index range covered along each axis.
    pub fn voxel_bounds(&self, dims: Dims, spacing: Spacing) -> [(usize, usize); 3] {
        let axis = |c: f64, r: f64, s: f64, n: usize| {
            let lo = ((c - r) / s).ceil().max(0.0) as usize;
            let hi = (((c + r) / s).floor().max(0.0) as usize).min(n - 1);
            (lo, hi)
        };
        [
            axis(self.center_mm.0, self.radii_mm.0, spacing.0, dims.0),
            axis(self.center_mm.1, self.radii_mm.1, spacing.1, dims.1),
            axis(self.center_mm.2, self.radii_mm.2, spacing.2, dims.2),
        ]
    }
}

/// Millimetre position of a voxel centre.
#[inline]
pub fn voxel_position(x: usize, y: usize, z: usize, spacing: Spacing) -> (f64, f64, f64) {
    (x as f64 * spacing.0, y as f64 * spacing.1, z as f64 * spacing.2)
}

pub fn brain_ellipsoid(dims: Dims, spacing: Spacing) -> Ellipsoid {
    let c = |n: usize, s: f64| (n as f64 - 1.0) / 2.0 * s;
    let r = |n: usize, s: f64| BRAIN_FRACTION * n as f64 * s;
    Ellipsoid {
        center_mm: (c(dims.0, spacing.0), c(dims.1, spacing.1), c(dims.2, spacing.2)),
        radii_mm: (r(dims.0, spacing.0), r(dims.1, spacing.1), r(dims.2, spacing.2)),
    }
}

/// A generated case together with the geometry it was drawn from.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub case: MultiModalCase,
    pub brain: Volume3D,
    pub lesions: Vec<Ellipsoid>,
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<MultiModalCase, VolumeError> {
    generate_phantom_detailed(spec).map(|p| p.case)
}

pub fn generate_phantom_detailed(spec: &PhantomSpec) -> Result<Phantom, VolumeError> {
    spec.validate()?;
    let dims = spec.dims;
    let spacing = spec.spacing;
    let n = dims.0 * dims.1 * dims.2;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let brain = brain_ellipsoid(dims, spacing);
    let mut brain_mask = vec![0u8; n];
    for z in 0..dims.2 {
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                if brain.contains(voxel_position(x, y, z, spacing)) {
                    brain_mask[x + dims.0 * (y + dims.1 * z)] = 1;
                }
            }
        }
    }

    let (cmin, cmax) = spec.lesion_count_range;
    let count = rng.random_range(cmin..=cmax);
    let (rmin, rmax) = spec.lesion_radius_range_mm;
    let mut lesions = Vec::with_capacity(count);
    let mut truth = vec![0u8; n];
    for k in 0..count {
        let mut radius = || {
            if rmin == rmax {
                rmin
            } else {
                rng.random_range(rmin..rmax)
            }
        };
        let radii = (radius(), radius(), radius());
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let u: (f64, f64, f64) = (
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if u.0 * u.0 + u.1 * u.1 + u.2 * u.2 >= 1.0 {
                continue;
            }
            let center = (
                brain.center_mm.0 + u.0 * brain.radii_mm.0,
                brain.center_mm.1 + u.1 * brain.radii_mm.1,
                brain.center_mm.2 + u.2 * brain.radii_mm.2,
            );
            let lesion = Ellipsoid {
                center_mm: center,
                radii_mm: radii,
            };
            if lesion_inside(&lesion, &brain, dims, spacing) {
                placed = Some(lesion);
                break;
            }
        }
        let lesion = placed.ok_or(VolumeError::PlacementFailed { lesion: k })?;
        let [bx, by, bz] = lesion.voxel_bounds(dims, spacing);
        for z in bz.0..=bz.1 {
            for y in by.0..=by.1 {
                for x in bx.0..=bx.1 {
                    if lesion.contains(voxel_position(x, y, z, spacing)) {
                        truth[x + dims.0 * (y + dims.1 * z)] = 1;
                    }
                }
            }
        }
        lesions.push(lesion);
    }

    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).expect("sigma validated"))
    } else {
        None
    };
    let mut modalities = BTreeMap::new();
    for name in MODALITIES {
        let lesion_value = if name == "t1" { LESION_DARK } else { LESION_BRIGHT };
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let base = if truth[i] == 1 {
                lesion_value
            } else if brain_mask[i] == 1 {
                TISSUE
            } else {
                BACKGROUND
            };
            let jitter = noise.map(|d| d.sample(&mut rng) as f32).unwrap_or(0.0);
            data.push((base + jitter).clamp(0.0, 1.0));
        }
        modalities.insert(
            name.to_string(),
            Volume3D::from_parts_unchecked(dims, spacing, VoxelData::F32(data)),
        );
    }

    let truth = Volume3D::from_parts_unchecked(dims, spacing, VoxelData::U8(truth));
    let brain_vol = Volume3D::from_parts_unchecked(dims, spacing, VoxelData::U8(brain_mask));
    let case = MultiModalCase::new(format!("phantom-{}", spec.seed), modalities, Some(truth))?;
    Ok(Phantom {
        case,
        brain: brain_vol,
        lesions,
    })
}

fn lesion_inside(lesion: &Ellipsoid, brain: &Ellipsoid, dims: Dims, spacing: Spacing) -> bool {
    // The lesion's bounding box must stay on the grid so no voxel is clipped.
    let fits = |c: f64, r: f64, s: f64, n: usize| c - r >= 0.0 && c + r <= (n - 1) as f64 * s;
    if !(fits(lesion.center_mm.0, lesion.radii_mm.0, spacing.0, dims.0)
        && fits(lesion.center_mm.1, lesion.radii_mm.1, spacing.1, dims.1)
        && fits(lesion.center_mm.2, lesion.radii_mm.2, spacing.2, dims.2))
    {
        return false;
    }
    let [bx, by, bz] = lesion.voxel_bounds(dims, spacing);
    for z in bz.0..=bz.1 {
        for y in by.0..=by.1 {
            for x in bx.0..=bx.1 {
                let p = voxel_position(x, y, z, spacing);
                if lesion.contains(p) && !brain.contains(p) {
                    return false;
                }
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lesions_gives_empty_truth() {
        let spec = PhantomSpec {
            dims: (16, 16, 16),
            lesion_count_range: (0, 0),
            ..PhantomSpec::default()
        };
        let case = generate_phantom(&spec).unwrap();
        assert_eq!(case.truth().unwrap().foreground_count(), 0);
        assert_eq!(case.modalities().len(), 3);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let small = PhantomSpec {
            dims: (8, 16, 16),
            ..PhantomSpec::default()
        };
        assert!(small.validate().is_err());
        let bad_range = PhantomSpec {
            lesion_radius_range_mm: (3.0, 2.0),
            ..PhantomSpec::default()
        };
        assert!(bad_range.validate().is_err());
    }

    #[test]
    fn impossible_placement_errors() {
        let spec = PhantomSpec {
            dims: (16, 16, 16),
            lesion_count_range: (1, 1),
            lesion_radius_range_mm: (9.0, 9.0),
            ..PhantomSpec::default()
        };
        assert!(matches!(
            generate_phantom(&spec),
            Err(VolumeError::PlacementFailed { lesion: 0 })
        ));
    }

    #[test]
    fn noiseless_intensities_follow_model() {
        let spec = PhantomSpec {
            dims: (24, 24, 24),
            noise_sigma: 0.0,
            lesion_count_range: (2, 2),
            lesion_radius_range_mm: (2.0, 3.0),
            ..PhantomSpec::default()
        };
        let p = generate_phantom_detailed(&spec).unwrap();
        let truth = p.case.truth().unwrap().as_mask().unwrap().to_vec();
        let brain = p.brain.as_mask().unwrap();
        let flair = p.case.modality("flair").unwrap().as_f32().unwrap();
        let t1 = p.case.modality("t1").unwrap().as_f32().unwrap();
        for i in 0..truth.len() {
            if truth[i] == 1 {
                assert_eq!(brain[i], 1);
                assert_eq!(flair[i], LESION_BRIGHT);
                assert_eq!(t1[i], LESION_DARK);
            } else if brain[i] == 1 {
                assert_eq!(flair[i], TISSUE);
            } else {
                assert_eq!(flair[i], BACKGROUND);
            }
        }
    }
}
