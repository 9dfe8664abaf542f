//! Browser demo: phantom slice viewer, label-fusion explorer and mask-metrics
//! explorer. Everything runs on one in-memory phantom case.

use mbseg::fusion::{average_fusion, majority_vote, staple};
use mbseg::metrics::{evaluate_case, CaseMetrics, Connectivity};
use mbseg::slicer::SlicePlane;
use mbseg::volio::{generate_phantom, MultiModalCase, PhantomSpec, Volume3D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Clone, Debug, Serialize)]
pub struct MethodScore {
    pub method: String,
    pub dsc: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FusionSummary {
    pub rater_dsc: Vec<f64>,
    pub methods: Vec<MethodScore>,
    pub staple_sensitivity: Vec<f64>,
    pub staple_specificity: Vec<f64>,
    pub staple_iterations: usize,
}

/// A phantom case plus the derived views the page shows.
#[wasm_bindgen]
pub struct Demo {
    case: MultiModalCase,
}

impl Demo {
    pub fn build(size: usize, seed: u64) -> Result<Self, String> {
        let spec = PhantomSpec {
            dims: (size, size, size),
            seed,
            ..PhantomSpec::default()
        };
        let case = generate_phantom(&spec).map_err(|e| e.to_string())?;
        Ok(Self { case })
    }

    pub fn case(&self) -> &MultiModalCase {
        &self.case
    }

    fn truth(&self) -> &Volume3D {
        self.case.truth().expect("phantoms carry truth")
    }

    /// Grey-scale RGBA of one slice with truth voxels tinted red when
    /// `overlay` is set. Returns `(rows, cols, pixels)`.
    pub fn render(&self, modality: &str, plane: SlicePlane, index: usize, overlay: bool) -> Result<(usize, usize, Vec<u8>), String> {
        let vol = self.case.modality(modality).ok_or_else(|| format!("unknown modality {modality:?}"))?;
        let dims = vol.dims();
        if index >= plane.slice_count(dims) {
            return Err(format!("slice {index} out of range for {plane}"));
        }
        let (rows, cols) = plane.slice_dims(dims);
        let vals: Vec<f32> = (0..rows * cols)
            .map(|i| {
                let (x, y, z) = plane.voxel(index, i / cols, i % cols);
                vol.get(x, y, z)
            })
            .collect();
        let (lo, hi) = vals.iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let span = (hi - lo).max(1e-6);
        let truth = self.truth();
        let mut out = Vec::with_capacity(rows * cols * 4);
        for (i, v) in vals.iter().enumerate() {
            let g = (255.0 * (v - lo) / span).round() as u8;
            let (x, y, z) = plane.voxel(index, i / cols, i % cols);
            if overlay && truth.get(x, y, z) > 0.5 {
                out.extend_from_slice(&[255, g / 2, g / 2, 255]);
            } else {
                out.extend_from_slice(&[g, g, g, 255]);
            }
        }
        Ok((rows, cols, out))
    }

    /// Simulated raters: each voxel of the truth is kept with probability
    /// `sensitivity`, and each background voxel flips on with probability
    /// `1 - specificity`. One rate pair per rater.
    pub fn raters(&self, rates: &[(f64, f64)], seed: u64) -> Vec<Volume3D> {
        let truth = self.truth();
        let mask = truth.as_mask().expect("truth is a mask");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rates
            .iter()
            .map(|&(p, q)| {
                let data = mask
                    .iter()
                    .map(|&t| u8::from(if t > 0 { rng.random_bool(p) } else { !rng.random_bool(q) }))
                    .collect();
                Volume3D::from_mask(truth.dims(), truth.spacing(), data).expect("same grid")
            })
            .collect()
    }

    pub fn fusion(&self, rates: &[(f64, f64)], seed: u64) -> Result<FusionSummary, String> {
        let truth = self.truth();
        let raters = self.raters(rates, seed);
        let dsc = |v: &Volume3D| mbseg::metrics::dsc(v, truth).map_err(|e| e.to_string());
        let st = staple(&raters, 100, 1e-7).map_err(|e| e.to_string())?;
        let methods = [
            ("majority", majority_vote(&raters).map_err(|e| e.to_string())?),
            ("average", average_fusion(&raters, 0.5).map_err(|e| e.to_string())?),
            ("staple", st.consensus.clone()),
        ];
        Ok(FusionSummary {
            rater_dsc: raters.iter().map(dsc).collect::<Result<_, _>>()?,
            methods: methods
                .iter()
                .map(|(m, v)| Ok(MethodScore { method: m.to_string(), dsc: dsc(v)? }))
                .collect::<Result<_, String>>()?,
            staple_sensitivity: st.sensitivity,
            staple_specificity: st.specificity,
            staple_iterations: st.iterations,
        })
    }

    /// Metrics of the truth shifted by `(dx, dy, dz)` voxels and grown
    /// (positive) or shrunk (negative) by `grow` 6-connected steps.
    pub fn metrics(&self, shift: (i64, i64, i64), grow: i64, connectivity: Connectivity) -> Result<CaseMetrics, String> {
        let truth = self.truth();
        let mut seg = shifted(truth, shift);
        for _ in 0..grow.unsigned_abs() {
            seg = morph(&seg, grow > 0);
        }
        evaluate_case(self.case.case_id(), &seg, truth, connectivity).map_err(|e| e.to_string())
    }
}

fn shifted(v: &Volume3D, (dx, dy, dz): (i64, i64, i64)) -> Volume3D {
    let (nx, ny, nz) = v.dims();
    let src = v.as_mask().expect("mask");
    let mut out = vec![0u8; src.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (sx, sy, sz) = (x as i64 - dx, y as i64 - dy, z as i64 - dz);
                if (0..nx as i64).contains(&sx) && (0..ny as i64).contains(&sy) && (0..nz as i64).contains(&sz) {
                    out[v.index(x, y, z)] = src[v.index(sx as usize, sy as usize, sz as usize)];
                }
            }
        }
    }
    Volume3D::from_mask(v.dims(), v.spacing(), out).expect("same grid")
}

/// One 6-connected dilation (`grow`) or erosion step.
fn morph(v: &Volume3D, grow: bool) -> Volume3D {
    let (nx, ny, nz) = v.dims();
    let src = v.as_mask().expect("mask");
    let at = |x: i64, y: i64, z: i64| {
        if (0..nx as i64).contains(&x) && (0..ny as i64).contains(&y) && (0..nz as i64).contains(&z) {
            src[v.index(x as usize, y as usize, z as usize)] > 0
        } else {
            false
        }
    };
    let mut out = vec![0u8; src.len()];
    for z in 0..nz as i64 {
        for y in 0..ny as i64 {
            for x in 0..nx as i64 {
                let n = [(0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                    .iter()
                    .map(|&(a, b, c)| at(x + a, y + b, z + c));
                let on = if grow { n.into_iter().any(|b| b) } else { n.into_iter().all(|b| b) };
                out[v.index(x as usize, y as usize, z as usize)] = u8::from(on);
            }
        }
    }
    Volume3D::from_mask(v.dims(), v.spacing(), out).expect("same grid")
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, seed: u64) -> Result<Demo, JsError> {
        Demo::build(size, seed).map_err(js_err)
    }

    pub fn size(&self) -> usize {
        self.case.dims().0
    }

    pub fn modalities(&self) -> Vec<String> {
        self.case.modalities().keys().cloned().collect()
    }

    /// RGBA pixels of a square slice (`size * size * 4` bytes).
    pub fn slice_rgba(&self, modality: &str, plane: &str, index: usize, overlay: bool) -> Result<Vec<u8>, JsError> {
        let plane: SlicePlane = plane.parse().map_err(js_err)?;
        self.render(modality, plane, index, overlay).map(|r| r.2).map_err(js_err)
    }

    /// Fusion of `n` raters sharing one sensitivity/specificity, as JSON.
    pub fn fusion_json(&self, n: usize, sensitivity: f64, specificity: f64, seed: u64) -> Result<String, JsError> {
        let rates = vec![(sensitivity.clamp(0.0, 1.0), specificity.clamp(0.0, 1.0)); n];
        let s = self.fusion(&rates, seed).map_err(js_err)?;
        serde_json::to_string(&s).map_err(js_err)
    }

    /// Case metrics of a perturbed truth, as JSON.
    pub fn metrics_json(&self, dx: i32, dy: i32, dz: i32, grow: i32, connectivity: usize) -> Result<String, JsError> {
        let conn = Connectivity::try_from(connectivity).map_err(js_err)?;
        let m = self
            .metrics((dx.into(), dy.into(), dz.into()), grow.into(), conn)
            .map_err(js_err)?;
        serde_json::to_string(&m).map_err(js_err)
    }
}
