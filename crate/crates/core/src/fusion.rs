//! Label fusion: multi-plane reconstruction, majority voting, probability
//! averaging, STAPLE, and cross-model ensembling.
//!
//! Ties never vote for foreground: a voxel is set only by a strict majority
//! (`votes > N / 2`) or a mean strictly above the threshold.
//!
//! For cross-fold ensembles, each member first fuses its own three planes into
//! a binary volume ([`mpr_reconstruct`]); members are then combined with
//! [`ensemble_fuse`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::slicer::SlicePlane;
use crate::volio::{Volume3D, VoxelData};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("nothing to fuse")]
    Empty,
    #[error("input {0} does not share the grid of input 0")]
    GridMismatch(usize),
    #[error("input {0} is not a binary mask")]
    NotBinary(usize),
    #[error("STAPLE needs at least two inputs")]
    TooFewRaters,
    #[error("STAPLE is undefined when every input is {0}")]
    Degenerate(&'static str),
    #[error("missing {0} plane")]
    MissingPlane(SlicePlane),
    #[error("unknown fusion method {0:?}")]
    UnknownMethod(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    #[default]
    #[serde(rename = "majority")]
    MajorityVote,
    #[serde(rename = "average")]
    Averaging,
    Staple,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 3] = [FusionMethod::MajorityVote, FusionMethod::Averaging, FusionMethod::Staple];

    pub fn name(self) -> &'static str {
        match self {
            FusionMethod::MajorityVote => "majority",
            FusionMethod::Averaging => "average",
            FusionMethod::Staple => "staple",
        }
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMethod {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "majority" | "majority-vote" | "vote" => Ok(FusionMethod::MajorityVote),
            "average" | "averaging" | "mean" => Ok(FusionMethod::Averaging),
            "staple" => Ok(FusionMethod::Staple),
            other => Err(FusionError::UnknownMethod(other.to_string())),
        }
    }
}

fn check_grid(vols: &[Volume3D]) -> Result<&Volume3D, FusionError> {
    let first = vols.first().ok_or(FusionError::Empty)?;
    if let Some(i) = vols.iter().position(|v| !v.same_grid(first)) {
        return Err(FusionError::GridMismatch(i));
    }
    Ok(first)
}

fn masks(vols: &[Volume3D]) -> Result<Vec<&[u8]>, FusionError> {
    vols.iter()
        .enumerate()
        .map(|(i, v)| v.as_mask().ok_or(FusionError::NotBinary(i)))
        .collect()
}

fn mask_like(like: &Volume3D, data: Vec<u8>) -> Volume3D {
    Volume3D::from_parts_unchecked(like.dims(), like.spacing(), VoxelData::U8(data))
}

/// Voxel is foreground iff more than half of the inputs mark it.
pub fn majority_vote(vols: &[Volume3D]) -> Result<Volume3D, FusionError> {
    let first = check_grid(vols)?;
    let ms = masks(vols)?;
    let n = ms.len();
    let out = (0..first.len())
        .map(|i| {
            let votes = ms.iter().filter(|m| m[i] != 0).count();
            u8::from(2 * votes > n)
        })
        .collect();
    Ok(mask_like(first, out))
}

/// Voxel is foreground iff the mean input value is strictly above `tau`.
/// Accepts probability maps or masks.
pub fn average_fusion(vols: &[Volume3D], tau: f32) -> Result<Volume3D, FusionError> {
    let first = check_grid(vols)?;
    let n = vols.len() as f64;
    let out = (0..first.len())
        .map(|i| {
            let mean = vols.iter().map(|v| v.value(i) as f64).sum::<f64>() / n;
            u8::from(mean > tau as f64)
        })
        .collect();
    Ok(mask_like(first, out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StapleResult {
    pub consensus: Volume3D,
    /// Posterior foreground probability per voxel.
    pub weights: Vec<f64>,
    pub sensitivity: Vec<f64>,
    pub specificity: Vec<f64>,
    /// Fixed foreground prior: mean foreground fraction over inputs.
    pub prior: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Expectation–maximization estimate of a consensus mask and per-input
/// sensitivity/specificity. Starts from `p = q = 0.99` with a fixed prior.
///
/// Voxels sharing a decision pattern share a posterior, so the EM runs over
/// the distinct patterns weighted by their counts.
pub fn staple(vols: &[Volume3D], max_iter: usize, tol: f64) -> Result<StapleResult, FusionError> {
    let first = check_grid(vols)?;
    if vols.len() < 2 {
        return Err(FusionError::TooFewRaters);
    }
    let ms = masks(vols)?;
    let n = ms.len();
    let total = first.len();
    let fg: usize = ms.iter().map(|m| m.iter().filter(|&&v| v != 0).count()).sum();
    if fg == 0 {
        return Err(FusionError::Degenerate("empty"));
    }
    if fg == n * total {
        return Err(FusionError::Degenerate("full"));
    }
    let prior = fg as f64 / (n * total) as f64;

    let mut pattern_of = Vec::with_capacity(total);
    let mut patterns: BTreeMap<Vec<bool>, usize> = BTreeMap::new();
    for i in 0..total {
        let key: Vec<bool> = ms.iter().map(|m| m[i] != 0).collect();
        let next = patterns.len();
        let id = *patterns.entry(key).or_insert(next);
        pattern_of.push(id);
    }
    let mut decisions = vec![Vec::new(); patterns.len()];
    for (key, &id) in &patterns {
        decisions[id] = key.clone();
    }
    let mut counts = vec![0usize; decisions.len()];
    for &id in &pattern_of {
        counts[id] += 1;
    }

    let mut p = vec![0.99; n];
    let mut q = vec![0.99; n];
    let mut w = vec![0.0; decisions.len()];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        for (k, d) in decisions.iter().enumerate() {
            let mut a = prior;
            let mut b = 1.0 - prior;
            for j in 0..n {
                if d[j] {
                    a *= p[j];
                    b *= 1.0 - q[j];
                } else {
                    a *= 1.0 - p[j];
                    b *= q[j];
                }
            }
            w[k] = if a + b > 0.0 { a / (a + b) } else { prior };
        }
        let mut change: f64 = 0.0;
        for j in 0..n {
            let (mut tp, mut pos, mut tn, mut neg) = (0.0, 0.0, 0.0, 0.0);
            for (k, d) in decisions.iter().enumerate() {
                let c = counts[k] as f64;
                pos += c * w[k];
                neg += c * (1.0 - w[k]);
                if d[j] {
                    tp += c * w[k];
                } else {
                    tn += c * (1.0 - w[k]);
                }
            }
            let np = if pos > 0.0 { tp / pos } else { p[j] };
            let nq = if neg > 0.0 { tn / neg } else { q[j] };
            change = change.max((np - p[j]).abs()).max((nq - q[j]).abs());
            p[j] = np;
            q[j] = nq;
        }
        if change < tol {
            converged = true;
            break;
        }
    }
    let weights: Vec<f64> = pattern_of.iter().map(|&k| w[k]).collect();
    let consensus = mask_like(first, weights.iter().map(|&v| u8::from(v > 0.5)).collect());
    Ok(StapleResult {
        consensus,
        weights,
        sensitivity: p,
        specificity: q,
        prior,
        iterations,
        converged,
    })
}

pub const STAPLE_MAX_ITER: usize = 100;
pub const STAPLE_TOL: f64 = 1e-6;

/// Fuses binary masks with any method. STAPLE on unanimous inputs (all empty
/// or all full) returns that common mask.
pub fn fuse_masks(vols: &[Volume3D], method: FusionMethod) -> Result<Volume3D, FusionError> {
    match method {
        FusionMethod::MajorityVote => majority_vote(vols),
        FusionMethod::Averaging => average_fusion(vols, 0.5),
        FusionMethod::Staple => match staple(vols, STAPLE_MAX_ITER, STAPLE_TOL) {
            Ok(r) => Ok(r.consensus),
            Err(FusionError::Degenerate(_)) => Ok(vols[0].clone()),
            Err(e) => Err(e),
        },
    }
}

/// Combines the three plane-assembled probability volumes into one mask.
/// Majority vote and STAPLE see the maps binarized at 0.5; averaging sees the
/// soft values.
pub fn mpr_reconstruct(plane_probs: &[(SlicePlane, Volume3D)], method: FusionMethod) -> Result<Volume3D, FusionError> {
    let mut ordered = Vec::with_capacity(3);
    for plane in SlicePlane::ALL {
        let v = plane_probs
            .iter()
            .find(|(p, _)| *p == plane)
            .map(|(_, v)| v.clone())
            .ok_or(FusionError::MissingPlane(plane))?;
        ordered.push(v);
    }
    check_grid(&ordered)?;
    match method {
        FusionMethod::Averaging => average_fusion(&ordered, 0.5),
        _ => {
            let bin: Vec<Volume3D> = ordered.iter().map(|v| v.binarize(0.5)).collect();
            fuse_masks(&bin, method)
        }
    }
}

/// Majority vote over member models' binary predictions.
pub fn ensemble_fuse(members: &[Volume3D]) -> Result<Volume3D, FusionError> {
    majority_vote(members)
}
