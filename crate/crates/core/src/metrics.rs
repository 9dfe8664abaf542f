//! Segmentation metrics: overlap (DSC, PPV, VD), lesion-wise detection rates
//! over 3D connected components (LTPR, LFPR), surface distances (ASSD, HD),
//! the composite challenge score (SC) and lesion-volume regression.
//!
//! Conventions:
//! - `dsc(∅, ∅) = 1`.
//! - PPV and LFPR are undefined (`None`) for an empty segmentation; LTPR and VD
//!   for an empty reference; ASSD and HD when either mask is empty.
//! - A surface voxel is a foreground voxel with a background 6-neighbour; the
//!   grid border counts as background.
//! - Lesions are 26-connected unless configured otherwise.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volio::{write_atomic, Dims, Spacing, Volume3D};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("masks do not share a grid")]
    GridMismatch,
    #[error("volume is not a binary mask")]
    NotBinary,
    #[error("reference mask is empty")]
    EmptyReference,
    #[error("unsupported connectivity {0}; use 6, 18 or 26")]
    Connectivity(String),
    #[error("need at least {needed} {what}, got {got}")]
    TooFew { what: &'static str, needed: usize, got: usize },
    #[error("raters must score the same subjects")]
    RaggedRaters,
    #[error("reference volumes have no spread; regression undefined")]
    NoSpread,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn neighbours(self) -> usize {
        match self {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }

    fn offsets(self) -> Vec<(i64, i64, i64)> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let l1 = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => l1 == 1,
                        Connectivity::Eighteen => l1 == 1 || l1 == 2,
                        Connectivity::TwentySix => l1 >= 1,
                    };
                    if keep {
                        out.push((dx, dy, dz));
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<usize> for Connectivity {
    type Error = MetricsError;

    fn try_from(n: usize) -> Result<Self, Self::Error> {
        match n {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(MetricsError::Connectivity(other.to_string())),
        }
    }
}

impl FromStr for Connectivity {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse::<usize>()
            .map_err(|_| MetricsError::Connectivity(s.to_string()))
            .and_then(Connectivity::try_from)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionComponent {
    /// 1-based, in scan order of each component's first voxel.
    pub label: usize,
    /// Linear voxel indices in ascending order.
    pub voxels: Vec<usize>,
    pub volume_mm3: f64,
}

fn mask_of(v: &Volume3D) -> Result<&[u8], MetricsError> {
    v.as_mask().ok_or(MetricsError::NotBinary)
}

fn pair<'a>(seg: &'a Volume3D, reference: &'a Volume3D) -> Result<(&'a [u8], &'a [u8]), MetricsError> {
    if !seg.same_grid(reference) {
        return Err(MetricsError::GridMismatch);
    }
    Ok((mask_of(seg)?, mask_of(reference)?))
}

/// Per-voxel component labels (0 = background) and the component count.
pub fn label_components(mask: &[u8], dims: Dims, connectivity: Connectivity) -> (Vec<u32>, usize) {
    let (nx, ny, nz) = dims;
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; mask.len()];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(v) = stack.pop() {
            let x = (v % nx) as i64;
            let y = ((v / nx) % ny) as i64;
            let z = (v / (nx * ny)) as i64;
            for &(dx, dy, dz) in &offsets {
                let (a, b, c) = (x + dx, y + dy, z + dz);
                if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                    continue;
                }
                let u = a as usize + nx * (b as usize + ny * c as usize);
                if mask[u] != 0 && labels[u] == 0 {
                    labels[u] = count;
                    stack.push(u);
                }
            }
        }
    }
    (labels, count as usize)
}

pub fn connected_components(mask: &Volume3D, connectivity: Connectivity) -> Result<Vec<LesionComponent>, MetricsError> {
    let m = mask_of(mask)?;
    let (labels, count) = label_components(m, mask.dims(), connectivity);
    let mut comps: Vec<LesionComponent> = (1..=count)
        .map(|label| LesionComponent {
            label,
            voxels: Vec::new(),
            volume_mm3: 0.0,
        })
        .collect();
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            comps[l as usize - 1].voxels.push(i);
        }
    }
    let vv = mask.voxel_volume_mm3();
    for c in &mut comps {
        c.volume_mm3 = c.voxels.len() as f64 * vv;
    }
    Ok(comps)
}

/// Voxel-wise confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn confusion(seg: &Volume3D, reference: &Volume3D) -> Result<Confusion, MetricsError> {
    let (s, r) = pair(seg, reference)?;
    let mut c = Confusion::default();
    for (&a, &b) in s.iter().zip(r) {
        match (a != 0, b != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2TP / (FN + FP + 2TP)`; 1 when both masks are empty.
pub fn dsc(seg: &Volume3D, reference: &Volume3D) -> Result<f64, MetricsError> {
    let c = confusion(seg, reference)?;
    let denom = c.fn_ + c.fp + 2 * c.tp;
    Ok(if denom == 0 { 1.0 } else { 2.0 * c.tp as f64 / denom as f64 })
}

/// `TP / (TP + FP)`; `None` for an empty segmentation.
pub fn ppv(seg: &Volume3D, reference: &Volume3D) -> Result<Option<f64>, MetricsError> {
    let c = confusion(seg, reference)?;
    let denom = c.tp + c.fp;
    Ok((denom > 0).then(|| c.tp as f64 / denom as f64))
}

/// Fraction of components of `a` touching foreground of `b` by at least one voxel.
fn overlap_fraction(a: &[u8], b: &[u8], dims: Dims, conn: Connectivity) -> Option<f64> {
    let (labels, count) = label_components(a, dims, conn);
    if count == 0 {
        return None;
    }
    let mut hit = vec![false; count];
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 && b[i] != 0 {
            hit[l as usize - 1] = true;
        }
    }
    Some(hit.iter().filter(|&&h| h).count() as f64 / count as f64)
}

/// Reference lesions overlapped by the segmentation / reference lesion count.
pub fn ltpr(seg: &Volume3D, reference: &Volume3D, conn: Connectivity) -> Result<Option<f64>, MetricsError> {
    let (s, r) = pair(seg, reference)?;
    Ok(overlap_fraction(r, s, reference.dims(), conn))
}

/// Segmented lesions not touching the reference / segmented lesion count.
pub fn lfpr(seg: &Volume3D, reference: &Volume3D, conn: Connectivity) -> Result<Option<f64>, MetricsError> {
    let (s, r) = pair(seg, reference)?;
    Ok(overlap_fraction(s, r, seg.dims(), conn).map(|hit| 1.0 - hit))
}

/// `|V_seg - V_ref| / V_ref` over foreground voxel counts.
pub fn volume_difference(seg: &Volume3D, reference: &Volume3D) -> Result<f64, MetricsError> {
    let (s, r) = pair(seg, reference)?;
    let vs = s.iter().filter(|&&v| v != 0).count() as f64;
    let vr = r.iter().filter(|&&v| v != 0).count() as f64;
    if vr == 0.0 {
        return Err(MetricsError::EmptyReference);
    }
    Ok((vs - vr).abs() / vr)
}

/// Linear indices of foreground voxels with a background 6-neighbour.
pub fn surface_voxels(mask: &[u8], dims: Dims) -> Vec<usize> {
    let (nx, ny, nz) = dims;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if mask[i] == 0 {
                    continue;
                }
                let border = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                if border
                    || mask[i - 1] == 0
                    || mask[i + 1] == 0
                    || mask[i - nx] == 0
                    || mask[i + nx] == 0
                    || mask[i - nx * ny] == 0
                    || mask[i + nx * ny] == 0
                {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// One pass of the lower-envelope squared distance transform along a line:
/// `out[q] = min_p (s (q - p))^2 + f[p]`.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let s2 = s * s;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        let qf = q as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let pf = p as f64;
                    let inter = ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
                    if inter <= *z.last().expect("paired with v") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(inter);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let d = s * (qf - v[k] as f64);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest voxel of `set`.
pub fn squared_distance_map(set: &[usize], dims: Dims, spacing: Spacing) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    let mut d = vec![f64::INFINITY; nx * ny * nz];
    for &i in set {
        d[i] = 0.0;
    }
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let longest = nx.max(ny).max(nz);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let axes = [(nx, 1, spacing.0), (ny, nx, spacing.1), (nz, nx * ny, spacing.2)];
    for (len, stride, s) in axes {
        let starts: Vec<usize> = (0..d.len()).filter(|&i| (i / stride) % len == 0).collect();
        for start in starts {
            for k in 0..len {
                line[k] = d[start + k * stride];
            }
            edt_1d(&line[..len], s, &mut out[..len], &mut v, &mut z);
            for k in 0..len {
                d[start + k * stride] = out[k];
            }
        }
    }
    d
}

/// Distances from each surface voxel of `a` to the surface of `b`, then of `b`
/// to `a`. `None` when either mask is empty.
fn surface_distances(seg: &Volume3D, reference: &Volume3D) -> Result<Option<(Vec<f64>, Vec<f64>)>, MetricsError> {
    let (s, r) = pair(seg, reference)?;
    let dims = seg.dims();
    let sp = seg.spacing();
    let ss = surface_voxels(s, dims);
    let rs = surface_voxels(r, dims);
    if ss.is_empty() || rs.is_empty() {
        return Ok(None);
    }
    let to_r = squared_distance_map(&rs, dims, sp);
    let to_s = squared_distance_map(&ss, dims, sp);
    let a = ss.iter().map(|&i| to_r[i].sqrt()).collect();
    let b = rs.iter().map(|&i| to_s[i].sqrt()).collect();
    Ok(Some((a, b)))
}

/// Average symmetric surface distance in mm.
pub fn assd(seg: &Volume3D, reference: &Volume3D) -> Result<Option<f64>, MetricsError> {
    Ok(surface_distances(seg, reference)?.map(|(a, b)| {
        (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (a.len() + b.len()) as f64
    }))
}

/// Symmetric Hausdorff distance between the surfaces in mm.
pub fn hausdorff(seg: &Volume3D, reference: &Volume3D) -> Result<Option<f64>, MetricsError> {
    Ok(surface_distances(seg, reference)?.map(|(a, b)| a.iter().chain(&b).fold(0.0f64, |m, &v| m.max(v))))
}

/// Metrics of one segmented case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dsc: f64,
    pub ppv: Option<f64>,
    pub ltpr: Option<f64>,
    pub lfpr: Option<f64>,
    pub vd: Option<f64>,
    pub sd_mm: Option<f64>,
    pub hd_mm: Option<f64>,
    pub seg_volume_mm3: f64,
    pub ref_volume_mm3: f64,
}

pub fn evaluate_case(
    case_id: &str,
    seg: &Volume3D,
    reference: &Volume3D,
    conn: Connectivity,
) -> Result<CaseMetrics, MetricsError> {
    let c = confusion(seg, reference)?;
    let vv = seg.voxel_volume_mm3();
    let vd = match volume_difference(seg, reference) {
        Ok(v) => Some(v),
        Err(MetricsError::EmptyReference) => None,
        Err(e) => return Err(e),
    };
    let dist = surface_distances(seg, reference)?;
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        dsc: dsc(seg, reference)?,
        ppv: ppv(seg, reference)?,
        ltpr: ltpr(seg, reference, conn)?,
        lfpr: lfpr(seg, reference, conn)?,
        vd,
        sd_mm: dist
            .as_ref()
            .map(|(a, b)| (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (a.len() + b.len()) as f64),
        hd_mm: dist.map(|(a, b)| a.iter().chain(&b).fold(0.0f64, |m, &v| m.max(v))),
        seg_volume_mm3: (c.tp + c.fp) as f64 * vv,
        ref_volume_mm3: (c.tp + c.fn_) as f64 * vv,
    })
}

/// Pearson correlation; 0 when either side has no spread.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Composite score on a 0–100 scale:
/// `mean(DSC/8 + PPV/8 + (1 - LFPR)/4 + LTPR/4 + Cor/4)` over raters and
/// subjects, with `Cor` the per-rater Pearson correlation of segmented and
/// reference volumes across subjects. Undefined components score their worst
/// value (PPV 0, LTPR 0, LFPR 1).
pub fn overall_score(raters: &[Vec<CaseMetrics>]) -> Result<f64, MetricsError> {
    let subjects = raters.first().map_or(0, Vec::len);
    if subjects < 2 {
        return Err(MetricsError::TooFew {
            what: "subjects",
            needed: 2,
            got: subjects,
        });
    }
    if raters.iter().any(|r| r.len() != subjects) {
        return Err(MetricsError::RaggedRaters);
    }
    let mut total = 0.0;
    for rater in raters {
        let seg: Vec<f64> = rater.iter().map(|c| c.seg_volume_mm3).collect();
        let reference: Vec<f64> = rater.iter().map(|c| c.ref_volume_mm3).collect();
        let cor = pearson(&seg, &reference);
        for c in rater {
            total += c.dsc / 8.0
                + c.ppv.unwrap_or(0.0) / 8.0
                + (1.0 - c.lfpr.unwrap_or(1.0)) / 4.0
                + c.ltpr.unwrap_or(0.0) / 4.0
                + cor / 4.0;
        }
    }
    Ok(100.0 * total / (raters.len() * subjects) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeRegression {
    pub slope: f64,
    pub intercept: f64,
    pub pearson_r: f64,
    /// `(reference mm³, segmented mm³)` per matched lesion.
    pub pairs: Vec<(f64, f64)>,
}

/// Pairs each reference lesion with the segmented lesion of largest overlap
/// (lowest label on ties; unmatched lesions are dropped) and fits
/// `seg = slope * ref + intercept` by least squares.
pub fn lesion_volume_regression(
    cases: &[(&Volume3D, &Volume3D)],
    conn: Connectivity,
) -> Result<VolumeRegression, MetricsError> {
    let mut pairs = Vec::new();
    for (seg, reference) in cases {
        let (s, _) = pair(seg, reference)?;
        let (seg_labels, seg_count) = label_components(s, seg.dims(), conn);
        let vv = seg.voxel_volume_mm3();
        let mut seg_sizes = vec![0usize; seg_count + 1];
        for &l in &seg_labels {
            seg_sizes[l as usize] += 1;
        }
        for comp in connected_components(reference, conn)? {
            let mut overlap = vec![0usize; seg_count + 1];
            for &i in &comp.voxels {
                overlap[seg_labels[i] as usize] += 1;
            }
            let best = (1..=seg_count).fold(None, |best: Option<usize>, l| match best {
                Some(b) if overlap[b] >= overlap[l] => Some(b),
                _ if overlap[l] > 0 => Some(l),
                b => b,
            });
            if let Some(l) = best {
                pairs.push((comp.volume_mm3, seg_sizes[l] as f64 * vv));
            }
        }
    }
    if pairs.len() < 2 {
        return Err(MetricsError::TooFew {
            what: "matched lesions",
            needed: 2,
            got: pairs.len(),
        });
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(MetricsError::NoSpread);
    }
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    Ok(VolumeRegression {
        slope,
        intercept: my - slope * mx,
        pearson_r: pearson(&x, &y),
        pairs,
    })
}

/// Per-case metrics plus column means over defined values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub mean: MeanMetrics,
    pub sc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub dsc: Option<f64>,
    pub ppv: Option<f64>,
    pub ltpr: Option<f64>,
    pub lfpr: Option<f64>,
    pub vd: Option<f64>,
    pub sd_mm: Option<f64>,
    pub hd_mm: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricsReport {
    /// SC is filled in when there are at least two cases.
    pub fn new(cases: Vec<CaseMetrics>) -> Self {
        let mean = MeanMetrics {
            dsc: mean_of(cases.iter().map(|c| Some(c.dsc))),
            ppv: mean_of(cases.iter().map(|c| c.ppv)),
            ltpr: mean_of(cases.iter().map(|c| c.ltpr)),
            lfpr: mean_of(cases.iter().map(|c| c.lfpr)),
            vd: mean_of(cases.iter().map(|c| c.vd)),
            sd_mm: mean_of(cases.iter().map(|c| c.sd_mm)),
            hd_mm: mean_of(cases.iter().map(|c| c.hd_mm)),
        };
        let sc = overall_score(std::slice::from_ref(&cases)).ok();
        Self { cases, mean, sc }
    }

    pub const COLUMNS: [&'static str; 10] = [
        "case_id",
        "dsc",
        "ppv",
        "ltpr",
        "lfpr",
        "vd",
        "sd_mm",
        "hd_mm",
        "seg_volume_mm3",
        "ref_volume_mm3",
    ];

    /// Tab-separated table: a header, one row per case, then a `mean` row.
    /// Undefined values print as `NA`.
    pub fn to_tsv(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        let mut out = Self::COLUMNS.join("\t");
        out.push('\n');
        for c in &self.cases {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.case_id,
                f(Some(c.dsc)),
                f(c.ppv),
                f(c.ltpr),
                f(c.lfpr),
                f(c.vd),
                f(c.sd_mm),
                f(c.hd_mm),
                f(Some(c.seg_volume_mm3)),
                f(Some(c.ref_volume_mm3)),
            );
        }
        let m = &self.mean;
        let _ = writeln!(
            out,
            "mean\t{}\t{}\t{}\t{}\t{}\t{}\t{}\tNA\tNA",
            f(m.dsc),
            f(m.ppv),
            f(m.ltpr),
            f(m.lfpr),
            f(m.vd),
            f(m.sd_mm),
            f(m.hd_mm),
        );
        out
    }

    /// Writes `<stem>.tsv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), MetricsError> {
        write_atomic(&dir.join(format!("{stem}.tsv")), self.to_tsv().as_bytes())?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        write_atomic(&dir.join(format!("{stem}.json")), json.as_bytes())?;
        Ok(())
    }
}
