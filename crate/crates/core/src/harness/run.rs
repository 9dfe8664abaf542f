//! Plan execution and modality ablations.
//!
//! Layout of a run directory:
//!
//! ```text
//! members/<split>/params.ckpt        best-validation parameters
//! members/<split>/train_log.tsv      per-epoch log
//! members/<split>/train_report.json  written last; its presence marks the member done
//! members/<split>/planes/<case>_<plane>.mvol  cached plane probabilities
//! predictions/<case>.mvol            ensemble mask (primary fusion method)
//! report.tsv, report.json            per-case metrics of the primary method
//! fusion_comparison.tsv/.json        mean metrics for every fusion method
//! ```
//!
//! Rerunning in the same directory skips finished members and cached planes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ExperimentPlan, HarnessError, RunConfig, Split};
use crate::fusion::{ensemble_fuse, mpr_reconstruct, FusionMethod};
use crate::metrics::{evaluate_case, CaseMetrics, MeanMetrics, MetricsReport};
use crate::network::{ModelConfig, ModelParams};
use crate::slicer::SlicePlane;
use crate::training::{load_params, predict_plane, train, TrainConfig, TrainOutputs};
use crate::volio::{read_volume, write_atomic, write_volume, MultiModalCase, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberFailure {
    pub member: String,
    pub group: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: FusionMethod,
    pub mean: MeanMetrics,
    pub sc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    /// Metrics of the primary fusion method.
    pub report: MetricsReport,
    pub comparison: Vec<MethodSummary>,
    pub failures: Vec<MemberFailure>,
}

/// Loads cases on first use.
struct CaseCache<'m> {
    manifest: &'m DatasetManifest,
    cases: BTreeMap<String, MultiModalCase>,
}

impl<'m> CaseCache<'m> {
    fn new(manifest: &'m DatasetManifest) -> Self {
        Self {
            manifest,
            cases: BTreeMap::new(),
        }
    }

    fn get_many(&mut self, ids: &[String]) -> Result<Vec<MultiModalCase>, HarnessError> {
        ids.iter().map(|id| self.get(id).cloned()).collect()
    }

    fn get(&mut self, id: &str) -> Result<&MultiModalCase, HarnessError> {
        if !self.cases.contains_key(id) {
            let c = self.manifest.load_case(id)?;
            self.cases.insert(id.to_string(), c);
        }
        Ok(&self.cases[id])
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn check_modalities(model: &ModelConfig, manifest: &DatasetManifest) -> Result<(), HarnessError> {
    model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    match model.modalities.iter().find(|m| !manifest.modalities.contains(m)) {
        Some(m) => Err(HarnessError::Config(format!("modality {m:?} is not in the dataset manifest"))),
        None => Ok(()),
    }
}

/// Trains one model into `dir`, or loads it when `train_report.json` says a
/// previous run finished.
fn train_or_load(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    split: &Split,
    cache: &mut CaseCache<'_>,
    dir: &Path,
) -> Result<ModelParams<f32>, HarnessError> {
    let ckpt = dir.join("params.ckpt");
    let marker = dir.join("train_report.json");
    if marker.exists() && ckpt.exists() {
        return Ok(load_params(model_cfg, &ckpt)?);
    }
    std::fs::create_dir_all(dir)?;
    let train_cases = cache.get_many(&split.train)?;
    let val_cases = cache.get_many(&split.val)?;
    let outputs = TrainOutputs {
        checkpoint: Some(ckpt),
        log: Some(dir.join("train_log.tsv")),
        on_epoch: None,
    };
    let (mut report, params) = train(model_cfg, &train_cases, &val_cases, train_cfg, outputs)?;
    // Record the checkpoint relative to the member directory so reports do
    // not depend on where the run lives.
    report.checkpoint = Some(PathBuf::from("params.ckpt"));
    write_json(&marker, &report)?;
    Ok(params)
}

/// Plane probability volumes for one case, read from `planes/` when cached.
fn member_planes(
    params: &ModelParams<f32>,
    case: &MultiModalCase,
    eval_batch: usize,
    dir: &Path,
) -> Result<Vec<(SlicePlane, Volume3D)>, HarnessError> {
    let planes_dir = dir.join("planes");
    std::fs::create_dir_all(&planes_dir)?;
    let mut out = Vec::with_capacity(3);
    for plane in SlicePlane::ALL {
        let path = planes_dir.join(format!("{}_{}.mvol", case.case_id(), plane.name()));
        let vol = if path.exists() {
            read_volume(&path)?
        } else {
            let v = predict_plane(params, case, plane, eval_batch)?;
            write_volume(&v, &path)?;
            v
        };
        out.push((plane, vol));
    }
    Ok(out)
}

fn member_configs(cfg: &RunConfig, index: usize) -> (ModelConfig, TrainConfig) {
    let mut model = cfg.model.clone();
    let mut tr = cfg.train.clone();
    model.seed = model.seed.wrapping_add(index as u64);
    tr.seed = tr.seed.wrapping_add(index as u64);
    (model, tr)
}

/// Trains every member of `plan` (member `i` seeded with base seed + `i`),
/// fuses each group's predictions and evaluates them. A failing member is
/// recorded and its group skipped; other groups still run.
pub fn run_plan(
    plan: &ExperimentPlan,
    manifest: &DatasetManifest,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<PlanOutcome, HarnessError> {
    plan.validate(&manifest.ids())?;
    check_modalities(&cfg.model, manifest)?;
    cfg.train.validate()?;
    let conn = cfg.connectivity()?;
    let primary = cfg.eval.fusion;

    let mut cache = CaseCache::new(manifest);
    let mut failures = Vec::new();
    let mut per_method: BTreeMap<FusionMethod, Vec<CaseMetrics>> = BTreeMap::new();
    let pred_dir = dir.join("predictions");
    std::fs::create_dir_all(&pred_dir)?;

    for (group, members) in plan.groups() {
        // case id -> method -> member masks
        let mut masks: BTreeMap<String, BTreeMap<FusionMethod, Vec<Volume3D>>> = BTreeMap::new();
        let mut group_failed = false;
        for &i in &members {
            let split = &plan.splits[i];
            let mdir = dir.join("members").join(&split.name);
            let result = (|| -> Result<(), HarnessError> {
                let (model_cfg, train_cfg) = member_configs(cfg, i);
                let params = train_or_load(&model_cfg, &train_cfg, split, &mut cache, &mdir)?;
                for id in &split.test {
                    let case = cache.get(id)?;
                    let planes = member_planes(&params, case, cfg.train.eval_batch, &mdir)?;
                    for m in FusionMethod::ALL {
                        let mask = mpr_reconstruct(&planes, m)?;
                        masks.entry(id.clone()).or_default().entry(m).or_default().push(mask);
                    }
                }
                Ok(())
            })();
            if let Err(e) = result {
                failures.push(MemberFailure {
                    member: split.name.clone(),
                    group: group.clone(),
                    error: e.to_string(),
                });
                group_failed = true;
            }
        }
        if group_failed {
            continue;
        }
        for (id, by_method) in masks {
            let truth = cache.get(&id)?.truth().cloned();
            for (m, member_masks) in by_method {
                let fused = ensemble_fuse(&member_masks)?;
                if m == primary {
                    write_volume(&fused, pred_dir.join(format!("{id}.mvol")))?;
                }
                if let Some(t) = &truth {
                    per_method.entry(m).or_default().push(evaluate_case(&id, &fused, t, conn)?);
                }
            }
        }
    }

    let mut comparison = Vec::new();
    let mut report = MetricsReport::new(Vec::new());
    for m in FusionMethod::ALL {
        let mut cases = per_method.remove(&m).unwrap_or_default();
        cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let r = MetricsReport::new(cases);
        comparison.push(MethodSummary {
            method: m,
            mean: r.mean.clone(),
            sc: r.sc,
        });
        if m == primary {
            report = r;
        }
    }
    report.write(dir, "report")?;
    write_atomic(&dir.join("fusion_comparison.tsv"), comparison_tsv(&comparison).as_bytes())?;
    write_json(&dir.join("fusion_comparison.json"), &comparison)?;
    write_json(&dir.join("plan.json"), plan)?;
    Ok(PlanOutcome {
        report,
        comparison,
        failures,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

fn mean_cells(m: &MeanMetrics, sc: Option<f64>) -> String {
    [m.dsc, m.ppv, m.ltpr, m.lfpr, m.vd, m.sd_mm, m.hd_mm, sc]
        .into_iter()
        .map(fmt_opt)
        .collect::<Vec<_>>()
        .join("\t")
}

const MEAN_HEADER: &str = "dsc\tppv\tltpr\tlfpr\tvd\tsd_mm\thd_mm\tsc";

fn comparison_tsv(rows: &[MethodSummary]) -> String {
    let mut out = format!("method\t{MEAN_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}", r.method.name(), mean_cells(&r.mean, r.sc));
    }
    out
}

/// A modality configuration: `SB:` is one encoder branch (several
/// modalities are stacked as input channels); `MB:` is one branch per
/// modality.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub multi_branch: bool,
    pub modalities: Vec<String>,
}

impl Variant {
    pub fn parse(text: &str, available: &[String]) -> Result<Self, HarnessError> {
        let bad = |msg: &str| HarnessError::Variant(text.to_string(), msg.to_string());
        let (kind, rest) = text.split_once(':').ok_or_else(|| bad("expected SB:<mods> or MB:<mods>"))?;
        let multi_branch = match kind {
            "SB" => false,
            "MB" => true,
            _ => return Err(bad("kind must be SB or MB")),
        };
        let modalities: Vec<String> = rest
            .split('+')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        if modalities.is_empty() {
            return Err(bad("no modalities"));
        }
        if multi_branch && modalities.len() < 2 {
            return Err(bad("MB needs at least two modalities"));
        }
        for (i, m) in modalities.iter().enumerate() {
            if !available.contains(m) {
                return Err(bad(&format!("modality {m:?} is not in the dataset")));
            }
            if modalities[..i].contains(m) {
                return Err(bad(&format!("modality {m:?} repeated")));
            }
        }
        Ok(Self {
            name: text.to_string(),
            multi_branch,
            modalities,
        })
    }

    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            modalities: self.modalities.clone(),
            stacked: !self.multi_branch && self.modalities.len() > 1,
            ..base.clone()
        }
    }

    /// File-system friendly name.
    pub fn slug(&self) -> String {
        self.name.replace([':', '+'], "_")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean: MeanMetrics,
    pub sc: Option<f64>,
    pub cases: Vec<CaseMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub split: Split,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("variant\t{MEAN_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}", r.variant, mean_cells(&r.mean, r.sc));
        }
        out
    }
}

/// Trains each variant on the same split and seeds, then evaluates the test
/// cases with the configured fusion method. Writes `ablation.tsv` and
/// `ablation.json`; per-variant artifacts go under `variants/<slug>/`.
pub fn run_ablation(
    manifest: &DatasetManifest,
    variants: &[Variant],
    split: &Split,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<AblationReport, HarnessError> {
    if variants.is_empty() {
        return Err(HarnessError::Config("no ablation variants".into()));
    }
    let plan = ExperimentPlan {
        protocol: cfg.crossval.protocol,
        splits: vec![split.clone()],
    };
    plan.validate(&manifest.ids())?;
    cfg.train.validate()?;
    let conn = cfg.connectivity()?;
    let model_cfgs = variants
        .iter()
        .map(|v| {
            let m = v.model_config(&cfg.model);
            check_modalities(&m, manifest)?;
            Ok(m)
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let mut cache = CaseCache::new(manifest);
    let mut rows = Vec::new();
    for (v, model_cfg) in variants.iter().zip(&model_cfgs) {
        let vdir = dir.join("variants").join(v.slug());
        let params = train_or_load(model_cfg, &cfg.train, split, &mut cache, &vdir)?;
        let mut cases = Vec::new();
        for id in &split.test {
            let case = cache.get(id)?;
            let planes = member_planes(&params, case, cfg.train.eval_batch, &vdir)?;
            let mask = mpr_reconstruct(&planes, cfg.eval.fusion)?;
            write_volume(&mask, vdir.join(format!("{id}.mvol")))?;
            if let Some(t) = case.truth() {
                cases.push(evaluate_case(id, &mask, t, conn)?);
            }
        }
        let r = MetricsReport::new(cases);
        rows.push(AblationRow {
            variant: v.name.clone(),
            mean: r.mean,
            sc: r.sc,
            cases: r.cases,
        });
    }
    let report = AblationReport {
        split: split.clone(),
        rows,
    };
    write_atomic(&dir.join("ablation.tsv"), report.to_tsv().as_bytes())?;
    write_json(&dir.join("ablation.json"), &report)?;
    Ok(report)
}
