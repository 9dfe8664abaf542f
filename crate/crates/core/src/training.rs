//! Soft Dice training with Adam on a step-decayed learning rate, validation by
//! 3D reconstruction, and best-epoch retention.
//!
//! One step is one optimizer update on one mini-batch drawn from the pooled
//! lesion-bearing slices of all three planes. Validation runs every
//! `val_every` epochs (and after the last) on every slice of the validation
//! cases; the kept model is the first epoch reaching the highest mean 3D DSC.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step_store, AdamConfig, AdamState, AutodiffError, Graph, Tensor};
use crate::fusion::{mpr_reconstruct, FusionError, FusionMethod};
use crate::metrics::{dsc, MetricsError};
use crate::network::{
    batch_inputs, build_model, forward_graph, lesion_maps, update_running_stats, ModelConfig, ModelParams, Mode,
    NetworkError,
};
use crate::slicer::{assemble_plane_volume, extract_slices, select_training_slices, SlicePlane, SlicerError};
use crate::volio::{write_atomic, MultiModalCase, Volume3D};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("shapes differ: {0} vs {1} elements")]
    ShapeMismatch(usize, usize),
    #[error("no lesion-bearing training slices")]
    EmptyPool,
    #[error("no validation cases")]
    NoValidation,
    #[error("case {0:?} is in both the training and validation sets")]
    Overlap(String),
    #[error("case {0:?} has no ground truth")]
    MissingTruth(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Slicer(#[from] SlicerError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplicative decay applied every `decay_steps` optimizer steps.
    pub decay: f64,
    pub decay_steps: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    pub val_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Plane fusion used for validation and prediction.
    pub fusion: FusionMethod,
    /// Slices per forward pass at inference.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            decay: 0.95,
            decay_steps: 400,
            batch_size: 15,
            max_epochs: 1000,
            seed: 0,
            val_every: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            fusion: FusionMethod::MajorityVote,
            eval_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay must be in (0, 1]");
        }
        if self.decay_steps == 0 || self.batch_size == 0 || self.val_every == 0 || self.eval_batch == 0 {
            return bad("decay_steps, batch_size, val_every and eval_batch must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// `lr0 * decay^floor(step / decay_steps)`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay.powi((step / cfg.decay_steps) as i32)
}

/// `1 - 2 Σ g p / (Σ g² + Σ p²)`, or 0 when both sums vanish.
pub fn dice_loss(p: &[f64], g: &[f64]) -> Result<f64, TrainError> {
    if p.len() != g.len() {
        return Err(TrainError::ShapeMismatch(p.len(), g.len()));
    }
    let (mut inter, mut gg, mut pp) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(g) {
        inter += a * b;
        gg += b * b;
        pp += a * a;
    }
    let denom = gg + pp;
    Ok(if denom == 0.0 { 0.0 } else { 1.0 - 2.0 * inter / denom })
}

/// Shuffled index batches for one epoch; the last batch may be short.
pub fn make_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    epoch_batches(n, batch_size, seed, 0)
}

fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Rate used by the epoch's last step.
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_dsc: Option<f64>,
    pub train_slices: usize,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub const LOG_HEADER: &'static str = "epoch\tstep\tlr\tloss\tval_dsc";

    /// Tab-separated log, one row per epoch; `NA` where validation was skipped.
    pub fn log_tsv(&self) -> String {
        let mut out = format!("{}\n", Self::LOG_HEADER);
        for e in &self.epochs {
            let v = e.val_dsc.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(out, "{}\t{}\t{:e}\t{:.6}\t{}", e.epoch, e.step, e.lr, e.loss, v);
        }
        out
    }
}

/// Where training writes its artifacts, plus an optional per-epoch callback.
#[derive(Default)]
pub struct TrainOutputs<'a> {
    /// Best-epoch parameters, rewritten atomically on every improvement.
    pub checkpoint: Option<PathBuf>,
    /// Metrics log, rewritten after every epoch.
    pub log: Option<PathBuf>,
    pub on_epoch: Option<Box<dyn FnMut(&EpochRecord) + 'a>>,
}

fn check_truth(cases: &[MultiModalCase]) -> Result<(), TrainError> {
    match cases.iter().find(|c| c.truth().is_none()) {
        Some(c) => Err(TrainError::MissingTruth(c.case_id().to_string())),
        None => Ok(()),
    }
}

/// Trains from a fresh initialization of `model_cfg`; returns the report and
/// the parameters of the best validation epoch.
pub fn train(
    model_cfg: &ModelConfig,
    train_cases: &[MultiModalCase],
    val_cases: &[MultiModalCase],
    cfg: &TrainConfig,
    mut outputs: TrainOutputs<'_>,
) -> Result<(TrainReport, ModelParams<f32>), TrainError> {
    cfg.validate()?;
    if val_cases.is_empty() {
        return Err(TrainError::NoValidation);
    }
    if let Some(c) = val_cases
        .iter()
        .find(|v| train_cases.iter().any(|t| t.case_id() == v.case_id()))
    {
        return Err(TrainError::Overlap(c.case_id().to_string()));
    }
    check_truth(train_cases)?;
    check_truth(val_cases)?;

    let size = model_cfg.input_size;
    let mut pool = Vec::new();
    for case in train_cases {
        for plane in SlicePlane::ALL {
            pool.extend(select_training_slices(extract_slices(case, plane, size)?)?);
        }
    }
    if pool.is_empty() {
        return Err(TrainError::EmptyPool);
    }

    let mut params = build_model(model_cfg)?;
    let mut best = params.clone();
    let mut adam = AdamState::new(cfg.adam());
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_dsc: None,
        train_slices: pool.len(),
        checkpoint: outputs.checkpoint.clone(),
    };
    let mut step = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        let batches = epoch_batches(pool.len(), cfg.batch_size, cfg.seed, epoch);
        let mut lr = lr_at(step, cfg);
        for batch in &batches {
            let samples: Vec<_> = batch.iter().map(|&i| &pool[i]).collect();
            let xs = batch_inputs::<f32>(model_cfg, &samples)?;
            let mut target = Vec::with_capacity(samples.len() * size * size);
            for s in &samples {
                let t = s.target.as_ref().expect("training pool has targets");
                target.extend(t.iter().map(|&v| v as f32));
            }
            let target = Tensor::new(vec![samples.len(), 1, size, size], target)?;
            let (loss, grads, stats) = {
                let mut g = Graph::new();
                let ids: Vec<_> = xs.into_iter().map(|t| g.constant(t)).collect();
                let pass = forward_graph(&mut g, &params, &ids, Mode::Train)?;
                let lesion = g.select_channel(pass.probs, 1)?;
                let loss = g.dice_loss(lesion, target)?;
                g.backward(loss)?;
                (g.value(loss).data()[0] as f64, pass.gradients(&g), pass.bn_stats)
            };
            lr = lr_at(step, cfg);
            adam_step_store(&mut params.store, &grads, &mut adam, lr)?;
            update_running_stats(&mut params, &stats);
            step += 1;
            loss_sum += loss;
        }
        let validate = epoch % cfg.val_every == 0 || epoch == cfg.max_epochs;
        let val_dsc = if validate {
            Some(validation_dsc(&params, val_cases, cfg)?)
        } else {
            None
        };
        if let Some(v) = val_dsc {
            if report.best_val_dsc.is_none_or(|b| v > b) {
                report.best_val_dsc = Some(v);
                report.best_epoch = Some(epoch);
                best = params.clone();
                if let Some(path) = &outputs.checkpoint {
                    best.store.save(path)?;
                }
            }
        }
        let record = EpochRecord {
            epoch,
            step,
            lr,
            loss: loss_sum / batches.len() as f64,
            val_dsc,
        };
        if let Some(cb) = outputs.on_epoch.as_mut() {
            cb(&record);
        }
        report.epochs.push(record);
        if let Some(path) = &outputs.log {
            write_atomic(path, report.log_tsv().as_bytes())?;
        }
    }
    Ok((report, best))
}

fn validation_dsc(params: &ModelParams<f32>, cases: &[MultiModalCase], cfg: &TrainConfig) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for case in cases {
        let pred = predict_case(params, case, cfg.fusion, cfg.eval_batch)?;
        total += dsc(&pred.mask, case.truth().expect("checked"))?;
    }
    Ok(total / cases.len() as f64)
}

/// Per-plane probability volumes and their fused mask.
#[derive(Clone, Debug, PartialEq)]
pub struct CasePrediction {
    pub planes: Vec<(SlicePlane, Volume3D)>,
    pub mask: Volume3D,
}

/// Lesion probability volume assembled from one plane's slices.
pub fn predict_plane(
    params: &ModelParams<f32>,
    case: &MultiModalCase,
    plane: SlicePlane,
    eval_batch: usize,
) -> Result<Volume3D, TrainError> {
    let size = params.config.input_size;
    let samples = extract_slices(case, plane, size)?;
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(eval_batch.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let xs = batch_inputs::<f32>(&params.config, &refs)?;
        let mut g = Graph::new();
        let ids: Vec<_> = xs.into_iter().map(|t| g.constant(t)).collect();
        let pass = forward_graph(&mut g, params, &ids, Mode::Eval)?;
        for (s, map) in chunk.iter().zip(lesion_maps(g.value(pass.probs))?) {
            preds.push((s.index, map));
        }
    }
    Ok(assemble_plane_volume(&preds, plane, case.dims(), case.spacing(), size)?)
}

/// Slices the case along all three planes, predicts in eval mode, and fuses.
pub fn predict_case(
    params: &ModelParams<f32>,
    case: &MultiModalCase,
    method: FusionMethod,
    eval_batch: usize,
) -> Result<CasePrediction, TrainError> {
    let planes = SlicePlane::ALL
        .iter()
        .map(|&p| Ok((p, predict_plane(params, case, p, eval_batch)?)))
        .collect::<Result<Vec<_>, TrainError>>()?;
    let mask = mpr_reconstruct(&planes, method)?;
    Ok(CasePrediction { planes, mask })
}

/// Loads parameters saved by [`train`] for the given model config.
pub fn load_params(model_cfg: &ModelConfig, path: &Path) -> Result<ModelParams<f32>, TrainError> {
    let fresh = build_model(model_cfg)?;
    let store = crate::autodiff::ParamStore::<f32>::load(path)?;
    let expected: Vec<&str> = fresh.store.names().collect();
    let found: Vec<&str> = store.names().collect();
    if expected != found {
        return Err(TrainError::InvalidConfig(format!(
            "checkpoint {} does not match the model config",
            path.display()
        )));
    }
    for (a, b) in fresh.store.entries().iter().zip(store.entries()) {
        if a.tensor.shape() != b.tensor.shape() {
            return Err(TrainError::InvalidConfig(format!("shape mismatch for {}", a.name)));
        }
    }
    Ok(ModelParams {
        config: model_cfg.clone(),
        store,
    })
}
