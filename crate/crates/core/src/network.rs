//! Multi-branch encoder–decoder.
//!
//! One ResNet-style branch per modality (or a single branch with a stacked
//! multi-channel stem), a multi-modal fusion block (MMFF) at each of the five
//! encoder resolutions, a chain of four multi-scale upsampling blocks (MSFU)
//! from the coarsest level up to level 1, and a head that upsamples back to
//! `S x S` and emits a two-class softmax.
//!
//! Resolution arithmetic: stem conv k7 s2 p3, then max-pool k3 s2 padded
//! `(0, 1)` (nothing before, one after), then stride-2 3x3 stages with p1. For
//! `S = 218` this gives 109, 54, 27, 14, 7; for `S = 64` it gives
//! 32, 16, 8, 4, 2. A symmetric p0 pool reaches 54 at 218 but 15 at 64, and p1
//! gives 55; the one-sided pad is the only uniform rule that halves cleanly in
//! both cases.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, BatchStats, Graph, NodeId, ParamStore, Real, Tensor};
use crate::slicer::SliceSample;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("missing modality {0:?} in input")]
    MissingModality(String),
    #[error("input is {found}x{found}, model expects {expected}x{expected}")]
    InputSize { expected: usize, found: usize },
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Modality names; one encoder branch each unless `stacked`.
    pub modalities: Vec<String>,
    /// Single branch whose stem sees all modalities as channels.
    pub stacked: bool,
    pub input_size: usize,
    pub stem_width: usize,
    /// Level widths are `stem_width * m` for each of the five levels.
    pub width_multipliers: [usize; 5],
    /// Bottleneck blocks in stages 2..=5.
    pub blocks: [usize; 4],
    /// Ratio of a bottleneck's output width to its inner width.
    pub bottleneck_expansion: usize,
    pub share_weights: bool,
    pub seed: u64,
    /// Fraction of the old running statistic kept at each update.
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: ["flair", "t1", "t2"].map(String::from).to_vec(),
            stacked: false,
            input_size: 64,
            stem_width: 8,
            width_multipliers: [1, 2, 4, 4, 8],
            blocks: [1, 1, 1, 1],
            bottleneck_expansion: 4,
            share_weights: false,
            seed: 0,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// ResNet50 widths. Depth `(3, 4, 6, 3)` is the full backbone.
    pub fn full_scale(modalities: &[&str], input_size: usize, blocks: [usize; 4]) -> Self {
        Self {
            modalities: modalities.iter().map(|m| m.to_string()).collect(),
            input_size,
            stem_width: 64,
            width_multipliers: [1, 4, 8, 16, 32],
            blocks,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: &str| Err(NetworkError::InvalidConfig(m.to_string()));
        if self.modalities.is_empty() {
            return bad("at least one modality is required");
        }
        let mut names = self.modalities.clone();
        names.sort();
        names.dedup();
        if names.len() != self.modalities.len() {
            return bad("modality names must be unique");
        }
        if self.share_weights {
            return bad("weight sharing across branches is not supported");
        }
        if self.stem_width == 0 || self.width_multipliers.contains(&0) || self.blocks.contains(&0) {
            return bad("widths and block counts must be positive");
        }
        if self.bottleneck_expansion == 0 {
            return bad("bottleneck expansion must be positive");
        }
        if self.level_widths().iter().any(|&w| w < 2) {
            return bad("every level needs at least two channels");
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return bad("batch-norm momentum must be in [0,1) and eps positive");
        }
        let r = level_resolutions(self.input_size);
        if r[4] == 0 || r.windows(2).any(|p| p[1] >= p[0]) {
            return bad("input size too small for five strictly decreasing levels");
        }
        Ok(())
    }

    pub fn level_widths(&self) -> [usize; 5] {
        self.width_multipliers.map(|m| m * self.stem_width)
    }

    /// Branch names in forward order.
    pub fn branches(&self) -> Vec<String> {
        if self.stacked {
            vec!["stacked".to_string()]
        } else {
            self.modalities.clone()
        }
    }

    pub fn branch_channels(&self) -> usize {
        if self.stacked {
            self.modalities.len()
        } else {
            1
        }
    }

    /// Channels of the fused maps at each level.
    pub fn fused_widths(&self) -> [usize; 5] {
        let b = self.branches().len();
        self.level_widths().map(|w| b * (w / 2))
    }

    /// Channels leaving each decoder block, coarsest first; the last entry is
    /// the level-1 width that feeds the head.
    pub fn decoder_widths(&self) -> [usize; 4] {
        let f = self.fused_widths();
        let mut low = f[4];
        let mut out = [0; 4];
        for (i, level) in (0..4).rev().enumerate() {
            low = (low / 2 + f[level]) / 2;
            out[i] = low;
        }
        out
    }
}

/// Spatial size of the five encoder levels for an `S x S` input.
pub fn level_resolutions(s: usize) -> [usize; 5] {
    let conv = |n: usize, k: usize, st: usize, pb: usize, pe: usize| -> usize {
        (n + pb + pe).checked_sub(k).map_or(0, |v| v / st + 1)
    };
    let l1 = conv(s, 7, 2, 3, 3);
    let l2 = conv(l1, 3, 2, 0, 1);
    let l3 = conv(l2, 3, 2, 1, 1);
    let l4 = conv(l3, 3, 2, 1, 1);
    let l5 = conv(l4, 3, 2, 1, 1);
    [l1, l2, l3, l4, l5]
}

/// A model's configuration and its named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            store: self.store.cast(),
        }
    }
}

struct Builder {
    store: ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl Builder {
    /// Weight of shape `[a, b, k, k]` (conv: out, in; upconv: in, out), drawn
    /// from N(0, 2 / (in + out)).
    fn weight(&mut self, name: &str, shape: [usize; 4], fan_in: usize, fan_out: usize) -> Result<(), AutodiffError> {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng) as f32).collect();
        self.store.insert(name, Tensor::new(shape.to_vec(), data)?, true)?;
        Ok(())
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Result<(), AutodiffError> {
        self.weight(&format!("{name}.w"), [cout, cin, k, k], cin, cout)?;
        if bias {
            self.store.insert(format!("{name}.b"), Tensor::zeros(&[cout]), true)?;
        }
        Ok(())
    }

    fn upconv(&mut self, name: &str, cin: usize, cout: usize) -> Result<(), AutodiffError> {
        self.weight(&format!("{name}.w"), [cin, cout, 2, 2], cin, cout)?;
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[cout]), true)?;
        Ok(())
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<(), AutodiffError> {
        self.store.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0), true)?;
        self.store.insert(format!("{name}.beta"), Tensor::zeros(&[c]), true)?;
        self.store.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]), false)?;
        self.store.insert(format!("{name}.running_var"), Tensor::full(&[c], 1.0), false)?;
        Ok(())
    }
}

fn block_plan(cfg: &ModelConfig) -> Vec<(usize, usize, usize, usize, usize)> {
    // (stage index 2..=5, block index, in width, out width, stride)
    let widths = cfg.level_widths();
    let mut plan = Vec::new();
    for stage in 0..4 {
        let mut cin = widths[stage];
        let cout = widths[stage + 1];
        for b in 0..cfg.blocks[stage] {
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            plan.push((stage + 2, b, cin, cout, stride));
            cin = cout;
        }
    }
    plan
}

fn bottleneck_width(cfg: &ModelConfig, cout: usize) -> usize {
    (cout / cfg.bottleneck_expansion).max(1)
}

/// Allocates and initializes every parameter, deterministically from `config.seed`.
pub fn build_model(config: &ModelConfig) -> Result<ModelParams<f32>, NetworkError> {
    config.validate()?;
    let mut b = Builder {
        store: ParamStore::new(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let widths = config.level_widths();
    for branch in config.branches() {
        let p = format!("enc.{branch}");
        b.conv(&format!("{p}.stem"), config.branch_channels(), widths[0], 7, false)?;
        b.bn(&format!("{p}.stem.bn"), widths[0])?;
        for (stage, blk, cin, cout, stride) in block_plan(config) {
            let q = format!("{p}.s{stage}.b{blk}");
            let mid = bottleneck_width(config, cout);
            b.conv(&format!("{q}.c1"), cin, mid, 1, false)?;
            b.bn(&format!("{q}.bn1"), mid)?;
            b.conv(&format!("{q}.c2"), mid, mid, 3, false)?;
            b.bn(&format!("{q}.bn2"), mid)?;
            b.conv(&format!("{q}.c3"), mid, cout, 1, false)?;
            b.bn(&format!("{q}.bn3"), cout)?;
            if cin != cout || stride != 1 {
                b.conv(&format!("{q}.proj"), cin, cout, 1, false)?;
                b.bn(&format!("{q}.proj.bn"), cout)?;
            }
        }
    }
    for (level, &c) in widths.iter().enumerate() {
        let half = c / 2;
        for branch in config.branches() {
            let q = format!("mmff{}.{branch}", level + 1);
            b.bn(&format!("{q}.bn1"), c)?;
            b.conv(&format!("{q}.c1"), c, half, 1, true)?;
            b.bn(&format!("{q}.bn2"), half)?;
            b.conv(&format!("{q}.c2"), half, half, 3, true)?;
        }
    }
    let fused = config.fused_widths();
    let dec = config.decoder_widths();
    let mut low = fused[4];
    for (i, level) in (0..4).rev().enumerate() {
        let q = format!("msfu{}", level + 1);
        let half = low / 2;
        let out = dec[i];
        b.bn(&format!("{q}.bn1"), low)?;
        b.conv(&format!("{q}.reduce"), low, half, 1, true)?;
        b.upconv(&format!("{q}.up"), half, half)?;
        b.bn(&format!("{q}.bn2"), half + fused[level])?;
        b.conv(&format!("{q}.merge"), half + fused[level], out, 1, true)?;
        b.bn(&format!("{q}.bn3"), out)?;
        b.conv(&format!("{q}.refine"), out, out, 3, true)?;
        low = out;
    }
    b.bn("head.bn1", low)?;
    b.upconv("head.up", low, low)?;
    b.bn("head.bn2", low)?;
    b.conv("head.out", low, 2, 3, true)?;
    Ok(ModelParams {
        config: config.clone(),
        store: b.store,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are reported for update.
    Train,
    /// Running statistics.
    Eval,
}

/// Handles produced by one forward pass.
#[derive(Debug)]
pub struct ForwardPass<T> {
    /// `[N, 2, S, S]` softmax output; channel 1 is the lesion class.
    pub probs: NodeId,
    /// Encoder outputs per branch, level 1 first.
    pub levels: Vec<[NodeId; 5]>,
    /// Fused maps per level.
    pub fused: [NodeId; 5],
    /// Graph node of each store entry that was used, indexed like the store.
    pub param_nodes: Vec<Option<NodeId>>,
    /// Batch statistics per batch-norm layer (train mode), keyed by layer name.
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Real> ForwardPass<T> {
    /// Gradients indexed like the store, after `g.backward` has run.
    pub fn gradients(&self, g: &Graph<'_, T>) -> Vec<Option<Tensor<T>>> {
        self.param_nodes
            .iter()
            .map(|n| n.and_then(|id| g.grad(id).cloned()))
            .collect()
    }
}

struct Ctx<'g, 'a, T: Real> {
    g: &'g mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    mode: Mode,
    eps: f64,
    nodes: Vec<Option<NodeId>>,
    bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Real> Ctx<'_, 'a, T> {
    fn param(&mut self, name: &str) -> Result<NodeId, NetworkError> {
        let idx = self
            .store
            .position(name)
            .ok_or_else(|| NetworkError::MissingParam(name.to_string()))?;
        if let Some(id) = self.nodes[idx] {
            return Ok(id);
        }
        let entry = &self.store.entries()[idx];
        let id = self.g.borrowed(&entry.tensor, entry.trainable);
        self.nodes[idx] = Some(id);
        Ok(id)
    }

    fn opt_param(&mut self, name: &str) -> Result<Option<NodeId>, NetworkError> {
        if self.store.position(name).is_some() {
            self.param(name).map(Some)
        } else {
            Ok(None)
        }
    }

    fn conv(&mut self, x: NodeId, name: &str, stride: usize, pad: usize) -> Result<NodeId, NetworkError> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.opt_param(&format!("{name}.b"))?;
        Ok(self.g.conv2d(x, w, b, stride, pad)?)
    }

    fn upconv(&mut self, x: NodeId, name: &str) -> Result<NodeId, NetworkError> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.opt_param(&format!("{name}.b"))?;
        Ok(self.g.conv_transpose2d(x, w, b, 2)?)
    }

    fn bn(&mut self, x: NodeId, name: &str) -> Result<NodeId, NetworkError> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.g.batch_norm_train(x, gamma, beta, self.eps)?;
                self.bn_stats.push((name.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let store = self.store;
                let get = |s: &str| {
                    store
                        .get(&format!("{name}.{s}"))
                        .ok_or_else(|| NetworkError::MissingParam(format!("{name}.{s}")))
                };
                let (mean, var) = (get("running_mean")?, get("running_var")?);
                Ok(self.g.batch_norm_eval(x, gamma, beta, mean.data(), var.data(), self.eps)?)
            }
        }
    }

    fn bn_relu(&mut self, x: NodeId, name: &str) -> Result<NodeId, NetworkError> {
        let y = self.bn(x, name)?;
        Ok(self.g.relu(y))
    }

    fn bottleneck(&mut self, x: NodeId, q: &str, stride: usize) -> Result<NodeId, NetworkError> {
        let y = self.conv(x, &format!("{q}.c1"), 1, 0)?;
        let y = self.bn_relu(y, &format!("{q}.bn1"))?;
        let y = self.conv(y, &format!("{q}.c2"), stride, 1)?;
        let y = self.bn_relu(y, &format!("{q}.bn2"))?;
        let y = self.conv(y, &format!("{q}.c3"), 1, 0)?;
        let y = self.bn(y, &format!("{q}.bn3"))?;
        let shortcut = if self.store.position(&format!("{q}.proj.w")).is_some() {
            let s = self.conv(x, &format!("{q}.proj"), stride, 0)?;
            self.bn(s, &format!("{q}.proj.bn"))?
        } else {
            x
        };
        let sum = self.g.add(y, shortcut)?;
        Ok(self.g.relu(sum))
    }

    fn encoder(&mut self, cfg: &ModelConfig, branch: &str, x: NodeId) -> Result<[NodeId; 5], NetworkError> {
        let p = format!("enc.{branch}");
        let stem = self.conv(x, &format!("{p}.stem"), 2, 3)?;
        let l1 = self.bn_relu(stem, &format!("{p}.stem.bn"))?;
        let mut levels = [l1; 5];
        let mut h = self.g.maxpool2d_padded(l1, 3, 2, (0, 1))?;
        for (stage, blk, _, _, stride) in block_plan(cfg) {
            h = self.bottleneck(h, &format!("{p}.s{stage}.b{blk}"), stride)?;
            levels[stage - 1] = h;
        }
        Ok(levels)
    }

    fn mmff(&mut self, cfg: &ModelConfig, level: usize, feats: &[NodeId]) -> Result<NodeId, NetworkError> {
        let mut outs = Vec::with_capacity(feats.len());
        for (branch, &f) in cfg.branches().iter().zip(feats) {
            let q = format!("mmff{level}.{branch}");
            let h = self.bn_relu(f, &format!("{q}.bn1"))?;
            let h = self.conv(h, &format!("{q}.c1"), 1, 0)?;
            let h = self.bn_relu(h, &format!("{q}.bn2"))?;
            outs.push(self.conv(h, &format!("{q}.c2"), 1, 1)?);
        }
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        Ok(self.g.concat_channels(&outs)?)
    }

    fn msfu(&mut self, level: usize, low: NodeId, high: NodeId) -> Result<NodeId, NetworkError> {
        let (_, _, lh, lw) = self.g.value(low).dims4()?;
        let (_, _, hh, hw) = self.g.value(high).dims4()?;
        if lh >= hh || lw >= hw {
            return Err(NetworkError::Autodiff(AutodiffError::Shape(format!(
                "decoder input {lh}x{lw} is not coarser than skip {hh}x{hw}"
            ))));
        }
        let q = format!("msfu{level}");
        let a = self.bn_relu(low, &format!("{q}.bn1"))?;
        let a = self.conv(a, &format!("{q}.reduce"), 1, 0)?;
        let a = self.upconv(a, &format!("{q}.up"))?;
        let a = self.g.fit_spatial(a, hh, hw)?;
        let c = self.g.concat_channels(&[a, high])?;
        let c = self.bn_relu(c, &format!("{q}.bn2"))?;
        let c = self.conv(c, &format!("{q}.merge"), 1, 0)?;
        let c = self.bn_relu(c, &format!("{q}.bn3"))?;
        self.conv(c, &format!("{q}.refine"), 1, 1)
    }
}

/// Records the full model on `g`. `inputs` holds one `[N, C, S, S]` node per
/// branch, in [`ModelConfig::branches`] order.
pub fn forward_graph<'a, T: Real>(
    g: &mut Graph<'a, T>,
    params: &'a ModelParams<T>,
    inputs: &[NodeId],
    mode: Mode,
) -> Result<ForwardPass<T>, NetworkError> {
    let cfg = &params.config;
    let branches = cfg.branches();
    if inputs.len() != branches.len() {
        return Err(NetworkError::InvalidConfig(format!(
            "{} inputs for {} branches",
            inputs.len(),
            branches.len()
        )));
    }
    for &x in inputs {
        let (_, c, h, w) = g.value(x).dims4()?;
        if h != cfg.input_size || w != cfg.input_size {
            return Err(NetworkError::InputSize {
                expected: cfg.input_size,
                found: if h != cfg.input_size { h } else { w },
            });
        }
        if c != cfg.branch_channels() {
            return Err(NetworkError::InvalidConfig(format!(
                "branch input has {c} channels, expected {}",
                cfg.branch_channels()
            )));
        }
    }
    let mut ctx = Ctx {
        g,
        store: &params.store,
        mode,
        eps: cfg.bn_eps,
        nodes: vec![None; params.store.len()],
        bn_stats: Vec::new(),
    };
    let mut levels = Vec::with_capacity(branches.len());
    for (branch, &x) in branches.iter().zip(inputs) {
        levels.push(ctx.encoder(cfg, branch, x)?);
    }
    let mut fused = [inputs[0]; 5];
    for (level, slot) in fused.iter_mut().enumerate() {
        let feats: Vec<NodeId> = levels.iter().map(|l| l[level]).collect();
        *slot = ctx.mmff(cfg, level + 1, &feats)?;
    }
    let mut low = fused[4];
    for level in (0..4).rev() {
        low = ctx.msfu(level + 1, low, fused[level])?;
    }
    let h = ctx.bn_relu(low, "head.bn1")?;
    let h = ctx.upconv(h, "head.up")?;
    let h = ctx.g.fit_spatial(h, cfg.input_size, cfg.input_size)?;
    let h = ctx.bn_relu(h, "head.bn2")?;
    let logits = ctx.conv(h, "head.out", 1, 1)?;
    let probs = ctx.g.softmax_channels(logits)?;
    Ok(ForwardPass {
        probs,
        levels,
        fused,
        param_nodes: ctx.nodes,
        bn_stats: ctx.bn_stats,
    })
}

/// Folds one batch's statistics into the running estimates:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn update_running_stats<T: Real>(params: &mut ModelParams<T>, stats: &[(String, BatchStats<T>)]) {
    let m = T::from_f64(params.config.bn_momentum);
    let one_m = T::one() - m;
    for (name, s) in stats {
        for (key, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            if let Some(t) = params.store.get_mut(&format!("{name}.{key}")) {
                for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                    *r = m * *r + one_m * b;
                }
            }
        }
    }
}

/// Stacks the samples into one `[N, C, S, S]` tensor per branch.
pub fn batch_inputs<T: Real>(cfg: &ModelConfig, samples: &[&SliceSample]) -> Result<Vec<Tensor<T>>, NetworkError> {
    let s = cfg.input_size;
    let plane = s * s;
    let groups: Vec<Vec<&str>> = if cfg.stacked {
        vec![cfg.modalities.iter().map(String::as_str).collect()]
    } else {
        cfg.modalities.iter().map(|m| vec![m.as_str()]).collect()
    };
    let mut out = Vec::with_capacity(groups.len());
    for group in groups {
        let mut data = Vec::with_capacity(samples.len() * group.len() * plane);
        for sample in samples {
            if sample.size != s {
                return Err(NetworkError::InputSize {
                    expected: s,
                    found: sample.size,
                });
            }
            for m in &group {
                let img = sample
                    .inputs
                    .get(*m)
                    .ok_or_else(|| NetworkError::MissingModality(m.to_string()))?;
                data.extend(img.iter().map(|&v| T::from_f64(v as f64)));
            }
        }
        out.push(Tensor::new(vec![samples.len(), group.len(), s, s], data)?);
    }
    Ok(out)
}

/// Eval-mode forward of single `S x S` images keyed by modality name; returns
/// the `[N, 2, S, S]` probability tensor.
pub fn model_forward<T: Real>(
    params: &ModelParams<T>,
    inputs: &BTreeMap<String, Tensor<T>>,
) -> Result<Tensor<T>, NetworkError> {
    let cfg = &params.config;
    let mut g = Graph::new();
    let ids = branch_nodes(&mut g, cfg, inputs)?;
    let pass = forward_graph(&mut g, params, &ids, Mode::Eval)?;
    Ok(g.value(pass.probs).clone())
}

/// Builds the branch input nodes from per-modality `[N, 1, S, S]` tensors.
pub fn branch_nodes<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    inputs: &BTreeMap<String, Tensor<T>>,
) -> Result<Vec<NodeId>, NetworkError> {
    let get = |m: &String| inputs.get(m).ok_or_else(|| NetworkError::MissingModality(m.clone()));
    if !cfg.stacked {
        return cfg.modalities.iter().map(|m| Ok(g.constant(get(m)?.clone()))).collect();
    }
    let first = get(&cfg.modalities[0])?;
    let (n, _, h, w) = first.dims4()?;
    let plane = h * w;
    let c = cfg.modalities.len();
    let mut data = vec![T::zero(); n * c * plane];
    for (ci, m) in cfg.modalities.iter().enumerate() {
        let t = get(m)?;
        if t.dims4()? != (n, 1, h, w) {
            return Err(AutodiffError::Shape(format!("modality {m:?} has shape {:?}", t.shape())).into());
        }
        for b in 0..n {
            data[(b * c + ci) * plane..(b * c + ci + 1) * plane]
                .copy_from_slice(&t.data()[b * plane..(b + 1) * plane]);
        }
    }
    Ok(vec![g.constant(Tensor::new(vec![n, c, h, w], data)?)])
}

/// Lesion-channel maps of a `[N, 2, H, W]` probability tensor, one per batch item.
pub fn lesion_maps<T: Real>(probs: &Tensor<T>) -> Result<Vec<Vec<f32>>, NetworkError> {
    let (n, c, h, w) = probs.dims4()?;
    if c != 2 {
        return Err(AutodiffError::Shape(format!("expected 2 channels, got {c}")).into());
    }
    let plane = h * w;
    Ok((0..n)
        .map(|b| {
            probs.data()[(b * 2 + 1) * plane..(b * 2 + 2) * plane]
                .iter()
                .map(|v| v.as_f64() as f32)
                .collect()
        })
        .collect())
}

/// Lesion probability strictly above `tau` → 1.
pub fn binarize(prob: &[f32], tau: f32) -> Vec<u8> {
    prob.iter().map(|&p| u8::from(p > tau)).collect()
}
