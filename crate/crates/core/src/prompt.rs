//! Prompt construction, insertion and the prompted forward pass.
//!
//! Each layer in the insertion set owns a raw prompt block `P^i: [M, d]`.
//! Before insertion, `m = round(alpha·M)` consecutive rows of it are replaced
//! by their transform (real 2D FFT by default) while the remaining rows pass
//! through untouched. The transformed rows sit at the front of the block
//! (`Prepend`), at its end (`Append`), or at a per-layer offset drawn once
//! from the run seed (`Random`).
//!
//! Token order inside every prompted layer is `[class, prompts, patches]`.
//! In the deep variant the rows a layer produces at prompt positions are
//! dropped and the next layer's fresh prompts take their place; in the
//! shallow variant prompts enter once, at layer 1, and their outputs flow on.

use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig, BoundBackbone, BoundHead, Head, INIT_STD};
use crate::error::{Error, Result};
use crate::seeding;
use crate::spectral::{fourier_rows_op, FourierAxes, FourierRows};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Location {
    Prepend,
    Append,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DimMode {
    Sequence,
    Hidden,
    Both,
}

impl From<DimMode> for FourierAxes {
    fn from(m: DimMode) -> Self {
        match m {
            DimMode::Sequence => FourierAxes::Sequence,
            DimMode::Hidden => FourierAxes::Hidden,
            DimMode::Both => FourierAxes::Both,
        }
    }
}

/// What happens to the selected prompt rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    /// Real part of the FFT over the configured axes.
    Fft,
    /// Fixed random `d×d` map along the hidden axis.
    Fll,
    /// Learnable `d×d` map along the hidden axis.
    Lll,
    /// Plain prompts.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Shallow,
    Deep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Prompts per layer, `M`.
    pub length: usize,
    /// Fourier fraction; `m = round(alpha·M)`, ties rounded up.
    pub alpha: f64,
    pub location: Location,
    /// 1-based layers whose prompts get transformed; `None` means every inserted layer.
    pub depth_set: Option<Vec<usize>>,
    pub dim_mode: DimMode,
    pub transform: TransformKind,
    pub variant: Variant,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            length: 10,
            alpha: 0.5,
            location: Location::Prepend,
            depth_set: None,
            dim_mode: DimMode::Both,
            transform: TransformKind::Fft,
            variant: Variant::Deep,
        }
    }
}

impl PromptConfig {
    /// Number of transformed rows per layer.
    pub fn fourier_count(&self) -> usize {
        let m = (self.alpha * self.length as f64).round() as usize;
        m.min(self.length)
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("prompt.alpha", format!("{} not in [0, 1]", self.alpha)));
        }
        if let Some(set) = &self.depth_set {
            if set.is_empty() {
                return Err(Error::config("prompt.depth_set", "must not be empty"));
            }
            if let Some(bad) = set.iter().find(|&&l| l == 0 || l > depth) {
                return Err(Error::config(
                    "prompt.depth_set",
                    format!("layer {bad} outside 1..={depth}"),
                ));
            }
            if self.variant == Variant::Shallow && set.iter().any(|&l| l != 1) {
                return Err(Error::config("prompt.depth_set", "shallow prompts live only in layer 1"));
            }
        }
        Ok(())
    }

    /// Layers that receive prompts.
    pub fn insertion_layers(&self, depth: usize) -> Vec<usize> {
        if self.length == 0 {
            return Vec::new();
        }
        match self.variant {
            Variant::Deep => (1..=depth).collect(),
            Variant::Shallow => vec![1],
        }
    }

    /// Layers whose prompts are transformed.
    pub fn transform_layers(&self, depth: usize) -> BTreeSet<usize> {
        let inserted: BTreeSet<usize> = self.insertion_layers(depth).into_iter().collect();
        match &self.depth_set {
            Some(set) => set.iter().copied().filter(|l| inserted.contains(l)).collect(),
            None => inserted,
        }
    }

    /// Closed-form prompt parameter count for a backbone of the given depth and width.
    pub fn prompt_parameter_count(&self, depth: usize, width: usize) -> usize {
        self.insertion_layers(depth).len() * self.length * width
    }
}

/// Trainable prompt blocks plus the optional hidden-axis maps.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    /// `layer → [M, d]`.
    pub prompts: BTreeMap<usize, Tensor>,
    /// Learnable map (`TransformKind::Lll`).
    pub lll: Option<Tensor>,
    /// Fixed map (`TransformKind::Fll`), never updated.
    pub fll: Option<Tensor>,
    /// Start row of the transformed block per layer.
    pub offsets: BTreeMap<usize, usize>,
}

impl PromptBank {
    /// Uniform prompts in `[-r, r]`, `r = sqrt(6 / (d + patch_dim))`. Random offsets and
    /// the linear maps come from their own seed streams.
    pub fn init(config: &PromptConfig, backbone: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate(backbone.depth)?;
        let (d, big_m, m) = (backbone.width, config.length, config.fourier_count());
        let r = (6.0 / (d + backbone.patch_dim()) as f64).sqrt();
        let mut prompts = BTreeMap::new();
        let mut offsets = BTreeMap::new();
        for layer in config.insertion_layers(backbone.depth) {
            let mut rng = seeding::stream(seed, "prompt", layer as u64);
            prompts.insert(layer, Tensor::uniform(&[big_m, d], -r, r, &mut rng));
            let start = match config.location {
                Location::Prepend => 0,
                Location::Append => big_m - m,
                Location::Random => {
                    seeding::stream(seed, "prompt.location", layer as u64).random_range(0..=big_m - m)
                }
            };
            offsets.insert(layer, start);
        }
        let map = |purpose| Tensor::trunc_normal(&[d, d], INIT_STD, &mut seeding::stream(seed, purpose, 0));
        let (lll, fll) = match config.transform {
            TransformKind::Lll => (Some(map("prompt.lll")), None),
            TransformKind::Fll => (None, Some(map("prompt.fll"))),
            _ => (None, None),
        };
        Ok(Self {
            prompts,
            lll,
            fll,
            offsets,
        })
    }

    pub fn prompt_parameter_count(&self) -> usize {
        self.prompts.values().map(Tensor::numel).sum()
    }

    /// Prompts plus the learnable map, if any.
    pub fn trainable_count(&self) -> usize {
        self.prompt_parameter_count() + self.lll.as_ref().map_or(0, Tensor::numel)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundPrompts {
        BoundPrompts {
            prompts: self
                .prompts
                .iter()
                .map(|(&l, t)| (l, g.leaf(t.clone(), trainable)))
                .collect(),
            lll: self.lll.as_ref().map(|t| g.leaf(t.clone(), trainable)),
            fll: self.fll.as_ref().map(|t| g.constant(t.clone())),
        }
    }
}

pub struct BoundPrompts {
    pub prompts: BTreeMap<usize, Var>,
    pub lll: Option<Var>,
    pub fll: Option<Var>,
}

/// Row-wise hidden-axis linear map `block·Wᵀ`.
pub fn linear_transform(g: &mut Graph, block: Var, weight: Var) -> Result<Var> {
    g.matmul_bt(block, weight)
}

/// Assembles the `[M, d]` prompt block inserted at `layer`.
pub fn build_layer_prompts(
    g: &mut Graph,
    bound: &BoundPrompts,
    bank: &PromptBank,
    config: &PromptConfig,
    depth: usize,
    layer: usize,
) -> Result<Var> {
    let raw = *bound.prompts.get(&layer).ok_or_else(|| {
        Error::Contract(format!("layer {layer} is not in the prompt insertion set"))
    })?;
    if !config.transform_layers(depth).contains(&layer) {
        return Ok(raw);
    }
    let (big_m, m) = (config.length, config.fourier_count());
    let start = bank.offsets[&layer];
    match config.transform {
        TransformKind::None => Ok(raw),
        TransformKind::Fft => fourier_rows_op(
            g,
            raw,
            FourierRows {
                start,
                len: m,
                axes: config.dim_mode.into(),
            },
        ),
        TransformKind::Fll | TransformKind::Lll => {
            if m == 0 {
                return Ok(raw);
            }
            let weight = match config.transform {
                TransformKind::Fll => bound.fll,
                _ => bound.lll,
            }
            .ok_or_else(|| Error::Contract("linear prompt transform without a weight".into()))?;
            let block = g.slice(raw, 0, start, m)?;
            let mapped = linear_transform(g, block, weight)?;
            let mut parts = Vec::with_capacity(3);
            if start > 0 {
                parts.push(g.slice(raw, 0, 0, start)?);
            }
            parts.push(mapped);
            if start + m < big_m {
                parts.push(g.slice(raw, 0, start + m, big_m - start - m)?);
            }
            g.concat(&parts, 0)
        }
    }
}

/// Row map that turns `[batch·(1+np), d]` into `[batch·(1+M+np), d]` with order
/// `[class, prompts, patches]`; source 0 is the token matrix, source 1 the prompts.
fn insertion_map(batch: usize, prompts: usize, patches: usize) -> Vec<(usize, usize)> {
    let stride = 1 + patches;
    let mut map = Vec::with_capacity(batch * (stride + prompts));
    for b in 0..batch {
        map.push((0, b * stride));
        map.extend((0..prompts).map(|j| (1, j)));
        map.extend((0..patches).map(|p| (0, b * stride + 1 + p)));
    }
    map
}

/// Inserts the same prompts into every example of a batch.
pub fn insert_batch(g: &mut Graph, tokens: Var, prompts: Var, batch: usize, patches: usize) -> Result<Var> {
    let (rows, d) = g.value(tokens).dims2()?;
    let (m, dp) = g.value(prompts).dims2()?;
    if d != dp || rows != batch * (1 + patches) {
        return Err(Error::shape("insert", &[rows, d], &[m, dp]));
    }
    g.gather_rows(&[tokens, prompts], &insertion_map(batch, m, patches))
}

/// Drops the prompt rows from `[batch·(1+M+np), d]`.
pub fn drop_prompts(g: &mut Graph, x: Var, batch: usize, prompts: usize, patches: usize) -> Result<Var> {
    let seq = 1 + prompts + patches;
    let map: Vec<(usize, usize)> = (0..batch)
        .flat_map(|b| {
            std::iter::once((0, b * seq)).chain((0..patches).map(move |p| (0, b * seq + 1 + prompts + p)))
        })
        .collect();
    g.gather_rows(&[x], &map)
}

/// Single-example insertion: `[1+np, d]` and optional `[M, d]` prompts to `[1+M+np, d]`.
pub fn insert(tokens_prev: &Tensor, layer_prompts: Option<&Tensor>) -> Result<Tensor> {
    let Some(p) = layer_prompts else {
        return Ok(tokens_prev.clone());
    };
    let (rows, _) = tokens_prev.dims2()?;
    let mut g = Graph::new();
    let t = g.constant(tokens_prev.clone());
    let pv = g.constant(p.clone());
    let out = insert_batch(&mut g, t, pv, 1, rows - 1)?;
    Ok(g.value(out).clone())
}

/// Output of [`tuned_forward`].
pub struct Forward {
    /// `[batch, classes]`.
    pub logits: Var,
    /// Attention node per layer, in layer order.
    pub attention: Vec<Var>,
    /// Sequence length seen by each layer.
    pub seq_lens: Vec<usize>,
}

/// Full prompted forward pass over a batch.
pub fn tuned_forward(
    g: &mut Graph,
    backbone: &BoundBackbone,
    bank: &PromptBank,
    prompts: &BoundPrompts,
    head: &BoundHead,
    config: &PromptConfig,
    images: &[&Tensor],
) -> Result<Forward> {
    let cfg = backbone.config();
    let (depth, np, batch) = (cfg.depth, cfg.num_patches(), images.len());
    let inserted: BTreeSet<usize> = config.insertion_layers(depth).into_iter().collect();
    let mut x = backbone.embed(g, images)?;
    let mut seq = cfg.seq_len(0);
    let mut attention = Vec::with_capacity(depth);
    let mut seq_lens = Vec::with_capacity(depth);
    for layer in 1..=depth {
        if inserted.contains(&layer) {
            if seq != cfg.seq_len(0) {
                x = drop_prompts(g, x, batch, config.length, np)?;
            }
            let p = build_layer_prompts(g, prompts, bank, config, depth, layer)?;
            x = insert_batch(g, x, p, batch, np)?;
            seq = cfg.seq_len(config.length);
        }
        let (y, attn) = backbone.layer(g, layer, x, batch, seq)?;
        x = y;
        attention.push(attn);
        seq_lens.push(seq);
    }
    let cls = backbone.class_tokens(g, x, batch, seq)?;
    let logits = head.logits(g, cls)?;
    Ok(Forward {
        logits,
        attention,
        seq_lens,
    })
}

/// Tuned/total parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub tuned: usize,
    pub total: usize,
    pub percent: f64,
}

pub fn count_parameters(backbone: &Backbone, bank: &PromptBank, head: Option<&Head>) -> ParamCount {
    let tuned = bank.trainable_count() + head.map_or(0, Head::parameter_count);
    let total = backbone.parameter_count() + tuned;
    let percent = if total == 0 { 0.0 } else { 100.0 * tuned as f64 / total as f64 };
    ParamCount {
        tuned,
        total,
        percent,
    }
}

/// A frozen backbone with its prompt bank and classification head.
#[derive(Clone, Debug)]
pub struct TunedModel {
    pub backbone: Arc<Backbone>,
    pub config: PromptConfig,
    pub bank: PromptBank,
    pub head: Head,
}

/// Vars of the trainable tensors of one bound [`TunedModel`], by checkpoint name.
pub struct Bound {
    pub backbone: BoundBackbone,
    pub prompts: BoundPrompts,
    pub head: BoundHead,
}

impl Bound {
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = self
            .prompts
            .prompts
            .iter()
            .map(|(l, v)| (format!("prompt.layer{l}"), *v))
            .collect();
        if let Some(v) = self.prompts.lll {
            out.push(("prompt.lll".into(), v));
        }
        out.push(("head.weight".into(), self.head.weight));
        out.push(("head.bias".into(), self.head.bias));
        out
    }
}

impl TunedModel {
    pub fn new(backbone: Arc<Backbone>, config: PromptConfig, num_classes: usize, seed: u64) -> Result<Self> {
        if !backbone.fully_frozen() {
            return Err(Error::Contract("prompt tuning needs a frozen backbone".into()));
        }
        let bank = PromptBank::init(&config, backbone.config(), seed)?;
        let head = Head::init(
            backbone.config().width,
            num_classes,
            &mut seeding::stream(seed, "head", 0),
        );
        Ok(Self {
            backbone,
            config,
            bank,
            head,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            backbone: self.backbone.bind(g),
            prompts: self.bank.bind(g, trainable),
            head: self.head.bind(g, trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, images: &[&Tensor]) -> Result<Forward> {
        tuned_forward(
            g,
            &bound.backbone,
            &self.bank,
            &bound.prompts,
            &bound.head,
            &self.config,
            images,
        )
    }

    /// Logits `[batch, classes]` without gradient tracking.
    pub fn predict(&self, images: &[&Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let f = self.forward(&mut g, &bound, images)?;
        Ok(g.value(f.logits).clone())
    }

    pub fn parameter_count(&self) -> ParamCount {
        count_parameters(&self.backbone, &self.bank, Some(&self.head))
    }

    /// Trainable tensors in a fixed order with their checkpoint names.
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .bank
            .prompts
            .iter()
            .map(|(l, t)| (format!("prompt.layer{l}"), t))
            .collect();
        if let Some(t) = &self.bank.lll {
            out.push(("prompt.lll".into(), t));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .bank
            .prompts
            .iter_mut()
            .map(|(l, t)| (format!("prompt.layer{l}"), t))
            .collect();
        if let Some(t) = &mut self.bank.lll {
            out.push(("prompt.lll".into(), t));
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    /// Flattened trainable parameters in [`TunedModel::trainable`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.trainable()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, theta: &[f64]) -> Result<()> {
        let total: usize = self.trainable().iter().map(|(_, t)| t.numel()).sum();
        if total != theta.len() {
            return Err(Error::shape("set_flat_params", &[total], &[theta.len()]));
        }
        let mut at = 0;
        for (_, t) in self.trainable_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&theta[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Every tuned-state tensor by checkpoint name (prompts, maps, offsets, head).
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .trainable()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        if let Some(t) = &self.bank.fll {
            out.push(("prompt.fll".into(), t.clone()));
        }
        if !self.bank.offsets.is_empty() {
            let offs: Vec<f64> = self.bank.offsets.values().map(|&o| o as f64).collect();
            out.push((
                "prompt.offsets".into(),
                Tensor::from_parts(vec![offs.len()], offs),
            ));
        }
        out
    }

    /// Restores tensors written by [`TunedModel::state_tensors`]; shapes must match this model.
    pub fn load_state(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut expected: Vec<String> = self.state_tensors().into_iter().map(|(n, _)| n).collect();
        expected.sort();
        let mut present: Vec<String> = named
            .keys()
            .filter(|k| k.starts_with("prompt.") || k.starts_with("head."))
            .cloned()
            .collect();
        present.sort();
        if expected != present {
            return Err(Error::config(
                "checkpoint",
                format!("tuned-state tensors {present:?} do not match the configured model {expected:?}"),
            ));
        }
        for (name, t) in self.trainable_mut() {
            let src = &named[&name];
            if src.shape() != t.shape() {
                return Err(Error::shape("load_state", src.shape(), t.shape()));
            }
            *t = src.clone();
        }
        if let Some(f) = &mut self.bank.fll {
            *f = named["prompt.fll"].clone();
        }
        if let Some(offs) = named.get("prompt.offsets") {
            for ((_, o), v) in self.bank.offsets.iter_mut().zip(offs.data()) {
                *o = *v as usize;
            }
        }
        Ok(())
    }
}
