//! Minimal pre-norm ViT encoder with per-tensor freezing.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Fnv, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

pub const LAYERNORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes_pretrain: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            depth: 6,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            num_classes_pretrain: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("depth", self.depth),
            ("width", self.width),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes_pretrain", self.num_classes_pretrain),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("backbone.{key}"), "must be positive"));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(
                "backbone.patch_size",
                format!("{} does not divide image_size {}", self.patch_size, self.image_size),
            ));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config(
                "backbone.heads",
                format!("{} does not divide width {}", self.heads, self.width),
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Flattened patch length, the fan-in of the patch projection.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    /// Token count with `prompts` prompt rows: class + prompts + patches.
    pub fn seq_len(&self, prompts: usize) -> usize {
        1 + prompts + self.num_patches()
    }

    /// Closed-form backbone parameter count (excluding any classification head).
    pub fn parameter_count(&self) -> usize {
        let d = self.width;
        let h = self.mlp_hidden();
        let embed = self.patch_dim() * d + d + d + (1 + self.num_patches()) * d;
        let layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
        embed + self.depth * layer + 2 * d
    }
}

/// Frozen (or, during pretraining, trainable) encoder parameters by name.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    tensors: BTreeMap<String, Arc<Tensor>>,
    frozen: BTreeSet<String>,
}

fn layer_name(i: usize, part: &str) -> String {
    format!("layers.{i}.{part}")
}

const LAYER_PARTS: [&str; 12] = [
    "norm1.gain",
    "norm1.bias",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.proj.weight",
    "attn.proj.bias",
    "norm2.gain",
    "norm2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

impl Backbone {
    /// Expected tensor shapes by name.
    pub fn layout(config: &BackboneConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.width;
        let h = config.mlp_hidden();
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![config.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![1, d]),
            ("pos_embed".to_string(), vec![1 + config.num_patches(), d]),
        ];
        for i in 1..=config.depth {
            let shapes = [
                vec![d],
                vec![d],
                vec![d, 3 * d],
                vec![3 * d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, h],
                vec![h],
                vec![h, d],
                vec![d],
            ];
            for (part, shape) in LAYER_PARTS.iter().zip(shapes) {
                out.push((layer_name(i, part), shape));
            }
        }
        out.push(("norm.gain".to_string(), vec![d]));
        out.push(("norm.bias".to_string(), vec![d]));
        out
    }

    /// Truncated-normal weights, zero biases, unit norm gains. All tensors start trainable.
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in Self::layout(&config) {
            let t = if name.ends_with(".gain") {
                Tensor::ones(&shape)
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                Tensor::trunc_normal(&shape, INIT_STD, rng)
            };
            tensors.insert(name, Arc::new(t));
        }
        Ok(Self {
            config,
            tensors,
            frozen: BTreeSet::new(),
        })
    }

    /// Rebuilds a backbone from named tensors, checking every expected name and shape.
    pub fn from_tensors(config: BackboneConfig, mut named: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in Self::layout(&config) {
            let t = named
                .remove(&name)
                .ok_or_else(|| Error::config(format!("checkpoint.{name}"), "missing tensor"))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("backbone tensor", t.shape(), &shape));
            }
            tensors.insert(name, Arc::new(t));
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::config(format!("checkpoint.{extra}"), "unexpected backbone tensor"));
        }
        let frozen = tensors.keys().cloned().collect();
        Ok(Self {
            config,
            tensors,
            frozen,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn freeze(&mut self) {
        self.frozen = self.tensors.keys().cloned().collect();
    }

    pub fn freeze_tensor(&mut self, name: &str) -> Result<()> {
        if !self.tensors.contains_key(name) {
            return Err(Error::config(name, "no such backbone tensor"));
        }
        self.frozen.insert(name.to_string());
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn fully_frozen(&self) -> bool {
        self.frozen.len() == self.tensors.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name).map(|t| t.as_ref())
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    /// Mutable access for optimizers; refuses frozen tensors.
    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        if self.frozen.contains(name) {
            return Err(Error::Contract(format!("backbone tensor `{name}` is frozen")));
        }
        self.tensors
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::config(name, "no such backbone tensor"))
    }

    /// Unfrozen tensors in name order, matching [`BoundBackbone::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<(&str, &mut Tensor)> {
        let frozen = &self.frozen;
        self.tensors
            .iter_mut()
            .filter(|(n, _)| !frozen.contains(*n))
            .map(|(n, t)| (n.as_str(), Arc::make_mut(t)))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Order-sensitive checksum over every tensor's name and bits.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for (name, t) in &self.tensors {
            h.write(name.as_bytes());
            h.write(&t.checksum().to_le_bytes());
        }
        h.0
    }

    /// Registers every tensor in `g`: frozen ones as shared constants, the rest as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundBackbone {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            let v = if self.frozen.contains(name) {
                g.constant_shared(Arc::clone(t))
            } else {
                g.param(t.as_ref().clone())
            };
            vars.insert(name.clone(), v);
        }
        let get = |n: &str| vars[n];
        let layers = (1..=self.config.depth)
            .map(|i| {
                let p = |part: &str| vars[&layer_name(i, part)];
                BoundLayer {
                    norm1: (p("norm1.gain"), p("norm1.bias")),
                    qkv: (p("attn.qkv.weight"), p("attn.qkv.bias")),
                    proj: (p("attn.proj.weight"), p("attn.proj.bias")),
                    norm2: (p("norm2.gain"), p("norm2.bias")),
                    fc1: (p("mlp.fc1.weight"), p("mlp.fc1.bias")),
                    fc2: (p("mlp.fc2.weight"), p("mlp.fc2.bias")),
                }
            })
            .collect();
        BoundBackbone {
            config: self.config.clone(),
            patch: (get("patch_embed.weight"), get("patch_embed.bias")),
            cls: get("cls_token"),
            pos: get("pos_embed"),
            layers,
            norm: (get("norm.gain"), get("norm.bias")),
            trainable: vars
                .iter()
                .filter(|(n, _)| !self.frozen.contains(*n))
                .map(|(n, v)| (n.clone(), *v))
                .collect(),
        }
    }

    /// Patch tokens of one image with their position embeddings, `[num_patches, d]`.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let tokens = b.embed(&mut g, &[image])?;
        let np = self.config.num_patches();
        let patches = g.slice(tokens, 0, 1, np)?;
        Ok(g.value(patches).clone())
    }

    /// One encoder layer (`i` is 1-based) on a `[S, d]` token matrix; returns the
    /// output tokens and the attention probabilities `[heads, S, S]`.
    pub fn encoder_layer(&self, i: usize, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        if i == 0 || i > self.config.depth {
            return Err(Error::Bounds {
                op: "encoder_layer",
                start: i,
                end: i + 1,
                len: self.config.depth + 1,
            });
        }
        let (s, _) = tokens.dims2()?;
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let x = g.constant(tokens.clone());
        let (y, attn) = b.layer(&mut g, i, x, 1, s)?;
        let probs = g.attention_probs(attn).expect("attention node");
        let (h, s) = (self.config.heads, s);
        Ok((g.value(y).clone(), probs.reshape(&[h, s, s])?))
    }

    /// Unprompted forward through `head`, `[num_classes]` logits.
    pub fn pretrain_forward(&self, head: &Head, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let hb = head.bind(&mut g, false);
        let x = b.embed(&mut g, &[image])?;
        let seq = self.config.seq_len(0);
        let mut x = x;
        for i in 1..=self.config.depth {
            x = b.layer(&mut g, i, x, 1, seq)?.0;
        }
        let cls = b.class_tokens(&mut g, x, 1, seq)?;
        let logits = hb.logits(&mut g, cls)?;
        let c = head.num_classes();
        g.value(logits).reshape(&[c])
    }

    /// Binds everything as constants regardless of the frozen set.
    pub(crate) fn bind_frozen(&self, g: &mut Graph) -> BoundBackbone {
        let mut all = self.clone();
        all.freeze();
        all.bind(g)
    }
}

/// Splits an image `[channels, H, W]` into non-overlapping flattened patches
/// `[num_patches, patch·patch·channels]`, row-major over the patch grid.
pub fn patchify(image: &Tensor, config: &BackboneConfig) -> Result<Tensor> {
    let (c, s, p) = (config.channels, config.image_size, config.patch_size);
    if image.shape() != [c, s, s] {
        return Err(Error::shape("embed", image.shape(), &[c, s, s]));
    }
    let side = s / p;
    let data = image.data();
    let mut out = Vec::with_capacity(side * side * p * p * c);
    for py in 0..side {
        for px in 0..side {
            for ch in 0..c {
                for y in 0..p {
                    let row = ch * s * s + (py * p + y) * s + px * p;
                    out.extend_from_slice(&data[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![side * side, p * p * c], out)
}

pub struct BoundLayer {
    norm1: (Var, Var),
    qkv: (Var, Var),
    proj: (Var, Var),
    norm2: (Var, Var),
    fc1: (Var, Var),
    fc2: (Var, Var),
}

/// Backbone tensors registered in a graph.
pub struct BoundBackbone {
    config: BackboneConfig,
    patch: (Var, Var),
    cls: Var,
    pos: Var,
    layers: Vec<BoundLayer>,
    norm: (Var, Var),
    /// Names and vars of the tensors that will receive gradients.
    pub trainable: Vec<(String, Var)>,
}

fn affine(g: &mut Graph, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_tiled(y, b)
}

impl BoundBackbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `[batch·(1 + num_patches), d]`: per image, the class token followed by its patch tokens,
    /// position embeddings added.
    pub fn embed(&self, g: &mut Graph, images: &[&Tensor]) -> Result<Var> {
        let cfg = &self.config;
        let np = cfg.num_patches();
        let mut flat = Vec::with_capacity(images.len() * np * cfg.patch_dim());
        for img in images {
            flat.extend_from_slice(patchify(img, cfg)?.data());
        }
        let patches = g.constant(Tensor::new(vec![images.len() * np, cfg.patch_dim()], flat)?);
        let pe = affine(g, patches, self.patch)?;
        let map: Vec<(usize, usize)> = (0..images.len())
            .flat_map(|b| std::iter::once((0, 0)).chain((0..np).map(move |p| (1, b * np + p))))
            .collect();
        let tokens = g.gather_rows(&[self.cls, pe], &map)?;
        g.add_tiled(tokens, self.pos)
    }

    /// Pre-norm attention and MLP block on `[batch·seq, d]`; returns the output and the
    /// attention node (probabilities via [`Graph::attention_probs`]).
    pub fn layer(&self, g: &mut Graph, i: usize, x: Var, batch: usize, seq: usize) -> Result<(Var, Var)> {
        let l = &self.layers[i - 1];
        let h = g.layernorm(x, l.norm1.0, l.norm1.1, LAYERNORM_EPS)?;
        let qkv = affine(g, h, l.qkv)?;
        let attn = g.attention(qkv, batch, seq, self.config.heads)?;
        let o = affine(g, attn, l.proj)?;
        let x = g.add(x, o)?;
        let h = g.layernorm(x, l.norm2.0, l.norm2.1, LAYERNORM_EPS)?;
        let h = affine(g, h, l.fc1)?;
        let h = g.gelu(h);
        let h = affine(g, h, l.fc2)?;
        Ok((g.add(x, h)?, attn))
    }

    /// Final-norm class-token rows, `[batch, d]`.
    pub fn class_tokens(&self, g: &mut Graph, x: Var, batch: usize, seq: usize) -> Result<Var> {
        let map: Vec<(usize, usize)> = (0..batch).map(|b| (0, b * seq)).collect();
        let cls = g.gather_rows(&[x], &map)?;
        g.layernorm(cls, self.norm.0, self.norm.1, LAYERNORM_EPS)
    }
}

/// Linear classification head on the class-token output.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

pub struct BoundHead {
    pub weight: Var,
    pub bias: Var,
}

impl Head {
    pub fn init<R: Rng + ?Sized>(width: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::trunc_normal(&[width, classes], INIT_STD, rng),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundHead {
        BoundHead {
            weight: g.leaf(self.weight.clone(), trainable),
            bias: g.leaf(self.bias.clone(), trainable),
        }
    }
}

impl BoundHead {
    pub fn logits(&self, g: &mut Graph, cls: Var) -> Result<Var> {
        affine(g, cls, (self.weight, self.bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk() -> Backbone {
        Backbone::init(BackboneConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn config_rules() {
        let mut c = BackboneConfig::default();
        assert!(c.validate().is_ok());
        c.patch_size = 7;
        assert!(matches!(c.validate(), Err(Error::Config { .. })));
        let c = BackboneConfig {
            heads: 5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn closed_form_count_matches_tensors() {
        let b = desk();
        assert_eq!(b.parameter_count(), b.config().parameter_count());
    }

    #[test]
    fn embed_shape_and_linearity() {
        let mut b = desk();
        let img = Tensor::from_fn(&[1, 32, 32], |i| (i % 7) as f64 / 7.0);
        let e = b.embed(&img).unwrap();
        assert_eq!(e.shape(), [16, 64]);
        assert_eq!(b.embed(&img).unwrap(), e);

        // Zero image and zero projection bias leave only the patch position embeddings.
        *b.tensor_mut("patch_embed.bias").unwrap() = Tensor::zeros(&[64]);
        let z = b.embed(&Tensor::zeros(&[1, 32, 32])).unwrap();
        let pos = b.tensor("pos_embed").unwrap().rows(1, 16).unwrap();
        assert_eq!(z, pos);
    }

    #[test]
    fn embed_rejects_wrong_size() {
        let b = desk();
        assert!(matches!(
            b.embed(&Tensor::zeros(&[1, 16, 16])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let b = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tokens = Tensor::uniform(&[21, 64], -1.0, 1.0, &mut rng);
        let (y, attn) = b.encoder_layer(2, &tokens).unwrap();
        assert_eq!(y.shape(), [21, 64]);
        assert_eq!(attn.shape(), [4, 21, 21]);
        for row in attn.data().chunks(21) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
        assert!(b.encoder_layer(0, &tokens).is_err());
        assert!(b.encoder_layer(7, &tokens).is_err());
    }

    #[test]
    fn vit_base_sequence_length() {
        let cfg = BackboneConfig {
            image_size: 224,
            patch_size: 16,
            ..Default::default()
        };
        assert_eq!(cfg.num_patches(), 196);
        assert_eq!(cfg.seq_len(10), 207);
    }

    #[test]
    fn frozen_tensors_refuse_mutation() {
        let mut b = desk();
        b.freeze();
        assert!(b.tensor_mut("cls_token").is_err());
        assert!(b.fully_frozen());
    }

    #[test]
    fn pretrain_logits_shape() {
        let b = desk();
        let head = Head::init(64, 5, &mut ChaCha8Rng::seed_from_u64(0));
        let logits = b.pretrain_forward(&head, &Tensor::zeros(&[1, 32, 32])).unwrap();
        assert_eq!(logits.shape(), [5]);
    }
}
