//! Optimizers, schedules and the pretrain/tune drivers.

use crate::autodiff::Graph;
use crate::backbone::{Backbone, BackboneConfig, Head};
use crate::data::{generate, Normalizer, Split, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::prompt::{PromptConfig, TunedModel};
use crate::seeding;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lr_grid: Vec<f64>,
    pub wd_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            base_lr: 0.1,
            weight_decay: 1e-4,
            momentum: 0.9,
            lr_grid: vec![1.0, 0.5, 0.1, 0.05],
            wd_grid: vec![1e-4, 0.0],
            seeds: vec![0, 1, 2, 3, 4],
            warmup_epochs: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("train.base_lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn validate_grids(&self) -> Result<()> {
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::config("train.lr_grid", "must be a nonempty list of positive rates"));
        }
        if self.wd_grid.is_empty() || self.wd_grid.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::config("train.wd_grid", "must be a nonempty list of nonnegative values"));
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then half-cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    let progress = if span == 0 {
        1.0
    } else {
        ((step - warmup_steps) as f64 / span as f64).min(1.0)
    };
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Momentum SGD with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("sgd_step", &[params.len()], &[grads.len()]));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.len() != p.numel() {
                return Err(Error::shape("sgd_step", p.shape(), g.shape()));
            }
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *w -= lr * weight_decay * *w;
                *vi = self.momentum * *vi + gi;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// AdamW, used only for backbone pretraining.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl AdamW {
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("adamw_step", &[params.len()], &[grads.len()]));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw_step", p.shape(), g.shape()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= lr * weight_decay * *w;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy and gradients of every trainable tensor, in
/// [`TunedModel::trainable`] order.
pub struct StepOutput {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub peak_bytes: usize,
}

pub fn loss_and_grads(model: &TunedModel, images: &[&Tensor], labels: &[usize]) -> Result<StepOutput> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let f = model.forward(&mut g, &bound, images)?;
    let loss = g.cross_entropy(f.logits, labels)?;
    let mut grads = g.backward(loss)?;
    // A tensor the loss does not depend on (an LLL map with m = 0) gets a zero gradient.
    let tensors = bound
        .trainable()
        .into_iter()
        .map(|(_, v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    Ok(StepOutput {
        loss: g.value(loss).data()[0],
        grads: tensors,
        peak_bytes: grads.peak_bytes(),
    })
}

pub const EVAL_BATCH: usize = 64;

/// Mean cross-entropy and accuracy of `model` on `split`.
pub fn evaluate(model: &TunedModel, split: &Split) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in split.examples.chunks(EVAL_BATCH) {
        let images: Vec<&Tensor> = chunk.iter().map(|e| &e.image).collect();
        let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let f = model.forward(&mut g, &bound, &images)?;
        let l = g.cross_entropy(f.logits, &labels)?;
        loss += g.value(l).data()[0] * chunk.len() as f64;
        correct += count_correct(g.value(f.logits), &labels);
    }
    let n = split.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(&logits.data()[i * c..(i + 1) * c]) == l)
        .count()
}

/// Per-epoch example order for `seed`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeding::stream(seed, "train.shuffle", epoch as u64));
    order
}

pub fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    /// Mean train loss per epoch; NaN after divergence.
    pub train_loss: Vec<f64>,
    /// Validation accuracy after each epoch; NaN after divergence.
    pub val_acc: Vec<f64>,
    pub test_acc: Option<f64>,
    pub diverged: bool,
    /// Loss of every optimizer step in order.
    #[serde(skip)]
    pub step_loss: Vec<f64>,
    /// Median wall-clock seconds per training batch.
    pub train_batch_secs: f64,
    pub peak_bytes: usize,
}

impl RunRecord {
    pub fn final_val_acc(&self) -> f64 {
        self.val_acc.last().copied().unwrap_or(f64::NAN)
    }

    /// `epoch,train_loss,val_acc`, one row per configured epoch. No timing, so runs compare byte for byte.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_acc\n");
        for (e, (l, a)) in self.train_loss.iter().zip(&self.val_acc).enumerate() {
            writeln!(s, "{},{l:?},{a:?}", e + 1).unwrap();
        }
        s
    }

    pub fn summary_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("record serializes");
        let obj = v.as_object_mut().unwrap();
        obj.remove("train_loss");
        obj.remove("val_acc");
        obj.insert("final_train_loss".into(), json_num(self.train_loss.last().copied()));
        obj.insert("final_val_acc".into(), json_num(Some(self.final_val_acc())));
        serde_json::to_string_pretty(&v).unwrap()
    }
}

fn json_num(x: Option<f64>) -> serde_json::Value {
    x.filter(|v| v.is_finite())
        .map_or(serde_json::Value::Null, serde_json::Value::from)
}

/// Data seen by one tuning run.
#[derive(Clone, Copy)]
pub struct TuneData<'a> {
    pub train: &'a Split,
    pub val: &'a Split,
    pub test: Option<&'a Split>,
}

/// Trains the prompts, optional LLL and head of `model` in place.
///
/// `seed` fixes the batch order; the model's initial state is fixed by its own
/// construction seed. A non-finite loss stops the run and marks it diverged.
pub fn train_tuned(
    model: &mut TunedModel,
    data: TuneData,
    cfg: &TrainConfig,
    lr: f64,
    weight_decay: f64,
    seed: u64,
) -> Result<RunRecord> {
    cfg.validate()?;
    let n = data.train.len();
    if n == 0 {
        return Err(Error::config("data.train_count", "no training examples"));
    }
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs.min(cfg.epochs);
    let mut opt = Sgd::new(cfg.momentum);
    let mut rec = RunRecord {
        seed,
        lr,
        weight_decay,
        alpha: model.config.alpha,
        train_loss: Vec::with_capacity(cfg.epochs),
        val_acc: Vec::with_capacity(cfg.epochs),
        test_acc: None,
        diverged: false,
        step_loss: Vec::with_capacity(total),
        train_batch_secs: f64::NAN,
        peak_bytes: 0,
    };
    let mut times = Vec::with_capacity(total);
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let order = epoch_order(n, seed, epoch);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<&Tensor> = batch.iter().map(|&i| &data.train.examples[i].image).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data.train.examples[i].label).collect();
            let t0 = Instant::now();
            let out = loss_and_grads(model, &images, &labels)?;
            rec.step_loss.push(out.loss);
            if !out.loss.is_finite() || out.grads.iter().any(|g| !g.is_finite()) {
                rec.diverged = true;
                break 'epochs;
            }
            let lr_t = cosine_lr(step, total, lr, warmup);
            let mut params: Vec<&mut Tensor> = model.trainable_mut().into_iter().map(|(_, t)| t).collect();
            opt.step(&mut params, &out.grads, lr_t, weight_decay)?;
            times.push(t0.elapsed().as_secs_f64());
            rec.peak_bytes = rec.peak_bytes.max(out.peak_bytes);
            sum += out.loss * batch.len() as f64;
            step += 1;
        }
        rec.train_loss.push(sum / n as f64);
        rec.val_acc.push(evaluate(model, data.val)?.1);
    }
    if rec.diverged {
        rec.train_loss.resize(cfg.epochs, f64::NAN);
        rec.val_acc.resize(cfg.epochs, f64::NAN);
    } else if let Some(test) = data.test {
        rec.test_acc = Some(evaluate(model, test)?.1);
    }
    rec.train_batch_secs = median(&mut times);
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub task: TaskSpec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_epochs: 1,
            task: TaskSpec {
                train_count: 4000,
                val_count: 400,
                test_count: 400,
                ..TaskSpec::new(TaskKind::SourceOrientation, 8, 0)
            },
        }
    }
}

pub struct Pretrained {
    /// Frozen.
    pub backbone: Backbone,
    pub head: Head,
    pub normalizer: Normalizer,
    pub record: RunRecord,
}

impl Pretrained {
    /// Backbone plus normalization constants, in checkpoint order.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .backbone
            .named_tensors()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        out.extend(self.normalizer.to_tensors());
        out
    }
}

fn pretrain_loss_and_grads(
    backbone: &Backbone,
    head: &Head,
    images: &[&Tensor],
    labels: &[usize],
) -> Result<(f64, Vec<(String, Tensor)>)> {
    let cfg = backbone.config();
    let (batch, seq) = (images.len(), cfg.seq_len(0));
    let mut g = Graph::new();
    let bb = backbone.bind(&mut g);
    let hb = head.bind(&mut g, true);
    let mut x = bb.embed(&mut g, images)?;
    for i in 1..=cfg.depth {
        x = bb.layer(&mut g, i, x, batch, seq)?.0;
    }
    let cls = bb.class_tokens(&mut g, x, batch, seq)?;
    let logits = hb.logits(&mut g, cls)?;
    let loss = g.cross_entropy(logits, labels)?;
    let mut grads = g.backward(loss)?;
    let mut out = Vec::with_capacity(bb.trainable.len() + 2);
    for (name, v) in bb
        .trainable
        .iter()
        .cloned()
        .chain([("head.weight".to_string(), hb.weight), ("head.bias".to_string(), hb.bias)])
    {
        let t = grads
            .take(v)
            .ok_or_else(|| Error::Contract(format!("no gradient reached `{name}`")))?;
        out.push((name, t));
    }
    Ok((g.value(loss).data()[0], out))
}

/// Accuracy of a backbone plus pretraining head.
pub fn pretrain_accuracy(backbone: &Backbone, head: &Head, split: &Split) -> Result<f64> {
    let mut correct = 0;
    for e in &split.examples {
        if argmax(backbone.pretrain_forward(head, &e.image)?.data()) == e.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.len().max(1) as f64)
}

/// Trains a backbone on the source task with AdamW, then freezes it.
pub fn pretrain(config: &BackboneConfig, pcfg: &PretrainConfig, seed: u64) -> Result<Pretrained> {
    config.validate()?;
    if pcfg.task.image_size != config.image_size {
        return Err(Error::config("pretrain.task.image_size", "must equal backbone.image_size"));
    }
    if pcfg.epochs == 0 || pcfg.batch_size == 0 {
        return Err(Error::config("pretrain.epochs", "epochs and batch_size must be positive"));
    }
    let data = generate(&pcfg.task)?;
    let normalizer = Normalizer::fit(&data.train.images())?;
    let train = normalizer.normalize_split(&data.train)?;
    let val = normalizer.normalize_split(&data.val)?;

    let mut backbone = Backbone::init(config.clone(), &mut seeding::stream(seed, "backbone", 0))?;
    let mut head = Head::init(
        config.width,
        pcfg.task.num_classes,
        &mut seeding::stream(seed, "pretrain.head", 0),
    );
    let n = train.len();
    let steps_per_epoch = n.div_ceil(pcfg.batch_size);
    let total = steps_per_epoch * pcfg.epochs;
    let warmup = steps_per_epoch * pcfg.warmup_epochs;
    let mut opt = AdamW::default();
    let mut rec = RunRecord {
        seed,
        lr: pcfg.lr,
        weight_decay: pcfg.weight_decay,
        alpha: f64::NAN,
        train_loss: Vec::new(),
        val_acc: Vec::new(),
        test_acc: None,
        diverged: false,
        step_loss: Vec::new(),
        train_batch_secs: f64::NAN,
        peak_bytes: 0,
    };
    let mut times = Vec::new();
    let mut step = 0;
    for epoch in 0..pcfg.epochs {
        let mut sum = 0.0;
        for batch in epoch_order(n, seed, epoch).chunks(pcfg.batch_size) {
            let images: Vec<&Tensor> = batch.iter().map(|&i| &train.examples[i].image).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.examples[i].label).collect();
            let t0 = Instant::now();
            let (loss, grads) = pretrain_loss_and_grads(&backbone, &head, &images, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Contract(format!("pretraining diverged at step {step}")));
            }
            rec.step_loss.push(loss);
            let lr_t = cosine_lr(step, total, pcfg.lr, warmup);
            let grads: Vec<Tensor> = grads.into_iter().map(|(_, t)| t).collect();
            let mut params: Vec<&mut Tensor> = backbone.trainable_mut().into_iter().map(|(_, t)| t).collect();
            params.push(&mut head.weight);
            params.push(&mut head.bias);
            opt.step(&mut params, &grads, lr_t, pcfg.weight_decay)?;
            times.push(t0.elapsed().as_secs_f64());
            sum += loss * batch.len() as f64;
            step += 1;
        }
        rec.train_loss.push(sum / n as f64);
        rec.val_acc.push(pretrain_accuracy(&backbone, &head, &val)?);
    }
    rec.train_batch_secs = median(&mut times);
    backbone.freeze();
    Ok(Pretrained {
        backbone,
        head,
        normalizer,
        record: rec,
    })
}

/// Worker pool capped by `VFPT_THREADS` when set.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("VFPT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config("VFPT_THREADS", format!("expected a positive integer, got `{v}`")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Contract(format!("cannot start worker pool: {e}")))
}

/// One tuning run from scratch: fresh prompts and head from `seed`.
pub fn tune_once(
    backbone: &Arc<Backbone>,
    prompt: &PromptConfig,
    num_classes: usize,
    data: TuneData,
    cfg: &TrainConfig,
    lr: f64,
    weight_decay: f64,
    seed: u64,
) -> Result<(TunedModel, RunRecord)> {
    let mut model = TunedModel::new(Arc::clone(backbone), prompt.clone(), num_classes, seed)?;
    let rec = train_tuned(&mut model, data, cfg, lr, weight_decay, seed)?;
    Ok((model, rec))
}

#[derive(Clone, Debug)]
pub struct GridResult {
    /// One record per (lr, wd) cell in grid order.
    pub cells: Vec<RunRecord>,
    pub best: Option<(f64, f64)>,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lr,weight_decay,final_train_loss,final_val_acc,diverged\n");
        for c in &self.cells {
            writeln!(
                s,
                "{:?},{:?},{:?},{:?},{}",
                c.lr,
                c.weight_decay,
                c.train_loss.last().copied().unwrap_or(f64::NAN),
                c.final_val_acc(),
                c.diverged
            )
            .unwrap();
        }
        s
    }
}

/// Best cell by final validation accuracy; ties go to the smaller lr, then the smaller wd.
pub fn select_best(cells: &[RunRecord]) -> Option<(f64, f64)> {
    cells
        .iter()
        .filter(|c| !c.diverged && c.final_val_acc().is_finite())
        .min_by(|a, b| {
            b.final_val_acc()
                .total_cmp(&a.final_val_acc())
                .then(a.lr.total_cmp(&b.lr))
                .then(a.weight_decay.total_cmp(&b.weight_decay))
        })
        .map(|c| (c.lr, c.weight_decay))
}

pub fn grid_search(
    backbone: &Arc<Backbone>,
    prompt: &PromptConfig,
    num_classes: usize,
    data: TuneData,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<GridResult> {
    cfg.validate_grids()?;
    let grid: Vec<(f64, f64)> = cfg
        .lr_grid
        .iter()
        .flat_map(|&lr| cfg.wd_grid.iter().map(move |&wd| (lr, wd)))
        .collect();
    let data = TuneData { test: None, ..data };
    let cells = worker_pool()?.install(|| {
        grid.par_iter()
            .map(|&(lr, wd)| tune_once(backbone, prompt, num_classes, data, cfg, lr, wd, seed).map(|r| r.1))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(GridResult {
        best: select_best(&cells),
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub seed: u64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub alpha: f64,
    pub mean_val_acc: f64,
    pub std_val_acc: f64,
    pub runs: usize,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
    pub records: Vec<RunRecord>,
    /// Tuned models in row order.
    pub models: Vec<TunedModel>,
}

/// Sample mean and (n−1) standard deviation of the finite entries.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SweepResult {
    /// One row per (α, seed).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,seed,val_acc,test_acc,diverged\n");
        for r in &self.rows {
            writeln!(s, "{:?},{},{:?},{:?},{}", r.alpha, r.seed, r.val_acc, r.test_acc, r.diverged).unwrap();
        }
        s
    }

    /// The accuracy-versus-α curve: `alpha,mean_val_acc,std_val_acc,runs`.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("alpha,mean_val_acc,std_val_acc,runs\n");
        for r in &self.summary {
            writeln!(s, "{:?},{:?},{:?},{}", r.alpha, r.mean_val_acc, r.std_val_acc, r.runs).unwrap();
        }
        s
    }

    pub fn summary_for(&self, alpha: f64) -> Option<&SweepSummary> {
        self.summary.iter().find(|s| s.alpha == alpha)
    }
}

/// One tuned run per (α, seed) at fixed `lr`/`wd`; α only changes `prompt.alpha`.
#[allow(clippy::too_many_arguments)]
pub fn alpha_sweep(
    backbone: &Arc<Backbone>,
    prompt: &PromptConfig,
    num_classes: usize,
    data: TuneData,
    cfg: &TrainConfig,
    alphas: &[f64],
    seeds: &[u64],
    lr: f64,
    weight_decay: f64,
) -> Result<SweepResult> {
    if alphas.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep", "need at least one alpha and one seed"));
    }
    let depth = backbone.config().depth;
    let configs: Vec<PromptConfig> = alphas
        .iter()
        .map(|&a| {
            let c = PromptConfig {
                alpha: a,
                ..prompt.clone()
            };
            c.validate(depth).map(|_| c)
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, u64)> = (0..alphas.len())
        .flat_map(|a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let (models, records): (Vec<TunedModel>, Vec<RunRecord>) = worker_pool()?
        .install(|| {
            jobs.par_iter()
                .map(|&(a, s)| tune_once(backbone, &configs[a], num_classes, data, cfg, lr, weight_decay, s))
                .collect::<Result<Vec<_>>>()
        })?
        .into_iter()
        .unzip();
    let rows: Vec<SweepRow> = jobs
        .iter()
        .zip(&records)
        .map(|(&(a, s), r)| SweepRow {
            alpha: alphas[a],
            seed: s,
            val_acc: r.final_val_acc(),
            test_acc: r.test_acc.unwrap_or(f64::NAN),
            diverged: r.diverged,
        })
        .collect();
    let summary = alphas
        .iter()
        .map(|&a| {
            let accs: Vec<f64> = rows.iter().filter(|r| r.alpha == a).map(|r| r.val_acc).collect();
            let (mean, std) = mean_std(&accs);
            SweepSummary {
                alpha: a,
                mean_val_acc: mean,
                std_val_acc: std,
                runs: accs.iter().filter(|x| x.is_finite()).count(),
            }
        })
        .collect();
    Ok(SweepResult {
        rows,
        summary,
        records,
        models,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TimingReport {
    pub alpha: f64,
    pub prompt_length: usize,
    pub batch_size: usize,
    pub train_batch_secs: f64,
    pub infer_batch_secs: f64,
    pub peak_bytes: usize,
    pub tuned_params: usize,
}

/// Median train-step and inference times per model over `batches` measured
/// rounds after `warmup` unmeasured ones. Models are interleaved round by
/// round so drift in machine load hits all of them alike.
pub fn timing_harness(
    models: &[TunedModel],
    images: &[&Tensor],
    labels: &[usize],
    warmup: usize,
    batches: usize,
) -> Result<Vec<TimingReport>> {
    let mut train: Vec<Vec<f64>> = vec![Vec::with_capacity(batches); models.len()];
    let mut infer = train.clone();
    let mut peak = vec![0usize; models.len()];
    let mut work: Vec<TunedModel> = models.to_vec();
    let mut opts: Vec<Sgd> = models.iter().map(|_| Sgd::new(0.9)).collect();
    for round in 0..warmup + batches {
        for (i, model) in work.iter_mut().enumerate() {
            let t0 = Instant::now();
            let out = loss_and_grads(model, images, labels)?;
            let mut params: Vec<&mut Tensor> = model.trainable_mut().into_iter().map(|(_, t)| t).collect();
            opts[i].step(&mut params, &out.grads, 1e-3, 0.0)?;
            let dt_train = t0.elapsed().as_secs_f64();
            let t0 = Instant::now();
            std::hint::black_box(model.predict(images)?);
            let dt_infer = t0.elapsed().as_secs_f64();
            peak[i] = peak[i].max(out.peak_bytes);
            if round >= warmup {
                train[i].push(dt_train);
                infer[i].push(dt_infer);
            }
        }
    }
    Ok(models
        .iter()
        .enumerate()
        .map(|(i, m)| TimingReport {
            alpha: m.config.alpha,
            prompt_length: m.config.length,
            batch_size: images.len(),
            train_batch_secs: median(&mut train[i]),
            infer_batch_secs: median(&mut infer[i]),
            peak_bytes: peak[i],
            tuned_params: m.parameter_count().tuned,
        })
        .collect())
}
