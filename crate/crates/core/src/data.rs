//! Synthetic image tasks.
//!
//! Every example is drawn from its own counter-based stream, so generation
//! is pure per index and independent of order or thread count.

use crate::error::{Error, Result};
use crate::io;
use crate::seeding;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SourceOrientation,
    SpatialLocation,
    FrequencyBand,
    HybridCount,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SourceOrientation => "source_orientation",
            TaskKind::SpatialLocation => "spatial_location",
            TaskKind::FrequencyBand => "frequency_band",
            TaskKind::HybridCount => "hybrid_count",
        }
    }
}

/// Band centres in cycles per image for [`TaskKind::FrequencyBand`].
pub fn band_center(k: usize) -> f64 {
    2.0 + 3.0 * k as f64
}

pub const BAND_HALF_WIDTH: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub num_classes: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub image_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            name: "frequency_band".into(),
            kind: TaskKind::FrequencyBand,
            num_classes: 4,
            train_count: 800,
            val_count: 200,
            test_count: 200,
            image_size: 32,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn new(kind: TaskKind, num_classes: usize, seed: u64) -> Self {
        Self {
            name: kind.name().into(),
            kind,
            num_classes,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("data.train_count", self.train_count),
            ("data.val_count", self.val_count),
            ("data.test_count", self.test_count),
            ("data.image_size", self.image_size),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::config("data.num_classes", "need at least 2 classes"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("data.noise_std", "must be finite and nonnegative"));
        }
        let s = self.image_size as f64;
        match self.kind {
            TaskKind::FrequencyBand => {
                let top = band_center(self.num_classes - 1) + BAND_HALF_WIDTH;
                if top >= s / 2.0 {
                    return Err(Error::config(
                        "data.num_classes",
                        format!("highest band ({top} cycles) reaches Nyquist for size {s}"),
                    ));
                }
            }
            TaskKind::SpatialLocation => {
                if cells_per_side(self.num_classes) * 4 > self.image_size {
                    return Err(Error::config("data.num_classes", "too many cells for the image size"));
                }
            }
            TaskKind::HybridCount => {
                if self.num_classes > 8 || self.image_size < 16 {
                    return Err(Error::config("data.num_classes", "counting supports at most 8 blobs on ≥16 px"));
                }
            }
            TaskKind::SourceOrientation => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub examples: Vec<Example>,
    /// Index of every example in the generated pool it came from.
    pub indices: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn images(&self) -> Vec<&Tensor> {
        self.examples.iter().map(|e| &e.image).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for e in &self.examples {
            h[e.label] += 1;
        }
        h
    }

    pub fn map_images(&self, f: impl Fn(&Tensor) -> Tensor) -> Split {
        Split {
            examples: self
                .examples
                .iter()
                .map(|e| Example {
                    image: f(&e.image),
                    label: e.label,
                })
                .collect(),
            indices: self.indices.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

fn cells_per_side(classes: usize) -> usize {
    (1..).find(|g| g * g >= classes).unwrap()
}

fn grating(s: usize, cycles: f64, theta: f64, phase: f64, amp: f64) -> Vec<f64> {
    let (c, sn) = (theta.cos(), theta.sin());
    let mut px = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let t = (x as f64 * c + y as f64 * sn) / s as f64;
            px[y * s + x] = 0.5 + amp * (2.0 * PI * cycles * t + phase).sin();
        }
    }
    px
}

/// Clean (noise-free) pixels of one example.
fn render<R: Rng + ?Sized>(spec: &TaskSpec, label: usize, rng: &mut R) -> Vec<f64> {
    let s = spec.image_size;
    let c = spec.num_classes;
    match spec.kind {
        TaskKind::SourceOrientation => {
            let theta = (label as f64 + rng.random_range(0.15..0.85)) * PI / c as f64;
            let cycles = rng.random_range(2.0..6.0);
            grating(s, cycles, theta, rng.random_range(0.0..2.0 * PI), 0.4)
        }
        TaskKind::FrequencyBand => {
            let cycles = band_center(label) + rng.random_range(-BAND_HALF_WIDTH..BAND_HALF_WIDTH);
            let theta = rng.random_range(0.0..PI);
            grating(s, cycles, theta, rng.random_range(0.0..2.0 * PI), 0.4)
        }
        TaskKind::SpatialLocation => {
            let g = cells_per_side(c);
            let cell = s / g;
            let side = (cell * 3 / 4).max(2);
            let (cx, cy) = (label % g, label / g);
            let x0 = cx * cell + rng.random_range(0..=cell - side);
            let y0 = cy * cell + rng.random_range(0..=cell - side);
            let bg = rng.random_range(0.1..0.3);
            let fg = rng.random_range(0.8..1.0);
            let mut px = vec![bg; s * s];
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    px[y * s + x] = fg;
                }
            }
            px
        }
        TaskKind::HybridCount => {
            let count = label + 1;
            let sigma = s as f64 / 20.0;
            let margin = 3.0 * s as f64 / 32.0;
            let min_dist = 6.0 * s as f64 / 32.0;
            let mut centers: Vec<(f64, f64)> = Vec::with_capacity(count);
            while centers.len() < count {
                let p = (
                    rng.random_range(margin..s as f64 - margin),
                    rng.random_range(margin..s as f64 - margin),
                );
                if centers
                    .iter()
                    .all(|q| (p.0 - q.0).hypot(p.1 - q.1) >= min_dist)
                {
                    centers.push(p);
                }
            }
            let mut px = vec![0.1; s * s];
            for y in 0..s {
                for x in 0..s {
                    for &(cx, cy) in &centers {
                        let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        px[y * s + x] += 0.8 * (-r2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
            px
        }
    }
}

fn is_grating(kind: TaskKind) -> bool {
    matches!(kind, TaskKind::SourceOrientation | TaskKind::FrequencyBand)
}

/// Pool indices `2jC + k` and `(2j+1)C + k` form antithetic pairs.
fn pair_of(index: usize, classes: usize) -> (usize, bool) {
    let block = index / (2 * classes);
    let within = index % (2 * classes);
    (block * classes + within % classes, within >= classes)
}

/// One example of `spec`; `index` selects its streams within `pool`.
///
/// Grating tasks are generated in antithetic pairs (see [`pair_of`]) that
/// share orientation and frequency and differ by π in phase, so a split that
/// keeps pairs together has an exactly flat mean image per class.
pub fn example(spec: &TaskSpec, pool: &str, index: usize, label: usize) -> Example {
    let purpose = format!("data.{}.{pool}", spec.kind.name());
    let mut px = if is_grating(spec.kind) {
        let (pair, flip) = pair_of(index, spec.num_classes);
        let mut shape_rng = seeding::stream(spec.seed, &purpose, pair as u64);
        let px = render(spec, label, &mut shape_rng);
        if flip {
            px.into_iter().map(|v| 1.0 - v).collect()
        } else {
            px
        }
    } else {
        render(spec, label, &mut seeding::stream(spec.seed, &purpose, index as u64))
    };
    let mut rng = seeding::stream(spec.seed, &format!("{purpose}.noise"), index as u64);
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated noise_std");
        for p in &mut px {
            *p += noise.sample(&mut rng);
        }
    }
    for p in &mut px {
        *p = p.clamp(0.0, 1.0);
    }
    let s = spec.image_size;
    Example {
        image: Tensor::from_parts(vec![1, s, s], px),
        label,
    }
}

/// A class-balanced pool: example `i` has label `i % classes`.
pub fn pool(spec: &TaskSpec, name: &str, count: usize) -> Vec<Example> {
    (0..count)
        .map(|i| example(spec, name, i, i % spec.num_classes))
        .collect()
}

/// Stratified seeded split of `pool` into train and val.
///
/// Each class is shuffled on its own, in units of antithetic pairs, and
/// classes are dealt round-robin, so every prefix stays balanced within one
/// example per class.
pub fn split(
    examples: &[Example],
    classes: usize,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<(Split, Split)> {
    if n_train + n_val > examples.len() {
        return Err(Error::config(
            "data.train_count",
            format!(
                "{n_train} train + {n_val} val exceeds the {} available examples",
                examples.len()
            ),
        ));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, e) in examples.iter().enumerate() {
        if e.label >= classes {
            return Err(Error::config("data.num_classes", format!("label {} out of range", e.label)));
        }
        by_class[e.label].push(i);
    }
    for (c, idx) in by_class.iter_mut().enumerate() {
        let mut pairs: Vec<Vec<usize>> = idx.chunks(2).map(<[usize]>::to_vec).collect();
        pairs.shuffle(&mut seeding::stream(seed, "data.split", c as u64));
        *idx = pairs.concat();
    }
    let longest = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let order: Vec<usize> = (0..longest)
        .flat_map(|r| by_class.iter().filter_map(move |idx| idx.get(r).copied()))
        .collect();
    let take = |ids: &[usize]| Split {
        examples: ids.iter().map(|&i| examples[i].clone()).collect(),
        indices: ids.to_vec(),
    };
    Ok((
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_val]),
    ))
}

pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let all = pool(spec, "pool", spec.train_count + spec.val_count);
    let (train, val) = split(&all, spec.num_classes, spec.train_count, spec.val_count, spec.seed)?;
    let test = pool(spec, "test", spec.test_count);
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
        test: Split {
            indices: (0..test.len()).collect(),
            examples: test,
        },
    })
}

/// Channel-wise standardization constants.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn fit(images: &[&Tensor]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Contract("cannot fit a normalizer on no images".into()))?;
        let ch = first.shape()[0];
        let per = first.numel() / ch;
        let mut sum = vec![0.0; ch];
        let mut sq = vec![0.0; ch];
        for im in images {
            if im.shape() != first.shape() {
                return Err(Error::shape("normalizer", first.shape(), im.shape()));
            }
            for c in 0..ch {
                for &v in &im.data()[c * per..(c + 1) * per] {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (images.len() * per) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Ok(Self { mean, std })
    }

    fn apply(&self, image: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let ch = self.mean.len();
        if image.shape()[0] != ch {
            return Err(Error::shape("normalize", &[ch], &image.shape()[..1]));
        }
        let per = image.numel() / ch;
        let mut out = image.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i / per;
            *v = f(*v, self.mean[c], self.std[c]);
        }
        Ok(out)
    }

    pub fn normalize(&self, image: &Tensor) -> Result<Tensor> {
        self.apply(image, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, image: &Tensor) -> Result<Tensor> {
        self.apply(image, |v, m, s| v * s + m)
    }

    pub fn normalize_split(&self, split: &Split) -> Result<Split> {
        let examples = split
            .examples
            .iter()
            .map(|e| {
                Ok(Example {
                    image: self.normalize(&e.image)?,
                    label: e.label,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Split {
            examples,
            indices: split.indices.clone(),
        })
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        vec![
            ("data.mean".into(), Tensor::from_parts(vec![self.mean.len()], self.mean.clone())),
            ("data.std".into(), Tensor::from_parts(vec![self.std.len()], self.std.clone())),
        ]
    }

    pub fn from_tensors(named: &BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |k: &str| {
            named
                .get(k)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::config(format!("checkpoint.{k}"), "missing tensor"))
        };
        let (mean, std) = (get("data.mean")?, get("data.std")?);
        if mean.len() != std.len() {
            return Err(Error::shape("normalizer", &[mean.len()], &[std.len()]));
        }
        Ok(Self { mean, std })
    }
}

/// Accuracy of a pixel-space nearest-centroid classifier fit on `train`.
pub fn nearest_centroid_accuracy(train: &Split, eval: &Split, classes: usize) -> f64 {
    let n = train.examples[0].image.numel();
    let mut centroids = vec![vec![0.0; n]; classes];
    let counts = train.histogram(classes);
    for e in &train.examples {
        for (c, v) in centroids[e.label].iter_mut().zip(e.image.data()) {
            *c += v / counts[e.label] as f64;
        }
    }
    let correct = eval
        .examples
        .iter()
        .filter(|e| {
            let dist = |c: &Vec<f64>| -> f64 {
                c.iter().zip(e.image.data()).map(|(a, b)| (a - b) * (a - b)).sum()
            };
            let best = (0..classes)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            best == e.label
        })
        .count();
    correct as f64 / eval.len() as f64
}

/// Writes `split` as a tensor container (`images`, `[n, C, H, W]`) plus `labels.csv`.
pub fn export(split: &Split, dir: &Path) -> Result<()> {
    let first = split
        .examples
        .first()
        .ok_or_else(|| Error::Contract("cannot export an empty split".into()))?;
    let mut shape = vec![split.len()];
    shape.extend_from_slice(first.image.shape());
    let mut data = Vec::with_capacity(shape.iter().product());
    for e in &split.examples {
        if e.image.shape() != first.image.shape() {
            return Err(Error::shape("export", first.image.shape(), e.image.shape()));
        }
        data.extend_from_slice(e.image.data());
    }
    io::save(dir.join("images.vfpt"), &[("images".into(), Tensor::new(shape, data)?)])?;
    let mut csv = String::from("index,label\n");
    for (i, e) in split.examples.iter().enumerate() {
        writeln!(csv, "{i},{}", e.label).unwrap();
    }
    io::write_atomic(dir.join("labels.csv"), csv.as_bytes())
}

pub fn import(dir: &Path) -> Result<Split> {
    let named = io::load_map(dir.join("images.vfpt"))?;
    let images = named
        .get("images")
        .ok_or_else(|| Error::config("images.vfpt", "missing `images` tensor"))?;
    if images.rank() < 2 {
        return Err(Error::config("images.vfpt", "images must have rank ≥ 2"));
    }
    let n = images.shape()[0];
    let per = images.numel() / n;
    let text = std::fs::read_to_string(dir.join("labels.csv"))?;
    let mut labels = vec![None; n];
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::config("labels.csv", format!("malformed line {}: `{line}`", line_no + 1));
        let (i, l) = line.split_once(',').ok_or_else(bad)?;
        let i: usize = i.trim().parse().map_err(|_| bad())?;
        let l: usize = l.trim().parse().map_err(|_| bad())?;
        *labels.get_mut(i).ok_or_else(bad)? = Some(l);
    }
    let examples = labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let label = l.ok_or_else(|| Error::config("labels.csv", format!("no label for index {i}")))?;
            Ok(Example {
                image: Tensor::new(images.shape()[1..].to_vec(), images.data()[i * per..(i + 1) * per].to_vec())?,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Split {
        indices: (0..n).collect(),
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{dft_naive, ComplexBuffer};

    fn small(kind: TaskKind, classes: usize) -> TaskSpec {
        TaskSpec {
            train_count: 40,
            val_count: 12,
            test_count: 8,
            ..TaskSpec::new(kind, classes, 3)
        }
    }

    /// Magnitude of the mean-removed 2D DFT of a square image via row/column naive DFTs.
    fn spectrum(img: &Tensor) -> Vec<f64> {
        let s = img.shape()[1];
        let mean = img.sum() / img.numel() as f64;
        let mut re: Vec<f64> = img.data().iter().map(|v| v - mean).collect();
        let mut im = vec![0.0; s * s];
        for r in 0..s {
            let out = dft_naive(&ComplexBuffer::new(re[r * s..(r + 1) * s].to_vec(), im[r * s..(r + 1) * s].to_vec()).unwrap());
            re[r * s..(r + 1) * s].copy_from_slice(&out.re);
            im[r * s..(r + 1) * s].copy_from_slice(&out.im);
        }
        for c in 0..s {
            let col = |v: &[f64]| (0..s).map(|r| v[r * s + c]).collect::<Vec<_>>();
            let out = dft_naive(&ComplexBuffer::new(col(&re), col(&im)).unwrap());
            for r in 0..s {
                re[r * s + c] = out.re[r];
                im[r * s + c] = out.im[r];
            }
        }
        re.iter().zip(&im).map(|(a, b)| a.hypot(*b)).collect()
    }

    #[test]
    fn frequency_band_peaks_in_its_band() {
        let spec = TaskSpec {
            noise_std: 0.0,
            ..small(TaskKind::FrequencyBand, 4)
        };
        let s = spec.image_size;
        for i in 0..40 {
            let e = example(&spec, "pool", i, i % 4);
            let mag = spectrum(&e.image);
            let peak = (0..mag.len()).max_by(|&a, &b| mag[a].total_cmp(&mag[b])).unwrap();
            let wrap = |k: usize| if k >= s / 2 { k as f64 - s as f64 } else { k as f64 };
            let radius = wrap(peak / s).hypot(wrap(peak % s));
            let band = (0..4)
                .min_by(|&a, &b| (radius - band_center(a)).abs().total_cmp(&(radius - band_center(b)).abs()))
                .unwrap();
            assert_eq!(band, e.label, "example {i}: peak radius {radius}");
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        for kind in [
            TaskKind::SourceOrientation,
            TaskKind::SpatialLocation,
            TaskKind::FrequencyBand,
            TaskKind::HybridCount,
        ] {
            let a = generate(&small(kind, 4)).unwrap();
            let b = generate(&small(kind, 4)).unwrap();
            assert_eq!(a, b);
            for e in a.train.examples.iter().chain(&a.val.examples) {
                assert!(e.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn balanced_disjoint_splits() {
        let d = generate(&TaskSpec::new(TaskKind::SpatialLocation, 4, 1)).unwrap();
        assert_eq!(d.train.len(), 800);
        assert_eq!(d.val.len(), 200);
        assert_eq!(d.train.histogram(4), vec![200; 4]);
        assert_eq!(d.val.histogram(4), vec![50; 4]);
        let mut all: Vec<usize> = d.train.indices.iter().chain(&d.val.indices).copied().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 1000);
    }

    #[test]
    fn uneven_counts_stay_within_one() {
        let spec = TaskSpec {
            train_count: 37,
            val_count: 11,
            ..TaskSpec::new(TaskKind::HybridCount, 3, 2)
        };
        let d = generate(&spec).unwrap();
        for split in [&d.train, &d.val] {
            let h = split.histogram(3);
            assert!(h.iter().max().unwrap() - h.iter().min().unwrap() <= 1, "{h:?}");
        }
    }

    #[test]
    fn split_independent_of_pool_order() {
        let spec = small(TaskKind::SpatialLocation, 4);
        let all = pool(&spec, "pool", 52);
        let (train, _) = split(&all, 4, 40, 12, 3).unwrap();
        let rev: Vec<usize> = (0..52).rev().collect();
        let generated: Vec<Example> = rev.iter().map(|&i| example(&spec, "pool", i, i % 4)).collect();
        let mut reordered = vec![None; 52];
        for (e, &i) in generated.into_iter().zip(&rev) {
            reordered[i] = Some(e);
        }
        let reordered: Vec<Example> = reordered.into_iter().map(Option::unwrap).collect();
        assert_eq!(split(&reordered, 4, 40, 12, 3).unwrap().0, train);
    }

    #[test]
    fn oversized_split_is_config_error() {
        let all = pool(&small(TaskKind::SpatialLocation, 4), "pool", 10);
        assert!(matches!(split(&all, 4, 8, 3, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn normalize_round_trip() {
        let d = generate(&small(TaskKind::SourceOrientation, 8)).unwrap();
        let n = Normalizer::fit(&d.train.images()).unwrap();
        let img = &d.val.examples[0].image;
        let back = n.denormalize(&n.normalize(img).unwrap()).unwrap();
        assert!(back.max_abs_diff(img) < 1e-12);
        let z = Normalizer::fit(&n.normalize_split(&d.train).unwrap().images()).unwrap();
        assert!(z.mean[0].abs() < 1e-12 && (z.std[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = TaskSpec::new(TaskKind::FrequencyBand, 6, 0);
        assert!(s.validate().is_err());
        s.num_classes = 4;
        s.val_count = 0;
        assert!(matches!(s.validate(), Err(Error::Config { key, .. }) if key == "data.val_count"));
    }

    #[test]
    fn export_import_round_trip() {
        let d = generate(&small(TaskKind::HybridCount, 4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export(&d.val, dir.path()).unwrap();
        let back = import(dir.path()).unwrap();
        assert_eq!(back.examples, d.val.examples);
    }
}
