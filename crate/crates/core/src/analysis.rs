//! Loss-landscape, Hessian and attention instruments.
//!
//! Every instrument works on copies of the trainable parameters; the model
//! passed in is never mutated.

use crate::data::Split;
use crate::error::{Error, Result};
use crate::io;
use crate::prompt::TunedModel;
use crate::seeding;
use crate::tensor::Tensor;
use crate::training::{self, worker_pool};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Grid side; odd so that the centre cell is exactly the unperturbed point.
    pub resolution: usize,
    /// Fixed training-subset size for every loss and Hessian evaluation.
    pub subset_size: usize,
    pub tau: f64,
    pub eig_tol: f64,
    pub eig_max_iter: usize,
    pub direction_seed: u64,
    /// Example of the test split used for the attention export.
    pub image_index: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            resolution: 41,
            subset_size: 512,
            tau: 0.01,
            eig_tol: 1e-3,
            eig_max_iter: 200,
            direction_seed: 0,
            image_index: 0,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % 2 == 0 {
            return Err(Error::config("analysis.resolution", "must be odd and positive"));
        }
        if self.subset_size == 0 || self.subset_size > 512 {
            return Err(Error::config("analysis.subset_size", "must lie in 1..=512"));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::config("analysis.tau", "must be nonnegative"));
        }
        if !(self.eig_tol > 0.0) || self.eig_max_iter == 0 {
            return Err(Error::config("analysis.eig_tol", "tolerance and iteration cap must be positive"));
        }
        Ok(())
    }
}

/// A scalar loss over a flat parameter vector.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn loss(&self, theta: &[f64]) -> Result<f64>;
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// `½ θᵀAθ` for a symmetric `A`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub a: Tensor,
}

impl Quadratic {
    pub fn new(a: Tensor) -> Result<Self> {
        let (r, c) = a.dims2()?;
        if r != c {
            return Err(Error::shape("quadratic", &[r, r], &[r, c]));
        }
        Ok(Self { a })
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        Self {
            a: Tensor::from_fn(&[n, n], |i| if i / n == i % n { d[i / n] } else { 0.0 }),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n).map(|r| dot(self.a.row(r), x)).collect()
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.a.shape()[0]
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(0.5 * dot(theta, &self.apply(theta)))
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.apply(theta))
    }
}

/// Mean cross-entropy of a tuned model on a fixed subset, as a function of its trainable parameters.
pub struct TunedObjective {
    model: TunedModel,
    subset: Split,
}

impl TunedObjective {
    pub fn new(model: &TunedModel, subset: Split) -> Result<Self> {
        if subset.is_empty() {
            return Err(Error::config("analysis.subset_size", "empty analysis subset"));
        }
        Ok(Self {
            model: model.clone(),
            subset,
        })
    }

    pub fn theta(&self) -> Vec<f64> {
        self.model.flat_params()
    }

    pub fn subset(&self) -> &Split {
        &self.subset
    }

    fn at(&self, theta: &[f64]) -> Result<TunedModel> {
        let mut m = self.model.clone();
        m.set_flat_params(theta)?;
        Ok(m)
    }
}

impl Objective for TunedObjective {
    fn dim(&self) -> usize {
        self.model.flat_params().len()
    }

    /// Same code path as [`training::evaluate`].
    fn loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(training::evaluate(&self.at(theta)?, &self.subset)?.0)
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let m = self.at(theta)?;
        let n = self.subset.len() as f64;
        let mut total = vec![0.0; theta.len()];
        for chunk in self.subset.examples.chunks(training::EVAL_BATCH) {
            let images: Vec<&Tensor> = chunk.iter().map(|e| &e.image).collect();
            let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
            let out = training::loss_and_grads(&m, &images, &labels)?;
            let w = chunk.len() as f64 / n;
            let flat = out.grads.iter().flat_map(|g| g.data().iter());
            for (t, g) in total.iter_mut().zip(flat) {
                *t += w * g;
            }
        }
        Ok(total)
    }
}

/// Seeded subset of at most `size` examples, in ascending index order.
pub fn fixed_subset(split: &Split, size: usize, seed: u64) -> Split {
    use rand::seq::index::sample;
    let n = split.len();
    let mut picks: Vec<usize> = if size >= n {
        (0..n).collect()
    } else {
        sample(&mut seeding::stream(seed, "analysis.subset", 0), n, size).into_vec()
    };
    picks.sort_unstable();
    Split {
        examples: picks.iter().map(|&i| split.examples[i].clone()).collect(),
        indices: picks.iter().map(|&i| split.indices[i]).collect(),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `H·v` by central differences of the gradient with step `1e-3 / ‖v‖`.
pub fn hvp<O: Objective + ?Sized>(obj: &O, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != theta.len() {
        return Err(Error::shape("hvp", &[theta.len()], &[v.len()]));
    }
    let nv = norm(v);
    if nv == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let eps = 1e-3 / nv;
    let shifted = |s: f64| -> Vec<f64> { theta.iter().zip(v).map(|(t, d)| t + s * d).collect() };
    let gp = obj.gradient(&shifted(eps))?;
    let gm = obj.gradient(&shifted(-eps))?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EigenOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_iter: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Extremes {
    pub lmax: f64,
    pub lmin: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Number of eigenvalues of the symmetric tridiagonal `(diag, off)` below `x`.
fn sturm_count(diag: &[f64], off: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut q = 1.0;
    for i in 0..diag.len() {
        let b2 = if i == 0 { 0.0 } else { off[i - 1] * off[i - 1] };
        q = diag[i] - x - if i == 0 { 0.0 } else { b2 / q };
        if q == 0.0 {
            q = f64::EPSILON * (diag[i].abs() + off.get(i).map_or(0.0, |b| b.abs())).max(f64::MIN_POSITIVE);
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Smallest and largest eigenvalue of a symmetric tridiagonal matrix by bisection.
fn tridiagonal_extremes(diag: &[f64], off: &[f64]) -> (f64, f64) {
    let n = diag.len();
    let radius = |i: usize| {
        (if i > 0 { off[i - 1].abs() } else { 0.0 }) + (if i + 1 < n { off[i].abs() } else { 0.0 })
    };
    let lo0 = (0..n).map(|i| diag[i] - radius(i)).fold(f64::INFINITY, f64::min);
    let hi0 = (0..n).map(|i| diag[i] + radius(i)).fold(f64::NEG_INFINITY, f64::max);
    // k-th smallest eigenvalue: the smallest x with at least k + 1 eigenvalues below it.
    let kth = |k: usize| {
        let (mut lo, mut hi) = (lo0, hi0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if sturm_count(diag, off, mid) > k {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    };
    (kth(0), kth(n - 1))
}

/// Largest and smallest eigenvalue of a symmetric operator `H` by Lanczos
/// with full reorthogonalization.
///
/// Both Ritz extremes must move by at most `tol · max(|λmax|, |λmin|)` on two
/// consecutive steps; an invariant subspace ends the run as converged.
pub fn extreme_eigenvalues<F>(op: F, dim: usize, opts: &EigenOptions) -> Result<Extremes>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut rng = seeding::stream(opts.seed, "analysis.lanczos", 0);
    let mut q: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n0 = norm(&q);
    q.iter_mut().for_each(|x| *x /= n0);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let (mut diag, mut off) = (Vec::new(), Vec::new());
    let mut prev: Option<(f64, f64)> = None;
    let mut quiet = 0;
    let max_steps = opts.max_iter.min(dim.max(1));
    for step in 1..=max_steps {
        let mut w = op(&q)?;
        let a = dot(&q, &w);
        if !a.is_finite() {
            break;
        }
        basis.push(q);
        diag.push(a);
        // Two passes of Gram-Schmidt keep the basis orthogonal to rounding.
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let (lmin, lmax) = tridiagonal_extremes(&diag, &off);
        let scale = lmax.abs().max(lmin.abs());
        let beta = norm(&w);
        let done = |converged| Extremes {
            lmax,
            lmin,
            converged,
            iterations: step,
        };
        if !beta.is_finite() {
            break;
        }
        if beta <= 1e-10 * scale.max(f64::MIN_POSITIVE) || step == dim {
            return Ok(done(true));
        }
        if let Some((pmin, pmax)) = prev {
            let still = (lmax - pmax).abs() <= opts.tol * scale && (lmin - pmin).abs() <= opts.tol * scale;
            quiet = if still { quiet + 1 } else { 0 };
            if quiet >= 2 {
                return Ok(done(true));
            }
        }
        if step == max_steps {
            return Ok(done(false));
        }
        prev = Some((lmin, lmax));
        off.push(beta);
        q = w.into_iter().map(|x| x / beta).collect();
    }
    let (lmin, lmax) = if diag.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        tridiagonal_extremes(&diag, &off)
    };
    Ok(Extremes {
        lmax,
        lmin,
        converged: false,
        iterations: basis.len(),
    })
}

/// Extreme Hessian eigenvalues of `obj` at `theta`.
pub fn hessian_extremes<O: Objective + ?Sized>(obj: &O, theta: &[f64], opts: &EigenOptions) -> Result<Extremes> {
    extreme_eigenvalues(|v| hvp(obj, theta, v), theta.len(), opts)
}

/// Named perturbation tensors in trainable order.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    pub tensors: Vec<(String, Tensor)>,
    /// `(name, raw norm, target norm)` per tensor.
    pub normalization: Vec<(String, f64, f64)>,
}

impl Direction {
    /// Gaussian direction rescaled per tensor to the norm of the matching parameter tensor.
    pub fn random(model: &TunedModel, seed: u64, index: u64) -> Self {
        let mut rng = seeding::stream(seed, "analysis.direction", index);
        let mut tensors = Vec::new();
        let mut normalization = Vec::new();
        for (name, t) in model.trainable() {
            let raw = Tensor::from_fn(t.shape(), |_| rng.sample(StandardNormal));
            let (rn, tn) = (raw.norm(), t.norm());
            let scale = if rn > 0.0 { tn / rn } else { 0.0 };
            tensors.push((name.clone(), raw.map(|x| x * scale)));
            normalization.push((name, rn, tn));
        }
        Self { tensors, normalization }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }
}

/// Grid coordinates `linspace(−1, 1, r)`; the centre of an odd grid is exactly 0.
pub fn grid_coords(r: usize) -> Vec<f64> {
    if r == 1 {
        return vec![0.0];
    }
    let half = (r - 1) as f64 / 2.0;
    (0..r).map(|i| (i as f64 - half) / half).collect()
}

/// `θ + (a·d1 + b·d2)`; the bracket is symmetric in its terms, so swapping
/// directions transposes a grid bit for bit.
fn perturbed(theta: &[f64], d1: &[f64], a: f64, d2: &[f64], b: f64) -> Vec<f64> {
    if a == 0.0 && b == 0.0 {
        return theta.to_vec();
    }
    theta
        .iter()
        .zip(d1.iter().zip(d2))
        .map(|(t, (x, y))| t + (a * x + b * y))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub a: f64,
    pub b: f64,
    pub loss: f64,
    /// Hessian columns, present only for convexity maps.
    pub eig: Option<CellEig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CellEig {
    pub lmax: f64,
    pub lmin: f64,
    /// `λmin/λmax`, NaN when `λmax ≤ 0`.
    pub ratio: f64,
    pub convex: bool,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalysisGrid {
    pub resolution: usize,
    /// Row-major over `(a, b)`.
    pub cells: Vec<Cell>,
}

impl AnalysisGrid {
    pub fn center(&self) -> &Cell {
        &self.cells[self.cells.len() / 2]
    }

    pub fn loss_at(&self, i: usize, j: usize) -> f64 {
        self.cells[i * self.resolution + j].loss
    }

    /// Convex cells over converged cells with a finite `λmax`; NaN if none qualify.
    pub fn convex_fraction(&self) -> f64 {
        let counted: Vec<&CellEig> = self
            .cells
            .iter()
            .filter_map(|c| c.eig.as_ref())
            .filter(|e| e.converged)
            .collect();
        if counted.is_empty() {
            return f64::NAN;
        }
        counted.iter().filter(|e| e.convex).count() as f64 / counted.len() as f64
    }

    pub fn unconverged(&self) -> usize {
        self.cells
            .iter()
            .filter_map(|c| c.eig.as_ref())
            .filter(|e| !e.converged)
            .count()
    }

    pub fn to_csv(&self) -> String {
        let with_eig = self.cells.iter().any(|c| c.eig.is_some());
        let mut s = String::from("a,b,value");
        if with_eig {
            s.push_str(",lmax,lmin,ratio,convex");
        }
        s.push('\n');
        for c in &self.cells {
            write!(s, "{:?},{:?},{:?}", c.a, c.b, c.loss).unwrap();
            if let Some(e) = &c.eig {
                write!(s, ",{:?},{:?},{:?},{}", e.lmax, e.lmin, e.ratio, u8::from(e.convex)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

fn check_dirs(theta: &[f64], d1: &[f64], d2: &[f64], r: usize) -> Result<()> {
    if d1.len() != theta.len() || d2.len() != theta.len() {
        return Err(Error::shape("direction", &[theta.len()], &[d1.len().min(d2.len())]));
    }
    if r == 0 || r % 2 == 0 {
        return Err(Error::config("analysis.resolution", "must be odd and positive"));
    }
    Ok(())
}

/// Loss on the `r × r` grid `θ + a·d1 + b·d2`, `a, b ∈ [−1, 1]`.
pub fn landscape<O: Objective>(obj: &O, theta: &[f64], d1: &[f64], d2: &[f64], r: usize) -> Result<AnalysisGrid> {
    check_dirs(theta, d1, d2, r)?;
    let coords = grid_coords(r);
    let pts: Vec<(f64, f64)> = coords.iter().flat_map(|&a| coords.iter().map(move |&b| (a, b))).collect();
    let cells = worker_pool()?.install(|| {
        pts.par_iter()
            .map(|&(a, b)| {
                Ok(Cell {
                    a,
                    b,
                    loss: obj.loss(&perturbed(theta, d1, a, d2, b))?,
                    eig: None,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(AnalysisGrid { resolution: r, cells })
}

/// Extreme Hessian eigenvalues and convexity on the same grid.
///
/// A cell is convex when `λmin ≥ −τ·|λmax|` and `λmax > 0`; unconverged
/// cells are flagged and left out of [`AnalysisGrid::convex_fraction`].
pub fn convexity_map<O: Objective>(
    obj: &O,
    theta: &[f64],
    d1: &[f64],
    d2: &[f64],
    r: usize,
    tau: f64,
    opts: &EigenOptions,
) -> Result<AnalysisGrid> {
    check_dirs(theta, d1, d2, r)?;
    let coords = grid_coords(r);
    let pts: Vec<(f64, f64)> = coords.iter().flat_map(|&a| coords.iter().map(move |&b| (a, b))).collect();
    let cells = worker_pool()?.install(|| {
        pts.par_iter()
            .map(|&(a, b)| {
                let p = perturbed(theta, d1, a, d2, b);
                let e = hessian_extremes(obj, &p, opts)?;
                let positive = e.lmax > 0.0;
                Ok(Cell {
                    a,
                    b,
                    loss: obj.loss(&p)?,
                    eig: Some(CellEig {
                        lmax: e.lmax,
                        lmin: e.lmin,
                        ratio: if positive { e.lmin / e.lmax } else { f64::NAN },
                        convex: positive && e.lmin >= -tau * e.lmax.abs(),
                        converged: e.converged,
                    }),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(AnalysisGrid { resolution: r, cells })
}

/// Segment boundaries `[start, end)` of the token axis.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Segments {
    pub class: (usize, usize),
    pub prompts: (usize, usize),
    pub patches: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// Head-averaged post-softmax attention of the last layer, `[S, S]`.
    pub matrix: Tensor,
    pub segments: Segments,
    /// Mean attention received per prompt column (NaN without prompts).
    pub prompt_mass: f64,
}

pub fn attention_export(model: &TunedModel, image: &Tensor) -> Result<AttentionMap> {
    let mut g = crate::autodiff::Graph::new();
    let bound = model.bind(&mut g, false);
    let f = model.forward(&mut g, &bound, &[image])?;
    let last = *f
        .attention
        .last()
        .ok_or_else(|| Error::Contract("backbone has no layers".into()))?;
    let probs = g
        .attention_probs(last)
        .ok_or_else(|| Error::Contract("last layer kept no attention probabilities".into()))?;
    let (h, s) = (probs.shape()[1], probs.shape()[2]);
    let mut m = vec![0.0; s * s];
    for head in probs.data().chunks(s * s) {
        for (acc, p) in m.iter_mut().zip(head) {
            *acc += p / h as f64;
        }
    }
    let np = model.backbone.config().num_patches();
    let prompts = s - 1 - np;
    let segments = Segments {
        class: (0, 1),
        prompts: (1, 1 + prompts),
        patches: (1 + prompts, s),
    };
    let prompt_mass = if prompts == 0 {
        f64::NAN
    } else {
        let total: f64 = (0..s)
            .flat_map(|r| (1..1 + prompts).map(move |c| (r, c)))
            .map(|(r, c)| m[r * s + c])
            .sum();
        total / (s * prompts) as f64
    };
    Ok(AttentionMap {
        matrix: Tensor::new(vec![s, s], m)?,
        segments,
        prompt_mass,
    })
}

impl AttentionMap {
    pub fn to_csv(&self) -> String {
        let s = self.matrix.shape()[0];
        let mut out = String::new();
        for r in 0..s {
            let row: Vec<String> = self.matrix.row(r).iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Binary P5 graymap of `values` (row-major `rows × cols`), min-max scaled to
/// 0..=255, plus a `<path>.scale.txt` sidecar with the scaling. NaN maps to 0.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    if values.len() != rows * cols {
        return Err(Error::shape("write_pgm", &[rows, cols], &[values.len()]));
    }
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| {
        if v.is_finite() {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    io::write_atomic(path, &bytes)?;
    let mut side = path.as_os_str().to_owned();
    side.push(".scale.txt");
    let text = format!("min {lo:?}\nmax {hi:?}\npixel = round((value - min) / (max - min) * 255)\n");
    io::write_atomic(Path::new(&side), text.as_bytes())
}
