//! Built-in oracle suites shared by `vfpt selftest`, the C interface and the
//! acceptance harness.

use crate::backbone::{Backbone, BackboneConfig};
use crate::data::{generate, TaskKind, TaskSpec};
use crate::error::Result;
use crate::autodiff::{Graph, Var};
use crate::gradcheck::{check_flat, check_gradients, GradCheck, GradReport};
use crate::prompt::{PromptConfig, TransformKind, TunedModel};
use crate::seeding;
use crate::spectral::{
    dft_naive, fft, fourier1d_real, fourier1d_real_adjoint, fourier2d_real, fourier2d_real_adjoint,
    fourier1d_real_op, fourier2d_real_op, fourier2d_real_seq_first, fourier_rows_op, ifft, Axis, ComplexBuffer,
    FourierAxes, FourierRows,
};
use crate::tensor::Tensor;
use crate::training::{loss_and_grads, train_tuned, TrainConfig, TuneData};
use rand::Rng;
use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name: name.into(),
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn random_buffer<R: Rng>(n: usize, rng: &mut R) -> ComplexBuffer {
    ComplexBuffer::new(
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("equal lengths")
}

/// Worst deviations of `fft` from the naive DFT, of `ifft∘fft` from identity,
/// and of Parseval's identity (relative), over `cases` random lengths in `1..=max_len`.
pub fn fft_oracle(cases: usize, max_len: usize, seed: u64) -> (f64, f64, f64) {
    let mut rng = seeding::stream(seed, "selftest.fft", 0);
    let (mut dft_err, mut inv_err, mut parseval) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let n = rng.random_range(1..=max_len);
        let x = random_buffer(n, &mut rng);
        let y = fft(&x);
        dft_err = dft_err.max(y.max_abs_diff(&dft_naive(&x)));
        inv_err = inv_err.max(ifft(&y).max_abs_diff(&x));
        let ex = x.energy();
        parseval = parseval.max((y.energy() / n as f64 - ex).abs() / ex);
    }
    (dft_err, inv_err, parseval)
}

/// Real part of the 2D DFT by the defining double sum.
pub fn naive_fourier2d_real(p: &Tensor) -> Tensor {
    let (m, d) = p.dims2().expect("matrix");
    Tensor::from_fn(&[m, d], |i| {
        let (k, l) = (i / d, i % d);
        let mut acc = 0.0;
        for n in 0..m {
            for j in 0..d {
                let ph = 2.0 * PI * (((k * n) % m) as f64 / m as f64 + ((l * j) % d) as f64 / d as f64);
                acc += p.at2(n, j) * ph.cos();
            }
        }
        acc
    })
}

/// Worst deviation from the naive 2D real DFT and between the two axis orders,
/// over `cases` random blocks with `m ≤ max_m`, `d ≤ max_d`.
pub fn fourier2d_oracle(cases: usize, max_m: usize, max_d: usize, seed: u64) -> (f64, f64) {
    let mut rng = seeding::stream(seed, "selftest.fourier2d", 0);
    let (mut naive, mut commute) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let m = rng.random_range(1..=max_m);
        let d = rng.random_range(1..=max_d);
        let p = Tensor::uniform(&[m, d], -1.0, 1.0, &mut rng);
        let f = fourier2d_real(&p);
        naive = naive.max(f.max_abs_diff(&naive_fourier2d_real(&p)));
        commute = commute.max(f.max_abs_diff(&fourier2d_real_seq_first(&p)));
    }
    (naive, commute)
}

/// Worst `|⟨Fx, y⟩ − ⟨x, Fᵀy⟩| / max(1, |⟨Fx, y⟩|)` over random pairs, for the
/// 2D map and both 1D maps.
pub fn adjoint_identity(pairs: usize, max_m: usize, max_d: usize, seed: u64) -> f64 {
    let mut rng = seeding::stream(seed, "selftest.adjoint", 0);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let m = rng.random_range(1..=max_m);
        let d = rng.random_range(1..=max_d);
        let x = Tensor::uniform(&[m, d], -1.0, 1.0, &mut rng);
        let y = Tensor::uniform(&[m, d], -1.0, 1.0, &mut rng);
        let maps: [(Tensor, Tensor); 3] = [
            (fourier2d_real(&x), fourier2d_real_adjoint(&y)),
            (fourier1d_real(&x, Axis::Sequence), fourier1d_real_adjoint(&y, Axis::Sequence)),
            (fourier1d_real(&x, Axis::Hidden), fourier1d_real_adjoint(&y, Axis::Hidden)),
        ];
        for (fx, fty) in maps {
            let lhs = fx.dot(&y);
            let rhs = x.dot(&fty);
            worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
        }
    }
    worst
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut seeding::stream(seed, "selftest.ops", 0))
}

/// Contracts `out` with fixed random weights so every output entry contributes.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand_tensor(g.shape(out), seed));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Finite-difference check of every differentiable graph op, one case per op family.
pub fn op_gradient_checks(opts: &GradCheck) -> Result<Vec<(&'static str, GradReport)>> {
    let cases: Vec<(&'static str, Build, Vec<Tensor>)> = vec![
        (
            "matmul",
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, 9)
            }),
            vec![rand_tensor(&[4, 5], 1), rand_tensor(&[5, 2], 2)],
        ),
        (
            "matmul_bt",
            Box::new(|g, v| {
                let y = g.matmul_bt(v[0], v[1])?;
                weighted_sum(g, y, 9)
            }),
            vec![rand_tensor(&[4, 5], 1), rand_tensor(&[3, 5], 2)],
        ),
        (
            "softmax",
            Box::new(|g, v| {
                let a = g.softmax(v[0], 1)?;
                let b = g.softmax(v[0], 0)?;
                let c = g.softmax(v[1], 1)?;
                let (a, b, c) = (weighted_sum(g, a, 4)?, weighted_sum(g, b, 5)?, weighted_sum(g, c, 6)?);
                let ab = g.add(a, b)?;
                g.add(ab, c)
            }),
            vec![rand_tensor(&[3, 4], 3), rand_tensor(&[2, 3, 4], 4)],
        ),
        (
            "layernorm",
            Box::new(|g, v| {
                let y = g.layernorm(v[0], v[1], v[2], 1e-6)?;
                weighted_sum(g, y, 5)
            }),
            vec![rand_tensor(&[3, 8], 1), rand_tensor(&[8], 2), rand_tensor(&[8], 3)],
        ),
        (
            "elementwise",
            Box::new(|g, v| {
                let a = g.gelu(v[0]);
                let b = g.mul(a, v[1])?;
                let c = g.add(b, v[0])?;
                let d = g.add_tiled(c, v[2])?;
                let e = g.scale(d, -1.7);
                let f = g.reshape(e, &[12])?;
                weighted_sum(g, f, 6)
            }),
            vec![rand_tensor(&[3, 4], 1), rand_tensor(&[3, 4], 2), rand_tensor(&[4], 3)],
        ),
        (
            "cross_entropy",
            Box::new(|g, v| g.cross_entropy(v[0], &[2, 0, 4])),
            vec![rand_tensor(&[3, 5], 8)],
        ),
        (
            "concat_slice_gather",
            Box::new(|g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                let s = g.slice(c, 1, 1, 2)?;
                let r = g.gather_rows(&[s, v[0]], &[(0, 1), (1, 0), (0, 1), (1, 2)])?;
                weighted_sum(g, r, 7)
            }),
            vec![rand_tensor(&[3, 2], 1), rand_tensor(&[3, 3], 2)],
        ),
        (
            "attention",
            Box::new(|g, v| {
                let y = g.attention(v[0], 2, 5, 2)?;
                weighted_sum(g, y, 3)
            }),
            vec![rand_tensor(&[10, 12], 4)],
        ),
        (
            "fourier",
            Box::new(|g, v| {
                let y = fourier2d_real_op(g, v[0])?;
                let z = fourier1d_real_op(g, v[1], Axis::Sequence)?;
                let w = fourier1d_real_op(g, v[1], Axis::Hidden)?;
                let r = fourier_rows_op(
                    g,
                    v[0],
                    FourierRows {
                        start: 1,
                        len: 2,
                        axes: FourierAxes::Both,
                    },
                )?;
                let mut acc = weighted_sum(g, y, 1)?;
                for (t, s) in [(z, 2), (w, 3), (r, 4)] {
                    let part = weighted_sum(g, t, s)?;
                    acc = g.add(acc, part)?;
                }
                Ok(acc)
            }),
            vec![rand_tensor(&[4, 8], 1), rand_tensor(&[3, 6], 2)],
        ),
    ];
    cases
        .into_iter()
        .map(|(name, build, inputs)| Ok((name, check_gradients(build, &inputs, opts)?)))
        .collect()
}

/// A frozen randomly initialised backbone.
pub fn random_backbone(config: BackboneConfig, seed: u64) -> Result<Arc<Backbone>> {
    let mut b = Backbone::init(config, &mut seeding::stream(seed, "backbone", 0))?;
    b.freeze();
    Ok(Arc::new(b))
}

pub fn tiny_backbone_config() -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        depth: 2,
        width: 8,
        heads: 2,
        mlp_ratio: 2,
        num_classes_pretrain: 3,
    }
}

/// End-to-end finite-difference check of every trainable tensor (prompts,
/// LLL map when configured, head) through the full prompted forward pass.
pub fn tuned_gradient_check(
    backbone: &Arc<Backbone>,
    prompt: &PromptConfig,
    batch: usize,
    opts: &GradCheck,
    seed: u64,
) -> Result<GradReport> {
    let classes = 3;
    let mut model = TunedModel::new(Arc::clone(backbone), prompt.clone(), classes, seed)?;
    // Move away from the init so the head and LLL map are not near zero/identity.
    let mut rng = seeding::stream(seed, "selftest.gradcheck", 0);
    let theta: Vec<f64> = model
        .flat_params()
        .iter()
        .map(|v| v + rng.random_range(-0.1..0.1))
        .collect();
    model.set_flat_params(&theta)?;
    let s = backbone.config().image_size;
    let c = backbone.config().channels;
    let images: Vec<Tensor> = (0..batch)
        .map(|_| Tensor::uniform(&[c, s, s], -1.0, 1.0, &mut rng))
        .collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let analytic: Vec<f64> = loss_and_grads(&model, &refs, &labels)?
        .grads
        .iter()
        .flat_map(|g| g.data().iter().copied())
        .collect();
    let loss = |th: &[f64]| -> Result<f64> {
        let mut m = model.clone();
        m.set_flat_params(th)?;
        let logits = m.predict(&refs)?;
        let mut g = crate::autodiff::Graph::new();
        let v = g.constant(logits);
        let l = g.cross_entropy(v, &labels)?;
        Ok(g.value(l).data()[0])
    };
    check_flat(loss, &theta, &analytic, opts)
}

/// Per-step losses of `(α = 0, FFT)` and `(transform = None)` from identical seeds.
pub fn vpt_equivalence(
    backbone: &Arc<Backbone>,
    base: &PromptConfig,
    spec: &TaskSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, bool)> {
    let data = generate(spec)?;
    let tune = TuneData {
        train: &data.train,
        val: &data.val,
        test: Some(&data.test),
    };
    let run = |transform: TransformKind, alpha: f64| -> Result<(Vec<f64>, Tensor)> {
        let pc = PromptConfig {
            transform,
            alpha,
            ..base.clone()
        };
        let mut model = TunedModel::new(Arc::clone(backbone), pc, spec.num_classes, seed)?;
        let rec = train_tuned(&mut model, tune, cfg, cfg.base_lr, cfg.weight_decay, seed)?;
        let logits = model.predict(&data.test.images())?;
        Ok((rec.step_loss, logits))
    };
    let (a, la) = run(TransformKind::Fft, 0.0)?;
    let (b, lb) = run(TransformKind::None, base.alpha)?;
    let same_logits = la.data().iter().zip(lb.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    Ok((a, b, same_logits))
}

pub fn bitwise_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// The quick suites run by `vfpt selftest`.
pub fn run_all() -> Vec<Check> {
    let mut out = Vec::new();
    out.push(timed("fft-oracle", || {
        let (d, i, p) = fft_oracle(200, 64, 1);
        Ok((
            d <= 1e-10 && i <= 1e-10 && p <= 1e-8,
            format!("dft {d:.2e}, inverse {i:.2e}, parseval {p:.2e}"),
        ))
    }));
    out.push(timed("fourier2d-oracle", || {
        let (n, c) = fourier2d_oracle(100, 16, 64, 2);
        Ok((n <= 1e-10 && c <= 1e-10, format!("naive {n:.2e}, commutativity {c:.2e}")))
    }));
    out.push(timed("adjoint", || {
        let w = adjoint_identity(100, 16, 64, 3);
        Ok((w <= 1e-10, format!("worst {w:.2e}")))
    }));
    out.push(timed("gradient-check", || {
        let bb = random_backbone(tiny_backbone_config(), 4)?;
        let mut worst = op_gradient_checks(&GradCheck::default())?
            .iter()
            .map(|(_, r)| r.max_rel_err)
            .fold(0.0f64, f64::max);
        for transform in [TransformKind::Fft, TransformKind::Lll, TransformKind::None] {
            let pc = PromptConfig {
                length: 4,
                transform,
                ..PromptConfig::default()
            };
            let r = tuned_gradient_check(&bb, &pc, 2, &GradCheck::default(), 5)?;
            worst = worst.max(r.max_rel_err);
        }
        Ok((worst <= 1e-4, format!("worst relative error {worst:.2e}")))
    }));
    out.push(timed("alpha0-equivalence", || {
        let bb = random_backbone(tiny_backbone_config(), 6)?;
        let spec = TaskSpec {
            image_size: 8,
            num_classes: 3,
            train_count: 24,
            val_count: 6,
            test_count: 6,
            ..TaskSpec::new(TaskKind::SpatialLocation, 3, 7)
        };
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            warmup_epochs: 1,
            ..TrainConfig::default()
        };
        let pc = PromptConfig {
            length: 4,
            ..PromptConfig::default()
        };
        let (a, b, logits) = vpt_equivalence(&bb, &pc, &spec, &cfg, 8)?;
        Ok((
            bitwise_equal(&a, &b) && logits && a.len() == 15,
            format!("{} steps, identical losses {}, identical logits {logits}", a.len(), bitwise_equal(&a, &b)),
        ))
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_2d_of_delta_is_all_ones() {
        let mut p = Tensor::zeros(&[3, 4]);
        p.data_mut()[0] = 1.0;
        assert!(naive_fourier2d_real(&p).max_abs_diff(&Tensor::ones(&[3, 4])) < 1e-15);
    }

    #[test]
    fn every_op_family_is_tight() {
        let reports = op_gradient_checks(&GradCheck::default()).unwrap();
        assert_eq!(reports.len(), 9);
        for (name, r) in reports {
            assert!(r.max_rel_err < 1e-6 && r.checked > 0, "{name}: {r:?}");
        }
    }

    #[test]
    fn suites_pass() {
        for c in run_all() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
