//! Discrete Fourier machinery for prompt blocks.
//!
//! Forward transforms are unnormalized, `X_k = Σ_n x_n e^{-2πikn/N}`; the
//! inverse carries the `1/N`. Power-of-two lengths go through an iterative
//! radix-2 Cooley–Tukey FFT, every other length through the direct sum.
//!
//! For a real block `P: [m, d]` the prompt transform keeps only the real part
//! of the 2D spectrum, which makes it a fixed real linear map. Its backward
//! pass is the explicit adjoint `Re(F^H G)`, evaluated with the inverse FFT.

use crate::autodiff::{Graph, LinearMap, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::f64::consts::PI;
use std::sync::Arc;

/// Split real/imaginary storage of a complex sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexBuffer {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexBuffer {
    pub fn new(re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::shape("complex buffer", &[re.len()], &[im.len()]));
        }
        Ok(Self { re, im })
    }

    pub fn from_real(re: Vec<f64>) -> Self {
        let im = vec![0.0; re.len()];
        Self { re, im }
    }

    pub fn zeros(n: usize) -> Self {
        Self::from_real(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(a, b)| a * a + b * b).sum()
    }

    pub fn max_abs_diff(&self, other: &ComplexBuffer) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .zip(other.re.iter().zip(&other.im))
            .map(|((a, b), (c, d))| (a - c).abs().max((b - d).abs()))
            .fold(0.0, f64::max)
    }
}

/// `e^{-2πi·j/n}`, reducing `j` modulo `n` first so large products stay exact.
fn twiddle(j: usize, n: usize) -> (f64, f64) {
    let angle = -2.0 * PI * ((j % n) as f64) / n as f64;
    (angle.cos(), angle.sin())
}

/// Direct O(N²) evaluation of the DFT sum.
pub fn dft_naive(x: &ComplexBuffer) -> ComplexBuffer {
    let n = x.len();
    let mut out = ComplexBuffer::zeros(n);
    for k in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        for j in 0..n {
            let (c, s) = twiddle(k * j, n);
            sr += x.re[j] * c - x.im[j] * s;
            si += x.re[j] * s + x.im[j] * c;
        }
        out.re[k] = sr;
        out.im[k] = si;
    }
    out
}

pub fn fft(x: &ComplexBuffer) -> ComplexBuffer {
    fft_counted(x).0
}

/// FFT plus the number of complex multiply-adds it performed.
pub fn fft_counted(x: &ComplexBuffer) -> (ComplexBuffer, u64) {
    let n = x.len();
    if n <= 1 {
        return (x.clone(), 0);
    }
    if !n.is_power_of_two() {
        return (dft_naive(x), (n * n) as u64);
    }
    let mut re = x.re.clone();
    let mut im = x.im.clone();
    let ops = radix2_in_place(&mut re, &mut im);
    (ComplexBuffer { re, im }, ops)
}

/// Iterative decimation-in-time radix-2 Cooley–Tukey; `re.len()` must be a power of two.
fn radix2_in_place(re: &mut [f64], im: &mut [f64]) -> u64 {
    let n = re.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let table: Vec<(f64, f64)> = (0..n / 2).map(|j| twiddle(j, n)).collect();
    let mut ops = 0u64;
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for j in 0..half {
                let (wr, wi) = table[j * stride];
                let (a, b) = (start + j, start + j + half);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                ops += 1;
            }
        }
        len *= 2;
    }
    ops
}

/// Inverse transform, `x_n = (1/N) Σ_k X_k e^{+2πikn/N}`.
pub fn ifft(x: &ComplexBuffer) -> ComplexBuffer {
    let n = x.len() as f64;
    let conj = ComplexBuffer {
        re: x.re.clone(),
        im: x.im.iter().map(|v| -v).collect(),
    };
    let y = fft(&conj);
    ComplexBuffer {
        re: y.re.iter().map(|v| v / n).collect(),
        im: y.im.iter().map(|v| -v / n).collect(),
    }
}

/// Sequence (rows) or hidden (columns) axis of a `[m, d]` prompt block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Sequence,
    Hidden,
}

/// Complex `[rows, cols]` matrix used by the 2D transforms.
struct Plane {
    rows: usize,
    cols: usize,
    data: ComplexBuffer,
}

impl Plane {
    fn from_tensor(t: &Tensor) -> Self {
        let (rows, cols) = t.dims2().expect("prompt block must be a matrix");
        Plane {
            rows,
            cols,
            data: ComplexBuffer::from_real(t.data().to_vec()),
        }
    }

    /// Transforms every line along `axis`, forward or conjugate (unnormalized inverse).
    fn transform(&mut self, axis: Axis, conjugate: bool) {
        let (count, len, step, line_step) = match axis {
            Axis::Hidden => (self.rows, self.cols, 1, self.cols),
            Axis::Sequence => (self.cols, self.rows, self.cols, 1),
        };
        if len == 1 {
            return;
        }
        let mut line = ComplexBuffer::zeros(len);
        for l in 0..count {
            for i in 0..len {
                let at = l * line_step + i * step;
                line.re[i] = self.data.re[at];
                line.im[i] = if conjugate { -self.data.im[at] } else { self.data.im[at] };
            }
            let out = fft(&line);
            for i in 0..len {
                let at = l * line_step + i * step;
                self.data.re[at] = out.re[i];
                self.data.im[at] = if conjugate { -out.im[i] } else { out.im[i] };
            }
        }
    }

    fn real(self) -> Tensor {
        Tensor::from_parts(vec![self.rows, self.cols], self.data.re)
    }
}

/// `Re(F_seq(F_h(P)))`: FFT along the hidden axis, then the sequence axis, real part kept.
pub fn fourier2d_real(p: &Tensor) -> Tensor {
    let mut plane = Plane::from_tensor(p);
    plane.transform(Axis::Hidden, false);
    plane.transform(Axis::Sequence, false);
    plane.real()
}

/// `Re(F_h(F_seq(P)))`, the same map with the axes taken in the other order.
pub fn fourier2d_real_seq_first(p: &Tensor) -> Tensor {
    let mut plane = Plane::from_tensor(p);
    plane.transform(Axis::Sequence, false);
    plane.transform(Axis::Hidden, false);
    plane.real()
}

/// Adjoint of [`fourier2d_real`]: `Re(F_hᴴ F_seqᴴ G)`.
pub fn fourier2d_real_adjoint(g: &Tensor) -> Tensor {
    let mut plane = Plane::from_tensor(g);
    plane.transform(Axis::Sequence, true);
    plane.transform(Axis::Hidden, true);
    plane.real()
}

/// Real part of the 1D FFT along one axis.
pub fn fourier1d_real(p: &Tensor, axis: Axis) -> Tensor {
    let mut plane = Plane::from_tensor(p);
    plane.transform(axis, false);
    plane.real()
}

/// Adjoint of [`fourier1d_real`].
pub fn fourier1d_real_adjoint(g: &Tensor, axis: Axis) -> Tensor {
    let mut plane = Plane::from_tensor(g);
    plane.transform(axis, true);
    plane.real()
}

/// Which axes a prompt Fourier transform spans.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FourierAxes {
    Sequence,
    Hidden,
    Both,
}

impl FourierAxes {
    pub fn forward(self, p: &Tensor) -> Tensor {
        match self {
            FourierAxes::Both => fourier2d_real(p),
            FourierAxes::Sequence => fourier1d_real(p, Axis::Sequence),
            FourierAxes::Hidden => fourier1d_real(p, Axis::Hidden),
        }
    }

    pub fn adjoint(self, g: &Tensor) -> Tensor {
        match self {
            FourierAxes::Both => fourier2d_real_adjoint(g),
            FourierAxes::Sequence => fourier1d_real_adjoint(g, Axis::Sequence),
            FourierAxes::Hidden => fourier1d_real_adjoint(g, Axis::Hidden),
        }
    }
}

/// Whole-block transform as a graph operator.
struct WholeBlock(FourierAxes);

impl LinearMap for WholeBlock {
    fn name(&self) -> &'static str {
        "fourier_real"
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        self.0.forward(x)
    }

    fn adjoint(&self, g: &Tensor) -> Tensor {
        self.0.adjoint(g)
    }
}

/// Transforms rows `start..start + len` of a `[M, d]` block and passes the rest through.
///
/// With `len == 0` the output is a bit-exact copy of the input, so a prompt
/// bank with no Fourier rows records the same graph shape as one with many.
pub struct FourierRows {
    pub start: usize,
    pub len: usize,
    pub axes: FourierAxes,
}

impl FourierRows {
    fn splice(&self, x: &Tensor, f: impl Fn(&Tensor) -> Tensor) -> Tensor {
        let mut out = x.clone();
        if self.len == 0 {
            return out;
        }
        let block = x.rows(self.start, self.len).expect("fourier rows within block");
        let cols = x.shape()[1];
        let t = f(&block);
        out.data_mut()[self.start * cols..(self.start + self.len) * cols].copy_from_slice(t.data());
        out
    }
}

impl LinearMap for FourierRows {
    fn name(&self) -> &'static str {
        "fourier_rows"
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        self.splice(x, |b| self.axes.forward(b))
    }

    fn adjoint(&self, g: &Tensor) -> Tensor {
        self.splice(g, |b| self.axes.adjoint(b))
    }
}

/// Differentiable [`fourier2d_real`].
pub fn fourier2d_real_op(g: &mut Graph, x: Var) -> Result<Var> {
    g.value(x).dims2()?;
    Ok(g.linear_map(x, Arc::new(WholeBlock(FourierAxes::Both))))
}

/// Differentiable [`fourier1d_real`].
pub fn fourier1d_real_op(g: &mut Graph, x: Var, axis: Axis) -> Result<Var> {
    g.value(x).dims2()?;
    let axes = match axis {
        Axis::Sequence => FourierAxes::Sequence,
        Axis::Hidden => FourierAxes::Hidden,
    };
    Ok(g.linear_map(x, Arc::new(WholeBlock(axes))))
}

/// Differentiable [`FourierRows`].
pub fn fourier_rows_op(g: &mut Graph, x: Var, rows: FourierRows) -> Result<Var> {
    let (m, _) = g.value(x).dims2()?;
    if rows.start + rows.len > m {
        return Err(Error::Bounds {
            op: "fourier_rows",
            start: rows.start,
            end: rows.start + rows.len,
            len: m,
        });
    }
    Ok(g.linear_map(x, Arc::new(rows)))
}
