//! Small dense building blocks shared by the encoders and the denoiser.
//!
//! All weights are stored as `f64` but initialized to `f32`-representable
//! values, so a checkpoint round trip through the 32-bit format is lossless.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Visitor over named parameter arrays, used for checkpointing.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, a| n += a.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Seeded weight initializer.
pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                (z * std) as f32 as f64
            })
            .collect();
        ArrayD::from_shape_vec(shape.to_vec(), v).expect("shape matches length")
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, std: f64) -> Array2<f64> {
        self.normal(&[rows, cols], std)
            .into_dimensionality::<Ix2>()
            .expect("rank 2")
    }

    pub fn vector(&mut self, n: usize, std: f64) -> Array1<f64> {
        Array1::from(self.normal(&[n], std).into_raw_vec_and_offset().0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Gelu => {
                0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
            }
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Affine map on row vectors: `y = x W + b`, `W` is `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn init(init: &mut ParamInit, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: init.matrix(d_in, d_out, 1.0 / (d_in as f64).sqrt()),
            bias: init.vector(d_out, 0.02),
        }
    }

    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.ncols() != bias.len() {
            return Err(Error::dim(format!(
                "linear weight has {} outputs but bias has {}",
                weight.ncols(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.d_in() {
            return Err(Error::dim(format!(
                "linear expects {} input features, got {}",
                self.d_in(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.weight) + &self.bias)
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view().into_dyn());
        f(&join(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(&join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

/// Two-layer perceptron `Linear → act → Linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn init(init: &mut ParamInit, d_in: usize, d_hidden: usize, d_out: usize, act: Activation) -> Self {
        Self {
            fc1: Linear::init(init, d_in, d_hidden),
            fc2: Linear::init(init, d_hidden, d_out),
            act,
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let h = self.fc1.forward(x)?.mapv(|v| self.act.apply(v));
        self.fc2.forward(h.view())
    }
}

impl Parameters for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Per-row layer normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn new(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.gamma.len() {
            return Err(Error::dim(format!(
                "layer norm over {} features applied to {}",
                self.gamma.len(),
                x.ncols()
            )));
        }
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + Self::EPS).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.gamma[i] + self.beta[i];
            }
        }
        Ok(out)
    }
}

impl Parameters for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "gamma"), self.gamma.view().into_dyn());
        f(&join(prefix, "beta"), self.beta.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "gamma"), self.gamma.view_mut().into_dyn());
        f(&join(prefix, "beta"), self.beta.view_mut().into_dyn());
    }
}

/// Numerically stable in-place softmax over each row.
pub fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// Bias-free multi-head scaled dot-product attention.
///
/// Projections are `d_query × inner`, `d_kv × inner`, `d_kv × inner` and
/// `inner × d_out`. There is no positional encoding of any kind, so the
/// output is invariant to permutations of the key/value rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub heads: usize,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

impl Attention {
    pub fn init(init: &mut ParamInit, d_query: usize, d_kv: usize, inner: usize, d_out: usize, heads: usize) -> Self {
        assert!(heads > 0 && inner.is_multiple_of(heads), "inner dim must split evenly across heads");
        Self {
            heads,
            wq: init.matrix(d_query, inner, 1.0 / (d_query as f64).sqrt()),
            wk: init.matrix(d_kv, inner, 1.0 / (d_kv as f64).sqrt()),
            wv: init.matrix(d_kv, inner, 1.0 / (d_kv as f64).sqrt()),
            wo: init.matrix(inner, d_out, 1.0 / (inner as f64).sqrt()),
        }
    }

    /// Single-head attention with all four projections equal to the identity.
    pub fn identity(d: usize) -> Self {
        Self {
            heads: 1,
            wq: Array2::eye(d),
            wk: Array2::eye(d),
            wv: Array2::eye(d),
            wo: Array2::eye(d),
        }
    }

    pub fn from_weights(heads: usize, wq: Array2<f64>, wk: Array2<f64>, wv: Array2<f64>, wo: Array2<f64>) -> Result<Self> {
        let inner = wq.ncols();
        if heads == 0
            || !inner.is_multiple_of(heads)
            || wk.ncols() != inner
            || wv.ncols() != inner
            || wo.nrows() != inner
            || wk.nrows() != wv.nrows()
        {
            return Err(Error::dim("inconsistent attention projection shapes"));
        }
        Ok(Self { heads, wq, wk, wv, wo })
    }

    pub fn d_query(&self) -> usize {
        self.wq.nrows()
    }

    pub fn d_kv(&self) -> usize {
        self.wk.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.wo.ncols()
    }

    fn check(&self, queries: ArrayView2<'_, f64>, context: ArrayView2<'_, f64>) -> Result<()> {
        if queries.ncols() != self.d_query() || context.ncols() != self.d_kv() {
            return Err(Error::dim(format!(
                "attention expects query dim {} and key/value dim {}, got {} and {}",
                self.d_query(),
                self.d_kv(),
                queries.ncols(),
                context.ncols()
            )));
        }
        if context.nrows() == 0 {
            return Err(Error::dim("attention needs at least one key/value token"));
        }
        if queries.iter().chain(context.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite attention input"));
        }
        Ok(())
    }

    /// Attention probabilities of one head, `n_query × n_kv`.
    pub fn probabilities(&self, queries: ArrayView2<'_, f64>, context: ArrayView2<'_, f64>, head: usize) -> Result<Array2<f64>> {
        self.check(queries, context)?;
        let dh = self.wq.ncols() / self.heads;
        let cols = s![.., head * dh..(head + 1) * dh];
        let q = queries.dot(&self.wq.slice(cols));
        let k = context.dot(&self.wk.slice(cols));
        let mut scores = q.dot(&k.t()) / (dh as f64).sqrt();
        softmax_rows(&mut scores);
        Ok(scores)
    }

    pub fn forward(&self, queries: ArrayView2<'_, f64>, context: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check(queries, context)?;
        let inner = self.wq.ncols();
        let dh = inner / self.heads;
        let q = queries.dot(&self.wq);
        let k = context.dot(&self.wk);
        let v = context.dot(&self.wv);
        let mut mixed = Array2::zeros((queries.nrows(), inner));
        let scale = 1.0 / (dh as f64).sqrt();
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            mixed.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        }
        Ok(mixed.dot(&self.wo))
    }
}

impl Parameters for Attention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "wq"), self.wq.view().into_dyn());
        f(&join(prefix, "wk"), self.wk.view().into_dyn());
        f(&join(prefix, "wv"), self.wv.view().into_dyn());
        f(&join(prefix, "wo"), self.wo.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "wq"), self.wq.view_mut().into_dyn());
        f(&join(prefix, "wk"), self.wk.view_mut().into_dyn());
        f(&join(prefix, "wv"), self.wv.view_mut().into_dyn());
        f(&join(prefix, "wo"), self.wo.view_mut().into_dyn());
    }
}

/// 3×3 convolution with zero padding on a single `c × h × w` frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    /// `out × in × 3 × 3`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl Conv3x3 {
    pub fn init(init: &mut ParamInit, c_in: usize, c_out: usize) -> Self {
        let std = 1.0 / ((9 * c_in) as f64).sqrt();
        let weight = init
            .normal(&[c_out, c_in, 3, 3], std)
            .into_dimensionality()
            .expect("rank 4");
        Self {
            weight,
            bias: init.vector(c_out, 0.02),
        }
    }

    pub fn forward(&self, x: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        let (c_out, c_in) = (self.weight.shape()[0], self.weight.shape()[1]);
        let (c, h, w) = x.dim();
        if c != c_in {
            return Err(Error::dim(format!("conv expects {c_in} channels, got {c}")));
        }
        // im2col: rows are output pixels, columns are (in, ky, kx)
        let mut cols = Array2::<f64>::zeros((h * w, c_in * 9));
        for y in 0..h {
            for xx in 0..w {
                let mut row = cols.row_mut(y * w + xx);
                for ci in 0..c_in {
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            row[ci * 9 + ky * 3 + kx] = x[[ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
        let kernel = self
            .weight
            .view()
            .into_shape_with_order((c_out, c_in * 9))
            .map_err(|e| Error::dim(e.to_string()))?;
        let out = cols.dot(&kernel.t()) + &self.bias;
        out
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c_out, h, w))
            .map_err(|e| Error::dim(e.to_string()))
    }
}

impl Parameters for Conv3x3 {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view().into_dyn());
        f(&join(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(&join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

/// Standard sinusoidal embedding of a scalar timestep.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[i + half] = (t * freq).cos();
    }
    out
}
