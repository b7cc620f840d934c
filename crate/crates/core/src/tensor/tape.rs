use crate::error::{DaclError, Result};
use crate::parallel::Exec;

use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial layout of a feature map stored as `[b*h*w, c]` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Grid {
    fn pixels(&self) -> usize {
        self.batch * self.height * self.width
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    L2Normalize(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Im2Col(Var, Grid),
    AvgPool2(Var, Grid),
    Upsample2(Var, Grid),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run recording of tensor operations.
///
/// Nodes are appended in execution order, so parents always precede their
/// children and a reverse sweep is a valid topological order. A fresh tape is
/// built for every training iteration.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `param.grad`.
    pub fn accumulate_into(&self, v: Var, param: &mut Tensor) -> Result<()> {
        let g = self
            .get(v)
            .ok_or_else(|| DaclError::Contract(format!("no gradient recorded for {v:?}")))?;
        param.accumulate_grad(g)
    }
}

const PAR_MATMUL_WORK: usize = 1 << 16;

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let exec = if m * k * n >= PAR_MATMUL_WORK { Exec::default() } else { Exec::Sequential };
    matmul_with(exec, a, b, m, k, n)
}

// Calls `$f::<N>` for the common narrow widths so the inner loops run over
// fixed-size arrays, and `$f::<0>` (dynamic width) otherwise.
macro_rules! dispatch_width {
    ($n:expr, $f:ident($($arg:expr),*)) => {
        match $n {
            4 => $f::<4>($($arg),*),
            8 => $f::<8>($($arg),*),
            16 => $f::<16>($($arg),*),
            32 => $f::<32>($($arg),*),
            _ => $f::<0>($($arg),*),
        }
    };
}

fn mm_rows<const N: usize>(chunk: &mut [f64], a: &[f64], b: &[f64], r0: usize, k: usize, n: usize) {
    if N == 0 {
        for (ri, crow) in chunk.chunks_exact_mut(n).enumerate() {
            let arow = &a[(r0 + ri) * k..(r0 + ri + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                for (c, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *c += av * bv;
                }
            }
        }
        return;
    }
    for (ri, crow) in chunk.chunks_exact_mut(N).enumerate() {
        let arow = &a[(r0 + ri) * k..(r0 + ri + 1) * k];
        let mut acc = [0.0; N];
        for (p, &av) in arow.iter().enumerate() {
            let brow: &[f64; N] = b[p * N..(p + 1) * N].try_into().expect("row width");
            for j in 0..N {
                acc[j] += av * brow[j];
            }
        }
        crow.copy_from_slice(&acc);
    }
}

/// Row-major `[m, k] x [k, n]` product on raw buffers.
pub fn matmul_with(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() == m * k && b.len() == k * n, "matmul_with: buffer sizes do not match [{m}, {k}] x [{k}, {n}]");
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    let rows_per_chunk = 64;
    exec.for_each_chunk_mut(&mut out, rows_per_chunk * n, |ci, chunk| {
        dispatch_width!(n, mm_rows(chunk, a, b, ci * rows_per_chunk, k, n))
    });
    out
}

// dA = dC · Bᵀ, accumulated row by row as Σ_j dC[i, j] · Bᵀ[j, :]
fn matmul_grad_lhs(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    if k == 0 {
        return out;
    }
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    let exec = if m * k * n >= PAR_MATMUL_WORK { Exec::default() } else { Exec::Sequential };
    let rows_per_chunk = 64;
    exec.for_each_chunk_mut(&mut out, rows_per_chunk * k, |ci, chunk| {
        let r0 = ci * rows_per_chunk;
        for (ri, arow) in chunk.chunks_exact_mut(k).enumerate() {
            let drow = &dc[(r0 + ri) * n..(r0 + ri + 1) * n];
            for (j, &d) in drow.iter().enumerate() {
                for (o, bv) in arow.iter_mut().zip(&bt[j * k..(j + 1) * k]) {
                    *o += d * bv;
                }
            }
        }
    });
    out
}

fn grad_rhs_into<const N: usize>(out: &mut [f64], a: &[f64], dc: &[f64], m: usize, k: usize, n: usize) {
    if N == 0 {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let drow = &dc[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                for (o, d) in out[p * n..(p + 1) * n].iter_mut().zip(drow) {
                    *o += av * d;
                }
            }
        }
        return;
    }
    for p in 0..k {
        let mut acc = [0.0; N];
        for i in 0..m {
            let av = a[i * k + p];
            let drow: &[f64; N] = dc[i * N..(i + 1) * N].try_into().expect("row width");
            for j in 0..N {
                acc[j] += av * drow[j];
            }
        }
        out[p * N..(p + 1) * N].copy_from_slice(&acc);
    }
}

// dB = Aᵀ · dC
fn matmul_grad_rhs(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    dispatch_width!(n, grad_rhs_into(&mut out, a, dc, m, k, n));
    out
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

const NORM_EPS: f64 = 1e-12;

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf holding a copy of `t`; gradients flow to it when
    /// `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        let value = Tensor { shape: t.shape.clone(), data: t.data.clone(), requires_grad: rg, grad: None };
        self.push(value, Op::Leaf, rg)
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = Tensor { requires_grad: false, grad: None, ..t };
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value as a fresh constant (gradient stop).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(DaclError::shape(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(DaclError::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(DaclError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a `[c]` vector to every row of an `[.., c]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(DaclError::shape(
                "add_bias",
                format!("bias {:?} for rows of width {c}", self.value(bias).shape()),
            ));
        }
        let bv = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(&bv).for_each(|(r, b)| *r += b);
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias(x, bias), rg))
    }

    fn map_op(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data, requires_grad: false, grad: None }, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map_op(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map_op(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_op(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map_op(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map_op(x, f64::ln, Op::Log(x))
    }

    fn row_op(&mut self, x: Var, f: impl Fn(&[f64], &mut [f64]), op: Op) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut data = vec![0.0; t.len()];
        for (src, dst) in t.data().chunks(c).zip(data.chunks_mut(c)) {
            f(src, dst);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data, requires_grad: false, grad: None }, op, rg)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        self.row_op(
            x,
            |src, dst| {
                let lse = log_sum_exp(src);
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = (s - lse).exp());
            },
            Op::Softmax(x),
        )
    }

    pub fn log_softmax_lastdim(&mut self, x: Var) -> Var {
        self.row_op(
            x,
            |src, dst| {
                let lse = log_sum_exp(src);
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = s - lse);
            },
            Op::LogSoftmax(x),
        )
    }

    pub fn l2_normalize_lastdim(&mut self, x: Var) -> Var {
        self.row_op(
            x,
            |src, dst| {
                let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = s / norm);
            },
            Op::L2Normalize(x),
        )
    }

    /// Row-wise `log Σ exp`, producing a `[rows]` vector.
    pub fn log_sum_exp_lastdim(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data: Vec<f64> = t.data().chunks(t.cols()).map(log_sum_exp).collect();
        let rg = self.rg(&[x]);
        let shape = vec![data.len()];
        self.push(Tensor { shape, data, requires_grad: false, grad: None }, Op::LogSumExp(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sums over all leading dimensions, producing a `[cols]` vector.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, r)| *o += r);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor { shape: vec![c], data: out, requires_grad: false, grad: None }, Op::SumRows(x), rg)
    }

    /// Concatenates tensors along the first dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| DaclError::shape("concat", "no inputs"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.value(p).shape();
            if s[1..] != tail[..] {
                return Err(DaclError::shape("concat", format!("{s:?} vs trailing {tail:?}")));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Rows `start..end` along the first dimension.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.is_empty() || start > end || end > s[0] {
            return Err(DaclError::shape("slice", format!("rows {start}..{end} of {s:?}")));
        }
        let row: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * row..end * row].to_vec();
        let mut shape = s;
        shape[0] = end - start;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice(x, start), rg))
    }

    /// Selects rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(DaclError::shape("gather_rows", format!("row {i} of {r}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![idx.len(), c], data)?, Op::GatherRows(x, idx.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(DaclError::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.value(x).shape()),
            ));
        }
        let data = self.value(x).data().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape(x), rg))
    }

    fn check_grid(&self, x: Var, g: Grid, op: &'static str) -> Result<()> {
        let t = self.value(x);
        if t.len() != g.pixels() * g.channels || t.cols() != g.channels {
            return Err(DaclError::shape(op, format!("{:?} does not hold {g:?}", t.shape())));
        }
        Ok(())
    }

    /// Unfolds 3x3 zero-padded neighborhoods: `[b*h*w, c] -> [b*h*w, 9c]`.
    ///
    /// Column `(ky*3 + kx)*c + ch` holds channel `ch` at offset `(ky-1, kx-1)`.
    pub fn im2col3x3(&mut self, x: Var, g: Grid) -> Result<Var> {
        self.check_grid(x, g, "im2col3x3")?;
        let src = self.value(x).data();
        let c = g.channels;
        let mut out = vec![0.0; g.pixels() * 9 * c];
        for b in 0..g.batch {
            for y in 0..g.height {
                for xx in 0..g.width {
                    let orow = ((b * g.height + y) * g.width + xx) * 9 * c;
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= g.width as isize {
                                continue;
                            }
                            let s = ((b * g.height + sy as usize) * g.width + sx as usize) * c;
                            let o = orow + (ky * 3 + kx) * c;
                            out[o..o + c].copy_from_slice(&src[s..s + c]);
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![g.pixels(), 9 * c], out)?, Op::Im2Col(x, g), rg))
    }

    /// 2x2 average pooling with stride 2; height and width must be even.
    pub fn avg_pool2(&mut self, x: Var, g: Grid) -> Result<Var> {
        self.check_grid(x, g, "avg_pool2")?;
        if g.height % 2 != 0 || g.width % 2 != 0 {
            return Err(DaclError::shape("avg_pool2", format!("odd grid {g:?}")));
        }
        let (h2, w2, c) = (g.height / 2, g.width / 2, g.channels);
        let src = self.value(x).data();
        let mut out = vec![0.0; g.batch * h2 * w2 * c];
        for b in 0..g.batch {
            for y in 0..g.height {
                for xx in 0..g.width {
                    let s = ((b * g.height + y) * g.width + xx) * c;
                    let o = ((b * h2 + y / 2) * w2 + xx / 2) * c;
                    for ch in 0..c {
                        out[o + ch] += 0.25 * src[s + ch];
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![g.batch * h2 * w2, c], out)?, Op::AvgPool2(x, g), rg))
    }

    /// Nearest-neighbor 2x upsampling of a `[b*h*w, c]` map.
    pub fn upsample2(&mut self, x: Var, g: Grid) -> Result<Var> {
        self.check_grid(x, g, "upsample2")?;
        let (h2, w2, c) = (g.height * 2, g.width * 2, g.channels);
        let src = self.value(x).data();
        let mut out = vec![0.0; g.batch * h2 * w2 * c];
        for b in 0..g.batch {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let s = ((b * g.height + y / 2) * g.width + xx / 2) * c;
                    let o = ((b * h2 + y) * w2 + xx) * c;
                    out[o..o + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![g.batch * h2 * w2, c], out)?, Op::Upsample2(x, g), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every `requires_grad` leaf receives a gradient, zero when it does not
    /// influence `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(DaclError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, contrib: &[f64]| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], contrib);
            }
        };
        let y = node.value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if wants(*a) {
                    send(*a, &matmul_grad_lhs(g, val(*b).data(), m, k, n));
                }
                if wants(*b) {
                    send(*b, &matmul_grad_rhs(val(*a).data(), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                send(*a, g);
                send(*b, g);
            }
            Op::Sub(a, b) => {
                send(*a, g);
                if wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    send(*b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d: Vec<f64> = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                    send(*a, &d);
                }
                if wants(*b) {
                    let d: Vec<f64> = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                    send(*b, &d);
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b).data();
                if wants(*a) {
                    let d: Vec<f64> = g.iter().zip(bv).map(|(g, y)| g / y).collect();
                    send(*a, &d);
                }
                if wants(*b) {
                    let av = val(*a).data();
                    let d: Vec<f64> =
                        g.iter().zip(av).zip(bv).map(|((g, x), y)| -g * x / (y * y)).collect();
                    send(*b, &d);
                }
            }
            Op::AddBias(x, b) => {
                send(*x, g);
                if wants(*b) {
                    let c = val(*b).len();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    send(*b, &db);
                }
            }
            Op::Scale(x, s) => {
                let d: Vec<f64> = g.iter().map(|v| v * s).collect();
                send(*x, &d);
            }
            Op::AddScalar(x) | Op::Reshape(x) => send(*x, g),
            Op::Relu(x) => {
                let d: Vec<f64> =
                    g.iter().zip(val(*x).data()).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                send(*x, &d);
            }
            Op::Exp(x) => {
                let d: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y).collect();
                send(*x, &d);
            }
            Op::Log(x) => {
                let d: Vec<f64> = g.iter().zip(val(*x).data()).map(|(g, v)| g / v).collect();
                send(*x, &d);
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                send(*x, &d);
            }
            Op::LogSoftmax(x) => {
                let c = node.value.cols();
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = gi - yi.exp() * total;
                    }
                }
                send(*x, &d);
            }
            Op::LogSumExp(x) => {
                let xt = val(*x);
                let c = xt.cols();
                let mut d = vec![0.0; xt.len()];
                for (r, (dr, xr)) in d.chunks_mut(c).zip(xt.data().chunks(c)).enumerate() {
                    for (o, xi) in dr.iter_mut().zip(xr) {
                        *o = g[r] * (xi - y[r]).exp();
                    }
                }
                send(*x, &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; val(*x).len()];
                send(*x, &d);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let d = vec![g[0] / n.max(1) as f64; n];
                send(*x, &d);
            }
            Op::SumRows(x) => {
                let n = val(*x).len();
                let d: Vec<f64> = g.iter().copied().cycle().take(n).collect();
                send(*x, &d);
            }
            Op::L2Normalize(x) => {
                let xt = val(*x);
                let c = xt.cols();
                let mut d = vec![0.0; g.len()];
                for (((dr, gr), yr), xr) in
                    d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).zip(xt.data().chunks(c))
                {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = (gi - yi * dot) / norm;
                    }
                }
                send(*x, &d);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    send(p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::Slice(x, start) => {
                let xt = val(*x);
                let row: usize = xt.shape()[1..].iter().product();
                let mut d = vec![0.0; xt.len()];
                d[start * row..start * row + g.len()].copy_from_slice(g);
                send(*x, &d);
            }
            Op::GatherRows(x, idx) => {
                let xt = val(*x);
                let c = xt.cols();
                let mut d = vec![0.0; xt.len()];
                for (r, &i) in idx.iter().enumerate() {
                    d[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(a, b)| *a += b);
                }
                send(*x, &d);
            }
            Op::Im2Col(x, gr) => {
                let c = gr.channels;
                let mut d = vec![0.0; gr.pixels() * c];
                for b in 0..gr.batch {
                    for yy in 0..gr.height {
                        for xx in 0..gr.width {
                            let orow = ((b * gr.height + yy) * gr.width + xx) * 9 * c;
                            for ky in 0..3 {
                                let sy = yy as isize + ky as isize - 1;
                                if sy < 0 || sy >= gr.height as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let sx = xx as isize + kx as isize - 1;
                                    if sx < 0 || sx >= gr.width as isize {
                                        continue;
                                    }
                                    let s = ((b * gr.height + sy as usize) * gr.width + sx as usize) * c;
                                    let o = orow + (ky * 3 + kx) * c;
                                    for ch in 0..c {
                                        d[s + ch] += g[o + ch];
                                    }
                                }
                            }
                        }
                    }
                }
                send(*x, &d);
            }
            Op::AvgPool2(x, gr) => {
                let (h2, w2, c) = (gr.height / 2, gr.width / 2, gr.channels);
                let mut d = vec![0.0; gr.pixels() * c];
                for b in 0..gr.batch {
                    for yy in 0..gr.height {
                        for xx in 0..gr.width {
                            let s = ((b * gr.height + yy) * gr.width + xx) * c;
                            let o = ((b * h2 + yy / 2) * w2 + xx / 2) * c;
                            for ch in 0..c {
                                d[s + ch] = 0.25 * g[o + ch];
                            }
                        }
                    }
                }
                send(*x, &d);
            }
            Op::Upsample2(x, gr) => {
                let (h2, w2, c) = (gr.height * 2, gr.width * 2, gr.channels);
                let mut d = vec![0.0; gr.pixels() * c];
                for b in 0..gr.batch {
                    for yy in 0..h2 {
                        for xx in 0..w2 {
                            let s = ((b * gr.height + yy / 2) * gr.width + xx / 2) * c;
                            let o = ((b * h2 + yy) * w2 + xx) * c;
                            for ch in 0..c {
                                d[s + ch] += g[o + ch];
                            }
                        }
                    }
                }
                send(*x, &d);
            }
        }
    }
}
