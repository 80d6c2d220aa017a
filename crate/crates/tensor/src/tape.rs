//! Reverse-mode autodiff on a tape of dense-array ops.
//!
//! A `Tape` records every operation eagerly; `backward` replays the record
//! once in reverse. Parameters are bound by name from a `ParamStore` so the
//! optimizer can collect per-parameter gradients after the backward pass.
//! The tape is single-use: build a fresh one per training step.

use crate::array::DenseArray;
use crate::error::{Result, TensorError};
use crate::kernels::{mm_nn, mm_nt, mm_tn};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// How the codebook regression term routes its gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VqGradMode {
    /// Full gradient to the predicted vector only; the code row is detached.
    EncoderOnly,
    /// Full gradient to the code row only; the prediction is detached.
    CodeOnly,
    /// Half the gradient to each side.
    Symmetric,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.kernel[0] * self.kernel[1] * self.kernel[2]
    }

    fn positions(&self) -> usize {
        self.output[0] * self.output[1] * self.output[2]
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias {
        x: Var,
        bias: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    /// a [m,q] · bᵀ with b [p,q].
    MatMulNT {
        a: Var,
        b: Var,
        m: usize,
        q: usize,
        p: usize,
    },
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Relu(Var),
    Gelu(Var),
    RowSoftmax {
        x: Var,
        cols: usize,
        causal: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rows: usize,
        cols: usize,
        stats: Vec<(T, T)>,
    },
    Embed {
        table: Var,
        indices: Vec<usize>,
        dim: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
        cols: usize,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
        cols: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
        rows: usize,
        total: usize,
    },
    Reshape(Var),
    MeanRows {
        x: Var,
        rows: usize,
        cols: usize,
    },
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<T>,
    },
    Mse(Var, Var),
    VqMse {
        a: Var,
        b: Var,
        mode: VqGradMode,
    },
    StraightThrough(Var),
    /// x [vp³, p³] → [v³] by undoing the patch tiling.
    Unpatchify3 {
        x: Var,
        vp: usize,
        p: usize,
    },
}

struct Node<T: Scalar> {
    value: DenseArray<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    ran_backward: bool,
    bound: BTreeMap<String, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            ran_backward: false,
            bound: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: DenseArray<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: DenseArray<T>) -> Var {
        let needs = value.requires_grad;
        self.push(value, Op::Leaf, needs)
    }

    pub fn constant(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Var> {
        let arr = DenseArray::from_vec(data, shape)?;
        Ok(self.push(arr, Op::Leaf, false))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.push(DenseArray::zeros(shape), Op::Leaf, false)
    }

    /// Binds a named parameter as a gradient-carrying leaf. Binding the same
    /// name again returns the existing node.
    pub fn param(&mut self, name: &str, store: &ParamStore<T>) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let arr = store.get(name)?.clone().with_grad();
        let v = self.leaf(arr);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(n, &v)| (n.as_str(), v))
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, context: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                context,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        let arr = DenseArray::from_vec(data, &shape)?;
        Ok(self.push(arr, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        let arr = DenseArray::from_vec(data, &shape)?;
        Ok(self.push(arr, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        let arr = DenseArray::from_vec(data, &shape)?;
        Ok(self.push(arr, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let data: Vec<T> = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        let arr = DenseArray::from_vec(data, &shape)?;
        Ok(self.push(arr, Op::Scale(a, c), needs))
    }

    /// x [rows, n] + bias [n], broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(TensorError::ShapeMismatch {
                context: "add_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let n = bs[0];
        let b = self.data(bias).to_vec();
        let data: Vec<T> = self
            .data(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(&b).map(|(&v, &bv)| v + bv))
            .collect();
        let needs = self.needs(x) || self.needs(bias);
        let arr = DenseArray::from_vec(data, &xs)?;
        Ok(self.push(arr, Op::AddBias { x, bias }, needs))
    }

    // ── Products ────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                context: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        mm_nn(self.data(a), self.data(b), m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        let arr = DenseArray::from_vec(out, &[m, n])?;
        Ok(self.push(arr, Op::MatMul { a, b, m, k, n }, needs))
    }

    /// a [m,q] · bᵀ with b [p,q] → [m,p].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                context: "matmul_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, q, p) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * p];
        mm_nt(self.data(a), self.data(b), m, q, p, &mut out);
        let needs = self.needs(a) || self.needs(b);
        let arr = DenseArray::from_vec(out, &[m, p])?;
        Ok(self.push(arr, Op::MatMulNT { a, b, m, q, p }, needs))
    }

    // ── Convolution ─────────────────────────────────────────────────────

    /// x [C, D, H, W], w [O, C, kd, kh, kw], valid windows at the given
    /// stride. The stride must tile each spatial extent exactly.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 5 || sw[1] != sx[0] {
            return Err(TensorError::ShapeMismatch {
                context: "conv3d",
                lhs: sx,
                rhs: sw,
            });
        }
        if stride == 0 {
            return Err(TensorError::Config("conv stride must be nonzero".into()));
        }
        let input = [sx[1], sx[2], sx[3]];
        let kernel = [sw[2], sw[3], sw[4]];
        let mut output = [0usize; 3];
        for i in 0..3 {
            if input[i] < kernel[i] || (input[i] - kernel[i]) % stride != 0 {
                return Err(TensorError::Config(format!(
                    "kernel {} with stride {} does not tile input extent {}",
                    kernel[i], stride, input[i]
                )));
            }
            output[i] = (input[i] - kernel[i]) / stride + 1;
        }
        let geom = ConvGeom {
            c_in: sx[0],
            c_out: sw[0],
            kernel,
            input,
            output,
            stride,
        };
        self.conv_impl(x, w, geom)
    }

    /// x [C, H, W], w [O, C, kh, kw]; runs the 3-d kernel with a unit depth.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let x3 = self.reshape(x, &[sx[0], 1, sx[1], sx[2]])?;
        let w3 = self.reshape(w, &[sw[0], sw[1], 1, sw[2], sw[3]])?;
        let out = self.conv3d(x3, w3, stride)?;
        let so = self.shape(out).to_vec();
        self.reshape(out, &[so[0], so[2], so[3]])
    }

    fn conv_impl(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let cols = im2col(self.data(x), &geom);
        let (o, k, p) = (geom.c_out, geom.patch_len(), geom.positions());
        let mut out = vec![T::zero(); o * p];
        mm_nn(self.data(w), &cols, o, k, p, &mut out);
        let needs = self.needs(x) || self.needs(w);
        let arr = DenseArray::from_vec(
            out,
            &[geom.c_out, geom.output[0], geom.output[1], geom.output[2]],
        )?;
        Ok(self.push(arr, Op::Conv { x, w, geom, cols }, needs))
    }

    // ── Nonlinearities and normalization ────────────────────────────────

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data: Vec<T> = self
            .data(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        let arr = DenseArray::from_vec(data, &shape)?;
        Ok(self.push(arr, Op::Relu(a), needs))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data: Vec<T> = self.data(a).iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        let arr = DenseArray::from_vec(data, &shape)?;
        Ok(self.push(arr, Op::Gelu(a), needs))
    }

    /// Row-wise softmax over a [rows, cols] matrix. With `causal` set the
    /// matrix must be square and row i is supported on columns 0..=i.
    pub fn row_softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Dimension(format!(
                "row_softmax wants a matrix, got {s:?}"
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        if causal && rows != cols {
            return Err(TensorError::Contract(
                "causal softmax needs a square score matrix".into(),
            ));
        }
        let mut data = vec![T::zero(); rows * cols];
        for (i, (row_in, row_out)) in self
            .data(x)
            .chunks_exact(cols)
            .zip(data.chunks_exact_mut(cols))
            .enumerate()
        {
            let support = if causal { i + 1 } else { cols };
            softmax_row(&row_in[..support], &mut row_out[..support]);
        }
        let needs = self.needs(x);
        let arr = DenseArray::from_vec(data, &s)?;
        Ok(self.push(arr, Op::RowSoftmax { x, cols, causal }, needs))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Dimension(format!(
                "layer_norm wants a matrix, got {s:?}"
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(TensorError::ShapeMismatch {
                context: "layer_norm scale/shift",
                lhs: self.shape(gamma).to_vec(),
                rhs: vec![cols],
            });
        }
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let mut stats = Vec::with_capacity(rows);
        let mut data = vec![T::zero(); rows * cols];
        let nc = T::from_f64(cols as f64);
        for (row_in, row_out) in self
            .data(x)
            .chunks_exact(cols)
            .zip(data.chunks_exact_mut(cols))
        {
            let mean = row_in.iter().copied().sum::<T>() / nc;
            let var = row_in
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / nc;
            let rstd = (var + eps).sqrt().recip();
            stats.push((mean, rstd));
            for (j, (o, &v)) in row_out.iter_mut().zip(row_in).enumerate() {
                *o = (v - mean) * rstd * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let arr = DenseArray::from_vec(data, &s)?;
        Ok(self.push(
            arr,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rows,
                cols,
                stats,
            },
            needs,
        ))
    }

    // ── Gather / scatter and layout ─────────────────────────────────────

    /// Gathers rows of a [V, D] table → [indices.len(), D].
    pub fn embed(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Dimension(format!(
                "embed wants a matrix table, got {s:?}"
            )));
        }
        let (vocab, dim) = (s[0], s[1]);
        for &i in indices {
            if i >= vocab {
                return Err(TensorError::Index {
                    context: "embed",
                    index: i,
                    size: vocab,
                });
            }
        }
        let t = self.data(table);
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(&t[i * dim..(i + 1) * dim]);
        }
        let needs = self.needs(table);
        let arr = DenseArray::from_vec(data, &[indices.len(), dim])?;
        Ok(self.push(
            arr,
            Op::Embed {
                table,
                indices: indices.to_vec(),
                dim,
            },
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_rows of nothing".into()));
        }
        let cols = self.shape(parts[0]).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(TensorError::ShapeMismatch {
                    context: "concat_rows",
                    lhs: s.to_vec(),
                    rhs: vec![0, cols],
                });
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let arr = DenseArray::from_vec(data, &[rows, cols])?;
        Ok(self.push(
            arr,
            Op::ConcatRows {
                parts: parts.to_vec(),
                cols,
            },
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_cols of nothing".into()));
        }
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    context: "concat_cols",
                    lhs: s.to_vec(),
                    rhs: vec![rows, 0],
                });
            }
            widths.push(s[1]);
            total += s[1];
        }
        let mut data = vec![T::zero(); rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for (r, src) in self.data(p).chunks_exact(w).enumerate() {
                data[r * total + off..r * total + off + w].copy_from_slice(src);
            }
            off += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let arr = DenseArray::from_vec(data, &[rows, total])?;
        Ok(self.push(
            arr,
            Op::ConcatCols {
                parts: parts.iter().copied().zip(widths).collect(),
                rows,
            },
            needs,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Dimension(format!(
                "slice_rows wants a matrix, got {s:?}"
            )));
        }
        if start + len > s[0] {
            return Err(TensorError::Index {
                context: "slice_rows",
                index: start + len,
                size: s[0],
            });
        }
        let cols = s[1];
        let data = self.data(x)[start * cols..(start + len) * cols].to_vec();
        let needs = self.needs(x);
        let arr = DenseArray::from_vec(data, &[len, cols])?;
        Ok(self.push(
            arr,
            Op::SliceRows {
                x,
                start,
                len,
                cols,
            },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Dimension(format!(
                "slice_cols wants a matrix, got {s:?}"
            )));
        }
        if start + len > s[1] {
            return Err(TensorError::Index {
                context: "slice_cols",
                index: start + len,
                size: s[1],
            });
        }
        let (rows, total) = (s[0], s[1]);
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * total + start..r * total + start + len]);
        }
        let needs = self.needs(x);
        let arr = DenseArray::from_vec(data, &[rows, len])?;
        Ok(self.push(
            arr,
            Op::SliceCols {
                x,
                start,
                len,
                rows,
                total,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let arr = DenseArray::from_vec(self.data(x).to_vec(), &[self.data(x).len()])?
            .reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(arr, Op::Reshape(x), needs))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(TensorError::Dimension(format!(
                "mean_rows wants a nonempty matrix, got {s:?}"
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut data = vec![T::zero(); cols];
        for row in self.data(x).chunks_exact(cols) {
            for (o, &v) in data.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let nr = T::from_f64(rows as f64);
        for v in data.iter_mut() {
            *v = *v / nr;
        }
        let needs = self.needs(x);
        let arr = DenseArray::from_vec(data, &[1, cols])?;
        Ok(self.push(arr, Op::MeanRows { x, rows, cols }, needs))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total: T = self.data(x).iter().copied().sum();
        let needs = self.needs(x);
        let arr = DenseArray::scalar(total);
        Ok(self.push(arr, Op::SumAll(x), needs))
    }

    // ── Losses ──────────────────────────────────────────────────────────

    /// −log softmax(logits)[target] for a 1-d logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 1 {
            return Err(TensorError::Dimension(format!(
                "cross_entropy wants a logit vector, got {s:?}"
            )));
        }
        if target >= s[0] {
            return Err(TensorError::Index {
                context: "cross_entropy target",
                index: target,
                size: s[0],
            });
        }
        let l = self.data(logits);
        if l.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::Numeric("non-finite logits".into()));
        }
        let mut probs = vec![T::zero(); s[0]];
        softmax_row(l, &mut probs);
        let max = l.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max
            + l.iter()
                .map(|&v| (v - max).exp())
                .sum::<T>()
                .ln();
        let loss = lse - l[target];
        let needs = self.needs(logits);
        let arr = DenseArray::scalar(loss);
        Ok(self.push(
            arr,
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            needs,
        ))
    }

    /// Mean squared difference; true gradient to both sides.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let loss = mse_value(self.data(a), self.data(b));
        let needs = self.needs(a) || self.needs(b);
        let arr = DenseArray::scalar(loss);
        Ok(self.push(arr, Op::Mse(a, b), needs))
    }

    /// Mean squared difference with the codebook detachment convention.
    pub fn vq_mse(&mut self, a: Var, b: Var, mode: VqGradMode) -> Result<Var> {
        self.same_shape(a, b, "vq_mse")?;
        let loss = mse_value(self.data(a), self.data(b));
        let needs = self.needs(a) || self.needs(b);
        let arr = DenseArray::scalar(loss);
        Ok(self.push(arr, Op::VqMse { a, b, mode }, needs))
    }

    /// Forward takes the replacement values; backward passes the incoming
    /// gradient to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, replacement: &[T]) -> Result<Var> {
        if replacement.len() != self.data(x).len() {
            return Err(TensorError::ShapeMismatch {
                context: "straight_through",
                lhs: vec![self.data(x).len()],
                rhs: vec![replacement.len()],
            });
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        let arr = DenseArray::from_vec(replacement.to_vec(), &shape)?;
        Ok(self.push(arr, Op::StraightThrough(x), needs))
    }

    /// Per-patch channel vectors [vp³, p³] → flat voxel logits [(vp·p)³],
    /// laid out with the last spatial axis fastest.
    pub fn unpatchify3(&mut self, x: Var, vp: usize, p: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != vp * vp * vp || s[1] != p * p * p {
            return Err(TensorError::ShapeMismatch {
                context: "unpatchify3",
                lhs: s,
                rhs: vec![vp * vp * vp, p * p * p],
            });
        }
        let v = vp * p;
        let src = self.data(x);
        let mut data = vec![T::zero(); v * v * v];
        unpatchify_map(vp, p, |tok, inner, flat| {
            data[flat] = src[tok * p * p * p + inner];
        });
        let needs = self.needs(x);
        let arr = DenseArray::from_vec(data, &[v * v * v])?;
        Ok(self.push(arr, Op::Unpatchify3 { x, vp, p }, needs))
    }

    // ── Attention ───────────────────────────────────────────────────────

    /// softmax(q·kᵀ/√d)·v. With `causal`, position i attends to keys 0..=i
    /// (q and k must then share the row count).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        for (name, var) in [("q", q), ("k", k), ("v", v)] {
            if !self.value(var).all_finite() {
                return Err(TensorError::Numeric(format!(
                    "attention input {name} is not finite"
                )));
            }
        }
        let d = *self
            .shape(q)
            .get(1)
            .ok_or_else(|| TensorError::Dimension("attention wants matrices".into()))?;
        let scores = self.matmul_nt(q, k)?;
        let scaled = self.scale(scores, T::from_f64(1.0 / (d as f64).sqrt()))?;
        let probs = self.row_softmax(scaled, causal)?;
        self.matmul(probs, v)
    }

    // ── Backward ────────────────────────────────────────────────────────

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Gradients of every bound parameter, by name. Parameters that did not
    /// participate in the loss report `None`.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, Option<&[T]>)> {
        self.bound
            .iter()
            .map(move |(n, &v)| (n.as_str(), self.grad(v)))
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.ran_backward {
            return Err(TensorError::Contract(
                "backward already ran on this record; rebuild the forward pass first".into(),
            ));
        }
        if self.data(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward wants a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.needs(loss) {
            return Err(TensorError::Contract(
                "loss does not depend on any gradient-carrying leaf".into(),
            ));
        }
        self.ran_backward = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_backward(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: &[T]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (o, &c) in g.iter_mut().zip(contrib) {
                    *o = *o + c;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    fn apply_backward(&mut self, idx: usize, g: &[T]) {
        // Ops cheaply reconstructible from stored state; values are read
        // through raw pointers scoped to this call since inputs and the
        // node never alias.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<T> = g
                    .iter()
                    .zip(self.data(*b))
                    .map(|(&gv, &bv)| gv * bv)
                    .collect();
                let db: Vec<T> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&gv, &av)| gv * av)
                    .collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<T> = g.iter().map(|&v| v * *c).collect();
                self.accumulate(*a, &da);
            }
            Op::AddBias { x, bias } => {
                self.accumulate(*x, g);
                let n = self.data(*bias).len();
                let mut db = vec![T::zero(); n];
                for row in g.chunks_exact(n) {
                    for (o, &v) in db.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                self.accumulate(*bias, &db);
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    mm_nt(g, self.data(*b), *m, *n, *k, &mut da);
                    self.accumulate(*a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    mm_tn(self.data(*a), g, *m, *k, *n, &mut db);
                    self.accumulate(*b, &db);
                }
            }
            Op::MatMulNT { a, b, m, q, p } => {
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * q];
                    mm_nn(g, self.data(*b), *m, *p, *q, &mut da);
                    self.accumulate(*a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); p * q];
                    mm_tn(g, self.data(*a), *m, *p, *q, &mut db);
                    self.accumulate(*b, &db);
                }
            }
            Op::Conv { x, w, geom, cols } => {
                let (o, k, p) = (geom.c_out, geom.patch_len(), geom.positions());
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); o * k];
                    mm_nt(g, cols, o, p, k, &mut dw);
                    self.accumulate(*w, &dw);
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); k * p];
                    mm_tn(self.data(*w), g, o, k, p, &mut dcols);
                    let dx = col2im(&dcols, geom);
                    self.accumulate(*x, &dx);
                }
            }
            Op::Relu(a) => {
                let da: Vec<T> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Gelu(a) => {
                let da: Vec<T> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&gv, &xv)| gv * gelu_grad(xv))
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::RowSoftmax { x, cols, causal } => {
                let y = self.data(Var(idx));
                let mut dx = vec![T::zero(); y.len()];
                for (i, ((y_row, g_row), dx_row)) in y
                    .chunks_exact(*cols)
                    .zip(g.chunks_exact(*cols))
                    .zip(dx.chunks_exact_mut(*cols))
                    .enumerate()
                {
                    let support = if *causal { i + 1 } else { *cols };
                    let dot: T = y_row[..support]
                        .iter()
                        .zip(&g_row[..support])
                        .map(|(&yv, &gv)| yv * gv)
                        .sum();
                    for j in 0..support {
                        dx_row[j] = y_row[j] * (g_row[j] - dot);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rows,
                cols,
                stats,
            } => {
                let xs = self.data(*x);
                let gm = self.data(*gamma);
                let nc = T::from_f64(*cols as f64);
                let mut dx = vec![T::zero(); rows * cols];
                let mut dgamma = vec![T::zero(); *cols];
                let mut dbeta = vec![T::zero(); *cols];
                for ((row_x, row_g), (row_dx, &(mean, rstd))) in xs
                    .chunks_exact(*cols)
                    .zip(g.chunks_exact(*cols))
                    .zip(dx.chunks_exact_mut(*cols).zip(stats.iter()))
                {
                    let mut sum_gg = T::zero();
                    let mut sum_ggx = T::zero();
                    for j in 0..*cols {
                        let xhat = (row_x[j] - mean) * rstd;
                        let gg = row_g[j] * gm[j];
                        sum_gg = sum_gg + gg;
                        sum_ggx = sum_ggx + gg * xhat;
                        dgamma[j] = dgamma[j] + row_g[j] * xhat;
                        dbeta[j] = dbeta[j] + row_g[j];
                    }
                    let m1 = sum_gg / nc;
                    let m2 = sum_ggx / nc;
                    for j in 0..*cols {
                        let xhat = (row_x[j] - mean) * rstd;
                        row_dx[j] = rstd * (row_g[j] * gm[j] - m1 - xhat * m2);
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gamma, &dgamma);
                self.accumulate(*beta, &dbeta);
            }
            Op::Embed {
                table,
                indices,
                dim,
            } => {
                let vocab = self.shape(*table)[0];
                let mut dt = vec![T::zero(); vocab * dim];
                for (row, &i) in g.chunks_exact(*dim).zip(indices) {
                    for (o, &v) in dt[i * dim..(i + 1) * dim].iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                self.accumulate(*table, &dt);
            }
            Op::ConcatRows { parts, cols } => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.shape(p)[0];
                    let part = g[off..off + rows * cols].to_vec();
                    self.accumulate(p, &part);
                    off += rows * cols;
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|&(_, w)| w).sum();
                let mut off = 0;
                for &(p, w) in parts {
                    let mut part = Vec::with_capacity(rows * w);
                    for r in 0..*rows {
                        part.extend_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    self.accumulate(p, &part);
                    off += w;
                }
            }
            Op::SliceRows {
                x,
                start,
                len,
                cols,
            } => {
                let total_rows = self.shape(*x)[0];
                let mut dx = vec![T::zero(); total_rows * cols];
                dx[start * cols..(start + len) * cols].copy_from_slice(g);
                self.accumulate(*x, &dx);
            }
            Op::SliceCols {
                x,
                start,
                len,
                rows,
                total,
            } => {
                let mut dx = vec![T::zero(); rows * total];
                for r in 0..*rows {
                    dx[r * total + start..r * total + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(*x, &dx);
            }
            Op::Reshape(x) => {
                self.accumulate(*x, g);
            }
            Op::MeanRows { x, rows, cols } => {
                let inv = T::from_f64(1.0 / *rows as f64);
                let mut dx = vec![T::zero(); rows * cols];
                for row in dx.chunks_exact_mut(*cols) {
                    for (o, &v) in row.iter_mut().zip(g) {
                        *o = v * inv;
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::SumAll(x) => {
                let dx = vec![g[0]; self.data(*x).len()];
                self.accumulate(*x, &dx);
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let mut dl: Vec<T> = probs.iter().map(|&p| p * g[0]).collect();
                dl[*target] = dl[*target] - g[0];
                self.accumulate(*logits, &dl);
            }
            Op::Mse(a, b) => {
                let n = T::from_f64(self.data(*a).len() as f64);
                let two = T::from_f64(2.0);
                let da: Vec<T> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .map(|(&av, &bv)| two * (av - bv) / n * g[0])
                    .collect();
                let db: Vec<T> = da.iter().map(|&v| -v).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::VqMse { a, b, mode } => {
                let n = T::from_f64(self.data(*a).len() as f64);
                let two = T::from_f64(2.0);
                let half = T::from_f64(0.5);
                let base: Vec<T> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .map(|(&av, &bv)| two * (av - bv) / n * g[0])
                    .collect();
                match mode {
                    VqGradMode::EncoderOnly => self.accumulate(*a, &base),
                    VqGradMode::CodeOnly => {
                        let db: Vec<T> = base.iter().map(|&v| -v).collect();
                        self.accumulate(*b, &db);
                    }
                    VqGradMode::Symmetric => {
                        let da: Vec<T> = base.iter().map(|&v| v * half).collect();
                        let db: Vec<T> = base.iter().map(|&v| -v * half).collect();
                        self.accumulate(*a, &da);
                        self.accumulate(*b, &db);
                    }
                }
            }
            Op::StraightThrough(x) => {
                self.accumulate(*x, g);
            }
            Op::Unpatchify3 { x, vp, p } => {
                let p3 = p * p * p;
                let mut dx = vec![T::zero(); vp * vp * vp * p3];
                unpatchify_map(*vp, *p, |tok, inner, flat| {
                    dx[tok * p3 + inner] = g[flat];
                });
                self.accumulate(*x, &dx);
            }
        }
        self.nodes[idx].op = op;
    }
}

// ── Shared math ─────────────────────────────────────────────────────────

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn mse_value<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = T::from_f64(a.len() as f64);
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        / n
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c0 = T::from_f64(0.7978845608028654);
    let c1 = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c0 = T::from_f64(0.7978845608028654);
    let c1 = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c0 * (T::one() + three * c1 * x * x)
}

/// Calls f(token, inner, flat_voxel) over the patch tiling of a cubic grid.
fn unpatchify_map(vp: usize, p: usize, mut f: impl FnMut(usize, usize, usize)) {
    let v = vp * p;
    for tx in 0..vp {
        for ty in 0..vp {
            for tz in 0..vp {
                let tok = (tx * vp + ty) * vp + tz;
                for dx in 0..p {
                    for dy in 0..p {
                        for dz in 0..p {
                            let inner = (dx * p + dy) * p + dz;
                            let flat = ((tx * p + dx) * v + (ty * p + dy)) * v + (tz * p + dz);
                            f(tok, inner, flat);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Scalar>(x: &[T], geom: &ConvGeom) -> Vec<T> {
    let [id, ih, iw] = geom.input;
    let [kd, kh, kw] = geom.kernel;
    let [od, oh, ow] = geom.output;
    let s = geom.stride;
    let positions = geom.positions();
    let mut cols = vec![T::zero(); geom.patch_len() * positions];
    let mut row = 0;
    for c in 0..geom.c_in {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for zd in 0..kd {
            for zh in 0..kh {
                for zw in 0..kw {
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    let mut pos = 0;
                    for a in 0..od {
                        let base_d = (a * s + zd) * ih * iw;
                        for b in 0..oh {
                            let base_h = base_d + (b * s + zh) * iw;
                            for cc in 0..ow {
                                dst[pos] = xc[base_h + cc * s + zw];
                                pos += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(dcols: &[T], geom: &ConvGeom) -> Vec<T> {
    let [id, ih, iw] = geom.input;
    let [kd, kh, kw] = geom.kernel;
    let [od, oh, ow] = geom.output;
    let s = geom.stride;
    let positions = geom.positions();
    let mut dx = vec![T::zero(); geom.c_in * id * ih * iw];
    let mut row = 0;
    for c in 0..geom.c_in {
        let base_c = c * id * ih * iw;
        for zd in 0..kd {
            for zh in 0..kh {
                for zw in 0..kw {
                    let src = &dcols[row * positions..(row + 1) * positions];
                    let mut pos = 0;
                    for a in 0..od {
                        let base_d = base_c + (a * s + zd) * ih * iw;
                        for b in 0..oh {
                            let base_h = base_d + (b * s + zh) * iw;
                            for cc in 0..ow {
                                let i = base_h + cc * s + zw;
                                dx[i] = dx[i] + src[pos];
                                pos += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    dx
}
