//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations are recorded in execution order; `backward` walks the nodes in
//! exact reverse order, which is a valid reverse topological order because
//! every op only consumes previously created nodes. Reductions use a fixed
//! sequential summation order so reruns are bit-identical.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Numeric precision of tape values. F32 rounds every primitive result to
/// f32 precision while keeping f64 storage (gradient checking needs F64).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F64,
    F32,
}

impl Default for Precision {
    fn default() -> Self {
        Precision::F64
    }
}

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRowVec(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    MaxReduce {
        x: Var,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    MeanAxis0(Var),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        end: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: Vec<f64>,
        istd: Vec<f64>,
    },
    RowScaleShift {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        training: bool,
        mean: Vec<f64>,
        istd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    BceWithLogits {
        x: Var,
        labels: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

/// Recording of one forward pass plus the state needed to replay it backward.
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(usize, ParamId)>,
    precision: Precision,
    grads: Vec<Vec<f64>>,
    backward_done: bool,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("rows_cols on shape {shape:?}"),
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            precision,
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a single-element var.
    pub fn item(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if self.backward_done {
            Some(&self.grads[v.0])
        } else {
            None
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, mut data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if self.precision == Precision::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a constant input (no gradient).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), false)
            .expect("finite constant")
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(&Tensor::scalar(v))
    }

    /// Record a trainable input that will receive a gradient (used directly
    /// in tests; models go through `param`).
    pub fn input(&mut self, t: &Tensor) -> Result<Var> {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), true)
    }

    /// Bind a stored parameter onto the tape. Its gradient is routed back to
    /// the store by `apply_param_grads`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self
            .push(Op::Leaf, p.value.shape.clone(), p.value.data.clone(), true)
            .expect("finite parameter");
        self.bindings.push((v.0, id));
        v
    }

    // ---- elementwise -----------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>, bool, bool)> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let a_scalar = na.data.len() == 1;
        let b_scalar = nb.data.len() == 1;
        if na.shape != nb.shape && !a_scalar && !b_scalar {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let shape = if a_scalar { nb.shape.clone() } else { na.shape.clone() };
        Ok((shape, na.data.clone(), nb.data.clone(), a_scalar, b_scalar))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, da, db, asc, bsc) = self.binary("add", a, b)?;
        let n = shape.iter().product();
        let data = (0..n)
            .map(|i| da[if asc { 0 } else { i }] + db[if bsc { 0 } else { i }])
            .collect();
        let rg = self.req(a) || self.req(b);
        self.push(Op::Add(a, b), shape, data, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, da, db, asc, bsc) = self.binary("sub", a, b)?;
        let n = shape.iter().product();
        let data = (0..n)
            .map(|i| da[if asc { 0 } else { i }] - db[if bsc { 0 } else { i }])
            .collect();
        let rg = self.req(a) || self.req(b);
        self.push(Op::Sub(a, b), shape, data, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, da, db, asc, bsc) = self.binary("mul", a, b)?;
        let n = shape.iter().product();
        let data = (0..n)
            .map(|i| da[if asc { 0 } else { i }] * db[if bsc { 0 } else { i }])
            .collect();
        let rg = self.req(a) || self.req(b);
        self.push(Op::Mul(a, b), shape, data, rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, da, db, asc, bsc) = self.binary("div", a, b)?;
        let n = shape.iter().product();
        let data = (0..n)
            .map(|i| da[if asc { 0 } else { i }] / db[if bsc { 0 } else { i }])
            .collect();
        let rg = self.req(a) || self.req(b);
        self.push(Op::Div(a, b), shape, data, rg)
    }

    /// Add a length-`cols` vector to every row of a 2-D tensor (bias add).
    pub fn add_row_vec(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if self.nodes[b.0].data.len() != c {
            return Err(Error::ShapeMismatch {
                op: "add_row_vec",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let xd = self.nodes[x.0].data.clone();
        let bd = self.nodes[b.0].data.clone();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = xd[i * c + j] + bd[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.req(x) || self.req(b);
        self.push(Op::AddRowVec(x, b), shape, data, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.nodes[a.0].data.iter().map(|v| v * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.req(a);
        self.push(Op::Scale(a, c), shape, data, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.req(a);
        self.push(Op::Relu(a), shape, data, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0].data.iter().map(|v| sigmoid(*v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.req(a);
        self.push(Op::Sigmoid(a), shape, data, rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0].data.iter().map(|v| v.sqrt()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.req(a);
        self.push(Op::Sqrt(a), shape, data, rg)
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let da = self.nodes[a.0].data.clone();
        let db = self.nodes[b.0].data.clone();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += da[i * k + p] * db[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        let rg = self.req(a) || self.req(b);
        self.push(Op::MatMul(a, b), vec![m, n], out, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: 0,
                shape: s,
            });
        }
        let (r, c) = (s[0], s[1]);
        let da = &self.nodes[a.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = da[i * c + j];
            }
        }
        let rg = self.req(a);
        self.push(Op::Transpose(a), vec![c, r], out, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.req(a);
        self.push(Op::Reshape(a), shape, data, rg)
    }

    // ---- reductions ------------------------------------------------------

    fn axis_slices(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        // Returns (n_slices, slice_len, stride within slice).
        match (shape.len(), axis) {
            (1, 0) => Ok((1, shape[0], 1)),
            (2, 1) => Ok((shape[0], shape[1], 1)),
            (2, 0) => Ok((shape[1], shape[0], shape[1])),
            _ => Err(Error::InvalidAxis {
                op,
                axis,
                shape: shape.to_vec(),
            }),
        }
    }

    fn slice_start(shape: &[usize], axis: usize, slice: usize) -> usize {
        match (shape.len(), axis) {
            (1, 0) => 0,
            (2, 1) => slice * shape[1],
            (2, 0) => slice,
            _ => unreachable!(),
        }
    }

    /// Shift-invariant softmax along `axis` of a 1-D or 2-D tensor.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (slices, len, stride) = Self::axis_slices(&shape, axis, "softmax")?;
        let xd = self.nodes[x.0].data.clone();
        let mut out = vec![0.0; xd.len()];
        for s in 0..slices {
            let base = Self::slice_start(&shape, axis, s);
            let mut mx = f64::NEG_INFINITY;
            for i in 0..len {
                mx = mx.max(xd[base + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                let e = (xd[base + i * stride] - mx).exp();
                out[base + i * stride] = e;
                sum += e;
            }
            for i in 0..len {
                out[base + i * stride] /= sum;
            }
        }
        let rg = self.req(x);
        self.push(Op::Softmax { x, axis }, shape, out, rg)
    }

    /// Max along `axis` with argmax indices; ties break to the lowest index.
    /// Backward routes the gradient only to the argmax position.
    pub fn max_reduce(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(x).to_vec();
        let (slices, len, stride) = Self::axis_slices(&shape, axis, "max_reduce")?;
        if len == 0 {
            return Err(Error::InvalidAxis {
                op: "max_reduce",
                axis,
                shape,
            });
        }
        let xd = self.nodes[x.0].data.clone();
        let mut vals = vec![0.0; slices];
        let mut flat = vec![0usize; slices];
        let mut local = vec![0usize; slices];
        for s in 0..slices {
            let base = Self::slice_start(&shape, axis, s);
            let mut best = xd[base];
            let mut best_i = 0usize;
            for i in 1..len {
                let v = xd[base + i * stride];
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            vals[s] = best;
            flat[s] = base + best_i * stride;
            local[s] = best_i;
        }
        let out_shape = if shape.len() == 1 { vec![1] } else { vec![slices] };
        let rg = self.req(x);
        let v = self.push(
            Op::MaxReduce { x, argmax: flat },
            out_shape,
            vals,
            rg,
        )?;
        Ok((v, local))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let mut acc = 0.0;
        for v in &self.nodes[x.0].data {
            acc += v;
        }
        let rg = self.req(x);
        self.push(Op::SumAll(x), vec![1], vec![acc], rg)
    }

    /// Mean over the row axis of a 2-D tensor: [r, c] -> [c].
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += xd[i * c + j];
            }
        }
        for v in &mut out {
            *v /= r as f64;
        }
        let rg = self.req(x);
        self.push(Op::MeanAxis0(x), vec![c], out, rg)
    }

    // ---- structure -------------------------------------------------------

    /// Stack inputs along the row axis. 1-D inputs count as one row.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let (_, c0) = rows_cols(self.shape(parts[0]));
        let mut total_rows = 0;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if c != c0 {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![c0],
                    rhs: self.shape(p).to_vec(),
                });
            }
            total_rows += r;
        }
        let mut data = Vec::with_capacity(total_rows * c0);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let rg = parts.iter().any(|&p| self.req(p));
        self.push(Op::ConcatRows(parts.to_vec()), vec![total_rows, c0], data, rg)
    }

    /// Columns [start, end) of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if end > c || start >= end {
            return Err(Error::InvalidAxis {
                op: "slice_cols",
                axis: 1,
                shape: self.shape(x).to_vec(),
            });
        }
        let w = end - start;
        let xd = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&xd[i * c + start..i * c + end]);
        }
        let rg = self.req(x);
        self.push(Op::SliceCols { x, start, end }, vec![r, w], data, rg)
    }

    // ---- normalization ---------------------------------------------------

    pub const NORM_EPS: f64 = 1e-5;

    /// Per-row normalization over the last axis, with optional per-column
    /// scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        let xd = self.nodes[x.0].data.clone();
        let gd = gamma.map(|g| self.nodes[g.0].data.clone());
        let bd = beta.map(|b| self.nodes[b.0].data.clone());
        let mut mean = vec![0.0; r];
        let mut istd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mut m = 0.0;
            for v in row {
                m += v;
            }
            m /= c as f64;
            let mut var = 0.0;
            for v in row {
                var += (v - m) * (v - m);
            }
            var /= c as f64;
            let is = 1.0 / (var + Self::NORM_EPS).sqrt();
            mean[i] = m;
            istd[i] = is;
            for j in 0..c {
                let mut y = (row[j] - m) * is;
                if let Some(g) = &gd {
                    y *= g[j];
                }
                if let Some(b) = &bd {
                    y += b[j];
                }
                out[i * c + j] = y;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.req(x)
            || gamma.map(|g| self.req(g)).unwrap_or(false)
            || beta.map(|b| self.req(b)).unwrap_or(false);
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                istd,
            },
            shape,
            out,
            rg,
        )
    }

    /// Per-row affine: row i scaled by gamma[i], shifted by beta[i].
    /// Used for instance normalization over [channels, spatial].
    pub fn row_scale_shift(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if self.nodes[gamma.0].data.len() != r || self.nodes[beta.0].data.len() != r {
            return Err(Error::ShapeMismatch {
                op: "row_scale_shift",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xd = self.nodes[x.0].data.clone();
        let gd = self.nodes[gamma.0].data.clone();
        let bd = self.nodes[beta.0].data.clone();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] * gd[i] + bd[i];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        self.push(Op::RowScaleShift { x, gamma, beta }, shape, out, rg)
    }

    /// Batch normalization over the batch (row) axis of [B, C].
    /// Training mode uses batch statistics and updates the running
    /// mean/variance buffers in `store` (momentum update, unbiased variance
    /// for the running estimate). Eval mode uses running statistics only.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        store: &mut ParamStore,
        running_mean: ParamId,
        running_var: ParamId,
        training: bool,
        momentum: f64,
    ) -> Result<Var> {
        let (b, c) = rows_cols(self.shape(x));
        if training && b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        let xd = self.nodes[x.0].data.clone();
        let gd = self.nodes[gamma.0].data.clone();
        let bd = self.nodes[beta.0].data.clone();
        let (mean, istd) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for j in 0..c {
                let mut m = 0.0;
                for i in 0..b {
                    m += xd[i * c + j];
                }
                m /= b as f64;
                let mut v = 0.0;
                for i in 0..b {
                    let d = xd[i * c + j] - m;
                    v += d * d;
                }
                mean[j] = m;
                var[j] = v / b as f64;
            }
            // Momentum update of the running buffers.
            let unbias = b as f64 / (b as f64 - 1.0);
            {
                let rm = &mut store.get_mut(running_mean).value.data;
                for j in 0..c {
                    rm[j] = (1.0 - momentum) * rm[j] + momentum * mean[j];
                }
            }
            {
                let rv = &mut store.get_mut(running_var).value.data;
                for j in 0..c {
                    rv[j] = (1.0 - momentum) * rv[j] + momentum * var[j] * unbias;
                }
            }
            let istd: Vec<f64> = var
                .iter()
                .map(|v| 1.0 / (v + Self::NORM_EPS).sqrt())
                .collect();
            (mean, istd)
        } else {
            let mean = store.get(running_mean).value.data.clone();
            let istd: Vec<f64> = store
                .get(running_var)
                .value
                .data
                .iter()
                .map(|v| 1.0 / (v + Self::NORM_EPS).sqrt())
                .collect();
            (mean, istd)
        };
        let mut out = vec![0.0; b * c];
        for i in 0..b {
            for j in 0..c {
                out[i * c + j] = (xd[i * c + j] - mean[j]) * istd[j] * gd[j] + bd[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                training,
                mean,
                istd,
            },
            shape,
            out,
            rg,
        )
    }

    // ---- convolution -----------------------------------------------------

    /// 2-D cross-correlation with same padding. x: [Cin, H, W],
    /// w: [Cout, Cin, k, k] (k odd), b: [Cout].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let pad = k / 2;
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let xd = self.nodes[x.0].data.clone();
        let wdat = self.nodes[w.0].data.clone();
        let bdat = self.nodes[b.0].data.clone();
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bdat[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += xd[ci * h * wd + iy as usize * wd + ix as usize]
                                        * wdat[((co * cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let rg = self.req(x) || self.req(w) || self.req(b);
        self.push(
            Op::Conv2d { x, w, b, stride, pad },
            vec![cout, oh, ow],
            out,
            rg,
        )
    }

    // ---- losses ----------------------------------------------------------

    /// Elementwise binary cross entropy on logits, numerically stable:
    /// softplus(x) - x * label.
    pub fn bce_with_logits(&mut self, x: Var, labels: &[f64]) -> Result<Var> {
        if labels.len() != self.nodes[x.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(x).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let data = self.nodes[x.0]
            .data
            .iter()
            .zip(labels)
            .map(|(&v, &z)| softplus(v) - v * z)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.req(x);
        self.push(
            Op::BceWithLogits {
                x,
                labels: labels.to_vec(),
            },
            shape,
            data,
            rg,
        )
    }

    // ---- backward --------------------------------------------------------

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        self.grads[loss.0][0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.step_backward(i);
        }
        self.backward_done = true;
        Ok(())
    }

    fn add_grad(&mut self, v: Var, scalar_target: bool, idx: usize, g: f64) {
        if scalar_target {
            self.grads[v.0][0] += g;
        } else {
            self.grads[v.0][idx] += g;
        }
    }

    fn step_backward(&mut self, i: usize) {
        let node = self.nodes[i].clone();
        let g = self.grads[i].clone();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let asc = self.nodes[a.0].data.len() == 1 && g.len() > 1;
                let bsc = self.nodes[b.0].data.len() == 1 && g.len() > 1;
                for (idx, &gv) in g.iter().enumerate() {
                    if self.req(a) {
                        self.add_grad(a, asc, idx, gv);
                    }
                    if self.req(b) {
                        self.add_grad(b, bsc, idx, gv);
                    }
                }
            }
            Op::Sub(a, b) => {
                let asc = self.nodes[a.0].data.len() == 1 && g.len() > 1;
                let bsc = self.nodes[b.0].data.len() == 1 && g.len() > 1;
                for (idx, &gv) in g.iter().enumerate() {
                    if self.req(a) {
                        self.add_grad(a, asc, idx, gv);
                    }
                    if self.req(b) {
                        self.add_grad(b, bsc, idx, -gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                let asc = self.nodes[a.0].data.len() == 1 && g.len() > 1;
                let bsc = self.nodes[b.0].data.len() == 1 && g.len() > 1;
                let da = self.nodes[a.0].data.clone();
                let db = self.nodes[b.0].data.clone();
                for (idx, &gv) in g.iter().enumerate() {
                    let av = da[if asc { 0 } else { idx }];
                    let bv = db[if bsc { 0 } else { idx }];
                    if self.req(a) {
                        self.add_grad(a, asc, idx, gv * bv);
                    }
                    if self.req(b) {
                        self.add_grad(b, bsc, idx, gv * av);
                    }
                }
            }
            Op::Div(a, b) => {
                let asc = self.nodes[a.0].data.len() == 1 && g.len() > 1;
                let bsc = self.nodes[b.0].data.len() == 1 && g.len() > 1;
                let da = self.nodes[a.0].data.clone();
                let db = self.nodes[b.0].data.clone();
                for (idx, &gv) in g.iter().enumerate() {
                    let av = da[if asc { 0 } else { idx }];
                    let bv = db[if bsc { 0 } else { idx }];
                    if self.req(a) {
                        self.add_grad(a, asc, idx, gv / bv);
                    }
                    if self.req(b) {
                        self.add_grad(b, bsc, idx, -gv * av / (bv * bv));
                    }
                }
            }
            Op::AddRowVec(x, b) => {
                let (r, c) = rows_cols(&self.nodes[x.0].shape);
                if self.req(x) {
                    for idx in 0..r * c {
                        self.grads[x.0][idx] += g[idx];
                    }
                }
                if self.req(b) {
                    for i2 in 0..r {
                        for j in 0..c {
                            self.grads[b.0][j] += g[i2 * c + j];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.req(a) {
                    for (idx, &gv) in g.iter().enumerate() {
                        self.grads[a.0][idx] += gv * c;
                    }
                }
            }
            Op::Relu(a) => {
                if self.req(a) {
                    let da = self.nodes[a.0].data.clone();
                    for (idx, &gv) in g.iter().enumerate() {
                        if da[idx] > 0.0 {
                            self.grads[a.0][idx] += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.req(a) {
                    let y = node.data;
                    for (idx, &gv) in g.iter().enumerate() {
                        self.grads[a.0][idx] += gv * y[idx] * (1.0 - y[idx]);
                    }
                }
            }
            Op::Sqrt(a) => {
                if self.req(a) {
                    let y = node.data;
                    for (idx, &gv) in g.iter().enumerate() {
                        self.grads[a.0][idx] += gv * 0.5 / y[idx];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].shape.clone();
                let sb = self.nodes[b.0].shape.clone();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let da = self.nodes[a.0].data.clone();
                let db = self.nodes[b.0].data.clone();
                if self.req(a) {
                    // dA = G * B^T
                    for i2 in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i2 * n + j] * db[p * n + j];
                            }
                            self.grads[a.0][i2 * k + p] += acc;
                        }
                    }
                }
                if self.req(b) {
                    // dB = A^T * G
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i2 in 0..m {
                                acc += da[i2 * k + p] * g[i2 * n + j];
                            }
                            self.grads[b.0][p * n + j] += acc;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if self.req(a) {
                    let sa = self.nodes[a.0].shape.clone();
                    let (r, c) = (sa[0], sa[1]);
                    for i2 in 0..r {
                        for j in 0..c {
                            self.grads[a.0][i2 * c + j] += g[j * r + i2];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.req(a) {
                    for (idx, &gv) in g.iter().enumerate() {
                        self.grads[a.0][idx] += gv;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.req(x) {
                    let shape = node.shape.clone();
                    let (slices, len, stride) =
                        Self::axis_slices(&shape, axis, "softmax").unwrap();
                    let y = node.data;
                    for s in 0..slices {
                        let base = Self::slice_start(&shape, axis, s);
                        let mut dot = 0.0;
                        for i2 in 0..len {
                            let p = base + i2 * stride;
                            dot += g[p] * y[p];
                        }
                        for i2 in 0..len {
                            let p = base + i2 * stride;
                            self.grads[x.0][p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            }
            Op::MaxReduce { x, argmax, .. } => {
                if self.req(x) {
                    for (s, &pos) in argmax.iter().enumerate() {
                        self.grads[x.0][pos] += g[s];
                    }
                }
            }
            Op::SumAll(x) => {
                if self.req(x) {
                    let gv = g[0];
                    for v in self.grads[x.0].iter_mut() {
                        *v += gv;
                    }
                }
            }
            Op::MeanAxis0(x) => {
                if self.req(x) {
                    let (r, c) = rows_cols(&self.nodes[x.0].shape);
                    for i2 in 0..r {
                        for j in 0..c {
                            self.grads[x.0][i2 * c + j] += g[j] / r as f64;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].data.len();
                    if self.req(p) {
                        for idx in 0..n {
                            self.grads[p.0][idx] += g[offset + idx];
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start, end } => {
                if self.req(x) {
                    let (r, c) = rows_cols(&self.nodes[x.0].shape);
                    let w = end - start;
                    for i2 in 0..r {
                        for j in 0..w {
                            self.grads[x.0][i2 * c + start + j] += g[i2 * w + j];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                istd,
            } => {
                let (r, c) = rows_cols(&self.nodes[x.0].shape);
                let xd = self.nodes[x.0].data.clone();
                let gd = gamma.map(|gv| self.nodes[gv.0].data.clone());
                for i2 in 0..r {
                    let m = mean[i2];
                    let is = istd[i2];
                    // dxhat and the two row means needed for dx.
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let mut dxhat = vec![0.0; c];
                    for j in 0..c {
                        let xhat = (xd[i2 * c + j] - m) * is;
                        let mut dh = g[i2 * c + j];
                        if let Some(gdv) = &gd {
                            dh *= gdv[j];
                        }
                        dxhat[j] = dh;
                        sum_dxhat += dh;
                        sum_dxhat_xhat += dh * xhat;
                        if let Some(gvar) = gamma {
                            if self.req(gvar) {
                                self.grads[gvar.0][j] += g[i2 * c + j] * xhat;
                            }
                        }
                        if let Some(bvar) = beta {
                            if self.req(bvar) {
                                self.grads[bvar.0][j] += g[i2 * c + j];
                            }
                        }
                    }
                    if self.req(x) {
                        for j in 0..c {
                            let xhat = (xd[i2 * c + j] - m) * is;
                            let dx = is
                                * (dxhat[j]
                                    - sum_dxhat / c as f64
                                    - xhat * sum_dxhat_xhat / c as f64);
                            self.grads[x.0][i2 * c + j] += dx;
                        }
                    }
                }
            }
            Op::RowScaleShift { x, gamma, beta } => {
                let (r, c) = rows_cols(&self.nodes[x.0].shape);
                let xd = self.nodes[x.0].data.clone();
                let gd = self.nodes[gamma.0].data.clone();
                for i2 in 0..r {
                    for j in 0..c {
                        let gv = g[i2 * c + j];
                        if self.req(x) {
                            self.grads[x.0][i2 * c + j] += gv * gd[i2];
                        }
                        if self.req(gamma) {
                            self.grads[gamma.0][i2] += gv * xd[i2 * c + j];
                        }
                        if self.req(beta) {
                            self.grads[beta.0][i2] += gv;
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                training,
                mean,
                istd,
            } => {
                let (b, c) = rows_cols(&self.nodes[x.0].shape);
                let xd = self.nodes[x.0].data.clone();
                let gd = self.nodes[gamma.0].data.clone();
                for j in 0..c {
                    let m = mean[j];
                    let is = istd[j];
                    let mut sum_g = 0.0;
                    let mut sum_g_xhat = 0.0;
                    for i2 in 0..b {
                        let gv = g[i2 * c + j];
                        let xhat = (xd[i2 * c + j] - m) * is;
                        sum_g += gv;
                        sum_g_xhat += gv * xhat;
                        if self.req(gamma) {
                            self.grads[gamma.0][j] += gv * xhat;
                        }
                        if self.req(beta) {
                            self.grads[beta.0][j] += gv;
                        }
                    }
                    if self.req(x) {
                        for i2 in 0..b {
                            let gv = g[i2 * c + j];
                            let xhat = (xd[i2 * c + j] - m) * is;
                            let dx = if training {
                                gd[j] * is / b as f64
                                    * (b as f64 * gv - sum_g - xhat * sum_g_xhat)
                            } else {
                                gv * gd[j] * is
                            };
                            self.grads[x.0][i2 * c + j] += dx;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let sx = self.nodes[x.0].shape.clone();
                let sw = self.nodes[w.0].shape.clone();
                let (cin, h, wd) = (sx[0], sx[1], sx[2]);
                let (cout, k) = (sw[0], sw[2]);
                let so = node.shape;
                let (oh, ow) = (so[1], so[2]);
                let xd = self.nodes[x.0].data.clone();
                let wdat = self.nodes[w.0].data.clone();
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(co * oh + oy) * ow + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            if self.req(b) {
                                self.grads[b.0][co] += gv;
                            }
                            for ci in 0..cin {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy >= 0
                                            && iy < h as isize
                                            && ix >= 0
                                            && ix < wd as isize
                                        {
                                            let xi = ci * h * wd
                                                + iy as usize * wd
                                                + ix as usize;
                                            let wi = ((co * cin + ci) * k + ky) * k + kx;
                                            if self.req(w) {
                                                self.grads[w.0][wi] += gv * xd[xi];
                                            }
                                            if self.req(x) {
                                                self.grads[x.0][xi] += gv * wdat[wi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::BceWithLogits { x, labels } => {
                if self.req(x) {
                    let xd = self.nodes[x.0].data.clone();
                    for (idx, &gv) in g.iter().enumerate() {
                        self.grads[x.0][idx] += gv * (sigmoid(xd[idx]) - labels[idx]);
                    }
                }
            }
        }
    }

    /// Route gradients of bound parameters back into the store (accumulating).
    pub fn apply_param_grads(&self, store: &mut ParamStore) {
        for &(node, id) in &self.bindings {
            store.accumulate_grad(id, &self.grads[node]);
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddRowVec(..) => "add_row_vec",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Sqrt(..) => "sqrt",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Softmax { .. } => "softmax",
        Op::MaxReduce { .. } => "max_reduce",
        Op::SumAll(..) => "sum_all",
        Op::MeanAxis0(..) => "mean_rows",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::LayerNorm { .. } => "layer_norm",
        Op::RowScaleShift { .. } => "row_scale_shift",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Conv2d { .. } => "conv2d",
        Op::BceWithLogits { .. } => "bce_with_logits",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_permutation() {
        let mut tape = Tape::new(Precision::F64);
        let i2 = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(&t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
        let out = tape.matmul(i2, p).unwrap();
        assert_eq!(tape.value(out), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::uniform_fan_in(vec![3, 4], 1, &mut rng);
        let b = Tensor::uniform_fan_in(vec![4, 2], 1, &mut rng);
        let mut oracle = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    oracle[i * 2 + j] += a.data[i * 4 + k] * b.data[k * 2 + j];
                }
            }
        }
        let mut tape = Tape::new(Precision::F64);
        let va = tape.constant(&a);
        let vb = tape.constant(&b);
        let out = tape.matmul(va, vb).unwrap();
        for (x, y) in tape.value(out).iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new(Precision::F64);
        let a = tape.constant(&Tensor::zeros(vec![2, 3]));
        let b = tape.constant(&Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(&t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        let x = tape.constant(&t(&[2], &[1000.0, 1000.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        // Direct e^x / sum e^x evaluation.
        let x = tape.constant(&t(&[2], &[0.707, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y)[0] - 0.6698).abs() < 1e-4);
        assert!((tape.value(y)[1] - 0.3302).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform_fan_in(vec![5, 7], 1, &mut rng);
        let mut tape = Tape::new(Precision::F64);
        let vx = tape.constant(&x);
        let y = tape.softmax(vx, 1).unwrap();
        for i in 0..5 {
            let s: f64 = tape.value(y)[i * 7..(i + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn max_reduce_values_and_ties() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(&t(&[2, 2], &[1.0, 3.0, 2.0, 0.0]));
        let (vals, idx) = tape.max_reduce(x, 1).unwrap();
        assert_eq!(tape.value(vals), &[3.0, 2.0]);
        assert_eq!(idx, vec![1, 0]);

        let x = tape.constant(&t(&[3], &[5.0, 5.0, 5.0]));
        let (vals, idx) = tape.max_reduce(x, 0).unwrap();
        assert_eq!(tape.value(vals), &[5.0]);
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn max_reduce_matches_linear_scan_both_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform_fan_in(vec![6, 6], 1, &mut rng);
        for axis in [0usize, 1] {
            let mut tape = Tape::new(Precision::F64);
            let vx = tape.constant(&x);
            let (vals, idx) = tape.max_reduce(vx, axis).unwrap();
            for s in 0..6 {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for i in 0..6 {
                    let v = if axis == 1 {
                        x.data[s * 6 + i]
                    } else {
                        x.data[i * 6 + s]
                    };
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                assert_eq!(tape.value(vals)[s], best);
                assert_eq!(idx[s], best_i);
            }
        }
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new(Precision::F64);
        let z = tape.constant(&t(&[1], &[0.0]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.item(s), 0.5);

        let x = tape.constant(&t(&[2], &[-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r), &[0.0, 2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::uniform_fan_in(vec![3, 3], 1, &mut rng);
        let b = Tensor::uniform_fan_in(vec![3, 3], 1, &mut rng);
        let va = tape.constant(&a);
        let vb = tape.constant(&b);
        let m = tape.mul(va, vb).unwrap();
        for i in 0..9 {
            assert_eq!(tape.value(m)[i], a.data[i] * b.data[i]);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(&t(&[1, 3], &[4.0, 4.0, 4.0]));
        let y = tape.layer_norm(x, None, None).unwrap();
        for v in tape.value(y) {
            assert!(v.abs() < 1e-9);
        }

        // Hand computation: (x - mu) / sqrt(var + eps) for [1, 3].
        let x = tape.constant(&t(&[1, 2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, None, None).unwrap();
        assert!((tape.value(y)[0] + 1.0).abs() < 1e-4);
        assert!((tape.value(y)[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn batch_norm_eval_identity_and_train_normalization() {
        let mut store = ParamStore::new();
        let gamma = store.add("bn.gamma", Tensor::from_vec(vec![1], vec![1.0]).unwrap()).unwrap();
        let beta = store.add("bn.beta", Tensor::zeros(vec![1])).unwrap();
        let rm = store.add_buffer("bn.running_mean", Tensor::zeros(vec![1])).unwrap();
        let rv = store.add_buffer("bn.running_var", Tensor::from_vec(vec![1], vec![1.0]).unwrap()).unwrap();

        // Eval with default stats is (nearly) the identity map.
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(&t(&[2, 1], &[0.3, -0.7]));
        let g = tape.param(&store, gamma);
        let b = tape.param(&store, beta);
        let y = tape
            .batch_norm(x, g, b, &mut store, rm, rv, false, 0.1)
            .unwrap();
        assert!((tape.value(y)[0] - 0.3).abs() < 1e-5);
        assert!((tape.value(y)[1] + 0.7).abs() < 1e-5);

        // Training: column [1, 3] normalizes to [-1, 1] up to eps.
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(&t(&[2, 1], &[1.0, 3.0]));
        let g = tape.param(&store, gamma);
        let b = tape.param(&store, beta);
        let y = tape
            .batch_norm(x, g, b, &mut store, rm, rv, true, 0.1)
            .unwrap();
        assert!((tape.value(y)[0] + 1.0).abs() < 1e-4);
        assert!((tape.value(y)[1] - 1.0).abs() < 1e-4);
        // Momentum update: running_mean = 0.9 * 0 + 0.1 * 2.
        assert!((store.get(rm).value.data[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_rejects_small_training_batch() {
        let mut store = ParamStore::new();
        let gamma = store.add("g", Tensor::from_vec(vec![1], vec![1.0]).unwrap()).unwrap();
        let beta = store.add("b", Tensor::zeros(vec![1])).unwrap();
        let rm = store.add_buffer("rm", Tensor::zeros(vec![1])).unwrap();
        let rv = store.add_buffer("rv", Tensor::from_vec(vec![1], vec![1.0]).unwrap()).unwrap();
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(&t(&[1, 1], &[1.0]));
        let g = tape.param(&store, gamma);
        let b = tape.param(&store, beta);
        let err = tape
            .batch_norm(x, g, b, &mut store, rm, rv, true, 0.1)
            .unwrap_err();
        assert!(matches!(err, Error::BatchTooSmall(1)));
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(&t(&[1], &[0.0]));
        let l = tape.bce_with_logits(x, &[1.0]).unwrap();
        assert!((tape.item(l) - std::f64::consts::LN_2).abs() < 1e-4);

        let x = tape.constant(&t(&[1], &[20.0]));
        let l = tape.bce_with_logits(x, &[1.0]).unwrap();
        assert!(tape.item(l) < 1e-8);

        let x = tape.constant(&t(&[1], &[-3.0]));
        let l = tape.bce_with_logits(x, &[0.0]).unwrap();
        assert!((tape.item(l) - softplus(-3.0)).abs() < 1e-12);
        assert!((tape.item(l) - 0.0486).abs() < 1e-4);
    }

    #[test]
    fn conv2d_identity_and_averaging() {
        let mut tape = Tape::new(Precision::F64);
        // 1x1 kernel of value 1 is the identity per channel.
        let x = tape.constant(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(&t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(&Tensor::zeros(vec![1]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0]);

        // 3x3 averaging kernel keeps a constant image constant (interior).
        let x = tape.constant(&Tensor::full(vec![1, 4, 4], 2.0));
        let w = tape.constant(&Tensor::full(vec![1, 1, 3, 3], 1.0 / 9.0));
        let b = tape.constant(&Tensor::zeros(vec![1]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        // Interior positions (1,1), (1,2), (2,1), (2,2).
        for (oy, ox) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            assert!((tape.value(y)[oy * 4 + ox] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_matches_quadruple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::uniform_fan_in(vec![2, 5, 4], 1, &mut rng);
        let w = Tensor::uniform_fan_in(vec![3, 2, 3, 3], 1, &mut rng);
        let b = Tensor::uniform_fan_in(vec![3], 1, &mut rng);
        let stride = 2;
        let (h, wd, k, pad) = (5usize, 4usize, 3usize, 1usize);
        let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1);
        let mut oracle = vec![0.0; 3 * oh * ow];
        for co in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data[co];
                    for ci in 0..2 {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += x.data[ci * h * wd + iy as usize * wd + ix as usize]
                                        * w.data[((co * 2 + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    oracle[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let mut tape = Tape::new(Precision::F64);
        let vx = tape.constant(&x);
        let vw = tape.constant(&w);
        let vb = tape.constant(&b);
        let y = tape.conv2d(vx, vw, vb, stride).unwrap();
        for (a, b2) in tape.value(y).iter().zip(&oracle) {
            assert!((a - b2).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(&t(&[1], &[2.0])).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::BackwardTwice)));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(&t(&[1], &[3.0])).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn f32_precision_rounds_values() {
        let mut tape = Tape::new(Precision::F32);
        let x = tape.constant(&t(&[1], &[0.1]));
        assert_eq!(tape.value(x)[0], 0.1f32 as f64);
    }
}
