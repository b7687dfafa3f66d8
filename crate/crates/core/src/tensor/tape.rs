use super::gemm::{gemm, MatRef};
use super::{NumericError, Result, Tensor};
use crate::model::scan::{self, ScanDims};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        broadcast_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Exp(Var),
    Silu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Narrow {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        stride: usize,
    },
    Conv1dTransposed {
        x: Var,
        kernel: Var,
        stride: usize,
    },
    CausalDepthwiseConv {
        x: Var,
        kernel: Var,
    },
    SelectiveScan {
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        states: Vec<f64>,
    },
    Sum(Var),
    WeightedNll {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations supporting reverse traversal.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// reverse topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }

    /// Number of nodes whose backward rule was applied.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericError {
    NumericError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v + (-v).exp()
    } else {
        v.exp().ln_1p()
    }
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

    fn push(
        &mut self,
        value: Tensor,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Matrix product over the last two dimensions.
    ///
    /// `a` is `[.., M, K]`; `b` is either `[K, P]` (shared across the batch)
    /// or `[.., K, P]` with the same leading dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two dimensions (`b` is `[.., P, K]`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, p) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let broadcast_b = sb.len() == 2;
        if k != kb || (!broadcast_b && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * p];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for bi in 0..batch {
                let am = MatRef::new(ad, bi * m * k, m, k);
                let boff = if broadcast_b { 0 } else { bi * k * p };
                let bm = if trans_b {
                    MatRef::new(bd, boff, p, k).t()
                } else {
                    MatRef::new(bd, boff, k, p)
                };
                gemm(am, bm, &mut out, bi * m * p, p, false);
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, p]);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor { shape, data: out },
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                broadcast_b,
            },
            rg,
            "matmul",
        )
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor {
            shape: va.shape().to_vec(),
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg, "mul")
    }

    /// Adds a vector with `last_dim` entries to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = vx.last_dim();
        if vb.numel() != d {
            return Err(shape_err("add_bias", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            add_into(row, vb.data());
        }
        let t = Tensor {
            shape: vx.shape().to_vec(),
            data,
        };
        let rg = self.rg(x) || self.rg(bias);
        self.push(t, Op::AddBias { x, bias }, rg, "add_bias")
    }

    fn unary(&mut self, x: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let vx = self.value(x);
        let t = Tensor {
            shape: vx.shape().to_vec(),
            data: vx.data().iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(x);
        self.push(t, op, rg, name)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary(x, Op::Scale { x, factor }, "scale", |v| v * factor)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), "exp", f64::exp)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Silu(x), "silu", |v| v * sigmoid(v))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Softplus(x), "softplus", softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.ndim() {
            return Err(NumericError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {:?}", vx.shape()),
            });
        }
        let (outer, n, inner) = axis_layout(vx.shape(), axis);
        let src = vx.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n)
                    .map(|j| src[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    data[idx(j)] /= z;
                }
            }
        }
        let t = Tensor {
            shape: vx.shape().to_vec(),
            data,
        };
        let rg = self.rg(x);
        self.push(t, Op::Softmax { x, axis }, rg, "softmax")
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let d = vx.last_dim();
        if vg.numel() != d || vb.numel() != d {
            return Err(shape_err("layernorm", vx.shape(), vg.shape()));
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let t = Tensor {
            shape: vx.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
            "layernorm",
        )
    }

    /// Row lookup: `table` is `[V, D]`, output `[indices.len(), D]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.ndim() != 2 || indices.is_empty() {
            return Err(shape_err("gather", vt.shape(), &[indices.len()]));
        }
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(NumericError::Invalid {
                op: "gather",
                msg: format!("index {bad} out of range for table of {v} rows"),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor {
            shape: vec![indices.len(), d],
            data,
        };
        let rg = self.rg(table);
        self.push(
            t,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
            "gather",
        )
    }

    /// Slice `[start, start+len)` of the last dimension.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if len == 0 || start + len > d {
            return Err(NumericError::Invalid {
                op: "narrow",
                msg: format!("range {start}..{} outside last dimension {d}", start + len),
            });
        }
        let mut data = Vec::with_capacity(vx.rows() * len);
        for row in vx.data().chunks(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        self.push(
            Tensor { shape, data },
            Op::Narrow { x, start },
            rg,
            "narrow",
        )
    }

    /// Concatenation along the last dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(NumericError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?);
        let lead = first.shape()[..first.ndim() - 1].to_vec();
        let rows = first.rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat", first.shape(), s));
            }
            total += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let vp = self.value(p);
                let d = vp.last_dim();
                data.extend_from_slice(&vp.data()[r * d..(r + 1) * d]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor { shape, data },
            Op::Concat(parts.to_vec()),
            rg,
            "concat",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if shape.iter().product::<usize>() != vx.numel() {
            return Err(shape_err("reshape", vx.shape(), shape));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: vx.data().to_vec(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg, "reshape")
    }

    /// Rows `[start, start+len)` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 2 || len == 0 || start + len > vx.shape()[0] {
            return Err(NumericError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{} of shape {:?}", start + len, vx.shape()),
            });
        }
        let c = vx.shape()[1];
        let t = Tensor {
            shape: vec![len, c],
            data: vx.data()[start * c..(start + len) * c].to_vec(),
        };
        let rg = self.rg(x);
        self.push(t, Op::SliceRows { x, start }, rg, "slice_rows")
    }

    fn conv_dims(
        &self,
        x: Var,
        kernel: Var,
        name: &'static str,
    ) -> Result<(usize, usize, usize, usize, usize)> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() < 2 || sk.len() != 3 {
            return Err(shape_err(name, sx, sk));
        }
        let batch = sx[..sx.len() - 2].iter().product();
        Ok((batch, sx[sx.len() - 2], sk[0], sk[1], sk[2]))
    }

    /// Valid (unpadded) strided convolution along the sequence axis.
    ///
    /// `x` is `[.., L, D_in]`, `kernel` is `[k, D_in, D_out]`; the output has
    /// `floor((L - k) / stride) + 1` positions.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (batch, len, k, d_in, d_out) = self.conv_dims(x, kernel, "conv1d")?;
        if self.value(x).last_dim() != d_in {
            return Err(shape_err("conv1d", self.shape(x), self.shape(kernel)));
        }
        if k == 0 || stride == 0 {
            return Err(NumericError::Invalid {
                op: "conv1d",
                msg: "kernel and stride must be positive".into(),
            });
        }
        if len < k {
            return Err(NumericError::InputTooShort {
                op: "conv1d",
                len,
                kernel: k,
            });
        }
        let out_len = (len - k) / stride + 1;
        let mut out = vec![0.0; batch * out_len * d_out];
        {
            let xd = self.value(x).data();
            let kd = self.value(kernel).data();
            for bi in 0..batch {
                for i in 0..k {
                    let xs = MatRef::new(xd, bi * len * d_in + i * d_in, out_len, d_in)
                        .with_row_stride(stride * d_in);
                    let w = MatRef::new(kd, i * d_in * d_out, d_in, d_out);
                    gemm(xs, w, &mut out, bi * out_len * d_out, d_out, i > 0);
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        let n = shape.len();
        shape[n - 2] = out_len;
        shape[n - 1] = d_out;
        let rg = self.rg(x) || self.rg(kernel);
        self.push(
            Tensor { shape, data: out },
            Op::Conv1d { x, kernel, stride },
            rg,
            "conv1d",
        )
    }

    /// Adjoint of [`Tape::conv1d`] for the same kernel layout.
    ///
    /// `x` is `[.., L_c, D_out]`, output `[.., target_len, D_in]`. Positions
    /// past the last window receive zeros.
    pub fn conv1d_transposed(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        target_len: usize,
    ) -> Result<Var> {
        let (batch, len_c, k, d_in, d_out) = self.conv_dims(x, kernel, "conv1d_transposed")?;
        if self.value(x).last_dim() != d_out {
            return Err(shape_err(
                "conv1d_transposed",
                self.shape(x),
                self.shape(kernel),
            ));
        }
        if k == 0 || stride == 0 {
            return Err(NumericError::Invalid {
                op: "conv1d_transposed",
                msg: "kernel and stride must be positive".into(),
            });
        }
        let min_len = (len_c - 1) * stride + k;
        if target_len < min_len || target_len > min_len + stride - 1 {
            return Err(NumericError::ReconstructionLength {
                target: target_len,
                len: len_c,
                kernel: k,
                stride,
            });
        }
        let mut out = vec![0.0; batch * target_len * d_in];
        {
            let xd = self.value(x).data();
            let kd = self.value(kernel).data();
            for bi in 0..batch {
                let xm = MatRef::new(xd, bi * len_c * d_out, len_c, d_out);
                for i in 0..k {
                    let wt = MatRef::new(kd, i * d_in * d_out, d_in, d_out).t();
                    gemm(
                        xm,
                        wt,
                        &mut out,
                        bi * target_len * d_in + i * d_in,
                        stride * d_in,
                        true,
                    );
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        let n = shape.len();
        shape[n - 2] = target_len;
        shape[n - 1] = d_in;
        let rg = self.rg(x) || self.rg(kernel);
        self.push(
            Tensor { shape, data: out },
            Op::Conv1dTransposed { x, kernel, stride },
            rg,
            "conv1d_transposed",
        )
    }

    /// Per-channel causal convolution with `k - 1` zeros of left padding.
    /// `x` is `[.., L, C]`, `kernel` is `[k, C]`; output length equals `L`.
    pub fn causal_depthwise_conv(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (vx, vk) = (self.value(x), self.value(kernel));
        if vx.ndim() < 2 || vk.ndim() != 2 || vk.shape()[1] != vx.last_dim() {
            return Err(shape_err("causal_depthwise_conv", vx.shape(), vk.shape()));
        }
        let c = vx.last_dim();
        let len = vx.shape()[vx.ndim() - 2];
        let batch = vx.numel() / (len * c);
        let k = vk.shape()[0];
        let (xd, kd) = (vx.data(), vk.data());
        let mut out = vec![0.0; vx.numel()];
        for bi in 0..batch {
            let base = bi * len * c;
            for t in 0..len {
                let o = &mut out[base + t * c..base + (t + 1) * c];
                for i in 0..k {
                    let src = t as isize - (k - 1 - i) as isize;
                    if src < 0 {
                        continue;
                    }
                    let xr = &xd[base + src as usize * c..base + (src as usize + 1) * c];
                    let kr = &kd[i * c..(i + 1) * c];
                    for ((ov, xv), kv) in o.iter_mut().zip(xr).zip(kr) {
                        *ov += xv * kv;
                    }
                }
            }
        }
        let t = Tensor {
            shape: vx.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(x) || self.rg(kernel);
        self.push(
            t,
            Op::CausalDepthwiseConv { x, kernel },
            rg,
            "causal_depthwise_conv",
        )
    }

    /// Input-dependent diagonal state-space recurrence (see [`crate::model::scan`]).
    ///
    /// Shapes: `x`, `delta` are `[L, E]`; `a` is `[E, N]` (strictly negative);
    /// `b`, `c` are `[L, N]`. Output `[L, E]`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sa = self.shape(a).to_vec();
        if sx.len() != 2 || sa.len() != 2 || sa[0] != sx[1] {
            return Err(shape_err("selective_scan", &sx, &sa));
        }
        let dims = ScanDims {
            len: sx[0],
            channels: sx[1],
            state: sa[1],
        };
        for (v, want) in [
            (delta, [dims.len, dims.channels]),
            (b, [dims.len, dims.state]),
            (c, [dims.len, dims.state]),
        ] {
            if self.shape(v) != want {
                return Err(shape_err("selective_scan", &sx, self.shape(v)));
            }
        }
        if let Some(i) = self.value(a).data().iter().position(|&v| v >= 0.0) {
            return Err(NumericError::Invalid {
                op: "selective_scan",
                msg: format!("state matrix entry {i} is not strictly negative"),
            });
        }
        let (y, states) = scan::scan_chunked(
            dims,
            self.value(x).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            scan::DEFAULT_CHUNK,
        );
        if let Some(pos) = states.iter().position(|v| !v.is_finite()) {
            return Err(NumericError::NonFinite {
                op: "selective_scan",
                index: pos / (dims.channels * dims.state),
            });
        }
        let rg = [x, delta, a, b, c].iter().any(|&v| self.rg(v));
        self.push(
            Tensor { shape: sx, data: y },
            Op::SelectiveScan {
                x,
                delta,
                a,
                b,
                c,
                states,
            },
            rg,
            "selective_scan",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[target_i])` over the rows of `logits`.
    /// Rows with zero weight are skipped entirely.
    pub fn weighted_nll(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, classes) = (vl.rows(), vl.last_dim());
        if targets.len() != rows || weights.len() != rows {
            return Err(shape_err(
                "weighted_nll",
                vl.shape(),
                &[targets.len(), weights.len()],
            ));
        }
        let mut probs = vec![0.0; rows * classes];
        let mut total = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            if targets[r] >= classes {
                return Err(NumericError::Invalid {
                    op: "weighted_nll",
                    msg: format!("target {} at row {r} outside {classes} classes", targets[r]),
                });
            }
            let row = &vl.data()[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - log_z).exp();
            }
            let term = weights[r] * (log_z - row[targets[r]]);
            if !term.is_finite() {
                return Err(NumericError::NonFinite {
                    op: "weighted_nll",
                    index: r,
                });
            }
            total += term;
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total),
            Op::WeightedNll {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
            "weighted_nll",
        )
    }

    /// Reverse pass from a single-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        if self.value(output).numel() != 1 {
            return Err(NumericError::Invalid {
                op: "backward",
                msg: format!("output must be scalar, got shape {:?}", self.shape(output)),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            self.apply_rule(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut out = Vec::with_capacity(n);
        for (i, g) in grads.into_iter().enumerate() {
            match g {
                Some(data) => {
                    let t = Tensor {
                        shape: self.nodes[i].value.shape().to_vec(),
                        data,
                    };
                    t.check_finite("backward")?;
                    out.push(Some(t));
                }
                None => out.push(None),
            }
        }
        Ok(Gradients {
            grads: out,
            visited,
        })
    }

    fn accum<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.numel()]);
        }
        slot.as_mut()
    }

    fn apply_rule(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                broadcast_b,
            } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let sa = va.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let p = out.last_dim();
                if let Some(ga) = self.accum(grads, *a) {
                    for bi in 0..*batch {
                        let gm = MatRef::new(g, bi * m * p, m, p);
                        let boff = if *broadcast_b { 0 } else { bi * k * p };
                        // da = g · op(b)ᵀ
                        let bt = if *trans_b {
                            MatRef::new(vb.data(), boff, p, k)
                        } else {
                            MatRef::new(vb.data(), boff, k, p).t()
                        };
                        gemm(gm, bt, ga, bi * m * k, k, true);
                    }
                }
                if let Some(gb) = self.accum(grads, *b) {
                    for bi in 0..*batch {
                        let gm = MatRef::new(g, bi * m * p, m, p);
                        let am = MatRef::new(va.data(), bi * m * k, m, k);
                        let boff = if *broadcast_b { 0 } else { bi * k * p };
                        if *trans_b {
                            // b is [p, k]: db = gᵀ · a
                            gemm(gm.t(), am, gb, boff, k, true);
                        } else {
                            gemm(am.t(), gm, gb, boff, p, true);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.accum(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.accum(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.accum(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.accum(grads, *b) {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.accum(grads, *a) {
                    for ((d, gv), bv) in ga.iter_mut().zip(g).zip(vb) {
                        *d += gv * bv;
                    }
                }
                if let Some(gb) = self.accum(grads, *b) {
                    for ((d, gv), av) in gb.iter_mut().zip(g).zip(va) {
                        *d += gv * av;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = self.accum(grads, *x) {
                    add_into(gx, g);
                }
                let d = out.last_dim();
                if let Some(gb) = self.accum(grads, *bias) {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.accum(grads, *x) {
                    for (d, gv) in gx.iter_mut().zip(g) {
                        *d += gv * factor;
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.accum(grads, *x) {
                    for ((d, gv), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += gv * y;
                    }
                }
            }
            Op::Silu(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.accum(grads, *x) {
                    for ((d, gv), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        let s = sigmoid(xv);
                        *d += gv * s * (1.0 + xv * (1.0 - s));
                    }
                }
            }
            Op::Softplus(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.accum(grads, *x) {
                    for ((d, gv), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        *d += gv * sigmoid(xv);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.accum(grads, *x) {
                    for ((d, gv), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_layout(out.shape(), *axis);
                let y = out.data();
                if let Some(gx) = self.accum(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.last_dim();
                let gd = self.value(*gain).data();
                if let Some(gg) = self.accum(grads, *gain) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.accum(grads, *bias) {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = self.accum(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = gr[j] * gd[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += inv_std[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Gather { table, indices } => {
                let d = out.last_dim();
                if let Some(gt) = self.accum(grads, *table) {
                    for (row, &i) in g.chunks(d).zip(indices) {
                        add_into(&mut gt[i * d..(i + 1) * d], row);
                    }
                }
            }
            Op::Narrow { x, start } => {
                let len = out.last_dim();
                let d = self.value(*x).last_dim();
                if let Some(gx) = self.accum(grads, *x) {
                    for (r, row) in g.chunks(len).enumerate() {
                        add_into(&mut gx[r * d + start..r * d + start + len], row);
                    }
                }
            }
            Op::Concat(parts) => {
                let total = out.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let d = self.value(p).last_dim();
                    if let Some(gp) = self.accum(grads, p) {
                        for (r, row) in g.chunks(total).enumerate() {
                            add_into(&mut gp[r * d..(r + 1) * d], &row[offset..offset + d]);
                        }
                    }
                    offset += d;
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.accum(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.last_dim();
                if let Some(gx) = self.accum(grads, *x) {
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            Op::Conv1d { x, kernel, stride } => {
                let vx = self.value(*x);
                let sk = self.value(*kernel).shape();
                let (k, d_in, d_out) = (sk[0], sk[1], sk[2]);
                let len = vx.shape()[vx.ndim() - 2];
                let out_len = out.shape()[out.ndim() - 2];
                let batch = vx.numel() / (len * d_in);
                let kd = self.value(*kernel).data();
                if let Some(gx) = self.accum(grads, *x) {
                    for bi in 0..batch {
                        let gm = MatRef::new(g, bi * out_len * d_out, out_len, d_out);
                        for i in 0..k {
                            let wt = MatRef::new(kd, i * d_in * d_out, d_in, d_out).t();
                            gemm(gm, wt, gx, bi * len * d_in + i * d_in, stride * d_in, true);
                        }
                    }
                }
                if let Some(gk) = self.accum(grads, *kernel) {
                    for bi in 0..batch {
                        let gm = MatRef::new(g, bi * out_len * d_out, out_len, d_out);
                        for i in 0..k {
                            let xs =
                                MatRef::new(vx.data(), bi * len * d_in + i * d_in, out_len, d_in)
                                    .with_row_stride(stride * d_in);
                            gemm(xs.t(), gm, gk, i * d_in * d_out, d_out, true);
                        }
                    }
                }
            }
            Op::Conv1dTransposed { x, kernel, stride } => {
                let vx = self.value(*x);
                let sk = self.value(*kernel).shape();
                let (k, d_in, d_out) = (sk[0], sk[1], sk[2]);
                let len_c = vx.shape()[vx.ndim() - 2];
                let target = out.shape()[out.ndim() - 2];
                let batch = vx.numel() / (len_c * d_out);
                let kd = self.value(*kernel).data();
                if let Some(gx) = self.accum(grads, *x) {
                    for bi in 0..batch {
                        for i in 0..k {
                            let gs = MatRef::new(g, bi * target * d_in + i * d_in, len_c, d_in)
                                .with_row_stride(stride * d_in);
                            let w = MatRef::new(kd, i * d_in * d_out, d_in, d_out);
                            gemm(gs, w, gx, bi * len_c * d_out, d_out, true);
                        }
                    }
                }
                if let Some(gk) = self.accum(grads, *kernel) {
                    for bi in 0..batch {
                        let xm = MatRef::new(vx.data(), bi * len_c * d_out, len_c, d_out);
                        for i in 0..k {
                            let gs = MatRef::new(g, bi * target * d_in + i * d_in, len_c, d_in)
                                .with_row_stride(stride * d_in);
                            gemm(gs.t(), xm, gk, i * d_in * d_out, d_out, true);
                        }
                    }
                }
            }
            Op::CausalDepthwiseConv { x, kernel } => {
                let vx = self.value(*x);
                let vk = self.value(*kernel);
                let c = vx.last_dim();
                let len = vx.shape()[vx.ndim() - 2];
                let batch = vx.numel() / (len * c);
                let k = vk.shape()[0];
                let (xd, kd) = (vx.data(), vk.data());
                let need_x = self.nodes[x.0].requires_grad;
                let need_k = self.nodes[kernel.0].requires_grad;
                let mut gx_local = need_x.then(|| vec![0.0; vx.numel()]);
                let mut gk_local = need_k.then(|| vec![0.0; vk.numel()]);
                for bi in 0..batch {
                    let base = bi * len * c;
                    for t in 0..len {
                        let gr = &g[base + t * c..base + (t + 1) * c];
                        for i in 0..k {
                            let src = t as isize - (k - 1 - i) as isize;
                            if src < 0 {
                                continue;
                            }
                            let s = base + src as usize * c;
                            if let Some(gx) = gx_local.as_mut() {
                                for j in 0..c {
                                    gx[s + j] += gr[j] * kd[i * c + j];
                                }
                            }
                            if let Some(gk) = gk_local.as_mut() {
                                for j in 0..c {
                                    gk[i * c + j] += gr[j] * xd[s + j];
                                }
                            }
                        }
                    }
                }
                if let (Some(src), Some(dst)) = (gx_local, self.accum(grads, *x)) {
                    add_into(dst, &src);
                }
                if let (Some(src), Some(dst)) = (gk_local, self.accum(grads, *kernel)) {
                    add_into(dst, &src);
                }
            }
            Op::SelectiveScan {
                x,
                delta,
                a,
                b,
                c,
                states,
            } => {
                let sx = self.value(*x).shape();
                let dims = ScanDims {
                    len: sx[0],
                    channels: sx[1],
                    state: self.value(*a).shape()[1],
                };
                let sg = scan::scan_backward(
                    dims,
                    self.value(*x).data(),
                    self.value(*delta).data(),
                    self.value(*a).data(),
                    self.value(*b).data(),
                    self.value(*c).data(),
                    states,
                    g,
                );
                for (v, gv) in [
                    (x, sg.dx),
                    (delta, sg.ddelta),
                    (a, sg.da),
                    (b, sg.db),
                    (c, sg.dc),
                ] {
                    if let Some(dst) = self.accum(grads, *v) {
                        add_into(dst, &gv);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.accum(grads, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::WeightedNll {
                logits,
                targets,
                weights,
                probs,
            } => {
                let classes = self.value(*logits).last_dim();
                if let Some(gl) = self.accum(grads, *logits) {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let base = r * classes;
                        for j in 0..classes {
                            gl[base + j] += g[0] * w * probs[base + j];
                        }
                        gl[base + t] -= g[0] * w;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = tape.constant(t(&[2, 2], &[1.5, -2.0, 3.0, 4.25])).unwrap();
        let y = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -2.0, 3.0, 4.25]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0])).unwrap();
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
        let b = tape.constant(Tensor::zeros(&[5, 2])).unwrap();
        match tape.matmul(a, b) {
            Err(NumericError::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![3, 4]);
                assert_eq!(rhs, vec![5, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conv1d_hand_case() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let k = tape.constant(t(&[2, 1, 1], &[1.0, 1.0])).unwrap();
        let y = tape.conv1d(x, k, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 1]);
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect();
        let x = tape.constant(t(&[2, 3, 2], &data)).unwrap();
        let k = tape.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let y = tape.conv1d(x, k, 1).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
        let z = tape.conv1d_transposed(x, k, 1, 3).unwrap();
        assert_eq!(tape.value(z).data(), &data[..]);
    }

    #[test]
    fn conv1d_too_short() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 1])).unwrap();
        let k = tape.constant(Tensor::zeros(&[3, 1, 1])).unwrap();
        assert!(matches!(
            tape.conv1d(x, k, 1),
            Err(NumericError::InputTooShort {
                len: 2,
                kernel: 3,
                ..
            })
        ));
    }

    #[test]
    fn transposed_conv_restores_length() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[16, 3], 1.0)).unwrap();
        let k = tape.constant(Tensor::full(&[4, 3, 5], 0.1)).unwrap();
        let down = tape.conv1d(x, k, 4).unwrap();
        assert_eq!(tape.shape(down), &[4, 5]);
        let up = tape.conv1d_transposed(down, k, 4, 16).unwrap();
        assert_eq!(tape.shape(up), &[16, 3]);
        assert!(matches!(
            tape.conv1d_transposed(down, k, 4, 20),
            Err(NumericError::ReconstructionLength { .. })
        ));
    }

    #[test]
    fn pointwise_closed_forms() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3])).unwrap();
        let s = tape.silu(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0; 3]);
        let sp = tape.softplus(z).unwrap();
        assert!((tape.value(sp).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let sm = tape.softmax(z, 0).unwrap();
        for v in tape.value(sm).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_on_any_axis() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_fn(&[2, 3, 4], |i| {
                (i as f64 * 0.37).sin() * 5.0
            }))
            .unwrap();
        for axis in 0..3 {
            let y = tape.softmax(x, axis).unwrap();
            let (outer, n, inner) = axis_layout(&[2, 3, 4], axis);
            let d = tape.value(y).data();
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..n).map(|j| d[(o * n + j) * inner + i]).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(tape.softmax(x, 3).is_err());
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[0.5, -1.0])).unwrap();
        let a = tape.exp(x).unwrap();
        let b = tape.mul(a, x).unwrap();
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.visited(), tape.len());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[1000.0])).unwrap();
        assert!(matches!(
            tape.exp(x),
            Err(NumericError::NonFinite { op: "exp", .. })
        ));
    }
}
