use std::collections::HashMap;

use super::gemm::gemm;
use super::{split_axis, strides, Param, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance in [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Silu,
    Tanh,
    Exp,
    Ln,
    Abs,
    Sqrt,
    Square,
}

enum Op {
    Leaf,
    Binary {
        a: usize,
        b: usize,
        kind: BinKind,
        /// Per-output source offsets when broadcasting.
        map: Option<(Vec<usize>, Vec<usize>)>,
    },
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Unary {
        x: usize,
        kind: UnaryKind,
    },
    Scale {
        x: usize,
        s: f64,
    },
    AddScalar {
        x: usize,
    },
    Sum {
        x: usize,
        axis: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        rstd: Vec<f64>,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    DepthwiseConv {
        x: usize,
        w: usize,
        pad_left: usize,
    },
    Gather {
        table: usize,
        idx: Vec<usize>,
    },
    Pick {
        x: usize,
        idx: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of executed operations, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in execution order, so every operand precedes its
/// result. A tape is meant to be built for one step and dropped.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(usize, Param)>,
    param_index: HashMap<usize, usize>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf whose gradient can be read back with [`Tape::grad`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a parameter. Binding the same parameter twice returns the same
    /// node, so shared weights accumulate a single gradient.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&id) = self.param_index.get(&p.id()) {
            return Var(id);
        }
        let v = self.push(p.value(), Op::Leaf, p.requires_grad());
        self.param_index.insert(p.id(), v.0);
        self.params.push((v.0, p.clone()));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    // ---------------------------------------------------------------- binary

    fn binary(&mut self, a: Var, b: Var, kind: BinKind, name: &'static str) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let needs = self.needs(a.0) || self.needs(b.0);
        if sa == sb {
            let va = self.value(a).data();
            let vb = self.value(b).data();
            let data = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
            let t = Tensor::new(&sa, data)?;
            return Ok(self.push(
                t,
                Op::Binary {
                    a: a.0,
                    b: b.0,
                    kind,
                    map: None,
                },
                needs,
            ));
        }
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
        let ia = broadcast_index(&sa, &out_shape);
        let ib = broadcast_index(&sb, &out_shape);
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data = ia.iter().zip(&ib).map(|(&i, &j)| f(va[i], vb[j])).collect();
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            t,
            Op::Binary {
                a: a.0,
                b: b.0,
                kind,
                map: Some((ia, ib)),
            },
            needs,
        ))
    }

    /// Elementwise sum with trailing-dimension broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Div, "div")
    }

    // ---------------------------------------------------------------- matmul

    /// Matrix product over the last two axes.
    ///
    /// `b` may be 2-D (shared across all leading axes of `a`) or carry the
    /// same leading axes as `a` (batched product).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let m = sa[sa.len() - 2];
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let shared_rhs = sb.len() == 2;
        let lead = &sa[..sa.len() - 2];
        if !shared_rhs && lead != &sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let va = self.value(a).data();
            let vb = self.value(b).data();
            if shared_rhs {
                gemm(batch * m, k, n, va, false, vb, false, &mut out, false);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &va[i * m * k..],
                        false,
                        &vb[i * k * n..],
                        false,
                        &mut out[i * m * n..],
                        false,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            needs,
        ))
    }

    /// `x·W + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let f = |v: f64| match kind {
            UnaryKind::Relu => v.max(0.0),
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Silu => v * sigmoid(v),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Ln => v.ln(),
            UnaryKind::Abs => v.abs(),
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Square => v * v,
        };
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(t.shape(), data).expect("same shape");
        let needs = self.needs(x.0);
        self.push(t, Op::Unary { x: x.0, kind }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }

    /// Swish: `x·σ(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Silu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Ln)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Abs)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Square)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * s).collect();
        let t = Tensor::new(t.shape(), data).expect("same shape");
        let needs = self.needs(x.0);
        self.push(t, Op::Scale { x: x.0, s }, needs)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v + c).collect();
        let t = Tensor::new(t.shape(), data).expect("same shape");
        let needs = self.needs(x.0);
        self.push(t, Op::AddScalar { x: x.0 }, needs)
    }

    // ------------------------------------------------------------ reductions

    /// Sum over `axis`, removing it. Reducing a rank-1 tensor gives shape `[1]`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &shape, &[axis]));
        }
        let reduced = self.value(x).sum_axis(axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let t = reduced.reshaped(&out_shape)?;
        let needs = self.needs(x.0);
        Ok(self.push(t, Op::Sum { x: x.0, axis }, needs))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", self.shape(x), &[axis]))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum_axis(flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    // --------------------------------------------------------------- softmax

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let data = softmax_along(t.data(), &shape, axis, false);
        let needs = self.needs(x.0);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Softmax { x: x.0, axis }, needs))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("log_softmax", &shape, &[axis]));
        }
        let data = softmax_along(t.data(), &shape, axis, true);
        let needs = self.needs(x.0);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::LogSoftmax { x: x.0, axis },
            needs,
        ))
    }

    /// Normalization over the last axis without affine parameters.
    /// A constant row normalizes to exact zeros.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let w = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        if w == 0 {
            return Err(Error::shape("layer_norm", &shape, &[]));
        }
        let rows = t.numel() / w;
        let mut out = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &t.data()[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            let constant = row.iter().all(|&v| v == row[0]);
            if !constant {
                for (o, v) in out[r * w..(r + 1) * w].iter_mut().zip(row) {
                    *o = (v - mean) * rs;
                }
            }
        }
        let needs = self.needs(x.0);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x: x.0, rstd }, needs))
    }

    // ----------------------------------------------------------------- shape

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x.0);
        Ok(self.push(t, Op::Reshape { x: x.0 }, needs))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if perm.len() != shape.len() || check.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let data = permute_data(self.value(x).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let needs = self.needs(x.0);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Permute {
                x: x.0,
                perm: perm.to_vec(),
            },
            needs,
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::contract("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let needs = xs.iter().any(|v| self.needs(v.0));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                xs: xs.iter().map(|v| v.0).collect(),
                axis,
            },
            needs,
        ))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, end]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let len = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let needs = self.needs(x.0);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Slice {
                x: x.0,
                axis,
                start,
            },
            needs,
        ))
    }

    // ----------------------------------------------------------- convolution

    /// Depthwise convolution along the second-to-last axis.
    ///
    /// `x` is `[..., T, N]`, `w` is `[K, C]` with `N` a multiple of `C`;
    /// column `n` uses kernel column `n % C`. Zero padding of `pad_left` and
    /// `pad_right` frames gives output length `T + pad_left + pad_right - K + 1`.
    pub fn depthwise_conv(
        &mut self,
        x: Var,
        w: Var,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() < 2 || sw.len() != 2 {
            return Err(Error::shape("depthwise_conv", &sx, &sw));
        }
        let (kk, c) = (sw[0], sw[1]);
        let t_in = sx[sx.len() - 2];
        let n = sx[sx.len() - 1];
        if kk == 0 || pad_left >= kk || pad_right >= kk {
            return Err(Error::config(format!(
                "kernel {kk} incompatible with padding ({pad_left}, {pad_right})"
            )));
        }
        if c == 0 || n % c != 0 {
            return Err(Error::shape("depthwise_conv", &sx, &sw));
        }
        if t_in + pad_left + pad_right < kk {
            return Err(Error::config(format!(
                "kernel {kk} longer than padded input {}",
                t_in + pad_left + pad_right
            )));
        }
        let t_out = t_in + pad_left + pad_right - kk + 1;
        let batch: usize = sx[..sx.len() - 2].iter().product();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; batch * t_out * n];
        for b in 0..batch {
            for t in 0..t_out {
                let dst = &mut out[(b * t_out + t) * n..(b * t_out + t + 1) * n];
                for k in 0..kk {
                    let src_t = t + k;
                    if src_t < pad_left || src_t - pad_left >= t_in {
                        continue;
                    }
                    let st = src_t - pad_left;
                    let src = &xv[(b * t_in + st) * n..(b * t_in + st + 1) * n];
                    let wk = &wv[k * c..(k + 1) * c];
                    for (j, (d, s)) in dst.iter_mut().zip(src).enumerate() {
                        *d += wk[j % c] * s;
                    }
                }
            }
        }
        let mut shape = sx.clone();
        let r = shape.len();
        shape[r - 2] = t_out;
        let needs = self.needs(x.0) || self.needs(w.0);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::DepthwiseConv {
                x: x.0,
                w: w.0,
                pad_left,
            },
            needs,
        ))
    }

    // --------------------------------------------------------------- indexing

    /// Rows of a `[V, D]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::shape("gather_rows", &st, &[]));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::Label {
                label: bad,
                classes: v,
            });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table.0);
        Ok(self.push(
            Tensor::new(&[idx.len(), d], out)?,
            Op::Gather {
                table: table.0,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// `out[r] = x[r, idx[r]]` for `x` viewed as `[rows, last]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let w = *t.shape().last().unwrap_or(&0);
        let rows = t.rows();
        if idx.len() != rows {
            return Err(Error::shape("pick", t.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= w) {
            return Err(Error::Label {
                label: bad,
                classes: w,
            });
        }
        let out = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| t.data()[r * w + i])
            .collect();
        let needs = self.needs(x.0);
        Ok(self.push(
            Tensor::new(&[rows], out)?,
            Op::Pick {
                x: x.0,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    // -------------------------------------------------------------- compound

    /// Mean cross-entropy of `[rows, classes]` logits against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let r = self.shape(logits).len();
        let lsm = self.log_softmax(logits, r - 1)?;
        let picked = self.pick(lsm, labels)?;
        let m = self.mean_all(picked)?;
        Ok(self.neg(m))
    }

    /// Unit L2 norm along the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        let sq = self.square(x);
        let ss = self.sum_axis(sq, r - 1)?;
        let ss = self.add_scalar(ss, 1e-12);
        let norm = self.sqrt(ss);
        let mut shape = self.shape(x).to_vec();
        shape[r - 1] = 1;
        let norm = self.reshape(norm, &shape)?;
        self.div(x, norm)
    }

    // -------------------------------------------------------------- backward

    /// Propagate `d loss / d node` to every node that requires gradient and
    /// accumulate into bound parameters.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_operands(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, p) in &self.params {
            if let Some(g) = &grads[*id] {
                p.accumulate_grad(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate_operands(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let needs = |i: usize| nodes[i].needs_grad;
        macro_rules! acc {
            ($i:expr) => {
                grad_slot(grads, nodes, $i)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Binary { a, b, kind, map } => {
                let va = nodes[*a].value.data();
                let vb = nodes[*b].value.data();
                let (ia, ib): (Box<dyn Fn(usize) -> usize>, Box<dyn Fn(usize) -> usize>) = match map
                {
                    None => (Box::new(|i| i), Box::new(|i| i)),
                    Some((ma, mb)) => (Box::new(move |i| ma[i]), Box::new(move |i| mb[i])),
                };
                if needs(*a) {
                    let ga = acc!(*a);
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            BinKind::Add | BinKind::Sub => gi,
                            BinKind::Mul => gi * vb[ib(i)],
                            BinKind::Div => gi / vb[ib(i)],
                        };
                        ga[ia(i)] += d;
                    }
                }
                if needs(*b) {
                    let gb = acc!(*b);
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            BinKind::Add => gi,
                            BinKind::Sub => -gi,
                            BinKind::Mul => gi * va[ia(i)],
                            BinKind::Div => {
                                let y = vb[ib(i)];
                                -gi * va[ia(i)] / (y * y)
                            }
                        };
                        gb[ib(i)] += d;
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let va = nodes[*a].value.data();
                let vb = nodes[*b].value.data();
                if needs(*a) {
                    let ga = acc!(*a);
                    if *shared_rhs {
                        gemm(batch * m, n, k, g, false, vb, true, ga, true);
                    } else {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..],
                                false,
                                &vb[i * k * n..],
                                true,
                                &mut ga[i * m * k..],
                                true,
                            );
                        }
                    }
                }
                if needs(*b) {
                    let gb = acc!(*b);
                    if *shared_rhs {
                        gemm(k, batch * m, n, va, true, g, false, gb, true);
                    } else {
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &va[i * m * k..],
                                true,
                                &g[i * m * n..],
                                false,
                                &mut gb[i * k * n..],
                                true,
                            );
                        }
                    }
                }
            }
            Op::Unary { x, kind } => {
                if needs(*x) {
                    let xv = nodes[*x].value.data();
                    let yv = node.value.data();
                    let gx = acc!(*x);
                    for i in 0..g.len() {
                        let (xi, yi) = (xv[i], yv[i]);
                        let d = match kind {
                            UnaryKind::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Sigmoid => yi * (1.0 - yi),
                            UnaryKind::Silu => {
                                let s = sigmoid(xi);
                                s + xi * s * (1.0 - s)
                            }
                            UnaryKind::Tanh => 1.0 - yi * yi,
                            UnaryKind::Exp => yi,
                            UnaryKind::Ln => 1.0 / xi,
                            UnaryKind::Abs => {
                                if xi > 0.0 {
                                    1.0
                                } else if xi < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Sqrt => 0.5 / yi,
                            UnaryKind::Square => 2.0 * xi,
                        };
                        gx[i] += g[i] * d;
                    }
                }
            }
            Op::Scale { x, s } => {
                if needs(*x) {
                    let gx = acc!(*x);
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                if needs(*x) {
                    let gx = acc!(*x);
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Sum { x, axis } => {
                if needs(*x) {
                    let shape = nodes[*x].value.shape();
                    let (outer, n, inner) = split_axis(shape, *axis);
                    let gx = acc!(*x);
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for kk in 0..n {
                            let dst = &mut gx[(o * n + kk) * inner..(o * n + kk + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if needs(*x) {
                    let y = node.value.data();
                    let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                    let gx = acc!(*x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |kk: usize| (o * n + kk) * inner + i;
                            let dot: f64 = (0..n).map(|kk| g[at(kk)] * y[at(kk)]).sum();
                            for kk in 0..n {
                                gx[at(kk)] += y[at(kk)] * (g[at(kk)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                if needs(*x) {
                    let y = node.value.data();
                    let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                    let gx = acc!(*x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |kk: usize| (o * n + kk) * inner + i;
                            let gsum: f64 = (0..n).map(|kk| g[at(kk)]).sum();
                            for kk in 0..n {
                                gx[at(kk)] += g[at(kk)] - y[at(kk)].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                if needs(*x) {
                    let y = node.value.data();
                    let w = *node.value.shape().last().expect("rank>0");
                    let gx = acc!(*x);
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * w..(r + 1) * w];
                        let yr = &y[r * w..(r + 1) * w];
                        let mg = gr.iter().sum::<f64>() / w as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                        for j in 0..w {
                            gx[r * w + j] += rs * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                if needs(*x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let back = permute_data(g, node.value.shape(), &inv);
                    let gx = acc!(*x);
                    gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
                }
            }
            Op::Concat { xs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &xi in xs {
                    let n = nodes[xi].value.shape()[*axis];
                    if needs(xi) {
                        let gx = acc!(xi);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            let dst = &mut gx[o * n * inner..(o + 1) * n * inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                if needs(*x) {
                    let in_shape = nodes[*x].value.shape();
                    let (outer, n, inner) = split_axis(in_shape, *axis);
                    let len = node.value.shape()[*axis];
                    let gx = acc!(*x);
                    for o in 0..outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        let dst = &mut gx[(o * n + start) * inner..(o * n + start + len) * inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::DepthwiseConv { x, w, pad_left } => {
                let sx = nodes[*x].value.shape();
                let sw = nodes[*w].value.shape();
                let (kk, c) = (sw[0], sw[1]);
                let t_in = sx[sx.len() - 2];
                let n = sx[sx.len() - 1];
                let t_out = node.value.shape()[sx.len() - 2];
                let batch: usize = sx[..sx.len() - 2].iter().product();
                let xv = nodes[*x].value.data();
                let wv = nodes[*w].value.data();
                let visit = |f: &mut dyn FnMut(usize, usize, usize, usize)| {
                    for b in 0..batch {
                        for t in 0..t_out {
                            for k in 0..kk {
                                let src_t = t + k;
                                if src_t < *pad_left || src_t - pad_left >= t_in {
                                    continue;
                                }
                                f(b, t, k, src_t - pad_left);
                            }
                        }
                    }
                };
                if needs(*x) {
                    let gx = acc!(*x);
                    visit(&mut |b, t, k, st| {
                        let go = &g[(b * t_out + t) * n..(b * t_out + t + 1) * n];
                        let dst = &mut gx[(b * t_in + st) * n..(b * t_in + st + 1) * n];
                        let wk = &wv[k * c..(k + 1) * c];
                        for j in 0..n {
                            dst[j] += wk[j % c] * go[j];
                        }
                    });
                }
                if needs(*w) {
                    let gw = acc!(*w);
                    visit(&mut |b, t, k, st| {
                        let go = &g[(b * t_out + t) * n..(b * t_out + t + 1) * n];
                        let src = &xv[(b * t_in + st) * n..(b * t_in + st + 1) * n];
                        for j in 0..n {
                            gw[k * c + j % c] += src[j] * go[j];
                        }
                    });
                }
            }
            Op::Gather { table, idx } => {
                if needs(*table) {
                    let d = nodes[*table].value.shape()[1];
                    let gt = acc!(*table);
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        gt[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Pick { x, idx } => {
                if needs(*x) {
                    let w = *nodes[*x].value.shape().last().expect("rank>0");
                    let gx = acc!(*x);
                    for (r, &i) in idx.iter().enumerate() {
                        gx[r * w + i] += g[r];
                    }
                }
            }
        }
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> &'a mut Vec<f64> {
    let n = nodes[i].value.numel();
    grads[i].get_or_insert_with(|| vec![0.0; n])
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_along(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..n).map(|k| (x[at(k)] - max).exp()).sum();
            let lse = max + sum.ln();
            for k in 0..n {
                out[at(k)] = if log {
                    x[at(k)] - lse
                } else {
                    (x[at(k)] - max).exp() / sum
                };
            }
        }
    }
    out
}

fn permute_data(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let rank = shape.len();
    if x.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        out.push(x[offset]);
        let mut d = rank;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Source offset in `src` for every element of the broadcast output.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let pad = r - src.len();
    let s = strides(src);
    let eff: Vec<usize> = (0..r)
        .map(|i| {
            if i < pad || src[i - pad] == 1 {
                0
            } else {
                s[i - pad]
            }
        })
        .collect();
    let n: usize = out.iter().product();
    let mut res = Vec::with_capacity(n);
    if n == 0 {
        return res;
    }
    let mut idx = vec![0usize; r];
    let mut offset = 0usize;
    loop {
        res.push(offset);
        let mut d = r;
        loop {
            if d == 0 {
                return res;
            }
            d -= 1;
            idx[d] += 1;
            offset += eff[d];
            if idx[d] < out[d] {
                break;
            }
            offset -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
}
