//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation pushes a new
//! node whose inputs already live in the arena, so arena order is a valid
//! topological order and [`Graph::backward`] simply walks it in reverse.
//!
//! Gradients accumulate: each call to `backward` adds into the stored
//! gradient of every node that requires one, until [`Graph::zero_grad`].

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{split_at_axis, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        factor: Var,
    },
    Relu(Var),
    BiasAdd {
        x: Var,
        bias: Var,
    },
    Reshape(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    ReverseAxis {
        x: Var,
        axis: usize,
    },
    IndexSelect {
        x: Var,
        axis: usize,
        index: Vec<usize>,
    },
    GlobalAvgPool(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::SoftmaxRows(x)
            | Op::Relu(x)
            | Op::Reshape(x)
            | Op::GlobalAvgPool(x)
            | Op::Sum(x) => vec![*x],
            Op::Conv2d { x, kernel, .. } => vec![*x, *kernel],
            Op::Scale { x, factor } => vec![*x, *factor],
            Op::BiasAdd { x, bias } => vec![*x, *bias],
            Op::Concat { xs, .. } => xs.clone(),
            Op::ReverseAxis { x, .. } | Op::IndexSelect { x, .. } | Op::MeanAxis { x, .. } => {
                vec![*x]
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Arena of tensors and the operations that produced them.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node that receives gradients.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf node excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, or `None` if no backward pass has reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.zero_();
            }
        }
    }

    /// Replaces the value of a leaf in place. Downstream nodes are not recomputed.
    pub fn set_leaf_value(&mut self, v: Var, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Contract("set_leaf_value on a non-leaf node".into()));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::dim("set_leaf_value", node.value.shape(), value.shape()));
        }
        node.value = value;
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[0, 0]));
        }
        let (r, c) = (s[0], s[1]);
        let value = Tensor::new(vec![c, r], kernels::transpose(self.value(x).data(), r, c))?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    /// Row-wise softmax of a rank-2 node, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, z: Var) -> Result<Var> {
        let s = self.shape(z);
        if s.len() != 2 {
            return Err(Error::dim("softmax_rows", s, &[0, 0]));
        }
        let cols = s[1];
        let mut out = self.value(z).data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(s.to_vec(), out)?;
        Ok(self.push(value, Op::SoftmaxRows(z)))
    }

    // ── Convolution ──────────────────────────────────────────────────

    /// Cross-correlation of `x` ([C,H,W] or [M,C,H,W]) with `kernel` [C_out,C_in,k,k].
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let (batch, c_in, height, width) = match xs.as_slice() {
            [c, h, w] => (1, *c, *h, *w),
            [m, c, h, w] => (*m, *c, *h, *w),
            _ => return Err(Error::dim("conv2d", &xs, &ks)),
        };
        if ks.len() != 4 || ks[1] != c_in || ks[2] != ks[3] {
            return Err(Error::dim("conv2d", &xs, &ks));
        }
        let k = ks[2];
        let out_h = ConvGeom::out_extent(height, k, stride, padding);
        let out_w = ConvGeom::out_extent(width, k, stride, padding);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::Config(format!(
                "conv2d output size not integral: input {height}x{width}, kernel {k}, stride {stride}, padding {padding}"
            )));
        };
        let geom = ConvGeom {
            batch,
            c_in,
            c_out: ks[0],
            height,
            width,
            kernel: k,
            stride,
            padding,
            out_h,
            out_w,
        };
        let data = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(kernel).data());
        let shape = if xs.len() == 3 {
            vec![geom.c_out, out_h, out_w]
        } else {
            vec![batch, geom.c_out, out_h, out_w]
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Conv2d { x, kernel, geom }))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Multiplies every element of `x` by the single-element node `factor`.
    pub fn scale(&mut self, x: Var, factor: Var) -> Result<Var> {
        if self.value(factor).numel() != 1 {
            return Err(Error::dim("scale", self.shape(x), self.shape(factor)));
        }
        let s = self.value(factor).item();
        let tx = self.value(x);
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * s).collect())?;
        Ok(self.push(value, Op::Scale { x, factor }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.max(0.0)).collect())?;
        Ok(self.push(value, Op::Relu(x)))
    }

    /// Adds `bias[c]` to every element whose axis-1 index is `c`.
    ///
    /// `x` must have rank ≥ 2 and `bias` must be a vector of length `x.shape[1]`.
    /// This is the only channel-wise broadcast the graph supports.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(bias);
        if xs.len() < 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::dim("bias_add", xs, bs));
        }
        let (_, channels, inner) = split_at_axis(xs, 1);
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += b[(i / inner) % channels];
        }
        let value = Tensor::new(xs.to_vec(), data)?;
        Ok(self.push(value, Op::BiasAdd { x, bias }))
    }

    // ── Data movement ────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Index {
                op: "concat",
                index: axis,
                bound: base.len(),
            });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Reverses the order of entries along `axis`.
    pub fn reverse_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::Index {
                op: "reverse_axis",
                index: axis,
                bound: t.rank(),
            });
        }
        let value = reverse_along(t, axis);
        Ok(self.push(value, Op::ReverseAxis { x, axis }))
    }

    /// Gathers the listed positions along `axis`; repeated indices are allowed.
    pub fn index_select(&mut self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::Index {
                op: "index_select",
                index: axis,
                bound: t.rank(),
            });
        }
        let (outer, len, inner) = split_at_axis(t.shape(), axis);
        if let Some(&bad) = index.iter().find(|&&i| i >= len) {
            return Err(Error::Index {
                op: "index_select",
                index: bad,
                bound: len,
            });
        }
        if index.is_empty() {
            return Err(Error::Contract("index_select with empty index".into()));
        }
        let src = t.data();
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                let start = (o * len + i) * inner;
                data.extend_from_slice(&src[start..start + inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = index.len();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::IndexSelect {
                x,
                axis,
                index: index.to_vec(),
            },
        ))
    }

    // ── Reductions ───────────────────────────────────────────────────

    /// Mean over the last two (spatial) axes; those axes are kept with length 1.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let r = t.rank();
        if r < 2 {
            return Err(Error::dim("global_avg_pool", t.shape(), &[0, 0]));
        }
        let area = t.shape()[r - 2] * t.shape()[r - 1];
        let data = t.data().chunks(area).map(|c| c.iter().sum::<f64>() / area as f64).collect();
        let mut shape = t.shape().to_vec();
        shape[r - 2] = 1;
        shape[r - 1] = 1;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x)))
    }

    /// Mean along `axis`, removing that axis (a rank-1 input becomes shape `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::Index {
                op: "mean_axis",
                index: axis,
                bound: t.rank(),
            });
        }
        let (outer, len, inner) = split_at_axis(t.shape(), axis);
        let src = t.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::MeanAxis { x, axis }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        Ok(self.push(value, Op::Sum(x)))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits` [n×c].
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim("cross_entropy", s, &[labels.len()]));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Accumulates d(root)/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                self.shape(root)
            )));
        }
        let mut local: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        local[root.0] = Some(Tensor::ones(self.shape(root)));

        for idx in (0..=root.0).rev() {
            let Some(g) = local[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            for (input, contribution) in self.input_grads(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut local[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
            match &mut self.nodes[idx].grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn input_grads(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let shaped = |v: Var, data: Vec<f64>| Tensor::new(self.shape(v).to_vec(), data).expect("grad shape");
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bt = kernels::transpose(self.value(*b).data(), k, n);
                let at = kernels::transpose(self.value(*a).data(), m, k);
                vec![
                    (*a, shaped(*a, kernels::matmul(g.data(), &bt, m, n, k))),
                    (*b, shaped(*b, kernels::matmul(&at, g.data(), k, m, n))),
                ]
            }
            Op::Transpose(x) => {
                let s = out.shape();
                vec![(*x, shaped(*x, kernels::transpose(g.data(), s[0], s[1])))]
            }
            Op::SoftmaxRows(x) => {
                let cols = out.shape()[1];
                let mut data = Vec::with_capacity(out.numel());
                for (y, gr) in out.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    data.extend(y.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                }
                vec![(*x, shaped(*x, data))]
            }
            Op::Conv2d { x, kernel, geom } => {
                let (gx, gw) =
                    kernels::conv2d_backward(geom, self.value(*x).data(), self.value(*kernel).data(), g.data());
                vec![(*x, shaped(*x, gx)), (*kernel, shaped(*kernel, gw))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => {
                let neg = g.data().iter().map(|v| -v).collect();
                vec![(*a, g.clone()), (*b, shaped(*b, neg))]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let ga = g.data().iter().zip(tb).map(|(g, y)| g * y).collect();
                let gb = g.data().iter().zip(ta).map(|(g, x)| g * x).collect();
                vec![(*a, shaped(*a, ga)), (*b, shaped(*b, gb))]
            }
            Op::Scale { x, factor } => {
                let s = self.value(*factor).item();
                let tx = self.value(*x).data();
                let gx = g.data().iter().map(|v| v * s).collect();
                let gs: f64 = g.data().iter().zip(tx).map(|(g, x)| g * x).sum();
                vec![(*x, shaped(*x, gx)), (*factor, shaped(*factor, vec![gs]))]
            }
            Op::Relu(x) => {
                let tx = self.value(*x).data();
                let gx = g.data().iter().zip(tx).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                vec![(*x, shaped(*x, gx))]
            }
            Op::BiasAdd { x, bias } => {
                let (_, channels, inner) = split_at_axis(out.shape(), 1);
                let mut gb = vec![0.0; channels];
                for (i, v) in g.data().iter().enumerate() {
                    gb[(i / inner) % channels] += v;
                }
                vec![(*x, g.clone()), (*bias, shaped(*bias, gb))]
            }
            Op::Reshape(x) => vec![(*x, shaped(*x, g.data().to_vec()))],
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_at_axis(out.shape(), *axis);
                let mut parts: Vec<Vec<f64>> = xs.iter().map(|v| Vec::with_capacity(self.value(*v).numel())).collect();
                for o in 0..outer {
                    let mut offset = o * total * inner;
                    for (part, v) in parts.iter_mut().zip(xs) {
                        let len = self.shape(*v)[*axis] * inner;
                        part.extend_from_slice(&g.data()[offset..offset + len]);
                        offset += len;
                    }
                }
                xs.iter().zip(parts).map(|(v, d)| (*v, shaped(*v, d))).collect()
            }
            Op::ReverseAxis { x, axis } => vec![(*x, reverse_along(g, *axis))],
            Op::IndexSelect { x, axis, index } => {
                let (outer, len, inner) = split_at_axis(self.shape(*x), *axis);
                let mut gx = vec![0.0; outer * len * inner];
                let src = g.data();
                let mut pos = 0;
                for o in 0..outer {
                    for &i in index {
                        let start = (o * len + i) * inner;
                        for (d, v) in gx[start..start + inner].iter_mut().zip(&src[pos..pos + inner]) {
                            *d += v;
                        }
                        pos += inner;
                    }
                }
                vec![(*x, shaped(*x, gx))]
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let area = s[s.len() - 2] * s[s.len() - 1];
                let gx = g
                    .data()
                    .iter()
                    .flat_map(|v| std::iter::repeat(v / area as f64).take(area))
                    .collect();
                vec![(*x, shaped(*x, gx))]
            }
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = split_at_axis(self.shape(*x), *axis);
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let row = &g.data()[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        gx.extend(row.iter().map(|v| v / len as f64));
                    }
                }
                vec![(*x, shaped(*x, gx))]
            }
            Op::Sum(x) => {
                let gv = g.item();
                vec![(*x, Tensor::full(self.shape(*x), gv))]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let n = labels.len() as f64;
                let gv = g.item();
                let mut gx = probs.clone();
                for (row, &label) in gx.chunks_mut(c).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= gv / n);
                }
                vec![(*logits, shaped(*logits, gx))]
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn reverse_along(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_at_axis(t.shape(), axis);
    let src = t.data();
    let mut data = Vec::with_capacity(src.len());
    for o in 0..outer {
        for a in (0..len).rev() {
            let start = (o * len + a) * inner;
            data.extend_from_slice(&src[start..start + inner]);
        }
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grad_close, numeric_grad, random_tensor};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let q = g.matmul(m, z).unwrap();
        assert_eq!(g.value(q).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut g = Graph::new();
        let a = g.variable(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let b = g.constant(t(&[3, 1], &[1.0, 1.0, 1.0]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[6.0]);
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 1.0, 1.0]);

        let fd = numeric_grad(&t(&[1, 3], &[1.0, 2.0, 3.0]), |x| {
            x.data().iter().sum::<f64>()
        });
        assert_grad_close(g.grad(a).unwrap(), &fd, 1e-4);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_shift() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 4]));
        let s = g.softmax_rows(z).unwrap();
        for v in g.value(s).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        for c in [-50.0, 0.0, 3.7, 700.0] {
            let z = g.constant(t(&[1, 2], &[c, c + 3f64.ln()]));
            let s = g.softmax_rows(z).unwrap();
            let out = g.value(s).data();
            assert!((out[0] - 0.25).abs() < 1e-12, "c={c}: {out:?}");
            assert!((out[1] - 0.75).abs() < 1e-12, "c={c}: {out:?}");
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let img = random_tensor(&[1, 5, 6], 3);
        let x = g.constant(img.clone());
        let k = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y), &img);
    }

    #[test]
    fn conv_box_filter_on_constant_image() {
        let v = 0.7;
        let (h, w) = (5, 6);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, h, w], v));
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, k, 1, 1).unwrap();
        let out = g.value(y);
        // Direct summation: count in-bounds taps per output pixel.
        for oy in 0..h {
            for ox in 0..w {
                let mut expect = 0.0;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let (iy, ix) = (oy as i32 + dy, ox as i32 + dx);
                        if iy >= 0 && ix >= 0 && iy < h as i32 && ix < w as i32 {
                            expect += v;
                        }
                    }
                }
                assert!((out.get(&[0, oy, ox]) - expect).abs() < 1e-12);
            }
        }
        assert!((out.get(&[0, 2, 2]) - 9.0 * v).abs() < 1e-12);
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 32, 32]));
        let k = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(g.conv2d(x, k, 2, 1), Err(Error::Config(_))));
    }

    #[test]
    fn relu_forward_backward() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[-1.0, 2.0, 0.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0, 0.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn add_zero_and_unit_scale() {
        let mut g = Graph::new();
        let xt = random_tensor(&[2, 3], 1);
        let x = g.constant(xt.clone());
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), &xt);
        let one = g.constant(Tensor::scalar(1.0));
        let y = g.scale(x, one).unwrap();
        assert_eq!(g.value(y), &xt);
        let bad = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(x, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn data_movement() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 2], &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]));
        let r = g.reverse_axis(x, 0).unwrap();
        assert_eq!(g.value(r).data(), &[3.0, 3.0, 2.0, 2.0, 1.0, 1.0]);
        let rr = g.reverse_axis(r, 0).unwrap();
        assert_eq!(g.value(rr), g.value(x));

        let a = g.constant(Tensor::zeros(&[2, 5]));
        let b = g.constant(Tensor::ones(&[3, 5]));
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.shape(c), &[5, 5]);

        assert!(matches!(g.reverse_axis(x, 2), Err(Error::Index { .. })));
        assert!(matches!(g.index_select(x, 0, &[3]), Err(Error::Index { .. })));
        let sel = g.index_select(x, 0, &[2, 0]).unwrap();
        assert_eq!(g.value(sel).data(), &[3.0, 3.0, 1.0, 1.0]);
    }

    #[test]
    fn pooling() {
        let mut g = Graph::new();
        let x = g.variable(t(&[1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.shape(p), &[1, 1, 1]);
        assert_eq!(g.value(p).item(), 4.0);
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25; 4]);

        let c = g.constant(Tensor::full(&[2, 3, 3], 1.5));
        let p = g.global_avg_pool(c).unwrap();
        assert_eq!(g.value(p).data(), &[1.5, 1.5]);
    }

    #[test]
    fn cross_entropy_limits() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(&[3, 4]));
        let l = g.cross_entropy(uniform, &[0, 1, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        assert!((g.value(l).item() - 1.3863).abs() < 1e-4);

        let peaked = g.constant(t(&[1, 3], &[0.0, 1e3, 0.0]));
        let l = g.cross_entropy(peaked, &[1]).unwrap();
        assert!(g.value(l).item() < 1e-12);

        assert!(matches!(g.cross_entropy(uniform, &[0, 1, 4]), Err(Error::Index { .. })));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);

        g.zero_grad();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_without_zeroing() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::ones(&[2]));
        let c = g.constant(Tensor::ones(&[2]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(x).is_some());
    }
}
