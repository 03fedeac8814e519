//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order, which is a topological order of the computation graph. Backward
//! walks the record once in reverse, so every node is visited exactly once.
//! Nodes that do not depend on a differentiable leaf are skipped.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Bmm(usize, usize),
    TransposeLast2(usize),
    Sum(usize),
    Mean(usize),
    Softmax(usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    L2Norm(usize),
    Reshape(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        k: usize,
        cols: Vec<f64>,
    },
    AvgPool2(usize),
    UpsampleNearest2(usize),
    GlobalAvgPool(usize),
    AddChannelBias(usize, usize),
    AddRowBias(usize, usize),
    Distances(usize, usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded operation record.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape_id: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` was not reached.
    pub fn get(&self, var: Var<'_>) -> Result<Tensor> {
        if var.tape.id != self.tape_id {
            return Err(Error::Autodiff("variable belongs to a different tape".into()));
        }
        let shape = self.shapes[var.idx].clone();
        match &self.grads[var.idx] {
            Some(g) => Tensor::from_parts(shape, g.clone()).checked("gradient"),
            None => Ok(Tensor::zeros(&shape)),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn conv_dims(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if x.len() != 4 || w.len() != 4 || w[2] != w[3] || w[2] % 2 == 0 || x[1] != w[1] {
        return Err(Error::shape("conv2d", x, w));
    }
    Ok((x[0], x[1], x[2], x[3], w[0], w[2]))
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Records a differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant input; no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn check(&self, v: Var<'_>) -> Result<()> {
        if v.tape.id != self.id {
            return Err(Error::Autodiff("variable belongs to a different tape".into()));
        }
        Ok(())
    }

    fn with_values<R>(&self, vars: &[Var<'_>], f: impl FnOnce(&[&Tensor]) -> R) -> Result<R> {
        for v in vars {
            self.check(*v)?;
        }
        let nodes = self.nodes.borrow();
        let vals: Vec<&Tensor> = vars.iter().map(|v| &nodes[v.idx].value).collect();
        Ok(f(&vals))
    }

    fn rg(&self, vars: &[Var<'_>]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.idx].requires_grad)
    }

    fn record(&self, inputs: &[Var<'_>], value: Result<Tensor>, op: Op) -> Result<Var<'_>> {
        let value = value?;
        let rg = self.rg(inputs);
        Ok(self.push(value, op, rg))
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.idx].value.clone()
    }

    fn binary(
        &self,
        a: Var<'_>,
        b: Var<'_>,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var<'_>> {
        let value = self.with_values(&[a, b], |v| f(v[0], v[1]))?;
        self.record(&[a, b], value, op)
    }

    fn unary(&self, a: Var<'_>, f: impl FnOnce(&Tensor) -> Result<Tensor>, op: Op) -> Result<Var<'_>> {
        let value = self.with_values(&[a], |v| f(v[0]))?;
        self.record(&[a], value, op)
    }

    pub fn add<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.binary(a, b, |x, y| x.add(y), Op::Add(a.idx, b.idx))
    }

    pub fn sub<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.binary(a, b, |x, y| x.sub(y), Op::Sub(a.idx, b.idx))
    }

    pub fn mul<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.binary(a, b, |x, y| x.hadamard(y), Op::Mul(a.idx, b.idx))
    }

    pub fn scale<'t>(&'t self, a: Var<'t>, s: f64) -> Result<Var<'t>> {
        self.unary(a, |x| x.scale(s), Op::Scale(a.idx, s))
    }

    pub fn add_scalar<'t>(&'t self, a: Var<'t>, s: f64) -> Result<Var<'t>> {
        self.unary(a, |x| x.add_scalar(s), Op::AddScalar(a.idx))
    }

    pub fn matmul<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.binary(a, b, |x, y| x.matmul(y), Op::MatMul(a.idx, b.idx))
    }

    /// Batched product `(B,M,K) x (B,K,N) -> (B,M,N)`.
    pub fn bmm<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let f = |x: &Tensor, y: &Tensor| -> Result<Tensor> {
            let (xs, ys) = (x.shape(), y.shape());
            if xs.len() != 3 || ys.len() != 3 || xs[0] != ys[0] || xs[2] != ys[1] {
                return Err(Error::shape("bmm", xs, ys));
            }
            let (bt, m, k, n) = (xs[0], xs[1], xs[2], ys[2]);
            let mut out = vec![0.0; bt * m * n];
            for i in 0..bt {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &x.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &y.data()[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
            Tensor::from_parts(vec![bt, m, n], out).checked("bmm")
        };
        self.binary(a, b, f, Op::Bmm(a.idx, b.idx))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose_last2<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        let f = |x: &Tensor| -> Result<Tensor> {
            let s = x.shape();
            if s.len() != 3 {
                return Err(Error::shape("transpose_last2", s, &[]));
            }
            Ok(transpose3(x.data(), s[0], s[1], s[2]))
                .map(|d| Tensor::from_parts(vec![s[0], s[2], s[1]], d))
        };
        self.unary(a, f, Op::TransposeLast2(a.idx))
    }

    pub fn sum<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        self.unary(a, |x| Tensor::scalar(x.sum()), Op::Sum(a.idx))
    }

    pub fn mean<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        self.unary(a, |x| Tensor::scalar(x.mean()), Op::Mean(a.idx))
    }

    /// Softmax along the last axis.
    pub fn softmax<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        self.unary(a, |x| x.softmax(), Op::Softmax(a.idx))
    }

    pub fn relu<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        self.unary(a, |x| x.relu(), Op::Relu(a.idx))
    }

    pub fn gelu<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        self.unary(a, |x| x.gelu(), Op::Gelu(a.idx))
    }

    pub fn sigmoid<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        self.unary(a, |x| x.map("sigmoid", kernels::sigmoid), Op::Sigmoid(a.idx))
    }

    pub fn l2_norm<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        self.unary(a, |x| Tensor::scalar(x.l2_norm()), Op::L2Norm(a.idx))
    }

    pub fn reshape<'t>(&'t self, a: Var<'t>, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(a, |x| x.reshape(shape), Op::Reshape(a.idx))
    }

    /// Stride-1, same-padded 2-D convolution: `(N,Cin,H,W) * (Cout,Cin,k,k) -> (N,Cout,H,W)`.
    pub fn conv2d<'t>(&'t self, x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let computed = self.with_values(&inputs, |v| -> Result<(Tensor, Vec<f64>, usize)> {
            let (n, cin, h, wd, cout, k) = conv_dims(v[0].shape(), v[1].shape())?;
            if let Some(bias) = v.get(2) {
                if bias.shape() != [cout] {
                    return Err(Error::shape("conv2d bias", bias.shape(), &[cout]));
                }
            }
            let hw = h * wd;
            let ck = cin * k * k;
            let mut cols = vec![0.0; n * ck * hw];
            let mut out = vec![0.0; n * cout * hw];
            for i in 0..n {
                let col = &mut cols[i * ck * hw..(i + 1) * ck * hw];
                kernels::im2col(&v[0].data()[i * cin * hw..(i + 1) * cin * hw], cin, h, wd, k, col);
                let o = &mut out[i * cout * hw..(i + 1) * cout * hw];
                if let Some(bias) = v.get(2) {
                    for (c, plane) in o.chunks_mut(hw).enumerate() {
                        plane.iter_mut().for_each(|p| *p = bias.data()[c]);
                    }
                }
                let beta = if v.len() > 2 { 1.0 } else { 0.0 };
                kernels::gemm(cout, ck, hw, v[1].data(), false, col, false, o, beta);
            }
            let t = Tensor::from_parts(vec![n, cout, h, wd], out).checked("conv2d")?;
            Ok((t, cols, k))
        })??;
        let (value, cols, k) = computed;
        let rg = self.rg(&inputs);
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.idx,
                w: w.idx,
                b: b.map(|v| v.idx),
                k,
                cols,
            },
            rg,
        ))
    }

    /// 2x2 average pooling over the trailing spatial axes of `(N,C,H,W)`.
    pub fn avg_pool2<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        let f = |x: &Tensor| -> Result<Tensor> {
            let s = x.shape();
            if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
                return Err(Error::shape("avg_pool2", s, &[]));
            }
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (h / 2, w / 2);
            let planes = s[0] * s[1];
            let mut out = vec![0.0; planes * oh * ow];
            for p in 0..planes {
                let src = &x.data()[p * h * w..(p + 1) * h * w];
                for y in 0..oh {
                    for xx in 0..ow {
                        let i = 2 * y * w + 2 * xx;
                        out[p * oh * ow + y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                    }
                }
            }
            Ok(Tensor::from_parts(vec![s[0], s[1], oh, ow], out))
        };
        self.unary(a, f, Op::AvgPool2(a.idx))
    }

    /// Nearest-neighbour 2x upsampling of `(N,C,H,W)`.
    pub fn upsample_nearest2<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        let f = |x: &Tensor| -> Result<Tensor> {
            let s = x.shape();
            if s.len() != 4 {
                return Err(Error::shape("upsample_nearest2", s, &[]));
            }
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (2 * h, 2 * w);
            let planes = s[0] * s[1];
            let mut out = vec![0.0; planes * oh * ow];
            for p in 0..planes {
                for y in 0..oh {
                    for xx in 0..ow {
                        out[p * oh * ow + y * ow + xx] = x.data()[p * h * w + (y / 2) * w + xx / 2];
                    }
                }
            }
            Ok(Tensor::from_parts(vec![s[0], s[1], oh, ow], out))
        };
        self.unary(a, f, Op::UpsampleNearest2(a.idx))
    }

    /// Mean over spatial axes: `(N,C,H,W) -> (N,C)`.
    pub fn global_avg_pool<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        let f = |x: &Tensor| -> Result<Tensor> {
            let s = x.shape();
            if s.len() != 4 {
                return Err(Error::shape("global_avg_pool", s, &[]));
            }
            let hw = s[2] * s[3];
            let out = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
            Ok(Tensor::from_parts(vec![s[0], s[1]], out))
        };
        self.unary(a, f, Op::GlobalAvgPool(a.idx))
    }

    /// Adds a per-channel bias of shape `(C)` or per-sample `(N,C)` to `(N,C,H,W)`.
    pub fn add_channel_bias<'t>(&'t self, x: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let f = |x: &Tensor, b: &Tensor| -> Result<Tensor> {
            let s = x.shape();
            let ok = s.len() == 4
                && (b.shape() == [s[1]] || b.shape() == [s[0], s[1]]);
            if !ok {
                return Err(Error::shape("add_channel_bias", s, b.shape()));
            }
            let hw = s[2] * s[3];
            let per_sample = b.ndim() == 2;
            let mut out = x.data().to_vec();
            for (pi, plane) in out.chunks_mut(hw).enumerate() {
                let bi = if per_sample { pi } else { pi % s[1] };
                let bv = b.data()[bi];
                plane.iter_mut().for_each(|v| *v += bv);
            }
            Tensor::from_parts(s.to_vec(), out).checked("add_channel_bias")
        };
        self.binary(x, b, f, Op::AddChannelBias(x.idx, b.idx))
    }

    /// Adds a row vector `(M)` to every row of `(N,M)`.
    pub fn add_row_bias<'t>(&'t self, x: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let f = |x: &Tensor, b: &Tensor| -> Result<Tensor> {
            let s = x.shape();
            if s.len() != 2 || b.shape() != [s[1]] {
                return Err(Error::shape("add_row_bias", s, b.shape()));
            }
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(s[1]) {
                row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
            }
            Tensor::from_parts(s.to_vec(), out).checked("add_row_bias")
        };
        self.binary(x, b, f, Op::AddRowBias(x.idx, b.idx))
    }

    /// `x (N,M) @ w (M,K) + b (K)`.
    pub fn linear<'t>(&'t self, x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    /// Euclidean distances from a flat point `x` (L elements) to every row of `bank (N, L)`.
    pub fn distances<'t>(&'t self, x: Var<'t>, bank: Var<'t>) -> Result<Var<'t>> {
        let f = |x: &Tensor, bank: &Tensor| -> Result<Tensor> {
            let l = x.len();
            if bank.ndim() != 2 || bank.shape()[1] != l {
                return Err(Error::shape("distances", x.shape(), bank.shape()));
            }
            let d = if l == 0 {
                vec![0.0; bank.shape()[0]]
            } else {
                bank.data()
                    .chunks(l)
                    .map(|row| {
                        row.iter()
                            .zip(x.data())
                            .map(|(b, a)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect()
            };
            Ok(Tensor::from_parts(vec![bank.shape()[0]], d))
        };
        self.binary(x, bank, f, Op::Distances(x.idx, bank.idx))
    }

    /// Mean cross-entropy of `(N,K)` logits against integer labels.
    pub fn cross_entropy<'t>(&'t self, logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = self.with_values(&[logits], |v| -> Result<(Tensor, Vec<f64>)> {
            let s = v[0].shape();
            if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
                return Err(Error::shape("cross_entropy", s, &[labels.len()]));
            }
            let k = s[1];
            if let Some(bad) = labels.iter().find(|&&y| y >= k) {
                return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
            }
            let mut probs = v[0].data().to_vec();
            let mut total = 0.0;
            for (row, (&y, logit_row)) in probs.chunks_mut(k).zip(labels.iter().zip(v[0].data().chunks(k))) {
                let max = logit_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logit_row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                total += lse - logit_row[y];
                kernels::softmax_in_place(row);
            }
            Ok((Tensor::scalar(total / labels.len() as f64)?, probs))
        })??;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits: logits.idx,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if loss.tape.id != self.id {
            return Err(Error::Autodiff("loss is not recorded on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if loss.idx >= nodes.len() {
            return Err(Error::Autodiff("loss is not recorded on this tape".into()));
        }
        if nodes[loss.idx].value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {:?}",
                nodes[loss.idx].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.idx] = Some(vec![1.0]);

        for i in (0..=loss.idx).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            tape_id: self.id,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }
}

fn transpose3(data: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for bi in 0..b {
        let src = &data[bi * m * n..(bi + 1) * m * n];
        let dst = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], idx: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[idx].requires_grad {
        return;
    }
    let len = nodes[idx].value.len();
    let slot = grads[idx].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |j: usize| nodes[j].value.data();
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            accumulate(nodes, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            accumulate(nodes, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |ga| {
                for ((x, y), bb) in ga.iter_mut().zip(g).zip(bv) {
                    *x += y * bb;
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for ((x, y), aa) in gb.iter_mut().zip(g).zip(av) {
                    *x += y * aa;
                }
            });
        }
        Op::Scale(a, s) => {
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |ga| kernels::gemm(m, n, k, g, false, bv, true, ga, 1.0));
            accumulate(nodes, grads, *b, |gb| kernels::gemm(k, m, n, av, true, g, false, gb, 1.0));
        }
        Op::Bmm(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |ga| {
                for t in 0..bt {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &g[t * m * n..(t + 1) * m * n],
                        false,
                        &bv[t * k * n..(t + 1) * k * n],
                        true,
                        &mut ga[t * m * k..(t + 1) * m * k],
                        1.0,
                    );
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for t in 0..bt {
                    kernels::gemm(
                        k,
                        m,
                        n,
                        &av[t * m * k..(t + 1) * m * k],
                        true,
                        &g[t * m * n..(t + 1) * m * n],
                        false,
                        &mut gb[t * k * n..(t + 1) * k * n],
                        1.0,
                    );
                }
            });
        }
        Op::TransposeLast2(a) => {
            let s = nodes[i].value.shape();
            let back = transpose3(g, s[0], s[1], s[2]);
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y));
        }
        Op::Sum(a) => {
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len().max(1) as f64;
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
        }
        Op::Softmax(a) => {
            let last = *nodes[i].value.shape().last().unwrap_or(&1);
            accumulate(nodes, grads, *a, |ga| {
                for ((gar, gr), yr) in ga.chunks_mut(last).zip(g.chunks(last)).zip(out.chunks(last)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for ((x, gg), y) in gar.iter_mut().zip(gr).zip(yr) {
                        *x += y * (gg - dot);
                    }
                }
            });
        }
        Op::Relu(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, |ga| {
                for ((x, gg), v) in ga.iter_mut().zip(g).zip(av) {
                    if *v > 0.0 {
                        *x += gg;
                    }
                }
            });
        }
        Op::Gelu(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, |ga| {
                for ((x, gg), v) in ga.iter_mut().zip(g).zip(av) {
                    *x += gg * kernels::gelu_grad(*v);
                }
            });
        }
        Op::Sigmoid(a) => {
            accumulate(nodes, grads, *a, |ga| {
                for ((x, gg), y) in ga.iter_mut().zip(g).zip(out) {
                    *x += gg * y * (1.0 - y);
                }
            });
        }
        Op::L2Norm(a) => {
            let norm = out[0];
            if norm > 0.0 {
                let av = val(*a);
                accumulate(nodes, grads, *a, |ga| {
                    for (x, v) in ga.iter_mut().zip(av) {
                        *x += g[0] * v / norm;
                    }
                });
            }
        }
        Op::Conv2d { x, w, b, k, cols } => {
            let (xs, ws) = (nodes[*x].value.shape(), nodes[*w].value.shape());
            let (n, cin, h, wd, cout, k) = (xs[0], xs[1], xs[2], xs[3], ws[0], *k);
            let hw = h * wd;
            let ck = cin * k * k;
            let wv = val(*w);
            accumulate(nodes, grads, *w, |gw| {
                for s in 0..n {
                    kernels::gemm(
                        cout,
                        hw,
                        ck,
                        &g[s * cout * hw..(s + 1) * cout * hw],
                        false,
                        &cols[s * ck * hw..(s + 1) * ck * hw],
                        true,
                        gw,
                        1.0,
                    );
                }
            });
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |gb| {
                    for s in 0..n {
                        for (c, plane) in g[s * cout * hw..(s + 1) * cout * hw].chunks(hw).enumerate() {
                            gb[c] += plane.iter().sum::<f64>();
                        }
                    }
                });
            }
            accumulate(nodes, grads, *x, |gx| {
                let mut dcols = vec![0.0; ck * hw];
                for s in 0..n {
                    kernels::gemm(ck, cout, hw, wv, true, &g[s * cout * hw..(s + 1) * cout * hw], false, &mut dcols, 0.0);
                    kernels::col2im(&dcols, cin, h, wd, k, &mut gx[s * cin * hw..(s + 1) * cin * hw]);
                }
            });
        }
        Op::AvgPool2(a) => {
            let s = nodes[*a].value.shape();
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (h / 2, w / 2);
            accumulate(nodes, grads, *a, |ga| {
                for p in 0..s[0] * s[1] {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = 0.25 * g[p * oh * ow + y * ow + xx];
                            let base = p * h * w + 2 * y * w + 2 * xx;
                            ga[base] += gv;
                            ga[base + 1] += gv;
                            ga[base + w] += gv;
                            ga[base + w + 1] += gv;
                        }
                    }
                }
            });
        }
        Op::UpsampleNearest2(a) => {
            let s = nodes[*a].value.shape();
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (2 * h, 2 * w);
            accumulate(nodes, grads, *a, |ga| {
                for p in 0..s[0] * s[1] {
                    for y in 0..oh {
                        for xx in 0..ow {
                            ga[p * h * w + (y / 2) * w + xx / 2] += g[p * oh * ow + y * ow + xx];
                        }
                    }
                }
            });
        }
        Op::GlobalAvgPool(a) => {
            let s = nodes[*a].value.shape();
            let hw = s[2] * s[3];
            accumulate(nodes, grads, *a, |ga| {
                for (p, plane) in ga.chunks_mut(hw).enumerate() {
                    let gv = g[p] / hw as f64;
                    plane.iter_mut().for_each(|v| *v += gv);
                }
            });
        }
        Op::AddChannelBias(x, b) => {
            let s = nodes[*x].value.shape();
            let hw = s[2] * s[3];
            let per_sample = nodes[*b].value.ndim() == 2;
            accumulate(nodes, grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(p, q)| *p += q));
            accumulate(nodes, grads, *b, |gb| {
                for (pi, plane) in g.chunks(hw).enumerate() {
                    let bi = if per_sample { pi } else { pi % s[1] };
                    gb[bi] += plane.iter().sum::<f64>();
                }
            });
        }
        Op::AddRowBias(x, b) => {
            let m = nodes[*x].value.shape()[1];
            accumulate(nodes, grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(p, q)| *p += q));
            accumulate(nodes, grads, *b, |gb| {
                for row in g.chunks(m) {
                    gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                }
            });
        }
        Op::Distances(x, bank) => {
            let xv = val(*x);
            let bv = val(*bank);
            let l = xv.len();
            if l == 0 {
                return;
            }
            accumulate(nodes, grads, *x, |gx| {
                for (r, row) in bv.chunks(l).enumerate() {
                    if out[r] > 0.0 {
                        let c = g[r] / out[r];
                        for ((p, a), bb) in gx.iter_mut().zip(xv).zip(row) {
                            *p += c * (a - bb);
                        }
                    }
                }
            });
            accumulate(nodes, grads, *bank, |gb| {
                for (r, grow) in gb.chunks_mut(l).enumerate() {
                    if out[r] > 0.0 {
                        let c = g[r] / out[r];
                        let row = &bv[r * l..(r + 1) * l];
                        for ((p, a), bb) in grow.iter_mut().zip(xv).zip(row) {
                            *p -= c * (a - bb);
                        }
                    }
                }
            });
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let k = nodes[*logits].value.shape()[1];
            let scale = g[0] / labels.len() as f64;
            accumulate(nodes, grads, *logits, |gl| {
                for (r, (row, &y)) in gl.chunks_mut(k).zip(labels).enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        *v += scale * (probs[r * k + j] - onehot);
                    }
                }
            });
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.add(self, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.sub(self, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.mul(self, other)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.tape.scale(self, s)
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        self.tape.add_scalar(self, s)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.matmul(self, other)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.tape.sum(self)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.tape.mean(self)
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        self.tape.softmax(self)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.tape.relu(self)
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        self.tape.gelu(self)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.tape.sigmoid(self)
    }

    pub fn l2_norm(self) -> Result<Var<'t>> {
        self.tape.l2_norm(self)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.reshape(self, shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, RngState};

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let num = a.sub(b).unwrap().l2_norm();
        let den = a.l2_norm().max(b.l2_norm()).max(1e-12);
        num / den
    }

    #[test]
    fn square_at_three() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).unwrap());
        let y = x.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -1.0, 2.0]).unwrap());
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_norm_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let n = x.l2_norm().unwrap();
        let g = tape.backward(n.mul(n).unwrap()).unwrap();
        let gx = g.get(x).unwrap();
        assert!((gx.data()[0] - 2.0).abs() < 1e-12 && (gx.data()[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_and_foreign_losses_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Autodiff(_))));
        let other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0).unwrap());
        assert!(matches!(tape.backward(y), Err(Error::Autodiff(_))));
    }

    #[test]
    fn unreached_leaf_gets_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let unused = tape.leaf(Tensor::zeros(&[2, 2]));
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.get(unused).unwrap(), Tensor::zeros(&[2, 2]));
    }

    /// Exercises every op on the tape and compares with central differences.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = RngState::new(11);
        for trial in 0..10 {
            let x0 = rng.gaussian(&[2, 2, 4, 4]);
            let w0 = rng.gaussian(&[3, 2, 3, 3]).scale(0.5).unwrap();
            let b0 = rng.gaussian(&[3]);
            let lin = rng.gaussian(&[3, 2]);
            let bank = rng.gaussian(&[3, 2 * 2]);
            let f = |x: &Tensor, w: &Tensor| -> Result<(f64, Option<(Tensor, Tensor)>)> {
                let tape = Tape::new();
                let xv = tape.leaf(x.clone());
                let wv = tape.leaf(w.clone());
                let bv = tape.constant(b0.clone());
                let h = tape.conv2d(xv, wv, Some(bv))?;
                let h = tape.gelu(h)?;
                let h = tape.avg_pool2(h)?;
                let u = tape.upsample_nearest2(h)?;
                let u = tape.relu(u)?;
                let pooled = tape.global_avg_pool(u)?; // (2,3)
                let lw = tape.constant(lin.clone());
                let logits = tape.matmul(pooled, lw)?; // (2,2)
                let ce = tape.cross_entropy(logits, &[1, 0])?;
                let sm = tape.softmax(logits)?;
                let t3 = tape.reshape(sm, &[1, 2, 2])?;
                let tt = tape.transpose_last2(t3)?;
                let prod = tape.bmm(t3, tt)?;
                let flat = tape.reshape(prod, &[4])?;
                let bk = tape.constant(bank.clone());
                let d = tape.distances(flat, bk)?;
                let hinge = tape.relu(tape.add_scalar(tape.scale(d, -1.0)?, 2.0)?)?;
                let loss = tape.add(ce, tape.mean(hinge)?)?;
                let loss = tape.add(loss, tape.scale(tape.l2_norm(pooled)?, 0.3)?)?;
                let value = loss.value().item()?;
                let grads = tape.backward(loss)?;
                Ok((value, Some((grads.get(xv)?, grads.get(wv)?))))
            };
            let (_, g) = f(&x0, &w0).unwrap();
            let (gx, gw) = g.unwrap();
            let fdx = finite_diff_grad(|x| f(x, &w0).map(|r| r.0), &x0, 1e-6).unwrap();
            let fdw = finite_diff_grad(|w| f(&x0, w).map(|r| r.0), &w0, 1e-6).unwrap();
            assert!(rel_err(&gx, &fdx) < 1e-6, "trial {trial}: x rel err {}", rel_err(&gx, &fdx));
            assert!(rel_err(&gw, &fdw) < 1e-6, "trial {trial}: w rel err {}", rel_err(&gw, &fdw));
        }
    }

    #[test]
    fn channel_and_row_bias_gradients() {
        let mut rng = RngState::new(5);
        let x0 = rng.gaussian(&[2, 3, 2, 2]);
        let b0 = rng.gaussian(&[2, 3]);
        let r0 = rng.gaussian(&[3]);
        let f = |b: &Tensor, r: &Tensor| -> Result<(f64, Tensor, Tensor)> {
            let tape = Tape::new();
            let xv = tape.constant(x0.clone());
            let bv = tape.leaf(b.clone());
            let rv = tape.leaf(r.clone());
            let y = tape.add_channel_bias(xv, bv)?;
            let y = tape.gelu(y)?;
            let p = tape.global_avg_pool(y)?;
            let p = tape.add_row_bias(p, rv)?;
            let loss = tape.sum(tape.mul(p, p)?)?;
            let g = tape.backward(loss)?;
            Ok((loss.value().item()?, g.get(bv)?, g.get(rv)?))
        };
        let (_, gb, gr) = f(&b0, &r0).unwrap();
        let fdb = finite_diff_grad(|b| f(b, &r0).map(|v| v.0), &b0, 1e-6).unwrap();
        let fdr = finite_diff_grad(|r| f(&b0, r).map(|v| v.0), &r0, 1e-6).unwrap();
        assert!(rel_err(&gb, &fdb) < 1e-7);
        assert!(rel_err(&gr, &fdr) < 1e-7);
    }

    #[test]
    fn sigmoid_values_and_gradient() {
        let x0 = Tensor::vector(vec![-800.0, -2.0, 0.0, 0.7, 800.0]).unwrap();
        let tape = Tape::new();
        let y = tape.sigmoid(tape.constant(x0)).unwrap();
        let v = y.value();
        assert_eq!(v.data()[0], 0.0);
        assert_eq!(v.data()[2], 0.5);
        assert_eq!(v.data()[4], 1.0);

        let mut rng = RngState::new(8);
        let x0 = rng.gaussian(&[3, 4]).scale(3.0).unwrap();
        let f = |x: &Tensor| -> Result<(f64, Tensor)> {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let s = tape.sigmoid(xv)?;
            let loss = tape.sum(tape.mul(s, s)?)?;
            let g = tape.backward(loss)?;
            Ok((loss.value().item()?, g.get(xv)?))
        };
        let (_, g) = f(&x0).unwrap();
        let fd = finite_diff_grad(|x| f(x).map(|r| r.0), &x0, 1e-6).unwrap();
        assert!(rel_err(&g, &fd) < 1e-7, "rel err {}", rel_err(&g, &fd));
    }
}
