use crate::gemm::{gemm, MatRef};
use crate::{NnError, Real, Result, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Relu(usize),
    Sigmoid(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    Concat {
        a: usize,
        b: usize,
        axis: usize,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    Sum(usize),
    Mean(usize),
    MeanAxis {
        x: usize,
        axis: usize,
    },
    L1(usize, usize),
    CrossEntropy {
        logits: usize,
        target: Vec<F>,
    },
    NllClamped {
        p: usize,
        target: Vec<F>,
        eps: F,
    },
    #[cfg(test)]
    Faulty(usize),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// A define-by-run computation graph.
///
/// Values are computed eagerly as operations are recorded. [`Graph::backward`]
/// walks the nodes in reverse creation order, which is a valid reverse
/// topological order because every node is created after its inputs.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    backward_done: bool,
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn im2col<F: Real>(x: &[F], c_in: usize, t_in: usize, k: usize, stride: usize, t_out: usize) -> Vec<F> {
    let mut cols = vec![F::zero(); c_in * k * t_out];
    for c in 0..c_in {
        let src = &x[c * t_in..(c + 1) * t_in];
        for kk in 0..k {
            let row = &mut cols[(c * k + kk) * t_out..(c * k + kk + 1) * t_out];
            if stride == 1 {
                row.copy_from_slice(&src[kk..kk + t_out]);
            } else {
                for (t, v) in row.iter_mut().enumerate() {
                    *v = src[t * stride + kk];
                }
            }
        }
    }
    cols
}

fn col2im_add<F: Real>(
    cols: &[F],
    dx: &mut [F],
    c_in: usize,
    t_in: usize,
    k: usize,
    stride: usize,
    t_out: usize,
) {
    for c in 0..c_in {
        let dst = &mut dx[c * t_in..(c + 1) * t_in];
        for kk in 0..k {
            let row = &cols[(c * k + kk) * t_out..(c * k + kk + 1) * t_out];
            for (t, &v) in row.iter().enumerate() {
                dst[t * stride + kk] = dst[t * stride + kk] + v;
            }
        }
    }
}

fn fnv_mix(hash: &mut u64, bit: bool) {
    *hash ^= bit as u64 + 1;
    *hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, true)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[usize]) -> Result<Var> {
        if !value.all_finite() {
            return Err(NnError::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated for `v`; zeros when `v` was not reached.
    pub fn grad(&self, v: Var) -> Tensor<F> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if stride == 0 {
            return Err(NnError::invalid("conv1d", "stride must be at least 1"));
        }
        if xs.len() != 2 || ws.len() != 3 || ws[1] != xs[0] {
            return Err(NnError::shape("conv1d", &xs, &ws));
        }
        if bs != [ws[0]] {
            return Err(NnError::shape("conv1d", &ws, &bs));
        }
        let (c_in, t_in) = (xs[0], xs[1]);
        let (c_out, k) = (ws[0], ws[2]);
        if k == 0 {
            return Err(NnError::invalid("conv1d", "kernel size must be at least 1"));
        }
        if t_in < k {
            return Err(NnError::EmptyConvOutput { len: t_in, kernel: k });
        }
        let t_out = (t_in - k) / stride + 1;
        let cols = im2col(self.value(x).data(), c_in, t_in, k, stride, t_out);
        let mut out = vec![F::zero(); c_out * t_out];
        let wv = self.value(w).data();
        gemm(
            F::one(),
            MatRef::new(wv, c_out, c_in * k),
            MatRef::new(&cols, c_in * k, t_out),
            F::zero(),
            &mut out,
        );
        let bv = self.value(b).data();
        for (row, &bias) in out.chunks_mut(t_out).zip(bv) {
            row.iter_mut().for_each(|v| *v = *v + bias);
        }
        let value = Tensor::from_parts(vec![c_out, t_out], out);
        self.push(
            "conv1d",
            value,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
            },
            &[x.0, w.0, b.0],
        )
    }

    /// `y = x W^T + b` for `x` of shape `[n, in]` or `[in]` and `W` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if ws.len() != 2 || xs.is_empty() || xs.len() > 2 || *xs.last().unwrap() != ws[1] {
            return Err(NnError::shape("linear", &xs, &ws));
        }
        if bs != [ws[0]] {
            return Err(NnError::shape("linear", &ws, &bs));
        }
        let rows = if xs.len() == 2 { xs[0] } else { 1 };
        let (d_out, d_in) = (ws[0], ws[1]);
        let mut out = vec![F::zero(); rows * d_out];
        gemm(
            F::one(),
            MatRef::new(self.value(x).data(), rows, d_in),
            MatRef::new(self.value(w).data(), d_out, d_in).t(),
            F::zero(),
            &mut out,
        );
        let bv = self.value(b).data();
        for row in out.chunks_mut(d_out) {
            row.iter_mut().zip(bv).for_each(|(v, &bias)| *v = *v + bias);
        }
        let shape = if xs.len() == 2 { vec![rows, d_out] } else { vec![d_out] };
        let value = Tensor::from_parts(shape, out);
        self.push(
            "linear",
            value,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            &[x.0, w.0, b.0],
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(NnError::shape("matmul", &as_, &bs));
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let mut out = vec![F::zero(); m * n];
        gemm(
            F::one(),
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            F::zero(),
            &mut out,
        );
        let value = Tensor::from_parts(vec![m, n], out);
        self.push("matmul", value, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(NnError::invalid("transpose", format!("needs a 2-D tensor, got {xs:?}")));
        }
        let (r, c) = (xs[0], xs[1]);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::from_parts(vec![c, r], out);
        self.push("transpose", value, Op::Transpose(x.0), &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if shape.iter().product::<usize>() != xs.iter().product::<usize>() {
            return Err(NnError::shape("reshape", &xs, shape));
        }
        let value = Tensor::from_parts(shape.to_vec(), self.value(x).data().to_vec());
        self.push("reshape", value, Op::Reshape(x.0), &[x.0])
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::from_parts(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect());
        self.push(name, value, op, &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| if v > F::zero() { v } else { F::zero() }, Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, |v| F::one() / (F::one() + (-v).exp()), Op::Sigmoid(x.0))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        self.map("scale", x, |v| v * c, Op::Scale(x.0, c))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs[axis] == 0 {
            return Err(NnError::invalid("softmax", format!("axis {axis} invalid for shape {xs:?}")));
        }
        let (outer, dim, inner) = split_axis(&xs, axis);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |d: usize| (o * dim + d) * inner + i;
                let max = (0..dim).map(|d| src[idx(d)]).fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for d in 0..dim {
                    let e = (src[idx(d)] - max).exp();
                    out[idx(d)] = e;
                    total = total + e;
                }
                for d in 0..dim {
                    out[idx(d)] = out[idx(d)] / total;
                }
            }
        }
        let value = Tensor::from_parts(xs, out);
        self.push("softmax", value, Op::Softmax { x: x.0, axis }, &[x.0])
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let compatible = as_.len() == bs.len()
            && axis < as_.len()
            && as_.iter().zip(&bs).enumerate().all(|(i, (p, q))| i == axis || p == q);
        if !compatible {
            return Err(NnError::shape("concat", &as_, &bs));
        }
        let (outer, da, inner) = split_axis(&as_, axis);
        let db = bs[axis];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * da * inner..(o + 1) * da * inner]);
            out.extend_from_slice(&bv[o * db * inner..(o + 1) * db * inner]);
        }
        let mut shape = as_;
        shape[axis] = da + db;
        let value = Tensor::from_parts(shape, out);
        self.push("concat", value, Op::Concat { a: a.0, b: b.0, axis }, &[a.0, b.0])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NnError::shape(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(name, value, op, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |p, q| p + q, Op::Add(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |p, q| p * q, Op::Mul(a.0, b.0))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x).data();
        if src.is_empty() {
            return Err(NnError::invalid("mean", "empty tensor"));
        }
        let total: F = src.iter().copied().sum();
        let value = Tensor::scalar(total / F::lit(src.len() as f64));
        self.push("mean", value, Op::Mean(x.0), &[x.0])
    }

    /// Mean over one axis; the axis is removed from the output shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs[axis] == 0 {
            return Err(NnError::invalid("mean_axis", format!("axis {axis} invalid for shape {xs:?}")));
        }
        let (outer, dim, inner) = split_axis(&xs, axis);
        let src = self.value(x).data();
        let norm = F::lit(dim as f64);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v / norm);
        let mut shape = xs;
        shape.remove(axis);
        let value = Tensor::from_parts(shape, out);
        self.push("mean_axis", value, Op::MeanAxis { x: x.0, axis }, &[x.0])
    }

    /// Mean absolute difference; a scalar.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.is_empty() {
            return Err(NnError::shape("l1_loss", av.shape(), bv.shape()));
        }
        let total: F = av.data().iter().zip(bv.data()).map(|(&p, &q)| (p - q).abs()).sum();
        let value = Tensor::scalar(total / F::lit(av.len() as f64));
        self.push("l1_loss", value, Op::L1(a.0, b.0), &[a.0, b.0])
    }

    /// Softmax cross-entropy against a (one-hot) target distribution.
    ///
    /// `logits` is `[classes]` or `[rows, classes]`; rows are averaged.
    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor<F>) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls != target.shape() || ls.is_empty() || ls.len() > 2 {
            return Err(NnError::shape("cross_entropy", &ls, target.shape()));
        }
        let classes = *ls.last().unwrap();
        let src = self.value(logits).data();
        let rows = src.len() / classes;
        let mut total = F::zero();
        for (row, y) in src.chunks(classes).zip(target.data().chunks(classes)) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            for (&v, &t) in row.iter().zip(y) {
                total = total + t * (lse - v);
            }
        }
        let value = Tensor::scalar(total / F::lit(rows as f64));
        let op = Op::CrossEntropy {
            logits: logits.0,
            target: target.data().to_vec(),
        };
        self.push("cross_entropy", value, op, &[logits.0])
    }

    /// `-sum(target * ln(max(p, eps)))` over probabilities `p`.
    pub fn nll_clamped(&mut self, p: Var, target: &Tensor<F>, eps: F) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape() != target.shape() {
            return Err(NnError::shape("nll_clamped", pv.shape(), target.shape()));
        }
        let total: F = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&q, &t)| if t == F::zero() { F::zero() } else { -t * q.max(eps).ln() })
            .sum();
        let op = Op::NllClamped {
            p: p.0,
            target: target.data().to_vec(),
            eps,
        };
        self.push("nll_clamped", Tensor::scalar(total), op, &[p.0])
    }

    /// Smallest |input| over all ReLU nodes, `None` without ReLUs.
    pub fn relu_margin(&self) -> Option<F> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(&self.nodes[x].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|v| v.abs()))
            .fold(None, |acc: Option<F>, v| Some(acc.map_or(v, |a| a.min(v))))
    }

    /// Hash of every branch taken at a non-differentiable point (ReLU gates,
    /// L1 signs, probability clamps). Two evaluations with equal signatures
    /// lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[*x].value.data() {
                        fnv_mix(&mut hash, v > F::zero());
                    }
                }
                Op::L1(a, b) => {
                    let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    for (&p, &q) in av.iter().zip(bv) {
                        fnv_mix(&mut hash, p > q);
                    }
                }
                Op::NllClamped { p, eps, .. } => {
                    for &v in self.nodes[*p].value.data() {
                        fnv_mix(&mut hash, v > *eps);
                    }
                }
                _ => {}
            }
        }
        hash
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(NnError::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[F]) {
        let Graph { nodes, grads, .. } = self;
        let node = &nodes[i];
        let val = |j: usize| nodes[j].value.data();
        let shape = |j: usize| nodes[j].value.shape();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv1d { x, w, b, stride } => {
                let (c_in, t_in) = (shape(x)[0], shape(x)[1]);
                let (c_out, k) = (shape(w)[0], shape(w)[2]);
                let t_out = shape(i)[1];
                let gm = MatRef::new(g, c_out, t_out);
                let need_w = nodes[w].needs_grad;
                let need_x = nodes[x].needs_grad;
                if need_w {
                    let cols = im2col(val(x), c_in, t_in, k, stride, t_out);
                    let dw = slot(grads, nodes, w).unwrap();
                    gemm(F::one(), gm, MatRef::new(&cols, c_in * k, t_out).t(), F::one(), dw);
                }
                if let Some(db) = slot(grads, nodes, b) {
                    for (acc, row) in db.iter_mut().zip(g.chunks(t_out)) {
                        *acc = *acc + row.iter().copied().sum();
                    }
                }
                if need_x {
                    let mut dcols = vec![F::zero(); c_in * k * t_out];
                    gemm(
                        F::one(),
                        MatRef::new(val(w), c_out, c_in * k).t(),
                        gm,
                        F::zero(),
                        &mut dcols,
                    );
                    let dx = slot(grads, nodes, x).unwrap();
                    col2im_add(&dcols, dx, c_in, t_in, k, stride, t_out);
                }
            }
            &Op::Linear { x, w, b } => {
                let (d_out, d_in) = (shape(w)[0], shape(w)[1]);
                let rows = g.len() / d_out;
                let gm = MatRef::new(g, rows, d_out);
                if let Some(dx) = slot(grads, nodes, x) {
                    gemm(F::one(), gm, MatRef::new(val(w), d_out, d_in), F::one(), dx);
                }
                if let Some(dw) = slot(grads, nodes, w) {
                    gemm(F::one(), gm.t(), MatRef::new(val(x), rows, d_in), F::one(), dw);
                }
                if let Some(db) = slot(grads, nodes, b) {
                    for row in g.chunks(d_out) {
                        db.iter_mut().zip(row).for_each(|(acc, &v)| *acc = *acc + v);
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (shape(a)[0], shape(a)[1]);
                let n = shape(b)[1];
                let gm = MatRef::new(g, m, n);
                if let Some(da) = slot(grads, nodes, a) {
                    gemm(F::one(), gm, MatRef::new(val(b), k, n).t(), F::one(), da);
                }
                if let Some(db) = slot(grads, nodes, b) {
                    gemm(F::one(), MatRef::new(val(a), m, k).t(), gm, F::one(), db);
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (shape(x)[0], shape(x)[1]);
                if let Some(dx) = slot(grads, nodes, x) {
                    for a in 0..r {
                        for b in 0..c {
                            dx[a * c + b] = dx[a * c + b] + g[b * r + a];
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(dx) = slot(grads, nodes, x) {
                    add_into(dx, g);
                }
            }
            &Op::Relu(x) => {
                let xv = val(x);
                if let Some(dx) = slot(grads, nodes, x) {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > F::zero() {
                            *d = *d + gv;
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(dx) = slot(grads, nodes, x) {
                    for ((d, &gv), &s) in dx.iter_mut().zip(g).zip(y) {
                        *d = *d + gv * s * (F::one() - s);
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(dx) = slot(grads, nodes, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv * c);
                }
            }
            &Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, dim, inner) = split_axis(node.value.shape(), axis);
                if let Some(dx) = slot(grads, nodes, x) {
                    for o in 0..outer {
                        for inn in 0..inner {
                            let idx = |d: usize| (o * dim + d) * inner + inn;
                            let dot: F = (0..dim).map(|d| g[idx(d)] * y[idx(d)]).sum();
                            for d in 0..dim {
                                let j = idx(d);
                                dx[j] = dx[j] + y[j] * (g[j] - dot);
                            }
                        }
                    }
                }
            }
            &Op::Concat { a, b, axis } => {
                let (outer, da, inner) = split_axis(shape(a), axis);
                let db_len = shape(b)[axis];
                let out_row = (da + db_len) * inner;
                if let Some(ga) = slot(grads, nodes, a) {
                    for o in 0..outer {
                        let src = &g[o * out_row..o * out_row + da * inner];
                        add_into(&mut ga[o * da * inner..(o + 1) * da * inner], src);
                    }
                }
                if let Some(gb) = slot(grads, nodes, b) {
                    for o in 0..outer {
                        let src = &g[o * out_row + da * inner..(o + 1) * out_row];
                        add_into(&mut gb[o * db_len * inner..(o + 1) * db_len * inner], src);
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(da) = slot(grads, nodes, a) {
                    add_into(da, g);
                }
                if let Some(db) = slot(grads, nodes, b) {
                    add_into(db, g);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if let Some(da) = slot(grads, nodes, a) {
                    for ((d, &gv), &q) in da.iter_mut().zip(g).zip(bv) {
                        *d = *d + gv * q;
                    }
                }
                if let Some(db) = slot(grads, nodes, b) {
                    for ((d, &gv), &p) in db.iter_mut().zip(g).zip(av) {
                        *d = *d + gv * p;
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = slot(grads, nodes, x) {
                    dx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            &Op::Mean(x) => {
                let n = F::lit(nodes[x].value.len() as f64);
                if let Some(dx) = slot(grads, nodes, x) {
                    let gv = g[0] / n;
                    dx.iter_mut().for_each(|d| *d = *d + gv);
                }
            }
            &Op::MeanAxis { x, axis } => {
                let (outer, dim, inner) = split_axis(shape(x), axis);
                let norm = F::lit(dim as f64);
                if let Some(dx) = slot(grads, nodes, x) {
                    for o in 0..outer {
                        let gsrc = &g[o * inner..(o + 1) * inner];
                        for d in 0..dim {
                            let row = &mut dx[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                            row.iter_mut().zip(gsrc).for_each(|(r, &gv)| *r = *r + gv / norm);
                        }
                    }
                }
            }
            &Op::L1(a, b) => {
                let n = F::lit(nodes[a].value.len() as f64);
                let signs: Vec<F> = val(a)
                    .iter()
                    .zip(val(b))
                    .map(|(&p, &q)| {
                        if p > q {
                            g[0] / n
                        } else if p < q {
                            -g[0] / n
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                if let Some(da) = slot(grads, nodes, a) {
                    add_into(da, &signs);
                }
                if let Some(db) = slot(grads, nodes, b) {
                    db.iter_mut().zip(&signs).for_each(|(d, &s)| *d = *d - s);
                }
            }
            Op::CrossEntropy { logits, target } => {
                let logits = *logits;
                let classes = *shape(logits).last().unwrap();
                let src = val(logits);
                let rows = src.len() / classes;
                let scale = g[0] / F::lit(rows as f64);
                let mut local = vec![F::zero(); src.len()];
                for ((row, y), out) in src.chunks(classes).zip(target.chunks(classes)).zip(local.chunks_mut(classes)) {
                    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                    let total: F = row.iter().map(|&v| (v - max).exp()).sum();
                    let mass: F = y.iter().copied().sum();
                    for ((o, &v), &t) in out.iter_mut().zip(row).zip(y) {
                        *o = scale * ((v - max).exp() / total * mass - t);
                    }
                }
                if let Some(dx) = slot(grads, nodes, logits) {
                    add_into(dx, &local);
                }
            }
            Op::NllClamped { p, target, eps } => {
                let (p, eps) = (*p, *eps);
                let local: Vec<F> = val(p)
                    .iter()
                    .zip(target)
                    .map(|(&q, &t)| if q > eps && t != F::zero() { -g[0] * t / q } else { F::zero() })
                    .collect();
                if let Some(dp) = slot(grads, nodes, p) {
                    add_into(dp, &local);
                }
            }
            #[cfg(test)]
            &Op::Faulty(x) => {
                if let Some(dx) = slot(grads, nodes, x) {
                    // forward doubles, backward deliberately triples
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv * F::lit(3.0));
                }
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn faulty_double(&mut self, x: Var) -> Result<Var> {
        self.map("faulty", x, |v| v * F::lit(2.0), Op::Faulty(x.0))
    }
}

fn slot<'a, F: Real>(grads: &'a mut [Option<Vec<F>>], nodes: &[Node<F>], idx: usize) -> Option<&'a mut [F]> {
    if !nodes[idx].needs_grad {
        return None;
    }
    let len = nodes[idx].value.len();
    Some(grads[idx].get_or_insert_with(|| vec![F::zero(); len]).as_mut_slice())
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}
