//! Reverse-mode automatic differentiation over a recorded computation.
//!
//! A [`Graph`] is a single recording context. Every operation appends a node
//! holding its forward value and the inputs needed for its vector-Jacobian
//! product. Node ids are assigned in creation order, so replaying ids in
//! reverse is a valid topological order for [`Graph::backward`].

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{matmul_into, squared_norm, Tensor};
use crate::error::{shape_err, Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    id: usize,
}

/// Geometry of a same-padded, stride-1 2-D convolution over NHWC input.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    height: usize,
    width: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    DivByScalar(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    SumAll(Var),
    MeanAll(Var),
    RowSum(Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    NegSquaredDistance(Var, Var),
    Cosine {
        queries: Var,
        keys: Var,
        q_norms: Vec<f64>,
        k_norms: Vec<f64>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    consumed: bool,
}

/// A single-threaded recording context.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    inner: RefCell<Inner>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(Inner::default()),
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id {
            return Err(Error::State(format!(
                "variable belongs to recording {} but was used in recording {}",
                v.graph, self.id
            )));
        }
        Ok(())
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::State("recording already consumed by backward".into()));
        }
        inner.nodes.push(Node { value, op });
        Ok(Var {
            graph: self.id,
            id: inner.nodes.len() - 1,
        })
    }

    /// A leaf that receives no gradient entry.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf).expect("constant on consumed recording")
    }

    /// A named leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&self, name: &str, value: Tensor) -> Result<Var> {
        let v = self.push(value, Op::Leaf)?;
        let mut inner = self.inner.borrow_mut();
        if inner.params.iter().any(|(n, _)| n == name) {
            return Err(Error::State(format!("parameter {name} registered twice")));
        }
        inner.params.push((name.to_string(), v.id));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.inner.borrow().nodes[v.id].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.inner.borrow().nodes[v.id].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn with_values<R>(&self, vars: &[Var], f: impl FnOnce(&[&Tensor]) -> R) -> Result<R> {
        for &v in vars {
            self.check(v)?;
        }
        let inner = self.inner.borrow();
        let vals: Vec<&Tensor> = vars.iter().map(|v| &inner.nodes[v.id].value).collect();
        Ok(f(&vals))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Tensor> {
        let (sa, sb) = self.with_values(&[a, b], |v| (v[0].shape().to_vec(), v[1].shape().to_vec()))?;
        if sa != sb {
            return shape_err(format!("{what}: {sa:?} vs {sb:?}"));
        }
        Ok(Tensor::zeros(&sa))
    }

    fn elementwise(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let mut out = self.same_shape(a, b, what)?;
        self.with_values(&[a, b], |v| {
            for ((o, &x), &y) in out.data_mut().iter_mut().zip(v[0].data()).zip(v[1].data()) {
                *o = f(x, y);
            }
        })?;
        self.push(out, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Adds a length-`c` row to every row of an `r x c` input.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = self.with_values(&[a, row], |v| {
            let (x, r) = (v[0], v[1]);
            let c = x.cols();
            if r.len() != c || x.ndim() < 2 {
                return shape_err(format!("add_row: {:?} + row {:?}", x.shape(), r.shape()));
            }
            let mut out = x.clone();
            for chunk in out.data_mut().chunks_mut(c) {
                for (o, &b) in chunk.iter_mut().zip(r.data()) {
                    *o += b;
                }
            }
            Ok(out)
        })??;
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&self, a: Var, k: f64) -> Result<Var> {
        let out = self.with_values(&[a], |v| v[0].map(|x| x * k))?;
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Result<Var> {
        let out = self.with_values(&[a], |v| v[0].map(|x| x + k))?;
        self.push(out, Op::AddScalar(a))
    }

    /// Divides every entry of `a` by the single value held in `s`.
    pub fn div_by_scalar(&self, a: Var, s: Var) -> Result<Var> {
        let out = self.with_values(&[a, s], |v| {
            if v[1].len() != 1 {
                return shape_err(format!("divisor must hold one value, got {:?}", v[1].shape()));
            }
            let d = v[1].data()[0];
            Ok(v[0].map(|x| x / d))
        })??;
        self.push(out, Op::DivByScalar(a, s))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with_values(&[a, b], |v| v[0].matmul(v[1]))??;
        self.push(out, Op::Matmul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.with_values(&[a], |v| v[0].transpose())??;
        self.push(out, Op::Transpose(a))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let out = self.with_values(&[a], |v| v[0].map(|x| x.max(0.0)))?;
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let out = self.with_values(&[a], |v| v[0].map(sigmoid))?;
        self.push(out, Op::Sigmoid(a))
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        let out = self.with_values(&[a], |v| v[0].map(f64::sqrt))?;
        self.push(out, Op::Sqrt(a))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let out = self.with_values(&[a], |v| Tensor::scalar(v[0].sum()))?;
        self.push(out, Op::SumAll(a))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let out = self.with_values(&[a], |v| {
            if v[0].is_empty() {
                return shape_err("mean of an empty tensor");
            }
            Ok(Tensor::scalar(v[0].sum() / v[0].len() as f64))
        })??;
        self.push(out, Op::MeanAll(a))
    }

    /// `r x c` → `r x 1` row sums.
    pub fn row_sum(&self, a: Var) -> Result<Var> {
        let out = self.with_values(&[a], |v| {
            let x = v[0];
            let r = x.rows();
            let data = (0..r).map(|i| x.row(i).iter().sum()).collect();
            Tensor::new(vec![r, 1], data)
        })??;
        self.push(out, Op::RowSum(a))
    }

    pub fn select_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = self.with_values(&[a], |v| {
            let rows = v[0].rows();
            if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
                return shape_err(format!("row {bad} out of range for {rows} rows"));
            }
            Ok(v[0].select_rows(idx))
        })??;
        self.push(out, Op::SelectRows(a, idx.to_vec()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_rows of nothing");
        }
        let out = self.with_values(parts, |v| {
            let tail = v[0].shape()[1..].to_vec();
            let mut data = Vec::new();
            let mut rows = 0;
            for t in v {
                if t.shape()[1..] != tail[..] {
                    return shape_err(format!("concat_rows: {:?} vs {:?}", t.shape(), v[0].shape()));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![rows];
            shape.extend(tail);
            Tensor::new(shape, data)
        })??;
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Joins `r x c1` and `r x c2` into `r x (c1 + c2)`.
    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with_values(&[a, b], |v| {
            let (x, y) = (v[0], v[1]);
            if x.ndim() != 2 || y.ndim() != 2 || x.rows() != y.rows() {
                return shape_err(format!("concat_cols: {:?} vs {:?}", x.shape(), y.shape()));
            }
            let mut data = Vec::with_capacity(x.len() + y.len());
            for i in 0..x.rows() {
                data.extend_from_slice(x.row(i));
                data.extend_from_slice(y.row(i));
            }
            Tensor::new(vec![x.rows(), x.cols() + y.cols()], data)
        })??;
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.with_values(&[a], |v| v[0].clone().reshape(shape.to_vec()))??;
        self.push(out, Op::Reshape(a))
    }

    /// Mean softmax cross-entropy of `B x N` logits against `B` labels.
    ///
    /// A one-axis `N` input is treated as a single row.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = self.with_values(&[logits], |v| {
            let x = v[0];
            if x.is_empty() {
                return shape_err("softmax over empty logits");
            }
            let (b, n) = if x.ndim() == 1 { (1, x.len()) } else { (x.rows(), x.cols()) };
            if labels.len() != b {
                return shape_err(format!("{} labels for {b} logit rows", labels.len()));
            }
            let mut probs = vec![0.0; b * n];
            let mut loss = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                if label >= n {
                    return Err(Error::Index { index: label, len: n });
                }
                let row = &x.data()[i * n..(i + 1) * n];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
                loss += lse - row[label];
                for j in 0..n {
                    probs[i * n + j] = (row[j] - lse).exp();
                }
            }
            Ok((loss / b as f64, probs))
        })??;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// `B x d` queries against `N x d` keys → `B x N` of `-||q - k||^2`.
    pub fn neg_squared_distance(&self, queries: Var, keys: Var) -> Result<Var> {
        let out = self.with_values(&[queries, keys], |v| {
            let (q, k) = (v[0], v[1]);
            if q.ndim() != 2 || k.ndim() != 2 || q.cols() != k.cols() {
                return shape_err(format!("distance: {:?} vs {:?}", q.shape(), k.shape()));
            }
            let (b, n) = (q.rows(), k.rows());
            let mut out = vec![0.0; b * n];
            for i in 0..b {
                for j in 0..n {
                    out[i * n + j] = -super::tensor::squared_distance(q.row(i), k.row(j));
                }
            }
            Tensor::new(vec![b, n], out)
        })??;
        self.push(out, Op::NegSquaredDistance(queries, keys))
    }

    /// `B x d` queries against `N x d` keys → `B x N` cosine similarities.
    pub fn cosine_similarity(&self, queries: Var, keys: Var) -> Result<Var> {
        let (out, qn, kn) = self.with_values(&[queries, keys], |v| {
            let (q, k) = (v[0], v[1]);
            if q.ndim() != 2 || k.ndim() != 2 || q.cols() != k.cols() {
                return shape_err(format!("cosine: {:?} vs {:?}", q.shape(), k.shape()));
            }
            let qn: Vec<f64> = (0..q.rows()).map(|i| squared_norm(q.row(i)).sqrt()).collect();
            let kn: Vec<f64> = (0..k.rows()).map(|i| squared_norm(k.row(i)).sqrt()).collect();
            if let Some(i) = qn.iter().position(|&x| x == 0.0) {
                return Err(Error::Degenerate(format!("query row {i} has zero norm")));
            }
            if let Some(i) = kn.iter().position(|&x| x == 0.0) {
                return Err(Error::Degenerate(format!("key row {i} has zero norm")));
            }
            let (b, n) = (q.rows(), k.rows());
            let mut out = vec![0.0; b * n];
            for i in 0..b {
                for j in 0..n {
                    out[i * n + j] = super::tensor::dot(q.row(i), k.row(j)) / (qn[i] * kn[j]);
                }
            }
            Ok((Tensor::new(vec![b, n], out)?, qn, kn))
        })??;
        self.push(
            out,
            Op::Cosine {
                queries,
                keys,
                q_norms: qn,
                k_norms: kn,
            },
        )
    }

    /// Same-padded stride-1 convolution. Input `B x H x W x Cin`, weight
    /// `kh x kw x Cin x Cout` (odd kernel extents), bias `Cout`.
    pub fn conv2d(&self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (out, geom) = self.with_values(&[input, weight, bias], |v| {
            let (x, w, b) = (v[0], v[1], v[2]);
            if x.ndim() != 4 || w.ndim() != 4 || w.shape()[2] != x.shape()[3] || b.len() != w.shape()[3] {
                return shape_err(format!(
                    "conv2d: input {:?}, weight {:?}, bias {:?}",
                    x.shape(),
                    w.shape(),
                    b.shape()
                ));
            }
            if w.shape()[0] % 2 == 0 || w.shape()[1] % 2 == 0 {
                return shape_err("conv2d kernel extents must be odd");
            }
            let geom = ConvGeom {
                batch: x.shape()[0],
                height: x.shape()[1],
                width: x.shape()[2],
                cin: x.shape()[3],
                cout: w.shape()[3],
                kh: w.shape()[0],
                kw: w.shape()[1],
            };
            let mut out = vec![0.0; geom.batch * geom.height * geom.width * geom.cout];
            conv_forward(x.data(), w.data(), b.data(), &mut out, geom);
            Ok((
                Tensor::new(vec![geom.batch, geom.height, geom.width, geom.cout], out)?,
                geom,
            ))
        })??;
        self.push(out, Op::Conv2d { input, weight, bias, geom })
    }

    /// 2x2 max pooling with stride 2 over `B x H x W x C`; odd trailing rows
    /// and columns are dropped.
    pub fn max_pool2(&self, input: Var) -> Result<Var> {
        let (out, argmax) = self.with_values(&[input], |v| {
            let x = v[0];
            if x.ndim() != 4 || x.shape()[1] < 2 || x.shape()[2] < 2 {
                return shape_err(format!("max_pool2 input {:?}", x.shape()));
            }
            let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0; b * oh * ow * c];
            let mut arg = vec![0; out.len()];
            let xd = x.data();
            for n in 0..b {
                for i in 0..oh {
                    for j in 0..ow {
                        for ch in 0..c {
                            let mut best = usize::MAX;
                            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let idx = ((n * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                                if best == usize::MAX || xd[idx] > xd[best] {
                                    best = idx;
                                }
                            }
                            let o = ((n * oh + i) * ow + j) * c + ch;
                            out[o] = xd[best];
                            arg[o] = best;
                        }
                    }
                }
            }
            Ok((Tensor::new(vec![b, oh, ow, c], out)?, arg))
        })??;
        self.push(out, Op::MaxPool2 { input, argmax })
    }

    /// Gradients of a scalar `loss` with respect to every registered
    /// parameter. Parameters the loss does not depend on map to zeros.
    /// Consumes the recording.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        self.check(loss)?;
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::State("backward called on a consumed recording".into()));
        }
        if inner.nodes[loss.id].value.len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                inner.nodes[loss.id].value.shape()
            ));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            propagate(nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut out = BTreeMap::new();
        for (name, id) in &inner.params {
            let g = grads
                .get_mut(*id)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(nodes[*id].value.shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.id] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn accumulate_with(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let slot = &mut grads[v.id];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape));
    }
    f(slot.as_mut().unwrap().data_mut());
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: Var| &nodes[v.id].value;
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga: Vec<f64> = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
            let gb: Vec<f64> = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
            accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
            accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
        }
        Op::AddRow(a, row) => {
            accumulate(grads, *a, g.clone());
            let rv = val(*row);
            let c = rv.len();
            accumulate_with(grads, *row, rv.shape(), |out| {
                for chunk in gd.chunks(c) {
                    for (o, x) in out.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
            });
        }
        Op::Scale(a, k) => accumulate(grads, *a, g.map(|x| x * k)),
        Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
        Op::DivByScalar(a, s) => {
            let d = val(*s).data()[0];
            accumulate(grads, *a, g.map(|x| x / d));
            let num: f64 = gd.iter().zip(val(*a).data()).map(|(g, x)| g * x).sum();
            accumulate(grads, *s, Tensor::new(val(*s).shape().to_vec(), vec![-num / (d * d)]).unwrap());
        }
        Op::Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            // dA = G Bt, dB = At G
            let bt = bv.transpose().unwrap();
            accumulate_with(grads, *a, av.shape(), |out| matmul_into(gd, bt.data(), out, m, n, k));
            let at = av.transpose().unwrap();
            accumulate_with(grads, *b, bv.shape(), |out| matmul_into(at.data(), gd, out, k, m, n));
        }
        Op::Transpose(a) => accumulate(grads, *a, g.transpose().unwrap()),
        Op::Relu(a) => {
            let av = val(*a);
            let d = gd.iter().zip(av.data()).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
            accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
        }
        Op::Sigmoid(a) => {
            let y = &nodes[id].value;
            let d = gd.iter().zip(y.data()).map(|(g, &s)| g * s * (1.0 - s)).collect();
            accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
        }
        Op::Sqrt(a) => {
            let y = &nodes[id].value;
            let d = gd.iter().zip(y.data()).map(|(g, &s)| g * 0.5 / s).collect();
            accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
        }
        Op::SumAll(a) => accumulate(grads, *a, Tensor::full(val(*a).shape(), gd[0])),
        Op::MeanAll(a) => {
            let av = val(*a);
            accumulate(grads, *a, Tensor::full(av.shape(), gd[0] / av.len() as f64));
        }
        Op::RowSum(a) => {
            let av = val(*a);
            let c = av.cols();
            let d = (0..av.len()).map(|i| gd[i / c]).collect();
            accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
        }
        Op::SelectRows(a, idx) => {
            let av = val(*a);
            let c = av.cols();
            accumulate_with(grads, *a, av.shape(), |out| {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        out[src * c + j] += gd[r * c + j];
                    }
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let pv = val(*p);
                let n = pv.len();
                accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), gd[offset..offset + n].to_vec()).unwrap());
                offset += n;
            }
        }
        Op::ConcatCols(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (ca, cb) = (av.cols(), bv.cols());
            let mut ga = Vec::with_capacity(av.len());
            let mut gb = Vec::with_capacity(bv.len());
            for row in gd.chunks(ca + cb) {
                ga.extend_from_slice(&row[..ca]);
                gb.extend_from_slice(&row[ca..]);
            }
            accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
            accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
        }
        Op::Reshape(a) => {
            accumulate(grads, *a, Tensor::new(val(*a).shape().to_vec(), gd.to_vec()).unwrap());
        }
        Op::SoftmaxCrossEntropy { logits, labels, probs } => {
            let lv = val(*logits);
            let b = labels.len();
            let n = probs.len() / b;
            let scale = gd[0] / b as f64;
            let mut d = probs.clone();
            for (i, &label) in labels.iter().enumerate() {
                d[i * n + label] -= 1.0;
            }
            for x in &mut d {
                *x *= scale;
            }
            accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), d).unwrap());
        }
        Op::NegSquaredDistance(q, k) => {
            let (qv, kv) = (val(*q), val(*k));
            let (b, n, dim) = (qv.rows(), kv.rows(), qv.cols());
            let mut gq = vec![0.0; qv.len()];
            let mut gk = vec![0.0; kv.len()];
            for i in 0..b {
                for j in 0..n {
                    let w = gd[i * n + j];
                    if w == 0.0 {
                        continue;
                    }
                    for t in 0..dim {
                        let diff = qv.data()[i * dim + t] - kv.data()[j * dim + t];
                        gq[i * dim + t] -= 2.0 * w * diff;
                        gk[j * dim + t] += 2.0 * w * diff;
                    }
                }
            }
            accumulate(grads, *q, Tensor::new(qv.shape().to_vec(), gq).unwrap());
            accumulate(grads, *k, Tensor::new(kv.shape().to_vec(), gk).unwrap());
        }
        Op::Cosine { queries, keys, q_norms, k_norms } => {
            let (qv, kv) = (val(*queries), val(*keys));
            let cos = &nodes[id].value;
            let (b, n, dim) = (qv.rows(), kv.rows(), qv.cols());
            let mut gq = vec![0.0; qv.len()];
            let mut gk = vec![0.0; kv.len()];
            for i in 0..b {
                for j in 0..n {
                    let w = gd[i * n + j];
                    if w == 0.0 {
                        continue;
                    }
                    let c = cos.data()[i * n + j];
                    let (nq, nk) = (q_norms[i], k_norms[j]);
                    for t in 0..dim {
                        let x = qv.data()[i * dim + t];
                        let y = kv.data()[j * dim + t];
                        gq[i * dim + t] += w * (y / (nq * nk) - c * x / (nq * nq));
                        gk[j * dim + t] += w * (x / (nq * nk) - c * y / (nk * nk));
                    }
                }
            }
            accumulate(grads, *queries, Tensor::new(qv.shape().to_vec(), gq).unwrap());
            accumulate(grads, *keys, Tensor::new(kv.shape().to_vec(), gk).unwrap());
        }
        Op::Conv2d { input, weight, bias, geom } => {
            let (xv, wv, bv) = (val(*input), val(*weight), val(*bias));
            let mut gx = vec![0.0; xv.len()];
            let mut gw = vec![0.0; wv.len()];
            let mut gb = vec![0.0; bv.len()];
            conv_backward(xv.data(), wv.data(), gd, &mut gx, &mut gw, &mut gb, *geom);
            accumulate(grads, *input, Tensor::new(xv.shape().to_vec(), gx).unwrap());
            accumulate(grads, *weight, Tensor::new(wv.shape().to_vec(), gw).unwrap());
            accumulate(grads, *bias, Tensor::new(bv.shape().to_vec(), gb).unwrap());
        }
        Op::MaxPool2 { input, argmax } => {
            let xv = val(*input);
            accumulate_with(grads, *input, xv.shape(), |out| {
                for (o, &src) in argmax.iter().enumerate() {
                    out[src] += gd[o];
                }
            });
        }
    }
}

fn conv_forward(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64], g: ConvGeom) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    for n in 0..g.batch {
        for i in 0..g.height {
            for j in 0..g.width {
                let o = ((n * g.height + i) * g.width + j) * g.cout;
                out[o..o + g.cout].copy_from_slice(b);
                for di in 0..g.kh {
                    let ii = i as isize + di as isize - ph as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    for dj in 0..g.kw {
                        let jj = j as isize + dj as isize - pw as isize;
                        if jj < 0 || jj >= g.width as isize {
                            continue;
                        }
                        let xi = ((n * g.height + ii as usize) * g.width + jj as usize) * g.cin;
                        let wi = (di * g.kw + dj) * g.cin * g.cout;
                        for c in 0..g.cin {
                            let xv = x[xi + c];
                            let wrow = &w[wi + c * g.cout..wi + (c + 1) * g.cout];
                            for (oc, &wv) in out[o..o + g.cout].iter_mut().zip(wrow) {
                                *oc += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
    g: ConvGeom,
) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    for n in 0..g.batch {
        for i in 0..g.height {
            for j in 0..g.width {
                let o = ((n * g.height + i) * g.width + j) * g.cout;
                let go = &gout[o..o + g.cout];
                for (b, &v) in gb.iter_mut().zip(go) {
                    *b += v;
                }
                for di in 0..g.kh {
                    let ii = i as isize + di as isize - ph as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    for dj in 0..g.kw {
                        let jj = j as isize + dj as isize - pw as isize;
                        if jj < 0 || jj >= g.width as isize {
                            continue;
                        }
                        let xi = ((n * g.height + ii as usize) * g.width + jj as usize) * g.cin;
                        let wi = (di * g.kw + dj) * g.cin * g.cout;
                        for c in 0..g.cin {
                            let xv = x[xi + c];
                            let mut acc = 0.0;
                            for oc in 0..g.cout {
                                gw[wi + c * g.cout + oc] += xv * go[oc];
                                acc += w[wi + c * g.cout + oc] * go[oc];
                            }
                            gx[xi + c] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient map keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Variables bound for one forward pass, keyed by parameter name.
pub type Bound = HashMap<String, Var>;
