//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! then accumulates gradients of a scalar output with respect to every
//! recorded leaf that was created with `requires_grad`. The forward kernels
//! are the ones in [`crate::tensor`], so a traced computation produces
//! bit-identical values to the plain inference path.

use crate::tensor::{self, Tensor};
use std::cell::{Ref, RefCell};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddBiasRows { m: Var, bias: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Abs { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    RowSoftmax { a: Var },
    LogsumexpRows { a: Var },
    LogsumexpCols { a: Var },
    /// out[i][j] = m[i][j] + v[j]
    AddRowwise { m: Var, v: Var },
    /// out[i][j] = m[i][j] + u[i]
    AddColwise { m: Var, u: Var },
    /// Append one dustbin row and column filled with the scalar `alpha`.
    AugmentDustbin { m: Var, alpha: Var },
    /// rows gathered from a [c, h, w] map at per-row pixel indices
    GatherMap { map: Var, indices: Vec<(usize, usize)> },
    /// entries gathered from a matrix at (row, col) positions
    GatherPairs { m: Var, pairs: Vec<(usize, usize)> },
    Sum { a: Var },
    Mean { a: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The recorded computation of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the swept scalar with respect to `v`; zeros if `v` did
    /// not participate.
    pub fn get(&self, v: Var, shape_hint: &Tensor) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&shape_hint.shape),
        }
    }

    pub fn get_opt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn requires_any(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.requires(v))
    }

    /// A differentiable leaf (model parameter).
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable leaf (input data, labels).
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |nodes| &nodes[v.0].value)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).as_scalar()
    }

    pub fn matmul(&self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            tensor::matmul(&nodes[a.0].value, ta, &nodes[b.0].value, tb)
        };
        let req = self.requires_any(&[a, b]);
        self.push(value, Op::MatMul { a, b, ta, tb }, req)
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            tensor::conv2d(&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value)
        };
        let req = self.requires_any(&[x, w, b]);
        self.push(value, Op::Conv2d { x, w, b }, req)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            tensor::zip_binary(&nodes[a.0].value, &nodes[b.0].value, |x, y| x + y)
        };
        let req = self.requires_any(&[a, b]);
        self.push(value, Op::Add { a, b }, req)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            tensor::zip_binary(&nodes[a.0].value, &nodes[b.0].value, |x, y| x - y)
        };
        let req = self.requires_any(&[a, b]);
        self.push(value, Op::Sub { a, b }, req)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            tensor::zip_binary(&nodes[a.0].value, &nodes[b.0].value, |x, y| x * y)
        };
        let req = self.requires_any(&[a, b]);
        self.push(value, Op::Mul { a, b }, req)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = tensor::map_unary(&self.value(a), |x| x * c);
        let req = self.requires(a);
        self.push(value, Op::Scale { a, c }, req)
    }

    pub fn add_bias_rows(&self, m: Var, bias: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[m.0].value.clone();
            tensor::add_bias_rows_inplace(&mut out, &nodes[bias.0].value);
            out
        };
        let req = self.requires_any(&[m, bias]);
        self.push(value, Op::AddBiasRows { m, bias }, req)
    }

    /// `x · Wᵀ + b`, the per-row affine map used by all MLPs.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Var {
        let prod = self.matmul(x, w, false, true);
        self.add_bias_rows(prod, b)
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = tensor::map_unary(&self.value(a), |x| x.max(0.0));
        let req = self.requires(a);
        self.push(value, Op::Relu { a }, req)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = tensor::map_unary(&self.value(a), |x| 1.0 / (1.0 + (-x).exp()));
        let req = self.requires(a);
        self.push(value, Op::Sigmoid { a }, req)
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = tensor::map_unary(&self.value(a), f64::exp);
        let req = self.requires(a);
        self.push(value, Op::Exp { a }, req)
    }

    pub fn log(&self, a: Var) -> Var {
        let value = tensor::map_unary(&self.value(a), f64::ln);
        let req = self.requires(a);
        self.push(value, Op::Log { a }, req)
    }

    pub fn abs(&self, a: Var) -> Var {
        let value = tensor::map_unary(&self.value(a), f64::abs);
        let req = self.requires(a);
        self.push(value, Op::Abs { a }, req)
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let value = tensor::map_unary(&self.value(a), |x| x.clamp(lo, hi));
        let req = self.requires(a);
        self.push(value, Op::Clamp { a, lo, hi }, req)
    }

    pub fn row_softmax(&self, a: Var) -> Var {
        let value = tensor::row_softmax(&self.value(a));
        let req = self.requires(a);
        self.push(value, Op::RowSoftmax { a }, req)
    }

    pub fn logsumexp_rows(&self, a: Var) -> Var {
        let value = tensor::logsumexp_rows(&self.value(a));
        let req = self.requires(a);
        self.push(value, Op::LogsumexpRows { a }, req)
    }

    pub fn logsumexp_cols(&self, a: Var) -> Var {
        let value = tensor::logsumexp_cols(&self.value(a));
        let req = self.requires(a);
        self.push(value, Op::LogsumexpCols { a }, req)
    }

    pub fn add_rowwise(&self, m: Var, v: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mat = &nodes[m.0].value;
            let vec = &nodes[v.0].value;
            let cols = mat.shape[1];
            assert_eq!(vec.len(), cols);
            let mut out = mat.clone();
            for row in out.data.chunks_mut(cols) {
                for (o, &x) in row.iter_mut().zip(&vec.data) {
                    *o += x;
                }
            }
            out
        };
        let req = self.requires_any(&[m, v]);
        self.push(value, Op::AddRowwise { m, v }, req)
    }

    pub fn add_colwise(&self, m: Var, u: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mat = &nodes[m.0].value;
            let vec = &nodes[u.0].value;
            let (rows, cols) = (mat.shape[0], mat.shape[1]);
            assert_eq!(vec.len(), rows);
            let mut out = mat.clone();
            for (i, row) in out.data.chunks_mut(cols).enumerate() {
                let x = vec.data[i];
                for o in row.iter_mut() {
                    *o += x;
                }
            }
            out
        };
        let req = self.requires_any(&[m, u]);
        self.push(value, Op::AddColwise { m, u }, req)
    }

    pub fn augment_dustbin(&self, m: Var, alpha: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mat = &nodes[m.0].value;
            let a = nodes[alpha.0].value.as_scalar();
            let (r, c) = (mat.shape[0], mat.shape[1]);
            let mut out = Tensor::zeros(&[r + 1, c + 1]);
            for i in 0..r {
                out.data[i * (c + 1)..i * (c + 1) + c].copy_from_slice(&mat.data[i * c..(i + 1) * c]);
                out.data[i * (c + 1) + c] = a;
            }
            for j in 0..=c {
                out.data[r * (c + 1) + j] = a;
            }
            out
        };
        let req = self.requires_any(&[m, alpha]);
        self.push(value, Op::AugmentDustbin { m, alpha }, req)
    }

    /// Gather per-vertex feature rows from a `[c, h, w]` map at integer
    /// pixel positions `(x, y)`; the result is `[k, c]`.
    pub fn gather_map(&self, map: Var, indices: Vec<(usize, usize)>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[map.0].value;
            let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
            let mut out = Tensor::zeros(&[indices.len(), c]);
            for (k, &(x, y)) in indices.iter().enumerate() {
                debug_assert!(x < w && y < h);
                for ch in 0..c {
                    out.data[k * c + ch] = t.data[ch * h * w + y * w + x];
                }
            }
            out
        };
        let req = self.requires(map);
        self.push(value, Op::GatherMap { map, indices }, req)
    }

    /// Gather matrix entries at `(row, col)` positions into a vector.
    pub fn gather_pairs(&self, m: Var, pairs: Vec<(usize, usize)>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[m.0].value;
            let cols = t.shape[1];
            let data = pairs.iter().map(|&(i, j)| t.data[i * cols + j]).collect();
            Tensor {
                shape: vec![pairs.len()],
                data,
            }
        };
        let req = self.requires(m);
        self.push(value, Op::GatherPairs { m, pairs }, req)
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data.iter().sum());
        let req = self.requires(a);
        self.push(value, Op::Sum { a }, req)
    }

    pub fn mean(&self, a: Var) -> Var {
        let value = {
            let t = self.value(a);
            let n = t.len().max(1) as f64;
            Tensor::scalar(t.data.iter().sum::<f64>() / n)
        };
        let req = self.requires(a);
        self.push(value, Op::Mean { a }, req)
    }

    /// Backpropagate from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: nodes[loss.0].value.shape.clone(),
            data: vec![1.0],
        });

        fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], add: impl FnOnce(&mut Tensor)) {
            if slot.is_none() {
                *slot = Some(Tensor::zeros(shape));
            }
            add(slot.as_mut().unwrap());
        }

        for idx in (0..nodes.len()).rev() {
            if !nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            match &nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].requires_grad {
                        let da = match (ta, tb) {
                            (false, false) => tensor::matmul(&gout, false, bv, true),
                            (false, true) => tensor::matmul(&gout, false, bv, false),
                            (true, false) => tensor::matmul(bv, false, &gout, true),
                            (true, true) => tensor::matmul(bv, true, &gout, true),
                        };
                        accumulate(&mut grads[a.0], &av.shape, |g| {
                            for (x, y) in g.data.iter_mut().zip(&da.data) {
                                *x += y;
                            }
                        });
                    }
                    if nodes[b.0].requires_grad {
                        let db = match (ta, tb) {
                            (false, false) => tensor::matmul(av, true, &gout, false),
                            (false, true) => tensor::matmul(&gout, true, av, false),
                            (true, false) => tensor::matmul(av, false, &gout, false),
                            (true, true) => tensor::matmul(&gout, true, av, true),
                        };
                        accumulate(&mut grads[b.0], &bv.shape, |g| {
                            for (x, y) in g.data.iter_mut().zip(&db.data) {
                                *x += y;
                            }
                        });
                    }
                }
                Op::Conv2d { x, w, b } => {
                    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                    let k = wv.shape[2];
                    if nodes[x.0].requires_grad {
                        let dx = tensor::conv2d_input_grad(&gout, wv);
                        accumulate(&mut grads[x.0], &xv.shape, |g| {
                            for (a, b) in g.data.iter_mut().zip(&dx.data) {
                                *a += b;
                            }
                        });
                    }
                    if nodes[w.0].requires_grad {
                        let dw = tensor::conv2d_weight_grad(&gout, xv, k);
                        accumulate(&mut grads[w.0], &wv.shape, |g| {
                            for (a, b) in g.data.iter_mut().zip(&dw.data) {
                                *a += b;
                            }
                        });
                    }
                    if nodes[b.0].requires_grad {
                        let db = tensor::conv2d_bias_grad(&gout);
                        accumulate(&mut grads[b.0], &nodes[b.0].value.shape, |g| {
                            for (a, b) in g.data.iter_mut().zip(&db.data) {
                                *a += b;
                            }
                        });
                    }
                }
                Op::Add { a, b } => {
                    for &v in [a, b].iter() {
                        if nodes[v.0].requires_grad {
                            accumulate(&mut grads[v.0], &nodes[v.0].value.shape, |g| {
                                for (x, y) in g.data.iter_mut().zip(&gout.data) {
                                    *x += y;
                                }
                            });
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if nodes[a.0].requires_grad {
                        accumulate(&mut grads[a.0], &nodes[a.0].value.shape, |g| {
                            for (x, y) in g.data.iter_mut().zip(&gout.data) {
                                *x += y;
                            }
                        });
                    }
                    if nodes[b.0].requires_grad {
                        accumulate(&mut grads[b.0], &nodes[b.0].value.shape, |g| {
                            for (x, y) in g.data.iter_mut().zip(&gout.data) {
                                *x -= y;
                            }
                        });
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].requires_grad {
                        accumulate(&mut grads[a.0], &av.shape, |g| {
                            for ((x, y), z) in g.data.iter_mut().zip(&gout.data).zip(&bv.data) {
                                *x += y * z;
                            }
                        });
                    }
                    if nodes[b.0].requires_grad {
                        accumulate(&mut grads[b.0], &bv.shape, |g| {
                            for ((x, y), z) in g.data.iter_mut().zip(&gout.data).zip(&av.data) {
                                *x += y * z;
                            }
                        });
                    }
                }
                Op::Scale { a, c } => {
                    if nodes[a.0].requires_grad {
                        let c = *c;
                        accumulate(&mut grads[a.0], &nodes[a.0].value.shape, |g| {
                            for (x, y) in g.data.iter_mut().zip(&gout.data) {
                                *x += c * y;
                            }
                        });
                    }
                }
                Op::AddBiasRows { m, bias } => {
                    if nodes[m.0].requires_grad {
                        accumulate(&mut grads[m.0], &nodes[m.0].value.shape, |g| {
                            for (x, y) in g.data.iter_mut().zip(&gout.data) {
                                *x += y;
                            }
                        });
                    }
                    if nodes[bias.0].requires_grad {
                        let cols = nodes[m.0].value.shape[1];
                        accumulate(&mut grads[bias.0], &nodes[bias.0].value.shape, |g| {
                            for row in gout.data.chunks(cols) {
                                for (x, y) in g.data.iter_mut().zip(row) {
                                    *x += y;
                                }
                            }
                        });
                    }
                }
                Op::Relu { a } => {
                    if nodes[a.0].requires_grad {
                        let av = &nodes[a.0].value;
                        accumulate(&mut grads[a.0], &av.shape, |g| {
                            for ((x, y), &v) in g.data.iter_mut().zip(&gout.data).zip(&av.data) {
                                if v > 0.0 {
                                    *x += y;
                                }
                            }
                        });
                    }
                }
                Op::Sigmoid { a } => {
                    if nodes[a.0].requires_grad {
                        let yv = &nodes[idx].value;
                        accumulate(&mut grads[a.0], &nodes[a.0].value.shape, |g| {
                            for ((x, gy), &y) in g.data.iter_mut().zip(&gout.data).zip(&yv.data) {
                                *x += gy * y * (1.0 - y);
                            }
                        });
                    }
                }
                Op::Exp { a } => {
                    if nodes[a.0].requires_grad {
                        let yv = &nodes[idx].value;
                        accumulate(&mut grads[a.0], &nodes[a.0].value.shape, |g| {
                            for ((x, gy), &y) in g.data.iter_mut().zip(&gout.data).zip(&yv.data) {
                                *x += gy * y;
                            }
                        });
                    }
                }
                Op::Log { a } => {
                    if nodes[a.0].requires_grad {
                        let av = &nodes[a.0].value;
                        accumulate(&mut grads[a.0], &av.shape, |g| {
                            for ((x, gy), &v) in g.data.iter_mut().zip(&gout.data).zip(&av.data) {
                                *x += gy / v;
                            }
                        });
                    }
                }
                Op::Abs { a } => {
                    if nodes[a.0].requires_grad {
                        let av = &nodes[a.0].value;
                        accumulate(&mut grads[a.0], &av.shape, |g| {
                            for ((x, gy), &v) in g.data.iter_mut().zip(&gout.data).zip(&av.data) {
                                *x += gy * if v > 0.0 {
                                    1.0
                                } else if v < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                };
                            }
                        });
                    }
                }
                Op::Clamp { a, lo, hi } => {
                    if nodes[a.0].requires_grad {
                        let (lo, hi) = (*lo, *hi);
                        let av = &nodes[a.0].value;
                        accumulate(&mut grads[a.0], &av.shape, |g| {
                            for ((x, gy), &v) in g.data.iter_mut().zip(&gout.data).zip(&av.data) {
                                if v >= lo && v <= hi {
                                    *x += gy;
                                }
                            }
                        });
                    }
                }
                Op::RowSoftmax { a } => {
                    if nodes[a.0].requires_grad {
                        let yv = &nodes[idx].value;
                        let cols = yv.shape[1];
                        accumulate(&mut grads[a.0], &nodes[a.0].value.shape, |g| {
                            for ((grow, yrow), orow) in g
                                .data
                                .chunks_mut(cols)
                                .zip(yv.data.chunks(cols))
                                .zip(gout.data.chunks(cols))
                            {
                                let dot: f64 = yrow.iter().zip(orow).map(|(&y, &o)| y * o).sum();
                                for ((x, &y), &o) in grow.iter_mut().zip(yrow).zip(orow) {
                                    *x += y * (o - dot);
                                }
                            }
                        });
                    }
                }
                Op::LogsumexpRows { a } => {
                    if nodes[a.0].requires_grad {
                        let av = &nodes[a.0].value;
                        let lse = &nodes[idx].value;
                        let cols = av.shape[1];
                        accumulate(&mut grads[a.0], &av.shape, |g| {
                            for (i, (grow, arow)) in g
                                .data
                                .chunks_mut(cols)
                                .zip(av.data.chunks(cols))
                                .enumerate()
                            {
                                let go = gout.data[i];
                                if go == 0.0 {
                                    continue;
                                }
                                let l = lse.data[i];
                                for (x, &v) in grow.iter_mut().zip(arow) {
                                    *x += go * (v - l).exp();
                                }
                            }
                        });
                    }
                }
                Op::LogsumexpCols { a } => {
                    if nodes[a.0].requires_grad {
                        let av = &nodes[a.0].value;
                        let lse = &nodes[idx].value;
                        let cols = av.shape[1];
                        accumulate(&mut grads[a.0], &av.shape, |g| {
                            for (grow, arow) in g.data.chunks_mut(cols).zip(av.data.chunks(cols)) {
                                for ((x, &v), (&go, &l)) in grow
                                    .iter_mut()
                                    .zip(arow)
                                    .zip(gout.data.iter().zip(&lse.data))
                                {
                                    if go != 0.0 {
                                        *x += go * (v - l).exp();
                                    }
                                }
                            }
                        });
                    }
                }
                Op::AddRowwise { m, v } => {
                    let cols = nodes[m.0].value.shape[1];
                    if nodes[m.0].requires_grad {
                        accumulate(&mut grads[m.0], &nodes[m.0].value.shape, |g| {
                            for (x, y) in g.data.iter_mut().zip(&gout.data) {
                                *x += y;
                            }
                        });
                    }
                    if nodes[v.0].requires_grad {
                        accumulate(&mut grads[v.0], &nodes[v.0].value.shape, |g| {
                            for row in gout.data.chunks(cols) {
                                for (x, y) in g.data.iter_mut().zip(row) {
                                    *x += y;
                                }
                            }
                        });
                    }
                }
                Op::AddColwise { m, u } => {
                    let cols = nodes[m.0].value.shape[1];
                    if nodes[m.0].requires_grad {
                        accumulate(&mut grads[m.0], &nodes[m.0].value.shape, |g| {
                            for (x, y) in g.data.iter_mut().zip(&gout.data) {
                                *x += y;
                            }
                        });
                    }
                    if nodes[u.0].requires_grad {
                        accumulate(&mut grads[u.0], &nodes[u.0].value.shape, |g| {
                            for (i, row) in gout.data.chunks(cols).enumerate() {
                                g.data[i] += row.iter().sum::<f64>();
                            }
                        });
                    }
                }
                Op::AugmentDustbin { m, alpha } => {
                    let (r, c) = (nodes[m.0].value.shape[0], nodes[m.0].value.shape[1]);
                    if nodes[m.0].requires_grad {
                        accumulate(&mut grads[m.0], &nodes[m.0].value.shape, |g| {
                            for i in 0..r {
                                for j in 0..c {
                                    g.data[i * c + j] += gout.data[i * (c + 1) + j];
                                }
                            }
                        });
                    }
                    if nodes[alpha.0].requires_grad {
                        let mut da = 0.0;
                        for i in 0..r {
                            da += gout.data[i * (c + 1) + c];
                        }
                        for j in 0..=c {
                            da += gout.data[r * (c + 1) + j];
                        }
                        accumulate(&mut grads[alpha.0], &nodes[alpha.0].value.shape, |g| {
                            g.data[0] += da;
                        });
                    }
                }
                Op::GatherMap { map, indices } => {
                    if nodes[map.0].requires_grad {
                        let t = &nodes[map.0].value;
                        let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
                        accumulate(&mut grads[map.0], &t.shape, |g| {
                            for (k, &(x, y)) in indices.iter().enumerate() {
                                for ch in 0..c {
                                    g.data[ch * h * w + y * w + x] += gout.data[k * c + ch];
                                }
                            }
                        });
                    }
                }
                Op::GatherPairs { m, pairs } => {
                    if nodes[m.0].requires_grad {
                        let cols = nodes[m.0].value.shape[1];
                        accumulate(&mut grads[m.0], &nodes[m.0].value.shape, |g| {
                            for (k, &(i, j)) in pairs.iter().enumerate() {
                                g.data[i * cols + j] += gout.data[k];
                            }
                        });
                    }
                }
                Op::Sum { a } => {
                    if nodes[a.0].requires_grad {
                        let go = gout.data[0];
                        accumulate(&mut grads[a.0], &nodes[a.0].value.shape, |g| {
                            for x in g.data.iter_mut() {
                                *x += go;
                            }
                        });
                    }
                }
                Op::Mean { a } => {
                    if nodes[a.0].requires_grad {
                        let n = nodes[a.0].value.len().max(1) as f64;
                        let go = gout.data[0] / n;
                        accumulate(&mut grads[a.0], &nodes[a.0].value.shape, |g| {
                            for x in g.data.iter_mut() {
                                *x += go;
                            }
                        });
                    }
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    /// Central-difference check of d(scalar)/d(leaf) for every coordinate.
    fn check_gradient(
        build: impl Fn(&Tape, Var) -> Var,
        leaf: &Tensor,
        eps: f64,
        tol: f64,
    ) {
        let tape = Tape::new();
        let p = tape.param(leaf.clone());
        let loss = build(&tape, p);
        let grads = tape.backward(loss);
        let analytic = grads.get(p, leaf);
        for i in 0..leaf.len() {
            let mut plus = leaf.clone();
            plus.data[i] += eps;
            let mut minus = leaf.clone();
            minus.data[i] -= eps;
            let f = |t: &Tensor| {
                let tape = Tape::new();
                let p = tape.param(t.clone());
                let loss = build(&tape, p);
                tape.scalar_value(loss)
            };
            let numeric = (f(&plus) - f(&minus)) / (2.0 * eps);
            let a = analytic.data[i];
            let denom = (a.abs() + numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            assert!(
                rel < tol,
                "coord {i}: analytic {a} vs numeric {numeric} (rel {rel})"
            );
        }
    }

    fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_gradients_all_transpose_flags() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for &(ta, tb) in &[(false, false), (false, true), (true, false), (true, true)] {
            let a_shape = if ta { [4, 3] } else { [3, 4] };
            let b_shape = if tb { [5, 4] } else { [4, 5] };
            let a0 = random_tensor(&mut rng, &a_shape);
            let b0 = random_tensor(&mut rng, &b_shape);
            // Gradient wrt a with b fixed.
            let b_fixed = b0.clone();
            check_gradient(
                move |t, p| {
                    let b = t.constant(b_fixed.clone());
                    let c = t.matmul(p, b, ta, tb);
                    let s = t.mul(c, c);
                    t.sum(s)
                },
                &a0,
                1e-5,
                1e-6,
            );
            let a_fixed = a0.clone();
            check_gradient(
                move |t, p| {
                    let a = t.constant(a_fixed.clone());
                    let c = t.matmul(a, p, ta, tb);
                    let s = t.mul(c, c);
                    t.sum(s)
                },
                &b0,
                1e-5,
                1e-6,
            );
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x0 = random_tensor(&mut rng, &[2, 4, 4]);
        let w0 = random_tensor(&mut rng, &[3, 2, 3, 3]);
        let b0 = random_tensor(&mut rng, &[3]);
        let (w_fixed, b_fixed) = (w0.clone(), b0.clone());
        let x_fixed = x0.clone();
        check_gradient(
            move |t, p| {
                let w = t.constant(w_fixed.clone());
                let b = t.constant(b_fixed.clone());
                let y = t.conv2d(p, w, b);
                let s = t.mul(y, y);
                t.sum(s)
            },
            &x0,
            1e-5,
            1e-6,
        );
        let (x_f2, b_f2) = (x_fixed.clone(), b0.clone());
        check_gradient(
            move |t, p| {
                let x = t.constant(x_f2.clone());
                let b = t.constant(b_f2.clone());
                let y = t.conv2d(x, p, b);
                let s = t.mul(y, y);
                t.sum(s)
            },
            &w0,
            1e-5,
            1e-6,
        );
        check_gradient(
            move |t, p| {
                let x = t.constant(x_fixed.clone());
                let w = t.constant(w0.clone());
                let y = t.conv2d(x, w, p);
                let s = t.mul(y, y);
                t.sum(s)
            },
            &b0,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn softmax_and_logsumexp_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = random_tensor(&mut rng, &[3, 5]);
        check_gradient(
            |t, p| {
                let s = t.row_softmax(p);
                let sq = t.mul(s, s);
                t.sum(sq)
            },
            &m,
            1e-5,
            1e-5,
        );
        check_gradient(
            |t, p| {
                let l = t.logsumexp_rows(p);
                let sq = t.mul(l, l);
                t.sum(sq)
            },
            &m,
            1e-5,
            1e-5,
        );
        check_gradient(
            |t, p| {
                let l = t.logsumexp_cols(p);
                let sq = t.mul(l, l);
                t.sum(sq)
            },
            &m,
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn unary_and_structural_op_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        // Keep values away from relu/abs kinks.
        let m = Tensor::from_fn(&[4, 3], |_| {
            let v: f64 = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        });
        check_gradient(
            |t, p| {
                let r = t.relu(p);
                t.sum(r)
            },
            &m,
            1e-5,
            1e-6,
        );
        check_gradient(
            |t, p| {
                let s = t.sigmoid(p);
                let e = t.exp(s);
                t.mean(e)
            },
            &m,
            1e-5,
            1e-5,
        );
        check_gradient(
            |t, p| {
                let a = t.abs(p);
                let l = t.log(a);
                t.sum(l)
            },
            &m,
            1e-6,
            1e-4,
        );
        let vec = random_tensor(&mut rng, &[3]);
        let fixed = vec.clone();
        check_gradient(
            move |t, p| {
                let v = t.constant(fixed.clone());
                let x = t.add_rowwise(p, v);
                let s = t.mul(x, x);
                t.sum(s)
            },
            &m,
            1e-5,
            1e-6,
        );
        let u = random_tensor(&mut rng, &[4]);
        let m2 = m.clone();
        check_gradient(
            move |t, p| {
                let mat = t.constant(m2.clone());
                let x = t.add_colwise(mat, p);
                let s = t.mul(x, x);
                t.sum(s)
            },
            &u,
            1e-5,
            1e-6,
        );
        let alpha = Tensor::scalar(0.7);
        let m3 = m.clone();
        check_gradient(
            move |t, p| {
                let mat = t.constant(m3.clone());
                let aug = t.augment_dustbin(mat, p);
                let s = t.mul(aug, aug);
                t.sum(s)
            },
            &alpha,
            1e-5,
            1e-6,
        );
        check_gradient(
            |t, p| {
                let g = t.gather_pairs(p, vec![(0, 1), (2, 2), (0, 1)]);
                let s = t.mul(g, g);
                t.sum(s)
            },
            &m,
            1e-5,
            1e-6,
        );
        let map = random_tensor(&mut rng, &[2, 3, 3]);
        check_gradient(
            |t, p| {
                let g = t.gather_map(p, vec![(0, 0), (2, 1), (0, 0)]);
                let s = t.mul(g, g);
                t.sum(s)
            },
            &map,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn unused_parameter_reports_zero_gradient() {
        let tape = Tape::new();
        let used = tape.param(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let unused = tape.param(Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let loss = tape.sum(used);
        let grads = tape.backward(loss);
        assert!(grads.get_opt(unused).is_none());
        let z = grads.get(unused, &Tensor::zeros(&[2]));
        assert_eq!(z.data, vec![0.0, 0.0]);
    }

    #[test]
    fn constants_do_not_propagate_gradients() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let p = tape.param(Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let prod = tape.mul(c, p);
        let loss = tape.sum(prod);
        let grads = tape.backward(loss);
        assert!(grads.get_opt(c).is_none());
        assert_eq!(grads.get_opt(p).unwrap().data, vec![1.0, 2.0]);
    }
}
