use std::cell::RefCell;
use std::rc::Rc;

use crate::ops::{self, ConvGeometry, Taps};
use crate::{shape_err, Result, Scalar, Tensor};

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
        /// Column matrices per batch item, kept only when the kernel needs a
        /// gradient and the input is not pointwise.
        cols: Option<Vec<T>>,
    },
    Relu(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    LogSigmoid(usize),
    Sigmoid(usize),
    LogSoftmax(usize),
    Softmax(usize),
    SelectChannel(usize, Rc<Vec<usize>>),
    Concat { parts: Vec<usize>, axis: usize },
    Upsample { x: usize, ty: Taps, tx: Taps },
    Sum(usize),
    WeightedSum(usize, Rc<Tensor<T>>),
    SumPerItem(usize),
    MatMulNT(usize, usize),
    RowNormalize(usize),
    NchwToRows(usize),
    GatherRows(usize, Rc<Vec<usize>>),
    Take(usize, Rc<Vec<usize>>),
    RowSum(usize),
}

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of evaluated operations.
pub struct Graph<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar = f32> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`; `None` when the loss does not depend on it through
    /// any differentiable path.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn push_shared(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Concatenation of rank-4 variables along `axis` (0 = batch, 1 = channel).
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs, axis)?;
        let requires = parts.iter().any(|p| self.requires(p.id));
        let op = if requires {
            Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis }
        } else {
            Op::Leaf
        };
        Ok(self.push(out, op, requires))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_op(&nodes, id, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn backward_op<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let out = &nodes[id].value;
    let needs = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| nodes[i].value.as_ref();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom, cols } => {
            let (n, co, oh, ow) = out.dims4()?;
            let ohw = oh * ow;
            let ckk = geom.col_rows();
            let wv = val(*w);
            let gd = g.data();
            if let Some(b) = b.filter(|&b| needs(b)) {
                let mut gb = vec![T::zero(); co];
                for bi in 0..n {
                    for (c, acc) in gb.iter_mut().enumerate() {
                        let s: T = gd[(bi * co + c) * ohw..(bi * co + c + 1) * ohw].iter().copied().sum();
                        *acc = *acc + s;
                    }
                }
                accumulate(grads, b, Tensor::from_vec(&[co], gb)?);
            }
            if needs(*w) {
                let mut gw = vec![T::zero(); co * ckk];
                let xv = val(*x);
                let in_len = geom.channels * geom.height * geom.width;
                for bi in 0..n {
                    let cols_b: &[T] = if geom.is_pointwise() {
                        &xv.data()[bi * in_len..(bi + 1) * in_len]
                    } else {
                        let c = cols.as_ref().expect("conv columns saved");
                        &c[bi * ckk * ohw..(bi + 1) * ckk * ohw]
                    };
                    // gw[co, ckk] += gout[co, ohw] · cols[ckk, ohw]^T
                    T::gemm(
                        co,
                        ohw,
                        ckk,
                        &gd[bi * co * ohw..(bi + 1) * co * ohw],
                        (ohw, 1),
                        cols_b,
                        (1, ohw),
                        T::one(),
                        &mut gw,
                        (ckk, 1),
                    );
                }
                accumulate(grads, *w, Tensor::from_vec(wv.shape(), gw)?);
            }
            if needs(*x) {
                let in_len = geom.channels * geom.height * geom.width;
                let mut gx = vec![T::zero(); n * in_len];
                let mut gcols = vec![T::zero(); ckk * ohw];
                for bi in 0..n {
                    let dst = &mut gx[bi * in_len..(bi + 1) * in_len];
                    // gcols[ckk, ohw] = W^T · gout
                    let target: &mut [T] = if geom.is_pointwise() { dst } else { &mut gcols };
                    T::gemm(
                        ckk,
                        co,
                        ohw,
                        wv.data(),
                        (1, ckk),
                        &gd[bi * co * ohw..(bi + 1) * co * ohw],
                        (ohw, 1),
                        T::zero(),
                        target,
                        (ohw, 1),
                    );
                    if !geom.is_pointwise() {
                        ops::col2im_add(&gcols, geom, &mut gx[bi * in_len..(bi + 1) * in_len]);
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(val(*x).shape(), gx)?);
            }
        }
        Op::Relu(x) => {
            let gx = g.zip_map(out, |g, o| if o > T::zero() { g } else { T::zero() })?;
            accumulate(grads, *x, gx);
        }
        Op::Add(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.clone());
            }
            if needs(*b) {
                accumulate(grads, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.clone());
            }
            if needs(*b) {
                accumulate(grads, *b, g.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.zip_map(val(*b), |g, v| g * v)?);
            }
            if needs(*b) {
                accumulate(grads, *b, g.zip_map(val(*a), |g, v| g * v)?);
            }
        }
        Op::Scale(x, s) => {
            let s = *s;
            accumulate(grads, *x, g.map(|v| v * s));
        }
        Op::AddScalar(x) => accumulate(grads, *x, g.clone()),
        Op::Exp(x) => accumulate(grads, *x, g.zip_map(out, |g, o| g * o)?),
        Op::Ln(x) => accumulate(grads, *x, g.zip_map(val(*x), |g, v| g / v)?),
        Op::LogSigmoid(x) => {
            accumulate(grads, *x, g.zip_map(val(*x), |g, v| g * ops::sigmoid(-v))?)
        }
        Op::Sigmoid(x) => {
            accumulate(grads, *x, g.zip_map(out, |g, o| g * o * (T::one() - o))?)
        }
        Op::LogSoftmax(x) => {
            let (n, c, h, w) = out.dims4()?;
            let hw = h * w;
            let (gd, od) = (g.data(), out.data());
            let mut gx = vec![T::zero(); gd.len()];
            for b in 0..n {
                let base = b * c * hw;
                for p in 0..hw {
                    let mut total = T::zero();
                    for ch in 0..c {
                        total = total + gd[base + ch * hw + p];
                    }
                    for ch in 0..c {
                        let i = base + ch * hw + p;
                        gx[i] = gd[i] - od[i].exp() * total;
                    }
                }
            }
            accumulate(grads, *x, Tensor::from_vec(out.shape(), gx)?);
        }
        Op::Softmax(x) => {
            let (n, c, h, w) = out.dims4()?;
            let hw = h * w;
            let (gd, od) = (g.data(), out.data());
            let mut gx = vec![T::zero(); gd.len()];
            for b in 0..n {
                let base = b * c * hw;
                for p in 0..hw {
                    let mut dot = T::zero();
                    for ch in 0..c {
                        let i = base + ch * hw + p;
                        dot = dot + gd[i] * od[i];
                    }
                    for ch in 0..c {
                        let i = base + ch * hw + p;
                        gx[i] = od[i] * (gd[i] - dot);
                    }
                }
            }
            accumulate(grads, *x, Tensor::from_vec(out.shape(), gx)?);
        }
        Op::SelectChannel(x, idx) => {
            let xv = val(*x);
            let (n, c, h, w) = xv.dims4()?;
            let hw = h * w;
            let mut gx = vec![T::zero(); xv.len()];
            for b in 0..n {
                for p in 0..hw {
                    gx[(b * c + idx[b * hw + p]) * hw + p] = g.data()[b * hw + p];
                }
            }
            accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx)?);
        }
        Op::Concat { parts, axis } => {
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let (_, pc, _, _) = pv.dims4()?;
                let (pn, _, _, _) = pv.dims4()?;
                let (start, end) = if *axis == 0 { (offset, offset + pn) } else { (offset, offset + pc) };
                offset = end;
                if needs(p) {
                    let part = if *axis == 0 { g.batch_range(start, end)? } else { g.channel_range(start, end)? };
                    accumulate(grads, p, part);
                }
            }
        }
        Op::Upsample { x, ty, tx } => {
            let xv = val(*x);
            let (n, c, h, w) = xv.dims4()?;
            let (oh, ow) = (ty.lo.len(), tx.lo.len());
            let mut gx = vec![T::zero(); xv.len()];
            for plane in 0..n * c {
                ops::bilinear_plane_adjoint(
                    &g.data()[plane * oh * ow..(plane + 1) * oh * ow],
                    w,
                    ty,
                    tx,
                    &mut gx[plane * h * w..(plane + 1) * h * w],
                );
            }
            accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx)?);
        }
        Op::Sum(x) => {
            let s = g.item();
            accumulate(grads, *x, Tensor::full(val(*x).shape(), s));
        }
        Op::WeightedSum(x, weights) => {
            let s = g.item();
            accumulate(grads, *x, weights.map(|w| w * s));
        }
        Op::SumPerItem(x) => {
            let xv = val(*x);
            let n = xv.shape()[0];
            let inner = xv.len() / n.max(1);
            let mut gx = Vec::with_capacity(xv.len());
            for b in 0..n {
                gx.extend(std::iter::repeat_n(g.data()[b], inner));
            }
            accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx)?);
        }
        Op::MatMulNT(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = av.dims2()?;
            let (n, _) = bv.dims2()?;
            if needs(*a) {
                // ga[m,k] = g[m,n] · b[n,k]
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, g.data(), (n, 1), bv.data(), (k, 1), T::zero(), &mut ga, (k, 1));
                accumulate(grads, *a, Tensor::from_vec(&[m, k], ga)?);
            }
            if needs(*b) {
                // gb[n,k] = g^T[n,m] · a[m,k]
                let mut gb = vec![T::zero(); n * k];
                T::gemm(n, m, k, g.data(), (1, n), av.data(), (k, 1), T::zero(), &mut gb, (k, 1));
                accumulate(grads, *b, Tensor::from_vec(&[n, k], gb)?);
            }
        }
        Op::RowNormalize(x) => {
            let xv = val(*x);
            let (m, k) = xv.dims2()?;
            let mut gx = vec![T::zero(); m * k];
            for r in 0..m {
                let row = &xv.data()[r * k..(r + 1) * k];
                let y = &out.data()[r * k..(r + 1) * k];
                let gr = &g.data()[r * k..(r + 1) * k];
                let norm = row_norm(row);
                let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..k {
                    gx[r * k + j] = (gr[j] - y[j] * dot) / norm;
                }
            }
            accumulate(grads, *x, Tensor::from_vec(&[m, k], gx)?);
        }
        Op::NchwToRows(x) => {
            let xv = val(*x);
            let (n, d, h, w) = xv.dims4()?;
            let hw = h * w;
            let mut gx = vec![T::zero(); xv.len()];
            for b in 0..n {
                for p in 0..hw {
                    for c in 0..d {
                        gx[(b * d + c) * hw + p] = g.data()[(b * hw + p) * d + c];
                    }
                }
            }
            accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx)?);
        }
        Op::GatherRows(x, idx) => {
            let xv = val(*x);
            let (m, k) = xv.dims2()?;
            let mut gx = vec![T::zero(); m * k];
            for (r, &src) in idx.iter().enumerate() {
                for j in 0..k {
                    gx[src * k + j] = gx[src * k + j] + g.data()[r * k + j];
                }
            }
            accumulate(grads, *x, Tensor::from_vec(&[m, k], gx)?);
        }
        Op::Take(x, idx) => {
            let xv = val(*x);
            let mut gx = vec![T::zero(); xv.len()];
            for (r, &src) in idx.iter().enumerate() {
                gx[src] = gx[src] + g.data()[r];
            }
            accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx)?);
        }
        Op::RowSum(x) => {
            let xv = val(*x);
            let (m, n) = xv.dims2()?;
            let mut gx = Vec::with_capacity(m * n);
            for r in 0..m {
                gx.extend(std::iter::repeat_n(g.data()[r], n));
            }
            accumulate(grads, *x, Tensor::from_vec(&[m, n], gx)?);
        }
    }
    Ok(())
}

fn row_norm<T: Scalar>(row: &[T]) -> T {
    let floor = T::from_f64(1e-12);
    row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor)
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    /// Same value, cut from the gradient path.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.push_shared(self.value(), false)
    }

    fn unary(&self, out: Tensor<T>, op: impl FnOnce(usize) -> Op<T>) -> Var<'g, T> {
        let requires = self.requires_grad();
        let op = if requires { op(self.id) } else { Op::Leaf };
        self.graph.push(out, op, requires)
    }

    fn binary(&self, other: Var<'g, T>, out: Tensor<T>, op: impl FnOnce(usize, usize) -> Op<T>) -> Var<'g, T> {
        let requires = self.requires_grad() || other.requires_grad();
        let op = if requires { op(self.id, other.id) } else { Op::Leaf };
        self.graph.push(out, op, requires)
    }

    /// 2-D convolution. `weight` is `[Co, Ci, kh, kw]`, `bias` is `[Co]`.
    pub fn conv2d(&self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let xv = self.value();
        let wv = weight.value();
        let (n, ci, h, w) = xv.dims4()?;
        let (co, wci, kh, kw) = wv.dims4()?;
        if wci != ci {
            return Err(shape_err!("conv2d: input has {ci} channels, kernel expects {wci}"));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err!("conv2d: kernel {kh}x{kw} (stride {stride}, pad {pad}) does not fit {h}x{w}"));
        }
        let bv = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [co] {
                    return Err(shape_err!("conv2d: bias shape {:?}, expected [{co}]", bv.shape()));
                }
                Some(bv)
            }
            None => None,
        };
        let geom = ConvGeometry { channels: ci, height: h, width: w, kernel_h: kh, kernel_w: kw, stride, pad };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let (ohw, ckk, in_len) = (oh * ow, geom.col_rows(), ci * h * w);
        let requires = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        let keep_cols = weight.requires_grad() && !geom.is_pointwise();
        let mut saved = if keep_cols { vec![T::zero(); n * ckk * ohw] } else { Vec::new() };
        let mut scratch = if !keep_cols && !geom.is_pointwise() { vec![T::zero(); ckk * ohw] } else { Vec::new() };
        let mut out = vec![T::zero(); n * co * ohw];
        for b in 0..n {
            let x_b = &xv.data()[b * in_len..(b + 1) * in_len];
            let cols: &[T] = if geom.is_pointwise() {
                x_b
            } else if keep_cols {
                let dst = &mut saved[b * ckk * ohw..(b + 1) * ckk * ohw];
                ops::im2col(x_b, &geom, dst);
                dst
            } else {
                ops::im2col(x_b, &geom, &mut scratch);
                &scratch
            };
            let out_b = &mut out[b * co * ohw..(b + 1) * co * ohw];
            if let Some(bv) = &bv {
                for (c, chunk) in out_b.chunks_exact_mut(ohw).enumerate() {
                    chunk.fill(bv.data()[c]);
                }
            }
            let beta = if bv.is_some() { T::one() } else { T::zero() };
            T::gemm(co, ckk, ohw, wv.data(), (ckk, 1), cols, (ohw, 1), beta, out_b, (ohw, 1));
        }
        let out = Tensor::from_vec(&[n, co, oh, ow], out)?;
        let op = if requires {
            Op::Conv2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), geom, cols: keep_cols.then_some(saved) }
        } else {
            Op::Leaf
        };
        Ok(self.graph.push(out, op, requires))
    }

    pub fn relu(&self) -> Var<'g, T> {
        let out = self.value().map(|v| v.max(T::zero()));
        self.unary(out, Op::Relu)
    }

    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let out = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self.binary(other, out, Op::Add))
    }

    pub fn sub(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let out = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self.binary(other, out, Op::Sub))
    }

    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let out = self.value().zip_map(&other.value(), |a, b| a * b)?;
        Ok(self.binary(other, out, Op::Mul))
    }

    pub fn scale(&self, s: T) -> Var<'g, T> {
        let out = self.value().map(|v| v * s);
        self.unary(out, |x| Op::Scale(x, s))
    }

    pub fn neg(&self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, s: T) -> Var<'g, T> {
        let out = self.value().map(|v| v + s);
        self.unary(out, Op::AddScalar)
    }

    pub fn exp(&self) -> Var<'g, T> {
        let out = self.value().map(|v| v.exp());
        self.unary(out, Op::Exp)
    }

    pub fn ln(&self) -> Var<'g, T> {
        let out = self.value().map(|v| v.ln());
        self.unary(out, Op::Ln)
    }

    /// `ln(sigmoid(x))`, stable for large `|x|`.
    pub fn log_sigmoid(&self) -> Var<'g, T> {
        let out = self.value().map(ops::log_sigmoid);
        self.unary(out, Op::LogSigmoid)
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        let out = self.value().map(ops::sigmoid);
        self.unary(out, Op::Sigmoid)
    }

    /// Log-softmax over the channel axis of an NCHW tensor.
    pub fn log_softmax(&self) -> Result<Var<'g, T>> {
        let out = log_softmax_channels(&self.value())?;
        Ok(self.unary(out, Op::LogSoftmax))
    }

    /// Softmax over the channel axis of an NCHW tensor.
    pub fn softmax(&self) -> Result<Var<'g, T>> {
        let out = log_softmax_channels(&self.value())?.map(|v| v.exp());
        Ok(self.unary(out, Op::Softmax))
    }

    /// Picks channel `index[b*H*W + p]` at every pixel: `[N,C,H,W] -> [N,1,H,W]`.
    pub fn select_channel(&self, index: &[usize]) -> Result<Var<'g, T>> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4()?;
        let hw = h * w;
        if index.len() != n * hw {
            return Err(shape_err!("select_channel: {} indices for {n}x{h}x{w} pixels", index.len()));
        }
        let mut out = Vec::with_capacity(n * hw);
        for b in 0..n {
            for p in 0..hw {
                let ch = index[b * hw + p];
                if ch >= c {
                    return Err(shape_err!("select_channel: index {ch} out of range for {c} channels"));
                }
                out.push(xv.data()[(b * c + ch) * hw + p]);
            }
        }
        let out = Tensor::from_vec(&[n, 1, h, w], out)?;
        let index = Rc::new(index.to_vec());
        Ok(self.unary(out, |x| Op::SelectChannel(x, index)))
    }

    /// Bilinear resize (half-pixel centers) of an NCHW tensor.
    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Result<Var<'g, T>> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4()?;
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return Err(shape_err!("upsample of empty plane"));
        }
        let (ty, tx) = (Taps::new(h, out_h), Taps::new(w, out_w));
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        for plane in 0..n * c {
            ops::bilinear_plane(
                &xv.data()[plane * h * w..(plane + 1) * h * w],
                w,
                &ty,
                &tx,
                &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w],
            );
        }
        let out = Tensor::from_vec(&[n, c, out_h, out_w], out)?;
        Ok(self.unary(out, |x| Op::Upsample { x, ty, tx }))
    }

    pub fn sum(&self) -> Var<'g, T> {
        let out = Tensor::scalar(self.value().sum());
        self.unary(out, Op::Sum)
    }

    pub fn mean(&self) -> Var<'g, T> {
        let n = T::from_f64(self.value().len() as f64);
        self.sum().scale(T::one() / n)
    }

    /// `Σ_i weights_i · x_i` with constant weights.
    pub fn weighted_sum(&self, weights: &Tensor<T>) -> Result<Var<'g, T>> {
        let xv = self.value();
        if xv.len() != weights.len() {
            return Err(shape_err!("weighted_sum: {} weights for {} values", weights.len(), xv.len()));
        }
        let total = xv.data().iter().zip(weights.data()).map(|(&x, &w)| x * w).sum();
        let weights = Rc::new(weights.clone().reshape(xv.shape())?);
        Ok(self.unary(Tensor::scalar(total), |x| Op::WeightedSum(x, weights)))
    }

    /// Sum over every axis but the first: `[N, ...] -> [N]`.
    pub fn sum_per_item(&self) -> Var<'g, T> {
        let xv = self.value();
        let n = xv.shape()[0];
        let inner = xv.len() / n.max(1);
        let out: Vec<T> = (0..n).map(|b| xv.data()[b * inner..(b + 1) * inner].iter().copied().sum()).collect();
        let out = Tensor::from_vec(&[n], out).expect("length n");
        self.unary(out, Op::SumPerItem)
    }

    /// `self · other^T` for `[m,k]` and `[n,k]`.
    pub fn matmul_nt(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (av, bv) = (self.value(), other.value());
        let (m, k) = av.dims2()?;
        let (n, k2) = bv.dims2()?;
        if k != k2 {
            return Err(shape_err!("matmul_nt: inner dims {k} vs {k2}"));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, av.data(), (k, 1), bv.data(), (1, k), T::zero(), &mut out, (n, 1));
        let out = Tensor::from_vec(&[m, n], out)?;
        Ok(self.binary(other, out, Op::MatMulNT))
    }

    /// Scales each row of a `[m,k]` tensor to unit L2 norm.
    pub fn row_normalize(&self) -> Result<Var<'g, T>> {
        let out = normalize_rows(&self.value())?;
        Ok(self.unary(out, Op::RowNormalize))
    }

    /// `[N,D,H,W] -> [N*H*W, D]`, one row per pixel in batch-major order.
    pub fn nchw_to_rows(&self) -> Result<Var<'g, T>> {
        let out = nchw_to_rows(&self.value())?;
        Ok(self.unary(out, Op::NchwToRows))
    }

    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'g, T>> {
        let xv = self.value();
        let (m, k) = xv.dims2()?;
        let mut out = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            if r >= m {
                return Err(shape_err!("gather_rows: row {r} out of range for {m}"));
            }
            out.extend_from_slice(&xv.data()[r * k..(r + 1) * k]);
        }
        let out = Tensor::from_vec(&[rows.len(), k], out)?;
        let rows = Rc::new(rows.to_vec());
        Ok(self.unary(out, |x| Op::GatherRows(x, rows)))
    }

    /// Flat gather: `out[r] = self.data[index[r]]`.
    pub fn take(&self, index: &[usize]) -> Result<Var<'g, T>> {
        let xv = self.value();
        let mut out = Vec::with_capacity(index.len());
        for &i in index {
            out.push(*xv.data().get(i).ok_or_else(|| shape_err!("take: index {i} out of range"))?);
        }
        let out = Tensor::from_vec(&[index.len()], out)?;
        let index = Rc::new(index.to_vec());
        Ok(self.unary(out, |x| Op::Take(x, index)))
    }

    /// `[m,n] -> [m]`.
    pub fn row_sum(&self) -> Result<Var<'g, T>> {
        let xv = self.value();
        let (m, n) = xv.dims2()?;
        let out: Vec<T> = (0..m).map(|r| xv.data()[r * n..(r + 1) * n].iter().copied().sum()).collect();
        let out = Tensor::from_vec(&[m], out)?;
        Ok(self.unary(out, Op::RowSum))
    }
}

/// Log-softmax over the channel axis, on plain tensors.
pub(crate) fn log_softmax_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut max = T::neg_infinity();
            for ch in 0..c {
                max = max.max(xd[base + ch * hw + p]);
            }
            let mut total = T::zero();
            for ch in 0..c {
                total = total + (xd[base + ch * hw + p] - max).exp();
            }
            let lse = max + total.ln();
            for ch in 0..c {
                out[base + ch * hw + p] = xd[base + ch * hw + p] - lse;
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

pub(crate) fn normalize_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = x.dims2()?;
    let mut out = x.data().to_vec();
    for r in 0..m {
        let row = &mut out[r * k..(r + 1) * k];
        let norm = row_norm(row);
        row.iter_mut().for_each(|v| *v = *v / norm);
    }
    Tensor::from_vec(&[m, k], out)
}

pub(crate) fn nchw_to_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, h, w) = x.dims4()?;
    let hw = h * w;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for c in 0..d {
            for p in 0..hw {
                out[(b * hw + p) * d + c] = x.data()[(b * d + c) * hw + p];
            }
        }
    }
    Tensor::from_vec(&[n * hw, d], out)
}

impl<T: Scalar> Tensor<T> {
    /// Softmax over the channel axis of an NCHW tensor.
    pub fn softmax_channels(&self) -> Result<Self> {
        Ok(log_softmax_channels(self)?.map(|v| v.exp()))
    }

    pub fn log_softmax_channels(&self) -> Result<Self> {
        log_softmax_channels(self)
    }

    /// Unit-L2 rows of a `[m,k]` tensor.
    pub fn normalize_rows(&self) -> Result<Self> {
        normalize_rows(self)
    }

    /// `[N,D,H,W] -> [N*H*W, D]`.
    pub fn nchw_to_rows(&self) -> Result<Self> {
        nchw_to_rows(self)
    }
}
