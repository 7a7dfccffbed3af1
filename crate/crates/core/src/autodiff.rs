//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation executed through a [`Var`] appends one node to its
//! [`Tape`]. [`Tape::backward`] walks the nodes in exact reverse order and
//! accumulates vector-Jacobian products into the inputs that require
//! gradients. A tape supports a single backward pass.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Float, MatView, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;
const L2_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool, batch: usize },
    Add { a: usize, b: usize },
    AddSuffix { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: F },
    Relu { a: usize },
    Gelu { a: usize },
    Exp { a: usize },
    Softmax { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<F>, rstd: Vec<F> },
    L2Normalize { a: usize, norms: Vec<F> },
    Sum { a: usize },
    Mean { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Expand { a: usize },
    Embedding { table: usize, ids: Vec<usize> },
    GatherCols { a: usize, idx: Vec<usize> },
    MaskFill { a: usize, mask: Vec<bool> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<F: Float> {
    nodes: RefCell<Vec<Node<F>>>,
    consumed: Cell<bool>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> fmt::Debug for Tape<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t, F: Float> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Float> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var<'_, F>) -> Option<Tensor<F>> {
        self.grads
            .get(v.id)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::raw(self.shapes[v.id].clone(), g.clone()))
    }

    pub fn get_or_zeros(&self, v: Var<'_, F>) -> Tensor<F> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf participating in differentiation.
    pub fn var(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Back-propagates from the scalar `loss`. Consumes the tape.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss was not produced on this tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::State("tape already consumed by a backward pass".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![F::ONE]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn acc<'g, F: Float>(grads: &'g mut [Option<Vec<F>>], id: usize, len: usize) -> &'g mut Vec<F> {
    grads[id].get_or_insert_with(|| vec![F::ZERO; len])
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop_node<F: Float>(nodes: &[Node<F>], id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let node = &nodes[id];
    let rg = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb, batch } => {
            let (a, b, ta, tb, batch) = (*a, *b, *ta, *tb, *batch);
            let av = val(a);
            let bv = val(b);
            let (ar, ac) = mat_dims(av.shape());
            let (br, bc) = mat_dims(bv.shape());
            let (m, n) = mat_dims(node.value.shape());
            let sa = ar * ac;
            let sb = br * bc;
            let sc = m * n;
            let b_batched = bv.shape().len() == 3;
            for bi in 0..batch {
                let gv = MatView::new(&g[bi * sc..(bi + 1) * sc], m, n);
                let amat = MatView::new(&av.data()[bi * sa..(bi + 1) * sa], ar, ac);
                let boff = if b_batched { bi * sb } else { 0 };
                let bmat = MatView::new(&bv.data()[boff..boff + sb], br, bc);
                let opa = if ta { amat.t() } else { amat };
                let opb = if tb { bmat.t() } else { bmat };
                if rg(a) {
                    let ga = acc(grads, a, av.len());
                    let dst = &mut ga[bi * sa..(bi + 1) * sa];
                    if ta {
                        gemm(opb, gv.t(), F::ONE, dst);
                    } else {
                        gemm(gv, opb.t(), F::ONE, dst);
                    }
                }
                if rg(b) {
                    let gb = acc(grads, b, bv.len());
                    let dst = &mut gb[boff..boff + sb];
                    if tb {
                        gemm(gv.t(), opa, F::ONE, dst);
                    } else {
                        gemm(opa.t(), gv, F::ONE, dst);
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for &i in [a, b] {
                if rg(i) {
                    add_into(acc(grads, i, g.len()), g);
                }
            }
        }
        Op::AddSuffix { a, b } => {
            if rg(*a) {
                add_into(acc(grads, *a, g.len()), g);
            }
            if rg(*b) {
                let n = val(*b).len();
                let gb = acc(grads, *b, n);
                for chunk in g.chunks_exact(n) {
                    add_into(gb, chunk);
                }
            }
        }
        Op::Mul { a, b } => {
            let (a, b) = (*a, *b);
            if rg(a) {
                let bv = val(b).data();
                let ga = acc(grads, a, g.len());
                for ((d, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                    *d += gi * bi;
                }
            }
            if rg(b) {
                let av = val(a).data();
                let gb = acc(grads, b, g.len());
                for ((d, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                    *d += gi * ai;
                }
            }
        }
        Op::Scale { a, c } => {
            let ga = acc(grads, *a, g.len());
            for (d, &gi) in ga.iter_mut().zip(g) {
                *d += gi * *c;
            }
        }
        Op::Relu { a } => {
            let x = val(*a).data();
            let ga = acc(grads, *a, g.len());
            for ((d, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                if xi > F::ZERO {
                    *d += gi;
                }
            }
        }
        Op::Gelu { a } => {
            let x = val(*a).data();
            let ga = acc(grads, *a, g.len());
            for ((d, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                *d += gi * gelu_grad(xi);
            }
        }
        Op::Exp { a } => {
            let y = node.value.data();
            let ga = acc(grads, *a, g.len());
            for ((d, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                *d += gi * yi;
            }
        }
        Op::Softmax { a } => {
            let y = node.value.data();
            let dlast = node.value.last_dim();
            let ga = acc(grads, *a, g.len());
            for ((dst, gy), yy) in ga.chunks_exact_mut(dlast).zip(g.chunks_exact(dlast)).zip(y.chunks_exact(dlast)) {
                let dot: F = gy.iter().zip(yy).map(|(&p, &q)| p * q).sum();
                for ((d, &gi), &yi) in dst.iter_mut().zip(gy).zip(yy) {
                    *d += yi * (gi - dot);
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let dn = val(*gain).len();
            let gainv = val(*gain).data();
            let inv_d = F::from_f64(1.0 / dn as f64);
            if rg(*gain) {
                let gg = acc(grads, *gain, dn);
                for (gy, xh) in g.chunks_exact(dn).zip(xhat.chunks_exact(dn)) {
                    for ((d, &gi), &h) in gg.iter_mut().zip(gy).zip(xh) {
                        *d += gi * h;
                    }
                }
            }
            if rg(*bias) {
                let gb = acc(grads, *bias, dn);
                for gy in g.chunks_exact(dn) {
                    add_into(gb, gy);
                }
            }
            if rg(*x) {
                let gx = acc(grads, *x, g.len());
                let mut dxhat = vec![F::ZERO; dn];
                for (r, ((dst, gy), xh)) in gx
                    .chunks_exact_mut(dn)
                    .zip(g.chunks_exact(dn))
                    .zip(xhat.chunks_exact(dn))
                    .enumerate()
                {
                    for ((dh, &gi), &gn) in dxhat.iter_mut().zip(gy).zip(gainv) {
                        *dh = gi * gn;
                    }
                    let mean_dh: F = dxhat.iter().copied().sum::<F>() * inv_d;
                    let mean_dhx: F = dxhat.iter().zip(xh).map(|(&p, &q)| p * q).sum::<F>() * inv_d;
                    let rs = rstd[r];
                    for ((d, &dh), &h) in dst.iter_mut().zip(&dxhat).zip(xh) {
                        *d += rs * (dh - mean_dh - h * mean_dhx);
                    }
                }
            }
        }
        Op::L2Normalize { a, norms } => {
            let y = node.value.data();
            let dlast = node.value.last_dim();
            let ga = acc(grads, *a, g.len());
            for (r, ((dst, gy), yy)) in ga
                .chunks_exact_mut(dlast)
                .zip(g.chunks_exact(dlast))
                .zip(y.chunks_exact(dlast))
                .enumerate()
            {
                let n = norms[r];
                if n.to_f64() > L2_EPS {
                    let dot: F = gy.iter().zip(yy).map(|(&p, &q)| p * q).sum();
                    for ((d, &gi), &yi) in dst.iter_mut().zip(gy).zip(yy) {
                        *d += (gi - yi * dot) / n;
                    }
                } else {
                    for (d, &gi) in dst.iter_mut().zip(gy) {
                        *d += gi / n;
                    }
                }
            }
        }
        Op::Sum { a } => {
            let n = val(*a).len();
            for d in acc(grads, *a, n).iter_mut() {
                *d += g[0];
            }
        }
        Op::Mean { a } => {
            let n = val(*a).len();
            let s = g[0] / F::from_f64(n as f64);
            for d in acc(grads, *a, n).iter_mut() {
                *d += s;
            }
        }
        Op::Concat { parts, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let width = pv.shape()[*axis] * inner;
                if rg(p) {
                    let gp = acc(grads, p, pv.len());
                    for o in 0..outer {
                        add_into(&mut gp[o * width..(o + 1) * width], &g[o * total + offset..o * total + offset + width]);
                    }
                }
                offset += width;
            }
        }
        Op::Slice { a, axis, start } => {
            let av = val(*a);
            let ishape = av.shape();
            let outer: usize = ishape[..*axis].iter().product();
            let inner: usize = ishape[*axis + 1..].iter().product();
            let in_w = ishape[*axis] * inner;
            let out_w = node.value.shape()[*axis] * inner;
            let ga = acc(grads, *a, av.len());
            for o in 0..outer {
                let base = o * in_w + start * inner;
                add_into(&mut ga[base..base + out_w], &g[o * out_w..(o + 1) * out_w]);
            }
        }
        Op::Reshape { a } => add_into(acc(grads, *a, g.len()), g),
        Op::Permute { a, perm } => {
            // Scatter back through the inverse permutation.
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let gshape = node.value.shape();
            let back = permute_data(g, gshape, &inv);
            add_into(acc(grads, *a, g.len()), &back);
        }
        Op::Expand { a } => {
            let n = val(*a).len();
            let ga = acc(grads, *a, n);
            for chunk in g.chunks_exact(n) {
                add_into(ga, chunk);
            }
        }
        Op::Embedding { table, ids } => {
            let tv = val(*table);
            let d = tv.last_dim();
            let gt = acc(grads, *table, tv.len());
            for (r, &id) in ids.iter().enumerate() {
                add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
            }
        }
        Op::GatherCols { a, idx } => {
            let av = val(*a);
            let din = av.last_dim();
            let r = idx.len();
            let ga = acc(grads, *a, av.len());
            for (dst, gy) in ga.chunks_exact_mut(din).zip(g.chunks_exact(r)) {
                for (&j, &gi) in idx.iter().zip(gy) {
                    dst[j] += gi;
                }
            }
        }
        Op::MaskFill { a, mask } => {
            let ga = acc(grads, *a, g.len());
            for ((d, &gi), &m) in ga.iter_mut().zip(g).zip(mask) {
                if !m {
                    *d += gi;
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let k = val(*logits).last_dim();
            let scale = g[0] / F::from_f64(targets.len() as f64);
            let gl = acc(grads, *logits, probs.len());
            for (r, (dst, p)) in gl.chunks_exact_mut(k).zip(probs.chunks_exact(k)).enumerate() {
                for (j, (d, &pj)) in dst.iter_mut().zip(p).enumerate() {
                    let onehot = if j == targets[r] { F::ONE } else { F::ZERO };
                    *d += scale * (pj - onehot);
                }
            }
        }
    }
}

/// Last two extents of a 2D or 3D tensor.
fn mat_dims(shape: &[usize]) -> (usize, usize) {
    let n = shape.len();
    (shape[n - 2], shape[n - 1])
}

fn gelu<F: Float>(x: F) -> F {
    let xf = x.to_f64();
    let u = GELU_C * (xf + GELU_A * xf * xf * xf);
    F::from_f64(0.5 * xf * (1.0 + u.tanh()))
}

fn gelu_grad<F: Float>(x: F) -> F {
    let xf = x.to_f64();
    let u = GELU_C * (xf + GELU_A * xf * xf * xf);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * xf * xf);
    F::from_f64(0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * du)
}

/// Row-major permutation of axes: output axis `i` is input axis `perm[i]`.
fn permute_data<F: Float>(data: &[F], shape: &[usize], perm: &[usize]) -> Vec<F> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    loop {
        let base: usize = (0..last).map(|i| idx[i] * strides[i]).sum();
        let st = strides[last];
        if st == 1 {
            out.extend_from_slice(&data[base..base + out_shape[last]]);
        } else {
            out.extend((0..out_shape[last]).map(|j| data[base + j * st]));
        }
        // advance all but the innermost axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

impl<'t, F: Float> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn value(&self) -> Tensor<F> {
        self.tape.value(self.id).clone()
    }

    pub fn item(&self) -> F {
        self.tape.value(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t, F>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands live on different tapes".into()))
        }
    }

    fn unary(&self, value: Tensor<F>, op: Op<F>) -> Var<'t, F> {
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        let v = self.tape.value(self.id);
        Tensor::raw(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
    }

    /// Matrix product `self · other`. Accepts `[m,k]·[k,n]`, batched
    /// `[b,m,k]·[b,k,n]`, and `[b,m,k]·[k,n]` with a shared right operand.
    pub fn matmul(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.matmul_impl(other, false, false)
    }

    /// `self · otherᵀ` on the last two axes.
    pub fn matmul_t(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.matmul_impl(other, false, true)
    }

    fn matmul_impl(&self, other: Var<'t, F>, ta: bool, tb: bool) -> Result<Var<'t, F>> {
        self.same_tape(&other)?;
        let value = {
            let av = self.tape.value(self.id);
            let bv = self.tape.value(other.id);
            let (ash, bsh) = (av.shape(), bv.shape());
            let ok_rank = matches!((ash.len(), bsh.len()), (2, 2) | (3, 3) | (3, 2));
            if !ok_rank || (ash.len() == 3 && bsh.len() == 3 && ash[0] != bsh[0]) {
                return Err(Error::Shape(format!("matmul operands {ash:?} and {bsh:?} are incompatible")));
            }
            let batch = if ash.len() == 3 { ash[0] } else { 1 };
            let (ar, ac) = mat_dims(ash);
            let (br, bc) = mat_dims(bsh);
            let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
            let (k2, n) = if tb { (bc, br) } else { (br, bc) };
            if k != k2 {
                return Err(Error::Shape(format!(
                    "matmul inner dimensions differ: {ash:?}{} x {bsh:?}{}",
                    if ta { "ᵀ" } else { "" },
                    if tb { "ᵀ" } else { "" }
                )));
            }
            let mut out = vec![F::ZERO; batch * m * n];
            let b_batched = bsh.len() == 3;
            for bi in 0..batch {
                let amat = MatView::new(&av.data()[bi * ar * ac..(bi + 1) * ar * ac], ar, ac);
                let boff = if b_batched { bi * br * bc } else { 0 };
                let bmat = MatView::new(&bv.data()[boff..boff + br * bc], br, bc);
                gemm(
                    if ta { amat.t() } else { amat },
                    if tb { bmat.t() } else { bmat },
                    F::ZERO,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
            let shape = if ash.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
            (Tensor::raw(shape, out), batch)
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(value.0, Op::MatMul { a: self.id, b: other.id, ta, tb, batch: value.1 }, rg))
    }

    fn zip_same(&self, other: &Var<'t, F>, what: &str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        self.same_tape(other)?;
        let av = self.tape.value(self.id);
        let bv = self.tape.value(other.id);
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("{what}: shapes {:?} and {:?} differ", av.shape(), bv.shape())));
        }
        Ok(Tensor::raw(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
        ))
    }

    pub fn add(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let v = self.zip_same(&other, "add", |x, y| x + y)?;
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(v, Op::Add { a: self.id, b: other.id }, rg))
    }

    /// Adds `other` to every trailing block of `self`; `other.shape` must be
    /// a suffix of `self.shape` (bias rows, positional tables).
    pub fn add_bias(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(&other)?;
        let v = {
            let av = self.tape.value(self.id);
            let bv = self.tape.value(other.id);
            let (ash, bsh) = (av.shape(), bv.shape());
            if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != *bsh {
                return Err(Error::Shape(format!("add_bias: {bsh:?} is not a suffix of {ash:?}")));
            }
            let n = bv.len();
            let mut out = av.data().to_vec();
            for chunk in out.chunks_exact_mut(n) {
                for (o, &b) in chunk.iter_mut().zip(bv.data()) {
                    *o += b;
                }
            }
            Tensor::raw(ash.to_vec(), out)
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(v, Op::AddSuffix { a: self.id, b: other.id }, rg))
    }

    pub fn mul(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let v = self.zip_same(&other, "mul", |x, y| x * y)?;
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(v, Op::Mul { a: self.id, b: other.id }, rg))
    }

    pub fn scale(&self, c: F) -> Var<'t, F> {
        let v = self.map(|x| x * c);
        self.unary(v, Op::Scale { a: self.id, c })
    }

    pub fn relu(&self) -> Var<'t, F> {
        let v = self.map(|x| if x > F::ZERO { x } else { F::ZERO });
        self.unary(v, Op::Relu { a: self.id })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t, F> {
        let v = self.map(gelu);
        self.unary(v, Op::Gelu { a: self.id })
    }

    pub fn exp(&self) -> Var<'t, F> {
        let v = self.map(|x| x.exp());
        self.unary(v, Op::Exp { a: self.id })
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&self) -> Result<Var<'t, F>> {
        let v = {
            let av = self.tape.value(self.id);
            softmax_rows(av.data(), av.last_dim()).map(|d| Tensor::raw(av.shape().to_vec(), d))?
        };
        Ok(self.unary(v, Op::Softmax { a: self.id }))
    }

    /// Normalizes each last-axis slice to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: Var<'t, F>, bias: Var<'t, F>, eps: f64) -> Result<Var<'t, F>> {
        self.same_tape(&gain)?;
        self.same_tape(&bias)?;
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (v, xhat, rstd) = {
            let xv = self.tape.value(self.id);
            let gv = self.tape.value(gain.id);
            let bv = self.tape.value(bias.id);
            let d = xv.last_dim();
            if gv.shape() != [d] || bv.shape() != [d] {
                return Err(Error::Shape(format!(
                    "layer_norm over last dim {d} of {:?} got gain {:?}, bias {:?}",
                    xv.shape(),
                    gv.shape(),
                    bv.shape()
                )));
            }
            let rows = xv.rows();
            let mut out = Vec::with_capacity(xv.len());
            let mut xhat = Vec::with_capacity(xv.len());
            let mut rstd = Vec::with_capacity(rows);
            let inv_d = F::from_f64(1.0 / d as f64);
            let eps = F::from_f64(eps);
            for row in xv.data().chunks_exact(d) {
                let mean = row.iter().copied().sum::<F>() * inv_d;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() * inv_d;
                let rs = F::ONE / (var + eps).sqrt();
                rstd.push(rs);
                for ((&x, &gn), &bs) in row.iter().zip(gv.data()).zip(bv.data()) {
                    let h = (x - mean) * rs;
                    xhat.push(h);
                    out.push(h * gn + bs);
                }
            }
            (Tensor::raw(xv.shape().to_vec(), out), xhat, rstd)
        };
        let rg = self.tape.rg(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(v, Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, rstd }, rg))
    }

    /// Scales each last-axis slice to unit Euclidean norm.
    pub fn l2_normalize(&self) -> Var<'t, F> {
        let (v, norms) = {
            let av = self.tape.value(self.id);
            let d = av.last_dim();
            let mut norms = Vec::with_capacity(av.rows());
            let mut out = Vec::with_capacity(av.len());
            for row in av.data().chunks_exact(d) {
                let n = row.iter().map(|&x| x * x).sum::<F>().sqrt().max(F::from_f64(L2_EPS));
                norms.push(n);
                out.extend(row.iter().map(|&x| x / n));
            }
            (Tensor::raw(av.shape().to_vec(), out), norms)
        };
        self.unary(v, Op::L2Normalize { a: self.id, norms })
    }

    pub fn sum(&self) -> Var<'t, F> {
        let s = self.tape.value(self.id).data().iter().copied().sum::<F>();
        self.unary(Tensor::scalar(s), Op::Sum { a: self.id })
    }

    pub fn mean(&self) -> Var<'t, F> {
        let s = {
            let v = self.tape.value(self.id);
            v.data().iter().copied().sum::<F>() / F::from_f64(v.len() as f64)
        };
        self.unary(Tensor::scalar(s), Op::Mean { a: self.id })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        for p in parts {
            first.same_tape(p)?;
        }
        let v = {
            let nodes = tape.nodes.borrow();
            let base = nodes[first.id].value.shape().to_vec();
            if axis >= base.len() {
                return Err(Error::Shape(format!("concat axis {axis} out of range for {base:?}")));
            }
            let mut total = 0;
            for p in parts {
                let s = nodes[p.id].value.shape();
                let same_rank = s.len() == base.len();
                if !same_rank || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                    return Err(Error::Shape(format!("concat: {s:?} vs {base:?} along axis {axis}")));
                }
                total += s[axis];
            }
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let pv = &nodes[p.id].value;
                    let w = pv.shape()[axis] * inner;
                    out.extend_from_slice(&pv.data()[o * w..(o + 1) * w]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::raw(shape, out)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.rg(&ids);
        Ok(tape.push(v, Op::Concat { parts: ids, axis }, rg))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, F>> {
        let v = {
            let av = self.tape.value(self.id);
            let sh = av.shape();
            if axis >= sh.len() || len == 0 || start + len > sh[axis] {
                return Err(Error::Shape(format!("slice {start}..{} on axis {axis} of {sh:?}", start + len)));
            }
            let outer: usize = sh[..axis].iter().product();
            let inner: usize = sh[axis + 1..].iter().product();
            let in_w = sh[axis] * inner;
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let b = o * in_w + start * inner;
                out.extend_from_slice(&av.data()[b..b + len * inner]);
            }
            let mut shape = sh.to_vec();
            shape[axis] = len;
            Tensor::raw(shape, out)
        };
        Ok(self.unary(v, Op::Slice { a: self.id, axis, start }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, F>> {
        let v = self.tape.value(self.id).clone().reshaped(shape)?;
        Ok(self.unary(v, Op::Reshape { a: self.id }))
    }

    /// Axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, F>> {
        let v = {
            let av = self.tape.value(self.id);
            let sh = av.shape();
            let mut seen = vec![false; sh.len()];
            if perm.len() != sh.len() || perm.iter().any(|&p| p >= sh.len() || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::Shape(format!("invalid permutation {perm:?} for {sh:?}")));
            }
            let shape: Vec<usize> = perm.iter().map(|&p| sh[p]).collect();
            Tensor::raw(shape, permute_data(av.data(), sh, perm))
        };
        Ok(self.unary(v, Op::Permute { a: self.id, perm: perm.to_vec() }))
    }

    /// 2D transpose.
    pub fn transpose(&self) -> Result<Var<'t, F>> {
        self.permute(&[1, 0])
    }

    /// Stacks `times` copies along a new leading axis.
    pub fn expand(&self, times: usize) -> Result<Var<'t, F>> {
        if times == 0 {
            return Err(Error::Shape("expand by zero".into()));
        }
        let v = {
            let av = self.tape.value(self.id);
            let mut shape = vec![times];
            shape.extend_from_slice(av.shape());
            let mut out = Vec::with_capacity(av.len() * times);
            for _ in 0..times {
                out.extend_from_slice(av.data());
            }
            Tensor::raw(shape, out)
        };
        Ok(self.unary(v, Op::Expand { a: self.id }))
    }

    /// Row lookup into a `[vocab, d]` table; result is `[ids.len(), d]`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'t, F>> {
        let v = {
            let tv = self.tape.value(self.id);
            if tv.shape().len() != 2 {
                return Err(Error::Shape(format!("embedding table must be 2D, got {:?}", tv.shape())));
            }
            let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
            if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
                return Err(Error::Data(format!("token id {bad} out of range for vocabulary of {vocab}")));
            }
            if ids.is_empty() {
                return Err(Error::Shape("embedding lookup of zero ids".into()));
            }
            let mut out = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                out.extend_from_slice(tv.row(i));
            }
            Tensor::raw(vec![ids.len(), d], out)
        };
        Ok(self.unary(v, Op::Embedding { table: self.id, ids: ids.to_vec() }))
    }

    /// Selects last-axis columns `idx` (in the given order).
    pub fn gather_cols(&self, idx: &[usize]) -> Result<Var<'t, F>> {
        let v = {
            let av = self.tape.value(self.id);
            let d = av.last_dim();
            if idx.is_empty() || idx.iter().any(|&j| j >= d) {
                return Err(Error::Shape(format!("column indices {idx:?} invalid for last dim {d}")));
            }
            let mut out = Vec::with_capacity(av.rows() * idx.len());
            for row in av.data().chunks_exact(d) {
                out.extend(idx.iter().map(|&j| row[j]));
            }
            let mut shape = av.shape().to_vec();
            *shape.last_mut().unwrap() = idx.len();
            Tensor::raw(shape, out)
        };
        Ok(self.unary(v, Op::GatherCols { a: self.id, idx: idx.to_vec() }))
    }

    /// Replaces entries where `mask` is true with `value`; those entries pass
    /// no gradient.
    pub fn mask_fill(&self, mask: &[bool], value: F) -> Result<Var<'t, F>> {
        let v = {
            let av = self.tape.value(self.id);
            if mask.len() != av.len() {
                return Err(Error::Shape(format!("mask of {} for tensor of {}", mask.len(), av.len())));
            }
            let data = av.data().iter().zip(mask).map(|(&x, &m)| if m { value } else { x }).collect();
            Tensor::raw(av.shape().to_vec(), data)
        };
        Ok(self.unary(v, Op::MaskFill { a: self.id, mask: mask.to_vec() }))
    }

    /// Mean softmax cross-entropy of `[n, K]` logits against class targets.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t, F>> {
        let (loss, probs) = {
            let lv = self.tape.value(self.id);
            if lv.shape().len() != 2 || lv.shape()[0] != targets.len() {
                return Err(Error::Shape(format!(
                    "cross_entropy logits {:?} with {} targets",
                    lv.shape(),
                    targets.len()
                )));
            }
            let k = lv.shape()[1];
            if let Some(&t) = targets.iter().find(|&&t| t >= k) {
                return Err(Error::Data(format!("target class {t} out of range for {k} classes")));
            }
            let probs = softmax_rows(lv.data(), k)?;
            let mut total = 0.0f64;
            for (r, row) in lv.data().chunks_exact(k).enumerate() {
                let m = row.iter().copied().fold(row[0], F::max);
                let lse = m.to_f64() + row.iter().map(|&x| (x - m).exp().to_f64()).sum::<f64>().ln();
                total += lse - row[targets[r]].to_f64();
            }
            (F::from_f64(total / targets.len() as f64), probs)
        };
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: self.id, targets: targets.to_vec(), probs },
        ))
    }
}

/// Row-wise stable softmax.
pub fn softmax_rows<F: Float>(data: &[F], d: usize) -> Result<Vec<F>> {
    if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("softmax input contains {bad}")));
    }
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(d) {
        let m = row.iter().copied().fold(row[0], F::max);
        let start = out.len();
        out.extend(row.iter().map(|&x| (x - m).exp()));
        let s: F = out[start..].iter().copied().sum();
        for v in &mut out[start..] {
            *v = *v / s;
        }
    }
    Ok(out)
}
