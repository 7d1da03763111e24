//! Elementwise tape ops: binary add/mul with size-1 broadcast, unary maps,
//! scalar affine, and full reduction to a scalar.

use super::tape::{Op, Sink, Tape, Vals, Var};
use super::{Element, Tensor};
use crate::{Error, Result};

/// Elementwise op kinds, for callers that dispatch by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwKind {
    Add,
    Mul,
    Silu,
    Sigmoid,
    Relu,
    Softplus,
    Exp,
    Neg,
}

/// Broadcast result shape: equal ranks, each axis equal or 1 on one side.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || y == 1 {
                Ok(x.max(y))
            } else if x == 1 {
                Ok(y)
            } else {
                Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}")))
            }
        })
        .collect()
}

/// Strides for reading `shape` as if it had `out_shape`, 0 on broadcast axes.
fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    for (i, st) in s.iter_mut().enumerate() {
        if shape[i] == 1 && out_shape[i] != 1 {
            *st = 0;
        }
    }
    s
}

/// Applies `f` over the broadcast of `a` and `b`. Same-shape inputs take a
/// contiguous fast path; otherwise an odometer walk with per-input strides.
pub(crate) fn zip_broadcast<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: impl Fn(E, E) -> E,
) -> Result<Tensor<E>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = bcast_strides(a.shape(), &out_shape);
    let sb = bcast_strides(b.shape(), &out_shape);
    let mut out = Tensor::zeros(&out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    let ad = a.data();
    let bd = b.data();
    for o in out.data_mut() {
        *o = f(ad[oa], bd[ob]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
        }
    }
    Ok(out)
}

/// Sums `g` over axes where `target` has extent 1, yielding `target`'s shape.
pub(crate) fn reduce_to<E: Element>(g: &Tensor<E>, target: &[usize]) -> Tensor<E> {
    if g.shape() == target {
        return g.clone();
    }
    let st = bcast_strides(target, g.shape());
    let mut out = Tensor::zeros(target);
    let mut idx = vec![0usize; target.len()];
    let mut ot = 0usize;
    let od = out.data_mut();
    for &v in g.data() {
        od[ot] += v;
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            ot += st[ax];
            if idx[ax] < g.shape()[ax] {
                break;
            }
            idx[ax] = 0;
            ot -= st[ax] * g.shape()[ax];
        }
    }
    out
}

struct AddOp {
    a: usize,
    b: usize,
}

impl<E: Element> Op<E> for AddOp {
    fn backward(&self, vals: &Vals<'_, E>, gy: &Tensor<E>, sink: &mut Sink<'_, E>) {
        for &inp in &[self.a, self.b] {
            let shape = vals.get(inp).shape().to_vec();
            let gi = reduce_to(gy, &shape);
            let slot = sink.slot(inp, &shape);
            for (s, v) in slot.data_mut().iter_mut().zip(gi.data()) {
                *s += *v;
            }
        }
    }
}

struct MulOp {
    a: usize,
    b: usize,
}

impl<E: Element> Op<E> for MulOp {
    fn backward(&self, vals: &Vals<'_, E>, gy: &Tensor<E>, sink: &mut Sink<'_, E>) {
        let (av, bv) = (vals.get(self.a), vals.get(self.b));
        let ga = zip_broadcast(gy, bv, |g, b| g * b).expect("shapes checked at forward");
        let ga = reduce_to(&ga, av.shape());
        {
            let slot = sink.slot(self.a, av.shape());
            for (s, v) in slot.data_mut().iter_mut().zip(ga.data()) {
                *s += *v;
            }
        }
        let gb = zip_broadcast(gy, av, |g, a| g * a).expect("shapes checked at forward");
        let gb = reduce_to(&gb, bv.shape());
        let slot = sink.slot(self.b, bv.shape());
        for (s, v) in slot.data_mut().iter_mut().zip(gb.data()) {
            *s += *v;
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Neg,
    Exp,
    Relu,
    Silu,
    Sigmoid,
    Softplus,
}

impl UnaryKind {
    fn fwd<E: Element>(self, x: E) -> E {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Exp => x.exp(),
            UnaryKind::Relu => x.maxv(E::ZERO),
            UnaryKind::Silu => x * x.sigmoid(),
            UnaryKind::Sigmoid => x.sigmoid(),
            UnaryKind::Softplus => x.softplus(),
        }
    }

    /// d fwd / dx at input x (recomputed, nothing saved on the tape).
    fn dfdx<E: Element>(self, x: E) -> E {
        match self {
            UnaryKind::Neg => -E::ONE,
            UnaryKind::Exp => x.exp(),
            UnaryKind::Relu => {
                if x > E::ZERO {
                    E::ONE
                } else {
                    E::ZERO
                }
            }
            UnaryKind::Silu => {
                let s = x.sigmoid();
                s * (E::ONE + x * (E::ONE - s))
            }
            UnaryKind::Sigmoid => {
                let s = x.sigmoid();
                s * (E::ONE - s)
            }
            UnaryKind::Softplus => x.sigmoid(),
        }
    }
}

struct UnaryOp {
    x: usize,
    kind: UnaryKind,
}

impl<E: Element> Op<E> for UnaryOp {
    fn backward(&self, vals: &Vals<'_, E>, gy: &Tensor<E>, sink: &mut Sink<'_, E>) {
        let xv = vals.get(self.x);
        let slot = sink.slot(self.x, xv.shape());
        for ((s, &g), &x) in slot.data_mut().iter_mut().zip(gy.data()).zip(xv.data()) {
            *s += g * self.kind.dfdx(x);
        }
    }
}

struct AffineOp<E> {
    x: usize,
    mul: E,
}

impl<E: Element> Op<E> for AffineOp<E> {
    fn backward(&self, vals: &Vals<'_, E>, gy: &Tensor<E>, sink: &mut Sink<'_, E>) {
        let shape = vals.get(self.x).shape().to_vec();
        let slot = sink.slot(self.x, &shape);
        for (s, &g) in slot.data_mut().iter_mut().zip(gy.data()) {
            *s += g * self.mul;
        }
    }
}

struct SumAllOp {
    x: usize,
}

impl<E: Element> Op<E> for SumAllOp {
    fn backward(&self, vals: &Vals<'_, E>, gy: &Tensor<E>, sink: &mut Sink<'_, E>) {
        let g = gy.data()[0];
        let shape = vals.get(self.x).shape().to_vec();
        let slot = sink.slot(self.x, &shape);
        for s in slot.data_mut() {
            *s += g;
        }
    }
}

impl<E: Element> Tape<E> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast(self.val(a), self.val(b), |x, y| x + y)?;
        Ok(self.push(v, Some(Box::new(AddOp { a: a.id, b: b.id }))))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast(self.val(a), self.val(b), |x, y| x * y)?;
        Ok(self.push(v, Some(Box::new(MulOp { a: a.id, b: b.id }))))
    }

    fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let v = self.val(x).map(|e| kind.fwd(e));
        self.push(v, Some(Box::new(UnaryOp { x: x.id, kind })))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Neg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Softplus)
    }

    /// y = mul·x + add, elementwise with scalar constants.
    pub fn affine(&mut self, x: Var, mul: E, add: E) -> Var {
        let v = self.val(x).map(|e| mul * e + add);
        self.push(v, Some(Box::new(AffineOp { x: x.id, mul })))
    }

    /// Scalar sum of all entries.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = E::ZERO;
        for &v in self.val(x).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Some(Box::new(SumAllOp { x: x.id })))
    }

    /// Named dispatch over the elementwise kinds. Binary kinds require `b`.
    pub fn elementwise(&mut self, kind: EwKind, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = matches!(kind, EwKind::Add | EwKind::Mul);
        match (kind, b) {
            (EwKind::Add, Some(b)) => self.add(a, b),
            (EwKind::Mul, Some(b)) => self.mul(a, b),
            (EwKind::Silu, None) => Ok(self.silu(a)),
            (EwKind::Sigmoid, None) => Ok(self.sigmoid(a)),
            (EwKind::Relu, None) => Ok(self.relu(a)),
            (EwKind::Softplus, None) => Ok(self.softplus(a)),
            (EwKind::Exp, None) => Ok(self.exp(a)),
            (EwKind::Neg, None) => Ok(self.neg(a)),
            _ => Err(Error::Invalid(format!(
                "elementwise {kind:?} takes {} operands",
                if need_b { 2 } else { 1 }
            ))),
        }
    }
}
