use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::conv::{self, ConvGeom};
use super::{ActivationKind, Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        dilation: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine {
        input: usize,
        scale: T,
    },
    Log(usize),
    Sqrt(usize),
    ClampMin {
        input: usize,
        floor: T,
    },
    Activation(usize, ActivationKind),
    Sum(usize),
    Mean(usize),
    AddN(Vec<usize>),
    Expand(usize),
    Concat(Vec<usize>),
    Slice {
        input: usize,
        start: usize,
    },
    Gather {
        input: usize,
        indices: Rc<[usize]>,
    },
    GradScale {
        input: usize,
        factor: T,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of executed operations. Node order is a valid
/// topological order because every node is pushed after its inputs.
pub struct Tape<T: Real> {
    id: usize,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of the differentiable leaves reached by a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: usize,
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(&var.index)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.remove(&var.index)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
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

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn node_value(&self, i: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[i].value)
    }

    fn tracks(&self, i: usize) -> bool {
        self.nodes.borrow()[i].requires_grad
    }

    /// A differentiable leaf (parameter or gradient-check point).
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<Rc<Tensor<T>>> {
        let i = self.check(v)?;
        Ok(self.node_value(i))
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        Ok(self.value(v)?.shape().to_vec())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        let i = self.check(v)?;
        Ok(self.tracks(i))
    }

    /// Stride-1, "same"-padded 3x3 cross-correlation.
    pub fn conv2d_3x3(&self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.conv2d_3x3_dilated(input, weight, bias, 1)
    }

    /// 3x3 cross-correlation with the given dilation and zero padding equal
    /// to it, so the output keeps the input's spatial size.
    pub fn conv2d_3x3_dilated(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dilation: usize,
    ) -> Result<Var> {
        let (ii, wi) = (self.check(input)?, self.check(weight)?);
        let bi = bias.map(|b| self.check(b)).transpose()?;
        if dilation == 0 {
            return Err(Error::shape("conv2d_3x3", "dilation must be >= 1"));
        }
        let x = self.node_value(ii);
        let w = self.node_value(wi);
        let (n, cin, h, wd) = x.dims4()?;
        let (cout, wcin, kh, kw) = w.dims4().map_err(|_| {
            Error::shape("conv2d_3x3", format!("weight must be 4-d, got {:?}", w.shape()))
        })?;
        if wcin != cin || kh != 3 || kw != 3 {
            return Err(Error::shape(
                "conv2d_3x3",
                format!(
                    "weight {:?} incompatible with input {:?}",
                    w.shape(),
                    x.shape()
                ),
            ));
        }
        let b = bi.map(|i| self.node_value(i));
        if let Some(b) = &b {
            if b.shape() != [cout] {
                return Err(Error::shape(
                    "conv2d_3x3",
                    format!("bias {:?} for {cout} output channels", b.shape()),
                ));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            cout,
            h,
            w: wd,
            dilation,
        };
        let mut out = vec![T::zero(); n * cout * h * wd];
        conv::forward(
            geom,
            x.data(),
            w.data(),
            b.as_deref().map(|t| t.data()),
            &mut out,
        );
        let rg = self.tracks(ii) || self.tracks(wi) || bi.is_some_and(|i| self.tracks(i));
        Ok(self.push(
            Tensor::new([n, cout, h, wd], out)?,
            Op::Conv {
                input: ii,
                weight: wi,
                bias: bi,
                dilation,
            },
            rg,
        ))
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (x, y) = (self.node_value(ai), self.node_value(bi));
        if x.shape() != y.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let rg = self.tracks(ai) || self.tracks(bi);
        Ok(self.push(Tensor::new(x.shape(), data)?, op(ai, bi), rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub)
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul)
    }

    /// Element-wise sum of equally shaped inputs. Each output element adds
    /// its terms in ascending value order, so the result is bitwise
    /// independent of argument order.
    pub fn add_n(&self, inputs: &[Var]) -> Result<Var> {
        let idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let vals: Vec<_> = idx.iter().map(|&i| self.node_value(i)).collect();
        let first = vals
            .first()
            .ok_or_else(|| Error::shape("add_n", "no inputs"))?;
        if let Some(bad) = vals.iter().find(|v| v.shape() != first.shape()) {
            return Err(Error::shape(
                "add_n",
                format!("{:?} vs {:?}", bad.shape(), first.shape()),
            ));
        }
        let mut terms = vec![T::zero(); vals.len()];
        let data = (0..first.numel())
            .map(|e| {
                for (t, v) in terms.iter_mut().zip(&vals) {
                    *t = v.data()[e];
                }
                terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                terms.iter().fold(T::zero(), |acc, &t| acc + t)
            })
            .collect();
        let rg = idx.iter().any(|&i| self.tracks(i));
        Ok(self.push(Tensor::new(first.shape(), data)?, Op::AddN(idx), rg))
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        let v = self.node_value(i);
        if v.numel() != 1 {
            return Err(Error::shape(
                "expand",
                format!("only one-element tensors broadcast, got {:?}", v.shape()),
            ));
        }
        Ok(self.push(
            Tensor::full(shape, v.item()),
            Op::Expand(i),
            self.tracks(i),
        ))
    }

    /// `scale * x + shift`.
    pub fn affine(&self, x: Var, scale: T, shift: T) -> Result<Var> {
        let i = self.check(x)?;
        let v = self.node_value(i);
        let out = v.map(|e| scale * e + shift);
        Ok(self.push(out, Op::Affine { input: i, scale }, self.tracks(i)))
    }

    pub fn scale(&self, x: Var, c: T) -> Result<Var> {
        self.affine(x, c, T::zero())
    }

    /// `1 - x`.
    pub fn one_minus(&self, x: Var) -> Result<Var> {
        self.affine(x, -T::one(), T::one())
    }

    /// Natural logarithm; every element must be strictly positive.
    pub fn log(&self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let v = self.node_value(i);
        if let Some((index, &value)) = v.data().iter().enumerate().find(|(_, e)| !(**e > T::zero())) {
            return Err(Error::Domain {
                op: "log",
                index,
                value: value.f64(),
            });
        }
        Ok(self.push(v.map(|e| e.ln()), Op::Log(i), self.tracks(i)))
    }

    /// Square root; elements must be non-negative. The adjoint at 0 is
    /// taken as 0.
    pub fn sqrt(&self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let v = self.node_value(i);
        if let Some((index, &value)) = v.data().iter().enumerate().find(|(_, e)| !(**e >= T::zero())) {
            return Err(Error::Domain {
                op: "sqrt",
                index,
                value: value.f64(),
            });
        }
        Ok(self.push(v.map(|e| e.sqrt()), Op::Sqrt(i), self.tracks(i)))
    }

    /// `max(x, floor)`, with zero adjoint wherever the floor is active.
    pub fn clamp_min(&self, x: Var, floor: T) -> Result<Var> {
        let i = self.check(x)?;
        let v = self.node_value(i);
        Ok(self.push(
            v.map(|e| if e > floor { e } else { floor }),
            Op::ClampMin { input: i, floor },
            self.tracks(i),
        ))
    }

    pub fn activation(&self, x: Var, kind: ActivationKind) -> Result<Var> {
        let i = self.check(x)?;
        let v = self.node_value(i);
        Ok(self.push(
            v.map(|e| kind.apply(e)),
            Op::Activation(i, kind),
            self.tracks(i),
        ))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.activation(x, ActivationKind::Sigmoid)
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.activation(x, ActivationKind::Tanh)
    }

    pub fn elu(&self, x: Var) -> Result<Var> {
        self.activation(x, ActivationKind::Elu)
    }

    fn reduce(&self, x: Var, mean: bool) -> Result<Var> {
        let i = self.check(x)?;
        let v = self.node_value(i);
        if v.numel() == 0 {
            return Err(Error::shape("reduce", "empty tensor"));
        }
        let total: f64 = v.data().iter().map(|e| e.f64()).sum();
        let out = if mean {
            total / v.numel() as f64
        } else {
            total
        };
        let op = if mean { Op::Mean(i) } else { Op::Sum(i) };
        Ok(self.push(Tensor::scalar(T::of(out)), op, self.tracks(i)))
    }

    /// Sum of all elements, accumulated in 64-bit.
    pub fn sum(&self, x: Var) -> Result<Var> {
        self.reduce(x, false)
    }

    /// Mean of all elements, accumulated in 64-bit.
    pub fn mean(&self, x: Var) -> Result<Var> {
        self.reduce(x, true)
    }

    /// Stacks `[N, Ci, H, W]` inputs along the channel axis in argument order.
    pub fn concat_channels(&self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape("concat_channels", "no inputs"));
        }
        let idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let vals: Vec<_> = idx.iter().map(|&i| self.node_value(i)).collect();
        let (n, _, h, w) = vals[0].dims4()?;
        let mut total_c = 0;
        for v in &vals {
            let (vn, vc, vh, vw) = v.dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", v.shape(), vals[0].shape()),
                ));
            }
            total_c += vc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for v in &vals {
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let rg = idx.iter().any(|&i| self.tracks(i));
        Ok(self.push(Tensor::new([n, total_c, h, w], data)?, Op::Concat(idx), rg))
    }

    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let i = self.check(x)?;
        let out = self.node_value(i).slice_channels(start, len)?;
        Ok(self.push(out, Op::Slice { input: i, start }, self.tracks(i)))
    }

    /// Flat 1-d selection of elements by row-major index.
    pub fn gather(&self, x: Var, indices: Rc<[usize]>) -> Result<Var> {
        let i = self.check(x)?;
        let v = self.node_value(i);
        if let Some(&bad) = indices.iter().find(|&&k| k >= v.numel()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of {}", v.numel()),
            ));
        }
        let data = indices.iter().map(|&k| v.data()[k]).collect();
        Ok(self.push(
            Tensor::new([indices.len()], data)?,
            Op::Gather { input: i, indices },
            self.tracks(i),
        ))
    }

    /// Identity in the forward pass; multiplies the incoming adjoint by
    /// `factor` on the way back.
    pub fn grad_scale(&self, x: Var, factor: T) -> Result<Var> {
        let i = self.check(x)?;
        let v = self.node_value(i);
        Ok(self.push(
            (*v).clone(),
            Op::GradScale { input: i, factor },
            self.tracks(i),
        ))
    }

    /// Reverse sweep from a scalar root. Leaves used several times receive
    /// the sum of their adjoints.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let r = self.check(root)?;
        let nodes = self.nodes.borrow();
        if nodes[r].value.numel() != 1 {
            return Err(Error::NonScalarRoot(nodes[r].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=r).map(|_| None).collect();
        grads[r] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();

        for i in (0..=r).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let tracks = |j: usize| nodes[j].requires_grad;
            let numel = |j: usize| nodes[j].value.numel();
            match &node.op {
                Op::Leaf => {
                    leaves.insert(i, Tensor::new(node.value.shape(), g)?);
                }
                Op::Conv {
                    input,
                    weight,
                    bias,
                    dilation,
                } => {
                    let x = &nodes[*input].value;
                    let w = &nodes[*weight].value;
                    let (n, cin, h, wd) = x.dims4()?;
                    let geom = ConvGeom {
                        n,
                        cin,
                        cout: w.shape()[0],
                        h,
                        w: wd,
                        dilation: *dilation,
                    };
                    if tracks(*input) {
                        let gin = accumulate(&mut grads[*input], numel(*input));
                        conv::backward_input(geom, &g, w.data(), gin);
                    }
                    let mut gw = tracks(*weight).then(|| grads[*weight].take().unwrap_or_else(|| vec![T::zero(); numel(*weight)]));
                    let mut gb = bias.filter(|&b| tracks(b)).map(|b| {
                        grads[b].take().unwrap_or_else(|| vec![T::zero(); numel(b)])
                    });
                    conv::backward_params(geom, &g, x.data(), gw.as_deref_mut(), gb.as_deref_mut());
                    if let Some(gw) = gw {
                        grads[*weight] = Some(gw);
                    }
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        grads[*b] = Some(gb);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -T::one()
                    } else {
                        T::one()
                    };
                    if tracks(*a) {
                        let ga = accumulate(&mut grads[*a], g.len());
                        ga.iter_mut().zip(&g).for_each(|(s, &d)| *s += d);
                    }
                    if tracks(*b) {
                        let gb = accumulate(&mut grads[*b], g.len());
                        gb.iter_mut().zip(&g).for_each(|(s, &d)| *s += sign * d);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if tracks(*a) {
                        let ga = accumulate(&mut grads[*a], g.len());
                        for ((s, &d), &o) in ga.iter_mut().zip(&g).zip(vb.data()) {
                            *s += d * o;
                        }
                    }
                    if tracks(*b) {
                        let gb = accumulate(&mut grads[*b], g.len());
                        for ((s, &d), &o) in gb.iter_mut().zip(&g).zip(va.data()) {
                            *s += d * o;
                        }
                    }
                }
                Op::Affine { input, scale } => {
                    let gi = accumulate(&mut grads[*input], g.len());
                    gi.iter_mut().zip(&g).for_each(|(s, &d)| *s += *scale * d);
                }
                Op::GradScale { input, factor } => {
                    let gi = accumulate(&mut grads[*input], g.len());
                    gi.iter_mut().zip(&g).for_each(|(s, &d)| *s += *factor * d);
                }
                Op::Log(input) => {
                    let x = &nodes[*input].value;
                    let gi = accumulate(&mut grads[*input], g.len());
                    for ((s, &d), &xv) in gi.iter_mut().zip(&g).zip(x.data()) {
                        *s += d / xv;
                    }
                }
                Op::Sqrt(input) => {
                    let y = &node.value;
                    let gi = accumulate(&mut grads[*input], g.len());
                    let half = T::of(0.5);
                    for ((s, &d), &yv) in gi.iter_mut().zip(&g).zip(y.data()) {
                        if yv > T::zero() {
                            *s += d * half / yv;
                        }
                    }
                }
                Op::ClampMin { input, floor } => {
                    let x = &nodes[*input].value;
                    let gi = accumulate(&mut grads[*input], g.len());
                    for ((s, &d), &xv) in gi.iter_mut().zip(&g).zip(x.data()) {
                        if xv > *floor {
                            *s += d;
                        }
                    }
                }
                Op::Activation(input, kind) => {
                    let x = &nodes[*input].value;
                    let y = &node.value;
                    let gi = accumulate(&mut grads[*input], g.len());
                    for (((s, &d), &xv), &yv) in
                        gi.iter_mut().zip(&g).zip(x.data()).zip(y.data())
                    {
                        *s += d * kind.derivative(xv, yv);
                    }
                }
                Op::Sum(input) | Op::Mean(input) => {
                    let len = numel(*input);
                    let d = if matches!(node.op, Op::Mean(_)) {
                        g[0] / T::of(len as f64)
                    } else {
                        g[0]
                    };
                    let gi = accumulate(&mut grads[*input], len);
                    gi.iter_mut().for_each(|s| *s += d);
                }
                Op::AddN(inputs) => {
                    for &j in inputs {
                        if tracks(j) {
                            let gj = accumulate(&mut grads[j], g.len());
                            gj.iter_mut().zip(&g).for_each(|(s, &d)| *s += d);
                        }
                    }
                }
                Op::Expand(input) => {
                    let total: f64 = g.iter().map(|v| v.f64()).sum();
                    let gi = accumulate(&mut grads[*input], 1);
                    gi[0] += T::of(total);
                }
                Op::Concat(inputs) => {
                    let (n, total_c, h, w) = node.value.dims4()?;
                    let plane = h * w;
                    let mut offset = 0;
                    for &j in inputs {
                        let c = nodes[j].value.shape()[1];
                        if tracks(j) {
                            let gj = accumulate(&mut grads[j], numel(j));
                            for b in 0..n {
                                let src = &g[(b * total_c + offset) * plane..][..c * plane];
                                let dst = &mut gj[b * c * plane..][..c * plane];
                                dst.iter_mut().zip(src).for_each(|(s, &d)| *s += d);
                            }
                        }
                        offset += c;
                    }
                }
                Op::Slice { input, start } => {
                    let (n, c, h, w) = nodes[*input].value.dims4()?;
                    let len = node.value.shape()[1];
                    let plane = h * w;
                    let gi = accumulate(&mut grads[*input], numel(*input));
                    for b in 0..n {
                        let dst = &mut gi[(b * c + start) * plane..][..len * plane];
                        let src = &g[b * len * plane..][..len * plane];
                        dst.iter_mut().zip(src).for_each(|(s, &d)| *s += d);
                    }
                }
                Op::Gather { input, indices } => {
                    let gi = accumulate(&mut grads[*input], numel(*input));
                    for (&k, &d) in indices.iter().zip(&g) {
                        gi[k] += d;
                    }
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: leaves,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).unwrap().item(), 0.5);
        let y = tape.sum(y).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum(sq).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn reused_leaf_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]));
        let y = tape.add(x, x).unwrap();
        let y = tape.sum(y).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn mean_gradient_is_reciprocal_count() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = tape.mean(x).unwrap();
        assert_eq!(tape.value(m).unwrap().item(), 2.5);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn sum_of_zeros() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([3, 2]));
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.value(s).unwrap().item(), 0.0);
    }

    #[test]
    fn reduce_rejects_empty() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([0]));
        assert!(tape.mean(x).is_err());
    }

    #[test]
    fn mul_by_zeros_kills_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]));
        let z = tape.constant(Tensor::zeros([3]));
        let y = tape.mul(x, z).unwrap();
        assert!(tape.value(y).unwrap().data().iter().all(|&v| v == 0.0));
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn elu_of_minus_one() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1], &[-1.0]));
        let y = tape.elu(x).unwrap();
        let v = tape.value(y).unwrap().item();
        assert!((v - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert!((v + 0.632121).abs() < 1e-6);
    }

    #[test]
    fn log_domain_error_reports_index() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 0.0, 2.0]));
        match tape.log(x) {
            Err(Error::Domain { op, index, .. }) => {
                assert_eq!(op, "log");
                assert_eq!(index, 1);
            }
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn sqrt_rejects_negative() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[4.0, -1.0]));
        assert!(matches!(tape.sqrt(x), Err(Error::Domain { index: 1, .. })));
    }

    #[test]
    fn binary_shape_mismatch() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2]));
        let b = tape.constant(Tensor::zeros([3]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros([2]));
        assert!(matches!(tape.backward(a), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn foreign_var_rejected() {
        let t1 = Tape::<f64>::new();
        let t2 = Tape::<f64>::new();
        let a = t1.leaf(Tensor::zeros([1]));
        assert!(matches!(t2.sum(a), Err(Error::ForeignVar)));
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let tape = Tape::new();
        let x = Tensor::from_fn([2, 1, 4, 5], |i| (i as f64 * 0.37).sin());
        let mut w = Tensor::zeros([1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w);
        let bv = tape.constant(Tensor::zeros([1]));
        let y = tape.conv2d_3x3(xv, wv, Some(bv)).unwrap();
        assert_eq!(*tape.value(y).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_constant_input() {
        let tape = Tape::new();
        let c = 1.5;
        let x = tape.constant(Tensor::full([1, 1, 5, 5], c));
        let w = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let y = tape.conv2d_3x3(x, w, None).unwrap();
        let y = tape.value(y).unwrap();
        assert_eq!(y.data()[2 * 5 + 2], 9.0 * c);
        assert_eq!(y.data()[0], 4.0 * c);
        assert_eq!(y.data()[24], 4.0 * c);
        assert_eq!(y.data()[2], 6.0 * c);
    }

    #[test]
    fn bias_gradient_counts_pixels() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([2, 2, 3, 4], |i| i as f64));
        let w = tape.leaf(Tensor::from_fn([3, 2, 3, 3], |i| (i as f64).cos()));
        let b = tape.leaf(Tensor::zeros([3]));
        let y = tape.conv2d_3x3(x, w, Some(b)).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        // two batch elements, 3x4 pixels each
        assert_eq!(g.get(b).unwrap().data(), &[24.0; 3]);
    }

    #[test]
    fn conv_rejects_bad_weight() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros([1, 3, 3, 3]));
        assert!(matches!(
            tape.conv2d_3x3(x, w, None),
            Err(Error::Shape { .. })
        ));
        let w = tape.constant(Tensor::zeros([1, 2, 5, 5]));
        assert!(tape.conv2d_3x3(x, w, None).is_err());
    }

    #[test]
    fn concat_shapes_and_slicing() {
        let tape = Tape::new();
        let a = Tensor::from_fn([1, 2, 4, 4], |i| i as f64);
        let b = Tensor::from_fn([1, 3, 4, 4], |i| -(i as f64));
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let c = tape.concat_channels(&[av, bv]).unwrap();
        let cv = tape.value(c).unwrap();
        assert_eq!(cv.shape(), &[1, 5, 4, 4]);
        assert_eq!(cv.slice_channels(0, 2).unwrap(), a);
        assert_eq!(cv.slice_channels(2, 3).unwrap(), b);

        let single = tape.concat_channels(&[av]).unwrap();
        assert_eq!(*tape.value(single).unwrap(), a);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([1, 1, 4, 4]));
        let b = tape.constant(Tensor::zeros([1, 1, 4, 5]));
        assert!(tape.concat_channels(&[a, b]).is_err());
        assert!(tape.concat_channels(&[]).is_err());
    }

    #[test]
    fn clamp_min_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.clamp_min(x, 0.0).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1], &[2.0]));
        let w = tape.leaf(t(&[1], &[3.0]));
        let y = tape.mul(x, w).unwrap();
        let y = tape.sum(y).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[2.0]);
    }
}
