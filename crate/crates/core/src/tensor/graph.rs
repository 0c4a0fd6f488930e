use std::sync::Arc;

use super::kernels::{self, ConvGeometry, ConvSpec, PoolGeometry, PoolSpec};
use super::{Scalar, Tensor, TensorError};

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    Sum(Var),
    Concat(Vec<Var>),
    Relu(Var),
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeometry },
    MaxPool { input: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Dense { input: Var, weight: Var, bias: Var },
    Softmax(Var),
    CrossEntropy { dist: Var, label: usize },
    Entropy(Var),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Records one forward computation for reverse-mode differentiation.
///
/// Gradients are retained for leaves only; repeated calls to
/// [`Graph::backward`] add into the existing leaf gradients.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Registers an existing buffer without copying it.
    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds an untracked tensor of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var, TensorError> {
        let x = self.value(a);
        if x.shape() != c.shape() {
            return Err(mismatch("add_const", format!("{:?} vs {:?}", x.shape(), c.shape())));
        }
        let data = x.data().iter().zip(c.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddConst(a), &[a]))
    }

    /// Multiplies elementwise by an untracked tensor of the same shape (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var, TensorError> {
        let x = self.value(a);
        if x.shape() != c.shape() {
            return Err(mismatch("mul_const", format!("{:?} vs {:?}", x.shape(), c.shape())));
        }
        let data = x.data().iter().zip(c.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(a, c.data().to_vec()), &[a]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// Flattens and concatenates the inputs in order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument { op: "concat", detail: "no inputs".into() });
        }
        let data: Vec<T> = parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
        let out = Tensor::new(vec![data.len()], data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    /// Valid strided convolution of a `[C_in,H,W]` input with `[C_out,C_in,kh,kw]` weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: ConvSpec) -> Result<Var, TensorError> {
        let (c, h, w) = self.value(input).dims3("conv2d")?;
        if self.value(weight).shape() != spec.weight_shape() {
            return Err(mismatch(
                "conv2d",
                format!("weights {:?}, spec expects {:?}", self.value(weight).shape(), spec.weight_shape()),
            ));
        }
        if self.value(bias).shape() != [spec.out_maps] {
            return Err(mismatch(
                "conv2d",
                format!("bias {:?}, spec expects [{}]", self.value(bias).shape(), spec.out_maps),
            ));
        }
        let geom = ConvGeometry::resolve(spec, c, h, w)?;
        let data = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geom,
        );
        let out = Tensor::new(vec![spec.out_maps, geom.out_h, geom.out_w], data)?;
        Ok(self.push(out, Op::Conv2d { input, weight, bias, geom }, &[input, weight, bias]))
    }

    pub fn maxpool2d(&mut self, input: Var, spec: PoolSpec) -> Result<Var, TensorError> {
        let (c, h, w) = self.value(input).dims3("maxpool2d")?;
        let geom = PoolGeometry::resolve(spec, c, h, w)?;
        let (data, argmax) = kernels::maxpool2d_forward(self.value(input).data(), &geom);
        let out = Tensor::new(vec![c, geom.out_h, geom.out_w], data)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }, &[input]))
    }

    /// Mean of each map: `[C,H,W] -> [C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, TensorError> {
        let (c, h, w) = self.value(input).dims3("global_avg_pool")?;
        let plane = h * w;
        let denom = T::from_usize(plane).expect("plane size");
        let x = self.value(input).data();
        let data = (0..c).map(|ci| x[ci * plane..(ci + 1) * plane].iter().copied().sum::<T>() / denom).collect();
        let out = Tensor::new(vec![c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(input), &[input]))
    }

    /// Affine map `W x + b` with `W: [m,n]`, `x: [n]`, `b: [m]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let x = self.value(input);
        let wt = self.value(weight);
        let b = self.value(bias);
        let n = x.len();
        let (m, wn) = match wt.shape() {
            &[m, wn] => (m, wn),
            s => return Err(mismatch("dense", format!("weights must be [m,n], got {s:?}"))),
        };
        if wn != n || x.shape().len() != 1 {
            return Err(mismatch("dense", format!("input {:?} vs weights {:?}", x.shape(), wt.shape())));
        }
        if b.shape() != [m] {
            return Err(mismatch("dense", format!("bias {:?} vs {m} outputs", b.shape())));
        }
        let xs = x.data();
        let data = wt
            .data()
            .chunks_exact(n)
            .zip(b.data())
            .map(|(row, &bi)| bi + row.iter().zip(xs).map(|(&w, &v)| w * v).sum::<T>())
            .collect();
        let out = Tensor::new(vec![m], data)?;
        Ok(self.push(out, Op::Dense { input, weight, bias }, &[input, weight, bias]))
    }

    /// Numerically stable softmax over a 1-D tensor.
    pub fn softmax(&mut self, logits: Var) -> Result<Var, TensorError> {
        let x = self.value(logits);
        if x.shape().len() != 1 {
            return Err(mismatch("softmax", format!("expected 1-D logits, got {:?}", x.shape())));
        }
        let out = Tensor::new(x.shape().to_vec(), softmax_values(x.data()))?;
        Ok(self.push(out, Op::Softmax(logits), &[logits]))
    }

    /// Negative log-likelihood `-ln(max(p[label], 1e-12))`.
    pub fn cross_entropy(&mut self, dist: Var, label: usize) -> Result<Var, TensorError> {
        let p = self.value(dist);
        if label >= p.len() {
            return Err(TensorError::InvalidLabel { label, classes: p.len() });
        }
        let floor = T::from_f64_lossy(LOG_FLOOR);
        let loss = -p.data()[label].max(floor).ln();
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { dist, label }, &[dist]))
    }

    /// Shannon entropy in nats, with `0 ln 0 = 0`.
    pub fn entropy(&mut self, dist: Var) -> Var {
        let h = self
            .value(dist)
            .data()
            .iter()
            .filter(|&&p| p > T::zero())
            .map(|&p| -p * p.ln())
            .sum();
        self.push(Tensor::scalar(h), Op::Entropy(dist), &[dist])
    }

    /// Reverse pass from a scalar loss into every tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NotScalar(self.value(loss).shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, contribution: Vec<T>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contribution) {
                            *e = *e + c;
                        }
                    }
                    slot => *slot = Some(contribution),
                }
            };
            let val = |v: Var| self.nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(val(*b)).map(|(&d, &y)| d * y).collect();
                    let db = g.iter().zip(val(*a)).map(|(&d, &x)| d * x).collect();
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::AddConst(a) => acc(*a, g),
                Op::MulConst(a, c) => acc(*a, g.iter().zip(c).map(|(&d, &m)| d * m).collect()),
                Op::Scale(a, f) => acc(*a, g.iter().map(|&d| d * *f).collect()),
                Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).len();
                        acc(p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::Relu(a) => {
                    let d = g.iter().zip(val(*a)).map(|(&d, &x)| if x > T::zero() { d } else { T::zero() }).collect();
                    acc(*a, d);
                }
                Op::Conv2d { input, weight, bias, geom } => {
                    let need_input = self.nodes[input.0].requires_grad;
                    let cg = kernels::conv2d_backward(val(*input), val(*weight), &g, geom, need_input);
                    if let Some(di) = cg.input {
                        acc(*input, di);
                    }
                    acc(*weight, cg.weight);
                    acc(*bias, cg.bias);
                }
                Op::MaxPool { input, argmax } => {
                    acc(*input, kernels::maxpool2d_backward(&g, argmax, val(*input).len()));
                }
                Op::GlobalAvgPool(a) => {
                    let x = &self.nodes[a.0].value;
                    let c = x.shape()[0];
                    let plane = x.len() / c;
                    let inv = T::one() / T::from_usize(plane).expect("plane size");
                    let d = (0..x.len()).map(|idx| g[idx / plane] * inv).collect();
                    acc(*a, d);
                }
                Op::Dense { input, weight, bias } => {
                    let x = val(*input);
                    let w = val(*weight);
                    let n = x.len();
                    let mut dx = vec![T::zero(); n];
                    for (row, &d) in w.chunks_exact(n).zip(&g) {
                        for (o, &wv) in dx.iter_mut().zip(row) {
                            *o = *o + d * wv;
                        }
                    }
                    let dw = g.iter().flat_map(|&d| x.iter().map(move |&xv| d * xv)).collect();
                    acc(*input, dx);
                    acc(*weight, dw);
                    acc(*bias, g);
                }
                Op::Softmax(a) => {
                    let p = node.value.data();
                    let dot: T = g.iter().zip(p).map(|(&d, &pi)| d * pi).sum();
                    acc(*a, g.iter().zip(p).map(|(&d, &pi)| pi * (d - dot)).collect());
                }
                Op::CrossEntropy { dist, label } => {
                    let p = val(*dist);
                    let floor = T::from_f64_lossy(LOG_FLOOR);
                    let mut d = vec![T::zero(); p.len()];
                    if p[*label] > floor {
                        d[*label] = -g[0] / p[*label];
                    }
                    acc(*dist, d);
                }
                Op::Entropy(a) => {
                    let floor = T::from_f64_lossy(LOG_FLOOR);
                    let d = val(*a).iter().map(|&p| -g[0] * (p.max(floor).ln() + T::one())).collect();
                    acc(*a, d);
                }
            }
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(existing) => {
                    for (e, c) in existing.data_mut().iter_mut().zip(g) {
                        *e = *e + c;
                    }
                }
                slot => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_values<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}
