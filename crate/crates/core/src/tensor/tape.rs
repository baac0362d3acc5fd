use super::kernels::{self, ConvGeom, BCE_EPS};
use super::{lit, Scalar, Shape, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool(Var),
    Bilinear(Var),
    Sigmoid(Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarRsub(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Bce {
        logits: Var,
        target: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Bilinear(_) => "bilinear_resize",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScalarRsub(_) => "scalar_rsub",
            Op::Concat(_) => "concat_channels",
            Op::Sum(_) => "sum",
            Op::Bce { .. } => "bce_loss",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::AvgPool { x, .. }
            | Op::GlobalAvgPool(x)
            | Op::Bilinear(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::ScalarRsub(x)
            | Op::Sum(x) => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::Bce { logits, target } => vec![*logits, *target],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order and replays them in reverse.
///
/// Nodes are appended only after their inputs exist, so the node list is a
/// topological order by construction. A tape is single-use for
/// differentiation: call [`Tape::zero_grad`] before a second `backward`.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Option<Vec<Option<Tensor<T>>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input. `requires_grad` leaves receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Shorthand for a constant leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn node(&self, v: Var) -> Result<&Node<T>, TensorError> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads = None;
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    ) -> Result<Var, TensorError> {
        let bias = match b {
            Some(b) => Some(&self.node(b)?.value),
            None => None,
        };
        let y = kernels::conv2d_forward(&self.node(x)?.value, &self.node(w)?.value, bias, geom)?;
        self.push(y, Op::Conv2d { x, w, b, geom })
    }

    pub fn avg_pool2d(
        &mut self,
        x: Var,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let y = kernels::avg_pool2d_forward(&self.node(x)?.value, k, stride, padding)?;
        self.push(
            y,
            Op::AvgPool {
                x,
                k,
                stride,
                padding,
            },
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let y = kernels::global_avg_pool_forward(&self.node(x)?.value)?;
        self.push(y, Op::GlobalAvgPool(x))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var, TensorError> {
        let y = kernels::bilinear_resize_forward(&self.node(x)?.value, out_h, out_w)?;
        self.push(y, Op::Bilinear(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let y = self.node(x)?.value.map(kernels::sigmoid);
        self.push(y, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let y = self.node(x)?.value.map(|v| v.max(T::zero()));
        self.push(y, Op::Relu(x))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let y = self.zip_with(a, b, |x, y| x + y);
        self.push(y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let y = self.zip_with(a, b, |x, y| x - y);
        self.push(y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let y = self.zip_with(a, b, |x, y| x * y);
        self.push(y, Op::Mul(a, b))
    }

    /// `s - x`, elementwise.
    pub fn scalar_rsub(&mut self, s: f64, x: Var) -> Result<Var, TensorError> {
        let s = lit::<T>(s);
        let y = self.node(x)?.value.map(|v| s - v);
        self.push(y, Op::ScalarRsub(x))
    }

    /// Concatenate along the channel axis. Batch and spatial extents must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self
            .node(*parts.first().ok_or(TensorError::InvalidArgument {
                op: "concat_channels",
                detail: "no inputs".into(),
            })?)?
            .value
            .shape();
        let mut channels = 0;
        for &p in parts {
            let s = self.node(p)?.value.shape();
            if s.n() != first.n() || s.h() != first.h() || s.w() != first.w() {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    left: first,
                    right: s,
                });
            }
            channels += s.c();
        }
        let out_shape = Shape::new(first.n(), channels, first.h(), first.w());
        let mut data = Vec::with_capacity(out_shape.numel());
        for b in 0..first.n() {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let per = t.shape().c() * t.shape().plane();
                data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        self.push(Tensor::from_vec(out_shape, data)?, Op::Concat(parts.to_vec()))
    }

    /// Sum of all elements, as a `[1,1,1,1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.node(x)?.value.sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a binary target,
    /// with probabilities clamped to `[eps, 1 - eps]`.
    pub fn bce_loss(&mut self, logits: Var, target: Var) -> Result<Var, TensorError> {
        self.same_shape("bce_loss", logits, target)?;
        let tv = &self.nodes[target.0].value;
        if let Some(bad) = tv.data().iter().find(|&&g| g != T::zero() && g != T::one()) {
            return Err(TensorError::NonBinaryTarget(bad.as_f64()));
        }
        let lv = &self.nodes[logits.0].value;
        let (eps, one_m_eps) = (lit::<T>(BCE_EPS), T::one() - lit::<T>(BCE_EPS));
        let mut acc = 0.0f64;
        for (&z, &g) in lv.data().iter().zip(tv.data()) {
            let p = kernels::sigmoid(z).max(eps).min(one_m_eps);
            let term = if g == T::one() { p.ln() } else { (T::one() - p).ln() };
            acc -= term.as_f64();
        }
        let loss = acc / lv.numel() as f64;
        self.push(Tensor::scalar(lit(loss)), Op::Bce { logits, target })
    }

    /// Reverse pass from a scalar root. Populates gradients for every node
    /// that requires grad; leaves the root does not reach get zero gradients.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.grads.is_some() {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let root_node = self.node(root)?;
        if root_node.value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_node.value.shape()));
        }
        if !root_node.requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_node.value.shape(), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), *geom, g, needs(*x));
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx)?;
                }
                if needs(*w) {
                    accumulate(grads, *w, dw)?;
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    let db = db.reshape(val(b).shape())?;
                    accumulate(grads, b, db)?;
                }
            }
            Op::AvgPool {
                x,
                k,
                stride,
                padding,
            } => {
                if needs(*x) {
                    let dx = kernels::avg_pool2d_backward(val(*x).shape(), *k, *stride, *padding, g);
                    accumulate(grads, *x, dx)?;
                }
            }
            Op::GlobalAvgPool(x) => {
                if needs(*x) {
                    accumulate(grads, *x, kernels::global_avg_pool_backward(val(*x).shape(), g))?;
                }
            }
            Op::Bilinear(x) => {
                if needs(*x) {
                    accumulate(grads, *x, kernels::bilinear_resize_backward(val(*x).shape(), g))?;
                }
            }
            Op::Sigmoid(x) => {
                if needs(*x) {
                    let data = node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&s, &gy)| gy * s * (T::one() - s))
                        .collect();
                    accumulate(grads, *x, Tensor::from_vec(g.shape(), data)?)?;
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let data = val(*x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gy)| if v > T::zero() { gy } else { T::zero() })
                        .collect();
                    accumulate(grads, *x, Tensor::from_vec(g.shape(), data)?)?;
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if needs(*b) {
                    accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if needs(*b) {
                    accumulate(grads, *b, g.map(|v| -v))?;
                }
            }
            Op::Mul(a, b) => {
                let prod = |other: &Tensor<T>| {
                    let data = other.data().iter().zip(g.data()).map(|(&o, &gy)| o * gy).collect();
                    Tensor::from_vec(g.shape(), data)
                };
                if needs(*a) {
                    accumulate(grads, *a, prod(val(*b))?)?;
                }
                if needs(*b) {
                    accumulate(grads, *b, prod(val(*a))?)?;
                }
            }
            Op::ScalarRsub(x) => {
                if needs(*x) {
                    accumulate(grads, *x, g.map(|v| -v))?;
                }
            }
            Op::Concat(parts) => {
                let s = g.shape();
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape();
                    if needs(p) {
                        let per = ps.c() * ps.plane();
                        let full = s.c() * s.plane();
                        let mut data = Vec::with_capacity(ps.numel());
                        for b in 0..s.n() {
                            let start = b * full + offset * s.plane();
                            data.extend_from_slice(&g.data()[start..start + per]);
                        }
                        accumulate(grads, p, Tensor::from_vec(ps, data)?)?;
                    }
                    offset += ps.c();
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    accumulate(grads, *x, Tensor::full(val(*x).shape(), g.item()))?;
                }
            }
            Op::Bce { logits, target } => {
                if needs(*logits) {
                    let lv = val(*logits);
                    let scale = g.item() / lit::<T>(lv.numel() as f64);
                    let (eps, one_m_eps) = (lit::<T>(BCE_EPS), T::one() - lit::<T>(BCE_EPS));
                    let data = lv
                        .data()
                        .iter()
                        .zip(val(*target).data())
                        .map(|(&z, &t)| {
                            let p = kernels::sigmoid(z);
                            // The clamp is flat outside [eps, 1 - eps].
                            if p < eps || p > one_m_eps {
                                T::zero()
                            } else {
                                (p - t) * scale
                            }
                        })
                        .collect();
                    accumulate(grads, *logits, Tensor::from_vec(lv.shape(), data)?)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    contribution: Tensor<T>,
) -> Result<(), TensorError> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => {
            *slot = Some(contribution);
            Ok(())
        }
    }
}
