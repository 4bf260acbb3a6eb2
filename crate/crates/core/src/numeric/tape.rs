//! Define-by-run reverse-mode differentiation.
//!
//! Every primitive appends a node holding its output value and the ids of its
//! inputs. Nodes are only ever appended, so the list is topologically sorted
//! and [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom};
use super::scalar::{all_finite, Scalar};
use super::tensor::Tensor;

/// Probabilities below this are clamped before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Concat(Var, Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Upsample { x: Var, factor: usize },
    UpConv2d { x: Var, w: Var, b: Var, geom: ConvGeom, factor: usize },
    Softmax(Var),
    Mse(Var, Var),
    CrossEntropy { probs: Var, labels: Vec<usize> },
    Sum(Var),
    Gather { x: Var, index: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    name: &'static str,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Option<Vec<Option<Vec<S>>>>,
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / last.max(1), last)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
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

    fn push(&mut self, op: Op<S>, shape: Vec<usize>, value: Vec<S>, name: &'static str) -> Result<Var> {
        if !all_finite(&value) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            name,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op<S>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Concat(a, b)
            | Op::Mse(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::Sum(a) => vec![*a],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Upsample { x, .. } => vec![*x],
            Op::UpConv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::CrossEntropy { probs, .. } => vec![*probs],
            Op::Gather { x, .. } => vec![*x],
        }
    }

    /// Records a copy of `tensor`; it is differentiable iff the tensor has
    /// `requires_grad` set.
    pub fn leaf(&mut self, tensor: &Tensor<S>) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            op: Op::Leaf,
            name: "leaf",
            requires_grad: tensor.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `tensor` that never receives a gradient.
    pub fn constant(&mut self, tensor: &Tensor<S>) -> Var {
        let v = self.leaf(tensor);
        self.nodes[v.0].requires_grad = false;
        v
    }

    pub fn input(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Result<Var> {
        let mut t = Tensor::new(shape, data)?;
        t.set_requires_grad(requires_grad);
        Ok(self.leaf(&t))
    }

    /// Name of every recorded node's operation, in order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.name).collect()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are valid tensors")
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let out = kernels::matmul(self.value(a), self.value(b), sa[0], sa[1], sb[1]);
        self.push(Op::MatMul(a, b), vec![sa[0], sb[1]], out, "matmul")
    }

    /// Adds `bias[n]` to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let (_, n) = rows_of(&sx);
        if sb.len() != 1 || sb[0] != n {
            return Err(Error::shape("add_bias", &sx, &sb));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        self.push(Op::AddBias(x, bias), sx, out, "add_bias")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S) -> Result<(Vec<usize>, Vec<S>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(name, sa, sb));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((sa.to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), shape, out, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), shape, out, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), shape, out, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Result<Var> {
        let out = self.value(a).iter().map(|&v| v * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, factor), shape, out, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&v| v.max(S::zero())).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Relu(a), shape, out, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Sigmoid(a), shape, out, "sigmoid")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        self.push(Op::Reshape(a), shape, out, "reshape")
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let ((rows, na), (_, nb)) = (rows_of(&sa), rows_of(&sb));
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(rows * (na + nb));
        for r in 0..rows {
            out.extend_from_slice(&va[r * na..(r + 1) * na]);
            out.extend_from_slice(&vb[r * nb..(r + 1) * nb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = na + nb;
        self.push(Op::Concat(a, b), shape, out, "concat")
    }

    /// `x[b, cin, h, w]` convolved with `w[cout, cin, k, k]` plus `bias[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let geom = ConvGeom::new(&sx, &sw, stride, pad).ok_or_else(|| Error::shape("conv2d", &sx, &sw))?;
        if self.shape(bias) != [geom.cout] {
            return Err(Error::shape("conv2d", &sw, self.shape(bias)));
        }
        let out = kernels::conv2d(self.value(x), self.value(w), self.value(bias), &geom);
        let shape = vec![geom.batch, geom.cout, geom.ho, geom.wo];
        self.push(Op::Conv2d { x, w, b: bias, geom }, shape, out, "conv2d")
    }

    /// Same as `upsample(x, factor)` followed by a stride-1 `conv2d`, without
    /// storing the inserted zeros.
    pub fn upconv2d(&mut self, x: Var, w: Var, bias: Var, factor: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || factor == 0 {
            return Err(Error::invalid("upconv2d", format!("shape {sx:?}, factor {factor}")));
        }
        let up = [sx[0], sx[1], sx[2] * factor, sx[3] * factor];
        let geom = ConvGeom::new(&up, &sw, 1, pad).ok_or_else(|| Error::shape("upconv2d", &sx, &sw))?;
        if self.shape(bias) != [geom.cout] {
            return Err(Error::shape("upconv2d", &sw, self.shape(bias)));
        }
        let out = kernels::upconv2d(self.value(x), self.value(w), self.value(bias), &geom, factor);
        let shape = vec![geom.batch, geom.cout, geom.ho, geom.wo];
        self.push(
            Op::UpConv2d {
                x,
                w,
                b: bias,
                geom,
                factor,
            },
            shape,
            out,
            "upconv2d",
        )
    }

    /// Zero-insertion upsampling of the two trailing axes.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || factor == 0 {
            return Err(Error::invalid("upsample", format!("shape {sx:?}, factor {factor}")));
        }
        let (h, w) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let planes = self.value(x).len() / (h * w);
        let out = kernels::upsample_zero(self.value(x), planes, h, w, factor);
        let mut shape = sx;
        let r = shape.len();
        shape[r - 2] *= factor;
        shape[r - 1] *= factor;
        self.push(Op::Upsample { x, factor }, shape, out, "upsample")
    }

    /// Softmax over the last axis with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (_, c) = rows_of(&shape);
        if c < 2 {
            return Err(Error::invalid("softmax", format!("need at least 2 classes, shape {shape:?}")));
        }
        if !all_finite(self.value(a)) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let out = self.value(a).chunks(c).flat_map(softmax_row).collect();
        self.push(Op::Softmax(a), shape, out, "softmax")
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(Error::shape("mse", sp, st));
        }
        let n = S::from_usize(sp.iter().product()).unwrap();
        let sum: S = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        self.push(Op::Mse(pred, target), vec![1], vec![sum / n], "mse")
    }

    /// Batch-mean of `-ln(max(p[label], 1e-12))` over rows of `probs`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(probs).to_vec();
        let (rows, c) = rows_of(&shape);
        if labels.len() != rows {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {c} classes")));
        }
        let p = self.value(probs);
        let clamp = S::of(LOG_CLAMP);
        let total: S = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -p[r * c + l].max(clamp).ln())
            .sum();
        let loss = total / S::from_usize(rows).unwrap();
        self.push(
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            vec![1],
            vec![loss],
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: S = self.value(a).iter().copied().sum();
        self.push(Op::Sum(a), vec![1], vec![s], "sum")
    }

    /// Picks `x[r, index[r]]` from each row.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, c) = rows_of(&shape);
        if index.len() != rows || index.iter().any(|&i| i >= c) {
            return Err(Error::invalid("gather", format!("index {index:?} for shape {shape:?}")));
        }
        let v = self.value(x);
        let out = index.iter().enumerate().map(|(r, &i)| v[r * c + i]).collect();
        self.push(
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            vec![rows],
            out,
            "gather",
        )
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Populates gradients of `loss` for every differentiable node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contrib) in self.local_grads(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if !all_finite(&contrib) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += *c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last differentiated loss with respect to `v`. Values
    /// that do not require a gradient, or do not reach the loss, get zeros.
    pub fn grad(&self, v: Var) -> Vec<S> {
        self.grads
            .as_ref()
            .and_then(|g| g[v.0].clone())
            .filter(|_| self.nodes[v.0].requires_grad)
            .unwrap_or_else(|| vec![S::zero(); self.nodes[v.0].value.len()])
    }

    /// Clears gradients so [`Tape::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    fn local_grads(&self, id: usize, g: &[S]) -> Vec<(Var, Vec<S>)> {
        let node = &self.nodes[id];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (da, db) =
                    kernels::matmul_backward(self.value(*a), self.value(*b), g, sa[0], sa[1], sb[1]);
                vec![(*a, da), (*b, db)]
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).len();
                let mut db = vec![S::zero(); n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                vec![
                    (*a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect()),
                    (*b, g.iter().zip(va).map(|(&d, &x)| d * x).collect()),
                ]
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|&d| d * *f).collect())],
            Op::Relu(a) => {
                let grad = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(&d, &x)| if x > S::zero() { d } else { S::zero() })
                    .collect();
                vec![(*a, grad)]
            }
            Op::Sigmoid(a) => {
                let grad = g
                    .iter()
                    .zip(&node.value)
                    .map(|(&d, &y)| d * y * (S::one() - y))
                    .collect();
                vec![(*a, grad)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Concat(a, b) => {
                let ((_, na), (_, nb)) = (rows_of(self.shape(*a)), rows_of(self.shape(*b)));
                let mut ga = Vec::with_capacity(self.value(*a).len());
                let mut gb = Vec::with_capacity(self.value(*b).len());
                for row in g.chunks(na + nb) {
                    ga.extend_from_slice(&row[..na]);
                    gb.extend_from_slice(&row[na..]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), g, geom, wants(*x));
                let mut out = vec![(*w, dw), (*b, db)];
                if wants(*x) {
                    out.push((*x, dx));
                }
                out
            }
            Op::UpConv2d { x, w, b, geom, factor } => {
                let (dx, dw, db) =
                    kernels::upconv2d_backward(self.value(*x), self.value(*w), g, geom, *factor, wants(*x));
                let mut out = vec![(*w, dw), (*b, db)];
                if wants(*x) {
                    out.push((*x, dx));
                }
                out
            }
            Op::Upsample { x, factor } => {
                let sx = self.shape(*x);
                let (h, w) = (sx[sx.len() - 2], sx[sx.len() - 1]);
                let planes = self.value(*x).len() / (h * w);
                vec![(*x, kernels::upsample_zero_backward(g, planes, h, w, *factor))]
            }
            Op::Softmax(a) => {
                let (_, c) = rows_of(&node.shape);
                let mut grad = Vec::with_capacity(g.len());
                for (gy, y) in g.chunks(c).zip(node.value.chunks(c)) {
                    let dot: S = gy.iter().zip(y).map(|(&d, &p)| d * p).sum();
                    grad.extend(gy.iter().zip(y).map(|(&d, &p)| p * (d - dot)));
                }
                vec![(*a, grad)]
            }
            Op::Mse(p, t) => {
                let n = S::from_usize(self.value(*p).len()).unwrap();
                let k = g[0] * S::of(2.0) / n;
                let d: Vec<S> = self
                    .value(*p)
                    .iter()
                    .zip(self.value(*t))
                    .map(|(&a, &b)| k * (a - b))
                    .collect();
                let neg = d.iter().map(|&v| -v).collect();
                vec![(*p, d), (*t, neg)]
            }
            Op::CrossEntropy { probs, labels } => {
                let p = self.value(*probs);
                let c = p.len() / labels.len();
                let scale = g[0] / S::from_usize(labels.len()).unwrap();
                let clamp = S::of(LOG_CLAMP);
                let mut grad = vec![S::zero(); p.len()];
                for (r, &l) in labels.iter().enumerate() {
                    let pv = p[r * c + l];
                    if pv > clamp {
                        grad[r * c + l] = -scale / pv;
                    }
                }
                vec![(*probs, grad)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
            Op::Gather { x, index } => {
                let c = self.value(*x).len() / index.len();
                let mut grad = vec![S::zero(); self.value(*x).len()];
                for (r, &i) in index.iter().enumerate() {
                    grad[r * c + i] = g[r];
                }
                vec![(*x, grad)]
            }
        }
    }
}

pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn softmax_row<S: Scalar>(row: &[S]) -> Vec<S> {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}
