use std::cell::Cell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{AutodiffError, Result};
use crate::kernels::{self, ConvGeom};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on this thread. Tensors created
/// inside are constants regardless of their inputs.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// The primal operation that produced a node, holding its parents.
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Mask(Tensor, Rc<[f64]>),
    Relu(Tensor),
    Sigmoid(Tensor),
    Sqrt(Tensor),
    Ln(Tensor),
    Reshape(Tensor),
    Transpose(Tensor),
    MatMul(Tensor, Tensor),
    Broadcast { x: Tensor, outer: usize, inner: usize },
    Reduce { x: Tensor, outer: usize, inner: usize },
    Narrow { x: Tensor, axis: usize, start: usize },
    Pad { x: Tensor, axis: usize, start: usize },
    Softmax(Tensor),
    SoftmaxCrossEntropy { logits: Tensor, labels: Rc<[usize]> },
    Conv2d { x: Tensor, w: Tensor, geom: ConvGeom },
    Conv2dInputGrad { g: Tensor, w: Tensor, geom: ConvGeom },
    Conv2dWeightGrad { x: Tensor, g: Tensor, geom: ConvGeom },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![a, b],
            Neg(a) | Scale(a, _) | AddScalar(a) | Mask(a, _) | Relu(a) | Sigmoid(a) | Sqrt(a) | Ln(a)
            | Reshape(a) | Transpose(a) | Softmax(a) => vec![a],
            Broadcast { x, .. } | Reduce { x, .. } | Narrow { x, .. } | Pad { x, .. } => vec![x],
            SoftmaxCrossEntropy { logits, .. } => vec![logits],
            Conv2d { x, w, .. } => vec![x, w],
            Conv2dInputGrad { g, w, .. } => vec![g, w],
            Conv2dWeightGrad { x, g, .. } => vec![x, g],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            Neg(..) => "neg",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            Mask(..) => "mask",
            Relu(..) => "relu",
            Sigmoid(..) => "sigmoid",
            Sqrt(..) => "sqrt",
            Ln(..) => "ln",
            Reshape(..) => "reshape",
            Transpose(..) => "transpose",
            MatMul(..) => "matmul",
            Broadcast { .. } => "broadcast",
            Reduce { .. } => "reduce",
            Narrow { .. } => "narrow",
            Pad { .. } => "pad",
            Softmax(..) => "softmax",
            SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Conv2d { .. } => "conv2d",
            Conv2dInputGrad { .. } => "conv2d_input_grad",
            Conv2dWeightGrad { .. } => "conv2d_weight_grad",
        }
    }
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) op: Option<Op>,
    pub(crate) requires_grad: bool,
}

/// A dense `f64` tensor that may carry the operation that produced it.
///
/// Cloning is cheap (reference counted). Graphs are single-threaded; move
/// values between threads with [`Tensor::to_vec`] and rebuild.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.as_ref().map(Op::name))
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn raw(data: Vec<f64>, shape: Vec<usize>, op: Option<Op>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            op,
            requires_grad,
        }))
    }

    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Tensor {
        let rg = is_grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        if rg {
            Tensor::raw(data, shape, Some(op), true)
        } else {
            Tensor::raw(data, shape, None, false)
        }
    }

    /// A constant (no gradient tracking).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(AutodiffError::LengthMismatch { len: data.len(), shape: shape.to_vec() });
        }
        Ok(Tensor::raw(data, shape.to_vec(), None, false))
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn variable(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(AutodiffError::LengthMismatch { len: data.len(), shape: shape.to_vec() });
        }
        Ok(Tensor::raw(data, shape.to_vec(), None, true))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::raw(vec![v], vec![], None, false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::raw(vec![0.0; numel(shape)], shape.to_vec(), None, false)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::raw(vec![v; numel(shape)], shape.to_vec(), None, false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    /// Copy of the values with no history.
    pub fn detach(&self) -> Tensor {
        Tensor::raw(self.0.data.clone(), self.0.shape.clone(), None, false)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(AutodiffError::NotScalar(self.shape().to_vec()));
        }
        Ok(self.0.data[0])
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.data().iter().map(|&a| f(a)).collect()
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        Ok(Tensor::from_op(self.zip(other, |a, b| a + b), self.shape().to_vec(), Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        Ok(Tensor::from_op(self.zip(other, |a, b| a - b), self.shape().to_vec(), Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        Ok(Tensor::from_op(self.zip(other, |a, b| a * b), self.shape().to_vec(), Op::Mul(self.clone(), other.clone())))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "div")?;
        Ok(Tensor::from_op(self.zip(other, |a, b| a / b), self.shape().to_vec(), Op::Div(self.clone(), other.clone())))
    }

    pub fn neg(&self) -> Tensor {
        Tensor::from_op(self.map(|a| -a), self.shape().to_vec(), Op::Neg(self.clone()))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::from_op(self.map(|a| a * c), self.shape().to_vec(), Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        Tensor::from_op(self.map(|a| a + c), self.shape().to_vec(), Op::AddScalar(self.clone()))
    }

    /// Elementwise product with a constant mask.
    pub fn mask(&self, mask: Rc<[f64]>) -> Result<Tensor> {
        if mask.len() != self.len() {
            return Err(AutodiffError::LengthMismatch { len: mask.len(), shape: self.shape().to_vec() });
        }
        let data = self.data().iter().zip(mask.iter()).map(|(a, m)| a * m).collect();
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Mask(self.clone(), mask)))
    }

    /// ReLU; the derivative at exactly zero is taken to be zero.
    pub fn relu(&self) -> Tensor {
        Tensor::from_op(self.map(|a| if a > 0.0 { a } else { 0.0 }), self.shape().to_vec(), Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.map(|a| {
            if a >= 0.0 {
                1.0 / (1.0 + (-a).exp())
            } else {
                let e = a.exp();
                e / (1.0 + e)
            }
        });
        Tensor::from_op(data, self.shape().to_vec(), Op::Sigmoid(self.clone()))
    }

    pub fn sqrt(&self) -> Tensor {
        Tensor::from_op(self.map(f64::sqrt), self.shape().to_vec(), Op::Sqrt(self.clone()))
    }

    /// Natural logarithm.
    pub fn ln(&self) -> Tensor {
        Tensor::from_op(self.map(f64::ln), self.shape().to_vec(), Op::Ln(self.clone()))
    }

    pub fn square(&self) -> Tensor {
        self.mul(self).expect("same shape")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(AutodiffError::LengthMismatch { len: self.len(), shape: shape.to_vec() });
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape(self.clone())))
    }

    pub fn flatten(&self) -> Tensor {
        self.reshape(&[self.len()]).expect("same length")
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let [r, c] = self.shape() else {
            return Err(AutodiffError::Invalid(format!("transpose needs a matrix, got {:?}", self.shape())));
        };
        let (r, c) = (*r, *c);
        Ok(Tensor::from_op(kernels::transpose(self.data(), r, c), vec![c, r], Op::Transpose(self.clone())))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (&[n, k], &[k2, m]) = (self.shape(), other.shape()) else {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs: self.shape().to_vec(), rhs: other.shape().to_vec() });
        };
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs: self.shape().to_vec(), rhs: other.shape().to_vec() });
        }
        Ok(Tensor::from_op(kernels::matmul(self.data(), other.data(), n, k, m), vec![n, m], Op::MatMul(self.clone(), other.clone())))
    }

    /// Repeats this tensor (length `m`) into `out_shape`, viewed as
    /// `(outer, m, inner)`.
    pub fn broadcast(&self, outer: usize, inner: usize, out_shape: &[usize]) -> Result<Tensor> {
        if numel(out_shape) != outer * self.len() * inner {
            return Err(AutodiffError::LengthMismatch { len: outer * self.len() * inner, shape: out_shape.to_vec() });
        }
        Ok(Tensor::from_op(
            kernels::broadcast_outer_inner(self.data(), outer, inner),
            out_shape.to_vec(),
            Op::Broadcast { x: self.clone(), outer, inner },
        ))
    }

    /// Views this tensor as `(outer, m, inner)` and sums to shape `(m)`.
    pub fn reduce(&self, outer: usize, inner: usize) -> Result<Tensor> {
        if outer == 0 || inner == 0 || self.len() % (outer * inner) != 0 {
            return Err(AutodiffError::Invalid(format!("cannot reduce length {} by ({outer}, _, {inner})", self.len())));
        }
        let m = self.len() / (outer * inner);
        Ok(Tensor::from_op(
            kernels::reduce_outer_inner(self.data(), outer, inner),
            vec![m],
            Op::Reduce { x: self.clone(), outer, inner },
        ))
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand_scalar(&self, shape: &[usize]) -> Result<Tensor> {
        if self.len() != 1 {
            return Err(AutodiffError::NotScalar(self.shape().to_vec()));
        }
        self.broadcast(1, numel(shape), shape)
    }

    pub fn sum(&self) -> Tensor {
        self.reduce(1, self.len().max(1)).and_then(|t| t.reshape(&[])).expect("full reduction")
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.len() as f64)
    }

    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        Ok(self.mul(other)?.sum())
    }

    /// Sum along the last axis of a 2-D tensor, returning shape `(rows)`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let [_, c] = self.shape() else {
            return Err(AutodiffError::Invalid(format!("sum_rows needs a matrix, got {:?}", self.shape())));
        };
        self.reduce(1, *c)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(AutodiffError::Invalid(format!("narrow({axis}, {start}, {len}) out of range for {shape:?}")));
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(Tensor::from_op(
            kernels::narrow(self.data(), shape, axis, start, len),
            out_shape,
            Op::Narrow { x: self.clone(), axis, start },
        ))
    }

    /// Zero-pads along `axis` so that this tensor occupies
    /// `[start, start + len)` of a dimension of size `full`.
    pub fn pad(&self, axis: usize, start: usize, full: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + shape[axis] > full {
            return Err(AutodiffError::Invalid(format!("pad({axis}, {start}, {full}) out of range for {shape:?}")));
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = full;
        Ok(Tensor::from_op(kernels::pad(self.data(), shape, axis, start, full), out_shape, Op::Pad { x: self.clone(), axis, start }))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax(&self) -> Result<Tensor> {
        let [_, c] = self.shape() else {
            return Err(AutodiffError::Invalid(format!("softmax needs a matrix, got {:?}", self.shape())));
        };
        Ok(Tensor::from_op(kernels::softmax_rows(self.data(), *c), self.shape().to_vec(), Op::Softmax(self.clone())))
    }

    /// Mean softmax cross-entropy of `(n, classes)` logits against labels.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let [n, c] = self.shape() else {
            return Err(AutodiffError::Invalid(format!("cross-entropy needs (n, classes) logits, got {:?}", self.shape())));
        };
        if labels.len() != *n {
            return Err(AutodiffError::Invalid(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= *c) {
            return Err(AutodiffError::Invalid(format!("label {bad} out of range for {c} classes")));
        }
        let v = kernels::softmax_cross_entropy(self.data(), *c, labels);
        Ok(Tensor::from_op(vec![v], vec![], Op::SoftmaxCrossEntropy { logits: self.clone(), labels: labels.into() }))
    }

    /// 2-D convolution (cross-correlation) of `(n, c, h, w)` input with an
    /// `(o, c, kh, kw)` kernel.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let geom = conv_geom(self.shape(), weight.shape(), stride, pad)?;
        Ok(Tensor::from_op(kernels::conv2d(self.data(), weight.data(), &geom), geom.output_shape(), Op::Conv2d { x: self.clone(), w: weight.clone(), geom }))
    }

    pub(crate) fn conv2d_geom(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Tensor {
        Tensor::from_op(kernels::conv2d(x.data(), w.data(), &geom), geom.output_shape(), Op::Conv2d { x: x.clone(), w: w.clone(), geom })
    }

    pub(crate) fn conv2d_input_grad(g: &Tensor, w: &Tensor, geom: ConvGeom) -> Tensor {
        Tensor::from_op(
            kernels::conv2d_input_grad(g.data(), w.data(), &geom),
            geom.input_shape(),
            Op::Conv2dInputGrad { g: g.clone(), w: w.clone(), geom },
        )
    }

    pub(crate) fn conv2d_weight_grad(x: &Tensor, g: &Tensor, geom: ConvGeom) -> Tensor {
        Tensor::from_op(
            kernels::conv2d_weight_grad(x.data(), g.data(), &geom),
            geom.weight_shape(),
            Op::Conv2dWeightGrad { x: x.clone(), g: g.clone(), geom },
        )
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&self, other: &Tensor) -> Result<Tensor> {
        Ok(self.sub(other)?.square().mean())
    }

    /// Cosine similarity `<a, b> / (|a| |b|)` over all elements.
    pub fn cosine_similarity(&self, other: &Tensor) -> Result<Tensor> {
        let num = self.dot(other)?;
        let den = self.dot(self)?.sqrt().mul(&other.dot(other)?.sqrt())?;
        num.div(&den)
    }
}

fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    let mismatch = || AutodiffError::ShapeMismatch { op: "conv2d", lhs: x.to_vec(), rhs: w.to_vec() };
    let (&[n, c, h, wd], &[o, c2, kh, kw]) = (x, w) else {
        return Err(mismatch());
    };
    if c != c2 || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(mismatch());
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    Ok(ConvGeom { n, c, h, w: wd, o, kh, kw, stride, pad, oh, ow })
}
