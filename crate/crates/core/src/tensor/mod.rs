//! Dense 5-axis tensors (N, C, H, W, D) with reverse-mode automatic
//! differentiation. Graphs are built define-by-run: every op evaluates
//! eagerly and records enough to run a single reverse pass.
//!
//! Kernels are single-threaded with a fixed accumulation order, so results
//! are bit-reproducible.

mod conv;
mod kernels;

use thiserror::Error;

pub use conv::conv3d_output_dim;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {context}: {lhs} vs {rhs}")]
    ShapeMismatch { context: &'static str, lhs: String, rhs: String },
    #[error("invalid axis {axis} (tensors have 5 axes)")]
    InvalidAxis { axis: usize },
    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(String),
    #[error("{0}")]
    Unsupported(String),
}

/// Element type of the engine. Training uses f32; gradient checks run the
/// same kernels at f64.
pub trait Element:
    num_traits::Float + num_traits::NumAssignOps + Default + Copy + std::fmt::Debug + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// (N, C, H, W, D). Convolution weights reuse the container as
/// (C_out, C_in, k, k, k).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape(pub [usize; 5]);

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize, d: usize) -> Self {
        Shape([n, c, h, w, d])
    }

    pub fn scalar() -> Self {
        Shape([1; 5])
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.0[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.0[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.0[3]
    }
    #[inline]
    pub fn d(&self) -> usize {
        self.0[4]
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.0.iter().product()
    }

    #[inline]
    pub fn spatial_count(&self) -> usize {
        self.0[2] * self.0[3] * self.0[4]
    }

    #[inline]
    pub fn strides(&self) -> [usize; 5] {
        let s = &self.0;
        [s[1] * s[2] * s[3] * s[4], s[2] * s[3] * s[4], s[3] * s[4], s[4], 1]
    }

    /// Per-axis broadcast (each axis equal, or one side of size 1).
    pub fn broadcast(&self, other: &Shape) -> Option<Shape> {
        let mut out = [0usize; 5];
        for a in 0..5 {
            let (x, y) = (self.0[a], other.0[a]);
            if x == y {
                out[a] = x;
            } else if x == 1 {
                out[a] = y;
            } else if y == 1 {
                out[a] = x;
            } else {
                return None;
            }
        }
        Some(Shape(out))
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{},{})", self.0[0], self.0[1], self.0[2], self.0[3], self.0[4])
    }
}

/// A tensor value living outside any graph (parameters, constants).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData<T> {
    pub shape: Shape,
    pub data: Vec<T>,
}

impl<T: Element> TensorData<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(data.len(), shape.count(), "value count must match shape");
        TensorData { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        TensorData { shape, data: vec![T::zero(); shape.count()] }
    }

    pub fn full(shape: Shape, v: T) -> Self {
        TensorData { shape, data: vec![v; shape.count()] }
    }

    pub fn scalar(v: T) -> Self {
        TensorData { shape: Shape::scalar(), data: vec![v] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum UnaryKind {
    LeakyRelu(f64),
    Sigmoid,
    Scale(f64),
    AddScalar(f64),
    Sqrt,
    Abs,
    Clamp01,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Unary(UnaryKind, Var),
    Binary(BinaryKind, Var, Var),
    Conv3d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    InstanceNorm { x: Var, eps: f64 },
    Reduce { kind: ReduceKind, x: Var, axes: [bool; 5] },
    ConcatChannels(Vec<Var>),
    StackBatch(Vec<Var>),
    SliceBatch { x: Var, index: usize },
    Upsample2(Var),
    AvgPool2(Var),
    /// Boundary-aware total variation: per-sample L1 of forward differences
    /// over the boundary voxels, optionally normalized by the boundary count,
    /// averaged over the batch.
    BoundaryTv { x: Var, boundary: Var, normalize: bool },
}

pub(crate) struct Node<T> {
    pub shape: Shape,
    pub value: Vec<T>,
    pub op: Op,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

/// A single-use differentiation graph.
pub struct Graph<T: Element> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Shape, value: Vec<T>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.count());
        self.nodes.push(Node { shape, value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradients are materialized for it during backward.
    pub fn leaf(&mut self, t: TensorData<T>) -> Var {
        self.push(t.shape, t.data, Op::Leaf, true)
    }

    /// Non-trainable input (images, masks, detached values).
    pub fn constant(&mut self, t: TensorData<T>) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor_data(&self, v: Var) -> TensorData<T> {
        TensorData { shape: self.nodes[v.0].shape, data: self.nodes[v.0].value.clone() }
    }

    pub fn scalar(&self, v: Var) -> T {
        assert_eq!(self.nodes[v.0].shape.count(), 1, "scalar() on non-scalar tensor");
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Trainable leaves in creation order. When parameters are bound before
    /// any other graph construction this matches the visitor order of the
    /// parameter structs.
    pub fn trainable_leaves(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.requires_grad)
            .map(|(i, _)| Var(i))
            .collect()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // -- elementwise ---------------------------------------------------------

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let shape = self.shape(x);
        let value = kernels::unary_forward(kind, self.value(x));
        let rg = self.requires(x);
        self.push(shape, value, Op::Unary(kind, x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(UnaryKind::LeakyRelu(slope), x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::LeakyRelu(0.0), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::AddScalar(c), x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn clamp01(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Clamp01, x)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = sa.broadcast(&sb).ok_or_else(|| TensorError::ShapeMismatch {
            context: "elementwise binary op",
            lhs: sa.to_string(),
            rhs: sb.to_string(),
        })?;
        let value = kernels::binary_forward(kind, sa, self.value(a), sb, self.value(b), shape);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Div, a, b)
    }

    // -- convolution / normalization -----------------------------------------

    /// Zero-padded cross-correlation with cubic kernels.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        conv::validate(xs, ws, bs)?;
        let (value, shape) =
            conv::forward(self.value(x), xs, self.value(w), ws, self.value(b), stride, pad)?;
        debug_assert_eq!(value.len(), shape.count());
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(shape, value, Op::Conv3d { x, w, b, stride, pad }, rg))
    }

    /// Per-(n, c) standardization over spatial voxels.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.shape(x);
        let value = conv::instance_norm_forward(self.value(x), shape, eps);
        let rg = self.requires(x);
        self.push(shape, value, Op::InstanceNorm { x, eps }, rg)
    }

    // -- reductions ----------------------------------------------------------

    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let mut mask = [false; 5];
        for &a in axes {
            if a >= 5 {
                return Err(TensorError::InvalidAxis { axis: a });
            }
            mask[a] = true;
        }
        let xs = self.shape(x);
        let (value, shape) = kernels::reduce_forward(kind, self.value(x), xs, mask);
        let rg = self.requires(x);
        Ok(self.push(shape, value, Op::Reduce { kind, x, axes: mask }, rg))
    }

    pub fn reduce_sum(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        self.reduce(ReduceKind::Sum, x, axes)
    }

    pub fn reduce_mean(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        self.reduce(ReduceKind::Mean, x, axes)
    }

    pub fn reduce_max(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        self.reduce(ReduceKind::Max, x, axes)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        self.reduce(ReduceKind::Sum, x, &[0, 1, 2, 3, 4]).expect("axes are valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        self.reduce(ReduceKind::Mean, x, &[0, 1, 2, 3, 4]).expect("axes are valid")
    }

    // -- structural ----------------------------------------------------------

    /// Stack channels in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        assert!(!xs.is_empty());
        let first = self.shape(xs[0]);
        let mut c_total = 0;
        for &x in xs {
            let s = self.shape(x);
            if [s.n(), s.h(), s.w(), s.d()] != [first.n(), first.h(), first.w(), first.d()] {
                return Err(TensorError::ShapeMismatch {
                    context: "concat_channels",
                    lhs: first.to_string(),
                    rhs: s.to_string(),
                });
            }
            c_total += s.c();
        }
        let shape = Shape::new(first.n(), c_total, first.h(), first.w(), first.d());
        let parts: Vec<(Shape, &[T])> = xs.iter().map(|&x| (self.shape(x), self.value(x))).collect();
        let value = kernels::concat_channels_forward(&parts, shape);
        let rg = xs.iter().any(|&x| self.requires(x));
        Ok(self.push(shape, value, Op::ConcatChannels(xs.to_vec()), rg))
    }

    /// Stack along the batch axis.
    pub fn stack_batch(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        assert!(!xs.is_empty());
        let first = self.shape(xs[0]);
        let mut n_total = 0;
        let mut value = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.0[1..] != first.0[1..] {
                return Err(TensorError::ShapeMismatch {
                    context: "stack_batch",
                    lhs: first.to_string(),
                    rhs: s.to_string(),
                });
            }
            n_total += s.n();
            value.extend_from_slice(self.value(x));
        }
        let shape = Shape::new(n_total, first.c(), first.h(), first.w(), first.d());
        let rg = xs.iter().any(|&x| self.requires(x));
        Ok(self.push(shape, value, Op::StackBatch(xs.to_vec()), rg))
    }

    /// Extract one sample from the batch axis.
    pub fn slice_batch(&mut self, x: Var, index: usize) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        if index >= xs.n() {
            return Err(TensorError::Unsupported(format!(
                "slice_batch index {index} out of range for batch size {}",
                xs.n()
            )));
        }
        let shape = Shape::new(1, xs.c(), xs.h(), xs.w(), xs.d());
        let len = shape.count();
        let value = self.value(x)[index * len..(index + 1) * len].to_vec();
        let rg = self.requires(x);
        Ok(self.push(shape, value, Op::SliceBatch { x, index }, rg))
    }

    /// Nearest-neighbor 2x upsampling per spatial axis.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let (value, shape) = kernels::upsample2_forward(self.value(x), xs);
        let rg = self.requires(x);
        self.push(shape, value, Op::Upsample2(x), rg)
    }

    /// Non-overlapping 2^3 window mean.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        if xs.h() % 2 != 0 || xs.w() % 2 != 0 || xs.d() % 2 != 0 {
            return Err(TensorError::ShapeMismatch {
                context: "avg_pool2: spatial dims must be divisible by 2",
                lhs: xs.to_string(),
                rhs: "stride 2".into(),
            });
        }
        let (value, shape) = kernels::avg_pool2_forward(self.value(x), xs);
        let rg = self.requires(x);
        Ok(self.push(shape, value, Op::AvgPool2(x), rg))
    }

    /// Scalar boundary-aware total variation; `boundary` must be a constant
    /// 0/1 mask of shape (N, 1, H, W, D).
    pub fn boundary_tv(&mut self, x: Var, boundary: Var, normalize: bool) -> Result<Var, TensorError> {
        let (xs, bs) = (self.shape(x), self.shape(boundary));
        if bs.n() != xs.n() || bs.c() != 1 || bs.0[2..] != xs.0[2..] {
            return Err(TensorError::ShapeMismatch {
                context: "boundary_tv",
                lhs: xs.to_string(),
                rhs: bs.to_string(),
            });
        }
        let value = conv::boundary_tv_forward(self.value(x), xs, self.value(boundary), normalize);
        let rg = self.requires(x);
        Ok(self.push(Shape::scalar(), vec![value], Op::BoundaryTv { x, boundary, normalize }, rg))
    }

    // -- backward ------------------------------------------------------------

    /// Single reverse topological pass from a scalar loss; gradients are
    /// accumulated for every reachable trainable node.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let loss_shape = self.shape(loss);
        if loss_shape.count() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_string()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = g;
        }
        Ok(())
    }

    fn ensure<'a>(grads: &'a mut [Option<Vec<T>>], var: Var, len: usize) -> &'a mut [T] {
        grads[var.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                if self.requires(*x) {
                    let dx = Self::ensure(grads, *x, self.nodes[x.0].value.len());
                    kernels::unary_backward(*kind, self.value(*x), &node.value, g, dx);
                }
            }
            Op::Binary(kind, a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let need_a = self.requires(*a);
                let need_b = self.requires(*b);
                // Split borrows: contributions are computed into fresh buffers
                // when both parents alias the same node.
                let mut da = need_a.then(|| vec![T::zero(); self.nodes[a.0].value.len()]);
                let mut db = need_b.then(|| vec![T::zero(); self.nodes[b.0].value.len()]);
                kernels::binary_backward(
                    *kind,
                    sa,
                    self.value(*a),
                    sb,
                    self.value(*b),
                    node.shape,
                    g,
                    da.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(da) = da {
                    let dst = Self::ensure(grads, *a, da.len());
                    for (d, s) in dst.iter_mut().zip(&da) {
                        *d += *s;
                    }
                }
                if let Some(db) = db {
                    let dst = Self::ensure(grads, *b, db.len());
                    for (d, s) in dst.iter_mut().zip(&db) {
                        *d += *s;
                    }
                }
            }
            Op::Conv3d { x, w, b, stride, pad } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                if self.requires(*x) {
                    let mut dx = vec![T::zero(); self.nodes[x.0].value.len()];
                    conv::backward_input(&mut dx, xs, self.value(*w), ws, g, node.shape, *stride, *pad);
                    let dst = Self::ensure(grads, *x, dx.len());
                    for (d, s) in dst.iter_mut().zip(&dx) {
                        *d += *s;
                    }
                }
                if self.requires(*w) {
                    let mut dw = vec![T::zero(); self.nodes[w.0].value.len()];
                    conv::backward_weight(&mut dw, ws, self.value(*x), xs, g, node.shape, *stride, *pad);
                    let dst = Self::ensure(grads, *w, dw.len());
                    for (d, s) in dst.iter_mut().zip(&dw) {
                        *d += *s;
                    }
                }
                if self.requires(*b) {
                    let dst = Self::ensure(grads, *b, self.nodes[b.0].value.len());
                    conv::backward_bias(dst, g, node.shape);
                }
            }
            Op::InstanceNorm { x, eps } => {
                if self.requires(*x) {
                    let dx = Self::ensure(grads, *x, self.nodes[x.0].value.len());
                    conv::instance_norm_backward(self.value(*x), &node.value, node.shape, *eps, g, dx);
                }
            }
            Op::Reduce { kind, x, axes } => {
                if self.requires(*x) {
                    let dx = Self::ensure(grads, *x, self.nodes[x.0].value.len());
                    kernels::reduce_backward(*kind, self.value(*x), self.shape(*x), &node.value, node.shape, *axes, g, dx);
                }
            }
            Op::ConcatChannels(xs) => {
                let shapes: Vec<Shape> = xs.iter().map(|&x| self.shape(x)).collect();
                let mut c_off = 0;
                for (&x, s) in xs.iter().zip(&shapes) {
                    if self.requires(x) {
                        let dx = Self::ensure(grads, x, self.nodes[x.0].value.len());
                        kernels::concat_channels_backward(g, node.shape, c_off, *s, dx);
                    }
                    c_off += s.c();
                }
            }
            Op::StackBatch(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.nodes[x.0].value.len();
                    if self.requires(x) {
                        let dx = Self::ensure(grads, x, len);
                        for (d, s) in dx.iter_mut().zip(&g[off..off + len]) {
                            *d += *s;
                        }
                    }
                    off += len;
                }
            }
            Op::SliceBatch { x, index } => {
                if self.requires(*x) {
                    let len = node.value.len();
                    let dx = Self::ensure(grads, *x, self.nodes[x.0].value.len());
                    for (d, s) in dx[index * len..(index + 1) * len].iter_mut().zip(g) {
                        *d += *s;
                    }
                }
            }
            Op::Upsample2(x) => {
                if self.requires(*x) {
                    let dx = Self::ensure(grads, *x, self.nodes[x.0].value.len());
                    kernels::upsample2_backward(g, node.shape, self.shape(*x), dx);
                }
            }
            Op::AvgPool2(x) => {
                if self.requires(*x) {
                    let dx = Self::ensure(grads, *x, self.nodes[x.0].value.len());
                    kernels::avg_pool2_backward(g, node.shape, self.shape(*x), dx);
                }
            }
            Op::BoundaryTv { x, boundary, normalize } => {
                if self.requires(*x) {
                    let dx = Self::ensure(grads, *x, self.nodes[x.0].value.len());
                    conv::boundary_tv_backward(
                        self.value(*x),
                        self.shape(*x),
                        self.value(*boundary),
                        *normalize,
                        g[0],
                        dx,
                    );
                }
            }
        }
    }
}

/// Central-difference gradient check for a scalar-valued tensor function.
///
/// `build` must construct the loss from a leaf inserted for `theta`; the
/// analytic gradient comes from one backward pass, then each probed
/// coordinate is re-evaluated at theta +/- eps.
///
/// Returns the max over probes of |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
pub fn finite_difference_check<T: Element>(
    build: &dyn Fn(&mut Graph<T>, Var) -> Var,
    theta: &TensorData<T>,
    probes: &[usize],
    eps: f64,
) -> f64 {
    let eval = |t: &TensorData<T>| -> f64 {
        let mut graph = Graph::new();
        let leaf = graph.leaf(t.clone());
        let loss = build(&mut graph, leaf);
        graph.scalar(loss).into_f64()
    };

    let mut graph = Graph::new();
    let leaf = graph.leaf(theta.clone());
    let loss = build(&mut graph, leaf);
    graph.backward(loss).expect("loss must be scalar");
    let analytic: Vec<f64> = graph
        .grad(leaf)
        .map(|g| g.iter().map(|v| v.into_f64()).collect())
        .unwrap_or_else(|| vec![0.0; theta.data.len()]);

    let mut max_rel = 0.0f64;
    for &p in probes {
        let mut plus = theta.clone();
        plus.data[p] = T::from_f64(plus.data[p].into_f64() + eps);
        let mut minus = theta.clone();
        minus.data[p] = T::from_f64(minus.data[p].into_f64() - eps);
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        let ad = analytic[p];
        let rel = (ad - fd).abs() / f64::max(1e-8, ad.abs() + fd.abs());
        max_rel = max_rel.max(rel);
    }
    max_rel
}

/// Run [`finite_difference_check`] at several step sizes for diagnosis.
pub fn finite_difference_sweep<T: Element>(
    build: &dyn Fn(&mut Graph<T>, Var) -> Var,
    theta: &TensorData<T>,
    probes: &[usize],
    epsilons: &[f64],
) -> Vec<(f64, f64)> {
    epsilons
        .iter()
        .map(|&eps| (eps, finite_difference_check(build, theta, probes, eps)))
        .collect()
}
