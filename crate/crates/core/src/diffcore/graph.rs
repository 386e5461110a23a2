use std::sync::Arc;

use rustfft::num_complex::Complex;

use super::kernels as k;
use super::ssim::{ssim_plane, ssim_plane_grad, SsimParams};
use super::tensor::{shape_len, Scalar, Shape, Tensor};
use crate::error::{Error, Result};
use crate::fft::Fft2d;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Name and shape of a trainable leaf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
}

/// Fixed real kernel applied by circular convolution, stored as its spectrum.
#[derive(Clone)]
pub struct FixedKernel<T: Scalar> {
    pub(crate) fft: Fft2d<T>,
    pub(crate) transfer: Vec<Complex<T>>,
}

impl<T: Scalar> FixedKernel<T> {
    /// `transfer` is the DFT of the kernel on a `width × height` grid, DC at index 0.
    pub fn new(width: usize, height: usize, transfer: Vec<Complex<T>>) -> Result<Self> {
        if transfer.len() != width * height {
            return Err(Error::shape(format!(
                "transfer function has {} entries for a {width}x{height} grid",
                transfer.len()
            )));
        }
        Ok(Self {
            fft: Fft2d::new(width, height),
            transfer,
        })
    }
}

impl<T: Scalar> std::fmt::Debug for FixedKernel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FixedKernel({}x{})", self.fft.width(), self.fft.height())
    }
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Input(usize),
    Param(usize),
    Const(Arc<Tensor<T>>),
    Conv2d { x: NodeId, w: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    MaxPool2(NodeId),
    Upsample2(NodeId),
    Concat(NodeId, NodeId),
    FftConv(NodeId, Arc<FixedKernel<T>>),
    BinMean(NodeId, usize),
    Mean(NodeId),
    Ssim(NodeId, NodeId, SsimParams),
    Affine(NodeId, T, T),
    TotalVariation(NodeId),
    Mse(NodeId, NodeId),
}

impl<T: Scalar> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::Conv2d { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Relu(_) => "relu",
            Op::MaxPool2(_) => "max_pool2",
            Op::Upsample2(_) => "upsample2",
            Op::Concat(..) => "concat",
            Op::FftConv(..) => "fft_conv",
            Op::BinMean(..) => "bin_mean",
            Op::Mean(_) => "mean",
            Op::Ssim(..) => "ssim",
            Op::Affine(..) => "affine",
            Op::TotalVariation(_) => "total_variation",
            Op::Mse(..) => "mse",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
            Op::Conv2d { x, w, b } => vec![*x, *w, *b],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Concat(a, b) | Op::Ssim(a, b, _) | Op::Mse(a, b) => {
                vec![*a, *b]
            }
            Op::Relu(x)
            | Op::MaxPool2(x)
            | Op::Upsample2(x)
            | Op::FftConv(x, _)
            | Op::BinMean(x, _)
            | Op::Mean(x)
            | Op::Affine(x, ..)
            | Op::TotalVariation(x) => vec![*x],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    op: Op<T>,
    shape: Shape,
    name: Option<String>,
    needs_grad: bool,
}

/// Immutable-after-build expression graph over 4-D arrays.
///
/// Nodes are appended in topological order. Inputs and parameters are bound
/// at evaluation time, so one graph serves any number of evaluations.
#[derive(Debug, Clone, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    inputs: Vec<Shape>,
    params: Vec<ParamSpec>,
}

/// Forward values of every node of one evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation<T: Scalar> {
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Evaluation<T> {
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }
}

const SCALAR: Shape = [1, 1, 1, 1];

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            inputs: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn input_shapes(&self) -> &[Shape] {
        &self.inputs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    /// `op#id`, or the name given with [`Graph::set_name`].
    pub fn label(&self, id: NodeId) -> String {
        let n = &self.nodes[id.0];
        match &n.name {
            Some(name) => format!("{name} ({}#{})", n.op.kind(), id.0),
            None => format!("{}#{}", n.op.kind(), id.0),
        }
    }

    pub fn set_name(&mut self, id: NodeId, name: impl Into<String>) {
        self.nodes[id.0].name = Some(name.into());
    }

    /// Number of nodes of a given kind, e.g. `"conv2d"`.
    pub fn count_ops(&self, kind: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    fn push(&mut self, op: Op<T>, shape: Shape) -> NodeId {
        let needs_grad = match &op {
            Op::Param(_) => true,
            other => other.operands().iter().any(|o| self.nodes[o.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            name: None,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn next_label(&self, kind: &str) -> String {
        format!("{kind}#{}", self.nodes.len())
    }

    fn err(&self, kind: &str, msg: String) -> Error {
        Error::shape(format!("{}: {msg}", self.next_label(kind)))
    }

    pub fn input(&mut self, shape: Shape) -> NodeId {
        self.inputs.push(shape);
        self.push(Op::Input(self.inputs.len() - 1), shape)
    }

    pub fn param(&mut self, name: impl Into<String>, shape: Shape) -> NodeId {
        let name = name.into();
        self.params.push(ParamSpec {
            name: name.clone(),
            shape,
        });
        let id = self.push(Op::Param(self.params.len() - 1), shape);
        self.nodes[id.0].name = Some(name);
        id
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let shape = value.shape;
        self.push(Op::Const(Arc::new(value)), shape)
    }

    /// 3×3 same-padded convolution. `w` has shape `(cout, cin, 3, 3)`, `b` `(cout, 1, 1, 1)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws[2] != 3 || ws[3] != 3 || ws[1] != xs[1] {
            return Err(self.err(
                "conv2d",
                format!("weight {ws:?} incompatible with input {xs:?} (need (cout, {}, 3, 3))", xs[1]),
            ));
        }
        if bs != [ws[0], 1, 1, 1] {
            return Err(self.err("conv2d", format!("bias {bs:?} should be [{}, 1, 1, 1]", ws[0])));
        }
        Ok(self.push(Op::Conv2d { x, w, b }, [xs[0], ws[0], xs[2], xs[3]]))
    }

    fn broadcast(&self, kind: &str, a: NodeId, b: NodeId) -> Result<Shape> {
        k::broadcast_shape(&self.shape(a), &self.shape(b)).ok_or_else(|| {
            self.err(
                kind,
                format!("cannot broadcast {:?} with {:?}", self.shape(a), self.shape(b)),
            )
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.broadcast("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.broadcast("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        self.push(Op::Relu(x), s)
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let [b, c, h, w] = self.shape(x);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(self.err("max_pool2", format!("spatial size {h}x{w} is not even")));
        }
        Ok(self.push(Op::MaxPool2(x), [b, c, h / 2, w / 2]))
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let [b, c, h, w] = self.shape(x);
        self.push(Op::Upsample2(x), [b, c, 2 * h, 2 * w])
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(self.err("concat", format!("cannot concatenate {sa:?} with {sb:?}")));
        }
        Ok(self.push(Op::Concat(a, b), [sa[0], sa[1] + sb[1], sa[2], sa[3]]))
    }

    pub fn fft_conv(&mut self, x: NodeId, kernel: Arc<FixedKernel<T>>) -> Result<NodeId> {
        let s = self.shape(x);
        if kernel.fft.width() != s[3] || kernel.fft.height() != s[2] {
            return Err(self.err(
                "fft_conv",
                format!(
                    "kernel grid {}x{} does not match input {}x{}",
                    kernel.fft.width(),
                    kernel.fft.height(),
                    s[3],
                    s[2]
                ),
            ));
        }
        Ok(self.push(Op::FftConv(x, kernel), s))
    }

    pub fn bin_mean(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let [b, c, h, w] = self.shape(x);
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(self.err("bin_mean", format!("{h}x{w} is not divisible by {factor}")));
        }
        Ok(self.push(Op::BinMean(x, factor), [b, c, h / factor, w / factor]))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x), SCALAR)
    }

    /// Mean SSIM over all planes of `x` against `y`.
    pub fn ssim(&mut self, x: NodeId, y: NodeId, params: SsimParams) -> Result<NodeId> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sx != sy {
            return Err(self.err("ssim", format!("operands {sx:?} and {sy:?} differ")));
        }
        params.validate()?;
        params
            .check_size(sx[3], sx[2])
            .map_err(|e| self.err("ssim", e.to_string()))?;
        Ok(self.push(Op::Ssim(x, y, params), SCALAR))
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: T, shift: T) -> NodeId {
        let s = self.shape(x);
        self.push(Op::Affine(x, scale, shift), s)
    }

    /// Mean anisotropic total variation (forward differences, no wrap).
    pub fn total_variation(&mut self, x: NodeId) -> NodeId {
        self.push(Op::TotalVariation(x), SCALAR)
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(self.err("mse", format!("operands {sa:?} and {sb:?} differ")));
        }
        Ok(self.push(Op::Mse(a, b), SCALAR))
    }

    /// Forward pass with `inputs` bound in creation order and `params` in [`Graph::params`] order.
    pub fn evaluate(&self, inputs: &[Tensor<T>], params: &[Tensor<T>]) -> Result<Evaluation<T>> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::shape(format!(
                "graph has {} inputs, {} bound",
                self.inputs.len(),
                inputs.len()
            )));
        }
        if params.len() != self.params.len() {
            return Err(Error::shape(format!(
                "graph has {} parameters, {} bound",
                self.params.len(),
                params.len()
            )));
        }
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let id = NodeId(i);
            let v = |n: &NodeId| &values[n.0];
            let out = match &node.op {
                Op::Input(slot) => {
                    let t = &inputs[*slot];
                    if t.shape != node.shape || t.data.len() != shape_len(&t.shape) {
                        return Err(Error::shape(format!(
                            "{}: bound {:?}, expected {:?}",
                            self.label(id),
                            t.shape,
                            node.shape
                        )));
                    }
                    t.clone()
                }
                Op::Param(slot) => {
                    let t = &params[*slot];
                    if t.shape != node.shape || t.data.len() != shape_len(&t.shape) {
                        return Err(Error::shape(format!(
                            "{}: bound {:?}, expected {:?}",
                            self.label(id),
                            t.shape,
                            node.shape
                        )));
                    }
                    t.clone()
                }
                Op::Const(t) => (**t).clone(),
                Op::Conv2d { x, w, b } => k::conv2d_forward(v(x), v(w), v(b)),
                Op::Add(a, b) => k::binary_forward(v(a), v(b), node.shape, |p, q| p + q),
                Op::Mul(a, b) => k::binary_forward(v(a), v(b), node.shape, |p, q| p * q),
                Op::Relu(x) => v(x).map(|p| if p < T::zero() { T::zero() } else { p }),
                Op::MaxPool2(x) => k::max_pool2_forward(v(x)),
                Op::Upsample2(x) => k::upsample2_forward(v(x)),
                Op::Concat(a, b) => k::concat_forward(v(a), v(b)),
                Op::FftConv(x, kern) => k::fft_conv(v(x), &kern.fft, &kern.transfer, false),
                Op::BinMean(x, f) => k::bin_mean_forward(v(x), *f),
                Op::Mean(x) => {
                    let t = v(x);
                    Tensor::scalar(T::of(compensated_sum(t.data.iter().map(|p| p.as_f64())) / t.len() as f64))
                }
                Op::Ssim(x, y, p) => Tensor::scalar(T::of(ssim_mean(v(x), v(y), p))),
                Op::Affine(x, s, t) => v(x).map(|p| *s * p + *t),
                Op::TotalVariation(x) => Tensor::scalar(k::total_variation(v(x))),
                Op::Mse(a, b) => {
                    let (ta, tb) = (v(a), v(b));
                    let s = ta
                        .data
                        .iter()
                        .zip(&tb.data)
                        .fold(0.0f64, |acc, (p, q)| acc + (p.as_f64() - q.as_f64()).powi(2));
                    Tensor::scalar(T::of(s / ta.len() as f64))
                }
            };
            values.push(out);
        }
        Ok(Evaluation { values })
    }

    /// Reverse-mode gradients of the scalar node `loss` for every parameter,
    /// in [`Graph::params`] order. Unreachable parameters get zero gradients.
    pub fn backward(&self, eval: &Evaluation<T>, loss: NodeId) -> Result<Vec<Tensor<T>>> {
        if self.shape(loss) != SCALAR {
            return Err(Error::shape(format!(
                "{}: loss must be scalar, has shape {:?}",
                self.label(loss),
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Tensor::scalar(T::one()));
        let mut grads: Vec<Tensor<T>> = self.params.iter().map(|p| Tensor::zeros(p.shape)).collect();
        let val = |n: &NodeId| &eval.values[n.0];
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = adj[i].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            let need = |n: &NodeId| self.nodes[n.0].needs_grad;
            let send = |n: NodeId, t: Tensor<T>, adj: &mut Vec<Option<Tensor<T>>>| match &mut adj[n.0] {
                Some(a) => a.add_assign(&t),
                slot => *slot = Some(t),
            };
            match &node.op {
                Op::Input(_) | Op::Const(_) => {}
                Op::Param(slot) => grads[*slot] = g,
                Op::Conv2d { x, w, b } => {
                    let (gx, gw, gb) = k::conv2d_backward(val(x), val(w), &g, need(x));
                    if let Some(gx) = gx {
                        send(*x, gx, &mut adj);
                    }
                    if need(w) {
                        send(*w, gw, &mut adj);
                    }
                    if need(b) {
                        send(*b, gb, &mut adj);
                    }
                }
                Op::Add(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    if need(a) {
                        let t = if sa == g.shape { g.clone() } else { k::binary_adjoint(&sa, &sb, &g, true, |_, _| T::one()) };
                        send(*a, t, &mut adj);
                    }
                    if need(b) {
                        let t = if sb == g.shape { g.clone() } else { k::binary_adjoint(&sa, &sb, &g, false, |_, _| T::one()) };
                        send(*b, t, &mut adj);
                    }
                }
                Op::Mul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (va, vb) = (val(a), val(b));
                    if need(a) {
                        send(*a, k::binary_adjoint(&sa, &sb, &g, true, |j, _| vb.data[j]), &mut adj);
                    }
                    if need(b) {
                        send(*b, k::binary_adjoint(&sa, &sb, &g, false, |j, _| va.data[j]), &mut adj);
                    }
                }
                Op::Relu(x) => {
                    let vx = val(x);
                    let mut t = g;
                    for (gi, &xi) in t.data.iter_mut().zip(&vx.data) {
                        if xi <= T::zero() {
                            *gi = T::zero();
                        }
                    }
                    send(*x, t, &mut adj);
                }
                Op::MaxPool2(x) => send(*x, k::max_pool2_backward(val(x), &g), &mut adj),
                Op::Upsample2(x) => send(*x, k::upsample2_backward(self.shape(*x), &g), &mut adj),
                Op::Concat(a, b) => {
                    let (ga, gb) = k::concat_backward(self.shape(*a)[1], &g);
                    if need(a) {
                        send(*a, ga, &mut adj);
                    }
                    if need(b) {
                        send(*b, gb, &mut adj);
                    }
                }
                Op::FftConv(x, kern) => send(*x, k::fft_conv(&g, &kern.fft, &kern.transfer, true), &mut adj),
                Op::BinMean(x, f) => send(*x, k::bin_mean_backward(self.shape(*x), &g, *f), &mut adj),
                Op::Mean(x) => {
                    let s = self.shape(*x);
                    send(*x, Tensor::filled(s, g.item() / T::of(shape_len(&s) as f64)), &mut adj);
                }
                Op::Ssim(x, y, p) => {
                    let (gx, gy) = ssim_mean_grad(val(x), val(y), p, g.item());
                    if need(x) {
                        send(*x, gx, &mut adj);
                    }
                    if need(y) {
                        send(*y, gy, &mut adj);
                    }
                }
                Op::Affine(x, s, _) => {
                    let s = *s;
                    send(*x, g.map(|v| v * s), &mut adj);
                }
                Op::TotalVariation(x) => send(*x, k::total_variation_backward(val(x), g.item()), &mut adj),
                Op::Mse(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    let c = T::of(2.0) * g.item() / T::of(va.len() as f64);
                    let diff: Vec<T> = va.data.iter().zip(&vb.data).map(|(&p, &q)| c * (p - q)).collect();
                    if need(b) {
                        let neg = Tensor { shape: va.shape, data: diff.iter().map(|&d| -d).collect() };
                        send(*b, neg, &mut adj);
                    }
                    if need(a) {
                        send(*a, Tensor { shape: va.shape, data: diff }, &mut adj);
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn planes<T: Scalar>(t: &Tensor<T>) -> impl Iterator<Item = Vec<f64>> + '_ {
    t.data.chunks(t.plane()).map(|p| p.iter().map(|v| v.as_f64()).collect())
}

fn ssim_mean<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, p: &SsimParams) -> f64 {
    let (h, w) = (x.shape[2], x.shape[3]);
    let n = x.shape[0] * x.shape[1];
    planes(x)
        .zip(planes(y))
        .map(|(a, b)| ssim_plane(&a, &b, w, h, p))
        .sum::<f64>()
        / n as f64
}

fn ssim_mean_grad<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, p: &SsimParams, g: T) -> (Tensor<T>, Tensor<T>) {
    let (h, w) = (x.shape[2], x.shape[3]);
    let n = x.shape[0] * x.shape[1];
    let scale = g.as_f64() / n as f64;
    let mut gx = Vec::with_capacity(x.len());
    let mut gy = Vec::with_capacity(x.len());
    for (a, b) in planes(x).zip(planes(y)) {
        let (_, da, db) = ssim_plane_grad(&a, &b, w, h, p);
        gx.extend(da.into_iter().map(|v| T::of(v * scale)));
        gy.extend(db.into_iter().map(|v| T::of(v * scale)));
    }
    (
        Tensor { shape: x.shape, data: gx },
        Tensor { shape: y.shape, data: gy },
    )
}
