//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Values are computed eagerly as nodes are added; `backward` walks the tape
//! in reverse. Parameters not reachable from the loss receive exact zero
//! gradients. The graph is generic over `f32` (training) and `f64`
//! (gradient verification).

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayD, ArrayViewD, Axis, Ix2, Ix4, IxDyn};
use rayon::prelude::*;

/// Floating-point element type usable by the engine.
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn from_f(v: f64) -> Self;
    fn to_f(self) -> f64;
}

impl Scalar for f32 {
    fn from_f(v: f64) -> Self {
        v as f32
    }
    fn to_f(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f(v: f64) -> Self {
        v
    }
    fn to_f(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

struct BnSaved<T> {
    x_hat: ArrayD<T>,
    inv_std: Array1<T>,
}

enum Op<T> {
    Leaf { param: Option<usize> },
    Const,
    Add(NodeId, NodeId),
    AddN(Vec<NodeId>),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Affine { x: NodeId, scale: T },
    MulConst { x: NodeId, k: ArrayD<T> },
    AddConst { x: NodeId },
    Sigmoid(NodeId),
    Swish(NodeId),
    Ln(NodeId),
    ClampMin { x: NodeId, min: T },
    SoftmaxC(NodeId),
    ChannelGroupSum { x: NodeId, groups: Vec<Vec<usize>> },
    MulBroadcastChan { x: NodeId, gate: NodeId },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    Depthwise3x3 { x: NodeId, w: NodeId },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: BnSaved<T>,
    },
    AffinePerChannel {
        x: NodeId,
        scale: Array1<T>,
    },
    Upsample2x(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumNC(NodeId),
    SumAxis1(NodeId),
    SelectRows { x: NodeId, indices: Vec<usize> },
}

struct Node<T> {
    value: ArrayD<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-parameter gradients collected by `backward`. Parameters that do not
/// appear on any path to the loss yield exact zeros.
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, param: usize, shape: &[usize]) -> ArrayD<T> {
        match self.grads.get(param).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => ArrayD::from_elem(IxDyn(shape), T::zero()),
        }
    }

    pub fn take(&mut self, param: usize) -> Option<ArrayD<T>> {
        self.grads.get_mut(param).and_then(|g| g.take())
    }

    pub fn is_zero(&self, param: usize) -> bool {
        match self.grads.get(param).and_then(|g| g.as_ref()) {
            Some(g) => g.iter().all(|&v| v == T::zero()),
            None => true,
        }
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    node_grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            node_grads: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        self.nodes[id.0].value[[0]]
    }

    /// Gradient of the last backward root w.r.t. any node that required one.
    pub fn node_grad(&self, id: NodeId) -> Option<&ArrayD<T>> {
        self.node_grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn constant(&mut self, v: ArrayD<T>) -> NodeId {
        self.push(v, Op::Const, false)
    }

    /// Differentiable non-parameter leaf (direct inputs under test).
    pub fn leaf(&mut self, v: ArrayD<T>) -> NodeId {
        self.push(v, Op::Leaf { param: None }, true)
    }

    /// Parameter leaf; gradients are collected under `param` index.
    pub fn param(&mut self, param: usize, v: ArrayD<T>) -> NodeId {
        self.push(v, Op::Leaf { param: Some(param) }, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), needs)
    }

    pub fn add_n(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty());
        let mut v = self.nodes[ids[0].0].value.clone();
        for id in &ids[1..] {
            v = v + &self.nodes[id.0].value;
        }
        let needs = ids.iter().any(|&i| self.needs(i));
        self.push(v, Op::AddN(ids.to_vec()), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), needs)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Div(a, b), needs)
    }

    pub fn affine(&mut self, x: NodeId, scale: T, shift: T) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|e| e * scale + shift);
        let needs = self.needs(x);
        self.push(v, Op::Affine { x, scale }, needs)
    }

    pub fn mul_const(&mut self, x: NodeId, k: ArrayD<T>) -> NodeId {
        let v = &self.nodes[x.0].value * &k;
        let needs = self.needs(x);
        self.push(v, Op::MulConst { x, k }, needs)
    }

    pub fn add_const(&mut self, x: NodeId, k: &ArrayD<T>) -> NodeId {
        let v = &self.nodes[x.0].value + k;
        let needs = self.needs(x);
        self.push(v, Op::AddConst { x }, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(sigmoid_scalar);
        let needs = self.needs(x);
        self.push(v, Op::Sigmoid(x), needs)
    }

    pub fn swish(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|e| e * sigmoid_scalar(e));
        let needs = self.needs(x);
        self.push(v, Op::Swish(x), needs)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|e| e.ln());
        let needs = self.needs(x);
        self.push(v, Op::Ln(x), needs)
    }

    pub fn clamp_min(&mut self, x: NodeId, min: T) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|e| e.max(min));
        let needs = self.needs(x);
        self.push(v, Op::ClampMin { x, min }, needs)
    }

    /// Softmax over axis 1 (channels) of a `[N, C, H, W]` tensor.
    pub fn softmax_channels(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(shape.len(), 4, "softmax expects NCHW");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let xs = self.nodes[x.0].value.as_slice().expect("contiguous");
        let mut out = vec![T::zero(); n * c * hw];
        let mut mx = vec![T::zero(); hw];
        let mut sum = vec![T::zero(); hw];
        for in_ in 0..n {
            let base = in_ * c * hw;
            mx.copy_from_slice(&xs[base..base + hw]);
            for k in 1..c {
                let ch = &xs[base + k * hw..base + (k + 1) * hw];
                for i in 0..hw {
                    if ch[i] > mx[i] {
                        mx[i] = ch[i];
                    }
                }
            }
            sum.iter_mut().for_each(|v| *v = T::zero());
            for k in 0..c {
                let ch = &xs[base + k * hw..base + (k + 1) * hw];
                let oc = &mut out[base + k * hw..base + (k + 1) * hw];
                for i in 0..hw {
                    let e = (ch[i] - mx[i]).exp();
                    oc[i] = e;
                    sum[i] = sum[i] + e;
                }
            }
            for k in 0..c {
                let oc = &mut out[base + k * hw..base + (k + 1) * hw];
                for i in 0..hw {
                    oc[i] = oc[i] / sum[i];
                }
            }
        }
        let needs = self.needs(x);
        let out = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        self.push(out, Op::SoftmaxC(x), needs)
    }

    /// Sum channel groups of a `[N, C, H, W]` tensor into `[N, G, H, W]`.
    pub fn channel_group_sum(&mut self, x: NodeId, groups: &[&[usize]]) -> NodeId {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("group sum expects NCHW");
        let (n, _c, h, w) = xv.dim();
        let mut out = ndarray::Array4::<T>::zeros((n, groups.len(), h, w));
        for (g, members) in groups.iter().enumerate() {
            for &m in members.iter() {
                let src = xv.index_axis(Axis(1), m);
                out.index_axis_mut(Axis(1), g)
                    .zip_mut_with(&src, |o, &v| *o = *o + v);
            }
        }
        let needs = self.needs(x);
        let groups = groups.iter().map(|g| g.to_vec()).collect();
        self.push(out.into_dyn(), Op::ChannelGroupSum { x, groups }, needs)
    }

    /// `x: [N, C, H, W]` gated by `gate: [N, 1, H, W]`.
    pub fn mul_broadcast_channel(&mut self, x: NodeId, gate: NodeId) -> NodeId {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let xs = self.nodes[x.0].value.as_slice().expect("contiguous");
        let gs = self.nodes[gate.0].value.as_slice().expect("contiguous");
        let mut out = vec![T::zero(); n * c * hw];
        for in_ in 0..n {
            let gch = &gs[in_ * hw..(in_ + 1) * hw];
            for k in 0..c {
                let base = (in_ * c + k) * hw;
                let xc = &xs[base..base + hw];
                let oc = &mut out[base..base + hw];
                for i in 0..hw {
                    oc[i] = xc[i] * gch[i];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gate);
        let out = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        self.push(out, Op::MulBroadcastChan { x, gate }, needs)
    }

    /// 2D convolution: `x [N,IC,H,W]`, `w [OC,IC,KH,KW]`, optional `b [OC]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv input must be NCHW");
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv weight must be OC,IC,KH,KW");
        let bv = b.map(|bid| {
            self.nodes[bid.0]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("conv bias must be 1-d")
                .to_owned()
        });
        let out = conv2d_forward(&xv.to_owned(), &wv.to_owned(), bv.as_ref(), stride, pad);
        let needs = self.needs(x) || self.needs(w) || b.map(|bid| self.needs(bid)).unwrap_or(false);
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        )
    }

    /// Depthwise 3x3 convolution, stride 1, pad 1: `x [N,C,H,W]`, `w [C,3,3]`.
    pub fn depthwise3x3(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        let out = depthwise_forward(&xv, &wv);
        let needs = self.needs(x) || self.needs(w);
        self.push(out.into_dyn(), Op::Depthwise3x3 { x, w }, needs)
    }

    /// Training-mode batch normalization over `[N, C, H, W]`. Returns the
    /// output node plus the batch mean and (biased) variance per channel for
    /// running-statistics updates.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> (NodeId, Array1<T>, Array1<T>) {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let (n, c, h, w) = xv.dim();
        let m = T::from_f((n * h * w) as f64);
        let mut mean = Array1::<T>::zeros(c);
        let mut var = Array1::<T>::zeros(c);
        for k in 0..c {
            let ch = xv.index_axis(Axis(1), k);
            let mu = ch.sum() / m;
            mean[k] = mu;
            let mut v = T::zero();
            for &e in ch.iter() {
                let d = e - mu;
                v = v + d * d;
            }
            var[k] = v / m;
        }
        let gv = self.nodes[gamma.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let bv = self.nodes[beta.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let mut inv_std = Array1::<T>::zeros(c);
        for k in 0..c {
            inv_std[k] = T::one() / (var[k] + eps).sqrt();
        }
        let mut x_hat = ndarray::Array4::<T>::zeros((n, c, h, w));
        let mut out = ndarray::Array4::<T>::zeros((n, c, h, w));
        for in_ in 0..n {
            for k in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let xh = (xv[[in_, k, y, xx]] - mean[k]) * inv_std[k];
                        x_hat[[in_, k, y, xx]] = xh;
                        out[[in_, k, y, xx]] = gv[k] * xh + bv[k];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            out.into_dyn(),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved: BnSaved {
                    x_hat: x_hat.into_dyn(),
                    inv_std: inv_std.clone(),
                },
            },
            needs,
        );
        (id, mean, var)
    }

    /// Evaluation-mode normalization folded into a per-channel affine.
    pub fn affine_per_channel(&mut self, x: NodeId, scale: Array1<T>, shift: Array1<T>) -> NodeId {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let (n, c, h, w) = xv.dim();
        let mut out = ndarray::Array4::<T>::zeros((n, c, h, w));
        for in_ in 0..n {
            for k in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        out[[in_, k, y, xx]] = xv[[in_, k, y, xx]] * scale[k] + shift[k];
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out.into_dyn(), Op::AffinePerChannel { x, scale }, needs)
    }

    /// Bilinear x2 upsampling of `[N, C, H, W]` (half-pixel centers).
    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let out = upsample2x_forward(&xv.to_owned());
        let needs = self.needs(x);
        self.push(out.into_dyn(), Op::Upsample2x(x), needs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.sum();
        let needs = self.needs(x);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Op::SumAll(x),
            needs,
        )
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let len = T::from_f(self.nodes[x.0].value.len() as f64);
        let s = self.nodes[x.0].value.sum() / len;
        let needs = self.needs(x);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Op::MeanAll(x),
            needs,
        )
    }

    /// `[N, C, H, W] -> [N, C]` spatial sums.
    pub fn sum_nc(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let (n, c, _, _) = xv.dim();
        let mut out = Array2::<T>::zeros((n, c));
        for in_ in 0..n {
            for k in 0..c {
                out[[in_, k]] = xv.index_axis(Axis(0), in_).index_axis(Axis(0), k).sum();
            }
        }
        let needs = self.needs(x);
        self.push(out.into_dyn(), Op::SumNC(x), needs)
    }

    /// Gather batch rows of a `[N, ...]` tensor into `[K, ...]`.
    pub fn select_rows(&mut self, x: NodeId, indices: &[usize]) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let picked: Vec<_> = indices
            .iter()
            .map(|&i| xv.index_axis(Axis(0), i).insert_axis(Axis(0)))
            .collect();
        let v = ndarray::concatenate(Axis(0), &picked).expect("select_rows shapes");
        let needs = self.needs(x);
        self.push(
            v,
            Op::SelectRows {
                x,
                indices: indices.to_vec(),
            },
            needs,
        )
    }

    /// `[N, C] -> [N]` row sums.
    pub fn sum_axis1(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let out = xv.sum_axis(Axis(1));
        let needs = self.needs(x);
        self.push(out.into_dyn(), Op::SumAxis1(x), needs)
    }

    /// Reverse-mode sweep from a scalar root. Returns per-parameter
    /// gradients; node gradients stay queryable via `node_grad`.
    pub fn backward(&mut self, root: NodeId, param_count: usize) -> Result<Gradients<T>> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<ArrayD<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(IxDyn(&[1]), T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.accumulate_inputs(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let mut out = Gradients {
            grads: (0..param_count).map(|_| None).collect(),
        };
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(p) } = node.op {
                if p < param_count {
                    if let Some(g) = &grads[i] {
                        out.grads[p] = Some(g.clone());
                    }
                }
            }
        }
        self.node_grads = grads;
        Ok(out)
    }

    fn accumulate_inputs(&self, i: usize, gy: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        let add_into = |grads: &mut [Option<ArrayD<T>>], id: NodeId, g: ArrayD<T>| {
            match &mut grads[id.0] {
                Some(acc) => *acc = &*acc + &g,
                slot @ None => *slot = Some(g),
            }
        };
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        match &self.nodes[i].op {
            Op::Leaf { .. } | Op::Const => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    add_into(grads, *a, gy.clone());
                }
                if needs(*b) {
                    add_into(grads, *b, gy.clone());
                }
            }
            Op::AddN(ids) => {
                for id in ids {
                    if needs(*id) {
                        add_into(grads, *id, gy.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    add_into(grads, *a, gy * &self.nodes[b.0].value);
                }
                if needs(*b) {
                    add_into(grads, *b, gy * &self.nodes[a.0].value);
                }
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                if needs(*a) {
                    add_into(grads, *a, gy / bv);
                }
                if needs(*b) {
                    let av = &self.nodes[a.0].value;
                    let g = gy * av / (bv * bv);
                    add_into(grads, *b, g.mapv(|v| -v));
                }
            }
            Op::Affine { x, scale } => {
                if needs(*x) {
                    add_into(grads, *x, gy.mapv(|v| v * *scale));
                }
            }
            Op::MulConst { x, k } => {
                if needs(*x) {
                    add_into(grads, *x, gy * k);
                }
            }
            Op::AddConst { x } => {
                if needs(*x) {
                    add_into(grads, *x, gy.clone());
                }
            }
            Op::Sigmoid(x) => {
                if needs(*x) {
                    let y = &self.nodes[i].value;
                    let g = gy * &y.mapv(|v| v * (T::one() - v));
                    add_into(grads, *x, g);
                }
            }
            Op::Swish(x) => {
                if needs(*x) {
                    let xv = &self.nodes[x.0].value;
                    let g = gy * &xv.mapv(|v| {
                        let s = sigmoid_scalar(v);
                        s * (T::one() + v * (T::one() - s))
                    });
                    add_into(grads, *x, g);
                }
            }
            Op::Ln(x) => {
                if needs(*x) {
                    add_into(grads, *x, gy / &self.nodes[x.0].value);
                }
            }
            Op::ClampMin { x, min } => {
                if needs(*x) {
                    let xv = &self.nodes[x.0].value;
                    let mut g = gy.clone();
                    g.zip_mut_with(xv, |gv, &v| {
                        if v <= *min {
                            *gv = T::zero();
                        }
                    });
                    add_into(grads, *x, g);
                }
            }
            Op::SoftmaxC(x) => {
                if needs(*x) {
                    let y = self.nodes[i]
                        .value
                        .view()
                        .into_dimensionality::<Ix4>()
                        .unwrap();
                    let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, c, h, w) = y.dim();
                    let mut dx = ndarray::Array4::<T>::zeros((n, c, h, w));
                    for in_ in 0..n {
                        for yy in 0..h {
                            for xx in 0..w {
                                let mut dot = T::zero();
                                for k in 0..c {
                                    dot = dot + gyv[[in_, k, yy, xx]] * y[[in_, k, yy, xx]];
                                }
                                for k in 0..c {
                                    dx[[in_, k, yy, xx]] =
                                        y[[in_, k, yy, xx]] * (gyv[[in_, k, yy, xx]] - dot);
                                }
                            }
                        }
                    }
                    add_into(grads, *x, dx.into_dyn());
                }
            }
            Op::ChannelGroupSum { x, groups } => {
                if needs(*x) {
                    let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, _g, h, w) = gyv.dim();
                    let c = self.nodes[x.0].value.shape()[1];
                    let mut dx = ndarray::Array4::<T>::zeros((n, c, h, w));
                    for (g, members) in groups.iter().enumerate() {
                        for &m in members {
                            let src = gyv.index_axis(Axis(1), g);
                            dx.index_axis_mut(Axis(1), m)
                                .zip_mut_with(&src, |o, &v| *o = *o + v);
                        }
                    }
                    add_into(grads, *x, dx.into_dyn());
                }
            }
            Op::MulBroadcastChan { x, gate } => {
                let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
                let xv = self.nodes[x.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap();
                let gv = self.nodes[gate.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap();
                let (n, c, h, w) = xv.dim();
                if needs(*x) {
                    let mut dx = ndarray::Array4::<T>::zeros((n, c, h, w));
                    for in_ in 0..n {
                        for k in 0..c {
                            for yy in 0..h {
                                for xx in 0..w {
                                    dx[[in_, k, yy, xx]] =
                                        gyv[[in_, k, yy, xx]] * gv[[in_, 0, yy, xx]];
                                }
                            }
                        }
                    }
                    add_into(grads, *x, dx.into_dyn());
                }
                if needs(*gate) {
                    let mut dg = ndarray::Array4::<T>::zeros((n, 1, h, w));
                    for in_ in 0..n {
                        for k in 0..c {
                            for yy in 0..h {
                                for xx in 0..w {
                                    dg[[in_, 0, yy, xx]] = dg[[in_, 0, yy, xx]]
                                        + gyv[[in_, k, yy, xx]] * xv[[in_, k, yy, xx]];
                                }
                            }
                        }
                    }
                    add_into(grads, *gate, dg.into_dyn());
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = self.nodes[x.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .to_owned();
                let wv = self.nodes[w.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .to_owned();
                let gyv = gy
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .to_owned();
                let (dx, dw, db) = conv2d_backward(
                    &xv,
                    &wv,
                    &gyv,
                    *stride,
                    *pad,
                    needs(*x),
                    needs(*w),
                    b.map(|bid| needs(bid)).unwrap_or(false),
                );
                if let (true, Some(dx)) = (needs(*x), dx) {
                    add_into(grads, *x, dx.into_dyn());
                }
                if let (true, Some(dw)) = (needs(*w), dw) {
                    add_into(grads, *w, dw.into_dyn());
                }
                if let (Some(bid), Some(db)) = (b, db) {
                    if needs(*bid) {
                        add_into(grads, *bid, db.into_dyn());
                    }
                }
            }
            Op::Depthwise3x3 { x, w } => {
                let xv = self.nodes[x.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .to_owned();
                let wv = self.nodes[w.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
                    .to_owned();
                let gyv = gy
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .to_owned();
                let (dx, dw) = depthwise_backward(&xv, &wv, &gyv, needs(*x), needs(*w));
                if let Some(dx) = dx {
                    add_into(grads, *x, dx.into_dyn());
                }
                if let Some(dw) = dw {
                    add_into(grads, *w, dw.into_dyn());
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
                let xh = saved
                    .x_hat
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap();
                let (n, c, h, w) = gyv.dim();
                let m = T::from_f((n * h * w) as f64);
                let gv = self.nodes[gamma.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                let mut dgamma = Array1::<T>::zeros(c);
                let mut dbeta = Array1::<T>::zeros(c);
                let mut sum_dxhat = Array1::<T>::zeros(c);
                let mut sum_dxhat_xhat = Array1::<T>::zeros(c);
                for in_ in 0..n {
                    for k in 0..c {
                        for yy in 0..h {
                            for xx in 0..w {
                                let g = gyv[[in_, k, yy, xx]];
                                let xhv = xh[[in_, k, yy, xx]];
                                dgamma[k] = dgamma[k] + g * xhv;
                                dbeta[k] = dbeta[k] + g;
                                let dxh = g * gv[k];
                                sum_dxhat[k] = sum_dxhat[k] + dxh;
                                sum_dxhat_xhat[k] = sum_dxhat_xhat[k] + dxh * xhv;
                            }
                        }
                    }
                }
                if needs(*x) {
                    let mut dx = ndarray::Array4::<T>::zeros((n, c, h, w));
                    for in_ in 0..n {
                        for k in 0..c {
                            let istd = saved.inv_std[k];
                            for yy in 0..h {
                                for xx in 0..w {
                                    let dxh = gyv[[in_, k, yy, xx]] * gv[k];
                                    dx[[in_, k, yy, xx]] = istd / m
                                        * (m * dxh
                                            - sum_dxhat[k]
                                            - xh[[in_, k, yy, xx]] * sum_dxhat_xhat[k]);
                                }
                            }
                        }
                    }
                    add_into(grads, *x, dx.into_dyn());
                }
                if needs(*gamma) {
                    add_into(grads, *gamma, dgamma.into_dyn());
                }
                if needs(*beta) {
                    add_into(grads, *beta, dbeta.into_dyn());
                }
            }
            Op::AffinePerChannel { x, scale } => {
                if needs(*x) {
                    let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, c, h, w) = gyv.dim();
                    let mut dx = ndarray::Array4::<T>::zeros((n, c, h, w));
                    for in_ in 0..n {
                        for k in 0..c {
                            for yy in 0..h {
                                for xx in 0..w {
                                    dx[[in_, k, yy, xx]] = gyv[[in_, k, yy, xx]] * scale[k];
                                }
                            }
                        }
                    }
                    add_into(grads, *x, dx.into_dyn());
                }
            }
            Op::Upsample2x(x) => {
                if needs(*x) {
                    let gyv = gy
                        .view()
                        .into_dimensionality::<Ix4>()
                        .unwrap()
                        .to_owned();
                    let in_shape = self.nodes[x.0].value.shape();
                    let dx = upsample2x_backward(&gyv, in_shape[2], in_shape[3]);
                    add_into(grads, *x, dx.into_dyn());
                }
            }
            Op::SumAll(x) => {
                if needs(*x) {
                    let g = gy[[0]];
                    let shape = self.nodes[x.0].value.raw_dim();
                    add_into(grads, *x, ArrayD::from_elem(shape, g));
                }
            }
            Op::MeanAll(x) => {
                if needs(*x) {
                    let len = T::from_f(self.nodes[x.0].value.len() as f64);
                    let g = gy[[0]] / len;
                    let shape = self.nodes[x.0].value.raw_dim();
                    add_into(grads, *x, ArrayD::from_elem(shape, g));
                }
            }
            Op::SumNC(x) => {
                if needs(*x) {
                    let gyv = gy.view().into_dimensionality::<Ix2>().unwrap();
                    let shape = self.nodes[x.0].value.shape();
                    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let mut dx = ndarray::Array4::<T>::zeros((n, c, h, w));
                    for in_ in 0..n {
                        for k in 0..c {
                            let g = gyv[[in_, k]];
                            dx.index_axis_mut(Axis(0), in_)
                                .index_axis_mut(Axis(0), k)
                                .fill(g);
                        }
                    }
                    add_into(grads, *x, dx.into_dyn());
                }
            }
            Op::SumAxis1(x) => {
                if needs(*x) {
                    let shape = self.nodes[x.0].value.shape();
                    let (n, c) = (shape[0], shape[1]);
                    let mut dx = Array2::<T>::zeros((n, c));
                    for in_ in 0..n {
                        let g = gy[[in_]];
                        dx.row_mut(in_).fill(g);
                    }
                    add_into(grads, *x, dx.into_dyn());
                }
            }
            Op::SelectRows { x, indices } => {
                if needs(*x) {
                    let shape = self.nodes[x.0].value.raw_dim();
                    let mut dx = ArrayD::from_elem(shape, T::zero());
                    for (k, &i) in indices.iter().enumerate() {
                        let src = gy.index_axis(Axis(0), k);
                        dx.index_axis_mut(Axis(0), i)
                            .zip_mut_with(&src, |a, &b| *a = *a + b);
                    }
                    add_into(grads, *x, dx);
                }
            }
        }
    }
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn im2col<T: Scalar>(
    x: &ndarray::ArrayView3<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<T> {
    let (ic, h, w) = x.dim();
    let mut col = Array2::<T>::zeros((ic * kh * kw, oh * ow));
    for c in 0..ic {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let mut out_row = col.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        out_row[oy * ow + ox] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(
    col: &Array2<T>,
    ic: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<T> {
    let mut x = ndarray::Array3::<T>::zeros((ic, h, w));
    for c in 0..ic {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let col_row = col.row(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        x[[c, iy as usize, ix as usize]] =
                            x[[c, iy as usize, ix as usize]] + col_row[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

fn conv2d_forward<T: Scalar>(
    x: &ndarray::Array4<T>,
    w: &ndarray::Array4<T>,
    b: Option<&Array1<T>>,
    stride: usize,
    pad: usize,
) -> ndarray::Array4<T> {
    let (n, ic, h, wd) = x.dim();
    let (oc, wic, kh, kw) = w.dim();
    assert_eq!(ic, wic, "conv channel mismatch");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let w_mat = w
        .view()
        .into_shape_with_order((oc, ic * kh * kw))
        .unwrap();
    let mut out = ndarray::Array4::<T>::zeros((n, oc, oh, ow));
    let outputs: Vec<Array2<T>> = (0..n)
        .into_par_iter()
        .map(|in_| {
            let xn = x.index_axis(Axis(0), in_);
            let mut o = Array2::<T>::zeros((oc, oh * ow));
            if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
                let xm = xn.into_shape_with_order((ic, oh * ow)).unwrap();
                ndarray::linalg::general_mat_mul(T::one(), &w_mat, &xm, T::zero(), &mut o);
            } else {
                let col = im2col(&xn, kh, kw, stride, pad, oh, ow);
                ndarray::linalg::general_mat_mul(T::one(), &w_mat, &col.view(), T::zero(), &mut o);
            }
            o
        })
        .collect();
    for (in_, o) in outputs.into_iter().enumerate() {
        let mut target = out.index_axis_mut(Axis(0), in_);
        let o4 = o.into_shape_with_order((oc, oh, ow)).unwrap();
        target.assign(&o4);
        if let Some(bias) = b {
            for k in 0..oc {
                target
                    .index_axis_mut(Axis(0), k)
                    .mapv_inplace(|v| v + bias[k]);
            }
        }
    }
    out
}

type ConvGrads<T> = (
    Option<ndarray::Array4<T>>,
    Option<ndarray::Array4<T>>,
    Option<Array1<T>>,
);

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    x: &ndarray::Array4<T>,
    w: &ndarray::Array4<T>,
    gy: &ndarray::Array4<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (n, ic, h, wd) = x.dim();
    let (oc, _, kh, kw) = w.dim();
    let (_, _, oh, ow) = gy.dim();
    let w_mat = w
        .view()
        .into_shape_with_order((oc, ic * kh * kw))
        .unwrap();
    let one_by_one = kh == 1 && kw == 1 && stride == 1 && pad == 0;

    struct PerSample<T> {
        dx: Option<ndarray::Array3<T>>,
        dw: Option<Array2<T>>,
    }
    let partials: Vec<PerSample<T>> = (0..n)
        .into_par_iter()
        .map(|in_| {
            let xn = x.index_axis(Axis(0), in_);
            let gy_n = gy
                .index_axis(Axis(0), in_)
                .into_shape_with_order((oc, oh * ow))
                .unwrap();
            let mut dx = None;
            let mut dw = None;
            if one_by_one {
                if need_dx {
                    let mut dcol = Array2::<T>::zeros((ic, oh * ow));
                    ndarray::linalg::general_mat_mul(
                        T::one(),
                        &w_mat.t(),
                        &gy_n,
                        T::zero(),
                        &mut dcol,
                    );
                    dx = Some(dcol.into_shape_with_order((ic, h, wd)).unwrap());
                }
                if need_dw {
                    let xm = xn.into_shape_with_order((ic, oh * ow)).unwrap();
                    let mut dwm = Array2::<T>::zeros((oc, ic));
                    ndarray::linalg::general_mat_mul(
                        T::one(),
                        &gy_n,
                        &xm.t(),
                        T::zero(),
                        &mut dwm,
                    );
                    dw = Some(dwm);
                }
            } else {
                let col = im2col(&xn, kh, kw, stride, pad, oh, ow);
                if need_dx {
                    let mut dcol = Array2::<T>::zeros((ic * kh * kw, oh * ow));
                    ndarray::linalg::general_mat_mul(
                        T::one(),
                        &w_mat.t(),
                        &gy_n,
                        T::zero(),
                        &mut dcol,
                    );
                    dx = Some(col2im(&dcol, ic, h, wd, kh, kw, stride, pad, oh, ow));
                }
                if need_dw {
                    let mut dwm = Array2::<T>::zeros((oc, ic * kh * kw));
                    ndarray::linalg::general_mat_mul(
                        T::one(),
                        &gy_n,
                        &col.t(),
                        T::zero(),
                        &mut dwm,
                    );
                    dw = Some(dwm);
                }
            }
            PerSample { dx, dw }
        })
        .collect();

    let mut dx_out = need_dx.then(|| ndarray::Array4::<T>::zeros((n, ic, h, wd)));
    let mut dw_out = need_dw.then(|| ndarray::Array4::<T>::zeros((oc, ic, kh, kw)));
    for (in_, p) in partials.into_iter().enumerate() {
        if let (Some(dst), Some(src)) = (dx_out.as_mut(), p.dx) {
            dst.index_axis_mut(Axis(0), in_).assign(&src);
        }
        if let (Some(dst), Some(src)) = (dw_out.as_mut(), p.dw) {
            let mut flat = dst
                .view_mut()
                .into_shape_with_order((oc, ic * kh * kw))
                .unwrap();
            flat.zip_mut_with(&src.view(), |a, &b| *a = *a + b);
        }
    }
    let db = need_db.then(|| {
        let mut db = Array1::<T>::zeros(oc);
        for in_ in 0..n {
            for k in 0..oc {
                db[k] = db[k] + gy.index_axis(Axis(0), in_).index_axis(Axis(0), k).sum();
            }
        }
        db
    });
    (dx_out, dw_out, db)
}

fn depthwise_forward<T: Scalar>(
    x: &ndarray::Array4<T>,
    w: &ndarray::Array3<T>,
) -> ndarray::Array4<T> {
    let (n, c, h, wd) = x.dim();
    let per_sample: Vec<ndarray::Array3<T>> = (0..n)
        .into_par_iter()
        .map(|in_| {
            let xn = x.index_axis(Axis(0), in_);
            let mut on = ndarray::Array3::<T>::zeros((c, h, wd));
            for k in 0..c {
                let xc = xn.index_axis(Axis(0), k);
                let mut oc_ = on.index_axis_mut(Axis(0), k);
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = T::zero();
                        for ky in 0..3usize {
                            let iy = y as i64 + ky as i64 - 1;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            for kx in 0..3usize {
                                let ix = xx as i64 + kx as i64 - 1;
                                if ix < 0 || ix >= wd as i64 {
                                    continue;
                                }
                                acc = acc + w[[k, ky, kx]] * xc[[iy as usize, ix as usize]];
                            }
                        }
                        oc_[[y, xx]] = acc;
                    }
                }
            }
            on
        })
        .collect();
    let mut out = ndarray::Array4::<T>::zeros((n, c, h, wd));
    for (in_, on) in per_sample.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), in_).assign(&on);
    }
    out
}

fn depthwise_backward<T: Scalar>(
    x: &ndarray::Array4<T>,
    w: &ndarray::Array3<T>,
    gy: &ndarray::Array4<T>,
    need_dx: bool,
    need_dw: bool,
) -> (Option<ndarray::Array4<T>>, Option<ndarray::Array3<T>>) {
    let (n, c, h, wd) = x.dim();
    struct PerSample<T> {
        dx: Option<ndarray::Array3<T>>,
        dw: Option<ndarray::Array3<T>>,
    }
    let partials: Vec<PerSample<T>> = (0..n)
        .into_par_iter()
        .map(|in_| {
            let xn = x.index_axis(Axis(0), in_);
            let gn = gy.index_axis(Axis(0), in_);
            let mut dx = need_dx.then(|| ndarray::Array3::<T>::zeros((c, h, wd)));
            let mut dw = need_dw.then(|| ndarray::Array3::<T>::zeros((c, 3, 3)));
            for k in 0..c {
                for y in 0..h {
                    for xx in 0..wd {
                        let g = gn[[k, y, xx]];
                        for ky in 0..3usize {
                            let iy = y as i64 + ky as i64 - 1;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            for kx in 0..3usize {
                                let ix = xx as i64 + kx as i64 - 1;
                                if ix < 0 || ix >= wd as i64 {
                                    continue;
                                }
                                if let Some(dx) = dx.as_mut() {
                                    dx[[k, iy as usize, ix as usize]] = dx
                                        [[k, iy as usize, ix as usize]]
                                        + g * w[[k, ky, kx]];
                                }
                                if let Some(dw) = dw.as_mut() {
                                    dw[[k, ky, kx]] = dw[[k, ky, kx]]
                                        + g * xn[[k, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                }
            }
            PerSample { dx, dw }
        })
        .collect();
    let mut dx_out = need_dx.then(|| ndarray::Array4::<T>::zeros((n, c, h, wd)));
    let mut dw_out = need_dw.then(|| ndarray::Array3::<T>::zeros((c, 3, 3)));
    for (in_, p) in partials.into_iter().enumerate() {
        if let (Some(dst), Some(src)) = (dx_out.as_mut(), p.dx) {
            dst.index_axis_mut(Axis(0), in_).assign(&src);
        }
        if let (Some(dst), Some(src)) = (dw_out.as_mut(), p.dw) {
            dst.zip_mut_with(&src, |a, &b| *a = *a + b);
        }
    }
    (dx_out, dw_out)
}

/// Bilinear weights for one output coordinate at x2 upsampling with
/// half-pixel centers: src = (dst + 0.5) / 2 - 0.5, edges clamped.
fn up2_coords(o: usize, in_len: usize) -> (usize, usize, f64) {
    let s = (o as f64 + 0.5) / 2.0 - 0.5;
    let s_clamped = s.max(0.0).min(in_len as f64 - 1.0);
    let i0 = s_clamped.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = s_clamped - i0 as f64;
    (i0, i1, frac)
}

fn upsample2x_forward<T: Scalar>(x: &ndarray::Array4<T>) -> ndarray::Array4<T> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h * 2, w * 2);
    let mut out = ndarray::Array4::<T>::zeros((n, c, oh, ow));
    for oy in 0..oh {
        let (y0, y1, fy) = up2_coords(oy, h);
        let fy = T::from_f(fy);
        for ox in 0..ow {
            let (x0, x1, fx) = up2_coords(ox, w);
            let fx = T::from_f(fx);
            for in_ in 0..n {
                for k in 0..c {
                    let a = x[[in_, k, y0, x0]];
                    let b = x[[in_, k, y0, x1]];
                    let cc = x[[in_, k, y1, x0]];
                    let d = x[[in_, k, y1, x1]];
                    let top = a + (b - a) * fx;
                    let bot = cc + (d - cc) * fx;
                    out[[in_, k, oy, ox]] = top + (bot - top) * fy;
                }
            }
        }
    }
    out
}

fn upsample2x_backward<T: Scalar>(
    gy: &ndarray::Array4<T>,
    h: usize,
    w: usize,
) -> ndarray::Array4<T> {
    let (n, c, oh, ow) = gy.dim();
    let mut dx = ndarray::Array4::<T>::zeros((n, c, h, w));
    for oy in 0..oh {
        let (y0, y1, fy) = up2_coords(oy, h);
        let fy = T::from_f(fy);
        for ox in 0..ow {
            let (x0, x1, fx) = up2_coords(ox, w);
            let fx = T::from_f(fx);
            let w00 = (T::one() - fy) * (T::one() - fx);
            let w01 = (T::one() - fy) * fx;
            let w10 = fy * (T::one() - fx);
            let w11 = fy * fx;
            for in_ in 0..n {
                for k in 0..c {
                    let g = gy[[in_, k, oy, ox]];
                    dx[[in_, k, y0, x0]] = dx[[in_, k, y0, x0]] + g * w00;
                    dx[[in_, k, y0, x1]] = dx[[in_, k, y0, x1]] + g * w01;
                    dx[[in_, k, y1, x0]] = dx[[in_, k, y1, x0]] + g * w10;
                    dx[[in_, k, y1, x1]] = dx[[in_, k, y1, x1]] + g * w11;
                }
            }
        }
    }
    dx
}

/// Reference convolution used by tests: direct nested loops.
#[doc(hidden)]
pub fn conv2d_reference<T: Scalar>(
    x: ArrayViewD<T>,
    w: ArrayViewD<T>,
    b: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> ArrayD<T> {
    let x = x.into_dimensionality::<Ix4>().unwrap();
    let w = w.into_dimensionality::<Ix4>().unwrap();
    let (n, ic, h, wd) = x.dim();
    let (oc, _, kh, kw) = w.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = ndarray::Array4::<T>::zeros((n, oc, oh, ow));
    for in_ in 0..n {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map(|b| b[o]).unwrap_or_else(T::zero);
                    for c in 0..ic {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if ix < 0 || ix >= wd as i64 {
                                    continue;
                                }
                                acc = acc
                                    + w[[o, c, ky, kx]]
                                        * x[[in_, c, iy as usize, ix as usize]];
                            }
                        }
                    }
                    out[[in_, o, oy, ox]] = acc;
                }
            }
        }
    }
    out.into_dyn()
}
