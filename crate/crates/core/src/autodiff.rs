//! Reverse-mode automatic differentiation over a static computation graph.
//!
//! A [`CompGraph`] is built once from leaves and primitive operations, then
//! evaluated with [`CompGraph::forward`] against a set of leaf [`Bindings`].
//! [`CompGraph::backward`] returns the gradient of the output (summed, if it
//! is not a scalar) with respect to every leaf, so a single backward pass
//! yields both input gradients and parameter gradients.
//!
//! Nodes are appended in construction order, which is also topological order:
//! an operation can only reference nodes that already exist.
//!
//! Accumulation order inside every primitive is fixed, so repeated
//! evaluations with identical bindings are bit-identical.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a node inside its graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Role of a leaf. Constants (such as label vectors) receive zero gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Input,
    Param,
    Constant,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { kind: LeafKind, name: String },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize },
    Relu(NodeId),
    AvgPool2(NodeId),
    Flatten(NodeId),
    SoftmaxXent { logits: NodeId, labels: NodeId },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf { .. } => vec![],
            Op::Dense { x, w, b } | Op::Conv2d { x, w, b, .. } => vec![x, w, b],
            Op::Relu(a) | Op::AvgPool2(a) | Op::Flatten(a) | Op::Scale(a, _) | Op::Sum(a) => vec![a],
            Op::SoftmaxXent { logits, labels } => vec![logits, labels],
            Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
}

/// Leaf values for one forward evaluation.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    entries: Vec<(NodeId, Tensor)>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, leaf: NodeId, value: Tensor) -> &mut Self {
        match self.entries.iter_mut().find(|(id, _)| *id == leaf) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((leaf, value)),
        }
        self
    }

    pub fn with(mut self, leaf: NodeId, value: Tensor) -> Self {
        self.bind(leaf, value);
        self
    }

    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.entries.iter().find(|(id, _)| *id == leaf).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, leaf: NodeId) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(id, _)| *id == leaf).map(|(_, t)| t)
    }
}

/// Gradients of the graph output with respect to each leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.grads.get(leaf.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, leaf: NodeId) -> Option<Tensor> {
        self.grads.get_mut(leaf.0).and_then(Option::take)
    }
}

#[derive(Clone, Debug, Default)]
pub struct CompGraph {
    nodes: Vec<Node>,
    output: Option<NodeId>,
    evaluated: bool,
}

impl CompGraph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        debug_assert!(op.inputs().iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node { op, value: None });
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, kind: LeafKind, name: impl Into<String>) -> NodeId {
        self.push(Op::Leaf { kind, name: name.into() })
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.leaf(LeafKind::Input, name)
    }

    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.leaf(LeafKind::Param, name)
    }

    pub fn constant(&mut self, name: impl Into<String>) -> NodeId {
        self.leaf(LeafKind::Constant, name)
    }

    /// `x (N, in) · wᵀ (out, in) + b (out)`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Dense { x, w, b })
    }

    /// 2-D cross-correlation of `x (N, C, H, W)` with `w (O, C, kH, kW)` plus `b (O)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> NodeId {
        self.push(Op::Conv2d { x, w, b, stride, padding })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::AvgPool2(x))
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Flatten(x))
    }

    /// Summed softmax cross-entropy of `logits (N, K)` against integer `labels (N)`.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: NodeId) -> NodeId {
        self.push(Op::SoftmaxXent { logits, labels })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    /// Marks the node whose value `forward` returns. Defaults to the last node.
    pub fn set_output(&mut self, node: NodeId) {
        self.output = Some(node);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output.or_else(|| self.nodes.len().checked_sub(1).map(NodeId))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaves in creation order with their kind and name.
    pub fn leaves(&self) -> impl Iterator<Item = (NodeId, LeafKind, &str)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.op {
            Op::Leaf { kind, name } => Some((NodeId(i), *kind, name.as_str())),
            _ => None,
        })
    }

    /// Cached value of a node from the most recent forward pass.
    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.nodes.get(node.0).and_then(|n| n.value.as_ref())
    }

    /// Evaluates every node and returns the output value. Consumes the bindings.
    pub fn forward(&mut self, bindings: Bindings) -> Result<Tensor> {
        self.evaluated = false;
        let out = self.output().ok_or_else(|| Error::InvalidShape("empty graph".into()))?;
        let mut bound = bindings.entries;
        for i in 0..self.nodes.len() {
            let value = match &self.nodes[i].op {
                Op::Leaf { name, .. } => {
                    let pos = bound.iter().position(|(id, _)| id.0 == i).ok_or_else(|| Error::UnboundLeaf { node: i, name: name.clone() })?;
                    bound.swap_remove(pos).1
                }
                op => {
                    let op = op.clone();
                    eval_op(&op, &self.nodes).map_err(|message| Error::NodeShape { node: i, message })?
                }
            };
            if !value.is_finite() {
                return Err(Error::NonFinite { node: i });
            }
            self.nodes[i].value = Some(value);
        }
        self.evaluated = true;
        Ok(self.nodes[out.0].value.clone().expect("evaluated"))
    }

    /// Propagates adjoints from the output back to every leaf.
    ///
    /// The output is seeded with ones, so a non-scalar output is treated as
    /// its sum.
    pub fn backward(&self) -> Result<Gradients> {
        if !self.evaluated {
            return Err(Error::BackwardBeforeForward);
        }
        let out = self.output().expect("evaluated graph has nodes");
        let needs = self.needs_grad();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::full(self.val(out).shape(), 1.0));

        for i in (0..self.nodes.len()).rev() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, adj) in self.adjoints(&self.nodes[i].op, &g, &needs) {
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(adj.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(adj),
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf { .. }) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.as_ref().expect("evaluated").shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.as_ref().expect("forward ran")
    }

    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match &node.op {
                Op::Leaf { kind, .. } => *kind != LeafKind::Constant,
                op => op.inputs().iter().any(|j| needs[j.0]),
            };
        }
        needs
    }

    fn adjoints(&self, op: &Op, g: &Tensor, needs: &[bool]) -> Vec<(NodeId, Tensor)> {
        let mut out = Vec::with_capacity(3);
        match *op {
            Op::Leaf { .. } => {}
            Op::Dense { x, w, b } => {
                let (gx, gwb) = dense_backward(self.val(x), self.val(w), g, needs[x.0], needs[w.0] || needs[b.0]);
                push_affine(&mut out, (x, w, b), gx, gwb);
            }
            Op::Conv2d { x, w, b, stride, padding } => {
                let want_w = needs[w.0] || needs[b.0];
                let (gx, gwb) = conv2d_backward(self.val(x), self.val(w), g, stride, padding, needs[x.0], want_w);
                push_affine(&mut out, (x, w, b), gx, gwb);
            }
            Op::Relu(a) => {
                let x = self.val(a);
                // Subgradient 0 at exactly 0.
                let gx = x.zip_map(g, |xv, gv| if xv > 0.0 { gv } else { 0.0 }).expect("same shape");
                out.push((a, gx));
            }
            Op::AvgPool2(a) => out.push((a, avg_pool2_backward(self.val(a).shape(), g))),
            Op::Flatten(a) => {
                let gx = g.clone().reshape(self.val(a).shape().to_vec()).expect("same numel");
                out.push((a, gx));
            }
            Op::SoftmaxXent { logits, labels } => {
                let gl = softmax_xent_backward(self.val(logits), self.val(labels), g.item());
                out.push((logits, gl));
            }
            Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            Op::Mul(a, b) => {
                out.push((a, g.zip_map(self.val(b), |gv, bv| gv * bv).expect("same shape")));
                out.push((b, g.zip_map(self.val(a), |gv, av| gv * av).expect("same shape")));
            }
            Op::Scale(a, c) => out.push((a, g.scale(c))),
            Op::Sum(a) => out.push((a, Tensor::full(self.val(a).shape(), g.item()))),
        }
        out.retain(|(id, _)| needs[id.0]);
        out
    }
}

type AffineGrads = (Option<Tensor>, Option<(Tensor, Tensor)>);

fn push_affine(out: &mut Vec<(NodeId, Tensor)>, (x, w, b): (NodeId, NodeId, NodeId), gx: Option<Tensor>, gwb: Option<(Tensor, Tensor)>) {
    if let Some(gx) = gx {
        out.push((x, gx));
    }
    if let Some((gw, gb)) = gwb {
        out.push((w, gw));
        out.push((b, gb));
    }
}

fn eval_op(op: &Op, nodes: &[Node]) -> std::result::Result<Tensor, String> {
    let val = |id: NodeId| nodes[id.0].value.as_ref().expect("inputs precede node");
    match *op {
        Op::Leaf { .. } => unreachable!("leaves are bound, not evaluated"),
        Op::Dense { x, w, b } => dense_forward(val(x), val(w), val(b)),
        Op::Conv2d { x, w, b, stride, padding } => conv2d_forward(val(x), val(w), val(b), stride, padding),
        Op::Relu(a) => Ok(val(a).map(|v| if v > 0.0 { v } else { 0.0 })),
        Op::AvgPool2(a) => avg_pool2_forward(val(a)),
        Op::Flatten(a) => {
            let x = val(a);
            if x.rank() < 2 {
                return Err(format!("flatten needs rank >= 2, got {:?}", x.shape()));
            }
            let n = x.shape()[0];
            x.clone().reshape(vec![n, x.numel() / n]).map_err(|e| e.to_string())
        }
        Op::SoftmaxXent { logits, labels } => softmax_xent_forward(val(logits), val(labels)),
        Op::Add(a, b) => val(a).add(val(b)).map_err(|e| e.to_string()),
        Op::Mul(a, b) => val(a).zip_map(val(b), |p, q| p * q).map_err(|e| e.to_string()),
        Op::Scale(a, c) => Ok(val(a).scale(c)),
        Op::Sum(a) => Ok(Tensor::scalar(val(a).sum())),
    }
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> std::result::Result<Tensor, String> {
    if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
        return Err(format!("dense expects x (N,in), w (out,in), b (out); got {:?} {:?} {:?}", x.shape(), w.shape(), b.shape()));
    }
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    if w.shape()[1] != din || b.shape()[0] != dout {
        return Err(format!("dense shapes disagree: x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()));
    }
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut y = vec![0.0; n * dout];
    for r in 0..n {
        let xr = &xd[r * din..(r + 1) * din];
        for o in 0..dout {
            let wr = &wd[o * din..(o + 1) * din];
            let mut acc = 0.0;
            for i in 0..din {
                acc += wr[i] * xr[i];
            }
            y[r * dout + o] = acc + bd[o];
        }
    }
    Ok(Tensor::new(vec![n, dout], y).expect("consistent"))
}

fn dense_backward(x: &Tensor, w: &Tensor, g: &Tensor, want_x: bool, want_w: bool) -> AffineGrads {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut gx = if want_x { vec![0.0; n * din] } else { Vec::new() };
    let mut gw = if want_w { vec![0.0; dout * din] } else { Vec::new() };
    let mut gb = if want_w { vec![0.0; dout] } else { Vec::new() };
    for r in 0..n {
        let xr = &xd[r * din..(r + 1) * din];
        for o in 0..dout {
            let go = gd[r * dout + o];
            if go == 0.0 {
                continue;
            }
            let wr = &wd[o * din..(o + 1) * din];
            if want_w {
                gb[o] += go;
                let gwr = &mut gw[o * din..(o + 1) * din];
                for i in 0..din {
                    gwr[i] += go * xr[i];
                }
            }
            if want_x {
                let gxr = &mut gx[r * din..(r + 1) * din];
                for i in 0..din {
                    gxr[i] += go * wr[i];
                }
            }
        }
    }
    (
        want_x.then(|| Tensor::new(x.shape().to_vec(), gx).expect("consistent")),
        want_w.then(|| (Tensor::new(w.shape().to_vec(), gw).expect("consistent"), Tensor::new(vec![dout], gb).expect("consistent"))),
    )
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(x: &[usize], w: &[usize], stride: usize, padding: usize) -> std::result::Result<ConvDims, String> {
    if x.len() != 4 || w.len() != 4 {
        return Err(format!("conv2d expects x (N,C,H,W) and w (O,C,kH,kW); got {x:?} {w:?}"));
    }
    if x[1] != w[1] {
        return Err(format!("conv2d channel mismatch: input has {}, kernel expects {}", x[1], w[1]));
    }
    if stride == 0 {
        return Err("conv2d stride must be positive".into());
    }
    let (h, wd, kh, kw) = (x[2] + 2 * padding, x[3] + 2 * padding, w[2], w[3]);
    if kh > h || kw > wd {
        return Err(format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"));
    }
    Ok(ConvDims { n: x[0], c: x[1], h: x[2], w: x[3], o: w[0], kh, kw, ho: (h - kh) / stride + 1, wo: (wd - kw) / stride + 1 })
}

/// Valid kernel offsets `[lo, hi)` for output coordinate `out` along one axis.
#[inline]
fn kernel_range(out: usize, stride: usize, padding: usize, k: usize, extent: usize) -> (usize, usize) {
    let origin = (out * stride) as isize - padding as isize;
    let lo = (-origin).max(0) as usize;
    let hi = ((extent as isize - origin).min(k as isize)).max(0) as usize;
    (lo.min(hi), hi)
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> std::result::Result<Tensor, String> {
    let d = conv_dims(x.shape(), w.shape(), stride, padding)?;
    if b.shape() != [d.o] {
        return Err(format!("conv2d bias shape {:?}, expected [{}]", b.shape(), d.o));
    }
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut y = vec![0.0; d.n * d.o * d.ho * d.wo];
    let (in_plane, k_plane) = (d.h * d.w, d.kh * d.kw);
    for n in 0..d.n {
        let xn = &xd[n * d.c * in_plane..(n + 1) * d.c * in_plane];
        for o in 0..d.o {
            let wo_ = &wd[o * d.c * k_plane..(o + 1) * d.c * k_plane];
            let yo = &mut y[(n * d.o + o) * d.ho * d.wo..(n * d.o + o + 1) * d.ho * d.wo];
            for oy in 0..d.ho {
                let (ky0, ky1) = kernel_range(oy, stride, padding, d.kh, d.h);
                let iy0 = oy * stride + ky0 - padding;
                for ox in 0..d.wo {
                    let (kx0, kx1) = kernel_range(ox, stride, padding, d.kw, d.w);
                    let ix0 = ox * stride + kx0 - padding;
                    let mut acc = 0.0;
                    for c in 0..d.c {
                        let xc = &xn[c * in_plane..(c + 1) * in_plane];
                        let wc = &wo_[c * k_plane..(c + 1) * k_plane];
                        for (dy, ky) in (ky0..ky1).enumerate() {
                            let xrow = &xc[(iy0 + dy) * d.w + ix0..];
                            let wrow = &wc[ky * d.kw..];
                            for (dx, kx) in (kx0..kx1).enumerate() {
                                acc += wrow[kx] * xrow[dx];
                            }
                        }
                    }
                    yo[oy * d.wo + ox] = acc + bd[o];
                }
            }
        }
    }
    Ok(Tensor::new(vec![d.n, d.o, d.ho, d.wo], y).expect("consistent"))
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor, stride: usize, padding: usize, want_x: bool, want_w: bool) -> AffineGrads {
    let d = conv_dims(x.shape(), w.shape(), stride, padding).expect("validated in forward");
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut gx = if want_x { vec![0.0; xd.len()] } else { Vec::new() };
    let mut gw = if want_w { vec![0.0; wd.len()] } else { Vec::new() };
    let mut gb = if want_w { vec![0.0; d.o] } else { Vec::new() };
    let (in_plane, k_plane) = (d.h * d.w, d.kh * d.kw);
    for n in 0..d.n {
        let xn = &xd[n * d.c * in_plane..(n + 1) * d.c * in_plane];
        for o in 0..d.o {
            let go_plane = &gd[(n * d.o + o) * d.ho * d.wo..(n * d.o + o + 1) * d.ho * d.wo];
            for oy in 0..d.ho {
                let (ky0, ky1) = kernel_range(oy, stride, padding, d.kh, d.h);
                let iy0 = oy * stride + ky0 - padding;
                for ox in 0..d.wo {
                    let gv = go_plane[oy * d.wo + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    if want_w {
                        gb[o] += gv;
                    }
                    let (kx0, kx1) = kernel_range(ox, stride, padding, d.kw, d.w);
                    let ix0 = ox * stride + kx0 - padding;
                    for c in 0..d.c {
                        let xc = &xn[c * in_plane..(c + 1) * in_plane];
                        let wbase = (o * d.c + c) * k_plane;
                        for (dy, ky) in (ky0..ky1).enumerate() {
                            let row = (iy0 + dy) * d.w + ix0;
                            if want_w {
                                for (dx, kx) in (kx0..kx1).enumerate() {
                                    gw[wbase + ky * d.kw + kx] += gv * xc[row + dx];
                                }
                            }
                            if want_x {
                                let gxc = &mut gx[(n * d.c + c) * in_plane + row..];
                                for (dx, kx) in (kx0..kx1).enumerate() {
                                    gxc[dx] += gv * wd[wbase + ky * d.kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        want_x.then(|| Tensor::new(x.shape().to_vec(), gx).expect("consistent")),
        want_w.then(|| (Tensor::new(w.shape().to_vec(), gw).expect("consistent"), Tensor::new(vec![d.o], gb).expect("consistent"))),
    )
}

fn avg_pool2_forward(x: &Tensor) -> std::result::Result<Tensor, String> {
    let s = x.shape();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(format!("avg_pool2 expects (N,C,H,W) with H,W >= 2, got {s:?}"));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut y = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let xp = &xd[p * h * w..];
        for oy in 0..ho {
            for ox in 0..wo {
                let (r0, r1) = (2 * oy * w + 2 * ox, (2 * oy + 1) * w + 2 * ox);
                y[(p * ho + oy) * wo + ox] = 0.25 * (xp[r0] + xp[r0 + 1] + xp[r1] + xp[r1 + 1]);
            }
        }
    }
    Ok(Tensor::new(vec![s[0], s[1], ho, wo], y).expect("consistent"))
}

fn avg_pool2_backward(in_shape: &[usize], g: &Tensor) -> Tensor {
    let (planes, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let gd = g.data();
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let v = 0.25 * gd[(p * ho + oy) * wo + ox];
                let base = p * h * w;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    gx[base + (2 * oy + dy) * w + 2 * ox + dx] += v;
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gx).expect("consistent")
}

fn check_labels(logits: &Tensor, labels: &Tensor) -> std::result::Result<(usize, usize), String> {
    if logits.rank() != 2 {
        return Err(format!("cross-entropy expects logits (N,K), got {:?}", logits.shape()));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.numel() != n {
        return Err(format!("{} labels for {n} rows", labels.numel()));
    }
    for &y in labels.data() {
        if y < 0.0 || y.fract() != 0.0 || y as usize >= k {
            return Err(format!("label {y} is not a class index in 0..{k}"));
        }
    }
    Ok((n, k))
}

/// Per-row `logsumexp(z) - z[label]`.
pub fn softmax_xent_rows(logits: &[f64], labels: &[usize], classes: usize) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let z = &logits[r * classes..(r + 1) * classes];
            let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - z[y]
        })
        .collect()
}

fn softmax_xent_forward(logits: &Tensor, labels: &Tensor) -> std::result::Result<Tensor, String> {
    let (_, k) = check_labels(logits, labels)?;
    let ys: Vec<usize> = labels.data().iter().map(|&y| y as usize).collect();
    Ok(Tensor::scalar(softmax_xent_rows(logits.data(), &ys, k).iter().sum()))
}

fn softmax_xent_backward(logits: &Tensor, labels: &Tensor, upstream: f64) -> Tensor {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let z = logits.data();
    let mut g = vec![0.0; n * k];
    for r in 0..n {
        let row = &z[r * k..(r + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for j in 0..k {
            g[r * k + j] = upstream * (row[j] - m).exp() / denom;
        }
        g[r * k + labels.data()[r] as usize] -= upstream;
    }
    Tensor::new(vec![n, k], g).expect("consistent")
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// Largest `|a - b|`, whichever coordinate it falls on.
    pub max_abs_error: f64,
    /// Leaf and flat coordinate of the worst disagreement.
    pub worst: Option<(NodeId, usize)>,
    pub checked: usize,
    pub passed: bool,
}

/// Checks backward gradients of every input and parameter leaf against
/// `(f(v + step) - f(v - step)) / (2 step)`, one coordinate at a time.
///
/// Relative error is `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn finite_diff_check(graph: &mut CompGraph, bindings: &Bindings, step: f64, tolerance: f64) -> Result<FiniteDiffReport> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {step}")));
    }
    graph.forward(bindings.clone())?;
    let grads = graph.backward()?;
    let leaves: Vec<NodeId> = graph.leaves().filter(|(_, kind, _)| *kind != LeafKind::Constant).map(|(id, _, _)| id).collect();

    let mut report = FiniteDiffReport { max_rel_error: 0.0, max_abs_error: 0.0, worst: None, checked: 0, passed: true };
    let mut probe = bindings.clone();
    for leaf in leaves {
        let analytic = grads.get(leaf).expect("every leaf has a gradient").clone();
        for k in 0..analytic.numel() {
            let original = probe.get(leaf).expect("bound").data()[k];
            probe.get_mut(leaf).expect("bound").data_mut()[k] = original + step;
            let plus = graph.forward(probe.clone())?.sum();
            probe.get_mut(leaf).expect("bound").data_mut()[k] = original - step;
            let minus = graph.forward(probe.clone())?.sum();
            probe.get_mut(leaf).expect("bound").data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((leaf, k));
            }
        }
    }
    // Leave cached values consistent with the caller's bindings.
    graph.forward(bindings.clone())?;
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}
