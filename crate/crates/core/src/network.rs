//! Parameterized feed-forward networks.
//!
//! A [`Network`] is built from a declarative [`NetSpec`]. Every dense or
//! convolutional layer is a [`ParamLayer`] and receives an ordinal `1..=L` in
//! forward order; activations, pooling and flattening carry no ordinal.
//!
//! Batches are evaluated by splitting them into fixed-size chunks, each
//! evaluated on its own [`CompGraph`]. Chunk results are combined in chunk
//! order, so the numbers do not depend on whether chunks ran in parallel.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_xent_rows, Bindings, CompGraph, LeafKind, NodeId};
use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::tensor::Tensor;

/// Examples per computation graph when evaluating a batch.
pub const CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Dense {
        out: usize,
    },
    Relu,
    AvgPool2,
    Flatten,
}

fn one() -> usize {
    1
}

/// Declarative architecture: per-example input shape `[C, H, W]`, class count,
/// and the layer sequence. The final parameterized layer must be dense with
/// `num_classes` outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetSpec {
    /// The reference 4-ordinal CNN:
    /// conv 1→8 k3, pool, conv 8→16 k3, pool, dense 16·s→64, dense 64→C.
    pub fn desk_cnn(channels: usize, size: usize, num_classes: usize) -> Self {
        use LayerSpec::*;
        Self {
            input_shape: [channels, size, size],
            num_classes,
            layers: vec![
                Conv2d { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
                Relu,
                AvgPool2,
                Conv2d { out_channels: 16, kernel: 3, stride: 1, padding: 1 },
                Relu,
                AvgPool2,
                Flatten,
                Dense { out: 64 },
                Relu,
                Dense { out: num_classes },
            ],
        }
    }

    /// Fully connected network with ReLU between hidden layers.
    pub fn mlp(input: usize, hidden: &[usize], num_classes: usize) -> Self {
        let mut layers = vec![LayerSpec::Flatten];
        for &h in hidden {
            layers.push(LayerSpec::Dense { out: h });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense { out: num_classes });
        Self { input_shape: [1, 1, input], num_classes, layers }
    }

    /// Walks the shape chain and returns the parameter shapes per ordinal.
    pub fn validate(&self) -> Result<Vec<(LayerKind, Vec<usize>)>> {
        let bad = |layer: usize, message: String| Error::InvalidSpec { layer, message };
        if self.input_shape.contains(&0) {
            return Err(bad(0, format!("input shape {:?} has a zero dimension", self.input_shape)));
        }
        if self.num_classes < 2 {
            return Err(bad(0, "need at least two classes".into()));
        }
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        let mut params = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv2d { out_channels, kernel, stride, padding } => {
                    if shape.len() != 3 {
                        return Err(bad(i, format!("conv2d needs a [C,H,W] input, got {shape:?}")));
                    }
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(bad(i, "conv2d sizes must be positive".into()));
                    }
                    let (h, w) = (shape[1] + 2 * padding, shape[2] + 2 * padding);
                    if kernel > h || kernel > w {
                        return Err(bad(i, format!("kernel {kernel} exceeds padded input {h}x{w}")));
                    }
                    params.push((LayerKind::Conv2d { stride, padding }, vec![out_channels, shape[0], kernel, kernel]));
                    shape = vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1];
                }
                LayerSpec::Dense { out } => {
                    if shape.len() != 1 {
                        return Err(bad(i, format!("dense needs a flat input, got {shape:?}; insert flatten")));
                    }
                    if out == 0 {
                        return Err(bad(i, "dense width must be positive".into()));
                    }
                    params.push((LayerKind::Dense, vec![out, shape[0]]));
                    shape = vec![out];
                }
                LayerSpec::Relu => {}
                LayerSpec::AvgPool2 => {
                    if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                        return Err(bad(i, format!("avg_pool2 needs [C,H,W] with H,W >= 2, got {shape:?}")));
                    }
                    shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                }
                LayerSpec::Flatten => shape = vec![shape.iter().product()],
            }
        }
        if params.is_empty() {
            return Err(bad(self.layers.len(), "no parameterized layers".into()));
        }
        if shape != [self.num_classes] || !matches!(params.last(), Some((LayerKind::Dense, _))) {
            return Err(bad(
                self.layers.len().saturating_sub(1),
                format!("network must end in a dense layer with {} outputs, ends with {shape:?}", self.num_classes),
            ));
        }
        Ok(params)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense,
    Conv2d { stride: usize, padding: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayer {
    pub name: String,
    pub ordinal: usize,
    pub kind: LayerKind,
    /// Dense `(out, in)`; conv `(out_ch, in_ch, kH, kW)`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
enum Item {
    Param(usize),
    Relu,
    AvgPool2,
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetSpec,
    items: Vec<Item>,
    layers: Vec<ParamLayer>,
}

/// Gradient of the loss for one parameterized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Which gradients a batch evaluation should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradRequest {
    None,
    Input,
    Params,
    Both,
}

impl GradRequest {
    fn input(self) -> bool {
        matches!(self, GradRequest::Input | GradRequest::Both)
    }

    fn params(self) -> bool {
        matches!(self, GradRequest::Params | GradRequest::Both)
    }
}

/// Result of evaluating a network on a labelled batch. `loss` is the mean
/// cross-entropy; gradients are of that mean.
#[derive(Clone, Debug)]
pub struct BatchEval {
    pub loss: f64,
    pub per_example_loss: Vec<f64>,
    pub logits: Tensor,
    pub input_grad: Option<Tensor>,
    pub param_grads: Option<Vec<LayerGrad>>,
}

impl BatchEval {
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.logits)
    }
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

struct NetGraph {
    graph: CompGraph,
    x: NodeId,
    labels: NodeId,
    params: Vec<(NodeId, NodeId)>,
    logits: NodeId,
}

impl Network {
    /// Builds a network with Kaiming-uniform weights (bound `sqrt(6 / fan_in)`)
    /// and zero biases.
    pub fn build(spec: &NetSpec, init_seed: u64) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut rng = rng::rng(rng::sub_seed(init_seed, &[rng::stream::INIT]));
        let mut layers = Vec::with_capacity(shapes.len());
        for (i, (kind, wshape)) in shapes.into_iter().enumerate() {
            let fan_in: usize = wshape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let numel: usize = wshape.iter().product();
            let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
            let out = wshape[0];
            let ordinal = i + 1;
            let prefix = match kind {
                LayerKind::Dense => "dense",
                LayerKind::Conv2d { .. } => "conv",
            };
            layers.push(ParamLayer { name: format!("{prefix}{ordinal}"), ordinal, kind, weight: Tensor::new(wshape, data)?, bias: Tensor::zeros(&[out]) });
        }
        let mut next = 0;
        let items = spec
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => {
                    next += 1;
                    Item::Param(next - 1)
                }
                LayerSpec::Relu => Item::Relu,
                LayerSpec::AvgPool2 => Item::AvgPool2,
                LayerSpec::Flatten => Item::Flatten,
            })
            .collect();
        Ok(Self { spec: spec.clone(), items, layers })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    /// Number of parameterized layers, `L`.
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.spec.input_shape
    }

    pub fn layers(&self) -> &[ParamLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ParamLayer] {
        &mut self.layers
    }

    /// Layer by 1-based ordinal.
    pub fn layer(&self, ordinal: usize) -> Result<&ParamLayer> {
        self.check_ordinal(ordinal)?;
        Ok(&self.layers[ordinal - 1])
    }

    pub fn layer_mut(&mut self, ordinal: usize) -> Result<&mut ParamLayer> {
        self.check_ordinal(ordinal)?;
        Ok(&mut self.layers[ordinal - 1])
    }

    pub fn check_ordinal(&self, ordinal: usize) -> Result<()> {
        if ordinal == 0 || ordinal > self.layers.len() {
            return Err(Error::OrdinalOutOfRange { ordinal, layers: self.layers.len() });
        }
        Ok(())
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel()).sum()
    }

    fn graph(&self, loss_scale: f64, request: GradRequest) -> NetGraph {
        let mut g = CompGraph::new();
        let x = g.leaf(if request.input() { LeafKind::Input } else { LeafKind::Constant }, "x");
        let labels = g.constant("labels");
        let pkind = if request.params() { LeafKind::Param } else { LeafKind::Constant };
        let params: Vec<(NodeId, NodeId)> =
            self.layers.iter().map(|l| (g.leaf(pkind, format!("{}.weight", l.name)), g.leaf(pkind, format!("{}.bias", l.name)))).collect();
        let mut h = x;
        for item in &self.items {
            h = match *item {
                Item::Param(i) => {
                    let (w, b) = params[i];
                    match self.layers[i].kind {
                        LayerKind::Dense => g.dense(h, w, b),
                        LayerKind::Conv2d { stride, padding } => g.conv2d(h, w, b, stride, padding),
                    }
                }
                Item::Relu => g.relu(h),
                Item::AvgPool2 => g.avg_pool2(h),
                Item::Flatten => g.flatten(h),
            };
        }
        let logits = h;
        let xent = g.softmax_xent(logits, labels);
        g.scale(xent, loss_scale);
        NetGraph { graph: g, x, labels, params, logits }
    }

    fn check_batch(&self, x: &Tensor, labels: &[usize]) -> Result<usize> {
        let [c, h, w] = self.spec.input_shape;
        let s = x.shape();
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch { expected: vec![s.first().copied().unwrap_or(0), c, h, w], found: s.to_vec() });
        }
        if labels.len() != s[0] {
            return Err(Error::InvalidShape(format!("{} labels for a batch of {}", labels.len(), s[0])));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= self.spec.num_classes) {
            return Err(Error::LabelOutOfRange { index: i, label: y, classes: self.spec.num_classes });
        }
        Ok(s[0])
    }

    /// Mean cross-entropy, per-example losses, logits and the requested
    /// gradients for a batch `x (N, C, H, W)`.
    pub fn evaluate_batch(&self, x: &Tensor, labels: &[usize], request: GradRequest) -> Result<BatchEval> {
        let n = self.check_batch(x, labels)?;
        let scale = 1.0 / n as f64;
        let chunks = n.div_ceil(CHUNK);
        let parts = par::try_map_indexed(chunks, |c| {
            let (lo, hi) = (c * CHUNK, ((c + 1) * CHUNK).min(n));
            let mut ng = self.graph(scale, request);
            let mut b = Bindings::new();
            b.bind(ng.x, x.slice_rows(lo, hi));
            b.bind(ng.labels, Tensor::from_vec(labels[lo..hi].iter().map(|&y| y as f64).collect()));
            for (layer, &(w, bias)) in self.layers.iter().zip(&ng.params) {
                b.bind(w, layer.weight.clone());
                b.bind(bias, layer.bias.clone());
            }
            let loss = ng.graph.forward(b)?.item();
            let logits = ng.graph.value(ng.logits).expect("evaluated").clone();
            let grads = if request == GradRequest::None { None } else { Some(ng.graph.backward()?) };
            Ok::<_, Error>((loss, logits, grads, ng.x, ng.params))
        })?;

        let k = self.spec.num_classes;
        let mut loss = 0.0;
        let mut logits = Vec::with_capacity(chunks);
        let mut input_grads = Vec::new();
        let mut param_grads: Option<Vec<LayerGrad>> = None;
        for (part_loss, part_logits, grads, xid, pids) in parts {
            loss += part_loss;
            logits.push(part_logits);
            let Some(mut grads) = grads else { continue };
            if request.input() {
                input_grads.push(grads.take(xid).expect("input gradient"));
            }
            if request.params() {
                let layer_grads =
                    pids.iter().map(|&(w, b)| LayerGrad { weight: grads.take(w).expect("weight gradient"), bias: grads.take(b).expect("bias gradient") });
                match &mut param_grads {
                    None => param_grads = Some(layer_grads.collect()),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(layer_grads) {
                            a.weight.add_assign(&g.weight)?;
                            a.bias.add_assign(&g.bias)?;
                        }
                    }
                }
            }
        }
        let logits = Tensor::concat_rows(&logits)?;
        let per_example_loss = softmax_xent_rows(logits.data(), labels, k);
        Ok(BatchEval { loss, per_example_loss, logits, input_grad: if request.input() { Some(Tensor::concat_rows(&input_grads)?) } else { None }, param_grads })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape().first().copied().unwrap_or(0);
        Ok(self.evaluate_batch(x, &vec![0; n], GradRequest::None)?.logits)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    /// Writes the parameters in the LAPC checkpoint format.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.checkpoint_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    /// LAPC layout: `"LAPC" | version u32 LE | layer count u32 LE |` then for
    /// each layer its weight and bias tensors, each as
    /// `name len u16 LE | UTF-8 name | rank u8 | dims u64 LE | f64 LE payload`.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.weight_count() * 2);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            write_tensor(&mut out, &format!("{}.weight", layer.name), &layer.weight);
            write_tensor(&mut out, &format!("{}.bias", layer.name), &layer.bias);
        }
        out
    }

    /// Reads a checkpoint written for a network with this `spec`.
    ///
    /// The file stores parameters only, so the architecture has to be
    /// supplied; names and shapes are checked against it.
    pub fn load_checkpoint(path: impl AsRef<Path>, spec: &NetSpec) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_checkpoint_bytes(&bytes, spec)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], spec: &NetSpec) -> Result<Self> {
        let tensors = read_checkpoint(bytes)?;
        let mut net = Self::build(spec, 0)?;
        if tensors.len() != 2 * net.layers.len() {
            return Err(Error::CorruptCheckpoint(format!("{} tensors stored, architecture has {} layers", tensors.len(), net.layers.len())));
        }
        for (layer, pair) in net.layers.iter_mut().zip(tensors.chunks(2)) {
            for ((name, tensor), (suffix, slot)) in pair.iter().zip([("weight", &mut layer.weight), ("bias", &mut layer.bias)]) {
                let expected = format!("{}.{suffix}", layer.name);
                if *name != expected {
                    return Err(Error::CorruptCheckpoint(format!("expected tensor {expected}, found {name}")));
                }
                if tensor.shape() != slot.shape() {
                    return Err(Error::CorruptCheckpoint(format!("{name} has shape {:?}, architecture expects {:?}", tensor.shape(), slot.shape())));
                }
                *slot = tensor.clone();
            }
        }
        Ok(net)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LAPC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated("checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a LAPC file into its named tensors, in file order.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let layers = r.u32()? as usize;
    // Each tensor record takes at least 3 bytes, which bounds a corrupt count.
    let mut tensors = Vec::with_capacity((2 * layers).min(bytes.len() / 3));
    for _ in 0..2 * layers {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?.to_string();
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len())).ok_or(Error::Truncated("checkpoint"))?;
        let payload = r.take(numel * 8)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let tensor = Tensor::new(dims, data).map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}")))?;
        tensors.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(tensors)
}
