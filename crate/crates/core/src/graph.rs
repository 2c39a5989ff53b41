//! A small compute graph with reverse-mode differentiation.
//!
//! The op basis is deliberately tiny: ten kinds, each with a total shape
//! rule checked when the graph is built, so a graph that constructs will
//! also execute. Activations keep a free leading batch dimension; shapes
//! are tracked per sample.
//!
//! Execution is single-threaded and deterministic: one platform, same
//! inputs and parameters, bitwise-identical outputs. Scalar objectives
//! (losses) are not ops; they attach behind the graph output through the
//! [`Objective`] trait, providing the backward seed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("graph input {0} not bound")]
    UnboundInput(String),
    #[error("{0} is not a graph input")]
    UnknownInput(String),
    #[error("parameter {0} missing from the store")]
    UnknownParam(String),
    #[error("parameter {0} defined twice")]
    DuplicateParam(String),
    #[error("backward needs a scalar output, got {len} elements")]
    NonScalarOutput { len: usize },
    #[error("objective failed: {0}")]
    ObjectiveFailed(String),
}

/// Per-sample shape of an activation: a feature map or a flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sig {
    Map { c: usize, h: usize, w: usize },
    Flat { k: usize },
}

impl Sig {
    pub fn len(&self) -> usize {
        match *self {
            Sig::Map { c, h, w } => c * h * w,
            Sig::Flat { k } => k,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn matches(&self, shape: &[usize]) -> bool {
        match *self {
            Sig::Map { c, h, w } => {
                shape.len() == 4 && shape[1] == c && shape[2] == h && shape[3] == w
            }
            Sig::Flat { k } => shape.len() == 2 && shape[1] == k,
        }
    }

    fn to_shape(self, n: usize) -> Vec<usize> {
        match self {
            Sig::Map { c, h, w } => vec![n, c, h, w],
            Sig::Flat { k } => vec![n, k],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OpKind {
    Conv2d { stride: usize, padding: usize },
    Relu,
    MaxPool2x2,
    NearestUpsample2x,
    ChannelConcat,
    Sigmoid,
    Add,
    MatMul,
    GlobalAvgPool,
    Scale { factor: f64 },
}

/// Where a node reads from: a bound input slot or an earlier node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Input(usize),
    Node(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub kind: OpKind,
    pub inputs: Vec<Source>,
    /// Parameter names this node reads, in op-defined order
    /// (conv: weight, bias; matmul: weight).
    pub params: Vec<String>,
}

/// An immutable, topologically ordered op graph with one output.
///
/// Shape rules were checked at build time, so any tensor bundle that
/// passes input validation executes without shape surprises.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeGraph {
    input_names: Vec<String>,
    input_sigs: Vec<Sig>,
    nodes: Vec<Node>,
    node_sigs: Vec<Sig>,
    output: usize,
    param_shapes: BTreeMap<String, Vec<usize>>,
}

impl ComputeGraph {
    pub fn input_names(&self) -> &[String] {
        &self.input_names
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn output_sig(&self) -> Sig {
        self.node_sigs[self.output]
    }

    /// Parameter names and shapes, ordered by name.
    pub fn param_shapes(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.param_shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes
            .values()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

/// Named parameter tensors. Ordered by name so that every iteration
/// (initialization, optimizer steps, checkpointing) is deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, EngineError> {
        self.tensors
            .get(name)
            .ok_or_else(|| EngineError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, EngineError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| EngineError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn value_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.grad_mut().fill(0.0);
        }
    }

    /// Checks that the store holds exactly the parameters the graph
    /// declares, with matching shapes.
    pub fn validate_for(&self, graph: &ComputeGraph) -> Result<(), EngineError> {
        for (name, shape) in graph.param_shapes() {
            let t = self.get(name)?;
            if t.shape() != &shape[..] {
                return Err(EngineError::ShapeMismatch(format!(
                    "parameter {name} has shape {:?}, graph wants {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

/// Builds a [`ComputeGraph`], checking every op's shape rule as it is added.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    input_names: Vec<String>,
    input_sigs: Vec<Sig>,
    nodes: Vec<Node>,
    node_sigs: Vec<Sig>,
    param_shapes: BTreeMap<String, Vec<usize>>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, name: &str, sig: Sig) -> Result<Source, EngineError> {
        if self.input_names.iter().any(|n| n == name) {
            return Err(EngineError::DuplicateParam(name.to_string()));
        }
        if sig.is_empty() {
            return Err(EngineError::ShapeMismatch(format!(
                "input {name} has an empty shape"
            )));
        }
        self.input_names.push(name.to_string());
        self.input_sigs.push(sig);
        Ok(Source::Input(self.input_names.len() - 1))
    }

    fn sig(&self, s: Source) -> Sig {
        match s {
            Source::Input(i) => self.input_sigs[i],
            Source::Node(i) => self.node_sigs[i],
        }
    }

    /// Per-sample shape of an already added source.
    pub fn source_sig(&self, s: Source) -> Sig {
        self.sig(s)
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<Source>, params: Vec<String>, sig: Sig) -> Source {
        self.nodes.push(Node {
            kind,
            inputs,
            params,
        });
        self.node_sigs.push(sig);
        Source::Node(self.nodes.len() - 1)
    }

    fn register_param(&mut self, name: &str, shape: Vec<usize>) -> Result<(), EngineError> {
        if self.param_shapes.contains_key(name) {
            return Err(EngineError::DuplicateParam(name.to_string()));
        }
        self.param_shapes.insert(name.to_string(), shape);
        Ok(())
    }

    /// Square-kernel convolution (cross-correlation) with bias. Registers
    /// `{prefix}.weight` of shape `[cout, cin, k, k]` and `{prefix}.bias`
    /// of shape `[cout]`.
    pub fn conv2d(
        &mut self,
        src: Source,
        prefix: &str,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Source, EngineError> {
        let Sig::Map { c, h, w } = self.sig(src) else {
            return Err(EngineError::ShapeMismatch(format!(
                "conv2d {prefix} needs a feature-map input"
            )));
        };
        if cout == 0 || k == 0 || stride == 0 {
            return Err(EngineError::ShapeMismatch(format!(
                "conv2d {prefix}: cout, kernel and stride must be positive"
            )));
        }
        let out_extent = |x: usize| -> Result<usize, EngineError> {
            let span = (x + 2 * padding).checked_sub(k).ok_or_else(|| {
                EngineError::ShapeMismatch(format!(
                    "conv2d {prefix}: kernel {k} exceeds padded extent {}",
                    x + 2 * padding
                ))
            })?;
            if span % stride != 0 {
                return Err(EngineError::ShapeMismatch(format!(
                    "conv2d {prefix}: extent {x} with padding {padding}, kernel {k}, \
                     stride {stride} is not an integral output size"
                )));
            }
            Ok(span / stride + 1)
        };
        let (oh, ow) = (out_extent(h)?, out_extent(w)?);
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        self.register_param(&weight, vec![cout, c, k, k])?;
        self.register_param(&bias, vec![cout])?;
        Ok(self.push(
            OpKind::Conv2d { stride, padding },
            vec![src],
            vec![weight, bias],
            Sig::Map {
                c: cout,
                h: oh,
                w: ow,
            },
        ))
    }

    pub fn relu(&mut self, src: Source) -> Source {
        let sig = self.sig(src);
        self.push(OpKind::Relu, vec![src], vec![], sig)
    }

    pub fn maxpool(&mut self, src: Source) -> Result<Source, EngineError> {
        let Sig::Map { c, h, w } = self.sig(src) else {
            return Err(EngineError::ShapeMismatch(
                "maxpool needs a feature-map input".into(),
            ));
        };
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(EngineError::ShapeMismatch(format!(
                "maxpool needs even extents, got {h}x{w}"
            )));
        }
        Ok(self.push(
            OpKind::MaxPool2x2,
            vec![src],
            vec![],
            Sig::Map {
                c,
                h: h / 2,
                w: w / 2,
            },
        ))
    }

    pub fn upsample(&mut self, src: Source) -> Result<Source, EngineError> {
        let Sig::Map { c, h, w } = self.sig(src) else {
            return Err(EngineError::ShapeMismatch(
                "upsample needs a feature-map input".into(),
            ));
        };
        Ok(self.push(
            OpKind::NearestUpsample2x,
            vec![src],
            vec![],
            Sig::Map {
                c,
                h: 2 * h,
                w: 2 * w,
            },
        ))
    }

    pub fn concat(&mut self, srcs: &[Source]) -> Result<Source, EngineError> {
        if srcs.is_empty() {
            return Err(EngineError::ShapeMismatch("concat of nothing".into()));
        }
        let mut total_c = 0;
        let mut hw = None;
        for &s in srcs {
            let Sig::Map { c, h, w } = self.sig(s) else {
                return Err(EngineError::ShapeMismatch(
                    "concat needs feature-map inputs".into(),
                ));
            };
            if *hw.get_or_insert((h, w)) != (h, w) {
                return Err(EngineError::ShapeMismatch(format!(
                    "concat inputs disagree spatially: {:?} vs {h}x{w}",
                    hw.unwrap()
                )));
            }
            total_c += c;
        }
        let (h, w) = hw.unwrap();
        Ok(self.push(
            OpKind::ChannelConcat,
            srcs.to_vec(),
            vec![],
            Sig::Map { c: total_c, h, w },
        ))
    }

    pub fn sigmoid(&mut self, src: Source) -> Source {
        let sig = self.sig(src);
        self.push(OpKind::Sigmoid, vec![src], vec![], sig)
    }

    pub fn add(&mut self, a: Source, b: Source) -> Result<Source, EngineError> {
        let (sa, sb) = (self.sig(a), self.sig(b));
        if sa != sb {
            return Err(EngineError::ShapeMismatch(format!(
                "add inputs disagree: {sa:?} vs {sb:?}"
            )));
        }
        Ok(self.push(OpKind::Add, vec![a, b], vec![], sa))
    }

    /// Flat-vector projection. Registers `{prefix}.weight` of shape `[k, d]`.
    pub fn matmul(&mut self, src: Source, prefix: &str, d: usize) -> Result<Source, EngineError> {
        let Sig::Flat { k } = self.sig(src) else {
            return Err(EngineError::ShapeMismatch(format!(
                "matmul {prefix} needs a flat input"
            )));
        };
        if d == 0 {
            return Err(EngineError::ShapeMismatch(format!(
                "matmul {prefix}: output dim must be positive"
            )));
        }
        let weight = format!("{prefix}.weight");
        self.register_param(&weight, vec![k, d])?;
        Ok(self.push(OpKind::MatMul, vec![src], vec![weight], Sig::Flat { k: d }))
    }

    pub fn global_avg_pool(&mut self, src: Source) -> Result<Source, EngineError> {
        let Sig::Map { c, .. } = self.sig(src) else {
            return Err(EngineError::ShapeMismatch(
                "global_avg_pool needs a feature-map input".into(),
            ));
        };
        Ok(self.push(OpKind::GlobalAvgPool, vec![src], vec![], Sig::Flat { k: c }))
    }

    pub fn scale(&mut self, src: Source, factor: f64) -> Source {
        let sig = self.sig(src);
        self.push(OpKind::Scale { factor }, vec![src], vec![], sig)
    }

    pub fn build(self, output: Source) -> Result<ComputeGraph, EngineError> {
        let Source::Node(output) = output else {
            return Err(EngineError::ShapeMismatch(
                "graph output must be a node, not a raw input".into(),
            ));
        };
        Ok(ComputeGraph {
            input_names: self.input_names,
            input_sigs: self.input_sigs,
            nodes: self.nodes,
            node_sigs: self.node_sigs,
            output,
            param_shapes: self.param_shapes,
        })
    }
}

/// Cached activations of one forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    input_acts: Vec<Tensor>,
    node_acts: Vec<Tensor>,
    output: usize,
    batch: usize,
}

impl ForwardPass {
    pub fn output(&self) -> &Tensor {
        &self.node_acts[self.output]
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    fn act(&self, s: Source) -> &Tensor {
        match s {
            Source::Input(i) => &self.input_acts[i],
            Source::Node(i) => &self.node_acts[i],
        }
    }
}

/// Gradients with respect to the bound inputs, by input name.
#[derive(Debug)]
pub struct InputGrads {
    names: Vec<String>,
    grads: Vec<Tensor>,
}

impl InputGrads {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.grads[i])
    }
}

/// Runs the graph on named input tensors, caching every activation.
pub fn forward(
    graph: &ComputeGraph,
    params: &ParamStore,
    inputs: &[(&str, &Tensor)],
) -> Result<ForwardPass, EngineError> {
    params.validate_for(graph)?;
    for (name, _) in inputs {
        if !graph.input_names.iter().any(|n| n == name) {
            return Err(EngineError::UnknownInput(name.to_string()));
        }
    }
    let mut batch = 0usize;
    let mut input_acts = Vec::with_capacity(graph.input_names.len());
    for (i, name) in graph.input_names.iter().enumerate() {
        let (_, tensor) = inputs
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| EngineError::UnboundInput(name.clone()))?;
        if !graph.input_sigs[i].matches(tensor.shape()) {
            return Err(EngineError::ShapeMismatch(format!(
                "input {name} has shape {:?}, expected {:?} per sample",
                tensor.shape(),
                graph.input_sigs[i]
            )));
        }
        let n = tensor.shape()[0];
        if i == 0 {
            batch = n;
        } else if n != batch {
            return Err(EngineError::ShapeMismatch(format!(
                "input {name} has batch {n}, expected {batch}"
            )));
        }
        input_acts.push((*tensor).clone());
    }
    if batch == 0 {
        return Err(EngineError::ShapeMismatch("batch must be non-empty".into()));
    }

    let mut node_acts: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    for (id, node) in graph.nodes.iter().enumerate() {
        let act = {
            let src = |s: Source| -> &Tensor {
                match s {
                    Source::Input(i) => &input_acts[i],
                    Source::Node(i) => &node_acts[i],
                }
            };
            let out_shape = graph.node_sigs[id].to_shape(batch);
            let mut out = Tensor::zeros(out_shape);
            match node.kind {
                OpKind::Conv2d { stride, padding } => {
                    let weight = params.get(&node.params[0])?;
                    let bias = params.get(&node.params[1])?;
                    conv2d_forward(src(node.inputs[0]), weight, bias, stride, padding, &mut out);
                }
                OpKind::Relu => {
                    let x = src(node.inputs[0]);
                    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                        *o = if v > 0.0 { v } else { 0.0 };
                    }
                }
                OpKind::MaxPool2x2 => maxpool_forward(src(node.inputs[0]), &mut out),
                OpKind::NearestUpsample2x => upsample_forward(src(node.inputs[0]), &mut out),
                OpKind::ChannelConcat => {
                    let srcs: Vec<&Tensor> = node.inputs.iter().map(|&s| src(s)).collect();
                    concat_forward(&srcs, &mut out);
                }
                OpKind::Sigmoid => {
                    let x = src(node.inputs[0]);
                    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                        *o = sigmoid(v);
                    }
                }
                OpKind::Add => {
                    let (a, b) = (src(node.inputs[0]), src(node.inputs[1]));
                    for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                        *o = x + y;
                    }
                }
                OpKind::MatMul => {
                    let weight = params.get(&node.params[0])?;
                    matmul_forward(src(node.inputs[0]), weight, &mut out);
                }
                OpKind::GlobalAvgPool => gap_forward(src(node.inputs[0]), &mut out),
                OpKind::Scale { factor } => {
                    let x = src(node.inputs[0]);
                    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                        *o = v * factor;
                    }
                }
            }
            out
        };
        node_acts.push(act);
    }

    Ok(ForwardPass {
        input_acts,
        node_acts,
        output: graph.output,
        batch,
    })
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    out: &mut Tensor,
) {
    let [n, cin, h, w] = input.shape() else {
        unreachable!()
    };
    let (n, cin, h, w) = (*n, *cin, *h, *w);
    let [cout, _, kh, kw] = weight.shape() else {
        unreachable!()
    };
    let (cout, kh, kw) = (*cout, *kh, *kw);
    let (oh, ow) = (out.shape()[2], out.shape()[3]);
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let o = out.data_mut();

    for ni in 0..n {
        for co in 0..cout {
            let out_plane = &mut o[(ni * cout + co) * oh * ow..][..oh * ow];
            out_plane.fill(b[co]);
            for ci in 0..cin {
                let in_plane = &x[(ni * cin + ci) * h * w..][..h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[((co * cin + ci) * kh + ky) * kw + kx];
                        accumulate_rows(
                            out_plane, in_plane, wv, oh, ow, h, w, stride, padding, ky, kx,
                        );
                    }
                }
            }
        }
    }
}

/// For one kernel tap, adds `wv * input` into every valid output position.
/// The stride-1 case runs over contiguous rows.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_rows(
    out_plane: &mut [f64],
    in_plane: &[f64],
    wv: f64,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    stride: usize,
    padding: usize,
    ky: usize,
    kx: usize,
) {
    for oy in 0..oh {
        let iy = (oy * stride + ky) as isize - padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let iy = iy as usize;
        // Valid ox range: 0 <= ox*stride + kx - padding < w.
        let (ox_lo, ox_hi) = valid_range(ow, w, stride, padding, kx);
        if ox_lo >= ox_hi {
            continue;
        }
        if stride == 1 {
            let ix_lo = (ox_lo + kx) - padding;
            let orow = &mut out_plane[oy * ow + ox_lo..oy * ow + ox_hi];
            let irow = &in_plane[iy * w + ix_lo..iy * w + ix_lo + (ox_hi - ox_lo)];
            for (ov, iv) in orow.iter_mut().zip(irow) {
                *ov += wv * iv;
            }
        } else {
            for ox in ox_lo..ox_hi {
                let ix = ox * stride + kx - padding;
                out_plane[oy * ow + ox] += wv * in_plane[iy * w + ix];
            }
        }
    }
}

/// Largest `[lo, hi)` so every `ox` inside maps to a valid input column.
#[inline]
fn valid_range(ow: usize, w: usize, stride: usize, padding: usize, kx: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(kx).div_ceil(stride).min(ow);
    // ox*stride + kx - padding <= w-1  =>  ox <= (w-1+padding-kx)/stride
    let hi = match (w + padding).checked_sub(kx + 1) {
        Some(top) => (top / stride + 1).min(ow),
        None => 0,
    };
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    dout: &[f64],
    out_shape: &[usize],
    dinput: &mut [f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
) {
    let [n, cin, h, w] = input.shape() else {
        unreachable!()
    };
    let (n, cin, h, w) = (*n, *cin, *h, *w);
    let [cout, _, kh, kw] = weight.shape() else {
        unreachable!()
    };
    let (cout, kh, kw) = (*cout, *kh, *kw);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let x = input.data();
    let wt = weight.data();

    for ni in 0..n {
        for co in 0..cout {
            let dout_plane = &dout[(ni * cout + co) * oh * ow..][..oh * ow];
            for v in dout_plane {
                dbias[co] += v;
            }
            for ci in 0..cin {
                let in_plane = &x[(ni * cin + ci) * h * w..][..h * w];
                let din_plane = &mut dinput[(ni * cin + ci) * h * w..][..h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                        let wv = wt[widx];
                        let mut wsum = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            let (ox_lo, ox_hi) = valid_range(ow, w, stride, padding, kx);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            if stride == 1 {
                                let ix_lo = (ox_lo + kx) - padding;
                                let len = ox_hi - ox_lo;
                                let drow = &dout_plane[oy * ow + ox_lo..oy * ow + ox_hi];
                                let irow = &in_plane[iy * w + ix_lo..iy * w + ix_lo + len];
                                let dirow = &mut din_plane[iy * w + ix_lo..iy * w + ix_lo + len];
                                for ((dv, iv), div) in drow.iter().zip(irow).zip(dirow) {
                                    wsum += dv * iv;
                                    *div += wv * dv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - padding;
                                    let dv = dout_plane[oy * ow + ox];
                                    wsum += dv * in_plane[iy * w + ix];
                                    din_plane[iy * w + ix] += wv * dv;
                                }
                            }
                        }
                        dweight[widx] += wsum;
                    }
                }
            }
        }
    }
}

fn maxpool_forward(input: &Tensor, out: &mut Tensor) {
    let [n, c, h, w] = input.shape() else {
        unreachable!()
    };
    let (planes, h, w) = (n * c, *h, *w);
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let o = out.data_mut();
    for p in 0..planes {
        let in_plane = &x[p * h * w..][..h * w];
        let out_plane = &mut o[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                out_plane[oy * ow + ox] = pool_window(in_plane, w, oy, ox).0;
            }
        }
    }
}

/// Max value and its intra-window index (0..4, row-major scan, first max
/// wins ties).
#[inline]
fn pool_window(in_plane: &[f64], w: usize, oy: usize, ox: usize) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut best_i = 0;
    for (i, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
        let v = in_plane[(2 * oy + dy) * w + 2 * ox + dx];
        if v > best {
            best = v;
            best_i = i;
        }
    }
    (best, best_i)
}

fn upsample_forward(input: &Tensor, out: &mut Tensor) {
    let [n, c, h, w] = input.shape() else {
        unreachable!()
    };
    let (planes, h, w) = (n * c, *h, *w);
    let (oh, ow) = (2 * h, 2 * w);
    let x = input.data();
    let o = out.data_mut();
    for p in 0..planes {
        let in_plane = &x[p * h * w..][..h * w];
        let out_plane = &mut o[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                out_plane[oy * ow + ox] = in_plane[(oy / 2) * w + ox / 2];
            }
        }
    }
}

fn concat_forward(srcs: &[&Tensor], out: &mut Tensor) {
    let n = srcs[0].shape()[0];
    let (oc, h, w) = (out.shape()[1], out.shape()[2], out.shape()[3]);
    let o = out.data_mut();
    for ni in 0..n {
        let mut c_off = 0;
        for s in srcs {
            let sc = s.shape()[1];
            let chunk = sc * h * w;
            let src_block = &s.data()[ni * chunk..][..chunk];
            o[(ni * oc + c_off) * h * w..][..chunk].copy_from_slice(src_block);
            c_off += sc;
        }
    }
}

fn matmul_forward(input: &Tensor, weight: &Tensor, out: &mut Tensor) {
    let [n, k] = input.shape() else {
        unreachable!()
    };
    let (n, k) = (*n, *k);
    let d = weight.shape()[1];
    let x = input.data();
    let wt = weight.data();
    let o = out.data_mut();
    for ni in 0..n {
        let row = &x[ni * k..][..k];
        let orow = &mut o[ni * d..][..d];
        for (ki, &xv) in row.iter().enumerate() {
            let wrow = &wt[ki * d..][..d];
            for (ov, wv) in orow.iter_mut().zip(wrow) {
                *ov += xv * wv;
            }
        }
    }
}

fn gap_forward(input: &Tensor, out: &mut Tensor) {
    let [n, c, h, w] = input.shape() else {
        unreachable!()
    };
    let (n, c, hw) = (*n, *c, h * w);
    let x = input.data();
    let o = out.data_mut();
    let inv = 1.0 / hw as f64;
    for ni in 0..n {
        for ci in 0..c {
            let plane = &x[(ni * c + ci) * hw..][..hw];
            let mut sum = 0.0;
            for v in plane {
                sum += v;
            }
            o[ni * c + ci] = sum * inv;
        }
    }
}

/// Reverse pass from an explicit seed `∂L/∂output`. Parameter gradient
/// buffers are zeroed first, then filled; gradients with respect to the
/// inputs are returned. Used by loss heads, which differentiate themselves
/// analytically down to the graph output.
pub fn backward_seeded(
    graph: &ComputeGraph,
    params: &mut ParamStore,
    fwd: &ForwardPass,
    seed: &Tensor,
) -> Result<InputGrads, EngineError> {
    if seed.shape() != fwd.output().shape() {
        return Err(EngineError::ShapeMismatch(format!(
            "seed shape {:?} does not match output {:?}",
            seed.shape(),
            fwd.output().shape()
        )));
    }
    params.zero_grads();

    let mut node_grads: Vec<Option<Vec<f64>>> = vec![None; graph.nodes.len()];
    let mut input_grads: Vec<Vec<f64>> =
        fwd.input_acts.iter().map(|t| vec![0.0; t.len()]).collect();
    node_grads[graph.output] = Some(seed.data().to_vec());

    for id in (0..graph.nodes.len()).rev() {
        let Some(dout) = node_grads[id].take() else {
            continue;
        };
        let node = &graph.nodes[id];
        // Routes `grad` into the buffer of `src`, allocating on first touch.
        macro_rules! route {
            ($src:expr, $apply:expr) => {{
                let src: Source = $src;
                let target: &mut Vec<f64> = match src {
                    Source::Input(i) => &mut input_grads[i],
                    Source::Node(i) => {
                        node_grads[i].get_or_insert_with(|| vec![0.0; fwd.node_acts[i].len()])
                    }
                };
                #[allow(clippy::redundant_closure_call)]
                ($apply)(target);
            }};
        }
        match node.kind {
            OpKind::Conv2d { stride, padding } => {
                let input = fwd.act(node.inputs[0]);
                let weight = params.get(&node.params[0])?.clone();
                let out_shape = fwd.node_acts[id].shape().to_vec();
                let mut dinput = vec![0.0; input.len()];
                let mut dweight = vec![0.0; weight.len()];
                let mut dbias = vec![0.0; params.get(&node.params[1])?.len()];
                conv2d_backward(
                    input,
                    &weight,
                    stride,
                    padding,
                    &dout,
                    &out_shape,
                    &mut dinput,
                    &mut dweight,
                    &mut dbias,
                );
                route!(node.inputs[0], |t: &mut Vec<f64>| add_into(t, &dinput));
                add_into(params.get_mut(&node.params[0])?.grad_mut(), &dweight);
                add_into(params.get_mut(&node.params[1])?.grad_mut(), &dbias);
            }
            OpKind::Relu => {
                let x = fwd.act(node.inputs[0]);
                route!(node.inputs[0], |t: &mut Vec<f64>| {
                    for ((tv, &g), &xv) in t.iter_mut().zip(&dout).zip(x.data()) {
                        if xv > 0.0 {
                            *tv += g;
                        }
                    }
                });
            }
            OpKind::MaxPool2x2 => {
                let x = fwd.act(node.inputs[0]);
                let [n, c, h, w] = x.shape() else {
                    unreachable!()
                };
                let (planes, h, w) = (n * c, *h, *w);
                let (oh, ow) = (h / 2, w / 2);
                route!(node.inputs[0], |t: &mut Vec<f64>| {
                    for p in 0..planes {
                        let in_plane = &x.data()[p * h * w..][..h * w];
                        let dplane = &dout[p * oh * ow..][..oh * ow];
                        let tplane = &mut t[p * h * w..][..h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let (_, wi) = pool_window(in_plane, w, oy, ox);
                                let (dy, dx) = [(0, 0), (0, 1), (1, 0), (1, 1)][wi];
                                tplane[(2 * oy + dy) * w + 2 * ox + dx] += dplane[oy * ow + ox];
                            }
                        }
                    }
                });
            }
            OpKind::NearestUpsample2x => {
                let x = fwd.act(node.inputs[0]);
                let [n, c, h, w] = x.shape() else {
                    unreachable!()
                };
                let (planes, h, w) = (n * c, *h, *w);
                let (oh, ow) = (2 * h, 2 * w);
                route!(node.inputs[0], |t: &mut Vec<f64>| {
                    for p in 0..planes {
                        let dplane = &dout[p * oh * ow..][..oh * ow];
                        let tplane = &mut t[p * h * w..][..h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                tplane[(oy / 2) * w + ox / 2] += dplane[oy * ow + ox];
                            }
                        }
                    }
                });
            }
            OpKind::ChannelConcat => {
                let n = fwd.batch;
                let oc = fwd.node_acts[id].shape()[1];
                let (h, w) = (fwd.node_acts[id].shape()[2], fwd.node_acts[id].shape()[3]);
                let mut c_off = 0;
                for &src in &node.inputs {
                    let sc = fwd.act(src).shape()[1];
                    let chunk = sc * h * w;
                    route!(src, |t: &mut Vec<f64>| {
                        for ni in 0..n {
                            let dblock = &dout[(ni * oc + c_off) * h * w..][..chunk];
                            add_into(&mut t[ni * chunk..ni * chunk + chunk], dblock);
                        }
                    });
                    c_off += sc;
                }
            }
            OpKind::Sigmoid => {
                let y = &fwd.node_acts[id];
                route!(node.inputs[0], |t: &mut Vec<f64>| {
                    for ((tv, &g), &yv) in t.iter_mut().zip(&dout).zip(y.data()) {
                        *tv += g * yv * (1.0 - yv);
                    }
                });
            }
            OpKind::Add => {
                route!(node.inputs[0], |t: &mut Vec<f64>| add_into(t, &dout));
                route!(node.inputs[1], |t: &mut Vec<f64>| add_into(t, &dout));
            }
            OpKind::MatMul => {
                let x = fwd.act(node.inputs[0]);
                let weight = params.get(&node.params[0])?.clone();
                let [n, k] = x.shape() else { unreachable!() };
                let (n, k) = (*n, *k);
                let d = weight.shape()[1];
                route!(node.inputs[0], |t: &mut Vec<f64>| {
                    for ni in 0..n {
                        let drow = &dout[ni * d..][..d];
                        let trow = &mut t[ni * k..][..k];
                        for (ki, tk) in trow.iter_mut().enumerate() {
                            let wrow = &weight.data()[ki * d..][..d];
                            let mut s = 0.0;
                            for (dv, wv) in drow.iter().zip(wrow) {
                                s += dv * wv;
                            }
                            *tk += s;
                        }
                    }
                });
                let dweight = params.get_mut(&node.params[0])?.grad_mut();
                for ni in 0..n {
                    let xrow = &x.data()[ni * k..][..k];
                    let drow = &dout[ni * d..][..d];
                    for (ki, &xv) in xrow.iter().enumerate() {
                        let dwrow = &mut dweight[ki * d..ki * d + d];
                        for (dwv, dv) in dwrow.iter_mut().zip(drow) {
                            *dwv += xv * dv;
                        }
                    }
                }
            }
            OpKind::GlobalAvgPool => {
                let x = fwd.act(node.inputs[0]);
                let [n, c, h, w] = x.shape() else {
                    unreachable!()
                };
                let (n, c, hw) = (*n, *c, h * w);
                let inv = 1.0 / hw as f64;
                route!(node.inputs[0], |t: &mut Vec<f64>| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let g = dout[ni * c + ci] * inv;
                            let tplane = &mut t[(ni * c + ci) * hw..][..hw];
                            for tv in tplane {
                                *tv += g;
                            }
                        }
                    }
                });
            }
            OpKind::Scale { factor } => {
                route!(node.inputs[0], |t: &mut Vec<f64>| {
                    for (tv, &g) in t.iter_mut().zip(&dout) {
                        *tv += g * factor;
                    }
                });
            }
        }
    }

    let grads = fwd
        .input_acts
        .iter()
        .zip(input_grads)
        .map(|(t, g)| Tensor::new(t.shape().to_vec(), g).expect("grad matches activation"))
        .collect();
    Ok(InputGrads {
        names: graph.input_names.clone(),
        grads,
    })
}

#[inline]
fn add_into(target: &mut [f64], src: &[f64]) {
    for (t, s) in target.iter_mut().zip(src) {
        *t += s;
    }
}

/// Reverse pass for a scalar-output graph: seeds with 1.
pub fn backward(
    graph: &ComputeGraph,
    params: &mut ParamStore,
    fwd: &ForwardPass,
) -> Result<InputGrads, EngineError> {
    let len = fwd.output().len();
    if len != 1 {
        return Err(EngineError::NonScalarOutput { len });
    }
    let seed = Tensor::new(fwd.output().shape().to_vec(), vec![1.0])?;
    backward_seeded(graph, params, fwd, &seed)
}

/// A scalar objective attached behind the graph output: its value, and the
/// seed gradient `∂value/∂output` for the reverse pass.
pub trait Objective {
    fn value(&self, output: &Tensor) -> Result<f64, EngineError>;
    fn seed(&self, output: &Tensor) -> Result<Tensor, EngineError>;
}

/// Reads a scalar graph output as the objective itself.
pub struct UnitObjective;

impl Objective for UnitObjective {
    fn value(&self, output: &Tensor) -> Result<f64, EngineError> {
        if output.len() != 1 {
            return Err(EngineError::NonScalarOutput { len: output.len() });
        }
        Ok(output.data()[0])
    }

    fn seed(&self, output: &Tensor) -> Result<Tensor, EngineError> {
        if output.len() != 1 {
            return Err(EngineError::NonScalarOutput { len: output.len() });
        }
        Tensor::new(output.shape().to_vec(), vec![1.0])
    }
}

/// Mean of all output elements; a batch-friendly scalar objective for
/// gradient verification.
pub struct MeanObjective;

impl Objective for MeanObjective {
    fn value(&self, output: &Tensor) -> Result<f64, EngineError> {
        Ok(output.data().iter().sum::<f64>() / output.len() as f64)
    }

    fn seed(&self, output: &Tensor) -> Result<Tensor, EngineError> {
        let inv = 1.0 / output.len() as f64;
        Tensor::new(output.shape().to_vec(), vec![inv; output.len()])
    }
}

/// One verified coordinate of a gradient check.
#[derive(Debug, Clone)]
pub struct CheckedCoord {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: Vec<CheckedCoord>,
    /// Coordinates whose perturbation crossed a ReLU/MaxPool tie point;
    /// excluded from the maximum.
    pub skipped: Vec<(String, usize)>,
}

/// Central-difference verification of the analytic gradient on the given
/// parameter coordinates.
///
/// Relative error per coordinate is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`. Coordinates
/// where the two perturbed passes disagree in any ReLU activation sign or
/// MaxPool argmax, or where a ReLU input sits exactly at 0, are skipped and
/// reported instead of checked: the loss is not differentiable there.
pub fn gradient_check(
    graph: &ComputeGraph,
    params: &mut ParamStore,
    inputs: &[(&str, &Tensor)],
    objective: &dyn Objective,
    coords: &[(String, usize)],
    h: f64,
) -> Result<GradCheckReport, EngineError> {
    let fwd = forward(graph, params, inputs)?;
    let seed = objective.seed(fwd.output())?;
    backward_seeded(graph, params, &fwd, &seed)?;
    let analytic: BTreeMap<String, Vec<f64>> = params
        .iter()
        .map(|(n, t)| (n.clone(), t.grad().unwrap_or(&[]).to_vec()))
        .collect();

    let mut report = GradCheckReport::default();
    for (name, index) in coords {
        let orig = {
            let t = params.get(name)?;
            if *index >= t.len() {
                return Err(EngineError::ShapeMismatch(format!(
                    "coordinate {index} out of range for {name}"
                )));
            }
            t.data()[*index]
        };

        params.get_mut(name)?.data_mut()[*index] = orig + h;
        let fwd_plus = forward(graph, params, inputs)?;
        let v_plus = objective.value(fwd_plus.output())?;
        let (pat_plus, zero_plus) = discrete_pattern(graph, &fwd_plus);

        params.get_mut(name)?.data_mut()[*index] = orig - h;
        let fwd_minus = forward(graph, params, inputs)?;
        let v_minus = objective.value(fwd_minus.output())?;
        let (pat_minus, zero_minus) = discrete_pattern(graph, &fwd_minus);

        params.get_mut(name)?.data_mut()[*index] = orig;

        if pat_plus != pat_minus || zero_plus || zero_minus {
            report.skipped.push((name.clone(), *index));
            continue;
        }

        let numeric = (v_plus - v_minus) / (2.0 * h);
        let a = analytic[name][*index];
        let rel_err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        report.max_rel_err = report.max_rel_err.max(rel_err);
        report.checked.push(CheckedCoord {
            name: name.clone(),
            index: *index,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    Ok(report)
}

/// Discrete decisions of a pass: ReLU activation signs and MaxPool argmax
/// choices, plus whether any ReLU input sat exactly at 0.
fn discrete_pattern(graph: &ComputeGraph, fwd: &ForwardPass) -> (Vec<u8>, bool) {
    let mut pattern = Vec::new();
    let mut any_zero = false;
    for (id, node) in graph.nodes.iter().enumerate() {
        match node.kind {
            OpKind::Relu => {
                let x = fwd.act(node.inputs[0]);
                for &v in x.data() {
                    pattern.push(u8::from(v > 0.0));
                    any_zero |= v == 0.0;
                }
            }
            OpKind::MaxPool2x2 => {
                let x = fwd.act(node.inputs[0]);
                let [n, c, h, w] = x.shape() else {
                    unreachable!()
                };
                let (planes, h, w) = (n * c, *h, *w);
                let (oh, ow) = (h / 2, w / 2);
                for p in 0..planes {
                    let in_plane = &x.data()[p * h * w..][..h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            pattern.push(pool_window(in_plane, w, oy, ox).1 as u8);
                        }
                    }
                }
                let _ = id;
            }
            _ => {}
        }
    }
    (pattern, any_zero)
}

/// Uniform sample of `count` distinct parameter coordinates, in a
/// deterministic order for a given generator state.
pub fn sample_coords<R: rand::Rng + ?Sized>(
    params: &ParamStore,
    count: usize,
    rng: &mut R,
) -> Vec<(String, usize)> {
    let mut spans: Vec<(&String, usize)> = Vec::new();
    let mut total = 0usize;
    for (name, t) in params.iter() {
        spans.push((name, t.len()));
        total += t.len();
    }
    let take = count.min(total);
    let picks = rand::seq::index::sample(rng, total, take);
    let mut coords: Vec<(String, usize)> = picks
        .into_iter()
        .map(|mut flat| {
            for (name, len) in &spans {
                if flat < *len {
                    return ((*name).clone(), flat);
                }
                flat -= len;
            }
            unreachable!("flat index within total")
        })
        .collect();
    coords.sort();
    coords
}
