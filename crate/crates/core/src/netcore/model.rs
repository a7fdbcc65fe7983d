use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Activation};
use super::Tensor;
use crate::pointops::{self, GroupedSet, Point3, PointCloud};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Sample,
    Group,
    SharedConv,
    FullyConnected,
    MaxPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GroupMode {
    Knn { k: usize },
    Ball { radius: f64, k: usize },
}

impl GroupMode {
    pub fn k(&self) -> usize {
        match *self {
            GroupMode::Knn { k } | GroupMode::Ball { k, .. } => k,
        }
    }
}

/// One node of the layer graph. Source fields are indices of earlier layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerOp {
    Input { dim: usize },
    /// Farthest point sampling of a coordinate node.
    Sample { src: usize, count: usize },
    /// Neighborhoods around the sampled centers: per slot the offset
    /// `neighbor - center` followed by the neighbor's features.
    Group { coords: usize, centers: usize, feats: Option<usize>, mode: GroupMode },
    /// A single group holding every point with absolute coordinates.
    GroupAll { coords: usize, feats: Option<usize> },
    SharedConv { src: usize, in_dim: usize, out_dim: usize, activation: Activation },
    FullyConnected { src: usize, in_dim: usize, out_dim: usize, activation: Activation },
    /// Channel-wise max over the neighbor axis.
    MaxPool { src: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub op: LayerOp,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self.op {
            LayerOp::Input { .. } => LayerKind::Input,
            LayerOp::Sample { .. } => LayerKind::Sample,
            LayerOp::Group { .. } | LayerOp::GroupAll { .. } => LayerKind::Group,
            LayerOp::SharedConv { .. } => LayerKind::SharedConv,
            LayerOp::FullyConnected { .. } => LayerKind::FullyConnected,
            LayerOp::MaxPool { .. } => LayerKind::MaxPool,
        }
    }

    pub fn inputs(&self) -> Vec<usize> {
        match self.op {
            LayerOp::Input { .. } => vec![],
            LayerOp::Sample { src, .. }
            | LayerOp::SharedConv { src, .. }
            | LayerOp::FullyConnected { src, .. }
            | LayerOp::MaxPool { src } => vec![src],
            LayerOp::Group { coords, centers, feats, .. } => {
                let mut v = vec![coords, centers];
                v.extend(feats);
                v
            }
            LayerOp::GroupAll { coords, feats } => {
                let mut v = vec![coords];
                v.extend(feats);
                v
            }
        }
    }

    /// `(in_dim, out_dim)` for trainable layers.
    pub fn dims(&self) -> Option<(usize, usize)> {
        match self.op {
            LayerOp::SharedConv { in_dim, out_dim, .. } | LayerOp::FullyConnected { in_dim, out_dim, .. } => {
                Some((in_dim, out_dim))
            }
            _ => None,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.dims().is_some()
    }
}

/// Static shape facts derived while validating a spec.
#[derive(Debug, Clone, Copy)]
struct NodeInfo {
    rank: usize,
    width: usize,
    /// Layer whose rows define this node's point set, if the rows are points.
    point_set: Option<usize>,
    /// Grouping layer feeding a rank-3 node.
    grouped_by: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: String,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.node_infos().map(|_| ())
    }

    fn node_infos(&self) -> Result<Vec<NodeInfo>> {
        let bad = |msg: String| Error::InvalidArgument(format!("model `{}`: {msg}", self.arch));
        if self.classes == 0 {
            return Err(bad("class count must be positive".into()));
        }
        let mut names = std::collections::HashSet::new();
        let mut infos: Vec<NodeInfo> = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            if !names.insert(layer.name.as_str()) {
                return Err(bad(format!("duplicate layer name `{}`", layer.name)));
            }
            for src in layer.inputs() {
                if src >= idx {
                    return Err(bad(format!("layer `{}` reads from later layer {src}", layer.name)));
                }
            }
            let is_coords = |i: usize| {
                matches!(self.layers[i].op, LayerOp::Input { dim: 3 } | LayerOp::Sample { .. })
            };
            let info = match layer.op {
                LayerOp::Input { dim } => {
                    if idx != 0 || dim == 0 {
                        return Err(bad("the input layer must come first with a positive width".into()));
                    }
                    NodeInfo { rank: 2, width: dim, point_set: Some(idx), grouped_by: None }
                }
                LayerOp::Sample { src, count } => {
                    if !is_coords(src) || count == 0 {
                        return Err(bad(format!("`{}` must sample a coordinate layer", layer.name)));
                    }
                    NodeInfo { rank: 2, width: 3, point_set: Some(idx), grouped_by: None }
                }
                LayerOp::Group { coords, centers, feats, mode } => {
                    if !is_coords(coords) {
                        return Err(bad(format!("`{}` must group a coordinate layer", layer.name)));
                    }
                    match self.layers[centers].op {
                        LayerOp::Sample { src, .. } if src == coords => {}
                        _ => return Err(bad(format!("`{}` centers must be sampled from its coordinates", layer.name))),
                    }
                    if mode.k() == 0 {
                        return Err(bad("group size must be positive".into()));
                    }
                    let fw = self.feats_width(&infos, coords, feats).map_err(bad)?;
                    NodeInfo { rank: 3, width: 3 + fw, point_set: Some(centers), grouped_by: Some(idx) }
                }
                LayerOp::GroupAll { coords, feats } => {
                    if !is_coords(coords) {
                        return Err(bad(format!("`{}` must group a coordinate layer", layer.name)));
                    }
                    let fw = self.feats_width(&infos, coords, feats).map_err(bad)?;
                    NodeInfo { rank: 3, width: infos[coords].width + fw, point_set: None, grouped_by: Some(idx) }
                }
                LayerOp::SharedConv { src, in_dim, out_dim, .. } => {
                    let s = infos[src];
                    if s.width != in_dim || out_dim == 0 {
                        return Err(bad(format!("`{}` expects width {in_dim}, source has {}", layer.name, s.width)));
                    }
                    NodeInfo { width: out_dim, ..s }
                }
                LayerOp::FullyConnected { src, in_dim, out_dim, .. } => {
                    let s = infos[src];
                    if s.rank != 2 || s.width != in_dim || out_dim == 0 {
                        return Err(bad(format!("`{}` expects a rank-2 source of width {in_dim}", layer.name)));
                    }
                    NodeInfo { rank: 2, width: out_dim, point_set: None, grouped_by: None }
                }
                LayerOp::MaxPool { src } => {
                    let s = infos[src];
                    let g = match (s.rank, s.grouped_by) {
                        (3, Some(g)) => g,
                        _ => return Err(bad(format!("`{}` must pool a grouped tensor", layer.name))),
                    };
                    let point_set = match self.layers[g].op {
                        LayerOp::Group { centers, .. } => Some(centers),
                        _ => None,
                    };
                    NodeInfo { rank: 2, width: s.width, point_set, grouped_by: None }
                }
            };
            infos.push(info);
        }
        match infos.last() {
            Some(last) if last.width == self.classes && last.point_set.is_none() && last.rank == 2 => Ok(infos),
            _ => Err(bad("the last layer must be a global vector of class scores".into())),
        }
    }

    fn feats_width(&self, infos: &[NodeInfo], coords: usize, feats: Option<usize>) -> Result<usize, String> {
        match feats {
            None => Ok(0),
            Some(f) if infos[f].rank == 2 && infos[f].point_set == Some(coords) => Ok(infos[f].width),
            Some(_) => Err("grouped features must be aligned with the grouped coordinates".into()),
        }
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn input_dim(&self) -> usize {
        match self.layers.first().map(|l| &l.op) {
            Some(LayerOp::Input { dim }) => *dim,
            _ => 0,
        }
    }

    /// Smallest point count the sampling and grouping stages accept.
    pub fn min_points(&self) -> usize {
        let mut need = 1;
        for l in &self.layers {
            match l.op {
                LayerOp::Sample { src: 0, count } => need = need.max(count),
                LayerOp::Group { coords: 0, mode: GroupMode::Knn { k }, .. } => need = need.max(k),
                _ => {}
            }
        }
        need
    }

    /// Names of layers whose outputs can be mapped back onto input points.
    pub fn spatial_layers(&self) -> Vec<String> {
        let infos = self.node_infos().unwrap_or_default();
        self.layers
            .iter()
            .zip(&infos)
            .filter(|(_, i)| i.point_set.is_some() || i.grouped_by.is_some())
            .map(|(l, _)| l.name.clone())
            .collect()
    }

    /// Single group-all stage followed by a small fully connected head.
    pub fn pointnet_lite(classes: usize) -> Self {
        Self::pointnet_lite_with(classes, &[16, 32, 256], &[64])
    }

    pub fn pointnet_lite_with(classes: usize, convs: &[usize], fcs: &[usize]) -> Self {
        let mut b = Builder::default();
        let input = b.push("input", LayerOp::Input { dim: 3 });
        let group = b.push("SA1-group", LayerOp::GroupAll { coords: input, feats: None });
        let last = b.conv_stack(1, group, 3, convs);
        let pool = b.push("SA1-pool", LayerOp::MaxPool { src: last.0 });
        b.head(pool, last.1, fcs, classes);
        b.finish("pointnet_lite", classes)
    }

    /// Two sample-and-group stages, a global stage and a fully connected head.
    pub fn pointnet2_lite(classes: usize, grouping: Grouping) -> Self {
        let (m1, m2) = match grouping {
            Grouping::Knn => (GroupMode::Knn { k: 16 }, GroupMode::Knn { k: 8 }),
            Grouping::Ball => (GroupMode::Ball { radius: 0.2, k: 16 }, GroupMode::Ball { radius: 0.4, k: 8 }),
        };
        let mut b = Builder::default();
        let input = b.push("input", LayerOp::Input { dim: 3 });
        let s1 = b.push("SA1-sample", LayerOp::Sample { src: input, count: 128 });
        let g1 = b.push("SA1-group", LayerOp::Group { coords: input, centers: s1, feats: None, mode: m1 });
        let c1 = b.conv_stack(1, g1, 3, &[16, 16, 32]);
        let p1 = b.push("SA1-pool", LayerOp::MaxPool { src: c1.0 });
        let s2 = b.push("SA2-sample", LayerOp::Sample { src: s1, count: 32 });
        let g2 = b.push("SA2-group", LayerOp::Group { coords: s1, centers: s2, feats: Some(p1), mode: m2 });
        let c2 = b.conv_stack(2, g2, 3 + c1.1, &[32, 32, 64]);
        let p2 = b.push("SA2-pool", LayerOp::MaxPool { src: c2.0 });
        let g3 = b.push("SA3-group", LayerOp::GroupAll { coords: s2, feats: Some(p2) });
        let c3 = b.conv_stack(3, g3, 3 + c2.1, &[64, 64, 128]);
        let p3 = b.push("SA3-pool", LayerOp::MaxPool { src: c3.0 });
        b.head(p3, c3.1, &[64], classes);
        b.finish("pointnet2_lite", classes)
    }

    /// Plain multilayer perceptron over a single `1 x in_dim` input row.
    pub fn mlp(in_dim: usize, hidden: &[usize], classes: usize) -> Self {
        let mut b = Builder::default();
        let input = b.push("input", LayerOp::Input { dim: in_dim });
        b.head(input, in_dim, hidden, classes);
        b.finish("mlp", classes)
    }

    pub fn by_arch(arch: &str, classes: usize) -> Result<Self> {
        match arch {
            "pointnet_lite" => Ok(Self::pointnet_lite(classes)),
            "pointnet2_lite" => Ok(Self::pointnet2_lite(classes, Grouping::Knn)),
            "pointnet2_lite_ball" => Ok(Self::pointnet2_lite(classes, Grouping::Ball)),
            other => Err(Error::InvalidArgument(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    Knn,
    Ball,
}

#[derive(Default)]
struct Builder {
    layers: Vec<LayerSpec>,
}

impl Builder {
    fn push(&mut self, name: &str, op: LayerOp) -> usize {
        self.layers.push(LayerSpec { name: name.to_owned(), op });
        self.layers.len() - 1
    }

    fn conv_stack(&mut self, stage: usize, mut src: usize, mut width: usize, widths: &[usize]) -> (usize, usize) {
        for (j, &w) in widths.iter().enumerate() {
            src = self.push(
                &format!("SA{stage}-conv{}", j + 1),
                LayerOp::SharedConv { src, in_dim: width, out_dim: w, activation: Activation::Relu },
            );
            width = w;
        }
        (src, width)
    }

    fn head(&mut self, mut src: usize, mut width: usize, hidden: &[usize], classes: usize) {
        for (k, &w) in hidden.iter().chain(std::iter::once(&classes)).enumerate() {
            let activation = if k < hidden.len() { Activation::Relu } else { Activation::Identity };
            src = self.push(
                &format!("fc{}", k + 1),
                LayerOp::FullyConnected { src, in_dim: width, out_dim: w, activation },
            );
            width = w;
        }
    }

    fn finish(self, arch: &str, classes: usize) -> ModelSpec {
        ModelSpec { arch: arch.to_owned(), classes, layers: self.layers }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub dataset_id: String,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Trainable parameters in layer order (`<layer>.weight`, `<layer>.bias`),
/// the architecture they belong to, and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub tensors: Vec<NamedTensor>,
    pub spec: ModelSpec,
    pub meta: TrainingMeta,
}

impl ModelWeights {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    weights: ModelWeights,
    /// Per layer: indices of (weight, bias) in `weights.tensors`.
    params: Vec<Option<(usize, usize)>>,
}

impl Model {
    pub fn new(weights: ModelWeights) -> Result<Self> {
        weights.spec.validate()?;
        let mut params = Vec::with_capacity(weights.spec.layers.len());
        for layer in &weights.spec.layers {
            let Some((din, dout)) = layer.dims() else {
                params.push(None);
                continue;
            };
            let find = |suffix: &str, shape: &[usize]| -> Result<usize> {
                let name = format!("{}.{suffix}", layer.name);
                let i = weights
                    .tensors
                    .iter()
                    .position(|t| t.name == name)
                    .ok_or_else(|| Error::DimensionMismatch(format!("missing tensor `{name}`")))?;
                if weights.tensors[i].tensor.shape() != shape {
                    return Err(Error::DimensionMismatch(format!(
                        "`{name}` has shape {:?}, expected {shape:?}",
                        weights.tensors[i].tensor.shape()
                    )));
                }
                Ok(i)
            };
            params.push(Some((find("weight", &[din, dout])?, find("bias", &[dout])?)));
        }
        Ok(Self { weights, params })
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization of every
    /// weight and bias.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for layer in &spec.layers {
            if let Some((din, dout)) = layer.dims() {
                let bound = 1.0 / (din as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                let w = (0..din * dout).map(|_| dist.sample(&mut rng)).collect();
                let b = (0..dout).map(|_| dist.sample(&mut rng)).collect();
                tensors.push(NamedTensor { name: format!("{}.weight", layer.name), tensor: Tensor::new(vec![din, dout], w)? });
                tensors.push(NamedTensor { name: format!("{}.bias", layer.name), tensor: Tensor::new(vec![dout], b)? });
            }
        }
        let meta = TrainingMeta { seed, ..Default::default() };
        Self::new(ModelWeights { tensors, spec, meta })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.weights.spec
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn into_weights(self) -> ModelWeights {
        self.weights
    }

    pub fn meta_mut(&mut self) -> &mut TrainingMeta {
        &mut self.weights.meta
    }

    pub fn class_names(&self) -> Vec<String> {
        let names = &self.weights.meta.class_names;
        if names.len() == self.spec().classes {
            names.clone()
        } else {
            (0..self.spec().classes).map(|c| format!("class{c}")).collect()
        }
    }

    /// `(weight, bias)` of a trainable layer.
    pub fn params(&self, layer: usize) -> Option<(&Tensor, &Tensor)> {
        self.params[layer].map(|(w, b)| (&self.weights.tensors[w].tensor, &self.weights.tensors[b].tensor))
    }

    pub(crate) fn param_slots(&self) -> &[Option<(usize, usize)>] {
        &self.params
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.weights.tensors
    }

    pub fn forward_cloud(&self, cloud: &PointCloud) -> Result<(Vec<f64>, ForwardTrace)> {
        self.forward(&cloud.to_tensor())
    }

    pub fn predict(&self, cloud: &PointCloud) -> Result<usize> {
        let (logits, _) = self.forward_cloud(cloud)?;
        Ok(layers::argmax(&logits))
    }

    /// Runs the network and records every layer's output and topology.
    pub fn forward(&self, input: &Tensor) -> Result<(Vec<f64>, ForwardTrace)> {
        self.forward_with(input, None)
    }

    /// Forward pass with optional inverted dropout on every non-input
    /// layer that feeds a fully connected layer.
    pub(crate) fn forward_with(&self, input: &Tensor, mut dropout: Option<&mut Dropout>) -> Result<(Vec<f64>, ForwardTrace)> {
        let spec = self.spec();
        if input.rank() != 2 || input.cols() != spec.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input {:?} does not match model input width {}",
                input.shape(),
                spec.input_dim()
            )));
        }
        if input.rows() < spec.min_points() {
            return Err(Error::InvalidArgument(format!(
                "model needs at least {} points, got {}",
                spec.min_points(),
                input.rows()
            )));
        }
        let mut records: Vec<LayerRecord> = Vec::with_capacity(spec.layers.len());
        let mut masks = vec![None; spec.layers.len()];
        let feeds_fc: Vec<bool> = (0..spec.layers.len())
            .map(|i| spec.layers.iter().any(|l| matches!(l.op, LayerOp::FullyConnected { src, .. } if src == i)))
            .collect();
        for (idx, layer) in spec.layers.iter().enumerate() {
            let (mut output, point_map, topology) = match layer.op {
                LayerOp::Input { .. } => (input.clone(), Some((0..input.rows()).collect()), Topology::None),
                LayerOp::Sample { src, count } => {
                    let s = &records[src];
                    let pts = points_of(&s.output);
                    let indices = pointops::sample_fps(&pts, count)?;
                    let rows: Vec<&[f64]> = indices.iter().map(|&i| s.output.row(i)).collect();
                    let map = s.point_map.as_ref().map(|m| indices.iter().map(|&i| m[i]).collect());
                    (Tensor::from_rows(&rows)?, map, Topology::Sample { indices })
                }
                LayerOp::Group { coords, centers, feats, mode } => {
                    let pts = points_of(&records[coords].output);
                    let Topology::Sample { indices } = &records[centers].topology else {
                        unreachable!("validated: centers come from a sample layer")
                    };
                    let grouped = match mode {
                        GroupMode::Knn { k } => pointops::group_knn(&pts, indices, k)?,
                        GroupMode::Ball { radius, k } => pointops::group_ball(&pts, indices, radius, k)?,
                    };
                    let f = feats.map(|f| &records[f].output);
                    let fw = f.map_or(0, |t| t.cols());
                    let mut data = Vec::with_capacity(grouped.neighbors.len() * (3 + fw));
                    for (slot, &n) in grouped.neighbors.iter().enumerate() {
                        data.extend_from_slice(&grouped.offsets[slot]);
                        if let Some(f) = f {
                            data.extend_from_slice(f.row(n));
                        }
                    }
                    let out = Tensor::new(vec![grouped.len(), grouped.k, 3 + fw], data)?;
                    let cmap = records[coords].point_map.as_ref().expect("coordinate layers map to points");
                    let map = grouped.neighbors.iter().map(|&n| cmap[n]).collect();
                    (out, Some(map), Topology::Group(grouped))
                }
                LayerOp::GroupAll { coords, feats } => {
                    let c = &records[coords].output;
                    let f = feats.map(|f| &records[f].output);
                    let width = c.cols() + f.map_or(0, |t| t.cols());
                    let mut data = Vec::with_capacity(c.rows() * width);
                    for r in 0..c.rows() {
                        data.extend_from_slice(c.row(r));
                        if let Some(f) = f {
                            data.extend_from_slice(f.row(r));
                        }
                    }
                    let out = Tensor::new(vec![1, c.rows(), width], data)?;
                    (out, records[coords].point_map.clone(), Topology::GroupAll)
                }
                LayerOp::SharedConv { src, activation, .. } | LayerOp::FullyConnected { src, activation, .. } => {
                    let (w, b) = self.params(idx).expect("trainable layer has parameters");
                    let out = layers::shared_linear(&records[src].output, w, b.data(), activation)?;
                    let map = match layer.op {
                        LayerOp::SharedConv { .. } => records[src].point_map.clone(),
                        _ => None,
                    };
                    (out, map, Topology::None)
                }
                LayerOp::MaxPool { src } => {
                    let (out, argmax) = pointops::pool_max(&records[src].output)?;
                    let k = records[src].output.shape()[1];
                    let map = self.pool_point_map(&records, src);
                    (out, map, Topology::MaxPool { argmax, k })
                }
            };
            output.check_finite(&layer.name)?;
            if let Some(d) = dropout.as_deref_mut() {
                if feeds_fc[idx] && !matches!(layer.op, LayerOp::Input { .. }) && d.p > 0.0 {
                    let m = d.mask(output.len());
                    for (v, s) in output.data_mut().iter_mut().zip(&m) {
                        *v *= s;
                    }
                    masks[idx] = Some(m);
                }
            }
            records.push(LayerRecord {
                name: layer.name.clone(),
                kind: layer.kind(),
                inputs: layer.inputs(),
                output,
                point_map,
                topology,
            });
        }
        let logits = records.last().expect("non-empty model").output.data().to_vec();
        if logits.len() != spec.classes {
            return Err(Error::DimensionMismatch(format!("{} logits for {} classes", logits.len(), spec.classes)));
        }
        Ok((logits, ForwardTrace { layers: records, n_points: input.rows(), masks }))
    }

    /// Pooled rows of a neighborhood group map to the group centers.
    fn pool_point_map(&self, records: &[LayerRecord], mut src: usize) -> Option<Vec<usize>> {
        loop {
            match self.spec().layers[src].op {
                LayerOp::SharedConv { src: s, .. } => src = s,
                LayerOp::Group { centers, .. } => return records[centers].point_map.clone(),
                _ => return None,
            }
        }
    }
}

pub(crate) fn points_of(t: &Tensor) -> Vec<Point3> {
    (0..t.rows()).map(|r| {
        let row = t.row(r);
        [row[0], row[1], row[2]]
    }).collect()
}

/// Topology recorded for the layers whose relevance rule needs it.
#[derive(Debug, Clone, PartialEq)]
pub enum Topology {
    None,
    Sample { indices: Vec<usize> },
    Group(GroupedSet),
    GroupAll,
    /// Winning neighbor slot per `(center, channel)`.
    MaxPool { argmax: Vec<usize>, k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
    /// Post-activation output.
    pub output: Tensor,
    /// Input-point index for every row of `output`, when rows are points.
    pub point_map: Option<Vec<usize>>,
    pub topology: Topology,
}

/// Everything one inference touched, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerRecord>,
    pub n_points: usize,
    /// Dropout scale applied to each layer's output during training.
    pub masks: Vec<Option<Vec<f64>>>,
}

/// Inverted dropout: kept units are scaled by `1 / (1 - p)`.
pub(crate) struct Dropout {
    pub p: f64,
    pub rng: rand_chacha::ChaCha8Rng,
}

impl Dropout {
    fn mask(&mut self, n: usize) -> Vec<f64> {
        use rand::Rng;
        let keep = 1.0 / (1.0 - self.p);
        (0..n).map(|_| if self.rng.gen_bool(self.p) { 0.0 } else { keep }).collect()
    }
}

impl ForwardTrace {
    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Primary input activation of layer `idx` (the output of its first source).
    pub fn input(&self, idx: usize) -> Option<&Tensor> {
        self.layers[idx].inputs.first().map(|&s| &self.layers[s].output)
    }

    pub fn logits(&self) -> &[f64] {
        self.layers.last().expect("non-empty trace").output.data()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_specs_validate() {
        ModelSpec::pointnet_lite(4).validate().unwrap();
        ModelSpec::pointnet2_lite(4, Grouping::Knn).validate().unwrap();
        ModelSpec::pointnet2_lite(4, Grouping::Ball).validate().unwrap();
        ModelSpec::mlp(2, &[3], 2).validate().unwrap();
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ModelSpec::mlp(2, &[3], 2);
        s.layers[2].name = "fc1".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn inconsistent_dims_rejected() {
        let mut s = ModelSpec::mlp(2, &[3], 2);
        if let LayerOp::FullyConnected { in_dim, .. } = &mut s.layers[2].op {
            *in_dim = 4;
        }
        assert!(s.validate().is_err());
    }

    #[test]
    fn identity_fc_forward() {
        let spec = ModelSpec::mlp(2, &[], 2);
        let mut m = Model::init(spec, 0).unwrap();
        m.tensors_mut()[0].tensor = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        m.tensors_mut()[1].tensor = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.25, -3.0]).unwrap();
        let (logits, trace) = m.forward(&x).unwrap();
        assert_eq!(logits, vec![0.25, -3.0]);
        assert_eq!(trace.layers.len(), 2);
        assert_eq!(trace.input(1).unwrap(), &x);
        assert_eq!(trace.layers[1].output.shape(), &[1, 2]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_logits() {
        let spec = ModelSpec::pointnet_lite(3);
        let mut m = Model::init(spec, 1).unwrap();
        for t in m.tensors_mut() {
            if t.name.ends_with(".bias") {
                t.tensor.data_mut().fill(0.0);
            }
        }
        let cloud = PointCloud::new(vec![[0.0; 3]; 16]).unwrap();
        let (logits, _) = m.forward_cloud(&cloud).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trace_records_topology_and_replays_bitwise() {
        let spec = ModelSpec::pointnet2_lite(4, Grouping::Knn);
        let m = Model::init(spec, 3).unwrap();
        let cloud = crate::datagen::generate_one(&crate::datagen::Recipe::builtin("ball").unwrap(), 0, 11);
        let (_, t1) = m.forward_cloud(&cloud).unwrap();
        let (_, t2) = m.forward_cloud(&cloud).unwrap();
        assert_eq!(t1, t2);
        for rec in &t1.layers {
            match &rec.topology {
                Topology::Sample { indices } => {
                    let mut s = indices.clone();
                    s.sort_unstable();
                    s.dedup();
                    assert_eq!(s.len(), indices.len());
                }
                Topology::MaxPool { argmax, k } => {
                    assert_eq!(argmax.len(), rec.output.len());
                    assert!(argmax.iter().all(|a| a < k));
                }
                _ => {}
            }
        }
    }

    #[test]
    fn too_few_points_rejected() {
        let m = Model::init(ModelSpec::pointnet2_lite(4, Grouping::Knn), 0).unwrap();
        let cloud = PointCloud::new(vec![[0.1, 0.2, 0.3]; 20]).unwrap();
        assert!(m.forward_cloud(&cloud).is_err());
    }
}
