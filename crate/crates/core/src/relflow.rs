//! Relevance propagation from the predicted class back to any layer.
//!
//! Rules per layer kind:
//!
//! * fully connected / shared conv: `R_i = sum_j a_i w_ij / (z_j + eps sign z_j) R_j`
//!   with `z_j = sum_i a_i w_ij` (bias excluded, so the rule conserves).
//! * sample: relevance returns to the sampled rows.
//! * group: feature channels go to the neighbor's feature row; each offset
//!   channel `a_i - a_c` is split between neighbor and center coordinate.
//! * max pool: the pooled value's relevance goes to its argmax slot.
//!
//! ReLU needs no rule of its own: activations are recorded after it, so an
//! inactive unit has `a_i = 0` and receives nothing.

use serde::{Deserialize, Serialize};

use crate::netcore::{layers, ForwardTrace, LayerOp, Model, Tensor, Topology};
use crate::pointops::GroupedSet;
use crate::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupRule {
    /// Offset channel treated as a two-input linear unit with weights (+1, -1).
    #[default]
    Conserving,
    /// Center share taken as printed (`a_c / (a_c - a_i)`), remainder to the
    /// neighbor.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub epsilon: f64,
    pub group_rule: GroupRule,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { epsilon: DEFAULT_EPSILON, group_rule: GroupRule::Conserving }
    }
}

impl FlowConfig {
    pub fn exact() -> Self {
        Self { epsilon: 0.0, ..Self::default() }
    }
}

/// Relevance for every layer from the logits down to the stop layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    /// Aligned with `ForwardTrace::layers`; `None` below the stop layer.
    pub layers: Vec<Option<Tensor>>,
    pub names: Vec<String>,
    pub initial: Vec<f64>,
    pub epsilon: f64,
}

impl RelevanceMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        self.layers[i].as_ref()
    }

    pub fn total(&self, idx: usize) -> Option<f64> {
        self.layers[idx].as_ref().map(Tensor::sum)
    }
}

/// Nonnegative, min-max normalized salience of the inspected layer.
///
/// For layers whose rows are input points `values` has one entry per input
/// point. Fully connected layers have no spatial support, so `values` holds
/// one entry per unit and `unit_level` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSalience {
    pub layer: String,
    pub values: Vec<f64>,
    pub unit_level: bool,
}

/// One-hot vector at the arg max (lowest index on ties).
pub fn init_relevance(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("no logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut r = vec![0.0; logits.len()];
    r[layers::argmax(logits)] = 1.0;
    Ok(r)
}

#[inline]
fn stabilize(z: f64, eps: f64) -> f64 {
    z + eps * if z < 0.0 { -1.0 } else { 1.0 }
}

/// Linear rule applied row by row. `a` is `rows x in`, `w` is `in x out` and
/// `r_next` is `rows x out` (leading axes flattened).
pub fn prop_fc_conv(r_next: &Tensor, a: &Tensor, w: &Tensor, eps: f64) -> Result<Tensor> {
    prop_linear(r_next, a, w, eps, "")
}

fn prop_linear(r_next: &Tensor, a: &Tensor, w: &Tensor, eps: f64, layer: &str) -> Result<Tensor> {
    let (din, dout) = match *w.shape() {
        [i, o] => (i, o),
        _ => return Err(Error::DimensionMismatch(format!("weight must be 2-D, got {:?}", w.shape()))),
    };
    if a.cols() != din || r_next.cols() != dout || a.rows() != r_next.rows() {
        return Err(Error::DimensionMismatch(format!(
            "relevance {:?}, activations {:?}, weight {:?}",
            r_next.shape(),
            a.shape(),
            w.shape()
        )));
    }
    let wd = w.data();
    let mut out = Tensor::zeros(a.shape().to_vec());
    let mut z = vec![0.0; dout];
    let mut scale = vec![0.0; dout];
    for r in 0..a.rows() {
        let x = a.row(r);
        let rn = r_next.row(r);
        if rn.iter().all(|&v| v == 0.0) {
            continue;
        }
        z.fill(0.0);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (zj, wij) in z.iter_mut().zip(&wd[i * dout..(i + 1) * dout]) {
                    *zj += xi * wij;
                }
            }
        }
        for j in 0..dout {
            scale[j] = if rn[j] == 0.0 {
                0.0
            } else {
                let d = stabilize(z[j], eps);
                if d == 0.0 {
                    return Err(Error::DegenerateDenominator { layer: layer.to_owned() });
                }
                rn[j] / d
            };
        }
        let o = out.row_mut(r);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                o[i] = xi * layers::dot(&wd[i * dout..(i + 1) * dout], &scale);
            }
        }
    }
    Ok(out)
}

/// Scatters sampled-row relevance back into a source of `n_src` rows.
pub fn prop_sample(r_next: &Tensor, indices: &[usize], n_src: usize) -> Result<Tensor> {
    if r_next.rows() != indices.len() || indices.iter().any(|&i| i >= n_src) {
        return Err(Error::DimensionMismatch("sample indices do not match relevance rows".into()));
    }
    let d = r_next.cols();
    let mut out = Tensor::zeros(vec![n_src, d]);
    for (r, &i) in indices.iter().enumerate() {
        for (o, v) in out.row_mut(i).iter_mut().zip(r_next.row(r)) {
            *o += v;
        }
    }
    Ok(out)
}

/// Splits the relevance `r` of an offset value `a_i - a_c` into
/// `(neighbor share, center share)`.
pub fn split_group_relevance(r: f64, a_i: f64, a_c: f64, eps: f64, rule: GroupRule) -> Result<(f64, f64)> {
    if r == 0.0 {
        return Ok((0.0, 0.0));
    }
    let d = stabilize(a_i - a_c, eps);
    if d == 0.0 {
        return Err(Error::DegenerateDenominator { layer: String::new() });
    }
    Ok(match rule {
        GroupRule::Conserving => (a_i / d * r, -a_c / d * r),
        GroupRule::Literal => {
            let center = -a_c / d * r;
            (r - center, center)
        }
    })
}

/// Group rule over a whole neighborhood tensor.
///
/// `r_next` is `C x K x (3 + fw)`, `coords` the grouped coordinate rows.
/// Returns relevance for the coordinate rows and, when `fw > 0`, for the
/// feature rows.
pub fn prop_group(
    r_next: &Tensor,
    coords: &Tensor,
    grouped: &GroupedSet,
    cfg: &FlowConfig,
) -> Result<(Tensor, Option<Tensor>)> {
    let width = r_next.cols();
    if width < 3 || r_next.rows() != grouped.neighbors.len() {
        return Err(Error::DimensionMismatch("group relevance does not match its topology".into()));
    }
    let fw = width - 3;
    let mut rc = Tensor::zeros(vec![coords.rows(), 3]);
    let mut rf = (fw > 0).then(|| Tensor::zeros(vec![coords.rows(), fw]));
    for (slot, &nb) in grouped.neighbors.iter().enumerate() {
        let c = grouped.centers[slot / grouped.k];
        let rn = r_next.row(slot);
        for d in 0..3 {
            let (ri, rcen) = split_group_relevance(rn[d], coords.row(nb)[d], coords.row(c)[d], cfg.epsilon, cfg.group_rule)?;
            rc.row_mut(nb)[d] += ri;
            rc.row_mut(c)[d] += rcen;
        }
        if let Some(rf) = rf.as_mut() {
            for (o, v) in rf.row_mut(nb).iter_mut().zip(&rn[3..]) {
                *o += v;
            }
        }
    }
    Ok((rc, rf))
}

/// Routes pooled relevance (`C x D`) to the winning slots of a `C x K x D`
/// tensor.
pub fn prop_maxpool(r_next: &Tensor, argmax: &[usize], k: usize) -> Result<Tensor> {
    let (c, d) = (r_next.rows(), r_next.cols());
    if argmax.len() != c * d || argmax.iter().any(|&a| a >= k) {
        return Err(Error::DimensionMismatch("argmax does not match pooled relevance".into()));
    }
    let mut out = Tensor::zeros(vec![c, k, d]);
    let o = out.data_mut();
    for (i, (&r, &a)) in r_next.data().iter().zip(argmax).enumerate() {
        let (ci, ch) = (i / d, i % d);
        o[(ci * k + a) * d + ch] = r;
    }
    Ok(out)
}

fn add_into(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += v;
            }
        }
        None => *slot = Some(t),
    }
}

/// Runs the flow from the logits down to `stop_layer` and reduces that
/// layer's relevance to salience.
pub fn relevance_flow(
    model: &Model,
    trace: &ForwardTrace,
    stop_layer: &str,
    cfg: &FlowConfig,
) -> Result<(RelevanceMap, PointSalience)> {
    let spec = model.spec();
    if trace.layers.len() != spec.layers.len() {
        return Err(Error::DimensionMismatch("trace does not belong to this model".into()));
    }
    let stop = trace.layer_index(stop_layer).ok_or_else(|| Error::UnknownLayer(stop_layer.to_owned()))?;
    if !(cfg.epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be nonnegative, got {}", cfg.epsilon)));
    }
    let n = trace.layers.len();
    let initial = init_relevance(trace.logits())?;
    let mut rel: Vec<Option<Tensor>> = vec![None; n];
    rel[n - 1] = Some(Tensor::new(trace.layers[n - 1].output.shape().to_vec(), initial.clone())?);

    for idx in (stop + 1..n).rev() {
        let Some(r) = rel[idx].clone() else { continue };
        let rec = &trace.layers[idx];
        let tag = |e: Error| match e {
            Error::DegenerateDenominator { .. } => Error::DegenerateDenominator { layer: rec.name.clone() },
            other => other,
        };
        match spec.layers[idx].op {
            LayerOp::Input { .. } => {}
            LayerOp::SharedConv { src, .. } | LayerOp::FullyConnected { src, .. } => {
                let (w, _) = model.params(idx).expect("trainable layer");
                let back = prop_linear(&r, &trace.layers[src].output, w, cfg.epsilon, &rec.name)?;
                add_into(&mut rel[src], back);
            }
            LayerOp::Sample { src, .. } => {
                let Topology::Sample { indices } = &rec.topology else { unreachable!() };
                let back = prop_sample(&r, indices, trace.layers[src].output.rows())?;
                add_into(&mut rel[src], back);
            }
            LayerOp::Group { coords, feats, .. } => {
                let Topology::Group(grouped) = &rec.topology else { unreachable!() };
                let shape = vec![r.rows(), r.cols()];
                let flat = r.reshape(shape)?;
                let (rc, rf) = prop_group(&flat, &trace.layers[coords].output, grouped, cfg).map_err(tag)?;
                add_into(&mut rel[coords], rc);
                if let (Some(f), Some(rf)) = (feats, rf) {
                    add_into(&mut rel[f], rf);
                }
            }
            LayerOp::GroupAll { coords, feats } => {
                let cw = trace.layers[coords].output.cols();
                let rows = r.rows();
                let mut rc = Tensor::zeros(vec![rows, cw]);
                for i in 0..rows {
                    rc.row_mut(i).copy_from_slice(&r.row(i)[..cw]);
                }
                add_into(&mut rel[coords], rc);
                if let Some(f) = feats {
                    let fw = r.cols() - cw;
                    let mut rf = Tensor::zeros(vec![rows, fw]);
                    for i in 0..rows {
                        rf.row_mut(i).copy_from_slice(&r.row(i)[cw..]);
                    }
                    add_into(&mut rel[f], rf);
                }
            }
            LayerOp::MaxPool { src } => {
                let Topology::MaxPool { argmax, k } = &rec.topology else { unreachable!() };
                add_into(&mut rel[src], prop_maxpool(&r, argmax, *k)?);
            }
        }
    }

    let r_stop = rel[stop].clone().unwrap_or_else(|| Tensor::zeros(trace.layers[stop].output.shape().to_vec()));
    let salience = reduce_salience(&r_stop, trace.layers[stop].point_map.as_deref(), trace.n_points, &trace.layers[stop].name);
    let map = RelevanceMap {
        layers: rel,
        names: trace.layers.iter().map(|l| l.name.clone()).collect(),
        initial,
        epsilon: cfg.epsilon,
    };
    Ok((map, salience))
}

/// Channel sum, accumulation onto input points, clamp at 0, min-max scale.
pub fn reduce_salience(r: &Tensor, point_map: Option<&[usize]>, n_points: usize, layer: &str) -> PointSalience {
    let (mut values, unit_level) = match point_map {
        Some(map) => {
            let mut v = vec![0.0; n_points];
            for (row, &p) in map.iter().enumerate() {
                v[p] += r.row(row).iter().sum::<f64>();
            }
            (v, false)
        }
        None => {
            // Unit level: sum over any leading axes.
            let d = r.cols();
            let mut v = vec![0.0; d];
            for row in 0..r.rows() {
                for (a, x) in v.iter_mut().zip(r.row(row)) {
                    *a += x;
                }
            }
            (v, true)
        }
    };
    for v in &mut values {
        *v = v.max(0.0);
    }
    min_max_normalize(&mut values);
    PointSalience { layer: layer.to_owned(), values, unit_level }
}

/// Maps values onto `[0, 1]`; a constant vector becomes all zeros.
pub fn min_max_normalize(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let d = hi - lo;
    for v in values.iter_mut() {
        *v = if d > 0.0 { (*v - lo) / d } else { 0.0 };
    }
}

/// Salience of every point-mapped layer covered by `map`, in layer order.
pub fn spatial_saliences(trace: &ForwardTrace, map: &RelevanceMap) -> Vec<PointSalience> {
    trace
        .layers
        .iter()
        .zip(&map.layers)
        .filter_map(|(rec, r)| {
            let r = r.as_ref()?;
            let pm = rec.point_map.as_deref()?;
            Some(reduce_salience(r, Some(pm), trace.n_points, &rec.name))
        })
        .collect()
}

/// Input-layer salience of a cloud under a full flow.
pub fn input_salience(model: &Model, cloud: &crate::pointops::PointCloud, cfg: &FlowConfig) -> Result<(usize, PointSalience)> {
    let (logits, trace) = model.forward_cloud(cloud)?;
    let input = trace.layers[0].name.clone();
    let (_, s) = relevance_flow(model, &trace, &input, cfg)?;
    Ok((layers::argmax(&logits), s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn one_hot_init() {
        assert_eq!(init_relevance(&[0.1, 2.3, -1.0]).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(init_relevance(&[5.0]).unwrap(), vec![1.0]);
        assert_eq!(init_relevance(&[1.0, 1.0]).unwrap(), vec![1.0, 0.0]);
        assert!(init_relevance(&[f64::NAN]).is_err());
    }

    #[test]
    fn linear_rule_hand_examples() {
        let w = t(&[2, 1], &[1.0, 1.0]);
        let r = prop_fc_conv(&t(&[1, 1], &[1.0]), &t(&[1, 2], &[1.0, 1.0]), &w, 0.0).unwrap();
        assert_eq!(r.data(), &[0.5, 0.5]);
        let r = prop_fc_conv(&t(&[1, 1], &[1.0]), &t(&[1, 2], &[2.0, 1.0]), &w, 0.0).unwrap();
        assert!((r.data()[0] - 2.0 / 3.0).abs() < 1e-15 && (r.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_denominator_needs_epsilon() {
        let w = t(&[2, 1], &[1.0, -1.0]);
        let a = t(&[1, 2], &[1.0, 1.0]);
        let r = t(&[1, 1], &[1.0]);
        assert!(matches!(prop_fc_conv(&r, &a, &w, 0.0), Err(Error::DegenerateDenominator { .. })));
        let ok = prop_fc_conv(&r, &a, &w, 1e-6).unwrap();
        assert!(ok.data().iter().all(|v| v.is_finite()));
        // No incoming relevance, no error.
        assert!(prop_fc_conv(&t(&[1, 1], &[0.0]), &a, &w, 0.0).is_ok());
    }

    #[test]
    fn sample_rule() {
        let r = prop_sample(&t(&[1, 1], &[0.7]), &[2], 4).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 0.7, 0.0]);
        let all = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(prop_sample(&all, &[0, 1, 2], 3).unwrap(), all);
    }

    #[test]
    fn group_split_examples() {
        assert_eq!(split_group_relevance(1.0, 2.0, 1.0, 0.0, GroupRule::Conserving).unwrap(), (2.0, -1.0));
        for rule in [GroupRule::Conserving, GroupRule::Literal] {
            assert_eq!(split_group_relevance(0.4, 0.3, 0.0, 0.0, rule).unwrap(), (0.4, 0.0));
        }
        assert!(split_group_relevance(1.0, 0.5, 0.5, 0.0, GroupRule::Conserving).is_err());
    }

    #[test]
    fn maxpool_rule() {
        assert_eq!(prop_maxpool(&t(&[1, 1], &[1.0]), &[0], 3).unwrap().data(), &[1.0, 0.0, 0.0]);
        let r = t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(prop_maxpool(&r, &[0, 0, 0, 0], 1).unwrap().data(), r.data());
    }

    #[test]
    fn salience_is_normalized_and_supported() {
        let r = t(&[3, 2], &[1.0, 1.0, -5.0, 0.0, 0.5, 0.0]);
        let s = reduce_salience(&r, Some(&[0, 1, 0]), 4, "x");
        assert_eq!(s.values, vec![1.0, 0.0, 0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn linear_rule_conserves(a in prop::collection::vec(0.01f64..2.0, 6), w in prop::collection::vec(0.01f64..1.0, 24),
                                 r in prop::collection::vec(0.0f64..1.0, 4)) {
            let out = prop_fc_conv(&t(&[1, 4], &r), &t(&[1, 6], &a), &t(&[6, 4], &w), 0.0).unwrap();
            prop_assert!((out.sum() - r.iter().sum::<f64>()).abs() < 1e-9);
        }

        #[test]
        fn conserving_split_sums(r in -2.0f64..2.0, ai in -1.0f64..1.0, ac in -1.0f64..1.0) {
            prop_assume!((ai - ac).abs() > 1e-3);
            let (x, y) = split_group_relevance(r, ai, ac, 0.0, GroupRule::Conserving).unwrap();
            prop_assert!((x + y - r).abs() <= 1e-12 * (1.0 + x.abs() + y.abs()));
        }

        #[test]
        fn one_hot_is_scale_invariant(l in prop::collection::vec(-5.0f64..5.0, 1..8), s in 0.01f64..100.0) {
            let scaled: Vec<f64> = l.iter().map(|v| v * s).collect();
            prop_assert_eq!(init_relevance(&l).unwrap(), init_relevance(&scaled).unwrap());
        }
    }
}
