//! Reverse-mode gradients through a recorded [`ForwardTrace`].

use serde::Serialize;

use super::layers;
use super::model::{LayerOp, Model, Topology};
use super::{ForwardTrace, Tensor};
use crate::{Error, Result};

/// Gradients aligned with `ModelWeights::tensors`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self { tensors: model.weights().tensors.iter().map(|t| vec![0.0; t.tensor.len()]).collect() }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.tensors {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Which layer outputs need a gradient (have a trainable ancestor).
fn needs_grad(model: &Model) -> Vec<bool> {
    let layers = &model.spec().layers;
    let mut need = vec![false; layers.len()];
    for (i, l) in layers.iter().enumerate() {
        need[i] = match l.op {
            LayerOp::Input { .. } | LayerOp::Sample { .. } => false,
            LayerOp::SharedConv { .. } | LayerOp::FullyConnected { .. } => true,
            LayerOp::MaxPool { src } => need[src],
            LayerOp::Group { feats, .. } | LayerOp::GroupAll { feats, .. } => feats.is_some_and(|f| need[f]),
        };
    }
    need
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

/// Accumulates d(loss)/d(params) into `grads`, given d(loss)/d(logits).
pub fn backward(model: &Model, trace: &ForwardTrace, grad_logits: &[f64], grads: &mut Gradients) -> Result<()> {
    let layers = &model.spec().layers;
    let n = layers.len();
    if grad_logits.len() != trace.logits().len() || trace.layers.len() != n {
        return Err(Error::DimensionMismatch("trace does not belong to this model".into()));
    }
    let need = needs_grad(model);
    let mut g: Vec<Option<Tensor>> = vec![None; n];
    g[n - 1] = Some(Tensor::new(trace.layers[n - 1].output.shape().to_vec(), grad_logits.to_vec())?);

    for idx in (0..n).rev() {
        let Some(mut gy) = g[idx].take() else { continue };
        if let Some(m) = &trace.masks[idx] {
            for (v, s) in gy.data_mut().iter_mut().zip(m) {
                *v *= s;
            }
        }
        let rec = &trace.layers[idx];
        match layers[idx].op {
            LayerOp::SharedConv { src, activation, .. } | LayerOp::FullyConnected { src, activation, .. } => {
                let (wi, bi) = model.param_slots()[idx].expect("trainable");
                let (w, _) = model.params(idx).expect("trainable");
                let (gw, rest) = split_two(&mut grads.tensors, wi, bi);
                if let Some(gx) = layers::shared_linear_backward(
                    &trace.layers[src].output,
                    w,
                    &rec.output,
                    &gy,
                    activation,
                    gw,
                    rest,
                    need[src],
                ) {
                    accumulate(&mut g[src], gx);
                }
            }
            LayerOp::MaxPool { src } if need[src] => {
                let Topology::MaxPool { argmax, k } = &rec.topology else { unreachable!() };
                let d = rec.output.cols();
                let c = rec.output.rows();
                let mut gx = Tensor::zeros(vec![c, *k, d]);
                let out = gx.data_mut();
                for ci in 0..c {
                    for ch in 0..d {
                        out[(ci * k + argmax[ci * d + ch]) * d + ch] += gy.data()[ci * d + ch];
                    }
                }
                accumulate(&mut g[src], gx);
            }
            LayerOp::Group { feats: Some(f), .. } if need[f] => {
                let Topology::Group(grouped) = &rec.topology else { unreachable!() };
                let fsrc = &trace.layers[f].output;
                let fw = fsrc.cols();
                let mut gx = Tensor::zeros(fsrc.shape().to_vec());
                for (slot, &nb) in grouped.neighbors.iter().enumerate() {
                    let from = &gy.row(slot)[3..];
                    for (a, v) in gx.row_mut(nb).iter_mut().zip(from) {
                        *a += v;
                    }
                }
                debug_assert_eq!(gy.cols(), 3 + fw);
                accumulate(&mut g[f], gx);
            }
            LayerOp::GroupAll { coords, feats: Some(f) } if need[f] => {
                let cw = trace.layers[coords].output.cols();
                let fsrc = &trace.layers[f].output;
                let mut gx = Tensor::zeros(fsrc.shape().to_vec());
                for r in 0..fsrc.rows() {
                    gx.row_mut(r).copy_from_slice(&gy.row(r)[cw..]);
                }
                accumulate(&mut g[f], gx);
            }
            _ => {}
        }
    }
    Ok(())
}

fn split_two(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b, "weight precedes bias");
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

/// Worst relative error between analytic and central-difference gradients
/// of the cross-entropy loss, for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub tensor: String,
    pub checked: usize,
    /// Probes whose `±h` step flipped a ReLU or a max-pool winner.
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
}

/// ReLU on/off bits and max-pool winners: the piece of the piecewise
/// linear network a forward pass landed in.
fn activation_pattern(model: &Model, trace: &ForwardTrace) -> Vec<usize> {
    let mut out = Vec::new();
    for (spec, rec) in model.spec().layers.iter().zip(&trace.layers) {
        match (&spec.op, &rec.topology) {
            (LayerOp::SharedConv { activation: layers::Activation::Relu, .. }, _)
            | (LayerOp::FullyConnected { activation: layers::Activation::Relu, .. }, _) => {
                out.extend(rec.output.data().iter().map(|&v| usize::from(v > 0.0)));
            }
            (_, Topology::MaxPool { argmax, .. }) => out.extend_from_slice(argmax),
            _ => {}
        }
    }
    out
}

/// Compares [`backward`] against central differences with step `h`.
/// At most `per_tensor` evenly spaced entries of each tensor are probed.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(model: &Model, input: &Tensor, label: usize, h: f64, per_tensor: usize) -> Result<Vec<GradCheck>> {
    let eval = |m: &Model| -> Result<(f64, Vec<usize>)> {
        let (logits, trace) = m.forward(input)?;
        Ok((layers::softmax_cross_entropy(&logits, label).0, activation_pattern(m, &trace)))
    };
    let (logits, trace) = model.forward(input)?;
    let base = activation_pattern(model, &trace);
    let (_, gl) = layers::softmax_cross_entropy(&logits, label);
    let mut grads = Gradients::zeros_like(model);
    backward(model, &trace, &gl, &mut grads)?;

    let mut probe = model.clone();
    let mut out = Vec::new();
    for (ti, analytic) in grads.tensors.iter().enumerate() {
        let len = analytic.len();
        let step = len.div_ceil(per_tensor.max(1)).max(1);
        let mut check = GradCheck {
            tensor: model.weights().tensors[ti].name.clone(),
            checked: 0,
            skipped_kinks: 0,
            max_rel_err: 0.0,
        };
        for i in (0..len).step_by(step) {
            let orig = probe.tensors_mut()[ti].tensor.data()[i];
            probe.tensors_mut()[ti].tensor.data_mut()[i] = orig + h;
            let (up, pu) = eval(&probe)?;
            probe.tensors_mut()[ti].tensor.data_mut()[i] = orig - h;
            let (down, pd) = eval(&probe)?;
            probe.tensors_mut()[ti].tensor.data_mut()[i] = orig;
            if pu != base || pd != base {
                check.skipped_kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            check.max_rel_err = check.max_rel_err.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
            check.checked += 1;
        }
        out.push(check);
    }
    Ok(out)
}
