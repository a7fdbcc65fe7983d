//! Dense kernels shared by the point-wise convolutions and fully connected
//! layers. Weights are stored `in x out` so `w[i][j]` is the connection from
//! input unit `i` to output unit `j`.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

/// `y = act(x W + b)` applied to every row of `x`; leading axes are kept.
pub fn shared_linear(x: &Tensor, w: &Tensor, b: &[f64], act: Activation) -> Result<Tensor> {
    let (din, dout) = match *w.shape() {
        [i, o] => (i, o),
        _ => return Err(Error::DimensionMismatch(format!("weight must be 2-D, got {:?}", w.shape()))),
    };
    if x.cols() != din || b.len() != dout {
        return Err(Error::DimensionMismatch(format!(
            "input width {} / bias {} vs weight {din} x {dout}",
            x.cols(),
            b.len()
        )));
    }
    let rows = x.rows();
    let wd = w.data();
    let mut out = Vec::with_capacity(rows * dout);
    for r in 0..rows {
        let start = out.len();
        out.extend_from_slice(b);
        let y = &mut out[start..];
        for (i, &a) in x.row(r).iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let wr = &wd[i * dout..(i + 1) * dout];
            for (yj, &wij) in y.iter_mut().zip(wr) {
                *yj += a * wij;
            }
        }
        if act == Activation::Relu {
            for v in y.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(shape, out)
}

/// Backward pass of [`shared_linear`].
///
/// `y` is the forward output (used to mask the ReLU), `gy` the upstream
/// gradient. Weight/bias gradients are accumulated into `gw`/`gb`; the input
/// gradient is returned when `want_input` is set.
pub fn shared_linear_backward(
    x: &Tensor,
    w: &Tensor,
    y: &Tensor,
    gy: &Tensor,
    act: Activation,
    gw: &mut [f64],
    gb: &mut [f64],
    want_input: bool,
) -> Option<Tensor> {
    let din = x.cols();
    let dout = y.cols();
    let rows = x.rows();
    let wd = w.data();
    let mut gx = want_input.then(|| vec![0.0; rows * din]);
    let mut g = vec![0.0; dout];
    for r in 0..rows {
        let yr = y.row(r);
        let mut any = false;
        for ((gj, &upstream), &yj) in g.iter_mut().zip(gy.row(r)).zip(yr) {
            *gj = if act == Activation::Relu && yj <= 0.0 { 0.0 } else { upstream };
            any |= *gj != 0.0;
        }
        if !any {
            continue;
        }
        for (b, &gj) in gb.iter_mut().zip(&g) {
            *b += gj;
        }
        let xr = x.row(r);
        for (i, &a) in xr.iter().enumerate() {
            if a != 0.0 {
                let gwr = &mut gw[i * dout..(i + 1) * dout];
                for (acc, &gj) in gwr.iter_mut().zip(&g) {
                    *acc += a * gj;
                }
            }
        }
        if let Some(gx) = gx.as_mut() {
            let gxr = &mut gx[r * din..(r + 1) * din];
            for (i, out) in gxr.iter_mut().enumerate() {
                *out = dot(&wd[i * dout..(i + 1) * dout], &g);
            }
        }
    }
    gx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("shape preserved"))
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient
/// w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = -(p[label].max(f64::MIN_POSITIVE)).ln();
    let mut g = p;
    g[label] -= 1.0;
    (loss, g)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
