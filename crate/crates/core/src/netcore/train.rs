use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backward::{backward, Gradients};
use super::layers::{argmax, softmax_cross_entropy};
use super::model::Dropout;
use super::{Model, ModelSpec, Tensor};
use crate::pointops::PointCloud;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Dropout probability on the global feature and hidden FC outputs.
    #[serde(default)]
    pub dropout: f64,
    /// Largest fraction of input points replaced by the first point per
    /// sample and step (0 disables).
    #[serde(default)]
    pub point_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 12, lr: 2e-3, batch: 16, seed: 7, dropout: 0.0, point_dropout: 0.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Training accuracy per epoch, measured on the fly.
    pub epoch_accuracy: Vec<f64>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &Model, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.weights().tensors.iter().map(|t| vec![0.0; t.tensor.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0, lr }
    }

    fn step(&mut self, model: &mut Model, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, g), m), v) in model.tensors_mut().iter_mut().zip(&grads.tensors).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = Self::B1 * *mi + (1.0 - Self::B1) * gi;
                *vi = Self::B2 * *vi + (1.0 - Self::B2) * gi * gi;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains on labelled clouds (`class_label` must be set on every cloud).
pub fn train(spec: ModelSpec, clouds: &[PointCloud], cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    let samples = clouds
        .iter()
        .map(|c| {
            let label = c
                .class_label
                .ok_or_else(|| Error::InvalidArgument("training cloud without class label".into()))?;
            Ok((c.to_tensor(), label))
        })
        .collect::<Result<Vec<_>>>()?;
    train_samples(spec, &samples, cfg)
}

/// Mini-batch Adam on softmax cross-entropy. Deterministic for a fixed seed.
pub fn train_samples(spec: ModelSpec, samples: &[(Tensor, usize)], cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    if cfg.batch == 0 || !(cfg.lr > 0.0) || !cfg.lr.is_finite() || !(0.0..1.0).contains(&cfg.dropout)
        || !(0.0..1.0).contains(&cfg.point_dropout)
    {
        return Err(Error::InvalidArgument(format!("invalid hyperparameters {cfg:?}")));
    }
    if let Some((_, bad)) = samples.iter().find(|(_, l)| *l >= spec.classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {} classes", spec.classes)));
    }
    let mut seen: Vec<usize> = samples.iter().map(|s| s.1).collect();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(Error::InvalidArgument("training needs at least two classes".into()));
    }

    let mut model = Model::init(spec, cfg.seed)?;
    model.meta_mut().epochs = cfg.epochs;
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((model, history));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_7a1e);
    let mut adam = Adam::new(&model, cfg.lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut dropout = Dropout { p: cfg.dropout, rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd0_0d) };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch) {
            let mut grads = Gradients::zeros_like(&model);
            for &i in batch {
                let (x, label) = &samples[i];
                let dropped;
                let x = if cfg.point_dropout > 0.0 {
                    dropped = drop_points(x, rng.gen_range(0.0..cfg.point_dropout), &mut rng);
                    &dropped
                } else {
                    x
                };
                let (logits, trace) = model.forward_with(x, Some(&mut dropout)).map_err(|e| Error::Diverged {
                    epoch,
                    detail: format!("forward failed on sample {i}: {e}"),
                })?;
                let (loss, g) = softmax_cross_entropy(&logits, *label);
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, detail: format!("loss {loss} on sample {i}") });
                }
                total += loss;
                correct += usize::from(argmax(&logits) == *label);
                backward(&model, &trace, &g, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut model, &grads);
        }
        let mean = total / samples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch, detail: format!("mean loss {mean}") });
        }
        history.epoch_loss.push(mean);
        history.epoch_accuracy.push(correct as f64 / samples.len() as f64);
    }
    Ok((model, history))
}

fn drop_points(x: &Tensor, ratio: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    let first = x.row(0).to_vec();
    for r in 1..x.rows() {
        if rng.gen_bool(ratio) {
            out.row_mut(r).copy_from_slice(&first[..cols]);
        }
    }
    out
}

/// Fraction of clouds whose predicted class equals their label.
pub fn accuracy(model: &Model, clouds: &[PointCloud]) -> Result<f64> {
    if clouds.is_empty() {
        return Ok(0.0);
    }
    let hits = clouds
        .par_iter()
        .map(|c| Ok(usize::from(Some(model.predict(c)?) == c.class_label)))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / clouds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::layers::argmax;
    use rand::Rng;

    fn separable(n: usize, seed: u64) -> Vec<(Tensor, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let sign = if label == 0 { -1.0 } else { 1.0 };
                let x = [sign * rng.gen_range(0.2..1.0), rng.gen_range(-1.0..1.0)];
                (Tensor::new(vec![1, 2], x.to_vec()).unwrap(), label)
            })
            .collect()
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let data = separable(200, 1);
        let cfg = TrainConfig { epochs: 50, lr: 0.01, batch: 8, seed: 3, dropout: 0.0, point_dropout: 0.0 };
        let (model, hist) = train_samples(ModelSpec::mlp(2, &[8], 2), &data, &cfg).unwrap();
        let hits = data.iter().filter(|(x, l)| argmax(&model.forward(x).unwrap().0) == *l).count();
        assert!(hits as f64 / data.len() as f64 >= 0.99, "train accuracy {hits}/200");
        assert!(hist.epoch_loss.last().unwrap() < &hist.epoch_loss[0]);
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let data = separable(10, 2);
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let (model, hist) = train_samples(ModelSpec::mlp(2, &[4], 2), &data, &cfg).unwrap();
        let init = Model::init(ModelSpec::mlp(2, &[4], 2), cfg.seed).unwrap();
        assert_eq!(model.weights().tensors, init.weights().tensors);
        assert!(hist.epoch_loss.is_empty());
    }

    #[test]
    fn training_is_reproducible() {
        let data = separable(40, 3);
        let cfg = TrainConfig { epochs: 3, lr: 0.01, batch: 4, seed: 9, dropout: 0.0, point_dropout: 0.0 };
        let (a, _) = train_samples(ModelSpec::mlp(2, &[4], 2), &data, &cfg).unwrap();
        let (b, _) = train_samples(ModelSpec::mlp(2, &[4], 2), &data, &cfg).unwrap();
        assert_eq!(a.weights(), b.weights());
    }

    #[test]
    fn single_class_rejected() {
        let data: Vec<_> = separable(10, 4).into_iter().map(|(x, _)| (x, 0)).collect();
        assert!(train_samples(ModelSpec::mlp(2, &[4], 2), &data, &TrainConfig::default()).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let data = separable(8, 5);
        let cfg = TrainConfig { epochs: 3, lr: 1e300, batch: 2, seed: 0, dropout: 0.0, point_dropout: 0.0 };
        let err = train_samples(ModelSpec::mlp(2, &[4], 2), &data, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }
}
