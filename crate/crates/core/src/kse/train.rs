//! Minibatch ADAM training of [`KseParams`] on car-frame errors.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{self, KseArch, KseParams};
use super::{build_dkpm, DkpmMatrix, FrameContext, DEFAULT_LEN};
use crate::error::{Error, Result};
use crate::gm::Vec2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub lambda_reg: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub k: usize,
    pub len: usize,
    pub val_fraction: f64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 16,
            lambda_reg: 5e-4,
            max_epochs: 80,
            seed: 0,
            k: 3,
            len: DEFAULT_LEN,
            val_fraction: 0.1,
            patience: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 || !(self.lambda_reg >= 0.0) || self.k == 0 || self.len == 0 {
            return Err(Error::InvalidArgument(format!("bad training config {self:?}")));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean data NLL over the epoch's minibatches (epoch 0: before training).
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation NLL.
    pub params: KseParams,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Standard ADAM with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in theta.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

struct Sample {
    d: DkpmMatrix,
    err: Vec2,
}

fn prepare(frames: &[&FrameContext], p: &KseParams) -> Result<Vec<Sample>> {
    let table = p.semantic_table();
    frames
        .iter()
        .map(|fc| {
            let err = fc
                .car_frame_error()
                .ok_or_else(|| Error::InvalidArgument("training frame without r_gt".into()))?;
            Ok(Sample { d: build_dkpm(fc, &table, p.arch().len)?, err })
        })
        .collect()
}

fn mean_nll_prepared(p: &KseParams, samples: &mut [Sample]) -> Result<f64> {
    let table = p.semantic_table();
    let mut total = 0.0;
    for s in samples.iter_mut() {
        s.d.apply_table(&table);
        total += net::loss(p, &s.d, &s.err, 0.0)?;
    }
    Ok(total / samples.len() as f64)
}

/// Average NLL of the car-frame errors of `frames` (regularizer excluded).
pub fn mean_nll(p: &KseParams, frames: &[FrameContext]) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("no frames".into()));
    }
    let refs: Vec<&FrameContext> = frames.iter().collect();
    let mut samples = prepare(&refs, p)?;
    mean_nll_prepared(p, &mut samples)
}

/// Deterministic `(train, validation)` index split.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5151)));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = if n > 1 { n_val.clamp(1, n - 1) } else { 0 };
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

pub fn train(dataset: &[FrameContext], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut params = KseParams::init(KseArch::new(cfg.k, cfg.len), cfg.seed)?;
    let (train_idx, val_idx) = split_indices(dataset.len(), cfg.val_fraction, cfg.seed);
    let train_refs: Vec<&FrameContext> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let val_refs: Vec<&FrameContext> = if val_idx.is_empty() {
        train_refs.clone()
    } else {
        val_idx.iter().map(|&i| &dataset[i]).collect()
    };
    let mut train_set = prepare(&train_refs, &params)?;
    let mut val_set = prepare(&val_refs, &params)?;

    let mut curve = vec![EpochStats {
        epoch: 0,
        train_nll: mean_nll_prepared(&params, &mut train_set)?,
        val_nll: mean_nll_prepared(&params, &mut val_set)?,
    }];
    let mut best = (curve[0].val_nll, 0, params.clone());

    let mut adam = Adam::new(params.theta().len(), cfg.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xbeef));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut grad = vec![0.0; params.theta().len()];

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_nll = 0.0;
        for batch in order.chunks(cfg.batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let table = params.semantic_table();
            let scale = 1.0 / batch.len() as f64;
            // fixed in-batch order keeps the float reduction reproducible
            for &i in batch {
                let s = &mut train_set[i];
                s.d.apply_table(&table);
                let (nll, _): (f64, DMatrix<f64>) = net::accumulate_nll_grad(&params, &s.d, &s.err, scale, &mut grad)?;
                epoch_nll += nll;
            }
            net::accumulate_reg_grad(&params, cfg.lambda_reg, 1.0, &mut grad);
            adam.step(params.theta_mut(), &grad);
        }
        let val_nll = mean_nll_prepared(&params, &mut val_set)?;
        curve.push(EpochStats { epoch, train_nll: epoch_nll / train_set.len() as f64, val_nll });
        if val_nll < best.0 {
            best = (val_nll, epoch, params.clone());
        }
        if let Some(patience) = cfg.patience {
            if epoch - best.1 >= patience {
                break;
            }
        }
    }
    Ok(TrainOutcome { params: best.2, curve, best_epoch: best.1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut theta = vec![3.0, -2.0];
        let mut adam = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
            adam.step(&mut theta, &g);
        }
        assert!(theta.iter().all(|t| t.abs() < 1e-3));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_indices(100, 0.1, 3);
        assert_eq!((a.len(), b.len()), (90, 10));
        assert_eq!(split_indices(100, 0.1, 3), (a.clone(), b.clone()));
        assert!(b.iter().all(|i| !a.contains(i)));
        assert_eq!(split_indices(1, 0.1, 3).1.len(), 0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(train(&[], &TrainConfig::default()).is_err());
    }
}
