use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{evaluate_loss, gradient, Sample};
use super::model::forward;
use super::params::RefinerParams;
use super::{RefinerConfig, RefinerError};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub conf_loss: f64,
    pub disp_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: RefinerParams,
    /// Entry 0 is the loss before any update, entry `e` the loss after epoch `e`.
    pub history: Vec<LossRecord>,
}

fn record(epoch: usize, params: &RefinerParams, dataset: &[Sample]) -> Result<LossRecord, RefinerError> {
    let l = evaluate_loss(params, dataset)?;
    if !l.total.is_finite() {
        return Err(RefinerError::Diverged { epoch, detail: format!("loss {}", l.total) });
    }
    Ok(LossRecord { epoch, conf_loss: l.conf, disp_loss: l.disp, total: l.total })
}

/// Trains from a seeded initialization; frames are shuffled each epoch with
/// the same seed stream, so two runs with one config are identical.
pub fn train(dataset: &[Sample], config: &RefinerConfig) -> Result<TrainOutcome, RefinerError> {
    let params = RefinerParams::init(config)?;
    train_from(params, dataset)
}

pub fn train_from(mut params: RefinerParams, dataset: &[Sample]) -> Result<TrainOutcome, RefinerError> {
    let config = params.config.clone();
    let usable: Vec<&Sample> = dataset.iter().filter(|s| s.valid_count() > 0).collect();
    if usable.is_empty() {
        return Err(RefinerError::NoValidPoints);
    }
    let mut adam = Adam::new(params.values.len(), config.learning_rate, config.beta1, config.beta2, config.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_7EA1);
    let mut history = vec![record(0, &params, dataset)?];
    let mut order: Vec<usize> = (0..usable.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_frames) {
            let batch: Vec<Sample> = chunk.iter().map(|i| usable[*i].clone()).collect();
            let (loss, grad) = gradient(&params, &batch).map_err(|e| match e {
                RefinerError::NonFinite(what) => RefinerError::Diverged { epoch, detail: format!("non-finite {what}") },
                other => other,
            })?;
            if !loss.total.is_finite() {
                return Err(RefinerError::Diverged { epoch, detail: format!("batch loss {}", loss.total) });
            }
            adam.step(&mut params.values, &grad);
        }
        history.push(record(epoch, &params, dataset)?);
    }
    Ok(TrainOutcome { params, history })
}

/// Fraction of valid points whose thresholded confidence matches the label.
pub fn confidence_accuracy(params: &RefinerParams, dataset: &[Sample]) -> Result<f64, RefinerError> {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in dataset {
        let out = forward(params, &s.features, &s.patches)?;
        for i in (0..s.valid.len()).filter(|i| s.valid[*i]) {
            let predicted = out.confidence[i] >= params.config.conf_threshold;
            hit += usize::from(predicted == (s.conf_labels[i] >= 0.5));
            total += 1;
        }
    }
    if total == 0 {
        return Err(RefinerError::NoValidPoints);
    }
    Ok(hit as f64 / total as f64)
}
