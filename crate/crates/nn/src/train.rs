//! Minibatch training loop with early stopping on validation loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::exec::{backward, forward, predict};
use crate::model::Model;
use crate::optim::Sgd;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 8, lr: 0.05, momentum: 0.9, patience: 5, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(NnError::Invalid("epochs and batch_size must be >= 1".into()));
        }
        Sgd::new(self.lr, self.momentum).map(|_| ())
    }
}

/// A supervised dataset the training loop can draw batches from.
pub trait TrainingSet {
    type Target;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builds the input tensor and target for the given examples. `augment` is
    /// `Some` only during training.
    fn batch(&self, indices: &[usize], augment: Option<&mut ChaCha8Rng>) -> Result<(Tensor, Self::Target)>;

    /// Loss and its gradient with respect to the network output.
    fn loss(&self, output: &Tensor, target: &Self::Target) -> Result<(f64, Tensor)>;
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Epoch (0-based) whose parameters were kept.
    pub best_epoch: usize,
    pub steps: u64,
    pub stopped_early: bool,
}

/// Mean loss over a whole set, without augmentation.
pub fn evaluate_loss<S: TrainingSet>(model: &Model, set: &S, batch_size: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, target) = set.batch(chunk, None)?;
        let out = predict(model, &x)?;
        let (loss, _) = set.loss(&out, &target)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / set.len().max(1) as f64)
}

pub fn fit<S: TrainingSet>(model: &mut Model, train: &S, val: &S, cfg: &TrainConfig) -> Result<TrainHistory> {
    fit_with_hook(model, train, val, cfg, &mut |_, _| {})
}

/// Trains `model` in place. `hook` runs after every optimizer step with the
/// 1-based iteration number. The parameters of the epoch with the lowest
/// validation loss (training loss when `val` is empty) are restored at the end.
pub fn fit_with_hook<S: TrainingSet>(
    model: &mut Model,
    train: &S,
    val: &S,
    cfg: &TrainConfig,
    hook: &mut dyn FnMut(u64, &Model),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(NnError::Invalid("empty training set".into()));
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a06d);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, model.clone());
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, target) = train.batch(chunk, Some(&mut aug_rng))?;
            let acts = forward(model, &x)?;
            let (loss, grad) = train.loss(acts.output(), &target)?;
            if !loss.is_finite() {
                return Err(NnError::NonFinite(format!("training loss at epoch {epoch}")));
            }
            let grads = backward(model, &acts, &grad)?;
            opt.step(model, &grads)?;
            history.steps += 1;
            hook(history.steps, model);
            sum += loss * chunk.len() as f64;
        }
        let train_loss = sum / train.len() as f64;
        history.train_loss.push(train_loss);
        let monitored = if val.is_empty() {
            train_loss
        } else {
            let v = evaluate_loss(model, val, cfg.batch_size)?;
            history.val_loss.push(v);
            v
        };
        if !monitored.is_finite() {
            return Err(NnError::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        if monitored < best.0 {
            best = (monitored, model.clone());
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    let meta = model.meta.clone();
    *model = best.1;
    model.meta = meta;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::LayerSpec;
    use crate::loss::loss_softmax_ce;
    use crate::model::ModelMeta;

    /// Two Gaussian-ish blobs in 2-D, linearly separable.
    struct Blobs {
        points: Vec<([f32; 2], usize)>,
    }

    impl Blobs {
        fn new(n: usize, offset: usize) -> Self {
            let points = (0..n)
                .map(|i| {
                    let j = (i + offset) as f32;
                    let label = i % 2;
                    let sign = if label == 0 { -1.0 } else { 1.0 };
                    ([sign * 2.0 + (j * 0.37).sin(), (j * 0.91).cos()], label)
                })
                .collect();
            Self { points }
        }
    }

    impl TrainingSet for Blobs {
        type Target = Vec<usize>;
        fn len(&self) -> usize {
            self.points.len()
        }
        fn batch(&self, idx: &[usize], _: Option<&mut ChaCha8Rng>) -> Result<(Tensor, Vec<usize>)> {
            let data = idx.iter().flat_map(|&i| self.points[i].0).collect();
            Ok((Tensor::new(vec![idx.len(), 2], data)?, idx.iter().map(|&i| self.points[i].1).collect()))
        }
        fn loss(&self, out: &Tensor, t: &Vec<usize>) -> Result<(f64, Tensor)> {
            loss_softmax_ce(out, t)
        }
    }

    fn model() -> Model {
        Model::new(&[2], vec![LayerSpec::dense(2, 2)], 11, ModelMeta::default()).unwrap()
    }

    #[test]
    fn loss_decreases_and_is_reproducible() {
        let (train, val) = (Blobs::new(40, 0), Blobs::new(10, 100));
        let cfg = TrainConfig { epochs: 10, batch_size: 4, lr: 0.1, momentum: 0.5, patience: 3, seed: 1 };
        let mut a = model();
        let h = fit(&mut a, &train, &val, &cfg).unwrap();
        assert!(h.train_loss.last().unwrap() < &h.train_loss[0]);
        let mut b = model();
        fit(&mut b, &train, &val, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hook_sees_every_step() {
        let (train, val) = (Blobs::new(12, 0), Blobs::new(4, 50));
        let cfg = TrainConfig { epochs: 2, batch_size: 4, lr: 0.1, momentum: 0.0, patience: 5, seed: 2 };
        let mut seen = Vec::new();
        let mut m = model();
        let h = fit_with_hook(&mut m, &train, &val, &cfg, &mut |i, _| seen.push(i)).unwrap();
        assert_eq!(seen, (1..=6).collect::<Vec<u64>>());
        assert_eq!(h.steps, 6);
    }
}
