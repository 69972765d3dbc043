//! Mini-batch training loop with validation-plateau learning-rate decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward, forward_trace, loss_squared, AdamState, LossWeights, NetError, RegressorParams};

/// One normalized input image paired with its target meta-vector.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub image: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    /// Multiplier applied on a validation plateau.
    pub lr_decay: f64,
    /// A new validation minimum must undercut the previous one by at least
    /// this much to count as improvement.
    pub improve_threshold: f64,
    /// Number of most recent epochs inspected for improvement.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seed for the per-epoch shuffle of the training set.
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 60,
            initial_lr: 1e-3,
            lr_decay: 0.8,
            improve_threshold: 1e-4,
            patience: 5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            shuffle_seed: 0,
        }
    }
}

/// Per-epoch record as written to the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate in effect during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub params: RegressorParams,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the retained weights.
    pub best_epoch: usize,
}

/// Decays the learning rate once the validation loss plateaus: with a full
/// window available, the minimum over the last `patience` epochs must beat
/// the minimum over all earlier epochs by more than `improve_threshold`,
/// otherwise the rate is multiplied by `lr_decay`. An improvement of exactly
/// the threshold still counts as improvement.
pub fn lr_schedule_update(val_history: &[f64], current_lr: f64, cfg: &TrainConfig) -> f64 {
    if val_history.len() < cfg.patience + 1 {
        return current_lr;
    }
    let split = val_history.len() - cfg.patience;
    let earlier_min = val_history[..split]
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let recent_min = val_history[split..]
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if recent_min > earlier_min - cfg.improve_threshold {
        current_lr * cfg.lr_decay
    } else {
        current_lr
    }
}

/// Mean per-example loss of `params` over `set` (forward passes only).
pub fn evaluate_loss(
    params: &RegressorParams,
    set: &[TrainingExample],
    weights: &LossWeights,
) -> Result<f64, NetError> {
    if set.is_empty() {
        return Err(NetError::InvalidArch("empty evaluation set".into()));
    }
    let mut total = 0.0;
    for ex in set {
        let trace = forward_trace(params, &ex.image, false)?;
        total += loss_squared(&trace.output, &ex.target, weights)?.sqrt();
    }
    Ok(total / set.len() as f64)
}

/// Trains `init` on `train_set`, validating each epoch on `val_set`, and
/// returns the weights of the best validation epoch together with the full
/// loss history. Batch gradients are the mean of per-example gradients of
/// the squared loss; the recorded losses are the unsquared norm.
pub fn train(
    init: RegressorParams,
    train_set: &[TrainingExample],
    val_set: &[TrainingExample],
    weights: &LossWeights,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, NetError> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(NetError::InvalidArch(
            "training and validation sets must be non-empty".into(),
        ));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(NetError::InvalidArch(
            "batch size and epoch count must be positive".into(),
        ));
    }

    let mut params = init;
    let mut adam = AdamState::new(params.param_count(), cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut lr = cfg.initial_lr;

    let mut history: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut val_losses: Vec<f64> = Vec::with_capacity(cfg.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut best_epoch = 0;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut batch_grads = params.zeros_like();
            for &idx in batch {
                let ex = &train_set[idx];
                let (loss, grads) = backward(&params, &ex.image, &ex.target, weights)?;
                epoch_loss += loss;
                batch_grads.add_assign(&grads);
            }
            batch_grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut params, &batch_grads, lr)?;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = evaluate_loss(&params, val_set, weights)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(NetError::Diverged {
                epoch,
                what: if train_loss.is_finite() {
                    "validation loss".into()
                } else {
                    "training loss".into()
                },
            });
        }

        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        val_losses.push(val_loss);
        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
            best_epoch = epoch;
        }
        lr = lr_schedule_update(&val_losses, lr, cfg);
    }

    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch,
    })
}
