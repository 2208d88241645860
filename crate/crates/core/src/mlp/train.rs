use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, AdamConfig, AdamState, Gradients, Network, Workspace};
use crate::error::{Error, Result};

/// A standardized input and its target class position.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f64>,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub adam: AdamConfig,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Improvement smaller than this does not reset patience.
    pub min_delta: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 0.001,
            max_epochs: 100,
            adam: AdamConfig::default(),
            patience: 10,
            min_delta: 0.0,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.min_delta >= 0.0) {
            return Err(Error::Config("learning_rate and min_delta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-epoch losses of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Mean loss over the epoch's mini-batches, taken as they were trained.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }
}

fn check_set(net: &Network, set: &[Example], name: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::domain(format!("{name} set is empty")));
    }
    for ex in set {
        if ex.input.len() != net.input_dim() {
            return Err(Error::domain(format!(
                "{name} example has {} inputs, network expects {}",
                ex.input.len(),
                net.input_dim()
            )));
        }
        if ex.target >= net.output_dim() {
            return Err(Error::domain(format!(
                "{name} target {} out of range for {} outputs",
                ex.target,
                net.output_dim()
            )));
        }
    }
    Ok(())
}

/// Mean cross-entropy over a set.
pub(crate) fn mean_loss(net: &Network, set: &[Example]) -> f64 {
    let mut ws = Workspace::new(net);
    let depth = net.layers.len();
    let total: f64 = set
        .iter()
        .map(|ex| {
            net.run(&ex.input, &mut ws);
            super::cross_entropy_from_logits(&ws.pre[depth - 1], ex.target)
        })
        .sum();
    total / set.len() as f64
}

/// Mini-batch Adam with per-epoch shuffling and early stopping on
/// validation loss. Returns the best-validation parameters.
pub fn train(mut net: Network, train_set: &[Example], val_set: &[Example], cfg: &TrainConfig) -> Result<(Network, History)> {
    cfg.validate()?;
    check_set(&net, train_set, "training")?;
    check_set(&net, val_set, "validation")?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut adam = AdamState::new(&net, cfg.adam);
    let mut grads = Gradients::zeros_like(&net);
    let mut ws = Workspace::new(&net);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut history = History {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best: Option<(f64, Network)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            for &i in batch {
                let ex = &train_set[i];
                epoch_loss += net.accumulate_gradients(&ex.input, ex.target, &mut grads, &mut ws);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam_step(&mut adam, &mut net, &grads, cfg.learning_rate)?;
        }
        let val = mean_loss(&net, val_set);
        history.train_loss.push(epoch_loss / train_set.len() as f64);
        history.val_loss.push(val);

        let improved = match &best {
            None => true,
            Some((b, _)) => val < b - cfg.min_delta,
        };
        if improved {
            best = Some((val, net.clone()));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    let (_, best_net) = best.expect("at least one epoch ran");
    Ok((best_net, history))
}
