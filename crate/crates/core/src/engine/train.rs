use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, TrainerState};
use super::recall::{evaluate_topk_recall, Direction, RecallReport, DEFAULT_KS};
use crate::data::{make_batches, ClipPair, DatasetSplit};
use crate::error::{Error, Result};
use crate::layers::{Forward, ParamStore};
use crate::model::{BatchInputs, DualBranchModel, ModelConfig};
use crate::tensor::{Tape, Tensor};

/// k used to pick the best epoch on the validation set.
pub const SELECTION_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Clipped to the training-set size.
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub direction: Direction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            seed: 0,
            adam: AdamConfig::default(),
            direction: Direction::VideoToAudio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 0 for the evaluation of the initial weights.
    pub epoch: usize,
    /// Loss of every optimizer step in this epoch, in order.
    pub step_losses: Vec<f32>,
    pub mean_loss: Option<f64>,
    pub val: Option<RecallReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Weights of the epoch with the best validation recall@10 (the last
    /// epoch when there is no validation set).
    pub model: DualBranchModel,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    pub state: TrainerState<f32>,
}

impl TrainOutput {
    /// Every step loss of the run, in order.
    pub fn loss_trajectory(&self) -> Vec<f32> {
        self.history
            .iter()
            .flat_map(|e| e.step_losses.iter().copied())
            .collect()
    }
}

/// Epoch-by-epoch training with best-checkpoint retention.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: DualBranchModel,
    state: TrainerState<f32>,
    config: TrainConfig,
    best: Option<(usize, ParamStore<f32>)>,
    history: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(model: DualBranchModel, config: TrainConfig) -> Result<Self> {
        if config.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2, got {}",
                config.batch_size
            )));
        }
        let state = TrainerState::new(&model.params, config.adam, config.seed);
        Ok(Self {
            model,
            state,
            config,
            best: None,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &DualBranchModel {
        &self.model
    }

    pub fn state(&self) -> &TrainerState<f32> {
        &self.state
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    /// One optimizer step on `pairs`; returns the batch loss.
    pub fn step(&mut self, pairs: &[&ClipPair]) -> Result<f32> {
        let inputs = BatchInputs::<f32>::new(&self.model.config, pairs)?;
        let dropout_seed: u64 = self.state.rng.gen();
        let mut tape = Tape::new();
        let (loss, grads, stats) = {
            let mut fw = Forward::new(&mut tape, &self.model.params, true, true, dropout_seed);
            let out = self.model.forward_loss(&mut fw, &inputs)?;
            let stats = fw.take_batch_stats();
            let bound = fw.bound_params();
            let loss = fw.tape.value(out.loss).data()[0];
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: self.state.step + 1,
                    loss: loss as f64,
                });
            }
            fw.tape.backward(out.loss)?;
            let mut grads: Vec<Option<Tensor<f32>>> = vec![None; self.model.params.len()];
            for (id, var) in bound {
                grads[id.index()] = fw.tape.grad(var).cloned();
            }
            (loss, grads, stats)
        };
        adam_step(&mut self.state, &mut self.model.params, &grads)?;
        self.model.params.apply_batch_stats(&stats);
        Ok(loss)
    }

    /// One pass over `train` in a freshly shuffled order. Batches of a
    /// single clip are skipped; contrastive losses need a negative.
    pub fn run_epoch(&mut self, train: &[ClipPair]) -> Result<EpochLog> {
        if train.len() < 2 {
            return Err(Error::Config(format!(
                "training needs at least 2 pairs, got {}",
                train.len()
            )));
        }
        let batch_size = self.config.batch_size.min(train.len());
        let order_seed: u64 = self.state.rng.gen();
        let batches = make_batches(train.len(), batch_size, order_seed, false)?;
        let mut step_losses = Vec::with_capacity(batches.len());
        for idx in batches.iter().filter(|b| b.len() >= 2) {
            let pairs: Vec<&ClipPair> = idx.iter().map(|&i| &train[i]).collect();
            step_losses.push(self.step(&pairs)?);
        }
        self.state.epoch += 1;
        let mean_loss = (!step_losses.is_empty()).then(|| {
            step_losses.iter().map(|&l| l as f64).sum::<f64>() / step_losses.len() as f64
        });
        Ok(EpochLog {
            epoch: self.state.epoch,
            step_losses,
            mean_loss,
            val: None,
        })
    }

    /// Validation recall of the current weights at the table's ks (those
    /// not exceeding the set size). The weights are retained as the best
    /// so far when their recall@10 (or the largest usable k below it) is at
    /// least the best seen, so ties go to the later epoch.
    pub fn validate(&mut self, val: &[ClipPair]) -> Result<Option<RecallReport>> {
        if val.is_empty() {
            return Ok(None);
        }
        let ks: Vec<usize> = DEFAULT_KS.iter().copied().filter(|&k| k <= val.len()).collect();
        let report = evaluate(&self.model, val, &ks, self.config.direction)?;
        let key = selection_recall(&report);
        if self.state.best_val_recall.is_none_or(|b| key >= b) {
            self.state.best_val_recall = Some(key);
            self.best = Some((self.state.epoch, self.model.params.clone()));
        }
        Ok(Some(report))
    }

    /// Train for `epochs`, validating after each, and log every epoch.
    pub fn fit(&mut self, train: &[ClipPair], val: &[ClipPair], epochs: usize) -> Result<()> {
        if self.history.is_empty() {
            let val = self.validate(val)?;
            self.history.push(EpochLog {
                epoch: 0,
                step_losses: Vec::new(),
                mean_loss: None,
                val,
            });
        }
        for _ in 0..epochs {
            let mut log = self.run_epoch(train)?;
            log.val = self.validate(val)?;
            self.history.push(log);
        }
        Ok(())
    }

    /// Consume the trainer, keeping the best validated weights.
    pub fn finish(self) -> TrainOutput {
        let mut model = self.model;
        let best_epoch = match self.best {
            Some((epoch, params)) => {
                model.params = params;
                epoch
            }
            None => self.state.epoch,
        };
        TrainOutput {
            model,
            best_epoch,
            history: self.history,
            state: self.state,
        }
    }
}

fn selection_recall(report: &RecallReport) -> f64 {
    let i = report
        .ks
        .iter()
        .rposition(|&k| k <= SELECTION_K)
        .expect("k=1 is always usable");
    report.recall[i]
}

/// Train a fresh model built from `config` on `split.train`, selecting the
/// epoch by validation recall.
pub fn train(config: ModelConfig, split: &DatasetSplit, tc: &TrainConfig) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(DualBranchModel::new(config)?, tc.clone())?;
    trainer.fit(&split.train, &split.val, tc.epochs)?;
    Ok(trainer.finish())
}

/// Eval-mode recall of `model` over `pairs`.
pub fn evaluate(
    model: &DualBranchModel,
    pairs: &[ClipPair],
    ks: &[usize],
    direction: Direction,
) -> Result<RecallReport> {
    evaluate_topk_recall(&model.embed_pair_batch(pairs)?, ks, direction)
}
