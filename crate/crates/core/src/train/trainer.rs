use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::loss::bce_loss;
use super::split::{Protocol, SplitPlan};
use crate::error::{Error, Result};
use crate::model::{ListenNet, ModelConfig};
use crate::preprocess::{DecisionWindow, Label};
use crate::tensor::Tensor4;

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Protocol,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub val_fraction_loso: f64,
}

impl TrainConfig {
    pub fn for_mode(mode: Protocol) -> Self {
        let (learning_rate, batch_size) = match mode {
            Protocol::SubjectDependent => (5e-4, 32),
            Protocol::Loso => (1e-3, 128),
        };
        Self {
            mode,
            learning_rate,
            weight_decay: 3e-4,
            batch_size,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            val_fraction_loso: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning_rate must be positive and weight_decay non-negative"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::config("batch_size, max_epochs and patience must be positive"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction_loso) {
            return Err(Error::config("val_fraction_loso must lie in [0, 1)"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_mode(Protocol::SubjectDependent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Stale,
    Stop,
}

/// Tracks the best score seen and how many epochs have passed without
/// beating it. Epochs that only tie the best score move the snapshot to
/// themselves when their tie-break value is lower, without resetting
/// patience.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    higher_is_better: bool,
    best: Option<(f64, f64)>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, higher_is_better: bool) -> Self {
        Self {
            patience,
            higher_is_better,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64, tie_break: f64) -> Verdict {
        let better = match self.best {
            None => true,
            Some((b, _)) if self.higher_is_better => score > b,
            Some((b, _)) => score < b,
        };
        if better {
            self.best = Some((score, tie_break));
            self.best_epoch = epoch;
            self.stale = 0;
            return Verdict::Improved;
        }
        if let Some((b, t)) = self.best {
            if score == b && tie_break < t {
                self.best = Some((score, tie_break));
                self.best_epoch = epoch;
            }
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Stale
        }
    }

    /// Epoch whose snapshot should be returned.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ListenNet,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub skipped_steps: u64,
}

/// Stacks windows into a `(B,1,C,T)` batch.
pub fn batch_tensor(windows: &[&DecisionWindow], config: &ModelConfig) -> Result<Tensor4> {
    let (c, t) = (config.channels, config.window_len);
    let mut data = Vec::with_capacity(windows.len() * c * t);
    for w in windows {
        if w.channels != c || w.len != t {
            return Err(Error::shape(format!(
                "window {}/{}@{} is {}x{}, model expects {c}x{t}",
                w.subject_id, w.trial_id, w.start_sample, w.channels, w.len
            )));
        }
        data.extend_from_slice(&w.data);
    }
    Tensor4::from_vec([windows.len(), 1, c, t], data)
}

/// Predicted class per window in inference mode; ties go to class 0.
pub fn predict_labels(model: &ListenNet, windows: &[&DecisionWindow]) -> Result<Vec<Label>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EVAL_CHUNK) {
        let probs = model.predict(&batch_tensor(chunk, &model.config)?)?;
        for i in 0..chunk.len() {
            let right = probs.at(i, 0, 0, 1) > probs.at(i, 0, 0, 0);
            out.push(if right { Label::Right } else { Label::Left });
        }
    }
    Ok(out)
}

pub fn evaluate(model: &ListenNet, windows: &[&DecisionWindow]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty window set".into()));
    }
    let predicted = predict_labels(model, windows)?;
    let correct = predicted.iter().zip(windows).filter(|(p, w)| **p == w.label).count();
    Ok(correct as f64 / windows.len() as f64)
}

fn select<'a>(windows: &'a [DecisionWindow], idx: &[usize]) -> Result<Vec<&'a DecisionWindow>> {
    idx.iter()
        .map(|&i| {
            windows
                .get(i)
                .ok_or_else(|| Error::config(format!("split references window {i} of {}", windows.len())))
        })
        .collect()
}

/// Trains a fresh model on `plan.train`, monitoring validation accuracy
/// (or training loss when there is no validation set), and returns the
/// best snapshot.
pub fn train_loop(
    windows: &[DecisionWindow],
    plan: &SplitPlan,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    if plan.train.is_empty() {
        return Err(Error::config(format!("fold {}: empty training set", plan.fold_id)));
    }
    let train = select(windows, &plan.train)?;
    let val = select(windows, &plan.val)?;

    let mut model = ListenNet::new(model_config.clone(), config.seed)?;
    let mut state = AdamState::for_params(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut stopper = EarlyStopping::new(config.patience, !val.is_empty());
    let mut best = model.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch_idx in order.chunks(config.batch_size) {
            let batch: Vec<&DecisionWindow> = batch_idx.iter().map(|&i| train[i]).collect();
            let labels: Vec<Label> = batch.iter().map(|w| w.label).collect();
            let x = batch_tensor(&batch, model_config)?;
            let (probs, cache) = model.forward(&x, true)?;
            let (loss, grad) = bce_loss(&probs, &labels)?;
            let stats = cache.batch_stats().cloned();
            let grads = model.backward(cache, &grad)?;
            adam_step(
                &mut model.params,
                &grads,
                &mut state,
                config.learning_rate,
                config.weight_decay,
            )?;
            if let Some(stats) = stats {
                model.update_running_stats(&stats);
            }
            loss_sum += loss as f64 * batch.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_acc = if val.is_empty() { None } else { Some(evaluate(&model, &val)?) };
        debug!("fold {} epoch {epoch}: loss {train_loss:.5} val {val_acc:?}", plan.fold_id);
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_acc,
        });
        let verdict = stopper.observe(epoch, val_acc.unwrap_or(train_loss), train_loss);
        if stopper.best_epoch() == epoch {
            best = model.clone();
        }
        match verdict {
            Verdict::Improved | Verdict::Stale => {}
            Verdict::Stop => {
                info!(
                    "fold {}: early stop after epoch {epoch}, best epoch {}",
                    plan.fold_id,
                    stopper.best_epoch()
                );
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch: stopper.best_epoch(),
        skipped_steps: state.skipped,
    })
}
