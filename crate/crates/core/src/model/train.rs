//! Mini-batch training with Adam and per-step augmentation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, Dropout, ModelConfig, PeriCite};
use crate::augment::{per_label_loss, tea_step, Generator, LossLabelMap};
use crate::corpus::{tokenize, CitationInstance, Intent, Vocabulary};
use crate::error::{Error, Result};
use crate::numeric::{Gradients, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub batch_size: usize,
    pub mean_loss: f64,
    pub per_label: LossLabelMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

/// Loss traces: one record per epoch and one per optimization step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

/// What the augmentation scheduler did after one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeaEvent {
    pub step: usize,
    pub target: Option<Intent>,
    pub generated: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: PeriCite,
    pub history: History,
    pub tea_events: Vec<TeaEvent>,
}

/// Builds the vocabulary from `data` and trains a fresh model on it.
/// With `config.tea` set, each step's synthetic samples join the next batch.
pub fn train(data: &[CitationInstance], config: &ModelConfig, generator: Option<&mut dyn Generator>) -> Result<TrainedModel> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    let tokens = data.iter().map(|i| {
        let mut t = tokenize(&i.first_sentence);
        t.extend(tokenize(&i.cited_sentence));
        t.extend(tokenize(&i.second_sentence));
        t
    });
    let vocab = Vocabulary::build(tokens, config.vocab_size);
    fit(PeriCite::new(config.clone(), vocab)?, data, generator)
}

/// Trains an existing model for `config.epochs` epochs.
pub fn fit(mut model: PeriCite, data: &[CitationInstance], mut generator: Option<&mut dyn Generator>) -> Result<TrainedModel> {
    let config = model.config().clone();
    let mut adam = Adam::new(model.store(), config.learning_rate);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5DEE_CE66_D1CE_4E5B);
    let mut history = History::default();
    let mut tea_events = Vec::new();
    let mut pending: Vec<CitationInstance> = Vec::new();
    let mut step = 0;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64)));
        let (mut epoch_loss, mut epoch_count, mut epoch_steps) = (0.0, 0usize, 0);

        for chunk in order.chunks(config.batch_size) {
            let mut batch: Vec<CitationInstance> = chunk.iter().map(|&i| data[i].clone()).collect();
            batch.append(&mut pending);

            let mut grads = Gradients::zeros_like(model.store());
            let mut losses = Vec::with_capacity(batch.len());
            for inst in &batch {
                let input = model.encode(inst);
                let mut g = Graph::new(model.store());
                let mut drop = Dropout::new(config.dropout, &mut dropout_rng);
                let loss = model.loss_on_graph(&mut g, &input, inst.label, &mut drop)?;
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at step {step} (epoch {epoch}, instance {})",
                        inst.core_id
                    )));
                }
                grads.accumulate(&g.backward(loss)?);
                losses.push(value);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at step {step} (epoch {epoch})")));
            }
            adam.update(model.store_mut(), &grads);

            let per_label = if config.tea {
                let outcome = tea_step(step, &batch, &losses, generator.as_deref_mut(), config.tea_k)?;
                tea_events.push(TeaEvent {
                    step,
                    target: outcome.target,
                    generated: outcome.samples.len(),
                });
                pending = outcome.samples;
                outcome.losses
            } else {
                let labels: Vec<Intent> = batch.iter().map(|i| i.label).collect();
                per_label_loss(step, &labels, &losses)?
            };
            let batch_loss: f64 = losses.iter().sum();
            history.steps.push(StepRecord {
                step,
                epoch,
                batch_size: batch.len(),
                mean_loss: batch_loss / batch.len() as f64,
                per_label,
            });
            epoch_loss += batch_loss;
            epoch_count += batch.len();
            epoch_steps += 1;
            step += 1;
        }
        let mean_loss = epoch_loss / epoch_count as f64;
        log::info!("epoch {epoch}: mean loss {mean_loss:.6} over {epoch_steps} steps");
        history.epochs.push(EpochRecord {
            epoch,
            mean_loss,
            steps: epoch_steps,
        });
    }
    Ok(TrainedModel {
        model,
        history,
        tea_events,
    })
}
