//! Optimizers and the training loop.
//!
//! One training step builds a fresh tape, runs every query of the batch,
//! sums the per-token cross-entropy losses (optionally averaging over
//! labeled positions), backpropagates, and applies one optimizer step.
//! All shuffling and dropout randomness derives from the run seed, so the
//! same seed and config reproduce the loss curve exactly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::embed::EmbeddingProvider;
use crate::corpus::Sentence;
use crate::derive_seed;
use crate::eval::{evaluate, trigger_prf, TriggerSource};
use crate::model::{Model, QueryTrigger, Task};
use crate::nn::ParamStore;
use crate::tensor::Tape;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub dropout: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Early stop after this many validation evaluations without
    /// improvement.
    pub patience: Option<usize>,
    /// Epochs between validation evaluations.
    pub eval_every: usize,
    /// Stop once validation classification F1 reaches this value.
    pub target_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 6e-5,
            epochs: 40,
            dropout: 0.2,
            optimizer: OptimizerKind::default(),
            seed: 0,
            patience: None,
            eval_every: 1,
            target_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate {} must be non-negative",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// Per-parameter optimizer state over a [`ParamStore`].
pub struct Optimizer {
    kind: OptimizerKind,
    pub learning_rate: f64,
    step: usize,
    moment1: Vec<Vec<f64>>,
    moment2: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, store: &ParamStore) -> Self {
        let (moment1, moment2) = match kind {
            OptimizerKind::Adam { .. } => {
                let zeros: Vec<Vec<f64>> = store
                    .entries()
                    .iter()
                    .map(|e| vec![0.0; e.values.len()])
                    .collect();
                (zeros.clone(), zeros)
            }
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Optimizer {
            kind,
            learning_rate,
            step: 0,
            moment1,
            moment2,
        }
    }

    /// Apply one update; `grads` must be in store order. Non-learnable
    /// entries are skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for i in 0..store.len() {
                    let id = store.id_at(i);
                    if !store.entry(id).learnable {
                        continue;
                    }
                    let lr = self.learning_rate;
                    for (p, g) in store.values_mut(id).iter_mut().zip(&grads[i]) {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let t = self.step as i32;
                let corr1 = 1.0 - beta1.powi(t);
                let corr2 = 1.0 - beta2.powi(t);
                for i in 0..store.len() {
                    let id = store.id_at(i);
                    if !store.entry(id).learnable {
                        continue;
                    }
                    let lr = self.learning_rate;
                    let m = &mut self.moment1[i];
                    let v = &mut self.moment2[i];
                    let params = store.values_mut(id);
                    for j in 0..params.len() {
                        let g = grads[i][j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        let m_hat = m[j] / corr1;
                        let v_hat = v[j] / corr2;
                        params[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
        }
    }
}

/// One trainable unit: a sentence plus (for argument models) the queried
/// trigger.
#[derive(Debug, Clone)]
pub struct TrainQuery {
    pub sentence_idx: usize,
    pub trigger: Option<QueryTrigger>,
}

/// Every query a corpus offers for the model's task.
pub fn build_queries(model: &Model, corpus: &[Sentence]) -> Vec<TrainQuery> {
    match model.config.task {
        Task::Trigger => (0..corpus.len())
            .map(|sentence_idx| TrainQuery {
                sentence_idx,
                trigger: None,
            })
            .collect(),
        Task::Argument => corpus
            .iter()
            .enumerate()
            .flat_map(|(sentence_idx, s)| {
                s.events.iter().map(move |e| TrainQuery {
                    sentence_idx,
                    trigger: Some(QueryTrigger {
                        span: e.trigger,
                        event_type: e.event_type.clone(),
                    }),
                })
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Mean per-query loss per epoch.
    pub loss_curve: Vec<f64>,
    /// (epoch, classification F1) on the validation corpus.
    pub val_f1_curve: Vec<(usize, f64)>,
    pub best_val_f1: Option<f64>,
    pub epochs_run: usize,
}

/// Train in place. When a validation corpus is given, the parameters of the
/// best validation F1 are kept (and restored at the end); `target_f1` and
/// `patience` stop early.
pub fn train(
    model: &mut Model,
    provider: &EmbeddingProvider,
    train_corpus: &[Sentence],
    val_corpus: Option<&[Sentence]>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_corpus.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    model.config.dropout = config.dropout;
    let queries = build_queries(model, train_corpus);
    if queries.is_empty() {
        return Err(Error::Contract("training corpus offers no queries".into()));
    }

    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, model.param_store());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 101));

    let mut outcome = TrainOutcome {
        loss_curve: Vec::with_capacity(config.epochs),
        val_f1_curve: Vec::new(),
        best_val_f1: None,
        epochs_run: 0,
    };
    let mut best_params: Option<Vec<Vec<f64>>> = None;
    let mut evals_since_best = 0usize;
    let mut step_counter = 0u64;

    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..queries.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::with_seed(derive_seed(config.seed, 10_000 + step_counter), true);
            step_counter += 1;
            let bind = model.register_params(&mut tape)?;
            let mut total_loss = None;
            let mut active_tokens = 0usize;
            for &qi in batch {
                let q = &queries[qi];
                let sentence = &train_corpus[q.sentence_idx];
                let fwd = model.forward_emitted(
                    &mut tape,
                    &bind,
                    sentence,
                    q.trigger.as_ref(),
                    provider,
                )?;
                let targets = model.training_targets(&fwd.plan, sentence, q.trigger.as_ref())?;
                active_tokens += targets.iter().flatten().count();
                let loss = tape.softmax_xent(fwd.logits, &targets, false)?;
                total_loss = Some(match total_loss {
                    None => loss,
                    Some(acc) => tape.add(acc, loss)?,
                });
            }
            let mut loss = total_loss.expect("non-empty batch");
            if model.config.mean_loss && active_tokens > 0 {
                loss = tape.scale(loss, 1.0 / active_tokens as f64)?;
            }
            let loss_value = tape.values(loss)[0];
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {loss_value} at epoch {epoch} batch {batch_idx}"
                )));
            }
            epoch_loss += loss_value;
            tape.backward(loss)?;
            let grads = model.param_store().collect_grads(&tape, &bind);
            optimizer.step(model.param_store_mut(), &grads);
        }
        outcome.loss_curve.push(epoch_loss / queries.len() as f64);
        outcome.epochs_run = epoch + 1;

        if let Some(val) = val_corpus {
            if (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs {
                let f1 = match model.config.task {
                    Task::Argument => evaluate(
                        model,
                        provider,
                        val,
                        TriggerSource::Gold,
                        serde_json::Value::Null,
                    )?
                    .classification
                    .f1(),
                    Task::Trigger => trigger_prf(model, provider, val)?.f1(),
                };
                outcome.val_f1_curve.push((epoch + 1, f1));
                let improved = outcome.best_val_f1.map_or(true, |b| f1 > b);
                if improved {
                    outcome.best_val_f1 = Some(f1);
                    best_params = Some(snapshot(model.param_store()));
                    evals_since_best = 0;
                } else {
                    evals_since_best += 1;
                }
                if let Some(target) = config.target_f1 {
                    if f1 >= target {
                        break 'epochs;
                    }
                }
                if let Some(patience) = config.patience {
                    if evals_since_best > patience {
                        break 'epochs;
                    }
                }
            }
        }
    }

    if let Some(best) = best_params {
        restore(model.param_store_mut(), &best);
    }
    Ok(outcome)
}

fn snapshot(store: &ParamStore) -> Vec<Vec<f64>> {
    store.entries().iter().map(|e| e.values.clone()).collect()
}

fn restore(store: &mut ParamStore, snapshot: &[Vec<f64>]) {
    for i in 0..store.len() {
        let id = store.id_at(i);
        store.values_mut(id).copy_from_slice(&snapshot[i]);
    }
}
