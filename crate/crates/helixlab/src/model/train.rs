//! Adam-style training with decoupled weight decay, plus accuracy evaluation.

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::task::TaskSpec;
use crate::model::transformer::ToyTransformer;
use crate::numerics::tape::Tape;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// None trains full-batch.
    pub batch_size: Option<usize>,
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Fraction of all valid prompts used for training; the rest validate.
    pub train_fraction: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Evaluate train/val accuracy every this many steps.
    pub eval_every: usize,
    /// Stop early once validation accuracy reaches this level.
    pub target_val_accuracy: Option<f64>,
}

impl TrainConfig {
    /// Seconds-scale budget for tiny tasks; full batch, no held-out split.
    pub fn quick() -> Self {
        TrainConfig {
            steps: 400,
            batch_size: None,
            lr: 3e-3,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            train_fraction: 1.0,
            warmup_steps: 10,
            seed: 0,
            eval_every: 100,
            target_val_accuracy: Some(0.995),
        }
    }

    /// Heavier recipe for the mod-113 setting: weight decay drives the
    /// periodic structure, most prompts held out.
    pub fn grokking() -> Self {
        TrainConfig {
            steps: 4000,
            batch_size: None,
            lr: 1e-3,
            weight_decay: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            train_fraction: 0.3,
            warmup_steps: 10,
            seed: 0,
            eval_every: 100,
            target_val_accuracy: Some(0.995),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub train_accuracy: Option<f64>,
    pub val_accuracy: Option<f64>,
}

pub struct TrainOutcome {
    pub model: ToyTransformer,
    pub history: Vec<StepMetrics>,
    pub final_train_accuracy: f64,
    pub final_val_accuracy: f64,
    pub steps_run: usize,
    pub train_pairs: Vec<(i64, i64)>,
    pub val_pairs: Vec<(i64, i64)>,
}

/// Accuracy over a set of (a, b) pairs, evaluated in chunks.
pub fn accuracy_on_pairs(model: &ToyTransformer, task: &TaskSpec, pairs: &[(i64, i64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in pairs.chunks(1024) {
        let prompts: Vec<Vec<usize>> = chunk
            .iter()
            .map(|&(a, b)| task.tokenize(a, b))
            .collect::<Result<_>>()?;
        let logits = model.logits_last(&prompts)?;
        let v = model.config.vocab_size;
        for (i, &(a, b)) in chunk.iter().enumerate() {
            let row = row_argmax(logits.data(), i, v);
            if row == task.answer_token(a, b)? {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

fn row_argmax(data: &[f32], row: usize, width: usize) -> usize {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (j, &v) in data[row * width..(row + 1) * width].iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

/// Full-task evaluation: overall accuracy plus the per-(a,b) correctness grid.
pub struct EvalReport {
    pub accuracy: f64,
    pub a_values: Vec<i64>,
    pub b_values: Vec<i64>,
    /// grid[a_idx][b_idx] = model answered correctly.
    pub grid: Vec<Vec<bool>>,
}

pub fn evaluate_accuracy(model: &ToyTransformer, task: &TaskSpec) -> Result<EvalReport> {
    let a_values = task.a_values();
    let b_values = task.b_values();
    let mut grid = vec![vec![false; b_values.len()]; a_values.len()];
    let mut correct = 0usize;
    let pairs = task.valid_pairs();
    let mut flat = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(1024) {
        let prompts: Vec<Vec<usize>> = chunk
            .iter()
            .map(|&(a, b)| task.tokenize(a, b))
            .collect::<Result<_>>()?;
        let logits = model.logits_last(&prompts)?;
        let v = model.config.vocab_size;
        for (i, &(a, b)) in chunk.iter().enumerate() {
            flat.push(row_argmax(logits.data(), i, v) == task.answer_token(a, b)?);
        }
    }
    for (idx, &(a, b)) in pairs.iter().enumerate() {
        let ai = a_values.iter().position(|&x| x == a).unwrap();
        let bi = b_values.iter().position(|&x| x == b).unwrap();
        grid[ai][bi] = flat[idx];
        if flat[idx] {
            correct += 1;
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / pairs.len() as f64,
        a_values,
        b_values,
        grid,
    })
}

struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Split all valid pairs into train/validation with a seeded shuffle.
pub fn split_pairs(task: &TaskSpec, fraction: f64, seed: u64) -> (Vec<(i64, i64)>, Vec<(i64, i64)>) {
    let mut pairs = task.valid_pairs();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1717);
    pairs.shuffle(&mut rng);
    let n_train = ((pairs.len() as f64 * fraction).round() as usize).clamp(1, pairs.len());
    let val = pairs.split_off(n_train);
    (pairs, val)
}

/// Train a fresh model on a task. Deterministic given both seeds.
pub fn train_task(config: &ModelConfig, task: &TaskSpec, train: &TrainConfig) -> Result<TrainOutcome> {
    config.check_task(task)?;
    let mut model = ToyTransformer::new(config)?;
    let (train_pairs, val_pairs) = split_pairs(task, train.train_fraction, train.seed);
    let eval_pairs: &[(i64, i64)] = if val_pairs.is_empty() { &train_pairs } else { &val_pairs };

    let mut opt: BTreeMap<String, AdamState> = model
        .params()
        .iter()
        .map(|(name, t)| {
            (name.clone(), AdamState { m: vec![0.0; t.numel()], v: vec![0.0; t.numel()] })
        })
        .collect();

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut cursor = order.len(); // forces a shuffle before the first minibatch
    let mut history = Vec::new();
    let mut steps_run = 0;

    for step in 0..train.steps {
        let batch: Vec<(i64, i64)> = match train.batch_size {
            None => train_pairs.clone(),
            Some(bs) => {
                let bs = bs.min(train_pairs.len());
                let mut batch = Vec::with_capacity(bs);
                for _ in 0..bs {
                    if cursor == order.len() {
                        order.shuffle(&mut rng);
                        cursor = 0;
                    }
                    batch.push(train_pairs[order[cursor]]);
                    cursor += 1;
                }
                batch
            }
        };
        let prompts: Vec<Vec<usize>> = batch
            .iter()
            .map(|&(a, b)| task.tokenize(a, b))
            .collect::<Result<_>>()?;
        let answers: Vec<usize> = batch
            .iter()
            .map(|&(a, b)| task.answer_token(a, b))
            .collect::<Result<_>>()?;

        let mut tape = Tape::new();
        let fwd = model.forward_taped(&mut tape, &prompts)?;
        let loss = tape.cross_entropy_mean(fwd.last_logits, &answers)?;
        let loss_value = tape.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step });
        }
        tape.backward(loss)?;

        let t = (step + 1) as f32;
        let warm = if train.warmup_steps > 0 {
            (t / train.warmup_steps as f32).min(1.0)
        } else {
            1.0
        };
        let lr = train.lr * warm;
        let bc1 = 1.0 - train.beta1.powf(t);
        let bc2 = 1.0 - train.beta2.powf(t);
        for (name, var) in &fwd.params {
            let grad = tape.grad(*var).expect("param gradient");
            let state = opt.get_mut(name).unwrap();
            // layer-norm scales and shifts are not decayed
            let decay = if name.ends_with(".g") || name.ends_with(".b") {
                0.0
            } else {
                train.weight_decay
            };
            let mut w = model.param(name).data().to_vec();
            for i in 0..w.len() {
                let g = grad.data()[i];
                state.m[i] = train.beta1 * state.m[i] + (1.0 - train.beta1) * g;
                state.v[i] = train.beta2 * state.v[i] + (1.0 - train.beta2) * g * g;
                let mhat = state.m[i] / bc1;
                let vhat = state.v[i] / bc2;
                w[i] -= lr * (mhat / (vhat.sqrt() + train.eps) + decay * w[i]);
            }
            let shape = model.param(name).shape().to_vec();
            model.set_param(name, crate::numerics::Tensor::new(shape, w)?)?;
        }
        steps_run = step + 1;

        let evaluate = step % train.eval_every == train.eval_every - 1 || step + 1 == train.steps;
        let (train_acc, val_acc) = if evaluate {
            let ta = accuracy_on_pairs(&model, task, &train_pairs)?;
            let va = accuracy_on_pairs(&model, task, eval_pairs)?;
            (Some(ta), Some(va))
        } else {
            (None, None)
        };
        history.push(StepMetrics { step, loss: loss_value, train_accuracy: train_acc, val_accuracy: val_acc });
        if let (Some(target), Some(va)) = (train.target_val_accuracy, val_acc) {
            if va >= target {
                break;
            }
        }
    }

    let final_train_accuracy = accuracy_on_pairs(&model, task, &train_pairs)?;
    let final_val_accuracy = accuracy_on_pairs(&model, task, eval_pairs)?;
    Ok(TrainOutcome {
        model,
        history,
        final_train_accuracy,
        final_val_accuracy,
        steps_run,
        train_pairs,
        val_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_steps_returns_initialization() {
        let task = TaskSpec::add_mod(5);
        let config = ModelConfig::tiny(&task, 7);
        let mut train = TrainConfig::quick();
        train.steps = 0;
        let outcome = train_task(&config, &task, &train).unwrap();
        let fresh = ToyTransformer::new(&config).unwrap();
        for (name, t) in fresh.params() {
            assert_eq!(t.data(), outcome.model.param(name).data(), "{name}");
        }
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let task = TaskSpec::add_mod(11);
        let config = ModelConfig::tiny(&task, 2);
        let model = ToyTransformer::new(&config).unwrap();
        let report = evaluate_accuracy(&model, &task).unwrap();
        assert!(report.accuracy < 0.35, "untrained accuracy {}", report.accuracy);
    }

    #[test]
    fn small_task_trains_to_high_accuracy() {
        let task = TaskSpec::add_mod(7);
        let config = ModelConfig::tiny(&task, 0);
        let outcome = train_task(&config, &task, &TrainConfig::quick()).unwrap();
        assert!(
            outcome.final_train_accuracy >= 0.99,
            "train accuracy {} after {} steps",
            outcome.final_train_accuracy,
            outcome.steps_run
        );
        // re-evaluation matches the trainer's reported number
        let report = evaluate_accuracy(&outcome.model, &task).unwrap();
        assert!((report.accuracy - outcome.final_train_accuracy).abs() < 1e-9);
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let task = TaskSpec::add_mod(13);
        let (tr1, va1) = split_pairs(&task, 0.3, 42);
        let (tr2, va2) = split_pairs(&task, 0.3, 42);
        assert_eq!(tr1, tr2);
        assert_eq!(va1, va2);
        assert_eq!(tr1.len() + va1.len(), 169);
        for p in &tr1 {
            assert!(!va1.contains(p));
        }
        let (tr3, _) = split_pairs(&task, 0.3, 43);
        assert_ne!(tr1, tr3);
    }
}
