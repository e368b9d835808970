//! Empirical-risk-minimization finetuning with best-on-validation checkpointing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Rng;
use crate::toylm::{self, Example, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Which parameters `train` hands back.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Checkpoint {
    /// The evaluated parameters with the smallest validation loss.
    Best,
    /// The parameters after the final step.
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Validation cadence in optimizer steps; 0 evaluates only at start and end.
    pub eval_every_steps: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub checkpoint: Checkpoint,
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn toy() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 64,
            eval_every_steps: 10,
            optimizer: Optimizer::Sgd,
            seed: 0,
            checkpoint: Checkpoint::Best,
        }
    }

    /// Large-model finetuning recipe: lr 1e-5, 3 epochs, batch 64, eval every 10 steps.
    pub fn large_scale() -> Self {
        Self {
            learning_rate: 1e-5,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Input(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Input("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean (weighted) batch loss at each step, measured before the update.
    pub train_loss: Vec<f64>,
    /// `(step, validation loss)`; step 0 is the initial model.
    pub valid_loss: Vec<(usize, f64)>,
    pub best_step: usize,
}

impl TrainHistory {
    pub fn best_valid_loss(&self) -> Option<f64> {
        self.valid_loss
            .iter()
            .find(|(s, _)| *s == self.best_step)
            .map(|(_, l)| *l)
    }
}

/// A differentiable per-example loss over a flat parameter vector.
pub trait Objective: Sync {
    type Params: Clone + Send + Sync + AsRef<[f64]> + AsMut<[f64]>;
    type Example: Sync;

    fn loss(&self, params: &Self::Params, example: &Self::Example) -> Result<f64>;

    fn loss_and_gradient(
        &self,
        params: &Self::Params,
        example: &Self::Example,
    ) -> Result<(f64, Vec<f64>)>;
}

/// The toy language model's response-only loss.
#[derive(Clone, Copy, Debug, Default)]
pub struct LmObjective;

impl Objective for LmObjective {
    type Params = Params;
    type Example = Example;

    fn loss(&self, params: &Params, example: &Example) -> Result<f64> {
        toylm::loss(params, example)
    }

    fn loss_and_gradient(&self, params: &Params, example: &Example) -> Result<(f64, Vec<f64>)> {
        toylm::loss_and_gradient(params, example).map(|(l, g)| (l, g.data))
    }
}

impl AsRef<[f64]> for Params {
    fn as_ref(&self) -> &[f64] {
        self.as_slice()
    }
}

impl AsMut<[f64]> for Params {
    fn as_mut(&mut self) -> &mut [f64] {
        self.as_mut_slice()
    }
}

/// Mean per-example loss, summed in index order.
pub fn mean_loss(params: &Params, data: &[Example]) -> Result<f64> {
    mean_objective_loss(&LmObjective, params, data)
}

pub fn mean_objective_loss<O: Objective>(
    obj: &O,
    params: &O::Params,
    data: &[O::Example],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("mean loss over an empty set".into()));
    }
    let losses = data
        .par_iter()
        .map(|ex| obj.loss(params, ex))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / data.len() as f64)
}

/// Finetunes the toy model on `train_set`, checkpointing on `valid_set`.
pub fn train(
    params0: &Params,
    train_set: &[Example],
    valid_set: &[Example],
    cfg: &TrainConfig,
) -> Result<(Params, TrainHistory)> {
    train_objective(&LmObjective, params0, train_set, None, valid_set, cfg)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, lr: f64, grad: &[f64], params: &mut [f64]) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t);
        let bc2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// Generic minibatch training loop.
///
/// `weights[i]` multiplies example `i`'s loss (all 1 when `None`); a batch `B`
/// contributes `(1/|B|) Σ_{i∈B} w_i ∇L_i`. Each epoch visits a permutation
/// drawn from the config seed, keeping the last partial batch. Within a batch
/// gradients are summed in ascending example index.
pub fn train_objective<O: Objective>(
    obj: &O,
    params0: &O::Params,
    train_set: &[O::Example],
    weights: Option<&[f64]>,
    valid_set: &[O::Example],
    cfg: &TrainConfig,
) -> Result<(O::Params, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Input(
            "training and validation sets must be non-empty".into(),
        ));
    }
    if let Some(w) = weights {
        if w.len() != train_set.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} training examples",
                w.len(),
                train_set.len()
            )));
        }
    }
    let n = train_set.len();
    let dim = params0.as_ref().len();
    let mut params = params0.clone();
    let mut history = TrainHistory::default();
    let mut adam = (cfg.optimizer == Optimizer::Adam).then(|| Adam::new(dim));

    let initial = mean_objective_loss(obj, &params, valid_set)?;
    history.valid_loss.push((0, initial));
    let mut best = (0usize, initial, params.clone());

    let mut step = 0usize;
    let rng = Rng::seeded(cfg.seed);
    for epoch in 0..cfg.epochs {
        let order = rng.fork(epoch as u64).permutation(n);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let results = batch
                .par_iter()
                .map(|&i| obj.loss_and_gradient(&params, &train_set[i]))
                .collect::<Result<Vec<_>>>()?;

            step += 1;
            let scale = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; dim];
            let mut batch_loss = 0.0;
            for (&i, (l, g)) in batch.iter().zip(&results) {
                let w = weights.map_or(1.0, |w| w[i]);
                batch_loss += w * l;
                for (acc, gi) in grad.iter_mut().zip(g) {
                    *acc += w * gi;
                }
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    loss: batch_loss,
                });
            }
            grad.iter_mut().for_each(|g| *g *= scale);
            history.train_loss.push(batch_loss);

            match adam.as_mut() {
                Some(a) => a.step(cfg.learning_rate, &grad, params.as_mut()),
                None => {
                    for (p, g) in params.as_mut().iter_mut().zip(&grad) {
                        *p -= cfg.learning_rate * g;
                    }
                }
            }

            if cfg.eval_every_steps > 0 && step % cfg.eval_every_steps == 0 {
                evaluate(obj, &params, valid_set, step, &mut history, &mut best)?;
            }
        }
    }
    if history.valid_loss.last().map(|(s, _)| *s) != Some(step) {
        evaluate(obj, &params, valid_set, step, &mut history, &mut best)?;
    }
    history.best_step = best.0;
    match cfg.checkpoint {
        Checkpoint::Best => Ok((best.2, history)),
        Checkpoint::Last => Ok((params, history)),
    }
}

fn evaluate<O: Objective>(
    obj: &O,
    params: &O::Params,
    valid_set: &[O::Example],
    step: usize,
    history: &mut TrainHistory,
    best: &mut (usize, f64, O::Params),
) -> Result<()> {
    let v = mean_objective_loss(obj, params, valid_set)?;
    if !v.is_finite() {
        return Err(Error::Divergence { step, loss: v });
    }
    history.valid_loss.push((step, v));
    if v < best.1 {
        *best = (step, v, params.clone());
    }
    Ok(())
}
