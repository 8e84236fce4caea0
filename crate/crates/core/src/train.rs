//! AdamW under a cosine schedule with seeded, order-deterministic batching.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelInput, TopoLab};
use crate::nn::{Graph, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub total_iterations: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    /// Steps between intermediate checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
    /// Global gradient-norm cap; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            batch_size: 4,
            total_iterations: 2000,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            checkpoint_interval: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.total_iterations == 0 {
            return Err(Error::Config("total_iterations must be at least 1".into()));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// `0.5 * base * (1 + cos(pi * t / T))`, held at 0 past `T`.
pub fn cosine_lr(t: usize, total: usize, base_lr: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = t.min(total) as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * t / total as f64).cos())
}

/// First and second moments per parameter, and the step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |store: &ParamStore| {
            store
                .iter()
                .map(|(n, p)| (n.to_string(), vec![0.0; p.numel()]))
                .collect()
        };
        Self {
            m: zeros(store),
            v: zeros(store),
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update from the store's accumulated
/// gradients, which are zeroed afterwards.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState, lr: f64, config: &TrainConfig) -> Result<()> {
    let bad: Vec<String> = store
        .names()
        .filter(|n| store.grad(n).is_some_and(|g| g.iter().any(|x| !x.is_finite())))
        .map(String::from)
        .collect();
    if !bad.is_empty() {
        for name in &bad {
            let g = store.grad(name).unwrap_or(&[]);
            let nan = g.iter().filter(|x| x.is_nan()).count();
            let inf = g.iter().filter(|x| x.is_infinite()).count();
            log::error!("non-finite gradient in {name}: {nan} NaN, {inf} infinite of {}", g.len());
        }
        return Err(Error::Numerical(format!(
            "non-finite gradients at step {} in: {}",
            state.t + 1,
            bad.join(", ")
        )));
    }
    let clip = match config.grad_clip {
        Some(max) => {
            let norm = store
                .names()
                .filter_map(|n| store.grad(n))
                .flatten()
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.t += 1;
    let (b1, b2) = config.betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (name, param, grad) in store.params_and_grads_mut() {
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        for (((p, g), m), v) in param.data_mut().iter_mut().zip(grad.iter_mut()).zip(m).zip(v) {
            let gi = *g * clip;
            *m = b1 * *m + (1.0 - b1) * gi;
            *v = b2 * *v + (1.0 - b2) * gi * gi;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * (mh / (vh.sqrt() + config.eps) + config.weight_decay * *p);
            *g = 0.0;
        }
    }
    Ok(())
}

/// A case ready for training: model input plus classification targets.
#[derive(Debug, Clone)]
pub struct TrainingCase {
    pub id: String,
    pub input: ModelInput,
    pub gold: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Builds training cases, setting aside those the model cannot use (for
/// example gold pairs outside the topology). More than 10% set aside is an
/// error.
pub fn prepare_cases(
    model: &TopoLab,
    cases: Vec<(String, ModelInput, Vec<usize>)>,
) -> Result<(Vec<TrainingCase>, Vec<(String, Error)>)> {
    let total = cases.len();
    if total == 0 {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for (id, input, gold) in cases {
        match model.targets(&input, &gold) {
            Ok(targets) => kept.push(TrainingCase {
                id,
                input,
                gold,
                targets,
            }),
            Err(e) => {
                log::warn!("excluding case {id}: {e}");
                excluded.push((id, e));
            }
        }
    }
    if excluded.len() * 10 > total {
        let ids: Vec<&str> = excluded.iter().map(|(id, _)| id.as_str()).collect();
        return Err(Error::Validation(format!(
            "{} of {total} training cases are invalid (more than 10%): {}",
            excluded.len(),
            ids.join(", ")
        )));
    }
    Ok((kept, excluded))
}

/// Endless sequence of case indices: each epoch is a fresh seeded shuffle.
#[derive(Debug, Clone)]
pub struct EpochIterator {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    pub epoch: usize,
}

impl EpochIterator {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut it = Self {
            order: (0..len).collect(),
            pos: len,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
        };
        it.pos = it.order.len();
        it
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        if self.order.is_empty() {
            return batch;
        }
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.order.sort_unstable();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
                self.epoch += 1;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

type ParamGrads = Vec<(String, Vec<f64>)>;

/// Loss and parameter gradients of one case.
pub fn case_gradients(model: &TopoLab, store: &ParamStore, case: &TrainingCase) -> Result<(f64, ParamGrads)> {
    let mut g = Graph::new();
    let features = model.forward(&mut g, store, &case.input)?;
    let loss = model.loss(&mut g, &features, &case.targets)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss of case {} is {value}", case.id)));
    }
    let grads = g.backward(loss)?;
    let out = grads
        .param_grads()
        .into_iter()
        .map(|(n, v)| (n.to_string(), v.to_vec()))
        .collect();
    Ok((value, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iter,lr,loss\n");
    for r in rows {
        let _ = writeln!(s, "{},{:e},{}", r.iter, r.lr, r.loss);
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub state: OptimizerState,
    pub log: Vec<LogRow>,
}

/// Runs `total_iterations` optimizer steps. Each step sums the losses (and
/// gradients) of one batch; per-case gradients may be computed in parallel
/// but are always added in batch order. `checkpoint` is called with the step
/// count every `checkpoint_interval` steps.
pub fn train(
    model: &TopoLab,
    store: ParamStore,
    cases: &[TrainingCase],
    config: &TrainConfig,
    mut checkpoint: impl FnMut(usize, &ParamStore) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if cases.is_empty() {
        return Err(Error::EmptyInput("no training cases".into()));
    }
    let mut store = store;
    store.zero_grads();
    let mut state = OptimizerState::new(&store);
    let mut batches = EpochIterator::new(cases.len(), config.seed);
    let mut log = Vec::with_capacity(config.total_iterations);
    for step in 0..config.total_iterations {
        let batch = batches.next_batch(config.batch_size);
        let results: Vec<Result<(f64, ParamGrads)>> = batch
            .par_iter()
            .map(|&i| case_gradients(model, &store, &cases[i]))
            .collect();
        let mut loss = 0.0;
        for r in results {
            let (l, grads) = r?;
            loss += l;
            store.accumulate_grads(grads.iter().map(|(n, g)| (n.as_str(), g.as_slice())))?;
        }
        let lr = cosine_lr(step, config.total_iterations, config.base_lr);
        adamw_step(&mut store, &mut state, lr, config)?;
        log.push(LogRow { iter: step, lr, loss });
        if step % 100 == 0 || step + 1 == config.total_iterations {
            log::info!("step {step}: lr {lr:.3e}, loss {loss:.4}");
        }
        if config.checkpoint_interval > 0 && (step + 1) % config.checkpoint_interval == 0 {
            checkpoint(step + 1, &store)?;
        }
    }
    Ok(TrainOutcome { store, state, log })
}
