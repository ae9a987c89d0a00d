//! Pairwise-loss training with time-aware negative sampling and Adam.

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctbg::{mix_seed, Ctbg, Interaction, NodeRef};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalConfig, MetricsReport};
use crate::model::{ModelParams, EMBEDDING, OMEGA};
use crate::tape::Gradients;
use crate::tct::ForwardPass;
use crate::tensor::log_sigmoid;
use crate::time_encoding::TimeMode;

/// Samples per gradient work unit. Fixed so results do not depend on the worker count.
const CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Bpr,
    Bce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    /// Weight λ of the squared-norm penalty over parameters touched by a batch.
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Evaluate on the validation split every this many epochs; 0 disables.
    pub valid_every: usize,
    /// Worker threads for batch gradients; 0 uses every available core.
    pub workers: usize,
    /// Restore the parameters of the epoch with the best validation recall at
    /// the first cutoff once training ends.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Bpr,
            learning_rate: 1e-2,
            l2_lambda: 1e-5,
            batch_size: 64,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            valid_every: 1,
            workers: 0,
            keep_best: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and positive");
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return bad("l2_lambda must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decay rates must lie in [0, 1)");
        }
        if self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        Ok(())
    }
}

/// `(u, i_pos, i_neg, t)` with `i_neg` unobserved by `u` before `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSample {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
    pub t: f64,
}

/// `−log σ(r_pos − r_neg) + l2_term`.
pub fn bpr_loss(r_pos: f64, r_neg: f64, l2_term: f64) -> f64 {
    -log_sigmoid(r_pos - r_neg) + l2_term
}

/// `−[log σ(r_pos) + log(1 − σ(r_neg))] + l2_term`.
pub fn bce_loss(r_pos: f64, r_neg: f64, l2_term: f64) -> f64 {
    -(log_sigmoid(r_pos) + log_sigmoid(-r_neg)) + l2_term
}

/// Uniform draw from items `user` has not interacted with before `t`, excluding
/// `pos`. `None` when no such item exists.
pub fn sample_negative<R: Rng>(graph: &Ctbg, user: usize, pos: usize, t: f64, rng: &mut R) -> Result<Option<usize>> {
    let seen: HashSet<usize> = graph
        .neighbors_before(NodeRef::User(user), t)?
        .iter()
        .map(|n| n.id)
        .chain(std::iter::once(pos))
        .collect();
    let n = graph.num_items();
    if seen.len() >= n {
        if (0..n).all(|i| seen.contains(&i)) {
            return Ok(None);
        }
    }
    for _ in 0..64 {
        let j = rng.gen_range(0..n);
        if !seen.contains(&j) {
            return Ok(Some(j));
        }
    }
    let eligible: Vec<usize> = (0..n).filter(|i| !seen.contains(i)).collect();
    Ok(eligible.choose(rng).copied())
}

/// Pairs each edge with a negative; returns the samples and the number skipped
/// because the user had already seen every item.
pub fn attach_negatives(edges: &[Interaction], graph: &Ctbg, seed: u64) -> Result<(Vec<TrainSample>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(edges.len());
    let mut skipped = 0;
    for e in edges {
        match sample_negative(graph, e.user, e.item, e.timestamp, &mut rng)? {
            Some(neg) => samples.push(TrainSample {
                user: e.user,
                pos: e.item,
                neg,
                t: e.timestamp,
            }),
            None => skipped += 1,
        }
    }
    Ok((samples, skipped))
}

/// `batch_size` training edges drawn uniformly with replacement, each with a negative.
pub fn sample_batch(train: &[Interaction], graph: &Ctbg, batch_size: usize, seed: u64) -> Result<(Vec<TrainSample>, usize)> {
    if train.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<Interaction> = (0..batch_size).map(|_| train[rng.gen_range(0..train.len())]).collect();
    attach_negatives(&edges, graph, mix_seed(&[seed, 1]))
}

/// Loss value and gradient of a batch objective.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    /// Mean per-sample ranking loss.
    pub data_loss: f64,
    /// `λ‖Θ‖²` over the touched parameters.
    pub l2_term: f64,
    pub grads: Gradients,
}

impl BatchGradient {
    pub fn objective(&self) -> f64 {
        self.data_loss + self.l2_term
    }
}

fn sample_loss_and_grad(
    pass: &mut ForwardPass<'_>,
    s: &TrainSample,
    loss: LossKind,
    weight: f64,
    grads: &mut Gradients,
    trainable_omega: bool,
) -> Result<f64> {
    pass.reset();
    let pos = pass.score(s.user, s.pos, s.t)?;
    let neg = pass.score(s.user, s.neg, s.t)?;
    let tape = &mut pass.tape;
    let objective = match loss {
        LossKind::Bpr => {
            let flipped = tape.scale(neg, -1.0);
            let diff = tape.add(pos, flipped);
            tape.log_sigmoid(diff)
        }
        LossKind::Bce => {
            let lp = tape.log_sigmoid(pos);
            let flipped = tape.scale(neg, -1.0);
            let ln = tape.log_sigmoid(flipped);
            tape.add(lp, ln)
        }
    };
    // objective is the log-likelihood; the loss is its negation
    let value = -tape.scalar(objective);
    tape.backward(objective, -weight, grads, trainable_omega);
    Ok(value)
}

fn trainable_omega(params: &ModelParams) -> bool {
    params.config.time_mode == TimeMode::Learned
}

/// Gradient of `mean_b loss_b + λ‖Θ_touched‖²` for one batch.
pub fn backward(
    params: &ModelParams,
    graph: &Ctbg,
    batch: &[TrainSample],
    config: &TrainConfig,
    sampler_seed: u64,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    let weight = 1.0 / batch.len() as f64;
    let omega = trainable_omega(params);
    let partials: Vec<Result<(f64, Gradients)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = Gradients::zeros_like(params);
            let mut pass = ForwardPass::new(params, graph, sampler_seed);
            let mut total = 0.0;
            for s in chunk {
                total += sample_loss_and_grad(&mut pass, s, config.loss, weight, &mut grads, omega)?;
            }
            Ok((total, grads))
        })
        .collect();
    let mut grads = Gradients::zeros_like(params);
    let mut total = 0.0;
    for p in partials {
        let (loss, g) = p?;
        total += loss;
        grads.add_scaled(&g, 1.0);
    }
    let l2_term = add_l2(params, &mut grads, config.l2_lambda);
    check_finite(params, &grads)?;
    Ok(BatchGradient {
        data_loss: total * weight,
        l2_term,
        grads,
    })
}

/// Adds `2λθ` for every touched parameter and returns `λ‖θ‖²`.
fn add_l2(params: &ModelParams, grads: &mut Gradients, lambda: f64) -> f64 {
    let mut norm = 0.0;
    let emb = params.tensor(EMBEDDING);
    for (row, g) in grads.embedding_rows.iter_mut() {
        for (gv, v) in g.iter_mut().zip(emb.row(*row)) {
            norm += v * v;
            *gv += 2.0 * lambda * v;
        }
    }
    let omega = trainable_omega(params);
    for k in 1..params.num_tensors() {
        if k == OMEGA && !omega {
            continue;
        }
        let t = params.tensor(k);
        norm += t.squared_norm();
        for (gv, v) in grads.dense[k].data.iter_mut().zip(&t.data) {
            *gv += 2.0 * lambda * v;
        }
    }
    lambda * norm
}

fn check_finite(params: &ModelParams, grads: &Gradients) -> Result<()> {
    if grads.embedding_rows.values().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient(params.tensor_name(EMBEDDING)));
    }
    for (k, g) in grads.dense.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(params.tensor_name(k)));
        }
    }
    Ok(())
}

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, config: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let frozen_omega = !trainable_omega(params);
        let d = params.config.dim;
        for k in 0..params.num_tensors() {
            if k == OMEGA && frozen_omega {
                continue;
            }
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            let theta = &mut params.tensor_mut(k).data;
            for idx in 0..theta.len() {
                let g = if k == EMBEDDING {
                    grads.embedding_rows.get(&(idx / d)).map_or(0.0, |r| r[idx % d])
                } else {
                    grads.dense[k].data[idx]
                };
                m[idx] = self.beta1 * m[idx] + (1.0 - self.beta1) * g;
                v[idx] = self.beta2 * v[idx] + (1.0 - self.beta2) * g * g;
                if m[idx] == 0.0 {
                    continue;
                }
                theta[idx] -= self.learning_rate * (m[idx] / c1) / ((v[idx] / c2).sqrt() + self.epsilon);
            }
        }
    }
}

/// Graphs and edges `fit` works from.
#[derive(Clone, Copy)]
pub struct TrainingData<'a> {
    /// Graph over training edges only; supplies neighbors and negatives.
    pub train_graph: &'a Ctbg,
    pub train: &'a [Interaction],
    /// Graph visible when scoring validation interactions (train + valid edges).
    pub valid_graph: Option<&'a Ctbg>,
    pub valid: &'a [Interaction],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_objective: f64,
    pub skipped: usize,
    pub valid: Option<MetricsReport>,
    pub wall_seconds: f64,
}

impl EpochLog {
    /// `epoch, mean_loss, recall@10, ndcg@10, mrr, wall_seconds`; missing metrics print as `nan`.
    pub fn to_record(&self, delimiter: char) -> String {
        let (r, n, m) = match &self.valid {
            Some(v) => (v.recall(10).unwrap_or(f64::NAN), v.ndcg(10).unwrap_or(f64::NAN), v.mrr),
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        let d = delimiter;
        format!("{}{d}{:.6}{d}{:.6}{d}{:.6}{d}{:.6}{d}{:.3}", self.epoch, self.mean_loss, r, n, m, self.wall_seconds)
    }
}

/// Seeds that drive training randomness.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSeeds {
    pub sampler: u64,
    pub negatives: u64,
}

/// Trains `params` in place; returns the per-epoch log.
pub fn fit(
    params: &mut ModelParams,
    data: TrainingData<'_>,
    config: &TrainConfig,
    eval: &EvalConfig,
    seeds: TrainSeeds,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyInput);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let mut adam = Adam::new(params, config);
    let mut logs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, ModelParams)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seeds.negatives, epoch as u64])));
        let sampler_seed = mix_seed(&[seeds.sampler, epoch as u64]);
        let (mut loss_sum, mut objective_sum, mut count, mut skipped) = (0.0, 0.0, 0usize, 0usize);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let edges: Vec<Interaction> = batch.iter().map(|&k| data.train[k]).collect();
            let neg_seed = mix_seed(&[seeds.negatives, epoch as u64, b as u64]);
            let (samples, skip) = attach_negatives(&edges, data.train_graph, neg_seed)?;
            skipped += skip;
            if samples.is_empty() {
                continue;
            }
            let bg = pool.install(|| backward(params, data.train_graph, &samples, config, sampler_seed))?;
            loss_sum += bg.data_loss * samples.len() as f64;
            objective_sum += bg.objective() * samples.len() as f64;
            count += samples.len();
            adam.step(params, &bg.grads);
        }
        let mean_loss = loss_sum / count.max(1) as f64;
        if !mean_loss.is_finite() || !params.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean_loss });
        }
        let valid = match data.valid_graph {
            Some(g) if config.valid_every > 0 && epoch % config.valid_every == 0 && !data.valid.is_empty() => {
                Some(pool.install(|| evaluate(params, g, data.valid, eval))?)
            }
            _ => None,
        };
        if config.keep_best {
            if let Some(v) = &valid {
                let cut = eval.cutoffs.first().copied().unwrap_or(10);
                let r = v.recall(cut).unwrap_or(v.mrr);
                if best.as_ref().is_none_or(|(b, _)| r > *b) {
                    best = Some((r, params.clone()));
                }
            }
        }
        let log = EpochLog {
            epoch,
            mean_loss,
            mean_objective: objective_sum / count.max(1) as f64,
            skipped,
            valid,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    if let Some((_, p)) = best {
        *params = p;
    }
    Ok(logs)
}
