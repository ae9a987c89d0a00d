//! Temporal collaborative transformer layer.
//!
//! The free functions here ([`construct_query_info`], [`attention_weights`],
//! [`propagate`], [`aggregate`]) are plain evaluations of the layer's pieces.
//! [`ForwardPass`] composes the same computation on a [`Tape`] so it can be
//! differentiated, expanding neighbors recursively through the layer stack.

use std::collections::HashMap;

use crate::ctbg::{mix_seed, sample_pool_indices, Ctbg, NodeRef};
use crate::error::{Error, Result};
use crate::model::{Aggregator, ModelParams, POSITION};
use crate::tape::{Tape, Var};
use crate::tensor::{dot, softmax, Tensor};
use crate::time_encoding::{TimeEncoder, TimeMode};

/// Per-head projections `W_q, W_k, W_v`, each `(d/H) × (d + d_time)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    pub ffn_w1: Tensor,
    pub ffn_b1: Vec<f64>,
    pub ffn_w2: Tensor,
    pub ffn_b2: Vec<f64>,
}

/// `[node_embedding ‖ Φ(t)]`.
pub fn construct_query_info(node_embedding: &[f64], t: f64, enc: &TimeEncoder) -> Vec<f64> {
    let mut info = node_embedding.to_vec();
    info.extend(enc.encode(t));
    info
}

/// One `[e_s ‖ Φ(t_s)]` row per neighbor.
pub fn construct_neighbor_info(
    neighbor_embeddings: &[Vec<f64>],
    neighbor_times: &[f64],
    enc: &TimeEncoder,
) -> Result<Vec<Vec<f64>>> {
    if neighbor_embeddings.len() != neighbor_times.len() {
        return Err(Error::DimensionMismatch {
            expected: neighbor_embeddings.len(),
            got: neighbor_times.len(),
            context: "neighbor times",
        });
    }
    Ok(neighbor_embeddings
        .iter()
        .zip(neighbor_times)
        .map(|(e, &t)| construct_query_info(e, t, enc))
        .collect())
}

fn check_cols(m: &Tensor, len: usize, context: &'static str) -> Result<()> {
    if m.cols != len {
        return Err(Error::DimensionMismatch {
            expected: m.cols,
            got: len,
            context,
        });
    }
    Ok(())
}

/// Unnormalized logits `scale · (W_k k_s)ᵀ (W_q q)`.
pub fn attention_logits(query_info: &[f64], keys: &[Vec<f64>], layer: &LayerParams, head: usize, scale: f64) -> Result<Vec<f64>> {
    let hp = &layer.heads[head];
    check_cols(&hp.query, query_info.len(), "query info")?;
    let q = hp.query.matvec(query_info);
    keys.iter()
        .map(|k| {
            check_cols(&hp.key, k.len(), "key info")?;
            Ok(scale * dot(&hp.key.matvec(k), &q))
        })
        .collect()
}

/// Softmax of the logits scaled by `1/sqrt(d + d_time)`.
pub fn attention_weights(query_info: &[f64], keys: &[Vec<f64>], layer: &LayerParams, head: usize) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(Error::EmptyNeighbors);
    }
    let scale = 1.0 / (query_info.len() as f64).sqrt();
    Ok(softmax(&attention_logits(query_info, keys, layer, head, scale)?))
}

/// `Σ_s w_s · W_v v_s` for one head.
pub fn propagate(weights: &[f64], values: &[Vec<f64>], layer: &LayerParams, head: usize) -> Result<Vec<f64>> {
    if weights.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: values.len(),
            got: weights.len(),
            context: "attention weights",
        });
    }
    let wv = &layer.heads[head].value;
    let mut out = vec![0.0; wv.rows];
    for (w, v) in weights.iter().zip(values) {
        check_cols(wv, v.len(), "value info")?;
        for (o, x) in out.iter_mut().zip(wv.matvec(v)) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// `W₂ · relu(W₁ [summary ‖ query_info] + b₁) + b₂`.
pub fn aggregate(neighbor_summary: &[f64], query_info: &[f64], layer: &LayerParams) -> Result<Vec<f64>> {
    let mut x = neighbor_summary.to_vec();
    x.extend_from_slice(query_info);
    check_cols(&layer.ffn_w1, x.len(), "aggregation input")?;
    let hidden: Vec<f64> = layer
        .ffn_w1
        .matvec(&x)
        .iter()
        .zip(&layer.ffn_b1)
        .map(|(h, b)| (h + b).max(0.0))
        .collect();
    Ok(layer.ffn_w2.matvec(&hidden).iter().zip(&layer.ffn_b2).map(|(o, b)| o + b).collect())
}

/// Attention weights observed while computing one temporal embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub node: NodeRef,
    pub time: f64,
    pub depth: usize,
    pub neighbor_ids: Vec<usize>,
    pub neighbor_times: Vec<f64>,
    /// `weights[head][s]`.
    pub weights: Vec<Vec<f64>>,
}

/// Counters collected during a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardStats {
    /// Neighbors drawn from temporal pools. Each `(node, t)` pool is sampled
    /// once per pass and reused by every layer and head.
    pub neighbor_evals: usize,
    /// Sampled neighbors whose timestamp was not strictly before the query time.
    pub causality_violations: usize,
}

/// A differentiable evaluation context over one parameter set and graph.
///
/// Temporal embeddings computed through the same pass are memoized by
/// `(node, t, depth)`, so a user shared between a positive and a negative
/// score is only expanded once and receives both gradient contributions.
pub struct ForwardPass<'a> {
    pub tape: Tape<'a>,
    graph: &'a Ctbg,
    seed: u64,
    memo: HashMap<(NodeRef, u64, usize), Var>,
    samples: HashMap<(NodeRef, u64), Vec<usize>>,
    pub stats: ForwardStats,
    record_attention: bool,
    pub attention: Vec<AttentionRecord>,
}

impl<'a> ForwardPass<'a> {
    pub fn new(params: &'a ModelParams, graph: &'a Ctbg, seed: u64) -> Self {
        ForwardPass {
            tape: Tape::new(params),
            graph,
            seed,
            memo: HashMap::new(),
            samples: HashMap::new(),
            stats: ForwardStats::default(),
            record_attention: false,
            attention: Vec::new(),
        }
    }

    pub fn with_attention_records(mut self) -> Self {
        self.record_attention = true;
        self
    }

    pub fn params(&self) -> &'a ModelParams {
        self.tape.params()
    }

    pub fn graph(&self) -> &'a Ctbg {
        self.graph
    }

    /// Drops the tape contents and the memo, keeping allocations.
    pub fn reset(&mut self) {
        self.tape.clear();
        self.memo.clear();
        self.samples.clear();
        self.attention.clear();
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.memo.clear();
        self.samples.clear();
    }

    /// Embedding after all configured layers.
    pub fn temporal_embedding(&mut self, node: NodeRef, t: f64) -> Result<Var> {
        let depth = self.params().config.layers;
        self.embed(node, t, depth)
    }

    /// Differentiable `r(u, i, t)`.
    pub fn score(&mut self, user: usize, item: usize, t: f64) -> Result<Var> {
        let u = self.temporal_embedding(NodeRef::User(user), t)?;
        let i = self.temporal_embedding(NodeRef::Item(item), t)?;
        Ok(self.tape.dot(u, i))
    }

    /// `e^{(depth)}_node(t)`; depth 0 reads the long-term table.
    pub fn embed(&mut self, node: NodeRef, t: f64, depth: usize) -> Result<Var> {
        let params = self.params();
        let row = params.embedding_row(node)?;
        if depth == 0 {
            return Ok(self.tape.embedding_row(row));
        }
        let key = (node, t.to_bits(), depth);
        if let Some(v) = self.memo.get(&key) {
            return Ok(*v);
        }
        let out = self.layer_forward(node, t, depth)?;
        self.memo.insert(key, out);
        Ok(out)
    }

    fn node_code(node: NodeRef) -> u64 {
        match node {
            NodeRef::User(u) => u as u64,
            NodeRef::Item(i) => (1 << 63) | i as u64,
        }
    }

    fn sample(&mut self, node: NodeRef, t: f64, pool_len: usize) -> Vec<usize> {
        let key = (node, t.to_bits());
        if let Some(p) = self.samples.get(&key) {
            return p.clone();
        }
        let seed = mix_seed(&[self.seed, Self::node_code(node), t.to_bits()]);
        let picks = sample_pool_indices(pool_len, self.params().config.neighbors, seed);
        self.stats.neighbor_evals += picks.len();
        self.samples.insert(key, picks.clone());
        picks
    }

    /// Time vector attached to `node`'s information at `t`, seen from a query at
    /// `query_t`. `rank` is 0 for the query itself and `1 + k` for the neighbor
    /// `k` places before the most recent.
    fn time_vector(&mut self, node: NodeRef, t: f64, query_t: f64, rank: usize) -> Var {
        let cfg = &self.params().config;
        let enabled = if node.is_user() { cfg.user_time } else { cfg.item_time };
        if !enabled {
            return self.tape.zeros(cfg.time_dim);
        }
        match cfg.time_mode {
            TimeMode::Learned | TimeMode::Fixed if cfg.relative_time => self.tape.time_encode(query_t - t),
            TimeMode::Learned | TimeMode::Fixed => self.tape.time_encode(t),
            TimeMode::Empty => self.tape.zeros(cfg.time_dim),
            TimeMode::Position => self.tape.param_row(POSITION, rank.min(cfg.max_positions - 1)),
        }
    }

    fn info(&mut self, node: NodeRef, t: f64, query_t: f64, depth: usize, rank: usize) -> Result<Var> {
        let e = self.embed(node, t, depth)?;
        let tv = self.time_vector(node, t, query_t, rank);
        Ok(self.tape.concat(e, tv))
    }

    /// One temporal layer at `depth ≥ 1` for `node` at time `t`.
    pub fn layer_forward(&mut self, node: NodeRef, t: f64, depth: usize) -> Result<Var> {
        let params = self.params();
        let cfg = &params.config;
        assert!(depth >= 1 && depth <= cfg.layers, "depth {depth} outside 1..={}", cfg.layers);
        let layer = depth - 1;
        let query_info = self.info(node, t, t, depth - 1, 0)?;

        let pool = self.graph.neighbors_before(node, t)?;
        let picks = self.sample(node, t, pool.len());

        let mut infos = Vec::with_capacity(picks.len());
        for &k in &picks {
            let nb = pool[k];
            if nb.timestamp >= t {
                self.stats.causality_violations += 1;
            }
            let rank = 1 + (pool.len() - 1 - k);
            infos.push(self.info(node.counterpart(nb.id), nb.timestamp, t, depth - 1, rank)?);
        }

        let summary = if infos.is_empty() {
            self.tape.zeros(cfg.dim)
        } else {
            match cfg.aggregator {
                Aggregator::Attention | Aggregator::Mean => {
                    let mut head_weights = Vec::with_capacity(cfg.heads);
                    let mut out: Option<Var> = None;
                    for h in 0..cfg.heads {
                        let weights = if cfg.aggregator == Aggregator::Attention {
                            let q = self.tape.matvec(params.query(layer, h), query_info);
                            let inv = 1.0 / (cfg.info_dim() as f64).sqrt();
                            let logits: Vec<Var> = infos
                                .iter()
                                .map(|&x| {
                                    let k = self.tape.matvec(params.key(layer, h), x);
                                    let l = self.tape.dot(k, q);
                                    self.tape.scale(l, inv)
                                })
                                .collect();
                            let stacked = self.tape.stack(&logits);
                            self.tape.softmax(stacked)
                        } else {
                            let uniform = vec![1.0 / infos.len() as f64; infos.len()];
                            self.tape.constant(&uniform)
                        };
                        let values: Vec<Var> = infos.iter().map(|&x| self.tape.matvec(params.value(layer, h), x)).collect();
                        let head_out = self.tape.weighted_sum(weights, &values);
                        if self.record_attention {
                            head_weights.push(self.tape.value(weights).to_vec());
                        }
                        out = Some(match out {
                            None => head_out,
                            Some(prev) => self.tape.concat(prev, head_out),
                        });
                    }
                    if self.record_attention {
                        self.attention.push(AttentionRecord {
                            node,
                            time: t,
                            depth,
                            neighbor_ids: picks.iter().map(|&k| pool[k].id).collect(),
                            neighbor_times: picks.iter().map(|&k| pool[k].timestamp).collect(),
                            weights: head_weights,
                        });
                    }
                    out.expect("at least one head")
                }
                Aggregator::Lstm => self.lstm_summary(layer, &infos),
            }
        };

        let [w1, b1, w2, b2] = params.ffn(layer);
        let x = self.tape.concat(summary, query_info);
        let pre = self.tape.matvec(w1, x);
        let bias1 = self.tape.param_row(b1, 0);
        let pre = self.tape.add(pre, bias1);
        let hidden = self.tape.relu(pre);
        let out = self.tape.matvec(w2, hidden);
        let bias2 = self.tape.param_row(b2, 0);
        Ok(self.tape.add(out, bias2))
    }

    /// Standard LSTM (input, forget, cell, output gate order) over the
    /// time-sorted neighbor information; returns the last hidden state.
    fn lstm_summary(&mut self, layer: usize, infos: &[Var]) -> Var {
        let params = self.params();
        let d = params.config.dim;
        let [wx, wh, b] = params.lstm(layer);
        let mut h = self.tape.zeros(d);
        let mut c = self.tape.zeros(d);
        for &x in infos {
            let gx = self.tape.matvec(wx, x);
            let gh = self.tape.matvec(wh, h);
            let bias = self.tape.param_row(b, 0);
            let pre = self.tape.add(gx, gh);
            let pre = self.tape.add(pre, bias);
            let i = self.tape.slice(pre, 0, d);
            let f = self.tape.slice(pre, d, d);
            let g = self.tape.slice(pre, 2 * d, d);
            let o = self.tape.slice(pre, 3 * d, d);
            let i = self.tape.sigmoid(i);
            let f = self.tape.sigmoid(f);
            let g = self.tape.tanh(g);
            let o = self.tape.sigmoid(o);
            let keep = self.tape.mul(f, c);
            let write = self.tape.mul(i, g);
            c = self.tape.add(keep, write);
            let tc = self.tape.tanh(c);
            h = self.tape.mul(o, tc);
        }
        h
    }
}
