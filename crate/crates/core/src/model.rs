//! Trainable parameters, the stacked temporal layers, scoring and ranking.
//!
//! All parameters live in one ordered list of tensors so that the optimizer,
//! the gradient checks and the checkpoint writer can treat them uniformly:
//!
//! | index | tensor |
//! |-------|--------|
//! | 0 | long-term embedding table, users first then items (`(U+I) × d`) |
//! | 1 | time frequencies (`1 × d_time/2`) |
//! | 2 | recency-rank time table (`max_positions × d_time`, empty unless position mode) |
//! | 3.. | per layer: `H` query, `H` key, `H` value projections, FFN `w1, b1, w2, b2`, LSTM `wx, wh, b` |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctbg::{Ctbg, NodeRef};
use crate::error::{Error, Result};
use crate::tct::{AttentionRecord, ForwardPass, HeadParams, LayerParams};
use crate::tensor::{dot, Tensor};
use crate::time_encoding::{self, TimeEncoder, TimeMode};

pub const EMBEDDING: usize = 0;
pub const OMEGA: usize = 1;
pub const POSITION: usize = 2;
const LAYER_BASE: usize = 3;

/// Neighbor summarizer used inside each temporal layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    /// Temporal collaborative attention.
    #[default]
    Attention,
    /// Uniform weights over the sampled neighbors.
    Mean,
    /// Recurrent summary over time-sorted neighbor information.
    Lstm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width `d`.
    pub dim: usize,
    /// Time vector width (even).
    pub time_dim: usize,
    /// Number of stacked temporal layers `L`; 0 scores with long-term embeddings only.
    pub layers: usize,
    /// Sampled neighbors per query `S`.
    pub neighbors: usize,
    /// Attention heads `H`; must divide `dim`.
    pub heads: usize,
    /// Hidden width of the aggregation FFN; `2·dim` when unset.
    pub ffn_dim: Option<usize>,
    pub aggregator: Aggregator,
    pub time_mode: TimeMode,
    /// Highest initial frequency, in normalized time units.
    pub max_frequency: f64,
    /// Rows of the recency-rank table in position mode.
    pub max_positions: usize,
    /// Attach time vectors to user information vectors.
    pub user_time: bool,
    /// Attach time vectors to item information vectors.
    pub item_time: bool,
    /// Encode times relative to the query: the query carries `Φ(0)` and a
    /// neighbor seen at `t_s` carries `Φ(t - t_s)`. The kernel between the two
    /// is unchanged, but nothing downstream sees the absolute clock.
    pub relative_time: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 16,
            time_dim: 8,
            layers: 1,
            neighbors: 10,
            heads: 1,
            ffn_dim: None,
            aggregator: Aggregator::Attention,
            time_mode: TimeMode::Learned,
            max_frequency: 100.0,
            max_positions: 64,
            user_time: true,
            item_time: true,
            relative_time: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return bad(format!("time_dim must be even and positive, got {}", self.time_dim));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("heads ({}) must divide dim ({})", self.heads, self.dim));
        }
        if self.neighbors == 0 {
            return bad("neighbors must be at least 1".into());
        }
        if self.ffn_dim == Some(0) {
            return bad("ffn_dim must be positive".into());
        }
        if !(self.max_frequency.is_finite() && self.max_frequency > 0.0) {
            return bad("max_frequency must be finite and positive".into());
        }
        if self.time_mode == TimeMode::Position && self.max_positions == 0 {
            return bad("position mode needs max_positions > 0".into());
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_dim.unwrap_or(2 * self.dim)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn info_dim(&self) -> usize {
        self.dim + self.time_dim
    }

    fn layer_stride(&self) -> usize {
        3 * self.heads + 7
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub num_users: usize,
    pub num_items: usize,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Glorot-uniform matrices and embeddings, zero biases, geometric frequency ladder.
    pub fn init(config: ModelConfig, num_users: usize, num_items: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_users == 0 || num_items == 0 {
            return Err(Error::InvalidConfig("need at least one user and one item".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let (d, dt, info) = (c.dim, c.time_dim, c.info_dim());
        let mut tensors = vec![
            Tensor::glorot(num_users + num_items, d, &mut rng),
            Tensor::vector(time_encoding::init_frequencies(dt / 2, c.max_frequency)),
            if c.time_mode == TimeMode::Position {
                Tensor::glorot(c.max_positions, dt, &mut rng)
            } else {
                Tensor::zeros(0, dt)
            },
        ];
        for _ in 0..c.layers {
            for _ in 0..3 * c.heads {
                tensors.push(Tensor::glorot(c.head_dim(), info, &mut rng));
            }
            let h = c.ffn_hidden();
            tensors.push(Tensor::glorot(h, d + info, &mut rng));
            tensors.push(Tensor::zeros(1, h));
            tensors.push(Tensor::glorot(d, h, &mut rng));
            tensors.push(Tensor::zeros(1, d));
            if c.aggregator == Aggregator::Lstm {
                tensors.push(Tensor::glorot(4 * d, info, &mut rng));
                tensors.push(Tensor::glorot(4 * d, d, &mut rng));
                tensors.push(Tensor::zeros(1, 4 * d));
            } else {
                tensors.push(Tensor::zeros(0, info));
                tensors.push(Tensor::zeros(0, d));
                tensors.push(Tensor::zeros(1, 0));
            }
        }
        Ok(ModelParams {
            config,
            num_users,
            num_items,
            tensors,
        })
    }

    /// Reassembles parameters from tensors in declared order, checking every shape.
    pub fn from_tensors(config: ModelConfig, num_users: usize, num_items: usize, tensors: Vec<Tensor>) -> Result<Self> {
        let template = ModelParams::init(config, num_users, num_items, 0)?;
        if template.tensors.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                template.tensors.len(),
                tensors.len()
            )));
        }
        for (k, (a, b)) in template.tensors.iter().zip(&tensors).enumerate() {
            if (a.rows, a.cols) != (b.rows, b.cols) || b.data.len() != b.rows * b.cols {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {}x{}, expected {}x{}",
                    template.tensor_name(k),
                    b.rows,
                    b.cols,
                    a.rows,
                    a.cols
                )));
            }
        }
        Ok(ModelParams { tensors, ..template })
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensor(&self, k: usize) -> &Tensor {
        &self.tensors[k]
    }

    pub fn tensor_mut(&mut self, k: usize) -> &mut Tensor {
        &mut self.tensors[k]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    fn layer_base(&self, layer: usize) -> usize {
        assert!(layer < self.config.layers, "layer {layer} out of range");
        LAYER_BASE + layer * self.config.layer_stride()
    }

    pub fn query(&self, layer: usize, head: usize) -> usize {
        self.layer_base(layer) + head
    }

    pub fn key(&self, layer: usize, head: usize) -> usize {
        self.layer_base(layer) + self.config.heads + head
    }

    pub fn value(&self, layer: usize, head: usize) -> usize {
        self.layer_base(layer) + 2 * self.config.heads + head
    }

    /// Indices of FFN `(w1, b1, w2, b2)`.
    pub fn ffn(&self, layer: usize) -> [usize; 4] {
        let b = self.layer_base(layer) + 3 * self.config.heads;
        [b, b + 1, b + 2, b + 3]
    }

    /// Indices of LSTM `(wx, wh, b)`.
    pub fn lstm(&self, layer: usize) -> [usize; 3] {
        let b = self.layer_base(layer) + 3 * self.config.heads + 4;
        [b, b + 1, b + 2]
    }

    pub fn tensor_name(&self, k: usize) -> String {
        match k {
            EMBEDDING => "embedding".into(),
            OMEGA => "omega".into(),
            POSITION => "position".into(),
            _ => {
                let h = self.config.heads;
                let (layer, r) = ((k - LAYER_BASE) / self.config.layer_stride(), (k - LAYER_BASE) % self.config.layer_stride());
                let what = match r {
                    r if r < h => format!("w_query[{r}]"),
                    r if r < 2 * h => format!("w_key[{}]", r - h),
                    r if r < 3 * h => format!("w_value[{}]", r - 2 * h),
                    r => ["ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "lstm_wx", "lstm_wh", "lstm_b"][r - 3 * h].to_string(),
                };
                format!("layer{layer}.{what}")
            }
        }
    }

    pub fn embedding_row(&self, node: NodeRef) -> Result<usize> {
        match node {
            NodeRef::User(u) if u < self.num_users => Ok(u),
            NodeRef::Item(i) if i < self.num_items => Ok(self.num_users + i),
            _ => Err(Error::UnknownNode(node)),
        }
    }

    pub fn time_encoder(&self) -> TimeEncoder {
        TimeEncoder {
            omega: self.tensors[OMEGA].data.clone(),
            trainable: self.config.time_mode == TimeMode::Learned,
        }
    }

    /// Owned copy of layer `layer`'s projections and FFN.
    pub fn layer_params(&self, layer: usize) -> LayerParams {
        let heads = (0..self.config.heads)
            .map(|h| HeadParams {
                query: self.tensors[self.query(layer, h)].clone(),
                key: self.tensors[self.key(layer, h)].clone(),
                value: self.tensors[self.value(layer, h)].clone(),
            })
            .collect();
        let [w1, b1, w2, b2] = self.ffn(layer);
        LayerParams {
            heads,
            ffn_w1: self.tensors[w1].clone(),
            ffn_b1: self.tensors[b1].data.clone(),
            ffn_w2: self.tensors[w2].clone(),
            ffn_b2: self.tensors[b2].data.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Temporal embedding of `node` at time `t` from the top layer.
pub fn temporal_embedding(params: &ModelParams, graph: &Ctbg, node: NodeRef, t: f64, seed: u64) -> Result<Vec<f64>> {
    let mut pass = ForwardPass::new(params, graph, seed);
    let v = pass.temporal_embedding(node, t)?;
    Ok(pass.tape.value(v).to_vec())
}

/// Attention weights used by the top layer when embedding `node` at `t`.
pub fn top_attention(params: &ModelParams, graph: &Ctbg, node: NodeRef, t: f64, seed: u64) -> Result<Option<AttentionRecord>> {
    let mut pass = ForwardPass::new(params, graph, seed).with_attention_records();
    pass.temporal_embedding(node, t)?;
    let depth = params.config.layers;
    Ok(pass.attention.into_iter().find(|r| r.node == node && r.depth == depth && r.time == t))
}

/// `r(u, i, t)`: dot product of the two top-layer temporal embeddings.
pub fn score(params: &ModelParams, graph: &Ctbg, user: usize, item: usize, t: f64, seed: u64) -> Result<f64> {
    let mut pass = ForwardPass::new(params, graph, seed);
    let u = pass.temporal_embedding(NodeRef::User(user), t)?;
    let i = pass.temporal_embedding(NodeRef::Item(item), t)?;
    Ok(dot(pass.tape.value(u), pass.tape.value(i)))
}

/// Scores every candidate for `user` at `t` and returns them best first.
pub fn rank(
    params: &ModelParams,
    graph: &Ctbg,
    user: usize,
    t: f64,
    candidates: &[usize],
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let scores = score_candidates(params, graph, user, t, candidates, seed)?;
    Ok(rank_by_scores(candidates.iter().copied().zip(scores).collect()))
}

/// Scores of `candidates` for `user` at `t`, in input order.
pub fn score_candidates(
    params: &ModelParams,
    graph: &Ctbg,
    user: usize,
    t: f64,
    candidates: &[usize],
    seed: u64,
) -> Result<Vec<f64>> {
    let mut pass = ForwardPass::new(params, graph, seed);
    let u = pass.temporal_embedding(NodeRef::User(user), t)?;
    let user_vec = pass.tape.value(u).to_vec();
    candidates
        .iter()
        .map(|&item| {
            let v = pass.temporal_embedding(NodeRef::Item(item), t)?;
            Ok(dot(&user_vec, pass.tape.value(v)))
        })
        .collect()
}

/// Sorts descending by score; equal scores fall back to ascending item id.
pub fn rank_by_scores(mut scored: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctbg::Interaction;

    fn tiny() -> ModelConfig {
        ModelConfig {
            dim: 8,
            time_dim: 4,
            neighbors: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(tiny(), 10, 5, 42).unwrap();
        let b = ModelParams::init(tiny(), 10, 5, 42).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(tiny(), 10, 5, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_shapes() {
        let p = ModelParams::init(tiny(), 10, 5, 1).unwrap();
        let e = p.tensor(EMBEDDING);
        assert_eq!((e.rows, e.cols), (15, 8));
        assert_eq!(p.tensor(OMEGA).cols, 2);
        assert_eq!(p.tensor(p.query(0, 0)).rows, 8);
        assert_eq!(p.tensor(p.query(0, 0)).cols, 12);
        let [w1, b1, w2, b2] = p.ffn(0);
        assert_eq!((p.tensor(w1).rows, p.tensor(w1).cols), (16, 20));
        assert_eq!(p.tensor(b1).cols, 16);
        assert_eq!((p.tensor(w2).rows, p.tensor(w2).cols), (8, 16));
        assert_eq!(p.tensor(b2).cols, 8);
        assert_eq!(p.tensor_name(w2), "layer0.ffn_w2");
        assert_eq!(p.tensor_name(p.key(0, 0)), "layer0.w_key[0]");
    }

    #[test]
    fn init_statistics() {
        let cfg = ModelConfig {
            dim: 16,
            ..tiny()
        };
        let p = ModelParams::init(cfg, 700, 300, 9).unwrap();
        let e = &p.tensor(EMBEDDING).data;
        assert!(e.len() >= 10_000);
        let a = (6.0 / (1000.0 + 16.0) as f64).sqrt();
        assert!(e.iter().all(|v| v.abs() < a));
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        // uniform(-a, a) has sd a/sqrt(3); the sample mean has sd a/sqrt(3n)
        let sigma = a / (3.0 * e.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean} vs 3σ {}", 3.0 * sigma);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            ModelConfig { heads: 3, ..tiny() },
            ModelConfig { time_dim: 3, ..tiny() },
            ModelConfig { neighbors: 0, ..tiny() },
            ModelConfig { dim: 0, ..tiny() },
        ];
        for cfg in bad {
            assert!(ModelParams::init(cfg, 2, 2, 0).is_err());
        }
        assert!(ModelParams::init(tiny(), 0, 2, 0).is_err());
    }

    #[test]
    fn rank_sorts_by_score_then_id() {
        let ranked = rank_by_scores(vec![(0, 0.1), (1, 0.9), (2, 0.5)]);
        assert_eq!(ranked.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 2, 0]);
        let ties = rank_by_scores(vec![(7, 0.5), (3, 0.5), (5, 0.9)]);
        assert_eq!(ties.iter().map(|r| r.0).collect::<Vec<_>>(), vec![5, 3, 7]);
    }

    #[test]
    fn stubbed_unit_embeddings_score() {
        let cfg = ModelConfig { layers: 0, dim: 2, time_dim: 2, ..ModelConfig::default() };
        let mut p = ModelParams::init(cfg, 1, 2, 0).unwrap();
        let g = Ctbg::build(&[Interaction::new(0, 0, 0.1)], 1, 2).unwrap();
        p.tensor_mut(EMBEDDING).data = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        assert_eq!(score(&p, &g, 0, 0, 0.5, 0).unwrap(), 1.0);
        assert_eq!(score(&p, &g, 0, 1, 0.5, 0).unwrap(), 0.0);
        let one = rank(&p, &g, 0, 0.5, &[1], 0).unwrap();
        assert_eq!(one, vec![(1, 0.0)]);
        assert!(matches!(rank(&p, &g, 0, 0.5, &[], 0), Err(Error::EmptyCandidates)));
        assert!(matches!(score(&p, &g, 4, 0, 0.5, 0), Err(Error::UnknownNode(_))));
    }
}
