//! Continuous-time ranking evaluation: per-interaction candidate sets, Recall@N,
//! NDCG@N and MRR, plus a popularity yardstick.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctbg::{mix_seed, Ctbg, Interaction, NodeRef};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tct::ForwardPass;
use crate::tensor::{dot, pairwise_sum};

/// Which items compete with the ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalMode {
    /// Every item the user has not interacted with before `t`, plus the truth.
    #[default]
    Full,
    /// The truth plus this many negatives drawn from the full-mode set.
    Sampled(usize),
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::Full => write!(f, "full"),
            EvalMode::Sampled(k) => write!(f, "sampled:{k}"),
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(EvalMode::Full),
            other => other
                .strip_prefix("sampled:")
                .and_then(|k| k.parse().ok())
                .map(EvalMode::Sampled)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown eval mode `{other}` (full | sampled:K)"))),
        }
    }
}

impl Serialize for EvalMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for EvalMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    /// Cutoffs N for Recall@N and NDCG@N.
    pub cutoffs: Vec<usize>,
    /// Neighbor sampling seed used while scoring.
    #[serde(skip)]
    pub sampler_seed: u64,
    /// Seed for sampled-mode negatives, mixed with `(u, t)` per interaction.
    #[serde(skip)]
    pub negatives_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::Full,
            cutoffs: vec![10, 20],
            sampler_seed: 0,
            negatives_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub n_evaluated: usize,
}

impl MetricsReport {
    pub fn recall(&self, n: usize) -> Option<f64> {
        self.recall_at.get(&n).copied()
    }

    pub fn ndcg(&self, n: usize) -> Option<f64> {
        self.ndcg_at.get(&n).copied()
    }

    pub fn header(&self, delimiter: char) -> String {
        let mut cols: Vec<String> = self.recall_at.keys().map(|n| format!("recall@{n}")).collect();
        cols.extend(self.ndcg_at.keys().map(|n| format!("ndcg@{n}")));
        cols.push("mrr".into());
        cols.push("n".into());
        cols.join(&delimiter.to_string())
    }

    /// Single delimiter-separated line in [`MetricsReport::header`] order.
    pub fn to_record(&self, delimiter: char) -> String {
        let mut cols: Vec<String> = self.recall_at.values().map(|v| format!("{v:.6}")).collect();
        cols.extend(self.ndcg_at.values().map(|v| format!("{v:.6}")));
        cols.push(format!("{:.6}", self.mrr));
        cols.push(self.n_evaluated.to_string());
        cols.join(&delimiter.to_string())
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12}{:>10}\n", "metric", "value");
        for (n, v) in &self.recall_at {
            out += &format!("{:<12}{:>10.4}\n", format!("Recall@{n}"), v);
        }
        for (n, v) in &self.ndcg_at {
            out += &format!("{:<12}{:>10.4}\n", format!("NDCG@{n}"), v);
        }
        out += &format!("{:<12}{:>10.4}\n", "MRR", self.mrr);
        out += &format!("{:<12}{:>10}\n", "evaluated", self.n_evaluated);
        out
    }
}

/// Metrics of one ranked interaction.
#[derive(Clone, Debug, PartialEq)]
pub struct RankMetrics {
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub reciprocal_rank: f64,
}

/// Hit indicator, `1/log₂(rank+1)` inside the cutoff, and `1/rank`, for a 1-based rank.
pub fn metrics_for_rank(rank: usize, cutoffs: &[usize]) -> RankMetrics {
    assert!(rank >= 1, "ranks are 1-based");
    RankMetrics {
        recall: cutoffs.iter().map(|&n| if rank <= n { 1.0 } else { 0.0 }).collect(),
        ndcg: cutoffs
            .iter()
            .map(|&n| if rank <= n { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 })
            .collect(),
        reciprocal_rank: 1.0 / rank as f64,
    }
}

/// 1-based position of `truth` under descending score with ascending-id ties.
pub fn truth_rank(candidates: &[usize], scores: &[f64], truth: usize) -> usize {
    let at = candidates.iter().position(|&c| c == truth).expect("truth among candidates");
    let s = scores[at];
    1 + candidates
        .iter()
        .zip(scores)
        .filter(|(&c, &x)| c != truth && (x > s || (x == s && c < truth)))
        .count()
}

/// Candidate items for predicting `truth` for `user` at `t`, ascending by id.
pub fn candidate_set(graph: &Ctbg, user: usize, t: f64, truth: usize, mode: EvalMode, seed: u64) -> Result<Vec<usize>> {
    let seen: HashSet<usize> = graph.neighbors_before(NodeRef::User(user), t)?.iter().map(|n| n.id).collect();
    let negatives: Vec<usize> = (0..graph.num_items()).filter(|i| *i != truth && !seen.contains(i)).collect();
    let mut out = match mode {
        EvalMode::Full => negatives,
        EvalMode::Sampled(k) if k >= negatives.len() => negatives,
        EvalMode::Sampled(k) => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, user as u64, t.to_bits()]));
            index::sample(&mut rng, negatives.len(), k).into_iter().map(|j| negatives[j]).collect()
        }
    };
    out.push(truth);
    out.sort_unstable();
    Ok(out)
}

/// Anything that can score candidate items for a user at a time.
pub trait Scorer: Sync {
    fn score_candidates(&self, user: usize, t: f64, candidates: &[usize]) -> Result<Vec<f64>>;
}

impl<F> Scorer for F
where
    F: Fn(usize, f64, &[usize]) -> Result<Vec<f64>> + Sync,
{
    fn score_candidates(&self, user: usize, t: f64, candidates: &[usize]) -> Result<Vec<f64>> {
        self(user, t, candidates)
    }
}

/// The temporal model as a [`Scorer`], counting any neighbor exposure at or after the query time.
pub struct ModelScorer<'a> {
    pub params: &'a ModelParams,
    pub graph: &'a Ctbg,
    pub seed: u64,
    pub causality_violations: AtomicUsize,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a ModelParams, graph: &'a Ctbg, seed: u64) -> Self {
        ModelScorer {
            params,
            graph,
            seed,
            causality_violations: AtomicUsize::new(0),
        }
    }
}

impl Scorer for ModelScorer<'_> {
    fn score_candidates(&self, user: usize, t: f64, candidates: &[usize]) -> Result<Vec<f64>> {
        let mut pass = ForwardPass::new(self.params, self.graph, self.seed);
        let u = pass.temporal_embedding(NodeRef::User(user), t)?;
        let uv = pass.tape.value(u).to_vec();
        let scores = candidates
            .iter()
            .map(|&i| {
                let v = pass.temporal_embedding(NodeRef::Item(i), t)?;
                Ok(dot(&uv, pass.tape.value(v)))
            })
            .collect::<Result<Vec<f64>>>()?;
        self.causality_violations
            .fetch_add(pass.stats.causality_violations, Ordering::Relaxed);
        Ok(scores)
    }
}

/// Ranks items by training-set interaction count.
#[derive(Clone, Debug, PartialEq)]
pub struct Popularity {
    pub counts: Vec<usize>,
}

impl Popularity {
    pub fn fit(train: &[Interaction], num_items: usize) -> Self {
        let mut counts = vec![0; num_items];
        for x in train {
            counts[x.item] += 1;
        }
        Popularity { counts }
    }
}

impl Scorer for Popularity {
    fn score_candidates(&self, _user: usize, _t: f64, candidates: &[usize]) -> Result<Vec<f64>> {
        Ok(candidates.iter().map(|&i| self.counts.get(i).copied().unwrap_or(0) as f64).collect())
    }
}

/// Mean per-interaction metrics of `scorer` over `test`, candidates drawn from `graph`.
pub fn evaluate_with<S: Scorer + ?Sized>(scorer: &S, graph: &Ctbg, test: &[Interaction], config: &EvalConfig) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    let per: Vec<RankMetrics> = test
        .par_iter()
        .map(|x| {
            let cands = candidate_set(graph, x.user, x.timestamp, x.item, config.mode, config.negatives_seed)?;
            let scores = scorer.score_candidates(x.user, x.timestamp, &cands)?;
            Ok(metrics_for_rank(truth_rank(&cands, &scores, x.item), &config.cutoffs))
        })
        .collect::<Result<_>>()?;
    Ok(reduce(&per, &config.cutoffs))
}

fn reduce(per: &[RankMetrics], cutoffs: &[usize]) -> MetricsReport {
    let n = per.len() as f64;
    let column = |f: &dyn Fn(&RankMetrics) -> f64| pairwise_sum(&per.iter().map(f).collect::<Vec<_>>()) / n;
    let recall_at = cutoffs.iter().enumerate().map(|(k, &c)| (c, column(&|m| m.recall[k]))).collect();
    let ndcg_at = cutoffs.iter().enumerate().map(|(k, &c)| (c, column(&|m| m.ndcg[k]))).collect();
    MetricsReport {
        recall_at,
        ndcg_at,
        mrr: column(&|m| m.reciprocal_rank),
        n_evaluated: per.len(),
    }
}

/// Evaluates the temporal model. `graph` should hold every interaction (train,
/// valid and test) so that each prediction sees all history strictly before its time.
pub fn evaluate(params: &ModelParams, graph: &Ctbg, test: &[Interaction], config: &EvalConfig) -> Result<MetricsReport> {
    evaluate_with(&ModelScorer::new(params, graph, config.sampler_seed), graph, test, config)
}
