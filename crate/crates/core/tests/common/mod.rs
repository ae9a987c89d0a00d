#![allow(dead_code)]

use ctsrec::model::EMBEDDING;
use ctsrec::training::{backward, TrainSample};
use ctsrec::{Ctbg, Interaction, ModelConfig, ModelParams, TimeMode, TrainConfig};

/// Twelve edges over 3 users and 4 items at normalized times.
pub fn tiny_edges() -> Vec<Interaction> {
    [
        (0, 0, 0.05),
        (1, 0, 0.10),
        (0, 1, 0.15),
        (2, 1, 0.20),
        (1, 2, 0.25),
        (0, 3, 0.30),
        (2, 0, 0.35),
        (1, 1, 0.40),
        (2, 2, 0.45),
        (0, 2, 0.50),
        (1, 3, 0.55),
        (2, 3, 0.60),
    ]
    .into_iter()
    .map(|(u, i, t)| Interaction::new(u, i, t))
    .collect()
}

pub fn tiny_graph() -> Ctbg {
    Ctbg::build(&tiny_edges(), 3, 4).unwrap()
}

pub fn tiny_batch() -> Vec<TrainSample> {
    vec![
        TrainSample { user: 0, pos: 2, neg: 1, t: 0.52 },
        TrainSample { user: 1, pos: 3, neg: 0, t: 0.57 },
        TrainSample { user: 2, pos: 3, neg: 1, t: 0.63 },
    ]
}

pub fn grad_config(layers: usize) -> ModelConfig {
    ModelConfig {
        dim: 4,
        time_dim: 4,
        layers,
        neighbors: 2,
        heads: 1,
        max_frequency: 8.0,
        ..ModelConfig::default()
    }
}

/// Worst relative error between tape gradients and central differences,
/// per parameter tensor: `(name, worst error, entries checked)`.
pub fn gradient_check(params: &ModelParams, train: &TrainConfig, step: f64) -> Vec<(String, f64, usize)> {
    let graph = tiny_graph();
    let batch = tiny_batch();
    let seed = 17;
    let analytic = backward(params, &graph, &batch, train, seed).unwrap();
    let objective = |p: &ModelParams| backward(p, &graph, &batch, train, seed).unwrap().objective();
    let d = params.config.dim;
    let mut out = Vec::new();
    for k in 0..params.num_tensors() {
        if params.tensor(k).is_empty() {
            continue;
        }
        if k == ctsrec::model::OMEGA && params.config.time_mode != TimeMode::Learned {
            continue;
        }
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for idx in 0..params.tensor(k).len() {
            if k == EMBEDDING && !analytic.grads.embedding_rows.contains_key(&(idx / d)) {
                continue;
            }
            let mut plus = params.clone();
            plus.tensor_mut(k).data[idx] += step;
            let mut minus = params.clone();
            minus.tensor_mut(k).data[idx] -= step;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * step);
            let exact = analytic.grads.get(k, idx, d);
            let denom = exact.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((exact - numeric).abs() / denom);
            checked += 1;
        }
        out.push((params.tensor_name(k), worst, checked));
    }
    out
}

/// Five test interactions over a 30-item catalog scored by `-item`, so the
/// truth's rank is fixed by hand: ranks 1, 4, 11, 25 and 3. User 1 saw item 0
/// earlier, which removes it from that user's candidates.
pub fn pencil_toy() -> (Ctbg, Vec<Interaction>) {
    let test = vec![
        Interaction::new(0, 0, 1.0),
        Interaction::new(1, 4, 1.1),
        Interaction::new(2, 10, 1.2),
        Interaction::new(3, 24, 1.3),
        Interaction::new(4, 2, 1.4),
    ];
    let mut all = vec![Interaction::new(1, 0, 0.5)];
    all.extend(test.iter().copied());
    (Ctbg::build(&all, 5, 30).unwrap(), test)
}

pub fn descending_ids(_user: usize, _t: f64, candidates: &[usize]) -> ctsrec::Result<Vec<f64>> {
    Ok(candidates.iter().map(|&i| -(i as f64)).collect())
}

/// `(recall@10, recall@20, ndcg@10, mrr)` worked out by hand for [`pencil_toy`].
pub fn pencil_table() -> (f64, f64, f64, f64) {
    let recall10 = 3.0 / 5.0;
    let recall20 = 4.0 / 5.0;
    let ndcg10 = (1.0 + 1.0 / 5f64.log2() + 1.0 / 4f64.log2()) / 5.0;
    let mrr = (1.0 + 1.0 / 4.0 + 1.0 / 11.0 + 1.0 / 25.0 + 1.0 / 3.0) / 5.0;
    (recall10, recall20, ndcg10, mrr)
}
