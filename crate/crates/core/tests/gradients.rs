mod common;

use common::{grad_config, gradient_check};
use ctsrec::{Aggregator, LossKind, ModelConfig, ModelParams, TimeMode, TrainConfig};

fn check(config: ModelConfig, loss: LossKind, seed: u64) {
    let params = ModelParams::init(config.clone(), 3, 4, seed).unwrap();
    let train = TrainConfig {
        loss,
        l2_lambda: 1e-3,
        ..TrainConfig::default()
    };
    let report = gradient_check(&params, &train, 1e-5);
    assert!(report.iter().all(|(_, _, n)| *n > 0));
    for (name, err, n) in &report {
        assert!(*err < 1e-4, "{config:?}: {name} max rel err {err:e} over {n} entries");
    }
}

#[test]
fn attention_one_and_two_layers() {
    for layers in [1, 2] {
        check(grad_config(layers), LossKind::Bpr, 3);
    }
}

#[test]
fn relative_time_reference() {
    for layers in [1, 2] {
        let c = ModelConfig {
            relative_time: true,
            ..grad_config(layers)
        };
        check(c, LossKind::Bpr, 3);
    }
}

#[test]
fn multi_head() {
    let c = ModelConfig {
        heads: 2,
        ..grad_config(2)
    };
    check(c, LossKind::Bpr, 4);
}

#[test]
fn bce_loss() {
    check(grad_config(1), LossKind::Bce, 5);
}

#[test]
fn mean_and_lstm_aggregators() {
    for aggregator in [Aggregator::Mean, Aggregator::Lstm] {
        for layers in [1, 2] {
            let c = ModelConfig {
                aggregator,
                ..grad_config(layers)
            };
            check(c, LossKind::Bpr, 6);
        }
    }
}

#[test]
fn time_modes() {
    for time_mode in [TimeMode::Fixed, TimeMode::Position, TimeMode::Empty] {
        let c = ModelConfig {
            time_mode,
            max_positions: 4,
            ..grad_config(2)
        };
        check(c, LossKind::Bpr, 8);
    }
}

#[test]
fn node_type_time_masks() {
    for (user_time, item_time) in [(false, true), (true, false)] {
        let c = ModelConfig {
            user_time,
            item_time,
            ..grad_config(2)
        };
        check(c, LossKind::Bpr, 8);
    }
}

#[test]
fn frozen_frequencies_get_no_update() {
    let params = ModelParams::init(
        ModelConfig {
            time_mode: TimeMode::Fixed,
            ..grad_config(1)
        },
        3,
        4,
        1,
    )
    .unwrap();
    let g = ctsrec::training::backward(&params, &common::tiny_graph(), &common::tiny_batch(), &TrainConfig::default(), 0).unwrap();
    assert!(g.grads.dense[ctsrec::model::OMEGA].data.iter().all(|v| *v == 0.0));
}
