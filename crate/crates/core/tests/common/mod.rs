#![allow(dead_code)]

use nowcast_core::{StaticFeatures, UnitNode};

pub fn node(id: &str, x: f64, y: f64) -> UnitNode {
    UnitNode {
        id: id.into(),
        x,
        y,
        static_features: StaticFeatures {
            in_floodplain: x < 500.0,
            residential_ratio: 0.4,
            watershed_id: if y < 500.0 { "a".into() } else { "b".into() },
            dist_coast: y,
            dist_stream: x,
        },
    }
}

/// Four nodes on an irregular quadrilateral.
pub fn quad() -> Vec<UnitNode> {
    vec![
        node("q0", 0.0, 0.0),
        node("q1", 900.0, 100.0),
        node("q2", 200.0, 1100.0),
        node("q3", 1300.0, 1400.0),
    ]
}

/// Deterministic values in roughly `[-1, 1]`.
pub fn wave(i: &[usize], salt: f64) -> f64 {
    let k = i.iter().fold(0.0, |acc, &v| acc * 7.3 + v as f64 + 1.0);
    (k * 0.731 + salt).sin()
}

/// A six-node, 80-step synthetic scenario and its feature tensor.
pub fn small_scenario(seed: u64) -> (nowcast_core::ScenarioDataset, nowcast_core::FeatureTensor) {
    let cfg = nowcast_core::ScenarioConfig {
        n_nodes: 6,
        n_timesteps: 80,
        n_gauges: 3,
        extent_m: 6000.0,
        seed,
        storms: nowcast_core::scenario::StormConfig {
            count: 2,
            radius_m: 2500.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let ds = nowcast_core::scenario::generate(&cfg).unwrap();
    let ft = nowcast_core::features::build_feature_tensor(&ds.raw_inputs(), &ds.nodes, 50).unwrap();
    (ds, ft)
}

pub fn small_model(n_nodes: usize) -> nowcast_core::ModelConfig {
    nowcast_core::ModelConfig {
        n_nodes,
        widths: vec![4, 4],
        t_in: 4,
        ..Default::default()
    }
}

pub fn small_train(epochs: usize) -> nowcast_core::TrainConfig {
    nowcast_core::TrainConfig {
        epochs,
        learning_rate: 3e-3,
        batch_size: 4,
        split: 50,
        seed: 3,
        ..Default::default()
    }
}
