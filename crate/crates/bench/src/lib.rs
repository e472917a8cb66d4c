//! Benchmark fixtures shared by the criterion targets.

use nowcast_core::features::build_feature_tensor;
use nowcast_core::graph::AdjacencyConfig;
use nowcast_core::scenario::generate;
use nowcast_core::{FeatureTensor, ModelConfig, ModelParams, RegionGraph, ScenarioConfig, Tensor};

/// Deterministic `rows × cols` matrix with entries in `[-1, 1]`.
pub fn matrix(rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn([rows, cols], |i| ((i[0] * 31 + i[1] * 17) as f64 * 0.37).sin()).expect("finite")
}

/// The default 50-node scenario with a model of the given block width.
pub struct Fixture {
    pub data: FeatureTensor,
    pub graph: RegionGraph,
    pub params: ModelParams,
}

pub fn fixture(width: usize) -> Fixture {
    let ds = generate(&ScenarioConfig::default()).expect("default scenario");
    let data = build_feature_tensor(&ds.raw_inputs(), &ds.nodes, 288).expect("features");
    let model = ModelConfig {
        widths: vec![width; 3],
        ..ModelConfig::default()
    };
    let graph = model.build_graph(ds.nodes, &AdjacencyConfig::default()).expect("graph");
    let params = ModelParams::init(&model).expect("params");
    Fixture { data, graph, params }
}
