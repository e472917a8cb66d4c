mod common;

use nalgebra::DMatrix;
use nowcast_core::graph::AdjacencyConfig;
use nowcast_core::model::{cheb_graph_conv, forward, Ablation, ModelConfig, ModelParams};
use nowcast_core::{RegionGraph, Tape, Tensor};

use common::{node, wave};

fn dense(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

/// `T_0..T_{K-1}` of `L̃ = 2L/λ_max − I`, with λ_max from a full
/// eigendecomposition.
fn cheb_oracle(a: &DMatrix<f64>, k: usize) -> Vec<DMatrix<f64>> {
    let n = a.nrows();
    let d = DMatrix::from_diagonal(&a.row_sum().transpose());
    let l = d - a;
    let lambda = l.clone().symmetric_eigen().eigenvalues.max();
    let lt = l * (2.0 / lambda) - DMatrix::identity(n, n);
    let mut out = vec![DMatrix::identity(n, n), lt.clone()];
    while out.len() < k {
        let m = out.len();
        out.push(&lt * &out[m - 1] * 2.0 - &out[m - 2]);
    }
    out.truncate(k);
    out
}

/// Attention-free forward pass written with explicit loops.
fn oracle_logits(x: &Tensor, cfg: &ModelConfig, params: &ModelParams, basis: &[DMatrix<f64>]) -> Vec<f64> {
    let (n, tau) = (cfg.n_nodes, cfg.t_in);
    let mut c = cfg.in_channels;
    let mut h = dense(x);
    for block in &params.blocks {
        let theta = block.theta.data();
        let phi = block.phi.data();
        let c_out = block.theta.shape()[2];
        let width = block.phi.shape()[0];
        let mut y = vec![0.0; n * c_out * tau];
        for i in 0..n {
            for o in 0..c_out {
                for t in 0..tau {
                    let mut acc = 0.0;
                    for (k, tk) in basis.iter().enumerate() {
                        for m in 0..n {
                            for ci in 0..c {
                                acc += tk[(i, m)] * h[(m * c + ci) * tau + t] * theta[(k * c + ci) * c_out + o];
                            }
                        }
                    }
                    y[(i * c_out + o) * tau + t] = acc.max(0.0);
                }
            }
        }
        let half = (width / 2) as isize;
        let mut z = vec![0.0; n * c_out * tau];
        for i in 0..n {
            for o in 0..c_out {
                for t in 0..tau {
                    let mut acc = 0.0;
                    for w in 0..width {
                        let s = t as isize + w as isize - half;
                        if s < 0 || s >= tau as isize {
                            continue;
                        }
                        for ci in 0..c_out {
                            acc += phi[(w * c_out + o) * c_out + ci] * y[(i * c_out + ci) * tau + s as usize];
                        }
                    }
                    z[(i * c_out + o) * tau + t] = acc.max(0.0);
                }
            }
        }
        h = z;
        c = c_out;
    }
    let flat = c * tau;
    let (w, b) = (params.w_fc.data(), params.b_fc.data());
    let mut logits = vec![0.0; n * 3];
    for i in 0..n {
        for k in 0..3 {
            logits[i * 3 + k] = b[k] + (0..flat).map(|f| h[i * flat + f] * w[f * 3 + k]).sum::<f64>();
        }
    }
    logits
}

#[test]
fn attention_off_matches_dense_oracle() {
    // Ids deliberately out of sorted order.
    let nodes = vec![
        node("q2", 200.0, 1100.0),
        node("q0", 0.0, 0.0),
        node("q3", 1300.0, 1400.0),
        node("q1", 900.0, 100.0),
    ];
    for seed in 0..3 {
        let cfg = ModelConfig {
            n_nodes: 4,
            widths: vec![3, 2],
            t_in: 5,
            cheb_k: 3,
            seed,
            ablation: Ablation::AttentionOff,
            ..ModelConfig::default()
        };
        let graph = cfg.build_graph(nodes.clone(), &AdjacencyConfig::default()).unwrap();
        let params = ModelParams::init(&cfg).unwrap();
        let x = Tensor::from_fn([4, 6, 5], |i| wave(i, seed as f64)).unwrap();
        let a = graph.adjacency();
        let a = DMatrix::from_fn(4, 4, |i, j| a[[i, j]]);
        let basis = cheb_oracle(&a, 3);
        let want = oracle_logits(&x, &cfg, &params, &basis);
        let got = forward(&x, &graph, &params).unwrap().logits;
        let err = got.data().iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "seed {seed}: max deviation {err:e}");
    }
}

#[test]
fn edgeless_graph_reduces_to_signed_identities() {
    let nodes: Vec<_> = (0..3).map(|i| node(&format!("e{i}"), i as f64 * 400.0, 0.0)).collect();
    let graph = RegionGraph::edgeless(nodes, 4).unwrap();
    // L̃ = −I, so T_k = (−1)^k I.
    for (k, t) in graph.cheb_basis().iter().enumerate() {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { sign } else { 0.0 };
                assert_eq!(t[[i, j]], want, "T_{k}[{i},{j}]");
            }
        }
    }

    // With S = 1: Y = X (θ_0 − θ_1 + θ_2 − θ_3) per node and timestep.
    let tape = Tape::new();
    let x = Tensor::from_fn([3, 2, 4], |i| wave(i, 0.5)).unwrap();
    let theta = Tensor::from_fn([4, 2, 3], |i| wave(i, 1.5)).unwrap();
    let basis: Vec<_> = graph.cheb_tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let y = cheb_graph_conv(
        tape.constant(x.clone()),
        &basis,
        tape.constant(Tensor::ones([3, 3])),
        tape.constant(theta.clone()),
    )
    .unwrap()
    .value();
    for n in 0..3 {
        for o in 0..3 {
            for t in 0..4 {
                let mut want = 0.0;
                for c in 0..2 {
                    let folded = theta.get(&[0, c, o]) - theta.get(&[1, c, o]) + theta.get(&[2, c, o])
                        - theta.get(&[3, c, o]);
                    want += x.get(&[n, c, t]) * folded;
                }
                assert!((y.get(&[n, o, t]) - want).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn graph_off_logits_ignore_other_nodes() {
    let cfg = ModelConfig {
        n_nodes: 4,
        widths: vec![3],
        t_in: 4,
        ablation: Ablation::GraphOff,
        seed: 5,
        ..ModelConfig::default()
    };
    let graph = cfg.build_graph(common::quad(), &AdjacencyConfig::default()).unwrap();
    assert!(graph.edges().is_empty());
    let mut params = ModelParams::init(&cfg).unwrap();
    // Uniform attention removes the remaining cross-node paths.
    params.blocks[0].p_s = Tensor::zeros([4, 4]);
    params.blocks[0].v_e = Tensor::zeros([4, 4]);
    let x = Tensor::from_fn([4, 6, 4], |i| wave(i, 2.0)).unwrap();
    let base = forward(&x, &graph, &params).unwrap().logits;
    let mut x2 = x.clone();
    for c in 0..6 {
        for t in 0..4 {
            x2.set(&[3, c, t], 5.0).unwrap();
        }
    }
    let moved = forward(&x2, &graph, &params).unwrap().logits;
    for n in 0..3 {
        for k in 0..3 {
            assert_eq!(base.get(&[n, k]), moved.get(&[n, k]));
        }
    }
    assert_ne!(base.get(&[3, 0]), moved.get(&[3, 0]));
}
