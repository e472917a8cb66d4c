//! Attention-based spatial-temporal graph convolution for node classification.
//!
//! Each ST block maps `[N, C_l, τ] → [N, C_{l+1}, τ]`:
//!
//! 1. temporal attention `E` (`τ × τ`, row-stochastic) re-weights the block
//!    input along time; the re-weighted input drives spatial attention only,
//! 2. spatial attention `S` (`N × N`, row-stochastic),
//! 3. Chebyshev graph convolution with every `T_k(L̃)` modulated
//!    elementwise by `N · S` (the factor `N` gives uniform attention unit
//!    mean, so it coincides with the attention-free filter),
//! 4. ReLU, same-padded temporal convolution, ReLU, dropout.
//!
//! A dense head maps each node's flattened `C_L · τ` features to 3 logits.
//!
//! All node-coupled work runs in id-sorted node order and logits are mapped
//! back afterwards, so relabelling nodes permutes the output exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{N_CHANNELS, PHYSICS_CHANNELS};
use crate::graph::{AdjacencyConfig, RegionGraph, UnitNode};
use crate::tensor::{self, Tape, Tensor, Var};

pub const N_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Constant attention: `S` all ones, no temporal re-weighting.
    AttentionOff,
    /// Edgeless graph: every `T_k` is `±I`.
    GraphOff,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::AttentionOff => "attention-off",
            Ablation::GraphOff => "graph-off",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelSet {
    #[default]
    All,
    /// Gauge channels only; the human-sensed channels are zeroed.
    PhysicsOnly,
}

impl ChannelSet {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelSet::All => "all",
            ChannelSet::PhysicsOnly => "physics-only",
        }
    }

    /// Channel indices this set masks out.
    pub fn masked(self) -> Vec<usize> {
        match self {
            ChannelSet::All => vec![],
            ChannelSet::PhysicsOnly => (PHYSICS_CHANNELS..N_CHANNELS).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_nodes: usize,
    pub in_channels: usize,
    /// Output width of each ST block; its length is the block count.
    pub widths: Vec<usize>,
    pub cheb_k: usize,
    pub kernel_width: usize,
    pub t_in: usize,
    pub horizon: usize,
    pub dropout: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub channels: ChannelSet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_nodes: 50,
            in_channels: N_CHANNELS,
            widths: vec![32, 32, 32],
            cheb_k: 3,
            kernel_width: 3,
            t_in: 12,
            horizon: 1,
            dropout: 0.0,
            seed: 0,
            ablation: Ablation::None,
            channels: ChannelSet::All,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 2 {
            return Err(Error::usage(format!("model needs at least 2 nodes, got {}", self.n_nodes)));
        }
        if self.in_channels != N_CHANNELS {
            return Err(Error::usage(format!(
                "model input must have {N_CHANNELS} channels, got {}",
                self.in_channels
            )));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::usage(format!("invalid block widths {:?}", self.widths)));
        }
        if self.cheb_k == 0 {
            return Err(Error::usage("Chebyshev order K must be at least 1"));
        }
        if self.kernel_width % 2 == 0 {
            return Err(Error::usage(format!("temporal kernel width {} must be odd", self.kernel_width)));
        }
        if self.t_in == 0 {
            return Err(Error::usage("input window T_in must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::usage(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.widths.len()
    }

    /// `(C_l, C_{l+1})` for block `l`.
    pub fn block_io(&self, l: usize) -> (usize, usize) {
        let c_in = if l == 0 { self.in_channels } else { self.widths[l - 1] };
        (c_in, self.widths[l])
    }

    /// The graph this configuration trains on: the feature graph, or an
    /// edgeless one under [`Ablation::GraphOff`].
    pub fn build_graph(&self, nodes: Vec<UnitNode>, adjacency: &AdjacencyConfig) -> Result<RegionGraph> {
        match self.ablation {
            Ablation::GraphOff => RegionGraph::edgeless(nodes, self.cheb_k),
            _ => RegionGraph::build(nodes, adjacency, self.cheb_k),
        }
    }
}

pub const BLOCK_GROUPS: [&str; 12] = [
    "p_s", "b_s", "w1", "w2", "w3", "v_e", "b_e", "u1", "u2", "u3", "theta", "phi",
];

/// Parameters of one ST block with `N` nodes, `C` input channels, `C'`
/// output channels, window `τ`, order `K`, kernel width `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct STBlockParams {
    /// `[N, N]`
    pub p_s: Tensor,
    /// `[N, N]`
    pub b_s: Tensor,
    /// `[τ]`
    pub w1: Tensor,
    /// `[C, τ]`
    pub w2: Tensor,
    /// `[C]`
    pub w3: Tensor,
    /// `[τ, τ]`
    pub v_e: Tensor,
    /// `[τ, τ]`
    pub b_e: Tensor,
    /// `[N]`
    pub u1: Tensor,
    /// `[C, N]`
    pub u2: Tensor,
    /// `[C]`
    pub u3: Tensor,
    /// `[K, C, C']`
    pub theta: Tensor,
    /// `[W, C', C']`
    pub phi: Tensor,
}

impl STBlockParams {
    pub fn shapes(n: usize, c_in: usize, c_out: usize, tau: usize, k: usize, width: usize) -> [Vec<usize>; 12] {
        [
            vec![n, n],
            vec![n, n],
            vec![tau],
            vec![c_in, tau],
            vec![c_in],
            vec![tau, tau],
            vec![tau, tau],
            vec![n],
            vec![c_in, n],
            vec![c_in],
            vec![k, c_in, c_out],
            vec![width, c_out, c_out],
        ]
    }

    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.p_s, &self.b_s, &self.w1, &self.w2, &self.w3, &self.v_e, &self.b_e, &self.u1, &self.u2, &self.u3,
            &self.theta, &self.phi,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.p_s,
            &mut self.b_s,
            &mut self.w1,
            &mut self.w2,
            &mut self.w3,
            &mut self.v_e,
            &mut self.b_e,
            &mut self.u1,
            &mut self.u2,
            &mut self.u3,
            &mut self.theta,
            &mut self.phi,
        ]
    }

    fn from_tensors(mut t: Vec<Tensor>) -> Self {
        debug_assert_eq!(t.len(), 12);
        let mut next = || t.remove(0);
        Self {
            p_s: next(),
            b_s: next(),
            w1: next(),
            w2: next(),
            w3: next(),
            v_e: next(),
            b_e: next(),
            u1: next(),
            u2: next(),
            u3: next(),
            theta: next(),
            phi: next(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    pub blocks: Vec<STBlockParams>,
    /// `[C_L · τ, 3]`
    pub w_fc: Tensor,
    /// `[3]`
    pub b_fc: Tensor,
}

/// Glorot-uniform bound.
fn glorot(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape {
        [a] => (*a, 1),
        [a, b] => (*a, *b),
        [k, a, b] => (k * a, k * b),
        _ => unreachable!("parameters are rank 1 to 3"),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl ModelParams {
    /// Seeded Glorot-uniform initialisation; attention biases and the head
    /// bias start at zero.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let shapes = Self::group_shapes(config);
        let tensors = Self::group_names(config)
            .iter()
            .zip(shapes)
            .map(|(name, shape)| {
                if name.ends_with("b_s") || name.ends_with("b_e") || name == "fc.bias" {
                    return Tensor::zeros(shape);
                }
                let r = glorot(&shape);
                let len = shape.iter().product();
                let data = (0..len).map(|_| rng.random_range(-r..r)).collect();
                Tensor::from_parts(shape, data)
            })
            .collect();
        Self::from_groups(config.clone(), tensors)
    }

    /// Builds from tensors in [`Self::group_names`] order, checking shapes.
    pub fn from_groups(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let names = Self::group_names(&config);
        let shapes = Self::group_shapes(&config);
        if tensors.len() != names.len() {
            return Err(Error::usage(format!(
                "expected {} parameter groups, got {}",
                names.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in names.iter().zip(&shapes).zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::usage(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut tensors = tensors;
        let head = tensors.split_off(12 * config.blocks());
        let mut blocks = Vec::with_capacity(config.blocks());
        while !tensors.is_empty() {
            let rest = tensors.split_off(12);
            blocks.push(STBlockParams::from_tensors(std::mem::replace(&mut tensors, rest)));
        }
        let [w_fc, b_fc]: [Tensor; 2] = head.try_into().expect("two head tensors");
        Ok(Self {
            config,
            blocks,
            w_fc,
            b_fc,
        })
    }

    pub fn group_names(config: &ModelConfig) -> Vec<String> {
        let mut names: Vec<String> = (0..config.blocks())
            .flat_map(|l| BLOCK_GROUPS.iter().map(move |g| format!("block{l}.{g}")))
            .collect();
        names.push("fc.weight".into());
        names.push("fc.bias".into());
        names
    }

    pub fn group_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for l in 0..config.blocks() {
            let (c_in, c_out) = config.block_io(l);
            shapes.extend(STBlockParams::shapes(
                config.n_nodes,
                c_in,
                c_out,
                config.t_in,
                config.cheb_k,
                config.kernel_width,
            ));
        }
        let last = *config.widths.last().expect("validated non-empty");
        shapes.push(vec![last * config.t_in, N_CLASSES]);
        shapes.push(vec![N_CLASSES]);
        shapes
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every parameter tensor in [`Self::group_names`] order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.blocks.iter().flat_map(|b| b.tensors()).collect();
        out.push(&self.w_fc);
        out.push(&self.b_fc);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.blocks.iter_mut().flat_map(|b| b.tensors_mut()).collect();
        out.push(&mut self.w_fc);
        out.push(&mut self.b_fc);
        out
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Records every parameter on `tape`, differentiable when `trainable`.
    pub fn vars<'t>(&self, tape: &'t Tape, trainable: bool) -> ParamVars<'t> {
        let put = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        ParamVars {
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    let v = b.tensors().map(put);
                    BlockVars {
                        p_s: v[0],
                        b_s: v[1],
                        w1: v[2],
                        w2: v[3],
                        w3: v[4],
                        v_e: v[5],
                        b_e: v[6],
                        u1: v[7],
                        u2: v[8],
                        u3: v[9],
                        theta: v[10],
                        phi: v[11],
                    }
                })
                .collect(),
            w_fc: put(&self.w_fc),
            b_fc: put(&self.b_fc),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars<'t> {
    pub p_s: Var<'t>,
    pub b_s: Var<'t>,
    pub w1: Var<'t>,
    pub w2: Var<'t>,
    pub w3: Var<'t>,
    pub v_e: Var<'t>,
    pub b_e: Var<'t>,
    pub u1: Var<'t>,
    pub u2: Var<'t>,
    pub u3: Var<'t>,
    pub theta: Var<'t>,
    pub phi: Var<'t>,
}

impl<'t> BlockVars<'t> {
    pub fn all(&self) -> [Var<'t>; 12] {
        [
            self.p_s, self.b_s, self.w1, self.w2, self.w3, self.v_e, self.b_e, self.u1, self.u2, self.u3, self.theta,
            self.phi,
        ]
    }

    /// Node-indexed parameters re-indexed by `order`.
    fn reorder(&self, order: &[usize]) -> Result<Self> {
        let both = |v: Var<'t>| v.select(0, order)?.select(1, order);
        Ok(Self {
            p_s: both(self.p_s)?,
            b_s: both(self.b_s)?,
            u1: self.u1.select(0, order)?,
            u2: self.u2.select(1, order)?,
            ..*self
        })
    }
}

#[derive(Clone, Debug)]
pub struct ParamVars<'t> {
    pub blocks: Vec<BlockVars<'t>>,
    pub w_fc: Var<'t>,
    pub b_fc: Var<'t>,
}

impl<'t> ParamVars<'t> {
    /// In [`ModelParams::group_names`] order.
    pub fn all(&self) -> Vec<Var<'t>> {
        let mut out: Vec<Var<'t>> = self.blocks.iter().flat_map(|b| b.all()).collect();
        out.push(self.w_fc);
        out.push(self.b_fc);
        out
    }
}

fn expect_shape(v: Var<'_>, shape: &[usize], what: &str) -> Result<()> {
    let actual = v.shape();
    if actual != shape {
        return Err(Error::usage(format!("{what}: expected shape {shape:?}, got {actual:?}")));
    }
    Ok(())
}

/// `Σ_c u[c] · x[n, c, t]` as `[N, τ]`.
fn channel_contract<'t>(x: Var<'t>, u: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let (n, c, tau) = (s[0], s[1], s[2]);
    x.permute(&[0, 2, 1])?
        .reshape([n * tau, c])?
        .matmul(u.reshape([c, 1])?)?
        .reshape([n, tau])
}

/// Row-stochastic `N × N` spatial attention from an `[N, C, τ]` input.
pub fn spatial_attention<'t>(x: Var<'t>, p: &BlockVars<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::usage(format!("spatial attention input must be [N, C, τ], got {s:?}")));
    }
    let (n, c, tau) = (s[0], s[1], s[2]);
    expect_shape(p.p_s, &[n, n], "P_s")?;
    expect_shape(p.b_s, &[n, n], "b_s")?;
    expect_shape(p.w1, &[tau], "W1")?;
    expect_shape(p.w2, &[c, tau], "W2")?;
    expect_shape(p.w3, &[c], "W3")?;
    let lhs = x
        .reshape([n * c, tau])?
        .matmul(p.w1.reshape([tau, 1])?)?
        .reshape([n, c])?
        .matmul(p.w2)?;
    let rhs = channel_contract(x, p.w3)?;
    let score = lhs.matmul(rhs.t()?)?.add(p.b_s)?.sigmoid()?;
    p.p_s.matmul(score)?.softmax(1)
}

/// Row-stochastic `τ × τ` temporal attention from an `[N, C, τ]` input.
pub fn temporal_attention<'t>(x: Var<'t>, p: &BlockVars<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::usage(format!("temporal attention input must be [N, C, τ], got {s:?}")));
    }
    let (n, c, tau) = (s[0], s[1], s[2]);
    expect_shape(p.v_e, &[tau, tau], "V_e")?;
    expect_shape(p.b_e, &[tau, tau], "b_e")?;
    expect_shape(p.u1, &[n], "U1")?;
    expect_shape(p.u2, &[c, n], "U2")?;
    expect_shape(p.u3, &[c], "U3")?;
    let lhs = x
        .permute(&[2, 1, 0])?
        .reshape([tau * c, n])?
        .matmul(p.u1.reshape([n, 1])?)?
        .reshape([tau, c])?
        .matmul(p.u2)?;
    let rhs = channel_contract(x, p.u3)?;
    let score = lhs.matmul(rhs)?.add(p.b_e)?.sigmoid()?;
    p.v_e.matmul(score)?.softmax(1)
}

/// `X̂[:, :, i] = Σ_j E[i, j] · X[:, :, j]`.
pub fn apply_temporal_attention<'t>(x: Var<'t>, e: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    x.reshape([s[0] * s[1], s[2]])?.matmul(e.t()?)?.reshape(s)
}

/// `Y[:, :, t] = Σ_k (T_k ⊙ S) X[:, :, t] θ_k` for `X: [N, C, τ]`,
/// `θ: [K, C, C']`.
pub fn cheb_graph_conv<'t>(x: Var<'t>, basis: &[Var<'t>], s: Var<'t>, theta: Var<'t>) -> Result<Var<'t>> {
    let xs = x.shape();
    let ts = theta.shape();
    if xs.len() != 3 || ts.len() != 3 || ts[1] != xs[1] {
        return Err(Error::usage(format!(
            "graph conv shape mismatch: input {xs:?}, theta {ts:?}"
        )));
    }
    if basis.len() != ts[0] {
        return Err(Error::usage(format!(
            "Chebyshev basis has {} terms but theta has {}",
            basis.len(),
            ts[0]
        )));
    }
    let (n, c, tau, c_out) = (xs[0], xs[1], xs[2], ts[2]);
    expect_shape(s, &[n, n], "attention")?;
    let rows = x.permute(&[0, 2, 1])?.reshape([n * tau, c])?;
    let mut acc: Option<Var<'t>> = None;
    for (k, t_k) in basis.iter().enumerate() {
        expect_shape(*t_k, &[n, n], "Chebyshev term")?;
        let theta_k = theta.select(0, &[k])?.reshape([c, c_out])?;
        let mixed = rows.matmul(theta_k)?.reshape([n, tau * c_out])?;
        let term = t_k.mul(s)?.matmul(mixed)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    acc.expect("K >= 1").reshape([n, tau, c_out])?.permute(&[0, 2, 1])
}

pub enum Mode<'r> {
    Eval,
    /// Training mode draws dropout masks from the given generator.
    Train(&'r mut ChaCha8Rng),
}

/// `ReLU → same-padded temporal conv → ReLU → dropout (training only)`.
pub fn temporal_conv<'t>(y: Var<'t>, phi: Var<'t>, dropout: f64, mode: &mut Mode<'_>) -> Result<Var<'t>> {
    let w = phi.shape();
    if w.len() == 3 && w[0] % 2 == 0 {
        return Err(Error::usage(format!("temporal kernel width {} must be odd", w[0])));
    }
    let out = y.relu()?.conv1d(phi)?.relu()?;
    match mode {
        Mode::Train(rng) if dropout > 0.0 => {
            let keep = 1.0 - dropout;
            let shape = out.shape();
            let len = shape.iter().product();
            let mask = (0..len)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            out.mul(y.tape().constant(Tensor::from_parts(shape, mask)))
        }
        _ => Ok(out),
    }
}

pub struct ForwardOutput {
    /// `[N, 3]`
    pub logits: Tensor,
    /// Row-wise softmax of the logits.
    pub probs: Tensor,
}

/// Inference-mode forward pass on one `[N, 6, T_in]` window.
pub fn forward(x: &Tensor, graph: &RegionGraph, params: &ModelParams) -> Result<ForwardOutput> {
    let tape = Tape::new();
    let vars = params.vars(&tape, false);
    let logits = forward_on_tape(&tape, x, graph, params.config(), &vars, &mut Mode::Eval)?.value();
    let probs = tensor::softmax(&logits, 1)?;
    Ok(ForwardOutput {
        logits: (*logits).clone(),
        probs,
    })
}

/// Forward pass recorded on `tape`, returning `[N, 3]` logits in the
/// graph's node order.
pub fn forward_on_tape<'t>(
    tape: &'t Tape,
    x: &Tensor,
    graph: &RegionGraph,
    config: &ModelConfig,
    vars: &ParamVars<'t>,
    mode: &mut Mode<'_>,
) -> Result<Var<'t>> {
    let n = config.n_nodes;
    if graph.len() != n {
        return Err(Error::usage(format!("graph has {} nodes, model expects {n}", graph.len())));
    }
    if graph.cheb_order() != config.cheb_k {
        return Err(Error::usage(format!(
            "graph basis has {} terms, model expects K = {}",
            graph.cheb_order(),
            config.cheb_k
        )));
    }
    if x.shape() != [n, config.in_channels, config.t_in] {
        return Err(Error::usage(format!(
            "input shape {:?} does not match [{n}, {}, {}]",
            x.shape(),
            config.in_channels,
            config.t_in
        )));
    }
    if vars.blocks.len() != config.blocks() {
        return Err(Error::usage("parameter vars do not match the block count"));
    }
    tensor::ensure_finite(x.data(), "model input")?;

    let order = graph.canonical_order();
    let identity = order.iter().enumerate().all(|(i, &o)| i == o);
    let mut input = if identity { x.clone() } else { x.select(0, order)? };
    let masked = config.channels.masked();
    if !masked.is_empty() {
        let tau = config.t_in;
        let data = input.data_mut();
        for node in 0..n {
            for &c in &masked {
                let row = (node * config.in_channels + c) * tau;
                data[row..row + tau].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    let basis: Vec<Var<'t>> = graph.cheb_tensors_sorted().iter().map(|t| tape.constant(t.clone())).collect();
    let ones = tape.constant(Tensor::ones([n, n]));

    let mut h = tape.constant(input);
    for (l, block) in vars.blocks.iter().enumerate() {
        let p = if identity { *block } else { block.reorder(order)? };
        let at = |stage: &'static str| move |e: Error| e.context(format!("ST block {l} {stage}"));
        let s = match config.ablation {
            Ablation::AttentionOff => ones,
            _ => {
                let e = temporal_attention(h, &p).map_err(at("temporal attention"))?;
                let x_hat = apply_temporal_attention(h, e).map_err(at("temporal attention"))?;
                spatial_attention(x_hat, &p)
                    .and_then(|s| s.scale(n as f64))
                    .map_err(at("spatial attention"))?
            }
        };
        let y = cheb_graph_conv(h, &basis, s, p.theta).map_err(at("graph convolution"))?;
        h = temporal_conv(y, p.phi, config.dropout, mode).map_err(at("temporal convolution"))?;
    }
    let flat = h.shape()[1] * h.shape()[2];
    let logits = h
        .reshape([n, flat])
        .and_then(|f| f.matmul(vars.w_fc))
        .and_then(|f| f.add_bias(vars.b_fc, 1))
        .map_err(|e| e.context("output layer"))?;
    if identity {
        return Ok(logits);
    }
    let mut rank = vec![0; n];
    for (pos, &orig) in order.iter().enumerate() {
        rank[orig] = pos;
    }
    logits.select(0, &rank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::node;

    fn small_config(n: usize, t_in: usize, widths: Vec<usize>) -> ModelConfig {
        ModelConfig {
            n_nodes: n,
            widths,
            t_in,
            seed: 7,
            ..ModelConfig::default()
        }
    }

    fn line_graph(n: usize, k: usize) -> RegionGraph {
        let nodes = (0..n).map(|i| node(&format!("n{i}"), i as f64 * 300.0, 0.0)).collect();
        RegionGraph::build(nodes, &AdjacencyConfig::default(), k).unwrap()
    }

    fn block_vars<'t>(tape: &'t Tape, n: usize, c: usize, tau: usize, seed: u64) -> BlockVars<'t> {
        let cfg = ModelConfig {
            n_nodes: n,
            widths: vec![c],
            t_in: tau,
            seed,
            ..ModelConfig::default()
        };
        let mut params = ModelParams::init(&cfg).unwrap();
        // Block 0 expects 6 input channels; reshape the attention vectors to `c`.
        let b = &mut params.blocks[0];
        b.w2 = Tensor::full([c, tau], 0.1);
        b.w3 = Tensor::full([c], 0.2);
        b.u2 = Tensor::full([c, n], -0.1);
        b.u3 = Tensor::full([c], 0.3);
        params.vars(tape, false).blocks[0]
    }

    #[test]
    fn init_shapes_and_zero_biases() {
        let cfg = small_config(4, 5, vec![3, 2]);
        let p = ModelParams::init(&cfg).unwrap();
        let names = ModelParams::group_names(&cfg);
        assert_eq!(names.len(), 26);
        assert_eq!(p.blocks[1].theta.shape(), &[3, 3, 2]);
        assert_eq!(p.blocks[0].u2.shape(), &[6, 4]);
        assert_eq!(p.w_fc.shape(), &[10, 3]);
        assert!(p.blocks[0].b_s.data().iter().all(|&v| v == 0.0));
        assert!(p.b_fc.data().iter().all(|&v| v == 0.0));
        let r = (6.0f64 / 8.0).sqrt();
        assert!(p.blocks[0].p_s.data().iter().all(|v| v.abs() < r));
        assert_eq!(p, ModelParams::init(&cfg).unwrap());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(4, 5, vec![3]);
        cfg.kernel_width = 2;
        assert!(matches!(ModelParams::init(&cfg), Err(Error::Usage(_))));
        cfg.kernel_width = 3;
        cfg.dropout = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Usage(_))));
    }

    #[test]
    fn spatial_attention_rows_and_uniform_case() {
        let tape = Tape::new();
        let mut p = block_vars(&tape, 4, 2, 3, 1);
        let x = tape.constant(Tensor::from_fn([4, 2, 3], |i| (i[0] * 6 + i[1] * 3 + i[2]) as f64 * 0.1 - 0.5).unwrap());
        let s = spatial_attention(x, &p).unwrap().value();
        for r in 0..4 {
            let sum: f64 = (0..4).map(|c| s.get(&[r, c])).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        p.p_s = tape.constant(Tensor::zeros([4, 4]));
        let s = spatial_attention(x, &p).unwrap().value();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(matches!(
            spatial_attention(tape.constant(Tensor::zeros([3, 2, 3])), &p),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn temporal_attention_cases() {
        let tape = Tape::new();
        let mut p = block_vars(&tape, 3, 2, 4, 2);
        let x = tape.constant(Tensor::from_fn([3, 2, 4], |i| (i[0] + 2 * i[1]) as f64 - 0.3 * i[2] as f64).unwrap());
        let e = temporal_attention(x, &p).unwrap().value();
        for r in 0..4 {
            let sum: f64 = (0..4).map(|c| e.get(&[r, c])).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        p.v_e = tape.constant(Tensor::zeros([4, 4]));
        let e = temporal_attention(x, &p).unwrap().value();
        assert!(e.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let p1 = block_vars(&tape, 3, 2, 1, 3);
        let x1 = tape.constant(Tensor::from_fn([3, 2, 1], |i| i[0] as f64 - i[1] as f64).unwrap());
        let e1 = temporal_attention(x1, &p1).unwrap();
        assert_eq!(e1.value().data(), &[1.0]);
        let same = apply_temporal_attention(x1, e1).unwrap();
        assert_eq!(same.value().data(), x1.value().data());
    }

    #[test]
    fn cheb_conv_identity_and_zero() {
        let tape = Tape::new();
        let x = Tensor::from_fn([3, 2, 4], |i| (i[0] * 8 + i[1] * 4 + i[2]) as f64).unwrap();
        let xv = tape.constant(x.clone());
        let basis = [tape.constant(Tensor::eye(3))];
        let ones = tape.constant(Tensor::ones([3, 3]));
        let mut theta = Tensor::zeros([1, 2, 2]);
        theta.set(&[0, 0, 0], 1.0).unwrap();
        theta.set(&[0, 1, 1], 1.0).unwrap();
        let y = cheb_graph_conv(xv, &basis, ones, tape.constant(theta.clone())).unwrap();
        assert_eq!(*y.value(), x);

        let z = cheb_graph_conv(tape.constant(Tensor::zeros([3, 2, 4])), &basis, ones, tape.constant(theta)).unwrap();
        assert!(z.value().data().iter().all(|&v| v == 0.0));

        let two = [basis[0], basis[0]];
        assert!(matches!(
            cheb_graph_conv(xv, &two, ones, tape.constant(Tensor::zeros([1, 2, 2]))),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn temporal_conv_cases() {
        let tape = Tape::new();
        let y = Tensor::from_fn([2, 2, 5], |i| (i[0] + i[1] + i[2]) as f64).unwrap();
        let mut ident = Tensor::zeros([3, 2, 2]);
        ident.set(&[1, 0, 0], 1.0).unwrap();
        ident.set(&[1, 1, 1], 1.0).unwrap();
        let out = temporal_conv(tape.constant(y.clone()), tape.constant(ident.clone()), 0.0, &mut Mode::Eval).unwrap();
        assert_eq!(*out.value(), y);
        let out = temporal_conv(tape.constant(Tensor::zeros([2, 2, 5])), tape.constant(ident), 0.0, &mut Mode::Eval)
            .unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));

        // Kernel [1, 0, 0] reads the previous step: out[t] = y[t − 1].
        let seq = Tensor::new([1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let shift = Tensor::new([3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let out = temporal_conv(tape.constant(seq), tape.constant(shift), 0.0, &mut Mode::Eval).unwrap();
        assert_eq!(out.value().data(), &[0.0, 1.0, 2.0, 3.0, 4.0]);

        let even = tape.constant(Tensor::zeros([2, 1, 1]));
        let seq = tape.constant(Tensor::zeros([1, 1, 5]));
        assert!(matches!(temporal_conv(seq, even, 0.0, &mut Mode::Eval), Err(Error::Usage(_))));
    }

    #[test]
    fn dropout_only_in_training() {
        let tape = Tape::new();
        let y = tape.constant(Tensor::ones([4, 1, 50]));
        let phi = tape.constant(Tensor::new([1, 1, 1], vec![1.0]).unwrap());
        let eval = temporal_conv(y, phi, 0.5, &mut Mode::Eval).unwrap();
        assert!(eval.value().data().iter().all(|&v| v == 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let train = temporal_conv(y, phi, 0.5, &mut Mode::Train(&mut rng)).unwrap();
        let v = train.value();
        assert!(v.data().iter().all(|&x| x == 0.0 || x == 2.0));
        assert!(v.data().iter().any(|&x| x == 0.0) && v.data().iter().any(|&x| x == 2.0));
    }

    #[test]
    fn zero_input_gives_uniform_probs() {
        let cfg = small_config(4, 6, vec![5, 5]);
        let params = ModelParams::init(&cfg).unwrap();
        let out = forward(&Tensor::zeros([4, 6, 6]), &line_graph(4, 3), &params).unwrap();
        assert!(out.probs.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn probs_rows_sum_to_one_and_deterministic() {
        let cfg = small_config(5, 4, vec![4]);
        let params = ModelParams::init(&cfg).unwrap();
        let x = Tensor::from_fn([5, 6, 4], |i| ((i[0] * 31 + i[1] * 7 + i[2] * 3) % 11) as f64 / 5.0 - 1.0).unwrap();
        let g = line_graph(5, 3);
        let a = forward(&x, &g, &params).unwrap();
        for r in 0..5 {
            let sum: f64 = (0..3).map(|c| a.probs.get(&[r, c])).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let b = forward(&x, &g, &params).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn forward_errors() {
        let cfg = small_config(4, 4, vec![3]);
        let params = ModelParams::init(&cfg).unwrap();
        let g = line_graph(4, 3);
        assert!(matches!(forward(&Tensor::zeros([4, 6, 5]), &g, &params), Err(Error::Usage(_))));
        assert!(matches!(forward(&Tensor::zeros([4, 6, 4]), &line_graph(5, 3), &params), Err(Error::Usage(_))));

        let mut huge = params.clone();
        huge.blocks[0].theta = Tensor::full([3, 6, 3], 1e300);
        let x = Tensor::full([4, 6, 4], 1e10);
        let err = forward(&x, &g, &huge).err().expect("overflow");
        assert!(matches!(err, Error::Domain(ref m) if m.contains("ST block 0")), "{err}");
    }

    #[test]
    fn physics_only_ignores_human_channels() {
        let mut cfg = small_config(4, 4, vec![3]);
        cfg.channels = ChannelSet::PhysicsOnly;
        let params = ModelParams::init(&cfg).unwrap();
        let g = line_graph(4, 3);
        let x = Tensor::from_fn([4, 6, 4], |i| (i[0] + i[1] * i[2]) as f64 * 0.1).unwrap();
        let mut y = x.clone();
        for n in 0..4 {
            for t in 0..4 {
                y.set(&[n, 4, t], 9.0).unwrap();
            }
        }
        assert_eq!(forward(&x, &g, &params).unwrap().logits, forward(&y, &g, &params).unwrap().logits);
    }
}
