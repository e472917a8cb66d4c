//! Seeded synthetic flood scenarios written in the pipeline's input formats.
//!
//! Nodes sit uniformly in a square with the coast along `y = 0` and a
//! meandering stream through the middle. Storms are Gaussian rain cells
//! drifting across the plane. Each node's latent flooded fraction follows
//!
//! ```text
//! f[t+1] = clamp(f[t] + a·s_i·max(rain − threshold, 0) + c·mean(f of k nearest) − drainage, 0, 1)
//! ```
//!
//! where `s_i` is a static susceptibility (floodplain, coast proximity).
//! Sensors observe that field: gauges see rain and a leaky-storage water
//! level, 3-1-1 reports are Poisson in `f[t − 1]`, tweets Poisson in `f[t]`,
//! and 4-hourly activity tiles dip with `f`.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{label_flood_class, Event, EventKind, FeatureTensor, GaugeReading, GaugeStation, Grid, RawInputs};
use crate::graph::{StaticFeatures, UnitNode};
use crate::io;
use crate::model::{ChannelSet, ModelConfig};

pub const META_FILE: &str = "scenario_meta.json";
pub const GRID_START: &str = "2020-06-01T00:00:00Z";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StormConfig {
    pub count: usize,
    /// Peak rain at the cell centre, mm per 30-minute step.
    pub amplitude_mm: f64,
    /// Spatial standard deviation of a cell, metres.
    pub radius_m: f64,
    /// Drift speed, metres per step.
    pub speed_m: f64,
    /// Temporal standard deviation of a storm, steps.
    pub duration_steps: f64,
}

impl Default for StormConfig {
    fn default() -> Self {
        Self {
            count: 6,
            amplitude_mm: 14.0,
            radius_m: 3500.0,
            speed_m: 3000.0,
            duration_steps: 6.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FloodDynamics {
    /// Rain absorbed before flooding starts, mm per step.
    pub threshold_mm: f64,
    /// Flooded fraction per excess mm.
    pub absorption: f64,
    /// Spill coefficient on the neighbours' mean.
    pub spill: f64,
    /// Fraction drained per step.
    pub drainage: f64,
    /// Neighbours per node for spill.
    pub neighbors: usize,
}

impl Default for FloodDynamics {
    fn default() -> Self {
        Self {
            threshold_mm: 3.0,
            absorption: 0.004,
            spill: 0.0015,
            drainage: 0.002,
            neighbors: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorNoise {
    /// Probability that a gauge reading is missing.
    pub gauge_missing: f64,
    pub rain_sd_mm: f64,
    pub elevation_sd_m: f64,
    pub activity_sd: f64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        Self {
            gauge_missing: 0.1,
            rain_sd_mm: 0.3,
            elevation_sd_m: 0.03,
            activity_sd: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HumanSignal {
    /// Expected reports per step at `f = 1`.
    pub report_rate: f64,
    pub report_lag: usize,
    pub tweet_rate: f64,
    pub tweet_lag: usize,
    pub activity_baseline: f64,
    pub activity_depression: f64,
    pub activity_period_steps: usize,
    pub tiles_per_node: usize,
    /// Fraction of nodes that never post reports or tweets.
    pub silent_fraction: f64,
}

impl Default for HumanSignal {
    fn default() -> Self {
        Self {
            report_rate: 3.0,
            report_lag: 1,
            tweet_rate: 4.0,
            tweet_lag: 0,
            activity_baseline: 0.7,
            activity_depression: 0.5,
            activity_period_steps: 8,
            tiles_per_node: 2,
            silent_fraction: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_nodes: usize,
    pub n_timesteps: usize,
    pub seed: u64,
    pub n_gauges: usize,
    /// Side of the square region, metres.
    pub extent_m: f64,
    pub n_watersheds: usize,
    pub storms: StormConfig,
    pub flood: FloodDynamics,
    pub noise: SensorNoise,
    pub human: HumanSignal,
    /// Minimum correlation between report counts and the lagged flooded
    /// fraction; seeds below it are regenerated.
    pub min_report_corr: f64,
    pub max_attempts: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_nodes: 50,
            n_timesteps: 480,
            seed: 0,
            n_gauges: 8,
            extent_m: 20_000.0,
            n_watersheds: 5,
            storms: StormConfig::default(),
            flood: FloodDynamics::default(),
            noise: SensorNoise::default(),
            human: HumanSignal::default(),
            min_report_corr: 0.3,
            max_attempts: 20,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let m = ModelConfig::default();
        let min_steps = 2 * (m.t_in + m.horizon);
        if self.n_nodes < 4 {
            return Err(Error::usage(format!("scenario needs at least 4 nodes, got {}", self.n_nodes)));
        }
        if self.n_timesteps < min_steps {
            return Err(Error::usage(format!(
                "scenario needs at least {min_steps} timesteps, got {}",
                self.n_timesteps
            )));
        }
        if self.n_gauges < 2 {
            return Err(Error::usage("scenario needs at least 2 gauges"));
        }
        if self.n_watersheds == 0 || self.human.tiles_per_node == 0 || self.human.activity_period_steps == 0 {
            return Err(Error::usage("watershed, tile and activity-period counts must be positive"));
        }
        let s = &self.storms;
        let f = &self.flood;
        let n = &self.noise;
        let h = &self.human;
        let nonneg = [
            ("extent_m", self.extent_m),
            ("storms.amplitude_mm", s.amplitude_mm),
            ("storms.radius_m", s.radius_m),
            ("storms.speed_m", s.speed_m),
            ("storms.duration_steps", s.duration_steps),
            ("flood.threshold_mm", f.threshold_mm),
            ("flood.absorption", f.absorption),
            ("flood.spill", f.spill),
            ("flood.drainage", f.drainage),
            ("noise.rain_sd_mm", n.rain_sd_mm),
            ("noise.elevation_sd_m", n.elevation_sd_m),
            ("noise.activity_sd", n.activity_sd),
            ("human.report_rate", h.report_rate),
            ("human.tweet_rate", h.tweet_rate),
            ("human.activity_depression", h.activity_depression),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::usage(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&n.gauge_missing) {
            return Err(Error::usage("noise.gauge_missing must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&h.silent_fraction) {
            return Err(Error::usage("human.silent_fraction must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&h.activity_baseline) {
            return Err(Error::usage("human.activity_baseline must lie in [0, 1]"));
        }
        if self.extent_m == 0.0 || s.radius_m == 0.0 || s.duration_steps == 0.0 {
            return Err(Error::usage("extent, storm radius and storm duration must be positive"));
        }
        if self.max_attempts == 0 {
            return Err(Error::usage("max_attempts must be at least 1"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        let start: DateTime<Utc> = GRID_START.parse().expect("valid constant");
        Grid::new(start, self.n_timesteps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub config: ScenarioConfig,
    pub requested_seed: u64,
    pub effective_seed: u64,
    pub attempts: usize,
    pub grid: Grid,
    /// `None` when nothing floods.
    pub report_flood_correlation: Option<f64>,
    pub label_counts: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioDataset {
    pub meta: ScenarioMeta,
    pub nodes: Vec<UnitNode>,
    pub gauges: Vec<GaugeStation>,
    /// Reports, tweets and activity tiles, sorted by time.
    pub events: Vec<Event>,
    /// Latent flooded fraction, `[node][t]`.
    pub flooded: Vec<Vec<f64>>,
}

impl ScenarioDataset {
    pub fn grid(&self) -> &Grid {
        &self.meta.grid
    }

    pub fn road_status(&self) -> Vec<(String, i64, f64)> {
        let grid = self.grid();
        self.nodes
            .iter()
            .zip(&self.flooded)
            .flat_map(|(n, f)| f.iter().enumerate().map(move |(t, &v)| (n.id.clone(), grid.time(t), v)))
            .collect()
    }

    pub fn labels(&self) -> Result<Vec<Vec<u8>>> {
        self.flooded
            .iter()
            .map(|row| row.iter().map(|&f| label_flood_class(f)).collect())
            .collect()
    }

    pub fn raw_inputs(&self) -> RawInputs {
        RawInputs {
            gauges: self.gauges.clone(),
            events: self.events.clone(),
            road_status: self.road_status(),
        }
    }

    /// Writes the input CSVs and `scenario_meta.json`; returns the paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let p = |f: &str| dir.join(f);
        io::write_nodes(&p(io::NODES_FILE), &self.nodes)?;
        io::write_gauges(&p(io::GAUGES_FILE), &p(io::READINGS_FILE), &self.gauges)?;
        io::write_events(&p(io::EVENTS_FILE), &self.events)?;
        io::write_road_status(&p(io::ROAD_STATUS_FILE), &self.road_status())?;
        io::write_json(&p(META_FILE), &self.meta)?;
        Ok([
            io::NODES_FILE,
            io::GAUGES_FILE,
            io::READINGS_FILE,
            io::EVENTS_FILE,
            io::ROAD_STATUS_FILE,
            META_FILE,
        ]
        .iter()
        .map(|f| p(f))
        .collect())
    }
}

/// The full dataset and its gauge-only counterpart.
pub struct DatasetViews {
    pub full: FeatureTensor,
    pub physics_only: FeatureTensor,
}

pub fn ablation_variants(dataset: &FeatureTensor) -> DatasetViews {
    DatasetViews {
        full: dataset.clone(),
        physics_only: dataset.with_channels_zeroed(&ChannelSet::PhysicsOnly.masked()),
    }
}

/// One step of the flood update for every node.
pub fn step_flood(f: &[f64], rain: &[f64], susceptibility: &[f64], neighbors: &[Vec<usize>], d: &FloodDynamics) -> Vec<f64> {
    (0..f.len())
        .map(|i| {
            let spill = if neighbors[i].is_empty() {
                0.0
            } else {
                neighbors[i].iter().map(|&j| f[j]).sum::<f64>() / neighbors[i].len() as f64
            };
            let excess = (rain[i] - d.threshold_mm).max(0.0);
            (f[i] + d.absorption * susceptibility[i] * excess + d.spill * spill - d.drainage).clamp(0.0, 1.0)
        })
        .collect()
}

struct Storm {
    peak_step: f64,
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
}

fn rain_at(storms: &[Storm], cfg: &StormConfig, x: f64, y: f64, t: usize) -> f64 {
    storms
        .iter()
        .map(|s| {
            let dt = t as f64 - s.peak_step;
            let envelope = (-0.5 * (dt / cfg.duration_steps).powi(2)).exp();
            let (px, py) = (s.cx + s.vx * dt, s.cy + s.vy * dt);
            let d2 = (x - px).powi(2) + (y - py).powi(2);
            cfg.amplitude_mm * envelope * (-0.5 * d2 / cfg.radius_m.powi(2)).exp()
        })
        .sum()
}

fn stream_x(cfg: &ScenarioConfig, y: f64) -> f64 {
    cfg.extent_m * 0.5 + cfg.extent_m * 0.1 * (y / cfg.extent_m * std::f64::consts::TAU).sin()
}

fn poisson(rng: &mut ChaCha8Rng, rate: f64) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive finite rate").sample(rng) as u64
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Generates a scenario, redrawing the seed while the report/flood
/// correlation stays below `min_report_corr`. Replacement seeds come from a
/// stream keyed on the requested seed, so nearby seeds never share one.
pub fn generate(config: &ScenarioConfig) -> Result<ScenarioDataset> {
    config.validate()?;
    let mut retry = ChaCha8Rng::seed_from_u64(config.seed);
    retry.set_stream(1);
    let mut seed = config.seed;
    for attempt in 0..config.max_attempts {
        if attempt > 0 {
            seed = retry.random();
        }
        let mut ds = generate_with_seed(config, seed);
        ds.meta.attempts = attempt + 1;
        match ds.meta.report_flood_correlation {
            Some(r) if r < config.min_report_corr => {
                warn!("seed {seed}: report/flood correlation {r:.3} below {}; regenerating", config.min_report_corr);
            }
            _ => {
                if seed != config.seed {
                    info!("scenario seed {} replaced by {seed}", config.seed);
                }
                return Ok(ds);
            }
        }
    }
    Err(Error::domain(format!(
        "no seed in {} attempts from {} reached report/flood correlation {}",
        config.max_attempts, config.seed, config.min_report_corr
    )))
}

fn generate_with_seed(cfg: &ScenarioConfig, seed: u64) -> ScenarioDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n_nodes;
    let steps = cfg.n_timesteps;
    let ext = cfg.extent_m;
    let grid = cfg.grid();
    let width = (n - 1).to_string().len();

    // Nodes and static features.
    let sheds: Vec<(f64, f64)> = (0..cfg.n_watersheds)
        .map(|_| (rng.random_range(0.0..ext), rng.random_range(0.0..ext)))
        .collect();
    let mut nodes = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y) = (rng.random_range(0.0..ext), rng.random_range(0.0..ext));
        let shed = (0..sheds.len())
            .min_by(|&a, &b| {
                let da = (sheds[a].0 - x).hypot(sheds[a].1 - y);
                let db = (sheds[b].0 - x).hypot(sheds[b].1 - y);
                da.total_cmp(&db)
            })
            .expect("at least one watershed");
        let dist_stream = (x - stream_x(cfg, y)).abs();
        nodes.push(UnitNode {
            id: format!("n{i:0width$}"),
            x,
            y,
            static_features: StaticFeatures {
                in_floodplain: dist_stream < 0.08 * ext,
                residential_ratio: rng.random_range(0.2..0.9),
                watershed_id: format!("ws{shed}"),
                dist_coast: y,
                dist_stream,
            },
        });
    }
    let susceptibility: Vec<f64> = nodes
        .iter()
        .map(|nd| {
            let s = &nd.static_features;
            0.6 + if s.in_floodplain { 0.6 } else { 0.0 } + 0.4 * (1.0 - s.dist_coast / ext)
        })
        .collect();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| {
                let da = nodes[i].distance_to(nodes[a].x, nodes[a].y);
                let db = nodes[i].distance_to(nodes[b].x, nodes[b].y);
                da.total_cmp(&db).then(a.cmp(&b))
            });
            others.truncate(cfg.flood.neighbors);
            others
        })
        .collect();

    // Storms spread over the horizon so every span sees rain.
    let count = cfg.storms.count;
    let storms: Vec<Storm> = (0..count)
        .map(|s| {
            let slot = steps as f64 / count as f64;
            let peak_step = slot * (s as f64 + 0.5) + rng.random_range(-0.25..0.25) * slot;
            let heading = rng.random_range(0.0..std::f64::consts::TAU);
            Storm {
                peak_step,
                cx: rng.random_range(0.2 * ext..0.8 * ext),
                cy: rng.random_range(0.2 * ext..0.8 * ext),
                vx: cfg.storms.speed_m * heading.cos(),
                vy: cfg.storms.speed_m * heading.sin(),
            }
        })
        .collect();

    // Latent flood field.
    let mut flooded = vec![vec![0.0; steps]; n];
    let mut f = vec![0.0; n];
    for t in 0..steps {
        for i in 0..n {
            flooded[i][t] = f[i];
        }
        let rain: Vec<f64> = nodes.iter().map(|nd| rain_at(&storms, &cfg.storms, nd.x, nd.y, t)).collect();
        f = step_flood(&f, &rain, &susceptibility, &neighbors, &cfg.flood);
    }

    // Gauges: rain, and a leaky store driving the water level.
    let noise = &cfg.noise;
    let rain_noise = Normal::new(0.0, noise.rain_sd_mm.max(f64::MIN_POSITIVE)).expect("valid sd");
    let elev_noise = Normal::new(0.0, noise.elevation_sd_m.max(f64::MIN_POSITIVE)).expect("valid sd");
    let mut gauges = Vec::with_capacity(cfg.n_gauges);
    for g in 0..cfg.n_gauges {
        let (x, y) = (rng.random_range(0.0..ext), rng.random_range(0.0..ext));
        let base = rng.random_range(0.5..1.5);
        let gain = 0.02;
        let threshold = base + gain * 60.0;
        let mut store = 0.0;
        let mut readings = Vec::with_capacity(steps);
        for t in 0..steps {
            let rain = (rain_at(&storms, &cfg.storms, x, y, t) + rain_noise.sample(&mut rng)).max(0.0);
            store = store * 0.97 + rain;
            let elevation = base + gain * store + elev_noise.sample(&mut rng);
            let missing = rng.random::<f64>() < noise.gauge_missing;
            if missing && t != 0 && t != steps - 1 {
                continue;
            }
            readings.push(GaugeReading {
                timestamp: grid.time(t),
                rain_increment_mm: rain,
                water_elevation_m: elevation,
            });
        }
        gauges.push(GaugeStation {
            id: format!("g{g}"),
            x,
            y,
            flood_threshold_elevation: threshold,
            readings,
        });
    }

    // Human-sensed streams.
    let h = &cfg.human;
    let jitter = 0.01 * ext;
    let mut events = Vec::new();
    let mut report_counts = Vec::new();
    let mut lagged_f = Vec::new();
    let tiles: Vec<Vec<(f64, f64)>> = nodes
        .iter()
        .map(|nd| {
            (0..h.tiles_per_node)
                .map(|_| (nd.x + rng.random_range(-jitter..jitter), nd.y + rng.random_range(-jitter..jitter)))
                .collect()
        })
        .collect();
    let voiced: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < h.silent_fraction { 0.0 } else { 1.0 })
        .collect();
    let act_noise = Normal::new(0.0, noise.activity_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
    for t in 0..steps {
        // Stamp inside the interval ending at grid point t.
        let ts = grid.time(t) - 60;
        for (i, nd) in nodes.iter().enumerate() {
            let mut point = |kind: EventKind, count: u64, rng: &mut ChaCha8Rng| {
                for _ in 0..count {
                    events.push(Event {
                        kind,
                        timestamp: ts,
                        x: Some(nd.x + rng.random_range(-jitter..jitter)),
                        y: Some(nd.y + rng.random_range(-jitter..jitter)),
                        tile_id: None,
                        value: 1.0,
                    });
                }
            };
            let f_report = if t >= h.report_lag { flooded[i][t - h.report_lag] } else { 0.0 };
            let reports = poisson(&mut rng, voiced[i] * h.report_rate * f_report);
            point(EventKind::Report311, reports, &mut rng);
            let f_tweet = if t >= h.tweet_lag { flooded[i][t - h.tweet_lag] } else { 0.0 };
            let tweets = poisson(&mut rng, voiced[i] * h.tweet_rate * f_tweet);
            point(EventKind::Tweet, tweets, &mut rng);
            if t >= 1 {
                report_counts.push(reports as f64);
                lagged_f.push(flooded[i][t - 1]);
            }
        }
        if t % h.activity_period_steps == 0 {
            for (i, node_tiles) in tiles.iter().enumerate() {
                for (k, &(x, y)) in node_tiles.iter().enumerate() {
                    let v = h.activity_baseline - h.activity_depression * flooded[i][t] + act_noise.sample(&mut rng);
                    events.push(Event {
                        kind: EventKind::ActivityTile,
                        timestamp: grid.time(t),
                        x: Some(x),
                        y: Some(y),
                        tile_id: Some(format!("{}-t{k}", nodes[i].id)),
                        value: v.clamp(0.0, 1.0),
                    });
                }
            }
        }
    }

    let any_flood = flooded.iter().flatten().any(|&v| v > 0.0);
    let corr = if any_flood { pearson(&report_counts, &lagged_f).or(Some(0.0)) } else { None };
    let mut label_counts = [0usize; 3];
    for &v in flooded.iter().flatten() {
        label_counts[label_flood_class(v).expect("clamped fraction") as usize] += 1;
    }
    ScenarioDataset {
        meta: ScenarioMeta {
            config: cfg.clone(),
            requested_seed: cfg.seed,
            effective_seed: seed,
            attempts: 1,
            grid,
            report_flood_correlation: corr,
            label_counts,
        },
        nodes,
        gauges,
        events,
        flooded,
    }
}
