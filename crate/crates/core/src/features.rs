//! Raw streams to the aligned `nodes x 6 x timesteps` feature tensor.
//!
//! Channel order is fixed: [`CHANNELS`]. Time runs on a regular 30-minute
//! grid; a grid point `t` owns the half-open interval `(t − 30 min, t]`.
//! Series are linearly interpolated between readings and held constant
//! beyond the first and last reading.

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Duration, Utc};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::UnitNode;
use crate::tensor::Tensor;

pub const CHANNELS: [&str; 6] = ["rain_2h", "rain_24h", "water_ratio", "reports_311", "tweets", "activity"];
pub const N_CHANNELS: usize = CHANNELS.len();
/// Channels 0..3 are gauge-derived; 3..6 are human-sensed.
pub const PHYSICS_CHANNELS: usize = 3;

pub const STEP_SECONDS: i64 = 30 * 60;
/// 2 hours of 30-minute steps.
pub const RAIN_SHORT_STEPS: usize = 4;
/// 24 hours of 30-minute steps.
pub const RAIN_LONG_STEPS: usize = 48;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub start: DateTime<Utc>,
    pub step_minutes: u32,
    pub steps: usize,
}

impl Grid {
    pub fn new(start: DateTime<Utc>, steps: usize) -> Self {
        Self {
            start,
            step_minutes: 30,
            steps,
        }
    }

    pub fn step_seconds(&self) -> i64 {
        i64::from(self.step_minutes) * 60
    }

    /// Unix seconds of grid point `k`.
    pub fn time(&self, k: usize) -> i64 {
        self.start.timestamp() + k as i64 * self.step_seconds()
    }

    pub fn datetime(&self, k: usize) -> DateTime<Utc> {
        self.start + Duration::seconds(k as i64 * self.step_seconds())
    }

    pub fn times(&self) -> Vec<i64> {
        (0..self.steps).map(|k| self.time(k)).collect()
    }

    /// Grid index whose interval `(t − step, t]` contains `ts`.
    pub fn interval_index(&self, ts: i64) -> Option<usize> {
        let step = self.step_seconds();
        let rel = ts - self.start.timestamp();
        // ceil(rel / step) for the half-open interval ending at a grid point.
        let k = rel.div_euclid(step) + i64::from(rel.rem_euclid(step) != 0);
        (0..self.steps as i64).contains(&k).then_some(k as usize)
    }

    /// Builds a grid from a set of timestamps that must be evenly spaced by
    /// 30 minutes.
    pub fn from_timestamps(times: &[i64]) -> Result<Self> {
        let mut sorted = times.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() {
            return Err(Error::usage("cannot derive a time grid from no timestamps"));
        }
        for (k, &t) in sorted.iter().enumerate() {
            if t != sorted[0] + k as i64 * STEP_SECONDS {
                return Err(Error::usage(format!(
                    "timestamps are not a regular 30-minute grid (gap before index {k})"
                )));
            }
        }
        let start = DateTime::from_timestamp(sorted[0], 0)
            .ok_or_else(|| Error::usage("grid start out of range"))?;
        Ok(Self::new(start, sorted.len()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaugeReading {
    /// Unix seconds.
    pub timestamp: i64,
    pub rain_increment_mm: f64,
    pub water_elevation_m: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaugeStation {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub flood_threshold_elevation: f64,
    pub readings: Vec<GaugeReading>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    #[serde(rename = "report_311")]
    Report311,
    Tweet,
    ActivityTile,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Report311 => "report_311",
            EventKind::Tweet => "tweet",
            EventKind::ActivityTile => "activity_tile",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "report_311" => Ok(EventKind::Report311),
            "tweet" => Ok(EventKind::Tweet),
            "activity_tile" => Ok(EventKind::ActivityTile),
            other => Err(Error::parse(format!("unknown event kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub kind: EventKind,
    pub timestamp: i64,
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub tile_id: Option<String>,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaugeWeight {
    pub gauge: usize,
    pub weight: f64,
}

/// The two closest gauges with inverse-distance weights summing to 1.
///
/// A centroid sitting exactly on a gauge gives that gauge weight 1. Distance
/// ties go to the lower gauge id.
pub fn nearest_two_gauges(x: f64, y: f64, gauges: &[GaugeStation]) -> Result<[GaugeWeight; 2]> {
    if gauges.len() < 2 {
        return Err(Error::usage(format!("need at least 2 gauges, got {}", gauges.len())));
    }
    let mut ranked: Vec<(f64, usize)> = gauges
        .iter()
        .enumerate()
        .map(|(i, g)| ((g.x - x).hypot(g.y - y), i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| gauges[a.1].id.cmp(&gauges[b.1].id)));
    let (d1, g1) = ranked[0];
    let (d2, g2) = ranked[1];
    if d1 == 0.0 {
        return Ok([GaugeWeight { gauge: g1, weight: 1.0 }, GaugeWeight { gauge: g2, weight: 0.0 }]);
    }
    let (inv1, inv2) = (1.0 / d1, 1.0 / d2);
    let w1 = inv1 / (inv1 + inv2);
    Ok([GaugeWeight { gauge: g1, weight: w1 }, GaugeWeight { gauge: g2, weight: 1.0 - w1 }])
}

/// Linear interpolation of `(times, values)` onto `grid_times`, holding the
/// first/last reading constant outside the observed span.
pub fn resample_series(times: &[i64], values: &[f64], grid_times: &[i64]) -> Result<Vec<f64>> {
    if times.len() != values.len() {
        return Err(Error::usage("resample: times and values differ in length"));
    }
    if times.len() < 2 {
        return Err(Error::usage(format!("resample needs at least 2 readings, got {}", times.len())));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::usage("resample: timestamps must be strictly increasing"));
    }
    let last = times.len() - 1;
    let mut out = Vec::with_capacity(grid_times.len());
    let mut seg = 0;
    for &t in grid_times {
        let v = if t <= times[0] {
            values[0]
        } else if t >= times[last] {
            values[last]
        } else {
            while times[seg + 1] < t {
                seg += 1;
            }
            // grid_times may not be sorted; rewind if needed.
            while times[seg] > t {
                seg -= 1;
            }
            let (t0, t1) = (times[seg], times[seg + 1]);
            if t == t1 {
                values[seg + 1]
            } else {
                let frac = (t - t0) as f64 / (t1 - t0) as f64;
                values[seg] + frac * (values[seg + 1] - values[seg])
            }
        };
        out.push(v);
    }
    Ok(out)
}

/// `out[t] = Σ incremental[max(0, t − window + 1) ..= t]`.
pub fn accumulate_rainfall(incremental: &[f64], window_steps: usize) -> Result<Vec<f64>> {
    if window_steps < 1 {
        return Err(Error::usage("rainfall window must be at least 1 step"));
    }
    if let Some(bad) = incremental.iter().find(|&&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::domain(format!("rainfall increment {bad} is negative or non-finite")));
    }
    Ok((0..incremental.len())
        .map(|t| incremental[(t + 1).saturating_sub(window_steps)..=t].iter().sum())
        .collect())
}

pub fn water_ratio(elevation: &[f64], threshold: f64) -> Result<Vec<f64>> {
    if !(threshold > 0.0) {
        return Err(Error::usage(format!("flood threshold must be > 0, got {threshold}")));
    }
    Ok(elevation.iter().map(|e| e / threshold).collect())
}

/// `w1 · first + w2 · second`, pointwise.
pub fn blend_gauge_channel(first: &[f64], second: &[f64], weights: &[GaugeWeight; 2]) -> Result<Vec<f64>> {
    if first.len() != second.len() {
        return Err(Error::usage(format!(
            "blend: gauge series lengths differ ({} vs {})",
            first.len(),
            second.len()
        )));
    }
    if (weights[0].weight + weights[1].weight - 1.0).abs() > 1e-12 {
        return Err(Error::usage("blend weights must sum to 1"));
    }
    let (w1, w2) = (weights[0].weight, weights[1].weight);
    Ok(first.iter().zip(second).map(|(a, b)| w1 * a + w2 * b).collect())
}

/// Per-node, per-step event counts plus bookkeeping for events that could
/// not be placed directly.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCounts {
    /// `counts[node][t]`.
    pub counts: Vec<Vec<f64>>,
    pub total_events: usize,
    /// Events farther than the region radius from every centroid; still
    /// assigned to the nearest node.
    pub snapped: usize,
    /// Events whose timestamp falls outside the grid.
    pub outside_grid: usize,
}

impl PointCounts {
    pub fn assigned(&self) -> usize {
        self.counts.iter().flatten().sum::<f64>() as usize
    }
}

/// Index of the nearest centroid (ties to the lower id).
pub fn nearest_node(x: f64, y: f64, nodes: &[UnitNode]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, n) in nodes.iter().enumerate() {
        let d = n.distance_to(x, y);
        if d < best_d || (d == best_d && n.id < nodes[best].id) {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Counts point events (3-1-1 reports, tweets) per node region and grid
/// interval. Regions are nearest-centroid cells of radius `region_radius`
/// (unbounded when `None`).
pub fn aggregate_point_events(
    events: &[Event],
    nodes: &[UnitNode],
    grid: &Grid,
    region_radius: Option<f64>,
) -> Result<PointCounts> {
    if nodes.is_empty() {
        return Err(Error::usage("no nodes to aggregate events into"));
    }
    let mut counts = vec![vec![0.0; grid.steps]; nodes.len()];
    let mut snapped = 0;
    let mut outside_grid = 0;
    for ev in events {
        let (Some(x), Some(y)) = (ev.x, ev.y) else {
            return Err(Error::usage(format!(
                "{} event at {} has no location",
                ev.kind.as_str(),
                ev.timestamp
            )));
        };
        let Some(t) = grid.interval_index(ev.timestamp) else {
            outside_grid += 1;
            continue;
        };
        let node = nearest_node(x, y, nodes);
        if let Some(r) = region_radius {
            if nodes[node].distance_to(x, y) > r {
                snapped += 1;
                info!(
                    "{} event at ({x}, {y}) lies outside every node region; assigned to {}",
                    ev.kind.as_str(),
                    nodes[node].id
                );
            }
        }
        counts[node][t] += 1.0;
    }
    if outside_grid > 0 {
        warn!("{outside_grid} event(s) fall outside the time grid and were not counted");
    }
    Ok(PointCounts {
        counts,
        total_events: events.len(),
        snapped,
        outside_grid,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivityChannel {
    pub values: Vec<Vec<f64>>,
    /// Nodes with no tiles; their channel is all zero.
    pub uncovered: Vec<usize>,
}

/// Tile activity to node series: mean over member tiles per raw window, then
/// resampled onto the grid.
pub fn aggregate_activity(
    records: &[Event],
    tile_to_node: &HashMap<String, usize>,
    n_nodes: usize,
    grid: &Grid,
) -> Result<ActivityChannel> {
    // node -> raw timestamp -> (sum, count)
    let mut windows: Vec<BTreeMap<i64, (f64, usize)>> = vec![BTreeMap::new(); n_nodes];
    for rec in records {
        let tile = rec
            .tile_id
            .as_deref()
            .ok_or_else(|| Error::usage(format!("activity record at {} has no tile id", rec.timestamp)))?;
        if !(0.0..=1.0).contains(&rec.value) {
            return Err(Error::domain(format!(
                "activity index {} for tile {tile} outside [0, 1]",
                rec.value
            )));
        }
        let &node = tile_to_node
            .get(tile)
            .ok_or_else(|| Error::usage(format!("tile {tile} is not mapped to any node")))?;
        if node >= n_nodes {
            return Err(Error::usage(format!("tile {tile} maps to node {node} out of range")));
        }
        let slot = windows[node].entry(rec.timestamp).or_insert((0.0, 0));
        slot.0 += rec.value;
        slot.1 += 1;
    }
    let grid_times = grid.times();
    let mut values = Vec::with_capacity(n_nodes);
    let mut uncovered = Vec::new();
    for (node, w) in windows.iter().enumerate() {
        let times: Vec<i64> = w.keys().copied().collect();
        let means: Vec<f64> = w.values().map(|(s, c)| s / *c as f64).collect();
        let series = match times.len() {
            0 => {
                uncovered.push(node);
                vec![0.0; grid.steps]
            }
            1 => vec![means[0]; grid.steps],
            _ => resample_series(&times, &means, &grid_times)?,
        };
        values.push(series);
    }
    if !uncovered.is_empty() {
        warn!("{} node(s) have no activity tiles; channel set to 0", uncovered.len());
    }
    Ok(ActivityChannel { values, uncovered })
}

/// Maps each tile id to the node nearest to the tile's location.
pub fn tile_map_from_locations(records: &[Event], nodes: &[UnitNode]) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::new();
    for rec in records.iter().filter(|r| r.kind == EventKind::ActivityTile) {
        let Some(tile) = &rec.tile_id else { continue };
        if map.contains_key(tile) {
            continue;
        }
        let (Some(x), Some(y)) = (rec.x, rec.y) else {
            return Err(Error::usage(format!("tile {tile} has no location to map it to a node")));
        };
        map.insert(tile.clone(), nearest_node(x, y, nodes));
    }
    Ok(map)
}

/// `< 1%` flooded → 0 (none), `1%..=10%` → 1 (moderate), `> 10%` → 2 (severe).
pub fn label_flood_class(flooded_fraction: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&flooded_fraction) {
        return Err(Error::domain(format!("flooded fraction {flooded_fraction} outside [0, 1]")));
    }
    Ok(if flooded_fraction < 0.01 {
        0
    } else if flooded_fraction <= 0.10 {
        1
    } else {
        2
    })
}

/// Per-channel z-score parameters, fit on steps `0..fit_end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub fit_end: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    /// `[nodes, 6, steps]`, normalized.
    values: Tensor,
    /// Row-major `[nodes, steps]`.
    labels: Vec<u8>,
    grid: Grid,
    node_ids: Vec<String>,
    norm: NormStats,
}

impl FeatureTensor {
    /// Assembles from already-normalized values. Used by the dataset reader.
    pub fn from_parts(values: Tensor, labels: Vec<u8>, grid: Grid, node_ids: Vec<String>, norm: NormStats) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 3 || shape[1] != N_CHANNELS || shape[0] != node_ids.len() || shape[2] != grid.steps {
            return Err(Error::usage(format!(
                "feature tensor shape {shape:?} does not match {} nodes x {N_CHANNELS} x {} steps",
                node_ids.len(),
                grid.steps
            )));
        }
        if labels.len() != shape[0] * shape[2] {
            return Err(Error::usage("label count does not match nodes x steps"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 2) {
            return Err(Error::usage(format!("label {bad} outside {{0, 1, 2}}")));
        }
        if norm.mean.len() != N_CHANNELS || norm.std.len() != N_CHANNELS {
            return Err(Error::usage("normalization stats must cover all channels"));
        }
        Ok(Self {
            values,
            labels,
            grid,
            node_ids,
            norm,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn n_steps(&self) -> usize {
        self.grid.steps
    }

    pub fn label(&self, node: usize, t: usize) -> u8 {
        self.labels[node * self.n_steps() + t]
    }

    /// Labels of every node at step `t`.
    pub fn labels_at(&self, t: usize) -> Vec<usize> {
        (0..self.n_nodes()).map(|n| self.label(n, t) as usize).collect()
    }

    /// Input window `[nodes, 6, t_in]` covering steps `end + 1 − t_in ..= end`.
    pub fn window(&self, end: usize, t_in: usize) -> Result<Tensor> {
        if t_in == 0 || end + 1 < t_in || end >= self.n_steps() {
            return Err(Error::usage(format!(
                "window ending at {end} of length {t_in} does not fit {} steps",
                self.n_steps()
            )));
        }
        let start = end + 1 - t_in;
        let steps = self.n_steps();
        let src = self.values.data();
        let mut data = Vec::with_capacity(self.n_nodes() * N_CHANNELS * t_in);
        for row in 0..self.n_nodes() * N_CHANNELS {
            data.extend_from_slice(&src[row * steps + start..row * steps + start + t_in]);
        }
        Ok(Tensor::from_parts(vec![self.n_nodes(), N_CHANNELS, t_in], data))
    }

    /// Keeps only the first `steps` timesteps.
    pub fn truncated(&self, steps: usize) -> Result<Self> {
        if steps == 0 || steps > self.n_steps() {
            return Err(Error::usage(format!("cannot truncate {} steps to {steps}", self.n_steps())));
        }
        let old = self.n_steps();
        let src = self.values.data();
        let data: Vec<f64> = (0..self.n_nodes() * N_CHANNELS)
            .flat_map(|row| src[row * old..row * old + steps].iter().copied())
            .collect();
        let labels = (0..self.n_nodes())
            .flat_map(|n| self.labels[n * old..n * old + steps].iter().copied())
            .collect();
        let mut grid = self.grid.clone();
        grid.steps = steps;
        Self::from_parts(
            Tensor::from_parts(vec![self.n_nodes(), N_CHANNELS, steps], data),
            labels,
            grid,
            self.node_ids.clone(),
            self.norm.clone(),
        )
    }

    /// Copy with the listed channels set identically to zero.
    pub fn with_channels_zeroed(&self, channels: &[usize]) -> Self {
        let steps = self.n_steps();
        let mut data = self.values.data().to_vec();
        for n in 0..self.n_nodes() {
            for &c in channels {
                let row = (n * N_CHANNELS + c) * steps;
                data[row..row + steps].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut out = self.clone();
        out.values = Tensor::from_parts(self.values.shape().to_vec(), data);
        out
    }
}

/// Stacks the six raw channels, validates them and z-scores each channel with
/// statistics from steps `0..fit_end` only.
///
/// `channels[c][node][t]` must be on `grid`; `labels[node][t]` ∈ {0, 1, 2}.
pub fn assemble(
    node_ids: Vec<String>,
    grid: Grid,
    channels: [Option<Vec<Vec<f64>>>; N_CHANNELS],
    labels: Vec<Vec<u8>>,
    fit_end: usize,
) -> Result<FeatureTensor> {
    let n = node_ids.len();
    let steps = grid.steps;
    if fit_end == 0 || fit_end > steps {
        return Err(Error::usage(format!("normalization span 0..{fit_end} invalid for {steps} steps")));
    }
    let mut data = vec![0.0; n * N_CHANNELS * steps];
    let mut mean = vec![0.0; N_CHANNELS];
    let mut std = vec![1.0; N_CHANNELS];
    for (c, channel) in channels.iter().enumerate() {
        let channel = channel
            .as_ref()
            .ok_or_else(|| Error::usage(format!("missing channel {}", CHANNELS[c])))?;
        if channel.len() != n || channel.iter().any(|s| s.len() != steps) {
            return Err(Error::usage(format!("channel {} is not {n} x {steps}", CHANNELS[c])));
        }
        for (node, series) in channel.iter().enumerate() {
            for (t, &v) in series.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::domain(format!(
                        "non-finite {} at node {} step {t}",
                        CHANNELS[c], node_ids[node]
                    )));
                }
                let bad = match c {
                    3 | 4 => v < 0.0 || v.fract() != 0.0,
                    5 => !(0.0..=1.0).contains(&v),
                    _ => false,
                };
                if bad {
                    return Err(Error::domain(format!(
                        "invalid {} value {v} at node {} step {t}",
                        CHANNELS[c], node_ids[node]
                    )));
                }
            }
        }
        let fit: Vec<f64> = channel.iter().flat_map(|s| s[..fit_end].iter().copied()).collect();
        let (m, s) = crate::graph::population_mean_std(&fit);
        mean[c] = m;
        std[c] = if s > 0.0 { s } else { 1.0 };
        for (node, series) in channel.iter().enumerate() {
            let row = (node * N_CHANNELS + c) * steps;
            for (t, &v) in series.iter().enumerate() {
                data[row + t] = (v - mean[c]) / std[c];
            }
        }
    }
    if labels.len() != n || labels.iter().any(|l| l.len() != steps) {
        return Err(Error::usage(format!("labels are not {n} x {steps}")));
    }
    let flat_labels: Vec<u8> = labels.into_iter().flatten().collect();
    let values = Tensor::new(vec![n, N_CHANNELS, steps], data)?;
    FeatureTensor::from_parts(values, flat_labels, grid, node_ids, NormStats { fit_end, mean, std })
}

/// Everything read from the raw input files.
#[derive(Clone, Debug, Default)]
pub struct RawInputs {
    pub gauges: Vec<GaugeStation>,
    pub events: Vec<Event>,
    /// `(node_id, unix seconds, flooded_fraction)`.
    pub road_status: Vec<(String, i64, f64)>,
}

/// Full pipeline: per-node gauge, event and activity channels plus labels,
/// normalized with statistics from steps `0..fit_end`.
pub fn build_feature_tensor(raw: &RawInputs, nodes: &[UnitNode], fit_end: usize) -> Result<FeatureTensor> {
    let grid = Grid::from_timestamps(&raw.road_status.iter().map(|r| r.1).collect::<Vec<_>>())?;
    let grid_times = grid.times();
    let n = nodes.len();

    // Gauge-level channels first, then blend per node.
    let mut per_gauge: Vec<[Vec<f64>; 3]> = Vec::with_capacity(raw.gauges.len());
    for g in &raw.gauges {
        let times: Vec<i64> = g.readings.iter().map(|r| r.timestamp).collect();
        let rain: Vec<f64> = g.readings.iter().map(|r| r.rain_increment_mm).collect();
        let elev: Vec<f64> = g.readings.iter().map(|r| r.water_elevation_m).collect();
        let ctx = |e: Error| e.context(format!("gauge {}", g.id));
        let rain_grid = resample_series(&times, &rain, &grid_times).map_err(ctx)?;
        let elev_grid = resample_series(&times, &elev, &grid_times).map_err(ctx)?;
        per_gauge.push([
            accumulate_rainfall(&rain_grid, RAIN_SHORT_STEPS).map_err(ctx)?,
            accumulate_rainfall(&rain_grid, RAIN_LONG_STEPS).map_err(ctx)?,
            water_ratio(&elev_grid, g.flood_threshold_elevation).map_err(ctx)?,
        ]);
    }
    let mut gauge_channels = [vec![], vec![], vec![]];
    for node in nodes {
        let w = nearest_two_gauges(node.x, node.y, &raw.gauges)?;
        for (c, out) in gauge_channels.iter_mut().enumerate() {
            out.push(blend_gauge_channel(&per_gauge[w[0].gauge][c], &per_gauge[w[1].gauge][c], &w)?);
        }
    }

    let of_kind = |k: EventKind| raw.events.iter().filter(|e| e.kind == k).cloned().collect::<Vec<_>>();
    let reports = aggregate_point_events(&of_kind(EventKind::Report311), nodes, &grid, None)?;
    let tweets = aggregate_point_events(&of_kind(EventKind::Tweet), nodes, &grid, None)?;
    let tiles = of_kind(EventKind::ActivityTile);
    let tile_map = tile_map_from_locations(&tiles, nodes)?;
    let activity = aggregate_activity(&tiles, &tile_map, n, &grid)?;

    let index: HashMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let mut labels: Vec<Vec<Option<u8>>> = vec![vec![None; grid.steps]; n];
    for (id, ts, frac) in &raw.road_status {
        let &node = index
            .get(id.as_str())
            .ok_or_else(|| Error::usage(format!("road status for unknown node {id}")))?;
        let t = ((ts - grid.start.timestamp()) / grid.step_seconds()) as usize;
        labels[node][t] = Some(label_flood_class(*frac)?);
    }
    let labels = labels
        .into_iter()
        .enumerate()
        .map(|(node, row)| {
            row.into_iter()
                .enumerate()
                .map(|(t, l)| {
                    l.ok_or_else(|| Error::usage(format!("no road status for node {} at step {t}", nodes[node].id)))
                })
                .collect::<Result<Vec<u8>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let [rain_2h, rain_24h, ratio] = gauge_channels;
    assemble(
        nodes.iter().map(|n| n.id.clone()).collect(),
        grid,
        [
            Some(rain_2h),
            Some(rain_24h),
            Some(ratio),
            Some(reports.counts),
            Some(tweets.counts),
            Some(activity.values),
        ],
        labels,
        fit_end,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::StaticFeatures;

    fn gauge(id: &str, x: f64, y: f64) -> GaugeStation {
        GaugeStation {
            id: id.into(),
            x,
            y,
            flood_threshold_elevation: 3.0,
            readings: vec![],
        }
    }

    fn node(id: &str, x: f64, y: f64) -> UnitNode {
        UnitNode {
            id: id.into(),
            x,
            y,
            static_features: StaticFeatures {
                in_floodplain: false,
                residential_ratio: 0.5,
                watershed_id: "w".into(),
                dist_coast: 0.0,
                dist_stream: 0.0,
            },
        }
    }

    fn grid(steps: usize) -> Grid {
        Grid::new(DateTime::from_timestamp(1_600_000_200 - 1_600_000_200 % 1800, 0).unwrap(), steps)
    }

    #[test]
    fn inverse_distance_weights() {
        let gs = vec![gauge("a", 1000.0, 0.0), gauge("b", -3000.0, 0.0), gauge("c", 9000.0, 0.0)];
        let w = nearest_two_gauges(0.0, 0.0, &gs).unwrap();
        assert_eq!((w[0].gauge, w[1].gauge), (0, 1));
        assert!((w[0].weight - 0.75).abs() < 1e-15 && (w[1].weight - 0.25).abs() < 1e-15);

        let gs = vec![gauge("b", 0.0, 5.0), gauge("a", 0.0, -5.0)];
        let w = nearest_two_gauges(0.0, 0.0, &gs).unwrap();
        assert_eq!(w[0].gauge, 1, "tie goes to lower id");
        assert_eq!((w[0].weight, w[1].weight), (0.5, 0.5));

        let gs = vec![gauge("a", 2.0, 2.0), gauge("b", 0.0, 0.0)];
        let w = nearest_two_gauges(2.0, 2.0, &gs).unwrap();
        assert_eq!(w, [GaugeWeight { gauge: 0, weight: 1.0 }, GaugeWeight { gauge: 1, weight: 0.0 }]);

        assert!(matches!(nearest_two_gauges(0.0, 0.0, &gs[..1]), Err(Error::Usage(_))));
    }

    #[test]
    fn resample_examples() {
        let h = 3600;
        let out = resample_series(&[0, 4 * h], &[0.2, 0.6], &[-h, 2 * h, 4 * h, 9 * h]).unwrap();
        assert!((out[1] - 0.4).abs() < 1e-15);
        assert_eq!(out[0], 0.2);
        assert_eq!(out[2], 0.6);
        assert_eq!(out[3], 0.6);

        let times = [0, 1800, 3600, 5400];
        let vals = [1.5, -2.0, 7.25, 0.1];
        assert_eq!(resample_series(&times, &vals, &times).unwrap(), vals);

        assert!(matches!(resample_series(&[0], &[1.0], &[0]), Err(Error::Usage(_))));
        assert!(matches!(resample_series(&[5, 5], &[1.0, 2.0], &[0]), Err(Error::Usage(_))));
    }

    #[test]
    fn rainfall_windows() {
        let out = accumulate_rainfall(&[5.0; 8], 4).unwrap();
        assert_eq!(out, vec![5.0, 10.0, 15.0, 20.0, 20.0, 20.0, 20.0, 20.0]);
        assert_eq!(accumulate_rainfall(&[0.0; 5], 4).unwrap(), vec![0.0; 5]);
        let mut impulse = vec![0.0; 20];
        impulse[10] = 7.0;
        let out = accumulate_rainfall(&impulse, 4).unwrap();
        for (t, v) in out.iter().enumerate() {
            assert_eq!(*v, if (10..=13).contains(&t) { 7.0 } else { 0.0 });
        }
        assert!(matches!(accumulate_rainfall(&[1.0, -0.5], 2), Err(Error::Domain(_))));
        assert!(matches!(accumulate_rainfall(&[1.0], 0), Err(Error::Usage(_))));
    }

    #[test]
    fn water_ratio_examples() {
        assert_eq!(water_ratio(&[3.0, 0.0, 4.5], 3.0).unwrap(), vec![1.0, 0.0, 1.5]);
        assert!(matches!(water_ratio(&[1.0], 0.0), Err(Error::Usage(_))));
    }

    #[test]
    fn blend_examples() {
        let w = [GaugeWeight { gauge: 0, weight: 0.75 }, GaugeWeight { gauge: 1, weight: 0.25 }];
        assert_eq!(blend_gauge_channel(&[10.0], &[20.0], &w).unwrap(), vec![12.5]);
        let s = [1.0, 2.5, -3.0];
        assert_eq!(blend_gauge_channel(&s, &s, &w).unwrap(), s);
        let one = [GaugeWeight { gauge: 0, weight: 1.0 }, GaugeWeight { gauge: 1, weight: 0.0 }];
        assert_eq!(blend_gauge_channel(&s, &[9.0, 9.0, 9.0], &one).unwrap(), s);
        assert!(matches!(blend_gauge_channel(&s, &[1.0], &w), Err(Error::Usage(_))));
    }

    fn point(ts: i64, x: f64, y: f64) -> Event {
        Event {
            kind: EventKind::Report311,
            timestamp: ts,
            x: Some(x),
            y: Some(y),
            tile_id: None,
            value: 1.0,
        }
    }

    #[test]
    fn point_event_aggregation() {
        let g = grid(4);
        let nodes = vec![node("a", 0.0, 0.0), node("b", 100.0, 0.0)];
        let none = aggregate_point_events(&[], &nodes, &g, None).unwrap();
        assert!(none.counts.iter().flatten().all(|&c| c == 0.0));

        let t2 = g.time(2);
        let evs = vec![point(t2 - 10, 90.0, 0.0), point(t2 - 1700, 99.0, 1.0), point(t2, 120.0, 0.0)];
        let out = aggregate_point_events(&evs, &nodes, &g, None).unwrap();
        assert_eq!(out.counts[1][2], 3.0, "boundary timestamp belongs to the interval ending at it");
        assert_eq!(out.assigned(), 3);

        let out = aggregate_point_events(&[point(t2 + 1, 0.0, 0.0)], &nodes, &g, None).unwrap();
        assert_eq!(out.counts[0][3], 1.0);

        let far = vec![point(t2, 5000.0, 0.0), point(g.time(3) + 1, 0.0, 0.0)];
        let out = aggregate_point_events(&far, &nodes, &g, Some(500.0)).unwrap();
        assert_eq!((out.snapped, out.outside_grid, out.assigned()), (1, 1, 1));
        assert_eq!(out.counts[1][2], 1.0);
    }

    fn tile(ts: i64, id: &str, v: f64) -> Event {
        Event {
            kind: EventKind::ActivityTile,
            timestamp: ts,
            x: None,
            y: None,
            tile_id: Some(id.into()),
            value: v,
        }
    }

    #[test]
    fn activity_aggregation() {
        let g = grid(17);
        let map: HashMap<String, usize> = [("t1".to_string(), 0), ("t2".to_string(), 0), ("t3".to_string(), 1)].into();
        let t0 = g.time(0);
        let four_h = 4 * 3600;
        let recs = vec![
            tile(t0, "t1", 0.2),
            tile(t0, "t2", 0.6),
            tile(t0 + four_h, "t1", 1.0),
            tile(t0 + four_h, "t2", 1.0),
            tile(t0, "t3", 0.5),
            tile(t0 + four_h, "t3", 0.5),
        ];
        let out = aggregate_activity(&recs, &map, 3, &g).unwrap();
        assert!((out.values[0][0] - 0.4).abs() < 1e-15);
        assert!(out.values[1].iter().all(|&v| v == 0.5));
        assert_eq!(out.uncovered, vec![2]);
        assert!(out.values[2].iter().all(|&v| v == 0.0));

        let ramp = vec![tile(t0, "t3", 0.0), tile(t0 + four_h, "t3", 1.0)];
        let out = aggregate_activity(&ramp, &map, 2, &g).unwrap();
        assert_eq!(out.values[1][4], 0.5);

        let bad = vec![tile(t0, "t1", 1.2)];
        assert!(matches!(aggregate_activity(&bad, &map, 2, &g), Err(Error::Domain(_))));
    }

    #[test]
    fn label_thresholds() {
        assert_eq!(label_flood_class(0.005).unwrap(), 0);
        assert_eq!(label_flood_class(0.05).unwrap(), 1);
        assert_eq!(label_flood_class(0.15).unwrap(), 2);
        assert_eq!(label_flood_class(0.01).unwrap(), 1);
        assert_eq!(label_flood_class(0.10).unwrap(), 1);
        assert!(matches!(label_flood_class(1.5), Err(Error::Domain(_))));
        assert!(matches!(label_flood_class(-0.1), Err(Error::Domain(_))));
    }

    fn zeros(n: usize, t: usize) -> Vec<Vec<f64>> {
        vec![vec![0.0; t]; n]
    }

    #[test]
    fn assemble_zero_inputs() {
        let chans = std::array::from_fn(|_| Some(zeros(2, 4)));
        let ft = assemble(vec!["a".into(), "b".into()], grid(4), chans, vec![vec![0; 4]; 2], 4).unwrap();
        assert!(ft.values().data().iter().all(|&v| v == 0.0));
        assert!(ft.labels().iter().all(|&l| l == 0));
        assert_eq!(ft.values().shape(), &[2, 6, 4]);
    }

    #[test]
    fn assemble_normalizes_on_fit_span() {
        // Channel 0: fit span values {1, 5} → mean 3, std 2; value 5 → 1.0.
        let mut chans: [Option<Vec<Vec<f64>>>; 6] = std::array::from_fn(|_| Some(zeros(1, 3)));
        chans[0] = Some(vec![vec![1.0, 5.0, 5.0]]);
        let ft = assemble(vec!["a".into()], grid(3), chans, vec![vec![0; 3]], 2).unwrap();
        assert_eq!(ft.norm().mean[0], 3.0);
        assert_eq!(ft.norm().std[0], 2.0);
        assert_eq!(ft.values().get(&[0, 0, 2]), 1.0);
    }

    #[test]
    fn assemble_errors() {
        let mut chans: [Option<Vec<Vec<f64>>>; 6] = std::array::from_fn(|_| Some(zeros(1, 3)));
        chans[4] = None;
        assert!(matches!(
            assemble(vec!["a".into()], grid(3), chans, vec![vec![0; 3]], 2),
            Err(Error::Usage(_))
        ));
        let mut chans: [Option<Vec<Vec<f64>>>; 6] = std::array::from_fn(|_| Some(zeros(1, 3)));
        chans[1] = Some(vec![vec![0.0, f64::NAN, 0.0]]);
        let err = assemble(vec!["a".into()], grid(3), chans, vec![vec![0; 3]], 2).unwrap_err();
        assert!(matches!(err, Error::Domain(ref m) if m.contains("rain_24h") && m.contains("step 1")));
    }

    #[test]
    fn grid_interval_index() {
        let g = grid(3);
        assert_eq!(g.interval_index(g.time(0)), Some(0));
        assert_eq!(g.interval_index(g.time(0) - 1799), Some(0));
        assert_eq!(g.interval_index(g.time(0) - 1800), None);
        assert_eq!(g.interval_index(g.time(1)), Some(1));
        assert_eq!(g.interval_index(g.time(2) + 1), None);
        assert!(Grid::from_timestamps(&[0, 1800, 5400]).is_err());
    }
}
