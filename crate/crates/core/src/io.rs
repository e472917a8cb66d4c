//! File formats.
//!
//! CSV inputs (all timestamps ISO-8601 UTC):
//!
//! | file                 | columns                                                                      |
//! |----------------------|------------------------------------------------------------------------------|
//! | `nodes.csv`          | `id,x,y,in_floodplain,residential_ratio,watershed_id,dist_coast,dist_stream` |
//! | `gauges.csv`         | `id,x,y,threshold`                                                           |
//! | `gauge_readings.csv` | `gauge_id,timestamp,rain_increment_mm,water_elevation_m`                     |
//! | `events.csv`         | `kind,timestamp,x,y,tile_id,value`                                           |
//! | `road_status.csv`    | `node_id,timestamp,flooded_fraction`                                         |
//!
//! `dataset.bin` holds the normalized feature tensor:
//! `"NCFT"`, `u32` version, `u32` rank, `rank × u64` dims, row-major `f64`
//! values, then one `u8` label per `(node, step)`. All integers and floats
//! are little-endian. `dataset.json` carries node ids, channel order, grid,
//! normalization statistics and the SHA-256 of `dataset.bin`.
//!
//! Weight files: `"NCWT"`, `u32` version, `u64` header length, a JSON header
//! (model configuration, channel order, group names and shapes, payload
//! digest), then every group's `f64` values in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{
    Event, EventKind, FeatureTensor, GaugeReading, GaugeStation, Grid, NormStats, RawInputs, CHANNELS, N_CHANNELS,
};
use crate::graph::{StaticFeatures, UnitNode};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::trainer::{LeaderboardEntry, Prediction};

pub const NODES_FILE: &str = "nodes.csv";
pub const ADJACENCY_FILE: &str = "adjacency.csv";
pub const GAUGES_FILE: &str = "gauges.csv";
pub const READINGS_FILE: &str = "gauge_readings.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const ROAD_STATUS_FILE: &str = "road_status.csv";
pub const DATASET_FILE: &str = "dataset.bin";
pub const DATASET_META_FILE: &str = "dataset.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const LEADERBOARD_FILE: &str = "leaderboard.csv";

const DATASET_MAGIC: &[u8; 4] = b"NCFT";
const WEIGHTS_MAGIC: &[u8; 4] = b"NCWT";
const FORMAT_VERSION: u32 = 1;

pub fn parse_timestamp(s: &str) -> Result<i64> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|t| t.timestamp())
        .map_err(|e| Error::parse(format!("bad timestamp {s:?}: {e}")))
}

pub fn format_timestamp(unix: i64) -> String {
    DateTime::<Utc>::from_timestamp(unix, 0)
        .expect("timestamp in range")
        .to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::parse(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(format!("{} line {line}: {other:?}", path.display())),
    }
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| csv_error(path, e))
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_bytes(path, &bytes)
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    node_id: &'a str,
    timestep: usize,
    prob_no: f64,
    prob_moderate: f64,
    prob_severe: f64,
    pred_class: usize,
}

/// `node_id,timestep,prob_no,prob_moderate,prob_severe,pred_class`, with
/// `timestep` the labelled grid index.
pub fn write_predictions(path: &Path, node_ids: &[String], predictions: &[Prediction]) -> Result<()> {
    write_rows(
        path,
        predictions.iter().map(|p| PredictionRow {
            node_id: &node_ids[p.node],
            timestep: p.timestep,
            prob_no: p.probs[0],
            prob_moderate: p.probs[1],
            prob_severe: p.probs[2],
            pred_class: p.class,
        }),
    )
}

pub fn write_leaderboard(path: &Path, entries: &[LeaderboardEntry]) -> Result<()> {
    write_rows(path, entries)
}

#[derive(Serialize, Deserialize)]
struct NodeRow {
    id: String,
    x: f64,
    y: f64,
    in_floodplain: bool,
    residential_ratio: f64,
    watershed_id: String,
    dist_coast: f64,
    dist_stream: f64,
}

pub fn read_nodes(path: &Path) -> Result<Vec<UnitNode>> {
    let rows: Vec<NodeRow> = read_rows(path)?;
    rows.into_iter()
        .map(|r| {
            let node = UnitNode {
                id: r.id,
                x: r.x,
                y: r.y,
                static_features: StaticFeatures {
                    in_floodplain: r.in_floodplain,
                    residential_ratio: r.residential_ratio,
                    watershed_id: r.watershed_id,
                    dist_coast: r.dist_coast,
                    dist_stream: r.dist_stream,
                },
            };
            node.static_features
                .validate()
                .map_err(|e| e.context(format!("{} node {}", path.display(), node.id)))?;
            Ok(node)
        })
        .collect()
}

pub fn write_nodes(path: &Path, nodes: &[UnitNode]) -> Result<()> {
    write_rows(
        path,
        nodes.iter().map(|n| NodeRow {
            id: n.id.clone(),
            x: n.x,
            y: n.y,
            in_floodplain: n.static_features.in_floodplain,
            residential_ratio: n.static_features.residential_ratio,
            watershed_id: n.static_features.watershed_id.clone(),
            dist_coast: n.static_features.dist_coast,
            dist_stream: n.static_features.dist_stream,
        }),
    )
}

#[derive(Serialize, Deserialize)]
struct EdgeRow {
    id_i: String,
    id_j: String,
    weight: f64,
}

/// Upper-triangle nonzero edges.
pub fn write_adjacency(path: &Path, ids: &[String], edges: &[(usize, usize, f64)]) -> Result<()> {
    write_rows(
        path,
        edges.iter().map(|&(i, j, w)| EdgeRow {
            id_i: ids[i].clone(),
            id_j: ids[j].clone(),
            weight: w,
        }),
    )
}

pub fn read_adjacency(path: &Path) -> Result<Vec<(String, String, f64)>> {
    let rows: Vec<EdgeRow> = read_rows(path)?;
    Ok(rows.into_iter().map(|r| (r.id_i, r.id_j, r.weight)).collect())
}

#[derive(Serialize, Deserialize)]
struct GaugeRow {
    id: String,
    x: f64,
    y: f64,
    threshold: f64,
}

#[derive(Serialize, Deserialize)]
struct ReadingRow {
    gauge_id: String,
    timestamp: String,
    rain_increment_mm: f64,
    water_elevation_m: f64,
}

/// Gauges with their readings sorted by time.
pub fn read_gauges(gauges: &Path, readings: &Path) -> Result<Vec<GaugeStation>> {
    let mut stations: Vec<GaugeStation> = read_rows::<GaugeRow>(gauges)?
        .into_iter()
        .map(|g| GaugeStation {
            id: g.id,
            x: g.x,
            y: g.y,
            flood_threshold_elevation: g.threshold,
            readings: vec![],
        })
        .collect();
    let index: BTreeMap<String, usize> = stations.iter().enumerate().map(|(i, g)| (g.id.clone(), i)).collect();
    for r in read_rows::<ReadingRow>(readings)? {
        let &i = index
            .get(&r.gauge_id)
            .ok_or_else(|| Error::parse(format!("{}: unknown gauge {}", readings.display(), r.gauge_id)))?;
        stations[i].readings.push(GaugeReading {
            timestamp: parse_timestamp(&r.timestamp)?,
            rain_increment_mm: r.rain_increment_mm,
            water_elevation_m: r.water_elevation_m,
        });
    }
    for s in &mut stations {
        s.readings.sort_by_key(|r| r.timestamp);
    }
    Ok(stations)
}

pub fn write_gauges(gauges: &Path, readings: &Path, stations: &[GaugeStation]) -> Result<()> {
    write_rows(
        gauges,
        stations.iter().map(|g| GaugeRow {
            id: g.id.clone(),
            x: g.x,
            y: g.y,
            threshold: g.flood_threshold_elevation,
        }),
    )?;
    write_rows(
        readings,
        stations.iter().flat_map(|g| {
            g.readings.iter().map(|r| ReadingRow {
                gauge_id: g.id.clone(),
                timestamp: format_timestamp(r.timestamp),
                rain_increment_mm: r.rain_increment_mm,
                water_elevation_m: r.water_elevation_m,
            })
        }),
    )
}

#[derive(Serialize, Deserialize)]
struct EventRow {
    kind: String,
    timestamp: String,
    x: Option<f64>,
    y: Option<f64>,
    tile_id: Option<String>,
    value: f64,
}

pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    read_rows::<EventRow>(path)?
        .into_iter()
        .map(|r| {
            Ok(Event {
                kind: EventKind::parse(&r.kind)?,
                timestamp: parse_timestamp(&r.timestamp)?,
                x: r.x,
                y: r.y,
                tile_id: r.tile_id.filter(|t| !t.is_empty()),
                value: r.value,
            })
        })
        .collect()
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<()> {
    write_rows(
        path,
        events.iter().map(|e| EventRow {
            kind: e.kind.as_str().into(),
            timestamp: format_timestamp(e.timestamp),
            x: e.x,
            y: e.y,
            tile_id: e.tile_id.clone(),
            value: e.value,
        }),
    )
}

#[derive(Serialize, Deserialize)]
struct StatusRow {
    node_id: String,
    timestamp: String,
    flooded_fraction: f64,
}

pub fn read_road_status(path: &Path) -> Result<Vec<(String, i64, f64)>> {
    read_rows::<StatusRow>(path)?
        .into_iter()
        .map(|r| Ok((r.node_id, parse_timestamp(&r.timestamp)?, r.flooded_fraction)))
        .collect()
}

pub fn write_road_status(path: &Path, rows: &[(String, i64, f64)]) -> Result<()> {
    write_rows(
        path,
        rows.iter().map(|(id, ts, f)| StatusRow {
            node_id: id.clone(),
            timestamp: format_timestamp(*ts),
            flooded_fraction: *f,
        }),
    )
}

/// Reads the node table and every raw stream from a scenario directory.
pub fn read_raw_dir(dir: &Path) -> Result<(Vec<UnitNode>, RawInputs)> {
    let nodes = read_nodes(&dir.join(NODES_FILE))?;
    let raw = RawInputs {
        gauges: read_gauges(&dir.join(GAUGES_FILE), &dir.join(READINGS_FILE))?,
        events: read_events(&dir.join(EVENTS_FILE))?,
        road_status: read_road_status(&dir.join(ROAD_STATUS_FILE))?,
    };
    Ok((nodes, raw))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub shape: Vec<usize>,
    pub node_ids: Vec<String>,
    pub channels: Vec<String>,
    pub grid: Grid,
    pub normalization: NormStats,
    pub payload_sha256: String,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Little-endian cursor over a byte buffer.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::parse(format!("{}: truncated at byte {}", self.path.display(), self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::parse("payload size overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        if self.take(4)? != expected {
            return Err(Error::parse(format!(
                "{}: not a {} file",
                self.path.display(),
                String::from_utf8_lossy(expected)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::parse(format!(
                "{}: unsupported format version {version}",
                self.path.display()
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::parse(format!("{}: trailing bytes", self.path.display())));
        }
        Ok(())
    }
}

pub fn dataset_bytes(ft: &FeatureTensor) -> Vec<u8> {
    let values = ft.values();
    let mut out = Vec::with_capacity(16 + 8 * values.len() + ft.labels().len());
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, values.rank() as u32);
    for &d in values.shape() {
        put_u64(&mut out, d as u64);
    }
    for v in values.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(ft.labels());
    out
}

/// Writes `dataset.bin` and `dataset.json` into `dir`; returns their paths.
pub fn write_dataset(dir: &Path, ft: &FeatureTensor) -> Result<Vec<PathBuf>> {
    let bytes = dataset_bytes(ft);
    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        shape: ft.values().shape().to_vec(),
        node_ids: ft.node_ids().to_vec(),
        channels: CHANNELS.iter().map(|c| c.to_string()).collect(),
        grid: ft.grid().clone(),
        normalization: ft.norm().clone(),
        payload_sha256: sha256_hex(&bytes),
    };
    let bin = dir.join(DATASET_FILE);
    let json = dir.join(DATASET_META_FILE);
    write_bytes(&bin, &bytes)?;
    write_json(&json, &meta)?;
    Ok(vec![bin, json])
}

pub fn read_dataset(dir: &Path) -> Result<FeatureTensor> {
    let bin = dir.join(DATASET_FILE);
    let meta: DatasetMeta = read_json(&dir.join(DATASET_META_FILE))?;
    let bytes = read_bytes(&bin)?;
    if sha256_hex(&bytes) != meta.payload_sha256 {
        return Err(Error::parse(format!("{}: checksum mismatch", bin.display())));
    }
    if meta.channels != CHANNELS {
        return Err(Error::parse(format!("{}: unexpected channel order {:?}", bin.display(), meta.channels)));
    }
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: &bin,
    };
    r.magic(DATASET_MAGIC)?;
    let rank = r.u32()? as usize;
    let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    if shape != meta.shape || rank != 3 || shape[1] != N_CHANNELS {
        return Err(Error::parse(format!("{}: shape {shape:?} disagrees with sidecar", bin.display())));
    }
    let values = r.f64s(shape.iter().product())?;
    let labels = r.take(shape[0] * shape[2])?.to_vec();
    r.finish()?;
    FeatureTensor::from_parts(Tensor::new(shape, values)?, labels, meta.grid, meta.node_ids, meta.normalization)
        .map_err(|e| e.context(bin.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub channel_order: Vec<String>,
    pub groups: Vec<GroupInfo>,
    pub payload_sha256: String,
}

pub fn weights_bytes(params: &ModelParams) -> Vec<u8> {
    let mut payload = Vec::with_capacity(8 * params.n_scalars());
    for t in params.tensors() {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = WeightsHeader {
        format_version: FORMAT_VERSION,
        model: params.config().clone(),
        channel_order: CHANNELS.iter().map(|c| c.to_string()).collect(),
        groups: ModelParams::group_names(params.config())
            .into_iter()
            .zip(params.tensors())
            .map(|(name, t)| GroupInfo {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
        payload_sha256: sha256_hex(&payload),
    };
    let header = serde_json::to_vec(&header).expect("serializable header");
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(WEIGHTS_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u64(&mut out, header.len() as u64);
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn write_weights(path: &Path, params: &ModelParams) -> Result<()> {
    write_bytes(path, &weights_bytes(params))
}

pub fn read_weights(path: &Path) -> Result<ModelParams> {
    let bytes = read_bytes(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    r.magic(WEIGHTS_MAGIC)?;
    let header_len = r.u64()? as usize;
    let header: WeightsHeader = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::parse(format!("{}: bad header: {e}", path.display())))?;
    if header.channel_order != CHANNELS {
        return Err(Error::parse(format!("{}: unexpected channel order", path.display())));
    }
    let payload = &bytes[r.pos..];
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(Error::parse(format!("{}: payload checksum mismatch", path.display())));
    }
    let expected = ModelParams::group_names(&header.model);
    let names: Vec<&str> = header.groups.iter().map(|g| g.name.as_str()).collect();
    if names != expected {
        return Err(Error::parse(format!("{}: parameter groups do not match the model", path.display())));
    }
    let tensors = header
        .groups
        .iter()
        .map(|g| Tensor::new(g.shape.clone(), r.f64s(g.shape.iter().product())?))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    ModelParams::from_groups(header.model, tensors).map_err(|e| e.context(path.display()))
}
