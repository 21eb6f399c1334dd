//! Per-layer latency database keyed by (model, stage, context bucket, backend).
//!
//! The database is the simulator's only performance model. A (model, stage,
//! backend) triple is either *flat* (a single entry at context 0, used by
//! single-pass networks) or *bucketed* (one entry per bucket of the token
//! grid). Lookups on bucketed triples round the context up to the next
//! bucket, capping at the largest one. A missing triple means the backend
//! cannot run that model stage.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Default token grid for bucketed entries.
pub const DEFAULT_BUCKET_GRID: [u32; 8] = [16, 32, 64, 128, 256, 512, 1024, 2048];

const CALIBRATED_CSV: &str = include_str!("../data/calibrated_db.csv");

/// Backend device class. The declaration order is the latency tie-break
/// order: NPU before GPU before CPU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BackendKind {
    #[serde(rename = "NPU")]
    Npu,
    #[serde(rename = "GPU")]
    Gpu,
    #[serde(rename = "CPU")]
    Cpu,
}

impl BackendKind {
    pub const ALL: [BackendKind; 3] = [BackendKind::Npu, BackendKind::Gpu, BackendKind::Cpu];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Npu => "NPU",
            BackendKind::Gpu => "GPU",
            BackendKind::Cpu => "CPU",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NPU" => Ok(BackendKind::Npu),
            "GPU" => Ok(BackendKind::Gpu),
            "CPU" => Ok(BackendKind::Cpu),
            other => Err(format!("unknown backend `{other}`")),
        }
    }
}

/// Execution stage of a model, without the decode iteration index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageKind {
    Forward,
    Prefill,
    Decode,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Forward => "Forward",
            StageKind::Prefill => "Prefill",
            StageKind::Decode => "Decode",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "forward" => Ok(StageKind::Forward),
            "prefill" => Ok(StageKind::Prefill),
            "decode" => Ok(StageKind::Decode),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LatencyKey {
    pub model: String,
    pub stage: StageKind,
    /// Token count; 0 for unbucketed (single-pass) entries.
    pub context_bucket: u32,
    pub backend: BackendKind,
}

impl LatencyKey {
    pub fn new(model: impl Into<String>, stage: StageKind, context: u32, backend: BackendKind) -> Self {
        LatencyKey { model: model.into(), stage, context_bucket: context, backend }
    }
}

impl fmt::Display for LatencyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.model, self.stage, self.context_bucket, self.backend)
    }
}

/// One row of the tabular form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub model: String,
    pub stage: String,
    pub context: u32,
    pub backend: String,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
enum Coverage {
    Flat(f64),
    Bucketed(BTreeMap<u32, f64>),
}

type Triple = (String, StageKind, BackendKind);

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyDatabase {
    entries: BTreeMap<Triple, Coverage>,
    grid: Vec<u32>,
}

impl LatencyDatabase {
    /// The bundled database calibrated to the reference measurements.
    pub fn default_calibrated() -> Self {
        Self::from_csv_str(CALIBRATED_CSV).expect("bundled latency database is valid")
    }

    /// The bundled CSV text, for export.
    pub fn calibrated_csv() -> &'static str {
        CALIBRATED_CSV
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv_str(&text)
    }

    /// Parses `model,stage,context,backend,latency_ms` rows; `#` lines are comments.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader =
            csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::MalformedRow { line: 0, reason: e.to_string() })?.clone();
        let expected = ["model", "stage", "context", "backend", "latency_ms"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::MalformedRow { line: 0, reason: format!("header must be {}", expected.join(",")) });
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::MalformedRow {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                reason: e.to_string(),
            })?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let row: LatencyRow =
                record.deserialize(Some(&headers)).map_err(|e| Error::MalformedRow { line, reason: e.to_string() })?;
            rows.push((line, row));
        }
        let grid: Vec<u32> = {
            let mut g: Vec<u32> = rows.iter().map(|(_, r)| r.context).filter(|&c| c > 0).collect();
            g.sort_unstable();
            g.dedup();
            if g.is_empty() {
                DEFAULT_BUCKET_GRID.to_vec()
            } else {
                g
            }
        };
        Self::build(rows, grid)
    }

    /// Builds a database from rows over an explicit bucket grid.
    pub fn from_rows(rows: impl IntoIterator<Item = LatencyRow>, grid: &[u32]) -> Result<Self> {
        let mut g = grid.to_vec();
        g.sort_unstable();
        g.dedup();
        Self::build(rows.into_iter().map(|r| (0, r)).collect(), g)
    }

    fn build(rows: Vec<(u64, LatencyRow)>, grid: Vec<u32>) -> Result<Self> {
        let mut entries: BTreeMap<Triple, Coverage> = BTreeMap::new();
        for (line, row) in rows {
            let stage: StageKind = row.stage.parse().map_err(|reason| Error::MalformedRow { line, reason })?;
            let backend: BackendKind = row.backend.parse().map_err(|reason| Error::MalformedRow { line, reason })?;
            let model = row.model.trim().to_string();
            if model.is_empty() {
                return Err(Error::MalformedRow { line, reason: "empty model".into() });
            }
            let key = LatencyKey::new(model.clone(), stage, row.context, backend);
            if !(row.latency_ms.is_finite() && row.latency_ms > 0.0) {
                return Err(Error::NonPositiveLatency { key: key.to_string(), latency: row.latency_ms });
            }
            if row.context > 0 && grid.binary_search(&row.context).is_err() {
                return Err(Error::MalformedRow {
                    line,
                    reason: format!("context {} is not a grid bucket", row.context),
                });
            }
            let slot = entries.entry((model, stage, backend));
            use std::collections::btree_map::Entry;
            match (slot, row.context) {
                (Entry::Vacant(v), 0) => {
                    v.insert(Coverage::Flat(row.latency_ms));
                }
                (Entry::Vacant(v), c) => {
                    v.insert(Coverage::Bucketed(BTreeMap::from([(c, row.latency_ms)])));
                }
                (Entry::Occupied(mut o), c) => match (o.get_mut(), c) {
                    (Coverage::Bucketed(map), c) if c > 0 => {
                        if map.insert(c, row.latency_ms).is_some() {
                            return Err(Error::DuplicateKey(key.to_string()));
                        }
                    }
                    (Coverage::Flat(_), 0) => return Err(Error::DuplicateKey(key.to_string())),
                    _ => return Err(Error::RaggedCoverage(key.to_string())),
                },
            }
        }
        for ((model, stage, backend), cov) in &entries {
            if let Coverage::Bucketed(map) = cov {
                if map.len() != grid.len() {
                    return Err(Error::RaggedCoverage(format!("({model},{stage},{backend})")));
                }
            }
        }
        Ok(LatencyDatabase { entries, grid })
    }

    pub fn grid(&self) -> &[u32] {
        &self.grid
    }

    pub fn max_bucket(&self) -> u32 {
        self.grid.last().copied().unwrap_or(0)
    }

    /// Bucket a context maps to: the smallest grid value >= context, capped at the largest.
    pub fn bucket_for(&self, context: u32) -> u32 {
        self.grid.iter().copied().find(|&b| b >= context).unwrap_or_else(|| self.max_bucket())
    }

    pub fn supports(&self, model: &str, stage: StageKind, backend: BackendKind) -> bool {
        self.entries.contains_key(&(model.to_string(), stage, backend))
    }

    /// Backend kinds that can run `(model, stage)`, in tie-break order.
    pub fn supported_backends(&self, model: &str, stage: StageKind) -> Vec<BackendKind> {
        BackendKind::ALL.into_iter().filter(|&b| self.supports(model, stage, b)).collect()
    }

    /// Per-layer latency in milliseconds.
    pub fn lookup(&self, model: &str, stage: StageKind, context: u32, backend: BackendKind) -> Result<f64> {
        match self.entries.get(&(model.to_string(), stage, backend)) {
            None => Err(Error::BackendUnsupported(format!("({model},{stage},{backend})"))),
            Some(Coverage::Flat(ms)) => Ok(*ms),
            Some(Coverage::Bucketed(map)) => {
                let bucket = self.bucket_for(context);
                map.get(&bucket)
                    .copied()
                    .ok_or_else(|| Error::Invariant(format!("bucket {bucket} missing for ({model},{stage},{backend})")))
            }
        }
    }

    pub fn lookup_key(&self, key: &LatencyKey) -> Result<f64> {
        self.lookup(&key.model, key.stage, key.context_bucket, key.backend)
    }

    /// Fastest supported backend among `candidates`; ties go NPU < GPU < CPU.
    pub fn best_backend(
        &self,
        model: &str,
        stage: StageKind,
        context: u32,
        candidates: &[BackendKind],
    ) -> Result<BackendKind> {
        let mut best: Option<(f64, BackendKind)> = None;
        for &b in candidates {
            let Ok(ms) = self.lookup(model, stage, context, b) else { continue };
            let better = match best {
                None => true,
                Some((bm, bk)) => ms < bm || (ms == bm && b < bk),
            };
            if better {
                best = Some((ms, b));
            }
        }
        best.map(|(_, b)| b)
            .ok_or_else(|| Error::BackendUnsupported(format!("no candidate backend supports ({model},{stage})")))
    }

    /// All entries as (key, latency) pairs, flat entries at context 0.
    pub fn entries(&self) -> impl Iterator<Item = (LatencyKey, f64)> + '_ {
        self.entries.iter().flat_map(|((model, stage, backend), cov)| {
            let pairs: Vec<(u32, f64)> = match cov {
                Coverage::Flat(ms) => vec![(0, *ms)],
                Coverage::Bucketed(map) => map.iter().map(|(&c, &ms)| (c, ms)).collect(),
            };
            pairs.into_iter().map(move |(c, ms)| (LatencyKey::new(model.clone(), *stage, c, *backend), ms))
        })
    }

    pub fn len(&self) -> usize {
        self.entries().count()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
