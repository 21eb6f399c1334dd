//! Append-only simulation trace and its line-delimited JSON export.

use crate::error::{Error, Result};
use crate::latencydb::BackendKind;
use crate::time::{us_to_ms, Deadline, Micros};
use crate::workload::{RequestStatus, Stage};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    RequestArrive,
    LayerStart,
    LayerFinish,
    LayerAbort,
    TokenEmit,
    RequestComplete,
    RequestDrop,
    RequestStarve,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub t_us: Micros,
    pub kind: TraceKind,
    pub request_id: u64,
    /// Index into `Trace::models`.
    pub model: usize,
    pub stage: Option<Stage>,
    /// Layer index; the token index for `TokenEmit`.
    pub layer: Option<u32>,
    /// Index into `Trace::backends`.
    pub backend: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub id: String,
    pub kind: BackendKind,
}

impl BackendSpec {
    pub fn new(id: impl Into<String>, kind: BackendKind) -> Self {
        BackendSpec { id: id.into(), kind }
    }
}

/// One CPU, one GPU and one NPU, as on the profiled laptop SoC.
pub fn default_backends() -> Vec<BackendSpec> {
    vec![
        BackendSpec::new("cpu0", BackendKind::Cpu),
        BackendSpec::new("gpu0", BackendKind::Gpu),
        BackendSpec::new("npu0", BackendKind::Npu),
    ]
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RequestInfo {
    pub request_id: u64,
    pub model: usize,
    pub arrival_us: Micros,
    pub deadline: Deadline,
    /// Prompt job the request belongs to, for generative lineages.
    pub prompt: Option<u32>,
    pub status: RequestStatus,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub scenario_id: String,
    pub models: Vec<String>,
    pub backends: Vec<BackendSpec>,
    /// Indexed by request id.
    pub requests: Vec<RequestInfo>,
    pub records: Vec<TraceRecord>,
    /// Time of the last processed event.
    pub horizon_us: Micros,
}

#[derive(Serialize)]
struct JsonRecord<'a> {
    t_ms: f64,
    kind: TraceKind,
    request_id: u64,
    model: &'a str,
    stage: Option<String>,
    layer: Option<u32>,
    backend: Option<&'a str>,
}

impl Trace {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records_of(&self, kind: TraceKind) -> impl Iterator<Item = &TraceRecord> + '_ {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    /// Writes one JSON object per record with a fixed field order.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            let rec = JsonRecord {
                t_ms: us_to_ms(r.t_us),
                kind: r.kind,
                request_id: r.request_id,
                model: &self.models[r.model],
                stage: r.stage.map(|s| s.to_string()),
                layer: r.layer,
                backend: r.backend.map(|b| self.backends[b].id.as_str()),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// Checks structural well-formedness: ordering, pairing of layer
    /// intervals, backend exclusivity, and one terminal record per request.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::MalformedTrace(msg));
        let mut open: HashMap<usize, (u64, Option<Stage>, Option<u32>)> = HashMap::new();
        let mut running: HashMap<u64, usize> = HashMap::new();
        let mut terminal: HashMap<u64, TraceKind> = HashMap::new();
        let mut last = 0;
        for (i, r) in self.records.iter().enumerate() {
            if r.t_us < last {
                return bad(format!("record {i} goes back in time"));
            }
            last = r.t_us;
            let Some(info) = self.requests.get(r.request_id as usize) else {
                return bad(format!("record {i} names unknown request {}", r.request_id));
            };
            if r.t_us < info.arrival_us {
                return bad(format!("record {i} precedes the arrival of request {}", r.request_id));
            }
            if r.model >= self.models.len() || r.model != info.model {
                return bad(format!("record {i} has a mismatched model"));
            }
            if let Some(&k) = terminal.get(&r.request_id) {
                return bad(format!("record {i} follows {k:?} of request {}", r.request_id));
            }
            match r.kind {
                TraceKind::LayerStart => {
                    let Some(b) = r.backend.filter(|b| *b < self.backends.len()) else {
                        return bad(format!("record {i}: layer start without backend"));
                    };
                    if open.contains_key(&b) {
                        return bad(format!("record {i}: backend {} already busy", self.backends[b].id));
                    }
                    if running.contains_key(&r.request_id) {
                        return bad(format!("record {i}: request {} already running", r.request_id));
                    }
                    open.insert(b, (r.request_id, r.stage, r.layer));
                    running.insert(r.request_id, b);
                }
                TraceKind::LayerFinish | TraceKind::LayerAbort => {
                    let Some(b) = r.backend else {
                        return bad(format!("record {i}: layer close without backend"));
                    };
                    match open.remove(&b) {
                        Some(o) if o == (r.request_id, r.stage, r.layer) => {
                            running.remove(&r.request_id);
                        }
                        _ => return bad(format!("record {i}: closes a layer that is not open")),
                    }
                }
                TraceKind::RequestComplete | TraceKind::RequestDrop | TraceKind::RequestStarve => {
                    if running.contains_key(&r.request_id) {
                        return bad(format!("record {i}: request {} ends while running", r.request_id));
                    }
                    terminal.insert(r.request_id, r.kind);
                }
                TraceKind::RequestArrive | TraceKind::TokenEmit => {}
            }
        }
        if let Some((b, _)) = open.iter().next() {
            return bad(format!("layer on backend {} never closed", self.backends[*b].id));
        }
        for info in &self.requests {
            let expect = match info.status {
                RequestStatus::Complete => TraceKind::RequestComplete,
                RequestStatus::Dropped => TraceKind::RequestDrop,
                RequestStatus::Starved => TraceKind::RequestStarve,
                s => return bad(format!("request {} left in state {s:?}", info.request_id)),
            };
            if terminal.get(&info.request_id) != Some(&expect) {
                return bad(format!("request {} lacks its terminal record", info.request_id));
            }
        }
        Ok(())
    }
}
