//! Reduces traces to violation rates, token latencies and backend partitions.

use crate::engine::{Trace, TraceKind};
use crate::error::{Error, Result};
use crate::latencydb::{BackendKind, StageKind};
use crate::policies::PolicyId;
use crate::time::us_to_ms;
use crate::workload::{RequestStatus, ScenarioSpec};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelStats {
    pub model: String,
    pub issued: u64,
    pub completed: u64,
    pub dropped: u64,
    /// Percentage of frames not completed by their deadline; `None` for
    /// models without a frame rate or without any issued frame.
    pub violation_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartitionEntry {
    pub stage: StageKind,
    pub backend: BackendKind,
    pub layers: u64,
    /// Share of the stage's completed layers that ran on this backend kind.
    pub pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub per_model: Vec<ModelStats>,
    /// Frame-weighted over all fps-bearing models.
    pub aggregate_violation_pct: Option<f64>,
    pub ttft_ms: Option<f64>,
    pub tpt_ms: Option<f64>,
    pub e2e_ms: Option<f64>,
    pub starved: bool,
    pub tokens_emitted: u64,
    pub backend_partition: Vec<PartitionEntry>,
    pub horizon_ms: f64,
}

impl MetricsReport {
    pub fn model(&self, id: &str) -> Option<&ModelStats> {
        self.per_model.iter().find(|m| m.model == id)
    }

    /// Share (percent) of `stage` layers that ran on `backend`; 0 if none did.
    pub fn partition_pct(&self, stage: StageKind, backend: BackendKind) -> f64 {
        self.backend_partition.iter().find(|p| p.stage == stage && p.backend == backend).map_or(0.0, |p| p.pct)
    }

    pub fn decode_npu_share(&self) -> f64 {
        self.partition_pct(StageKind::Decode, BackendKind::Npu)
    }

    /// Canonical JSON with values rounded for presentation.
    pub fn to_json(&self, policy: Option<PolicyId>) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        round_json(&mut v);
        if let (Some(p), Some(obj)) = (policy, v.as_object_mut()) {
            obj.insert("policy".into(), serde_json::Value::String(p.name().into()));
        }
        serde_json::to_string_pretty(&v).expect("value serializes")
    }
}

fn round_json(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("f64");
            *v = serde_json::json!(round1(x));
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(round_json),
        serde_json::Value::Object(o) => o.values_mut().for_each(round_json),
        _ => {}
    }
}

/// Rounds to one decimal for display.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn pct(part: u64, whole: u64) -> f64 {
    100.0 * part as f64 / whole as f64
}

/// Reduces a well-formed trace of `scenario` to a report.
pub fn compute(trace: &Trace, scenario: &ScenarioSpec) -> Result<MetricsReport> {
    trace.validate()?;
    let ids: Vec<&str> = scenario.models.iter().map(|m| m.id.as_str()).collect();
    if trace.models.iter().map(String::as_str).ne(ids.iter().copied()) {
        return Err(Error::MalformedTrace(format!(
            "trace models {:?} do not match scenario `{}`",
            trace.models, scenario.id
        )));
    }

    let mut per_model: Vec<ModelStats> = scenario
        .models
        .iter()
        .map(|m| ModelStats { model: m.id.clone(), issued: 0, completed: 0, dropped: 0, violation_pct: None })
        .collect();
    for r in &trace.requests {
        let s = &mut per_model[r.model];
        s.issued += 1;
        match r.status {
            RequestStatus::Complete => s.completed += 1,
            RequestStatus::Dropped => s.dropped += 1,
            _ => {}
        }
    }
    let (mut frames, mut missed) = (0, 0);
    for m in scenario.fps_models() {
        let s = &mut per_model[m];
        if s.issued > 0 {
            s.violation_pct = Some(pct(s.issued - s.completed, s.issued));
        }
        frames += s.issued;
        missed += s.issued - s.completed;
    }
    let aggregate_violation_pct = (frames > 0).then(|| pct(missed, frames));

    // Token emission times per prompt, indexed by token number.
    let mut tokens: BTreeMap<u32, BTreeMap<u32, u64>> = BTreeMap::new();
    let mut tokens_emitted = 0;
    for r in trace.records_of(TraceKind::TokenEmit) {
        let info = &trace.requests[r.request_id as usize];
        let (Some(p), Some(k)) = (info.prompt, r.layer) else {
            return Err(Error::MalformedTrace(format!("token record of request {} lacks a prompt", r.request_id)));
        };
        tokens.entry(p).or_default().insert(k, r.t_us);
        tokens_emitted += 1;
    }
    let generative = scenario.generative_model().is_some();
    let starved = trace.requests.iter().any(|r| r.status == RequestStatus::Starved && r.prompt.is_some());
    let (mut ttft, mut tpt, mut e2e) = (Vec::new(), Vec::new(), Vec::new());
    if generative && !starved {
        for (i, job) in scenario.prompts.iter().enumerate() {
            let Some(emits) = tokens.get(&(i as u32)) else { continue };
            let Some(&first) = emits.get(&0) else { continue };
            let arrival = job.arrival_us;
            ttft.push(us_to_ms(first - arrival));
            let (&last_k, &last) = emits.last_key_value().expect("non-empty");
            e2e.push(us_to_ms(last - arrival));
            if last_k >= 1 {
                tpt.push(us_to_ms(last - first) / last_k as f64);
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);

    let mut layers: BTreeMap<(StageKind, BackendKind), u64> = BTreeMap::new();
    let mut per_stage: BTreeMap<StageKind, u64> = BTreeMap::new();
    for r in trace.records_of(TraceKind::LayerFinish) {
        let stage = r.stage.expect("validated").kind();
        let kind = trace.backends[r.backend.expect("validated")].kind;
        *layers.entry((stage, kind)).or_default() += 1;
        *per_stage.entry(stage).or_default() += 1;
    }
    let backend_partition = layers
        .into_iter()
        .map(|((stage, backend), n)| PartitionEntry { stage, backend, layers: n, pct: pct(n, per_stage[&stage]) })
        .collect();

    Ok(MetricsReport {
        scenario: scenario.id.clone(),
        per_model,
        aggregate_violation_pct,
        ttft_ms: mean(&ttft),
        tpt_ms: mean(&tpt),
        e2e_ms: mean(&e2e),
        starved,
        tokens_emitted,
        backend_partition,
        horizon_ms: us_to_ms(trace.horizon_us),
    })
}

/// Policy-by-metric matrix over one scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub scenario: String,
    pub rows: Vec<(PolicyId, MetricsReport)>,
}

/// Assembles reports of one scenario into a comparison table.
pub fn compare_report(reports: &[(PolicyId, MetricsReport)]) -> Result<ComparisonTable> {
    let scenario = reports.first().map(|(_, r)| r.scenario.clone()).unwrap_or_default();
    if let Some((_, odd)) = reports.iter().find(|(_, r)| r.scenario != scenario) {
        return Err(Error::MixedScenarios(scenario, odd.scenario.clone()));
    }
    Ok(ComparisonTable { scenario, rows: reports.to_vec() })
}

fn cell(v: Option<f64>, starved: bool) -> String {
    match v {
        Some(x) if !starved => format!("{:.1}", round1(x)),
        _ => "-".into(),
    }
}

pub const CSV_HEADER: [&str; 7] = ["policy", "scenario", "viol_pct", "ttft_ms", "tpt_ms", "e2e_ms", "starved"];

fn csv_fields(policy: PolicyId, r: &MetricsReport) -> Vec<String> {
    let opt = |v: Option<f64>| v.map(|x| format!("{:.1}", round1(x))).unwrap_or_default();
    vec![
        policy.name().into(),
        r.scenario.clone(),
        opt(r.aggregate_violation_pct),
        opt(r.ttft_ms),
        opt(r.tpt_ms),
        opt(r.e2e_ms),
        r.starved.to_string(),
    ]
}

impl ComparisonTable {
    /// Human-readable table; starved runs show `-` for token metrics.
    pub fn render(&self, per_model: bool) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario {}", self.scenario);
        let _ = writeln!(out, "{:<10} {:>9} {:>10} {:>9}", "policy", "viol%", "TTFT(ms)", "TPT(ms)");
        for (p, r) in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:>9} {:>10} {:>9}",
                p.name(),
                cell(r.aggregate_violation_pct, false),
                cell(r.ttft_ms, r.starved),
                cell(r.tpt_ms, r.starved),
            );
        }
        if per_model {
            let models: Vec<&str> = self
                .rows
                .first()
                .map(|(_, r)| {
                    r.per_model.iter().filter(|m| m.violation_pct.is_some()).map(|m| m.model.as_str()).collect()
                })
                .unwrap_or_default();
            if !models.is_empty() {
                let _ = writeln!(out);
                let _ = write!(out, "{:<10}", "viol% by");
                for m in &models {
                    let _ = write!(out, " {m:>9}");
                }
                let _ = writeln!(out);
                for (p, r) in &self.rows {
                    let _ = write!(out, "{:<10}", p.name());
                    for m in &models {
                        let v = r.model(m).and_then(|s| s.violation_pct);
                        let _ = write!(out, " {:>9}", cell(v, false));
                    }
                    let _ = writeln!(out);
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for (p, r) in &self.rows {
            w.write_record(csv_fields(*p, r)).map_err(csv_err)?;
        }
        finish_csv(w)
    }

    /// Per-model violation rates, one row per (policy, model).
    pub fn per_model_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["policy", "scenario", "model", "issued", "completed", "dropped", "viol_pct"])
            .map_err(csv_err)?;
        for (p, r) in &self.rows {
            for m in &r.per_model {
                let v = m.violation_pct.map(|x| format!("{:.1}", round1(x))).unwrap_or_default();
                w.write_record([
                    p.name().to_string(),
                    r.scenario.clone(),
                    m.model.clone(),
                    m.issued.to_string(),
                    m.completed.to_string(),
                    m.dropped.to_string(),
                    v,
                ])
                .map_err(csv_err)?;
            }
        }
        finish_csv(w)
    }
}

/// One row of a sequence-length sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub input_tokens: u32,
    pub policy: PolicyId,
    pub report: MetricsReport,
}

/// Plot-ready CSV for a sweep: the report columns plus input length and
/// decode NPU share.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["input_tokens"];
    header.extend(CSV_HEADER);
    header.push("decode_npu_pct");
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let mut rec = vec![row.input_tokens.to_string()];
        rec.extend(csv_fields(row.policy, &row.report));
        rec.push(format!("{:.1}", round1(row.report.decode_npu_share())));
        w.write_record(&rec).map_err(csv_err)?;
    }
    finish_csv(w)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
