//! Models, scenarios and the request-arrival timeline.
//!
//! A scenario is a set of models: periodic real-time networks (each with an
//! fps target) plus at most one generative cascade (optionally an encoder
//! feeding the LLM). Prompt jobs enter at the head of that cascade.

use crate::error::{Error, Result};
use crate::latencydb::StageKind;
use crate::time::{ms_to_us, us_to_ms, Deadline, Fps, Micros};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "SR")]
    Sr,
    #[serde(rename = "Seg")]
    Seg,
    #[serde(rename = "OD")]
    Od,
    #[serde(rename = "Encoder")]
    Encoder,
    #[serde(rename = "LLM")]
    Llm,
}

impl Task {
    /// Default latency-database profile name for the task.
    pub fn profile(self) -> &'static str {
        match self {
            Task::Sr => "SR",
            Task::Seg => "Seg",
            Task::Od => "OD",
            Task::Encoder => "Encoder",
            Task::Llm => "LLM",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[serde(alias = "SinglePass")]
    SinglePass,
    #[serde(alias = "Generative")]
    Generative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub id: String,
    pub task: Task,
    pub kind: ModelKind,
    /// Number of schedulable layers.
    pub layer_count: u32,
    pub fps: Option<Fps>,
    pub cascade_next: Option<String>,
    /// Model name used for latency-database lookups.
    pub profile: String,
}

impl ModelSpec {
    pub fn is_generative(&self) -> bool {
        self.kind == ModelKind::Generative
    }

    /// Period of the frame stream in milliseconds, if periodic.
    pub fn period_ms(&self) -> Option<f64> {
        self.fps.map(|f| 1000.0 / f.as_f64())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptJob {
    pub arrival_us: Micros,
    /// LLM input sequence length after retrieval augmentation.
    pub input_tokens: u32,
    /// Number of decode iterations.
    pub output_tokens: u32,
    /// Length of the raw user query seen by a cascade encoder.
    /// Falls back to `input_tokens` when absent.
    pub query_tokens: Option<u32>,
}

impl PromptJob {
    pub fn encoder_tokens(&self) -> u32 {
        self.query_tokens.unwrap_or(self.input_tokens)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HorizonPolicy {
    /// Run until every generative request finishes (or starves).
    UntilLlmComplete,
    /// Issue frames and prompts in `[0, horizon)`.
    FixedMs(Micros),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub id: String,
    /// Declaration order is the FCFS tie-break order.
    pub models: Vec<ModelSpec>,
    pub prompts: Vec<PromptJob>,
    pub horizon: HorizonPolicy,
    pub retrieval_delay_us: Micros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BuiltinScenario {
    A,
    B,
    C,
    D,
}

impl BuiltinScenario {
    pub const ALL: [BuiltinScenario; 4] =
        [BuiltinScenario::A, BuiltinScenario::B, BuiltinScenario::C, BuiltinScenario::D];

    fn document(self) -> &'static str {
        match self {
            BuiltinScenario::A => include_str!("../data/scenarios/scenario_a.json"),
            BuiltinScenario::B => include_str!("../data/scenarios/scenario_b.json"),
            BuiltinScenario::C => include_str!("../data/scenarios/scenario_c.json"),
            BuiltinScenario::D => include_str!("../data/scenarios/scenario_d.json"),
        }
    }
}

impl std::str::FromStr for BuiltinScenario {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_uppercase().trim_start_matches("SCENARIO_") {
            "A" => Ok(BuiltinScenario::A),
            "B" => Ok(BuiltinScenario::B),
            "C" => Ok(BuiltinScenario::C),
            "D" => Ok(BuiltinScenario::D),
            other => Err(format!("unknown builtin scenario `{other}` (expected A, B, C or D)")),
        }
    }
}

/// Returns one of the four reference scenarios.
pub fn builtin_scenario(id: BuiltinScenario) -> ScenarioSpec {
    load_scenario(id.document()).expect("builtin scenario documents are valid")
}

/// The JSON text of a built-in scenario.
pub fn builtin_document(id: BuiltinScenario) -> &'static str {
    id.document()
}

// ---- document schema ------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    id: String,
    #[serde(default)]
    retrieval_delay_ms: f64,
    #[serde(default)]
    horizon: Option<HorizonDoc>,
    models: Vec<ModelDoc>,
    #[serde(default)]
    prompts: Vec<PromptDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HorizonDoc {
    policy: String,
    #[serde(default)]
    ms: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    id: String,
    task: Task,
    kind: ModelKind,
    layers: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cascade_next: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    profile: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptDoc {
    arrival_ms: f64,
    input_tokens: u32,
    output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query_tokens: Option<u32>,
}

/// Parses and validates a scenario document.
pub fn load_scenario(document: &str) -> Result<ScenarioSpec> {
    let doc: ScenarioDoc = serde_json::from_str(document).map_err(|e| Error::Schema(e.to_string()))?;
    let horizon = match doc.horizon {
        None => HorizonPolicy::UntilLlmComplete,
        Some(h) => match (h.policy.as_str(), h.ms) {
            ("until_llm_complete", None) => HorizonPolicy::UntilLlmComplete,
            ("fixed_ms", Some(ms)) if ms.is_finite() && ms > 0.0 => HorizonPolicy::FixedMs(ms_to_us(ms)),
            ("fixed_ms", _) => return Err(Error::Schema("fixed_ms horizon needs a positive `ms`".into())),
            ("until_llm_complete", Some(_)) => {
                return Err(Error::Schema("until_llm_complete horizon takes no `ms`".into()))
            }
            (other, _) => return Err(Error::Schema(format!("unknown horizon policy `{other}`"))),
        },
    };
    if !(doc.retrieval_delay_ms.is_finite() && doc.retrieval_delay_ms >= 0.0) {
        return Err(Error::Schema("retrieval_delay_ms must be non-negative".into()));
    }
    let models = doc
        .models
        .into_iter()
        .map(|m| {
            let fps = match m.fps {
                None => None,
                Some(f) => Some(
                    Fps::from_f64(f).ok_or_else(|| Error::Schema(format!("model `{}`: fps must be positive", m.id)))?,
                ),
            };
            Ok(ModelSpec {
                profile: m.profile.unwrap_or_else(|| m.task.profile().to_string()),
                id: m.id,
                task: m.task,
                kind: m.kind,
                layer_count: m.layers,
                fps,
                cascade_next: m.cascade_next,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let prompts = doc
        .prompts
        .into_iter()
        .map(|p| {
            if !(p.arrival_ms.is_finite() && p.arrival_ms >= 0.0) {
                return Err(Error::Schema("prompt arrival_ms must be non-negative".into()));
            }
            Ok(PromptJob {
                arrival_us: ms_to_us(p.arrival_ms),
                input_tokens: p.input_tokens,
                output_tokens: p.output_tokens,
                query_tokens: p.query_tokens,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec =
        ScenarioSpec { id: doc.id, models, prompts, horizon, retrieval_delay_us: ms_to_us(doc.retrieval_delay_ms) };
    spec.validate()?;
    Ok(spec)
}

pub fn load_scenario_path(path: impl AsRef<Path>) -> Result<ScenarioSpec> {
    load_scenario(&std::fs::read_to_string(path)?)
}

impl ScenarioSpec {
    /// Checks every structural invariant of the scenario.
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::EmptyScenario);
        }
        let mut seen = HashSet::new();
        for m in &self.models {
            if m.id.trim().is_empty() {
                return Err(Error::Schema("model id must be non-empty".into()));
            }
            if !seen.insert(m.id.as_str()) {
                return Err(Error::DuplicateModel(m.id.clone()));
            }
            if m.layer_count == 0 {
                return Err(Error::Schema(format!("model `{}` needs at least one layer", m.id)));
            }
            if m.is_generative() && m.fps.is_some() {
                return Err(Error::Schema(format!("generative model `{}` cannot have fps", m.id)));
            }
        }
        for m in &self.models {
            if let Some(next) = &m.cascade_next {
                if !seen.contains(next.as_str()) {
                    return Err(Error::UnknownCascade(next.clone()));
                }
            }
        }
        // Each model has at most one successor, so walking from every model
        // either terminates or revisits a node.
        for start in 0..self.models.len() {
            let mut visited = HashSet::new();
            let mut cur = Some(start);
            while let Some(i) = cur {
                if !visited.insert(i) {
                    return Err(Error::CyclicCascade(self.models[i].id.clone()));
                }
                cur = self.cascade_child(i);
            }
        }
        let generative: Vec<_> = self.models.iter().filter(|m| m.is_generative()).collect();
        if generative.len() > 1 {
            return Err(Error::Schema("at most one generative model per scenario".into()));
        }
        let mut parents: HashMap<&str, usize> = HashMap::new();
        for m in &self.models {
            if let Some(next) = &m.cascade_next {
                *parents.entry(next.as_str()).or_default() += 1;
            }
        }
        if let Some((id, _)) = parents.iter().find(|(_, &n)| n > 1) {
            return Err(Error::Schema(format!("model `{id}` has more than one cascade parent")));
        }
        if !self.prompts.is_empty() && self.generative_entry().is_none() {
            return Err(Error::Schema("prompts require a generative model".into()));
        }
        let mut last = 0;
        for p in &self.prompts {
            if p.input_tokens == 0 || p.output_tokens == 0 {
                return Err(Error::Schema("prompt token counts must be at least 1".into()));
            }
            if p.query_tokens == Some(0) {
                return Err(Error::Schema("prompt query_tokens must be at least 1".into()));
            }
            if p.arrival_us < last {
                return Err(Error::Schema("prompt arrivals must be non-decreasing".into()));
            }
            last = p.arrival_us;
        }
        Ok(())
    }

    pub fn model_index(&self, id: &str) -> Option<usize> {
        self.models.iter().position(|m| m.id == id)
    }

    pub fn cascade_child(&self, model: usize) -> Option<usize> {
        self.models[model].cascade_next.as_deref().and_then(|n| self.model_index(n))
    }

    pub fn cascade_parent(&self, model: usize) -> Option<usize> {
        let id = &self.models[model].id;
        self.models.iter().position(|m| m.cascade_next.as_deref() == Some(id.as_str()))
    }

    pub fn generative_model(&self) -> Option<usize> {
        self.models.iter().position(|m| m.is_generative())
    }

    /// Head of the cascade that ends in the generative model; prompts start here.
    pub fn generative_entry(&self) -> Option<usize> {
        let mut cur = self.generative_model()?;
        while let Some(p) = self.cascade_parent(cur) {
            cur = p;
        }
        Some(cur)
    }

    pub fn fps_models(&self) -> impl Iterator<Item = usize> + '_ {
        self.models.iter().enumerate().filter(|(_, m)| m.fps.is_some()).map(|(i, _)| i)
    }

    /// Copy of the scenario with every prompt's LLM input length replaced.
    pub fn with_input_tokens(&self, tokens: u32) -> ScenarioSpec {
        let mut s = self.clone();
        for p in &mut s.prompts {
            p.input_tokens = tokens;
        }
        s
    }

    /// Serializes back to the scenario document schema.
    pub fn to_document(&self) -> String {
        let doc = ScenarioDoc {
            id: self.id.clone(),
            retrieval_delay_ms: us_to_ms(self.retrieval_delay_us),
            horizon: Some(match self.horizon {
                HorizonPolicy::UntilLlmComplete => HorizonDoc { policy: "until_llm_complete".into(), ms: None },
                HorizonPolicy::FixedMs(us) => HorizonDoc { policy: "fixed_ms".into(), ms: Some(us_to_ms(us)) },
            }),
            models: self
                .models
                .iter()
                .map(|m| ModelDoc {
                    id: m.id.clone(),
                    task: m.task,
                    kind: m.kind,
                    layers: m.layer_count,
                    fps: m.fps.map(Fps::as_f64),
                    cascade_next: m.cascade_next.clone(),
                    profile: (m.profile != m.task.profile()).then(|| m.profile.clone()),
                })
                .collect(),
            prompts: self
                .prompts
                .iter()
                .map(|p| PromptDoc {
                    arrival_ms: us_to_ms(p.arrival_us),
                    input_tokens: p.input_tokens,
                    output_tokens: p.output_tokens,
                    query_tokens: p.query_tokens,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("scenario serializes")
    }
}

// ---- requests -------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Forward,
    Prefill,
    /// Decode iteration `k`; produces token `k + 1`.
    Decode(u32),
}

impl Stage {
    pub fn kind(self) -> StageKind {
        match self {
            Stage::Forward => StageKind::Forward,
            Stage::Prefill => StageKind::Prefill,
            Stage::Decode(_) => StageKind::Decode,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Forward => f.write_str("forward"),
            Stage::Prefill => f.write_str("prefill"),
            Stage::Decode(k) => write!(f, "decode:{k}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RequestStatus {
    Pending,
    Running,
    Complete,
    Dropped,
    Starved,
}

impl RequestStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RequestStatus::Complete | RequestStatus::Dropped | RequestStatus::Starved)
    }
}

/// Prompt job a request descends from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Lineage {
    pub prompt: u32,
    /// Arrival of the prompt at the head of the cascade.
    pub root_arrival_us: Micros,
    pub input_tokens: u32,
    pub output_tokens: u32,
    pub query_tokens: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InferenceRequest {
    pub request_id: u64,
    /// Index into the scenario's model list.
    pub model: usize,
    pub arrival_us: Micros,
    pub deadline: Deadline,
    pub stage: Stage,
    pub next_layer: u32,
    pub context_tokens: u32,
    pub status: RequestStatus,
    pub lineage: Option<Lineage>,
}

/// The next schedulable unit of a request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerRef {
    pub model: usize,
    pub stage: Stage,
    pub layer_index: u32,
    pub context_tokens: u32,
}

/// What completing a layer did to its request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerOutcome {
    pub token: Option<u32>,
    pub finished: bool,
}

impl InferenceRequest {
    /// Fresh request at the first layer of `model`.
    pub fn new(
        request_id: u64,
        model_idx: usize,
        model: &ModelSpec,
        arrival_us: Micros,
        deadline: Deadline,
        lineage: Option<Lineage>,
    ) -> Self {
        let (stage, context_tokens) = match (model.kind, lineage) {
            (ModelKind::Generative, Some(l)) => (Stage::Prefill, l.input_tokens),
            (ModelKind::Generative, None) => (Stage::Prefill, 0),
            (ModelKind::SinglePass, Some(l)) => (Stage::Forward, l.query_tokens),
            (ModelKind::SinglePass, None) => (Stage::Forward, 0),
        };
        InferenceRequest {
            request_id,
            model: model_idx,
            arrival_us,
            deadline,
            stage,
            next_layer: 0,
            context_tokens,
            status: RequestStatus::Pending,
            lineage,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.status.is_terminal()
    }

    /// Arrival used for first-come ordering: the prompt arrival for cascade
    /// members, the request's own arrival otherwise.
    pub fn fcfs_arrival(&self) -> Micros {
        self.lineage.map_or(self.arrival_us, |l| l.root_arrival_us.min(self.arrival_us))
    }

    /// Records completion of the current layer.
    pub fn complete_layer(&mut self, model: &ModelSpec) -> LayerOutcome {
        self.next_layer += 1;
        if self.next_layer < model.layer_count {
            return LayerOutcome { token: None, finished: false };
        }
        self.next_layer = 0;
        match self.stage {
            Stage::Forward => LayerOutcome { token: None, finished: true },
            Stage::Prefill => {
                let out = self.lineage.map_or(0, |l| l.output_tokens);
                if out == 0 {
                    return LayerOutcome { token: Some(0), finished: true };
                }
                self.stage = Stage::Decode(0);
                self.context_tokens = self.lineage.map_or(0, |l| l.input_tokens);
                LayerOutcome { token: Some(0), finished: false }
            }
            Stage::Decode(k) => {
                let out = self.lineage.map_or(0, |l| l.output_tokens);
                if k + 1 >= out {
                    return LayerOutcome { token: Some(k + 1), finished: true };
                }
                self.stage = Stage::Decode(k + 1);
                self.context_tokens = self.lineage.map_or(0, |l| l.input_tokens) + k + 1;
                LayerOutcome { token: Some(k + 1), finished: false }
            }
        }
    }

    /// True while a generative lineage has not produced its first token.
    pub fn first_token_pending(&self, model: &ModelSpec) -> bool {
        self.lineage.is_some() && (!model.is_generative() || self.stage == Stage::Prefill)
    }
}

/// The unique next schedulable layer of `request`.
pub fn next_layer_descriptor(request: &InferenceRequest, model: &ModelSpec) -> Result<LayerRef> {
    if request.is_finished() {
        return Err(Error::RequestFinished(request.request_id));
    }
    let context_tokens = match (request.stage, request.lineage) {
        (Stage::Prefill, Some(l)) => l.input_tokens,
        (Stage::Decode(k), Some(l)) => l.input_tokens + k,
        _ => request.context_tokens,
    };
    debug_assert!(request.next_layer < model.layer_count);
    Ok(LayerRef { model: request.model, stage: request.stage, layer_index: request.next_layer, context_tokens })
}

/// Deadline of frame `n` of a periodic model: the next period boundary.
pub fn frame_deadline(fps: Fps, n: u64) -> Deadline {
    Deadline::At(fps.frame_arrival(n + 1))
}

/// Root arrival events of a scenario: periodic frames plus prompt entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) struct RootArrival {
    pub time: Micros,
    pub model: usize,
    pub seq: u64,
    pub prompt: Option<u32>,
}

/// All requests that arrive in `[0, horizon)`, sorted by (arrival,
/// declaration order), with dense ids from 0.
pub fn generate_arrivals(scenario: &ScenarioSpec, horizon_us: Micros) -> Vec<InferenceRequest> {
    let mut roots = Vec::new();
    for m in scenario.fps_models() {
        let fps = scenario.models[m].fps.expect("fps model");
        for n in 0..fps.frames_before(horizon_us) {
            roots.push(RootArrival { time: fps.frame_arrival(n), model: m, seq: n, prompt: None });
        }
    }
    if let Some(entry) = scenario.generative_entry() {
        for (i, p) in scenario.prompts.iter().enumerate() {
            if p.arrival_us < horizon_us {
                roots.push(RootArrival { time: p.arrival_us, model: entry, seq: i as u64, prompt: Some(i as u32) });
            }
        }
    }
    roots.sort();
    roots.into_iter().enumerate().map(|(id, r)| root_request(scenario, id as u64, r)).collect()
}

pub(crate) fn root_request(scenario: &ScenarioSpec, id: u64, r: RootArrival) -> InferenceRequest {
    let model = &scenario.models[r.model];
    match r.prompt {
        Some(p) => {
            let job = &scenario.prompts[p as usize];
            let lineage = Lineage {
                prompt: p,
                root_arrival_us: job.arrival_us,
                input_tokens: job.input_tokens,
                output_tokens: job.output_tokens,
                query_tokens: job.encoder_tokens(),
            };
            InferenceRequest::new(id, r.model, model, r.time, Deadline::Infinite, Some(lineage))
        }
        None => {
            let fps = model.fps.expect("periodic root has fps");
            InferenceRequest::new(id, r.model, model, r.time, frame_deadline(fps, r.seq), None)
        }
    }
}
