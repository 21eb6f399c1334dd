//! Exhaustive reference schedules for tiny instances, and the
//! scheduling-space size estimate for full scenarios.
//!
//! The search is written against the latency database directly and shares
//! no scheduling code with the engine. Its witness is replayed through the
//! engine to check that both agree on time accounting.

use crate::engine::PolicyDispatcher;
use crate::engine::{run_requests, BackendSpec, ReplayDispatcher, ReplayStep, SimConfig, Trace, TraceKind};
use crate::error::{Error, Result};
use crate::latencydb::{BackendKind, LatencyDatabase, LatencyRow, StageKind};
use crate::policies::{BackendTable, SchedulerPolicy};
use crate::time::{layer_duration_us, ms_to_us, Deadline, Micros};
use crate::workload::{HorizonPolicy, InferenceRequest, Lineage, ModelKind, ModelSpec, ScenarioSpec, Task};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

pub const MAX_REQUESTS: usize = 8;
pub const MAX_LAYER_INSTANCES: usize = 12;
pub const MAX_BACKENDS: usize = 3;
pub const MAX_LEAVES: u64 = 10_000_000;

/// A request list small enough to enumerate every schedule of.
#[derive(Clone, Debug)]
pub struct TinyInstance {
    pub models: Vec<ModelSpec>,
    /// Sorted by (arrival, model); `requests[i].request_id == i`, which is
    /// also the id the engine assigns.
    pub requests: Vec<InferenceRequest>,
    pub backends: Vec<BackendSpec>,
    pub db: LatencyDatabase,
}

impl TinyInstance {
    pub fn new(
        models: Vec<ModelSpec>,
        mut requests: Vec<InferenceRequest>,
        backends: Vec<BackendSpec>,
        db: LatencyDatabase,
    ) -> Result<Self> {
        requests.sort_by_key(|r| (r.arrival_us, r.model, r.request_id));
        for (i, r) in requests.iter_mut().enumerate() {
            r.request_id = i as u64;
        }
        let inst = TinyInstance { models, requests, backends, db };
        inst.check()?;
        Ok(inst)
    }

    fn check(&self) -> Result<()> {
        let too_large = |what: String| Err(Error::InstanceTooLarge(what));
        if self.requests.len() > MAX_REQUESTS {
            return too_large(format!("{} requests (max {MAX_REQUESTS})", self.requests.len()));
        }
        if self.backends.len() > MAX_BACKENDS {
            return too_large(format!("{} backends (max {MAX_BACKENDS})", self.backends.len()));
        }
        if self.backends.is_empty() {
            return Err(Error::NoBackends);
        }
        let layers = self.layer_instances();
        if layers > MAX_LAYER_INSTANCES {
            return too_large(format!("{layers} layer instances (max {MAX_LAYER_INSTANCES})"));
        }
        for m in &self.models {
            if m.cascade_next.is_some() {
                return Err(Error::Invariant(format!("tiny instances cannot cascade (model `{}`)", m.id)));
            }
        }
        for r in &self.requests {
            let Some(m) = self.models.get(r.model) else {
                return Err(Error::Invariant(format!("request {} names an unknown model", r.request_id)));
            };
            if m.is_generative() && r.lineage.is_none() {
                return Err(Error::Invariant(format!("generative request {} has no prompt", r.request_id)));
            }
        }
        Ok(())
    }

    pub fn layer_instances(&self) -> usize {
        self.requests.iter().map(|r| self.layer_plan(r).len()).sum()
    }

    /// (stage, context) of every layer the request executes, in order.
    fn layer_plan(&self, r: &InferenceRequest) -> Vec<(StageKind, u32)> {
        let Some(m) = self.models.get(r.model) else { return Vec::new() };
        let l = m.layer_count as usize;
        match (m.kind, r.lineage) {
            (ModelKind::Generative, Some(lin)) => {
                let mut plan = vec![(StageKind::Prefill, lin.input_tokens); l];
                for k in 0..lin.output_tokens {
                    plan.extend(std::iter::repeat_n((StageKind::Decode, lin.input_tokens + k), l));
                }
                plan
            }
            _ => vec![(StageKind::Forward, r.context_tokens); l],
        }
    }

    /// Runs the instance through the engine with `dispatcher`.
    pub fn run(&self, dispatcher: &mut dyn crate::engine::Dispatcher) -> Result<Trace> {
        run_requests("tiny", &self.models, &self.requests, &self.db, &self.backends, &SimConfig::default(), dispatcher)
    }

    pub fn simulate(&self, policy: SchedulerPolicy) -> Result<Trace> {
        self.run(&mut PolicyDispatcher::new(policy))
    }

    /// Replays an oracle witness through the engine.
    pub fn replay(&self, witness: &[ReplayStep]) -> Result<Trace> {
        let mut dispatcher = ReplayDispatcher::new(witness.to_vec());
        let trace = self.run(&mut dispatcher)?;
        if !dispatcher.finished() {
            return Err(Error::Invariant("replay ended with steps left over".into()));
        }
        Ok(trace)
    }

    /// Index of the generative request whose first token `MinTtft` measures.
    fn ttft_request(&self) -> Option<usize> {
        self.requests.iter().position(|r| self.models[r.model].is_generative())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    /// Requests dropped at their deadline.
    MinViolations,
    /// First-token latency of the earliest generative request.
    MinTtft,
    /// Time of the last completion or drop, with every generative request
    /// completed.
    MinMakespan,
}

/// Whether the search may leave a backend idle while some runnable layer
/// could start on it.
///
/// Ahead-of-time policies idle by design and deadline-aware ones waste time
/// on aborted layers, so only [`Idling::Allowed`] gives a bound every policy
/// respects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Idling {
    #[default]
    Allowed,
    Forbidden,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleOutcome {
    pub objective: Objective,
    /// Violation count, or microseconds for the time objectives. `None`
    /// when no schedule achieves the objective at all.
    pub value: Option<u64>,
    pub witness: Vec<ReplayStep>,
    pub leaves: u64,
}

/// The objective as realised by an engine trace of `instance`.
pub fn measure(instance: &TinyInstance, trace: &Trace, objective: Objective) -> Option<u64> {
    match objective {
        Objective::MinViolations => Some(trace.records_of(TraceKind::RequestDrop).count() as u64),
        Objective::MinTtft => {
            let r = instance.ttft_request()? as u64;
            let arrival = instance.requests[r as usize].arrival_us;
            trace
                .records
                .iter()
                .find(|x| x.kind == TraceKind::TokenEmit && x.request_id == r && x.layer == Some(0))
                .map(|x| x.t_us - arrival)
        }
        Objective::MinMakespan => {
            if trace.records_of(TraceKind::RequestStarve).next().is_some() {
                return None;
            }
            trace
                .records
                .iter()
                .filter(|x| matches!(x.kind, TraceKind::RequestComplete | TraceKind::RequestDrop))
                .map(|x| x.t_us)
                .max()
        }
    }
}

struct Job {
    arrival: Micros,
    deadline: Option<Micros>,
    /// Per layer, per backend duration; `None` where unsupported.
    durations: Vec<Vec<Option<Micros>>>,
    /// Layer whose completion emits the first token.
    first_token_layer: Option<usize>,
}

/// Partial schedule. Layers are placed in increasing (start, backend)
/// order, each at the earliest time its request and backend allow, so every
/// left-justified schedule has exactly one placement sequence. Stopping
/// early leaves the remaining work unscheduled.
#[derive(Clone, PartialEq, Eq, Hash)]
struct Node {
    done: Vec<u8>,
    /// Earliest start of each request's next layer.
    ready: Vec<Micros>,
    /// Time each backend becomes free.
    free: Vec<Micros>,
    last: Option<(Micros, usize)>,
    /// First-token time, or the latest completion, depending on objective.
    acc: Option<Micros>,
}

struct Placement {
    job: usize,
    backend: usize,
    start: Micros,
    finish: Micros,
}

/// Best value below a node and the placement that reaches it.
type Memo = HashMap<Node, (Option<u64>, Option<(usize, usize)>)>;

struct Search {
    jobs: Vec<Job>,
    objective: Objective,
    idling: Idling,
    ttft_job: Option<usize>,
    /// Requests worth scheduling for the objective. Work without a deadline
    /// cannot reduce violations, and nothing but the measured request can
    /// hasten a first token.
    relevant: Vec<bool>,
    memo: Memo,
    leaves: u64,
}

impl Search {
    fn complete(&self, n: &Node, j: usize) -> bool {
        n.done[j] as usize == self.jobs[j].durations.len()
    }

    /// Where request `j`'s next layer would run on backend `b`, if it can
    /// still finish in time (a final layer may end exactly at the deadline).
    fn slot(&self, n: &Node, j: usize, b: usize) -> Option<Placement> {
        if self.complete(n, j) {
            return None;
        }
        let job = &self.jobs[j];
        let layer = n.done[j] as usize;
        let start = n.ready[j].max(n.free[b]);
        let finish = start + job.durations[layer][b]?;
        if let Some(d) = job.deadline {
            let last = layer + 1 == job.durations.len();
            if start >= d || finish > d || (finish == d && !last) {
                return None;
            }
        }
        Some(Placement { job: j, backend: b, start, finish })
    }

    fn moves(&self, n: &Node) -> Vec<Placement> {
        let mut all: Vec<Placement> = Vec::new();
        for j in (0..self.jobs.len()).filter(|&j| self.relevant[j]) {
            for b in 0..n.free.len() {
                if let Some(p) = self.slot(n, j, b) {
                    if n.last.is_none_or(|last| (p.start, p.backend) > last) {
                        all.push(p);
                    }
                }
            }
        }
        if self.idling == Idling::Forbidden {
            // the earliest free backend must take one of the layers ready for it
            if let Some(first) = all.iter().map(|p| (p.start, p.backend)).min() {
                all.retain(|p| (p.start, p.backend) == first);
            }
        }
        all
    }

    fn place(&self, n: &Node, p: &Placement) -> Node {
        let mut child = n.clone();
        child.done[p.job] += 1;
        child.ready[p.job] = p.finish;
        child.free[p.backend] = p.finish;
        child.last = Some((p.start, p.backend));
        let layer = n.done[p.job] as usize;
        match self.objective {
            Objective::MinTtft if Some(p.job) == self.ttft_job && self.jobs[p.job].first_token_layer == Some(layer) => {
                child.acc = Some(p.finish);
            }
            Objective::MinMakespan if self.complete(&child, p.job) => {
                child.acc = Some(child.acc.map_or(p.finish, |a| a.max(p.finish)));
            }
            _ => {}
        }
        child
    }

    /// Value of stopping here with the remaining work never started.
    fn stop_value(&mut self, n: &Node) -> Option<u64> {
        self.leaves += 1;
        match self.objective {
            Objective::MinViolations => {
                Some((0..self.jobs.len()).filter(|&j| self.jobs[j].deadline.is_some() && !self.complete(n, j)).count()
                    as u64)
            }
            Objective::MinTtft => {
                let j = self.ttft_job?;
                n.acc.map(|t| t - self.jobs[j].arrival)
            }
            Objective::MinMakespan => {
                let mut last = n.acc.unwrap_or(0);
                for (j, job) in self.jobs.iter().enumerate() {
                    if !self.complete(n, j) {
                        // unfinished work without a deadline never ends
                        last = last.max(job.deadline?);
                    }
                }
                Some(last)
            }
        }
    }

    fn settled(&self, n: &Node) -> bool {
        self.objective == Objective::MinTtft && n.acc.is_some()
    }

    fn best(&mut self, n: &Node) -> Result<Option<u64>> {
        if self.settled(n) {
            return Ok(self.stop_value(n));
        }
        if let Some((v, _)) = self.memo.get(n) {
            return Ok(*v);
        }
        if self.leaves > MAX_LEAVES {
            return Err(Error::InstanceTooLarge(format!("more than {MAX_LEAVES} leaves")));
        }
        let moves = self.moves(n);
        let mut best = match (self.idling, moves.is_empty()) {
            (Idling::Forbidden, false) => None,
            _ => self.stop_value(n).map(|v| (v, None)),
        };
        for p in moves {
            let child = self.place(n, &p);
            if let Some(v) = self.best(&child)? {
                if best.is_none_or(|(bv, _)| v < bv) {
                    best = Some((v, Some((p.job, p.backend))));
                }
            }
        }
        let value = best.map(|(v, _)| v);
        self.memo.insert(n.clone(), (value, best.and_then(|(_, m)| m)));
        Ok(value)
    }

    fn witness(&self, root: &Node) -> Vec<ReplayStep> {
        let mut starts: Vec<(Micros, u64, usize)> = Vec::new();
        let mut n = root.clone();
        while !self.settled(&n) {
            let Some(&(_, Some((j, b)))) = self.memo.get(&n) else { break };
            let p = self.slot(&n, j, b).expect("memoised move is legal");
            starts.push((p.start, j as u64, b));
            n = self.place(&n, &p);
        }
        let mut steps: Vec<ReplayStep> = Vec::new();
        for (t, j, b) in starts {
            match steps.last_mut() {
                Some(step) if step.time_us == t => step.starts.push((j, b)),
                _ => steps.push(ReplayStep { time_us: t, starts: vec![(j, b)] }),
            }
        }
        steps
    }
}

/// Best achievable `objective` over all schedules, idling allowed.
pub fn exhaustive_best(instance: &TinyInstance, objective: Objective) -> Result<OracleOutcome> {
    exhaustive_best_with(instance, objective, Idling::Allowed)
}

/// Enumerates every left-justified layer schedule that respects layer
/// order, backend exclusivity and deadlines, with any subset of the work
/// left unstarted, and returns the optimum with a witness.
pub fn exhaustive_best_with(instance: &TinyInstance, objective: Objective, idling: Idling) -> Result<OracleOutcome> {
    instance.check()?;
    let mut jobs = Vec::with_capacity(instance.requests.len());
    for r in &instance.requests {
        let model = &instance.models[r.model];
        let plan = instance.layer_plan(r);
        let mut durations = Vec::with_capacity(plan.len());
        for &(stage, ctx) in &plan {
            let per_backend = instance
                .backends
                .iter()
                .map(|b| instance.db.lookup(&model.profile, stage, ctx, b.kind).ok().map(layer_duration_us))
                .collect();
            durations.push(per_backend);
        }
        let first_token_layer = model.is_generative().then(|| model.layer_count as usize - 1);
        jobs.push(Job { arrival: r.arrival_us, deadline: r.deadline.micros(), durations, first_token_layer });
    }
    let root = Node {
        done: vec![0; jobs.len()],
        ready: jobs.iter().map(|j| j.arrival).collect(),
        free: vec![0; instance.backends.len()],
        last: None,
        acc: None,
    };
    let ttft_job = instance.ttft_request();
    let relevant = match (objective, idling) {
        (_, Idling::Forbidden) | (Objective::MinMakespan, _) => vec![true; jobs.len()],
        (Objective::MinViolations, _) => jobs.iter().map(|j| j.deadline.is_some()).collect(),
        (Objective::MinTtft, _) => (0..jobs.len()).map(|j| Some(j) == ttft_job).collect(),
    };
    let mut search = Search { jobs, objective, idling, ttft_job, relevant, memo: HashMap::new(), leaves: 0 };
    if objective == Objective::MinTtft && search.ttft_job.is_none() {
        return Ok(OracleOutcome { objective, value: None, witness: Vec::new(), leaves: 0 });
    }
    let value = search.best(&root)?;
    let witness = if value.is_some() { search.witness(&root) } else { Vec::new() };
    Ok(OracleOutcome { objective, value, witness, leaves: search.leaves })
}

/// log2 of the number of backend assignments over every layer instance a
/// scenario schedules before `horizon_ms`: Σ log2(permitted backends).
///
/// Frames arriving before the horizon count `layer_count` instances each;
/// each prompt counts its encoder layers plus prefill and every decode
/// iteration of the LLM.
pub fn schedule_space_log2(
    scenario: &ScenarioSpec,
    horizon_ms: f64,
    backends: &[BackendSpec],
    db: &LatencyDatabase,
) -> f64 {
    let horizon = ms_to_us(horizon_ms);
    let kinds: Vec<BackendKind> = backends.iter().map(|b| b.kind).collect();
    let table = BackendTable::for_scenario(scenario, db, &kinds, SimConfig::default().exclude_cpu);
    let choices = |model: usize, stage: StageKind| {
        let permitted = table.permitted(model, stage);
        backends.iter().filter(|b| permitted.contains(&b.kind)).count().max(1) as f64
    };
    let mut bits = 0.0;
    for m in scenario.fps_models() {
        let fps = scenario.models[m].fps.expect("fps model");
        let frames = fps.frames_before(horizon) as f64;
        bits += frames * scenario.models[m].layer_count as f64 * choices(m, StageKind::Forward).log2();
    }
    for p in scenario.prompts.iter().filter(|p| p.arrival_us < horizon) {
        let mut m = scenario.generative_entry();
        while let Some(idx) = m {
            let spec = &scenario.models[idx];
            let layers = spec.layer_count as f64;
            if spec.is_generative() {
                bits += layers * choices(idx, StageKind::Prefill).log2();
                bits += layers * p.output_tokens as f64 * choices(idx, StageKind::Decode).log2();
            } else {
                bits += layers * choices(idx, StageKind::Forward).log2();
            }
            m = scenario.cascade_child(idx);
        }
    }
    bits
}

/// Horizon used when none is given: the scenario's fixed horizon, or the
/// time its LLM needs standalone on the fastest backends.
pub fn default_horizon_ms(scenario: &ScenarioSpec, db: &LatencyDatabase) -> f64 {
    if let HorizonPolicy::FixedMs(h) = scenario.horizon {
        return crate::time::us_to_ms(h);
    }
    let mut total = 0.0;
    for p in &scenario.prompts {
        let mut m = scenario.generative_entry();
        let mut t = 0.0;
        while let Some(idx) = m {
            let spec = &scenario.models[idx];
            let fastest = |stage: StageKind, ctx: u32| {
                BackendKind::ALL
                    .iter()
                    .filter_map(|&k| db.lookup(&spec.profile, stage, ctx, k).ok())
                    .fold(f64::INFINITY, f64::min)
            };
            let layers = spec.layer_count as f64;
            if spec.is_generative() {
                t += layers * fastest(StageKind::Prefill, p.input_tokens);
                for k in 0..p.output_tokens {
                    t += layers * fastest(StageKind::Decode, p.input_tokens + k);
                }
            } else {
                t += layers * fastest(StageKind::Forward, p.encoder_tokens());
            }
            m = scenario.cascade_child(idx);
        }
        total = f64::max(total, crate::time::us_to_ms(p.arrival_us) + t);
    }
    total
}

/// A random scenario-B-shaped instance: a few deadline-bound frames of one
/// or two single-pass models plus, usually, one short LLM prompt, on two or
/// three backends with small integer latencies.
pub fn random_instance(seed: u64) -> TinyInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds = vec![BackendKind::Gpu, BackendKind::Npu];
    if rng.random_bool(0.4) {
        kinds.insert(0, BackendKind::Cpu);
    }
    let backends: Vec<BackendSpec> =
        kinds.iter().map(|k| BackendSpec::new(format!("{}0", k.as_str().to_lowercase()), *k)).collect();

    let frame_models = rng.random_range(1..=2usize);
    let mut models = Vec::new();
    let mut rows = Vec::new();
    let subset = |rng: &mut ChaCha8Rng| -> Vec<BackendKind> {
        loop {
            let s: Vec<BackendKind> = kinds.iter().copied().filter(|_| rng.random_bool(0.7)).collect();
            if !s.is_empty() {
                return s;
            }
        }
    };
    for f in 0..frame_models {
        let id = format!("F{f}");
        for k in subset(&mut rng) {
            rows.push(row(&id, "Forward", 0, k, rng.random_range(2..=16) as f64 * 0.5));
        }
        let layer_count = if rng.random_bool(0.25) { 2 } else { 1 };
        models.push(single_pass(&id, layer_count));
    }
    let with_llm = rng.random_bool(0.75);
    let llm_layers = rng.random_range(1..=2u32);
    let llm = models.len();
    if with_llm {
        for stage in ["Prefill", "Decode"] {
            for k in subset(&mut rng) {
                let base = rng.random_range(2..=24) as f64 * 0.5;
                rows.push(row("LLM", stage, 16, k, base));
                rows.push(row("LLM", stage, 32, k, base + rng.random_range(0..=2) as f64 * 0.5));
            }
        }
        models.push(ModelSpec {
            id: "LLM".into(),
            task: Task::Llm,
            kind: ModelKind::Generative,
            layer_count: llm_layers,
            fps: None,
            cascade_next: None,
            profile: "LLM".into(),
        });
    }
    let db = LatencyDatabase::from_rows(rows, &[16, 32]).expect("generated rows are well-formed");

    let mut requests = Vec::new();
    let mut budget = MAX_LAYER_INSTANCES;
    if with_llm {
        let output_tokens = rng.random_range(0..=2u32).min((budget as u32 / llm_layers).saturating_sub(1));
        let arrival = ms_to_us(rng.random_range(0..=8) as f64 * 0.5);
        let lineage = Lineage {
            prompt: 0,
            root_arrival_us: arrival,
            input_tokens: rng.random_range(8..=30),
            output_tokens,
            query_tokens: 0,
        };
        budget -= (llm_layers * (1 + output_tokens)) as usize;
        requests.push(InferenceRequest::new(0, llm, &models[llm], arrival, Deadline::Infinite, Some(lineage)));
    }
    let frames = rng.random_range(1..=5usize);
    for _ in 0..frames {
        if requests.len() == MAX_REQUESTS {
            break;
        }
        let m = rng.random_range(0..frame_models);
        let layers = models[m].layer_count as usize;
        if layers > budget {
            continue;
        }
        budget -= layers;
        let arrival = ms_to_us(rng.random_range(0..=20) as f64 * 0.5);
        let deadline = arrival + ms_to_us(rng.random_range(4..=30) as f64 * 0.5);
        requests.push(InferenceRequest::new(0, m, &models[m], arrival, Deadline::At(deadline), None));
    }
    TinyInstance::new(models, requests, backends, db).expect("generated instance respects the bounds")
}

fn single_pass(id: &str, layer_count: u32) -> ModelSpec {
    ModelSpec {
        id: id.into(),
        task: Task::Sr,
        kind: ModelKind::SinglePass,
        layer_count,
        fps: None,
        cascade_next: None,
        profile: id.into(),
    }
}

fn row(model: &str, stage: &str, context: u32, backend: BackendKind, latency_ms: f64) -> LatencyRow {
    LatencyRow { model: model.into(), stage: stage.into(), context, backend: backend.as_str().into(), latency_ms }
}
