//! Deterministic discrete-event core.
//!
//! Simulated time advances from event to event. All events sharing a
//! timestamp are applied as one batch (arrivals, then deadline expiries,
//! then layer completions, then horizon/starvation checks), after which the
//! dispatcher is asked to place work on idle backends.

mod dispatch;
mod trace;

pub use dispatch::{preempt_check, Dispatcher, PolicyDispatcher, ReplayDispatcher, ReplayStep};
pub use trace::{default_backends, BackendSpec, RequestInfo, Trace, TraceKind, TraceRecord};

use crate::error::{Error, Result};
use crate::latencydb::{BackendKind, LatencyDatabase, StageKind};
use crate::policies::{BackendTable, SchedulerPolicy};
use crate::time::{layer_duration_us, Deadline, Micros};
use crate::workload::{
    frame_deadline, next_layer_descriptor, root_request, HorizonPolicy, InferenceRequest, LayerRef, ModelSpec,
    RequestStatus, RootArrival, ScenarioSpec, Stage,
};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

/// Layer-completion silence after which a generative request is declared starved.
pub const DEFAULT_STARVATION_BOUND_US: Micros = 2_000_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimConfig {
    pub starvation_bound_us: Micros,
    /// Leave CPU out of a model's candidates when an accelerator can run it.
    pub exclude_cpu: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { starvation_bound_us: DEFAULT_STARVATION_BOUND_US, exclude_cpu: true }
    }
}

/// The layer currently occupying a backend.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Running {
    pub request_id: u64,
    pub layer: LayerRef,
    pub start_us: Micros,
    pub finish_us: Micros,
    pub abortable: bool,
}

#[derive(Clone, Debug)]
pub struct BackendState {
    pub spec: BackendSpec,
    pub running: Option<Running>,
    epoch: u64,
}

impl BackendState {
    pub fn is_free(&self) -> bool {
        self.running.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum ArrivalSource {
    Frame,
    Prompt(u32),
    Cascade { parent: u64 },
    Explicit(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Payload {
    Arrival { model: usize, seq: u64, source: ArrivalSource },
    Expiry(u64),
    Complete { backend: usize, epoch: u64 },
    HorizonEnd,
    StarveCheck(u32),
}

impl Payload {
    fn class(&self) -> u8 {
        match self {
            Payload::Arrival { .. } => 0,
            Payload::Expiry(_) => 1,
            Payload::Complete { .. } => 2,
            Payload::HorizonEnd | Payload::StarveCheck(_) => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    time: Micros,
    class: u8,
    payload: Payload,
}

#[derive(Clone, Copy, Debug)]
struct LineageState {
    current: Option<u64>,
    last_progress: Micros,
    done: bool,
}

#[derive(Clone, Copy)]
enum Source<'a> {
    Scenario(&'a ScenarioSpec),
    Explicit(&'a [InferenceRequest]),
}

/// Mutable simulation state handed to a [`Dispatcher`].
pub struct SimState<'a> {
    now: Micros,
    source: Source<'a>,
    models: &'a [ModelSpec],
    db: &'a LatencyDatabase,
    table: BackendTable,
    cfg: SimConfig,
    backends: Vec<BackendState>,
    requests: Vec<InferenceRequest>,
    info: Vec<RequestInfo>,
    active: BTreeSet<u64>,
    events: BinaryHeap<Reverse<Event>>,
    lineages: BTreeMap<u32, LineageState>,
    prompts_pending: usize,
    issuing: bool,
    records: Vec<TraceRecord>,
}

impl<'a> SimState<'a> {
    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn models(&self) -> &'a [ModelSpec] {
        self.models
    }

    pub fn db(&self) -> &'a LatencyDatabase {
        self.db
    }

    pub fn table(&self) -> &BackendTable {
        &self.table
    }

    pub fn backends(&self) -> &[BackendState] {
        &self.backends
    }

    pub fn request(&self, id: u64) -> &InferenceRequest {
        &self.requests[id as usize]
    }

    /// Requests that have arrived, are unfinished and not running.
    pub fn runnable(&self) -> Vec<&InferenceRequest> {
        self.active
            .iter()
            .map(|&id| &self.requests[id as usize])
            .filter(|r| r.status == RequestStatus::Pending)
            .collect()
    }

    /// Idle backends as `(index, kind)` in configuration order.
    pub fn free_backends(&self) -> Vec<(usize, BackendKind)> {
        self.backends.iter().enumerate().filter(|(_, b)| b.is_free()).map(|(i, b)| (i, b.spec.kind)).collect()
    }

    /// Starts the next layer of `request_id` on `backend`.
    pub fn start(&mut self, request_id: u64, backend: usize, abortable: bool) -> Result<()> {
        let now = self.now;
        let req = self
            .requests
            .get(request_id as usize)
            .ok_or_else(|| Error::Invariant(format!("start of unknown request {request_id}")))?;
        if req.status != RequestStatus::Pending {
            return Err(Error::Invariant(format!("request {request_id} is not runnable ({:?})", req.status)));
        }
        let state = self.backends.get(backend).ok_or_else(|| Error::Invariant(format!("unknown backend {backend}")))?;
        if !state.is_free() {
            return Err(Error::Invariant(format!("backend {} is busy", state.spec.id)));
        }
        let model = &self.models[req.model];
        let layer = next_layer_descriptor(req, model)?;
        let ms = self.db.lookup(&model.profile, layer.stage.kind(), layer.context_tokens, state.spec.kind)?;
        let finish_us = now + layer_duration_us(ms);
        let epoch = state.epoch;
        self.backends[backend].running = Some(Running { request_id, layer, start_us: now, finish_us, abortable });
        self.requests[request_id as usize].status = RequestStatus::Running;
        self.push(finish_us, Payload::Complete { backend, epoch });
        self.record(TraceKind::LayerStart, request_id, Some(layer.stage), Some(layer.layer_index), Some(backend));
        Ok(())
    }

    /// Aborts the layer running on `backend`; its progress is discarded.
    pub fn abort(&mut self, backend: usize) -> Result<()> {
        let run = self
            .backends
            .get_mut(backend)
            .and_then(|b| b.running.take())
            .ok_or_else(|| Error::Invariant(format!("abort on idle backend {backend}")))?;
        self.backends[backend].epoch += 1;
        self.requests[run.request_id as usize].status = RequestStatus::Pending;
        self.record(
            TraceKind::LayerAbort,
            run.request_id,
            Some(run.layer.stage),
            Some(run.layer.layer_index),
            Some(backend),
        );
        Ok(())
    }

    fn push(&mut self, time: Micros, payload: Payload) {
        self.events.push(Reverse(Event { time, class: payload.class(), payload }));
    }

    fn record(
        &mut self,
        kind: TraceKind,
        request_id: u64,
        stage: Option<Stage>,
        layer: Option<u32>,
        backend: Option<usize>,
    ) {
        let model = self.requests[request_id as usize].model;
        self.records.push(TraceRecord { t_us: self.now, kind, request_id, model, stage, layer, backend });
    }

    fn running_on(&self, request_id: u64) -> Option<usize> {
        self.backends.iter().position(|b| b.running.is_some_and(|r| r.request_id == request_id))
    }

    fn finish_request(&mut self, id: u64, status: RequestStatus) {
        let kind = match status {
            RequestStatus::Complete => TraceKind::RequestComplete,
            RequestStatus::Dropped => TraceKind::RequestDrop,
            RequestStatus::Starved => TraceKind::RequestStarve,
            _ => unreachable!("non-terminal status"),
        };
        self.requests[id as usize].status = status;
        self.info[id as usize].status = status;
        self.active.remove(&id);
        self.record(kind, id, None, None, None);
    }

    fn lineage_over(&mut self, prompt: u32) {
        if let Some(l) = self.lineages.get_mut(&prompt) {
            l.done = true;
            l.current = None;
        }
        self.refresh_issuing();
    }

    fn refresh_issuing(&mut self) {
        if let Source::Scenario(s) = self.source {
            if s.horizon == HorizonPolicy::UntilLlmComplete {
                self.issuing = self.prompts_pending > 0 || self.lineages.values().any(|l| !l.done);
            }
        }
    }

    fn admit(&mut self, mut req: InferenceRequest) {
        let id = self.requests.len() as u64;
        req.request_id = id;
        if let Deadline::At(t) = req.deadline {
            self.push(t, Payload::Expiry(id));
        }
        let prompt = req.lineage.map(|l| l.prompt);
        self.info.push(RequestInfo {
            request_id: id,
            model: req.model,
            arrival_us: req.arrival_us,
            deadline: req.deadline,
            prompt,
            status: RequestStatus::Pending,
        });
        self.requests.push(req);
        self.active.insert(id);
        self.record(TraceKind::RequestArrive, id, None, None, None);
        if let Some(p) = prompt {
            let now = self.now;
            let entry =
                self.lineages.entry(p).or_insert(LineageState { current: None, last_progress: now, done: false });
            entry.current = Some(id);
        }
    }

    /// Handles one arrival; returns whether a request was admitted.
    fn arrive(&mut self, model: usize, seq: u64, source: ArrivalSource) -> bool {
        match (source, self.source) {
            (ArrivalSource::Explicit(i), Source::Explicit(list)) => {
                let req = list[i].clone();
                self.admit(req);
                true
            }
            (ArrivalSource::Frame, Source::Scenario(s)) => {
                if !self.issuing {
                    return false;
                }
                let fps = s.models[model].fps.expect("frame source has fps");
                let req = root_request(s, 0, RootArrival { time: self.now, model, seq, prompt: None });
                debug_assert_eq!(req.deadline, frame_deadline(fps, seq));
                self.admit(req);
                let next = fps.frame_arrival(seq + 1);
                if self.frame_window_open(next) {
                    self.push(next, Payload::Arrival { model, seq: seq + 1, source: ArrivalSource::Frame });
                }
                true
            }
            (ArrivalSource::Prompt(p), Source::Scenario(s)) => {
                self.prompts_pending -= 1;
                let req = root_request(s, 0, RootArrival { time: self.now, model, seq, prompt: Some(p) });
                self.admit(req);
                if s.horizon == HorizonPolicy::UntilLlmComplete {
                    let at = self.now + self.cfg.starvation_bound_us;
                    self.push(at, Payload::StarveCheck(p));
                }
                self.refresh_issuing();
                true
            }
            (ArrivalSource::Cascade { parent }, _) => {
                let lineage = self.requests[parent as usize].lineage;
                let spec = &self.models[model];
                let req = InferenceRequest::new(0, model, spec, self.now, Deadline::Infinite, lineage);
                self.admit(req);
                true
            }
            _ => unreachable!("arrival source does not match the simulation source"),
        }
    }

    fn frame_window_open(&self, t: Micros) -> bool {
        match self.source {
            Source::Scenario(s) => match s.horizon {
                HorizonPolicy::FixedMs(h) => t < h,
                HorizonPolicy::UntilLlmComplete => self.issuing,
            },
            Source::Explicit(_) => false,
        }
    }

    /// Deadline expiry; returns whether state changed.
    fn expire(&mut self, id: u64) -> Result<bool> {
        if self.requests[id as usize].is_finished() {
            return Ok(false);
        }
        if let Some(b) = self.running_on(id) {
            let run = self.backends[b].running.expect("running");
            if run.finish_us == self.now {
                let mut probe = self.requests[id as usize].clone();
                if probe.complete_layer(&self.models[probe.model]).finished {
                    // completing exactly at the deadline counts as on time
                    return Ok(false);
                }
            }
            self.abort(b)?;
        }
        self.finish_request(id, RequestStatus::Dropped);
        Ok(true)
    }

    fn complete(&mut self, backend: usize) -> Result<()> {
        let run = self.backends[backend].running.take().expect("checked by caller");
        self.backends[backend].epoch += 1;
        let id = run.request_id;
        self.record(TraceKind::LayerFinish, id, Some(run.layer.stage), Some(run.layer.layer_index), Some(backend));
        let model_idx = self.requests[id as usize].model;
        let model = &self.models[model_idx];
        let outcome = self.requests[id as usize].complete_layer(model);
        if let Some(tok) = outcome.token {
            self.record(TraceKind::TokenEmit, id, Some(run.layer.stage), Some(tok), None);
        }
        let lineage = self.requests[id as usize].lineage;
        if let Some(l) = lineage {
            if let Some(state) = self.lineages.get_mut(&l.prompt) {
                state.last_progress = self.now;
            }
        }
        if !outcome.finished {
            self.requests[id as usize].status = RequestStatus::Pending;
            return Ok(());
        }
        self.finish_request(id, RequestStatus::Complete);
        if let Some(l) = lineage {
            let child =
                self.models[model_idx].cascade_next.as_deref().and_then(|n| self.models.iter().position(|m| m.id == n));
            match child {
                Some(c) => {
                    let delay = match (&self.source, self.models[c].is_generative()) {
                        (Source::Scenario(s), true) => s.retrieval_delay_us,
                        _ => 0,
                    };
                    if let Some(state) = self.lineages.get_mut(&l.prompt) {
                        state.current = None;
                    }
                    let source = ArrivalSource::Cascade { parent: id };
                    if delay == 0 {
                        // the child is runnable in the same dispatch round
                        self.arrive(c, l.prompt as u64, source);
                    } else {
                        let at = self.now + delay;
                        self.push(at, Payload::Arrival { model: c, seq: l.prompt as u64, source });
                    }
                }
                None => self.lineage_over(l.prompt),
            }
        }
        Ok(())
    }

    fn starve_lineage(&mut self, prompt: u32) -> Result<()> {
        if let Some(id) = self.lineages.get(&prompt).and_then(|l| l.current) {
            if let Some(b) = self.running_on(id) {
                self.abort(b)?;
            }
            self.finish_request(id, RequestStatus::Starved);
        }
        self.lineage_over(prompt);
        Ok(())
    }

    /// Applies every event at the earliest pending timestamp.
    /// Returns whether anything observable changed.
    fn step(&mut self) -> Result<bool> {
        let Some(Reverse(first)) = self.events.pop() else { return Ok(false) };
        self.now = first.time;
        let mut batch = vec![first];
        while self.events.peek().is_some_and(|Reverse(e)| e.time == self.now) {
            batch.push(self.events.pop().expect("peeked").0);
        }
        batch.sort();
        let mut changed = false;

        let mut completes: Vec<(u64, usize)> = Vec::new();
        for ev in &batch {
            match ev.payload {
                Payload::Arrival { model, seq, source } => changed |= self.arrive(model, seq, source),
                Payload::Expiry(id) => changed |= self.expire(id)?,
                Payload::Complete { backend, epoch } => {
                    let b = &self.backends[backend];
                    if b.epoch == epoch {
                        if let Some(r) = b.running {
                            completes.push((r.request_id, backend));
                        }
                    }
                }
                Payload::HorizonEnd | Payload::StarveCheck(_) => {}
            }
        }
        // Completions are applied by request id once expiries have run.
        completes.sort();
        for (id, backend) in completes {
            let still = self.backends[backend].running.is_some_and(|r| r.request_id == id && r.finish_us == self.now);
            if still {
                self.complete(backend)?;
                changed = true;
            }
        }
        for ev in &batch {
            match ev.payload {
                Payload::HorizonEnd => {
                    let open: Vec<u32> = self.lineages.iter().filter(|(_, l)| !l.done).map(|(p, _)| *p).collect();
                    for p in open {
                        self.starve_lineage(p)?;
                        changed = true;
                    }
                }
                Payload::StarveCheck(p) => {
                    let Some(l) = self.lineages.get(&p).copied() else { continue };
                    if l.done {
                        continue;
                    }
                    let due = l.last_progress + self.cfg.starvation_bound_us;
                    if due <= self.now {
                        self.starve_lineage(p)?;
                        changed = true;
                    } else {
                        self.push(due, Payload::StarveCheck(p));
                    }
                }
                _ => {}
            }
        }
        Ok(changed)
    }

    fn into_trace(mut self, scenario_id: String) -> Trace {
        // Anything still unfinished once the event queue is empty can never run.
        let left: Vec<u64> = self.active.iter().copied().collect();
        for id in left {
            if let Some(b) = self.running_on(id) {
                self.abort(b).expect("running layer");
            }
            self.finish_request(id, RequestStatus::Starved);
        }
        Trace {
            scenario_id,
            models: self.models.iter().map(|m| m.id.clone()).collect(),
            backends: self.backends.into_iter().map(|b| b.spec).collect(),
            requests: self.info,
            records: self.records,
            horizon_us: self.now,
        }
    }
}

fn check_inputs(models: &[ModelSpec], backends: &[BackendSpec], table: &BackendTable) -> Result<()> {
    if backends.is_empty() {
        return Err(Error::NoBackends);
    }
    for (i, m) in models.iter().enumerate() {
        let stages: &[StageKind] =
            if m.is_generative() { &[StageKind::Prefill, StageKind::Decode] } else { &[StageKind::Forward] };
        for &s in stages {
            if table.permitted(i, s).is_empty() {
                return Err(Error::BackendUnsupported(format!(
                    "no configured backend runs ({}, {s}) for model `{}`",
                    m.profile, m.id
                )));
            }
        }
    }
    Ok(())
}

fn new_state<'a>(
    source: Source<'a>,
    models: &'a [ModelSpec],
    db: &'a LatencyDatabase,
    backends: &[BackendSpec],
    cfg: &SimConfig,
    table: BackendTable,
) -> SimState<'a> {
    SimState {
        now: 0,
        source,
        models,
        db,
        table,
        cfg: cfg.clone(),
        backends: backends.iter().map(|s| BackendState { spec: s.clone(), running: None, epoch: 0 }).collect(),
        requests: Vec::new(),
        info: Vec::new(),
        active: BTreeSet::new(),
        events: BinaryHeap::new(),
        lineages: BTreeMap::new(),
        prompts_pending: 0,
        issuing: false,
        records: Vec::new(),
    }
}

fn run_loop(state: &mut SimState<'_>, dispatcher: &mut dyn Dispatcher) -> Result<()> {
    while !state.events.is_empty() {
        if state.step()? {
            dispatcher.dispatch(state)?;
        }
    }
    Ok(())
}

/// Runs `scenario` with a custom dispatcher.
pub fn run_scenario(
    scenario: &ScenarioSpec,
    db: &LatencyDatabase,
    backends: &[BackendSpec],
    cfg: &SimConfig,
    dispatcher: &mut dyn Dispatcher,
) -> Result<Trace> {
    scenario.validate()?;
    let kinds: Vec<BackendKind> = backends.iter().map(|b| b.kind).collect();
    let table = BackendTable::for_scenario(scenario, db, &kinds, cfg.exclude_cpu);
    check_inputs(&scenario.models, backends, &table)?;
    let max = db.max_bucket();
    for p in &scenario.prompts {
        if p.input_tokens > max || p.encoder_tokens() > max {
            return Err(Error::ContextOutOfRange { context: p.input_tokens.max(p.encoder_tokens()), max });
        }
    }
    let mut state = new_state(Source::Scenario(scenario), &scenario.models, db, backends, cfg, table);

    let window = |t: Micros| match scenario.horizon {
        HorizonPolicy::FixedMs(h) => t < h,
        HorizonPolicy::UntilLlmComplete => true,
    };
    let entry = scenario.generative_entry();
    for (i, p) in scenario.prompts.iter().enumerate() {
        if window(p.arrival_us) {
            let model = entry.expect("validated: prompts need a generative cascade");
            state.prompts_pending += 1;
            state
                .push(p.arrival_us, Payload::Arrival { model, seq: i as u64, source: ArrivalSource::Prompt(i as u32) });
        }
    }
    state.issuing = match scenario.horizon {
        HorizonPolicy::FixedMs(_) => true,
        HorizonPolicy::UntilLlmComplete => state.prompts_pending > 0,
    };
    if state.issuing {
        for m in scenario.fps_models() {
            if window(0) {
                state.push(0, Payload::Arrival { model: m, seq: 0, source: ArrivalSource::Frame });
            }
        }
    }
    if let HorizonPolicy::FixedMs(h) = scenario.horizon {
        state.push(h, Payload::HorizonEnd);
    }
    run_loop(&mut state, dispatcher)?;
    Ok(state.into_trace(scenario.id.clone()))
}

/// Runs an explicit request list (no periodic generation, no starvation bound).
///
/// `requests` must be sorted by (arrival, model declaration index); they are
/// assigned ids `0..n` in that order.
pub fn run_requests(
    id: &str,
    models: &[ModelSpec],
    requests: &[InferenceRequest],
    db: &LatencyDatabase,
    backends: &[BackendSpec],
    cfg: &SimConfig,
    dispatcher: &mut dyn Dispatcher,
) -> Result<Trace> {
    if requests.windows(2).any(|w| (w[0].arrival_us, w[0].model) > (w[1].arrival_us, w[1].model)) {
        return Err(Error::Invariant("explicit requests must be sorted by (arrival, model)".into()));
    }
    let kinds: Vec<BackendKind> = backends.iter().map(|b| b.kind).collect();
    let first = requests.iter().find_map(|r| r.lineage);
    let table = BackendTable::build(models, db, &kinds, cfg.exclude_cpu, |_, stage| match (stage, first) {
        (StageKind::Forward, Some(l)) => l.query_tokens,
        (StageKind::Forward, None) => 0,
        (_, Some(l)) => l.input_tokens,
        (_, None) => 0,
    });
    check_inputs(models, backends, &table)?;
    for r in requests {
        if r.model >= models.len() || r.status != RequestStatus::Pending || r.next_layer != 0 {
            return Err(Error::Invariant(format!("explicit request {} is not a fresh request", r.request_id)));
        }
    }
    let mut state = new_state(Source::Explicit(requests), models, db, backends, cfg, table);
    for (i, r) in requests.iter().enumerate() {
        state
            .push(r.arrival_us, Payload::Arrival { model: r.model, seq: i as u64, source: ArrivalSource::Explicit(i) });
    }
    run_loop(&mut state, dispatcher)?;
    Ok(state.into_trace(id.to_string()))
}

/// Runs `scenario` under `policy` with the default configuration.
pub fn simulate(
    scenario: &ScenarioSpec,
    db: &LatencyDatabase,
    policy: SchedulerPolicy,
    backends: &[BackendSpec],
) -> Result<Trace> {
    simulate_with(scenario, db, policy, backends, &SimConfig::default())
}

pub fn simulate_with(
    scenario: &ScenarioSpec,
    db: &LatencyDatabase,
    policy: SchedulerPolicy,
    backends: &[BackendSpec],
    cfg: &SimConfig,
) -> Result<Trace> {
    run_scenario(scenario, db, backends, cfg, &mut PolicyDispatcher::new(policy))
}
