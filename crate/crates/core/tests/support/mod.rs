//! Random scenario generator and trace checks shared by the property suite
//! and the acceptance runner.
#![allow(dead_code)]

use proptest::prelude::*;
use rtgen_core::engine::{simulate_with, BackendSpec, SimConfig, Trace, TraceKind, TraceRecord};
use rtgen_core::latencydb::{BackendKind, LatencyDatabase};
use rtgen_core::policies::{PolicyId, SchedulerPolicy};
use rtgen_core::time::{Fps, Micros};
use rtgen_core::workload::{HorizonPolicy, ModelKind, ModelSpec, PromptJob, ScenarioSpec, Stage, Task};
use std::collections::HashMap;
use std::sync::OnceLock;

pub const CASES: u32 = 500;

pub type Check = fn(&Case) -> Result<(), String>;

pub const CHECKS: [(&str, Check); 6] = [
    ("determinism", deterministic),
    ("backend exclusivity", exclusive),
    ("abort safety", abort_safe),
    ("status conservation", conserved),
    ("FCFS aborts only at drop", fcfs_never_preempts),
    ("FTF prefill never aborted", ftf_keeps_prefill),
];

fn db() -> &'static LatencyDatabase {
    static DB: OnceLock<LatencyDatabase> = OnceLock::new();
    DB.get_or_init(LatencyDatabase::default_calibrated)
}

#[derive(Clone, Debug)]
pub struct Case {
    pub scenario: ScenarioSpec,
    pub backends: Vec<BackendSpec>,
    pub policy: PolicyId,
}

impl Case {
    fn with_policy(&self, policy: PolicyId) -> Case {
        Case { policy, ..self.clone() }
    }
}

fn cfg() -> SimConfig {
    SimConfig { starvation_bound_us: 150_000, ..SimConfig::default() }
}

fn model(id: &str, task: Task, kind: ModelKind, layers: u32, fps: Option<u64>, next: Option<&str>) -> ModelSpec {
    ModelSpec {
        id: id.into(),
        task,
        kind,
        layer_count: layers,
        fps: fps.and_then(Fps::integer),
        cascade_next: next.map(Into::into),
        profile: task.profile().into(),
    }
}

fn frame_models() -> impl Strategy<Value = Vec<ModelSpec>> {
    let one = |id: &'static str, task| {
        proptest::option::of((prop::sample::select(vec![15u64, 30, 60, 120]), 1u32..=2))
            .prop_map(move |o| o.map(|(fps, layers)| model(id, task, ModelKind::SinglePass, layers, Some(fps), None)))
    };
    (one("SR", Task::Sr), one("Seg", Task::Seg), one("OD", Task::Od))
        .prop_map(|(a, b, c)| [a, b, c].into_iter().flatten().collect())
}

fn prompt() -> impl Strategy<Value = PromptJob> {
    (0u64..40_000, prop::sample::select(vec![16u32, 48, 128, 300, 1024]), 1u32..4, 8u32..64).prop_map(
        |(arrival_us, input_tokens, output_tokens, q)| PromptJob {
            arrival_us,
            input_tokens,
            output_tokens,
            query_tokens: Some(q),
        },
    )
}

prop_compose! {
    pub fn case()(
        frames in frame_models(),
        // 0: no generative cascade, 1: LLM alone, 2: encoder feeding the LLM
        cascade in 0u8..3,
        llm_layers in 1u32..=4,
        prompts in prop::collection::vec(prompt(), 1..=2),
        fixed in proptest::option::of(20_000u64..120_000),
        delay in prop::sample::select(vec![0u64, 0, 1_500]),
        three in any::<bool>(),
        policy in prop::sample::select(PolicyId::ALL.to_vec()),
        llm_first in any::<bool>(),
    ) -> Case {
        let mut gen = Vec::new();
        if cascade == 2 {
            gen.push(model("Encoder", Task::Encoder, ModelKind::SinglePass, 1, None, Some("LLM")));
        }
        if cascade > 0 {
            gen.push(model("LLM", Task::Llm, ModelKind::Generative, llm_layers, None, None));
        }
        let has_gen = !gen.is_empty();
        let mut prompts = prompts;
        prompts.sort_by_key(|p| p.arrival_us);
        let frames = if frames.is_empty() && !has_gen {
            vec![model("SR", Task::Sr, ModelKind::SinglePass, 1, Some(60), None)]
        } else {
            frames
        };
        let models = if llm_first { [gen, frames].concat() } else { [frames, gen].concat() };
        let horizon = match fixed {
            Some(h) => HorizonPolicy::FixedMs(h),
            None if has_gen => HorizonPolicy::UntilLlmComplete,
            None => HorizonPolicy::FixedMs(60_000),
        };
        let scenario = ScenarioSpec {
            id: "random".into(),
            models,
            prompts: if has_gen { prompts } else { Vec::new() },
            horizon,
            retrieval_delay_us: delay,
        };
        let mut backends = vec![BackendSpec::new("gpu0", BackendKind::Gpu), BackendSpec::new("npu0", BackendKind::Npu)];
        if three {
            backends.insert(0, BackendSpec::new("cpu0", BackendKind::Cpu));
        }
        Case { scenario, backends, policy }
    }
}

pub fn run(c: &Case) -> Trace {
    simulate_with(&c.scenario, db(), SchedulerPolicy::new(c.policy), &c.backends, &cfg())
        .expect("valid random scenario")
}

fn is_terminal(kind: TraceKind) -> bool {
    matches!(kind, TraceKind::RequestComplete | TraceKind::RequestDrop | TraceKind::RequestStarve)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Every LayerAbort of a request satisfying `guard` coincides with that
/// request terminating at the same instant.
pub fn aborts_only_at_termination(trace: &Trace, guard: impl Fn(&TraceRecord) -> bool) -> Result<(), String> {
    for a in trace.records_of(TraceKind::LayerAbort).filter(|r| guard(r)) {
        let ended =
            trace.records.iter().any(|r| r.request_id == a.request_id && r.t_us == a.t_us && is_terminal(r.kind));
        ensure(ended, || format!("scheduling abort {a:?}"))?;
    }
    Ok(())
}

/// Layer the request must run after `done`, given its model and prompt.
fn successor(m: &ModelSpec, output_tokens: u32, done: Option<(Stage, u32)>) -> Option<(Stage, u32)> {
    let last = m.layer_count - 1;
    match done {
        None if m.is_generative() => Some((Stage::Prefill, 0)),
        None => Some((Stage::Forward, 0)),
        Some((s, l)) if l < last => Some((s, l + 1)),
        Some((Stage::Forward, _)) => None,
        Some((Stage::Prefill, _)) => (output_tokens > 0).then_some((Stage::Decode(0), 0)),
        Some((Stage::Decode(k), _)) => (k + 1 < output_tokens).then_some((Stage::Decode(k + 1), 0)),
    }
}

pub fn deterministic(c: &Case) -> Result<(), String> {
    let (a, b) = (run(c).to_jsonl(), run(c).to_jsonl());
    ensure(a == b, || "two runs produced different JSONL".into())
}

pub fn exclusive(c: &Case) -> Result<(), String> {
    let trace = run(c);
    let mut busy: HashMap<usize, (u64, Micros)> = HashMap::new();
    let mut last = 0;
    for r in &trace.records {
        ensure(r.t_us >= last, || format!("time went backwards at {r:?}"))?;
        last = r.t_us;
        ensure(r.t_us >= trace.requests[r.request_id as usize].arrival_us, || format!("{r:?} precedes arrival"))?;
        match r.kind {
            TraceKind::LayerStart => {
                let b = r.backend.ok_or("start without backend")?;
                ensure(busy.insert(b, (r.request_id, r.t_us)).is_none(), || {
                    format!("overlap on backend {b} at {r:?}")
                })?;
            }
            TraceKind::LayerFinish | TraceKind::LayerAbort => {
                let b = r.backend.ok_or("close without backend")?;
                let (req, start) = busy.remove(&b).ok_or_else(|| format!("{r:?} closes nothing"))?;
                ensure(req == r.request_id, || format!("{r:?} closes request {req}"))?;
                ensure(r.t_us > start || r.kind == TraceKind::LayerAbort, || format!("{r:?} took no time"))?;
            }
            _ => {}
        }
    }
    ensure(busy.is_empty(), || format!("intervals left open: {busy:?}"))
}

pub fn abort_safe(c: &Case) -> Result<(), String> {
    let trace = run(c);
    let mut done: HashMap<u64, Option<(Stage, u32)>> = HashMap::new();
    let mut running: HashMap<u64, (Stage, u32)> = HashMap::new();
    for r in &trace.records {
        let info = &trace.requests[r.request_id as usize];
        let m = &c.scenario.models[info.model];
        let out = info.prompt.map_or(0, |p| c.scenario.prompts[p as usize].output_tokens);
        let here = (r.stage.unwrap_or(Stage::Forward), r.layer.unwrap_or(0));
        let prev = *done.entry(r.request_id).or_insert(None);
        match r.kind {
            TraceKind::LayerStart => {
                let want = successor(m, out, prev);
                ensure(want == Some(here), || format!("{r:?} started, expected {want:?}"))?;
                running.insert(r.request_id, here);
            }
            TraceKind::LayerFinish => {
                ensure(running.remove(&r.request_id) == Some(here), || format!("{r:?} was not running"))?;
                done.insert(r.request_id, Some(here));
            }
            TraceKind::LayerAbort => {
                ensure(running.remove(&r.request_id) == Some(here), || format!("{r:?} was not running"))?;
            }
            TraceKind::RequestComplete => {
                ensure(successor(m, out, prev).is_none(), || format!("{r:?} completed with layers left"))?;
            }
            _ => {}
        }
    }
    Ok(())
}

pub fn conserved(c: &Case) -> Result<(), String> {
    let trace = run(c);
    let arrivals = trace.records_of(TraceKind::RequestArrive).count();
    ensure(arrivals == trace.requests.len(), || format!("{arrivals} arrivals for {} requests", trace.requests.len()))?;
    let mut ended: HashMap<u64, TraceKind> = HashMap::new();
    for r in &trace.records {
        ensure(!ended.contains_key(&r.request_id), || format!("record after termination: {r:?}"))?;
        if is_terminal(r.kind) {
            ended.insert(r.request_id, r.kind);
        }
    }
    for info in &trace.requests {
        ensure(ended.contains_key(&info.request_id), || format!("request {} never terminated", info.request_id))?;
        ensure(info.status.is_terminal(), || format!("request {} left {:?}", info.request_id, info.status))?;
    }
    trace.validate().map_err(|e| e.to_string())
}

pub fn fcfs_never_preempts(c: &Case) -> Result<(), String> {
    for p in [PolicyId::FcfsAot, PolicyId::FcfsDyn] {
        aborts_only_at_termination(&run(&c.with_policy(p)), |_| true)?;
    }
    Ok(())
}

pub fn ftf_keeps_prefill(c: &Case) -> Result<(), String> {
    aborts_only_at_termination(&run(&c.with_policy(PolicyId::Ftf)), |r| r.stage == Some(Stage::Prefill))
}
