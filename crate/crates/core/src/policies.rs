//! The five scheduling policies and the decision rules the engine asks them for.

use crate::latencydb::{BackendKind, LatencyDatabase, StageKind};
use crate::time::{Deadline, Micros};
use crate::workload::{InferenceRequest, LayerRef, ModelSpec, ScenarioSpec};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyId {
    #[serde(rename = "FCFS-AOT")]
    FcfsAot,
    #[serde(rename = "FCFS-DYN")]
    FcfsDyn,
    #[serde(rename = "EDF-AOT")]
    EdfAot,
    #[serde(rename = "EDF-DYN")]
    EdfDyn,
    #[serde(rename = "FTF")]
    Ftf,
}

impl PolicyId {
    pub const ALL: [PolicyId; 5] =
        [PolicyId::FcfsAot, PolicyId::FcfsDyn, PolicyId::EdfAot, PolicyId::EdfDyn, PolicyId::Ftf];

    pub fn name(self) -> &'static str {
        match self {
            PolicyId::FcfsAot => "FCFS-AOT",
            PolicyId::FcfsDyn => "FCFS-DYN",
            PolicyId::EdfAot => "EDF-AOT",
            PolicyId::EdfDyn => "EDF-DYN",
            PolicyId::Ftf => "FTF",
        }
    }

    /// Lower-case flag spelling, e.g. `edf-dyn`.
    pub fn flag(self) -> &'static str {
        match self {
            PolicyId::FcfsAot => "fcfs-aot",
            PolicyId::FcfsDyn => "fcfs-dyn",
            PolicyId::EdfAot => "edf-aot",
            PolicyId::EdfDyn => "edf-dyn",
            PolicyId::Ftf => "ftf",
        }
    }
}

impl fmt::Display for PolicyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        PolicyId::ALL
            .into_iter()
            .find(|p| p.flag() == norm)
            .ok_or_else(|| format!("unknown policy `{s}` (expected fcfs-aot, fcfs-dyn, edf-aot, edf-dyn or ftf)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SchedulerPolicy {
    pub id: PolicyId,
    pub deadline_aware: bool,
    pub dynamic_hw: bool,
    pub heterogeneity_aware: bool,
    pub genai_aware: bool,
}

/// Deadline as seen by the scheduler. `Urgent` is the first-token class of
/// the GenAI-aware policy and orders before every real deadline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EffectiveDeadline {
    Urgent,
    At(Micros),
    Infinite,
}

impl From<Deadline> for EffectiveDeadline {
    fn from(d: Deadline) -> Self {
        match d {
            Deadline::At(t) => EffectiveDeadline::At(t),
            Deadline::Infinite => EffectiveDeadline::Infinite,
        }
    }
}

/// Sort key for runnable requests; smaller runs first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PriorityKey {
    pub deadline: EffectiveDeadline,
    pub arrival: Micros,
    pub declaration: usize,
    pub request_id: u64,
}

impl SchedulerPolicy {
    pub const fn new(id: PolicyId) -> Self {
        let (deadline_aware, dynamic_hw, genai_aware) = match id {
            PolicyId::FcfsAot => (false, false, false),
            PolicyId::FcfsDyn => (false, true, false),
            PolicyId::EdfAot => (true, false, false),
            PolicyId::EdfDyn => (true, true, false),
            PolicyId::Ftf => (true, true, true),
        };
        SchedulerPolicy { id, deadline_aware, dynamic_hw, heterogeneity_aware: true, genai_aware }
    }

    pub fn all() -> [SchedulerPolicy; 5] {
        PolicyId::ALL.map(SchedulerPolicy::new)
    }

    pub fn effective_deadline(&self, request: &InferenceRequest, model: &ModelSpec) -> EffectiveDeadline {
        if self.genai_aware && request.first_token_pending(model) {
            EffectiveDeadline::Urgent
        } else {
            request.deadline.into()
        }
    }

    pub fn priority_key(&self, request: &InferenceRequest, model: &ModelSpec) -> PriorityKey {
        if self.deadline_aware {
            PriorityKey {
                deadline: self.effective_deadline(request, model),
                arrival: request.arrival_us,
                declaration: 0,
                request_id: request.request_id,
            }
        } else {
            PriorityKey {
                deadline: EffectiveDeadline::Infinite,
                arrival: request.fcfs_arrival(),
                declaration: request.model,
                request_id: request.request_id,
            }
        }
    }

    /// Indices of `runnable` in the order the policy visits them.
    pub fn priority_order(&self, runnable: &[&InferenceRequest], models: &[ModelSpec]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..runnable.len()).collect();
        idx.sort_by_key(|&i| self.priority_key(runnable[i], &models[runnable[i].model]));
        idx
    }

    /// Whether a layer dispatched now for `request` may later be aborted.
    ///
    /// FTF never aborts generative work. A decode layer on the NPU outlasts a
    /// frame period, so aborting it at frame boundaries would livelock decode.
    pub fn abortable_flag(&self, request: &InferenceRequest) -> bool {
        if !self.deadline_aware {
            return false;
        }
        !(self.genai_aware && request.lineage.is_some())
    }

    /// Backend kinds the request may run on right now: the ahead-of-time
    /// binding for static policies, the whole permitted set otherwise.
    pub fn usable_kinds(&self, table: &BackendTable, layer: &LayerRef) -> Vec<BackendKind> {
        let stage = layer.stage.kind();
        if self.dynamic_hw {
            table.permitted(layer.model, stage).to_vec()
        } else {
            table.bound(layer.model, stage).into_iter().collect()
        }
    }

    /// Picks a free backend for `layer`, or none.
    ///
    /// `free` holds `(backend index, kind)` of idle backends in configuration order.
    pub fn backend_rule(
        &self,
        db: &LatencyDatabase,
        table: &BackendTable,
        model: &ModelSpec,
        layer: &LayerRef,
        free: &[(usize, BackendKind)],
    ) -> Option<usize> {
        let stage = layer.stage.kind();
        if !self.dynamic_hw {
            let bound = table.bound(layer.model, stage)?;
            return free.iter().find(|(_, k)| *k == bound).map(|(i, _)| *i);
        }
        let permitted = table.permitted(layer.model, stage);
        let mut best: Option<(f64, BackendKind, usize)> = None;
        for &(i, kind) in free {
            if !permitted.contains(&kind) {
                continue;
            }
            let Ok(lat) = db.lookup(&model.profile, stage, layer.context_tokens, kind) else {
                continue;
            };
            let better = match best {
                None => true,
                Some((bl, bk, bi)) => (lat, kind, i) < (bl, bk, bi),
            };
            if better {
                best = Some((lat, kind, i));
            }
        }
        best.map(|(_, _, i)| i)
    }
}

impl fmt::Display for SchedulerPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id.name())
    }
}

/// Permitted backend kinds per (model, stage) and the ahead-of-time binding.
#[derive(Clone, Debug, Default)]
pub struct BackendTable {
    permitted: HashMap<(usize, StageKind), Vec<BackendKind>>,
    bound: HashMap<(usize, StageKind), BackendKind>,
}

impl BackendTable {
    /// Builds the table for `models` given the configured backend kinds.
    ///
    /// With `exclude_cpu`, CPU is dropped from a (model, stage) whenever an
    /// accelerator entry exists for it. `default_context` gives the context
    /// length the static binding is profiled at.
    pub fn build(
        models: &[ModelSpec],
        db: &LatencyDatabase,
        configured: &[BackendKind],
        exclude_cpu: bool,
        default_context: impl Fn(usize, StageKind) -> u32,
    ) -> Self {
        let mut table = BackendTable::default();
        for (m, spec) in models.iter().enumerate() {
            let stages: &[StageKind] =
                if spec.is_generative() { &[StageKind::Prefill, StageKind::Decode] } else { &[StageKind::Forward] };
            for &stage in stages {
                let mut kinds: Vec<BackendKind> = db
                    .supported_backends(&spec.profile, stage)
                    .into_iter()
                    .filter(|k| configured.contains(k))
                    .collect();
                if exclude_cpu && kinds.iter().any(|k| *k != BackendKind::Cpu) {
                    kinds.retain(|k| *k != BackendKind::Cpu);
                }
                kinds.sort();
                if let Ok(kind) = db.best_backend(&spec.profile, stage, default_context(m, stage), &kinds) {
                    table.bound.insert((m, stage), kind);
                }
                table.permitted.insert((m, stage), kinds);
            }
        }
        table
    }

    /// Table for a scenario: static bindings are profiled at the first
    /// prompt's lengths.
    pub fn for_scenario(
        scenario: &ScenarioSpec,
        db: &LatencyDatabase,
        configured: &[BackendKind],
        exclude_cpu: bool,
    ) -> Self {
        let first = scenario.prompts.first();
        BackendTable::build(&scenario.models, db, configured, exclude_cpu, |m, stage| match (stage, first) {
            (StageKind::Forward, Some(p)) if scenario.cascade_child(m).is_some() => p.encoder_tokens(),
            (StageKind::Forward, _) => 0,
            (_, Some(p)) => p.input_tokens,
            (_, None) => db.grid().first().copied().unwrap_or(0),
        })
    }

    pub fn permitted(&self, model: usize, stage: StageKind) -> &[BackendKind] {
        self.permitted.get(&(model, stage)).map_or(&[], Vec::as_slice)
    }

    pub fn bound(&self, model: usize, stage: StageKind) -> Option<BackendKind> {
        self.bound.get(&(model, stage)).copied()
    }
}
