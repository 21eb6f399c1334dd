use super::SimState;
use crate::error::{Error, Result};
use crate::policies::SchedulerPolicy;
use crate::time::Micros;
use crate::workload::{next_layer_descriptor, InferenceRequest, LayerRef};

/// Decides which layers start (and which get aborted) at an event boundary.
pub trait Dispatcher {
    fn dispatch(&mut self, sim: &mut SimState<'_>) -> Result<()>;
}

/// Work-conserving dispatcher driven by a [`SchedulerPolicy`].
#[derive(Clone, Copy, Debug)]
pub struct PolicyDispatcher {
    pub policy: SchedulerPolicy,
}

impl PolicyDispatcher {
    pub fn new(policy: SchedulerPolicy) -> Self {
        PolicyDispatcher { policy }
    }
}

impl Dispatcher for PolicyDispatcher {
    fn dispatch(&mut self, sim: &mut SimState<'_>) -> Result<()> {
        let policy = self.policy;
        let models = sim.models();
        loop {
            let order: Vec<u64> = {
                let runnable = sim.runnable();
                policy.priority_order(&runnable, models).into_iter().map(|i| runnable[i].request_id).collect()
            };
            let mut preempted = false;
            for id in order {
                let req = sim.request(id);
                let model = &models[req.model];
                let layer = next_layer_descriptor(req, model)?;
                let abortable = policy.abortable_flag(req);
                let free = sim.free_backends();
                if let Some(b) = policy.backend_rule(sim.db(), sim.table(), model, &layer, &free) {
                    sim.start(id, b, abortable)?;
                    continue;
                }
                if let Some(b) = preempt_check(&policy, sim, req, &layer) {
                    sim.abort(b)?;
                    sim.start(id, b, abortable)?;
                    preempted = true;
                    // the victim is runnable again; rescan from the top
                    break;
                }
            }
            if !preempted {
                return Ok(());
            }
        }
    }
}

/// Backend whose running layer `candidate` may abort, if any.
///
/// Only deadline-aware policies preempt, only on backends the candidate may
/// use, and only layers marked abortable whose request has a strictly later
/// effective deadline. The lowest-priority such layer is chosen.
pub fn preempt_check(
    policy: &SchedulerPolicy,
    sim: &SimState<'_>,
    candidate: &InferenceRequest,
    layer: &LayerRef,
) -> Option<usize> {
    if !policy.deadline_aware {
        return None;
    }
    let models = sim.models();
    let mine = policy.effective_deadline(candidate, &models[candidate.model]);
    let usable = policy.usable_kinds(sim.table(), layer);
    let mut victim = None;
    for (i, b) in sim.backends().iter().enumerate() {
        let Some(run) = b.running else { continue };
        if !run.abortable || !usable.contains(&b.spec.kind) {
            continue;
        }
        let other = sim.request(run.request_id);
        let model = &models[other.model];
        if policy.effective_deadline(other, model) <= mine {
            continue;
        }
        let key = policy.priority_key(other, model);
        if victim.is_none_or(|(k, _)| key > k) {
            victim = Some((key, i));
        }
    }
    victim.map(|(_, i)| i)
}

/// Starts issued at one decision instant: `(request id, backend index)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReplayStep {
    pub time_us: Micros,
    pub starts: Vec<(u64, usize)>,
}

/// Replays a fixed schedule. Every start must be legal when its instant is
/// reached; the engine only consults the dispatcher at event boundaries, so
/// steps at other instants are reported as errors.
#[derive(Clone, Debug, Default)]
pub struct ReplayDispatcher {
    steps: Vec<ReplayStep>,
    cursor: usize,
}

impl ReplayDispatcher {
    pub fn new(mut steps: Vec<ReplayStep>) -> Self {
        steps.sort_by_key(|s| s.time_us);
        ReplayDispatcher { steps, cursor: 0 }
    }

    /// Whether every step has been applied.
    pub fn finished(&self) -> bool {
        self.cursor == self.steps.len()
    }
}

impl Dispatcher for ReplayDispatcher {
    fn dispatch(&mut self, sim: &mut SimState<'_>) -> Result<()> {
        let now = sim.now();
        if let Some(step) = self.steps.get(self.cursor) {
            if step.time_us < now {
                return Err(Error::Invariant(format!(
                    "replay step at {} us was never reached (now {now} us)",
                    step.time_us
                )));
            }
        }
        while let Some(step) = self.steps.get(self.cursor).filter(|s| s.time_us == now) {
            for &(id, backend) in &step.starts {
                sim.start(id, backend, false)?;
            }
            self.cursor += 1;
        }
        Ok(())
    }
}
