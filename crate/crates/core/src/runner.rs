//! Batches of independent simulations: policy comparisons, sequence-length
//! sweeps and oracle checks.
//!
//! Every batch maps a pure function over its inputs and keeps input order,
//! so the parallel and sequential paths return identical results.

use crate::engine::{simulate_with, BackendSpec, SimConfig};
use crate::error::Result;
use crate::latencydb::LatencyDatabase;
use crate::metrics::{compare_report, compute, ComparisonTable, SweepRow};
use crate::oracle::{exhaustive_best, measure, random_instance, Objective};
use crate::policies::{PolicyId, SchedulerPolicy};
use crate::workload::ScenarioSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    /// Rayon thread pool when the `parallel` feature is on, otherwise
    /// sequential.
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            _ => items.iter().map(f).collect(),
        }
    }
}

/// Environment shared by every run in a batch.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub db: &'a LatencyDatabase,
    pub backends: &'a [BackendSpec],
    pub cfg: &'a SimConfig,
    pub exec: Execution,
}

impl<'a> Batch<'a> {
    pub fn new(db: &'a LatencyDatabase, backends: &'a [BackendSpec], cfg: &'a SimConfig) -> Self {
        Batch { db, backends, cfg, exec: Execution::default() }
    }

    pub fn with_execution(self, exec: Execution) -> Self {
        Batch { exec, ..self }
    }

    /// All five policies on one scenario, in policy order.
    pub fn compare(&self, scenario: &ScenarioSpec) -> Result<ComparisonTable> {
        let runs = self.exec.map(&PolicyId::ALL, |&p| {
            let trace = simulate_with(scenario, self.db, SchedulerPolicy::new(p), self.backends, self.cfg)?;
            Ok((p, compute(&trace, scenario)?))
        });
        let rows = runs.into_iter().collect::<Result<Vec<_>>>()?;
        compare_report(&rows)
    }

    /// One policy over several prompt input lengths, in the given order.
    pub fn sweep(&self, scenario: &ScenarioSpec, policy: PolicyId, tokens: &[u32]) -> Result<Vec<SweepRow>> {
        let runs = self.exec.map(tokens, |&n| {
            let s = scenario.with_input_tokens(n);
            let trace = simulate_with(&s, self.db, SchedulerPolicy::new(policy), self.backends, self.cfg)?;
            Ok(SweepRow { input_tokens: n, policy, report: compute(&trace, &s)? })
        });
        runs.into_iter().collect()
    }
}

/// Outcome of checking the five policies against the oracle on one random
/// tiny instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleCheck {
    pub seed: u64,
    pub best_violations: u64,
    /// Violations of the oracle witness when replayed through the engine.
    pub replayed_violations: Option<u64>,
    pub best_ttft_us: Option<u64>,
    pub replayed_ttft_us: Option<u64>,
    /// (policy, violations, TTFT) per policy.
    pub policies: Vec<(PolicyId, u64, Option<u64>)>,
}

impl OracleCheck {
    /// No policy beats the oracle and the witnesses replay exactly.
    pub fn holds(&self) -> bool {
        self.replayed_violations == Some(self.best_violations)
            && self.replayed_ttft_us == self.best_ttft_us
            && self.policies.iter().all(|&(_, v, ttft)| {
                v >= self.best_violations
                    && match (ttft, self.best_ttft_us) {
                        (Some(t), Some(best)) => t >= best,
                        (Some(_), None) => false,
                        (None, _) => true,
                    }
            })
    }
}

pub fn check_seed(seed: u64) -> Result<OracleCheck> {
    let inst = random_instance(seed);
    let viol = exhaustive_best(&inst, Objective::MinViolations)?;
    let best_violations = viol.value.expect("stopping immediately is always a schedule");
    let replayed_violations = measure(&inst, &inst.replay(&viol.witness)?, Objective::MinViolations);
    let ttft = exhaustive_best(&inst, Objective::MinTtft)?;
    let replayed_ttft_us = match ttft.value {
        Some(_) => measure(&inst, &inst.replay(&ttft.witness)?, Objective::MinTtft),
        None => None,
    };
    let mut policies = Vec::with_capacity(PolicyId::ALL.len());
    for p in PolicyId::ALL {
        let trace = inst.simulate(SchedulerPolicy::new(p))?;
        let v = measure(&inst, &trace, Objective::MinViolations).unwrap_or(0);
        policies.push((p, v, measure(&inst, &trace, Objective::MinTtft)));
    }
    Ok(OracleCheck { seed, best_violations, replayed_violations, best_ttft_us: ttft.value, replayed_ttft_us, policies })
}

/// Oracle checks over `count` consecutive seeds starting at `first`.
pub fn oracle_checks(first: u64, count: u64, exec: Execution) -> Result<Vec<OracleCheck>> {
    let seeds: Vec<u64> = (first..first + count).collect();
    exec.map(&seeds, |&s| check_seed(s)).into_iter().collect()
}
