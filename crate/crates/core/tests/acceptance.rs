//! Acceptance runner: evaluates every criterion, prints one PASS/FAIL line
//! each and exits non-zero if any fails.

mod support;

use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rtgen_core::metrics::{round1, ComparisonTable};
use rtgen_core::runner::{oracle_checks, Batch, Execution};
use rtgen_core::workload::{builtin_scenario, BuiltinScenario};
use rtgen_core::{default_backends, BackendKind, LatencyDatabase, MetricsReport, PolicyId, SimConfig, StageKind};
use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

const STANDALONE_TTFT: f64 = 1577.9;
const STANDALONE_TPT: f64 = 45.9;
const SWEEP: [u32; 7] = [32, 64, 128, 256, 512, 1024, 2048];

fn near(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol + 1e-9
}

fn near_opt(x: Option<f64>, target: f64, tol: f64) -> bool {
    x.is_some_and(|x| near(x, target, tol))
}

struct Ctx {
    db: LatencyDatabase,
    tables: BTreeMap<char, ComparisonTable>,
}

impl Ctx {
    fn report(&self, scenario: char, policy: PolicyId) -> &MetricsReport {
        let table = &self.tables[&scenario];
        &table.rows.iter().find(|(p, _)| *p == policy).expect("all policies compared").1
    }
}

fn fmt_ms(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.3}"))
}

type Verdict = (bool, String);
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Verdict + 'a>);

fn standalone(ctx: &Ctx) -> Verdict {
    let mut ok = true;
    let mut seen = Vec::new();
    for p in PolicyId::ALL {
        let r = ctx.report('A', p);
        ok &= near_opt(r.ttft_ms, STANDALONE_TTFT, 0.1) && near_opt(r.tpt_ms, STANDALONE_TPT, 0.1);
        seen.push(format!("{} {}/{}", p.name(), fmt_ms(r.ttft_ms), fmt_ms(r.tpt_ms)));
    }
    (ok, format!("A TTFT/TPT ms: {}", seen.join(", ")))
}

fn calibration(ctx: &Ctx) -> Verdict {
    let db = &ctx.db;
    let mut ok = true;
    let mut worst = (0.0f64, 0.0f64);
    for &bucket in db.grid() {
        let get = |stage, backend| db.lookup("LLM", stage, bucket, backend).expect("LLM rows cover the grid");
        let prefill = get(StageKind::Prefill, BackendKind::Gpu) / get(StageKind::Prefill, BackendKind::Npu);
        let decode = get(StageKind::Decode, BackendKind::Npu) / get(StageKind::Decode, BackendKind::Gpu);
        ok &= near(prefill, 3.0, 0.01) && near(decode, 7.5, 0.01);
        worst.0 = worst.0.max((prefill - 3.0).abs());
        worst.1 = worst.1.max((decode - 7.5).abs());
    }
    let ttft = ctx.report('A', PolicyId::Ftf).ttft_ms;
    let layer = db.lookup("LLM", StageKind::Prefill, 1024, BackendKind::Npu).expect("prefill row");
    ok &= near(layer, 98.62, 1e-9) && near_opt(ttft, 16.0 * 98.62, 0.1);
    let detail = format!(
        "max |prefill GPU/NPU - 3| = {:.4}, max |decode NPU/GPU - 7.5| = {:.4}, 16*{layer} = {:.2} vs TTFT {}",
        worst.0,
        worst.1,
        16.0 * layer,
        fmt_ms(ttft)
    );
    (ok, detail)
}

fn edf_starvation(ctx: &Ctx) -> Verdict {
    let mut ok = true;
    let mut bad = Vec::new();
    for s in ['B', 'C', 'D'] {
        for p in [PolicyId::EdfAot, PolicyId::EdfDyn] {
            let r = ctx.report(s, p);
            let viol = r.aggregate_violation_pct.map(round1);
            let hit = r.starved && viol == Some(0.0);
            if !hit {
                bad.push(format!(
                    "{s} {}: starved={} violations={:?}% TTFT {}",
                    p.name(),
                    r.starved,
                    viol,
                    fmt_ms(r.ttft_ms)
                ));
            }
            ok &= hit;
        }
    }
    let detail = if bad.is_empty() { "all six runs starved with 0.0% violations".into() } else { bad.join("; ") };
    (ok, detail)
}

fn fcfs_latency(ctx: &Ctx) -> Verdict {
    let b_aot = ctx.report('B', PolicyId::FcfsAot);
    let b_dyn = ctx.report('B', PolicyId::FcfsDyn);
    let c_aot = ctx.report('C', PolicyId::FcfsAot);
    let ok = near_opt(b_aot.ttft_ms, 127.4, 0.2)
        && near_opt(b_dyn.ttft_ms, 127.4, 0.2)
        && near_opt(c_aot.ttft_ms, STANDALONE_TTFT, 0.1)
        && near_opt(c_aot.tpt_ms, STANDALONE_TPT, 0.5);
    let detail = format!(
        "B TTFT AOT {} DYN {}; C AOT TTFT {} TPT {}",
        fmt_ms(b_aot.ttft_ms),
        fmt_ms(b_dyn.ttft_ms),
        fmt_ms(c_aot.ttft_ms),
        fmt_ms(c_aot.tpt_ms)
    );
    (ok, detail)
}

fn orderings(ctx: &Ctx) -> Verdict {
    let viol = |s, p| ctx.report(s, p).aggregate_violation_pct.unwrap_or(f64::NAN);
    let tpt = |s, p| ctx.report(s, p).tpt_ms.unwrap_or(f64::NAN);
    let checks = [
        ("C viol FCFS-DYN < FCFS-AOT", viol('C', PolicyId::FcfsDyn) < viol('C', PolicyId::FcfsAot)),
        ("C TPT FCFS-DYN > FCFS-AOT", tpt('C', PolicyId::FcfsDyn) > tpt('C', PolicyId::FcfsAot)),
        ("D viol FTF < FCFS-DYN", viol('D', PolicyId::Ftf) < viol('D', PolicyId::FcfsDyn)),
        ("C FTF TTFT standalone", near_opt(ctx.report('C', PolicyId::Ftf).ttft_ms, STANDALONE_TTFT, 0.1)),
        ("D FTF TTFT standalone", near_opt(ctx.report('D', PolicyId::Ftf).ttft_ms, STANDALONE_TTFT, 0.1)),
        ("C FTF TPT > 3x standalone", tpt('C', PolicyId::Ftf) > 3.0 * STANDALONE_TPT),
        ("D FTF TPT > 3x standalone", tpt('D', PolicyId::Ftf) > 3.0 * STANDALONE_TPT),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = format!(
        "C viol DYN {:.1}% AOT {:.1}%, TPT DYN {:.1} AOT {:.1}; D viol FTF {:.1}% FCFS-DYN {:.1}%; FTF TPT C {:.1} D {:.1}{}",
        viol('C', PolicyId::FcfsDyn),
        viol('C', PolicyId::FcfsAot),
        tpt('C', PolicyId::FcfsDyn),
        tpt('C', PolicyId::FcfsAot),
        viol('D', PolicyId::Ftf),
        viol('D', PolicyId::FcfsDyn),
        tpt('C', PolicyId::Ftf),
        tpt('D', PolicyId::Ftf),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    (failed.is_empty(), detail)
}

fn sweep(ctx: &Ctx) -> Verdict {
    let backends = default_backends();
    let cfg = SimConfig::default();
    let rows = Batch::new(&ctx.db, &backends, &cfg)
        .sweep(&builtin_scenario(BuiltinScenario::D), PolicyId::Ftf, &SWEEP)
        .expect("sweep runs");
    let viol = |i: usize| rows[i].report.aggregate_violation_pct.unwrap_or(f64::NAN);
    let share: Vec<f64> = rows.iter().map(|r| r.report.decode_npu_share()).collect();
    let long: Vec<f64> = share[2..].to_vec();
    let mean_long = long.iter().sum::<f64>() / long.len() as f64;
    let ok = viol(6) > viol(0) && share[0] > mean_long && share[1] > mean_long;
    let starved: Vec<u32> = rows.iter().filter(|r| r.report.starved).map(|r| r.input_tokens).collect();
    let detail = format!(
        "violations 32: {:.1}% 2048: {:.1}%; decode NPU share 32: {:.1}% 64: {:.1}% mean>=128: {:.1}%; starved at {:?}",
        viol(0),
        viol(6),
        share[0],
        share[1],
        mean_long,
        starved
    );
    (ok, detail)
}

fn oracle() -> Verdict {
    let checks = oracle_checks(0, 1000, Execution::Parallel).expect("oracle runs");
    let failed: Vec<u64> = checks.iter().filter(|c| !c.holds()).map(|c| c.seed).collect();
    let strict = checks.iter().filter(|c| c.policies.iter().any(|&(_, v, _)| v > c.best_violations)).count();
    let detail = format!(
        "{} instances, {} failing seeds {:?}; {} instances where some policy is strictly worse than the optimum",
        checks.len(),
        failed.len(),
        &failed[..failed.len().min(10)],
        strict
    );
    (failed.is_empty(), detail)
}

fn properties() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, check) in support::CHECKS {
        let mut runner =
            TestRunner::new(Config { cases: support::CASES, failure_persistence: None, ..Config::default() });
        let outcome = runner.run(&support::case(), |c| check(&c).map_err(TestCaseError::fail));
        match outcome {
            Ok(()) => parts.push(format!("{name} ok")),
            Err(e) => {
                ok = false;
                parts.push(format!("{name} FAILED ({e})"));
            }
        }
    }
    (ok, format!("{} cases each: {}", support::CASES, parts.join(", ")))
}

fn main() -> ExitCode {
    let db = LatencyDatabase::default_calibrated();
    let backends = default_backends();
    let cfg = SimConfig::default();
    let batch = Batch::new(&db, &backends, &cfg);
    let tables =
        [('A', BuiltinScenario::A), ('B', BuiltinScenario::B), ('C', BuiltinScenario::C), ('D', BuiltinScenario::D)]
            .into_iter()
            .map(|(c, s)| (c, batch.compare(&builtin_scenario(s)).expect("builtin scenarios run")))
            .collect();
    let ctx = Ctx { db: db.clone(), tables };

    let criteria: [Criterion<'_>; 8] = [
        ("standalone generative latency", Box::new(|| standalone(&ctx))),
        ("calibration identities", Box::new(|| calibration(&ctx))),
        ("EDF starvation", Box::new(|| edf_starvation(&ctx))),
        ("FCFS preserves generative latency", Box::new(|| fcfs_latency(&ctx))),
        ("directional scheduler orderings", Box::new(|| orderings(&ctx))),
        ("sequence-length sweep", Box::new(|| sweep(&ctx))),
        ("oracle dominance", Box::new(oracle)),
        ("engine property suite", Box::new(properties)),
    ];
    let mut failures = 0;
    for (i, (name, eval)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let (ok, detail) = eval();
        failures += usize::from(!ok);
        println!(
            "criterion {} {:<34} {} [{:.2}s] {}",
            i + 1,
            name,
            if ok { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            detail
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
