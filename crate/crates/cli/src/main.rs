//! `rtgen`: run, compare and sweep scheduling policies on RTGen scenarios.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rtgen_core::metrics::{compare_report, round1, sweep_csv, ComparisonTable};
use rtgen_core::oracle::{default_horizon_ms, schedule_space_log2};
use rtgen_core::runner::{oracle_checks, Batch, Execution};
use rtgen_core::workload::load_scenario_path;
use rtgen_core::{
    builtin_scenario, compute, default_backends, simulate_with, BuiltinScenario, Error, LatencyDatabase, PolicyId,
    ScenarioSpec, SchedulerPolicy, SimConfig,
};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const DEFAULT_SWEEP: [u32; 7] = [32, 64, 128, 256, 512, 1024, 2048];

#[derive(Parser)]
#[command(name = "rtgen", version, about = "Scheduling simulator for real-time and generative AI workloads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario under one policy.
    Run {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        policy: PolicyId,
        #[command(flatten)]
        output: Output,
    },
    /// Simulate one scenario under all five policies.
    Compare {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        output: Output,
    },
    /// Simulate one policy over several prompt input lengths.
    Sweep {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        policy: PolicyId,
        /// Comma-separated input token counts.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP)]
        tokens: Vec<u32>,
        #[command(flatten)]
        output: Output,
    },
    /// Check the policies against the exhaustive oracle on random tiny instances.
    #[command(hide = true)]
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: u64,
        /// Also print the log2 schedule-space size of this scenario.
        #[command(flatten)]
        space: SpaceInput,
    },
}

#[derive(Args)]
struct Input {
    /// Built-in scenario A, B, C or D.
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    builtin: Option<BuiltinScenario>,
    /// Scenario JSON document.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Latency database CSV; defaults to $RTGEN_DB, then the bundled database.
    #[arg(long)]
    db: Option<PathBuf>,
}

#[derive(Args)]
struct SpaceInput {
    #[arg(long)]
    builtin: Option<BuiltinScenario>,
    #[arg(long)]
    horizon_ms: Option<f64>,
}

#[derive(Args)]
struct Output {
    /// Directory for report files; nothing is written without it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the trace of every simulation as JSONL.
    #[arg(long)]
    trace: bool,
    /// Include per-model violation rates.
    #[arg(long)]
    per_model: bool,
}

impl Input {
    fn scenario(&self) -> anyhow::Result<ScenarioSpec> {
        match (&self.builtin, &self.scenario) {
            (Some(b), _) => Ok(builtin_scenario(*b)),
            (None, Some(path)) => {
                load_scenario_path(path).with_context(|| format!("loading scenario {}", path.display()))
            }
            (None, None) => bail!(Error::Schema("one of --builtin or --scenario is required".into())),
        }
    }

    fn db(&self) -> anyhow::Result<LatencyDatabase> {
        let path = self.db.clone().or_else(|| std::env::var_os("RTGEN_DB").map(PathBuf::from));
        match path {
            Some(p) => LatencyDatabase::from_csv_path(&p).with_context(|| format!("loading database {}", p.display())),
            None => Ok(LatencyDatabase::default_calibrated()),
        }
    }
}

impl Output {
    fn dir(&self) -> anyhow::Result<Option<&Path>> {
        match &self.out {
            Some(d) => {
                fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
                Ok(Some(d))
            }
            None => Ok(None),
        }
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_trace(
    dir: &Path,
    scenario: &ScenarioSpec,
    db: &LatencyDatabase,
    policy: PolicyId,
    cfg: &SimConfig,
) -> anyhow::Result<()> {
    let trace = simulate_with(scenario, db, SchedulerPolicy::new(policy), &default_backends(), cfg)?;
    write(dir, &format!("{}_{}.trace.jsonl", scenario.id, policy.flag()), &trace.to_jsonl())
}

fn reports_json(table: &ComparisonTable) -> anyhow::Result<String> {
    let values = table
        .rows
        .iter()
        .map(|(p, r)| serde_json::from_str::<serde_json::Value>(&r.to_json(Some(*p))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(serde_json::to_string_pretty(&values)? + "\n")
}

fn cmd_run(input: &Input, policy: PolicyId, output: &Output) -> anyhow::Result<()> {
    let scenario = input.scenario()?;
    let db = input.db()?;
    let cfg = SimConfig::default();
    let trace = simulate_with(&scenario, &db, SchedulerPolicy::new(policy), &default_backends(), &cfg)?;
    let report = compute(&trace, &scenario)?;
    let table = compare_report(&[(policy, report)])?;
    print!("{}", table.render(output.per_model));
    let report = &table.rows[0].1;
    println!("starved: {}", report.starved);

    if let Some(dir) = output.dir()? {
        let stem = format!("{}_{}", scenario.id, policy.flag());
        write(dir, &format!("{stem}.json"), &(report.to_json(Some(policy)) + "\n"))?;
        write(dir, &format!("{stem}.csv"), &table.to_csv()?)?;
        if output.per_model {
            write(dir, &format!("{stem}_per_model.csv"), &table.per_model_csv()?)?;
        }
        if output.trace {
            write(dir, &format!("{stem}.trace.jsonl"), &trace.to_jsonl())?;
        }
    }
    Ok(())
}

fn cmd_compare(input: &Input, output: &Output) -> anyhow::Result<()> {
    let scenario = input.scenario()?;
    let db = input.db()?;
    let cfg = SimConfig::default();
    let backends = default_backends();
    let table = Batch::new(&db, &backends, &cfg).compare(&scenario)?;
    print!("{}", table.render(output.per_model));

    if let Some(dir) = output.dir()? {
        let stem = format!("{}_compare", scenario.id);
        write(dir, &format!("{stem}.json"), &reports_json(&table)?)?;
        write(dir, &format!("{stem}.csv"), &table.to_csv()?)?;
        if output.per_model {
            write(dir, &format!("{stem}_per_model.csv"), &table.per_model_csv()?)?;
        }
        if output.trace {
            for p in PolicyId::ALL {
                write_trace(dir, &scenario, &db, p, &cfg)?;
            }
        }
    }
    Ok(())
}

fn cmd_sweep(input: &Input, policy: PolicyId, tokens: &[u32], output: &Output) -> anyhow::Result<()> {
    let scenario = input.scenario()?;
    if scenario.generative_model().is_none() {
        bail!(Error::Schema(format!("scenario `{}` has no generative model to sweep", scenario.id)));
    }
    let db = input.db()?;
    let cfg = SimConfig::default();
    let backends = default_backends();
    let rows = Batch::new(&db, &backends, &cfg).sweep(&scenario, policy, tokens)?;

    let cell = |v: Option<f64>, starved: bool| match v {
        Some(x) if !starved => format!("{:.1}", round1(x)),
        _ => "-".into(),
    };
    println!("scenario {} policy {}", scenario.id, policy.name());
    println!("{:>7} {:>9} {:>10} {:>9} {:>10}", "tokens", "viol%", "TTFT(ms)", "TPT(ms)", "decNPU%");
    for row in &rows {
        let r = &row.report;
        println!(
            "{:>7} {:>9} {:>10} {:>9} {:>10.1}",
            row.input_tokens,
            cell(r.aggregate_violation_pct, false),
            cell(r.ttft_ms, r.starved),
            cell(r.tpt_ms, r.starved),
            round1(r.decode_npu_share())
        );
    }

    if let Some(dir) = output.dir()? {
        let stem = format!("{}_{}_sweep", scenario.id, policy.flag());
        write(dir, &format!("{stem}.csv"), &sweep_csv(&rows)?)?;
        if output.per_model {
            let tables =
                rows.iter().map(|r| compare_report(&[(policy, r.report.clone())])).collect::<Result<Vec<_>, _>>()?;
            let mut csv = String::new();
            for (i, (row, t)) in rows.iter().zip(&tables).enumerate() {
                for (j, line) in t.per_model_csv()?.lines().enumerate() {
                    match (i, j) {
                        (0, 0) => csv.push_str(&format!("input_tokens,{line}\n")),
                        (_, 0) => {}
                        _ => csv.push_str(&format!("{},{line}\n", row.input_tokens)),
                    }
                }
            }
            write(dir, &format!("{stem}_per_model.csv"), &csv)?;
        }
        if output.trace {
            for &n in tokens {
                let s = scenario.with_input_tokens(n);
                let trace = simulate_with(&s, &db, SchedulerPolicy::new(policy), &backends, &cfg)?;
                write(dir, &format!("{stem}_{n}.trace.jsonl"), &trace.to_jsonl())?;
            }
        }
    }
    Ok(())
}

fn cmd_oracle(seed: u64, count: u64, space: &SpaceInput) -> anyhow::Result<bool> {
    let checks = oracle_checks(seed, count, Execution::Parallel)?;
    let mut held = 0;
    for c in &checks {
        let policies: Vec<String> = c.policies.iter().map(|(p, v, _)| format!("{}={v}", p.flag())).collect();
        println!(
            "seed {:>6} best {} replay {:?} ttft {:?} {} {}",
            c.seed,
            c.best_violations,
            c.replayed_violations,
            c.best_ttft_us,
            policies.join(" "),
            if c.holds() { "ok" } else { "VIOLATED" }
        );
        held += usize::from(c.holds());
    }
    println!("{held}/{} instances hold", checks.len());
    if let Some(b) = space.builtin {
        let db = LatencyDatabase::default_calibrated();
        let scenario = builtin_scenario(b);
        let horizon = space.horizon_ms.unwrap_or_else(|| default_horizon_ms(&scenario, &db));
        let bits = schedule_space_log2(&scenario, horizon, &default_backends(), &db);
        println!("scenario {} horizon {horizon:.1} ms: log2 schedule space {bits:.1}", scenario.id);
    }
    Ok(held == checks.len())
}

/// 3 for broken internal invariants, 2 for everything caused by inputs.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::Invariant(_) | Error::MalformedTrace(_) | Error::RequestFinished(_) | Error::MixedScenarios(..),
        ) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { input, policy, output } => cmd_run(input, *policy, output),
        Command::Compare { input, output } => cmd_compare(input, output),
        Command::Sweep { input, policy, tokens, output } => cmd_sweep(input, *policy, tokens, output),
        Command::Oracle { seed, count, space } => match cmd_oracle(*seed, *count, space) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(3),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
