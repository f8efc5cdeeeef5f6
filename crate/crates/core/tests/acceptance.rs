//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use hybridevo::engine::{Checkpoint, Engine, EngineConfig, EngineError, RunResult, TerminationReason};
use hybridevo::evaluation::{extract_score, ConstraintMode};
use hybridevo::gene::{parse_from_text, to_text, Gene, Operator};
use hybridevo::provider::{
    BackendKind, CompletionRequest, CompletionResponse, Metered, Provider, ProviderError, Purpose, ScriptRule,
    ScriptedProvider,
};
use hybridevo::tasks::proposal::{self, Heading, ProposalGene};
use hybridevo::tasks::synthetic::{self, KnapsackGene, KnapsackTables};
use hybridevo::tasks::travel::{Money, TravelGene};
use hybridevo::tasks::{AnyTask, TaskDef};
use hybridevo::telemetry::{masked, ReportContext, RunReport};
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use regex::Regex;

// Frozen fixture values.
const ORACLE_OPTIMUM: u64 = 34;
const ORACLE_ASSIGNMENT: [u32; 4] = [1, 1, 2, 1];
const QUALITY_FRACTION: f64 = 0.9;
const SEED_SHARE: f64 = 0.8;
const CONVERGENCE_SEEDS: u64 = 50;
const CONVERGENCE_BUDGET: Duration = Duration::from_secs(10);
const ROUND_TRIP_CASES: u32 = 1000;

type Check = fn() -> Result<String, String>;

fn main() {
    let checks: [(&str, Check); 11] = [
        ("synthetic convergence vs oracle", c01_convergence),
        ("feasibility guarantee", c02_feasibility),
        ("elitism monotonicity", c03_monotonicity),
        ("determinism and parallel equivalence", c04_determinism),
        ("round-trip parsing", c05_round_trip),
        ("score extraction conformance", c06_score_extraction),
        ("proposal structural reproduction", c07_proposal),
        ("travel excerpt validation", c08_travel_excerpt),
        ("call accounting", c09_call_accounting),
        ("termination precedence", c10_termination),
        ("crash resume", c11_crash_resume),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS  {:>2}. {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:>2}. {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Exhaustive search written independently of the library oracle.
fn enumerate_optimum(t: &KnapsackTables) -> (Vec<u32>, u64) {
    fn walk(t: &KnapsackTables, slot: usize, cost: u64, value: u64, pick: &mut Vec<u32>, best: &mut (Vec<u32>, u64)) {
        if cost > t.budget {
            return;
        }
        if slot == t.options.len() {
            if best.0.is_empty() || value > best.1 {
                *best = (pick.clone(), value);
            }
            return;
        }
        for (i, o) in t.options[slot].iter().enumerate() {
            pick.push(i as u32);
            walk(t, slot + 1, cost + o.cost, value + o.value, pick, best);
            pick.pop();
        }
    }
    let mut best = (Vec::new(), 0);
    walk(t, 0, 0, 0, &mut Vec::new(), &mut best);
    best
}

/// Independent feasibility and value of an assignment.
fn feasible_value(t: &KnapsackTables, choices: &[u32]) -> Option<u64> {
    if choices.len() != t.options.len() {
        return None;
    }
    let mut cost = 0;
    let mut value = 0;
    for (slot, &c) in choices.iter().enumerate() {
        let o = t.options[slot].get(c as usize)?;
        cost += o.cost;
        value += o.value;
    }
    (cost <= t.budget).then_some(value)
}

fn reference_scale(seed: u64) -> EngineConfig {
    EngineConfig { population_size: 10, elite_count: 1, max_generations: 5, seed, ..Default::default() }
}

fn run_synthetic(tables: &KnapsackTables, cfg: EngineConfig) -> RunResult<KnapsackGene> {
    let task = synthetic::task(tables.clone());
    let sim = synthetic::simulator(tables);
    Engine::new(&task, cfg, &sim).unwrap().run().unwrap()
}

fn c01_convergence() -> Result<String, String> {
    let tables = common::synthetic_tables();
    let (pick, opt) = enumerate_optimum(&tables);
    ensure(opt == ORACLE_OPTIMUM && pick == ORACLE_ASSIGNMENT, || format!("oracle drifted: {pick:?} = {opt}"))?;
    let (lib_best, lib_opt) = tables.brute_force_optimum().map_err(|e| e.to_string())?;
    ensure(lib_opt == opt && lib_best.choices == pick, || {
        format!("library oracle disagrees: {lib_best:?} = {lib_opt}")
    })?;

    let started = Instant::now();
    let mut good = 0;
    for seed in 0..CONVERGENCE_SEEDS {
        let result = run_synthetic(&tables, reference_scale(seed));
        let value = result.best.and_then(|b| b.gene).and_then(|g| feasible_value(&tables, &g.choices)).unwrap_or(0);
        if value as f64 >= QUALITY_FRACTION * opt as f64 {
            good += 1;
        }
    }
    let elapsed = started.elapsed();
    let share = good as f64 / CONVERGENCE_SEEDS as f64;
    ensure(share >= SEED_SHARE, || format!("only {good}/{CONVERGENCE_SEEDS} seeds reached 90% of {opt}"))?;
    ensure(elapsed < CONVERGENCE_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("{good}/{CONVERGENCE_SEEDS} seeds >= 90% of optimum {opt} in {:.2}s", elapsed.as_secs_f64()))
}

fn c02_feasibility() -> Result<String, String> {
    let shipped = common::synthetic_tables();
    let tight = KnapsackTables { budget: 10, ..shipped.clone() };
    let mut with_feasible = 0;
    for run in 0..100u64 {
        let tables = if run % 2 == 0 { &shipped } else { &tight };
        let cfg = EngineConfig { constraint_mode: ConstraintMode::Filter, ..reference_scale(1000 + run) };
        let result = run_synthetic(tables, cfg);
        let feasible_seen = result.history.iter().any(|r| r.scored > 0);
        if !feasible_seen {
            continue;
        }
        with_feasible += 1;
        let best = result.best.as_ref().and_then(|b| b.gene.as_ref()).ok_or(format!("run {run}: no best"))?;
        ensure(feasible_value(tables, &best.choices).is_some(), || format!("run {run}: best {best:?} is infeasible"))?;
        ensure(!result.best.as_ref().unwrap().has_hard_violation(), || format!("run {run}: best flagged hard"))?;
    }
    ensure(with_feasible > 0, || "no run ever saw a feasible candidate".into())?;
    Ok(format!("best feasible in {with_feasible}/{with_feasible} runs with a feasible candidate (100 runs)"))
}

fn c03_monotonicity() -> Result<String, String> {
    let tables = common::synthetic_tables();
    let mut steps = 0;
    for seed in 0..CONVERGENCE_SEEDS {
        let result = run_synthetic(&tables, reference_scale(seed));
        for w in result.history.windows(2) {
            let (a, b) = (w[0].best.unwrap_or(f64::MIN), w[1].best.unwrap_or(f64::MIN));
            ensure(b >= a, || format!("seed {seed}: best fell from {a} to {b} at generation {}", w[1].generation))?;
            steps += 1;
        }
    }
    Ok(format!("{steps} generation steps non-decreasing over {CONVERGENCE_SEEDS} runs"))
}

fn masked_report<G: Gene>(task: &TaskDef<G>, provider: &dyn Provider, cfg: EngineConfig) -> String {
    let engine = Engine::new(task, cfg, provider).unwrap();
    let ctx = ReportContext { task_digest: task.digest(), config_digest: engine.config_digest(), ..Default::default() };
    let result = engine.run().unwrap();
    masked(&RunReport::from_result(&result, &ctx).to_json()).unwrap().to_string()
}

fn c04_determinism() -> Result<String, String> {
    let mut bytes = 0;
    for kind in ["travel", "proposal", "synthetic"] {
        let task = AnyTask::load(&repo().join("tasks").join(kind).join("task.json")).map_err(|e| e.to_string())?;
        let sim = task.simulator();
        let at = |c| EngineConfig {
            population_size: 10,
            max_generations: 4,
            seed: 42,
            concurrency: c,
            ..Default::default()
        };
        let (one, eight) = match &task {
            AnyTask::Travel(t) => (masked_report(t, &sim, at(1)), masked_report(t, &sim, at(8))),
            AnyTask::Proposal(t) => (masked_report(t, &sim, at(1)), masked_report(t, &sim, at(8))),
            AnyTask::Synthetic(t) => (masked_report(t, &sim, at(1)), masked_report(t, &sim, at(8))),
        };
        ensure(one == eight, || format!("{kind}: reports differ between concurrency 1 and 8"))?;
        bytes += one.len();
    }
    Ok(format!("3 kinds byte-identical after masking ({bytes} bytes compared)"))
}

fn round_trip_kind<G: Gene>(strategy: impl proptest::strategy::Strategy<Value = G>) -> Result<(), String> {
    let mut runner =
        TestRunner::new(PropConfig { cases: ROUND_TRIP_CASES, failure_persistence: None, ..PropConfig::default() });
    runner
        .run(&strategy, |g| {
            let back: G = parse_from_text(&to_text(&g)).map_err(|e| TestCaseError::fail(e.to_string()))?;
            if back != g {
                return Err(TestCaseError::fail(format!("{back:?} != {g:?}")));
            }
            Ok(())
        })
        .map_err(|e| format!("{}: {e}", G::KIND))
}

fn c05_round_trip() -> Result<String, String> {
    round_trip_kind(common::travel())?;
    round_trip_kind(common::proposal())?;
    round_trip_kind(common::knapsack())?;
    Ok(format!("{ROUND_TRIP_CASES} genes per kind, 3 kinds, all identical after parse(to_text(g))"))
}

fn c06_score_extraction() -> Result<String, String> {
    #[derive(serde::Deserialize)]
    struct Case {
        text: String,
        expected: Option<f64>,
    }
    let cases: Vec<Case> =
        serde_json::from_str(include_str!("fixtures/score_cases.json")).map_err(|e| e.to_string())?;
    ensure(cases.len() == 30, || format!("fixture has {} cases", cases.len()))?;
    for (i, c) in cases.iter().enumerate() {
        let got = extract_score(&c.text).ok();
        ensure(got == c.expected, || format!("case {}: {:?} gave {got:?}, expected {:?}", i + 1, c.text, c.expected))?;
    }
    Ok("30/30 cases".into())
}

fn candidate_number(prompt: &str) -> usize {
    let re = Regex::new(r"[Cc]andidate (\d+) of").unwrap();
    re.captures(prompt).and_then(|c| c[1].parse().ok()).unwrap_or(1)
}

fn all_headings(g: &ProposalGene) -> bool {
    Heading::ALL.iter().all(|h| g.sections.iter().any(|s| s.heading == *h))
}

fn c07_proposal() -> Result<String, String> {
    let task = proposal::task("An AI system for healthcare diagnostics", 1200);
    // Stock simulator: a third of the drafts lack Related Work.
    let sim = proposal::simulator(&task);
    let cfg = EngineConfig { population_size: 8, max_generations: 5, seed: 11, ..Default::default() };
    let result = Engine::new(&task, cfg.clone(), &sim).unwrap().run().unwrap();
    let best = result.best.and_then(|b| b.gene).ok_or("no best")?;
    ensure(all_headings(&best), || format!("best misses {:?}", best.missing()))?;

    // Harder: no initial draft is complete and mutation is off, so only
    // crossover merges can assemble all five sections.
    let ctx = task.context.clone();
    let partial = ScriptRule::handler(Some(Purpose::Generation), None, move |req: &CompletionRequest, rng| {
        let k = candidate_number(&req.joined_content());
        let g = proposal::draft(&ctx, if k.is_multiple_of(2) { 1 } else { 2 }, rng);
        format!("Draft:\n\n{}", to_text(&g))
    });
    let scripted = ScriptedProvider::new(vec![partial]).then(proposal::simulator(&task));
    let strict = EngineConfig { mutation_rate: 0.0, constraint_mode: ConstraintMode::Penalty, ..cfg };
    let result = Engine::new(&task, strict, &scripted).unwrap().run().unwrap();
    let gen0 = result.history[0].hard_violations;
    ensure(gen0 == 8, || format!("expected 8 incomplete initial drafts, saw {gen0}"))?;
    let best = result.best.and_then(|b| b.gene).ok_or("no best in merge scenario")?;
    ensure(all_headings(&best), || format!("merge scenario best misses {:?}", best.missing()))?;
    let merged_in = result.history.iter().position(|r| r.hard_violations < r.population_size).unwrap_or(usize::MAX);
    Ok(format!(
        "all five headings at N=8 within 5 generations (merge-only scenario complete by generation {merged_in})"
    ))
}

fn c08_travel_excerpt() -> Result<String, String> {
    let ex = repo().join("tasks/travel/examples");
    let excerpt: TravelGene =
        parse_from_text(&std::fs::read_to_string(ex.join("excerpt.txt")).unwrap()).map_err(|e| e.to_string())?;
    ensure(excerpt.total_cost == Money::from_cents(489_000), || format!("stated total {}", excerpt.total_cost))?;
    ensure(excerpt.computed_total() == excerpt.total_cost, || "items do not add up".into())?;
    ensure(excerpt.num_days == 4 && excerpt.days.len() == 4, || "excerpt is not 4 days".into())?;

    let task = repo().join("tasks/travel/task.json");
    let validate = |file: &str| {
        Command::new(env!("CARGO_BIN_EXE_hybridevo")).arg("validate").arg(&task).arg(ex.join(file)).output().unwrap()
    };
    let ok = validate("excerpt.txt");
    ensure(ok.status.code() == Some(0), || format!("excerpt exit {:?}", ok.status.code()))?;
    let over = validate("excerpt_over_budget.txt");
    ensure(over.status.code() == Some(4), || format!("over-budget exit {:?}", over.status.code()))?;
    let v: serde_json::Value = serde_json::from_slice(&over.stdout).map_err(|e| e.to_string())?;
    let record = &v["violations"][0];
    ensure(
        record["constraint_id"] == "budget-exceeded" && record["measured"] == 6000.0 && record["limit"] == 5000.0,
        || format!("unexpected record {record}"),
    )?;
    Ok("¥4890.00 excerpt exits 0; ¥6000 copy exits 4 with budget-exceeded".into())
}

fn c09_call_accounting() -> Result<String, String> {
    let tables = common::synthetic_tables();
    let task = synthetic::task(tables.clone());
    let over = to_text(&KnapsackGene { choices: vec![3, 4, 3, 4] });
    let schedule = ScriptRule::reply(
        Some(Purpose::Generation),
        Some(Regex::new(r"[Cc]andidate (3|7|11) of").unwrap()),
        format!("Here you go.\n\n{over}"),
    );
    let scripted = ScriptedProvider::new(vec![schedule]).then(synthetic::simulator(&tables));
    let cfg = EngineConfig {
        population_size: 12,
        max_generations: 3,
        eval_samples: 1,
        constraint_mode: ConstraintMode::Filter,
        seed: 9,
        ..Default::default()
    };

    let metered = Metered::new(&scripted);
    let full = Engine::new(&task, cfg.clone(), &metered).unwrap().run().unwrap();
    ensure(full.calls.total == metered.total_calls(), || {
        format!("engine {} vs counter {}", full.calls.total, metered.total_calls())
    })?;
    for p in Purpose::ALL {
        ensure(full.calls.get(p) == metered.calls(p), || {
            format!("{p}: engine {} vs counter {}", full.calls.get(p), metered.calls(p))
        })?;
    }

    // Rebuild every generation's population and count who needed scoring.
    let mut expected = 0;
    for g in 1..=3u32 {
        let prefix =
            Engine::new(&task, EngineConfig { max_generations: g, ..cfg.clone() }, &scripted).unwrap().run().unwrap();
        let scored_now = prefix
            .population
            .members
            .iter()
            .filter(|m| m.lineage.operator != Operator::Elite)
            .filter(|m| m.gene.as_ref().is_some_and(|gene| feasible_value(&tables, &gene.choices).is_some()))
            .count() as u64;
        let per_gen = scored_now * u64::from(cfg.eval_samples);
        let reported = full.history[g as usize - 1].calls.evaluation;
        ensure(per_gen == reported, || {
            format!("generation {}: expected {per_gen} evaluation calls, engine spent {reported}", g - 1)
        })?;
        if g == 1 {
            ensure(prefix.history[0].hard_violations >= 3, || "scheduled violations missing".into())?;
        }
        expected += per_gen;
    }
    ensure(expected == full.calls.evaluation, || {
        format!("evaluation total {} vs expected {expected}", full.calls.evaluation)
    })?;
    Ok(format!(
        "{} calls match the counter; {expected} evaluation calls = sum of valid new members x samples",
        full.calls.total
    ))
}

fn c10_termination() -> Result<String, String> {
    let tables = common::synthetic_tables();
    let task = synthetic::task(tables.clone());
    let scored = |score: &str| {
        ScriptedProvider::new(vec![ScriptRule::reply(
            Some(Purpose::Evaluation),
            None,
            format!("Flawless plan.\nSCORE: {score}"),
        )])
        .then(synthetic::simulator(&tables))
    };
    let base = EngineConfig { population_size: 8, max_generations: 6, seed: 4, ..Default::default() };
    let run = |p: &ScriptedProvider, cfg: EngineConfig| Engine::new(&task, cfg, p).unwrap().run().unwrap();

    let perfect = scored("10");
    let r = run(&perfect, EngineConfig { fitness_threshold: Some(1.0), ..base.clone() });
    ensure(r.termination == TerminationReason::ThresholdReached && r.history.len() == 1, || {
        format!("threshold: {:?} after {}", r.termination, r.history.len())
    })?;

    let flat = scored("6");
    let r = run(&flat, EngineConfig { stagnation_window: Some(2), ..base.clone() });
    ensure(r.termination == TerminationReason::Stagnation && r.history.len() == 3, || {
        format!("stagnation: {:?} after {}", r.termination, r.history.len())
    })?;

    let sim = synthetic::simulator(&tables);
    let r = run(&sim, EngineConfig { max_generations: 4, ..base.clone() });
    ensure(r.termination == TerminationReason::MaxGenerations && r.history.len() == 4, || {
        format!("cap: {:?} after {}", r.termination, r.history.len())
    })?;

    // All three due at once: threshold wins.
    let r = run(
        &perfect,
        EngineConfig { fitness_threshold: Some(1.0), stagnation_window: Some(1), max_generations: 2, ..base.clone() },
    );
    let r2 = run(
        &perfect,
        EngineConfig { fitness_threshold: Some(1.0), stagnation_window: Some(1), max_generations: 1, ..base },
    );
    ensure(
        r.termination == TerminationReason::ThresholdReached && r2.termination == TerminationReason::ThresholdReached,
        || "precedence".into(),
    )?;
    Ok("threshold_reached, stagnation, max_generations as scripted; threshold wins ties".into())
}

/// Passes calls through until `left` runs out, then fails like a dropped connection.
struct Killed<'a> {
    inner: &'a dyn Provider,
    left: AtomicU64,
}

impl Provider for Killed<'_> {
    fn complete(&self, r: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        if self.left.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_err() {
            return Err(ProviderError::TransportFailure { attempts: 3, message: "connection reset".into() });
        }
        self.inner.complete(r)
    }

    fn backend(&self) -> BackendKind {
        self.inner.backend()
    }
}

fn c11_crash_resume() -> Result<String, String> {
    let tables = common::synthetic_tables();
    let task = synthetic::task(tables.clone());
    let sim = synthetic::simulator(&tables);
    let cfg = EngineConfig { population_size: 10, elite_count: 1, max_generations: 5, seed: 77, ..Default::default() };
    let ctx = |e: &Engine<KnapsackGene, dyn Provider>| ReportContext {
        config_digest: e.config_digest(),
        ..Default::default()
    };

    let whole = Engine::new(&task, cfg.clone(), &sim as &dyn Provider).unwrap();
    let uninterrupted = whole.run().unwrap();
    let reference = RunReport::from_result(&uninterrupted, &ctx(&whole));

    let through_gen2: u64 = uninterrupted.history[..3].iter().map(|r| r.calls.total).sum();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.checkpoint.json");
    let killed = Killed { inner: &sim, left: AtomicU64::new(through_gen2) };
    let err =
        Engine::new(&task, cfg.clone(), &killed as &dyn Provider).unwrap().with_checkpoint(&path).run().unwrap_err();
    ensure(matches!(err, EngineError::Provider { generation: 3, .. }), || format!("unexpected abort: {err}"))?;

    let cp = Checkpoint::read(&path).map_err(|e| e.to_string())?;
    ensure(cp.generation == 2, || format!("checkpoint at generation {}", cp.generation))?;
    let again = Engine::new(&task, cfg, &sim as &dyn Provider).unwrap();
    let resumed = again.resume(&cp).map_err(|e| e.to_string())?;
    let report = RunReport::from_result(&resumed, &ctx(&again));

    ensure(report.final_population == reference.final_population, || "final populations differ".into())?;
    ensure(report.best == reference.best, || "best solutions differ".into())?;
    ensure(report.resumed_at == vec![3], || format!("resume marker {:?}", report.resumed_at))?;
    let strip = |r: &RunReport| {
        let mut v = masked(&r.to_json()).unwrap();
        v.as_object_mut().unwrap().remove("resumed_at");
        v
    };
    ensure(strip(&report) == strip(&reference), || "reports differ beyond timestamps and resume marker".into())?;
    Ok("killed after generation 2 of 5; resumed report equals uninterrupted run".into())
}
