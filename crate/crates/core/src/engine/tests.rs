use regex::Regex;

use super::*;
use crate::provider::{Metered, ScriptRule, ScriptedProvider};
use crate::tasks::synthetic::{self, KnapsackGene, KnapsackTables, SlotOption};

fn tables() -> KnapsackTables {
    let manifest: serde_json::Value =
        serde_json::from_str(include_str!("../../../../tasks/synthetic/task.json")).unwrap();
    serde_json::from_value(manifest["params"].clone()).unwrap()
}

fn config(n: usize, e: usize, g: u32, seed: u64) -> EngineConfig {
    EngineConfig {
        population_size: n,
        elite_count: e,
        tournament_size: 2,
        max_generations: g,
        seed,
        concurrency: 1,
        ..Default::default()
    }
}

fn run_synthetic(cfg: EngineConfig, provider: &dyn Provider) -> RunResult<KnapsackGene> {
    let task = synthetic::task(tables());
    Engine::new(&task, cfg, provider).unwrap().run().unwrap()
}

fn prose_for(purpose: Purpose, pattern: &str) -> ScriptedProvider {
    ScriptedProvider::new(vec![ScriptRule::reply(
        Some(purpose),
        Some(Regex::new(pattern).unwrap()),
        "I would rather describe it in words.",
    )])
}

#[test]
fn unparseable_seeds_make_the_population_extinct() {
    let always_prose = ScriptedProvider::new(vec![ScriptRule::reply(None, None, "Just prose, no block.")]);
    let cfg = EngineConfig { max_parse_retries: 1, repair_enabled: false, ..config(6, 1, 5, 1) };
    let result = run_synthetic(cfg, &always_prose);
    assert_eq!(result.termination, TerminationReason::PopulationExtinct);
    assert!(result.best.is_none());
    assert_eq!(result.history.len(), 1);
    assert_eq!(result.calls.generation, 12, "one call plus one retry per seed");
}

#[test]
fn parse_failures_at_known_indices_stay_in_the_population() {
    let task = synthetic::task(tables());
    let provider = prose_for(Purpose::Generation, r"Candidate (3|7) of").then(synthetic::simulator(&task.context));
    let cfg = EngineConfig { max_parse_retries: 1, ..config(10, 2, 1, 4) };
    let result = Engine::new(&task, cfg, &provider).unwrap().run().unwrap();
    let failed: Vec<u64> =
        result.population.members.iter().filter(|m| m.validity == Validity::ParseFailure).map(|m| m.id).collect();
    assert_eq!(failed, vec![2, 6]);
    assert_eq!(result.history[0].parse_failures, 2);
    assert_eq!(result.population.selectable().filter(|m| [2, 6].contains(&m.id)).count(), 0);
    // Two attempts plus one repair for each of the two failing seeds.
    assert_eq!(result.calls.generation, 8 + 2 * 2);
    assert_eq!(result.calls.repair, 2);
}

#[test]
fn degenerate_rates_clone_the_fitter_parent() {
    let task = synthetic::task(tables());
    let sim = synthetic::simulator(&task.context);
    let cfg = EngineConfig { crossover_rate: 0.0, mutation_rate: 0.0, ..config(8, 1, 2, 3) };
    let result = Engine::new(&task, cfg, &sim).unwrap().run().unwrap();
    assert_eq!(result.calls.crossover + result.calls.mutation, 0);
    let offspring: Vec<_> =
        result.population.members.iter().filter(|m| m.lineage.operator != Operator::Elite).collect();
    assert_eq!(offspring.len(), 7);
    assert!(offspring.iter().all(|m| m.lineage.operator == Operator::Clone && m.lineage.parent_ids.len() == 1));
}

#[test]
fn malformed_crossover_replies_fall_back_to_structural_crossover() {
    let task = synthetic::task(tables());
    let provider = prose_for(Purpose::Crossover, ".").then(synthetic::simulator(&task.context));
    let cfg = EngineConfig {
        crossover_rate: 1.0,
        mutation_rate: 0.0,
        max_parse_retries: 1,
        repair_enabled: true,
        ..config(6, 1, 2, 9)
    };
    let result = Engine::new(&task, cfg, &provider).unwrap().run().unwrap();
    let children: Vec<_> =
        result.population.members.iter().filter(|m| m.lineage.operator == Operator::Crossover).collect();
    assert_eq!(children.len(), 5);
    for c in &children {
        assert!(c.lineage.structural_fallback);
        assert!(c.gene.is_some());
    }
    assert_eq!(result.history[1].operators.structural_fallback, 5);
    // Two crossover attempts and one repair attempt per child.
    assert_eq!(result.calls.crossover, 10);
    assert_eq!(result.calls.repair, 5);
}

#[test]
fn structural_fallback_children_only_use_parent_components() {
    let task = synthetic::task(tables());
    let provider = prose_for(Purpose::Crossover, ".").then(synthetic::simulator(&task.context));
    let cfg = EngineConfig {
        crossover_rate: 1.0,
        mutation_rate: 0.0,
        max_parse_retries: 0,
        repair_enabled: false,
        ..config(6, 1, 1, 2)
    };
    let engine = Engine::new(&task, cfg.clone(), &provider).unwrap();
    let first = engine.run().unwrap();
    let cfg2 = EngineConfig { max_generations: 2, ..cfg };
    let second = Engine::new(&task, cfg2, &provider).unwrap().run().unwrap();
    let parents = &first.population;
    for child in second.population.members.iter().filter(|m| m.lineage.operator == Operator::Crossover) {
        let [a, b] = child.lineage.parent_ids[..] else { panic!("two parents") };
        let ga = parents.get(a).unwrap().gene.as_ref().unwrap();
        let gb = parents.get(b).unwrap().gene.as_ref().unwrap();
        for (i, c) in child.gene.as_ref().unwrap().choices.iter().enumerate() {
            assert!(*c == ga.choices[i] || *c == gb.choices[i]);
        }
    }
}

#[test]
fn population_size_is_conserved() {
    let task = synthetic::task(tables());
    let sim = synthetic::simulator(&task.context);
    for (n, e) in [(10, 2), (10, 0), (2, 1)] {
        let cfg = EngineConfig { tournament_size: 2, ..config(n, e, 3, 5) };
        let result = Engine::new(&task, cfg, &sim).unwrap().run().unwrap();
        for r in &result.history {
            assert_eq!(r.population_size, n);
            if r.generation > 0 {
                assert_eq!(r.operators.elite, e);
            }
        }
    }
}

#[test]
fn lineage_points_at_the_previous_generation() {
    let task = synthetic::task(tables());
    let sim = synthetic::simulator(&task.context);
    let cfg = config(8, 2, 1, 11);
    let gen0 = Engine::new(&task, cfg.clone(), &sim).unwrap().run().unwrap().population;
    let gen1 = Engine::new(&task, EngineConfig { max_generations: 2, ..cfg }, &sim).unwrap().run().unwrap().population;
    for m in &gen1.members {
        assert!(m.lineage.is_consistent());
        assert_eq!(m.lineage.generation_born, 1);
        for p in &m.lineage.parent_ids {
            assert!(gen0.get(*p).is_some(), "parent {p} of {} not in generation 0", m.id);
        }
        if m.lineage.operator == Operator::Elite {
            let old = gen0.get(m.lineage.parent_ids[0]).unwrap();
            assert_eq!(old.gene, m.gene);
            assert_eq!(old.report, m.report);
        }
    }
}

#[test]
fn single_generation_returns_best_of_initial_population() {
    let task = synthetic::task(tables());
    let sim = synthetic::simulator(&task.context);
    let result = Engine::new(&task, config(10, 0, 1, 8), &sim).unwrap().run().unwrap();
    assert_eq!(result.termination, TerminationReason::MaxGenerations);
    assert_eq!(result.history.len(), 1);
    let top = result.population.selectable().map(|m| m.fitness().unwrap()).fold(f64::MIN, f64::max);
    assert_eq!(result.best.unwrap().fitness(), Some(top));
}

#[test]
fn one_slot_instance_is_solved_at_initialization() {
    let t = KnapsackTables {
        options: vec![vec![
            SlotOption { cost: 1, value: 1 },
            SlotOption { cost: 2, value: 7 },
            SlotOption { cost: 9, value: 20 },
            SlotOption { cost: 3, value: 4 },
        ]],
        budget: 5,
    };
    let (best, value) = t.brute_force_optimum().unwrap();
    let task = synthetic::task(t.clone());
    let sim = synthetic::simulator(&t);
    let result = Engine::new(&task, config(4, 1, 1, 0), &sim).unwrap().run().unwrap();
    let found = result.best.unwrap().gene.unwrap();
    assert_eq!(found, best);
    assert_eq!(t.totals(&found).unwrap().1, value);
}

fn records(bests: &[f64]) -> Vec<GenerationRecord> {
    let pop: Population<KnapsackGene> = Population { generation: 0, members: Vec::new() };
    bests
        .iter()
        .enumerate()
        .map(|(g, b)| GenerationRecord {
            generation: g as u32,
            best: Some(*b),
            ..GenerationRecord::of(&pop, CallCounts::default(), Usage::default(), 0)
        })
        .collect()
}

#[test]
fn termination_rules_and_precedence() {
    let base = EngineConfig { max_generations: 5, ..Default::default() };
    assert_eq!(
        check_termination(&records(&[0.5, 1.0]), &EngineConfig { fitness_threshold: Some(1.0), ..base.clone() }),
        Some(TerminationReason::ThresholdReached)
    );

    let stag = EngineConfig { stagnation_window: Some(3), max_generations: 10, ..base.clone() };
    assert_eq!(check_termination(&records(&[0.7, 0.7, 0.7]), &stag), None);
    assert_eq!(check_termination(&records(&[0.7, 0.7, 0.7, 0.7]), &stag), Some(TerminationReason::Stagnation));
    assert_eq!(check_termination(&records(&[0.7, 0.7, 0.7, 0.7 + 1e-10]), &stag), Some(TerminationReason::Stagnation));
    assert_eq!(check_termination(&records(&[0.6, 0.7, 0.7, 0.7]), &stag), None);

    assert_eq!(check_termination(&records(&[0.1, 0.2, 0.3, 0.4]), &base), None);
    assert_eq!(check_termination(&records(&[0.1, 0.2, 0.3, 0.4, 0.5]), &base), Some(TerminationReason::MaxGenerations));

    // All three conditions at once: threshold wins, then stagnation.
    let all = EngineConfig { fitness_threshold: Some(0.7), stagnation_window: Some(1), max_generations: 2, ..base };
    assert_eq!(check_termination(&records(&[0.7, 0.7]), &all), Some(TerminationReason::ThresholdReached));
    let no_threshold = EngineConfig { fitness_threshold: None, ..all };
    assert_eq!(check_termination(&records(&[0.7, 0.7]), &no_threshold), Some(TerminationReason::Stagnation));
}

#[test]
fn elitism_keeps_best_fitness_monotone() {
    let task = synthetic::task(tables());
    let sim = synthetic::simulator(&task.context);
    for seed in 0..10 {
        let result = Engine::new(&task, config(10, 1, 5, seed), &sim).unwrap().run().unwrap();
        for w in result.history.windows(2) {
            assert!(w[1].best.unwrap() >= w[0].best.unwrap(), "seed {seed}");
        }
    }
}

#[test]
fn concurrency_does_not_change_results() {
    let task = synthetic::task(tables());
    let sim = synthetic::simulator(&task.context);
    let strip = |r: RunResult<KnapsackGene>| {
        let mut r = r;
        r.config.concurrency = 0;
        for h in &mut r.history {
            h.wall_clock_ms = 0;
        }
        r
    };
    let one = Engine::new(&task, EngineConfig { concurrency: 1, ..config(12, 2, 4, 21) }, &sim).unwrap().run().unwrap();
    let eight =
        Engine::new(&task, EngineConfig { concurrency: 8, ..config(12, 2, 4, 21) }, &sim).unwrap().run().unwrap();
    assert_eq!(strip(one), strip(eight));
}

#[test]
fn engine_call_totals_match_the_provider_counter() {
    let task = synthetic::task(tables());
    let metered = Metered::new(synthetic::simulator(&task.context));
    let cfg = EngineConfig { eval_samples: 2, ..config(12, 2, 3, 17) };
    let result = Engine::new(&task, cfg, &metered).unwrap().run().unwrap();
    assert_eq!(result.calls.total, metered.total_calls());
    for p in Purpose::ALL {
        assert_eq!(result.calls.get(p), metered.calls(p), "{p}");
    }
    let per_gen: u64 = result.history.iter().map(|r| r.calls.total).sum();
    assert_eq!(per_gen, result.calls.total);
}

#[test]
fn resume_after_provider_failure_matches_uninterrupted_run() {
    use std::sync::atomic::AtomicU64;

    struct FailAfter<'a> {
        inner: &'a ScriptedProvider,
        left: AtomicU64,
    }
    impl Provider for FailAfter<'_> {
        fn complete(&self, r: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
            if self.left.fetch_sub(1, Ordering::SeqCst) == 0 {
                self.left.store(0, Ordering::SeqCst);
                return Err(ProviderError::TransportFailure { attempts: 3, message: "connection reset".into() });
            }
            self.inner.complete(r)
        }
        fn backend(&self) -> crate::provider::BackendKind {
            self.inner.backend()
        }
    }

    let task = synthetic::task(tables());
    let sim = synthetic::simulator(&task.context);
    let cfg = config(8, 2, 5, 33);
    let full = Engine::new(&task, cfg.clone(), &sim).unwrap().run().unwrap();
    let through_gen2: u64 = full.history[..3].iter().map(|r| r.calls.total).sum();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt.json");
    let flaky = FailAfter { inner: &sim, left: AtomicU64::new(through_gen2 + 3) };
    let err = Engine::new(&task, cfg.clone(), &flaky).unwrap().with_checkpoint(&path).run().unwrap_err();
    assert!(matches!(err, EngineError::Provider { generation: 3, .. }), "{err}");

    let cp = Checkpoint::read(&path).unwrap();
    assert_eq!(cp.generation, 2);
    let resumed = Engine::new(&task, cfg.clone(), &sim).unwrap().resume(&cp).unwrap();
    assert_eq!(resumed.resumed_at, vec![3]);
    let mask = |mut r: RunResult<KnapsackGene>| {
        r.resumed_at.clear();
        for h in &mut r.history {
            h.wall_clock_ms = 0;
        }
        r
    };
    assert_eq!(mask(resumed), mask(full));

    let other = EngineConfig { mutation_rate: 0.5, ..cfg };
    assert!(matches!(Engine::new(&task, other, &sim).unwrap().resume(&cp), Err(EngineError::DigestMismatch { .. })));
}

#[test]
fn completed_checkpoint_resumes_to_the_same_result() {
    let task = synthetic::task(tables());
    let sim = synthetic::simulator(&task.context);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("done.json");
    let cfg = config(6, 1, 2, 2);
    let first = Engine::new(&task, cfg.clone(), &sim).unwrap().with_checkpoint(&path).run().unwrap();
    let cp = Checkpoint::read(&path).unwrap();
    assert_eq!(cp.completed, Some(TerminationReason::MaxGenerations));
    let metered = Metered::new(&sim);
    let again = Engine::new(&task, cfg, &metered).unwrap().resume(&cp).unwrap();
    assert_eq!(metered.total_calls(), 0);
    let mut a = first;
    let mut b = again;
    for h in a.history.iter_mut().chain(b.history.iter_mut()) {
        h.wall_clock_ms = 0;
    }
    assert_eq!(a, b);
}

#[test]
fn logs_carry_required_keys() {
    let task = synthetic::task(tables());
    let sim = synthetic::simulator(&task.context);
    let (logger, events) = Logger::in_memory(Level::Trace);
    Engine::new(&task, config(4, 1, 2, 1), &sim).unwrap().with_logger(&logger).run().unwrap();
    let events = events.lock().unwrap();
    for e in events.iter() {
        assert!(e.missing_keys().is_empty(), "{:?} lacks {:?}", e.kind, e.missing_keys());
    }
    assert_eq!(events.iter().filter(|e| e.kind == EventKind::GenerationEnd).count(), 2);
    assert!(events.iter().any(|e| e.kind == EventKind::ProviderCall));
    assert_eq!(events.iter().filter(|e| e.kind == EventKind::Termination).count(), 1);
}
