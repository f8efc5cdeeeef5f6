//! The evolutionary loop: seed, evaluate, select, vary, replace.
//!
//! Randomness comes from one seeded generator and is consumed in a fixed
//! order before any concurrent work starts. Every job that needs its own
//! randomness (prompt nonces, structural fallbacks) receives a seed drawn
//! up front, so the concurrency limit never changes results.

pub mod checkpoint;
pub mod config;
pub mod selection;

use std::cmp::Reverse;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evaluation::{evaluate, validate, Effective, EvaluationError};
use crate::gene::{
    parse_from_text, to_text, Gene, Individual, IndividualId, Lineage, Operator, ParseFailure, Population, Validity,
};
use crate::provider::{CompletionRequest, CompletionResponse, Provider, ProviderError, Purpose, Usage};
use crate::tasks::TaskDef;
use crate::telemetry::{snippet, EventKind, Level, LogEvent, Logger};
use crate::templating::{PromptTemplate, TemplateError};

pub use checkpoint::{Checkpoint, IndividualRecord};
pub use config::{ConfigError, EngineConfig, SelectionMethod};
pub use selection::{Candidate, NoValidParents};

/// Improvements at or below this size count as stagnation.
pub const STAGNATION_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    MaxGenerations,
    ThresholdReached,
    Stagnation,
    PopulationExtinct,
}

impl TerminationReason {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminationReason::MaxGenerations => "max_generations",
            TerminationReason::ThresholdReached => "threshold_reached",
            TerminationReason::Stagnation => "stagnation",
            TerminationReason::PopulationExtinct => "population_extinct",
        }
    }
}

/// Provider calls by purpose.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub generation: u64,
    pub crossover: u64,
    pub mutation: u64,
    pub evaluation: u64,
    pub repair: u64,
    pub total: u64,
}

impl CallCounts {
    pub fn add(&mut self, purpose: Purpose, n: u64) {
        *match purpose {
            Purpose::Generation => &mut self.generation,
            Purpose::Crossover => &mut self.crossover,
            Purpose::Mutation => &mut self.mutation,
            Purpose::Evaluation => &mut self.evaluation,
            Purpose::Repair => &mut self.repair,
        } += n;
        self.total += n;
    }

    pub fn get(&self, purpose: Purpose) -> u64 {
        match purpose {
            Purpose::Generation => self.generation,
            Purpose::Crossover => self.crossover,
            Purpose::Mutation => self.mutation,
            Purpose::Evaluation => self.evaluation,
            Purpose::Repair => self.repair,
        }
    }
}

impl std::ops::AddAssign for CallCounts {
    fn add_assign(&mut self, rhs: Self) {
        for p in Purpose::ALL {
            self.add(p, rhs.get(p));
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorCounts {
    pub seed: usize,
    pub crossover: usize,
    /// Mutation offspring plus crossover offspring that were also mutated.
    pub mutation: usize,
    pub clone: usize,
    pub elite: usize,
    pub repair: usize,
    pub structural_fallback: usize,
}

/// Per-generation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: u32,
    pub population_size: usize,
    /// Members with a selectable fitness.
    pub scored: usize,
    /// Members evaluated as valid (no hard violation, scored).
    pub valid: usize,
    pub best: Option<f64>,
    pub mean: Option<f64>,
    pub worst: Option<f64>,
    pub best_id: Option<IndividualId>,
    pub hard_violations: usize,
    pub parse_failures: usize,
    pub score_failures: usize,
    pub operators: OperatorCounts,
    pub duplicates: usize,
    /// Calls spent producing and evaluating this generation.
    pub calls: CallCounts,
    pub usage: Usage,
    pub wall_clock_ms: u64,
}

impl GenerationRecord {
    fn of<G: Gene>(pop: &Population<G>, calls: CallCounts, usage: Usage, wall_clock_ms: u64) -> Self {
        let scored: Vec<Candidate> =
            pop.members.iter().filter_map(|m| m.fitness().map(|fitness| Candidate { id: m.id, fitness })).collect();
        let top = scored.iter().min_by(|a, b| selection::fitter_first(a, b));
        let mut ops = OperatorCounts::default();
        for m in &pop.members {
            let l = &m.lineage;
            match l.operator {
                Operator::Seed => ops.seed += 1,
                Operator::Crossover => ops.crossover += 1,
                Operator::Mutation => ops.mutation += 1,
                Operator::Clone => ops.clone += 1,
                Operator::Elite => ops.elite += 1,
            }
            ops.mutation += usize::from(l.mutated);
            ops.repair += usize::from(l.repaired);
            ops.structural_fallback += usize::from(l.structural_fallback);
        }
        let count = |v: Validity| pop.members.iter().filter(|m| m.validity == v).count();
        GenerationRecord {
            generation: pop.generation,
            population_size: pop.members.len(),
            scored: scored.len(),
            valid: count(Validity::Valid),
            best: top.map(|c| c.fitness),
            mean: (!scored.is_empty()).then(|| scored.iter().map(|c| c.fitness).sum::<f64>() / scored.len() as f64),
            worst: scored.iter().map(|c| c.fitness).min_by(f64::total_cmp),
            best_id: top.map(|c| c.id),
            hard_violations: pop.members.iter().filter(|m| m.has_hard_violation()).count(),
            parse_failures: count(Validity::ParseFailure),
            score_failures: count(Validity::ScoreFailure),
            operators: ops,
            duplicates: pop.duplicate_count(),
            calls,
            usage,
            wall_clock_ms,
        }
    }
}

/// Decides whether the run stops after the last recorded generation.
/// Threshold beats stagnation beats the generation cap.
pub fn check_termination(history: &[GenerationRecord], config: &EngineConfig) -> Option<TerminationReason> {
    let last = history.last()?;
    if let (Some(threshold), Some(best)) = (config.fitness_threshold, last.best) {
        if best >= threshold {
            return Some(TerminationReason::ThresholdReached);
        }
    }
    if let Some(window) = config.stagnation_window {
        let g = history.len() - 1;
        if g >= window as usize {
            let running = |records: &[GenerationRecord]| records.iter().filter_map(|r| r.best).max_by(f64::total_cmp);
            let improved = match (running(history), running(&history[..=g - window as usize])) {
                (Some(now), Some(then)) => now - then > STAGNATION_EPSILON,
                (Some(_), None) => true,
                _ => false,
            };
            if !improved {
                return Some(TerminationReason::Stagnation);
            }
        }
    }
    if history.len() as u64 >= u64::from(config.max_generations) {
        return Some(TerminationReason::MaxGenerations);
    }
    None
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("provider failed during generation {generation}: {error}")]
    Provider { error: ProviderError, generation: u32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint was written for a different configuration or task (digest {found}, expected {expected})")]
    DigestMismatch { expected: String, found: String },
}

/// Outcome of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult<G> {
    /// Best individual seen in any generation; feasible ones always win
    /// over infeasible ones.
    pub best: Option<Individual<G>>,
    pub history: Vec<GenerationRecord>,
    pub termination: TerminationReason,
    pub calls: CallCounts,
    pub usage: Usage,
    pub config: EngineConfig,
    pub seed: u64,
    pub population: Population<G>,
    /// Generations at which the run was continued from a checkpoint.
    pub resumed_at: Vec<u32>,
}

struct RunState<G> {
    population: Population<G>,
    rng: ChaCha8Rng,
    history: Vec<GenerationRecord>,
    best: Option<Individual<G>>,
    calls: CallCounts,
    usage: Usage,
    next_id: IndividualId,
    resumed_at: Vec<u32>,
}

impl<G: Gene> RunState<G> {
    fn take_id(&mut self) -> IndividualId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn consider_best(&mut self) {
        let key = |m: &Individual<G>| m.fitness().map(|f| (!m.has_hard_violation(), f, Reverse(m.id)));
        for m in &self.population.members {
            let Some(k) = key(m) else { continue };
            let better = self.best.as_ref().and_then(key).is_none_or(|current| cmp_key(&k, &current).is_gt());
            if better {
                self.best = Some(m.clone());
            }
        }
    }
}

fn cmp_key(a: &(bool, f64, Reverse<IndividualId>), b: &(bool, f64, Reverse<IndividualId>)) -> std::cmp::Ordering {
    a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// Calls and token usage spent by one job.
#[derive(Debug, Default)]
struct Tally {
    calls: CallCounts,
    usage: Usage,
}

impl Tally {
    fn absorb(&mut self, other: Tally) {
        self.calls += other.calls;
        self.usage += other.usage;
    }
}

enum Obtained<G> {
    Parsed { gene: G, repaired: bool },
    Failed { raw: String, error: ParseFailure },
}

/// Logs every call at trace level and counts it.
struct Traced<'a, P: ?Sized> {
    inner: &'a P,
    logger: &'a Logger,
    generation: u32,
}

impl<P: Provider + ?Sized> Provider for Traced<'_, P> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        let result = self.inner.complete(request);
        if self.logger.enabled(Level::Trace) {
            let mut event = LogEvent::new(Level::Trace, EventKind::ProviderCall)
                .generation(self.generation)
                .with("purpose", request.purpose.as_str())
                .with("digest", request.digest());
            event = match &result {
                Ok(r) => event
                    .with("latency_ms", r.latency_ms)
                    .with("attempts", r.attempts)
                    .with("input_tokens", r.usage.input_tokens)
                    .with("output_tokens", r.usage.output_tokens),
                Err(e) => event.with("latency_ms", 0).with("attempts", 0).with("error", e.to_string()),
            };
            self.logger.emit(event);
        }
        result
    }

    fn backend(&self) -> crate::provider::BackendKind {
        self.inner.backend()
    }
}

/// Runs `f` over `items` with at most `limit` worker threads; results keep
/// the input order.
fn parallel_map<T: Send, R: Send>(limit: usize, items: Vec<T>, f: impl Fn(T) -> R + Sync) -> Vec<R> {
    if limit <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let inputs: Vec<Mutex<Option<T>>> = items.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let outputs: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..limit.min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let item = inputs[i].lock().expect("job slot").take().expect("each job runs once");
                let out = f(item);
                *outputs[i].lock().expect("result slot") = Some(out);
            });
        }
    });
    outputs.into_iter().map(|m| m.into_inner().expect("result slot").expect("every job finished")).collect()
}

fn variation_hint(k: usize, n: usize, nonce: u64) -> String {
    format!("Candidate {k} of {n}; variation key {nonce:016x}")
}

/// What one offspring slot will do, fixed before any work starts.
struct OffspringPlan<'p, G> {
    id: IndividualId,
    slot: usize,
    a: &'p Individual<G>,
    b: &'p Individual<G>,
    crossover: bool,
    mutate: bool,
    seed: u64,
}

pub struct Engine<'a, G: Gene, P: Provider + ?Sized> {
    task: &'a TaskDef<G>,
    config: EngineConfig,
    provider: &'a P,
    logger: &'a Logger,
    checkpoint_path: Option<PathBuf>,
    meta: serde_json::Value,
}

static SILENT: std::sync::LazyLock<Logger> = std::sync::LazyLock::new(Logger::disabled);

impl<'a, G: Gene, P: Provider + ?Sized> Engine<'a, G, P> {
    pub fn new(task: &'a TaskDef<G>, config: EngineConfig, provider: &'a P) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self { task, config, provider, logger: &SILENT, checkpoint_path: None, meta: serde_json::Value::Null })
    }

    pub fn with_logger(mut self, logger: &'a Logger) -> Self {
        self.logger = logger;
        self
    }

    /// Write a checkpoint to `path` after every generation.
    pub fn with_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint_path = Some(path.into());
        self
    }

    /// Opaque data stored in every checkpoint.
    pub fn with_meta(mut self, meta: serde_json::Value) -> Self {
        self.meta = meta;
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn config_digest(&self) -> String {
        self.config.digest(&self.task.digest())
    }

    pub fn run(&self) -> Result<RunResult<G>, EngineError> {
        let mut state = RunState {
            population: Population { generation: 0, members: Vec::new() },
            rng: ChaCha8Rng::seed_from_u64(self.config.seed),
            history: Vec::new(),
            best: None,
            calls: CallCounts::default(),
            usage: Usage::default(),
            next_id: 0,
            resumed_at: Vec::new(),
        };
        self.logger.emit(
            LogEvent::new(Level::Info, EventKind::RunStart)
                .with("seed", self.config.seed)
                .with("population_size", self.config.population_size)
                .with("max_generations", self.config.max_generations)
                .with("kind", G::KIND),
        );
        let started = Instant::now();
        self.logger.emit(
            LogEvent::new(Level::Info, EventKind::GenerationStart)
                .generation(0)
                .with("population_size", self.config.population_size),
        );
        let mut tally = Tally::default();
        state.population = self.initialize_population(&mut state, &mut tally)?;
        let parsed = state.population.members.iter().filter(|m| m.gene.is_some()).count();
        self.evaluate_population(&mut state.population, &mut tally)?;
        let forced = (parsed < 2).then_some(TerminationReason::PopulationExtinct);
        let reason = self.finish_generation(&mut state, tally, started, forced)?;
        self.drive(state, reason)
    }

    /// Continues a run from a checkpoint written by an engine with the same
    /// configuration and task.
    pub fn resume(&self, cp: &Checkpoint) -> Result<RunResult<G>, EngineError> {
        if cp.kind != G::KIND {
            return Err(EngineError::Checkpoint(format!("checkpoint is for `{}`, task is `{}`", cp.kind, G::KIND)));
        }
        let expected = self.config_digest();
        if cp.config_digest != expected {
            return Err(EngineError::DigestMismatch { expected, found: cp.config_digest.clone() });
        }
        let members = cp.population.iter().map(IndividualRecord::restore).collect::<Result<Vec<_>, _>>()?;
        let mut state = RunState {
            population: Population { generation: cp.generation, members },
            rng: cp.rng.clone(),
            history: cp.history.clone(),
            best: cp.best.as_ref().map(IndividualRecord::restore).transpose()?,
            calls: cp.calls,
            usage: cp.usage,
            next_id: cp.next_id,
            resumed_at: cp.resumed_at.clone(),
        };
        if cp.completed.is_none() {
            state.resumed_at.push(cp.generation + 1);
        }
        self.drive(state, cp.completed)
    }

    fn drive(
        &self,
        mut state: RunState<G>,
        mut reason: Option<TerminationReason>,
    ) -> Result<RunResult<G>, EngineError> {
        while reason.is_none() {
            let started = Instant::now();
            let next_gen = state.population.generation + 1;
            self.logger.emit(
                LogEvent::new(Level::Info, EventKind::GenerationStart)
                    .generation(next_gen)
                    .with("population_size", self.config.population_size),
            );
            let mut tally = Tally::default();
            match self.step_generation(&mut state, &mut tally) {
                Ok(next) => {
                    state.population = next;
                    self.evaluate_population(&mut state.population, &mut tally)?;
                    reason = self.finish_generation(&mut state, tally, started, None)?;
                }
                Err(StepError::Extinct) => {
                    reason = Some(TerminationReason::PopulationExtinct);
                    self.save(&state, reason)?;
                }
                Err(StepError::Engine(e)) => return Err(e),
            }
        }
        let termination = reason.expect("loop exits with a reason");
        self.logger.emit(
            LogEvent::new(Level::Info, EventKind::Termination)
                .generation(state.population.generation)
                .with("reason", termination.as_str())
                .with("total_calls", state.calls.total)
                .with("best", state.best.as_ref().and_then(|b| b.fitness())),
        );
        Ok(RunResult {
            best: state.best,
            history: state.history,
            termination,
            calls: state.calls,
            usage: state.usage,
            config: self.config.clone(),
            seed: self.config.seed,
            population: state.population,
            resumed_at: state.resumed_at,
        })
    }

    fn finish_generation(
        &self,
        state: &mut RunState<G>,
        tally: Tally,
        started: Instant,
        forced: Option<TerminationReason>,
    ) -> Result<Option<TerminationReason>, EngineError> {
        state.calls += tally.calls;
        state.usage += tally.usage;
        let record =
            GenerationRecord::of(&state.population, tally.calls, tally.usage, started.elapsed().as_millis() as u64);
        state.consider_best();
        self.logger.emit(
            LogEvent::new(Level::Info, EventKind::GenerationEnd)
                .generation(record.generation)
                .with("best", record.best)
                .with("mean", record.mean)
                .with("worst", record.worst)
                .with("hard_violations", record.hard_violations)
                .with("parse_failures", record.parse_failures)
                .with("calls", record.calls.total),
        );
        if self.logger.enabled(Level::Debug) {
            if let Some(top) = record.best_id.and_then(|id| state.population.get(id)) {
                if let Some(gene) = &top.gene {
                    self.logger.emit(
                        LogEvent::new(Level::Debug, EventKind::EvaluationDone)
                            .generation(record.generation)
                            .individual(top.id)
                            .with("validity", "top")
                            .with("fitness", top.fitness())
                            .with("calls", 0)
                            .with("snippet", snippet(&gene.render())),
                    );
                }
            }
        }
        state.history.push(record);
        let reason = forced.or_else(|| check_termination(&state.history, &self.config));
        self.save(state, reason)?;
        Ok(reason)
    }

    fn save(&self, state: &RunState<G>, completed: Option<TerminationReason>) -> Result<(), EngineError> {
        let Some(path) = &self.checkpoint_path else { return Ok(()) };
        let cp = Checkpoint {
            version: checkpoint::CHECKPOINT_VERSION,
            kind: G::KIND.to_string(),
            config_digest: self.config_digest(),
            config: self.config.clone(),
            generation: state.population.generation,
            rng: state.rng.clone(),
            population: state.population.members.iter().map(IndividualRecord::of).collect(),
            history: state.history.clone(),
            best: state.best.as_ref().map(IndividualRecord::of),
            calls: state.calls,
            usage: state.usage,
            next_id: state.next_id,
            completed,
            resumed_at: state.resumed_at.clone(),
            meta: self.meta.clone(),
        };
        cp.write(path)?;
        self.logger.emit(
            LogEvent::new(Level::Debug, EventKind::Checkpoint)
                .generation(state.population.generation)
                .with("path", path.display().to_string()),
        );
        Ok(())
    }

    fn traced(&self, generation: u32) -> Traced<'_, P> {
        Traced { inner: self.provider, logger: self.logger, generation }
    }

    fn call(
        &self,
        purpose: Purpose,
        prompt: String,
        generation: u32,
        tally: &mut Tally,
    ) -> Result<String, EngineError> {
        let mut request = CompletionRequest::new(purpose, self.task.messages(prompt), self.config.max_output_tokens);
        request.temperature = self.config.temperature;
        tally.calls.add(purpose, 1);
        let reply =
            self.traced(generation).complete(&request).map_err(|error| EngineError::Provider { error, generation })?;
        tally.usage += reply.usage;
        Ok(reply.text)
    }

    /// Prompt, parse, retry with fresh nonces, then one repair attempt.
    #[allow(clippy::too_many_arguments)]
    fn obtain(
        &self,
        purpose: Purpose,
        template: &PromptTemplate,
        mut bindings: BTreeMap<&'static str, String>,
        (k, n): (usize, usize),
        generation: u32,
        rng: &mut ChaCha8Rng,
        tally: &mut Tally,
    ) -> Result<Obtained<G>, EngineError> {
        let mut last: Option<(String, ParseFailure)> = None;
        for _ in 0..=self.config.max_parse_retries {
            bindings.insert("variation_hint", variation_hint(k, n, rng.next_u64()));
            let text = self.call(purpose, template.render(&bindings)?, generation, tally)?;
            match parse_from_text::<G>(&text) {
                Ok(gene) => return Ok(Obtained::Parsed { gene, repaired: false }),
                Err(error) => {
                    self.log_parse_failure(purpose, generation, &error);
                    last = Some((text, error));
                }
            }
        }
        let (mut raw, mut error) = last.expect("at least one attempt is made");
        if let (true, Some(repair)) = (self.config.repair_enabled, self.task.templates.repair()) {
            let mut b = self.task.base_bindings();
            b.insert("candidate", raw.clone());
            b.insert("variation_hint", variation_hint(k, n, rng.next_u64()));
            let text = self.call(Purpose::Repair, repair.render(&b)?, generation, tally)?;
            match parse_from_text::<G>(&text) {
                Ok(gene) => return Ok(Obtained::Parsed { gene, repaired: true }),
                Err(e) => {
                    self.log_parse_failure(Purpose::Repair, generation, &e);
                    raw = text;
                    error = e;
                }
            }
        }
        Ok(Obtained::Failed { raw, error })
    }

    fn log_parse_failure(&self, purpose: Purpose, generation: u32, error: &ParseFailure) {
        self.logger.emit(
            LogEvent::new(Level::Debug, EventKind::ParseFailure)
                .generation(generation)
                .with("purpose", purpose.as_str())
                .with("reason", error.to_string()),
        );
    }

    fn initialize_population(&self, state: &mut RunState<G>, tally: &mut Tally) -> Result<Population<G>, EngineError> {
        let n = self.config.population_size;
        let jobs: Vec<(usize, IndividualId, u64)> =
            (0..n).map(|i| (i, state.take_id(), state.rng.next_u64())).collect();
        let results = parallel_map(self.config.concurrency, jobs, |(i, id, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tally::default();
            let template = self.task.templates.pick_generation_template(i);
            let got =
                self.obtain(Purpose::Generation, template, self.task.base_bindings(), (i + 1, n), 0, &mut rng, &mut t);
            (got, t, id)
        });
        let mut members = Vec::with_capacity(n);
        for (got, t, id) in results {
            tally.absorb(t);
            members.push(match got? {
                Obtained::Parsed { gene, repaired } => {
                    let mut lineage = Lineage::seed(0);
                    lineage.repaired = repaired;
                    Individual::new(id, gene, lineage)
                }
                Obtained::Failed { raw, error } => Individual::parse_failed(id, raw, error, Lineage::seed(0)),
            });
        }
        Ok(Population { generation: 0, members })
    }

    /// Scores every unevaluated member that has a gene.
    fn evaluate_population(&self, pop: &mut Population<G>, tally: &mut Tally) -> Result<(), EngineError> {
        let generation = pop.generation;
        let settings = self.config.eval_settings();
        let pending: Vec<(usize, &G)> = pop
            .members
            .iter()
            .enumerate()
            .filter(|(_, m)| m.validity == Validity::Unevaluated)
            .filter_map(|(i, m)| m.gene.as_ref().map(|g| (i, g)))
            .collect();
        let traced = self.traced(generation);
        let results = parallel_map(self.config.concurrency, pending, |(i, gene)| {
            (i, evaluate(gene, self.task, &settings, &traced))
        });
        for (i, result) in results {
            let member = &mut pop.members[i];
            match result {
                Ok(ev) => {
                    tally.calls.add(Purpose::Evaluation, u64::from(ev.calls));
                    tally.usage += ev.usage;
                    member.violations = ev.report.violations.clone();
                    let hard = member.has_hard_violation() || ev.report.effective == Effective::Filtered;
                    member.validity = if hard { Validity::HardViolation } else { Validity::Valid };
                    member.report = Some(ev.report);
                }
                Err(EvaluationError::Unscorable { calls, .. }) => {
                    tally.calls.add(Purpose::Evaluation, u64::from(calls));
                    member.violations =
                        validate(member.gene.as_ref().expect("pending members have genes"), &self.task.constraints);
                    member.validity = Validity::ScoreFailure;
                }
                Err(EvaluationError::Provider { error, calls }) => {
                    tally.calls.add(Purpose::Evaluation, u64::from(calls));
                    return Err(EngineError::Provider { error, generation });
                }
                Err(EvaluationError::Template(e)) => return Err(e.into()),
            }
            self.log_evaluation(member, generation);
        }
        Ok(())
    }

    fn log_evaluation(&self, m: &Individual<G>, generation: u32) {
        if !self.logger.enabled(Level::Debug) {
            return;
        }
        self.logger.emit(
            LogEvent::new(Level::Debug, EventKind::EvaluationDone)
                .generation(generation)
                .individual(m.id)
                .with("validity", serde_json::to_value(m.validity).expect("validity serializes"))
                .with("fitness", m.fitness())
                .with("calls", m.report.as_ref().map_or(0, |r| r.samples_used)),
        );
        for v in &m.violations {
            self.logger.emit(
                LogEvent::new(Level::Debug, EventKind::ConstraintViolation)
                    .generation(generation)
                    .individual(m.id)
                    .with("constraint_id", v.constraint_id.clone())
                    .with("severity", v.severity.to_string())
                    .with("message", v.message.clone()),
            );
        }
    }

    /// Builds the next population: elite copies first, then offspring.
    fn step_generation(&self, state: &mut RunState<G>, tally: &mut Tally) -> Result<Population<G>, StepError> {
        let pop = &state.population;
        let next_gen = pop.generation + 1;
        let mut candidates: Vec<Candidate> =
            pop.members.iter().filter_map(|m| m.fitness().map(|fitness| Candidate { id: m.id, fitness })).collect();
        candidates.sort_by_key(|c| c.id);
        if candidates.is_empty() {
            return Err(StepError::Extinct);
        }
        let elites = selection::elites(&candidates, self.config.elite_count);
        let slots = self.config.population_size - elites.len();
        let pool = selection::parent_pool(
            &candidates,
            self.config.selection,
            self.config.tournament_size,
            slots,
            &mut state.rng,
        )
        .map_err(|_| StepError::Extinct)?;

        let member = |id: IndividualId| pop.get(id).expect("selected ids exist");
        let mut next: Vec<Individual<G>> = Vec::with_capacity(self.config.population_size);
        for e in &elites {
            let old = member(e.id);
            let mut copy = old.clone();
            copy.id = state.next_id;
            state.next_id += 1;
            copy.lineage = Lineage::new(next_gen, vec![old.id], Operator::Elite);
            next.push(copy);
        }
        let elite_variants = if self.config.mutate_elites { elites.len().min(slots) } else { 0 };
        let mut plans = Vec::with_capacity(slots);
        for slot in 0..slots {
            let (a, b) = if let Some(&e) = elites.get(slot).filter(|_| slot < elite_variants) {
                (e, e)
            } else {
                selection::pair(&pool, slot)
            };
            let crossover = state.rng.gen_bool(self.config.crossover_rate) && slot >= elite_variants;
            let mutate = state.rng.gen_bool(self.config.mutation_rate) || slot < elite_variants;
            let seed = state.rng.next_u64();
            let id = state.next_id;
            state.next_id += 1;
            plans.push(OffspringPlan { id, slot, a: member(a.id), b: member(b.id), crossover, mutate, seed });
        }
        let results = parallel_map(self.config.concurrency, plans, |plan| {
            let mut t = Tally::default();
            let child = self.make_offspring(&plan, slots, next_gen, &mut t);
            (child, t)
        });
        for (child, t) in results {
            tally.absorb(t);
            let child = child.map_err(StepError::Engine)?;
            self.logger.emit(
                LogEvent::new(Level::Debug, EventKind::OffspringCreated)
                    .generation(next_gen)
                    .individual(child.id)
                    .with("operator", serde_json::to_value(child.lineage.operator).expect("operator serializes"))
                    .with("parents", child.lineage.parent_ids.clone())
                    .with("mutated", child.lineage.mutated)
                    .with("repaired", child.lineage.repaired)
                    .with("structural_fallback", child.lineage.structural_fallback),
            );
            next.push(child);
        }
        Ok(Population { generation: next_gen, members: next })
    }

    fn make_offspring(
        &self,
        plan: &OffspringPlan<'_, G>,
        slots: usize,
        generation: u32,
        tally: &mut Tally,
    ) -> Result<Individual<G>, EngineError> {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        let gene_of = |ind: &Individual<G>| ind.gene.clone().expect("selectable members have genes");
        let fitter = {
            let key = |m: &Individual<G>| Candidate { id: m.id, fitness: m.fitness().unwrap_or(f64::NEG_INFINITY) };
            if selection::fitter_first(&key(plan.a), &key(plan.b)).is_le() {
                plan.a
            } else {
                plan.b
            }
        };
        let hint = (plan.slot + 1, slots);
        let templates = &self.task.templates;

        let (mut gene, mut lineage) = if plan.crossover {
            let mut lineage = Lineage::new(generation, vec![plan.a.id, plan.b.id], Operator::Crossover);
            let mut b = self.task.base_bindings();
            let (ga, gb) = (gene_of(plan.a), gene_of(plan.b));
            b.insert("parent_a", to_text(&ga));
            b.insert("parent_b", to_text(&gb));
            let gene =
                match self.obtain(Purpose::Crossover, templates.crossover(), b, hint, generation, &mut rng, tally)? {
                    Obtained::Parsed { gene, repaired } => {
                        lineage.repaired = repaired;
                        gene
                    }
                    Obtained::Failed { .. } => {
                        lineage.structural_fallback = true;
                        ga.structural_crossover(&gb, &mut rng).unwrap_or_else(|_| gene_of(fitter))
                    }
                };
            (gene, lineage)
        } else {
            (gene_of(fitter), Lineage::new(generation, vec![fitter.id], Operator::Clone))
        };

        if plan.mutate {
            let mut b = self.task.base_bindings();
            b.insert("candidate", to_text(&gene));
            match self.obtain(Purpose::Mutation, templates.mutation(), b, hint, generation, &mut rng, tally)? {
                Obtained::Parsed { gene: g, repaired } => {
                    lineage.repaired |= repaired;
                    gene = g;
                }
                Obtained::Failed { .. } => {
                    lineage.structural_fallback = true;
                    gene = gene.structural_mutate(&self.task.context, &mut rng).gene;
                }
            }
            if lineage.operator == Operator::Clone {
                lineage.operator = Operator::Mutation;
            } else {
                lineage.mutated = true;
            }
        }
        Ok(Individual::new(plan.id, gene, lineage))
    }
}

enum StepError {
    Extinct,
    Engine(EngineError),
}

impl From<EngineError> for StepError {
    fn from(e: EngineError) -> Self {
        StepError::Engine(e)
    }
}

/// Reads a checkpoint; convenience for callers that only hold a path.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, EngineError> {
    Checkpoint::read(path)
}

#[cfg(test)]
mod tests;
