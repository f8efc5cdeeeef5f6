//! Slot-choice knapsack: pick one option per slot, maximize value under a
//! cost budget. Small instances can be solved exactly by enumeration, which
//! makes this the reference task for checking the engine converges.

use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{candidate_index, embedded_templates, ManifestParts, TaskDef, TaskError};
use crate::evaluation::{ConstraintSpec, ConstraintViolation, Severity};
use crate::gene::{all_block_bodies, parse_from_text, to_text, Gene, Mutation, VariationError};
use crate::provider::{Purpose, ScriptRule, ScriptedProvider};

/// Enumeration refuses search spaces larger than this.
pub const MAX_ENUMERATION: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnapsackGene {
    /// Chosen option index per slot.
    pub choices: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotOption {
    pub cost: u64,
    pub value: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnapsackTables {
    pub options: Vec<Vec<SlotOption>>,
    pub budget: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OracleError {
    #[error("search space of {0} assignments exceeds the enumeration limit")]
    SearchSpaceTooLarge(u128),
    #[error("no assignment fits the budget")]
    NoFeasibleAssignment,
}

impl KnapsackTables {
    pub fn slots(&self) -> usize {
        self.options.len()
    }

    pub fn in_range(&self, gene: &KnapsackGene) -> bool {
        gene.choices.len() == self.slots()
            && gene.choices.iter().zip(&self.options).all(|(&c, opts)| (c as usize) < opts.len())
    }

    /// `(cost, value)` of an in-range assignment.
    pub fn totals(&self, gene: &KnapsackGene) -> Option<(u64, u64)> {
        if !self.in_range(gene) {
            return None;
        }
        Some(gene.choices.iter().zip(&self.options).fold((0, 0), |(c, v), (&i, opts)| {
            let o = opts[i as usize];
            (c + o.cost, v + o.value)
        }))
    }

    pub fn search_space(&self) -> u128 {
        self.options.iter().map(|o| o.len() as u128).product()
    }

    /// Exact optimum by exhaustive enumeration in lexicographic order; ties
    /// keep the lexicographically smallest assignment.
    pub fn brute_force_optimum(&self) -> Result<(KnapsackGene, u64), OracleError> {
        let space = self.search_space();
        if space > MAX_ENUMERATION {
            return Err(OracleError::SearchSpaceTooLarge(space));
        }
        if space == 0 {
            return Err(OracleError::NoFeasibleAssignment);
        }
        let mut current = vec![0u32; self.slots()];
        let mut best: Option<(Vec<u32>, u64)> = None;
        loop {
            let gene = KnapsackGene { choices: current.clone() };
            let (cost, value) = self.totals(&gene).expect("enumerated assignments are in range");
            if cost <= self.budget && best.as_ref().is_none_or(|(_, v)| value > *v) {
                best = Some((current.clone(), value));
            }
            // Odometer increment, last slot fastest.
            let mut slot = self.slots();
            loop {
                if slot == 0 {
                    return best
                        .map(|(choices, value)| (KnapsackGene { choices }, value))
                        .ok_or(OracleError::NoFeasibleAssignment);
                }
                slot -= 1;
                current[slot] += 1;
                if (current[slot] as usize) < self.options[slot].len() {
                    break;
                }
                current[slot] = 0;
            }
        }
    }

    /// Value relative to the optimum, or `None` when infeasible.
    pub fn fitness(&self, gene: &KnapsackGene, optimum_value: u64) -> Option<f64> {
        let (cost, value) = self.totals(gene)?;
        if cost > self.budget {
            return None;
        }
        if optimum_value == 0 {
            return Some(0.0);
        }
        Some(value as f64 / optimum_value as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

impl KnapsackGene {
    pub fn crossover_with_mask(&self, other: &Self, mask: &[Side]) -> Result<Self, VariationError> {
        if self.choices.len() != other.choices.len() || mask.len() != self.choices.len() {
            return Err(VariationError::IncompatibleKinds(format!(
                "slot counts differ ({} vs {}, mask {})",
                self.choices.len(),
                other.choices.len(),
                mask.len()
            )));
        }
        let choices = mask
            .iter()
            .zip(self.choices.iter().zip(&other.choices))
            .map(|(side, (&a, &b))| if *side == Side::A { a } else { b })
            .collect();
        Ok(Self { choices })
    }

    /// Re-draws the option at `slot` to a different index; unchanged when
    /// the slot has no alternative.
    pub fn mutate_slot<R: RngCore + ?Sized>(
        &self,
        tables: &KnapsackTables,
        slot: usize,
        rng: &mut R,
    ) -> Mutation<Self> {
        let count = tables.options.get(slot).map_or(0, Vec::len) as u32;
        let current = self.choices[slot];
        if count < 2 || (count == 1 && current == 0) {
            return Mutation { gene: self.clone(), changed: false };
        }
        let mut pick = rng.gen_range(0..count - 1);
        if pick >= current.min(count - 1) && current < count {
            pick += 1;
        }
        let mut gene = self.clone();
        gene.choices[slot] = pick;
        Mutation { changed: gene != *self, gene }
    }
}

impl Gene for KnapsackGene {
    const KIND: &'static str = "synthetic";
    type Context = KnapsackTables;

    fn render(&self) -> String {
        let picks: Vec<String> =
            self.choices.iter().enumerate().map(|(i, c)| format!("slot {i} -> option {c}")).collect();
        format!("Assignment: {}", picks.join(", "))
    }

    fn format_spec() -> String {
        "Answer with exactly one block in this form:\n\
         ===GENE-BEGIN kind=synthetic v=1===\n\
         {\"choices\": [<option index for slot 0>, <option index for slot 1>, ...]}\n\
         ===GENE-END==="
            .to_string()
    }

    fn structural_crossover<R: RngCore + ?Sized>(&self, other: &Self, rng: &mut R) -> Result<Self, VariationError> {
        let mask: Vec<Side> =
            (0..self.choices.len()).map(|_| if rng.gen_bool(0.5) { Side::A } else { Side::B }).collect();
        self.crossover_with_mask(other, &mask)
    }

    fn structural_mutate<R: RngCore + ?Sized>(&self, tables: &KnapsackTables, rng: &mut R) -> Mutation<Self> {
        let mutable: Vec<usize> =
            (0..self.choices.len().min(tables.slots())).filter(|&s| tables.options[s].len() >= 2).collect();
        if mutable.is_empty() {
            return Mutation { gene: self.clone(), changed: false };
        }
        let slot = mutable[rng.gen_range(0..mutable.len())];
        self.mutate_slot(tables, slot, rng)
    }
}

struct SlotRange {
    tables: Arc<KnapsackTables>,
    penalty: f64,
}

impl ConstraintSpec<KnapsackGene> for SlotRange {
    fn id(&self) -> &str {
        "slot-range"
    }

    fn severity(&self) -> Severity {
        Severity::Hard
    }

    fn description(&self) -> String {
        let counts: Vec<String> = self.tables.options.iter().map(|o| o.len().to_string()).collect();
        format!(
            "exactly {} slots, each choosing an option index below its option count ({})",
            self.tables.slots(),
            counts.join(", ")
        )
    }

    fn check(&self, gene: &KnapsackGene) -> Vec<ConstraintViolation> {
        if self.tables.in_range(gene) {
            return Vec::new();
        }
        vec![ConstraintViolation {
            constraint_id: self.id().into(),
            severity: Severity::Hard,
            message: "assignment has the wrong slot count or an out-of-range option".into(),
            measured: Some(gene.choices.len() as f64),
            limit: Some(self.tables.slots() as f64),
            penalty: self.penalty,
        }]
    }
}

struct CostBudget {
    tables: Arc<KnapsackTables>,
    penalty: f64,
}

impl ConstraintSpec<KnapsackGene> for CostBudget {
    fn id(&self) -> &str {
        "budget-exceeded"
    }

    fn severity(&self) -> Severity {
        Severity::Hard
    }

    fn description(&self) -> String {
        format!("total cost at most {}", self.tables.budget)
    }

    fn check(&self, gene: &KnapsackGene) -> Vec<ConstraintViolation> {
        match self.tables.totals(gene) {
            Some((cost, _)) if cost > self.tables.budget => vec![ConstraintViolation {
                constraint_id: self.id().into(),
                severity: Severity::Hard,
                message: format!("total cost {cost} exceeds budget {}", self.tables.budget),
                measured: Some(cost as f64),
                limit: Some(self.tables.budget as f64),
                penalty: self.penalty,
            }],
            _ => Vec::new(),
        }
    }
}

pub fn constraints(tables: &Arc<KnapsackTables>, hard_penalty: f64) -> Vec<Box<dyn ConstraintSpec<KnapsackGene>>> {
    vec![
        Box::new(SlotRange { tables: tables.clone(), penalty: hard_penalty }),
        Box::new(CostBudget { tables: tables.clone(), penalty: hard_penalty }),
    ]
}

const TEMPLATES: &[(&str, &str)] = &[
    ("manifest.json", include_str!("../../../../tasks/synthetic/templates/manifest.json")),
    ("generate.txt", include_str!("../../../../tasks/synthetic/templates/generate.txt")),
    ("crossover.txt", include_str!("../../../../tasks/synthetic/templates/crossover.txt")),
    ("mutation.txt", include_str!("../../../../tasks/synthetic/templates/mutation.txt")),
    ("evaluation.txt", include_str!("../../../../tasks/synthetic/templates/evaluation.txt")),
    ("repair.txt", include_str!("../../../../tasks/synthetic/templates/repair.txt")),
];

/// Builds a synthetic task over `tables` with the shipped prompts.
pub fn task(tables: KnapsackTables) -> TaskDef<KnapsackGene> {
    let tables = Arc::new(tables);
    TaskDef {
        description: format!(
            "Choose exactly one option for each of the {} slots so that the total value is as high as possible while the total cost stays within the budget.",
            tables.slots()
        ),
        system_prompt: None,
        constraints: constraints(&tables, Severity::Hard.default_penalty()),
        templates: embedded_templates(TEMPLATES),
        rubric: include_str!("../../../../tasks/synthetic/rubric.txt").trim_end().to_string(),
        context: Arc::unwrap_or_clone(tables),
    }
}

pub(super) fn from_manifest(parts: ManifestParts) -> Result<TaskDef<KnapsackGene>, TaskError> {
    let tables: KnapsackTables = parts.params()?;
    if tables.options.is_empty() || tables.options.iter().any(Vec::is_empty) {
        return Err(TaskError::Params("every slot needs at least one option".into()));
    }
    let penalty = parts.penalty("budget-exceeded", Severity::Hard.default_penalty());
    let tables = Arc::new(tables);
    Ok(TaskDef {
        constraints: constraints(&tables, penalty),
        description: parts.description,
        system_prompt: parts.system_prompt,
        templates: parts.templates,
        rubric: parts.rubric,
        context: Arc::unwrap_or_clone(tables),
    })
}

fn parents_in(prompt: &str) -> Vec<KnapsackGene> {
    all_block_bodies(prompt)
        .into_iter()
        .filter_map(|body| {
            parse_from_text::<KnapsackGene>(&format!("===GENE-BEGIN kind=synthetic v=1===\n{body}\n===GENE-END==="))
                .ok()
        })
        .collect()
}

const CROSSOVER_TRIES: usize = 4;
const MUTATION_GREED: f64 = 0.7;

/// Sets one random slot to a random other option, then moves a second slot
/// to its highest-value option that keeps the total within budget. `None`
/// when no such rebalance exists.
fn rebalancing_move<R: Rng + ?Sized>(
    tables: &KnapsackTables,
    gene: &KnapsackGene,
    rng: &mut R,
) -> Option<KnapsackGene> {
    let n = gene.choices.len();
    if !tables.in_range(gene) || n < 2 {
        return None;
    }
    let mut out = gene.structural_mutate(tables, rng).gene;
    let changed = (0..n).find(|&s| out.choices[s] != gene.choices[s])?;
    let other = (changed + 1 + rng.gen_range(0..n - 1)) % n;
    let (cost, _) = tables.totals(&out)?;
    let rest = cost - tables.options[other][out.choices[other] as usize].cost;
    let (pick, _) = tables.options[other]
        .iter()
        .enumerate()
        .filter(|(_, o)| rest + o.cost <= tables.budget)
        .max_by_key(|(i, o)| (o.value, std::cmp::Reverse(*i)))?;
    out.choices[other] = pick as u32;
    Some(out)
}

/// Scripted model for the synthetic task.
///
/// Generation enumerates slot 0 round-robin by candidate index and draws the
/// other slots. Crossover and mutation read the slot table the way a model
/// reads the prompt, but imperfectly: crossover keeps the best feasible of a
/// few random slot masks, and mutation usually changes one slot at random and
/// rebalances another against the budget. Evaluation replies
/// `SCORE: 1 + 9 * value / optimum`.
pub fn simulator(tables: &KnapsackTables) -> ScriptedProvider {
    let tables = Arc::new(tables.clone());
    let optimum = tables.brute_force_optimum().map(|(_, v)| v).unwrap_or(0);

    let gen_tables = tables.clone();
    let generate = move |req: &crate::provider::CompletionRequest, rng: &mut rand_chacha::ChaCha8Rng| {
        let prompt = req.joined_content();
        let first = candidate_index(&prompt);
        let choices = gen_tables
            .options
            .iter()
            .enumerate()
            .map(|(slot, opts)| match (slot, first) {
                (0, Some(k)) => (k % opts.len()) as u32,
                _ => rng.gen_range(0..opts.len()) as u32,
            })
            .collect();
        format!("Here is a candidate assignment.\n\n{}", to_text(&KnapsackGene { choices }))
    };

    let cx_tables = tables.clone();
    let crossover = move |req: &crate::provider::CompletionRequest, rng: &mut rand_chacha::ChaCha8Rng| {
        let parents = parents_in(&req.joined_content());
        let [a, b, ..] = parents.as_slice() else {
            return "I could not find two assignments to combine.".to_string();
        };
        let mut best: Option<(u64, KnapsackGene)> = None;
        for _ in 0..CROSSOVER_TRIES {
            let child = match a.structural_crossover(b, rng) {
                Ok(c) => c,
                Err(e) => return format!("These assignments cannot be combined: {e}"),
            };
            let score = match cx_tables.totals(&child) {
                Some((cost, value)) if cost <= cx_tables.budget => value + 1,
                _ => 0,
            };
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, child));
            }
        }
        format!("Combined assignment:\n\n{}", to_text(&best.expect("at least one try").1))
    };

    let mut_tables = tables.clone();
    let mutate = move |req: &crate::provider::CompletionRequest, rng: &mut rand_chacha::ChaCha8Rng| {
        let Some(g) = parents_in(&req.joined_content()).into_iter().next() else {
            return "I could not find an assignment to change.".to_string();
        };
        let child = if rng.gen_bool(MUTATION_GREED) { rebalancing_move(&mut_tables, &g, rng) } else { None };
        let child = child.unwrap_or_else(|| g.structural_mutate(&mut_tables, rng).gene);
        format!("Changed one slot:\n\n{}", to_text(&child))
    };

    let eval_tables = tables.clone();
    let evaluate = move |req: &crate::provider::CompletionRequest, _: &mut rand_chacha::ChaCha8Rng| {
        let Some(gene) = parents_in(&req.joined_content()).into_iter().next() else {
            return "There is no assignment to rate.".to_string();
        };
        match eval_tables.totals(&gene) {
            Some((cost, value)) => {
                let share = if optimum == 0 { 0.0 } else { (value as f64 / optimum as f64).min(1.0) };
                format!(
                    "Total cost {cost}, total value {value} of {optimum} attainable.\nSCORE: {:.6}",
                    1.0 + 9.0 * share
                )
            }
            None => "The assignment does not fit the slot table.\nSCORE: 1".to_string(),
        }
    };

    let repair = |req: &crate::provider::CompletionRequest, _: &mut rand_chacha::ChaCha8Rng| match parents_in(
        &req.joined_content(),
    )
    .first()
    {
        Some(g) => to_text(g),
        None => "Sorry, there is nothing to repair.".to_string(),
    };

    ScriptedProvider::new(vec![
        ScriptRule::handler(Some(Purpose::Generation), None, generate),
        ScriptRule::handler(Some(Purpose::Crossover), None, crossover),
        ScriptRule::handler(Some(Purpose::Mutation), None, mutate),
        ScriptRule::handler(Some(Purpose::Evaluation), None, evaluate),
        ScriptRule::handler(Some(Purpose::Repair), None, repair),
    ])
}
