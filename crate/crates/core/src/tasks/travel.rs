//! Multi-day travel itinerary under a budget.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use chrono::{Days, NaiveDate, NaiveTime};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{candidate_index, embedded_templates, ManifestParts, TaskDef, TaskError};
use crate::evaluation::{ConstraintSpec, ConstraintViolation, Severity};
use crate::gene::{all_block_bodies, parse_from_text, to_text, Gene, Mutation, ParseFailure, VariationError};
use crate::provider::{CompletionRequest, Purpose, ScriptRule, ScriptedProvider};

/// Non-negative currency amount in hundredths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Money(i64);

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn from_cents(cents: i64) -> Self {
        Money(cents)
    }

    pub fn from_units(units: i64) -> Self {
        Money(units * 100)
    }

    pub fn cents(self) -> i64 {
        self.0
    }
}

impl std::ops::Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl std::ops::Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        Money(self.0 - rhs.0)
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, |a, b| a + b)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:02}", abs / 100, abs % 100)
    }
}

impl FromStr for Money {
    type Err = String;

    /// Accepts `123`, `123.4` and `123.45`; more fraction digits are rejected
    /// rather than silently rounded.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let bad = || format!("`{s}` is not a non-negative amount with at most two decimals");
        let (whole, frac) = t.split_once('.').unwrap_or((t, ""));
        if whole.is_empty()
            || !whole.bytes().all(|b| b.is_ascii_digit())
            || frac.len() > 2
            || !frac.bytes().all(|b| b.is_ascii_digit())
        {
            return Err(bad());
        }
        let units: i64 = whole.parse().map_err(|_| bad())?;
        let hundredths: i64 = format!("{frac:0<2}").parse().map_err(|_| bad())?;
        units.checked_mul(100).and_then(|c| c.checked_add(hundredths)).map(Money).ok_or_else(bad)
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Wire {
            Text(String),
            Int(i64),
            Float(f64),
        }
        let money =
            match Wire::deserialize(d).map_err(|_| D::Error::custom("amount must be a decimal string or a number"))? {
                Wire::Text(s) => s.parse().map_err(D::Error::custom)?,
                Wire::Int(i) if i >= 0 => Money(i * 100),
                Wire::Float(f) if f >= 0.0 && f.is_finite() => Money((f * 100.0).round() as i64),
                _ => return Err(D::Error::custom("amount must not be negative")),
            };
        Ok(money)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hotel {
    pub name: String,
    pub total_cost: Money,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Activity {
    /// 24-hour `HH:MM`.
    pub start_time: String,
    pub location: String,
    pub description: String,
    pub cost: Money,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DayPlan {
    /// ISO `YYYY-MM-DD`.
    pub date: String,
    pub activities: Vec<Activity>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TravelGene {
    pub destination: String,
    pub num_days: u32,
    pub hotel: Hotel,
    pub days: Vec<DayPlan>,
    /// Total as stated by the author; see [`TravelGene::computed_total`].
    pub total_cost: Money,
}

fn parse_time(s: &str) -> Option<NaiveTime> {
    // chrono accepts single-digit hours; the wire format does not.
    if s.len() != 5 {
        return None;
    }
    NaiveTime::parse_from_str(s, "%H:%M").ok()
}

impl TravelGene {
    /// Hotel plus every activity.
    pub fn computed_total(&self) -> Money {
        self.hotel.total_cost + self.days.iter().flat_map(|d| &d.activities).map(|a| a.cost).sum()
    }

    pub fn activity_count(&self) -> usize {
        self.days.iter().map(|d| d.activities.len()).sum()
    }

    pub fn with_recomputed_total(mut self) -> Self {
        self.total_cost = self.computed_total();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

impl TravelGene {
    /// Day `i` of the child comes from `day_mask[i]`'s parent; the hotel and
    /// the day count come from the given sides. Days past the end of the
    /// mask, or missing from the chosen parent, come from whichever parent
    /// has them.
    pub fn crossover_with_mask(&self, other: &Self, day_mask: &[Side], hotel: Side, length: Side) -> Self {
        let pick = |side: Side| if side == Side::A { self } else { other };
        let base = pick(length);
        let mut used_a = false;
        let mut used_b = false;
        let mut note = |side: Side| match side {
            Side::A => used_a = true,
            Side::B => used_b = true,
        };
        note(length);
        note(hotel);
        let days: Vec<DayPlan> = (0..base.days.len())
            .map(|i| {
                let wanted = day_mask.get(i).copied().unwrap_or(length);
                let side = if pick(wanted).days.len() > i { wanted } else { length };
                note(side);
                pick(side).days[i].clone()
            })
            .collect();
        match (used_a, used_b) {
            (true, false) => self.clone(),
            (false, true) => other.clone(),
            _ => TravelGene {
                destination: base.destination.clone(),
                num_days: base.num_days,
                hotel: pick(hotel).hotel.clone(),
                days,
                total_cost: Money::ZERO,
            }
            .with_recomputed_total(),
        }
    }
}

/// Alternatives structural mutation and the simulator draw from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TravelCatalog {
    pub hotels: Vec<Hotel>,
    pub activities: Vec<CatalogActivity>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogActivity {
    pub location: String,
    pub description: String,
    pub cost: Money,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TravelContext {
    pub destination: String,
    pub budget: Money,
    pub days: u32,
    pub start_date: NaiveDate,
    pub catalog: TravelCatalog,
}

fn shanghai_catalog() -> TravelCatalog {
    let hotel = |name: &str, units| Hotel { name: name.into(), total_cost: Money::from_units(units) };
    let act = |location: &str, description: &str, units| CatalogActivity {
        location: location.into(),
        description: description.into(),
        cost: Money::from_units(units),
    };
    TravelCatalog {
        hotels: vec![
            hotel("Shanghai Family Hotel", 1600),
            hotel("Jing'an Budget Inn", 900),
            hotel("Bund Riverside Hotel", 2800),
            hotel("Pudong Grand Tower Hotel", 4200),
        ],
        activities: vec![
            act("Shanghai Museum", "historical art and artifacts", 50),
            act("Yuyuan Old Street", "local street food", 120),
            act("Yu Garden", "classical garden", 40),
            act("Huangpu River", "night cruise", 150),
            act("The Bund", "waterfront promenade", 0),
            act("Nanjing Road", "shopping and lunch", 380),
            act("Shanghai Tower", "observation deck", 180),
            act("Xintiandi", "dinner in restored shikumen houses", 420),
            act("Zhujiajiao Water Town", "canal village day trip", 260),
            act("Tianzifang", "alley crafts and cafes", 240),
            act("Jade Buddha Temple", "temple visit", 30),
            act("Jing'an Temple", "temple and tea tasting", 150),
            act("Power Station of Art", "contemporary art", 0),
            act("Lujiazui", "skyline dinner", 650),
            act("French Concession", "walking tour of plane-tree avenues", 80),
            act("Shanghai Disneyland", "theme park day", 1200),
            act("Century Park", "boating and picnic", 20),
            act("Shanghai Acrobatics Theatre", "evening show", 480),
        ],
    }
}

impl TravelContext {
    pub fn new(destination: impl Into<String>, budget: Money, days: u32) -> Self {
        let destination = destination.into();
        let catalog = if destination.eq_ignore_ascii_case("shanghai") {
            shanghai_catalog()
        } else {
            TravelCatalog { hotels: Vec::new(), activities: Vec::new() }
        };
        Self {
            destination,
            budget,
            days,
            start_date: NaiveDate::from_ymd_opt(2024, 7, 1).expect("valid date"),
            catalog,
        }
    }
}

impl Gene for TravelGene {
    const KIND: &'static str = "travel";
    type Context = TravelContext;

    fn render(&self) -> String {
        let mut out = format!(
            "Travel Itinerary: {}\n- **Days**: {}-day program\n- **Hotel**: {} (¥{})\n- **Total Cost**: ¥{}\n\n**Detailed Schedule:**\n",
            self.destination, self.num_days, self.hotel.name, self.hotel.total_cost, self.total_cost
        );
        for (i, day) in self.days.iter().enumerate() {
            out.push_str(&format!("Day {}: {}\n", i + 1, day.date));
            for a in &day.activities {
                out.push_str(&format!("- {} - **{}** ({}) ¥{}\n", a.start_time, a.location, a.description, a.cost));
            }
            out.push('\n');
        }
        out.trim_end().to_string()
    }

    fn format_spec() -> String {
        "Answer with exactly one block in this form (amounts are strings with two decimals, dates are YYYY-MM-DD, times are 24-hour HH:MM in increasing order within a day):\n\
         ===GENE-BEGIN kind=travel v=1===\n\
         {\"destination\": \"...\", \"num_days\": 4,\n \
         \"hotel\": {\"name\": \"...\", \"total_cost\": \"1600.00\"},\n \
         \"days\": [{\"date\": \"2024-07-01\", \"activities\": [{\"start_time\": \"09:00\", \"location\": \"...\", \"description\": \"...\", \"cost\": \"50.00\"}]}],\n \
         \"total_cost\": \"4890.00\"}\n\
         ===GENE-END==="
            .to_string()
    }

    fn check_shape(&self) -> Result<(), ParseFailure> {
        if self.num_days == 0 {
            return Err(ParseFailure::InvalidValue("num_days must be positive".into()));
        }
        for (i, day) in self.days.iter().enumerate() {
            NaiveDate::parse_from_str(&day.date, "%Y-%m-%d").ok().filter(|_| day.date.len() == 10).ok_or_else(
                || ParseFailure::InvalidValue(format!("day {} date `{}` is not YYYY-MM-DD", i + 1, day.date)),
            )?;
            let mut previous: Option<NaiveTime> = None;
            for a in &day.activities {
                let t = parse_time(&a.start_time).ok_or_else(|| {
                    ParseFailure::InvalidValue(format!("day {} start time `{}` is not HH:MM", i + 1, a.start_time))
                })?;
                if previous.is_some_and(|p| t <= p) {
                    return Err(ParseFailure::InvalidValue(format!(
                        "day {} activities are not in strictly increasing time order",
                        i + 1
                    )));
                }
                previous = Some(t);
            }
        }
        Ok(())
    }

    fn structural_crossover<R: RngCore + ?Sized>(&self, other: &Self, rng: &mut R) -> Result<Self, VariationError> {
        let coin = |rng: &mut R| if rng.gen_bool(0.5) { Side::A } else { Side::B };
        let longest = self.days.len().max(other.days.len());
        let mask: Vec<Side> = (0..longest).map(|_| coin(rng)).collect();
        let hotel = coin(rng);
        let length = coin(rng);
        Ok(self.crossover_with_mask(other, &mask, hotel, length))
    }

    /// Replaces one activity with a different catalog entry, keeping its
    /// start time. The stated total moves by the cost difference.
    fn structural_mutate<R: RngCore + ?Sized>(&self, ctx: &TravelContext, rng: &mut R) -> Mutation<Self> {
        let slots: Vec<(usize, usize)> =
            self.days.iter().enumerate().flat_map(|(d, day)| (0..day.activities.len()).map(move |a| (d, a))).collect();
        if slots.is_empty() {
            return Mutation { gene: self.clone(), changed: false };
        }
        let (d, a) = slots[rng.gen_range(0..slots.len())];
        let current = &self.days[d].activities[a];
        let choices: Vec<&CatalogActivity> = ctx
            .catalog
            .activities
            .iter()
            .filter(|c| {
                c.location != current.location || c.description != current.description || c.cost != current.cost
            })
            .collect();
        if choices.is_empty() {
            return Mutation { gene: self.clone(), changed: false };
        }
        let pick = choices[rng.gen_range(0..choices.len())];
        let mut gene = self.clone();
        let slot = &mut gene.days[d].activities[a];
        gene.total_cost = Money((gene.total_cost.0 - slot.cost.0 + pick.cost.0).max(0));
        slot.location = pick.location.clone();
        slot.description = pick.description.clone();
        slot.cost = pick.cost;
        Mutation { changed: gene != *self, gene }
    }
}

struct BudgetCap {
    budget: Money,
    penalty: f64,
}

impl ConstraintSpec<TravelGene> for BudgetCap {
    fn id(&self) -> &str {
        "budget-exceeded"
    }

    fn severity(&self) -> Severity {
        Severity::Hard
    }

    fn description(&self) -> String {
        format!("the hotel plus all activity costs must total at most ¥{}", self.budget)
    }

    fn check(&self, gene: &TravelGene) -> Vec<ConstraintViolation> {
        let total = gene.computed_total();
        if total <= self.budget {
            return Vec::new();
        }
        vec![ConstraintViolation {
            constraint_id: self.id().into(),
            severity: Severity::Hard,
            message: format!("total cost ¥{total} exceeds the budget of ¥{}", self.budget),
            measured: Some(total.0 as f64 / 100.0),
            limit: Some(self.budget.0 as f64 / 100.0),
            penalty: self.penalty,
        }]
    }
}

struct DayCount {
    days: u32,
    penalty: f64,
}

impl ConstraintSpec<TravelGene> for DayCount {
    fn id(&self) -> &str {
        "day-count"
    }

    fn severity(&self) -> Severity {
        Severity::Hard
    }

    fn description(&self) -> String {
        format!("exactly {} days", self.days)
    }

    fn check(&self, gene: &TravelGene) -> Vec<ConstraintViolation> {
        if gene.days.len() == self.days as usize {
            return Vec::new();
        }
        vec![ConstraintViolation {
            constraint_id: self.id().into(),
            severity: Severity::Hard,
            message: format!("itinerary has {} days, {} required", gene.days.len(), self.days),
            measured: Some(gene.days.len() as f64),
            limit: Some(self.days as f64),
            penalty: self.penalty,
        }]
    }
}

struct StatedTotal {
    penalty: f64,
}

impl ConstraintSpec<TravelGene> for StatedTotal {
    fn id(&self) -> &str {
        "stated-total"
    }

    fn severity(&self) -> Severity {
        Severity::Soft
    }

    fn description(&self) -> String {
        "the stated total cost should equal the hotel plus all activity costs".into()
    }

    fn check(&self, gene: &TravelGene) -> Vec<ConstraintViolation> {
        let computed = gene.computed_total();
        if (gene.total_cost.0 - computed.0).abs() <= 1 {
            return Vec::new();
        }
        vec![ConstraintViolation {
            constraint_id: self.id().into(),
            severity: Severity::Soft,
            message: format!("stated total ¥{} but items add up to ¥{computed}", gene.total_cost),
            measured: Some(gene.total_cost.0 as f64 / 100.0),
            limit: Some(computed.0 as f64 / 100.0),
            penalty: self.penalty,
        }]
    }
}

/// Hard budget cap, hard day count, soft stated-total consistency.
pub fn travel_constraints(budget: Money, days: u32) -> Vec<Box<dyn ConstraintSpec<TravelGene>>> {
    with_penalties(
        budget,
        days,
        Severity::Hard.default_penalty(),
        Severity::Hard.default_penalty(),
        Severity::Soft.default_penalty(),
    )
}

fn with_penalties(
    budget: Money,
    days: u32,
    budget_p: f64,
    days_p: f64,
    total_p: f64,
) -> Vec<Box<dyn ConstraintSpec<TravelGene>>> {
    vec![
        Box::new(BudgetCap { budget, penalty: budget_p }),
        Box::new(DayCount { days, penalty: days_p }),
        Box::new(StatedTotal { penalty: total_p }),
    ]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TravelParams {
    destination: String,
    budget: Money,
    days: u32,
    #[serde(default)]
    catalog: Option<TravelCatalog>,
}

const TEMPLATES: &[(&str, &str)] = &[
    ("manifest.json", include_str!("../../../../tasks/travel/templates/manifest.json")),
    ("generate_direct.txt", include_str!("../../../../tasks/travel/templates/generate_direct.txt")),
    ("generate_budget_first.txt", include_str!("../../../../tasks/travel/templates/generate_budget_first.txt")),
    ("generate_themed.txt", include_str!("../../../../tasks/travel/templates/generate_themed.txt")),
    ("crossover.txt", include_str!("../../../../tasks/travel/templates/crossover.txt")),
    ("mutation.txt", include_str!("../../../../tasks/travel/templates/mutation.txt")),
    ("evaluation.txt", include_str!("../../../../tasks/travel/templates/evaluation.txt")),
    ("repair.txt", include_str!("../../../../tasks/travel/templates/repair.txt")),
];

/// The shipped travel task with the given destination, budget and length.
pub fn task(destination: &str, budget: Money, days: u32) -> TaskDef<TravelGene> {
    TaskDef {
        description: format!(
            "Generate a {days}-day trip itinerary for {destination} under a budget of ¥{budget}. Include a mix of cultural, historical and leisure activities, one hotel for the whole stay, each day's schedule with start times and locations, the cost of every item, and the total cost."
        ),
        system_prompt: Some("You are an expert travel planner.".into()),
        constraints: travel_constraints(budget, days),
        templates: embedded_templates(TEMPLATES),
        rubric: include_str!("../../../../tasks/travel/rubric.txt").trim_end().to_string(),
        context: TravelContext::new(destination, budget, days),
    }
}

pub(super) fn from_manifest(parts: ManifestParts) -> Result<TaskDef<TravelGene>, TaskError> {
    let p: TravelParams = parts.params()?;
    if p.budget.0 <= 0 || p.days == 0 {
        return Err(TaskError::Params("budget and days must be positive".into()));
    }
    let mut context = TravelContext::new(p.destination, p.budget, p.days);
    if let Some(catalog) = p.catalog {
        context.catalog = catalog;
    }
    let hard = Severity::Hard.default_penalty();
    Ok(TaskDef {
        constraints: with_penalties(
            p.budget,
            p.days,
            parts.penalty("budget-exceeded", hard),
            parts.penalty("day-count", hard),
            parts.penalty("stated-total", Severity::Soft.default_penalty()),
        ),
        description: parts.description,
        system_prompt: parts.system_prompt,
        templates: parts.templates,
        rubric: parts.rubric,
        context,
    })
}

fn itineraries_in(prompt: &str) -> Vec<TravelGene> {
    all_block_bodies(prompt)
        .into_iter()
        .filter_map(|body| parse_from_text(&format!("===GENE-BEGIN kind=travel v=1===\n{body}\n===GENE-END===")).ok())
        .collect()
}

const SLOT_TIMES: [&str; 5] = ["09:00", "11:30", "14:00", "16:30", "19:00"];

/// Draft the simulator writes for seed `k`: the hotel rotates with `k`, the
/// number of activities per day varies, and a few drafts overspend.
fn draft(ctx: &TravelContext, k: usize, rng: &mut ChaCha8Rng) -> TravelGene {
    let catalog = &ctx.catalog;
    let hotel = catalog
        .hotels
        .get(k % catalog.hotels.len().max(1))
        .cloned()
        .unwrap_or(Hotel { name: format!("{} Central Hotel", ctx.destination), total_cost: Money::from_units(1200) });
    let days = (0..ctx.days as usize)
        .map(|d| {
            let count = if catalog.activities.is_empty() { 0 } else { 1 + (k + d + rng.gen_range(0..3)) % 4 };
            let activities = (0..count)
                .map(|slot| {
                    let c = &catalog.activities[rng.gen_range(0..catalog.activities.len())];
                    Activity {
                        start_time: SLOT_TIMES[slot].into(),
                        location: c.location.clone(),
                        description: c.description.clone(),
                        cost: c.cost,
                    }
                })
                .collect();
            let date = ctx.start_date.checked_add_days(Days::new(d as u64)).unwrap_or(ctx.start_date);
            DayPlan { date: date.format("%Y-%m-%d").to_string(), activities }
        })
        .collect();
    TravelGene { destination: ctx.destination.clone(), num_days: ctx.days, hotel, days, total_cost: Money::ZERO }
        .with_recomputed_total()
}

/// Heuristic 1..10 rating: variety of places, balanced days, and a spend
/// that uses the budget without exceeding it.
pub fn heuristic_score(gene: &TravelGene, ctx: &TravelContext) -> f64 {
    let total = gene.computed_total();
    if total > ctx.budget || gene.days.is_empty() {
        return 2.0;
    }
    let count = gene.activity_count();
    if count == 0 {
        return 3.0;
    }
    let distinct = {
        let mut names: Vec<&str> = gene.days.iter().flat_map(|d| &d.activities).map(|a| a.location.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names.len()
    };
    let variety = distinct as f64 / count as f64;
    let per_day: Vec<usize> = gene.days.iter().map(|d| d.activities.len()).collect();
    let spread = per_day.iter().max().unwrap_or(&0) - per_day.iter().min().unwrap_or(&0);
    let balance = 1.0 - (spread as f64 / 3.0).min(1.0);
    let fullness = (count as f64 / (3.0 * gene.days.len() as f64)).min(1.0);
    let spend = total.0 as f64 / ctx.budget.0 as f64;
    let value = if spend >= 0.6 { 1.0 } else { spend / 0.6 };
    let score = 1.0 + 3.0 * variety + 2.0 * balance + 2.0 * fullness + 2.0 * value;
    (score * 10.0).round() / 10.0
}

/// Scripted stand-in for the model on the travel task.
pub fn simulator(task: &TaskDef<TravelGene>) -> ScriptedProvider {
    let ctx = Arc::new(task.context.clone());

    let gen_ctx = ctx.clone();
    let generate = move |req: &CompletionRequest, rng: &mut ChaCha8Rng| {
        let k = candidate_index(&req.joined_content()).unwrap_or(0);
        format!("Here is a plan for your trip.\n\n{}", to_text(&draft(&gen_ctx, k, rng)))
    };

    let crossover =
        |req: &CompletionRequest, rng: &mut ChaCha8Rng| match itineraries_in(&req.joined_content()).as_slice() {
            [a, b, ..] => {
                let child = a.structural_crossover(b, rng).expect("travel crossover is total");
                format!("I kept the strongest days of both plans.\n\n{}", to_text(&child))
            }
            _ => "I need two itineraries to combine.".to_string(),
        };

    let mut_ctx = ctx.clone();
    let mutate =
        move |req: &CompletionRequest, rng: &mut ChaCha8Rng| match itineraries_in(&req.joined_content()).first() {
            Some(g) => {
                let m = g.structural_mutate(&mut_ctx, rng);
                format!("I swapped one activity.\n\n{}", to_text(&m.gene.with_recomputed_total()))
            }
            None => "I could not find the itinerary to modify.".to_string(),
        };

    let eval_ctx = ctx.clone();
    let evaluate =
        move |req: &CompletionRequest, _: &mut ChaCha8Rng| match itineraries_in(&req.joined_content()).first() {
            Some(g) => format!(
                "The plan spends ¥{} of ¥{} across {} activities.\nSCORE: {:.1}",
                g.computed_total(),
                eval_ctx.budget,
                g.activity_count(),
                heuristic_score(g, &eval_ctx)
            ),
            None => "There is no itinerary to rate.".to_string(),
        };

    let repair = |req: &CompletionRequest, _: &mut ChaCha8Rng| match itineraries_in(&req.joined_content()).first() {
        Some(g) => to_text(g),
        None => "I could not recover an itinerary from that reply.".to_string(),
    };

    ScriptedProvider::new(vec![
        ScriptRule::handler(Some(Purpose::Generation), None, generate),
        ScriptRule::handler(Some(Purpose::Crossover), None, crossover),
        ScriptRule::handler(Some(Purpose::Mutation), None, mutate),
        ScriptRule::handler(Some(Purpose::Evaluation), None, evaluate),
        ScriptRule::handler(Some(Purpose::Repair), None, repair),
    ])
}
