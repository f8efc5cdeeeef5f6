use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evaluation::{Aggregation, ConstraintMode, EvalSettings};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    #[default]
    Tournament,
    Rank,
}

/// Evolutionary hyperparameters. Every field has a default, so a config file
/// only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub population_size: usize,
    pub elite_count: usize,
    pub selection: SelectionMethod,
    pub tournament_size: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub max_generations: u32,
    /// Stop once the best normalized fitness reaches this value.
    pub fitness_threshold: Option<f64>,
    /// Stop when the best fitness has not improved over this many generations.
    pub stagnation_window: Option<u32>,
    pub eval_samples: u32,
    pub aggregation: Aggregation,
    pub constraint_mode: ConstraintMode,
    pub max_parse_retries: u32,
    pub repair_enabled: bool,
    /// Fill the first offspring slots with mutated copies of the elites.
    pub mutate_elites: bool,
    pub seed: u64,
    pub concurrency: usize,
    /// Temperature for generation, crossover, mutation and repair calls.
    pub temperature: f64,
    pub eval_temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            population_size: 12,
            elite_count: 2,
            selection: SelectionMethod::Tournament,
            tournament_size: 3,
            crossover_rate: 0.9,
            mutation_rate: 0.3,
            max_generations: 8,
            fitness_threshold: None,
            stagnation_window: None,
            eval_samples: 1,
            aggregation: Aggregation::Mean,
            constraint_mode: ConstraintMode::Filter,
            max_parse_retries: 2,
            repair_enabled: true,
            mutate_elites: false,
            seed: 0,
            concurrency: 4,
            temperature: 0.9,
            eval_temperature: 0.0,
            max_output_tokens: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid engine configuration: {0}")]
pub struct ConfigError(pub String);

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError(m));
        if self.population_size < 2 {
            return fail(format!("population_size must be at least 2 (got {})", self.population_size));
        }
        if self.elite_count >= self.population_size {
            return fail(format!(
                "elite_count ({}) must be smaller than population_size ({})",
                self.elite_count, self.population_size
            ));
        }
        if self.selection == SelectionMethod::Tournament && !(2..=self.population_size).contains(&self.tournament_size)
        {
            return fail(format!(
                "tournament_size must be between 2 and population_size (got {})",
                self.tournament_size
            ));
        }
        for (name, rate) in [("crossover_rate", self.crossover_rate), ("mutation_rate", self.mutation_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return fail(format!("{name} must be within [0, 1] (got {rate})"));
            }
        }
        if self.max_generations < 1 {
            return fail("max_generations must be at least 1".into());
        }
        if let Some(t) = self.fitness_threshold {
            if !(0.0..=1.0).contains(&t) {
                return fail(format!("fitness_threshold is a normalized score within [0, 1] (got {t})"));
            }
        }
        if self.stagnation_window == Some(0) {
            return fail("stagnation_window must be at least 1".into());
        }
        if self.eval_samples < 1 {
            return fail("eval_samples must be at least 1".into());
        }
        if self.concurrency < 1 {
            return fail("concurrency must be at least 1".into());
        }
        for (name, t) in [("temperature", self.temperature), ("eval_temperature", self.eval_temperature)] {
            if !(0.0..=2.0).contains(&t) {
                return fail(format!("{name} must be within [0, 2] (got {t})"));
            }
        }
        if self.max_output_tokens == 0 {
            return fail("max_output_tokens must be positive".into());
        }
        Ok(())
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            samples: self.eval_samples,
            mode: self.constraint_mode,
            aggregation: self.aggregation,
            temperature: self.eval_temperature,
            max_output_tokens: self.max_output_tokens,
        }
    }

    /// Hash of everything that influences results. The concurrency limit is
    /// left out because it does not.
    pub fn digest(&self, task_digest: &str) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value.as_object_mut().expect("config is an object").remove("concurrency");
        let mut h = Sha256::new();
        h.update(task_digest.as_bytes());
        h.update([0]);
        h.update(value.to_string().as_bytes());
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        EngineConfig::default().validate().unwrap();
    }

    #[test]
    fn elites_must_leave_room_for_offspring() {
        let c = EngineConfig { population_size: 4, elite_count: 4, ..Default::default() };
        assert!(c.validate().unwrap_err().0.contains("elite_count"));
        let c = EngineConfig { population_size: 2, elite_count: 1, tournament_size: 2, ..Default::default() };
        c.validate().unwrap();
    }

    #[test]
    fn tournament_size_bounded_by_population() {
        let c = EngineConfig { population_size: 4, tournament_size: 5, ..Default::default() };
        assert!(c.validate().is_err());
        let c = EngineConfig {
            population_size: 4,
            tournament_size: 5,
            selection: SelectionMethod::Rank,
            ..Default::default()
        };
        c.validate().unwrap();
    }

    #[test]
    fn rates_and_counts() {
        assert!(EngineConfig { mutation_rate: 1.5, ..Default::default() }.validate().is_err());
        assert!(EngineConfig { max_generations: 0, ..Default::default() }.validate().is_err());
        assert!(EngineConfig { stagnation_window: Some(0), ..Default::default() }.validate().is_err());
        assert!(EngineConfig { eval_samples: 0, ..Default::default() }.validate().is_err());
        assert!(EngineConfig { concurrency: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn digest_ignores_concurrency_only() {
        let a = EngineConfig::default();
        let b = EngineConfig { concurrency: 8, ..Default::default() };
        let c = EngineConfig { seed: 1, ..Default::default() };
        assert_eq!(a.digest("t"), b.digest("t"));
        assert_ne!(a.digest("t"), c.digest("t"));
        assert_ne!(a.digest("t"), a.digest("u"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<EngineConfig>(r#"{"population_size": 4, "elites": 1}"#).is_err());
        let c: EngineConfig = serde_json::from_str(r#"{"population_size": 4}"#).unwrap();
        assert_eq!(c.elite_count, 2);
    }
}
