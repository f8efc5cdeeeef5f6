pub mod cli;
pub mod engine;
pub mod evaluation;
pub mod gene;
pub mod provider;
pub mod tasks;
pub mod telemetry;
pub mod templating;
