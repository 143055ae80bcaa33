//! Report envelope: deterministic given the problem file and seed; only the
//! `timings` field varies between runs.

use serde::Serialize;

#[derive(Clone, Debug, Default, Serialize)]
pub struct Timings {
    pub total_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub command: String,
    pub seed: u64,
    /// Echo of the problem file as parsed.
    pub config: serde_json::Value,
    pub results: serde_json::Value,
    pub warnings: Vec<String>,
    pub timings: Timings,
}

impl Report {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Report {
            command: command.to_string(),
            seed,
            config,
            results: serde_json::Value::Null,
            warnings: Vec::new(),
            timings: Timings::default(),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    /// Serialization with timings zeroed: the byte-deterministic body.
    pub fn deterministic_body(&self) -> String {
        let mut clone = self.clone();
        clone.timings = Timings::default();
        serde_json::to_string_pretty(&clone).expect("report serialization")
    }
}
