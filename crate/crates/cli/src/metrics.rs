use serde::{Deserialize, Serialize};

use mgbrnn::training::MethodMetrics;

/// Contents of every `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub scenario: String,
    pub seed: u64,
    pub methods: Vec<MethodEntry>,
}

/// A method's scores, or why it could not run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MethodEntry {
    Scored(MethodMetrics),
    Failed { name: String, error: String },
}

impl MethodEntry {
    pub fn name(&self) -> &str {
        match self {
            MethodEntry::Scored(m) => &m.name,
            MethodEntry::Failed { name, .. } => name,
        }
    }

    pub fn scored(&self) -> Option<&MethodMetrics> {
        match self {
            MethodEntry::Scored(m) => Some(m),
            MethodEntry::Failed { .. } => None,
        }
    }
}

impl MetricsFile {
    pub fn get(&self, name: &str) -> Option<&MethodEntry> {
        self.methods.iter().find(|m| m.name() == name)
    }

    /// Plain-text table for the terminal.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<14} {:>10} {:>12} {:>14}\n",
            "method", "MSE [dB]", "RMSE", "RMSE (pos)"
        );
        for m in &self.methods {
            out += &match m {
                MethodEntry::Scored(s) => format!(
                    "{:<14} {:>10.3} {:>12.5} {:>14.5}\n",
                    s.name, s.mse_db, s.rmse_full, s.rmse_position
                ),
                MethodEntry::Failed { name, error } => format!("{name:<14} failed: {error}\n"),
            };
        }
        out
    }
}
