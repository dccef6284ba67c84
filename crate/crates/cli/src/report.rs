//! Run reports: one JSON document per command with an explicit pass/fail
//! entry for every invariant the command evaluated.

use serde::Serialize;

/// One evaluated invariant. `pass` is the verdict of comparing `value`
/// against `threshold` in the direction the invariant requires.
#[derive(Debug, Clone, Serialize)]
pub struct InvariantEntry {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl InvariantEntry {
    /// `value <= threshold`.
    pub fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        InvariantEntry {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
        }
    }

    /// `value >= threshold`.
    pub fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        InvariantEntry {
            name: name.into(),
            value,
            threshold,
            pass: value >= threshold,
        }
    }
}

/// Report emitted by every command.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    /// SHA-256 of the instance file bytes.
    pub instance_digest: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp_unix: Option<u64>,
    pub results: serde_json::Value,
    pub invariants: Vec<InvariantEntry>,
    pub pass: bool,
}

impl RunReport {
    pub fn new(
        command: &str,
        digest: String,
        seed: u64,
        with_timestamp: bool,
        results: serde_json::Value,
        invariants: Vec<InvariantEntry>,
    ) -> Self {
        let pass = invariants.iter().all(|e| e.pass);
        RunReport {
            command: command.into(),
            instance_digest: digest,
            seed,
            timestamp_unix: if with_timestamp {
                Some(
                    std::time::SystemTime::now()
                        .duration_since(std::time::UNIX_EPOCH)
                        .map(|d| d.as_secs())
                        .unwrap_or(0),
                )
            } else {
                None
            },
            results,
            invariants,
            pass,
        }
    }
}
