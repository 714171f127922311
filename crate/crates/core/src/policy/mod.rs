//! Decision policies: the `Decide` step of an episode.
//!
//! A policy sees the rendered instruction and a read-only view of the path
//! and returns one tool call. Local policies are pure functions of that view
//! and the rollout seed, which makes batches reproducible.

mod decision;
mod greedy;
mod remote;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::component::ComponentRef;
use crate::episode::InferencePath;
use crate::tools::Action;

pub use decision::{parse_tool_call, validate_params, DecidedAction, Decision, Violation};
pub use greedy::GreedyPolicy;
pub use remote::{RemoteConfig, RemotePolicy, ENDPOINT_ENV, KEY_ENV};
pub use scripted::{MockPolicy, MockScript, OraclePolicy, UniformRandomPolicy};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("policy transport failed: {message}")]
    Transport { message: String, retryable: bool },
    #[error("policy configuration: {0}")]
    Config(String),
}

/// Read-only view handed to a policy at each step.
#[derive(Debug, Clone, Copy)]
pub struct PolicyContext<'a> {
    pub path: &'a InferencePath,
    pub seed: u64,
    pub allowed: &'a [Action],
    /// Decisions remaining, including this one.
    pub depth_left: usize,
}

pub trait Policy: Send + Sync {
    fn decide(&self, instruction: &str, ctx: &PolicyContext<'_>) -> Result<Decision, PolicyError>;
}

/// Deterministic per-decision randomness keyed by seed, case and step.
pub(crate) fn step_rng(ctx: &PolicyContext<'_>, salt: u64) -> ChaCha8Rng {
    // FNV-1a over the case id keeps streams stable across platforms.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in ctx.path.case.trace_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let step = ctx.path.steps.len() as u64;
    ChaCha8Rng::seed_from_u64(ctx.seed ^ h.rotate_left(17) ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
}

/// Serializable description of a policy, used in run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyDescriptor {
    Mock { script: String },
    Greedy { theta: f64, error_first: bool, temperature: f64 },
    Oracle,
    UniformRandom,
    Remote(RemoteConfig),
}

impl Default for PolicyDescriptor {
    fn default() -> Self {
        PolicyDescriptor::Greedy { theta: 0.5, error_first: true, temperature: 0.0 }
    }
}

/// Inputs some policies need at construction time.
#[derive(Debug, Clone, Default)]
pub struct PolicyResources {
    /// Ground truth per case id, for the oracle.
    pub truths: BTreeMap<String, ComponentRef>,
    /// Candidate universe, for the uniform random baseline.
    pub components: Vec<ComponentRef>,
}

impl PolicyDescriptor {
    pub fn build(&self, res: &PolicyResources) -> Result<Box<dyn Policy>, PolicyError> {
        Ok(match self {
            PolicyDescriptor::Mock { script } => Box::new(MockPolicy::new(script.parse()?)),
            PolicyDescriptor::Greedy { theta, error_first, temperature } => {
                if !(0.0..=1.0).contains(theta) || !(*temperature >= 0.0) {
                    return Err(PolicyError::Config(format!("greedy needs theta in [0,1] and temperature >= 0, got {theta}, {temperature}")));
                }
                Box::new(GreedyPolicy { theta: *theta, error_first: *error_first, temperature: *temperature })
            }
            PolicyDescriptor::Oracle => Box::new(OraclePolicy::new(res.truths.clone())),
            PolicyDescriptor::UniformRandom => {
                if res.components.is_empty() {
                    return Err(PolicyError::Config("uniform random policy needs a non-empty component list".into()));
                }
                Box::new(UniformRandomPolicy::new(res.components.clone()))
            }
            PolicyDescriptor::Remote(cfg) => Box::new(RemotePolicy::new(cfg.clone())?),
        })
    }

    /// Sets the sampling temperature where the policy has one.
    pub fn with_temperature(mut self, t: f64) -> Self {
        match &mut self {
            PolicyDescriptor::Greedy { temperature, .. } => *temperature = t,
            PolicyDescriptor::Remote(cfg) => cfg.temperature = t,
            _ => {}
        }
        self
    }
}

impl fmt::Display for PolicyDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyDescriptor::Mock { script } => write!(f, "mock:{script}"),
            PolicyDescriptor::Greedy { temperature, .. } if *temperature > 0.0 => write!(f, "greedy@{temperature}"),
            PolicyDescriptor::Greedy { .. } => f.write_str("greedy"),
            PolicyDescriptor::Oracle => f.write_str("oracle"),
            PolicyDescriptor::UniformRandom => f.write_str("random"),
            PolicyDescriptor::Remote(cfg) => write!(f, "remote:{}", cfg.model),
        }
    }
}

impl FromStr for PolicyDescriptor {
    type Err = PolicyError;

    /// `greedy`, `greedy@T`, `oracle`, `random`, `mock:<script>`,
    /// `remote` or `remote:<model>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(script) = s.strip_prefix("mock:") {
            script.parse::<MockScript>()?;
            return Ok(PolicyDescriptor::Mock { script: script.to_string() });
        }
        if let Some(rest) = s.strip_prefix("remote") {
            let mut cfg = RemoteConfig::from_env();
            if let Some(model) = rest.strip_prefix(':') {
                cfg.model = model.to_string();
            } else if !rest.is_empty() {
                return Err(PolicyError::Config(format!("unknown policy `{s}`")));
            }
            return Ok(PolicyDescriptor::Remote(cfg));
        }
        if let Some(t) = s.strip_prefix("greedy@") {
            let t: f64 = t.parse().map_err(|_| PolicyError::Config(format!("bad temperature in `{s}`")))?;
            return Ok(PolicyDescriptor::default().with_temperature(t));
        }
        match s {
            "greedy" => Ok(PolicyDescriptor::default()),
            "oracle" => Ok(PolicyDescriptor::Oracle),
            "random" => Ok(PolicyDescriptor::UniformRandom),
            other => Err(PolicyError::Config(format!("unknown policy `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_strings_round_trip() {
        for s in ["greedy", "greedy@0.7", "oracle", "random", "mock:print-entry", "mock:trace-entry", "mock:random", "remote:m1"] {
            let d: PolicyDescriptor = s.parse().unwrap();
            assert_eq!(d.to_string(), s);
            let json = serde_json::to_string(&d).unwrap();
            assert_eq!(serde_json::from_str::<PolicyDescriptor>(&json).unwrap(), d);
        }
        assert!("mock:nope".parse::<PolicyDescriptor>().is_err());
        assert!("gready".parse::<PolicyDescriptor>().is_err());
    }
}
