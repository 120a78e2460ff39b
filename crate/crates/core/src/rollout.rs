//! Sampling whole episodes from a policy.

use crate::env::{EnvConfig, EnvOutcome, Episode, Task};
use crate::policy::{entropy, forward, sample_token, Decision, Featurizer, PolicyError, PolicyParams};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
}

impl SamplingConfig {
    pub const EXACT: SamplingConfig = SamplingConfig { temperature: 1.0, top_p: 1.0 };
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self::EXACT
    }
}

/// A sampled episode with the per-decision data training needs.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub outcome: EnvOutcome,
    pub decisions: Vec<Decision>,
    /// Entropy of the untempered policy distribution at each decision.
    pub entropies: Vec<f64>,
}

/// Runs one episode. Stored behavior log-probabilities are those of the
/// untempered masked policy, which equals the sampling distribution when
/// `sampling` is [`SamplingConfig::EXACT`].
pub fn rollout<R: Rng + ?Sized>(
    params: &PolicyParams,
    featurizer: &Featurizer,
    task: &Task,
    env: EnvConfig,
    sampling: SamplingConfig,
    rng: &mut R,
) -> Result<Rollout, PolicyError> {
    let mut ep = Episode::new(task, env);
    let mut decisions = Vec::new();
    let mut entropies = Vec::new();
    while !ep.is_done() {
        let features = featurizer.features(&ep.observation());
        let mask = ep.legal_mask();
        let fwd = forward(params, &features, mask)?;
        let token = sample_token(&fwd.dist, sampling.temperature, sampling.top_p, rng);
        ep.step(token, fwd.dist.logprob(token))?;
        entropies.push(entropy(&fwd.dist));
        decisions.push(Decision { features, mask, token });
    }
    Ok(Rollout { outcome: ep.outcome(), decisions, entropies })
}

/// Greedy (argmax) episode.
pub fn greedy_rollout(params: &PolicyParams, featurizer: &Featurizer, task: &Task, env: EnvConfig) -> Result<EnvOutcome, PolicyError> {
    let mut ep = Episode::new(task, env);
    while !ep.is_done() {
        let features = featurizer.features(&ep.observation());
        let dist = forward(params, &features, ep.legal_mask())?.dist;
        let token = dist.argmax();
        ep.step(token, dist.logprob(token))?;
    }
    Ok(ep.outcome())
}
