//! Autoregressive categorical policy over the token vocabulary.
//!
//! The default head is linear-softmax over sparse binary context features:
//! `logits = W^T phi + b`, with grammar masking applied before the softmax.
//! A one-hidden-layer tanh variant is available through [`PolicyConfig::hidden_units`].
//! Every log-probability is exact and every gradient is analytic, so both can
//! be checked against finite differences over all parameters.

use crate::env::{replay, EnvConfig, EnvError, Observation, PhaseKind, Task};
use crate::token::{Mask, Token, VOCAB_SIZE};
use crate::traj::Trajectory;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const V: usize = VOCAB_SIZE;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("every token is masked in this state")]
    AllMasked,
    #[error("parameter length {found} does not match shape ({expected})")]
    Shape { found: usize, expected: usize },
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
    #[error("checkpoint sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Number of most recent tokens encoded as one-hots.
    pub context_window: usize,
    /// Width of the optional tanh hidden layer; 0 selects the linear head.
    pub hidden_units: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { context_window: 4, hidden_units: 0 }
    }
}

/// Sorted indices of the active (value 1) features.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Features(pub Vec<u32>);

impl Features {
    pub fn dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for &i in &self.0 {
            out[i as usize] = 1.0;
        }
        out
    }
}

/// Maps an observation to binary features:
/// recent-token one-hots, phase, register digits, remaining-budget bucket,
/// recalled chain step, answer copy digit and expression length bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Featurizer {
    pub context_window: usize,
}

impl Featurizer {
    const PHASE: usize = 3;
    const REGISTER: usize = 21;
    const BUDGET: usize = 4;
    const RECALL: usize = 14;
    const COPY: usize = 10;
    const EXPR: usize = 4;

    pub fn new(context_window: usize) -> Self {
        Featurizer { context_window }
    }

    pub fn dim(&self) -> usize {
        self.context_window * V + Self::PHASE + Self::REGISTER + Self::BUDGET + Self::RECALL + Self::COPY + Self::EXPR
    }

    /// Feature indices of the remaining-budget bucket.
    pub fn budget_features(&self) -> std::ops::Range<usize> {
        let start = self.context_window * V + Self::PHASE + Self::REGISTER;
        start..start + Self::BUDGET
    }

    pub fn budget_bucket(remaining: u32) -> usize {
        match remaining {
            0 => 0,
            1..=2 => 1,
            3..=8 => 2,
            _ => 3,
        }
    }

    pub fn features(&self, obs: &Observation<'_>) -> Features {
        let mut idx = Vec::with_capacity(self.context_window + 8);
        for (slot, t) in obs.context.iter().rev().take(self.context_window).enumerate() {
            idx.push((slot * V + t.id()) as u32);
        }
        let mut base = self.context_window * V;
        let mut push = |offset: usize, width: usize, base: &mut usize| {
            debug_assert!(offset < width);
            idx.push((*base + offset) as u32);
        };
        let phase = match obs.phase {
            PhaseKind::Reasoning => 0,
            PhaseKind::Call => 1,
            PhaseKind::Answer => 2,
        };
        push(phase, Self::PHASE, &mut base);
        base += Self::PHASE;
        match obs.register {
            Some(v) => {
                push((v / 10) as usize, 10, &mut base);
                push(10 + (v % 10) as usize, Self::REGISTER, &mut base);
            }
            None => push(20, Self::REGISTER, &mut base),
        }
        base += Self::REGISTER;
        push(Self::budget_bucket(obs.remaining_budget), Self::BUDGET, &mut base);
        base += Self::BUDGET;
        if let Some(op) = obs.recall.op {
            push(op.index(), Self::RECALL, &mut base);
        }
        if let Some(a) = obs.recall.operand {
            push(3 + a as usize, Self::RECALL, &mut base);
        }
        if obs.recall.complete {
            push(13, Self::RECALL, &mut base);
        }
        base += Self::RECALL;
        if let Some(dg) = obs.copy_digit {
            push(dg as usize, Self::COPY, &mut base);
        }
        base += Self::COPY;
        push(obs.expr_ops.min(3), Self::EXPR, &mut base);
        idx.sort_unstable();
        Features(idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub features: usize,
    pub vocab: usize,
    pub hidden: usize,
}

impl PolicyShape {
    pub fn num_params(&self) -> usize {
        if self.hidden == 0 {
            self.features * self.vocab + self.vocab
        } else {
            self.features * self.hidden + self.hidden + self.hidden * self.vocab + self.vocab
        }
    }
}

/// Flat parameter vector. Linear layout: `W[f][v]` row-major then `b[v]`.
/// Hidden layout: `W1[f][h]`, `b1[h]`, `W2[h][v]`, `b2[v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub shape: PolicyShape,
    pub theta: Vec<f64>,
}

impl PolicyParams {
    /// Linear heads start at zero (uniform over legal tokens); hidden heads
    /// get small seeded weights to break symmetry.
    pub fn init(cfg: &PolicyConfig, seed: u64) -> Self {
        let shape = PolicyShape {
            features: Featurizer::new(cfg.context_window).dim(),
            vocab: V,
            hidden: cfg.hidden_units,
        };
        let mut theta = vec![0.0; shape.num_params()];
        if shape.hidden > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = 0.3;
            let w1 = shape.features * shape.hidden;
            for x in theta[..w1].iter_mut() {
                *x = rng.random_range(-scale..scale);
            }
            let w2 = w1 + shape.hidden;
            for x in theta[w2..w2 + shape.hidden * V].iter_mut() {
                *x = rng.random_range(-scale..scale);
            }
        }
        PolicyParams { shape, theta }
    }

    pub fn from_theta(shape: PolicyShape, theta: Vec<f64>) -> Result<Self, PolicyError> {
        if theta.len() != shape.num_params() {
            return Err(PolicyError::Shape { found: theta.len(), expected: shape.num_params() });
        }
        if let Some(i) = theta.iter().position(|x| !x.is_finite()) {
            return Err(PolicyError::NonFinite(i));
        }
        Ok(PolicyParams { shape, theta })
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    fn logits(&self, features: &Features, hidden_out: &mut Vec<f64>) -> [f64; V] {
        let s = self.shape;
        let mut logits = [0.0; V];
        if s.hidden == 0 {
            let bias = s.features * V;
            logits.copy_from_slice(&self.theta[bias..bias + V]);
            for &f in &features.0 {
                let row = &self.theta[f as usize * V..(f as usize + 1) * V];
                for (l, w) in logits.iter_mut().zip(row) {
                    *l += w;
                }
            }
        } else {
            let h = s.hidden;
            let b1 = s.features * h;
            let w2 = b1 + h;
            let b2 = w2 + h * V;
            hidden_out.clear();
            hidden_out.extend_from_slice(&self.theta[b1..b1 + h]);
            for &f in &features.0 {
                let row = &self.theta[f as usize * h..(f as usize + 1) * h];
                for (a, w) in hidden_out.iter_mut().zip(row) {
                    *a += w;
                }
            }
            for a in hidden_out.iter_mut() {
                *a = a.tanh();
            }
            logits.copy_from_slice(&self.theta[b2..b2 + V]);
            for (j, a) in hidden_out.iter().enumerate() {
                let row = &self.theta[w2 + j * V..w2 + (j + 1) * V];
                for (l, w) in logits.iter_mut().zip(row) {
                    *l += a * w;
                }
            }
        }
        logits
    }

    /// Adds `d(sum_v dlogits[v] * logits[v]) / d(theta)` into `grad`.
    fn backward(&self, features: &Features, hidden: &[f64], dlogits: &[f64; V], grad: &mut [f64]) {
        let s = self.shape;
        if s.hidden == 0 {
            let bias = s.features * V;
            for (g, d) in grad[bias..bias + V].iter_mut().zip(dlogits) {
                *g += d;
            }
            for &f in &features.0 {
                let row = &mut grad[f as usize * V..(f as usize + 1) * V];
                for (g, d) in row.iter_mut().zip(dlogits) {
                    *g += d;
                }
            }
        } else {
            let h = s.hidden;
            let b1 = s.features * h;
            let w2 = b1 + h;
            let b2 = w2 + h * V;
            for (g, d) in grad[b2..b2 + V].iter_mut().zip(dlogits) {
                *g += d;
            }
            let mut dpre = vec![0.0; h];
            for (j, a) in hidden.iter().enumerate() {
                let wrow = &self.theta[w2 + j * V..w2 + (j + 1) * V];
                let mut dh = 0.0;
                for v in 0..V {
                    grad[w2 + j * V + v] += a * dlogits[v];
                    dh += wrow[v] * dlogits[v];
                }
                dpre[j] = dh * (1.0 - a * a);
            }
            for (g, d) in grad[b1..b1 + h].iter_mut().zip(&dpre) {
                *g += d;
            }
            for &f in &features.0 {
                let row = &mut grad[f as usize * h..(f as usize + 1) * h];
                for (g, d) in row.iter_mut().zip(&dpre) {
                    *g += d;
                }
            }
        }
    }

    pub fn save(&self, path: &Path, context_window: usize, config_hash: &str) -> Result<(), PolicyError> {
        let mut bytes = Vec::with_capacity(self.theta.len() * 8);
        for x in &self.theta {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&bytes)?;
        let sidecar = format!(
            "features={}\nvocab={}\nhidden={}\ncontext_window={}\nparams={}\nconfig_hash={}\n",
            self.shape.features,
            self.shape.vocab,
            self.shape.hidden,
            context_window,
            self.theta.len(),
            config_hash
        );
        std::fs::write(sidecar_path(path), sidecar)?;
        Ok(())
    }

    /// Loads a checkpoint; returns the parameters and the recorded context window.
    pub fn load(path: &Path) -> Result<(Self, usize), PolicyError> {
        let text = std::fs::read_to_string(sidecar_path(path))?;
        let field = |key: &str| -> Result<usize, PolicyError> {
            text.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| PolicyError::Sidecar(format!("missing {key}")))?
                .trim()
                .parse()
                .map_err(|e| PolicyError::Sidecar(format!("{key}: {e}")))
        };
        let shape = PolicyShape { features: field("features")?, vocab: field("vocab")?, hidden: field("hidden")? };
        if shape.vocab != V {
            return Err(PolicyError::Sidecar(format!("vocab {} != {V}", shape.vocab)));
        }
        let k = field("context_window")?;
        if Featurizer::new(k).dim() != shape.features {
            return Err(PolicyError::Sidecar("feature dimension inconsistent with context window".into()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(PolicyError::Sidecar("binary length not a multiple of 8".into()));
        }
        let theta = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((PolicyParams::from_theta(shape, theta)?, k))
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    s.into()
}

/// Masked softmax over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    pub logits: [f64; V],
    pub mask: Mask,
    pub probs: [f64; V],
    log_norm: f64,
}

impl TokenDistribution {
    pub fn from_logits(logits: [f64; V], mask: Mask) -> Result<Self, PolicyError> {
        if mask.is_empty() {
            return Err(PolicyError::AllMasked);
        }
        let max = mask.tokens().map(|t| logits[t.id()]).fold(f64::NEG_INFINITY, f64::max);
        let mut probs = [0.0; V];
        let mut sum = 0.0;
        for t in mask.tokens() {
            let e = (logits[t.id()] - max).exp();
            probs[t.id()] = e;
            sum += e;
        }
        for p in probs.iter_mut() {
            *p /= sum;
        }
        Ok(TokenDistribution { logits, mask, probs, log_norm: max + sum.ln() })
    }

    pub fn prob(&self, t: Token) -> f64 {
        self.probs[t.id()]
    }

    /// Exact log-probability; 0 for the only legal token, -inf for masked ones.
    pub fn logprob(&self, t: Token) -> f64 {
        if !self.mask.allows(t) {
            return f64::NEG_INFINITY;
        }
        self.logits[t.id()] - self.log_norm
    }

    pub fn argmax(&self) -> Token {
        // ascending-id tie break
        let mut best = None;
        for t in self.mask.tokens() {
            match best {
                Some((_, l)) if self.logits[t.id()] <= l => {}
                _ => best = Some((t, self.logits[t.id()])),
            }
        }
        best.expect("non-empty mask").0
    }
}

/// Shannon entropy in nats over the legal support.
pub fn entropy(dist: &TokenDistribution) -> f64 {
    dist.mask
        .tokens()
        .map(|t| dist.probs[t.id()])
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

/// Per-state forward result, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub dist: TokenDistribution,
    hidden: Vec<f64>,
}

pub fn forward(params: &PolicyParams, features: &Features, mask: Mask) -> Result<Forward, PolicyError> {
    let mut hidden = Vec::new();
    let logits = params.logits(features, &mut hidden);
    Ok(Forward { dist: TokenDistribution::from_logits(logits, mask)?, hidden })
}

pub fn distribution(params: &PolicyParams, features: &Features, mask: Mask) -> Result<TokenDistribution, PolicyError> {
    forward(params, features, mask).map(|f| f.dist)
}

/// Adds `weight * d log pi(token) / d theta` into `grad`.
pub fn accumulate_logprob_grad(
    params: &PolicyParams,
    features: &Features,
    fwd: &Forward,
    token: Token,
    weight: f64,
    grad: &mut [f64],
) {
    let mut dlogits = [0.0; V];
    for t in fwd.dist.mask.tokens() {
        dlogits[t.id()] = -weight * fwd.dist.probs[t.id()];
    }
    dlogits[token.id()] += weight;
    params.backward(features, &fwd.hidden, &dlogits, grad);
}

/// Tokens kept by nucleus truncation at the given temperature, with their
/// renormalized probabilities, in descending probability order (ties by id).
pub fn nucleus(dist: &TokenDistribution, temperature: f64, top_p: f64) -> Vec<(Token, f64)> {
    assert!(temperature > 0.0, "temperature must be positive");
    assert!(top_p > 0.0 && top_p <= 1.0, "top_p must lie in (0, 1]");
    let scaled: [f64; V] = std::array::from_fn(|i| dist.logits[i] / temperature);
    let tempered = TokenDistribution::from_logits(scaled, dist.mask).expect("mask checked at construction");
    let mut order: Vec<(Token, f64)> = dist.mask.tokens().map(|t| (t, tempered.probs[t.id()])).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cum = 0.0;
    let mut keep = 0;
    for (_, p) in &order {
        cum += p;
        keep += 1;
        if cum >= top_p {
            break;
        }
    }
    order.truncate(keep);
    let mass: f64 = order.iter().map(|x| x.1).sum();
    for x in order.iter_mut() {
        x.1 /= mass;
    }
    order
}

pub fn sample_token<R: Rng + ?Sized>(dist: &TokenDistribution, temperature: f64, top_p: f64, rng: &mut R) -> Token {
    if temperature == 1.0 && top_p >= 1.0 {
        // exact categorical draw in id order
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut last = None;
        for t in dist.mask.tokens() {
            cum += dist.probs[t.id()];
            last = Some(t);
            if u < cum {
                return t;
            }
        }
        return last.expect("non-empty mask");
    }
    let support = nucleus(dist, temperature, top_p);
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for &(t, p) in &support {
        cum += p;
        if u < cum {
            return t;
        }
    }
    support.last().expect("non-empty support").0
}

/// A policy decision recovered from a trajectory: the context features, the
/// grammar mask and the token the policy emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub features: Features,
    pub mask: Mask,
    pub token: Token,
}

/// Replays a trajectory and extracts one [`Decision`] per policy token.
pub fn decisions(traj: &Trajectory, featurizer: &Featurizer, env: &EnvConfig) -> Result<Vec<Decision>, PolicyError> {
    let task = Task::from_prompt(traj.task_id, &traj.prompt_tokens)?;
    Ok(replay(traj, &task, *env, |obs, mask, token| Decision { features: featurizer.features(obs), mask, token })?)
}

/// `log pi(o_t | context)` for every policy token of a trajectory.
pub fn decision_logprobs(params: &PolicyParams, decisions: &[Decision]) -> Result<Vec<f64>, PolicyError> {
    decisions.iter().map(|d| Ok(distribution(params, &d.features, d.mask)?.logprob(d.token))).collect()
}

pub fn sequence_logprob(
    params: &PolicyParams,
    featurizer: &Featurizer,
    env: &EnvConfig,
    traj: &Trajectory,
) -> Result<Vec<f64>, PolicyError> {
    decision_logprobs(params, &decisions(traj, featurizer, env)?)
}

/// Gradient of `sum_t log pi(o_t | context)`.
pub fn grad_decision_logprob(params: &PolicyParams, decisions: &[Decision]) -> Result<Vec<f64>, PolicyError> {
    let mut grad = vec![0.0; params.len()];
    for d in decisions {
        let fwd = forward(params, &d.features, d.mask)?;
        accumulate_logprob_grad(params, &d.features, &fwd, d.token, 1.0, &mut grad);
    }
    Ok(grad)
}

pub fn grad_sequence_logprob(
    params: &PolicyParams,
    featurizer: &Featurizer,
    env: &EnvConfig,
    traj: &Trajectory,
) -> Result<Vec<f64>, PolicyError> {
    grad_decision_logprob(params, &decisions(traj, featurizer, env)?)
}
