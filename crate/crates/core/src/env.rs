//! Synthetic arithmetic-chain tasks, the budgeted `last`-register sandbox and
//! the episode state machine that turns policy tokens into trajectories.

use crate::token::{Mask, Token};
use crate::traj::{Role, Step, ToolError, ToolEvent, ToolResult, Trajectory, Truncation};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MODULUS: u32 = 100;
pub const MAX_CHAIN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("chain length {0} outside [1, {MAX_CHAIN}]")]
    ChainLength(usize),
    #[error("invalid difficulty profile: {0}")]
    Profile(String),
    #[error("token {token} is not legal in phase {phase}")]
    IllegalToken { token: Token, phase: &'static str },
    #[error("episode already terminated")]
    Terminated,
    #[error("prompt does not encode a task")]
    BadPrompt,
    #[error("replay diverged from the log at step {0}")]
    ReplayMismatch(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Add, Op::Sub, Op::Mul];

    pub fn apply(self, a: u32, b: u32) -> u32 {
        match self {
            Op::Add => (a + b) % MODULUS,
            Op::Sub => (a + MODULUS - b % MODULUS) % MODULUS,
            Op::Mul => (a * b) % MODULUS,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn token(self) -> Token {
        match self {
            Op::Add => Token::PLUS,
            Op::Sub => Token::MINUS,
            Op::Mul => Token::TIMES,
        }
    }

    pub fn prompt_token(self) -> Token {
        match self {
            Op::Add => Token::OP_ADD,
            Op::Sub => Token::OP_SUB,
            Op::Mul => Token::OP_MUL,
        }
    }

    pub fn from_token(t: Token) -> Option<Op> {
        match t {
            Token::PLUS => Some(Op::Add),
            Token::MINUS => Some(Op::Sub),
            Token::TIMES => Some(Op::Mul),
            _ => None,
        }
    }

    fn from_prompt_token(t: Token) -> Option<Op> {
        match t {
            Token::OP_ADD => Some(Op::Add),
            Token::OP_SUB => Some(Op::Sub),
            Token::OP_MUL => Some(Op::Mul),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChainOp {
    pub op: Op,
    pub operand: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: u64,
    pub start_value: u8,
    pub chain: Vec<ChainOp>,
    pub answer: u8,
}

/// Left-to-right evaluation of the chain modulo 100.
pub fn evaluate_chain(start: u8, chain: &[ChainOp]) -> u8 {
    chain.iter().fold(start as u32 % MODULUS, |acc, c| c.op.apply(acc, c.operand as u32)) as u8
}

impl Task {
    pub fn new(task_id: u64, start_value: u8, chain: Vec<ChainOp>) -> Result<Task, EnvError> {
        if chain.is_empty() || chain.len() > MAX_CHAIN {
            return Err(EnvError::ChainLength(chain.len()));
        }
        let answer = evaluate_chain(start_value, &chain);
        Ok(Task { task_id, start_value, chain, answer })
    }

    pub fn len(&self) -> usize {
        self.chain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chain.is_empty()
    }

    /// `<start> s (<sep> <opname> a)*`
    pub fn prompt_tokens(&self) -> Vec<Token> {
        let mut out = vec![Token::START, Token::digit(self.start_value)];
        for c in &self.chain {
            out.extend([Token::SEP, c.op.prompt_token(), Token::digit(c.operand)]);
        }
        out
    }

    pub fn from_prompt(task_id: u64, prompt: &[Token]) -> Result<Task, EnvError> {
        let (head, rest) = prompt.split_at_checked(2).ok_or(EnvError::BadPrompt)?;
        if head[0] != Token::START || rest.len() % 3 != 0 {
            return Err(EnvError::BadPrompt);
        }
        let start = head[1].as_digit().ok_or(EnvError::BadPrompt)?;
        let chain = rest
            .chunks(3)
            .map(|c| {
                if c[0] != Token::SEP {
                    return None;
                }
                Some(ChainOp { op: Op::from_prompt_token(c[1])?, operand: c[2].as_digit()? })
            })
            .collect::<Option<Vec<_>>>()
            .ok_or(EnvError::BadPrompt)?;
        Task::new(task_id, start, chain)
    }
}

/// Controls the range of chain lengths and the values drawn for each task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DifficultyProfile {
    pub min_len: usize,
    pub max_len: usize,
    pub operand_min: u8,
    pub operand_max: u8,
    pub ops: Vec<Op>,
}

impl Default for DifficultyProfile {
    fn default() -> Self {
        DifficultyProfile { min_len: 1, max_len: MAX_CHAIN, operand_min: 2, operand_max: 9, ops: Op::ALL.to_vec() }
    }
}

impl DifficultyProfile {
    pub fn lengths(min_len: usize, max_len: usize) -> Self {
        DifficultyProfile { min_len, max_len, ..Default::default() }
    }

    pub fn hard() -> Self {
        Self::lengths(9, MAX_CHAIN)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.min_len < 1 || self.max_len > MAX_CHAIN || self.min_len > self.max_len {
            return Err(EnvError::Profile(format!("chain lengths [{}, {}]", self.min_len, self.max_len)));
        }
        if self.operand_min < 2 || self.operand_max > 9 || self.operand_min > self.operand_max {
            return Err(EnvError::Profile(format!("operands [{}, {}]", self.operand_min, self.operand_max)));
        }
        if self.ops.is_empty() {
            return Err(EnvError::Profile("no operators".into()));
        }
        Ok(())
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes several words into one seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Deterministic in `(seed, m, profile)`.
pub fn generate_task(seed: u64, m: usize, profile: &DifficultyProfile) -> Result<Task, EnvError> {
    if !(1..=MAX_CHAIN).contains(&m) {
        return Err(EnvError::ChainLength(m));
    }
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, m as u64]));
    let start = rng.random_range(profile.operand_min..=profile.operand_max);
    let chain = (0..m)
        .map(|_| ChainOp {
            op: profile.ops[rng.random_range(0..profile.ops.len())],
            operand: rng.random_range(profile.operand_min..=profile.operand_max),
        })
        .collect();
    let task = Task::new(mix_seed(&[seed, m as u64, 0x7a5c]), start, chain)?;
    assert_eq!(task.answer, evaluate_chain(task.start_value, &task.chain));
    Ok(task)
}

/// `n` tasks with chain lengths drawn uniformly from the profile's range.
pub fn generate_task_set(seed: u64, n: usize, profile: &DifficultyProfile) -> Result<Vec<Task>, EnvError> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x7a5e7]));
    (0..n)
        .map(|i| {
            let m = rng.random_range(profile.min_len..=profile.max_len);
            generate_task(mix_seed(&[seed, i as u64]), m, profile)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxState {
    pub last: Option<u8>,
    pub calls_used: u32,
    pub budget: u32,
}

impl SandboxState {
    pub fn new(budget: u32) -> Self {
        SandboxState { last: None, calls_used: 0, budget }
    }

    pub fn remaining(&self) -> u32 {
        self.budget.saturating_sub(self.calls_used)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetDecision {
    Allow,
    Deny,
}

pub fn enforce_budget(s: &SandboxState) -> BudgetDecision {
    if s.calls_used >= s.budget {
        BudgetDecision::Deny
    } else {
        BudgetDecision::Allow
    }
}

/// Evaluates `operand (op operand)*` left to right modulo 100, where an
/// operand is a digit literal or `<last>`. Every call consumes one unit of
/// budget, including failed ones; `last` only changes on success.
pub fn execute_tool(expr: &[Token], s: &SandboxState) -> (ToolResult, SandboxState) {
    let mut next = *s;
    next.calls_used = s.calls_used.saturating_add(1);
    let result = match evaluate_expr(expr, s.last) {
        Ok(v) => {
            next.last = Some(v);
            ToolResult::Value(v)
        }
        Err(e) => ToolResult::Error(e),
    };
    (result, next)
}

fn evaluate_expr(expr: &[Token], last: Option<u8>) -> Result<u8, ToolError> {
    // Parse first so that syntax errors win over missing state.
    enum Operand {
        Lit(u32),
        Last,
    }
    let mut operands = Vec::new();
    let mut ops = Vec::new();
    let mut i = 0;
    loop {
        match expr.get(i) {
            Some(&Token::LAST) => {
                operands.push(Operand::Last);
                i += 1;
            }
            Some(t) if t.is_digit() => {
                let mut v = 0u32;
                while let Some(d) = expr.get(i).and_then(|t| t.as_digit()) {
                    v = (v * 10 + d as u32) % MODULUS;
                    i += 1;
                }
                operands.push(Operand::Lit(v));
            }
            _ => return Err(ToolError::Parse),
        }
        match expr.get(i) {
            None => break,
            Some(&t) => {
                ops.push(Op::from_token(t).ok_or(ToolError::Parse)?);
                i += 1;
            }
        }
    }
    let value = |o: &Operand| match o {
        Operand::Lit(v) => Ok(*v),
        Operand::Last => last.map(u32::from).ok_or(ToolError::NoLast),
    };
    let mut acc = value(&operands[0])?;
    for (op, o) in ops.iter().zip(&operands[1..]) {
        acc = op.apply(acc, value(o)?);
    }
    Ok(acc as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Cap on prompt + response tokens.
    pub max_trajectory_tokens: usize,
    pub tool_budget: u32,
    /// Chance that the policy's recall of a chain step slips when the step is
    /// the second or later operation written without intervening tool feedback.
    pub slip_rate: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { max_trajectory_tokens: 256, tool_budget: 50, slip_rate: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhaseKind {
    Reasoning,
    Call,
    Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CallSlot {
    ExprStart,
    AfterOperand,
    AfterOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Reasoning,
    Call(CallSlot),
    Answer(u8),
    Done,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Reasoning => "reasoning",
            Phase::Call(_) => "call",
            Phase::Answer(_) => "answer",
            Phase::Done => "done",
        }
    }
}

/// What the policy remembers about the chain at the current position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Recall {
    pub op: Option<Op>,
    pub operand: Option<u8>,
    pub complete: bool,
}

/// Everything the featurizer may look at.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub context: &'a [Token],
    pub phase: PhaseKind,
    pub register: Option<u8>,
    pub remaining_budget: u32,
    pub recall: Recall,
    pub copy_digit: Option<u8>,
    pub expr_ops: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub terminal: bool,
    pub tool_result: Option<ToolResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvOutcome {
    pub trajectory: Trajectory,
    pub correct: bool,
    pub used_tool: bool,
}

impl EnvOutcome {
    pub fn new(task: &Task, trajectory: Trajectory) -> Self {
        let correct = trajectory.final_answer == Some(task.answer);
        let used_tool = !trajectory.tool_events.is_empty();
        EnvOutcome { trajectory, correct, used_tool }
    }
}

/// One episode: owns its sandbox and token stream.
#[derive(Debug, Clone)]
pub struct Episode<'t> {
    task: &'t Task,
    cfg: EnvConfig,
    context: Vec<Token>,
    steps: Vec<Step>,
    events: Vec<ToolEvent>,
    sandbox: SandboxState,
    phase: Phase,
    expr: Vec<Token>,
    expr_ops: usize,
    committed: usize,
    answer_digits: [u8; 2],
    final_answer: Option<u8>,
    truncated: Truncation,
}

impl<'t> Episode<'t> {
    pub fn new(task: &'t Task, cfg: EnvConfig) -> Self {
        let context = task.prompt_tokens();
        let mut ep = Episode {
            task,
            cfg,
            context,
            steps: Vec::new(),
            events: Vec::new(),
            sandbox: SandboxState::new(cfg.tool_budget),
            phase: Phase::Reasoning,
            expr: Vec::new(),
            expr_ops: 0,
            committed: 0,
            answer_digits: [0; 2],
            final_answer: None,
            truncated: Truncation::None,
        };
        ep.check_cap();
        ep
    }

    pub fn task(&self) -> &Task {
        self.task
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn sandbox(&self) -> &SandboxState {
        &self.sandbox
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    /// Legal next tokens for the policy.
    pub fn legal_mask(&self) -> Mask {
        let operand = Mask::DIGITS.with(Token::LAST).with(Token::END_CALL);
        match self.phase {
            Phase::Reasoning => Mask::of(&[Token::CALL, Token::ANSWER, Token::EOS]),
            Phase::Call(CallSlot::ExprStart) | Phase::Call(CallSlot::AfterOp) => operand,
            Phase::Call(CallSlot::AfterOperand) => Mask::OPERATORS.with(Token::END_CALL),
            Phase::Answer(n) if n < 2 => Mask::DIGITS,
            Phase::Answer(_) => Mask::of(&[Token::EOS]),
            Phase::Done => Mask::EMPTY,
        }
    }

    fn recall_item(&self, index: usize, since_feedback: usize) -> (Option<Op>, Option<u8>) {
        let Some(item) = self.task.chain.get(index) else {
            return (None, None);
        };
        if since_feedback == 0 || self.cfg.slip_rate <= 0.0 {
            return (Some(item.op), Some(item.operand));
        }
        let h = mix_seed(&[self.task.task_id, index as u64, since_feedback as u64]);
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        if u >= self.cfg.slip_rate {
            return (Some(item.op), Some(item.operand));
        }
        let h2 = splitmix64(h);
        if h2 & 1 == 0 {
            let shift = 1 + ((h2 >> 1) & 1) as usize;
            (Some(Op::ALL[(item.op.index() + shift) % 3]), Some(item.operand))
        } else {
            let up = (h2 >> 1) & 1 == 0;
            let operand = match (item.operand, up) {
                (9, true) => 8,
                (2, false) => 3,
                (a, true) => a + 1,
                (a, false) => a - 1,
            };
            (Some(item.op), Some(operand))
        }
    }

    fn recall(&self) -> Recall {
        let m = self.task.len();
        match self.phase {
            Phase::Call(slot) => {
                let pos = self.committed + self.expr_ops;
                let complete = pos >= m;
                match slot {
                    CallSlot::ExprStart => Recall {
                        op: None,
                        operand: (self.committed == 0).then_some(self.task.start_value),
                        complete,
                    },
                    CallSlot::AfterOperand => {
                        let (op, _) = self.recall_item(pos, self.expr_ops);
                        Recall { op, operand: None, complete }
                    }
                    CallSlot::AfterOp => {
                        let (_, operand) = self.recall_item(pos.wrapping_sub(1), self.expr_ops - 1);
                        Recall { op: None, operand, complete }
                    }
                }
            }
            _ => Recall { op: None, operand: None, complete: self.committed >= m },
        }
    }

    pub fn observation(&self) -> Observation<'_> {
        let phase = match self.phase {
            Phase::Reasoning | Phase::Done => PhaseKind::Reasoning,
            Phase::Call(_) => PhaseKind::Call,
            Phase::Answer(_) => PhaseKind::Answer,
        };
        let copy_digit = match (self.phase, self.sandbox.last) {
            (Phase::Answer(0), Some(v)) => Some(v / 10),
            (Phase::Answer(1), Some(v)) => Some(v % 10),
            _ => None,
        };
        Observation {
            context: &self.context,
            phase,
            register: self.sandbox.last,
            remaining_budget: self.sandbox.remaining(),
            recall: self.recall(),
            copy_digit,
            expr_ops: self.expr_ops,
        }
    }

    fn push(&mut self, step: Step) {
        self.context.push(step.token);
        self.steps.push(step);
    }

    fn check_cap(&mut self) -> bool {
        if self.phase != Phase::Done && self.context.len() >= self.cfg.max_trajectory_tokens {
            self.phase = Phase::Done;
            self.truncated = Truncation::TokenLimit;
            return true;
        }
        false
    }

    fn terminate(&mut self, truncated: Truncation) {
        self.phase = Phase::Done;
        self.truncated = truncated;
    }

    /// Appends one policy token and advances the environment.
    pub fn step(&mut self, token: Token, logprob: f64) -> Result<Transition, EnvError> {
        if self.phase == Phase::Done {
            return Err(EnvError::Terminated);
        }
        if !self.legal_mask().allows(token) {
            return Err(EnvError::IllegalToken { token, phase: self.phase.name() });
        }
        self.push(Step::policy(token, logprob));
        let mut tool_result = None;
        match self.phase {
            Phase::Reasoning => match token {
                Token::CALL => {
                    if enforce_budget(&self.sandbox) == BudgetDecision::Deny {
                        // span is force-closed without executing
                        self.terminate(Truncation::ToolBudget);
                    } else {
                        self.phase = Phase::Call(CallSlot::ExprStart);
                        self.expr.clear();
                        self.expr_ops = 0;
                    }
                }
                Token::ANSWER => self.phase = Phase::Answer(0),
                _ => self.terminate(Truncation::None),
            },
            Phase::Call(slot) => {
                if token == Token::END_CALL {
                    let (result, next) = execute_tool(&self.expr, &self.sandbox);
                    self.sandbox = next;
                    if result.is_ok() {
                        self.committed += self.expr_ops;
                    }
                    self.events.push(ToolEvent {
                        call_index: self.events.len() as u32 + 1,
                        expr_tokens: std::mem::take(&mut self.expr),
                        result,
                        sandbox_state_after: self.sandbox.last,
                    });
                    self.expr_ops = 0;
                    self.phase = Phase::Reasoning;
                    tool_result = Some(result);
                    if !self.check_cap() {
                        for t in result.output_tokens() {
                            self.push(Step::tool(t));
                            if self.check_cap() {
                                break;
                            }
                        }
                    }
                } else {
                    self.expr.push(token);
                    self.phase = Phase::Call(match slot {
                        CallSlot::ExprStart | CallSlot::AfterOp => CallSlot::AfterOperand,
                        CallSlot::AfterOperand => {
                            self.expr_ops += 1;
                            CallSlot::AfterOp
                        }
                    });
                }
            }
            Phase::Answer(n) if n < 2 => {
                self.answer_digits[n as usize] = token.0;
                self.phase = Phase::Answer(n + 1);
            }
            Phase::Answer(_) => {
                self.final_answer = Some(10 * self.answer_digits[0] + self.answer_digits[1]);
                self.terminate(Truncation::None);
            }
            Phase::Done => unreachable!(),
        }
        let terminal = self.phase == Phase::Done || self.check_cap();
        Ok(Transition { terminal, tool_result })
    }

    pub fn finish(self) -> Trajectory {
        Trajectory {
            task_id: self.task.task_id,
            budget: self.cfg.tool_budget,
            prompt_tokens: self.task.prompt_tokens(),
            steps: self.steps,
            tool_events: self.events,
            final_answer: self.final_answer,
            truncated: self.truncated,
        }
    }

    pub fn outcome(self) -> EnvOutcome {
        let task = self.task;
        EnvOutcome::new(task, self.finish())
    }
}

/// Re-runs a logged trajectory through a fresh episode and calls `f` at every
/// policy decision with the observation, mask and the token that was taken.
/// Fails if the log diverges from what the environment produces.
pub fn replay<T, F>(traj: &Trajectory, task: &Task, cfg: EnvConfig, mut f: F) -> Result<Vec<T>, EnvError>
where
    F: FnMut(&Observation<'_>, Mask, Token) -> T,
{
    let cfg = EnvConfig { tool_budget: traj.budget, ..cfg };
    let mut ep = Episode::new(task, cfg);
    let mut out = Vec::with_capacity(traj.steps.len());
    for (i, s) in traj.steps.iter().enumerate() {
        match s.role {
            Role::Policy => {
                let mask = ep.legal_mask();
                out.push(f(&ep.observation(), mask, s.token));
                ep.step(s.token, s.logprob.unwrap_or(0.0)).map_err(|_| EnvError::ReplayMismatch(i))?;
            }
            Role::ToolOutput => {
                if ep.steps.get(i) != Some(s) {
                    return Err(EnvError::ReplayMismatch(i));
                }
            }
        }
    }
    if ep.steps.len() != traj.steps.len() {
        return Err(EnvError::ReplayMismatch(ep.steps.len().min(traj.steps.len())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traj::validate;

    fn d(x: u8) -> Token {
        Token::digit(x)
    }

    fn task(start: u8, chain: &[(Op, u8)]) -> Task {
        Task::new(99, start, chain.iter().map(|&(op, operand)| ChainOp { op, operand }).collect()).unwrap()
    }

    #[test]
    fn one_step_task_answer() {
        assert_eq!(task(7, &[(Op::Add, 5)]).answer, 12);
        assert_eq!(task(3, &[(Op::Sub, 9)]).answer, 94);
        assert_eq!(task(9, &[(Op::Mul, 9), (Op::Mul, 9)]).answer, 29);
    }

    #[test]
    fn generation_is_deterministic_and_checked() {
        let p = DifficultyProfile::default();
        assert_eq!(generate_task(5, 9, &p).unwrap(), generate_task(5, 9, &p).unwrap());
        assert_ne!(generate_task(5, 9, &p).unwrap(), generate_task(6, 9, &p).unwrap());
        assert_eq!(generate_task(1, 0, &p), Err(EnvError::ChainLength(0)));
        assert_eq!(generate_task(1, 17, &p), Err(EnvError::ChainLength(17)));
        let t = generate_task(11, 16, &p).unwrap();
        assert_eq!(t.len(), 16);
        assert!(t.chain.iter().all(|c| (2..=9).contains(&c.operand)));
    }

    #[test]
    fn prompt_round_trip() {
        let t = generate_task(3, 7, &DifficultyProfile::default()).unwrap();
        assert_eq!(Task::from_prompt(t.task_id, &t.prompt_tokens()).unwrap(), t);
        assert_eq!(Task::from_prompt(1, &[Token::START]), Err(EnvError::BadPrompt));
    }

    #[test]
    fn sandbox_examples() {
        let s = SandboxState::new(50);
        let (r, s1) = execute_tool(&[d(7), Token::PLUS, d(5)], &s);
        assert_eq!(r, ToolResult::Value(12));
        assert_eq!(s1.last, Some(12));
        assert_eq!(s1.calls_used, 1);

        let (r, s2) = execute_tool(&[Token::LAST, Token::TIMES, d(3)], &s1);
        assert_eq!(r, ToolResult::Value(36));
        assert_eq!(s2.last, Some(36));

        let (r, s3) = execute_tool(&[Token::LAST, Token::PLUS, d(2)], &s);
        assert_eq!(r, ToolResult::Error(ToolError::NoLast));
        assert_eq!(s3.last, None);
        assert_eq!(s3.calls_used, 1);
    }

    #[test]
    fn sandbox_parse_errors_and_wraparound() {
        let s = SandboxState { last: Some(40), calls_used: 3, budget: 50 };
        for bad in [&[][..], &[Token::PLUS], &[d(3), Token::PLUS], &[Token::LAST, Token::LAST]] {
            let (r, s2) = execute_tool(bad, &s);
            assert_eq!(r, ToolResult::Error(ToolError::Parse), "{bad:?}");
            assert_eq!(s2.last, Some(40));
            assert_eq!(s2.calls_used, 4);
        }
        let (r, _) = execute_tool(&[d(3), Token::MINUS, d(9)], &s);
        assert_eq!(r, ToolResult::Value(94));
        let (r, _) = execute_tool(&[d(1), d(2), d(3), Token::PLUS, Token::LAST], &s);
        assert_eq!(r, ToolResult::Value(63));
        // parse errors take precedence over a missing register
        let (r, _) = execute_tool(&[Token::LAST, Token::PLUS], &SandboxState::new(5));
        assert_eq!(r, ToolResult::Error(ToolError::Parse));
    }

    #[test]
    fn budget_boundaries() {
        let st = |used, budget| SandboxState { last: None, calls_used: used, budget };
        assert_eq!(enforce_budget(&st(49, 50)), BudgetDecision::Allow);
        assert_eq!(enforce_budget(&st(50, 50)), BudgetDecision::Deny);
        let mut s = SandboxState::new(2);
        let mut decisions = vec![];
        for _ in 0..3 {
            decisions.push(enforce_budget(&s));
            if enforce_budget(&s) == BudgetDecision::Allow {
                s = execute_tool(&[d(1)], &s).1;
            }
        }
        assert_eq!(decisions, vec![BudgetDecision::Allow, BudgetDecision::Allow, BudgetDecision::Deny]);
    }

    fn drive(ep: &mut Episode<'_>, toks: &[Token]) -> Transition {
        let mut last = None;
        for &t in toks {
            last = Some(ep.step(t, 0.0).unwrap());
        }
        last.unwrap()
    }

    #[test]
    fn answer_span_terminates() {
        let t = task(7, &[(Op::Add, 5)]);
        let mut ep = Episode::new(&t, EnvConfig::default());
        let tr = drive(&mut ep, &[Token::ANSWER, d(1), d(2), Token::EOS]);
        assert!(tr.terminal);
        let out = ep.outcome();
        assert_eq!(out.trajectory.final_answer, Some(12));
        assert!(out.correct);
        assert!(!out.used_tool);
        assert!(validate(&out.trajectory).is_ok());
    }

    #[test]
    fn call_at_budget_is_force_closed() {
        let t = task(7, &[(Op::Add, 5), (Op::Mul, 3), (Op::Add, 1)]);
        let cfg = EnvConfig { tool_budget: 2, ..Default::default() };
        let mut ep = Episode::new(&t, cfg);
        drive(&mut ep, &[Token::CALL, d(7), Token::PLUS, d(5), Token::END_CALL]);
        drive(&mut ep, &[Token::CALL, Token::LAST, Token::TIMES, d(3), Token::END_CALL]);
        assert_eq!(ep.sandbox().calls_used, 2);
        let tr = ep.step(Token::CALL, 0.0).unwrap();
        assert!(tr.terminal);
        assert!(tr.tool_result.is_none());
        let traj = ep.finish();
        assert_eq!(traj.truncated, Truncation::ToolBudget);
        assert_eq!(traj.tool_events.len(), 2);
        assert_eq!(traj.final_answer, None);
        assert!(validate(&traj).is_ok(), "{:?}", validate(&traj));
    }

    #[test]
    fn token_limit_truncates_without_answer() {
        let t = task(7, &[(Op::Add, 5)]);
        let prompt_len = t.prompt_tokens().len();
        let cfg = EnvConfig { max_trajectory_tokens: prompt_len + 6, ..Default::default() };
        let mut ep = Episode::new(&t, cfg);
        drive(&mut ep, &[Token::CALL, Token::LAST, Token::END_CALL]);
        assert!(!ep.is_done());
        // <err> brought the context to prompt+4
        drive(&mut ep, &[Token::CALL]);
        let tr = ep.step(Token::LAST, 0.0).unwrap();
        assert!(tr.terminal);
        let traj = ep.finish();
        assert_eq!(traj.truncated, Truncation::TokenLimit);
        assert_eq!(traj.final_answer, None);
        assert_eq!(traj.total_len(), prompt_len + 6);
        assert!(validate(&traj).is_ok());
    }

    #[test]
    fn tool_output_cut_by_limit_still_counts_the_call() {
        let t = task(7, &[(Op::Add, 5)]);
        let prompt_len = t.prompt_tokens().len();
        let cfg = EnvConfig { max_trajectory_tokens: prompt_len + 6, ..Default::default() };
        let mut ep = Episode::new(&t, cfg);
        let tr = drive(&mut ep, &[Token::CALL, d(7), Token::PLUS, d(5), Token::END_CALL]);
        assert!(tr.terminal);
        let traj = ep.finish();
        assert_eq!(traj.tool_events.len(), 1);
        assert_eq!(traj.steps.len(), 6);
        assert!(validate(&traj).is_ok(), "{:?}", validate(&traj));
    }

    #[test]
    fn illegal_tokens_are_rejected() {
        let t = task(7, &[(Op::Add, 5)]);
        let mut ep = Episode::new(&t, EnvConfig::default());
        assert!(matches!(ep.step(d(3), 0.0), Err(EnvError::IllegalToken { .. })));
        assert!(matches!(ep.step(Token::SEP, 0.0), Err(EnvError::IllegalToken { .. })));
        drive(&mut ep, &[Token::EOS]);
        assert_eq!(ep.step(Token::CALL, 0.0), Err(EnvError::Terminated));
    }

    #[test]
    fn recall_is_exact_right_after_feedback() {
        let p = DifficultyProfile::default();
        let cfg = EnvConfig { slip_rate: 1.0, ..Default::default() };
        let t = generate_task(4, 4, &p).unwrap();
        let mut ep = Episode::new(&t, cfg);
        drive(&mut ep, &[Token::CALL]);
        assert_eq!(ep.observation().recall.operand, Some(t.start_value));
        drive(&mut ep, &[d(t.start_value)]);
        assert_eq!(ep.observation().recall.op, Some(t.chain[0].op));
        drive(&mut ep, &[t.chain[0].op.token()]);
        assert_eq!(ep.observation().recall.operand, Some(t.chain[0].operand));
        drive(&mut ep, &[d(t.chain[0].operand)]);
        // second op in the same expression slips with rate 1
        let r = ep.observation().recall;
        let drifted_op = r.op != Some(t.chain[1].op);
        drive(&mut ep, &[r.op.unwrap().token()]);
        let drifted_operand = ep.observation().recall.operand != Some(t.chain[1].operand);
        assert!(drifted_op ^ drifted_operand);
    }

    #[test]
    fn calls_used_increments_once_per_span() {
        let t = generate_task(8, 5, &DifficultyProfile::default()).unwrap();
        let mut ep = Episode::new(&t, EnvConfig::default());
        let mut seen = vec![];
        for toks in [
            &[Token::CALL, Token::LAST, Token::END_CALL][..],
            &[Token::CALL, Token::END_CALL][..],
            &[Token::CALL, d(2), Token::PLUS, d(2), Token::END_CALL][..],
        ] {
            for &tok in toks {
                ep.step(tok, 0.0).unwrap();
                seen.push(ep.sandbox().calls_used);
            }
        }
        assert!(seen.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(ep.sandbox().calls_used, 3);
    }
}
