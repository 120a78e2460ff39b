//! Trajectory data model, invariant checks and line-delimited JSON logs.

use crate::env::{execute_tool, SandboxState};
use crate::token::{Token, VOCAB_SIZE};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Policy,
    ToolOutput,
}

/// One token of the response: either emitted by the policy (with the
/// behavior log-probability it was sampled with) or written by the tool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub token: Token,
    pub role: Role,
    pub logprob: Option<f64>,
}

impl Step {
    pub fn policy(token: Token, logprob: f64) -> Step {
        Step { token, role: Role::Policy, logprob: Some(logprob) }
    }

    pub fn tool(token: Token) -> Step {
        Step { token, role: Role::ToolOutput, logprob: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ToolError {
    #[serde(rename = "E_PARSE")]
    Parse,
    #[serde(rename = "E_NO_LAST")]
    NoLast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolResult {
    Value(u8),
    Error(ToolError),
}

impl ToolResult {
    pub fn is_ok(&self) -> bool {
        matches!(self, ToolResult::Value(_))
    }

    /// Tokens the tool writes back into the context: two digits or `<err>`.
    pub fn output_tokens(&self) -> Vec<Token> {
        match *self {
            ToolResult::Value(v) => vec![Token::digit(v / 10), Token::digit(v % 10)],
            ToolResult::Error(_) => vec![Token::ERR],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolEvent {
    pub call_index: u32,
    pub expr_tokens: Vec<Token>,
    pub result: ToolResult,
    pub sandbox_state_after: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    None,
    TokenLimit,
    ToolBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: u64,
    /// Tool budget the episode ran under; the policy observes the remaining budget.
    pub budget: u32,
    pub prompt_tokens: Vec<Token>,
    pub steps: Vec<Step>,
    pub tool_events: Vec<ToolEvent>,
    pub final_answer: Option<u8>,
    pub truncated: Truncation,
}

/// Number of completed tool calls. Errored calls count; a call left open at
/// truncation does not.
pub fn tool_call_count(t: &Trajectory) -> usize {
    t.tool_events.len()
}

impl Trajectory {
    /// |o_i|: tokens emitted by the policy.
    pub fn policy_len(&self) -> usize {
        self.steps.iter().filter(|s| s.role == Role::Policy).count()
    }

    pub fn tool_output_len(&self) -> usize {
        self.steps.len() - self.policy_len()
    }

    pub fn policy_tokens(&self) -> impl Iterator<Item = Token> + '_ {
        self.steps.iter().filter(|s| s.role == Role::Policy).map(|s| s.token)
    }

    pub fn total_len(&self) -> usize {
        self.prompt_tokens.len() + self.steps.len()
    }

    pub fn tool_errors(&self) -> usize {
        self.tool_events.iter().filter(|e| !e.result.is_ok()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("token id out of range at {where_}[{index}]")]
    InvalidToken { where_: &'static str, index: usize },
    #[error("policy step {index} has no behavior log-probability")]
    MissingLogprob { index: usize },
    #[error("policy step {index} has a non-finite log-probability")]
    NonFiniteLogprob { index: usize },
    #[error("tool output step {index} carries a log-probability")]
    ToolStepLogprob { index: usize },
    #[error("{spans} completed call spans but {events} tool events")]
    EventCountMismatch { spans: usize, events: usize },
    #[error("tool event {position} has call_index {found}")]
    CallIndex { position: usize, found: u32 },
    #[error("tool event {call_index}: expression differs from the logged call span")]
    ExprMismatch { call_index: u32 },
    #[error("tool event {call_index}: result or sandbox state disagrees with re-execution")]
    ResultMismatch { call_index: u32 },
    #[error("tool event {call_index}: tool output tokens do not encode the result")]
    OutputMismatch { call_index: u32 },
    #[error("final answer {recorded:?} does not match the logged answer span {scanned:?}")]
    AnswerMismatch { recorded: Option<u8>, scanned: Option<u8> },
    #[error("final answer present on a truncated trajectory")]
    AnswerWhileTruncated,
    #[error("{events} tool events exceed budget {budget}")]
    BudgetExceeded { events: usize, budget: u32 },
    #[error("tool_budget truncation without a trailing unexecuted <call>")]
    BudgetTruncationShape,
}

/// Scans the raw step stream: completed call spans (policy `<call>` ..
/// policy `<end_call>`) and the answer of a completed `<answer> d d <eos>` span.
struct Scan {
    spans: Vec<(usize, usize)>,
    answer: Option<u8>,
}

fn scan(steps: &[Step]) -> Scan {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    let mut answer = None;
    let mut i = 0;
    while i < steps.len() {
        let s = steps[i];
        if s.role == Role::Policy {
            match s.token {
                Token::CALL if open.is_none() => open = Some(i),
                Token::END_CALL => {
                    if let Some(start) = open.take() {
                        spans.push((start, i));
                    }
                }
                Token::ANSWER if open.is_none() => {
                    let d: Vec<Option<u8>> =
                        steps[i + 1..].iter().take(3).map(|s| s.token.as_digit()).collect();
                    if d.len() == 3 && steps[i + 3].token == Token::EOS {
                        if let (Some(a), Some(b)) = (d[0], d[1]) {
                            answer = Some(10 * a + b);
                        }
                    }
                }
                _ => {}
            }
        }
        i += 1;
    }
    Scan { spans, answer }
}

/// Checks every trajectory invariant and returns all violations found.
pub fn validate(t: &Trajectory) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    for (i, tok) in t.prompt_tokens.iter().enumerate() {
        if tok.id() >= VOCAB_SIZE {
            v.push(Violation::InvalidToken { where_: "prompt", index: i });
        }
    }
    for (i, s) in t.steps.iter().enumerate() {
        if s.token.id() >= VOCAB_SIZE {
            v.push(Violation::InvalidToken { where_: "steps", index: i });
        }
        match (s.role, s.logprob) {
            (Role::Policy, None) => v.push(Violation::MissingLogprob { index: i }),
            (Role::Policy, Some(lp)) if !lp.is_finite() => {
                v.push(Violation::NonFiniteLogprob { index: i })
            }
            (Role::ToolOutput, Some(_)) => v.push(Violation::ToolStepLogprob { index: i }),
            _ => {}
        }
    }

    let sc = scan(&t.steps);
    if sc.spans.len() != t.tool_events.len() {
        v.push(Violation::EventCountMismatch { spans: sc.spans.len(), events: t.tool_events.len() });
    }
    let mut sandbox = SandboxState::new(u32::MAX);
    for (pos, ev) in t.tool_events.iter().enumerate() {
        if ev.call_index as usize != pos + 1 {
            v.push(Violation::CallIndex { position: pos, found: ev.call_index });
        }
        if let Some(&(a, b)) = sc.spans.get(pos) {
            let logged: Vec<Token> = t.steps[a + 1..b].iter().map(|s| s.token).collect();
            if logged != ev.expr_tokens {
                v.push(Violation::ExprMismatch { call_index: ev.call_index });
            }
            let expected = ev.result.output_tokens();
            let written: Vec<Token> = t.steps[b + 1..]
                .iter()
                .take_while(|s| s.role == Role::ToolOutput)
                .map(|s| s.token)
                .collect();
            let cut_by_limit = t.truncated == Truncation::TokenLimit
                && b + 1 + written.len() == t.steps.len()
                && expected.starts_with(&written);
            if written != expected && !cut_by_limit {
                v.push(Violation::OutputMismatch { call_index: ev.call_index });
            }
        }
        let (res, next) = execute_tool(&ev.expr_tokens, &sandbox);
        if res != ev.result || next.last != ev.sandbox_state_after {
            v.push(Violation::ResultMismatch { call_index: ev.call_index });
        }
        sandbox = next;
    }

    if sc.answer != t.final_answer {
        v.push(Violation::AnswerMismatch { recorded: t.final_answer, scanned: sc.answer });
    }
    if t.final_answer.is_some() && t.truncated != Truncation::None {
        v.push(Violation::AnswerWhileTruncated);
    }
    if t.tool_events.len() > t.budget as usize {
        v.push(Violation::BudgetExceeded { events: t.tool_events.len(), budget: t.budget });
    }
    if t.truncated == Truncation::ToolBudget {
        let last = t.steps.last();
        let ok = matches!(last, Some(s) if s.role == Role::Policy && s.token == Token::CALL)
            && t.tool_events.len() == t.budget as usize;
        if !ok {
            v.push(Violation::BudgetTruncationShape);
        }
    }

    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("missing log header")]
    MissingHeader,
    #[error("log vocabulary size {found} does not match {expected}")]
    VocabMismatch { found: usize, expected: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse_err(e: serde_json::Error) -> LogError {
    LogError::Parse { offset: e.column().saturating_sub(1), message: e.to_string() }
}

/// One JSON line, fields in declaration order, token ids as integers.
pub fn serialize(t: &Trajectory) -> String {
    serde_json::to_string(t).expect("trajectory serialization is infallible")
}

pub fn deserialize(line: &str) -> Result<Trajectory, LogError> {
    serde_json::from_str(line).map_err(parse_err)
}

/// First line of every trajectory log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogHeader {
    pub vocab_size: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl LogHeader {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        LogHeader { vocab_size: VOCAB_SIZE, config_hash: config_hash.into(), seed }
    }
}

pub fn write_log<W: Write>(mut w: W, header: &LogHeader, trajs: &[Trajectory]) -> std::io::Result<()> {
    writeln!(w, "{}", serde_json::to_string(header).expect("header serialization"))?;
    for t in trajs {
        writeln!(w, "{}", serialize(t))?;
    }
    w.flush()
}

pub fn read_log<R: BufRead>(r: R) -> Result<(LogHeader, Vec<Trajectory>), LogError> {
    let mut lines = r.lines();
    let header_line = lines.next().ok_or(LogError::MissingHeader)??;
    let header: LogHeader = serde_json::from_str(&header_line).map_err(parse_err)?;
    if header.vocab_size != VOCAB_SIZE {
        return Err(LogError::VocabMismatch { found: header.vocab_size, expected: VOCAB_SIZE });
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(deserialize(&line)?);
    }
    Ok((header, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(t: Token) -> Step {
        Step::policy(t, 0.0)
    }
    fn o(t: Token) -> Step {
        Step::tool(t)
    }

    /// `<call> 7 + 5 <end_call>` -> 12, `<call> <last> * 3 <end_call>` -> 36, answer 36.
    pub(crate) fn two_call_trajectory() -> Trajectory {
        let d = Token::digit;
        let steps = vec![
            p(Token::CALL), p(d(7)), p(Token::PLUS), p(d(5)), p(Token::END_CALL), o(d(1)), o(d(2)),
            p(Token::CALL), p(Token::LAST), p(Token::TIMES), p(d(3)), p(Token::END_CALL), o(d(3)), o(d(6)),
            p(Token::ANSWER), p(d(3)), p(d(6)), p(Token::EOS),
        ];
        Trajectory {
            task_id: 1,
            budget: 50,
            prompt_tokens: vec![Token::START, d(7), Token::SEP, Token::OP_ADD, d(5), Token::SEP, Token::OP_MUL, d(3)],
            steps,
            tool_events: vec![
                ToolEvent {
                    call_index: 1,
                    expr_tokens: vec![d(7), Token::PLUS, d(5)],
                    result: ToolResult::Value(12),
                    sandbox_state_after: Some(12),
                },
                ToolEvent {
                    call_index: 2,
                    expr_tokens: vec![Token::LAST, Token::TIMES, d(3)],
                    result: ToolResult::Value(36),
                    sandbox_state_after: Some(36),
                },
            ],
            final_answer: Some(36),
            truncated: Truncation::None,
        }
    }

    #[test]
    fn counts_completed_events() {
        let t = two_call_trajectory();
        assert_eq!(tool_call_count(&t), 2);
        assert_eq!(t.policy_len(), 14);
        assert_eq!(t.tool_output_len(), 4);
        assert!(validate(&t).is_ok());
    }

    #[test]
    fn zero_calls_count_zero() {
        let d = Token::digit;
        let t = Trajectory {
            task_id: 3,
            budget: 50,
            prompt_tokens: vec![Token::START, d(4)],
            steps: vec![p(Token::ANSWER), p(d(0)), p(d(4)), p(Token::EOS)],
            tool_events: vec![],
            final_answer: Some(4),
            truncated: Truncation::None,
        };
        assert_eq!(tool_call_count(&t), 0);
        assert!(validate(&t).is_ok());
    }

    #[test]
    fn open_call_at_truncation_is_not_counted() {
        let mut t = two_call_trajectory();
        // cut after the second tool output and open a third call
        t.steps.truncate(14);
        t.steps.push(p(Token::CALL));
        t.steps.push(p(Token::LAST));
        t.final_answer = None;
        t.truncated = Truncation::TokenLimit;
        assert_eq!(tool_call_count(&t), 2);
        assert!(validate(&t).is_ok(), "{:?}", validate(&t));
    }

    #[test]
    fn event_count_mismatch_is_reported() {
        let mut t = two_call_trajectory();
        t.tool_events.pop();
        let errs = validate(&t).unwrap_err();
        assert!(errs.iter().any(|e| matches!(e, Violation::EventCountMismatch { spans: 2, events: 1 })));
    }

    #[test]
    fn answer_on_budget_truncated_record_is_reported() {
        // adversarial: claims an answer but stopped on an unexecuted call at budget
        let mut t = two_call_trajectory();
        t.budget = 2;
        t.steps.truncate(14);
        t.steps.push(p(Token::CALL));
        t.truncated = Truncation::ToolBudget;
        // final_answer left at Some(36)
        let errs = validate(&t).unwrap_err();
        assert!(errs.contains(&Violation::AnswerWhileTruncated));
        assert!(errs.iter().any(|e| matches!(e, Violation::AnswerMismatch { .. })));
    }

    #[test]
    fn all_violations_are_collected() {
        let mut t = two_call_trajectory();
        t.steps[0].logprob = None;
        t.steps[5].logprob = Some(-1.0);
        t.steps[1].logprob = Some(f64::NAN);
        t.tool_events[1].call_index = 5;
        t.tool_events[0].result = ToolResult::Value(13);
        let errs = validate(&t).unwrap_err();
        assert!(errs.len() >= 5, "{errs:?}");
    }

    #[test]
    fn round_trip_line() {
        let t = two_call_trajectory();
        let line = serialize(&t);
        assert!(!line.contains('\n'));
        assert!(line.starts_with("{\"task_id\":1,\"budget\":50,\"prompt_tokens\":[19,7,"));
        assert_eq!(deserialize(&line).unwrap(), t);
    }

    #[test]
    fn truncated_line_reports_offset() {
        let line = serialize(&two_call_trajectory());
        let cut = &line[..line.len() - 20];
        match deserialize(cut) {
            Err(LogError::Parse { offset, .. }) => assert!(offset > 0 && offset <= cut.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn log_header_round_trip() {
        let mut buf = Vec::new();
        let h = LogHeader::new("abc", 7);
        let ts = vec![two_call_trajectory(), two_call_trajectory()];
        write_log(&mut buf, &h, &ts).unwrap();
        let (h2, ts2) = read_log(&buf[..]).unwrap();
        assert_eq!(h2, h);
        assert_eq!(ts2, ts);
    }
}
