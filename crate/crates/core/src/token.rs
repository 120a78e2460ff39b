//! Fixed token vocabulary shared by the environment, the policy and the logs.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Number of token ids in the vocabulary.
pub const VOCAB_SIZE: usize = 24;

/// A vocabulary index. Serialized as a bare integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u8);

impl Token {
    pub const PLUS: Token = Token(10);
    pub const MINUS: Token = Token(11);
    pub const TIMES: Token = Token(12);
    pub const CALL: Token = Token(13);
    pub const END_CALL: Token = Token(14);
    pub const ANSWER: Token = Token(15);
    pub const EOS: Token = Token(16);
    pub const LAST: Token = Token(17);
    pub const ERR: Token = Token(18);
    // prompt-only
    pub const START: Token = Token(19);
    pub const OP_ADD: Token = Token(20);
    pub const OP_SUB: Token = Token(21);
    pub const OP_MUL: Token = Token(22);
    pub const SEP: Token = Token(23);

    pub fn digit(d: u8) -> Token {
        assert!(d < 10, "digit token out of range: {d}");
        Token(d)
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn as_digit(self) -> Option<u8> {
        (self.0 < 10).then_some(self.0)
    }

    pub fn is_digit(self) -> bool {
        self.0 < 10
    }

    pub fn is_operator(self) -> bool {
        matches!(self, Token::PLUS | Token::MINUS | Token::TIMES)
    }

    pub fn is_valid(self) -> bool {
        (self.0 as usize) < VOCAB_SIZE
    }

    pub fn name(self) -> &'static str {
        const NAMES: [&str; VOCAB_SIZE] = [
            "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "-", "*", "<call>", "<end_call>",
            "<answer>", "<eos>", "<last>", "<err>", "<start>", "<add>", "<sub>", "<mul>", "<sep>",
        ];
        NAMES.get(self.0 as usize).copied().unwrap_or("<invalid>")
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Renders a token slice as space-separated names, for diagnostics.
pub fn render(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.name()).collect::<Vec<_>>().join(" ")
}

/// Set of legal tokens, one bit per vocabulary id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Mask(u32);

impl Mask {
    pub const EMPTY: Mask = Mask(0);
    pub const ALL: Mask = Mask((1u32 << VOCAB_SIZE) - 1);
    pub const DIGITS: Mask = Mask(0x3ff);
    pub const OPERATORS: Mask = Mask((1 << 10) | (1 << 11) | (1 << 12));

    /// Mask from raw bits; bits beyond the vocabulary are dropped.
    pub fn from_bits(bits: u32) -> Mask {
        Mask(bits & Mask::ALL.0)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn of(tokens: &[Token]) -> Mask {
        tokens.iter().fold(Mask::EMPTY, |m, &t| m.with(t))
    }

    pub fn with(self, t: Token) -> Mask {
        Mask(self.0 | (1 << t.0))
    }

    pub fn union(self, other: Mask) -> Mask {
        Mask(self.0 | other.0)
    }

    pub fn allows(self, t: Token) -> bool {
        t.is_valid() && self.0 & (1 << t.0) != 0
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Allowed tokens in ascending id order.
    pub fn tokens(self) -> impl Iterator<Item = Token> {
        (0..VOCAB_SIZE as u8).map(Token).filter(move |&t| self.allows(t))
    }
}
