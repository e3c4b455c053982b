//! Byte-level tokenizer with a small block of special tokens.
//!
//! Ids 0..=255 are raw bytes. Above them sit the conversation markers, the
//! end-of-message token, and two bracket literals that delimit tool-call
//! blocks inside executor text. The bracket literals are recognised inside
//! content strings and collapse to single tokens; everything else is plain
//! bytes, so any UTF-8 string round-trips.

use crate::adapter::RoleId;

pub const BYTE_VOCAB: u32 = 256;
pub const TOK_SYSTEM: u32 = 256;
pub const TOK_USER: u32 = 257;
pub const TOK_REASONER: u32 = 258;
pub const TOK_EXECUTOR: u32 = 259;
pub const TOK_OBSERVATION: u32 = 260;
pub const TOK_SUMMARIZER: u32 = 261;
pub const TOK_END: u32 = 262;
pub const TOK_ACTION_OPEN: u32 = 263;
pub const TOK_ACTION_CLOSE: u32 = 264;
/// Smallest vocabulary that fits every id the tokenizer can emit.
pub const VOCAB_SIZE: u32 = 265;

/// Literal text of the tool-call delimiters.
pub const ACTION_OPEN: &str = "[unused11]";
pub const ACTION_CLOSE: &str = "[unused12]";

/// Stateless byte tokenizer. Carried as a value so call sites read
/// naturally, but every instance behaves identically.
#[derive(Debug, Clone, Copy, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> u32 {
        VOCAB_SIZE
    }

    /// Encode a content string: bytes, with the two action delimiters
    /// collapsed to their dedicated tokens.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut ids = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i..].starts_with(ACTION_OPEN.as_bytes()) {
                ids.push(TOK_ACTION_OPEN);
                i += ACTION_OPEN.len();
            } else if bytes[i..].starts_with(ACTION_CLOSE.as_bytes()) {
                ids.push(TOK_ACTION_CLOSE);
                i += ACTION_CLOSE.len();
            } else {
                ids.push(bytes[i] as u32);
                i += 1;
            }
        }
        ids
    }

    /// Decode ids back to text. Special tokens render as their literal
    /// surface forms; invalid UTF-8 byte runs are replaced, never panicking.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => bytes.push(id as u8),
                TOK_ACTION_OPEN => bytes.extend_from_slice(ACTION_OPEN.as_bytes()),
                TOK_ACTION_CLOSE => bytes.extend_from_slice(ACTION_CLOSE.as_bytes()),
                _ => bytes.extend_from_slice(Self::special_surface(id).as_bytes()),
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn special_surface(id: u32) -> &'static str {
        match id {
            TOK_SYSTEM => "<|system|>",
            TOK_USER => "<|user|>",
            TOK_REASONER => "<|reasoner|>",
            TOK_EXECUTOR => "<|executor|>",
            TOK_OBSERVATION => "<|observation|>",
            TOK_SUMMARIZER => "<|summarizer|>",
            TOK_END => "<|end|>",
            _ => "<|invalid|>",
        }
    }

    /// Marker token that opens a message generated by `role`.
    pub fn role_marker(&self, role: RoleId) -> u32 {
        match role {
            RoleId::Reasoner => TOK_REASONER,
            RoleId::Executor => TOK_EXECUTOR,
            RoleId::Summarizer => TOK_SUMMARIZER,
        }
    }
}
