//! Pluggable statement frontends.
//!
//! A grammar turns one source text into a flat list of [`RawStatement`]s in
//! source order. The graph builder owns everything after that: coalescing
//! statements that share a line, node ids and edges.

use super::{clike, line, StatementKind};

/// How a statement touches a name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    /// Reads the current value.
    Use,
    /// Overwrites the binding that is currently visible.
    Def,
    /// Introduces a binding in the enclosing block.
    Decl,
    /// Introduces a binding visible only to the statement's own block
    /// (parameters, loop variables).
    HeaderDecl,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct Access {
    pub name: String,
    pub kind: AccessKind,
}

impl Access {
    pub fn new(name: impl Into<String>, kind: AccessKind) -> Self {
        Self { name: name.into(), kind }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawStatement {
    pub start_line: usize,
    pub end_line: usize,
    pub kind: StatementKind,
    /// Comments and stray punctuation: they occupy lines but carry no kind
    /// of their own when coalesced with a real statement.
    pub trivia: bool,
    /// Index of the block-owning statement this one is nested in.
    pub parent: Option<usize>,
    /// Reads and writes in evaluation order.
    pub accesses: Vec<Access>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message} at line {line}")]
pub struct GrammarError {
    pub line: usize,
    pub message: String,
}

pub trait Grammar: Sync {
    fn id(&self) -> &'static str;
    fn statements(&self, source: &str) -> Result<Vec<RawStatement>, GrammarError>;
}

/// Grammar ids understood by [`lookup`]. `auto` resolves per file.
pub const GRAMMAR_IDS: &[&str] = &["auto", "clike", "line"];

const CLIKE_EXTENSIONS: &[&str] = &[
    "c", "h", "cc", "cpp", "cxx", "hpp", "hh", "hxx", "java", "cs", "js", "jsx", "ts", "tsx",
    "go", "rs", "kt", "kts", "swift", "scala", "m", "mm", "php", "dart", "groovy",
];

pub fn lookup(grammar_id: &str) -> Option<&'static dyn Grammar> {
    match grammar_id {
        "clike" | "c" | "java" | "csharp" | "cpp" => Some(&clike::CLike),
        "line" => Some(&line::LinePerStatement),
        _ => None,
    }
}

/// Picks a grammar for `path` under `auto`: brace languages get `clike`,
/// everything else the line fallback.
pub fn for_path(path: &str) -> &'static dyn Grammar {
    let ext = path.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase());
    match ext {
        Some(e) if CLIKE_EXTENSIONS.contains(&e.as_str()) => &clike::CLike,
        _ => &line::LinePerStatement,
    }
}
