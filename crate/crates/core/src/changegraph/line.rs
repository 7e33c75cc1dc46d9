//! Degraded frontend: every non-blank line is a statement, nothing nests.
//! Accepts any text.

use super::grammar::{Access, AccessKind, Grammar, GrammarError, RawStatement};
use super::StatementKind;

pub struct LinePerStatement;

fn identifiers(text: &str) -> Vec<&str> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty() && !w.starts_with(|c: char| c.is_ascii_digit()))
        .collect()
}

/// Single `=` that is not part of `==`, `<=`, `>=`, `!=` or `=>`.
fn assignment_split(text: &str) -> Option<(&str, &str)> {
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b != b'=' {
            continue;
        }
        let prev = i.checked_sub(1).map(|j| bytes[j]);
        let next = bytes.get(i + 1).copied();
        if matches!(prev, Some(b'=' | b'<' | b'>' | b'!')) || matches!(next, Some(b'=' | b'>')) {
            continue;
        }
        return Some((&text[..i], &text[i + 1..]));
    }
    None
}

fn classify(text: &str) -> (StatementKind, Vec<Access>) {
    let trimmed = text.trim();
    let first = identifiers(trimmed).first().copied().unwrap_or_default();
    let kind = match first {
        "if" | "elif" | "else" | "switch" | "case" | "when" | "unless" => StatementKind::Condition,
        "for" | "while" | "do" | "loop" | "until" | "foreach" => StatementKind::LoopHeader,
        "def" | "fn" | "func" | "function" | "sub" | "proc" => StatementKind::Signature,
        _ => StatementKind::Other,
    };
    if kind != StatementKind::Other {
        let accesses = identifiers(trimmed)
            .into_iter()
            .skip(1)
            .map(|n| Access::new(n, AccessKind::Use))
            .collect();
        return (kind, accesses);
    }
    if let Some((lhs, rhs)) = assignment_split(trimmed) {
        let lhs_ids = identifiers(lhs);
        if let Some(&target) = lhs_ids.last() {
            let mut accesses: Vec<Access> = identifiers(rhs)
                .into_iter()
                .map(|n| Access::new(n, AccessKind::Use))
                .collect();
            let kind = if lhs_ids.len() >= 2 {
                accesses.push(Access::new(target, AccessKind::Decl));
                StatementKind::Declaration
            } else {
                accesses.push(Access::new(target, AccessKind::Def));
                StatementKind::Assignment
            };
            return (kind, accesses);
        }
    }
    let kind = if trimmed.contains('(') { StatementKind::Call } else { StatementKind::Other };
    let accesses = identifiers(trimmed)
        .into_iter()
        .map(|n| Access::new(n, AccessKind::Use))
        .collect();
    (kind, accesses)
}

impl Grammar for LinePerStatement {
    fn id(&self) -> &'static str {
        "line"
    }

    fn statements(&self, source: &str) -> Result<Vec<RawStatement>, GrammarError> {
        Ok(source
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let (kind, accesses) = classify(l);
                RawStatement {
                    start_line: i + 1,
                    end_line: i + 1,
                    kind,
                    trivia: false,
                    parent: None,
                    accesses,
                }
            })
            .collect())
    }
}
