//! Statement frontend for brace-delimited languages (C, C++, Java, C#, and
//! close relatives).
//!
//! This is not a full parser. It tokenizes, splits the token stream into
//! statements on `;`, `{` and `}`, tracks block nesting, and extracts the
//! names each statement declares, writes and reads. That is all the graph
//! builder needs.

use super::grammar::{Access, AccessKind, Grammar, GrammarError, RawStatement};
use super::StatementKind;

pub struct CLike;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokKind {
    Ident,
    Number,
    Str,
    Punct,
    Comment,
    Preproc,
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokKind,
    text: String,
    line: usize,
    end_line: usize,
}

impl Token {
    fn is(&self, text: &str) -> bool {
        self.kind == TokKind::Punct && self.text == text
    }

    fn is_ident(&self) -> bool {
        self.kind == TokKind::Ident
    }
}

const PUNCT3: &[&str] = &["<<=", ">>=", "...", "->*", "<=>", "===", "!=="];
const PUNCT2: &[&str] = &[
    "->", "::", "==", "!=", "<=", ">=", "&&", "||", "++", "--", "+=", "-=", "*=", "/=", "%=", "&=",
    "|=", "^=", "<<", ">>", "=>", "?.", "??", ":=",
];

fn lex(source: &str) -> Result<Vec<Token>, GrammarError> {
    let chars: Vec<char> = source.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    let mut line = 1;
    // Whether only whitespace has been seen since the last newline.
    let mut at_line_start = true;

    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            line += 1;
            i += 1;
            at_line_start = true;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let start_line = line;
        let start = i;

        if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            tokens.push(Token {
                kind: TokKind::Comment,
                text: chars[start..i].iter().collect(),
                line: start_line,
                end_line: line,
            });
            at_line_start = false;
            continue;
        }
        if c == '/' && chars.get(i + 1) == Some(&'*') {
            i += 2;
            loop {
                if i + 1 >= chars.len() {
                    return Err(GrammarError {
                        line: start_line,
                        message: "unterminated block comment".into(),
                    });
                }
                if chars[i] == '*' && chars[i + 1] == '/' {
                    i += 2;
                    break;
                }
                if chars[i] == '\n' {
                    line += 1;
                }
                i += 1;
            }
            tokens.push(Token {
                kind: TokKind::Comment,
                text: chars[start..i].iter().collect(),
                line: start_line,
                end_line: line,
            });
            at_line_start = false;
            continue;
        }
        if c == '#' && at_line_start {
            // Preprocessor line, honouring backslash continuations.
            while i < chars.len() && chars[i] != '\n' {
                if chars[i] == '\\' && chars.get(i + 1) == Some(&'\n') {
                    line += 1;
                    i += 2;
                    continue;
                }
                i += 1;
            }
            tokens.push(Token {
                kind: TokKind::Preproc,
                text: chars[start..i].iter().collect(),
                line: start_line,
                end_line: line,
            });
            at_line_start = false;
            continue;
        }
        at_line_start = false;

        if c == '"' || c == '`' || (c == '@' && chars.get(i + 1) == Some(&'"')) {
            let verbatim = c == '@';
            let triple = c == '"' && chars.get(i + 1) == Some(&'"') && chars.get(i + 2) == Some(&'"');
            let delim = if c == '`' { '`' } else { '"' };
            i += if verbatim { 2 } else if triple { 3 } else { 1 };
            loop {
                if i >= chars.len() {
                    return Err(GrammarError {
                        line: start_line,
                        message: "unterminated string literal".into(),
                    });
                }
                let ch = chars[i];
                if ch == '\n' {
                    line += 1;
                }
                if ch == '\\' && !verbatim {
                    if chars.get(i + 1) == Some(&'\n') {
                        line += 1;
                    }
                    i += 2;
                    continue;
                }
                if ch == delim {
                    if verbatim && chars.get(i + 1) == Some(&'"') {
                        i += 2;
                        continue;
                    }
                    if triple {
                        if chars.get(i + 1) == Some(&'"') && chars.get(i + 2) == Some(&'"') {
                            i += 3;
                            break;
                        }
                        i += 1;
                        continue;
                    }
                    i += 1;
                    break;
                }
                i += 1;
            }
            tokens.push(Token {
                kind: TokKind::Str,
                text: chars[start..i].iter().collect(),
                line: start_line,
                end_line: line,
            });
            continue;
        }
        if c == '\'' {
            // Character literal if it closes within a few characters on the
            // same line; otherwise a lone quote (Rust lifetimes and the like).
            let mut j = i + 1;
            let mut closed = None;
            while j < chars.len() && j <= i + 12 && chars[j] != '\n' {
                if chars[j] == '\\' {
                    j += 2;
                    continue;
                }
                if chars[j] == '\'' {
                    closed = Some(j);
                    break;
                }
                j += 1;
            }
            if let Some(end) = closed.filter(|&end| end > i + 1) {
                i = end + 1;
                tokens.push(Token {
                    kind: TokKind::Str,
                    text: chars[start..i].iter().collect(),
                    line: start_line,
                    end_line: line,
                });
            } else {
                i += 1;
                tokens.push(Token {
                    kind: TokKind::Punct,
                    text: "'".into(),
                    line: start_line,
                    end_line: line,
                });
            }
            continue;
        }
        if c.is_ascii_digit() {
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '.' || chars[i] == '_') {
                i += 1;
            }
            tokens.push(Token {
                kind: TokKind::Number,
                text: chars[start..i].iter().collect(),
                line: start_line,
                end_line: line,
            });
            continue;
        }
        if c.is_alphabetic() || c == '_' || c == '$' {
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '$') {
                i += 1;
            }
            tokens.push(Token {
                kind: TokKind::Ident,
                text: chars[start..i].iter().collect(),
                line: start_line,
                end_line: line,
            });
            continue;
        }
        let rest: String = chars[i..chars.len().min(i + 3)].iter().collect();
        let width = if PUNCT3.iter().any(|p| rest.starts_with(p)) {
            3
        } else if PUNCT2.iter().any(|p| rest.starts_with(p)) {
            2
        } else {
            1
        };
        i += width;
        tokens.push(Token {
            kind: TokKind::Punct,
            text: chars[start..i].iter().collect(),
            line: start_line,
            end_line: line,
        });
    }
    Ok(tokens)
}

const CONDITION_WORDS: &[&str] = &["if", "else", "switch", "case", "default", "when", "match", "guard", "unless"];
const LOOP_WORDS: &[&str] = &["for", "while", "do", "foreach", "loop", "repeat"];
const JUMP_WORDS: &[&str] = &[
    "return", "throw", "yield", "break", "continue", "goto", "delete", "assert", "await", "echo",
];
const TYPE_DECL_WORDS: &[&str] = &[
    "class", "struct", "union", "enum", "interface", "namespace", "impl", "trait", "record", "module",
];
/// Words that may precede a declarator as part of its type.
const TYPE_WORDS: &[&str] = &[
    "int", "char", "short", "long", "float", "double", "void", "bool", "boolean", "byte", "unsigned",
    "signed", "const", "struct", "union", "enum", "static", "final", "var", "let", "val", "auto",
    "string", "volatile", "register", "extern", "mut", "readonly", "decimal", "object", "dynamic",
    "uint", "ulong", "ushort", "sbyte", "size_t", "inline", "constexpr", "public", "private",
    "protected", "internal", "virtual", "override", "abstract", "sealed", "transient", "synchronized",
];
const OTHER_KEYWORDS: &[&str] = &[
    "new", "sizeof", "typeof", "instanceof", "this", "self", "super", "null", "nullptr", "NULL",
    "true", "false", "using", "import", "package", "typedef", "template", "typename", "operator",
    "async", "in", "is", "as", "out", "ref", "partial", "where", "lock", "fixed", "unsafe", "fn",
    "func", "function", "def", "pub", "use", "mod", "crate", "type", "dyn", "move", "try", "catch",
    "finally", "throws", "extends", "implements", "get", "set", "nil", "None", "Self", "then",
];

fn is_keyword(word: &str) -> bool {
    CONDITION_WORDS.contains(&word)
        || LOOP_WORDS.contains(&word)
        || JUMP_WORDS.contains(&word)
        || TYPE_DECL_WORDS.contains(&word)
        || TYPE_WORDS.contains(&word)
        || OTHER_KEYWORDS.contains(&word)
}

fn is_name(tok: &Token) -> bool {
    tok.is_ident() && !is_keyword(&tok.text)
}

const ASSIGN_OPS: &[&str] = &[
    "=", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "<<=", ">>=", ":=", "??=",
];

/// Position of the first assignment operator outside any bracket.
fn top_level_assignment(tokens: &[Token]) -> Option<usize> {
    let mut depth = 0i32;
    for (i, t) in tokens.iter().enumerate() {
        if t.kind != TokKind::Punct {
            continue;
        }
        match t.text.as_str() {
            "(" | "[" | "{" => depth += 1,
            ")" | "]" | "}" => depth -= 1,
            op if depth == 0 && ASSIGN_OPS.contains(&op) => return Some(i),
            _ => {}
        }
    }
    None
}

/// Splits on a punctuation token at bracket depth zero.
fn split_top_level<'a>(tokens: &'a [Token], sep: &str) -> Vec<&'a [Token]> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut angle = 0i32;
    let mut last = 0;
    for (i, t) in tokens.iter().enumerate() {
        if t.kind != TokKind::Punct {
            continue;
        }
        match t.text.as_str() {
            "(" | "[" | "{" => depth += 1,
            ")" | "]" | "}" => depth -= 1,
            // Commas inside generic arguments (`Map<K, V> m`) do not separate.
            "<" if sep == "," && depth == 0 && i > 0 && tokens[i - 1].is_ident() => angle += 1,
            ">" if angle > 0 => angle -= 1,
            ">>" if angle > 0 => angle = (angle - 2).max(0),
            s if s == sep && depth == 0 && angle == 0 => {
                parts.push(&tokens[last..i]);
                last = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&tokens[last..]);
    parts
}

/// Names read by an expression: identifiers that are not keywords and not
/// member names after `.`, `->` or `::`.
fn uses_in(tokens: &[Token], out: &mut Vec<Access>) {
    for (i, t) in tokens.iter().enumerate() {
        if !is_name(t) {
            continue;
        }
        if i > 0 && ["." , "->", "::", "?."].iter().any(|p| tokens[i - 1].is(p)) {
            continue;
        }
        out.push(Access::new(&t.text, AccessKind::Use));
    }
}

/// Index one past the bracket group opening at `open`.
fn skip_group(tokens: &[Token], open: usize) -> usize {
    let mut depth = 0i32;
    for (i, t) in tokens.iter().enumerate().skip(open) {
        if t.kind != TokKind::Punct {
            continue;
        }
        match t.text.as_str() {
            "(" | "[" | "{" => depth += 1,
            ")" | "]" | "}" => {
                depth -= 1;
                if depth == 0 {
                    return i + 1;
                }
            }
            _ => {}
        }
    }
    tokens.len()
}

/// Drops leading annotations (`@Foo(...)`) and attributes (`[Foo]`).
fn strip_annotations(mut tokens: &[Token]) -> &[Token] {
    loop {
        if tokens.len() >= 2 && tokens[0].is("@") && tokens[1].is_ident() {
            let mut next = 2;
            while next + 1 < tokens.len() && tokens[next].is(".") && tokens[next + 1].is_ident() {
                next += 2;
            }
            if tokens.get(next).is_some_and(|t| t.is("(")) {
                next = skip_group(tokens, next);
            }
            tokens = &tokens[next..];
        } else if tokens.first().is_some_and(|t| t.is("[")) && tokens.len() > 2 {
            let end = skip_group(tokens, 0);
            if end >= tokens.len() {
                return tokens;
            }
            tokens = &tokens[end..];
        } else {
            return tokens;
        }
    }
}

/// If `tokens` is `<type> <ptr-ops> name <array-suffix>`, the declared name.
fn declarator_name(tokens: &[Token]) -> Option<&Token> {
    if let Some(colon) = tokens.iter().position(|t| t.is(":")) {
        // `let x: T`, `var x: T`, `x: T` parameters.
        let name = tokens[..colon].iter().rev().find(|t| is_name(t))?;
        let has_binder = tokens[..colon]
            .iter()
            .any(|t| matches!(t.text.as_str(), "let" | "var" | "val" | "const" | "mut"));
        return has_binder.then_some(name);
    }
    let mut end = tokens.len();
    while end > 0 && tokens[end - 1].is("]") {
        let mut depth = 0;
        let mut j = end;
        while j > 0 {
            j -= 1;
            if tokens[j].is("]") {
                depth += 1;
            } else if tokens[j].is("[") {
                depth -= 1;
                if depth == 0 {
                    break;
                }
            }
        }
        end = j;
    }
    if end == 0 || !is_name(&tokens[end - 1]) {
        return None;
    }
    let name = &tokens[end - 1];
    let mut j = end - 1;
    while j > 0 && (tokens[j - 1].is("*") || tokens[j - 1].is("&") || tokens[j - 1].is("&&")) {
        j -= 1;
    }
    if j == 0 {
        return None;
    }
    let prefix = &tokens[..j];
    if prefix.iter().any(|t| {
        t.is(".") || t.is("->") || t.is("(") || t.is("=") || t.kind == TokKind::Number || t.kind == TokKind::Str
    }) {
        return None;
    }
    let first = &prefix[0];
    if first.is_ident() && (JUMP_WORDS.contains(&first.text.as_str()) || first.text == "new") {
        return None;
    }
    let tail = &prefix[prefix.len() - 1];
    let type_like = (tail.is_ident() && !JUMP_WORDS.contains(&tail.text.as_str()))
        || tail.is(">")
        || tail.is(">>")
        || tail.is("]")
        || tail.is("?");
    type_like.then_some(name)
}

/// Parameter names of a parenthesized list starting at `open`.
fn parameter_names(tokens: &[Token], open: usize) -> Vec<String> {
    let close = skip_group(tokens, open);
    if close <= open + 2 {
        return Vec::new();
    }
    let inner = &tokens[open + 1..close - 1];
    split_top_level(inner, ",")
        .into_iter()
        .filter_map(|param| {
            let param = match param.iter().position(|t| t.is("=")) {
                Some(eq) => &param[..eq],
                None => param,
            };
            let param = strip_annotations(param);
            if let Some(colon) = param.iter().position(|t| t.is(":")) {
                return param[..colon].iter().rev().find(|t| is_name(t)).map(|t| t.text.clone());
            }
            declarator_name(param)
                .or_else(|| param.iter().rev().find(|t| is_name(t)))
                .map(|t| t.text.clone())
        })
        .collect()
}

/// Accesses of a plain (non-header) statement, plus its kind.
fn analyze_simple(tokens: &[Token], decl_kind: AccessKind) -> (StatementKind, Vec<Access>) {
    let mut acc = Vec::new();
    if tokens.is_empty() {
        return (StatementKind::Other, acc);
    }
    let first = &tokens[0];
    if first.is_ident() && JUMP_WORDS.contains(&first.text.as_str()) {
        uses_in(&tokens[1..], &mut acc);
        return (StatementKind::Other, acc);
    }

    if let Some(op) = top_level_assignment(tokens) {
        let (lhs, rhs) = (&tokens[..op], &tokens[op + 1..]);
        let op_text = tokens[op].text.as_str();
        let is_decl = op_text == ":=" || declarator_name(lhs).is_some();
        if is_decl {
            for (idx, part) in split_top_level(tokens, ",").into_iter().enumerate() {
                let (target, init) = match top_level_assignment(part) {
                    Some(p) => (&part[..p], &part[p + 1..]),
                    None => (part, &part[part.len()..]),
                };
                uses_in(init, &mut acc);
                let name = if idx == 0 {
                    declarator_name(target).or_else(|| target.iter().rev().find(|t| is_name(t)))
                } else {
                    target.iter().rev().find(|t| is_name(t))
                };
                if let Some(name) = name {
                    acc.push(Access::new(&name.text, decl_kind));
                }
            }
            return (StatementKind::Declaration, acc);
        }
        let names: Vec<&Token> = lhs.iter().filter(|t| is_name(t)).collect();
        let simple = lhs.len() == 1 && names.len() == 1;
        if !simple || op_text != "=" {
            // Compound targets (`a[i]`, `p->f`, `*p`) and compound operators read first.
            let mut lhs_uses = Vec::new();
            uses_in(lhs, &mut lhs_uses);
            acc.extend(lhs_uses);
        }
        uses_in(rhs, &mut acc);
        let base = lhs
            .iter()
            .enumerate()
            .find(|(i, t)| is_name(t) && !(*i > 0 && (lhs[i - 1].is(".") || lhs[i - 1].is("->"))))
            .map(|(_, t)| t);
        if let Some(base) = base {
            acc.push(Access::new(&base.text, AccessKind::Def));
        }
        return (StatementKind::Assignment, acc);
    }

    // `x++`, `--x`
    if tokens.len() == 2 {
        let (a, b) = (&tokens[0], &tokens[1]);
        let target = if (b.is("++") || b.is("--")) && is_name(a) {
            Some(a)
        } else if (a.is("++") || a.is("--")) && is_name(b) {
            Some(b)
        } else {
            None
        };
        if let Some(t) = target {
            acc.push(Access::new(&t.text, AccessKind::Use));
            acc.push(Access::new(&t.text, AccessKind::Def));
            return (StatementKind::Assignment, acc);
        }
    }

    let parts = split_top_level(tokens, ",");
    if let Some(name) = declarator_name(parts[0]) {
        acc.push(Access::new(&name.text, decl_kind));
        for part in &parts[1..] {
            if let Some(n) = part.iter().rev().find(|t| is_name(t)) {
                acc.push(Access::new(&n.text, decl_kind));
            }
        }
        return (StatementKind::Declaration, acc);
    }

    // Prototype: `int f(int a);`
    if let Some(open) = tokens.iter().position(|t| t.is("(")) {
        if open >= 2
            && is_name(&tokens[open - 1])
            && declarator_name(&tokens[..open]).is_some()
            && skip_group(tokens, open) == tokens.len()
        {
            acc.push(Access::new(&tokens[open - 1].text, AccessKind::Decl));
            return (StatementKind::Declaration, acc);
        }
    }

    uses_in(tokens, &mut acc);
    let is_call = tokens
        .windows(2)
        .any(|w| w[0].is_ident() && !is_keyword(&w[0].text) && w[1].is("("));
    let kind = if is_call { StatementKind::Call } else { StatementKind::Other };
    (kind, acc)
}

/// Accesses of a `for`/`while`/`foreach` header.
fn analyze_loop(tokens: &[Token]) -> Vec<Access> {
    let mut acc = Vec::new();
    let keyword = tokens[0].text.as_str();
    let Some(open) = tokens.iter().position(|t| t.is("(")) else {
        // Parenless `for x in xs` or `while cond`.
        if keyword == "for" {
            if let Some(in_pos) = tokens.iter().position(|t| t.text == "in") {
                uses_in(&tokens[in_pos + 1..], &mut acc);
                for t in tokens[1..in_pos].iter().filter(|t| is_name(t)) {
                    acc.push(Access::new(&t.text, AccessKind::HeaderDecl));
                }
                return acc;
            }
        }
        uses_in(&tokens[1..], &mut acc);
        return acc;
    };
    let close = skip_group(tokens, open);
    let inner = &tokens[open + 1..close.saturating_sub(1).max(open + 1)];
    let clauses = split_top_level(inner, ";");
    if clauses.len() == 3 {
        let (_, init) = analyze_simple(clauses[0], AccessKind::HeaderDecl);
        acc.extend(init);
        uses_in(clauses[1], &mut acc);
        let (_, step) = analyze_simple(clauses[2], AccessKind::HeaderDecl);
        acc.extend(step);
    } else {
        let split = inner
            .iter()
            .position(|t| t.is(":") || t.text == "in" || t.text == "of");
        match split {
            Some(p) if keyword == "for" || keyword == "foreach" => {
                uses_in(&inner[p + 1..], &mut acc);
                if let Some(name) = inner[..p].iter().rev().find(|t| is_name(t)) {
                    acc.push(Access::new(&name.text, AccessKind::HeaderDecl));
                }
            }
            _ => uses_in(inner, &mut acc),
        }
    }
    // Braceless body on the same statement.
    if close < tokens.len() {
        let (_, body) = analyze_simple(&tokens[close..], AccessKind::Decl);
        acc.extend(body);
    }
    acc
}

/// Kind and accesses of a statement. `header` is true when the statement
/// opens a block.
fn analyze(tokens: &[Token], header: bool) -> (StatementKind, Vec<Access>) {
    let tokens = strip_annotations(tokens);
    let Some(first) = tokens.first() else {
        return (StatementKind::Other, Vec::new());
    };
    let word = if first.is_ident() { first.text.as_str() } else { "" };

    if CONDITION_WORDS.contains(&word) {
        let mut acc = Vec::new();
        let mut rest = &tokens[1..];
        if word == "else" && rest.first().is_some_and(|t| t.text == "if") {
            rest = &rest[1..];
        }
        if word == "else" && !rest.first().is_some_and(|t| t.is("(")) {
            let (_, body) = analyze_simple(rest, AccessKind::Decl);
            return (StatementKind::Condition, body);
        }
        match rest.first() {
            Some(t) if t.is("(") => {
                let close = skip_group(rest, 0);
                uses_in(&rest[..close], &mut acc);
                if close < rest.len() {
                    let (_, body) = analyze_simple(&rest[close..], AccessKind::Decl);
                    acc.extend(body);
                }
            }
            _ => uses_in(rest, &mut acc),
        }
        return (StatementKind::Condition, acc);
    }
    if LOOP_WORDS.contains(&word) {
        if word == "do" {
            let (_, body) = analyze_simple(&tokens[1..], AccessKind::Decl);
            return (StatementKind::LoopHeader, body);
        }
        return (StatementKind::LoopHeader, analyze_loop(tokens));
    }
    if word == "catch" {
        let acc = tokens
            .iter()
            .position(|t| t.is("("))
            .map(|open| {
                parameter_names(tokens, open)
                    .into_iter()
                    .map(|n| Access::new(n, AccessKind::HeaderDecl))
                    .collect()
            })
            .unwrap_or_default();
        return (StatementKind::Other, acc);
    }

    if header {
        if let Some(pos) = tokens
            .iter()
            .position(|t| t.is_ident() && TYPE_DECL_WORDS.contains(&t.text.as_str()))
        {
            let acc = tokens[pos + 1..]
                .iter()
                .find(|t| is_name(t))
                .map(|t| vec![Access::new(&t.text, AccessKind::Decl)])
                .unwrap_or_default();
            return (StatementKind::Declaration, acc);
        }
        let open = tokens.iter().position(|t| t.is("("));
        if let Some(open) = open {
            if open > 0 && is_name(&tokens[open - 1]) && top_level_assignment(tokens).is_none() {
                let mut acc = vec![Access::new(&tokens[open - 1].text, AccessKind::Decl)];
                acc.extend(
                    parameter_names(tokens, open)
                        .into_iter()
                        .map(|n| Access::new(n, AccessKind::HeaderDecl)),
                );
                return (StatementKind::Signature, acc);
            }
        }
        let mut acc = Vec::new();
        uses_in(tokens, &mut acc);
        return (StatementKind::Other, acc);
    }
    analyze_simple(tokens, AccessKind::Decl)
}

/// Whether `{` after these tokens opens an expression (initializer, lambda,
/// anonymous class) rather than a statement block.
fn brace_is_expression(tokens: &[Token]) -> bool {
    let tokens = strip_annotations(tokens);
    let Some(first) = tokens.first() else {
        return false;
    };
    if first.is_ident()
        && (CONDITION_WORDS.contains(&first.text.as_str())
            || LOOP_WORDS.contains(&first.text.as_str())
            || matches!(first.text.as_str(), "try" | "catch" | "finally" | "unsafe"))
    {
        return false;
    }
    let last = &tokens[tokens.len() - 1];
    if ["=", "(", ",", "[", "=>", "->", "?", "return", ":", "||", "|", "&&", "+", "??"]
        .iter()
        .any(|p| last.text == *p)
    {
        return true;
    }
    top_level_assignment(tokens).is_some()
}

struct Builder {
    statements: Vec<RawStatement>,
    /// Raw-statement index of each open block's owner.
    blocks: Vec<(usize, usize)>,
    current: Vec<Token>,
    current_start: usize,
    current_end: usize,
    paren_depth: i32,
    expr_brace_depth: i32,
}

impl Builder {
    fn parent(&self) -> Option<usize> {
        self.blocks.last().map(|(owner, _)| *owner)
    }

    fn push_token(&mut self, tok: &Token) {
        if self.current.is_empty() {
            self.current_start = tok.line;
        }
        self.current_end = self.current_end.max(tok.end_line);
        self.current.push(tok.clone());
    }

    fn emit(&mut self, start: usize, end: usize, kind: StatementKind, trivia: bool, accesses: Vec<Access>) -> usize {
        let parent = self.parent();
        self.statements.push(RawStatement {
            start_line: start,
            end_line: end,
            kind,
            trivia,
            parent,
            accesses,
        });
        self.statements.len() - 1
    }

    fn finish(&mut self, header: bool, end_line: usize) -> Option<usize> {
        if self.current.is_empty() {
            return None;
        }
        let tokens = std::mem::take(&mut self.current);
        let (kind, accesses) = analyze(&tokens, header);
        let end = self.current_end.max(end_line);
        let idx = self.emit(self.current_start, end, kind, false, accesses);
        self.current_end = 0;
        self.paren_depth = 0;
        self.expr_brace_depth = 0;
        Some(idx)
    }

    fn trivia(&mut self, tok: &Token) {
        self.emit(tok.line, tok.end_line, StatementKind::Other, true, Vec::new());
    }
}

fn statements(source: &str) -> Result<Vec<RawStatement>, GrammarError> {
    let tokens = lex(source)?;
    let mut b = Builder {
        statements: Vec::new(),
        blocks: Vec::new(),
        current: Vec::new(),
        current_start: 0,
        current_end: 0,
        paren_depth: 0,
        expr_brace_depth: 0,
    };

    for tok in &tokens {
        match tok.kind {
            TokKind::Comment => {
                if b.current.is_empty() {
                    b.trivia(tok);
                } else {
                    b.current_end = b.current_end.max(tok.end_line);
                }
                continue;
            }
            TokKind::Preproc => {
                let mut acc = Vec::new();
                let mut kind = StatementKind::Other;
                let words: Vec<&str> = tok.text.trim_start_matches('#').split_whitespace().collect();
                if words.first() == Some(&"define") {
                    if let Some(name) = words.get(1) {
                        let name: String = name.chars().take_while(|c| c.is_alphanumeric() || *c == '_').collect();
                        acc.push(Access::new(name, AccessKind::Decl));
                        kind = StatementKind::Declaration;
                    }
                }
                b.emit(tok.line, tok.end_line, kind, false, acc);
                continue;
            }
            _ => {}
        }

        if b.expr_brace_depth > 0 {
            b.push_token(tok);
            if tok.is("{") || tok.is("(") || tok.is("[") {
                if tok.is("{") {
                    b.expr_brace_depth += 1;
                } else {
                    b.paren_depth += 1;
                }
            } else if tok.is("}") {
                b.expr_brace_depth -= 1;
            } else if tok.is(")") || tok.is("]") {
                b.paren_depth -= 1;
            }
            continue;
        }

        if tok.is("(") || tok.is("[") {
            b.paren_depth += 1;
            b.push_token(tok);
            continue;
        }
        if tok.is(")") || tok.is("]") {
            b.paren_depth -= 1;
            b.push_token(tok);
            continue;
        }
        if tok.is("{") {
            if b.paren_depth > 0 || (!b.current.is_empty() && brace_is_expression(&b.current)) {
                b.expr_brace_depth += 1;
                b.push_token(tok);
                continue;
            }
            let owner = match b.finish(true, tok.line) {
                Some(idx) => idx,
                None => b.emit(tok.line, tok.line, StatementKind::Other, true, Vec::new()),
            };
            b.blocks.push((owner, tok.line));
            continue;
        }
        if tok.is("}") {
            b.finish(false, tok.line);
            let Some((owner, _)) = b.blocks.pop() else {
                return Err(GrammarError {
                    line: tok.line,
                    message: "unbalanced closing brace".into(),
                });
            };
            // The closing brace belongs to the block it closes.
            b.statements.push(RawStatement {
                start_line: tok.line,
                end_line: tok.end_line,
                kind: StatementKind::Other,
                trivia: true,
                parent: Some(owner),
                accesses: Vec::new(),
            });
            continue;
        }
        if tok.is(";") && b.paren_depth <= 0 {
            if b.finish(false, tok.line).is_none() {
                b.trivia(tok);
            }
            continue;
        }
        if tok.is(":")
            && b.paren_depth <= 0
            && b.current.first().is_some_and(|t| t.text == "case" || t.text == "default")
        {
            b.push_token(tok);
            b.finish(false, tok.line);
            continue;
        }
        b.push_token(tok);
    }
    b.finish(false, 0);
    if let Some((_, line)) = b.blocks.last() {
        return Err(GrammarError {
            line: *line,
            message: "unclosed block".into(),
        });
    }
    Ok(b.statements)
}

impl Grammar for CLike {
    fn id(&self) -> &'static str {
        "clike"
    }

    fn statements(&self, source: &str) -> Result<Vec<RawStatement>, GrammarError> {
        statements(source)
    }
}
