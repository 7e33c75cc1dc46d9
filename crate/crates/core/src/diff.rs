//! Unified diff parsing and the line-level bookkeeping built on top of it.
//!
//! A diff is decomposed into [`DiffRegion`]s: one per contiguous run of
//! `-`/`+` lines inside a hunk. Regions are the unit every later stage maps
//! onto statements.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DiffError {
    #[error("malformed hunk header at line {line}: {text:?}")]
    MalformedHunkHeader { line: usize, text: String },
    #[error("hunk starting at line {line} contradicts its header: {detail}")]
    InconsistentLineCount { line: usize, detail: String },
    #[error("patch for {file} does not apply at line {line}")]
    DoesNotApply { file: String, line: usize },
}

/// A 1-based line interval stored as `start` plus `len`.
///
/// An empty range (`len == 0`) denotes the gap immediately before line
/// `start`, which is how pure insertions and pure deletions record their
/// position in the other version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LineRange {
    pub start: usize,
    pub len: usize,
}

impl LineRange {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Last line of the range (inclusive). Meaningless for empty ranges.
    pub fn last(&self) -> usize {
        self.start + self.len - 1
    }

    pub fn contains(&self, line: usize) -> bool {
        self.len > 0 && line >= self.start && line <= self.last()
    }

    /// Whether this range shares at least one line with the inclusive
    /// interval `[lo, hi]`.
    pub fn intersects(&self, lo: usize, hi: usize) -> bool {
        self.len > 0 && self.start <= hi && lo <= self.last()
    }

    pub fn lines(&self) -> impl Iterator<Item = usize> {
        self.start..self.start + self.len
    }
}

/// One contiguous changed run of a hunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffRegion {
    pub file_path: String,
    pub old_range: LineRange,
    pub new_range: LineRange,
    pub removed_lines: Vec<String>,
    pub added_lines: Vec<String>,
}

impl DiffRegion {
    pub fn is_well_formed(&self) -> bool {
        self.removed_lines.len() == self.old_range.len
            && self.added_lines.len() == self.new_range.len
            && !(self.removed_lines.is_empty() && self.added_lines.is_empty())
    }
}

/// A parsed hunk, kept for callers that need the full body (context lines
/// included), e.g. patch application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hunk {
    pub old_start: usize,
    pub old_len: usize,
    pub new_start: usize,
    pub new_len: usize,
    pub lines: Vec<HunkLine>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HunkLine {
    Context(String),
    Removed(String),
    Added(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilePatch {
    /// Path in the old version, `None` for created files.
    pub old_path: Option<String>,
    /// Path in the new version, `None` for deleted files.
    pub new_path: Option<String>,
    pub hunks: Vec<Hunk>,
}

impl FilePatch {
    /// The path regions are attributed to: the new path unless the file was deleted.
    pub fn path(&self) -> &str {
        self.new_path
            .as_deref()
            .or(self.old_path.as_deref())
            .unwrap_or_default()
    }
}

fn strip_prefix_path(raw: &str) -> Option<String> {
    let raw = raw.split('\t').next().unwrap_or(raw).trim_end();
    if raw == "/dev/null" {
        return None;
    }
    let stripped = raw
        .strip_prefix("a/")
        .or_else(|| raw.strip_prefix("b/"))
        .unwrap_or(raw);
    Some(stripped.to_string())
}

fn parse_hunk_header(text: &str, line_no: usize) -> Result<(usize, usize, usize, usize), DiffError> {
    let malformed = || DiffError::MalformedHunkHeader {
        line: line_no,
        text: text.to_string(),
    };
    let rest = text.strip_prefix("@@ -").ok_or_else(malformed)?;
    let end = rest.find(" @@").ok_or_else(malformed)?;
    let (old, new) = rest[..end].split_once(" +").ok_or_else(malformed)?;
    let parse_pair = |s: &str| -> Option<(usize, usize)> {
        match s.split_once(',') {
            Some((a, b)) => Some((a.parse().ok()?, b.parse().ok()?)),
            None => Some((s.parse().ok()?, 1)),
        }
    };
    let (os, ol) = parse_pair(old).ok_or_else(malformed)?;
    let (ns, nl) = parse_pair(new).ok_or_else(malformed)?;
    Ok((os, ol, ns, nl))
}

/// Parses a (possibly multi-file) unified diff into per-file patches.
pub fn parse_patches(diff_text: &str) -> Result<Vec<FilePatch>, DiffError> {
    let lines: Vec<&str> = diff_text.lines().collect();
    let mut patches: Vec<FilePatch> = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if let Some(rest) = line.strip_prefix("--- ") {
            let next = lines.get(i + 1).copied().unwrap_or_default();
            if let Some(target) = next.strip_prefix("+++ ") {
                patches.push(FilePatch {
                    old_path: strip_prefix_path(rest),
                    new_path: strip_prefix_path(target),
                    hunks: Vec::new(),
                });
                i += 2;
                continue;
            }
        }
        if line.starts_with("@@") {
            let header_line = i + 1;
            let (old_start, old_len, new_start, new_len) = parse_hunk_header(line, header_line)?;
            let patch = patches.last_mut().ok_or_else(|| DiffError::MalformedHunkHeader {
                line: header_line,
                text: format!("{line} (hunk without file header)"),
            })?;
            let mut hunk = Hunk {
                old_start,
                old_len,
                new_start,
                new_len,
                lines: Vec::new(),
            };
            let (mut old_seen, mut new_seen) = (0usize, 0usize);
            i += 1;
            while old_seen < old_len || new_seen < new_len {
                let Some(&body) = lines.get(i) else {
                    return Err(DiffError::InconsistentLineCount {
                        line: header_line,
                        detail: format!(
                            "expected -{old_len}/+{new_len} lines, diff ended after -{old_seen}/+{new_seen}"
                        ),
                    });
                };
                let parsed = match body.chars().next() {
                    Some(' ') => {
                        old_seen += 1;
                        new_seen += 1;
                        HunkLine::Context(body[1..].to_string())
                    }
                    // Some tools strip the lone space of empty context lines.
                    None => {
                        old_seen += 1;
                        new_seen += 1;
                        HunkLine::Context(String::new())
                    }
                    Some('-') => {
                        old_seen += 1;
                        HunkLine::Removed(body[1..].to_string())
                    }
                    Some('+') => {
                        new_seen += 1;
                        HunkLine::Added(body[1..].to_string())
                    }
                    Some('\\') => {
                        i += 1;
                        continue;
                    }
                    _ => {
                        return Err(DiffError::InconsistentLineCount {
                            line: header_line,
                            detail: format!("unexpected body line {:?}", body),
                        })
                    }
                };
                if old_seen > old_len || new_seen > new_len {
                    return Err(DiffError::InconsistentLineCount {
                        line: header_line,
                        detail: format!("body exceeds header counts -{old_len}/+{new_len}"),
                    });
                }
                hunk.lines.push(parsed);
                i += 1;
            }
            while lines.get(i).is_some_and(|l| l.starts_with('\\')) {
                i += 1;
            }
            if let Some(&after) = lines.get(i) {
                let is_body = after.starts_with(' ')
                    || (after.starts_with('+') && !after.starts_with("+++ "))
                    || (after.starts_with('-')
                        && !(after.starts_with("--- ")
                            && lines.get(i + 1).is_some_and(|n| n.starts_with("+++ "))));
                if is_body {
                    return Err(DiffError::InconsistentLineCount {
                        line: header_line,
                        detail: format!("body exceeds header counts -{old_len}/+{new_len}"),
                    });
                }
            }
            patch.hunks.push(hunk);
            continue;
        }
        i += 1;
    }
    Ok(patches)
}

/// Parses a unified diff into its changed regions, in file then line order.
pub fn parse_unified_diff(diff_text: &str) -> Result<Vec<DiffRegion>, DiffError> {
    Ok(regions_of(&parse_patches(diff_text)?))
}

pub fn regions_of(patches: &[FilePatch]) -> Vec<DiffRegion> {
    let mut regions = Vec::new();
    for patch in patches {
        let path = patch.path().to_string();
        for hunk in &patch.hunks {
            let mut old_line = if hunk.old_len == 0 { hunk.old_start + 1 } else { hunk.old_start };
            let mut new_line = if hunk.new_len == 0 { hunk.new_start + 1 } else { hunk.new_start };
            let mut current: Option<DiffRegion> = None;
            for line in &hunk.lines {
                match line {
                    HunkLine::Context(_) => {
                        if let Some(region) = current.take() {
                            regions.push(region);
                        }
                        old_line += 1;
                        new_line += 1;
                    }
                    HunkLine::Removed(text) => {
                        let region = current.get_or_insert_with(|| DiffRegion {
                            file_path: path.clone(),
                            old_range: LineRange::new(old_line, 0),
                            new_range: LineRange::new(new_line, 0),
                            removed_lines: Vec::new(),
                            added_lines: Vec::new(),
                        });
                        region.old_range.len += 1;
                        region.removed_lines.push(text.clone());
                        old_line += 1;
                    }
                    HunkLine::Added(text) => {
                        let region = current.get_or_insert_with(|| DiffRegion {
                            file_path: path.clone(),
                            old_range: LineRange::new(old_line, 0),
                            new_range: LineRange::new(new_line, 0),
                            removed_lines: Vec::new(),
                            added_lines: Vec::new(),
                        });
                        region.new_range.len += 1;
                        region.added_lines.push(text.clone());
                        new_line += 1;
                    }
                }
            }
            if let Some(region) = current.take() {
                regions.push(region);
            }
        }
    }
    regions
}

/// Maps unchanged lines between the old and new version of one file.
#[derive(Debug, Clone, Default)]
pub struct LineMap {
    /// `(old_start, new_start, old_len, new_len)` of each region, sorted.
    spans: Vec<(usize, usize, usize, usize)>,
}

impl LineMap {
    pub fn new<'a>(regions: impl IntoIterator<Item = &'a DiffRegion>) -> Self {
        let mut spans: Vec<_> = regions
            .into_iter()
            .map(|r| (r.old_range.start, r.new_range.start, r.old_range.len, r.new_range.len))
            .collect();
        spans.sort_unstable();
        Self { spans }
    }

    fn shift_before_old(&self, old_line: usize) -> isize {
        self.spans
            .iter()
            .filter(|(os, _, ol, _)| os + ol <= old_line)
            .map(|(_, _, ol, nl)| *nl as isize - *ol as isize)
            .sum()
    }

    fn shift_before_new(&self, new_line: usize) -> isize {
        self.spans
            .iter()
            .filter(|(_, ns, _, nl)| ns + nl <= new_line)
            .map(|(_, _, ol, nl)| *ol as isize - *nl as isize)
            .sum()
    }

    /// New-version line of an unchanged old line; `None` for removed lines.
    pub fn old_to_new(&self, old_line: usize) -> Option<usize> {
        if self
            .spans
            .iter()
            .any(|(os, _, ol, _)| old_line >= *os && old_line < os + ol)
        {
            return None;
        }
        Some((old_line as isize + self.shift_before_old(old_line)) as usize)
    }

    /// Old-version line of an unchanged new line; `None` for added lines.
    pub fn new_to_old(&self, new_line: usize) -> Option<usize> {
        if self
            .spans
            .iter()
            .any(|(_, ns, _, nl)| new_line >= *ns && new_line < ns + nl)
        {
            return None;
        }
        Some((new_line as isize + self.shift_before_new(new_line)) as usize)
    }

    /// Number of old-version lines that precede an added new line.
    pub fn old_lines_before_new(&self, new_line: usize) -> usize {
        for (os, ns, ol, nl) in &self.spans {
            if new_line >= *ns && new_line < ns + nl {
                return os - 1 + ol;
            }
        }
        (new_line as isize + self.shift_before_new(new_line)) as usize - 1
    }

    /// Number of new-version lines that precede a removed old line.
    pub fn new_lines_before_old(&self, old_line: usize) -> usize {
        for (os, ns, ol, _) in &self.spans {
            if old_line >= *os && old_line < os + ol {
                return ns - 1;
            }
        }
        (old_line as isize + self.shift_before_old(old_line)) as usize - 1
    }
}

/// Splits text into lines without terminators.
pub fn split_lines(text: &str) -> Vec<&str> {
    text.lines().collect()
}

fn join_lines(lines: &[String], trailing_newline: bool) -> String {
    let mut out = lines.join("\n");
    if trailing_newline && !lines.is_empty() {
        out.push('\n');
    }
    out
}

/// Applies one file's hunks to `old`, requiring exact positions.
pub fn apply_file_patch(old: &str, patch: &FilePatch) -> Result<String, DiffError> {
    let old_lines: Vec<&str> = old.lines().collect();
    let mut out: Vec<String> = Vec::new();
    let mut cursor = 0usize;
    for hunk in &patch.hunks {
        let start = if hunk.old_len == 0 { hunk.old_start } else { hunk.old_start - 1 };
        if start < cursor || start > old_lines.len() {
            return Err(DiffError::DoesNotApply {
                file: patch.path().to_string(),
                line: hunk.old_start,
            });
        }
        out.extend(old_lines[cursor..start].iter().map(|s| s.to_string()));
        let mut pos = start;
        for line in &hunk.lines {
            match line {
                HunkLine::Context(text) | HunkLine::Removed(text) => {
                    if old_lines.get(pos) != Some(&text.as_str()) {
                        return Err(DiffError::DoesNotApply {
                            file: patch.path().to_string(),
                            line: pos + 1,
                        });
                    }
                    if matches!(line, HunkLine::Context(_)) {
                        out.push(text.clone());
                    }
                    pos += 1;
                }
                HunkLine::Added(text) => out.push(text.clone()),
            }
        }
        cursor = pos;
    }
    out.extend(old_lines[cursor..].iter().map(|s| s.to_string()));
    Ok(join_lines(&out, true))
}

/// Applies a multi-file diff to a snapshot map (path → content). Created
/// files start empty; deleted files are removed.
pub fn apply_patches(
    snapshot: &BTreeMap<String, String>,
    patches: &[FilePatch],
) -> Result<BTreeMap<String, String>, DiffError> {
    let mut result = snapshot.clone();
    for patch in patches {
        let old_text = patch
            .old_path
            .as_ref()
            .and_then(|p| snapshot.get(p))
            .cloned()
            .unwrap_or_default();
        let new_text = apply_file_patch(&old_text, patch)?;
        if let Some(old_path) = &patch.old_path {
            result.remove(old_path);
        }
        if let Some(new_path) = &patch.new_path {
            result.insert(new_path.clone(), new_text);
        }
    }
    Ok(result)
}

/// One line-level edit against a base text: replace `old_len` lines starting
/// at `old_start` (1-based, gap-before semantics when empty) with `added`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineEdit {
    pub old_start: usize,
    pub removed: Vec<String>,
    pub added: Vec<String>,
}

/// Renders a unified diff for one file from sorted, non-overlapping edits.
pub fn render_file_diff(
    old_path: Option<&str>,
    new_path: Option<&str>,
    old_text: &str,
    edits: &[LineEdit],
    context: usize,
) -> String {
    let old_lines: Vec<&str> = old_text.lines().collect();
    let mut out = String::new();
    let display = new_path.or(old_path).unwrap_or_default();
    out.push_str(&format!("diff --git a/{display} b/{display}\n"));
    match old_path {
        Some(p) => out.push_str(&format!("--- a/{p}\n")),
        None => out.push_str("--- /dev/null\n"),
    }
    match new_path {
        Some(p) => out.push_str(&format!("+++ b/{p}\n")),
        None => out.push_str("+++ /dev/null\n"),
    }
    if edits.is_empty() {
        return out;
    }

    // Group edits whose context windows touch into one hunk.
    let mut groups: Vec<Vec<&LineEdit>> = Vec::new();
    for edit in edits {
        let lo = edit.old_start;
        if let Some(group) = groups.last_mut() {
            let prev = group.last().unwrap();
            let prev_end = prev.old_start + prev.removed.len();
            if lo <= prev_end + 2 * context {
                group.push(edit);
                continue;
            }
        }
        groups.push(vec![edit]);
    }

    let mut shift: isize = 0;
    for group in groups {
        let first = group[0];
        let last = group[group.len() - 1];
        let hunk_old_first = first.old_start.saturating_sub(context).max(1);
        let hunk_old_end = (last.old_start + last.removed.len() + context).min(old_lines.len() + 1);
        let mut body = Vec::new();
        let mut pos = hunk_old_first;
        let (mut old_count, mut new_count) = (0usize, 0usize);
        let mut group_shift: isize = 0;
        for edit in &group {
            while pos < edit.old_start {
                body.push(format!(" {}", old_lines[pos - 1]));
                old_count += 1;
                new_count += 1;
                pos += 1;
            }
            for r in &edit.removed {
                body.push(format!("-{r}"));
                old_count += 1;
                pos += 1;
            }
            for a in &edit.added {
                body.push(format!("+{a}"));
                new_count += 1;
            }
            group_shift += edit.added.len() as isize - edit.removed.len() as isize;
        }
        while pos < hunk_old_end {
            body.push(format!(" {}", old_lines[pos - 1]));
            old_count += 1;
            new_count += 1;
            pos += 1;
        }
        let old_start = if old_count == 0 { hunk_old_first - 1 } else { hunk_old_first };
        let new_first = (hunk_old_first as isize + shift) as usize;
        let new_start = if new_count == 0 { new_first - 1 } else { new_first };
        out.push_str(&format!("@@ -{old_start},{old_count} +{new_start},{new_count} @@\n"));
        for line in body {
            out.push_str(&line);
            out.push('\n');
        }
        shift += group_shift;
    }
    out
}

/// Applies sorted, non-overlapping edits to a base text.
pub fn apply_edits(old_text: &str, edits: &[LineEdit]) -> String {
    let old_lines: Vec<&str> = old_text.lines().collect();
    let mut out: Vec<String> = Vec::new();
    let mut pos = 1usize;
    for edit in edits {
        while pos < edit.old_start {
            out.push(old_lines[pos - 1].to_string());
            pos += 1;
        }
        out.extend(edit.added.iter().cloned());
        pos += edit.removed.len();
    }
    while pos <= old_lines.len() {
        out.push(old_lines[pos - 1].to_string());
        pos += 1;
    }
    join_lines(&out, true)
}
