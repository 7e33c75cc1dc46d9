//! Atomic commits from git history, labeled composite commits built from
//! them, and chronological splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Purpose, ReplayRecord};
use crate::changegraph::{build_commit_graph, FileVersions, GraphError, NodeId, Version};
use crate::diff::{apply_edits, parse_patches, parse_unified_diff, render_file_diff, DiffError, LineEdit};
use crate::intent::{ChangeCategory, IntentProfile};
use crate::metrics::{GroundTruth, Label};
use crate::purifier::MinimalChangeSubgraph;

/// Unchanged lines on each side of an edit used to find it again in
/// another snapshot of the same file.
const ANCHOR_LINES: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{0} is not a git repository")]
    NotARepository(PathBuf),
    #[error("missing git object {object}: {detail}")]
    MissingObject { object: String, detail: String },
    #[error("git failed: {0}")]
    Git(String),
    #[error("constituents {a} and {b} both edit {file} around line {line}")]
    OverlappingChanges { a: String, b: String, file: String, line: usize },
    #[error("edit of {commit} in {file} at line {line} has no matching text in the composite base")]
    BaseMismatch { commit: String, file: String, line: usize },
    #[error("a composite needs at least two constituents")]
    TooFewConstituents,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicCommit {
    pub commit_id: String,
    pub timestamp: i64,
    pub diff_text: String,
    pub files: Vec<FileVersions>,
}

fn git(repo: &Path, args: &[&str]) -> Result<std::process::Output, DatasetError> {
    Command::new("git")
        .arg("-C")
        .arg(repo)
        .args(["-c", "core.quotePath=false"])
        .args(args)
        .output()
        .map_err(|e| DatasetError::Git(format!("cannot run git: {e}")))
}

fn git_text(repo: &Path, args: &[&str]) -> Result<String, DatasetError> {
    let out = git(repo, args)?;
    if !out.status.success() {
        return Err(DatasetError::MissingObject {
            object: args.last().copied().unwrap_or_default().to_string(),
            detail: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Non-merge commits of `commit_range` (anything `git rev-list` accepts),
/// ordered by commit time and then id.
pub fn ingest_repo(repo: &Path, commit_range: &str) -> Result<Vec<AtomicCommit>, DatasetError> {
    let probe = git(repo, &["rev-parse", "--git-dir"])?;
    if !probe.status.success() {
        return Err(DatasetError::NotARepository(repo.to_path_buf()));
    }
    let listing = git_text(repo, &["rev-list", "--no-merges", "--format=%ct", commit_range])?;
    let mut ids = Vec::new();
    let mut lines = listing.lines();
    while let Some(header) = lines.next() {
        let Some(id) = header.strip_prefix("commit ") else { continue };
        let timestamp = lines
            .next()
            .and_then(|t| t.trim().parse::<i64>().ok())
            .ok_or_else(|| DatasetError::Git(format!("no timestamp for {id}")))?;
        ids.push((timestamp, id.trim().to_string()));
    }
    ids.sort();

    ids.into_iter().map(|(timestamp, id)| load_snapshot(repo, &id, timestamp)).collect()
}

/// One commit, diffed against its first parent (or the empty tree).
pub fn load_commit(repo: &Path, rev: &str) -> Result<AtomicCommit, DatasetError> {
    let probe = git(repo, &["rev-parse", "--git-dir"])?;
    if !probe.status.success() {
        return Err(DatasetError::NotARepository(repo.to_path_buf()));
    }
    let id = git_text(repo, &["rev-parse", "--verify", &format!("{rev}^{{commit}}")])?.trim().to_string();
    let timestamp = git_text(repo, &["show", "-s", "--format=%ct", &id])?
        .trim()
        .parse::<i64>()
        .map_err(|e| DatasetError::Git(format!("bad timestamp for {id}: {e}")))?;
    load_snapshot(repo, &id, timestamp)
}

fn load_snapshot(repo: &Path, id: &str, timestamp: i64) -> Result<AtomicCommit, DatasetError> {
    let parent = git_text(repo, &["rev-list", "--parents", "-n", "1", id])?
        .split_whitespace()
        .nth(1)
        .map(str::to_string);
    let diff_text = match &parent {
        Some(p) => git_text(repo, &["diff", "--no-color", "--no-renames", "--no-ext-diff", "-U3", p, id])?,
        None => git_text(repo, &["show", "--no-color", "--no-renames", "--format=", "-U3", id])?,
    };
    let mut files = Vec::new();
    for patch in parse_patches(&diff_text)? {
        let old = match (&patch.old_path, &parent) {
            (Some(path), Some(p)) => Some(git_text(repo, &["cat-file", "blob", &format!("{p}:{path}")])?),
            _ => None,
        };
        let new = match &patch.new_path {
            Some(path) => Some(git_text(repo, &["cat-file", "blob", &format!("{id}:{path}")])?),
            None => None,
        };
        files.push(FileVersions { path: patch.path().to_string(), old, new });
    }
    Ok(AtomicCommit { commit_id: id.to_string(), timestamp, diff_text, files })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeCommit {
    pub composite_id: String,
    /// Constituent commit ids; concern label `i` is the `i`-th entry.
    pub constituents: Vec<String>,
    pub timestamp: i64,
    pub merged_diff: String,
    pub files: Vec<FileVersions>,
    pub ground_truth: GroundTruth<NodeId>,
}

impl CompositeCommit {
    pub fn concern_count(&self) -> usize {
        self.constituents.len()
    }
}

struct TaggedEdit {
    constituent: usize,
    edit: LineEdit,
}

/// Finds where `region` of `source` sits in `base`, by matching the edited
/// lines together with their surrounding anchor lines. The match nearest to
/// the original position wins.
fn relocate(base: &[&str], source: &[&str], start: usize, removed: usize) -> Option<usize> {
    let first = start - 1;
    let before = first.min(ANCHOR_LINES);
    let after_end = (first + removed + ANCHOR_LINES).min(source.len());
    let block = &source[first - before..after_end];
    let at_file_start = first - before == 0;
    let at_file_end = after_end == source.len();
    if block.len() > base.len() {
        return None;
    }
    let wanted = (first - before) as isize;
    (0..=base.len() - block.len())
        .filter(|&p| base[p..p + block.len()] == *block)
        .filter(|&p| !at_file_start || p == 0 || before == ANCHOR_LINES)
        .filter(|&p| !at_file_end || p + block.len() == base.len() || after_end - (first + removed) == ANCHOR_LINES)
        .min_by_key(|&p| ((p as isize - wanted).abs(), p))
        .map(|p| p + before + 1)
}

/// Merges the constituents' diffs onto one base snapshot per file.
///
/// The base of a file is the pre-image from the earliest constituent that
/// touches it. Each later edit is located in that base by its surrounding
/// text. Edits of different constituents must be separated by at least
/// one unchanged line, and no statement may contain lines of two
/// constituents.
pub fn synthesize_composite(
    composite_id: &str,
    constituents: &[AtomicCommit],
    grammar_id: &str,
) -> Result<CompositeCommit, DatasetError> {
    if constituents.len() < 2 {
        return Err(DatasetError::TooFewConstituents);
    }
    let mut ordered: Vec<&AtomicCommit> = constituents.iter().collect();
    ordered.sort_by(|a, b| (a.timestamp, &a.commit_id).cmp(&(b.timestamp, &b.commit_id)));

    let mut bases: BTreeMap<String, (bool, String)> = BTreeMap::new();
    let mut deleted: BTreeMap<String, usize> = BTreeMap::new();
    let mut edits: BTreeMap<String, Vec<TaggedEdit>> = BTreeMap::new();
    for (ci, commit) in ordered.iter().enumerate() {
        let regions = parse_unified_diff(&commit.diff_text)?;
        for file in &commit.files {
            let (base_exists, base_text) = bases
                .entry(file.path.clone())
                .or_insert_with(|| (file.old.is_some(), file.old.clone().unwrap_or_default()))
                .clone();
            if file.new.is_none() {
                deleted.insert(file.path.clone(), ci);
            }
            if !base_exists && file.old.is_some() {
                return Err(DatasetError::BaseMismatch { commit: commit.commit_id.clone(), file: file.path.clone(), line: 1 });
            }
            let base_lines: Vec<&str> = base_text.lines().collect();
            let source_text = file.old.clone().unwrap_or_default();
            let source_lines: Vec<&str> = source_text.lines().collect();
            for r in regions.iter().filter(|r| r.file_path == file.path) {
                let at = relocate(&base_lines, &source_lines, r.old_range.start, r.old_range.len).ok_or_else(|| {
                    DatasetError::BaseMismatch {
                        commit: commit.commit_id.clone(),
                        file: file.path.clone(),
                        line: r.old_range.start,
                    }
                })?;
                edits.entry(file.path.clone()).or_default().push(TaggedEdit {
                    constituent: ci,
                    edit: LineEdit { old_start: at, removed: r.removed_lines.clone(), added: r.added_lines.clone() },
                });
            }
        }
    }

    let overlap = |file: &str, a: usize, b: usize, line: usize| DatasetError::OverlappingChanges {
        a: ordered[a].commit_id.clone(),
        b: ordered[b].commit_id.clone(),
        file: file.to_string(),
        line,
    };
    for (path, &ci) in &deleted {
        if let Some(other) = edits.get(path).into_iter().flatten().find(|e| e.constituent != ci) {
            return Err(overlap(path, ci, other.constituent, 1));
        }
    }

    let mut merged_diff = String::new();
    let mut files = Vec::new();
    // (file, version, line) -> constituent
    let mut owner: BTreeMap<(String, Version, usize), usize> = BTreeMap::new();
    for (path, list) in &mut edits {
        list.sort_by_key(|e| (e.edit.old_start, e.edit.removed.len(), e.constituent));
        for pair in list.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let a_end = a.edit.old_start + a.edit.removed.len();
            let touching = b.edit.old_start <= a_end;
            if touching && a.constituent != b.constituent {
                return Err(overlap(path, a.constituent, b.constituent, b.edit.old_start));
            }
            if b.edit.old_start < a_end {
                return Err(overlap(path, a.constituent, b.constituent, b.edit.old_start));
            }
        }
        let (base_exists, base_text) = &bases[path];
        let line_edits: Vec<LineEdit> = list.iter().map(|e| e.edit.clone()).collect();
        let new_text = apply_edits(base_text, &line_edits);
        let is_deleted = deleted.contains_key(path);
        let old_path = base_exists.then_some(path.as_str());
        let new_path = (!is_deleted).then_some(path.as_str());
        merged_diff.push_str(&render_file_diff(old_path, new_path, base_text, &line_edits, 3));

        let mut shift: isize = 0;
        for e in list.iter() {
            let new_start = (e.edit.old_start as isize + shift) as usize;
            for l in 0..e.edit.removed.len() {
                owner.insert((path.clone(), Version::Old, e.edit.old_start + l), e.constituent);
            }
            for l in 0..e.edit.added.len() {
                owner.insert((path.clone(), Version::New, new_start + l), e.constituent);
            }
            shift += e.edit.added.len() as isize - e.edit.removed.len() as isize;
        }
        files.push(FileVersions {
            path: path.clone(),
            old: base_exists.then(|| base_text.clone()),
            new: (!is_deleted).then_some(new_text),
        });
    }

    let regions = parse_unified_diff(&merged_diff)?;
    let graph = build_commit_graph(&files, &regions, grammar_id)?;
    let mut labels = BTreeMap::new();
    for node in graph.changed_nodes() {
        let id = &node.id;
        let owners: BTreeSet<usize> = (id.start..=id.end)
            .filter_map(|l| owner.get(&(id.file.clone(), id.version, l)).copied())
            .collect();
        let mut it = owners.iter();
        match (it.next(), it.next()) {
            (Some(&a), Some(&b)) => return Err(overlap(&id.file, a, b, id.start)),
            (Some(&a), None) => {
                labels.insert(id.clone(), a as Label);
            }
            (None, _) => {}
        }
    }
    Ok(CompositeCommit {
        composite_id: composite_id.to_string(),
        constituents: ordered.iter().map(|c| c.commit_id.clone()).collect(),
        timestamp: ordered.last().map_or(0, |c| c.timestamp),
        merged_diff,
        files,
        ground_truth: GroundTruth { labels, total_statements: graph.nodes.len() },
    })
}

/// Split proportions in whole percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: u32,
    pub validation: u32,
    pub test: u32,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 80, validation: 10, test: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

/// Oldest items train, newest test. Boundaries are the floors of the
/// cumulative fractions, computed exactly.
pub fn chronological_split<T: Clone, K: Ord>(items: &[T], key: impl Fn(&T) -> K, fractions: SplitFractions) -> Split<T> {
    assert_eq!(fractions.train + fractions.validation + fractions.test, 100, "fractions must sum to 100%");
    let mut sorted: Vec<&T> = items.iter().collect();
    sorted.sort_by_key(|t| key(t));
    let n = sorted.len();
    let b1 = n * fractions.train as usize / 100;
    let b2 = n * (fractions.train + fractions.validation) as usize / 100;
    let take = |r: std::ops::Range<usize>| sorted[r].iter().map(|t| (*t).clone()).collect();
    Split { train: take(0..b1), validation: take(b1..b2), test: take(b2..n) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

/// Draws up to `count` composites of `k_min..=k_max` distinct commits.
/// Tuples that overlap or cannot be merged are skipped; sampling stops
/// after a bounded number of draws.
pub fn sample_composites(
    commits: &[AtomicCommit],
    count: usize,
    k_min: usize,
    k_max: usize,
    seed: u64,
    grammar_id: &str,
) -> Vec<CompositeCommit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    let k_min = k_min.max(2);
    if count == 0 || commits.len() < k_min || k_max < k_min {
        return out;
    }
    let max_draws = count * 50 + 100;
    for _ in 0..max_draws {
        if out.len() == count {
            break;
        }
        let k = rng.gen_range(k_min..=k_max.min(commits.len()));
        let mut picked: Vec<usize> = sample(&mut rng, commits.len(), k).into_vec();
        picked.sort_unstable();
        if !seen.insert(picked.clone()) {
            continue;
        }
        let tuple: Vec<AtomicCommit> = picked.iter().map(|&i| commits[i].clone()).collect();
        let id = format!("composite-{:04}", out.len() + 1);
        match synthesize_composite(&id, &tuple, grammar_id) {
            Ok(c) => out.push(c),
            Err(e) => log::debug!("skipping {picked:?}: {e}"),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub node: NodeId,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub composite_id: String,
    pub constituents: Vec<String>,
    pub timestamp: i64,
    pub split: SplitName,
    /// Paths relative to the manifest's directory.
    pub merged_diff: String,
    pub old_dir: String,
    pub new_dir: String,
    pub files: Vec<String>,
    pub concern_count: usize,
    pub total_statements: usize,
    pub labels: Vec<LabelRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub grammar: String,
    pub k_min: usize,
    pub k_max: usize,
    pub source_commits: usize,
    pub composites: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// Writes the merged diff and both snapshots under `root/<composite_id>/`.
pub fn write_composite(root: &Path, composite: &CompositeCommit, split: SplitName) -> Result<ManifestEntry, DatasetError> {
    let rel = composite.composite_id.clone();
    let dir = root.join(&rel);
    write_file(&dir.join("merged.diff"), &composite.merged_diff)?;
    std::fs::create_dir_all(dir.join("old")).map_err(io_err(&dir))?;
    std::fs::create_dir_all(dir.join("new")).map_err(io_err(&dir))?;
    for f in &composite.files {
        if let Some(old) = &f.old {
            write_file(&dir.join("old").join(&f.path), old)?;
        }
        if let Some(new) = &f.new {
            write_file(&dir.join("new").join(&f.path), new)?;
        }
    }
    Ok(ManifestEntry {
        composite_id: composite.composite_id.clone(),
        constituents: composite.constituents.clone(),
        timestamp: composite.timestamp,
        split,
        merged_diff: format!("{rel}/merged.diff"),
        old_dir: format!("{rel}/old"),
        new_dir: format!("{rel}/new"),
        files: composite.files.iter().map(|f| f.path.clone()).collect(),
        concern_count: composite.concern_count(),
        total_statements: composite.ground_truth.total_statements,
        labels: composite
            .ground_truth
            .labels
            .iter()
            .map(|(node, label)| LabelRecord { node: node.clone(), label: *label })
            .collect(),
    })
}

/// Reads back a composite's diff and snapshots from the manifest's directory.
pub fn read_composite_inputs(root: &Path, entry: &ManifestEntry) -> Result<(String, Vec<FileVersions>), DatasetError> {
    let diff_path = root.join(&entry.merged_diff);
    let diff = std::fs::read_to_string(&diff_path).map_err(io_err(&diff_path))?;
    let read = |dir: &str, path: &str| std::fs::read_to_string(root.join(dir).join(path)).ok();
    let files = entry
        .files
        .iter()
        .map(|p| FileVersions { path: p.clone(), old: read(&entry.old_dir, p), new: read(&entry.new_dir, p) })
        .collect();
    Ok((diff, files))
}

pub fn ground_truth_of(entry: &ManifestEntry) -> GroundTruth<NodeId> {
    GroundTruth {
        labels: entry.labels.iter().map(|r| (r.node.clone(), r.label)).collect(),
        total_statements: entry.total_statements,
    }
}

/// The category and summary an ideal profiler would give concern `label`.
pub fn oracle_profile(label: Label) -> IntentProfile {
    let category = ChangeCategory::ALL[label % ChangeCategory::ALL.len()];
    let mut profile = IntentProfile::new(category, format!("Address concern {label}"));
    profile.what = format!("Edits belonging to concern {label}");
    profile.how = "As in the original commit".into();
    profile.why = format!("Concern {label}");
    profile
}

/// A replay script that answers every agent call the way ground truth
/// dictates, for MCSs processed in `mcss` order. Subjects are prefixed
/// with `scope/` when a scope is given.
pub fn oracle_replay(
    truth: &GroundTruth<NodeId>,
    mcss: &[MinimalChangeSubgraph],
    scope: Option<&str>,
) -> Vec<ReplayRecord> {
    let subject = |s: &str| match scope {
        Some(p) => format!("{p}/{s}"),
        None => s.to_string(),
    };
    let mut records = Vec::new();
    let mut seqs: BTreeMap<(Purpose, String), usize> = BTreeMap::new();
    let mut push = |records: &mut Vec<ReplayRecord>, purpose: Purpose, subj: String, text: String| {
        let seq = seqs.entry((purpose, subj.clone())).or_insert(0);
        records.push(ReplayRecord::new(purpose, subj, *seq, text));
        *seq += 1;
    };
    // Simulated groups: (group id, label, member count).
    let mut groups: Vec<(String, Label, usize)> = Vec::new();
    for mcs in mcss {
        let mut votes: BTreeMap<Label, usize> = BTreeMap::new();
        for n in &mcs.core_nodes {
            if let Some(l) = truth.labels.get(n) {
                *votes.entry(*l).or_default() += 1;
            }
        }
        let label = votes.iter().max_by_key(|(l, c)| (**c, std::cmp::Reverse(**l))).map_or(0, |(l, _)| *l);
        let profile = oracle_profile(label);
        push(&mut records, Purpose::Profile, subject(&mcs.mcs_id.0), profile.to_response_json());
        if groups.is_empty() {
            groups.push(("G1".into(), label, 1));
            continue;
        }
        let has_candidates = groups.iter().any(|(_, l, _)| oracle_profile(*l).category == profile.category);
        match groups.iter_mut().find(|(_, l, _)| *l == label) {
            Some((gid, _, size)) => {
                push(&mut records, Purpose::Judge, subject(&mcs.mcs_id.0), format!(r#"{{"choice": "{gid}"}}"#));
                *size += 1;
                let synth = serde_json::json!({"summary": profile.summary, "what": profile.what, "how": profile.how, "why": profile.why});
                push(&mut records, Purpose::Synthesize, subject(gid), synth.to_string());
            }
            None => {
                if has_candidates {
                    push(&mut records, Purpose::Judge, subject(&mcs.mcs_id.0), r#"{"choice": "NEW"}"#.into());
                }
                groups.push((format!("G{}", groups.len() + 1), label, 1));
            }
        }
    }
    for (gid, label, size) in &groups {
        if *size > 1 {
            let body = serde_json::json!({"verdict": "ACCEPT", "core_intent": oracle_profile(*label).summary, "outliers": []});
            push(&mut records, Purpose::Review, subject(gid), body.to_string());
        }
    }
    records
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let sizes = |n: usize| {
            let items: Vec<usize> = (0..n).collect();
            let s = chronological_split(&items, |x| *x, SplitFractions::default());
            (s.train.len(), s.validation.len(), s.test.len())
        };
        assert_eq!(sizes(10), (8, 1, 1));
        assert_eq!(sizes(7), (5, 1, 1));
        assert_eq!(sizes(1), (0, 0, 1));
        assert_eq!(sizes(0), (0, 0, 0));
    }

    #[test]
    fn split_is_chronological_with_id_ties() {
        let items = vec![(5, "b"), (1, "z"), (5, "a"), (3, "c")];
        let s = chronological_split(&items, |x| *x, SplitFractions { train: 50, validation: 25, test: 25 });
        assert_eq!(s.train, vec![(1, "z"), (3, "c")]);
        assert_eq!(s.validation, vec![(5, "a")]);
        assert_eq!(s.test, vec![(5, "b")]);
    }

    fn commit(id: &str, ts: i64, path: &str, old: &str, new: &str) -> AtomicCommit {
        let old_lines: Vec<&str> = old.lines().collect();
        let new_lines: Vec<&str> = new.lines().collect();
        // Single replaced block: common prefix and suffix.
        let pre = old_lines.iter().zip(&new_lines).take_while(|(a, b)| a == b).count();
        let suf = old_lines[pre..].iter().rev().zip(new_lines[pre..].iter().rev()).take_while(|(a, b)| a == b).count();
        let edit = LineEdit {
            old_start: pre + 1,
            removed: old_lines[pre..old_lines.len() - suf].iter().map(|s| s.to_string()).collect(),
            added: new_lines[pre..new_lines.len() - suf].iter().map(|s| s.to_string()).collect(),
        };
        AtomicCommit {
            commit_id: id.into(),
            timestamp: ts,
            diff_text: render_file_diff(Some(path), Some(path), old, &[edit], 3),
            files: vec![FileVersions { path: path.into(), old: Some(old.into()), new: Some(new.into()) }],
        }
    }

    const BASE: &str = "int a(void) {\n  return 1;\n}\n\nint b(void) {\n  return 2;\n}\n\nint c(void) {\n  return 3;\n}\n";

    #[test]
    fn disjoint_files_label_by_file() {
        let c1 = commit("c1", 1, "a.c", "x = 1;\n", "x = 2;\n");
        let c2 = commit("c2", 2, "b.c", "y = 1;\n", "y = 2;\n");
        let comp = synthesize_composite("k", &[c2.clone(), c1.clone()], "clike").unwrap();
        assert_eq!(comp.constituents, vec!["c1", "c2"]);
        let labels: BTreeMap<(String, Version), Label> =
            comp.ground_truth.labels.iter().map(|(n, l)| ((n.file.clone(), n.version), *l)).collect();
        assert_eq!(labels[&("a.c".to_string(), Version::New)], 0);
        assert_eq!(labels[&("b.c".to_string(), Version::Old)], 1);
        assert_eq!(comp.ground_truth.labels.len(), 4);
    }

    #[test]
    fn same_file_edits_relocate_onto_base() {
        let after_a = BASE.replace("return 1;", "return 10;");
        let c1 = commit("c1", 1, "f.c", BASE, &after_a);
        // c2 was made after c1, against c1's result.
        let c2 = commit("c2", 2, "f.c", &after_a, &after_a.replace("return 3;", "return 30;\n  /* done */"));
        let comp = synthesize_composite("k", &[c1, c2], "clike").unwrap();
        let merged = &comp.files[0];
        assert_eq!(merged.old.as_deref(), Some(BASE));
        assert_eq!(merged.new.as_deref().unwrap(), BASE.replace("return 1;", "return 10;").replace("return 3;", "return 30;\n  /* done */"));
        let mut by_label: BTreeMap<Label, usize> = BTreeMap::new();
        for l in comp.ground_truth.labels.values() {
            *by_label.entry(*l).or_default() += 1;
        }
        assert_eq!(by_label.len(), 2);
    }

    #[test]
    fn adjacent_edits_overlap() {
        let c1 = commit("c1", 1, "f.c", BASE, &BASE.replace("return 1;", "return 10;"));
        let c2 = commit("c2", 2, "f.c", BASE, &BASE.replace("int a(void) {", "long a(void) {"));
        assert!(matches!(
            synthesize_composite("k", &[c1, c2], "clike"),
            Err(DatasetError::OverlappingChanges { .. })
        ));
    }

    #[test]
    fn statement_spanning_two_constituents_overlaps() {
        // Lines 2 and 4 belong to one statement, separated by line 3.
        let base = "f(\n  a,\n  b,\n  c);\n";
        let c1 = commit("c1", 1, "f.c", base, &base.replace("  a,", "  A,"));
        let c2 = commit("c2", 2, "f.c", base, &base.replace("  c);", "  C);"));
        assert!(matches!(
            synthesize_composite("k", &[c1, c2], "clike"),
            Err(DatasetError::OverlappingChanges { .. })
        ));
    }

    #[test]
    fn unrelated_base_is_a_mismatch() {
        let c1 = commit("c1", 1, "f.c", BASE, &BASE.replace("return 1;", "return 10;"));
        let other = "void z(void) {\n  q();\n  r();\n  s();\n  t();\n}\n";
        let c2 = commit("c2", 2, "f.c", other, &other.replace("s();", "S();"));
        assert!(matches!(synthesize_composite("k", &[c1, c2], "clike"), Err(DatasetError::BaseMismatch { .. })));
    }
}
