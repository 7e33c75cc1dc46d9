//! Dual-version statement graphs.
//!
//! Each touched file is parsed twice (old and new version) into statement
//! nodes. Nodes carry `AST_PARENT` edges from the grammar's block structure,
//! `DATA_DEP`/`CONTROL_DEP` edges from [`compute_dependencies`], and are
//! marked changed by [`identify_seed_nodes`].

pub mod clike;
pub mod grammar;
pub mod line;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::diff::DiffRegion;
pub use grammar::{Access, AccessKind, Grammar, RawStatement};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("unsupported grammar {0:?}")]
    UnsupportedGrammar(String),
    #[error("cannot parse {file} ({version}) at line {line}: {message}")]
    ParseFailure {
        file: String,
        version: Version,
        line: usize,
        message: String,
    },
    #[error("region {file}:{start}+{len} lies beyond the {version} version ({lines} lines)")]
    RegionOutOfRange {
        file: String,
        version: Version,
        start: usize,
        len: usize,
        lines: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Version {
    Old,
    New,
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Version::Old => "OLD",
            Version::New => "NEW",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatementKind {
    Declaration,
    Assignment,
    Call,
    Condition,
    LoopHeader,
    Signature,
    Other,
}

impl StatementKind {
    pub fn is_guard(self) -> bool {
        matches!(self, StatementKind::Condition | StatementKind::LoopHeader)
    }
}

/// Canonical node identity: `(file, version, start_line, end_line)`.
///
/// Orders by file, then version, then span, and renders as
/// `path@NEW:3-5`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    pub file: String,
    pub version: Version,
    pub start: usize,
    pub end: usize,
}

impl NodeId {
    pub fn new(file: impl Into<String>, version: Version, start: usize, end: usize) -> Self {
        Self {
            file: file.into(),
            version,
            start,
            end,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}:{}-{}", self.file, self.version, self.start, self.end)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid node id {0:?}")]
pub struct NodeIdParseError(String);

impl FromStr for NodeId {
    type Err = NodeIdParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || NodeIdParseError(s.to_string());
        let (file, rest) = s.rsplit_once('@').ok_or_else(err)?;
        let (version, span) = rest.split_once(':').ok_or_else(err)?;
        let version = match version {
            "OLD" => Version::Old,
            "NEW" => Version::New,
            _ => return Err(err()),
        };
        let (a, b) = span.split_once('-').ok_or_else(err)?;
        Ok(NodeId::new(
            file,
            version,
            a.parse().map_err(|_| err())?,
            b.parse().map_err(|_| err())?,
        ))
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatementNode {
    pub id: NodeId,
    pub kind: StatementKind,
    pub text: String,
    pub changed: bool,
    pub accesses: Vec<Access>,
}

impl StatementNode {
    pub fn file_path(&self) -> &str {
        &self.id.file
    }

    pub fn version(&self) -> Version {
        self.id.version
    }

    pub fn span(&self) -> (usize, usize) {
        (self.id.start, self.id.end)
    }

    pub fn contains_line(&self, line: usize) -> bool {
        line >= self.id.start && line <= self.id.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EdgeKind {
    AstParent,
    DataDep,
    ControlDep,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: EdgeKind,
}

/// Statement graph over the old and new versions of every touched file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChangeGraph {
    pub nodes: BTreeMap<NodeId, StatementNode>,
    pub edges: BTreeSet<Edge>,
    pub seeds: BTreeSet<NodeId>,
    /// `(old, new)` pairs of changed nodes that are two sides of one edit.
    pub correspondences: BTreeSet<(NodeId, NodeId)>,
    /// Regions the seeds were derived from, kept for rendering.
    pub regions: Vec<DiffRegion>,
    /// Source lines per `(file, version)`.
    pub sources: BTreeMap<(String, Version), Vec<String>>,
}

impl ChangeGraph {
    pub fn node(&self, id: &NodeId) -> Option<&StatementNode> {
        self.nodes.get(id)
    }

    pub fn edges_of_kind(&self, kind: EdgeKind) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.kind == kind)
    }

    /// AST parent of each node that has one.
    pub fn parents(&self) -> HashMap<&NodeId, &NodeId> {
        self.edges_of_kind(EdgeKind::AstParent)
            .map(|e| (&e.dst, &e.src))
            .collect()
    }

    /// Nearest enclosing signature node, if any.
    pub fn enclosing_signature(&self, id: &NodeId) -> Option<&NodeId> {
        let parents = self.parents();
        let mut cur = parents.get(id).copied();
        while let Some(p) = cur {
            if self.nodes[p].kind == StatementKind::Signature {
                return Some(p);
            }
            cur = parents.get(p).copied();
        }
        None
    }

    pub fn line_count(&self, file: &str, version: Version) -> usize {
        self.sources
            .get(&(file.to_string(), version))
            .map_or(0, Vec::len)
    }

    pub fn source_line(&self, file: &str, version: Version, line: usize) -> Option<&str> {
        self.sources
            .get(&(file.to_string(), version))
            .and_then(|lines| lines.get(line.wrapping_sub(1)))
            .map(String::as_str)
    }

    /// Merges another graph (typically another file) into this one.
    pub fn extend(&mut self, other: ChangeGraph) {
        self.nodes.extend(other.nodes);
        self.edges.extend(other.edges);
        self.seeds.extend(other.seeds);
        self.correspondences.extend(other.correspondences);
        self.regions.extend(other.regions);
        self.sources.extend(other.sources);
    }

    pub fn changed_nodes(&self) -> impl Iterator<Item = &StatementNode> {
        self.nodes.values().filter(|n| n.changed)
    }

    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            nodes: self
                .nodes
                .values()
                .map(|n| NodeRecord {
                    id: n.id.clone(),
                    file: n.id.file.clone(),
                    version: n.id.version,
                    span: [n.id.start, n.id.end],
                    kind: n.kind,
                    changed: n.changed,
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeRecord {
                    src: e.src.clone(),
                    dst: e.dst.clone(),
                    kind: e.kind,
                })
                .collect(),
            seeds: self.seeds.iter().cloned().collect(),
            correspondences: self.correspondences.iter().cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub file: String,
    pub version: Version,
    pub span: [usize; 2],
    pub kind: StatementKind,
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: EdgeKind,
}

/// Serialized graph: nodes and edges in canonical id order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<EdgeRecord>,
    pub seeds: Vec<NodeId>,
    pub correspondences: Vec<(NodeId, NodeId)>,
}

/// Groups raw statements whose line ranges overlap into nodes.
fn coalesce(
    file: &str,
    version: Version,
    lines: &[String],
    mut raws: Vec<RawStatement>,
) -> (Vec<StatementNode>, Vec<(usize, usize)>) {
    // Sort by position, remapping parent indices.
    let mut order: Vec<usize> = (0..raws.len()).collect();
    order.sort_by_key(|&i| (raws[i].start_line, raws[i].end_line, i));
    let mut new_index = vec![0; raws.len()];
    for (new, &old) in order.iter().enumerate() {
        new_index[old] = new;
    }
    let mut sorted: Vec<RawStatement> = order.iter().map(|&i| raws[i].clone()).collect();
    for raw in &mut sorted {
        raw.parent = raw.parent.map(|p| new_index[p]);
    }
    raws.clear();

    let mut node_of = vec![0usize; sorted.len()];
    let mut groups: Vec<(usize, usize, Vec<usize>)> = Vec::new();
    for (i, raw) in sorted.iter().enumerate() {
        match groups.last_mut() {
            Some((_, end, members)) if raw.start_line <= *end => {
                *end = (*end).max(raw.end_line);
                members.push(i);
            }
            _ => groups.push((raw.start_line, raw.end_line, vec![i])),
        }
        node_of[i] = groups.len() - 1;
    }

    let mut nodes = Vec::with_capacity(groups.len());
    let mut parent_edges = Vec::new();
    for (g, (start, end, members)) in groups.iter().enumerate() {
        let kind = members
            .iter()
            .map(|&m| &sorted[m])
            .find(|r| !r.trivia)
            .map_or(StatementKind::Other, |r| r.kind);
        let accesses = members
            .iter()
            .flat_map(|&m| sorted[m].accesses.iter().cloned())
            .collect();
        let parent = members
            .iter()
            .filter_map(|&m| sorted[m].parent)
            .map(|p| node_of[p])
            .find(|&p| p != g);
        if let Some(p) = parent {
            parent_edges.push((p, g));
        }
        let text = lines[start - 1..*end].join("\n");
        nodes.push(StatementNode {
            id: NodeId::new(file, version, *start, *end),
            kind,
            text,
            changed: false,
            accesses,
        });
    }
    (nodes, parent_edges)
}

fn version_graph(
    file: &str,
    version: Version,
    source: &str,
    grammar: &dyn Grammar,
) -> Result<ChangeGraph, GraphError> {
    let raws = grammar.statements(source).map_err(|e| GraphError::ParseFailure {
        file: file.to_string(),
        version,
        line: e.line,
        message: e.message,
    })?;
    let lines: Vec<String> = source.lines().map(str::to_string).collect();
    let (nodes, parent_edges) = coalesce(file, version, &lines, raws);
    let mut graph = ChangeGraph::default();
    for (p, c) in parent_edges {
        graph.edges.insert(Edge {
            src: nodes[p].id.clone(),
            dst: nodes[c].id.clone(),
            kind: EdgeKind::AstParent,
        });
    }
    graph.nodes = nodes.into_iter().map(|n| (n.id.clone(), n)).collect();
    graph.sources.insert((file.to_string(), version), lines);
    Ok(graph)
}

/// Parses both versions of one file into a statement graph with
/// `AST_PARENT` edges. Missing versions (created or deleted files) are empty.
///
/// `grammar_id` is one of [`grammar::GRAMMAR_IDS`]. Under `auto` the grammar
/// is chosen from the file extension, and a brace-language parse failure in
/// either version falls back to the line grammar for both.
pub fn build_statement_graph(
    file: &str,
    old_source: &str,
    new_source: &str,
    grammar_id: &str,
) -> Result<ChangeGraph, GraphError> {
    let build = |g: &dyn Grammar| -> Result<ChangeGraph, GraphError> {
        let mut graph = version_graph(file, Version::Old, old_source, g)?;
        graph.extend(version_graph(file, Version::New, new_source, g)?);
        Ok(graph)
    };
    if grammar_id == "auto" {
        let chosen = grammar::for_path(file);
        return match build(chosen) {
            Ok(graph) => Ok(graph),
            Err(err @ GraphError::ParseFailure { .. }) => {
                log::warn!("{err}; falling back to the line grammar");
                build(&line::LinePerStatement)
            }
            Err(err) => Err(err),
        };
    }
    let grammar = grammar::lookup(grammar_id)
        .ok_or_else(|| GraphError::UnsupportedGrammar(grammar_id.to_string()))?;
    build(grammar)
}

/// Marks nodes whose span intersects a region of the matching version as
/// changed and seeds, and pairs up the old/new sides of each region.
///
/// Within a region, old and new changed nodes are paired in order; surplus
/// nodes on either side stay unpaired (pure additions or deletions).
pub fn identify_seed_nodes(
    mut graph: ChangeGraph,
    regions: &[DiffRegion],
) -> Result<ChangeGraph, GraphError> {
    for region in regions {
        for (version, range) in [(Version::Old, region.old_range), (Version::New, region.new_range)] {
            let lines = graph.line_count(&region.file_path, version);
            if !range.is_empty() && range.last() > lines {
                return Err(GraphError::RegionOutOfRange {
                    file: region.file_path.clone(),
                    version,
                    start: range.start,
                    len: range.len,
                    lines,
                });
            }
        }
        let hits = |graph: &ChangeGraph, version: Version| -> Vec<NodeId> {
            let range = if version == Version::Old { region.old_range } else { region.new_range };
            graph
                .nodes
                .range(
                    NodeId::new(region.file_path.clone(), version, 0, 0)
                        ..NodeId::new(region.file_path.clone(), version, usize::MAX, usize::MAX),
                )
                .filter(|(id, _)| range.intersects(id.start, id.end))
                .map(|(id, _)| id.clone())
                .collect()
        };
        let old_hits = hits(&graph, Version::Old);
        let new_hits = hits(&graph, Version::New);
        for id in old_hits.iter().chain(&new_hits) {
            graph.nodes.get_mut(id).expect("hit exists").changed = true;
            graph.seeds.insert(id.clone());
        }
        for (o, n) in old_hits.into_iter().zip(new_hits) {
            graph.correspondences.insert((o, n));
        }
        graph.regions.push(region.clone());
    }
    Ok(graph)
}

#[derive(Debug, Clone)]
struct Binding {
    /// Node whose block the binding lives in; `None` for file scope.
    scope: Option<NodeId>,
    def: NodeId,
}

/// Adds def-use `DATA_DEP` edges and `CONTROL_DEP` edges.
///
/// Data: `s1 -> s2` when `s2` reads a name whose most recent visible
/// definition (declaration or write, in source order) is `s1`. A statement
/// that only writes a name gains no edge from earlier definitions.
///
/// Control: `c -> s` when `c` is the nearest condition or loop header
/// enclosing `s` within the same function.
pub fn compute_dependencies(mut graph: ChangeGraph) -> ChangeGraph {
    let parents: HashMap<NodeId, NodeId> = graph
        .parents()
        .into_iter()
        .map(|(c, p)| (c.clone(), p.clone()))
        .collect();
    let ancestors = |id: &NodeId| -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut cur = parents.get(id);
        while let Some(p) = cur {
            out.push(p.clone());
            cur = parents.get(p);
        }
        out
    };

    let mut new_edges = Vec::new();
    let mut current_unit: Option<(String, Version)> = None;
    let mut bindings: HashMap<String, Vec<Binding>> = HashMap::new();

    for (id, node) in &graph.nodes {
        let unit = (id.file.clone(), id.version);
        if current_unit.as_ref() != Some(&unit) {
            bindings.clear();
            current_unit = Some(unit);
        }
        let chain = ancestors(id);
        let visible = |b: &Binding| match &b.scope {
            None => true,
            Some(s) => s == id || chain.contains(s),
        };
        let parent = parents.get(id).cloned();

        for access in &node.accesses {
            let entries = bindings.entry(access.name.clone()).or_default();
            match access.kind {
                AccessKind::Use => {
                    if let Some(b) = entries.iter().rev().find(|b| visible(b)) {
                        if &b.def != id {
                            new_edges.push(Edge {
                                src: b.def.clone(),
                                dst: id.clone(),
                                kind: EdgeKind::DataDep,
                            });
                        }
                    }
                }
                AccessKind::Def => match entries.iter_mut().rev().find(|b| visible(b)) {
                    Some(b) => b.def = id.clone(),
                    None => entries.push(Binding {
                        scope: parent.clone(),
                        def: id.clone(),
                    }),
                },
                AccessKind::Decl => entries.push(Binding {
                    scope: parent.clone(),
                    def: id.clone(),
                }),
                AccessKind::HeaderDecl => entries.push(Binding {
                    scope: Some(id.clone()),
                    def: id.clone(),
                }),
            }
        }

        for anc in &chain {
            let kind = graph.nodes[anc].kind;
            if kind == StatementKind::Signature {
                break;
            }
            if kind.is_guard() {
                new_edges.push(Edge {
                    src: anc.clone(),
                    dst: id.clone(),
                    kind: EdgeKind::ControlDep,
                });
                break;
            }
        }
    }
    graph.edges.extend(new_edges);
    graph
}

/// One touched file with both versions (empty when absent).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileVersions {
    pub path: String,
    pub old: Option<String>,
    pub new: Option<String>,
}

/// Builds the full graph of a commit: per-file statement graphs, then
/// dependencies, then seeds.
pub fn build_commit_graph(
    files: &[FileVersions],
    regions: &[DiffRegion],
    grammar_id: &str,
) -> Result<ChangeGraph, GraphError> {
    let mut graph = ChangeGraph::default();
    for file in files {
        graph.extend(build_statement_graph(
            &file.path,
            file.old.as_deref().unwrap_or_default(),
            file.new.as_deref().unwrap_or_default(),
            grammar_id,
        )?);
    }
    let graph = compute_dependencies(graph);
    identify_seed_nodes(graph, regions)
}
