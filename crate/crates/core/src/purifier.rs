//! Minimal Change Subgraphs: connected clusters of changed statements plus
//! the unchanged statements needed to read them.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::changegraph::{ChangeGraph, EdgeKind, NodeId, Version};
use crate::diff::LineMap;

/// Default number of backward dependency hops collected as context.
pub const DEFAULT_BOUND_K: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct McsId(pub String);

impl std::fmt::Display for McsId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for McsId {
    fn from(s: &str) -> Self {
        McsId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalChangeSubgraph {
    pub mcs_id: McsId,
    pub core_nodes: BTreeSet<NodeId>,
    pub context_nodes: BTreeSet<NodeId>,
    pub rendered_diff: String,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Ordering key of a component: file, then first line, then version.
fn position_key(id: &NodeId) -> (&str, usize, Version, usize) {
    (&id.file, id.start, id.version, id.end)
}

/// Connected components of the seeds under undirected data and control
/// dependencies, with each edit's old and new sides joined.
pub fn core_change_sets(graph: &ChangeGraph) -> Vec<BTreeSet<NodeId>> {
    let seeds: Vec<&NodeId> = graph.seeds.iter().collect();
    let index: HashMap<&NodeId, usize> = seeds.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let mut uf = UnionFind::new(seeds.len());
    let dependency_pairs = graph
        .edges
        .iter()
        .filter(|e| e.kind != EdgeKind::AstParent)
        .map(|e| (&e.src, &e.dst));
    let correspondence_pairs = graph.correspondences.iter().map(|(o, n)| (o, n));
    for (a, b) in dependency_pairs.chain(correspondence_pairs) {
        if let (Some(&ia), Some(&ib)) = (index.get(a), index.get(b)) {
            uf.union(ia, ib);
        }
    }
    let mut components: BTreeMap<usize, BTreeSet<NodeId>> = BTreeMap::new();
    for (i, seed) in seeds.iter().enumerate() {
        let root = uf.find(i);
        components.entry(root).or_default().insert((*seed).clone());
    }
    let mut sets: Vec<BTreeSet<NodeId>> = components.into_values().collect();
    sets.sort_by(|a, b| {
        let ka = a.iter().map(position_key).min();
        let kb = b.iter().map(position_key).min();
        ka.cmp(&kb)
    });
    sets
}

/// Unchanged nodes within `bound_k` backward dependency hops of `core`,
/// plus the enclosing signature of every core node.
///
/// The walk follows `DATA_DEP` and `CONTROL_DEP` edges from use to
/// definition (or guard). It does not continue through changed nodes: those
/// belong to some change set, not to this one's context.
pub fn backward_slice(graph: &ChangeGraph, core: &BTreeSet<NodeId>, bound_k: usize) -> BTreeSet<NodeId> {
    let mut incoming: HashMap<&NodeId, Vec<&NodeId>> = HashMap::new();
    for e in graph.edges.iter().filter(|e| e.kind != EdgeKind::AstParent) {
        incoming.entry(&e.dst).or_default().push(&e.src);
    }
    let mut context = BTreeSet::new();
    let mut seen: BTreeSet<&NodeId> = core.iter().collect();
    let mut queue: VecDeque<(&NodeId, usize)> = core.iter().map(|c| (c, 0)).collect();
    while let Some((id, depth)) = queue.pop_front() {
        if depth == bound_k {
            continue;
        }
        for &src in incoming.get(id).map(Vec::as_slice).unwrap_or_default() {
            if !seen.insert(src) {
                continue;
            }
            let Some(node) = graph.node(src) else { continue };
            if node.changed {
                continue;
            }
            context.insert(src.clone());
            queue.push_back((src, depth + 1));
        }
    }
    for id in core {
        if let Some(sig) = graph.enclosing_signature(id) {
            if !graph.nodes[sig].changed {
                context.insert(sig.clone());
            }
        }
    }
    context
}

/// Stable id derived from the sorted core node ids.
pub fn mcs_id_for(core: &BTreeSet<NodeId>) -> McsId {
    let mut hasher = Sha256::new();
    for id in core {
        hasher.update(id.to_string().as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    McsId(format!("mcs-{}", &hex::encode(digest)[..12]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Mark {
    Removed,
    Added,
    Context,
}

#[derive(Debug)]
struct RenderLine {
    mark: Mark,
    old_line: Option<usize>,
    new_line: Option<usize>,
    text: String,
}

/// Renders the MCS as a unified-diff-style listing. Changed lines of core
/// nodes carry `-`/`+`; every other line shown is context (` `). Hunk
/// headers carry real line numbers so the output parses as a diff.
fn render(graph: &ChangeGraph, core: &BTreeSet<NodeId>, context: &BTreeSet<NodeId>) -> String {
    let files: BTreeSet<&str> = core.iter().chain(context).map(|id| id.file.as_str()).collect();
    let mut out = String::new();
    for file in files {
        let regions: Vec<_> = graph.regions.iter().filter(|r| r.file_path == file).collect();
        let map = LineMap::new(regions.iter().copied());
        let removed: BTreeSet<usize> = regions.iter().flat_map(|r| r.old_range.lines()).collect();
        let added: BTreeSet<usize> = regions.iter().flat_map(|r| r.new_range.lines()).collect();

        // Keyed by position in the merged old/new order.
        let mut lines: BTreeMap<(usize, u8, usize), RenderLine> = BTreeMap::new();
        let push_context_new = |lines: &mut BTreeMap<_, _>, n: usize| {
            if let Some(text) = graph.source_line(file, Version::New, n) {
                lines.insert(
                    (n, 1, n),
                    RenderLine {
                        mark: Mark::Context,
                        old_line: map.new_to_old(n),
                        new_line: Some(n),
                        text: text.to_string(),
                    },
                );
            }
        };
        for id in core.iter().chain(context).filter(|id| id.file == file) {
            let is_core = core.contains(id);
            for l in id.start..=id.end {
                match id.version {
                    Version::Old if is_core && removed.contains(&l) => {
                        let text = graph.source_line(file, Version::Old, l).unwrap_or_default();
                        lines.insert(
                            (map.new_lines_before_old(l), 2, l),
                            RenderLine {
                                mark: Mark::Removed,
                                old_line: Some(l),
                                new_line: None,
                                text: text.to_string(),
                            },
                        );
                    }
                    Version::New if is_core && added.contains(&l) => {
                        let text = graph.source_line(file, Version::New, l).unwrap_or_default();
                        lines.insert(
                            (l, 1, l),
                            RenderLine {
                                mark: Mark::Added,
                                old_line: None,
                                new_line: Some(l),
                                text: text.to_string(),
                            },
                        );
                    }
                    Version::Old => {
                        if let Some(n) = map.old_to_new(l) {
                            push_context_new(&mut lines, n);
                        }
                    }
                    Version::New => {
                        if !added.contains(&l) {
                            push_context_new(&mut lines, l);
                        }
                    }
                }
            }
        }

        out.push_str(&format!("--- a/{file}\n+++ b/{file}\n"));
        let mut chunk: Vec<&RenderLine> = Vec::new();
        let mut expect: Option<(usize, usize)> = None;
        let flush = |chunk: &mut Vec<&RenderLine>, out: &mut String| {
            if chunk.is_empty() {
                return;
            }
            let old_count = chunk.iter().filter(|l| l.mark != Mark::Added).count();
            let new_count = chunk.iter().filter(|l| l.mark != Mark::Removed).count();
            let first = chunk[0];
            let old_start = match (old_count, first.old_line) {
                (0, _) | (_, None) => first.new_line.map_or(0, |n| map.old_lines_before_new(n)) + usize::from(old_count > 0),
                (_, Some(o)) => o,
            };
            let new_start = match (new_count, chunk.iter().find_map(|l| l.new_line)) {
                (0, _) | (_, None) => first.old_line.map_or(0, |o| map.new_lines_before_old(o)) + usize::from(new_count > 0),
                (_, Some(n)) => n,
            };
            out.push_str(&format!("@@ -{old_start},{old_count} +{new_start},{new_count} @@\n"));
            for l in chunk.drain(..) {
                let prefix = match l.mark {
                    Mark::Removed => '-',
                    Mark::Added => '+',
                    Mark::Context => ' ',
                };
                out.push(prefix);
                out.push_str(&l.text);
                out.push('\n');
            }
        };
        for line in lines.values() {
            let continues = match (expect, line.mark) {
                (None, _) => false,
                (Some((o, n)), Mark::Context) => line.old_line == Some(o) && line.new_line == Some(n),
                (Some((o, _)), Mark::Removed) => line.old_line == Some(o),
                (Some((_, n)), Mark::Added) => line.new_line == Some(n),
            };
            if !continues {
                flush(&mut chunk, &mut out);
            }
            // Track the next expected old/new line numbers.
            let (mut o, mut n) = expect.unwrap_or((0, 0));
            if !continues {
                o = line.old_line.unwrap_or_else(|| line.new_line.map_or(0, |x| map.old_lines_before_new(x)) + 1);
                n = line.new_line.unwrap_or_else(|| line.old_line.map_or(0, |x| map.new_lines_before_old(x)) + 1);
            }
            match line.mark {
                Mark::Context => {
                    o = line.old_line.unwrap_or(o) + 1;
                    n = line.new_line.unwrap_or(n) + 1;
                }
                Mark::Removed => o = line.old_line.unwrap_or(o) + 1,
                Mark::Added => n = line.new_line.unwrap_or(n) + 1,
            }
            expect = Some((o, n));
            chunk.push(line);
        }
        flush(&mut chunk, &mut out);
    }
    out
}

pub fn finalize_mcs(
    graph: &ChangeGraph,
    core: &BTreeSet<NodeId>,
    context: &BTreeSet<NodeId>,
) -> MinimalChangeSubgraph {
    MinimalChangeSubgraph {
        mcs_id: mcs_id_for(core),
        core_nodes: core.clone(),
        context_nodes: context.clone(),
        rendered_diff: render(graph, core, context),
    }
}

/// Runs the whole purification: change sets, slicing, finalization.
/// The result order is the deterministic MCS order used for grouping.
pub fn purify(graph: &ChangeGraph, bound_k: usize) -> Vec<MinimalChangeSubgraph> {
    core_change_sets(graph)
        .into_iter()
        .map(|core| {
            let context = backward_slice(graph, &core, bound_k);
            finalize_mcs(graph, &core, &context)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::changegraph::{Edge, StatementKind, StatementNode};
    use crate::diff::{DiffRegion, LineRange};

    fn node(line: usize, changed: bool, kind: StatementKind) -> StatementNode {
        StatementNode {
            id: NodeId::new("f.c", Version::New, line, line),
            kind,
            text: format!("s{line}"),
            changed,
            accesses: vec![],
        }
    }

    fn graph_with(nodes: Vec<StatementNode>, edges: &[(usize, usize, EdgeKind)]) -> ChangeGraph {
        let mut g = ChangeGraph::default();
        for n in nodes {
            if n.changed {
                g.seeds.insert(n.id.clone());
            }
            g.nodes.insert(n.id.clone(), n);
        }
        for &(a, b, kind) in edges {
            g.edges.insert(Edge {
                src: NodeId::new("f.c", Version::New, a, a),
                dst: NodeId::new("f.c", Version::New, b, b),
                kind,
            });
        }
        g
    }

    #[test]
    fn unconnected_seeds_are_singletons() {
        let g = graph_with((1..=3).map(|l| node(l, true, StatementKind::Call)).collect(), &[]);
        let sets = core_change_sets(&g);
        assert_eq!(sets.len(), 3);
        assert!(sets.iter().all(|s| s.len() == 1));
    }

    #[test]
    fn chained_seeds_form_one_set() {
        let g = graph_with(
            (1..=3).map(|l| node(l, true, StatementKind::Call)).collect(),
            &[(1, 2, EdgeKind::DataDep), (2, 3, EdgeKind::DataDep)],
        );
        assert_eq!(core_change_sets(&g).len(), 1);
    }

    #[test]
    fn ast_parent_does_not_join() {
        let g = graph_with(
            (1..=2).map(|l| node(l, true, StatementKind::Call)).collect(),
            &[(1, 2, EdgeKind::AstParent)],
        );
        assert_eq!(core_change_sets(&g).len(), 2);
    }

    #[test]
    fn bounded_chain() {
        // d1 -> d2 -> d3 -> d4 -> core, plus a signature parent of core.
        let mut nodes: Vec<_> = (1..=4).map(|l| node(l, false, StatementKind::Assignment)).collect();
        nodes.push(node(5, true, StatementKind::Call));
        nodes.push(node(10, false, StatementKind::Signature));
        let g = graph_with(
            nodes,
            &[
                (1, 2, EdgeKind::DataDep),
                (2, 3, EdgeKind::DataDep),
                (3, 4, EdgeKind::DataDep),
                (4, 5, EdgeKind::DataDep),
                (10, 5, EdgeKind::AstParent),
            ],
        );
        let core: BTreeSet<_> = [NodeId::new("f.c", Version::New, 5, 5)].into();
        let lines = |k| -> Vec<usize> { backward_slice(&g, &core, k).iter().map(|n| n.start).collect() };
        assert_eq!(lines(0), vec![10]);
        assert_eq!(lines(1), vec![4, 10]);
        assert_eq!(lines(2), vec![3, 4, 10]);
        assert_eq!(lines(9), vec![1, 2, 3, 4, 10]);
    }

    #[test]
    fn single_added_statement_renders_one_plus_line() {
        let old = "a();\nb();\n";
        let new = "a();\nx();\nb();\n";
        let mut g = crate::changegraph::build_statement_graph("f.c", old, new, "clike").unwrap();
        g = crate::changegraph::identify_seed_nodes(
            g,
            &[DiffRegion {
                file_path: "f.c".into(),
                old_range: LineRange::new(2, 0),
                new_range: LineRange::new(2, 1),
                removed_lines: vec![],
                added_lines: vec!["x();".into()],
            }],
        )
        .unwrap();
        let mcss = purify(&g, 1);
        assert_eq!(mcss.len(), 1);
        assert_eq!(mcss[0].rendered_diff, "--- a/f.c\n+++ b/f.c\n@@ -1,0 +2,1 @@\n+x();\n");
        let again = purify(&g, 1);
        assert_eq!(again, mcss);
    }

    proptest::proptest! {
        #[test]
        fn change_sets_match_bfs_components(
            changed in proptest::collection::vec(proptest::bool::ANY, 2..16),
            raw_edges in proptest::collection::vec((0usize..16, 0usize..16, 0u8..3), 0..30),
        ) {
            let n = changed.len();
            let kinds = [EdgeKind::AstParent, EdgeKind::DataDep, EdgeKind::ControlDep];
            let edges: Vec<_> = raw_edges
                .iter()
                .filter(|(a, b, _)| a < &n && b < &n && a != b)
                .map(|&(a, b, k)| (a + 1, b + 1, kinds[k as usize]))
                .collect();
            let nodes = changed.iter().enumerate().map(|(i, &c)| node(i + 1, c, StatementKind::Call)).collect();
            let g = graph_with(nodes, &edges);

            // Oracle: BFS over seeds, undirected, dependency edges only.
            let mut adjacency = vec![Vec::new(); n + 1];
            for &(a, b, k) in &edges {
                if k != EdgeKind::AstParent && changed[a - 1] && changed[b - 1] {
                    adjacency[a].push(b);
                    adjacency[b].push(a);
                }
            }
            let mut visited = vec![false; n + 1];
            let mut expected: Vec<BTreeSet<usize>> = Vec::new();
            for start in 1..=n {
                if !changed[start - 1] || visited[start] {
                    continue;
                }
                let mut comp = BTreeSet::new();
                let mut queue = VecDeque::from([start]);
                visited[start] = true;
                while let Some(v) = queue.pop_front() {
                    comp.insert(v);
                    for &w in &adjacency[v] {
                        if !visited[w] {
                            visited[w] = true;
                            queue.push_back(w);
                        }
                    }
                }
                expected.push(comp);
            }
            let actual: Vec<BTreeSet<usize>> = core_change_sets(&g)
                .iter()
                .map(|s| s.iter().map(|id| id.start).collect())
                .collect();
            proptest::prop_assert_eq!(actual, expected);
        }
    }
}
