//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use common::mock_server::{MockServer, Reply};
use untangler::backend::{
    ChatBackend, ChatRequest, ChatResponse, BackendError, LiveConfig, MeteredBackend, Purpose, ReplayRecord,
    ScriptedBackend, Usage,
};
use untangler::changegraph::{ChangeGraph, Edge, EdgeKind, NodeId, StatementKind, StatementNode, Version};
use untangler::dataset::{ingest_repo, oracle_replay, sample_composites};
use untangler::grouping::{greedy_grouping, Group, GroupingState};
use untangler::intent::{profile_mcs, ChangeCategory, IntentProfile};
use untangler::metrics::{acc_absolute, acc_changed, correct_count, GroundTruth, Prediction};
use untangler::pipeline::{
    open_backend, ordered_mcss, run_untangle, untangle, BackendKind, CommitInput, PipelineConfig,
};
use untangler::purifier::{backward_slice, core_change_sets, McsId, MinimalChangeSubgraph};
use untangler::review::{refinement_loop, Verdict};

type Check = Result<(), String>;
type Criterion<'a> = (&'static str, Option<Duration>, Box<dyn FnOnce() -> Check + 'a>);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn metrics_worked_example() -> Check {
    // 100 statements, 5 changed: three belong to concern 0, two to concern 1.
    // Everything is predicted as one group, so three changed statements are right.
    let keys: Vec<String> = (0..5).map(|i| format!("s{i}")).collect();
    let truth = GroundTruth {
        labels: keys.iter().enumerate().map(|(i, k)| (k.clone(), usize::from(i >= 3))).collect(),
        total_statements: 100,
    };
    let pred = Prediction { assignment: keys.iter().map(|k| (k.clone(), "G1".to_string())).collect() };
    let c: f64 = acc_changed(&pred, &truth).map_err(|e| e.to_string())?;
    let a: f64 = acc_absolute(&pred, &truth).map_err(|e| e.to_string())?;
    ensure!(c == 0.60 && a == 0.98, "f64 gave {c} / {a}");
    let c: Ratio<i64> = acc_changed(&pred, &truth).map_err(|e| e.to_string())?;
    let a: Ratio<i64> = acc_absolute(&pred, &truth).map_err(|e| e.to_string())?;
    ensure!(c == Ratio::new(3, 5) && a == Ratio::new(49, 50), "exact gave {c} / {a}");
    Ok(())
}

/// Best number of agreeing statements over every injective map from
/// groups to labels (groups may stay unmatched).
fn brute_force_matching(groups: &[usize], labels: &[usize], n_groups: usize, n_labels: usize) -> usize {
    fn go(g: usize, n_groups: usize, used: &mut Vec<bool>, map: &mut Vec<Option<usize>>, counts: &[Vec<usize>]) -> usize {
        if g == n_groups {
            return map.iter().enumerate().map(|(gi, l)| l.map_or(0, |l| counts[gi][l])).sum();
        }
        let mut best = go(g + 1, n_groups, used, map, counts);
        for l in 0..used.len() {
            if !used[l] {
                used[l] = true;
                map[g] = Some(l);
                best = best.max(go(g + 1, n_groups, used, map, counts));
                map[g] = None;
                used[l] = false;
            }
        }
        best
    }
    let mut counts = vec![vec![0; n_labels]; n_groups];
    for (g, l) in groups.iter().zip(labels) {
        counts[*g][*l] += 1;
    }
    go(0, n_groups, &mut vec![false; n_labels], &mut vec![None; n_groups], &counts)
}

fn matching_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for case in 0..250 {
        let n = rng.gen_range(1..=30);
        let n_groups = rng.gen_range(1..=6);
        let n_labels = rng.gen_range(1..=6);
        let groups: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_groups)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_labels)).collect();
        let truth = GroundTruth { labels: (0..n).map(|i| (i, labels[i])).collect(), total_statements: n };
        let pred = Prediction { assignment: (0..n).map(|i| (i, format!("G{}", groups[i] + 1))).collect() };
        let got = correct_count(&pred, &truth).map_err(|e| e.to_string())?;
        let want = brute_force_matching(&groups, &labels, n_groups, n_labels);
        ensure!(got == want, "case {case}: matching found {got}, exhaustive search {want}");
    }
    Ok(())
}

fn stmt(version: Version, line: usize, changed: bool, kind: StatementKind) -> StatementNode {
    StatementNode { id: NodeId::new("f.c", version, line, line), kind, text: format!("s{line}"), changed, accesses: vec![] }
}

fn core_set_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let kinds = [EdgeKind::AstParent, EdgeKind::DataDep, EdgeKind::ControlDep];
    for case in 0..150 {
        let n = rng.gen_range(1..=50);
        let mut g = ChangeGraph::default();
        let ids: Vec<NodeId> = (0..n)
            .map(|i| {
                let version = if rng.gen_bool(0.5) { Version::Old } else { Version::New };
                let node = stmt(version, i + 1, rng.gen_bool(0.5), StatementKind::Call);
                if node.changed {
                    g.seeds.insert(node.id.clone());
                }
                let id = node.id.clone();
                g.nodes.insert(id.clone(), node);
                id
            })
            .collect();
        let mut undirected: Vec<Vec<usize>> = vec![Vec::new(); n];
        for _ in 0..rng.gen_range(0..2 * n) {
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if a == b {
                continue;
            }
            let kind = kinds[rng.gen_range(0..3)];
            g.edges.insert(Edge { src: ids[a].clone(), dst: ids[b].clone(), kind });
            let both_changed = g.nodes[&ids[a]].changed && g.nodes[&ids[b]].changed;
            if kind != EdgeKind::AstParent && both_changed {
                undirected[a].push(b);
                undirected[b].push(a);
            }
        }
        for _ in 0..rng.gen_range(0..=n / 4) {
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            let (na, nb) = (&g.nodes[&ids[a]], &g.nodes[&ids[b]]);
            if na.changed && nb.changed && na.id.version == Version::Old && nb.id.version == Version::New {
                g.correspondences.insert((ids[a].clone(), ids[b].clone()));
                undirected[a].push(b);
                undirected[b].push(a);
            }
        }

        let mut seen = vec![false; n];
        let mut expected: BTreeSet<BTreeSet<NodeId>> = BTreeSet::new();
        for s in 0..n {
            if seen[s] || !g.nodes[&ids[s]].changed {
                continue;
            }
            let mut comp = BTreeSet::new();
            let mut queue = VecDeque::from([s]);
            seen[s] = true;
            while let Some(v) = queue.pop_front() {
                comp.insert(ids[v].clone());
                for &w in &undirected[v] {
                    if !seen[w] {
                        seen[w] = true;
                        queue.push_back(w);
                    }
                }
            }
            expected.insert(comp);
        }
        let actual: BTreeSet<BTreeSet<NodeId>> = core_change_sets(&g).into_iter().collect();
        ensure!(actual == expected, "case {case}: {} sets vs {} expected", actual.len(), expected.len());
    }
    Ok(())
}

fn fake_mcs(id: &str) -> MinimalChangeSubgraph {
    MinimalChangeSubgraph {
        mcs_id: McsId::from(id),
        core_nodes: BTreeSet::new(),
        context_nodes: BTreeSet::new(),
        rendered_diff: format!("--- a/{id}.c\n+++ b/{id}.c\n@@ -1,1 +1,1 @@\n-old_{id}();\n+new_{id}();\n"),
    }
}

fn greedy_grouping_trace() -> Check {
    use ChangeCategory::*;
    let cats = [BugFix, Feature, BugFix, Feature];
    let mcss: Vec<MinimalChangeSubgraph> = (1..=4).map(|i| fake_mcs(&format!("m{i}"))).collect();
    let mut script: Vec<ReplayRecord> = mcss
        .iter()
        .zip(cats)
        .map(|(m, c)| {
            ReplayRecord::new(Purpose::Profile, &m.mcs_id.0, 0, IntentProfile::new(c, format!("change {}", m.mcs_id)).to_response_json())
        })
        .collect();
    // m2: no Feature group yet, so it opens G2 without a call.
    // m3: judged against G1 and joins it, which triggers one synthesis.
    // m4: judged against G2 and opens G3.
    script.push(ReplayRecord::new(Purpose::Judge, "m3", 0, r#"{"choice": "G1", "reason": "same fix"}"#));
    script.push(ReplayRecord::new(Purpose::Synthesize, "G1", 0, r#"{"summary": "Fix both", "what": "w", "how": "h", "why": "y"}"#));
    script.push(ReplayRecord::new(Purpose::Judge, "m4", 0, r#"{"choice": "NEW", "reason": "unrelated"}"#));

    let mut runs = Vec::new();
    for _ in 0..5 {
        let backend = MeteredBackend::new(ScriptedBackend::new(script.clone()));
        let mut profiles = BTreeMap::new();
        for m in &mcss {
            profiles.insert(m.mcs_id.clone(), profile_mcs(m, &backend, 2).map_err(|e| e.to_string())?);
        }
        let order: Vec<McsId> = mcss.iter().map(|m| m.mcs_id.clone()).collect();
        let state = greedy_grouping(&order, &profiles, &backend, 2).map_err(|e| e.to_string())?;
        let ledger = backend.ledger();
        let counts: Vec<u64> = Purpose::ALL.iter().map(|p| ledger.requests(*p)).collect();
        ensure!(counts == [4, 2, 1, 0], "calls per purpose {counts:?}");
        runs.push(state);
    }
    let partition: Vec<Vec<&str>> = runs[0].groups.iter().map(|g| g.members.iter().map(|m| m.0.as_str()).collect()).collect();
    ensure!(partition == vec![vec!["m1", "m3"], vec!["m2"], vec!["m4"]], "partition {partition:?}");
    ensure!(runs.windows(2).all(|w| w[0] == w[1]), "runs differ");
    Ok(())
}

fn shadow_input() -> CommitInput {
    let dir = common::fixture("shadow");
    let diff = std::fs::read_to_string(dir.join("commit.diff")).unwrap();
    CommitInput::from_dirs(diff, &dir.join("old"), &dir.join("new")).unwrap()
}

fn shadow_commit_end_to_end() -> Check {
    let backend = ScriptedBackend::from_file(&common::fixture("shadow/replay.jsonl")).map_err(|e| e.to_string())?;
    let run = untangle(&shadow_input(), &PipelineConfig::default(), &backend).map_err(|e| e.to_string())?;
    let summaries: Vec<&str> = run.state.groups.iter().map(|g| g.rep_intent.summary.as_str()).collect();
    ensure!(
        summaries == ["Fix: Correct type of the pw declaration", "Fix: Correct typo in function call"],
        "concerns {summaries:?}"
    );
    let statements: Vec<BTreeSet<usize>> = run
        .state
        .groups
        .iter()
        .map(|g| g.members.iter().flat_map(|m| run.mcss.iter().find(|x| &x.mcs_id == m).unwrap().core_nodes.iter().map(|n| n.start)).collect())
        .collect();
    ensure!(statements == vec![BTreeSet::from([16]), BTreeSet::from([23])], "statement lines {statements:?}");
    let first = run.trace.rounds.first().ok_or("no refinement round")?;
    ensure!(first.decisions.iter().any(|d| d.decision.verdict == Verdict::Reject), "round 1 has no REJECT");
    ensure!(run.trace.converged, "did not converge");
    Ok(())
}

/// Rejects the last member of every reviewed group and always joins the
/// first candidate, so refinement never settles.
struct Adversary;

impl ChatBackend for Adversary {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let prompt = &request.messages.last().unwrap().content;
        let text = match request.purpose {
            Purpose::Judge => {
                let first = prompt.lines().find_map(|l| l.strip_prefix("1. ")).and_then(|l| l.split(':').next()).unwrap();
                format!(r#"{{"choice": "{first}"}}"#)
            }
            Purpose::Review => {
                let members: Vec<&str> =
                    prompt.lines().filter_map(|l| l.strip_prefix("- ")).filter_map(|l| l.split(':').next()).collect();
                format!(r#"{{"verdict": "REJECT", "core_intent": "x", "outliers": ["{}"]}}"#, members.last().unwrap())
            }
            Purpose::Synthesize => r#"{"summary": "merged", "what": "w", "how": "h", "why": "y"}"#.to_string(),
            Purpose::Profile => unreachable!("profiles are given"),
        };
        Ok(ChatResponse { text, usage: Usage::default() })
    }
}

fn refinement_termination() -> Check {
    let profiles: BTreeMap<McsId, IntentProfile> = (1..=5)
        .map(|i| (McsId(format!("m{i}")), IntentProfile::new(ChangeCategory::Refactoring, format!("change m{i}"))))
        .collect();
    let group = |id: &str, members: &[&str]| Group {
        group_id: id.into(),
        members: members.iter().map(|m| McsId::from(*m)).collect(),
        rep_intent: profiles[&McsId::from(members[0])].clone(),
    };
    let initial = GroupingState {
        groups: vec![group("G1", &["m1", "m2", "m3"]), group("G2", &["m4", "m5"])],
        assignment: [("m1", "G1"), ("m2", "G1"), ("m3", "G1"), ("m4", "G2"), ("m5", "G2")]
            .into_iter()
            .map(|(m, g)| (McsId::from(m), g.to_string()))
            .collect(),
    };
    let (state, trace) = refinement_loop(initial, &profiles, &Adversary, 3, 2).map_err(|e| e.to_string())?;
    ensure!(trace.rounds.len() == 3, "{} rounds", trace.rounds.len());
    ensure!(!trace.converged, "reported convergence");
    let all: BTreeSet<&McsId> = profiles.keys().collect();
    for round in &trace.rounds {
        let mut seen = Vec::new();
        for members in round.groups_after.values() {
            seen.extend(members.iter());
        }
        let unique: BTreeSet<&McsId> = seen.iter().copied().collect();
        ensure!(seen.len() == unique.len() && unique == all, "round {} is not a partition", round.round_index);
    }
    ensure!(state.is_partition(), "final state is not a partition");
    Ok(())
}

fn perfect_oracle_round_trip() -> Check {
    let repo = common::fixture_repo();
    let commits = ingest_repo(repo.path(), "HEAD").map_err(|e| e.to_string())?;
    let composites = sample_composites(&commits, 24, 2, 3, 2024, "clike");
    ensure!(composites.len() >= 20, "only {} composites", composites.len());
    let config = PipelineConfig { grammar: "clike".into(), ..PipelineConfig::default() };
    for c in &composites {
        ensure!((2..=3).contains(&c.concern_count()), "{} has {} constituents", c.composite_id, c.concern_count());
        let input = CommitInput { diff_text: c.merged_diff.clone(), files: c.files.clone() };
        let (_, mcss) = ordered_mcss(&input, &config).map_err(|e| e.to_string())?;
        let backend = ScriptedBackend::new(oracle_replay(&c.ground_truth, &mcss, None));
        let run = untangle(&input, &config, &backend).map_err(|e| format!("{}: {e}", c.composite_id))?;
        let acc: Ratio<i64> = acc_changed(&run.prediction(), &c.ground_truth).map_err(|e| e.to_string())?;
        ensure!(acc == Ratio::from_integer(1), "{}: Acc^c = {acc}", c.composite_id);
    }
    Ok(())
}

fn user_prompt(body: &Value) -> String {
    body["messages"].as_array().unwrap().iter().rev().find(|m| m["role"] == "user").unwrap()["content"]
        .as_str()
        .unwrap()
        .to_string()
}

/// A mock endpoint that answers each kind of prompt plausibly.
fn answering_server() -> MockServer {
    MockServer::start(|body| {
        let prompt = user_prompt(body);
        let text = if prompt.contains("Read the code change below") {
            serde_json::json!({"what": "w", "how": "h", "why": "y", "category": "Bug Fix", "summary": "Tidy the lookup"})
                .to_string()
        } else if prompt.contains("sorting the changes") {
            let first = prompt.lines().find_map(|l| l.strip_prefix("1. ")).and_then(|l| l.split(':').next()).unwrap_or("NEW");
            format!(r#"{{"choice": "{first}", "reason": "same area"}}"#)
        } else if prompt.contains("writing the intent") {
            r#"{"summary": "Tidy the lookup", "what": "w", "how": "h", "why": "y"}"#.to_string()
        } else {
            r#"{"verdict": "ACCEPT", "core_intent": "Tidy the lookup", "outliers": []}"#.to_string()
        };
        Reply::completion(&text, 11, 7)
    })
}

fn live_config(server: &MockServer) -> LiveConfig {
    let mut config = LiveConfig::new(&server.base_url, "mock-model");
    config.initial_backoff = Duration::from_millis(1);
    config
}

fn replay_determinism(dir: &Path) -> Check {
    let server = answering_server();
    let replay = dir.join("recorded.jsonl");
    let config = PipelineConfig::default();
    let input = shadow_input();

    let recording = open_backend(BackendKind::Record, Some(&replay), Some(live_config(&server))).map_err(|e| e.to_string())?;
    run_untangle(&input, "shadow", &config, &recording, &dir.join("recorded")).map_err(|e| e.to_string())?;
    drop(recording);
    let scripted = open_backend(BackendKind::Scripted, Some(&replay), None).map_err(|e| e.to_string())?;
    run_untangle(&input, "shadow", &config, &scripted, &dir.join("replayed")).map_err(|e| e.to_string())?;

    let a = std::fs::read(dir.join("recorded/concerns.json")).map_err(|e| e.to_string())?;
    let b = std::fs::read(dir.join("replayed/concerns.json")).map_err(|e| e.to_string())?;
    ensure!(a == b, "result documents differ");
    ensure!(!server.requests().is_empty(), "no request reached the endpoint");
    Ok(())
}

fn live_parameter_fidelity() -> Check {
    let server = answering_server();
    let backend = open_backend(BackendKind::Live, None, Some(live_config(&server))).map_err(|e| e.to_string())?;
    untangle(&shadow_input(), &PipelineConfig::default(), &*backend.backend).map_err(|e| e.to_string())?;
    let requests = server.requests();
    // Two profiles, one judgment, one synthesis, one review.
    ensure!(requests.len() == 5, "{} requests", requests.len());
    for (i, r) in requests.iter().enumerate() {
        let ok = r["temperature"].as_f64() == Some(0.0) && r["top_p"].as_f64() == Some(1.0) && r["n"].as_u64() == Some(1);
        ensure!(ok, "request {i} decoding: temperature={} top_p={} n={}", r["temperature"], r["top_p"], r["n"]);
    }
    Ok(())
}

fn slicing_bound() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..300 {
        let n = rng.gen_range(2..=20);
        let mut g = ChangeGraph::default();
        let sig = stmt(Version::New, 1, false, StatementKind::Signature);
        let sig_id = sig.id.clone();
        g.nodes.insert(sig_id.clone(), sig);
        let ids: Vec<NodeId> = (0..n)
            .map(|i| {
                let node = stmt(Version::New, i + 2, rng.gen_bool(0.3), StatementKind::Assignment);
                if node.changed {
                    g.seeds.insert(node.id.clone());
                }
                let id = node.id.clone();
                g.nodes.insert(id.clone(), node);
                g.edges.insert(Edge { src: sig_id.clone(), dst: id.clone(), kind: EdgeKind::AstParent });
                id
            })
            .collect();
        // A chain of dependencies plus a few forward shortcuts.
        let mut deps: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        for _ in 0..rng.gen_range(0..n) {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a < b {
                deps.push((a, b));
            }
        }
        for &(a, b) in &deps {
            let kind = if rng.gen_bool(0.5) { EdgeKind::DataDep } else { EdgeKind::ControlDep };
            g.edges.insert(Edge { src: ids[a].clone(), dst: ids[b].clone(), kind });
        }
        for core in core_change_sets(&g) {
            // Hops from each node back to the core, over dependency edges only.
            let mut dist: BTreeMap<&NodeId, usize> = core.iter().map(|c| (c, 0)).collect();
            let mut queue: VecDeque<&NodeId> = core.iter().collect();
            while let Some(v) = queue.pop_front() {
                for &(a, b) in &deps {
                    if &ids[b] == v && !dist.contains_key(&ids[a]) {
                        dist.insert(&ids[a], dist[v] + 1);
                        queue.push_back(&ids[a]);
                    }
                }
            }
            for k in 0..=2 {
                for c in backward_slice(&g, &core, k) {
                    let within = dist.get(&c).is_some_and(|d| *d <= k);
                    ensure!(within || c == sig_id, "case {case}, k={k}: {c} is {:?} hops away", dist.get(&c));
                }
            }
        }
    }
    Ok(())
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<Criterion> = vec![
        ("metrics worked example", Some(Duration::from_secs(1)), Box::new(metrics_worked_example)),
        ("matching oracle", Some(Duration::from_secs(10)), Box::new(matching_oracle)),
        ("core change set oracle", Some(Duration::from_secs(5)), Box::new(core_set_oracle)),
        ("grouping trace fidelity", None, Box::new(greedy_grouping_trace)),
        ("shadow commit end to end", None, Box::new(shadow_commit_end_to_end)),
        ("refinement termination", None, Box::new(refinement_termination)),
        ("perfect oracle round trip", Some(Duration::from_secs(30)), Box::new(perfect_oracle_round_trip)),
        ("replay determinism", None, Box::new(|| replay_determinism(tmp.path()))),
        ("live client decoding parameters", None, Box::new(live_parameter_fidelity)),
        ("slicing bound", None, Box::new(slicing_bound)),
    ];
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic.downcast_ref::<String>().cloned().or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = started.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(()), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:?}, limit {limit:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(()) => println!("[PASS] {name} ({} ms)", elapsed.as_millis()),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
