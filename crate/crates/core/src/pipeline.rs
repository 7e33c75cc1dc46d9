//! End-to-end runs: untangle one commit, evaluate a composite corpus,
//! synthesize a corpus. Also the result documents these runs write.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    BackendError, ChatBackend, LiveBackend, LiveConfig, MeteredBackend, RecordingBackend, ReplayRecord,
    ScriptedBackend, SubjectScope, UsageLedger,
};
use crate::changegraph::{build_commit_graph, FileVersions, GraphError, NodeId};
use crate::dataset::{self, DatasetError, Manifest, SplitFractions, SplitName};
use crate::diff::{parse_patches, parse_unified_diff, DiffError};
use crate::grouping::{greedy_grouping, GroupingError, GroupingState};
use crate::intent::{profile_mcs, IntentError, IntentProfile, DEFAULT_RETRIES, IOCOT_TEMPLATE_VERSION};
use crate::metrics::{self, MetricsError, MetricsReport, Prediction};
use crate::purifier::{purify, McsId, MinimalChangeSubgraph, DEFAULT_BOUND_K};
use crate::review::{refinement_loop, RefinementFailure, RefinementTrace, DEFAULT_MAX_ROUNDS};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("diff: {0}")]
    Diff(#[from] DiffError),
    #[error("changegraph: {0}")]
    Graph(#[from] GraphError),
    #[error("intent: {0}")]
    Intent(#[from] IntentError),
    #[error("grouping: {0}")]
    Grouping(#[from] GroupingError),
    #[error("review: {0}")]
    Review(#[from] RefinementFailure),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// The order MCSs are fed to greedy grouping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum McsOrder {
    #[default]
    Natural,
    Reverse,
    /// Shuffled with the configured seed.
    Shuffled,
}

impl std::str::FromStr for McsOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "natural" => Ok(Self::Natural),
            "reverse" => Ok(Self::Reverse),
            "shuffled" => Ok(Self::Shuffled),
            other => Err(format!("unknown MCS order {other:?} (natural, reverse, shuffled)")),
        }
    }
}

/// Settings that determine a run's result. Embedded in every result document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub bound_k: usize,
    pub max_rounds: usize,
    pub grammar: String,
    pub retries: usize,
    pub mcs_order: McsOrder,
    pub seed: u64,
    pub prompt_template: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bound_k: DEFAULT_BOUND_K,
            max_rounds: DEFAULT_MAX_ROUNDS,
            grammar: "auto".into(),
            retries: DEFAULT_RETRIES,
            mcs_order: McsOrder::Natural,
            seed: 0,
            prompt_template: IOCOT_TEMPLATE_VERSION.into(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.max_rounds == 0 {
            return Err(PipelineError::Config("max_rounds must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Scripted,
    Record,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Self::Live),
            "scripted" => Ok(Self::Scripted),
            "record" => Ok(Self::Record),
            other => Err(format!("unknown backend {other:?} (live, scripted, record)")),
        }
    }
}

/// A backend plus what is needed to report on it afterwards.
pub struct OpenedBackend {
    pub kind: BackendKind,
    pub replay_path: Option<PathBuf>,
    pub backend: Box<dyn ChatBackend>,
}

impl OpenedBackend {
    /// Digest of the replay file. Read after the run, so a recording
    /// reports the digest of what it wrote.
    pub fn replay_digest(&self) -> Result<Option<String>, PipelineError> {
        match (&self.replay_path, self.kind) {
            (Some(path), BackendKind::Scripted | BackendKind::Record) => Ok(Some(file_digest(path)?)),
            _ => Ok(None),
        }
    }
}

pub fn file_digest(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(format!("sha256:{}", hex::encode(Sha256::digest(&bytes))))
}

/// Live reads the endpoint from the environment. Scripted needs an existing
/// replay file; record needs a path to write and the live endpoint.
pub fn open_backend(
    kind: BackendKind,
    replay: Option<&Path>,
    live: Option<LiveConfig>,
) -> Result<OpenedBackend, PipelineError> {
    let live_config = || match live.clone() {
        Some(c) => Ok(c),
        None => LiveConfig::from_env(),
    };
    let need_replay = || replay.ok_or_else(|| PipelineError::Config(format!("backend {kind:?} needs a replay path")));
    let backend: Box<dyn ChatBackend> = match kind {
        BackendKind::Live => Box::new(LiveBackend::new(live_config()?)?),
        BackendKind::Scripted => Box::new(ScriptedBackend::from_file(need_replay()?)?),
        BackendKind::Record => Box::new(RecordingBackend::create(LiveBackend::new(live_config()?)?, need_replay()?)?),
    };
    Ok(OpenedBackend { kind, replay_path: replay.map(Path::to_path_buf), backend })
}

/// A commit given as a unified diff plus both snapshots of each touched file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitInput {
    pub diff_text: String,
    pub files: Vec<FileVersions>,
}

impl CommitInput {
    /// Reads snapshots named by the diff from `old_dir` and `new_dir`.
    pub fn from_dirs(diff_text: String, old_dir: &Path, new_dir: &Path) -> Result<Self, PipelineError> {
        let mut files = Vec::new();
        for patch in parse_patches(&diff_text)? {
            let read = |dir: &Path, rel: &Option<String>| -> Result<Option<String>, PipelineError> {
                match rel {
                    Some(rel) => {
                        let path = dir.join(rel);
                        std::fs::read_to_string(&path).map(Some).map_err(io_err(&path))
                    }
                    None => Ok(None),
                }
            };
            files.push(FileVersions {
                path: patch.path().to_string(),
                old: read(old_dir, &patch.old_path)?,
                new: read(new_dir, &patch.new_path)?,
            });
        }
        Ok(Self { diff_text, files })
    }
}

/// Everything one untangling run produced.
#[derive(Debug, Clone)]
pub struct Untangled {
    pub graph_nodes: usize,
    pub mcss: Vec<MinimalChangeSubgraph>,
    pub profiles: BTreeMap<McsId, IntentProfile>,
    pub initial: GroupingState,
    pub state: GroupingState,
    pub trace: RefinementTrace,
}

impl Untangled {
    /// Group of every changed statement.
    pub fn prediction(&self) -> Prediction<NodeId> {
        let mut assignment = BTreeMap::new();
        for m in &self.mcss {
            if let Some(g) = self.state.assignment.get(&m.mcs_id) {
                for n in &m.core_nodes {
                    assignment.insert(n.clone(), g.clone());
                }
            }
        }
        Prediction { assignment }
    }
}

/// Purified MCSs in the order grouping will see them.
pub fn ordered_mcss(input: &CommitInput, config: &PipelineConfig) -> Result<(usize, Vec<MinimalChangeSubgraph>), PipelineError> {
    let regions = parse_unified_diff(&input.diff_text)?;
    let graph = build_commit_graph(&input.files, &regions, &config.grammar)?;
    let mut mcss = purify(&graph, config.bound_k);
    match config.mcs_order {
        McsOrder::Natural => {}
        McsOrder::Reverse => mcss.reverse(),
        McsOrder::Shuffled => mcss.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed)),
    }
    Ok((graph.nodes.len(), mcss))
}

pub fn untangle(input: &CommitInput, config: &PipelineConfig, backend: &dyn ChatBackend) -> Result<Untangled, PipelineError> {
    config.validate()?;
    let (graph_nodes, mcss) = ordered_mcss(input, config)?;
    let mut profiles = BTreeMap::new();
    for m in &mcss {
        profiles.insert(m.mcs_id.clone(), profile_mcs(m, backend, config.retries)?);
    }
    let order: Vec<McsId> = mcss.iter().map(|m| m.mcs_id.clone()).collect();
    let initial = greedy_grouping(&order, &profiles, backend, config.retries)?;
    let (state, trace) = refinement_loop(initial.clone(), &profiles, backend, config.max_rounds, config.retries)?;
    Ok(Untangled { graph_nodes, mcss, profiles, initial, state, trace })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcernMember {
    pub mcs_id: McsId,
    pub category: String,
    pub summary: String,
    pub statements: Vec<NodeId>,
    pub context: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concern {
    pub group_id: String,
    pub category: String,
    pub summary: String,
    pub what: String,
    pub how: String,
    pub why: String,
    pub members: Vec<ConcernMember>,
}

/// `concerns.json`: the untangling result. Contains nothing that depends
/// on timing or on which backend produced the answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcernsDocument {
    pub tool_version: String,
    pub config: PipelineConfig,
    pub replay_digest: Option<String>,
    pub input: String,
    pub graph_nodes: usize,
    pub converged: bool,
    pub concerns: Vec<Concern>,
    pub initial_groups: BTreeMap<String, Vec<McsId>>,
    pub trace: RefinementTrace,
}

impl ConcernsDocument {
    pub fn new(input: &str, config: &PipelineConfig, replay_digest: Option<String>, run: &Untangled) -> Self {
        let mcs_by_id: BTreeMap<&McsId, &MinimalChangeSubgraph> = run.mcss.iter().map(|m| (&m.mcs_id, m)).collect();
        let concerns = run
            .state
            .groups
            .iter()
            .map(|g| Concern {
                group_id: g.group_id.clone(),
                category: g.rep_intent.category.label().to_string(),
                summary: g.rep_intent.summary.clone(),
                what: g.rep_intent.what.clone(),
                how: g.rep_intent.how.clone(),
                why: g.rep_intent.why.clone(),
                members: g
                    .members
                    .iter()
                    .map(|id| {
                        let profile = &run.profiles[id];
                        let mcs = mcs_by_id[id];
                        ConcernMember {
                            mcs_id: id.clone(),
                            category: profile.category.label().to_string(),
                            summary: profile.summary.clone(),
                            statements: mcs.core_nodes.iter().cloned().collect(),
                            context: mcs.context_nodes.iter().cloned().collect(),
                        }
                    })
                    .collect(),
            })
            .collect();
        Self {
            tool_version: TOOL_VERSION.into(),
            config: config.clone(),
            replay_digest,
            input: input.to_string(),
            graph_nodes: run.graph_nodes,
            converged: run.trace.converged,
            concerns,
            initial_groups: run.initial.groups.iter().map(|g| (g.group_id.clone(), g.members.clone())).collect(),
            trace: run.trace.clone(),
        }
    }
}

/// `run.json`: facts about the run that vary between executions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunDocument {
    pub tool_version: String,
    pub backend: BackendKind,
    pub replay_path: Option<PathBuf>,
    pub wall_time_ms: u64,
    pub status: String,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("documents serialize");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

/// Runs the pipeline and writes `concerns.json`, `ledger.json` and
/// `run.json` into `out_dir`.
pub fn run_untangle(
    input: &CommitInput,
    input_label: &str,
    config: &PipelineConfig,
    opened: &OpenedBackend,
    out_dir: &Path,
) -> Result<ConcernsDocument, PipelineError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let started = Instant::now();
    let metered = MeteredBackend::new(&*opened.backend);
    let result = untangle(input, config, &metered);
    let mut ledger = metered.ledger();
    ledger.set_wall_time(started.elapsed());
    write_json(&out_dir.join("ledger.json"), &ledger)?;
    let status = match &result {
        Ok(_) => "ok".to_string(),
        Err(e) => format!("error: {e}"),
    };
    if let Err(PipelineError::Review(failure)) = &result {
        write_json(&out_dir.join("trace.partial.json"), &failure.trace)?;
    }
    write_json(
        &out_dir.join("run.json"),
        &RunDocument {
            tool_version: TOOL_VERSION.into(),
            backend: opened.kind,
            replay_path: opened.replay_path.clone(),
            wall_time_ms: ledger.wall_time_ms,
            status,
        },
    )?;
    let run = result?;
    let doc = ConcernsDocument::new(input_label, config, opened.replay_digest()?, &run);
    write_json(&out_dir.join("concerns.json"), &doc)?;
    Ok(doc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub composite_id: String,
    pub split: SplitName,
    pub concern_count: usize,
    pub graph_nodes: usize,
    pub predicted_concerns: usize,
    pub converged: bool,
    pub rounds: usize,
    pub requests: u64,
    pub report: MetricsReport<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationFailure {
    pub composite_id: String,
    pub error: String,
}

/// Node-count stratum of the evaluation. Upper bounds are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBucket {
    pub range: String,
    pub commits: usize,
    pub changed: usize,
    pub correct: usize,
    pub oa: Option<f64>,
    pub mean_acc_c: Option<f64>,
}

pub const SIZE_BUCKETS: [(&str, usize); 4] = [("0-1000", 1000), ("1000-2000", 2000), ("2000-7000", 7000), (">7000", usize::MAX)];

pub fn size_bucket(nodes: usize) -> &'static str {
    SIZE_BUCKETS.iter().find(|(_, hi)| nodes <= *hi).map_or(">7000", |(name, _)| name)
}

pub fn size_table(rows: &[EvaluationRow]) -> Vec<SizeBucket> {
    SIZE_BUCKETS
        .iter()
        .map(|(name, _)| {
            let members: Vec<&EvaluationRow> = rows.iter().filter(|r| size_bucket(r.graph_nodes) == *name).collect();
            let changed: usize = members.iter().map(|r| r.report.changed).sum();
            let correct: usize = members.iter().map(|r| r.report.correct).sum();
            SizeBucket {
                range: name.to_string(),
                commits: members.len(),
                changed,
                correct,
                oa: (changed > 0).then(|| correct as f64 / changed as f64),
                mean_acc_c: (!members.is_empty())
                    .then(|| members.iter().map(|r| r.report.acc_c).sum::<f64>() / members.len() as f64),
            }
        })
        .collect()
}

/// `evaluation.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub tool_version: String,
    pub config: PipelineConfig,
    pub replay_digest: Option<String>,
    pub manifest: String,
    pub rows: Vec<EvaluationRow>,
    pub failed: usize,
    pub failures: Vec<EvaluationFailure>,
    pub oa: Option<f64>,
    /// Absent when no composite has two or three concerns.
    pub avg: Option<f64>,
    pub size_buckets: Vec<SizeBucket>,
}

fn evaluate_one(
    root: &Path,
    entry: &dataset::ManifestEntry,
    config: &PipelineConfig,
    backend: &dyn ChatBackend,
) -> Result<(EvaluationRow, UsageLedger), PipelineError> {
    let (diff_text, files) = dataset::read_composite_inputs(root, entry)?;
    let scoped = MeteredBackend::new(SubjectScope::new(backend, &entry.composite_id));
    let run = untangle(&CommitInput { diff_text, files }, config, &scoped)?;
    let truth = dataset::ground_truth_of(entry);
    let report = metrics::score::<f64, NodeId>(&run.prediction(), &truth)?;
    let ledger = scoped.ledger();
    Ok((
        EvaluationRow {
            composite_id: entry.composite_id.clone(),
            split: entry.split,
            concern_count: entry.concern_count,
            graph_nodes: run.graph_nodes,
            predicted_concerns: run.state.groups.len(),
            converged: run.trace.converged,
            rounds: run.trace.rounds.len(),
            requests: ledger.total.requests,
            report,
        },
        ledger,
    ))
}

/// Untangles and scores every composite of a manifest, `jobs` at a time.
/// Backend subjects are scoped by composite id. A failing composite is
/// recorded and left out of the aggregates.
pub fn run_evaluate(
    manifest_path: &Path,
    config: &PipelineConfig,
    opened: &OpenedBackend,
    jobs: usize,
    out_dir: &Path,
) -> Result<EvaluationReport, PipelineError> {
    use rayon::prelude::*;

    config.validate()?;
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
    let backend: &dyn ChatBackend = &*opened.backend;
    let outcomes: Vec<_> = pool.install(|| {
        manifest.composites.par_iter().map(|entry| (entry, evaluate_one(root, entry, config, backend))).collect()
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut ledger = UsageLedger::default();
    for (entry, outcome) in outcomes {
        match outcome {
            Ok((row, l)) => {
                ledger.merge(&l);
                rows.push(row);
            }
            Err(e) => {
                log::warn!("{}: {e}", entry.composite_id);
                failures.push(EvaluationFailure { composite_id: entry.composite_id.clone(), error: e.to_string() });
            }
        }
    }
    ledger.set_wall_time(started.elapsed());
    let reports: Vec<MetricsReport<f64>> = rows.iter().map(|r| r.report.clone()).collect();
    let report = EvaluationReport {
        tool_version: TOOL_VERSION.into(),
        config: config.clone(),
        replay_digest: opened.replay_digest()?,
        manifest: manifest_path.display().to_string(),
        failed: failures.len(),
        failures,
        oa: metrics::overall_accuracy(&reports).ok(),
        avg: metrics::bucket_average(&reports).ok(),
        size_buckets: size_table(&rows),
        rows,
    };
    write_json(&out_dir.join("evaluation.json"), &report)?;
    write_json(&out_dir.join("ledger.json"), &ledger)?;
    write_json(
        &out_dir.join("run.json"),
        &RunDocument {
            tool_version: TOOL_VERSION.into(),
            backend: opened.kind,
            replay_path: opened.replay_path.clone(),
            wall_time_ms: ledger.wall_time_ms,
            status: format!("ok: {} scored, {} failed", report.rows.len(), report.failed),
        },
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthesizeOptions {
    pub commit_range: String,
    pub count: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub seed: u64,
    pub grammar: String,
    pub fractions: SplitFractions,
}

/// Samples composites from a repository and writes them with
/// `manifest.json` under `out_dir`. Splits follow each composite's latest
/// constituent timestamp.
pub fn run_synthesize(repo: &Path, options: &SynthesizeOptions, out_dir: &Path) -> Result<Manifest, PipelineError> {
    let commits = dataset::ingest_repo(repo, &options.commit_range)?;
    let composites =
        dataset::sample_composites(&commits, options.count, options.k_min, options.k_max, options.seed, &options.grammar);
    let split = dataset::chronological_split(
        &composites,
        |c| (c.timestamp, c.composite_id.clone()),
        options.fractions,
    );
    let split_of: BTreeMap<&str, SplitName> = [
        (&split.train, SplitName::Train),
        (&split.validation, SplitName::Validation),
        (&split.test, SplitName::Test),
    ]
    .into_iter()
    .flat_map(|(list, name)| list.iter().map(move |c| (c.composite_id.as_str(), name)))
    .collect();
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut entries = Vec::new();
    for c in &composites {
        let name = split_of.get(c.composite_id.as_str()).copied().unwrap_or(SplitName::Test);
        entries.push(dataset::write_composite(out_dir, c, name)?);
    }
    let manifest = Manifest {
        seed: options.seed,
        grammar: options.grammar.clone(),
        k_min: options.k_min,
        k_max: options.k_max,
        source_commits: commits.len(),
        composites: entries,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Replay records under which every composite of the manifest is untangled
/// exactly as its ground truth says.
pub fn oracle_replay_for_manifest(manifest_path: &Path, config: &PipelineConfig) -> Result<Vec<ReplayRecord>, PipelineError> {
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for entry in &manifest.composites {
        let (diff_text, files) = dataset::read_composite_inputs(root, entry)?;
        let (_, mcss) = ordered_mcss(&CommitInput { diff_text, files }, config)?;
        records.extend(dataset::oracle_replay(&dataset::ground_truth_of(entry), &mcss, Some(&entry.composite_id)));
    }
    Ok(records)
}
