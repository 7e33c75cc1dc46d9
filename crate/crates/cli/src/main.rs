use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use untangler::backend::{write_replay, LiveConfig, ENV_API_KEY};
use untangler::dataset::{self, SplitFractions};
use untangler::pipeline::{
    self, open_backend, BackendKind, CommitInput, McsOrder, OpenedBackend, PipelineConfig, SynthesizeOptions,
};
use untangler::purifier::DEFAULT_BOUND_K;
use untangler::review::DEFAULT_MAX_ROUNDS;

macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Split composite commits into atomic concerns.
#[derive(Parser)]
#[command(name = "untangler", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Untangle one commit.
    Untangle(UntangleArgs),
    /// Untangle and score every composite of a manifest.
    Evaluate(EvaluateArgs),
    /// Build a labeled composite corpus from a repository.
    Synthesize(SynthesizeArgs),
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, default_value = "scripted")]
    backend: BackendKind,
    /// Replay file to read (scripted) or write (record).
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long, env = "UNTANGLER_API_BASE")]
    api_base: Option<String>,
    #[arg(long, env = "UNTANGLER_MODEL")]
    model: Option<String>,
}

impl BackendArgs {
    fn open(&self) -> Result<OpenedBackend> {
        let live = match self.backend {
            BackendKind::Scripted => None,
            BackendKind::Live | BackendKind::Record => {
                let (Some(base), Some(model)) = (&self.api_base, &self.model) else {
                    bail!("backend {:?} needs --api-base and --model", self.backend);
                };
                let mut config = LiveConfig::new(base, model);
                config.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
                Some(config)
            }
        };
        Ok(open_backend(self.backend, self.replay.as_deref(), live)?)
    }
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, default_value_t = DEFAULT_BOUND_K)]
    bound_k: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_ROUNDS)]
    max_rounds: usize,
    /// clike, line or auto.
    #[arg(long, default_value = "auto")]
    grammar: String,
    /// Order MCSs are grouped in: natural, reverse or shuffled.
    #[arg(long, default_value = "natural")]
    mcs_order: McsOrder,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl PipelineArgs {
    fn config(&self) -> PipelineConfig {
        PipelineConfig {
            bound_k: self.bound_k,
            max_rounds: self.max_rounds,
            grammar: self.grammar.clone(),
            mcs_order: self.mcs_order,
            seed: self.seed,
            ..PipelineConfig::default()
        }
    }
}

#[derive(Args)]
struct UntangleArgs {
    #[arg(long, requires = "commit", conflicts_with_all = ["diff", "old_dir", "new_dir"])]
    repo: Option<PathBuf>,
    #[arg(long, requires = "repo")]
    commit: Option<String>,
    #[arg(long, requires_all = ["old_dir", "new_dir"])]
    diff: Option<PathBuf>,
    #[arg(long)]
    old_dir: Option<PathBuf>,
    #[arg(long)]
    new_dir: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, default_value = "untangled")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value = "evaluation")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[arg(long)]
    repo: PathBuf,
    /// Commits to draw from, as understood by `git rev-list`.
    #[arg(long, default_value = "HEAD")]
    range: String,
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Constituents per composite, e.g. `2..3`.
    #[arg(long, default_value = "2..3", value_parser = parse_k_range)]
    k_range: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "auto")]
    grammar: String,
    /// Also write a replay file answering every call as the labels dictate.
    #[arg(long)]
    oracle_replay: Option<PathBuf>,
    #[arg(long, default_value = "corpus")]
    out: PathBuf,
}

fn parse_k_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = match s.split_once("..") {
        Some((lo, hi)) => (lo, hi.trim_start_matches('=')),
        None => (s, s),
    };
    let lo: usize = lo.trim().parse().map_err(|e| format!("bad k range {s:?}: {e}"))?;
    let hi: usize = hi.trim().parse().map_err(|e| format!("bad k range {s:?}: {e}"))?;
    if lo < 2 || hi < lo {
        return Err(format!("k range {s:?} must satisfy 2 <= min <= max"));
    }
    Ok((lo, hi))
}

fn untangle(args: UntangleArgs) -> Result<()> {
    let (input, label) = match (&args.repo, &args.commit, &args.diff) {
        (Some(repo), Some(commit), None) => {
            let c = dataset::load_commit(repo, commit).context("dataset")?;
            (CommitInput { diff_text: c.diff_text, files: c.files }, c.commit_id)
        }
        (None, None, Some(diff)) => {
            let text = std::fs::read_to_string(diff).with_context(|| format!("reading {}", diff.display()))?;
            let old = args.old_dir.as_deref().expect("clap requires --old-dir");
            let new = args.new_dir.as_deref().expect("clap requires --new-dir");
            (CommitInput::from_dirs(text, old, new)?, diff.display().to_string())
        }
        _ => bail!("give either --repo with --commit, or --diff with --old-dir and --new-dir"),
    };
    let opened = args.backend.open()?;
    let doc = pipeline::run_untangle(&input, &label, &args.pipeline.config(), &opened, &args.out)?;
    say!(
        "{} concern(s), {} refinement round(s){} -> {}",
        doc.concerns.len(),
        doc.trace.rounds.len(),
        if doc.converged { "" } else { ", not converged" },
        args.out.join("concerns.json").display()
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let opened = args.backend.open()?;
    let report = pipeline::run_evaluate(&args.manifest, &args.pipeline.config(), &opened, args.jobs, &args.out)?;
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.1}%", v * 100.0));
    say!("scored {} composite(s), {} failed", report.rows.len(), report.failed);
    say!("OA {}  Avg {}", pct(report.oa), pct(report.avg));
    for b in &report.size_buckets {
        say!("  {:>10} nodes: {:>4} commit(s)  OA {}", b.range, b.commits, pct(b.oa));
    }
    Ok(())
}

fn synthesize(args: SynthesizeArgs) -> Result<()> {
    let options = SynthesizeOptions {
        commit_range: args.range,
        count: args.count,
        k_min: args.k_range.0,
        k_max: args.k_range.1,
        seed: args.seed,
        grammar: args.grammar.clone(),
        fractions: SplitFractions::default(),
    };
    let manifest = pipeline::run_synthesize(&args.repo, &options, &args.out)?;
    say!(
        "{} composite(s) from {} commit(s) -> {}",
        manifest.composites.len(),
        manifest.source_commits,
        args.out.join("manifest.json").display()
    );
    if let Some(path) = args.oracle_replay {
        let config = PipelineConfig { grammar: args.grammar, ..PipelineConfig::default() };
        let records = pipeline::oracle_replay_for_manifest(&args.out.join("manifest.json"), &config)?;
        write_replay(&path, &records)?;
        say!("{} oracle response(s) -> {}", records.len(), path.display());
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Untangle(a) => untangle(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Synthesize(a) => synthesize(a),
    };
    if let Err(e) = result {
        // Module errors already quote their sources.
        let mut message = String::new();
        for cause in e.chain().map(|c| c.to_string()) {
            if !message.contains(&cause) {
                if !message.is_empty() {
                    message.push_str(": ");
                }
                message.push_str(&cause);
            }
        }
        eprintln!("error: {message}");
        std::process::exit(1);
    }
}
