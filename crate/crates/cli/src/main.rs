use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracerepair::harness::{self, SCRIPT_FILE};
use tracerepair::llm::{load_script, Backend, OpenAiBackend};
use tracerepair::model::{BugInstance, Config, RepairStatus};
use tracerepair::prompt::Templates;

#[derive(Parser)]
#[command(name = "tracerepair", version, about = "Trace-guided multi-agent program repair")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Repair a single bug described by a manifest.
    Repair {
        #[arg(long)]
        manifest: PathBuf,
        /// Report path; the transcript and event log are written next to it.
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Repair every bug in the sub-directories of `--dir` that hold a manifest.
    Corpus {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Openai,
    Scripted,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum, default_value = "scripted")]
    backend: BackendKind,
    /// Replay script. Defaults to `script.jsonl` beside the manifest; for
    /// `corpus` a relative path is resolved inside each bug directory.
    #[arg(long)]
    script: Option<PathBuf>,
    /// TOML file with run parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    probe: Option<Switch>,
    #[arg(long, value_enum)]
    debate: Option<Switch>,
    /// Worker threads; overrides the config file.
    #[arg(long)]
    parallelism: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => harness::load_config(path)?,
            None => Config::default(),
        };
        if let Some(p) = self.probe {
            cfg.probe_enabled = p == Switch::On;
        }
        if let Some(d) = self.debate {
            cfg.debate_enabled = d == Switch::On;
        }
        if let Some(n) = self.parallelism {
            cfg.parallelism = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn templates(cfg: &Config) -> Result<Templates> {
        match &cfg.templates_dir {
            Some(dir) => Templates::load(dir).with_context(|| format!("loading templates from {}", dir.display())),
            None => Ok(Templates::bundled()),
        }
    }

    fn backend(&self, manifest: &Path, cfg: &Config) -> Result<Box<dyn Backend>> {
        Ok(match self.backend {
            BackendKind::Openai => Box::new(OpenAiBackend::from_env(cfg.model.clone())),
            BackendKind::Scripted => {
                let dir = manifest.parent().unwrap_or(Path::new("."));
                let path = match &self.script {
                    Some(p) if p.is_absolute() => p.clone(),
                    Some(p) => dir.join(p),
                    None => dir.join(SCRIPT_FILE),
                };
                Box::new(load_script(&path)?)
            }
        })
    }
}

fn repair(manifest: &Path, out: &Path, args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let templates = RunArgs::templates(&cfg)?;
    let bug = harness::load_manifest(manifest)?;
    // A script given on the command line is taken relative to the working directory.
    let backend = match (&args.script, args.backend) {
        (Some(p), BackendKind::Scripted) => Box::new(load_script(p)?) as Box<dyn Backend>,
        _ => args.backend(manifest, &cfg)?,
    };
    let run = harness::run_bug(&bug, &cfg, backend.as_ref(), &templates)?;
    harness::write_outputs(out, &run)?;
    let r = &run.report;
    println!(
        "{}: {:?} after {} round(s), {} invocation(s), {} token(s), {:.1}s",
        r.bug_id,
        r.status,
        r.rounds_used,
        r.invocations,
        r.total_tokens(),
        r.wall_secs
    );
    Ok(())
}

fn corpus(dir: &Path, out: &Path, args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let templates = RunArgs::templates(&cfg)?;
    let factory = |manifest: &Path, _bug: &BugInstance| args.backend(manifest, &cfg).map_err(|e| format!("{e:#}"));
    let run = harness::run_corpus(dir, &cfg, &factory, &templates)?;
    harness::write_corpus(out, &run)?;
    for r in &run.report.per_bug {
        let mark = if r.status == RepairStatus::Plausible { "ok  " } else { "miss" };
        println!("{mark} {} ({:?}, {} invocations)", r.bug_id, r.status, r.invocations);
    }
    for f in &run.report.failures {
        println!("err  {}: {}", f.manifest.display(), f.error);
    }
    let t = &run.report.totals;
    println!(
        "{}/{} plausible, mean {:.0} tokens, mean ${:.4}, mean {:.1}s",
        t.plausible, t.bugs, t.mean_tokens, t.mean_cost, t.mean_wall_secs
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level)),
        )
        .with_writer(std::io::stderr)
        .init();

    let result = match &cli.command {
        Command::Repair { manifest, out, run } => repair(manifest, out, run),
        Command::Corpus { dir, out, run } => corpus(dir, out, run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
