// SPDX-License-Identifier: MIT OR Apache-2.0

//! `typoprobe` subcommands.
//!
//! Exit codes: 0 success, 1 validation failure, 2 bad input, 3 missing
//! data, 4 numerical failure. Progress goes to stderr as JSON lines.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::embedding::{validate_manifest, Manifest};
use crate::error::{Error, Result};
use crate::experiment::{execute, threads_from_env, ModeKind, ReportFormat, RunOptions};
use crate::synth::{generate_corpus, realise, write_corpus, SynthRecipe};

#[derive(Debug, Parser)]
#[command(name = "typoprobe", version, about = "Typological probing with language-centroid neutralisation")]
struct Cli {
    /// Override the seed of the recipe or plan.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress logs on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a JSON recipe.
    Synth {
        recipe: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train probes and run the neutralisation modes of a plan.
    Run {
        plan: PathBuf,
        /// Parent of the run directory.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        layer: Option<u16>,
        /// Comma-separated subset of baseline,self,cross.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<String>>,
        #[arg(long)]
        threshold: Option<f64>,
        /// all, or a comma-separated subset of csv,json,md.
        #[arg(long, default_value = "all")]
        format: String,
    },
    /// Check a manifest's hashes, headers and consistency.
    Validate { manifest: PathBuf },
}

struct Log {
    quiet: bool,
}

impl Log {
    fn emit(&self, mut v: serde_json::Value) {
        if self.quiet {
            return;
        }
        if let Some(obj) = v.as_object_mut() {
            obj.entry("level").or_insert_with(|| json!("info"));
        }
        eprintln!("{v}");
    }
}

fn with_pool<T: Send>(f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads_from_env()? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Validation(format!("thread pool: {e}")))?
            .install(f),
        None => f(),
    }
}

fn cmd_synth(recipe: &Path, out: &Path, seed: Option<u64>, log: &Log) -> Result<i32> {
    let mut r = SynthRecipe::load(recipe)?;
    if let Some(s) = seed {
        r.seed = s;
    }
    let spec = realise(&r)?;
    let corpus = with_pool(|| generate_corpus(&spec))?;
    write_corpus(&spec, &corpus, out)?;
    log.emit(json!({"event": "synth_done", "out": out.display().to_string(),
                    "languages": corpus.matrices.len(), "features": corpus.catalogue.len()}));
    println!("{}", out.display());
    Ok(0)
}

fn cmd_run(plan: &Path, out: &Path, opts: RunOptions, log: &Log) -> Result<i32> {
    let sink = |v: serde_json::Value| log.emit(v);
    let summary = execute(plan, &opts, out, &sink)?;
    println!("{}", summary.run_dir.display());
    Ok(0)
}

fn cmd_validate(path: &Path, log: &Log) -> Result<i32> {
    let manifest = Manifest::load(path)?;
    let report = validate_manifest(&manifest, None);
    println!("{}", serde_json::to_string_pretty(&report)?);
    let findings = report.findings();
    for f in &findings {
        log.emit(json!({"level": "error", "event": "finding", "message": f}));
    }
    Ok(if report.is_consistent() { 0 } else { 1 })
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let log = Log { quiet: cli.quiet };
    let outcome = match &cli.command {
        Command::Synth { recipe, out } => cmd_synth(recipe, out, cli.seed, &log),
        Command::Run {
            plan,
            out,
            layer,
            modes,
            threshold,
            format,
        } => (|| {
            let modes = modes
                .as_ref()
                .map(|m| m.iter().map(|s| s.trim().parse::<ModeKind>()).collect::<Result<Vec<_>>>())
                .transpose()?;
            let opts = RunOptions {
                seed: cli.seed,
                layer: *layer,
                modes,
                threshold: *threshold,
                formats: Some(ReportFormat::parse_list(format)?),
                threads: threads_from_env()?,
            };
            cmd_run(plan, out, opts, &log)
        })(),
        Command::Validate { manifest } => cmd_validate(manifest, &log),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            log.emit(json!({"level": "error", "event": "failed", "message": e.to_string()}));
            if log.quiet {
                eprintln!("error: {e}");
            }
            e.exit_code()
        }
    }
}
