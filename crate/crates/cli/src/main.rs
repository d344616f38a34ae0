use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use moelab::config::{self, RunConfig, RunManifest};
use moelab::data::{export_corpus, CorpusConfig};
use moelab::trainer::{self, compare_runs, export_run_analysis, load_run, run_experiment};
use moelab::verify::{run_verify, VerifyOptions};

#[derive(Parser)]
#[command(name = "moelab", version, about = "Load-balancing experiments on a toy mixture-of-experts language model")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run, or every cell of a preset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override a config key, e.g. `--set train.lr=0.001`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Output directory; defaults to `$MOELAB_OUT` or `runs/`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Runs to train concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Recompute the specialization analysis of a finished run.
    Analyze {
        run_dir: PathBuf,
        /// Print a side-by-side comparison with another run.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Check the balancing invariants on random instances.
    Verify {
        /// Perturb the synchronized counts; the identity check must then fail.
        #[arg(long)]
        corrupt_sync: bool,
    },
    /// Write the synthetic corpus to disk, one file per domain.
    GenCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Training sequences per domain.
        #[arg(long, default_value_t = 256)]
        sequences: usize,
    },
}

enum Failure {
    Lib(moelab::Error),
    Runtime(String),
}

impl From<moelab::Error> for Failure {
    fn from(e: moelab::Error) -> Self {
        Failure::Lib(e)
    }
}

fn load_file(path: Option<&Path>) -> moelab::Result<Option<config::Table>> {
    path.map(config::load_table).transpose()
}

fn out_root(out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| std::env::var_os("MOELAB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn train(
    config: Option<PathBuf>,
    preset: Option<String>,
    seed: Option<u64>,
    mut sets: Vec<String>,
    out: Option<PathBuf>,
    jobs: usize,
) -> Result<(), Failure> {
    if let Some(s) = seed {
        sets.push(format!("train.seed={s}"));
    }
    let table = load_file(config.as_deref())?;
    let cells = config::resolve(table.as_ref(), preset.as_deref(), &sets)?;
    let explicit = out.is_some();
    let root = out_root(out);
    let multi = cells.len() > 1;
    let stem = preset
        .clone()
        .or_else(|| config.as_ref().and_then(|p| p.file_stem()).map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "run".into());

    let runs: Vec<(String, RunConfig, PathBuf)> = cells
        .into_iter()
        .map(|(cell, cfg)| {
            let mut dir = if explicit {
                root.clone()
            } else {
                root.join(format!("{stem}-seed{}", cfg.train.seed))
            };
            if multi {
                dir = dir.join(&cell);
            }
            (cell, cfg, dir)
        })
        .collect();

    let manifest = |cell: &str, cfg: &RunConfig, dir: &Path| RunManifest {
        config_path: config.as_ref().map(|p| p.display().to_string()),
        seed: cfg.train.seed,
        preset: preset.clone(),
        cell: preset.as_ref().map(|_| cell.to_string()),
        overrides: sets.clone(),
        output_dir: dir.display().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };

    let run_one = |(cell, cfg, dir): &(String, RunConfig, PathBuf)| -> moelab::Result<String> {
        let summary = run_experiment(cfg, &manifest(cell, cfg, dir), dir)?;
        Ok(format!(
            "{}: mean ppl {:.4}, mean max freq {:.4}, mean entropy {:.4}",
            dir.display(),
            summary.mean_ppl(),
            summary.analysis.summary.mean_max_freq(),
            summary.analysis.summary.mean_entropy(),
        ))
    };

    let jobs = jobs.max(1);
    let mut results: Vec<moelab::Result<String>> = Vec::with_capacity(runs.len());
    for chunk in runs.chunks(jobs) {
        let out: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|r| s.spawn(|| run_one(r))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(moelab::Error::Contract("training thread panicked".into()))))
                .collect()
        });
        results.extend(out);
    }

    let mut first_err = None;
    for r in results {
        match r {
            Ok(line) => println!("{line}"),
            Err(e) => {
                if first_err.is_some() || multi {
                    eprintln!("error: {e}");
                }
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(Failure::Lib(e)),
        None => Ok(()),
    }
}

fn analyze(run_dir: PathBuf, compare: Option<PathBuf>) -> Result<(), Failure> {
    let (cfg, model, heldout) = load_run(&run_dir)?;
    let report = export_run_analysis(&model, &heldout, cfg.analysis.threshold, &run_dir)?;
    println!(
        "{}: mean max freq {:.4}, mean entropy {:.4}",
        run_dir.join(trainer::ANALYSIS_DIR).display(),
        report.summary.mean_max_freq(),
        report.summary.mean_entropy()
    );
    if let Some(other) = compare {
        let table = compare_runs(&run_dir, &other)?;
        print!("{}", table.to_csv());
    }
    Ok(())
}

fn verify(corrupt_sync: bool) -> Result<(), Failure> {
    let results = run_verify(VerifyOptions { corrupt_sync });
    let mut failed = 0;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} properties failed", results.len())));
    }
    Ok(())
}

fn gen_corpus(config: Option<PathBuf>, sets: Vec<String>, out: PathBuf, sequences: usize) -> Result<(), Failure> {
    let table = load_file(config.as_deref())?;
    let (_, cfg) = config::resolve(table.as_ref(), None, &sets)?.remove(0);
    let corpus = CorpusConfig::generate(&cfg.corpus)?;
    for (domain, n_train, n_heldout) in export_corpus(&corpus, cfg.train.seed, sequences, &out)? {
        println!("{domain}: {n_train} train, {n_heldout} held-out");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.cmd {
        Command::Train { config, preset, seed, sets, out, jobs } => train(config, preset, seed, sets, out, jobs),
        Command::Analyze { run_dir, compare } => analyze(run_dir, compare),
        Command::Verify { corrupt_sync } => verify(corrupt_sync),
        Command::GenCorpus { config, sets, out, sequences } => gen_corpus(config, sets, out, sequences),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
