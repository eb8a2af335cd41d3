//! Command-line entry point: train, eval, verify, grid.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};

use fdlab::config::{load_config, ExperimentConfig, GridSpec};
use fdlab::data::{load_corpus, mc_eval, perplexity, Corpus, Mode};
use fdlab::error::{Error, Result};
use fdlab::model::LmModel;
use fdlab::oracle::run_verification;
use fdlab::trainer::{train, TrainOutcome};

#[derive(Parser)]
#[command(name = "fdlab", about = "Desk-scale laboratory for fraternal dropout LSTM language models", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run from a config file.
    Train {
        /// Experiment config (TOML).
        config: PathBuf,
        /// Output directory for metrics, checkpoint, resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's run seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint: mask-free perplexity, or Monte-Carlo
    /// sequence averaging with --mc.
    Eval {
        checkpoint: PathBuf,
        /// Corpus directory (default: $FDLAB_DATA_DIR, then data/desk).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Tokenization mode: word or char.
        #[arg(long, default_value = "word")]
        mode: String,
        /// Split to score: valid or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Number of Monte-Carlo mask samples.
        #[arg(long)]
        mc: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 35)]
        tbptt: usize,
    },
    /// Verify the analytical claims by exhaustive enumeration; prints a
    /// JSON report and exits nonzero on any violation.
    Verify {
        /// Enumeration budget in mask bits (hard cap 20).
        #[arg(long, default_value_t = 20)]
        bits: usize,
        /// Number of random tiny networks.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Monte-Carlo samples for the estimator-consistency check.
        #[arg(long, default_value_t = 100_000)]
        mc_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Random hyper-parameter search over the config's [grid] section.
    Grid {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
}

fn parse_mode(s: &str) -> Result<Mode> {
    match s {
        "word" => Ok(Mode::Word),
        "char" => Ok(Mode::Char),
        other => Err(Error::Config(format!(
            "mode must be `word` or `char`, got `{other}`"
        ))),
    }
}

fn load_corpus_for(cfg: &ExperimentConfig) -> Result<Corpus> {
    load_corpus(&cfg.data.resolved_dir(), cfg.data.mode)
}

fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    let corpus = load_corpus_for(&cfg)?;
    let run_cfg = cfg.resolve(corpus.vocab.len())?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.resolved.toml"), cfg.to_toml()?)?;
    let outcome = train(&run_cfg, &corpus, out)?;
    report_outcome(&outcome);
    Ok(())
}

fn report_outcome(outcome: &TrainOutcome) {
    println!("metrics={}", outcome.metrics_path.display());
    println!("checkpoint={}", outcome.checkpoint_path.display());
    if let Some(e) = outcome.ntasgd_triggered_at {
        println!("ntasgd_triggered_epoch={e}");
    }
    println!("best_epoch={}", outcome.best_epoch);
    println!("best_val_ppl={}", outcome.best_val_ppl);
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    data: Option<PathBuf>,
    mode: &str,
    split: &str,
    mc: Option<usize>,
    seed: u64,
    batch: usize,
    tbptt: usize,
) -> Result<()> {
    let model = LmModel::load(checkpoint)?;
    let mut cfg = ExperimentConfig::default();
    if let Some(d) = data {
        cfg.data.dir = d;
    }
    cfg.data.mode = parse_mode(mode)?;
    let corpus = load_corpus_for(&cfg)?;
    if corpus.vocab.len() != model.config.vocab_size {
        return Err(Error::Config(format!(
            "checkpoint vocabulary ({}) does not match corpus ({})",
            model.config.vocab_size,
            corpus.vocab.len()
        )));
    }
    let ids = match split {
        "valid" => &corpus.valid,
        "test" => &corpus.test,
        other => {
            return Err(Error::Config(format!(
                "split must be `valid` or `test`, got `{other}`"
            )))
        }
    };
    let ppl = match mc {
        None => perplexity(&model, ids, batch, tbptt)?,
        Some(k) => mc_eval(&model, ids, batch, tbptt, k, seed)?,
    };
    println!("ppl={ppl}");
    Ok(())
}

fn cmd_verify(bits: usize, trials: usize, mc_samples: usize, seed: u64) -> Result<bool> {
    let report = run_verification(bits, trials, mc_samples, seed)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(report.passed)
}

struct GridResult {
    draw: usize,
    best_val_ppl: f64,
    assignment: BTreeMap<String, toml::Value>,
}

fn cmd_grid(config: &Path, out: &Path, parallel: usize) -> Result<()> {
    let cfg = load_config(config)?;
    let grid: GridSpec = cfg
        .grid
        .clone()
        .ok_or_else(|| Error::Config("grid search needs a [grid] section".into()))?;
    if !grid.baseline_ppl.is_finite() {
        return Err(Error::Config(
            "[grid] baseline_ppl must be set explicitly (your own baseline run's value)".into(),
        ));
    }
    if grid.draws == 0 {
        return Err(Error::Config("[grid] draws must be >= 1".into()));
    }
    let corpus = load_corpus_for(&cfg)?;
    std::fs::create_dir_all(out)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<GridResult>> = Mutex::new(Vec::new());
    let failures: Mutex<Vec<String>> = Mutex::new(Vec::new());
    let workers = parallel.max(1).min(grid.draws);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= grid.draws {
                    break;
                }
                match run_draw(&cfg, &grid, &corpus, out, k) {
                    Ok(r) => results.lock().unwrap().push(r),
                    Err(e) => failures.lock().unwrap().push(format!("draw {k}: {e}")),
                }
            });
        }
    });

    let failures = failures.into_inner().unwrap();
    for f in &failures {
        eprintln!("error: {f}");
    }
    let mut results = results.into_inner().unwrap();
    if results.is_empty() {
        return Err(Error::Config("all grid draws failed".into()));
    }
    results.sort_by(|a, b| a.best_val_ppl.total_cmp(&b.best_val_ppl));

    let mut summary = String::from("rank,draw,best_val_ppl,assignment\n");
    for (rank, r) in results.iter().enumerate() {
        let assign = serde_json::to_string(
            &r.assignment
                .iter()
                .map(|(k, v)| (k.clone(), v.to_string()))
                .collect::<BTreeMap<_, _>>(),
        )
        .unwrap_or_default();
        summary.push_str(&format!(
            "{},{},{},{:?}\n",
            rank + 1,
            r.draw,
            r.best_val_ppl,
            assign
        ));
    }
    std::fs::write(out.join("summary.csv"), summary)?;

    let top_mean = |n: usize| -> f64 {
        let take = n.min(results.len());
        results[..take].iter().map(|r| r.best_val_ppl).sum::<f64>() / take as f64
    };
    let beating = results
        .iter()
        .filter(|r| r.best_val_ppl < grid.baseline_ppl)
        .count();
    println!("draws={}", results.len());
    println!("best={}", results[0].best_val_ppl);
    println!("top5_avg={}", top_mean(5));
    println!("top10_avg={}", top_mean(10));
    println!("baseline={}", grid.baseline_ppl);
    println!("beating_baseline={beating}");
    if !failures.is_empty() {
        return Err(Error::Config(format!("{} draws failed", failures.len())));
    }
    Ok(())
}

fn run_draw(
    cfg: &ExperimentConfig,
    grid: &GridSpec,
    corpus: &Corpus,
    out: &Path,
    k: usize,
) -> Result<GridResult> {
    let assignment = grid.assignment(k as u64);
    let mut drawn = cfg.with_overrides(&assignment)?;
    // isolated seed per draw
    drawn.run.seed = cfg.run.seed.wrapping_add(k as u64);
    let run_cfg = drawn.resolve(corpus.vocab.len())?;
    let dir = out.join(format!("draw_{k:04}"));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.resolved.toml"), drawn.to_toml()?)?;
    let outcome = train(&run_cfg, corpus, &dir)?;
    Ok(GridResult {
        draw: k,
        best_val_ppl: outcome.best_val_ppl,
        assignment,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train { config, out, seed } => cmd_train(&config, &out, seed).map(|()| true),
        Cmd::Eval {
            checkpoint,
            data,
            mode,
            split,
            mc,
            seed,
            batch,
            tbptt,
        } => cmd_eval(&checkpoint, data, &mode, &split, mc, seed, batch, tbptt).map(|()| true),
        Cmd::Verify {
            bits,
            trials,
            mc_samples,
            seed,
        } => cmd_verify(bits, trials, mc_samples, seed),
        Cmd::Grid {
            config,
            out,
            parallel,
        } => cmd_grid(&config, &out, parallel).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
