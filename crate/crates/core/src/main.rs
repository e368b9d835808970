use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gdig::cli::config::{corpus_config, oracle_config, out_dir, seed, OracleTestbed};
use gdig::cli::data::{write_corpus, write_json};
use gdig::cli::eval::{compare, cmd_evaluate};
use gdig::cli::{cmd_pipeline, Ini, PipelineConfig};
use gdig::oracle::{lm_oracle, make_noisy_records, quadratic_oracle};
use gdig::{Error, Result};

#[derive(Parser)]
#[command(name = "gdig", version, about = "Influence-based quality filtering and gradient-cluster diversity selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value config file with [section] headers
    #[arg(long)]
    config: PathBuf,
    /// Stage to resume from; earlier stages must be cached
    #[arg(long)]
    stage: Option<String>,
    /// Output directory (overrides [run] out)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master RNG seed (overrides [run] seed)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Finetune the model on the candidate pool
    Finetune(Common),
    /// Extract seed and candidate gradient features
    Grads(Common),
    /// Accumulate curvature and score candidates against seeds
    Influence(Common),
    /// Quality filter and diversity resampling from a cached influence matrix
    Select(Common),
    /// Run every stage, reusing valid caches
    Pipeline(Common),
    /// Token accuracy and BLEU of a parameter file on a test set
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Parameter file (overrides [evaluate] params)
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Compare influence predictions with upweighted retraining
    Oracle(Common),
    /// Write a synthetic cipher corpus with planted noise
    Corpus(Common),
}

fn load_ini(c: &Common) -> Result<Ini> {
    let mut ini = Ini::load(&c.config)?;
    if let Some(out) = &c.out {
        let abs = std::env::current_dir()
            .map_err(|e| Error::io(".", e))?
            .join(out);
        ini.set("run", "out", abs.to_string_lossy());
    }
    if let Some(s) = c.seed {
        ini.set("run", "seed", s.to_string());
    }
    Ok(ini)
}

fn pipeline(c: &Common, until: &str, default_resume: Option<&str>) -> Result<()> {
    let cfg = PipelineConfig::from_ini(&load_ini(c)?)?;
    let resume = c.stage.as_deref().or(default_resume);
    let outcome = cmd_pipeline(&cfg, resume, until)?;
    for s in &outcome.stages {
        println!("{:<10} {}", s.stage, if s.cached { "cached" } else { "computed" });
    }
    if let Some(r) = outcome.report {
        println!(
            "selected {} of {} quality-pass candidates -> {}",
            r.selected_ids.len(),
            r.quality_pass_ids.len(),
            cfg.out.join("selected.jsonl").display()
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Finetune(c) => pipeline(c, "finetune", None),
        Command::Grads(c) => pipeline(c, "grads", None),
        Command::Influence(c) => pipeline(c, "influence", None),
        Command::Select(c) => pipeline(c, "diversify", Some("filter")),
        Command::Pipeline(c) => pipeline(c, "diversify", None),
        Command::Evaluate { common, params } => {
            let ini = load_ini(common)?;
            let out = out_dir(&ini);
            let params = params
                .clone()
                .or_else(|| ini.path("evaluate", "params"))
                .unwrap_or_else(|| out.join("model.bin"));
            let test = ini
                .path("evaluate", "test")
                .or_else(|| ini.path("data", "test"))
                .ok_or_else(|| Error::Config("no test set: set [evaluate] test or [data] test".into()))?;
            let s = seed(&ini)?;
            let mut report = cmd_evaluate(&params, &test, s)?;
            if let Some(base) = ini.path("evaluate", "baseline") {
                let baseline = cmd_evaluate(&base, &test, s)?;
                compare(&mut report, &baseline, &base.to_string_lossy())?;
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_json(&out.join("eval.json"), &report)?;
            println!("token_accuracy {:.6}", report.token_accuracy);
            println!("bleu {:.4}", report.bleu);
            if let Some(t) = &report.t_test {
                println!("t {:.6} p {:.6}", t.t, t.p);
            }
            Ok(())
        }
        Command::Oracle(c) => {
            let ini = load_ini(c)?;
            let report = match oracle_config(&ini)? {
                OracleTestbed::Quadratic(q) => quadratic_oracle(&q)?,
                OracleTestbed::ToyLm(l) => lm_oracle(&l)?,
            };
            let out = out_dir(&ini);
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_json(&out.join("oracle.json"), &report)?;
            println!(
                "{}: {} pairs, pearson {:.4}, spearman {:.4}",
                report.testbed,
                report.entries.len(),
                report.pearson,
                report.spearman
            );
            Ok(())
        }
        Command::Corpus(c) => {
            let ini = load_ini(c)?;
            let (spec, output) = corpus_config(&ini)?;
            let records = make_noisy_records(&spec)?;
            if let Some(dir) = output.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_corpus(&output, &records)?;
            let noisy = records.iter().filter(|r| r.corrupted).count();
            println!("{} records ({noisy} corrupted) -> {}", records.len(), output.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("GDIG_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("E_CONFIG: GDIG_THREADS must be a positive integer, got `{v}`");
                return ExitCode::FAILURE;
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
