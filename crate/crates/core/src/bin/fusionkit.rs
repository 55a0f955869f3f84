use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fusionkit::checkpoint::load_map;
use fusionkit::config::load_config;
use fusionkit::ensemble::{ensemble, EnsembleMethod, PredictionMatrix};
use fusionkit::error::Error;
use fusionkit::eval::evaluate;
use fusionkit::pipeline;

#[derive(Parser)]
#[command(name = "fusionkit", version, about = "Merge, ensemble and evaluate safetensors checkpoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge the configured pool, then evaluate on the task pool if present
    Merge {
        #[arg(long)]
        config: PathBuf,
        /// Dotted overrides such as method.scaling=0.5
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on the config's task pool
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Combine stored predictions (`scores` tensors)
    Ensemble {
        #[arg(long, num_args = 1.., required = true)]
        preds: Vec<PathBuf>,
        /// simple_ensemble, weighted_ensemble or max_model_predictor
        #[arg(long)]
        method: String,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspection tools
    Inspect {
        #[command(subcommand)]
        what: Inspect,
    },
    /// Write deterministic toy fixtures and a ready pipeline config
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that the configured pool is mergeable
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum Inspect {
    /// Pairwise cosine similarity of task vectors
    TaskvecCosine {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FUSIONKIT_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Merge { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let out = pipeline::run(&cfg)?;
            if let Some(p) = cfg.merged_model_path() {
                println!("merged model: {}", p.display());
            }
            match out.eval_report {
                Some(r) => print!("{}", r.to_json()),
                None => println!("merged {} tensors", out.merged.len()),
            }
        }
        Command::Evaluate { model, config } => {
            let cfg = load_config::<&str>(&config, &[])?;
            let tasks = pipeline::load_tasks(&cfg)?;
            let report = evaluate(&load_map(&model)?, &tasks)?;
            if let Some(p) = cfg.report_path() {
                pipeline::write_report(&report, &p)?;
            }
            print!("{}", report.to_json());
        }
        Command::Ensemble {
            preds,
            method,
            weights,
            out,
        } => {
            let method: EnsembleMethod = method.parse()?;
            let preds = preds
                .iter()
                .map(PredictionMatrix::load)
                .collect::<Result<Vec<_>, _>>()?;
            let combined = ensemble(method, &preds, weights.as_deref())?;
            combined.save(&out)?;
            println!("wrote {}x{} probabilities to {}", combined.n_samples(), combined.n_classes(), out.display());
        }
        Command::Inspect {
            what: Inspect::TaskvecCosine { config, json },
        } => {
            let cfg = load_config::<&str>(&config, &[])?;
            let matrix = cfg.model_pool()?.task_vector_cosine_matrix()?;
            print!("{matrix}");
            if let Some(p) = json {
                let text = serde_json::to_string_pretty(&matrix).expect("matrix serializes") + "\n";
                std::fs::write(&p, text).map_err(|source| Error::Io { path: p, source })?;
            }
        }
        Command::Synth { seed, out } => {
            let manifest = fusionkit::synth::synth_fixtures(seed, &out)?;
            for (name, t) in &manifest.tasks {
                println!("{name}: expert accuracy {:.4}", t.expert_accuracy);
            }
            println!("config: {}", out.join(&manifest.config).display());
        }
        Command::Validate { config } => {
            let cfg = load_config::<&str>(&config, &[])?;
            let report = pipeline::validate(&cfg.model_pool()?)?;
            print!("{report}");
        }
    }
    Ok(())
}
