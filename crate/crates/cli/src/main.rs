//! `infill`: the experiment pipeline from corpus to served model.
//!
//! Every subcommand accepts `--config`, `--seed`, and `--out-dir`. Results go
//! to stdout as JSON (the `eval` table is plain text); failures print one
//! JSON object `{"error", "message", ...}` on stderr and exit with status 1.

use std::io::{IsTerminal, Read};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use infill_core::config::{ConfigError, RunConfig};
use infill_core::examples::Strategy;
use infill_core::infill::{complete, InfillError, InfillRequest};
use infill_core::model::DecodeConfig;
use infill_core::pipeline::{self, Artifacts, PipelineError};
use infill_service::ServeError;

#[derive(Parser)]
#[command(name = "infill", version, about = "Train, evaluate, and serve text infilling models")]
struct Cli {
    /// Run config (TOML). Built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed; for `infill`, the sampling seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding every artifact of the run.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    All,
    Ilm,
    Lm,
    Lmrev,
    Lmall,
}

impl StrategyArg {
    fn strategies(self) -> Vec<Strategy> {
        match self {
            StrategyArg::All => Strategy::ALL.to_vec(),
            StrategyArg::Ilm => vec![Strategy::Ilm],
            StrategyArg::Lm => vec![Strategy::Lm],
            StrategyArg::Lmrev => vec![Strategy::LmRev],
            StrategyArg::Lmall => vec![Strategy::LmAll],
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Load or generate the corpus and write train/valid/test splits.
    Ingest,
    /// Learn the subword vocabulary from the training split.
    TrainVocab,
    /// Mask documents and encode training and validation examples.
    MakeExamples {
        #[arg(long, value_enum, default_value = "all")]
        strategy: StrategyArg,
    },
    /// Train one model per strategy from scratch.
    Train {
        #[arg(long, value_enum, default_value = "all")]
        strategy: StrategyArg,
    },
    /// Score all strategies on the test split and print the report table.
    Eval,
    /// Run every stage from ingest to eval.
    Run,
    /// Fill the blanks of one text with the ILM model.
    Infill {
        /// Text with `[blank]` / `[blank:<granularity>]` markers; read from
        /// stdin when omitted.
        #[arg(long)]
        text: Option<String>,
        /// Checkpoint to use instead of the run's ILM model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Decoding settings as JSON, e.g. `{"method":"greedy"}`.
        #[arg(long)]
        decode: Option<String>,
    },
    /// Serve the HTTP API.
    Serve {
        /// Address to listen on, overriding `serve.bind`.
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Pipeline(PipelineError),
    Serve(ServeError),
    Infill(InfillError),
    Input(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Pipeline(e.into())
    }
}

impl CliError {
    fn to_json(&self) -> Value {
        match self {
            CliError::Pipeline(e) => {
                let mut v = json!({ "error": e.kind(), "message": e.to_string() });
                match e {
                    PipelineError::Config(ConfigError::Invalid { keys, .. }) => v["keys"] = json!(keys),
                    PipelineError::MissingArtifact { path, .. } => v["path"] = json!(path),
                    _ => {}
                }
                v
            }
            CliError::Serve(e) => json!({ "error": "serve", "message": e.to_string() }),
            CliError::Infill(InfillError::MalformedMarker { offset, .. }) => {
                json!({ "error": "malformed_marker", "message": self.message(), "offset": offset })
            }
            CliError::Infill(e) => json!({ "error": "infill", "message": e.to_string() }),
            CliError::Input(m) => json!({ "error": "input", "message": m }),
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Pipeline(e) => e.to_string(),
            CliError::Serve(e) => e.to_string(),
            CliError::Infill(e) => e.to_string(),
            CliError::Input(m) => m.clone(),
        }
    }
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string(v).expect("json serializes"));
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    let out = Artifacts::new(&cli.out_dir);
    match &cli.command {
        Command::Ingest => {
            let s = pipeline::ingest(&cfg, &out)?;
            print_json(&json!({ "stage": "ingest", "documents": s }));
        }
        Command::TrainVocab => {
            let r = pipeline::train_vocab_stage(&cfg, &out)?;
            print_json(&json!({
                "stage": "train-vocab",
                "size": r.vocab.size(),
                "merges_requested": r.merges_requested,
                "merges_learned": r.merges_learned,
                "fingerprint": r.vocab.fingerprint(),
            }));
        }
        Command::MakeExamples { strategy } => {
            let s = pipeline::make_examples(&cfg, &out, &strategy.strategies())?;
            print_json(&json!({ "stage": "make-examples", "splits": s }));
        }
        Command::Train { strategy } => train(&cfg, &out, &strategy.strategies())?,
        Command::Eval => {
            let report = pipeline::eval_stage(&cfg, &out)?;
            print!("{}", report.to_table());
        }
        Command::Run => {
            pipeline::ingest(&cfg, &out)?;
            pipeline::train_vocab_stage(&cfg, &out)?;
            pipeline::make_examples(&cfg, &out, &Strategy::ALL)?;
            train(&cfg, &out, &Strategy::ALL)?;
            print!("{}", pipeline::eval_stage(&cfg, &out)?.to_table());
        }
        Command::Infill { text, checkpoint, decode } => {
            let text = match text {
                Some(t) => t.clone(),
                None => read_stdin()?,
            };
            let decode = match decode {
                Some(d) => serde_json::from_str::<DecodeConfig>(d).map_err(|e| CliError::Input(format!("--decode: {e}")))?,
                None => cfg.serve.decode.clone(),
            };
            let vocab = pipeline::load_vocab(&out, "infill")?;
            let model = match checkpoint {
                Some(path) => {
                    let loaded = infill_service::Loaded::from_files(path, &out.vocab()).map_err(CliError::Serve)?;
                    loaded.model
                }
                None => pipeline::load_model(&out, "infill", Strategy::Ilm, &vocab)?,
            };
            let request = InfillRequest { text, decode, seed: cli.seed };
            let result = complete(&model, &vocab, &request).map_err(CliError::Infill)?;
            print_json(&serde_json::to_value(result).expect("result serializes"));
        }
        Command::Serve { bind, checkpoint } => {
            let mut serve_cfg = cfg.serve.clone();
            if let Some(b) = bind {
                serve_cfg.bind = b.clone();
            }
            let checkpoint = checkpoint
                .clone()
                .or_else(|| serve_cfg.checkpoint.clone())
                .unwrap_or_else(|| out.checkpoint(Strategy::Ilm));
            let vocab = serve_cfg.vocab.clone().unwrap_or_else(|| out.vocab());
            for path in [&checkpoint, &vocab] {
                if !path.is_file() {
                    return Err(PipelineError::MissingArtifact { stage: "serve", path: path.clone() }.into());
                }
            }
            let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Serve(e.into()))?;
            runtime
                .block_on(infill_service::serve(
                    serve_cfg,
                    checkpoint,
                    vocab,
                    async {
                        let _ = tokio::signal::ctrl_c().await;
                    },
                    |addr| print_json(&json!({ "listening": addr.to_string() })),
                ))
                .map_err(CliError::Serve)?;
        }
    }
    Ok(())
}

fn train(cfg: &RunConfig, out: &Artifacts, strategies: &[Strategy]) -> Result<(), CliError> {
    let outcomes = pipeline::train_stage(cfg, out, strategies, |strategy, e| {
        if e.val_ppl.is_some() {
            eprintln!("{}", json!({ "strategy": strategy, "step": e.step, "loss": e.loss, "val_ppl": e.val_ppl }));
        }
    })?;
    for (strategy, o) in outcomes {
        print_json(&json!({
            "stage": "train",
            "strategy": strategy,
            "steps": o.steps,
            "best_step": o.best_step,
            "best_val_ppl": o.best_val_ppl,
            "stopped_early": o.stopped_early,
        }));
    }
    Ok(())
}

fn read_stdin() -> Result<String, CliError> {
    let mut stdin = std::io::stdin();
    if stdin.is_terminal() {
        return Err(CliError::Input("pass --text or pipe the text on stdin".into()));
    }
    let mut text = String::new();
    stdin.read_to_string(&mut text).map_err(|e| CliError::Input(e.to_string()))?;
    Ok(text.strip_suffix('\n').map(str::to_string).unwrap_or(text))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
