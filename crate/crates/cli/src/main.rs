use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kgreport::config::RunConfig;
use kgreport::image::GrayImage;
use kgreport::metrics::evaluate_texts;
use kgreport::nn::ModelState;
use kgreport::pipeline::{generate, inspect_graph, GraphSettings, Queues, Resources};
use kgreport::synth::{write_dataset, CorpusSpec, Split};
use kgreport::train::{self, Session};
use kgreport::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "kgreport",
    version,
    about = "Knowledge-graph guided report generation"
)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, knowledge base and vocabulary.
    Synth {
        /// Output directory; defaults to the config's data directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corpus spec JSON; the built-in chest spec when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train, writing checkpoints and metrics.jsonl to the output directory.
    Train {
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a split, or score prediction files directly.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Predictions JSONL with `id` and `text`.
        #[arg(long, requires = "references")]
        predictions: Option<PathBuf>,
        /// References JSONL with `id` and `text` (or `report`).
        #[arg(long, requires = "predictions")]
        references: Option<PathBuf>,
    },
    /// Generate a report for one image.
    Generate {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the dynamic graph built for one image as JSON.
    InspectGraph {
        #[arg(long)]
        image: PathBuf,
        /// Without a checkpoint the model is freshly initialized and the
        /// queues are empty.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Err(Error::Config("--config FILE is required".into())),
    }
}

fn default_checkpoint(cfg: &RunConfig, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.output_dir.join("best.ckpt"))
}

fn read_texts(path: &Path) -> Result<Vec<(String, String)>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let id = v["id"].as_str().ok_or_else(|| parse_err("missing id".into()))?;
        let body = v["text"]
            .as_str()
            .or_else(|| v["report"].as_str())
            .ok_or_else(|| parse_err("missing text".into()))?;
        out.push((id.to_string(), body.to_string()));
    }
    Ok(out)
}

fn evaluate_files(
    cfg: Option<&RunConfig>,
    predictions: &Path,
    references: &Path,
) -> Result<serde_json::Value> {
    let preds = read_texts(predictions)?;
    let refs: HashMap<String, String> = read_texts(references)?.into_iter().collect();
    let mut cands = Vec::new();
    let mut golds = Vec::new();
    for (id, text) in &preds {
        let gold = refs
            .get(id)
            .ok_or_else(|| Error::Config(format!("no reference for prediction {id}")))?;
        cands.push(text.as_str());
        golds.push(gold.as_str());
    }
    let labels = match cfg.and_then(|c| c.data.labels.as_ref()) {
        Some(p) => kgreport::metrics::LabelLexicon::load(p)?,
        None => kgreport::metrics::LabelLexicon::chexpert_like(),
    };
    let smoothing = cfg.is_some_and(|c| c.bleu_smoothing);
    Ok(serde_json::to_value(evaluate_texts(
        &cands, &golds, &labels, smoothing,
    )?)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, n, seed, spec } => {
            let dir = match (out, &cli.config) {
                (Some(d), _) => d,
                (None, Some(_)) => load_config(&cli.config)?.data.dir,
                (None, None) => return Err(Error::Config("synth needs --out or --config".into())),
            };
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::Io {
                        path: p.clone(),
                        source: e,
                    })?;
                    serde_json::from_str(&text)?
                }
                None => CorpusSpec::chest_default(),
            };
            let paths = write_dataset(&spec, n, seed, &dir)?;
            println!("{}", json!({"dir": paths.root, "records": n, "seed": seed}));
        }
        Command::Train { resume } => {
            let cfg = load_config(&cli.config)?;
            let mut session = match resume {
                Some(p) => Session::resume(&cfg, &p)?,
                None => Session::new(&cfg)?,
            };
            let log = session.run()?;
            println!(
                "{}",
                json!({
                    "steps": session.step,
                    "epochs": session.epoch,
                    "best_epoch": log.best_epoch,
                    "best_cider": log.best_cider,
                    "output_dir": cfg.output_dir,
                })
            );
        }
        Command::Evaluate {
            checkpoint,
            split,
            predictions,
            references,
        } => {
            if let (Some(p), Some(r)) = (predictions, references) {
                let cfg = cli
                    .config
                    .as_ref()
                    .map(|_| load_config(&cli.config))
                    .transpose()?;
                println!("{}", evaluate_files(cfg.as_ref(), &p, &r)?);
                return Ok(());
            }
            let cfg = load_config(&cli.config)?;
            let split: Split = split.parse()?;
            let ev = train::evaluate(&cfg, &default_checkpoint(&cfg, &checkpoint), split)?;
            println!("{}", serde_json::to_string(&ev.metrics)?);
        }
        Command::Generate { image, checkpoint } => {
            let cfg = load_config(&cli.config)?;
            let img = GrayImage::load_pgm(&image)?;
            let session = Session::resume(&cfg, &default_checkpoint(&cfg, &checkpoint))?;
            let g = generate(
                &session.state,
                &session.res,
                &session.settings,
                &session.queues,
                &[&img],
                cfg.max_generation_len,
                cfg.beam_width,
            )?;
            println!("{}", json!({"image": image, "report": g.text}));
        }
        Command::InspectGraph { image, checkpoint } => {
            let cfg = load_config(&cli.config)?;
            let img = GrayImage::load_pgm(&image)?;
            let report = match checkpoint {
                Some(p) => {
                    let s = Session::resume(&cfg, &p)?;
                    inspect_graph(&s.state, &s.res, &s.settings, &s.queues, &[&img])?
                }
                None => {
                    cfg.check_inputs()?;
                    let res = Resources::load(&cfg, HashMap::new())?;
                    let mut m = cfg.model.clone();
                    m.vocab_size = res.vocab.len();
                    let state = ModelState::new(&m, cfg.seed)?;
                    let queues = Queues::new(cfg.queue_capacity, m.proj_dim)?;
                    inspect_graph(&state, &res, &GraphSettings::from(&cfg), &queues, &[&img])?
                }
            };
            for w in &report.warnings {
                eprintln!("{}", json!({"warning": w}));
            }
            println!("{}", serde_json::to_string(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
