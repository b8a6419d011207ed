use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use pianist_core::error::{Error, Result};
use pianist_core::pipeline::{self, PipelineConfig, PlayMode};
use pianist_core::synth::{generate_corpus, SynthSpec};
use pianist_core::KeyGeometry;

#[derive(Parser)]
#[command(name = "pianist", version, about = "Piano-playing pipeline driver")]
struct Cli {
    /// Pipeline config JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// MIDI files to piano-state CSVs.
    Ingest,
    /// Pixel fingertip tracks to aligned 3-D fingertip CSVs.
    Retarget,
    /// IK nominal joint trajectories.
    IkTrack,
    /// Residual experts by cross-entropy search.
    TrainSong {
        /// Songs to train; the training split when omitted.
        #[arg(long = "song")]
        songs: Vec<String>,
    },
    /// Goal autoencoder.
    TrainCodec,
    /// Expert rollout dataset.
    DistillBuild,
    /// High- and low-level policies.
    DistillTrain,
    /// Runs songs and writes logs, pressed keys and metrics.
    Play {
        #[arg(long, value_enum, default_value_t = Mode::TwoStage)]
        mode: Mode,
        /// Shorthand for `--mode oracle-hl`.
        #[arg(long)]
        oracle_hl: bool,
        #[arg(long = "song")]
        songs: Vec<String>,
    },
    /// Metrics of a pressed-key CSV against a goal CSV.
    Eval {
        #[arg(long)]
        pressed: PathBuf,
        #[arg(long)]
        goal: PathBuf,
        /// Also writes the metrics JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metric tables and piano rolls for everything played.
    Report,
    /// Every stage in order.
    Run,
    /// Writes a synthetic corpus and a matching pipeline config.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        train: usize,
        #[arg(long, default_value_t = 2)]
        test: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    TwoStage,
    OracleHl,
    Expert,
    Nominal,
}

impl From<Mode> for PlayMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::TwoStage => PlayMode::TwoStage,
            Mode::OracleHl => PlayMode::OracleHighLevel,
            Mode::Expert => PlayMode::Expert,
            Mode::Nominal => PlayMode::Nominal,
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli.config.as_deref().ok_or_else(|| Error::Config {
        field: "--config".into(),
        message: "required for this subcommand".into(),
    })?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn songs(v: &[String]) -> Option<&[String]> {
    (!v.is_empty()).then_some(v)
}

fn metrics_json(rows: &[(String, pianist_core::metrics::Metrics)]) -> Value {
    rows.iter().map(|(id, m)| json!({ "song": id, "metrics": m })).collect()
}

fn run(cli: &Cli) -> Result<Value> {
    Ok(match &cli.command {
        Command::Ingest => json!({ "songs": pipeline::stage_ingest(&load_config(cli)?)? }),
        Command::Retarget => json!({ "songs": pipeline::stage_retarget(&load_config(cli)?)? }),
        Command::IkTrack => json!({ "songs": pipeline::stage_ik_track(&load_config(cli)?)? }),
        Command::TrainSong { songs: s } => {
            json!({ "songs": pipeline::stage_train_song(&load_config(cli)?, songs(s))? })
        }
        Command::TrainCodec => {
            let codec = pipeline::stage_train_codec(&load_config(cli)?)?;
            json!({ "latent_dim": codec.latent_dim() })
        }
        Command::DistillBuild => serde_json::to_value(pipeline::stage_distill_build(&load_config(cli)?)?)
            .expect("manifest serializes"),
        Command::DistillTrain => {
            pipeline::stage_distill_train(&load_config(cli)?)?;
            json!({ "policies": ["high_level.json", "low_level.json"] })
        }
        Command::Play { mode, oracle_hl, songs: s } => {
            let mode = if *oracle_hl { PlayMode::OracleHighLevel } else { (*mode).into() };
            metrics_json(&pipeline::stage_play(&load_config(cli)?, songs(s), mode)?)
        }
        Command::Eval { pressed, goal, out } => {
            let m = pipeline::eval_files(pressed, goal)?;
            let v = serde_json::to_value(m).expect("metrics serialize");
            if let Some(out) = out {
                write(out, &format!("{}\n", serde_json::to_string_pretty(&v).expect("json")))?;
            }
            v
        }
        Command::Report => {
            let files = pipeline::stage_report(&load_config(cli)?)?;
            json!({ "written": files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>() })
        }
        Command::Run => serde_json::to_value(pipeline::run_all(&load_config(cli)?)?).expect("summary serializes"),
        Command::GenCorpus { out, train, test } => {
            let cfg = PipelineConfig {
                seed: cli.seed.unwrap_or(0),
                ..PipelineConfig::default()
            };
            let corpus = generate_corpus(&KeyGeometry::default(), &SynthSpec::default(), *train, *test, cfg.seed)?;
            pipeline::write_corpus(out, &corpus, &cfg)?;
            serde_json::to_value(&corpus.split).expect("split serializes")
        }
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("{}", json!({ "error": { "kind": "config", "message": e.to_string() } }));
            return ExitCode::FAILURE;
        }
    }
    match run(&cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}
