use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use funcgraph_cli::config::{ConfigError, DetectorBackendConfig, PipelineConfig};
use funcgraph_cli::pipeline::{Pipeline, PipelineError, RunTarget, Stage};
use funcgraph_cli::serve;
use funcgraph_core::backend::ModelClient;
use funcgraph_core::detection::{Detector, FixtureDetector, HttpDetector, RecordingDetector};
use funcgraph_core::eval;

#[derive(Parser)]
#[command(name = "funcgraph", version, about = "Build and evaluate functional 3D scene graphs from posed RGB-D scans")]
struct Cli {
    /// Pipeline configuration file (JSON).
    #[arg(short, long, global = true, default_value = "funcgraph.json")]
    config: PathBuf,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    All,
    Detect,
    Fuse,
    Describe,
    Reason,
    Graph,
}

#[derive(Args)]
struct SceneFilter {
    /// Restrict to these scene ids (repeatable).
    #[arg(long = "scene")]
    scenes: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one stage, or all of them in order.
    Run {
        target: Target,
        #[command(flatten)]
        filter: SceneFilter,
    },
    /// Tag frames and detect objects and interactive elements.
    Detect(SceneFilter),
    /// Fuse detections into multi-view 3D candidates.
    Fuse(SceneFilter),
    /// Caption candidate views and summarize them.
    Describe(SceneFilter),
    /// Infer functional edges.
    Reason(SceneFilter),
    /// Assemble graph.json.
    Graph(SceneFilter),
    /// Score predictions against ground-truth graphs.
    Eval {
        #[arg(long)]
        one_to_one: bool,
        #[arg(long)]
        per_scene_vocabulary: bool,
    },
    /// Ask a question about a scene graph.
    Qa {
        #[arg(long)]
        scene: String,
        question: String,
    },
    /// Serve the annotation and inspection API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Run all stages against live backends, recording every response as a
    /// replay fixture.
    FixturesRecord {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        detector_dir: PathBuf,
        #[command(flatten)]
        filter: SceneFilter,
    },
}

fn filter(f: &SceneFilter) -> Option<&[String]> {
    (!f.scenes.is_empty()).then_some(f.scenes.as_slice())
}

fn run_stage(cfg: PipelineConfig, target: RunTarget, f: &SceneFilter) -> anyhow::Result<()> {
    let pipeline = Pipeline::new(cfg)?;
    for o in pipeline.run(target, filter(f))? {
        println!("{}\t{}\t{}", o.scene, o.stage.name(), if o.ran { "done" } else { "up-to-date" });
    }
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    match cli.command {
        Command::Run { target, filter } => {
            let target = match target {
                Target::All => RunTarget::All,
                Target::Detect => RunTarget::Stage(Stage::Detect),
                Target::Fuse => RunTarget::Stage(Stage::Fuse),
                Target::Describe => RunTarget::Stage(Stage::Describe),
                Target::Reason => RunTarget::Stage(Stage::Reason),
                Target::Graph => RunTarget::Stage(Stage::Graph),
            };
            run_stage(cfg, target, &filter)
        }
        Command::Detect(f) => run_stage(cfg, RunTarget::Stage(Stage::Detect), &f),
        Command::Fuse(f) => run_stage(cfg, RunTarget::Stage(Stage::Fuse), &f),
        Command::Describe(f) => run_stage(cfg, RunTarget::Stage(Stage::Describe), &f),
        Command::Reason(f) => run_stage(cfg, RunTarget::Stage(Stage::Reason), &f),
        Command::Graph(f) => run_stage(cfg, RunTarget::Stage(Stage::Graph), &f),
        Command::Eval {
            one_to_one,
            per_scene_vocabulary,
        } => {
            cfg.eval.one_to_one |= one_to_one;
            cfg.eval.per_scene_vocabulary |= per_scene_vocabulary;
            let report = Pipeline::new(cfg)?.evaluate()?;
            print!("{}", eval::render_table(&report));
            Ok(())
        }
        Command::Qa { scene, question } => {
            let answer = Pipeline::new(cfg)?.qa(&scene, &question)?;
            println!("{}", answer.answer);
            Ok(())
        }
        Command::Serve { bind } => {
            let bind = bind.unwrap_or_else(|| cfg.serve.bind.clone());
            let rt = tokio::runtime::Runtime::new().context("starting async runtime")?;
            rt.block_on(serve::serve(cfg, &bind))
                .with_context(|| format!("serving on {bind}"))
        }
        Command::FixturesRecord {
            model_dir,
            detector_dir,
            filter,
        } => {
            let detector: Box<dyn Detector> = match &cfg.backends.detector {
                DetectorBackendConfig::Http { url } => {
                    Box::new(RecordingDetector::new(HttpDetector::new(url.clone()), detector_dir))
                }
                DetectorBackendConfig::Fixture { dir } => {
                    Box::new(RecordingDetector::new(FixtureDetector::new(dir), detector_dir))
                }
            };
            let client = ModelClient::new(cfg.model_backend()).with_cache_dir(model_dir);
            let pipeline = Pipeline::with_backends(cfg, detector, client)?;
            for o in pipeline.run(RunTarget::All, self::filter(&filter))? {
                println!("{}\t{}\t{}", o.scene, o.stage.name(), if o.ran { "recorded" } else { "up-to-date" });
            }
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<PipelineError>() {
        return e.exit_code() as u8;
    }
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
