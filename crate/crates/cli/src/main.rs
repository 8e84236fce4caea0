use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use topolab::io::{load_case, read_volume, save_json, threshold, write_text, CaseFile};
use topolab::model::ClassifierKind;
use topolab::pipeline::{
    evaluate_predictions, generate_to_dir, load_model, load_predictions, load_split, predict_cases, train_cases,
    RunConfig,
};
use topolab::skeleton::{skeletonize, to_centerline_graph};
use topolab::topology::CategoryTopology;
use topolab::tree::{Domain, DomainRoot};
use topolab::{Error, Result};

#[derive(Parser)]
#[command(name = "topolab", version, about = "Topology-preserving coronary artery segment labeling")]
struct Cli {
    /// Seed for generation and training (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for generation, inference and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Category tree configuration.
    #[arg(long, global = true, default_value = "config/topology_14.json")]
    topology: PathBuf,
    /// JSON run configuration with `model`, `train` and `generator` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train a model on the train split of a dataset.
    Train(TrainArgs),
    /// Label the cases of a dataset split.
    Infer(InferArgs),
    /// Score predictions against gold labels.
    Eval(EvalArgs),
    /// Thin a vessel mask into a centerline graph.
    Skeletonize(SkeletonizeArgs),
    /// Convert a centerline case into pre-split segments.
    Split(SplitArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    cases: Option<usize>,
    /// Number of held-out test cases.
    #[arg(long)]
    test: Option<usize>,
    /// Also render intensity volumes.
    #[arg(long)]
    volumes: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Classifier {
    Connection,
    Linear,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_enum)]
    classifier: Option<Classifier>,
}

#[derive(Args)]
struct InferArgs {
    /// Directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Accept a connection whose classes are a topology edge in either direction.
    #[arg(long)]
    undirected_viola: bool,
    /// Report JSON path; the text table always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SkeletonizeArgs {
    /// Volume header; voxels above 0.5 are foreground.
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Ostium as DOMAIN=POINT (for example LD=0); with roots a case file is written.
    #[arg(long = "root", value_parser = parse_root)]
    roots: Vec<DomainRoot>,
    #[arg(long, default_value = "case")]
    id: String,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    case: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_root(s: &str) -> std::result::Result<DomainRoot, String> {
    let (d, i) = s.split_once('=').ok_or("expected DOMAIN=POINT")?;
    let domain = match d {
        "LD" => Domain::LD,
        "RD" => Domain::RD,
        _ => return Err(format!("unknown domain {d}; use LD or RD")),
    };
    let index = i.parse().map_err(|e| format!("bad point index {i}: {e}"))?;
    Ok(DomainRoot { domain, index })
}

fn echo(command: &str, resolved: serde_json::Value) {
    eprintln!(
        "{command}: resolved configuration\n{}",
        serde_json::to_string_pretty(&resolved).expect("json")
    );
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut run = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::benchmark(),
    };
    if let Some(seed) = cli.seed {
        run.generator.seed = seed;
        run.train.seed = seed;
    }
    Ok(run)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let topo = CategoryTopology::load(&cli.topology)?;
    let mut config = run_config(&cli)?;
    match &cli.command {
        Command::Generate(a) => {
            if let Some(n) = a.cases {
                config.generator.cases = n;
            }
            if let Some(n) = a.test {
                config.test_cases = n;
            }
            if a.volumes && config.generator.volume.is_none() {
                config.generator.volume = Some(Default::default());
            }
            echo(
                "generate",
                json!({ "generator": config.generator, "test_cases": config.test_cases, "topology": cli.topology }),
            );
            let m = generate_to_dir(&a.out, &config, &topo)?;
            println!(
                "wrote {} train and {} test cases to {}",
                m.train.len(),
                m.test.len(),
                a.out.display()
            );
        }
        Command::Train(a) => {
            if let Some(n) = a.iters {
                config.train.total_iterations = n;
            }
            if let Some(lr) = a.lr {
                config.train.base_lr = lr;
            }
            if let Some(b) = a.batch {
                config.train.batch_size = b;
            }
            if let Some(c) = a.classifier {
                config.model.classifier = match c {
                    Classifier::Connection => ClassifierKind::Connection,
                    Classifier::Linear => ClassifierKind::Linear,
                };
            }
            echo("train", json!({ "model": config.model, "train": config.train, "data": a.data }));
            config.train.validate()?;
            let cases = load_split(&a.data, "train", &topo)?;
            let summary = train_cases(&cases, &config, &topo, &a.out)?;
            if !summary.excluded.is_empty() {
                eprintln!("excluded cases: {}", summary.excluded.join(", "));
            }
            let last = summary.outcome.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!(
                "trained {} steps on {} cases; final batch loss {last:.4}; checkpoint {}",
                summary.outcome.state.t,
                cases.len() - summary.excluded.len(),
                summary.checkpoint.display()
            );
        }
        Command::Infer(a) => {
            let (model, store) = load_model(&a.model)?;
            echo("infer", json!({ "model": model.config(), "split": a.split, "data": a.data }));
            let cases = load_split(&a.data, &a.split, model.topology())?;
            let preds = predict_cases(&model, &store, &cases)?;
            save_json(&a.out, &preds)?;
            println!("labeled {} cases into {}", preds.cases.len(), a.out.display());
        }
        Command::Eval(a) => {
            echo(
                "eval",
                json!({ "split": a.split, "directed_viola": !a.undirected_viola, "topology": cli.topology }),
            );
            let cases = load_split(&a.data, &a.split, &topo)?;
            let preds = load_predictions(&a.predictions)?;
            let report = evaluate_predictions(&preds, &cases, &topo, !a.undirected_viola)?;
            if let Some(out) = &a.out {
                write_text(out, &report.to_json())?;
            }
            print!("{}", report.to_table());
        }
        Command::Skeletonize(a) => {
            echo("skeletonize", json!({ "volume": a.volume, "roots": a.roots }));
            let mask = threshold(&read_volume(&a.volume)?)?;
            let skeleton = skeletonize(&mask)?;
            let graph = to_centerline_graph(&skeleton)?;
            println!(
                "{} foreground voxels thinned to {} centerline points",
                mask.len(),
                graph.len()
            );
            if a.roots.is_empty() {
                save_json(&a.out, &graph)?;
            } else {
                save_json(&a.out, &CaseFile::from_centerline(&a.id, graph, a.roots.clone()))?;
            }
        }
        Command::Split(a) => {
            echo("split", json!({ "case": a.case }));
            let file = load_case(&a.case)?;
            let tree = file.to_tree()?;
            let mut out = CaseFile::from_tree(&file.id, &tree, None, &topo);
            out.volume = file.volume.clone();
            save_json(&a.out, &out)?;
            println!("{} segments, {} connections", tree.len(), tree.connections.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
