//! `sfuda` command-line entry point.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sfuda_core::data::{
    load_dataset, make_synthetic_shift_suite, save_dataset, Dataset, ImageTensor, LabeledDataset, Seed, ShiftSuite,
    StorageDtype,
};
use sfuda_core::experiment::{run_strategy, target_side, train_oracle, ExperimentConfig};
use sfuda_core::mia::run_membership_experiment;
use sfuda_core::nn::{load_checkpoint, save_checkpoint};
use sfuda_core::oracle::{
    OracleClient, OracleServer, OracleService, SessionId, SourceEnsemble, SubmitOutcome, TcpOracleClient,
};
use sfuda_core::pipeline::{Ablation, RunReport, Strategy};
use sfuda_core::{Error, Result};

#[derive(Parser)]
#[command(name = "sfuda", version, about = "Query-only source-free domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment configuration; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; every stochastic choice derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for all artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DataArg {
    /// Dataset directory written by `gen-data`; regenerated from the seed when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic domain-shift suite.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one source model per source domain.
    TrainSource {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Serve the source ensemble over TCP until killed.
    ServeOracle {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Directory with `source_<i>.bin` checkpoints from `train-source`.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Port to listen on; 0 picks a free one.
        #[arg(long, default_value_t = 7878)]
        port: u16,
    },
    /// Run the adaptation pipeline.
    RunPipeline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// `inproc` or `tcp://host:port`.
        #[arg(long, default_value = "inproc")]
        oracle: String,
        #[arg(long)]
        ablation: Option<Ablation>,
    },
    /// Run a query strategy: a baseline or the pipeline.
    RunBaseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "inproc")]
        oracle: String,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        ablation: Option<Ablation>,
    },
    /// Membership inference against source models and a query-initialized model.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Print a saved report.
    Report {
        /// `report.json` or the directory holding it.
        path: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    Ok(cfg.reseeded(Seed(common.seed)))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

/// Records the resolved configuration and command-line context of a run.
fn record_run(common: &Common, cfg: &ExperimentConfig, extra: serde_json::Value) -> Result<()> {
    let mut record = json!({ "seed": common.seed, "config": cfg });
    if let (Some(obj), serde_json::Value::Object(more)) = (record.as_object_mut(), extra) {
        obj.extend(more);
    }
    write_json(&common.out.join("config.json"), &record)
}

fn source_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("source_{i}"))
}

fn load_labeled(dir: &Path) -> Result<LabeledDataset> {
    load_dataset(dir)?.into_labeled().ok_or_else(|| Error::InvalidInput(format!("{} has no labels", dir.display())))
}

fn load_suite(root: &Path) -> Result<ShiftSuite> {
    let mut sources = Vec::new();
    while source_dir(root, sources.len()).is_dir() {
        sources.push(load_labeled(&source_dir(root, sources.len()))?);
    }
    if sources.is_empty() {
        return Err(Error::InvalidInput(format!("no source_0 directory under {}", root.display())));
    }
    Ok(ShiftSuite {
        sources,
        target: load_labeled(&root.join("target"))?,
        third_party: load_dataset(root.join("third_party"))?.into_unlabeled(),
    })
}

fn suite(common: &Common, data: &DataArg, cfg: &ExperimentConfig) -> Result<ShiftSuite> {
    match &data.data {
        Some(dir) => load_suite(dir),
        None => make_synthetic_shift_suite(Seed(common.seed), &cfg.data),
    }
}

fn ensemble(common: &Common, cfg: &ExperimentConfig, suite: &ShiftSuite) -> Result<SourceEnsemble> {
    let (ensemble, stats) = train_oracle(&suite.sources, &suite.target, &cfg.sources, Seed(common.seed))?;
    for (i, s) in stats.iter().enumerate() {
        log::info!("source {i}: loss {:.4} -> {:.4}", s.initial_loss, s.final_loss);
    }
    Ok(ensemble)
}

/// Client wrapper that keeps the labels of every finalized session.
struct Recording<C> {
    inner: C,
    sessions: Mutex<Vec<Vec<u32>>>,
}

impl<C: OracleClient> OracleClient for Recording<C> {
    fn open(&self) -> Result<SessionId> {
        self.inner.open()
    }

    fn submit(&self, session: SessionId, images: &ImageTensor) -> Result<SubmitOutcome> {
        self.inner.submit(session, images)
    }

    fn finalize(&self, session: SessionId) -> Result<Vec<u32>> {
        let labels = self.inner.finalize(session)?;
        self.sessions.lock().expect("label log poisoned").push(labels.clone());
        Ok(labels)
    }
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let suite = make_synthetic_shift_suite(Seed(common.seed), &cfg.data)?;
    for (i, s) in suite.sources.iter().enumerate() {
        save_dataset(source_dir(&common.out, i), &Dataset::Labeled(s.clone()), StorageDtype::F32)?;
    }
    save_dataset(common.out.join("target"), &Dataset::Labeled(suite.target.clone()), StorageDtype::F32)?;
    save_dataset(common.out.join("third_party"), &Dataset::Unlabeled(suite.third_party.clone()), StorageDtype::F32)?;
    record_run(common, &cfg, json!({}))?;
    println!(
        "wrote {} source domains, target ({}) and third-party ({}) to {}",
        suite.sources.len(),
        suite.target.len(),
        suite.third_party.len(),
        common.out.display()
    );
    Ok(())
}

fn train_source(common: &Common, data: &DataArg) -> Result<()> {
    let cfg = load_config(common)?;
    let suite = suite(common, data, &cfg)?;
    let ensemble = ensemble(common, &cfg, &suite)?;
    for (i, m) in ensemble.models().iter().enumerate() {
        save_checkpoint(common.out.join(format!("source_{i}.bin")), m)?;
    }
    let source_only = ensemble.source_only_accuracy(&suite.target)?;
    record_run(common, &cfg, json!({ "source_only_accuracy": source_only }))?;
    println!("trained {} source models; source-only target accuracy {source_only:.2}%", ensemble.num_models());
    Ok(())
}

fn serve_oracle(common: &Common, data: &DataArg, models: Option<&Path>, host: &str, port: u16) -> Result<()> {
    let cfg = load_config(common)?;
    let suite = suite(common, data, &cfg)?;
    let ensemble = match models {
        Some(dir) => {
            let models = (0..suite.sources.len())
                .map(|i| load_checkpoint(dir.join(format!("source_{i}.bin"))))
                .collect::<Result<Vec<_>>>()?;
            let mut forbidden: std::collections::HashSet<_> =
                suite.sources.iter().flat_map(|s| s.images.content_digests()).collect();
            forbidden.extend(suite.target.images.content_digests());
            SourceEnsemble::new(models, forbidden)?
        }
        None => ensemble(common, &cfg, &suite)?,
    };
    let server = OracleServer::bind((host, port), Arc::new(OracleService::new(ensemble)))?;
    println!("listening on {}", server.local_addr()?);
    std::io::stdout().flush()?;
    server.run()
}

fn connect(
    oracle: &str,
    common: &Common,
    cfg: &ExperimentConfig,
    suite: &ShiftSuite,
) -> Result<(Box<dyn OracleClient>, Option<f64>)> {
    if oracle == "inproc" {
        let ensemble = ensemble(common, cfg, suite)?;
        let source_only = ensemble.source_only_accuracy(&suite.target)?;
        Ok((Box::new(OracleService::new(ensemble)), Some(source_only)))
    } else if oracle.starts_with("tcp://") {
        Ok((Box::new(TcpOracleClient::connect(oracle)?), None))
    } else {
        Err(Error::Config(format!("--oracle must be `inproc` or `tcp://host:port`, got `{oracle}`")))
    }
}

fn run(common: &Common, data: &DataArg, oracle: &str, strategy: Strategy, ablation: Option<Ablation>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(a) = ablation {
        cfg.pipeline.stages = a.stages();
    }
    cfg.pipeline.output_dir = Some(common.out.clone());
    cfg.validate()?;
    let suite = suite(common, data, &cfg)?;
    let (client, source_only) = connect(oracle, common, &cfg, &suite)?;
    let recording = Recording { inner: client, sessions: Mutex::new(Vec::new()) };
    let mut report = run_strategy(&recording, strategy, target_side(&suite), &cfg, Seed(common.seed))?;
    report.source_only_accuracy = source_only;
    if strategy == Strategy::Sfuda {
        report.ablation = Some(ablation.map_or_else(|| "custom".to_string(), |a| a.to_string()));
    }
    report.write(&common.out)?;
    write_json(&common.out.join("oracle_labels.json"), &*recording.sessions.lock().expect("label log poisoned"))?;
    record_run(common, &cfg, json!({ "oracle": oracle, "strategy": strategy, "ablation": ablation }))?;
    print!("{}", report.summary());
    Ok(())
}

fn attack(common: &Common, data: &DataArg) -> Result<()> {
    let cfg = load_config(common)?;
    let suite = suite(common, data, &cfg)?;
    let result = run_membership_experiment(&suite.sources, &suite.third_party.images, Seed(common.seed), &cfg.mia)?;
    let mia = json!({
        "source_models": result.source_judge,
        "sfuda_init": result.init_judge,
        "source_mean": result.source_mean,
        "sfuda_init_mean": result.init_mean,
        "gap": result.gap,
        "details": result,
    });
    let path = common.out.join("report.json");
    let mut report = if path.is_file() {
        RunReport::read(&path)?
    } else {
        RunReport {
            strategy: "attack".into(),
            seed: common.seed,
            num_classes: suite.target.num_classes,
            config: serde_json::to_value(&cfg.mia)?,
            ..Default::default()
        }
    };
    report.mia = Some(mia);
    report.write(&common.out)?;
    record_run(common, &cfg, json!({}))?;
    println!(
        "attack judgement: source models {:.2}%, query-initialized model {:.2}%, gap {:.2} points",
        result.source_mean, result.init_mean, result.gap
    );
    Ok(())
}

fn show_report(path: &Path) -> Result<()> {
    let file = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    print!("{}", RunReport::read(file)?.summary());
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SFUDA_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("SFUDA_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData { common } => gen_data(&common),
        Command::TrainSource { common, data } => train_source(&common, &data),
        Command::ServeOracle { common, data, models, host, port } => {
            serve_oracle(&common, &data, models.as_deref(), &host, port)
        }
        Command::RunPipeline { common, data, oracle, ablation } => {
            run(&common, &data, &oracle, Strategy::Sfuda, ablation)
        }
        Command::RunBaseline { common, data, oracle, strategy, ablation } => {
            run(&common, &data, &oracle, strategy, ablation)
        }
        Command::Attack { common, data } => attack(&common, &data),
        Command::Report { path } => show_report(&path),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
