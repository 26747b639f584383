mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use camtrap_core::data_model::{balance_test_domains, filter_categories, split_train_test};
use camtrap_core::imaging::save_png;
use camtrap_core::inference::{predict_split, write_predictions};
use camtrap_core::metrics::evaluate;
use camtrap_core::synthgen::generate_dataset;
use camtrap_core::trainer::{fit, load_sequence};
use camtrap_core::viz::render_sequence_viz;
use camtrap_core::{DatasetManifest, Error, ExpertModel, Split};
use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "camtrap", version, about = "Domain-expert camera-trap recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config merged over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and build the train/test manifest.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a manifest's training split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Train the full expert only.
        #[arg(long)]
        no_domain_experts: bool,
        /// Drop the flow-consistency term.
        #[arg(long)]
        no_flow_consistency: bool,
    },
    /// Predict the test split and write the accuracy report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Predict every frame instead of the first of each sequence.
        #[arg(long)]
        per_frame: bool,
    },
    /// Render CAM overlays and flow images for selected sequences.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sequence ids; defaults to the first test sequence of every class.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
    },
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, error: error.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => 2,
            Error::Mismatch(_) | Error::MissingPredictions(_) => 3,
            _ => 4,
        };
        Self { code, error: e.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self { code: 4, error }
    }
}

type CmdResult = Result<(), Failure>;

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    RunConfig::resolve(common.config.as_deref(), &common.overrides, common.seed).map_err(Failure::config)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::from(anyhow!("creating {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::from(anyhow!("writing {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    text.push('\n');
    write_text(path, &text)
}

/// Loads the manifest named on the command line or in the config; the data
/// root is the manifest's directory.
fn load_manifest(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<(DatasetManifest, PathBuf), Failure> {
    let path = flag
        .or_else(|| cfg.manifest.clone())
        .ok_or_else(|| Failure::config(anyhow!("no manifest given (use --manifest or set `manifest`)")))?;
    if !path.is_file() {
        return Err(Failure::config(anyhow!("manifest {} does not exist", path.display())));
    }
    let manifest = DatasetManifest::load(&path)?;
    manifest.validate()?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, root))
}

fn load_checkpoint(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<ExpertModel, Failure> {
    let path = flag
        .or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| Failure::config(anyhow!("no checkpoint given (use --checkpoint or set `checkpoint`)")))?;
    if !path.is_file() {
        return Err(Failure::config(anyhow!("checkpoint {} does not exist", path.display())));
    }
    Ok(ExpertModel::load(&path, DType::F32, &Device::Cpu)?)
}

fn cmd_gen(common: Common) -> CmdResult {
    let cfg = resolve(&common)?;
    cfg.synth.validate()?;
    create_dir(&common.out)?;
    let seed = cfg.synth.seed;
    let manifest = generate_dataset(&cfg.synth, &common.out)?;
    let manifest = split_train_test(manifest, cfg.dataset.train_fraction, seed)?;
    let manifest = filter_categories(manifest)?;
    let (manifest, report) = balance_test_domains(manifest, seed)?;
    manifest.validate()?;
    manifest.save(common.out.join("manifest.json"))?;
    write_json(&common.out.join("gen_report.json"), &report)?;
    println!(
        "{} classes, {} train / {} test sequences -> {}",
        manifest.num_classes(),
        manifest.samples_in(Split::Train).count(),
        manifest.samples_in(Split::Test).count(),
        common.out.join("manifest.json").display()
    );
    Ok(())
}

fn cmd_train(common: Common, manifest: Option<PathBuf>, no_de: bool, no_fc: bool) -> CmdResult {
    let mut cfg = resolve(&common)?;
    if no_de {
        cfg.train.domain_experts = false;
    }
    if no_fc {
        cfg.train.flow_consistency = false;
    }
    let (manifest, root) = load_manifest(manifest, &cfg)?;
    cfg.model.num_classes = manifest.num_classes();
    cfg.model.validate()?;
    cfg.train.validate()?;
    create_dir(&common.out)?;
    write_json(&common.out.join("config.json"), &cfg)?;
    let out = fit(&manifest, &root, &cfg.model, &cfg.train, &common.out)?;
    let last = out.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs, final L_full {:.4}; checkpoint {}",
        out.epochs.len(),
        last.l_full,
        out.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(common: Common, manifest: Option<PathBuf>, checkpoint: Option<PathBuf>, per_frame: bool) -> CmdResult {
    let cfg = resolve(&common)?;
    let (manifest, root) = load_manifest(manifest, &cfg)?;
    let model = load_checkpoint(checkpoint, &cfg)?;
    let per_frame = per_frame || cfg.eval.per_frame;
    let records = predict_split(&model, &manifest, &root, Split::Test, per_frame, cfg.dataset.gray_tolerance)?;
    let report = evaluate(&records, &manifest)?;
    create_dir(&common.out)?;
    write_predictions(&records, common.out.join("predictions.jsonl"))?;
    write_text(&common.out.join("report.json"), &report.to_json()?)?;
    let table = report.to_table();
    write_text(&common.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_viz(common: Common, manifest: Option<PathBuf>, checkpoint: Option<PathBuf>, ids: Vec<String>) -> CmdResult {
    let cfg = resolve(&common)?;
    let (manifest, root) = load_manifest(manifest, &cfg)?;
    let model = load_checkpoint(checkpoint, &cfg)?;
    if model.num_classes() != manifest.num_classes() {
        return Err(Error::Mismatch(format!(
            "checkpoint has {} classes but the manifest has {}",
            model.num_classes(),
            manifest.num_classes()
        ))
        .into());
    }
    let mut ids = if ids.is_empty() { cfg.viz.sequence_ids.clone() } else { ids };
    if ids.is_empty() {
        for c in 0..manifest.num_classes() {
            if let Some(s) = manifest.samples_in(Split::Test).find(|s| s.class_label == c) {
                ids.push(s.id.clone());
            }
        }
    }
    create_dir(&common.out)?;
    let mut unknown = Vec::new();
    for id in &ids {
        let Some(sample) = manifest.sample(id) else {
            unknown.push(id.clone());
            continue;
        };
        let (frames, flows) = load_sequence(&root, sample)?;
        let panels = render_sequence_viz(&model, &frames, &flows, sample.class_label)?;
        for (k, img) in panels.overlays.iter().enumerate() {
            save_png(img, common.out.join(format!("{id}_cam{}.png", k + 1)))?;
        }
        save_png(&panels.past_flow, common.out.join(format!("{id}_flow_past.png")))?;
        save_png(&panels.future_flow, common.out.join(format!("{id}_flow_future.png")))?;
    }
    if !unknown.is_empty() {
        log::warn!("skipped unknown sequence ids: {}", unknown.join(", "));
        eprintln!("skipped unknown sequence ids: {}", unknown.join(", "));
    }
    println!("rendered {} sequences into {}", ids.len() - unknown.len(), common.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen { common } => cmd_gen(common),
        Command::Train {
            common,
            manifest,
            no_domain_experts,
            no_flow_consistency,
        } => cmd_train(common, manifest, no_domain_experts, no_flow_consistency),
        Command::Eval {
            common,
            manifest,
            checkpoint,
            per_frame,
        } => cmd_eval(common, manifest, checkpoint, per_frame),
        Command::Viz {
            common,
            manifest,
            checkpoint,
            ids,
        } => cmd_viz(common, manifest, checkpoint, ids),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
