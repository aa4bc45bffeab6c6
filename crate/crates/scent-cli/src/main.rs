//! Command-line front end for the 802.15.4 capture toolkit.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use scent_core::codec::Dissected;
use scent_core::features::{extract_from_pcap, write_feature_csv, WindowConfig};
use scent_core::filter::{eval_filter, parse_filter};
use scent_core::ident::cv::combined_report;
use scent_core::ident::tree::argmax;
use scent_core::ident::{
    feature_importance, kfold_cv, load_and_clean, train_forest, train_tree, Dataset, ForestModel,
    ForestParams, KnnModel, ModelSpec, TreeModel, TreeParams,
};
use scent_core::pcap::PcapWriter;
use scent_core::pipeline::{
    default_scenario, generate_scenario, replay_pcap, RawStreamReader, Speed,
};
use scent_core::service::{control_call, serve_control_socket, TaskRegistry};

const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "scent",
    version,
    about = "802.15.4 capture and device analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the capture daemon: ingest a frame source, serve the control socket.
    Daemon(DaemonArgs),
    /// Extract per-device windowed features from a PCAP file into CSV.
    Extract(ExtractArgs),
    /// One-shot capture: read a source, apply a filter, write a PCAP file.
    Capture(CaptureArgs),
    /// Generate a synthetic PAN scenario and write it as PCAP.
    Synth(SynthArgs),
    /// Control a running daemon over its socket.
    Task(TaskArgs),
    /// Train and evaluate device classifiers on feature CSVs.
    Ident(IdentArgs),
}

#[derive(Args)]
struct DaemonArgs {
    /// Frame source: pcap:<path>, rawstream:<path|->, or synthetic
    #[arg(long)]
    source: String,
    /// Control socket path
    #[arg(long, default_value = "/tmp/scent.sock")]
    socket: PathBuf,
    /// Replay PCAP at original timing scaled by this factor (0 = as fast as possible)
    #[arg(long, default_value_t = 0.0)]
    speed: f64,
    /// Synthetic source duration in seconds
    #[arg(long, default_value_t = 300.0)]
    duration: f64,
    /// Synthetic source seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Keep serving after the source is exhausted
    #[arg(long)]
    linger: bool,
}

#[derive(Args)]
struct ExtractArgs {
    /// Input PCAP file
    #[arg(long = "in")]
    input: PathBuf,
    /// Window duration in seconds
    #[arg(long, default_value_t = 5.0)]
    window: f64,
    /// Comma-separated stat columns to keep ("all" keeps every column)
    #[arg(long, default_value = "all")]
    features: String,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CaptureArgs {
    /// Frame source: pcap:<path>, rawstream:<path|->, or synthetic
    #[arg(long)]
    source: String,
    /// Output PCAP path
    #[arg(long)]
    out: PathBuf,
    /// Display filter expression, e.g. "wpan.frame_type == 1 && !wpan.dst16 == 0xffff"
    #[arg(long)]
    filter: Option<String>,
    /// Write frames without FCS trailers
    #[arg(long)]
    no_fcs: bool,
    /// Synthetic source duration in seconds
    #[arg(long, default_value_t = 300.0)]
    duration: f64,
    /// Synthetic source seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    /// Scenario duration in seconds
    #[arg(long, default_value_t = 300.0)]
    duration: f64,
    /// RNG seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output PCAP path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TaskArgs {
    /// Control socket path
    #[arg(long, default_value = "/tmp/scent.sock")]
    socket: PathBuf,
    #[command(subcommand)]
    action: TaskAction,
}

#[derive(Subcommand)]
enum TaskAction {
    /// Start a feature-extraction task
    StartFeatures {
        /// Output CSV path
        #[arg(long)]
        sink: PathBuf,
        /// Window duration in seconds
        #[arg(long, default_value_t = 5.0)]
        window: f64,
        /// Display filter expression
        #[arg(long)]
        filter: Option<String>,
        /// Comma-separated stat columns to keep
        #[arg(long)]
        features: Option<String>,
        /// Queue capacity in frames
        #[arg(long)]
        capacity: Option<usize>,
        /// Overflow policy: drop_newest or stop_task
        #[arg(long)]
        policy: Option<String>,
    },
    /// Start a PCAP capture task
    StartPcap {
        /// Output PCAP path
        #[arg(long)]
        path: PathBuf,
        /// Display filter expression
        #[arg(long)]
        filter: Option<String>,
        /// Write frames without FCS trailers
        #[arg(long)]
        no_fcs: bool,
        /// Queue capacity in frames
        #[arg(long)]
        capacity: Option<usize>,
        /// Overflow policy: drop_newest or stop_task
        #[arg(long)]
        policy: Option<String>,
    },
    /// Stop a task and flush its sink
    Stop { task: String },
    /// Show one task's status, or all tasks
    Status { task: Option<String> },
    /// Remove a stopped task
    Remove { task: String },
}

#[derive(Args)]
struct IdentArgs {
    #[command(subcommand)]
    action: IdentAction,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Tree,
    Forest,
    Knn,
}

#[derive(Args)]
struct DataArgs {
    /// Feature CSV files
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// JSON file mapping device address to class label
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Subcommand)]
enum IdentAction {
    /// Train a model on labeled feature rows and save it as JSON
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = ModelKind::Forest)]
        model: ModelKind,
        /// Number of forest trees
        #[arg(long, default_value_t = 100)]
        trees: usize,
        /// Neighbour count for knn
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Model output path
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate a model and write an evaluation report
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = ModelKind::Forest)]
        model: ModelKind,
        #[arg(long, default_value_t = 100)]
        trees: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        /// Average predictions over N consecutive windows per device
        #[arg(long, default_value_t = 1)]
        combine: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report output path (JSON); omit to print to stdout only
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank features by forest Gini importance
    Importance {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 100)]
        trees: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep features with importance strictly above this value
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
        /// Ranking output path (JSON)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify feature rows with a saved model
    Predict {
        /// Feature CSV files
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Saved model path
        #[arg(long)]
        model: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Cmd::Daemon(args) => daemon(args),
        Cmd::Extract(args) => extract(args),
        Cmd::Capture(args) => capture(args),
        Cmd::Synth(args) => synth(args),
        Cmd::Task(args) => task(args),
        Cmd::Ident(args) => ident(args.action),
    }
}

/// Feed every frame from `spec` into `sink(frame, fcs_present)`.
fn run_source(
    spec: &str,
    speed: f64,
    duration: f64,
    seed: u64,
    mut sink: impl FnMut(scent_core::codec::RawFrame, bool),
) -> Result<u64> {
    if let Some(path) = spec.strip_prefix("pcap:") {
        let s = if speed > 0.0 {
            Speed::Real(speed)
        } else {
            Speed::Max
        };
        return Ok(replay_pcap(path, s, sink)?);
    }
    if let Some(path) = spec.strip_prefix("rawstream:") {
        let mut count = 0;
        let mut feed = |mut reader: RawStreamReader<Box<dyn std::io::Read>>| -> Result<()> {
            while let Some(frame) = reader.next_frame()? {
                sink(frame, true);
                count += 1;
            }
            Ok(())
        };
        let inner: Box<dyn std::io::Read> = if path == "-" {
            Box::new(std::io::stdin().lock())
        } else {
            Box::new(std::fs::File::open(path)?)
        };
        feed(RawStreamReader::new(inner))?;
        return Ok(count);
    }
    if spec == "synthetic" {
        let frames = generate_scenario(&default_scenario(duration, seed))?;
        let count = frames.len() as u64;
        for frame in frames {
            sink(frame, true);
        }
        return Ok(count);
    }
    bail!("unknown source `{spec}`; expected pcap:<path>, rawstream:<path|->, or synthetic");
}

fn daemon(args: DaemonArgs) -> Result<()> {
    let registry = Arc::new(TaskRegistry::new());
    let shutdown = Arc::new(AtomicBool::new(false));

    let server = {
        let registry = Arc::clone(&registry);
        let shutdown = Arc::clone(&shutdown);
        let socket = args.socket.clone();
        std::thread::spawn(move || serve_control_socket(&socket, registry, shutdown))
    };
    eprintln!("daemon: control socket at {}", args.socket.display());

    registry.set_source_running(true);
    let fed = run_source(
        &args.source,
        args.speed,
        args.duration,
        args.seed,
        |frame, fcs| {
            registry.dispatch_frame(&Arc::new(Dissected::dissect(frame, fcs)));
        },
    )?;
    registry.set_source_running(false);
    eprintln!("daemon: source exhausted after {fed} frames");

    if args.linger {
        eprintln!("daemon: lingering; ^C to exit");
        loop {
            std::thread::sleep(std::time::Duration::from_secs(3600));
        }
    }
    registry.stop_all();
    shutdown.store(true, Ordering::Release);
    server.join().unwrap()?;
    Ok(())
}

fn window_config(window: f64, features: &str) -> Result<WindowConfig> {
    let cfg = WindowConfig::new(window)?;
    if features == "all" {
        return Ok(cfg);
    }
    let names: Vec<&str> = features.split(',').map(str::trim).collect();
    Ok(cfg.select(&names)?)
}

fn extract(args: ExtractArgs) -> Result<()> {
    let cfg = window_config(args.window, &args.features)?;
    let rows = extract_from_pcap(&args.input, cfg)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let n = write_feature_csv(&rows, &args.out)?;
    println!("{n} rows -> {}", args.out.display());
    Ok(())
}

fn capture(args: CaptureArgs) -> Result<()> {
    let filter = args.filter.as_deref().map(parse_filter).transpose()?;
    let mut writer = PcapWriter::create(&args.out, !args.no_fcs)?;
    let mut write_err = None;
    run_source(&args.source, 0.0, args.duration, args.seed, |frame, fcs| {
        if write_err.is_some() {
            return;
        }
        let d = Dissected::dissect(frame, fcs);
        if filter.as_ref().map(|f| eval_filter(f, &d)).unwrap_or(true) {
            if let Err(e) = writer.write_frame(&d.raw) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let n = writer.finish()?;
    println!("{n} frames -> {}", args.out.display());
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let frames = generate_scenario(&default_scenario(args.duration, args.seed))?;
    let mut writer = PcapWriter::create(&args.out, true)?;
    for frame in &frames {
        writer.write_frame(frame)?;
    }
    let n = writer.finish()?;
    println!("{n} frames -> {}", args.out.display());
    Ok(())
}

fn task(args: TaskArgs) -> Result<()> {
    let params = match args.action {
        TaskAction::StartFeatures {
            sink,
            window,
            filter,
            features,
            capacity,
            policy,
        } => serde_json::json!({
            "cmd": "start_features",
            "params": {
                "window_s": window,
                "sink": sink,
                "filter": filter,
                "features": features.map(|f| f.split(',').map(str::trim).map(String::from).collect::<Vec<_>>()),
                "capacity": capacity,
                "policy": policy,
            }
        }),
        TaskAction::StartPcap {
            path,
            filter,
            no_fcs,
            capacity,
            policy,
        } => serde_json::json!({
            "cmd": "start_pcap",
            "params": {
                "path": path,
                "filter": filter,
                "with_fcs": !no_fcs,
                "capacity": capacity,
                "policy": policy,
            }
        }),
        TaskAction::Stop { task } => {
            serde_json::json!({ "cmd": "stop", "params": { "task": task } })
        }
        TaskAction::Status { task } => {
            serde_json::json!({ "cmd": "status", "params": { "task": task } })
        }
        TaskAction::Remove { task } => {
            serde_json::json!({ "cmd": "remove", "params": { "task": task } })
        }
    };
    let mut request = params;
    request["id"] = serde_json::json!(format!("cli-{}", std::process::id()));
    let response = control_call(&args.socket, &request)
        .with_context(|| format!("connecting to {}", args.socket.display()))?;
    println!("{}", serde_json::to_string_pretty(&response)?);
    if response.get("ok").and_then(|v| v.as_bool()) != Some(true) {
        std::process::exit(1);
    }
    Ok(())
}

fn load_dataset(data: &DataArgs) -> Result<Dataset> {
    let text = std::fs::read_to_string(&data.labels)
        .with_context(|| format!("reading {}", data.labels.display()))?;
    let labels: HashMap<String, String> = serde_json::from_str(&text)
        .context("label file must be a JSON object of device -> class")?;
    Ok(load_and_clean(&data.data, &labels)?)
}

fn model_spec(kind: ModelKind, trees: usize, k: usize, seed: u64) -> ModelSpec {
    match kind {
        ModelKind::Tree => ModelSpec::Tree(TreeParams {
            seed,
            ..Default::default()
        }),
        ModelKind::Forest => ModelSpec::Forest(ForestParams {
            n_trees: trees,
            seed,
            ..Default::default()
        }),
        ModelKind::Knn => ModelSpec::Knn { k },
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "model")]
enum SavedModel {
    Tree {
        classes: Vec<String>,
        tree: TreeModel,
    },
    Forest {
        classes: Vec<String>,
        forest: ForestModel,
    },
    Knn {
        classes: Vec<String>,
        knn: KnnModel,
    },
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ModelFile {
    format_version: u32,
    #[serde(flatten)]
    saved: SavedModel,
}

fn ident(action: IdentAction) -> Result<()> {
    match action {
        IdentAction::Train {
            data,
            model,
            trees,
            k,
            seed,
            out,
        } => {
            let ds = load_dataset(&data)?;
            let saved = match model {
                ModelKind::Tree => SavedModel::Tree {
                    classes: ds.classes.clone(),
                    tree: train_tree(
                        &ds,
                        &TreeParams {
                            seed,
                            ..Default::default()
                        },
                    )?,
                },
                ModelKind::Forest => SavedModel::Forest {
                    classes: ds.classes.clone(),
                    forest: train_forest(
                        &ds,
                        &ForestParams {
                            n_trees: trees,
                            seed,
                            ..Default::default()
                        },
                    )?,
                },
                ModelKind::Knn => SavedModel::Knn {
                    classes: ds.classes.clone(),
                    knn: KnnModel::fit(&ds, k)?,
                },
            };
            let file = ModelFile {
                format_version: MODEL_FORMAT_VERSION,
                saved,
            };
            std::fs::write(&out, serde_json::to_string_pretty(&file)?)?;
            println!(
                "trained on {} rows, {} classes -> {}",
                ds.rows.len(),
                ds.n_classes(),
                out.display()
            );
            Ok(())
        }
        IdentAction::Eval {
            data,
            model,
            trees,
            k,
            folds,
            combine,
            seed,
            out,
        } => {
            let ds = load_dataset(&data)?;
            let spec = model_spec(model, trees, k, seed);
            let outcome = kfold_cv(&ds, &spec, folds, seed)?;
            let report = if combine > 1 {
                combined_report(&ds, &outcome.row_probs, combine)
            } else {
                outcome.report
            };
            if !outcome.small_classes.is_empty() {
                eprintln!(
                    "warning: classes smaller than the fold count: {}",
                    outcome.small_classes.join(", ")
                );
            }
            println!(
                "accuracy {:.4}  macro-f1 {:.4}  weighted-f1 {:.4}  ({} rows, {} classes, {} folds, combine {})",
                report.accuracy,
                report.macro_f1,
                report.weighted_f1,
                ds.rows.len(),
                ds.n_classes(),
                folds,
                combine
            );
            for c in &report.per_class {
                println!(
                    "  {:<16} p {:.4}  r {:.4}  f1 {:.4}  n {}",
                    c.class, c.precision, c.recall, c.f1, c.support
                );
            }
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                println!("report -> {}", path.display());
            }
            Ok(())
        }
        IdentAction::Importance {
            data,
            trees,
            seed,
            threshold,
            out,
        } => {
            let ds = load_dataset(&data)?;
            let forest = train_forest(
                &ds,
                &ForestParams {
                    n_trees: trees,
                    seed,
                    ..Default::default()
                },
            )?;
            let (ranked, selected) = feature_importance(&forest, threshold);
            for (name, score) in &ranked {
                println!("{score:.6}  {name}");
            }
            println!(
                "{} of {} features above {threshold}",
                selected.len(),
                ranked.len()
            );
            if let Some(path) = out {
                let doc = serde_json::json!({
                    "ranking": ranked.iter().map(|(n, s)| serde_json::json!({"feature": n, "importance": s})).collect::<Vec<_>>(),
                    "threshold": threshold,
                    "selected": selected.iter().map(|&i| ds.feature_names[i].clone()).collect::<Vec<_>>(),
                });
                std::fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
                println!("ranking -> {}", path.display());
            }
            Ok(())
        }
        IdentAction::Predict { data, model } => {
            let text = std::fs::read_to_string(&model)
                .with_context(|| format!("reading {}", model.display()))?;
            let file: ModelFile = serde_json::from_str(&text).context("unreadable model file")?;
            if file.format_version != MODEL_FORMAT_VERSION {
                bail!(
                    "model format version {} unsupported (expected {MODEL_FORMAT_VERSION})",
                    file.format_version
                );
            }
            // predictions are per row; labels in the CSVs are not needed
            let rows = load_unlabeled(&data)?;
            let (classes, predict): (Vec<String>, Box<dyn Fn(&[f64]) -> usize>) = match file.saved {
                SavedModel::Tree { classes, tree } => {
                    (classes, Box::new(move |x| tree.predict_class(x)))
                }
                SavedModel::Forest { classes, forest } => {
                    (classes, Box::new(move |x| forest.predict_class(x)))
                }
                SavedModel::Knn { classes, knn } => {
                    (classes, Box::new(move |x| knn.predict_class(x)))
                }
            };
            let mut per_device: HashMap<String, Vec<usize>> = HashMap::new();
            for (device, features) in &rows {
                let class = predict(features);
                per_device.entry(device.clone()).or_default().push(class);
            }
            let mut devices: Vec<_> = per_device.into_iter().collect();
            devices.sort_by(|a, b| a.0.cmp(&b.0));
            for (device, votes) in devices {
                let mut counts = vec![0.0f64; classes.len()];
                for v in &votes {
                    counts[*v] += 1.0;
                }
                let majority = argmax(&counts);
                println!(
                    "{device}: {} ({}/{} windows)",
                    classes[majority],
                    counts[majority] as usize,
                    votes.len()
                );
            }
            Ok(())
        }
    }
}

/// Load feature CSVs for prediction, applying the same imputation as the
/// training path: empty IAT becomes the window duration, other empty stats
/// become zero.
fn load_unlabeled(paths: &[PathBuf]) -> Result<Vec<(String, Vec<f64>)>> {
    use scent_core::features::{read_feature_csv, STAT_COLUMNS};
    let mut out = Vec::new();
    for path in paths {
        for row in read_feature_csv(path)? {
            let window_s = row.window_end_us.saturating_sub(row.window_start_us) as f64 / 1e6;
            let features = row
                .stats
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    v.unwrap_or(if STAT_COLUMNS[i].contains("iat") {
                        window_s
                    } else {
                        0.0
                    })
                })
                .collect();
            out.push((row.device.clone(), features));
        }
    }
    if out.is_empty() {
        bail!("no rows in input CSVs");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_source_is_rejected() {
        let err = run_source("serial:/dev/ttyUSB0", 0.0, 1.0, 1, |_, _| {}).unwrap_err();
        assert!(err.to_string().contains("unknown source"));
    }

    #[test]
    fn synthetic_source_feeds_frames() {
        let mut n = 0u64;
        let fed = run_source("synthetic", 0.0, 10.0, 1, |_, fcs| {
            assert!(fcs);
            n += 1;
        })
        .unwrap();
        assert_eq!(fed, n);
        assert!(n > 0);
    }
}
