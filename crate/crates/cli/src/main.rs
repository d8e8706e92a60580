use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use boxplace::data::{generate_synthetic, load_dataset, save_dataset, SynthConfig};
use boxplace::eval::{
    bucket_report, evaluate_parallel, read_rows_csv, write_buckets_csv, write_overlay, write_rows_csv, BucketBy,
    EvalRow, ReportTable, TransformerPredictor, VlmPredictor,
};
use boxplace::layout::{BBox, Layout};
use boxplace::model::{ModelConfig, PlacementModel};
use boxplace::train::{save_log_csv, train, TrainConfig};
use boxplace::vlm::{
    canonical_bbox_json, query_many, serialize_prompt, write_transcripts, ChatRequest, EndpointConfig, HttpEndpoint,
    MockEndpoint, PredictorEndpoint, QueryError, RetryPolicy, TranscriptEntry,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_PREDICTOR: u8 = 3;

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

fn usage(m: impl ToString) -> Failure {
    Failure { code: EXIT_USAGE, message: m.to_string() }
}

fn data(m: impl ToString) -> Failure {
    Failure { code: EXIT_DATA, message: m.to_string() }
}

fn predictor(m: impl ToString) -> Failure {
    Failure { code: EXIT_PREDICTOR, message: m.to_string() }
}

type Result<T> = std::result::Result<T, Failure>;

/// Text-box placement for layered layouts.
#[derive(Parser, Debug)]
#[command(name = "boxplace", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train the placement Transformer.
    Train(TrainArgs),
    /// Evaluate a predictor on a dataset.
    Eval(EvalArgs),
    /// Print the prompt document of one layout.
    Prompt(PromptArgs),
    /// Send every layout's prompt to the external predictor.
    Query(QueryArgs),
    /// Rebuild the tables and bucket reports from metrics.csv.
    Report(ReportArgs),
    /// Draw prediction/ground-truth overlays from metrics.csv.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON file with optional "model", "train" and "synth" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Output dataset file (JSON Lines).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    /// Generate the text-container benchmark.
    #[arg(long)]
    container: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset; checkpoint selection uses its loss.
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    multi_image: bool,
    /// Use the 6-layer, 256-wide configuration.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PredictorKind {
    Transformer,
    External,
    Mock,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "transformer")]
    predictor: PredictorKind,
    /// Checkpoint for the transformer predictor.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Reply returned by the mock predictor.
    #[arg(long)]
    mock_reply: Option<String>,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long, default_value_t = 5)]
    area_bins: usize,
}

#[derive(Args, Debug)]
struct PromptArgs {
    #[arg(long)]
    data: PathBuf,
    /// Layout id; defaults to the first layout.
    #[arg(long)]
    id: Option<String>,
    /// Also write the attached image as PPM here.
    #[arg(long)]
    image: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// metrics.csv written by `eval`.
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    area_bins: usize,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Longest side of each overlay in pixels.
    #[arg(long, default_value_t = 256)]
    size: u32,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
    synth: Option<SynthConfig>,
}

fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load(path: &Path) -> Result<Vec<Layout>> {
    let report = load_dataset(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    if report.skipped_no_text > 0 {
        eprintln!("{}: skipped {} layouts without text", path.display(), report.skipped_no_text);
    }
    Ok(report.layouts)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn run_gen(a: GenArgs) -> Result<()> {
    let cfg = read_config(a.common.config.as_deref())?;
    let mut synth = cfg.synth.unwrap_or_else(|| {
        if a.container {
            SynthConfig::container_benchmark(100, 0)
        } else {
            SynthConfig::default()
        }
    });
    synth.container_mode |= a.container;
    if let Some(n) = a.count {
        synth.count = n;
    }
    if let Some(s) = a.common.seed {
        synth.seed = s;
    }
    let layouts = generate_synthetic(&synth).map_err(usage)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        out_dir(dir)?;
    }
    save_dataset(&a.out, &layouts).map_err(data)?;
    println!("wrote {} layouts to {}", layouts.len(), a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = read_config(a.common.config.as_deref())?;
    let mut model_cfg =
        cfg.model.unwrap_or_else(|| if a.full_scale { ModelConfig::full() } else { ModelConfig::desk() });
    if a.multi_image {
        model_cfg.feature.use_element_rasters = true;
    }
    let mut train_cfg = cfg.train.unwrap_or_default();
    if let Some(s) = a.common.seed {
        model_cfg.seed = s;
        train_cfg.seed = s;
    }
    if let Some(v) = a.epochs {
        train_cfg.max_epochs = v;
    }
    if a.max_steps.is_some() {
        train_cfg.max_steps = a.max_steps;
    }
    if let Some(v) = a.lr {
        train_cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        train_cfg.batch_size = v;
    }
    if let Some(v) = a.threads {
        train_cfg.threads = v;
    }
    let train_set = load(&a.data)?;
    let val_set = load(&a.val)?;
    out_dir(&a.out)?;
    let outcome = train(&train_set, &val_set, &model_cfg, &train_cfg).map_err(|e| match e {
        boxplace::train::TrainError::Config(_) | boxplace::train::TrainError::Model(_) => usage(e),
        other => data(other),
    })?;
    let ckpt = a.out.join("model.ckpt");
    outcome.model.save(&ckpt).map_err(data)?;
    save_log_csv(&outcome.log, &a.out.join("train_log.csv")).map_err(data)?;
    println!(
        "best epoch {} (val loss {:.6}), {} steps; checkpoint {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        outcome.steps,
        ckpt.display()
    );
    Ok(())
}

fn endpoint_from_env() -> Result<(HttpEndpoint, RetryPolicy)> {
    let cfg = EndpointConfig::from_env().map_err(predictor)?;
    let policy = RetryPolicy { retries: cfg.retries, ..RetryPolicy::default() };
    Ok((HttpEndpoint::new(cfg), policy))
}

fn mock_endpoint(reply: Option<String>) -> MockEndpoint {
    MockEndpoint::reply(reply.unwrap_or_else(|| canonical_bbox_json(&BBox::new(0.25, 0.25, 0.5, 0.5))))
}

fn write_reports(rows: &[EvalRow], out: &Path, area_bins: usize) -> Result<ReportTable> {
    write_rows_csv(rows, create(&out.join("metrics.csv"))?).map_err(data)?;
    let table = ReportTable::from_rows(rows);
    table.write_csv(create(&out.join("table.csv"))?).map_err(data)?;
    if !rows.is_empty() {
        let area = bucket_report(rows, BucketBy::GtArea { bins: area_bins }).map_err(usage)?;
        write_buckets_csv(&area, create(&out.join("buckets_area.csv"))?).map_err(data)?;
        let texts = bucket_report(rows, BucketBy::NTexts).map_err(usage)?;
        write_buckets_csv(&texts, create(&out.join("buckets_ntext.csv"))?).map_err(data)?;
    }
    Ok(table)
}

fn print_table(t: &ReportTable) {
    println!("{:<14} {:>6} {:>7} {:>8} {:>10} {:>10}", "split", "count", "scored", "invalid", "mean_iou", "mean_bde");
    for s in t.splits() {
        let f = |v: Option<f64>| v.map_or("empty".to_string(), |x| format!("{x:.4}"));
        println!(
            "{:<14} {:>6} {:>7} {:>8} {:>10} {:>10}",
            s.split,
            s.count,
            s.scored,
            s.invalid,
            f(s.mean_iou),
            f(s.mean_bde)
        );
    }
}

fn save_transcripts(entries: &[TranscriptEntry], out: &Path) -> Result<()> {
    let mut w = create(&out.join("transcripts.jsonl"))?;
    write_transcripts(entries, &mut w).and_then(|()| w.flush()).map_err(data)
}

fn fail_on_auth(entries: &[TranscriptEntry]) -> Result<()> {
    let unauthorized = QueryError::Unauthorized.to_string();
    if entries.iter().any(|e| e.error.as_deref() == Some(unauthorized.as_str())) {
        return Err(predictor("predictor rejected the credentials (unauthorized)"));
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let _ = read_config(a.common.config.as_deref())?;
    let layouts = load(&a.data)?;
    out_dir(&a.out)?;
    let workers = a.concurrency.max(1);
    let (rows, transcripts) = match a.predictor {
        PredictorKind::Transformer => {
            let path = a.model.as_deref().ok_or_else(|| usage("--model is required for the transformer predictor"))?;
            let model = PlacementModel::load(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
            let label = if model.config().feature.use_element_rasters { "transformer-multi" } else { "transformer" };
            let p = TransformerPredictor { model: &model, label: label.into() };
            (evaluate_parallel(&p, &layouts, workers), None)
        }
        PredictorKind::External | PredictorKind::Mock => {
            let (endpoint, policy): (Box<dyn PredictorEndpoint>, RetryPolicy) = if a.predictor == PredictorKind::Mock {
                (Box::new(mock_endpoint(a.mock_reply)), RetryPolicy::immediate(0))
            } else {
                let (e, p) = endpoint_from_env()?;
                (Box::new(e), p)
            };
            let p = VlmPredictor::new(endpoint.as_ref(), policy);
            let rows = evaluate_parallel(&p, &layouts, workers);
            (rows, Some(p.transcripts()))
        }
    };
    if let Some(t) = &transcripts {
        save_transcripts(t, &a.out)?;
    }
    let table = write_reports(&rows, &a.out, a.area_bins)?;
    print_table(&table);
    if let Some(t) = &transcripts {
        fail_on_auth(t)?;
    }
    Ok(())
}

fn run_prompt(a: PromptArgs) -> Result<()> {
    let layouts = load(&a.data)?;
    let layout = match &a.id {
        Some(id) => layouts.iter().find(|l| &l.id == id).ok_or_else(|| data(format!("no layout with id {id:?}")))?,
        None => layouts.first().ok_or_else(|| data("dataset is empty"))?,
    };
    let doc = serialize_prompt(layout).map_err(data)?;
    println!("{}", doc.records_json());
    if let Some(path) = a.image {
        doc.image.write_ppm(&path).map_err(data)?;
    }
    Ok(())
}

fn run_query(a: QueryArgs) -> Result<()> {
    let layouts = load(&a.data)?;
    out_dir(&a.out)?;
    let (endpoint, policy) = endpoint_from_env()?;
    let requests = layouts
        .iter()
        .map(|l| serialize_prompt(l).map(|d| ChatRequest::from_prompt(&d)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(data)?;
    let results = query_many(&requests, &endpoint, &policy, a.concurrency);
    let entries: Vec<TranscriptEntry> =
        requests.iter().zip(&results).map(|(r, res)| TranscriptEntry::new(r, endpoint.name(), res)).collect();
    save_transcripts(&entries, &a.out)?;
    let failed = results.iter().filter(|r| r.is_err()).count();
    println!("{} queries, {} failed", results.len(), failed);
    fail_on_auth(&entries)?;
    if failed == results.len() && failed > 0 {
        return Err(predictor("every query failed"));
    }
    Ok(())
}

fn read_metrics(path: &Path) -> Result<Vec<EvalRow>> {
    let f = File::open(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    read_rows_csv(f).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn run_report(a: ReportArgs) -> Result<()> {
    let rows = read_metrics(&a.metrics)?;
    if rows.is_empty() {
        return Err(data("no data"));
    }
    out_dir(&a.out)?;
    let table = ReportTable::from_rows(&rows);
    table.write_csv(create(&a.out.join("table.csv"))?).map_err(data)?;
    let area = bucket_report(&rows, BucketBy::GtArea { bins: a.area_bins }).map_err(usage)?;
    write_buckets_csv(&area, create(&a.out.join("buckets_area.csv"))?).map_err(data)?;
    let texts = bucket_report(&rows, BucketBy::NTexts).map_err(usage)?;
    write_buckets_csv(&texts, create(&a.out.join("buckets_ntext.csv"))?).map_err(data)?;
    print_table(&table);
    Ok(())
}

fn run_render(a: RenderArgs) -> Result<()> {
    if a.size == 0 {
        return Err(usage("--size must be positive"));
    }
    let layouts = load(&a.data)?;
    let rows = read_metrics(&a.metrics)?;
    let dir = a.out.join("overlays");
    out_dir(&dir)?;
    let mut written = 0;
    for row in &rows {
        let (Some(pred), Some(layout)) = (row.pred, layouts.iter().find(|l| l.id == row.layout_id)) else {
            continue;
        };
        let (w, h) = (f64::from(layout.canvas_width), f64::from(layout.canvas_height));
        let scale = f64::from(a.size) / w.max(h);
        let (pw, ph) = (((w * scale).round() as usize).max(1), ((h * scale).round() as usize).max(1));
        let name: String =
            row.layout_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
        write_overlay(layout, &pred, &row.gt, pw, ph, &dir.join(format!("{name}.ppm"))).map_err(data)?;
        written += 1;
    }
    println!("wrote {written} overlays to {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Prompt(a) => run_prompt(a),
        Command::Query(a) => run_query(a),
        Command::Report(a) => run_report(a),
        Command::Render(a) => run_render(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
