//! `distancenet` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use distancenet::checks::{model_checks, op_checks, CheckOutcome};
use distancenet::config::RunConfig;
use distancenet::data::{
    ingest_sequences, load_rgb, load_synthetic, normalize_image, parse_window_index, save_synthetic, synth_generate, window_index_text,
    Dataset, DatasetSplit, SequenceSample, SampleSource, SplitPreset, SynthConfig,
};
use distancenet::engine::train::{CHECKPOINT_FILE, CLASS_WEIGHTS_FILE, CONFIG_FILE, EPOCH_LOG_FILE, SUMMARY_FILE, WINDOWS_FILE};
use distancenet::engine::{error_trace, evaluate, load_model, trace_csv, trace_svg, train, WindowStore};
use distancenet::engine::metrics::parse_windows_csv;
use distancenet::io::{write_atomic, write_manifest};
use distancenet::model::{load_checkpoint, HeadKind, ModelConfig};
use distancenet::Error;

/// Environment variable holding the default KITTI odometry root.
const KITTI_ROOT_ENV: &str = "DISTANCENET_KITTI_ROOT";

#[derive(Parser)]
#[command(name = "distancenet", version, about = "Traveled-distance estimation from image sequences")]
struct Cli {
    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of textured sequences with known speeds.
    Synth(SynthArgs),
    /// Cut KITTI sequences into windows and write per-split index files.
    Ingest(IngestArgs),
    /// Train from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Print the predicted distance of every window of a frame directory.
    Predict(PredictArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Render per-frame error traces from a window report.
    Plot(PlotArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// WIDTHxHEIGHT.
    #[arg(long, default_value = "128x64", value_parser = parse_resolution)]
    resolution: (usize, usize),
    /// Meters per frame.
    #[arg(long, default_value_t = 0.0)]
    speed_min: f64,
    #[arg(long, default_value_t = 3.1 / 9.0)]
    speed_max: f64,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    /// Upper end of the distance codec; speeds must keep windows inside it.
    #[arg(long, default_value_t = 3.1)]
    d_max: f64,
    /// Id of the first sample (use disjoint ranges for train and eval sets).
    #[arg(long, default_value_t = 0)]
    first_id: usize,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long, env = KITTI_ROOT_ENV)]
    kitti_root: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::PaperBig)]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    window: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 15.5)]
    d_max: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    PaperBig,
    PaperSmall,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from a checkpoint written under the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Default KITTI root when the configuration leaves it unset.
    #[arg(long, env = KITTI_ROOT_ENV)]
    kitti_root: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Synthetic dataset directory, or a window index written by `ingest`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = KITTI_ROOT_ENV)]
    kitti_root: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of consecutive frames (png or ppm, sorted by name).
    #[arg(long)]
    frames: PathBuf,
    /// Frames between the starts of consecutive windows.
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Random elements checked per trainable parameter tensor.
    #[arg(long, default_value_t = 3)]
    per_tensor: usize,
    /// Windows in the model check batch.
    #[arg(long, default_value_t = 2)]
    windows: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    /// 128x64 inputs, quarter channels, 64 cells.
    Desk,
}

#[derive(Args)]
struct PlotArgs {
    /// Window report (`metrics_windows.csv`).
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    let w = w.parse().map_err(|_| format!("bad width {w:?}"))?;
    let h = h.parse().map_err(|_| format!("bad height {h:?}"))?;
    Ok((w, h))
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Contract(_) | Error::Domain(_) => 1,
            Error::Numeric { .. } => 3,
            _ => 2,
        };
        Failure { code, msg: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).target(env_logger::Target::Stderr).init();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        count: a.count,
        first_id: a.first_id,
        frames: a.frames,
        width: a.resolution.0,
        height: a.resolution.1,
        speed_min: a.speed_min,
        speed_max: a.speed_max,
        d_max: a.d_max,
        seed: a.seed,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    let data = synth_generate(&cfg)?;
    save_synthetic(&a.out, &data)?;
    let mut files: Vec<PathBuf> = vec![a.out.join(distancenet::data::synth::MANIFEST_FILE)];
    for item in data.items() {
        let sub = a.out.join(format!("{:06}", item.source.start));
        files.extend((0..item.frame_count()).map(|f| sub.join(format!("{f:02}.ppm"))));
    }
    write_manifest(&a.out, "synth_manifest.txt", &files)?;
    println!("wrote {} samples to {}", data.len(), a.out.display());
    Ok(())
}

fn cmd_ingest(a: IngestArgs) -> CmdResult {
    let preset = match a.split {
        SplitArg::PaperBig => SplitPreset::PaperBig,
        SplitArg::PaperSmall => SplitPreset::PaperSmall,
    };
    let split = DatasetSplit::preset(preset);
    let mut files = Vec::new();
    for (name, seqs) in [("train", &split.train), ("test", &split.test)] {
        let summary = ingest_sequences(&a.kitti_root, seqs, a.window, a.stride, a.d_max)?;
        let index = a.out.join(format!("{name}_windows.csv"));
        write_atomic(&index, window_index_text(&summary.windows).as_bytes())?;
        let mut hist = String::from("meters,windows\n");
        for (m, n) in &summary.histogram {
            hist.push_str(&format!("{m},{n}\n"));
        }
        let hist_path = a.out.join(format!("{name}_histogram.csv"));
        write_atomic(&hist_path, hist.as_bytes())?;
        files.extend([index, hist_path]);
        println!("{name}: sequences {}", seqs.join(" "));
        for (seq, n) in &summary.per_sequence {
            println!("  {seq}: {n} windows");
        }
        let shown: Vec<String> = summary.histogram.iter().map(|(m, n)| format!("{m}m:{n}")).collect();
        println!("  histogram {}", shown.join(" "));
        if summary.over_range > 0 {
            println!("  {} windows exceed {} m", summary.over_range, a.d_max);
        }
    }
    write_manifest(&a.out, "ingest_manifest.txt", &files)?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = RunConfig::load(&a.config, &a.overrides)?;
    let resume = a.resume.as_deref().map(load_checkpoint::<f32>).transpose()?;
    let (train_set, eval_set) = cfg.datasets(a.kitti_root.as_deref())?;
    let outcome = train::<f32>(&cfg, train_set, eval_set, resume.as_ref())?;
    let out = &cfg.output;
    let mut files: Vec<PathBuf> = [CONFIG_FILE, CLASS_WEIGHTS_FILE, EPOCH_LOG_FILE, CHECKPOINT_FILE].iter().map(|f| out.join(f)).collect();
    if let Some(m) = &outcome.metrics {
        files.extend([out.join(SUMMARY_FILE), out.join(WINDOWS_FILE)]);
        println!("rmse={:.4} acc={:.4} acc_dev={:.4} n={}", m.rmse, m.acc, m.acc_dev, m.n_samples);
    }
    write_manifest(out, "train_manifest.txt", &files)?;
    println!("checkpoint {}", outcome.checkpoint.display());
    Ok(())
}

fn load_eval_data(path: &Path, kitti_root: Option<&Path>, window: usize) -> Result<Dataset, Failure> {
    if path.is_dir() {
        return Ok(load_synthetic(path, false)?);
    }
    let text = std::fs::read_to_string(path).map_err(Error::from)?;
    let root = kitti_root.ok_or_else(|| Failure {
        code: 1,
        msg: format!("{} is a window index; pass --kitti-root or set {KITTI_ROOT_ENV}", path.display()),
    })?;
    Ok(Dataset::from_windows(parse_window_index(&text, root, window)?))
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let ck = load_checkpoint::<f32>(&a.ckpt)?;
    let (cfg, model) = load_model(&ck)?;
    let data = load_eval_data(&a.data, a.kitti_root.as_deref(), cfg.model.frames)?;
    let mut store = WindowStore::new(data, cfg.data.pixel_means, (cfg.model.width, cfg.model.height));
    if cfg.data.cache_prefix {
        store.precompute(&model, false)?;
    }
    let report = evaluate(&model, &store, cfg.train.eval_batch, cfg.train.acc_dev_mode)?;
    let out = &a.out;
    let summary = out.join(SUMMARY_FILE);
    let windows = out.join(WINDOWS_FILE);
    write_atomic(&summary, report.summary_csv().as_bytes())?;
    write_atomic(&windows, report.windows_csv().as_bytes())?;
    let (traces_csv, traces_svg) = write_traces(out, &report.records)?;
    write_manifest(out, "eval_manifest.txt", &[summary, windows, traces_csv, traces_svg])?;
    println!("rmse={:.4} acc={:.4} acc_dev={:.4} n={}", report.rmse, report.acc, report.acc_dev, report.n_samples);
    Ok(())
}

/// Per-sequence error traces as `error_traces.csv` and `error_traces.svg`.
fn write_traces(out: &Path, records: &[distancenet::engine::WindowRecord]) -> Result<(PathBuf, PathBuf), Failure> {
    let series = trace_series(records)?;
    let mut csv = String::from("sequence,");
    let mut first = true;
    for (name, trace) in &series {
        let body = trace_csv(trace);
        for (i, line) in body.lines().enumerate() {
            if i == 0 {
                if first {
                    csv.push_str(line);
                    csv.push('\n');
                    first = false;
                }
                continue;
            }
            csv.push_str(&format!("{name},{line}\n"));
        }
    }
    if first {
        csv.push_str("frame,error\n");
    }
    let csv_path = out.join("error_traces.csv");
    let svg_path = out.join("error_traces.svg");
    write_atomic(&csv_path, csv.as_bytes())?;
    write_atomic(&svg_path, trace_svg(&series).as_bytes())?;
    Ok((csv_path, svg_path))
}

fn trace_series(records: &[distancenet::engine::WindowRecord]) -> Result<Vec<(String, Vec<(usize, f64)>)>, Failure> {
    let mut names: Vec<&str> = records.iter().map(|r| r.sequence.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    names
        .into_iter()
        .map(|n| {
            let own: Vec<_> = records.iter().filter(|r| r.sequence == n).cloned().collect();
            Ok((n.to_string(), error_trace(&own)?))
        })
        .collect()
}

fn cmd_predict(a: PredictArgs) -> CmdResult {
    if a.stride == 0 {
        return Err(Failure { code: 1, msg: "--stride must be positive".into() });
    }
    let ck = load_checkpoint::<f32>(&a.ckpt)?;
    let (cfg, model) = load_model(&ck)?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&a.frames)
        .map_err(Error::from)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "ppm")))
        .collect();
    paths.sort();
    let n = cfg.model.frames;
    if paths.len() < n {
        return Err(Failure { code: 2, msg: format!("{} holds {} frames; a window needs {n}", a.frames.display(), paths.len()) });
    }
    let res = (cfg.model.width, cfg.model.height);
    let frames = paths.iter().map(|p| load_rgb(p).and_then(|im| normalize_image::<f32>(&im, cfg.data.pixel_means, res))).collect::<Result<Vec<_>, _>>()?;
    for start in (0..=frames.len() - n).step_by(a.stride) {
        let sample = SequenceSample::new(frames[start..start + n].to_vec(), 0.0, SampleSource { sequence: String::new(), start })?;
        let row = model.predict(&sample)?;
        let (meters, class) = model.decode_output(&row)?;
        let class = match class {
            Some(c) => c,
            None => cfg.model.codec.class_of(meters)?,
        };
        match cfg.model.head {
            HeadKind::Ordinal => println!("distance_m={meters:.1} class={class}"),
            HeadKind::Regression => println!("distance_m={meters:.3} class={class}"),
        }
    }
    Ok(())
}

fn gradcheck_config(scale: Scale) -> ModelConfig {
    match scale {
        Scale::Desk => ModelConfig::desk(),
    }
}

fn report(c: &CheckOutcome) {
    println!(
        "{} {} seed={} max_rel_err={:.3e} tol={:.0e} checked={} skipped={}",
        if c.passed() { "PASS" } else { "FAIL" },
        c.name,
        c.seed,
        c.max_relative_error,
        c.tolerance,
        c.checked,
        c.skipped
    );
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let cfg = gradcheck_config(a.scale);
    let mut failed = 0usize;
    let mut total = 0usize;
    for seed in 0..a.seeds {
        for c in op_checks(seed)? {
            total += 1;
            if !c.passed() {
                failed += 1;
                report(&c);
            }
        }
    }
    println!("ops: {} checks over {} seeds, {failed} failed", total, a.seeds);
    let mut model_failed = 0usize;
    for seed in 0..a.seeds {
        for c in model_checks(&cfg, seed, a.windows, a.per_tensor)? {
            if !c.passed() {
                model_failed += 1;
            }
            report(&c);
        }
    }
    if failed + model_failed > 0 {
        return Err(Failure { code: 3, msg: format!("{} gradient checks failed", failed + model_failed) });
    }
    println!("all gradient checks passed");
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> CmdResult {
    let text = std::fs::read_to_string(&a.report).map_err(Error::from)?;
    let records = parse_windows_csv(&text)?;
    let series = trace_series(&records)?;
    write_atomic(&a.out, trace_svg(&series).as_bytes())?;
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write_manifest(dir, "plot_manifest.txt", std::slice::from_ref(&a.out))?;
    println!("wrote {} ({} sequences)", a.out.display(), series.len());
    Ok(())
}
