use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vaprobe_core::detector::{
    build_labeled_sets_curated, parse_grid, read_detector, split_train_val, sweep_beta,
    train_detector, write_detector, write_sweep_csv, Architecture, SweepConfig,
};
use vaprobe_core::eval::{
    accuracy_report, chair_scores, emit_report, intervention_report, CaptionEvalInput, QaResult,
    Report, ReportFormat,
};
use vaprobe_core::fsutil;
use vaprobe_core::pipeline::{
    generate_for_scene, intervention_for, qa_model_answers, qa_override, run_pipeline, Dataset,
    PipelineConfig, CONFIG_FILE, MODEL_FILE,
};
use vaprobe_core::scoring::{
    compute_sensitivity_map, read_sensitivity_map, select_va_neurons, top_k_per_layer,
    write_sensitivity_map, SensitivityOptions,
};
use vaprobe_core::synth::{InterventionMode, QaRecord, SynthModel};
use vaprobe_core::trace::read_traces;

#[derive(Parser)]
#[command(name = "vaprobe", version, about = "Find visual-absence neurons, train a detector on them and refine model outputs")]
struct Cli {
    /// Pipeline configuration (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log more (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic data generation and model answers.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Score every neuron and write a sensitivity map.
    Score(ScoreArgs),
    /// Train one detector per β and keep the best.
    Sweep(SweepArgs),
    /// Train a detector at a fixed β.
    Train(TrainArgs),
    /// Apply a detector to answers or generation.
    #[command(subcommand)]
    Refine(RefineCmd),
    /// Compute evaluation reports.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Run every stage end to end on synthetic data.
    Pipeline(PipelineArgs),
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Generate contrastive question pairs and their labeled trace.
    Gen(SynthGenArgs),
    /// Answer questions with the synthetic model, optionally intervened.
    Answer(SynthAnswerArgs),
}

#[derive(Args)]
struct SynthGenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of contrastive pairs.
    #[arg(long, default_value_t = 300)]
    pairs: usize,
    /// Dataset salt; different salts give disjoint splits.
    #[arg(long, default_value = "train")]
    salt: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    None,
    Zero,
    Double,
}

#[derive(Args)]
struct SynthAnswerArgs {
    /// Dataset directory written by `synth gen`.
    #[arg(long)]
    data: PathBuf,
    /// Sensitivity map selecting the neurons to intervene on.
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, value_enum, default_value_t = Mode::None)]
    mode: Mode,
    /// Results as JSON lines `{record_id, gold, predicted}`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// A trace directory or a directory of trace directories.
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Histogram bins; overrides the configuration.
    #[arg(long)]
    bins: Option<usize>,
    /// Also write the per-layer top-k heatmap CSV here.
    #[arg(long)]
    heatmap: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    top_k: usize,
    #[arg(long, default_value_t = 0.4)]
    clip: f64,
    #[arg(long)]
    no_clip: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    traces: PathBuf,
    /// `start:stop:step` or a comma-separated list.
    #[arg(long)]
    grid: Option<String>,
    /// Directory receiving `sweep.csv` and `detector.bin`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    beta: f64,
    #[arg(long)]
    out: PathBuf,
    /// Logistic regression instead of the hidden-layer network.
    #[arg(long)]
    linear: bool,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Subcommand)]
enum RefineCmd {
    /// Override yes/no answers with the detector.
    Qa(RefineQaArgs),
    /// Rollback-refined generation for one scene.
    Gen(RefineGenArgs),
}

#[derive(Args)]
struct RefineQaArgs {
    #[arg(long)]
    detector: PathBuf,
    /// QA records (JSON lines); scenes and model come from the same directory
    /// unless `--data` is given.
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RefineGenArgs {
    #[arg(long)]
    detector: PathBuf,
    #[arg(long)]
    scene: String,
    /// Dataset directory holding the scene.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Markdown,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
            Format::Markdown => ReportFormat::Markdown,
        }
    }
}

#[derive(Args)]
struct ReportOut {
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Defaults to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Acc_yes / Acc_no / Acc from QA results.
    Qa {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value = "all")]
        split: String,
        #[command(flatten)]
        report: ReportOut,
    },
    /// CHAIR ratios from a caption evaluation file.
    Chair {
        #[arg(long)]
        input: PathBuf,
        /// JSON object mapping synonyms to canonical names.
        #[arg(long)]
        synonyms: Option<PathBuf>,
        #[command(flatten)]
        report: ReportOut,
    },
    /// Baseline vs zeroed vs doubled accuracy table.
    Intervene {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        zero: PathBuf,
        #[arg(long)]
        double: PathBuf,
        #[command(flatten)]
        report: ReportOut,
    },
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    out: PathBuf,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg.resolved())
}

fn emit(report: &Report, out: &ReportOut) -> Result<()> {
    match &out.out {
        Some(p) => emit_report(report, p, out.format.into())?,
        None => std::io::stdout().write_all(report.render(out.format.into())?.as_bytes())?,
    }
    Ok(())
}

fn write_lines<T: Serialize>(items: &[T], out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fsutil::write_jsonl(p, items)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            for it in items {
                serde_json::to_writer(&mut stdout, it)?;
                stdout.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

fn sensitivity_options(cfg: &PipelineConfig, bins: Option<usize>, traces: &Path) -> SensitivityOptions {
    SensitivityOptions {
        k_bins: bins.unwrap_or(cfg.k_bins),
        range_policy: cfg.range_policy,
        curation: cfg.curation,
        provenance: traces.display().to_string(),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth(SynthCmd::Gen(a)) => {
            let model = SynthModel::new(cfg.model.clone())?;
            let ds = Dataset::generate(&cfg.model, a.pairs, &a.salt)?;
            fsutil::write_dir_atomic(&a.out, |dir| {
                fsutil::write_json(&dir.join(CONFIG_FILE), &cfg)?;
                ds.write(dir, &model)
            })?;
            log::info!("wrote {} pairs to {}", a.pairs, a.out.display());
        }
        Command::Synth(SynthCmd::Answer(a)) => {
            let ds = Dataset::read(&a.data)?;
            let model = SynthModel::new(ds.model.clone())?;
            let iv = match a.mode {
                Mode::None => None,
                Mode::Zero | Mode::Double => {
                    let Some(map) = &a.map else {
                        bail!("--map is required with --mode zero|double");
                    };
                    let mode = if matches!(a.mode, Mode::Zero) {
                        InterventionMode::Zero
                    } else {
                        InterventionMode::Double
                    };
                    Some(intervention_for(&read_sensitivity_map(map)?, a.beta, mode)?)
                }
            };
            let results = qa_model_answers(&model, &ds.records(), &ds.scenes(), iv.as_ref())?;
            fsutil::write_jsonl(&a.out, &results)?;
        }
        Command::Score(a) => {
            let traces = read_traces(&a.traces)?;
            let map = compute_sensitivity_map(&traces, &sensitivity_options(&cfg, a.bins, &a.traces))?;
            write_sensitivity_map(&map, &a.out)?;
            if let Some(h) = &a.heatmap {
                let clip = (!a.no_clip).then_some(a.clip);
                top_k_per_layer(&map, a.top_k.min(map.dims().d_ffn), clip)?.write_csv(h)?;
            }
        }
        Command::Sweep(a) => {
            let map = read_sensitivity_map(&a.map)?;
            let traces = read_traces(&a.traces)?;
            let grid = match &a.grid {
                Some(g) => parse_grid(g)?,
                None => cfg.sweep.grid.clone(),
            };
            let sweep_cfg = SweepConfig {
                grid,
                curation: cfg.curation,
                ..cfg.sweep.clone()
            };
            let result = sweep_beta(&map, &traces, &sweep_cfg, cfg.sweep.train.seed)?;
            fsutil::write_dir_atomic(&a.out, |dir| {
                fsutil::write_json(&dir.join(CONFIG_FILE), &cfg)?;
                write_sweep_csv(&result.rows, &dir.join("sweep.csv"))?;
                write_detector(&result.best_detector, &dir.join("detector.bin"))
            })?;
            println!("best beta {:.2}", result.best_beta);
        }
        Command::Train(a) => {
            let map = read_sensitivity_map(&a.map)?;
            let traces = read_traces(&a.traces)?;
            let neurons = select_va_neurons(&map, a.beta)?;
            let set = build_labeled_sets_curated(&traces, &neurons, cfg.curation)?;
            let mut tc = cfg.sweep.train.clone();
            if a.linear {
                tc.architecture = Architecture::Linear;
            } else if let Some(h) = a.hidden {
                tc.architecture = Architecture::Mlp { hidden: h };
            }
            tc.epochs = a.epochs.unwrap_or(tc.epochs);
            tc.learning_rate = a.lr.unwrap_or(tc.learning_rate);
            let (train, val) = split_train_val(&set, cfg.sweep.split_ratio, tc.seed)?;
            let (det, report) = train_detector(&train, a.beta, &tc)?;
            let q = det.evaluate(&val)?;
            write_detector(&det, &a.out)?;
            println!("| Model | Precision | Recall | Accuracy |\n|---|---|---|---|");
            println!("{}", q.table_row(&format!("beta={:.2}", a.beta)));
            log::info!("final training loss {:.6}", report.final_loss);
        }
        Command::Refine(RefineCmd::Qa(a)) => {
            let detector = read_detector(&a.detector)?;
            let data = match &a.data {
                Some(d) => d.clone(),
                None => a
                    .records
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_default(),
            };
            let ds = Dataset::read(&data)?;
            let model = SynthModel::new(ds.model.clone())?;
            let records: Vec<QaRecord> = fsutil::read_jsonl(&a.records)?;
            let out = qa_override(&model, &records, &ds.scenes(), &detector, &cfg.filter)?;
            write_lines(&out, a.out.as_deref())?;
        }
        Command::Refine(RefineCmd::Gen(a)) => {
            let detector = read_detector(&a.detector)?;
            let ds = Dataset::read(&a.data)?;
            let model = SynthModel::new(ds.model.clone())?;
            let scenes = ds.scenes();
            let Some(scene) = scenes.get(&a.scene) else {
                bail!("scene {:?} not found in {}", a.scene, a.data.join(MODEL_FILE).display());
            };
            let mut limits = cfg.limits.clone();
            limits.max_tokens = a.max_tokens.unwrap_or(limits.max_tokens);
            let rec = generate_for_scene(&model, scene, &detector, &cfg.filter, &limits)?;
            write_lines(&[rec], a.out.as_deref())?;
        }
        Command::Eval(EvalCmd::Qa {
            results,
            split,
            report,
        }) => {
            let rows: Vec<QaResult> = fsutil::read_jsonl(&results)?;
            let r = accuracy_report(&rows)?;
            emit(&Report::Accuracy { rows: vec![(split, r)] }, &report)?;
        }
        Command::Eval(EvalCmd::Chair {
            input,
            synonyms,
            report,
        }) => {
            let input: CaptionEvalInput = fsutil::read_json(&input)?;
            let syn: BTreeMap<String, String> = match synonyms {
                Some(p) => fsutil::read_json(&p)?,
                None => BTreeMap::new(),
            };
            emit(&Report::Chair(chair_scores(&input, &syn)?), &report)?;
        }
        Command::Eval(EvalCmd::Intervene {
            baseline,
            zero,
            double,
            report,
        }) => {
            let load = |p: &Path| -> Result<Vec<QaResult>> { Ok(fsutil::read_jsonl(p)?) };
            let table = intervention_report(&load(&baseline)?, &load(&zero)?, &load(&double)?)?;
            emit(&Report::Intervention(table), &report)?;
        }
        Command::Pipeline(a) => {
            let s = run_pipeline(&cfg, &a.out)?;
            println!(
                "best beta {:.2}; acc_no {} -> {}; hallucination {} -> {}",
                s.best_beta,
                fmt_pct(s.baseline.acc_no),
                fmt_pct(s.refined.acc_no),
                fmt_rate(s.baseline_hallucination_rate),
                fmt_rate(s.refined_hallucination_rate),
            );
        }
    }
    Ok(())
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |v| format!("{v:.3}"))
}

fn fmt_rate(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |v| format!("{v:.4}"))
}

/// 2 for filesystem failures, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<vaprobe_core::Error>() {
            return if e.is_io() { 2 } else { 1 };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = std::env::var("VAPROBE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("VAPROBE_THREADS ignored: {e}");
        }
    }
    match run(cli).context("vaprobe") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
