//! `hyperada` command-line front end.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use hyperada::data::{self, DomainShift, SyntheticConfig};
use hyperada::eval::{self, Metrics};
use hyperada::train::{self, fit};
use hyperada::{gradcheck, AblationPreset, Checkpoint, Error, LabelSpace, Model};

use config::RunConfig;

const EXIT_GRADCHECK: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(
    name = "hyperada",
    version,
    about = "Hyperbolic prototype-transport domain adaptation for utterance embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a labelled source manifest and an unlabelled target manifest.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Check every analytic gradient against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a seeded synthetic source/target benchmark.
    Synth(SynthArgs),
    /// Per-epoch codebook utilization of a training run, as CSV.
    CodebookStats(CodebookStatsArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    /// Target labels for per-epoch reporting only.
    #[arg(long)]
    target_answers: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// One of: full, euclidean, euclidean-no-calibration, no-vq, token-only,
    /// concat-mlp, no-hel, euclidean-ot.
    #[arg(long)]
    ablation: Option<AblationPreset>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_opt: Option<f64>,
    #[arg(long)]
    lambda_ot: Option<f64>,
    #[arg(long)]
    lambda_vq: Option<f64>,
    #[arg(long)]
    curvature: Option<f64>,
    /// Write per-step transport statistics to transport_diag.csv.
    #[arg(long)]
    transport_diag: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Labels for unlabelled manifests; labelled manifests are scored against
    /// their own labels.
    #[arg(long)]
    answers: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write pooled tangent embeddings to embeddings.csv.
    #[arg(long)]
    embeddings: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[cfg(feature = "fault-injection")]
    #[arg(long, hide = true)]
    inject_hel_fault: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON synthetic-data configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_source: Option<usize>,
    #[arg(long)]
    n_target: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Rotation angle of the target shift, in radians.
    #[arg(long)]
    rotation: Option<f64>,
    /// Target vectors are scaled by 1 + this.
    #[arg(long)]
    radial_scale: Option<f64>,
    /// Extra target noise.
    #[arg(long)]
    shift_noise: Option<f64>,
    /// Disable the target shift entirely.
    #[arg(long)]
    no_shift: bool,
    /// Comma-separated class names; defaults to the five built-in classes.
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
}

#[derive(Args)]
struct CodebookStatsArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
        Command::CodebookStats(a) => cmd_codebook_stats(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::Numerical { .. } | Error::Domain(_)) => EXIT_NUMERICAL,
        Some(Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::InvalidInput(_)) => {
            EXIT_DATA
        }
        // Anything else is a failure to write outputs.
        None => EXIT_DATA,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn resolve_run_config(a: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr_new_layers = v;
    }
    if let Some(v) = a.lambda_opt {
        t.lambda_opt = v;
    }
    if let Some(v) = a.lambda_ot {
        t.lambda_ot = v;
    }
    if let Some(v) = a.lambda_vq {
        t.lambda_vq = v;
    }
    if let Some(v) = a.curvature {
        cfg.ball.curvature_c = v;
    }
    if let Some(p) = a.ablation {
        cfg.ablation = p.config();
    }
    if a.source.is_some() {
        cfg.source.clone_from(&a.source);
    }
    if a.target.is_some() {
        cfg.target.clone_from(&a.target);
    }
    if a.target_answers.is_some() {
        cfg.target_answers.clone_from(&a.target_answers);
    }
    cfg.transport_diagnostics |= a.transport_diag;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = resolve_run_config(&a)?;
    let source_path = cfg.source.clone().expect("validated");
    let source = data::load_dataset(&source_path, &cfg.labels)?;
    let Some(first) = source.first() else {
        return Err(Error::Data(format!(
            "{}: manifest lists no utterances",
            source_path.display()
        ))
        .into());
    };
    cfg.resolve_input_dim(first.frames.cols())?;
    let target = match (&cfg.target, cfg.train.adapts()) {
        (Some(p), true) => data::load_dataset(p, &cfg.labels)?,
        _ => Vec::new(),
    };
    let target_labels = match &cfg.target_answers {
        Some(p) if !target.is_empty() => {
            let answers = data::read_answers(p, &cfg.labels)?;
            Some(data::align_answers(&target, &answers)?)
        }
        _ => None,
    };
    create_dir(&a.out)?;
    write(&a.out.join("config.json"), cfg.to_json())?;
    info!(
        "training {} on {} source / {} target utterances for {} epochs",
        AblationPreset::ALL
            .into_iter()
            .find(|p| p.config() == cfg.ablation)
            .map_or_else(|| "custom ablation".to_string(), |p| p.to_string()),
        source.len(),
        target.len(),
        cfg.train.epochs
    );
    let model = Model::new(cfg.model, cfg.ablation, cfg.ball, cfg.train.seed)?;
    let result = fit(
        model,
        &source,
        &target,
        &cfg.train,
        target_labels.as_deref(),
    )?;
    for r in &result.reports {
        match r.target_accuracy {
            Some(acc) => info!(
                "epoch {:>3}  loss {:.4}  source acc {:.4}  target acc {:.4}",
                r.epoch, r.loss_total, r.source_accuracy, acc
            ),
            None => info!(
                "epoch {:>3}  loss {:.4}  source acc {:.4}",
                r.epoch, r.loss_total, r.source_accuracy
            ),
        }
    }
    write(
        &a.out.join("epochs.csv"),
        train::epochs_csv(&result.reports),
    )?;
    let checkpoint = Checkpoint {
        model: result.model,
        labels: cfg.labels.clone(),
        prototypes: result.prototypes,
    };
    checkpoint.save(&a.out.join("checkpoint.hyperada"))?;
    if cfg.transport_diagnostics {
        let mut csv = String::from(
            "step,batch,transport_cost,max_marginal_violation,mean_soft_label_entropy\n",
        );
        for (i, d) in result.diagnostics.iter().enumerate() {
            csv.push_str(&format!(
                "{i},{},{},{},{}\n",
                d.batch, d.transport_cost, d.max_marginal_violation, d.mean_soft_label_entropy
            ));
        }
        write(&a.out.join("transport_diag.csv"), csv)?;
    }
    info!("wrote {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    n: usize,
    accuracy: f64,
    macro_f1: f64,
    per_class_f1: Vec<(&'a str, f64)>,
    labels: &'a LabelSpace,
    confusion: &'a [Vec<u64>],
}

impl<'a> MetricsFile<'a> {
    fn new(m: &'a Metrics, labels: &'a LabelSpace, n: usize) -> Self {
        Self {
            n,
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
            per_class_f1: labels
                .names()
                .iter()
                .map(String::as_str)
                .zip(m.per_class_f1.iter().copied())
                .collect(),
            labels,
            confusion: &m.confusion.counts,
        }
    }
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let labels = &checkpoint.labels;
    let utterances = data::load_dataset(&a.manifest, labels)?;
    let truth = match &a.answers {
        Some(p) => Some(data::align_answers(
            &utterances,
            &data::read_answers(p, labels)?,
        )?),
        None => utterances
            .iter()
            .map(|u| u.label)
            .collect::<Option<Vec<_>>>(),
    };
    let preds = eval::predict_all(&checkpoint.model, &utterances)?;
    create_dir(&a.out)?;
    write(
        &a.out.join("predictions.csv"),
        eval::predictions_csv(&preds, labels),
    )?;
    if a.embeddings {
        write(&a.out.join("embeddings.csv"), eval::embeddings_csv(&preds))?;
    }
    match truth {
        Some(truth) => {
            let predicted: Vec<usize> = preds.iter().map(|p| p.prediction.class).collect();
            let m = eval::metrics(&truth, &predicted, labels.len())?;
            let file = MetricsFile::new(&m, labels, truth.len());
            let mut json = serde_json::to_string_pretty(&file).context("serializing metrics")?;
            json.push('\n');
            write(&a.out.join("metrics.json"), json)?;
            write(&a.out.join("confusion.csv"), m.confusion.to_csv(labels))?;
            println!(
                "accuracy {:.4}  macro-F1 {:.4}  (n = {})",
                m.accuracy,
                m.macro_f1,
                truth.len()
            );
        }
        None => info!("manifest is unlabelled and no answers were given; wrote predictions only"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<ExitCode> {
    #[cfg(feature = "fault-injection")]
    hyperada::autodiff::inject_hel_backward_fault(a.inject_hel_fault);
    let report = gradcheck::run(a.seed);
    print!("{}", report.table());
    if report.passed() {
        println!(
            "all gradient checks passed (tolerance {:e})",
            gradcheck::REL_TOL
        );
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed for: {}", report.failing().join(", "));
        Ok(ExitCode::from(EXIT_GRADCHECK))
    }
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<SyntheticConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.n_source {
        cfg.n_source = v;
    }
    if let Some(v) = a.n_target {
        cfg.n_target = v;
    }
    if let Some(v) = a.dim {
        cfg.dim = v;
    }
    if a.no_shift {
        cfg.shift = DomainShift::NONE;
    }
    if let Some(v) = a.rotation {
        cfg.shift.rotation_angle = v;
    }
    if let Some(v) = a.radial_scale {
        cfg.shift.radial_scale = v;
    }
    if let Some(v) = a.shift_noise {
        cfg.shift.noise_std = v;
    }
    let labels = match a.labels {
        Some(names) => LabelSpace::new(names)?,
        None => LabelSpace::default(),
    };
    cfg.num_classes = labels.len();
    create_dir(&a.out)?;
    let paths = data::generate_synthetic(&cfg, &labels, &a.out)?;
    let mut json = serde_json::to_string_pretty(&cfg).context("serializing synthetic config")?;
    json.push('\n');
    write(&a.out.join("synthetic.json"), json)?;
    println!("source manifest  {}", paths.source_manifest.display());
    println!("target manifest  {}", paths.target_manifest.display());
    println!("target answers   {}", paths.target_answers.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_codebook_stats(a: CodebookStatsArgs) -> anyhow::Result<ExitCode> {
    let path = a.run.join("epochs.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| anyhow!("{}: empty file", path.display()))?
        .split(',')
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Data(format!("{}: no `{name}` column", path.display())))
    };
    let (epoch, active, perplexity) = (
        col("epoch")?,
        col("codebook_active_fraction")?,
        col("codebook_perplexity")?,
    );
    let mut csv = String::from("epoch,active_fraction,perplexity\n");
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Error::Data(format!(
                "{}: line {} has {} cells",
                path.display(),
                i + 2,
                cells.len()
            ))
            .into());
        }
        if cells[active].is_empty() {
            bail!(Error::Data(format!(
                "{}: run has no codebook (no-vq ablation)",
                path.display()
            )));
        }
        csv.push_str(&format!(
            "{},{},{}\n",
            cells[epoch], cells[active], cells[perplexity]
        ));
    }
    match a.out {
        Some(p) => write(&p, csv)?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}
