//! The `oavl` command line: dataset synthesis, caption emission, training,
//! evaluation, saliency and checkpoint inspection.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::{build_caption_bag, TemplateKind, Vocabulary};
use crate::evaluation::{
    export_report, grad_cam, localization_score, retrieval_eval, zero_shot_eval, EvalError, EvalReport,
};
use crate::score::{Feature, OaScoreRecord, Site};
use crate::synth::{
    generate_dataset, ground_truth_region, read_manifest, Dataset, FeatureSite, Split, SplitRatios, SynthConfig,
    SynthError,
};
use crate::training::{fit_with_progress, inspect_checkpoint, Checkpoint, TrainConfig, TrainError};

/// Exit code for invalid arguments, configs or data.
pub const EXIT_VALIDATION: i32 = 1;
/// Exit code for unreadable inputs or unwritable outputs.
pub const EXIT_IO: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl CliError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub fn exit_code(&self) -> i32 {
        let io = match self {
            CliError::Io { .. } => true,
            CliError::Synth(e) => e.is_io(),
            CliError::Train(e) => e.is_io(),
            CliError::Eval(e) => matches!(e, EvalError::Io { .. } | EvalError::Synth(SynthError::Io { .. })),
            CliError::Validation(_) => false,
        };
        if io {
            EXIT_IO
        } else {
            EXIT_VALIDATION
        }
    }
}

/// Evaluation settings shared by the `eval` and `saliency` subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub split: Split,
    pub k: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { split: Split::Test, k: 5, seed: 0 }
    }
}

/// Input and output locations; none has a default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// The `--config` document. A document holding only training keys is also
/// accepted as the `train` section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub synth: SynthConfig,
    pub ratios: SplitRatios,
    pub n: Option<usize>,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub paths: PathConfig,
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        match serde_json::from_str::<CliConfig>(text) {
            Ok(c) => Ok(c),
            Err(e) => match serde_json::from_str::<TrainConfig>(text) {
                Ok(train) => Ok(CliConfig { train, ..CliConfig::default() }),
                Err(t) => Err(CliError::Validation(format!("config: {e}; as a training config: {t}"))),
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)
    }

    /// JSON with sorted keys.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string_pretty(&value).expect("value serializes")
    }
}

#[derive(Debug, Parser)]
#[command(name = "oavl", version, about = "Synthetic knee radiographs, score captions and a contrastive dual encoder")]
pub struct Cli {
    /// JSON config; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; 1 gives bit-reproducible outputs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset: manifest.jsonl and images/*.pgm.
    Synth(SynthArgs),
    /// Write caption bags as JSONL lines {id, kind, text}.
    Captions(CaptionArgs),
    /// Train a dual encoder on a manifest's train split.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Grad-CAM overlay of one image for one prompt.
    Saliency(SaliencyArgs),
    /// Print a checkpoint's tensor names, shapes and checksums.
    Inspect(InspectArgs),
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Zero-shot KL grading: report.json and confusion.csv.
    ZeroShot(EvalArgs),
    /// Image-to-caption retrieval scored by BLEU-4.
    Retrieval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub max_shift: Option<usize>,
    /// Train, validation and test fractions, e.g. `0.81,0.09,0.10`.
    #[arg(long)]
    pub ratios: Option<String>,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    /// Record JSON (object or array) or a dataset manifest.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Omit findings graded zero.
    #[arg(long)]
    pub omit_zero_grades: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training report JSON path.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr_image: Option<f64>,
    #[arg(long)]
    pub lr_text: Option<f64>,
    #[arg(long)]
    pub lr_projection: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Record id of the image.
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub prompt: String,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}; expected train, val or test")),
    }
}

fn parse_ratios(s: &str) -> Result<SplitRatios, CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Validation(format!("--ratios {s:?}: {e}")))?;
    match parts[..] {
        [train, val, test] => Ok(SplitRatios { train, val, test }),
        _ => Err(CliError::Validation(format!("--ratios {s:?}: expected three comma-separated fractions"))),
    }
}

fn required(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| config.clone()).ok_or_else(|| CliError::Validation(format!("missing --{name}")))
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e)),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    create_parent(path)?;
    let value = serde_json::to_value(value).expect("report serializes");
    let mut text = serde_json::to_string_pretty(&value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn run_synth(args: SynthArgs, cfg: CliConfig) -> Result<(), CliError> {
    let mut synth = cfg.synth;
    if let Some(v) = args.seed {
        synth.seed = v;
    }
    if let Some(v) = args.height {
        synth.height = v;
    }
    if let Some(v) = args.width {
        synth.width = v;
    }
    if let Some(v) = args.noise_sigma {
        synth.noise_sigma = v;
    }
    if let Some(v) = args.max_shift {
        synth.max_shift = v;
    }
    let ratios = match args.ratios {
        Some(s) => parse_ratios(&s)?,
        None => cfg.ratios,
    };
    let n = args.n.or(cfg.n).ok_or_else(|| CliError::Validation("missing --n".into()))?;
    let out_dir = required(args.out_dir, &cfg.paths.out_dir, "out-dir")?;
    generate_dataset(n, &synth, &ratios, &out_dir)?;
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<OaScoreRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if let Ok(record) = serde_json::from_str::<OaScoreRecord>(&text) {
        return Ok(vec![record]);
    }
    if let Ok(records) = serde_json::from_str::<Vec<OaScoreRecord>>(&text) {
        return Ok(records);
    }
    Ok(read_manifest(path)?.entries.into_iter().map(|e| e.record).collect())
}

#[derive(Serialize)]
struct CaptionLine<'a> {
    id: &'a str,
    kind: &'static str,
    text: &'a str,
}

fn run_captions(args: CaptionArgs, cfg: CliConfig) -> Result<(), CliError> {
    let out = required(args.out, &cfg.paths.out, "out")?;
    let records = read_records(&args.input)?;
    create_parent(&out)?;
    let file = fs::File::create(&out).map_err(|e| CliError::io(&out, e))?;
    let mut w = BufWriter::new(file);
    for rec in &records {
        let bag = build_caption_bag(rec, !args.omit_zero_grades);
        for kind in TemplateKind::ALL {
            let line = CaptionLine { id: &rec.id, kind: kind.name(), text: &bag.get(kind).text };
            let json = serde_json::to_string(&line).expect("caption line serializes");
            writeln!(w, "{json}").map_err(|e| CliError::io(&out, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(&out, e))
}

fn run_train(args: TrainArgs, cfg: CliConfig) -> Result<(), CliError> {
    let mut train = cfg.train;
    if let Some(v) = args.epochs {
        train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = args.seed {
        train.seed = v;
    }
    if let Some(v) = args.lambda {
        train.lambda = v;
    }
    if let Some(v) = args.lr_image {
        train.lr_image = v;
    }
    if let Some(v) = args.lr_text {
        train.lr_text = v;
    }
    if let Some(v) = args.lr_projection {
        train.lr_projection = v;
    }
    train.validate()?;
    let manifest = required(args.manifest, &cfg.paths.manifest, "manifest")?;
    let out = required(args.out, &cfg.paths.out, "out")?;
    let report_path = args.report.or(cfg.paths.report);
    let data = Dataset::open(&manifest)?;
    let outcome = fit_with_progress(&data, &train, |e| {
        eprintln!(
            "epoch {} infonce {:.4} negative {:.4} val accuracy {:.3}",
            e.epoch, e.mean_info_nce, e.mean_negative, e.val_accuracy
        )
    })?;
    create_parent(&out)?;
    outcome.checkpoint.save(&out)?;
    if let Some(path) = report_path {
        write_json(&path, &outcome.report)?;
    }
    Ok(())
}

fn load_inputs(
    checkpoint: Option<PathBuf>,
    manifest: Option<PathBuf>,
    cfg: &CliConfig,
) -> Result<(Checkpoint, Dataset), CliError> {
    let checkpoint = Checkpoint::load(&required(checkpoint, &cfg.paths.checkpoint, "checkpoint")?)?;
    let data = Dataset::open(&required(manifest, &cfg.paths.manifest, "manifest")?)?;
    Ok((checkpoint, data))
}

fn run_eval(command: EvalCommand, cfg: CliConfig) -> Result<(), CliError> {
    let (retrieval, args) = match command {
        EvalCommand::ZeroShot(a) => (false, a),
        EvalCommand::Retrieval(a) => (true, a),
    };
    let out = required(args.out, &cfg.paths.out, "out")?;
    let split = args.split.unwrap_or(cfg.eval.split);
    let (ckpt, data) = load_inputs(args.checkpoint, args.manifest, &cfg)?;
    let indices = data.indices(split);
    let mut report = EvalReport { zero_shot: zero_shot_eval(&ckpt.model, &data, &indices)?, ..Default::default() };
    if retrieval {
        let k = args.k.unwrap_or(cfg.eval.k);
        if indices.is_empty() {
            return Err(CliError::Validation(format!("{} split is empty", split.name())));
        }
        report.retrieval = Some(retrieval_eval(&ckpt.model, &data, &indices, k.min(indices.len()), cfg.eval.seed)?);
    }
    export_report(&report, &out)?;
    Ok(())
}

fn run_saliency(args: SaliencyArgs, cfg: CliConfig) -> Result<(), CliError> {
    let out = required(args.out, &cfg.paths.out, "out")?;
    let (ckpt, data) = load_inputs(args.checkpoint, args.manifest, &cfg)?;
    let index = (0..data.len())
        .find(|&i| data.record(i).id == args.id)
        .ok_or_else(|| CliError::Validation(format!("no image with id {:?}", args.id)))?;
    let image = &data.images[index];
    let map = grad_cam(&ckpt.model, image, &args.id, &args.prompt, &Vocabulary::grammar())?;
    let synth = SynthConfig { height: image.height, width: image.width, ..cfg.synth };
    let mut scores = serde_json::Map::new();
    for site in Site::BONES {
        let fs = FeatureSite { feature: Feature::Osteophytes, site };
        if let Ok(region) = ground_truth_region(data.record(index), fs, &synth) {
            scores.insert(site.key().to_string(), localization_score(&map, &region.mask)?.into());
        }
    }
    let report = EvalReport { saliency: vec![(map, image.clone())], ..Default::default() };
    export_report(&report, &out)?;
    write_json(&out.join("localization.json"), &scores)
}

fn run_inspect(args: InspectArgs) -> Result<(), CliError> {
    let bytes = fs::read(&args.checkpoint).map_err(|e| CliError::io(&args.checkpoint, e))?;
    let tensors = inspect_checkpoint(&bytes)?;
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    for t in tensors {
        let dims: Vec<String> = t.dims.iter().map(|d| d.to_string()).collect();
        writeln!(w, "{}\t[{}]\tdtype {}\tcrc32 {:08x}", t.name, dims.join(", "), t.dtype, t.crc32)
            .map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    match cli.command {
        Command::Synth(a) => run_synth(a, cfg),
        Command::Captions(a) => run_captions(a, cfg),
        Command::Train(a) => run_train(a, cfg),
        Command::Eval(c) => run_eval(c, cfg),
        Command::Saliency(a) => run_saliency(a, cfg),
        Command::Inspect(a) => run_inspect(a),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli.threads.unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_VALIDATION;
        }
    };
    match pool.install(|| dispatch(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
