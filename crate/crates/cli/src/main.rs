use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use neuroalign::dataset::{Dataset, Scan};
use neuroalign::evalkit::{ablate, ablation_csv, evaluate, sweep, sweep_csv, table_rows, Components};
use neuroalign::interpret::{
    biomarker_heatmap, integrated_gradients, one_per_stage, stage_report, stage_table, AttributionReport, HeatmapLayer,
};
use neuroalign::peft::PeftStrategy;
use neuroalign::synthcohort::{write_cohort, Biomarker, CohortConfig, CohortManifest, Diagnosis, Split};
use neuroalign::trainer::{load_checkpoint, resolve_checkpoint, train, ExperimentConfig, CHECKPOINT_DIR};
use neuroalign::Model;

/// Resolved settings of one invocation, written next to every output.
const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Parser, Debug)]
#[command(
    name = "neuroalign",
    version,
    about = "Prompt-tuned image-report alignment on synthetic 3D brain MRI"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic cohort (manifest, volumes, reports) into --out.
    GenData(GenDataArgs),
    /// Fine-tune a model; writes checkpoint, metrics log and config into --out.
    Train(TrainArgs),
    /// Zero-shot metrics of a checkpoint on one split.
    Eval(EvalArgs),
    /// Train one model per training-set size and evaluate each.
    Sweep(SweepArgs),
    /// Run the component ablation table.
    Ablate(AblateArgs),
    /// Integrated-gradients token attributions for one scan or one scan per class.
    Attribute(AttributeArgs),
    /// Biomarker-conditioned patch heatmap for one scan.
    Heatmap(HeatmapArgs),
    /// Print the resolved config, parameter counts and checkpoint summary.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PeftArg {
    Prompt,
    Lora,
    Adapter,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PromptModeArg {
    Deep,
    Shallow,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TempModeArg {
    Divide,
    Multiply,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LayerArg {
    Input,
    Final,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigFlags {
    /// JSON run config with `cohort` and `experiment` sections; flags override it.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration to start from.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Seed for cohort generation, initialization and batching.
    #[arg(long)]
    seed: Option<u64>,
    /// Parameter-efficient strategy for the vision backbone.
    #[arg(long, value_enum)]
    peft: Option<PeftArg>,
    /// Visual prompts at every layer (deep) or the input only (shallow).
    #[arg(long, value_enum)]
    prompt_mode: Option<PromptModeArg>,
    /// Whether logits are similarities divided or multiplied by the temperature.
    #[arg(long, value_enum)]
    temp_mode: Option<TempModeArg>,
    /// Weight of the MMSE regression loss.
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    /// Comma-separated diagnosis classes, e.g. NC,MCI,AD.
    #[arg(long, value_delimiter = ',', value_parser = parse_value::<Diagnosis>)]
    classes: Option<Vec<Diagnosis>>,
    /// Number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct DataFlags {
    /// Cohort directory written by gen-data; without it the cohort is rendered in memory.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    cfg: ConfigFlags,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigFlags,
    #[command(flatten)]
    data: DataFlags,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CkptFlags {
    /// Training output directory or checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    ckpt: CkptFlags,
    /// Split to evaluate.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Output directory for metrics.json; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigFlags,
    #[command(flatten)]
    data: DataFlags,
    /// Comma-separated training-set sizes.
    #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
    sizes: Vec<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigFlags,
    #[command(flatten)]
    data: DataFlags,
    /// Comma-separated table rows to run (a-e).
    #[arg(long, value_delimiter = ',', default_value = "a,b,c,d,e")]
    rows: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AttributeArgs {
    #[command(flatten)]
    ckpt: CkptFlags,
    /// Scan id; without it one test scan per class is attributed.
    #[arg(long)]
    scan: Option<String>,
    /// Riemann steps of the path integral.
    #[arg(long, default_value_t = 256)]
    steps: usize,
    /// Number of top tokens reported.
    #[arg(long, default_value_t = 3)]
    top: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[command(flatten)]
    ckpt: CkptFlags,
    /// Scan id.
    #[arg(long)]
    scan: String,
    /// Biomarker kept in the report; the other five are masked.
    #[arg(long, value_parser = parse_value::<Biomarker>)]
    keep: Biomarker,
    /// Patch states the gradient is taken against.
    #[arg(long, value_enum, default_value = "final")]
    layer: LayerArg,
    /// Also write the middle depth slice as PGM.
    #[arg(long)]
    pgm: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    cfg: ConfigFlags,
    /// Checkpoint to summarize instead of a config.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    cohort: CohortConfig,
    experiment: ExperimentConfig,
}

impl RunConfig {
    fn preset(p: Preset, seed: u64) -> Self {
        match p {
            Preset::Desk => Self {
                cohort: CohortConfig::desk(seed),
                experiment: ExperimentConfig::desk(seed),
            },
            Preset::Paper => Self {
                cohort: CohortConfig::paper(seed),
                experiment: ExperimentConfig::paper(seed),
            },
        }
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Config(String),
    Core(neuroalign::Error),
}

impl CliError {
    fn kind(&self) -> &str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "invalid_config",
            CliError::Core(e) => e.kind(),
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::Config(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) | CliError::Core(neuroalign::Error::InvalidConfig(_)) => 3,
            CliError::Core(_) => 1,
        }
    }
}

impl From<neuroalign::Error> for CliError {
    fn from(e: neuroalign::Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn parse_value<T: std::str::FromStr<Err = neuroalign::Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: neuroalign::Error| e.to_string())
}

fn resolve(flags: &ConfigFlags) -> Result<RunConfig> {
    let mut rc = match &flags.config {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            serde_json::from_slice::<RunConfig>(&bytes).map_err(|e| config_err(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::preset(flags.preset.unwrap_or(Preset::Desk), flags.seed.unwrap_or(1)),
    };
    if let Some(seed) = flags.seed {
        rc.cohort.seed = seed;
        rc.experiment.train.seed = seed;
    }
    let exp = &mut rc.experiment;
    if let Some(p) = flags.peft {
        exp.model.peft = match p {
            PeftArg::Prompt => PeftStrategy::Prompt,
            PeftArg::Lora => PeftStrategy::lora_default(),
            PeftArg::Adapter => PeftStrategy::adapter_default(),
        };
    }
    if let Some(m) = flags.prompt_mode {
        exp.model.vision.prompt_mode = match m {
            PromptModeArg::Deep => neuroalign::vision::PromptMode::Deep,
            PromptModeArg::Shallow => neuroalign::vision::PromptMode::Shallow,
        };
    }
    if let Some(t) = flags.temp_mode {
        exp.model.temp_mode = match t {
            TempModeArg::Divide => neuroalign::align::TempMode::Divide,
            TempModeArg::Multiply => neuroalign::align::TempMode::Multiply,
        };
    }
    if let Some(l) = flags.lambda {
        exp.train.lambda = l;
    }
    if let Some(e) = flags.epochs {
        exp.train.epochs = e;
    }
    if let Some(list) = &flags.classes {
        exp.train.classes = list.clone();
    }
    rc.cohort.validate().map_err(config_err)?;
    rc.experiment.validate().map_err(config_err)?;
    if rc.cohort.grid != rc.experiment.model.vision.grid {
        return Err(config_err(format!(
            "cohort grid {:?} does not match the vision grid {:?}",
            rc.cohort.grid, rc.experiment.model.vision.grid
        )));
    }
    Ok(rc)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(neuroalign::Error::from)?;
    write_bytes(path, &bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(neuroalign::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Splits {
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

fn load_split(rc: &RunConfig, data: Option<&Path>, split: Split) -> Result<Dataset> {
    let classes = &rc.experiment.train.classes;
    match data {
        Some(dir) => {
            let (manifest, base) = CohortManifest::load(dir)?;
            if manifest.config.grid != rc.experiment.model.vision.grid {
                return Err(config_err(format!(
                    "cohort in {} uses grid {:?}, the model expects {:?}",
                    dir.display(),
                    manifest.config.grid,
                    rc.experiment.model.vision.grid
                )));
            }
            Ok(Dataset::load(&manifest, &base, split, classes)?)
        }
        None => Ok(Dataset::generate(&rc.cohort, split, classes)?),
    }
}

fn load_splits(rc: &RunConfig, data: Option<&Path>) -> Result<Splits> {
    Ok(Splits {
        train: load_split(rc, data, Split::Train)?,
        val: load_split(rc, data, Split::Val)?,
        test: load_split(rc, data, Split::Test)?,
    })
}

/// Checkpoint plus the run config that produced it.
fn open_checkpoint(path: &Path) -> Result<(Model, RunConfig)> {
    let dir = resolve_checkpoint(path);
    let (model, manifest) = load_checkpoint(&dir)?;
    let candidates = [path.join(RESOLVED_CONFIG), dir.join("..").join(RESOLVED_CONFIG)];
    let rc = match candidates.iter().find(|p| p.exists()) {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| io_err(p, e))?;
            serde_json::from_slice(&bytes).map_err(config_err)?
        }
        None => {
            let experiment = manifest
                .experiment
                .ok_or_else(|| config_err("checkpoint has no run config; pass --data"))?;
            let mut cohort = CohortConfig::desk(experiment.train.seed);
            cohort.grid = experiment.model.vision.grid;
            RunConfig { cohort, experiment }
        }
    };
    Ok((model, rc))
}

fn find_scan(rc: &RunConfig, data: Option<&Path>, id: &str) -> Result<Scan> {
    for split in Split::ALL {
        if let Some(s) = load_split(rc, data, split)?.scans.into_iter().find(|s| s.scan_id == id) {
            return Ok(s);
        }
    }
    Err(CliError::Core(neuroalign::Error::InvalidInput(format!(
        "no scan with id `{id}`"
    ))))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let rc = resolve(&a.cfg)?;
    let manifest = write_cohort(&rc.cohort, &a.out)?;
    write_json(&a.out.join(RESOLVED_CONFIG), &rc)?;
    println!("wrote {} scans to {}", manifest.entries.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let rc = resolve(&a.cfg)?;
    let s = load_splits(&rc, a.data.data.as_deref())?;
    write_json(&a.out.join(RESOLVED_CONFIG), &rc)?;
    let out = train(&rc.experiment, &s.train, &s.val, Some(&a.out))?;
    println!(
        "best epoch {} val acc {:.4}; checkpoint in {}",
        out.best_epoch,
        out.best_val_acc,
        a.out.join(CHECKPOINT_DIR).display()
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (model, rc) = open_checkpoint(&a.ckpt.ckpt)?;
    let data = load_split(&rc, a.ckpt.data.data.as_deref(), a.split.into())?;
    let m = evaluate(&model, &data, &rc.experiment.train.classes)?;
    let json = serde_json::to_string_pretty(&m).map_err(neuroalign::Error::from)?;
    match &a.out {
        Some(dir) => {
            write_bytes(&dir.join("metrics.json"), json.as_bytes())?;
            write_json(&dir.join(RESOLVED_CONFIG), &rc)?;
            println!("accuracy {:.4}", m.accuracy);
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    let rc = resolve(&a.cfg)?;
    let s = load_splits(&rc, a.data.data.as_deref())?;
    write_json(&a.out.join(RESOLVED_CONFIG), &rc)?;
    let rows = sweep(&a.sizes, &rc.experiment, &s.train, &s.val, &s.test)?;
    let csv = sweep_csv(&rows);
    write_bytes(&a.out.join("sweep.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let rc = resolve(&a.cfg)?;
    for r in &a.rows {
        if !table_rows().iter().any(|(name, _)| name == r) {
            return Err(config_err(format!("unknown ablation row `{r}`")));
        }
    }
    let rows: Vec<(&str, Components)> = table_rows()
        .into_iter()
        .filter(|(name, _)| a.rows.iter().any(|r| r == name))
        .collect();
    let s = load_splits(&rc, a.data.data.as_deref())?;
    write_json(&a.out.join(RESOLVED_CONFIG), &rc)?;
    let results = ablate(&rows, &rc.experiment, &s.train, &s.val, &s.test)?;
    let csv = ablation_csv(&results);
    write_bytes(&a.out.join("ablation.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn attribute_cmd(a: &AttributeArgs) -> Result<()> {
    let (model, rc) = open_checkpoint(&a.ckpt.ckpt)?;
    let data = a.ckpt.data.data.as_deref();
    write_json(&a.out.join(RESOLVED_CONFIG), &rc)?;
    match &a.scan {
        Some(id) => {
            let scan = find_scan(&rc, data, id)?;
            let attr = integrated_gradients(&model, &scan.volume, &scan.report, a.steps)?;
            let report = AttributionReport::new(&attr, a.top)?;
            write_json(&a.out.join(format!("attribution_{id}.json")), &report)?;
            for t in &report.top_k {
                println!("{}\t{}\t{:.6}", t.position, t.token, t.score);
            }
        }
        None => {
            let test = load_split(&rc, data, Split::Test)?;
            let rows = stage_report(&model, &one_per_stage(&test.scans), a.steps, a.top)?;
            write_json(&a.out.join("stage_report.json"), &rows)?;
            let table = stage_table(&rows);
            write_bytes(&a.out.join("stage_report.txt"), table.as_bytes())?;
            print!("{table}");
        }
    }
    Ok(())
}

fn heatmap_cmd(a: &HeatmapArgs) -> Result<()> {
    let keep = a.keep;
    let (model, rc) = open_checkpoint(&a.ckpt.ckpt)?;
    let scan = find_scan(&rc, a.ckpt.data.data.as_deref(), &a.scan)?;
    let layer = match a.layer {
        LayerArg::Input => HeatmapLayer::Input,
        LayerArg::Final => HeatmapLayer::Final,
    };
    let h = biomarker_heatmap(&model, &scan, keep, layer)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let files = h.write(
        &a.out,
        &format!("heatmap_{}_{}", scan.scan_id, keep.key()),
        layer,
        a.pgm,
    )?;
    write_json(&a.out.join(RESOLVED_CONFIG), &rc)?;
    println!("{}", files.sidecar.display());
    Ok(())
}

#[derive(Serialize)]
struct Inspection {
    config: RunConfig,
    /// Without a checkpoint this covers the class prompts only; training adds the report words.
    vocab_size: usize,
    total_params: usize,
    trainable_params: usize,
    trainable_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_epoch: Option<usize>,
}

fn inspect_cmd(a: &InspectArgs) -> Result<()> {
    let report = match &a.ckpt {
        Some(path) => {
            let (model, rc) = open_checkpoint(path)?;
            let (_, manifest) = load_checkpoint(&resolve_checkpoint(path))?;
            Inspection {
                vocab_size: model.vocab.len(),
                config: rc,
                total_params: model.store.count_total(),
                trainable_params: model.store.count_trainable(),
                trainable_fraction: model.store.count_trainable() as f64 / model.store.count_total() as f64,
                checkpoint_epoch: Some(manifest.epoch),
            }
        }
        None => {
            let rc = resolve(&a.cfg)?;
            let vocab = neuroalign::dataset::corpus_vocab(&Dataset::default())?;
            let mut mc = rc.experiment.model.clone();
            mc.text.vocab_size = vocab.len();
            let counts = mc.param_counts();
            Inspection {
                vocab_size: vocab.len(),
                config: rc,
                total_params: counts.total,
                trainable_params: counts.trainable,
                trainable_fraction: counts.trainable_fraction(),
                checkpoint_epoch: None,
            }
        }
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(neuroalign::Error::from)?
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Attribute(a) => attribute_cmd(a),
        Command::Heatmap(a) => heatmap_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
    }
}

fn report(e: &CliError) -> ExitCode {
    let msg = e
        .message()
        .replace('\\', "\\\\")
        .replace('"', "\\\"")
        .replace('\n', " ");
    eprintln!("error: kind={} msg=\"{}\"", e.kind(), msg);
    ExitCode::from(e.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            return report(&CliError::Usage(first));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
