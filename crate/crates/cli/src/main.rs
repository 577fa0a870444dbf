use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};

use h2t_core::anomaly::{score_representations, ForestConfig};
use h2t_core::attention::{
    mha_forward, transformer_forward, with_positions, AttentionConfig, PeMode, TransformerVariant,
    TransformerWeights,
};
use h2t_core::evaluation::{run_experiment, ProbeConfig, TaskConfig};
use h2t_core::feature_store::{
    generate_synthetic_cohort, read_slide_features, CohortManifest, SyntheticSpec, Tensor, TensorFile,
};
use h2t_core::pam::{
    build_pam_batch, colocalization_stack, histogram, one_hot_tensor_file, render_pam, represent_batch,
    PatternAssignmentMap, PcmMode,
};
use h2t_core::pipeline::{describe, run_pipeline, summary_text, PipelineConfig};
use h2t_core::projection::{load_representations, parse_gamma_list, ThresholdMode, Variant};
use h2t_core::prototypes::{fit_prototypes, l2_normalize_in_place, KMeansConfig, PrototypeSet};
use h2t_core::{ErrorClass, H2tError, Result};

#[derive(Parser)]
#[command(name = "h2t", version, about = "Prototype-based whole-slide representations")]
struct Cli {
    /// Worker threads (falls back to H2T_THREADS, then all logical cores).
    #[arg(long, global = true, env = "H2T_THREADS")]
    threads: Option<usize>,
    /// Log verbosity on standard error: -v debug, -vv trace.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic cohort.
    Synth(SynthArgs),
    /// Mine prototypical patterns from a reference cohort.
    Cluster(ClusterArgs),
    /// Project slides into a representation variant.
    Project(ProjectArgs),
    /// Pattern assignment maps and the features derived from them.
    #[command(subcommand)]
    Pam(PamCommand),
    /// Cross-validated linear probing of stored representations.
    Probe(ProbeArgs),
    /// Forward pass of the attention reference models.
    Oracle(OracleArgs),
    /// Isolation-forest normality scores.
    Anomaly(AnomalyArgs),
    /// Run cluster, represent, probe and report from one config file.
    Pipeline(PipelineArgs),
    /// Summarize any artifact file.
    Describe { path: PathBuf },
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic cohort spec (TOML); defaults are used when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 25)]
    epochs: usize,
    #[arg(long, default_value_t = 4096)]
    batch_size: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TMode {
    Above,
    Below,
}

#[derive(Clone, Copy, ValueEnum)]
enum PcmModeArg {
    Surrounded,
    AllCenters,
}

impl From<PcmModeArg> for PcmMode {
    fn from(m: PcmModeArg) -> Self {
        match m {
            PcmModeArg::Surrounded => PcmMode::Surrounded,
            PcmModeArg::AllCenters => PcmMode::AllCenters,
        }
    }
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    prototypes: PathBuf,
    /// h, h-w, h-t, h-k, h-fk, hist, pcm or hist+pcm.
    #[arg(long)]
    variant: String,
    /// X for h-t (distance) and h-k / h-fk (patch count).
    #[arg(long)]
    param: Option<f64>,
    #[arg(long, value_enum, default_value = "above")]
    t_mode: TMode,
    /// Radii for pcm and hist+pcm, e.g. 1,2.
    #[arg(long, default_value = "1")]
    gamma: String,
    #[arg(long, value_enum, default_value = "surrounded")]
    pcm_mode: PcmModeArg,
    #[arg(long)]
    out_dir: PathBuf,
    /// Skip slides whose output already exists.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum PamCommand {
    /// Write one `.h2tm` map per slide.
    Build {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        prototypes: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Render a map as a PNG.
    Render {
        #[arg(long)]
        pam: PathBuf,
        /// Pixels per grid cell.
        #[arg(long, default_value_t = 4)]
        scale: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the pattern histogram as one comma-separated line.
    Hist {
        #[arg(long)]
        pam: PathBuf,
    },
    /// Print the stacked co-localization matrices, one row per line.
    Pcm {
        #[arg(long)]
        pam: PathBuf,
        #[arg(long, default_value = "1")]
        gamma: String,
        #[arg(long, value_enum, default_value = "surrounded")]
        pcm_mode: PcmModeArg,
    },
    /// Export a map as a K × H × W one-hot tensor file.
    Onehot {
        #[arg(long)]
        pam: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    repr_dir: PathBuf,
    /// Task config (TOML); flags below override its fields.
    #[arg(long)]
    task: Option<PathBuf>,
    /// Comma-separated label subset; the second of two is the positive class.
    #[arg(long)]
    labels: Option<String>,
    #[arg(long)]
    evaluation_cohort: Option<String>,
    /// Number of folds [default: 5]
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: u64,
    /// [default: 50]
    #[arg(long)]
    probe_epochs: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 32]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Z-score features with training-fold statistics.
    #[arg(long)]
    standardize: bool,
    /// JSON report path; the text table goes to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PeArg {
    None,
    Add,
    Concat,
}

#[derive(Args)]
struct OracleArgs {
    /// Slide feature file.
    #[arg(long)]
    input: PathBuf,
    /// Transformer weight tensors; mutually exclusive with --prototypes.
    #[arg(long, conflicts_with = "prototypes", required_unless_present = "prototypes")]
    weights: Option<PathBuf>,
    /// Identity-projection attention with the prototypes as queries.
    #[arg(long)]
    prototypes: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "t1")]
    variant: VariantArg,
    /// Positional encodings: added to the features, appended, or left out.
    #[arg(long, value_enum, default_value = "add")]
    pe_mode: PeArg,
    /// Softmax inverse temperature [default: 1/√d_k].
    #[arg(long)]
    beta: Option<f64>,
    /// Output tensor file; values are printed to standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    T1,
    T2,
}

#[derive(Args)]
struct AnomalyArgs {
    #[arg(long)]
    train_manifest: PathBuf,
    #[arg(long)]
    score_manifest: PathBuf,
    #[arg(long)]
    repr_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long, default_value_t = 256)]
    subsample: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
        ErrorClass::Internal => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            error!("--threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("thread pool: {e}");
            return ExitCode::from(5);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}

fn stdout_write(text: &str) -> Result<()> {
    std::io::stdout()
        .write_all(text.as_bytes())
        .map_err(|e| H2tError::io("<stdout>", e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| H2tError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| H2tError::io(path, e))
}

fn read_config(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| H2tError::config(format!("cannot read {}: {e}", path.display())))
}

fn load_manifest(path: &Path) -> Result<CohortManifest> {
    if !path.is_file() {
        return Err(H2tError::config(format!("manifest {} does not exist", path.display())));
    }
    CohortManifest::load(path)
}

fn project_variant(a: &ProjectArgs) -> Result<Variant> {
    let gammas = || parse_gamma_list(&a.gamma);
    let all_centers = matches!(a.pcm_mode, PcmModeArg::AllCenters);
    match a.variant.as_str() {
        "pcm" => Ok(Variant::Colocalization { gammas: gammas()?, all_centers }),
        "hist+pcm" => Ok(Variant::HistogramColocalization { gammas: gammas()?, all_centers }),
        name => {
            let mode = match a.t_mode {
                TMode::Above => ThresholdMode::Above,
                TMode::Below => ThresholdMode::Below,
            };
            Variant::from_name(name, a.param, mode)
        }
    }
}

fn batch_result(report: h2t_core::projection::BatchReport) -> Result<()> {
    match report.failures.first() {
        None => Ok(()),
        Some(f) => Err(H2tError::invalid(format!(
            "{} slides failed (first {}: {}); see failures.json",
            report.failures.len(),
            f.slide_id,
            f.error
        ))),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => {
            let spec = match &a.spec {
                Some(p) => toml::from_str::<SyntheticSpec>(&read_config(p)?)
                    .map_err(|e| H2tError::config(format!("synthetic spec: {e}")))?,
                None => SyntheticSpec::default(),
            };
            let cohort = generate_synthetic_cohort(&spec, a.seed, &a.out)?;
            stdout_write(&format!("{}\n", cohort.manifest_path.display()))
        }
        Command::Cluster(a) => {
            let manifest = load_manifest(&a.manifest)?;
            let config = KMeansConfig {
                k: a.k,
                epochs: a.epochs,
                batch_size: a.batch_size,
                seed: a.seed,
            };
            let protos = fit_prototypes(&manifest, &config)?;
            protos.save(&a.out)?;
            info!("wrote {}", a.out.display());
            Ok(())
        }
        Command::Project(a) => {
            let variant = project_variant(&a)?;
            let manifest = load_manifest(&a.manifest)?;
            let protos = PrototypeSet::load(&a.prototypes)?;
            batch_result(represent_batch(&manifest, &protos, &variant, &a.out_dir, a.resume)?)
        }
        Command::Pam(c) => run_pam(c),
        Command::Probe(a) => run_probe(a),
        Command::Oracle(a) => run_oracle(a),
        Command::Anomaly(a) => {
            let train = load_representations(&load_manifest(&a.train_manifest)?, &a.repr_dir)?;
            let score = load_representations(&load_manifest(&a.score_manifest)?, &a.repr_dir)?;
            let config = ForestConfig {
                n_trees: a.trees,
                subsample: a.subsample,
                seed: a.seed,
            };
            let mut csv = String::from("slide_id,normality_score\n");
            for (id, s) in score_representations(&train, &score, &config)? {
                csv.push_str(&format!("{id},{s}\n"));
            }
            write_file(&a.out, csv.as_bytes())
        }
        Command::Pipeline(a) => {
            let config = PipelineConfig::load(&a.config)?;
            let outcome = run_pipeline(&config)?;
            let cached = outcome.stages.iter().filter(|s| s.cached).count();
            info!("{} stages, {cached} cached", outcome.stages.len());
            stdout_write(&summary_text(&outcome.reports, outcome.comparison.as_ref()))
        }
        Command::Describe { path } => stdout_write(&format!("{}\n", describe(&path)?)),
    }
}

fn run_pam(c: PamCommand) -> Result<()> {
    match c {
        PamCommand::Build {
            manifest,
            prototypes,
            out_dir,
            resume,
        } => {
            let manifest = load_manifest(&manifest)?;
            let protos = PrototypeSet::load(&prototypes)?;
            batch_result(build_pam_batch(&manifest, &protos, &out_dir, resume)?)
        }
        PamCommand::Render { pam, scale, out } => render_pam(&PatternAssignmentMap::load(&pam)?, scale, &out),
        PamCommand::Hist { pam } => {
            let h = histogram(&PatternAssignmentMap::load(&pam)?)?;
            let line: Vec<String> = h.iter().map(f64::to_string).collect();
            stdout_write(&format!("{}\n", line.join(",")))
        }
        PamCommand::Pcm { pam, gamma, pcm_mode } => {
            let gammas = parse_gamma_list(&gamma)?;
            let m = colocalization_stack(&PatternAssignmentMap::load(&pam)?, &gammas, pcm_mode.into())?;
            let mut text = String::new();
            for row in m.rows() {
                let cells: Vec<String> = row.iter().map(f64::to_string).collect();
                text.push_str(&cells.join(","));
                text.push('\n');
            }
            stdout_write(&text)
        }
        PamCommand::Onehot { pam, out } => one_hot_tensor_file(&PatternAssignmentMap::load(&pam)?).save(&out),
    }
}

fn run_probe(a: ProbeArgs) -> Result<()> {
    let mut task = match &a.task {
        Some(p) => TaskConfig::from_toml_str(&read_config(p)?)?,
        None => TaskConfig::default(),
    };
    task.seed = a.seed;
    if let Some(l) = &a.labels {
        task.labels = l.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    if a.evaluation_cohort.is_some() {
        task.evaluation_cohort = a.evaluation_cohort.clone();
    }
    if let Some(f) = a.folds {
        task.n_folds = f;
    }
    task.probe = ProbeConfig {
        epochs: a.probe_epochs.unwrap_or(task.probe.epochs),
        lr: a.lr.unwrap_or(task.probe.lr),
        batch_size: a.batch_size.unwrap_or(task.probe.batch_size),
        seed: a.seed,
    };
    task.standardize |= a.standardize;
    let manifest = load_manifest(&a.manifest)?;
    let reps = load_representations(&manifest, &a.repr_dir)?;
    let report = run_experiment(&manifest, &reps, &task)?;
    if let Some(out) = &a.out {
        write_file(out, report.to_json().as_bytes())?;
    }
    stdout_write(&report.to_text())
}

fn run_oracle(a: OracleArgs) -> Result<()> {
    let records = read_slide_features(&a.input)?;
    let positions: Vec<(u32, u32)> = records.iter().map(|r| (r.grid_x, r.grid_y)).collect();
    let d = records.first().map_or(0, |r| r.feature.len());
    let mut x = ndarray::Array2::zeros((records.len(), d));
    for (mut row, r) in x.rows_mut().into_iter().zip(&records) {
        row.assign(&ndarray::Array1::from(r.feature_f64()));
    }
    let x = match a.pe_mode {
        PeArg::None => x,
        PeArg::Add => with_positions(&x, &positions, PeMode::Add)?,
        PeArg::Concat => with_positions(&x, &positions, PeMode::Concat)?,
    };
    let output: Tensor = match (&a.weights, &a.prototypes) {
        (Some(w), _) => {
            let variant = match a.variant {
                VariantArg::T1 => TransformerVariant::T1,
                VariantArg::T2 => TransformerVariant::T2,
            };
            let weights = TransformerWeights::from_tensor_file(&TensorFile::load(w)?, variant, a.beta)?;
            let logits = transformer_forward(&x, variant, &weights)?;
            Tensor::new("logits", vec![logits.len()], logits.iter().map(|&v| v as f32).collect())?
        }
        (None, Some(p)) => {
            let protos = PrototypeSet::load(p)?;
            let mut y = x;
            for mut row in y.rows_mut() {
                l2_normalize_in_place(row.as_slice_mut().expect("standard layout"))?;
            }
            let config = AttentionConfig::identity(y.ncols(), a.beta);
            Tensor::from_array2("attention", &mha_forward(&protos.centroids, &y, &config)?)
        }
        (None, None) => return Err(H2tError::config("oracle needs --weights or --prototypes")),
    };
    match &a.out {
        Some(out) => {
            let mut f = TensorFile::default();
            f.push(output);
            f.save(out)
        }
        None => {
            let cols = *output.shape.last().unwrap_or(&1);
            let mut text = String::new();
            for row in output.data.chunks(cols.max(1)) {
                let cells: Vec<String> = row.iter().map(f32::to_string).collect();
                text.push_str(&cells.join(","));
                text.push('\n');
            }
            stdout_write(&text)
        }
    }
}
