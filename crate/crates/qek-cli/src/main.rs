//! `qek`: drive the graph-classification pipeline from the shell.
//!
//! Exit codes: 0 success, 2 rejected input (bad config, malformed files,
//! constraint violations), 3 runtime stage failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use qek_core::bayesopt::BoConfig;
use qek_core::embedding::{embed_dataset_with, synthetic_corpus, RegisterConstraints};
use qek_core::emulator::{evolve, sample, NoiseModel, PhysicsConfig};
use qek_core::features::{read_kernel_csv, spk_matrix, write_kernel_csv, KernelKind, KernelMatrix};
use qek_core::graph::{
    corpus_stats, detect_dataset_name, filter_by_node_count, parse_tu_dataset, write_tu_dataset, GraphSet,
};
use qek_core::pipeline::{
    compare_kernels, distributions_of, load_config, plot_stub_script, read_labels_csv,
    read_measurements_jsonl, read_register_dir, run_pipeline, shot_subsample_analysis, validate_run_dir,
    write_comparison_csv, write_labels_csv, write_measurements_jsonl, write_subsample_csv, EmbeddingIndex,
    MeasurementRecord, PipelineConfig, RegisterArtifact, ScheduleArtifact, WaveformSpec,
};
use qek_core::pulse::{
    build_schedule, parse_task_document, validate_task, HardwareLimits, WaveformParams, OMEGA_MAX_RAD_PER_US,
};
use qek_core::svm::{kfold_grid_search, SearchGrid};
use qek_core::{Error, Result};

#[derive(Parser)]
#[command(name = "qek", version, about = "Graph classification on emulated Rydberg atom registers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect, filter, or generate TU-format datasets.
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
    /// Embed a dataset's graphs as unit-disk atom registers.
    Embed(EmbedArgs),
    /// Build or validate pulse schedules and task documents.
    Pulse {
        #[command(subcommand)]
        cmd: PulseCmd,
    },
    /// Evolve embedded registers under a schedule and sample shots.
    Emulate(EmulateArgs),
    /// Assemble a kernel matrix from measurements or graph structure.
    Kernel(KernelArgs),
    /// Grid-search an SVM over a precomputed kernel.
    Train(TrainArgs),
    /// Optimize the waveform by Bayesian search over full pipeline runs.
    Bo(BoArgs),
    /// Run every stage from a config file.
    Run(RunArgs),
    /// Re-train on shot subsamples of a finished run.
    AnalyzeShots(AnalyzeShotsArgs),
    /// Cross-validate several kernels on shared folds.
    Compare(CompareArgs),
}

#[derive(Subcommand)]
enum DataCmd {
    /// Print corpus statistics as JSON.
    Stats {
        dir: PathBuf,
        /// Dataset file prefix; auto-detected when omitted.
        #[arg(long)]
        name: Option<String>,
    },
    /// Keep graphs with at most the given node count.
    Filter {
        dir: PathBuf,
        #[arg(long)]
        max_nodes: usize,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        name: Option<String>,
    },
    /// Write a labeled synthetic corpus in TU format.
    Gen {
        /// Graphs per class.
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for the TU files.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EmbedArgs {
    /// TU-format dataset directory.
    dataset: PathBuf,
    #[arg(long, default_value_t = 10)]
    max_nodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = OMEGA_MAX_RAD_PER_US)]
    omega: f64,
    #[arg(long, default_value_t = qek_core::embedding::DEFAULT_ATTEMPTS)]
    attempts: usize,
    #[arg(long)]
    name: Option<String>,
    /// Output directory for registers, index, and labels.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum PulseCmd {
    /// Build the layered schedule for a waveform.
    Build {
        /// Durations tau0,t0,tau1,t1,tau2 in ns.
        #[arg(long, value_parser = parse_lambda)]
        lambda: WaveformParams,
        #[arg(long, default_value_t = OMEGA_MAX_RAD_PER_US)]
        omega: f64,
        /// Write the schedule JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a task document against hardware limits.
    Validate { task: PathBuf },
}

#[derive(Args)]
struct EmulateArgs {
    /// Directory produced by `qek embed`.
    embeddings: PathBuf,
    #[arg(long, value_parser = parse_lambda)]
    lambda: WaveformParams,
    #[arg(long, default_value_t = OMEGA_MAX_RAD_PER_US)]
    omega: f64,
    #[arg(long, default_value_t = 1000)]
    shots: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = PhysicsConfig::default().c6_over_hbar_rad_um6_per_us)]
    c6: f64,
    /// Output directory; registers and labels are copied in so the
    /// directory is self-contained for `qek kernel`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KernelArgs {
    /// Directory holding measurements.jsonl plus register files.
    #[arg(long, conflicts_with = "classical", required_unless_present = "classical")]
    measurements: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    #[arg(long, default_value_t = PhysicsConfig::default().c6_over_hbar_rad_um6_per_us)]
    c6: f64,
    /// Classical kernel name (only `spk`).
    #[arg(long, requires = "dataset")]
    classical: Option<String>,
    /// TU-format dataset directory for the classical kernel.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    max_nodes: Option<usize>,
    /// Output kernel CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Kernel CSV with a graph-id header.
    #[arg(long)]
    kernel: PathBuf,
    /// Labels CSV (graph_id,label).
    #[arg(long)]
    labels: PathBuf,
    /// Cross-validation folds.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = GridArg::Paper)]
    grid: GridArg,
    /// Also write the per-fold metrics table as CSV.
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args)]
struct BoArgs {
    /// TU-format dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    shots: u64,
    #[arg(long, default_value_t = 10)]
    max_nodes: usize,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long)]
    name: Option<String>,
    /// Run directory; defaults to the resolved output root.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline config, TOML or JSON.
    #[arg(long)]
    config: PathBuf,
    /// Check an existing run directory instead of executing.
    #[arg(long)]
    validate_only: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeShotsArgs {
    /// Finished run directory.
    #[arg(long)]
    run: PathBuf,
    /// Comma-separated shot counts, e.g. 10,100,1000.
    #[arg(long, value_parser = parse_shot_list)]
    shots: ShotList,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bin energies on the main run's support instead of re-deriving it.
    #[arg(long)]
    reuse_binning: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Kernel as name=path; repeat for each kernel.
    #[arg(long = "kernel", value_parser = parse_named_kernel, required = true)]
    kernels: Vec<NamedPath>,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = GridArg::Paper)]
    grid: GridArg,
    /// Write the comparison table here; a plot stub lands beside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GridArg {
    Paper,
    Coarse,
}

impl GridArg {
    fn to_grid(self) -> SearchGrid {
        match self {
            GridArg::Paper => SearchGrid::paper_default(),
            GridArg::Coarse => SearchGrid::coarse(),
        }
    }
}

fn parse_lambda(text: &str) -> std::result::Result<WaveformParams, String> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad duration {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    let values: [f64; 5] = parts
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected 5 durations, got {}", v.len()))?;
    WaveformParams::from_array(values).map_err(|e| e.to_string())
}

#[derive(Clone)]
struct ShotList(Vec<u64>);

fn parse_shot_list(text: &str) -> std::result::Result<ShotList, String> {
    let counts: Vec<u64> = text
        .split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|_| format!("bad shot count {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    if counts.is_empty() {
        return Err("need at least one shot count".into());
    }
    Ok(ShotList(counts))
}

#[derive(Clone)]
struct NamedPath {
    name: String,
    path: PathBuf,
}

fn parse_named_kernel(text: &str) -> std::result::Result<NamedPath, String> {
    let (name, path) = text
        .split_once('=')
        .ok_or_else(|| format!("expected name=path, got {text:?}"))?;
    if name.is_empty() {
        return Err("kernel name is empty".into());
    }
    Ok(NamedPath {
        name: name.to_string(),
        path: PathBuf::from(path),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Data { cmd } => match cmd {
            DataCmd::Stats { dir, name } => cmd_data_stats(&dir, name.as_deref()),
            DataCmd::Filter {
                dir,
                max_nodes,
                out,
                name,
            } => cmd_data_filter(&dir, max_nodes, &out, name.as_deref()),
            DataCmd::Gen { per_class, seed, out } => cmd_data_gen(per_class, seed, &out),
        },
        Command::Embed(args) => cmd_embed(args),
        Command::Pulse { cmd } => match cmd {
            PulseCmd::Build { lambda, omega, out } => cmd_pulse_build(&lambda, omega, out.as_deref()),
            PulseCmd::Validate { task } => cmd_pulse_validate(&task),
        },
        Command::Emulate(args) => cmd_emulate(args),
        Command::Kernel(args) => cmd_kernel(args),
        Command::Train(args) => cmd_train(args),
        Command::Bo(args) => cmd_bo(args),
        Command::Run(args) => cmd_run(args),
        Command::AnalyzeShots(args) => cmd_analyze_shots(args),
        Command::Compare(args) => cmd_compare(args),
    }
}

fn load_dataset(dir: &Path, name: Option<&str>) -> Result<GraphSet> {
    let name = match name {
        Some(n) => n.to_string(),
        None => detect_dataset_name(dir)?,
    };
    parse_tu_dataset(dir, &name)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_data_stats(dir: &Path, name: Option<&str>) -> Result<()> {
    let set = load_dataset(dir, name)?;
    let stats = corpus_stats(&set)?;
    println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
    Ok(())
}

fn cmd_data_filter(dir: &Path, max_nodes: usize, out: &Path, name: Option<&str>) -> Result<()> {
    let set = load_dataset(dir, name)?;
    let filtered = filter_by_node_count(&set, max_nodes);
    write_file(out, filtered.to_json().as_bytes())?;
    println!("kept {} of {} graphs -> {}", filtered.len(), set.len(), out.display());
    Ok(())
}

fn cmd_data_gen(per_class: usize, seed: u64, out: &Path) -> Result<()> {
    let physics = PhysicsConfig::default();
    let constraints = RegisterConstraints::standard(physics.c6_over_hbar_rad_um6_per_us, OMEGA_MAX_RAD_PER_US)?;
    let set = synthetic_corpus(per_class, seed, &constraints)?;
    write_tu_dataset(&set, out)?;
    println!("wrote {} graphs ({} per class) -> {}", set.len(), per_class, out.display());
    Ok(())
}

fn cmd_embed(args: EmbedArgs) -> Result<()> {
    let set = load_dataset(&args.dataset, args.name.as_deref())?;
    let filtered = filter_by_node_count(&set, args.max_nodes);
    if filtered.is_empty() {
        return Err(Error::EmptyInput(format!("no graph has <= {} nodes", args.max_nodes)));
    }
    let physics = PhysicsConfig::default();
    let constraints = RegisterConstraints::standard(physics.c6_over_hbar_rad_um6_per_us, args.omega)?;
    let embedded = embed_dataset_with(&filtered, &constraints, args.seed, args.attempts)?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let index = EmbeddingIndex {
        embedded_ids: embedded.embedded.iter().map(|(g, _)| g.id).collect(),
        rejected: embedded.rejected.clone(),
        attempts_used: embedded.attempts_used.clone(),
    };
    write_file(
        &args.out.join("index.json"),
        serde_json::to_string_pretty(&index).expect("index serializes").as_bytes(),
    )?;
    for (g, register) in &embedded.embedded {
        let artifact = RegisterArtifact::from_register(g.id, register);
        write_file(
            &args.out.join(format!("{}.json", g.id)),
            serde_json::to_string_pretty(&artifact).expect("register serializes").as_bytes(),
        )?;
    }
    let pairs: Vec<(u64, u8)> = embedded.embedded.iter().map(|(g, _)| (g.id, g.label)).collect();
    let mut labels = Vec::new();
    write_labels_csv(&pairs, &mut labels).map_err(|e| Error::io("labels.csv", e))?;
    write_file(&args.out.join("labels.csv"), &labels)?;

    println!(
        "embedded {} graphs, rejected {} -> {}",
        embedded.embedded.len(),
        embedded.rejected.len(),
        args.out.display()
    );
    for r in &embedded.rejected {
        println!("  rejected graph {}: {}", r.graph_id, r.reason);
    }
    Ok(())
}

fn cmd_pulse_build(lambda: &WaveformParams, omega: f64, out: Option<&Path>) -> Result<()> {
    let schedule = build_schedule(lambda, omega)?;
    let artifact = ScheduleArtifact {
        waveform: *lambda,
        omega_rad_per_us: omega,
        schedule,
    };
    let text = serde_json::to_string_pretty(&artifact).expect("schedule serializes");
    match out {
        Some(path) => {
            write_file(path, text.as_bytes())?;
            println!(
                "wrote {} segments, total {:.1} ns -> {}",
                artifact.schedule.segments.len(),
                lambda.total_ns(),
                path.display()
            );
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_pulse_validate(task_path: &Path) -> Result<()> {
    let text = fs::read_to_string(task_path).map_err(|e| Error::io(task_path.display().to_string(), e))?;
    let doc = parse_task_document(&text)?;
    let physics = PhysicsConfig::default();
    let constraints = RegisterConstraints::standard(physics.c6_over_hbar_rad_um6_per_us, OMEGA_MAX_RAD_PER_US)?;
    let verdict = validate_task(&doc.to_schedule(), &doc.to_register(), &HardwareLimits::standard(constraints));
    if verdict.is_valid() {
        println!("{}: valid", task_path.display());
        Ok(())
    } else {
        for v in &verdict.violations {
            eprintln!("{}: {v}", task_path.display());
        }
        Err(Error::Validation(verdict.violations))
    }
}

fn cmd_emulate(args: EmulateArgs) -> Result<()> {
    let registers = read_register_dir(&args.embeddings)?;
    if registers.is_empty() {
        return Err(Error::EmptyInput("embedding directory lists no registers".into()));
    }
    let schedule = build_schedule(&args.lambda, args.omega)?;
    let physics = PhysicsConfig {
        c6_over_hbar_rad_um6_per_us: args.c6,
        ..PhysicsConfig::default()
    };
    physics.validate()?;
    let noise = NoiseModel::default();

    fs::create_dir_all(&args.out).map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let mut records = Vec::with_capacity(registers.len());
    for artifact in &registers {
        let register = artifact.to_register();
        let state = evolve(&register, &schedule, &physics)?;
        let shot_seed = qek_core::seeding::stream_seed(args.seed, "emulate", &[artifact.graph_id]);
        let set = sample(&state, args.shots, shot_seed, &noise)?;
        records.push(MeasurementRecord::from_set(artifact.graph_id, &set));
        write_file(
            &args.out.join(format!("{}.json", artifact.graph_id)),
            serde_json::to_string_pretty(artifact).expect("register serializes").as_bytes(),
        )?;
    }
    let mut jsonl = Vec::new();
    write_measurements_jsonl(&records, &mut jsonl).map_err(|e| Error::io("measurements.jsonl", e))?;
    write_file(&args.out.join("measurements.jsonl"), &jsonl)?;
    let schedule_artifact = ScheduleArtifact {
        waveform: args.lambda,
        omega_rad_per_us: args.omega,
        schedule,
    };
    write_file(
        &args.out.join("schedule.json"),
        serde_json::to_string_pretty(&schedule_artifact)
            .expect("schedule serializes")
            .as_bytes(),
    )?;
    for extra in ["index.json", "labels.csv"] {
        let src = args.embeddings.join(extra);
        if src.is_file() {
            fs::copy(&src, args.out.join(extra)).map_err(|e| Error::io(src.display().to_string(), e))?;
        }
    }
    println!(
        "sampled {} shots from {} registers -> {}",
        args.shots,
        records.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_kernel(args: KernelArgs) -> Result<()> {
    let kernel = match (&args.measurements, &args.classical) {
        (Some(dir), None) => qek_kernel_from_dir(dir, args.mu, args.c6)?,
        (None, Some(kind)) if kind == "spk" => {
            let dataset = args.dataset.as_ref().expect("clap enforces --dataset");
            let set = load_dataset(dataset, args.name.as_deref())?;
            let set = match args.max_nodes {
                Some(n) => filter_by_node_count(&set, n),
                None => set,
            };
            spk_matrix(&set.graphs)?
        }
        (None, Some(kind)) => {
            return Err(Error::Config(format!("unknown classical kernel {kind:?}, expected spk")));
        }
        _ => unreachable!("clap enforces exactly one source"),
    };
    let mut bytes = Vec::new();
    write_kernel_csv(&kernel, &mut bytes).map_err(|e| Error::io("kernel csv", e))?;
    write_file(&args.out, &bytes)?;
    println!("wrote {}x{} kernel -> {}", kernel.n(), kernel.n(), args.out.display());
    Ok(())
}

fn qek_kernel_from_dir(dir: &Path, mu: f64, c6: f64) -> Result<KernelMatrix> {
    let records = read_measurements_jsonl(&dir.join("measurements.jsonl"))?;
    if records.is_empty() {
        return Err(Error::EmptyInput("no measurement records".into()));
    }
    let mut registers = BTreeMap::new();
    for r in &records {
        let path = dir.join(format!("{}.json", r.graph_id));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let artifact: RegisterArtifact = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        registers.insert(r.graph_id, artifact.to_register());
    }
    let measurements = records
        .iter()
        .map(|r| r.to_set("measurements.jsonl").map(|s| (r.graph_id, s)))
        .collect::<Result<Vec<_>>>()?;
    let (_, dists) = distributions_of(&measurements, &registers, c6)?;
    qek_core::features::qek_matrix(&dists, mu)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (kernel, labels) = load_kernel_and_labels(&args.kernel, &args.labels)?;
    let outcome = kfold_grid_search(&kernel, &labels, &args.grid.to_grid(), args.k, args.seed)?;
    println!("{}", serde_json::to_string_pretty(&outcome).expect("outcome serializes"));
    if let Some(path) = &args.out_csv {
        let mut csv = String::from("fold,f1,accuracy,precision,recall\n");
        for (i, m) in outcome.folds.iter().enumerate() {
            csv.push_str(&format!("{i},{},{},{},{}\n", m.f1, m.accuracy, m.precision, m.recall));
        }
        csv.push_str(&format!(
            "mean,{},{},{},{}\n",
            outcome.mean.f1, outcome.mean.accuracy, outcome.mean.precision, outcome.mean.recall
        ));
        write_file(path, csv.as_bytes())?;
    }
    Ok(())
}

fn load_kernel_and_labels(kernel_path: &Path, labels_path: &Path) -> Result<(KernelMatrix, Vec<u8>)> {
    let text = fs::read_to_string(kernel_path).map_err(|e| Error::io(kernel_path.display().to_string(), e))?;
    let kernel = read_kernel_csv(
        BufReader::new(text.as_bytes()),
        KernelKind::Qek { mu: 1.0 },
        &kernel_path.display().to_string(),
    )?;
    let pairs = read_labels_csv(labels_path)?;
    let by_id: BTreeMap<u64, u8> = pairs.into_iter().collect();
    let labels = kernel
        .graph_ids
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| Error::IdMismatch(format!("no label for graph {id}")))
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok((kernel, labels))
}

fn cmd_bo(args: BoArgs) -> Result<()> {
    let config = PipelineConfig {
        dataset_dir: args.dataset,
        dataset_name: args.name,
        max_nodes: args.max_nodes,
        waveform: WaveformSpec::Optimize,
        omega_rad_per_us: OMEGA_MAX_RAD_PER_US,
        physics: PhysicsConfig::default(),
        noise: NoiseModel::default(),
        n_shots: args.shots,
        mu: 1.0,
        cv_folds: args.folds,
        grid: qek_core::pipeline::GridChoice::Paper,
        bo_grid: qek_core::pipeline::GridChoice::Coarse,
        bo: BoConfig {
            max_iterations: args.iters,
            ..BoConfig::default()
        },
        embed_attempts: qek_core::embedding::DEFAULT_ATTEMPTS,
        seed: args.seed,
        output_dir: args.out,
    };
    let manifest = run_pipeline(&config)?;
    report_run(&manifest, &config)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    if let Some(dir) = &args.validate_only {
        let manifest = validate_run_dir(dir)?;
        println!("{}: {} stages, all artifacts intact", dir.display(), manifest.stages.len());
        return Ok(());
    }
    let config = load_config(&args.config)?;
    let manifest = run_pipeline(&config)?;
    report_run(&manifest, &config)
}

fn report_run(manifest: &qek_core::pipeline::RunManifest, config: &PipelineConfig) -> Result<()> {
    // The manifest's config echoes the resolved output dir only when set;
    // recompute the same default the pipeline used for display.
    let out_dir = config
        .output_dir
        .clone()
        .unwrap_or_else(|| default_run_dir(config));
    write_file(&out_dir.join("plot_artifacts.py"), plot_stub_script().as_bytes())?;
    for stage in &manifest.stages {
        println!("{:>14}  {:>6} ms  {} artifacts", stage.name, stage.wall_ms, stage.artifacts.len());
    }
    println!("total {} ms -> {}", manifest.total_wall_ms, out_dir.display());
    if manifest.stage("bo").is_some() {
        let best = fs::read_to_string(out_dir.join("bo_best.json"))
            .map_err(|e| Error::io("bo_best.json", e))?;
        println!("best waveform: {}", best.trim());
    }
    Ok(())
}

fn default_run_dir(config: &PipelineConfig) -> PathBuf {
    let root = std::env::var_os(qek_core::pipeline::OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("qek-runs"));
    let stem = config
        .dataset_name
        .clone()
        .or_else(|| config.dataset_dir.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "run".into());
    root.join(format!("{stem}-seed{}", config.seed))
}

fn cmd_analyze_shots(args: AnalyzeShotsArgs) -> Result<()> {
    let rows = shot_subsample_analysis(&args.run, &args.shots.0, args.seed, args.reuse_binning)?;
    let mut bytes = Vec::new();
    write_subsample_csv(&rows, &mut bytes).map_err(|e| Error::io("analysis_shots.csv", e))?;
    write_file(&args.run.join("analysis_shots.csv"), &bytes)?;
    write_file(&args.run.join("plot_artifacts.py"), plot_stub_script().as_bytes())?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let mut kernels = Vec::with_capacity(args.kernels.len());
    for named in &args.kernels {
        let text = fs::read_to_string(&named.path).map_err(|e| Error::io(named.path.display().to_string(), e))?;
        let kernel = read_kernel_csv(
            BufReader::new(text.as_bytes()),
            KernelKind::Qek { mu: 1.0 },
            &named.path.display().to_string(),
        )?;
        kernels.push((named.name.clone(), kernel));
    }
    let pairs = read_labels_csv(&args.labels)?;
    let by_id: BTreeMap<u64, u8> = pairs.into_iter().collect();
    let labels = kernels[0]
        .1
        .graph_ids
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| Error::IdMismatch(format!("no label for graph {id}")))
        })
        .collect::<Result<Vec<u8>>>()?;

    let rows = compare_kernels(&kernels, &labels, &args.grid.to_grid(), args.k, args.seed)?;
    let mut bytes = Vec::new();
    write_comparison_csv(&rows, &mut bytes).map_err(|e| Error::io("comparison csv", e))?;
    if let Some(path) = &args.out {
        write_file(path, &bytes)?;
        let stub = path.with_file_name("plot_artifacts.py");
        write_file(&stub, plot_stub_script().as_bytes())?;
    }
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}
