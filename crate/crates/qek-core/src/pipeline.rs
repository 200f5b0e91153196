//! End-to-end orchestration with persisted artifacts.
//!
//! `run_pipeline` drives parse -> filter -> embed -> [bo] -> schedule ->
//! emulate -> distributions -> kernel -> train, writing every intermediate
//! result under one run directory together with a manifest. Given the same
//! config and master seed, every artifact is byte-identical across runs;
//! only the manifest's wall-clock fields vary.
//!
//! Run directory layout:
//!
//! ```text
//! dataset.json            parsed corpus
//! filtered.json           corpus after the node-count filter
//! embeddings/index.json   embedded/rejected ids and attempts
//! embeddings/<id>.json    one register per embedded graph
//! bo_trace.csv            (optimize mode) acquisition trace
//! bo_best.json            (optimize mode) best waveform and objective
//! schedule.json           waveform, drive scale, and segment list
//! tasks/<id>.json         hardware task documents
//! measurements.jsonl      one record per graph, corpus order
//! distributions.json      binned energy distributions
//! kernel.csv, labels.csv  Gram matrix and labels
//! cv_results.json         grid-search outcome
//! manifest.json           config snapshot, stage artifacts, timings
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayesopt::{self, BoConfig};
use crate::embedding::{embed_dataset_with, Register, RegisterConstraints, DEFAULT_ATTEMPTS};
use crate::emulator::{bitstring_to_mask, evolve, sample, MeasurementSet, NoiseModel, PhysicsConfig};
use crate::features::{
    energy_sample, global_binning, qek_matrix, read_kernel_csv, to_distribution, write_kernel_csv, Binning,
    EnergyDistribution, EnergySample, KernelKind, KernelMatrix, NUM_BINS,
};
use crate::graph::{detect_dataset_name, filter_by_node_count, parse_tu_dataset, Graph, GraphSet};
use crate::pulse::{build_schedule, emit_task_document, parse_task_document, PulseSchedule, WaveformParams, OMEGA_MAX_RAD_PER_US, TASK_SCHEMA_VERSION};
use crate::seeding;
use crate::svm::{kfold_grid_search, majority_baseline, stratified_folds, GridSearchOutcome, Metrics, SearchGrid, SvmHyperparams};
use crate::{Error, Result};

/// Base directory for run artifacts when the config names none.
pub const OUTPUT_ROOT_ENV: &str = "QEK_OUTPUT_ROOT";

/// The waveform is either given outright or found by Bayesian optimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WaveformSpec {
    Explicit(WaveformParams),
    Optimize,
}

impl Serialize for WaveformSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            WaveformSpec::Explicit(p) => p.serialize(s),
            WaveformSpec::Optimize => s.serialize_str("optimize"),
        }
    }
}

impl<'de> Deserialize<'de> for WaveformSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Params(WaveformParams),
            Mode(String),
        }
        match Raw::deserialize(d)? {
            Raw::Params(p) => Ok(WaveformSpec::Explicit(p)),
            Raw::Mode(m) if m == "optimize" => Ok(WaveformSpec::Optimize),
            Raw::Mode(m) => Err(serde::de::Error::custom(format!(
                "waveform must be a duration table or the string \"optimize\", got {m:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridChoice {
    #[default]
    Paper,
    Coarse,
}

impl GridChoice {
    pub fn to_grid(self) -> SearchGrid {
        match self {
            GridChoice::Paper => SearchGrid::paper_default(),
            GridChoice::Coarse => SearchGrid::coarse(),
        }
    }
}

fn d_max_nodes() -> usize {
    10
}
fn d_omega() -> f64 {
    OMEGA_MAX_RAD_PER_US
}
fn d_shots() -> u64 {
    1000
}
fn d_mu() -> f64 {
    1.0
}
fn d_folds() -> usize {
    10
}
fn d_bo_grid() -> GridChoice {
    GridChoice::Coarse
}
fn d_attempts() -> usize {
    DEFAULT_ATTEMPTS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// TU-format dataset directory.
    pub dataset_dir: PathBuf,
    /// Dataset file prefix; auto-detected when absent.
    #[serde(default)]
    pub dataset_name: Option<String>,
    #[serde(default = "d_max_nodes")]
    pub max_nodes: usize,
    pub waveform: WaveformSpec,
    #[serde(default = "d_omega")]
    pub omega_rad_per_us: f64,
    #[serde(default)]
    pub physics: PhysicsConfig,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default = "d_shots")]
    pub n_shots: u64,
    #[serde(default = "d_mu")]
    pub mu: f64,
    #[serde(default = "d_folds")]
    pub cv_folds: usize,
    /// Hyperparameter grid for the final training stage.
    #[serde(default)]
    pub grid: GridChoice,
    /// Smaller grid used inside the BO objective to keep iterations cheap.
    #[serde(default = "d_bo_grid")]
    pub bo_grid: GridChoice,
    /// BO loop settings; its seed field is ignored in favor of the master
    /// seed's "bo" stream.
    #[serde(default)]
    pub bo: BoConfig,
    #[serde(default = "d_attempts")]
    pub embed_attempts: usize,
    /// Master seed; every randomized stage draws a named stream from it.
    #[serde(default)]
    pub seed: u64,
    /// Run directory; defaults to $QEK_OUTPUT_ROOT (or ./qek-runs) plus a
    /// name derived from the dataset and seed.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.dataset_dir.is_dir() {
            return Err(Error::Config(format!(
                "dataset_dir {} is not a directory",
                self.dataset_dir.display()
            )));
        }
        if self.max_nodes < 2 {
            return Err(Error::Config(format!("max_nodes must be >= 2, got {}", self.max_nodes)));
        }
        if !(self.omega_rad_per_us > 0.0 && self.omega_rad_per_us.is_finite()) {
            return Err(Error::Config(format!(
                "omega must be positive, got {}",
                self.omega_rad_per_us
            )));
        }
        if self.n_shots == 0 {
            return Err(Error::Config("n_shots must be >= 1".into()));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config(format!("cv_folds must be >= 2, got {}", self.cv_folds)));
        }
        if self.embed_attempts == 0 {
            return Err(Error::Config("embed_attempts must be >= 1".into()));
        }
        self.physics.validate()?;
        self.noise.validate()?;
        self.bo.validate()?;
        if let WaveformSpec::Explicit(p) = self.waveform {
            let violations = WaveformParams::constraint_violations(&p.as_array());
            if !violations.is_empty() {
                return Err(Error::Validation(violations));
            }
        }
        Ok(())
    }
}

/// Parse a config file as TOML (.toml) or JSON (.json).
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let config: PipelineConfig = if is_json {
        serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
    } else {
        toml::from_str(&text).map_err(|e| Error::Schema {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
    };
    Ok(config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub crate_version: String,
    pub task_schema: String,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
    pub total_wall_ms: u64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    fn new(config: &PipelineConfig) -> Self {
        RunManifest {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            task_schema: TASK_SCHEMA_VERSION.to_string(),
            config: config.clone(),
            stages: Vec::new(),
            total_wall_ms: 0,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// One graph's measurement artifact, serialized per line in
/// `measurements.jsonl`. Atom 0 is the leftmost bitstring character and
/// '1' marks the Rydberg state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub graph_id: u64,
    pub requested: u64,
    pub kept: u64,
    pub shots: Vec<String>,
}

impl MeasurementRecord {
    pub fn from_set(graph_id: u64, set: &MeasurementSet) -> Self {
        MeasurementRecord {
            graph_id,
            requested: set.requested,
            kept: set.kept(),
            shots: set.to_bitstrings(),
        }
    }

    pub fn to_set(&self, origin: &str) -> Result<MeasurementSet> {
        if self.kept as usize != self.shots.len() {
            return Err(Error::Schema {
                path: origin.to_string(),
                message: format!(
                    "graph {}: kept {} disagrees with {} listed shots",
                    self.graph_id,
                    self.kept,
                    self.shots.len()
                ),
            });
        }
        let num_atoms = self.shots.first().map_or(0, |s| s.len());
        let shots = self
            .shots
            .iter()
            .map(|s| {
                if s.len() != num_atoms {
                    return Err(Error::Schema {
                        path: origin.to_string(),
                        message: format!("graph {}: ragged bitstring lengths", self.graph_id),
                    });
                }
                bitstring_to_mask(s)
            })
            .collect::<Result<Vec<u64>>>()?;
        Ok(MeasurementSet {
            num_atoms,
            requested: self.requested,
            shots,
        })
    }
}

pub fn write_measurements_jsonl<W: IoWrite>(records: &[MeasurementRecord], mut w: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_measurements_jsonl(path: &Path) -> Result<Vec<MeasurementRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MeasurementRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path.display().to_string(), i + 1, e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_labels_csv<W: IoWrite>(pairs: &[(u64, u8)], mut w: W) -> std::io::Result<()> {
    writeln!(w, "graph_id,label")?;
    for (id, label) in pairs {
        writeln!(w, "{id},{label}")?;
    }
    Ok(())
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<(u64, u8)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "graph_id,label")) => {}
        _ => return Err(Error::parse(path.display().to_string(), 1, "expected header graph_id,label")),
    }
    let mut pairs = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(path.display().to_string(), i + 1, "expected graph_id,label"))?;
        let id: u64 = id
            .trim()
            .parse()
            .map_err(|_| Error::parse(path.display().to_string(), i + 1, format!("bad graph id {id:?}")))?;
        let label: u8 = label
            .trim()
            .parse()
            .map_err(|_| Error::parse(path.display().to_string(), i + 1, format!("bad label {label:?}")))?;
        pairs.push((id, label));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleArtifact {
    pub waveform: WaveformParams,
    pub omega_rad_per_us: f64,
    pub schedule: PulseSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub embedded_ids: Vec<u64>,
    pub rejected: Vec<crate::embedding::RejectedGraph>,
    pub attempts_used: Vec<(u64, usize)>,
}

/// Persisted register file, one per embedded graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterArtifact {
    pub graph_id: u64,
    pub r_b_um: f64,
    pub positions: Vec<[f64; 2]>,
}

impl RegisterArtifact {
    pub fn from_register(graph_id: u64, register: &Register) -> Self {
        RegisterArtifact {
            graph_id,
            r_b_um: register.blockade_radius_um,
            positions: register.positions.clone(),
        }
    }

    pub fn to_register(&self) -> Register {
        Register {
            positions: self.positions.clone(),
            blockade_radius_um: self.r_b_um,
        }
    }
}

/// Read every `<id>.json` register named by an embedding index directory.
pub fn read_register_dir(dir: &Path) -> Result<Vec<RegisterArtifact>> {
    let index_path = dir.join("index.json");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(index_path.display().to_string(), e))?;
    let index: EmbeddingIndex = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: index_path.display().to_string(),
        message: e.to_string(),
    })?;
    index
        .embedded_ids
        .iter()
        .map(|id| {
            let path = dir.join(format!("{id}.json"));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
            let artifact: RegisterArtifact = serde_json::from_str(&text).map_err(|e| Error::Schema {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            if artifact.graph_id != *id {
                return Err(Error::IdMismatch(format!(
                    "register file {}.json claims graph {}",
                    id, artifact.graph_id
                )));
            }
            Ok(artifact)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub graph_id: u64,
    pub e1: f64,
    pub e2: f64,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoBestArtifact {
    pub waveform: WaveformParams,
    pub objective: f64,
}

/// Evolve and measure every embedded graph. Sampling draws from the
/// per-graph `("emulate", id)` stream, so the shots of one graph never
/// depend on which other graphs are present or on the waveform searched.
pub fn emulate_corpus(
    embedded: &[(Graph, Register)],
    schedule: &PulseSchedule,
    physics: &PhysicsConfig,
    noise: &NoiseModel,
    n_shots: u64,
    seed: u64,
) -> Result<Vec<(u64, MeasurementSet)>> {
    embedded
        .par_iter()
        .map(|(g, register)| {
            let state = evolve(register, schedule, physics)?;
            let shot_seed = seeding::stream_seed(seed, "emulate", &[g.id]);
            let set = sample(&state, n_shots, shot_seed, noise)?;
            Ok((g.id, set))
        })
        .collect()
}

/// Shared binning and per-graph distributions for one measurement corpus.
pub fn distributions_of(
    measurements: &[(u64, MeasurementSet)],
    registers: &BTreeMap<u64, Register>,
    c6_over_hbar: f64,
) -> Result<(Binning, Vec<EnergyDistribution>)> {
    let samples: Vec<EnergySample> = measurements
        .iter()
        .map(|(id, set)| {
            let register = registers
                .get(id)
                .ok_or_else(|| Error::IdMismatch(format!("no register for graph {id}")))?;
            Ok(energy_sample(*id, set, register, c6_over_hbar))
        })
        .collect::<Result<_>>()?;
    let binning = global_binning(&samples)?;
    let distributions = samples
        .iter()
        .map(|s| to_distribution(s, &binning))
        .collect::<Result<Vec<_>>>()?;
    Ok((binning, distributions))
}

fn resolve_output_dir(config: &PipelineConfig) -> PathBuf {
    if let Some(dir) = &config.output_dir {
        return dir.clone();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("qek-runs"));
    let stem = config
        .dataset_name
        .clone()
        .or_else(|| config.dataset_dir.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "run".into());
    root.join(format!("{stem}-seed{}", config.seed))
}

fn write_artifact(dir: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_artifact(dir: &Path, rel: &str) -> Result<String> {
    let path = dir.join(rel);
    fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Run every stage, persisting artifacts as they complete. On a stage
/// error the manifest still records the finished stages and their
/// artifacts before the error is returned, named after the failing stage.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunManifest> {
    config.validate()?;
    let out_dir = resolve_output_dir(config);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut manifest = RunManifest::new(config);
    let started = Instant::now();
    let result = run_stages(config, &out_dir, &mut manifest);
    manifest.total_wall_ms = started.elapsed().as_millis() as u64;
    let wrote = manifest.write(&out_dir);
    result?;
    wrote?;
    Ok(manifest)
}

fn run_stages(config: &PipelineConfig, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let mut stage_start = Instant::now();
    let mut record = |manifest: &mut RunManifest, name: &str, artifacts: Vec<String>| {
        manifest.stages.push(StageRecord {
            name: name.into(),
            artifacts,
            wall_ms: stage_start.elapsed().as_millis() as u64,
        });
        stage_start = Instant::now();
    };

    // parse
    let name = match &config.dataset_name {
        Some(n) => n.clone(),
        None => detect_dataset_name(&config.dataset_dir).map_err(|e| e.in_stage("parse"))?,
    };
    let set = parse_tu_dataset(&config.dataset_dir, &name).map_err(|e| e.in_stage("parse"))?;
    write_artifact(out, "dataset.json", set.to_json().as_bytes()).map_err(|e| e.in_stage("parse"))?;
    record(manifest, "parse", vec!["dataset.json".into()]);

    // filter
    let filtered = filter_by_node_count(&set, config.max_nodes);
    if filtered.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no graph has <= {} nodes",
            config.max_nodes
        ))
        .in_stage("filter"));
    }
    write_artifact(out, "filtered.json", filtered.to_json().as_bytes()).map_err(|e| e.in_stage("filter"))?;
    record(manifest, "filter", vec!["filtered.json".into()]);

    // embed
    let constraints = RegisterConstraints::standard(config.physics.c6_over_hbar_rad_um6_per_us, config.omega_rad_per_us)
        .map_err(|e| e.in_stage("embed"))?;
    let embedded_set = embed_dataset_with(&filtered, &constraints, config.seed, config.embed_attempts)
        .map_err(|e| e.in_stage("embed"))?;
    if embedded_set.embedded.is_empty() {
        return Err(Error::EmptyInput("every graph was rejected by the embedder".into()).in_stage("embed"));
    }
    let index = EmbeddingIndex {
        embedded_ids: embedded_set.embedded.iter().map(|(g, _)| g.id).collect(),
        rejected: embedded_set.rejected.clone(),
        attempts_used: embedded_set.attempts_used.clone(),
    };
    let mut embed_artifacts = vec!["embeddings/index.json".into()];
    write_artifact(
        out,
        "embeddings/index.json",
        serde_json::to_string_pretty(&index).expect("index serializes").as_bytes(),
    )
    .map_err(|e| e.in_stage("embed"))?;
    for (g, register) in &embedded_set.embedded {
        let rel = format!("embeddings/{}.json", g.id);
        let artifact = RegisterArtifact::from_register(g.id, register);
        write_artifact(
            out,
            &rel,
            serde_json::to_string_pretty(&artifact).expect("register serializes").as_bytes(),
        )
        .map_err(|e| e.in_stage("embed"))?;
        embed_artifacts.push(rel);
    }
    record(manifest, "embed", embed_artifacts);

    let embedded = &embedded_set.embedded;
    let registers: BTreeMap<u64, Register> = embedded.iter().map(|(g, r)| (g.id, r.clone())).collect();
    let labels: Vec<u8> = embedded.iter().map(|(g, _)| g.label).collect();
    let c6 = config.physics.c6_over_hbar_rad_um6_per_us;

    // bo (optional)
    let waveform = match config.waveform {
        WaveformSpec::Explicit(p) => p,
        WaveformSpec::Optimize => {
            let bo_config = BoConfig {
                seed: seeding::stream_seed(config.seed, "bo", &[]),
                ..config.bo
            };
            let bo_grid = config.bo_grid.to_grid();
            let objective = |params: &WaveformParams| -> Result<f64> {
                let schedule = build_schedule(params, config.omega_rad_per_us)?;
                let measurements = emulate_corpus(embedded, &schedule, &config.physics, &config.noise, config.n_shots, config.seed)?;
                let (_, dists) = distributions_of(&measurements, &registers, c6)?;
                let kernel = qek_matrix(&dists, config.mu)?;
                let outcome = kfold_grid_search(&kernel, &labels, &bo_grid, config.cv_folds, config.seed)?;
                Ok(outcome.mean.f1)
            };
            let bo_result = bayesopt::optimize(objective, &bo_config).map_err(|e| e.in_stage("bo"))?;
            let mut trace_bytes = Vec::new();
            bayesopt::write_trace_csv(&bo_result.trace, &mut trace_bytes)
                .map_err(|e| Error::io("bo_trace.csv", e).in_stage("bo"))?;
            write_artifact(out, "bo_trace.csv", &trace_bytes).map_err(|e| e.in_stage("bo"))?;
            let best = BoBestArtifact {
                waveform: bo_result.best_params,
                objective: bo_result.best_value,
            };
            write_artifact(
                out,
                "bo_best.json",
                serde_json::to_string_pretty(&best).expect("artifact serializes").as_bytes(),
            )
            .map_err(|e| e.in_stage("bo"))?;
            record(manifest, "bo", vec!["bo_trace.csv".into(), "bo_best.json".into()]);
            bo_result.best_params
        }
    };

    // schedule
    let schedule = build_schedule(&waveform, config.omega_rad_per_us).map_err(|e| e.in_stage("schedule"))?;
    let schedule_artifact = ScheduleArtifact {
        waveform,
        omega_rad_per_us: config.omega_rad_per_us,
        schedule: schedule.clone(),
    };
    write_artifact(
        out,
        "schedule.json",
        serde_json::to_string_pretty(&schedule_artifact)
            .expect("schedule serializes")
            .as_bytes(),
    )
    .map_err(|e| e.in_stage("schedule"))?;
    record(manifest, "schedule", vec!["schedule.json".into()]);

    // emulate
    let measurements = emulate_corpus(embedded, &schedule, &config.physics, &config.noise, config.n_shots, config.seed)
        .map_err(|e| e.in_stage("emulate"))?;
    let mut emulate_artifacts = Vec::with_capacity(embedded.len() + 1);
    for (g, register) in embedded {
        let rel = format!("tasks/{}.json", g.id);
        let doc = emit_task_document(&schedule, register, config.n_shots).map_err(|e| e.in_stage("emulate"))?;
        write_artifact(out, &rel, doc.as_bytes()).map_err(|e| e.in_stage("emulate"))?;
        emulate_artifacts.push(rel);
    }
    let records: Vec<MeasurementRecord> = measurements
        .iter()
        .map(|(id, set)| MeasurementRecord::from_set(*id, set))
        .collect();
    let mut jsonl = Vec::new();
    write_measurements_jsonl(&records, &mut jsonl).map_err(|e| Error::io("measurements.jsonl", e).in_stage("emulate"))?;
    write_artifact(out, "measurements.jsonl", &jsonl).map_err(|e| e.in_stage("emulate"))?;
    emulate_artifacts.push("measurements.jsonl".into());
    record(manifest, "emulate", emulate_artifacts);

    // distributions
    let (binning, dists) = distributions_of(&measurements, &registers, c6).map_err(|e| e.in_stage("distributions"))?;
    let rows: Vec<DistributionRow> = dists
        .iter()
        .map(|d| DistributionRow {
            graph_id: d.graph_id,
            e1: binning.e1,
            e2: binning.e2,
            probabilities: d.probabilities.clone(),
        })
        .collect();
    write_artifact(
        out,
        "distributions.json",
        serde_json::to_string_pretty(&rows).expect("rows serialize").as_bytes(),
    )
    .map_err(|e| e.in_stage("distributions"))?;
    record(manifest, "distributions", vec!["distributions.json".into()]);

    // kernel
    let kernel = qek_matrix(&dists, config.mu).map_err(|e| e.in_stage("kernel"))?;
    let mut kernel_bytes = Vec::new();
    write_kernel_csv(&kernel, &mut kernel_bytes).map_err(|e| Error::io("kernel.csv", e).in_stage("kernel"))?;
    write_artifact(out, "kernel.csv", &kernel_bytes).map_err(|e| e.in_stage("kernel"))?;
    let label_pairs: Vec<(u64, u8)> = embedded.iter().map(|(g, _)| (g.id, g.label)).collect();
    let mut label_bytes = Vec::new();
    write_labels_csv(&label_pairs, &mut label_bytes).map_err(|e| Error::io("labels.csv", e).in_stage("kernel"))?;
    write_artifact(out, "labels.csv", &label_bytes).map_err(|e| e.in_stage("kernel"))?;
    record(manifest, "kernel", vec!["kernel.csv".into(), "labels.csv".into()]);

    // train
    let outcome = kfold_grid_search(&kernel, &labels, &config.grid.to_grid(), config.cv_folds, config.seed)
        .map_err(|e| e.in_stage("train"))?;
    write_artifact(
        out,
        "cv_results.json",
        serde_json::to_string_pretty(&outcome).expect("outcome serializes").as_bytes(),
    )
    .map_err(|e| e.in_stage("train"))?;
    record(manifest, "train", vec!["cv_results.json".into()]);

    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleRow {
    pub shots: u64,
    pub best: SvmHyperparams,
    pub mean: Metrics,
}

/// Re-run distributions -> kernel -> CV after drawing `k` shots per graph
/// without replacement, for each requested count. Binning is re-derived per
/// subsample unless `reuse_binning` pins the main run's support. Folds and
/// grid come from the run's config, so `k` equal to the full shot count
/// reproduces the main metrics exactly.
pub fn shot_subsample_analysis(
    run_dir: &Path,
    shot_counts: &[u64],
    seed: u64,
    reuse_binning: bool,
) -> Result<Vec<SubsampleRow>> {
    let manifest = RunManifest::load(run_dir)?;
    let config = &manifest.config;
    let records = read_measurements_jsonl(&run_dir.join("measurements.jsonl"))?;
    if records.is_empty() {
        return Err(Error::EmptyInput("run has no measurements".into()));
    }
    let mut registers = BTreeMap::new();
    let mut labels_by_id = BTreeMap::new();
    let filtered = GraphSet::from_json(&read_artifact(run_dir, "filtered.json")?, "filtered.json")?;
    for g in &filtered.graphs {
        labels_by_id.insert(g.id, g.label);
    }
    for r in &records {
        let text = read_artifact(run_dir, &format!("embeddings/{}.json", r.graph_id))?;
        let artifact: RegisterArtifact = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: format!("embeddings/{}.json", r.graph_id),
            message: e.to_string(),
        })?;
        registers.insert(r.graph_id, artifact.to_register());
    }
    let labels: Vec<u8> = records
        .iter()
        .map(|r| {
            labels_by_id
                .get(&r.graph_id)
                .copied()
                .ok_or_else(|| Error::IdMismatch(format!("graph {} not in filtered corpus", r.graph_id)))
        })
        .collect::<Result<_>>()?;

    let main_binning = if reuse_binning {
        let rows: Vec<DistributionRow> =
            serde_json::from_str(&read_artifact(run_dir, "distributions.json")?).map_err(|e| Error::Schema {
                path: "distributions.json".into(),
                message: e.to_string(),
            })?;
        let first = rows
            .first()
            .ok_or_else(|| Error::EmptyInput("distributions.json is empty".into()))?;
        Some(Binning::from_support(first.e1, first.e2)?)
    } else {
        None
    };

    let full_sets: Vec<(u64, MeasurementSet)> = records
        .iter()
        .map(|r| r.to_set("measurements.jsonl").map(|s| (r.graph_id, s)))
        .collect::<Result<_>>()?;

    let mut table = Vec::with_capacity(shot_counts.len());
    for &k in shot_counts {
        let mut subsampled = Vec::with_capacity(full_sets.len());
        for (id, set) in &full_sets {
            let kept = set.kept();
            if k > kept {
                return Err(Error::ShotCount {
                    graph_id: *id,
                    requested: k as usize,
                    kept: kept as usize,
                });
            }
            let mut order: Vec<usize> = (0..set.shots.len()).collect();
            let mut rng = ChaCha12Rng::seed_from_u64(seeding::stream_seed(seed, "subsample", &[k, *id]));
            let (chosen, _) = order.partial_shuffle(&mut rng, k as usize);
            let shots: Vec<u64> = chosen.iter().map(|&i| set.shots[i]).collect();
            subsampled.push((
                *id,
                MeasurementSet {
                    num_atoms: set.num_atoms,
                    requested: k,
                    shots,
                },
            ));
        }
        let c6 = config.physics.c6_over_hbar_rad_um6_per_us;
        let (binning, dists) = match &main_binning {
            Some(b) => {
                let samples: Vec<EnergySample> = subsampled
                    .iter()
                    .map(|(id, set)| energy_sample(*id, set, &registers[id], c6))
                    .collect();
                let dists = samples
                    .iter()
                    .map(|s| to_distribution(s, b))
                    .collect::<Result<Vec<_>>>()?;
                (b.clone(), dists)
            }
            None => distributions_of(&subsampled, &registers, c6)?,
        };
        let _ = binning;
        let kernel = qek_matrix(&dists, config.mu)?;
        let outcome = kfold_grid_search(&kernel, &labels, &config.grid.to_grid(), config.cv_folds, config.seed)?;
        table.push(SubsampleRow {
            shots: k,
            best: outcome.best,
            mean: outcome.mean,
        });
    }
    Ok(table)
}

pub fn write_subsample_csv<W: IoWrite>(rows: &[SubsampleRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "shots,f1,accuracy,precision,recall,best_C,best_w1")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.shots, r.mean.f1, r.mean.accuracy, r.mean.precision, r.mean.recall, r.best.c, r.best.weights.0
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelReportRow {
    pub name: String,
    /// None for the majority baseline, which has no hyperparameters.
    pub best: Option<SvmHyperparams>,
    pub mean: Metrics,
}

/// Grid-search every kernel over identical folds, plus a majority-class
/// baseline row. All kernels must cover the same graph ids in order.
pub fn compare_kernels(
    kernels: &[(String, KernelMatrix)],
    labels: &[u8],
    grid: &SearchGrid,
    cv_folds: usize,
    seed: u64,
) -> Result<Vec<KernelReportRow>> {
    let (first_name, first) = kernels
        .first()
        .ok_or_else(|| Error::EmptyInput("no kernels to compare".into()))?;
    if labels.len() != first.n() {
        return Err(Error::DimensionMismatch {
            expected: first.n(),
            got: labels.len(),
        });
    }
    for (name, k) in &kernels[1..] {
        if k.graph_ids != first.graph_ids {
            return Err(Error::IdMismatch(format!(
                "kernel {name} covers different graphs than {first_name}"
            )));
        }
    }
    let mut rows = Vec::with_capacity(kernels.len() + 1);
    for (name, kernel) in kernels {
        let outcome = kfold_grid_search(kernel, labels, grid, cv_folds, seed)?;
        rows.push(KernelReportRow {
            name: name.clone(),
            best: Some(outcome.best),
            mean: outcome.mean,
        });
    }
    let folds = stratified_folds(labels, cv_folds, seed)?;
    rows.push(KernelReportRow {
        name: "majority-baseline".into(),
        best: None,
        mean: majority_baseline(labels, &folds)?,
    });
    Ok(rows)
}

pub fn write_comparison_csv<W: IoWrite>(rows: &[KernelReportRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "kernel,f1,accuracy,precision,recall,best_C,best_w1")?;
    for r in rows {
        let (c, w1) = match &r.best {
            Some(hp) => (hp.c.to_string(), hp.weights.0.to_string()),
            None => (String::new(), String::new()),
        };
        writeln!(
            w,
            "{},{},{},{},{},{c},{w1}",
            r.name, r.mean.f1, r.mean.accuracy, r.mean.precision, r.mean.recall
        )?;
    }
    Ok(())
}

/// Matplotlib stub that renders the run's CSV artifacts; written next to
/// them by the reporting commands, never executed here.
pub fn plot_stub_script() -> &'static str {
    r#"#!/usr/bin/env python3
"""Render run artifacts (kernel heatmap, BO trace, shot-count table)."""
import csv
import pathlib
import sys

import matplotlib.pyplot as plt

run = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else ".")

kernel = run / "kernel.csv"
if kernel.exists():
    with kernel.open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(x) for x in row[1:]] for row in reader]
    plt.figure()
    plt.imshow(rows, cmap="viridis", vmin=0.0, vmax=1.0)
    plt.colorbar(label="kernel value")
    plt.title("QEK Gram matrix")
    plt.savefig(run / "kernel.png", dpi=150)

trace = run / "bo_trace.csv"
if trace.exists():
    with trace.open() as fh:
        reader = csv.DictReader(fh)
        iters, incumbent = [], []
        for row in reader:
            iters.append(int(row["iter"]))
            incumbent.append(float(row["incumbent"]))
    plt.figure()
    plt.plot(iters, incumbent, marker="o")
    plt.xlabel("iteration")
    plt.ylabel("best mean F1")
    plt.savefig(run / "bo_trace.png", dpi=150)

shots = run / "analysis_shots.csv"
if shots.exists():
    with shots.open() as fh:
        reader = csv.DictReader(fh)
        ks, f1s = [], []
        for row in reader:
            ks.append(int(row["shots"]))
            f1s.append(float(row["f1"]))
    plt.figure()
    plt.semilogx(ks, f1s, marker="s")
    plt.xlabel("shots per graph")
    plt.ylabel("mean F1")
    plt.savefig(run / "shots.png", dpi=150)

print("wrote figures into", run)
"#
}

/// Load the manifest and re-validate every artifact it references.
pub fn validate_run_dir(run_dir: &Path) -> Result<RunManifest> {
    let manifest = RunManifest::load(run_dir)?;
    for stage in &manifest.stages {
        for rel in &stage.artifacts {
            let path = run_dir.join(rel);
            if !path.is_file() {
                return Err(Error::Schema {
                    path: path.display().to_string(),
                    message: format!("artifact of stage {} is missing", stage.name),
                });
            }
        }
    }

    GraphSet::from_json(&read_artifact(run_dir, "dataset.json")?, "dataset.json")?;
    let filtered = GraphSet::from_json(&read_artifact(run_dir, "filtered.json")?, "filtered.json")?;

    let index: EmbeddingIndex =
        serde_json::from_str(&read_artifact(run_dir, "embeddings/index.json")?).map_err(|e| Error::Schema {
            path: "embeddings/index.json".into(),
            message: e.to_string(),
        })?;
    for id in &index.embedded_ids {
        if !filtered.graphs.iter().any(|g| g.id == *id) {
            return Err(Error::IdMismatch(format!("embedded graph {id} not in filtered corpus")));
        }
        let artifact: RegisterArtifact =
            serde_json::from_str(&read_artifact(run_dir, &format!("embeddings/{id}.json"))?).map_err(|e| {
                Error::Schema {
                    path: format!("embeddings/{id}.json"),
                    message: e.to_string(),
                }
            })?;
        if artifact.graph_id != *id
            || artifact.positions.iter().flatten().any(|v| !v.is_finite())
            || artifact.r_b_um <= 0.0
        {
            return Err(Error::Schema {
                path: format!("embeddings/{id}.json"),
                message: "register has a wrong id, non-finite positions, or a bad radius".into(),
            });
        }
    }

    let schedule: ScheduleArtifact =
        serde_json::from_str(&read_artifact(run_dir, "schedule.json")?).map_err(|e| Error::Schema {
            path: "schedule.json".into(),
            message: e.to_string(),
        })?;
    if schedule.schedule.segments.iter().any(|s| s.duration_us < 0.0) {
        return Err(Error::Schema {
            path: "schedule.json".into(),
            message: "negative segment duration".into(),
        });
    }

    let records = read_measurements_jsonl(&run_dir.join("measurements.jsonl"))?;
    for r in &records {
        let set = r.to_set("measurements.jsonl")?;
        if set.kept() > r.requested {
            return Err(Error::Schema {
                path: "measurements.jsonl".into(),
                message: format!("graph {} kept more shots than requested", r.graph_id),
            });
        }
        parse_task_document(&read_artifact(run_dir, &format!("tasks/{}.json", r.graph_id))?)?;
    }

    let rows: Vec<DistributionRow> =
        serde_json::from_str(&read_artifact(run_dir, "distributions.json")?).map_err(|e| Error::Schema {
            path: "distributions.json".into(),
            message: e.to_string(),
        })?;
    for row in &rows {
        if row.probabilities.len() != NUM_BINS {
            return Err(Error::Schema {
                path: "distributions.json".into(),
                message: format!("graph {} has {} bins", row.graph_id, row.probabilities.len()),
            });
        }
        let sum: f64 = row.probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::NotNormalized { sum });
        }
        if row.e2 < row.e1 {
            return Err(Error::Schema {
                path: "distributions.json".into(),
                message: format!("graph {} support is inverted", row.graph_id),
            });
        }
    }

    let kernel_text = read_artifact(run_dir, "kernel.csv")?;
    let kernel = read_kernel_csv(
        BufReader::new(kernel_text.as_bytes()),
        KernelKind::Qek { mu: manifest.config.mu },
        "kernel.csv",
    )?;
    kernel.check_symmetric(1e-12)?;
    let label_pairs = read_labels_csv(&run_dir.join("labels.csv"))?;
    if label_pairs.iter().map(|(id, _)| *id).collect::<Vec<_>>() != kernel.graph_ids {
        return Err(Error::IdMismatch("labels.csv ids disagree with kernel.csv".into()));
    }

    let _: GridSearchOutcome =
        serde_json::from_str(&read_artifact(run_dir, "cv_results.json")?).map_err(|e| Error::Schema {
            path: "cv_results.json".into(),
            message: e.to_string(),
        })?;

    if manifest.stage("bo").is_some() {
        let _: BoBestArtifact =
            serde_json::from_str(&read_artifact(run_dir, "bo_best.json")?).map_err(|e| Error::Schema {
                path: "bo_best.json".into(),
                message: e.to_string(),
            })?;
        let trace = read_artifact(run_dir, "bo_trace.csv")?;
        if trace.lines().next() != Some("iter,tau0,t0,tau1,t1,tau2,f1_mean,incumbent") {
            return Err(Error::Schema {
                path: "bo_trace.csv".into(),
                message: "unexpected trace header".into(),
            });
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waveform_spec_parses_both_shapes() {
        #[derive(Deserialize)]
        struct Holder {
            waveform: WaveformSpec,
        }
        let explicit: Holder =
            toml::from_str("waveform = { tau0 = 50.0, t0 = 60.0, tau1 = 70.0, t1 = 80.0, tau2 = 90.0 }").unwrap();
        assert_eq!(
            explicit.waveform,
            WaveformSpec::Explicit(WaveformParams::new(50.0, 60.0, 70.0, 80.0, 90.0).unwrap())
        );
        let optimize: Holder = toml::from_str("waveform = \"optimize\"").unwrap();
        assert_eq!(optimize.waveform, WaveformSpec::Optimize);
        assert!(toml::from_str::<Holder>("waveform = \"maximize\"").is_err());
    }

    #[test]
    fn config_defaults_fill_in() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "dataset_dir = {:?}\nwaveform = \"optimize\"\n",
            dir.path().to_str().unwrap()
        );
        let config: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(config.max_nodes, 10);
        assert_eq!(config.n_shots, 1000);
        assert_eq!(config.mu, 1.0);
        assert_eq!(config.cv_folds, 10);
        assert_eq!(config.grid, GridChoice::Paper);
        assert_eq!(config.bo_grid, GridChoice::Coarse);
        assert_eq!(config.omega_rad_per_us, OMEGA_MAX_RAD_PER_US);
        assert!(config.validate().is_ok());

        // Unknown keys are rejected, catching config typos.
        assert!(toml::from_str::<PipelineConfig>(&format!("{text}shots = 5\n")).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let base = PipelineConfig {
            dataset_dir: dir.path().to_path_buf(),
            dataset_name: None,
            max_nodes: 10,
            waveform: WaveformSpec::Explicit(WaveformParams::new(50.0, 60.0, 70.0, 80.0, 90.0).unwrap()),
            omega_rad_per_us: OMEGA_MAX_RAD_PER_US,
            physics: PhysicsConfig::default(),
            noise: NoiseModel::default(),
            n_shots: 100,
            mu: 1.0,
            cv_folds: 5,
            grid: GridChoice::Coarse,
            bo_grid: GridChoice::Coarse,
            bo: BoConfig::default(),
            embed_attempts: 5,
            seed: 1,
            output_dir: None,
        };
        assert!(base.validate().is_ok());
        assert!(PipelineConfig { mu: 0.0, ..base.clone() }.validate().is_err());
        assert!(PipelineConfig { cv_folds: 1, ..base.clone() }.validate().is_err());
        assert!(PipelineConfig { n_shots: 0, ..base.clone() }.validate().is_err());
        assert!(PipelineConfig {
            dataset_dir: dir.path().join("missing"),
            ..base.clone()
        }
        .validate()
        .is_err());
        assert!(PipelineConfig {
            waveform: WaveformSpec::Explicit(WaveformParams {
                tau0: 400.0,
                t0: 400.0,
                tau1: 50.0,
                t1: 50.0,
                tau2: 50.0,
            }),
            ..base
        }
        .validate()
        .is_err());
    }

    #[test]
    fn measurement_records_round_trip() {
        let set = MeasurementSet {
            num_atoms: 3,
            requested: 5,
            shots: vec![0b000, 0b101, 0b011],
        };
        let record = MeasurementRecord::from_set(7, &set);
        assert_eq!(record.kept, 3);
        assert_eq!(record.shots, vec!["000", "101", "110"]);
        let back = record.to_set("test").unwrap();
        assert_eq!(back, set);

        let mut jsonl = Vec::new();
        write_measurements_jsonl(&[record.clone()], &mut jsonl).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, &jsonl).unwrap();
        assert_eq!(read_measurements_jsonl(&path).unwrap(), vec![record.clone()]);

        let bad = MeasurementRecord { kept: 2, ..record };
        assert!(bad.to_set("test").is_err());
    }

    #[test]
    fn labels_csv_round_trips() {
        let pairs = vec![(3u64, 1u8), (9, 2), (11, 1)];
        let mut bytes = Vec::new();
        write_labels_csv(&pairs, &mut bytes).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        fs::write(&path, &bytes).unwrap();
        assert_eq!(read_labels_csv(&path).unwrap(), pairs);
        fs::write(&path, "id,label\n1,1\n").unwrap();
        assert!(read_labels_csv(&path).is_err());
    }

    #[test]
    fn output_dir_resolution_prefers_explicit_then_env() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = PipelineConfig {
            dataset_dir: dir.path().to_path_buf(),
            dataset_name: Some("TOY".into()),
            max_nodes: 10,
            waveform: WaveformSpec::Optimize,
            omega_rad_per_us: OMEGA_MAX_RAD_PER_US,
            physics: PhysicsConfig::default(),
            noise: NoiseModel::default(),
            n_shots: 10,
            mu: 1.0,
            cv_folds: 2,
            grid: GridChoice::Coarse,
            bo_grid: GridChoice::Coarse,
            bo: BoConfig::default(),
            embed_attempts: 1,
            seed: 3,
            output_dir: Some(PathBuf::from("/tmp/explicit")),
        };
        assert_eq!(resolve_output_dir(&config), PathBuf::from("/tmp/explicit"));
        config.output_dir = None;
        // Without the env var the default root is used.
        if std::env::var_os(OUTPUT_ROOT_ENV).is_none() {
            assert_eq!(resolve_output_dir(&config), PathBuf::from("qek-runs").join("TOY-seed3"));
        }
    }
}
