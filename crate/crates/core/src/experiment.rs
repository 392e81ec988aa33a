//! Declarative experiment files and the runners behind the `cgt` binary.
//!
//! A config is a TOML document; `configs/SCHEMA.md` lists every key and its
//! default. Each run writes `<prefix>.csv` (one row per iterate) and
//! `<prefix>.meta`, a TOML file holding the resolved config, the mixing
//! pair and the stop reason. A `.meta` file is itself a valid input to
//! [`load_config`] and reproduces the run byte for byte.

use std::env;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algo::{self, AlgoConfig, AlgoError, Algorithm, Batch, ClipThreshold, MinibatchTracking, NetworkState, StopReason};
use crate::data::{self, DataError, PartitionRule, Shard, A9A_SAMPLES};
use crate::graph::{self, GraphError, GraphSpec, Matrix, MixingPair, ValidationReport, Vector};
use crate::metrics::{self, CsvRecorder, Recorder, TrajectoryRecord, VecRecorder};
use crate::objective::{self, DissimilarityEstimate, LocalObjective, LossConvention, ObjectiveError, SmoothnessEstimate};
use crate::rng::{self, stream};

/// Redirects every output prefix into this directory (file names kept).
pub const OUTPUT_DIR_ENV: &str = "CGT_OUTPUT_DIR";
/// Base directory for relative data paths, instead of the config's directory.
pub const DATA_DIR_ENV: &str = "CGT_DATA_DIR";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl ExperimentError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config { .. } => 2,
            ExperimentError::Io { .. } => 3,
            ExperimentError::Numerical(_) => 4,
        }
    }

    fn config(path: impl Into<String>, msg: impl fmt::Display) -> Self {
        ExperimentError::Config {
            path: path.into(),
            msg: msg.to_string(),
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn graph_err(e: GraphError) -> ExperimentError {
    match e {
        GraphError::NoConvergence { .. } => ExperimentError::Numerical(e.to_string()),
        other => ExperimentError::config("graph", other),
    }
}

fn algo_err(e: AlgoError) -> ExperimentError {
    match e {
        AlgoError::Config(m) => ExperimentError::config("algorithm", m),
        AlgoError::Shape(m) => ExperimentError::config("objective", m),
        AlgoError::Recorder(source) => ExperimentError::Io {
            path: PathBuf::from("<trajectory>"),
            source,
        },
        other => ExperimentError::Numerical(other.to_string()),
    }
}

/// A scalar shared by all agents or one value per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerAgent<T> {
    One(T),
    Each(Vec<T>),
}

impl<T: Clone> PerAgent<T> {
    fn expand(&self, n: usize, path: &str) -> Result<Vec<T>, ExperimentError> {
        match self {
            PerAgent::One(v) => Ok(vec![v.clone(); n]),
            PerAgent::Each(v) if v.len() == n => Ok(v.clone()),
            PerAgent::Each(v) => Err(ExperimentError::config(
                path,
                format!("expected {n} entries (graph.n_agents), found {}", v.len()),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    LogisticLq,
    PowerNorm,
    Quadratic,
}

/// One agent's objective. `quadratic` is `curvature/2 ||theta - center||^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgentObjective {
    LogisticLq {
        lambda: f64,
        p: f64,
    },
    PowerNorm {
        lambda: f64,
        p: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
    },
    Quadratic {
        curvature: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
    },
    CustomComposite {
        parts: Vec<AgentObjective>,
    },
}

impl AgentObjective {
    fn needs_data(&self) -> bool {
        match self {
            AgentObjective::LogisticLq { .. } => true,
            AgentObjective::CustomComposite { parts } => parts.iter().any(Self::needs_data),
            _ => false,
        }
    }

    fn center_len(&self) -> Option<usize> {
        match self {
            AgentObjective::PowerNorm { center, .. } | AgentObjective::Quadratic { center, .. } => {
                center.as_ref().map(Vec::len)
            }
            AgentObjective::CustomComposite { parts } => parts.iter().find_map(Self::center_len),
            AgentObjective::LogisticLq { .. } => None,
        }
    }

    fn build(
        &self,
        dim: usize,
        shard: Option<&Arc<Shard>>,
        convention: LossConvention,
        path: &str,
    ) -> Result<LocalObjective, ExperimentError> {
        let wrap = |e: ObjectiveError| ExperimentError::config(path, e);
        let center_vec = |c: &Option<Vec<f64>>| -> Result<Option<Vector>, ExperimentError> {
            match c {
                Some(c) if c.len() != dim => Err(ExperimentError::config(
                    format!("{path}.center"),
                    format!("expected {dim} coordinates, found {}", c.len()),
                )),
                Some(c) => Ok(Some(Vector::from(c.clone()))),
                None => Ok(None),
            }
        };
        match self {
            AgentObjective::LogisticLq { lambda, p } => {
                let shard = shard.ok_or_else(|| ExperimentError::config("data", "logistic_lq needs a [data] section"))?;
                LocalObjective::logistic_lq_with(shard.clone(), *lambda, *p, convention).map_err(wrap)
            }
            AgentObjective::PowerNorm { lambda, p, center } => {
                LocalObjective::power_norm(dim, *lambda, *p, center_vec(center)?).map_err(wrap)
            }
            AgentObjective::Quadratic { curvature, center } => {
                if !(curvature.is_finite() && *curvature >= 0.0) {
                    return Err(ExperimentError::config(
                        format!("{path}.curvature"),
                        format!("must be finite and >= 0, got {curvature}"),
                    ));
                }
                let c = center_vec(center)?.unwrap_or_else(|| Vector::zeros(dim));
                let a = Matrix::eye(dim) * *curvature;
                let b = &c * -*curvature;
                let k = 0.5 * curvature * c.dot(&c);
                LocalObjective::quadratic(a, b, k).map_err(wrap)
            }
            AgentObjective::CustomComposite { parts } => {
                let built = parts
                    .iter()
                    .enumerate()
                    .map(|(j, p)| p.build(dim, shard, convention, &format!("{path}.parts[{j}]")))
                    .collect::<Result<Vec<_>, _>>()?;
                LocalObjective::composite(dim, built).map_err(wrap)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ObjectiveKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<PerAgent<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<PerAgent<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curvature: Option<PerAgent<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<PerAgent<Vec<f64>>>,
    /// Parameter dimension for objectives without data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default)]
    pub convention: LossConvention,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agents: Option<Vec<AgentObjective>>,
}

impl ObjectiveSection {
    /// Per-agent declarations, either listed under `agents` or expanded
    /// from the section-wide `kind`.
    pub fn agent_objectives(&self, n: usize) -> Result<Vec<AgentObjective>, ExperimentError> {
        if let Some(agents) = &self.agents {
            if self.kind.is_some() || self.lambda.is_some() || self.p.is_some() || self.curvature.is_some() || self.center.is_some() {
                return Err(ExperimentError::config(
                    "objective.agents",
                    "cannot be combined with section-wide kind/lambda/p/curvature/center",
                ));
            }
            if agents.len() != n {
                return Err(ExperimentError::config(
                    "objective.agents",
                    format!("expected {n} entries (graph.n_agents), found {}", agents.len()),
                ));
            }
            return Ok(agents.clone());
        }
        let kind = self
            .kind
            .ok_or_else(|| ExperimentError::config("objective.kind", "missing (or give objective.agents)"))?;
        let need = |v: &Option<PerAgent<f64>>, name: &str| -> Result<Vec<f64>, ExperimentError> {
            let path = format!("objective.{name}");
            v.as_ref()
                .ok_or_else(|| ExperimentError::config(&path, "missing"))?
                .expand(n, &path)
        };
        let centers: Vec<Option<Vec<f64>>> = match &self.center {
            None => vec![None; n],
            Some(c) => c.expand(n, "objective.center")?.into_iter().map(Some).collect(),
        };
        Ok(match kind {
            ObjectiveKind::LogisticLq => need(&self.lambda, "lambda")?
                .into_iter()
                .zip(need(&self.p, "p")?)
                .map(|(lambda, p)| AgentObjective::LogisticLq { lambda, p })
                .collect(),
            ObjectiveKind::PowerNorm => need(&self.lambda, "lambda")?
                .into_iter()
                .zip(need(&self.p, "p")?)
                .zip(centers)
                .map(|((lambda, p), center)| AgentObjective::PowerNorm { lambda, p, center })
                .collect(),
            ObjectiveKind::Quadratic => need(&self.curvature, "curvature")?
                .into_iter()
                .zip(centers)
                .map(|(curvature, center)| AgentObjective::Quadratic { curvature, center })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    #[serde(default = "default_synthetic_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_synthetic_samples() -> usize {
    A9A_SAMPLES
}

/// Where samples come from. When `path` is given and exists it wins; a
/// missing `path` falls back to `synthetic` if present and is an error
/// otherwise.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default)]
    pub partition: PartitionRule,
    #[serde(default)]
    pub shuffle: bool,
    /// Rescale every feature to max |value| = 1.
    #[serde(default)]
    pub scale: bool,
}

fn default_c0_inf() -> ClipThreshold {
    ClipThreshold::Infinite
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSection {
    pub name: Algorithm,
    pub alpha: f64,
    #[serde(default = "default_c0_inf")]
    pub c0: ClipThreshold,
    pub max_iters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_tol: Option<f64>,
    /// Minibatch size per agent; full batch when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub minibatch_tracking: MinibatchTracking,
}

impl AlgorithmSection {
    /// Minibatches are drawn from the run seed.
    pub fn to_algo_config(&self, run_seed: u64) -> AlgoConfig {
        AlgoConfig {
            algorithm: self.name,
            alpha: self.alpha,
            c0: self.c0,
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            batch: match self.batch_size {
                None => Batch::Full,
                Some(size) => Batch::Minibatch {
                    size,
                    seed: run_seed,
                    tracking: self.minibatch_tracking,
                },
            },
        }
    }
}

fn default_repeat() -> usize {
    1
}

fn default_output() -> String {
    "cgt_run".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repeat")]
    pub repeat: usize,
    /// Standard deviation of the initial iterates; 0 starts every agent at the origin.
    #[serde(default)]
    pub init_scale: f64,
    #[serde(default = "default_output")]
    pub output: String,
    #[serde(default)]
    pub record_local_loss: bool,
    pub graph: GraphSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    pub objective: ObjectiveSection,
    pub algorithm: AlgorithmSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::config("<file>", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.repeat == 0 {
            return Err(ExperimentError::config("repeat", "must be >= 1"));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(ExperimentError::config("init_scale", format!("must be finite and >= 0, got {}", self.init_scale)));
        }
        if self.graph.n_agents == 0 {
            return Err(ExperimentError::config("graph.n_agents", "must be positive"));
        }
        self.algorithm.to_algo_config(self.seed).validate().map_err(algo_err)?;
        self.objective.agent_objectives(self.graph.n_agents)?;
        Ok(())
    }

    pub fn run_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(r as u64)
    }
}

/// Contents of a `.meta` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub stop_reason: String,
    pub iterations: usize,
    pub data_source: String,
    pub mixing_pair: String,
    /// Config that reproduces exactly this run (`repeat = 1`, run seed).
    pub config: ExperimentConfig,
}

/// Parses a config or a `.meta` file. Relative data paths are resolved
/// against the file's directory (or `CGT_DATA_DIR`).
pub fn load_config(path: &Path) -> Result<(ExperimentConfig, PathBuf), ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ExperimentError::config(path.display().to_string(), e.message()))?;
    let cfg = if table.contains_key("mixing_pair") {
        let meta: RunMeta =
            toml::from_str(&text).map_err(|e| ExperimentError::config(path.display().to_string(), e.message()))?;
        meta.config.validate()?;
        let rebuilt = graph::build_mixing_pair(&meta.config.graph).map_err(graph_err)?;
        if rebuilt.to_text() != meta.mixing_pair {
            return Err(ExperimentError::config("mixing_pair", "does not match the graph section"));
        }
        meta.config
    } else {
        ExperimentConfig::from_toml(&text).map_err(|e| match e {
            ExperimentError::Config { path: p, msg } if p == "<file>" => {
                ExperimentError::config(path.display().to_string(), msg)
            }
            other => other,
        })?
    };
    Ok((cfg, base))
}

/// Everything needed to run one config: graph, objectives, resolved data.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub mixing: MixingPair,
    pub objectives: Vec<LocalObjective>,
    pub dim: usize,
    pub data_source: String,
}

fn resolve_data_path(p: &Path, base_dir: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    let base = env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| base_dir.to_path_buf());
    let joined = base.join(p);
    fs::canonicalize(&joined).unwrap_or(joined)
}

fn load_shards(
    section: &DataSection,
    n: usize,
    seed: u64,
    base_dir: &Path,
) -> Result<(Vec<Arc<Shard>>, usize, String, DataSection), ExperimentError> {
    let mut resolved = section.clone();
    let data_err = |e: DataError| match e {
        DataError::Io(source) => ExperimentError::Io {
            path: section.path.clone().unwrap_or_default(),
            source,
        },
        other => ExperimentError::config("data", other),
    };
    let (mut dataset, source) = match (&section.path, &section.synthetic) {
        (Some(p), synth) => {
            let full = resolve_data_path(p, base_dir);
            resolved.path = Some(full.clone());
            if full.exists() {
                (data::load_libsvm(&full, section.dim).map_err(data_err)?, format!("libsvm:{}", full.display()))
            } else if let Some(s) = synth {
                (
                    data::synthetic_a9a_like(s.n_samples, s.seed),
                    format!("synthetic_a9a_like(n_samples={}, seed={}); {} not found", s.n_samples, s.seed, full.display()),
                )
            } else {
                return Err(ExperimentError::config("data.path", format!("{} does not exist", full.display())));
            }
        }
        (None, Some(s)) => (
            data::synthetic_a9a_like(s.n_samples, s.seed),
            format!("synthetic_a9a_like(n_samples={}, seed={})", s.n_samples, s.seed),
        ),
        (None, None) => return Err(ExperimentError::config("data", "needs `path` or `synthetic`")),
    };
    if let Some(d) = section.dim {
        if d < dataset.dim {
            return Err(ExperimentError::config("data.dim", format!("{d} is below the data dimension {}", dataset.dim)));
        }
        dataset.dim = d;
    }
    if section.scale {
        data::scale_max_abs(&mut dataset.samples, dataset.dim);
    }
    let shards = data::partition(&dataset.samples, dataset.dim, n, section.partition, section.shuffle, seed)
        .map_err(data_err)?;
    Ok((shards.into_iter().map(Arc::new).collect(), dataset.dim, source, resolved))
}

/// Builds graph, data shards and objectives for `cfg`.
pub fn prepare(cfg: &ExperimentConfig, base_dir: &Path) -> Result<Prepared, ExperimentError> {
    cfg.validate()?;
    let n = cfg.graph.n_agents;
    let mixing = graph::build_mixing_pair(&cfg.graph).map_err(graph_err)?;
    let agents = cfg.objective.agent_objectives(n)?;
    let mut config = cfg.clone();

    let needs_data = agents.iter().any(AgentObjective::needs_data);
    let (shards, data_dim, data_source) = match (&cfg.data, needs_data) {
        (Some(section), true) => {
            let (shards, dim, source, resolved) = load_shards(section, n, cfg.seed, base_dir)?;
            config.data = Some(resolved);
            (Some(shards), Some(dim), source)
        }
        (None, true) => return Err(ExperimentError::config("data", "logistic_lq needs a [data] section")),
        (_, false) => (None, None, "none".to_string()),
    };
    let dim = match (data_dim, cfg.objective.dim) {
        (Some(d), Some(o)) if d != o => {
            return Err(ExperimentError::config("objective.dim", format!("{o} disagrees with the data dimension {d}")))
        }
        (Some(d), _) | (None, Some(d)) => d,
        (None, None) => agents
            .iter()
            .find_map(AgentObjective::center_len)
            .ok_or_else(|| ExperimentError::config("objective.dim", "missing and not implied by data or centers"))?,
    };
    if dim == 0 {
        return Err(ExperimentError::config("objective.dim", "must be positive"));
    }
    let objectives = agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let shard = shards.as_ref().map(|s| &s[i]);
            a.build(dim, shard, cfg.objective.convention, &format!("objective.agents[{i}]"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Prepared {
        config,
        mixing,
        objectives,
        dim,
        data_source,
    })
}

/// `x^0`: zeros, or seeded standard normal entries times `init_scale`.
pub fn initial_iterates(n: usize, dim: usize, init_scale: f64, run_seed: u64) -> Matrix {
    if init_scale == 0.0 {
        return Matrix::zeros((n, dim));
    }
    let mut rng = rng::seeded(run_seed, stream::INIT);
    let mut x = Matrix::zeros((n, dim));
    for v in x.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = init_scale * z;
    }
    x
}

struct Tee<'a> {
    csv: CsvRecorder<Vec<u8>>,
    mem: &'a mut VecRecorder,
}

impl Recorder for Tee<'_> {
    fn record(&mut self, rec: &TrajectoryRecord) -> io::Result<()> {
        self.csv.record(rec)?;
        self.mem.record(rec)
    }

    fn wants_local_loss(&self) -> bool {
        self.csv.wants_local_loss()
    }
}

/// In-memory result of one run.
pub struct RunArtifacts {
    pub prefix: PathBuf,
    pub csv: String,
    pub meta: String,
    pub records: Vec<TrajectoryRecord>,
    pub stop: StopReason,
    pub iterations: usize,
    pub final_state: NetworkState,
    pub algorithm: Algorithm,
}

impl RunArtifacts {
    pub fn write(&self) -> Result<(), ExperimentError> {
        if let Some(dir) = self.prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
        }
        for (ext, body) in [("csv", &self.csv), ("meta", &self.meta)] {
            let p = with_suffix(&self.prefix, ext);
            fs::write(&p, body).map_err(|e| ExperimentError::io(&p, e))?;
        }
        Ok(())
    }

    pub fn csv_path(&self) -> PathBuf {
        with_suffix(&self.prefix, "csv")
    }
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Applies the `CGT_OUTPUT_DIR` override to a prefix.
pub fn resolve_prefix(prefix: &str) -> PathBuf {
    match env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
        Some(dir) => Path::new(&dir).join(Path::new(prefix).file_name().unwrap_or_default()),
        None => PathBuf::from(prefix),
    }
}

/// Runs repeat `r` of a prepared config entirely in memory.
pub fn execute(prep: &Prepared, r: usize) -> Result<RunArtifacts, ExperimentError> {
    let cfg = &prep.config;
    let seed = cfg.run_seed(r);
    let algo_cfg = cfg.algorithm.to_algo_config(seed);
    let x0 = initial_iterates(cfg.graph.n_agents, prep.dim, cfg.init_scale, seed);
    let prefix = if cfg.repeat > 1 {
        format!("{}_r{r}", cfg.output)
    } else {
        cfg.output.clone()
    };

    let mut mem = VecRecorder::default();
    let mut tee = Tee {
        csv: CsvRecorder::new(Vec::new(), cfg.record_local_loss).map_err(|e| ExperimentError::io(Path::new(&prefix), e))?,
        mem: &mut mem,
    };
    let result = algo::run(x0, &prep.mixing, &prep.objectives, &algo_cfg, &mut tee).map_err(algo_err)?;
    let csv = String::from_utf8(tee.csv.into_inner()).expect("csv is ascii");

    let mut single = cfg.clone();
    single.seed = seed;
    single.repeat = 1;
    single.output = prefix.clone();
    let meta = RunMeta {
        stop_reason: result.stop.to_string(),
        iterations: result.iterations,
        data_source: prep.data_source.clone(),
        mixing_pair: prep.mixing.to_text(),
        config: single,
    };
    Ok(RunArtifacts {
        prefix: resolve_prefix(&prefix),
        csv,
        meta: toml::to_string(&meta).expect("meta is serializable"),
        records: mem.records,
        stop: result.stop,
        iterations: result.iterations,
        final_state: result.state,
        algorithm: cfg.algorithm.name,
    })
}

/// Runs every repeat of `cfg` and writes the files.
pub fn cmd_run(cfg: &ExperimentConfig, base_dir: &Path) -> Result<Vec<RunArtifacts>, ExperimentError> {
    let prep = prepare(cfg, base_dir)?;
    (0..cfg.repeat)
        .map(|r| {
            let art = execute(&prep, r)?;
            art.write()?;
            Ok(art)
        })
        .collect()
}

/// Runs `f` on a dedicated pool with `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}

/// Validation report, and the pair itself when the spec is accepted.
pub struct GraphReport {
    pub spec: GraphSpec,
    pub validation: Option<ValidationReport>,
    pub pair: Result<MixingPair, GraphError>,
}

pub fn graph_report(spec: &GraphSpec) -> GraphReport {
    let validation = graph::mixing_matrices(spec)
        .ok()
        .map(|(r, c)| graph::validate_mixing(&r, &c));
    GraphReport {
        spec: spec.clone(),
        validation,
        pair: graph::build_mixing_pair(spec),
    }
}

fn fmt_vec(v: &Vector) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ")
}

impl fmt::Display for GraphReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "graph: {:?}, N={}", self.spec.kind, self.spec.n_agents)?;
        if let Some(v) = &self.validation {
            write!(f, "{v}")?;
        }
        match &self.pair {
            Ok(p) => {
                writeln!(f, "R:")?;
                for row in p.r().rows() {
                    writeln!(f, "  {}", fmt_vec(&row.to_owned()))?;
                }
                writeln!(f, "C:")?;
                for row in p.c().rows() {
                    writeln!(f, "  {}", fmt_vec(&row.to_owned()))?;
                }
                writeln!(f, "u: {}", fmt_vec(p.u()))?;
                writeln!(f, "v: {}", fmt_vec(p.v()))?;
                writeln!(f, "u^T v: {:.6}", p.u().dot(p.v()))?;
                writeln!(f, "rho_R: {:.12}", p.rho_r())?;
                writeln!(f, "rho_C: {:.12}", p.rho_c())
            }
            Err(e) => writeln!(f, "rejected: {e}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSettings {
    pub radius: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// The `c` of the `A`, `B` constants.
    pub c: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            radius: 1.0,
            n_samples: 200,
            seed: 0,
            c: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub per_agent: Vec<SmoothnessEstimate>,
    pub dissimilarity: DissimilarityEstimate,
    pub global_l0: f64,
    pub global_l1: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Largest `||grad F||` seen at the probe points.
    pub g_hat: f64,
    /// `A L0 + B L1 G_hat`.
    pub l_hat: f64,
    pub stepsize_bound: f64,
    pub alpha: f64,
}

impl fmt::Display for ProbeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "agent  L0_hat        L1_hat        samples")?;
        for (i, e) in self.per_agent.iter().enumerate() {
            let flag = if e.degenerate { " (degenerate)" } else { "" };
            writeln!(f, "{:<6} {:<13.6e} {:<13.6e} {}{flag}", i + 1, e.l0_hat, e.l1_hat, e.n_samples)?;
        }
        writeln!(f, "ell_hat: {:.6e}", self.dissimilarity.ell_hat)?;
        writeln!(f, "b_hat: {:.6e}", self.dissimilarity.b_hat)?;
        writeln!(f, "global L0: {:.6e}", self.global_l0)?;
        writeln!(f, "global L1: {:.6e}", self.global_l1)?;
        writeln!(f, "A, B at c={}: {:.6}, {:.6}", self.c, self.a, self.b)?;
        writeln!(f, "G_hat: {:.6e}", self.g_hat)?;
        writeln!(f, "L_hat: {:.6e}", self.l_hat)?;
        writeln!(f, "stepsize bound: {:.6e} (configured alpha {})", self.stepsize_bound, self.alpha)
    }
}

/// Probes smoothness and dissimilarity around the average initial iterate.
pub fn probe(prep: &Prepared, settings: &ProbeSettings) -> Result<ProbeReport, ExperimentError> {
    let num = |e: ObjectiveError| ExperimentError::Numerical(e.to_string());
    let cfg = &prep.config;
    let x0 = initial_iterates(cfg.graph.n_agents, prep.dim, cfg.init_scale, cfg.seed);
    let anchor = metrics::averaged_iterate(&x0, prep.mixing.u()).map_err(|e| ExperimentError::Numerical(e.to_string()))?;
    let anchor = anchor.to_vec();

    let per_agent = prep
        .objectives
        .par_iter()
        .enumerate()
        .map(|(i, o)| objective::probe_smoothness(o, &anchor, settings.radius, settings.n_samples, settings.seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(num)?;

    let mut rng = rng::seeded(settings.seed, stream::PROBE_POINTS);
    let d = prep.dim;
    let mut points = vec![anchor.clone()];
    for _ in 0..settings.n_samples.max(1) {
        let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let r: f64 = settings.radius * rand::Rng::random::<f64>(&mut rng).powf(1.0 / d as f64);
        points.push(anchor.iter().zip(&dir).map(|(a, v)| a + r * v / n).collect());
    }
    let dissimilarity = objective::probe_dissimilarity(&prep.objectives, &points).map_err(num)?;
    let g_hat = points
        .iter()
        .map(|p| metrics::global_eval(&prep.objectives, p).map(|(_, g)| g.dot(&g).sqrt()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(num)?
        .into_iter()
        .fold(0.0, f64::max);

    let locals: Vec<(f64, f64)> = per_agent.iter().map(|e| (e.l0_hat, e.l1_hat)).collect();
    let (global_l0, global_l1) =
        objective::combine_global_smoothness(&locals, dissimilarity.ell_hat, dissimilarity.b_hat).map_err(num)?;
    let (a, b) = objective::ab_constants(settings.c).map_err(num)?;
    let l_hat = a * global_l0 + b * global_l1 * g_hat;
    Ok(ProbeReport {
        per_agent,
        dissimilarity,
        global_l0,
        global_l1,
        a,
        b,
        c: settings.c,
        g_hat,
        l_hat,
        stepsize_bound: algo::stepsize_bound(&prep.mixing, l_hat),
        alpha: cfg.algorithm.alpha,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatePoint {
    pub k: usize,
    pub c0: f64,
    pub min_grad: f64,
    pub stop: StopReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub points: Vec<RatePoint>,
    /// Least-squares slope of `ln min_grad` against `ln K`.
    pub slope: f64,
}

impl RateReport {
    pub fn table_csv(&self) -> String {
        let mut s = String::from("K,c0,min_grad_so_far,stop_reason\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{}\n",
                p.k,
                metrics::format_float(p.c0),
                metrics::format_float(p.min_grad),
                p.stop
            ));
        }
        s
    }
}

impl fmt::Display for RateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8}  {:>12}  {:>14}  stop", "K", "c0", "min_grad")?;
        for p in &self.points {
            writeln!(f, "{:>8}  {:>12.6e}  {:>14.6e}  {}", p.k, p.c0, p.min_grad, p.stop)?;
        }
        writeln!(f, "log-log slope: {:.4}", self.slope)
    }
}

/// Least-squares slope of `ys` on `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// For each budget `K`, runs with `c0 = 1/sqrt(K)` and reads the minimum
/// gradient norm at `k = K`.
pub fn rate_study(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    ks: &[usize],
) -> Result<(RateReport, Vec<RunArtifacts>), ExperimentError> {
    if ks.len() < 3 {
        return Err(ExperimentError::config("k_list", format!("need at least 3 budgets, got {}", ks.len())));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) || ks[0] == 0 {
        return Err(ExperimentError::config("k_list", "budgets must be positive and strictly increasing"));
    }
    if cfg.algorithm.name == Algorithm::Gt {
        return Err(ExperimentError::config("algorithm.name", "the rate study clips; use cgt or dgd_clip"));
    }
    let mut base = cfg.clone();
    base.repeat = 1;
    let prep = prepare(&base, base_dir)?;
    let mut points = Vec::new();
    let mut runs = Vec::new();
    for &k in ks {
        let mut p = Prepared {
            config: prep.config.clone(),
            mixing: prep.mixing.clone(),
            objectives: prep.objectives.clone(),
            dim: prep.dim,
            data_source: prep.data_source.clone(),
        };
        p.config.algorithm.max_iters = k;
        p.config.algorithm.c0 = ClipThreshold::Auto;
        p.config.output = format!("{}_K{k}", cfg.output);
        let art = execute(&p, 0)?;
        let last = art.records.last().expect("a run records k = 0");
        points.push(RatePoint {
            k,
            c0: p.config.algorithm.to_algo_config(0).resolved_c0(),
            min_grad: last.min_grad_so_far,
            stop: art.stop,
        });
        runs.push(art);
    }
    if points.iter().any(|p| !(p.min_grad > 0.0 && p.min_grad.is_finite())) {
        return Err(ExperimentError::Numerical("min_grad_so_far must be positive and finite to fit a slope".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.k as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.min_grad.ln()).collect();
    let slope = fit_slope(&xs, &ys);
    Ok((RateReport { points, slope }, runs))
}

/// Header of the merged comparison CSV.
pub fn compare_header() -> String {
    format!("label,algorithm,{}", metrics::CSV_HEADER)
}

/// Runs several configs (concurrently) and merges their trajectories into
/// one long CSV keyed by label and algorithm. Labels are the output file
/// stems.
pub fn compare(configs: &[(ExperimentConfig, PathBuf)]) -> Result<(String, Vec<RunArtifacts>), ExperimentError> {
    if configs.is_empty() {
        return Err(ExperimentError::config("configs", "compare needs at least one config"));
    }
    let runs = configs
        .par_iter()
        .map(|(cfg, base)| {
            let mut single = cfg.clone();
            single.repeat = 1;
            let prep = prepare(&single, base)?;
            execute(&prep, 0)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut merged = compare_header();
    merged.push('\n');
    for art in &runs {
        let label = art.prefix.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for rec in &art.records {
            merged.push_str(&format!("{label},{},{}\n", art.algorithm, metrics::csv_row(rec, false)));
        }
    }
    Ok((merged, runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUAD: &str = r#"
seed = 3
output = "quad"

[graph]
kind = "directed_ring"
n_agents = 3

[objective]
kind = "quadratic"
curvature = [1.0, 2.0, 3.0]
center = [[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]

[algorithm]
name = "cgt"
alpha = 0.1
c0 = 1.0
max_iters = 20
"#;

    #[test]
    fn parses_and_expands_per_agent_lists() {
        let cfg = ExperimentConfig::from_toml(QUAD).unwrap();
        let agents = cfg.objective.agent_objectives(3).unwrap();
        assert_eq!(
            agents[1],
            AgentObjective::Quadratic {
                curvature: 2.0,
                center: Some(vec![0.0, 1.0])
            }
        );
        assert_eq!(cfg.repeat, 1);
        assert_eq!(cfg.init_scale, 0.0);
    }

    #[test]
    fn agent_count_mismatch_names_the_field() {
        let bad = QUAD.replace("curvature = [1.0, 2.0, 3.0]", "curvature = [1.0, 2.0]");
        match ExperimentConfig::from_toml(&bad) {
            Err(ExperimentError::Config { path, .. }) => assert_eq!(path, "objective.curvature"),
            other => panic!("expected config error, got {:?}", other.err()),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = QUAD.replace("seed = 3", "seed = 3\nsede = 4");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(ExperimentError::Config { .. })));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml(QUAD).unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn dimension_comes_from_centers() {
        let cfg = ExperimentConfig::from_toml(QUAD).unwrap();
        let prep = prepare(&cfg, Path::new(".")).unwrap();
        assert_eq!(prep.dim, 2);
        assert_eq!(prep.objectives.len(), 3);
    }

    #[test]
    fn execute_emits_one_row_per_iterate() {
        let cfg = ExperimentConfig::from_toml(QUAD).unwrap();
        let prep = prepare(&cfg, Path::new(".")).unwrap();
        let art = execute(&prep, 0).unwrap();
        assert_eq!(art.records.len(), 21);
        assert_eq!(art.csv.lines().count(), 22);
        assert_eq!(art.stop, StopReason::MaxIters);
        let meta: RunMeta = toml::from_str(&art.meta).unwrap();
        assert_eq!(meta.config.seed, 3);
        assert_eq!(meta.stop_reason, "max_iters");
    }

    #[test]
    fn initial_iterates_are_seeded() {
        assert_eq!(initial_iterates(2, 3, 0.0, 1), Matrix::zeros((2, 3)));
        let a = initial_iterates(2, 3, 1.0, 1);
        assert_eq!(a, initial_iterates(2, 3, 1.0, 1));
        assert_ne!(a, initial_iterates(2, 3, 1.0, 2));
    }

    #[test]
    fn slope_of_power_law() {
        let xs: Vec<f64> = [10.0f64, 100.0, 1000.0].iter().map(|x| x.ln()).collect();
        let ys: Vec<f64> = [10.0f64, 100.0, 1000.0].iter().map(|x| x.powf(-0.5).ln()).collect();
        assert!((fit_slope(&xs, &ys) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn rate_needs_three_budgets() {
        let cfg = ExperimentConfig::from_toml(QUAD).unwrap();
        assert!(matches!(
            rate_study(&cfg, Path::new("."), &[100]),
            Err(ExperimentError::Config { ref path, .. }) if path == "k_list"
        ));
    }

    #[test]
    fn compare_rejects_empty_list() {
        assert!(compare(&[]).is_err());
    }

    #[test]
    fn minibatch_seed_follows_run_seed() {
        let mut cfg = ExperimentConfig::from_toml(QUAD).unwrap();
        cfg.algorithm.batch_size = Some(4);
        assert_eq!(
            cfg.algorithm.to_algo_config(9).batch,
            Batch::Minibatch {
                size: 4,
                seed: 9,
                tracking: MinibatchTracking::Resample
            }
        );
    }
}
