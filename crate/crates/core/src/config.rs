//! `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors so that
//! typos do not silently fall back to defaults. Relative paths resolve
//! against the directory that holds the config file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::embedding::{Dataset, Embedding};
use crate::mesh::{generate_mesh, load_off, Mesh, MeshKind};
use crate::metric::{curvature_report, MetricField};
use crate::optimizer::{feasibility_projection, LossConfig, OptimizeError, State, StopCriteria};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key '{key}' given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: invalid value for '{key}': {message}")]
    Value {
        line: usize,
        key: String,
        message: String,
    },
    #[error("exactly one of 'mesh' or 'generate' must be set")]
    MeshSource,
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error("{0}")]
    Runtime(String),
}

impl ConfigError {
    /// True for problems with the inputs themselves rather than failures
    /// while running on valid inputs.
    pub fn is_validation(&self) -> bool {
        !matches!(self, ConfigError::Io { .. } | ConfigError::Runtime(_))
    }
}

/// Parses config text; see [`RunConfig::parse`].
pub fn parse_config(text: &str, base_dir: &Path) -> Result<RunConfig, ConfigError> {
    RunConfig::parse(text, base_dir)
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeshSource {
    File(PathBuf),
    Generate(MeshKind),
}

/// Parsed run configuration. `None` fields fall back to defaults scaled to
/// the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mesh: MeshSource,
    pub dataset: Option<PathBuf>,
    pub lambda: f64,
    pub p: f64,
    pub mu_dirichlet: f64,
    pub mu_volume: f64,
    pub mu_iso: f64,
    pub v_target: Option<f64>,
    pub feas_margin: Option<f64>,
    pub min_length: Option<f64>,
    pub stop: StopCriteria,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Initial lengths are multiplied by factors drawn uniformly from
    /// `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
    /// Uniform scale applied to the initial embedding.
    pub scale: f64,
    pub freeze_embedding: bool,
    /// Normalized `key = value` lines, in input order.
    pub entries: Vec<(String, String)>,
}

const KEYS: &[&str] = &[
    "mesh",
    "generate",
    "dataset",
    "lambda",
    "p",
    "mu_dirichlet",
    "mu_volume",
    "mu_iso",
    "v_target",
    "feas_margin",
    "min_length",
    "eta_init",
    "eta_growth",
    "max_iters",
    "grad_tol",
    "loss_tol",
    "output_dir",
    "seed",
    "jitter",
    "scale",
    "freeze_embedding",
];

fn value<T: std::str::FromStr>(line: usize, key: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.parse().map_err(|e: T::Err| ConfigError::Value {
        line,
        key: key.to_string(),
        message: e.to_string(),
    })
}

impl RunConfig {
    /// Parses config text; relative paths are joined onto `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let defaults = StopCriteria::default();
        let mut cfg = RunConfig {
            mesh: MeshSource::Generate(MeshKind::Icosphere { subdivisions: 0 }),
            dataset: None,
            lambda: 1.0,
            p: 2.0,
            mu_dirichlet: 1.0,
            mu_volume: 1.0,
            mu_iso: 1.0,
            v_target: None,
            feas_margin: None,
            min_length: None,
            stop: defaults,
            output_dir: base_dir.join("out"),
            seed: 0,
            jitter: 0.0,
            scale: 1.0,
            freeze_embedding: false,
            entries: Vec::new(),
        };
        let mut mesh_sources = 0;
        for (index, raw_line) in text.lines().enumerate() {
            let line = index + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, raw) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("expected 'key = value', got '{content}'"),
            })?;
            let (key, raw) = (key.trim(), raw.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if cfg.entries.iter().any(|(k, _)| k == key) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            cfg.entries.push((key.to_string(), raw.to_string()));
            match key {
                "mesh" => {
                    mesh_sources += 1;
                    cfg.mesh = MeshSource::File(base_dir.join(raw));
                }
                "generate" => {
                    mesh_sources += 1;
                    cfg.mesh = MeshSource::Generate(value(line, key, raw)?);
                }
                "dataset" => cfg.dataset = Some(base_dir.join(raw)),
                "lambda" => cfg.lambda = value(line, key, raw)?,
                "p" => cfg.p = value(line, key, raw)?,
                "mu_dirichlet" => cfg.mu_dirichlet = value(line, key, raw)?,
                "mu_volume" => cfg.mu_volume = value(line, key, raw)?,
                "mu_iso" => cfg.mu_iso = value(line, key, raw)?,
                "v_target" => cfg.v_target = Some(value(line, key, raw)?),
                "feas_margin" => cfg.feas_margin = Some(value(line, key, raw)?),
                "min_length" => cfg.min_length = Some(value(line, key, raw)?),
                "eta_init" => cfg.stop.eta_init = value(line, key, raw)?,
                "eta_growth" => cfg.stop.eta_growth = value(line, key, raw)?,
                "max_iters" => cfg.stop.max_iters = value(line, key, raw)?,
                "grad_tol" => cfg.stop.grad_tol = value(line, key, raw)?,
                "loss_tol" => cfg.stop.loss_tol = value(line, key, raw)?,
                "output_dir" => cfg.output_dir = base_dir.join(raw),
                "seed" => cfg.seed = value(line, key, raw)?,
                "jitter" => cfg.jitter = value(line, key, raw)?,
                "scale" => cfg.scale = value(line, key, raw)?,
                "freeze_embedding" => cfg.freeze_embedding = value(line, key, raw)?,
                _ => unreachable!("key list checked above"),
            }
        }
        if mesh_sources != 1 {
            return Err(ConfigError::MeshSource);
        }
        cfg.check()?;
        Ok(cfg)
    }

    /// Reads and parses a config file and checks that referenced inputs exist.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let cfg = Self::parse(&text, base)?;
        let mut inputs: Vec<&PathBuf> = cfg.dataset.iter().collect();
        if let MeshSource::File(mesh) = &cfg.mesh {
            inputs.push(mesh);
        }
        for input in inputs {
            if !input.is_file() {
                return Err(ConfigError::Input {
                    path: input.clone(),
                    message: "file not found".into(),
                });
            }
        }
        Ok(cfg)
    }

    fn check(&self) -> Result<(), ConfigError> {
        let non_negative = [
            ("lambda", self.lambda),
            ("mu_dirichlet", self.mu_dirichlet),
            ("mu_volume", self.mu_volume),
            ("mu_iso", self.mu_iso),
        ];
        for (name, value) in non_negative {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(ConfigError::Invalid(format!("{name} must be >= 0, got {value}")));
            }
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(ConfigError::Invalid(format!("p must be >= 1, got {}", self.p)));
        }
        let positive = [
            ("v_target", self.v_target),
            ("feas_margin", self.feas_margin),
            ("min_length", self.min_length),
        ];
        for (name, value) in positive {
            if let Some(v) = value {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(ConfigError::Invalid(format!("{name} must be > 0, got {v}")));
                }
            }
        }
        let s = &self.stop;
        if !(s.eta_init > 0.0 && s.eta_init.is_finite()) {
            return Err(ConfigError::Invalid("eta_init must be > 0".into()));
        }
        if !(s.eta_growth >= 1.0 && s.eta_growth.is_finite()) {
            return Err(ConfigError::Invalid("eta_growth must be >= 1".into()));
        }
        if !(s.grad_tol >= 0.0) || !(s.loss_tol >= 0.0) {
            return Err(ConfigError::Invalid("tolerances must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(ConfigError::Invalid("jitter must lie in [0, 1)".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(ConfigError::Invalid("scale must be > 0".into()));
        }
        Ok(())
    }

    /// Echo of the parsed entries for the run manifest.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Everything needed to start an optimization run.
#[derive(Debug, Clone)]
pub struct Setup {
    pub mesh: Mesh,
    pub dataset: Option<Dataset>,
    pub initial: State,
    pub loss: LossConfig,
}

/// Loads the mesh and dataset, applies scale and seeded jitter, and projects
/// the initial metric to feasibility.
pub fn prepare(cfg: &RunConfig) -> Result<Setup, ConfigError> {
    let input_error = |path: &Path, message: String| ConfigError::Input {
        path: path.to_path_buf(),
        message,
    };
    let (mesh, embedding) = match &cfg.mesh {
        MeshSource::File(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.clone(),
                source,
            })?;
            load_off(&text).map_err(|e| input_error(path, e.to_string()))?
        }
        MeshSource::Generate(kind) => generate_mesh(*kind).map_err(|e| ConfigError::Invalid(e.to_string()))?,
    };
    let dataset = match &cfg.dataset {
        Some(path) => {
            let file = std::fs::File::open(path).map_err(|source| ConfigError::Io {
                path: path.clone(),
                source,
            })?;
            let data = Dataset::read_csv(file).map_err(|e| input_error(path, e.to_string()))?;
            if data.dim() != embedding.ambient_dim() {
                return Err(input_error(
                    path,
                    format!(
                        "dataset dimension {} does not match embedding dimension {}",
                        data.dim(),
                        embedding.ambient_dim()
                    ),
                ));
            }
            Some(data)
        }
        None => None,
    };
    let embedding: Embedding = embedding.scaled(cfg.scale);
    let base = MetricField::from_embedding(&mesh, &embedding);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jittered: Vec<f64> = base
        .lengths()
        .iter()
        .map(|l| {
            if cfg.jitter > 0.0 {
                l * rng.gen_range(1.0 - cfg.jitter..=1.0 + cfg.jitter)
            } else {
                *l
            }
        })
        .collect();
    let mean = base.mean();
    let feas_margin = cfg.feas_margin.unwrap_or(1e-4 * mean);
    let min_length = cfg.min_length.unwrap_or(1e-6 * mean);
    let projection_error = |e: OptimizeError| ConfigError::Runtime(format!("initial metric: {e}"));
    let metric = feasibility_projection(
        &MetricField::from_raw(jittered),
        &mesh,
        feas_margin,
        min_length,
        cfg.stop.max_sweeps,
    )
    .map_err(projection_error)?;
    let v_target = match cfg.v_target {
        Some(v) => v,
        None => curvature_report(&mesh, metric.lengths())
            .map_err(|e| ConfigError::Runtime(format!("initial metric: {e}")))?
            .total_volume,
    };
    let loss = LossConfig {
        lambda: cfg.lambda,
        p: cfg.p,
        mu_dirichlet: cfg.mu_dirichlet,
        mu_volume: cfg.mu_volume,
        mu_iso: cfg.mu_iso,
        v_target,
        feas_margin,
        min_length,
    };
    loss.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(Setup {
        mesh,
        dataset,
        initial: State { metric, embedding },
        loss,
    })
}
