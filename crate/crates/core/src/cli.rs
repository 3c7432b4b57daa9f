//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for invalid arguments or a mesh that fails
//! validation, 2 for runtime failures (I/O, infeasible input, optimizer
//! errors).

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::config::{prepare, RunConfig, Setup};
use crate::embedding::write_projections_csv;
use crate::geodesic::fast_marching;
use crate::mesh::{
    euler_characteristic, generate_mesh, load_off, load_off_lenient, validate_manifold, write_off, Mesh,
    MeshKind,
};
use crate::metric::{curvature_report, MetricField};
use crate::optimizer::{
    lambda_sweep, run_optimization, write_sweep_csv, OptimizationTrace, Problem, State,
};

#[derive(Debug, Parser)]
#[command(name = "metricopt", version, about = "Edge-length metric optimization on triangle meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a generated mesh as OFF.
    Generate {
        /// icosphere:K, torus:NU,NV,R,r or grid:NX,NY,SPACING
        #[arg(long)]
        kind: MeshKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check manifoldness and print mesh statistics.
    Validate {
        #[arg(long)]
        mesh: PathBuf,
    },
    /// Per-vertex angle defects and areas.
    Curvature {
        #[arg(long)]
        mesh: PathBuf,
        /// Edge-length CSV (`edge_id,v0,v1,length`).
        #[arg(long, required_unless_present = "from_embedding", conflicts_with = "from_embedding")]
        lengths: Option<PathBuf>,
        /// Use the lengths induced by the OFF vertex coordinates.
        #[arg(long)]
        from_embedding: bool,
        /// Output directory; prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fast-marching distances from one or more source vertices.
    Geodesic {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        lengths: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        source: Vec<usize>,
        /// Output directory; prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the optimizer described by a config file.
    Optimize {
        #[arg(long)]
        config: PathBuf,
    },
    /// Warm-started runs over ascending lambda values.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Invalid input: malformed files, bad parameters, failed validation.
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Io { .. } | CliError::Runtime(_) => 2,
        }
    }
}

impl From<crate::config::ConfigError> for CliError {
    fn from(e: crate::config::ConfigError) -> Self {
        if e.is_validation() {
            CliError::Input(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(io_error(path))
}

fn load_mesh(path: &Path) -> Result<(Mesh, crate::embedding::Embedding), CliError> {
    load_off(&read_text(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_lengths(mesh: &Mesh, path: &Path) -> Result<MetricField, CliError> {
    let file = File::open(path).map_err(io_error(path))?;
    read_lengths_csv(mesh, file).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_error(path))
}

fn emit<F>(out: Option<&Path>, name: &str, write: F) -> Result<(), CliError>
where
    F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
{
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_error(dir))?;
            let path = dir.join(name);
            let mut file = create(&path)?;
            write(&mut file).and_then(|_| file.flush()).map_err(io_error(&path))
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock).map_err(io_error(Path::new("<stdout>")))
        }
    }
}

fn execute(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Generate { kind, out } => {
            let (mesh, embedding) = generate_mesh(kind).map_err(|e| CliError::Input(e.to_string()))?;
            std::fs::write(&out, write_off(&mesh, &embedding)).map_err(io_error(&out))?;
            Ok(0)
        }
        Command::Validate { mesh } => {
            let (m, _) = load_off_lenient(&read_text(&mesh)?)
                .map_err(|e| CliError::Input(format!("{}: {e}", mesh.display())))?;
            println!(
                "vertices {} edges {} faces {} euler {} closed {}",
                m.vertex_count(),
                m.edge_count(),
                m.face_count(),
                euler_characteristic(&m),
                m.is_closed()
            );
            let report = validate_manifold(&m);
            for v in &report.violations {
                println!("violation: {v}");
            }
            Ok(if report.is_empty() { 0 } else { 1 })
        }
        Command::Curvature {
            mesh,
            lengths,
            from_embedding: _,
            out,
        } => {
            let (m, embedding) = load_mesh(&mesh)?;
            let metric = match &lengths {
                Some(path) => load_lengths(&m, path)?,
                None => MetricField::from_embedding(&m, &embedding),
            };
            let report = curvature_report(&m, metric.lengths()).map_err(|e| CliError::Input(e.to_string()))?;
            emit(out.as_deref(), "curvature.csv", |w| report.write_csv(w))?;
            if let Some(dir) = &out {
                let source = match &lengths {
                    Some(path) => format!("lengths = {}", path.display()),
                    None => "lengths = from-embedding".to_string(),
                };
                write_command_manifest(dir, "curvature", &mesh, &source)?;
            }
            Ok(0)
        }
        Command::Geodesic {
            mesh,
            lengths,
            source,
            out,
        } => {
            let (m, _) = load_mesh(&mesh)?;
            let metric = load_lengths(&m, &lengths)?;
            let field = fast_marching(&m, metric.lengths(), &source).map_err(|e| CliError::Input(e.to_string()))?;
            emit(out.as_deref(), "distances.csv", |w| field.write_csv(w))?;
            if let Some(dir) = &out {
                let sources = source.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
                let detail = format!("lengths = {}\nsource = {sources}", lengths.display());
                write_command_manifest(dir, "geodesic", &mesh, &detail)?;
            }
            Ok(0)
        }
        Command::Optimize { config } => {
            let cfg = RunConfig::load(&config)?;
            let setup = prepare(&cfg)?;
            let problem = problem_for(&setup, &cfg);
            let (state, trace) = run_optimization(&problem, &setup.initial, &cfg.stop)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            write_outputs(&cfg.output_dir, &cfg, &setup, &state, &trace)?;
            println!(
                "{} after {} iterations, L_total {}",
                trace.termination,
                trace.records.len(),
                trace.final_record().loss.total
            );
            Ok(0)
        }
        Command::Sweep { config, lambdas } => {
            let cfg = RunConfig::load(&config)?;
            let setup = prepare(&cfg)?;
            let problem = problem_for(&setup, &cfg);
            let (records, state) = lambda_sweep(&problem, &setup.initial, &cfg.stop, &lambdas)
                .map_err(|e| CliError::Input(e.to_string()))?;
            let dir = &cfg.output_dir;
            std::fs::create_dir_all(dir).map_err(io_error(dir))?;
            let path = dir.join("sweep.csv");
            let mut file = create(&path)?;
            write_sweep_csv(&records, &mut file)
                .and_then(|_| file.flush())
                .map_err(io_error(&path))?;
            write_file(&dir.join("final.off"), |w| {
                w.write_all(write_off(&setup.mesh, &state.embedding).as_bytes())
            })?;
            write_file(&dir.join("lengths.csv"), |w| write_lengths_csv(&setup.mesh, &state.metric, w))?;
            write_file(&dir.join("manifest.txt"), |w| {
                w.write_all(manifest(&cfg, &setup).as_bytes())?;
                writeln!(w, "lambdas = {}", join(&lambdas))
            })?;
            for r in &records {
                if let Some(e) = &r.error {
                    eprintln!("lambda {}: {e}", r.lambda);
                }
            }
            Ok(0)
        }
    }
}

fn write_command_manifest(dir: &Path, command: &str, mesh: &Path, detail: &str) -> Result<(), CliError> {
    write_file(&dir.join("manifest.txt"), |w| {
        writeln!(w, "metricopt {}", env!("CARGO_PKG_VERSION"))?;
        writeln!(w, "command = {command}")?;
        writeln!(w, "mesh = {}", mesh.display())?;
        writeln!(w, "{detail}")
    })
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn problem_for<'a>(setup: &'a Setup, cfg: &RunConfig) -> Problem<'a> {
    Problem {
        mesh: &setup.mesh,
        dataset: setup.dataset.as_ref(),
        config: setup.loss,
        freeze_embedding: cfg.freeze_embedding,
    }
}

fn write_file<F>(path: &Path, write: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut file = create(path)?;
    write(&mut file).and_then(|_| file.flush()).map_err(io_error(path))
}

fn manifest(cfg: &RunConfig, setup: &Setup) -> String {
    let l = &setup.loss;
    format!(
        "metricopt {}\nseed = {}\n[config]\n{}[resolved]\nv_target = {}\nfeas_margin = {}\nmin_length = {}\neta_init = {}\neta_growth = {}\nmax_iters = {}\ngrad_tol = {}\nloss_tol = {}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.seed,
        cfg.echo(),
        l.v_target,
        l.feas_margin,
        l.min_length,
        cfg.stop.eta_init,
        cfg.stop.eta_growth,
        cfg.stop.max_iters,
        cfg.stop.grad_tol,
        cfg.stop.loss_tol,
    )
}

/// Writes `lengths.csv`, `curvature.csv`, `trace.csv`, `final.off`,
/// `manifest.txt` and, with a dataset, `projections.csv` into `dir`.
pub fn write_outputs(
    dir: &Path,
    cfg: &RunConfig,
    setup: &Setup,
    state: &State,
    trace: &OptimizationTrace,
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    let mesh = &setup.mesh;
    write_file(&dir.join("lengths.csv"), |w| write_lengths_csv(mesh, &state.metric, w))?;
    let report = curvature_report(mesh, state.metric.lengths()).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&dir.join("curvature.csv"), |w| report.write_csv(w))?;
    write_file(&dir.join("trace.csv"), |w| trace.write_csv(w))?;
    write_file(&dir.join("final.off"), |w| w.write_all(write_off(mesh, &state.embedding).as_bytes()))?;
    if let Some(dataset) = &setup.dataset {
        let projections = crate::embedding::project_dataset(dataset, mesh, &state.embedding)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        write_file(&dir.join("projections.csv"), |w| write_projections_csv(dataset, &projections, w))?;
    }
    write_file(&dir.join("manifest.txt"), |w| {
        w.write_all(manifest(cfg, setup).as_bytes())?;
        writeln!(w, "termination = {}", trace.termination)?;
        writeln!(w, "iterations = {}", trace.records.len())
    })
}

/// CSV with columns `edge_id,v0,v1,length`.
pub fn write_lengths_csv<W: Write>(mesh: &Mesh, metric: &MetricField, mut out: W) -> std::io::Result<()> {
    writeln!(out, "edge_id,v0,v1,length")?;
    for (e, ([a, b], l)) in mesh.edges().iter().zip(metric.lengths()).enumerate() {
        writeln!(out, "{e},{a},{b},{l}")?;
    }
    Ok(())
}

/// Reads a lengths CSV written by [`write_lengths_csv`]. Rows must list
/// every edge of `mesh` in order with matching endpoints.
pub fn read_lengths_csv<R: Read>(mesh: &Mesh, reader: R) -> Result<MetricField, CliError> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut lengths = Vec::with_capacity(mesh.edge_count());
    for (row, record) in csv.records().enumerate() {
        let record = record.map_err(|e| CliError::Input(e.to_string()))?;
        let bad = |what: &str| CliError::Input(format!("row {}: {what}", row + 1));
        if record.len() != 4 {
            return Err(bad("expected edge_id,v0,v1,length"));
        }
        let field = |i: usize| record.get(i).unwrap_or("");
        let ids: Result<Vec<usize>, _> = (0..3).map(|i| field(i).parse::<usize>()).collect();
        let ids = ids.map_err(|_| bad("non-integer index"))?;
        let length: f64 = field(3).parse().map_err(|_| bad("non-numeric length"))?;
        if ids[0] != row || mesh.edges().get(row) != Some(&[ids[1], ids[2]]) {
            return Err(bad("edge does not match the mesh edge order"));
        }
        lengths.push(length);
    }
    MetricField::new(mesh, lengths).map_err(|e| CliError::Input(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lengths_csv_round_trip() {
        let (mesh, emb) = generate_mesh(MeshKind::Torus {
            nu: 4,
            nv: 3,
            major: 2.0,
            minor: 0.5,
        })
        .unwrap();
        let metric = MetricField::from_embedding(&mesh, &emb);
        let mut buf = Vec::new();
        write_lengths_csv(&mesh, &metric, &mut buf).unwrap();
        let back = read_lengths_csv(&mesh, buf.as_slice()).unwrap();
        assert_eq!(back, metric);
    }

    #[test]
    fn lengths_csv_rejects_mismatched_edges() {
        let mesh = Mesh::new(3, vec![[0, 1, 2]]).unwrap();
        let text = "edge_id,v0,v1,length\n0,0,1,1\n1,1,2,1\n2,0,2,1\n";
        assert!(read_lengths_csv(&mesh, text.as_bytes()).is_err());
        let text = "edge_id,v0,v1,length\n0,0,1,1\n1,0,2,1\n";
        assert!(read_lengths_csv(&mesh, text.as_bytes()).is_err());
    }

    #[test]
    fn bad_arguments_exit_one() {
        assert_eq!(run_cli(["metricopt", "frobnicate"]), 1);
        assert_eq!(run_cli(["metricopt", "generate", "--kind", "cube:3", "--out", "x.off"]), 1);
    }
}
