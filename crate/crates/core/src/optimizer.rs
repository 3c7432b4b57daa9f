//! Total loss, feasibility projection and the projected-gradient loop.
//!
//! The parameter vector of one gradient evaluation is the edge lengths in
//! mesh edge order followed, unless the embedding is frozen, by the row-major
//! vertex coordinates. Projections of data points are recomputed once per
//! evaluation and held fixed while differentiating.

use std::io::Write;

use thiserror::Error;

use crate::autodiff::{try_evaluate_with_gradient, AdError, Scalar, Tape, Var};
use crate::embedding::{
    data_fidelity_frozen, isometry_coupling, project_dataset, Dataset, Embedding, EmbeddingError,
    ProjectionResult,
};
use crate::mesh::Mesh;
use crate::metric::{
    check_feasible, curvature_energy, curvature_report, dirichlet_energy, max_deficit, slacks,
    volume_penalty, GeometryError, MetricField,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("feasibility projection did not converge after {sweeps} sweeps; violating faces {faces:?}")]
    ProjectionFailure { sweeps: usize, faces: Vec<usize> },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Weights and tolerances of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub p: f64,
    pub mu_dirichlet: f64,
    pub mu_volume: f64,
    pub mu_iso: f64,
    pub v_target: f64,
    pub feas_margin: f64,
    pub min_length: f64,
}

impl LossConfig {
    /// Defaults scaled to a metric: margin `1e-4` and floor `1e-6` times the
    /// mean edge length, target volume equal to `volume`.
    pub fn scaled_defaults(mean_length: f64, volume: f64) -> Self {
        Self {
            lambda: 1.0,
            p: 2.0,
            mu_dirichlet: 1.0,
            mu_volume: 1.0,
            mu_iso: 1.0,
            v_target: volume,
            feas_margin: 1e-4 * mean_length,
            min_length: 1e-6 * mean_length,
        }
    }

    pub fn validate(&self) -> Result<(), OptimizeError> {
        let non_negative = [
            ("lambda", self.lambda),
            ("mu_dirichlet", self.mu_dirichlet),
            ("mu_volume", self.mu_volume),
            ("mu_iso", self.mu_iso),
        ];
        for (name, value) in non_negative {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(OptimizeError::Config(format!("{name} must be >= 0, got {value}")));
            }
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(OptimizeError::Config(format!("p must be >= 1, got {}", self.p)));
        }
        let positive = [
            ("v_target", self.v_target),
            ("feas_margin", self.feas_margin),
            ("min_length", self.min_length),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(OptimizeError::Config(format!("{name} must be > 0, got {value}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<S = f64> {
    pub data: S,
    pub curv: S,
    pub dirichlet: S,
    pub volume: S,
    pub iso: S,
    pub total: S,
}

impl<S: Scalar> LossBreakdown<S> {
    fn values(&self) -> LossBreakdown<f64> {
        LossBreakdown {
            data: self.data.value(),
            curv: self.curv.value(),
            dirichlet: self.dirichlet.value(),
            volume: self.volume.value(),
            iso: self.iso.value(),
            total: self.total.value(),
        }
    }
}

impl LossBreakdown<f64> {
    /// `data + μ_iso·iso + λ·(curv + μ_D·dirichlet + μ_V·volume)` recomputed
    /// from the components.
    pub fn recomposed_total(&self, config: &LossConfig) -> f64 {
        self.data
            + config.mu_iso * self.iso
            + config.lambda
                * (self.curv + config.mu_dirichlet * self.dirichlet + config.mu_volume * self.volume)
    }
}

/// Mesh, data and objective weights shared by every iterate of a run.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub mesh: &'a Mesh,
    pub dataset: Option<&'a Dataset>,
    pub config: LossConfig,
    /// Keep vertex coordinates fixed and optimize edge lengths only.
    pub freeze_embedding: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub metric: MetricField,
    pub embedding: Embedding,
}

/// Evaluates every term; zero-weighted terms are reported but kept out of
/// the total so they contribute nothing to the gradient.
fn loss_terms<S: Scalar>(
    problem: &Problem<'_>,
    lengths: &[S],
    coords: &[S],
    dim: usize,
    projections: &[ProjectionResult],
) -> Result<LossBreakdown<S>, GeometryError> {
    let cfg = &problem.config;
    let zero = lengths[0].constant(0.0);
    let report = curvature_report(problem.mesh, lengths)?;
    let curv = curvature_energy(&report, cfg.p);
    let dirichlet = dirichlet_energy(problem.mesh, lengths);
    let volume = volume_penalty(&report, cfg.v_target);
    let iso = isometry_coupling(problem.mesh, lengths, coords, dim);
    let data = match problem.dataset {
        Some(dataset) => data_fidelity_frozen(dataset, problem.mesh, coords, projections),
        None => zero,
    };

    let mut total = data;
    if cfg.mu_iso != 0.0 {
        total = total + iso * cfg.mu_iso;
    }
    if cfg.lambda != 0.0 {
        let mut geometry = curv;
        if cfg.mu_dirichlet != 0.0 {
            geometry = geometry + dirichlet * cfg.mu_dirichlet;
        }
        if cfg.mu_volume != 0.0 {
            geometry = geometry + volume * cfg.mu_volume;
        }
        total = total + geometry * cfg.lambda;
    }
    Ok(LossBreakdown {
        data,
        curv,
        dirichlet,
        volume,
        iso,
        total,
    })
}

fn projections_for(
    problem: &Problem<'_>,
    embedding: &Embedding,
) -> Result<Vec<ProjectionResult>, OptimizeError> {
    match problem.dataset {
        Some(dataset) => Ok(project_dataset(dataset, problem.mesh, embedding)?),
        None => Ok(Vec::new()),
    }
}

/// Full objective at a state, projecting the dataset first.
pub fn total_loss(problem: &Problem<'_>, state: &State) -> Result<LossBreakdown, OptimizeError> {
    let projections = projections_for(problem, &state.embedding)?;
    Ok(loss_terms(
        problem,
        state.metric.lengths(),
        state.embedding.coords(),
        state.embedding.ambient_dim(),
        &projections,
    )?)
}

/// Objective with the supplied projections held fixed.
pub fn total_loss_frozen(
    problem: &Problem<'_>,
    lengths: &[f64],
    coords: &[f64],
    dim: usize,
    projections: &[ProjectionResult],
) -> Result<LossBreakdown, OptimizeError> {
    Ok(loss_terms(problem, lengths, coords, dim, projections)?)
}

/// Loss value and joint gradient at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub grad_lengths: Vec<f64>,
    /// Empty when the embedding is frozen.
    pub grad_coords: Vec<f64>,
    pub projections: Vec<ProjectionResult>,
}

impl Evaluation {
    pub fn grad_norm(&self) -> f64 {
        norm(&self.grad_lengths).hypot(norm(&self.grad_coords))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Reverse-mode gradient of the total loss with respect to lengths and,
/// unless frozen, embedding coordinates.
pub fn loss_gradient(problem: &Problem<'_>, state: &State) -> Result<Evaluation, OptimizeError> {
    let projections = projections_for(problem, &state.embedding)?;
    let lengths = state.metric.lengths();
    let coords = state.embedding.coords();
    let dim = state.embedding.ambient_dim();
    let n_len = lengths.len();

    let mut inputs = lengths.to_vec();
    if !problem.freeze_embedding {
        inputs.extend_from_slice(coords);
    }
    let mut loss = None;
    let result = try_evaluate_with_gradient(&inputs, |tape: &Tape, vars: &[Var<'_>]| {
        let (len_vars, coord_vars): (&[Var<'_>], Vec<Var<'_>>) = if problem.freeze_embedding {
            (vars, coords.iter().map(|&x| tape.constant(x)).collect())
        } else {
            (&vars[..n_len], vars[n_len..].to_vec())
        };
        let terms = loss_terms(problem, len_vars, &coord_vars, dim, &projections)
            .map_err(OptimizeError::from)?;
        loss = Some(terms.values());
        Ok::<_, OptimizeError>(terms.total)
    })?;
    let mut gradient = result.gradient;
    let grad_coords = gradient.split_off(n_len);
    Ok(Evaluation {
        loss: loss.expect("program ran"),
        grad_lengths: gradient,
        grad_coords,
        projections,
    })
}

pub const DEFAULT_MAX_SWEEPS: usize = 50;

/// Cyclic per-face projection onto the triangle-inequality half-spaces with
/// margin `margin`, followed by a floor at `min_length`.
pub fn feasibility_projection(
    metric: &MetricField,
    mesh: &Mesh,
    margin: f64,
    min_length: f64,
    max_sweeps: usize,
) -> Result<MetricField, OptimizeError> {
    let mut lengths = metric.lengths().to_vec();
    let mut sweeps = 0;
    loop {
        for l in lengths.iter_mut() {
            if !(*l >= min_length) {
                *l = min_length;
            }
        }
        let violated = check_feasible(mesh, &lengths, margin);
        if violated.is_empty() {
            return Ok(MetricField::from_raw(lengths));
        }
        if sweeps == max_sweeps {
            return Err(OptimizeError::ProjectionFailure {
                sweeps,
                faces: violated.into_iter().map(|(f, _)| f).collect(),
            });
        }
        sweeps += 1;
        for f in 0..mesh.face_count() {
            let edges = mesh.face_edges(f);
            let s = slacks(lengths[edges[0]], lengths[edges[1]], lengths[edges[2]]);
            let worst = (0..3)
                .min_by(|&i, &j| s[i].total_cmp(&s[j]))
                .expect("three slacks");
            // Aim a few ulps past the margin so the check passes after rounding.
            let perimeter: f64 = edges.iter().map(|&e| lengths[e]).sum();
            let target = margin + 4.0 * f64::EPSILON * perimeter;
            if s[worst] >= target {
                continue;
            }
            let delta = (target - s[worst]) / 3.0;
            for (k, &e) in edges.iter().enumerate() {
                if k == worst {
                    lengths[e] -= delta;
                } else {
                    lengths[e] += delta;
                }
            }
        }
    }
}

/// Termination settings and step-size control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopCriteria {
    pub max_iters: usize,
    /// Stop when the joint gradient norm falls to this value.
    pub grad_tol: f64,
    /// Stop when an accepted step lowers the total by at most this fraction.
    pub loss_tol: f64,
    pub eta_init: f64,
    /// Each iteration starts its line search at `min(eta_growth · η_prev, eta_init)`.
    /// `1.0` restarts every search at the last accepted step size.
    pub eta_growth: f64,
    pub max_backtracks: usize,
    pub max_sweeps: usize,
}

impl Default for StopCriteria {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            grad_tol: 1e-6,
            loss_tol: 1e-12,
            eta_init: 1e-2,
            eta_growth: 2.0,
            max_backtracks: 20,
            max_sweeps: DEFAULT_MAX_SWEEPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    MaxIters,
    GradTol,
    LossTol,
    Stalled,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::MaxIters => "max_iters",
            Termination::GradTol => "grad_tol",
            Termination::LossTol => "loss_tol",
            Termination::Stalled => "stalled",
        }
    }
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepStatus {
    Accepted,
    /// Gradient norm at or below the tolerance; no step taken.
    Converged,
    /// Every backtracked candidate increased the loss.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub status: StepStatus,
    pub state: State,
    /// Accepted step size; zero unless the step was accepted.
    pub eta: f64,
    pub loss: LossBreakdown,
}

/// One projected-gradient step with backtracking from `eta_init`.
pub fn optimize_step(
    problem: &Problem<'_>,
    state: &State,
    eta_init: f64,
) -> Result<Step, OptimizeError> {
    let evaluation = loss_gradient(problem, state)?;
    line_search(problem, state, &evaluation, eta_init, &StopCriteria::default(), 0.0)
}

fn line_search(
    problem: &Problem<'_>,
    state: &State,
    evaluation: &Evaluation,
    eta_init: f64,
    stop: &StopCriteria,
    grad_tol: f64,
) -> Result<Step, OptimizeError> {
    let unchanged = |status| Step {
        status,
        state: state.clone(),
        eta: 0.0,
        loss: evaluation.loss,
    };
    if evaluation.grad_norm() <= grad_tol {
        return Ok(unchanged(StepStatus::Converged));
    }
    let cfg = &problem.config;
    let mut eta = eta_init;
    for _ in 0..=stop.max_backtracks {
        let raw: Vec<f64> = state
            .metric
            .lengths()
            .iter()
            .zip(&evaluation.grad_lengths)
            .map(|(l, g)| l - eta * g)
            .collect();
        let projected = feasibility_projection(
            &MetricField::from_raw(raw),
            problem.mesh,
            cfg.feas_margin,
            cfg.min_length,
            stop.max_sweeps,
        );
        if let Ok(metric) = projected {
            let embedding = if problem.freeze_embedding {
                state.embedding.clone()
            } else {
                let coords = state
                    .embedding
                    .coords()
                    .iter()
                    .zip(&evaluation.grad_coords)
                    .map(|(x, g)| x - eta * g)
                    .collect();
                Embedding::from_raw(state.embedding.ambient_dim(), coords)
            };
            let candidate = State { metric, embedding };
            if let Ok(loss) = total_loss(problem, &candidate) {
                if loss.total <= evaluation.loss.total {
                    return Ok(Step {
                        status: StepStatus::Accepted,
                        state: candidate,
                        eta,
                        loss,
                    });
                }
            }
        }
        eta *= 0.5;
    }
    Ok(unchanged(StepStatus::Stalled))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Step size that produced this iterate; zero for the initial state.
    pub eta: f64,
    pub loss: LossBreakdown,
    /// Largest `margin - slack` over faces (non-positive when feasible).
    pub max_deficit: f64,
    pub min_length: f64,
    /// Gradient norms at this iterate.
    pub grad_norm: f64,
    pub grad_norm_lengths: f64,
    pub grad_norm_embedding: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationTrace {
    pub initial: IterationRecord,
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
}

impl OptimizationTrace {
    pub fn final_record(&self) -> &IterationRecord {
        self.records.last().unwrap_or(&self.initial)
    }

    pub fn all_records(&self) -> impl Iterator<Item = &IterationRecord> {
        std::iter::once(&self.initial).chain(&self.records)
    }

    /// Trace CSV; row 0 is the initial state.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "iter,eta,L_data,L_curv,L_dirichlet,L_vol,L_iso,L_total,max_deficit,grad_norm"
        )?;
        for r in self.all_records() {
            let l = &r.loss;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.eta,
                l.data,
                l.curv,
                l.dirichlet,
                l.volume,
                l.iso,
                l.total,
                r.max_deficit,
                r.grad_norm
            )?;
        }
        Ok(())
    }
}

fn record(
    problem: &Problem<'_>,
    iteration: usize,
    eta: f64,
    state: &State,
    evaluation: &Evaluation,
) -> IterationRecord {
    let lengths = state.metric.lengths();
    IterationRecord {
        iteration,
        eta,
        loss: evaluation.loss,
        max_deficit: max_deficit(problem.mesh, lengths, problem.config.feas_margin),
        min_length: state.metric.min(),
        grad_norm: evaluation.grad_norm(),
        grad_norm_lengths: norm(&evaluation.grad_lengths),
        grad_norm_embedding: norm(&evaluation.grad_coords),
    }
}

pub fn run_optimization(
    problem: &Problem<'_>,
    initial: &State,
    stop: &StopCriteria,
) -> Result<(State, OptimizationTrace), OptimizeError> {
    run_optimization_observed(problem, initial, stop, |_, _| {})
}

/// [`run_optimization`] reporting the initial state and every accepted
/// iterate to `observer`.
pub fn run_optimization_observed<F>(
    problem: &Problem<'_>,
    initial: &State,
    stop: &StopCriteria,
    mut observer: F,
) -> Result<(State, OptimizationTrace), OptimizeError>
where
    F: FnMut(&IterationRecord, &State),
{
    problem.config.validate()?;
    initial.embedding.check_mesh(problem.mesh)?;
    let cfg = &problem.config;
    let metric = feasibility_projection(
        &initial.metric,
        problem.mesh,
        cfg.feas_margin,
        cfg.min_length,
        stop.max_sweeps,
    )?;
    let mut state = State {
        metric,
        embedding: initial.embedding.clone(),
    };
    let mut evaluation = loss_gradient(problem, &state)?;
    let initial_record = record(problem, 0, 0.0, &state, &evaluation);
    observer(&initial_record, &state);

    let mut records = Vec::new();
    let mut termination = Termination::MaxIters;
    let mut eta = stop.eta_init;
    for iteration in 1..=stop.max_iters {
        let step = line_search(problem, &state, &evaluation, eta, stop, stop.grad_tol)?;
        match step.status {
            StepStatus::Converged => {
                termination = Termination::GradTol;
                break;
            }
            StepStatus::Stalled => {
                termination = Termination::Stalled;
                break;
            }
            StepStatus::Accepted => {}
        }
        let previous = evaluation.loss.total;
        state = step.state;
        evaluation = loss_gradient(problem, &state)?;
        let rec = record(problem, iteration, step.eta, &state, &evaluation);
        observer(&rec, &state);
        records.push(rec);
        eta = (step.eta * stop.eta_growth).min(stop.eta_init);

        let decrease = previous - evaluation.loss.total;
        if decrease <= stop.loss_tol * previous.abs() {
            termination = Termination::LossTol;
            break;
        }
    }
    Ok((
        state,
        OptimizationTrace {
            initial: initial_record,
            records,
            termination,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub lambda: f64,
    pub iterations: usize,
    pub termination: Option<Termination>,
    pub loss: LossBreakdown,
    pub max_deficit: f64,
    pub grad_norm: f64,
    pub defect_mean: f64,
    /// Population variance of the vertex defects.
    pub defect_var: f64,
    pub volume: f64,
    pub error: Option<String>,
}

pub fn write_sweep_csv<W: Write>(records: &[SweepRecord], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "lambda,iters,L_data,L_curv,L_dirichlet,L_vol,L_iso,L_total,max_deficit,grad_norm,defect_mean,defect_var,volume,termination"
    )?;
    for r in records {
        let l = &r.loss;
        let reason = match (&r.termination, &r.error) {
            (_, Some(_)) => "error",
            (Some(t), None) => t.as_str(),
            (None, None) => "",
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.lambda,
            r.iterations,
            l.data,
            l.curv,
            l.dirichlet,
            l.volume,
            l.iso,
            l.total,
            r.max_deficit,
            r.grad_norm,
            r.defect_mean,
            r.defect_var,
            r.volume,
            reason
        )?;
    }
    Ok(())
}

fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Runs the optimization for each `λ` in ascending order, warm-starting from
/// the previous solution. A failed entry is recorded and the sweep continues
/// from the last good state.
pub fn lambda_sweep(
    problem: &Problem<'_>,
    initial: &State,
    stop: &StopCriteria,
    lambdas: &[f64],
) -> Result<(Vec<SweepRecord>, State), OptimizeError> {
    if let Some(bad) = lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(OptimizeError::Config(format!("lambda values must be >= 0, got {bad}")));
    }
    if lambdas.windows(2).any(|w| w[0] > w[1]) {
        return Err(OptimizeError::Config("lambda values must be sorted ascending".into()));
    }
    let mut state = initial.clone();
    let mut records = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut entry = *problem;
        entry.config.lambda = lambda;
        let outcome = run_optimization(&entry, &state, stop).and_then(|(next, trace)| {
            let report = curvature_report(problem.mesh, next.metric.lengths())?;
            Ok((next, trace, report))
        });
        match outcome {
            Ok((next, trace, report)) => {
                let (defect_mean, defect_var) = mean_and_variance(&report.defect);
                let last = trace.final_record();
                records.push(SweepRecord {
                    lambda,
                    iterations: trace.records.len(),
                    termination: Some(trace.termination),
                    loss: last.loss,
                    max_deficit: last.max_deficit,
                    grad_norm: last.grad_norm,
                    defect_mean,
                    defect_var,
                    volume: report.total_volume,
                    error: None,
                });
                state = next;
            }
            Err(e) => records.push(SweepRecord {
                lambda,
                iterations: 0,
                termination: None,
                loss: LossBreakdown {
                    data: f64::NAN,
                    curv: f64::NAN,
                    dirichlet: f64::NAN,
                    volume: f64::NAN,
                    iso: f64::NAN,
                    total: f64::NAN,
                },
                max_deficit: f64::NAN,
                grad_norm: f64::NAN,
                defect_mean: f64::NAN,
                defect_var: f64::NAN,
                volume: f64::NAN,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok((records, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_gradient;
    use crate::mesh::{generate_mesh, MeshKind};
    use crate::metric::curvature_report;

    fn single_face() -> Mesh {
        Mesh::new(3, vec![[0, 1, 2]]).unwrap()
    }

    fn config(volume: f64) -> LossConfig {
        LossConfig::scaled_defaults(1.0, volume)
    }

    #[test]
    fn projection_repairs_a_flat_triangle() {
        let mesh = single_face();
        let metric = MetricField::from_raw(vec![1.0, 1.0, 3.0]);
        let fixed = feasibility_projection(&metric, &mesh, 0.01, 1e-6, 50).unwrap();
        assert!(check_feasible(&mesh, fixed.lengths(), 0.01).is_empty());
        let again = feasibility_projection(&fixed, &mesh, 0.01, 1e-6, 50).unwrap();
        assert_eq!(fixed, again);
    }

    #[test]
    fn projection_leaves_feasible_metrics_alone_and_floors() {
        let (mesh, emb) = generate_mesh(MeshKind::Icosphere { subdivisions: 1 }).unwrap();
        let metric = MetricField::from_embedding(&mesh, &emb);
        let out = feasibility_projection(&metric, &mesh, 1e-4, 1e-6, 50).unwrap();
        assert_eq!(out, metric);

        let tiny = MetricField::from_raw(vec![1e-9, 1e-9, 1e-9]);
        let out = feasibility_projection(&tiny, &single_face(), 1e-8, 1e-3, 50).unwrap();
        assert!(out.lengths().iter().all(|&l| l >= 1e-3));
    }

    #[test]
    fn projection_failure_reports_faces() {
        let mesh = single_face();
        let metric = MetricField::from_raw(vec![1.0, 1.0, 30.0]);
        let err = feasibility_projection(&metric, &mesh, 0.01, 1e-6, 0).unwrap_err();
        assert_eq!(
            err,
            OptimizeError::ProjectionFailure {
                sweeps: 0,
                faces: vec![0]
            }
        );
    }

    #[test]
    fn lambda_zero_total_is_data_plus_coupling() {
        let (mesh, emb) = generate_mesh(MeshKind::Icosphere { subdivisions: 1 }).unwrap();
        let data = Dataset::new(3, vec![0.1, 0.9, 0.3, 1.2, -0.2, 0.0]).unwrap();
        let metric = MetricField::from_embedding(&mesh, &emb).scaled(1.1);
        let mut cfg = config(10.0);
        cfg.lambda = 0.0;
        let problem = Problem {
            mesh: &mesh,
            dataset: Some(&data),
            config: cfg,
            freeze_embedding: false,
        };
        let l = total_loss(&problem, &State { metric, embedding: emb }).unwrap();
        assert_eq!(l.total, l.data + cfg.mu_iso * l.iso);
        assert!(l.curv > 0.0);
    }

    #[test]
    fn flat_grid_at_rest_has_zero_loss() {
        // Unit-length grid metric realised as an equilateral lattice so the
        // embedding is an exact isometry.
        let (nx, ny) = (4, 4);
        let (mesh, _) = generate_mesh(MeshKind::Grid { nx, ny, spacing: 1.0 }).unwrap();
        let h = 3f64.sqrt() / 2.0;
        let mut coords = vec![0.0; 3 * nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                let v = crate::mesh::grid_index(nx, i, j);
                coords[3 * v] = i as f64 - 0.5 * j as f64;
                coords[3 * v + 1] = h * j as f64;
            }
        }
        let emb = Embedding::new(3, coords).unwrap();
        let metric = MetricField::uniform(&mesh, 1.0);
        let induced = MetricField::from_embedding(&mesh, &emb);
        assert!(induced.lengths().iter().all(|l| (l - 1.0).abs() < 1e-15));
        let volume = curvature_report(&mesh, metric.lengths()).unwrap().total_volume;
        let mut pts = emb.point(5).to_vec();
        pts.extend([0.25, 0.1, 0.0]);
        let data = Dataset::new(3, pts).unwrap();
        let problem = Problem {
            mesh: &mesh,
            dataset: Some(&data),
            config: config(volume),
            freeze_embedding: false,
        };
        let l = total_loss(&problem, &State { metric, embedding: emb }).unwrap();
        assert!(l.total.abs() < 1e-20, "{l:?}");
    }

    fn random_problem_state(seed: u64) -> (Mesh, Dataset, State) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (mesh, emb) = generate_mesh(MeshKind::Icosphere { subdivisions: 0 }).unwrap();
        let lengths = MetricField::from_embedding(&mesh, &emb)
            .lengths()
            .iter()
            .map(|l| l * rng.gen_range(0.9..1.1))
            .collect();
        let coords = emb.coords().iter().map(|x| x + rng.gen_range(-0.05..0.05)).collect();
        let pts = (0..36).map(|_| rng.gen_range(-1.2..1.2)).collect();
        (
            mesh,
            Dataset::new(3, pts).unwrap(),
            State {
                metric: MetricField::from_raw(lengths),
                embedding: Embedding::from_raw(3, coords),
            },
        )
    }

    #[test]
    fn breakdown_identity_on_random_states() {
        for seed in 0..20 {
            let (mesh, data, state) = random_problem_state(seed);
            let mut cfg = config(9.0);
            cfg.lambda = 0.37;
            cfg.mu_dirichlet = 0.5;
            cfg.mu_volume = 2.0;
            cfg.mu_iso = 0.8;
            let problem = Problem {
                mesh: &mesh,
                dataset: Some(&data),
                config: cfg,
                freeze_embedding: false,
            };
            let l = total_loss(&problem, &state).unwrap();
            let independent = l.data + 0.8 * l.iso + 0.37 * (l.curv + 0.5 * l.dirichlet + 2.0 * l.volume);
            assert!((l.total - independent).abs() <= 1e-12 * l.total.abs());
            assert!((l.total - l.recomposed_total(&cfg)).abs() <= 1e-12 * l.total.abs());
        }
    }

    #[test]
    fn gradient_matches_finite_differences_with_frozen_projections() {
        let (mesh, data, state) = random_problem_state(7);
        let mut cfg = config(9.0);
        cfg.lambda = 0.5;
        let problem = Problem {
            mesh: &mesh,
            dataset: Some(&data),
            config: cfg,
            freeze_embedding: false,
        };
        let eval = loss_gradient(&problem, &state).unwrap();
        let n = mesh.edge_count();
        let mut x = state.metric.lengths().to_vec();
        x.extend_from_slice(state.embedding.coords());
        let f = |v: &[f64]| {
            total_loss_frozen(&problem, &v[..n], &v[n..], 3, &eval.projections)
                .unwrap()
                .total
        };
        let fd = finite_difference_gradient(f, &x, 1e-6).unwrap();
        let analytic: Vec<f64> = eval.grad_lengths.iter().chain(&eval.grad_coords).copied().collect();
        for (i, (a, b)) in analytic.iter().zip(&fd).enumerate() {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-3), "coordinate {i}: {a} vs {b}");
        }
    }

    #[test]
    fn zero_gradient_step_changes_nothing() {
        let (mesh, emb) = generate_mesh(MeshKind::Icosphere { subdivisions: 0 }).unwrap();
        let metric = MetricField::from_embedding(&mesh, &emb);
        let mut cfg = config(1.0);
        cfg.lambda = 0.0;
        cfg.mu_iso = 0.0;
        let problem = Problem {
            mesh: &mesh,
            dataset: None,
            config: cfg,
            freeze_embedding: false,
        };
        let state = State {
            metric,
            embedding: emb,
        };
        let step = optimize_step(&problem, &state, 1e-2).unwrap();
        assert_eq!(step.status, StepStatus::Converged);
        assert_eq!(step.state, state);
        assert_eq!(step.loss.total, 0.0);
    }

    #[test]
    fn volume_objective_reaches_its_target() {
        let (mesh, emb) = generate_mesh(MeshKind::Icosphere { subdivisions: 0 }).unwrap();
        let metric = MetricField::uniform(&mesh, 1.0);
        let volume = curvature_report(&mesh, metric.lengths()).unwrap().total_volume;
        // With p = 1 and positive defects the curvature term is a constant 4π,
        // so only the volume term drives the lengths.
        let cfg = LossConfig {
            lambda: 1.0,
            p: 1.0,
            mu_dirichlet: 0.0,
            mu_volume: 1.0,
            mu_iso: 0.0,
            v_target: 2.0 * volume,
            feas_margin: 1e-4,
            min_length: 1e-6,
        };
        let problem = Problem {
            mesh: &mesh,
            dataset: None,
            config: cfg,
            freeze_embedding: true,
        };
        let stop = StopCriteria {
            max_iters: 2000,
            eta_init: 1.0,
            ..StopCriteria::default()
        };
        let initial = State {
            metric,
            embedding: emb,
        };
        let (state, trace) = run_optimization(&problem, &initial, &stop).unwrap();
        let totals: Vec<f64> = trace.all_records().map(|r| r.loss.total).collect();
        assert!(totals.windows(2).all(|w| w[1] <= w[0]));
        let v = curvature_report(&mesh, state.metric.lengths()).unwrap().total_volume;
        assert!((v - 2.0 * volume).abs() <= 0.01 * 2.0 * volume, "{v} vs {}", 2.0 * volume);
    }
}
