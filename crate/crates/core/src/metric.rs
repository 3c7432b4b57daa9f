//! Intrinsic geometry from edge lengths.
//!
//! Everything here is a function of `(Mesh, lengths)` only. Computations are
//! generic over [`Scalar`] so the same code path produces both values and
//! reverse-mode gradients.

use std::f64::consts::PI;
use std::io::Write;

use thiserror::Error;

use crate::autodiff::{sum, Scalar};
use crate::mesh::Mesh;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("infeasible metric{}: edge lengths {lengths:?} violate the triangle inequality", face_label(.face))]
    Infeasible {
        face: Option<usize>,
        lengths: [f64; 3],
    },
    #[error("expected {expected} edge lengths, got {actual}")]
    LengthCount { expected: usize, actual: usize },
    #[error("edge {edge} has non-positive or non-finite length {length}")]
    NonPositive { edge: usize, length: f64 },
}

fn face_label(face: &Option<usize>) -> String {
    face.map(|f| format!(" at face {f}")).unwrap_or_default()
}

/// Per-edge lengths in mesh edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricField {
    lengths: Vec<f64>,
}

impl MetricField {
    pub fn new(mesh: &Mesh, lengths: Vec<f64>) -> Result<Self, GeometryError> {
        if lengths.len() != mesh.edge_count() {
            return Err(GeometryError::LengthCount {
                expected: mesh.edge_count(),
                actual: lengths.len(),
            });
        }
        if let Some((edge, &length)) = lengths
            .iter()
            .enumerate()
            .find(|(_, l)| !(l.is_finite() && **l > 0.0))
        {
            return Err(GeometryError::NonPositive { edge, length });
        }
        Ok(Self { lengths })
    }

    pub fn uniform(mesh: &Mesh, length: f64) -> Self {
        Self {
            lengths: vec![length; mesh.edge_count()],
        }
    }

    /// Euclidean edge lengths of a vertex embedding.
    pub fn from_embedding(mesh: &Mesh, embedding: &crate::embedding::Embedding) -> Self {
        let lengths = mesh
            .edges()
            .iter()
            .map(|&[a, b]| {
                embedding
                    .point(a)
                    .iter()
                    .zip(embedding.point(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Self { lengths }
    }

    pub(crate) fn from_raw(lengths: Vec<f64>) -> Self {
        Self { lengths }
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.lengths.iter().sum::<f64>() / self.lengths.len().max(1) as f64
    }

    pub fn min(&self) -> f64 {
        self.lengths.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            lengths: self.lengths.iter().map(|l| l * s).collect(),
        }
    }

    pub fn into_lengths(self) -> Vec<f64> {
        self.lengths
    }
}

fn strictly_feasible(la: f64, lb: f64, lc: f64) -> bool {
    la > 0.0 && lb > 0.0 && lc > 0.0 && la + lb > lc && lb + lc > la && lc + la > lb
}

fn ensure_feasible<S: Scalar>(la: S, lb: S, lc: S) -> Result<(), GeometryError> {
    let (a, b, c) = (la.value(), lb.value(), lc.value());
    if strictly_feasible(a, b, c) {
        Ok(())
    } else {
        Err(GeometryError::Infeasible {
            face: None,
            lengths: [a, b, c],
        })
    }
}

fn at_face(face: usize) -> impl Fn(GeometryError) -> GeometryError {
    move |e| match e {
        GeometryError::Infeasible { lengths, .. } => GeometryError::Infeasible {
            face: Some(face),
            lengths,
        },
        other => other,
    }
}

/// Angle opposite `opposite` in a triangle with the two adjacent sides.
fn angle_opposite<S: Scalar>(opposite: S, side1: S, side2: S) -> S {
    let cos = (side1 * side1 + side2 * side2 - opposite * opposite) / (side1 * side2 * 2.0);
    cos.clamp(-1.0, 1.0).acos()
}

/// Interior angles `(α, β, γ)`, each opposite the length of the same position.
pub fn interior_angles<S: Scalar>(la: S, lb: S, lc: S) -> Result<[S; 3], GeometryError> {
    ensure_feasible(la, lb, lc)?;
    Ok([
        angle_opposite(la, lb, lc),
        angle_opposite(lb, lc, la),
        angle_opposite(lc, la, lb),
    ])
}

/// Heron's formula in Kahan's ordering (`a >= b >= c`), stable for needle
/// triangles.
pub fn triangle_area<S: Scalar>(la: S, lb: S, lc: S) -> Result<S, GeometryError> {
    ensure_feasible(la, lb, lc)?;
    let mut s = [la, lb, lc];
    s.sort_by(|x, y| y.value().total_cmp(&x.value()));
    let [a, b, c] = s;
    let product = (a + (b + c)) * (c - (a - b)) * (c + (a - b)) * (a + (b - c));
    Ok(product.sqrt() * 0.25)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureReport<S = f64> {
    /// Angle defect per vertex, radians.
    pub defect: Vec<S>,
    pub vertex_area: Vec<S>,
    pub face_area: Vec<S>,
    pub total_volume: S,
    /// Boundary flag per vertex; boundary defects measure the turning of the
    /// boundary curve and are left out of the curvature energy.
    pub boundary: Vec<bool>,
}

impl CurvatureReport<f64> {
    /// `R_i / A_i` per vertex.
    pub fn curvature_density(&self) -> Vec<f64> {
        self.defect
            .iter()
            .zip(&self.vertex_area)
            .map(|(r, a)| r / a)
            .collect()
    }

    pub fn total_defect(&self) -> f64 {
        self.defect.iter().sum()
    }

    /// CSV with columns `vertex_id,defect,vertex_area`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "vertex_id,defect,vertex_area")?;
        for (i, (d, a)) in self.defect.iter().zip(&self.vertex_area).enumerate() {
            writeln!(out, "{i},{d},{a}")?;
        }
        Ok(())
    }
}

/// Angle defects, Heron areas, one-third vertex areas and total area.
///
/// Interior vertices use `2π - Σθ`; boundary vertices use `π - Σθ`.
pub fn curvature_report<S: Scalar>(
    mesh: &Mesh,
    lengths: &[S],
) -> Result<CurvatureReport<S>, GeometryError> {
    if lengths.len() != mesh.edge_count() {
        return Err(GeometryError::LengthCount {
            expected: mesh.edge_count(),
            actual: lengths.len(),
        });
    }
    // Meshes always have at least one face, hence at least three edges.
    let zero = lengths[0].constant(0.0);

    let mut corner_angles: Vec<[S; 3]> = Vec::with_capacity(mesh.face_count());
    let mut face_area = Vec::with_capacity(mesh.face_count());
    for f in 0..mesh.face_count() {
        let [ea, eb, ec] = mesh.face_edges(f);
        let (la, lb, lc) = (lengths[ea], lengths[eb], lengths[ec]);
        corner_angles.push(interior_angles(la, lb, lc).map_err(at_face(f))?);
        face_area.push(triangle_area(la, lb, lc).map_err(at_face(f))?);
    }

    let mut defect = Vec::with_capacity(mesh.vertex_count());
    let mut vertex_area = Vec::with_capacity(mesh.vertex_count());
    for v in 0..mesh.vertex_count() {
        let incident = mesh.vertex_faces(v);
        let angle_sum = sum(
            zero,
            incident.iter().map(|&f| {
                let k = mesh.corner_of(f, v).expect("incident face contains vertex");
                corner_angles[f][k]
            }),
        );
        let full = if mesh.is_boundary_vertex(v) { PI } else { 2.0 * PI };
        defect.push(-angle_sum + full);
        vertex_area.push(sum(zero, incident.iter().map(|&f| face_area[f])) / 3.0);
    }
    let total_volume = sum(zero, face_area.iter().copied());
    Ok(CurvatureReport {
        defect,
        vertex_area,
        face_area,
        total_volume,
        boundary: (0..mesh.vertex_count()).map(|v| mesh.is_boundary_vertex(v)).collect(),
    })
}

/// `Σ_i |R_i|^p · A_i^(1-p)` over interior vertices: the defect is read as
/// curvature density `R_i / A_i` integrated over the vertex area.
pub fn curvature_energy<S: Scalar>(report: &CurvatureReport<S>, p: f64) -> S {
    let zero = report.total_volume.constant(0.0);
    let interior = report
        .defect
        .iter()
        .zip(&report.vertex_area)
        .zip(&report.boundary)
        .filter(|(_, &b)| !b)
        .map(|(pair, _)| pair);
    if p == 1.0 {
        return sum(zero, interior.map(|(r, _)| r.abs()));
    }
    sum(zero, interior.map(|(&r, &a)| r.abs().powf(p) * a.powf(1.0 - p)))
}

/// Squared log-length differences between the edges of each face.
pub fn dirichlet_energy<S: Scalar>(mesh: &Mesh, lengths: &[S]) -> S {
    let logs: Vec<S> = lengths.iter().map(|l| l.ln()).collect();
    let zero = lengths[0].constant(0.0);
    sum(
        zero,
        (0..mesh.face_count()).map(|f| {
            let [a, b, c] = mesh.face_edges(f);
            (logs[a] - logs[b]).square() + (logs[b] - logs[c]).square() + (logs[c] - logs[a]).square()
        }),
    )
}

/// `((Vol - V_target) / V_target)^2`.
pub fn volume_penalty<S: Scalar>(report: &CurvatureReport<S>, v_target: f64) -> S {
    ((report.total_volume - v_target) / v_target).square()
}

/// Faces whose smallest triangle-inequality slack falls below `margin`, with
/// the deficit `margin - slack`.
pub fn check_feasible(mesh: &Mesh, lengths: &[f64], margin: f64) -> Vec<(usize, f64)> {
    (0..mesh.face_count())
        .filter_map(|f| {
            let deficit = margin - min_slack(mesh, lengths, f);
            (deficit > 0.0).then_some((f, deficit))
        })
        .collect()
}

/// Largest `margin - slack` over all faces; non-positive iff feasible at `margin`.
pub fn max_deficit(mesh: &Mesh, lengths: &[f64], margin: f64) -> f64 {
    (0..mesh.face_count())
        .map(|f| margin - min_slack(mesh, lengths, f))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub(crate) fn slacks(la: f64, lb: f64, lc: f64) -> [f64; 3] {
    // Slack k is the inequality that bounds side k from above.
    [lb + lc - la, lc + la - lb, la + lb - lc]
}

fn min_slack(mesh: &Mesh, lengths: &[f64], f: usize) -> f64 {
    let [a, b, c] = mesh.face_edges(f);
    let s = slacks(lengths[a], lengths[b], lengths[c]);
    s[0].min(s[1]).min(s[2])
}
