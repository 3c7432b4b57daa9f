//! Piecewise-linear generator from the mesh into data space, projection of
//! data points onto the generated surface, and the data-fidelity terms.

use std::io::{Read, Write};

use thiserror::Error;

use crate::autodiff::{sum, Scalar};
use crate::mesh::Mesh;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("coordinate count {len} is not a multiple of dimension {dim}")]
    Shape { len: usize, dim: usize },
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("non-finite coordinate at flat index {0}")]
    NonFinite(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("row {row}: {message}")]
    Csv { row: usize, message: String },
    #[error("invalid barycentric coordinates {0:?}")]
    Barycentric([f64; 3]),
    #[error("face {face} out of range ({face_count} faces)")]
    FaceOutOfRange { face: usize, face_count: usize },
    #[error("dimension mismatch: embedding is {embedding}-D, dataset is {dataset}-D")]
    DimensionMismatch { embedding: usize, dataset: usize },
    #[error("embedding has {actual} vertices, mesh has {expected}")]
    VertexCount { expected: usize, actual: usize },
}

/// Per-vertex coordinates in `R^n`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    dim: usize,
    coords: Vec<f64>,
}

impl Embedding {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self, EmbeddingError> {
        check_rows(dim, &coords)?;
        Ok(Self { dim, coords })
    }

    pub fn ambient_dim(&self) -> usize {
        self.dim
    }

    pub fn vertex_count(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn point(&self, v: usize) -> &[f64] {
        &self.coords[v * self.dim..(v + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub(crate) fn from_raw(dim: usize, coords: Vec<f64>) -> Self {
        Self { dim, coords }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            coords: self.coords.iter().map(|x| x * s).collect(),
        }
    }

    /// Applies `x -> rotation · x + translation` to every vertex.
    pub fn transformed(&self, rotation: &[f64], translation: &[f64]) -> Self {
        Self {
            dim: self.dim,
            coords: transform_rows(self.dim, &self.coords, rotation, translation),
        }
    }

    pub fn check_mesh(&self, mesh: &Mesh) -> Result<(), EmbeddingError> {
        if self.vertex_count() != mesh.vertex_count() {
            return Err(EmbeddingError::VertexCount {
                expected: mesh.vertex_count(),
                actual: self.vertex_count(),
            });
        }
        Ok(())
    }
}

fn check_rows(dim: usize, coords: &[f64]) -> Result<(), EmbeddingError> {
    if dim == 0 {
        return Err(EmbeddingError::ZeroDimension);
    }
    if !coords.len().is_multiple_of(dim) {
        return Err(EmbeddingError::Shape {
            len: coords.len(),
            dim,
        });
    }
    if let Some(i) = coords.iter().position(|x| !x.is_finite()) {
        return Err(EmbeddingError::NonFinite(i));
    }
    Ok(())
}

fn transform_rows(dim: usize, coords: &[f64], rotation: &[f64], translation: &[f64]) -> Vec<f64> {
    assert_eq!(rotation.len(), dim * dim);
    assert_eq!(translation.len(), dim);
    coords
        .chunks(dim)
        .flat_map(|p| {
            (0..dim).map(move |r| {
                (0..dim).map(|c| rotation[r * dim + c] * p[c]).sum::<f64>() + translation[r]
            })
        })
        .collect()
}

/// Observed data points, each tagged with an id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    points: Vec<f64>,
    ids: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self, EmbeddingError> {
        check_rows(dim, &points)?;
        if points.is_empty() {
            return Err(EmbeddingError::EmptyDataset);
        }
        let ids = (0..points.len() / dim).collect();
        Ok(Self { dim, points, ids })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn id(&self, i: usize) -> usize {
        self.ids[i]
    }

    pub fn transformed(&self, rotation: &[f64], translation: &[f64]) -> Self {
        Self {
            dim: self.dim,
            points: transform_rows(self.dim, &self.points, rotation, translation),
            ids: self.ids.clone(),
        }
    }

    /// One point per row, numeric columns, optional header row.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, EmbeddingError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut dim = None;
        let mut points = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| EmbeddingError::Csv {
                row: row + 1,
                message: e.to_string(),
            })?;
            let parsed: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
            let values = match parsed {
                Ok(v) => v,
                Err(_) if row == 0 => continue,
                Err(e) => {
                    return Err(EmbeddingError::Csv {
                        row: row + 1,
                        message: e.to_string(),
                    })
                }
            };
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(EmbeddingError::Csv {
                        row: row + 1,
                        message: format!("expected {d} columns, found {}", values.len()),
                    })
                }
                Some(_) => {}
            }
            points.extend(values);
        }
        Dataset::new(dim.ok_or(EmbeddingError::EmptyDataset)?, points)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.dim).map(|k| format!("x{k}")).collect();
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> = self.point(i).iter().map(|x| x.to_string()).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Which part of the solid triangle attains the minimum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClosestFeature {
    Interior,
    /// Edge opposite corner `k`.
    Edge(usize),
    Vertex(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionResult {
    pub face: usize,
    pub barycentric: [f64; 3],
    pub sq_dist: f64,
    pub feature: ClosestFeature,
}

/// Convex combination of the face's vertex coordinates.
pub fn decode(
    mesh: &Mesh,
    embedding: &Embedding,
    face: usize,
    barycentric: [f64; 3],
) -> Result<Vec<f64>, EmbeddingError> {
    if face >= mesh.face_count() {
        return Err(EmbeddingError::FaceOutOfRange {
            face,
            face_count: mesh.face_count(),
        });
    }
    let total: f64 = barycentric.iter().sum();
    if barycentric.iter().any(|b| !(0.0..=1.0).contains(b)) || (total - 1.0).abs() > 1e-12 {
        return Err(EmbeddingError::Barycentric(barycentric));
    }
    let [a, b, c] = mesh.faces()[face];
    let (pa, pb, pc) = (embedding.point(a), embedding.point(b), embedding.point(c));
    Ok((0..embedding.ambient_dim())
        .map(|k| barycentric[0] * pa[k] + barycentric[1] * pb[k] + barycentric[2] * pc[k])
        .collect())
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn sub(u: &[f64], v: &[f64]) -> Vec<f64> {
    u.iter().zip(v).map(|(a, b)| a - b).collect()
}

fn sq_distance_at(x: &[f64], verts: [&[f64]; 3], b: [f64; 3]) -> f64 {
    (0..x.len())
        .map(|k| {
            let p = b[0] * verts[0][k] + b[1] * verts[1][k] + b[2] * verts[2][k];
            (x[k] - p) * (x[k] - p)
        })
        .sum()
}

/// Exact minimizer of the squared distance from `x` to the solid triangle.
///
/// Region classification on the 2-variable quadratic (vertex, edge, interior)
/// using only dot products, so it works in any ambient dimension. Degenerate
/// triangles fall back to the best of the three edges.
pub fn closest_point_on_face(face: usize, x: &[f64], verts: [&[f64]; 3]) -> ProjectionResult {
    let [a, b, c] = verts;
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(x, a);
    let scale = dot(&ab, &ab).max(dot(&ac, &ac));
    let gram = dot(&ab, &ab) * dot(&ac, &ac) - dot(&ab, &ac).powi(2);
    if !(gram > 1e-14 * scale * scale) {
        return closest_on_degenerate(face, x, verts);
    }

    let make = |bary: [f64; 3], feature| ProjectionResult {
        face,
        barycentric: bary,
        sq_dist: sq_distance_at(x, verts, bary),
        feature,
    };

    let d1 = dot(&ab, &ap);
    let d2 = dot(&ac, &ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return make([1.0, 0.0, 0.0], ClosestFeature::Vertex(0));
    }
    let bp = sub(x, b);
    let d3 = dot(&ab, &bp);
    let d4 = dot(&ac, &bp);
    if d3 >= 0.0 && d4 <= d3 {
        return make([0.0, 1.0, 0.0], ClosestFeature::Vertex(1));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return make([1.0 - t, t, 0.0], ClosestFeature::Edge(2));
    }
    let cp = sub(x, c);
    let d5 = dot(&ab, &cp);
    let d6 = dot(&ac, &cp);
    if d6 >= 0.0 && d5 <= d6 {
        return make([0.0, 0.0, 1.0], ClosestFeature::Vertex(2));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return make([1.0 - t, 0.0, t], ClosestFeature::Edge(1));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return make([0.0, 1.0 - t, t], ClosestFeature::Edge(0));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    make([1.0 - v - w, v, w], ClosestFeature::Interior)
}

fn closest_on_degenerate(face: usize, x: &[f64], verts: [&[f64]; 3]) -> ProjectionResult {
    let mut best: Option<ProjectionResult> = None;
    for k in 0..3 {
        let (i, j) = ((k + 1) % 3, (k + 2) % 3);
        let d = sub(verts[j], verts[i]);
        let len2 = dot(&d, &d);
        let t = if len2 > 0.0 {
            (dot(&sub(x, verts[i]), &d) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let mut bary = [0.0; 3];
        bary[i] = 1.0 - t;
        bary[j] = t;
        let feature = if t == 0.0 {
            ClosestFeature::Vertex(i)
        } else if t == 1.0 {
            ClosestFeature::Vertex(j)
        } else {
            ClosestFeature::Edge(k)
        };
        let candidate = ProjectionResult {
            face,
            barycentric: bary,
            sq_dist: sq_distance_at(x, verts, bary),
            feature,
        };
        if best.is_none_or(|b| candidate.sq_dist < b.sq_dist) {
            best = Some(candidate);
        }
    }
    best.expect("three candidate edges")
}

fn face_vertices<'e>(mesh: &Mesh, embedding: &'e Embedding, f: usize) -> [&'e [f64]; 3] {
    let [a, b, c] = mesh.faces()[f];
    [embedding.point(a), embedding.point(b), embedding.point(c)]
}

/// Global closest point per data point; ties go to the lowest face index.
pub fn project_dataset(
    dataset: &Dataset,
    mesh: &Mesh,
    embedding: &Embedding,
) -> Result<Vec<ProjectionResult>, EmbeddingError> {
    if dataset.dim() != embedding.ambient_dim() {
        return Err(EmbeddingError::DimensionMismatch {
            embedding: embedding.ambient_dim(),
            dataset: dataset.dim(),
        });
    }
    embedding.check_mesh(mesh)?;
    Ok((0..dataset.len())
        .map(|i| project_point(dataset.point(i), mesh, embedding))
        .collect())
}

fn project_point(x: &[f64], mesh: &Mesh, embedding: &Embedding) -> ProjectionResult {
    let mut best = closest_point_on_face(0, x, face_vertices(mesh, embedding, 0));
    for f in 1..mesh.face_count() {
        let candidate = closest_point_on_face(f, x, face_vertices(mesh, embedding, f));
        if candidate.sq_dist < best.sq_dist {
            best = candidate;
        }
    }
    best
}

pub fn data_fidelity(projections: &[ProjectionResult]) -> f64 {
    projections.iter().map(|p| p.sq_dist).sum()
}

/// Data term with the projections' faces and barycentric coordinates held
/// fixed; `coords` are row-major vertex coordinates.
pub fn data_fidelity_frozen<S: Scalar>(
    dataset: &Dataset,
    mesh: &Mesh,
    coords: &[S],
    projections: &[ProjectionResult],
) -> S {
    let dim = dataset.dim();
    let zero = coords[0].constant(0.0);
    sum(
        zero,
        projections.iter().enumerate().map(|(i, p)| {
            let x = dataset.point(i);
            let face = mesh.faces()[p.face];
            let b = p.barycentric;
            sum(
                zero,
                (0..dim).map(|k| {
                    let mut image = zero;
                    for corner in 0..3 {
                        if b[corner] != 0.0 {
                            image = image + coords[face[corner] * dim + k] * b[corner];
                        }
                    }
                    (-image + x[k]).square()
                }),
            )
        }),
    )
}

/// `Σ_edges (‖f(v_i) - f(v_j)‖ - ℓ_ij)²`.
pub fn isometry_coupling<S: Scalar>(mesh: &Mesh, lengths: &[S], coords: &[S], dim: usize) -> S {
    let zero = lengths[0].constant(0.0);
    sum(
        zero,
        mesh.edges().iter().enumerate().map(|(e, &[a, b])| {
            let extrinsic = sum(
                zero,
                (0..dim).map(|k| (coords[a * dim + k] - coords[b * dim + k]).square()),
            )
            .sqrt();
            (extrinsic - lengths[e]).square()
        }),
    )
}

/// CSV with columns `point_id,face,b0,b1,b2,sq_dist`.
pub fn write_projections_csv<W: Write>(
    dataset: &Dataset,
    projections: &[ProjectionResult],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "point_id,face,b0,b1,b2,sq_dist")?;
    for (i, p) in projections.iter().enumerate() {
        let [b0, b1, b2] = p.barycentric;
        writeln!(out, "{},{},{b0},{b1},{b2},{}", dataset.id(i), p.face, p.sq_dist)?;
    }
    Ok(())
}
