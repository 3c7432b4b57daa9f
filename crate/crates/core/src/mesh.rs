//! Fixed-topology triangle meshes.
//!
//! A [`Mesh`] stores connectivity only. Edges are kept once as sorted vertex
//! pairs in lexicographic order, and that order is the parameter layout used
//! by every per-edge quantity in the crate. For a face `(v0, v1, v2)`,
//! `face_edges[f][k]` is the edge opposite corner `k`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::embedding::Embedding;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeshError {
    #[error("malformed OFF header: {0}")]
    MalformedHeader(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: vertex index {index} out of range for {vertex_count} vertices")]
    IndexOutOfRange {
        line: usize,
        index: usize,
        vertex_count: usize,
    },
    #[error("line {line}: face has {arity} vertices, only triangles are supported")]
    NonTriangle { line: usize, arity: usize },
    #[error("face {face} repeats a vertex: {vertices:?}")]
    DegenerateFace { face: usize, vertices: [usize; 3] },
    #[error("face {face} references vertex {index} but the mesh has {vertex_count} vertices")]
    FaceIndex {
        face: usize,
        index: usize,
        vertex_count: usize,
    },
    #[error("edge ({0}, {1}) borders {2} faces")]
    NonManifoldEdge(usize, usize, usize),
    #[error("mesh has no faces")]
    Empty,
    #[error("invalid generator parameters: {0}")]
    InvalidParameters(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NonManifoldEdge { edge: usize, face_count: usize },
    NonManifoldVertex { vertex: usize, fans: usize },
    IsolatedVertex { vertex: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::NonManifoldEdge { edge, face_count } => {
                write!(f, "non-manifold edge {edge}: {face_count} incident faces")
            }
            Violation::NonManifoldVertex { vertex, fans } => {
                write!(f, "non-manifold vertex {vertex}: {fans} separate face fans")
            }
            Violation::IsolatedVertex { vertex } => write!(f, "isolated vertex {vertex}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mesh {
    vertex_count: usize,
    edges: Vec<[usize; 2]>,
    faces: Vec<[usize; 3]>,
    face_edges: Vec<[usize; 3]>,
    edge_faces: Vec<Vec<usize>>,
    vertex_faces: Vec<Vec<usize>>,
    vertex_edges: Vec<Vec<usize>>,
    boundary_vertices: Vec<bool>,
    boundary_edges: Vec<bool>,
}

impl Mesh {
    /// Builds a manifold mesh, rejecting edges with more than two faces.
    pub fn new(vertex_count: usize, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let mesh = Self::build(vertex_count, faces)?;
        if let Some((e, faces)) = mesh
            .edge_faces
            .iter()
            .enumerate()
            .find(|(_, f)| f.len() > 2)
        {
            let [a, b] = mesh.edges[e];
            return Err(MeshError::NonManifoldEdge(a, b, faces.len()));
        }
        Ok(mesh)
    }

    /// Builds adjacency without the manifold-edge check; use
    /// [`validate_manifold`] to inspect the result.
    pub fn build(vertex_count: usize, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        if faces.is_empty() {
            return Err(MeshError::Empty);
        }
        for (f, face) in faces.iter().enumerate() {
            if let Some(&index) = face.iter().find(|&&v| v >= vertex_count) {
                return Err(MeshError::FaceIndex {
                    face: f,
                    index,
                    vertex_count,
                });
            }
            if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
                return Err(MeshError::DegenerateFace {
                    face: f,
                    vertices: *face,
                });
            }
        }

        let mut edge_map: BTreeMap<[usize; 2], usize> = BTreeMap::new();
        for face in &faces {
            for k in 0..3 {
                edge_map.insert(sorted_pair(face[(k + 1) % 3], face[(k + 2) % 3]), 0);
            }
        }
        let edges: Vec<[usize; 2]> = edge_map.keys().copied().collect();
        for (i, slot) in edge_map.values_mut().enumerate() {
            *slot = i;
        }

        let mut face_edges = Vec::with_capacity(faces.len());
        let mut edge_faces = vec![Vec::new(); edges.len()];
        let mut vertex_faces = vec![Vec::new(); vertex_count];
        for (f, face) in faces.iter().enumerate() {
            let mut fe = [0; 3];
            for k in 0..3 {
                let e = edge_map[&sorted_pair(face[(k + 1) % 3], face[(k + 2) % 3])];
                fe[k] = e;
                edge_faces[e].push(f);
                vertex_faces[face[k]].push(f);
            }
            face_edges.push(fe);
        }

        let mut vertex_edges = vec![Vec::new(); vertex_count];
        for (e, &[a, b]) in edges.iter().enumerate() {
            vertex_edges[a].push(e);
            vertex_edges[b].push(e);
        }

        let boundary_edges: Vec<bool> = edge_faces.iter().map(|f| f.len() == 1).collect();
        let mut boundary_vertices = vec![false; vertex_count];
        for (e, &[a, b]) in edges.iter().enumerate() {
            if boundary_edges[e] {
                boundary_vertices[a] = true;
                boundary_vertices[b] = true;
            }
        }

        Ok(Self {
            vertex_count,
            edges,
            faces,
            face_edges,
            edge_faces,
            vertex_faces,
            vertex_edges,
            boundary_vertices,
            boundary_edges,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }
    pub fn face_count(&self) -> usize {
        self.faces.len()
    }
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }
    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }
    /// Edge indices of face `f`, `[k]` opposite corner `k`.
    pub fn face_edges(&self, f: usize) -> [usize; 3] {
        self.face_edges[f]
    }
    pub fn edge_faces(&self, e: usize) -> &[usize] {
        &self.edge_faces[e]
    }
    pub fn vertex_faces(&self, v: usize) -> &[usize] {
        &self.vertex_faces[v]
    }
    pub fn vertex_edges(&self, v: usize) -> &[usize] {
        &self.vertex_edges[v]
    }
    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        self.boundary_vertices[v]
    }
    pub fn is_boundary_edge(&self, e: usize) -> bool {
        self.boundary_edges[e]
    }
    pub fn is_closed(&self) -> bool {
        !self.boundary_edges.iter().any(|&b| b)
    }

    /// Index of the edge joining `a` and `b`, if any.
    pub fn edge_between(&self, a: usize, b: usize) -> Option<usize> {
        self.edges.binary_search(&sorted_pair(a, b)).ok()
    }

    /// Corner index of `v` in face `f`.
    pub fn corner_of(&self, f: usize, v: usize) -> Option<usize> {
        self.faces[f].iter().position(|&w| w == v)
    }
}

fn sorted_pair(a: usize, b: usize) -> [usize; 2] {
    if a < b {
        [a, b]
    } else {
        [b, a]
    }
}

pub fn euler_characteristic(mesh: &Mesh) -> i64 {
    mesh.vertex_count() as i64 - mesh.edge_count() as i64 + mesh.face_count() as i64
}

/// Reports edges with more than two faces and vertices whose incident faces
/// do not form a single fan or cycle.
pub fn validate_manifold(mesh: &Mesh) -> ValidationReport {
    let mut violations = Vec::new();
    for e in 0..mesh.edge_count() {
        let face_count = mesh.edge_faces(e).len();
        if face_count > 2 {
            violations.push(Violation::NonManifoldEdge { edge: e, face_count });
        }
    }
    for v in 0..mesh.vertex_count() {
        let incident = mesh.vertex_faces(v);
        if incident.is_empty() {
            violations.push(Violation::IsolatedVertex { vertex: v });
            continue;
        }
        let fans = count_fans(mesh, v, incident);
        if fans > 1 {
            violations.push(Violation::NonManifoldVertex { vertex: v, fans });
        }
    }
    ValidationReport { violations }
}

/// Connected components of the faces around `v`, linked through shared edges
/// incident to `v`.
fn count_fans(mesh: &Mesh, v: usize, incident: &[usize]) -> usize {
    let mut parent: Vec<usize> = (0..incident.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for &e in mesh.vertex_edges(v) {
        let around: Vec<usize> = mesh
            .edge_faces(e)
            .iter()
            .filter_map(|f| incident.iter().position(|g| g == f))
            .collect();
        for w in around.windows(2) {
            let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            parent[a] = b;
        }
    }
    (0..incident.len())
        .filter(|&i| find(&mut parent, i) == i)
        .count()
}

/// Parses OFF text into a validated mesh and its vertex positions.
pub fn load_off(text: &str) -> Result<(Mesh, Embedding), MeshError> {
    let (vertex_count, faces, coords) = parse_off(text)?;
    let mesh = Mesh::new(vertex_count, faces)?;
    Ok((mesh, Embedding::new(3, coords).expect("OFF coordinates are 3D")))
}

/// Like [`load_off`] but keeps non-manifold edges so they can be reported.
pub fn load_off_lenient(text: &str) -> Result<(Mesh, Embedding), MeshError> {
    let (vertex_count, faces, coords) = parse_off(text)?;
    let mesh = Mesh::build(vertex_count, faces)?;
    Ok((mesh, Embedding::new(3, coords).expect("OFF coordinates are 3D")))
}

/// Vertex count, faces and flat coordinates.
type OffParts = (usize, Vec<[usize; 3]>, Vec<f64>);

fn parse_off(text: &str) -> Result<OffParts, MeshError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (_, header) = lines
        .next()
        .ok_or_else(|| MeshError::MalformedHeader("empty input".into()))?;
    // Counts may share the header line ("OFF 4 4 6").
    let rest = match header.strip_prefix("OFF") {
        Some(rest) => rest.trim(),
        None => return Err(MeshError::MalformedHeader(format!("expected `OFF`, found `{header}`"))),
    };
    let (count_line, counts) = if rest.is_empty() {
        lines
            .next()
            .ok_or_else(|| MeshError::MalformedHeader("missing counts line".into()))?
    } else {
        (1, rest)
    };
    let counts: Vec<usize> = counts
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| MeshError::MalformedHeader(format!("line {count_line}: bad counts `{counts}`")))?;
    if counts.len() < 2 {
        return Err(MeshError::MalformedHeader(format!(
            "line {count_line}: expected vertex and face counts"
        )));
    }
    let (vertex_count, face_count) = (counts[0], counts[1]);

    let mut coords = Vec::with_capacity(vertex_count * 3);
    for _ in 0..vertex_count {
        let (line, l) = lines.next().ok_or_else(|| MeshError::Parse {
            line: 0,
            message: "unexpected end of file in vertex list".into(),
        })?;
        let values: Vec<f64> = l
            .split_whitespace()
            .take(3)
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| MeshError::Parse {
                line,
                message: format!("bad vertex coordinate: {e}"),
            })?;
        if values.len() != 3 || values.iter().any(|x| !x.is_finite()) {
            return Err(MeshError::Parse {
                line,
                message: "vertex line needs three finite coordinates".into(),
            });
        }
        coords.extend(values);
    }

    let mut faces = Vec::with_capacity(face_count);
    for _ in 0..face_count {
        let (line, l) = lines.next().ok_or_else(|| MeshError::Parse {
            line: 0,
            message: "unexpected end of file in face list".into(),
        })?;
        let mut tokens = l.split_whitespace();
        let arity: usize = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| MeshError::Parse {
                line,
                message: "bad face arity".into(),
            })?;
        if arity != 3 {
            return Err(MeshError::NonTriangle { line, arity });
        }
        let mut face = [0usize; 3];
        for slot in &mut face {
            let index: usize = tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| MeshError::Parse {
                    line,
                    message: "bad face index".into(),
                })?;
            if index >= vertex_count {
                return Err(MeshError::IndexOutOfRange {
                    line,
                    index,
                    vertex_count,
                });
            }
            *slot = index;
        }
        faces.push(face);
    }
    Ok((vertex_count, faces, coords))
}

/// Emits OFF text. Non-3D embeddings are padded with zeros or truncated.
pub fn write_off(mesh: &Mesh, embedding: &Embedding) -> String {
    let mut out = String::new();
    writeln!(out, "OFF").unwrap();
    writeln!(
        out,
        "{} {} {}",
        mesh.vertex_count(),
        mesh.face_count(),
        mesh.edge_count()
    )
    .unwrap();
    for v in 0..mesh.vertex_count() {
        let p = embedding.point(v);
        let c = |k: usize| p.get(k).copied().unwrap_or(0.0);
        writeln!(out, "{} {} {}", c(0), c(1), c(2)).unwrap();
    }
    for f in mesh.faces() {
        writeln!(out, "3 {} {} {}", f[0], f[1], f[2]).unwrap();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeshKind {
    Icosphere { subdivisions: u32 },
    Torus { nu: usize, nv: usize, major: f64, minor: f64 },
    Grid { nx: usize, ny: usize, spacing: f64 },
}

impl std::str::FromStr for MeshKind {
    type Err = MeshError;

    /// `icosphere:K`, `torus:NU,NV,R,r`, or `grid:NX,NY,SPACING`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: &str| MeshError::InvalidParameters(format!("`{s}`: {m}"));
        let (name, args) = s.split_once(':').unwrap_or((s, ""));
        let args: Vec<&str> = args
            .split(',')
            .map(str::trim)
            .filter(|a| !a.is_empty())
            .collect();
        let int = |a: &str| a.parse::<usize>().map_err(|_| bad("expected an integer"));
        let real = |a: &str| a.parse::<f64>().map_err(|_| bad("expected a number"));
        match (name.trim(), args.as_slice()) {
            ("icosphere", [k]) => Ok(MeshKind::Icosphere {
                subdivisions: int(k)? as u32,
            }),
            ("icosphere", []) => Ok(MeshKind::Icosphere { subdivisions: 0 }),
            ("torus", [nu, nv, major, minor]) => Ok(MeshKind::Torus {
                nu: int(nu)?,
                nv: int(nv)?,
                major: real(major)?,
                minor: real(minor)?,
            }),
            ("grid", [nx, ny, spacing]) => Ok(MeshKind::Grid {
                nx: int(nx)?,
                ny: int(ny)?,
                spacing: real(spacing)?,
            }),
            _ => Err(bad("unknown mesh kind or wrong number of parameters")),
        }
    }
}

/// Builds one of the canonical base topologies with an initial 3D embedding.
pub fn generate_mesh(kind: MeshKind) -> Result<(Mesh, Embedding), MeshError> {
    match kind {
        MeshKind::Icosphere { subdivisions } => icosphere(subdivisions),
        MeshKind::Torus {
            nu,
            nv,
            major,
            minor,
        } => torus(nu, nv, major, minor),
        MeshKind::Grid { nx, ny, spacing } => grid(nx, ny, spacing),
    }
}

fn icosphere(subdivisions: u32) -> Result<(Mesh, Embedding), MeshError> {
    if subdivisions > 7 {
        return Err(MeshError::InvalidParameters(format!(
            "icosphere subdivisions {subdivisions} exceeds 7"
        )));
    }
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut points: Vec<[f64; 3]> = vec![
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for p in &mut points {
        normalize(p);
    }
    for _ in 0..subdivisions {
        let mut midpoints: BTreeMap<[usize; 2], usize> = BTreeMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let mut mid = |i: usize, j: usize| {
                *midpoints.entry(sorted_pair(i, j)).or_insert_with(|| {
                    let mut m = [
                        0.5 * (points[i][0] + points[j][0]),
                        0.5 * (points[i][1] + points[j][1]),
                        0.5 * (points[i][2] + points[j][2]),
                    ];
                    normalize(&mut m);
                    points.push(m);
                    points.len() - 1
                })
            };
            let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let coords = points.iter().flatten().copied().collect();
    Ok((Mesh::new(points.len(), faces)?, Embedding::new(3, coords).unwrap()))
}

fn normalize(p: &mut [f64; 3]) {
    let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    p.iter_mut().for_each(|x| *x /= n);
}

fn torus(nu: usize, nv: usize, major: f64, minor: f64) -> Result<(Mesh, Embedding), MeshError> {
    if nu < 3 || nv < 3 {
        return Err(MeshError::InvalidParameters(format!(
            "torus needs nu, nv >= 3 (got {nu}, {nv})"
        )));
    }
    if !(major > 0.0 && minor > 0.0 && minor < major) {
        return Err(MeshError::InvalidParameters(format!(
            "torus radii must satisfy 0 < r < R (got R={major}, r={minor})"
        )));
    }
    let index = |i: usize, j: usize| (i % nu) * nv + (j % nv);
    let mut coords = Vec::with_capacity(nu * nv * 3);
    for i in 0..nu {
        let u = std::f64::consts::TAU * i as f64 / nu as f64;
        for j in 0..nv {
            let v = std::f64::consts::TAU * j as f64 / nv as f64;
            let ring = major + minor * v.cos();
            coords.extend([ring * u.cos(), ring * u.sin(), minor * v.sin()]);
        }
    }
    let mut faces = Vec::with_capacity(2 * nu * nv);
    for i in 0..nu {
        for j in 0..nv {
            let (a, b, c, d) = (
                index(i, j),
                index(i + 1, j),
                index(i + 1, j + 1),
                index(i, j + 1),
            );
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    Ok((Mesh::new(nu * nv, faces)?, Embedding::new(3, coords).unwrap()))
}

/// Planar grid in z = 0; every cell is split along its (i, j)-(i+1, j+1) diagonal.
fn grid(nx: usize, ny: usize, spacing: f64) -> Result<(Mesh, Embedding), MeshError> {
    if nx < 2 || ny < 2 {
        return Err(MeshError::InvalidParameters(format!(
            "grid needs nx, ny >= 2 (got {nx}, {ny})"
        )));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(MeshError::InvalidParameters(format!(
            "grid spacing must be positive (got {spacing})"
        )));
    }
    let index = |i: usize, j: usize| j * nx + i;
    let mut coords = Vec::with_capacity(nx * ny * 3);
    for j in 0..ny {
        for i in 0..nx {
            coords.extend([i as f64 * spacing, j as f64 * spacing, 0.0]);
        }
    }
    let mut faces = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let (a, b, c, d) = (
                index(i, j),
                index(i + 1, j),
                index(i + 1, j + 1),
                index(i, j + 1),
            );
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    Ok((Mesh::new(nx * ny, faces)?, Embedding::new(3, coords).unwrap()))
}

/// Grid vertex index for column `i`, row `j` of a mesh from `grid:nx,...`.
pub fn grid_index(nx: usize, i: usize, j: usize) -> usize {
    j * nx + i
}
