//! Intrinsic geodesic distances on `(Mesh, lengths)`.
//!
//! [`fast_marching`] propagates a first-order front with a planar-unfolding
//! update inside each triangle. [`dijkstra_distances`] computes edge-path
//! distances and serves as an upper-bound oracle.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::io::Write;

use thiserror::Error;

use crate::mesh::Mesh;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeodesicError {
    #[error("source set is empty")]
    NoSources,
    #[error("source vertex {source_vertex} out of range ({vertex_count} vertices)")]
    SourceOutOfRange {
        source_vertex: usize,
        vertex_count: usize,
    },
    #[error("expected {expected} edge lengths, got {actual}")]
    LengthCount { expected: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    /// Per-vertex distance; `f64::INFINITY` marks unreachable vertices.
    pub distance: Vec<f64>,
    pub sources: Vec<usize>,
}

impl DistanceField {
    pub fn unreachable(&self) -> Vec<usize> {
        self.distance
            .iter()
            .enumerate()
            .filter(|(_, d)| d.is_infinite())
            .map(|(v, _)| v)
            .collect()
    }

    /// CSV with columns `vertex_id,distance`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "vertex_id,distance")?;
        for (v, d) in self.distance.iter().enumerate() {
            writeln!(out, "{v},{d}")?;
        }
        Ok(())
    }
}

/// Candidate distance at `C` from known values at `A` and `B`.
///
/// `la = |BC|`, `lb = |CA|`, `lc = |AB|`. The triangle is unfolded into the
/// plane with `A` at the origin and `B` on the x-axis; a unit-speed planar
/// front matching `d_a` and `d_b` is extended to `C`. The front is accepted
/// only when its characteristic through `C` crosses segment `AB` and the
/// result is not below either known value; otherwise the edge relaxations
/// `d_a + lb`, `d_b + la` are used.
pub fn triangle_update(d_a: f64, d_b: f64, la: f64, lb: f64, lc: f64) -> f64 {
    let fallback = (d_a + lb).min(d_b + la);
    let nx = (d_b - d_a) / lc;
    if !(nx.abs() < 1.0) {
        return fallback;
    }
    let ny = (1.0 - nx * nx).sqrt();
    let cx = (lb * lb + lc * lc - la * la) / (2.0 * lc);
    let cy2 = lb * lb - cx * cx;
    if !(cy2 > 0.0) {
        return fallback;
    }
    let cy = cy2.sqrt();
    let foot = cx - cy * nx / ny;
    if !(0.0..=lc).contains(&foot) {
        return fallback;
    }
    let d_c = d_a + nx * cx + ny * cy;
    if d_c < d_a.max(d_b) {
        return fallback;
    }
    d_c.min(fallback)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    distance: f64,
    vertex: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.vertex.cmp(&other.vertex))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn check_inputs(mesh: &Mesh, lengths: &[f64], sources: &[usize]) -> Result<(), GeodesicError> {
    if lengths.len() != mesh.edge_count() {
        return Err(GeodesicError::LengthCount {
            expected: mesh.edge_count(),
            actual: lengths.len(),
        });
    }
    if sources.is_empty() {
        return Err(GeodesicError::NoSources);
    }
    if let Some(&s) = sources.iter().find(|&&s| s >= mesh.vertex_count()) {
        return Err(GeodesicError::SourceOutOfRange {
            source_vertex: s,
            vertex_count: mesh.vertex_count(),
        });
    }
    Ok(())
}

fn seeded(mesh: &Mesh, sources: &[usize]) -> (Vec<f64>, BinaryHeap<Reverse<Entry>>) {
    let mut distance = vec![f64::INFINITY; mesh.vertex_count()];
    let mut heap = BinaryHeap::new();
    for &s in sources {
        distance[s] = 0.0;
        heap.push(Reverse(Entry {
            distance: 0.0,
            vertex: s,
        }));
    }
    (distance, heap)
}

fn other_endpoint(mesh: &Mesh, e: usize, v: usize) -> usize {
    let [a, b] = mesh.edges()[e];
    if a == v {
        b
    } else {
        a
    }
}

pub fn fast_marching(
    mesh: &Mesh,
    lengths: &[f64],
    sources: &[usize],
) -> Result<DistanceField, GeodesicError> {
    check_inputs(mesh, lengths, sources)?;
    let (mut distance, mut heap) = seeded(mesh, sources);
    let mut known = vec![false; mesh.vertex_count()];

    while let Some(Reverse(Entry { distance: d, vertex: u })) = heap.pop() {
        if known[u] || d > distance[u] {
            continue;
        }
        known[u] = true;

        for &e in mesh.vertex_edges(u) {
            let v = other_endpoint(mesh, e, u);
            if !known[v] {
                relax(&mut distance, &mut heap, v, d + lengths[e]);
            }
        }
        for &f in mesh.vertex_faces(u) {
            let face = mesh.faces()[f];
            let edges = mesh.face_edges(f);
            let ku = mesh.corner_of(f, u).expect("incident face");
            for step in [1, 2] {
                let kw = (ku + step) % 3;
                let kv = (ku + 3 - step) % 3;
                let (w, v) = (face[kw], face[kv]);
                if !known[w] || known[v] {
                    continue;
                }
                // A = u, B = w, C = v.
                let la = lengths[edges[ku]];
                let lb = lengths[edges[kw]];
                let lc = lengths[edges[kv]];
                let candidate = triangle_update(d, distance[w], la, lb, lc);
                relax(&mut distance, &mut heap, v, candidate);
            }
        }
    }
    Ok(DistanceField {
        distance,
        sources: sources.to_vec(),
    })
}

fn relax(distance: &mut [f64], heap: &mut BinaryHeap<Reverse<Entry>>, v: usize, candidate: f64) {
    if candidate < distance[v] {
        distance[v] = candidate;
        heap.push(Reverse(Entry {
            distance: candidate,
            vertex: v,
        }));
    }
}

pub fn dijkstra_distances(
    mesh: &Mesh,
    lengths: &[f64],
    sources: &[usize],
) -> Result<DistanceField, GeodesicError> {
    check_inputs(mesh, lengths, sources)?;
    let (mut distance, mut heap) = seeded(mesh, sources);
    while let Some(Reverse(Entry { distance: d, vertex: u })) = heap.pop() {
        if d > distance[u] {
            continue;
        }
        for &e in mesh.vertex_edges(u) {
            let v = other_endpoint(mesh, e, u);
            relax(&mut distance, &mut heap, v, d + lengths[e]);
        }
    }
    Ok(DistanceField {
        distance,
        sources: sources.to_vec(),
    })
}
