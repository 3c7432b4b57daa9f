//! Metric optimization on fixed-topology triangle meshes.
//!
//! Edge lengths are the primary unknowns. Curvature, area and volume are
//! derived from them intrinsically, and an optional vertex embedding couples
//! the metric to point data in an ambient space.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod embedding;
pub mod geodesic;
pub mod mesh;
pub mod metric;
pub mod optimizer;
