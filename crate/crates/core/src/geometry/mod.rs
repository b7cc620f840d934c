//! Cosine geometry over class embeddings: neighbor graphs, density
//! estimation and cluster compactness scores.

mod compactness;
mod knn;

pub use compactness::{compactness_report, compactness_report_with, CompactnessReport};
pub use knn::{
    density_multi_scale, density_multi_scale_with, density_single_scale, knn_graph, knn_graph_with,
    NeighborGraph, ScaleSet,
};

use serde::{Deserialize, Serialize};

use crate::error::{DaclError, Result};

/// Tolerance on `‖v‖ = 1` for vectors entering cosine computations.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Where an embedding came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Batch,
    Bank,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Batch => "batch",
            Origin::Bank => "bank",
        }
    }
}

/// A class prototype in projection space.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbedding {
    pub vector: Vec<f64>,
    pub class_id: usize,
    pub density: Option<f64>,
    pub origin: Origin,
    /// Globally unique, monotonically assigned; breaks similarity ties.
    pub seq_id: u64,
}

impl ClassEmbedding {
    pub fn new(vector: Vec<f64>, class_id: usize, origin: Origin, seq_id: u64) -> Self {
        Self { vector, class_id, density: None, origin, seq_id }
    }

    /// Rescales the vector to unit length. Zero vectors are left unchanged.
    pub fn normalized(mut self) -> Self {
        normalize_in_place(&mut self.vector);
        self
    }

    pub fn with_density(mut self, density: f64) -> Self {
        self.density = Some(density);
        self
    }

    pub fn is_normalized(&self) -> bool {
        (norm(&self.vector) - 1.0).abs() <= UNIT_NORM_TOL
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize_in_place(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub(crate) fn ensure_normalized(items: &[ClassEmbedding], what: &str) -> Result<()> {
    if let Some(e) = items.iter().find(|e| !e.is_normalized()) {
        return Err(DaclError::Contract(format!(
            "{what} embedding seq {} has norm {:.12}, expected unit length",
            e.seq_id,
            norm(&e.vector)
        )));
    }
    Ok(())
}

/// Monotone source of `seq_id`s.
#[derive(Clone, Debug, Default)]
pub struct SeqCounter(u64);

impl SeqCounter {
    pub fn starting_at(next: u64) -> Self {
        Self(next)
    }

    pub fn next_id(&mut self) -> u64 {
        let id = self.0;
        self.0 += 1;
        id
    }

    pub fn peek(&self) -> u64 {
        self.0
    }
}
