use std::cmp::Ordering;

use crate::error::{DaclError, Result};
use crate::parallel::Exec;

use super::{dot, ensure_normalized, ClassEmbedding};

/// Exact k-nearest-neighbor graph under cosine similarity.
///
/// Rows hold at most `k` entries; a row is shorter when the pool has fewer
/// than `k` members other than the query itself.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    pub k: usize,
    pub indices: Vec<Vec<usize>>,
    pub similarities: Vec<Vec<f64>>,
}

impl NeighborGraph {
    pub fn query_count(&self) -> usize {
        self.indices.len()
    }
}

/// Strictly increasing neighborhood sizes `k_1 < k_2 < ... < k_n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleSet(Vec<usize>);

impl ScaleSet {
    pub fn new(ks: Vec<usize>) -> Result<Self> {
        if ks.is_empty() {
            return Err(DaclError::config("scales", "at least one scale required"));
        }
        if ks[0] == 0 {
            return Err(DaclError::config("scales", "every k must be >= 1"));
        }
        if ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DaclError::config("scales", format!("{ks:?} is not strictly increasing")));
        }
        Ok(Self(ks))
    }

    pub fn single(k: usize) -> Result<Self> {
        Self::new(vec![k])
    }

    pub fn ks(&self) -> &[usize] {
        &self.0
    }

    pub fn max_k(&self) -> usize {
        *self.0.last().expect("non-empty by construction")
    }
}

impl Default for ScaleSet {
    fn default() -> Self {
        Self(vec![4, 8, 16])
    }
}

// Descending similarity, then ascending seq_id.
fn neighbor_order(a: &(f64, u64, usize), b: &(f64, u64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// Up to `k` nearest pool members of `query`, excluding the query itself.
fn nearest(query: &ClassEmbedding, pool: &[ClassEmbedding], k: usize) -> Vec<(f64, u64, usize)> {
    let mut cand: Vec<(f64, u64, usize)> = pool
        .iter()
        .enumerate()
        .filter(|(_, p)| p.seq_id != query.seq_id)
        .map(|(j, p)| (dot(&query.vector, &p.vector), p.seq_id, j))
        .collect();
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, neighbor_order);
        cand.truncate(k);
    }
    cand.sort_unstable_by(neighbor_order);
    cand
}

fn check_inputs(queries: &[ClassEmbedding], pool: &[ClassEmbedding], k: usize) -> Result<()> {
    if pool.is_empty() {
        return Err(DaclError::EmptyPool);
    }
    if k == 0 {
        return Err(DaclError::Contract("neighborhood size k must be >= 1".into()));
    }
    ensure_normalized(queries, "query")?;
    ensure_normalized(pool, "pool")
}

pub fn knn_graph(queries: &[ClassEmbedding], pool: &[ClassEmbedding], k: usize) -> Result<NeighborGraph> {
    knn_graph_with(Exec::default(), queries, pool, k)
}

pub fn knn_graph_with(
    exec: Exec,
    queries: &[ClassEmbedding],
    pool: &[ClassEmbedding],
    k: usize,
) -> Result<NeighborGraph> {
    check_inputs(queries, pool, k)?;
    let rows = exec.map(queries, |q| nearest(q, pool, k));
    let (indices, similarities) = rows
        .into_iter()
        .map(|r| r.into_iter().map(|(s, _, j)| (j, s)).unzip())
        .unzip();
    Ok(NeighborGraph { k, indices, similarities })
}

fn row_density(sims: &[f64]) -> f64 {
    (sims.iter().sum::<f64>() / sims.len() as f64).clamp(-1.0, 1.0)
}

/// Mean cosine similarity of each query to its neighbors.
pub fn density_single_scale(graph: &NeighborGraph) -> Result<Vec<f64>> {
    graph
        .similarities
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if row.is_empty() {
                Err(DaclError::Contract(format!("query {i} has no neighbors")))
            } else {
                Ok(row_density(row))
            }
        })
        .collect()
}

pub fn density_multi_scale(
    queries: &[ClassEmbedding],
    pool: &[ClassEmbedding],
    scales: &ScaleSet,
) -> Result<Vec<f64>> {
    density_multi_scale_with(Exec::default(), queries, pool, scales)
}

/// Average of the single-scale densities over every `k` in `scales`.
///
/// Each `k` is capped at the number of available neighbors; capped scales
/// that coincide still contribute one term each.
pub fn density_multi_scale_with(
    exec: Exec,
    queries: &[ClassEmbedding],
    pool: &[ClassEmbedding],
    scales: &ScaleSet,
) -> Result<Vec<f64>> {
    check_inputs(queries, pool, scales.max_k())?;
    let per_query = exec.map(queries, |q| {
        let nn = nearest(q, pool, scales.max_k());
        if nn.is_empty() {
            return None;
        }
        let sims: Vec<f64> = nn.iter().map(|n| n.0).collect();
        let total: f64 = scales.ks().iter().map(|&k| row_density(&sims[..k.min(sims.len())])).sum();
        Some(total / scales.ks().len() as f64)
    });
    per_query
        .into_iter()
        .enumerate()
        .map(|(i, d)| d.ok_or_else(|| DaclError::Contract(format!("query {i} has no neighbors"))))
        .collect()
}
