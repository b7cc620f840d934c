use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DaclError, Result};
use crate::parallel::Exec;

use super::ClassEmbedding;

/// Cluster quality of a labeled embedding set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompactnessReport {
    pub silhouette: f64,
    pub davies_bouldin: f64,
    pub v_measure: f64,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Silhouette, Davies-Bouldin and V-measure of `embeddings` clustered by
/// their `class_id`.
///
/// `predicted[i]` is the class a model assigned to `embeddings[i]`; it only
/// enters the V-measure. Distances are Euclidean on the stored vectors.
pub fn compactness_report(embeddings: &[ClassEmbedding], predicted: &[usize]) -> Result<CompactnessReport> {
    compactness_report_with(Exec::default(), embeddings, predicted)
}

pub fn compactness_report_with(
    exec: Exec,
    embeddings: &[ClassEmbedding],
    predicted: &[usize],
) -> Result<CompactnessReport> {
    if predicted.len() != embeddings.len() {
        return Err(DaclError::Contract(format!(
            "{} predictions for {} embeddings",
            predicted.len(),
            embeddings.len()
        )));
    }
    let labels: Vec<usize> = embeddings.iter().map(|e| e.class_id).collect();
    let vectors: Vec<&[f64]> = embeddings.iter().map(|e| e.vector.as_slice()).collect();
    Ok(CompactnessReport {
        silhouette: silhouette(exec, &vectors, &labels)?,
        davies_bouldin: davies_bouldin(&vectors, &labels)?,
        v_measure: v_measure(&labels, predicted),
    })
}

fn clusters(labels: &[usize]) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        map.entry(l).or_default().push(i);
    }
    if map.len() < 2 {
        return Err(DaclError::UndefinedMetric(format!(
            "cluster scores need at least two classes, found {}",
            map.len()
        )));
    }
    Ok(map)
}

/// Mean silhouette; members of singleton clusters score 0.
pub(crate) fn silhouette(exec: Exec, vectors: &[&[f64]], labels: &[usize]) -> Result<f64> {
    let groups = clusters(labels)?;
    let scores = exec.map_range(vectors.len(), |i| {
        let own = &groups[&labels[i]];
        if own.len() < 2 {
            return 0.0;
        }
        let mut a = 0.0;
        let mut b = f64::INFINITY;
        for (&c, members) in &groups {
            let total: f64 = members.iter().map(|&j| euclid(vectors[i], vectors[j])).sum();
            if c == labels[i] {
                a = total / (members.len() - 1) as f64;
            } else {
                b = b.min(total / members.len() as f64);
            }
        }
        let denom = a.max(b);
        if denom > 0.0 {
            (b - a) / denom
        } else {
            0.0
        }
    });
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub(crate) fn davies_bouldin(vectors: &[&[f64]], labels: &[usize]) -> Result<f64> {
    let groups = clusters(labels)?;
    let dim = vectors[0].len();
    let stats: Vec<(Vec<f64>, f64)> = groups
        .values()
        .map(|members| {
            let mut c = vec![0.0; dim];
            for &j in members {
                c.iter_mut().zip(vectors[j]).for_each(|(a, b)| *a += b);
            }
            c.iter_mut().for_each(|a| *a /= members.len() as f64);
            let spread =
                members.iter().map(|&j| euclid(vectors[j], &c)).sum::<f64>() / members.len() as f64;
            (c, spread)
        })
        .collect();
    let k = stats.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0_f64;
        for j in 0..k {
            if i == j {
                continue;
            }
            let sep = euclid(&stats[i].0, &stats[j].0);
            let r = if sep > 0.0 { (stats[i].1 + stats[j].1) / sep } else { f64::INFINITY };
            worst = worst.max(r);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Harmonic mean of homogeneity and completeness.
pub(crate) fn v_measure(truth: &[usize], predicted: &[usize]) -> f64 {
    let n = truth.len() as f64;
    if truth.is_empty() {
        return 1.0;
    }
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut by_true: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_pred: BTreeMap<usize, usize> = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(predicted) {
        *joint.entry((t, p)).or_default() += 1;
        *by_true.entry(t).or_default() += 1;
        *by_pred.entry(p).or_default() += 1;
    }
    let h_true = entropy(by_true.values().copied(), n);
    let h_pred = entropy(by_pred.values().copied(), n);
    // H(T|P) and H(P|T)
    let mut h_t_given_p = 0.0;
    let mut h_p_given_t = 0.0;
    for (&(t, p), &c) in &joint {
        let c = c as f64;
        h_t_given_p -= c / n * (c / by_pred[&p] as f64).ln();
        h_p_given_t -= c / n * (c / by_true[&t] as f64).ln();
    }
    let homogeneity = if h_true == 0.0 { 1.0 } else { 1.0 - h_t_given_p / h_true };
    let completeness = if h_pred == 0.0 { 1.0 } else { 1.0 - h_p_given_t / h_pred };
    if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    }
}
