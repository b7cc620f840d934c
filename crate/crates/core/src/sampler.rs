//! Density-ranked selection of anchors, positive keys and negatives.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::Rng;

use crate::geometry::{normalize_in_place, ClassEmbedding};

/// Everything the contrastive loss needs for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSets {
    pub class_id: usize,
    /// Ascending density (or sampling order in random mode).
    pub anchors: Vec<ClassEmbedding>,
    /// Descending density.
    pub positives: Vec<ClassEmbedding>,
    pub center: Vec<f64>,
    pub negatives: Vec<ClassEmbedding>,
}

/// Sample-size limits and ablation switches.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub n_q: usize,
    pub n_p_plus: usize,
    pub n_p_minus: usize,
    /// Uniform random anchors and positives instead of density ranking.
    pub random: bool,
    /// Draw negatives from every other-class batch feature, not only anchors.
    pub negatives_from_all: bool,
}

fn density_of(e: &ClassEmbedding) -> f64 {
    e.density.unwrap_or(f64::NAN)
}

fn ascending(a: &ClassEmbedding, b: &ClassEmbedding) -> Ordering {
    density_of(a).total_cmp(&density_of(b)).then(a.seq_id.cmp(&b.seq_id))
}

fn descending(a: &ClassEmbedding, b: &ClassEmbedding) -> Ordering {
    density_of(b).total_cmp(&density_of(a)).then(a.seq_id.cmp(&b.seq_id))
}

fn with_density(items: &[ClassEmbedding]) -> Vec<ClassEmbedding> {
    items.iter().filter(|e| e.density.is_some()).cloned().collect()
}

/// The `n_q` lowest-density features, ties broken by ascending seq id.
///
/// Features without a density are not eligible.
pub fn sample_anchors(batch_class_feats: &[ClassEmbedding], n_q: usize) -> Vec<ClassEmbedding> {
    let mut c = with_density(batch_class_feats);
    c.sort_by(ascending);
    c.truncate(n_q);
    c
}

/// Splits `n` keys as `ceil(n/2)` from the batch and `floor(n/2)` from the
/// bank, moving any shortfall on one side to the other.
fn split_quota(n: usize, batch_avail: usize, bank_avail: usize) -> (usize, usize) {
    let want_batch = n.div_ceil(2);
    let want_bank = n / 2;
    let take_batch = want_batch.min(batch_avail);
    let take_bank = want_bank.min(bank_avail);
    (
        (take_batch + (want_bank - take_bank)).min(batch_avail),
        (take_bank + (want_batch - take_batch)).min(bank_avail),
    )
}

/// High-density positive keys drawn half from the batch and half from the
/// bank. Batch features already used as anchors are excluded.
pub fn sample_positives(
    batch_class_feats: &[ClassEmbedding],
    anchors: &[ClassEmbedding],
    bank_snapshot: &[ClassEmbedding],
    n_p_plus: usize,
) -> Vec<ClassEmbedding> {
    let taken: HashSet<u64> = anchors.iter().map(|a| a.seq_id).collect();
    let mut batch: Vec<_> =
        with_density(batch_class_feats).into_iter().filter(|e| !taken.contains(&e.seq_id)).collect();
    let mut bank = with_density(bank_snapshot);
    batch.sort_by(descending);
    bank.sort_by(descending);
    let (nb, nk) = split_quota(n_p_plus, batch.len(), bank.len());
    batch.truncate(nb);
    bank.truncate(nk);
    let mut out: Vec<_> = batch.into_iter().chain(bank).collect();
    out.sort_by(descending);
    out
}

/// Normalized mean of the positive keys; `None` when there are none.
pub fn cluster_center(positives: &[ClassEmbedding]) -> Option<Vec<f64>> {
    let first = positives.first()?;
    let mut c = vec![0.0; first.vector.len()];
    for p in positives {
        c.iter_mut().zip(&p.vector).for_each(|(a, b)| *a += b);
    }
    c.iter_mut().for_each(|a| *a /= positives.len() as f64);
    normalize_in_place(&mut c);
    Some(c)
}

fn pick<R: Rng + ?Sized>(items: Vec<ClassEmbedding>, amount: usize, rng: &mut R) -> Vec<ClassEmbedding> {
    let amount = amount.min(items.len());
    let mut chosen: Vec<usize> = index::sample(rng, items.len(), amount).into_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| items[i].clone()).collect()
}

/// Uniform sample without replacement of out-of-class features.
///
/// `pools` maps each class to its candidate set (the anchors of the current
/// batch in the default configuration). Output is in pool order.
pub fn sample_negatives<R: Rng + ?Sized>(
    pools: &BTreeMap<usize, Vec<ClassEmbedding>>,
    class_id: usize,
    n_p_minus: usize,
    rng: &mut R,
) -> Vec<ClassEmbedding> {
    let candidates: Vec<ClassEmbedding> =
        pools.iter().filter(|(&c, _)| c != class_id).flat_map(|(_, v)| v.iter().cloned()).collect();
    pick(candidates, n_p_minus, rng)
}

/// Uniformly random anchors (plain contrastive learning).
pub fn sample_random_anchors<R: Rng + ?Sized>(
    batch_class_feats: &[ClassEmbedding],
    n_q: usize,
    rng: &mut R,
) -> Vec<ClassEmbedding> {
    pick(batch_class_feats.to_vec(), n_q, rng)
}

/// Uniformly random positives with the same batch/bank split as
/// [`sample_positives`].
pub fn sample_random_positives<R: Rng + ?Sized>(
    batch_class_feats: &[ClassEmbedding],
    anchors: &[ClassEmbedding],
    bank_snapshot: &[ClassEmbedding],
    n_p_plus: usize,
    rng: &mut R,
) -> Vec<ClassEmbedding> {
    let taken: HashSet<u64> = anchors.iter().map(|a| a.seq_id).collect();
    let batch: Vec<_> = batch_class_feats.iter().filter(|e| !taken.contains(&e.seq_id)).cloned().collect();
    let (nb, nk) = split_quota(n_p_plus, batch.len(), bank_snapshot.len());
    let mut out = pick(batch, nb, rng);
    out.extend(pick(bank_snapshot.to_vec(), nk, rng));
    out
}

/// Builds the sample sets of every class present in `batch`.
///
/// `bank_snapshots[c]` is the memory of class `c` (empty when the bank is
/// disabled). Classes lacking anchors, positives or negatives are dropped.
/// The rng is consumed in ascending class order.
pub fn sample_all<R: Rng + ?Sized>(
    batch: &[ClassEmbedding],
    bank_snapshots: &[Vec<ClassEmbedding>],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Vec<SampleSets> {
    let mut by_class: BTreeMap<usize, Vec<ClassEmbedding>> = BTreeMap::new();
    for e in batch {
        by_class.entry(e.class_id).or_default().push(e.clone());
    }
    let empty = Vec::new();
    let mut anchors: BTreeMap<usize, Vec<ClassEmbedding>> = BTreeMap::new();
    let mut positives: BTreeMap<usize, Vec<ClassEmbedding>> = BTreeMap::new();
    for (&c, feats) in &by_class {
        let bank = bank_snapshots.get(c).unwrap_or(&empty);
        let (a, p) = if cfg.random {
            let a = sample_random_anchors(feats, cfg.n_q, rng);
            let p = sample_random_positives(feats, &a, bank, cfg.n_p_plus, rng);
            (a, p)
        } else {
            let a = sample_anchors(feats, cfg.n_q);
            let p = sample_positives(feats, &a, bank, cfg.n_p_plus);
            (a, p)
        };
        anchors.insert(c, a);
        positives.insert(c, p);
    }
    let negative_pools = if cfg.negatives_from_all { &by_class } else { &anchors };
    let mut out = Vec::new();
    for (&c, a) in &anchors {
        let negatives = sample_negatives(negative_pools, c, cfg.n_p_minus, rng);
        let p = &positives[&c];
        if a.is_empty() || negatives.is_empty() {
            continue;
        }
        let Some(center) = cluster_center(p) else { continue };
        out.push(SampleSets {
            class_id: c,
            anchors: a.clone(),
            positives: p.clone(),
            center,
            negatives,
        });
    }
    out
}
