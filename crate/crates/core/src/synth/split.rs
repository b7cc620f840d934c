use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate_scene, SceneConfig, ToyScene};
use crate::error::{DaclError, Result};
use crate::parallel::Exec;

/// Scene ids per partition. Ids index `0..n_scenes`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub labeled: Vec<u64>,
    pub unlabeled: Vec<u64>,
    pub test: Vec<u64>,
}

/// Materialized partitions. Unlabeled scenes keep their labels for evaluation.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub plan: SplitPlan,
    pub labeled: Vec<ToyScene>,
    pub unlabeled: Vec<ToyScene>,
    pub test: Vec<ToyScene>,
}

/// Seed used to render scene `id` of a dataset seeded with `seed`.
pub fn scene_seed(seed: u64, id: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(id.wrapping_mul(0xBF58_476D_1CE4_E5B9)) ^ id
}

/// Shuffles `0..n_scenes`, carves off 20% for test, then splits the rest by
/// `labeled_fraction`.
pub fn plan_split(n_scenes: usize, labeled_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(DaclError::config("labeled_fraction", format!("{labeled_fraction} not in (0, 1]")));
    }
    let n_test = ((0.2 * n_scenes as f64).round() as usize).max(1);
    if n_scenes < n_test + 1 {
        return Err(DaclError::config("scenes", format!("{n_scenes} scenes leave no training data")));
    }
    let n_train = n_scenes - n_test;
    let n_labeled = ((labeled_fraction * n_train as f64).round() as usize).clamp(1, n_train);
    if labeled_fraction < 1.0 && n_labeled == n_train {
        return Err(DaclError::config(
            "scenes",
            format!("{n_scenes} scenes leave no unlabeled data at fraction {labeled_fraction}"),
        ));
    }
    let mut ids: Vec<u64> = (0..n_scenes as u64).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sorted = |s: &[u64]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(SplitPlan {
        test: sorted(&ids[..n_test]),
        labeled: sorted(&ids[n_test..n_test + n_labeled]),
        unlabeled: sorted(&ids[n_test + n_labeled..]),
    })
}

pub fn render(ids: &[u64], seed: u64, cfg: &SceneConfig) -> Result<Vec<ToyScene>> {
    Exec::default()
        .map(ids, |&id| {
            generate_scene(scene_seed(seed, id), cfg).map(|mut s| {
                s.id = id;
                s
            })
        })
        .into_iter()
        .collect()
}

pub fn make_split(n_scenes: usize, labeled_fraction: f64, seed: u64, cfg: &SceneConfig) -> Result<DatasetSplit> {
    let plan = plan_split(n_scenes, labeled_fraction, seed)?;
    Ok(DatasetSplit {
        labeled: render(&plan.labeled, seed, cfg)?,
        unlabeled: render(&plan.unlabeled, seed, cfg)?,
        test: render(&plan.test, seed, cfg)?,
        plan,
    })
}
