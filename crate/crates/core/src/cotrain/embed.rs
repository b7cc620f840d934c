use crate::error::Result;
use crate::geometry::{compactness_report, density_multi_scale, ClassEmbedding, CompactnessReport, Origin, SeqCounter};
use crate::prototype::{masked_average_pool, ActivationMask, FeatureMap};
use crate::synth::ToyScene;

use super::Trainer;

/// One test-split prototype with the class its source model predicts for
/// the masked region.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub scene_id: u64,
    pub model: usize,
    pub embedding: ClassEmbedding,
    pub predicted: usize,
}

/// Ground-truth-masked prototypes of both models over `scenes`, model a
/// first. Densities are multi-scale within each class of the output.
pub fn test_embeddings(trainer: &Trainer, scenes: &[ToyScene]) -> Result<Vec<EmbeddingRecord>> {
    let n = trainer.cfg.num_classes;
    let d = trainer.cfg.proj_dim;
    let refs: Vec<&ToyScene> = scenes.iter().collect();
    let outputs = trainer.forward_eval(&refs)?;
    let mut seq = SeqCounter::default();
    let mut records = Vec::new();
    for (m, (probs, proj)) in outputs.iter().enumerate() {
        let mut offset = 0;
        for s in scenes {
            let hw = s.width * s.height;
            let fm = FeatureMap::new(s.width, s.height, d, proj[offset * d..(offset + hw) * d].to_vec())?;
            for c in 0..n {
                let mask = ActivationMask::from_labels(&s.label.labels, s.width, s.height, c);
                let bin = crate::prototype::binarize_mask(&mask, 0.5)?;
                let Some(v) = masked_average_pool(&fm, &bin)? else { continue };
                let mut mean = vec![0.0; n];
                for (p, _) in bin.bits.iter().enumerate().filter(|(_, &b)| b) {
                    let row = &probs[(offset + p) * n..(offset + p + 1) * n];
                    mean.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                let mut predicted = 0;
                for j in 1..n {
                    if mean[j] > mean[predicted] {
                        predicted = j;
                    }
                }
                records.push(EmbeddingRecord {
                    scene_id: s.id,
                    model: m,
                    embedding: ClassEmbedding::new(v, c, Origin::Batch, seq.next_id()).normalized(),
                    predicted,
                });
            }
            offset += hw;
        }
    }
    let scales = trainer.cfg.scale_set()?;
    for c in 0..n {
        let idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].embedding.class_id == c).collect();
        if idx.len() < 2 {
            continue;
        }
        let members: Vec<ClassEmbedding> = idx.iter().map(|&i| records[i].embedding.clone()).collect();
        let dens = density_multi_scale(&members, &members, &scales)?;
        for (&i, dv) in idx.iter().zip(dens) {
            records[i].embedding.density = Some(dv);
        }
    }
    Ok(records)
}

pub fn records_compactness(records: &[EmbeddingRecord]) -> Result<CompactnessReport> {
    let embs: Vec<ClassEmbedding> = records.iter().map(|r| r.embedding.clone()).collect();
    let pred: Vec<usize> = records.iter().map(|r| r.predicted).collect();
    compactness_report(&embs, &pred)
}
