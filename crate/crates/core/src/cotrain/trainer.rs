use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{union_pool, BankSet};
use crate::error::{DaclError, Result, StageExt};
use crate::geometry::{density_multi_scale, ClassEmbedding, Origin, SeqCounter};
use crate::loss::{soft_contrastive_loss, ClassContrast, LossOptions};
use crate::metrics::{evaluate_cases, EvalReport, LabelMap};
use crate::prototype::{binarize_mask, block_average_pool_on_tape, ActivationMask, MaskSource};
use crate::sampler::{sample_all, SamplerConfig};
use crate::synth::{DatasetSplit, ToyScene};
use crate::tensor::{Grid, Sgd, Tape, Tensor, Var};

use super::losses::{argmax_rows, cross_supervised_loss, effective_weights, supervised_loss};
use super::model::{ModelSpec, SegModel};
use super::TrainConfig;

/// One line of `train_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub t: usize,
    pub loss_total: f64,
    pub loss_sup: f64,
    pub loss_cross: f64,
    pub loss_cl: f64,
    pub lambda_cl: f64,
    pub bank_fill: Vec<usize>,
    /// Anchors used per class id; 0 for classes that were skipped.
    pub anchors_per_class: Vec<usize>,
}

/// Images of one step; the first `n_labeled` carry supervision.
#[derive(Clone, Debug)]
pub struct BatchBundle<'a> {
    pub scenes: Vec<&'a ToyScene>,
    pub n_labeled: usize,
}

impl BatchBundle<'_> {
    fn dims(&self) -> Result<(usize, usize)> {
        let first = self.scenes.first().ok_or_else(|| DaclError::Contract("empty batch".into()))?;
        if self.scenes.iter().any(|s| s.width != first.width || s.height != first.height) {
            return Err(DaclError::Contract("batch mixes scene sizes".into()));
        }
        Ok((first.width, first.height))
    }
}

fn stack_images(scenes: &[&ToyScene]) -> Result<Tensor> {
    let data: Vec<f64> = scenes.iter().flat_map(|s| s.image.iter().copied()).collect();
    let n = data.len();
    Tensor::new(vec![n, 1], data)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_BA7C_0000_0000);
    rng.set_stream(id);
    rng
}

fn softmax_rows(t: &Tensor) -> Vec<f64> {
    let c = t.cols();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Two co-trained segmentation models with shared class memory banks.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub models: [SegModel; 2],
    optims: [Sgd; 2],
    pub banks: BankSet,
    seq: SeqCounter,
    /// Independent streams so that enabling one component does not shift
    /// the batches or dropout masks seen by another.
    batch_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    sampler_rng: ChaCha8Rng,
    t: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = ModelSpec::from_config(&cfg);
        let seed = cfg.seed;
        let optim = || Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
        Ok(Self {
            models: [SegModel::new(spec, seed.wrapping_mul(2).wrapping_add(1)), SegModel::new(spec, seed.wrapping_mul(2).wrapping_add(2))],
            optims: [optim(), optim()],
            banks: BankSet::new(cfg.num_classes, cfg.bank_size)?,
            seq: SeqCounter::default(),
            batch_rng: stream(seed, 0),
            dropout_rng: stream(seed, 1),
            sampler_rng: stream(seed, 2),
            t: 0,
            cfg,
        })
    }

    pub fn step_index(&self) -> usize {
        self.t
    }

    /// Draws `labeled_per_batch` labeled and the remaining unlabeled scenes
    /// with replacement. Without unlabeled scenes the batch is all labeled.
    pub fn sample_batch<'a>(&mut self, split: &'a DatasetSplit) -> Result<BatchBundle<'a>> {
        if split.labeled.is_empty() {
            return Err(DaclError::Contract("no labeled scenes to train on".into()));
        }
        let n_l = if split.unlabeled.is_empty() { self.cfg.batch_size } else { self.cfg.labeled_per_batch };
        let mut scenes = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..n_l {
            scenes.push(&split.labeled[self.batch_rng.random_range(0..split.labeled.len())]);
        }
        for _ in n_l..self.cfg.batch_size {
            scenes.push(&split.unlabeled[self.batch_rng.random_range(0..split.unlabeled.len())]);
        }
        Ok(BatchBundle { scenes, n_labeled: n_l })
    }

    /// Runs `cfg.iters - t` steps, calling `on_step` after each.
    pub fn fit(&mut self, split: &DatasetSplit, mut on_step: impl FnMut(&Trainer, &StepStats) -> Result<()>) -> Result<()> {
        while self.t < self.cfg.iters {
            let batch = self.sample_batch(split)?;
            let stats = self.train_step(&batch)?;
            on_step(self, &stats)?;
        }
        Ok(())
    }

    /// One optimization step of both models.
    pub fn train_step(&mut self, batch: &BatchBundle<'_>) -> Result<StepStats> {
        let cfg = self.cfg.clone();
        if self.t >= cfg.t_max {
            return Err(DaclError::Contract(format!("step {} at or beyond t_max {}", self.t, cfg.t_max)));
        }
        if batch.n_labeled == 0 || batch.n_labeled > batch.scenes.len() {
            return Err(DaclError::Contract("every batch needs at least one labeled scene".into()));
        }
        let (w, h) = batch.dims()?;
        let hw = w * h;
        let b = batch.scenes.len();
        let (lambda_cl, lambda_cross) = effective_weights(self.t, &cfg)?;

        let mut tape = Tape::new();
        let x = tape.constant(stack_images(&batch.scenes)?);
        let project = cfg.contrastive_enabled();
        let out_a = self.models[0].forward::<ChaCha8Rng>(&mut tape, x, b, h, w, true, project, None).stage("forward")?;
        let out_b = self.models[1]
            .forward(&mut tape, x, b, h, w, true, project, Some((cfg.decoder_dropout, &mut self.dropout_rng)))
            .stage("forward")?;

        let labels: Vec<u8> =
            batch.scenes[..batch.n_labeled].iter().flat_map(|s| s.label.labels.iter().copied()).collect();
        let la = tape.slice(out_a.logits, 0, batch.n_labeled * hw)?;
        let lb = tape.slice(out_b.logits, 0, batch.n_labeled * hw)?;
        let l_sup = supervised_loss(&mut tape, la, lb, &labels, cfg.num_classes).stage("supervised loss")?;
        let l_cross = cross_supervised_loss(&mut tape, out_a.logits, out_b.logits, cfg.cross_confidence).stage("cross supervision")?;
        let cross_w = tape.scale(l_cross, lambda_cross);
        let mut total = tape.add(l_sup, cross_w)?;

        let mut anchors_per_class = vec![0; cfg.num_classes];
        let mut loss_cl = 0.0;
        let mut batch_embeddings = Vec::new();
        if cfg.contrastive_enabled() {
            let (protos, mut embs) = self.batch_prototypes(&mut tape, batch, &out_a, &out_b, hw).stage("prototypes")?;
            self.assign_densities(&mut embs).stage("density")?;
            if let Some(protos) = protos {
                let snapshots: Vec<Vec<ClassEmbedding>> = (0..cfg.num_classes)
                    .map(|c| if cfg.no_bank { Vec::new() } else { self.banks.bank(c).snapshot() })
                    .collect();
                let sampler = SamplerConfig {
                    n_q: cfg.n_q,
                    n_p_plus: cfg.n_p_plus,
                    n_p_minus: cfg.n_p_minus,
                    random: cfg.pcl_random_sampling,
                    negatives_from_all: cfg.negatives_from_all,
                };
                let sets = sample_all(&embs, &snapshots, &sampler, &mut self.sampler_rng);
                let row_of: BTreeMap<u64, usize> = embs.iter().enumerate().map(|(i, e)| (e.seq_id, i)).collect();
                let mut classes = Vec::with_capacity(sets.len());
                for s in &sets {
                    let idx: Vec<usize> = s.anchors.iter().map(|a| row_of[&a.seq_id]).collect();
                    anchors_per_class[s.class_id] = idx.len();
                    classes.push(ClassContrast {
                        class_id: s.class_id,
                        anchors: tape.gather_rows(protos, &idx)?,
                        center: s.center.clone(),
                        negatives: s.negatives.iter().map(|n| n.vector.clone()).collect(),
                        gamma: vec![cfg.gamma; idx.len()],
                    });
                }
                let opts =
                    LossOptions { tau: cfg.tau, uniform_w: cfg.uniform_w, infonce_denominator: cfg.infonce_denominator };
                let terms = soft_contrastive_loss(&mut tape, &classes, opts).stage("contrastive loss")?;
                loss_cl = tape.value(terms.total).data()[0];
                if lambda_cl > 0.0 {
                    let weighted = tape.scale(terms.total, lambda_cl);
                    total = tape.add(total, weighted)?;
                }
            }
            batch_embeddings = embs;
        }

        let grads = tape.backward(total).stage("backward")?;
        for (m, (model, optim)) in self.models.iter_mut().zip(self.optims.iter_mut()).enumerate() {
            let vars = if m == 0 { &out_a.params } else { &out_b.params };
            for (v, p) in vars.iter().zip(model.params.iter_mut()) {
                grads.accumulate_into(*v, p)?;
            }
            let mut refs: Vec<&mut Tensor> = model.params.iter_mut().collect();
            optim.step(&mut refs).stage("sgd")?;
        }

        if !cfg.no_bank {
            let keep: Vec<ClassEmbedding> = batch_embeddings.into_iter().filter(|e| e.density.is_some()).collect();
            self.banks.push_all(&keep).stage("bank push")?;
        }

        let stats = StepStats {
            t: self.t,
            loss_total: tape.value(total).data()[0],
            loss_sup: tape.value(l_sup).data()[0],
            loss_cross: tape.value(l_cross).data()[0],
            loss_cl,
            lambda_cl,
            bank_fill: self.banks.fills(),
            anchors_per_class,
        };
        self.t += 1;
        Ok(stats)
    }

    /// Normalized prototypes of both models on the tape, model a first.
    ///
    /// Labeled scenes use ground-truth masks; unlabeled scenes use the
    /// counterpart model's class probabilities thresholded at `phi`.
    fn batch_prototypes(
        &mut self,
        tape: &mut Tape,
        batch: &BatchBundle<'_>,
        out_a: &super::model::ModelOutput,
        out_b: &super::model::ModelOutput,
        hw: usize,
    ) -> Result<(Option<Var>, Vec<ClassEmbedding>)> {
        let n = self.cfg.num_classes;
        let (w, h) = batch.dims()?;
        let probs = [softmax_rows(tape.value(out_a.logits)), softmax_rows(tape.value(out_b.logits))];
        let mut rows = Vec::new();
        let mut meta = Vec::new();
        for (m, out) in [out_a, out_b].into_iter().enumerate() {
            let other = &probs[1 - m];
            for (i, scene) in batch.scenes.iter().enumerate() {
                let mut masks = Vec::new();
                for c in 0..n {
                    let act = if i < batch.n_labeled {
                        ActivationMask::from_labels(&scene.label.labels, w, h, c)
                    } else {
                        let scores = (0..hw).map(|p| other[(i * hw + p) * n + c]).collect();
                        ActivationMask { class_id: c, width: w, height: h, scores, source: MaskSource::PseudoLabel }
                    };
                    let bin = binarize_mask(&act, self.cfg.phi)?;
                    if bin.count() > 0 {
                        masks.push((c, bin));
                    }
                }
                if masks.is_empty() {
                    continue;
                }
                let projection = out.projection.ok_or_else(|| DaclError::Contract("forward ran without projection".into()))?;
                let cells = hw / 4;
                let feats = tape.slice(projection, i * cells, (i + 1) * cells)?;
                let refs: Vec<_> = masks.iter().map(|(_, b)| b).collect();
                rows.push(block_average_pool_on_tape(tape, feats, &refs)?);
                meta.extend(masks.iter().map(|(c, _)| *c));
            }
        }
        if rows.is_empty() {
            return Ok((None, Vec::new()));
        }
        let stacked = tape.concat(&rows)?;
        let protos = tape.l2_normalize_lastdim(stacked);
        let value = tape.value(protos);
        let embs = meta
            .into_iter()
            .enumerate()
            .map(|(r, c)| ClassEmbedding::new(value.row(r).to_vec(), c, Origin::Batch, self.seq.next_id()))
            .collect();
        Ok((Some(protos), embs))
    }

    /// Stamps each batch embedding with its density over bank and batch
    /// members of its class. Embeddings alone in their pool get none.
    fn assign_densities(&self, embs: &mut [ClassEmbedding]) -> Result<()> {
        let scales = self.cfg.scale_set()?;
        for c in 0..self.cfg.num_classes {
            let idx: Vec<usize> = (0..embs.len()).filter(|&i| embs[i].class_id == c).collect();
            if idx.is_empty() {
                continue;
            }
            let queries: Vec<ClassEmbedding> = idx.iter().map(|&i| embs[i].clone()).collect();
            let bank = if self.cfg.no_bank { Vec::new() } else { self.banks.bank(c).snapshot() };
            let pool = union_pool(&bank, &queries, c)?;
            if pool.len() < 2 {
                continue;
            }
            let d = density_multi_scale(&queries, &pool, &scales)?;
            for (&i, di) in idx.iter().zip(d) {
                embs[i].density = Some(di);
            }
        }
        Ok(())
    }

    /// Mean of both models' class probabilities, `[scenes*h*w, classes]`.
    pub fn ensemble_probs(&self, scenes: &[&ToyScene]) -> Result<Vec<f64>> {
        let [(pa, _), (pb, _)] = self.forward_eval(scenes)?;
        Ok(pa.iter().zip(&pb).map(|(x, y)| 0.5 * (x + y)).collect())
    }

    /// Per-model class probabilities and projections on `scenes`, evaluated
    /// in chunks of eight without recording gradients.
    pub fn forward_eval(&self, scenes: &[&ToyScene]) -> Result<[(Vec<f64>, Vec<f64>); 2]> {
        let mut out = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
        for chunk in scenes.chunks(8) {
            let bundle = BatchBundle { scenes: chunk.to_vec(), n_labeled: 0 };
            let (w, h) = bundle.dims()?;
            let mut tape = Tape::new();
            let x = tape.constant(stack_images(chunk)?);
            for (m, model) in self.models.iter().enumerate() {
                let o = model.forward::<ChaCha8Rng>(&mut tape, x, chunk.len(), h, w, false, true, None)?;
                out[m].0.extend(softmax_rows(tape.value(o.logits)));
                let low = o.projection.expect("projection requested");
                let grid = Grid { batch: chunk.len(), height: h / 2, width: w / 2, channels: model.spec.proj_dim };
                let up = tape.upsample2(low, grid)?;
                out[m].1.extend_from_slice(tape.value(up).data());
            }
        }
        Ok(out)
    }

    /// Ensemble argmax label maps.
    pub fn predict(&self, scenes: &[ToyScene]) -> Result<Vec<LabelMap>> {
        let refs: Vec<&ToyScene> = scenes.iter().collect();
        let probs = self.ensemble_probs(&refs)?;
        let n = self.cfg.num_classes;
        let t = Tensor::new(vec![probs.len() / n, n], probs)?;
        let labels = argmax_rows(&t);
        let mut offset = 0;
        scenes
            .iter()
            .map(|s| {
                let len = s.width * s.height;
                let m = LabelMap::new(s.width, s.height, labels[offset..offset + len].to_vec());
                offset += len;
                m
            })
            .collect()
    }

    pub fn evaluate(&self, scenes: &[ToyScene]) -> Result<EvalReport> {
        let preds = self.predict(scenes)?;
        let cases: Vec<(LabelMap, LabelMap)> = preds.into_iter().zip(scenes.iter().map(|s| s.label.clone())).collect();
        evaluate_cases(&cases, self.cfg.num_classes)
    }

    pub(crate) fn restore(cfg: TrainConfig, t: usize, params: [Vec<Vec<f64>>; 2], banks: Option<BankSet>) -> Result<Self> {
        let mut tr = Trainer::new(cfg)?;
        let [pa, pb] = params;
        tr.models[0].load_params(pa)?;
        tr.models[1].load_params(pb)?;
        tr.t = t;
        if let Some(b) = banks {
            tr.banks = b;
        }
        Ok(tr)
    }
}
