use crate::error::{DaclError, Result};
use crate::tensor::{Tape, Tensor, Var};

use super::TrainConfig;

/// Smoothing term of the soft Dice ratio.
const DICE_EPS: f64 = 1e-5;

/// `base * exp(-sharpness * (1 - t/t_max)^2)`, without the early gate.
pub fn warmup_lambda(t: usize, t_max: usize, base: f64, sharpness: f64) -> Result<f64> {
    if t_max == 0 {
        return Err(DaclError::config("t_max", "must be positive"));
    }
    if t > t_max {
        return Err(DaclError::Contract(format!("t = {t} beyond t_max = {t_max}")));
    }
    let r = 1.0 - t as f64 / t_max as f64;
    Ok(base * (-sharpness * r * r).exp())
}

/// Weights `(lambda_cl, lambda_cross)` in effect at step `t`.
///
/// Before `warmup_gate_iters` the contrastive weight is 0 and the
/// cross-supervision weight is 1.
pub fn effective_weights(t: usize, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let lam = warmup_lambda(t, cfg.t_max, cfg.warmup_base, cfg.warmup_sharpness)?;
    if t < cfg.warmup_gate_iters {
        Ok((0.0, 1.0))
    } else {
        Ok((lam, cfg.lambda_cross))
    }
}

pub fn one_hot(labels: &[u8], num_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= num_classes {
            return Err(DaclError::Contract(format!("label {l} with {num_classes} classes")));
        }
        data[i * num_classes + l as usize] = 1.0;
    }
    Tensor::new(vec![labels.len(), num_classes], data)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(t: &Tensor) -> Vec<u8> {
    let c = t.cols();
    t.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}

fn check_logits(tape: &Tape, logits: Var, rows: usize, num_classes: usize) -> Result<()> {
    let s = tape.value(logits).shape();
    if s.len() != 2 || s[0] != rows || s[1] != num_classes {
        return Err(DaclError::Contract(format!(
            "logits of shape {s:?} against {rows} labels and {num_classes} classes"
        )));
    }
    Ok(())
}

/// Mean pixel cross-entropy against a constant one-hot target.
fn cross_entropy(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    let rows = target.rows();
    let logp = tape.log_softmax_lastdim(logits);
    let t = tape.constant(target.clone());
    let picked = tape.mul(logp, t)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / rows as f64))
}

/// `1 - mean_c (2|P∩G| + eps) / (|P| + |G| + eps)` with soft `P`.
fn soft_dice_loss(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    let probs = tape.softmax_lastdim(logits);
    let t = tape.constant(target.clone());
    let prod = tape.mul(probs, t)?;
    let inter = tape.sum_rows(prod);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_EPS);
    let psum = tape.sum_rows(probs);
    let gsum = tape.sum_rows(t);
    let den = tape.add(psum, gsum)?;
    let den = tape.add_scalar(den, DICE_EPS);
    let ratio = tape.div(num, den)?;
    let m = tape.mean(ratio);
    let neg = tape.scale(m, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Average over both models of `0.5 * (CE + soft Dice)` on labeled pixels.
pub fn supervised_loss(tape: &mut Tape, logits_a: Var, logits_b: Var, labels: &[u8], num_classes: usize) -> Result<Var> {
    check_logits(tape, logits_a, labels.len(), num_classes)?;
    check_logits(tape, logits_b, labels.len(), num_classes)?;
    let target = one_hot(labels, num_classes)?;
    let mut per_model = Vec::with_capacity(2);
    for logits in [logits_a, logits_b] {
        let ce = cross_entropy(tape, logits, &target)?;
        let dice = soft_dice_loss(tape, logits, &target)?;
        per_model.push(tape.add(ce, dice)?);
    }
    let both = tape.add(per_model[0], per_model[1])?;
    Ok(tape.scale(both, 0.25))
}

/// One-hot hard pseudo-labels from `logits`, with rows whose top softmax
/// probability is below `min_confidence` left all zero.
pub fn pseudo_labels(logits: &Tensor, min_confidence: f64) -> Tensor {
    let c = logits.cols();
    let mut data = vec![0.0; logits.len()];
    for (r, row) in logits.data().chunks(c).enumerate() {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        let z: f64 = row.iter().map(|v| (v - row[best]).exp()).sum();
        if 1.0 / z >= min_confidence {
            data[r * c + best] = 1.0;
        }
    }
    Tensor::new(logits.shape().to_vec(), data).expect("same shape")
}

/// `CE(a, argmax b) + CE(b, argmax a)` with detached hard pseudo-labels.
///
/// Pixels where the labeling model's top probability is below
/// `min_confidence` contribute zero; the mean still runs over every pixel.
/// A threshold of 0 keeps every pixel.
pub fn cross_supervised_loss(tape: &mut Tape, logits_a: Var, logits_b: Var, min_confidence: f64) -> Result<Var> {
    let sa = tape.value(logits_a).shape().to_vec();
    if sa != tape.value(logits_b).shape() || sa.len() != 2 {
        return Err(DaclError::shape(
            "cross_supervised_loss",
            format!("{sa:?} vs {:?}", tape.value(logits_b).shape()),
        ));
    }
    let from_b = pseudo_labels(tape.value(logits_b), min_confidence);
    let from_a = pseudo_labels(tape.value(logits_a), min_confidence);
    let la = cross_entropy(tape, logits_a, &from_b)?;
    let lb = cross_entropy(tape, logits_b, &from_a)?;
    tape.add(la, lb)
}
