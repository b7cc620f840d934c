//! Positiveness-weighted contrastive loss between low-density anchors and
//! the high-density cluster center.

use crate::error::{DaclError, Result};
use crate::geometry::{dot, ClassEmbedding};
use crate::tensor::{Tape, Tensor, Var};

/// Softmax affinity of each anchor to its class center, divided by `gamma`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositivenessVector {
    pub class_id: usize,
    pub weights: Vec<f64>,
    pub gamma: Vec<f64>,
}

fn check_gamma(gamma: &[f64], anchors: usize) -> Result<()> {
    if gamma.len() != anchors {
        return Err(DaclError::Contract(format!("{} gamma values for {anchors} anchors", gamma.len())));
    }
    if let Some(g) = gamma.iter().find(|&&g| !(g > 0.0)) {
        return Err(DaclError::config("gamma", format!("scaling factor {g} must be positive")));
    }
    Ok(())
}

/// `w_i = softmax_i(m_i · center) / gamma_i` over the anchors of one class.
pub fn positiveness(
    class_id: usize,
    anchors: &[ClassEmbedding],
    center: &[f64],
    gamma: &[f64],
) -> Result<PositivenessVector> {
    if anchors.is_empty() {
        return Err(DaclError::Contract("positiveness needs at least one anchor".into()));
    }
    check_gamma(gamma, anchors.len())?;
    let logits: Vec<f64> = anchors.iter().map(|a| dot(&a.vector, center)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let weights = exps.iter().zip(gamma).map(|(e, g)| e / z / g).collect();
    Ok(PositivenessVector { class_id, weights, gamma: gamma.to_vec() })
}

/// Positiveness of `anchors` (`[q, d]` on the tape) as a `[q, 1]` column.
///
/// Gradients flow into the anchors; the center is a constant.
pub fn positiveness_on_tape(tape: &mut Tape, anchors: Var, center: &[f64], gamma: &[f64]) -> Result<Var> {
    let q = tape.value(anchors).rows();
    check_gamma(gamma, q)?;
    let c = tape.constant(Tensor::new(vec![center.len(), 1], center.to_vec())?);
    let logits = tape.matmul(anchors, c)?;
    let row = tape.reshape(logits, vec![1, q])?;
    let sm = tape.softmax_lastdim(row);
    let inv_gamma = tape.constant(Tensor::new(vec![1, q], gamma.iter().map(|g| 1.0 / g).collect())?);
    let w = tape.mul(sm, inv_gamma)?;
    tape.reshape(w, vec![q, 1])
}

/// Inputs of the contrastive term of one class.
#[derive(Clone, Debug)]
pub struct ClassContrast {
    pub class_id: usize,
    /// `[q, d]` normalized anchor rows, carrying gradients.
    pub anchors: Var,
    pub center: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
    /// Per-anchor scaling factors; all ones by default.
    pub gamma: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub tau: f64,
    /// Replace positiveness scores with `w_i = 1`.
    pub uniform_w: bool,
    /// Add the positive logit to the denominator (InfoNCE form).
    pub infonce_denominator: bool,
}

/// Per-class contributions and their sum on the tape.
#[derive(Debug)]
pub struct ContrastiveTerms {
    pub per_class: Vec<(usize, f64)>,
    pub total: Var,
    pub tau: f64,
}

/// Soft density-guided contrastive loss, summed over classes and anchors:
///
/// `-Σ_n Σ_i log[ w_i exp(m_i·c_n/τ) / Σ_{p⁻} exp(m_i·p⁻/τ) ]`
///
/// The denominator holds negatives only unless `infonce_denominator` is set,
/// so individual terms may be negative. Classes without negatives are
/// skipped.
pub fn soft_contrastive_loss(tape: &mut Tape, classes: &[ClassContrast], opts: LossOptions) -> Result<ContrastiveTerms> {
    if !(opts.tau > 0.0) {
        return Err(DaclError::config("tau", format!("temperature {} must be positive", opts.tau)));
    }
    let mut per_class = Vec::new();
    let mut terms = Vec::new();
    for cls in classes {
        if cls.negatives.is_empty() || tape.value(cls.anchors).rows() == 0 {
            continue;
        }
        let q = tape.value(cls.anchors).rows();
        let d = tape.value(cls.anchors).cols();
        if cls.center.len() != d || cls.negatives.iter().any(|n| n.len() != d) {
            return Err(DaclError::shape("soft_contrastive_loss", "key width differs from anchor width"));
        }
        let center = tape.constant(Tensor::new(vec![d, 1], cls.center.clone())?);
        let pos = tape.matmul(cls.anchors, center)?;
        let pos_scaled = tape.scale(pos, 1.0 / opts.tau);

        let mut keys: Vec<&[f64]> = Vec::with_capacity(cls.negatives.len() + 1);
        if opts.infonce_denominator {
            keys.push(&cls.center);
        }
        keys.extend(cls.negatives.iter().map(Vec::as_slice));
        let mut kt = vec![0.0; d * keys.len()];
        for (j, k) in keys.iter().enumerate() {
            for (i, v) in k.iter().enumerate() {
                kt[i * keys.len() + j] = *v;
            }
        }
        let kt = tape.constant(Tensor::new(vec![d, keys.len()], kt)?);
        let sims = tape.matmul(cls.anchors, kt)?;
        let scaled = tape.scale(sims, 1.0 / opts.tau);
        let lse = tape.log_sum_exp_lastdim(scaled);
        let lse = tape.reshape(lse, vec![q, 1])?;

        // -log w_i - s⁺_i/τ + lse_i
        let mut term = tape.sub(lse, pos_scaled)?;
        if !opts.uniform_w {
            let w = positiveness_on_tape(tape, cls.anchors, &cls.center, &cls.gamma)?;
            let log_w = tape.log(w);
            term = tape.sub(term, log_w)?;
        }
        let s = tape.sum(term);
        per_class.push((cls.class_id, tape.value(s).data()[0]));
        terms.push(s);
    }
    let total = if terms.is_empty() {
        log::warn!("contrastive loss: every class skipped, using zero");
        tape.constant(Tensor::scalar(0.0))
    } else {
        let stacked = tape.concat(&terms)?;
        tape.sum(stacked)
    };
    Ok(ContrastiveTerms { per_class, total, tau: opts.tau })
}

/// Minimizes `-Σ w_i log s_i / Σ w` over the probability simplex by gradient
/// descent on softmax logits and returns the optimal `s`.
///
/// The optimum is `w / Σ w`; this routine reaches it numerically through the
/// autodiff engine and serves as a self-test of the weighting scheme.
pub fn claim1_verify(w: &[f64], steps: usize, lr: f64) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(DaclError::config("w", "empty weight vector"));
    }
    if let Some(x) = w.iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
        return Err(DaclError::config("w", format!("weight {x} must be positive and finite")));
    }
    let total: f64 = w.iter().sum();
    let target = Tensor::new(vec![1, w.len()], w.iter().map(|x| -x / total).collect())?;
    let mut logits = Tensor::zeros(vec![1, w.len()]).with_requires_grad(true);
    let mut residual = f64::INFINITY;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let theta = tape.leaf(&logits);
        let s = tape.softmax_lastdim(theta);
        let log_s = tape.log(s);
        let tw = tape.constant(target.clone());
        let weighted = tape.mul(log_s, tw)?;
        let obj = tape.sum(weighted);
        let grads = tape.backward(obj)?;
        let g = grads.get(theta).expect("leaf requires grad");
        residual = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if residual < 1e-10 {
            return Ok(tape.value(s).data().to_vec());
        }
        logits.data_mut().iter_mut().zip(g).for_each(|(t, gi)| *t -= lr * gi);
    }
    Err(DaclError::NonConvergence { steps, residual })
}
