//! Built-in invariant checks run by `dacl selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dacl::bank::ClassMemoryBank;
use dacl::cotrain::{effective_weights, warmup_lambda, TrainConfig};
use dacl::geometry::{density_multi_scale, ClassEmbedding, Origin, ScaleSet};
use dacl::loss::{claim1_verify, soft_contrastive_loss, ClassContrast, LossOptions};
use dacl::metrics::{asd, dice_jaccard, LabelMap};
use dacl::tensor::{Tape, Tensor};

/// Result of one named check.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub module: &'static str,
    pub id: &'static str,
    pub failure: Option<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

fn check(module: &'static str, id: &'static str, f: impl FnOnce() -> Result<(), String>) -> CheckOutcome {
    let failure = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(r) => r.err(),
        Err(_) => Some("panicked".into()),
    };
    CheckOutcome { module, id, failure }
}

fn expect_close(what: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: observed {got:.12e}, expected {want:.12e} (tol {tol:e})"))
    }
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn claim1() -> Result<(), String> {
    let s = claim1_verify(&[1.0, 2.0, 3.0], 10_000, 1.0).map_err(|e| e.to_string())?;
    for (got, want) in s.iter().zip([1.0 / 6.0, 1.0 / 3.0, 0.5]) {
        expect_close("s*", *got, want, 1e-4)?;
    }
    Ok(())
}

fn warmup() -> Result<(), String> {
    let l = warmup_lambda(3000, 3000, 0.1, 5.0).map_err(|e| e.to_string())?;
    if l != 0.1 {
        return Err(format!("lambda(t_max) = {l}, expected 0.1"));
    }
    let half = warmup_lambda(1500, 3000, 0.1, 5.0).map_err(|e| e.to_string())?;
    expect_close("lambda(t_max/2)", half, 0.1 * (-1.25f64).exp(), 1e-12)?;
    let gated = effective_weights(999, &TrainConfig::default()).map_err(|e| e.to_string())?;
    if gated != (0.0, 1.0) {
        return Err(format!("gated weights {gated:?}, expected (0, 1)"));
    }
    Ok(())
}

fn density_oracle() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scales = ScaleSet::default();
    for trial in 0..20 {
        let n = rng.random_range(2..60);
        let pool: Vec<ClassEmbedding> =
            (0..n).map(|i| ClassEmbedding::new(random_unit(&mut rng, 8), 0, Origin::Batch, i as u64)).collect();
        let got = density_multi_scale(&pool, &pool, &scales).map_err(|e| e.to_string())?;
        for (i, q) in pool.iter().enumerate() {
            let mut sims: Vec<f64> = pool
                .iter()
                .filter(|p| p.seq_id != q.seq_id)
                .map(|p| q.vector.iter().zip(&p.vector).map(|(a, b)| a * b).sum())
                .collect();
            sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let want = scales
                .ks()
                .iter()
                .map(|&k| {
                    let k = k.min(sims.len());
                    sims[..k].iter().sum::<f64>() / k as f64
                })
                .sum::<f64>()
                / scales.ks().len() as f64;
            expect_close(&format!("trial {trial} query {i}"), got[i], want, 1e-12)?;
        }
    }
    Ok(())
}

fn contrastive_gradient() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (q, d) = (3, 5);
    let anchors: Vec<f64> = (0..q).flat_map(|_| random_unit(&mut rng, d)).collect();
    let center = random_unit(&mut rng, d);
    let negatives: Vec<Vec<f64>> = (0..4).map(|_| random_unit(&mut rng, d)).collect();
    let opts = LossOptions { tau: 0.4, uniform_w: false, infonce_denominator: false };
    let eval = |vals: &[f64], grad: bool| -> Result<(f64, Vec<f64>), String> {
        let mut tape = Tape::new();
        let t = Tensor::new(vec![q, d], vals.to_vec()).map_err(|e| e.to_string())?.with_requires_grad(grad);
        let a = tape.leaf(&t);
        let cls = ClassContrast {
            class_id: 0,
            anchors: a,
            center: center.clone(),
            negatives: negatives.clone(),
            gamma: vec![1.0; q],
        };
        let terms = soft_contrastive_loss(&mut tape, &[cls], opts).map_err(|e| e.to_string())?;
        let value = tape.value(terms.total).data()[0];
        let g = if grad {
            tape.backward(terms.total).map_err(|e| e.to_string())?.get(a).map(<[f64]>::to_vec).unwrap_or_default()
        } else {
            Vec::new()
        };
        Ok((value, g))
    };
    let (_, grad) = eval(&anchors, true)?;
    let h = 1e-5;
    for i in 0..anchors.len() {
        let mut plus = anchors.clone();
        let mut minus = anchors.clone();
        plus[i] += h;
        minus[i] -= h;
        let fd = (eval(&plus, false)?.0 - eval(&minus, false)?.0) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
        if rel > 1e-4 {
            return Err(format!("component {i}: analytic {} vs finite difference {fd} (rel {rel:.2e})", grad[i]));
        }
    }
    Ok(())
}

fn fifo() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bank = ClassMemoryBank::new(0, 7).map_err(|e| e.to_string())?;
    let mut all = Vec::new();
    for seq in 0..200u64 {
        bank.push([ClassEmbedding::new(vec![rng.random()], 0, Origin::Batch, seq)]).map_err(|e| e.to_string())?;
        all.push(seq);
        let want = &all[all.len().saturating_sub(7)..];
        let got: Vec<u64> = bank.snapshot().iter().map(|e| e.seq_id).collect();
        if got != want {
            return Err(format!("after push {seq}: {got:?} != {want:?}"));
        }
    }
    Ok(())
}

fn metric_identities() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..50 {
        let mk = |rng: &mut ChaCha8Rng| {
            LabelMap::new(6, 5, (0..30).map(|_| rng.random_bool(0.4) as u8).collect()).expect("6x5")
        };
        let (p, g) = (mk(&mut rng), mk(&mut rng));
        let o = dice_jaccard(&p, &g, 1).map_err(|e| e.to_string())?;
        let d = o.dice / 100.0;
        expect_close(&format!("trial {trial} J = D/(2-D)"), o.jaccard / 100.0, d / (2.0 - d), 1e-12)?;
    }
    let mut a = vec![0u8; 25];
    let mut b = vec![0u8; 25];
    a[10] = 1;
    b[13] = 1;
    let got = asd(&LabelMap::new(5, 5, a).unwrap(), &LabelMap::new(5, 5, b).unwrap(), 1).map_err(|e| e.to_string())?;
    expect_close("single-pixel ASD", got.unwrap_or(f64::NAN), 3.0, 0.0)
}

/// Runs every check in a fixed order.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        check("dacl-loss", "claim1-simplex-optimum", claim1),
        check("cotrain", "warmup-schedule", warmup),
        check("geometry", "multiscale-density-oracle", density_oracle),
        check("dacl-loss", "anchor-gradient-fd", contrastive_gradient),
        check("memory-bank", "fifo-sliding-window", fifo),
        check("metrics", "jaccard-dice-identity-and-asd", metric_identities),
    ]
}
