//! Acceptance suite: one PASS/FAIL line per criterion and a summary line.
//!
//! Failing criteria are reported but only fail the process when
//! `DACL_ACCEPTANCE_STRICT=1`, so the workspace test run stays usable while
//! the results remain visible.
//!
//! Criteria 7 and 8 train 6 configurations on 3 seeds at full length and
//! take several minutes on one core.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dacl::bank::ClassMemoryBank;
use dacl::cotrain::{effective_weights, records_compactness, test_embeddings, warmup_lambda, TrainConfig};
use dacl::geometry::{density_multi_scale, ClassEmbedding, CompactnessReport, Origin, ScaleSet};
use dacl::loss::{claim1_verify, soft_contrastive_loss, ClassContrast, LossOptions};
use dacl::metrics::{asd, dice_jaccard, LabelMap, MeanStd};
use dacl::sampler::{sample_all, SamplerConfig};
use dacl::tensor::{Tape, Tensor};
use dacl_cli::args::{GenDataArgs, TrainArgs};
use dacl_cli::commands;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn within(start: Instant, limit: Duration, summary: String) -> Verdict {
    let took = start.elapsed();
    if took < limit {
        Ok(format!("{summary}; {:.2}s", took.as_secs_f64()))
    } else {
        Err(format!("{summary}; took {:.2}s, limit {}s", took.as_secs_f64(), limit.as_secs()))
    }
}

fn density_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scales = ScaleSet::default();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=300);
        let d = rng.random_range(1..=64);
        let pool: Vec<ClassEmbedding> =
            (0..n).map(|i| ClassEmbedding::new(unit(&mut rng, d), 0, Origin::Bank, i as u64)).collect();
        let got = density_multi_scale(&pool, &pool, &scales).map_err(|e| e.to_string())?;
        for (q, g) in pool.iter().zip(got) {
            let mut sims: Vec<f64> =
                pool.iter().filter(|p| p.seq_id != q.seq_id).map(|p| dot(&q.vector, &p.vector)).collect();
            sims.sort_by(|a, b| b.total_cmp(a));
            let want = scales
                .ks()
                .iter()
                .map(|&k| {
                    let k = k.min(sims.len());
                    sims[..k].iter().sum::<f64>() / k as f64
                })
                .sum::<f64>()
                / scales.ks().len() as f64;
            worst = worst.max((g - want).abs());
        }
    }
    if worst >= 1e-12 {
        return Err(format!("max abs err {worst:e} over 200 pools"));
    }
    within(start, Duration::from_secs(10), format!("200 pools, max abs err {worst:.1e}"))
}

fn ranked(v: &[ClassEmbedding], n: usize, ascending: bool) -> Vec<u64> {
    let mut c: Vec<(f64, u64)> = v.iter().filter_map(|e| e.density.map(|d| (d, e.seq_id))).collect();
    c.sort_by(|a, b| if ascending { a.0.total_cmp(&b.0) } else { b.0.total_cmp(&a.0) }.then(a.1.cmp(&b.1)));
    c.into_iter().take(n).map(|x| x.1).collect()
}

fn sampling_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let classes = 4;
    let mut checked = 0;
    for batch_no in 0..200 {
        let batch: Vec<ClassEmbedding> = (0..rng.random_range(1..40))
            .map(|i| {
                let mut e =
                    ClassEmbedding::new(unit(&mut rng, 6), rng.random_range(0..classes), Origin::Batch, 10_000 + i);
                if rng.random_bool(0.9) {
                    e.density = Some(rng.random_range(0..8) as f64 / 7.0);
                }
                e
            })
            .collect();
        let banks: Vec<Vec<ClassEmbedding>> = (0..classes)
            .map(|c| {
                (0..rng.random_range(0..20))
                    .map(|i| {
                        ClassEmbedding::new(unit(&mut rng, 6), c, Origin::Bank, (c * 1000 + i) as u64)
                            .with_density(rng.random_range(-1.0..1.0))
                    })
                    .collect()
            })
            .collect();
        let cfg = SamplerConfig {
            n_q: rng.random_range(1..8),
            n_p_plus: rng.random_range(1..12),
            n_p_minus: usize::MAX,
            random: false,
            negatives_from_all: false,
        };
        let sets = sample_all(&batch, &banks, &cfg, &mut rng);
        let of_class = |c: usize| -> Vec<ClassEmbedding> { batch.iter().filter(|e| e.class_id == c).cloned().collect() };
        let anchors: Vec<Vec<u64>> = (0..classes).map(|c| ranked(&of_class(c), cfg.n_q, true)).collect();
        for s in &sets {
            let c = s.class_id;
            let got_a: Vec<u64> = s.anchors.iter().map(|e| e.seq_id).collect();
            if got_a != anchors[c] {
                return Err(format!("batch {batch_no} class {c}: anchors {got_a:?} != {:?}", anchors[c]));
            }
            let rest: Vec<ClassEmbedding> =
                of_class(c).into_iter().filter(|e| !anchors[c].contains(&e.seq_id)).collect();
            let nb_avail = rest.iter().filter(|e| e.density.is_some()).count();
            let nk_avail = banks[c].len();
            let (wb, wk) = (cfg.n_p_plus.div_ceil(2), cfg.n_p_plus / 2);
            let nb = (wb.min(nb_avail) + wk - wk.min(nk_avail)).min(nb_avail);
            let nk = (wk.min(nk_avail) + wb - wb.min(nb_avail)).min(nk_avail);
            let want_p: BTreeSet<u64> = ranked(&rest, nb, false).into_iter().chain(ranked(&banks[c], nk, false)).collect();
            let got_p: BTreeSet<u64> = s.positives.iter().map(|e| e.seq_id).collect();
            if got_p != want_p {
                return Err(format!("batch {batch_no} class {c}: positives {got_p:?} != {want_p:?}"));
            }
            let want_n: BTreeSet<u64> =
                (0..classes).filter(|&o| o != c).flat_map(|o| anchors[o].iter().copied()).collect();
            let got_n: BTreeSet<u64> = s.negatives.iter().map(|e| e.seq_id).collect();
            if got_n != want_n {
                return Err(format!("batch {batch_no} class {c}: negatives {got_n:?} != {want_n:?}"));
            }
            checked += 1;
        }
    }
    within(start, Duration::from_secs(5), format!("200 batches, {checked} class sets identical"))
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for inst in 0..50 {
        let (q, d) = (rng.random_range(1..=6), rng.random_range(2..=16));
        let anchors: Vec<f64> = (0..q).flat_map(|_| unit(&mut rng, d)).collect();
        let positives: Vec<Vec<f64>> = (0..rng.random_range(1..=6)).map(|_| unit(&mut rng, d)).collect();
        let negatives: Vec<Vec<f64>> = (0..rng.random_range(1..=8)).map(|_| unit(&mut rng, d)).collect();
        let opts = LossOptions { tau: rng.random_range(0.1..1.0), uniform_w: false, infonce_denominator: false };

        let eval = |vals: &[f64], grads: bool| -> Result<(f64, Vec<f64>, bool), String> {
            let mut tape = Tape::new();
            let a = tape.leaf(&Tensor::new(vec![q, d], vals.to_vec()).unwrap().with_requires_grad(grads));
            // keys enter as trainable leaves; the loss must not route gradient into them
            let key_leaves: Vec<_> = positives
                .iter()
                .chain(&negatives)
                .map(|k| tape.leaf(&Tensor::new(vec![1, d], k.clone()).unwrap().with_requires_grad(true)))
                .collect();
            let mut center = vec![0.0; d];
            for p in &positives {
                center.iter_mut().zip(p).for_each(|(c, v)| *c += v);
            }
            let n = center.iter().map(|x| x * x).sum::<f64>().sqrt();
            center.iter_mut().for_each(|c| *c /= n);
            let keys_from_tape: Vec<Vec<f64>> =
                key_leaves[positives.len()..].iter().map(|&v| tape.value(v).data().to_vec()).collect();
            let cls = ClassContrast { class_id: 0, anchors: a, center, negatives: keys_from_tape, gamma: vec![1.0; q] };
            let terms = soft_contrastive_loss(&mut tape, &[cls], opts).map_err(|e| e.to_string())?;
            let value = tape.value(terms.total).data()[0];
            if !grads {
                return Ok((value, Vec::new(), true));
            }
            let g = tape.backward(terms.total).map_err(|e| e.to_string())?;
            let keys_zero =
                key_leaves.iter().all(|&k| g.get(k).is_none_or(|v| v.iter().all(|x| *x == 0.0)));
            Ok((value, g.get(a).map(<[f64]>::to_vec).unwrap_or_default(), keys_zero))
        };
        let (_, grad, keys_zero) = eval(&anchors, true)?;
        if !keys_zero {
            return Err(format!("instance {inst}: nonzero gradient on a key"));
        }
        let h = 1e-5;
        for i in 0..anchors.len() {
            let mut plus = anchors.clone();
            let mut minus = anchors.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (eval(&plus, false)?.0 - eval(&minus, false)?.0) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    if worst >= 1e-4 {
        return Err(format!("max rel err {worst:e} over 50 instances"));
    }
    within(start, Duration::from_secs(30), format!("50 instances, max rel err {worst:.1e}, key gradients zero"))
}

fn simplex_optimum() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=16);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..10.0)).collect();
        let total: f64 = w.iter().sum();
        let s = claim1_verify(&w, 200_000, 1.0).map_err(|e| e.to_string())?;
        for (si, wi) in s.iter().zip(&w) {
            worst = worst.max((si - wi / total).abs());
        }
    }
    if worst < 1e-4 {
        Ok(format!("100 weight vectors, max |s - w/sum w| {worst:.1e}"))
    } else {
        Err(format!("max deviation {worst:e}"))
    }
}

fn schedule() -> Verdict {
    let end = warmup_lambda(3000, 3000, 0.1, 5.0).map_err(|e| e.to_string())?;
    let half = warmup_lambda(1500, 3000, 0.1, 5.0).map_err(|e| e.to_string())?;
    let want_half = 0.1 * (-1.25f64).exp();
    let cfg = TrainConfig::default();
    let gated = (0..cfg.warmup_gate_iters).all(|t| effective_weights(t, &cfg).ok() == Some((0.0, 1.0)));
    if end != 0.1 {
        return Err(format!("lambda(t_max) = {end}"));
    }
    if (half - want_half).abs() >= 1e-12 {
        return Err(format!("lambda(t_max/2) = {half}, expected {want_half}"));
    }
    if !gated {
        return Err("weights before the gate differ from (0, 1)".into());
    }
    Ok(format!("lambda(t_max) = 0.1, |lambda(t_max/2) - 0.1e^-1.25| = {:.1e}, gate holds", (half - want_half).abs()))
}

fn fifo() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for cap in [1usize, 7, 100, 1000] {
        let mut bank = ClassMemoryBank::new(0, cap).map_err(|e| e.to_string())?;
        let mut window: std::collections::VecDeque<u64> = Default::default();
        let mut seq = 0u64;
        while seq < 10_000 {
            let burst = rng.random_range(1..=4u64).min(10_000 - seq);
            let items: Vec<ClassEmbedding> =
                (0..burst).map(|i| ClassEmbedding::new(vec![rng.random()], 0, Origin::Batch, seq + i)).collect();
            for e in &items {
                window.push_back(e.seq_id);
                if window.len() > cap {
                    window.pop_front();
                }
            }
            seq += burst;
            bank.push(items).map_err(|e| e.to_string())?;
            let got: Vec<u64> = bank.snapshot().iter().map(|e| e.seq_id).collect();
            if !got.iter().eq(window.iter()) {
                return Err(format!("capacity {cap}: divergence after {seq} pushes"));
            }
        }
    }
    Ok("10000 pushes per capacity in {1, 7, 100, 1000}, identical at every step".into())
}

fn brute_asd(a: &LabelMap, b: &LabelMap) -> Option<f64> {
    let edge = |m: &LabelMap| -> Vec<(i64, i64)> {
        let (w, h) = (m.width as i64, m.height as i64);
        let on = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && m.labels[(y * w + x) as usize] == 1;
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if on(x, y) && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| !on(x + dx, y + dy)) {
                    out.push((x, y));
                }
            }
        }
        out
    };
    let (ea, eb) = (edge(a), edge(b));
    if ea.is_empty() || eb.is_empty() {
        return None;
    }
    let side = |from: &[(i64, i64)], to: &[(i64, i64)]| -> f64 {
        let mut s = 0.0;
        for &(x, y) in from {
            let mut best = f64::INFINITY;
            for &(u, v) in to {
                best = best.min((((x - u).pow(2) + (y - v).pow(2)) as f64).sqrt());
            }
            s += best;
        }
        s
    };
    Some((side(&ea, &eb) + side(&eb, &ea)) / (ea.len() + eb.len()) as f64)
}

fn metric_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for pair in 0..500 {
        let (w, h) = (rng.random_range(1..=24), rng.random_range(1..=24));
        let p = rng.random_range(0.05..0.95);
        let mut mk = || LabelMap::new(w, h, (0..w * h).map(|_| rng.random_bool(p) as u8).collect()).unwrap();
        let (a, b) = (mk(), mk());
        let o = dice_jaccard(&a, &b, 1).map_err(|e| e.to_string())?;
        let d = o.dice / 100.0;
        worst = worst.max((o.jaccard / 100.0 - d / (2.0 - d)).abs());
        let got = asd(&a, &b, 1).map_err(|e| e.to_string())?;
        let want = brute_asd(&a, &b);
        if got != want {
            return Err(format!("pair {pair}: ASD {got:?} != brute force {want:?}"));
        }
    }
    if worst >= 1e-12 {
        return Err(format!("max |J - D/(2-D)| {worst:e}"));
    }
    Ok(format!("500 pairs, max |J - D/(2-D)| {worst:.1e}, ASD equal to brute force"))
}

/// Rows I through VI, each adding one component to the previous.
const ROWS: [(&str, &str); 6] =
    [("I", "baseline"), ("II", "pcl"), ("III", "da"), ("IV", "ms"), ("V", "bank"), ("VI", "none")];
const SEEDS: [u64; 3] = [1, 2, 3];

struct Sweep {
    dice: Vec<Vec<f64>>,
    compactness: Vec<Vec<CompactnessReport>>,
    wall: Duration,
}

fn run_sweep(root: &Path) -> Result<Sweep, String> {
    let start = Instant::now();
    let mut dice = vec![Vec::new(); ROWS.len()];
    let mut compactness = vec![Vec::new(); ROWS.len()];
    for seed in SEEDS {
        let data = root.join(format!("data_{seed}"));
        commands::gen_data(&GenDataArgs {
            out: data.clone(),
            scenes: 100,
            labeled_frac: 0.05,
            seed,
            noise: None,
            blur: None,
            force: false,
        })
        .map_err(|e| e.to_string())?;
        for (r, (name, row)) in ROWS.iter().enumerate() {
            let out = root.join(format!("run_{row}_{seed}"));
            let args = TrainArgs {
                data: data.clone(),
                out: out.clone(),
                config: None,
                seed: Some(seed),
                ablate: Some(row.to_string()),
                lambda_cl: None,
                iters: Some(3000),
                eval_every: None,
                set: Vec::new(),
                force: false,
            };
            let report = commands::train(&args).map_err(|e| format!("row {name} seed {seed}: {e}"))?;
            dice[r].push(report.macro_avg.dice);
            let run = commands::load_run(&out, None).map_err(|e| e.to_string())?;
            let records = test_embeddings(&run.trainer, &run.split.test).map_err(|e| e.to_string())?;
            compactness[r].push(records_compactness(&records).map_err(|e| e.to_string())?);
            eprintln!("  row {name:<3} seed {seed}: macro Dice {:.2}", report.macro_avg.dice);
        }
    }
    Ok(Sweep { dice, compactness, wall: start.elapsed() })
}

fn directional(sweep: &Sweep) -> Verdict {
    let stats: Vec<MeanStd> = sweep.dice.iter().map(|d| MeanStd::of(d).unwrap()).collect();
    let sd = |s: &MeanStd| s.std.unwrap_or(0.0);
    let table: Vec<String> =
        ROWS.iter().zip(&stats).map(|((n, _), s)| format!("{n} {:.2}±{:.2}", s.mean, sd(s))).collect();
    let mut problems = Vec::new();
    let gain = stats[5].mean - stats[0].mean;
    if gain < 2.0 {
        problems.push(format!("VI - I = {gain:+.2} Dice, need +2"));
    }
    for r in 1..stats.len() {
        let pooled = ((sd(&stats[r - 1]).powi(2) + sd(&stats[r]).powi(2)) / 2.0).sqrt();
        if stats[r].mean < stats[r - 1].mean - pooled {
            problems.push(format!("{} < {} by more than pooled std {pooled:.2}", ROWS[r].0, ROWS[r - 1].0));
        }
    }
    if sweep.wall > Duration::from_secs(15 * 60) {
        problems.push(format!("sweep took {:.0}s, limit 900s", sweep.wall.as_secs_f64()));
    }
    let summary = format!("{}; {:.0}s", table.join(", "), sweep.wall.as_secs_f64());
    if problems.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; {}", problems.join("; ")))
    }
}

fn mean_of(reports: &[CompactnessReport], f: fn(&CompactnessReport) -> f64) -> f64 {
    reports.iter().map(f).sum::<f64>() / reports.len() as f64
}

fn compactness(sweep: &Sweep) -> Verdict {
    let (base, full) = (&sweep.compactness[0], &sweep.compactness[5]);
    let s = (mean_of(base, |r| r.silhouette), mean_of(full, |r| r.silhouette));
    let db = (mean_of(base, |r| r.davies_bouldin), mean_of(full, |r| r.davies_bouldin));
    let v = (mean_of(base, |r| r.v_measure), mean_of(full, |r| r.v_measure));
    let summary = format!(
        "silhouette {:.3} -> {:.3}, Davies-Bouldin {:.3} -> {:.3}, V-measure {:.4} -> {:.4} (mean of 3 seeds, I -> VI)",
        s.0, s.1, db.0, db.1, v.0, v.1
    );
    if s.1 > s.0 && db.1 < db.0 && v.1 > v.0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn determinism(root: &Path) -> Verdict {
    let bin = env!("CARGO_BIN_EXE_dacl");
    let data = root.join("det_data");
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(String::from_utf8_lossy(&out.stderr).into_owned())
        }
    };
    run(&["gen-data", "--out", data.to_str().unwrap(), "--scenes", "40", "--seed", "11"])?;
    let mut outputs = Vec::new();
    for tag in ["a", "b"] {
        let out = root.join(format!("det_{tag}"));
        run(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "5",
            "--iters",
            "300",
            "--set",
            "warmup_gate_iters=100",
        ])?;
        let log = fs::read(out.join(commands::LOG_FILE)).map_err(|e| e.to_string())?;
        let report = fs::read(out.join(commands::REPORT_FILE)).map_err(|e| e.to_string())?;
        outputs.push((log, report));
    }
    let same_log = outputs[0].0 == outputs[1].0;
    let same_report = outputs[0].1 == outputs[1].1;
    if same_log && same_report {
        Ok(format!("two 300-step runs: train_log.jsonl ({} bytes) and eval_report.json identical", outputs[0].0.len()))
    } else {
        Err(format!("train_log identical: {same_log}, eval_report identical: {same_report}"))
    }
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut results: Vec<(u32, &str, Verdict)> = vec![
        (1, "density oracle equivalence", density_oracle()),
        (2, "sampling oracle equivalence", sampling_oracle()),
        (3, "contrastive gradient correctness", gradient_check()),
        (4, "simplex optimum", simplex_optimum()),
        (5, "schedule fidelity", schedule()),
        (6, "FIFO semantics", fifo()),
    ];
    eprintln!("training 6 configurations x 3 seeds");
    match run_sweep(tmp.path()) {
        Ok(sweep) => {
            results.push((7, "desk-scale directional gain", directional(&sweep)));
            results.push((8, "embedding compactness", compactness(&sweep)));
        }
        Err(e) => {
            results.push((7, "desk-scale directional gain", Err(e.clone())));
            results.push((8, "embedding compactness", Err(e)));
        }
    }
    results.push((9, "metric identities", metric_identities()));
    results.push((10, "determinism", determinism(tmp.path())));

    let mut failed = 0;
    for (id, name, verdict) in &results {
        match verdict {
            Ok(detail) => println!("PASS criterion {id} ({name}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}): {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    let strict = std::env::var("DACL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed > 0 && strict {
        std::process::exit(1);
    }
}
