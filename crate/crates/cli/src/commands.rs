use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use dacl::bank::BankSet;
use dacl::cotrain::{read_checkpoint, records_compactness, test_embeddings, write_checkpoint, Ablation, TrainConfig, Trainer};
use dacl::geometry::CompactnessReport;
use dacl::metrics::EvalReport;
use dacl::synth::{load_dataset, make_split, save_dataset, DatasetManifest, DatasetSplit, SceneConfig};

use crate::args::{DumpArgs, EvalArgs, GenDataArgs, TrainArgs};
use crate::{embeddings_csv, CliError, CliResult};

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const EVAL_LOG_FILE: &str = "eval_log.jsonl";
pub const REPORT_FILE: &str = "eval_report.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const BANKS_FILE: &str = "banks.bin";

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn ensure_writable_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Config(format!(
                "{} exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_pretty<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<DatasetManifest> {
    let mut scene_config = SceneConfig::default();
    if let Some(n) = a.noise {
        scene_config.noise_sigma = n;
    }
    if let Some(b) = a.blur {
        scene_config.blur = b;
    }
    // validate before touching the filesystem
    let split = make_split(a.scenes, a.labeled_frac, a.seed, &scene_config)?;
    ensure_writable_dir(&a.out, a.force)?;
    let manifest = DatasetManifest {
        format: "DACLSCN/1".into(),
        n_scenes: a.scenes,
        labeled_fraction: a.labeled_frac,
        seed: a.seed,
        scene_config,
        split: split.plan.clone(),
    };
    save_dataset(&a.out, &split, &manifest)?;
    log::info!(
        "wrote {} scenes ({} labeled / {} unlabeled / {} test) to {}",
        a.scenes,
        split.labeled.len(),
        split.unlabeled.len(),
        split.test.len(),
        a.out.display()
    );
    Ok(manifest)
}

/// Everything needed to replay a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub config_hash: String,
    pub build: String,
    pub seed: u64,
    pub ablation: Option<Ablation>,
    pub toggles: BTreeMap<String, bool>,
    pub data_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub outputs: BTreeMap<String, PathBuf>,
}

fn toggles(cfg: &TrainConfig) -> BTreeMap<String, bool> {
    [
        ("contrastive", cfg.contrastive_enabled()),
        ("pcl_random_sampling", cfg.pcl_random_sampling),
        ("single_scale", cfg.single_scale),
        ("no_bank", cfg.no_bank),
        ("uniform_w", cfg.uniform_w),
        ("infonce_denominator", cfg.infonce_denominator),
        ("negatives_from_all", cfg.negatives_from_all),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(a: &TrainArgs, data: &DatasetManifest) -> CliResult<(TrainConfig, Option<Ablation>)> {
    let mut cfg = TrainConfig {
        labeled_fraction: data.labeled_fraction,
        num_classes: data.scene_config.num_classes,
        ..TrainConfig::default()
    };
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_kv(&text)?;
    }
    let ablation = a.ablate.as_deref().map(str::parse::<Ablation>).transpose()?;
    if let Some(row) = ablation {
        cfg.apply_ablation(row);
    }
    if let Some(l) = a.lambda_cl {
        cfg.warmup_base = l;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iters {
        cfg.iters = n;
        cfg.t_max = n;
    }
    if let Some(e) = a.eval_every {
        cfg.eval_every = e;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok((cfg, ablation))
}

#[derive(Serialize)]
struct EvalLine<'a> {
    t: usize,
    report: &'a EvalReport,
}

pub fn train(a: &TrainArgs) -> CliResult<EvalReport> {
    let (data_manifest, split) = load_dataset(&a.data)
        .map_err(|e| CliError::Runtime(format!("cannot load dataset {}: {e}", a.data.display())))?;
    let (cfg, ablation) = resolve_config(a, &data_manifest)?;
    ensure_writable_dir(&a.out, a.force)?;

    let outputs: BTreeMap<String, PathBuf> = [
        ("config", CONFIG_FILE),
        ("train_log", LOG_FILE),
        ("eval_report", REPORT_FILE),
        ("checkpoint", CHECKPOINT_FILE),
        ("banks", BANKS_FILE),
    ]
    .into_iter()
    .map(|(k, f)| (k.to_string(), a.out.join(f)))
    .collect();
    let mut manifest = RunManifest {
        config_hash: format!("{:016x}", cfg.hash()),
        build: format!("dacl {}", env!("CARGO_PKG_VERSION")),
        seed: cfg.seed,
        ablation,
        toggles: toggles(&cfg),
        data_dir: a.data.clone(),
        started_unix: unix_now(),
        finished_unix: None,
        outputs,
        config: cfg.clone(),
    };
    fs::write(a.out.join(CONFIG_FILE), cfg.to_kv())?;
    write_pretty(&a.out.join(MANIFEST_FILE), &manifest)?;

    let report = run_training(&cfg, &split, &a.out)?;
    manifest.finished_unix = Some(unix_now());
    write_pretty(&a.out.join(MANIFEST_FILE), &manifest)?;
    Ok(report)
}

/// Trains on `split` and writes log, report, checkpoint and banks to `out`.
pub fn run_training(cfg: &TrainConfig, split: &DatasetSplit, out: &Path) -> CliResult<EvalReport> {
    let mut log_w = BufWriter::new(fs::File::create(out.join(LOG_FILE))?);
    let mut eval_w = if cfg.eval_every > 0 { Some(BufWriter::new(fs::File::create(out.join(EVAL_LOG_FILE))?)) } else { None };
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.fit(split, |tr, stats| {
        let line = serde_json::to_string(stats)?;
        writeln!(log_w, "{line}")?;
        let done = stats.t + 1;
        if let Some(w) = eval_w.as_mut() {
            if done % cfg.eval_every == 0 {
                let report = tr.evaluate(&split.test)?;
                log::info!("t={done} macro dice {:.2}", report.macro_avg.dice);
                let line = serde_json::to_string(&EvalLine { t: done, report: &report })?;
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    })?;
    log_w.flush()?;
    if let Some(mut w) = eval_w {
        w.flush()?;
    }

    let report = trainer.evaluate(&split.test)?;
    write_pretty(&out.join(REPORT_FILE), &report)?;
    let mut ck = BufWriter::new(fs::File::create(out.join(CHECKPOINT_FILE))?);
    write_checkpoint(&trainer, &mut ck)?;
    ck.flush()?;
    let mut bw = BufWriter::new(fs::File::create(out.join(BANKS_FILE))?);
    trainer.banks.write_to(&mut bw)?;
    bw.flush()?;
    Ok(report)
}

/// A trained run reloaded from disk.
pub struct LoadedRun {
    pub manifest: RunManifest,
    pub trainer: Trainer,
    pub split: DatasetSplit,
}

pub fn load_run(run: &Path, data: Option<&Path>) -> CliResult<LoadedRun> {
    let manifest: RunManifest = serde_json::from_str(
        &fs::read_to_string(run.join(MANIFEST_FILE))
            .map_err(|e| CliError::Runtime(format!("missing run manifest in {}: {e}", run.display())))?,
    )?;
    let cfg = TrainConfig::from_kv(&fs::read_to_string(run.join(CONFIG_FILE))?)?;
    let ck = fs::File::open(run.join(CHECKPOINT_FILE))
        .map_err(|e| CliError::Runtime(format!("missing checkpoint in {}: {e}", run.display())))?;
    let mut trainer = read_checkpoint(std::io::BufReader::new(ck), cfg)?;
    if let Ok(f) = fs::File::open(run.join(BANKS_FILE)) {
        trainer.banks = BankSet::read_from(std::io::BufReader::new(f))?;
    }
    let data_dir = data.map(Path::to_path_buf).unwrap_or_else(|| manifest.data_dir.clone());
    let (_, split) = load_dataset(&data_dir)
        .map_err(|e| CliError::Runtime(format!("cannot load dataset {}: {e}", data_dir.display())))?;
    Ok(LoadedRun { manifest, trainer, split })
}

pub fn eval(a: &EvalArgs) -> CliResult<EvalReport> {
    let run = load_run(&a.run, a.data.as_deref())?;
    let report = run.trainer.evaluate(&run.split.test)?;
    if let Some(out) = &a.out {
        write_pretty(out, &report)?;
    }
    Ok(report)
}

pub fn dump_embeddings(a: &DumpArgs) -> CliResult<(PathBuf, CompactnessReport)> {
    let run = load_run(&a.run, a.data.as_deref())?;
    let records = test_embeddings(&run.trainer, &run.split.test)?;
    let out = a.out.clone().unwrap_or_else(|| a.run.join("embeddings.csv"));
    embeddings_csv::write(&out, &records, run.trainer.cfg.proj_dim)?;
    let report = records_compactness(&records)?;
    Ok((out, report))
}

pub fn json_pretty<T: Serialize>(v: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

