use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

use mixcycle::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mixcycle::config::{load_config, parse_config_with_overrides, RunConfig};
use mixcycle::data::{load_corpus, load_manifest, load_mixtures, synth_toy_corpus, Corpus};
use mixcycle::dsp::StftConfig;
use mixcycle::evaluation::{
    evaluate_ground_truth, evaluate_irm_oracle, evaluate_mixit_oracle, read_report, self_evaluate, write_atomic,
    EvalMetadata, EvalReport, Protocol,
};
use mixcycle::training::{resume_training, run_training, EpochLog, Method, TrainObserver, TrainState};
use mixcycle::Error;

use crate::{ConfigArgs, TableFormat};

const CONFIG_SNAPSHOT: &str = "config.toml";
const TRAIN_LOG: &str = "train_log.jsonl";
const BEST_POINTER: &str = "best.json";
const CHECKPOINT_DIR: &str = "checkpoints";

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

pub fn synth(root: &Path, args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let out = resolve(root, out);
    create_dir(&out)?;
    let splits = synth_toy_corpus(&cfg.synth, &out)?;
    let mut split_info = Vec::new();
    let mut irm = None;
    for s in &splits {
        let manifest = load_manifest(&s.manifest)?;
        // Checksum over file contents in manifest order, independent of
        // where the corpus lives.
        let mut hasher = Sha256::new();
        for r in &manifest.records {
            let mut paths = vec![&r.mixture];
            if let Some(src) = &r.sources {
                paths.extend(src.iter());
            }
            for p in paths {
                hasher.update(fs::read(p).with_context(|| format!("reading {}", p.display()))?);
            }
        }
        let digest: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
        split_info.push(json!({
            "name": s.name,
            "manifest": s.manifest,
            "records": s.records,
            "sha256": digest,
        }));
        if s.name == "test" && s.records > 0 {
            let (_, corpus) = load_corpus(&s.manifest, cfg.synth.sample_rate)?;
            irm = Some(evaluate_irm_oracle(&corpus, &cfg.model.stft)?);
        }
    }
    let report = json!({
        "spec": cfg.synth,
        "splits": split_info,
        "irm_test_mean_db": irm.as_ref().map(|r| r.mean_db),
        "irm_test_std_db": irm.as_ref().map(|r| r.std_db),
    });
    let path = out.join("generation_report.json");
    write_atomic(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    for s in &splits {
        println!("{}: {} records -> {}", s.name, s.records, s.manifest.display());
    }
    if let Some(r) = irm {
        println!("IRM oracle SI-SNRi on test: {:.2} dB", r.mean_db);
    }
    println!("report: {}", path.display());
    Ok(())
}

fn load_corpora(cfg: &RunConfig) -> Result<(Corpus, Corpus)> {
    let need = |p: &Option<PathBuf>, key: &str| p.clone().ok_or_else(|| config_error(format!("{key} is required")));
    let train_path = need(&cfg.data.train, "data.train")?;
    let val_path = need(&cfg.data.val, "data.val")?;
    let (_, mut train) = load_corpus(&train_path, cfg.data.sample_rate)?;
    let (_, mut val) = load_corpus(&val_path, cfg.data.sample_rate)?;
    if cfg.data.subset_fraction < 1.0 {
        train = train.subset(cfg.data.subset_fraction, cfg.train.seed);
        log::info!("training on a {} record subset", train.len());
    }
    if !cfg.train.method.needs_references() {
        // Unsupervised methods never see reference sources.
        for c in [&mut train, &mut val] {
            c.records.iter_mut().for_each(|r| r.sources = None);
        }
    }
    Ok((train, val))
}

fn epoch_file(epoch: usize) -> String {
    format!("epoch-{epoch:03}.ckpt")
}

/// Writes the log and checkpoints of a run directory as epochs complete.
/// Only the latest and the best checkpoint are kept.
struct RunWriter {
    dir: PathBuf,
    method: Method,
    latest: Option<usize>,
    best: Option<usize>,
}

impl RunWriter {
    fn ckpt_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(CHECKPOINT_DIR).join(epoch_file(epoch))
    }

    fn write(&mut self, entry: &EpochLog, state: &TrainState) -> Result<()> {
        save_checkpoint(&self.ckpt_path(entry.epoch), &Checkpoint::from_state(state, self.method))?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join(TRAIN_LOG))
            .context("opening training log")?;
        writeln!(f, "{}", serde_json::to_string(entry)?).context("appending to training log")?;
        let previous = (self.latest.replace(entry.epoch), self.best);
        if entry.improved {
            self.best = Some(entry.epoch);
            let pointer = json!({
                "epoch": entry.epoch,
                "checkpoint": format!("{CHECKPOINT_DIR}/{}", epoch_file(entry.epoch)),
                "val_loss": entry.val_loss,
                "method_phase": entry.method_phase,
            });
            write_atomic(&self.dir.join(BEST_POINTER), serde_json::to_string_pretty(&pointer)?.as_bytes())?;
        }
        for old in [previous.0, previous.1].into_iter().flatten() {
            if Some(old) != self.best && Some(old) != self.latest {
                let _ = fs::remove_file(self.ckpt_path(old));
            }
        }
        Ok(())
    }
}

impl TrainObserver for RunWriter {
    fn on_epoch(&mut self, entry: &EpochLog, state: &TrainState) -> mixcycle::Result<()> {
        self.write(entry, state)
            .map_err(|e| Error::Data(format!("writing run directory: {e:#}")))
    }
}

fn best_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let p = run_dir.join(BEST_POINTER);
    if !p.exists() {
        return Ok(None);
    }
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p)?)?;
    let rel = v["checkpoint"]
        .as_str()
        .ok_or_else(|| Error::Data(format!("{} has no checkpoint entry", p.display())))?;
    Ok(Some(run_dir.join(rel)))
}

fn latest_epoch(run_dir: &Path) -> Result<Option<usize>> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    let mut latest = None;
    for entry in fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(n) = name.strip_prefix("epoch-").and_then(|s| s.strip_suffix(".ckpt")) {
            if let Ok(e) = n.parse::<usize>() {
                latest = latest.max(Some(e));
            }
        }
    }
    Ok(latest)
}

pub fn train(
    root: &Path,
    args: &ConfigArgs,
    method: Option<&str>,
    out: Option<&Path>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut overrides = args.overrides.clone();
    if let Some(m) = method {
        overrides.push(format!("train.method=\"{m}\""));
    }
    let (cfg, run_dir, state) = match resume {
        Some(dir) => {
            let dir = resolve(root, dir);
            let snapshot = fs::read_to_string(dir.join(CONFIG_SNAPSHOT))
                .map_err(|e| Error::Data(format!("{}: no config snapshot ({e})", dir.display())))?;
            let cfg = parse_config_with_overrides(&snapshot, &overrides)?;
            let epoch = latest_epoch(&dir)?
                .ok_or_else(|| Error::Data(format!("{}: no checkpoint to resume from", dir.display())))?;
            let ck = load_checkpoint(&dir.join(CHECKPOINT_DIR).join(epoch_file(epoch)))?;
            if ck.method != Some(cfg.train.method) {
                return Err(config_error("checkpoint method differs from the run configuration"));
            }
            let mut state = ck.into_state()?;
            if let Some(best) = best_checkpoint(&dir)? {
                state.best_params = Some(load_checkpoint(&best)?.params);
            }
            log::info!("resuming {} at epoch {} (step {})", dir.display(), state.epoch, state.step());
            (cfg, dir, Some(state))
        }
        None => {
            let cfg = load_config(args.config.as_deref(), &overrides)?;
            let dir = match out {
                Some(o) => resolve(root, o),
                None => root.join("runs").join(format!("{}-seed{}", cfg.train.method, cfg.train.seed)),
            };
            if dir.join(TRAIN_LOG).exists() {
                return Err(config_error(format!(
                    "{} already holds a run; pass --resume to continue it",
                    dir.display()
                )));
            }
            (cfg, dir, None)
        }
    };
    let (train, val) = load_corpora(&cfg)?;
    create_dir(&run_dir.join(CHECKPOINT_DIR))?;
    write_atomic(&run_dir.join(CONFIG_SNAPSHOT), cfg.to_toml().as_bytes())?;
    let mut writer = RunWriter {
        dir: run_dir.clone(),
        method: cfg.train.method,
        latest: state.as_ref().map(|s| s.epoch).filter(|e| *e > 0),
        best: state.as_ref().map(|s| s.best_epoch).filter(|e| *e > 0),
    };
    let outcome = match state {
        Some(s) => resume_training(&cfg.train, s, &train, &val, &mut writer)?,
        None => run_training(&cfg.train, &cfg.model, &train, &val, &mut writer)?,
    };
    println!(
        "{}: best epoch {} (val loss {:.3}) after {} epochs, step {}",
        cfg.train.method,
        outcome.best_epoch,
        outcome.best_val,
        outcome.state.epoch,
        outcome.state.step()
    );
    if let Some(best) = best_checkpoint(&run_dir)? {
        println!("best checkpoint: {}", best.display());
    }
    Ok(())
}

pub struct EvalRequest<'a> {
    pub checkpoint: Option<&'a Path>,
    pub manifest: &'a Path,
    pub mixit_oracle: bool,
    pub irm: bool,
    pub out: Option<&'a Path>,
    pub sample_rate: u32,
}

fn default_report_path(root: &Path, checkpoint: Option<&Path>, protocol: Protocol) -> PathBuf {
    let stem = checkpoint
        .and_then(|c| c.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "oracle".into());
    root.join("reports").join(format!("{stem}-{}.json", protocol.label()))
}

fn emit(root: &Path, report: &EvalReport, out: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    let path = match out {
        Some(o) => resolve(root, o),
        None => default_report_path(root, checkpoint, report.protocol),
    };
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    report.write(&path)?;
    println!("{}", EvalReport::CSV_HEADER);
    println!("{}", report.csv_row());
    println!("report: {}", path.display());
    Ok(())
}

pub fn eval(root: &Path, req: EvalRequest<'_>) -> Result<()> {
    let ckpt = match req.checkpoint {
        Some(p) if !req.irm => Some(load_checkpoint(p)?),
        _ => None,
    };
    let (manifest, corpus) = load_corpus(req.manifest, req.sample_rate)?;
    if !manifest.is_supervised() {
        return Err(Error::Data(format!(
            "{} has records without reference sources; use `mixcycle self-eval` for unlabeled data",
            req.manifest.display()
        ))
        .into());
    }
    let mut report = match &ckpt {
        None => evaluate_irm_oracle(&corpus, &StftConfig::default())?,
        Some(ck) if req.mixit_oracle => evaluate_mixit_oracle(&ck.params, &corpus)?,
        Some(ck) => evaluate_ground_truth(&ck.params, &corpus)?,
    };
    report.metadata = EvalMetadata {
        checkpoint: req.checkpoint.filter(|_| !req.irm).map(|p| p.display().to_string()),
        dataset: Some(req.manifest.display().to_string()),
        method: match &ckpt {
            Some(ck) => ck.method.map(|m| m.to_string()),
            None => Some("irm".into()),
        },
        ..report.metadata
    };
    emit(root, &report, req.out, req.checkpoint.filter(|_| !req.irm))
}

pub fn self_eval(
    root: &Path,
    checkpoint: &Path,
    manifest: &Path,
    repetitions: usize,
    seed: u64,
    out: Option<&Path>,
    sample_rate: u32,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    if ck.params.config().n_outputs != 2 {
        return Err(config_error("self-evaluation needs a 2-output model"));
    }
    let mixtures = load_mixtures(manifest, sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = self_evaluate(&ck.params, &mixtures, repetitions, &mut rng)?;
    if report.metadata.low_confidence {
        log::warn!("a single repetition gives a low-confidence estimate");
    }
    report.metadata.checkpoint = Some(checkpoint.display().to_string());
    report.metadata.dataset = Some(manifest.display().to_string());
    report.metadata.method = ck.method.map(|m| m.to_string());
    emit(root, &report, out, Some(checkpoint))
}

const COLUMNS: [Protocol; 4] = [Protocol::GroundTruth, Protocol::MixItOracle, Protocol::SelfEval, Protocol::Irm];

pub fn report(root: &Path, paths: &[PathBuf], out: Option<&Path>, format: TableFormat) -> Result<()> {
    let mut rows: BTreeMap<String, BTreeMap<&'static str, EvalReport>> = BTreeMap::new();
    for p in paths {
        let r = read_report(&resolve(root, p))?;
        let label = r
            .metadata
            .method
            .clone()
            .unwrap_or_else(|| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        rows.entry(label).or_default().insert(r.protocol.label(), r);
    }
    let used: Vec<Protocol> = COLUMNS
        .into_iter()
        .filter(|c| rows.values().any(|r| r.contains_key(c.label())))
        .collect();
    let mut csv = String::from("method,protocol,mean_db,std_db,n\n");
    for (label, cells) in &rows {
        for c in &used {
            if let Some(r) = cells.get(c.label()) {
                csv.push_str(&format!("{label},{},{:.4},{:.4},{}\n", c.label(), r.mean_db, r.std_db, r.n));
            }
        }
    }
    match format {
        TableFormat::Csv => print!("{csv}"),
        TableFormat::Markdown => {
            let header: Vec<String> = used.iter().map(|c| format!("{} (dB)", c.label())).collect();
            println!("| method | {} |", header.join(" | "));
            println!("|---|{}", "---|".repeat(used.len()));
            for (label, cells) in &rows {
                let vals: Vec<String> = used
                    .iter()
                    .map(|c| {
                        cells
                            .get(c.label())
                            .map(|r| format!("{:.2} ± {:.2}", r.mean_db, r.std_db))
                            .unwrap_or_else(|| "-".into())
                    })
                    .collect();
                println!("| {label} | {} |", vals.join(" | "));
            }
        }
    }
    if let Some(o) = out {
        let path = resolve(root, o);
        if let Some(parent) = path.parent() {
            create_dir(parent)?;
        }
        write_atomic(&path, csv.as_bytes())?;
    }
    Ok(())
}
