//! Run directories: manifest, config snapshot, metrics, checkpoints, evaluation outputs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use dsl_autodiff::Tensor;
use dsl_core::dataset::{Scene, CATEGORY_NAMES};
use dsl_core::detector::DecodeConfig;
use dsl_core::evaluator::EvalResult;
use dsl_core::trainer::{evaluate, load_state, save_state, MetaContext, Mode, StepRecord, TrainConfig, TrainState, Trainer};
use dsl_core::CoreError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, usage, HarnessError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.txt";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.txt";
pub const FINAL: &str = "final";
pub const CHECKPOINTS: &str = "checkpoints";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub status: RunStatus,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of the executable that produced the run.
    pub code_hash: String,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of the running executable; "unknown" when it cannot be read.
pub fn code_hash() -> String {
    std::env::current_exe()
        .and_then(fs::read)
        .map(|b| sha256_hex(&b))
        .unwrap_or_else(|_| "unknown".into())
}

pub fn read_manifest(dir: &Path) -> Result<Option<RunManifest>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map(Some).map_err(|e| HarnessError::Data {
        path,
        message: e.to_string(),
    })
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(manifest).expect("serializable")).map_err(io_err(&path))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Appends step rows to `metrics.csv`.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        w.line(header)?;
        Ok(w)
    }

    /// Keeps the header and rows of steps below `step`, then appends.
    pub fn resume(path: &Path, header: &str, step: usize) -> Result<Self> {
        let mut kept = Vec::new();
        if path.exists() {
            let file = File::open(path).map_err(io_err(path))?;
            for line in BufReader::new(file).lines().skip(1) {
                let line = line.map_err(io_err(path))?;
                let row_step: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
                if row_step.is_some_and(|s| s < step) {
                    kept.push(line);
                }
            }
        }
        let mut w = Self::create(path, header)?;
        for line in kept {
            w.line(&line)?;
        }
        Ok(w)
    }

    fn line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").map_err(io_err(&self.path))
    }

    pub fn write(&mut self, record: &StepRecord) -> Result<()> {
        self.line(&record.csv_row())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

/// Checkpoint directories `checkpoints/step_NNNNNN`, newest last.
pub fn checkpoints(run: &Path) -> Vec<(usize, PathBuf)> {
    let mut found: Vec<(usize, PathBuf)> = fs::read_dir(run.join(CHECKPOINTS))
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let step = name.strip_prefix("step_")?.parse().ok()?;
            Some((step, e.path()))
        })
        .collect();
    found.sort();
    found
}

pub fn format_summary(run_id: &str, cfg: &TrainConfig, steps: usize, result: &EvalResult) -> String {
    let mode = match cfg.mode {
        Mode::Supervised => "supervised",
        Mode::Dsl => "dsl",
    };
    let mut s = format!(
        "run: {run_id}\nmode: {mode}\nsteps: {steps}\nmAP: {:.4}\nAP50: {:.4}\n",
        result.map, result.ap50
    );
    for (k, ap) in result.per_category.iter().enumerate() {
        let name = CATEGORY_NAMES.get(k).copied().unwrap_or("?");
        match ap {
            Some(v) => s.push_str(&format!("AP[{name}]: {v:.4}\n")),
            None => s.push_str(&format!("AP[{name}]: n/a\n")),
        }
    }
    s
}

/// Writes `pr_curves/<category>_<iou>.csv` (recall, precision) per curve.
pub fn write_pr_curves(dir: &Path, result: &EvalResult) -> Result<Vec<PathBuf>> {
    let pr_dir = dir.join("pr_curves");
    fs::create_dir_all(&pr_dir).map_err(io_err(&pr_dir))?;
    let recall = dsl_core::evaluator::PrCurve::recall_points();
    let mut written = Vec::new();
    for curve in &result.curves {
        let name = CATEGORY_NAMES.get(curve.category).copied().unwrap_or("unknown");
        let path = pr_dir.join(format!("{name}_{:02}.csv", (curve.iou_threshold * 100.0).round() as u32));
        let mut text = String::from("recall,precision\n");
        for (r, p) in recall.iter().zip(&curve.precision) {
            text.push_str(&format!("{r},{p}\n"));
        }
        fs::write(&path, text).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

pub fn eval_json(result: &EvalResult) -> serde_json::Value {
    let per: BTreeMap<&str, Option<f64>> = result
        .per_category
        .iter()
        .enumerate()
        .map(|(k, v)| (CATEGORY_NAMES.get(k).copied().unwrap_or("?"), *v))
        .collect();
    serde_json::json!({ "map": result.map, "ap50": result.ap50, "per_category": per })
}

/// Writes summary, JSON metrics and PR tables of `result` into `dir`.
pub fn write_eval_outputs(dir: &Path, run_id: &str, cfg: &TrainConfig, steps: usize, result: &EvalResult) -> Result<()> {
    write_text(&dir.join(SUMMARY), &format_summary(run_id, cfg, steps, result))?;
    write_text(
        &dir.join("eval.json"),
        &serde_json::to_string_pretty(&eval_json(result)).expect("serializable"),
    )?;
    write_pr_curves(dir, result)?;
    Ok(())
}

/// Inputs of one training run.
pub struct TrainJob<'a> {
    pub cfg: TrainConfig,
    pub labeled: Vec<&'a Scene>,
    pub unlabeled: Vec<&'a Tensor<f32>>,
    pub eval: Vec<&'a Scene>,
    pub out: PathBuf,
    pub resume: bool,
    pub command: String,
}

pub struct JobOutcome {
    pub run_id: String,
    pub state: TrainState,
    pub eval: Option<EvalResult>,
}

fn run_id(out: &Path, cfg_text: &str) -> String {
    let name = out.file_name().and_then(|s| s.to_str()).unwrap_or("run");
    format!("{name}-{}", &sha256_hex(cfg_text.as_bytes())[..12])
}

/// Trains into `job.out`, resuming from its newest checkpoint when asked.
/// The run directory is refused if it already holds a completed run.
pub fn run_training(job: TrainJob<'_>, meta: Option<MetaContext>) -> Result<JobOutcome> {
    let out = job.out.as_path();
    let existing = read_manifest(out)?;
    if let Some(m) = &existing {
        if m.status == RunStatus::Complete {
            return Err(usage(format!("{} holds a completed run", out.display())));
        }
        if !job.resume {
            return Err(usage(format!("{} holds an unfinished run; pass --resume", out.display())));
        }
    } else if out.exists() && fs::read_dir(out).map_err(io_err(out))?.next().is_some() && !job.resume {
        return Err(usage(format!("{} is not empty", out.display())));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;

    let cfg_text = job.cfg.to_text();
    let id = run_id(out, &cfg_text);
    write_text(&out.join(CONFIG), &cfg_text)?;
    let config: BTreeMap<String, String> = TrainConfig::KEYS
        .iter()
        .map(|k| (k.to_string(), job.cfg.get(k).expect("listed key")))
        .collect();
    let mut manifest = RunManifest {
        run_id: id.clone(),
        command: job.command.clone(),
        status: RunStatus::Running,
        config,
        seeds: BTreeMap::from([("seed".into(), job.cfg.seed), ("model_seed".into(), job.cfg.model_seed)]),
        code_hash: code_hash(),
        outputs: BTreeMap::from([
            ("config".into(), CONFIG.into()),
            ("metrics".into(), METRICS.into()),
            ("final".into(), FINAL.into()),
        ]),
    };
    write_manifest(out, &manifest)?;

    let meta = match meta {
        Some(m) => Some(m),
        None if job.resume && out.join("metanet").exists() => Some(MetaContext::load(out)?),
        None => None,
    };
    let trainer = Trainer::new(job.cfg.clone(), job.labeled, job.unlabeled, meta)?;
    if let Some(m) = &trainer.meta {
        if !out.join("metanet").exists() {
            m.save(out)?;
        }
        manifest.outputs.insert("metanet".into(), "metanet".into());
        manifest.outputs.insert("proxies".into(), "proxies".into());
    }

    let resumed = if job.resume {
        match checkpoints(out).pop() {
            Some((_, dir)) => Some(load_state(dir)?),
            None => None,
        }
    } else {
        None
    };
    let header = StepRecord::csv_header(trainer.detector.num_classes);
    let metrics_path = out.join(METRICS);
    let (mut state, mut metrics) = match resumed {
        Some(s) => {
            log::info!("resuming {} at step {}", out.display(), s.step);
            let w = MetricsWriter::resume(&metrics_path, &header, s.step)?;
            (s, w)
        }
        None => (trainer.init_state()?, MetricsWriter::create(&metrics_path, &header)?),
    };

    let every = trainer.cfg.checkpoint_every;
    let to_core = |e: HarnessError| match e {
        HarnessError::Core(c) => c,
        HarnessError::Io { path, source } => CoreError::Io { path, source },
        other => CoreError::Config(other.to_string()),
    };
    let result = trainer.run(&mut state, usize::MAX, |st, rec| {
        metrics.write(rec).map_err(to_core)?;
        if every > 0 && st.step % every == 0 && st.step < trainer.cfg.total_iters {
            metrics.flush().map_err(to_core)?;
            save_state(out.join(CHECKPOINTS).join(format!("step_{:06}", st.step)), st)?;
        }
        Ok(())
    });
    metrics.flush()?;
    if let Err(e) = result {
        manifest.status = RunStatus::Failed;
        write_manifest(out, &manifest)?;
        return Err(e.into());
    }
    save_state(out.join(FINAL), &state)?;

    let eval = if job.eval.is_empty() {
        None
    } else {
        let (result, _) = evaluate(&trainer.detector, state.eval_params(), &job.eval, &DecodeConfig::default())?;
        write_eval_outputs(out, &id, &trainer.cfg, state.step, &result)?;
        for key in ["summary", "eval", "pr_curves"] {
            let file = match key {
                "summary" => SUMMARY,
                "eval" => "eval.json",
                _ => "pr_curves",
            };
            manifest.outputs.insert(key.into(), file.into());
        }
        Some(result)
    };
    manifest.status = RunStatus::Complete;
    write_manifest(out, &manifest)?;
    Ok(JobOutcome { run_id: id, state, eval })
}
