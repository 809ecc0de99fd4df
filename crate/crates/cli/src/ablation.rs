//! The feature lattice and the fold comparison on the synthetic benchmark.

use std::fmt::Write as _;
use std::path::Path;

use dsl_autodiff::Tensor;
use dsl_core::dataset::{generate_scene, split_dataset, Scene, SceneConfig};
use dsl_core::detector::DecodeConfig;
use dsl_core::trainer::{evaluate, Filter, MetaContext, Mode, TrainConfig, Trainer};

use crate::error::{io_err, Result};
use crate::run::{run_training, write_text, TrainJob};

/// Cumulative feature lattice: each row switches one more component on.
pub fn lattice(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let baseline = TrainConfig {
        mode: Mode::Dsl,
        filter: Filter::Single,
        metanet: false,
        rla: false,
        eps: 0.0,
        j: 0,
        gamma_scale: 0.0,
        ..base.clone()
    };
    let af = TrainConfig {
        filter: Filter::Adaptive,
        ..baseline.clone()
    };
    let meta = TrainConfig {
        metanet: base.metanet,
        ..af.clone()
    };
    let at = TrainConfig {
        rla: base.rla,
        eps: base.eps,
        ..meta.clone()
    };
    let ps = TrainConfig { j: base.j, ..at.clone() };
    let scale = TrainConfig {
        gamma_scale: base.gamma_scale,
        ..ps.clone()
    };
    vec![
        ("baseline", baseline),
        ("+AF", af),
        ("+MetaNet", meta),
        ("+AT", at),
        ("+PatchShuffle", ps),
        ("+L_scale", scale),
    ]
}

/// Directory name of lattice row `i`, e.g. `03_at`.
fn slug(i: usize, name: &str) -> String {
    let s: String = name.chars().filter(|c| c.is_ascii_alphanumeric() || *c == '_').collect();
    format!("{i:02}_{}", s.to_lowercase())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub map: f64,
    pub ap50: f64,
}

/// Trains every lattice row into `out/<row>` and writes `ablation.csv` and
/// `summary.txt`. The first failing row aborts the lattice.
pub fn run_ablation(
    base: &TrainConfig,
    labeled: &[&Scene],
    unlabeled: &[&Tensor<f32>],
    test: &[&Scene],
    out: &Path,
    command: &str,
) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut meta: Option<MetaContext> = None;
    let mut rows = Vec::new();
    for (i, (name, cfg)) in lattice(base).into_iter().enumerate() {
        log::info!("ablation row {name}");
        if cfg.metanet && meta.is_none() {
            meta = Some(MetaContext::train(&cfg, labeled)?);
        }
        let job = TrainJob {
            cfg: cfg.clone(),
            labeled: labeled.to_vec(),
            unlabeled: unlabeled.to_vec(),
            eval: test.to_vec(),
            out: out.join(slug(i, name)),
            resume: false,
            command: format!("{command} [{name}]"),
        };
        let outcome = run_training(job, if cfg.metanet { meta.clone() } else { None })?;
        let result = outcome.eval.expect("evaluation set is non-empty");
        rows.push(AblationRow {
            name: name.to_string(),
            map: result.map,
            ap50: result.ap50,
        });
    }
    let (csv, summary) = format_ablation(&rows);
    write_text(&out.join("ablation.csv"), &csv)?;
    write_text(&out.join("summary.txt"), &summary)?;
    Ok(rows)
}

/// CSV and aligned text renderings of the lattice results.
pub fn format_ablation(rows: &[AblationRow]) -> (String, String) {
    let mut csv = String::from("row,config,map,ap50\n");
    let mut text = format!("{:<16}{:>8}{:>8}\n", "config", "mAP", "AP50");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(csv, "{i},{},{},{}", r.name, r.map, r.ap50);
        let _ = writeln!(text, "{:<16}{:>8.2}{:>8.2}", r.name, 100.0 * r.map, 100.0 * r.ap50);
    }
    (csv, text)
}

/// In-memory synthetic benchmark: a training pool and a held-out test set.
pub struct Benchmark {
    pub pool: Vec<Scene>,
    pub test: Vec<Scene>,
}

/// Test scenes draw seeds from a range disjoint from the pool's.
pub const TEST_SEED_BASE: u64 = 1_000_000;

impl Benchmark {
    pub fn generate(pool: usize, test: usize, cfg: &SceneConfig) -> Self {
        Self {
            pool: (0..pool as u64).map(|i| generate_scene(i, cfg)).collect(),
            test: (0..test as u64).map(|i| generate_scene(TEST_SEED_BASE + i, cfg)).collect(),
        }
    }

    /// Labeled scenes and unlabeled images of data fold `fold`.
    pub fn fold(&self, fraction: f64, fold: u64) -> Result<(Vec<&Scene>, Vec<&Tensor<f32>>)> {
        let (l, u) = split_dataset(self.pool.len(), fraction, fold)?;
        Ok((
            l.iter().map(|&i| &self.pool[i]).collect(),
            u.iter().map(|&i| &self.pool[i].image).collect(),
        ))
    }
}

/// Test mAP of the three arms of one fold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: u64,
    pub burn_in: f64,
    pub supervised: f64,
    pub dsl: f64,
    pub single: f64,
}

/// Trains supervised-only, full DSL and single-threshold DSL on one fold.
/// The arms share one burn-in state (their first `burn_in_iters` steps are
/// identical) and then run to `cfg.total_iters` with their own settings. The
/// supervised arm is scored on its student, the semi-supervised arms on
/// their teachers.
pub fn compare_fold(bench: &Benchmark, fraction: f64, fold: u64, cfg: &TrainConfig) -> Result<FoldResult> {
    let cfg = TrainConfig {
        mode: Mode::Dsl,
        seed: fold,
        model_seed: fold,
        ..cfg.clone()
    };
    let (labeled, unlabeled) = bench.fold(fraction, fold)?;
    let test: Vec<&Scene> = bench.test.iter().collect();
    let decode = DecodeConfig::default();

    let dsl = Trainer::new(cfg.clone(), labeled.clone(), unlabeled.clone(), None)?;
    let mut burn = dsl.init_state()?;
    dsl.run(&mut burn, cfg.burn_in_iters(), |_, _| Ok(()))?;
    let burn_in = evaluate(&dsl.detector, &burn.student, &test, &decode)?.0.map;
    log::info!("fold {fold} burn-in mAP {burn_in:.4}");

    let sup = Trainer::new(
        TrainConfig {
            mode: Mode::Supervised,
            ..cfg.clone()
        },
        labeled.clone(),
        unlabeled.clone(),
        None,
    )?;
    let mut s = burn.clone();
    sup.run(&mut s, cfg.total_iters, |_, _| Ok(()))?;
    let supervised = evaluate(&sup.detector, &s.student, &test, &decode)?.0.map;
    log::info!("fold {fold} supervised mAP {supervised:.4}");

    let mut s = burn.clone();
    dsl.run(&mut s, cfg.total_iters, |_, _| Ok(()))?;
    let full = evaluate(&dsl.detector, s.eval_params(), &test, &decode)?.0.map;
    log::info!("fold {fold} DSL mAP {full:.4}");

    let single = Trainer::new(
        TrainConfig {
            filter: Filter::Single,
            ..cfg.clone()
        },
        labeled,
        unlabeled,
        dsl.meta.clone(),
    )?;
    let mut s = burn;
    single.run(&mut s, cfg.total_iters, |_, _| Ok(()))?;
    let single_map = evaluate(&single.detector, s.eval_params(), &test, &decode)?.0.map;
    log::info!("fold {fold} single-threshold mAP {single_map:.4}");

    Ok(FoldResult {
        fold,
        burn_in,
        supervised,
        dsl: full,
        single: single_map,
    })
}
