//! The training loop: supervised burn-in, then dense semi-supervised steps
//! with a moving-average teacher.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dsl_autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_record_to_grid, make_scale_pair, patch_shuffle, permute_targets, strong_augment, weak_augment, AugRecord};
use crate::checkpoint::{load_params, save_params};
use crate::dataset::{Annotation, Scene};
use crate::detector::{
    assign_targets, forward, init_params, Bound, DecodeConfig, DenseTargets, Detection, DetectorConfig, ParamSet,
    PyramidGeometry,
};
use crate::error::{config_err, io_err, CoreError, Result};
use crate::evaluator::{coco_thresholds, compute_map, EvalResult};
use crate::losses::{scale_consistency_loss, score_map, supervised_loss, total_loss, unsupervised_loss};
use crate::metanet::{load_proxies, proxies_from_labeled, refine, save_proxies, train_metanet, LabeledCrop, MetaNetConfig, ProxyTable};
use crate::optim::{collect_grads, Sgd};
use crate::pseudo_labels::{
    adaptive_thresholds, partition_instances, partition_single, render_pseudo_targets, update_stats, CategoryStats,
    Instance, RegionKind,
};
use crate::teacher::{ema_update, infer, init_teacher, teacher_infer, TeacherState};

pub use config::{lr_schedule, Filter, Mode, TrainConfig};

/// Everything that changes across steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub student: ParamSet<f32>,
    pub opt: Sgd<f32>,
    pub teacher: Option<TeacherState<f32>>,
    pub stats: CategoryStats,
    /// Number of completed steps.
    pub step: usize,
}

impl TrainState {
    /// The teacher once it exists, otherwise the student.
    pub fn eval_params(&self) -> &ParamSet<f32> {
        self.teacher.as_ref().map_or(&self.student, |t| &t.params)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Supervised,
    Dsl,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss: f64,
    pub l_s: f64,
    pub l_u: f64,
    pub l_scale: f64,
    pub pos_l: usize,
    pub pos_u: usize,
    /// Pseudo-instances per region kind after refinement.
    pub foreground: usize,
    pub ignorable: usize,
    /// Foreground instances demoted by the embedding check.
    pub demoted: usize,
    /// Per-category foreground thresholds used at this step.
    pub thresholds: Vec<f64>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepRecord {
    pub fn csv_header(num_classes: usize) -> String {
        let mut s = String::from("step,phase,lr,loss,l_s,l_u,l_scale,pos_l,pos_u,foreground,ignorable,demoted,grad_norm");
        for k in 0..num_classes {
            write!(s, ",tau2_{k}").expect("string write");
        }
        s
    }

    /// Shortest round-trip float formatting, so equal runs give equal bytes.
    pub fn csv_row(&self) -> String {
        let phase = match self.phase {
            Phase::Supervised => "supervised",
            Phase::Dsl => "dsl",
        };
        let mut s = format!(
            "{},{phase},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.loss,
            self.l_s,
            self.l_u,
            self.l_scale,
            self.pos_l,
            self.pos_u,
            self.foreground,
            self.ignorable,
            self.demoted,
            self.grad_norm
        );
        for t in &self.thresholds {
            write!(s, ",{t}").expect("string write");
        }
        s
    }
}

/// Trained embedding network with its labeled proxies.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaContext {
    pub cfg: MetaNetConfig,
    pub params: ParamSet<f32>,
    pub proxies: ProxyTable,
}

impl MetaContext {
    pub fn train(cfg: &TrainConfig, labeled: &[&Scene]) -> Result<Self> {
        let meta_cfg = cfg.metanet_config();
        let crops: Vec<LabeledCrop<'_>> = labeled
            .iter()
            .flat_map(|s| {
                s.annotations.iter().map(|a| LabeledCrop {
                    image: &s.image,
                    annotation: *a,
                })
            })
            .collect();
        let params = train_metanet(&meta_cfg, &cfg.metanet_train(), &crops)?;
        let proxies = proxies_from_labeled(&meta_cfg, &params, &crops)?;
        Ok(Self {
            cfg: meta_cfg,
            params,
            proxies,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        save_params(dir.join("metanet"), &self.params, "metanet", 0, serde_json::Value::Null)?;
        save_proxies(dir.join("proxies"), &self.proxies)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(Self {
            cfg: MetaNetConfig::default(),
            params: load_params(dir.join("metanet"))?.0,
            proxies: load_proxies(dir.join("proxies"))?,
        })
    }
}

/// Independent generator for one step, a function of `(seed, step)` only.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub detector: DetectorConfig,
    pub labeled: Vec<&'a Scene>,
    pub unlabeled: Vec<&'a Tensor<f32>>,
    pub meta: Option<MetaContext>,
    geometry: PyramidGeometry,
}

impl<'a> Trainer<'a> {
    /// Trains the embedding network when the configuration needs one and
    /// `meta` is not supplied.
    pub fn new(
        cfg: TrainConfig,
        labeled: Vec<&'a Scene>,
        unlabeled: Vec<&'a Tensor<f32>>,
        meta: Option<MetaContext>,
    ) -> Result<Self> {
        cfg.validate()?;
        let first = labeled.first().ok_or_else(|| config_err("labeled set is empty"))?;
        if cfg.mode == Mode::Dsl && unlabeled.is_empty() && cfg.burn_in_iters() < cfg.total_iters {
            return Err(config_err("unlabeled set is empty"));
        }
        if cfg.mode == Mode::Dsl && cfg.gamma_scale > 0.0 && !(cfg.r >= 2 && cfg.r.is_power_of_two()) {
            return Err(config_err(format!("r = {} must be a power of two of at least 2", cfg.r)));
        }
        let detector = cfg.detector();
        let shape = first.image.shape();
        let geometry = detector.geometry(shape[1], shape[2])?;
        let needs_meta = cfg.mode == Mode::Dsl && cfg.metanet && cfg.burn_in_iters() < cfg.total_iters;
        let meta = match meta {
            Some(m) => Some(m),
            None if needs_meta => Some(MetaContext::train(&cfg, &labeled)?),
            None => None,
        };
        Ok(Self {
            cfg,
            detector,
            labeled,
            unlabeled,
            meta,
            geometry,
        })
    }

    pub fn geometry(&self) -> &PyramidGeometry {
        &self.geometry
    }

    pub fn init_state(&self) -> Result<TrainState> {
        let student = init_params(&self.detector, self.cfg.model_seed)?;
        let opt = Sgd::new(&student, self.cfg.momentum, self.cfg.weight_decay);
        Ok(TrainState {
            student,
            opt,
            teacher: None,
            stats: CategoryStats::new(self.detector.num_classes),
            step: 0,
        })
    }

    /// Runs one step: supervised during burn-in, dense semi-supervised after.
    pub fn step(&self, state: &mut TrainState) -> Result<StepRecord> {
        if state.step >= self.cfg.total_iters {
            return Err(config_err(format!("step {} past the end of training", state.step)));
        }
        let record = if self.cfg.mode == Mode::Dsl && state.step >= self.cfg.burn_in_iters() {
            if state.teacher.is_none() {
                state.teacher = Some(init_teacher(&state.student));
            }
            self.dsl_step(state)?
        } else {
            self.supervised_step(state)?
        };
        state.step += 1;
        Ok(record)
    }

    /// Steps until `until` (capped at the total), calling `hook` after each.
    pub fn run(
        &self,
        state: &mut TrainState,
        until: usize,
        mut hook: impl FnMut(&TrainState, &StepRecord) -> Result<()>,
    ) -> Result<()> {
        while state.step < until.min(self.cfg.total_iters) {
            let record = self.step(state)?;
            if record.step % 50 == 0 {
                log::info!(
                    "step {} lr {} loss {:.4} (s {:.4} u {:.4} scale {:.5}) fg {} ign {}",
                    record.step,
                    record.lr,
                    record.loss,
                    record.l_s,
                    record.l_u,
                    record.l_scale,
                    record.foreground,
                    record.ignorable
                );
            }
            hook(state, &record)?;
        }
        Ok(())
    }

    fn labeled_batch(&self, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f32>>, Vec<DenseTargets>) {
        let c = self.detector.num_classes;
        (0..self.cfg.labeled_batch)
            .map(|_| {
                let scene = self.labeled[rng.gen_range(0..self.labeled.len())];
                let (img, anns, _) = weak_augment(&scene.image, &scene.annotations, rng.gen(), self.cfg.weak_flip);
                (img, assign_targets(&anns, &self.geometry, c))
            })
            .unzip()
    }

    fn apply_gradients<'t>(
        &self,
        state: &mut TrainState,
        tape: &'t Tape<f32>,
        bound: &Bound<'t, f32>,
        loss: Var<'t, f32>,
        lr: f64,
    ) -> Result<f64> {
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(CoreError::NonFinite {
                step: state.step,
                detail: format!("total loss {value}"),
            });
        }
        let grads = collect_grads(bound, &tape.backward(loss)?);
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(CoreError::NonFinite {
                step: state.step,
                detail: format!("gradient of `{name}`"),
            });
        }
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        let mut grads = grads;
        if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            let k = (self.cfg.grad_clip / norm) as f32;
            for (_, g) in grads.iter_mut() {
                for v in g.data_mut() {
                    *v *= k;
                }
            }
        }
        state.opt.step(&mut state.student, &grads, lr)?;
        Ok(norm)
    }

    pub fn supervised_step(&self, state: &mut TrainState) -> Result<StepRecord> {
        let mut rng = step_rng(self.cfg.seed, state.step);
        let lr = lr_schedule(state.step, &self.cfg);
        let (images, targets) = self.labeled_batch(&mut rng);
        let tape = Tape::new();
        let bound = state.student.bind(&tape, true);
        let out = forward(&self.detector, &bound, tape.constant(Tensor::stack(&images)?))?;
        let ls = supervised_loss(&out, &targets)?;
        let loss = ls.loss.value().item() as f64;
        let grad_norm = self.apply_gradients(state, &tape, &bound, ls.loss, lr)?;
        Ok(StepRecord {
            step: state.step,
            phase: Phase::Supervised,
            lr,
            loss,
            l_s: loss,
            l_u: 0.0,
            l_scale: 0.0,
            pos_l: ls.num_pos,
            pos_u: 0,
            foreground: 0,
            ignorable: 0,
            demoted: 0,
            thresholds: Vec::new(),
            grad_norm,
        })
    }

    /// Foreground thresholds for the current statistics.
    pub fn foreground_thresholds(&self, stats: &CategoryStats) -> Vec<f64> {
        match self.cfg.filter {
            Filter::Adaptive => adaptive_thresholds(stats, &self.cfg.thresholds()),
            Filter::Single => vec![self.cfg.single_threshold; self.detector.num_classes],
        }
    }

    /// Teacher detections split into regions, before embedding refinement.
    pub fn partition(&self, detections: &[Detection], thresholds: &[f64]) -> Result<Vec<Instance>> {
        match self.cfg.filter {
            Filter::Adaptive => partition_instances(detections, self.cfg.tau1, thresholds),
            Filter::Single => Ok(partition_single(detections, self.cfg.single_threshold)),
        }
    }

    /// Demotes suspect foreground of one weakly augmented image when the
    /// embedding check is enabled.
    pub fn refine(&self, instances: &[Instance], weak: &Tensor<f32>) -> Result<Vec<Instance>> {
        match (&self.meta, self.cfg.metanet) {
            (Some(m), true) => refine(instances, weak, &m.cfg, &m.params, &m.proxies, self.cfg.d),
            _ => Ok(instances.to_vec()),
        }
    }

    pub fn dsl_step(&self, state: &mut TrainState) -> Result<StepRecord> {
        let teacher = state
            .teacher
            .as_ref()
            .ok_or_else(|| config_err("semi-supervised step without a teacher"))?;
        let cfg = &self.cfg;
        let c = self.detector.num_classes;
        let mut rng = step_rng(cfg.seed, state.step);
        let lr = lr_schedule(state.step, cfg);
        let (images_l, targets_l) = self.labeled_batch(&mut rng);

        // Teacher pass on weak views and region assignment.
        let mut weak = Vec::with_capacity(cfg.unlabeled_batch);
        let mut seeds = Vec::with_capacity(cfg.unlabeled_batch);
        for _ in 0..cfg.unlabeled_batch {
            let img = self.unlabeled[rng.gen_range(0..self.unlabeled.len())];
            weak.push(weak_augment(img, &[], rng.gen(), cfg.weak_flip).0);
            seeds.push((rng.gen::<u64>(), rng.gen::<u64>()));
        }
        let detections = teacher_infer(&self.detector, teacher, &weak, &cfg.pseudo_decode())?;
        let thresholds = self.foreground_thresholds(&state.stats);
        let mut instances = Vec::with_capacity(weak.len());
        let mut demoted = 0;
        for (dets, img) in detections.iter().zip(&weak) {
            let before = self.partition(dets, &thresholds)?;
            let after = self.refine(&before, img)?;
            demoted += before.iter().zip(&after).filter(|(a, b)| a.kind != b.kind).count();
            instances.push(after);
        }
        let flat: Vec<Instance> = instances.iter().flatten().copied().collect();
        state.stats = update_stats(&state.stats, &flat, cfg.stats_momentum);
        let count = |k: RegionKind| flat.iter().filter(|i| i.kind == k).count();

        // Strong views with targets carried through the same geometry.
        let mut strong = Vec::with_capacity(weak.len());
        let mut pseudo = Vec::with_capacity(weak.len());
        for ((img, inst), &(strong_seed, shuffle_seed)) in weak.iter().zip(&instances).zip(&seeds) {
            let (s, rec_s) = strong_augment(img, strong_seed, &cfg.strong_aug());
            let (sp, rec_p) = patch_shuffle(&s, shuffle_seed, cfg.j, self.geometry.coarsest_stride());
            let record = AugRecord {
                flip: rec_s.flip,
                cuts: rec_p.cuts,
                ..AugRecord::default()
            };
            let maps = apply_record_to_grid(&record, &self.geometry)?;
            pseudo.push(permute_targets(&render_pseudo_targets(inst, &self.geometry, c), &maps)?);
            strong.push(sp);
        }

        let tape = Tape::new();
        let bound = state.student.bind(&tape, true);
        let nl = images_l.len();
        let batch: Vec<Tensor<f32>> = images_l.into_iter().chain(strong.iter().cloned()).collect();
        let out = forward(&self.detector, &bound, tape.constant(Tensor::stack(&batch)?))?;
        let out_u = out.narrow(nl..batch.len())?;
        let ls = supervised_loss(&out.narrow(0..nl)?, &targets_l)?;
        let lu = unsupervised_loss(&out_u, &pseudo)?;
        let lscale = if cfg.gamma_scale > 0.0 {
            let down = strong
                .iter()
                .map(|x| make_scale_pair(x, cfg.r))
                .collect::<Result<Vec<_>>>()?;
            let out_d = forward(&self.detector, &bound, tape.constant(Tensor::stack(&down)?))?;
            let maps_d = out_d.levels.iter().map(score_map).collect::<Result<Vec<_>>>()?;
            let maps_sp = out_u.levels.iter().map(score_map).collect::<Result<Vec<_>>>()?;
            // Level v of the r-times smaller view lines up with level v + log2(r).
            let shift = cfg.r.trailing_zeros() as usize - 1;
            scale_consistency_loss(&maps_d, &maps_sp[shift.min(maps_sp.len())..])?
        } else {
            tape.constant(Tensor::scalar(0.0))
        };
        let total = total_loss(ls.loss, lu.loss, lscale, cfg.alpha, cfg.gamma_scale)?;
        let mut record = StepRecord {
            step: state.step,
            phase: Phase::Dsl,
            lr,
            loss: total.value().item() as f64,
            l_s: ls.loss.value().item() as f64,
            l_u: lu.loss.value().item() as f64,
            l_scale: lscale.value().item() as f64,
            pos_l: ls.num_pos,
            pos_u: lu.num_pos,
            foreground: count(RegionKind::Foreground),
            ignorable: count(RegionKind::Ignorable),
            demoted,
            thresholds,
            grad_norm: 0.0,
        };
        record.grad_norm = self.apply_gradients(state, &tape, &bound, total, lr)?;
        let teacher = state.teacher.as_mut().expect("checked above");
        ema_update(teacher, &state.student, cfg.eps)?;
        Ok(record)
    }
}

/// Pseudo-labels of one image from teacher `detections`, as assigned during
/// training with statistics `stats`; background instances are kept.
pub fn pseudo_label(
    cfg: &TrainConfig,
    meta: Option<&MetaContext>,
    stats: &CategoryStats,
    detections: &[Detection],
    image: &Tensor<f32>,
) -> Result<Vec<Instance>> {
    let instances = match cfg.filter {
        Filter::Adaptive => partition_instances(detections, cfg.tau1, &adaptive_thresholds(stats, &cfg.thresholds()))?,
        Filter::Single => partition_single(detections, cfg.single_threshold),
    };
    match (meta, cfg.metanet) {
        (Some(m), true) => refine(&instances, image, &m.cfg, &m.params, &m.proxies, cfg.d),
        _ => Ok(instances),
    }
}

/// Detections and COCO metrics of `params` on `scenes`.
pub fn evaluate(
    detector: &DetectorConfig,
    params: &ParamSet<f32>,
    scenes: &[&Scene],
    decode: &DecodeConfig,
) -> Result<(EvalResult, Vec<Vec<Detection>>)> {
    let mut detections = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(4) {
        let images: Vec<Tensor<f32>> = chunk.iter().map(|s| s.image.clone()).collect();
        detections.extend(infer(detector, params, &images, decode)?);
    }
    let truth: Vec<Vec<Annotation>> = scenes.iter().map(|s| s.annotations.clone()).collect();
    let result = compute_map(&detections, &truth, detector.num_classes, &coco_thresholds());
    Ok((result, detections))
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    step: usize,
    stats: CategoryStats,
    teacher_step: Option<usize>,
    momentum: f64,
    weight_decay: f64,
}

const STATE_FILE: &str = "state.json";

/// Writes every part of `state` under `dir`; a later load resumes bit-exactly.
pub fn save_state(dir: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    let dir = dir.as_ref();
    let none = serde_json::Value::Null;
    save_params(dir.join("student"), &state.student, "student", state.step, none.clone())?;
    save_params(dir.join("momentum"), &state.opt.buffers, "momentum", state.step, none.clone())?;
    if let Some(t) = &state.teacher {
        save_params(dir.join("teacher"), &t.params, "teacher", state.step, none)?;
    }
    let file = StateFile {
        step: state.step,
        stats: state.stats.clone(),
        teacher_step: state.teacher.as_ref().map(|t| t.step),
        momentum: state.opt.momentum,
        weight_decay: state.opt.weight_decay,
    };
    let path = dir.join(STATE_FILE);
    fs::write(&path, serde_json::to_string_pretty(&file).expect("serializable")).map_err(io_err(&path))
}

pub fn load_state(dir: impl AsRef<Path>) -> Result<TrainState> {
    let dir = dir.as_ref();
    let path = dir.join(STATE_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let file: StateFile = serde_json::from_str(&text).map_err(|e| CoreError::Parse {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let student = load_params(dir.join("student"))?.0;
    let buffers = load_params(dir.join("momentum"))?.0;
    student.check_compatible(&buffers)?;
    let teacher = match file.teacher_step {
        Some(step) => Some(TeacherState {
            params: load_params(dir.join("teacher"))?.0,
            step,
        }),
        None => None,
    };
    Ok(TrainState {
        student,
        opt: Sgd {
            momentum: file.momentum,
            weight_decay: file.weight_decay,
            buffers,
        },
        teacher,
        stats: file.stats,
        step: file.step,
    })
}
