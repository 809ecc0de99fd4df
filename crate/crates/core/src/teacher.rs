//! Teacher parameters as a moving average of the student, and teacher-side inference.

use dsl_autodiff::{Real, Tape, Tensor};

use crate::detector::{decode, forward, DecodeConfig, Detection, DetectorConfig, ParamSet};
use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState<T: Real> {
    pub params: ParamSet<T>,
    pub step: usize,
}

/// Deep copy of the student.
pub fn init_teacher<T: Real>(student: &ParamSet<T>) -> TeacherState<T> {
    TeacherState {
        params: student.clone(),
        step: 0,
    }
}

/// `teacher = eps * teacher + (1 - eps) * student`, elementwise over every parameter.
pub fn ema_update<T: Real>(teacher: &mut TeacherState<T>, student: &ParamSet<T>, eps: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(config_err(format!("smoothing coefficient {eps} outside [0, 1]")));
    }
    teacher.params.check_compatible(student)?;
    let (a, b) = (T::from_f64(eps), T::from_f64(1.0 - eps));
    for (name, t) in teacher.params.iter_mut() {
        let s = student.get(name)?;
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = a * *tv + b * sv;
        }
    }
    teacher.step += 1;
    Ok(())
}

/// Detections for each `[3, H, W]` image. No gradient state is kept.
pub fn infer<T: Real>(
    cfg: &DetectorConfig,
    params: &ParamSet<T>,
    images: &[Tensor<T>],
    decode_cfg: &DecodeConfig,
) -> Result<Vec<Vec<Detection>>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let shape = images[0].shape();
    let geometry = cfg.geometry(shape[1], shape[2])?;
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let out = forward(cfg, &bound, tape.constant(Tensor::stack(images)?))?;
    (0..images.len())
        .map(|n| decode(&out.maps(n)?, &geometry, decode_cfg))
        .collect()
}

pub fn teacher_infer<T: Real>(
    cfg: &DetectorConfig,
    teacher: &TeacherState<T>,
    images: &[Tensor<T>],
    decode_cfg: &DecodeConfig,
) -> Result<Vec<Vec<Detection>>> {
    infer(cfg, &teacher.params, images, decode_cfg)
}
