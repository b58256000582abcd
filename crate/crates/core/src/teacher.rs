//! Moving-average teacher.

use crate::error::{Error, Result};
use crate::state::ModelState;

/// Momentum used for the teacher update at full scale.
pub const DEFAULT_MOMENTUM: f64 = 0.999;

/// Deep copy of the student used as the initial teacher.
pub fn init_teacher(student: &ModelState) -> ModelState {
    student.clone()
}

pub fn check_momentum(momentum: f64) -> Result<()> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!("teacher momentum {momentum} must lie in [0, 1)")));
    }
    Ok(())
}

/// `teacher = momentum * teacher + (1 - momentum) * student`, entry-wise over
/// every tensor including normalization running statistics.
pub fn ema_update(teacher: &mut ModelState, student: &ModelState, momentum: f64) -> Result<()> {
    check_momentum(momentum)?;
    teacher.check_same_layout(student)?;
    let keep = momentum;
    let take = 1.0 - momentum;
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        t.zip_mut_with(s, |tv, &sv| *tv = keep * *tv + take * sv);
    }
    Ok(())
}
