use ndarray::Zip;

use crate::autodiff::ParamSet;
use crate::error::{ensure, Result};

/// Cosine momentum: `end - (end - start) * (cos(pi m / max) + 1) / 2`,
/// clamped at `max`.
pub fn momentum(step: usize, max_steps: usize, start: f64, end: f64) -> f64 {
    let frac = if max_steps == 0 {
        1.0
    } else {
        (step.min(max_steps)) as f64 / max_steps as f64
    };
    end - (end - start) * ((std::f64::consts::PI * frac).cos() + 1.0) / 2.0
}

/// `teacher <- xi * teacher + (1 - xi) * student` for every teacher parameter.
pub fn ema_apply(teacher: &mut ParamSet, student: &ParamSet, xi: f64) -> Result<()> {
    ensure!(
        (0.0..=1.0).contains(&xi),
        Invalid,
        "momentum {xi} outside [0, 1]"
    );
    let names: Vec<String> = teacher.names().to_vec();
    for name in &names {
        let s = student.get(name);
        ensure!(s.is_some(), Shape, "student lacks teacher parameter {name}");
        let s = s.expect("checked");
        let t = teacher.get_mut(name).expect("own name");
        ensure!(
            t.dim() == s.dim(),
            Shape,
            "parameter {name}: teacher {:?} vs student {:?}",
            t.dim(),
            s.dim()
        );
        if xi == 1.0 {
            continue;
        }
        Zip::from(t)
            .and(s)
            .for_each(|t, &s| *t = xi * *t + (1.0 - xi) * s);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub params: ParamSet,
    pub step: usize,
    pub max_steps: usize,
    pub start: f64,
    pub end: f64,
}

impl TeacherState {
    pub fn new(params: ParamSet, max_steps: usize, start: f64, end: f64) -> Self {
        TeacherState {
            params,
            step: 0,
            max_steps,
            start,
            end,
        }
    }

    /// Momentum for the next update.
    pub fn xi(&self) -> f64 {
        momentum(self.step, self.max_steps, self.start, self.end)
    }

    /// Applies one EMA update and advances the schedule; returns the momentum used.
    pub fn update(&mut self, student: &ParamSet) -> Result<f64> {
        let xi = self.xi();
        ema_apply(&mut self.params, student, xi)?;
        self.step += 1;
        Ok(xi)
    }
}
