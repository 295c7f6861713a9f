//! Window functions, local spectra and the gradient study behind the choice
//! of a two-sided exponential window.
//!
//! Frequencies here are in cycles per second (the `beta / 2pi` convention),
//! with the sampling period `delta` in seconds. A local spectrum probes the
//! input at `beta` through `E(beta) = |sum_k w[k] x[k] exp(-j 2pi beta k delta)|`;
//! for a single tone this equals the window response `|W(omega0 - beta)|`, so
//! the slope of the window envelope is exactly the gradient available to a
//! learner adjusting `beta`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Magnitudes below this are treated as a zero projection.
pub const DEGENERATE_MAGNITUDE: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    OneSidedExp,
    TwoSidedExp,
    Gaussian,
}

impl WindowKind {
    pub fn name(self) -> &'static str {
        match self {
            WindowKind::OneSidedExp => "one_sided_exp",
            WindowKind::TwoSidedExp => "two_sided_exp",
            WindowKind::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "one_sided_exp" | "one-sided" => Some(WindowKind::OneSidedExp),
            "two_sided_exp" | "two-sided" => Some(WindowKind::TwoSidedExp),
            "gaussian" => Some(WindowKind::Gaussian),
            _ => None,
        }
    }

    /// Decay / width used by the window comparison experiments. The
    /// exponentials use a per-sample decay, the Gaussian a width in samples.
    pub fn default_param(self) -> f64 {
        match self {
            WindowKind::OneSidedExp | WindowKind::TwoSidedExp => 0.15,
            WindowKind::Gaussian => 8.0,
        }
    }
}

/// A window of odd length `len` sampled at period `delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    pub kind: WindowKind,
    /// Decay `alpha` for the exponentials, `sigma_g` for the Gaussian.
    pub param: f64,
    pub len: usize,
    pub delta: f64,
}

impl WindowSpec {
    pub fn new(kind: WindowKind, param: f64, len: usize, delta: f64) -> Result<Self> {
        let spec = WindowSpec {
            kind,
            param,
            len,
            delta,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.len % 2 == 1,
            Invalid,
            "window length must be odd, got {}",
            self.len
        );
        ensure!(
            self.param > 0.0 && self.param.is_finite(),
            Invalid,
            "window parameter must be positive, got {}",
            self.param
        );
        ensure!(
            self.delta > 0.0 && self.delta.is_finite(),
            Invalid,
            "sampling period must be positive, got {}",
            self.delta
        );
        Ok(())
    }

    fn center(&self) -> f64 {
        (self.len - 1) as f64 / 2.0
    }
}

/// Samples the window. The peak is exactly 1, at the last sample for the
/// one-sided exponential and at the centre otherwise.
pub fn make_window(spec: &WindowSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let n = spec.len;
    let c = spec.center();
    let p = spec.param;
    let w = (0..n)
        .map(|k| {
            let k = k as f64;
            match spec.kind {
                WindowKind::OneSidedExp => (-p * ((n - 1) as f64 - k)).exp(),
                WindowKind::TwoSidedExp => (-p * (c - k).abs()).exp(),
                WindowKind::Gaussian => (-(c - k).powi(2) / (2.0 * p * p)).exp(),
            }
        })
        .collect();
    Ok(w)
}

/// Value and slope of the local spectrum at one probe frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSpectrum {
    pub e: f64,
    pub de_dbeta: f64,
    /// Set when the projection vanished and the slope is undefined.
    pub degenerate: bool,
}

/// `E(beta)` and its analytic derivative for an arbitrary complex input.
pub fn local_spectrum(
    window: &[f64],
    x: &[Complex64],
    beta: f64,
    delta: f64,
) -> Result<LocalSpectrum> {
    ensure!(
        window.len() == x.len(),
        Shape,
        "window has {} samples but input has {}",
        window.len(),
        x.len()
    );
    ensure!(delta > 0.0, Invalid, "sampling period must be positive");
    let mut s = Complex64::new(0.0, 0.0);
    let mut ds = Complex64::new(0.0, 0.0);
    for (k, (&w, &xk)) in window.iter().zip(x).enumerate() {
        let t = k as f64 * delta;
        let term = w * xk * Complex64::from_polar(1.0, -2.0 * PI * beta * t);
        s += term;
        ds += term * Complex64::new(0.0, -2.0 * PI * t);
    }
    let e = s.norm();
    if e < DEGENERATE_MAGNITUDE {
        return Ok(LocalSpectrum {
            e,
            de_dbeta: 0.0,
            degenerate: true,
        });
    }
    let de_dbeta = (s.re * ds.re + s.im * ds.im) / e;
    Ok(LocalSpectrum {
        e,
        de_dbeta,
        degenerate: false,
    })
}

/// A unit-amplitude complex tone `exp(j 2pi omega0 k delta)`.
pub fn single_tone(omega0: f64, len: usize, delta: f64) -> Vec<Complex64> {
    (0..len)
        .map(|k| Complex64::from_polar(1.0, 2.0 * PI * omega0 * k as f64 * delta))
        .collect()
}

/// Frequency response `|W(omega)|` and `d|W|/d omega` over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumTrace {
    pub kind: WindowKind,
    pub omega: Vec<f64>,
    pub magnitude: Vec<f64>,
    pub gradient: Vec<f64>,
}

impl SpectrumTrace {
    /// Rescales the magnitude to unit peak and the gradient to unit peak
    /// absolute value, making curves of different windows comparable.
    pub fn normalized(&self) -> SpectrumTrace {
        let peak = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let (pm, pg) = (peak(&self.magnitude), peak(&self.gradient));
        let scale = |v: &[f64], p: f64| -> Vec<f64> {
            if p > 0.0 {
                v.iter().map(|x| x / p).collect()
            } else {
                v.to_vec()
            }
        };
        SpectrumTrace {
            kind: self.kind,
            omega: self.omega.clone(),
            magnitude: scale(&self.magnitude, pm),
            gradient: scale(&self.gradient, pg),
        }
    }
}

/// Evaluates the window response on a strictly increasing grid.
///
/// The phase reference is the window centre; `|W|` and its slope do not depend
/// on that choice, and centring makes symmetric responses real-valued.
pub fn spectrum_trace(spec: &WindowSpec, omega_grid: &[f64]) -> Result<SpectrumTrace> {
    ensure!(!omega_grid.is_empty(), Invalid, "frequency grid is empty");
    ensure!(
        omega_grid.windows(2).all(|p| p[1] > p[0]),
        Invalid,
        "frequency grid must be strictly increasing"
    );
    let w = make_window(spec)?;
    let c = spec.center();
    let mut magnitude = Vec::with_capacity(omega_grid.len());
    let mut gradient = Vec::with_capacity(omega_grid.len());
    for &omega in omega_grid {
        let mut resp = Complex64::new(0.0, 0.0);
        let mut dresp = Complex64::new(0.0, 0.0);
        for (k, &wk) in w.iter().enumerate() {
            let t = (k as f64 - c) * spec.delta;
            let term = wk * Complex64::from_polar(1.0, 2.0 * PI * omega * t);
            resp += term;
            dresp += term * Complex64::new(0.0, 2.0 * PI * t);
        }
        let m = resp.norm();
        magnitude.push(m);
        gradient.push(if m < DEGENERATE_MAGNITUDE {
            0.0
        } else {
            (resp.re * dresp.re + resp.im * dresp.im) / m
        });
    }
    Ok(SpectrumTrace {
        kind: spec.kind,
        omega: omega_grid.to_vec(),
        magnitude,
        gradient,
    })
}

/// Smallest offset beyond which the first curve's magnitude stays strictly
/// above the second's for the rest of the grid. `None` if it never does.
pub fn dominance_onset(omega: &[f64], lead: &[f64], other: &[f64]) -> Option<f64> {
    let mut onset = None;
    for i in (0..omega.len()).rev() {
        if lead[i].abs() > other[i].abs() {
            onset = Some(omega[i]);
        } else {
            break;
        }
    }
    onset
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TonePoint {
    pub step: usize,
    pub beta: f64,
    pub e: f64,
}

/// Gradient ascent on `E(beta)` for a single complex tone at `omega0`.
///
/// Returns the state after each update; the first entry is step 0 at
/// `beta_init`.
pub fn fit_tone(
    spec: &WindowSpec,
    omega0: f64,
    beta_init: f64,
    lr: f64,
    steps: usize,
) -> Result<Vec<TonePoint>> {
    ensure!(steps >= 1, Invalid, "need at least one step");
    ensure!(
        lr > 0.0 && lr.is_finite(),
        Invalid,
        "learning rate must be positive"
    );
    let w = make_window(spec)?;
    let x = single_tone(omega0, spec.len, spec.delta);
    let mut beta = beta_init;
    let mut out = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let ls = local_spectrum(&w, &x, beta, spec.delta)?;
        out.push(TonePoint {
            step,
            beta,
            e: ls.e,
        });
        if step < steps {
            beta += lr * ls.de_dbeta;
        }
    }
    Ok(out)
}
