//! Seeded verification sweeps shared by the CLI and the acceptance suite.
//!
//! Every sweep returns raw error statistics; the `*_TOL` constants are the
//! pass thresholds.

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rand::Rng;
use serde::Serialize;

use crate::aape::{AapeConfig, Stem};
use crate::adaptive_conv::{self, conv_config, AdaptiveConvInput};
use crate::autodiff::{grad_check_with, Binder, GradCheckOptions, Graph, Leaf, ParamSet};
use crate::error::Result;
use crate::rng::{keyed, Lane};
use crate::sblu::{self, gamma, Bounds, SbluConfig, StaticKernelParams};
use crate::windows::{
    dominance_onset, fit_tone, spectrum_trace, SpectrumTrace, TonePoint, WindowKind, WindowSpec,
};

pub const CONV_GRAD_TOL: f64 = 1e-5;
pub const STEM_GRAD_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-12;
pub const COUPLING_TOL: f64 = 1e-10;
pub const COUPLING_I_FLOOR: f64 = 1e-8;
pub const AGREEMENT_TOL: f64 = 1e-12;
pub const GAMMA_TOL: f64 = 1e-12;
pub const DERIVATION_TOL: f64 = 1e-8;

/// Relative step of the five-point central stencil in the convolution sweep;
/// the absolute step is `CONV_FD_STEP * max(1, |v|)`.
pub const CONV_FD_STEP: f64 = 1e-6;
/// Relative errors are taken against `max(|a|, |n|, REL_FLOOR * max|a|)`.
pub const REL_FLOOR: f64 = 1e-3;

const DELTA: f64 = 0.01;
const EPSILON: f64 = 0.01;
const P_TIME: usize = 16;

/// Keeps finite-difference probes away from the closed bounds.
fn interior_operands(
    h: usize,
    n: usize,
    bounds: &Bounds,
    rng: &mut impl Rng,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let x = Array2::from_shape_fn((h, n), |_| rng.random_range(-1.0..1.0));
    let a = Array2::from_shape_fn((h, n), |_| bounds.alpha_min + rng.random_range(0.1..40.0));
    let b = Array2::from_shape_fn((h, n), |_| {
        rng.random_range(bounds.beta_min + 0.1..bounds.beta_max - 0.1)
    });
    (x, a, b)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConvGradCase {
    pub hidden: usize,
    pub frames: usize,
    pub kernel: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// `sum_t G[t] |y[t]|` restricted to one channel, as a sum of per-frame
/// differences against `base` so unaffected frames cancel exactly.
fn row_delta(x: &[f64], a: &[f64], b: &[f64], g: &[f64], cfg: &SbluConfig, base: &[f64]) -> f64 {
    let n = x.len();
    let v = ndarray::ArrayView2::from_shape;
    let inp = AdaptiveConvInput {
        x: v((1, n), x).expect("row view"),
        alpha: v((1, n), a).expect("row view"),
        beta: v((1, n), b).expect("row view"),
        delta: cfg.delta,
        kernel: cfg.kernel,
    };
    let (y, _) = adaptive_conv::forward(&inp);
    y.row(0)
        .iter()
        .zip(base)
        .zip(g)
        .map(|((&yp, &y0), &w)| w * (yp - y0))
        .sum()
}

/// Analytic backward of `sum(G * |y|)` against central differences on every
/// coordinate of `x`, `alpha` and `beta`.
pub fn conv_grad_case(
    hidden: usize,
    frames: usize,
    kernel: usize,
    seed: u64,
) -> Result<ConvGradCase> {
    let cfg = conv_config(kernel, DELTA, EPSILON, P_TIME);
    let bounds = cfg.bounds()?;
    let mut rng = keyed(
        seed,
        (hidden * 10_000 + frames * 100 + kernel) as u64,
        Lane::Sweep,
        0,
    );
    let (x, a, b) = interior_operands(hidden, frames, &bounds, &mut rng);
    let gout = Array2::from_shape_fn((hidden, frames), |_| rng.random_range(-1.0..1.0));
    let inp = AdaptiveConvInput::new(x.view(), a.view(), b.view(), &cfg)?;
    let (y, saved) = adaptive_conv::forward(&inp);
    let grads = adaptive_conv::backward(&inp, &saved, gout.view())?;

    let mut case = ConvGradCase {
        hidden,
        frames,
        kernel,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    for (which, analytic) in [&grads.x, &grads.alpha, &grads.beta]
        .into_iter()
        .enumerate()
    {
        let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for ch in 0..hidden {
            let base: Vec<f64> = y.row(ch).to_vec();
            let g: Vec<f64> = gout.row(ch).to_vec();
            let mut rows = [x.row(ch).to_vec(), a.row(ch).to_vec(), b.row(ch).to_vec()];
            for t in 0..frames {
                let orig = rows[which][t];
                let h = CONV_FD_STEP * orig.abs().max(1.0);
                let mut at = |k: f64| {
                    rows[which][t] = orig + k * h;
                    let v = row_delta(&rows[0], &rows[1], &rows[2], &g, &cfg, &base);
                    rows[which][t] = orig;
                    v
                };
                let num = (8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0))) / (12.0 * h);
                let an = analytic[[ch, t]];
                let abs = (num - an).abs();
                let denom = an
                    .abs()
                    .max(num.abs())
                    .max(REL_FLOOR * scale)
                    .max(f64::MIN_POSITIVE);
                case.max_abs_error = case.max_abs_error.max(abs);
                case.max_rel_error = case.max_rel_error.max(abs / denom);
                case.checked += 1;
            }
        }
    }
    Ok(case)
}

pub const SWEEP_HIDDEN: [usize; 3] = [1, 4, 16];
pub const SWEEP_FRAMES: [usize; 3] = [1, 17, 64];
pub const SWEEP_KERNELS: [usize; 3] = [3, 31, 63];

pub fn conv_grad_sweep(seed: u64) -> Result<Vec<ConvGradCase>> {
    let mut out = Vec::new();
    for &h in &SWEEP_HIDDEN {
        for &n in &SWEEP_FRAMES {
            for &k in &SWEEP_KERNELS {
                out.push(conv_grad_case(h, n, k, seed)?);
            }
        }
    }
    Ok(out)
}

/// End-to-end gradient check of the stem parameters through
/// `sum(G * fused)` for a random input.
pub fn stem_grad_check(
    cfg: &AapeConfig,
    seed: u64,
    max_coords: usize,
) -> Result<crate::autodiff::GradCheckReport> {
    let stem = Stem::new(cfg)?;
    let mut ps = ParamSet::new();
    stem.init(&mut ps, &mut keyed(seed, 0, Lane::Init, 0));
    let mut rng = keyed(seed, 0, Lane::Data, 0);
    let x = Array2::from_shape_fn((cfg.f, cfg.t), |_| rng.random_range(-1.0..1.0));
    let gw = Array2::from_shape_fn((cfg.tokens(), cfg.d), |_| rng.random_range(-1.0..1.0));
    let f = |g: &mut Graph, vars: &[crate::autodiff::Var]| {
        let mut b = Binder::from_vars(&ps, vars);
        let out = stem.forward(g, &mut b, &x, None).expect("stem forward");
        let w = g.constant(gw.clone());
        g.mul(out.fused, w)
    };
    let opts = GradCheckOptions {
        h: 1e-6,
        max_coords,
        seed,
        rel_floor: REL_FLOOR,
    };
    Ok(grad_check_with(f, ps.values(), opts))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct OracleReport {
    pub cases: usize,
    pub max_abs_error: f64,
}

/// Fused convolution against the kernel-materialising oracle on random
/// shapes, kernels and admissible operands.
pub fn oracle_sweep(cases: usize, seed: u64) -> Result<OracleReport> {
    let mut rep = OracleReport {
        cases,
        max_abs_error: 0.0,
    };
    for i in 0..cases {
        let mut rng = keyed(seed, i as u64, Lane::Sweep, 1);
        let kernel = 2 * rng.random_range(1..=31) + 1;
        let (h, n) = (rng.random_range(1..=8), rng.random_range(1..=96));
        let cfg = conv_config(kernel, DELTA, EPSILON, P_TIME);
        let (x, a, b) = adaptive_conv::random_operands(h, n, &cfg.bounds()?, &mut rng);
        let inp = AdaptiveConvInput::new(x.view(), a.view(), b.view(), &cfg)?;
        let (y, _) = adaptive_conv::forward(&inp);
        let o = adaptive_conv::naive_oracle(&inp);
        let err = (&y - &o).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        rep.max_abs_error = rep.max_abs_error.max(err);
    }
    Ok(rep)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CouplingSweep {
    pub cases: usize,
    pub checked: usize,
    pub max_alpha_residual: f64,
    pub max_beta_residual: f64,
    pub fused_convolutions: usize,
    pub reference_convolutions: usize,
    pub frames_total: usize,
    /// Largest difference between the two-sum and four-sum gradients.
    pub max_agreement_error: f64,
}

pub fn coupling_sweep(cases: usize, seed: u64) -> Result<CouplingSweep> {
    let mut rep = CouplingSweep {
        cases,
        checked: 0,
        max_alpha_residual: 0.0,
        max_beta_residual: 0.0,
        fused_convolutions: 0,
        reference_convolutions: 0,
        frames_total: 0,
        max_agreement_error: 0.0,
    };
    for i in 0..cases {
        let mut rng = keyed(seed, i as u64, Lane::Sweep, 2);
        let kernel = 2 * rng.random_range(1..=31) + 1;
        let (h, n) = (rng.random_range(1..=8), rng.random_range(1..=64));
        let cfg = conv_config(kernel, DELTA, EPSILON, P_TIME);
        let (x, a, b) = adaptive_conv::random_operands(h, n, &cfg.bounds()?, &mut rng);
        let gout = Array2::from_shape_fn((h, n), |_| rng.random_range(-1.0..1.0));
        let inp = AdaptiveConvInput::new(x.view(), a.view(), b.view(), &cfg)?;
        let (_, saved) = adaptive_conv::forward(&inp);
        let c = adaptive_conv::coupling_residuals(&inp, &saved, COUPLING_I_FLOOR);
        rep.checked += c.checked;
        rep.max_alpha_residual = rep.max_alpha_residual.max(c.max_alpha_residual);
        rep.max_beta_residual = rep.max_beta_residual.max(c.max_beta_residual);
        let fused = adaptive_conv::backward(&inp, &saved, gout.view())?;
        let reference = adaptive_conv::backward_reference(&inp, &saved, gout.view())?;
        rep.fused_convolutions += fused.base_convolutions;
        rep.reference_convolutions += reference.base_convolutions;
        rep.frames_total += h * n;
        for (p, q) in [
            (&fused.x, &reference.x),
            (&fused.alpha, &reference.alpha),
            (&fused.beta, &reference.beta),
        ] {
            let e = (p - q).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            rep.max_agreement_error = rep.max_agreement_error.max(e);
        }
    }
    Ok(rep)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GammaReport {
    pub cases: usize,
    pub max_abs_error: f64,
}

/// Closed-form `gamma` against `|sinh(delta lambda / 2) / lambda|` in complex
/// arithmetic, over random hops and admissible poles.
pub fn gamma_sweep(cases: usize, seed: u64) -> Result<GammaReport> {
    let mut rng = keyed(seed, 0, Lane::Sweep, 3);
    let mut rep = GammaReport {
        cases,
        max_abs_error: 0.0,
    };
    for _ in 0..cases {
        let delta = rng.random_range(0.001..0.05);
        let b = sblu::derive_bounds(delta, 63, EPSILON, P_TIME)?;
        let alpha = b.alpha_min + rng.random_range(0.0..200.0);
        let beta = rng.random_range(b.beta_min..=b.beta_max);
        let lam = Complex64::new(alpha, beta);
        let oracle = ((0.5 * delta * lam).sinh() / lam).norm();
        rep.max_abs_error = rep
            .max_abs_error
            .max((gamma(alpha, beta, delta)? - oracle).abs());
    }
    Ok(rep)
}

/// Discrete window state against quadrature of the continuous kernel on
/// `trials` random piecewise-constant inputs.
pub fn derivation_check(trials: usize, seed: u64) -> Result<sblu::DerivationReport> {
    let cfg = SbluConfig {
        delta: DELTA,
        kernel: 63,
        hidden: 4,
        inputs: 3,
        outputs: 2,
        epsilon: EPSILON,
        p_time: P_TIME,
        p_freq: 16,
    };
    let params = StaticKernelParams::random(&cfg, &mut keyed(seed, 0, Lane::Sweep, 4))?;
    sblu::verify_appendix_a(&cfg, &params, trials, seed)
}

/// Parameters of the window comparison experiment.
pub const WINDOW_DELTA: f64 = 0.01;
pub const WINDOW_LEN: usize = 127;
pub const TONE_OMEGA: f64 = 24.5;
pub const FIT_LR: f64 = 0.3;
pub const FIT_STEPS: usize = 200;
pub const FIT_OFFSET: f64 = 10.0;
/// Largest `|beta - omega0|` accepted after the fit budget.
pub const FIT_THRESHOLD: f64 = 1e-6;

pub fn window_spec(kind: WindowKind) -> Result<WindowSpec> {
    WindowSpec::new(kind, kind.default_param(), WINDOW_LEN, WINDOW_DELTA)
}

/// Offsets `0, 0.01, ..., 25` in Hz.
pub fn offset_grid() -> Vec<f64> {
    (0..=2500).map(|i| 0.01 * i as f64).collect()
}

/// Peak-normalised traces for the two-sided exponential and the Gaussian.
pub fn window_traces() -> Result<Vec<SpectrumTrace>> {
    let grid = offset_grid();
    [WindowKind::TwoSidedExp, WindowKind::Gaussian]
        .into_iter()
        .map(|k| Ok(spectrum_trace(&window_spec(k)?, &grid)?.normalized()))
        .collect()
}

pub fn trace_csv(traces: &[SpectrumTrace]) -> String {
    let mut s = String::from("omega,magnitude,gradient,window_kind\n");
    for tr in traces {
        for i in 0..tr.omega.len() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                tr.omega[i],
                tr.magnitude[i],
                tr.gradient[i],
                tr.kind.name()
            ));
        }
    }
    s
}

/// Offset beyond which the two-sided gradient magnitude stays above the
/// Gaussian's.
pub fn gradient_crossover(traces: &[SpectrumTrace]) -> Option<f64> {
    let (two, gauss) = (&traces[0], &traces[1]);
    dominance_onset(&two.omega, &two.gradient, &gauss.gradient)
}

pub fn tone_fit(kind: WindowKind) -> Result<Vec<TonePoint>> {
    fit_tone(
        &window_spec(kind)?,
        TONE_OMEGA,
        TONE_OMEGA - FIT_OFFSET,
        FIT_LR,
        FIT_STEPS,
    )
}

pub fn fit_csv(traj: &[TonePoint]) -> String {
    let mut s = String::from("step,beta,E\n");
    for p in traj {
        s.push_str(&format!("{},{},{}\n", p.step, p.beta, p.e));
    }
    s
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundSweep {
    pub draws: usize,
    pub violations: usize,
    pub replication_breaks: usize,
    pub min_alpha_margin: f64,
    pub min_beta_margin: f64,
}

/// Fresh stem initialisations on random inputs: every `(alpha, beta)` must be
/// strictly interior and constant across each `P_time` run of frames.
pub fn bound_sweep(cfg: &AapeConfig, draws: usize, seed: u64) -> Result<BoundSweep> {
    let stem = Stem::new(cfg)?;
    let bd = stem.bounds;
    let mut rep = BoundSweep {
        draws,
        violations: 0,
        replication_breaks: 0,
        min_alpha_margin: f64::INFINITY,
        min_beta_margin: f64::INFINITY,
    };
    for d in 0..draws {
        let mut ps = ParamSet::new();
        stem.init(&mut ps, &mut keyed(seed, d as u64, Lane::Init, 0));
        let mut rng = keyed(seed, d as u64, Lane::Data, 0);
        let x = Array2::from_shape_fn((cfg.f, cfg.t), |_| rng.random_range(-3.0..3.0));
        let mut g = Graph::new();
        let mut b = Binder::new(&ps, Leaf::Constant);
        let spec = stem.patchify_standard(&mut g, &mut b, &x)?;
        let (a, be) = stem.lambda_encode(&mut g, &mut b, spec, cfg.time_patches(), None)?;
        let (a, be) = (g.value(a), g.value(be));
        for (&av, &bv) in a.iter().zip(be.iter()) {
            if !(av > bd.alpha_min && bv > bd.beta_min && bv < bd.beta_max) {
                rep.violations += 1;
            }
            rep.min_alpha_margin = rep.min_alpha_margin.min(av - bd.alpha_min);
            rep.min_beta_margin = rep
                .min_beta_margin
                .min((bv - bd.beta_min).min(bd.beta_max - bv));
        }
        for field in [a, be] {
            for row in field.axis_iter(Axis(0)) {
                for run in row.as_slice().expect("standard layout").chunks(cfg.p_time) {
                    if run.iter().any(|v| v.to_bits() != run[0].to_bits()) {
                        rep.replication_breaks += 1;
                    }
                }
            }
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_conv_case_passes() {
        let c = conv_grad_case(2, 9, 5, 1).unwrap();
        assert_eq!(c.checked, 3 * 18);
        assert!(c.max_rel_error < CONV_GRAD_TOL, "{c:?}");
    }

    #[test]
    fn trace_csv_header_and_rows() {
        let csv = trace_csv(&window_traces().unwrap());
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("omega,magnitude,gradient,window_kind"));
        assert_eq!(csv.lines().count(), 1 + 2 * 2501);
    }
}
