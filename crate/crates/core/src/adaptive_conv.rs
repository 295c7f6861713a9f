//! Input-dependent depthwise convolution with bilateral complex kernels.
//!
//! For channel `h` and frame `n` the kernel is generated from that frame's
//! own decay and frequency:
//!
//! ```text
//! Re y[h,n] = sum_k x[h, n+k-c] exp(-d_k alpha[h,n]) cos(d_k beta[h,n])
//! Im y[h,n] = sum_k x[h, n+k-c] exp(-d_k alpha[h,n]) sin(d_k beta[h,n])
//! d_k = delta |k - c|,   out[h,n] = |y[h,n]|
//! ```
//!
//! with zero padding of `c` frames on both sides. Kernels are produced on the
//! fly per frame, so working memory is `O(K)` per channel regardless of `N`.
//!
//! The backward pass needs only the two weighted sums
//! `S_c = sum_k d_k x w_k cos` and `S_s = sum_k d_k x w_k sin` per frame:
//! `d|y|/d alpha = -R S_c - I S_s` and `d|y|/d beta = -R S_s + I S_c` with
//! `R = Re y / |y|`, `I = Im y / |y|`. [`backward_reference`] evaluates the four
//! real/imaginary partials with four independent sums for comparison.

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use num_traits::{Float, FromPrimitive};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ensure, Result};
use crate::sblu::{Bounds, SbluConfig};

/// Frames processed per kernel-generation tile.
pub const FRAME_TILE: usize = 64;

/// Scalar types the convolution runs in.
pub trait Real: Float + FromPrimitive + Send + Sync + std::fmt::Debug + 'static {}
impl<T: Float + FromPrimitive + Send + Sync + std::fmt::Debug + 'static> Real for T {}

#[inline]
fn cast<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("representable")
}

/// Borrowed, validated operands of one convolution call. All arrays are `H x N`.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveConvInput<'a, T: Real> {
    pub x: ArrayView2<'a, T>,
    pub alpha: ArrayView2<'a, T>,
    pub beta: ArrayView2<'a, T>,
    pub delta: f64,
    pub kernel: usize,
}

impl<'a, T: Real> AdaptiveConvInput<'a, T> {
    pub fn new(
        x: ArrayView2<'a, T>,
        alpha: ArrayView2<'a, T>,
        beta: ArrayView2<'a, T>,
        cfg: &SbluConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let inp = AdaptiveConvInput {
            x,
            alpha,
            beta,
            delta: cfg.delta,
            kernel: cfg.kernel,
        };
        inp.check(&cfg.bounds()?)?;
        Ok(inp)
    }

    fn check(&self, bounds: &Bounds) -> Result<()> {
        ensure!(
            self.x.dim() == self.alpha.dim() && self.x.dim() == self.beta.dim(),
            Shape,
            "x {:?}, alpha {:?} and beta {:?} must agree",
            self.x.dim(),
            self.alpha.dim(),
            self.beta.dim()
        );
        let mut bad = None;
        Zip::indexed(&self.alpha)
            .and(&self.beta)
            .for_each(|idx, &a, &b| {
                let (a, b) = (
                    a.to_f64().unwrap_or(f64::NAN),
                    b.to_f64().unwrap_or(f64::NAN),
                );
                if bad.is_none() && !bounds.contains(a, b) {
                    bad = Some((idx, a, b));
                }
            });
        if let Some(((h, n), a, b)) = bad {
            return Err(crate::Error::Bounds(format!(
                "(alpha, beta) = ({a}, {b}) at channel {h}, frame {n} outside alpha >= {}, beta in [{}, {}]",
                bounds.alpha_min, bounds.beta_min, bounds.beta_max
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.x.nrows()
    }

    pub fn frames(&self) -> usize {
        self.x.ncols()
    }

    fn center(&self) -> usize {
        (self.kernel - 1) / 2
    }
}

/// Forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AdaptiveConvSaved<T: Real> {
    pub re: Array2<T>,
    pub im: Array2<T>,
    pub mag: Array2<T>,
    /// `Re y / |y|`, zero where `|y| = 0`.
    pub r: Array2<T>,
    /// `Im y / |y|`, zero where `|y| = 0`.
    pub i: Array2<T>,
}

impl<T: Real> AdaptiveConvSaved<T> {
    /// True where the output vanished and the phase is undefined.
    pub fn degenerate(&self) -> Array2<bool> {
        self.mag.mapv(|m| m == T::zero())
    }
}

/// Half-kernel taps for one frame: `(d_k, w_k cos, w_k sin)` for `m = |k - c|` in `0..=c`.
#[inline]
fn frame_taps<T: Real>(alpha: T, beta: T, delta: T, c: usize, taps: &mut Vec<(T, T, T)>) {
    taps.clear();
    for m in 0..=c {
        let dk = delta * cast::<T>(m as f64);
        let w = (-dk * alpha).exp();
        let (s, co) = (dk * beta).sin_cos();
        taps.push((dk, w * co, w * s));
    }
}

#[inline]
fn tap_pair<T: Real>(row: &[T], n: usize, m: usize) -> T {
    let left = if m <= n { row[n - m] } else { T::zero() };
    let right = row.get(n + m).copied().unwrap_or(T::zero());
    if m == 0 {
        left
    } else {
        left + right
    }
}

/// Fused forward pass. Deterministic; channels are processed in parallel but
/// every output is reduced sequentially.
pub fn forward<T: Real>(inp: &AdaptiveConvInput<'_, T>) -> (Array2<T>, AdaptiveConvSaved<T>) {
    let (h, n) = inp.x.dim();
    let c = inp.center();
    let delta = cast::<T>(inp.delta);
    let mut re = Array2::<T>::zeros((h, n));
    let mut im = Array2::<T>::zeros((h, n));
    re.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(im.axis_iter_mut(Axis(0)))
        .enumerate()
        .for_each(|(ch, (mut re_row, mut im_row))| {
            let x = inp.x.row(ch).to_vec();
            let mut taps = Vec::with_capacity(c + 1);
            for tile in (0..n).step_by(FRAME_TILE) {
                for t in tile..(tile + FRAME_TILE).min(n) {
                    frame_taps(inp.alpha[[ch, t]], inp.beta[[ch, t]], delta, c, &mut taps);
                    let (mut sr, mut si) = (T::zero(), T::zero());
                    for (m, &(_, wc, ws)) in taps.iter().enumerate() {
                        let v = tap_pair(&x, t, m);
                        sr = sr + wc * v;
                        si = si + ws * v;
                    }
                    re_row[t] = sr;
                    im_row[t] = si;
                }
            }
        });
    let mag = Zip::from(&re).and(&im).map_collect(|&a, &b| a.hypot(b));
    let unit = |num: &Array2<T>| {
        Zip::from(num)
            .and(&mag)
            .map_collect(|&v, &m| if m > T::zero() { v / m } else { T::zero() })
    };
    let (r, i) = (unit(&re), unit(&im));
    (mag.clone(), AdaptiveConvSaved { re, im, mag, r, i })
}

/// Gradients of `sum(grad_out * |y|)`.
#[derive(Debug, Clone)]
pub struct AdaptiveConvGrads<T: Real> {
    pub x: Array2<T>,
    pub alpha: Array2<T>,
    pub beta: Array2<T>,
    /// Weighted `K`-tap sums evaluated for the parameter gradients.
    pub base_convolutions: usize,
}

/// The four real/imaginary partials of `d|y|/d(alpha, beta)` before assembly.
#[derive(Debug, Clone)]
pub struct SplitPartials<T: Real> {
    pub re_alpha: Array2<T>,
    pub re_beta: Array2<T>,
    pub im_alpha: Array2<T>,
    pub im_beta: Array2<T>,
}

fn check_grad_shape<T: Real>(
    inp: &AdaptiveConvInput<'_, T>,
    saved: &AdaptiveConvSaved<T>,
    grad_out: &ArrayView2<T>,
) -> Result<()> {
    ensure!(
        grad_out.dim() == inp.x.dim() && saved.mag.dim() == inp.x.dim(),
        Shape,
        "grad_out {:?} / saved {:?} do not match input {:?}",
        grad_out.dim(),
        saved.mag.dim(),
        inp.x.dim()
    );
    Ok(())
}

/// Scatters `g * d|y[n]| / dx` into the input-gradient row.
#[inline]
fn scatter_input_grad<T: Real>(gx: &mut [T], taps: &[(T, T, T)], t: usize, g: T, r: T, i: T) {
    let n = gx.len();
    for (m, &(_, wc, ws)) in taps.iter().enumerate() {
        let v = g * (r * wc + i * ws);
        if m <= t {
            gx[t - m] = gx[t - m] + v;
        }
        if m > 0 && t + m < n {
            gx[t + m] = gx[t + m] + v;
        }
    }
}

/// Analytic backward pass reusing two base sums per frame.
///
/// Frames with `|y| = 0` contribute zero to every gradient.
pub fn backward<T: Real>(
    inp: &AdaptiveConvInput<'_, T>,
    saved: &AdaptiveConvSaved<T>,
    grad_out: ArrayView2<'_, T>,
) -> Result<AdaptiveConvGrads<T>> {
    check_grad_shape(inp, saved, &grad_out)?;
    let (h, n) = inp.x.dim();
    let c = inp.center();
    let delta = cast::<T>(inp.delta);
    let mut gx = Array2::<T>::zeros((h, n));
    let mut ga = Array2::<T>::zeros((h, n));
    let mut gb = Array2::<T>::zeros((h, n));
    gx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(ga.axis_iter_mut(Axis(0)))
        .zip(gb.axis_iter_mut(Axis(0)))
        .enumerate()
        .for_each(|(ch, ((mut gx_row, mut ga_row), mut gb_row))| {
            let x = inp.x.row(ch).to_vec();
            let mut gx_buf = vec![T::zero(); n];
            let mut taps = Vec::with_capacity(c + 1);
            for t in 0..n {
                let g = grad_out[[ch, t]];
                if saved.mag[[ch, t]] == T::zero() || g == T::zero() {
                    continue;
                }
                frame_taps(inp.alpha[[ch, t]], inp.beta[[ch, t]], delta, c, &mut taps);
                let (r, i) = (saved.r[[ch, t]], saved.i[[ch, t]]);
                let (mut s_c, mut s_s) = (T::zero(), T::zero());
                for (m, &(dk, wc, ws)) in taps.iter().enumerate() {
                    let v = dk * tap_pair(&x, t, m);
                    s_c = s_c + wc * v;
                    s_s = s_s + ws * v;
                }
                ga_row[t] = g * (-r * s_c - i * s_s);
                gb_row[t] = g * (-r * s_s + i * s_c);
                scatter_input_grad(&mut gx_buf, &taps, t, g, r, i);
            }
            gx_row.assign(&ndarray::ArrayView1::from(&gx_buf));
        });
    Ok(AdaptiveConvGrads {
        x: gx,
        alpha: ga,
        beta: gb,
        base_convolutions: 2 * h * n,
    })
}

/// Four independent base sums per frame, one per real/imaginary partial.
pub fn split_partials<T: Real>(
    inp: &AdaptiveConvInput<'_, T>,
    saved: &AdaptiveConvSaved<T>,
) -> SplitPartials<T> {
    let (h, n) = inp.x.dim();
    let c = inp.center() as isize;
    let delta = inp.delta;
    let mut out = SplitPartials {
        re_alpha: Array2::zeros((h, n)),
        re_beta: Array2::zeros((h, n)),
        im_alpha: Array2::zeros((h, n)),
        im_beta: Array2::zeros((h, n)),
    };
    // Each sum walks the full kernel on its own; nothing is shared.
    let weighted = |ch: usize, t: usize, use_sin: bool| -> T {
        let (a, b) = (inp.alpha[[ch, t]], inp.beta[[ch, t]]);
        let mut s = T::zero();
        for k in 0..inp.kernel as isize {
            let src = t as isize + k - c;
            if src < 0 || src >= n as isize {
                continue;
            }
            let dk = cast::<T>(delta * (k - c).unsigned_abs() as f64);
            let trig = if use_sin {
                (dk * b).sin()
            } else {
                (dk * b).cos()
            };
            s = s + dk * inp.x[[ch, src as usize]] * (-dk * a).exp() * trig;
        }
        s
    };
    for ch in 0..h {
        for t in 0..n {
            if saved.mag[[ch, t]] == T::zero() {
                continue;
            }
            let (r, i) = (saved.r[[ch, t]], saved.i[[ch, t]]);
            out.re_alpha[[ch, t]] = -r * weighted(ch, t, false);
            out.re_beta[[ch, t]] = -r * weighted(ch, t, true);
            out.im_alpha[[ch, t]] = -i * weighted(ch, t, true);
            out.im_beta[[ch, t]] = i * weighted(ch, t, false);
        }
    }
    out
}

/// Backward pass assembled from [`split_partials`]; `4 H N` base sums.
pub fn backward_reference<T: Real>(
    inp: &AdaptiveConvInput<'_, T>,
    saved: &AdaptiveConvSaved<T>,
    grad_out: ArrayView2<'_, T>,
) -> Result<AdaptiveConvGrads<T>> {
    check_grad_shape(inp, saved, &grad_out)?;
    let (h, n) = inp.x.dim();
    let p = split_partials(inp, saved);
    let alpha = Zip::from(&p.re_alpha)
        .and(&p.im_alpha)
        .and(&grad_out)
        .map_collect(|&a, &b, &g| g * (a + b));
    let beta = Zip::from(&p.re_beta)
        .and(&p.im_beta)
        .and(&grad_out)
        .map_collect(|&a, &b, &g| g * (a + b));
    let c = inp.center();
    let delta = cast::<T>(inp.delta);
    let mut gx = Array2::<T>::zeros((h, n));
    let mut taps = Vec::with_capacity(c + 1);
    for ch in 0..h {
        let mut row = vec![T::zero(); n];
        for t in 0..n {
            if saved.mag[[ch, t]] == T::zero() {
                continue;
            }
            frame_taps(inp.alpha[[ch, t]], inp.beta[[ch, t]], delta, c, &mut taps);
            scatter_input_grad(
                &mut row,
                &taps,
                t,
                grad_out[[ch, t]],
                saved.r[[ch, t]],
                saved.i[[ch, t]],
            );
        }
        gx.row_mut(ch).assign(&ndarray::ArrayView1::from(&row));
    }
    Ok(AdaptiveConvGrads {
        x: gx,
        alpha,
        beta,
        base_convolutions: 4 * h * n,
    })
}

/// Kernel-materialising reference. Memory is `O(H N K)`; small sizes only.
pub fn naive_oracle<T: Real>(inp: &AdaptiveConvInput<'_, T>) -> Array2<T> {
    let (h, n) = inp.x.dim();
    let k_len = inp.kernel;
    let c = inp.center();
    let mut k_re = Array3::<T>::zeros((h, n, k_len));
    let mut k_im = Array3::<T>::zeros((h, n, k_len));
    for ch in 0..h {
        for t in 0..n {
            for k in 0..k_len {
                let dk = cast::<T>(inp.delta * k.abs_diff(c) as f64);
                let w = (-dk * inp.alpha[[ch, t]]).exp();
                k_re[[ch, t, k]] = w * (dk * inp.beta[[ch, t]]).cos();
                k_im[[ch, t, k]] = w * (dk * inp.beta[[ch, t]]).sin();
            }
        }
    }
    let mut out = Array2::zeros((h, n));
    for ch in 0..h {
        for t in 0..n {
            let (mut sr, mut si) = (T::zero(), T::zero());
            for k in 0..k_len {
                let src = t as isize + k as isize - c as isize;
                let xv = if src >= 0 && (src as usize) < n {
                    inp.x[[ch, src as usize]]
                } else {
                    T::zero()
                };
                sr = sr + xv * k_re[[ch, t, k]];
                si = si + xv * k_im[[ch, t, k]];
            }
            out[[ch, t]] = (sr * sr + si * si).sqrt();
        }
    }
    out
}

/// Residuals of the real/imaginary coupling relations
/// `Re(d/d alpha) = -(R/I) Im(d/d beta)` and `Re(d/d beta) = (R/I) Im(d/d alpha)`.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct CouplingReport {
    pub checked: usize,
    pub max_alpha_residual: f64,
    pub max_beta_residual: f64,
}

/// Evaluates both coupling relations where `|I| > i_floor`, using the
/// four-sum partials.
pub fn coupling_residuals(
    inp: &AdaptiveConvInput<'_, f64>,
    saved: &AdaptiveConvSaved<f64>,
    i_floor: f64,
) -> CouplingReport {
    let p = split_partials(inp, saved);
    let mut rep = CouplingReport::default();
    for ((ch, t), &i) in saved.i.indexed_iter() {
        if i.abs() <= i_floor {
            continue;
        }
        let ratio = saved.r[[ch, t]] / i;
        rep.checked += 1;
        rep.max_alpha_residual = rep
            .max_alpha_residual
            .max((p.re_alpha[[ch, t]] + ratio * p.im_beta[[ch, t]]).abs());
        rep.max_beta_residual = rep
            .max_beta_residual
            .max((p.re_beta[[ch, t]] - ratio * p.im_alpha[[ch, t]]).abs());
    }
    rep
}

/// Random admissible operands for sweeps.
pub fn random_operands(
    channels: usize,
    frames: usize,
    bounds: &Bounds,
    rng: &mut impl rand::Rng,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let x = Array2::from_shape_fn((channels, frames), |_| rng.random_range(-1.0..1.0));
    let alpha = Array2::from_shape_fn((channels, frames), |_| {
        bounds.alpha_min + rng.random_range(0.0..40.0)
    });
    let beta = Array2::from_shape_fn((channels, frames), |_| {
        rng.random_range(bounds.beta_min..bounds.beta_max)
    });
    (x, alpha, beta)
}

/// Build a config with only the fields the convolution reads populated.
pub fn conv_config(kernel: usize, delta: f64, epsilon: f64, p_time: usize) -> SbluConfig {
    SbluConfig {
        delta,
        kernel,
        hidden: 1,
        inputs: 1,
        outputs: 1,
        epsilon,
        p_time,
        p_freq: 1,
    }
}
