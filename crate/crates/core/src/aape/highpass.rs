//! Zero-phase high-pass filtering of each mel band along time.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{ensure, Result};

pub const HIGHPASS_TAPS: usize = 63;

/// Hamming-windowed sinc low-pass with cutoff `pi / p_time` rad/sample and
/// unit DC gain, spectrally inverted into a high-pass.
pub fn design_highpass(taps: usize, p_time: usize) -> Result<Vec<f64>> {
    ensure!(
        taps % 2 == 1 && taps >= 3,
        Invalid,
        "high-pass needs an odd tap count >= 3, got {taps}"
    );
    ensure!(p_time >= 1, Invalid, "P_time must be positive");
    let m = (taps - 1) / 2;
    let wc = PI / p_time as f64;
    let lp: Vec<f64> = (0..taps)
        .map(|n| {
            let k = n as f64 - m as f64;
            let sinc = if k == 0.0 {
                wc / PI
            } else {
                (wc * k).sin() / (PI * k)
            };
            let hamming = 0.54 - 0.46 * (2.0 * PI * n as f64 / (taps - 1) as f64).cos();
            sinc * hamming
        })
        .collect();
    let dc: f64 = lp.iter().sum();
    Ok(lp
        .iter()
        .enumerate()
        .map(|(n, &v)| if n == m { 1.0 - v / dc } else { -v / dc })
        .collect())
}

/// Frequency response `H(e^{j omega})` of an FIR filter.
pub fn response(taps: &[f64], omega: f64) -> Complex64 {
    taps.iter()
        .enumerate()
        .map(|(n, &h)| h * Complex64::from_polar(1.0, -omega * n as f64))
        .sum()
}

/// Mirror index into `0..len` (reflection without repeating the edge).
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let r = i.rem_euclid(period);
    if r < len as isize {
        r as usize
    } else {
        (period - r) as usize
    }
}

/// One causal pass over a reflect-padded copy, delay-compensated so the
/// output aligns with the input.
fn filter_pass(x: &[f64], taps: &[f64]) -> Vec<f64> {
    let len = x.len();
    let pad = taps.len() - 1;
    let delay = pad / 2;
    let padded: Vec<f64> = (-(pad as isize)..(len + pad) as isize)
        .map(|i| x[reflect(i, len)])
        .collect();
    (0..len)
        .map(|n| {
            let at = n + pad + delay;
            taps.iter()
                .enumerate()
                .map(|(k, &h)| h * padded[at - k])
                .sum()
        })
        .collect()
}

/// Forward then time-reversed pass: zero phase, squared magnitude response.
pub fn filtfilt(x: &[f64], taps: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let mut y = filter_pass(x, taps);
    y.reverse();
    let mut z = filter_pass(&y, taps);
    z.reverse();
    z
}

/// Applies the zero-phase high-pass to every row of `x: F x T`.
pub fn highpass_zerophase(x: &Array2<f64>, p_time: usize) -> Result<Array2<f64>> {
    let taps = design_highpass(HIGHPASS_TAPS, p_time)?;
    Ok(highpass_with(x, &taps))
}

pub fn highpass_with(x: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for (src, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
        let row = src.to_vec();
        for (d, v) in dst.iter_mut().zip(filtfilt(&row, taps)) {
            *d = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn design_is_symmetric_with_zero_dc() {
        let h = design_highpass(63, 16).unwrap();
        assert_eq!(h.len(), 63);
        for k in 0..63 {
            assert!((h[k] - h[62 - k]).abs() < 1e-15);
        }
        assert!(response(&h, 0.0).norm() < 1e-14);
        assert!((response(&h, PI).norm() - 1.0).abs() < 5e-3);
        assert!(design_highpass(62, 16).is_err());
    }

    #[test]
    fn constant_bands_are_removed() {
        let x = Array2::from_shape_fn((3, 200), |(f, _)| 1.0 + f as f64);
        let y = highpass_zerophase(&x, 16).unwrap();
        let amp = 3.0;
        assert!(
            y.iter().all(|v| v.abs() < 1e-3 * amp),
            "max {}",
            y.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        );
    }

    #[test]
    fn passband_tone_scaled_by_squared_response() {
        let p = 4;
        let h = design_highpass(63, p).unwrap();
        let w = 2.0;
        let gain = response(&h, w).norm_sqr();
        assert!((gain - 1.0).abs() < 1e-2);
        let x: Vec<f64> = (0..600).map(|n| (w * n as f64 + 0.3).sin()).collect();
        let y = filtfilt(&x, &h);
        for n in 100..500 {
            assert!((y[n] - gain * x[n]).abs() < 1e-6, "n={n}");
        }
    }

    #[test]
    fn zero_phase_probe_peaks_at_lag_zero() {
        let h = design_highpass(63, 16).unwrap();
        let x: Vec<f64> = (0..800)
            .map(|n| {
                let t = n as f64 - 400.0;
                (1.2 * t).cos() * (-(t / 60.0).powi(2)).exp()
            })
            .collect();
        let y = filtfilt(&x, &h);
        let xcorr = |lag: isize| -> f64 {
            (0..800isize)
                .filter_map(|n| {
                    let m = n + lag;
                    (0..800).contains(&m).then(|| x[n as usize] * y[m as usize])
                })
                .sum()
        };
        let best = (-20..=20)
            .max_by(|&a, &b| xcorr(a).total_cmp(&xcorr(b)))
            .unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn short_signals_are_handled() {
        let h = design_highpass(63, 16).unwrap();
        assert_eq!(filtfilt(&[2.0], &h).len(), 1);
        assert!(filtfilt(&[2.0], &h)[0].abs() < 1e-12);
        assert_eq!(filtfilt(&[1.0, 2.0, 3.0, 4.0, 5.0], &h).len(), 5);
        assert!(filtfilt(&[], &h).is_empty());
    }
}
