//! Synthetic log-mel-like spectrograms.
//!
//! Each item mixes a few sources rendered straight into band energies:
//! amplitude-modulated tones, frequency-modulated tones, chirps and band
//! noise. Modulation rates reach 0.45 cycles/frame, well above the
//! post-patching Nyquist for any patch width of 2 or more, so the aliasing
//! branch has something to resolve.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rng::{keyed, Lane};

fn bump(bin: f64, center: f64, width: f64) -> f64 {
    (-0.5 * ((bin - center) / width).powi(2)).exp()
}

/// Item `index` of the corpus addressed by `seed`; standardised to zero
/// mean and unit variance.
pub fn synth_spectrogram(f: usize, t: usize, seed: u64, index: u64) -> Array2<f64> {
    let mut rng = keyed(seed, 0, Lane::Data, index);
    let mut energy = Array2::<f64>::from_elem((f, t), 1e-3);
    let fmax = f as f64;
    let sources = rng.random_range(2..=4);
    let white = Normal::new(0.0, 1.0).expect("unit normal");
    for _ in 0..sources {
        let kind = rng.random_range(0..4);
        let gain = rng.random_range(0.3..1.0);
        let width = rng.random_range(0.6..2.5);
        let rate = rng.random_range(0.02..0.45);
        let phase = rng.random_range(0.0..2.0 * PI);
        let c0 = rng.random_range(0.0..fmax);
        let depth = rng.random_range(0.3..1.0);
        match kind {
            0 => {
                for n in 0..t {
                    let env = 1.0 + depth * (2.0 * PI * rate * n as f64 + phase).sin();
                    for b in 0..f {
                        energy[[b, n]] += gain * env * bump(b as f64, c0, width);
                    }
                }
            }
            1 => {
                let dev = rng.random_range(1.0..fmax / 4.0);
                for n in 0..t {
                    let c = c0 + dev * (2.0 * PI * rate * n as f64 + phase).sin();
                    for b in 0..f {
                        energy[[b, n]] += gain * bump(b as f64, c, width);
                    }
                }
            }
            2 => {
                let slope = rng.random_range(-1.0..1.0) * fmax / t as f64;
                let burst = rng.random_range(2..8);
                for n in 0..t {
                    let on = f64::from(u8::from((n / burst) % 2 == 0));
                    let c = (c0 + slope * n as f64).rem_euclid(fmax);
                    for b in 0..f {
                        energy[[b, n]] += gain * on * bump(b as f64, c, width);
                    }
                }
            }
            _ => {
                let bw = width * 3.0;
                for n in 0..t {
                    for b in 0..f {
                        let v: f64 = white.sample(&mut rng);
                        energy[[b, n]] += gain * v * v * bump(b as f64, c0, bw);
                    }
                }
            }
        }
    }
    let mut x = energy.mapv(f64::ln);
    let mean = x.mean().unwrap_or(0.0);
    let std = x
        .mapv(|v| (v - mean).powi(2))
        .mean()
        .unwrap_or(0.0)
        .sqrt()
        .max(1e-12);
    x.mapv_inplace(|v| (v - mean) / std);
    x
}

/// Items `0..n` of the corpus.
pub fn synth_batch(n: usize, f: usize, t: usize, seed: u64) -> Vec<Array2<f64>> {
    (0..n as u64)
        .map(|i| synth_spectrogram(f, t, seed, i))
        .collect()
}

/// Fraction of per-band temporal energy above `cutoff` cycles/frame after
/// removing each band's mean.
pub fn energy_above(x: &Array2<f64>, cutoff: f64) -> f64 {
    let t = x.ncols();
    let mut hi = 0.0;
    let mut total = 0.0;
    for row in x.rows() {
        let mean = row.mean().unwrap_or(0.0);
        for k in 1..=t / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &v) in row.iter().enumerate() {
                let a = -2.0 * PI * (k * n) as f64 / t as f64;
                re += (v - mean) * a.cos();
                im += (v - mean) * a.sin();
            }
            let p = re * re + im * im;
            total += p;
            if k as f64 / t as f64 > cutoff {
                hi += p;
            }
        }
    }
    if total > 0.0 {
        hi / total
    } else {
        0.0
    }
}
