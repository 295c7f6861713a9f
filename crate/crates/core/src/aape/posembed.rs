//! Fixed 2-D sin-cos positional embedding over the patch grid.
//!
//! The first half of each vector encodes the frequency-patch index, the
//! second half the time-patch index; each half is a 1-D sin-cos code with
//! frequencies `10000^(-i / (dim/4))`.

use ndarray::{s, Array2};

use crate::error::{ensure, Result};

/// `positions x dim` sin-cos code, sines in the first half.
pub fn sincos_1d(dim: usize, positions: &[f64]) -> Array2<f64> {
    let half = dim / 2;
    Array2::from_shape_fn((positions.len(), dim), |(p, k)| {
        let i = k % half;
        let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
        let arg = positions[p] * omega;
        if k < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// `(F~ T~) x dim` table in token order `f * T~ + t`.
pub fn sincos_2d(dim: usize, f_patches: usize, t_patches: usize) -> Result<Array2<f64>> {
    ensure!(
        dim.is_multiple_of(4) && dim > 0,
        Invalid,
        "2-D sin-cos embedding needs dim divisible by 4, got {dim}"
    );
    let fpos: Vec<f64> = (0..f_patches).map(|f| f as f64).collect();
    let tpos: Vec<f64> = (0..t_patches).map(|t| t as f64).collect();
    let ef = sincos_1d(dim / 2, &fpos);
    let et = sincos_1d(dim / 2, &tpos);
    let mut table = Array2::zeros((f_patches * t_patches, dim));
    for f in 0..f_patches {
        for t in 0..t_patches {
            let n = f * t_patches + t;
            table.slice_mut(s![n, ..dim / 2]).assign(&ef.row(f));
            table.slice_mut(s![n, dim / 2..]).assign(&et.row(t));
        }
    }
    Ok(table)
}

/// Reference table plus time-axis resampling to other lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalTable {
    pub dim: usize,
    pub f_patches: usize,
    pub t_patches: usize,
    pub table: Array2<f64>,
}

impl PositionalTable {
    pub fn new(dim: usize, f_patches: usize, t_patches: usize) -> Result<Self> {
        Ok(PositionalTable {
            dim,
            f_patches,
            t_patches,
            table: sincos_2d(dim, f_patches, t_patches)?,
        })
    }

    /// Table for `t_new` time patches. Equal lengths return the table; other
    /// lengths interpolate linearly along time with both endpoints aligned,
    /// leaving the frequency axis untouched.
    pub fn for_length(&self, t_new: usize) -> Result<Array2<f64>> {
        ensure!(t_new > 0, Invalid, "zero time patches");
        if t_new == self.t_patches {
            return Ok(self.table.clone());
        }
        let t_old = self.t_patches;
        let mut out = Array2::zeros((self.f_patches * t_new, self.dim));
        for t in 0..t_new {
            let pos = if t_new == 1 || t_old == 1 {
                0.0
            } else {
                t as f64 * (t_old - 1) as f64 / (t_new - 1) as f64
            };
            let lo = (pos.floor() as usize).min(t_old - 1);
            let hi = (lo + 1).min(t_old - 1);
            let w = pos - lo as f64;
            for f in 0..self.f_patches {
                let a = self.table.row(f * t_old + lo);
                let b = self.table.row(f * t_old + hi);
                let mut dst = out.row_mut(f * t_new + t);
                dst.assign(&(&a * (1.0 - w) + &b * w));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_length_is_the_table() {
        let p = PositionalTable::new(48, 8, 16).unwrap();
        assert_eq!(p.for_length(16).unwrap(), p.table);
        assert!(PositionalTable::new(50, 8, 16).is_err());
    }

    #[test]
    fn upsampled_table_hits_original_at_even_indices() {
        let p = PositionalTable::new(64, 8, 38).unwrap();
        let up = p.for_length(2 * 38 - 1).unwrap();
        for f in 0..8 {
            for t in 0..38 {
                let a = up.row(f * 75 + 2 * t);
                let b = p.table.row(f * 38 + t);
                assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-10));
            }
        }
    }

    #[test]
    fn interpolation_keeps_frequency_half_fixed() {
        let p = PositionalTable::new(32, 4, 10).unwrap();
        let q = p.for_length(23).unwrap();
        for f in 0..4 {
            for t in 0..23 {
                let a = q.slice(s![f * 23 + t, ..16]);
                let b = p.table.slice(s![f * 10, ..16]);
                assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn all_positions_distinct() {
        let p = PositionalTable::new(768, 8, 38).unwrap();
        let n = p.table.nrows();
        for i in 0..n {
            for j in i + 1..n {
                let d: f64 = p
                    .table
                    .row(i)
                    .iter()
                    .zip(p.table.row(j).iter())
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                assert!(d > 1e-6, "rows {i} and {j} coincide");
            }
        }
    }
}
