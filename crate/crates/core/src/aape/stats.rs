//! Per-patch distribution summaries of the estimated poles.

use ndarray::Array2;
use serde::Serialize;

use super::AapeConfig;
use crate::error::{ensure, Result};

/// Quantile levels reported per patch.
pub const LEVELS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchStats {
    pub patch: usize,
    pub f_patch: usize,
    pub t_patch: usize,
    pub alpha: [f64; 5],
    pub beta: [f64; 5],
}

/// Linear-interpolation quantile of a sorted slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn summarise(mut v: Vec<f64>) -> [f64; 5] {
    v.sort_by(f64::total_cmp);
    LEVELS.map(|q| quantile(&v, q))
}

/// Quantiles of the `H / F~` pairs owned by each patch; fields are `H x T`.
pub fn lambda_stats(
    alpha: &Array2<f64>,
    beta: &Array2<f64>,
    cfg: &AapeConfig,
) -> Result<Vec<PatchStats>> {
    ensure!(
        alpha.dim() == beta.dim(),
        Shape,
        "alpha {:?} vs beta {:?}",
        alpha.dim(),
        beta.dim()
    );
    let (h, t) = alpha.dim();
    ensure!(
        h == cfg.h && t % cfg.p_time == 0,
        Shape,
        "field {h}x{t} does not match H={} / P_time={}",
        cfg.h,
        cfg.p_time
    );
    let (fg, tp, j) = (cfg.freq_patches(), t / cfg.p_time, cfg.pairs_per_patch());
    let mut out = Vec::with_capacity(fg * tp);
    for f in 0..fg {
        for tt in 0..tp {
            let frame = tt * cfg.p_time;
            let rows = f * j..(f + 1) * j;
            out.push(PatchStats {
                patch: f * tp + tt,
                f_patch: f,
                t_patch: tt,
                alpha: summarise(rows.clone().map(|r| alpha[[r, frame]]).collect()),
                beta: summarise(rows.map(|r| beta[[r, frame]]).collect()),
            });
        }
    }
    Ok(out)
}

pub fn stats_csv(stats: &[PatchStats]) -> String {
    let mut s = String::from("patch,f_patch,t_patch,alpha_min,alpha_q25,alpha_median,alpha_q75,alpha_max,beta_min,beta_q25,beta_median,beta_q75,beta_max\n");
    for p in stats {
        let cols: Vec<String> = p
            .alpha
            .iter()
            .chain(p.beta.iter())
            .map(|v| format!("{v:.9e}"))
            .collect();
        s.push_str(&format!(
            "{},{},{},{}\n",
            p.patch,
            p.f_patch,
            p.t_patch,
            cols.join(",")
        ));
    }
    s
}
