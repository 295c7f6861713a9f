//! Multi-view inverse block masking over the patch grid.
//!
//! Each view draws one block shape uniformly from the configured set and
//! places it uniformly at random. With [`BlockRole::Visible`] the block marks
//! kept tokens and a uniform random remainder of kept tokens tops the visible
//! count up to `N - round(ratio * N)`; [`BlockRole::Masked`] swaps the roles.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockRole {
    Visible,
    Masked,
}

/// How block origins are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Block fully inside the grid.
    Clamped,
    /// Any origin, block wraps around both grid axes.
    Wrapped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub ratio: f64,
    pub views: usize,
    pub query_ratio: f64,
    /// `(freq, time)` block shapes.
    pub blocks: Vec<(usize, usize)>,
    pub block_role: BlockRole,
    pub placement: Placement,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            ratio: 0.8,
            views: 4,
            query_ratio: 0.75,
            blocks: vec![(3, 8), (4, 6), (5, 5)],
            block_role: BlockRole::Visible,
            placement: Placement::Clamped,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.ratio > 0.0 && self.ratio < 1.0,
            Invalid,
            "mask ratio must lie in (0, 1), got {}",
            self.ratio
        );
        ensure!(
            self.query_ratio > 0.0 && self.query_ratio <= 1.0,
            Invalid,
            "query ratio must lie in (0, 1]"
        );
        ensure!(self.views > 0, Invalid, "need at least one view");
        ensure!(
            !self.blocks.is_empty() && self.blocks.iter().all(|&(a, b)| a > 0 && b > 0),
            Invalid,
            "block shapes must be non-empty"
        );
        Ok(())
    }

    pub fn check_grid(&self, f_patches: usize, t_patches: usize) -> Result<()> {
        self.validate()?;
        for &(bf, bt) in &self.blocks {
            ensure!(
                bf <= f_patches && bt <= t_patches,
                Invalid,
                "block {bf}x{bt} does not fit a {f_patches}x{t_patches} grid"
            );
        }
        let n = f_patches * t_patches;
        let m = masked_count(n, self.ratio);
        ensure!(
            m > 0 && m < n,
            Invalid,
            "ratio {} leaves no masked or no visible tokens on {n} patches",
            self.ratio
        );
        Ok(())
    }
}

/// `round(ratio * n)`, nearest with ties up.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64 + 0.5).floor() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskView {
    /// `true` = masked, token order `f * T~ + t`.
    pub mask: Vec<bool>,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    /// Sorted subset of `masked` used as prediction queries.
    pub queries: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskViews {
    pub f_patches: usize,
    pub t_patches: usize,
    pub views: Vec<MaskView>,
}

fn block_cells(
    f_patches: usize,
    t_patches: usize,
    shape: (usize, usize),
    placement: Placement,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let (bf, bt) = shape;
    let (f0, t0) = match placement {
        Placement::Clamped => (
            rng.random_range(0..=f_patches - bf),
            rng.random_range(0..=t_patches - bt),
        ),
        Placement::Wrapped => (
            rng.random_range(0..f_patches),
            rng.random_range(0..t_patches),
        ),
    };
    let mut cells = Vec::with_capacity(bf * bt);
    for a in 0..bf {
        for b in 0..bt {
            cells.push(((f0 + a) % f_patches) * t_patches + (t0 + b) % t_patches);
        }
    }
    cells
}

/// One view. The caller supplies an independent generator per view.
pub fn make_view(
    f_patches: usize,
    t_patches: usize,
    cfg: &MaskConfig,
    rng: &mut impl Rng,
) -> Result<MaskView> {
    cfg.check_grid(f_patches, t_patches)?;
    let n = f_patches * t_patches;
    let n_mask = masked_count(n, cfg.ratio);
    let shape = cfg.blocks[rng.random_range(0..cfg.blocks.len())];
    let mut in_block = vec![false; n];
    for c in block_cells(f_patches, t_patches, shape, cfg.placement, rng) {
        in_block[c] = true;
    }
    let mut block: Vec<usize> = (0..n).filter(|&i| in_block[i]).collect();
    let mut rest: Vec<usize> = (0..n).filter(|&i| !in_block[i]).collect();
    // `target` tokens take the block's role; the block contributes first,
    // the rest is drawn uniformly from outside it (or trimmed from inside).
    let target = match cfg.block_role {
        BlockRole::Visible => n - n_mask,
        BlockRole::Masked => n_mask,
    };
    let mut chosen = vec![false; n];
    if block.len() >= target {
        block.shuffle(rng);
        block.iter().take(target).for_each(|&i| chosen[i] = true);
    } else {
        block.iter().for_each(|&i| chosen[i] = true);
        rest.shuffle(rng);
        rest.iter()
            .take(target - block.len())
            .for_each(|&i| chosen[i] = true);
    }
    let mask: Vec<bool> = match cfg.block_role {
        BlockRole::Visible => chosen.iter().map(|&c| !c).collect(),
        BlockRole::Masked => chosen,
    };
    let visible: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
    let masked: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let n_query = masked_count(masked.len(), cfg.query_ratio).max(1);
    let mut queries: Vec<usize> = rand::seq::index::sample(rng, masked.len(), n_query)
        .into_iter()
        .map(|k| masked[k])
        .collect();
    queries.sort_unstable();
    Ok(MaskView {
        mask,
        visible,
        masked,
        queries,
    })
}

/// `cfg.views` independent views; `rng_for(view)` yields each view's generator.
pub fn make_masks<R: Rng>(
    f_patches: usize,
    t_patches: usize,
    cfg: &MaskConfig,
    mut rng_for: impl FnMut(usize) -> R,
) -> Result<MaskViews> {
    cfg.check_grid(f_patches, t_patches)?;
    let views = (0..cfg.views)
        .map(|v| make_view(f_patches, t_patches, cfg, &mut rng_for(v)))
        .collect::<Result<_>>()?;
    Ok(MaskViews {
        f_patches,
        t_patches,
        views,
    })
}

/// Exact per-position probability of being masked, averaged over block
/// shapes and placements.
pub fn expected_mask_frequency(
    f_patches: usize,
    t_patches: usize,
    cfg: &MaskConfig,
) -> Result<Array2<f64>> {
    cfg.check_grid(f_patches, t_patches)?;
    let n = f_patches * t_patches;
    let n_mask = masked_count(n, cfg.ratio);
    let target = match cfg.block_role {
        BlockRole::Visible => n - n_mask,
        BlockRole::Masked => n_mask,
    };
    let mut freq = Array2::<f64>::zeros((f_patches, t_patches));
    let per_shape = 1.0 / cfg.blocks.len() as f64;
    for &(bf, bt) in &cfg.blocks {
        let origins: Vec<(usize, usize)> = match cfg.placement {
            Placement::Clamped => (0..=f_patches - bf)
                .flat_map(|a| (0..=t_patches - bt).map(move |b| (a, b)))
                .collect(),
            Placement::Wrapped => (0..f_patches)
                .flat_map(|a| (0..t_patches).map(move |b| (a, b)))
                .collect(),
        };
        let w = per_shape / origins.len() as f64;
        let size = bf * bt;
        // probability that a token takes the block's role, inside and outside
        let (p_in, p_out) = if size >= target {
            (target as f64 / size as f64, 0.0)
        } else {
            (1.0, (target - size) as f64 / (n - size) as f64)
        };
        for (f0, t0) in origins {
            let mut inside = vec![false; n];
            for a in 0..bf {
                for b in 0..bt {
                    inside[((f0 + a) % f_patches) * t_patches + (t0 + b) % t_patches] = true;
                }
            }
            for (i, &ins) in inside.iter().enumerate() {
                let role = if ins { p_in } else { p_out };
                let p_mask = match cfg.block_role {
                    BlockRole::Visible => 1.0 - role,
                    BlockRole::Masked => role,
                };
                freq[[i / t_patches, i % t_patches]] += w * p_mask;
            }
        }
    }
    Ok(freq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rngs(seed: u64) -> impl FnMut(usize) -> ChaCha8Rng {
        move |v| crate::rng::keyed(seed, 0, crate::rng::Lane::Mask, v as u64)
    }

    #[test]
    fn exact_counts_on_full_grid() {
        assert_eq!(masked_count(304, 0.8), 243);
        assert_eq!(masked_count(243, 0.75), 182);
        assert_eq!(masked_count(5, 0.5), 3);
        for role in [BlockRole::Visible, BlockRole::Masked] {
            let cfg = MaskConfig {
                block_role: role,
                ..Default::default()
            };
            let mv = make_masks(8, 38, &cfg, rngs(1)).unwrap();
            assert_eq!(mv.views.len(), 4);
            for v in &mv.views {
                assert_eq!(v.masked.len(), 243);
                assert_eq!(v.visible.len(), 61);
                assert_eq!(v.queries.len(), 182);
                assert!(v.queries.iter().all(|q| v.mask[*q]));
            }
            assert_ne!(mv.views[0].mask, mv.views[1].mask);
        }
    }

    #[test]
    fn visible_block_is_kept() {
        let cfg = MaskConfig {
            blocks: vec![(3, 8)],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = make_view(8, 38, &cfg, &mut rng).unwrap();
        // some 3x8 rectangle is entirely visible
        let found = (0..=5).any(|f0| {
            (0..=30).any(|t0| (0..3).all(|a| (0..8).all(|b| !v.mask[(f0 + a) * 38 + t0 + b])))
        });
        assert!(found);
    }

    #[test]
    fn validation() {
        let cfg = MaskConfig {
            ratio: 1.0,
            ..Default::default()
        };
        assert!(make_masks(8, 38, &cfg, rngs(0)).is_err());
        let cfg = MaskConfig {
            ratio: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(make_masks(4, 38, &MaskConfig::default(), rngs(0)).is_err());
        assert!(make_masks(8, 7, &MaskConfig::default(), rngs(0)).is_err());
    }

    #[test]
    fn expected_frequency_sums_to_masked_count() {
        for placement in [Placement::Clamped, Placement::Wrapped] {
            for role in [BlockRole::Visible, BlockRole::Masked] {
                let cfg = MaskConfig {
                    placement,
                    block_role: role,
                    ..Default::default()
                };
                let f = expected_mask_frequency(8, 38, &cfg).unwrap();
                assert!((f.sum() - 243.0).abs() < 1e-9);
            }
        }
        let cfg = MaskConfig {
            placement: Placement::Wrapped,
            ..Default::default()
        };
        let f = expected_mask_frequency(8, 38, &cfg).unwrap();
        assert!(f.iter().all(|&p| (p - 243.0 / 304.0).abs() < 1e-12));
    }
}
