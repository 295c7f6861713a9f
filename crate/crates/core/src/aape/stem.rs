//! Patch embedding with an aliasing-aware branch.
//!
//! ```text
//! X_mel --patchify--> X_spec ----------------------------+
//!   |                   | (+pos)                         |
//!   |                   v                                v
//!   |             Lambda Encoder --> (alpha, beta)  Patch Fusion --> tokens
//!   v                                   |                ^
//! high-pass --> B (grouped) --> adaptive conv --> C (grouped)
//!               --> GroupNorm --> time patch conv --> X_alias
//! ```

use ndarray::{Array2, Array3};
use rand::Rng;

use super::highpass::{design_highpass, highpass_with, HIGHPASS_TAPS};
use super::posembed::PositionalTable;
use super::AapeConfig;
use crate::autodiff::nn::{self, TransformerBlockParams};
use crate::autodiff::{Binder, Graph, ParamSet, Var};
use crate::error::{ensure, Result};
use crate::sblu::{bound_alpha, bound_beta, Bounds, SbluConfig};

/// Graph handles produced by one stem evaluation. Token matrices are
/// `tokens x width` in token order `f * T~ + t`.
#[derive(Debug, Clone, Copy)]
pub struct StemOutput {
    pub fused: Var,
    pub spec: Var,
    pub alias: Var,
    /// `H x T` decay field.
    pub alpha: Var,
    /// `H x T` frequency field.
    pub beta: Var,
    /// `C x T` output of the grouped `C` map, before GroupNorm.
    pub pre_norm: Var,
    pub f_patches: usize,
    pub t_patches: usize,
}

#[derive(Debug, Clone)]
pub struct Stem {
    pub cfg: AapeConfig,
    pub sblu: SbluConfig,
    pub bounds: Bounds,
    pub pos: PositionalTable,
    lambda_blocks: Vec<TransformerBlockParams>,
    hp_taps: Vec<f64>,
}

/// Non-overlapping `P_freq x P_time` patches flattened row-major, one row per token.
pub fn patches(x: &Array2<f64>, p_freq: usize, p_time: usize) -> Result<Array2<f64>> {
    let (f, t) = x.dim();
    ensure!(
        f % p_freq == 0 && t % p_time == 0,
        Shape,
        "input {f}x{t} not divisible into {p_freq}x{p_time} patches"
    );
    let (fp, tp) = (f / p_freq, t / p_time);
    Ok(Array2::from_shape_fn(
        (fp * tp, p_freq * p_time),
        |(n, k)| {
            let (fi, ti) = (n / tp, n % tp);
            let (a, b) = (k / p_time, k % p_time);
            x[[fi * p_freq + a, ti * p_time + b]]
        },
    ))
}

/// Reshapes `tokens x D` into the `D x F~ x T~` grid.
pub fn tokens_to_grid(
    tokens: &Array2<f64>,
    f_patches: usize,
    t_patches: usize,
) -> Result<Array3<f64>> {
    let (n, d) = tokens.dim();
    ensure!(
        n == f_patches * t_patches,
        Shape,
        "{n} tokens for a {f_patches}x{t_patches} grid"
    );
    Ok(Array3::from_shape_fn(
        (d, f_patches, t_patches),
        |(c, f, t)| tokens[[f * t_patches + t, c]],
    ))
}

impl Stem {
    pub fn new(cfg: &AapeConfig) -> Result<Self> {
        cfg.validate()?;
        let sblu = cfg.sblu();
        let lambda_blocks = (0..cfg.lambda_depth)
            .map(|l| {
                TransformerBlockParams::new(
                    format!("stem.lambda.block{l}"),
                    cfg.lambda_width(),
                    cfg.lambda_heads,
                    cfg.mlp_ratio,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Stem {
            cfg: cfg.clone(),
            bounds: sblu.bounds()?,
            sblu,
            pos: PositionalTable::new(cfg.d, cfg.freq_patches(), cfg.time_patches())?,
            lambda_blocks,
            hp_taps: design_highpass(HIGHPASS_TAPS, cfg.p_time)?,
        })
    }

    /// Registers every stem parameter under the `stem.` prefix.
    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        let c = &self.cfg;
        let fg = c.freq_patches();
        ps.xavier("stem.patch.w", c.p_freq * c.p_time, c.d, rng);
        ps.zeros("stem.patch.b", (1, c.d));
        if c.adaptive {
            let lw = c.lambda_width();
            ps.xavier("stem.lambda.in.w", c.d, lw, rng);
            ps.zeros("stem.lambda.in.b", (1, lw));
            for blk in &self.lambda_blocks {
                blk.init(ps, rng);
            }
            ps.xavier("stem.lambda.out.w", lw, 2 * c.pairs_per_patch(), rng);
            ps.zeros("stem.lambda.out.b", (1, 2 * c.pairs_per_patch()));
        } else {
            ps.zeros("stem.static.alpha", (c.h, 1));
            ps.zeros("stem.static.beta", (c.h, 1));
        }
        ps.normal(
            "stem.sblu.b",
            (c.h, c.f / fg),
            1.0 / ((c.f / fg) as f64).sqrt(),
            rng,
        );
        ps.normal(
            "stem.sblu.c",
            (c.c, c.h / fg),
            1.0 / ((c.h / fg) as f64).sqrt(),
            rng,
        );
        ps.ones("stem.gn.g", (c.c, 1));
        ps.zeros("stem.gn.b", (c.c, 1));
        ps.normal(
            "stem.tconv.w",
            (c.c, c.p_time),
            1.0 / (c.p_time as f64).sqrt(),
            rng,
        );
        ps.zeros("stem.tconv.b", (c.c, 1));
        ps.xavier("stem.fusion.w", c.d + c.alias_width(), c.d, rng);
        ps.zeros("stem.fusion.b", (1, c.d));
    }

    /// `(alpha, beta)` substituted for patches the encoder did not see: the
    /// bounded images of a zero raw output.
    pub fn fill_values(&self) -> (f64, f64) {
        (
            bound_alpha(0.0, &self.bounds),
            bound_beta(0.0, &self.bounds),
        )
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<(usize, usize)> {
        let (f, t) = x.dim();
        ensure!(
            f == self.cfg.f,
            Shape,
            "input has {f} bands, config expects {}",
            self.cfg.f
        );
        ensure!(
            t > 0 && t % self.cfg.p_time == 0,
            Shape,
            "T={t} not divisible by P_time={}",
            self.cfg.p_time
        );
        Ok((self.cfg.freq_patches(), t / self.cfg.p_time))
    }

    /// Positional table for `t_patches` time patches.
    pub fn positional(&self, t_patches: usize) -> Result<Array2<f64>> {
        self.pos.for_length(t_patches)
    }

    /// Standard patch tokens, `N x D`.
    pub fn patchify_standard(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        x: &Array2<f64>,
    ) -> Result<Var> {
        self.check_input(x)?;
        let p = g.constant(patches(x, self.cfg.p_freq, self.cfg.p_time)?);
        let (w, bias) = (b.get(g, "stem.patch.w"), b.get(g, "stem.patch.b"));
        nn::dense(g, p, w, Some(bias))
    }

    /// Bounded `(alpha, beta)` fields, each `H x T`. With `visible` set, the
    /// encoder sees only those tokens and every other patch takes
    /// [`Stem::fill_values`].
    pub fn lambda_encode(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        spec: Var,
        t_patches: usize,
        visible: Option<&[usize]>,
    ) -> Result<(Var, Var)> {
        let c = &self.cfg;
        let (fg, j) = (c.freq_patches(), c.pairs_per_patch());
        let n = fg * t_patches;
        let frames = t_patches * c.p_time;
        ensure!(
            g.value(spec).dim() == (n, c.d),
            Shape,
            "lambda_encode: tokens {:?}, expected ({n}, {})",
            g.value(spec).dim(),
            c.d
        );
        if !c.adaptive {
            return self.static_field(g, b, frames);
        }
        let mut slot = vec![usize::MAX; n];
        let rows: Vec<usize> = match visible {
            Some(v) => {
                ensure!(!v.is_empty(), Invalid, "lambda_encode: empty visible set");
                ensure!(
                    v.windows(2).all(|w| w[0] < w[1]) && v[v.len() - 1] < n,
                    Invalid,
                    "visible indices must be sorted, unique and < {n}"
                );
                v.to_vec()
            }
            None => (0..n).collect(),
        };
        for (r, &tok) in rows.iter().enumerate() {
            slot[tok] = r;
        }
        let pos = g.constant(self.positional(t_patches)?);
        let tokens = g.add(spec, pos);
        let tokens = if rows.len() == n {
            tokens
        } else {
            g.gather_rows(tokens, &rows)
        };
        let (wi, bi) = (b.get(g, "stem.lambda.in.w"), b.get(g, "stem.lambda.in.b"));
        let mut h = nn::dense(g, tokens, wi, Some(bi))?;
        for blk in &self.lambda_blocks {
            h = blk.forward(g, b, h)?;
        }
        let (wo, bo) = (b.get(g, "stem.lambda.out.w"), b.get(g, "stem.lambda.out.b"));
        let raw = nn::dense(g, h, wo, Some(bo))?;
        let raw_a = g.slice_cols(raw, 0, j);
        let raw_b = g.slice_cols(raw, j, 2 * j);
        let (alpha, beta) = self.bound(g, raw_a, raw_b);
        let (fill_a, fill_b) = self.fill_values();
        let nv = rows.len();
        let (alpha, beta) = if nv < n {
            let fa = g.constant(Array2::from_elem((1, j), fill_a));
            let fb = g.constant(Array2::from_elem((1, j), fill_b));
            (g.concat_rows(&[alpha, fa]), g.concat_rows(&[beta, fb]))
        } else {
            (alpha, beta)
        };
        let idx: Vec<usize> = (0..c.h * frames)
            .map(|k| {
                let (hh, t) = (k / frames, k % frames);
                let tok = (hh / j) * t_patches + t / c.p_time;
                let row = if slot[tok] == usize::MAX {
                    nv
                } else {
                    slot[tok]
                };
                row * j + hh % j
            })
            .collect();
        Ok((
            g.gather_flat(alpha, (c.h, frames), &idx),
            g.gather_flat(beta, (c.h, frames), &idx),
        ))
    }

    fn bound(&self, g: &mut Graph, raw_a: Var, raw_b: Var) -> (Var, Var) {
        let bd = &self.bounds;
        let a = g.softplus(raw_a);
        let a = g.add_scalar(a, bd.alpha_min);
        let s = g.sigmoid(raw_b);
        let s = g.scale(s, bd.beta_max - bd.beta_min);
        (a, g.add_scalar(s, bd.beta_min))
    }

    fn static_field(&self, g: &mut Graph, b: &mut Binder<'_>, frames: usize) -> Result<(Var, Var)> {
        let h = self.cfg.h;
        let ra = b.get(g, "stem.static.alpha");
        let rb = b.get(g, "stem.static.beta");
        let (a, be) = self.bound(g, ra, rb);
        let idx: Vec<usize> = (0..h * frames).map(|k| k / frames).collect();
        Ok((
            g.gather_flat(a, (h, frames), &idx),
            g.gather_flat(be, (h, frames), &idx),
        ))
    }

    /// Alias tokens `N x C~` from the high-passed input and the pole field.
    pub fn adaptive_sblu(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        x_hp: &Array2<f64>,
        alpha: Var,
        beta: Var,
    ) -> Result<(Var, Var)> {
        let c = &self.cfg;
        let (_, t_patches) = self.check_input(x_hp)?;
        let fg = c.freq_patches();
        let x = g.constant(x_hp.clone());
        let bw = b.get(g, "stem.sblu.b");
        let v = nn::grouped_pointwise(g, x, bw, fg)?;
        let m = nn::adaptive_conv(g, v, alpha, beta, &self.sblu)?;
        let cw = b.get(g, "stem.sblu.c");
        let u = nn::grouped_pointwise(g, m, cw, fg)?;
        let (gg, gb) = (b.get(g, "stem.gn.g"), b.get(g, "stem.gn.b"));
        let normed = nn::group_norm(g, u, fg, gg, gb)?;
        let tw = b.get(g, "stem.tconv.w");
        let tc = g.depthwise_patch(normed, tw);
        let tb = b.get(g, "stem.tconv.b");
        let tc = g.add_col(tc, tb);
        let cw_ = c.alias_width();
        let idx: Vec<usize> = (0..fg * t_patches * cw_)
            .map(|k| {
                let (tok, ch) = (k / cw_, k % cw_);
                let (f, t) = (tok / t_patches, tok % t_patches);
                (f * cw_ + ch) * t_patches + t
            })
            .collect();
        Ok((g.gather_flat(tc, (fg * t_patches, cw_), &idx), u))
    }

    /// Independently normalised grids, concatenated and projected to `D`.
    pub fn patch_fusion(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        spec: Var,
        alias: Var,
    ) -> Result<Var> {
        let (sd, ad) = (g.value(spec).dim(), g.value(alias).dim());
        ensure!(
            sd.0 == ad.0,
            Shape,
            "fusion grids differ: {} vs {} tokens",
            sd.0,
            ad.0
        );
        let s = nn::layer_norm_free(g, spec);
        let a = nn::layer_norm_free(g, alias);
        let cat = g.concat_cols(&[s, a]);
        let (w, bias) = (b.get(g, "stem.fusion.w"), b.get(g, "stem.fusion.b"));
        nn::dense(g, cat, w, Some(bias))
    }

    pub fn highpass(&self, x: &Array2<f64>) -> Array2<f64> {
        highpass_with(x, &self.hp_taps)
    }

    /// Full stem on `x: F x T`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        x: &Array2<f64>,
        visible: Option<&[usize]>,
    ) -> Result<StemOutput> {
        let (f_patches, t_patches) = self.check_input(x)?;
        let spec = self.patchify_standard(g, b, x)?;
        let (alpha, beta) = self.lambda_encode(g, b, spec, t_patches, visible)?;
        let hp = self.highpass(x);
        let (alias, pre_norm) = self.adaptive_sblu(g, b, &hp, alpha, beta)?;
        let fused = self.patch_fusion(g, b, spec, alias)?;
        Ok(StemOutput {
            fused,
            spec,
            alias,
            alpha,
            beta,
            pre_norm,
            f_patches,
            t_patches,
        })
    }
}
