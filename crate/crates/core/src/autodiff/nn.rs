//! Layers assembled from graph primitives.
//!
//! Token matrices are `tokens x width`. Channel-major signals used by the
//! stem are `channels x frames`.

use ndarray::Array2;
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{Binder, ParamSet};
use crate::adaptive_conv::{self, AdaptiveConvInput};
use crate::error::{ensure, Result};
use crate::sblu::SbluConfig;

/// `x W + b` with `x: n x in`, `W: in x out`, `b: 1 x out`.
pub fn dense(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let (xd, wd) = (g.value(x).dim(), g.value(w).dim());
    ensure!(
        xd.1 == wd.0,
        Shape,
        "dense: input {:?} vs weight {:?}",
        xd,
        wd
    );
    if let Some(b) = b {
        let bd = g.value(b).dim();
        ensure!(
            bd == (1, wd.1),
            Shape,
            "dense: bias {:?} for weight {:?}",
            bd,
            wd
        );
    }
    let y = g.matmul(x, w);
    Ok(match b {
        Some(b) => g.add_row(y, b),
        None => y,
    })
}

/// Block-diagonal channel map. `x` is `in x T`, `w` stacks the per-group
/// blocks as `out x (in / groups)`; group `k` maps input rows
/// `k*in/groups..` to output rows `k*out/groups..`.
pub fn grouped_pointwise(g: &mut Graph, x: Var, w: Var, groups: usize) -> Result<Var> {
    let (cin, _) = g.value(x).dim();
    let (cout, blk) = g.value(w).dim();
    ensure!(groups > 0, Invalid, "grouped_pointwise: zero groups");
    ensure!(
        cin % groups == 0 && cout % groups == 0,
        Shape,
        "channels {cin} -> {cout} not divisible by {groups} groups"
    );
    ensure!(
        blk == cin / groups,
        Shape,
        "grouped weight has {blk} inputs per group, expected {}",
        cin / groups
    );
    if groups == 1 {
        return Ok(g.matmul(w, x));
    }
    let (ig, og) = (cin / groups, cout / groups);
    let parts: Vec<Var> = (0..groups)
        .map(|k| {
            let wk = g.slice_rows(w, k * og, (k + 1) * og);
            let xk = g.slice_rows(x, k * ig, (k + 1) * ig);
            g.matmul(wk, xk)
        })
        .collect();
    Ok(g.concat_rows(&parts))
}

/// Dense equivalent of a stacked grouped weight.
pub fn block_diagonal(w: &Array2<f64>, groups: usize) -> Array2<f64> {
    let (cout, blk) = w.dim();
    let og = cout / groups;
    let mut full = Array2::zeros((cout, blk * groups));
    for k in 0..groups {
        full.slice_mut(ndarray::s![k * og..(k + 1) * og, k * blk..(k + 1) * blk])
            .assign(&w.slice(ndarray::s![k * og..(k + 1) * og, ..]));
    }
    full
}

/// Affine-free per-row normalisation.
pub fn layer_norm_free(g: &mut Graph, x: Var) -> Var {
    g.layer_norm_rows(x)
}

/// Per-token, per-sample normalisation over the embedding axis; the same
/// computation as [`layer_norm_free`] on `tokens x D`.
pub fn instance_norm_token(g: &mut Graph, x: Var) -> Var {
    g.layer_norm_rows(x)
}

/// Layer normalisation with a learnable `1 x width` scale and shift.
pub fn layer_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Var {
    let y = g.layer_norm_rows(x);
    let y = g.mul_row(y, gamma);
    g.add_row(y, beta)
}

/// Normalises each of `groups` contiguous channel blocks of `x: C x T` over
/// all its entries, then applies a per-channel affine (`gamma`, `beta`: `C x 1`).
pub fn group_norm(g: &mut Graph, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
    let (c, t) = g.value(x).dim();
    ensure!(
        groups > 0 && c % groups == 0,
        Shape,
        "group_norm: {c} channels in {groups} groups"
    );
    ensure!(
        g.value(gamma).dim() == (c, 1) && g.value(beta).dim() == (c, 1),
        Shape,
        "group_norm affine must be {c} x 1"
    );
    let r = g.reshape(x, groups, (c / groups) * t);
    let n = g.layer_norm_rows(r);
    let y = g.reshape(n, c, t);
    let y = g.mul_col(y, gamma);
    Ok(g.add_col(y, beta))
}

/// Multi-head attention weights under a common prefix.
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub prefix: String,
    pub width: usize,
    pub heads: usize,
}

impl AttentionSpec {
    fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        for n in ["q", "k", "v", "o"] {
            ps.xavier(
                format!("{}.{n}.w", self.prefix),
                self.width,
                self.width,
                rng,
            );
            ps.zeros(format!("{}.{n}.b", self.prefix), (1, self.width));
        }
    }

    fn forward(&self, g: &mut Graph, b: &mut Binder<'_>, q_src: Var, kv_src: Var) -> Result<Var> {
        let p = &self.prefix;
        let mut proj = |g: &mut Graph, src: Var, n: &str| -> Result<Var> {
            let w = b.get(g, &format!("{p}.{n}.w"));
            let bias = b.get(g, &format!("{p}.{n}.b"));
            dense(g, src, w, Some(bias))
        };
        let q = proj(g, q_src, "q")?;
        let k = proj(g, kv_src, "k")?;
        let v = proj(g, kv_src, "v")?;
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var> = (0..self.heads)
            .map(|h| {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let qh = g.slice_cols(q, lo, hi);
                let kh = g.slice_cols(k, lo, hi);
                let vh = g.slice_cols(v, lo, hi);
                let kt = g.transpose(kh);
                let s = g.matmul(qh, kt);
                let s = g.scale(s, scale);
                let a = g.softmax_rows(s);
                g.matmul(a, vh)
            })
            .collect();
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        proj(g, cat, "o")
    }
}

fn init_ln(ps: &mut ParamSet, name: &str, width: usize) {
    ps.ones(format!("{name}.g"), (1, width));
    ps.zeros(format!("{name}.b"), (1, width));
}

fn apply_ln(g: &mut Graph, b: &mut Binder<'_>, name: &str, x: Var) -> Var {
    let gamma = b.get(g, &format!("{name}.g"));
    let beta = b.get(g, &format!("{name}.b"));
    layer_norm(g, x, gamma, beta)
}

fn mlp(g: &mut Graph, b: &mut Binder<'_>, prefix: &str, x: Var) -> Result<Var> {
    let (w1, b1) = (
        b.get(g, &format!("{prefix}.fc1.w")),
        b.get(g, &format!("{prefix}.fc1.b")),
    );
    let h = dense(g, x, w1, Some(b1))?;
    let h = g.gelu(h);
    let (w2, b2) = (
        b.get(g, &format!("{prefix}.fc2.w")),
        b.get(g, &format!("{prefix}.fc2.b")),
    );
    dense(g, h, w2, Some(b2))
}

fn init_mlp(ps: &mut ParamSet, prefix: &str, width: usize, hidden: usize, rng: &mut impl Rng) {
    ps.xavier(format!("{prefix}.fc1.w"), width, hidden, rng);
    ps.zeros(format!("{prefix}.fc1.b"), (1, hidden));
    ps.xavier(format!("{prefix}.fc2.w"), hidden, width, rng);
    ps.zeros(format!("{prefix}.fc2.b"), (1, width));
}

/// Pre-norm ViT block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlockParams {
    pub prefix: String,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl TransformerBlockParams {
    pub fn new(
        prefix: impl Into<String>,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        ensure!(
            heads > 0 && width.is_multiple_of(heads),
            Invalid,
            "width {width} not divisible by {heads} heads"
        );
        Ok(TransformerBlockParams {
            prefix: prefix.into(),
            width,
            heads,
            mlp_hidden: width * mlp_ratio,
        })
    }

    fn attention(&self) -> AttentionSpec {
        AttentionSpec {
            prefix: format!("{}.attn", self.prefix),
            width: self.width,
            heads: self.heads,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        init_ln(ps, &format!("{}.ln1", self.prefix), self.width);
        self.attention().init(ps, rng);
        init_ln(ps, &format!("{}.ln2", self.prefix), self.width);
        init_mlp(
            ps,
            &format!("{}.mlp", self.prefix),
            self.width,
            self.mlp_hidden,
            rng,
        );
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder<'_>, x: Var) -> Result<Var> {
        let d = g.value(x).dim();
        ensure!(
            d.1 == self.width && d.0 > 0,
            Shape,
            "transformer block {}: input {:?}, width {}",
            self.prefix,
            d,
            self.width
        );
        let p = &self.prefix;
        let h = apply_ln(g, b, &format!("{p}.ln1"), x);
        let a = self.attention().forward(g, b, h, h)?;
        let x = g.add(x, a);
        let h = apply_ln(g, b, &format!("{p}.ln2"), x);
        let m = mlp(g, b, &format!("{p}.mlp"), h)?;
        Ok(g.add(x, m))
    }
}

/// Pre-norm cross-attention block: queries attend to the context only.
#[derive(Debug, Clone)]
pub struct CrossAttentionBlockParams {
    pub prefix: String,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl CrossAttentionBlockParams {
    pub fn new(
        prefix: impl Into<String>,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        ensure!(
            heads > 0 && width.is_multiple_of(heads),
            Invalid,
            "width {width} not divisible by {heads} heads"
        );
        Ok(CrossAttentionBlockParams {
            prefix: prefix.into(),
            width,
            heads,
            mlp_hidden: width * mlp_ratio,
        })
    }

    fn attention(&self) -> AttentionSpec {
        AttentionSpec {
            prefix: format!("{}.attn", self.prefix),
            width: self.width,
            heads: self.heads,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        init_ln(ps, &format!("{}.ln_q", self.prefix), self.width);
        init_ln(ps, &format!("{}.ln_kv", self.prefix), self.width);
        self.attention().init(ps, rng);
        init_ln(ps, &format!("{}.ln2", self.prefix), self.width);
        init_mlp(
            ps,
            &format!("{}.mlp", self.prefix),
            self.width,
            self.mlp_hidden,
            rng,
        );
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        queries: Var,
        context: Var,
    ) -> Result<Var> {
        let (qd, cd) = (g.value(queries).dim(), g.value(context).dim());
        ensure!(
            cd.0 > 0,
            Invalid,
            "cross attention {}: empty context",
            self.prefix
        );
        ensure!(
            qd.1 == self.width && cd.1 == self.width,
            Shape,
            "cross attention {}: {:?} / {:?}",
            self.prefix,
            qd,
            cd
        );
        let p = &self.prefix;
        let hq = apply_ln(g, b, &format!("{p}.ln_q"), queries);
        let hc = apply_ln(g, b, &format!("{p}.ln_kv"), context);
        let a = self.attention().forward(g, b, hq, hc)?;
        let x = g.add(queries, a);
        let h = apply_ln(g, b, &format!("{p}.ln2"), x);
        let m = mlp(g, b, &format!("{p}.mlp"), h)?;
        Ok(g.add(x, m))
    }
}

/// Adaptive convolution magnitude as a graph node with the analytic backward.
pub fn adaptive_conv(
    g: &mut Graph,
    x: Var,
    alpha: Var,
    beta: Var,
    cfg: &SbluConfig,
) -> Result<Var> {
    let (xv, av, bv) = (
        g.value(x).clone(),
        g.value(alpha).clone(),
        g.value(beta).clone(),
    );
    let inp = AdaptiveConvInput::new(xv.view(), av.view(), bv.view(), cfg)?;
    let (out, saved) = adaptive_conv::forward(&inp);
    let (delta, kernel) = (cfg.delta, cfg.kernel);
    Ok(g.custom(
        out,
        &[x, alpha, beta],
        Box::new(move |go| {
            let inp = AdaptiveConvInput {
                x: xv.view(),
                alpha: av.view(),
                beta: bv.view(),
                delta,
                kernel,
            };
            let gr =
                adaptive_conv::backward(&inp, &saved, go.view()).expect("shapes fixed at forward");
            vec![gr.x, gr.alpha, gr.beta]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::Leaf;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn dense_identity() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, -2.0, 3.0]]);
        let w = g.constant(Array2::eye(3));
        let b = g.constant(Array2::zeros((1, 3)));
        let y = dense(&mut g, x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let bad = g.constant(Array2::zeros((1, 2)));
        assert!(dense(&mut g, x, w, Some(bad)).is_err());
    }

    #[test]
    fn grouped_matches_block_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (groups, cin, cout, t) = (8, 32, 16, 5);
        let wv = randn((cout, cin / groups), &mut rng);
        let xv = randn((cin, t), &mut rng);
        let mut g = Graph::new();
        let (x, w) = (g.constant(xv.clone()), g.constant(wv.clone()));
        let y = grouped_pointwise(&mut g, x, w, groups).unwrap();
        let full = block_diagonal(&wv, groups).dot(&xv);
        assert!(g
            .value(y)
            .iter()
            .zip(full.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
        let w1 = g.constant(randn((4, cin), &mut rng));
        let y1 = grouped_pointwise(&mut g, x, w1, 1).unwrap();
        let d = g.value(w1).dot(&xv);
        assert_eq!(g.value(y1), &d);
        assert!(grouped_pointwise(&mut g, x, w, 3).is_err());
    }

    #[test]
    fn group_norm_per_channel_matches_row_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = randn((6, 9), &mut rng);
        let mut g = Graph::new();
        let x = g.constant(xv);
        let (ga, be) = (
            g.constant(Array2::ones((6, 1))),
            g.constant(Array2::zeros((6, 1))),
        );
        let y = group_norm(&mut g, x, 6, ga, be).unwrap();
        let r = g.layer_norm_rows(x);
        assert!(g
            .value(y)
            .iter()
            .zip(g.value(r).iter())
            .all(|(a, b)| (a - b).abs() < 1e-14));
        assert!(group_norm(&mut g, x, 4, ga, be).is_err());
    }

    #[test]
    fn norms_have_unit_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.constant(randn((5, 32), &mut rng) * 3.0 + 1.0);
        for y in [layer_norm_free(&mut g, x), instance_norm_token(&mut g, x)] {
            for row in g.value(y).rows() {
                assert!(row.mean().unwrap().abs() < 1e-10);
                assert!((row.dot(&row) / 32.0 - 1.0).abs() < 1e-10);
            }
        }
        let c = g.constant(Array2::from_elem((2, 8), 4.0));
        let y = instance_norm_token(&mut g, c);
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    fn block_fixture(seed: u64) -> (ParamSet, TransformerBlockParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blk = TransformerBlockParams::new("b", 32, 4, 2).unwrap();
        let mut ps = ParamSet::new();
        blk.init(&mut ps, &mut rng);
        (ps, blk)
    }

    #[test]
    fn transformer_block_is_permutation_equivariant() {
        let (ps, blk) = block_fixture(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xv = randn((6, 32), &mut rng);
        let perm = [3, 0, 5, 1, 4, 2];
        let mut g = Graph::new();
        let mut b = Binder::new(&ps, Leaf::Constant);
        let x = g.constant(xv.clone());
        let y = blk.forward(&mut g, &mut b, x).unwrap();
        let xp = g.constant(xv.select(ndarray::Axis(0), &perm));
        let yp = blk.forward(&mut g, &mut b, xp).unwrap();
        let expect = g.value(y).select(ndarray::Axis(0), &perm);
        assert!(g
            .value(yp)
            .iter()
            .zip(expect.iter())
            .all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn single_token_attention_passes_values() {
        let (ps, blk) = block_fixture(4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xv = randn((1, 32), &mut rng);
        let mut g = Graph::new();
        let mut b = Binder::new(&ps, Leaf::Constant);
        let x = g.constant(xv.clone());
        let y = blk.forward(&mut g, &mut b, x).unwrap();
        // softmax over one key is 1, so attention = (LN(x) Wv + bv) Wo + bo
        let ln = |v: &Array2<f64>, name: &str| {
            let mu = v.mean().unwrap();
            let var = v.mapv(|a| (a - mu).powi(2)).mean().unwrap();
            (v - mu) / var.sqrt() * ps.get(&format!("{name}.g")).unwrap()
                + ps.get(&format!("{name}.b")).unwrap()
        };
        let h = ln(&xv, "b.ln1");
        let v = h.dot(ps.get("b.attn.v.w").unwrap()) + ps.get("b.attn.v.b").unwrap();
        let a = v.dot(ps.get("b.attn.o.w").unwrap()) + ps.get("b.attn.o.b").unwrap();
        let x1 = &xv + &a;
        let h2 = ln(&x1, "b.ln2");
        let m = (h2.dot(ps.get("b.mlp.fc1.w").unwrap()) + ps.get("b.mlp.fc1.b").unwrap())
            .mapv(super::super::graph::gelu);
        let m = m.dot(ps.get("b.mlp.fc2.w").unwrap()) + ps.get("b.mlp.fc2.b").unwrap();
        let expect = x1 + m;
        assert!(g
            .value(y)
            .iter()
            .zip(expect.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn cross_attention_duplicate_context_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let blk = CrossAttentionBlockParams::new("c", 16, 2, 2).unwrap();
        let mut ps = ParamSet::new();
        blk.init(&mut ps, &mut rng);
        let qv = randn((3, 16), &mut rng);
        let av = randn((1, 16), &mut rng);
        let mut g = Graph::new();
        let mut b = Binder::new(&ps, Leaf::Constant);
        let q = g.constant(qv);
        let c1 = g.constant(av.clone());
        let c2 = g.constant(ndarray::concatenate![ndarray::Axis(0), av, av]);
        let y1 = blk.forward(&mut g, &mut b, q, c1).unwrap();
        let y2 = blk.forward(&mut g, &mut b, q, c2).unwrap();
        assert!(g
            .value(y1)
            .iter()
            .zip(g.value(y2).iter())
            .all(|(a, b)| (a - b).abs() < 1e-10));
        let empty = g.constant(Array2::zeros((0, 16)));
        assert!(blk.forward(&mut g, &mut b, q, empty).is_err());
        assert!(TransformerBlockParams::new("x", 10, 3, 2).is_err());
    }

    #[test]
    fn cross_attention_queries_do_not_interact() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let blk = CrossAttentionBlockParams::new("c", 16, 4, 2).unwrap();
        let mut ps = ParamSet::new();
        blk.init(&mut ps, &mut rng);
        let qv = randn((4, 16), &mut rng);
        let cv = randn((5, 16), &mut rng);
        let mut g = Graph::new();
        let mut b = Binder::new(&ps, Leaf::Constant);
        let (q, c) = (g.constant(qv.clone()), g.constant(cv));
        let all = blk.forward(&mut g, &mut b, q, c).unwrap();
        let q1 = g.constant(qv.slice(ndarray::s![2..3, ..]).to_owned());
        let one = blk.forward(&mut g, &mut b, q1, c).unwrap();
        let row = g.value(all).row(2).to_owned();
        assert!(g
            .value(one)
            .row(0)
            .iter()
            .zip(row.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
