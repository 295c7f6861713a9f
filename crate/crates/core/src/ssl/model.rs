use ndarray::{Array2, Axis};
use rand::Rng;

use super::SslConfig;
use crate::aape::posembed::PositionalTable;
use crate::aape::{AapeConfig, Stem, StemOutput};
use crate::autodiff::nn::{self, CrossAttentionBlockParams, TransformerBlockParams};
use crate::autodiff::{Binder, Graph, ParamSet, Var};
use crate::error::{ensure, Result};

/// Output of one encoder pass. `tokens` excludes the class token.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub stem: StemOutput,
    pub tokens: Var,
    pub cls: Option<Var>,
    /// Block outputs over the token rows, first block first.
    pub layers: Vec<Var>,
    /// Grid positions of the rows of `tokens`.
    pub positions: Vec<usize>,
}

/// Stem, ViT encoder, cross-attention predictor and contrastive head.
#[derive(Debug, Clone)]
pub struct Model {
    pub aape: AapeConfig,
    pub ssl: SslConfig,
    pub stem: Stem,
    enc_blocks: Vec<TransformerBlockParams>,
    pred_blocks: Vec<CrossAttentionBlockParams>,
    pred_pos: PositionalTable,
}

/// Prefixes of the parameters the teacher mirrors.
pub const TEACHER_PREFIXES: [&str; 2] = ["stem.", "enc."];

impl Model {
    pub fn new(aape: &AapeConfig, ssl: &SslConfig) -> Result<Self> {
        aape.validate()?;
        ssl.validate(aape.d)?;
        let stem = Stem::new(aape)?;
        let enc_blocks = (0..ssl.enc_depth)
            .map(|l| {
                TransformerBlockParams::new(
                    format!("enc.block{l}"),
                    aape.d,
                    ssl.enc_heads,
                    ssl.mlp_ratio,
                )
            })
            .collect::<Result<_>>()?;
        let pred_blocks = (0..ssl.pred_depth)
            .map(|l| {
                CrossAttentionBlockParams::new(
                    format!("pred.block{l}"),
                    ssl.pred_width,
                    ssl.pred_heads,
                    ssl.mlp_ratio,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Model {
            aape: aape.clone(),
            ssl: ssl.clone(),
            stem,
            enc_blocks,
            pred_blocks,
            pred_pos: PositionalTable::new(
                ssl.pred_width,
                aape.freq_patches(),
                aape.time_patches(),
            )?,
        })
    }

    /// Full student parameter tree.
    pub fn init_student(&self, rng: &mut impl Rng) -> ParamSet {
        let d = self.aape.d;
        let pw = self.ssl.pred_width;
        let mut ps = ParamSet::new();
        self.stem.init(&mut ps, rng);
        ps.normal("enc.cls", (1, d), 0.02, rng);
        for b in &self.enc_blocks {
            b.init(&mut ps, rng);
        }
        ps.ones("enc.norm.g", (1, d));
        ps.zeros("enc.norm.b", (1, d));
        ps.xavier("pred.in.w", d, pw, rng);
        ps.zeros("pred.in.b", (1, pw));
        ps.normal("pred.mask_token", (1, pw), 0.02, rng);
        for b in &self.pred_blocks {
            b.init(&mut ps, rng);
        }
        ps.ones("pred.norm.g", (1, pw));
        ps.zeros("pred.norm.b", (1, pw));
        ps.xavier("pred.head.w", pw, d, rng);
        ps.zeros("pred.head.b", (1, d));
        ps.xavier("head.fc1.w", d, d / 2, rng);
        ps.zeros("head.fc1.b", (1, d / 2));
        ps.xavier("head.fc2.w", d / 2, d / 2, rng);
        ps.zeros("head.fc2.b", (1, d / 2));
        ps.xavier("head.out.w", d / 2, self.ssl.proj_dim, rng);
        ps.zeros("head.out.b", (1, self.ssl.proj_dim));
        ps
    }

    /// Copy of the stem and encoder parameters.
    pub fn teacher_from(&self, student: &ParamSet) -> ParamSet {
        let mut t = ParamSet::new();
        for ((name, v), &decay) in student.iter().zip(student.decays()) {
            if TEACHER_PREFIXES.iter().any(|p| name.starts_with(p)) {
                t.insert(name, v.clone(), decay);
            }
        }
        t
    }

    /// Stem plus encoder. `visible` restricts both the Lambda Encoder and the
    /// ViT to those grid positions; `with_cls` prepends the class token.
    pub fn encode(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        x: &Array2<f64>,
        visible: Option<&[usize]>,
        with_cls: bool,
    ) -> Result<EncoderOutput> {
        let stem = self.stem.forward(g, b, x, visible)?;
        let n = stem.f_patches * stem.t_patches;
        let positions: Vec<usize> = visible
            .map(<[usize]>::to_vec)
            .unwrap_or_else(|| (0..n).collect());
        let pos_all = self.stem.positional(stem.t_patches)?;
        let pos = g.constant(pos_all.select(Axis(0), &positions));
        let tokens = if positions.len() == n {
            stem.fused
        } else {
            g.gather_rows(stem.fused, &positions)
        };
        let mut h = g.add(tokens, pos);
        if with_cls {
            let cls = b.get(g, "enc.cls");
            h = g.concat_rows(&[cls, h]);
        }
        let skip = usize::from(with_cls);
        let rows = g.value(h).nrows();
        let mut layers = Vec::with_capacity(self.enc_blocks.len());
        for blk in &self.enc_blocks {
            h = blk.forward(g, b, h)?;
            layers.push(if with_cls {
                g.slice_rows(h, skip, rows)
            } else {
                h
            });
        }
        let (ng, nb) = (b.get(g, "enc.norm.g"), b.get(g, "enc.norm.b"));
        let out = nn::layer_norm(g, h, ng, nb);
        let (cls, tokens) = if with_cls {
            (Some(g.slice_rows(out, 0, 1)), g.slice_rows(out, 1, rows))
        } else {
            (None, out)
        };
        Ok(EncoderOutput {
            stem,
            tokens,
            cls,
            layers,
            positions,
        })
    }

    /// Predictions `|queries| x D` for masked grid positions from the
    /// encoder's visible tokens.
    pub fn predict(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        context: Var,
        queries: &[usize],
        t_patches: usize,
    ) -> Result<Var> {
        ensure!(
            g.value(context).nrows() > 0,
            Invalid,
            "predictor needs a non-empty visible set"
        );
        ensure!(
            !queries.is_empty(),
            Invalid,
            "predictor needs at least one query"
        );
        let (wi, bi) = (b.get(g, "pred.in.w"), b.get(g, "pred.in.b"));
        let ctx = nn::dense(g, context, wi, Some(bi))?;
        let table = self.pred_pos.for_length(t_patches)?;
        ensure!(
            queries.iter().all(|&q| q < table.nrows()),
            Invalid,
            "query position out of range"
        );
        let qpos = g.constant(table.select(Axis(0), queries));
        let mt = b.get(g, "pred.mask_token");
        let mut q = g.add_row(qpos, mt);
        for blk in &self.pred_blocks {
            q = blk.forward(g, b, q, ctx)?;
        }
        let (ng, nb) = (b.get(g, "pred.norm.g"), b.get(g, "pred.norm.b"));
        let q = nn::layer_norm(g, q, ng, nb);
        let (wh, bh) = (b.get(g, "pred.head.w"), b.get(g, "pred.head.b"));
        nn::dense(g, q, wh, Some(bh))
    }

    /// L2-normalised `1 x proj_dim` view embedding from visible tokens.
    pub fn view_embedding(&self, g: &mut Graph, b: &mut Binder<'_>, tokens: Var) -> Result<Var> {
        let m = g.mean_rows(tokens);
        let (w1, b1) = (b.get(g, "head.fc1.w"), b.get(g, "head.fc1.b"));
        let h = nn::dense(g, m, w1, Some(b1))?;
        let h = g.gelu(h);
        let (w2, b2) = (b.get(g, "head.fc2.w"), b.get(g, "head.fc2.b"));
        let h = nn::dense(g, h, w2, Some(b2))?;
        let (wo, bo) = (b.get(g, "head.out.w"), b.get(g, "head.out.b"));
        let z = nn::dense(g, h, wo, Some(bo))?;
        Ok(g.l2_normalize_rows(z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Leaf;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (Model, ParamSet, Array2<f64>) {
        let m = Model::new(&AapeConfig::toy(), &SslConfig::toy()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = m.init_student(&mut rng);
        let x = Array2::from_shape_fn((32, 64), |_| rng.random_range(-1.0..1.0));
        (m, ps, x)
    }

    #[test]
    fn teacher_mirrors_stem_and_encoder() {
        let (m, ps, _) = fixture();
        let t = m.teacher_from(&ps);
        assert!(t
            .names()
            .iter()
            .all(|n| n.starts_with("stem.") || n.starts_with("enc.")));
        assert!(t.get("pred.in.w").is_none());
        assert_eq!(t.get("enc.cls"), ps.get("enc.cls"));
    }

    #[test]
    fn encoder_shapes() {
        let (m, ps, x) = fixture();
        let mut g = Graph::new();
        let mut b = Binder::new(&ps, Leaf::Constant);
        let vis: Vec<usize> = (0..128).step_by(5).collect();
        let o = m.encode(&mut g, &mut b, &x, Some(&vis), true).unwrap();
        assert_eq!(g.value(o.tokens).dim(), (vis.len(), 48));
        assert_eq!(g.value(o.cls.unwrap()).dim(), (1, 48));
        assert_eq!(o.layers.len(), 2);
        assert_eq!(g.value(o.layers[0]).dim(), (vis.len(), 48));
        let full = m.encode(&mut g, &mut b, &x, None, false).unwrap();
        assert!(full.cls.is_none());
        assert_eq!(g.value(full.tokens).dim(), (128, 48));
        let p = m.predict(&mut g, &mut b, o.tokens, &[1, 2, 3], 16).unwrap();
        assert_eq!(g.value(p).dim(), (3, 48));
        let z = m.view_embedding(&mut g, &mut b, o.tokens).unwrap();
        let zv = g.value(z);
        assert_eq!(zv.dim(), (1, 24));
        assert!((zv.row(0).dot(&zv.row(0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn retained_query_prediction_ignores_other_queries() {
        let (m, ps, x) = fixture();
        let mut g = Graph::new();
        let mut b = Binder::new(&ps, Leaf::Constant);
        let vis: Vec<usize> = (0..128).step_by(4).collect();
        let o = m.encode(&mut g, &mut b, &x, Some(&vis), true).unwrap();
        let a = m
            .predict(&mut g, &mut b, o.tokens, &[5, 9, 30, 77], 16)
            .unwrap();
        let c = m.predict(&mut g, &mut b, o.tokens, &[9, 100], 16).unwrap();
        let (ra, rc) = (g.value(a).row(1).to_owned(), g.value(c).row(0).to_owned());
        assert!(ra.iter().zip(rc.iter()).all(|(u, v)| (u - v).abs() < 1e-12));
        let empty = g.constant(Array2::zeros((0, 48)));
        assert!(m.predict(&mut g, &mut b, empty, &[1], 16).is_err());
    }
}
