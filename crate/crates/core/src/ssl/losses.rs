use ndarray::Array2;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub l_m: f64,
    pub l_u: f64,
    pub l_c: f64,
    pub l_total: f64,
    pub eta: f64,
    pub tau: f64,
}

impl LossReport {
    /// `l_total = (l_m + l_u) + eta * l_c`, evaluated in that order.
    pub fn compose(l_m: f64, l_u: f64, l_c: f64, eta: f64, tau: f64) -> Self {
        LossReport {
            l_m,
            l_u,
            l_c,
            l_total: (l_m + l_u) + eta * l_c,
            eta,
            tau,
        }
    }
}

fn mse(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Var {
    let cat = if terms.len() == 1 {
        terms[0]
    } else {
        g.concat_rows(terms)
    };
    g.mean_all(cat)
}

/// Mean squared error per view (over queries and channels), averaged over views.
pub fn loss_masked(g: &mut Graph, preds: &[Var], targets: &[Var]) -> Result<Var> {
    ensure!(
        !preds.is_empty() && preds.len() == targets.len(),
        Invalid,
        "{} predictions for {} targets",
        preds.len(),
        targets.len()
    );
    let mut terms = Vec::with_capacity(preds.len());
    for (&p, &t) in preds.iter().zip(targets) {
        ensure!(
            g.value(p).dim() == g.value(t).dim(),
            Shape,
            "prediction {:?} vs target {:?}",
            g.value(p).dim(),
            g.value(t).dim()
        );
        terms.push(mse(g, p, t));
    }
    Ok(mean_of(g, &terms))
}

/// Mean squared error between class tokens and utterance targets (`1 x D`).
pub fn loss_utterance(g: &mut Graph, cls: &[Var], targets: &[Var]) -> Result<Var> {
    ensure!(
        !cls.is_empty() && cls.len() == targets.len(),
        Invalid,
        "{} class tokens for {} targets",
        cls.len(),
        targets.len()
    );
    let mut terms = Vec::with_capacity(cls.len());
    for (&c, &t) in cls.iter().zip(targets) {
        ensure!(
            g.value(c).dim() == g.value(t).dim() && g.value(c).nrows() == 1,
            Shape,
            "class token {:?} vs target {:?}",
            g.value(c).dim(),
            g.value(t).dim()
        );
        terms.push(mse(g, c, t));
    }
    Ok(mean_of(g, &terms))
}

/// Multi-view InfoNCE over L2-normalised rows of `z`. `sample_of[i]` names
/// the sample row `i` came from; the positives of an anchor are the other
/// views of its sample, the denominator runs over every other row. Terms
/// are summed over positives and averaged over anchors.
pub fn loss_contrastive(g: &mut Graph, z: Var, sample_of: &[usize], tau: f64) -> Result<Var> {
    let n = g.value(z).nrows();
    ensure!(
        n == sample_of.len(),
        Shape,
        "{n} embeddings for {} sample ids",
        sample_of.len()
    );
    ensure!(tau > 0.0, Invalid, "temperature must be positive");
    let mut positives = Array2::<f64>::zeros((n, n));
    let mut counts = Array2::<f64>::zeros((n, 1));
    for i in 0..n {
        for j in 0..n {
            if i != j && sample_of[i] == sample_of[j] {
                positives[[i, j]] = 1.0;
                counts[[i, 0]] += 1.0;
            }
        }
        ensure!(
            counts[[i, 0]] > 0.0,
            Invalid,
            "anchor {i} has no positive view"
        );
    }
    let zt = g.transpose(z);
    let s = g.matmul(z, zt);
    let s = g.scale(s, 1.0 / tau);
    let diag = g.constant(Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    }));
    let masked = g.add(s, diag);
    let lse = g.logsumexp_rows(masked);
    let counts = g.constant(counts);
    let weighted = g.mul(lse, counts);
    let denom = g.sum_all(weighted);
    let pmask = g.constant(positives);
    let pos = g.mul(s, pmask);
    let num = g.sum_all(pos);
    let diff = g.sub(denom, num);
    Ok(g.scale(diff, 1.0 / n as f64))
}

/// [`loss_contrastive`] on plain values.
pub fn contrastive_value(z: &Array2<f64>, sample_of: &[usize], tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let l = loss_contrastive(&mut g, zv, sample_of, tau)?;
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthonormal_views_give_log3() {
        let z = Array2::eye(4);
        let l = contrastive_value(&z, &[0, 0, 1, 1], 0.2).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-10, "{l}");
    }

    #[test]
    fn aligned_positives_opposed_negatives() {
        let z = array![[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]];
        let l = contrastive_value(&z, &[0, 0, 1, 1], 0.2).unwrap();
        // -log(e^5 / (e^5 + 2 e^-5))
        let expect = (1.0 + 2.0 * (-10f64).exp()).ln();
        assert!((l - expect).abs() < 1e-15);
        assert!((expect - 9.08e-5).abs() < 1e-7);
    }

    #[test]
    fn sample_permutation_invariance_and_positivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = Array2::from_shape_fn((6, 5), |_| rng.random_range(-1.0..1.0));
        let z = crate::ssl::targets::normalize_rows(&raw).mapv(|v| v / 5f64.sqrt());
        let ids = [0, 0, 1, 1, 2, 2];
        let a = contrastive_value(&z, &ids, 0.2).unwrap();
        let perm = [4, 5, 0, 1, 2, 3];
        let zp = z.select(ndarray::Axis(0), &perm);
        let b = contrastive_value(&zp, &ids, 0.2).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(a > 0.0);
        assert!(contrastive_value(&z.slice(ndarray::s![..1, ..]).to_owned(), &[0], 0.2).is_err());
    }

    #[test]
    fn mse_closed_forms() {
        let mut g = Graph::new();
        let t = g.constant(Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64));
        let p = g.constant(g.value(t).clone());
        let l = loss_masked(&mut g, &[p], &[t]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let mut bumped = g.value(t).clone();
        bumped[[1, 2]] += 0.01;
        let p2 = g.constant(bumped);
        let l = loss_masked(&mut g, &[p2, p], &[t, t]).unwrap();
        // (eps^2 / (Q D)) averaged with an exact view
        assert!((g.scalar(l) - 1e-4 / 12.0 / 2.0).abs() < 1e-18);
        let bad = g.constant(Array2::zeros((2, 4)));
        assert!(loss_masked(&mut g, &[bad], &[t]).is_err());
        let c = g.constant(Array2::zeros((1, 4)));
        let u = g.constant(Array2::ones((1, 4)));
        let lu = loss_utterance(&mut g, &[c], &[u]).unwrap();
        assert_eq!(g.scalar(lu), 1.0);
    }

    #[test]
    fn composition_identity() {
        let r = LossReport::compose(0.3, 0.7, 2.5, 0.1, 0.2);
        assert_eq!(r.l_total, 0.3 + 0.7 + 0.1 * 2.5);
        let r = LossReport::compose(0.3, 0.7, 2.5, 0.0, 0.2);
        assert_eq!(r.l_total, 0.3 + 0.7);
    }
}
