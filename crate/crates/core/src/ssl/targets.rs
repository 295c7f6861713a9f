use ndarray::{Array1, Array2, Axis};

use crate::autodiff::NORM_EPS;
use crate::error::{ensure, Result};

/// Affine-free zero-mean, unit-variance rows (variance floored at
/// [`NORM_EPS`]), identical to the graph's `layer_norm_rows`.
pub fn normalize_rows(a: &Array2<f64>) -> Array2<f64> {
    let n = a.ncols() as f64;
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let mu = row.sum() / n;
        row.mapv_inplace(|v| v - mu);
        let var = row.fold(0.0, |s, &v| s + v * v) / n;
        row /= var.max(NORM_EPS).sqrt();
    }
    out
}

/// Pooled token targets and the utterance target from teacher layer outputs
/// (`tokens x D` each, no class token).
pub fn teacher_targets(layers: &[Array2<f64>]) -> Result<(Array2<f64>, Array1<f64>)> {
    ensure!(
        !layers.is_empty(),
        Invalid,
        "teacher_targets needs at least one layer"
    );
    let dim = layers[0].dim();
    ensure!(
        layers.iter().all(|l| l.dim() == dim),
        Shape,
        "teacher layers disagree in shape"
    );
    ensure!(dim.0 > 0, Shape, "teacher layers have no tokens");
    let mut acc = Array2::<f64>::zeros(dim);
    for l in layers {
        acc += &normalize_rows(l);
    }
    acc /= layers.len() as f64;
    let pooled = normalize_rows(&acc);
    let utterance = pooled.mean_axis(Axis(0)).expect("non-empty");
    Ok((pooled, utterance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_layers(k: usize, seed: u64) -> Vec<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|i| {
                Array2::from_shape_fn((10, 16), |_| rng.random_range(-2.0..3.0) * (i + 1) as f64)
            })
            .collect()
    }

    #[test]
    fn pooled_tokens_are_standardised() {
        let (p, u) = teacher_targets(&rand_layers(3, 1)).unwrap();
        for row in p.rows() {
            assert!(row.mean().unwrap().abs() < 1e-6);
            assert!((row.dot(&row) / 16.0 - 1.0).abs() < 1e-6);
        }
        assert_eq!(u.len(), 16);
        assert!((u[3] - p.column(3).mean().unwrap()).abs() < 1e-15);
    }

    #[test]
    fn single_normalised_layer_is_idempotent() {
        let l = normalize_rows(&rand_layers(1, 2)[0]);
        let (p, _) = teacher_targets(std::slice::from_ref(&l)).unwrap();
        assert!(p.iter().zip(l.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn layer_order_is_irrelevant() {
        let mut ls = rand_layers(4, 3);
        let (a, _) = teacher_targets(&ls).unwrap();
        ls.reverse();
        ls.swap(0, 2);
        let (b, _) = teacher_targets(&ls).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(teacher_targets(&[]).is_err());
    }
}
