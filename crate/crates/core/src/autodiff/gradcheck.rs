use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Above this many coordinates a seeded random subset is checked.
    pub max_coords: usize,
    pub seed: u64,
    /// Relative errors use `max(|a|, |n|, rel_floor * max_k |a_k|)` as the
    /// denominator so that vanishing coordinates are compared against the
    /// gradient's overall scale.
    pub rel_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-6,
            max_coords: 10_000,
            seed: 0,
            rel_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub total: usize,
    /// `(input, flat index)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
}

fn evaluate<F>(f: &F, inputs: &[Array2<f64>]) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).sum()
}

/// Compares reverse-mode gradients of `sum(f(inputs))` against central
/// differences on every input coordinate, or a random subset.
pub fn grad_check<F>(f: F, inputs: &[Array2<f64>], h: f64) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    grad_check_with(
        f,
        inputs,
        GradCheckOptions {
            h,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(f: F, inputs: &[Array2<f64>], opts: GradCheckOptions) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| match grads.get(v) {
            Some(gr) => gr.as_standard_layout().iter().copied().collect(),
            None => vec![0.0; x.len()],
        })
        .collect();

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, x)| (0..x.len()).map(move |k| (i, k)))
        .collect();
    let total = coords.len();
    let chosen: Vec<(usize, usize)> = if total > opts.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = rand::seq::index::sample(&mut rng, total, opts.max_coords).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|j| coords[j]).collect()
    } else {
        coords
    };

    let scale = chosen
        .iter()
        .map(|&(i, k)| analytic[i][k].abs())
        .fold(0.0, f64::max);
    let floor = (opts.rel_floor * scale).max(1e-300);
    let mut work: Vec<Array2<f64>> = inputs
        .iter()
        .map(|x| x.as_standard_layout().into_owned())
        .collect();
    let mut rep = GradCheckReport {
        total,
        checked: chosen.len(),
        ..Default::default()
    };
    for &(i, k) in &chosen {
        let orig = work[i].as_slice().expect("standard layout")[k];
        work[i].as_slice_mut().expect("standard layout")[k] = orig + opts.h;
        let fp = evaluate(&f, &work);
        work[i].as_slice_mut().expect("standard layout")[k] = orig - opts.h;
        let fm = evaluate(&f, &work);
        work[i].as_slice_mut().expect("standard layout")[k] = orig;
        let num = (fp - fm) / (2.0 * opts.h);
        let a = analytic[i][k];
        let abs = (a - num).abs();
        let rel = abs / a.abs().max(num.abs()).max(floor);
        rep.max_abs_error = rep.max_abs_error.max(abs);
        if rel > rep.max_rel_error || rep.worst.is_none() {
            rep.max_rel_error = rep.max_rel_error.max(rel);
            rep.worst = Some((i, k));
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn rand_mat(shape: (usize, usize), seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_function_is_exact() {
        let w = rand_mat((3, 4), 1);
        let rep = grad_check(
            move |g, v| {
                let c = g.constant(w.clone());
                let y = g.mul(v[0], c);
                g.scale(y, 2.5)
            },
            &[rand_mat((3, 4), 2)],
            // no truncation error, so a wide step only shrinks roundoff
            1e-3,
        );
        assert!(rep.max_rel_error < 1e-10, "{rep:?}");
        assert_eq!(rep.checked, 12);
    }

    #[test]
    fn broken_backward_is_detected() {
        let rep = grad_check(
            |g, v| {
                let x = g.value(v[0]).clone();
                let out = x.mapv(|a| a * a);
                // wrong: d(x^2)/dx reported as x instead of 2x
                g.custom(out, &[v[0]], Box::new(move |go| vec![go * &x]))
            },
            &[array![[0.5, -1.2, 2.0]]],
            1e-6,
        );
        assert!(rep.max_rel_error > 1e-2, "{rep:?}");
    }

    #[test]
    fn primitive_ops_pass() {
        type Case = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;
        let r = rand_mat((1, 5), 9);
        let cases: Vec<(&str, Case, Vec<Array2<f64>>)> = vec![
            (
                "matmul",
                Box::new(|g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1])),
                vec![rand_mat((3, 4), 3), rand_mat((4, 5), 4)],
            ),
            (
                "softmax",
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let s = g.softmax_rows(v[0]);
                    let c = g.constant(r.clone());
                    g.mul_row(s, c)
                }),
                vec![rand_mat((4, 5), 5)],
            ),
            (
                "layer_norm",
                Box::new(|g: &mut Graph, v: &[Var]| {
                    let y = g.layer_norm_rows(v[0]);
                    g.mul(y, v[1])
                }),
                vec![rand_mat((3, 6), 6), rand_mat((3, 6), 7)],
            ),
            (
                "l2",
                Box::new(|g: &mut Graph, v: &[Var]| {
                    let y = g.l2_normalize_rows(v[0]);
                    g.mul(y, v[1])
                }),
                vec![rand_mat((3, 6), 8), rand_mat((3, 6), 10)],
            ),
            (
                "lse",
                Box::new(|g: &mut Graph, v: &[Var]| {
                    let y = g.logsumexp_rows(v[0]);
                    g.mul(y, y)
                }),
                vec![rand_mat((3, 6), 11)],
            ),
            (
                "nonlinear",
                Box::new(|g: &mut Graph, v: &[Var]| {
                    let a = g.gelu(v[0]);
                    let b = g.softplus(a);
                    let c = g.sigmoid(b);
                    g.mul(c, v[0])
                }),
                vec![rand_mat((2, 7), 12) * 3.0],
            ),
            (
                "shape_ops",
                Box::new(|g: &mut Graph, v: &[Var]| {
                    let t = g.transpose(v[0]);
                    let r = g.reshape(t, 2, 6);
                    let a = g.slice_cols(r, 1, 4);
                    let b = g.slice_rows(r, 0, 1);
                    let bt = g.gather_flat(b, (1, 3), &[5, 0, 2]);
                    let c = g.concat_rows(&[a, bt]);
                    let d = g.gather_rows(c, &[2, 0, 2]);
                    let m = g.mean_rows(d);
                    let e = g.concat_cols(&[m, m]);
                    g.mul(e, e)
                }),
                vec![rand_mat((4, 3), 13)],
            ),
            (
                "broadcast",
                Box::new(|g: &mut Graph, v: &[Var]| {
                    let a = g.mul_row(v[0], v[1]);
                    let b = g.add_row(a, v[1]);
                    let c = g.mul_col(b, v[2]);
                    let d = g.add_col(c, v[2]);
                    let e = g.sub(d, v[0]);
                    let f = g.add_scalar(e, 0.3);
                    g.mul(f, f)
                }),
                vec![
                    rand_mat((3, 4), 14),
                    rand_mat((1, 4), 15),
                    rand_mat((3, 1), 16),
                ],
            ),
            (
                "depthwise_patch",
                Box::new(|g: &mut Graph, v: &[Var]| {
                    let y = g.depthwise_patch(v[0], v[1]);
                    g.mul(y, y)
                }),
                vec![rand_mat((3, 8), 17), rand_mat((3, 4), 18)],
            ),
        ];
        for (name, f, inputs) in cases {
            let rep = grad_check(f, &inputs, 1e-6);
            assert!(rep.max_rel_error < 1e-6, "{name}: {rep:?}");
        }
    }

    #[test]
    fn subset_sampling_and_determinism() {
        let opts = GradCheckOptions {
            max_coords: 7,
            seed: 3,
            ..Default::default()
        };
        let f = |g: &mut Graph, v: &[Var]| g.mul(v[0], v[0]);
        let x = rand_mat((5, 5), 1);
        let a = grad_check_with(f, std::slice::from_ref(&x), opts);
        let b = grad_check_with(f, &[x], opts);
        assert_eq!(a.checked, 7);
        assert_eq!(a.total, 25);
        assert_eq!(a.max_rel_error.to_bits(), b.max_rel_error.to_bits());
    }
}
