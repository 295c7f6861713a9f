use aape_core::adaptive_conv::{self, conv_config, AdaptiveConvInput};
use aape_core::autodiff::{Graph, ParamSet};
use aape_core::io;
use aape_core::rng::{keyed, Lane};
use aape_core::sblu::{bound_alpha, bound_beta, derive_bounds, gamma};
use aape_core::ssl::momentum;
use ndarray::{Array2, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::Rng;

fn operands(
    h: usize,
    n: usize,
    k: usize,
    seed: u64,
) -> (
    Array2<f64>,
    Array2<f64>,
    Array2<f64>,
    aape_core::sblu::SbluConfig,
) {
    let cfg = conv_config(k, 0.01, 0.01, 16);
    let (x, a, b) = adaptive_conv::random_operands(
        h,
        n,
        &cfg.bounds().unwrap(),
        &mut keyed(seed, 0, Lane::Sweep, 9),
    );
    (x, a, b, cfg)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn magnitude_is_absolutely_homogeneous(h in 1usize..5, n in 1usize..40, kh in 1usize..20, c in -5.0f64..5.0, seed in any::<u64>()) {
        let (x, a, b, cfg) = operands(h, n, 2 * kh + 1, seed);
        let y = adaptive_conv::forward(&AdaptiveConvInput::new(x.view(), a.view(), b.view(), &cfg).unwrap()).0;
        let xs = &x * c;
        let ys = adaptive_conv::forward(&AdaptiveConvInput::new(xs.view(), a.view(), b.view(), &cfg).unwrap()).0;
        for (p, q) in ys.iter().zip((&y * c.abs()).iter()) {
            prop_assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn complex_response_is_linear_in_input(h in 1usize..4, n in 1usize..30, kh in 1usize..15, seed in any::<u64>()) {
        let (x1, a, b, cfg) = operands(h, n, 2 * kh + 1, seed);
        let (x2, _, _, _) = operands(h, n, 2 * kh + 1, seed ^ 0x5a5a);
        let s1 = adaptive_conv::forward(&AdaptiveConvInput::new(x1.view(), a.view(), b.view(), &cfg).unwrap()).1;
        let s2 = adaptive_conv::forward(&AdaptiveConvInput::new(x2.view(), a.view(), b.view(), &cfg).unwrap()).1;
        let sum = &x1 + &x2;
        let s = adaptive_conv::forward(&AdaptiveConvInput::new(sum.view(), a.view(), b.view(), &cfg).unwrap()).1;
        for ((p, q), r) in s.re.iter().zip(s1.re.iter()).zip(s2.re.iter()) {
            prop_assert!((p - q - r).abs() < 1e-12);
        }
        for ((p, q), r) in s.im.iter().zip(s1.im.iter()).zip(s2.im.iter()) {
            prop_assert!((p - q - r).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_matches_oracle(h in 1usize..4, n in 1usize..50, kh in 1usize..32, seed in any::<u64>()) {
        let (x, a, b, cfg) = operands(h, n, 2 * kh + 1, seed);
        let inp = AdaptiveConvInput::new(x.view(), a.view(), b.view(), &cfg).unwrap();
        let y = adaptive_conv::forward(&inp).0;
        let o = adaptive_conv::naive_oracle(&inp);
        prop_assert!((&y - &o).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn bounded_maps_stay_inside(raw_a in -30.0f64..30.0, raw_b in -30.0f64..30.0, k in 1usize..40, p in 2usize..32) {
        let bd = derive_bounds(0.01, 2 * k + 1, 0.01, p).unwrap();
        let (a, b) = (bound_alpha(raw_a, &bd), bound_beta(raw_b, &bd));
        prop_assert!(a > bd.alpha_min);
        prop_assert!(b > bd.beta_min && b < bd.beta_max);
        prop_assert!(bd.contains(a, b));
    }

    #[test]
    fn gamma_is_even_in_frequency(a in 15.0f64..300.0, b in 20.0f64..314.0, d in 0.001f64..0.02) {
        let g1 = gamma(a, b, d).unwrap();
        let g2 = gamma(a, -b, d).unwrap();
        prop_assert!((g1 - g2).abs() < 1e-15);
        prop_assert!(g1 > 0.0);
    }

    #[test]
    fn tensor_round_trip(dims in prop::collection::vec(0usize..5, 0..4), seed in any::<u64>()) {
        let mut rng = keyed(seed, 0, Lane::Data, 0);
        let len: usize = dims.iter().product();
        let data: Vec<f64> = (0..len).map(|_| rng.random_range(-1e6..1e6)).collect();
        let a = ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap();
        let mut buf = Vec::new();
        io::write_tensor(&mut buf, &a, io::DType::F64).unwrap();
        prop_assert_eq!(buf.len(), 10 + 8 * dims.len() + 8 * len);
        let (b, _) = io::read_tensor(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn momentum_is_monotone_and_bounded(m in 0usize..1000, total in 1usize..1000, start in 0.9f64..1.0) {
        let x0 = momentum(m, total, start, 1.0);
        let x1 = momentum(m + 1, total, start, 1.0);
        prop_assert!(x0 >= start - 1e-15 && x0 <= 1.0 + 1e-15);
        prop_assert!(x1 >= x0 - 1e-15);
    }
}

#[test]
fn checkpoint_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut ps = ParamSet::new();
    ps.normal("a", (3, 4), 1.0, &mut keyed(1, 0, Lane::Init, 0));
    ps.zeros("b", (1, 4));
    let p = dir.path().join("c.aapc");
    io::save_checkpoint(&p, &ps).unwrap();
    assert_eq!(io::load_checkpoint(&p).unwrap(), ps);
    let mut bytes = std::fs::read(&p).unwrap();
    bytes.push(0);
    std::fs::write(&p, bytes).unwrap();
    assert!(io::load_checkpoint(&p).is_err());
}

#[test]
fn detached_branch_receives_no_gradient() {
    let mut g = Graph::new();
    let w = g.param(Array2::from_elem((2, 2), 0.5));
    let t = g.param(Array2::from_elem((2, 2), 3.0));
    let td = g.detach(t);
    let prod = g.mul(w, td);
    let y = g.sum_all(prod);
    let grads = g.backward(y);
    assert!(grads.get(t).is_none());
    assert_eq!(grads.get(w).unwrap(), &Array2::from_elem((2, 2), 3.0));
}
