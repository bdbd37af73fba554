use bimamba::ssm::{
    combine, directional_scan, directional_scan_eager, discretize, generate_ssm_inputs, inverse_softplus,
    selective_scan_parallel, selective_scan_sequential, Direction, Discretization, ScanCoefficients, ScanMode,
    ScanOptions, SsmDirectionParams,
};
use bimamba::tensor::{finite_difference_gradient, relative_error, Eager, Graph, TensorOps};
use bimamba::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn coefficients(len: usize, e: usize, n: usize, seed: u64, decay: f64) -> ScanCoefficients<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScanCoefficients::from_parts(
        Tensor::sample_uniform(&[len, e, n], -decay, decay, &mut rng).unwrap(),
        Tensor::sample_uniform(&[len, e, n], -1.0, 1.0, &mut rng).unwrap(),
        Tensor::sample_uniform(&[len, n], -1.0, 1.0, &mut rng).unwrap(),
    )
    .unwrap()
}

/// Direct evaluation of `y[t,e] = Σ_n C[t,n] Σ_{s≤t} (Π_{s<r≤t} Ā[r,e,n]) B̄x[s,e,n]`.
fn brute_force(coef: &ScanCoefficients<f64>) -> Vec<f64> {
    let (len, e, n) = coef.dims();
    let (a, b, c) = (coef.a_bar.data(), coef.b_bar_x.data(), coef.c.data());
    let mut y = vec![0.0; len * e];
    for t in 0..len {
        for ei in 0..e {
            for ni in 0..n {
                let mut h = 0.0;
                for s in 0..=t {
                    let mut prod = 1.0;
                    for r in s + 1..=t {
                        prod *= a[(r * e + ei) * n + ni];
                    }
                    h += prod * b[(s * e + ei) * n + ni];
                }
                y[t * e + ei] += c[t * n + ni] * h;
            }
        }
    }
    y
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

#[test]
fn sequential_matches_brute_force() {
    for (len, seed) in [(1, 1), (5, 2), (17, 3)] {
        let coef = coefficients(len, 3, 2, seed, 0.9);
        let y = selective_scan_sequential(&coef).unwrap();
        assert!(close(y.data(), &brute_force(&coef), 1e-12), "len={len}");
    }
}

#[test]
fn scalar_impulse_decays_geometrically() {
    let len = 6;
    let a = Tensor::full(&[len, 1, 1], 0.5).unwrap();
    let mut b = Tensor::zeros(&[len, 1, 1]).unwrap();
    b.data_mut()[0] = 1.0;
    let c = Tensor::ones(&[len, 1]).unwrap();
    let y = selective_scan_sequential(&ScanCoefficients::from_parts(a, b, c).unwrap()).unwrap();
    let expect: Vec<f64> = (0..len).map(|t| 0.5f64.powi(t as i32)).collect();
    assert_eq!(y.data(), expect.as_slice());
}

#[test]
fn parallel_matches_sequential_at_boundary_lengths() {
    for len in [1, 2, 3, 4, 5, 127, 128, 129, 1000] {
        let coef = coefficients(len, 4, 3, len as u64, 0.99);
        let s = selective_scan_sequential(&coef).unwrap();
        let p = selective_scan_parallel(&coef).unwrap();
        assert!(close(s.data(), p.data(), 1e-12), "len={len}");
    }
}

#[test]
fn combine_is_not_commutative() {
    let x = (0.5, 1.0);
    let y = (0.25, 2.0);
    assert_ne!(combine(x, y), combine(y, x));
}

#[test]
fn multiplicative_a_bar_is_negative_and_stable_at_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (e, n) = (32, 16);
    let p = SsmDirectionParams::<Tensor<f64>>::init(Direction::Forward, e, n, 2, 4, &mut rng).unwrap();
    let a = p.state_matrix().unwrap();
    for (k, &v) in a.data().iter().enumerate() {
        assert!((v + (k % n) as f64 + 1.0).abs() < 1e-12);
    }
    let delta = Tensor::full(&[3, e], 0.05).unwrap();
    let b = Tensor::ones(&[3, n]).unwrap();
    let (a_bar, _) = discretize(&delta, &a, &b).unwrap();
    assert!(a_bar.data().iter().all(|&v| v < 0.0 && v > -1.0));
}

#[test]
fn zero_input_gives_bias_step_and_zero_projections() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (e, n) = (6, 3);
    let mut p = SsmDirectionParams::<Tensor<f64>>::init(Direction::Forward, e, n, 2, 4, &mut rng).unwrap();
    p.delta_bias = Tensor::full(&[e], inverse_softplus(0.01)).unwrap();
    let mut ops = Eager::new();
    let w = p.map(|t| ops.input(t, false));
    let x = ops.input(&Tensor::zeros(&[5, e]).unwrap(), false);
    let (delta, b, c) = generate_ssm_inputs(&mut ops, &x, &w).unwrap();
    assert!(delta.data().iter().all(|&d| (d - 0.01).abs() < 1e-15));
    assert!(b.data().iter().all(|&v| v == 0.0));
    assert!(c.data().iter().all(|&v| v == 0.0));
}

fn direction_params(e: usize, n: usize, seed: u64, direction: Direction) -> SsmDirectionParams<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SsmDirectionParams::init(direction, e, n, 2, 3, &mut rng).unwrap()
}

fn reverse(x: &Tensor<f64>) -> Tensor<f64> {
    let (l, w) = x.dims2().unwrap();
    let data = (0..l).rev().flat_map(|r| x.row(r).to_vec()).collect();
    Tensor::new(&[l, w], data).unwrap()
}

#[test]
fn backward_direction_is_forward_on_the_reversal() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::<f64>::sample_uniform(&[9, 5], -1.0, 1.0, &mut rng).unwrap();
    let fwd = direction_params(5, 3, 2, Direction::Forward);
    let bwd = SsmDirectionParams {
        direction: Direction::Backward,
        ..fwd.clone()
    };
    let opts = ScanOptions::default();
    let via_backward = directional_scan_eager(&x, &bwd, opts).unwrap();
    let via_forward = reverse(&directional_scan_eager(&reverse(&x), &fwd, opts).unwrap());
    assert!(close(via_backward.data(), via_forward.data(), 1e-14));
}

#[test]
fn palindromic_input_mirrors_between_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let half = Tensor::<f64>::sample_uniform(&[4, 3], -1.0, 1.0, &mut rng).unwrap();
    let mut rows: Vec<f64> = half.data().to_vec();
    rows.extend_from_slice(&[0.3, -0.2, 0.1]);
    rows.extend(reverse(&half).into_data());
    let x = Tensor::new(&[9, 3], rows).unwrap();
    let fwd = direction_params(3, 2, 5, Direction::Forward);
    let bwd = SsmDirectionParams {
        direction: Direction::Backward,
        ..fwd.clone()
    };
    let opts = ScanOptions::default();
    let yf = directional_scan_eager(&x, &fwd, opts).unwrap();
    let yb = directional_scan_eager(&x, &bwd, opts).unwrap();
    assert!(close(yf.data(), reverse(&yb).data(), 1e-14));
}

fn scan_loss(coef: &ScanCoefficients<f64>, weights: &Tensor<f64>) -> f64 {
    let y = selective_scan_sequential(coef).unwrap();
    y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn scan_gradients_match_finite_differences() {
    for mode in [ScanMode::Sequential, ScanMode::Parallel] {
        let coef = coefficients(7, 2, 3, 21, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let weights = Tensor::<f64>::sample_uniform(&[7, 2], -1.0, 1.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let a = g.input(&coef.a_bar, true);
        let b = g.input(&coef.b_bar_x, true);
        let c = g.input(&coef.c, true);
        let w = g.input(&weights, false);
        let y = g.selective_scan(&a, &b, &c, mode).unwrap();
        let yw = g.mul(&y, &w).unwrap();
        let loss = g.sum(yw);
        g.backward(loss).unwrap();

        let checks: [(&Tensor<f64>, Tensor<f64>); 3] = [
            (
                &coef.a_bar,
                finite_difference_gradient(
                    |t| Ok(scan_loss(&ScanCoefficients::from_parts(t.clone(), coef.b_bar_x.clone(), coef.c.clone())?, &weights)),
                    &coef.a_bar,
                    1e-6,
                )
                .unwrap(),
            ),
            (
                &coef.b_bar_x,
                finite_difference_gradient(
                    |t| Ok(scan_loss(&ScanCoefficients::from_parts(coef.a_bar.clone(), t.clone(), coef.c.clone())?, &weights)),
                    &coef.b_bar_x,
                    1e-6,
                )
                .unwrap(),
            ),
            (
                &coef.c,
                finite_difference_gradient(
                    |t| Ok(scan_loss(&ScanCoefficients::from_parts(coef.a_bar.clone(), coef.b_bar_x.clone(), t.clone())?, &weights)),
                    &coef.c,
                    1e-6,
                )
                .unwrap(),
            ),
        ];
        for ((_, numeric), var) in checks.iter().zip([a, b, c]) {
            let analytic = g.grad(var).unwrap();
            for (x, y) in analytic.data().iter().zip(numeric.data()) {
                assert!(relative_error(*x, *y, 1e-8) < 1e-6, "{mode:?}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn directional_scan_gradients_match_finite_differences() {
    for (direction, rule) in [
        (Direction::Forward, Discretization::Multiplication),
        (Direction::Backward, Discretization::Multiplication),
        (Direction::Forward, Discretization::Exponential),
    ] {
        let params = direction_params(4, 3, 31, direction);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let x = Tensor::<f64>::sample_uniform(&[6, 4], -1.0, 1.0, &mut rng).unwrap();
        let weights = Tensor::<f64>::sample_uniform(&[6, 4], -1.0, 1.0, &mut rng).unwrap();
        let opts = ScanOptions {
            mode: ScanMode::Sequential,
            discretization: rule,
        };
        let objective = |p: &SsmDirectionParams<Tensor<f64>>, x: &Tensor<f64>| -> f64 {
            let y = directional_scan_eager(x, p, opts).unwrap();
            y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };

        let mut g = Graph::new();
        let pv = params.map(|t| g.input(t, true));
        let xv = g.input(&x, true);
        let wv = g.input(&weights, false);
        let y = directional_scan(&mut g, &xv, &pv, opts).unwrap();
        let yw = g.mul(&y, &wv).unwrap();
        let loss = g.sum(yw);
        g.backward(loss).unwrap();

        let numeric_x = finite_difference_gradient(|t| Ok(objective(&params, t)), &x, 1e-6).unwrap();
        let analytic_x = g.grad(xv).unwrap();
        for (a, b) in analytic_x.data().iter().zip(numeric_x.data()) {
            assert!(relative_error(*a, *b, 1e-8) < 1e-5, "{direction} {rule} x: {a} vs {b}");
        }

        let mut names = Vec::new();
        params.visit(|name, _| names.push(name));
        let mut vars = Vec::new();
        pv.visit(|_, v| vars.push(*v));
        for (name, var) in names.into_iter().zip(vars) {
            let base = {
                let mut found = None;
                params.visit(|n, t| {
                    if n == name {
                        found = Some(t.clone());
                    }
                });
                found.unwrap()
            };
            let numeric = finite_difference_gradient(
                |t| {
                    let mut p = params.clone();
                    p.visit_mut(|n, slot| {
                        if n == name {
                            *slot = t.clone();
                        }
                    });
                    Ok(objective(&p, &x))
                },
                &base,
                1e-6,
            )
            .unwrap();
            let analytic = g.grad(var).unwrap_or_else(|| Tensor::zeros(base.shape()).unwrap());
            for (a, b) in analytic.data().iter().zip(numeric.data()) {
                assert!(relative_error(*a, *b, 1e-8) < 1e-5, "{direction} {rule} {name}: {a} vs {b}");
            }
        }
    }
}

fn arb_coefficients() -> impl Strategy<Value = ScanCoefficients<f64>> {
    (1usize..40, 1usize..5, 1usize..4, any::<u64>(), 0.1f64..1.0)
        .prop_map(|(len, e, n, seed, decay)| coefficients(len, e, n, seed, decay))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn combine_is_associative(
        a1 in -2.0f64..2.0, b1 in -2.0f64..2.0,
        a2 in -2.0f64..2.0, b2 in -2.0f64..2.0,
        a3 in -2.0f64..2.0, b3 in -2.0f64..2.0,
    ) {
        let (x, y, z) = ((a1, b1), (a2, b2), (a3, b3));
        let left = combine(combine(x, y), z);
        let right = combine(x, combine(y, z));
        prop_assert!((left.0 - right.0).abs() < 1e-12);
        prop_assert!((left.1 - right.1).abs() < 1e-12);
    }

    #[test]
    fn parallel_equals_sequential(coef in arb_coefficients()) {
        let s = selective_scan_sequential(&coef).unwrap();
        let p = selective_scan_parallel(&coef).unwrap();
        prop_assert!(close(s.data(), p.data(), 1e-12));
    }

    #[test]
    fn forward_scan_is_causal(coef in arb_coefficients(), cut in 0usize..40, seed in any::<u64>()) {
        let (len, e, n) = coef.dims();
        let cut = cut % len;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut altered = coef.clone();
        for t in [&mut altered.a_bar, &mut altered.b_bar_x] {
            let noise = Tensor::<f64>::sample_uniform(&[len, e, n], -1.0, 1.0, &mut rng).unwrap();
            for i in (cut + 1) * e * n..len * e * n {
                t.data_mut()[i] = noise.data()[i];
            }
        }
        for i in (cut + 1) * n..len * n {
            altered.c.data_mut()[i] = 3.0;
        }
        let y0 = selective_scan_sequential(&coef).unwrap();
        let y1 = selective_scan_sequential(&altered).unwrap();
        prop_assert_eq!(&y0.data()[..(cut + 1) * e], &y1.data()[..(cut + 1) * e]);
    }

    #[test]
    fn backward_scan_is_anticausal(len in 2usize..20, cut in 0usize..20, seed in any::<u64>()) {
        let cut = cut % len;
        let params = direction_params(3, 2, seed, Direction::Backward);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = Tensor::<f64>::sample_uniform(&[len, 3], -1.0, 1.0, &mut rng).unwrap();
        let mut altered = x.clone();
        for v in &mut altered.data_mut()[..cut * 3] {
            *v += 0.7;
        }
        let opts = ScanOptions::default();
        let y0 = directional_scan_eager(&x, &params, opts).unwrap();
        let y1 = directional_scan_eager(&altered, &params, opts).unwrap();
        prop_assert_eq!(&y0.data()[cut * 3..], &y1.data()[cut * 3..]);
    }

    #[test]
    fn scan_is_linear_in_the_input_term(
        coef in arb_coefficients(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0, seed in any::<u64>(),
    ) {
        let (len, e, n) = coef.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let other = Tensor::<f64>::sample_uniform(&[len, e, n], -1.0, 1.0, &mut rng).unwrap();
        let mixed: Vec<f64> = coef.b_bar_x.data().iter().zip(other.data()).map(|(p, q)| alpha * p + beta * q).collect();
        let with = |b: Tensor<f64>| {
            selective_scan_sequential(&ScanCoefficients::from_parts(coef.a_bar.clone(), b, coef.c.clone()).unwrap()).unwrap()
        };
        let y_mixed = with(Tensor::new(&[len, e, n], mixed).unwrap());
        let y1 = with(coef.b_bar_x.clone());
        let y2 = with(other);
        let expect: Vec<f64> = y1.data().iter().zip(y2.data()).map(|(p, q)| alpha * p + beta * q).collect();
        prop_assert!(close(y_mixed.data(), &expect, 1e-10));
    }

    #[test]
    fn bounded_inputs_give_bounded_states(len in 1usize..200, seed in any::<u64>()) {
        // |Ā| ≤ ρ < 1 and |B̄x| ≤ 1 bound each state by 1/(1−ρ).
        let rho = 0.9;
        let coef = coefficients(len, 2, 2, seed, rho);
        let y = selective_scan_sequential(&coef).unwrap();
        let bound = 2.0 / (1.0 - rho);
        prop_assert!(y.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn multiplicative_rule_scales_with_step(d1 in 1e-3f64..0.1, ratio in 1.0f64..10.0, a in -8.0f64..-0.5, b in -2.0f64..2.0) {
        let one = |d: f64| {
            discretize(
                &Tensor::full(&[1, 1], d).unwrap(),
                &Tensor::full(&[1, 1], a).unwrap(),
                &Tensor::full(&[1, 1], b).unwrap(),
            )
            .unwrap()
        };
        let (a1, b1) = one(d1);
        let (a2, b2) = one(d1 * ratio);
        prop_assert!((a2.data()[0] / a1.data()[0] - ratio).abs() < 1e-9);
        if b != 0.0 {
            prop_assert!((b2.data()[0] / b1.data()[0] - ratio).abs() < 1e-9);
        }
    }
}
