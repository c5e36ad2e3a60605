use super::*;
use crate::tensor::grad_check;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub(crate) fn random_params(rng: &mut ChaCha8Rng, d: usize, n: usize) -> SsmParams {
    SsmParams {
        a: uniform(rng, &[d, n], -2.0, -0.3),
        w_b: uniform(rng, &[d, n], -0.8, 0.8),
        w_c: uniform(rng, &[d, n], -0.8, 0.8),
        w_delta: uniform(rng, &[d, d], -0.5, 0.5),
        b_delta: uniform(rng, &[d], -1.0, 0.5),
        d_skip: uniform(rng, &[d], -1.0, 1.0),
    }
}

/// Straight-line f64 recurrence, one time step at a time.
pub(crate) fn oracle_scan(p: &SsmParams, x: &[f32], l: usize) -> Vec<f64> {
    let (d, n) = (p.channels(), p.state_dim());
    let mut h = vec![0.0f64; d * n];
    let mut y = vec![0.0f64; l * d];
    for t in 0..l {
        let xt = &x[t * d..(t + 1) * d];
        let (a_bar, bx) = discretize(p, xt).unwrap();
        let wc = p.w_c.data();
        let c: Vec<f64> = (0..n).map(|k| (0..d).map(|i| xt[i] as f64 * wc[i * n + k] as f64).sum()).collect();
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..n {
                h[j * n + k] = a_bar[j * n + k] * h[j * n + k] + bx[j * n + k];
                acc += c[k] * h[j * n + k];
            }
            y[t * d + j] = acc + p.d_skip.data()[j] as f64 * xt[j] as f64;
        }
    }
    y
}

fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max)
}

fn fixed(d: usize, n: usize, a: f32, wb: f32, wc: f32, bias: f32, dskip: f32) -> SsmParams {
    SsmParams {
        a: Tensor::full(&[d, n], a),
        w_b: Tensor::full(&[d, n], wb),
        w_c: Tensor::full(&[d, n], wc),
        w_delta: Tensor::zeros(&[d, d]),
        b_delta: Tensor::full(&[d], bias),
        d_skip: Tensor::full(&[d], dskip),
    }
}

#[test]
fn discretize_zero_step_limit() {
    let p = fixed(2, 3, -1.0, 0.7, 0.3, -60.0, 0.0);
    let (a_bar, bx) = discretize(&p, &[0.4, -1.2]).unwrap();
    assert!(a_bar.iter().all(|&v| (v - 1.0).abs() < 1e-20));
    assert!(bx.iter().all(|&v| v.abs() < 1e-20));
}

#[test]
fn discretize_with_zero_a() {
    // Δ = softplus(ln(e−1)) = 1 exactly, B(x) = Σx·w_b
    let p = fixed(2, 2, 0.0, 0.5, 0.0, (std::f32::consts::E - 1.0).ln(), 0.0);
    let x = [1.0, 2.0];
    let (a_bar, bx) = discretize(&p, &x).unwrap();
    assert!(a_bar.iter().all(|&v| v == 1.0));
    let delta = p.step_sizes(&x).unwrap();
    for j in 0..2 {
        for k in 0..2 {
            let expect = delta[j] * 1.5 * x[j] as f64;
            assert!((bx[j * 2 + k] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn discretize_matches_scalar_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_params(&mut rng, 3, 4);
    let x = [0.3f32, -0.7, 1.1];
    let (a_bar, _) = discretize(&p, &x).unwrap();
    let delta = p.step_sizes(&x).unwrap();
    for j in 0..3 {
        for k in 0..4 {
            let expect = (delta[j] * p.a.data()[j * 4 + k] as f64).exp();
            assert!((a_bar[j * 4 + k] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn discretize_rejects_non_finite_input() {
    let p = fixed(1, 1, -1.0, 1.0, 1.0, 0.0, 0.0);
    assert!(matches!(discretize(&p, &[f32::NAN]), Err(Error::Numerics(_))));
}

#[test]
fn zero_step_is_pure_skip() {
    let p = fixed(2, 3, -1.0, 0.9, 0.9, -60.0, 0.75);
    let x = Tensor::new(&[4, 2], vec![1.0, -2.0, 0.5, 3.0, -1.5, 2.5, 0.25, -0.75]).unwrap();
    let y = selective_scan(&p, &x).unwrap();
    for (yv, xv) in y.data().iter().zip(x.data()) {
        assert!((yv - 0.75 * xv).abs() < 1e-6);
    }
}

#[test]
fn degenerate_params_give_prefix_sum() {
    // Δ = 1, A = 0, B = C = 1, D = 0 on the raw kernel: h_t = h_{t−1} + x_t, y_t = h_t
    let x = Tensor::new(&[5, 1], vec![1.0, 2.0, -1.0, 0.5, 3.0]).unwrap();
    let ones = Tensor::full(&[5, 1], 1.0);
    let y = scan_with_steps(&x, &ones, &Tensor::zeros(&[1, 1]), &ones, &ones, &Tensor::zeros(&[1])).unwrap();
    assert_eq!(y.data(), &[1.0, 3.0, 2.0, 2.5, 5.5]);
}

#[test]
fn matches_sequential_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = random_params(&mut rng, 3, 4);
    let x: Vec<f32> = (0..21).map(|_| rng.random_range(-1.5..1.5)).collect();
    let y = selective_scan(&p, &Tensor::new(&[7, 3], x.clone()).unwrap()).unwrap();
    assert!(max_abs_diff(y.data(), &oracle_scan(&p, &x, 7)) < 1e-5);
}

#[test]
fn empty_sequence_and_bad_width_are_shape_errors() {
    let p = fixed(2, 2, -1.0, 1.0, 1.0, 0.0, 0.0);
    assert!(matches!(selective_scan(&p, &Tensor::zeros(&[3, 3])), Err(Error::Shape(_))));
    assert!(matches!(selective_scan(&p, &Tensor::zeros(&[6])), Err(Error::Shape(_))));
}

#[test]
fn scan_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_params(&mut rng, 2, 3);
    let x: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let full = selective_scan(&p, &Tensor::new(&[8, 2], x.clone()).unwrap()).unwrap();
    let mut cut = x.clone();
    cut[10..].iter_mut().for_each(|v| *v = 0.0);
    let part = selective_scan(&p, &Tensor::new(&[8, 2], cut).unwrap()).unwrap();
    assert_eq!(&full.data()[..10], &part.data()[..10]);
}

#[test]
fn scan_gradients_match_finite_differences() {
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let p = random_params(&mut rng, 3, 4);
        let x = uniform(&mut rng, &[6, 3], -1.0, 1.0);
        let w = uniform(&mut rng, &[6, 3], -1.0, 1.0);
        let objective = |p: &SsmParams, x: &Tensor| selective_scan(p, x)?.mul(&w)?.sum();

        let r = grad_check(|t| objective(&p, t), &x, 1e-3, 1e-3).unwrap();
        assert!(r.passed, "x: {r:?}");
        let r = grad_check(|t| objective(&SsmParams { a: t.clone(), ..p.clone() }, &x), &p.a, 1e-3, 1e-3).unwrap();
        assert!(r.passed, "A: {r:?}");
        let r = grad_check(|t| objective(&SsmParams { w_b: t.clone(), ..p.clone() }, &x), &p.w_b, 1e-3, 1e-3).unwrap();
        assert!(r.passed, "W_B: {r:?}");
        let r = grad_check(|t| objective(&SsmParams { w_c: t.clone(), ..p.clone() }, &x), &p.w_c, 1e-3, 1e-3).unwrap();
        assert!(r.passed, "W_C: {r:?}");
        let r =
            grad_check(|t| objective(&SsmParams { w_delta: t.clone(), ..p.clone() }, &x), &p.w_delta, 1e-3, 1e-3).unwrap();
        assert!(r.passed, "W_Δ: {r:?}");
        let r = grad_check(|t| objective(&SsmParams { d_skip: t.clone(), ..p.clone() }, &x), &p.d_skip, 1e-3, 1e-3).unwrap();
        assert!(r.passed, "D: {r:?}");
    }
}

#[test]
fn permutation_examples() {
    assert_eq!(direction_permutation(2, 2, ScanDirection::LeftRight), vec![0, 1, 2, 3]);
    assert_eq!(direction_permutation(2, 2, ScanDirection::RightLeft), vec![3, 2, 1, 0]);
    assert_eq!(direction_permutation(2, 2, ScanDirection::TopBottom), vec![0, 2, 1, 3]);
    assert_eq!(direction_permutation(2, 3, ScanDirection::TopBottom), vec![0, 3, 1, 4, 2, 5]);
    assert_eq!(direction_permutation(2, 3, ScanDirection::BottomTop), vec![5, 2, 4, 1, 3, 0]);
}

#[test]
fn token_prefixed_orders() {
    assert_eq!(sequence_order(1, 2, 1, ScanDirection::LeftRight), vec![0, 1, 2]);
    assert_eq!(sequence_order(1, 2, 1, ScanDirection::RightLeft), vec![2, 1, 0]);
    assert_eq!(sequence_order(2, 2, 0, ScanDirection::BottomTop), direction_permutation(2, 2, ScanDirection::BottomTop));
}

proptest! {
    #[test]
    fn permutations_are_bijections(h in 1usize..7, w in 1usize..7, k in 0usize..4) {
        let dir = ScanDirection::ALL[k];
        let p = direction_permutation(h, w, dir);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..h * w).collect::<Vec<_>>());
        let inv = invert_permutation(&p);
        for i in 0..h * w {
            prop_assert_eq!(p[inv[i]], i);
            prop_assert_eq!(inv[p[i]], i);
        }
    }
}

fn four(rng: &mut ChaCha8Rng, d: usize, n: usize) -> [SsmParams; 4] {
    std::array::from_fn(|_| random_params(rng, d, n))
}

/// Per-direction oracle: permute pixels, run the f64 recurrence, scatter back, sum.
pub(crate) fn oracle_ss2d(params: &[SsmParams; 4], f: &[f32], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; c * h * w];
    for (p, dir) in params.iter().zip(ScanDirection::ALL) {
        let perm = direction_permutation(h, w, dir);
        let seq: Vec<f32> = perm.iter().flat_map(|&g| (0..c).map(move |ch| f[ch * h * w + g])).collect();
        let y = oracle_scan(p, &seq, h * w);
        for (pos, &g) in perm.iter().enumerate() {
            for ch in 0..c {
                out[ch * h * w + g] += y[pos * c + ch];
            }
        }
    }
    out
}

#[test]
fn ss2d_matches_per_direction_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = four(&mut rng, 2, 3);
    let f: Vec<f32> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = ss2d(&params, &Tensor::new(&[2, 3, 3], f.clone()).unwrap()).unwrap();
    assert!(max_abs_diff(y.data(), &oracle_ss2d(&params, &f, 2, 3, 3)) < 1e-5);
}

#[test]
fn single_pixel_grid_is_four_single_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = random_params(&mut rng, 3, 2);
    let params = [p.clone(), p.clone(), p.clone(), p.clone()];
    let f = Tensor::new(&[3, 1, 1], vec![0.2, -0.4, 0.9]).unwrap();
    let y = ss2d(&params, &f).unwrap();
    let single = selective_scan(&p, &f.reshape(&[1, 3]).unwrap()).unwrap();
    for (a, b) in y.data().iter().zip(single.data()) {
        assert!((a - 4.0 * b).abs() < 1e-6);
    }
}

#[test]
fn lr_and_rl_branches_mirror_on_constant_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = random_params(&mut rng, 2, 3);
    let (h, w) = (3, 4);
    let f = Tensor::full(&[h * w, 2], 0.6);
    let run = |dir| {
        let order = sequence_order(h, w, 0, dir);
        let y = selective_scan(&p, &f.gather_rows(&order).unwrap()).unwrap();
        y.gather_rows(&invert_permutation(&order)).unwrap().data().to_vec()
    };
    let (lr, rl) = (run(ScanDirection::LeftRight), run(ScanDirection::RightLeft));
    let mirror = |g: usize| (h * w - 1) - g;
    for g in 0..h * w {
        for ch in 0..2 {
            assert_eq!(lr[g * 2 + ch], rl[mirror(g) * 2 + ch]);
        }
    }
    // the summed field is invariant under a 180° flip of the grid
    let sum: Vec<f32> = lr.iter().zip(&rl).map(|(a, b)| a + b).collect();
    for g in 0..h * w {
        for ch in 0..2 {
            assert!((sum[g * 2 + ch] - sum[mirror(g) * 2 + ch]).abs() < 1e-6);
        }
    }
}

#[test]
fn ss2d_has_global_receptive_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let params = four(&mut rng, 2, 3);
    let f: Vec<f32> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let base = ss2d(&params, &Tensor::new(&[2, 4, 4], f.clone()).unwrap()).unwrap();
    for px in 0..16 {
        let mut g = f.clone();
        g[px] += 1e-2;
        let moved = ss2d(&params, &Tensor::new(&[2, 4, 4], g).unwrap()).unwrap();
        for q in 0..16 {
            let resp: f32 = (0..2).map(|ch| (moved.data()[ch * 16 + q] - base.data()[ch * 16 + q]).abs()).sum();
            assert!(resp > 0.0, "pixel {px} does not reach {q}");
        }
    }
}

#[test]
fn ss2d_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let params = four(&mut rng, 2, 2);
    let f = uniform(&mut rng, &[2, 3, 3], -1.0, 1.0);
    let w = uniform(&mut rng, &[2, 3, 3], -1.0, 1.0);
    let r = grad_check(|t| ss2d(&params, t)?.mul(&w)?.sum(), &f, 1e-3, 1e-3).unwrap();
    assert!(r.passed, "{r:?}");
}
