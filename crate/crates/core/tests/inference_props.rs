mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use probconserv::harness::generate_context;
use probconserv::inference::*;
use probconserv::pde::{PdeFamily, PdeInstance};
use probconserv::quadrature::Grid;
use probconserv::Error;
use proptest::prelude::*;
use rand::Rng;

fn random_context(seed: u64, n: usize) -> ContextSet {
    let mut r = rng(seed);
    let pts = (0..n)
        .map(|_| ContextPoint { t: r.random_range(0.0..1.0), x: r.random_range(0.0..1.0), u: r.random_range(-2.0..2.0) })
        .collect();
    ContextSet::new(pts, 0.0).unwrap()
}

fn kernel(lt: f64, lx: f64, noise: f64) -> KernelConfig {
    KernelConfig { lengthscale_t: lt, lengthscale_x: lx, signal_variance: 1.0, noise_variance: noise, predictive_noise: false }
}

/// Draw values at random inputs from a zero-mean GP with the given kernel.
fn sample_gp(k: &KernelConfig, n: usize, seed: u64) -> ContextSet {
    let mut r = rng(seed);
    let xs: Vec<(f64, f64)> = (0..n).map(|_| (r.random_range(0.0..1.0), r.random_range(0.0..1.0))).collect();
    let mut c = DMatrix::from_fn(n, n, |i, j| k.eval(xs[i], xs[j]));
    for i in 0..n {
        c[(i, i)] += k.noise_variance + 1e-10;
    }
    let l = c.cholesky().unwrap().unpack();
    let y = l * gaussian_vector(n, &mut r);
    let pts = xs.iter().zip(y.iter()).map(|(&(t, x), &u)| ContextPoint { t, x, u }).collect();
    ContextSet::new(pts, 0.0).unwrap()
}

fn unit_grid() -> Grid {
    Grid::uniform((0.0, 1.0), 5, (0.0, 1.0), 9).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn posterior_variance_below_prior_and_psd(seed in any::<u64>(), n in 1usize..30, lt in 0.05f64..2.0, lx in 0.05f64..2.0, noise in 0.0f64..0.1) {
        let k = kernel(lt, lx, noise);
        let grid = unit_grid();
        let post = gp_fit_predict(&random_context(seed, n), &grid, &k).unwrap();
        let prior = gp_prior(&grid, &k).unwrap();
        let (pv, qv) = (post.variances(), prior.variances());
        for i in 0..grid.len() {
            prop_assert!(pv[i] <= qv[i] + 1e-10);
        }
        prop_assert!(post.min_relative_eigenvalue() >= -1e-10);
        let diag = gp_fit_predict_diagonal(&random_context(seed, n), &grid, &k).unwrap();
        prop_assert!((diag.mean() - post.mean()).amax() < 1e-12);
        prop_assert!((diag.variances() - pv).amax() < 1e-12);
    }

    #[test]
    fn ensemble_symmetries(seed in any::<u64>(), k in 2usize..8, c in -3.0f64..3.0) {
        let grid = Grid::uniform((0.0, 1.0), 2, (0.0, 1.0), 3).unwrap();
        let mut r = rng(seed);
        let samples: Vec<DVector<f64>> = (0..k).map(|_| gaussian_vector(6, &mut r)).collect();
        let f = ensemble_to_field(&samples, &grid).unwrap();
        let mut rev = samples.clone();
        rev.reverse();
        rev.rotate_left(1);
        let g = ensemble_to_field(&rev, &grid).unwrap();
        prop_assert!((f.mean() - g.mean()).amax() < 1e-14);
        prop_assert!((f.variances() - g.variances()).amax() < 1e-13);
        let scaled: Vec<_> = samples.iter().map(|s| s * c).collect();
        let h = ensemble_to_field(&scaled, &grid).unwrap();
        prop_assert!((h.mean() - f.mean() * c).amax() < 1e-13);
        prop_assert!((h.variances() - f.variances() * (c * c)).amax() < 1e-12 * (1.0 + c * c));
    }
}

#[test]
fn ensemble_examples() {
    let grid = Grid::uniform((0.0, 1.0), 1, (0.0, 1.0), 3).unwrap();
    let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    let f = ensemble_to_field(&[v.clone(), v.clone()], &grid).unwrap();
    assert_eq!(f.mean(), &v);
    assert_eq!(f.variances(), DVector::zeros(3));
    let f = ensemble_to_field(&[DVector::zeros(3), DVector::from_element(3, 2.0)], &grid).unwrap();
    assert_eq!(f.mean(), &DVector::from_element(3, 1.0));
    assert_eq!(f.variances(), DVector::from_element(3, 2.0));
    assert!(matches!(ensemble_to_field(&[v], &grid), Err(Error::InsufficientData(_))));
}

#[test]
fn single_point_is_interpolated() {
    let ctx = ContextSet::new(vec![ContextPoint { t: 0.5, x: 0.25, u: 1.7 }], 0.0).unwrap();
    let grid = Grid::new(vec![0.5], vec![0.0, 0.25, 1.0]).unwrap();
    let f = gp_fit_predict(&ctx, &grid, &kernel(0.3, 0.3, 1e-14)).unwrap();
    assert!((f.mean()[1] - 1.7).abs() < 1e-8);
}

#[test]
fn recovers_known_lengthscale() {
    let truth = kernel(0.3, 0.3, 1e-4);
    let ctx = sample_gp(&truth, 200, 11);
    let fit = fit_hyperparameters(&ctx, &SearchConfig::default()).unwrap();
    for l in [fit.lengthscale_t, fit.lengthscale_x] {
        assert!((0.15..=0.6).contains(&l), "{fit:?}");
    }
}

#[test]
fn signal_variance_scales_with_data() {
    let ctx = sample_gp(&kernel(0.3, 0.3, 1e-4), 120, 12);
    let scaled = ContextSet::new(
        ctx.points().iter().map(|p| ContextPoint { u: p.u * 2f64.sqrt(), ..*p }).collect(),
        0.0,
    )
    .unwrap();
    let a = fit_hyperparameters(&ctx, &SearchConfig::default()).unwrap();
    let b = fit_hyperparameters(&scaled, &SearchConfig::default()).unwrap();
    let ratio = b.signal_variance / a.signal_variance;
    assert!((ratio - 2.0).abs() <= 0.4, "ratio {ratio}");
}

#[test]
fn smooth_noise_free_data_fits_tiny_noise() {
    let p = PdeInstance::with_default_horizon(PdeFamily::Diffusion, 3.0).unwrap();
    let ctx = generate_context(&p, 100, 3).unwrap();
    let fit = fit_hyperparameters(&ctx, &SearchConfig::default()).unwrap();
    assert!(fit.noise_variance <= 1e-3 * fit.signal_variance, "{fit:?}");
}

#[test]
fn fit_is_reproducible_and_rejects_degenerate_inputs() {
    let ctx = random_context(4, 20);
    let s = SearchConfig { seed: 9, ..SearchConfig::default() };
    assert_eq!(fit_hyperparameters(&ctx, &s).unwrap(), fit_hyperparameters(&ctx, &s).unwrap());
    let same = ContextSet::new(vec![ContextPoint { t: 0.1, x: 0.1, u: 1.0 }; 6], 0.0).unwrap();
    assert!(matches!(fit_hyperparameters(&same, &s), Err(Error::Fit(_))));
    assert!(matches!(fit_hyperparameters(&ctx.truncated(4), &s), Err(Error::InsufficientData(_))));
}

#[test]
fn nested_contexts_tighten_the_fit() {
    let p = PdeInstance::with_default_horizon(PdeFamily::Diffusion, 2.0).unwrap();
    let full = generate_context(&p, 160, 21).unwrap();
    let k = fit_hyperparameters(&full, &SearchConfig::default()).unwrap();
    let grid = Grid::for_instance(&p, 6, 41).unwrap();
    let exact = grid.evaluate(|t, x| p.eval_exact(t, x)).unwrap();
    let mut prev = f64::INFINITY;
    for n in [20, 40, 80, 160] {
        let f = gp_fit_predict(&full.truncated(n), &grid, &k).unwrap();
        let err = (f.mean() - &exact).amax();
        assert!(err <= prev + 1e-9, "n = {n}: {err} > {prev}");
        prev = err;
    }
}

#[test]
fn empty_context_needs_prior_mode() {
    let ctx = ContextSet::new(vec![], 0.0).unwrap();
    let grid = unit_grid();
    assert!(matches!(gp_fit_predict(&ctx, &grid, &KernelConfig::default()), Err(Error::InsufficientData(_))));
    let prior = gp_prior(&grid, &KernelConfig::default()).unwrap();
    assert_eq!(prior.mean(), &DVector::zeros(grid.len()));
}
