//! Reference implementations that share no code path with the library.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

pub fn gaussian_vector(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// `A Aᵀ / n + shift·I`, exactly symmetric.
pub fn random_spd(n: usize, shift: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = gaussian_matrix(n, n, rng);
    let mut s = &a * a.transpose() / n as f64;
    for i in 0..n {
        s[(i, i)] += shift;
    }
    DMatrix::from_fn(n, n, |i, j| if i <= j { s[(i, j)] } else { s[(j, i)] })
}

pub fn max_rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

pub fn max_rel_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

/// Constrained least squares `min (y−μ)ᵀΣ⁻¹(y−μ)` s.t. `G y = b` through a
/// null-space parametrization `y = y₀ + Z c` from the SVD of `G`.
pub fn kkt_nullspace(mu: &DVector<f64>, sigma: &DMatrix<f64>, g: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = g.ncols();
    let t = g.nrows();
    // Full V from the SVD of Gᵀ G padded to square.
    let mut padded = DMatrix::zeros(n, n);
    padded.view_mut((0, 0), (t, n)).copy_from(g);
    let svd = padded.clone().svd(true, true);
    let v_t = svd.v_t.unwrap();
    let tol = svd.singular_values.max() * 1e-12;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    assert_eq!(rank, t, "oracle expects full row rank");
    // Particular solution via the pseudo-inverse.
    let y0 = g.clone().pseudo_inverse(1e-14).unwrap() * b;
    // Null-space basis: right singular vectors with zero singular value.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let z = DMatrix::from_fn(n, n - t, |r, c| v_t[(order[t + c], r)]);
    if n == t {
        return y0;
    }
    let prec = sigma.clone().lu().try_inverse().unwrap();
    let lhs = z.transpose() * &prec * &z;
    let rhs = z.transpose() * &prec * (mu - &y0);
    let c = lhs.lu().solve(&rhs).unwrap();
    y0 + z * c
}

/// Compensated dot product: roughly twice working precision.
pub fn dot2(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for (x, y) in a.zip(b) {
        let p = x * y;
        let pe = x.mul_add(y, -p);
        let t = s + p;
        let z = t - s;
        c += (s - (t - z)) + (p - z) + pe;
        s = t;
    }
    s + c
}

/// Information form: `A = I + s⁻²ΣGᵀG`, `μ̃ = A⁻¹(μ + s⁻²ΣGᵀb)`, `Σ̃ = A⁻¹Σ`.
///
/// `A` is badly conditioned for small `s`, so the LU solution is polished by
/// refinement with `G x − b` accumulated in compensated arithmetic.
pub fn information_form(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    g: &DMatrix<f64>,
    b: &DVector<f64>,
    s: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = mu.len();
    let s2 = s * s;
    let a = DMatrix::identity(n, n) + sigma * g.transpose() * g / s2;
    let lu = a.lu();
    let sgt = sigma * g.transpose() / s2;
    // Column j solves A x = μ + s⁻²ΣGᵀb (j = 0) or A x = Σ e_j.
    let solve = |rhs0: &DVector<f64>, base: &DVector<f64>, target: &DVector<f64>| {
        let mut x = lu.solve(rhs0).unwrap();
        for _ in 0..6 {
            let d = DVector::from_fn(g.nrows(), |r, _| {
                let row = g.row(r);
                dot2(row.iter().copied().chain([-1.0]), x.iter().copied().chain([target[r]]))
            });
            let r = base - &x - &sgt * d;
            x += lu.solve(&r).unwrap();
        }
        x
    };
    let mean = solve(&(mu + &sgt * b), mu, b);
    let zero = DVector::zeros(g.nrows());
    let mut cov = DMatrix::zeros(n, n);
    for j in 0..n {
        let col = sigma.column(j).into_owned();
        cov.set_column(j, &solve(&col, &col, &zero));
    }
    (mean, cov)
}

/// Composite trapezoid rule with `n` intervals.
pub fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = 0.5 * (f(a) + f(b));
    for i in 1..n {
        s += f(a + h * i as f64);
    }
    s * h
}

/// `vᵀ Σ⁻¹ v` via a dense inverse.
pub fn sigma_norm_sq(v: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let inv = sigma.clone().lu().try_inverse().unwrap();
    (v.transpose() * inv * v)[0]
}
