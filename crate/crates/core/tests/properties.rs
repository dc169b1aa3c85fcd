//! Randomized invariants for the Gaussian algebra and kernel: divergences
//! are nonnegative and vanish at equality, conditioning inverts joint
//! construction, kernel matrices admit (jittered) factorizations, and
//! Monte-Carlo estimates agree with the closed forms they estimate.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use congp_core::gaussian::{
    ar_join, build_chol, condition, kl_diag, kl_full, DiagGaussian, GaussianDist,
};
use congp_core::kernel::{eq_kernel, HyperParams};
use congp_core::{linalg, Real};

fn randn_vec(rng: &mut ChaCha20Rng, n: usize, scale: f64) -> Array1<Real> {
    Array1::from_shape_fn(n, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

fn randn_mat(rng: &mut ChaCha20Rng, r: usize, c: usize, scale: f64) -> Array2<Real> {
    Array2::from_shape_fn((r, c), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Random full-covariance Gaussian with a well-conditioned factor.
fn random_gaussian(rng: &mut ChaCha20Rng, n: usize) -> GaussianDist<Real> {
    let raw = randn_mat(rng, n, n, 1.0);
    let chol = build_chol(raw.view()).unwrap();
    GaussianDist::new(randn_vec(rng, n, 2.0), chol).unwrap()
}

fn random_diag(rng: &mut ChaCha20Rng, n: usize) -> DiagGaussian<Real> {
    DiagGaussian::new(randn_vec(rng, n, 2.0), randn_vec(rng, n, 0.7)).unwrap()
}

#[test]
fn kl_full_is_nonnegative_and_zero_at_equality() {
    let mut rng = ChaCha20Rng::seed_from_u64(100);
    for trial in 0..1000 {
        let n = rng.random_range(1..=6);
        let q = random_gaussian(&mut rng, n);
        let p = random_gaussian(&mut rng, n);
        let kl = kl_full(&q, &p).unwrap();
        assert!(kl >= -1e-10, "trial {trial}: kl_full = {kl} < 0");
        assert!(kl.is_finite());
        let self_kl = kl_full(&q, &q).unwrap();
        assert!(self_kl.abs() <= 1e-10, "trial {trial}: self KL = {self_kl}");
    }
}

#[test]
fn kl_diag_is_nonnegative_and_zero_at_equality() {
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    for trial in 0..1000 {
        let n = rng.random_range(1..=8);
        let q = random_diag(&mut rng, n);
        let p = random_diag(&mut rng, n);
        let kl = kl_diag(&q, &p).unwrap();
        assert!(kl >= -1e-10, "trial {trial}: kl_diag = {kl} < 0");
        let self_kl = kl_diag(&q, &q).unwrap();
        assert!(self_kl.abs() <= 1e-12, "trial {trial}: self KL = {self_kl}");
    }
}

#[test]
fn condition_inverts_ar_join_across_random_shapes() {
    let mut rng = ChaCha20Rng::seed_from_u64(102);
    for trial in 0..300 {
        let p = rng.random_range(1..=4);
        let m = rng.random_range(1..=4);
        let prev = random_gaussian(&mut rng, p);
        let coeffs = randn_mat(&mut rng, m, p, 1.0);
        let shift = randn_vec(&mut rng, m, 1.0);
        let cond_chol = build_chol(randn_mat(&mut rng, m, m, 1.0).view()).unwrap();

        let joint = ar_join(&prev, coeffs.view(), shift.view(), cond_chol.view()).unwrap();
        let c = condition(&joint, p).unwrap();

        let err = |a: &Array2<Real>, b: &Array2<Real>| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        assert!(
            err(&c.coeffs, &coeffs) <= 1e-10,
            "trial {trial}: coefficients drifted"
        );
        assert!(err(&c.cond_chol, &cond_chol) <= 1e-10, "trial {trial}");
        let shift_err = c
            .shift
            .iter()
            .zip(shift.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(shift_err <= 1e-10, "trial {trial}: shift drifted");
        // marginal of the first block is exactly prev
        assert!(
            err(&c.marginal.chol().to_owned(), &prev.chol().to_owned()) <= 1e-12,
            "trial {trial}"
        );
    }
}

#[test]
fn ar_join_covariance_matches_dense_block_formula() {
    let mut rng = ChaCha20Rng::seed_from_u64(103);
    for _ in 0..300 {
        let p = rng.random_range(1..=4);
        let m = rng.random_range(1..=4);
        let prev = random_gaussian(&mut rng, p);
        let a = randn_mat(&mut rng, m, p, 1.0);
        let shift = randn_vec(&mut rng, m, 1.0);
        let s = build_chol(randn_mat(&mut rng, m, m, 1.0).view()).unwrap();

        let joint = ar_join(&prev, a.view(), shift.view(), s.view()).unwrap();
        let got = joint.cov();

        let sp = prev.cov();
        let cross = sp.dot(&a.t());
        let lower_right = s.dot(&s.t()) + a.dot(&sp).dot(&a.t());
        for i in 0..p {
            for j in 0..p {
                assert!((got[(i, j)] - sp[(i, j)]).abs() <= 1e-10);
            }
            for j in 0..m {
                assert!((got[(i, p + j)] - cross[(i, j)]).abs() <= 1e-10);
                assert!((got[(p + j, i)] - cross[(i, j)]).abs() <= 1e-10);
            }
        }
        for i in 0..m {
            for j in 0..m {
                assert!((got[(p + i, p + j)] - lower_right[(i, j)]).abs() <= 1e-10);
            }
        }
        // joint mean: [μ_prev; A·μ_prev + shift]
        let mu2 = a.dot(&prev.mean()) + &shift;
        for i in 0..p {
            assert!((joint.mean()[i] - prev.mean()[i]).abs() <= 1e-12);
        }
        for i in 0..m {
            assert!((joint.mean()[p + i] - mu2[i]).abs() <= 1e-12);
        }
    }
}

#[test]
fn kernel_matrices_factor_with_bounded_jitter() {
    let mut rng = ChaCha20Rng::seed_from_u64(104);
    for trial in 0..200 {
        let n = rng.random_range(2..=30);
        let d = rng.random_range(1..=4);
        let mut x = randn_mat(&mut rng, n, d, 1.5);
        // occasionally duplicate a row to force a rank-deficient kernel
        if trial % 3 == 0 && n >= 2 {
            let src = x.row(0).to_owned();
            x.row_mut(1).assign(&src);
        }
        let hyper = HyperParams::new(
            randn_vec(&mut rng, d, 0.5),
            rng.random_range(-1.0..1.0),
        )
        .unwrap();
        let k = eq_kernel(&hyper, x.view(), x.view()).unwrap();
        let (l, eps) = linalg::jittered_cholesky(k.view(), "kernel matrix").unwrap();
        assert!(eps <= 1e-4 * hyper.scale() * 1.0000001);
        // reconstruction: L·Lᵀ = K + ε·I within a tight bound
        let recon = l.dot(&l.t());
        for i in 0..n {
            for j in 0..n {
                let target = k[(i, j)] + if i == j { eps } else { 0.0 };
                assert!(
                    (recon[(i, j)] - target).abs() <= 1e-9 * hyper.scale().max(1.0),
                    "trial {trial}: reconstruction off at ({i},{j})"
                );
            }
        }
    }
}

#[test]
fn sampling_moments_match_the_distribution() {
    let mut rng = ChaCha20Rng::seed_from_u64(105);
    let dist = random_gaussian(&mut rng, 3);
    let n_samples = 200_000;
    let mut mean_acc = Array1::<f64>::zeros(3);
    let mut cov_acc = Array2::<f64>::zeros((3, 3));
    for _ in 0..n_samples {
        let noise = randn_vec(&mut rng, 3, 1.0);
        let s = dist.sample_reparam(noise.view()).unwrap();
        mean_acc += &s;
        let d = &s - &dist.mean();
        for i in 0..3 {
            for j in 0..3 {
                cov_acc[(i, j)] += d[i] * d[j];
            }
        }
    }
    mean_acc /= n_samples as f64;
    cov_acc /= n_samples as f64;
    let cov = dist.cov();
    // 3·SE bounds for the sample mean: SE_i = σ_i/√N
    for i in 0..3 {
        let se = cov[(i, i)].sqrt() / (n_samples as f64).sqrt();
        assert!(
            (mean_acc[i] - dist.mean()[i]).abs() <= 3.0 * se + 1e-12,
            "mean coordinate {i} outside 3 standard errors"
        );
    }
    // covariance entries: Var[d_i d_j] = σ_ii σ_jj + σ_ij² for Gaussians
    for i in 0..3 {
        for j in 0..3 {
            let var = cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2);
            let se = (var / n_samples as f64).sqrt();
            assert!(
                (cov_acc[(i, j)] - cov[(i, j)]).abs() <= 4.0 * se,
                "covariance entry ({i},{j}) outside tolerance"
            );
        }
    }
}

#[test]
fn monte_carlo_log_density_ratio_recovers_kl() {
    let mut rng = ChaCha20Rng::seed_from_u64(106);
    for _ in 0..5 {
        let n = rng.random_range(1..=4);
        let q = random_gaussian(&mut rng, n);
        let p = random_gaussian(&mut rng, n);
        let exact = kl_full(&q, &p).unwrap();

        let samples = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..samples {
            let x = q.sample_reparam(randn_vec(&mut rng, n, 1.0).view()).unwrap();
            let r = q.log_pdf(x.view()) - p.log_pdf(x.view());
            sum += r;
            sumsq += r * r;
        }
        let mc = sum / samples as f64;
        let var = (sumsq / samples as f64 - mc * mc).max(0.0);
        let se = (var / samples as f64).sqrt();
        assert!(
            (mc - exact).abs() <= 3.0 * se + 1e-9,
            "MC {mc} vs exact {exact} (se {se})"
        );
    }
}

#[test]
fn conditional_factorization_reproduces_joint_density() {
    // ln joint(x) = ln marginal(x₁) + ln N(x₂; A·x₁ + shift, C·Cᵀ) pointwise.
    let mut rng = ChaCha20Rng::seed_from_u64(107);
    for _ in 0..200 {
        let n = rng.random_range(2..=6);
        let k = rng.random_range(1..n);
        let joint = random_gaussian(&mut rng, n);
        let c = condition(&joint, k).unwrap();
        let x = randn_vec(&mut rng, n, 1.5);
        let x1 = x.slice(ndarray::s![..k]).to_owned();
        let x2 = x.slice(ndarray::s![k..]).to_owned();
        let cond_mean = c.coeffs.dot(&x1) + &c.shift;
        let cond = GaussianDist::new(cond_mean, c.cond_chol.clone()).unwrap();
        let lhs = joint.log_pdf(x.view());
        let rhs = c.marginal.log_pdf(x1.view()) + cond.log_pdf(x2.view());
        assert!((lhs - rhs).abs() <= 1e-9, "{lhs} vs {rhs}");
    }
}
