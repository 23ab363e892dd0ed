//! Gaussian-process surrogates: constant mean, Matérn-5/2 ARD kernel,
//! homoscedastic Gaussian noise, hyperparameters fit by maximizing the log
//! marginal likelihood.
//!
//! Targets are standardized before fitting; every hyperparameter except the
//! mean lives in log space during optimization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::minimize_box;

const SQRT5: f64 = 2.236_067_977_499_79;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub const NOISE_FLOOR: f64 = 1e-6;
pub const LENGTH_SCALE_BOUNDS: (f64, f64) = (1e-3, 1e3);
const SIGNAL_BOUNDS: (f64, f64) = (1e-4, 1e4);
const NOISE_CEIL: f64 = 10.0;
const MEAN_BOUND: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub mean: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub length_scales: Vec<f64>,
}

impl GpHyperparams {
    /// Starting point of the first restart.
    pub fn initial(dim: usize) -> Self {
        Self {
            mean: 0.0,
            signal_variance: 1.0,
            noise_variance: 1e-2,
            length_scales: vec![0.5 * (dim as f64).sqrt(); dim],
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(l) = self.length_scales.iter().find(|l| !(**l > 0.0)) {
            return Err(Error::Domain(format!("length scale {l} must be positive")));
        }
        if !(self.signal_variance > 0.0) {
            return Err(Error::Domain("signal variance must be positive".into()));
        }
        if !(self.noise_variance >= 0.0) {
            return Err(Error::Domain("noise variance must be non-negative".into()));
        }
        Ok(())
    }

    fn to_params(&self) -> Vec<f64> {
        let mut p = vec![
            self.mean,
            self.signal_variance.ln(),
            self.noise_variance.ln(),
        ];
        p.extend(self.length_scales.iter().map(|l| l.ln()));
        p
    }

    fn from_params(p: &[f64]) -> Self {
        Self {
            mean: p[0],
            signal_variance: p[1].exp(),
            noise_variance: p[2].exp(),
            length_scales: p[3..].iter().map(|v| v.exp()).collect(),
        }
    }
}

#[inline]
fn scaled_distance(x: &[f64], x2: &[f64], ls: &[f64]) -> f64 {
    x.iter()
        .zip(x2)
        .zip(ls)
        .map(|((a, b), l)| {
            let u = (a - b) / l;
            u * u
        })
        .sum::<f64>()
        .sqrt()
}

#[inline]
fn matern_unit(r: f64) -> f64 {
    let s = SQRT5 * r;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// `σ_f² (1 + √5 r + 5r²/3) exp(−√5 r)` with ARD-scaled distance `r`.
pub fn matern52_ard(x: &[f64], x2: &[f64], hyper: &GpHyperparams) -> Result<f64> {
    if x.len() != x2.len() || x.len() != hyper.length_scales.len() {
        return Err(Error::Arity(format!(
            "kernel inputs of dimension {} and {} with {} length scales",
            x.len(),
            x2.len(),
            hyper.length_scales.len()
        )));
    }
    hyper.validate()?;
    Ok(hyper.signal_variance * matern_unit(scaled_distance(x, x2, &hyper.length_scales)))
}

/// Kernel matrix between two point sets (noise not included).
pub fn gram(a: &[Vec<f64>], b: &[Vec<f64>], hyper: &GpHyperparams) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        hyper.signal_variance * matern_unit(scaled_distance(&a[i], &b[j], &hyper.length_scales))
    })
}

fn cholesky_with_jitter(mut k: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let n = k.nrows();
    let mut jitter = 0.0;
    for _ in 0..6 {
        if let Some(c) = Cholesky::new(k.clone()) {
            return Some(c);
        }
        let add = if jitter == 0.0 { 1e-10 } else { jitter * 9.0 };
        for i in 0..n {
            k[(i, i)] += add;
        }
        jitter += add;
    }
    None
}

struct Factorized {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    mll: f64,
}

fn factorize(
    x: &[Vec<f64>],
    y: &DVector<f64>,
    hyper: &GpHyperparams,
) -> Option<(Factorized, DMatrix<f64>)> {
    let n = x.len();
    let kf = gram(x, x, hyper);
    let mut k = kf.clone();
    for i in 0..n {
        k[(i, i)] += hyper.noise_variance;
    }
    let chol = Cholesky::new(k)?;
    let r = y.map(|v| v - hyper.mean);
    let alpha = chol.solve(&r);
    let log_det: f64 = chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|v| v.ln())
        .sum::<f64>()
        * 2.0;
    let mll = -0.5 * r.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * LN_2PI;
    Some((Factorized { chol, alpha, mll }, kf))
}

/// Log marginal likelihood of standardized targets `y` under `hyper`.
pub fn log_marginal_likelihood(x: &[Vec<f64>], y: &[f64], hyper: &GpHyperparams) -> Result<f64> {
    hyper.validate()?;
    let y = DVector::from_column_slice(y);
    factorize(x, &y, hyper)
        .map(|(f, _)| f.mll)
        .ok_or_else(|| Error::Numerical("kernel matrix is not positive definite".into()))
}

/// Log marginal likelihood and its gradient with respect to
/// `[mean, ln σ_f², ln σ_n², ln ℓ_1, …, ln ℓ_D]`.
pub fn log_marginal_likelihood_grad(
    x: &[Vec<f64>],
    y: &[f64],
    hyper: &GpHyperparams,
) -> Option<(f64, Vec<f64>)> {
    let n = x.len();
    let dim = hyper.length_scales.len();
    let y = DVector::from_column_slice(y);
    let (fact, kf) = factorize(x, &y, hyper)?;
    let k_inv = fact.chol.inverse();
    // W = ααᵀ − K⁻¹; dMLL/dθ = ½ tr(W ∂K/∂θ)
    let w = &fact.alpha * fact.alpha.transpose() - &k_inv;

    let mut grad = vec![0.0; 3 + dim];
    grad[0] = fact.alpha.sum();
    grad[1] = 0.5 * w.component_mul(&kf).sum();
    grad[2] = 0.5 * hyper.noise_variance * w.trace();
    let inv_ls2: Vec<f64> = hyper.length_scales.iter().map(|l| 1.0 / (l * l)).collect();
    for i in 0..n {
        for j in 0..i {
            let r = scaled_distance(&x[i], &x[j], &hyper.length_scales);
            let s = SQRT5 * r;
            // ∂k/∂ln ℓ_d = σ_f² (5/3)(1 + √5 r) e^{−√5 r} (Δ_d/ℓ_d)²
            let common = hyper.signal_variance * (5.0 / 3.0) * (1.0 + s) * (-s).exp();
            let wij = w[(i, j)]; // symmetric: counts twice, cancels the ½
            for d in 0..dim {
                let delta = x[i][d] - x[j][d];
                grad[3 + d] += wij * common * delta * delta * inv_ls2[d];
            }
        }
    }
    Some((fact.mll, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpFitOptions {
    pub restarts: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for GpFitOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iterations: 200,
            seed: 0,
        }
    }
}

/// A fitted surrogate for one objective.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub hyper: GpHyperparams,
    pub train_x: Vec<Vec<f64>>,
    /// Standardized targets.
    pub train_y: Vec<f64>,
    pub y_shift: f64,
    pub y_scale: f64,
    pub mll: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn standardize(y: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = if var.sqrt() > 1e-12 * mean.abs().max(1.0) {
        var.sqrt()
    } else {
        1.0
    };
    (y.iter().map(|v| (v - mean) / scale).collect(), mean, scale)
}

fn check_training_data(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.len() < 2 {
        return Err(Error::Arity(format!(
            "need at least 2 training points, got {}",
            x.len()
        )));
    }
    if x.len() != y.len() {
        return Err(Error::Arity(format!(
            "{} inputs but {} targets",
            x.len(),
            y.len()
        )));
    }
    let dim = x[0].len();
    if dim == 0 || x.iter().any(|r| r.len() != dim) {
        return Err(Error::Arity(
            "training inputs must share a non-zero dimension".into(),
        ));
    }
    if let Some(v) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("training target {v} is not finite")));
    }
    Ok(dim)
}

impl GpModel {
    /// Conditions a GP with fixed hyperparameters on `(x, y)`; `y` is in
    /// original units and is standardized internally.
    pub fn with_hyperparams(x: &[Vec<f64>], y: &[f64], hyper: GpHyperparams) -> Result<Self> {
        check_training_data(x, y)?;
        hyper.validate()?;
        let (ys, shift, scale) = standardize(y);
        Self::condition(x, ys, shift, scale, hyper)
    }

    fn condition(
        x: &[Vec<f64>],
        ys: Vec<f64>,
        y_shift: f64,
        y_scale: f64,
        hyper: GpHyperparams,
    ) -> Result<Self> {
        let yv = DVector::from_column_slice(&ys);
        let mut k = gram(x, x, &hyper);
        for i in 0..x.len() {
            k[(i, i)] += hyper.noise_variance;
        }
        let chol = cholesky_with_jitter(k).ok_or_else(|| {
            Error::Numerical("training covariance is not positive definite".into())
        })?;
        let r = yv.map(|v| v - hyper.mean);
        let alpha = chol.solve(&r);
        let log_det: f64 = chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|v| v.ln())
            .sum::<f64>()
            * 2.0;
        let mll = -0.5 * r.dot(&alpha) - 0.5 * log_det - 0.5 * x.len() as f64 * LN_2PI;
        Ok(Self {
            hyper,
            train_x: x.to_vec(),
            train_y: ys,
            y_shift,
            y_scale,
            mll,
            chol,
            alpha,
        })
    }

    pub fn dim(&self) -> usize {
        self.hyper.length_scales.len()
    }

    /// Lower Cholesky factor of `K + σ_n² I` (standardized units).
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    fn check_queries(&self, xq: &[Vec<f64>]) -> Result<()> {
        if let Some(r) = xq.iter().find(|r| r.len() != self.dim()) {
            return Err(Error::Arity(format!(
                "query of dimension {} for a {}-dimensional model",
                r.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Latent posterior mean and covariance in original units, without the
    /// symmetrization/clamping pass of [`GpModel::posterior`].
    pub fn posterior_raw(&self, xq: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.check_queries(xq)?;
        let ks = gram(xq, &self.train_x, &self.hyper);
        let kss = gram(xq, xq, &self.hyper);
        let mean_std = &ks * &self.alpha;
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks.transpose())
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        let cov_std = kss - v.transpose() * v;
        let s2 = self.y_scale * self.y_scale;
        let mean = mean_std
            .iter()
            .map(|m| self.y_shift + self.y_scale * (m + self.hyper.mean))
            .collect();
        Ok((mean, cov_std * s2))
    }

    /// Joint latent posterior at `xq`: mean vector and a symmetric positive
    /// semidefinite covariance (eigenvalues clamped at zero).
    pub fn posterior(&self, xq: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let (mean, cov) = self.posterior_raw(xq)?;
        let sym = (&cov + cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let clamped = eig.eigenvalues.map(|v| v.max(0.0));
        let cov =
            &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok((mean, cov))
    }

    /// Posterior mean and variance at a single point.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let (m, c) = self.posterior_raw(&[x.to_vec()])?;
        Ok((m[0], c[(0, 0)].max(0.0)))
    }
}

fn param_bounds(dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![-MEAN_BOUND, SIGNAL_BOUNDS.0.ln(), NOISE_FLOOR.ln()];
    let mut hi = vec![MEAN_BOUND, SIGNAL_BOUNDS.1.ln(), NOISE_CEIL.ln()];
    lo.extend(std::iter::repeat_n(LENGTH_SCALE_BOUNDS.0.ln(), dim));
    hi.extend(std::iter::repeat_n(LENGTH_SCALE_BOUNDS.1.ln(), dim));
    (lo, hi)
}

fn random_start(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut p = vec![
        rng.gen_range(-0.5..0.5),
        rng.gen_range(0.1f64.ln()..10f64.ln()),
        rng.gen_range(1e-5f64.ln()..0.3f64.ln()),
    ];
    p.extend((0..dim).map(|_| rng.gen_range(0.05f64.ln()..3f64.ln())));
    p
}

/// Fits hyperparameters by multi-start quasi-Newton ascent of the marginal
/// likelihood. The first start is [`GpHyperparams::initial`], so the result
/// never scores below it.
pub fn fit_gp(x: &[Vec<f64>], y: &[f64]) -> Result<GpModel> {
    fit_gp_with(x, y, &GpFitOptions::default())
}

pub fn fit_gp_with(x: &[Vec<f64>], y: &[f64], opts: &GpFitOptions) -> Result<GpModel> {
    let dim = check_training_data(x, y)?;
    let (ys, shift, scale) = standardize(y);
    let (lo, hi) = param_bounds(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6770_5f66_6974);

    let neg_mll = |p: &[f64]| -> (f64, Vec<f64>) {
        match log_marginal_likelihood_grad(x, &ys, &GpHyperparams::from_params(p)) {
            Some((v, g)) if v.is_finite() => (-v, g.into_iter().map(|v| -v).collect()),
            _ => (f64::INFINITY, vec![0.0; p.len()]),
        }
    };

    let init = GpHyperparams::initial(dim).to_params();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for r in 0..opts.restarts.max(1) {
        let start = if r == 0 {
            init.clone()
        } else {
            random_start(dim, &mut rng)
        };
        let res = minimize_box(neg_mll, &start, &lo, &hi, opts.max_iterations);
        if res.value.is_finite() && best.as_ref().is_none_or(|(v, _)| res.value < *v) {
            best = Some((res.value, res.x));
        }
    }
    let params = best.map(|(_, p)| p).unwrap_or(init);
    GpModel::condition(x, ys, shift, scale, GpHyperparams::from_params(&params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn hyper(dim: usize, ls: f64, noise: f64) -> GpHyperparams {
        GpHyperparams {
            mean: 0.0,
            signal_variance: 1.0,
            noise_variance: noise,
            length_scales: vec![ls; dim],
        }
    }

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen()).collect())
            .collect()
    }

    #[test]
    fn kernel_values() {
        let h = hyper(1, 1.0, 0.0);
        assert_eq!(matern52_ard(&[0.3], &[0.3], &h).unwrap(), 1.0);
        // independent evaluation of the closed form at d = 1
        let expected = (1.0 + 5f64.sqrt() + 5.0 / 3.0) * (-(5f64.sqrt())).exp();
        let v = matern52_ard(&[0.0], &[1.0], &h).unwrap();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.5240).abs() < 5e-5);
        let mut last = v;
        for d in [2.0, 4.0, 8.0, 16.0, 64.0] {
            let k = matern52_ard(&[0.0], &[d], &h).unwrap();
            assert!(k < last);
            last = k;
        }
        assert!(last < 1e-50);
        let mut bad = h.clone();
        bad.length_scales[0] = 0.0;
        assert!(matches!(
            matern52_ard(&[0.0], &[1.0], &bad),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn gram_is_psd() {
        for seed in 0..10 {
            let x = random_points(20, 3, seed);
            for ls in [0.01, 0.3, 2.0, 50.0] {
                let k = gram(&x, &x, &hyper(3, ls, 0.0));
                let min_eig = SymmetricEigen::new(k).eigenvalues.min();
                assert!(min_eig >= -1e-8, "min eigenvalue {min_eig} at ls {ls}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let x = random_points(12, 3, seed);
            let y: Vec<f64> = x.iter().map(|r| (3.0 * r[0]).sin() + r[1] * r[2]).collect();
            let (ys, _, _) = standardize(&y);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let p = random_start(3, &mut rng);
            let (_, g) =
                log_marginal_likelihood_grad(&x, &ys, &GpHyperparams::from_params(&p)).unwrap();
            for i in 0..p.len() {
                let h = 1e-5;
                let mut up = p.clone();
                up[i] += h;
                let mut dn = p.clone();
                dn[i] -= h;
                let fu =
                    log_marginal_likelihood(&x, &ys, &GpHyperparams::from_params(&up)).unwrap();
                let fd =
                    log_marginal_likelihood(&x, &ys, &GpHyperparams::from_params(&dn)).unwrap();
                let fdiff = (fu - fd) / (2.0 * h);
                assert!(
                    (fdiff - g[i]).abs() <= 1e-4 * fdiff.abs().max(1.0),
                    "param {i}: analytic {} vs numeric {fdiff}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn fit_improves_on_initialization() {
        for seed in 0..4 {
            let x = random_points(10, 2, seed);
            let y: Vec<f64> = x.iter().map(|r| (4.0 * r[0]).cos() - 2.0 * r[1]).collect();
            let model = fit_gp(&x, &y).unwrap();
            let init =
                log_marginal_likelihood(&x, &model.train_y, &GpHyperparams::initial(2)).unwrap();
            assert!(model.mll >= init - 1e-9, "{} < {init}", model.mll);
            let b = &model.hyper;
            assert!(b.noise_variance >= NOISE_FLOOR * (1.0 - 1e-12));
            assert!(b.length_scales.iter().all(|l| (1e-3..=1e3).contains(l)));
        }
    }

    #[test]
    fn constant_targets() {
        let x = random_points(6, 2, 3);
        let y = vec![2.5; 6];
        let model = fit_gp(&x, &y).unwrap();
        let (m, v) = model.predict(&[0.4, 0.6]).unwrap();
        assert!((m - 2.5).abs() < 1e-3, "mean {m}");
        for xi in &x {
            let (_, vt) = model.predict(xi).unwrap();
            assert!(vt < 1e-2, "variance {vt}");
        }
        assert!(v.is_finite());
    }

    #[test]
    fn interpolates_at_noise_floor() {
        let x = random_points(8, 2, 11);
        let y: Vec<f64> = x.iter().map(|r| r[0] * 3.0 - r[1]).collect();
        let model = GpModel::with_hyperparams(&x, &y, hyper(2, 0.4, NOISE_FLOOR)).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            let (m, _) = model.predict(xi).unwrap();
            assert!((m - yi).abs() < 1e-3, "{m} vs {yi}");
        }
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let x = random_points(8, 2, 12);
        let y: Vec<f64> = x.iter().map(|r| r[0] + r[1]).collect();
        let mut h = hyper(2, 0.2, 1e-4);
        h.mean = 0.3;
        let model = GpModel::with_hyperparams(&x, &y, h).unwrap();
        let (m, v) = model.predict(&[500.0, -500.0]).unwrap();
        let prior_mean = model.y_shift + model.y_scale * 0.3;
        assert!((m - prior_mean).abs() < 1e-9);
        assert!((v - model.y_scale * model.y_scale).abs() < 1e-9);
    }

    #[test]
    fn identical_queries_are_perfectly_correlated() {
        let x = random_points(8, 2, 13);
        let y: Vec<f64> = x.iter().map(|r| r[0] * r[1]).collect();
        let model = fit_gp(&x, &y).unwrap();
        let q = vec![0.37, 0.61];
        let (_, cov) = model.posterior(&[q.clone(), q]).unwrap();
        assert!((cov[(0, 1)] - cov[(0, 0)]).abs() < 1e-6);
        assert!((cov[(1, 0)] - cov[(1, 1)]).abs() < 1e-6);
    }

    #[test]
    fn arity_errors() {
        assert!(matches!(fit_gp(&[vec![0.1]], &[1.0]), Err(Error::Arity(_))));
        let model = fit_gp(&[vec![0.1], vec![0.9]], &[1.0, 2.0]).unwrap();
        assert!(matches!(
            model.posterior(&[vec![0.1, 0.2]]),
            Err(Error::Arity(_))
        ));
    }

    #[test]
    fn duplicate_rows_are_handled_by_the_noise_floor() {
        let x = vec![
            vec![0.5, 0.5],
            vec![0.5, 0.5],
            vec![0.1, 0.9],
            vec![0.9, 0.1],
        ];
        let y = vec![1.0, 1.0, 0.0, 2.0];
        let model = GpModel::with_hyperparams(&x, &y, hyper(2, 0.5, NOISE_FLOOR)).unwrap();
        assert!(model.predict(&[0.5, 0.5]).unwrap().0.is_finite());
        fit_gp(&x, &y).unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn posterior_variance_below_prior(seed in 0u64..1000, ls in 0.05f64..2.0, noise in 1e-6f64..0.1) {
            let x = random_points(10, 2, seed);
            let y: Vec<f64> = x.iter().map(|r| (5.0 * r[0]).sin() + r[1]).collect();
            let model = GpModel::with_hyperparams(&x, &y, hyper(2, ls, noise)).unwrap();
            let prior = model.hyper.signal_variance * model.y_scale * model.y_scale;
            for xi in &x {
                let (_, v) = model.predict(xi).unwrap();
                prop_assert!(v <= prior * (1.0 + 1e-12));
            }
        }

        #[test]
        fn cholesky_reconstructs_covariance(seed in 0u64..1000, ls in 0.05f64..2.0) {
            let x = random_points(9, 3, seed);
            let y: Vec<f64> = x.iter().map(|r| r[0] - r[2]).collect();
            let h = hyper(3, ls, 1e-3);
            let model = GpModel::with_hyperparams(&x, &y, h.clone()).unwrap();
            let l = model.cholesky_factor();
            let mut k = gram(&x, &x, &h);
            for i in 0..x.len() { k[(i, i)] += h.noise_variance; }
            let err = (&l * l.transpose() - &k).norm() / k.norm();
            prop_assert!(err < 1e-6);
        }

        #[test]
        fn posterior_covariance_is_psd(seed in 0u64..1000) {
            let x = random_points(8, 2, seed);
            let y: Vec<f64> = x.iter().map(|r| r[0] * 2.0).collect();
            let model = fit_gp(&x, &y).unwrap();
            let q = random_points(5, 2, seed + 1);
            let (_, cov) = model.posterior(&q).unwrap();
            prop_assert!((&cov - cov.transpose()).norm() < 1e-12);
            prop_assert!(SymmetricEigen::new(cov).eigenvalues.min() >= -1e-8);
        }
    }
}
