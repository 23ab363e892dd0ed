//! Monte-Carlo q-expected hypervolume improvement with fixed base samples,
//! and its maximization over the unit box.

use nalgebra::{Cholesky, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::hypervolume::{hv2d_sorted, hv_unchecked};
use super::pareto::ParetoFront;
use super::sobol::{sobol, Sobol};
use crate::error::{Error, Result};
use crate::optim::minimize_box;
use crate::surrogate::GpModel;

/// Sample count while optimizing the acquisition.
pub const OPTIMIZATION_SAMPLES: usize = 128;
/// Sample count for final scoring and verification.
pub const VERIFICATION_SAMPLES: usize = 8192;

/// Standard-normal draws from scrambled Sobol points, `samples × width`
/// with `width = q·K`. Column `k·q + i` drives candidate `i` of objective `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseSamples {
    pub eps: Vec<f64>,
    pub samples: usize,
    pub width: usize,
    pub seed: u64,
}

impl BaseSamples {
    pub fn new(samples: usize, q: usize, num_objectives: usize, seed: u64) -> Result<Self> {
        let width = q * num_objectives;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut gen = Sobol::new(width, Some(seed))?;
        let mut eps = Vec::with_capacity(samples * width);
        for _ in 0..samples {
            for u in gen.next_point() {
                eps.push(normal.inverse_cdf(u.clamp(1e-12, 1.0 - 1e-12)));
            }
        }
        Ok(Self {
            eps,
            samples,
            width,
            seed,
        })
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.eps[s * self.width..(s + 1) * self.width]
    }
}

/// Joint latent posterior at a batch: per objective, the mean over the q
/// candidates and a lower Cholesky factor of their covariance.
#[derive(Debug, Clone)]
pub struct JointPosterior {
    pub means: Vec<Vec<f64>>,
    pub factors: Vec<DMatrix<f64>>,
}

impl JointPosterior {
    pub fn batch_size(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn num_objectives(&self) -> usize {
        self.means.len()
    }

    /// Posterior with independent objectives, given means and covariances.
    pub fn from_moments(means: Vec<Vec<f64>>, covariances: &[DMatrix<f64>]) -> Result<Self> {
        let factors = covariances
            .iter()
            .map(factor_with_jitter)
            .collect::<Result<_>>()?;
        Ok(Self { means, factors })
    }
}

fn factor_with_jitter(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    let sym = (cov + cov.transpose()) * 0.5;
    let scale = sym
        .diagonal()
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(1e-12);
    for jitter in [0.0, 1e-12, 1e-10, 1e-8, 1e-6] {
        let mut m = sym.clone();
        for i in 0..n {
            m[(i, i)] += jitter * scale;
        }
        if let Some(c) = Cholesky::new(m) {
            return Ok(c.l());
        }
    }
    Err(Error::Numerical(
        "batch covariance is not positive definite after jitter".into(),
    ))
}

fn canonical_order(xcand: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut rows = xcand.to_vec();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows
}

pub fn joint_posterior(models: &[GpModel], xcand: &[Vec<f64>]) -> Result<JointPosterior> {
    let mut means = Vec::with_capacity(models.len());
    let mut factors = Vec::with_capacity(models.len());
    for m in models {
        let (mu, cov) = m.posterior_raw(xcand)?;
        means.push(mu);
        factors.push(factor_with_jitter(&cov)?);
    }
    Ok(JointPosterior { means, factors })
}

/// Front hypervolume cached for repeated improvement queries.
#[derive(Debug, Clone)]
pub struct ImprovementBase {
    points: Vec<Vec<f64>>,
    reference: Vec<f64>,
    volume: f64,
}

impl ImprovementBase {
    pub fn new(front: &ParetoFront, reference: &[f64]) -> Self {
        Self {
            volume: hv_unchecked(&front.points, reference),
            points: front.points.clone(),
            reference: reference.to_vec(),
        }
    }

    /// `HV(front ∪ ys) − HV(front)`, unclamped.
    pub fn improvement(&self, ys: &[Vec<f64>]) -> f64 {
        if self.reference.len() == 2 {
            let (r0, r1) = (self.reference[0], self.reference[1]);
            let mut xy: Vec<(f64, f64)> = self
                .points
                .iter()
                .chain(ys)
                .filter(|p| p[0] > r0 && p[1] > r1)
                .map(|p| (p[0], p[1]))
                .collect();
            return hv2d_sorted(&mut xy, r0, r1) - self.volume;
        }
        let union: Vec<Vec<f64>> = self.points.iter().chain(ys).cloned().collect();
        hv_unchecked(&union, &self.reference) - self.volume
    }
}

/// Mean clamped improvement over the base samples.
pub fn qehvi_from_posterior(
    post: &JointPosterior,
    base: &ImprovementBase,
    samples: &BaseSamples,
) -> Result<f64> {
    let q = post.batch_size();
    let k = post.num_objectives();
    if q == 0 {
        return Err(Error::Arity("empty candidate batch".into()));
    }
    if samples.width != q * k {
        return Err(Error::Arity(format!(
            "base samples of width {} for q = {q}, K = {k}",
            samples.width
        )));
    }
    if base.reference.len() != k {
        return Err(Error::Arity(format!(
            "{k} objectives against a {}-dimensional reference",
            base.reference.len()
        )));
    }
    let mut ys = vec![vec![0.0; k]; q];
    let mut total = 0.0;
    for s in 0..samples.samples {
        let eps = samples.row(s);
        for obj in 0..k {
            let l = &post.factors[obj];
            let e = &eps[obj * q..(obj + 1) * q];
            for i in 0..q {
                let mut v = post.means[obj][i];
                for j in 0..=i {
                    v += l[(i, j)] * e[j];
                }
                ys[i][obj] = v;
            }
        }
        let raw = base.improvement(&ys);
        debug_assert!(raw >= -1e-9, "negative improvement {raw}");
        total += raw.max(0.0);
    }
    Ok(total / samples.samples as f64)
}

/// qEHVI of a batch; candidates are put in a canonical order first so the
/// value does not depend on their listing.
pub fn qehvi(
    models: &[GpModel],
    front: &ParetoFront,
    reference: &[f64],
    xcand: &[Vec<f64>],
    samples: &BaseSamples,
) -> Result<f64> {
    let base = ImprovementBase::new(front, reference);
    let post = joint_posterior(models, &canonical_order(xcand))?;
    qehvi_from_posterior(&post, &base, samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionOptions {
    /// Sobol-sampled candidate batches scored before local ascent.
    pub raw_batches: usize,
    /// Local ascents started from the best raw batches.
    pub probe_starts: usize,
    /// Local ascents started from perturbed Pareto-optimal inputs.
    pub front_starts: usize,
    pub max_iterations: usize,
    pub mc_samples: usize,
    pub fd_step: f64,
    pub perturbation: f64,
}

impl Default for AcquisitionOptions {
    fn default() -> Self {
        Self {
            raw_batches: 1024,
            probe_starts: 3,
            front_starts: 2,
            max_iterations: 15,
            mc_samples: OPTIMIZATION_SAMPLES,
            fd_step: 1e-3,
            perturbation: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionResult {
    pub batch: Vec<Vec<f64>>,
    pub score: f64,
    /// Best score among the raw Sobol batches, same base samples.
    pub best_probe_score: f64,
}

struct Scorer<'a> {
    models: &'a [GpModel],
    base: ImprovementBase,
    samples: BaseSamples,
    q: usize,
    dim: usize,
}

impl Scorer<'_> {
    fn score_flat(&self, flat: &[f64]) -> Result<f64> {
        let rows: Vec<Vec<f64>> = flat.chunks(self.dim).map(<[f64]>::to_vec).collect();
        let post = joint_posterior(self.models, &canonical_order(&rows))?;
        qehvi_from_posterior(&post, &self.base, &self.samples)
    }

    fn ascend(&self, start: Vec<f64>, opts: &AcquisitionOptions) -> (Vec<f64>, f64) {
        let n = self.q * self.dim;
        let h = opts.fd_step;
        let objective = |x: &[f64]| -> (f64, Vec<f64>) {
            let Ok(v) = self.score_flat(x) else {
                return (f64::INFINITY, vec![0.0; n]);
            };
            let mut g = vec![0.0; n];
            let mut probe = x.to_vec();
            for i in 0..n {
                let lo = (x[i] - h).max(0.0);
                let hi = (x[i] + h).min(1.0);
                probe[i] = hi;
                let fu = self.score_flat(&probe).unwrap_or(v);
                probe[i] = lo;
                let fd = self.score_flat(&probe).unwrap_or(v);
                probe[i] = x[i];
                g[i] = -(fu - fd) / (hi - lo);
            }
            (-v, g)
        };
        let r = minimize_box(
            objective,
            &start,
            &vec![0.0; n],
            &vec![1.0; n],
            opts.max_iterations,
        );
        (r.x, -r.value)
    }
}

fn better(a: &(Vec<f64>, f64), b: &(Vec<f64>, f64)) -> bool {
    // higher score wins; ties go to the lexicographically smaller batch
    a.1 > b.1
        || (a.1 == b.1
            && a.0
                .iter()
                .zip(&b.0)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .is_some_and(|o| o.is_lt()))
}

/// Maximizes qEHVI over `[0,1]^(q·D)`.
///
/// Scores `opts.raw_batches` Sobol batches, then runs local ascent from the
/// best of them and from perturbed copies of `pareto_inputs`. The result is
/// never worse than the best raw batch under the same base samples.
pub fn optimize_acquisition(
    models: &[GpModel],
    front: &ParetoFront,
    pareto_inputs: &[Vec<f64>],
    reference: &[f64],
    q: usize,
    opts: &AcquisitionOptions,
    seed: u64,
) -> Result<AcquisitionResult> {
    let dim = models
        .first()
        .ok_or_else(|| Error::Arity("no surrogate models".into()))?
        .dim();
    if q == 0 {
        return Err(Error::Config("batch size q must be at least 1".into()));
    }
    let scorer = Scorer {
        models,
        base: ImprovementBase::new(front, reference),
        samples: BaseSamples::new(opts.mc_samples, q, models.len(), seed)?,
        q,
        dim,
    };

    let raw = sobol(opts.raw_batches.max(1) * q, dim, seed.wrapping_add(1))?;
    let mut probes: Vec<(Vec<f64>, f64)> = raw
        .chunks(q)
        .map(|c| {
            let flat: Vec<f64> = c.concat();
            let s = scorer.score_flat(&flat)?;
            Ok((flat, s))
        })
        .collect::<Result<_>>()?;
    probes.sort_by(|a, b| {
        if better(a, b) {
            std::cmp::Ordering::Less
        } else if better(b, a) {
            std::cmp::Ordering::Greater
        } else {
            std::cmp::Ordering::Equal
        }
    });
    let best_probe_score = probes[0].1;

    let mut starts: Vec<Vec<f64>> = probes
        .iter()
        .take(opts.probe_starts)
        .map(|p| p.0.clone())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6163_7175);
    if !pareto_inputs.is_empty() {
        for _ in 0..opts.front_starts {
            let flat: Vec<f64> = (0..q)
                .flat_map(|_| {
                    let row = &pareto_inputs[rng.gen_range(0..pareto_inputs.len())];
                    row.iter()
                        .map(|v| {
                            (v + opts.perturbation * (2.0 * rng.gen::<f64>() - 1.0)).clamp(0.0, 1.0)
                        })
                        .collect::<Vec<_>>()
                })
                .collect();
            starts.push(flat);
        }
    }

    let mut best = probes.swap_remove(0);
    for start in starts {
        let cand = scorer.ascend(start, opts);
        if better(&cand, &best) {
            best = cand;
        }
    }
    Ok(AcquisitionResult {
        batch: best.0.chunks(dim).map(<[f64]>::to_vec).collect(),
        score: best.1,
        best_probe_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobo::pareto::pareto_filter;
    use crate::surrogate::{fit_gp, GpHyperparams};

    fn front_of(points: Vec<Vec<f64>>) -> ParetoFront {
        pareto_filter(&points)
    }

    fn degenerate(mean: [f64; 2]) -> JointPosterior {
        JointPosterior::from_moments(
            vec![vec![mean[0]], vec![mean[1]]],
            &[
                DMatrix::from_element(1, 1, 1e-14),
                DMatrix::from_element(1, 1, 1e-14),
            ],
        )
        .unwrap()
    }

    #[test]
    fn degenerate_posteriors() {
        let front = front_of(vec![vec![1.0, 1.0]]);
        let base = ImprovementBase::new(&front, &[0.0, 0.0]);
        let samples = BaseSamples::new(512, 1, 2, 4).unwrap();
        let v = qehvi_from_posterior(&degenerate([0.5, 0.7]), &base, &samples).unwrap();
        assert!(v <= 1e-6);
        let v = qehvi_from_posterior(&degenerate([2.0, 1.5]), &base, &samples).unwrap();
        assert!((v - 2.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn base_samples_are_standard_normal() {
        let b = BaseSamples::new(4096, 2, 2, 0).unwrap();
        for c in 0..b.width {
            let col: Vec<f64> = (0..b.samples).map(|s| b.row(s)[c]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(
                mean.abs() < 0.01 && (var - 1.0).abs() < 0.02,
                "{mean} {var}"
            );
        }
        assert_eq!(b, BaseSamples::new(4096, 2, 2, 0).unwrap());
    }

    fn toy_models() -> (Vec<GpModel>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let x: Vec<Vec<f64>> = crate::mobo::sobol(10, 2, 5).unwrap();
        let y: Vec<Vec<f64>> = x
            .iter()
            .map(|r| vec![1.0 - r[0] * r[0], 1.0 - (1.0 - r[0]).powi(2) - 0.3 * r[1]])
            .collect();
        let models = (0..2)
            .map(|k| fit_gp(&x, &y.iter().map(|v| v[k]).collect::<Vec<_>>()).unwrap())
            .collect();
        (models, x, y)
    }

    #[test]
    fn permutation_invariant_and_non_negative() {
        let (models, _, y) = toy_models();
        let front = pareto_filter(&y);
        let r = crate::mobo::reference_point(&y).unwrap();
        let samples = BaseSamples::new(128, 3, 2, 1).unwrap();
        let batch = vec![vec![0.1, 0.9], vec![0.5, 0.2], vec![0.8, 0.4]];
        let mut perm = batch.clone();
        perm.rotate_left(1);
        let a = qehvi(&models, &front, &r, &batch, &samples).unwrap();
        let b = qehvi(&models, &front, &r, &perm, &samples).unwrap();
        assert_eq!(a, b);
        assert!(a >= 0.0);
    }

    #[test]
    fn optimizer_beats_raw_probes_and_stays_in_box() {
        let (models, x, y) = toy_models();
        let front = pareto_filter(&y);
        let inputs: Vec<Vec<f64>> = front.indices.iter().map(|&i| x[i].clone()).collect();
        let r = crate::mobo::reference_point(&y).unwrap();
        let opts = AcquisitionOptions {
            raw_batches: 64,
            ..Default::default()
        };
        let res = optimize_acquisition(&models, &front, &inputs, &r, 2, &opts, 3).unwrap();
        assert_eq!(res.batch.len(), 2);
        assert!(res.batch.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        assert!(res.score >= res.best_probe_score);
        let again = optimize_acquisition(&models, &front, &inputs, &r, 2, &opts, 3).unwrap();
        assert_eq!(res, again);
    }

    #[test]
    fn zero_variance_model_still_returns_a_batch() {
        let x = vec![vec![0.0], vec![1.0], vec![0.5]];
        let y = vec![1.0, 1.0, 1.0];
        let mut h = GpHyperparams::initial(1);
        h.signal_variance = 1e-12;
        h.noise_variance = 1e-6;
        let m = GpModel::with_hyperparams(&x, &y, h).unwrap();
        let models = vec![m.clone(), m];
        let ys = vec![vec![1.0, 1.0]];
        let front = pareto_filter(&ys);
        let r = [0.5, 0.5];
        let opts = AcquisitionOptions {
            raw_batches: 16,
            ..Default::default()
        };
        let res = optimize_acquisition(&models, &front, &x, &r, 2, &opts, 0).unwrap();
        assert!(res.score.abs() < 1e-6);
        assert!(res.batch.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }
}
