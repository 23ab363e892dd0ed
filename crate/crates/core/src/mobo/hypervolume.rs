//! Dominated hypervolume: exact sweep for two objectives, slicing for
//! three, Monte-Carlo estimate beyond.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pareto::weakly_dominates;
use crate::error::{Error, Result};

/// Sample count of the Monte-Carlo estimator used when K > 3.
pub const MC_SAMPLES: usize = 100_000;
const MC_SEED: u64 = 0x6876_6d63;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HvEstimate {
    pub value: f64,
    /// Zero for exact computations.
    pub std_error: f64,
    pub exact: bool,
}

fn check_reference(points: &[Vec<f64>], reference: &[f64]) -> Result<()> {
    for p in points {
        if p.len() != reference.len() {
            return Err(Error::Arity(format!(
                "point of dimension {} against a {}-dimensional reference",
                p.len(),
                reference.len()
            )));
        }
        if p.iter().zip(reference).any(|(y, r)| !(y > r)) {
            return Err(Error::Reference(format!(
                "reference {reference:?} is not strictly dominated by {p:?}"
            )));
        }
    }
    Ok(())
}

/// Hypervolume of `points` above `reference`. Exact for K ≤ 3; for K > 3 a
/// fixed-seed Monte-Carlo estimate (see [`hypervolume_with_error`]).
pub fn hypervolume(points: &[Vec<f64>], reference: &[f64]) -> Result<f64> {
    hypervolume_with_error(points, reference).map(|h| h.value)
}

pub fn hypervolume_with_error(points: &[Vec<f64>], reference: &[f64]) -> Result<HvEstimate> {
    check_reference(points, reference)?;
    Ok(match reference.len() {
        0 => {
            return Err(Error::Arity(
                "hypervolume needs at least one objective".into(),
            ))
        }
        1..=3 => HvEstimate {
            value: hv_exact(points, reference),
            std_error: 0.0,
            exact: true,
        },
        _ => hv_monte_carlo(points, reference, MC_SAMPLES, MC_SEED),
    })
}

/// Hypervolume without validation; points that do not strictly dominate the
/// reference contribute nothing.
pub(crate) fn hv_unchecked(points: &[Vec<f64>], reference: &[f64]) -> f64 {
    let inside: Vec<Vec<f64>> = points
        .iter()
        .filter(|p| p.iter().zip(reference).all(|(y, r)| y > r))
        .cloned()
        .collect();
    if inside.is_empty() {
        return 0.0;
    }
    if reference.len() <= 3 {
        hv_exact(&inside, reference)
    } else {
        hv_monte_carlo(&inside, reference, MC_SAMPLES, MC_SEED).value
    }
}

fn hv_exact(points: &[Vec<f64>], reference: &[f64]) -> f64 {
    match reference.len() {
        1 => points
            .iter()
            .map(|p| p[0] - reference[0])
            .fold(0.0, f64::max),
        2 => {
            let mut xy: Vec<(f64, f64)> = points.iter().map(|p| (p[0], p[1])).collect();
            hv2d_sorted(&mut xy, reference[0], reference[1])
        }
        _ => hv3d(points, reference),
    }
}

/// Sweep over points sorted by the first objective descending.
pub(crate) fn hv2d_sorted(xy: &mut [(f64, f64)], r0: f64, r1: f64) -> f64 {
    xy.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let mut hv = 0.0;
    let mut top = r1;
    for &(x, y) in xy.iter() {
        if x <= r0 {
            break;
        }
        if y > top {
            hv += (x - r0) * (y - top);
            top = y;
        }
    }
    hv
}

fn hv3d(points: &[Vec<f64>], reference: &[f64]) -> f64 {
    let mut order: Vec<&Vec<f64>> = points.iter().collect();
    order.sort_by(|a, b| b[2].total_cmp(&a[2]));
    let mut hv = 0.0;
    let mut slice: Vec<(f64, f64)> = Vec::with_capacity(order.len());
    let mut i = 0;
    while i < order.len() {
        let level = order[i][2];
        while i < order.len() && order[i][2] == level {
            slice.push((order[i][0], order[i][1]));
            i += 1;
        }
        let next = if i < order.len() {
            order[i][2]
        } else {
            reference[2]
        };
        let mut buf = slice.clone();
        hv += hv2d_sorted(&mut buf, reference[0], reference[1]) * (level - next);
    }
    hv
}

/// Uniform sampling of the box between `reference` and the componentwise
/// maximum of `points`.
pub fn hv_monte_carlo(
    points: &[Vec<f64>],
    reference: &[f64],
    samples: usize,
    seed: u64,
) -> HvEstimate {
    if points.is_empty() || samples == 0 {
        return HvEstimate {
            value: 0.0,
            std_error: 0.0,
            exact: false,
        };
    }
    let k = reference.len();
    let upper: Vec<f64> = (0..k)
        .map(|j| {
            points
                .iter()
                .map(|p| p[j])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let volume: f64 = upper.iter().zip(reference).map(|(u, r)| u - r).product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![0.0; k];
    let mut hits = 0usize;
    for _ in 0..samples {
        for j in 0..k {
            z[j] = reference[j] + rng.gen::<f64>() * (upper[j] - reference[j]);
        }
        if points.iter().any(|p| weakly_dominates(p, &z)) {
            hits += 1;
        }
    }
    let frac = hits as f64 / samples as f64;
    HvEstimate {
        value: volume * frac,
        std_error: volume * (frac * (1.0 - frac) / samples as f64).sqrt(),
        exact: false,
    }
}

/// Per-objective minimum of `observations` minus 1% of the observed span.
/// A zero span falls back to 1% of the magnitude (or 0.01).
pub fn reference_point(observations: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = observations.first().ok_or_else(|| {
        Error::Reference("no observations to derive a reference point from".into())
    })?;
    Ok((0..first.len())
        .map(|j| {
            let lo = observations
                .iter()
                .map(|o| o[j])
                .fold(f64::INFINITY, f64::min);
            let hi = observations
                .iter()
                .map(|o| o[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            let offset = if span > 0.0 {
                0.01 * span
            } else {
                0.01 * lo.abs().max(1.0)
            };
            lo - offset
        })
        .collect())
}
