//! Box-constrained quasi-Newton minimization (projected BFGS with Armijo
//! backtracking). Small dense problems only.

/// Stop when every free gradient component is below this.
const GRAD_TOL: f64 = 1e-6;
/// Stop when an accepted step changes the value by less than this, relative.
const VALUE_TOL: f64 = 1e-9;
/// Largest coordinate move of a trial step.
const MAX_STEP: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct BoxMinimizeResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Minimizes `f` over the box `[lower, upper]` starting from `x0`.
///
/// `f` returns the value and gradient; a non-finite value marks an
/// infeasible point and makes the line search back off.
pub fn minimize_box<F>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    max_iter: usize,
) -> BoxMinimizeResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() {
        return BoxMinimizeResult {
            x,
            value: fx,
            iterations: 0,
        };
    }
    // inverse Hessian approximation, row-major
    let mut h = identity(n);
    let mut fresh = true;
    let mut prev_free: Vec<bool> = Vec::new();
    let mut iterations = 0;

    for it in 0..max_iter {
        iterations = it + 1;
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0)))
            .collect();
        let pg_max = (0..n)
            .filter(|&i| free[i])
            .map(|i| g[i].abs())
            .fold(0.0, f64::max);
        if pg_max < GRAD_TOL {
            break;
        }
        if free != prev_free {
            h = identity(n);
            fresh = true;
            prev_free = free.clone();
        }

        let mut step = None;
        for attempt in 0..2 {
            let mut p: Vec<f64> = if attempt == 0 {
                (0..n)
                    .map(|i| {
                        if free[i] {
                            -(0..n)
                                .filter(|&j| free[j])
                                .map(|j| h[i * n + j] * g[j])
                                .sum::<f64>()
                        } else {
                            0.0
                        }
                    })
                    .collect()
            } else {
                (0..n).map(|i| if free[i] { -g[i] } else { 0.0 }).collect()
            };
            let mut slope: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
            if !(slope < 0.0) {
                if attempt == 0 {
                    continue;
                }
                break;
            }
            let longest = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let cap = if attempt == 1 { 1.0 } else { MAX_STEP };
            if longest > cap {
                let scale = cap / longest;
                p.iter_mut().for_each(|v| *v *= scale);
                slope *= scale;
            }
            let mut t = 1.0;
            for _ in 0..40 {
                let mut xn: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + t * b).collect();
                project(&mut xn, lower, upper);
                let (fn_, gn) = f(&xn);
                let moved: f64 = xn.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
                if moved == 0.0 {
                    break;
                }
                if fn_.is_finite() && fn_ <= fx + 1e-4 * t * slope.min(0.0) {
                    step = Some((xn, fn_, gn));
                    break;
                }
                t *= 0.5;
            }
            if step.is_some() {
                break;
            }
            h = identity(n);
            fresh = true;
        }

        let Some((xn, fn_, gn)) = step else { break };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| if free[i] { gn[i] - g[i] } else { 0.0 })
            .collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let converged = (fx - fn_).abs() <= VALUE_TOL * (1.0 + fx.abs());
        if sy > 1e-12 {
            if fresh {
                let yy: f64 = y.iter().map(|v| v * v).sum();
                let scale = sy / yy;
                h.iter_mut().for_each(|v| *v *= scale);
                fresh = false;
            }
            bfgs_update(&mut h, &s, &y, sy);
        }
        x = xn;
        fx = fn_;
        g = gn;
        if converged {
            break;
        }
    }
    BoxMinimizeResult {
        x,
        value: fx,
        iterations,
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

/// `H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum())
        .collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] +=
                -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_unconstrained() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            (v, g)
        };
        let r = minimize_box(f, &[-1.2, 1.0], &[-5.0, -5.0], &[5.0, 5.0], 500);
        assert!(
            (r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4,
            "{:?}",
            r
        );
    }

    #[test]
    fn active_bound() {
        // minimum of (x-3)^2 + (y+1)^2 on [0,2]x[0,2] is (2, 0)
        let f = |x: &[f64]| {
            (
                (x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2),
                vec![2.0 * (x[0] - 3.0), 2.0 * (x[1] + 1.0)],
            )
        };
        let r = minimize_box(f, &[1.0, 1.0], &[0.0, 0.0], &[2.0, 2.0], 100);
        assert_eq!(r.x, vec![2.0, 0.0]);
    }
}
