//! Small numerical building blocks shared by the estimation and codebook
//! modules: a Levenberg-Marquardt least-squares solver, a golden-section
//! line search, and Euclidean projection onto a scaled simplex.

use nalgebra::{DMatrix, DVector};

/// Outcome of a [`levenberg_marquardt`] run.
#[derive(Debug, Clone)]
pub struct LmResult {
    pub params: DVector<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Configuration for [`levenberg_marquardt`].
#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when the accepted step norm falls below this.
    pub step_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            step_tol: 1e-10,
        }
    }
}

/// Levenberg-Marquardt minimization of `0.5 * ||r(x)||^2`.
///
/// `residual` evaluates the residual vector, `jacobian` its Jacobian
/// (rows = residuals, cols = parameters). Damping scales with the diagonal of
/// `J^T J` (Marquardt form), which makes the iterates invariant under a
/// uniform rescaling of the residuals. Steps that do not decrease the cost
/// are rejected, so the final cost never exceeds the initial one.
pub fn levenberg_marquardt<R, J>(
    x0: DVector<f64>,
    mut residual: R,
    mut jacobian: J,
    opts: LmOptions,
) -> LmResult
where
    R: FnMut(&DVector<f64>) -> DVector<f64>,
    J: FnMut(&DVector<f64>) -> DMatrix<f64>,
{
    let n = x0.len();
    let mut x = x0;
    let mut r = residual(&x);
    let mut cost = 0.5 * r.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..opts.max_iterations {
        iterations = iter + 1;
        let j = jacobian(&x);
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        // Residual-scale-free exit: only an exactly zero gradient stops
        // here; everything else is handled by the step tolerance in
        // parameter units.
        if g.norm() == 0.0 {
            converged = true;
            break;
        }

        let mut accepted = false;
        for _ in 0..25 {
            let mut a = jtj.clone();
            for i in 0..n {
                // Floor keeps the system solvable when a column of J vanishes.
                let d = jtj[(i, i)].max(1e-30);
                a[(i, i)] += lambda * d;
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let candidate = &x + &step;
            let r_new = residual(&candidate);
            let cost_new = 0.5 * r_new.norm_squared();
            if cost_new < cost {
                let step_norm = step.norm();
                x = candidate;
                r = r_new;
                cost = cost_new;
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                // A tiny step only signals convergence when the damping is
                // small, i.e. the step was an undamped Gauss-Newton one.
                if step_norm < opts.step_tol && lambda <= 1e-2 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
        if !accepted {
            // No downhill direction within the damping budget: the iterate
            // sits at a local optimum within numerical resolution.
            converged = cost.is_finite();
            break;
        }
        if converged {
            break;
        }
    }

    LmResult {
        params: x,
        cost,
        iterations,
        converged,
    }
}

/// Golden-section minimization of a unimodal scalar function on `[a, b]`.
///
/// Returns `(x_min, f(x_min))` after the bracket shrinks below `tol`.
pub fn golden_section_min<F: FnMut(f64) -> f64>(
    mut a: f64,
    mut b: f64,
    tol: f64,
    mut f: F,
) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let fx = f(x);
    if fc < fd && fc < fx {
        (if fc < fx { c } else { x }, fc.min(fx))
    } else if fd < fx {
        (d, fd)
    } else {
        (x, fx)
    }
}

/// Euclidean projection of `v` onto the scaled simplex
/// `{x : x >= 0, sum(x) = total}` using the sort-based algorithm.
pub fn project_simplex(v: &[f64], total: f64) -> Vec<f64> {
    assert!(total > 0.0, "simplex scale must be positive");
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut rho = 0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - total) / (i as f64 + 1.0);
        if ui - t > 0.0 {
            rho = i + 1;
            theta = t;
        }
    }
    if rho == 0 {
        // All mass below threshold: fall back to uniform.
        return vec![total / v.len() as f64; v.len()];
    }
    v.iter().map(|&vi| (vi - theta).max(0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lm_solves_rosenbrock_least_squares() {
        let res = levenberg_marquardt(
            DVector::from_vec(vec![-1.2, 1.0]),
            |x| DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]),
            |x| {
                DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0])
            },
            LmOptions {
                max_iterations: 200,
                step_tol: 1e-12,
            },
        );
        assert!(res.converged);
        assert_relative_eq!(res.params[0], 1.0, epsilon = 1e-8);
        assert_relative_eq!(res.params[1], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn lm_never_increases_cost() {
        // Start exactly at the optimum: cost must stay put.
        let res = levenberg_marquardt(
            DVector::from_vec(vec![2.0]),
            |x| DVector::from_vec(vec![x[0] - 2.0]),
            |_| DMatrix::from_row_slice(1, 1, &[1.0]),
            LmOptions::default(),
        );
        assert!(res.cost <= 1e-30);
    }

    #[test]
    fn golden_section_finds_quadratic_minimum() {
        let (x, fx) = golden_section_min(-4.0, 10.0, 1e-10, |x| (x - 1.5) * (x - 1.5) + 2.0);
        assert_relative_eq!(x, 1.5, epsilon = 1e-6);
        assert_relative_eq!(fx, 2.0, epsilon = 1e-10);
    }

    #[test]
    fn simplex_projection_is_feasible() {
        let p = project_simplex(&[0.4, -3.0, 2.5, 0.1], 4.0);
        assert!(p.iter().all(|&x| x >= 0.0));
        assert_relative_eq!(p.iter().sum::<f64>(), 4.0, epsilon = 1e-12);
        // A feasible point projects to itself.
        let q = project_simplex(&[1.0, 1.0, 1.0, 1.0], 4.0);
        for x in q {
            assert_relative_eq!(x, 1.0, epsilon = 1e-12);
        }
    }
}
