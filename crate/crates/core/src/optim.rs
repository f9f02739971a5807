//! Box-constrained quasi-Newton minimisation (projected BFGS).
//!
//! Variables sitting on a bound with the gradient pushing outward are frozen
//! for the iteration; the remaining free block takes a BFGS step and the
//! trial point is projected back into the box. Iterates that land on a bound
//! stay there exactly, which is what makes zero variance estimates exact.

#[derive(Clone, Debug)]
pub struct Options {
    pub max_iter: usize,
    /// Projected-gradient infinity norm required for convergence.
    pub grad_tol: f64,
    /// Relative objective change required for convergence.
    pub rel_tol: f64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            max_iter: 500,
            grad_tol: 1e-6,
            rel_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub n_evals: usize,
}

/// Minimise `f` over the box `lower <= x <= upper`.
///
/// `f` writes the gradient into its second argument and returns the value;
/// a non-finite return marks the point as infeasible and the line search
/// backs off.
pub fn minimize_box<F>(mut f: F, x0: &[f64], lower: &[f64], upper: &[f64], opts: &Options) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let project = |x: &mut [f64]| {
        for j in 0..n {
            x[j] = x[j].clamp(lower[j], upper[j]);
        }
    };
    let mut x = x0.to_vec();
    project(&mut x);
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut n_evals = 1;
    if !fx.is_finite() {
        return Minimum {
            x,
            value: fx,
            converged: false,
            iterations: 0,
            n_evals,
        };
    }

    let mut h = identity(n);
    let mut active = vec![false; n];
    let mut rel_change = f64::INFINITY;
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        let mut new_active = vec![false; n];
        let mut pg_inf: f64 = 0.0;
        for j in 0..n {
            let at_lower = x[j] <= lower[j] && g[j] >= 0.0;
            let at_upper = x[j] >= upper[j] && g[j] <= 0.0;
            new_active[j] = at_lower || at_upper || lower[j] == upper[j];
            if !new_active[j] {
                pg_inf = pg_inf.max(g[j].abs());
            }
        }
        if pg_inf < opts.grad_tol && (rel_change < opts.rel_tol || pg_inf < opts.grad_tol * 1e-3) {
            converged = true;
            break;
        }
        if new_active != active {
            h = identity(n);
            active = new_active;
        }

        let mut tried_reset = false;
        let accepted = loop {
            direction(&h, &g, &active, &mut d);
            let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            if slope >= 0.0 {
                h = identity(n);
                direction(&h, &g, &active, &mut d);
                slope = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            }
            if slope >= 0.0 {
                break false;
            }
            // Keep steepest-descent steps from wandering off on the first try.
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut alpha = if is_identity(&h) && dmax > 1.0 { 1.0 / dmax } else { 1.0 };
            let mut ok = false;
            for _ in 0..60 {
                for j in 0..n {
                    x_new[j] = x[j] + alpha * d[j];
                }
                project(&mut x_new);
                let f_new = f(&x_new, &mut g_new);
                n_evals += 1;
                let decrease: f64 = (0..n).map(|j| g[j] * (x_new[j] - x[j])).sum();
                if f_new.is_finite() && f_new <= fx + 1e-4 * decrease {
                    rel_change = (fx - f_new).abs() / fx.abs().max(1.0);
                    ok = true;
                    fx = f_new;
                    break;
                }
                alpha *= 0.5;
            }
            if ok {
                break true;
            }
            if tried_reset || is_identity(&h) {
                break false;
            }
            tried_reset = true;
            h = identity(n);
        };
        iterations += 1;
        if !accepted {
            // Stalled at the noise floor of the objective.
            converged = pg_inf < opts.grad_tol * 10.0;
            break;
        }

        let mut s = vec![0.0; n];
        let mut y = vec![0.0; n];
        for j in 0..n {
            if !active[j] {
                s[j] = x_new[j] - x[j];
                y[j] = g_new[j] - g[j];
            }
        }
        bfgs_update(&mut h, &s, &y);
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
    }

    Minimum {
        x,
        value: fx,
        converged,
        iterations,
        n_evals,
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn is_identity(h: &[f64]) -> bool {
    let n = (h.len() as f64).sqrt() as usize;
    (0..n).all(|i| (0..n).all(|j| h[i * n + j] == if i == j { 1.0 } else { 0.0 }))
}

fn direction(h: &[f64], g: &[f64], active: &[bool], d: &mut [f64]) {
    let n = g.len();
    for i in 0..n {
        d[i] = if active[i] {
            0.0
        } else {
            -(0..n).filter(|&j| !active[j]).map(|j| h[i * n + j] * g[j]).sum::<f64>()
        };
    }
}

fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64]) {
    let n = s.len();
    let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
    let s_norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    let y_norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if sy <= 1e-10 * s_norm * y_norm || sy <= 0.0 {
        return;
    }
    if is_identity(h) {
        // Shanno scaling of the initial inverse Hessian.
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let gamma = sy / yy;
        for i in 0..n {
            h[i * n + i] = gamma;
        }
    }
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_unconstrained() {
        let f = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let inf = f64::INFINITY;
        let m = minimize_box(f, &[-1.2, 1.0], &[-inf, -inf], &[inf, inf], &Options::default());
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5, "{:?}", m.x);
    }

    #[test]
    fn active_bound_is_exact() {
        // min (x-(-2))² + (y-3)² with x >= 0: solution (0, 3) with x exactly 0.
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * (x[0] + 2.0);
            g[1] = 2.0 * (x[1] - 3.0);
            (x[0] + 2.0).powi(2) + (x[1] - 3.0).powi(2)
        };
        let m = minimize_box(
            f,
            &[1.0, 0.0],
            &[0.0, f64::NEG_INFINITY],
            &[f64::INFINITY, f64::INFINITY],
            &Options::default(),
        );
        assert!(m.converged);
        assert_eq!(m.x[0], 0.0);
        assert!((m.x[1] - 3.0).abs() < 1e-7);
    }

    #[test]
    fn fixed_variable_never_moves() {
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * (x[0] - 1.0);
            g[1] = 2.0 * (x[1] - 1.0);
            (x[0] - 1.0).powi(2) + (x[1] - 1.0).powi(2)
        };
        let m = minimize_box(f, &[0.0, 0.5], &[0.0, 0.5], &[0.0, 10.0], &Options::default());
        assert_eq!(m.x[0], 0.0);
        assert!((m.x[1] - 1.0).abs() < 1e-7);
    }
}
