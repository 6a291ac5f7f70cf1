//! Box-constrained limited-memory quasi-Newton minimizer.
//!
//! Projected L-BFGS: two-loop recursion for the search direction, projection
//! of trial points onto the box, and a backtracking Armijo line search.
//! Accepted iterates are strictly non-increasing in the objective, which is
//! what makes GRAPE trajectories monotone by construction.

use std::collections::VecDeque;

use crate::error::{AtlasError, Result};

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub history_size: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { max_iterations: 500, gradient_tolerance: 1e-8, history_size: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub termination: Termination,
    pub iterations: usize,
    pub evaluations: usize,
}

impl OptimOutcome {
    pub fn converged(&self) -> bool {
        self.termination == Termination::GradientTolerance
    }
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
const MAX_EXPANSIONS: usize = 30;

fn clamp(x: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(lower.iter().zip(upper))
        .map(|(&v, (&lo, &hi))| v.max(lo).min(hi))
        .collect()
}

/// Infinity norm of the projected gradient step `x - P(x - g)`; zero exactly
/// at a box-constrained stationary point.
fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((&xi, &gi), (&lo, &hi))| (xi - (xi - gi).max(lo).min(hi)).abs())
        .fold(0.0, f64::max)
}

struct History {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>, // (s, y, 1/s^T y)
    capacity: usize,
}

impl History {
    fn new(capacity: usize) -> Self {
        Self { pairs: VecDeque::new(), capacity: capacity.max(1) }
    }

    /// Stores the pair with Powell damping: when s^T y is too small (the
    /// Armijo-only line search gives no curvature guarantee), y is blended
    /// with sigma s, sigma = ||y|| / ||s||, so every stored pair has positive
    /// curvature and the model keeps refreshing instead of going stale.
    fn push(&mut self, s: Vec<f64>, mut y: Vec<f64>) {
        let (ns, ny) = (norm(&s), norm(&y));
        if ns == 0.0 || ny == 0.0 {
            return;
        }
        let sy = dot(&s, &y);
        let sigma = ny / ns;
        let sbs = sigma * ns * ns; // s^T (sigma I) s
        let sy = if sy < 0.2 * sbs {
            let theta = 0.8 * sbs / (sbs - sy);
            for (yi, si) in y.iter_mut().zip(&s) {
                *yi = theta * *yi + (1.0 - theta) * sigma * si;
            }
            dot(&s, &y)
        } else {
            sy
        };
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// Two-loop recursion: d = -H g.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q: Vec<f64> = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let alpha = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= alpha * yi;
            }
            alphas.push(alpha);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((s, y, rho), alpha) in self.pairs.iter().zip(alphas.iter().rev()) {
            let beta = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (alpha - beta) * si;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes `objective` over the box `[lower, upper]`, starting from the
/// projection of `x0`. `on_accept` sees the initial point and every accepted
/// iterate in order.
pub fn minimize<F, C>(
    mut objective: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &LbfgsOptions,
    mut on_accept: C,
) -> Result<OptimOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    C: FnMut(&[f64], f64),
{
    assert_eq!(x0.len(), lower.len());
    assert_eq!(x0.len(), upper.len());

    let mut x = clamp(x0, lower, upper);
    let (mut f, mut g) = objective(&x)?;
    let mut evaluations = 1;
    if !f.is_finite() {
        return Err(AtlasError::Optimization("non-finite objective at the starting point".into()));
    }
    on_accept(&x, f);

    let mut history = History::new(opts.history_size);
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    while iterations < opts.max_iterations {
        if projected_gradient_norm(&x, &g, lower, upper) < opts.gradient_tolerance {
            termination = Termination::GradientTolerance;
            break;
        }

        let mut tried_steepest = history.pairs.is_empty();
        let mut d = history.direction(&g);
        if dot(&g, &d) >= 0.0 {
            // Not a descent direction; fall back to steepest descent.
            history.pairs.clear();
            d = g.iter().map(|v| -v).collect();
            tried_steepest = true;
        }

        let accepted = loop {
            match line_search(&mut objective, &x, f, &g, &d, lower, upper, &mut evaluations)? {
                Some(step) => break Some(step),
                None if !tried_steepest => {
                    history.pairs.clear();
                    d = g.iter().map(|v| -v).collect();
                    tried_steepest = true;
                }
                None => break None,
            }
        };

        let Some((x_new, f_new, g_new)) = accepted else {
            termination = Termination::LineSearchFailure;
            break;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        history.push(s, y);

        x = x_new;
        f = f_new;
        g = g_new;
        iterations += 1;
        on_accept(&x, f);
    }
    if termination == Termination::MaxIterations
        && projected_gradient_norm(&x, &g, lower, upper) < opts.gradient_tolerance
    {
        termination = Termination::GradientTolerance;
    }

    Ok(OptimOutcome { x, f, termination, iterations, evaluations })
}

#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    objective: &mut F,
    x: &[f64],
    f: f64,
    g: &[f64],
    d: &[f64],
    lower: &[f64],
    upper: &[f64],
    evaluations: &mut usize,
) -> Result<Option<(Vec<f64>, f64, Vec<f64>)>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let g_norm = norm(g);
    // Fallback candidate near the floating-point floor of the objective: a
    // step that does not raise f but strictly shrinks the gradient still
    // makes progress toward stationarity when Armijo decreases round away.
    let mut fallback: Option<(Vec<f64>, f64, Vec<f64>)> = None;
    let mut try_step = |alpha: f64,
                        evaluations: &mut usize,
                        fallback: &mut Option<(Vec<f64>, f64, Vec<f64>)>|
     -> Result<Option<(Vec<f64>, f64, Vec<f64>)>> {
        let trial: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
        let trial = clamp(&trial, lower, upper);
        let delta: Vec<f64> = trial.iter().zip(x).map(|(a, b)| a - b).collect();
        if norm(&delta) == 0.0 {
            return Ok(None);
        }
        let pred = dot(g, &delta);
        if pred >= 0.0 {
            return Ok(None);
        }
        let (f_trial, g_trial) = objective(&trial)?;
        *evaluations += 1;
        if !f_trial.is_finite() {
            return Ok(None);
        }
        if f_trial <= f + ARMIJO_C1 * pred {
            return Ok(Some((trial, f_trial, g_trial)));
        }
        if f_trial <= f && norm(&g_trial) <= 0.9 * g_norm && fallback.is_none() {
            *fallback = Some((trial, f_trial, g_trial));
        }
        Ok(None)
    };

    // Backtrack from the unit step until Armijo holds.
    let mut alpha = 1.0;
    let mut accepted = None;
    for _ in 0..MAX_BACKTRACKS {
        if let Some(step) = try_step(alpha, evaluations, &mut fallback)? {
            accepted = Some((alpha, step));
            break;
        }
        alpha *= 0.5;
    }
    let Some((mut alpha, mut best)) = accepted else {
        return Ok(fallback);
    };

    // The quasi-Newton direction can be badly underscaled (stale curvature
    // model); expand the step while Armijo keeps holding and the objective
    // keeps strictly improving.
    if alpha == 1.0 {
        for _ in 0..MAX_EXPANSIONS {
            match try_step(2.0 * alpha, evaluations, &mut fallback)? {
                Some(step) if step.1 < best.1 => {
                    alpha *= 2.0;
                    best = step;
                }
                _ => break,
            }
        }
    }
    Ok(Some(best))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(center: Vec<f64>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |x: &[f64]| {
            let f = x.iter().zip(&center).map(|(xi, ci)| (xi - ci).powi(2)).sum();
            let g = x.iter().zip(&center).map(|(xi, ci)| 2.0 * (xi - ci)).collect();
            Ok((f, g))
        }
    }

    #[test]
    fn finds_interior_minimum() {
        let opts = LbfgsOptions::default();
        let out = minimize(
            quadratic(vec![0.3, -0.2, 0.1]),
            &[0.0; 3],
            &[-1.0; 3],
            &[1.0; 3],
            &opts,
            |_, _| {},
        )
        .unwrap();
        assert!(out.converged());
        assert!((out.x[0] - 0.3).abs() < 1e-7);
        assert!(out.f < 1e-12);
    }

    #[test]
    fn respects_bounds() {
        let opts = LbfgsOptions::default();
        let out = minimize(
            quadratic(vec![2.0, -3.0]),
            &[0.0; 2],
            &[-1.0; 2],
            &[1.0; 2],
            &opts,
            |x, _| {
                for &v in x {
                    assert!(v.abs() <= 1.0);
                }
            },
        )
        .unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-9);
        assert!((out.x[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn monotone_accepted_iterates() {
        let mut values = Vec::new();
        let rosenbrock = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            Ok((f, g))
        };
        let opts = LbfgsOptions { max_iterations: 200, ..Default::default() };
        let out = minimize(rosenbrock, &[-1.2, 1.0], &[-2.0; 2], &[2.0; 2], &opts, |_, f| {
            values.push(f)
        })
        .unwrap();
        assert!(out.f < 1e-10, "rosenbrock f = {}", out.f);
        for w in values.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn converged_start_exits_immediately() {
        let opts = LbfgsOptions::default();
        let mut count = 0;
        let out = minimize(
            quadratic(vec![0.5]),
            &[0.5],
            &[-1.0],
            &[1.0],
            &opts,
            |_, _| count += 1,
        )
        .unwrap();
        assert!(out.converged());
        assert_eq!(out.iterations, 0);
        assert_eq!(count, 1);
    }

    #[test]
    fn zero_iteration_budget_records_initial_point_only() {
        let opts = LbfgsOptions { max_iterations: 0, ..Default::default() };
        let mut count = 0;
        let out = minimize(
            quadratic(vec![0.9]),
            &[0.0],
            &[-1.0],
            &[1.0],
            &opts,
            |_, _| count += 1,
        )
        .unwrap();
        assert_eq!(count, 1);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let opts = LbfgsOptions::default();
        let res = minimize(
            |_| Ok((f64::NAN, vec![0.0])),
            &[0.0],
            &[-1.0],
            &[1.0],
            &opts,
            |_, _| {},
        );
        assert!(res.is_err());
    }
}
