//! Box-constrained limited-memory BFGS for maximizing smooth objectives.

use std::collections::VecDeque;

use nalgebra::DVector;

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub(crate) struct OptimConfig {
    pub grad_tol: f64,
    pub step_tol: f64,
    /// Relative first-order gain below which a line search stops trying.
    pub f_tol: f64,
    pub max_iter: usize,
    pub memory: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            grad_tol: 1e-6,
            step_tol: 1e-10,
            f_tol: 1e-12,
            max_iter: 200,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum StopReason {
    Gradient,
    Step,
    MaxIter,
    LineSearch,
    /// The predicted gain fell below the objective's working precision.
    Flat,
}

#[derive(Debug, Clone)]
pub(crate) struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    /// ∞-norm of the projected gradient at `x`.
    pub grad_norm: f64,
    pub iterations: usize,
    pub reason: StopReason,
}

impl OptimResult {
    pub fn converged(&self) -> bool {
        matches!(self.reason, StopReason::Gradient | StopReason::Step | StopReason::Flat)
    }
}

fn project(x: &mut DVector<f64>, lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

/// Ascent gradient with components that push against an active bound removed.
fn projected(g: &DVector<f64>, x: &DVector<f64>, lo: &[f64], hi: &[f64]) -> DVector<f64> {
    DVector::from_fn(g.len(), |i, _| {
        if (x[i] <= lo[i] && g[i] < 0.0) || (x[i] >= hi[i] && g[i] > 0.0) {
            0.0
        } else {
            g[i]
        }
    })
}

/// Maximizes `f` over the box `[lo, hi]`. `f` returns the value and the
/// gradient; errors and non-finite values reject a trial point.
pub(crate) fn maximize<F>(
    mut f: F,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    cfg: &OptimConfig,
) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, DVector<f64>)>,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    project(&mut x, lo, hi);
    let (mut fx, mut g) = f(x.as_slice())?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(crate::error::Error::FitFailure(format!(
            "objective not finite at starting point {:?}",
            x.as_slice()
        )));
    }
    // Pairs (s, y, 1/yᵀs) for the negated objective.
    let mut hist: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut restarted = false;
    loop {
        let pg = projected(&g, &x, lo, hi);
        let gnorm = pg.amax();
        if gnorm < cfg.grad_tol {
            return Ok(done(x, fx, gnorm, iterations, StopReason::Gradient));
        }
        if iterations >= cfg.max_iter {
            return Ok(done(x, fx, gnorm, iterations, StopReason::MaxIter));
        }
        iterations += 1;
        let free: Vec<bool> = (0..n).map(|i| pg[i] != 0.0 || (x[i] > lo[i] && x[i] < hi[i])).collect();

        let mut accepted = None;
        let mut flat = false;
        for attempt in 0..2 {
            // Work with the negated objective: descent direction d = −H·(−g).
            let mut d = if attempt == 0 && !hist.is_empty() {
                two_loop(&hist, &pg, &free)
            } else {
                pg.clone()
            };
            for i in 0..n {
                if !free[i] {
                    d[i] = 0.0;
                }
            }
            if d.dot(&pg) <= 0.0 {
                d = pg.clone();
            }
            let mut t = if hist.is_empty() {
                (1.0 / d.amax()).min(1.0)
            } else {
                1.0
            };
            for _ in 0..50 {
                let mut xt = &x + &d * t;
                project(&mut xt, lo, hi);
                let s = &xt - &x;
                if s.amax() == 0.0 {
                    break;
                }
                if g.dot(&s) <= cfg.f_tol * fx.abs().max(1.0) {
                    flat = true;
                    break;
                }
                if let Ok((ft, gt)) = f(xt.as_slice()) {
                    if ft.is_finite()
                        && gt.iter().all(|v| v.is_finite())
                        && ft >= fx + 1e-4 * g.dot(&s)
                    {
                        accepted = Some((xt, ft, gt));
                        break;
                    }
                }
                t *= 0.5;
            }
            if accepted.is_some() || hist.is_empty() || flat {
                break;
            }
            hist.clear();
        }

        let Some((xn, fn_, gn)) = accepted else {
            let reason = if flat { StopReason::Flat } else { StopReason::LineSearch };
            return Ok(done(x, fx, gnorm, iterations, reason));
        };
        let s = &xn - &x;
        // y for the negated objective
        let y = &g - &gn;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            hist.push_back((s.clone(), y, 1.0 / sy));
            if hist.len() > cfg.memory {
                hist.pop_front();
            }
        }
        x = xn;
        fx = fn_;
        g = gn;
        if s.amax() < cfg.step_tol {
            let gnorm = projected(&g, &x, lo, hi).amax();
            // a stalled quasi-Newton direction gets one fresh gradient restart
            if gnorm >= cfg.grad_tol && !restarted {
                hist.clear();
                restarted = true;
                continue;
            }
            return Ok(done(x, fx, gnorm, iterations, StopReason::Step));
        }
        restarted = false;
    }
}

fn done(x: DVector<f64>, value: f64, grad_norm: f64, iterations: usize, reason: StopReason) -> OptimResult {
    OptimResult {
        x: x.as_slice().to_vec(),
        value,
        grad_norm,
        iterations,
        reason,
    }
}

/// Two-loop recursion on the free subspace; returns the ascent direction.
fn two_loop(
    hist: &VecDeque<(DVector<f64>, DVector<f64>, f64)>,
    pg: &DVector<f64>,
    free: &[bool],
) -> DVector<f64> {
    let mask = |v: &DVector<f64>| DVector::from_fn(v.len(), |i, _| if free[i] { v[i] } else { 0.0 });
    let mut q = pg.clone();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = rho * mask(s).dot(&q);
        q -= mask(y) * a;
        alphas.push(a);
    }
    let (s, y, _) = hist.back().expect("non-empty history");
    let (sm, ym) = (mask(s), mask(y));
    let yy = ym.dot(&ym);
    let gamma = if yy > 0.0 && sm.dot(&ym) > 0.0 {
        sm.dot(&ym) / yy
    } else {
        1.0
    };
    let mut r = q * gamma;
    for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
        let b = rho * mask(y).dot(&r);
        r += mask(s) * (a - b);
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_interior() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = -((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2));
            let g = DVector::from_vec(vec![
                2.0 * (1.0 - a) + 400.0 * a * (b - a * a),
                -200.0 * (b - a * a),
            ]);
            Ok((v, g))
        };
        let r = maximize(f, &[-1.2, 1.0], &[-5.0, -5.0], &[5.0, 5.0], &OptimConfig::default()).unwrap();
        assert!(r.converged());
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r.x);
    }

    #[test]
    fn active_bound() {
        // maximum of −(x−3)² − (y+1)² on [0,2]×[0,2] is at (2, 0)
        let f = |x: &[f64]| {
            let v = -(x[0] - 3.0).powi(2) - (x[1] + 1.0).powi(2);
            Ok((v, DVector::from_vec(vec![-2.0 * (x[0] - 3.0), -2.0 * (x[1] + 1.0)])))
        };
        let r = maximize(f, &[1.0, 1.0], &[0.0, 0.0], &[2.0, 2.0], &OptimConfig::default()).unwrap();
        assert_eq!(r.x, vec![2.0, 0.0]);
        assert!(r.converged());
        assert_eq!(r.grad_norm, 0.0);
    }

    #[test]
    fn log_bowl() {
        let f = |x: &[f64]| {
            let den = 1.0 + x[0] * x[0] + 10.0 * x[1] * x[1] + x[0] * x[1];
            let g = DVector::from_vec(vec![-(2.0 * x[0] + x[1]) / den, -(20.0 * x[1] + x[0]) / den]);
            Ok((-den.ln(), g))
        };
        let r = maximize(f, &[3.0, -2.0], &[-10.0, -10.0], &[10.0, 10.0], &OptimConfig::default()).unwrap();
        assert!(r.converged());
        assert!(r.x[0].abs() < 1e-5 && r.x[1].abs() < 1e-5);
    }

    #[test]
    fn stops_once_gains_drop_below_value_noise() {
        let mut calls = 0;
        let f = |x: &[f64]| {
            calls += 1;
            // rounding-like wobble of relative size 1e-11
            let v = 100.0 - (x[0] - 1.0).powi(2) + 1e-9 * (1e9 * x[0]).sin();
            Ok((v, DVector::from_vec(vec![-2.0 * (x[0] - 1.0)])))
        };
        let cfg = OptimConfig { grad_tol: 1e-14, ..OptimConfig::default() };
        let r = maximize(f, &[4.0], &[-10.0], &[10.0], &cfg).unwrap();
        assert!(r.converged(), "{:?}", r.reason);
        assert!((r.x[0] - 1.0).abs() < 1e-4);
        assert!(calls < 60, "{calls}");
    }

    #[test]
    fn rejects_nan_region() {
        // NaN for x > 1 must be treated as a rejected step
        let f = |x: &[f64]| {
            let v = if x[0] > 1.0 { f64::NAN } else { -(x[0] - 0.9).powi(2) };
            Ok((v, DVector::from_vec(vec![-2.0 * (x[0] - 0.9)])))
        };
        let r = maximize(f, &[-3.0], &[-5.0], &[5.0], &OptimConfig::default()).unwrap();
        assert!((r.x[0] - 0.9).abs() < 1e-6);
    }
}
