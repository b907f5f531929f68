//! Limited-memory BFGS minimiser with a strong-Wolfe line search.
//!
//! The line search brackets a step satisfying the strong Wolfe conditions and
//! refines it with safeguarded cubic interpolation. Objective evaluations may
//! report a point as infeasible (`None`), which the line search treats as an
//! overshoot.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsSettings {
    pub max_iter: usize,
    pub memory: usize,
    /// Relative gradient tolerance: `|g|_inf <= gtol * max(1, |f|)`.
    pub gtol: f64,
    /// Step tolerance: `|dx|_inf <= xtol * max(1, |x|_inf)`.
    pub xtol: f64,
}

impl Default for LbfgsSettings {
    fn default() -> Self {
        Self {
            max_iter: 500,
            memory: 10,
            gtol: 1e-6,
            xtol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Gradient,
    Step,
    LineSearch,
    MaxIterations,
}

/// One accepted iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub value: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub termination: Termination,
    pub trace: Vec<TracePoint>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn relative_grad_norm(value: f64, grad: &[f64]) -> f64 {
    inf_norm(grad) / value.abs().max(1.0)
}

struct Point {
    alpha: f64,
    f: f64,
    slope: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

/// Minimiser of the cubic through `(a, fa, da)` and `(b, fb, db)`, safeguarded
/// to the interior of the bracket.
fn cubic_step(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let lo = a.min(b);
    let hi = a.max(b);
    let width = hi - lo;
    let fallback = 0.5 * (a + b);
    if !(fb.is_finite() && db.is_finite()) {
        return fallback;
    }
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return fallback;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    if t.is_finite() && t > lo + 0.1 * width && t < hi - 0.1 * width {
        t
    } else {
        fallback
    }
}

/// Minimises `f`. `eval(x)` returns the value and gradient, or `None` when `x`
/// is outside the feasible region. `on_iter` sees every accepted iterate.
pub fn minimize<F>(
    mut eval: F,
    x0: &[f64],
    settings: &LbfgsSettings,
    mut on_iter: impl FnMut(&TracePoint),
) -> Option<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let n = x0.len();
    let mut evaluations = 1;
    let (mut f, mut g) = eval(x0)?;
    let mut x = x0.to_vec();
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut trace = vec![TracePoint {
        iteration: 0,
        value: f,
        grad_norm: relative_grad_norm(f, &g),
    }];
    on_iter(&trace[0]);
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    let mut retried = false;

    if n == 0 || relative_grad_norm(f, &g) <= settings.gtol {
        return Some(LbfgsOutcome {
            x,
            value: f,
            grad: g,
            iterations,
            evaluations,
            converged: true,
            termination: Termination::Gradient,
            trace,
        });
    }

    while iterations < settings.max_iter {
        // two-loop recursion
        let mut q: Vec<f64> = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = history
            .back()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or_else(|| 1.0 / inf_norm(&g).max(1.0));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope0 = dot(&g, &dir);
        if !(slope0 < 0.0) {
            history.clear();
            let scale = 1.0 / inf_norm(&g).max(1.0);
            dir = g.iter().map(|v| -v * scale).collect();
            slope0 = dot(&g, &dir);
        }

        let start = Point {
            alpha: 0.0,
            f,
            slope: slope0,
            x: x.clone(),
            g: g.clone(),
        };
        let accepted = line_search(&mut eval, &start, &dir, C1, C2, &mut evaluations);
        let Some(next) = accepted else {
            if !retried && !history.is_empty() {
                history.clear();
                retried = true;
                continue;
            }
            termination = Termination::LineSearch;
            break;
        };
        retried = false;
        iterations += 1;

        let s: Vec<f64> = next.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if history.len() == settings.memory {
                history.pop_front();
            }
            history.push_back((s.clone(), y, 1.0 / sy));
        }
        let step = inf_norm(&s);
        x = next.x;
        f = next.f;
        g = next.g;
        let point = TracePoint {
            iteration: iterations,
            value: f,
            grad_norm: relative_grad_norm(f, &g),
        };
        on_iter(&point);
        trace.push(point);
        if point.grad_norm <= settings.gtol {
            termination = Termination::Gradient;
            break;
        }
        if step <= settings.xtol * inf_norm(&x).max(1.0) {
            termination = Termination::Step;
            break;
        }
    }
    let converged = relative_grad_norm(f, &g) <= settings.gtol;
    Some(LbfgsOutcome {
        x,
        value: f,
        grad: g,
        iterations,
        evaluations,
        converged,
        termination,
        trace,
    })
}

fn probe<F>(eval: &mut F, start: &Point, dir: &[f64], alpha: f64, evaluations: &mut usize) -> Point
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let x: Vec<f64> = start.x.iter().zip(dir).map(|(a, d)| a + alpha * d).collect();
    *evaluations += 1;
    match eval(&x) {
        Some((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => {
            let slope = dot(&g, dir);
            Point { alpha, f, slope, x, g }
        }
        _ => Point {
            alpha,
            f: f64::INFINITY,
            slope: f64::NAN,
            x,
            g: Vec::new(),
        },
    }
}

fn line_search<F>(
    eval: &mut F,
    start: &Point,
    dir: &[f64],
    c1: f64,
    c2: f64,
    evaluations: &mut usize,
) -> Option<Point>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    const MAX_EXPAND: usize = 30;
    let armijo = |p: &Point| p.f <= start.f + c1 * p.alpha * start.slope;
    let mut prev = Point {
        alpha: 0.0,
        f: start.f,
        slope: start.slope,
        x: start.x.clone(),
        g: start.g.clone(),
    };
    let mut alpha = 1.0;
    for i in 0..MAX_EXPAND {
        let cur = probe(eval, start, dir, alpha, evaluations);
        if !armijo(&cur) || (i > 0 && cur.f >= prev.f) {
            return zoom(eval, start, dir, prev, cur, c1, c2, evaluations);
        }
        if cur.slope.abs() <= -c2 * start.slope {
            return Some(cur);
        }
        if cur.slope >= 0.0 {
            return zoom(eval, start, dir, cur, prev, c1, c2, evaluations);
        }
        alpha *= 2.0;
        prev = cur;
    }
    Some(prev).filter(|p| p.alpha > 0.0)
}

#[allow(clippy::too_many_arguments)]
fn zoom<F>(
    eval: &mut F,
    start: &Point,
    dir: &[f64],
    mut lo: Point,
    mut hi: Point,
    c1: f64,
    c2: f64,
    evaluations: &mut usize,
) -> Option<Point>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    const MAX_ZOOM: usize = 60;
    for _ in 0..MAX_ZOOM {
        let alpha = cubic_step(lo.alpha, lo.f, lo.slope, hi.alpha, hi.f, hi.slope);
        if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1e-10) {
            break;
        }
        let cur = probe(eval, start, dir, alpha, evaluations);
        if cur.f > start.f + c1 * alpha * start.slope || cur.f >= lo.f {
            hi = cur;
        } else {
            if cur.slope.abs() <= -c2 * start.slope {
                return Some(cur);
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    // Fall back to the best sufficient-decrease point found.
    Some(lo).filter(|p| p.alpha > 0.0 && p.f < start.f)
}
