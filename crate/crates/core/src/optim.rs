//! Limited-memory quasi-Newton machinery: two-loop recursion and a strong-Wolfe line search.
//!
//! Everything here minimizes. The trainer hands in the negated objective.

use std::collections::VecDeque;

use crate::error::Result;

/// Sufficient-decrease constant.
pub const WOLFE_C1: f64 = 1e-4;
/// Curvature constant.
pub const WOLFE_C2: f64 = 0.9;
const MAX_LINE_SEARCH_EVALS: usize = 40;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Curvature pairs `(s, y)` of the last `capacity` accepted steps.
#[derive(Debug, Clone)]
pub struct LbfgsMemory {
    capacity: usize,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

impl LbfgsMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            pairs: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Stores a pair unless it fails the curvature condition `s.y > 0`.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        if !(sy > 1e-16 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt()) || !sy.is_finite() {
            return false;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
        true
    }

    /// Descent direction `-H g` by the two-loop recursion.
    pub fn direction(&self, gradient: &[f64]) -> Vec<f64> {
        let mut q = gradient.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

/// A function value, its gradient, and whatever else the caller wants carried along.
pub struct Probe<T> {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub extra: T,
}

pub struct LineSearchOutcome<T> {
    pub step: f64,
    pub point: Vec<f64>,
    pub probe: Probe<T>,
    pub evaluations: usize,
}

/// Line search failure: no step met the sufficient-decrease and curvature conditions.
#[derive(Debug, Clone, Copy)]
pub struct LineSearchFailed {
    pub evaluations: usize,
}

fn along(x: &[f64], dir: &[f64], step: f64) -> Vec<f64> {
    x.iter().zip(dir).map(|(a, d)| a + step * d).collect()
}

/// Minimizer of the cubic interpolating `(a, fa, ga)` and `(b, fb, gb)`, safeguarded into
/// the interior of `[a, b]`.
fn cubic_step(a: f64, fa: f64, ga: f64, b: f64, fb: f64, gb: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - ga * gb;
    let mid = 0.5 * (a + b);
    if disc < 0.0 || !disc.is_finite() {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2);
    let margin = 0.1 * (hi - lo);
    if !t.is_finite() || t < lo + margin || t > hi - margin {
        mid
    } else {
        t
    }
}

/// Strong-Wolfe line search along a descent direction, bracketing then zooming.
///
/// Returns `Ok(Err(..))` when the conditions could not be met within the evaluation budget;
/// `Err` only for errors raised by `f`.
pub fn strong_wolfe<T, F>(
    mut f: F,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    dir: &[f64],
    initial_step: f64,
) -> Result<std::result::Result<LineSearchOutcome<T>, LineSearchFailed>>
where
    F: FnMut(&[f64]) -> Result<Probe<T>>,
{
    let d0 = dot(g0, dir);
    if !(d0 < 0.0) {
        return Ok(Err(LineSearchFailed { evaluations: 0 }));
    }
    let mut evals = 0usize;
    let mut prev_step = 0.0;
    let mut prev_value = f0;
    let mut prev_slope = d0;
    let mut step = initial_step;

    loop {
        if evals >= MAX_LINE_SEARCH_EVALS {
            return Ok(Err(LineSearchFailed { evaluations: evals }));
        }
        let point = along(x, dir, step);
        let probe = f(&point)?;
        evals += 1;
        let value = probe.value;
        let slope = dot(&probe.gradient, dir);

        if !value.is_finite() || value > f0 + WOLFE_C1 * step * d0 || (evals > 1 && value >= prev_value) {
            if !value.is_finite() {
                // overshoot into overflow territory: shrink towards the last good step
                step = prev_step + 0.1 * (step - prev_step);
                continue;
            }
            return zoom(
                &mut f, x, f0, d0, dir, (prev_step, prev_value, prev_slope), (step, value, slope), evals,
            );
        }
        if slope.abs() <= -WOLFE_C2 * d0 {
            return Ok(Ok(LineSearchOutcome {
                step,
                point,
                probe,
                evaluations: evals,
            }));
        }
        if slope >= 0.0 {
            return zoom(
                &mut f, x, f0, d0, dir, (step, value, slope), (prev_step, prev_value, prev_slope), evals,
            );
        }
        prev_step = step;
        prev_value = value;
        prev_slope = slope;
        step *= 2.0;
    }
}

#[allow(clippy::too_many_arguments)]
fn zoom<T, F>(
    f: &mut F,
    x: &[f64],
    f0: f64,
    d0: f64,
    dir: &[f64],
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    mut evals: usize,
) -> Result<std::result::Result<LineSearchOutcome<T>, LineSearchFailed>>
where
    F: FnMut(&[f64]) -> Result<Probe<T>>,
{
    // best point satisfying sufficient decrease, in case the curvature test never passes
    let mut fallback: Option<LineSearchOutcome<T>> = None;
    while evals < MAX_LINE_SEARCH_EVALS {
        let step = cubic_step(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2);
        if (hi.0 - lo.0).abs() < 1e-16 * lo.0.abs().max(1.0) {
            break;
        }
        let point = along(x, dir, step);
        let probe = f(&point)?;
        evals += 1;
        let value = probe.value;
        let slope = dot(&probe.gradient, dir);
        if !value.is_finite() || value > f0 + WOLFE_C1 * step * d0 || value >= lo.1 {
            hi = (step, value, slope);
            continue;
        }
        if slope.abs() <= -WOLFE_C2 * d0 {
            return Ok(Ok(LineSearchOutcome {
                step,
                point,
                probe,
                evaluations: evals,
            }));
        }
        if slope * (hi.0 - lo.0) >= 0.0 {
            hi = lo;
        }
        lo = (step, value, slope);
        fallback = Some(LineSearchOutcome {
            step,
            point,
            probe,
            evaluations: evals,
        });
    }
    match fallback {
        Some(mut out) => {
            out.evaluations = evals;
            Ok(Ok(out))
        }
        None => Ok(Err(LineSearchFailed { evaluations: evals })),
    }
}
