//! First-order optimizers used for fitting. Both maximize.

use std::collections::VecDeque;

use crate::error::Result;

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(dim: usize, step_size: f64) -> Self {
        Adam {
            step_size,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// One ascent step along `grad`.
    pub fn step(&mut self, x: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..x.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            x[i] += self.step_size * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsOptions {
    pub max_iters: usize,
    pub history: usize,
    /// Stop when the relative objective change falls below this.
    pub tol: f64,
    pub armijo: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            max_iters: 200,
            history: 10,
            tol: 1e-9,
            armijo: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LbfgsStop {
    MaxIters,
    Converged,
    LineSearchFailed,
    Callback,
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iters: usize,
    pub stop: LbfgsStop,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximizes `f` with limited-memory BFGS and a backtracking Armijo line
/// search. `f` returns the value and its gradient; errors during the line
/// search are treated as rejected steps, an error at `x0` is returned.
/// `on_iter(iter, value, x)` is called after every accepted step and may
/// return `false` to stop.
pub fn lbfgs_maximize<F, C>(mut f: F, x0: Vec<f64>, opts: &LbfgsOptions, mut on_iter: C) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    C: FnMut(usize, f64, &[f64]) -> bool,
{
    let mut x = x0;
    let (mut fx, mut gx) = f(&x)?;
    let mut s_hist: VecDeque<Vec<f64>> = VecDeque::new();
    let mut y_hist: VecDeque<Vec<f64>> = VecDeque::new();
    let mut stop = LbfgsStop::MaxIters;
    let mut iters = 0;

    for it in 1..=opts.max_iters {
        iters = it;
        // Two-loop recursion on the minimization problem -f.
        let mut q: Vec<f64> = gx.iter().map(|g| -g).collect();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            alpha[i] = rho * dot(&s_hist[i], &q);
            for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        let gamma = if k > 0 {
            dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1])
        } else {
            1.0 / dot(&gx, &gx).sqrt().max(1e-12)
        };
        for v in q.iter_mut() {
            *v *= gamma;
        }
        for i in 0..k {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let beta = rho * dot(&y_hist[i], &q);
            for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        // Ascent direction for f.
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&gx, &dir);
        if !(slope > 0.0) || !slope.is_finite() {
            s_hist.clear();
            y_hist.clear();
            let scale = 1.0 / dot(&gx, &gx).sqrt().max(1e-12);
            dir = gx.iter().map(|g| g * scale).collect();
            slope = dot(&gx, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-14 {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            if let Ok((fn_, gn)) = f(&xn) {
                if fn_.is_finite() && fn_ >= fx + opts.armijo * step * slope {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            stop = LbfgsStop::LineSearchFailed;
            break;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gx.iter().zip(&gn).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 {
            if s_hist.len() == opts.history {
                s_hist.pop_front();
                y_hist.pop_front();
            }
            s_hist.push_back(s);
            y_hist.push_back(y);
        }
        let rel = (fn_ - fx).abs() / fx.abs().max(1.0);
        x = xn;
        fx = fn_;
        gx = gn;
        if !on_iter(it, fx, &x) {
            stop = LbfgsStop::Callback;
            break;
        }
        if rel < opts.tol {
            stop = LbfgsStop::Converged;
            break;
        }
    }
    Ok(LbfgsResult {
        x,
        value: fx,
        iters,
        stop,
    })
}
