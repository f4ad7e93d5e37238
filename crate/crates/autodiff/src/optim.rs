//! First-order optimizers over flat parameter buffers.

use std::collections::VecDeque;

use crate::error::{AutodiffError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Lbfgs,
    PlainGd,
}

/// Objective callback: value and gradient at a point.
pub type Objective<'a> = dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + 'a;

fn check_finite(grad: &[f64]) -> Result<()> {
    if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
        return Err(AutodiffError::NonFinite(format!("gradient element {i} is {}", grad[i])));
    }
    Ok(())
}

fn check_len(params: &[f64], grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() {
        return Err(AutodiffError::Invalid(format!("{} params but {} gradient values", params.len(), grad.len())));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug)]
pub struct PlainGd {
    pub lr: f64,
}

impl PlainGd {
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_len(params, grad)?;
        check_finite(grad)?;
        for (p, g) in params.iter_mut().zip(grad) {
            *p -= self.lr * g;
        }
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_len(params, grad)?;
        check_finite(grad)?;
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Limited-memory BFGS with a backtracking (Armijo) line search.
#[derive(Clone, Debug)]
pub struct Lbfgs {
    pub lr: f64,
    pub memory: usize,
    pub armijo: f64,
    pub max_trials: usize,
    history: VecDeque<(Vec<f64>, Vec<f64>)>,
}

impl Lbfgs {
    pub fn new(lr: f64) -> Self {
        Self { lr, memory: 10, armijo: 1e-4, max_trials: 20, history: VecDeque::new() }
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Two-loop recursion: returns `H * grad` for the implicit inverse Hessian.
    fn apply_inverse_hessian(&self, grad: &[f64]) -> Vec<f64> {
        let mut q = grad.to_vec();
        let mut alphas = Vec::with_capacity(self.history.len());
        for (s, y) in self.history.iter().rev() {
            let rho = 1.0 / dot(y, s);
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push((a, rho));
        }
        if let Some((s, y)) = self.history.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y), (a, rho)) in self.history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q
    }

    /// One iteration. On success `params` moves to the accepted point and its
    /// value and gradient are returned; on failure `params` and the history
    /// are unchanged.
    pub fn step(
        &mut self,
        params: &mut [f64],
        value: f64,
        grad: &[f64],
        eval: &mut Objective<'_>,
        project: &dyn Fn(&mut [f64]),
    ) -> Result<(f64, Vec<f64>)> {
        check_len(params, grad)?;
        check_finite(grad)?;
        let mut dir: Vec<f64> = self.apply_inverse_hessian(grad).into_iter().map(|v| -v).collect();
        if dot(&dir, grad) >= 0.0 || dir.iter().any(|v| !v.is_finite()) {
            self.history.clear();
            dir = grad.iter().map(|v| -v).collect();
        }
        let mut t = self.lr;
        if self.history.is_empty() {
            let gnorm = dot(grad, grad).sqrt();
            if gnorm > 1.0 {
                t /= gnorm;
            }
        }
        let mut trial = vec![0.0; params.len()];
        for _ in 0..self.max_trials {
            for ((x, p), d) in trial.iter_mut().zip(params.iter()).zip(&dir) {
                *x = p + t * d;
            }
            project(&mut trial);
            let step: Vec<f64> = trial.iter().zip(params.iter()).map(|(a, b)| a - b).collect();
            let decrease = dot(grad, &step);
            if let Ok((fv, gv)) = eval(&trial) {
                if fv.is_finite() && gv.iter().all(|v| v.is_finite()) && fv <= value + self.armijo * decrease {
                    let y: Vec<f64> = gv.iter().zip(grad).map(|(a, b)| a - b).collect();
                    if dot(&step, &y) > 1e-10 {
                        if self.history.len() == self.memory {
                            self.history.pop_front();
                        }
                        self.history.push_back((step, y));
                    }
                    params.copy_from_slice(&trial);
                    return Ok((fv, gv));
                }
            }
            t *= 0.5;
        }
        Err(AutodiffError::LineSearch(self.max_trials))
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(Adam),
    Lbfgs(Lbfgs),
    PlainGd(PlainGd),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr)),
            OptimizerKind::Lbfgs => Optimizer::Lbfgs(Lbfgs::new(lr)),
            OptimizerKind::PlainGd => Optimizer::PlainGd(PlainGd { lr }),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Adam(_) => OptimizerKind::Adam,
            Optimizer::Lbfgs(_) => OptimizerKind::Lbfgs,
            Optimizer::PlainGd(_) => OptimizerKind::PlainGd,
        }
    }

    /// Runs one update. Returns the objective at the new point when the
    /// optimizer had to evaluate it anyway (L-BFGS), so callers can skip a
    /// re-evaluation.
    pub fn step(
        &mut self,
        params: &mut [f64],
        value: f64,
        grad: &[f64],
        eval: &mut Objective<'_>,
        project: &dyn Fn(&mut [f64]),
    ) -> Result<Option<(f64, Vec<f64>)>> {
        match self {
            Optimizer::Adam(a) => {
                a.step(params, grad)?;
                project(params);
                Ok(None)
            }
            Optimizer::PlainGd(g) => {
                g.step(params, grad)?;
                project(params);
                Ok(None)
            }
            Optimizer::Lbfgs(l) => l.step(params, value, grad, eval, project).map(Some),
        }
    }
}

/// Runs up to `iterations` optimizer steps from `params`, returning the
/// objective value observed before each step plus the final value.
/// A failed L-BFGS line search ends the run early (no further progress).
pub fn minimize(
    opt: &mut Optimizer,
    params: &mut [f64],
    iterations: usize,
    eval: &mut Objective<'_>,
    project: &dyn Fn(&mut [f64]),
) -> Result<Vec<f64>> {
    let mut trace = Vec::with_capacity(iterations + 1);
    let mut current = eval(params)?;
    for _ in 0..iterations {
        let (value, grad) = current;
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite(format!("objective is {value}")));
        }
        trace.push(value);
        match opt.step(params, value, &grad, eval, project) {
            Ok(Some(next)) => current = next,
            Ok(None) => current = eval(params)?,
            Err(AutodiffError::LineSearch(_)) => {
                current = (value, grad);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    trace.push(current.0);
    Ok(trace)
}
