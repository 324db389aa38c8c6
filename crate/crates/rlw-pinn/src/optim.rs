//! Optimizers over the flat parameter vector: Adam for the long first
//! stage, L-BFGS with a strong-Wolfe line search for fine tuning.

use std::collections::VecDeque;

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient entry at index {index}")]
    NonFiniteGrad { index: usize },
    #[error("gradient length {grads} does not match parameter length {params}")]
    LengthMismatch { params: usize, grads: usize },
    #[error("non-finite loss at the line-search origin")]
    NonFiniteLoss,
}

/// Either a failure from the objective closure or one raised by the
/// optimizer itself.
#[derive(Debug, thiserror::Error)]
pub enum LbfgsError<E: std::error::Error + 'static> {
    #[error(transparent)]
    Objective(E),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> AdamState {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One in-place update. Gradients must be finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), OptimError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(OptimError::LengthMismatch { params: params.len(), grads: grads.len() });
        }
        for (i, &g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(OptimError::NonFiniteGrad { index: i });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// What one L-BFGS outer iteration did.
#[derive(Clone, Copy, Debug)]
pub struct LbfgsOutcome {
    /// Loss at the new parameters.
    pub loss: f64,
    /// Euclidean gradient norm at the new parameters.
    pub grad_norm: f64,
    /// Gradient norm fell below the tolerance; parameters were not moved
    /// when this was already true at entry.
    pub converged: bool,
    /// The Wolfe search failed and a bounded gradient step was taken
    /// instead (or no step, if even that could not decrease the loss).
    pub line_search_failed: bool,
    /// Accepted step length along the search direction.
    pub step_len: f64,
    /// Objective evaluations spent in this iteration.
    pub evals: usize,
}

/// Limited-memory BFGS with the two-loop recursion and a strong-Wolfe
/// bracket-and-bisect line search.
#[derive(Clone, Debug)]
pub struct LbfgsState {
    history: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    f_g: Option<(f64, Vec<f64>)>,
    pub m_hist: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_zoom: usize,
    /// First trial step length of each line search.
    pub initial_step: f64,
    pub grad_tol: f64,
    /// Displacement bound for the fallback gradient step.
    pub fallback_step: f64,
}

impl LbfgsState {
    pub fn new() -> LbfgsState {
        LbfgsState {
            history: VecDeque::new(),
            f_g: None,
            m_hist: 20,
            c1: 1e-4,
            c2: 0.9,
            max_zoom: 25,
            initial_step: 1.0,
            grad_tol: 1e-9,
            fallback_step: 1e-2,
        }
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Two-loop recursion: d approximates -H g.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.history.len());
        for (s, y, rho) in self.history.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.history.back() {
            let gamma = dot(s, y) / dot(y, y);
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((s, y, rho), a) in self.history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        for qi in q.iter_mut() {
            *qi = -*qi;
        }
        q
    }

    /// One outer iteration: build a direction, run the Wolfe search, update
    /// the curvature history. `loss_fn` must be deterministic within the
    /// call. The entry evaluation is reused from the previous iteration.
    pub fn step<E, F>(
        &mut self,
        params: &mut [f64],
        loss_fn: &mut F,
    ) -> Result<LbfgsOutcome, LbfgsError<E>>
    where
        E: std::error::Error + 'static,
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
    {
        let mut evals = 0;
        let (f0, g0) = match self.f_g.take() {
            Some(fg) => fg,
            None => {
                evals += 1;
                loss_fn(params).map_err(LbfgsError::Objective)?
            }
        };
        if !f0.is_finite() {
            return Err(OptimError::NonFiniteLoss.into());
        }
        if let Some(i) = g0.iter().position(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGrad { index: i }.into());
        }
        let gnorm0 = dot(&g0, &g0).sqrt();
        if gnorm0 < self.grad_tol {
            self.f_g = Some((f0, g0));
            return Ok(LbfgsOutcome {
                loss: f0,
                grad_norm: gnorm0,
                converged: true,
                line_search_failed: false,
                step_len: 0.0,
                evals,
            });
        }

        let mut d = self.direction(&g0);
        let mut dg0 = dot(&d, &g0);
        if dg0 >= 0.0 {
            // Stale curvature produced a non-descent direction.
            self.history.clear();
            d = g0.iter().map(|g| -g).collect();
            dg0 = -gnorm0 * gnorm0;
        }

        let search = self.wolfe_search(params, loss_fn, f0, dg0, &d, &mut evals)?;
        let (alpha, f_new, g_new, failed) = match search {
            Some((alpha, f_new, g_new)) => (alpha, f_new, g_new, false),
            None => {
                // Bounded gradient step with plain backtracking; leaves the
                // parameters alone if even that cannot decrease the loss.
                let scale = (self.fallback_step / gnorm0).min(self.fallback_step);
                let mut alpha = scale;
                let mut accepted = None;
                for _ in 0..20 {
                    let trial: Vec<f64> =
                        params.iter().zip(&g0).map(|(p, g)| p - alpha * g).collect();
                    evals += 1;
                    if let Ok((f, g)) = loss_fn(&trial) {
                        if f.is_finite() && f < f0 {
                            accepted = Some((alpha, trial, f, g));
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                self.history.clear();
                match accepted {
                    Some((a, trial, f, g)) => {
                        params.copy_from_slice(&trial);
                        (a, f, g, true)
                    }
                    None => {
                        self.f_g = Some((f0, g0.clone()));
                        return Ok(LbfgsOutcome {
                            loss: f0,
                            grad_norm: gnorm0,
                            converged: true,
                            line_search_failed: true,
                            step_len: 0.0,
                            evals,
                        });
                    }
                }
            }
        };

        if !failed {
            // Apply the accepted Wolfe step and store the curvature pair.
            let mut s = Vec::with_capacity(params.len());
            let mut y = Vec::with_capacity(params.len());
            for i in 0..params.len() {
                let step = alpha * d[i];
                s.push(step);
                y.push(g_new[i] - g0[i]);
                params[i] += step;
            }
            let sy = dot(&s, &y);
            if sy > 1e-10 {
                if self.history.len() == self.m_hist {
                    self.history.pop_front();
                }
                self.history.push_back((s, y, 1.0 / sy));
            }
        }

        let grad_norm = dot(&g_new, &g_new).sqrt();
        let converged = grad_norm < self.grad_tol;
        self.f_g = Some((f_new, g_new));
        Ok(LbfgsOutcome {
            loss: f_new,
            grad_norm,
            converged,
            line_search_failed: failed,
            step_len: alpha,
            evals,
        })
    }

    /// Strong-Wolfe search along d from the current params. Returns the
    /// accepted (alpha, loss, grad), or None when no acceptable step was
    /// found within the budget. Trial evaluations that error or go
    /// non-finite are treated as unacceptable points.
    #[allow(clippy::too_many_arguments)]
    fn wolfe_search<E, F>(
        &self,
        params: &[f64],
        loss_fn: &mut F,
        f0: f64,
        dg0: f64,
        d: &[f64],
        evals: &mut usize,
    ) -> Result<Option<(f64, f64, Vec<f64>)>, LbfgsError<E>>
    where
        E: std::error::Error + 'static,
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
    {
        let probe = |alpha: f64, loss_fn: &mut F, evals: &mut usize| {
            let trial: Vec<f64> = params.iter().zip(d).map(|(p, di)| p + alpha * di).collect();
            *evals += 1;
            match loss_fn(&trial) {
                Ok((f, g)) if f.is_finite() => {
                    let dg = dot(&g, d);
                    Some((f, g, dg))
                }
                _ => None,
            }
        };

        // Bracketing phase: expand until the minimum is straddled.
        let mut alpha_prev = 0.0;
        let mut f_prev = f0;
        let mut alpha = self.initial_step;
        let mut bracket = None;
        for iter in 0..20 {
            match probe(alpha, loss_fn, evals) {
                None => {
                    // Unacceptable territory; the bracket ends here.
                    bracket = Some((alpha_prev, f_prev, alpha));
                    break;
                }
                Some((f, g, dg)) => {
                    if f > f0 + self.c1 * alpha * dg0 || (iter > 0 && f >= f_prev) {
                        bracket = Some((alpha_prev, f_prev, alpha));
                        break;
                    }
                    if dg.abs() <= -self.c2 * dg0 {
                        return Ok(Some((alpha, f, g)));
                    }
                    if dg >= 0.0 {
                        bracket = Some((alpha, f, alpha_prev));
                        break;
                    }
                    alpha_prev = alpha;
                    f_prev = f;
                    alpha *= 2.0;
                }
            }
        }
        let (mut lo, mut f_lo, mut hi) = match bracket {
            Some(b) => b,
            None => return Ok(None),
        };

        // Zoom phase: bisect the bracket.
        for _ in 0..self.max_zoom {
            let mid = 0.5 * (lo + hi);
            match probe(mid, loss_fn, evals) {
                None => hi = mid,
                Some((f, g, dg)) => {
                    if f > f0 + self.c1 * mid * dg0 || f >= f_lo {
                        hi = mid;
                    } else {
                        if dg.abs() <= -self.c2 * dg0 {
                            return Ok(Some((mid, f, g)));
                        }
                        if dg * (hi - lo) >= 0.0 {
                            hi = lo;
                        }
                        lo = mid;
                        f_lo = f;
                    }
                }
            }
        }
        Ok(None)
    }
}

impl Default for LbfgsState {
    fn default() -> LbfgsState {
        LbfgsState::new()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
