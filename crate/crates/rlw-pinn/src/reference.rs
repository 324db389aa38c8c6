//! Finite-difference reference solver: an independent oracle for scenarios
//! without closed-form solutions.
//!
//! Scheme: three time levels. With w = u^{n+1} - u^{n-1}, each step solves
//!
//!   (I - mu d2/dx^2) w = -(dt/dx) [F_{i+1} - F_{i-1}],
//!   F = u^n + eps (u^n)^2 / 2,
//!
//! so the dispersive term acts implicitly through one constant tridiagonal
//! matrix (factored once) while the nonlinear flux is taken at the middle
//! level. Second order in both dx and dt. The first step is bootstrapped by
//! a midpoint predictor-corrector using the same matrix.

use crate::physics::{
    boundary_value, initial_condition, PhysicsError, ScenarioConfig, ScenarioKind, UniformGrid,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ReferenceError {
    #[error("dx {dx} does not divide the domain length {len}")]
    DxMisfit { dx: f64, len: f64 },
    #[error("dt {dt} does not divide t_final {t_final}")]
    DtMisfit { dt: f64, t_final: f64 },
    #[error("sample time {t} outside [0, {t_final}]")]
    SampleOutOfRange { t: f64, t_final: f64 },
    #[error("step size must be positive, got {value}")]
    BadStep { value: f64 },
    #[error("solution blew up at step {step} (t = {t:.4}): max |u| = {max:.3e}")]
    Instability { step: usize, t: f64, max: f64 },
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

/// Run description: scenario, resolution, and which time slices to keep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FdConfig {
    pub scenario: ScenarioConfig,
    pub dx: f64,
    pub dt: f64,
    /// Times whose nearest-step snapshots are stored in the result.
    pub sample_times: Vec<f64>,
}

impl FdConfig {
    /// Resolution defaults per scenario; snapshots at t = 0 and t_final.
    pub fn default_for(scenario: ScenarioConfig) -> FdConfig {
        let (dx, dt) = match scenario.kind {
            ScenarioKind::SingleSoliton { .. } => (0.1, 0.01),
            ScenarioKind::TwoSoliton { .. } => (0.05, 0.005),
            ScenarioKind::UndularBore { .. } => (0.15, 0.05),
        };
        FdConfig { scenario, dx, dt, sample_times: vec![0.0, scenario.t_final] }
    }

    fn validate(&self) -> Result<(usize, usize), ReferenceError> {
        self.scenario.validate()?;
        if !(self.dx > 0.0) {
            return Err(ReferenceError::BadStep { value: self.dx });
        }
        if !(self.dt > 0.0) {
            return Err(ReferenceError::BadStep { value: self.dt });
        }
        let len = self.scenario.x_max - self.scenario.x_min;
        let cells = len / self.dx;
        if (cells - cells.round()).abs() > 1e-9 * cells.max(1.0) || cells.round() < 2.0 {
            return Err(ReferenceError::DxMisfit { dx: self.dx, len });
        }
        let steps = self.scenario.t_final / self.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) || steps.round() < 1.0 {
            return Err(ReferenceError::DtMisfit { dt: self.dt, t_final: self.scenario.t_final });
        }
        for &t in &self.sample_times {
            if !(0.0..=self.scenario.t_final + 1e-12).contains(&t) {
                return Err(ReferenceError::SampleOutOfRange {
                    t,
                    t_final: self.scenario.t_final,
                });
            }
        }
        Ok((cells.round() as usize + 1, steps.round() as usize))
    }
}

/// Field snapshots on a fixed spatial grid at selected times.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridField {
    pub grid: UniformGrid,
    /// Actual snapshot times (each the step time nearest a requested one).
    pub times: Vec<f64>,
    /// One row of grid.n values per snapshot time.
    pub rows: Vec<Vec<f64>>,
}

impl GridField {
    /// Row whose time is nearest `t`; rejects queries further than half a
    /// snapshot spacing away only if no snapshot is within `tol`.
    pub fn snapshot(&self, t: f64, tol: f64) -> Option<(&[f64], f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &ti) in self.times.iter().enumerate() {
            let d = (ti - t).abs();
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (i, d) = best?;
        (d <= tol).then(|| (self.rows[i].as_slice(), self.times[i]))
    }
}

/// Constant tridiagonal system (l, d, u) with the Thomas factorization
/// computed once and reused every step.
struct Tridiag {
    /// Upper-diagonal multipliers after forward elimination.
    c_star: Vec<f64>,
    /// Reciprocal pivots.
    inv_piv: Vec<f64>,
    lower: f64,
}

impl Tridiag {
    /// Factor the n x n matrix with constant diagonals (lower, diag, upper).
    fn factor(n: usize, lower: f64, diag: f64, upper: f64) -> Tridiag {
        let mut c_star = Vec::with_capacity(n);
        let mut inv_piv = Vec::with_capacity(n);
        let mut piv = diag;
        inv_piv.push(1.0 / piv);
        c_star.push(upper / piv);
        for _ in 1..n {
            piv = diag - lower * c_star.last().unwrap();
            inv_piv.push(1.0 / piv);
            c_star.push(upper * inv_piv.last().unwrap());
        }
        Tridiag { c_star, inv_piv, lower }
    }

    /// Solve in place.
    fn solve(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        rhs[0] *= self.inv_piv[0];
        for i in 1..n {
            rhs[i] = (rhs[i] - self.lower * rhs[i - 1]) * self.inv_piv[i];
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= self.c_star[i] * rhs[i + 1];
        }
    }
}

/// March the scheme across the full time range, storing the requested
/// snapshots.
pub fn fd_solve(cfg: &FdConfig) -> Result<GridField, ReferenceError> {
    let (n, steps) = cfg.validate()?;
    let scenario = &cfg.scenario;
    let grid = UniformGrid { lo: scenario.x_min, hi: scenario.x_max, n };
    let (dx, dt) = (cfg.dx, cfg.dt);
    let (eps, mu) = (scenario.rlw.epsilon, scenario.rlw.mu);

    // Map each requested sample to its nearest step index.
    let mut wanted: Vec<(usize, usize)> = cfg
        .sample_times
        .iter()
        .enumerate()
        .map(|(si, &t)| ((t / dt).round() as usize, si))
        .collect();
    wanted.sort_unstable();

    let xs = grid.points();
    let u0: Vec<f64> = xs.iter().map(|&x| initial_condition(x, scenario)).collect();
    let cap = 10.0 * u0.iter().fold(0.0_f64, |m, &v| m.max(v.abs())).max(1e-12);

    // Interior system for w = u_new - u_old: tridiag(-r, 1 + 2r, -r).
    let r = mu / (dx * dx);
    let sys = Tridiag::factor(n - 2, -r, 1.0 + 2.0 * r, -r);
    let flux = |u: &[f64], i: usize| u[i] + 0.5 * eps * u[i] * u[i];

    let mut times = vec![0.0; cfg.sample_times.len()];
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); cfg.sample_times.len()];
    let keep = |step: usize, u: &[f64], times: &mut Vec<f64>, rows: &mut Vec<Vec<f64>>| {
        for &(_, si) in wanted.iter().filter(|&&(ws, _)| ws == step) {
            times[si] = step as f64 * dt;
            rows[si] = u.to_vec();
        }
    };
    keep(0, &u0, &mut times, &mut rows);

    if steps == 0 {
        return Ok(GridField { grid, times, rows });
    }

    // Bootstrap u^1 by a midpoint predictor-corrector on the same matrix:
    // (I - mu d2) (u1 - u0) = -dt dx_c F(u_half).
    let mut u1 = u0.clone();
    for _ in 0..3 {
        let mut rhs = vec![0.0; n - 2];
        for i in 1..n - 1 {
            let fp = 0.5 * (flux(&u0, i + 1) + flux(&u1, i + 1));
            let fm = 0.5 * (flux(&u0, i - 1) + flux(&u1, i - 1));
            rhs[i - 1] = -dt / (2.0 * dx) * (fp - fm);
        }
        let bw_lo = boundary_value(grid.lo, dt, scenario) - u0[0];
        let bw_hi = boundary_value(grid.hi, dt, scenario) - u0[n - 1];
        rhs[0] += r * bw_lo;
        rhs[n - 3] += r * bw_hi;
        sys.solve(&mut rhs);
        u1[0] = u0[0] + bw_lo;
        u1[n - 1] = u0[n - 1] + bw_hi;
        for i in 1..n - 1 {
            u1[i] = u0[i] + rhs[i - 1];
        }
    }
    keep(1, &u1, &mut times, &mut rows);

    let mut prev = u0;
    let mut cur = u1;
    let mut rhs = vec![0.0; n - 2];
    for step in 2..=steps {
        let t_new = step as f64 * dt;
        for i in 1..n - 1 {
            rhs[i - 1] = -dt / dx * (flux(&cur, i + 1) - flux(&cur, i - 1));
        }
        let bw_lo = boundary_value(grid.lo, t_new, scenario) - prev[0];
        let bw_hi = boundary_value(grid.hi, t_new, scenario) - prev[n - 1];
        rhs[0] += r * bw_lo;
        rhs[n - 3] += r * bw_hi;
        sys.solve(&mut rhs);
        // prev becomes the new level in place.
        prev[0] += bw_lo;
        prev[n - 1] += bw_hi;
        let mut max_abs = prev[0].abs().max(prev[n - 1].abs());
        for i in 1..n - 1 {
            prev[i] += rhs[i - 1];
            max_abs = max_abs.max(prev[i].abs());
        }
        if !(max_abs <= cap) {
            return Err(ReferenceError::Instability { step, t: t_new, max: max_abs });
        }
        std::mem::swap(&mut prev, &mut cur);
        keep(step, &cur, &mut times, &mut rows);
    }
    Ok(GridField { grid, times, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::find_peaks;
    use crate::physics::{exact_single_soliton, grid_gradient, invariants};

    fn soliton_linf(dx: f64, dt: f64) -> f64 {
        let scenario = ScenarioConfig::single_soliton();
        let cfg = FdConfig { scenario, dx, dt, sample_times: vec![scenario.t_final] };
        let field = fd_solve(&cfg).unwrap();
        let (row, t) = field.snapshot(20.0, 1e-9).unwrap();
        let mut worst = 0.0_f64;
        for (i, &u) in row.iter().enumerate() {
            let x = field.grid.point(i);
            worst = worst.max((u - exact_single_soliton(x, t, &scenario)).abs());
        }
        worst
    }

    #[test]
    fn soliton_accuracy_and_convergence_order() {
        let coarse = soliton_linf(0.2, 0.02);
        let fine = soliton_linf(0.1, 0.01);
        assert!(fine <= 1e-3, "Linf at t=20: {fine}");
        let order = (coarse / fine).log2() / 2.0_f64.log2();
        assert!(order >= 1.8, "observed order {order} (errors {coarse} vs {fine})");
    }

    #[test]
    fn soliton_invariant_drift_below_a_tenth_percent() {
        let scenario = ScenarioConfig::single_soliton();
        let cfg = FdConfig {
            scenario,
            dx: 0.1,
            dt: 0.01,
            sample_times: vec![0.0, 20.0],
        };
        let field = fd_solve(&cfg).unwrap();
        let h = field.grid.spacing();
        let tri = |row: &[f64]| {
            let g = grid_gradient(row, h).unwrap();
            invariants(row, &g, h, scenario.rlw).unwrap()
        };
        let (r0, _) = field.snapshot(0.0, 1e-9).unwrap();
        let (r1, _) = field.snapshot(20.0, 1e-9).unwrap();
        let (a, b) = (tri(r0), tri(r1));
        for (x, y) in a.as_array().iter().zip(b.as_array()) {
            assert!(((x - y) / x).abs() < 1e-3, "{x} vs {y}");
        }
    }

    #[test]
    fn two_soliton_collision_is_elastic() {
        let scenario = ScenarioConfig::two_soliton();
        let mut cfg = FdConfig::default_for(scenario);
        cfg.sample_times = vec![30.0];
        let field = fd_solve(&cfg).unwrap();
        let (row, _) = field.snapshot(30.0, 1e-9).unwrap();
        let xs = field.grid.points();
        let peaks = find_peaks(row, &xs, 0.1).unwrap();
        assert_eq!(peaks.len(), 2, "{peaks:?}");
        // Leading wave: the taller soliton has passed through.
        assert!((peaks[0].amplitude - 5.331).abs() <= 0.01 * 5.331, "{:?}", peaks[0]);
        assert!((peaks[0].position - 100.7).abs() <= 0.01 * 100.7, "{:?}", peaks[0]);
    }

    #[test]
    fn steep_bore_leading_wave() {
        let scenario = ScenarioConfig::undular_bore(2.0);
        let mut cfg = FdConfig::default_for(scenario);
        cfg.sample_times = vec![250.0];
        let field = fd_solve(&cfg).unwrap();
        let (row, _) = field.snapshot(250.0, 1e-9).unwrap();
        let xs = field.grid.points();
        let peaks = find_peaks(row, &xs, 0.01).unwrap();
        assert!(!peaks.is_empty());
        let lead = peaks[0];
        assert!((lead.amplitude - 0.1820).abs() <= 0.01 * 0.1820, "{lead:?}");
        assert!((lead.position - 265.9).abs() <= 0.005 * 265.9, "{lead:?}");
    }

    #[test]
    fn misfit_steps_are_rejected() {
        let scenario = ScenarioConfig::single_soliton();
        let bad_dx = FdConfig { scenario, dx: 0.3, dt: 0.01, sample_times: vec![] };
        assert!(matches!(fd_solve(&bad_dx), Err(ReferenceError::DxMisfit { .. })));
        let bad_dt = FdConfig { scenario, dx: 0.1, dt: 0.3, sample_times: vec![] };
        assert!(matches!(fd_solve(&bad_dt), Err(ReferenceError::DtMisfit { .. })));
        let bad_sample = FdConfig { scenario, dx: 0.1, dt: 0.01, sample_times: vec![25.0] };
        assert!(matches!(fd_solve(&bad_sample), Err(ReferenceError::SampleOutOfRange { .. })));
    }

    #[test]
    fn oversized_time_step_reports_instability() {
        // The tall soliton moves at speed ~6.3; dt = 1.0 is far past the
        // advective stability limit of the explicit flux term.
        let scenario = ScenarioConfig::two_soliton();
        let cfg = FdConfig { scenario, dx: 0.05, dt: 1.0, sample_times: vec![] };
        match fd_solve(&cfg) {
            Err(ReferenceError::Instability { step, .. }) => assert!(step >= 2),
            other => panic!("expected instability, got {other:?}"),
        }
    }
}
