//! The regularized long wave equation and its benchmark scenarios.
//!
//! The PDE is u_t + u_x + eps u u_x - mu u_xxt = 0 on a truncated line
//! segment. Exact dynamics conserve three integrals: mass I1 = int u,
//! momentum I2 = int (u^2 + mu u_x^2), and energy I3 = int (u^3 + 3 u^2),
//! all evaluated here with the composite trapezoid rule.

use crate::autodiff::Jet;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum PhysicsError {
    #[error("`{op}` needs at least {need} samples, got {got}")]
    TooFewPoints { op: &'static str, need: usize, got: usize },
    #[error("u and u_x sample counts differ ({u} vs {ux})")]
    LengthMismatch { u: usize, ux: usize },
    #[error("invalid domain: x_min {x_min} >= x_max {x_max} or t_final {t_final} <= 0")]
    BadDomain { x_min: f64, x_max: f64, t_final: f64 },
    #[error("{field} must be strictly positive, got {value}")]
    NotPositive { field: &'static str, value: f64 },
}

/// PDE coefficients: eps scales the nonlinear advection, mu the dispersion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlwParams {
    pub epsilon: f64,
    pub mu: f64,
}

impl Default for RlwParams {
    fn default() -> RlwParams {
        RlwParams { epsilon: 1.0, mu: 1.0 }
    }
}

impl RlwParams {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(PhysicsError::NotPositive { field: "epsilon", value: self.epsilon });
        }
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return Err(PhysicsError::NotPositive { field: "mu", value: self.mu });
        }
        Ok(())
    }
}

/// Benchmark family plus its shape parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScenarioKind {
    /// One sech^2 pulse of amplitude 3d starting at x0.
    SingleSoliton { d: f64, x0: f64 },
    /// Two pulses of amplitudes 3 a1 > 3 a2 starting at x1 < x2; the taller
    /// one overtakes and they collide elastically.
    TwoSoliton { a1: f64, a2: f64, x1: f64, x2: f64 },
    /// Smoothed step of height u0 centered at xc with slope scale d; an
    /// oscillatory wave train develops at the front.
    UndularBore { u0: f64, xc: f64, d: f64 },
}

impl ScenarioKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::SingleSoliton { .. } => "single-soliton",
            ScenarioKind::TwoSoliton { .. } => "two-soliton",
            ScenarioKind::UndularBore { .. } => "undular-bore",
        }
    }
}

/// A benchmark problem: the PDE coefficients, the space-time box, and the
/// scenario shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(flatten)]
    pub kind: ScenarioKind,
    pub rlw: RlwParams,
    pub x_min: f64,
    pub x_max: f64,
    pub t_final: f64,
}

impl ScenarioConfig {
    pub fn single_soliton() -> ScenarioConfig {
        ScenarioConfig {
            kind: ScenarioKind::SingleSoliton { d: 0.1, x0: 0.0 },
            rlw: RlwParams { epsilon: 1.0, mu: 1.0 },
            x_min: -40.0,
            x_max: 60.0,
            t_final: 20.0,
        }
    }

    /// Amplitudes chosen so the initial peaks are 5.333 and 1.688.
    pub fn two_soliton() -> ScenarioConfig {
        ScenarioConfig {
            kind: ScenarioKind::TwoSoliton {
                a1: 5.333 / 3.0,
                a2: 1.688 / 3.0,
                x1: 15.0,
                x2: 35.0,
            },
            rlw: RlwParams { epsilon: 1.0, mu: 1.0 },
            x_min: 0.0,
            x_max: 120.0,
            t_final: 30.0,
        }
    }

    /// `slope` is the step's length scale: 5 for the gentle profile, 2 for
    /// the steep one.
    pub fn undular_bore(slope: f64) -> ScenarioConfig {
        ScenarioConfig {
            kind: ScenarioKind::UndularBore { u0: 0.1, xc: 0.0, d: slope },
            rlw: RlwParams { epsilon: 1.5, mu: 1.0 / 6.0 },
            x_min: -36.0,
            x_max: 300.0,
            t_final: 250.0,
        }
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        self.rlw.validate()?;
        if !(self.x_min < self.x_max) || !(self.t_final > 0.0) {
            return Err(PhysicsError::BadDomain {
                x_min: self.x_min,
                x_max: self.x_max,
                t_final: self.t_final,
            });
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }
}

/// Uniform 1-D grid with n >= 2 points, endpoints included.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl UniformGrid {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<UniformGrid, PhysicsError> {
        if n < 2 {
            return Err(PhysicsError::TooFewPoints { op: "UniformGrid", need: 2, got: n });
        }
        if !(lo < hi) {
            return Err(PhysicsError::BadDomain { x_min: lo, x_max: hi, t_final: 1.0 });
        }
        Ok(UniformGrid { lo, hi, n })
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.spacing()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.point(i)).collect()
    }
}

/// Mass, momentum, and energy integrals of one field snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservedTriple {
    pub i1: f64,
    pub i2: f64,
    pub i3: f64,
}

impl ConservedTriple {
    pub const ZERO: ConservedTriple = ConservedTriple { i1: 0.0, i2: 0.0, i3: 0.0 };

    pub fn as_array(self) -> [f64; 3] {
        [self.i1, self.i2, self.i3]
    }
}

#[inline]
fn sech2(z: f64) -> f64 {
    let s = 1.0 / z.cosh();
    s * s
}

/// Speed and width of a sech^2 pulse of amplitude 3a: v = 1 + eps a,
/// k = sqrt(eps a / (mu v)) / 2.
pub fn soliton_speed_width(rlw: RlwParams, a: f64) -> (f64, f64) {
    let v = 1.0 + rlw.epsilon * a;
    let k = 0.5 * (rlw.epsilon * a / (rlw.mu * v)).sqrt();
    (v, k)
}

/// Traveling-wave solution 3d sech^2[k(x - v t - x0)] of the single-soliton
/// scenario.
pub fn exact_single_soliton(x: f64, t: f64, cfg: &ScenarioConfig) -> f64 {
    let ScenarioKind::SingleSoliton { d, x0 } = cfg.kind else {
        panic!("exact_single_soliton called on a {} scenario", cfg.name());
    };
    let (v, k) = soliton_speed_width(cfg.rlw, d);
    3.0 * d * sech2(k * (x - v * t - x0))
}

/// Field at t = 0 for any scenario.
pub fn initial_condition(x: f64, cfg: &ScenarioConfig) -> f64 {
    match cfg.kind {
        ScenarioKind::SingleSoliton { .. } => exact_single_soliton(x, 0.0, cfg),
        ScenarioKind::TwoSoliton { a1, a2, x1, x2 } => {
            let (_, k1) = soliton_speed_width(cfg.rlw, a1);
            let (_, k2) = soliton_speed_width(cfg.rlw, a2);
            3.0 * a1 * sech2(k1 * (x - x1)) + 3.0 * a2 * sech2(k2 * (x - x2))
        }
        ScenarioKind::UndularBore { u0, xc, d } => 0.5 * u0 * (1.0 - ((x - xc) / d).tanh()),
    }
}

/// Spatial derivative of the t = 0 field.
pub fn initial_condition_dx(x: f64, cfg: &ScenarioConfig) -> f64 {
    match cfg.kind {
        ScenarioKind::SingleSoliton { d, x0 } => {
            let (_, k) = soliton_speed_width(cfg.rlw, d);
            let z = k * (x - x0);
            -6.0 * d * k * sech2(z) * z.tanh()
        }
        ScenarioKind::TwoSoliton { a1, a2, x1, x2 } => {
            let (_, k1) = soliton_speed_width(cfg.rlw, a1);
            let (_, k2) = soliton_speed_width(cfg.rlw, a2);
            let (z1, z2) = (k1 * (x - x1), k2 * (x - x2));
            -6.0 * a1 * k1 * sech2(z1) * z1.tanh() - 6.0 * a2 * k2 * sech2(z2) * z2.tanh()
        }
        ScenarioKind::UndularBore { u0, xc, d } => -0.5 * u0 * sech2((x - xc) / d) / d,
    }
}

/// Dirichlet boundary target at a domain endpoint.
pub fn boundary_value(x: f64, t: f64, cfg: &ScenarioConfig) -> f64 {
    match cfg.kind {
        ScenarioKind::SingleSoliton { .. } => exact_single_soliton(x, t, cfg),
        ScenarioKind::TwoSoliton { .. } => 0.0,
        ScenarioKind::UndularBore { u0, .. } => {
            // Plateau values: u0 on the left end, 0 on the right.
            if x <= 0.5 * (cfg.x_min + cfg.x_max) {
                u0
            } else {
                0.0
            }
        }
    }
}

/// Composite trapezoid rule on a uniform grid.
pub fn trapezoid(values: &[f64], spacing: f64) -> Result<f64, PhysicsError> {
    if values.len() < 2 {
        return Err(PhysicsError::TooFewPoints { op: "trapezoid", need: 2, got: values.len() });
    }
    let mut acc = 0.5 * (values[0] + values[values.len() - 1]);
    for &v in &values[1..values.len() - 1] {
        acc += v;
    }
    Ok(acc * spacing)
}

/// The three conserved integrals from field samples u and u_x on one
/// uniform grid.
pub fn invariants(
    u: &[f64],
    u_x: &[f64],
    spacing: f64,
    rlw: RlwParams,
) -> Result<ConservedTriple, PhysicsError> {
    if u.len() != u_x.len() {
        return Err(PhysicsError::LengthMismatch { u: u.len(), ux: u_x.len() });
    }
    let mut f1 = Vec::with_capacity(u.len());
    let mut f2 = Vec::with_capacity(u.len());
    let mut f3 = Vec::with_capacity(u.len());
    for (&ui, &uxi) in u.iter().zip(u_x) {
        f1.push(ui);
        f2.push(ui * ui + rlw.mu * uxi * uxi);
        f3.push(ui * ui * ui + 3.0 * ui * ui);
    }
    Ok(ConservedTriple {
        i1: trapezoid(&f1, spacing)?,
        i2: trapezoid(&f2, spacing)?,
        i3: trapezoid(&f3, spacing)?,
    })
}

/// Second-order d/dx of grid samples: central differences inside,
/// one-sided three-point stencils at the ends.
pub fn grid_gradient(u: &[f64], spacing: f64) -> Result<Vec<f64>, PhysicsError> {
    let n = u.len();
    if n < 3 {
        return Err(PhysicsError::TooFewPoints { op: "grid_gradient", need: 3, got: n });
    }
    let mut g = Vec::with_capacity(n);
    g.push((-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * spacing));
    for i in 1..n - 1 {
        g.push((u[i + 1] - u[i - 1]) / (2.0 * spacing));
    }
    g.push((3.0 * u[n - 1] - 4.0 * u[n - 2] + u[n - 3]) / (2.0 * spacing));
    Ok(g)
}

/// Whole-line invariants of the profile 3d sech^2(k x): I1 = 6d/k,
/// I2 = 12d^2/k + 48 d^2 k / 5, I3 = 144 d^3 / (5k) + 36 d^2 / k.
pub fn soliton_closed_form_invariants(d: f64, k: f64) -> ConservedTriple {
    ConservedTriple {
        i1: 6.0 * d / k,
        i2: 12.0 * d * d / k + 48.0 * d * d * k / 5.0,
        i3: 144.0 * d * d * d / (5.0 * k) + 36.0 * d * d / k,
    }
}

/// PDE residual read off a jet: dt + dx + eps v dx - mu dxxt.
#[inline]
pub fn rlw_residual(u: Jet, rlw: RlwParams) -> f64 {
    u.dt + u.dx + rlw.epsilon * u.v * u.dx - rlw.mu * u.dxxt
}
