//! Loss assembly on the reverse tape: residual, initial, and boundary
//! terms under trainable log-weights, plus the optional conservation
//! penalty tying the three invariants to their window-start values.

use crate::autodiff::{AutodiffError, FieldComp, NodeId, Tape};
use crate::network::{Mlp, NetworkError};
use crate::physics::{
    boundary_value, ConservedTriple, ScenarioConfig, UniformGrid,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("collocation class `{class}` is empty")]
    EmptyClass { class: &'static str },
    #[error("initial targets: {got} values for {want} points")]
    TargetsLen { got: usize, want: usize },
    #[error("conservation times must start at the window's start time")]
    BadConservationTimes,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// One training window's sample points. `initial` holds x positions at the
/// window's start time; `conservation_times[0]` must equal that start time
/// since it anchors the invariant reference.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CollocationSet {
    pub interior: Vec<(f64, f64)>,
    pub initial: Vec<f64>,
    pub boundary: Vec<(f64, f64)>,
    pub conservation_times: Vec<f64>,
    pub conservation_grid: UniformGrid,
}

/// Component losses of one evaluation; `l_cons` is 0 when the conservation
/// penalty is inactive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pde: f64,
    pub l_ic: f64,
    pub l_bc: f64,
    pub l_cons: f64,
}

/// Trainable log-weights; the effective factor on loss j is e^{-lambda_j}/2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveWeights {
    pub lambda_pde: f64,
    pub lambda_ic: f64,
    pub lambda_bc: f64,
}

impl AdaptiveWeights {
    pub fn from_params(params: &[f64], lambda_off: usize) -> AdaptiveWeights {
        AdaptiveWeights {
            lambda_pde: params[lambda_off],
            lambda_ic: params[lambda_off + 1],
            lambda_bc: params[lambda_off + 2],
        }
    }

    pub fn as_array(self) -> [f64; 3] {
        [self.lambda_pde, self.lambda_ic, self.lambda_bc]
    }
}

/// Where the conservation reference I_k comes from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConservationReference {
    /// The network's own invariants at the window start time (the default).
    SelfAtStart,
    /// Quadrature of the analytic initial profile.
    AnalyticInitial,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LossMode {
    Adaptive,
    Conservative { lambda_cons: f64, reference: ConservationReference },
}

/// Balanced three-component total: sum_j (e^{-lambda_j} L_j + lambda_j) / 2.
pub fn adaptive_total(b: &LossBreakdown, w: &AdaptiveWeights) -> f64 {
    let ls = [b.l_pde, b.l_ic, b.l_bc];
    let lams = w.as_array();
    let mut acc = 0.0;
    for (l, lam) in ls.iter().zip(lams) {
        acc += 0.5 * (-lam).exp() * l + 0.5 * lam;
    }
    acc
}

/// Adaptive total plus the weighted conservation penalty.
pub fn conservative_total(
    b: &LossBreakdown,
    w: &AdaptiveWeights,
    l_cons: f64,
    lambda_cons: f64,
) -> f64 {
    adaptive_total(b, w) + lambda_cons * l_cons
}

/// The conservation penalty as a plain number: mean over sample times of the
/// squared deviation of each invariant from its reference, summed over the
/// three invariants.
pub fn conservation_penalty(series: &[ConservedTriple], reference: ConservedTriple) -> f64 {
    if series.is_empty() {
        return 0.0;
    }
    let n = series.len() as f64;
    let mut acc = 0.0;
    for (k, r) in reference.as_array().iter().enumerate() {
        let mut sum_k = 0.0;
        for tri in series {
            let d = tri.as_array()[k] - r;
            sum_k += d * d;
        }
        acc += sum_k / n;
    }
    acc
}

/// Handles into the recorded loss graph.
pub struct LossGraph {
    tape: Tape,
    total: NodeId,
    l_pde: NodeId,
    l_ic: NodeId,
    l_bc: NodeId,
    l_cons: Option<NodeId>,
    /// Invariant scalars per conservation time, in time order.
    invariant_nodes: Vec<[NodeId; 3]>,
}

/// Loss component selector for per-component gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossComponent {
    Pde,
    Ic,
    Bc,
    Cons,
    Total,
}

/// Record the full loss evaluation for one window onto a fresh tape.
///
/// `ic_time` is the window's start time and `ic_targets` the field values
/// the network should take at `colloc.initial` there (the analytic profile
/// for the first window, the previous window's prediction afterwards).
pub fn build_loss_graph(
    mlp: &Mlp,
    scenario: &ScenarioConfig,
    colloc: &CollocationSet,
    ic_time: f64,
    ic_targets: &[f64],
    mode: &LossMode,
) -> Result<LossGraph, LossError> {
    if colloc.interior.is_empty() {
        return Err(LossError::EmptyClass { class: "interior" });
    }
    if colloc.initial.is_empty() {
        return Err(LossError::EmptyClass { class: "initial" });
    }
    if colloc.boundary.is_empty() {
        return Err(LossError::EmptyClass { class: "boundary" });
    }
    if ic_targets.len() != colloc.initial.len() {
        return Err(LossError::TargetsLen {
            got: ic_targets.len(),
            want: colloc.initial.len(),
        });
    }
    let lambda_off = mlp
        .layout
        .lambda_off
        .expect("loss graph needs a parameter vector with adaptive weights attached");

    let mut tape = Tape::new(mlp.layout.total);

    // Residual term over interior points: all six jet planes.
    let rlw = scenario.rlw;
    let out = mlp.record(&mut tape, colloc.interior.clone(), 6)?;
    let res = tape.rlw_residual(out, rlw.epsilon, rlw.mu)?;
    let l_pde = tape.mean_square(res)?;

    // Initial term: value plane against the supplied targets.
    let ic_pts: Vec<(f64, f64)> = colloc.initial.iter().map(|&x| (x, ic_time)).collect();
    let out = mlp.record(&mut tape, ic_pts, 1)?;
    let uv = tape.field(out, FieldComp::Value)?;
    let dev = tape.sub_consts(uv, ic_targets.to_vec())?;
    let l_ic = tape.mean_square(dev)?;

    // Boundary term: value plane against the scenario's endpoint targets.
    let bc_targets: Vec<f64> =
        colloc.boundary.iter().map(|&(x, t)| boundary_value(x, t, scenario)).collect();
    let out = mlp.record(&mut tape, colloc.boundary.clone(), 1)?;
    let uv = tape.field(out, FieldComp::Value)?;
    let dev = tape.sub_consts(uv, bc_targets)?;
    let l_bc = tape.mean_square(dev)?;

    // Balanced total over the three components.
    let mut terms = Vec::with_capacity(3);
    for (j, &l) in [l_pde, l_ic, l_bc].iter().enumerate() {
        let lam = tape.param(lambda_off + j)?;
        let e = tape.exp_neg(lam)?;
        let weighted = tape.mul(e, l)?;
        let term = {
            let a = tape.scale(weighted, 0.5)?;
            let b = tape.scale(lam, 0.5)?;
            tape.add(a, b)?
        };
        terms.push(term);
    }
    let adaptive = {
        let ab = tape.add(terms[0], terms[1])?;
        tape.add(ab, terms[2])?
    };

    let (total, l_cons, invariant_nodes) = match mode {
        LossMode::Adaptive => (adaptive, None, Vec::new()),
        LossMode::Conservative { lambda_cons, reference } => {
            if colloc.conservation_times.is_empty() {
                return Err(LossError::EmptyClass { class: "conservation_times" });
            }
            if colloc.conservation_times[0] != ic_time {
                return Err(LossError::BadConservationTimes);
            }
            let grid = colloc.conservation_grid;
            let xs = grid.points();
            let h = grid.spacing();
            let mu = rlw.mu;
            let mut invariant_nodes = Vec::with_capacity(colloc.conservation_times.len());
            for &t in &colloc.conservation_times {
                let pts: Vec<(f64, f64)> = xs.iter().map(|&x| (x, t)).collect();
                let out = mlp.record(&mut tape, pts, 2)?;
                let u = tape.field(out, FieldComp::Value)?;
                let ux = tape.field(out, FieldComp::Dx)?;
                let i1 = tape.trapezoid(u, h)?;
                let uu = tape.hadamard(u, u)?;
                let uxux = tape.hadamard(ux, ux)?;
                let f2 = tape.axpy(uu, uxux, mu)?;
                let i2 = tape.trapezoid(f2, h)?;
                let uuu = tape.hadamard(uu, u)?;
                let f3 = tape.axpy(uuu, uu, 3.0)?;
                let i3 = tape.trapezoid(f3, h)?;
                invariant_nodes.push([i1, i2, i3]);
            }
            let reference_nodes: [NodeId; 3] = match reference {
                ConservationReference::SelfAtStart => invariant_nodes[0],
                ConservationReference::AnalyticInitial => {
                    let tri = analytic_initial_invariants(scenario, &grid);
                    [
                        tape.constant(tri.i1),
                        tape.constant(tri.i2),
                        tape.constant(tri.i3),
                    ]
                }
            };
            let mut squares = Vec::with_capacity(3 * invariant_nodes.len());
            for k in 0..3 {
                for tri in &invariant_nodes {
                    let d = tape.sub(tri[k], reference_nodes[k])?;
                    squares.push(tape.square(d)?);
                }
            }
            let l_cons =
                tape.sum_scaled(squares, 1.0 / colloc.conservation_times.len() as f64)?;
            let weighted = tape.scale(l_cons, *lambda_cons)?;
            let total = tape.add(adaptive, weighted)?;
            (total, Some(l_cons), invariant_nodes)
        }
    };

    Ok(LossGraph { tape, total, l_pde, l_ic, l_bc, l_cons, invariant_nodes })
}

/// Invariants of the analytic initial profile on the given grid.
pub fn analytic_initial_invariants(scenario: &ScenarioConfig, grid: &UniformGrid) -> ConservedTriple {
    let u: Vec<f64> =
        (0..grid.n).map(|i| crate::physics::initial_condition(grid.point(i), scenario)).collect();
    let ux: Vec<f64> = (0..grid.n)
        .map(|i| crate::physics::initial_condition_dx(grid.point(i), scenario))
        .collect();
    crate::physics::invariants(&u, &ux, grid.spacing(), scenario.rlw)
        .expect("grid has at least 2 points")
}

impl LossGraph {
    /// Forward pass: total and component losses at the given parameters.
    pub fn eval(&mut self, params: &[f64]) -> Result<(f64, LossBreakdown), LossError> {
        self.tape.forward(params)?;
        let breakdown = LossBreakdown {
            l_pde: self.tape.scalar(self.l_pde)?,
            l_ic: self.tape.scalar(self.l_ic)?,
            l_bc: self.tape.scalar(self.l_bc)?,
            l_cons: match self.l_cons {
                Some(n) => self.tape.scalar(n)?,
                None => 0.0,
            },
        };
        Ok((self.tape.scalar(self.total)?, breakdown))
    }

    /// Forward plus reverse pass: total, components, and the gradient of the
    /// total with respect to the full parameter vector.
    pub fn eval_grad(
        &mut self,
        params: &[f64],
    ) -> Result<(f64, LossBreakdown, Vec<f64>), LossError> {
        let (total, breakdown) = self.eval(params)?;
        let grad = self.tape.backward(self.total, params)?;
        Ok((total, breakdown, grad))
    }

    /// Gradient of one loss component alone. Runs its own forward pass.
    pub fn component_grad(
        &mut self,
        comp: LossComponent,
        params: &[f64],
    ) -> Result<Vec<f64>, LossError> {
        let node = match comp {
            LossComponent::Pde => self.l_pde,
            LossComponent::Ic => self.l_ic,
            LossComponent::Bc => self.l_bc,
            LossComponent::Cons => self.l_cons.ok_or(LossError::EmptyClass {
                class: "conservation_times",
            })?,
            LossComponent::Total => self.total,
        };
        self.tape.forward(params)?;
        Ok(self.tape.backward(node, params)?)
    }

    /// Invariant triples at each conservation time from the last forward
    /// pass, in time order. Empty when conservation is inactive.
    pub fn invariant_series(&self) -> Result<Vec<ConservedTriple>, LossError> {
        self.invariant_nodes
            .iter()
            .map(|tri| {
                Ok(ConservedTriple {
                    i1: self.tape.scalar(tri[0])?,
                    i2: self.tape.scalar(tri[1])?,
                    i3: self.tape.scalar(tri[2])?,
                })
            })
            .collect()
    }

    pub fn node_count(&self) -> usize {
        self.tape.node_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::MlpSpec;
    use crate::physics::{initial_condition, ScenarioConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_colloc(scenario: &ScenarioConfig, seed: u64) -> CollocationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, tf) = (scenario.x_min, scenario.x_max, scenario.t_final);
        let interior =
            (0..40).map(|_| (rng.gen_range(a..b), rng.gen_range(0.0..tf))).collect();
        let initial = (0..20).map(|_| rng.gen_range(a..b)).collect();
        let boundary = (0..16)
            .map(|_| (if rng.gen::<bool>() { a } else { b }, rng.gen_range(0.0..tf)))
            .collect();
        let conservation_times = (0..6).map(|i| tf * i as f64 / 5.0).collect();
        CollocationSet {
            interior,
            initial,
            boundary,
            conservation_times,
            conservation_grid: UniformGrid::new(a, b, 101).unwrap(),
        }
    }

    fn scenario_targets(colloc: &CollocationSet, scenario: &ScenarioConfig) -> Vec<f64> {
        colloc.initial.iter().map(|&x| initial_condition(x, scenario)).collect()
    }

    #[test]
    fn adaptive_total_examples() {
        let b = LossBreakdown { l_pde: 1.0, l_ic: 1.0, l_bc: 1.0, l_cons: 0.0 };
        let w = AdaptiveWeights { lambda_pde: 0.0, lambda_ic: 0.0, lambda_bc: 0.0 };
        assert!((adaptive_total(&b, &w) - 1.5).abs() < 1e-15);
        let z = LossBreakdown { l_pde: 0.0, l_ic: 0.0, l_bc: 0.0, l_cons: 0.0 };
        assert_eq!(adaptive_total(&z, &w), 0.0);
        assert!((conservative_total(&b, &w, 2.0, 1e-4) - (1.5 + 2e-4)).abs() < 1e-15);
        assert_eq!(conservative_total(&b, &w, 5.0, 0.0), adaptive_total(&b, &w));
    }

    #[test]
    fn conservation_penalty_examples() {
        let r = ConservedTriple { i1: 1.0, i2: 2.0, i3: 3.0 };
        // Single sample deviating by delta in I1 only.
        let s = [ConservedTriple { i1: 1.0 + 0.25, i2: 2.0, i3: 3.0 }];
        assert!((conservation_penalty(&s, r) - 0.0625).abs() < 1e-15);
        // Identical series: exactly zero.
        let s = [r; 7];
        assert_eq!(conservation_penalty(&s, r), 0.0);
    }

    #[test]
    fn constant_residual_gives_its_square() {
        // u = b t + c has residual b everywhere: l_pde = b^2 exactly.
        let mlp = Mlp::new(MlpSpec::new(vec![2, 1]).unwrap(), true).unwrap();
        let scenario = ScenarioConfig::single_soliton();
        let colloc = small_colloc(&scenario, 1);
        let targets = scenario_targets(&colloc, &scenario);
        let mut g =
            build_loss_graph(&mlp, &scenario, &colloc, 0.0, &targets, &LossMode::Adaptive)
                .unwrap();
        let b = -0.37;
        let params = [0.0, b, 0.9, 0.0, 0.0, 0.0];
        let (_, parts) = g.eval(&params).unwrap();
        assert!((parts.l_pde - b * b).abs() < 1e-15);
    }

    #[test]
    fn zero_network_zero_targets() {
        // Two-soliton boundary targets are 0, so the zero network nails the
        // boundary term; zero initial targets do the same for l_ic.
        let mlp = Mlp::new(MlpSpec::hidden(2, 6), true).unwrap();
        let scenario = ScenarioConfig::two_soliton();
        let colloc = small_colloc(&scenario, 2);
        let zeros = vec![0.0; colloc.initial.len()];
        let mut g = build_loss_graph(&mlp, &scenario, &colloc, 0.0, &zeros, &LossMode::Adaptive)
            .unwrap();
        let params = vec![0.0; mlp.layout.total];
        let (total, parts) = g.eval(&params).unwrap();
        assert_eq!(parts.l_bc, 0.0);
        assert_eq!(parts.l_ic, 0.0);
        assert_eq!(parts.l_pde, 0.0);
        assert_eq!(total, 0.0);
    }

    #[test]
    fn lambda_gradient_identity_and_sign() {
        let mlp = Mlp::new(MlpSpec::hidden(2, 8), true).unwrap();
        let scenario = ScenarioConfig::single_soliton();
        let colloc = small_colloc(&scenario, 3);
        let targets = scenario_targets(&colloc, &scenario);
        let mut g =
            build_loss_graph(&mlp, &scenario, &colloc, 0.0, &targets, &LossMode::Adaptive)
                .unwrap();
        let mut params = mlp.init_params(17);
        let lo = mlp.layout.lambda_off.unwrap();
        params[lo] = 0.3;
        params[lo + 1] = -0.6;
        params[lo + 2] = 0.05;
        let (_, parts, grad) = g.eval_grad(&params).unwrap();
        let ls = [parts.l_pde, parts.l_ic, parts.l_bc];
        for j in 0..3 {
            let lam = params[lo + j];
            let closed = -0.5 * (-lam).exp() * ls[j] + 0.5;
            assert!(
                (grad[lo + j] - closed).abs() < 1e-10,
                "lambda {j}: {} vs {closed}",
                grad[lo + j]
            );
            // Sign property: negative gradient iff the loss exceeds e^lambda.
            assert_eq!(grad[lo + j] < 0.0, ls[j] > lam.exp());
        }
        // Stationarity: lambda_j = ln(L_j) zeroes the lambda gradient.
        for j in 0..3 {
            params[lo + j] = ls[j].ln();
        }
        let (_, _, grad2) = g.eval_grad(&params).unwrap();
        for j in 0..3 {
            assert!(grad2[lo + j].abs() < 1e-10, "stationarity {j}: {}", grad2[lo + j]);
        }
    }

    #[test]
    fn theta_gradient_is_weighted_component_sum() {
        let mlp = Mlp::new(MlpSpec::hidden(2, 6), true).unwrap();
        let scenario = ScenarioConfig::single_soliton();
        let colloc = small_colloc(&scenario, 4);
        let targets = scenario_targets(&colloc, &scenario);
        let mut g =
            build_loss_graph(&mlp, &scenario, &colloc, 0.0, &targets, &LossMode::Adaptive)
                .unwrap();
        let mut params = mlp.init_params(23);
        let lo = mlp.layout.lambda_off.unwrap();
        params[lo] = 0.2;
        params[lo + 1] = -0.4;
        params[lo + 2] = 0.7;
        let (_, _, grad) = g.eval_grad(&params).unwrap();
        let gp = g.component_grad(LossComponent::Pde, &params).unwrap();
        let gi = g.component_grad(LossComponent::Ic, &params).unwrap();
        let gb = g.component_grad(LossComponent::Bc, &params).unwrap();
        let ws: Vec<f64> = (0..3).map(|j| 0.5 * (-params[lo + j]).exp()).collect();
        for i in 0..mlp.layout.n_net {
            let want = ws[0] * gp[i] + ws[1] * gi[i] + ws[2] * gb[i];
            assert!((grad[i] - want).abs() < 1e-10, "theta {i}: {} vs {want}", grad[i]);
        }
    }

    #[test]
    fn permutation_of_points_leaves_losses_unchanged() {
        let mlp = Mlp::new(MlpSpec::hidden(2, 6), true).unwrap();
        let scenario = ScenarioConfig::single_soliton();
        let colloc = small_colloc(&scenario, 5);
        let targets = scenario_targets(&colloc, &scenario);
        let params = mlp.init_params(29);

        let mut shuffled = colloc.clone();
        shuffled.interior.reverse();
        shuffled.boundary.reverse();
        let mut st = shuffled.initial.clone();
        st.reverse();
        let mut shuffled_targets = targets.clone();
        shuffled_targets.reverse();
        shuffled.initial = st;

        let mut g1 =
            build_loss_graph(&mlp, &scenario, &colloc, 0.0, &targets, &LossMode::Adaptive)
                .unwrap();
        let mut g2 = build_loss_graph(
            &mlp,
            &scenario,
            &shuffled,
            0.0,
            &shuffled_targets,
            &LossMode::Adaptive,
        )
        .unwrap();
        let (t1, p1) = g1.eval(&params).unwrap();
        let (t2, p2) = g2.eval(&params).unwrap();
        assert!((t1 - t2).abs() <= 1e-12 * (1.0 + t1.abs()));
        assert!((p1.l_pde - p2.l_pde).abs() <= 1e-12 * (1.0 + p1.l_pde.abs()));
        assert!((p1.l_ic - p2.l_ic).abs() <= 1e-12 * (1.0 + p1.l_ic.abs()));
        assert!((p1.l_bc - p2.l_bc).abs() <= 1e-12 * (1.0 + p1.l_bc.abs()));
    }

    #[test]
    fn time_independent_network_has_zero_conservation_loss() {
        let mlp = Mlp::new(MlpSpec::hidden(2, 6), true).unwrap();
        let scenario = ScenarioConfig::single_soliton();
        let colloc = small_colloc(&scenario, 6);
        let targets = scenario_targets(&colloc, &scenario);
        let mode = LossMode::Conservative {
            lambda_cons: 1e-4,
            reference: ConservationReference::SelfAtStart,
        };
        let mut g = build_loss_graph(&mlp, &scenario, &colloc, 0.0, &targets, &mode).unwrap();
        let mut params = mlp.init_params(31);
        // Zero the t column of the first layer: u no longer depends on t.
        let lb = mlp.layout.layers[0];
        for o in 0..lb.n_out {
            params[lb.w_off + o * lb.n_in + 1] = 0.0;
        }
        let (_, parts) = g.eval(&params).unwrap();
        assert_eq!(parts.l_cons, 0.0);
    }

    #[test]
    fn zero_conservation_weight_matches_adaptive_bitwise() {
        let mlp = Mlp::new(MlpSpec::hidden(3, 8), true).unwrap();
        let scenario = ScenarioConfig::single_soliton();
        let colloc = small_colloc(&scenario, 7);
        let targets = scenario_targets(&colloc, &scenario);
        let params = mlp.init_params(37);
        let mut ga =
            build_loss_graph(&mlp, &scenario, &colloc, 0.0, &targets, &LossMode::Adaptive)
                .unwrap();
        let mode = LossMode::Conservative {
            lambda_cons: 0.0,
            reference: ConservationReference::SelfAtStart,
        };
        let mut gc = build_loss_graph(&mlp, &scenario, &colloc, 0.0, &targets, &mode).unwrap();
        let (ta, _) = ga.eval(&params).unwrap();
        let (tc, _) = gc.eval(&params).unwrap();
        assert_eq!(ta.to_bits(), tc.to_bits());
    }

    #[test]
    fn graph_conservation_matches_plain_penalty() {
        let mlp = Mlp::new(MlpSpec::hidden(2, 10), true).unwrap();
        let scenario = ScenarioConfig::single_soliton();
        let colloc = small_colloc(&scenario, 8);
        let targets = scenario_targets(&colloc, &scenario);
        let mode = LossMode::Conservative {
            lambda_cons: 1e-4,
            reference: ConservationReference::SelfAtStart,
        };
        let mut g = build_loss_graph(&mlp, &scenario, &colloc, 0.0, &targets, &mode).unwrap();
        let params = mlp.init_params(41);
        let (_, parts) = g.eval(&params).unwrap();
        let series = g.invariant_series().unwrap();
        assert_eq!(series.len(), colloc.conservation_times.len());
        let plain = conservation_penalty(&series, series[0]);
        assert!((parts.l_cons - plain).abs() <= 1e-12 * (1.0 + plain.abs()));

        // Cross-check one invariant triple against an independent jet-mode
        // evaluation of the same network.
        let grid = colloc.conservation_grid;
        let t = colloc.conservation_times[3];
        let mut u = Vec::with_capacity(grid.n);
        let mut ux = Vec::with_capacity(grid.n);
        for i in 0..grid.n {
            let j = mlp.jet(&params, grid.point(i), t).unwrap();
            u.push(j.v);
            ux.push(j.dx);
        }
        let tri =
            crate::physics::invariants(&u, &ux, grid.spacing(), scenario.rlw).unwrap();
        assert!((tri.i1 - series[3].i1).abs() <= 1e-10 * (1.0 + tri.i1.abs()));
        assert!((tri.i2 - series[3].i2).abs() <= 1e-10 * (1.0 + tri.i2.abs()));
        assert!((tri.i3 - series[3].i3).abs() <= 1e-10 * (1.0 + tri.i3.abs()));
    }

    #[test]
    fn gradient_of_full_conservative_loss_matches_finite_differences() {
        let mlp = Mlp::new(MlpSpec::hidden(2, 6), true).unwrap();
        let scenario = ScenarioConfig::single_soliton();
        let mut colloc = small_colloc(&scenario, 9);
        colloc.conservation_grid = UniformGrid::new(scenario.x_min, scenario.x_max, 41).unwrap();
        let targets = scenario_targets(&colloc, &scenario);
        let mode = LossMode::Conservative {
            lambda_cons: 0.5,
            reference: ConservationReference::AnalyticInitial,
        };
        let mut g = build_loss_graph(&mlp, &scenario, &colloc, 0.0, &targets, &mode).unwrap();
        let mut params = mlp.init_params(43);
        // Shrink the weights so the cubic invariant integrands stay O(1);
        // a full-scale random net makes the finite-difference probe lose
        // most of its digits to truncation.
        for p in params.iter_mut() {
            *p *= 0.3;
        }
        let (_, _, grad) = g.eval_grad(&params).unwrap();
        let h = 1e-6;
        for i in (0..params.len()).step_by(11) {
            let orig = params[i];
            params[i] = orig + h;
            let (fp, _) = g.eval(&params).unwrap();
            params[i] = orig - h;
            let (fm, _) = g.eval(&params).unwrap();
            params[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (grad[i] - fd).abs() <= 2e-5 * (1.0 + fd.abs()),
                "param {i}: {} vs {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn empty_classes_are_rejected() {
        let mlp = Mlp::new(MlpSpec::hidden(2, 4), true).unwrap();
        let scenario = ScenarioConfig::single_soliton();
        let mut colloc = small_colloc(&scenario, 10);
        colloc.interior.clear();
        let targets = scenario_targets(&colloc, &scenario);
        assert!(matches!(
            build_loss_graph(&mlp, &scenario, &colloc, 0.0, &targets, &LossMode::Adaptive),
            Err(LossError::EmptyClass { class: "interior" })
        ));
    }
}
