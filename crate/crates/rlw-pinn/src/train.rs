//! Training orchestration: collocation sampling, the Adam and L-BFGS
//! phases, the two-stage conservation curriculum, causal temporal windows,
//! solution stitching, and checkpoint files.

use crate::autodiff::Jet;
use crate::loss::{
    build_loss_graph, AdaptiveWeights, CollocationSet, ConservationReference, LossBreakdown,
    LossError, LossGraph, LossMode,
};
use crate::network::{InputMap, Mlp, MlpSpec, NetworkError};
use crate::optim::AdamState;
use crate::optim::LbfgsState;
use crate::physics::{grid_gradient, initial_condition, PhysicsError, ScenarioConfig, UniformGrid};
use crate::reference::GridField;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error("invalid training config: {what}")]
    Config { what: String },
    #[error("t = {t} is outside the solution's time range [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("x = {x} is outside the solution's spatial range [{lo}, {hi}]")]
    XOutOfRange { x: f64, lo: f64, hi: f64 },
    #[error("windows are not ordered and contiguous at index {index}")]
    BadStitch { index: usize },
    #[error("grid-backed solutions carry no derivatives")]
    NoDerivatives,
    #[error("grid-backed solutions need sorted snapshot times and full rows")]
    BadGrid,
    #[error("checkpoint version {got} is unsupported (this build reads {want})")]
    UnsupportedVersion { got: u32, want: u32 },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Loss formulation selector, orthogonal to the window schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Adaptive,
    Conservative,
}

/// Window schedule and loss pairing for one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Strategy {
    /// Full temporal domain, adaptive loss, Adam then L-BFGS.
    PlainAdaptive,
    /// Full temporal domain, conservation penalty active throughout.
    PlainConservative,
    /// Stage 1 trains the adaptive loss with Adam only; stage 2 continues
    /// with L-BFGS at a reduced first trial step and the conservation
    /// penalty switched on.
    CurriculumConservative,
    /// One network per uniform temporal window, trained in order; window
    /// i > 1 takes its initial condition from window i - 1.
    Causal { windows: usize, conservative: bool },
}

impl Strategy {
    pub fn conservative(&self) -> bool {
        match self {
            Strategy::PlainAdaptive => false,
            Strategy::PlainConservative | Strategy::CurriculumConservative => true,
            Strategy::Causal { conservative, .. } => *conservative,
        }
    }
}

/// Everything one run needs. `paper_default` fills the published per-scenario
/// settings; fields stay independently overridable.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scenario: ScenarioConfig,
    pub model: MlpSpec,
    pub n_interior: usize,
    pub n_initial: usize,
    pub n_boundary: usize,
    pub adam_epochs: usize,
    pub adam_lr: f64,
    pub lbfgs_iters: usize,
    pub lambda_cons: f64,
    #[serde(default = "default_conservation_times")]
    pub conservation_times: usize,
    #[serde(default = "default_conservation_grid_points")]
    pub conservation_grid_points: usize,
    #[serde(default = "default_conservation_reference")]
    pub conservation_reference: ConservationReference,
    /// Redraw the conservation sample times each Adam epoch instead of using
    /// the fixed uniform set. The L-BFGS phase always uses the fixed set so
    /// its objective stays deterministic within the phase.
    #[serde(default)]
    pub resample_conservation_times: bool,
    pub strategy: Strategy,
    pub seed: u64,
}

fn default_conservation_times() -> usize {
    11
}

fn default_conservation_grid_points() -> usize {
    2001
}

fn default_conservation_reference() -> ConservationReference {
    ConservationReference::SelfAtStart
}

impl TrainConfig {
    /// Published run settings for the scenario and variant: network size,
    /// point counts, iteration budgets, conservation weight, and schedule.
    pub fn paper_default(scenario: ScenarioConfig, variant: Variant, seed: u64) -> TrainConfig {
        use crate::physics::ScenarioKind;
        let map = InputMap::for_domain((scenario.x_min, scenario.x_max), (0.0, scenario.t_final));
        let conservative = variant == Variant::Conservative;
        let (model, counts, adam_epochs, lbfgs_iters, lambda_cons, strategy) = match scenario.kind
        {
            ScenarioKind::SingleSoliton { .. } => (
                MlpSpec::hidden(8, 50).with_map(map),
                (20_000, 5_000, 5_000),
                30_000,
                5_000,
                1e-4,
                if conservative { Strategy::PlainConservative } else { Strategy::PlainAdaptive },
            ),
            ScenarioKind::TwoSoliton { .. } => (
                MlpSpec::hidden(8, 100).with_map(map),
                (40_000, 10_000, 10_000),
                50_000,
                10_000,
                1e-5,
                if conservative {
                    Strategy::CurriculumConservative
                } else {
                    Strategy::PlainAdaptive
                },
            ),
            ScenarioKind::UndularBore { .. } => (
                MlpSpec::hidden(8, 100).with_map(map),
                (40_000, 10_000, 10_000),
                20_000,
                5_000,
                1e-5,
                Strategy::Causal { windows: 5, conservative },
            ),
        };
        TrainConfig {
            scenario,
            model,
            n_interior: counts.0,
            n_initial: counts.1,
            n_boundary: counts.2,
            adam_epochs,
            adam_lr: 1e-3,
            lbfgs_iters,
            lambda_cons,
            conservation_times: default_conservation_times(),
            conservation_grid_points: default_conservation_grid_points(),
            conservation_reference: default_conservation_reference(),
            resample_conservation_times: false,
            strategy,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.scenario.validate()?;
        self.model.validate()?;
        if self.n_interior == 0 || self.n_initial == 0 || self.n_boundary == 0 {
            return Err(TrainError::Config { what: "all point counts must be positive".into() });
        }
        if !(self.adam_lr > 0.0) || !self.adam_lr.is_finite() {
            return Err(TrainError::Config { what: format!("adam_lr = {}", self.adam_lr) });
        }
        if !(self.lambda_cons >= 0.0) || !self.lambda_cons.is_finite() {
            return Err(TrainError::Config { what: format!("lambda_cons = {}", self.lambda_cons) });
        }
        if self.conservation_times == 0 {
            return Err(TrainError::Config { what: "conservation_times must be positive".into() });
        }
        if self.conservation_grid_points < 2 {
            return Err(TrainError::Config { what: "conservation grid needs 2+ points".into() });
        }
        if let Strategy::Causal { windows, .. } = self.strategy {
            if windows == 0 {
                return Err(TrainError::Config { what: "causal window count is zero".into() });
            }
        }
        Ok(())
    }
}

/// Uniform partition 0 = t_0 < t_1 < ... < t_N = t_final.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub boundaries: Vec<f64>,
}

impl WindowPlan {
    pub fn uniform(t_final: f64, n: usize) -> Result<WindowPlan, TrainError> {
        if n == 0 || !(t_final > 0.0) {
            return Err(TrainError::Config { what: format!("window plan ({t_final}, {n})") });
        }
        let boundaries = (0..=n).map(|i| t_final * i as f64 / n as f64).collect();
        Ok(WindowPlan { boundaries })
    }

    pub fn n(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn window(&self, i: usize) -> (f64, f64) {
        (self.boundaries[i], self.boundaries[i + 1])
    }

    /// Piecewise lookup: [t_0, t_1] -> 0, then (t_i, t_{i+1}] -> i.
    pub fn locate(&self, t: f64) -> Result<usize, TrainError> {
        let b = &self.boundaries;
        let (lo, hi) = (b[0], *b.last().unwrap());
        if !(t >= lo && t <= hi) {
            return Err(TrainError::TimeOutOfRange { t, lo, hi });
        }
        for i in 1..b.len() {
            if t <= b[i] {
                return Ok(i - 1);
            }
        }
        Ok(b.len() - 2)
    }
}

/// One optimizer epoch as recorded: losses at the epoch's starting point for
/// Adam, at the accepted point for L-BFGS.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub epoch: usize,
    pub phase: Phase,
    pub losses: LossBreakdown,
    pub total: f64,
    pub lambdas: [f64; 3],
    /// Learning rate for Adam, accepted step length for L-BFGS.
    pub step_len: f64,
    /// The Wolfe search failed and a bounded gradient step was taken.
    pub fallback: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Adam,
    Lbfgs,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Adam => "adam",
            Phase::Lbfgs => "lbfgs",
        })
    }
}

/// Where and why a run stopped early. The affected window retains its last
/// finitely-evaluated parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainAbort {
    pub window: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub detail: String,
}

/// One trained window: its network, final parameters, history, and the
/// initial-condition samples it was fitted to.
#[derive(Clone, Debug)]
pub struct WindowResult {
    pub index: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    pub model: MlpSpec,
    pub params: Vec<f64>,
    pub history: Vec<HistoryEntry>,
    pub ic_points: Vec<f64>,
    pub ic_values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub windows: Vec<WindowResult>,
    pub abort: Option<TrainAbort>,
}

// Tags for splitting one run seed into independent streams.
const TAG_INTERIOR: u64 = 1;
const TAG_INITIAL: u64 = 2;
const TAG_BOUNDARY: u64 = 3;
const TAG_INIT_PARAMS: u64 = 4;
const TAG_CONS_RESAMPLE: u64 = 5;
const TAG_WINDOW_BASE: u64 = 0x100;

/// SplitMix64 finalizer; distinct values for distinct (parent, tag) pairs.
fn child_seed(parent: u64, tag: u64) -> u64 {
    let mut z = parent ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn window_seed(run_seed: u64, window: usize) -> u64 {
    child_seed(run_seed, TAG_WINDOW_BASE + window as u64)
}

/// Evenly spaced times from lo to hi inclusive; [lo] when n = 1.
fn uniform_times(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Sample the full-domain collocation set for a single-window run.
pub fn sample_collocation(cfg: &TrainConfig) -> Result<CollocationSet, TrainError> {
    sample_window_collocation(cfg, 0, 0.0, cfg.scenario.t_final)
}

/// Sample one window's points: interior i.i.d. uniform over the window's
/// (x, t) box, initial x at the window start, boundary points split evenly
/// between the two spatial endpoints with uniform t. Deterministic in
/// (cfg.seed, window).
pub fn sample_window_collocation(
    cfg: &TrainConfig,
    window: usize,
    t_lo: f64,
    t_hi: f64,
) -> Result<CollocationSet, TrainError> {
    let s = &cfg.scenario;
    let ws = window_seed(cfg.seed, window);
    let xd = Uniform::new(s.x_min, s.x_max);
    let td = Uniform::new(t_lo, t_hi);

    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(ws, TAG_INTERIOR));
    let interior: Vec<(f64, f64)> =
        (0..cfg.n_interior).map(|_| (xd.sample(&mut rng), td.sample(&mut rng))).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(ws, TAG_INITIAL));
    let initial: Vec<f64> = (0..cfg.n_initial).map(|_| xd.sample(&mut rng)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(ws, TAG_BOUNDARY));
    let n_left = cfg.n_boundary - cfg.n_boundary / 2;
    let boundary: Vec<(f64, f64)> = (0..cfg.n_boundary)
        .map(|i| {
            let x = if i < n_left { s.x_min } else { s.x_max };
            (x, td.sample(&mut rng))
        })
        .collect();

    Ok(CollocationSet {
        interior,
        initial,
        boundary,
        conservation_times: uniform_times(t_lo, t_hi, cfg.conservation_times),
        conservation_grid: UniformGrid::new(s.x_min, s.x_max, cfg.conservation_grid_points)?,
    })
}

/// Fresh conservation times for one epoch: the window start stays the anchor,
/// the rest are drawn uniformly and sorted.
fn resample_times(rng: &mut ChaCha8Rng, t_lo: f64, t_hi: f64, n: usize) -> Vec<f64> {
    let mut ts = Vec::with_capacity(n);
    ts.push(t_lo);
    let td = Uniform::new(t_lo, t_hi);
    for _ in 1..n {
        ts.push(td.sample(rng));
    }
    ts[1..].sort_by(f64::total_cmp);
    ts
}

/// Inputs of one optimization stage over one window.
pub struct StageSetup<'a> {
    pub mlp: &'a Mlp,
    pub scenario: &'a ScenarioConfig,
    pub colloc: &'a CollocationSet,
    pub ic_time: f64,
    pub ic_targets: &'a [f64],
    pub mode: LossMode,
    pub adam_epochs: usize,
    pub adam_lr: f64,
    pub lbfgs_iters: usize,
    /// First trial step of each L-BFGS line search.
    pub lbfgs_initial_step: f64,
    /// Per-epoch conservation-time redraws during the Adam phase.
    pub resample_seed: Option<u64>,
}

/// Why a stage stopped before its budget; parameters already hold the last
/// point that evaluated finite.
#[derive(Clone, Debug)]
pub struct StageAbort {
    pub phase: Phase,
    pub epoch: usize,
    pub detail: String,
}

fn stage_graph(setup: &StageSetup, times: Option<Vec<f64>>) -> Result<LossGraph, LossError> {
    match times {
        None => build_loss_graph(
            setup.mlp,
            setup.scenario,
            setup.colloc,
            setup.ic_time,
            setup.ic_targets,
            &setup.mode,
        ),
        Some(ts) => {
            let mut c = setup.colloc.clone();
            c.conservation_times = ts;
            build_loss_graph(setup.mlp, setup.scenario, &c, setup.ic_time, setup.ic_targets, &setup.mode)
        }
    }
}

/// Run the stage's Adam epochs then L-BFGS iterations in place, appending one
/// history entry per epoch and per accepted L-BFGS iteration. A non-finite
/// loss or gradient stops the stage: parameters roll back to the last good
/// point and the abort is reported in the return value.
pub fn train_stage(
    setup: &StageSetup,
    params: &mut Vec<f64>,
    history: &mut Vec<HistoryEntry>,
) -> Result<Option<StageAbort>, TrainError> {
    if setup.adam_epochs == 0 && setup.lbfgs_iters == 0 {
        return Ok(None);
    }
    let lam_off = setup.mlp.layout.lambda_off.expect("adaptive log-weights attached");
    let conservative = matches!(setup.mode, LossMode::Conservative { .. });
    let t_hi = setup
        .colloc
        .conservation_times
        .last()
        .copied()
        .unwrap_or(setup.ic_time);

    let mut graph = stage_graph(setup, None)?;
    let mut last_good = params.clone();

    if setup.adam_epochs > 0 {
        let mut adam = AdamState::new(params.len(), setup.adam_lr);
        let mut rs_rng = match setup.resample_seed {
            Some(seed) if conservative => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        for _ in 0..setup.adam_epochs {
            if let Some(rng) = &mut rs_rng {
                let ts = resample_times(
                    rng,
                    setup.ic_time,
                    t_hi,
                    setup.colloc.conservation_times.len(),
                );
                graph = stage_graph(setup, Some(ts))?;
            }
            let (total, losses, grad) = match graph.eval_grad(params) {
                Ok(out) => out,
                Err(err) => {
                    params.copy_from_slice(&last_good);
                    return Ok(Some(StageAbort {
                        phase: Phase::Adam,
                        epoch: history.len(),
                        detail: err.to_string(),
                    }));
                }
            };
            last_good.copy_from_slice(params);
            history.push(HistoryEntry {
                epoch: history.len(),
                phase: Phase::Adam,
                losses,
                total,
                lambdas: AdaptiveWeights::from_params(params, lam_off).as_array(),
                step_len: setup.adam_lr,
                fallback: false,
            });
            if let Err(err) = adam.step(params, &grad) {
                params.copy_from_slice(&last_good);
                return Ok(Some(StageAbort {
                    phase: Phase::Adam,
                    epoch: history.len(),
                    detail: err.to_string(),
                }));
            }
        }
        if rs_rng.is_some() {
            // Back to the fixed times so the L-BFGS objective is static.
            graph = stage_graph(setup, None)?;
        }
    }

    if setup.lbfgs_iters > 0 {
        let mut lb = LbfgsState::new();
        lb.initial_step = setup.lbfgs_initial_step;
        let zero = LossBreakdown { l_pde: 0.0, l_ic: 0.0, l_bc: 0.0, l_cons: 0.0 };
        let latest = Cell::new(zero);
        let mut loss_fn = |p: &[f64]| -> Result<(f64, Vec<f64>), LossError> {
            let (total, losses, grad) = graph.eval_grad(p)?;
            latest.set(losses);
            Ok((total, grad))
        };
        for _ in 0..setup.lbfgs_iters {
            let out = match lb.step(params, &mut loss_fn) {
                Ok(out) => out,
                Err(err) => {
                    params.copy_from_slice(&last_good);
                    return Ok(Some(StageAbort {
                        phase: Phase::Lbfgs,
                        epoch: history.len(),
                        detail: err.to_string(),
                    }));
                }
            };
            let moved = out.step_len > 0.0;
            if moved {
                last_good.copy_from_slice(params);
                history.push(HistoryEntry {
                    epoch: history.len(),
                    phase: Phase::Lbfgs,
                    losses: latest.get(),
                    total: out.loss,
                    lambdas: AdaptiveWeights::from_params(params, lam_off).as_array(),
                    step_len: out.step_len,
                    fallback: out.line_search_failed,
                });
            }
            if out.converged || !moved {
                break;
            }
        }
    }
    Ok(None)
}

fn conservative_mode(cfg: &TrainConfig) -> LossMode {
    LossMode::Conservative {
        lambda_cons: cfg.lambda_cons,
        reference: cfg.conservation_reference,
    }
}

/// Train per the configured strategy. Hard errors (bad config, graph
/// construction) are `Err`; mid-run non-finite aborts come back inside the
/// output with the last good state retained.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::PlainAdaptive => {
            train_single(cfg, &[full_stage(cfg, LossMode::Adaptive)])
        }
        Strategy::PlainConservative => {
            train_single(cfg, &[full_stage(cfg, conservative_mode(cfg))])
        }
        Strategy::CurriculumConservative => {
            let stage1 = StagePlan {
                mode: LossMode::Adaptive,
                adam_epochs: cfg.adam_epochs,
                lbfgs_iters: 0,
                lbfgs_initial_step: 1.0,
            };
            let stage2 = StagePlan {
                mode: conservative_mode(cfg),
                adam_epochs: 0,
                lbfgs_iters: cfg.lbfgs_iters,
                lbfgs_initial_step: 0.1,
            };
            train_single(cfg, &[stage1, stage2])
        }
        Strategy::Causal { windows, conservative } => train_causal(cfg, windows, conservative),
    }
}

#[derive(Clone, Copy)]
struct StagePlan {
    mode: LossMode,
    adam_epochs: usize,
    lbfgs_iters: usize,
    lbfgs_initial_step: f64,
}

fn full_stage(cfg: &TrainConfig, mode: LossMode) -> StagePlan {
    StagePlan {
        mode,
        adam_epochs: cfg.adam_epochs,
        lbfgs_iters: cfg.lbfgs_iters,
        lbfgs_initial_step: 1.0,
    }
}

fn train_single(cfg: &TrainConfig, stages: &[StagePlan]) -> Result<TrainOutput, TrainError> {
    let colloc = sample_collocation(cfg)?;
    let mlp = Mlp::new(cfg.model.clone(), true)?;
    let ws = window_seed(cfg.seed, 0);
    let mut params = mlp.init_params(child_seed(ws, TAG_INIT_PARAMS));
    let ic_values: Vec<f64> =
        colloc.initial.iter().map(|&x| initial_condition(x, &cfg.scenario)).collect();

    let mut history = Vec::new();
    let mut abort = None;
    for (stage_idx, plan) in stages.iter().enumerate() {
        let setup = StageSetup {
            mlp: &mlp,
            scenario: &cfg.scenario,
            colloc: &colloc,
            ic_time: 0.0,
            ic_targets: &ic_values,
            mode: plan.mode,
            adam_epochs: plan.adam_epochs,
            adam_lr: cfg.adam_lr,
            lbfgs_iters: plan.lbfgs_iters,
            lbfgs_initial_step: plan.lbfgs_initial_step,
            resample_seed: cfg
                .resample_conservation_times
                .then(|| child_seed(ws, TAG_CONS_RESAMPLE + stage_idx as u64)),
        };
        if let Some(a) = train_stage(&setup, &mut params, &mut history)? {
            abort = Some(TrainAbort { window: 0, phase: a.phase, epoch: a.epoch, detail: a.detail });
            break;
        }
    }
    let window = WindowResult {
        index: 0,
        t_lo: 0.0,
        t_hi: cfg.scenario.t_final,
        model: cfg.model.clone(),
        params,
        history,
        ic_points: colloc.initial,
        ic_values,
    };
    Ok(TrainOutput { windows: vec![window], abort })
}

fn train_causal(cfg: &TrainConfig, n: usize, conservative: bool) -> Result<TrainOutput, TrainError> {
    let plan = WindowPlan::uniform(cfg.scenario.t_final, n)?;
    let mut windows = Vec::with_capacity(n);
    let mut abort = None;
    let mut prev: Option<(Mlp, Vec<f64>)> = None;

    for i in 0..n {
        let (t_lo, t_hi) = plan.window(i);
        let mut spec = cfg.model.clone();
        spec.input_map =
            InputMap::for_domain((cfg.scenario.x_min, cfg.scenario.x_max), (t_lo, t_hi));
        let mlp = Mlp::new(spec.clone(), true)?;
        let colloc = sample_window_collocation(cfg, i, t_lo, t_hi)?;
        let ic_values: Vec<f64> = match &prev {
            None => colloc.initial.iter().map(|&x| initial_condition(x, &cfg.scenario)).collect(),
            Some((pm, pp)) => colloc.initial.iter().map(|&x| pm.value(pp, x, t_lo)).collect(),
        };
        let ws = window_seed(cfg.seed, i);
        let mut params = mlp.init_params(child_seed(ws, TAG_INIT_PARAMS));
        let mut history = Vec::new();
        let mode = if conservative { conservative_mode(cfg) } else { LossMode::Adaptive };
        let setup = StageSetup {
            mlp: &mlp,
            scenario: &cfg.scenario,
            colloc: &colloc,
            ic_time: t_lo,
            ic_targets: &ic_values,
            mode,
            adam_epochs: cfg.adam_epochs,
            adam_lr: cfg.adam_lr,
            lbfgs_iters: cfg.lbfgs_iters,
            lbfgs_initial_step: 1.0,
            resample_seed: cfg
                .resample_conservation_times
                .then(|| child_seed(ws, TAG_CONS_RESAMPLE)),
        };
        let stage_abort = train_stage(&setup, &mut params, &mut history)?;
        windows.push(WindowResult {
            index: i,
            t_lo,
            t_hi,
            model: spec,
            params: params.clone(),
            history,
            ic_points: colloc.initial,
            ic_values,
        });
        if let Some(a) = stage_abort {
            abort = Some(TrainAbort { window: i, phase: a.phase, epoch: a.epoch, detail: a.detail });
            break;
        }
        prev = Some((mlp, params));
    }
    Ok(TrainOutput { windows, abort })
}

impl TrainOutput {
    /// Stitched evaluable field over the trained windows.
    pub fn solution(&self, scenario: &ScenarioConfig) -> Result<SolutionField, TrainError> {
        let nets = self
            .windows
            .iter()
            .map(|w| {
                Ok(WindowNet {
                    t_lo: w.t_lo,
                    t_hi: w.t_hi,
                    mlp: Mlp::new(w.model.clone(), true)?,
                    params: w.params.clone(),
                })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        stitch(nets, scenario.x_min, scenario.x_max)
    }

    /// Handoff mismatch at each interior window boundary: sup over the
    /// window's initial points of |target - trained net|. Entry i describes
    /// the boundary entering window i + 1.
    pub fn continuity(&self) -> Result<Vec<f64>, TrainError> {
        let mut out = Vec::new();
        for w in self.windows.iter().skip(1) {
            let mlp = Mlp::new(w.model.clone(), true)?;
            let mut worst = 0.0_f64;
            for (&x, &target) in w.ic_points.iter().zip(&w.ic_values) {
                worst = worst.max((target - mlp.value(&w.params, x, w.t_lo)).abs());
            }
            out.push(worst);
        }
        Ok(out)
    }

    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            scenario: cfg.scenario,
            strategy: cfg.strategy,
            seed: cfg.seed,
            lambda_cons: cfg.lambda_cons,
            windows: self
                .windows
                .iter()
                .map(|w| {
                    let layout = crate::network::ParamLayout::of(&w.model, true);
                    let off = layout.lambda_off.expect("adaptive layout");
                    CheckpointWindow {
                        t_lo: w.t_lo,
                        t_hi: w.t_hi,
                        model: w.model.clone(),
                        params: w.params.clone(),
                        lambdas: [w.params[off], w.params[off + 1], w.params[off + 2]],
                        history: w.history.clone(),
                    }
                })
                .collect(),
            abort: self.abort.clone(),
        }
    }
}

/// One window of a stitched network solution.
#[derive(Clone, Debug)]
pub struct WindowNet {
    pub t_lo: f64,
    pub t_hi: f64,
    pub mlp: Mlp,
    pub params: Vec<f64>,
}

/// An evaluable u(x, t): one or more stitched window networks, or an
/// interpolated finite-difference grid.
#[derive(Clone, Debug)]
pub enum SolutionField {
    Net { x_lo: f64, x_hi: f64, windows: Vec<WindowNet> },
    Grid(GridField),
}

/// Piecewise field over ordered contiguous windows: t in [t_0, t_1] uses
/// window 1, then (t_{i-1}, t_i] window i.
pub fn stitch(windows: Vec<WindowNet>, x_lo: f64, x_hi: f64) -> Result<SolutionField, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::Config { what: "no windows to stitch".into() });
    }
    for (i, w) in windows.iter().enumerate() {
        if !(w.t_hi > w.t_lo) || (i > 0 && windows[i - 1].t_hi != w.t_lo) {
            return Err(TrainError::BadStitch { index: i });
        }
    }
    Ok(SolutionField::Net { x_lo, x_hi, windows })
}

impl SolutionField {
    /// Wrap grid snapshots for interpolation; times must strictly increase
    /// and every row must span the grid.
    pub fn from_grid(field: GridField) -> Result<SolutionField, TrainError> {
        if field.times.is_empty()
            || field.times.windows(2).any(|w| !(w[1] > w[0]))
            || field.rows.iter().any(|r| r.len() != field.grid.n)
        {
            return Err(TrainError::BadGrid);
        }
        Ok(SolutionField::Grid(field))
    }

    pub fn x_range(&self) -> (f64, f64) {
        match self {
            SolutionField::Net { x_lo, x_hi, .. } => (*x_lo, *x_hi),
            SolutionField::Grid(g) => (g.grid.lo, g.grid.hi),
        }
    }

    pub fn t_range(&self) -> (f64, f64) {
        match self {
            SolutionField::Net { windows, .. } => {
                (windows[0].t_lo, windows.last().unwrap().t_hi)
            }
            SolutionField::Grid(g) => (g.times[0], *g.times.last().unwrap()),
        }
    }

    fn check_region(&self, x: f64, t: f64) -> Result<(), TrainError> {
        let (x_lo, x_hi) = self.x_range();
        if !(x >= x_lo && x <= x_hi) {
            return Err(TrainError::XOutOfRange { x, lo: x_lo, hi: x_hi });
        }
        let (t_lo, t_hi) = self.t_range();
        if !(t >= t_lo && t <= t_hi) {
            return Err(TrainError::TimeOutOfRange { t, lo: t_lo, hi: t_hi });
        }
        Ok(())
    }

    fn window_at(windows: &[WindowNet], t: f64) -> &WindowNet {
        for w in windows {
            if t <= w.t_hi {
                return w;
            }
        }
        windows.last().unwrap()
    }

    pub fn eval(&self, x: f64, t: f64) -> Result<f64, TrainError> {
        self.check_region(x, t)?;
        match self {
            SolutionField::Net { windows, .. } => {
                let w = Self::window_at(windows, t);
                Ok(w.mlp.value(&w.params, x, t))
            }
            SolutionField::Grid(g) => Ok(grid_eval(g, x, t)),
        }
    }

    /// Field jet at one point; grid-backed solutions have none.
    pub fn eval_jet(&self, x: f64, t: f64) -> Result<Jet, TrainError> {
        self.check_region(x, t)?;
        match self {
            SolutionField::Net { windows, .. } => {
                let w = Self::window_at(windows, t);
                Ok(w.mlp.jet(&w.params, x, t)?)
            }
            SolutionField::Grid(_) => Err(TrainError::NoDerivatives),
        }
    }

    /// Field values along one time slice of a grid.
    pub fn profile(&self, grid: &UniformGrid, t: f64) -> Result<Vec<f64>, TrainError> {
        let xs = grid.points();
        match self {
            SolutionField::Net { .. } => {
                xs.par_iter().map(|&x| self.eval(x, t)).collect::<Result<Vec<_>, _>>()
            }
            SolutionField::Grid(_) => xs.iter().map(|&x| self.eval(x, t)).collect(),
        }
    }

    /// Values and spatial derivatives along one time slice. Grid-backed
    /// fields differentiate the sampled profile.
    pub fn profile_with_dx(
        &self,
        grid: &UniformGrid,
        t: f64,
    ) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
        match self {
            SolutionField::Net { .. } => {
                let xs = grid.points();
                let jets =
                    xs.par_iter().map(|&x| self.eval_jet(x, t)).collect::<Result<Vec<_>, _>>()?;
                Ok((jets.iter().map(|j| j.v).collect(), jets.iter().map(|j| j.dx).collect()))
            }
            SolutionField::Grid(_) => {
                let u = self.profile(grid, t)?;
                let du = grid_gradient(&u, grid.spacing())?;
                Ok((u, du))
            }
        }
    }
}

/// Bilinear interpolation between grid nodes and adjacent snapshots; exact
/// on the nodes. Callers check the region first.
fn grid_eval(g: &GridField, x: f64, t: f64) -> f64 {
    let jt = match g.times.iter().rposition(|&tj| tj <= t) {
        Some(j) => j.min(g.times.len().saturating_sub(2)),
        None => 0,
    };
    let row_lo = &g.rows[jt];
    let h = g.grid.spacing();
    let s = ((x - g.grid.lo) / h).floor();
    let i = (s as usize).min(g.grid.n - 2);
    let wx = (x - g.grid.point(i)) / h;
    let at = |row: &[f64]| row[i] * (1.0 - wx) + row[i + 1] * wx;
    if g.times.len() == 1 {
        return at(row_lo);
    }
    let (t0, t1) = (g.times[jt], g.times[jt + 1]);
    let wt = (t - t0) / (t1 - t0);
    at(row_lo) * (1.0 - wt) + at(&g.rows[jt + 1]) * wt
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointWindow {
    pub t_lo: f64,
    pub t_hi: f64,
    pub model: MlpSpec,
    pub params: Vec<f64>,
    pub lambdas: [f64; 3],
    pub history: Vec<HistoryEntry>,
}

/// Saved run state: everything needed to re-evaluate the trained field and
/// inspect the optimization trace. Reals are written in shortest
/// round-trip decimal form, so parameters reload bit for bit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub scenario: ScenarioConfig,
    pub strategy: Strategy,
    pub seed: u64,
    pub lambda_cons: f64,
    pub windows: Vec<CheckpointWindow>,
    pub abort: Option<TrainAbort>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(std::fs::write(path, serde_json::to_vec(self)?)?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint, TrainError> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let got = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or(TrainError::UnsupportedVersion { got: 0, want: CHECKPOINT_VERSION })?
            as u32;
        if got != CHECKPOINT_VERSION {
            return Err(TrainError::UnsupportedVersion { got, want: CHECKPOINT_VERSION });
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn solution(&self) -> Result<SolutionField, TrainError> {
        let nets = self
            .windows
            .iter()
            .map(|w| {
                Ok(WindowNet {
                    t_lo: w.t_lo,
                    t_hi: w.t_hi,
                    mlp: Mlp::new(w.model.clone(), true)?,
                    params: w.params.clone(),
                })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        stitch(nets, self.scenario.x_min, self.scenario.x_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::ScenarioKind;

    fn tiny_config(strategy: Strategy) -> TrainConfig {
        let scenario = ScenarioConfig::single_soliton();
        let mut cfg = TrainConfig::paper_default(scenario, Variant::Adaptive, 11);
        cfg.model = MlpSpec::hidden(2, 8).with_map(cfg.model.input_map);
        cfg.n_interior = 64;
        cfg.n_initial = 16;
        cfg.n_boundary = 16;
        cfg.adam_epochs = 12;
        cfg.lbfgs_iters = 4;
        cfg.conservation_times = 5;
        cfg.conservation_grid_points = 101;
        cfg.strategy = strategy;
        cfg
    }

    #[test]
    fn paper_defaults_match_published_settings() {
        let s = ScenarioConfig::single_soliton();
        let c = TrainConfig::paper_default(s, Variant::Adaptive, 0);
        assert_eq!(c.model.layer_widths, vec![2, 50, 50, 50, 50, 50, 50, 50, 50, 1]);
        assert_eq!((c.n_interior, c.n_initial, c.n_boundary), (20_000, 5_000, 5_000));
        assert_eq!((c.adam_epochs, c.lbfgs_iters), (30_000, 5_000));
        assert_eq!(c.lambda_cons, 1e-4);
        assert_eq!(c.strategy, Strategy::PlainAdaptive);
        assert_eq!(
            TrainConfig::paper_default(s, Variant::Conservative, 0).strategy,
            Strategy::PlainConservative
        );

        let two = TrainConfig::paper_default(ScenarioConfig::two_soliton(), Variant::Conservative, 0);
        assert_eq!(two.model.layer_widths.len(), 10);
        assert_eq!((two.n_interior, two.adam_epochs, two.lbfgs_iters), (40_000, 50_000, 10_000));
        assert_eq!(two.lambda_cons, 1e-5);
        assert_eq!(two.strategy, Strategy::CurriculumConservative);

        let bore = TrainConfig::paper_default(ScenarioConfig::undular_bore(5.0), Variant::Adaptive, 0);
        assert_eq!((bore.adam_epochs, bore.lbfgs_iters), (20_000, 5_000));
        assert_eq!(bore.strategy, Strategy::Causal { windows: 5, conservative: false });
        assert!(matches!(bore.scenario.kind, ScenarioKind::UndularBore { .. }));
    }

    #[test]
    fn collocation_is_deterministic_and_in_domain() {
        let cfg = tiny_config(Strategy::PlainAdaptive);
        let a = sample_collocation(&cfg).unwrap();
        let b = sample_collocation(&cfg).unwrap();
        assert_eq!(a.interior, b.interior);
        assert_eq!(a.initial, b.initial);
        assert_eq!(a.boundary, b.boundary);

        let s = &cfg.scenario;
        assert_eq!(a.interior.len(), cfg.n_interior);
        for &(x, t) in &a.interior {
            assert!(x >= s.x_min && x <= s.x_max && t >= 0.0 && t <= s.t_final);
        }
        let n_left = a.boundary.iter().filter(|&&(x, _)| x == s.x_min).count();
        let n_right = a.boundary.iter().filter(|&&(x, _)| x == s.x_max).count();
        assert_eq!((n_left, n_right), (8, 8));
        assert_eq!(a.conservation_times.len(), 5);
        assert_eq!(a.conservation_times[0], 0.0);
        assert_eq!(*a.conservation_times.last().unwrap(), s.t_final);

        let mut other = cfg.clone();
        other.seed = 12;
        assert_ne!(sample_collocation(&other).unwrap().interior, a.interior);
    }

    #[test]
    fn zero_budget_stage_is_a_no_op() {
        let cfg = tiny_config(Strategy::PlainAdaptive);
        let colloc = sample_collocation(&cfg).unwrap();
        let mlp = Mlp::new(cfg.model.clone(), true).unwrap();
        let mut params = mlp.init_params(3);
        let before = params.clone();
        let targets: Vec<f64> =
            colloc.initial.iter().map(|&x| initial_condition(x, &cfg.scenario)).collect();
        let mut history = Vec::new();
        let setup = StageSetup {
            mlp: &mlp,
            scenario: &cfg.scenario,
            colloc: &colloc,
            ic_time: 0.0,
            ic_targets: &targets,
            mode: LossMode::Adaptive,
            adam_epochs: 0,
            adam_lr: 1e-3,
            lbfgs_iters: 0,
            lbfgs_initial_step: 1.0,
            resample_seed: None,
        };
        let abort = train_stage(&setup, &mut params, &mut history).unwrap();
        assert!(abort.is_none());
        assert!(history.is_empty());
        assert_eq!(params, before);
    }

    #[test]
    fn training_is_deterministic_and_bookkept() {
        let cfg = tiny_config(Strategy::PlainAdaptive);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert!(a.abort.is_none());
        let (wa, wb) = (&a.windows[0], &b.windows[0]);
        assert_eq!(wa.params, wb.params);
        assert_eq!(wa.history.len(), wb.history.len());
        for (ha, hb) in wa.history.iter().zip(&wb.history) {
            assert_eq!(ha.total.to_bits(), hb.total.to_bits());
        }

        let adam_entries = wa.history.iter().filter(|h| h.phase == Phase::Adam).count();
        let lbfgs_entries = wa.history.iter().filter(|h| h.phase == Phase::Lbfgs).count();
        assert_eq!(adam_entries, cfg.adam_epochs);
        assert!(lbfgs_entries <= cfg.lbfgs_iters);
        for (i, h) in wa.history.iter().enumerate() {
            assert_eq!(h.epoch, i);
            assert_eq!(h.losses.l_cons, 0.0);
        }
        assert!(wa.history.last().unwrap().total < wa.history[0].total);
    }

    #[test]
    fn curriculum_keeps_stage_one_free_of_conservation() {
        let cfg = tiny_config(Strategy::CurriculumConservative);
        let out = train(&cfg).unwrap();
        assert!(out.abort.is_none());
        let h = &out.windows[0].history;
        let adam: Vec<_> = h.iter().filter(|e| e.phase == Phase::Adam).collect();
        let lbfgs: Vec<_> = h.iter().filter(|e| e.phase == Phase::Lbfgs).collect();
        assert_eq!(adam.len(), cfg.adam_epochs);
        assert!(adam.iter().all(|e| e.losses.l_cons == 0.0));
        assert!(!lbfgs.is_empty());
        assert!(lbfgs.iter().all(|e| e.losses.l_cons > 0.0));
    }

    #[test]
    fn causal_windows_hand_off_exactly_and_stitch() {
        let mut cfg = tiny_config(Strategy::Causal { windows: 3, conservative: false });
        cfg.adam_epochs = 6;
        cfg.lbfgs_iters = 2;
        let out = train(&cfg).unwrap();
        assert!(out.abort.is_none());
        assert_eq!(out.windows.len(), 3);

        let t_final = cfg.scenario.t_final;
        let (w1, w2) = (&out.windows[0], &out.windows[1]);
        assert_eq!((w1.t_lo, w1.t_hi), (0.0, t_final / 3.0));
        assert_eq!(w2.t_lo, w1.t_hi);

        // Window 2 inherits window 1's prediction at the boundary verbatim.
        let m1 = Mlp::new(w1.model.clone(), true).unwrap();
        for (&x, &target) in w2.ic_points.iter().zip(&w2.ic_values) {
            assert_eq!(target.to_bits(), m1.value(&w1.params, x, w2.t_lo).to_bits());
        }

        let field = out.solution(&cfg.scenario).unwrap();
        let t1 = w1.t_hi;
        // Closed on the right: the boundary time belongs to the earlier window.
        assert_eq!(field.eval(1.0, t1).unwrap(), m1.value(&w1.params, 1.0, t1));
        let m2 = Mlp::new(w2.model.clone(), true).unwrap();
        let just_after = t1 + t_final / 6.0;
        assert_eq!(field.eval(1.0, just_after).unwrap(), m2.value(&w2.params, 1.0, just_after));

        assert!(matches!(
            field.eval(1.0, t_final + 1.0),
            Err(TrainError::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            field.eval(cfg.scenario.x_max + 1.0, 1.0),
            Err(TrainError::XOutOfRange { .. })
        ));

        let cont = out.continuity().unwrap();
        assert_eq!(cont.len(), 2);
        assert!(cont.iter().all(|c| c.is_finite()));
    }

    #[test]
    fn window_plan_locates_cases() {
        let plan = WindowPlan::uniform(250.0, 5).unwrap();
        assert_eq!(plan.n(), 5);
        assert_eq!(plan.window(0), (0.0, 50.0));
        assert_eq!(plan.locate(50.0).unwrap(), 0);
        assert_eq!(plan.locate(75.0).unwrap(), 1);
        assert_eq!(plan.locate(0.0).unwrap(), 0);
        assert_eq!(plan.locate(250.0).unwrap(), 4);
        assert!(plan.locate(250.1).is_err());
        assert!(plan.locate(-0.1).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_identical() {
        let cfg = tiny_config(Strategy::PlainAdaptive);
        let out = train(&cfg).unwrap();
        let cp = out.checkpoint(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        cp.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.format_version, CHECKPOINT_VERSION);
        assert_eq!(back.windows.len(), cp.windows.len());
        for (a, b) in cp.windows[0].params.iter().zip(&back.windows[0].params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.windows[0].history, cp.windows[0].history);

        let sol_a = cp.solution().unwrap();
        let sol_b = back.solution().unwrap();
        assert_eq!(
            sol_a.eval(2.0, 3.0).unwrap().to_bits(),
            sol_b.eval(2.0, 3.0).unwrap().to_bits()
        );

        let mut text = std::fs::read_to_string(&path).unwrap();
        text = text.replacen("\"format_version\":1", "\"format_version\":9", 1);
        std::fs::write(&path, &text).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(TrainError::UnsupportedVersion { got: 9, .. })
        ));

        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(TrainError::Parse(_))));
    }

    #[test]
    fn grid_solution_interpolates_and_guards_region() {
        let grid = UniformGrid::new(0.0, 4.0, 5).unwrap();
        let plane = |t: f64| grid.points().iter().map(|x| x + 2.0 * t).collect::<Vec<_>>();
        let gf = GridField {
            grid,
            times: vec![0.0, 1.0, 3.0],
            rows: vec![plane(0.0), plane(1.0), plane(3.0)],
        };
        let field = SolutionField::from_grid(gf).unwrap();
        // Bilinear interpolation is exact on a plane.
        assert!((field.eval(1.3, 0.5).unwrap() - (1.3 + 1.0)).abs() < 1e-12);
        assert!((field.eval(3.9, 2.5).unwrap() - (3.9 + 5.0)).abs() < 1e-12);
        assert_eq!(field.eval(4.0, 3.0).unwrap(), 4.0 + 6.0);
        assert!(matches!(field.eval(4.1, 1.0), Err(TrainError::XOutOfRange { .. })));
        assert!(matches!(field.eval(1.0, 3.1), Err(TrainError::TimeOutOfRange { .. })));
        assert!(matches!(field.eval_jet(1.0, 1.0), Err(TrainError::NoDerivatives)));

        let (u, du) = field.profile_with_dx(&grid, 1.0).unwrap();
        assert_eq!(u.len(), 5);
        assert!(du.iter().all(|d| (d - 1.0).abs() < 1e-12));

        let unsorted = GridField {
            grid,
            times: vec![1.0, 0.0],
            rows: vec![plane(1.0), plane(0.0)],
        };
        assert!(SolutionField::from_grid(unsorted).is_err());
    }

    #[test]
    fn stitching_rejects_gaps() {
        let cfg = tiny_config(Strategy::PlainAdaptive);
        let mlp = Mlp::new(cfg.model.clone(), true).unwrap();
        let params = mlp.init_params(1);
        let w = |t_lo: f64, t_hi: f64| WindowNet {
            t_lo,
            t_hi,
            mlp: mlp.clone(),
            params: params.clone(),
        };
        assert!(stitch(vec![w(0.0, 1.0), w(1.0, 2.0)], 0.0, 1.0).is_ok());
        assert!(matches!(
            stitch(vec![w(0.0, 1.0), w(1.5, 2.0)], 0.0, 1.0),
            Err(TrainError::BadStitch { index: 1 })
        ));
        assert!(matches!(
            stitch(vec![w(1.0, 1.0)], 0.0, 1.0),
            Err(TrainError::BadStitch { index: 0 })
        ));
    }
}
