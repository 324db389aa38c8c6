//! Scratch probe for bore window tuning. Not part of the shipped suite;
//! delete before release.

use std::time::Instant;

use rlw_pinn::metrics::find_peaks;
use rlw_pinn::network::{InputMap, MlpSpec};
use rlw_pinn::physics::{ScenarioConfig, UniformGrid};
use rlw_pinn::reference::{fd_solve, FdConfig};
use rlw_pinn::train::{train, Strategy, TrainConfig, Variant};

fn fd_targets() {
    let scenario = ScenarioConfig::undular_bore(5.0);
    let mut fcfg = FdConfig::default_for(scenario);
    fcfg.sample_times = (0..6).map(|k| 50.0 * k as f64).collect();
    let oracle = fd_solve(&fcfg).unwrap();
    for k in 0..6 {
        let t = 50.0 * k as f64;
        let (row, _) = oracle.snapshot(t, 1e-6).unwrap();
        let amp = row.iter().cloned().fold(0.0, f64::max);
        println!("fd t={t}: lead amp {amp:.4}");
    }
}

fn win1(depth: usize, width: usize, n_int: usize, lr: f64) {
    let mut scenario = ScenarioConfig::undular_bore(5.0);
    scenario.t_final = 50.0;
    let t0 = Instant::now();
    let mut cfg = TrainConfig::paper_default(scenario, Variant::Adaptive, 1);
    cfg.model = MlpSpec::hidden(depth, width)
        .with_map(InputMap::for_domain((scenario.x_min, scenario.x_max), (0.0, 50.0)));
    cfg.n_interior = n_int;
    cfg.n_initial = n_int / 5;
    cfg.n_boundary = n_int / 5;
    cfg.adam_epochs = 3_000;
    cfg.lbfgs_iters = 300;
    cfg.adam_lr = lr;
    cfg.strategy = Strategy::PlainAdaptive;

    let out = train(&cfg).unwrap();
    let hist = &out.windows[0].history;
    let end = &hist[hist.len() - 1];
    let adam_end = &hist[3000.min(hist.len() - 1)];
    let sol = out.solution(&scenario).unwrap();
    let grid = UniformGrid::new(scenario.x_min, scenario.x_max, 2241).unwrap();
    let prof = sol.profile(&grid, 50.0).unwrap();
    let amp = prof.iter().cloned().fold(0.0, f64::max);
    let peaks = find_peaks(&prof, &grid.points(), 0.05).unwrap();
    println!(
        "{depth}x{width} n={n_int} lr={lr:.0e}: amp(t=50) {amp:.4}, {} peaks, pde {:.1e}->{:.1e} \
         ic {:.1e}->{:.1e} lam [{:+.1} {:+.1} {:+.1}] abort={:?} {:.0}s",
        peaks.len(),
        adam_end.losses.l_pde,
        end.losses.l_pde,
        adam_end.losses.l_ic,
        end.losses.l_ic,
        end.lambdas[0],
        end.lambdas[1],
        end.lambdas[2],
        out.abort,
        t0.elapsed().as_secs_f64()
    );
}

#[test]
fn probe_bore_window1() {
    fd_targets();
    win1(4, 32, 5_000, 1e-2);
    win1(4, 32, 5_000, 5e-3);
    win1(4, 32, 20_000, 1e-2);
    win1(6, 48, 5_000, 1e-2);
}

fn full_causal(depth: usize, width: usize, lr: f64, seed: u64) {
    full_causal_v(depth, width, lr, seed, false)
}

fn full_causal_v(depth: usize, width: usize, lr: f64, seed: u64, conservative: bool) {
    let scenario = ScenarioConfig::undular_bore(5.0);
    let t0 = Instant::now();
    let variant = if conservative { Variant::Conservative } else { Variant::Adaptive };
    let mut cfg = TrainConfig::paper_default(scenario, variant, seed);
    cfg.model = MlpSpec::hidden(depth, width)
        .with_map(InputMap::for_domain((scenario.x_min, scenario.x_max), (0.0, 250.0)));
    cfg.n_interior = 5_000;
    cfg.n_initial = 1_000;
    cfg.n_boundary = 1_000;
    cfg.adam_epochs = 3_000;
    cfg.lbfgs_iters = 300;
    cfg.adam_lr = lr;
    cfg.strategy = Strategy::Causal { windows: 5, conservative };

    let out = train(&cfg).unwrap();
    let worst_join = out.continuity().unwrap().into_iter().fold(0.0, f64::max);
    let sol = out.solution(&scenario).unwrap();
    let grid = UniformGrid::new(scenario.x_min, scenario.x_max, 2241).unwrap();
    let amps: Vec<f64> = (0..6)
        .map(|k| sol.profile(&grid, 50.0 * k as f64).unwrap().into_iter().fold(0.0, f64::max))
        .collect();
    let monotone = amps.windows(2).all(|w| w[1] > w[0]);
    let dev = (amps[5] - 0.1777_f64).abs() / 0.1777;
    println!(
        "{depth}x{width} lr={lr:.1e} seed={seed} cons={conservative}: amps {} join \
         {worst_join:.2e} mono={monotone} dev={dev:.3} abort={:?} {:.0}s",
        amps.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join("->"),
        out.abort,
        t0.elapsed().as_secs_f64()
    );
}

#[test]
fn probe_bore_full() {
    full_causal(4, 32, 5e-3, 1);
    full_causal(4, 32, 6e-3, 1);
    full_causal(4, 32, 4e-3, 1);
}

#[test]
fn probe_bore_full_capacity() {
    full_causal(4, 64, 5e-3, 1);
    full_causal(6, 48, 5e-3, 1);
}

#[test]
fn probe_bore_full_cons() {
    full_causal_v(4, 32, 5e-3, 1, true);
}

#[test]
fn probe_bore_window1_b() {
    win1(4, 32, 5_000, 3e-3);
    win1(4, 32, 5_000, 2e-3);
    win1(6, 48, 5_000, 5e-3);
    win1(6, 48, 5_000, 3e-3);
}
