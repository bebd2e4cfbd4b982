mod common;

use common::{
    fista_l1, grid_local_minima, l1_objective, newton_logistic, noisy_design, refine_min, risk,
};
use dpsc::data::{synth_generate, SynthSpec};
use dpsc::model::{z_update_lhalf, LossSpec, Penalty};
use dpsc::noise::stream;
use dpsc::solver::{
    implied_noise, private_gradient, private_objective, sensitivity_witness, w_update_gd,
    InitPolicy,
};
use dpsc::{
    run_dplh, run_dpll, run_dpsc, AdmmState, Dataset, NoiseMode, PrivacyParams, PrivacyPlan,
    SolverConfig,
};
use ndarray::{array, Array1, Array2};
use rand::Rng;

fn quiet(max_iter: usize) -> SolverConfig {
    SolverConfig {
        max_iter,
        noise_mode: NoiseMode::Off,
        ..SolverConfig::default()
    }
}

fn random_vec(rng: &mut impl Rng, p: usize, scale: f64) -> Array1<f64> {
    (0..p).map(|_| rng.random_range(-scale..scale)).collect()
}

#[test]
fn noise_off_l1_reaches_proximal_gradient_optimum() {
    let cases = [
        (50, 5, 0.02, 1),
        (120, 8, 0.05, 2),
        (200, 10, 0.01, 3),
        (80, 6, 0.1, 4),
    ];
    for (n, p, lambda, seed) in cases {
        let data = noisy_design(n, p, seed);
        let (_, reference) = fista_l1(&data, lambda, 1e-12, 200_000);
        let fit = run_dpll(&data, &quiet(3000), None, lambda).unwrap();
        let reached = l1_objective(&data, &fit.z_final, lambda);
        assert!(
            (reached - reference).abs() < 1e-4,
            "n={n} p={p} lambda={lambda}: {reached} vs {reference}"
        );
    }
}

#[test]
fn zero_penalty_matches_newton_fit() {
    let data = noisy_design(150, 4, 11);
    let newton = newton_logistic(&data, 1e-12);
    let early = run_dpll(&data, &quiet(200), None, 0.0).unwrap();
    let gap = &early.z_final - &early.w_final;
    assert!(gap.dot(&gap).sqrt() < 1e-4);
    // the risk's curvature is far below c, so agreement with the fit takes
    // many more outer iterations
    let fit = run_dpll(&data, &quiet(40_000), None, 0.0).unwrap();
    let diff = &fit.w_final - &newton;
    assert!(
        diff.iter().all(|d| d.abs() < 1e-3),
        "{fit:?} vs {newton}",
        fit = fit.w_final
    );
    let x = data.features();
    let y = data.labels();
    assert!((risk(x, y, &fit.w_final) - risk(x, y, &newton)).abs() < 1e-8);
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let mut rng = stream(21);
    let loss = LossSpec::logistic();
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let p = 1 + trial % 7;
        let data = noisy_design(40, p, 100 + trial as u64);
        let w = random_vec(&mut rng, p, 2.0);
        let z = random_vec(&mut rng, p, 2.0);
        let v = random_vec(&mut rng, p, 2.0);
        let b = random_vec(&mut rng, p, 1.0);
        let c = rng.random_range(0.5..5.0);
        let g = private_gradient(w.view(), &data, &loss, z.view(), v.view(), c, b.view());
        let h = 1e-6;
        let fd: Array1<f64> = (0..p)
            .map(|j| {
                let mut up = w.clone();
                let mut down = w.clone();
                up[j] += h;
                down[j] -= h;
                (private_objective(up.view(), &data, &loss, z.view(), v.view(), c, b.view())
                    - private_objective(down.view(), &data, &loss, z.view(), v.view(), c, b.view()))
                    / (2.0 * h)
            })
            .collect();
        let rel = (&g - &fd).dot(&(&g - &fd)).sqrt() / g.dot(&g).sqrt().max(1e-8);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn converged_w_step_recovers_injected_noise() {
    let data = noisy_design(30, 3, 5);
    let loss = LossSpec::logistic();
    let c = 2.0;
    let state = AdmmState::new(
        array![0.3, -0.2, 0.1],
        array![0.0, 0.5, -0.5],
        array![0.2, 0.1, -0.3],
    )
    .unwrap();
    let b = array![0.05, -0.1, 0.02];
    let config = SolverConfig {
        c,
        inner_steps: 5000,
        alpha: 0.1,
        ..SolverConfig::default()
    };
    let w = w_update_gd(&state, &data, &loss, &config, b.view()).unwrap();
    let g = private_gradient(
        w.view(),
        &data,
        &loss,
        state.z.view(),
        state.v.view(),
        c,
        b.view(),
    );
    assert!(g.dot(&g).sqrt() < 1e-6);
    let recovered =
        implied_noise(&data, &loss, w.view(), state.z.view(), state.v.view(), c).unwrap();
    assert!(
        (&recovered - &b).iter().all(|d| d.abs() < 1e-6),
        "{recovered} vs {b}"
    );
}

#[test]
fn stationary_start_barely_moves() {
    // b = 0 and z = w - v/c zero the proximity term; margins large and
    // positive make the data gradient vanish
    let x = array![[0.9, 0.1], [-0.8, 0.2]];
    let data = Dataset::new(x, array![1.0, -1.0]).unwrap();
    let w = array![200.0, 0.0];
    let v = array![0.5, -0.5];
    let c = 2.5;
    let state = AdmmState::new(&w - &(&v / c), w.clone(), v).unwrap();
    let moved = w_update_gd(
        &state,
        &data,
        &LossSpec::logistic(),
        &quiet(1),
        Array1::zeros(2).view(),
    )
    .unwrap();
    assert!((&moved - &w).iter().all(|d| d.abs() < 1e-12));
}

#[test]
fn sensitivity_stays_within_bound() {
    let mut rng = stream(33);
    let loss = LossSpec::logistic();
    let data = noisy_design(60, 6, 8);
    let c = 2.5;
    let bound = 2.0 / (c * data.n() as f64);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let state = AdmmState::new(
            random_vec(&mut rng, 6, 5.0),
            random_vec(&mut rng, 6, 5.0),
            random_vec(&mut rng, 6, 5.0),
        )
        .unwrap();
        let mut x = random_vec(&mut rng, 6, 1.0);
        let norm = x.dot(&x).sqrt();
        if norm > 1.0 {
            x /= norm;
        }
        let y = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let idx = rng.random_range(0..data.n());
        worst =
            worst.max(sensitivity_witness(&data, &loss, idx, (x.view(), y), &state, c).unwrap());
    }
    assert!(worst <= bound + 1e-12, "{worst} > {bound}");

    let same = sensitivity_witness(
        &data,
        &loss,
        3,
        (data.row(3), data.labels()[3]),
        &AdmmState::zeros(6),
        c,
    )
    .unwrap();
    assert_eq!(same, 0.0);
}

#[test]
fn adversarial_neighbour_approaches_but_respects_bound() {
    // both points sit deep on the wrong side of w, so |O'| is near 1, and
    // their directions differ in the coordinate orthogonal to w
    let loss = LossSpec::logistic();
    let c = 2.5;
    let mut best = 0.0f64;
    for scale in [1e1, 1e2, 1e3, 1e4] {
        for b in [0.9, 0.99, 0.999] {
            let a = (1.0f64 - b * b).sqrt();
            let features = Array2::from_shape_vec((2, 2), vec![a, b, 0.5, 0.0]).unwrap();
            let data = Dataset::new(features, array![1.0, 1.0]).unwrap();
            let state =
                AdmmState::new(Array1::zeros(2), array![-scale, 0.0], Array1::zeros(2)).unwrap();
            let replacement = array![a, -b];
            let witness =
                sensitivity_witness(&data, &loss, 0, (replacement.view(), 1.0), &state, c).unwrap();
            let bound = 2.0 / (c * data.n() as f64);
            assert!(witness <= bound + 1e-12);
            best = best.max(witness / bound);
        }
    }
    assert!(
        best > 0.99,
        "adversarial pair only reached {best} of the bound"
    );
}

fn logistic_plan(k: usize, c: f64, n: usize, epsilon: f64) -> PrivacyPlan {
    PrivacyPlan::for_epsilon(epsilon, &PrivacyParams::new(k, c, n, &LossSpec::logistic()))
}

#[test]
fn zero_lambda_dplh_follows_dpll_path() {
    let data = noisy_design(200, 5, 17);
    let config = SolverConfig {
        max_iter: 30,
        init: InitPolicy::Ones,
        seed: 99,
        ..SolverConfig::default()
    };
    let plan = logistic_plan(30, config.c, data.n(), 20.0);
    let a = run_dpll(&data, &config, Some(&plan), 0.0).unwrap();
    let b = run_dplh(&data, &config, Some(&plan), &Penalty::lhalf(0.0)).unwrap();
    assert_eq!(a.w_final, b.w_final);
    assert_eq!(a.z_final, b.z_final);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn per_iteration_noise_is_reproducible() {
    let data = noisy_design(100, 4, 2);
    let config = SolverConfig {
        max_iter: 20,
        seed: 5,
        ..SolverConfig::default()
    };
    let plan = logistic_plan(20, config.c, data.n(), 5.0);
    let a = run_dpll(&data, &config, Some(&plan), 0.01).unwrap();
    let b = run_dpll(&data, &config, Some(&plan), 0.01).unwrap();
    let bits = |x: &Array1<f64>| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.w_final), bits(&b.w_final));
    assert_eq!(a.epsilon_spent, Some(plan.epsilon));
}

#[test]
fn huge_lambda_zeroes_z() {
    let data = noisy_design(80, 5, 3);
    let fit = run_dpll(&data, &quiet(20), None, 1e6).unwrap();
    assert!(fit.z_final.iter().all(|&z| z == 0.0));
}

#[test]
fn dplh_z_steps_are_local_minimizers_of_their_subproblem() {
    // replays a noise-off L1/2 run step by step and checks every Z-update
    // against a per-coordinate grid search of the scalar subproblem
    let data = noisy_design(60, 4, 23);
    let loss = LossSpec::logistic();
    let lambda = 0.05;
    let penalty = Penalty::LHalf {
        lambda,
        mu: 1e-4,
        reweight_steps: 40,
    };
    let config = SolverConfig {
        noise_mode: NoiseMode::Off,
        ..SolverConfig::default()
    };
    let c = config.c;
    let mut state = AdmmState::new(Array1::ones(4), Array1::ones(4), Array1::zeros(4)).unwrap();
    let zero = Array1::zeros(4);
    let mut checked = 0;
    for k in 0..15 {
        let z = z_update_lhalf(state.w.view(), state.v.view(), &penalty, c).unwrap();
        let q = &state.w - &(&state.v / c);
        for (i, (&zi, &qi)) in z.iter().zip(&q).enumerate() {
            let f = |x: f64| lambda * x.abs().sqrt() + 0.5 * c * (qi - x).powi(2);
            let span = qi.abs() + 0.5;
            let minima = grid_local_minima(f, -span, span, 1e-5);
            let nearest = minima
                .iter()
                .map(|&m| {
                    if m == 0.0 || m.abs() < 2e-5 {
                        0.0
                    } else {
                        refine_min(f, m, 2e-5)
                    }
                })
                .map(|m| (m - zi).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(
                nearest < 1e-4,
                "step {k} coord {i}: z={zi}, q={qi}, minima {minima:?}"
            );
            checked += 1;
        }
        state.z = z;
        state.w = w_update_gd(&state, &data, &loss, &config, zero.view()).unwrap();
        state.v = &state.v + &((&state.z - &state.w) * c);
        state.k += 1;
    }
    assert_eq!(checked, 60);
}

/// Runs on the experiment design at n = 2000, p = 20.
fn design_runs(runs: usize) -> Vec<(Dataset, Array1<f64>, u64)> {
    (0..runs)
        .map(|r| {
            let spec = SynthSpec {
                n: 2000,
                p: 20,
                seed: 1000 + r as u64,
                ..SynthSpec::default()
            };
            let (data, w) = synth_generate(&spec).unwrap();
            (data, w, 5000 + r as u64)
        })
        .collect()
}

/// 5-fold CV over {0.001, 0.003, 0.01, 0.03, 0.1} averaged 0.0084 for the L1
/// family in a 30-repeat pilot of this design; fixed here at 0.01.
const PILOT_LAMBDA: f64 = 0.01;

#[test]
fn dpll_keeps_the_large_coefficients_at_generous_budget() {
    let runs = design_runs(30);
    let mut hits = 0;
    for (data, w_true, seed) in &runs {
        let config = SolverConfig {
            seed: *seed,
            ..SolverConfig::default()
        };
        let plan = logistic_plan(config.max_iter, config.c, data.n(), 4.0);
        let fit = run_dpll(data, &config, Some(&plan), PILOT_LAMBDA).unwrap();
        let large = w_true
            .iter()
            .enumerate()
            .filter(|(_, &v)| v >= 4.0)
            .map(|(i, _)| i);
        if large.clone().all(|i| fit.z_final[i].abs() > 1e-6) {
            hits += 1;
        }
    }
    assert!(
        hits * 10 >= runs.len() * 9,
        "large support kept in {hits}/30 runs"
    );
}

#[test]
fn dplh_is_no_denser_than_dpll_on_average() {
    let runs = design_runs(30);
    let (mut l1_nonzero, mut lh_nonzero) = (0usize, 0usize);
    for (data, _, seed) in &runs {
        let config = SolverConfig {
            seed: *seed,
            ..SolverConfig::default()
        };
        let plan = logistic_plan(config.max_iter, config.c, data.n(), 4.0);
        let l1 = run_dpll(data, &config, Some(&plan), PILOT_LAMBDA).unwrap();
        let lh = run_dplh(data, &config, Some(&plan), &Penalty::lhalf(PILOT_LAMBDA)).unwrap();
        l1_nonzero += l1.z_final.iter().filter(|z| z.abs() > 1e-6).count();
        lh_nonzero += lh.z_final.iter().filter(|z| z.abs() > 1e-6).count();
    }
    assert!(
        lh_nonzero <= l1_nonzero,
        "L1/2 kept {lh_nonzero} vs L1 {l1_nonzero}"
    );
}

#[test]
fn noise_off_objective_settles_on_small_fixture() {
    let data = noisy_design(50, 5, 41);
    let fit = run_dpsc(
        &data,
        &LossSpec::logistic(),
        &Penalty::l1(0.02),
        &quiet(60),
        None,
    )
    .unwrap();
    let objs: Vec<f64> = fit.trace.iter().map(|t| t.objective).collect();
    for pair in objs[5..].windows(2) {
        assert!(pair[1] <= pair[0] + 1e-9, "{} then {}", pair[0], pair[1]);
    }
}
