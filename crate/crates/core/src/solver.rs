//! Differentially private ADMM for penalized margin-loss classification.
//!
//! Each outer iteration runs three steps on the split problem
//! `min (1/n) sum O(y_i w'x_i) + P(Z)  s.t.  w = Z`:
//!
//! 1. `Z(k+1) = prox_{P/c}(w(k) - V(k)/c)` (data independent),
//! 2. `w(k+1)` approximately minimizes the perturbed objective
//!    `(1/n) sum O(y_i w'x_i) + (c/2)||Z(k+1) - w + V(k)/c||^2 + c b'w`
//!    with `M` gradient steps from `w(k)`,
//! 3. `V(k+1) = V(k) + c (Z(k+1) - w(k+1))`.
//!
//! Only step 2 reads the data, so it is the only one that is perturbed.

use std::io::Write;

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::accountant::PrivacyPlan;
use crate::error::{Error, Result};
use crate::model::{
    empirical_risk, empirical_risk_gradient, objective_at, z_update, AdmmState, Dataset, LossSpec,
    Penalty,
};
use crate::noise::{sample_noise, stream, zero_noise, NoiseSpec};

/// Iterates with any coordinate above this magnitude are treated as divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Fresh `b` every outer iteration; what the composition bound assumes.
    PerIteration,
    /// A single `b` drawn before the loop and reused.
    Once,
    /// No perturbation (the non-private baselines).
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Uniform for L1, all-ones for L1/2.
    Auto,
    /// `Z(0)`, `w(0)` uniform on `[-0.5, 0.5]^p`.
    Uniform,
    /// `Z(0) = w(0) = (1, ..., 1)`.
    Ones,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// ADMM penalty coefficient `c`.
    pub c: f64,
    /// Outer iterations `K`.
    pub max_iter: usize,
    /// Gradient steps per w-update `M`.
    pub inner_steps: usize,
    /// Gradient step size.
    pub alpha: f64,
    pub noise_mode: NoiseMode,
    pub seed: u64,
    pub init: InitPolicy,
    /// Optional early stop for the inner loop on the gradient norm.
    pub grad_tol: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            c: 2.5,
            max_iter: 100,
            inner_steps: 10,
            alpha: 0.5,
            noise_mode: NoiseMode::PerIteration,
            seed: 0,
            init: InitPolicy::Auto,
            grad_tol: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::param(
                "c",
                format!("must be finite and > 0, got {}", self.c),
            ));
        }
        if self.max_iter == 0 {
            return Err(Error::param("max_iter", "must be at least 1"));
        }
        if self.inner_steps == 0 {
            return Err(Error::param("inner_steps", "must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::param(
                "alpha",
                format!("must be finite and > 0, got {}", self.alpha),
            ));
        }
        if let Some(tol) = self.grad_tol {
            if !(tol > 0.0) {
                return Err(Error::param("grad_tol", format!("must be > 0, got {tol}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// Penalized objective at `w(k)`.
    pub objective: f64,
    /// Penalized objective at the sparse iterate `Z(k)`.
    pub objective_z: f64,
    /// `||Z(k) - w(k)||_2`.
    pub primal_residual: f64,
    /// `||V(k) - V(k-1)||_2`.
    pub dual_change: f64,
    /// Cumulative budget after this iteration; `None` for non-private runs.
    pub epsilon_spent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub w_final: Array1<f64>,
    pub z_final: Array1<f64>,
    pub v_final: Array1<f64>,
    pub trace: Vec<TraceRow>,
    pub epsilon_spent: Option<f64>,
    pub gamma: Option<f64>,
}

impl SolveResult {
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "iteration",
            "objective",
            "primal_residual",
            "epsilon_spent_so_far",
        ])?;
        for row in &self.trace {
            w.write_record([
                row.iteration.to_string(),
                row.objective.to_string(),
                row.primal_residual.to_string(),
                row.epsilon_spent.map(|e| e.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<trace>", e))?;
        Ok(())
    }
}

/// Value of the perturbed w-objective at `w` for fixed `z = Z(k+1)`, `v = V(k)`.
pub fn private_objective(
    w: ArrayView1<'_, f64>,
    data: &Dataset,
    loss: &LossSpec,
    z: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    c: f64,
    b: ArrayView1<'_, f64>,
) -> f64 {
    let gap = &z - &w + &(&v / c);
    empirical_risk(data, loss, w) + 0.5 * c * gap.dot(&gap) + c * b.dot(&w)
}

/// Gradient of [`private_objective`]:
/// `(1/n) sum y_i O'(y_i w'x_i) x_i - c (z - w + v/c) + c b`.
pub fn private_gradient(
    w: ArrayView1<'_, f64>,
    data: &Dataset,
    loss: &LossSpec,
    z: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    c: f64,
    b: ArrayView1<'_, f64>,
) -> Array1<f64> {
    let mut g = empirical_risk_gradient(data, loss, w);
    g.zip_mut_with(&z, |gi, &zi| *gi -= c * zi);
    g.zip_mut_with(&w, |gi, &wi| *gi += c * wi);
    g -= &v;
    g.scaled_add(c, &b);
    g
}

fn max_abs(x: &Array1<f64>) -> f64 {
    x.iter().fold(
        0.0f64,
        |m, &v| if v.is_nan() { f64::NAN } else { m.max(v.abs()) },
    )
}

fn check_finite(x: &Array1<f64>, outer: usize, inner: usize, what: &str) -> Result<()> {
    let m = max_abs(x);
    if !m.is_finite() || m > DIVERGENCE_LIMIT {
        return Err(Error::Divergence {
            outer,
            inner,
            reason: format!("{what} reached magnitude {m}; reduce alpha"),
        });
    }
    Ok(())
}

/// Perturbed w-step: `M` gradient steps on [`private_objective`] starting at
/// `state.w`, where `state.z` already holds `Z(k+1)` and `state.v` holds `V(k)`.
pub fn w_update_gd(
    state: &AdmmState,
    data: &Dataset,
    loss: &LossSpec,
    config: &SolverConfig,
    b: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    data.check_dim("w", state.w.len())?;
    data.check_dim("z", state.z.len())?;
    data.check_dim("v", state.v.len())?;
    data.check_dim("noise", b.len())?;
    let c = config.c;
    let mut w = state.w.clone();
    for m in 1..=config.inner_steps {
        let g = private_gradient(w.view(), data, loss, state.z.view(), state.v.view(), c, b);
        if let Some(tol) = config.grad_tol {
            if g.dot(&g).sqrt() < tol {
                break;
            }
        }
        w.scaled_add(-config.alpha, &g);
        check_finite(&w, state.k, m, "w")?;
    }
    Ok(w)
}

/// `V(k+1) = V(k) + c (Z(k+1) - w(k+1))`.
pub fn dual_update(
    z_next: ArrayView1<'_, f64>,
    w_next: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    c: f64,
) -> Array1<f64> {
    &v + &((&z_next - &w_next) * c)
}

/// The perturbation implied by stationarity of the w-step at `w`:
/// `b = -(1/(cn)) sum y_i O'(y_i w'x_i) x_i + (z - w + v/c)`.
pub fn implied_noise(
    data: &Dataset,
    loss: &LossSpec,
    w: ArrayView1<'_, f64>,
    z: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    c: f64,
) -> Result<Array1<f64>> {
    data.check_dim("w", w.len())?;
    data.check_dim("z", z.len())?;
    data.check_dim("v", v.len())?;
    let grad = empirical_risk_gradient(data, loss, w);
    Ok(&z - &w + &(&v / c) - &(grad / c))
}

/// `||b' - b||_2` between the implied perturbations of `data` and the
/// neighbouring dataset with row `swapped_index` replaced, both at `state`.
pub fn sensitivity_witness(
    data: &Dataset,
    loss: &LossSpec,
    swapped_index: usize,
    replacement: (ArrayView1<'_, f64>, f64),
    state: &AdmmState,
    c: f64,
) -> Result<f64> {
    if swapped_index >= data.n() {
        return Err(Error::param(
            "swapped_index",
            format!("{swapped_index} out of range for n = {}", data.n()),
        ));
    }
    let (x_new, y_new) = replacement;
    data.check_dim("replacement", x_new.len())?;
    let mut features = data.features().clone();
    let mut labels = data.labels().clone();
    features.row_mut(swapped_index).assign(&x_new);
    labels[swapped_index] = y_new;
    let neighbour = Dataset::new(features, labels)?;
    let b = implied_noise(
        data,
        loss,
        state.w.view(),
        state.z.view(),
        state.v.view(),
        c,
    )?;
    let b_prime = implied_noise(
        &neighbour,
        loss,
        state.w.view(),
        state.z.view(),
        state.v.view(),
        c,
    )?;
    let diff = b_prime - b;
    Ok(diff.dot(&diff).sqrt())
}

fn check_plan(
    plan: &PrivacyPlan,
    data: &Dataset,
    loss: &LossSpec,
    config: &SolverConfig,
) -> Result<()> {
    plan.ensure_valid()?;
    let mismatch = |what: &str, plan_val: String, actual: String| Error::PlanRejected {
        reason: format!("plan was computed for {what} = {plan_val}, run uses {actual}"),
    };
    if plan.k != config.max_iter {
        return Err(mismatch(
            "K",
            plan.k.to_string(),
            config.max_iter.to_string(),
        ));
    }
    if plan.c != config.c {
        return Err(mismatch("c", plan.c.to_string(), config.c.to_string()));
    }
    if plan.n != data.n() {
        return Err(mismatch("n", plan.n.to_string(), data.n().to_string()));
    }
    if plan.c1 != loss.c1 || plan.c2 != loss.c2 {
        return Err(mismatch(
            "(c1, c2)",
            format!("({}, {})", plan.c1, plan.c2),
            format!("({}, {})", loss.c1, loss.c2),
        ));
    }
    Ok(())
}

/// Runs `K` iterations of perturbed ADMM.
///
/// `privacy` must be a valid plan matching `config` and `data` unless
/// `config.noise_mode` is [`NoiseMode::Off`], in which case it is ignored.
/// The initial point always consumes `2p` uniforms from the run's stream,
/// whatever the init policy, so the noise draws line up across policies.
pub fn run_dpsc(
    data: &Dataset,
    loss: &LossSpec,
    penalty: &Penalty,
    config: &SolverConfig,
    privacy: Option<&PrivacyPlan>,
) -> Result<SolveResult> {
    config.validate()?;
    penalty.validate()?;
    let noise_spec = match config.noise_mode {
        NoiseMode::Off => None,
        _ => {
            let plan = privacy.ok_or_else(|| Error::PlanRejected {
                reason: "a privacy plan is required when noise is enabled".into(),
            })?;
            check_plan(plan, data, loss, config)?;
            Some((NoiseSpec::new(plan.gamma, data.p(), config.seed)?, plan))
        }
    };

    let p = data.p();
    let c = config.c;
    let mut rng = stream(config.seed);
    let z0: Array1<f64> = (0..p).map(|_| rng.random::<f64>() - 0.5).collect();
    let w0: Array1<f64> = (0..p).map(|_| rng.random::<f64>() - 0.5).collect();
    let ones = match config.init {
        InitPolicy::Ones => true,
        InitPolicy::Uniform => false,
        InitPolicy::Auto => matches!(penalty, Penalty::LHalf { .. }),
    };
    let mut state = if ones {
        AdmmState::new(Array1::ones(p), Array1::ones(p), Array1::zeros(p))?
    } else {
        AdmmState::new(z0, w0, Array1::zeros(p))?
    };

    let mut fixed_noise = match (config.noise_mode, &noise_spec) {
        (NoiseMode::Once, Some((spec, _))) => Some(sample_noise(spec, &mut rng)?),
        _ => None,
    };
    if config.noise_mode == NoiseMode::Off {
        fixed_noise = Some(zero_noise(p));
    }

    let mut trace = Vec::with_capacity(config.max_iter);
    for k in 0..config.max_iter {
        state.k = k;
        let b = match &fixed_noise {
            Some(b) => b.clone(),
            None => {
                let (spec, _) = noise_spec.as_ref().expect("per-iteration noise has a spec");
                sample_noise(spec, &mut rng)?
            }
        };
        state.z = z_update(state.w.view(), state.v.view(), penalty, c)?;
        check_finite(&state.z, k, 0, "z")?;
        let w_next = w_update_gd(&state, data, loss, config, b.view())?;
        let v_next = dual_update(state.z.view(), w_next.view(), state.v.view(), c);
        check_finite(&v_next, k, config.inner_steps, "v")?;

        let dual_change = {
            let d = &v_next - &state.v;
            d.dot(&d).sqrt()
        };
        state.w = w_next;
        state.v = v_next;
        let residual = {
            let d = &state.z - &state.w;
            d.dot(&d).sqrt()
        };
        trace.push(TraceRow {
            iteration: k + 1,
            objective: objective_at(state.w.view(), data, loss, penalty)?,
            objective_z: objective_at(state.z.view(), data, loss, penalty)?,
            primal_residual: residual,
            dual_change,
            epsilon_spent: noise_spec
                .as_ref()
                .map(|(_, plan)| (k + 1) as f64 * plan.per_iteration_epsilon),
        });
    }
    state.k = config.max_iter;

    Ok(SolveResult {
        w_final: state.w,
        z_final: state.z,
        v_final: state.v,
        trace,
        epsilon_spent: noise_spec.as_ref().map(|(_, plan)| plan.epsilon),
        gamma: noise_spec.as_ref().map(|(spec, _)| spec.gamma),
    })
}

/// Logistic loss with the L1 penalty.
pub fn run_dpll(
    data: &Dataset,
    config: &SolverConfig,
    privacy: Option<&PrivacyPlan>,
    lambda: f64,
) -> Result<SolveResult> {
    run_dpsc(
        data,
        &LossSpec::logistic(),
        &Penalty::l1(lambda),
        config,
        privacy,
    )
}

/// Logistic loss with the L1/2 penalty.
pub fn run_dplh(
    data: &Dataset,
    config: &SolverConfig,
    privacy: Option<&PrivacyPlan>,
    penalty: &Penalty,
) -> Result<SolveResult> {
    if !matches!(penalty, Penalty::LHalf { .. }) {
        return Err(Error::param(
            "penalty",
            "run_dplh requires an l_half penalty",
        ));
    }
    run_dpsc(data, &LossSpec::logistic(), penalty, config, privacy)
}
