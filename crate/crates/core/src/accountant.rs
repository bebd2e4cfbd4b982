//! Pure-epsilon budget arithmetic for the perturbed ADMM solver.
//!
//! Each outer iteration costs `eps_k = (2*gamma*c1 + 2.8*c2) / (n*c)` provided
//! `c >= 2*c2/n`; K iterations compose linearly to `K * eps_k`.
//!
//! The composed bound is sometimes printed with `2.8*c1` in its second term.
//! The per-iteration analysis (the Jacobian ratio bound `exp(2.8*c2/(nc))`)
//! and the logistic specialization `(8*gamma + 2.8)/(4cn)` both need `c2`,
//! which is what this module uses.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LossSpec;

/// Second-order term of the per-iteration cost.
const JACOBIAN_FACTOR: f64 = 2.8;

/// Everything but the noise parameter that the budget depends on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    /// Outer iterations `K`.
    pub k: usize,
    /// ADMM penalty coefficient.
    pub c: f64,
    /// Training set size.
    pub n: usize,
    pub c1: f64,
    pub c2: f64,
}

impl PrivacyParams {
    pub fn new(k: usize, c: f64, n: usize, loss: &LossSpec) -> Self {
        Self {
            k,
            c,
            n,
            c1: loss.c1,
            c2: loss.c2,
        }
    }

    fn check_positive(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::param("K", "must be at least 1"));
        }
        if self.n == 0 {
            return Err(Error::param("n", "must be at least 1"));
        }
        for (name, x) in [("c", self.c), ("c1", self.c1), ("c2", self.c2)] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::param(
                    name,
                    format!("must be finite and > 0, got {x}"),
                ));
            }
        }
        Ok(())
    }

    /// `c >= 2*c2/n`, the closed form of the per-iteration precondition.
    fn coefficient_violation(&self) -> Option<String> {
        let floor = 2.0 * self.c2 / self.n as f64;
        (self.c < floor).then(|| format!("c = {} is below 2c2/n = {floor}", self.c))
    }

    fn denominator(&self) -> f64 {
        self.n as f64 * self.c
    }

    /// Smallest budget any positive gamma can approach: `K * 2.8*c2/(cn)`.
    pub fn epsilon_floor(&self) -> f64 {
        self.k as f64 * (JACOBIAN_FACTOR * self.c2 / self.denominator())
    }
}

/// Per-iteration cost `(2*gamma*c1 + 2.8*c2)/(n*c)` without precondition checks.
fn per_iteration(gamma: f64, params: &PrivacyParams) -> f64 {
    (2.0 * gamma * params.c1 + JACOBIAN_FACTOR * params.c2) / params.denominator()
}

/// Total budget `K * (2*gamma*c1 + 2.8*c2)/(cn)`.
pub fn epsilon_of(gamma: f64, params: &PrivacyParams) -> Result<f64> {
    params.check_positive()?;
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::param(
            "gamma",
            format!("must be finite and > 0, got {gamma}"),
        ));
    }
    if let Some(reason) = params.coefficient_violation() {
        return Err(Error::PlanRejected { reason });
    }
    Ok(params.k as f64 * per_iteration(gamma, params))
}

/// Noise parameter spending exactly `epsilon` over `K` iterations.
pub fn gamma_for(epsilon: f64, params: &PrivacyParams) -> Result<f64> {
    params.check_positive()?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::param(
            "epsilon",
            format!("must be finite and > 0, got {epsilon}"),
        ));
    }
    let per_iter = epsilon / params.k as f64;
    let scaled = per_iter * params.denominator();
    let floor = JACOBIAN_FACTOR * params.c2;
    if scaled <= floor {
        return Err(Error::InfeasibleBudget {
            requested: epsilon,
            min_epsilon: params.epsilon_floor(),
        });
    }
    Ok((scaled - floor) / (2.0 * params.c1))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validation {
    pub ok: bool,
    pub reason: String,
}

/// Preconditions of the logistic specialization: `c >= 1/(2n)` and
/// `gamma <= c*n - 7/20`. Both inequalities are closed.
pub fn validate_theorem4(c: f64, n: usize, gamma: f64) -> Validation {
    let n = n as f64;
    let mut reasons = Vec::new();
    if c < 1.0 / (2.0 * n) {
        reasons.push("c below 1/(2n)");
    }
    if gamma > c * n - 7.0 / 20.0 {
        reasons.push("gamma exceeds cn - 7/20");
    }
    Validation {
        ok: reasons.is_empty(),
        reason: reasons.join("; "),
    }
}

/// A resolved budget: the (epsilon, gamma) pair plus the parameters it was
/// computed for and whether the analysis applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyPlan {
    pub epsilon: f64,
    pub gamma: f64,
    pub per_iteration_epsilon: f64,
    pub k: usize,
    pub c: f64,
    pub n: usize,
    pub c1: f64,
    pub c2: f64,
    pub valid: bool,
    pub reason: String,
}

impl PrivacyPlan {
    fn assemble(gamma: f64, params: &PrivacyParams, invalid: Option<String>) -> Self {
        let per_iteration_epsilon = per_iteration(gamma, params);
        let mut plan = Self {
            epsilon: params.k as f64 * per_iteration_epsilon,
            gamma,
            per_iteration_epsilon,
            k: params.k,
            c: params.c,
            n: params.n,
            c1: params.c1,
            c2: params.c2,
            valid: invalid.is_none(),
            reason: invalid.unwrap_or_default(),
        };
        if plan.valid {
            if let Some(reason) = plan.extra_violation() {
                plan.valid = false;
                plan.reason = reason;
            }
        }
        plan
    }

    /// Logistic losses also carry the `gamma <= cn - 7/20` condition.
    fn extra_violation(&self) -> Option<String> {
        let logistic = LossSpec::logistic();
        if self.c1 == logistic.c1 && self.c2 == logistic.c2 {
            let check = validate_theorem4(self.c, self.n, self.gamma);
            if !check.ok {
                return Some(check.reason);
            }
        }
        None
    }

    pub fn for_gamma(gamma: f64, params: &PrivacyParams) -> Self {
        let invalid = match epsilon_of(gamma, params) {
            Ok(_) => None,
            Err(Error::PlanRejected { reason }) => Some(reason),
            Err(e) => Some(e.to_string()),
        };
        Self::assemble(gamma, params, invalid)
    }

    /// Plan spending `epsilon` (up to round-off in the inversion; the stored
    /// epsilon is always `K * per_iteration_epsilon`). Infeasible budgets come back with
    /// `valid = false`, `gamma = 0` and the floor in `reason`.
    pub fn for_epsilon(epsilon: f64, params: &PrivacyParams) -> Self {
        match gamma_for(epsilon, params) {
            Ok(gamma) => Self::for_gamma(gamma, params),
            Err(e) => {
                let mut plan = Self::assemble(0.0, params, Some(e.to_string()));
                plan.epsilon = epsilon;
                plan
            }
        }
    }

    pub fn params(&self) -> PrivacyParams {
        PrivacyParams {
            k: self.k,
            c: self.c,
            n: self.n,
            c1: self.c1,
            c2: self.c2,
        }
    }

    pub fn ensure_valid(&self) -> Result<()> {
        if self.valid {
            Ok(())
        } else {
            Err(Error::PlanRejected {
                reason: self.reason.clone(),
            })
        }
    }
}

pub const PLAN_CSV_HEADER: [&str; 10] = [
    "epsilon",
    "gamma",
    "eps_per_iter",
    "K",
    "c",
    "n",
    "c1",
    "c2",
    "valid",
    "reason",
];

pub fn write_plans_csv<W: Write>(out: W, plans: &[PrivacyPlan]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PLAN_CSV_HEADER)?;
    for p in plans {
        w.write_record([
            p.epsilon.to_string(),
            p.gamma.to_string(),
            p.per_iteration_epsilon.to_string(),
            p.k.to_string(),
            p.c.to_string(),
            p.n.to_string(),
            p.c1.to_string(),
            p.c2.to_string(),
            p.valid.to_string(),
            p.reason.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Human-readable aligned table of plans.
pub fn format_plan_table(plans: &[PrivacyPlan]) -> String {
    let rows: Vec<[String; 10]> = plans
        .iter()
        .map(|p| {
            [
                format!("{:.6}", p.epsilon),
                format!("{:.6}", p.gamma),
                format!("{:.6e}", p.per_iteration_epsilon),
                p.k.to_string(),
                p.c.to_string(),
                p.n.to_string(),
                p.c1.to_string(),
                p.c2.to_string(),
                if p.valid { "yes" } else { "no" }.to_string(),
                p.reason.clone(),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = PLAN_CSV_HEADER.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        out.push_str(padded.join("  ").trim_end());
        out.push('\n');
    };
    line(PLAN_CSV_HEADER.to_vec(), &mut out);
    for row in &rows {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}
