//! Accuracy and variable-selection metrics, and the harness that repeats
//! private and non-private solves over a grid of budgets and sample sizes.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::accountant::{PrivacyParams, PrivacyPlan};
use crate::data::{split_indices, synth_generate, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{Dataset, LossSpec, Penalty, DEFAULT_MU, DEFAULT_REWEIGHT_STEPS};
use crate::noise::derive_seed;
use crate::solver::{run_dpsc, NoiseMode, SolveResult, SolverConfig};

/// Default magnitude at or below which a coefficient of `Z(K)` counts as zero.
pub const DEFAULT_SUPPORT_THRESHOLD: f64 = 1e-6;

const TAG_DATA: u64 = 0x6461_7461;
const TAG_SPLIT: u64 = 0x7370_6c74;
const TAG_SOLVE: u64 = 0x736f_6c76;
const TAG_CV: u64 = 0x6376_3035;

fn predict(score: f64) -> f64 {
    if score >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Fraction of points with `sign(w'x) != y`, where a zero score predicts +1.
pub fn classification_error(w: ArrayView1<'_, f64>, test: &Dataset) -> Result<f64> {
    test.check_dim("w", w.len())?;
    let scores = test.features().dot(&w);
    let wrong = scores
        .iter()
        .zip(test.labels())
        .filter(|(&s, &y)| predict(s) != y)
        .count();
    Ok(wrong as f64 / test.n() as f64)
}

/// `(1/p) ||w_hat - w_true||^2`.
pub fn coefficient_mse(w_hat: ArrayView1<'_, f64>, w_true: ArrayView1<'_, f64>) -> Result<f64> {
    if w_hat.len() != w_true.len() || w_hat.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "w_hat has length {}, w_true has length {}",
            w_hat.len(),
            w_true.len()
        )));
    }
    let d = &w_hat - &w_true;
    Ok(d.dot(&d) / d.len() as f64)
}

/// `(1/n) sum (sigma(w'x_i) - 1{y_i = 1})^2`, the probability-space error
/// used when no true coefficient vector exists.
pub fn brier_score(w: ArrayView1<'_, f64>, data: &Dataset) -> Result<f64> {
    data.check_dim("w", w.len())?;
    let scores = data.features().dot(&w);
    let total: f64 = scores
        .iter()
        .zip(data.labels())
        .map(|(&s, &y)| {
            let prob = 1.0 / (1.0 + (-s).exp());
            let target = if y > 0.0 { 1.0 } else { 0.0 };
            (prob - target).powi(2)
        })
        .sum();
    Ok(total / data.n() as f64)
}

/// `(correctly identified zeros, incorrectly identified zeros)`.
pub fn support_counts(
    z: ArrayView1<'_, f64>,
    w_true: ArrayView1<'_, f64>,
    threshold: f64,
) -> Result<(usize, usize)> {
    if z.len() != w_true.len() {
        return Err(Error::DimensionMismatch(format!(
            "z has length {}, w_true has length {}",
            z.len(),
            w_true.len()
        )));
    }
    let mut can = 0;
    let mut ican = 0;
    for (&zi, &wi) in z.iter().zip(w_true) {
        if zi.abs() <= threshold {
            if wi == 0.0 {
                can += 1;
            } else {
                ican += 1;
            }
        }
    }
    Ok((can, ican))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ce: f64,
    /// Coefficient MSE; only defined when the true coefficients are known.
    pub mse: Option<f64>,
    pub brier: f64,
    pub can_zero: Option<usize>,
    pub ican_zero: Option<usize>,
    pub support_threshold: f64,
}

/// Prediction metrics use `w_final`; selection metrics use the exactly
/// sparse `z_final`.
pub fn evaluate(
    result: &SolveResult,
    test: &Dataset,
    w_true: Option<ArrayView1<'_, f64>>,
    support_threshold: f64,
) -> Result<MetricsReport> {
    let ce = classification_error(result.w_final.view(), test)?;
    let brier = brier_score(result.w_final.view(), test)?;
    let (mse, can_zero, ican_zero) = match w_true {
        Some(wt) => {
            let (can, ican) = support_counts(result.z_final.view(), wt, support_threshold)?;
            (
                Some(coefficient_mse(result.w_final.view(), wt)?),
                Some(can),
                Some(ican),
            )
        }
        None => (None, None, None),
    };
    Ok(MetricsReport {
        ce,
        mse,
        brier,
        can_zero,
        ican_zero,
        support_threshold,
    })
}

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = compensated_sum(xs.iter().copied()) / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let ss = compensated_sum(xs.iter().map(|x| (x - mean).powi(2)));
    (mean, (ss / (n - 1.0)).sqrt())
}

/// One-sided test of `H0: E[later] <= E[earlier]` against an increase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendTest {
    pub mean_change: f64,
    pub statistic: f64,
    pub p_value: f64,
    /// True unless the increase is significant at the chosen level.
    pub non_increasing: bool,
}

fn t_upper_tail(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    1.0 - dist.cdf(t)
}

/// Paired one-sided t-test on `later[i] - earlier[i]`.
pub fn paired_trend_test(earlier: &[f64], later: &[f64], level: f64) -> Result<TrendTest> {
    if earlier.len() != later.len() || earlier.len() < 2 {
        return Err(Error::DimensionMismatch(format!(
            "paired test needs two equal samples of size >= 2, got {} and {}",
            earlier.len(),
            later.len()
        )));
    }
    let diffs: Vec<f64> = later.iter().zip(earlier).map(|(b, a)| b - a).collect();
    let (mean, sd) = mean_sd(&diffs);
    let n = diffs.len() as f64;
    if sd == 0.0 {
        let p = if mean > 0.0 { 0.0 } else { 1.0 };
        return Ok(TrendTest {
            mean_change: mean,
            statistic: if mean > 0.0 { f64::INFINITY } else { 0.0 },
            p_value: p,
            non_increasing: p >= level,
        });
    }
    let t = mean / (sd / n.sqrt());
    let p = t_upper_tail(t, n - 1.0);
    Ok(TrendTest {
        mean_change: mean,
        statistic: t,
        p_value: p,
        non_increasing: p >= level,
    })
}

/// Welch one-sided t-test of `H0: E[later] <= E[earlier]` for independent samples.
pub fn welch_trend_test(earlier: &[f64], later: &[f64], level: f64) -> Result<TrendTest> {
    if earlier.len() < 2 || later.len() < 2 {
        return Err(Error::DimensionMismatch(
            "Welch test needs samples of size >= 2".into(),
        ));
    }
    let (ma, sa) = mean_sd(earlier);
    let (mb, sb) = mean_sd(later);
    let (na, nb) = (earlier.len() as f64, later.len() as f64);
    let va = sa * sa / na;
    let vb = sb * sb / nb;
    let mean = mb - ma;
    if va + vb == 0.0 {
        let p = if mean > 0.0 { 0.0 } else { 1.0 };
        return Ok(TrendTest {
            mean_change: mean,
            statistic: if mean > 0.0 { f64::INFINITY } else { 0.0 },
            p_value: p,
            non_increasing: p >= level,
        });
    }
    let t = mean / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let p = t_upper_tail(t, df);
    Ok(TrendTest {
        mean_change: mean,
        statistic: t,
        p_value: p,
        non_increasing: p >= level,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    /// Non-private L1 logistic regression.
    #[serde(rename = "LLA")]
    Lla,
    /// Non-private L1/2 logistic regression.
    #[serde(rename = "LHA")]
    Lha,
    #[serde(rename = "DPLL")]
    Dpll,
    #[serde(rename = "DPLH")]
    Dplh,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Lla,
        Algorithm::Lha,
        Algorithm::Dpll,
        Algorithm::Dplh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Lla => "LLA",
            Algorithm::Lha => "LHA",
            Algorithm::Dpll => "DPLL",
            Algorithm::Dplh => "DPLH",
        }
    }

    pub fn is_private(self) -> bool {
        matches!(self, Algorithm::Dpll | Algorithm::Dplh)
    }

    pub fn is_l1(self) -> bool {
        matches!(self, Algorithm::Lla | Algorithm::Dpll)
    }

    /// The non-private algorithm with the same penalty.
    pub fn baseline(self) -> Algorithm {
        if self.is_l1() {
            Algorithm::Lla
        } else {
            Algorithm::Lha
        }
    }

    /// Seed key shared by the private algorithm and its baseline, so that
    /// with noise off both follow the same path.
    fn family_key(self) -> u64 {
        if self.is_l1() {
            1
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPolicy {
    /// Every value in `lambdas` gets its own rows.
    FixedList,
    /// 5-fold CV of the non-private solver picks one value per dataset and
    /// penalty; the private runs on that dataset reuse it.
    Cv5NonprivateThenReuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentGrid {
    pub epsilons: Vec<f64>,
    /// Training set sizes.
    pub sizes: Vec<usize>,
    pub test_n: usize,
    pub repeats: usize,
    pub lambda_policy: LambdaPolicy,
    pub lambdas: Vec<f64>,
    pub algorithms: Vec<Algorithm>,
    pub solver: SolverConfig,
    /// Data design; `n` and `seed` are overridden per run.
    pub synth: SynthSpec,
    pub mu: f64,
    pub reweight_steps: usize,
    pub support_threshold: f64,
    pub master_seed: u64,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            epsilons: vec![0.1, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0],
            sizes: vec![10_000],
            test_n: 1000,
            repeats: 50,
            lambda_policy: LambdaPolicy::Cv5NonprivateThenReuse,
            lambdas: vec![0.001, 0.003, 0.01, 0.03, 0.1],
            algorithms: Algorithm::ALL.to_vec(),
            solver: SolverConfig::default(),
            synth: SynthSpec::default(),
            mu: DEFAULT_MU,
            reweight_steps: DEFAULT_REWEIGHT_STEPS,
            support_threshold: DEFAULT_SUPPORT_THRESHOLD,
            master_seed: 0,
        }
    }
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::param("repeats", "must be at least 1"));
        }
        if self.epsilons.is_empty() || self.sizes.is_empty() || self.algorithms.is_empty() {
            return Err(Error::param(
                "grid",
                "epsilons, sizes and algorithms must be non-empty",
            ));
        }
        if self.lambdas.is_empty() {
            return Err(Error::param("lambdas", "must be non-empty"));
        }
        if self.test_n == 0 {
            return Err(Error::param("test_n", "must be at least 1"));
        }
        if self.sizes.contains(&0) {
            return Err(Error::param("sizes", "training sizes must be positive"));
        }
        self.solver.validate()?;
        for &lambda in &self.lambdas {
            self.penalty(Algorithm::Lha, lambda).validate()?;
        }
        SynthSpec {
            n: 1,
            ..self.synth.clone()
        }
        .validate()
    }

    fn penalty(&self, alg: Algorithm, lambda: f64) -> Penalty {
        if alg.is_l1() {
            Penalty::l1(lambda)
        } else {
            Penalty::LHalf {
                lambda,
                mu: self.mu,
                reweight_steps: self.reweight_steps,
            }
        }
    }

    fn plan(&self, epsilon: f64, n_train: usize) -> PrivacyPlan {
        let params = PrivacyParams::new(
            self.solver.max_iter,
            self.solver.c,
            n_train,
            &LossSpec::logistic(),
        );
        PrivacyPlan::for_epsilon(epsilon, &params)
    }

    /// Seeds of run `repeat` at training size `n`.
    pub fn data_seed(&self, n: usize, repeat: usize) -> u64 {
        derive_seed(self.master_seed, &[TAG_DATA, n as u64, repeat as u64])
    }

    pub fn split_seed(&self, n: usize, repeat: usize) -> u64 {
        derive_seed(self.master_seed, &[TAG_SPLIT, n as u64, repeat as u64])
    }

    /// Solver stream of one run. The budget is not part of the key, so the
    /// runs at different epsilons share their underlying random numbers.
    pub fn solver_seed(&self, n: usize, repeat: usize, alg: Algorithm, lambda_index: usize) -> u64 {
        derive_seed(
            self.master_seed,
            &[
                TAG_SOLVE,
                n as u64,
                repeat as u64,
                alg.family_key(),
                lambda_index as u64,
            ],
        )
    }

    fn cv_seed(&self, n: usize, repeat: usize, alg: Algorithm) -> u64 {
        derive_seed(
            self.master_seed,
            &[TAG_CV, n as u64, repeat as u64, alg.family_key()],
        )
    }

    /// Training and test sets of one run.
    pub fn datasets(&self, n: usize, repeat: usize) -> Result<(Dataset, Dataset, Array1<f64>)> {
        let spec = SynthSpec {
            n: n + self.test_n,
            seed: self.data_seed(n, repeat),
            ..self.synth.clone()
        };
        let (all, w_true) = synth_generate(&spec)?;
        let (train_idx, test_idx) =
            split_indices(all.n(), self.test_n, self.split_seed(n, repeat))?;
        Ok((all.select(&train_idx)?, all.select(&test_idx)?, w_true))
    }
}

/// One solve's metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub algorithm: Algorithm,
    /// Budget cell; also set on non-private rows so they align per cell.
    pub epsilon: f64,
    pub gamma: Option<f64>,
    pub n: usize,
    pub repeat: usize,
    pub lambda_index: usize,
    pub lambda: f64,
    pub solver_seed: u64,
    pub valid: bool,
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub n: usize,
    pub repeat: usize,
    pub data_seed: u64,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub algorithm: Algorithm,
    pub epsilon: f64,
    pub gamma: Option<f64>,
    pub n: usize,
    pub p: usize,
    pub lambda: f64,
    pub k: usize,
    pub c: f64,
    pub alpha: f64,
    pub m: usize,
    pub repeats: usize,
    pub ce_mean: f64,
    pub ce_sd: f64,
    pub mse_mean: f64,
    pub mse_sd: f64,
    pub can_mean: f64,
    pub ican_mean: f64,
    pub valid: bool,
}

pub const RESULT_CSV_HEADER: [&str; 18] = [
    "algorithm",
    "epsilon",
    "gamma",
    "n",
    "p",
    "lambda",
    "K",
    "c",
    "alpha",
    "M",
    "repeats",
    "ce_mean",
    "ce_sd",
    "mse_mean",
    "mse_sd",
    "can_mean",
    "ican_mean",
    "valid",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub runs: Vec<RunRecord>,
    pub seeds: Vec<SeedEntry>,
    /// `(n, repeat)` tasks solved in this call.
    pub tasks_computed: usize,
    /// `(n, repeat)` tasks restored from the cache directory.
    pub tasks_loaded: usize,
}

impl ExperimentOutput {
    /// Per-repeat metric values for one (algorithm, epsilon, n) cell, ordered
    /// by repeat. `None` pools every lambda slot, which is what the CV policy
    /// needs since each repeat picks its own lambda.
    pub fn samples(
        &self,
        alg: Algorithm,
        epsilon: f64,
        n: usize,
        lambda_index: Option<usize>,
        metric: impl Fn(&MetricsReport) -> f64,
    ) -> Vec<f64> {
        let mut runs: Vec<&RunRecord> = self
            .runs
            .iter()
            .filter(|r| {
                r.algorithm == alg
                    && r.epsilon == epsilon
                    && r.n == n
                    && lambda_index.is_none_or(|li| r.lambda_index == li)
            })
            .collect();
        runs.sort_by_key(|r| r.repeat);
        runs.iter()
            .filter_map(|r| r.metrics.as_ref())
            .map(&metric)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(RESULT_CSV_HEADER)?;
        let opt = |x: f64| {
            if x.is_nan() {
                String::new()
            } else {
                x.to_string()
            }
        };
        for r in &self.rows {
            w.write_record([
                r.algorithm.name().to_string(),
                r.epsilon.to_string(),
                r.gamma.map(|g| g.to_string()).unwrap_or_default(),
                r.n.to_string(),
                r.p.to_string(),
                r.lambda.to_string(),
                r.k.to_string(),
                r.c.to_string(),
                r.alpha.to_string(),
                r.m.to_string(),
                r.repeats.to_string(),
                opt(r.ce_mean),
                opt(r.ce_sd),
                opt(r.mse_mean),
                opt(r.mse_sd),
                opt(r.can_mean),
                opt(r.ican_mean),
                r.valid.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<results>", e))?;
        Ok(())
    }
}

#[derive(Serialize)]
struct TaskKey<'a> {
    grid: &'a ExperimentGrid,
    n: usize,
    repeat: usize,
}

fn task_key(grid: &ExperimentGrid, n: usize, repeat: usize) -> Result<String> {
    // repeats and sizes only choose which tasks exist
    let normalized = ExperimentGrid {
        repeats: 0,
        sizes: Vec::new(),
        ..grid.clone()
    };
    let json = serde_json::to_vec(&TaskKey {
        grid: &normalized,
        n,
        repeat,
    })?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().take(16).map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize, Deserialize)]
struct CachedTask {
    key: String,
    runs: Vec<RunRecord>,
}

fn solve(
    grid: &ExperimentGrid,
    alg: Algorithm,
    train: &Dataset,
    lambda: f64,
    seed: u64,
    plan: Option<&PrivacyPlan>,
) -> Result<SolveResult> {
    let noise_mode = if alg.is_private() {
        grid.solver.noise_mode
    } else {
        NoiseMode::Off
    };
    let config = SolverConfig {
        seed,
        noise_mode,
        ..grid.solver
    };
    let plan = if noise_mode == NoiseMode::Off {
        None
    } else {
        plan
    };
    run_dpsc(
        train,
        &LossSpec::logistic(),
        &grid.penalty(alg, lambda),
        &config,
        plan,
    )
}

/// Picks the lambda with the lowest 5-fold CV error of the non-private solver;
/// ties go to the larger lambda.
fn cv5_lambda(
    grid: &ExperimentGrid,
    alg: Algorithm,
    train: &Dataset,
    n: usize,
    repeat: usize,
) -> Result<(usize, f64)> {
    const FOLDS: usize = 5;
    let base = alg.baseline();
    let (order, _) = split_indices(train.n() + 1, 1, grid.cv_seed(n, repeat, alg))?;
    let order: Vec<usize> = order.into_iter().filter(|&i| i < train.n()).collect();
    let mut best: Option<(f64, usize)> = None;
    for (li, &lambda) in grid.lambdas.iter().enumerate() {
        let mut errors = Vec::with_capacity(FOLDS);
        for fold in 0..FOLDS {
            let mut held = Vec::new();
            let mut kept = Vec::new();
            for (pos, &i) in order.iter().enumerate() {
                if pos % FOLDS == fold {
                    held.push(i)
                } else {
                    kept.push(i)
                }
            }
            if held.is_empty() || kept.is_empty() {
                continue;
            }
            let fit = solve(
                grid,
                base,
                &train.select(&kept)?,
                lambda,
                grid.solver_seed(n, repeat, base, li),
                None,
            )?;
            errors.push(classification_error(
                fit.w_final.view(),
                &train.select(&held)?,
            )?);
        }
        let (err, _) = mean_sd(&errors);
        if best.is_none_or(|(b, _)| err <= b) {
            best = Some((err, li));
        }
    }
    let (_, li) = best.expect("lambdas is non-empty");
    Ok((li, grid.lambdas[li]))
}

fn run_task(grid: &ExperimentGrid, n: usize, repeat: usize) -> Result<Vec<RunRecord>> {
    let (train, test, w_true) = grid.datasets(n, repeat)?;
    let n_train = train.n();
    let mut records = Vec::new();

    let mut families: Vec<Algorithm> = grid.algorithms.iter().map(|a| a.baseline()).collect();
    families.sort();
    families.dedup();

    for &family in &families {
        let lambdas: Vec<(usize, f64)> = match grid.lambda_policy {
            LambdaPolicy::FixedList => grid.lambdas.iter().copied().enumerate().collect(),
            LambdaPolicy::Cv5NonprivateThenReuse => {
                vec![cv5_lambda(grid, family, &train, n, repeat)?]
            }
        };
        for &alg in grid.algorithms.iter().filter(|a| a.baseline() == family) {
            for &(li, lambda) in &lambdas {
                let seed = grid.solver_seed(n, repeat, alg, li);
                if alg.is_private() {
                    for &epsilon in &grid.epsilons {
                        let plan = grid.plan(epsilon, n_train);
                        let (valid, gamma, metrics) = if plan.valid {
                            let fit = solve(grid, alg, &train, lambda, seed, Some(&plan))?;
                            let m =
                                evaluate(&fit, &test, Some(w_true.view()), grid.support_threshold)?;
                            (true, Some(plan.gamma), Some(m))
                        } else {
                            (false, None, None)
                        };
                        records.push(RunRecord {
                            algorithm: alg,
                            epsilon,
                            gamma,
                            n,
                            repeat,
                            lambda_index: li,
                            lambda,
                            solver_seed: seed,
                            valid,
                            metrics,
                        });
                    }
                } else {
                    let fit = solve(grid, alg, &train, lambda, seed, None)?;
                    let m = evaluate(&fit, &test, Some(w_true.view()), grid.support_threshold)?;
                    for &epsilon in &grid.epsilons {
                        records.push(RunRecord {
                            algorithm: alg,
                            epsilon,
                            gamma: None,
                            n,
                            repeat,
                            lambda_index: li,
                            lambda,
                            solver_seed: seed,
                            valid: true,
                            metrics: Some(m.clone()),
                        });
                    }
                }
            }
        }
    }
    Ok(records)
}

fn load_cached(dir: &Path, key: &str) -> Option<Vec<RunRecord>> {
    let text = fs::read(dir.join(format!("{key}.json"))).ok()?;
    let cached: CachedTask = serde_json::from_slice(&text).ok()?;
    (cached.key == key).then_some(cached.runs)
}

fn store_cached(dir: &Path, key: &str, runs: &[RunRecord]) -> Result<()> {
    let path = dir.join(format!("{key}.json"));
    let tmp = dir.join(format!("{key}.json.tmp"));
    let body = serde_json::to_vec(&CachedTask {
        key: key.to_string(),
        runs: runs.to_vec(),
    })?;
    fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

/// Runs every `(n, repeat)` task of the grid and aggregates per
/// (algorithm, epsilon, n, lambda). With `cache_dir`, finished tasks are
/// stored there and reused on later calls with the same grid.
pub fn run_experiment(grid: &ExperimentGrid, cache_dir: Option<&Path>) -> Result<ExperimentOutput> {
    grid.validate()?;
    if let Some(dir) = cache_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tasks: Vec<(usize, usize)> = grid
        .sizes
        .iter()
        .flat_map(|&n| (0..grid.repeats).map(move |r| (n, r)))
        .collect();

    let outcomes: Vec<Result<(Vec<RunRecord>, bool)>> = tasks
        .par_iter()
        .map(|&(n, r)| {
            let key = task_key(grid, n, r)?;
            if let Some(dir) = cache_dir {
                if let Some(runs) = load_cached(dir, &key) {
                    return Ok((runs, false));
                }
            }
            let runs = run_task(grid, n, r)?;
            if let Some(dir) = cache_dir {
                store_cached(dir, &key, &runs)?;
            }
            Ok((runs, true))
        })
        .collect();

    let mut runs = Vec::new();
    let mut computed = 0;
    let mut loaded = 0;
    for outcome in outcomes {
        let (task_runs, fresh) = outcome?;
        if fresh {
            computed += 1;
        } else {
            loaded += 1;
        }
        runs.extend(task_runs);
    }

    let seeds = tasks
        .iter()
        .map(|&(n, r)| SeedEntry {
            n,
            repeat: r,
            data_seed: grid.data_seed(n, r),
            split_seed: grid.split_seed(n, r),
        })
        .collect();

    Ok(ExperimentOutput {
        rows: aggregate(grid, &runs),
        runs,
        seeds,
        tasks_computed: computed,
        tasks_loaded: loaded,
    })
}

fn aggregate(grid: &ExperimentGrid, runs: &[RunRecord]) -> Vec<ResultRow> {
    let lambda_slots: Vec<usize> = match grid.lambda_policy {
        LambdaPolicy::FixedList => (0..grid.lambdas.len()).collect(),
        LambdaPolicy::Cv5NonprivateThenReuse => vec![usize::MAX],
    };
    let mut rows = Vec::new();
    for &alg in &grid.algorithms {
        for &n in &grid.sizes {
            for &epsilon in &grid.epsilons {
                for &slot in &lambda_slots {
                    let cell: Vec<&RunRecord> = runs
                        .iter()
                        .filter(|r| {
                            r.algorithm == alg
                                && r.n == n
                                && r.epsilon == epsilon
                                && (slot == usize::MAX || r.lambda_index == slot)
                        })
                        .collect();
                    let metrics: Vec<&MetricsReport> =
                        cell.iter().filter_map(|r| r.metrics.as_ref()).collect();
                    let valid = !cell.is_empty() && cell.iter().all(|r| r.valid);
                    let pick = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Vec<f64> {
                        metrics.iter().filter_map(|m| f(m)).collect()
                    };
                    let (ce_mean, ce_sd) = mean_sd(&pick(&|m| Some(m.ce)));
                    let (mse_mean, mse_sd) = mean_sd(&pick(&|m| m.mse));
                    let (can_mean, _) = mean_sd(&pick(&|m| m.can_zero.map(|c| c as f64)));
                    let (ican_mean, _) = mean_sd(&pick(&|m| m.ican_zero.map(|c| c as f64)));
                    let (lambda, _) = mean_sd(&cell.iter().map(|r| r.lambda).collect::<Vec<_>>());
                    let gamma = if alg.is_private() && valid {
                        cell.first().and_then(|r| r.gamma)
                    } else {
                        None
                    };
                    let lambda = if slot == usize::MAX {
                        lambda
                    } else {
                        grid.lambdas[slot]
                    };
                    rows.push(ResultRow {
                        algorithm: alg,
                        epsilon,
                        gamma,
                        n,
                        p: grid.synth.p,
                        lambda,
                        k: grid.solver.max_iter,
                        c: grid.solver.c,
                        alpha: grid.solver.alpha,
                        m: grid.solver.inner_steps,
                        repeats: grid.repeats,
                        ce_mean,
                        ce_sd,
                        mse_mean,
                        mse_sd,
                        can_mean,
                        ican_mean,
                        valid,
                    });
                }
            }
        }
    }
    rows
}
