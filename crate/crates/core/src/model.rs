//! Problem data model: datasets, smooth losses with derivative bounds,
//! sparsity penalties and the proximal operators used by the Z-update.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed on the unit row-norm bound.
pub const ROW_NORM_SLACK: f64 = 1e-12;

/// Default smoothing offset for the L1/2 reweighting.
pub const DEFAULT_MU: f64 = 1e-4;

/// Default number of reweighting rounds per Z-update for L1/2.
pub const DEFAULT_REWEIGHT_STEPS: usize = 5;

/// Margins beyond this magnitude use the asymptotic branch of the logistic loss.
const SATURATION: f64 = 30.0;

/// Labelled design matrix with rows inside the unit ball and labels in {-1, +1}.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Array1<f64>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Array1<f64>) -> Result<Self> {
        let (n, p) = features.dim();
        if n == 0 || p == 0 {
            return Err(Error::DimensionMismatch(format!(
                "dataset must have at least one row and one column, got {n}x{p}"
            )));
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {n} rows",
                labels.len()
            )));
        }
        for (row, &y) in labels.iter().enumerate() {
            if y != 1.0 && y != -1.0 {
                return Err(Error::InvalidLabel { row, value: y });
            }
        }
        for (row, x) in features.axis_iter(Axis(0)).enumerate() {
            let norm = x.dot(&x).sqrt();
            if !norm.is_finite() || norm > 1.0 + ROW_NORM_SLACK {
                return Err(Error::RowNormExceeded { row, norm });
            }
        }
        Ok(Self { features, labels })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn p(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &Array1<f64> {
        &self.labels
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    /// Rows selected by `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.features.select(Axis(0), indices),
            self.labels.select(Axis(0), indices),
        )
    }

    /// `y_i * <w, x_i>` for every row.
    pub fn margins(&self, w: ArrayView1<'_, f64>) -> Array1<f64> {
        self.features.dot(&w) * &self.labels
    }

    pub(crate) fn check_dim(&self, what: &str, len: usize) -> Result<()> {
        if len != self.p() {
            return Err(Error::DimensionMismatch(format!(
                "{what} has length {len}, dataset has p = {}",
                self.p()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Logistic,
}

/// A margin loss `O(y w'x)` together with the bounds `|O'| <= c1`, `0 <= O'' <= c2`
/// that the privacy analysis depends on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub c1: f64,
    pub c2: f64,
}

impl LossSpec {
    pub fn logistic() -> Self {
        Self {
            kind: LossKind::Logistic,
            c1: 1.0,
            c2: 0.25,
        }
    }

    pub fn value(&self, margin: f64) -> f64 {
        match self.kind {
            LossKind::Logistic => logistic_loss(margin),
        }
    }

    pub fn derivative(&self, margin: f64) -> f64 {
        match self.kind {
            LossKind::Logistic => logistic_loss_derivative(margin),
        }
    }

    pub fn second_derivative(&self, margin: f64) -> f64 {
        match self.kind {
            LossKind::Logistic => {
                let s = logistic_loss_derivative(margin);
                // O'' = sigma(m) * (1 - sigma(m)) = -O' * (1 + O')
                -s * (1.0 + s)
            }
        }
    }
}

/// `log(1 + exp(-margin))` without overflow for large |margin|.
pub fn logistic_loss(margin: f64) -> f64 {
    if margin > SATURATION {
        (-margin).exp()
    } else if margin < -SATURATION {
        -margin + margin.exp()
    } else {
        (-margin).exp().ln_1p()
    }
}

/// `d/dm log(1 + exp(-m)) = -1 / (1 + exp(m))`, always in (-1, 0).
pub fn logistic_loss_derivative(margin: f64) -> f64 {
    if margin > 0.0 {
        let e = (-margin).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + margin.exp())
    }
}

/// Mean loss `(1/n) sum O(y_i w'x_i)`.
pub fn empirical_risk(data: &Dataset, loss: &LossSpec, w: ArrayView1<'_, f64>) -> f64 {
    let margins = data.margins(w);
    margins.iter().map(|&m| loss.value(m)).sum::<f64>() / data.n() as f64
}

/// Gradient of [`empirical_risk`]: `(1/n) sum y_i O'(y_i w'x_i) x_i`.
pub fn empirical_risk_gradient(
    data: &Dataset,
    loss: &LossSpec,
    w: ArrayView1<'_, f64>,
) -> Array1<f64> {
    let margins = data.margins(w);
    let weights: Array1<f64> = margins
        .iter()
        .zip(data.labels())
        .map(|(&m, &y)| y * loss.derivative(m))
        .collect();
    data.features().t().dot(&weights) / data.n() as f64
}

/// Sparsity penalty. `LHalf` is solved by iteratively reweighted L1 with a
/// `mu`-smoothed weight denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Penalty {
    L1 {
        lambda: f64,
    },
    #[serde(rename = "l_half")]
    LHalf {
        lambda: f64,
        #[serde(default = "default_mu")]
        mu: f64,
        #[serde(default = "default_reweight_steps")]
        reweight_steps: usize,
    },
}

fn default_mu() -> f64 {
    DEFAULT_MU
}

fn default_reweight_steps() -> usize {
    DEFAULT_REWEIGHT_STEPS
}

impl Penalty {
    pub fn l1(lambda: f64) -> Self {
        Penalty::L1 { lambda }
    }

    pub fn lhalf(lambda: f64) -> Self {
        Penalty::LHalf {
            lambda,
            mu: DEFAULT_MU,
            reweight_steps: DEFAULT_REWEIGHT_STEPS,
        }
    }

    pub fn lambda(&self) -> f64 {
        match *self {
            Penalty::L1 { lambda } | Penalty::LHalf { lambda, .. } => lambda,
        }
    }

    pub fn with_lambda(self, lambda: f64) -> Self {
        match self {
            Penalty::L1 { .. } => Penalty::L1 { lambda },
            Penalty::LHalf {
                mu, reweight_steps, ..
            } => Penalty::LHalf {
                lambda,
                mu,
                reweight_steps,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambda = self.lambda();
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::param(
                "lambda",
                format!("must be finite and >= 0, got {lambda}"),
            ));
        }
        if let Penalty::LHalf {
            mu, reweight_steps, ..
        } = *self
        {
            if !(mu > 0.0 && mu.is_finite()) {
                return Err(Error::param(
                    "mu",
                    format!("must be finite and > 0, got {mu}"),
                ));
            }
            if reweight_steps == 0 {
                return Err(Error::param("reweight_steps", "must be at least 1"));
            }
        }
        Ok(())
    }

    /// `lambda * ||w||_1` or `lambda * sum |w_i|^{1/2}`.
    pub fn value(&self, w: ArrayView1<'_, f64>) -> f64 {
        match *self {
            Penalty::L1 { lambda } => lambda * w.iter().map(|x| x.abs()).sum::<f64>(),
            Penalty::LHalf { lambda, .. } => lambda * w.iter().map(|x| x.abs().sqrt()).sum::<f64>(),
        }
    }
}

/// ADMM iterate: sparse copy `z`, smooth copy `w`, scaled multiplier `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmState {
    pub z: Array1<f64>,
    pub w: Array1<f64>,
    pub v: Array1<f64>,
    pub k: usize,
}

impl AdmmState {
    pub fn new(z: Array1<f64>, w: Array1<f64>, v: Array1<f64>) -> Result<Self> {
        if z.len() != w.len() || w.len() != v.len() {
            return Err(Error::DimensionMismatch(format!(
                "state vectors have lengths z={}, w={}, v={}",
                z.len(),
                w.len(),
                v.len()
            )));
        }
        if z.iter().chain(&w).chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::param("state", "entries must be finite"));
        }
        Ok(Self { z, w, v, k: 0 })
    }

    pub fn zeros(p: usize) -> Self {
        Self {
            z: Array1::zeros(p),
            w: Array1::zeros(p),
            v: Array1::zeros(p),
            k: 0,
        }
    }

    pub fn p(&self) -> usize {
        self.w.len()
    }
}

/// Soft-thresholding: the minimizer of `t|z| + (1/2)(q - z)^2`.
pub fn soft_threshold(q: f64, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::param("threshold", format!("must be >= 0, got {t}")));
    }
    Ok(shrink(q, t))
}

#[inline]
pub(crate) fn shrink(q: f64, t: f64) -> f64 {
    if q >= t {
        q - t
    } else if q <= -t {
        q + t
    } else {
        0.0
    }
}

fn check_c(c: f64) -> Result<()> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::param(
            "c",
            format!("must be finite and > 0, got {c}"),
        ));
    }
    Ok(())
}

fn prox_center(w: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>, c: f64) -> Result<Array1<f64>> {
    if w.len() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "w has length {}, v has length {}",
            w.len(),
            v.len()
        )));
    }
    Ok(&w - &(&v / c))
}

/// Z-step for the L1 penalty: coordinatewise soft-thresholding of
/// `Q = w - v/c` at level `lambda/c`.
pub fn z_update_l1(
    w: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    lambda: f64,
    c: f64,
) -> Result<Array1<f64>> {
    check_c(c)?;
    if !(lambda >= 0.0) {
        return Err(Error::param(
            "lambda",
            format!("must be >= 0, got {lambda}"),
        ));
    }
    let q = prox_center(w, v, c)?;
    let t = lambda / c;
    Ok(q.mapv(|qi| shrink(qi, t)))
}

/// Z-step for the L1/2 penalty by reweighted soft-thresholding.
///
/// Starting from `Z^0 = (1, ..., 1)`, each of the `reweight_steps` rounds
/// thresholds `Q_i` at `lambda / (2c * |Z_i^t + mu|^{1/2})`, the weight of the
/// tangent majorizer of `lambda * |z|^{1/2}` at `Z^t`. Without the factor 2 the
/// rounds would settle on stationary points of `2 lambda * |z|^{1/2}`.
/// The surrogate is separable, so every round is solved exactly per coordinate.
///
/// When `lambda / (2c) <= 1/5` and at least two rounds run, every coordinate
/// zeroed by the L1 step at the same `lambda` is zeroed here too.
pub fn z_update_lhalf(
    w: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    penalty: &Penalty,
    c: f64,
) -> Result<Array1<f64>> {
    check_c(c)?;
    let Penalty::LHalf {
        lambda,
        mu,
        reweight_steps,
    } = *penalty
    else {
        return Err(Error::param(
            "penalty",
            "z_update_lhalf requires an l_half penalty",
        ));
    };
    penalty.validate()?;
    let q = prox_center(w, v, c)?;
    Ok(q.mapv(|qi| reweighted_shrink(qi, lambda, mu, reweight_steps, c)))
}

fn reweighted_shrink(q: f64, lambda: f64, mu: f64, rounds: usize, c: f64) -> f64 {
    let mut z = 1.0;
    for _ in 0..rounds {
        let t = if lambda == 0.0 {
            0.0
        } else {
            let denom = (z + mu).abs().sqrt();
            if denom == 0.0 {
                f64::INFINITY
            } else {
                lambda / (2.0 * c * denom)
            }
        };
        z = shrink(q, t);
    }
    z
}

/// Dispatches the Z-step on the penalty kind.
pub fn z_update(
    w: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    penalty: &Penalty,
    c: f64,
) -> Result<Array1<f64>> {
    match *penalty {
        Penalty::L1 { lambda } => z_update_l1(w, v, lambda, c),
        Penalty::LHalf { .. } => z_update_lhalf(w, v, penalty, c),
    }
}

/// `(1/n) sum O(y_i w'x_i) + P(w)` for an arbitrary coefficient vector.
pub fn objective_at(
    coef: ArrayView1<'_, f64>,
    data: &Dataset,
    loss: &LossSpec,
    penalty: &Penalty,
) -> Result<f64> {
    data.check_dim("coefficient vector", coef.len())?;
    Ok(empirical_risk(data, loss, coef) + penalty.value(coef))
}

/// Penalized empirical risk evaluated at the smooth iterate `state.w`.
pub fn objective_value(
    state: &AdmmState,
    data: &Dataset,
    loss: &LossSpec,
    penalty: &Penalty,
) -> Result<f64> {
    objective_at(state.w.view(), data, loss, penalty)
}
