//! Reference computations written without the crate's own loss, gradient or
//! prox code, so agreement with them means something.
#![allow(dead_code)]

use dpsc::data::{synth_generate, LabelRule, SynthSpec};
use dpsc::Dataset;
use ndarray::{Array1, Array2};

/// `ln(1 + exp(-m))` evaluated directly, with the usual overflow guard.
pub fn softplus_neg(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn risk(x: &Array2<f64>, y: &Array1<f64>, w: &Array1<f64>) -> f64 {
    let n = x.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let mut m = 0.0;
        for j in 0..x.ncols() {
            m += x[[i, j]] * w[j];
        }
        total += softplus_neg(y[i] * m);
    }
    total / n as f64
}

pub fn risk_grad(x: &Array2<f64>, y: &Array1<f64>, w: &Array1<f64>) -> Array1<f64> {
    let (n, p) = x.dim();
    let mut g = Array1::zeros(p);
    for i in 0..n {
        let mut m = 0.0;
        for j in 0..p {
            m += x[[i, j]] * w[j];
        }
        // d/dw ln(1+exp(-y m)) = -y sigmoid(-y m) x
        let s = -y[i] * sigmoid(-y[i] * m);
        for j in 0..p {
            g[j] += s * x[[i, j]];
        }
    }
    g / n as f64
}

pub fn l1_objective(data: &Dataset, w: &Array1<f64>, lambda: f64) -> f64 {
    risk(data.features(), data.labels(), w) + lambda * w.iter().map(|v| v.abs()).sum::<f64>()
}

fn shrink(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// FISTA with step 4/L where L bounds the largest eigenvalue of X'X/n, run
/// until successive objectives differ by less than `tol`.
pub fn fista_l1(data: &Dataset, lambda: f64, tol: f64, max_iter: usize) -> (Array1<f64>, f64) {
    let x = data.features();
    let y = data.labels();
    let n = x.nrows() as f64;
    let frob = x.iter().map(|v| v * v).sum::<f64>() / n;
    let step = 4.0 / frob;
    let p = x.ncols();
    let mut w = Array1::<f64>::zeros(p);
    let mut u = w.clone();
    let mut t = 1.0f64;
    let mut prev = l1_objective(data, &w, lambda);
    for _ in 0..max_iter {
        let g = risk_grad(x, y, &u);
        let next: Array1<f64> = (&u - &(g * step)).mapv(|v| shrink(v, step * lambda));
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let obj = l1_objective(data, &next, lambda);
        // restart the momentum whenever the objective goes up
        if obj > prev {
            u = w.clone();
            t = 1.0;
            continue;
        }
        u = &next + &((&next - &w) * ((t - 1.0) / t_next));
        w = next;
        t = t_next;
        if (prev - obj).abs() < tol {
            prev = obj;
            break;
        }
        prev = obj;
    }
    (w, prev)
}

/// Damped Newton for the unpenalized logistic risk.
pub fn newton_logistic(data: &Dataset, tol: f64) -> Array1<f64> {
    let x = data.features();
    let y = data.labels();
    let (n, p) = x.dim();
    let mut w = Array1::<f64>::zeros(p);
    for _ in 0..200 {
        let g = risk_grad(x, y, &w);
        let mut h = nalgebra::DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let m: f64 = (0..p).map(|j| x[[i, j]] * w[j]).sum();
            let s = sigmoid(m) * (1.0 - sigmoid(m)) / n as f64;
            for a in 0..p {
                for b in 0..p {
                    h[(a, b)] += s * x[[i, a]] * x[[i, b]];
                }
            }
        }
        let rhs = nalgebra::DVector::from_iterator(p, g.iter().copied());
        let dir = h
            .lu()
            .solve(&rhs)
            .expect("Hessian is invertible on non-separable data");
        let dir = Array1::from_iter(dir.iter().copied());
        let f0 = risk(x, y, &w);
        let slope = g.dot(&dir);
        let mut step = 1.0;
        loop {
            let cand = &w - &(&dir * step);
            if risk(x, y, &cand) <= f0 - 1e-4 * step * slope || step < 1e-12 {
                w = cand;
                break;
            }
            step *= 0.5;
        }
        if g.dot(&g).sqrt() < tol {
            break;
        }
    }
    w
}

/// All local minima of `f` on the grid `lo, lo + step, ..., hi`, endpoints included.
pub fn grid_local_minima(f: impl Fn(f64) -> f64, lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let count = ((hi - lo) / step).round() as usize;
    let xs: Vec<f64> = (0..=count).map(|i| lo + i as f64 * step).collect();
    let fs: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    let mut out = Vec::new();
    for i in 0..xs.len() {
        let left = i == 0 || fs[i] <= fs[i - 1];
        let right = i + 1 == xs.len() || fs[i] <= fs[i + 1];
        if left && right {
            out.push(xs[i]);
        }
    }
    out
}

pub fn grid_argmin(f: impl Fn(f64) -> f64, lo: f64, hi: f64, step: f64) -> f64 {
    let count = ((hi - lo) / step).round() as usize;
    let mut best = (f64::INFINITY, lo);
    for i in 0..=count {
        let x = lo + i as f64 * step;
        let v = f(x);
        if v < best.0 {
            best = (v, x);
        }
    }
    best.1
}

/// Refines a grid minimizer of a unimodal neighbourhood by golden-section search.
pub fn refine_min(f: impl Fn(f64) -> f64, center: f64, half_width: f64) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (center - half_width, center + half_width);
    for _ in 0..200 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if f(c) <= f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    (a + b) / 2.0
}

/// Small correlated design with noisy labels, so the unpenalized problem has
/// a finite minimizer.
pub fn noisy_design(n: usize, p: usize, seed: u64) -> Dataset {
    let spec = SynthSpec {
        n,
        p: p.max(9),
        seed,
        label_rule: LabelRule::Bernoulli,
        true_w: Some(
            (0..p.max(9))
                .map(|j| if j < 3 { 2.0 - j as f64 * 0.5 } else { 0.0 })
                .collect(),
        ),
        ..SynthSpec::default()
    };
    let (data, _) = synth_generate(&spec).expect("valid spec");
    if p >= 9 {
        return data;
    }
    let cols: Vec<usize> = (0..p).collect();
    let x = data.features().select(ndarray::Axis(1), &cols);
    Dataset::new(x, data.labels().clone()).expect("dropping columns keeps rows in the ball")
}

/// Kolmogorov-Smirnov statistic of `sample` against `cdf`.
pub fn ks_statistic(sample: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let n = sample.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sample.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// Asymptotic KS critical value at level 0.01.
pub fn ks_critical_01(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}
