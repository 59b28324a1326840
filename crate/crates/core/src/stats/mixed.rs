//! Random-intercept logistic regression by Laplace-approximate maximum
//! likelihood. Parameters are the fixed effects and `tau = ln(sigma_u)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::logit::{check_inputs, clustered_se, fit_logistic, sigmoid, softplus};
use super::special::normal_two_sided_p;
use super::StatsError;

pub const MIN_CLUSTERS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomInterceptOptions {
    pub max_iter: usize,
    /// Convergence threshold on the max-norm of the log-likelihood gradient.
    pub grad_tol: f64,
}

impl Default for RandomInterceptOptions {
    fn default() -> Self {
        RandomInterceptOptions {
            max_iter: 200,
            grad_tol: 1e-5,
        }
    }
}

/// Plain logit with cluster-robust errors, carried when the mixed fit fails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustFallback {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub p_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomInterceptFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub p_values: Vec<f64>,
    pub sigma_u: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_max_norm: f64,
    pub n_clusters: usize,
    pub fallback: Option<RobustFallback>,
}

/// Laplace-approximate marginal log-likelihood and its analytic gradient.
pub struct LaplaceObjective<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    groups: Vec<Vec<usize>>,
}

/// Mode of `h(u) = sum(y*eta - softplus(eta)) - u^2 / (2 sigma^2)`.
fn intercept_mode(eta0: &[f64], y: &[f64], s2inv: f64) -> f64 {
    let h = |u: f64| -> f64 {
        eta0.iter().zip(y).map(|(e, yi)| yi * (e + u) - softplus(e + u)).sum::<f64>() - 0.5 * u * u * s2inv
    };
    let mut u = 0.0;
    let mut hu = h(u);
    for _ in 0..200 {
        let (mut grad, mut curv) = (-u * s2inv, s2inv);
        for (e, yi) in eta0.iter().zip(y) {
            let p = sigmoid(e + u);
            grad += yi - p;
            curv += p * (1.0 - p);
        }
        let step = grad / curv;
        if step.abs() < 1e-13 * (1.0 + u.abs()) {
            break;
        }
        let mut t = 1.0;
        loop {
            let cand = u + t * step;
            let hc = h(cand);
            if hc >= hu - 1e-14 * hu.abs() || t < 1e-8 {
                u = cand;
                hu = hc;
                break;
            }
            t *= 0.5;
        }
    }
    u
}

impl<'a> LaplaceObjective<'a> {
    pub fn new<S: AsRef<str>>(x: &'a DMatrix<f64>, y: &'a [f64], clusters: &[S]) -> Self {
        let mut by: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, c) in clusters.iter().enumerate() {
            by.entry(c.as_ref()).or_default().push(i);
        }
        LaplaceObjective {
            x,
            y,
            groups: by.into_values().collect(),
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.groups.len()
    }

    /// `theta = (beta, tau)`.
    pub fn value_grad(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        let p = self.x.ncols();
        let beta = theta.rows(0, p);
        let tau = theta[p];
        let s2inv = (-2.0 * tau).exp();
        let mut total = 0.0;
        let mut grad = DVector::zeros(p + 1);
        let mut xw = DVector::zeros(p);
        let mut dh_db = DVector::zeros(p);
        let mut score = DVector::zeros(p);
        for rows in &self.groups {
            let eta0: Vec<f64> = rows.iter().map(|&i| self.x.row(i).dot(&beta.transpose())).collect();
            let ys: Vec<f64> = rows.iter().map(|&i| self.y[i]).collect();
            let u = intercept_mode(&eta0, &ys, s2inv);
            xw.fill(0.0);
            score.fill(0.0);
            let mut h = -0.5 * u * u * s2inv;
            let mut sum_w = 0.0;
            let mut ws = Vec::with_capacity(rows.len());
            for (k, &i) in rows.iter().enumerate() {
                let eta = eta0[k] + u;
                let pr = sigmoid(eta);
                let w = pr * (1.0 - pr);
                h += ys[k] * eta - softplus(eta);
                sum_w += w;
                let xi = self.x.row(i).transpose();
                xw.axpy(w, &xi, 1.0);
                score.axpy(ys[k] - pr, &xi, 1.0);
                ws.push((w, w * (1.0 - 2.0 * pr)));
            }
            let big_h = sum_w + s2inv;
            total += h - 0.5 * big_h.ln() - tau;
            let du_db = &xw * (-1.0 / big_h);
            let du_dtau = 2.0 * u * s2inv / big_h;
            dh_db.fill(0.0);
            let mut dh_dtau = -2.0 * s2inv;
            for (k, &i) in rows.iter().enumerate() {
                let wp = ws[k].1;
                let xi = self.x.row(i).transpose();
                dh_db.axpy(wp, &(xi + &du_db), 1.0);
                dh_dtau += wp * du_dtau;
            }
            let mut gb = grad.rows_mut(0, p);
            gb += &score - &dh_db * (0.5 / big_h);
            grad[p] += u * u * s2inv - 0.5 * dh_dtau / big_h - 1.0;
        }
        (total, grad)
    }

    /// Central-difference Hessian of the analytic gradient, symmetrized.
    pub fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let k = theta.len();
        let mut hess = DMatrix::zeros(k, k);
        for j in 0..k {
            let h = 1e-5 * theta[j].abs().max(1.0);
            let mut up = theta.clone();
            up[j] += h;
            let mut dn = theta.clone();
            dn[j] -= h;
            let col = (self.value_grad(&up).1 - self.value_grad(&dn).1) / (2.0 * h);
            hess.set_column(j, &col);
        }
        (&hess + hess.transpose()) * 0.5
    }
}

/// Solve `a d = g` for positive-definite `a`, adding a ridge when needed.
fn regularized_solve(a: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let scale = a.diagonal().amax().max(1e-8);
    let mut ridge = 0.0;
    loop {
        let m = a + DMatrix::identity(a.nrows(), a.ncols()) * ridge;
        if let Some(c) = m.cholesky() {
            return c.solve(g);
        }
        ridge = if ridge == 0.0 { scale * 1e-8 } else { ridge * 10.0 };
        if ridge > scale * 1e8 {
            return g / scale;
        }
    }
}

pub fn fit_random_intercept_logit<S: AsRef<str>>(
    x: &DMatrix<f64>,
    y: &[f64],
    clusters: &[S],
    opts: &RandomInterceptOptions,
) -> Result<RandomInterceptFit, StatsError> {
    check_inputs(x, y)?;
    if clusters.len() != y.len() {
        return Err(StatsError::Domain("one cluster id per row required".into()));
    }
    let objective = LaplaceObjective::new(x, y, clusters);
    let g = objective.n_clusters();
    if g < MIN_CLUSTERS {
        return Err(StatsError::TooFewClusters {
            found: g,
            min: MIN_CLUSTERS,
        });
    }
    let plain = fit_logistic(x, y)?;
    if plain.separation {
        return Err(StatsError::Separation);
    }
    let p = x.ncols();
    let mut theta = DVector::zeros(p + 1);
    for (j, b) in plain.coefficients.iter().enumerate() {
        theta[j] = if b.is_finite() { *b } else { 0.0 };
    }
    theta[p] = 0.5f64.ln();
    let (mut ll, mut grad) = objective.value_grad(&theta);
    let mut iterations = 0;
    let mut converged = grad.amax() < opts.grad_tol;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let neg_hess = -objective.hessian(&theta);
        let mut dir = regularized_solve(&neg_hess, &grad);
        if dir[p].abs() > 2.0 {
            dir *= 2.0 / dir[p].abs();
        }
        let slope = grad.dot(&dir);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand = &theta + &dir * t;
            let (lc, gc) = objective.value_grad(&cand);
            if lc.is_finite() && lc >= ll + 1e-4 * t * slope - 1e-10 * (1.0 + ll.abs()) {
                theta = cand;
                ll = lc;
                grad = gc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        converged = grad.amax() < opts.grad_tol;
        if !moved {
            break;
        }
    }
    let grad_max_norm = grad.amax();
    let cov = (-objective.hessian(&theta)).try_inverse();
    let std_errors: Vec<f64> = (0..p)
        .map(|j| cov.as_ref().map_or(f64::NAN, |c| c[(j, j)].max(0.0).sqrt()))
        .collect();
    let coefficients: Vec<f64> = theta.rows(0, p).iter().copied().collect();
    let p_values = coefficients
        .iter()
        .zip(&std_errors)
        .map(|(b, s)| normal_two_sided_p(b / s))
        .collect();
    let fallback = if converged {
        None
    } else {
        let se = clustered_se(&plain, x, y, clusters)?;
        Some(RobustFallback {
            p_values: plain.p_values(&se),
            coefficients: plain.coefficients.clone(),
            std_errors: se,
        })
    };
    Ok(RandomInterceptFit {
        coefficients,
        std_errors,
        p_values,
        sigma_u: theta[p].exp(),
        log_likelihood: ll,
        iterations,
        converged,
        grad_max_norm,
        n_clusters: g,
        fallback,
    })
}
