//! ComBat location/scale harmonization with parametric empirical Bayes
//! shrinkage, preserving sex and age effects.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataTable;

const MAX_ITER: usize = 100;
const TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CombatError {
    #[error("site {site} has {count} rows; at least 2 are required")]
    TooFewRows { site: usize, count: usize },
    #[error("design matrix is singular: {0}")]
    Singular(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SitePrior {
    pub gamma_bar: f64,
    pub tau2: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombatParams {
    pub n_sites: usize,
    pub dim: usize,
    /// Age enters the regression as `(age - age_center) / age_scale`.
    pub age_center: f64,
    pub age_scale: f64,
    /// Per feature: grand mean, sex and standardized-age coefficients.
    pub alpha: Vec<f64>,
    pub beta_sex: Vec<f64>,
    pub beta_age: Vec<f64>,
    /// Pooled residual standard deviation per feature.
    pub sigma: Vec<f64>,
    /// `[site][feature]` estimates before and after shrinkage. The scale
    /// terms are variances.
    pub gamma_hat: Vec<Vec<f64>>,
    pub delta_hat: Vec<Vec<f64>>,
    pub gamma_star: Vec<Vec<f64>>,
    pub delta_star: Vec<Vec<f64>>,
    pub priors: Vec<SitePrior>,
    pub iterations: Vec<usize>,
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var)
}

pub fn fit_combat(data: &DataTable, n_sites: usize) -> Result<CombatParams, CombatError> {
    let (n, d, k) = (data.len(), data.dim, n_sites);
    if let Some(i) = data.site.iter().position(|&t| t >= k) {
        return Err(CombatError::Invalid(format!("row {i}: site {} with {k} sites", data.site[i])));
    }
    let counts = data.site_counts(k);
    if let Some((site, &count)) = counts.iter().enumerate().find(|(_, &c)| c < 2) {
        return Err(CombatError::TooFewRows { site, count });
    }
    if data.features.iter().any(|v| !v.is_finite()) {
        return Err(CombatError::Invalid("non-finite feature value".into()));
    }
    let (age_center, age_var) = moments(&data.age);
    if !(age_var > 0.0) {
        return Err(CombatError::Singular("age is constant across the table".into()));
    }
    if data.sex.iter().all(|&s| s == data.sex[0]) {
        return Err(CombatError::Singular("sex is constant across the table".into()));
    }
    let age_scale = age_var.sqrt();

    // Columns: one indicator per site, then sex and standardized age.
    let p = k + 2;
    let x = DMatrix::from_fn(n, p, |i, c| match c {
        c if c < k => f64::from(u8::from(data.site[i] == c)),
        c if c == k => f64::from(data.sex[i]),
        _ => (data.age[i] - age_center) / age_scale,
    });
    let xtx = x.transpose() * &x;
    let chol = xtx
        .cholesky()
        .ok_or_else(|| CombatError::Singular("sex or age is collinear with the site indicators".into()))?;
    let y = DMatrix::from_row_slice(n, d, &data.features);
    let b = chol.solve(&(x.transpose() * &y));

    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let alpha: Vec<f64> = (0..d).map(|j| (0..k).map(|t| weights[t] * b[(t, j)]).sum()).collect();
    let beta_sex: Vec<f64> = (0..d).map(|j| b[(k, j)]).collect();
    let beta_age: Vec<f64> = (0..d).map(|j| b[(k + 1, j)]).collect();
    let fitted = &x * &b;
    let sigma: Vec<f64> = (0..d)
        .map(|j| {
            let ss: f64 = (0..n).map(|i| (y[(i, j)] - fitted[(i, j)]).powi(2)).sum();
            (ss / n as f64).sqrt().max(f64::MIN_POSITIVE)
        })
        .collect();

    // Standardized data with the site effect still in.
    let mut z = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            let cov = alpha[j] + beta_sex[j] * x[(i, k)] + beta_age[j] * x[(i, k + 1)];
            z[i * d + j] = (y[(i, j)] - cov) / sigma[j];
        }
    }
    let site_rows: Vec<Vec<usize>> = (0..k).map(|t| data.rows_at_site(t)).collect();
    let site_z = |t: usize, j: usize| site_rows[t].iter().map(|&i| z[i * d + j]).collect::<Vec<_>>();

    let mut gamma_hat = vec![vec![0.0; d]; k];
    let mut delta_hat = vec![vec![0.0; d]; k];
    for t in 0..k {
        for j in 0..d {
            let (m, v) = moments(&site_z(t, j));
            gamma_hat[t][j] = m;
            delta_hat[t][j] = v;
        }
    }

    let priors: Vec<SitePrior> = (0..k)
        .map(|t| {
            let (gamma_bar, tau2) = moments(&gamma_hat[t]);
            let (m, s2) = moments(&delta_hat[t]);
            SitePrior {
                gamma_bar,
                tau2,
                a: (2.0 * s2 + m * m) / s2,
                b: (m * s2 + m * m * m) / s2,
            }
        })
        .collect();

    let solved: Vec<(Vec<f64>, Vec<f64>, Vec<usize>)> = (0..k)
        .map(|t| {
            let prior = &priors[t];
            let nt = site_rows[t].len() as f64;
            let per_feature: Vec<(f64, f64, usize)> = (0..d)
                .into_par_iter()
                .map(|j| shrink(&site_z(t, j), nt, gamma_hat[t][j], delta_hat[t][j], prior))
                .collect();
            let g = per_feature.iter().map(|v| v.0).collect();
            let dl = per_feature.iter().map(|v| v.1).collect();
            let it = per_feature.iter().map(|v| v.2).collect();
            (g, dl, it)
        })
        .collect();
    let mut gamma_star = Vec::with_capacity(k);
    let mut delta_star = Vec::with_capacity(k);
    let mut iterations = Vec::with_capacity(k);
    for (g, dl, it) in solved {
        gamma_star.push(g);
        delta_star.push(dl);
        iterations.push(it.into_iter().max().unwrap_or(0));
    }

    Ok(CombatParams {
        n_sites: k,
        dim: d,
        age_center,
        age_scale,
        alpha,
        beta_sex,
        beta_age,
        sigma,
        gamma_hat,
        delta_hat,
        gamma_star,
        delta_star,
        priors,
        iterations,
    })
}

/// Fixed-point iteration for the posterior site location and variance of
/// one feature.
fn shrink(z: &[f64], nt: f64, g_hat: f64, d_hat: f64, prior: &SitePrior) -> (f64, f64, usize) {
    let location_prior = prior.tau2 > 0.0 && prior.tau2.is_finite();
    let scale_prior = prior.a.is_finite() && prior.b.is_finite() && prior.a > 0.0;
    let mut g = g_hat;
    let mut dl = d_hat.max(f64::MIN_POSITIVE);
    for it in 1..=MAX_ITER {
        let g_new = if location_prior {
            (nt * prior.tau2 * g_hat + dl * prior.gamma_bar) / (nt * prior.tau2 + dl)
        } else {
            g_hat
        };
        let ss: f64 = z.iter().map(|v| (v - g_new).powi(2)).sum();
        let d_new = if scale_prior {
            (prior.b + 0.5 * ss) / (nt / 2.0 + prior.a - 1.0)
        } else {
            ss / (nt - 1.0)
        }
        .max(f64::MIN_POSITIVE);
        let change = ((g_new - g).abs() / g.abs().max(1e-12)).max((d_new - dl).abs() / dl);
        g = g_new;
        dl = d_new;
        if change < TOL {
            return (g, dl, it);
        }
    }
    (g, dl, MAX_ITER)
}

#[derive(Clone, Debug, Serialize)]
pub struct RejectedRow {
    pub row: usize,
    pub id: String,
    pub site: usize,
}

impl CombatParams {
    /// Covariate part of the fitted mean of feature `j`.
    pub fn covariates(&self, sex: u8, age: f64, j: usize) -> f64 {
        self.alpha[j] + self.beta_sex[j] * f64::from(sex) + self.beta_age[j] * (age - self.age_center) / self.age_scale
    }

    /// Removes the shrunk site effects and restores the covariate signal.
    /// Rows from sites unknown to the fit are dropped and returned.
    pub fn apply(&self, data: &DataTable) -> Result<(DataTable, Vec<RejectedRow>), CombatError> {
        if data.dim != self.dim {
            return Err(CombatError::Invalid(format!("table has {} features, params {}", data.dim, self.dim)));
        }
        let (keep, bad): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| data.site[i] < self.n_sites);
        let rejected = bad
            .into_iter()
            .map(|row| RejectedRow {
                row,
                id: data.ids[row].clone(),
                site: data.site[row],
            })
            .collect();
        let mut out = data.subset(&keep);
        for i in 0..out.len() {
            let (s, a, t) = (out.sex[i], out.age[i], out.site[i]);
            for j in 0..self.dim {
                let cov = self.covariates(s, a, j);
                let x = out.row(i)[j];
                let adj = (x - cov - self.gamma_star[t][j] * self.sigma[j]) / self.delta_star[t][j].sqrt() + cov;
                out.row_mut(i)[j] = adj;
            }
        }
        Ok((out, rejected))
    }
}
