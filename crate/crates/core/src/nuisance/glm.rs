//! Maximum likelihood for the two working-model families.
//!
//! Gaussian fits are closed-form weighted least squares. Binomial fits use
//! Newton steps on the log-likelihood (iteratively reweighted least squares)
//! with step halving whenever a full step lowers the likelihood.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::spec::Family;
use crate::error::{Error, IterationRecord, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlmOptions {
    /// Sup-norm tolerance on the score of the average log-likelihood.
    pub tol: f64,
    pub max_iter: usize,
    /// Logit coefficients, or converged linear predictors, beyond this
    /// magnitude signal separation (fitted probabilities numerically 0 or 1).
    pub separation_bound: f64,
}

impl Default for GlmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
            separation_bound: 30.0,
        }
    }
}

/// Column-named design matrix.
#[derive(Debug, Clone)]
pub struct Design {
    pub matrix: DMatrix<f64>,
    pub names: Vec<String>,
}

impl Design {
    pub fn from_rows(rows: &[Vec<f64>], names: Vec<String>) -> Self {
        let p = names.len();
        let matrix = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
        Self { matrix, names }
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub coef: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub trace: Vec<IterationRecord>,
}

pub fn expit(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `X' diag(w) X`.
fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let p = x.ncols();
    let mut g = DMatrix::zeros(p, p);
    for (i, &wi) in w.iter().enumerate() {
        if wi == 0.0 {
            continue;
        }
        for a in 0..p {
            let xa = wi * x[(i, a)];
            for b in a..p {
                g[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    g
}

/// `X' v`.
fn cross(x: &DMatrix<f64>, v: &[f64]) -> DVector<f64> {
    let mut out = DVector::zeros(x.ncols());
    for (i, &vi) in v.iter().enumerate() {
        for a in 0..x.ncols() {
            out[a] += x[(i, a)] * vi;
        }
    }
    out
}

/// Columns that are (numerically) linear combinations of earlier columns
/// under the weighted inner product.
fn collinear_columns(gram: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    const PIVOT_TOL: f64 = 1e-10;
    let p = gram.ncols();
    let scale: Vec<f64> = (0..p).map(|j| gram[(j, j)].sqrt()).collect();
    let mut kept: Vec<usize> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..p {
        if scale[j] == 0.0 || !scale[j].is_finite() {
            dependent.push(names[j].clone());
            continue;
        }
        let mut idx = kept.clone();
        idx.push(j);
        let k = idx.len();
        let sub = DMatrix::from_fn(k, k, |a, b| {
            gram[(idx[a], idx[b])] / (scale[idx[a]] * scale[idx[b]])
        });
        let ok = sub
            .cholesky()
            .map(|c| {
                let l = c.l();
                l[(k - 1, k - 1)].powi(2) > PIVOT_TOL
            })
            .unwrap_or(false);
        if ok {
            kept.push(j);
        } else {
            dependent.push(names[j].clone());
        }
    }
    dependent
}

fn check_rank(gram: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let dependent = collinear_columns(gram, names);
    if dependent.is_empty() {
        Ok(())
    } else {
        Err(Error::RankDeficient { columns: dependent })
    }
}

fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>, names: &[String]) -> Result<DVector<f64>> {
    match a.clone().cholesky() {
        Some(c) => Ok(c.solve(b)),
        None => {
            check_rank(&a, names)?;
            Err(Error::Numeric("information matrix is not positive definite".into()))
        }
    }
}

fn binomial_loglik(eta: &[f64], y: &[f64], w: &[f64]) -> f64 {
    // y*eta - log(1 + e^eta)
    eta.iter()
        .zip(y)
        .zip(w)
        .map(|((&e, &yi), &wi)| wi * (yi * e - super::spec::softplus(e)))
        .sum()
}

fn linear_predictor(x: &DMatrix<f64>, coef: &DVector<f64>) -> Vec<f64> {
    (x * coef).iter().copied().collect()
}

/// Fits a GLM by maximum likelihood.
pub fn fit_glm(
    design: &Design,
    response: &[f64],
    family: Family,
    weights: Option<&[f64]>,
    opts: &GlmOptions,
) -> Result<GlmFit> {
    let n = design.nrows();
    if response.len() != n {
        return Err(Error::Config(format!(
            "design has {n} rows but response has {}",
            response.len()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyCell("no rows to fit".into()));
    }
    let ones;
    let w = match weights {
        Some(w) => {
            if w.len() != n || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Config("weights must be finite, nonnegative, one per row".into()));
            }
            w
        }
        None => {
            ones = vec![1.0; n];
            &ones
        }
    };
    let gram = weighted_gram(&design.matrix, w);
    check_rank(&gram, &design.names)?;

    match family {
        Family::Gaussian => {
            let wy: Vec<f64> = w.iter().zip(response).map(|(a, b)| a * b).collect();
            let coef = solve_spd(gram, &cross(&design.matrix, &wy), &design.names)?;
            let eta = linear_predictor(&design.matrix, &coef);
            let sw: f64 = w.iter().sum();
            let rss: f64 = eta
                .iter()
                .zip(response)
                .zip(w)
                .map(|((e, y), wi)| wi * (y - e).powi(2))
                .sum();
            let sigma2 = rss / sw;
            let loglik = if sigma2 > 0.0 {
                -0.5 * sw * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0)
            } else {
                f64::INFINITY
            };
            Ok(GlmFit {
                coef: coef.iter().copied().collect(),
                converged: true,
                iterations: 1,
                loglik,
                trace: Vec::new(),
            })
        }
        Family::Binomial => irls_logit(design, response, w, opts),
    }
}

fn irls_logit(design: &Design, y: &[f64], w: &[f64], opts: &GlmOptions) -> Result<GlmFit> {
    if y.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Config("binomial response must lie in [0, 1]".into()));
    }
    let x = &design.matrix;
    let sw: f64 = w.iter().sum();
    let mut coef = DVector::zeros(x.ncols());
    let mut eta = linear_predictor(x, &coef);
    let mut ll = binomial_loglik(&eta, y, w);
    let mut trace = Vec::new();

    for iter in 0..=opts.max_iter {
        let mu: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
        let resid: Vec<f64> = (0..y.len()).map(|i| w[i] * (y[i] - mu[i])).collect();
        let score = cross(x, &resid);
        let score_norm = score.amax() / sw;
        trace.push(IterationRecord {
            iteration: iter,
            loglik: ll,
            score_norm,
        });
        if score_norm <= opts.tol {
            let max_eta = (0..y.len())
                .filter(|&i| w[i] > 0.0)
                .fold(0.0f64, |a, i| a.max(eta[i].abs()));
            if max_eta > opts.separation_bound {
                return Err(Error::SeparationDetected {
                    iteration: iter,
                    max_coef: coef.amax(),
                });
            }
            return Ok(GlmFit {
                coef: coef.iter().copied().collect(),
                converged: true,
                iterations: iter,
                loglik: ll,
                trace,
            });
        }
        if iter == opts.max_iter {
            break;
        }
        let hw: Vec<f64> = (0..y.len()).map(|i| w[i] * mu[i] * (1.0 - mu[i])).collect();
        let info = weighted_gram(x, &hw);
        let step = match info.cholesky() {
            Some(c) => c.solve(&score),
            None => {
                return Err(Error::SeparationDetected {
                    iteration: iter,
                    max_coef: coef.amax(),
                })
            }
        };

        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &coef + &step * scale;
            let trial_eta = linear_predictor(x, &trial);
            let trial_ll = binomial_loglik(&trial_eta, y, w);
            // allow rounding-level decreases near the optimum
            if trial_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                coef = trial;
                eta = trial_eta;
                ll = trial_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        let max_coef = coef.amax();
        if max_coef > opts.separation_bound {
            return Err(Error::SeparationDetected {
                iteration: iter + 1,
                max_coef,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: trace.len().saturating_sub(1),
        trace,
    })
}

/// Model-based inverse information at `coef`: `(X'WX)^{-1}` for the
/// binomial family, `sigma^2 (X'X)^{-1}` with `sigma^2 = RSS / (n - p)` for
/// the Gaussian family.
pub fn coefficient_covariance(
    design: &Design,
    response: &[f64],
    family: Family,
    coef: &[f64],
) -> Result<DMatrix<f64>> {
    let x = &design.matrix;
    let c = DVector::from_column_slice(coef);
    let eta = linear_predictor(x, &c);
    let (weights, scale) = match family {
        Family::Binomial => (
            eta.iter().map(|&e| {
                let m = expit(e);
                m * (1.0 - m)
            }).collect::<Vec<_>>(),
            1.0,
        ),
        Family::Gaussian => {
            let n = x.nrows();
            let p = x.ncols();
            if n <= p {
                return Err(Error::Numeric("no residual degrees of freedom".into()));
            }
            let rss: f64 = eta.iter().zip(response).map(|(e, y)| (y - e).powi(2)).sum();
            (vec![1.0; n], rss / (n - p) as f64)
        }
    };
    let info = weighted_gram(x, &weights);
    let inv = info
        .try_inverse()
        .ok_or_else(|| Error::Numeric("information matrix is singular".into()))?;
    Ok(inv * scale)
}

/// Score of the average log-likelihood, for convergence checks.
pub fn mean_score(design: &Design, response: &[f64], family: Family, coef: &[f64]) -> Vec<f64> {
    let c = DVector::from_column_slice(coef);
    let eta = linear_predictor(&design.matrix, &c);
    let resid: Vec<f64> = eta
        .iter()
        .zip(response)
        .map(|(&e, &y)| match family {
            Family::Gaussian => y - e,
            Family::Binomial => y - expit(e),
        })
        .collect();
    let n = response.len() as f64;
    cross(&design.matrix, &resid).iter().map(|v| v / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(rows: &[&[f64]]) -> Design {
        let p = rows[0].len();
        Design::from_rows(
            &rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            (0..p).map(|j| format!("c{j}")).collect(),
        )
    }

    #[test]
    fn identity_interpolates() {
        let fit = fit_glm(
            &design(&[&[1.0, 0.0], &[1.0, 1.0]]),
            &[1.0, 3.0],
            Family::Gaussian,
            None,
            &GlmOptions::default(),
        )
        .unwrap();
        assert!((fit.coef[0] - 1.0).abs() < 1e-14);
        assert!((fit.coef[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn logit_intercept_balanced() {
        let d = design(&[&[1.0], &[1.0], &[1.0], &[1.0]]);
        let fit = fit_glm(&d, &[1.0, 0.0, 1.0, 0.0], Family::Binomial, None, &GlmOptions::default())
            .unwrap();
        assert_eq!(fit.coef, vec![0.0]);
        assert!(fit.converged);
    }

    #[test]
    fn logit_intercept_matches_logit_of_mean() {
        let d = design(&[&[1.0][..]; 5]);
        let fit = fit_glm(&d, &[1.0, 1.0, 1.0, 0.0, 0.0], Family::Binomial, None, &GlmOptions::default())
            .unwrap();
        assert!((fit.coef[0] - (0.6f64 / 0.4).ln()).abs() < 1e-10);
    }

    #[test]
    fn rank_deficiency_names_columns() {
        let d = design(&[&[1.0, 2.0, 1.0], &[1.0, 4.0, 2.0], &[1.0, 6.0, 3.0], &[1.0, 1.0, 0.5]]);
        match fit_glm(&d, &[1.0, 2.0, 3.0, 4.0], Family::Gaussian, None, &GlmOptions::default()) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, vec!["c2".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn separation_is_detected() {
        let d = design(&[&[1.0, -2.0], &[1.0, -1.0], &[1.0, 1.0], &[1.0, 2.0]]);
        let err = fit_glm(&d, &[0.0, 0.0, 1.0, 1.0], Family::Binomial, None, &GlmOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::SeparationDetected { .. }), "{err:?}");
    }

    #[test]
    fn non_convergence_carries_trace() {
        let d = design(&[&[1.0, -1.0], &[1.0, 0.5], &[1.0, 1.0], &[1.0, 2.0], &[1.0, 0.0]]);
        let opts = GlmOptions {
            max_iter: 1,
            ..GlmOptions::default()
        };
        match fit_glm(&d, &[0.0, 1.0, 0.0, 1.0, 1.0], Family::Binomial, None, &opts) {
            Err(Error::NonConvergence { iterations, trace }) => {
                assert_eq!(iterations, 1);
                assert_eq!(trace.len(), 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn weights_match_replication() {
        let d = design(&[&[1.0, 0.0], &[1.0, 1.0], &[1.0, 2.0], &[1.0, 3.0]]);
        let y = [0.0, 1.0, 0.0, 1.0];
        let w = [2.0, 1.0, 1.0, 3.0];
        let weighted = fit_glm(&d, &y, Family::Binomial, Some(&w), &GlmOptions::default()).unwrap();
        let rep = design(&[
            &[1.0, 0.0], &[1.0, 0.0], &[1.0, 1.0], &[1.0, 2.0], &[1.0, 3.0], &[1.0, 3.0], &[1.0, 3.0],
        ]);
        let expanded = fit_glm(
            &rep,
            &[0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0],
            Family::Binomial,
            None,
            &GlmOptions::default(),
        )
        .unwrap();
        for (a, b) in weighted.coef.iter().zip(&expanded.coef) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
