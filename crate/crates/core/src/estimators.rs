//! Point estimators, influence functions and efficiency quantities.
//!
//! Every estimator here solves an estimating equation of the form
//!
//! ```text
//! sum_i u_i  -  theta * sum_i s_i  =  0
//! ```
//!
//! where `s_i` selects the target population (`d` for the trial, `1` for the
//! overall mixture, `1 - d` for the external population) and `u_i` is the
//! augmented outcome contrast. The influence value of row `i` is
//! `(u_i - s_i * theta) / mean(s)`, so the mean influence value is zero at the
//! point estimate by construction.
//!
//! The full-data estimators weight control residuals by
//!
//! ```text
//! W(x, d, t) = [d (1 - t) pi + (1 - d) pi r] / [pi (1 - p) + (1 - pi) r]
//! ```
//!
//! which spreads the control information between trial and external controls
//! in proportion to their relative precision `r`.

use serde::{Deserialize, Serialize};

use crate::dataset::CompositeDataset;
use crate::error::{Error, Result};
use crate::nuisance::{NuisanceSet, RowPredictions};

/// Floor on the combined denominator `pi (1 - p) + (1 - pi) r` and on
/// `p` and `1 - p`.
pub const DENOM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    /// Effect in the trial population.
    Tau,
    /// Effect in the overall (trial + external) population.
    Psi,
    /// Effect in the external population.
    Xi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FullData,
    /// Ignores external outcomes. For `Psi` and `Xi` this is the comparator
    /// that still uses external covariates.
    TrialBased,
    /// Trial without a control arm; `Tau` only.
    TreatedOnly,
}

impl Estimand {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimand::Tau => "tau",
            Estimand::Psi => "psi",
            Estimand::Xi => "xi",
        }
    }
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::FullData => "full_data",
            Method::TrialBased => "trial_based",
            Method::TreatedOnly => "treated_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimand: Estimand,
    pub method: Method,
    pub point: f64,
    pub n_used: usize,
    pub nuisance_fingerprint: String,
    /// Rows with a clipped propensity or a floored denominator.
    pub trim_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfVector {
    pub values: Vec<f64>,
    pub estimand: Estimand,
    pub method: Method,
}

impl IfVector {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Plug-in `E[IF^2]`.
    pub fn mean_square(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() / self.values.len() as f64
    }
}

fn floored(v: f64) -> (f64, bool) {
    if v < DENOM_EPS {
        (DENOM_EPS, true)
    } else {
        (v, false)
    }
}

/// `pi (1 - p) + (1 - pi) r`, floored at [`DENOM_EPS`].
pub fn combined_denominator(pi: f64, p: f64, r: f64) -> (f64, bool) {
    floored(pi * (1.0 - p) + (1.0 - pi) * r)
}

/// The control-residual weight `W(x, d, t)`.
pub fn weight_w(pi: f64, p: f64, r: f64, d: bool, t: bool) -> f64 {
    let num = if d {
        if t {
            0.0
        } else {
            pi
        }
    } else {
        pi * r
    };
    num / combined_denominator(pi, p, r).0
}

/// Estimating-equation terms for one estimator.
#[derive(Debug, Clone)]
struct Moment {
    u: Vec<f64>,
    s: Vec<f64>,
    floored: Vec<bool>,
}

impl Moment {
    fn point(&self) -> f64 {
        self.u.iter().sum::<f64>() / self.s.iter().sum::<f64>()
    }

    fn influence(&self, theta: f64) -> Vec<f64> {
        let n = self.u.len() as f64;
        let s_bar = self.s.iter().sum::<f64>() / n;
        self.u
            .iter()
            .zip(&self.s)
            .map(|(u, s)| (u - s * theta) / s_bar)
            .collect()
    }
}

fn needs<'a>(v: &'a Option<Vec<f64>>, what: &str) -> Result<&'a [f64]> {
    v.as_deref()
        .ok_or_else(|| Error::Config(format!("{what} model is required for this estimator")))
}

fn check_arms(ds: &CompositeDataset) -> Result<()> {
    let treated = ds.rows().iter().filter(|r| r.d && r.t).count();
    if treated == 0 {
        return Err(Error::EmptyCell("no treated trial units (d=1, t=1)".into()));
    }
    if treated == ds.n1() {
        return Err(Error::EmptyCell("no trial controls (d=1, t=0)".into()));
    }
    Ok(())
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Trial-only augmented contrast, averaged over trial rows.
fn trial_tau_moment(ds: &CompositeDataset, pr: &RowPredictions) -> Result<Moment> {
    check_arms(ds)?;
    let p = needs(&pr.p, "treatment propensity")?;
    let n = ds.n();
    let mut m = Moment {
        u: Vec::with_capacity(n),
        s: Vec::with_capacity(n),
        floored: vec![false; n],
    };
    for (i, row) in ds.rows().iter().enumerate() {
        if !row.d {
            m.u.push(0.0);
            m.s.push(0.0);
            continue;
        }
        let (pt, f1) = floored(p[i]);
        let (pc, f0) = floored(1.0 - p[i]);
        m.floored[i] = f1 || f0;
        let delta = pr.m1[i] - pr.m0[i];
        let phi = if row.t {
            delta + (row.y - pr.m1[i]) / pt
        } else {
            delta - (row.y - pr.m0[i]) / pc
        };
        m.u.push(phi);
        m.s.push(1.0);
    }
    Ok(m)
}

/// Full-data moment for `estimand`, with `r` overridden by `ratio_override`
/// when given.
fn full_moment(
    ds: &CompositeDataset,
    pr: &RowPredictions,
    estimand: Estimand,
    ratio_override: Option<f64>,
) -> Result<Moment> {
    check_arms(ds)?;
    if ds.n2() == 0 {
        return Err(Error::NoExternalControls(
            "full-data estimators need external rows; use the trial-based estimator".into(),
        ));
    }
    let p = needs(&pr.p, "treatment propensity")?;
    let pi = needs(&pr.pi, "selection propensity")?;
    let n = ds.n();
    let mut m = Moment {
        u: Vec::with_capacity(n),
        s: Vec::with_capacity(n),
        floored: vec![false; n],
    };
    for (i, row) in ds.rows().iter().enumerate() {
        let r = ratio_override.unwrap_or(pr.r[i]);
        let (den, fl) = combined_denominator(pi[i], p[i], r);
        let (pt, fp) = floored(p[i]);
        m.floored[i] = fl || fp;
        let d = indicator(row.d);
        let delta = pr.m1[i] - pr.m0[i];
        let r1 = row.y - pr.m1[i];
        let r0 = row.y - pr.m0[i];
        let w = weight_num(row.d, row.t, pi[i], r) / den;
        let aug = d * indicator(row.t) * r1 / pt - w * r0;
        let (u, s) = match estimand {
            Estimand::Tau => (d * delta + aug, d),
            Estimand::Psi => (delta + aug / pi[i], 1.0),
            Estimand::Xi => ((1.0 - d) * delta + (1.0 - pi[i]) / pi[i] * aug, 1.0 - d),
        };
        m.u.push(u);
        m.s.push(s);
    }
    Ok(m)
}

fn weight_num(d: bool, t: bool, pi: f64, r: f64) -> f64 {
    match (d, t) {
        (true, true) => 0.0,
        (true, false) => pi,
        (false, _) => pi * r,
    }
}

/// `p = 1`: treated trial rows contribute `y - m0`, external controls carry
/// weight `pi / (1 - pi)`.
fn treated_only_moment(ds: &CompositeDataset, pr: &RowPredictions) -> Result<Moment> {
    if let Some(i) = ds.rows().iter().position(|r| r.d && !r.t) {
        return Err(Error::InvariantViolation {
            row: i + 1,
            reason: "treated-only estimator requires every trial row to be treated".into(),
        });
    }
    if ds.n2() == 0 {
        return Err(Error::NoExternalControls(
            "treated-only estimation needs external controls".into(),
        ));
    }
    let pi = needs(&pr.pi, "selection propensity")?;
    let n = ds.n();
    let mut m = Moment {
        u: Vec::with_capacity(n),
        s: Vec::with_capacity(n),
        floored: vec![false; n],
    };
    for (i, row) in ds.rows().iter().enumerate() {
        let r0 = row.y - pr.m0[i];
        if row.d {
            m.u.push(r0);
            m.s.push(1.0);
        } else {
            let (den, fl) = floored(1.0 - pi[i]);
            m.floored[i] = fl;
            m.u.push(-pi[i] / den * r0);
            m.s.push(0.0);
        }
    }
    Ok(m)
}

fn moment_for(
    ds: &CompositeDataset,
    nuis: &NuisanceSet,
    pr: &RowPredictions,
    estimand: Estimand,
    method: Method,
) -> Result<Moment> {
    match (estimand, method) {
        (Estimand::Tau, Method::TrialBased) => {
            require_unpooled(nuis)?;
            trial_tau_moment(ds, pr)
        }
        (_, Method::TrialBased) => {
            require_unpooled(nuis)?;
            if estimand == Estimand::Xi && ds.n2() == 0 {
                return Err(Error::NoExternalControls("xi needs external rows".into()));
            }
            full_moment(ds, pr, estimand, Some(0.0))
        }
        (_, Method::FullData) => full_moment(ds, pr, estimand, None),
        (Estimand::Tau, Method::TreatedOnly) => treated_only_moment(ds, pr),
        (_, Method::TreatedOnly) => Err(Error::Config(
            "the treated-only estimator targets tau only".into(),
        )),
    }
}

fn require_unpooled(nuis: &NuisanceSet) -> Result<()> {
    if nuis.m0_pooled {
        Err(Error::Config(
            "trial-based estimators need m0 fit on trial controls only (see NuisanceSet::baseline)"
                .into(),
        ))
    } else {
        Ok(())
    }
}

fn trim_count(pr: &RowPredictions, m: &Moment) -> usize {
    pr.trimmed
        .iter()
        .zip(&m.floored)
        .filter(|(a, b)| **a || **b)
        .count()
}

/// Point estimate and influence values in one pass.
pub fn estimate_with_influence(
    ds: &CompositeDataset,
    nuis: &NuisanceSet,
    estimand: Estimand,
    method: Method,
) -> Result<(Estimate, IfVector)> {
    let pr = nuis.predict_rows(ds);
    let m = moment_for(ds, nuis, &pr, estimand, method)?;
    let point = m.point();
    if !point.is_finite() {
        return Err(Error::Numeric(format!(
            "{} ({}) estimate is not finite",
            estimand.as_str(),
            method.as_str()
        )));
    }
    let est = Estimate {
        estimand,
        method,
        point,
        n_used: match (estimand, method) {
            (Estimand::Tau, Method::TrialBased) => ds.n1(),
            _ => ds.n(),
        },
        nuisance_fingerprint: nuis.fingerprint(),
        trim_count: trim_count(&pr, &m),
    };
    let ifv = IfVector {
        values: m.influence(point),
        estimand,
        method,
    };
    Ok((est, ifv))
}

pub fn estimate(
    ds: &CompositeDataset,
    nuis: &NuisanceSet,
    estimand: Estimand,
    method: Method,
) -> Result<Estimate> {
    estimate_with_influence(ds, nuis, estimand, method).map(|(e, _)| e)
}

/// Trial-only doubly robust estimate of `tau`; `nuis.m0` must be fit on
/// trial controls.
pub fn estimate_tau_trial(ds: &CompositeDataset, nuis: &NuisanceSet) -> Result<Estimate> {
    estimate(ds, nuis, Estimand::Tau, Method::TrialBased)
}

/// Full-data doubly robust estimate of `tau`.
pub fn estimate_tau_full(ds: &CompositeDataset, nuis: &NuisanceSet) -> Result<Estimate> {
    estimate(ds, nuis, Estimand::Tau, Method::FullData)
}

pub fn estimate_tau_treated_only(ds: &CompositeDataset, nuis: &NuisanceSet) -> Result<Estimate> {
    estimate(ds, nuis, Estimand::Tau, Method::TreatedOnly)
}

/// `method` is `FullData` or `TrialBased` (the comparator; pass a baseline
/// nuisance set).
pub fn estimate_psi(ds: &CompositeDataset, nuis: &NuisanceSet, method: Method) -> Result<Estimate> {
    estimate(ds, nuis, Estimand::Psi, method)
}

pub fn estimate_xi(ds: &CompositeDataset, nuis: &NuisanceSet, method: Method) -> Result<Estimate> {
    estimate(ds, nuis, Estimand::Xi, method)
}

/// Influence values at `point`, which must be the matching estimate.
pub fn influence_values(
    ds: &CompositeDataset,
    nuis: &NuisanceSet,
    estimand: Estimand,
    method: Method,
    point: f64,
) -> Result<IfVector> {
    let pr = nuis.predict_rows(ds);
    let m = moment_for(ds, nuis, &pr, estimand, method)?;
    let ifv = IfVector {
        values: m.influence(point),
        estimand,
        method,
    };
    let scale = ifv.values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mean = ifv.mean();
    if mean.abs() > 1e-8 * scale {
        return Err(Error::MismatchedPoint { mean });
    }
    Ok(ifv)
}

/// Plug-in estimate of the efficiency bound `E[IF^2]` for the estimator's
/// influence function.
pub fn efficiency_bound_plugin(
    ds: &CompositeDataset,
    nuis: &NuisanceSet,
    estimand: Estimand,
    method: Method,
) -> Result<f64> {
    estimate_with_influence(ds, nuis, estimand, method).map(|(_, ifv)| ifv.mean_square())
}

/// Nuisance values entering the closed-form efficiency formulas, one entry
/// per row.
#[derive(Debug, Clone, PartialEq)]
pub struct GainInputs {
    pub d: Vec<bool>,
    pub p: Vec<f64>,
    pub pi: Vec<f64>,
    pub r: Vec<f64>,
    /// `var(Y0 | x, D=1)`.
    pub v1: Vec<f64>,
}

impl GainInputs {
    pub fn from_fit(ds: &CompositeDataset, nuis: &NuisanceSet) -> Result<Self> {
        let pr = nuis.predict_rows(ds);
        let p = needs(&pr.p, "treatment propensity")?.to_vec();
        let pi = match pr.pi {
            Some(v) => v,
            None => vec![1.0; ds.n()],
        };
        let v1 = ds
            .rows()
            .iter()
            .map(|r| nuis.trial_variance(&r.x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            d: ds.rows().iter().map(|r| r.d).collect(),
            p,
            pi,
            r: pr.r,
            v1,
        })
    }

    fn q_hat(&self) -> f64 {
        self.d.iter().filter(|&&d| d).count() as f64 / self.d.len() as f64
    }

    /// Trial-based minus full-data bound for `tau`, averaged over trial rows.
    pub fn tau_gain(&self) -> f64 {
        let q = self.q_hat();
        let mut sum = 0.0;
        let mut n1 = 0usize;
        for i in 0..self.d.len() {
            if !self.d[i] {
                continue;
            }
            n1 += 1;
            let c = 1.0 - self.p[i];
            let odds = (1.0 - self.pi[i]) / self.pi[i];
            sum += (1.0 / c - 1.0 / (c + odds * self.r[i])) * self.v1[i] / q;
        }
        sum / n1 as f64
    }

    pub fn psi_gap(&self) -> f64 {
        self.gap(|_| 1.0, 1.0)
    }

    pub fn xi_gap(&self) -> f64 {
        let q = self.q_hat();
        self.gap(|pi| (1.0 - pi).powi(2), (1.0 - q).powi(2))
    }

    fn gap(&self, numerator: impl Fn(f64) -> f64, divisor: f64) -> f64 {
        let n = self.d.len();
        (0..n)
            .map(|i| {
                let a = self.pi[i] * (1.0 - self.p[i]);
                let b = a + (1.0 - self.pi[i]) * self.r[i];
                numerator(self.pi[i]) * (1.0 / a - 1.0 / b) * self.v1[i]
            })
            .sum::<f64>()
            / n as f64
            / divisor
    }
}

/// Plug-in of the closed-form gap between the trial-based and full-data
/// efficiency bounds for `tau`.
pub fn efficiency_gain_analytic(ds: &CompositeDataset, nuis: &NuisanceSet) -> Result<f64> {
    Ok(GainInputs::from_fit(ds, nuis)?.tau_gain())
}

/// Asymptotic variance reduction of the full-data `psi` estimator over its
/// comparator.
pub fn variance_gap_psi(ds: &CompositeDataset, nuis: &NuisanceSet) -> Result<f64> {
    Ok(GainInputs::from_fit(ds, nuis)?.psi_gap())
}

pub fn variance_gap_xi(ds: &CompositeDataset, nuis: &NuisanceSet) -> Result<f64> {
    Ok(GainInputs::from_fit(ds, nuis)?.xi_gap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_examples() {
        // no external population locally
        assert!((weight_w(1.0, 0.3, 2.0, true, false) - 1.0 / 0.7).abs() < 1e-15);
        // zero ratio silences external controls
        assert_eq!(weight_w(0.4, 0.3, 0.0, false, false), 0.0);
        assert!((weight_w(0.5, 0.5, 1.0, false, false) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(weight_w(0.5, 0.5, 1.0, true, true), 0.0);
        // floor
        let (den, hit) = combined_denominator(1.0, 1.0, 3.0);
        assert!(hit);
        assert_eq!(den, DENOM_EPS);
    }

    fn inputs(pi: f64, p: f64, r: f64) -> GainInputs {
        GainInputs {
            d: vec![true, true, false, false],
            p: vec![p; 4],
            pi: vec![pi; 4],
            r: vec![r; 4],
            v1: vec![1.0, 2.0, 1.5, 0.5],
        }
    }

    #[test]
    fn gain_vanishes_without_external_population() {
        let g = inputs(1.0, 0.4, 1.3);
        assert_eq!(g.tau_gain(), 0.0);
        assert_eq!(g.psi_gap(), 0.0);
        assert_eq!(g.xi_gap(), 0.0);
    }

    #[test]
    fn gain_grows_with_ratio() {
        let mut last = 0.0;
        for r in [0.0, 0.1, 0.5, 1.0, 4.0, 100.0, 1e6] {
            let g = inputs(0.6, 0.5, r).tau_gain();
            assert!(g >= last, "r = {r}");
            assert!(inputs(0.6, 0.5, r).psi_gap() >= 0.0);
            assert!(inputs(0.6, 0.5, r).xi_gap() >= 0.0);
            last = g;
        }
        assert_eq!(inputs(0.6, 0.5, 0.0).tau_gain(), 0.0);
        assert_eq!(inputs(0.6, 0.5, 0.0).psi_gap(), 0.0);
        // limit r -> infinity: mean over trial rows of V1 / ((1 - p) q)
        let limit = (1.0 + 2.0) / 2.0 / 0.5 / 0.5;
        assert!((last - limit).abs() / limit < 1e-5);
    }
}
