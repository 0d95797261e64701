use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Response distribution and link of a working model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Identity link, normal errors.
    Gaussian,
    /// Logit link, Bernoulli response.
    Binomial,
}

/// One column of a covariate transform. Indices are zero-based positions in
/// the covariate vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Term {
    Raw(usize),
    /// `x[i]^k`, `k >= 1`.
    Pow(usize, u32),
    Inter(usize, usize),
    /// `ln(1 + e^x[i])`.
    Log1pExp(usize),
}

impl Term {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            Term::Raw(i) => x[i],
            Term::Pow(i, k) => x[i].powi(k as i32),
            Term::Inter(i, j) => x[i] * x[j],
            Term::Log1pExp(i) => softplus(x[i]),
        }
    }

    fn max_index(&self) -> usize {
        match *self {
            Term::Raw(i) | Term::Pow(i, _) | Term::Log1pExp(i) => i,
            Term::Inter(i, j) => i.max(j),
        }
    }

    pub fn label(&self, names: &[String]) -> String {
        let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("x{i}"));
        match *self {
            Term::Raw(i) => name(i),
            Term::Pow(i, k) => format!("{}^{k}", name(i)),
            Term::Inter(i, j) => format!("{}:{}", name(i), name(j)),
            Term::Log1pExp(i) => format!("log1pexp({})", name(i)),
        }
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Raw(i) => write!(f, "raw({i})"),
            Term::Pow(i, k) => write!(f, "pow({i},{k})"),
            Term::Inter(i, j) => write!(f, "inter({i},{j})"),
            Term::Log1pExp(i) => write!(f, "log1pexp({i})"),
        }
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad model term `{s}`"));
        let s = s.trim();
        let open = s.find('(').ok_or_else(bad)?;
        if !s.ends_with(')') {
            return Err(bad());
        }
        let name = s[..open].trim();
        let args = s[open + 1..s.len() - 1]
            .split(',')
            .map(|a| a.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        match (name, args.as_slice()) {
            ("raw", [i]) => Ok(Term::Raw(*i)),
            ("pow", [i, k]) if *k >= 1 => Ok(Term::Pow(*i, *k as u32)),
            ("inter", [i, j]) => Ok(Term::Inter(*i, *j)),
            ("log1pexp", [i]) => Ok(Term::Log1pExp(*i)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for Term {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A working model: family plus covariate transform.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub terms: Vec<Term>,
    #[serde(default = "default_true")]
    pub include_intercept: bool,
}

fn default_true() -> bool {
    true
}

impl ModelSpec {
    pub fn new(family: Family, terms: Vec<Term>) -> Self {
        Self {
            family,
            terms,
            include_intercept: true,
        }
    }

    /// Intercept plus every covariate entering linearly.
    pub fn linear(family: Family, n_covariates: usize) -> Self {
        Self::new(family, (0..n_covariates).map(Term::Raw).collect())
    }

    pub fn intercept_only(family: Family) -> Self {
        Self::new(family, Vec::new())
    }

    /// Parses a comma-free list such as `"raw(0) pow(0,2) inter(0,1)"`;
    /// terms may also be separated by `+` or `;`.
    pub fn parse_terms(s: &str) -> Result<Vec<Term>> {
        let mut terms = Vec::new();
        let mut depth = 0;
        let mut start = 0;
        for (i, c) in s.char_indices() {
            match c {
                '(' => depth += 1,
                ')' => depth -= 1,
                '+' | ';' | ' ' if depth == 0 => {
                    if !s[start..i].trim().is_empty() {
                        terms.push(s[start..i].parse()?);
                    }
                    start = i + 1;
                }
                _ => {}
            }
        }
        if !s[start..].trim().is_empty() {
            terms.push(s[start..].parse()?);
        }
        Ok(terms)
    }

    pub fn n_columns(&self) -> usize {
        self.terms.len() + usize::from(self.include_intercept)
    }

    pub fn check(&self, n_covariates: usize) -> Result<()> {
        if let Some(t) = self.terms.iter().find(|t| t.max_index() >= n_covariates) {
            return Err(Error::Config(format!(
                "term {t} refers to a covariate beyond the {n_covariates} available"
            )));
        }
        if self.n_columns() == 0 {
            return Err(Error::Config("model has no columns".into()));
        }
        Ok(())
    }

    pub fn design_row(&self, x: &[f64]) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.n_columns());
        if self.include_intercept {
            row.push(1.0);
        }
        row.extend(self.terms.iter().map(|t| t.eval(x)));
        row
    }

    pub fn column_names(&self, names: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(self.n_columns());
        if self.include_intercept {
            out.push("(intercept)".to_string());
        }
        out.extend(self.terms.iter().map(|t| t.label(names)));
        out
    }

    pub fn with_family(&self, family: Family) -> Self {
        Self {
            family,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn term_syntax() {
        let terms = ModelSpec::parse_terms("raw(0) + pow(1, 2); inter(0,1) log1pexp(1)").unwrap();
        assert_eq!(
            terms,
            vec![Term::Raw(0), Term::Pow(1, 2), Term::Inter(0, 1), Term::Log1pExp(1)]
        );
        let shown: Vec<String> = terms.iter().map(|t| t.to_string()).collect();
        assert_eq!(shown, ["raw(0)", "pow(1,2)", "inter(0,1)", "log1pexp(1)"]);
        assert!("pow(0,0)".parse::<Term>().is_err());
        assert!("sqrt(0)".parse::<Term>().is_err());
    }

    #[test]
    fn spec_json() {
        let spec = ModelSpec::new(Family::Binomial, vec![Term::Raw(0), Term::Inter(0, 1)]);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            json,
            r#"{"family":"binomial","terms":["raw(0)","inter(0,1)"],"include_intercept":true}"#
        );
        let back: ModelSpec = serde_json::from_str(r#"{"family":"binomial","terms":["raw(0)","inter(0,1)"]}"#).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn design_rows_are_finite() {
        let spec = ModelSpec::new(
            Family::Gaussian,
            vec![Term::Raw(0), Term::Pow(0, 3), Term::Inter(0, 1), Term::Log1pExp(1)],
        );
        for x in [[0.0, 0.0], [700.0, -800.0], [-1e3, 1e3]] {
            assert!(spec.design_row(&x).iter().all(|v| v.is_finite()), "{x:?}");
        }
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
