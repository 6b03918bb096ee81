//! t-norm / t-conorm / negator algebra over fuzzy vectors.
//!
//! A [`FuzzyVec`] holds per-partition membership degrees in `[0, 1]`. Entry
//! `i` is the probability that the `i`-th cell of a fixed partition of the
//! universe lies inside the (fuzzy) set. The all-one vector is the universe
//! and the all-zero vector is the empty set.
//!
//! Every stored value sits on the fixed-point grid `k / 2^53`. On that grid
//! `1 - x` is exact, so the negator is an exact involution in floating point.

use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Drift tolerance accepted (and clamped away) on construction.
pub const CLAMP_TOLERANCE: f64 = 1e-9;

const GRID: f64 = 9_007_199_254_740_992.0; // 2^53

#[derive(Debug, Error, PartialEq)]
pub enum FuzzyError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("entry {index} = {value} is outside [0, 1]")]
    OutOfUnitInterval { index: usize, value: f64 },
    #[error("cannot fold an empty list of fuzzy vectors")]
    EmptyFold,
}

/// The t-norm based logic system.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Logic {
    #[default]
    Product,
    Godel,
    Lukasiewicz,
}

impl Logic {
    pub const ALL: [Logic; 3] = [Logic::Product, Logic::Godel, Logic::Lukasiewicz];

    pub fn as_str(self) -> &'static str {
        match self {
            Logic::Product => "product",
            Logic::Godel => "godel",
            Logic::Lukasiewicz => "lukasiewicz",
        }
    }

    /// Scalar t-norm. Written symmetrically so `t(a, b)` and `t(b, a)` are bit-identical.
    #[inline]
    pub fn t(self, a: f64, b: f64) -> f64 {
        match self {
            Logic::Product => a * b,
            Logic::Godel => a.min(b),
            Logic::Lukasiewicz => {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                (lo - (1.0 - hi)).max(0.0)
            }
        }
    }

    /// Scalar t-conorm, the De Morgan dual of [`t`](Self::t) under `x -> 1 - x`.
    #[inline]
    pub fn s(self, a: f64, b: f64) -> f64 {
        match self {
            // a + b - ab, arranged as hi + lo(1 - hi) so the result never drops below max(a, b).
            Logic::Product => {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                (hi + lo * (1.0 - hi)).min(1.0)
            }
            Logic::Godel => a.max(b),
            Logic::Lukasiewicz => (a + b).min(1.0),
        }
    }
}

impl fmt::Display for Logic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Logic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "product" | "prod" => Ok(Logic::Product),
            "godel" | "gödel" | "min" => Ok(Logic::Godel),
            "lukasiewicz" | "łukasiewicz" => Ok(Logic::Lukasiewicz),
            other => Err(format!("unknown logic `{other}`")),
        }
    }
}

/// Rounds a value in `[0, 1]` to the nearest multiple of `2^-53`.
#[inline]
pub fn snap(x: f64) -> f64 {
    (x * GRID).round() / GRID
}

/// A vector of membership degrees in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyVec(Vec<f64>);

impl FuzzyVec {
    /// Clamps entries within [`CLAMP_TOLERANCE`] of `[0, 1]`; rejects anything further out or NaN.
    pub fn new(values: Vec<f64>) -> Result<Self, FuzzyError> {
        let mut values = values;
        for (index, v) in values.iter_mut().enumerate() {
            if !(-CLAMP_TOLERANCE..=1.0 + CLAMP_TOLERANCE).contains(v) {
                return Err(FuzzyError::OutOfUnitInterval { index, value: *v });
            }
            *v = snap(v.clamp(0.0, 1.0));
        }
        Ok(Self(values))
    }

    /// For values already known to lie in `[0, 1]` (clamped and snapped here anyway).
    pub(crate) fn from_unit(mut values: Vec<f64>) -> Self {
        for v in &mut values {
            debug_assert!(!v.is_nan());
            *v = snap(v.clamp(0.0, 1.0));
        }
        Self(values)
    }

    pub fn universe(d: usize) -> Self {
        Self(vec![1.0; d])
    }

    pub fn empty(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Σ self[i] · other[i]: the expected membership of `other` in `self`.
    pub fn dot(&self, other: &FuzzyVec) -> Result<f64, FuzzyError> {
        check_dims(self, other)?;
        Ok(dot(&self.0, &other.0))
    }
}

impl Deref for FuzzyVec {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn check_dims(a: &FuzzyVec, b: &FuzzyVec) -> Result<(), FuzzyError> {
    if a.dim() != b.dim() {
        return Err(FuzzyError::DimensionMismatch(a.dim(), b.dim()));
    }
    Ok(())
}

/// Plain sequential dot product.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn zip_with(a: &FuzzyVec, b: &FuzzyVec, f: impl Fn(f64, f64) -> f64) -> Result<FuzzyVec, FuzzyError> {
    check_dims(a, b)?;
    Ok(FuzzyVec::from_unit(a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)).collect()))
}

/// Elementwise fuzzy conjunction.
pub fn tnorm(logic: Logic, a: &FuzzyVec, b: &FuzzyVec) -> Result<FuzzyVec, FuzzyError> {
    zip_with(a, b, |x, y| logic.t(x, y))
}

/// Elementwise fuzzy disjunction.
pub fn tconorm(logic: Logic, a: &FuzzyVec, b: &FuzzyVec) -> Result<FuzzyVec, FuzzyError> {
    zip_with(a, b, |x, y| logic.s(x, y))
}

/// Elementwise `1 - v`; exact on the snapped grid.
pub fn negate(v: &FuzzyVec) -> FuzzyVec {
    FuzzyVec(v.iter().map(|x| 1.0 - x).collect())
}

/// Left fold of [`tnorm`].
pub fn fold_conj(logic: Logic, vs: &[FuzzyVec]) -> Result<FuzzyVec, FuzzyError> {
    fold(vs, |a, b| tnorm(logic, a, b))
}

/// Left fold of [`tconorm`].
pub fn fold_disj(logic: Logic, vs: &[FuzzyVec]) -> Result<FuzzyVec, FuzzyError> {
    fold(vs, |a, b| tconorm(logic, a, b))
}

fn fold(
    vs: &[FuzzyVec],
    op: impl Fn(&FuzzyVec, &FuzzyVec) -> Result<FuzzyVec, FuzzyError>,
) -> Result<FuzzyVec, FuzzyError> {
    let (first, rest) = vs.split_first().ok_or(FuzzyError::EmptyFold)?;
    rest.iter().try_fold(first.clone(), |acc, v| op(&acc, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f64]) -> FuzzyVec {
        FuzzyVec::new(v.to_vec()).unwrap()
    }

    #[test]
    fn product_tnorm_example() {
        assert_eq!(tnorm(Logic::Product, &fv(&[0.5, 1.0]), &fv(&[0.5, 0.0])).unwrap(), fv(&[0.25, 0.0]));
    }

    #[test]
    fn lukasiewicz_tnorm_example() {
        assert_eq!(tnorm(Logic::Lukasiewicz, &fv(&[0.6]), &fv(&[0.3])).unwrap(), fv(&[0.0]));
        let out = tnorm(Logic::Lukasiewicz, &fv(&[0.75]), &fv(&[0.5])).unwrap();
        assert_eq!(out.as_slice(), &[0.25]);
    }

    #[test]
    fn product_tconorm_example() {
        assert_eq!(tconorm(Logic::Product, &fv(&[0.5]), &fv(&[0.5])).unwrap(), fv(&[0.75]));
    }

    #[test]
    fn godel_fold_is_max() {
        let a = fv(&[0.1, 0.9, 0.4]);
        let b = fv(&[0.3, 0.2, 0.4]);
        assert_eq!(fold_disj(Logic::Godel, &[a, b]).unwrap(), fv(&[0.3, 0.9, 0.4]));
    }

    #[test]
    fn product_fold_conj() {
        let out = fold_conj(Logic::Product, &[fv(&[0.5]), fv(&[0.5]), fv(&[0.5])]).unwrap();
        assert_eq!(out.as_slice(), &[0.125]);
    }

    #[test]
    fn single_and_empty_fold() {
        let a = fv(&[0.3, 0.7]);
        for l in Logic::ALL {
            assert_eq!(fold_conj(l, std::slice::from_ref(&a)).unwrap(), a);
            assert_eq!(fold_disj(l, std::slice::from_ref(&a)).unwrap(), a);
        }
        assert_eq!(fold_conj(Logic::Product, &[]), Err(FuzzyError::EmptyFold));
    }

    #[test]
    fn negation_examples() {
        assert_eq!(negate(&fv(&[0.3, 0.7])), fv(&[0.7, 0.3]));
        assert_eq!(negate(&FuzzyVec::universe(3)), FuzzyVec::empty(3));
        let v = fv(&[0.1, 1e-17, 0.3333333333333333, 0.9999999]);
        assert_eq!(negate(&negate(&v)), v);
    }

    #[test]
    fn construction_clamps_small_drift_only() {
        let v = FuzzyVec::new(vec![-1e-10, 1.0 + 5e-10, 0.5]).unwrap();
        assert_eq!(v.as_slice(), &[0.0, 1.0, 0.5]);
        assert_eq!(
            FuzzyVec::new(vec![0.5, 1.1]),
            Err(FuzzyError::OutOfUnitInterval { index: 1, value: 1.1 })
        );
        assert!(FuzzyVec::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let e = tnorm(Logic::Godel, &fv(&[0.1]), &fv(&[0.1, 0.2])).unwrap_err();
        assert_eq!(e, FuzzyError::DimensionMismatch(1, 2));
        assert!(tconorm(Logic::Product, &fv(&[0.1]), &fv(&[0.1, 0.2])).is_err());
        assert!(fv(&[0.1]).dot(&fv(&[0.1, 0.2])).is_err());
    }

    #[test]
    fn boolean_truth_tables() {
        for l in Logic::ALL {
            for a in [0.0, 1.0] {
                for b in [0.0, 1.0] {
                    let and = if a == 1.0 && b == 1.0 { 1.0 } else { 0.0 };
                    let or = if a == 1.0 || b == 1.0 { 1.0 } else { 0.0 };
                    assert_eq!(l.t(a, b), and, "{l} and({a},{b})");
                    assert_eq!(l.s(a, b), or, "{l} or({a},{b})");
                }
            }
        }
    }

    #[test]
    fn logic_parsing() {
        assert_eq!("Product".parse::<Logic>().unwrap(), Logic::Product);
        assert_eq!("godel".parse::<Logic>().unwrap(), Logic::Godel);
        assert!("hamacher".parse::<Logic>().is_err());
    }
}
