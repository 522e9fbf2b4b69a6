//! Sparse multivariate polynomials with exact first and second derivatives.

use std::collections::BTreeMap;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single term `coef * prod(z_i ^ exponents[i])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub exponents: Vec<u32>,
}

/// Polynomial in a fixed number of real variables.
///
/// Terms are kept canonical: exponent vectors are unique, sorted
/// lexicographically, and no term has a zero coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial {
    arity: usize,
    terms: Vec<Monomial>,
}

/// Value and (optionally) gradient and Hessian at a point.
#[derive(Clone, Debug)]
pub struct PolyEval {
    pub value: f64,
    pub gradient: Option<DVector<f64>>,
    pub hessian: Option<DMatrix<f64>>,
}

impl Polynomial {
    pub fn new<I>(arity: usize, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (f64, Vec<u32>)>,
    {
        let mut merged: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        for (coef, exps) in terms {
            if exps.len() != arity {
                return Err(Error::Dimension(format!(
                    "monomial has {} exponents, polynomial arity is {arity}",
                    exps.len()
                )));
            }
            if !coef.is_finite() {
                return Err(Error::Domain(format!("non-finite coefficient {coef}")));
            }
            *merged.entry(exps).or_insert(0.0) += coef;
        }
        Ok(Self::from_map(arity, merged))
    }

    fn from_map(arity: usize, map: BTreeMap<Vec<u32>, f64>) -> Self {
        let terms = map
            .into_iter()
            .filter(|(_, c)| *c != 0.0)
            .map(|(exponents, coef)| Monomial { coef, exponents })
            .collect();
        Polynomial { arity, terms }
    }

    pub fn zero(arity: usize) -> Self {
        Polynomial {
            arity,
            terms: Vec::new(),
        }
    }

    pub fn constant(arity: usize, c: f64) -> Self {
        Self::from_map(arity, BTreeMap::from([(vec![0; arity], c)]))
    }

    /// The coordinate function `z_var`.
    pub fn var(arity: usize, var: usize) -> Self {
        assert!(var < arity, "variable {var} out of range for arity {arity}");
        let mut e = vec![0; arity];
        e[var] = 1;
        Self::from_map(arity, BTreeMap::from([(e, 1.0)]))
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn terms(&self) -> &[Monomial] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms
            .iter()
            .map(|t| t.exponents.iter().sum::<u32>())
            .max()
            .unwrap_or(0)
    }

    pub fn scale(&self, s: f64) -> Self {
        let map = self
            .terms
            .iter()
            .map(|t| (t.exponents.clone(), t.coef * s))
            .collect();
        Self::from_map(self.arity, map)
    }

    /// Exact partial derivative with respect to variable `var`.
    pub fn derivative(&self, var: usize) -> Self {
        assert!(var < self.arity);
        let mut map = BTreeMap::new();
        for t in &self.terms {
            let e = t.exponents[var];
            if e == 0 {
                continue;
            }
            let mut exps = t.exponents.clone();
            exps[var] -= 1;
            *map.entry(exps).or_insert(0.0) += t.coef * e as f64;
        }
        Self::from_map(self.arity, map)
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.arity);
        self.terms
            .iter()
            .map(|t| {
                t.coef
                    * t.exponents
                        .iter()
                        .zip(z)
                        .filter(|(e, _)| **e > 0)
                        .map(|(&e, &x)| x.powi(e as i32))
                        .product::<f64>()
            })
            .sum()
    }

    /// Evaluates value and derivatives up to `order` (0, 1 or 2).
    pub fn eval_with(&self, z: &[f64], order: u8) -> PolyEval {
        debug_assert_eq!(z.len(), self.arity);
        let d = self.arity;
        let mut value = 0.0;
        let mut grad = (order >= 1).then(|| DVector::zeros(d));
        let mut hess = (order >= 2).then(|| DMatrix::zeros(d, d));

        // scratch: active variable indices with z^e, e z^(e-1), e(e-1) z^(e-2)
        let mut active: Vec<(usize, f64, f64, f64)> = Vec::with_capacity(d);
        for t in &self.terms {
            active.clear();
            for (i, &e) in t.exponents.iter().enumerate() {
                if e == 0 {
                    continue;
                }
                let x = z[i];
                let ei = e as i32;
                let p0 = x.powi(ei);
                let p1 = e as f64 * x.powi(ei - 1);
                let p2 = if e >= 2 {
                    (e * (e - 1)) as f64 * x.powi(ei - 2)
                } else {
                    0.0
                };
                active.push((i, p0, p1, p2));
            }
            let prod_except = |skip: &[usize]| -> f64 {
                active
                    .iter()
                    .enumerate()
                    .filter(|(a, _)| !skip.contains(a))
                    .map(|(_, v)| v.1)
                    .product()
            };
            value += t.coef * prod_except(&[]);
            if let Some(g) = grad.as_mut() {
                for (a, &(i, _, p1, _)) in active.iter().enumerate() {
                    g[i] += t.coef * p1 * prod_except(&[a]);
                }
            }
            if let Some(h) = hess.as_mut() {
                for (a, &(i, _, p1i, p2i)) in active.iter().enumerate() {
                    h[(i, i)] += t.coef * p2i * prod_except(&[a]);
                    for (b, &(j, _, p1j, _)) in active.iter().enumerate().skip(a + 1) {
                        let c = t.coef * p1i * p1j * prod_except(&[a, b]);
                        h[(i, j)] += c;
                        h[(j, i)] += c;
                    }
                }
            }
        }
        PolyEval {
            value,
            gradient: grad,
            hessian: hess,
        }
    }

    fn check_arity(&self, other: &Self) {
        assert_eq!(
            self.arity, other.arity,
            "polynomial arity mismatch in arithmetic"
        );
    }
}

impl Add for &Polynomial {
    type Output = Polynomial;

    fn add(self, rhs: &Polynomial) -> Polynomial {
        self.check_arity(rhs);
        let mut map: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        for t in self.terms.iter().chain(&rhs.terms) {
            *map.entry(t.exponents.clone()).or_insert(0.0) += t.coef;
        }
        Polynomial::from_map(self.arity, map)
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;

    fn sub(self, rhs: &Polynomial) -> Polynomial {
        self + &(-rhs)
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;

    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;

    fn mul(self, rhs: &Polynomial) -> Polynomial {
        self.check_arity(rhs);
        let mut map: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        for a in &self.terms {
            for b in &rhs.terms {
                let e: Vec<u32> = a
                    .exponents
                    .iter()
                    .zip(&b.exponents)
                    .map(|(x, y)| x + y)
                    .collect();
                *map.entry(e).or_insert(0.0) += a.coef * b.coef;
            }
        }
        Polynomial::from_map(self.arity, map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Polynomial {
        // 3 x^2 y - 2 y z^3 + 0.5
        Polynomial::new(
            3,
            [
                (3.0, vec![2, 1, 0]),
                (-2.0, vec![0, 1, 3]),
                (0.5, vec![0, 0, 0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn canonicalization_merges_and_drops() {
        let p = Polynomial::new(
            2,
            [(1.0, vec![1, 0]), (2.0, vec![0, 1]), (-1.0, vec![1, 0])],
        )
        .unwrap();
        assert_eq!(p.terms().len(), 1);
        assert_eq!(p.terms()[0].exponents, vec![0, 1]);
        let order = Polynomial::new(2, [(1.0, vec![1, 0]), (1.0, vec![0, 2])]).unwrap();
        assert_eq!(order.terms()[0].exponents, vec![0, 2]);
    }

    #[test]
    fn arity_mismatch_rejected() {
        assert!(matches!(
            Polynomial::new(2, [(1.0, vec![1, 0, 0])]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn derivatives_match_hand_values() {
        let p = sample();
        let z = [1.5, -0.5, 2.0];
        let e = p.eval_with(&z, 2);
        assert!((e.value - (3.0 * 2.25 * -0.5 - 2.0 * -0.5 * 8.0 + 0.5)).abs() < 1e-14);
        let g = e.gradient.unwrap();
        assert!((g[0] - 6.0 * 1.5 * -0.5).abs() < 1e-14);
        assert!((g[1] - (3.0 * 2.25 - 2.0 * 8.0)).abs() < 1e-14);
        assert!((g[2] - (-6.0 * -0.5 * 4.0)).abs() < 1e-14);
        let h = e.hessian.unwrap();
        assert!((h[(0, 1)] - 9.0).abs() < 1e-14);
        assert!((h[(2, 2)] - (-12.0 * -0.5 * 2.0)).abs() < 1e-14);
        assert!((h[(1, 2)] - (-6.0 * 4.0)).abs() < 1e-14);
        assert_eq!(h, h.transpose());
    }

    #[test]
    fn symbolic_derivative_agrees_with_gradient() {
        let p = sample();
        let z = [0.3, 1.1, -0.7];
        let g = p.eval_with(&z, 1).gradient.unwrap();
        for i in 0..3 {
            assert!((p.derivative(i).eval(&z) - g[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn arithmetic() {
        let x = Polynomial::var(2, 0);
        let y = Polynomial::var(2, 1);
        let p = &(&x * &y) - &(&x + &y);
        let z = [2.0, 3.0];
        assert_eq!(p.eval(&z), 6.0 - 5.0);
        assert!((&p - &p).is_zero());
        assert_eq!(Polynomial::constant(2, 0.0), Polynomial::zero(2));
    }

    #[test]
    fn zero_polynomial_evaluates_to_zero() {
        let p = Polynomial::new(3, std::iter::empty()).unwrap();
        let e = p.eval_with(&[1.0, 2.0, 3.0], 2);
        assert_eq!(e.value, 0.0);
        assert_eq!(e.hessian.unwrap(), DMatrix::zeros(3, 3));
    }
}
