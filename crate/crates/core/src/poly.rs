//! Multivariate polynomial coefficients in `(x, y, u)`.
//!
//! Inline problem definitions are restricted to term lists of this form, so a
//! configuration file never carries executable code. A term is written as a
//! `*`-separated product of a real coefficient and factors `x<i>^<k>`,
//! `y<i>^<k>` or `u<i>^<k>` (indices are zero based, the exponent defaults to
//! one):
//!
//! ```text
//! -1 * y0^3
//! 0.5 * x0 * y1^2 * u0
//! ```

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PolyError {
    #[error("empty polynomial term")]
    Empty,
    #[error("invalid coefficient `{0}`")]
    Coefficient(String),
    #[error("invalid factor `{0}` (expected x<i>, y<i> or u<i> with optional ^<k>)")]
    Factor(String),
}

/// Which argument a factor refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X,
    Y,
    U,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub var: Var,
    pub index: usize,
    pub power: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coef: f64,
    pub factors: Vec<Factor>,
}

impl Monomial {
    pub fn eval(&self, x: &[f64], y: &[f64], u: &[f64]) -> f64 {
        self.factors.iter().fold(self.coef, |acc, f| {
            let base = match f.var {
                Var::X => x[f.index],
                Var::Y => y[f.index],
                Var::U => u[f.index],
            };
            acc * base.powi(f.power)
        })
    }
}

impl FromStr for Monomial {
    type Err = PolyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Err(PolyError::Empty);
        }
        let mut parts = s.split('*').map(str::trim);
        let first = parts.next().ok_or(PolyError::Empty)?;
        let mut factors = Vec::new();
        let coef = match first.parse::<f64>() {
            Ok(c) => c,
            Err(_) => {
                // a leading factor without explicit coefficient, e.g. `x0^2`
                factors.push(parse_factor(first)?);
                1.0
            }
        };
        if !coef.is_finite() {
            return Err(PolyError::Coefficient(first.to_string()));
        }
        for part in parts {
            factors.push(parse_factor(part)?);
        }
        Ok(Monomial { coef, factors })
    }
}

fn parse_factor(s: &str) -> Result<Factor, PolyError> {
    let bad = || PolyError::Factor(s.to_string());
    let mut chars = s.chars();
    let var = match chars.next() {
        Some('x') => Var::X,
        Some('y') => Var::Y,
        Some('u') => Var::U,
        _ => return Err(bad()),
    };
    let rest = chars.as_str();
    let (idx, pow) = match rest.split_once('^') {
        Some((i, p)) => (i, Some(p)),
        None => (rest, None),
    };
    let index = idx.trim().parse::<usize>().map_err(|_| bad())?;
    let power = match pow {
        Some(p) => p.trim().parse::<i32>().map_err(|_| bad())?,
        None => 1,
    };
    if power < 0 {
        return Err(bad());
    }
    Ok(Factor { var, index, power })
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.coef)?;
        for fac in &self.factors {
            let v = match fac.var {
                Var::X => 'x',
                Var::Y => 'y',
                Var::U => 'u',
            };
            write!(f, " * {}{}^{}", v, fac.index, fac.power)?;
        }
        Ok(())
    }
}

/// A sum of monomials.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Polynomial {
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn eval(&self, x: &[f64], y: &[f64], u: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.eval(x, y, u)).sum()
    }

    pub fn push(&mut self, term: Monomial) {
        self.terms.push(term);
    }

    /// Largest index referenced for `var`, plus one (0 if unused).
    pub fn arity(&self, var: Var) -> usize {
        self.terms
            .iter()
            .flat_map(|t| t.factors.iter())
            .filter(|f| f.var == var)
            .map(|f| f.index + 1)
            .max()
            .unwrap_or(0)
    }
}

/// One polynomial per output component.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyMap {
    pub components: Vec<Polynomial>,
}

impl PolyMap {
    pub fn zeros(len: usize) -> Self {
        PolyMap {
            components: vec![Polynomial::default(); len],
        }
    }

    pub fn eval_into(&self, x: &[f64], y: &[f64], u: &[f64], out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(&self.components) {
            *o = p.eval(x, y, u);
        }
    }

    pub fn arity(&self, var: Var) -> usize {
        self.components.iter().map(|p| p.arity(var)).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_evaluates_terms() {
        let t: Monomial = "-1 * y0^3".parse().unwrap();
        assert_eq!(t.eval(&[0.0], &[2.0], &[]), -8.0);
        let t: Monomial = "0.5*x0*y0^2*u0".parse().unwrap();
        assert_eq!(t.eval(&[2.0], &[3.0], &[0.5]), 0.5 * 2.0 * 9.0 * 0.5);
        let t: Monomial = "x1^2".parse().unwrap();
        assert_eq!(t.eval(&[1.0, 3.0], &[0.0, 0.0], &[]), 9.0);
        let t: Monomial = "3".parse().unwrap();
        assert_eq!(t.eval(&[], &[], &[]), 3.0);
    }

    #[test]
    fn rejects_malformed_terms() {
        assert!(matches!("".parse::<Monomial>(), Err(PolyError::Empty)));
        assert!(matches!("2 * z0".parse::<Monomial>(), Err(PolyError::Factor(_))));
        assert!(matches!("2 * x0^-1".parse::<Monomial>(), Err(PolyError::Factor(_))));
        assert!(matches!("2 * xa".parse::<Monomial>(), Err(PolyError::Factor(_))));
    }

    #[test]
    fn cubic_drift_polynomial() {
        let mut p = Polynomial::default();
        for s in ["1 * x0", "-1 * x0^3", "1 * y0^3"] {
            p.push(s.parse().unwrap());
        }
        let (x, y) = (0.7_f64, -1.3_f64);
        assert!((p.eval(&[x], &[y], &[]) - (x - x.powi(3) + y.powi(3))).abs() < 1e-15);
        assert_eq!(p.arity(Var::X), 1);
        assert_eq!(p.arity(Var::U), 0);
    }
}
