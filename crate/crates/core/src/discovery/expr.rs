//! Typed symbolic terms and their unit bookkeeping.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Base dimensions: length, time, mass, temperature, charge (Ah).
pub const BASE_UNITS: [&str; 5] = ["m", "s", "kg", "K", "Ah"];

/// Unit as exponents over [`BASE_UNITS`], stored doubled so square roots stay integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Unit(pub [i16; 5]);

impl Unit {
    pub const ONE: Unit = Unit([0; 5]);

    pub fn base(i: usize) -> Unit {
        let mut e = [0; 5];
        e[i] = 2;
        Unit(e)
    }

    /// Builds a unit from integer exponents.
    pub fn from_powers(p: [i16; 5]) -> Unit {
        Unit(p.map(|v| 2 * v))
    }

    pub fn mul(self, o: Unit) -> Unit {
        let mut e = self.0;
        for (a, b) in e.iter_mut().zip(o.0) {
            *a += b;
        }
        Unit(e)
    }

    pub fn inv(self) -> Unit {
        Unit(self.0.map(|v| -v))
    }

    /// `None` when an exponent would become fractional beyond one half.
    pub fn sqrt(self) -> Option<Unit> {
        if self.0.iter().all(|v| v % 2 == 0) {
            Some(Unit(self.0.map(|v| v / 2)))
        } else {
            None
        }
    }

    pub fn is_dimensionless(self) -> bool {
        self == Unit::ONE
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_dimensionless() {
            return write!(f, "1");
        }
        let mut first = true;
        for (name, &e) in BASE_UNITS.iter().zip(&self.0) {
            if e == 0 {
                continue;
            }
            if !first {
                write!(f, " ")?;
            }
            first = false;
            if e == 2 {
                write!(f, "{name}")?;
            } else if e % 2 == 0 {
                write!(f, "{name}^{}", e / 2)?;
            } else {
                write!(f, "{name}^{}/2", e)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    State,
    Condition,
    /// Finite-difference time derivative of a state column.
    Derivative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub kind: FeatureKind,
    pub unit: Option<Unit>,
    pub values: Vec<f64>,
}

/// Symbolic term over feature indices. Evaluation is protected: `sqrt`
/// acts on `|a|`, `exp` clamps its argument at 50 and `inv` yields NaN
/// near zero so the candidate is discarded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Var(usize),
    Mul(Vec<Expr>),
    Add(Vec<Expr>),
    Square(Box<Expr>),
    Sqrt(Box<Expr>),
    Exp(Box<Expr>),
    Inv(Box<Expr>),
    /// `max(0, a - knot)` when `upper`, else `max(0, knot - a)`.
    Hinge { arg: Box<Expr>, knot: f64, upper: bool },
}

/// Outcome of the unit check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Consistent,
    Inconsistent,
    /// Some feature has no declared unit.
    Indeterminate,
}

impl Expr {
    pub fn var(i: usize) -> Expr {
        Expr::Var(i)
    }

    pub fn sq(e: Expr) -> Expr {
        Expr::Square(Box::new(e))
    }

    pub fn node_count(&self) -> usize {
        match self {
            Expr::Var(_) => 1,
            Expr::Mul(v) | Expr::Add(v) => 1 + v.iter().map(Expr::node_count).sum::<usize>(),
            Expr::Square(a) | Expr::Sqrt(a) | Expr::Exp(a) | Expr::Inv(a) => 1 + a.node_count(),
            // hinge, subtraction, knot constant
            Expr::Hinge { arg, .. } => 3 + arg.node_count(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Var(_) => 1,
            Expr::Mul(v) | Expr::Add(v) => 1 + v.iter().map(Expr::depth).max().unwrap_or(0),
            Expr::Square(a) | Expr::Sqrt(a) | Expr::Exp(a) | Expr::Inv(a) => 1 + a.depth(),
            Expr::Hinge { arg, .. } => 1 + arg.depth(),
        }
    }

    pub fn eval(&self, feats: &[Feature], row: usize) -> f64 {
        match self {
            Expr::Var(i) => feats[*i].values[row],
            Expr::Mul(v) => v.iter().map(|e| e.eval(feats, row)).product(),
            Expr::Add(v) => v.iter().map(|e| e.eval(feats, row)).sum(),
            Expr::Square(a) => {
                let x = a.eval(feats, row);
                x * x
            }
            Expr::Sqrt(a) => a.eval(feats, row).abs().sqrt(),
            Expr::Exp(a) => a.eval(feats, row).min(50.0).exp(),
            Expr::Inv(a) => {
                let x = a.eval(feats, row);
                if x.abs() < 1e-12 {
                    f64::NAN
                } else {
                    1.0 / x
                }
            }
            Expr::Hinge { arg, knot, upper } => {
                let x = arg.eval(feats, row);
                if *upper {
                    (x - knot).max(0.0)
                } else {
                    (knot - x).max(0.0)
                }
            }
        }
    }

    pub fn column(&self, feats: &[Feature], rows: usize) -> Vec<f64> {
        (0..rows).map(|r| self.eval(feats, r)).collect()
    }

    /// Result unit, `Err(Inconsistent)` on an ill-typed node.
    pub fn unit(&self, feats: &[Feature]) -> std::result::Result<Unit, Dimension> {
        match self {
            Expr::Var(i) => feats[*i].unit.ok_or(Dimension::Indeterminate),
            Expr::Mul(v) => {
                let mut u = Unit::ONE;
                for e in v {
                    u = u.mul(e.unit(feats)?);
                }
                Ok(u)
            }
            Expr::Add(v) => {
                let units = v.iter().map(|e| e.unit(feats)).collect::<std::result::Result<Vec<_>, _>>()?;
                match units.split_first() {
                    Some((first, rest)) if rest.iter().all(|u| u == first) => Ok(*first),
                    Some(_) => Err(Dimension::Inconsistent),
                    None => Ok(Unit::ONE),
                }
            }
            Expr::Square(a) => {
                let u = a.unit(feats)?;
                Ok(u.mul(u))
            }
            Expr::Sqrt(a) => a.unit(feats)?.sqrt().ok_or(Dimension::Inconsistent),
            Expr::Exp(a) => {
                if a.unit(feats)?.is_dimensionless() {
                    Ok(Unit::ONE)
                } else {
                    Err(Dimension::Inconsistent)
                }
            }
            Expr::Inv(a) => Ok(a.unit(feats)?.inv()),
            Expr::Hinge { arg, .. } => arg.unit(feats),
        }
    }

    pub fn uses_kind(&self, feats: &[Feature], kind: FeatureKind) -> bool {
        match self {
            Expr::Var(i) => feats[*i].kind == kind,
            Expr::Mul(v) | Expr::Add(v) => v.iter().any(|e| e.uses_kind(feats, kind)),
            Expr::Square(a) | Expr::Sqrt(a) | Expr::Exp(a) | Expr::Inv(a) => a.uses_kind(feats, kind),
            Expr::Hinge { arg, .. } => arg.uses_kind(feats, kind),
        }
    }

    /// Canonical prefix form; commutative children are sorted.
    pub fn prefix(&self, feats: &[Feature]) -> String {
        match self {
            Expr::Var(i) => feats[*i].name.clone(),
            Expr::Mul(v) | Expr::Add(v) => {
                let mut parts: Vec<String> = v.iter().map(|e| e.prefix(feats)).collect();
                parts.sort();
                let op = if matches!(self, Expr::Mul(_)) { "*" } else { "+" };
                format!("({op} {})", parts.join(" "))
            }
            Expr::Square(a) => format!("(sq {})", a.prefix(feats)),
            Expr::Sqrt(a) => format!("(sqrt {})", a.prefix(feats)),
            Expr::Exp(a) => format!("(exp {})", a.prefix(feats)),
            Expr::Inv(a) => format!("(inv {})", a.prefix(feats)),
            Expr::Hinge { arg, knot, upper } => {
                let a = arg.prefix(feats);
                if *upper {
                    format!("(pos (- {a} {knot:?}))")
                } else {
                    format!("(pos (- {knot:?} {a}))")
                }
            }
        }
    }

    /// Feature index when this is `x` or `x^2` of a bare feature.
    pub fn bare_square(&self) -> Option<usize> {
        match self {
            Expr::Square(a) => match **a {
                Expr::Var(i) => Some(i),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn bare_var(&self) -> Option<usize> {
        match self {
            Expr::Var(i) => Some(*i),
            _ => None,
        }
    }

    pub fn is_hinge(&self) -> bool {
        matches!(self, Expr::Hinge { .. })
    }
}
