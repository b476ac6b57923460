//! Symbolic integer expressions used for shape reasoning.
//!
//! Expressions are polynomials over variables plus opaque atoms for
//! `floordiv`, `mod`, `max` and `min`. Normalization brings every
//! expression into a sum-of-products canonical form so that equality of
//! shape dimensions becomes a syntactic comparison.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// A symbolic shape variable. Identity is the `id`; the name is kept for
/// printing only.
#[derive(Clone, Debug)]
pub struct SymVar {
    pub name: String,
    pub id: u32,
}

impl SymVar {
    pub fn new(name: impl Into<String>, id: u32) -> Self {
        SymVar { name: name.into(), id }
    }
}

impl PartialEq for SymVar {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}
impl Eq for SymVar {}

impl std::hash::Hash for SymVar {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.id.hash(state);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum SymExpr {
    Var(SymVar),
    Const(i64),
    Add(Box<SymExpr>, Box<SymExpr>),
    Sub(Box<SymExpr>, Box<SymExpr>),
    Mul(Box<SymExpr>, Box<SymExpr>),
    FloorDiv(Box<SymExpr>, Box<SymExpr>),
    Mod(Box<SymExpr>, Box<SymExpr>),
    Max(Box<SymExpr>, Box<SymExpr>),
    Min(Box<SymExpr>, Box<SymExpr>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provability {
    ProvablyEqual,
    ProvablyUnequal,
    Unknown,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("unbound symbolic variable `{0}`")]
    UnboundSymbol(String),
    #[error("division by zero in symbolic evaluation")]
    DivisionByZero,
    #[error("integer overflow in symbolic evaluation")]
    Overflow,
}

impl SymExpr {
    pub fn var(v: SymVar) -> Self {
        SymExpr::Var(v)
    }

    pub fn constant(c: i64) -> Self {
        SymExpr::Const(c)
    }

    pub fn add(a: SymExpr, b: SymExpr) -> Self {
        SymExpr::Add(Box::new(a), Box::new(b))
    }

    pub fn sub(a: SymExpr, b: SymExpr) -> Self {
        SymExpr::Sub(Box::new(a), Box::new(b))
    }

    pub fn mul(a: SymExpr, b: SymExpr) -> Self {
        SymExpr::Mul(Box::new(a), Box::new(b))
    }

    pub fn floordiv(a: SymExpr, b: SymExpr) -> Self {
        SymExpr::FloorDiv(Box::new(a), Box::new(b))
    }

    pub fn modulo(a: SymExpr, b: SymExpr) -> Self {
        SymExpr::Mod(Box::new(a), Box::new(b))
    }

    pub fn max(a: SymExpr, b: SymExpr) -> Self {
        SymExpr::Max(Box::new(a), Box::new(b))
    }

    pub fn min(a: SymExpr, b: SymExpr) -> Self {
        SymExpr::Min(Box::new(a), Box::new(b))
    }

    pub fn as_const(&self) -> Option<i64> {
        match self {
            SymExpr::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn as_var(&self) -> Option<&SymVar> {
        match self {
            SymExpr::Var(v) => Some(v),
            _ => None,
        }
    }

    /// All variables occurring in the expression, including inside opaque atoms.
    pub fn vars(&self) -> Vec<SymVar> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut Vec<SymVar>) {
        match self {
            SymExpr::Var(v) => {
                if !out.iter().any(|w| w.id == v.id) {
                    out.push(v.clone());
                }
            }
            SymExpr::Const(_) => {}
            SymExpr::Add(a, b)
            | SymExpr::Sub(a, b)
            | SymExpr::Mul(a, b)
            | SymExpr::FloorDiv(a, b)
            | SymExpr::Mod(a, b)
            | SymExpr::Max(a, b)
            | SymExpr::Min(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Polynomial normal form
// ---------------------------------------------------------------------------

/// An atom of the polynomial form: a variable or an opaque subexpression
/// (floordiv/mod/max/min with normalized operands).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum Atom {
    Var(SymVar),
    Opaque(SymExpr),
}

impl Atom {
    fn key(&self) -> (u8, u32, String) {
        match self {
            Atom::Var(v) => (0, v.id, String::new()),
            Atom::Opaque(e) => (1, 0, format!("{}", e)),
        }
    }

    fn to_expr(&self) -> SymExpr {
        match self {
            Atom::Var(v) => SymExpr::Var(v.clone()),
            Atom::Opaque(e) => e.clone(),
        }
    }
}

/// A monomial: sorted list of (atom, power).
type Monomial = Vec<(Atom, u32)>;

/// Sum of monomials with integer coefficients. Coefficients are i128
/// internally; conversion back to i64 saturates (test inputs never reach it).
#[derive(Clone, Debug)]
struct Poly {
    terms: Vec<(Monomial, i128)>,
}

fn mono_key(m: &Monomial) -> Vec<(u8, u32, String, u32)> {
    m.iter().map(|(a, p)| {
        let (t, id, s) = a.key();
        (t, id, s, *p)
    }).collect()
}

impl Poly {
    fn zero() -> Self {
        Poly { terms: Vec::new() }
    }

    fn constant(c: i64) -> Self {
        if c == 0 {
            return Poly::zero();
        }
        Poly { terms: vec![(Vec::new(), c as i128)] }
    }

    fn atom(a: Atom) -> Self {
        Poly { terms: vec![(vec![(a, 1)], 1)] }
    }

    fn add_term(&mut self, m: Monomial, c: i128) {
        if c == 0 {
            return;
        }
        for (em, ec) in self.terms.iter_mut() {
            if *em == m {
                *ec += c;
                return;
            }
        }
        self.terms.push((m, c));
    }

    fn add(mut self, other: Poly) -> Poly {
        for (m, c) in other.terms {
            self.add_term(m, c);
        }
        self
    }

    fn neg(mut self) -> Poly {
        for (_, c) in self.terms.iter_mut() {
            *c = -*c;
        }
        self
    }

    fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::zero();
        for (m1, c1) in &self.terms {
            for (m2, c2) in &other.terms {
                let mut m = m1.clone();
                for (a, p) in m2 {
                    match m.iter_mut().find(|(b, _)| b == a) {
                        Some((_, q)) => *q += p,
                        None => m.push((a.clone(), *p)),
                    }
                }
                m.sort_by_key(|(a, _)| a.key());
                out.add_term(m, c1 * c2);
            }
        }
        out
    }

    fn normalize_terms(&mut self) {
        self.terms.retain(|(_, c)| *c != 0);
        // constant term (empty monomial) sorts last
        self.terms.sort_by(|(m1, _), (m2, _)| {
            match (m1.is_empty(), m2.is_empty()) {
                (true, false) => std::cmp::Ordering::Greater,
                (false, true) => std::cmp::Ordering::Less,
                _ => mono_key(m1).cmp(&mono_key(m2)),
            }
        });
    }

    fn to_expr(&self) -> SymExpr {
        if self.terms.is_empty() {
            return SymExpr::Const(0);
        }
        let mut acc: Option<SymExpr> = None;
        for (m, c) in &self.terms {
            let coef = clamp_i64(*c);
            let term = term_to_expr(m, coef);
            acc = Some(match acc {
                None => term,
                Some(a) => SymExpr::add(a, term),
            });
        }
        acc.unwrap()
    }
}

fn clamp_i64(c: i128) -> i64 {
    if c > i64::MAX as i128 {
        i64::MAX
    } else if c < i64::MIN as i128 {
        i64::MIN
    } else {
        c as i64
    }
}

fn term_to_expr(m: &Monomial, coef: i64) -> SymExpr {
    if m.is_empty() {
        return SymExpr::Const(coef);
    }
    let mut factors: Vec<SymExpr> = Vec::new();
    for (a, p) in m {
        for _ in 0..*p {
            factors.push(a.to_expr());
        }
    }
    let mut acc = if coef == 1 {
        factors.remove(0)
    } else {
        SymExpr::Const(coef)
    };
    for f in factors {
        acc = SymExpr::mul(acc, f);
    }
    acc
}

fn to_poly(e: &SymExpr) -> Poly {
    match e {
        SymExpr::Var(v) => Poly::atom(Atom::Var(v.clone())),
        SymExpr::Const(c) => Poly::constant(*c),
        SymExpr::Add(a, b) => to_poly(a).add(to_poly(b)),
        SymExpr::Sub(a, b) => to_poly(a).add(to_poly(b).neg()),
        SymExpr::Mul(a, b) => to_poly(a).mul(&to_poly(b)),
        SymExpr::FloorDiv(a, b) => opaque_poly(e, a, b),
        SymExpr::Mod(a, b) => opaque_poly(e, a, b),
        SymExpr::Max(a, b) => opaque_poly(e, a, b),
        SymExpr::Min(a, b) => opaque_poly(e, a, b),
    }
}

/// FloorDiv/Mod/Max/Min become opaque atoms with normalized children;
/// all-constant operands are folded.
fn opaque_poly(e: &SymExpr, a: &SymExpr, b: &SymExpr) -> Poly {
    let na = normalize(a);
    let nb = normalize(b);
    if let (Some(ca), Some(cb)) = (na.as_const(), nb.as_const()) {
        let folded = match e {
            SymExpr::FloorDiv(_, _) if cb != 0 => Some(floor_div(ca, cb)),
            SymExpr::Mod(_, _) if cb != 0 => Some(floor_mod(ca, cb)),
            SymExpr::Max(_, _) => Some(ca.max(cb)),
            SymExpr::Min(_, _) => Some(ca.min(cb)),
            _ => None,
        };
        if let Some(c) = folded {
            return Poly::constant(c);
        }
    }
    let rebuilt = match e {
        SymExpr::FloorDiv(_, _) => SymExpr::floordiv(na, nb),
        SymExpr::Mod(_, _) => SymExpr::modulo(na, nb),
        SymExpr::Max(_, _) => SymExpr::max(na, nb),
        SymExpr::Min(_, _) => SymExpr::min(na, nb),
        _ => unreachable!(),
    };
    Poly::atom(Atom::Opaque(rebuilt))
}

/// Canonical sum-of-products form. Idempotent; evaluation-preserving.
pub fn normalize(e: &SymExpr) -> SymExpr {
    let mut p = to_poly(e);
    p.normalize_terms();
    p.to_expr()
}

/// Syntactic provability of equality via normal forms.
pub fn prove_equal(a: &SymExpr, b: &SymExpr) -> Provability {
    let diff = normalize(&SymExpr::sub(a.clone(), b.clone()));
    match diff.as_const() {
        Some(0) => Provability::ProvablyEqual,
        Some(_) => Provability::ProvablyUnequal,
        None => Provability::Unknown,
    }
}

/// Replace mapped variables (by id) and renormalize.
pub fn substitute(e: &SymExpr, env: &HashMap<u32, SymExpr>) -> SymExpr {
    fn walk(e: &SymExpr, env: &HashMap<u32, SymExpr>) -> SymExpr {
        match e {
            SymExpr::Var(v) => env.get(&v.id).cloned().unwrap_or_else(|| e.clone()),
            SymExpr::Const(_) => e.clone(),
            SymExpr::Add(a, b) => SymExpr::add(walk(a, env), walk(b, env)),
            SymExpr::Sub(a, b) => SymExpr::sub(walk(a, env), walk(b, env)),
            SymExpr::Mul(a, b) => SymExpr::mul(walk(a, env), walk(b, env)),
            SymExpr::FloorDiv(a, b) => SymExpr::floordiv(walk(a, env), walk(b, env)),
            SymExpr::Mod(a, b) => SymExpr::modulo(walk(a, env), walk(b, env)),
            SymExpr::Max(a, b) => SymExpr::max(walk(a, env), walk(b, env)),
            SymExpr::Min(a, b) => SymExpr::min(walk(a, env), walk(b, env)),
        }
    }
    normalize(&walk(e, env))
}

pub fn floor_div(a: i64, b: i64) -> i64 {
    let q = a / b;
    if a % b != 0 && ((a < 0) != (b < 0)) {
        q - 1
    } else {
        q
    }
}

/// Remainder with the sign of the divisor.
pub fn floor_mod(a: i64, b: i64) -> i64 {
    a - b * floor_div(a, b)
}

/// Evaluate under a concrete environment (keyed by variable id).
/// FloorDiv rounds toward negative infinity; overflow is a checked error.
pub fn evaluate(e: &SymExpr, env: &HashMap<u32, i64>) -> Result<i64, EvalError> {
    match e {
        SymExpr::Var(v) => env
            .get(&v.id)
            .copied()
            .ok_or_else(|| EvalError::UnboundSymbol(v.name.clone())),
        SymExpr::Const(c) => Ok(*c),
        SymExpr::Add(a, b) => evaluate(a, env)?
            .checked_add(evaluate(b, env)?)
            .ok_or(EvalError::Overflow),
        SymExpr::Sub(a, b) => evaluate(a, env)?
            .checked_sub(evaluate(b, env)?)
            .ok_or(EvalError::Overflow),
        SymExpr::Mul(a, b) => evaluate(a, env)?
            .checked_mul(evaluate(b, env)?)
            .ok_or(EvalError::Overflow),
        SymExpr::FloorDiv(a, b) => {
            let (x, y) = (evaluate(a, env)?, evaluate(b, env)?);
            if y == 0 {
                Err(EvalError::DivisionByZero)
            } else if x == i64::MIN && y == -1 {
                Err(EvalError::Overflow)
            } else {
                Ok(floor_div(x, y))
            }
        }
        SymExpr::Mod(a, b) => {
            let (x, y) = (evaluate(a, env)?, evaluate(b, env)?);
            if y == 0 {
                Err(EvalError::DivisionByZero)
            } else if x == i64::MIN && y == -1 {
                Err(EvalError::Overflow)
            } else {
                Ok(floor_mod(x, y))
            }
        }
        SymExpr::Max(a, b) => Ok(evaluate(a, env)?.max(evaluate(b, env)?)),
        SymExpr::Min(a, b) => Ok(evaluate(a, env)?.min(evaluate(b, env)?)),
    }
}

// ---------------------------------------------------------------------------
// Display: the textual syntax of the IR grammar
// ---------------------------------------------------------------------------

fn prec(e: &SymExpr) -> u8 {
    match e {
        SymExpr::Add(_, _) | SymExpr::Sub(_, _) => 1,
        SymExpr::Mul(_, _) => 2,
        _ => 3,
    }
}

impl fmt::Display for SymExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn emit(f: &mut fmt::Formatter<'_>, e: &SymExpr, min_prec: u8) -> fmt::Result {
            let p = prec(e);
            let parens = p < min_prec;
            if parens {
                write!(f, "(")?;
            }
            match e {
                SymExpr::Var(v) => write!(f, "{}", v.name)?,
                SymExpr::Const(c) => write!(f, "{}", c)?,
                SymExpr::Add(a, b) => {
                    emit(f, a, 1)?;
                    write!(f, " + ")?;
                    emit(f, b, 2)?;
                }
                SymExpr::Sub(a, b) => {
                    emit(f, a, 1)?;
                    write!(f, " - ")?;
                    emit(f, b, 2)?;
                }
                SymExpr::Mul(a, b) => {
                    emit(f, a, 2)?;
                    write!(f, "*")?;
                    emit(f, b, 3)?;
                }
                SymExpr::FloorDiv(a, b) => {
                    write!(f, "floordiv(")?;
                    emit(f, a, 0)?;
                    write!(f, ", ")?;
                    emit(f, b, 0)?;
                    write!(f, ")")?;
                }
                SymExpr::Mod(a, b) => {
                    write!(f, "mod(")?;
                    emit(f, a, 0)?;
                    write!(f, ", ")?;
                    emit(f, b, 0)?;
                    write!(f, ")")?;
                }
                SymExpr::Max(a, b) => {
                    write!(f, "max(")?;
                    emit(f, a, 0)?;
                    write!(f, ", ")?;
                    emit(f, b, 0)?;
                    write!(f, ")")?;
                }
                SymExpr::Min(a, b) => {
                    write!(f, "min(")?;
                    emit(f, a, 0)?;
                    write!(f, ", ")?;
                    emit(f, b, 0)?;
                    write!(f, ")")?;
                }
            }
            if parens {
                write!(f, ")")?;
            }
            Ok(())
        }
        emit(f, self, 0)
    }
}

/// Divide by a constant when every polynomial coefficient divides exactly;
/// `div_exact(2*n, 2) == Some(n)` but `div_exact(n, 2) == None`.
pub fn div_exact(e: &SymExpr, k: i64) -> Option<SymExpr> {
    if k == 0 {
        return None;
    }
    let mut p = to_poly(e);
    for (_, c) in p.terms.iter_mut() {
        if *c % (k as i128) != 0 {
            return None;
        }
        *c /= k as i128;
    }
    p.normalize_terms();
    Some(p.to_expr())
}

/// Try to solve `pattern == target` for a single variable, where the pattern
/// is linear in exactly one variable (`c*v + d`). Returns `(var, solution)`
/// when the division is exact over the target polynomial.
pub fn solve_linear(pattern: &SymExpr, target: &SymExpr) -> Option<(SymVar, SymExpr)> {
    let p = {
        let mut p = to_poly(pattern);
        p.normalize_terms();
        p
    };
    // pattern must be c*v + d with a single Var atom of power 1
    let mut var: Option<SymVar> = None;
    let mut coef: i128 = 0;
    let mut offset: i128 = 0;
    for (m, c) in &p.terms {
        match m.len() {
            0 => offset = *c,
            1 => {
                let (a, pow) = &m[0];
                match a {
                    Atom::Var(v) if *pow == 1 && var.is_none() => {
                        var = Some(v.clone());
                        coef = *c;
                    }
                    _ => return None,
                }
            }
            _ => return None,
        }
    }
    let var = var?;
    if coef == 0 {
        return None;
    }
    // v = (target - d) / c, exact division over the polynomial
    let mut t = to_poly(target).add(Poly::constant(clamp_i64(-offset)));
    for (_, c) in t.terms.iter_mut() {
        if *c % coef != 0 {
            return None;
        }
        *c /= coef;
    }
    t.normalize_terms();
    Some((var, t.to_expr()))
}
