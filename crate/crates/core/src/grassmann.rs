//! Superfunctions on a superdomain with `q` odd generators.
//!
//! A [`SuperNumber`] stores one scalar coefficient per monomial in the odd
//! generators; a monomial is a bitmask with bit `j` standing for the
//! generator `j` (zero based), read in ascending generator order.

use crate::error::{Error, Result};
use crate::expr::{Expr, Point};
use std::collections::{BTreeMap, HashMap};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
    Mixed,
}

impl Parity {
    /// 0 for even, 1 for odd; `None` for mixed elements.
    pub fn bit(self) -> Option<u32> {
        match self {
            Parity::Even => Some(0),
            Parity::Odd => Some(1),
            Parity::Mixed => None,
        }
    }
}

/// Sign of `ξ^a ξ^b = sign * ξ^(a|b)`; zero when the monomials overlap.
pub fn monomial_sign(a: u32, b: u32) -> i32 {
    if a & b != 0 {
        return 0;
    }
    let mut inversions = 0;
    let mut bb = b;
    while bb != 0 {
        let j = bb.trailing_zeros();
        inversions += (a >> (j + 1)).count_ones();
        bb &= bb - 1;
    }
    if inversions % 2 == 0 {
        1
    } else {
        -1
    }
}

#[derive(Clone, PartialEq)]
pub struct SuperNumber {
    q: usize,
    terms: BTreeMap<u32, Expr>,
}

impl fmt::Debug for SuperNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SuperNumber[q={}]({self})", self.q)
    }
}

impl fmt::Display for SuperNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (i, (m, c)) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            if *m == 0 {
                write!(f, "({c})")?;
            } else {
                write!(f, "({c})")?;
                for j in 0..self.q {
                    if m >> j & 1 == 1 {
                        write!(f, "*xi{}", j + 1)?;
                    }
                }
            }
        }
        Ok(())
    }
}

impl SuperNumber {
    pub fn zero(q: usize) -> SuperNumber {
        assert!(q <= 31, "at most 31 odd generators");
        SuperNumber { q, terms: BTreeMap::new() }
    }

    pub fn scalar(q: usize, c: Expr) -> SuperNumber {
        Self::monomial(q, 0, c)
    }

    pub fn constant(q: usize, c: f64) -> SuperNumber {
        Self::scalar(q, Expr::constant(c))
    }

    pub fn one(q: usize) -> SuperNumber {
        Self::constant(q, 1.0)
    }

    /// The odd generator with zero-based index `j`.
    pub fn generator(q: usize, j: usize) -> Result<SuperNumber> {
        if j >= q {
            return Err(Error::IndexOutOfRange { index: j, len: q });
        }
        Ok(Self::monomial(q, 1 << j, Expr::one()))
    }

    pub fn monomial(q: usize, mask: u32, c: Expr) -> SuperNumber {
        let mut s = Self::zero(q);
        assert!(mask < (1u32 << q), "monomial outside generator range");
        if !c.is_zero() {
            s.terms.insert(mask, c);
        }
        s
    }

    pub fn from_terms<I: IntoIterator<Item = (u32, Expr)>>(q: usize, terms: I) -> SuperNumber {
        let mut s = Self::zero(q);
        for (m, c) in terms {
            s.add_term(m, c);
        }
        s
    }

    fn add_term(&mut self, mask: u32, c: Expr) {
        if c.is_zero() {
            return;
        }
        match self.terms.remove(&mask) {
            Some(old) => {
                let sum = &old + &c;
                if !sum.is_zero() {
                    self.terms.insert(mask, sum);
                }
            }
            None => {
                self.terms.insert(mask, c);
            }
        }
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn top_mask(&self) -> u32 {
        ((1u64 << self.q) - 1) as u32
    }

    pub fn terms(&self) -> impl Iterator<Item = (u32, &Expr)> {
        self.terms.iter().map(|(m, c)| (*m, c))
    }

    pub fn coeff(&self, mask: u32) -> Expr {
        self.terms.get(&mask).cloned().unwrap_or_else(Expr::zero)
    }

    pub fn body(&self) -> Expr {
        self.coeff(0)
    }

    pub fn top(&self) -> Expr {
        self.coeff(self.top_mask())
    }

    pub fn soul(&self) -> SuperNumber {
        let mut s = self.clone();
        s.terms.remove(&0);
        s
    }

    /// Structural zero test.
    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn parity(&self) -> Parity {
        let mut even = false;
        let mut odd = false;
        for m in self.terms.keys() {
            if m.count_ones() % 2 == 0 {
                even = true;
            } else {
                odd = true;
            }
        }
        match (even, odd) {
            (_, false) => Parity::Even,
            (false, true) => Parity::Odd,
            (true, true) => Parity::Mixed,
        }
    }

    /// Parity bit, failing for mixed elements.
    pub fn parity_bit(&self) -> Result<u32> {
        self.parity()
            .bit()
            .ok_or_else(|| Error::Parity(format!("mixed-parity element {self}")))
    }

    pub fn even_part(&self) -> SuperNumber {
        self.filter(|m| m.count_ones() % 2 == 0)
    }

    pub fn odd_part(&self) -> SuperNumber {
        self.filter(|m| m.count_ones() % 2 == 1)
    }

    fn filter(&self, keep: impl Fn(u32) -> bool) -> SuperNumber {
        SuperNumber {
            q: self.q,
            terms: self.terms.iter().filter(|(m, _)| keep(**m)).map(|(m, c)| (*m, c.clone())).collect(),
        }
    }

    pub fn map_coeffs(&self, f: impl Fn(&Expr) -> Expr) -> SuperNumber {
        Self::from_terms(self.q, self.terms.iter().map(|(m, c)| (*m, f(c))))
    }

    pub fn scale(&self, c: &Expr) -> SuperNumber {
        self.map_coeffs(|x| x * c)
    }

    pub fn scale_f64(&self, c: f64) -> SuperNumber {
        self.scale(&Expr::constant(c))
    }

    pub fn checked_add(&self, other: &SuperNumber) -> Result<SuperNumber> {
        self.check_q(other)?;
        let mut s = self.clone();
        for (m, c) in &other.terms {
            s.add_term(*m, c.clone());
        }
        Ok(s)
    }

    pub fn checked_mul(&self, other: &SuperNumber) -> Result<SuperNumber> {
        self.check_q(other)?;
        let mut acc: BTreeMap<u32, Vec<Expr>> = BTreeMap::new();
        for (a, ca) in &self.terms {
            for (b, cb) in &other.terms {
                let sign = monomial_sign(*a, *b);
                if sign == 0 {
                    continue;
                }
                let prod = if sign > 0 { ca * cb } else { -(ca * cb) };
                acc.entry(a | b).or_default().push(prod);
            }
        }
        let mut s = Self::zero(self.q);
        for (m, cs) in acc {
            let c = Expr::add_all(cs);
            if !c.is_zero() {
                s.terms.insert(m, c);
            }
        }
        Ok(s)
    }

    fn check_q(&self, other: &SuperNumber) -> Result<()> {
        if self.q != other.q {
            return Err(Error::MismatchedGeneratorCount(self.q, other.q));
        }
        Ok(())
    }

    pub fn powi(&self, n: u32) -> SuperNumber {
        let mut acc = Self::one(self.q);
        for _ in 0..n {
            acc = &acc * self;
        }
        acc
    }

    /// Inverse of an even element with nonzero body.
    pub fn invert(&self) -> Result<SuperNumber> {
        if self.parity() != Parity::Even {
            return Err(Error::NotEven(format!("{self}")));
        }
        let b = self.body();
        if b.is_zero() {
            return Err(Error::ZeroBody(format!("{self}")));
        }
        let binv = b.recip();
        // b^{-1} (1 + s/b)^{-1} = b^{-1} sum_k (-s/b)^k
        let x = self.soul().scale(&binv.neg());
        let mut term = Self::one(self.q);
        let mut acc = Self::one(self.q);
        for _ in 0..self.q / 2 {
            term = &term * &x;
            if term.is_zero() {
                break;
            }
            acc = &acc + &term;
        }
        Ok(acc.scale(&binv))
    }

    /// Partial derivative of every coefficient in the even variable `var`.
    pub fn diff_even(&self, var: &str) -> SuperNumber {
        self.map_coeffs(|c| c.diff(var))
    }

    /// Left derivative in the odd generator `j`.
    pub fn diff_odd(&self, j: usize) -> SuperNumber {
        let bit = 1u32 << j;
        let mut s = Self::zero(self.q);
        for (m, c) in &self.terms {
            if m & bit == 0 {
                continue;
            }
            let before = (m & (bit - 1)).count_ones();
            let c = if before.is_multiple_of(2) { c.clone() } else { c.neg() };
            s.add_term(m ^ bit, c);
        }
        s
    }

    pub fn subst(&self, map: &HashMap<String, Expr>) -> SuperNumber {
        self.map_coeffs(|c| c.subst(map))
    }

    /// Coefficients evaluated at a point.
    pub fn eval(&self, pt: &Point) -> Result<BTreeMap<u32, f64>> {
        self.terms.iter().map(|(m, c)| Ok((*m, c.eval(pt)?))).collect()
    }

    /// Largest absolute coefficient difference at the given points.
    pub fn max_diff(&self, other: &SuperNumber, points: &[Point]) -> Result<f64> {
        let d = self - other;
        let mut worst: f64 = 0.0;
        for p in points {
            for v in d.eval(p)?.values() {
                worst = worst.max(v.abs());
            }
        }
        Ok(worst)
    }

    /// Largest relative coefficient difference at the given points.
    pub fn max_rel_diff(&self, other: &SuperNumber, points: &[Point]) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for p in points {
            let a = self.eval(p)?;
            let b = other.eval(p)?;
            let mut masks: Vec<u32> = a.keys().chain(b.keys()).copied().collect();
            masks.sort();
            masks.dedup();
            for m in masks {
                let x = a.get(&m).copied().unwrap_or(0.0);
                let y = b.get(&m).copied().unwrap_or(0.0);
                worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(1.0));
            }
        }
        Ok(worst)
    }

    pub fn total_size(&self) -> usize {
        self.terms.values().map(|c| c.size()).sum()
    }
}

/// Superderivative in the `i`-th standard coordinate `(u_1..u_p, ξ_1..ξ_q)`.
pub fn superderivative(f: &SuperNumber, i: usize, vars: &[String]) -> Result<SuperNumber> {
    let p = vars.len();
    if i < p {
        Ok(f.diff_even(&vars[i]))
    } else if i < p + f.q() {
        Ok(f.diff_odd(i - p))
    } else {
        Err(Error::IndexOutOfRange { index: i, len: p + f.q() })
    }
}

/// `g(args)` by Taylor expansion around the bodies of the even arguments.
pub fn compose_scalar(g: &Expr, vars: &[String], args: &[SuperNumber]) -> Result<SuperNumber> {
    assert_eq!(vars.len(), args.len(), "argument count");
    let q = args.first().map(|a| a.q()).unwrap_or(0);
    for a in args {
        if a.q() != q {
            return Err(Error::MismatchedGeneratorCount(q, a.q()));
        }
        if a.parity() != Parity::Even {
            return Err(Error::NotEven(format!("argument {a}")));
        }
    }
    let bodies: HashMap<String, Expr> =
        vars.iter().cloned().zip(args.iter().map(|a| a.body())).collect();
    let souls: Vec<SuperNumber> = args.iter().map(|a| a.soul()).collect();
    let active: Vec<usize> = (0..args.len()).filter(|i| !souls[*i].is_zero()).collect();
    let order = q / 2;
    let mut out = SuperNumber::zero(q);
    let mut acc: BTreeMap<u32, Vec<Expr>> = BTreeMap::new();
    // depth-first over multi-indices with non-decreasing variable index:
    // each monomial d^alpha g * s^alpha / alpha! appears once
    fn walk(
        g: &Expr,
        start: usize,
        depth: usize,
        order: usize,
        counts: &mut Vec<u32>,
        power: &SuperNumber,
        active: &[usize],
        vars: &[String],
        souls: &[SuperNumber],
        bodies: &HashMap<String, Expr>,
        acc: &mut BTreeMap<u32, Vec<Expr>>,
    ) {
        let mut fact = 1.0;
        for c in counts.iter() {
            for k in 1..=*c {
                fact *= k as f64;
            }
        }
        let value = g.subst(bodies);
        if !value.is_zero() {
            for (m, c) in power.terms() {
                acc.entry(m).or_default().push(&(&value * c) * &Expr::constant(1.0 / fact));
            }
        }
        if depth == order {
            return;
        }
        for (slot, &i) in active.iter().enumerate().skip(start) {
            let next_power = power * &souls[i];
            if next_power.is_zero() {
                continue;
            }
            let dg = g.diff(&vars[i]);
            if dg.is_zero() {
                continue;
            }
            counts[slot] += 1;
            walk(&dg, slot, depth + 1, order, counts, &next_power, active, vars, souls, bodies, acc);
            counts[slot] -= 1;
        }
    }
    let mut counts = vec![0u32; active.len()];
    walk(
        g,
        0,
        0,
        order,
        &mut counts,
        &SuperNumber::one(q),
        &active,
        vars,
        &souls,
        &bodies,
        &mut acc,
    );
    for (m, cs) in acc {
        out.add_term(m, Expr::add_all(cs));
    }
    Ok(out)
}

impl std::ops::Add<&SuperNumber> for &SuperNumber {
    type Output = SuperNumber;
    fn add(self, rhs: &SuperNumber) -> SuperNumber {
        self.checked_add(rhs).expect("generator count mismatch")
    }
}

impl std::ops::Sub<&SuperNumber> for &SuperNumber {
    type Output = SuperNumber;
    fn sub(self, rhs: &SuperNumber) -> SuperNumber {
        self.checked_add(&-rhs).expect("generator count mismatch")
    }
}

impl std::ops::Mul<&SuperNumber> for &SuperNumber {
    type Output = SuperNumber;
    fn mul(self, rhs: &SuperNumber) -> SuperNumber {
        self.checked_mul(rhs).expect("generator count mismatch")
    }
}

impl std::ops::Neg for &SuperNumber {
    type Output = SuperNumber;
    fn neg(self) -> SuperNumber {
        self.scale_f64(-1.0)
    }
}

impl std::ops::Add for SuperNumber {
    type Output = SuperNumber;
    fn add(self, rhs: SuperNumber) -> SuperNumber {
        &self + &rhs
    }
}

impl std::ops::Sub for SuperNumber {
    type Output = SuperNumber;
    fn sub(self, rhs: SuperNumber) -> SuperNumber {
        &self - &rhs
    }
}

impl std::ops::Mul for SuperNumber {
    type Output = SuperNumber;
    fn mul(self, rhs: SuperNumber) -> SuperNumber {
        &self * &rhs
    }
}

impl std::ops::Neg for SuperNumber {
    type Output = SuperNumber;
    fn neg(self) -> SuperNumber {
        -&self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::point;

    fn xi(q: usize, j: usize) -> SuperNumber {
        SuperNumber::generator(q, j).unwrap()
    }

    #[test]
    fn generators_anticommute() {
        let (a, b) = (xi(3, 0), xi(3, 2));
        assert_eq!(&a * &b, -(&b * &a));
        assert!((&a * &a).is_zero());
        assert_eq!(monomial_sign(0b010, 0b001), -1);
        assert_eq!(monomial_sign(0b001, 0b110), 1);
        assert_eq!(monomial_sign(0b101, 0b010), -1);
    }

    #[test]
    fn mismatch_is_reported() {
        assert_eq!(
            SuperNumber::one(2).checked_mul(&SuperNumber::one(3)),
            Err(Error::MismatchedGeneratorCount(2, 3))
        );
        assert!(SuperNumber::generator(2, 2).is_err());
    }

    #[test]
    fn inverse_of_even_element() {
        let q = 4;
        let u = Expr::var("u");
        let x = SuperNumber::scalar(q, &u + &Expr::constant(2.0))
            + &xi(q, 0) * &xi(q, 1)
            + (&xi(q, 2) * &xi(q, 3)).scale(&u);
        let inv = x.invert().unwrap();
        let prod = &x * &inv;
        let pts = [point(&[("u", 0.3)]), point(&[("u", 1.7)])];
        assert!(prod.max_diff(&SuperNumber::one(q), &pts).unwrap() < 1e-14);
        assert!(matches!(xi(q, 0).invert(), Err(Error::NotEven(_))));
        assert!(matches!((&xi(q, 0) * &xi(q, 1)).invert(), Err(Error::ZeroBody(_))));
    }

    #[test]
    fn odd_derivative_sign() {
        // d/dξ2 (ξ1 ξ2) = -ξ1
        let f = &xi(2, 0) * &xi(2, 1);
        assert_eq!(f.diff_odd(1), -xi(2, 0));
        assert_eq!(f.diff_odd(0), xi(2, 1));
    }

    #[test]
    fn compose_exp_of_nilpotent() {
        // exp(u + ξ1ξ2) = e^u (1 + ξ1ξ2)
        let q = 2;
        let u = Expr::var("u");
        let arg = SuperNumber::scalar(q, u.clone()) + &xi(q, 0) * &xi(q, 1);
        let r = compose_scalar(&u.exp(), &["u".into()], &[arg]).unwrap();
        let expect = SuperNumber::scalar(q, u.exp()) + (&xi(q, 0) * &xi(q, 1)).scale(&u.exp());
        let pts = [point(&[("u", 0.4)])];
        assert!(r.max_diff(&expect, &pts).unwrap() < 1e-15);
    }
}
