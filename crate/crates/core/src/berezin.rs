//! Supermatrices, Berezinians, Berezin densities and forms, and the right
//! action of differential operators on them.

use crate::chart::{Chart, CoordSystem, Morphism, Retraction};
use crate::error::{Error, Result};
use crate::expr::{self, Expr, Point};
use crate::grassmann::{Parity, SuperNumber};
use crate::quadrature::{integrate_volume, QuadratureRule};
use serde::Serialize;
use std::sync::Arc;

/// Choice of the sign exponent `s(p, q)` in the fibre integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignRule {
    /// `pq + q(q-1)/2`
    Default,
    /// `pq`
    PqOnly,
    /// `q(q-1)/2`
    HalfQ,
}

/// Choice of the parity `b(p, q)` of the coordinate symbol `Dx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParityRule {
    /// `p + q`
    Default,
    /// `q`
    QOnly,
}

/// Sign conventions threaded through every integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Convention {
    pub s: SignRule,
    pub b: ParityRule,
}

impl Default for Convention {
    fn default() -> Self {
        Convention { s: SignRule::Default, b: ParityRule::Default }
    }
}

impl Convention {
    pub fn s(&self, p: usize, q: usize) -> u32 {
        let half = q * q.saturating_sub(1) / 2;
        (match self.s {
            SignRule::Default => p * q + half,
            SignRule::PqOnly => p * q,
            SignRule::HalfQ => half,
        }) as u32
    }

    pub fn b(&self, p: usize, q: usize) -> u32 {
        (match self.b {
            ParityRule::Default => p + q,
            ParityRule::QOnly => q,
        }) as u32
    }

    /// `(-1)^{s(p,q)}`
    pub fn sign_s(&self, p: usize, q: usize) -> f64 {
        sign(self.s(p, q))
    }

    pub fn parse_s(name: &str) -> Result<SignRule> {
        match name {
            "default" => Ok(SignRule::Default),
            "pq-only" => Ok(SignRule::PqOnly),
            "half-q" => Ok(SignRule::HalfQ),
            other => Err(Error::Input(format!("unknown sign convention `{other}`"))),
        }
    }

    pub fn parse_b(name: &str) -> Result<ParityRule> {
        match name {
            "default" => Ok(ParityRule::Default),
            "q-only" => Ok(ParityRule::QOnly),
            other => Err(Error::Input(format!("unknown parity convention `{other}`"))),
        }
    }
}

/// `(-1)^e`
pub fn sign(e: u32) -> f64 {
    if e.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

fn signed(f: &SuperNumber, e: u32) -> SuperNumber {
    if e.is_multiple_of(2) {
        f.clone()
    } else {
        -f
    }
}

type Mat = Vec<Vec<SuperNumber>>;

fn mat_mul(a: &Mat, b: &Mat, q: usize) -> Mat {
    let n = a.len();
    let m = b.first().map(|r| r.len()).unwrap_or(0);
    let inner = b.len();
    (0..n)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let mut acc = SuperNumber::zero(q);
                    for k in 0..inner {
                        if a[i][k].is_zero() || b[k][j].is_zero() {
                            continue;
                        }
                        acc = &acc + &(&a[i][k] * &b[k][j]);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn mat_add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn mat_is_zero(a: &Mat) -> bool {
    a.iter().all(|r| r.iter().all(|x| x.is_zero()))
}

fn block(a: &Mat, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Mat {
    a[rows].iter().map(|r| r[cols.clone()].to_vec()).collect()
}

/// Inverse of a square matrix whose body is invertible and block diagonal
/// with respect to `split` (the leading `split` rows/columns form one block).
fn mat_inverse(a: &Mat, split: usize, q: usize) -> Result<Mat> {
    let n = a.len();
    let body: Vec<Vec<Expr>> = a.iter().map(|r| r.iter().map(|x| x.body()).collect()).collect();
    let mut binv = vec![vec![SuperNumber::zero(q); n]; n];
    for range in [0..split, split..n] {
        let sub: Vec<Vec<Expr>> = body[range.clone()].iter().map(|r| r[range.clone()].to_vec()).collect();
        if sub.is_empty() {
            continue;
        }
        if expr::det(&sub).is_zero() {
            return Err(Error::NotInvertible("body block is singular".into()));
        }
        let inv = expr::inverse(&sub);
        for (i, row) in inv.into_iter().enumerate() {
            for (j, e) in row.into_iter().enumerate() {
                binv[range.start + i][range.start + j] = SuperNumber::scalar(q, e);
            }
        }
    }
    let soul: Mat = a.iter().map(|r| r.iter().map(|x| x.soul()).collect()).collect();
    // (B + N)^{-1} = sum_k (-B^{-1} N)^k B^{-1}
    let step: Mat = mat_mul(&binv, &soul, q).into_iter().map(|r| r.into_iter().map(|x| -x).collect()).collect();
    let mut term = binv.clone();
    let mut acc = binv;
    for _ in 0..q {
        term = mat_mul(&step, &term, q);
        if mat_is_zero(&term) {
            break;
        }
        acc = mat_add(&acc, &term);
    }
    Ok(acc)
}

/// Determinant of a matrix with even entries as `det(B) exp(tr log(1 + B^{-1} N))`.
pub fn det_even(a: &Mat, q: usize) -> Result<SuperNumber> {
    let n = a.len();
    if n == 0 {
        return Ok(SuperNumber::one(q));
    }
    for r in a {
        for x in r {
            if x.parity() != Parity::Even {
                return Err(Error::NotEven(format!("matrix entry {x}")));
            }
        }
    }
    let body: Vec<Vec<Expr>> = a.iter().map(|r| r.iter().map(|x| x.body()).collect()).collect();
    let d0 = expr::det(&body);
    if d0.is_zero() {
        return Ok(SuperNumber::zero(q));
    }
    let binv: Mat = expr::inverse(&body)
        .into_iter()
        .map(|r| r.into_iter().map(|e| SuperNumber::scalar(q, e)).collect())
        .collect();
    let soul: Mat = a.iter().map(|r| r.iter().map(|x| x.soul()).collect()).collect();
    let x = mat_mul(&binv, &soul, q);
    // tr log(1 + X) = sum_k (-1)^{k+1} tr(X^k) / k
    let mut power = x.clone();
    let mut trace_log = SuperNumber::zero(q);
    for k in 1..=q / 2 {
        if k > 1 {
            power = mat_mul(&power, &x, q);
        }
        if mat_is_zero(&power) {
            break;
        }
        let mut tr = SuperNumber::zero(q);
        for (i, row) in power.iter().enumerate() {
            tr = &tr + &row[i];
        }
        let c = if k % 2 == 1 { 1.0 } else { -1.0 } / k as f64;
        trace_log = &trace_log + &tr.scale_f64(c);
    }
    let mut exp = SuperNumber::one(q);
    let mut term = SuperNumber::one(q);
    for k in 1..=q / 2 {
        term = (&term * &trace_log).scale_f64(1.0 / k as f64);
        if term.is_zero() {
            break;
        }
        exp = &exp + &term;
    }
    Ok(exp.scale(&d0))
}

/// Determinant by cofactor expansion (test oracle for [`det_even`]).
pub fn det_laplace(a: &Mat, q: usize) -> SuperNumber {
    let n = a.len();
    if n == 0 {
        return SuperNumber::one(q);
    }
    let mut acc = SuperNumber::zero(q);
    for j in 0..n {
        let minor: Mat = a[1..]
            .iter()
            .map(|r| r.iter().enumerate().filter(|(k, _)| *k != j).map(|(_, x)| x.clone()).collect())
            .collect();
        let t = &a[0][j] * &det_laplace(&minor, q);
        acc = if j % 2 == 0 { &acc + &t } else { &acc - &t };
    }
    acc
}

/// A `(p|q) x (p|q)` even supermatrix `[[R, S], [T, V]]`.
#[derive(Clone, Debug)]
pub struct SuperMatrix {
    p: usize,
    q: usize,
    entries: Mat,
}

impl SuperMatrix {
    pub fn new(p: usize, q: usize, entries: Mat) -> Result<SuperMatrix> {
        let n = p + q;
        if entries.len() != n || entries.iter().any(|r| r.len() != n) {
            return Err(Error::Input("supermatrix shape".into()));
        }
        for (i, row) in entries.iter().enumerate() {
            for (j, x) in row.iter().enumerate() {
                let want = if (i < p) == (j < p) { Parity::Even } else { Parity::Odd };
                if !x.is_zero() && x.parity() != want {
                    return Err(Error::Parity(format!("supermatrix entry ({i},{j}) = {x}")));
                }
            }
        }
        Ok(SuperMatrix { p, q, entries })
    }

    pub fn get(&self, i: usize, j: usize) -> &SuperNumber {
        &self.entries[i][j]
    }

    pub fn entries(&self) -> &Mat {
        &self.entries
    }

    pub fn n_odd_generators(&self) -> usize {
        self.entries.first().and_then(|r| r.first()).map(|x| x.q()).unwrap_or(0)
    }

    pub fn identity(p: usize, q: usize, gens: usize) -> SuperMatrix {
        let n = p + q;
        let entries = (0..n)
            .map(|i| (0..n).map(|j| if i == j { SuperNumber::one(gens) } else { SuperNumber::zero(gens) }).collect())
            .collect();
        SuperMatrix { p, q, entries }
    }

    pub fn mul(&self, other: &SuperMatrix) -> SuperMatrix {
        SuperMatrix {
            p: self.p,
            q: self.q,
            entries: mat_mul(&self.entries, &other.entries, self.n_odd_generators()),
        }
    }

    pub fn inverse(&self) -> Result<SuperMatrix> {
        let entries = mat_inverse(&self.entries, self.p, self.n_odd_generators())?;
        Ok(SuperMatrix { p: self.p, q: self.q, entries })
    }

    pub fn r(&self) -> Mat {
        block(&self.entries, 0..self.p, 0..self.p)
    }
    pub fn s(&self) -> Mat {
        block(&self.entries, 0..self.p, self.p..self.p + self.q)
    }
    pub fn t(&self) -> Mat {
        block(&self.entries, self.p..self.p + self.q, 0..self.p)
    }
    pub fn v(&self) -> Mat {
        block(&self.entries, self.p..self.p + self.q, self.p..self.p + self.q)
    }
}

/// `Ber(M) = det(R - S V^{-1} T) det(V)^{-1}`.
pub fn ber(m: &SuperMatrix) -> Result<SuperNumber> {
    let g = m.n_odd_generators();
    let v = m.v();
    let (r, s, t) = (m.r(), m.s(), m.t());
    if v.is_empty() {
        return det_even(&r, g);
    }
    let vinv = mat_inverse(&v, v.len(), g).map_err(|e| Error::SingularV(e.to_string()))?;
    let corr = mat_mul(&mat_mul(&s, &vinv, g), &t, g);
    let schur: Mat = r.iter().zip(&corr).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect()).collect();
    let det_v = det_even(&v, g)?;
    Ok(&det_even(&schur, g)? * &det_v.invert()?)
}

/// Sign of the body of `det R`, required to be constant over `samples`.
pub fn body_det_sign(m: &SuperMatrix, samples: &[Point]) -> Result<f64> {
    let body: Vec<Vec<Expr>> = m.r().iter().map(|r| r.iter().map(|x| x.body()).collect()).collect();
    let d = expr::det(&body);
    let mut sgn = 0.0;
    for pt in samples {
        let v = d.eval(pt)?;
        let s = if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            return Err(Error::SignAmbiguous);
        };
        if sgn != 0.0 && s != sgn {
            return Err(Error::SignAmbiguous);
        }
        sgn = s;
    }
    Ok(if sgn == 0.0 { 1.0 } else { sgn })
}

/// `|Ber|(M)`: the Berezinian times the sign of the body of `det R`.
pub fn abs_ber(m: &SuperMatrix, samples: &[Point]) -> Result<SuperNumber> {
    Ok(ber(m)?.scale_f64(body_det_sign(m, samples)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    /// Section of `|Ber|`, transforms with `|Ber|`.
    Density,
    /// Section of `Ber`, transforms with `Ber`.
    Form,
}

/// `ω = f |Dx|` (or `f Dx`) with left coefficient `f` in the tagged system.
#[derive(Clone, Debug)]
pub struct BerezinDensity {
    pub kind: Kind,
    pub coeff: SuperNumber,
    pub coords: CoordSystem,
}

impl BerezinDensity {
    pub fn new(kind: Kind, coeff: SuperNumber, coords: &CoordSystem) -> Result<BerezinDensity> {
        if coeff.q() != coords.chart().q() {
            return Err(Error::MismatchedGeneratorCount(coords.chart().q(), coeff.q()));
        }
        Ok(BerezinDensity { kind, coeff, coords: coords.clone() })
    }

    pub fn chart(&self) -> &Arc<Chart> {
        self.coords.chart()
    }

    pub fn with_coeff(&self, coeff: SuperNumber) -> BerezinDensity {
        BerezinDensity { kind: self.kind, coeff, coords: self.coords.clone() }
    }

    /// `D x/y` (forms) or `|D| x/y` (densities) for `x` = own tag.
    fn factor_to(&self, target: &CoordSystem) -> Result<SuperNumber> {
        let num = self.coords.ber()?;
        let den = target.ber()?;
        let f = &num * &den.invert()?;
        Ok(match self.kind {
            Kind::Form => f,
            Kind::Density => f.scale_f64(self.coords.orientation()? * target.orientation()?),
        })
    }

    /// Re-expresses the density in another coordinate system.
    pub fn transform(&self, target: &CoordSystem) -> Result<BerezinDensity> {
        if self.coords.same_as(target) {
            return Ok(self.clone());
        }
        if !Arc::ptr_eq(self.coords.chart(), target.chart()) {
            return Err(Error::Input("coordinate systems live on different charts".into()));
        }
        let coeff = &self.coeff * &self.factor_to(target)?;
        Ok(BerezinDensity { kind: self.kind, coeff, coords: target.clone() })
    }

    pub fn in_standard(&self) -> Result<BerezinDensity> {
        self.transform(&CoordSystem::standard(self.chart()))
    }

    pub fn add(&self, other: &BerezinDensity) -> Result<BerezinDensity> {
        if self.kind != other.kind {
            return Err(Error::Input("cannot add a density and a form".into()));
        }
        let o = other.transform(&self.coords)?;
        Ok(self.with_coeff(&self.coeff + &o.coeff))
    }

    /// `g ω`
    pub fn mul_left(&self, g: &SuperNumber) -> BerezinDensity {
        self.with_coeff(g * &self.coeff)
    }

    /// `ω g = (-1)^{|g| b} f g |Dx|` for homogeneous `g`.
    pub fn mul_right(&self, g: &SuperNumber, conv: &Convention) -> Result<BerezinDensity> {
        let chart = self.chart();
        let b = conv.b(chart.p(), chart.q());
        Ok(self.with_coeff(signed(&(&self.coeff * g), g.parity_bit()? * b)))
    }

    pub fn split_parity(&self) -> [BerezinDensity; 2] {
        [self.with_coeff(self.coeff.even_part()), self.with_coeff(self.coeff.odd_part())]
    }

    /// Fibre integral with respect to `γ`: the coefficient of `|du0|`.
    pub fn fibre_integral(&self, gamma: &Retraction, conv: &Convention) -> Result<Expr> {
        let chart = self.chart();
        let local = self.transform(&gamma.coords())?;
        let big_f = gamma.decompose(&local.coeff)?;
        Ok(&big_f.top() * &Expr::constant(conv.sign_s(chart.p(), chart.q())))
    }

    /// Berezin integral over the chart region with respect to `γ`.
    pub fn integrate(&self, gamma: &Retraction, rule: &QuadratureRule, conv: &Convention) -> Result<f64> {
        let chart = self.chart();
        let g = self.fibre_integral(gamma, conv)?;
        integrate_volume(&g, &chart.vars, &chart.region, rule)
    }

    /// `φ*(ω)` along a morphism into this density's chart.
    pub fn pullback(&self, phi: &Morphism) -> Result<BerezinDensity> {
        if !Arc::ptr_eq(&phi.target, self.chart()) {
            return Err(Error::Input("morphism target is not the density's chart".into()));
        }
        let coords = phi.pullback_coords(&self.coords)?;
        Ok(BerezinDensity { kind: self.kind, coeff: phi.pullback(&self.coeff)?, coords })
    }
}

/// `A = Σ_j a_j ∂x^j` in a coordinate system `x`.
#[derive(Clone, Debug)]
pub struct DiffOp {
    pub coords: CoordSystem,
    pub terms: Vec<(Vec<u32>, SuperNumber)>,
}

impl DiffOp {
    pub fn new(coords: &CoordSystem, terms: Vec<(Vec<u32>, SuperNumber)>) -> Result<DiffOp> {
        let chart = coords.chart();
        for (j, a) in &terms {
            if j.len() != chart.dim() {
                return Err(Error::Input("multi-index length".into()));
            }
            if j[chart.p()..].iter().any(|&k| k > 1) {
                return Err(Error::Input("odd multi-index entries must be 0 or 1".into()));
            }
            if a.q() != chart.q() {
                return Err(Error::MismatchedGeneratorCount(chart.q(), a.q()));
            }
        }
        let terms = terms.into_iter().filter(|(_, a)| !a.is_zero()).collect();
        Ok(DiffOp { coords: coords.clone(), terms })
    }

    /// `∂/∂x_i`
    pub fn partial(coords: &CoordSystem, i: usize) -> DiffOp {
        let n = coords.chart().dim();
        let mut j = vec![0; n];
        j[i] = 1;
        DiffOp { coords: coords.clone(), terms: vec![(j, SuperNumber::one(coords.chart().q()))] }
    }

    /// Vector field `Σ_i c_i ∂/∂x_i`.
    pub fn vector_field(coords: &CoordSystem, coeffs: Vec<SuperNumber>) -> Result<DiffOp> {
        let n = coords.chart().dim();
        let terms = coeffs
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let mut j = vec![0; n];
                j[i] = 1;
                (j, c)
            })
            .collect();
        DiffOp::new(coords, terms)
    }

    pub fn parity(&self) -> Result<u32> {
        let p = self.coords.chart().p();
        let mut out = None;
        for (j, a) in &self.terms {
            let jo: u32 = j[p..].iter().sum();
            let par = (a.parity_bit()? + jo) % 2;
            match out {
                None => out = Some(par),
                Some(x) if x != par => return Err(Error::Parity("operator of mixed parity".into())),
                _ => {}
            }
        }
        Ok(out.unwrap_or(0))
    }

    /// `A(h)`
    pub fn apply(&self, h: &SuperNumber) -> Result<SuperNumber> {
        let mut out = SuperNumber::zero(h.q());
        for (j, a) in &self.terms {
            out = &out + &(a * &self.coords.derivative_multi(h, j)?);
        }
        Ok(out)
    }

    /// `ω.A` for the right action on densities and forms.
    pub fn act(&self, omega: &BerezinDensity, conv: &Convention) -> Result<BerezinDensity> {
        let chart = omega.chart().clone();
        let (p, q) = (chart.p(), chart.q());
        let b = conv.b(p, q);
        let local = omega.transform(&self.coords)?;
        let mut out = SuperNumber::zero(q);
        for part in [local.coeff.even_part(), local.coeff.odd_part()] {
            if part.is_zero() {
                continue;
            }
            let pf = part.parity_bit()?;
            // ω = |Dx| f' with f' = (-1)^{|f| b} f
            let right = signed(&part, pf * b);
            for (j, a) in &self.terms {
                let pa = a.parity_bit()?;
                let jall: u32 = j.iter().sum();
                let jodd: u32 = j[p..].iter().sum();
                let e = jall + ((pf + pa) % 2) * jodd + jodd * jodd.saturating_sub(1) / 2;
                let val = self.coords.derivative_multi(&(&right * a), j)?;
                let pg = (pf + pa + jodd) % 2;
                out = &out + &signed(&val, e + pg * b);
            }
        }
        Ok(local.with_coeff(out))
    }

    /// `ω.A_1.A_2...` applied in order.
    pub fn act_all(ops: &[&DiffOp], omega: &BerezinDensity, conv: &Convention) -> Result<BerezinDensity> {
        let mut w = omega.clone();
        for op in ops {
            w = op.act(&w, conv)?;
        }
        Ok(w)
    }

    /// Lie derivative along a first-order operator without constant term.
    pub fn lie_derivative(&self, omega: &BerezinDensity) -> Result<BerezinDensity> {
        let local = omega.transform(&self.coords)?;
        let q = local.coeff.q();
        let mut out = SuperNumber::zero(q);
        for (j, g) in &self.terms {
            if j.iter().sum::<u32>() != 1 {
                return Err(Error::NotDerivation(format!("term of order {}", j.iter().sum::<u32>())));
            }
            let i = j.iter().position(|&k| k == 1).unwrap();
            let e = g.parity_bit()? * self.coords.parity_of(i);
            out = &out + &signed(&self.coords.derivative(&(g * &local.coeff), i)?, e);
        }
        Ok(local.with_coeff(out))
    }
}

/// All multi-indices in `n` slots with total order between 1 and `max`.
pub fn multi_indices(n: usize, max: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; n];
    fn rec(k: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if k == cur.len() {
            if cur.iter().any(|&x| x > 0) {
                out.push(cur.clone());
            }
            return;
        }
        for v in 0..=left {
            cur[k] = v;
            rec(k + 1, left - v, cur, out);
        }
        cur[k] = 0;
    }
    rec(0, max, &mut cur, &mut out);
    out
}

fn factorial(j: &[u32]) -> f64 {
    j.iter().map(|&k| (1..=k).map(|x| x as f64).product::<f64>()).product()
}

/// `(a - b)^i / i!` for vectors of even superfunctions.
pub fn scaled_power(a: &[SuperNumber], b: &[SuperNumber], i: &[u32]) -> SuperNumber {
    let q = a.first().or(b.first()).map(|x| x.q()).unwrap_or(0);
    let mut acc = SuperNumber::one(q);
    for k in 0..i.len() {
        if i[k] > 0 {
            acc = &acc * &(&a[k] - &b[k]).powi(i[k]);
        }
    }
    acc.scale_f64(1.0 / factorial(i))
}

/// The retraction change `φ*` with `φ*(γ*(u0)) = γ'*(u0)` as an operator in
/// the coordinates `(γ*(u0), ξ)`.
pub fn retraction_change_operator(gamma: &Retraction, gamma_p: &Retraction) -> Result<DiffOp> {
    let chart = gamma.chart();
    let (p, q) = (chart.p(), chart.q());
    let coords = gamma.coords();
    let mut terms = vec![(vec![0; p + q], SuperNumber::one(q))];
    for i in multi_indices(p, (q / 2) as u32) {
        let c = scaled_power(gamma_p.images(), gamma.images(), &i);
        let mut j = i.clone();
        j.extend(std::iter::repeat_n(0, q));
        terms.push((j, c));
    }
    DiffOp::new(&coords, terms)
}

/// One correction term of the local change-of-retraction formula.
#[derive(Debug, Clone, Serialize)]
pub struct LocalTerm {
    pub index: Vec<u32>,
    pub value: f64,
}

/// Integrals of the local change-of-retraction formula.
#[derive(Debug, Clone, Serialize)]
pub struct LocalChange {
    pub direct: f64,
    pub bulk: f64,
    pub terms: Vec<LocalTerm>,
    pub total: f64,
    pub residual: f64,
}

/// `∫_{γ'} ω` against `∫_γ ω + Σ_{i≠0} (1/i!) ∫_γ ω (γ'*(u0) - γ*(u0))^i . ∂u^i`.
pub fn change_of_retraction(
    omega: &BerezinDensity,
    gamma: &Retraction,
    gamma_p: &Retraction,
    rule: &QuadratureRule,
    conv: &Convention,
) -> Result<LocalChange> {
    let chart = omega.chart();
    let (p, q) = (chart.p(), chart.q());
    let coords = gamma.coords();
    let direct = omega.integrate(gamma_p, rule, conv)?;
    let bulk = omega.integrate(gamma, rule, conv)?;
    let mut terms = Vec::new();
    for i in multi_indices(p, (q / 2) as u32) {
        let w = scaled_power(gamma_p.images(), gamma.images(), &i);
        if w.is_zero() {
            continue;
        }
        let wi = omega.transform(&coords)?.mul_right(&w, conv)?;
        let mut j = i.clone();
        j.extend(std::iter::repeat_n(0, q));
        let op = DiffOp::new(&coords, vec![(j, SuperNumber::one(q))])?;
        let value = op.act(&wi, conv)?.integrate(gamma, rule, conv)?;
        terms.push(LocalTerm { index: i, value });
    }
    let total = bulk + terms.iter().map(|t| t.value).sum::<f64>();
    Ok(LocalChange { direct, bulk, terms, total, residual: (direct - total).abs() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::Region;

    #[test]
    fn conventions() {
        let c = Convention::default();
        assert_eq!(c.s(1, 2), 3);
        assert_eq!(c.s(2, 2), 5);
        assert_eq!(c.s(1, 0), 0);
        assert_eq!(c.s(0, 0), 0);
        let pq = Convention { s: SignRule::PqOnly, ..c };
        assert_eq!(pq.s(1, 2), 2);
        let hq = Convention { s: SignRule::HalfQ, ..c };
        assert_eq!(hq.s(1, 2), 1);
    }

    #[test]
    fn shifted_interval_berezinian_is_one() {
        let chart = Chart::standard("U", 1, 2, Region::cuboid(vec![(0.0, 1.0)])).unwrap();
        let xi12 = &chart.coord(1) * &chart.coord(2);
        let y = CoordSystem::new(&chart, vec![&chart.coord(0) + &xi12, chart.coord(1), chart.coord(2)]).unwrap();
        let m = y.jacobian().unwrap();
        assert_eq!(*m.get(1, 0), chart.coord(2));
        assert_eq!(*m.get(2, 0), -&chart.coord(1));
        assert_eq!(y.ber().unwrap(), SuperNumber::one(2));
    }

    #[test]
    fn multi_index_enumeration() {
        assert_eq!(multi_indices(2, 2).len(), 5);
        assert_eq!(multi_indices(1, 1), vec![vec![1]]);
        assert!(multi_indices(3, 0).is_empty());
    }
}
