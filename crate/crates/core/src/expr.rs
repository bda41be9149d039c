//! Immutable symbolic scalar expressions in the even base variables.
//!
//! Nodes are shared through `Arc`, so cloning is cheap and common
//! subexpressions stay shared. The smart constructors perform a small amount
//! of simplification (constant folding, absorption of 0 and 1, merging of like
//! terms and of powers with a common base). Quotients and square roots are
//! represented as rational powers.

use crate::error::{Error, Result};
use num_rational::Rational64;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, OnceLock};

/// Rational exponent of a power node.
pub type Ratio = Rational64;

/// Variable assignment used for evaluation.
pub type Point = HashMap<String, f64>;

/// Builds a [`Point`] from name/value pairs.
pub fn point<S: AsRef<str>>(pairs: &[(S, f64)]) -> Point {
    pairs.iter().map(|(k, v)| (k.as_ref().to_string(), *v)).collect()
}

#[derive(Debug)]
pub enum Node {
    Const(f64),
    Var(Arc<str>),
    Add(Vec<Expr>),
    Mul(Vec<Expr>),
    Pow(Expr, Ratio),
    Sin(Expr),
    Cos(Expr),
    Exp(Expr),
    Log(Expr),
    /// Angle of the point `(x, y)`: `Atan2(y, x)`.
    Atan2(Expr, Expr),
    /// `order`-th derivative of the bump profile evaluated at `arg`.
    Bump { arg: Expr, order: u32 },
}

#[derive(Debug)]
struct Inner {
    node: Node,
    hash: u64,
}

/// A scalar expression.
#[derive(Clone)]
pub struct Expr(Arc<Inner>);

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({self})")
    }
}

fn norm_bits(c: f64) -> u64 {
    if c == 0.0 {
        0
    } else {
        c.to_bits()
    }
}

impl Expr {
    fn from_node(node: Node) -> Expr {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        match &node {
            Node::Const(c) => {
                0u8.hash(&mut h);
                norm_bits(*c).hash(&mut h);
            }
            Node::Var(v) => {
                1u8.hash(&mut h);
                v.hash(&mut h);
            }
            Node::Add(ts) => {
                2u8.hash(&mut h);
                for t in ts {
                    t.0.hash.hash(&mut h);
                }
            }
            Node::Mul(ts) => {
                3u8.hash(&mut h);
                for t in ts {
                    t.0.hash.hash(&mut h);
                }
            }
            Node::Pow(b, r) => {
                4u8.hash(&mut h);
                b.0.hash.hash(&mut h);
                r.hash(&mut h);
            }
            Node::Sin(a) => (5u8, a.0.hash).hash(&mut h),
            Node::Cos(a) => (6u8, a.0.hash).hash(&mut h),
            Node::Exp(a) => (7u8, a.0.hash).hash(&mut h),
            Node::Log(a) => (8u8, a.0.hash).hash(&mut h),
            Node::Bump { arg, order } => (9u8, arg.0.hash, *order).hash(&mut h),
            Node::Atan2(y, x) => (10u8, y.0.hash, x.0.hash).hash(&mut h),
        }
        Expr(Arc::new(Inner { node, hash: h.finish() }))
    }

    pub fn node(&self) -> &Node {
        &self.0.node
    }

    pub fn constant(c: f64) -> Expr {
        Expr::from_node(Node::Const(if c == 0.0 { 0.0 } else { c }))
    }

    pub fn zero() -> Expr {
        Expr::constant(0.0)
    }

    pub fn one() -> Expr {
        Expr::constant(1.0)
    }

    pub fn var(name: &str) -> Expr {
        Expr::from_node(Node::Var(Arc::from(name)))
    }

    pub fn as_const(&self) -> Option<f64> {
        match self.node() {
            Node::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn is_one(&self) -> bool {
        self.as_const() == Some(1.0)
    }

    pub fn ptr_eq(&self, other: &Expr) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    /// Sum with flattening, constant folding and merging of like terms.
    pub fn add_all<I: IntoIterator<Item = Expr>>(terms: I) -> Expr {
        let mut flat: Vec<Expr> = Vec::new();
        for t in terms {
            match t.node() {
                Node::Add(ts) => flat.extend(ts.iter().cloned()),
                _ => {
                    // c * (a + b) is spread so that like terms can cancel
                    let (c, rest) = t.split_coeff();
                    match rest.node() {
                        Node::Add(ts) if c != 1.0 => flat.extend(ts.iter().map(|x| {
                            let (d, r) = x.split_coeff();
                            Expr::mul_all([Expr::constant(c * d), r])
                        })),
                        _ => flat.push(t),
                    }
                }
            }
        }
        let mut constant = 0.0;
        let mut order: Vec<(Expr, f64)> = Vec::new();
        let mut index: HashMap<Expr, usize> = HashMap::new();
        for t in flat {
            if let Some(c) = t.as_const() {
                constant += c;
                continue;
            }
            let (c, rest) = t.split_coeff();
            match index.get(&rest) {
                Some(&i) => order[i].1 += c,
                None => {
                    index.insert(rest.clone(), order.len());
                    order.push((rest, c));
                }
            }
        }
        let mut out: Vec<Expr> = Vec::new();
        if constant != 0.0 {
            out.push(Expr::constant(constant));
        }
        for (rest, c) in order {
            if c == 0.0 {
                continue;
            }
            out.push(if c == 1.0 { rest } else { Expr::mul_all([Expr::constant(c), rest]) });
        }
        match out.len() {
            0 => Expr::zero(),
            1 => out.pop().unwrap(),
            _ => Expr::from_node(Node::Add(out)),
        }
    }

    /// Splits `c * rest` with a numeric coefficient `c`.
    fn split_coeff(&self) -> (f64, Expr) {
        if let Node::Mul(fs) = self.node() {
            if let Some(c) = fs[0].as_const() {
                let rest = if fs.len() == 2 {
                    fs[1].clone()
                } else {
                    Expr::from_node(Node::Mul(fs[1..].to_vec()))
                };
                return (c, rest);
            }
        }
        (1.0, self.clone())
    }

    /// Product with flattening, constant folding and merging of powers.
    pub fn mul_all<I: IntoIterator<Item = Expr>>(factors: I) -> Expr {
        let mut flat: Vec<Expr> = Vec::new();
        for f in factors {
            match f.node() {
                Node::Mul(fs) => flat.extend(fs.iter().cloned()),
                _ => flat.push(f),
            }
        }
        let mut constant = 1.0;
        let mut order: Vec<(Expr, Ratio)> = Vec::new();
        let mut index: HashMap<Expr, usize> = HashMap::new();
        for f in flat {
            if let Some(c) = f.as_const() {
                constant *= c;
                continue;
            }
            let (base, e) = match f.node() {
                Node::Pow(b, r) => (b.clone(), *r),
                _ => (f.clone(), Ratio::from_integer(1)),
            };
            match index.get(&base) {
                Some(&i) => order[i].1 += e,
                None => {
                    index.insert(base.clone(), order.len());
                    order.push((base, e));
                }
            }
        }
        if constant == 0.0 {
            return Expr::zero();
        }
        let mut out: Vec<Expr> = Vec::new();
        for (b, e) in order {
            let p = Expr::pow(&b, e);
            if let Some(c) = p.as_const() {
                constant *= c;
            } else {
                out.push(p);
            }
        }
        if constant == 0.0 {
            return Expr::zero();
        }
        if constant != 1.0 || out.is_empty() {
            out.insert(0, Expr::constant(constant));
        }
        match out.len() {
            1 => out.pop().unwrap(),
            _ => Expr::from_node(Node::Mul(out)),
        }
    }

    pub fn pow(base: &Expr, e: Ratio) -> Expr {
        if *e.numer() == 0 {
            return Expr::one();
        }
        if e.is_integer() && *e.numer() == 1 {
            return base.clone();
        }
        if let Some(c) = base.as_const() {
            if let Ok(v) = eval_pow(c, e) {
                return Expr::constant(v);
            }
        }
        if e.is_integer() {
            match base.node() {
                Node::Pow(b, r) => return Expr::pow(b, r * e),
                Node::Mul(fs) => return Expr::mul_all(fs.iter().map(|f| Expr::pow(f, e))),
                _ => {}
            }
        }
        Expr::from_node(Node::Pow(base.clone(), e))
    }

    pub fn powi(&self, n: i64) -> Expr {
        Expr::pow(self, Ratio::from_integer(n))
    }

    pub fn recip(&self) -> Expr {
        self.powi(-1)
    }

    pub fn sqrt(&self) -> Expr {
        Expr::pow(self, Ratio::new(1, 2))
    }

    pub fn neg(&self) -> Expr {
        Expr::mul_all([Expr::constant(-1.0), self.clone()])
    }

    pub fn sin(&self) -> Expr {
        match self.as_const() {
            Some(c) => Expr::constant(c.sin()),
            None => Expr::from_node(Node::Sin(self.clone())),
        }
    }

    pub fn cos(&self) -> Expr {
        match self.as_const() {
            Some(c) => Expr::constant(c.cos()),
            None => Expr::from_node(Node::Cos(self.clone())),
        }
    }

    pub fn exp(&self) -> Expr {
        match self.as_const() {
            Some(c) => Expr::constant(c.exp()),
            None => Expr::from_node(Node::Exp(self.clone())),
        }
    }

    pub fn log(&self) -> Expr {
        match self.as_const() {
            Some(c) if c > 0.0 => Expr::constant(c.ln()),
            _ => Expr::from_node(Node::Log(self.clone())),
        }
    }

    pub fn atan2(y: &Expr, x: &Expr) -> Expr {
        match (y.as_const(), x.as_const()) {
            (Some(a), Some(b)) => Expr::constant(a.atan2(b)),
            _ => Expr::from_node(Node::Atan2(y.clone(), x.clone())),
        }
    }

    /// `[e, e', e''/2, ..., e^(k)/k!]` in `var`.
    pub fn taylor(&self, var: &str, order: usize) -> Vec<Expr> {
        let mut out = vec![self.clone()];
        let mut d = self.clone();
        let mut fact = 1.0;
        for k in 1..=order {
            d = d.diff(var);
            fact *= k as f64;
            out.push(&d * &Expr::constant(1.0 / fact));
        }
        out
    }

    /// `order`-th derivative of the bump profile at `arg`.
    pub fn bump_profile(arg: &Expr, order: u32) -> Expr {
        match arg.as_const() {
            Some(c) => Expr::constant(bump_eval(c, order)),
            None => Expr::from_node(Node::Bump { arg: arg.clone(), order }),
        }
    }

    /// Bump supported in the ball of `radius` around `center` in `vars`.
    pub fn bump(vars: &[Expr], center: &[f64], radius: f64) -> Expr {
        let s = Expr::add_all(
            vars.iter()
                .zip(center)
                .map(|(v, c)| (v - &Expr::constant(*c)).powi(2)),
        );
        Expr::bump_profile(&(&s * &Expr::constant(1.0 / (radius * radius))), 0)
    }

    /// Smooth plateau: 1 for `x <= a`, 0 for `x >= b`.
    pub fn cutoff(x: &Expr, a: f64, b: f64) -> Expr {
        let one = Expr::one();
        let left = Expr::bump_profile(&(&one - &(&Expr::constant(b) - x)), 0);
        let right = Expr::bump_profile(&(&one - &(x - &Expr::constant(a))), 0);
        &left / &(&left + &right)
    }

    /// Free variable names.
    pub fn vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(e) = stack.pop() {
            if !seen.insert(e.key()) {
                continue;
            }
            match e.node() {
                Node::Var(v) => {
                    out.insert(v.to_string());
                }
                _ => stack.extend(e.children().into_iter().cloned()),
            }
        }
        out
    }

    fn children(&self) -> Vec<&Expr> {
        match self.node() {
            Node::Const(_) | Node::Var(_) => vec![],
            Node::Add(ts) | Node::Mul(ts) => ts.iter().collect(),
            Node::Pow(b, _) => vec![b],
            Node::Sin(a) | Node::Cos(a) | Node::Exp(a) | Node::Log(a) => vec![a],
            Node::Bump { arg, .. } => vec![arg],
            Node::Atan2(y, x) => vec![y, x],
        }
    }

    /// Number of distinct nodes.
    pub fn size(&self) -> usize {
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(e) = stack.pop() {
            if seen.insert(e.key()) {
                stack.extend(e.children().into_iter().cloned());
            }
        }
        seen.len()
    }

    /// Partial derivative with respect to `var`.
    pub fn diff(&self, var: &str) -> Expr {
        let mut memo = HashMap::new();
        self.diff_memo(var, &mut memo)
    }

    fn diff_memo(&self, var: &str, memo: &mut HashMap<usize, Expr>) -> Expr {
        if let Some(d) = memo.get(&self.key()) {
            return d.clone();
        }
        let d = match self.node() {
            Node::Const(_) => Expr::zero(),
            Node::Var(v) => {
                if &**v == var {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Node::Add(ts) => Expr::add_all(ts.iter().map(|t| t.diff_memo(var, memo))),
            Node::Mul(fs) => {
                let mut terms = Vec::new();
                for i in 0..fs.len() {
                    let di = fs[i].diff_memo(var, memo);
                    if di.is_zero() {
                        continue;
                    }
                    let mut factors: Vec<Expr> = fs.clone();
                    factors[i] = di;
                    terms.push(Expr::mul_all(factors));
                }
                Expr::add_all(terms)
            }
            Node::Pow(b, r) => {
                let db = b.diff_memo(var, memo);
                if db.is_zero() {
                    Expr::zero()
                } else {
                    let c = *r.numer() as f64 / *r.denom() as f64;
                    Expr::mul_all([Expr::constant(c), Expr::pow(b, r - 1), db])
                }
            }
            Node::Sin(a) => Expr::mul_all([a.cos(), a.diff_memo(var, memo)]),
            Node::Cos(a) => Expr::mul_all([a.sin().neg(), a.diff_memo(var, memo)]),
            Node::Exp(a) => Expr::mul_all([self.clone(), a.diff_memo(var, memo)]),
            Node::Log(a) => Expr::mul_all([a.recip(), a.diff_memo(var, memo)]),
            Node::Atan2(y, x) => {
                let (dy, dx) = (y.diff_memo(var, memo), x.diff_memo(var, memo));
                let r2 = &(x * x) + &(y * y);
                &(&(x * &dy) - &(y * &dx)) / &r2
            }
            Node::Bump { arg, order } => {
                let da = arg.diff_memo(var, memo);
                if da.is_zero() {
                    Expr::zero()
                } else {
                    Expr::mul_all([Expr::bump_profile(arg, order + 1), da])
                }
            }
        };
        memo.insert(self.key(), d.clone());
        d
    }

    /// Simultaneous substitution of variables by expressions.
    pub fn subst(&self, map: &HashMap<String, Expr>) -> Expr {
        if map.is_empty() {
            return self.clone();
        }
        let mut memo = HashMap::new();
        self.subst_memo(map, &mut memo)
    }

    fn subst_memo(&self, map: &HashMap<String, Expr>, memo: &mut HashMap<usize, Expr>) -> Expr {
        if let Some(d) = memo.get(&self.key()) {
            return d.clone();
        }
        let r = match self.node() {
            Node::Const(_) => self.clone(),
            Node::Var(v) => map.get(&**v).cloned().unwrap_or_else(|| self.clone()),
            Node::Add(ts) => Expr::add_all(ts.iter().map(|t| t.subst_memo(map, memo))),
            Node::Mul(fs) => Expr::mul_all(fs.iter().map(|t| t.subst_memo(map, memo))),
            Node::Pow(b, r) => Expr::pow(&b.subst_memo(map, memo), *r),
            Node::Sin(a) => a.subst_memo(map, memo).sin(),
            Node::Cos(a) => a.subst_memo(map, memo).cos(),
            Node::Exp(a) => a.subst_memo(map, memo).exp(),
            Node::Log(a) => a.subst_memo(map, memo).log(),
            Node::Bump { arg, order } => Expr::bump_profile(&arg.subst_memo(map, memo), *order),
            Node::Atan2(y, x) => Expr::atan2(&y.subst_memo(map, memo), &x.subst_memo(map, memo)),
        };
        memo.insert(self.key(), r.clone());
        r
    }

    /// Substitutes numeric values for some variables.
    pub fn subst_values(&self, values: &Point) -> Expr {
        let map: HashMap<String, Expr> =
            values.iter().map(|(k, v)| (k.clone(), Expr::constant(*v))).collect();
        self.subst(&map)
    }

    /// Numerical evaluation.
    pub fn eval(&self, pt: &Point) -> Result<f64> {
        let mut memo = HashMap::new();
        self.eval_memo(pt, &mut memo)
    }

    fn eval_memo(&self, pt: &Point, memo: &mut HashMap<usize, f64>) -> Result<f64> {
        if let Some(v) = memo.get(&self.key()) {
            return Ok(*v);
        }
        let v = match self.node() {
            Node::Const(c) => *c,
            Node::Var(name) => *pt
                .get(&**name)
                .ok_or_else(|| Error::UnboundVariable(name.to_string()))?,
            Node::Add(ts) => {
                let mut acc = ts[0].eval_memo(pt, memo)?;
                for t in &ts[1..] {
                    acc += t.eval_memo(pt, memo)?;
                }
                acc
            }
            Node::Mul(fs) => {
                let mut acc = fs[0].eval_memo(pt, memo)?;
                for f in &fs[1..] {
                    acc *= f.eval_memo(pt, memo)?;
                }
                acc
            }
            Node::Pow(b, r) => eval_pow(b.eval_memo(pt, memo)?, *r)?,
            Node::Sin(a) => a.eval_memo(pt, memo)?.sin(),
            Node::Cos(a) => a.eval_memo(pt, memo)?.cos(),
            Node::Exp(a) => a.eval_memo(pt, memo)?.exp(),
            Node::Log(a) => eval_log(a.eval_memo(pt, memo)?)?,
            Node::Bump { arg, order } => bump_eval(arg.eval_memo(pt, memo)?, *order),
            Node::Atan2(y, x) => y.eval_memo(pt, memo)?.atan2(x.eval_memo(pt, memo)?),
        };
        memo.insert(self.key(), v);
        Ok(v)
    }

    /// Compiles to a flat program over the given variable slots.
    pub fn compile(&self, slots: &[String]) -> Result<Compiled> {
        Compiled::new(std::slice::from_ref(self), slots)
    }

    /// Agreement with `other` at every sample point, up to a relative tolerance.
    pub fn agrees_with(&self, other: &Expr, points: &[Point], rel_tol: f64) -> Result<bool> {
        for p in points {
            let a = self.eval(p)?;
            let b = other.eval(p)?;
            let scale = a.abs().max(b.abs()).max(1.0);
            if (a - b).abs() > rel_tol * scale {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Randomized equality test at `n` points drawn uniformly from a box.
pub fn random_points(vars: &[String], bounds: &[(f64, f64)], n: usize, seed: u64) -> Vec<Point> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            vars.iter()
                .zip(bounds)
                .map(|(v, (a, b))| (v.clone(), rng.random_range(*a..*b)))
                .collect()
        })
        .collect()
}

fn eval_pow(x: f64, r: Ratio) -> Result<f64> {
    let (n, d) = (*r.numer(), *r.denom());
    if d == 1 {
        if x == 0.0 && n < 0 {
            return Err(Error::Domain("division by zero".into()));
        }
        return Ok(x.powi(n as i32));
    }
    if x < 0.0 || (x == 0.0 && n < 0) {
        return Err(Error::Domain(format!("{x}^({n}/{d})")));
    }
    if n == 1 && d == 2 {
        return Ok(x.sqrt());
    }
    Ok(x.powf(n as f64 / d as f64))
}

fn eval_log(x: f64) -> Result<f64> {
    if x <= 0.0 {
        return Err(Error::Domain(format!("log({x})")));
    }
    Ok(x.ln())
}

fn bump_polys() -> &'static Vec<Vec<f64>> {
    static TABLE: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        // P_{k+1}(t) = t^2 (P_k'(t) - P_k(t)), P_0 = 1
        let mut polys = vec![vec![1.0]];
        for _ in 0..24 {
            let p = polys.last().unwrap();
            let mut inner = vec![0.0; p.len()];
            for (i, c) in p.iter().enumerate() {
                inner[i] -= c;
                if i > 0 {
                    inner[i - 1] += i as f64 * c;
                }
            }
            let mut next = vec![0.0; p.len() + 2];
            for (i, c) in inner.iter().enumerate() {
                next[i + 2] += c;
            }
            polys.push(next);
        }
        polys
    })
}

/// `k`-th derivative of `s -> exp(1 - 1/(1-s))` for `s < 1`, zero otherwise.
pub fn bump_eval(s: f64, k: u32) -> f64 {
    if s.is_nan() {
        return f64::NAN;
    }
    if s >= 1.0 {
        return 0.0;
    }
    let t = 1.0 / (1.0 - s);
    if t > 745.0 {
        return 0.0;
    }
    let polys = bump_polys();
    assert!((k as usize) < polys.len(), "bump derivative order too high");
    let p = &polys[k as usize];
    let mut acc = 0.0;
    for c in p.iter().rev() {
        acc = acc * t + c;
    }
    acc * (1.0 - t).exp()
}

impl PartialEq for Expr {
    fn eq(&self, other: &Expr) -> bool {
        if self.ptr_eq(other) {
            return true;
        }
        if self.0.hash != other.0.hash {
            return false;
        }
        match (self.node(), other.node()) {
            (Node::Const(a), Node::Const(b)) => norm_bits(*a) == norm_bits(*b),
            (Node::Var(a), Node::Var(b)) => a == b,
            (Node::Add(a), Node::Add(b)) | (Node::Mul(a), Node::Mul(b)) => a == b,
            (Node::Pow(a, r), Node::Pow(b, s)) => r == s && a == b,
            (Node::Sin(a), Node::Sin(b))
            | (Node::Cos(a), Node::Cos(b))
            | (Node::Exp(a), Node::Exp(b))
            | (Node::Log(a), Node::Log(b)) => a == b,
            (Node::Bump { arg: a, order: k }, Node::Bump { arg: b, order: l }) => k == l && a == b,
            (Node::Atan2(a, b), Node::Atan2(c, d)) => a == c && b == d,
            _ => false,
        }
    }
}

impl Eq for Expr {}

impl Hash for Expr {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.hash.hash(state);
    }
}

impl From<f64> for Expr {
    fn from(c: f64) -> Expr {
        Expr::constant(c)
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $body:expr) => {
        impl std::ops::$trait<&Expr> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                let f: fn(&Expr, &Expr) -> Expr = $body;
                f(self, rhs)
            }
        }
        impl std::ops::$trait<Expr> for Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                let f: fn(&Expr, &Expr) -> Expr = $body;
                f(&self, &rhs)
            }
        }
    };
}

binop!(Add, add, |a, b| Expr::add_all([a.clone(), b.clone()]));
binop!(Sub, sub, |a, b| Expr::add_all([a.clone(), b.neg()]));
binop!(Mul, mul, |a, b| Expr::mul_all([a.clone(), b.clone()]));
binop!(Div, div, |a, b| Expr::mul_all([a.clone(), b.recip()]));

impl std::ops::Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(self)
    }
}

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(&self)
    }
}

fn prec(e: &Expr) -> u8 {
    match e.node() {
        Node::Add(_) => 1,
        Node::Mul(_) => 2,
        Node::Const(c) if *c < 0.0 => 1,
        Node::Pow(_, _) => 3,
        _ => 4,
    }
}

fn write_wrapped(f: &mut fmt::Formatter<'_>, e: &Expr, min: u8) -> fmt::Result {
    if prec(e) < min {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node() {
            Node::Const(c) => write!(f, "{c}"),
            Node::Var(v) => write!(f, "{v}"),
            Node::Add(ts) => {
                for (i, t) in ts.iter().enumerate() {
                    if i > 0 {
                        write!(f, " + ")?;
                    }
                    write_wrapped(f, t, 1)?;
                }
                Ok(())
            }
            Node::Mul(fs) => {
                for (i, t) in fs.iter().enumerate() {
                    if i > 0 {
                        write!(f, "*")?;
                    }
                    write_wrapped(f, t, 2)?;
                }
                Ok(())
            }
            Node::Pow(b, r) => {
                if *r == Ratio::new(1, 2) {
                    return write!(f, "sqrt({b})");
                }
                write_wrapped(f, b, 4)?;
                if r.is_integer() && *r.numer() > 0 {
                    write!(f, "^{}", r.numer())
                } else {
                    write!(f, "^({r})")
                }
            }
            Node::Sin(a) => write!(f, "sin({a})"),
            Node::Cos(a) => write!(f, "cos({a})"),
            Node::Exp(a) => write!(f, "exp({a})"),
            Node::Log(a) => write!(f, "log({a})"),
            Node::Bump { arg, order } => write!(f, "bump{order}({arg})"),
            Node::Atan2(y, x) => write!(f, "atan2({y}, {x})"),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Const(f64),
    Slot(usize),
    Add(Vec<usize>),
    Mul(Vec<usize>),
    Pow(usize, Ratio),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Log(usize),
    Bump(usize, u32),
    Atan2(usize, usize),
}

/// Flat evaluation program for one or more expressions sharing a DAG.
#[derive(Debug, Clone)]
pub struct Compiled {
    ops: Vec<Op>,
    outputs: Vec<usize>,
    n_slots: usize,
}

impl Compiled {
    pub fn new(exprs: &[Expr], slots: &[String]) -> Result<Compiled> {
        let slot_of: HashMap<&str, usize> =
            slots.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut ops = Vec::new();
        let mut memo: HashMap<usize, usize> = HashMap::new();
        let mut structural: HashMap<Expr, usize> = HashMap::new();
        let mut outputs = Vec::new();
        for e in exprs {
            outputs.push(Self::emit(e, &slot_of, &mut ops, &mut memo, &mut structural)?);
        }
        Ok(Compiled { ops, outputs, n_slots: slots.len() })
    }

    fn emit(
        e: &Expr,
        slot_of: &HashMap<&str, usize>,
        ops: &mut Vec<Op>,
        memo: &mut HashMap<usize, usize>,
        structural: &mut HashMap<Expr, usize>,
    ) -> Result<usize> {
        if let Some(i) = memo.get(&e.key()) {
            return Ok(*i);
        }
        if let Some(i) = structural.get(e) {
            memo.insert(e.key(), *i);
            return Ok(*i);
        }
        let mut go = |x: &Expr, ops: &mut Vec<Op>| Self::emit(x, slot_of, ops, memo, structural);
        let op = match e.node() {
            Node::Const(c) => Op::Const(*c),
            Node::Var(v) => Op::Slot(
                *slot_of
                    .get(&**v)
                    .ok_or_else(|| Error::UnboundVariable(v.to_string()))?,
            ),
            Node::Add(ts) => {
                let mut ids = Vec::with_capacity(ts.len());
                for t in ts {
                    ids.push(go(t, ops)?);
                }
                Op::Add(ids)
            }
            Node::Mul(fs) => {
                let mut ids = Vec::with_capacity(fs.len());
                for t in fs {
                    ids.push(go(t, ops)?);
                }
                Op::Mul(ids)
            }
            Node::Pow(b, r) => Op::Pow(go(b, ops)?, *r),
            Node::Sin(a) => Op::Sin(go(a, ops)?),
            Node::Cos(a) => Op::Cos(go(a, ops)?),
            Node::Exp(a) => Op::Exp(go(a, ops)?),
            Node::Log(a) => Op::Log(go(a, ops)?),
            Node::Bump { arg, order } => Op::Bump(go(arg, ops)?, *order),
            Node::Atan2(y, x) => {
                let a = go(y, ops)?;
                Op::Atan2(a, go(x, ops)?)
            }
        };
        let id = ops.len();
        ops.push(op);
        memo.insert(e.key(), id);
        structural.insert(e.clone(), id);
        Ok(id)
    }

    pub fn n_ops(&self) -> usize {
        self.ops.len()
    }

    /// Evaluates all outputs; `scratch` is reused between calls.
    pub fn eval_into(&self, slots: &[f64], scratch: &mut Vec<f64>, out: &mut [f64]) -> Result<()> {
        assert_eq!(slots.len(), self.n_slots);
        scratch.clear();
        for op in &self.ops {
            let v = match op {
                Op::Const(c) => *c,
                Op::Slot(i) => slots[*i],
                Op::Add(ids) => {
                    let mut acc = scratch[ids[0]];
                    for i in &ids[1..] {
                        acc += scratch[*i];
                    }
                    acc
                }
                Op::Mul(ids) => {
                    let mut acc = scratch[ids[0]];
                    for i in &ids[1..] {
                        acc *= scratch[*i];
                    }
                    acc
                }
                Op::Pow(i, r) => eval_pow(scratch[*i], *r)?,
                Op::Sin(i) => scratch[*i].sin(),
                Op::Cos(i) => scratch[*i].cos(),
                Op::Exp(i) => scratch[*i].exp(),
                Op::Log(i) => eval_log(scratch[*i])?,
                Op::Bump(i, k) => bump_eval(scratch[*i], *k),
                Op::Atan2(a, b) => scratch[*a].atan2(scratch[*b]),
            };
            scratch.push(v);
        }
        for (o, i) in out.iter_mut().zip(&self.outputs) {
            *o = scratch[*i];
        }
        Ok(())
    }

    pub fn eval(&self, slots: &[f64]) -> Result<Vec<f64>> {
        let mut scratch = Vec::with_capacity(self.ops.len());
        let mut out = vec![0.0; self.outputs.len()];
        self.eval_into(slots, &mut scratch, &mut out)?;
        Ok(out)
    }
}

/// Determinant of a square matrix of expressions by cofactor expansion.
pub fn det(m: &[Vec<Expr>]) -> Expr {
    let n = m.len();
    match n {
        0 => Expr::one(),
        1 => m[0][0].clone(),
        2 => &(&m[0][0] * &m[1][1]) - &(&m[0][1] * &m[1][0]),
        _ => {
            let mut terms = Vec::new();
            for j in 0..n {
                if m[0][j].is_zero() {
                    continue;
                }
                let minor: Vec<Vec<Expr>> = m[1..]
                    .iter()
                    .map(|row| row.iter().enumerate().filter(|(k, _)| *k != j).map(|(_, e)| e.clone()).collect())
                    .collect();
                let t = &m[0][j] * &det(&minor);
                terms.push(if j % 2 == 0 { t } else { t.neg() });
            }
            Expr::add_all(terms)
        }
    }
}

/// Inverse of a square matrix of expressions through the adjugate.
pub fn inverse(m: &[Vec<Expr>]) -> Vec<Vec<Expr>> {
    let n = m.len();
    let d = det(m);
    let dinv = d.recip();
    let mut out = vec![vec![Expr::zero(); n]; n];
    for i in 0..n {
        for j in 0..n {
            let minor: Vec<Vec<Expr>> = m
                .iter()
                .enumerate()
                .filter(|(r, _)| *r != j)
                .map(|(_, row)| row.iter().enumerate().filter(|(c, _)| *c != i).map(|(_, e)| e.clone()).collect())
                .collect();
            let c = &det(&minor) * &dinv;
            out[i][j] = if (i + j) % 2 == 0 { c } else { c.neg() };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn u() -> Expr {
        Expr::var("u")
    }

    #[test]
    fn simplification_basics() {
        let x = u();
        assert!((&x - &x).is_zero());
        assert_eq!(&x * &x, x.powi(2));
        assert!((&(&x * &x) / &x) == x);
        assert!((&Expr::zero() * &x.sin()).is_zero());
        assert_eq!(&Expr::one() * &x, x);
        assert_eq!(
            (&Expr::constant(2.0) + &Expr::constant(3.0)).as_const(),
            Some(5.0)
        );
    }

    #[test]
    fn bump_profile_values() {
        assert_eq!(bump_eval(0.0, 0), 1.0);
        assert_eq!(bump_eval(1.0, 0), 0.0);
        assert_eq!(bump_eval(2.0, 3), 0.0);
        // B'(s) = -t^2 B with t = 1/(1-s)
        let s = 0.3;
        let t = 1.0 / (1.0 - s);
        assert!((bump_eval(s, 1) + t * t * bump_eval(s, 0)).abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        let p = point(&[("u", -1.0)]);
        assert!(matches!(u().log().eval(&p), Err(Error::Domain(_))));
        assert!(matches!(u().sqrt().eval(&p), Err(Error::Domain(_))));
        assert!(matches!(
            Expr::var("w").eval(&p),
            Err(Error::UnboundVariable(_))
        ));
    }

    #[test]
    fn compiled_matches_tree() {
        let x = u();
        let y = Expr::var("v");
        let e = &(&x.sin() * &y.exp()) + &(&x.powi(3) / &(&y + &Expr::constant(2.0)));
        let c = e.compile(&["u".into(), "v".into()]).unwrap();
        let p = point(&[("u", 0.3), ("v", 0.7)]);
        assert_eq!(c.eval(&[0.3, 0.7]).unwrap()[0], e.eval(&p).unwrap());
    }
}
