//! Infix expression syntax for scenario files.
//!
//! Grammar: sums and differences of products and quotients of powers; `^`
//! binds tightest and is right associative. Identifiers name coordinates or
//! parameters; `pi` and `e` are built in.

use crate::chart::Chart;
use crate::grassmann::compose_scalar;
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grassmann::SuperNumber;
use num_rational::Rational64;
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq)]
pub enum Ast {
    Num(f64),
    Ident(String, usize),
    Neg(Box<Ast>),
    Add(Box<Ast>, Box<Ast>),
    Sub(Box<Ast>, Box<Ast>),
    Mul(Box<Ast>, Box<Ast>),
    Div(Box<Ast>, Box<Ast>),
    Pow(Box<Ast>, Box<Ast>),
    Call(String, Vec<Ast>, usize),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

struct Lexer;

impl Lexer {
    fn run(src: &str) -> Result<Vec<(Tok, usize)>> {
        let chars: Vec<char> = src.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
            } else if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    let mut j = i + 1;
                    if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                        j += 1;
                    }
                    if j < chars.len() && chars[j].is_ascii_digit() {
                        i = j;
                        while i < chars.len() && chars[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text: String = chars[start..i].iter().collect();
                let v = text.parse::<f64>().map_err(|_| perr(start, format!("bad number '{text}'")))?;
                out.push((Tok::Num(v), start));
            } else if c.is_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push((Tok::Ident(chars[start..i].iter().collect()), start));
            } else if "+-*/^(),".contains(c) {
                out.push((Tok::Op(c), i));
                i += 1;
            } else {
                return Err(perr(i, format!("unexpected character '{c}'")));
            }
        }
        Ok(out)
    }
}

/// Parse error at a character offset inside one expression; the scenario
/// loader maps it to a file position.
fn perr(col: usize, msg: String) -> Error {
    Error::Parse { line: 0, col, msg }
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|t| t.1).unwrap_or(self.end)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Op(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(perr(self.offset(), format!("expected '{c}'")))
        }
    }

    fn sum(&mut self) -> Result<Ast> {
        let mut lhs = self.product()?;
        loop {
            if self.eat('+') {
                lhs = Ast::Add(Box::new(lhs), Box::new(self.product()?));
            } else if self.eat('-') {
                lhs = Ast::Sub(Box::new(lhs), Box::new(self.product()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn product(&mut self) -> Result<Ast> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Ast::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat('/') {
                lhs = Ast::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Ast> {
        if self.eat('-') {
            return Ok(Ast::Neg(Box::new(self.unary()?)));
        }
        if self.eat('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Ast> {
        let base = self.atom()?;
        if self.eat('^') {
            return Ok(Ast::Pow(Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Ast> {
        let at = self.offset();
        match self.toks.get(self.pos).cloned() {
            Some((Tok::Num(v), _)) => {
                self.pos += 1;
                Ok(Ast::Num(v))
            }
            Some((Tok::Ident(name), _)) => {
                self.pos += 1;
                if self.eat('(') {
                    let mut args = Vec::new();
                    if !self.eat(')') {
                        loop {
                            args.push(self.sum()?);
                            if self.eat(')') {
                                break;
                            }
                            self.expect(',')?;
                        }
                    }
                    Ok(Ast::Call(name, args, at))
                } else {
                    Ok(Ast::Ident(name, at))
                }
            }
            Some((Tok::Op('('), _)) => {
                self.pos += 1;
                let e = self.sum()?;
                self.expect(')')?;
                Ok(e)
            }
            Some((Tok::Op(c), _)) => Err(perr(at, format!("unexpected '{c}'"))),
            None => Err(perr(at, "unexpected end of expression".into())),
        }
    }
}

pub fn parse(src: &str) -> Result<Ast> {
    let toks = Lexer::run(src)?;
    let mut p = Parser { toks, pos: 0, end: src.chars().count() };
    let ast = p.sum()?;
    if p.pos != p.toks.len() {
        return Err(perr(p.offset(), "unexpected trailing input".into()));
    }
    Ok(ast)
}

/// A numeric function callable from expressions.
pub type NumericFn<'a> = std::sync::Arc<dyn Fn(&[f64]) -> Result<f64> + Send + Sync + 'a>;

/// Values that names and special functions resolve to.
#[derive(Clone, Default)]
pub struct Scope<'a> {
    pub params: HashMap<String, f64>,
    /// Chart whose coordinates may appear; `None` for purely numeric input.
    pub chart: Option<&'a Chart>,
    /// Whether odd coordinates are allowed.
    pub odd_allowed: bool,
    /// Extra numeric functions such as `sgn_s(p, q)` or `f0(point)`.
    pub functions: HashMap<String, NumericFn<'a>>,
}

impl<'a> Scope<'a> {
    pub fn numeric(params: &HashMap<String, f64>) -> Scope<'a> {
        Scope { params: params.clone(), ..Scope::default() }
    }

    pub fn on_chart(params: &HashMap<String, f64>, chart: &'a Chart, odd_allowed: bool) -> Scope<'a> {
        Scope { params: params.clone(), chart: Some(chart), odd_allowed, ..Scope::default() }
    }

    fn q(&self) -> usize {
        if self.odd_allowed {
            self.chart.map(|c| c.q()).unwrap_or(0)
        } else {
            0
        }
    }
}

fn apply(q: usize, args: &[SuperNumber], g: impl Fn(&[Expr]) -> Expr) -> Result<SuperNumber> {
    let names: Vec<String> = (0..args.len()).map(|i| format!("_arg{i}")).collect();
    let vars: Vec<Expr> = names.iter().map(|n| Expr::var(n)).collect();
    let body = g(&vars);
    if args.iter().all(|a| a.soul().is_zero()) {
        let map = names.iter().cloned().zip(args.iter().map(|a| a.body())).collect();
        return Ok(SuperNumber::scalar(q, body.subst(&map)));
    }
    compose_scalar(&body, &names, args)
}

fn constant_of(s: &SuperNumber, at: usize, what: &str) -> Result<f64> {
    if !s.soul().is_zero() {
        return Err(perr(at, format!("{what} must be a number")));
    }
    s.body().as_const().ok_or_else(|| perr(at, format!("{what} must be a number")))
}

fn ratio(x: f64, at: usize) -> Result<Rational64> {
    Rational64::approximate_float(x)
        .filter(|r| (*r.numer() as f64 / *r.denom() as f64 - x).abs() < 1e-12 && *r.denom() <= 1000)
        .ok_or_else(|| perr(at, format!("exponent {x} is not a simple rational")))
}

fn arity(name: &str, args: &[SuperNumber], n: usize, at: usize) -> Result<()> {
    if args.len() != n {
        return Err(perr(at, format!("{name} takes {n} argument(s), got {}", args.len())));
    }
    Ok(())
}

/// Evaluates the tree to a superfunction on the scope's chart.
pub fn eval_super(ast: &Ast, scope: &Scope) -> Result<SuperNumber> {
    let q = scope.q();
    let rec = |a: &Ast| eval_super(a, scope);
    Ok(match ast {
        Ast::Num(v) => SuperNumber::constant(q, *v),
        Ast::Ident(name, at) => {
            if let Some(v) = scope.params.get(name) {
                return Ok(SuperNumber::constant(q, *v));
            }
            match name.as_str() {
                "pi" => return Ok(SuperNumber::constant(q, std::f64::consts::PI)),
                "e" => return Ok(SuperNumber::constant(q, std::f64::consts::E)),
                _ => {}
            }
            let chart = scope.chart.ok_or_else(|| perr(*at, format!("unknown name '{name}'")))?;
            if chart.vars.iter().any(|v| v == name) {
                SuperNumber::scalar(q, Expr::var(name))
            } else if let Some(j) = chart.odd.iter().position(|v| v == name) {
                if !scope.odd_allowed {
                    return Err(perr(*at, format!("odd coordinate '{name}' is not allowed here")));
                }
                SuperNumber::generator(q, j)?
            } else {
                return Err(perr(*at, format!("unknown name '{name}'")));
            }
        }
        Ast::Neg(a) => -&rec(a)?,
        Ast::Add(a, b) => &rec(a)? + &rec(b)?,
        Ast::Sub(a, b) => &rec(a)? - &rec(b)?,
        Ast::Mul(a, b) => &rec(a)? * &rec(b)?,
        Ast::Div(a, b) => {
            let d = rec(b)?;
            &rec(a)? * &d.invert().map_err(|e| perr(0, format!("cannot divide: {e}")))?
        }
        Ast::Pow(a, b) => {
            let base = rec(a)?;
            let ex = constant_of(&rec(b)?, 0, "exponent")?;
            if ex.fract() == 0.0 && ex >= 0.0 {
                base.powi(ex as u32)
            } else {
                let r = ratio(ex, 0)?;
                apply(q, &[base], |v| Expr::pow(&v[0], r))?
            }
        }
        Ast::Call(name, args, at) => {
            let at = *at;
            if let Some(f) = scope.functions.get(name) {
                let vals: Vec<f64> =
                    args.iter().map(|a| constant_of(&rec(a)?, at, "argument")).collect::<Result<_>>()?;
                return Ok(SuperNumber::constant(q, f(&vals)?));
            }
            let vals: Vec<SuperNumber> = args.iter().map(rec).collect::<Result<_>>()?;
            let unary = |g: fn(&Expr) -> Expr| -> Result<SuperNumber> {
                arity(name, &vals, 1, at)?;
                if vals[0].parity() != crate::grassmann::Parity::Even {
                    return Err(perr(at, format!("{name} needs an even argument")));
                }
                apply(q, &vals, |v| g(&v[0]))
            };
            match name.as_str() {
                "sin" => unary(Expr::sin)?,
                "cos" => unary(Expr::cos)?,
                "exp" => unary(Expr::exp)?,
                "log" => unary(Expr::log)?,
                "sqrt" => unary(Expr::sqrt)?,
                "atan2" => {
                    arity(name, &vals, 2, at)?;
                    apply(q, &vals, |v| Expr::atan2(&v[0], &v[1]))?
                }
                "cutoff" => {
                    arity(name, &vals, 3, at)?;
                    let a = constant_of(&vals[1], at, "cutoff start")?;
                    let b = constant_of(&vals[2], at, "cutoff end")?;
                    apply(q, &vals[..1], |v| Expr::cutoff(&v[0], a, b))?
                }
                "bump" => {
                    let chart = scope.chart.ok_or_else(|| perr(at, "bump needs chart coordinates".into()))?;
                    let p = chart.p();
                    if vals.len() != p + 1 {
                        return Err(perr(at, format!("bump takes {p} centre coordinates and a radius")));
                    }
                    let centre: Vec<f64> =
                        vals[..p].iter().map(|v| constant_of(v, at, "bump centre")).collect::<Result<_>>()?;
                    let radius = constant_of(&vals[p], at, "bump radius")?;
                    if radius <= 0.0 {
                        return Err(perr(at, "bump radius must be positive".into()));
                    }
                    let coords: Vec<Expr> = chart.var_exprs();
                    SuperNumber::scalar(q, Expr::bump(&coords, &centre, radius))
                }
                _ => return Err(perr(at, format!("unknown function '{name}'"))),
            }
        }
    })
}

/// Evaluates the tree to an ordinary function of the even coordinates.
pub fn eval_scalar(ast: &Ast, scope: &Scope) -> Result<Expr> {
    let mut s = scope.clone();
    s.odd_allowed = false;
    Ok(eval_super(ast, &s)?.body())
}

/// Evaluates a numeric expression.
pub fn eval_number(ast: &Ast, scope: &Scope) -> Result<f64> {
    let mut s = scope.clone();
    s.chart = None;
    let e = eval_scalar(ast, &s)?;
    e.as_const().ok_or_else(|| perr(0, "expected a number".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::Region;

    #[test]
    fn precedence_and_numbers() {
        let s = Scope::numeric(&HashMap::new());
        let v = |t: &str| eval_number(&parse(t).unwrap(), &s).unwrap();
        assert_eq!(v("1 + 2*3^2"), 19.0);
        assert_eq!(v("-2^2"), -4.0);
        assert_eq!(v("2^3^2"), 512.0);
        assert_eq!(v("(1+2)*4/8"), 1.5);
        assert_eq!(v("1.5e2 + .5"), 150.5);
        assert!((v("sqrt(16) + cos(pi)") - 3.0).abs() < 1e-15);
    }

    #[test]
    fn errors_carry_columns() {
        match parse("1 + * 2") {
            Err(Error::Parse { col, .. }) => assert_eq!(col, 4),
            other => panic!("{other:?}"),
        }
        match parse("sin(u1") {
            Err(Error::Parse { col, .. }) => assert_eq!(col, 6),
            other => panic!("{other:?}"),
        }
        let s = Scope::numeric(&HashMap::new());
        match eval_number(&parse("2 * foo").unwrap(), &s) {
            Err(Error::Parse { col, msg, .. }) => assert!(col == 4 && msg.contains("foo")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn superfunctions() {
        let chart = Chart::standard("U", 1, 2, Region::cuboid(vec![(0.0, 1.0)])).unwrap();
        let s = Scope::on_chart(&HashMap::new(), &chart, true);
        let f = eval_super(&parse("sin(u1 + xi1*xi2)").unwrap(), &s).unwrap();
        let u = Expr::var("u1");
        let want = &chart.lift(&u.sin()) + &(&chart.coord(1) * &chart.coord(2)).scale(&u.cos());
        assert!(f.max_diff(&want, chart.samples()).unwrap() < 1e-15);
        let g = eval_super(&parse("1/(2 + xi1*xi2)").unwrap(), &s).unwrap();
        assert_eq!(g.coeff(0).as_const(), Some(0.5));
        assert_eq!(g.coeff(3).as_const(), Some(-0.25));
        assert!(eval_super(&parse("sin(xi1)").unwrap(), &s).is_err());
        let scalar = Scope::on_chart(&HashMap::new(), &chart, false);
        assert!(eval_super(&parse("xi1").unwrap(), &scalar).is_err());
    }
}
