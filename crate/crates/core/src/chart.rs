//! Charts, coordinate systems, retractions and morphisms of superdomains.
//!
//! All superfunctions on a chart are [`SuperNumber`]s whose coefficients are
//! expressions in the chart's even variables. Inverting a coordinate change is
//! done by [`solve_images`], a Newton iteration that only uses the body
//! Jacobian; on a superdomain the error gains at least one odd degree per
//! step, so `q + 1` steps are exact.

use crate::berezin::{self, SuperMatrix};
use crate::error::{Error, Result};
use crate::expr::{self, Expr, Point};
use crate::grassmann::{compose_scalar, superderivative, Parity, SuperNumber};
use crate::quadrature::Region;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

/// Sample points per axis used by consistency checks.
const SAMPLES_PER_AXIS: usize = 5;

/// A superdomain chart `U0 x R^{0|q}` with named even variables.
pub struct Chart {
    pub name: String,
    pub vars: Vec<String>,
    pub odd: Vec<String>,
    pub region: Region,
    samples: OnceLock<Vec<Point>>,
}

impl fmt::Debug for Chart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Chart({}: {:?} | {:?})", self.name, self.vars, self.odd)
    }
}

impl Chart {
    pub fn new(name: &str, vars: Vec<String>, odd: Vec<String>, region: Region) -> Result<Arc<Chart>> {
        if region.dim() != vars.len() {
            return Err(Error::Input(format!(
                "chart {name}: region dimension {} differs from p = {}",
                region.dim(),
                vars.len()
            )));
        }
        if odd.len() > 31 {
            return Err(Error::Input("at most 31 odd generators".into()));
        }
        Ok(Arc::new(Chart { name: name.to_string(), vars, odd, region, samples: OnceLock::new() }))
    }

    /// Chart with variables `u1..up` and generators `xi1..xiq`.
    pub fn standard(name: &str, p: usize, q: usize, region: Region) -> Result<Arc<Chart>> {
        Chart::new(
            name,
            (1..=p).map(|i| format!("u{i}")).collect(),
            (1..=q).map(|i| format!("xi{i}")).collect(),
            region,
        )
    }

    pub fn p(&self) -> usize {
        self.vars.len()
    }

    pub fn q(&self) -> usize {
        self.odd.len()
    }

    pub fn dim(&self) -> usize {
        self.p() + self.q()
    }

    /// The underlying ordinary chart (no odd generators).
    pub fn base(&self) -> Arc<Chart> {
        Arc::new(Chart {
            name: format!("{}0", self.name),
            vars: self.vars.clone(),
            odd: vec![],
            region: self.region.clone(),
            samples: OnceLock::new(),
        })
    }

    /// Interior sample points of the region.
    pub fn samples(&self) -> &[Point] {
        self.samples.get_or_init(|| {
            self.region
                .sample_points(&self.vars, SAMPLES_PER_AXIS)
                .expect("region sampling")
        })
    }

    /// The `i`-th standard coordinate as a superfunction.
    pub fn coord(&self, i: usize) -> SuperNumber {
        let q = self.q();
        if i < self.p() {
            SuperNumber::scalar(q, Expr::var(&self.vars[i]))
        } else {
            SuperNumber::generator(q, i - self.p()).expect("coordinate index")
        }
    }

    pub fn coords(&self) -> Vec<SuperNumber> {
        (0..self.dim()).map(|i| self.coord(i)).collect()
    }

    pub fn lift(&self, e: &Expr) -> SuperNumber {
        SuperNumber::scalar(self.q(), e.clone())
    }

    pub fn var_exprs(&self) -> Vec<Expr> {
        self.vars.iter().map(|v| Expr::var(v)).collect()
    }
}

/// `f(images)` for a superfunction `f` written in the standard coordinates
/// named by `vars`, where `images` lists the even then the odd arguments.
pub fn compose(f: &SuperNumber, vars: &[String], images: &[SuperNumber]) -> Result<SuperNumber> {
    let p = vars.len();
    if images.len() != p + f.q() {
        return Err(Error::Input(format!(
            "composition needs {} images, got {}",
            p + f.q(),
            images.len()
        )));
    }
    let q_out = images.first().map(|s| s.q()).unwrap_or(0);
    let (even, odd) = images.split_at(p);
    let mut out = SuperNumber::zero(q_out);
    let mut odd_products: HashMap<u32, SuperNumber> = HashMap::new();
    for (mask, c) in f.terms() {
        let scalar = if even.is_empty() {
            SuperNumber::scalar(q_out, c.clone())
        } else {
            compose_scalar(c, vars, even)?
        };
        let mono = match odd_products.get(&mask) {
            Some(m) => m.clone(),
            None => {
                let mut m = SuperNumber::one(q_out);
                for (j, o) in odd.iter().enumerate() {
                    if mask >> j & 1 == 1 {
                        m = &m * o;
                    }
                }
                odd_products.insert(mask, m.clone());
                m
            }
        };
        out = &out + &(&scalar * &mono);
    }
    Ok(out)
}

/// Finds `I` with `X(I) = target` by nilpotent Newton iteration.
///
/// `x` lists the components of `X` as superfunctions in `vars` (even
/// components first), `target` lives on a chart with `target_q` generators and
/// `body_guess` gives the bodies of the even images. The bodies of
/// `X(body_guess)` and `target` must agree.
pub fn solve_images(
    x: &[SuperNumber],
    vars: &[String],
    target: &[SuperNumber],
    body_guess: &[Expr],
) -> Result<Vec<SuperNumber>> {
    let p = vars.len();
    let n = x.len();
    if target.len() != n || body_guess.len() != p {
        return Err(Error::Input("solve_images: dimension mismatch".into()));
    }
    let qa = n - p;
    let qb = target.first().map(|t| t.q()).unwrap_or(0);
    let guess_map: HashMap<String, Expr> = vars.iter().cloned().zip(body_guess.iter().cloned()).collect();
    let even_jac: Vec<Vec<Expr>> = (0..p)
        .map(|i| (0..p).map(|k| x[k].body().diff(&vars[i])).collect())
        .collect();
    let odd_jac: Vec<Vec<Expr>> = (0..qa)
        .map(|m| (0..qa).map(|l| x[p + l].diff_odd(m).body()).collect())
        .collect();
    let inv_at = |m: &[Vec<Expr>]| -> Result<Vec<Vec<Expr>>> {
        let d = expr::det(m).subst(&guess_map);
        if d.is_zero() {
            return Err(Error::NotInvertible("body Jacobian is singular".into()));
        }
        Ok(expr::inverse(m)
            .into_iter()
            .map(|row| row.into_iter().map(|e| e.subst(&guess_map)).collect())
            .collect())
    };
    let even_inv = inv_at(&even_jac)?;
    let odd_inv = inv_at(&odd_jac)?;
    let mut images: Vec<SuperNumber> = body_guess
        .iter()
        .map(|b| SuperNumber::scalar(qb, b.clone()))
        .chain((0..qa).map(|_| SuperNumber::zero(qb)))
        .collect();
    for _ in 0..=qb + 1 {
        let residual: Vec<SuperNumber> = x
            .iter()
            .zip(target)
            .map(|(xk, tk)| Ok(&compose(xk, vars, &images)? - tk))
            .collect::<Result<_>>()?;
        if residual.iter().all(|r| r.is_zero()) {
            break;
        }
        // delta_i = -sum_k r_k (J^{-1})_{ki}
        for i in 0..p {
            let mut d = SuperNumber::zero(qb);
            for k in 0..p {
                d = &d + &residual[k].scale(&even_inv[k][i]);
            }
            images[i] = &images[i] - &d;
        }
        for m in 0..qa {
            let mut d = SuperNumber::zero(qb);
            for l in 0..qa {
                d = &d + &residual[p + l].scale(&odd_inv[l][m]);
            }
            images[p + m] = &images[p + m] - &d;
        }
    }
    Ok(images)
}

struct CoordInner {
    chart: Arc<Chart>,
    comps: Vec<SuperNumber>,
    inverse: OnceLock<Result<Vec<SuperNumber>>>,
    jacobian_inverse: OnceLock<Result<SuperMatrix>>,
    ber: OnceLock<Result<SuperNumber>>,
    sign: OnceLock<Result<f64>>,
}

/// A coordinate system on a chart: `p` even and `q` odd superfunctions.
#[derive(Clone)]
pub struct CoordSystem(Arc<CoordInner>);

impl fmt::Debug for CoordSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CoordSystem[")?;
        for (i, c) in self.0.comps.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "]")
    }
}

impl CoordSystem {
    pub fn new(chart: &Arc<Chart>, comps: Vec<SuperNumber>) -> Result<CoordSystem> {
        if comps.len() != chart.dim() {
            return Err(Error::Input(format!(
                "coordinate system needs {} components, got {}",
                chart.dim(),
                comps.len()
            )));
        }
        for (i, c) in comps.iter().enumerate() {
            if c.q() != chart.q() {
                return Err(Error::MismatchedGeneratorCount(chart.q(), c.q()));
            }
            let want = if i < chart.p() { Parity::Even } else { Parity::Odd };
            if c.parity() != want && !(c.is_zero() && want == Parity::Even) {
                return Err(Error::Parity(format!("coordinate {i} has wrong parity: {c}")));
            }
        }
        Ok(CoordSystem(Arc::new(CoordInner {
            chart: chart.clone(),
            comps,
            inverse: OnceLock::new(),
            jacobian_inverse: OnceLock::new(),
            ber: OnceLock::new(),
            sign: OnceLock::new(),
        })))
    }

    pub fn standard(chart: &Arc<Chart>) -> CoordSystem {
        CoordSystem::new(chart, chart.coords()).expect("standard coordinates")
    }

    pub fn chart(&self) -> &Arc<Chart> {
        &self.0.chart
    }

    pub fn comps(&self) -> &[SuperNumber] {
        &self.0.comps
    }

    pub fn even(&self) -> &[SuperNumber] {
        &self.0.comps[..self.0.chart.p()]
    }

    pub fn odd(&self) -> &[SuperNumber] {
        &self.0.comps[self.0.chart.p()..]
    }

    /// Parity of the `i`-th coordinate.
    pub fn parity_of(&self, i: usize) -> u32 {
        u32::from(i >= self.0.chart.p())
    }

    pub fn same_as(&self, other: &CoordSystem) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
            || (Arc::ptr_eq(&self.0.chart, &other.0.chart) && self.0.comps == other.0.comps)
    }

    pub fn is_standard(&self) -> bool {
        self.0.comps == self.0.chart.coords()
    }

    /// Whether the even bodies are exactly the chart variables.
    pub fn has_identity_body(&self) -> bool {
        self.even().iter().zip(&self.0.chart.vars).all(|(c, v)| c.body() == Expr::var(v))
    }

    /// Jacobian with entries `d x_j / d z_i` (rows: standard coordinates).
    pub fn jacobian(&self) -> Result<SuperMatrix> {
        let chart = &self.0.chart;
        let n = chart.dim();
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = Vec::with_capacity(n);
            for x in &self.0.comps {
                row.push(superderivative(x, i, &chart.vars)?);
            }
            rows.push(row);
        }
        SuperMatrix::new(chart.p(), chart.q(), rows)
    }

    /// Berezinian of the coordinate change with respect to the standard one.
    pub fn ber(&self) -> Result<SuperNumber> {
        self.0
            .ber
            .get_or_init(|| berezin::ber(&self.jacobian()?))
            .clone()
    }

    /// Constant sign of the body determinant of the even block.
    pub fn orientation(&self) -> Result<f64> {
        self.0
            .sign
            .get_or_init(|| berezin::body_det_sign(&self.jacobian()?, self.0.chart.samples()))
            .clone()
    }

    /// Images `c` with `x(c) = z`, i.e. the standard coordinates written in `x`.
    pub fn inverse_images(&self) -> Result<Vec<SuperNumber>> {
        self.0
            .inverse
            .get_or_init(|| {
                let chart = &self.0.chart;
                if !self.has_identity_body() {
                    return Err(Error::NotInvertible(
                        "inverse images are only computed for systems with identity body".into(),
                    ));
                }
                solve_images(&self.0.comps, &chart.vars, &chart.coords(), &chart.var_exprs())
            })
            .clone()
    }

    /// Expresses `f` as a function of these coordinates.
    pub fn to_own(&self, f: &SuperNumber) -> Result<SuperNumber> {
        compose(f, &self.0.chart.vars, &self.inverse_images()?)
    }

    /// Inverse of [`CoordSystem::to_own`].
    pub fn from_own(&self, big_f: &SuperNumber) -> Result<SuperNumber> {
        compose(big_f, &self.0.chart.vars, &self.0.comps)
    }

    /// Entries `d z_k / d x_i`.
    pub fn jacobian_inverse(&self) -> Result<SuperMatrix> {
        self.0
            .jacobian_inverse
            .get_or_init(|| self.jacobian()?.inverse())
            .clone()
    }

    /// `d f / d x_i` through the chain rule.
    pub fn derivative_chain(&self, f: &SuperNumber, i: usize) -> Result<SuperNumber> {
        let m = self.jacobian_inverse()?;
        let chart = &self.0.chart;
        let mut out = SuperNumber::zero(chart.q());
        for k in 0..chart.dim() {
            let a = m.get(i, k);
            if a.is_zero() {
                continue;
            }
            out = &out + &(a * &superderivative(f, k, &chart.vars)?);
        }
        Ok(out)
    }

    /// `d f / d x_i`.
    pub fn derivative(&self, f: &SuperNumber, i: usize) -> Result<SuperNumber> {
        self.derivative_multi(f, &unit(self.0.chart.dim(), i))
    }

    /// `d_{x_n}^{j_n} ... d_{x_1}^{j_1} f` (the first coordinate acts first).
    pub fn derivative_multi(&self, f: &SuperNumber, j: &[u32]) -> Result<SuperNumber> {
        let chart = &self.0.chart;
        if j.len() != chart.dim() {
            return Err(Error::Input("multi-index length".into()));
        }
        if j[chart.p()..].iter().any(|&k| k > 1) {
            return Ok(SuperNumber::zero(chart.q()));
        }
        if self.is_standard() {
            return standard_multi(f, j, &chart.vars);
        }
        if self.has_identity_body() {
            let big_f = self.to_own(f)?;
            return self.from_own(&standard_multi(&big_f, j, &chart.vars)?);
        }
        let mut g = f.clone();
        for (i, &k) in j.iter().enumerate() {
            for _ in 0..k {
                g = self.derivative_chain(&g, i)?;
            }
        }
        Ok(g)
    }
}

fn unit(n: usize, i: usize) -> Vec<u32> {
    let mut j = vec![0; n];
    j[i] = 1;
    j
}

fn standard_multi(f: &SuperNumber, j: &[u32], vars: &[String]) -> Result<SuperNumber> {
    let mut g = f.clone();
    for (i, &k) in j.iter().enumerate() {
        for _ in 0..k {
            g = superderivative(&g, i, vars)?;
        }
    }
    Ok(g)
}

/// A retraction, recorded through the pullbacks of the base coordinates.
#[derive(Clone, Debug)]
pub struct Retraction {
    chart: Arc<Chart>,
    images: Vec<SuperNumber>,
}

impl Retraction {
    pub fn new(chart: &Arc<Chart>, images: Vec<SuperNumber>) -> Result<Retraction> {
        if images.len() != chart.p() {
            return Err(Error::Input("retraction needs p images".into()));
        }
        let mut exact = Vec::with_capacity(images.len());
        for (img, v) in images.into_iter().zip(&chart.vars) {
            if img.parity() != Parity::Even {
                return Err(Error::Parity(format!("retraction image {img} is not even")));
            }
            let var = Expr::var(v);
            let body = img.body();
            if body != var {
                // bodies produced by solvers may equal the variable only numerically
                for pt in chart.samples() {
                    let d = body.eval(pt)? - pt[v];
                    if d.abs() > 1e-10 * (1.0 + pt[v].abs()) {
                        return Err(Error::BodyMismatch(format!("body of {img} is not {v}")));
                    }
                }
            }
            exact.push(&chart.lift(&var) + &img.soul());
        }
        Ok(Retraction { chart: chart.clone(), images: exact })
    }

    pub fn canonical(chart: &Arc<Chart>) -> Retraction {
        Retraction { chart: chart.clone(), images: chart.coords()[..chart.p()].to_vec() }
    }

    /// The retraction whose base coordinates are the even part of `coords`.
    pub fn associated(coords: &CoordSystem) -> Result<Retraction> {
        let chart = coords.chart();
        if coords.has_identity_body() {
            return Retraction::new(chart, coords.even().to_vec());
        }
        // even coordinates are b(a) for a base system b; solve b(a) = x_even
        let bodies: Vec<SuperNumber> = coords.even().iter().map(|c| chart.lift(&c.body())).collect();
        let x: Vec<SuperNumber> = bodies.into_iter().chain(chart.coords()[chart.p()..].iter().cloned()).collect();
        let target: Vec<SuperNumber> = coords.even().iter().cloned().chain(chart.coords()[chart.p()..].iter().cloned()).collect();
        check_base_system(chart, &x[..chart.p()])?;
        let a = solve_images(&x, &chart.vars, &target, &chart.var_exprs())?;
        Retraction::new(chart, a[..chart.p()].to_vec())
    }

    pub fn chart(&self) -> &Arc<Chart> {
        &self.chart
    }

    pub fn images(&self) -> &[SuperNumber] {
        &self.images
    }

    pub fn is_canonical(&self) -> bool {
        self.images.iter().all(|i| i.soul().is_zero())
    }

    /// `γ*(g)` for a function `g` of the base variables.
    pub fn pullback(&self, g: &Expr) -> Result<SuperNumber> {
        compose_scalar(g, &self.chart.vars, &self.images)
    }

    /// The adapted coordinate system `(γ*(u0), ξ)`.
    pub fn coords(&self) -> CoordSystem {
        let chart = &self.chart;
        let comps = self.images.iter().cloned().chain(chart.coords()[chart.p()..].iter().cloned()).collect();
        CoordSystem::new(chart, comps).expect("retraction coordinates")
    }

    /// Coefficients of `f` in the odd coordinates of `(γ*(u0), ξ)`.
    pub fn decompose(&self, f: &SuperNumber) -> Result<SuperNumber> {
        if self.is_canonical() {
            return Ok(f.clone());
        }
        self.coords().to_own(f)
    }
}

fn check_base_system(chart: &Arc<Chart>, bodies: &[SuperNumber]) -> Result<()> {
    let m: Vec<Vec<Expr>> = chart
        .vars
        .iter()
        .map(|v| bodies.iter().map(|b| b.body().diff(v)).collect())
        .collect();
    let d = expr::det(&m);
    for pt in chart.samples() {
        let v = d.eval(pt)?;
        if v.abs() < 1e-12 || !v.is_finite() {
            return Err(Error::BodyMismatch(format!("even bodies are not a coordinate system near {pt:?}")));
        }
    }
    Ok(())
}

/// A morphism `source -> target`, recorded through the pullbacks of the
/// target's standard coordinates.
#[derive(Clone, Debug)]
pub struct Morphism {
    pub source: Arc<Chart>,
    pub target: Arc<Chart>,
    images: Vec<SuperNumber>,
}

impl Morphism {
    pub fn new(source: &Arc<Chart>, target: &Arc<Chart>, images: Vec<SuperNumber>) -> Result<Morphism> {
        if images.len() != target.dim() {
            return Err(Error::Input(format!(
                "morphism needs {} images, got {}",
                target.dim(),
                images.len()
            )));
        }
        for (i, img) in images.iter().enumerate() {
            if img.q() != source.q() {
                return Err(Error::MismatchedGeneratorCount(source.q(), img.q()));
            }
            let ok = if i < target.p() {
                img.parity() == Parity::Even
            } else {
                img.parity() == Parity::Odd || img.is_zero()
            };
            if !ok {
                return Err(Error::Parity(format!("image {i} has wrong parity")));
            }
        }
        let m = Morphism { source: source.clone(), target: target.clone(), images };
        m.check_range()?;
        Ok(m)
    }

    /// Bodies of the even images must land in the target region (checked at
    /// sample points; mapped target regions are not checked).
    fn check_range(&self) -> Result<()> {
        let region = &self.target.region;
        if region.map.is_some() {
            return Ok(());
        }
        let bodies: Vec<Expr> = self.images[..self.target.p()].iter().map(|i| i.body()).collect();
        let masks = expr::Compiled::new(&region.mask, &self.target.vars)?;
        for pt in self.source.samples() {
            let y: Vec<f64> = bodies.iter().map(|b| b.eval(pt)).collect::<Result<_>>()?;
            let inside_box = y
                .iter()
                .zip(&region.bounds)
                .all(|(v, (a, b))| *v >= *a - 1e-12 && *v <= *b + 1e-12);
            let inside_mask = region.mask.is_empty() || masks.eval(&y)?.iter().all(|m| *m >= -1e-12);
            if !inside_box || !inside_mask {
                return Err(Error::Input(format!("morphism body leaves the target region at {pt:?}")));
            }
        }
        Ok(())
    }

    pub fn identity(chart: &Arc<Chart>) -> Morphism {
        Morphism { source: chart.clone(), target: chart.clone(), images: chart.coords() }
    }

    pub fn images(&self) -> &[SuperNumber] {
        &self.images
    }

    /// `φ*(f)` for a superfunction on the target.
    pub fn pullback(&self, f: &SuperNumber) -> Result<SuperNumber> {
        compose(f, &self.target.vars, &self.images)
    }

    pub fn pullback_coords(&self, coords: &CoordSystem) -> Result<CoordSystem> {
        let comps = coords.comps().iter().map(|c| self.pullback(c)).collect::<Result<_>>()?;
        CoordSystem::new(&self.source, comps)
    }

    /// `self ∘ first`, i.e. `first` is applied first.
    pub fn after(&self, first: &Morphism) -> Result<Morphism> {
        let images = self.images.iter().map(|i| first.pullback(i)).collect::<Result<_>>()?;
        Ok(Morphism { source: first.source.clone(), target: self.target.clone(), images })
    }

    /// The morphism `U -> U` with `φ*(x) = y` for two coordinate systems.
    pub fn between(x: &CoordSystem, y: &CoordSystem) -> Result<Morphism> {
        let chart = x.chart();
        if !x.has_identity_body() {
            return Err(Error::NotInvertible("source system must have identity body".into()));
        }
        let images = solve_images(x.comps(), &chart.vars, y.comps(), &y.even().iter().map(|c| c.body()).collect::<Vec<_>>())?;
        Ok(Morphism { source: chart.clone(), target: chart.clone(), images })
    }

    /// Pullback of a retraction on the target along this morphism.
    pub fn pullback_retraction(&self, gamma: &Retraction) -> Result<Retraction> {
        if !Arc::ptr_eq(gamma.chart(), &self.target) {
            return Err(Error::Input("retraction lives on another chart".into()));
        }
        let src = &self.source;
        let bodies: Vec<SuperNumber> = self.images[..self.target.p()].iter().map(|i| src.lift(&i.body())).collect();
        check_base_system(src, &bodies).map_err(|e| Error::NotInvertible(e.to_string()))?;
        // (φ*γ)*(b) = φ*(γ*(v0)) with b the body of φ
        let target: Vec<SuperNumber> = gamma
            .images()
            .iter()
            .map(|g| self.pullback(g))
            .collect::<Result<Vec<_>>>()?;
        let odd: Vec<SuperNumber> = src.coords()[src.p()..].to_vec();
        let x: Vec<SuperNumber> = bodies.into_iter().chain(odd.iter().cloned()).collect();
        let t: Vec<SuperNumber> = target.into_iter().chain(odd).collect();
        let a = solve_images(&x, &src.vars, &t, &src.var_exprs())?;
        Retraction::new(src, a[..src.p()].to_vec())
    }
}
