//! Supermanifolds with corners: boundary faces, restriction of densities to
//! faces and the change-of-retraction formula with boundary terms.

use crate::berezin::{scaled_power, BerezinDensity, Convention, DiffOp, Kind};
use crate::chart::{solve_images, Chart, CoordSystem, Morphism, Retraction};
use crate::error::{Error, Result};
use crate::expr::{self, Expr, Point};
use crate::grassmann::SuperNumber;
use crate::quadrature::{integrate_volume, QuadratureRule, Region};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::HashMap;
use std::sync::Arc;

const FACE_TOL: f64 = 1e-9;

/// A boundary face `H0 = {ρ_i = 0 (i in S), ρ_j > 0 (j not in S)}`.
#[derive(Clone, Debug)]
pub struct Face {
    /// Indices `S` of the vanishing boundary functions, ascending.
    pub vanish: Vec<usize>,
    /// Face chart: `p - k` even variables, same odd dimension as the main chart.
    pub chart: Arc<Chart>,
    /// Parametrization `t -> P(t)` into the main chart's base variables.
    pub param: Vec<Expr>,
    /// Complementary base functions `ũ0` with `ũ0(P(t)) = t`.
    pub complement: Vec<Expr>,
}

impl Face {
    pub fn codim(&self) -> usize {
        self.vanish.len()
    }

    fn param_map(&self, main: &Chart) -> HashMap<String, Expr> {
        main.vars.iter().cloned().zip(self.param.iter().cloned()).collect()
    }

    /// Base points `P(t)` for the face's sample points.
    pub fn base_samples(&self, main: &Chart) -> Result<Vec<Point>> {
        self.chart
            .samples()
            .iter()
            .map(|t| {
                let vals: Vec<f64> = self.param.iter().map(|e| e.eval(t)).collect::<Result<_>>()?;
                Ok(main.vars.iter().cloned().zip(vals).collect())
            })
            .collect()
    }
}

/// Boundary functions on a chart together with the declared faces.
#[derive(Clone, Debug)]
pub struct CornerStructure {
    pub chart: Arc<Chart>,
    pub rho: Vec<Expr>,
    pub faces: Vec<Face>,
}

impl CornerStructure {
    pub fn new(chart: &Arc<Chart>, rho: Vec<Expr>, faces: Vec<Face>) -> Result<CornerStructure> {
        let p = chart.p();
        for (idx, face) in faces.iter().enumerate() {
            let k = face.codim();
            if face.vanish.is_empty() || face.vanish.iter().any(|&i| i >= rho.len()) {
                return Err(Error::Input(format!("face {idx}: invalid vanishing set {:?}", face.vanish)));
            }
            if face.vanish.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Input(format!("face {idx}: vanishing set must be strictly ascending")));
            }
            if k > p || face.param.len() != p || face.complement.len() != p - k || face.chart.p() != p - k {
                return Err(Error::Input(format!("face {idx}: dimension mismatch")));
            }
            if face.chart.q() != chart.q() {
                return Err(Error::MismatchedGeneratorCount(chart.q(), face.chart.q()));
            }
            let pm = face.param_map(chart);
            let tvars = &face.chart.vars;
            let grad: Vec<Vec<Expr>> =
                face.vanish.iter().map(|&i| chart.vars.iter().map(|v| rho[i].diff(v)).collect()).collect();
            let gram: Vec<Vec<Expr>> = (0..k)
                .map(|a| (0..k).map(|b| Expr::add_all((0..p).map(|l| &grad[a][l] * &grad[b][l]))).collect())
                .collect();
            let gram_det = expr::det(&gram).subst(&pm);
            for t in face.chart.samples() {
                for (i, r) in rho.iter().enumerate() {
                    let v = r.subst(&pm).eval(t)?;
                    let on = face.vanish.contains(&i);
                    if on && v.abs() > FACE_TOL {
                        return Err(Error::Input(format!("face {idx}: boundary function {i} is {v} on the face")));
                    }
                    if !on && v <= 0.0 {
                        return Err(Error::Input(format!("face {idx}: boundary function {i} is not positive on the face")));
                    }
                }
                for (c, tv) in face.complement.iter().zip(tvars) {
                    let v = c.subst(&pm).eval(t)?;
                    if (v - t[tv]).abs() > FACE_TOL {
                        return Err(Error::Input(format!("face {idx}: complement does not invert the parametrization")));
                    }
                }
                if gram_det.eval(t)? <= FACE_TOL {
                    return Err(Error::Input(format!("face {idx}: boundary functions are not independent")));
                }
            }
        }
        Ok(CornerStructure { chart: chart.clone(), rho, faces })
    }

    /// All multi-indices supported exactly on `S` with total order at most `q/2`.
    pub fn index_set(&self, face: usize) -> Vec<Vec<u32>> {
        let n = self.rho.len();
        let s = &self.faces[face].vanish;
        let max = (self.chart.q() / 2) as u32;
        let mut out = Vec::new();
        for sub in crate::berezin::multi_indices(s.len(), max) {
            if sub.contains(&0) {
                continue;
            }
            let mut j = vec![0u32; n];
            for (a, &i) in s.iter().enumerate() {
                j[i] = sub[a];
            }
            out.push(j);
        }
        out
    }

    /// `τ = γ*(ρ)`
    pub fn tau(&self, gamma: &Retraction) -> Result<Vec<SuperNumber>> {
        self.rho.iter().map(|r| gamma.pullback(r)).collect()
    }

    /// Adapted coordinates `(τ_S, γ*(ũ0), ξ)` and the face immersion.
    pub fn geometry(&self, face: usize, gamma: &Retraction) -> Result<FaceGeometry> {
        let tau = self.tau(gamma)?;
        let f = &self.faces[face];
        let even: Vec<SuperNumber> = f
            .vanish
            .iter()
            .map(|&i| Ok(tau[i].clone()))
            .chain(f.complement.iter().map(|c| gamma.pullback(c)))
            .collect::<Result<_>>()?;
        let chart = &self.chart;
        let comps = even.into_iter().chain(chart.coords()[chart.p()..].iter().cloned()).collect();
        FaceGeometry::new(self, face, CoordSystem::new(chart, comps)?)
    }

    /// Boundary derivations `A_i = ∇ρ_i / |∇ρ_i|^2` on the base chart,
    /// checked for `A_i(ρ_l) = δ_il` on every face where both vanish.
    pub fn default_base_derivations(&self) -> Result<Vec<Vec<Expr>>> {
        let vars = &self.chart.vars;
        let fields: Vec<Vec<Expr>> = self
            .rho
            .iter()
            .map(|r| {
                let g: Vec<Expr> = vars.iter().map(|v| r.diff(v)).collect();
                let n2 = Expr::add_all(g.iter().map(|x| x * x));
                g.iter().map(|x| x / &n2).collect()
            })
            .collect();
        self.check_base_derivations(&fields)?;
        Ok(fields)
    }

    pub fn check_base_derivations(&self, fields: &[Vec<Expr>]) -> Result<()> {
        let vars = &self.chart.vars;
        for face in &self.faces {
            let pts = face.base_samples(&self.chart)?;
            for &i in &face.vanish {
                for &l in &face.vanish {
                    let a = Expr::add_all(vars.iter().zip(&fields[i]).map(|(v, c)| c * &self.rho[l].diff(v)));
                    let want = if i == l { 1.0 } else { 0.0 };
                    for pt in &pts {
                        if (a.eval(pt)? - want).abs() > 1e-9 {
                            return Err(Error::Input(format!(
                                "boundary derivation {i} applied to boundary function {l} is not {want} on a face"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Lifts base vector fields to `Σ γ*(a_l) ∂/∂u_l` in `(γ*(u0), ξ)`.
    pub fn lift_derivations(&self, fields: &[Vec<Expr>], gamma: &Retraction) -> Result<Vec<DiffOp>> {
        let coords = gamma.coords();
        let q = self.chart.q();
        fields
            .iter()
            .map(|a| {
                let mut coeffs: Vec<SuperNumber> = a.iter().map(|c| gamma.pullback(c)).collect::<Result<_>>()?;
                coeffs.extend((0..q).map(|_| SuperNumber::zero(q)));
                DiffOp::vector_field(&coords, coeffs)
            })
            .collect()
    }

    /// Checks `D_i(τ_l) = δ_il` at the points of every face where both vanish.
    pub fn check_superderivations(&self, d: &[DiffOp], gamma: &Retraction) -> Result<()> {
        if d.len() != self.rho.len() {
            return Err(Error::Input("one boundary derivation per boundary function is required".into()));
        }
        let tau = self.tau(gamma)?;
        let q = self.chart.q();
        for face in &self.faces {
            let pts = face.base_samples(&self.chart)?;
            for &i in &face.vanish {
                for &l in &face.vanish {
                    let v = d[i].apply(&tau[l])?;
                    let want = SuperNumber::constant(q, if i == l { 1.0 } else { 0.0 });
                    if v.max_diff(&want, &pts)? > 1e-9 {
                        return Err(Error::Input(format!(
                            "boundary superderivation {i} applied to boundary function {l} is not {}",
                            if i == l { 1 } else { 0 }
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Warns if `ω` does not vanish on region boundary points off the faces.
    pub fn decay_warnings(&self, omega: &BerezinDensity) -> Result<Vec<String>> {
        let std = omega.in_standard()?;
        let chart = &self.chart;
        let pts = chart.region.boundary_points(&chart.vars, 6)?;
        let mut worst: f64 = 0.0;
        for pt in &pts {
            let on_face = self.rho.iter().any(|r| r.eval(pt).map(|v| v.abs() < 1e-8).unwrap_or(false));
            if on_face {
                continue;
            }
            for v in std.coeff.eval(pt)?.values() {
                worst = worst.max(v.abs());
            }
        }
        Ok(if worst > 1e-10 {
            vec![format!("integrand does not decay on the region boundary away from the faces (max |coefficient| {worst:.3e})")]
        } else {
            vec![]
        })
    }
}

/// Adapted coordinates `x = (τ_S, x̃)` for a face and its immersion.
#[derive(Clone, Debug)]
pub struct FaceGeometry {
    pub face: usize,
    pub adapted: CoordSystem,
    pub immersion: Morphism,
}

impl FaceGeometry {
    /// Solves `ι*(τ_S) = 0`, `ι*(x̃) = (t, θ)` for the immersion.
    pub fn new(corners: &CornerStructure, face: usize, adapted: CoordSystem) -> Result<FaceGeometry> {
        let f = &corners.faces[face];
        let main = &corners.chart;
        let fc = &f.chart;
        let k = f.codim();
        let q = fc.q();
        let target: Vec<SuperNumber> = (0..k)
            .map(|_| SuperNumber::zero(q))
            .chain(fc.coords())
            .collect();
        let pm = f.param_map(main);
        for t in fc.samples() {
            for (c, want) in adapted.comps().iter().zip(&target) {
                let v = c.body().subst(&pm).eval(t)?;
                let w = want.body().eval(t)?;
                if (v - w).abs() > FACE_TOL {
                    return Err(Error::NoAdaptedCoordinates(format!(
                        "face {face}: adapted coordinates do not restrict to the face chart"
                    )));
                }
            }
        }
        let images = solve_images(adapted.comps(), &main.vars, &target, &f.param)
            .map_err(|e| Error::NoAdaptedCoordinates(format!("face {face}: {e}")))?;
        let immersion = Morphism::new(fc, main, images)?;
        Ok(FaceGeometry { face, adapted, immersion })
    }

    /// `ω|_{H,τ} = ι*(f) |D ι*(x̃)|` with `ω = f |Dx|`.
    pub fn restrict(&self, omega: &BerezinDensity) -> Result<BerezinDensity> {
        let local = omega.transform(&self.adapted)?;
        let coeff = self.immersion.pullback(&local.coeff)?;
        BerezinDensity::new(omega.kind, coeff, &CoordSystem::standard(&self.immersion.source))
    }

    /// Induced retraction on the face: `γ_H*(t) = ι*(γ*(ũ0))`.
    pub fn induced_retraction(&self, corners: &CornerStructure, gamma: &Retraction) -> Result<Retraction> {
        let f = &corners.faces[self.face];
        let images = f
            .complement
            .iter()
            .map(|c| self.immersion.pullback(&gamma.pullback(c)?))
            .collect::<Result<_>>()?;
        Retraction::new(&f.chart, images)
    }
}

/// Classical restriction of a base density `g |du0|` to a face, as a
/// function of the face variables.
pub fn classical_restriction(corners: &CornerStructure, face: usize, g: &Expr) -> Result<Expr> {
    let f = &corners.faces[face];
    let base = corners.chart.base();
    let mut even: Vec<Expr> = f.vanish.iter().map(|&i| corners.rho[i].clone()).collect();
    even.extend(f.complement.iter().cloned());
    let m: Vec<Vec<Expr>> = base.vars.iter().map(|v| even.iter().map(|e| e.diff(v)).collect()).collect();
    // |du0| = |det ∂u0/∂(ρ_S, ũ0)| |d(ρ_S, ũ0)|
    let jac = expr::det(&m);
    let sign = crate::berezin::body_det_sign(
        &crate::berezin::SuperMatrix::new(
            base.p(),
            0,
            m.iter().map(|r| r.iter().map(|e| SuperNumber::scalar(0, e.clone())).collect()).collect(),
        )?,
        &f.base_samples(&corners.chart)?,
    )?;
    let pm = f.param_map(&corners.chart);
    Ok((&(g / &jac) * &Expr::constant(sign)).subst(&pm))
}

/// One boundary summand `(H, j)`.
#[derive(Debug, Clone, Serialize)]
pub struct BoundaryTerm {
    pub face: usize,
    pub vanish: Vec<usize>,
    pub index: Vec<u32>,
    pub reduced: Vec<u32>,
    pub sign: f64,
    pub value: f64,
}

/// Result of the change-of-retraction formula on a region with corners.
#[derive(Debug, Clone, Serialize)]
pub struct CornerReport {
    /// `∫_{(N,γ')} ω`
    pub direct: f64,
    /// `∫_{(N,γ)} ω`
    pub bulk: f64,
    pub terms: Vec<BoundaryTerm>,
    pub boundary_total: f64,
    pub residual: f64,
    /// Same boundary terms computed from fibre integrals and base derivations.
    pub base_terms: Vec<BoundaryTerm>,
    pub base_boundary_total: f64,
    pub base_residual: f64,
    /// Number of summands that are not structurally zero, bulk included.
    pub nonzero_summands: usize,
    pub warnings: Vec<String>,
}

/// Symbolic data for a boundary summand before integration.
struct Planned {
    face: usize,
    index: Vec<u32>,
    reduced: Vec<u32>,
    omega_j: BerezinDensity,
}

/// Inputs of the change-of-retraction formula with corners.
pub struct CornerProblem<'a> {
    pub corners: &'a CornerStructure,
    pub omega: &'a BerezinDensity,
    pub gamma: &'a Retraction,
    pub gamma_p: &'a Retraction,
    /// Boundary superderivations for `γ*(ρ)`.
    pub derivations: &'a [DiffOp],
    /// Base boundary derivations (vector field components) for `ρ`.
    pub base_derivations: &'a [Vec<Expr>],
}

fn reduce(j: &[u32]) -> Vec<u32> {
    j.iter().map(|&x| x.saturating_sub(1)).collect()
}

fn as_density(omega: &BerezinDensity) -> Result<BerezinDensity> {
    match omega.kind {
        Kind::Density => Ok(omega.clone()),
        Kind::Form => {
            let s = omega.in_standard()?;
            BerezinDensity::new(Kind::Density, s.coeff, &s.coords)
        }
    }
}

impl<'a> CornerProblem<'a> {
    fn plan(&self) -> Result<Vec<Planned>> {
        let omega = as_density(self.omega)?;
        let tau = self.corners.tau(self.gamma)?;
        let tau_p = self.corners.tau(self.gamma_p)?;
        let mut out = Vec::new();
        for face in 0..self.corners.faces.len() {
            for j in self.corners.index_set(face) {
                let w = scaled_power(&tau_p, &tau, &j);
                out.push(Planned { face, reduced: reduce(&j), index: j, omega_j: omega.mul_left(&w) });
            }
        }
        Ok(out)
    }

    /// Bulk plus the boundary summands that are not structurally zero.
    pub fn count_terms(&self) -> Result<usize> {
        Ok(1 + self.plan()?.iter().filter(|t| !t.omega_j.coeff.is_zero()).count())
    }

    fn act_reduced(&self, omega: &BerezinDensity, reduced: &[u32], conv: &Convention) -> Result<BerezinDensity> {
        let mut w = omega.clone();
        for (i, &k) in reduced.iter().enumerate() {
            for _ in 0..k {
                w = self.derivations[i].act(&w, conv)?;
            }
        }
        Ok(w)
    }

    /// `∫_{(H,γ_H)} (ω_j . D^{j↓})|_{H,γ*(ρ)}` with its sign.
    fn super_term(&self, t: &Planned, rule: &QuadratureRule, conv: &Convention) -> Result<BoundaryTerm> {
        let chart = &self.corners.chart;
        let face = &self.corners.faces[t.face];
        let (p, q, k) = (chart.p(), chart.q(), face.codim());
        let sign = crate::berezin::sign(conv.s(p, q) + conv.s(p - k, q));
        let value = if t.omega_j.coeff.is_zero() {
            0.0
        } else {
            let geom = self.corners.geometry(t.face, self.gamma)?;
            let acted = self.act_reduced(&t.omega_j, &t.reduced, conv)?;
            let restricted = geom.restrict(&acted)?;
            let gamma_h = geom.induced_retraction(self.corners, self.gamma)?;
            sign * restricted.integrate(&gamma_h, rule, conv)?
        };
        Ok(BoundaryTerm { face: t.face, vanish: face.vanish.clone(), index: t.index.clone(), reduced: t.reduced.clone(), sign, value })
    }

    /// `∫_{H0} ((γ_! ω_j) . A^{j↓})|_{H0,ρ}`.
    fn base_term(&self, t: &Planned, rule: &QuadratureRule, conv: &Convention) -> Result<BoundaryTerm> {
        let chart = &self.corners.chart;
        let face = &self.corners.faces[t.face];
        let value = if t.omega_j.coeff.is_zero() {
            0.0
        } else {
            let base = chart.base();
            let g = t.omega_j.fibre_integral(self.gamma, conv)?;
            let std = CoordSystem::standard(&base);
            let mut w = BerezinDensity::new(Kind::Density, SuperNumber::scalar(0, g), &std)?;
            for (i, &kk) in t.reduced.iter().enumerate() {
                let coeffs = self.base_derivations[i].iter().map(|c| SuperNumber::scalar(0, c.clone())).collect();
                let a = DiffOp::vector_field(&std, coeffs)?;
                for _ in 0..kk {
                    w = a.act(&w, conv)?;
                }
            }
            let h = classical_restriction(self.corners, t.face, &w.coeff.body())?;
            integrate_volume(&h, &face.chart.vars, &face.chart.region, rule)?
        };
        Ok(BoundaryTerm { face: t.face, vanish: face.vanish.clone(), index: t.index.clone(), reduced: t.reduced.clone(), sign: 1.0, value })
    }

    pub fn validate(&self) -> Result<()> {
        self.corners.check_superderivations(self.derivations, self.gamma)?;
        self.corners.check_base_derivations(self.base_derivations)
    }

    pub fn run(&self, rule: &QuadratureRule, conv: &Convention) -> Result<CornerReport> {
        self.validate()?;
        let omega = as_density(self.omega)?;
        let direct = omega.integrate(self.gamma_p, rule, conv)?;
        let bulk = omega.integrate(self.gamma, rule, conv)?;
        let plan = self.plan()?;
        let nonzero_summands = 1 + plan.iter().filter(|t| !t.omega_j.coeff.is_zero()).count();
        let terms: Vec<BoundaryTerm> =
            plan.par_iter().map(|t| self.super_term(t, rule, conv)).collect::<Result<_>>()?;
        let base_terms: Vec<BoundaryTerm> =
            plan.par_iter().map(|t| self.base_term(t, rule, conv)).collect::<Result<_>>()?;
        let boundary_total: f64 = terms.iter().map(|t| t.value).sum();
        let base_boundary_total: f64 = base_terms.iter().map(|t| t.value).sum();
        Ok(CornerReport {
            direct,
            bulk,
            residual: (direct - bulk - boundary_total).abs(),
            base_residual: (direct - bulk - base_boundary_total).abs(),
            terms,
            boundary_total,
            base_terms,
            base_boundary_total,
            nonzero_summands,
            warnings: self.corners.decay_warnings(self.omega)?,
        })
    }
}

/// Face over a box region: `{u_axis = value}` with the remaining variables as
/// face coordinates.
pub fn box_face(
    main: &Arc<Chart>,
    vanish: Vec<usize>,
    fixed: &[(usize, f64)],
    face_vars: Vec<String>,
) -> Result<Face> {
    let p = main.p();
    let free: Vec<usize> = (0..p).filter(|a| fixed.iter().all(|(b, _)| b != a)).collect();
    if free.len() != face_vars.len() {
        return Err(Error::Input("box face: wrong number of face variables".into()));
    }
    let mut param = vec![Expr::zero(); p];
    for (a, v) in fixed {
        param[*a] = Expr::constant(*v);
    }
    let mut bounds = Vec::new();
    let mut complement = Vec::new();
    for (a, t) in free.iter().zip(&face_vars) {
        param[*a] = Expr::var(t);
        bounds.push(main.region.bounds[*a]);
        complement.push(Expr::var(&main.vars[*a]));
    }
    let region = if bounds.is_empty() { Region::point() } else { Region::cuboid(bounds) };
    let chart = Chart::new(&format!("{}_face", main.name), face_vars, main.odd.clone(), region)?;
    Ok(Face { vanish, chart, param, complement })
}
