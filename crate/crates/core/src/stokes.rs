//! Integral forms of order `p-1`, the Cartan derivative, boundary pullback
//! and both versions of Stokes's theorem.

use crate::berezin::{sign, BerezinDensity, Convention, DiffOp, Kind};
use crate::chart::{Chart, CoordSystem, Retraction};
use crate::corners::{CornerStructure, FaceGeometry};
use crate::error::{Error, Result};
use crate::expr::{self, Expr};
use crate::grassmann::SuperNumber;
use crate::quadrature::{integrate_volume, QuadratureRule};
use serde::Serialize;
use std::sync::Arc;

/// `Σ_i f_i Dx ⊗ ∂/∂x_i Π` with `Dx` a Berezin form.
#[derive(Clone, Debug)]
pub struct IntegralForm {
    pub coords: CoordSystem,
    pub components: Vec<SuperNumber>,
}

impl IntegralForm {
    pub fn new(coords: &CoordSystem, components: Vec<SuperNumber>) -> Result<IntegralForm> {
        let n = coords.chart().dim();
        if components.len() != n {
            return Err(Error::IndexOutOfRange { index: components.len(), len: n });
        }
        let q = coords.chart().q();
        if let Some(c) = components.iter().find(|c| c.q() != q) {
            return Err(Error::MismatchedGeneratorCount(q, c.q()));
        }
        Ok(IntegralForm { coords: coords.clone(), components })
    }

    /// `f Dx ⊗ ∂/∂x_i Π`
    pub fn single(coords: &CoordSystem, i: usize, f: SuperNumber) -> Result<IntegralForm> {
        let chart = coords.chart();
        let mut components: Vec<SuperNumber> = (0..chart.dim()).map(|_| SuperNumber::zero(chart.q())).collect();
        if i >= components.len() {
            return Err(Error::IndexOutOfRange { index: i, len: components.len() });
        }
        components[i] = f;
        IntegralForm::new(coords, components)
    }

    pub fn chart(&self) -> &Arc<Chart> {
        self.coords.chart()
    }

    /// Re-expresses the form in `target` coordinates `x`:
    /// `f Dy ⊗ ∂/∂y_i Π = Σ_j (-1)^{(|x_j|+|y_i|)(|Dx|+1)} f ∂x_j/∂y_i (Dy/Dx) Dx ⊗ ∂/∂x_j Π`.
    ///
    /// Moving a coefficient `g` through `Π` costs `(-1)^{|g|}`; this is the
    /// sign for which the Cartan derivative is independent of coordinates.
    pub fn transform(&self, target: &CoordSystem, conv: &Convention) -> Result<IntegralForm> {
        if self.coords.same_as(target) {
            return Ok(self.clone());
        }
        let chart = self.chart();
        let (p, q) = (chart.p(), chart.q());
        let b = conv.b(p, q);
        let mut out: Vec<SuperNumber> = (0..chart.dim()).map(|_| SuperNumber::zero(q)).collect();
        for (i, f) in self.components.iter().enumerate() {
            if f.is_zero() {
                continue;
            }
            let scaled = BerezinDensity::new(Kind::Form, f.clone(), &self.coords)?.transform(target)?.coeff;
            for (j, xj) in target.comps().iter().enumerate() {
                let dxj = self.coords.derivative(xj, i)?;
                if dxj.is_zero() {
                    continue;
                }
                let s = sign(((target.parity_of(j) + self.coords.parity_of(i)) % 2) * (b + 1));
                out[j] = &out[j] + &(&scaled * &dxj).scale_f64(s);
            }
        }
        IntegralForm::new(target, out)
    }

    /// `dϖ = Σ_i (-1)^{|ω_i|(|x_i|+1)} ∂f_i/∂x_i Dx` with `ω_i = f_i Dx`.
    pub fn cartan_d(&self, conv: &Convention) -> Result<BerezinDensity> {
        let chart = self.chart();
        let b = conv.b(chart.p(), chart.q());
        let mut acc = SuperNumber::zero(chart.q());
        for (i, f) in self.components.iter().enumerate() {
            let xi = self.coords.parity_of(i);
            for (par, part) in [(0u32, f.even_part()), (1, f.odd_part())] {
                if part.is_zero() {
                    continue;
                }
                let s = sign(((par + b) % 2) * ((xi + 1) % 2));
                acc = &acc + &self.coords.derivative(&part, i)?.scale_f64(s);
            }
        }
        BerezinDensity::new(Kind::Form, acc, &self.coords)
    }

    /// Boundary pullback: in the adapted system `(x_1, x̃)` only the `∂/∂x_1`
    /// component survives, as `(-1)^{|Dx|} ι*(f_1) D ι*(x̃)`.
    pub fn pullback(&self, geom: &FaceGeometry, conv: &Convention) -> Result<BerezinDensity> {
        let chart = self.chart();
        let local = self.transform(&geom.adapted, conv)?;
        let s = sign(conv.b(chart.p(), chart.q()) % 2);
        let coeff = geom.immersion.pullback(&local.components[0])?.scale_f64(s);
        BerezinDensity::new(Kind::Form, coeff, &CoordSystem::standard(&geom.immersion.source))
    }

    /// `γ_!` onto the base, identified with a classical `(p-1)`-form.
    pub fn fibre_integral(&self, gamma: &Retraction, conv: &Convention) -> Result<ClassicalForm> {
        let chart = self.chart();
        let local = self.transform(&gamma.coords(), conv)?;
        let mut along = Vec::with_capacity(chart.p());
        for f in &local.components[..chart.p()] {
            let w = BerezinDensity::new(Kind::Form, f.clone(), &local.coords)?;
            along.push(w.fibre_integral(gamma, conv)?);
        }
        Ok(ClassicalForm::from_integral(&chart.vars, along, conv))
    }
}

/// Classical `(p-1)`-form `Σ_i c_i du_1∧…∧\widehat{du_i}∧…∧du_p`.
#[derive(Clone, Debug)]
pub struct ClassicalForm {
    pub vars: Vec<String>,
    pub coeffs: Vec<Expr>,
}

impl ClassicalForm {
    /// Image of `Σ_i g_i du ⊗ ∂/∂u_i Π` under `ω ⊗ XΠ ↦ (-1)^{|ω|} ι_X ω`.
    pub fn from_integral(vars: &[String], along: Vec<Expr>, conv: &Convention) -> ClassicalForm {
        let p = vars.len();
        let b = conv.b(p, 0);
        let coeffs = along
            .into_iter()
            .enumerate()
            .map(|(i, g)| &g * &Expr::constant(sign((b + i as u32) % 2)))
            .collect();
        ClassicalForm { vars: vars.to_vec(), coeffs }
    }

    /// Coefficient of `du_1∧…∧du_p` in the exterior derivative.
    pub fn exterior_d(&self) -> Expr {
        Expr::add_all(
            self.coeffs
                .iter()
                .zip(&self.vars)
                .enumerate()
                .map(|(i, (c, v))| &c.diff(v) * &Expr::constant(sign(i as u32 % 2))),
        )
    }

    /// Coefficient of `dt_1∧…∧dt_{p-1}` after pulling back along `u = P(t)`.
    pub fn pullback(&self, param: &[Expr], face_vars: &[String]) -> Expr {
        let p = self.vars.len();
        let jac: Vec<Vec<Expr>> = param.iter().map(|e| face_vars.iter().map(|t| e.diff(t)).collect()).collect();
        let map = self.vars.iter().cloned().zip(param.iter().cloned()).collect();
        Expr::add_all((0..p).map(|i| {
            let minor: Vec<Vec<Expr>> =
                (0..p).filter(|&r| r != i).map(|r| jac[r].clone()).collect();
            let m = if minor.is_empty() { Expr::one() } else { expr::det(&minor) };
            &self.coeffs[i].subst(&map) * &m
        }))
    }
}

/// Sign relating the face chart's orientation to the boundary orientation
/// (outward normal first).
pub fn boundary_orientation(corners: &CornerStructure, face: usize) -> Result<f64> {
    let f = &corners.faces[face];
    if f.codim() != 1 {
        return Err(Error::Input(format!("face {face} is not a hypersurface")));
    }
    let chart = &corners.chart;
    let map = chart.vars.iter().cloned().zip(f.param.iter().cloned()).collect();
    let rho = &corners.rho[f.vanish[0]];
    let rows: Vec<Vec<Expr>> = chart
        .vars
        .iter()
        .zip(&f.param)
        .map(|(v, pv)| {
            let mut row = vec![-rho.diff(v).subst(&map)];
            row.extend(f.chart.vars.iter().map(|t| pv.diff(t)));
            row
        })
        .collect();
    let d = expr::det(&rows);
    let mut s = 0.0;
    for t in f.chart.samples() {
        let v = d.eval(t)?;
        let here = if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
        if here == 0.0 || (s != 0.0 && here != s) {
            return Err(Error::SignAmbiguous);
        }
        s = here;
    }
    Ok(s)
}

/// Boundary supermanifold data: one adapted system per face of codimension one.
#[derive(Clone, Debug)]
pub struct Boundary {
    pub geometries: Vec<FaceGeometry>,
    /// Retractions used to integrate over each face.
    pub retractions: Vec<Retraction>,
}

impl Boundary {
    /// The boundary structure compatible with `γ`; the naive structure is the
    /// one compatible with the canonical retraction.
    pub fn compatible(corners: &CornerStructure, gamma: &Retraction) -> Result<Boundary> {
        let mut geometries = Vec::new();
        let mut retractions = Vec::new();
        for face in 0..corners.faces.len() {
            let g = corners.geometry(face, gamma)?;
            retractions.push(g.induced_retraction(corners, gamma)?);
            geometries.push(g);
        }
        Ok(Boundary { geometries, retractions })
    }

    /// Boundary structures given by explicit adapted systems `(τ, x̃)`.
    pub fn from_adapted(corners: &CornerStructure, adapted: Vec<CoordSystem>) -> Result<Boundary> {
        let mut geometries = Vec::new();
        let mut retractions = Vec::new();
        for (face, a) in adapted.into_iter().enumerate() {
            let g = FaceGeometry::new(corners, face, a)?;
            retractions.push(Retraction::canonical(&g.immersion.source));
            geometries.push(g);
        }
        Ok(Boundary { geometries, retractions })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StokesReport {
    /// `∫_{(U,γ)} dϖ`
    pub lhs: f64,
    /// Signed boundary integrals `∫_{∂U} ι*(ϖ)` per face.
    pub boundary: Vec<f64>,
    pub sign_factor: f64,
    pub rhs: f64,
    pub residual: f64,
    /// Same boundary integral through `γ_!` and the classical pullback.
    pub classical_rhs: f64,
    pub classical_residual: f64,
}

/// Both sides of `∫_{(U,γ)} dϖ = (-1)^{s(p,q)+s(p-1,q)+q} ∫_{∂U} ι*(ϖ)`.
pub fn verify_stokes(
    corners: &CornerStructure,
    gamma: &Retraction,
    boundary: &Boundary,
    varpi: &IntegralForm,
    rule: &QuadratureRule,
    conv: &Convention,
) -> Result<StokesReport> {
    let chart = &corners.chart;
    let (p, q) = (chart.p(), chart.q());
    let lhs = varpi.cartan_d(conv)?.integrate(gamma, rule, conv)?;
    let sign_factor = sign(conv.s(p, q) + conv.s(p - 1, q) + q as u32);
    let mut faces = Vec::new();
    let mut classical = 0.0;
    let base_form = varpi.fibre_integral(gamma, conv)?;
    let classical_sign = sign(conv.b(p, q) + conv.b(p, 0) + conv.s(p, q) + conv.s(p - 1, q));
    for (face, (geom, ret)) in boundary.geometries.iter().zip(&boundary.retractions).enumerate() {
        let eps = boundary_orientation(corners, face)?;
        let pulled = varpi.pullback(geom, conv)?;
        faces.push(eps * pulled.integrate(ret, rule, conv)?);
        let f = &corners.faces[face];
        let g = base_form.pullback(&f.param, &f.chart.vars);
        classical += eps * classical_sign * integrate_volume(&g, &f.chart.vars, &f.chart.region, rule)?;
    }
    let rhs = sign_factor * faces.iter().sum::<f64>();
    let classical_rhs = sign_factor * classical;
    Ok(StokesReport {
        lhs,
        boundary: faces,
        sign_factor,
        rhs,
        residual: (lhs - rhs).abs(),
        classical_rhs,
        classical_residual: (lhs - classical_rhs).abs(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GeneralStokesReport {
    /// `∫_{(U,γ')} dϖ`
    pub lhs: f64,
    /// `∫_{∂U} ι*(ϖ)` summed over faces.
    pub boundary: f64,
    /// `∫_{∂U} (ω_j . D^{j-1})|_{∂U,τ}` for `j = 1..q/2`, summed over faces.
    pub transversal: Vec<f64>,
    pub rhs: f64,
    pub residual: f64,
    /// Value of the right hand side without the transversal terms.
    pub uncorrected_rhs: f64,
}

/// Stokes's formula for an arbitrary boundary structure: the transversal
/// terms are built from `τ` (with `ι*(τ) = 0`) and `γ'`.
pub fn stokes_general(
    corners: &CornerStructure,
    boundary: &Boundary,
    gamma_p: &Retraction,
    varpi: &IntegralForm,
    rule: &QuadratureRule,
    conv: &Convention,
) -> Result<GeneralStokesReport> {
    let chart = &corners.chart;
    let (p, q) = (chart.p(), chart.q());
    let omega = varpi.cartan_d(conv)?;
    let lhs = omega.integrate(gamma_p, rule, conv)?;
    let outer = sign(conv.s(p, q) + conv.s(p - 1, q));
    let mut bsum = 0.0;
    let mut transversal = vec![0.0; q / 2];
    for (face, (geom, ret)) in boundary.geometries.iter().zip(&boundary.retractions).enumerate() {
        let eps = boundary_orientation(corners, face)?;
        bsum += eps * varpi.pullback(geom, conv)?.integrate(ret, rule, conv)?;
        let tau = &geom.adapted.comps()[0];
        let shift = &gamma_p.pullback(&tau.body())? - tau;
        let d = DiffOp::partial(&geom.adapted, 0);
        let mut power = SuperNumber::one(q);
        let mut fact = 1.0;
        for (j, slot) in transversal.iter_mut().enumerate() {
            power = &power * &shift;
            fact *= (j + 1) as f64;
            if power.is_zero() {
                continue;
            }
            let mut w = omega.mul_left(&power.scale_f64(1.0 / fact));
            for _ in 0..j {
                w = d.act(&w, conv)?;
            }
            *slot += eps * geom.restrict(&w)?.integrate(ret, rule, conv)?;
        }
    }
    let uncorrected_rhs = outer * sign(q as u32) * bsum;
    let rhs = uncorrected_rhs - outer * transversal.iter().sum::<f64>();
    Ok(GeneralStokesReport { lhs, boundary: bsum, transversal, rhs, residual: (lhs - rhs).abs(), uncorrected_rhs })
}

/// Checks `(∂γ)_!(ι*(ϖ)) = ± ι0*(γ_!(ϖ))` at the face sample points;
/// returns the largest deviation.
pub fn check_pullback_compatibility(
    corners: &CornerStructure,
    gamma: &Retraction,
    varpi: &IntegralForm,
    conv: &Convention,
) -> Result<f64> {
    let chart = &corners.chart;
    let (p, q) = (chart.p(), chart.q());
    let s = sign(conv.b(p, q) + conv.b(p, 0) + conv.s(p, q) + conv.s(p - 1, q));
    let base_form = varpi.fibre_integral(gamma, conv)?;
    let boundary = Boundary::compatible(corners, gamma)?;
    let mut worst: f64 = 0.0;
    for (face, (geom, ret)) in boundary.geometries.iter().zip(&boundary.retractions).enumerate() {
        let f = &corners.faces[face];
        let lhs = varpi.pullback(geom, conv)?.fibre_integral(ret, conv)?;
        let rhs = base_form.pullback(&f.param, &f.chart.vars);
        for t in f.chart.samples() {
            let (a, b) = (lhs.eval(t)?, s * rhs.eval(t)?);
            worst = worst.max((a - b).abs() / (1.0 + b.abs()));
        }
    }
    Ok(worst)
}

/// Checks `γ_!(dϖ) = ± d γ_!(ϖ)` at the given points.
pub fn check_cartan_compatibility(
    gamma: &Retraction,
    varpi: &IntegralForm,
    points: &[expr::Point],
    conv: &Convention,
) -> Result<f64> {
    let chart = varpi.chart();
    let (p, q) = (chart.p(), chart.q());
    let s = sign(conv.b(p, q) + conv.b(p, 0) + q as u32);
    let lhs = varpi.cartan_d(conv)?.fibre_integral(gamma, conv)?;
    let rhs = varpi.fibre_integral(gamma, conv)?.exterior_d();
    let mut worst: f64 = 0.0;
    for pt in points {
        let (a, b) = (lhs.eval(pt)?, s * rhs.eval(pt)?);
        worst = worst.max((a - b).abs() / (1.0 + b.abs()));
    }
    Ok(worst)
}
