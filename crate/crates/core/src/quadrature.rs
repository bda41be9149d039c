//! Regions and tensor-product Gauss-Legendre quadrature.

use crate::error::{Error, Result};
use crate::expr::{self, Compiled, Expr, Point};
use gauss_quad::GaussLegendre;
use rayon::prelude::*;
use serde::Serialize;

/// Change of variables from a reference box onto the region.
#[derive(Debug, Clone)]
pub struct RegionMap {
    pub ref_vars: Vec<String>,
    pub coords: Vec<Expr>,
    pub jacobian: Expr,
}

/// Integration region in the even variables of a chart.
///
/// A region is a box, a box cut down by masks (`mask_i > 0` everywhere
/// inside), or the image of a reference box under a map.
#[derive(Debug, Clone)]
pub struct Region {
    pub bounds: Vec<(f64, f64)>,
    pub mask: Vec<Expr>,
    pub map: Option<RegionMap>,
    /// Axes of the reference box whose end faces are identified.
    pub periodic: Vec<bool>,
}

impl Region {
    pub fn cuboid(bounds: Vec<(f64, f64)>) -> Region {
        let n = bounds.len();
        Region { bounds, mask: vec![], map: None, periodic: vec![false; n] }
    }

    pub fn point() -> Region {
        Region::cuboid(vec![])
    }

    pub fn masked(bounds: Vec<(f64, f64)>, mask: Vec<Expr>) -> Region {
        Region { mask, ..Region::cuboid(bounds) }
    }

    pub fn mapped(ref_vars: Vec<String>, bounds: Vec<(f64, f64)>, coords: Vec<Expr>) -> Result<Region> {
        if ref_vars.len() != bounds.len() || coords.len() != bounds.len() {
            return Err(Error::Input("mapped region: dimension mismatch".into()));
        }
        let m: Vec<Vec<Expr>> = ref_vars
            .iter()
            .map(|r| coords.iter().map(|c| c.diff(r)).collect())
            .collect();
        let jacobian = expr::det(&m);
        let n = bounds.len();
        Ok(Region { bounds, mask: vec![], map: Some(RegionMap { ref_vars, coords, jacobian }), periodic: vec![false; n] })
    }

    pub fn with_periodic(mut self, periodic: Vec<bool>) -> Region {
        self.periodic = periodic;
        self
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn has_mask(&self) -> bool {
        !self.mask.is_empty()
    }

    /// Quadrature nodes as (point in `vars`, weight).
    pub fn nodes(&self, vars: &[String], rule: &QuadratureRule) -> Result<Vec<(Vec<f64>, f64)>> {
        if vars.len() != self.dim() {
            return Err(Error::Input(format!(
                "region has dimension {} but chart has {} even variables",
                self.dim(),
                vars.len()
            )));
        }
        let axes: Vec<Vec<(f64, f64)>> = self.bounds.iter().map(|(a, b)| rule.axis_nodes(*a, *b)).collect();
        let mut out = Vec::new();
        let mut idx = vec![0usize; axes.len()];
        let map = match &self.map {
            Some(m) => Some((
                Compiled::new(&m.coords, &m.ref_vars)?,
                Compiled::new(std::slice::from_ref(&m.jacobian), &m.ref_vars)?,
            )),
            None => None,
        };
        let masks = Compiled::new(&self.mask, vars)?;
        loop {
            let r: Vec<f64> = idx.iter().zip(&axes).map(|(i, ax)| ax[*i].0).collect();
            let mut w: f64 = idx.iter().zip(&axes).map(|(i, ax)| ax[*i].1).product();
            let x = match &map {
                Some((coords, jac)) => {
                    w *= jac.eval(&r)?[0].abs();
                    coords.eval(&r)?
                }
                None => r,
            };
            if self.mask.is_empty() || masks.eval(&x)?.iter().all(|m| *m > 0.0) {
                out.push((x, w));
            }
            // odometer
            let mut k = axes.len();
            loop {
                if k == 0 {
                    return Ok(out);
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < axes[k].len() {
                    break;
                }
                idx[k] = 0;
            }
        }
    }

    /// Interior sample points for consistency checks.
    pub fn sample_points(&self, vars: &[String], per_axis: usize) -> Result<Vec<Point>> {
        let rule = QuadratureRule::new(per_axis);
        Ok(self
            .nodes(vars, &rule)?
            .into_iter()
            .map(|(x, _)| vars.iter().cloned().zip(x).collect())
            .collect())
    }

    /// Points on the region boundary, excluding identified periodic faces.
    pub fn boundary_points(&self, vars: &[String], per_axis: usize) -> Result<Vec<Point>> {
        let rule = QuadratureRule::new(per_axis);
        let mut out = Vec::new();
        let map = match &self.map {
            Some(m) => Some(Compiled::new(&m.coords, &m.ref_vars)?),
            None => None,
        };
        for axis in 0..self.dim() {
            if self.periodic.get(axis).copied().unwrap_or(false) {
                continue;
            }
            for end in [self.bounds[axis].0, self.bounds[axis].1] {
                let mut bounds = self.bounds.clone();
                bounds.remove(axis);
                let face = Region::cuboid(bounds);
                let names: Vec<String> = (0..face.dim()).map(|i| format!("_{i}")).collect();
                for (y, _) in face.nodes(&names, &rule)? {
                    let mut r = y.clone();
                    r.insert(axis, end);
                    let x = match &map {
                        Some(c) => c.eval(&r)?,
                        None => r,
                    };
                    out.push(vars.iter().cloned().zip(x).collect());
                }
            }
        }
        Ok(out)
    }
}

/// Tensor Gauss-Legendre rule with optional composite panels per axis.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct QuadratureRule {
    pub order: usize,
    pub panels: usize,
}

impl Default for QuadratureRule {
    fn default() -> Self {
        QuadratureRule { order: 32, panels: 1 }
    }
}

impl QuadratureRule {
    pub fn new(order: usize) -> QuadratureRule {
        QuadratureRule { order, panels: 1 }
    }

    pub fn with_panels(order: usize, panels: usize) -> QuadratureRule {
        QuadratureRule { order, panels: panels.max(1) }
    }

    /// Nodes and weights on `[a, b]`.
    pub fn axis_nodes(&self, a: f64, b: f64) -> Vec<(f64, f64)> {
        let gl = GaussLegendre::new(self.order.max(2).try_into().expect("order >= 2"));
        let h = (b - a) / self.panels as f64;
        let mut out = Vec::with_capacity(self.order * self.panels);
        for k in 0..self.panels {
            let lo = a + h * k as f64;
            for (x, w) in gl.iter() {
                out.push((lo + 0.5 * h * (x + 1.0), 0.5 * h * w));
            }
        }
        out.sort_by(|x, y| x.0.total_cmp(&y.0));
        out
    }
}

/// Integral of `g` over the region, `g` being a function of `vars`.
pub fn integrate_volume(g: &Expr, vars: &[String], region: &Region, rule: &QuadratureRule) -> Result<f64> {
    if g.is_zero() {
        return Ok(0.0);
    }
    let nodes = region.nodes(vars, rule)?;
    let program = g.compile(vars)?;
    let values: Vec<Result<f64>> = nodes
        .par_iter()
        .map_init(
            || (Vec::new(), [0.0f64]),
            |(scratch, out), (x, w)| {
                program.eval_into(x, scratch, out).map_err(|e| match e {
                    Error::Domain(m) => Error::NodeSingularity(format!("{m} at {x:?}")),
                    other => other,
                })?;
                if !out[0].is_finite() {
                    return Err(Error::NonFinite(format!("integrand {} at {x:?}", out[0])));
                }
                Ok(out[0] * w)
            },
        )
        .collect();
    let mut acc = 0.0;
    for v in values {
        acc += v?;
    }
    Ok(acc)
}

/// Extrapolates values of an even function of `eps` to `eps = 0`.
pub fn richardson_even(eps: &[f64], values: &[f64]) -> f64 {
    assert_eq!(eps.len(), values.len());
    // Neville's scheme in h = eps^2
    let h: Vec<f64> = eps.iter().map(|e| e * e).collect();
    let mut p = values.to_vec();
    let n = p.len();
    for level in 1..n {
        for i in 0..n - level {
            p[i] = (h[i] * p[i + 1] - h[i + level] * p[i]) / (h[i] - h[i + level]);
        }
    }
    p[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomials_are_exact() {
        let vars = vec!["x".to_string(), "y".to_string()];
        let x = Expr::var("x");
        let y = Expr::var("y");
        let g = &x.powi(5) * &y.powi(3);
        let r = Region::cuboid(vec![(0.0, 1.0), (-1.0, 2.0)]);
        let v = integrate_volume(&g, &vars, &r, &QuadratureRule::new(8)).unwrap();
        assert!((v - (1.0 / 6.0) * (16.0 - 1.0) / 4.0).abs() < 1e-14);
    }

    #[test]
    fn point_region_is_single_evaluation() {
        let v = integrate_volume(&Expr::constant(2.5), &[], &Region::point(), &QuadratureRule::default()).unwrap();
        assert_eq!(v, 2.5);
    }

    #[test]
    fn disk_area_by_map() {
        let r = Expr::var("r");
        let t = Expr::var("t");
        let reg = Region::mapped(
            vec!["r".into(), "t".into()],
            vec![(0.0, 1.0), (-std::f64::consts::PI, std::f64::consts::PI)],
            vec![&r * &t.cos(), &r * &t.sin()],
        )
        .unwrap();
        let v = integrate_volume(&Expr::one(), &["x".into(), "y".into()], &reg, &QuadratureRule::new(16)).unwrap();
        assert!((v - std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn richardson_removes_even_terms() {
        let eps = [0.2, 0.1, 0.05];
        let vals: Vec<f64> = eps.iter().map(|e: &f64| 3.0 + 2.0 * e * e - 5.0 * e.powi(4)).collect();
        assert!((richardson_even(&eps, &vals) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn singular_node_reported() {
        let x = Expr::var("x");
        let r = Region::cuboid(vec![(-1.0, 1.0)]);
        let e = integrate_volume(&(&x - &Expr::constant(-1.0)).log(), &["x".into()], &Region::cuboid(vec![(-2.0, -1.5)]), &QuadratureRule::new(4));
        assert!(matches!(e, Err(Error::NodeSingularity(_))));
        assert!(integrate_volume(&x, &["x".into()], &r, &QuadratureRule::new(3)).unwrap().abs() < 1e-15);
    }
}
