use berezin::berezin::{change_of_retraction, retraction_change_operator, BerezinDensity, Convention, Kind};
use berezin::chart::{Chart, CoordSystem, Morphism, Retraction};
use berezin::quadrature::{QuadratureRule, Region};
use berezin::{Expr, SuperNumber};

fn shifted_interval() -> (std::sync::Arc<Chart>, CoordSystem) {
    let c = Chart::standard("U", 1, 2, Region::cuboid(vec![(0.0, 1.0)])).unwrap();
    let xi12 = &c.coord(1) * &c.coord(2);
    let y = CoordSystem::new(&c, vec![&c.coord(0) + &xi12, c.coord(1), c.coord(2)]).unwrap();
    (c, y)
}

#[test]
fn shifted_interval_integrals() {
    let conv = Convention::default();
    let rule = QuadratureRule::new(8);
    let (c, y) = shifted_interval();
    let omega = BerezinDensity::new(Kind::Form, y.comps()[0].clone(), &y).unwrap();
    let gx = Retraction::canonical(&c);
    let gy = Retraction::associated(&y).unwrap();
    let ix = omega.integrate(&gx, &rule, &conv).unwrap();
    let iy = omega.integrate(&gy, &rule, &conv).unwrap();
    assert!((ix - conv.sign_s(1, 2)).abs() < 1e-14, "{ix}");
    assert!(iy.abs() < 1e-14, "{iy}");
    let local = change_of_retraction(&omega, &gx, &gy, &rule, &conv).unwrap();
    assert!(local.residual < 1e-12, "{local:?}");
}

#[test]
fn morphism_reproduces_density() {
    let conv = Convention::default();
    let (c, y) = shifted_interval();
    let u = Expr::var("u1");
    let gx = Retraction::canonical(&c);
    let gy = Retraction::associated(&y).unwrap();
    let f = &c.lift(&u.sin()) + &(&c.coord(1) * &c.coord(2)).scale(&u.exp());
    let omega = BerezinDensity::new(Kind::Density, f, &CoordSystem::standard(&c)).unwrap();
    let op = retraction_change_operator(&gx, &gy).unwrap();
    let phi = Morphism::between(&gx.coords(), &gy.coords()).unwrap();
    let back = op.act(&omega, &conv).unwrap().pullback(&phi).unwrap().in_standard().unwrap();
    let d = back.coeff.max_diff(&omega.coeff, c.samples()).unwrap();
    assert!(d < 1e-12, "{d}");
    let _ = SuperNumber::one(2);
}
