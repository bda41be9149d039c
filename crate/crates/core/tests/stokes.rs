use berezin::berezin::{Convention, ParityRule, SignRule};
use berezin::chart::{Chart, CoordSystem, Retraction};
use berezin::corners::{box_face, CornerStructure, Face, FaceGeometry};
use berezin::expr::random_points;
use berezin::quadrature::{QuadratureRule, Region};
use berezin::stokes::{
    check_cartan_compatibility, check_pullback_compatibility, stokes_general, verify_stokes, Boundary,
    IntegralForm,
};
use berezin::{Expr, SuperNumber};
use std::f64::consts::PI;
use std::sync::Arc;

fn c(x: f64) -> Expr {
    Expr::constant(x)
}

fn u() -> Expr {
    Expr::var("u1")
}

/// `R^{1,4}` over `(0, 2)` with the single boundary point `u = 0`.
fn half_line() -> (Arc<Chart>, CornerStructure, CoordSystem) {
    let chart = Chart::standard("M", 1, 4, Region::cuboid(vec![(0.0, 2.0)])).unwrap();
    let face = box_face(&chart, vec![0], &[(0, 0.0)], vec![]).unwrap();
    let corners = CornerStructure::new(&chart, vec![u()], vec![face]).unwrap();
    let x = |i| chart.coord(i);
    let v = &(&x(0) + &(&x(1) * &x(2))) + &(&x(3) * &x(4));
    let y = CoordSystem::new(&chart, vec![v, x(1), x(2), x(3), x(4)]).unwrap();
    (chart, corners, y)
}

/// `½ v² χ(v) Dy ⊗ ∂/∂v Π`
fn half_square(y: &CoordSystem, gamma: &Retraction) -> IntegralForm {
    let g = &(&(&u() * &u()) * &c(0.5)) * &Expr::cutoff(&u(), 0.5, 1.5);
    IntegralForm::single(y, 0, gamma.pullback(&g).unwrap()).unwrap()
}

#[test]
fn boundary_structure_matters() {
    let conv = Convention::default();
    let rule = QuadratureRule::with_panels(24, 4);
    let (chart, corners, y) = half_line();
    let gamma = Retraction::associated(&y).unwrap();
    let varpi = half_square(&y, &gamma);

    let correct = verify_stokes(&corners, &gamma, &Boundary::compatible(&corners, &gamma).unwrap(), &varpi, &rule, &conv)
        .unwrap();
    assert_eq!(correct.sign_factor, 1.0);
    assert!(correct.lhs.abs() < 1e-10, "{correct:?}");
    assert!(correct.rhs.abs() < 1e-10, "{correct:?}");
    assert!(correct.classical_residual < 1e-10, "{correct:?}");

    let naive_boundary = Boundary::compatible(&corners, &Retraction::canonical(&chart)).unwrap();
    let naive = verify_stokes(&corners, &gamma, &naive_boundary, &varpi, &rule, &conv).unwrap();
    assert!(naive.lhs.abs() < 1e-10);
    assert!((naive.rhs.abs() - 1.0).abs() < 1e-10, "{naive:?}");

    let general = stokes_general(&corners, &naive_boundary, &gamma, &varpi, &rule, &conv).unwrap();
    assert!((general.uncorrected_rhs.abs() - 1.0).abs() < 1e-10, "{general:?}");
    assert!(general.residual < 1e-8, "{general:?}");
    assert_eq!(general.transversal.len(), 2);
}

#[test]
fn cartan_derivative_of_half_square() {
    let (_, _, y) = half_line();
    let gamma = Retraction::associated(&y).unwrap();
    let pts = y.chart().samples();
    for conv in [Convention::default(), Convention { s: SignRule::Default, b: ParityRule::QOnly }] {
        let sq = &(&u() * &u()) * &c(0.5);
        let varpi = IntegralForm::single(&y, 0, gamma.pullback(&sq).unwrap()).unwrap();
        let d = varpi.cartan_d(&conv).unwrap();
        assert!(d.coords.same_as(&y));
        let want = y.comps()[0].scale_f64(berezin::berezin::sign(conv.b(1, 4)));
        assert!(d.coeff.max_diff(&want, pts).unwrap() < 1e-12);
        let constant = IntegralForm::single(&y, 0, SuperNumber::constant(4, 3.0)).unwrap();
        assert!(constant.cartan_d(&conv).unwrap().coeff.is_zero());
    }
}

#[test]
fn classical_disk() {
    let conv = Convention::default();
    let rule = QuadratureRule::new(40);
    let (r, th) = (Expr::var("r"), Expr::var("th"));
    let region = Region::mapped(vec!["r".into(), "th".into()], vec![(0.0, 1.0), (-PI, PI)], vec![&r * &th.cos(), &r * &th.sin()])
        .unwrap()
        .with_periodic(vec![false, true]);
    let chart = Chart::standard("D", 2, 0, region).unwrap();
    let (u1, u2) = (Expr::var("u1"), Expr::var("u2"));
    let t = Expr::var("t");
    let face_chart = Chart::new("circle", vec!["t".into()], vec![], Region::cuboid(vec![(-PI, PI)]).with_periodic(vec![true]))
        .unwrap();
    let face = Face { vanish: vec![0], chart: face_chart, param: vec![t.cos(), t.sin()], complement: vec![Expr::atan2(&u2, &u1)] };
    let rho = &c(1.0) - &(&(&u1 * &u1) + &(&u2 * &u2));
    let corners = CornerStructure::new(&chart, vec![rho], vec![face]).unwrap();
    let std = CoordSystem::standard(&chart);
    let varpi = IntegralForm::new(
        &std,
        vec![chart.lift(&(&u1.exp() * &u2)), chart.lift(&(&(&u1 * &u1) * &u2.sin()))],
    )
    .unwrap();
    let gamma = Retraction::canonical(&chart);
    let report = verify_stokes(&corners, &gamma, &Boundary::compatible(&corners, &gamma).unwrap(), &varpi, &rule, &conv)
        .unwrap();
    assert!(report.lhs.abs() > 0.1);
    assert!(report.residual < 1e-6, "{report:?}");
    assert!(report.classical_residual < 1e-6, "{report:?}");
}

fn slab() -> (Arc<Chart>, CornerStructure) {
    let chart = Chart::standard("S", 1, 2, Region::cuboid(vec![(0.0, 1.0)])).unwrap();
    let faces = vec![
        box_face(&chart, vec![0], &[(0, 0.0)], vec![]).unwrap(),
        box_face(&chart, vec![1], &[(0, 1.0)], vec![]).unwrap(),
    ];
    let corners = CornerStructure::new(&chart, vec![u(), &c(1.0) - &u()], faces).unwrap();
    (chart, corners)
}

fn slab_form(chart: &Arc<Chart>, seed: f64) -> IntegralForm {
    let x = |i| chart.coord(i);
    let xi12 = &x(1) * &x(2);
    let std = CoordSystem::standard(chart);
    let a = &chart.lift(&(&u() * &c(seed)).sin()) + &xi12.scale(&(&u() * &u()).exp());
    let b = &x(2).scale(&(&u() + &c(seed))) + &x(1).scale_f64(seed);
    let d = &chart.lift(&(&u() * &c(seed)).cos()) + &xi12.scale(&u());
    IntegralForm::new(&std, vec![a, b, d]).unwrap()
}

#[test]
fn slab_stokes_with_random_forms() {
    let rule = QuadratureRule::new(24);
    let (chart, corners) = slab();
    let x = |i| chart.coord(i);
    let gamma = Retraction::new(&chart, vec![&x(0) + &(&x(1) * &x(2)).scale(&(&u() * &c(0.7)).cos())]).unwrap();
    for conv in [Convention::default(), Convention { s: SignRule::HalfQ, b: ParityRule::QOnly }] {
        for seed in [0.3, 1.1, 2.3] {
            let varpi = slab_form(&chart, seed);
            let boundary = Boundary::compatible(&corners, &gamma).unwrap();
            let r = verify_stokes(&corners, &gamma, &boundary, &varpi, &rule, &conv).unwrap();
            assert!(r.residual < 1e-8, "{r:?}");
            assert!(r.classical_residual < 1e-8, "{r:?}");
            assert!(check_pullback_compatibility(&corners, &gamma, &varpi, &conv).unwrap() < 1e-10);
            let pts = random_points(&chart.vars, &[(0.0, 1.0)], 20, 7);
            assert!(check_cartan_compatibility(&gamma, &varpi, &pts, &conv).unwrap() < 1e-10);
        }
    }
}

#[test]
fn pullback_independent_of_adapted_system() {
    let conv = Convention::default();
    let (chart, corners) = slab();
    let x = |i| chart.coord(i);
    let gamma = Retraction::new(&chart, vec![&x(0) + &(&x(1) * &x(2)).scale_f64(0.4)]).unwrap();
    let varpi = slab_form(&chart, 0.9);
    let geom = corners.geometry(0, &gamma).unwrap();
    let adapted = geom.adapted.comps();
    let tau = &adapted[0];
    let other = CoordSystem::new(
        &chart,
        vec![
            &tau.scale(&u().exp()) + &(&(tau * &x(1)) * &x(2)),
            &adapted[1] + &(tau * &x(2)),
            adapted[2].clone(),
        ],
    )
    .unwrap();
    let geom2 = FaceGeometry::new(&corners, 0, other).unwrap();
    let face_pts = corners.faces[0].chart.samples();
    for (a, b) in geom.immersion.images().iter().zip(geom2.immersion.images()) {
        assert!(a.max_diff(b, face_pts).unwrap() < 1e-12);
    }
    let p1 = varpi.pullback(&geom, &conv).unwrap();
    let p2 = varpi.pullback(&geom2, &conv).unwrap();
    assert!(p1.coeff.max_diff(&p2.coeff, face_pts).unwrap() < 1e-12);
}

#[test]
fn general_stokes_on_shifted_slab() {
    let rule = QuadratureRule::new(24);
    let conv = Convention::default();
    let (chart, corners) = slab();
    let x = |i| chart.coord(i);
    let y = CoordSystem::new(&chart, vec![&x(0) + &(&x(1) * &x(2)), x(1), x(2)]).unwrap();
    let gamma_p = Retraction::associated(&y).unwrap();
    let naive = Boundary::compatible(&corners, &Retraction::canonical(&chart)).unwrap();
    let varpi = slab_form(&chart, 1.7);
    let r = stokes_general(&corners, &naive, &gamma_p, &varpi, &rule, &conv).unwrap();
    assert!(r.residual < 1e-8, "{r:?}");
    assert!(r.transversal[0].abs() > 1e-3);
    let compatible = Boundary::compatible(&corners, &gamma_p).unwrap();
    let r2 = stokes_general(&corners, &compatible, &gamma_p, &varpi, &rule, &conv).unwrap();
    assert!(r2.transversal[0].abs() < 1e-14, "{r2:?}");
    assert!(r2.residual < 1e-8, "{r2:?}");
}

#[test]
fn cartan_derivative_is_coordinate_free() {
    let conv = Convention::default();
    let (chart, _) = slab();
    let x = |i| chart.coord(i);
    let gamma = Retraction::new(&chart, vec![&x(0) + &(&x(1) * &x(2)).scale(&(&u() * &c(0.7)).cos())]).unwrap();
    let xg = gamma.coords();
    for k in 0..3 {
        let full = slab_form(&chart, 1.1);
        let mut comps: Vec<SuperNumber> = (0..3).map(|_| SuperNumber::zero(2)).collect();
        comps[k] = full.components[k].clone();
        let varpi = IntegralForm::new(&full.coords, comps).unwrap();
        let d1 = varpi.cartan_d(&conv).unwrap().transform(&xg).unwrap();
        let d2 = varpi.transform(&xg, &conv).unwrap().cartan_d(&conv).unwrap();
        assert!(d1.coeff.max_diff(&d2.coeff, chart.samples()).unwrap() < 1e-12, "component {k}");
        let back = varpi.transform(&xg, &conv).unwrap().transform(&full.coords, &conv).unwrap();
        for j in 0..3 {
            assert!(back.components[j].max_diff(&varpi.components[j], chart.samples()).unwrap() < 1e-12);
        }
    }
}
