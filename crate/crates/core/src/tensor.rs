//! Dictionary between Riemannian metrics and anisotropic conductivities in
//! three dimensions, pushforwards under diffeomorphisms, and the conformal
//! weight integral that pushforwards preserve.

use crate::error::{Error, Result};
use crate::field::{Diffeo, MatrixField};
use crate::geom::{BoxRegion, Mat3, Vec3};
use crate::quad;

/// `gamma = |g|^{1/2} g^{-1}`. Ellipticity window derived from the input's.
pub fn metric_to_conductivity(g: &MatrixField) -> MatrixField {
    let (lo, hi) = g.ellipticity();
    let claim = (lo.powf(1.5) / hi, hi.powf(1.5) / lo);
    let g = g.clone();
    MatrixField::from_fn(
        move |p| {
            let m = g.eval(p);
            let det = m.determinant();
            debug_assert!(det > 0.0);
            det.sqrt() * m.try_inverse().expect("metric not invertible")
        },
        claim,
    )
}

/// `g = (det gamma)^{1/(n-2)} gamma^{-1}` with n = 3, inverting the map above.
pub fn conductivity_to_metric(gamma: &MatrixField) -> MatrixField {
    let (lo, hi) = gamma.ellipticity();
    let claim = (lo.powi(3) / hi, hi.powi(3) / lo);
    let gamma = gamma.clone();
    MatrixField::from_fn(
        move |p| {
            let m = gamma.eval(p);
            let det = m.determinant();
            debug_assert!(det > 0.0);
            det * m.try_inverse().expect("conductivity not invertible")
        },
        claim,
    )
}

/// Conformal weight of a conductivity matrix, `(det)^{1/(n-2)}` at n = 3.
pub fn weight(gamma_at_p: &Mat3) -> f64 {
    gamma_at_p.determinant()
}

/// Integral of the conformal weight over the box. Unchanged when the
/// conductivity is pushed forward by an orientation-preserving
/// diffeomorphism mapping the box onto itself.
pub fn weight_integral(gamma: &MatrixField, bx: &BoxRegion, quad_n: usize) -> f64 {
    quad::integrate_box(quad_n, bx, |p| weight(&gamma.eval(p)))
}

/// Conductivity pushforward: at y the value is `J gamma J^T / |det J|` with
/// everything taken at the preimage `x = Psi^{-1}(y)`.
pub fn pushforward_conductivity(
    gamma: &MatrixField,
    psi: &Diffeo,
    claim: (f64, f64),
) -> MatrixField {
    let gamma = gamma.clone();
    let psi = psi.clone();
    MatrixField::from_fn(
        move |y| {
            let x = psi.inverse(y).unwrap_or_else(|e| panic!("pushforward: {e}"));
            let j = psi.jac(&x);
            let det = j.determinant();
            assert!(det > 0.0, "pushforward requires det DPsi > 0, got {det}");
            j * gamma.eval(&x) * j.transpose() / det
        },
        claim,
    )
}

/// Metric pushforward: at y the value is `J^{-T} g J^{-1}` at the preimage.
pub fn pushforward_metric(g: &MatrixField, psi: &Diffeo, claim: (f64, f64)) -> MatrixField {
    let g = g.clone();
    let psi = psi.clone();
    MatrixField::from_fn(
        move |y| {
            let x = psi.inverse(y).unwrap_or_else(|e| panic!("pushforward: {e}"));
            let j = psi.jac(&x);
            let ji = j.try_inverse().unwrap_or_else(|| {
                panic!("pushforward: singular Jacobian, det {}", j.determinant())
            });
            ji.transpose() * g.eval(&x) * ji
        },
        claim,
    )
}

/// Largest relative violation, over the sample points, of the determinant
/// law `det((Psi_* gamma)(Psi x)) * |det J| = det gamma(x)` for n = 3.
/// Evaluates the pushforward through its field interface, so Newton
/// inversion round-trip error is included in the residual.
pub fn det_law_residual(
    gamma: &MatrixField,
    pushed: &MatrixField,
    psi: &Diffeo,
    points: &[Vec3],
) -> f64 {
    let mut worst: f64 = 0.0;
    for x in points {
        let y = psi.apply(x);
        let det_j = psi.det_jac(x).abs();
        let lhs = pushed.eval(&y).determinant() * det_j;
        let rhs = gamma.eval(x).determinant();
        worst = worst.max((lhs - rhs).abs() / rhs.abs().max(1e-300));
    }
    worst
}

/// Lattice validation of a diffeomorphism of `omega`.
#[derive(Clone, Copy, Debug)]
pub struct DiffeoCheck {
    pub min_det: f64,
    pub max_det: f64,
    /// Sup of |Psi(x) - x| over boundary lattice points; zero when the map
    /// is exactly the identity there.
    pub boundary_sup: f64,
    pub identity_on_boundary: bool,
}

/// Checks `det DPsi > 0` on a lattice and that boundary lattice points are
/// fixed. Fails with the offending determinant if orientation flips.
pub fn check_diffeo(psi: &Diffeo, omega: &BoxRegion, lattice_n: usize) -> Result<DiffeoCheck> {
    let mut min_det = f64::INFINITY;
    let mut max_det = f64::NEG_INFINITY;
    let mut boundary_sup: f64 = 0.0;
    for p in omega.lattice(lattice_n) {
        let det = psi.det_jac(&p);
        if det <= 0.0 {
            return Err(Error::OrientationFault { det });
        }
        min_det = min_det.min(det);
        max_det = max_det.max(det);
        if !omega.contains_interior(&p) {
            boundary_sup = boundary_sup.max((psi.apply(&p) - p).norm());
        }
    }
    Ok(DiffeoCheck {
        min_det,
        max_det,
        boundary_sup,
        identity_on_boundary: boundary_sup == 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Diffeo;

    fn diag(a: f64, b: f64, c: f64) -> Mat3 {
        Mat3::from_diagonal(&Vec3::new(a, b, c))
    }

    /// Bijection of [0,1] in the first coordinate, identity elsewhere:
    /// x1 -> x1 + a*x1^2(1-x1)^2 with a = 0.5 keeps the slope above 0.9.
    fn squeeze() -> Diffeo {
        let a = 0.5;
        Diffeo::from_parts(
            move |p: &Vec3| {
                let t = p[0];
                Vec3::new(t + a * t * t * (1.0 - t) * (1.0 - t), p[1], p[2])
            },
            move |p: &Vec3| {
                let t = p[0];
                let mut j = Mat3::identity();
                j[(0, 0)] = 1.0 + a * 2.0 * t * (1.0 - t) * (1.0 - 2.0 * t);
                j
            },
            None,
        )
    }

    #[test]
    fn dictionary_on_constant_diagonal() {
        let g = MatrixField::constant(diag(2.0, 3.0, 4.0), (2.0, 4.0));
        let gamma = metric_to_conductivity(&g);
        let p = Vec3::new(0.3, 0.3, 0.3);
        let got = gamma.eval(&p);
        let s = 24.0f64.sqrt();
        let want = diag(s / 2.0, s / 3.0, s / 4.0);
        assert!((got - want).abs().max() < 1e-13);
        // det(gamma) = |g|^{1/2} in three dimensions.
        assert!((got.determinant() - s).abs() < 1e-12);
    }

    #[test]
    fn dictionary_round_trip() {
        let g = MatrixField::from_fn(
            |p| diag(2.0 + p[0], 3.0, 4.0 - p[2]),
            (2.0, 5.0),
        );
        let back = conductivity_to_metric(&metric_to_conductivity(&g));
        for p in BoxRegion::unit().lattice(4) {
            assert!((back.eval(&p) - g.eval(&p)).abs().max() < 1e-11);
        }
    }

    #[test]
    fn weight_integral_of_constant() {
        let gamma = MatrixField::constant(diag(2.0, 3.0, 4.0), (2.0, 4.0));
        let v = weight_integral(&gamma, &BoxRegion::unit(), 8);
        assert!((v - 24.0).abs() < 1e-12);
    }

    #[test]
    fn weight_integral_survives_pushforward() {
        let gamma = MatrixField::constant(diag(2.0, 3.0, 4.0), (2.0, 4.0));
        let psi = squeeze();
        let pushed = pushforward_conductivity(&gamma, &psi, (0.1, 100.0));
        let v = weight_integral(&pushed, &BoxRegion::unit(), 32);
        assert!((v - 24.0).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn determinant_law_holds_through_field_interface() {
        let gamma = MatrixField::from_fn(|p| diag(2.0 + p[1], 3.0, 4.0), (2.0, 4.0));
        let psi = squeeze();
        let pushed = pushforward_conductivity(&gamma, &psi, (0.1, 100.0));
        let pts: Vec<Vec3> = BoxRegion::cube(0.1, 0.9).unwrap().lattice(4);
        let r = det_law_residual(&gamma, &pushed, &psi, &pts);
        assert!(r < 1e-10, "residual {r}");
    }

    #[test]
    fn metric_pushforward_matches_conductivity_dictionary() {
        // Pushing forward the metric and translating commute with the
        // dictionary: gamma(Psi_* g) = Psi_*(gamma(g)).
        let g = MatrixField::constant(diag(2.0, 3.0, 4.0), (2.0, 4.0));
        let psi = squeeze();
        let lhs = metric_to_conductivity(&pushforward_metric(&g, &psi, (0.1, 100.0)));
        let rhs = pushforward_conductivity(&metric_to_conductivity(&g), &psi, (0.1, 100.0));
        for p in BoxRegion::cube(0.2, 0.8).unwrap().lattice(3) {
            let y = psi.apply(&p);
            assert!((lhs.eval(&y) - rhs.eval(&y)).abs().max() < 1e-10);
        }
    }

    #[test]
    fn lattice_check_flags_orientation_loss() {
        let bad = Diffeo::from_parts(
            |p| Vec3::new(-p[0], p[1], p[2]),
            |_| {
                let mut j = Mat3::identity();
                j[(0, 0)] = -1.0;
                j
            },
            None,
        );
        assert!(matches!(
            check_diffeo(&bad, &BoxRegion::unit(), 3),
            Err(Error::OrientationFault { .. })
        ));
    }

    #[test]
    fn supported_diffeo_is_identity_on_boundary() {
        let inner = BoxRegion::cube(0.3, 0.7).unwrap();
        let psi = Diffeo::from_parts(
            |p| Vec3::new(p[0] + 0.01 * (p[0] - 0.3) * (0.7 - p[0]), p[1], p[2]),
            |p| {
                let mut j = Mat3::identity();
                j[(0, 0)] = 1.0 + 0.01 * (1.0 - 2.0 * p[0]);
                j
            },
            Some(inner),
        );
        let chk = check_diffeo(&psi, &BoxRegion::unit(), 5).unwrap();
        assert!(chk.identity_on_boundary);
        assert!(chk.min_det > 0.9);
    }
}
