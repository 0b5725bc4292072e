//! Metric pairs sharing a fixed nonconstant potential. A conformal factor
//! `c = 1 + eps u` changes the effective Schrodinger potential of `(g, V)`;
//! because `V` has a nonvanishing directional derivative somewhere, it can be
//! used as a coordinate there, and sliding along that coordinate compensates
//! the change exactly. The two metrics `g1 = Psi_* g` and `g2 = c^4 g` then
//! carry the same potential in the respective gauges while `g2` gains volume.
//!
//! All exponents are specialized to dimension three: `c^4` on the metric,
//! `c^6` on the volume form.

use crate::error::{Error, Result};
use crate::field::{Diffeo, MatrixField, ScalarField};
use crate::fixedfreq::flux_divergence;
use crate::geom::{BoxRegion, Mat3, Vec3};
use crate::gevrey;
use crate::quad;
use crate::tensor;

/// 1D chart solves stop at this relative residual; well below the 1e-10
/// compatibility budget so the chart never dominates it.
const CHART_TOL: f64 = 1e-12;
const CHART_ITERS: usize = 30;
/// Step for the centered differences defining the chart Jacobian.
const JAC_STEP: f64 = 1e-6;

/// Region where one partial of the potential stays bounded away from zero,
/// so the potential serves as the `axis`-th coordinate of a chart on it.
#[derive(Debug, Clone)]
pub struct SubmersionBox {
    pub bx: BoxRegion,
    pub axis: usize,
    /// Smallest sampled `|d_axis V|` over the box. Positive by construction.
    pub min_slope: f64,
}

#[derive(Debug, Clone)]
pub struct PotConfig {
    /// Domain the pair lives on. The compensating map is the identity
    /// outside the submersion box found inside it.
    pub omega: BoxRegion,
    /// Absolute margin kept between the submersion box and the boundary.
    pub interior_margin: f64,
    /// Fraction of each submersion-box axis trimmed from both ends to place
    /// the bump support strictly inside the chart region.
    pub support_shrink: f64,
    /// Gevrey order of the bump.
    pub sigma: f64,
    /// Sup of the bump after rescaling. Kept small so the chart slide stays
    /// a graph: its Jacobian entry is `1 + O(eps * amplitude * |grad lap u|)`
    /// and the third derivatives of a width-0.4 bump reach a few thousand.
    pub u_amplitude: f64,
    /// Lattice resolution of the initial slope scan.
    pub scan_n: usize,
    /// Lattice resolution used while growing the box; the final slope is
    /// re-measured at twice this resolution.
    pub refine_n: usize,
    /// Random evaluation points for the residual certificates.
    pub check_points: usize,
    pub seed: u64,
}

impl Default for PotConfig {
    fn default() -> Self {
        PotConfig {
            omega: BoxRegion::unit(),
            interior_margin: 0.1,
            support_shrink: 0.25,
            sigma: 2.0,
            u_amplitude: 1e-3,
            scan_n: 13,
            refine_n: 11,
            check_points: 600,
            seed: 0x00C0_FFEE,
        }
    }
}

/// The two metrics, the data they were built from, and the residuals
/// measured at build time.
pub struct PotPair {
    /// Background metric.
    pub g: MatrixField,
    /// Pushforward of `g` under the compensating map.
    pub g1: MatrixField,
    /// Conformal rescaling `c^4 g`.
    pub g2: MatrixField,
    pub v: ScalarField,
    pub u: ScalarField,
    pub c: ScalarField,
    /// Effective potential of `(c^4 g, V)` in the original gauge.
    pub t: ScalarField,
    pub psi: Diffeo,
    pub eps: f64,
    pub sb: SubmersionBox,
    /// Support of `c - 1`, strictly inside the submersion box.
    pub support: BoxRegion,
    pub omega: BoxRegion,
    /// Sampled `sup |T - V|`. Zero iff eps = 0.
    pub perturbation: f64,
    /// Sampled `sup |V(Psi x) - T(x)|`.
    pub compat_residual: f64,
}

/// Scan for the steepest partial of `V` inside `omega`, then grow the
/// largest box around that point on which the sampled slope stays above
/// half its center value. Errors when every sampled partial is below 1e-8.
pub fn find_submersion_box(
    v: &ScalarField,
    omega: &BoxRegion,
    cfg: &PotConfig,
) -> Result<SubmersionBox> {
    let inner = omega.shrink(cfg.interior_margin)?;
    let pts = inner.lattice(cfg.scan_n);
    let mut max_slope = 0.0f64;
    for p in &pts {
        let gr = v.grad(p);
        for k in 0..3 {
            max_slope = max_slope.max(gr[k].abs());
        }
    }
    if max_slope < 1e-8 {
        return Err(Error::NoSubmersionDirection { max_slope });
    }
    // Among near-maximal points prefer the one closest to the center, so a
    // plateau of constant slope (any affine potential) anchors the box in
    // the middle of the domain instead of at the first corner scanned.
    let ctr = inner.center();
    let mut x0 = ctr;
    let mut axis = 0usize;
    let mut best = f64::INFINITY;
    for p in &pts {
        let gr = v.grad(p);
        for k in 0..3 {
            if gr[k].abs() >= 0.999 * max_slope {
                let d = (p - ctr).norm();
                if d < best {
                    best = d;
                    x0 = *p;
                    axis = k;
                }
            }
        }
    }
    let slope0 = v.grad(&x0)[axis].abs();
    let threshold = 0.5 * slope0;

    // Available room from x0 to the shrunken domain, per axis and side. The
    // box is grown by scaling that room: first all axes jointly, then the
    // two free axes again with the submersion axis frozen.
    let room_lo = [x0[0] - inner.lo[0], x0[1] - inner.lo[1], x0[2] - inner.lo[2]];
    let room_hi = [inner.hi[0] - x0[0], inner.hi[1] - x0[1], inner.hi[2] - x0[2]];
    let box_at = |ta: f64, tf: f64| -> Result<BoxRegion> {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for k in 0..3 {
            let t = if k == axis { ta } else { tf };
            lo[k] = x0[k] - t * room_lo[k];
            hi[k] = x0[k] + t * room_hi[k];
        }
        BoxRegion::new(lo, hi)
    };
    let ok = |ta: f64, tf: f64| -> bool {
        match box_at(ta, tf) {
            Ok(bx) => bx.lattice(cfg.refine_n).iter().all(|p| v.grad(p)[axis].abs() >= threshold),
            Err(_) => false,
        }
    };
    // x0 may sit on a face of `inner` when the slope peaks there; the room
    // on that side is then zero and growth is one-sided, which box_at
    // already encodes. A tiny scale always passes since the slope is
    // continuous and equals slope0 at x0 itself.
    let grow = |fixed: Option<f64>| -> f64 {
        let test = |t: f64| match fixed {
            Some(ta) => ok(ta, t),
            None => ok(t, t),
        };
        if test(1.0) {
            return 1.0;
        }
        let mut lo_t = 1.0;
        while lo_t > 1e-6 && !test(lo_t) {
            lo_t *= 0.5;
        }
        let mut hi_t = (2.0 * lo_t).min(1.0);
        for _ in 0..30 {
            let mid = 0.5 * (lo_t + hi_t);
            if test(mid) {
                lo_t = mid;
            } else {
                hi_t = mid;
            }
        }
        lo_t
    };
    let mut ta = grow(None);
    let mut tf = grow(Some(ta)).max(ta);
    // Re-measure on a finer lattice; back off if the coarse growth let the
    // slope dip between sample points.
    for _ in 0..20 {
        let bx = box_at(ta, tf)?;
        let fine = 2 * cfg.refine_n - 1;
        let min_slope = bx
            .lattice(fine)
            .iter()
            .map(|p| v.grad(p)[axis].abs())
            .fold(f64::INFINITY, f64::min);
        if min_slope >= threshold {
            return Ok(SubmersionBox { bx, axis, min_slope });
        }
        ta *= 0.93;
        tf *= 0.93;
    }
    Err(Error::NoSubmersionDirection { max_slope })
}

/// Effective potential `T = V c^4 + (Lap_g c) / c` of the conformally
/// rescaled metric, written in divergence form through the conductivity of
/// `g`. Outside `supp` the conformal factor is taken to be 1 and `T` returns
/// `V` exactly, bitwise.
pub fn effective_potential(
    g: &MatrixField,
    v: &ScalarField,
    c: &ScalarField,
    supp: &BoxRegion,
) -> ScalarField {
    let gamma = tensor::metric_to_conductivity(g);
    let g = g.clone();
    let v2 = v.clone();
    let c2 = c.clone();
    let supp = *supp;
    let seams = c.seams().to_vec();
    let eval = move |p: &Vec3| {
        if !supp.contains(p) {
            return v2.eval(p);
        }
        let cv = c2.eval(p);
        let w = g.eval(p).determinant().sqrt();
        v2.eval(p) * cv.powi(4) + flux_divergence(&gamma, &c2, p) / (w * cv)
    };
    ScalarField::from_fn_centered(eval, 1e-6).with_seams(&seams)
}

/// Largest sampled deviation of the effective potential from the original.
pub fn effective_potential_perturbation(t: &ScalarField, v: &ScalarField, points: &[Vec3]) -> f64 {
    points.iter().map(|p| (t.eval(p) - v.eval(p)).abs()).fold(0.0, f64::max)
}

/// Solve `V(y) = target` for the `axis` coordinate along the fiber through
/// `x`, by bracketed Newton. The slope bound makes `V` monotone along the
/// fiber, so the fiber endpoints bracket every admissible target; a target
/// outside their range means the perturbation left the chart.
fn chart_solve(v: &ScalarField, sb: &SubmersionBox, x: &Vec3, target: f64) -> Result<f64> {
    let k = sb.axis;
    let tol = CHART_TOL * (1.0 + target.abs());
    let mut p = *x;
    let mut y = x[k];
    // Identity warm start: wherever the target is V(x) itself this returns
    // x_k bitwise, which keeps the map exact off the bump support.
    let mut r = v.eval(&p) - target;
    if r.abs() <= tol {
        return Ok(y);
    }
    let (lo, hi) = sb.bx.interval(k);
    p[k] = lo;
    let va = v.eval(&p);
    p[k] = hi;
    let vb = v.eval(&p);
    let (rlo, rhi) = if va <= vb { (va, vb) } else { (vb, va) };
    if target < rlo || target > rhi {
        return Err(Error::CoordinateChart { value: target, lo: rlo, hi: rhi });
    }
    let sign = if vb >= va { 1.0 } else { -1.0 };
    let (mut blo, mut bhi) = (lo, hi);
    for _ in 0..CHART_ITERS {
        if r * sign > 0.0 {
            bhi = y;
        } else {
            blo = y;
        }
        p[k] = y;
        let d = v.grad(&p)[k];
        let mut next = if d != 0.0 { y - r / d } else { f64::NAN };
        if !(next > blo && next < bhi) {
            next = 0.5 * (blo + bhi);
        }
        y = next;
        p[k] = y;
        r = v.eval(&p) - target;
        if r.abs() <= tol {
            return Ok(y);
        }
    }
    Err(Error::CoordinateChart { value: target, lo: rlo, hi: rhi })
}

/// The compensating map: slide along the submersion axis until the original
/// potential takes the perturbed value, `V(Psi x) = T(x)`. Identity outside
/// the submersion box. The Jacobian row on the submersion axis comes from
/// centered differences of the slide; the other rows are exact identity.
///
/// Every chart solve is validated up front on a lattice and a random sample
/// of the box, so an out-of-range target surfaces here and not as a panic
/// inside a later field evaluation.
pub fn compensating_diffeo(v: &ScalarField, t: &ScalarField, sb: &SubmersionBox) -> Result<Diffeo> {
    let mut pts = sb.bx.lattice(7);
    pts.extend(sb.bx.sample(200, 0x5EED));
    for p in &pts {
        chart_solve(v, sb, p, t.eval(p))?;
    }
    let fiber = {
        let (v, t, sb) = (v.clone(), t.clone(), sb.clone());
        move |x: &Vec3| -> f64 {
            chart_solve(&v, &sb, x, t.eval(x))
                .unwrap_or_else(|e| panic!("compensating chart at {x:?}: {e}"))
        }
    };
    let axis = sb.axis;
    let fwd = {
        let fiber = fiber.clone();
        move |x: &Vec3| {
            let mut y = *x;
            y[axis] = fiber(x);
            y
        }
    };
    let jac = move |x: &Vec3| {
        let mut j = Mat3::identity();
        for col in 0..3 {
            let mut a = *x;
            let mut b = *x;
            a[col] += JAC_STEP;
            b[col] -= JAC_STEP;
            j[(axis, col)] = (fiber(&a) - fiber(&b)) / (2.0 * JAC_STEP);
        }
        j
    };
    Ok(Diffeo::from_parts(fwd, jac, Some(sb.bx)))
}

/// Assemble the pair at deformation size `eps >= 0`: locate the chart, put
/// a bump `u` strictly inside it, rescale to `g2 = (1 + eps u)^4 g`, and
/// push `g` forward along the compensating slide to get `g1`. At eps = 0
/// every piece collapses to the background exactly.
pub fn build_pair(g: &MatrixField, v: &ScalarField, eps: f64, cfg: &PotConfig) -> Result<PotPair> {
    assert!(eps >= 0.0, "deformation size must be nonnegative");
    assert!(
        cfg.support_shrink > 0.0 && cfg.support_shrink < 0.5,
        "support shrink must leave a nonempty interior box"
    );
    let sb = find_submersion_box(v, &cfg.omega, cfg)?;
    let mut lo = sb.bx.lo;
    let mut hi = sb.bx.hi;
    for k in 0..3 {
        let w = hi[k] - lo[k];
        lo[k] += cfg.support_shrink * w;
        hi[k] -= cfg.support_shrink * w;
    }
    let support = BoxRegion::new(lo, hi)?;
    let raw = gevrey::bump_field(&support, cfg.sigma)?;
    let mid = raw.eval(&support.center());
    let u = raw.scale(cfg.u_amplitude / mid);
    let c = u.affine(1.0, eps);
    let t = effective_potential(g, v, &c, &support);

    let mut pts = cfg.omega.sample(cfg.check_points, cfg.seed);
    pts.extend(support.sample(cfg.check_points / 4, cfg.seed ^ 0x9E37_79B9));
    let perturbation = effective_potential_perturbation(&t, v, &pts);

    let psi = compensating_diffeo(v, &t, &sb)?;
    let compat_residual = pts
        .iter()
        .map(|p| (v.eval(&psi.apply(p)) - t.eval(p)).abs())
        .fold(0.0, f64::max);

    let (glo, ghi) = g.ellipticity();
    // sup u = u_amplitude exactly (product bump peaks at the center), so the
    // conformal window is sharp; the pushforward window only needs to hold
    // the O(eps * amplitude * |grad lap u|) Jacobian drift.
    let cmax = (1.0 + eps * cfg.u_amplitude).powi(4);
    let g2 = g.scaled_by_power(&c, 4.0, (glo, ghi * cmax));
    let g1 = tensor::pushforward_metric(g, &psi, (0.25 * glo, 4.0 * ghi));

    Ok(PotPair {
        g: g.clone(),
        g1,
        g2,
        v: v.clone(),
        u,
        c,
        t,
        psi,
        eps,
        sb,
        support,
        omega: cfg.omega,
        perturbation,
        compat_residual,
    })
}

/// Riemannian volumes of the three metrics over the domain, the conformal
/// volume surplus, and its closed form `int (c^6 - 1) dV_g` integrated
/// independently over the bump support.
#[derive(Debug, Clone, serde::Serialize)]
pub struct VolumeReport {
    pub vol_g: f64,
    pub vol_g1: f64,
    pub vol_g2: f64,
    /// `vol_g2 - vol_g`. Strictly positive for eps > 0.
    pub surplus: f64,
    /// The same surplus through the conformal weight formula.
    pub formula_surplus: f64,
    /// `|vol_g1 - vol_g|`. The slide preserves volume, so this is pure
    /// quadrature and inversion noise.
    pub pushforward_defect: f64,
}

pub fn volume_certificate(pair: &PotPair, quad_n: usize) -> VolumeReport {
    let vol = |m: &MatrixField| {
        quad::integrate_box(quad_n, &pair.omega, |p| m.eval(p).determinant().sqrt())
    };
    let vol_g = vol(&pair.g);
    let vol_g1 = vol(&pair.g1);
    let vol_g2 = vol(&pair.g2);
    let formula_surplus = quad::integrate_box(quad_n, &pair.support, |p| {
        let cv = pair.c.eval(p);
        (cv.powi(6) - 1.0) * pair.g.eval(p).determinant().sqrt()
    });
    VolumeReport {
        vol_g,
        vol_g1,
        vol_g2,
        surplus: vol_g2 - vol_g,
        formula_surplus,
        pushforward_defect: (vol_g1 - vol_g).abs(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_potential() -> ScalarField {
        ScalarField::coordinate(0).affine(1.0, 1.0)
    }

    fn wavy_potential() -> ScalarField {
        // sin(3 x0) + x1: slope on axis 0 peaks at 3 where cos(3 x0) = 1 and
        // crosses zero inside the domain, so the box must dodge the flat set.
        ScalarField::from_parts(
            std::sync::Arc::new(|p: &Vec3| (3.0 * p[0]).sin() + p[1]),
            std::sync::Arc::new(|p: &Vec3| Vec3::new(3.0 * (3.0 * p[0]).cos(), 1.0, 0.0)),
            std::sync::Arc::new(|p: &Vec3| {
                let mut h = Mat3::zeros();
                h[(0, 0)] = -9.0 * (3.0 * p[0]).sin();
                h
            }),
        )
    }

    #[test]
    fn submersion_box_for_linear_potential_spans_interior() {
        let cfg = PotConfig::default();
        let sb = find_submersion_box(&linear_potential(), &cfg.omega, &cfg).unwrap();
        assert_eq!(sb.axis, 0);
        assert!((sb.min_slope - 1.0).abs() < 1e-12);
        // Constant slope never trips the half-center criterion, so the box
        // fills the whole margin-shrunken domain.
        let inner = cfg.omega.shrink(cfg.interior_margin).unwrap();
        for k in 0..3 {
            assert!((sb.bx.lo[k] - inner.lo[k]).abs() < 1e-12);
            assert!((sb.bx.hi[k] - inner.hi[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_potential_rejected() {
        let cfg = PotConfig::default();
        let err = find_submersion_box(&ScalarField::constant(5.0), &cfg.omega, &cfg).unwrap_err();
        match err {
            Error::NoSubmersionDirection { max_slope } => assert_eq!(max_slope, 0.0),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn submersion_box_avoids_flat_spots() {
        let cfg = PotConfig::default();
        let v = wavy_potential();
        let sb = find_submersion_box(&v, &cfg.omega, &cfg).unwrap();
        assert_eq!(sb.axis, 0);
        // Oracle: re-measure the slope on a lattice finer than anything the
        // search used, from the closed form of the derivative. The grids are
        // not nested, so agreement is up to one sampling gap of the slope's
        // own derivative (|d/dx 3cos(3x)| <= 9).
        let fine_min = sb
            .bx
            .lattice(4 * cfg.refine_n)
            .iter()
            .map(|p| (3.0 * (3.0 * p[0]).cos()).abs())
            .fold(f64::INFINITY, f64::min);
        let gap = 9.0 * sb.bx.length(0) / (2.0 * cfg.refine_n as f64 - 2.0);
        assert!(fine_min > 1.0, "fine-lattice slope {fine_min} too close to flat");
        assert!((fine_min - sb.min_slope).abs() <= gap);
        assert!(sb.min_slope >= 0.5 * 3.0 * 0.999 - 0.2);
        // The flat set 3 x0 = pi/2 must lie outside.
        let flat = std::f64::consts::FRAC_PI_2 / 3.0;
        assert!(!(sb.bx.lo[0] <= flat && flat <= sb.bx.hi[0]));
    }

    #[test]
    fn effective_potential_reduces_to_original_for_unit_factor() {
        let g = MatrixField::identity();
        let v = linear_potential();
        let supp = BoxRegion::cube(0.3, 0.7).unwrap();
        let t = effective_potential(&g, &v, &ScalarField::constant(1.0), &supp);
        for p in BoxRegion::unit().lattice(5) {
            assert_eq!(t.eval(&p), v.eval(&p));
        }
    }

    #[test]
    fn effective_potential_matches_symbolic_expansion() {
        // On the identity metric with c = 1 + eps u the definition collapses
        // to T - V = V((1+eps u)^4 - 1) + eps (lap u)/(1 + eps u). The right
        // side below is assembled purely from the bump's analytic Hessian,
        // independently of the divergence-form path under test.
        let g = MatrixField::identity();
        let v = linear_potential();
        let supp = BoxRegion::cube(0.3, 0.7).unwrap();
        let raw = gevrey::bump_field(&supp, 2.0).unwrap();
        let mid = raw.eval(&supp.center());
        let u = raw.scale(1e-3 / mid);
        let eps = 0.05;
        let c = u.affine(1.0, eps);
        let t = effective_potential(&g, &v, &c, &supp);
        let mut worst = 0.0f64;
        for p in supp.sample(300, 7) {
            let uv = u.eval(&p);
            let lap = u.hess(&p).trace();
            let vv = v.eval(&p);
            let oracle = vv * (1.0 + eps * uv).powi(4) - vv + eps * lap / (1.0 + eps * uv);
            worst = worst.max((t.eval(&p) - vv - oracle).abs() / (1.0 + oracle.abs()));
        }
        assert!(worst <= 1e-8, "divergence form strays from expansion by {worst:.3e}");
        // Outside the support the factor is 1 and T is V, bitwise.
        let far = Vec3::new(0.1, 0.2, 0.9);
        assert_eq!(t.eval(&far), v.eval(&far));
    }

    #[test]
    fn perturbation_is_linear_in_eps() {
        let g = MatrixField::identity();
        let v = linear_potential();
        let cfg = PotConfig::default();
        let pts = cfg.omega.sample(400, 3);
        let sweep = [0.02, 0.04, 0.08];
        let mut rates = Vec::new();
        for &eps in &sweep {
            let pair = build_pair(&g, &v, eps, &cfg).unwrap();
            assert!(pair.perturbation > 0.0);
            rates.push(effective_potential_perturbation(&pair.t, &v, &pts) / eps);
        }
        for w in rates.windows(2) {
            let ratio = w[1] / w[0];
            assert!(
                (0.85..=1.15).contains(&ratio),
                "perturbation per eps drifts: {rates:?}"
            );
        }
        // eps = 0 gives T = V identically, not just small.
        let flat = build_pair(&g, &v, 0.0, &cfg).unwrap();
        assert_eq!(flat.perturbation, 0.0);
    }

    #[test]
    fn compensating_map_is_identity_when_potentials_match() {
        let cfg = PotConfig::default();
        let v = linear_potential();
        let sb = find_submersion_box(&v, &cfg.omega, &cfg).unwrap();
        let psi = compensating_diffeo(&v, &v.clone(), &sb).unwrap();
        for p in cfg.omega.lattice(6) {
            assert_eq!(psi.apply(&p), p);
            // The slide itself is exact; the Jacobian row is still taken by
            // differences, which costs a few ulps of the step quotient.
            let dj = (psi.jac(&p) - Mat3::identity()).abs().max();
            assert!(dj <= 1e-9, "jacobian drift {dj:.3e} at {p:?}");
        }
    }

    #[test]
    fn linear_potential_chart_is_closed_form() {
        // For V = 1 + x0 the slide is y0 = T(x) - 1: one Newton step from
        // the identity start lands there exactly.
        let g = MatrixField::identity();
        let pair = build_pair(&g, &linear_potential(), 0.05, &PotConfig::default()).unwrap();
        for p in pair.support.sample(300, 21) {
            let y = pair.psi.apply(&p);
            assert!((y[0] - (pair.t.eval(&p) - 1.0)).abs() <= 1e-12);
            assert_eq!(y[1], p[1]);
            assert_eq!(y[2], p[2]);
        }
    }

    #[test]
    fn chart_residual_small_for_nonlinear_potential() {
        let g = MatrixField::identity();
        let v = wavy_potential();
        let cfg = PotConfig::default();
        let pair = build_pair(&g, &v, 0.05, &cfg).unwrap();
        assert!(
            pair.compat_residual <= 1e-10,
            "V(Psi x) = T(x) violated by {:.3e}",
            pair.compat_residual
        );
        let mut worst = 0.0f64;
        for p in cfg.omega.sample(1000, 17) {
            worst = worst.max((v.eval(&pair.psi.apply(&p)) - pair.t.eval(&p)).abs());
        }
        assert!(worst <= 1e-10, "fresh-sample chart residual {worst:.3e}");
    }

    #[test]
    fn chart_range_violation_rejected() {
        let cfg = PotConfig::default();
        let v = linear_potential();
        let sb = find_submersion_box(&v, &cfg.omega, &cfg).unwrap();
        // A shift of 10 exceeds the whole range of V over the box.
        let t = v.affine(10.0, 1.0);
        match compensating_diffeo(&v, &t, &sb) {
            Err(Error::CoordinateChart { value, lo, hi }) => {
                assert!(value > hi && lo < hi);
            }
            other => panic!("expected chart violation, got {:?}", other.err()),
        }
    }

    #[test]
    fn pair_certificates_at_default_size() {
        let g = MatrixField::identity();
        let v = linear_potential();
        let cfg = PotConfig::default();
        let pair = build_pair(&g, &v, 0.05, &cfg).unwrap();
        assert!(pair.compat_residual <= 1e-10);
        assert!(pair.perturbation > 1e-4, "perturbation {} too small", pair.perturbation);
        // The slide is orientation-preserving and fixes the boundary.
        let chk = tensor::check_diffeo(&pair.psi, &cfg.omega, 9).unwrap();
        assert!(chk.identity_on_boundary);
        assert!(chk.min_det > 0.5 && chk.max_det < 2.0, "det range {chk:?}");
        // Far from the bump the conformal factor is 1 bitwise; the
        // pushforward still pays finite-difference noise on the Jacobian row.
        let far = Vec3::new(0.15, 0.5, 0.5);
        assert_eq!(pair.g2.eval(&far), g.eval(&far));
        assert!((pair.g1.eval(&far) - g.eval(&far)).abs().max() <= 1e-9);
        pair.g1.verify_on(&cfg.omega, 6).unwrap();
        pair.g2.verify_on(&cfg.omega, 6).unwrap();
    }

    #[test]
    fn metrics_stay_within_order_eps_of_background() {
        let g = MatrixField::identity();
        let v = linear_potential();
        let cfg = PotConfig::default();
        let pts = cfg.omega.sample(250, 5);
        let mut rates: Vec<[f64; 2]> = Vec::new();
        for &eps in &[0.02, 0.04, 0.08] {
            let pair = build_pair(&g, &v, eps, &cfg).unwrap();
            let mut d1 = 0.0f64;
            let mut d2 = 0.0f64;
            for p in &pts {
                let base = g.eval(p);
                d1 = d1.max((pair.g1.eval(p) - base).abs().max());
                d2 = d2.max((pair.g2.eval(p) - base).abs().max());
            }
            rates.push([d1 / eps, d2 / eps]);
        }
        for w in rates.windows(2) {
            for j in 0..2 {
                let ratio = w[1][j] / w[0][j];
                assert!(
                    (0.7..=1.4).contains(&ratio),
                    "metric deviation not O(eps): {rates:?}"
                );
            }
        }
    }

    #[test]
    fn eps_zero_collapses_to_background() {
        let g = MatrixField::identity();
        let v = linear_potential();
        let pair = build_pair(&g, &v, 0.0, &PotConfig::default()).unwrap();
        assert_eq!(pair.perturbation, 0.0);
        assert_eq!(pair.compat_residual, 0.0);
        for p in pair.omega.lattice(5) {
            assert_eq!(pair.psi.apply(&p), p);
            assert_eq!(pair.t.eval(&p), v.eval(&p));
            assert_eq!(pair.g2.eval(&p), g.eval(&p));
            // Exact up to difference-quotient ulps in the Jacobian row.
            assert!((pair.g1.eval(&p) - g.eval(&p)).abs().max() <= 1e-9);
        }
    }

    #[test]
    fn volume_surplus_positive_and_matches_formula() {
        let g = MatrixField::identity();
        let v = linear_potential();
        let cfg = PotConfig::default();
        let pair = build_pair(&g, &v, 0.05, &cfg).unwrap();
        let rep = volume_certificate(&pair, 24);
        assert!(rep.pushforward_defect <= 1e-6, "slide lost volume: {rep:?}");
        assert!(rep.surplus > 0.0, "conformal factor must add volume: {rep:?}");
        assert!(
            (rep.surplus - rep.formula_surplus).abs() <= 1e-8,
            "surplus {:.6e} vs formula {:.6e}",
            rep.surplus,
            rep.formula_surplus
        );
        // First order in eps the surplus is 6 eps int u dV_g; at the small
        // end of the sweep the quadratic remainder is far below 10%.
        let small = build_pair(&g, &v, 0.02, &cfg).unwrap();
        let rs = volume_certificate(&small, 24);
        let lead = 6.0
            * 0.02
            * quad::integrate_box(24, &small.support, |p| {
                small.u.eval(p) * g.eval(p).determinant().sqrt()
            });
        assert!(
            (rs.surplus / lead - 1.0).abs() <= 0.1,
            "surplus {:.6e} vs leading term {:.6e}",
            rs.surplus,
            lead
        );
    }

    #[test]
    fn pair_with_curved_background_keeps_certificates() {
        // Mild anisotropic background, still diagonal so ellipticity is
        // read off directly.
        let gm = MatrixField::from_fn(
            |p| {
                let mut m = Mat3::identity();
                m[(0, 0)] = 1.3 + 0.2 * (2.0 * p[1]).sin();
                m[(1, 1)] = 0.9;
                m[(2, 2)] = 1.1 + 0.1 * p[0];
                m
            },
            (0.85, 1.6),
        );
        let v = linear_potential();
        let cfg = PotConfig::default();
        let pair = build_pair(&gm, &v, 0.05, &cfg).unwrap();
        assert!(pair.compat_residual <= 1e-10);
        assert!(pair.perturbation > 1e-4);
        let rep = volume_certificate(&pair, 24);
        assert!(rep.surplus > 0.0);
        assert!((rep.surplus - rep.formula_surplus).abs() <= 1e-8);
        assert!(rep.pushforward_defect <= 1e-6);
    }
}
