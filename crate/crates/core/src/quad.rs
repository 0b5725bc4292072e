//! Gauss-Legendre quadrature on intervals and tensor-product boxes.
//!
//! Nodes and weights are computed once per order by Newton iteration on the
//! Legendre recurrence and cached process-wide. An n-point rule integrates
//! polynomials up to degree 2n-1 exactly; all integrands in this crate are
//! smooth, so the rules converge spectrally.

use crate::geom::{BoxRegion, Vec3};
use once_cell::sync::Lazy;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

/// Nodes and weights on the reference interval `[-1, 1]`.
#[derive(Debug)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

static RULES: Lazy<Mutex<HashMap<usize, Arc<GaussRule>>>> = Lazy::new(|| Mutex::new(HashMap::new()));

/// Legendre polynomial value and derivative at `x` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

fn build_rule(n: usize) -> GaussRule {
    assert!(n >= 1, "quadrature order must be positive");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Tricomi initial guess, then Newton.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * d * d);
    }
    GaussRule { nodes, weights }
}

/// Cached n-point rule on `[-1, 1]`.
pub fn rule(n: usize) -> Arc<GaussRule> {
    let mut cache = RULES.lock().unwrap();
    cache.entry(n).or_insert_with(|| Arc::new(build_rule(n))).clone()
}

/// Integrate `f` over `[a, b]` with an n-point rule. `a > b` yields the signed integral.
pub fn integrate_interval(n: usize, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let r = rule(n);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for (x, w) in r.nodes.iter().zip(&r.weights) {
        acc += w * f(mid + half * x);
    }
    acc * half
}

/// Integrate `f` over a box with an n-point tensor rule per axis.
pub fn integrate_box(n: usize, bx: &BoxRegion, mut f: impl FnMut(&Vec3) -> f64) -> f64 {
    let r = rule(n);
    let mut mids = [0.0; 3];
    let mut halves = [0.0; 3];
    for k in 0..3 {
        mids[k] = 0.5 * (bx.lo[k] + bx.hi[k]);
        halves[k] = 0.5 * bx.length(k);
    }
    let mut acc = 0.0;
    for (xi, wi) in r.nodes.iter().zip(&r.weights) {
        let x = mids[0] + halves[0] * xi;
        let mut acc_i = 0.0;
        for (xj, wj) in r.nodes.iter().zip(&r.weights) {
            let y = mids[1] + halves[1] * xj;
            let mut acc_j = 0.0;
            for (xk, wk) in r.nodes.iter().zip(&r.weights) {
                let z = mids[2] + halves[2] * xk;
                acc_j += wk * f(&Vec3::new(x, y, z));
            }
            acc_i += wj * acc_j;
        }
        acc += wi * acc_i;
    }
    acc * halves[0] * halves[1] * halves[2]
}

/// Scaled nodes and weights of one axis cut into panels. `cuts` are interior
/// cut points (ignored outside `(a, b)`); each panel gets `base` nodes plus
/// enough to resolve `osc` radians per unit length of oscillation.
pub fn axis_panel_nodes(a: f64, b: f64, cuts: &[f64], base: usize, osc: f64) -> Vec<(f64, f64)> {
    let mut pts = vec![a, b];
    for &c in cuts {
        if c > a + 1e-12 && c < b - 1e-12 && pts.iter().all(|&p| (p - c).abs() > 1e-12) {
            pts.push(c);
        }
    }
    pts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut out = Vec::new();
    for w in pts.windows(2) {
        let width = w[1] - w[0];
        let m = base + (0.7 * osc * width).ceil() as usize;
        let r = rule(m);
        let mid = 0.5 * (w[0] + w[1]);
        let half = 0.5 * width;
        for (x, wt) in r.nodes.iter().zip(&r.weights) {
            out.push((mid + half * x, wt * half));
        }
    }
    out
}

/// Tensor Gauss rule over a box cut into per-axis panels at `cuts[k]`
/// (support edges, plateau junctions, and other flat-but-not-analytic
/// lines, across which a single rule loses its spectral rate). `osc[k]`
/// raises the node count on axis k to resolve that many radians per unit
/// length. Evaluations fan out over threads with a fixed summation order,
/// so the value does not depend on the thread count.
pub fn integrate_box_panels(
    bx: &BoxRegion,
    cuts: &[Vec<f64>; 3],
    base: usize,
    osc: [f64; 3],
    f: impl Fn(&Vec3) -> f64 + Sync,
) -> f64 {
    let ax: Vec<Vec<(f64, f64)>> = (0..3)
        .map(|k| axis_panel_nodes(bx.lo[k], bx.hi[k], &cuts[k], base, osc[k]))
        .collect();
    let (n0, n1, n2) = (ax[0].len(), ax[1].len(), ax[2].len());
    crate::par::sum(n0 * n1 * n2, |idx| {
        let (x, wi) = ax[0][idx / (n1 * n2)];
        let (y, wj) = ax[1][(idx / n2) % n1];
        let (z, wk) = ax[2][idx % n2];
        wi * wj * wk * f(&Vec3::new(x, y, z))
    })
}

/// Tensor quadrature nodes and weights on a box, row-major over axes.
pub fn box_nodes(n: usize, bx: &BoxRegion) -> (Vec<Vec3>, Vec<f64>) {
    let r = rule(n);
    let mut pts = Vec::with_capacity(n * n * n);
    let mut wts = Vec::with_capacity(n * n * n);
    let scale = bx.volume() / 8.0;
    for (xi, wi) in r.nodes.iter().zip(&r.weights) {
        let x = 0.5 * (bx.lo[0] + bx.hi[0]) + 0.5 * bx.length(0) * xi;
        for (xj, wj) in r.nodes.iter().zip(&r.weights) {
            let y = 0.5 * (bx.lo[1] + bx.hi[1]) + 0.5 * bx.length(1) * xj;
            for (xk, wk) in r.nodes.iter().zip(&r.weights) {
                let z = 0.5 * (bx.lo[2] + bx.hi[2]) + 0.5 * bx.length(2) * xk;
                pts.push(Vec3::new(x, y, z));
                wts.push(wi * wj * wk * scale);
            }
        }
    }
    (pts, wts)
}
