//! Chebyshev interpolation on boxes, up to three axes.
//!
//! A `ChebTensor` stores a truncated Chebyshev series per axis, fit at
//! first-kind nodes. Differentiation and antidifferentiation act on the
//! coefficients exactly, so cached interpolants of smooth integrands keep
//! spectral accuracy through repeated integration. Internally coefficients
//! use the halved-constant convention: f = a0/2 + sum_{j>=1} a_j T_j.

use crate::geom::Vec3;
use std::f64::consts::PI;

#[derive(Clone, Debug)]
pub struct ChebTensor {
    dims: [usize; 3],
    lo: [f64; 3],
    hi: [f64; 3],
    coef: Vec<f64>,
}

/// First-kind Chebyshev nodes on [a, b], the sample points `fit` uses.
pub fn nodes(n: usize, a: f64, b: f64) -> Vec<f64> {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    if n == 1 {
        return vec![mid];
    }
    (0..n).map(|k| mid + half * (PI * (k as f64 + 0.5) / n as f64).cos()).collect()
}

fn clenshaw(coef: &[f64], t: f64) -> f64 {
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for j in (1..coef.len()).rev() {
        let b = coef[j] + 2.0 * t * b1 - b2;
        b2 = b1;
        b1 = b;
    }
    0.5 * coef[0] + t * b1 - b2
}

/// Series coefficients of the derivative, same convention, length n-1 (min 1).
fn deriv_series(a: &[f64], scale: f64) -> Vec<f64> {
    let n = a.len();
    if n <= 1 {
        return vec![0.0];
    }
    let mut d = vec![0.0; n - 1];
    let mut dj2 = 0.0; // d_{j+2}
    let mut dj1 = 0.0; // d_{j+1}
    for j in (0..n - 1).rev() {
        let dj = dj2 + 2.0 * (j as f64 + 1.0) * a[j + 1];
        dj2 = dj1;
        dj1 = dj;
        d[j] = dj * scale;
    }
    d
}

/// Series coefficients of the antiderivative vanishing at t = -1, length n+1.
fn antideriv_series(a: &[f64], scale: f64) -> Vec<f64> {
    let n = a.len();
    let get = |j: usize| if j < n { a[j] } else { 0.0 };
    let mut out = vec![0.0; n + 1];
    let mut alt = 0.0;
    for j in 1..=n {
        // The halved a0 makes this formula uniform down to j = 1.
        let aj = (get(j - 1) - get(j + 1)) / (2.0 * j as f64) * scale;
        out[j] = aj;
        alt += aj * if j % 2 == 0 { 1.0 } else { -1.0 };
    }
    out[0] = -2.0 * alt;
    out
}

impl ChebTensor {
    fn grid(lo: [f64; 3], hi: [f64; 3], dims: [usize; 3]) -> [Vec<f64>; 3] {
        assert!(dims.iter().all(|&d| d >= 1));
        for k in 0..3 {
            assert!(hi[k] > lo[k] || dims[k] == 1, "degenerate axis {k} needs dim 1");
        }
        [
            nodes(dims[0], lo[0], hi[0]),
            nodes(dims[1], lo[1], hi[1]),
            nodes(dims[2], lo[2], hi[2]),
        ]
    }

    fn from_samples(lo: [f64; 3], hi: [f64; 3], dims: [usize; 3], data: Vec<f64>) -> Self {
        let mut t = Self { dims, lo, hi, coef: data };
        for k in 0..3 {
            t.transform_axis(k);
        }
        t
    }

    /// Fit `f` on the box with `dims[k]` coefficients along axis k.
    pub fn fit(lo: [f64; 3], hi: [f64; 3], dims: [usize; 3], f: impl Fn(&Vec3) -> f64) -> Self {
        let ax = Self::grid(lo, hi, dims);
        let (n0, n1, n2) = (dims[0], dims[1], dims[2]);
        let mut data = vec![0.0; n0 * n1 * n2];
        for i0 in 0..n0 {
            for i1 in 0..n1 {
                for i2 in 0..n2 {
                    let p = Vec3::new(ax[0][i0], ax[1][i1], ax[2][i2]);
                    data[(i0 * n1 + i1) * n2 + i2] = f(&p);
                }
            }
        }
        Self::from_samples(lo, hi, dims, data)
    }

    /// Fit all three components of a vector field on one shared sample pass,
    /// spread over threads. Matters when each sample is expensive (flow
    /// maps).
    pub fn fit3(
        lo: [f64; 3],
        hi: [f64; 3],
        dims: [usize; 3],
        f: impl Fn(&Vec3) -> Vec3 + Sync,
    ) -> [Self; 3] {
        let ax = Self::grid(lo, hi, dims);
        let (n1, n2) = (dims[1], dims[2]);
        let samples = crate::par::map(dims[0] * n1 * n2, |idx| {
            let p = Vec3::new(ax[0][idx / (n1 * n2)], ax[1][(idx / n2) % n1], ax[2][idx % n2]);
            f(&p)
        });
        let mut data = [
            Vec::with_capacity(samples.len()),
            Vec::with_capacity(samples.len()),
            Vec::with_capacity(samples.len()),
        ];
        for v in &samples {
            for c in 0..3 {
                data[c].push(v[c]);
            }
        }
        let [d0, d1, d2] = data;
        [
            Self::from_samples(lo, hi, dims, d0),
            Self::from_samples(lo, hi, dims, d1),
            Self::from_samples(lo, hi, dims, d2),
        ]
    }

    /// Replace samples along axis k by series coefficients.
    fn transform_axis(&mut self, k: usize) {
        let n = self.dims[k];
        if n == 1 {
            // Single sample s: series a0/2 = s, so a0 = 2s.
            for v in self.coef.iter_mut() {
                *v *= 2.0;
            }
            return;
        }
        let mut cosm = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                cosm[j * n + i] = (PI * j as f64 * (i as f64 + 0.5) / n as f64).cos();
            }
        }
        let scale = 2.0 / n as f64;
        self.map_fibers(k, n, |fiber, out| {
            for j in 0..n {
                let mut s = 0.0;
                for i in 0..n {
                    s += cosm[j * n + i] * fiber[i];
                }
                out[j] = s * scale;
            }
        });
    }

    /// Apply `op` to every fiber along axis k, writing `out_len` values back.
    fn map_fibers(&mut self, k: usize, out_len: usize, op: impl Fn(&[f64], &mut [f64])) {
        let [n0, n1, n2] = self.dims;
        let stride = match k {
            0 => n1 * n2,
            1 => n2,
            _ => 1,
        };
        let n = self.dims[k];
        let mut new_dims = self.dims;
        new_dims[k] = out_len;
        let new_stride = match k {
            0 => new_dims[1] * new_dims[2],
            1 => new_dims[2],
            _ => 1,
        };
        let mut out = vec![0.0; new_dims[0] * new_dims[1] * new_dims[2]];
        let mut fiber = vec![0.0; n];
        let mut obuf = vec![0.0; out_len];
        let outer: Vec<(usize, usize)> = match k {
            0 => (0..n1 * n2).map(|r| (r, r)).collect(),
            1 => (0..n0)
                .flat_map(|i0| (0..n2).map(move |i2| (i0 * n1 * n2 + i2, i0 * new_dims[1] * n2 + i2)))
                .collect(),
            _ => (0..n0 * n1).map(|r| (r * n2, r * out_len)).collect(),
        };
        for (base_in, base_out) in outer {
            for i in 0..n {
                fiber[i] = self.coef[base_in + i * stride];
            }
            op(&fiber, &mut obuf);
            for (i, &v) in obuf.iter().enumerate() {
                out[base_out + i * new_stride] = v;
            }
        }
        self.dims = new_dims;
        self.coef = out;
    }

    fn map_t(&self, k: usize, x: f64) -> f64 {
        if self.dims[k] == 1 && self.hi[k] <= self.lo[k] {
            return 0.0;
        }
        (2.0 * x - self.lo[k] - self.hi[k]) / (self.hi[k] - self.lo[k])
    }

    pub fn eval(&self, p: &Vec3) -> f64 {
        let [n0, n1, n2] = self.dims;
        let t0 = self.map_t(0, p[0]);
        let t1 = self.map_t(1, p[1]);
        let t2 = self.map_t(2, p[2]);
        let mut plane = vec![0.0; n0 * n1];
        for i0 in 0..n0 {
            for i1 in 0..n1 {
                let base = (i0 * n1 + i1) * n2;
                plane[i0 * n1 + i1] = clenshaw(&self.coef[base..base + n2], t2);
            }
        }
        let mut line = vec![0.0; n0];
        for i0 in 0..n0 {
            line[i0] = clenshaw(&plane[i0 * n1..(i0 + 1) * n1], t1);
        }
        clenshaw(&line, t0)
    }

    pub fn derivative_axis(&self, k: usize) -> Self {
        let mut out = self.clone();
        let n = self.dims[k];
        let scale = if self.hi[k] > self.lo[k] { 2.0 / (self.hi[k] - self.lo[k]) } else { 0.0 };
        let out_len = (n - 1).max(1);
        out.map_fibers(k, out_len, move |fiber, o| {
            let d = deriv_series(fiber, scale);
            o.copy_from_slice(&d);
        });
        out
    }

    /// Antiderivative along axis k, vanishing at the low face of that axis.
    pub fn antiderivative_axis(&self, k: usize) -> Self {
        assert!(self.hi[k] > self.lo[k], "antiderivative along a degenerate axis");
        let mut out = self.clone();
        let n = self.dims[k];
        let scale = 0.5 * (self.hi[k] - self.lo[k]);
        out.map_fibers(k, n + 1, move |fiber, o| {
            let a = antideriv_series(fiber, scale);
            o.copy_from_slice(&a);
        });
        out
    }

    /// Force the series to vanish identically at both ends of axis k by
    /// adjusting the two lowest-order coefficients of each fiber. For a
    /// function that truly vanishes at those ends this removes only the
    /// fit's own edge error; differentiation and antidifferentiation of the
    /// result then carry exact zeros at the ends.
    pub fn zero_boundary_axis(&mut self, k: usize) {
        let n = self.dims[k];
        self.map_fibers(k, n, move |fiber, out| {
            out.copy_from_slice(fiber);
            if n == 1 {
                out[0] = 0.0;
                return;
            }
            let mut p = 0.5 * fiber[0];
            let mut m = 0.5 * fiber[0];
            for j in 1..n {
                p += fiber[j];
                m += if j % 2 == 0 { fiber[j] } else { -fiber[j] };
            }
            out[0] -= p + m;
            out[1] -= 0.5 * (p - m);
        });
    }

    /// Largest coefficient magnitude in the last two slices of axis k. A
    /// small tail certifies the fit resolves the function along that axis.
    /// Two slices, not one: symmetric functions alternate near-zero
    /// coefficients, so a single trailing slice can read as converged when
    /// the series is not.
    pub fn tail_max(&self, k: usize) -> f64 {
        let [n0, n1, n2] = self.dims;
        let cut = self.dims[k].saturating_sub(2);
        let mut m: f64 = 0.0;
        for i0 in 0..n0 {
            for i1 in 0..n1 {
                for i2 in 0..n2 {
                    if [i0, i1, i2][k] >= cut {
                        m = m.max(self.coef[(i0 * n1 + i1) * n2 + i2].abs());
                    }
                }
            }
        }
        m
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
}

/// One-axis interpolant on an interval.
#[derive(Clone, Debug)]
pub struct Cheb1 {
    t: ChebTensor,
}

impl Cheb1 {
    pub fn fit(a: f64, b: f64, n: usize, f: impl Fn(f64) -> f64) -> Self {
        let t = ChebTensor::fit([a, 0.0, 0.0], [b, 0.0, 0.0], [n, 1, 1], |p| f(p[0]));
        Self { t }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.t.eval(&Vec3::new(x, 0.0, 0.0))
    }

    pub fn derivative(&self) -> Self {
        Self { t: self.t.derivative_axis(0) }
    }

    /// Antiderivative vanishing at the left endpoint.
    pub fn antiderivative(&self) -> Self {
        Self { t: self.t.antiderivative_axis(0) }
    }

    pub fn tail_max(&self) -> f64 {
        self.t.tail_max(0)
    }
}

/// Two-axis interpolant; axes map to the first two coordinates.
#[derive(Clone, Debug)]
pub struct Cheb2 {
    t: ChebTensor,
}

impl Cheb2 {
    pub fn fit(
        x_iv: (f64, f64),
        y_iv: (f64, f64),
        nx: usize,
        ny: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let t = ChebTensor::fit(
            [x_iv.0, y_iv.0, 0.0],
            [x_iv.1, y_iv.1, 0.0],
            [nx, ny, 1],
            |p| f(p[0], p[1]),
        );
        Self { t }
    }

    /// Build from samples already taken at the `nodes` grid, row-major in
    /// the first axis: `data[i * ny + j] = f(x_i, y_j)`. Lets callers fit
    /// linear combinations of expensive sample passes without resampling.
    pub fn from_samples(
        x_iv: (f64, f64),
        y_iv: (f64, f64),
        nx: usize,
        ny: usize,
        data: Vec<f64>,
    ) -> Self {
        assert_eq!(data.len(), nx * ny);
        let t = ChebTensor::from_samples(
            [x_iv.0, y_iv.0, 0.0],
            [x_iv.1, y_iv.1, 0.0],
            [nx, ny, 1],
            data,
        );
        Self { t }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.t.eval(&Vec3::new(x, y, 0.0))
    }

    /// Zero the interpolant identically on all four edges of its box. The
    /// second axis pass adds corrections that are degree one in that axis
    /// and vanish at the corners (the pass zeroed them), so a degree-one
    /// polynomial through two zeros is zero: the first pass survives intact.
    pub fn with_zero_boundary(mut self) -> Self {
        self.t.zero_boundary_axis(0);
        self.t.zero_boundary_axis(1);
        self
    }

    /// Antiderivative in the first axis, vanishing at its low endpoint.
    pub fn antiderivative_x(&self) -> Self {
        Self { t: self.t.antiderivative_axis(0) }
    }

    pub fn tail_max(&self, k: usize) -> f64 {
        self.t.tail_max(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_exp_to_machine_precision() {
        let c = Cheb1::fit(0.0, 2.0, 24, f64::exp);
        for &x in &[0.0, 0.1, 0.77, 1.5, 2.0] {
            assert!((c.eval(x) - x.exp()).abs() < 1e-13);
        }
        assert!(c.tail_max() < 1e-14);
    }

    #[test]
    fn derivative_and_antiderivative_of_exp() {
        let c = Cheb1::fit(0.0, 2.0, 24, f64::exp);
        let d = c.derivative();
        let a = c.antiderivative();
        for &x in &[0.05, 0.5, 1.3, 1.95] {
            assert!((d.eval(x) - x.exp()).abs() < 1e-11);
            assert!((a.eval(x) - (x.exp() - 1.0)).abs() < 1e-12);
        }
        assert!(a.eval(0.0).abs() < 1e-14, "antiderivative pinned at left endpoint");
    }

    #[test]
    fn antiderivative_of_constant_is_linear() {
        let c = Cheb1::fit(0.25, 0.75, 4, |_| 3.0);
        let a = c.antiderivative();
        assert!((a.eval(0.75) - 1.5).abs() < 1e-14);
        assert!((a.eval(0.5) - 0.75).abs() < 1e-14);
    }

    #[test]
    fn tensor_fit_matches_partials() {
        let f = |p: &Vec3| (2.0 * p[0]).sin() * p[1].cos() + p[2] * p[2];
        let t = ChebTensor::fit([0.0; 3], [1.0; 3], [20, 20, 8], f);
        let dx = t.derivative_axis(0);
        let dz = t.derivative_axis(2);
        let pts = [Vec3::new(0.3, 0.4, 0.5), Vec3::new(0.9, 0.1, 0.7)];
        for p in pts {
            assert!((t.eval(&p) - f(&p)).abs() < 1e-12);
            let dxe = 2.0 * (2.0 * p[0]).cos() * p[1].cos();
            assert!((dx.eval(&p) - dxe).abs() < 1e-10);
            assert!((dz.eval(&p) - 2.0 * p[2]).abs() < 1e-10);
        }
    }

    #[test]
    fn tensor_antiderivative_along_one_axis() {
        let f = |p: &Vec3| p[1] * (3.0 * p[0]).cos();
        let t = ChebTensor::fit([0.0; 3], [1.0; 3], [24, 4, 1], f);
        let a = t.antiderivative_axis(0);
        let p = Vec3::new(0.8, 0.6, 0.0);
        let exact = 0.6 * (3.0f64 * 0.8).sin() / 3.0;
        assert!((a.eval(&p) - exact).abs() < 1e-12);
    }

    #[test]
    fn singleton_axis_antiderivative_grows_linearly() {
        let t = ChebTensor::fit([0.0; 3], [1.0; 3], [8, 1, 1], |p| p[0]);
        let a = t.antiderivative_axis(1);
        let v = a.eval(&Vec3::new(0.5, 0.4, 0.0));
        assert!((v - 0.5 * 0.4).abs() < 1e-13);
    }

    #[test]
    fn cheb2_fiber_integrals() {
        let c = Cheb2::fit((0.0, 1.0), (0.0, 1.0), 16, 16, |x, y| x * y + y * y);
        let a = c.antiderivative_x();
        let exact = 0.5 * 0.7f64.powi(2) * 0.3 + 0.7 * 0.3f64.powi(2);
        assert!((a.eval(0.7, 0.3) - exact).abs() < 1e-12);
    }

    #[test]
    fn boundary_surgery_zeros_all_four_edges() {
        let f = |x: f64, y: f64| (x + 0.3 * y).sin() + 0.2 * x * x;
        let c = Cheb2::fit((0.2, 0.8), (0.1, 0.9), 14, 14, f).with_zero_boundary();
        for t in [0.0, 0.37, 0.61, 1.0] {
            let x = 0.2 + 0.6 * t;
            let y = 0.1 + 0.8 * t;
            assert!(c.eval(x, 0.1).abs() < 1e-13);
            assert!(c.eval(x, 0.9).abs() < 1e-13);
            assert!(c.eval(0.2, y).abs() < 1e-13);
            assert!(c.eval(0.8, y).abs() < 1e-13);
        }
        // Interior values move only by the size of the removed edge data.
        let edge_scale = f(0.2, 0.5).abs().max(f(0.8, 0.5).abs());
        let drift = (c.eval(0.5, 0.5) - f(0.5, 0.5)).abs();
        assert!(drift <= 3.0 * edge_scale, "interior drift {drift}");
    }
}
