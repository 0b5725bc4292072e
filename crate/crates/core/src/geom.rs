//! Axis-aligned boxes in R^3 and the point lattices used for sampling.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Closed axis-aligned box `[lo_1, hi_1] x [lo_2, hi_2] x [lo_3, hi_3]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl BoxRegion {
    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Result<Self> {
        if (0..3).any(|k| !(lo[k] < hi[k]) || !lo[k].is_finite() || !hi[k].is_finite()) {
            return Err(Error::DegenerateBox { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    /// The unit cube `[0,1]^3`.
    pub fn unit() -> Self {
        Self { lo: [0.0; 3], hi: [1.0; 3] }
    }

    /// Cube `[a,b]^3`.
    pub fn cube(a: f64, b: f64) -> Result<Self> {
        Self::new([a; 3], [b; 3])
    }

    pub fn interval(&self, axis: usize) -> (f64, f64) {
        (self.lo[axis], self.hi[axis])
    }

    pub fn length(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|k| self.length(k)).product()
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(
            0.5 * (self.lo[0] + self.hi[0]),
            0.5 * (self.lo[1] + self.hi[1]),
            0.5 * (self.lo[2] + self.hi[2]),
        )
    }

    /// Closed containment.
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.lo[k] && p[k] <= self.hi[k])
    }

    /// Open containment (strict interior).
    pub fn contains_interior(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] > self.lo[k] && p[k] < self.hi[k])
    }

    pub fn contains_box(&self, inner: &BoxRegion) -> bool {
        (0..3).all(|k| inner.lo[k] >= self.lo[k] && inner.hi[k] <= self.hi[k])
    }

    /// Strict containment: `inner` stays a positive distance from the faces.
    pub fn contains_box_strictly(&self, inner: &BoxRegion) -> bool {
        (0..3).all(|k| inner.lo[k] > self.lo[k] && inner.hi[k] < self.hi[k])
    }

    pub fn shrink(&self, margin: f64) -> Result<Self> {
        Self::new(
            [self.lo[0] + margin, self.lo[1] + margin, self.lo[2] + margin],
            [self.hi[0] - margin, self.hi[1] - margin, self.hi[2] - margin],
        )
    }

    pub fn hull(&self, other: &BoxRegion) -> Self {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for k in 0..3 {
            lo[k] = self.lo[k].min(other.lo[k]);
            hi[k] = self.hi[k].max(other.hi[k]);
        }
        Self { lo, hi }
    }

    pub fn intersect(&self, other: &BoxRegion) -> Option<Self> {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for k in 0..3 {
            lo[k] = self.lo[k].max(other.lo[k]);
            hi[k] = self.hi[k].min(other.hi[k]);
            if !(lo[k] < hi[k]) {
                return None;
            }
        }
        Some(Self { lo, hi })
    }

    /// Uniform lattice with `n >= 2` points per axis, endpoints included.
    pub fn lattice(&self, n: usize) -> Vec<Vec3> {
        assert!(n >= 2, "lattice needs at least two points per axis");
        let mut pts = Vec::with_capacity(n * n * n);
        let step = |k: usize, i: usize| self.lo[k] + self.length(k) * i as f64 / (n - 1) as f64;
        for i in 0..n {
            for j in 0..n {
                for l in 0..n {
                    pts.push(Vec3::new(step(0, i), step(1, j), step(2, l)));
                }
            }
        }
        pts
    }

    /// Seeded uniform sample cloud, for certificates that quote their point
    /// set. Same seed, same points, on every platform.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec3> {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(self.lo[0]..self.hi[0]),
                    rng.random_range(self.lo[1]..self.hi[1]),
                    rng.random_range(self.lo[2]..self.hi[2]),
                )
            })
            .collect()
    }

    /// Uniform 1D lattice on the given axis interval, endpoints included.
    pub fn axis_lattice(&self, axis: usize, n: usize) -> Vec<f64> {
        assert!(n >= 2);
        (0..n)
            .map(|i| self.lo[axis] + self.length(axis) * i as f64 / (n - 1) as f64)
            .collect()
    }
}
