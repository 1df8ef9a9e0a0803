//! Check and equivalent surfaces: the boundary points of a regular `p^3`
//! grid on `[-1, 1]^3`, which number `6 (p - 1)^2 + 2`.

use crate::error::{FmmError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceGrid<T> {
    pub p: usize,
    /// Points on the surface of `[-1, 1]^3`.
    pub points: Vec<[T; 3]>,
}

/// `6 (p - 1)^2 + 2`.
pub const fn surface_count(p: usize) -> usize {
    6 * (p - 1) * (p - 1) + 2
}

impl<T: Scalar> SurfaceGrid<T> {
    /// Boundary points of the `p^3` grid in lexicographic `(i, j, k)` order.
    pub fn new(p: usize) -> Result<Self> {
        if p < 2 {
            return Err(FmmError::invalid(format!("expansion order must be >= 2, got {p}")));
        }
        let last = p - 1;
        let coord = |i: usize| T::of(2.0 * i as f64 / last as f64 - 1.0);
        let mut points = Vec::with_capacity(surface_count(p));
        for i in 0..p {
            for j in 0..p {
                for k in 0..p {
                    let on_boundary = [i, j, k].iter().any(|&c| c == 0 || c == last);
                    if on_boundary {
                        points.push([coord(i), coord(j), coord(k)]);
                    }
                }
            }
        }
        debug_assert_eq!(points.len(), surface_count(p));
        Ok(SurfaceGrid { p, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `center + alpha * half_side * point` for every grid point.
    pub fn scaled(&self, center: &[T; 3], half_side: T, alpha: T) -> Vec<[T; 3]> {
        let mut out = Vec::with_capacity(self.points.len());
        self.scaled_into(center, half_side, alpha, &mut out);
        out
    }

    pub fn scaled_into(&self, center: &[T; 3], half_side: T, alpha: T, out: &mut Vec<[T; 3]>) {
        let r = alpha * half_side;
        out.extend(self.points.iter().map(|p| {
            [
                center[0] + r * p[0],
                center[1] + r * p[1],
                center[2] + r * p[2],
            ]
        }));
    }
}
