//! Laplace Green's function and the direct particle-to-particle operator.

use rayon::prelude::*;

use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// `1 / (4 pi |x - y|)`, and exactly zero for coincident points.
#[inline(always)]
pub fn laplace<T: Scalar>(x: &[T; 3], y: &[T; 3]) -> T {
    let dx = x[0] - y[0];
    let dy = x[1] - y[1];
    let dz = x[2] - y[2];
    let r2 = dx * dx + dy * dy + dz * dz;
    if r2 > T::zero() {
        T::FRAC_1_PI() * T::of(0.25) / r2.sqrt()
    } else {
        T::zero()
    }
}

/// Potential at one target, summed in source order.
#[inline(always)]
fn potential_at<T: Scalar>(target: &[T; 3], sources: &[[T; 3]], charges: &[T]) -> T {
    let mut acc = T::zero();
    for (s, &q) in sources.iter().zip(charges) {
        acc += laplace(s, target) * q;
    }
    acc
}

/// `out[j] += sum_i charges[i] * laplace(sources[i], targets[j])`, serially.
pub fn p2p_accumulate<T: Scalar>(sources: &[[T; 3]], charges: &[T], targets: &[[T; 3]], out: &mut [T]) {
    debug_assert_eq!(sources.len(), charges.len());
    debug_assert_eq!(targets.len(), out.len());
    for (t, o) in targets.iter().zip(out.iter_mut()) {
        *o += potential_at(t, sources, charges);
    }
}

/// Multithreaded direct evaluation, parallel over targets. Each target sums
/// its sources in index order, so the result does not depend on the thread
/// count.
pub fn p2p<T: Scalar>(sources: &[[T; 3]], charges: &[T], targets: &[[T; 3]]) -> Vec<T> {
    assert_eq!(sources.len(), charges.len(), "one charge per source");
    targets
        .par_iter()
        .with_min_len(64)
        .map(|t| potential_at(t, sources, charges))
        .collect()
}

/// Sources in structure-of-arrays layout, for the vectorizable P2P loop.
#[derive(Clone, Debug, Default)]
pub struct SoaSources<T> {
    pub x: Vec<T>,
    pub y: Vec<T>,
    pub z: Vec<T>,
    pub q: Vec<T>,
}

impl<T: Scalar> SoaSources<T> {
    pub fn with_capacity(n: usize) -> Self {
        SoaSources {
            x: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
            q: Vec::with_capacity(n),
        }
    }

    pub fn clear(&mut self) {
        self.x.clear();
        self.y.clear();
        self.z.clear();
        self.q.clear();
    }

    #[inline]
    pub fn push(&mut self, p: [T; 3], q: T) {
        self.x.push(p[0]);
        self.y.push(p[1]);
        self.z.push(p[2]);
        self.q.push(q);
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Same sum as [`p2p_accumulate`], over structure-of-arrays sources with
/// eight independent partial sums per target.
pub fn p2p_soa_accumulate<T: Scalar>(src: &SoaSources<T>, targets: &[[T; 3]], out: &mut [T]) {
    const LANES: usize = 8;
    let n = src.len();
    let split = n - n % LANES;
    let scale = T::FRAC_1_PI() * T::of(0.25);
    for (t, o) in targets.iter().zip(out.iter_mut()) {
        let mut acc = [T::zero(); LANES];
        let chunks = src.x[..split]
            .chunks_exact(LANES)
            .zip(src.y[..split].chunks_exact(LANES))
            .zip(src.z[..split].chunks_exact(LANES))
            .zip(src.q[..split].chunks_exact(LANES));
        for (((xs, ys), zs), qs) in chunks {
            for l in 0..LANES {
                let dx = xs[l] - t[0];
                let dy = ys[l] - t[1];
                let dz = zs[l] - t[2];
                let r2 = dx * dx + dy * dy + dz * dz;
                let inv = if r2 > T::zero() { r2.sqrt().recip() } else { T::zero() };
                acc[l] += qs[l] * inv;
            }
        }
        let mut tail = T::zero();
        for i in split..n {
            let dx = src.x[i] - t[0];
            let dy = src.y[i] - t[1];
            let dz = src.z[i] - t[2];
            let r2 = dx * dx + dy * dy + dz * dz;
            if r2 > T::zero() {
                tail += src.q[i] / r2.sqrt();
            }
        }
        let s = (acc[0] + acc[4]) + (acc[1] + acc[5]) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
        *o += (s + tail) * scale;
    }
}

/// Dense matrix with entry `(j, i) = laplace(sources[i], targets[j])`.
pub fn kernel_matrix<T: Scalar>(sources: &[[T; 3]], targets: &[[T; 3]]) -> Matrix<T> {
    let cols = sources.len();
    let mut m = Matrix::zeros(targets.len(), cols);
    for (row, t) in m.rows_mut().zip(targets) {
        for (entry, s) in row.iter_mut().zip(sources) {
            *entry = laplace(s, t);
        }
    }
    m
}
