//! Seeded synthetic point clouds with unit charges.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

use crate::error::{FmmError, Result};
use crate::scalar::Scalar;
use crate::tree::ParticleSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DistributionKind {
    /// Uniform on the sphere of radius 0.5 centred in the unit cube.
    SphereSurface,
    /// Uniform in the unit cube.
    UniformCube,
    /// Two Gaussian blobs plus a uniform background.
    TwoCluster,
}

impl DistributionKind {
    pub const ALL: [DistributionKind; 3] = [Self::SphereSurface, Self::UniformCube, Self::TwoCluster];

    pub fn name(self) -> &'static str {
        match self {
            Self::SphereSurface => "sphere-surface",
            Self::UniformCube => "uniform-cube",
            Self::TwoCluster => "two-cluster",
        }
    }
}

impl fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistributionKind {
    type Err = FmmError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| FmmError::invalid(format!("unknown distribution `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Distribution {
    pub kind: DistributionKind,
    pub n: usize,
    pub seed: u64,
}

pub const SPHERE_CENTER: [f64; 3] = [0.5; 3];
pub const SPHERE_RADIUS: f64 = 0.5;
const CLUSTER_SIGMA: f64 = 0.05;

pub fn sample<T: Scalar>(dist: &Distribution) -> Result<ParticleSet<T>> {
    if dist.n == 0 {
        return Err(FmmError::invalid("n must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(dist.seed);
    let positions: Vec<[f64; 3]> = match dist.kind {
        DistributionKind::SphereSurface => (0..dist.n).map(|_| sphere_point(&mut rng)).collect(),
        DistributionKind::UniformCube => (0..dist.n).map(|_| uniform_point(&mut rng)).collect(),
        DistributionKind::TwoCluster => {
            let per_cluster = dist.n * 45 / 100;
            let mut out = Vec::with_capacity(dist.n);
            for center in [0.25, 0.75] {
                for _ in 0..per_cluster {
                    out.push(std::array::from_fn(|_| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        (center + CLUSTER_SIGMA * g).clamp(0.0, 1.0)
                    }));
                }
            }
            while out.len() < dist.n {
                out.push(uniform_point(&mut rng));
            }
            out
        }
    };
    Ok(ParticleSet::unit(
        positions.into_iter().map(|p| p.map(T::of)).collect(),
    ))
}

fn uniform_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn sphere_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let g: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut *rng));
        let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if norm > 1e-12 {
            return std::array::from_fn(|i| SPHERE_CENTER[i] + SPHERE_RADIUS * g[i] / norm);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morton::Domain;
    use crate::tree::LinearTree;

    fn draw(kind: DistributionKind, n: usize, seed: u64) -> ParticleSet<f64> {
        sample(&Distribution { kind, n, seed }).unwrap()
    }

    #[test]
    fn sphere_radius() {
        let s = draw(DistributionKind::SphereSurface, 1000, 1);
        assert!(s.charges.iter().all(|&q| q == 1.0));
        for p in &s.positions {
            let r = (0..3).map(|i| (p[i] - 0.5).powi(2)).sum::<f64>().sqrt();
            assert!((r - 0.5).abs() <= 0.5 * 1e-12, "{r}");
        }
        // every octant of the sphere is hit
        let mut seen = [false; 8];
        for p in &s.positions {
            let o = (0..3).fold(0, |acc, i| acc * 2 + usize::from(p[i] > 0.5));
            seen[o] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn uniform_mean_within_three_sigma() {
        let n = 1000;
        let s = draw(DistributionKind::UniformCube, n, 2);
        let sigma = (1.0f64 / 12.0 / n as f64).sqrt();
        for axis in 0..3 {
            let mean = s.positions.iter().map(|p| p[axis]).sum::<f64>() / n as f64;
            assert!((mean - 0.5).abs() <= 3.0 * sigma, "axis {axis}: {mean}");
        }
    }

    #[test]
    fn seed_determinism() {
        let a = draw(DistributionKind::SphereSurface, 8, 1);
        assert_eq!(a, draw(DistributionKind::SphereSurface, 8, 1));
        assert_ne!(a, draw(DistributionKind::SphereSurface, 8, 2));
        assert_eq!(a.len(), 8);
        let c = draw(DistributionKind::TwoCluster, 101, 3);
        assert_eq!(c.len(), 101);
        assert_eq!(c, draw(DistributionKind::TwoCluster, 101, 3));
    }

    #[test]
    fn two_cluster_tree_is_deeper() {
        let depth = |kind| {
            let mut s = draw(kind, 20_000, 4);
            let domain = Domain::bounding(&s.positions).unwrap();
            LinearTree::build(&mut s, 32, domain).unwrap().depth
        };
        assert!(depth(DistributionKind::TwoCluster) > depth(DistributionKind::UniformCube));
    }

    #[test]
    fn kinds_parse_and_reject() {
        for k in DistributionKind::ALL {
            assert_eq!(k.name().parse::<DistributionKind>().unwrap(), k);
        }
        assert!("torus".parse::<DistributionKind>().is_err());
        assert!(sample::<f64>(&Distribution {
            kind: DistributionKind::UniformCube,
            n: 0,
            seed: 0
        })
        .is_err());
    }
}
