//! Precomputed operator matrices and the eight FMM operators.
//!
//! Multipole expansions are densities on a node's upward equivalent surface
//! (scaled by `alpha_inner`), fitted to the potential on its upward check
//! surface (`alpha_outer`). Local expansions are densities on the downward
//! equivalent surface (`alpha_outer`) fitted on the downward check surface
//! (`alpha_inner`).
//!
//! All matrices are built once for nodes at [`REFERENCE_LEVEL`]. The Laplace
//! kernel is homogeneous of degree -1, so a kernel matrix between surfaces
//! of a node at level `l` equals the reference one times `2^(l - 2)`, and
//! the check-to-equivalent pseudo-inverses scale by `2^(2 - l)`. The M2M,
//! L2L and M2L operators combine one of each and are level independent;
//! P2M and P2L apply the pseudo-inverse to raw particle potentials and are
//! scaled by [`OperatorCache::level_scale`].

use rayon::prelude::*;

use crate::error::{FmmError, Result};
use crate::fmm::FmmConfig;
use crate::kernel::{kernel_matrix, p2p_accumulate};
use crate::linalg::{pseudo_inverse, Matrix};
use crate::morton::{Domain, MortonKey};
use crate::scalar::Scalar;
use crate::surface::SurfaceGrid;

pub const REFERENCE_LEVEL: u32 = 2;

/// Transfer vectors live in `[-3, 3]^3`.
const TV_RANGE: i32 = 3;
const TV_SIDE: usize = (2 * TV_RANGE + 1) as usize;

/// The 316 same-level offsets between a node and the members of its V list.
pub fn transfer_vectors() -> Vec<[i32; 3]> {
    let mut out = Vec::new();
    for dx in -TV_RANGE..=TV_RANGE {
        for dy in -TV_RANGE..=TV_RANGE {
            for dz in -TV_RANGE..=TV_RANGE {
                if dx.abs().max(dy.abs()).max(dz.abs()) >= 2 {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

#[inline]
fn tv_slot(tv: [i32; 3]) -> Option<usize> {
    if tv.iter().any(|c| c.abs() > TV_RANGE) {
        return None;
    }
    let idx = |c: i32| (c + TV_RANGE) as usize;
    Some((idx(tv[0]) * TV_SIDE + idx(tv[1])) * TV_SIDE + idx(tv[2]))
}

/// Offset of `source` relative to `target`, in units of their (common) width.
#[inline]
pub fn transfer_vector(source: MortonKey, target: MortonKey) -> [i32; 3] {
    let (s, t) = (source.anchor(), target.anchor());
    std::array::from_fn(|i| s[i] as i32 - t[i] as i32)
}

/// Child octant `4 dx + 2 dy + dz` as a unit offset vector.
fn octant_offset(octant: usize) -> [f64; 3] {
    [(octant >> 2) & 1, (octant >> 1) & 1, octant & 1].map(|d| 2.0 * d as f64 - 1.0)
}

/// Expansion order, surface scalings, cutoff and domain a cache is valid for.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CacheParams {
    pub p: usize,
    pub p_check: usize,
    pub alpha_inner: f64,
    pub alpha_outer: f64,
    pub svd_cutoff: f64,
    pub origin: [f64; 3],
    pub side: f64,
}

impl CacheParams {
    pub fn new<T: Scalar>(config: &FmmConfig, domain: &Domain<T>) -> Self {
        CacheParams {
            p: config.p,
            p_check: config.check_order(),
            alpha_inner: config.alpha_inner,
            alpha_outer: config.alpha_outer,
            svd_cutoff: config.svd_cutoff,
            origin: domain.origin.map(|c| c.to_f64_lossless()),
            side: domain.side.to_f64_lossless(),
        }
    }

    /// Stable hash of everything the matrices depend on.
    pub fn fingerprint<T: Scalar>(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = format!(
            "kernel=laplace3d;scalar={};reference_level={};p={};p_check={};alpha_inner={:016x};alpha_outer={:016x};svd_cutoff={:016x};origin={:016x},{:016x},{:016x};side={:016x}",
            T::NAME,
            REFERENCE_LEVEL,
            self.p,
            self.p_check,
            self.alpha_inner.to_bits(),
            self.alpha_outer.to_bits(),
            self.svd_cutoff.to_bits(),
            self.origin[0].to_bits(),
            self.origin[1].to_bits(),
            self.origin[2].to_bits(),
            self.side.to_bits(),
        );
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Precomputed dense operators.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorCache<T> {
    pub params: CacheParams,
    pub fingerprint: String,
    pub reference_level: u32,
    pub equivalent: SurfaceGrid<T>,
    pub check: SurfaceGrid<T>,
    /// Upward check potentials to multipole densities, `n_e x n_c`.
    pub uc2e_inv: Matrix<T>,
    /// Downward check potentials to local densities, `n_e x n_c`.
    pub dc2e_inv: Matrix<T>,
    /// Child multipole to parent multipole, one per child octant.
    pub m2m: Vec<Matrix<T>>,
    /// Parent local to child local, one per child octant.
    pub l2l: Vec<Matrix<T>>,
    /// Source equivalent surface to target downward check surface, `n_c x n_e`,
    /// keyed by transfer vector.
    m2l: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> OperatorCache<T> {
    pub fn precompute(config: &FmmConfig, domain: &Domain<T>) -> Result<Self> {
        config.validate()?;
        let params = CacheParams::new(config, domain);
        let equivalent = SurfaceGrid::<f64>::new(params.p)?;
        let check = SurfaceGrid::<f64>::new(params.p_check)?;
        let h = params.side / f64::from(1u32 << (REFERENCE_LEVEL + 1));
        let (a_in, a_out) = (params.alpha_inner, params.alpha_outer);
        let origin = [0.0; 3];

        let up_equiv = equivalent.scaled(&origin, h, a_in);
        let up_check = check.scaled(&origin, h, a_out);
        let down_equiv = equivalent.scaled(&origin, h, a_out);
        let down_check = check.scaled(&origin, h, a_in);

        let cutoff = params.svd_cutoff;
        let uc2e_inv = pseudo_inverse(&kernel_matrix(&up_equiv, &up_check), cutoff, "uc2e")?;
        let dc2e_inv = pseudo_inverse(&kernel_matrix(&down_equiv, &down_check), cutoff, "dc2e")?;
        // a child is one level finer: its pseudo-inverse is half the reference one
        let dc2e_inv_child = dc2e_inv.clone().scaled(0.5);

        let mut m2m = Vec::with_capacity(8);
        let mut l2l = Vec::with_capacity(8);
        for octant in 0..8 {
            let offset = octant_offset(octant);
            let child_center = offset.map(|d| d * h / 2.0);
            let child_equiv = equivalent.scaled(&child_center, h / 2.0, a_in);
            m2m.push(uc2e_inv.matmul(&kernel_matrix(&child_equiv, &up_check)));
            let child_check = check.scaled(&child_center, h / 2.0, a_in);
            l2l.push(dc2e_inv_child.matmul(&kernel_matrix(&down_equiv, &child_check)));
        }

        let mut m2l: Vec<Option<Matrix<f64>>> = vec![None; TV_SIDE.pow(3)];
        let built: Vec<([i32; 3], Matrix<f64>)> = transfer_vectors()
            .into_par_iter()
            .map(|tv| {
                let center = tv.map(|c| c as f64 * 2.0 * h);
                let source_equiv = equivalent.scaled(&center, h, a_in);
                (tv, kernel_matrix(&source_equiv, &down_check))
            })
            .collect();
        for (tv, m) in built {
            m2l[tv_slot(tv).unwrap()] = Some(m);
        }

        let all_finite = m2m.iter().chain(&l2l).all(Matrix::is_finite);
        if !all_finite {
            return Err(FmmError::RankDeficient {
                matrix: "m2m/l2l".into(),
                detail: "non-finite translation matrix".into(),
            });
        }

        Ok(OperatorCache {
            fingerprint: params.fingerprint::<T>(),
            params,
            reference_level: REFERENCE_LEVEL,
            equivalent: SurfaceGrid::new(params.p)?,
            check: SurfaceGrid::new(params.p_check)?,
            uc2e_inv: uc2e_inv.cast(),
            dc2e_inv: dc2e_inv.cast(),
            m2m: m2m.iter().map(Matrix::cast).collect(),
            l2l: l2l.iter().map(Matrix::cast).collect(),
            m2l: m2l.iter().map(|m| m.as_ref().map(Matrix::cast)).collect(),
        })
    }

    /// Reassemble a cache from stored parts (used by the persistence layer).
    pub(crate) fn from_parts(
        params: CacheParams,
        uc2e_inv: Matrix<T>,
        dc2e_inv: Matrix<T>,
        m2m: Vec<Matrix<T>>,
        l2l: Vec<Matrix<T>>,
        m2l_entries: Vec<([i32; 3], Matrix<T>)>,
    ) -> Result<Self> {
        let mut m2l = vec![None; TV_SIDE.pow(3)];
        for (tv, m) in m2l_entries {
            let slot = tv_slot(tv).ok_or_else(|| FmmError::invalid(format!("bad transfer vector {tv:?}")))?;
            m2l[slot] = Some(m);
        }
        Ok(OperatorCache {
            fingerprint: params.fingerprint::<T>(),
            params,
            reference_level: REFERENCE_LEVEL,
            equivalent: SurfaceGrid::new(params.p)?,
            check: SurfaceGrid::new(params.p_check)?,
            uc2e_inv,
            dc2e_inv,
            m2m,
            l2l,
            m2l,
        })
    }

    /// Number of equivalent surface points.
    pub fn n_e(&self) -> usize {
        self.equivalent.len()
    }

    /// Number of check surface points.
    pub fn n_c(&self) -> usize {
        self.check.len()
    }

    /// `h_level / h_reference`, the factor applied to the pseudo-inverses.
    pub fn level_scale(&self, level: u32) -> T {
        T::of(2f64.powi(self.reference_level as i32 - level as i32))
    }

    pub fn m2l(&self, tv: [i32; 3]) -> Option<&Matrix<T>> {
        tv_slot(tv).and_then(|s| self.m2l[s].as_ref())
    }

    /// Cached M2L matrices in ascending transfer-vector order.
    pub fn m2l_entries(&self) -> impl Iterator<Item = ([i32; 3], &Matrix<T>)> {
        transfer_vectors()
            .into_iter()
            .filter_map(move |tv| self.m2l(tv).map(|m| (tv, m)))
    }

    pub fn alpha_inner(&self) -> T {
        T::of(self.params.alpha_inner)
    }

    pub fn alpha_outer(&self) -> T {
        T::of(self.params.alpha_outer)
    }

    pub fn upward_equivalent(&self, key: MortonKey, domain: &Domain<T>) -> Vec<[T; 3]> {
        let (c, h) = key.bounds(domain);
        self.equivalent.scaled(&c, h, self.alpha_inner())
    }

    pub fn upward_check(&self, key: MortonKey, domain: &Domain<T>) -> Vec<[T; 3]> {
        let (c, h) = key.bounds(domain);
        self.check.scaled(&c, h, self.alpha_outer())
    }

    pub fn downward_equivalent(&self, key: MortonKey, domain: &Domain<T>) -> Vec<[T; 3]> {
        let (c, h) = key.bounds(domain);
        self.equivalent.scaled(&c, h, self.alpha_outer())
    }

    pub fn downward_check(&self, key: MortonKey, domain: &Domain<T>) -> Vec<[T; 3]> {
        let (c, h) = key.bounds(domain);
        self.check.scaled(&c, h, self.alpha_inner())
    }

    /// Whether this cache was built for the given configuration and domain.
    pub fn matches(&self, config: &FmmConfig, domain: &Domain<T>) -> bool {
        self.fingerprint == CacheParams::new(config, domain).fingerprint::<T>()
    }
}

/// Multipole and local coefficients, one slice of length `n_e` per tree node.
#[derive(Clone, Debug, PartialEq)]
pub struct Expansions<T> {
    pub n_e: usize,
    pub multipole: Vec<T>,
    pub local: Vec<T>,
}

impl<T: Scalar> Expansions<T> {
    pub fn new(num_nodes: usize, n_e: usize) -> Self {
        Expansions {
            n_e,
            multipole: vec![T::zero(); num_nodes * n_e],
            local: vec![T::zero(); num_nodes * n_e],
        }
    }

    pub fn zero(&mut self) {
        self.multipole.iter_mut().for_each(|v| *v = T::zero());
        self.local.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn multipole(&self, node: usize) -> &[T] {
        &self.multipole[node * self.n_e..(node + 1) * self.n_e]
    }

    pub fn local(&self, node: usize) -> &[T] {
        &self.local[node * self.n_e..(node + 1) * self.n_e]
    }

    pub fn multipole_mut(&mut self, node: usize) -> &mut [T] {
        &mut self.multipole[node * self.n_e..(node + 1) * self.n_e]
    }

    pub fn local_mut(&mut self, node: usize) -> &mut [T] {
        &mut self.local[node * self.n_e..(node + 1) * self.n_e]
    }
}

/// P2M: fit the leaf's multipole to the potential of its particles on the
/// upward check surface.
pub fn p2m<T: Scalar>(
    cache: &OperatorCache<T>,
    leaf: MortonKey,
    domain: &Domain<T>,
    positions: &[[T; 3]],
    charges: &[T],
    multipole: &mut [T],
) {
    if positions.is_empty() {
        return;
    }
    let check = cache.upward_check(leaf, domain);
    let mut potential = vec![T::zero(); check.len()];
    p2p_accumulate(positions, charges, &check, &mut potential);
    cache
        .uc2e_inv
        .matvec_scaled_acc(cache.level_scale(leaf.level()), &potential, multipole);
}

/// M2M: add a child's multipole into its parent's.
pub fn m2m<T: Scalar>(cache: &OperatorCache<T>, child: MortonKey, child_multipole: &[T], parent_multipole: &mut [T]) {
    cache.m2m[child.octant()].matvec_acc(child_multipole, parent_multipole);
}

/// L2L: add the parent's local expansion into a child's.
pub fn l2l<T: Scalar>(cache: &OperatorCache<T>, child: MortonKey, parent_local: &[T], child_local: &mut [T]) {
    cache.l2l[child.octant()].matvec_acc(parent_local, child_local);
}

/// M2L: translate the multipoles of same-level, well-separated sources into
/// the target's local expansion. `check` is scratch of length `n_c`.
pub fn m2l<'a, T: Scalar>(
    cache: &OperatorCache<T>,
    target: MortonKey,
    sources: impl IntoIterator<Item = (MortonKey, &'a [T])>,
    local: &mut [T],
    check: &mut [T],
) -> Result<()> {
    check.iter_mut().for_each(|v| *v = T::zero());
    let mut any = false;
    for (source, multipole) in sources {
        let tv = transfer_vector(source, target);
        let matrix = cache.m2l(tv).ok_or(FmmError::MissingTransferVector(tv))?;
        matrix.matvec_acc(multipole, check);
        any = true;
    }
    if any {
        // kernel and pseudo-inverse scale factors cancel
        cache.dc2e_inv.matvec_acc(check, local);
    }
    Ok(())
}

/// P2L: fit the target's local expansion to the potential of distant
/// particle groups on its downward check surface.
pub fn p2l<'a, T: Scalar>(
    cache: &OperatorCache<T>,
    target: MortonKey,
    domain: &Domain<T>,
    sources: impl IntoIterator<Item = (&'a [[T; 3]], &'a [T])>,
    local: &mut [T],
) {
    let mut sources = sources.into_iter().filter(|(p, _)| !p.is_empty()).peekable();
    if sources.peek().is_none() {
        return;
    }
    let check = cache.downward_check(target, domain);
    let mut potential = vec![T::zero(); check.len()];
    for (positions, charges) in sources {
        p2p_accumulate(positions, charges, &check, &mut potential);
    }
    cache
        .dc2e_inv
        .matvec_scaled_acc(cache.level_scale(target.level()), &potential, local);
}

/// L2P: evaluate a local expansion at the given targets.
pub fn l2p<T: Scalar>(
    cache: &OperatorCache<T>,
    leaf: MortonKey,
    domain: &Domain<T>,
    local: &[T],
    targets: &[[T; 3]],
    potentials: &mut [T],
) {
    let sources = cache.downward_equivalent(leaf, domain);
    p2p_accumulate(&sources, local, targets, potentials);
}

/// M2P: evaluate a source node's multipole at the given targets.
pub fn m2p<T: Scalar>(
    cache: &OperatorCache<T>,
    source: MortonKey,
    domain: &Domain<T>,
    multipole: &[T],
    targets: &[[T; 3]],
    potentials: &mut [T],
) {
    let sources = cache.upward_equivalent(source, domain);
    p2p_accumulate(&sources, multipole, targets, potentials);
}
