//! Morton keys for the linear octree.
//!
//! A key packs a node's anchor (its integer coordinates on the grid of its
//! own level) and the level itself into one `u64`. Bits 4..52 hold the
//! bit-interleaved anchor, bits 0..4 the level. At a fixed level, ascending
//! raw order is Z-curve order.
//!
//! The [`Ord`] implementation extends Z-curve order across levels: keys are
//! compared by the position of their anchor on the finest grid, with an
//! ancestor sorting before its descendants. This is the order of the leaves
//! in a linear octree, and therefore the order particles are stored in.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{FmmError, Result};
use crate::scalar::Scalar;

/// Deepest representable level.
pub const MAX_LEVEL: u32 = 15;

const LEVEL_BITS: u32 = 4;
const LEVEL_MASK: u64 = (1 << LEVEL_BITS) - 1;
const FINEST_GRID: u64 = 1 << MAX_LEVEL;

/// Interleave the low 16 bits of the three coordinates, `x` most significant
/// within each 3-bit group.
#[inline]
fn interleave(anchor: [u32; 3]) -> u64 {
    spread(anchor[0]) << 2 | spread(anchor[1]) << 1 | spread(anchor[2])
}

#[inline]
fn deinterleave(code: u64) -> [u32; 3] {
    [compact(code >> 2), compact(code >> 1), compact(code)]
}

/// Insert two zero bits between each of the low 16 bits of `v`.
#[inline]
fn spread(v: u32) -> u64 {
    let mut x = (v as u64) & 0xffff;
    x = (x | x << 16) & 0x0000_ff00_00ff;
    x = (x | x << 8) & 0x00f0_0f00_f00f;
    x = (x | x << 4) & 0x0c30_c30c_30c3;
    x = (x | x << 2) & 0x2492_4924_9249;
    x
}

#[inline]
fn compact(code: u64) -> u32 {
    let mut x = code & 0x2492_4924_9249;
    x = (x | x >> 2) & 0x0c30_c30c_30c3;
    x = (x | x >> 4) & 0x00f0_0f00_f00f;
    x = (x | x >> 8) & 0x0000_ff00_00ff;
    x = (x | x >> 16) & 0xffff;
    x as u32
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct MortonKey(u64);

impl MortonKey {
    pub const ROOT: MortonKey = MortonKey(0);

    pub fn encode(anchor: [u32; 3], level: u32) -> Result<Self> {
        if level > MAX_LEVEL {
            return Err(FmmError::invalid(format!(
                "level {level} exceeds maximum level {MAX_LEVEL}"
            )));
        }
        if anchor.iter().any(|&a| (a as u64) >= 1u64 << level) {
            return Err(FmmError::invalid(format!(
                "anchor {anchor:?} out of range for level {level}"
            )));
        }
        Ok(Self::encode_unchecked(anchor, level))
    }

    #[inline]
    pub(crate) fn encode_unchecked(anchor: [u32; 3], level: u32) -> Self {
        MortonKey(interleave(anchor) << LEVEL_BITS | level as u64)
    }

    /// Validates a raw value produced elsewhere (e.g. read from disk).
    pub fn from_raw(raw: u64) -> Result<Self> {
        let level = (raw & LEVEL_MASK) as u32;
        let anchor = deinterleave(raw >> LEVEL_BITS);
        let key = Self::encode(anchor, level)?;
        if key.0 != raw {
            return Err(FmmError::invalid(format!("malformed key {raw:#x}")));
        }
        Ok(key)
    }

    /// The key on level `level` containing the given finest-grid Z index.
    #[inline]
    pub fn from_finest_z(z: u64, level: u32) -> Self {
        let code = z >> (3 * (MAX_LEVEL - level));
        MortonKey(code << LEVEL_BITS | level as u64)
    }

    #[inline]
    pub fn raw(self) -> u64 {
        self.0
    }

    #[inline]
    pub fn level(self) -> u32 {
        (self.0 & LEVEL_MASK) as u32
    }

    #[inline]
    pub fn anchor(self) -> [u32; 3] {
        deinterleave(self.0 >> LEVEL_BITS)
    }

    pub fn decode(self) -> ([u32; 3], u32) {
        (self.anchor(), self.level())
    }

    /// Z index of the node's lowest corner on the finest grid.
    #[inline]
    pub fn finest_z(self) -> u64 {
        (self.0 >> LEVEL_BITS) << (3 * (MAX_LEVEL - self.level()))
    }

    /// Number of finest-grid cells covered by the node.
    #[inline]
    pub fn finest_span(self) -> u64 {
        1u64 << (3 * (MAX_LEVEL - self.level()))
    }

    /// Position among its siblings, `4 dx + 2 dy + dz`.
    #[inline]
    pub fn octant(self) -> usize {
        ((self.0 >> LEVEL_BITS) & 7) as usize
    }

    pub fn parent(self) -> Result<Self> {
        let level = self.level();
        if level == 0 {
            return Err(FmmError::invalid("the root has no parent"));
        }
        Ok(MortonKey((self.0 >> (LEVEL_BITS + 3)) << LEVEL_BITS | (level - 1) as u64))
    }

    /// Ancestor (or self) at a coarser or equal level.
    pub fn ancestor(self, level: u32) -> Self {
        debug_assert!(level <= self.level());
        let shift = 3 * (self.level() - level);
        MortonKey((self.0 >> (LEVEL_BITS + shift)) << LEVEL_BITS | level as u64)
    }

    /// The eight children in ascending raw order.
    pub fn children(self) -> Result<[Self; 8]> {
        let level = self.level();
        if level >= MAX_LEVEL {
            return Err(FmmError::invalid(format!(
                "cannot subdivide a key at level {level}"
            )));
        }
        let base = (self.0 >> LEVEL_BITS) << 3;
        Ok(std::array::from_fn(|i| {
            MortonKey((base | i as u64) << LEVEL_BITS | (level + 1) as u64)
        }))
    }

    /// Same-level keys whose anchors differ by at most one in every
    /// component, excluding `self`, clipped to the domain. Ascending raw order.
    pub fn neighbors(self) -> Vec<Self> {
        let level = self.level();
        let width = 1i64 << level;
        let [x, y, z] = self.anchor().map(i64::from);
        let mut out = Vec::with_capacity(26);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let (nx, ny, nz) = (x + dx, y + dy, z + dz);
                    if [nx, ny, nz].iter().all(|&c| (0..width).contains(&c)) {
                        out.push(Self::encode_unchecked(
                            [nx as u32, ny as u32, nz as u32],
                            level,
                        ));
                    }
                }
            }
        }
        out.sort_unstable_by_key(|k| k.0);
        out
    }

    /// Whether `self` is `other` or one of its ancestors.
    #[inline]
    pub fn contains(self, other: MortonKey) -> bool {
        self.level() <= other.level() && other.ancestor(self.level()) == self
    }

    /// Closed finest-grid interval `[lo, hi]` per axis.
    #[inline]
    fn finest_box(self) -> ([u64; 3], [u64; 3]) {
        let scale = 1u64 << (MAX_LEVEL - self.level());
        let a = self.anchor();
        let lo = [a[0] as u64 * scale, a[1] as u64 * scale, a[2] as u64 * scale];
        (lo, [lo[0] + scale, lo[1] + scale, lo[2] + scale])
    }

    /// True iff the closed cubes of the two keys touch (face, edge or corner)
    /// and neither contains the other.
    pub fn is_adjacent(self, other: MortonKey) -> bool {
        if self.contains(other) || other.contains(self) {
            return false;
        }
        let (alo, ahi) = self.finest_box();
        let (blo, bhi) = other.finest_box();
        (0..3).all(|i| alo[i] <= bhi[i] && blo[i] <= ahi[i])
    }

    /// Centre and half side length of the node's cube.
    pub fn bounds<T: Scalar>(self, domain: &Domain<T>) -> ([T; 3], T) {
        let width = domain.side / T::of((1u64 << self.level()) as f64);
        let half = T::of(0.5);
        let a = self.anchor();
        let center = std::array::from_fn(|i| {
            domain.origin[i] + (T::of(a[i] as f64) + half) * width
        });
        (center, width * half)
    }
}

impl Ord for MortonKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.finest_z()
            .cmp(&other.finest_z())
            .then(self.level().cmp(&other.level()))
    }
}

impl PartialOrd for MortonKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for MortonKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, l) = self.decode();
        write!(f, "MortonKey(l={l}, {:?})", a)
    }
}

/// Axis-aligned cube containing every particle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Domain<T> {
    pub origin: [T; 3],
    pub side: T,
}

impl<T: Scalar> Domain<T> {
    pub fn new(origin: [T; 3], side: T) -> Result<Self> {
        if !(side > T::zero()) || !side.is_finite() || origin.iter().any(|o| !o.is_finite()) {
            return Err(FmmError::invalid(format!(
                "domain needs a finite positive side, got {side}"
            )));
        }
        Ok(Domain { origin, side })
    }

    /// Tight bounding cube of the points, grown by a relative margin of
    /// `1e-10` on every side.
    pub fn bounding(points: &[[T; 3]]) -> Result<Self> {
        if points.is_empty() {
            return Err(FmmError::invalid("cannot bound an empty point set"));
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for i in 0..3 {
                if !p[i].is_finite() {
                    return Err(FmmError::invalid(format!("non-finite coordinate {:?}", p)));
                }
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        let mut extent = (0..3).map(|i| hi[i] - lo[i]).fold(T::zero(), T::max);
        if extent == T::zero() {
            extent = T::one();
        }
        let margin = extent * T::of(1e-10);
        // keep the cube centred on the point cloud
        let side = extent + margin + margin;
        let origin = std::array::from_fn(|i| {
            let mid = (lo[i] + hi[i]) * T::of(0.5);
            mid - side * T::of(0.5)
        });
        Domain::new(origin, side)
    }

    pub fn contains(&self, p: &[T; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.origin[i] && p[i] <= self.origin[i] + self.side)
    }

    /// Anchor of the finest-level cell containing `p`. Cells are half open,
    /// except at the upper domain boundary.
    #[inline]
    pub fn finest_anchor(&self, p: &[T; 3]) -> [u32; 3] {
        let cells = T::of(FINEST_GRID as f64);
        std::array::from_fn(|i| {
            let t = ((p[i] - self.origin[i]) / self.side * cells).floor();
            let t = t.to_f64().unwrap_or(0.0);
            t.clamp(0.0, (FINEST_GRID - 1) as f64) as u32
        })
    }

    /// Finest-grid Z index of `p`.
    #[inline]
    pub fn finest_z(&self, p: &[T; 3]) -> u64 {
        interleave(self.finest_anchor(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(a: [u32; 3], l: u32) -> MortonKey {
        MortonKey::encode(a, l).unwrap()
    }

    /// Bit-by-bit reference interleaving.
    fn naive_interleave(a: [u32; 3]) -> u64 {
        let mut z = 0u64;
        for bit in 0..16 {
            for (d, shift) in [(0usize, 2u32), (1, 1), (2, 0)] {
                z |= (((a[d] >> bit) & 1) as u64) << (3 * bit + shift);
            }
        }
        z
    }

    /// Cube of a key in finest-grid units, as floats.
    fn cube(k: MortonKey) -> ([f64; 3], f64) {
        let w = (1u64 << (MAX_LEVEL - k.level())) as f64;
        (k.anchor().map(|a| a as f64 * w), w)
    }

    fn brute_adjacent(a: MortonKey, b: MortonKey) -> bool {
        let (alo, aw) = cube(a);
        let (blo, bw) = cube(b);
        let touch = (0..3).all(|i| alo[i] <= blo[i] + bw && blo[i] <= alo[i] + aw);
        let a_in_b = (0..3).all(|i| alo[i] >= blo[i] && alo[i] + aw <= blo[i] + bw);
        let b_in_a = (0..3).all(|i| blo[i] >= alo[i] && blo[i] + bw <= alo[i] + aw);
        touch && !a_in_b && !b_in_a
    }

    fn all_keys_to(level: u32) -> Vec<MortonKey> {
        let mut out = vec![];
        for l in 0..=level {
            let n = 1u32 << l;
            for x in 0..n {
                for y in 0..n {
                    for z in 0..n {
                        out.push(key([x, y, z], l));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn root_is_zero() {
        assert_eq!(key([0, 0, 0], 0).raw(), 0);
        assert_eq!(MortonKey::ROOT.decode(), ([0, 0, 0], 0));
    }

    #[test]
    fn level_one_round_trip() {
        assert_eq!(key([1, 0, 0], 1).decode(), ([1, 0, 0], 1));
    }

    #[test]
    fn level_one_order_is_z_order() {
        let mut anchors = vec![];
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    anchors.push([x, y, z]);
                }
            }
        }
        let mut keys: Vec<_> = anchors.iter().map(|&a| key(a, 1)).collect();
        keys.sort_by_key(|k| k.raw());
        keys.dedup();
        assert_eq!(keys.len(), 8);
        let mut by_z = anchors.clone();
        by_z.sort_by_key(|&a| naive_interleave(a));
        let decoded: Vec<_> = keys.iter().map(|k| k.anchor()).collect();
        assert_eq!(decoded, by_z);
    }

    #[test]
    fn encode_rejects_out_of_range() {
        assert!(MortonKey::encode([0, 0, 0], 16).is_err());
        assert!(MortonKey::encode([2, 0, 0], 1).is_err());
        assert!(MortonKey::encode([0, 0, 1 << 15], 15).is_err());
        assert!(MortonKey::encode([(1 << 15) - 1; 3], 15).is_ok());
    }

    #[test]
    fn from_raw_rejects_garbage() {
        // level 1 with an anchor bit set at level-2 position
        let bad = (0b1000u64 << LEVEL_BITS) | 1;
        assert!(MortonKey::from_raw(bad).is_err());
        let k = key([3, 1, 2], 2);
        assert_eq!(MortonKey::from_raw(k.raw()).unwrap(), k);
    }

    #[test]
    fn parent_examples() {
        for c in MortonKey::ROOT.children().unwrap() {
            assert_eq!(c.parent().unwrap(), MortonKey::ROOT);
        }
        assert_eq!(key([3, 2, 1], 2).parent().unwrap(), key([1, 1, 0], 1));
        assert!(MortonKey::ROOT.parent().is_err());
    }

    #[test]
    fn children_examples() {
        let kids = MortonKey::ROOT.children().unwrap();
        let mut anchors: Vec<_> = kids.iter().map(|k| k.anchor()).collect();
        anchors.sort();
        anchors.dedup();
        assert_eq!(anchors.len(), 8);
        assert!(kids.windows(2).all(|w| w[0].raw() < w[1].raw()));
        assert!(key([0, 0, 0], 15).children().is_err());
        for (i, c) in kids.iter().enumerate() {
            assert_eq!(c.octant(), i);
        }
    }

    #[test]
    fn children_tile_parent() {
        let domain = Domain::new([0.0f64, -1.0, 2.0], 3.0).unwrap();
        let parent = key([1, 2, 3], 2);
        let (pc, ph) = parent.bounds(&domain);
        let mut volume = 0.0;
        let mut seen = std::collections::HashSet::new();
        for c in parent.children().unwrap() {
            let (cc, ch) = c.bounds(&domain);
            assert!((ch - ph / 2.0).abs() < 1e-15);
            for i in 0..3 {
                assert!(cc[i] - ch >= pc[i] - ph - 1e-12);
                assert!(cc[i] + ch <= pc[i] + ph + 1e-12);
            }
            // distinct lower corners
            let corner: Vec<i64> = (0..3)
                .map(|i| ((cc[i] - ch - (pc[i] - ph)) / ch).round() as i64)
                .collect();
            assert!(seen.insert(corner));
            volume += (2.0 * ch).powi(3);
        }
        assert!((volume - (2.0 * ph).powi(3)).abs() < 1e-12);
    }

    #[test]
    fn neighbor_counts() {
        assert!(MortonKey::ROOT.neighbors().is_empty());
        assert_eq!(key([0, 0, 0], 1).neighbors().len(), 7);
        assert_eq!(key([1, 1, 1], 2).neighbors().len(), 26);
        let n = key([1, 1, 1], 2).neighbors();
        assert!(n.windows(2).all(|w| w[0].raw() < w[1].raw()));
    }

    #[test]
    fn neighbors_match_brute_force_on_level_two() {
        let level2: Vec<_> = all_keys_to(2).into_iter().filter(|k| k.level() == 2).collect();
        for &a in &level2 {
            let mut brute: Vec<_> = level2
                .iter()
                .copied()
                .filter(|&b| b != a)
                .filter(|&b| {
                    let (x, y) = (a.anchor(), b.anchor());
                    (0..3).all(|i| (x[i] as i64 - y[i] as i64).abs() <= 1)
                })
                .collect();
            brute.sort_by_key(|k| k.raw());
            assert_eq!(a.neighbors(), brute);
            for b in a.neighbors() {
                assert!(b.neighbors().contains(&a));
            }
        }
    }

    #[test]
    fn adjacency_examples() {
        let kids = MortonKey::ROOT.children().unwrap();
        assert!(kids[0].is_adjacent(kids[1]));
        assert!(!MortonKey::ROOT.is_adjacent(kids[3]));
        assert!(!MortonKey::ROOT.is_adjacent(key([2, 3, 1], 2)));
        let a = key([0, 0, 0], 1);
        assert!(a.is_adjacent(key([2, 0, 0], 2)));
        assert!(!a.is_adjacent(key([3, 0, 0], 2)));
        assert!(!a.is_adjacent(a));
    }

    #[test]
    fn adjacency_matches_cube_oracle_to_level_three() {
        let keys = all_keys_to(3);
        for &a in &keys {
            for &b in &keys {
                let got = a.is_adjacent(b);
                assert_eq!(got, brute_adjacent(a, b), "{a:?} {b:?}");
                assert_eq!(got, b.is_adjacent(a));
            }
        }
    }

    #[test]
    fn ordering_puts_ancestors_first() {
        let mut keys = all_keys_to(2);
        keys.sort();
        for (i, &k) in keys.iter().enumerate() {
            for &later in &keys[i + 1..] {
                assert!(!later.contains(k) || later == k);
            }
        }
        // fixed-level order equals raw order
        let lvl2: Vec<_> = keys.iter().copied().filter(|k| k.level() == 2).collect();
        assert!(lvl2.windows(2).all(|w| w[0].raw() < w[1].raw()));
    }

    #[test]
    fn node_bounds_examples() {
        let d = Domain::new([0.0f64; 3], 1.0).unwrap();
        assert_eq!(MortonKey::ROOT.bounds(&d), ([0.5, 0.5, 0.5], 0.5));
        assert_eq!(key([1, 0, 0], 1).bounds(&d), ([0.75, 0.25, 0.25], 0.25));
    }

    #[test]
    fn finest_anchor_boundaries() {
        let d = Domain::new([0.0f64; 3], 1.0).unwrap();
        assert_eq!(d.finest_anchor(&[0.0, 0.0, 0.0]), [0, 0, 0]);
        let top = (1u32 << 15) - 1;
        assert_eq!(d.finest_anchor(&[1.0, 1.0, 1.0]), [top; 3]);
        // a point on an internal split plane goes to the upper cell
        let half = d.finest_anchor(&[0.5, 0.25, 0.75]);
        assert_eq!(half, [1 << 14, 1 << 13, 3 << 13]);
    }

    #[test]
    fn bounding_domain_contains_points() {
        let pts = vec![[0.1f64, -2.0, 3.0], [0.4, 5.0, 3.5], [0.2, 0.0, 2.9]];
        let d = Domain::bounding(&pts).unwrap();
        assert!(pts.iter().all(|p| d.contains(p)));
        assert!((d.side - 7.0 * (1.0 + 2e-10)).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn encode_decode_round_trip(level in 0u32..=15, seed in any::<[u32; 3]>()) {
            let mask = if level == 0 { 0 } else { (1u32 << level) - 1 };
            let anchor = seed.map(|s| s & mask);
            let k = MortonKey::encode(anchor, level).unwrap();
            prop_assert_eq!(k.decode(), (anchor, level));
            prop_assert_eq!(k.raw() >> 4, naive_interleave(anchor));
        }

        #[test]
        fn parent_of_children(level in 0u32..15, seed in any::<[u32; 3]>()) {
            let mask = if level == 0 { 0 } else { (1u32 << level) - 1 };
            let k = MortonKey::encode(seed.map(|s| s & mask), level).unwrap();
            for c in k.children().unwrap() {
                prop_assert_eq!(c.parent().unwrap(), k);
                prop_assert!(k.contains(c));
                prop_assert_eq!(MortonKey::from_finest_z(c.finest_z(), level), k);
            }
        }
    }
}
