//! Adaptive linear octree.
//!
//! The tree is stored as flat, sorted vectors of [`MortonKey`]s. Every key
//! gets a dense node index: nodes are numbered level by level, and within a
//! level in ascending key order, so all nodes of one level occupy a
//! contiguous index range. Coefficient buffers elsewhere in the crate are
//! addressed with these indices.
//!
//! Empty octants are never stored. Leaves are refined until they hold at
//! most `n_crit` particles, then refined further until the tree satisfies
//! the 2:1 balance condition.

use std::collections::HashMap;
use std::ops::Range;

use log::warn;

use crate::error::{FmmError, Result};
use crate::morton::{Domain, MortonKey, MAX_LEVEL};
use crate::scalar::Scalar;

/// Particle positions and charges, plus the permutation back to input order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet<T> {
    pub positions: Vec<[T; 3]>,
    pub charges: Vec<T>,
    pub original_index: Vec<usize>,
}

impl<T: Scalar> ParticleSet<T> {
    pub fn new(positions: Vec<[T; 3]>, charges: Vec<T>) -> Result<Self> {
        if positions.len() != charges.len() {
            return Err(FmmError::invalid(format!(
                "{} positions but {} charges",
                positions.len(),
                charges.len()
            )));
        }
        let original_index = (0..positions.len()).collect();
        Ok(ParticleSet {
            positions,
            charges,
            original_index,
        })
    }

    /// Unit charges at the given positions.
    pub fn unit(positions: Vec<[T; 3]>) -> Self {
        let charges = vec![T::one(); positions.len()];
        Self::new(positions, charges).expect("lengths match")
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn permute(&mut self, order: &[usize]) {
        self.positions = order.iter().map(|&i| self.positions[i]).collect();
        self.charges = order.iter().map(|&i| self.charges[i]).collect();
        self.original_index = order.iter().map(|&i| self.original_index[i]).collect();
    }

    /// Scatter values given in the current particle order back to input order.
    pub fn to_input_order<V: Copy + Default>(&self, values: &[V]) -> Vec<V> {
        let mut out = vec![V::default(); values.len()];
        for (v, &orig) in values.iter().zip(&self.original_index) {
            out[orig] = *v;
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct LinearTree<T> {
    pub domain: Domain<T>,
    pub n_crit: usize,
    /// Deepest leaf level.
    pub depth: u32,
    /// Leaves in linear-octree order (see [`MortonKey`]'s `Ord`).
    pub leaves: Vec<MortonKey>,
    /// Per level, the sorted keys of all nodes present at that level.
    pub keys_by_level: Vec<Vec<MortonKey>>,
    /// For each leaf, its slice of the reordered particle buffer.
    pub leaf_particle_ptr: Vec<Range<usize>>,
    /// Leaves kept at `MAX_LEVEL` with more than `n_crit` particles.
    pub overfull: Vec<MortonKey>,
    level_offsets: Vec<usize>,
    key_index: HashMap<MortonKey, usize>,
    node_leaf: Vec<Option<usize>>,
    leaf_node: Vec<usize>,
}

impl<T: Scalar> LinearTree<T> {
    /// Build the balanced tree and reorder `particles` so that every leaf's
    /// particles are contiguous, in leaf order.
    pub fn build(particles: &mut ParticleSet<T>, n_crit: usize, domain: Domain<T>) -> Result<Self> {
        if particles.is_empty() {
            return Err(FmmError::invalid("at least one particle is required"));
        }
        if n_crit == 0 {
            return Err(FmmError::invalid("n_crit must be at least 1"));
        }
        for (index, p) in particles.positions.iter().enumerate() {
            if !domain.contains(p) {
                return Err(FmmError::OutsideDomain {
                    index,
                    position: p.map(|c| c.to_f64().unwrap_or(f64::NAN)),
                });
            }
        }

        let codes: Vec<u64> = particles.positions.iter().map(|p| domain.finest_z(p)).collect();
        let mut order: Vec<usize> = (0..codes.len()).collect();
        order.sort_by_key(|&i| codes[i]);
        let sorted: Vec<u64> = order.iter().map(|&i| codes[i]).collect();
        particles.permute(&order);

        let (unbalanced, overfull) = split_leaves(&sorted, n_crit);
        for key in &overfull {
            warn!("leaf {key:?} holds more than {n_crit} particles at the maximum level");
        }
        let leaves = balance(&unbalanced, &sorted)?;
        Ok(Self::from_leaves(domain, n_crit, leaves, &sorted, overfull))
    }

    /// Assemble the index structures for an already valid leaf set.
    /// `sorted_codes` are the finest-grid Z indices of the (reordered) particles.
    pub fn from_leaves(
        domain: Domain<T>,
        n_crit: usize,
        mut leaves: Vec<MortonKey>,
        sorted_codes: &[u64],
        overfull: Vec<MortonKey>,
    ) -> Self {
        leaves.sort();
        let keys_by_level = ancestors_by_level(&leaves);
        let depth = (keys_by_level.len() - 1) as u32;

        let mut level_offsets = Vec::with_capacity(keys_by_level.len() + 1);
        let mut key_index = HashMap::new();
        let mut offset = 0;
        for level in &keys_by_level {
            level_offsets.push(offset);
            for (i, &k) in level.iter().enumerate() {
                key_index.insert(k, offset + i);
            }
            offset += level.len();
        }
        level_offsets.push(offset);

        let mut node_leaf = vec![None; offset];
        let mut leaf_node = Vec::with_capacity(leaves.len());
        let mut leaf_particle_ptr = Vec::with_capacity(leaves.len());
        for (li, &leaf) in leaves.iter().enumerate() {
            let node = key_index[&leaf];
            node_leaf[node] = Some(li);
            leaf_node.push(node);
            leaf_particle_ptr.push(particle_range(sorted_codes, leaf));
        }

        LinearTree {
            domain,
            n_crit,
            depth,
            leaves,
            keys_by_level,
            leaf_particle_ptr,
            overfull,
            level_offsets,
            key_index,
            node_leaf,
            leaf_node,
        }
    }

    pub fn num_nodes(&self) -> usize {
        *self.level_offsets.last().unwrap()
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    /// Dense node index of a key, if the node exists.
    #[inline]
    pub fn node_index(&self, key: MortonKey) -> Option<usize> {
        self.key_index.get(&key).copied()
    }

    pub fn node_key(&self, node: usize) -> MortonKey {
        let level = self.level_offsets.partition_point(|&o| o <= node) - 1;
        self.keys_by_level[level][node - self.level_offsets[level]]
    }

    /// Node index range of a level.
    pub fn level_range(&self, level: u32) -> Range<usize> {
        let l = level as usize;
        if l + 1 >= self.level_offsets.len() {
            let end = self.num_nodes();
            return end..end;
        }
        self.level_offsets[l]..self.level_offsets[l + 1]
    }

    #[inline]
    pub fn leaf_of_node(&self, node: usize) -> Option<usize> {
        self.node_leaf[node]
    }

    #[inline]
    pub fn node_of_leaf(&self, leaf: usize) -> usize {
        self.leaf_node[leaf]
    }

    pub fn contains(&self, key: MortonKey) -> bool {
        self.key_index.contains_key(&key)
    }

    pub fn is_leaf(&self, key: MortonKey) -> bool {
        matches!(self.node_index(key), Some(n) if self.node_leaf[n].is_some())
    }

    /// Children of `key` present in the tree, ascending.
    pub fn children_in_tree(&self, key: MortonKey) -> impl Iterator<Item = MortonKey> + '_ {
        key.children()
            .into_iter()
            .flatten()
            .filter(move |c| self.key_index.contains_key(c))
    }

    /// Closest ancestor-or-self of `key` stored in the tree.
    pub fn nearest_present(&self, key: MortonKey) -> Option<MortonKey> {
        let mut k = key;
        loop {
            if self.contains(k) {
                return Some(k);
            }
            k = k.parent().ok()?;
        }
    }

    /// Particle slice of the leaf stored at a node, empty for interior nodes.
    pub fn node_particles(&self, node: usize) -> Range<usize> {
        match self.node_leaf[node] {
            Some(l) => self.leaf_particle_ptr[l].clone(),
            None => 0..0,
        }
    }

    /// Particle slice covered by any node (the union of its leaves' slices).
    pub fn subtree_particles(&self, key: MortonKey) -> Range<usize> {
        let lo = self.leaves.partition_point(|l| *l < key);
        let hi = lo + self.leaves[lo..].partition_point(|l| key.contains(*l));
        if lo == hi {
            return 0..0;
        }
        self.leaf_particle_ptr[lo].start..self.leaf_particle_ptr[hi - 1].end
    }
}

/// Indices of the sorted codes inside `key`'s cube.
fn particle_range(sorted_codes: &[u64], key: MortonKey) -> Range<usize> {
    let lo = key.finest_z();
    let hi = lo + key.finest_span();
    let start = sorted_codes.partition_point(|&c| c < lo);
    let end = start + sorted_codes[start..].partition_point(|&c| c < hi);
    start..end
}

/// Recursive n_crit splitting of sorted particle codes; empty octants are
/// dropped. Returns the leaves and the subset kept over-full at `MAX_LEVEL`.
pub fn split_leaves(sorted_codes: &[u64], n_crit: usize) -> (Vec<MortonKey>, Vec<MortonKey>) {
    let mut leaves = Vec::new();
    let mut overfull = Vec::new();
    let mut stack = vec![(MortonKey::ROOT, 0..sorted_codes.len())];
    while let Some((key, range)) = stack.pop() {
        if range.len() <= n_crit {
            leaves.push(key);
            continue;
        }
        if key.level() == MAX_LEVEL {
            overfull.push(key);
            leaves.push(key);
            continue;
        }
        let codes = &sorted_codes[range.clone()];
        for child in key.children().unwrap().into_iter().rev() {
            let r = particle_range(codes, child);
            if !r.is_empty() {
                stack.push((child, range.start + r.start..range.start + r.end));
            }
        }
    }
    leaves.sort();
    overfull.sort();
    (leaves, overfull)
}

/// All nodes (leaves and their ancestors) with a leaf flag.
fn node_map(leaves: &[MortonKey]) -> HashMap<MortonKey, bool> {
    let mut nodes: HashMap<MortonKey, bool> = HashMap::with_capacity(leaves.len() * 2);
    for &leaf in leaves {
        nodes.insert(leaf, true);
        let mut k = leaf;
        while let Ok(p) = k.parent() {
            if nodes.insert(p, false).is_some() {
                break;
            }
            k = p;
        }
    }
    nodes
}

/// Whether a leaf touches a subdivided node one level finer than itself,
/// i.e. whether some descendant two or more levels finer sits against it.
fn violates_balance(leaf: MortonKey, nodes: &HashMap<MortonKey, bool>) -> bool {
    if leaf.level() + 2 > MAX_LEVEL {
        return false;
    }
    leaf.neighbors().into_iter().any(|colleague| {
        nodes.get(&colleague) == Some(&false)
            && colleague.children().unwrap().into_iter().any(|c| {
                nodes.get(&c) == Some(&false) && c.is_adjacent(leaf)
            })
    })
}

/// Refine a leaf set until adjacent leaves differ by at most one level.
///
/// The condition enforced is the 2:1 balance of the full octree with empty
/// octants filled in: no leaf may touch a node that is subdivided below the
/// leaf's level plus one. On the stored (non-empty) leaves this implies the
/// pairwise rule, and it guarantees that the W and X lists of every node only
/// reach one level away. Refinement creates only non-empty children, as
/// decided by `sorted_codes`.
pub fn balance(leaves: &[MortonKey], sorted_codes: &[u64]) -> Result<Vec<MortonKey>> {
    let mut leaves = leaves.to_vec();
    leaves.sort();
    loop {
        let nodes = node_map(&leaves);
        let refine: Vec<bool> = leaves.iter().map(|&l| violates_balance(l, &nodes)).collect();
        if !refine.iter().any(|&r| r) {
            return Ok(leaves);
        }
        let mut next = Vec::with_capacity(leaves.len() + 8 * refine.len());
        for (&leaf, &split) in leaves.iter().zip(&refine) {
            if !split {
                next.push(leaf);
                continue;
            }
            let children = leaf
                .children()
                .map_err(|_| FmmError::MaxLevelExceeded { key: leaf })?;
            next.extend(
                children
                    .into_iter()
                    .filter(|&c| !particle_range(sorted_codes, c).is_empty()),
            );
        }
        next.sort();
        leaves = next;
    }
}

/// Leaves and all of their ancestors, grouped by level and sorted; level 0
/// holds exactly the root.
pub fn ancestors_by_level(leaves: &[MortonKey]) -> Vec<Vec<MortonKey>> {
    let depth = leaves.iter().map(|k| k.level()).max().unwrap_or(0) as usize;
    let mut levels: Vec<Vec<MortonKey>> = vec![Vec::new(); depth + 1];
    for (key, _) in node_map(leaves) {
        levels[key.level() as usize].push(key);
    }
    if levels[0].is_empty() {
        levels[0].push(MortonKey::ROOT);
    }
    for level in &mut levels {
        level.sort_unstable_by_key(|k| k.raw());
    }
    levels
}
