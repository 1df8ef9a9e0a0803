//! U, V, W and X interaction lists.
//!
//! - U (leaves): adjacent leaves and the leaf itself; evaluated directly.
//! - V (nodes at level >= 2): children of the parent's neighbours that are
//!   not adjacent to the node; handled by M2L.
//! - W (leaves): descendants of the leaf's neighbours whose parent touches
//!   the leaf but which do not; handled by M2P.
//! - X (nodes): leaves `a` with the node in `W(a)`; handled by P2L.
//!
//! Every function walks the tree generically and makes no assumption about
//! balance. On a 2:1-balanced tree W members are exactly one level finer
//! than their target and X members one level coarser.

use rayon::prelude::*;

use crate::error::{FmmError, Result};
use crate::morton::MortonKey;
use crate::scalar::Scalar;
use crate::tree::LinearTree;

pub const MAX_U: usize = 60;
pub const MAX_V: usize = 189;
pub const MAX_W: usize = 148;
pub const MAX_X: usize = 19;

fn require_leaf<T: Scalar>(key: MortonKey, tree: &LinearTree<T>) -> Result<()> {
    if tree.is_leaf(key) {
        Ok(())
    } else {
        Err(FmmError::invalid(format!("{key:?} is not a leaf of the tree")))
    }
}

fn finish(mut keys: Vec<MortonKey>) -> Vec<MortonKey> {
    keys.sort_unstable();
    keys.dedup();
    keys
}

fn adjacent_leaves_below<T: Scalar>(
    node: MortonKey,
    target: MortonKey,
    tree: &LinearTree<T>,
    out: &mut Vec<MortonKey>,
) {
    for child in tree.children_in_tree(node) {
        if child.is_adjacent(target) {
            if tree.is_leaf(child) {
                out.push(child);
            } else {
                adjacent_leaves_below(child, target, tree, out);
            }
        }
    }
}

/// Leaves touching `leaf`, plus `leaf` itself.
pub fn u_list<T: Scalar>(leaf: MortonKey, tree: &LinearTree<T>) -> Result<Vec<MortonKey>> {
    require_leaf(leaf, tree)?;
    let mut out = vec![leaf];
    for n in leaf.neighbors() {
        match tree.nearest_present(n) {
            Some(found) if found == n => {
                if tree.is_leaf(n) {
                    out.push(n);
                } else {
                    adjacent_leaves_below(n, leaf, tree, &mut out);
                }
            }
            // a coarser leaf covering the neighbour's cube
            Some(found) if tree.is_leaf(found) && found.is_adjacent(leaf) => out.push(found),
            _ => {}
        }
    }
    Ok(finish(out))
}

/// Same-level well-separated nodes whose parents neighbour `node`'s parent.
/// Empty for levels 0 and 1.
pub fn v_list<T: Scalar>(node: MortonKey, tree: &LinearTree<T>) -> Vec<MortonKey> {
    if node.level() < 2 {
        return Vec::new();
    }
    let parent = node.parent().unwrap();
    let mut out = Vec::new();
    for n in parent.neighbors() {
        if !tree.contains(n) {
            continue;
        }
        out.extend(tree.children_in_tree(n).filter(|c| !c.is_adjacent(node)));
    }
    finish(out)
}

fn w_below<T: Scalar>(node: MortonKey, leaf: MortonKey, tree: &LinearTree<T>, out: &mut Vec<MortonKey>) {
    for child in tree.children_in_tree(node) {
        if !child.is_adjacent(leaf) {
            out.push(child);
        } else if !tree.is_leaf(child) {
            w_below(child, leaf, tree, out);
        }
    }
}

pub fn w_list<T: Scalar>(leaf: MortonKey, tree: &LinearTree<T>) -> Result<Vec<MortonKey>> {
    require_leaf(leaf, tree)?;
    let mut out = Vec::new();
    for n in leaf.neighbors() {
        if tree.contains(n) && !tree.is_leaf(n) {
            w_below(n, leaf, tree, &mut out);
        }
    }
    Ok(finish(out))
}

/// Coarser leaves that touch `node`'s parent but not `node`. Defined for
/// every node in the tree, not only leaves: a subdivided node can be a W
/// member of a coarse leaf, and its subtree then receives that leaf's
/// particles through its own local expansion.
pub fn x_list<T: Scalar>(node: MortonKey, tree: &LinearTree<T>) -> Result<Vec<MortonKey>> {
    if !tree.contains(node) {
        return Err(FmmError::invalid(format!("{node:?} is not a node of the tree")));
    }
    let Ok(parent) = node.parent() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for n in parent.neighbors() {
        if let Some(found) = tree.nearest_present(n) {
            if tree.is_leaf(found) && !found.is_adjacent(node) {
                out.push(found);
            }
        }
    }
    Ok(finish(out))
}

/// Compressed rows of node indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Csr {
    offsets: Vec<usize>,
    data: Vec<usize>,
}

impl Csr {
    fn from_rows(rows: impl IntoIterator<Item = Vec<usize>>) -> Self {
        let mut offsets = vec![0];
        let mut data = Vec::new();
        for row in rows {
            data.extend(row);
            offsets.push(data.len());
        }
        Csr { offsets, data }
    }

    #[inline]
    pub fn row(&self, node: usize) -> &[usize] {
        &self.data[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn num_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        self.data.len()
    }
}

/// All four lists for every node, stored densely by node index.
#[derive(Clone, Debug)]
pub struct InteractionLists {
    pub u: Csr,
    pub v: Csr,
    pub w: Csr,
    pub x: Csr,
}

impl InteractionLists {
    pub fn build<T: Scalar>(tree: &LinearTree<T>) -> Self {
        let to_nodes = |keys: Vec<MortonKey>| -> Vec<usize> {
            keys.into_iter()
                .map(|k| tree.node_index(k).expect("list entries are tree nodes"))
                .collect()
        };
        let rows: Vec<[Vec<usize>; 4]> = (0..tree.num_nodes())
            .into_par_iter()
            .map(|node| {
                let key = tree.node_key(node);
                let is_leaf = tree.leaf_of_node(node).is_some();
                let u = if is_leaf { u_list(key, tree).unwrap() } else { vec![] };
                let w = if is_leaf { w_list(key, tree).unwrap() } else { vec![] };
                let v = v_list(key, tree);
                let x = x_list(key, tree).unwrap();
                [to_nodes(u), to_nodes(v), to_nodes(w), to_nodes(x)]
            })
            .collect();
        let mut split: [Vec<Vec<usize>>; 4] = Default::default();
        for row in rows {
            for (dst, r) in split.iter_mut().zip(row) {
                dst.push(r);
            }
        }
        let [u, v, w, x] = split.map(Csr::from_rows);
        InteractionLists { u, v, w, x }
    }

    /// Size statistics: U, W and X over leaves, V over nodes at level >= 2.
    pub fn stats<T: Scalar>(&self, tree: &LinearTree<T>) -> ListStats {
        let leaf_nodes: Vec<usize> = (0..tree.num_leaves()).map(|l| tree.node_of_leaf(l)).collect();
        let deep_nodes: Vec<usize> = (2..=tree.depth).flat_map(|l| tree.level_range(l)).collect();
        ListStats {
            u: SizeStats::of(leaf_nodes.iter().map(|&n| self.u.row(n).len())),
            v: SizeStats::of(deep_nodes.iter().map(|&n| self.v.row(n).len())),
            w: SizeStats::of(leaf_nodes.iter().map(|&n| self.w.row(n).len())),
            x: SizeStats::of(leaf_nodes.iter().map(|&n| self.x.row(n).len())),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SizeStats {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
    pub count: usize,
}

impl SizeStats {
    fn of(sizes: impl Iterator<Item = usize>) -> Self {
        let mut s = SizeStats {
            min: usize::MAX,
            ..Default::default()
        };
        let mut total = 0usize;
        for n in sizes {
            s.min = s.min.min(n);
            s.max = s.max.max(n);
            total += n;
            s.count += 1;
        }
        if s.count == 0 {
            s.min = 0;
        } else {
            s.mean = total as f64 / s.count as f64;
        }
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ListStats {
    pub u: SizeStats,
    pub v: SizeStats,
    pub w: SizeStats,
    pub x: SizeStats,
}
