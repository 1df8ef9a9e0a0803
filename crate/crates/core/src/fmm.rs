//! Orchestration: tree and list setup, operator cache, and the two passes.
//!
//! Upward pass: P2M at every leaf, then M2M level by level from the deepest
//! level up to the root. Downward pass: P2L into every target node first,
//! then for each level from 2 to the depth, L2L from the parent level
//! (from level 3 on) followed by M2L; finally M2P, L2P and the near field
//! at the leaves.
//!
//! Every parallel task owns a single node's coefficients or a single
//! leaf's potentials and sums its inputs in a fixed order, so results are
//! bit-identical for any thread count.

use std::ops::Range;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use crate::error::{FmmError, Result};
use crate::kernel::{p2p, p2p_accumulate, p2p_soa_accumulate, SoaSources};
use crate::lists::InteractionLists;
use crate::morton::Domain;
use crate::operators::{self, Expansions, OperatorCache};
use crate::persistence;
use crate::scalar::Scalar;
use crate::tree::{LinearTree, ParticleSet};

#[derive(Clone, Debug, PartialEq)]
pub struct FmmConfig {
    /// Expansion order; surfaces carry `6 (p - 1)^2 + 2` points.
    pub p: usize,
    /// Order of the check surfaces; `None` uses `p`.
    pub p_check: Option<usize>,
    pub n_crit: usize,
    pub alpha_inner: f64,
    pub alpha_outer: f64,
    pub svd_cutoff: f64,
    /// Worker threads; 0 uses the global rayon pool.
    pub threads: usize,
    pub l2p_cache_local: bool,
    /// Operator cache file, loaded when its fingerprint matches.
    pub cache_path: Option<PathBuf>,
}

impl Default for FmmConfig {
    fn default() -> Self {
        FmmConfig {
            p: 6,
            p_check: None,
            n_crit: 150,
            alpha_inner: 1.05,
            alpha_outer: 2.95,
            svd_cutoff: 1e-12,
            threads: 0,
            l2p_cache_local: true,
            cache_path: None,
        }
    }
}

impl FmmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FmmError::InvalidArgument(m));
        if self.p < 2 {
            return bad(format!("p must be >= 2, got {}", self.p));
        }
        if self.check_order() < 2 {
            return bad(format!("p_check must be >= 2, got {}", self.check_order()));
        }
        if self.n_crit < 1 {
            return bad("n_crit must be >= 1".into());
        }
        if !(self.alpha_inner > 0.0 && self.alpha_inner < self.alpha_outer && self.alpha_outer.is_finite()) {
            return bad(format!(
                "need 0 < alpha_inner < alpha_outer, got {} and {}",
                self.alpha_inner, self.alpha_outer
            ));
        }
        if !(self.svd_cutoff > 0.0 && self.svd_cutoff < 1.0) {
            return bad(format!("svd_cutoff must lie in (0, 1), got {}", self.svd_cutoff));
        }
        Ok(())
    }

    pub fn check_order(&self) -> usize {
        self.p_check.unwrap_or(self.p)
    }
}

/// Wall-clock seconds per phase.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timings {
    pub tree: f64,
    pub lists: f64,
    /// Precomputation or cache load.
    pub operators: f64,
    pub p2m: f64,
    pub m2m: f64,
    pub p2l: f64,
    pub m2l: f64,
    pub l2l: f64,
    pub m2p: f64,
    pub l2p: f64,
    pub near_field: f64,
    /// Upward plus downward pass.
    pub evaluate: f64,
}

impl Timings {
    /// Per-operator times in execution order.
    pub fn operators(&self) -> [(&'static str, f64); 8] {
        [
            ("p2m", self.p2m),
            ("m2m", self.m2m),
            ("p2l", self.p2l),
            ("m2l", self.m2l),
            ("l2l", self.l2l),
            ("m2p", self.m2p),
            ("l2p", self.l2p),
            ("near_field", self.near_field),
        ]
    }

    pub fn setup(&self) -> f64 {
        self.tree + self.lists + self.operators
    }
}

/// Operator invocation counts from the last evaluation. Translation
/// operators are counted once per level they run on; the others once per
/// target node (indexed like the tree's nodes).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CallCounters {
    pub m2m_levels: u32,
    pub m2l_levels: u32,
    pub l2l_levels: u32,
    pub p2m: Vec<u32>,
    pub p2l: Vec<u32>,
    pub m2p: Vec<u32>,
    pub l2p: Vec<u32>,
    pub near_field: Vec<u32>,
}

struct Counters {
    m2m_levels: u32,
    m2l_levels: u32,
    l2l_levels: u32,
    p2m: Vec<AtomicU32>,
    p2l: Vec<AtomicU32>,
    m2p: Vec<AtomicU32>,
    l2p: Vec<AtomicU32>,
    near_field: Vec<AtomicU32>,
}

impl Counters {
    fn new(num_nodes: usize) -> Self {
        let zeros = || (0..num_nodes).map(|_| AtomicU32::new(0)).collect();
        Counters {
            m2m_levels: 0,
            m2l_levels: 0,
            l2l_levels: 0,
            p2m: zeros(),
            p2l: zeros(),
            m2p: zeros(),
            l2p: zeros(),
            near_field: zeros(),
        }
    }

    fn reset(&mut self) {
        self.m2m_levels = 0;
        self.m2l_levels = 0;
        self.l2l_levels = 0;
        for v in [&self.p2m, &self.p2l, &self.m2p, &self.l2p, &self.near_field] {
            v.iter().for_each(|c| c.store(0, Ordering::Relaxed));
        }
    }

    fn snapshot(&self) -> CallCounters {
        let read = |v: &[AtomicU32]| v.iter().map(|c| c.load(Ordering::Relaxed)).collect();
        CallCounters {
            m2m_levels: self.m2m_levels,
            m2l_levels: self.m2l_levels,
            l2l_levels: self.l2l_levels,
            p2m: read(&self.p2m),
            p2l: read(&self.p2l),
            m2p: read(&self.m2p),
            l2p: read(&self.l2p),
            near_field: read(&self.near_field),
        }
    }
}

#[inline]
fn bump(counter: &AtomicU32) {
    counter.fetch_add(1, Ordering::Relaxed);
}

/// Split `buf` into the disjoint, ascending `ranges`.
fn split_ranges<'a, V>(buf: &'a mut [V], ranges: &[Range<usize>]) -> Vec<&'a mut [V]> {
    let mut out = Vec::with_capacity(ranges.len());
    let mut rest = buf;
    let mut pos = 0;
    for r in ranges {
        let (_, tail) = std::mem::take(&mut rest).split_at_mut(r.start - pos);
        let (mine, tail) = tail.split_at_mut(r.len());
        out.push(mine);
        rest = tail;
        pos = r.end;
    }
    out
}

/// FMM state for one particle set: tree, lists, operators, expansions and
/// potentials (in tree order).
pub struct Fmm<T: Scalar> {
    pub config: FmmConfig,
    pub particles: ParticleSet<T>,
    pub tree: LinearTree<T>,
    pub lists: InteractionLists,
    pub cache: Arc<OperatorCache<T>>,
    pub expansions: Expansions<T>,
    /// Potentials in tree order; see [`Fmm::potentials`].
    pub potentials_sorted: Vec<T>,
    pub timings: Timings,
    /// Nodes receiving P2L: every leaf and every interior node with a
    /// non-empty X list.
    p2l_targets: Vec<usize>,
    counters: Counters,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl<T: Scalar> Fmm<T> {
    /// Set up on the tight bounding cube of the particles.
    pub fn new(particles: ParticleSet<T>, config: FmmConfig) -> Result<Self> {
        let domain = Domain::bounding(&particles.positions)?;
        Self::with_domain(particles, config, domain)
    }

    pub fn with_domain(particles: ParticleSet<T>, config: FmmConfig, domain: Domain<T>) -> Result<Self> {
        config.validate()?;
        let pool = build_pool(config.threads)?;
        let timer = Instant::now();
        let cache = install(&pool, || load_or_precompute(&config, &domain))?;
        let elapsed = timer.elapsed().as_secs_f64();
        let mut fmm = Self::with_cache_in_pool(particles, config, domain, Arc::new(cache), pool)?;
        fmm.timings.operators = elapsed;
        Ok(fmm)
    }

    /// Set up with an existing operator cache, which must match the
    /// configuration and domain.
    pub fn with_cache(
        particles: ParticleSet<T>,
        config: FmmConfig,
        domain: Domain<T>,
        cache: Arc<OperatorCache<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let pool = build_pool(config.threads)?;
        Self::with_cache_in_pool(particles, config, domain, cache, pool)
    }

    fn with_cache_in_pool(
        mut particles: ParticleSet<T>,
        config: FmmConfig,
        domain: Domain<T>,
        cache: Arc<OperatorCache<T>>,
        pool: Option<Arc<rayon::ThreadPool>>,
    ) -> Result<Self> {
        if !cache.matches(&config, &domain) {
            return Err(FmmError::invalid(
                "operator cache was built for a different configuration or domain",
            ));
        }
        let mut timings = Timings::default();
        let timer = Instant::now();
        let tree = install(&pool, || LinearTree::build(&mut particles, config.n_crit, domain))?;
        timings.tree = timer.elapsed().as_secs_f64();
        let timer = Instant::now();
        let lists = install(&pool, || InteractionLists::build(&tree));
        timings.lists = timer.elapsed().as_secs_f64();
        info!(
            "tree: {} particles, {} leaves, {} nodes, depth {}",
            particles.len(),
            tree.num_leaves(),
            tree.num_nodes(),
            tree.depth
        );

        let p2l_targets = (0..tree.num_nodes())
            .filter(|&n| tree.leaf_of_node(n).is_some() || !lists.x.row(n).is_empty())
            .collect();
        let n = particles.len();
        Ok(Fmm {
            expansions: Expansions::new(tree.num_nodes(), cache.n_e()),
            counters: Counters::new(tree.num_nodes()),
            potentials_sorted: vec![T::zero(); n],
            config,
            particles,
            tree,
            lists,
            cache,
            timings,
            p2l_targets,
            pool,
        })
    }

    /// Run both passes. Potentials and expansions are reset first.
    pub fn evaluate(&mut self) -> Result<()> {
        let pool = self.pool.clone();
        install(&pool, || {
            let timer = Instant::now();
            self.reset();
            self.upward();
            self.downward()?;
            self.timings.evaluate = timer.elapsed().as_secs_f64();
            Ok(())
        })
    }

    /// Zero expansions, potentials and call counters.
    pub fn reset(&mut self) {
        self.expansions.zero();
        self.potentials_sorted.iter_mut().for_each(|v| *v = T::zero());
        self.counters.reset();
    }

    pub fn upward(&mut self) {
        self.p2m_phase();
        self.m2m_phase();
    }

    pub fn downward(&mut self) -> Result<()> {
        self.p2l_phase();
        for level in 2..=self.tree.depth {
            if level >= 3 {
                self.l2l_phase(level);
            }
            self.m2l_phase(level)?;
        }
        self.m2p_phase();
        self.l2p_phase();
        self.near_field_phase();
        Ok(())
    }

    /// Potentials in the caller's original particle order.
    pub fn potentials(&self) -> Vec<T> {
        self.particles.to_input_order(&self.potentials_sorted)
    }

    pub fn counters(&self) -> CallCounters {
        self.counters.snapshot()
    }

    pub fn domain(&self) -> &Domain<T> {
        &self.tree.domain
    }

    fn timed(slot: &mut f64, f: impl FnOnce()) {
        let timer = Instant::now();
        f();
        *slot += timer.elapsed().as_secs_f64();
    }

    pub fn p2m_phase(&mut self) {
        let (tree, cache, particles, counters) = (&self.tree, &*self.cache, &self.particles, &self.counters);
        let n_e = self.expansions.n_e;
        let multipole = &mut self.expansions.multipole;
        Self::timed(&mut self.timings.p2m, || {
            multipole.par_chunks_mut(n_e).enumerate().for_each(|(node, out)| {
                if let Some(leaf) = tree.leaf_of_node(node) {
                    let r = tree.leaf_particle_ptr[leaf].clone();
                    let key = tree.leaves[leaf];
                    operators::p2m(cache, key, &tree.domain, &particles.positions[r.clone()], &particles.charges[r], out);
                    bump(&counters.p2m[node]);
                }
            });
        });
    }

    /// M2M into every level from `depth - 1` up to the root.
    pub fn m2m_phase(&mut self) {
        let (tree, cache) = (&self.tree, &*self.cache);
        let n_e = self.expansions.n_e;
        let multipole = &mut self.expansions.multipole;
        let mut invocations = 0;
        Self::timed(&mut self.timings.m2m, || {
            for child_level in (1..=tree.depth).rev() {
                let parents = tree.level_range(child_level - 1);
                let (coarse, fine) = multipole.split_at_mut(parents.end * n_e);
                let fine_start = parents.end;
                coarse[parents.start * n_e..]
                    .par_chunks_mut(n_e)
                    .enumerate()
                    .for_each(|(i, out)| {
                        let parent = tree.keys_by_level[(child_level - 1) as usize][i];
                        for child in tree.children_in_tree(parent) {
                            let c = tree.node_index(child).unwrap() - fine_start;
                            operators::m2m(cache, child, &fine[c * n_e..(c + 1) * n_e], out);
                        }
                    });
                invocations += 1;
            }
        });
        self.counters.m2m_levels += invocations;
    }

    pub fn p2l_phase(&mut self) {
        let (tree, cache, particles, lists, counters) =
            (&self.tree, &*self.cache, &self.particles, &self.lists, &self.counters);
        let n_e = self.expansions.n_e;
        let ranges: Vec<Range<usize>> = self.p2l_targets.iter().map(|&n| n * n_e..(n + 1) * n_e).collect();
        let targets = &self.p2l_targets;
        let locals = split_ranges(&mut self.expansions.local, &ranges);
        Self::timed(&mut self.timings.p2l, || {
            locals.into_par_iter().zip(targets.par_iter()).for_each(|(out, &node)| {
                let sources = lists.x.row(node).iter().map(|&s| {
                    let r = tree.node_particles(s);
                    (&particles.positions[r.clone()], &particles.charges[r])
                });
                operators::p2l(cache, tree.node_key(node), &tree.domain, sources, out);
                bump(&counters.p2l[node]);
            });
        });
    }

    pub fn m2l_phase(&mut self, level: u32) -> Result<()> {
        let (tree, cache, lists) = (&self.tree, &*self.cache, &self.lists);
        let n_e = self.expansions.n_e;
        let n_c = cache.n_c();
        let range = tree.level_range(level);
        let multipole = &self.expansions.multipole;
        let local = &mut self.expansions.local[range.start * n_e..range.end * n_e];
        let mut result = Ok(());
        Self::timed(&mut self.timings.m2l, || {
            result = local.par_chunks_mut(n_e).enumerate().try_for_each_init(
                || vec![T::zero(); n_c],
                |scratch, (i, out)| {
                    let node = range.start + i;
                    let sources = lists
                        .v
                        .row(node)
                        .iter()
                        .map(|&s| (tree.node_key(s), &multipole[s * n_e..(s + 1) * n_e]));
                    operators::m2l(cache, tree.keys_by_level[level as usize][i], sources, out, scratch)
                },
            );
        });
        self.counters.m2l_levels += 1;
        result
    }

    /// L2L from `level - 1` into `level`.
    pub fn l2l_phase(&mut self, level: u32) {
        let (tree, cache) = (&self.tree, &*self.cache);
        let n_e = self.expansions.n_e;
        let children = tree.level_range(level);
        let parent_start = tree.level_range(level - 1).start;
        let (coarse, fine) = self.expansions.local.split_at_mut(children.start * n_e);
        let fine = &mut fine[..children.len() * n_e];
        let coarse = &*coarse;
        Self::timed(&mut self.timings.l2l, || {
            fine.par_chunks_mut(n_e).enumerate().for_each(|(i, out)| {
                let child = tree.keys_by_level[level as usize][i];
                let parent = tree.node_index(child.ancestor(level - 1)).unwrap();
                let p = parent - parent_start;
                let parent_local = &coarse[(parent_start + p) * n_e..(parent_start + p + 1) * n_e];
                operators::l2l(cache, child, parent_local, out);
            });
        });
        self.counters.l2l_levels += 1;
    }

    pub fn m2p_phase(&mut self) {
        let (tree, cache, particles, lists, counters) =
            (&self.tree, &*self.cache, &self.particles, &self.lists, &self.counters);
        let multipole = &self.expansions.multipole;
        let n_e = self.expansions.n_e;
        let slices = split_ranges(&mut self.potentials_sorted, &tree.leaf_particle_ptr);
        Self::timed(&mut self.timings.m2p, || {
            slices.into_par_iter().enumerate().for_each(|(leaf, out)| {
                let node = tree.node_of_leaf(leaf);
                let targets = &particles.positions[tree.leaf_particle_ptr[leaf].clone()];
                for &s in lists.w.row(node) {
                    let m = &multipole[s * n_e..(s + 1) * n_e];
                    operators::m2p(cache, tree.node_key(s), &tree.domain, m, targets, out);
                }
                bump(&counters.m2p[node]);
            });
        });
    }

    pub fn l2p_phase(&mut self) {
        if self.config.l2p_cache_local {
            self.l2p_cache_local();
        } else {
            self.l2p_naive();
        }
    }

    /// L2P looking up each leaf's node and building its surface on the fly.
    pub fn l2p_naive(&mut self) {
        let (tree, cache, particles, counters) = (&self.tree, &*self.cache, &self.particles, &self.counters);
        let expansions = &self.expansions;
        let slices = split_ranges(&mut self.potentials_sorted, &tree.leaf_particle_ptr);
        Self::timed(&mut self.timings.l2p, || {
            slices.into_par_iter().enumerate().for_each(|(leaf, out)| {
                let key = tree.leaves[leaf];
                let node = tree.node_index(key).unwrap();
                let targets = &particles.positions[tree.leaf_particle_ptr[leaf].clone()];
                operators::l2p(cache, key, &tree.domain, expansions.local(node), targets, out);
                bump(&counters.l2p[node]);
            });
        });
    }

    /// L2P over gathered buffers: leaf coefficients copied into one
    /// contiguous array in leaf order, bookended by index pointers, and
    /// evaluated from a structure-of-arrays source layout.
    pub fn l2p_cache_local(&mut self) {
        let (tree, cache, particles, counters) = (&self.tree, &*self.cache, &self.particles, &self.counters);
        let expansions = &self.expansions;
        let n_e = expansions.n_e;
        let slices = split_ranges(&mut self.potentials_sorted, &tree.leaf_particle_ptr);
        Self::timed(&mut self.timings.l2p, || {
            let mut coefficients = vec![T::zero(); tree.num_leaves() * n_e];
            coefficients
                .par_chunks_mut(n_e)
                .enumerate()
                .for_each(|(leaf, c)| c.copy_from_slice(expansions.local(tree.node_of_leaf(leaf))));
            let bookends: Vec<usize> = (0..=tree.num_leaves()).map(|l| l * n_e).collect();
            let alpha = cache.alpha_outer();
            slices.into_par_iter().enumerate().for_each_init(
                || SoaSources::with_capacity(n_e),
                |sources, (leaf, out)| {
                    let (center, half) = tree.leaves[leaf].bounds(&tree.domain);
                    let r = alpha * half;
                    let coeff = &coefficients[bookends[leaf]..bookends[leaf + 1]];
                    sources.clear();
                    for (p, &q) in cache.equivalent.points.iter().zip(coeff) {
                        sources.push([center[0] + r * p[0], center[1] + r * p[1], center[2] + r * p[2]], q);
                    }
                    let targets = &particles.positions[tree.leaf_particle_ptr[leaf].clone()];
                    p2p_soa_accumulate(sources, targets, out);
                    bump(&counters.l2p[tree.node_of_leaf(leaf)]);
                },
            );
        });
    }

    pub fn near_field_phase(&mut self) {
        let (tree, particles, lists, counters) = (&self.tree, &self.particles, &self.lists, &self.counters);
        let slices = split_ranges(&mut self.potentials_sorted, &tree.leaf_particle_ptr);
        Self::timed(&mut self.timings.near_field, || {
            slices.into_par_iter().enumerate().for_each(|(leaf, out)| {
                let node = tree.node_of_leaf(leaf);
                let targets = &particles.positions[tree.leaf_particle_ptr[leaf].clone()];
                for &s in lists.u.row(node) {
                    let r = tree.node_particles(s);
                    p2p_accumulate(&particles.positions[r.clone()], &particles.charges[r], targets, out);
                }
                bump(&counters.near_field[node]);
            });
        });
    }
}

fn build_pool(threads: usize) -> Result<Option<Arc<rayon::ThreadPool>>> {
    if threads == 0 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(|p| Some(Arc::new(p)))
        .map_err(|e| FmmError::ThreadPool(e.to_string()))
}

fn install<R: Send>(pool: &Option<Arc<rayon::ThreadPool>>, f: impl FnOnce() -> R + Send) -> R {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

/// Load the operator cache from `config.cache_path` if it matches, else
/// precompute it (and save it when a path is configured).
pub fn load_or_precompute<T: Scalar>(config: &FmmConfig, domain: &Domain<T>) -> Result<OperatorCache<T>> {
    let expected = operators::CacheParams::new(config, domain).fingerprint::<T>();
    let Some(path) = &config.cache_path else {
        return OperatorCache::precompute(config, domain);
    };
    if path.exists() {
        match persistence::load_cache::<T>(path, &expected) {
            Ok(cache) => {
                info!("loaded operator cache from {}", path.display());
                return Ok(cache);
            }
            Err(e) => warn!("rebuilding operator cache: {e}"),
        }
    }
    let cache = OperatorCache::precompute(config, domain)?;
    persistence::save_cache(&cache, path)?;
    Ok(cache)
}

/// Result of [`run`].
#[derive(Clone, Debug)]
pub struct FmmOutput<T> {
    /// Potentials in input order.
    pub potentials: Vec<T>,
    pub timings: Timings,
    pub depth: u32,
    pub num_leaves: usize,
    pub counters: CallCounters,
}

/// Set up and evaluate in one call.
pub fn run<T: Scalar>(particles: ParticleSet<T>, config: FmmConfig) -> Result<FmmOutput<T>> {
    let mut fmm = Fmm::new(particles, config)?;
    fmm.evaluate()?;
    Ok(FmmOutput {
        potentials: fmm.potentials(),
        timings: fmm.timings,
        depth: fmm.tree.depth,
        num_leaves: fmm.tree.num_leaves(),
        counters: fmm.counters(),
    })
}

/// All-pairs potentials in input order, self-interaction excluded.
pub fn direct<T: Scalar>(particles: &ParticleSet<T>) -> Vec<T> {
    let by_current = p2p(&particles.positions, &particles.charges, &particles.positions);
    particles.to_input_order(&by_current)
}

/// `|a - b|_2 / |b|_2`, accumulated in `f64`.
pub fn relative_error<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FmmError::invalid(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64_lossless(), y.to_f64_lossless());
        num += (x - y) * (x - y);
        den += y * y;
    }
    if den == 0.0 {
        return Err(FmmError::ZeroNorm);
    }
    Ok((num / den).sqrt())
}
