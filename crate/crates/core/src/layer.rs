//! Sparse voxel layers: a hash of block index → dense block.

use std::collections::HashMap;

use nalgebra::{Point3, Vector3};

use crate::block::{
    block_from_global, global_from_block_local, global_voxel_from_point, linear_from_local,
    local_from_global, local_from_linear, Block, BlockIndex, DetState, GlobalVoxelIndex,
    VOXELS_PER_BLOCK,
};
use crate::error::{Error, Result};
use crate::voxel::{ClassId, CountTable, LabelVoxel, SubmapId};

/// Block-sparse grid of `V` voxels with exact (non-aliasing) block lookup.
#[derive(Debug, Clone)]
pub struct Layer<V> {
    voxel_size: f64,
    voxel_size_inv: f64,
    truncation: f64,
    blocks: HashMap<BlockIndex, Block<V>, DetState>,
}

impl<V: Default + Clone> Layer<V> {
    pub fn new(voxel_size: f64, truncation: f64) -> Self {
        assert!(voxel_size > 0.0 && truncation >= voxel_size);
        Layer {
            voxel_size,
            voxel_size_inv: 1.0 / voxel_size,
            truncation,
            blocks: HashMap::default(),
        }
    }

    #[inline]
    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    #[inline]
    pub fn voxel_size_inv(&self) -> f64 {
        self.voxel_size_inv
    }

    #[inline]
    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    #[inline]
    pub fn block(&self, index: &BlockIndex) -> Option<&Block<V>> {
        self.blocks.get(index)
    }

    #[inline]
    pub fn block_mut(&mut self, index: &BlockIndex) -> Option<&mut Block<V>> {
        self.blocks.get_mut(index)
    }

    pub fn has_block(&self, index: &BlockIndex) -> bool {
        self.blocks.contains_key(index)
    }

    pub fn allocate_block(&mut self, index: &BlockIndex) -> &mut Block<V> {
        self.blocks.entry(*index).or_default()
    }

    pub fn remove_block(&mut self, index: &BlockIndex) -> Option<Block<V>> {
        self.blocks.remove(index)
    }

    #[inline]
    pub fn global_index_from_point(&self, p: &Point3<f64>) -> GlobalVoxelIndex {
        global_voxel_from_point(p, self.voxel_size_inv)
    }

    /// Floor-quantizes a world point to (block index, per-axis voxel offset).
    pub fn point_to_indices(&self, p: &Point3<f64>) -> Result<(BlockIndex, Vector3<i32>)> {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(Error::NonFinitePoint(p.x, p.y, p.z));
        }
        let g = self.global_index_from_point(p);
        Ok((block_from_global(&g), local_from_global(&g)))
    }

    #[inline]
    pub fn voxel(&self, g: &GlobalVoxelIndex) -> Option<&V> {
        self.blocks
            .get(&block_from_global(g))
            .map(|b| b.voxel(linear_from_local(&local_from_global(g))))
    }

    #[inline]
    pub fn voxel_mut(&mut self, g: &GlobalVoxelIndex) -> Option<&mut V> {
        self.blocks
            .get_mut(&block_from_global(g))
            .map(|b| b.voxel_mut(linear_from_local(&local_from_global(g))))
    }

    #[inline]
    pub fn voxel_mut_or_allocate(&mut self, g: &GlobalVoxelIndex) -> &mut V {
        self.blocks
            .entry(block_from_global(g))
            .or_default()
            .voxel_mut(linear_from_local(&local_from_global(g)))
    }

    pub fn voxel_at_point(&self, p: &Point3<f64>) -> Option<&V> {
        self.voxel(&self.global_index_from_point(p))
    }

    pub fn iter_blocks(&self) -> impl Iterator<Item = (&BlockIndex, &Block<V>)> {
        self.blocks.iter()
    }

    /// Block indices in lexicographic (x, y, z) order — the canonical order
    /// for everything that reaches an output file.
    pub fn sorted_block_indices(&self) -> Vec<BlockIndex> {
        let mut indices: Vec<BlockIndex> = self.blocks.keys().copied().collect();
        indices.sort_unstable_by_key(|b| (b.x, b.y, b.z));
        indices
    }

    /// All allocated voxels as (global index, voxel), block order unspecified.
    pub fn iter_voxels(&self) -> impl Iterator<Item = (GlobalVoxelIndex, &V)> {
        self.blocks.iter().flat_map(|(bi, block)| {
            block
                .iter()
                .map(move |(lin, v)| (global_from_block_local(bi, &local_from_linear(lin)), v))
        })
    }

    /// Drops blocks whose voxels are all `removable`.
    pub fn prune_blocks(&mut self, mut removable: impl FnMut(&V) -> bool) {
        self.blocks
            .retain(|_, block| !(0..VOXELS_PER_BLOCK).all(|i| removable(block.voxel(i))));
    }

    pub fn retain_blocks(&mut self, mut keep: impl FnMut(&BlockIndex, &Block<V>) -> bool) {
        self.blocks.retain(|bi, block| keep(bi, block));
    }
}

/// Label layer wrapper that tracks how many voxels carry observations.
///
/// All mutation funnels through [`LabelLayer::mutate_or_allocate`] /
/// [`LabelLayer::mutate`], which compare observedness before and after, so
/// `observed_count` stays exact no matter what the closure does.
#[derive(Debug, Clone)]
pub struct LabelLayer {
    layer: Layer<LabelVoxel>,
    observed: u64,
    surface: u64,
}

impl LabelLayer {
    pub fn new(voxel_size: f64, truncation: f64) -> Self {
        LabelLayer {
            layer: Layer::new(voxel_size, truncation),
            observed: 0,
            surface: 0,
        }
    }

    /// Number of voxels with at least one label observation.
    pub fn observed_count(&self) -> u64 {
        self.observed
    }

    /// Number of voxels flagged as surface (endpoint-bearing) voxels.
    pub fn surface_count(&self) -> u64 {
        self.surface
    }

    pub fn as_layer(&self) -> &Layer<LabelVoxel> {
        &self.layer
    }

    pub fn voxel(&self, g: &GlobalVoxelIndex) -> Option<&LabelVoxel> {
        self.layer.voxel(g)
    }

    pub fn mutate_or_allocate<R>(
        &mut self,
        g: &GlobalVoxelIndex,
        f: impl FnOnce(&mut LabelVoxel) -> R,
    ) -> R {
        let v = self.layer.voxel_mut_or_allocate(g);
        let before = (v.is_observed(), v.surface);
        let out = f(v);
        let after = (v.is_observed(), v.surface);
        self.track(before, after);
        out
    }

    /// Mutates an existing voxel; returns `None` if unallocated.
    pub fn mutate<R>(
        &mut self,
        g: &GlobalVoxelIndex,
        f: impl FnOnce(&mut LabelVoxel) -> R,
    ) -> Option<R> {
        let (before, out, after) = {
            let v = self.layer.voxel_mut(g)?;
            let before = (v.is_observed(), v.surface);
            let out = f(v);
            (before, out, (v.is_observed(), v.surface))
        };
        self.track(before, after);
        Some(out)
    }

    fn track(&mut self, before: (bool, bool), after: (bool, bool)) {
        match (before.0, after.0) {
            (false, true) => self.observed += 1,
            (true, false) => self.observed -= 1,
            _ => {}
        }
        match (before.1, after.1) {
            (false, true) => self.surface += 1,
            (true, false) => self.surface -= 1,
            _ => {}
        }
    }

    /// Records `n` observations of (class, instance) at `g`.
    pub fn add_observation(
        &mut self,
        g: &GlobalVoxelIndex,
        class_id: ClassId,
        instance_id: SubmapId,
        n: u32,
    ) {
        self.mutate_or_allocate(g, |v| v.add_observation(class_id, instance_id, n));
    }

    /// Folds whole count tables (and the surface flag) into the voxel at `g`
    /// and refreshes its cache.
    pub fn merge_tables(
        &mut self,
        g: &GlobalVoxelIndex,
        semantic: &CountTable,
        instance: &CountTable,
        surface: bool,
    ) {
        self.mutate_or_allocate(g, |v| {
            v.semantic_counts.merge_from(semantic);
            v.instance_counts.merge_from(instance);
            v.surface |= surface;
            v.recompute_cache();
        });
    }

    /// Removes and returns the voxel contents at `g`, leaving a default voxel.
    pub fn take(&mut self, g: &GlobalVoxelIndex) -> Option<LabelVoxel> {
        self.mutate(g, std::mem::take)
    }

    pub fn prune_unobserved_blocks(&mut self) {
        self.layer.prune_blocks(|v| !v.is_observed() && !v.surface);
    }

    /// Recounts observed/surface voxels from scratch (used after
    /// deserialization).
    pub fn recount(&mut self) {
        self.observed = 0;
        self.surface = 0;
        for (_, v) in self.layer.iter_voxels() {
            self.observed += v.is_observed() as u64;
            self.surface += v.surface as u64;
        }
    }

    pub fn iter_observed(&self) -> impl Iterator<Item = (GlobalVoxelIndex, &LabelVoxel)> {
        self.layer.iter_voxels().filter(|(_, v)| v.is_observed())
    }
}
