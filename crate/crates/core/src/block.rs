//! Block-sparse voxel grid: index arithmetic and the dense per-block array.
//!
//! World space is quantized into voxels of side `voxel_size`; voxels are
//! grouped into cubic blocks of `VOXELS_PER_SIDE` per axis. A global voxel
//! index addresses a voxel across block boundaries; block and local indices
//! are derived from it with shifts/masks (power-of-two side).

use std::hash::{BuildHasherDefault, Hasher};

use nalgebra::{Point3, Vector3};

pub const VOXELS_PER_SIDE: i32 = 16;
const VPS_BITS: i32 = 4;
const VPS_MASK: i32 = VOXELS_PER_SIDE - 1;
pub const VOXELS_PER_BLOCK: usize =
    (VOXELS_PER_SIDE * VOXELS_PER_SIDE * VOXELS_PER_SIDE) as usize;

/// Signed 3D block coordinate.
pub type BlockIndex = Vector3<i32>;
/// Signed 3D voxel coordinate in the global (cross-block) grid.
pub type GlobalVoxelIndex = Vector3<i32>;

/// FNV-1a. Used instead of the std random-state hasher so that map layout —
/// and therefore run timing and any hash-order-dependent debug output — is
/// reproducible across runs. Correctness never depends on iteration order.
#[derive(Default)]
pub struct DetHasher(u64);

impl Hasher for DetHasher {
    fn write(&mut self, bytes: &[u8]) {
        let mut h = if self.0 == 0 { 0xcbf2_9ce4_8422_2325 } else { self.0 };
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.0 = h;
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

pub type DetState = BuildHasherDefault<DetHasher>;

/// Floor-quantizes a world point to its global voxel index.
#[inline]
pub fn global_voxel_from_point(p: &Point3<f64>, voxel_size_inv: f64) -> GlobalVoxelIndex {
    Vector3::new(
        (p.x * voxel_size_inv).floor() as i32,
        (p.y * voxel_size_inv).floor() as i32,
        (p.z * voxel_size_inv).floor() as i32,
    )
}

/// Block containing a global voxel (arithmetic shift keeps negatives correct).
#[inline]
pub fn block_from_global(g: &GlobalVoxelIndex) -> BlockIndex {
    Vector3::new(g.x >> VPS_BITS, g.y >> VPS_BITS, g.z >> VPS_BITS)
}

/// Per-axis voxel offset within its block, each in `0..VOXELS_PER_SIDE`.
#[inline]
pub fn local_from_global(g: &GlobalVoxelIndex) -> Vector3<i32> {
    Vector3::new(g.x & VPS_MASK, g.y & VPS_MASK, g.z & VPS_MASK)
}

#[inline]
pub fn global_from_block_local(block: &BlockIndex, local: &Vector3<i32>) -> GlobalVoxelIndex {
    block * VOXELS_PER_SIDE + local
}

/// Linear offset into the dense per-block voxel array (x fastest).
#[inline]
pub fn linear_from_local(local: &Vector3<i32>) -> usize {
    (local.x + VOXELS_PER_SIDE * (local.y + VOXELS_PER_SIDE * local.z)) as usize
}

#[inline]
pub fn local_from_linear(linear: usize) -> Vector3<i32> {
    let l = linear as i32;
    Vector3::new(
        l & VPS_MASK,
        (l >> VPS_BITS) & VPS_MASK,
        (l >> (2 * VPS_BITS)) & VPS_MASK,
    )
}

/// World-space center of a voxel cell.
#[inline]
pub fn voxel_center(g: &GlobalVoxelIndex, voxel_size: f64) -> Point3<f64> {
    Point3::new(
        (g.x as f64 + 0.5) * voxel_size,
        (g.y as f64 + 0.5) * voxel_size,
        (g.z as f64 + 0.5) * voxel_size,
    )
}

/// World-space minimum corner of a block.
#[inline]
pub fn block_origin(block: &BlockIndex, voxel_size: f64) -> Point3<f64> {
    let side = VOXELS_PER_SIDE as f64 * voxel_size;
    Point3::new(
        block.x as f64 * side,
        block.y as f64 * side,
        block.z as f64 * side,
    )
}

/// Dense cubic voxel array for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<V> {
    voxels: Vec<V>,
}

impl<V: Default + Clone> Block<V> {
    pub fn new() -> Self {
        Block {
            voxels: vec![V::default(); VOXELS_PER_BLOCK],
        }
    }
}

impl<V: Default + Clone> Default for Block<V> {
    fn default() -> Self {
        Block::new()
    }
}

impl<V> Block<V> {
    #[inline]
    pub fn voxel(&self, linear: usize) -> &V {
        &self.voxels[linear]
    }

    #[inline]
    pub fn voxel_mut(&mut self, linear: usize) -> &mut V {
        &mut self.voxels[linear]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &V)> {
        self.voxels.iter().enumerate()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (usize, &mut V)> {
        self.voxels.iter_mut().enumerate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::collections::HashMap;

    #[test]
    fn origin_cell_quantization() {
        let inv = 1.0 / 0.1;
        let g = global_voxel_from_point(&Point3::new(0.05, 0.05, 0.05), inv);
        assert_eq!(block_from_global(&g), Vector3::new(0, 0, 0));
        assert_eq!(local_from_global(&g), Vector3::new(0, 0, 0));
    }

    #[test]
    fn negative_coordinates_floor_into_previous_block() {
        let inv = 1.0 / 0.1;
        let g = global_voxel_from_point(&Point3::new(-0.05, 0.25, 0.0), inv);
        let block = block_from_global(&g);
        let local = local_from_global(&g);
        assert_eq!(block.x, -1);
        assert_eq!(local.x, 15);
        assert_eq!(block.y, 0);
        assert_eq!(local.y, 2);
        assert_eq!(local.z, 0);
    }

    #[test]
    fn index_center_round_trip_is_identity() {
        let mut rng = StdRng::seed_from_u64(42);
        let voxel_size = 0.1;
        let inv = 1.0 / voxel_size;
        for _ in 0..10_000 {
            let p = Point3::new(
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
            );
            let g = global_voxel_from_point(&p, inv);
            let c = voxel_center(&g, voxel_size);
            assert_eq!(global_voxel_from_point(&c, inv), g);
            for axis in 0..3 {
                assert!((c[axis] - p[axis]).abs() <= voxel_size / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn block_local_global_round_trip() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..10_000 {
            let g = Vector3::new(
                rng.gen_range(-1000..1000),
                rng.gen_range(-1000..1000),
                rng.gen_range(-1000..1000),
            );
            let b = block_from_global(&g);
            let l = local_from_global(&g);
            assert_eq!(global_from_block_local(&b, &l), g);
            assert_eq!(local_from_linear(linear_from_local(&l)), l);
            assert!(l.iter().all(|&v| (0..VOXELS_PER_SIDE).contains(&v)));
        }
    }

    #[test]
    fn hash_map_store_retrieve_is_exact_for_random_indices() {
        let mut rng = StdRng::seed_from_u64(99);
        let mut map: HashMap<BlockIndex, u64, DetState> = HashMap::default();
        let mut keys = Vec::new();
        for i in 0..100_000u64 {
            let k = Vector3::new(
                rng.gen_range(-10_000..10_000),
                rng.gen_range(-10_000..10_000),
                rng.gen_range(-10_000..10_000),
            );
            map.insert(k, i);
            keys.push((k, i));
        }
        // Later inserts may overwrite duplicates; replay to get final values.
        let mut expect: HashMap<BlockIndex, u64> = HashMap::new();
        for (k, i) in keys {
            expect.insert(k, i);
        }
        assert_eq!(map.len(), expect.len());
        for (k, i) in &expect {
            assert_eq!(map.get(k), Some(i));
        }
    }
}
