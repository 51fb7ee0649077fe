//! Voxel payloads: TSDF samples and panoptic label count tables.

use smallvec::SmallVec;

/// Semantic class identifier (matches the class-table file and PLY fields).
pub type ClassId = u16;
/// Submap identifier; doubles as the panoptic instance id.
pub type SubmapId = u16;

/// A (class, instance) pair. Instance ids equal submap ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PanopticLabel {
    pub class_id: ClassId,
    pub instance_id: SubmapId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct Rgb {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl Rgb {
    pub fn new(r: u8, g: u8, b: u8) -> Self {
        Rgb { r, g, b }
    }

    /// Weight-proportional blend, rounded to the nearest integer channel.
    pub fn blend(&self, w_self: f64, other: &Rgb, w_other: f64) -> Rgb {
        let total = w_self + w_other;
        if total <= 0.0 {
            return *other;
        }
        let mix = |a: u8, b: u8| -> u8 {
            let v = (a as f64 * w_self + b as f64 * w_other) / total;
            v.round().clamp(0.0, 255.0) as u8
        };
        Rgb {
            r: mix(self.r, other.r),
            g: mix(self.g, other.g),
            b: mix(self.b, other.b),
        }
    }
}

/// One TSDF sample: clamped signed distance, fusion weight, running color.
///
/// `weight == 0` means unobserved; `distance` and `color` carry no meaning
/// for readers then.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TsdfVoxel {
    pub distance: f64,
    pub weight: f64,
    pub color: Rgb,
}

impl TsdfVoxel {
    pub fn is_observed(&self) -> bool {
        self.weight > 0.0
    }

    /// Observed and strictly inside the truncation band — a voxel near the
    /// reconstructed surface, as opposed to carved free space (which sits at
    /// exactly +truncation). Spatial queries treat only these as hits.
    pub fn is_near_surface(&self, truncation: f64) -> bool {
        self.weight > 0.0 && self.distance.abs() < truncation
    }
}

/// Sparse observation-count table keyed by class or submap id.
///
/// Entries stay sorted by id, which makes iteration deterministic and gives
/// argmax its smallest-id tie-break for free.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CountTable {
    entries: SmallVec<[(u16, u32); 4]>,
}

impl CountTable {
    pub fn new() -> Self {
        CountTable::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn add(&mut self, id: u16, n: u32) {
        if n == 0 {
            return;
        }
        match self.entries.binary_search_by_key(&id, |e| e.0) {
            Ok(i) => self.entries[i].1 = self.entries[i].1.saturating_add(n),
            Err(i) => self.entries.insert(i, (id, n)),
        }
    }

    pub fn get(&self, id: u16) -> u32 {
        match self.entries.binary_search_by_key(&id, |e| e.0) {
            Ok(i) => self.entries[i].1,
            Err(_) => 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.1 as u64).sum()
    }

    /// Highest count; ties go to the smallest id.
    pub fn argmax(&self) -> Option<(u16, u32)> {
        let mut best: Option<(u16, u32)> = None;
        for &(id, n) in &self.entries {
            match best {
                Some((_, bn)) if n <= bn => {}
                _ => best = Some((id, n)),
            }
        }
        best
    }

    pub fn iter(&self) -> impl Iterator<Item = (u16, u32)> + '_ {
        self.entries.iter().copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = u16> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn merge_from(&mut self, other: &CountTable) {
        for (id, n) in other.iter() {
            self.add(id, n);
        }
    }

    /// Removes an entry and returns its count (0 when absent).
    pub fn take(&mut self, id: u16) -> u32 {
        match self.entries.binary_search_by_key(&id, |e| e.0) {
            Ok(i) => self.entries.remove(i).1,
            Err(_) => 0,
        }
    }
}

/// Cached per-voxel panoptic decision with count-ratio probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CachedLabel {
    pub class_id: ClassId,
    pub instance_id: SubmapId,
    pub p_class: f64,
    pub p_instance: f64,
}

/// Per-voxel label state: observation counts for both panoptic fields plus
/// the cached argmax (possibly overridden by refinement).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelVoxel {
    pub semantic_counts: CountTable,
    pub instance_counts: CountTable,
    pub cached: Option<CachedLabel>,
    /// True when `cached` was written by label refinement rather than by the
    /// count argmax; cleared the next time new observations arrive.
    pub refined: bool,
    /// True iff this voxel ever contained an integrated segment endpoint.
    /// These voxels form the one-voxel-thick surface skin that spatial
    /// overlap statistics (segment↔submap IoU) are computed over.
    pub surface: bool,
}

impl LabelVoxel {
    pub fn is_observed(&self) -> bool {
        !self.semantic_counts.is_empty() || !self.instance_counts.is_empty()
    }

    /// Records `n` observations of (class, instance) and refreshes the cache.
    pub fn add_observation(&mut self, class_id: ClassId, instance_id: SubmapId, n: u32) {
        self.semantic_counts.add(class_id, n);
        self.instance_counts.add(instance_id, n);
        self.recompute_cache();
    }

    /// Recomputes the cached label as the argmax of both count tables.
    pub fn recompute_cache(&mut self) {
        self.refined = false;
        self.cached = match (self.semantic_counts.argmax(), self.instance_counts.argmax()) {
            (Some((class_id, cn)), Some((inst_id, inn))) => Some(CachedLabel {
                class_id,
                instance_id: inst_id,
                p_class: cn as f64 / self.semantic_counts.total() as f64,
                p_instance: inn as f64 / self.instance_counts.total() as f64,
            }),
            _ => None,
        };
    }

    /// Overrides the cached label (refinement write-back). Counts are kept;
    /// probabilities are re-read from the counts for the chosen labels.
    pub fn override_cache(&mut self, class_id: ClassId, instance_id: SubmapId) {
        let ratio = |t: &CountTable, id: u16| -> f64 {
            let total = t.total();
            if total == 0 {
                0.0
            } else {
                t.get(id) as f64 / total as f64
            }
        };
        self.cached = Some(CachedLabel {
            class_id,
            instance_id,
            p_class: ratio(&self.semantic_counts, class_id),
            p_instance: ratio(&self.instance_counts, instance_id),
        });
        self.refined = true;
    }

    /// Rewrites only the instance part of the cache (used when a voxel moves
    /// to a different submap and must agree with its new container).
    pub fn override_instance(&mut self, instance_id: SubmapId) {
        if let Some(cached) = self.cached {
            self.override_cache(cached.class_id, instance_id);
        }
    }
}
