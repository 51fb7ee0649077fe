//! Whole-map verification: the exclusivity and agreement scans plus the
//! structural invariant suite run over final maps and loaded archives.

use std::collections::HashMap;

use crate::block::{
    global_from_block_local, local_from_linear, BlockIndex, DetState, GlobalVoxelIndex,
    VOXELS_PER_BLOCK,
};
use crate::error::{Error, Result};
use crate::integrator::WEIGHT_CAP;
use crate::manager::{has_data_label, has_data_tsdf};
use crate::submap::{Submap, SubmapCollection};
use crate::voxel::SubmapId;

/// Outcome of [`scan_map`]. `multi_observed == 0` is the exclusivity
/// property, `label_mismatches == 0` the agreement property.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScanReport {
    pub submaps: usize,
    /// Distinct world voxel indices holding data in at least one submap.
    pub data_voxels: u64,
    /// World voxel indices holding data in two or more submaps.
    pub multi_observed: u64,
    /// An example conflict: (voxel, first holder, second holder).
    pub first_conflict: Option<(GlobalVoxelIndex, SubmapId, SubmapId)>,
    /// Observed label voxels whose cached instance is not the submap id.
    pub label_mismatches: u64,
    /// Observed label voxels checked by the agreement scan.
    pub label_voxels: u64,
}

fn block_presence(s: &Submap, key: &BlockIndex) -> Option<[bool; VOXELS_PER_BLOCK]> {
    let tsdf = s.tsdf.block(key);
    let labels = s.labels.as_layer().block(key);
    if tsdf.is_none() && labels.is_none() {
        return None;
    }
    let mut mask = [false; VOXELS_PER_BLOCK];
    let mut any = false;
    for linear in 0..VOXELS_PER_BLOCK {
        let has = has_data_tsdf(tsdf.map(|b| b.voxel(linear)))
            || has_data_label(labels.map(|b| b.voxel(linear)));
        mask[linear] = has;
        any |= has;
    }
    any.then_some(mask)
}

/// Exhaustive exclusivity + agreement scan. Every allocated block of every
/// submap is visited; a voxel "holds data" when its TSDF is observed or its
/// label voxel carries counts or a surface flag — the same predicate overlap
/// resolution merges on.
///
/// World indices are grid indices, so all submaps must sit at identity
/// transforms (manipulated maps have no shared grid to compare on).
pub fn scan_map(collection: &SubmapCollection) -> Result<ScanReport> {
    for s in collection.iter() {
        if !s.transform.is_identity(1e-9) {
            return Err(Error::InvariantViolation(format!(
                "submap {} was manipulated; the exclusivity scan needs aligned grids",
                s.id()
            )));
        }
    }

    let mut report = ScanReport {
        submaps: collection.ids().len(),
        ..ScanReport::default()
    };

    // Group block keys by the submaps holding them; only keys shared by two
    // or more submaps can conflict, and they are scanned one at a time.
    let mut holders: HashMap<BlockIndex, Vec<SubmapId>, DetState> = HashMap::default();
    for s in collection.iter() {
        let mut keys: Vec<BlockIndex> = s
            .tsdf
            .iter_blocks()
            .map(|(k, _)| *k)
            .chain(s.labels.as_layer().iter_blocks().map(|(k, _)| *k))
            .collect();
        keys.sort_unstable_by_key(|k| (k.x, k.y, k.z));
        keys.dedup();
        for k in keys {
            holders.entry(k).or_default().push(s.id());
        }
    }

    for (key, ids) in &holders {
        if ids.len() == 1 {
            let s = collection.get(ids[0]).unwrap();
            if let Some(mask) = block_presence(s, key) {
                report.data_voxels += mask.iter().filter(|m| **m).count() as u64;
            }
            continue;
        }
        let mut count = [0u8; VOXELS_PER_BLOCK];
        let mut first_two: Vec<(usize, SubmapId)> = Vec::new();
        for &id in ids {
            let s = collection.get(id).unwrap();
            let Some(mask) = block_presence(s, key) else { continue };
            for (linear, has) in mask.iter().enumerate() {
                if *has {
                    count[linear] = count[linear].saturating_add(1);
                    if count[linear] <= 2 {
                        first_two.push((linear, id));
                    }
                }
            }
        }
        for (linear, n) in count.iter().enumerate() {
            match n {
                0 => {}
                1 => report.data_voxels += 1,
                _ => {
                    report.data_voxels += 1;
                    report.multi_observed += 1;
                    if report.first_conflict.is_none() {
                        let g = global_from_block_local(key, &local_from_linear(linear));
                        let mut it = first_two.iter().filter(|(l, _)| *l == linear);
                        let a = it.next().map(|(_, id)| *id).unwrap_or_default();
                        let b = it.next().map(|(_, id)| *id).unwrap_or_default();
                        report.first_conflict = Some((g, a, b));
                    }
                }
            }
        }
    }

    for s in collection.iter() {
        for (_, v) in s.labels.iter_observed() {
            report.label_voxels += 1;
            let agrees = v.cached.as_ref().map_or(false, |c| c.instance_id == s.id());
            if !agrees {
                report.label_mismatches += 1;
            }
        }
    }
    Ok(report)
}

/// The full structural invariant suite. Errors on the first violation with
/// a description naming the submap and voxel.
///
/// Covers, per submap: rigid transform; TSDF weights in [0, cap] and
/// distances within ±truncation; observed label voxels carry a cache that
/// matches the count argmax unless marked refined; the cached surface count
/// equals a recount; the bounding sphere covers every data cell; class ids
/// exist in the class table with consistent thing/stuff kind. Collection
/// wide: at most one stuff submap per class, and — when every transform is
/// identity — exclusivity and agreement.
pub fn check_invariants(collection: &SubmapCollection) -> Result<()> {
    let classes = &collection.class_table;
    let truncation = collection.truncation();
    let mut stuff_seen: HashMap<u16, SubmapId, DetState> = HashMap::default();

    for s in collection.iter() {
        let sid = s.id();
        let fail = |what: String| Error::InvariantViolation(format!("submap {sid}: {what}"));

        s.transform.validate_rigid(1e-6)?;
        match classes.is_thing(s.class_id) {
            Ok(kind) if kind == s.is_thing => {}
            Ok(_) => return Err(fail(format!("class {} thing/stuff kind mismatch", s.class_id))),
            Err(_) => return Err(fail(format!("class {} not in the class table", s.class_id))),
        }
        if !s.is_thing {
            if let Some(other) = stuff_seen.insert(s.class_id, sid) {
                return Err(fail(format!(
                    "duplicate stuff submap for class {} (also {other})",
                    s.class_id
                )));
            }
        }

        for (g, v) in s.tsdf.iter_voxels() {
            if !(0.0..=WEIGHT_CAP).contains(&v.weight) || !v.weight.is_finite() {
                return Err(fail(format!("voxel {g:?} weight {} out of range", v.weight)));
            }
            if v.is_observed() && v.distance.abs() > truncation + 1e-12 {
                return Err(fail(format!(
                    "voxel {g:?} distance {} beyond truncation {truncation}",
                    v.distance
                )));
            }
        }

        let mut surface = 0u64;
        for (g, v) in s.labels.as_layer().iter_voxels() {
            surface += v.surface as u64;
            if !v.is_observed() {
                continue;
            }
            let Some(c) = &v.cached else {
                return Err(fail(format!("observed voxel {g:?} without a cached label")));
            };
            if !v.refined {
                let class_ok = v.semantic_counts.argmax().map_or(false, |(id, _)| id == c.class_id);
                let inst_ok =
                    v.instance_counts.argmax().map_or(false, |(id, _)| id == c.instance_id);
                if !class_ok || !inst_ok {
                    return Err(fail(format!("voxel {g:?} cache disagrees with count argmax")));
                }
            }
        }
        if surface != s.surface_voxel_count() {
            return Err(fail(format!(
                "surface count cache {} != recount {surface}",
                s.surface_voxel_count()
            )));
        }

        let half = s.cell_half_diagonal();
        for key in s.tsdf.sorted_block_indices() {
            let tsdf = s.tsdf.block(&key);
            let labels = s.labels.as_layer().block(&key);
            for linear in 0..VOXELS_PER_BLOCK {
                let near = tsdf
                    .map(|b| b.voxel(linear))
                    .map_or(false, |v| v.is_near_surface(truncation));
                let labeled = has_data_label(labels.map(|b| b.voxel(linear)));
                if !(near || labeled) {
                    continue;
                }
                let g = global_from_block_local(&key, &local_from_linear(linear));
                let c = s
                    .transform
                    .apply(&crate::block::voxel_center(&g, s.tsdf.voxel_size()));
                if (c - s.bounding_sphere.center).norm() + half > s.bounding_sphere.radius + 1e-9 {
                    return Err(fail(format!("voxel {g:?} outside the bounding sphere")));
                }
            }
        }
    }

    if collection.iter().all(|s| s.transform.is_identity(1e-9)) {
        let scan = scan_map(collection)?;
        if scan.multi_observed > 0 {
            let (g, a, b) = scan.first_conflict.unwrap();
            return Err(Error::InvariantViolation(format!(
                "{} voxels observed in two submaps (e.g. {g:?} in {a} and {b})",
                scan.multi_observed
            )));
        }
        if scan.label_mismatches > 0 {
            return Err(Error::InvariantViolation(format!(
                "{} label voxels disagree with their submap id",
                scan.label_mismatches
            )));
        }
    }
    Ok(())
}

/// Order-independent digest of all label state: per submap, every observed
/// voxel's count tables, cache, and flags. Two collections digest equally
/// iff their per-voxel label content is identical — the cheap handle for
/// "the disabled-stage run equals the full run before refinement".
pub fn label_state_digest(collection: &SubmapCollection) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |x: u64| {
        for byte in x.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    let mut ids = collection.ids();
    ids.sort_unstable();
    for id in ids {
        let s = collection.get(id).unwrap();
        eat(id as u64);
        for key in s.labels.as_layer().sorted_block_indices() {
            let block = s.labels.as_layer().block(&key).unwrap();
            for linear in 0..VOXELS_PER_BLOCK {
                let v = block.voxel(linear);
                if !v.is_observed() && !v.surface {
                    continue;
                }
                eat(linear as u64);
                for (cid, n) in v.semantic_counts.iter() {
                    eat(cid as u64);
                    eat(n as u64);
                }
                eat(u64::MAX); // table separator
                for (iid, n) in v.instance_counts.iter() {
                    eat(iid as u64);
                    eat(n as u64);
                }
                match &v.cached {
                    Some(c) => {
                        eat(c.class_id as u64);
                        eat(c.instance_id as u64);
                    }
                    None => eat(u64::MAX - 1),
                }
                eat(v.refined as u64 | (v.surface as u64) << 1);
            }
        }
    }
    h
}
