//! Inter-submap label management: activity tracking, overlap detection among
//! inactive submaps, coinciding-voxel merging, and voxel reassignment.
//!
//! The end state this stage maintains: every world voxel's data lives in
//! exactly one inactive submap, and that submap's id equals the voxel's
//! cached instance label.

use std::collections::BTreeSet;

use crate::block::{global_from_block_local, local_from_linear, BlockIndex, GlobalVoxelIndex, VOXELS_PER_BLOCK};
use crate::error::{Error, Result};
use crate::integrator::WEIGHT_CAP;
use crate::submap::{Submap, SubmapCollection};
use crate::tracker::{TrackingDecision, TrackingOutcome};
use crate::voxel::{LabelVoxel, SubmapId, TsdfVoxel};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManagerParams {
    /// Consecutive unmatched frames before a submap turns inactive.
    pub k_inactive: u32,
    /// Submaps with fewer observed label voxels than this (and no surface
    /// geometry) are deleted during reassignment.
    pub min_label_voxels: u64,
    /// When at least this fraction of the smaller side's labeled voxels
    /// coincides with the other side, an overlapping pair counts as two
    /// views of one object and is merged whole instead of voxel by voxel.
    pub merge_ratio: f64,
}

impl Default for ManagerParams {
    fn default() -> Self {
        ManagerParams {
            k_inactive: 3,
            min_label_voxels: 1,
            merge_ratio: 0.5,
        }
    }
}

impl ManagerParams {
    pub fn validate(&self) -> Result<()> {
        if self.k_inactive < 1 {
            return Err(Error::InvalidConfig(
                "k_inactive must be at least 1".into(),
            ));
        }
        if !(self.merge_ratio > 0.0 && self.merge_ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "merge_ratio must be in (0,1], got {}",
                self.merge_ratio
            )));
        }
        Ok(())
    }
}

/// A pair of overlapping inactive submaps queued for resolution; data flows
/// a → b.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapPair {
    pub a: SubmapId,
    pub b: SubmapId,
    /// Snapshot of a's block keys that b also allocates — where coinciding
    /// voxels can live. Resolution re-derives the live set, since merges of
    /// earlier pairs may have moved data.
    pub candidate_blocks: Vec<BlockIndex>,
}

/// Outcome of one reassignment pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReassignReport {
    /// Voxels relocated into the submap matching their instance label.
    pub moved: u64,
    /// Voxels whose instance label pointed at a dead submap and were
    /// relabeled in place.
    pub orphan_relabels: u64,
    /// Submaps deleted for being empty after the pass.
    pub deleted: Vec<SubmapId>,
    /// TSDF weight those deletions dropped (carved free space only; label
    /// counts are never deleted).
    pub deleted_tsdf_weight: f64,
}

/// Per-frame activity bookkeeping: matched submaps reset their counter,
/// everything else ages by one frame. Returns the ids that crossed from
/// active to inactive on this tick, each reported exactly once.
pub fn tick_activity(
    collection: &mut SubmapCollection,
    decisions: &[TrackingDecision],
    params: &ManagerParams,
) -> Vec<SubmapId> {
    let matched: BTreeSet<SubmapId> = decisions
        .iter()
        .filter_map(|d| match d.outcome {
            TrackingOutcome::MatchedSubmap(id) => Some(id),
            _ => None,
        })
        .collect();
    let mut newly_inactive = Vec::new();
    for s in collection.iter_mut() {
        let was_active = s.active;
        if matched.contains(&s.id()) {
            s.frames_since_observed = 0;
        } else {
            s.frames_since_observed = s.frames_since_observed.saturating_add(1);
        }
        s.active = s.frames_since_observed < params.k_inactive;
        if was_active && !s.active {
            newly_inactive.push(s.id());
        }
    }
    newly_inactive
}

/// Marks every submap inactive (end-of-stream finalization); returns those
/// that were still active.
pub fn force_all_inactive(
    collection: &mut SubmapCollection,
    params: &ManagerParams,
) -> Vec<SubmapId> {
    let mut newly_inactive = Vec::new();
    for s in collection.iter_mut() {
        if s.active {
            s.frames_since_observed = s.frames_since_observed.max(params.k_inactive);
            s.active = false;
            newly_inactive.push(s.id());
        }
    }
    newly_inactive
}

fn shared_block_keys(a: &Submap, b: &Submap) -> Vec<BlockIndex> {
    let mut keys: Vec<BlockIndex> = a
        .tsdf
        .iter_blocks()
        .map(|(k, _)| *k)
        .chain(a.labels.as_layer().iter_blocks().map(|(k, _)| *k))
        .filter(|k| b.tsdf.has_block(k) || b.labels.as_layer().has_block(k))
        .collect();
    keys.sort_unstable_by_key(|k| (k.x, k.y, k.z));
    keys.dedup();
    keys
}

/// All overlap pairs (a, b) with a newly inactive, b inactive, and bounding
/// spheres intersecting (closed condition: tangency counts). When both sides
/// are newly inactive the pair appears once, with a = the smaller id.
pub fn find_overlaps(collection: &SubmapCollection, ids: &[SubmapId]) -> Vec<OverlapPair> {
    let idset: BTreeSet<SubmapId> = ids.iter().copied().collect();
    let mut pairs = Vec::new();
    for &a in &idset {
        let Some(sa) = collection.get(a) else { continue };
        if sa.active {
            continue;
        }
        for sb in collection.iter() {
            let b = sb.id();
            if b == a || sb.active {
                continue;
            }
            if idset.contains(&b) && b < a {
                continue; // emitted with the roles swapped
            }
            if sa.bounding_sphere.intersects(&sb.bounding_sphere) {
                pairs.push(OverlapPair {
                    a,
                    b,
                    candidate_blocks: shared_block_keys(sa, sb),
                });
            }
        }
    }
    pairs.sort_by_key(|p| (p.a, p.b));
    pairs
}

fn merge_tsdf_into(dst: &mut TsdfVoxel, src: &TsdfVoxel, truncation: f64) {
    let total = dst.weight + src.weight;
    if src.weight <= 0.0 {
        return;
    }
    let fused = (dst.distance * dst.weight + src.distance * src.weight) / total;
    dst.distance = fused.clamp(-truncation, truncation);
    dst.color = dst.color.blend(dst.weight, &src.color, src.weight);
    dst.weight = total.min(WEIGHT_CAP);
}

/// Folds voxel a into voxel b at the same world position: weighted-average
/// SDF (clamped), capped weight, blended color, entrywise-summed count tables
/// with the cached label recomputed from the aggregate. Voxel a is reset to
/// empty afterwards.
pub fn merge_voxel_pair(
    ga: &GlobalVoxelIndex,
    va: (&mut TsdfVoxel, &mut LabelVoxel),
    gb: &GlobalVoxelIndex,
    vb: (&mut TsdfVoxel, &mut LabelVoxel),
    truncation: f64,
) -> Result<()> {
    if ga != gb {
        return Err(Error::InvariantViolation(format!(
            "cannot merge non-coinciding voxels ({},{},{}) and ({},{},{})",
            ga.x, ga.y, ga.z, gb.x, gb.y, gb.z
        )));
    }
    let (ta, la) = va;
    let (tb, lb) = vb;
    merge_tsdf_into(tb, ta, truncation);
    if la.is_observed() || la.surface {
        lb.semantic_counts.merge_from(&la.semantic_counts);
        lb.instance_counts.merge_from(&la.instance_counts);
        lb.surface |= la.surface;
        lb.recompute_cache();
    }
    *ta = TsdfVoxel::default();
    *la = LabelVoxel::default();
    Ok(())
}

pub(crate) fn has_data_tsdf(v: Option<&TsdfVoxel>) -> bool {
    v.map_or(false, |v| v.is_observed())
}

pub(crate) fn has_data_label(v: Option<&LabelVoxel>) -> bool {
    v.map_or(false, |v| v.is_observed() || v.surface)
}

fn label_data_count(s: &Submap) -> u64 {
    s.labels
        .as_layer()
        .iter_voxels()
        .filter(|(_, v)| v.is_observed() || v.surface)
        .count() as u64
}

/// Absorbs `source` into `target` whole: every data voxel moves across
/// (weighted TSDF merge, pooled label counts), `source`'s instance votes are
/// renamed to `target` in both submaps, and `source` disappears from the
/// collection. Returns the number of voxels moved.
///
/// This is the resolution for two submaps that turn out to be views of the
/// same object: per-voxel count argmax would split the object between them
/// along integration-history lines, so the votes are pooled under one
/// identity instead.
pub fn merge_submaps(
    collection: &mut SubmapCollection,
    source: SubmapId,
    target: SubmapId,
) -> Result<u64> {
    if source == target {
        return Err(Error::InvariantViolation(format!(
            "cannot merge submap {source} into itself"
        )));
    }
    for id in [source, target] {
        let s = collection.get(id).ok_or(Error::UnknownSubmap(id))?;
        if !s.transform.is_identity(1e-9) {
            return Err(Error::InvariantViolation(format!(
                "submap {id} was manipulated; merging requires aligned grids"
            )));
        }
    }

    let src = collection.remove_submap(source).unwrap();
    let dst = collection.get_mut(target).unwrap();
    let truncation = dst.tsdf.truncation();
    let mut moved = 0u64;

    for key in src.labels.as_layer().sorted_block_indices() {
        let block = src.labels.as_layer().block(&key).unwrap();
        for (linear, v) in block.iter() {
            if !(v.is_observed() || v.surface) {
                continue;
            }
            let g = global_from_block_local(&key, &local_from_linear(linear));
            let mut label = v.clone();
            let n = label.instance_counts.take(source);
            label.instance_counts.add(target, n);
            dst.labels.mutate_or_allocate(&g, |d| {
                d.semantic_counts.merge_from(&label.semantic_counts);
                d.instance_counts.merge_from(&label.instance_counts);
                d.surface |= label.surface;
                d.recompute_cache();
            });
            dst.grow_sphere_for_voxel(&g);
            if !has_data_tsdf(src.tsdf.voxel(&g)) {
                moved += 1;
            }
        }
    }
    for key in src.tsdf.sorted_block_indices() {
        let block = src.tsdf.block(&key).unwrap();
        for (linear, v) in block.iter() {
            if !v.is_observed() {
                continue;
            }
            let g = global_from_block_local(&key, &local_from_linear(linear));
            merge_tsdf_into(dst.tsdf.voxel_mut_or_allocate(&g), v, truncation);
            dst.grow_sphere_for_voxel(&g);
            moved += 1;
        }
    }

    // The target may hold votes for the absorbed id from earlier per-voxel
    // merges; rename those too so no count table references a dead submap.
    let stale: Vec<GlobalVoxelIndex> = dst
        .labels
        .iter_observed()
        .filter(|(_, v)| v.instance_counts.get(source) > 0)
        .map(|(g, _)| g)
        .collect();
    for g in stale {
        dst.labels.mutate(&g, |v| {
            let n = v.instance_counts.take(source);
            v.instance_counts.add(target, n);
            v.recompute_cache();
        });
    }

    dst.orphan_relabels += src.orphan_relabels;
    Ok(moved)
}

/// Resolves one overlapping pair. When the pair's labeled voxels coincide on
/// at least `params.merge_ratio` of the smaller side (two views of one
/// object), the smaller labeled set is absorbed whole via [`merge_submaps`].
/// Otherwise only coinciding data voxels merge from a into b; afterwards no
/// voxel index holds data in both submaps. Returns the number of voxels
/// merged or moved. Pairs whose ids an earlier merge removed are a no-op.
///
/// Both submaps must sit at (effectively) identity poses — merging across
/// misaligned grids is not defined.
pub fn resolve_overlaps(
    collection: &mut SubmapCollection,
    pair: &OverlapPair,
    params: &ManagerParams,
) -> Result<u64> {
    if pair.a == pair.b {
        return Err(Error::InvariantViolation(format!(
            "overlap pair with identical submap id {}",
            pair.a
        )));
    }
    let merge_plan;
    {
        let (Some(sa), Some(sb)) = (collection.get(pair.a), collection.get(pair.b)) else {
            return Ok(0);
        };
        for (id, s) in [(pair.a, sa), (pair.b, sb)] {
            if !s.transform.is_identity(1e-9) {
                return Err(Error::InvariantViolation(format!(
                    "submap {id} was manipulated; overlap resolution requires aligned grids"
                )));
            }
        }
        let mut coincident = 0u64;
        for key in shared_block_keys(sa, sb) {
            for linear in 0..VOXELS_PER_BLOCK {
                let g = global_from_block_local(&key, &local_from_linear(linear));
                if has_data_label(sa.labels.voxel(&g)) && has_data_label(sb.labels.voxel(&g)) {
                    coincident += 1;
                }
            }
        }
        let (na, nb) = (label_data_count(sa), label_data_count(sb));
        // A side without any labels is pure carved space riding along; it
        // coincides vacuously.
        let smaller = na.min(nb);
        let ratio = if smaller == 0 {
            1.0
        } else {
            coincident as f64 / smaller as f64
        };
        merge_plan = if ratio >= params.merge_ratio {
            // The smaller labeled set is absorbed; ties keep the smaller id.
            Some(match na.cmp(&nb) {
                std::cmp::Ordering::Less => (pair.a, pair.b),
                std::cmp::Ordering::Greater => (pair.b, pair.a),
                std::cmp::Ordering::Equal => (pair.a.max(pair.b), pair.a.min(pair.b)),
            })
        } else {
            None
        };
        if std::env::var_os("PANVOX_DEBUG_MERGE").is_some() {
            eprintln!(
                "pair ({}, {}): na={na} nb={nb} coincident={coincident} ratio={ratio:.3} -> {:?}",
                pair.a, pair.b, merge_plan
            );
        }
    }
    if let Some((source, target)) = merge_plan {
        return merge_submaps(collection, source, target);
    }

    let mut sub_a = collection.remove_submap(pair.a).unwrap();
    let sub_b = collection.get_mut(pair.b).unwrap();
    let truncation = sub_b.tsdf.truncation();
    let keys = shared_block_keys(&sub_a, sub_b);

    let mut merged = 0u64;
    for key in keys {
        for linear in 0..VOXELS_PER_BLOCK {
            let g = global_from_block_local(&key, &local_from_linear(linear));
            let a_has = has_data_tsdf(sub_a.tsdf.voxel(&g)) || has_data_label(sub_a.labels.voxel(&g));
            if !a_has {
                continue;
            }
            let b_has = has_data_tsdf(sub_b.tsdf.voxel(&g)) || has_data_label(sub_b.labels.voxel(&g));
            if !b_has {
                continue;
            }
            let mut a_tsdf = sub_a.tsdf.voxel_mut(&g).map(std::mem::take).unwrap_or_default();
            let mut a_label = sub_a.labels.take(&g).unwrap_or_default();
            let Submap { tsdf, labels, .. } = &mut *sub_b;
            let vb_tsdf = tsdf.voxel_mut_or_allocate(&g);
            labels.mutate_or_allocate(&g, |vb_label| {
                merge_voxel_pair(
                    &g,
                    (&mut a_tsdf, &mut a_label),
                    &g,
                    (vb_tsdf, vb_label),
                    truncation,
                )
            })?;
            merged += 1;
            sub_b.grow_sphere_for_voxel(&g);
        }
    }
    sub_a.prune_empty_blocks();
    sub_a.update_bounding_sphere();
    collection.insert_raw(sub_a);
    Ok(merged)
}

/// Re-homes every labeled voxel whose cached instance label disagrees with
/// its containing submap: the voxel's TSDF and label data move to the submap
/// named by the label (merging on arrival). Labels pointing at dead submaps
/// fall back to the best live id in the voxel's counts, or stay put with the
/// cache patched to the container. Submaps left empty are deleted.
pub fn reassign_voxels(
    collection: &mut SubmapCollection,
    ids: &[SubmapId],
    params: &ManagerParams,
) -> Result<ReassignReport> {
    let scan: BTreeSet<SubmapId> = ids.iter().copied().collect();
    let live: BTreeSet<SubmapId> = collection.ids().into_iter().collect();
    let mut report = ReassignReport::default();

    enum Action {
        Move(SubmapId),
        RelabelInPlace,
    }

    for &sid in &scan {
        let Some(mut src) = collection.remove_submap(sid) else { continue };

        let mut actions: Vec<(GlobalVoxelIndex, Action)> = Vec::new();
        for key in src.labels.as_layer().sorted_block_indices() {
            let block = src.labels.as_layer().block(&key).unwrap();
            for (linear, v) in block.iter() {
                if !v.is_observed() {
                    continue;
                }
                let Some(cached) = v.cached else { continue };
                if cached.instance_id == sid {
                    continue;
                }
                let g = global_from_block_local(&key, &local_from_linear(linear));
                if live.contains(&cached.instance_id) {
                    actions.push((g, Action::Move(cached.instance_id)));
                    continue;
                }
                // Dead target: best live id present in this voxel's counts.
                let mut best: Option<(SubmapId, u32)> = None;
                for (id, n) in v.instance_counts.iter() {
                    if live.contains(&id) && best.map_or(true, |(_, bn)| n > bn) {
                        best = Some((id, n));
                    }
                }
                match best {
                    Some((target, _)) if target != sid => actions.push((g, Action::Move(target))),
                    _ => actions.push((g, Action::RelabelInPlace)),
                }
            }
        }

        for (g, action) in actions {
            match action {
                Action::RelabelInPlace => {
                    src.labels.mutate(&g, |v| v.override_instance(sid));
                    src.orphan_relabels += 1;
                    report.orphan_relabels += 1;
                }
                Action::Move(target) => {
                    let moved_label = src.labels.take(&g).unwrap_or_default();
                    let moved_tsdf =
                        src.tsdf.voxel_mut(&g).map(std::mem::take).unwrap_or_default();
                    let dst = collection
                        .get_mut(target)
                        .expect("move target vanished mid-pass");
                    let truncation = dst.tsdf.truncation();
                    let Submap { tsdf, labels, .. } = &mut *dst;
                    merge_tsdf_into(tsdf.voxel_mut_or_allocate(&g), &moved_tsdf, truncation);
                    labels.mutate_or_allocate(&g, |v| {
                        v.semantic_counts.merge_from(&moved_label.semantic_counts);
                        v.instance_counts.merge_from(&moved_label.instance_counts);
                        v.surface |= moved_label.surface;
                        v.recompute_cache();
                        v.override_instance(target);
                    });
                    dst.grow_sphere_for_voxel(&g);
                    report.moved += 1;
                }
            }
        }

        src.prune_empty_blocks();
        src.update_bounding_sphere();
        collection.insert_raw(src);
    }

    // Deletion pass, after all movement has settled.
    for &sid in &scan {
        let Some(s) = collection.get(sid) else { continue };
        let truncation = s.tsdf.truncation();
        let empty = s.labels.observed_count() < params.min_label_voxels
            && !s.tsdf.iter_voxels().any(|(_, v)| v.is_near_surface(truncation));
        if empty {
            let s = collection.remove_submap(sid).unwrap();
            report.deleted_tsdf_weight += s.tsdf_weight_sum();
            report.deleted.push(sid);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::voxel_center;
    use crate::integrator::{integrate_segment, WeightMode};
    use crate::ingest::Segment;
    use crate::submap::tests::{observe_voxel, test_class_table};
    use crate::voxel::{CachedLabel, Rgb};
    use nalgebra::{Point3, Vector3};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn collection() -> SubmapCollection {
        SubmapCollection::new(test_class_table(), 0.1, 0.2)
    }

    fn matched(id: SubmapId) -> TrackingDecision {
        TrackingDecision {
            semantic_class: 2,
            frame_instance_id: 0,
            outcome: TrackingOutcome::MatchedSubmap(id),
            overlap_score: 1.0,
        }
    }

    /// Canonical full-collection snapshot for equality checks.
    #[derive(PartialEq, Debug)]
    struct Snapshot(Vec<(SubmapId, (i32, i32, i32), String)>);

    fn snapshot(coll: &SubmapCollection) -> Snapshot {
        let mut rows = Vec::new();
        for s in coll.iter() {
            for (g, v) in s.tsdf.iter_voxels() {
                if v.is_observed() {
                    rows.push((
                        s.id(),
                        (g.x, g.y, g.z),
                        format!("t {:.12} {:.12} {:?}", v.distance, v.weight, v.color),
                    ));
                }
            }
            for (g, v) in s.labels.iter_observed() {
                rows.push((
                    s.id(),
                    (g.x, g.y, g.z),
                    format!(
                        "l {:?} {:?} {:?} {}",
                        v.semantic_counts, v.instance_counts, v.cached, v.surface
                    ),
                ));
            }
        }
        rows.sort();
        Snapshot(rows)
    }

    fn label_count_totals(coll: &SubmapCollection) -> (u64, u64) {
        let mut sem = 0;
        let mut inst = 0;
        for s in coll.iter() {
            for (_, v) in s.labels.iter_observed() {
                sem += v.semantic_counts.total();
                inst += v.instance_counts.total();
            }
        }
        (sem, inst)
    }

    fn tsdf_weight_total(coll: &SubmapCollection) -> f64 {
        coll.iter().map(|s| s.tsdf_weight_sum()).sum()
    }

    #[test]
    fn activity_counter_resets_on_match_and_ages_otherwise() {
        let mut coll = collection();
        let a = coll.create_submap(2).unwrap();
        let b = coll.create_submap(2).unwrap();
        let params = ManagerParams::default();

        let newly = tick_activity(&mut coll, &[matched(a)], &params);
        assert!(newly.is_empty());
        assert_eq!(coll.get(a).unwrap().frames_since_observed, 0);
        assert_eq!(coll.get(b).unwrap().frames_since_observed, 1);
        assert!(coll.get(b).unwrap().active);

        let newly = tick_activity(&mut coll, &[matched(a)], &params);
        assert!(newly.is_empty());
        let newly = tick_activity(&mut coll, &[matched(a)], &params);
        assert_eq!(newly, vec![b]);
        assert!(!coll.get(b).unwrap().active);

        // Still inactive next frame, but not reported again.
        let newly = tick_activity(&mut coll, &[matched(a)], &params);
        assert!(newly.is_empty());

        // Re-observation reactivates with a fresh counter.
        let newly = tick_activity(&mut coll, &[matched(b)], &params);
        assert!(newly.is_empty());
        let sb = coll.get(b).unwrap();
        assert!(sb.active);
        assert_eq!(sb.frames_since_observed, 0);
    }

    #[test]
    fn force_inactive_reports_each_active_submap_once() {
        let mut coll = collection();
        let a = coll.create_submap(2).unwrap();
        let b = coll.create_submap(2).unwrap();
        let params = ManagerParams::default();
        for _ in 0..3 {
            tick_activity(&mut coll, &[matched(a)], &params);
        }
        let newly = force_all_inactive(&mut coll, &params);
        assert_eq!(newly, vec![a]);
        assert!(!coll.get(a).unwrap().active);
        assert!(!coll.get(b).unwrap().active);
        assert!(force_all_inactive(&mut coll, &params).is_empty());
    }

    fn inactive_submap_with_sphere(
        coll: &mut SubmapCollection,
        center: Point3<f64>,
        radius: f64,
    ) -> SubmapId {
        let id = coll.create_submap(2).unwrap();
        let s = coll.get_mut(id).unwrap();
        s.active = false;
        s.frames_since_observed = 99;
        s.bounding_sphere.center = center;
        s.bounding_sphere.radius = radius;
        id
    }

    #[test]
    fn disjoint_spheres_produce_no_pairs_and_tangency_counts() {
        let mut coll = collection();
        let a = inactive_submap_with_sphere(&mut coll, Point3::new(0.0, 0.0, 0.0), 1.0);
        let b = inactive_submap_with_sphere(&mut coll, Point3::new(5.0, 0.0, 0.0), 1.0);
        assert!(find_overlaps(&coll, &[a, b]).is_empty());

        // Exactly tangent: distance == sum of radii.
        coll.get_mut(b).unwrap().bounding_sphere.center = Point3::new(2.0, 0.0, 0.0);
        let pairs = find_overlaps(&coll, &[a, b]);
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].a, pairs[0].b), (a, b));
    }

    #[test]
    fn active_submaps_and_unlisted_inactive_pairs_are_excluded() {
        let mut coll = collection();
        let a = inactive_submap_with_sphere(&mut coll, Point3::new(0.0, 0.0, 0.0), 1.0);
        let b = inactive_submap_with_sphere(&mut coll, Point3::new(1.0, 0.0, 0.0), 1.0);
        let c = inactive_submap_with_sphere(&mut coll, Point3::new(2.0, 0.0, 0.0), 1.0);
        coll.get_mut(c).unwrap().active = true;

        // Only a is newly inactive: (a,b) appears, (a,c) blocked by c being
        // active, (b,anything) absent because b is not in ids.
        let pairs = find_overlaps(&coll, &[a]);
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].a, pairs[0].b), (a, b));
    }

    #[test]
    fn overlap_pairs_match_quadratic_oracle() {
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..50 {
            let mut coll = collection();
            let n = rng.gen_range(2..12);
            let mut ids = Vec::new();
            for _ in 0..n {
                let id = inactive_submap_with_sphere(
                    &mut coll,
                    Point3::new(
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-3.0..3.0),
                    ),
                    rng.gen_range(0.1..2.0),
                );
                if rng.gen_bool(0.3) {
                    coll.get_mut(id).unwrap().active = true;
                }
                ids.push(id);
            }
            let newly: Vec<SubmapId> = ids
                .iter()
                .copied()
                .filter(|&id| !coll.get(id).unwrap().active && rng.gen_bool(0.6))
                .collect();

            let got: Vec<(SubmapId, SubmapId)> = find_overlaps(&coll, &newly)
                .iter()
                .map(|p| (p.a, p.b))
                .collect();

            let newset: BTreeSet<SubmapId> = newly.iter().copied().collect();
            let mut expect = Vec::new();
            for &a in &newly {
                let sa = coll.get(a).unwrap();
                for sb in coll.iter() {
                    let b = sb.id();
                    if b == a || sb.active || (newset.contains(&b) && b < a) {
                        continue;
                    }
                    let d = (sa.bounding_sphere.center - sb.bounding_sphere.center).norm();
                    if d <= sa.bounding_sphere.radius + sb.bounding_sphere.radius {
                        expect.push((a, b));
                    }
                }
            }
            expect.sort_unstable();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn merging_an_unobserved_voxel_leaves_the_target_untouched() {
        let g = Vector3::new(1, 2, 3);
        let mut ta = TsdfVoxel::default();
        let mut la = LabelVoxel::default();
        let mut tb = TsdfVoxel {
            distance: 0.12,
            weight: 2.0,
            color: Rgb::new(9, 9, 9),
        };
        let mut lb = LabelVoxel::default();
        lb.add_observation(2, 7, 3);
        let before = (tb, lb.clone());
        merge_voxel_pair(&g, (&mut ta, &mut la), &g, (&mut tb, &mut lb), 0.2).unwrap();
        assert_eq!((tb, lb), before);
        assert_eq!(ta, TsdfVoxel::default());
    }

    #[test]
    fn merge_arithmetic_and_count_aggregation_examples() {
        // Class table view: 2 = car-like thing, 1 = road-like stuff.
        let g = Vector3::new(0, 0, 0);
        let mut ta = TsdfVoxel {
            distance: 0.2,
            weight: 1.0,
            color: Rgb::default(),
        };
        let mut la = LabelVoxel::default();
        la.add_observation(2, 2, 2);
        let mut tb = TsdfVoxel {
            distance: 0.4,
            weight: 3.0,
            color: Rgb::default(),
        };
        let mut lb = LabelVoxel::default();
        lb.add_observation(2, 3, 1);
        lb.add_observation(1, 3, 4);
        merge_voxel_pair(&g, (&mut ta, &mut la), &g, (&mut tb, &mut lb), 1.0).unwrap();
        assert!((tb.distance - 0.35).abs() < 1e-15);
        assert_eq!(tb.weight, 4.0);
        assert_eq!(lb.semantic_counts.get(2), 3);
        assert_eq!(lb.semantic_counts.get(1), 4);
        assert_eq!(lb.cached.unwrap().class_id, 1);
        assert!(!la.is_observed());
        assert!(!ta.is_observed());
    }

    #[test]
    fn merge_rejects_non_coinciding_voxels() {
        let mut ta = TsdfVoxel::default();
        let mut la = LabelVoxel::default();
        let mut tb = TsdfVoxel::default();
        let mut lb = LabelVoxel::default();
        let err = merge_voxel_pair(
            &Vector3::new(0, 0, 0),
            (&mut ta, &mut la),
            &Vector3::new(0, 0, 1),
            (&mut tb, &mut lb),
            0.2,
        );
        assert!(err.is_err());
    }

    #[test]
    fn merged_state_equals_replaying_all_observations_into_one_voxel() {
        let mut rng = StdRng::seed_from_u64(14);
        let g = Vector3::new(0, 0, 0);
        for _ in 0..200 {
            // Observations bounded away from the clamp and the weight cap so
            // grouping cannot change the running average.
            let obs: Vec<(f64, f64, ClassObs)> = (0..rng.gen_range(2..12))
                .map(|_| {
                    (
                        rng.gen_range(-0.19..0.19),
                        rng.gen_range(0.1..3.0),
                        (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..5)),
                    )
                })
                .collect();
            type ClassObs = (u16, u16, u32);
            let split = rng.gen_range(0..=obs.len());

            let apply = |t: &mut TsdfVoxel, l: &mut LabelVoxel, o: &(f64, f64, ClassObs)| {
                crate::integrator::update_tsdf_voxel(t, o.0, o.1, Rgb::new(50, 60, 70), 0.2);
                l.add_observation(o.2 .0, o.2 .1, o.2 .2);
            };

            let (mut ta, mut la) = (TsdfVoxel::default(), LabelVoxel::default());
            let (mut tb, mut lb) = (TsdfVoxel::default(), LabelVoxel::default());
            for o in &obs[..split] {
                apply(&mut ta, &mut la, o);
            }
            for o in &obs[split..] {
                apply(&mut tb, &mut lb, o);
            }
            merge_voxel_pair(&g, (&mut ta, &mut la), &g, (&mut tb, &mut lb), 0.2).unwrap();

            let (mut tr, mut lr) = (TsdfVoxel::default(), LabelVoxel::default());
            for o in &obs {
                apply(&mut tr, &mut lr, o);
            }
            assert!((tb.distance - tr.distance).abs() < 1e-12);
            assert!((tb.weight - tr.weight).abs() < 1e-12);
            assert_eq!(lb.semantic_counts, lr.semantic_counts);
            assert_eq!(lb.instance_counts, lr.instance_counts);
            assert_eq!(
                lb.cached.map(|c| (c.class_id, c.instance_id)),
                lr.cached.map(|c| (c.class_id, c.instance_id))
            );
        }
    }

    fn integrate_box(
        coll: &mut SubmapCollection,
        id: SubmapId,
        center: Point3<f64>,
        n: usize,
        seed: u64,
    ) {
        let mut rng = StdRng::seed_from_u64(seed);
        let pts: Vec<Point3<f64>> = (0..n)
            .map(|_| {
                Point3::new(
                    center.x + rng.gen_range(-0.3..0.3),
                    center.y + rng.gen_range(-0.3..0.3),
                    center.z + rng.gen_range(-0.05..0.05),
                )
            })
            .collect();
        let colors = vec![Rgb::new(120, 10, 200); n];
        let seg = Segment {
            points: pts,
            colors,
            semantic_class: 2,
            frame_instance_id: 0,
            sensor_origin: Point3::new(center.x, center.y, center.z + 1.5),
        };
        integrate_segment(coll.get_mut(id).unwrap(), &seg, WeightMode::Constant).unwrap();
    }

    #[test]
    fn resolving_disjoint_submaps_changes_nothing() {
        let mut coll = collection();
        let a = coll.create_submap(2).unwrap();
        let b = coll.create_submap(2).unwrap();
        integrate_box(&mut coll, a, Point3::new(0.0, 0.0, 0.0), 150, 1);
        integrate_box(&mut coll, b, Point3::new(50.0, 0.0, 0.0), 150, 2);
        for s in coll.iter_mut() {
            s.active = false;
        }
        let before = snapshot(&coll);
        let pair = OverlapPair {
            a,
            b,
            candidate_blocks: Vec::new(),
        };
        let merged = resolve_overlaps(&mut coll, &pair, &ManagerParams::default()).unwrap();
        assert_eq!(merged, 0);
        assert_eq!(snapshot(&coll), before);
    }

    #[test]
    fn duplicated_submap_merges_whole_into_its_twin() {
        let mut coll = collection();
        let b = coll.create_submap(2).unwrap();
        integrate_box(&mut coll, b, Point3::new(0.0, 0.0, 0.0), 300, 3);
        let twin = coll.duplicate_submap(b).unwrap();
        for s in coll.iter_mut() {
            s.active = false;
        }
        let (sem_before, inst_before) = label_count_totals(&coll);
        let weight_before = tsdf_weight_total(&coll);
        let pairs = find_overlaps(&coll, &[b.min(twin), b.max(twin)]);
        assert_eq!(pairs.len(), 1);
        let merged = resolve_overlaps(&mut coll, &pairs[0], &ManagerParams::default()).unwrap();
        assert!(merged > 0);
        // Two full copies of one object coincide everywhere: the pair merges
        // whole and the tie keeps the smaller id.
        let survivor = b.min(twin);
        assert!(coll.get(b.max(twin)).is_none());
        let s = coll.get(survivor).unwrap();
        // Votes from both copies pool under the survivor; nothing references
        // the removed id.
        for (g, v) in s.labels.iter_observed() {
            assert_eq!(v.instance_counts.get(b.max(twin)), 0, "stale vote at {g:?}");
            assert_eq!(v.cached.map(|c| c.instance_id), Some(survivor));
        }
        assert_eq!(label_count_totals(&coll), (sem_before, inst_before));
        assert!((tsdf_weight_total(&coll) - weight_before).abs() < 1e-6);
        exclusivity_scan(&coll, &[survivor]);
    }

    #[test]
    fn labelless_carve_fragment_is_absorbed_whole() {
        let mut coll = collection();
        let b = coll.create_submap(2).unwrap();
        integrate_box(&mut coll, b, Point3::new(0.0, 0.0, 0.0), 200, 4);
        // A fragment holding nothing but carved free space next to the box:
        // no labels to disagree with anything, so it rides along with b.
        let a = coll.create_submap(2).unwrap();
        let g = Vector3::new(5, 0, 3);
        {
            let s = coll.get_mut(a).unwrap();
            let trunc = s.tsdf.truncation();
            let v = s.tsdf.voxel_mut_or_allocate(&g);
            v.distance = trunc;
            v.weight = 1.5;
            s.grow_sphere_for_voxel(&g);
        }
        for s in coll.iter_mut() {
            s.active = false;
        }
        let weight_before = tsdf_weight_total(&coll);
        let pairs = find_overlaps(&coll, &[a.min(b), a.max(b)]);
        assert_eq!(pairs.len(), 1);
        let merged = resolve_overlaps(&mut coll, &pairs[0], &ManagerParams::default()).unwrap();
        assert_eq!(merged, 1);
        assert!(coll.get(a).is_none());
        let sb = coll.get(b).unwrap();
        assert!(sb.tsdf.voxel(&g).is_some_and(|v| v.weight >= 1.5));
        assert!((tsdf_weight_total(&coll) - weight_before).abs() < 1e-6);
    }

    #[test]
    fn merge_renames_instance_votes_on_both_sides() {
        let mut coll = collection();
        let a = coll.create_submap(2).unwrap();
        let b = coll.create_submap(2).unwrap();
        let ga = Vector3::new(10, 0, 0);
        let gb = Vector3::new(0, 10, 0);
        observe_voxel(coll.get_mut(a).unwrap(), ga);
        observe_voxel(coll.get_mut(b).unwrap(), gb);
        // Stale votes for a sitting inside b from an earlier per-voxel merge.
        coll.get_mut(b).unwrap().labels.mutate(&gb, |v| {
            v.instance_counts.add(a, 7);
            v.recompute_cache();
        });
        let moved = merge_submaps(&mut coll, a, b).unwrap();
        assert_eq!(moved, 1);
        assert!(coll.get(a).is_none());
        let sb = coll.get(b).unwrap();
        let va = sb.labels.voxel(&ga).unwrap();
        assert_eq!(va.instance_counts.get(a), 0);
        assert_eq!(va.instance_counts.get(b), 1);
        assert_eq!(va.cached.map(|c| c.instance_id), Some(b));
        let vb = sb.labels.voxel(&gb).unwrap();
        assert_eq!(vb.instance_counts.get(a), 0);
        assert_eq!(vb.instance_counts.get(b), 8);
        assert_eq!(vb.cached.map(|c| c.instance_id), Some(b));
    }

    #[test]
    fn contact_band_between_distinct_objects_does_not_merge() {
        let mut coll = collection();
        let a = coll.create_submap(2).unwrap();
        let b = coll.create_submap(2).unwrap();
        // Two boxes sharing only a thin contact band: most labeled voxels
        // are exclusive, so both identities survive and only the band moves.
        integrate_box(&mut coll, a, Point3::new(0.0, 0.0, 0.0), 250, 11);
        integrate_box(&mut coll, b, Point3::new(0.55, 0.0, 0.0), 250, 12);
        for s in coll.iter_mut() {
            s.active = false;
        }
        let pairs = find_overlaps(&coll, &[a, b]);
        assert_eq!(pairs.len(), 1);
        resolve_overlaps(&mut coll, &pairs[0], &ManagerParams::default()).unwrap();
        assert!(coll.get(a).is_some());
        assert!(coll.get(b).is_some());
        exclusivity_scan(&coll, &[a, b]);
    }

    #[test]
    fn merge_rejects_bad_arguments() {
        let mut coll = collection();
        let a = coll.create_submap(2).unwrap();
        let b = coll.create_submap(2).unwrap();
        integrate_box(&mut coll, a, Point3::new(0.0, 0.0, 0.0), 50, 13);
        integrate_box(&mut coll, b, Point3::new(0.2, 0.0, 0.0), 50, 14);
        assert!(merge_submaps(&mut coll, a, a).is_err());
        assert!(merge_submaps(&mut coll, a, 999).is_err());
        assert!(merge_submaps(&mut coll, 999, b).is_err());
        coll.apply_submap_transform(
            b,
            &crate::math::RigidTransform::from_translation(Vector3::new(0.5, 0.0, 0.0)),
        )
        .unwrap();
        assert!(merge_submaps(&mut coll, a, b).is_err());
        // Failed merges leave both submaps in place.
        assert!(coll.get(a).is_some() && coll.get(b).is_some());
    }

    fn exclusivity_scan(coll: &SubmapCollection, ids: &[SubmapId]) {
        let mut seen: std::collections::BTreeMap<(i32, i32, i32), SubmapId> = Default::default();
        for &id in ids {
            let Some(s) = coll.get(id) else { continue };
            for (g, v) in s.tsdf.iter_voxels() {
                if v.is_observed() {
                    if let Some(other) = seen.insert((g.x, g.y, g.z), id) {
                        panic!("voxel {g:?} observed in both {other} and {id}");
                    }
                }
            }
        }
    }

    #[test]
    fn random_overlaps_end_exclusive_and_conserve_mass() {
        let mut rng = StdRng::seed_from_u64(77);
        for round in 0..10 {
            let mut coll = collection();
            let mut ids = Vec::new();
            for k in 0..4 {
                let id = coll.create_submap(2).unwrap();
                integrate_box(
                    &mut coll,
                    id,
                    Point3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), 0.0),
                    200,
                    round * 10 + k,
                );
                ids.push(id);
            }
            for s in coll.iter_mut() {
                s.active = false;
            }
            let (sem_before, inst_before) = label_count_totals(&coll);
            let weight_before = tsdf_weight_total(&coll);

            for pair in find_overlaps(&coll, &ids) {
                resolve_overlaps(&mut coll, &pair, &ManagerParams::default()).unwrap();
            }
            exclusivity_scan(&coll, &ids);
            let (sem_after, inst_after) = label_count_totals(&coll);
            assert_eq!((sem_before, inst_before), (sem_after, inst_after));
            // Weight conservation holds when no voxel saturates; these
            // scenes stay far below the cap.
            assert!((tsdf_weight_total(&coll) - weight_before).abs() < 1e-6);
        }
    }

    #[test]
    fn resolve_rejects_manipulated_submaps() {
        let mut coll = collection();
        let a = coll.create_submap(2).unwrap();
        let b = coll.create_submap(2).unwrap();
        integrate_box(&mut coll, a, Point3::new(0.0, 0.0, 0.0), 100, 5);
        integrate_box(&mut coll, b, Point3::new(0.1, 0.0, 0.0), 100, 6);
        for s in coll.iter_mut() {
            s.active = false;
        }
        coll.apply_submap_transform(
            a,
            &crate::math::RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0)),
        )
        .unwrap();
        let pairs = find_overlaps(&coll, &[a, b]);
        if let Some(pair) = pairs.first() {
            assert!(resolve_overlaps(&mut coll, pair, &ManagerParams::default()).is_err());
        } else {
            // Moving a may have separated the spheres; force the pair.
            let pair = OverlapPair {
                a,
                b,
                candidate_blocks: Vec::new(),
            };
            assert!(resolve_overlaps(&mut coll, &pair, &ManagerParams::default()).is_err());
        }
    }

    #[test]
    fn agreeing_voxels_do_not_move() {
        let mut coll = collection();
        let a = coll.create_submap(2).unwrap();
        integrate_box(&mut coll, a, Point3::new(0.0, 0.0, 0.0), 200, 9);
        for s in coll.iter_mut() {
            s.active = false;
        }
        let before = snapshot(&coll);
        let report = reassign_voxels(&mut coll, &[a], &ManagerParams::default()).unwrap();
        assert_eq!(report.moved, 0);
        assert_eq!(report.orphan_relabels, 0);
        assert!(report.deleted.is_empty());
        assert_eq!(snapshot(&coll), before);
    }

    #[test]
    fn disagreeing_voxel_moves_to_the_submap_its_label_names() {
        let mut coll = collection();
        let a = coll.create_submap(2).unwrap();
        let b = coll.create_submap(2).unwrap();
        let g = Vector3::new(3, 3, 3);
        observe_voxel(coll.get_mut(a).unwrap(), g);
        observe_voxel(coll.get_mut(b).unwrap(), Vector3::new(9, 9, 9));
        // Overwrite the voxel's instance votes so b dominates.
        coll.get_mut(a).unwrap().labels.mutate(&g, |v| {
            v.instance_counts.add(b, 5);
            v.recompute_cache();
        });
        for s in coll.iter_mut() {
            s.active = false;
        }
        let report = reassign_voxels(&mut coll, &[a, b], &ManagerParams::default()).unwrap();
        assert_eq!(report.moved, 1);
        // a lost its only voxel and gets cleaned up.
        assert_eq!(report.deleted, vec![a]);
        assert!(coll.get(a).is_none());
        let moved = coll.get(b).unwrap().labels.voxel(&g).unwrap();
        assert!(moved.is_observed());
        assert_eq!(moved.cached.unwrap().instance_id, b);
        assert!(coll.get(b).unwrap().tsdf.voxel(&g).unwrap().is_observed());
    }

    #[test]
    fn orphan_label_falls_back_to_best_live_id_then_container() {
        let mut coll = collection();
        let a = coll.create_submap(2).unwrap();
        let b = coll.create_submap(2).unwrap();
        let dead: SubmapId = 999;

        // Voxel 1: dead id dominates, but b appears in the counts → moves to
        // b. Voxel 2: only dead ids → stays, relabeled to the container.
        let g1 = Vector3::new(0, 0, 0);
        let g2 = Vector3::new(5, 0, 0);
        observe_voxel(coll.get_mut(a).unwrap(), g1);
        observe_voxel(coll.get_mut(a).unwrap(), g2);
        observe_voxel(coll.get_mut(b).unwrap(), Vector3::new(9, 9, 9));
        coll.get_mut(a).unwrap().labels.mutate(&g1, |v| {
            v.instance_counts.add(dead, 10);
            v.instance_counts.add(b, 3);
            v.recompute_cache();
        });
        coll.get_mut(a).unwrap().labels.mutate(&g2, |v| {
            *v = LabelVoxel::default();
            v.semantic_counts.add(2, 4);
            v.instance_counts.add(dead, 4);
            v.recompute_cache();
        });
        for s in coll.iter_mut() {
            s.active = false;
        }
        let report = reassign_voxels(&mut coll, &[a, b], &ManagerParams::default()).unwrap();
        assert_eq!(report.moved, 1);
        assert_eq!(report.orphan_relabels, 1);
        assert_eq!(
            coll.get(b).unwrap().labels.voxel(&g1).unwrap().cached.unwrap().instance_id,
            b
        );
        let kept = coll.get(a).unwrap().labels.voxel(&g2).unwrap();
        assert_eq!(kept.cached.unwrap().instance_id, a);
        assert_eq!(coll.get(a).unwrap().orphan_relabels, 1);
    }

    #[test]
    fn emptied_submaps_are_deleted_and_their_weight_reported() {
        let mut coll = collection();
        let a = coll.create_submap(2).unwrap();
        let b = coll.create_submap(2).unwrap();
        let g = Vector3::new(2, 2, 2);
        observe_voxel(coll.get_mut(a).unwrap(), g);
        observe_voxel(coll.get_mut(b).unwrap(), Vector3::new(8, 8, 8));
        // Give a some carved free space that will be left behind.
        let carve = coll.get_mut(a).unwrap().tsdf.voxel_mut_or_allocate(&Vector3::new(2, 2, 10));
        carve.distance = 0.2;
        carve.weight = 2.5;
        // Point a's only labeled voxel at b.
        coll.get_mut(a).unwrap().labels.mutate(&g, |v| {
            v.instance_counts.add(b, 9);
            v.recompute_cache();
        });
        for s in coll.iter_mut() {
            s.active = false;
        }
        let report = reassign_voxels(&mut coll, &[a, b], &ManagerParams::default()).unwrap();
        assert_eq!(report.moved, 1);
        assert_eq!(report.deleted, vec![a]);
        assert!((report.deleted_tsdf_weight - 2.5).abs() < 1e-12);
        assert!(coll.get(a).is_none());
    }

    #[test]
    fn random_disagreements_end_in_full_agreement_and_idempotence() {
        let mut rng = StdRng::seed_from_u64(31);
        for round in 0..8 {
            let mut coll = collection();
            let mut ids = Vec::new();
            for k in 0..4 {
                let id = coll.create_submap(2).unwrap();
                integrate_box(
                    &mut coll,
                    id,
                    Point3::new(k as f64 * 0.5 - 1.0, 0.0, 0.0),
                    150,
                    round * 17 + k as u64,
                );
                ids.push(id);
            }
            // Scatter foreign instance votes.
            for &id in &ids {
                let others: Vec<SubmapId> = ids.iter().copied().filter(|&o| o != id).collect();
                let voxels: Vec<GlobalVoxelIndex> = coll
                    .get(id)
                    .unwrap()
                    .labels
                    .iter_observed()
                    .map(|(g, _)| g)
                    .collect();
                let s = coll.get_mut(id).unwrap();
                for g in voxels {
                    if rng.gen_bool(0.25) {
                        let target = others[rng.gen_range(0..others.len())];
                        s.labels.mutate(&g, |v| {
                            v.instance_counts.add(target, rng.gen_range(5..20));
                            v.recompute_cache();
                        });
                    }
                }
            }
            for s in coll.iter_mut() {
                s.active = false;
            }
            for pair in find_overlaps(&coll, &ids) {
                resolve_overlaps(&mut coll, &pair, &ManagerParams::default()).unwrap();
            }
            let (sem_before, inst_before) = label_count_totals(&coll);
            let weight_before = tsdf_weight_total(&coll);
            let report = reassign_voxels(&mut coll, &ids, &ManagerParams::default()).unwrap();

            // Agreement scan: every labeled voxel's cached instance equals
            // its container.
            for s in coll.iter() {
                for (g, v) in s.labels.iter_observed() {
                    assert_eq!(
                        v.cached.map(|c| c.instance_id),
                        Some(s.id()),
                        "voxel {g:?} in {} disagrees",
                        s.id()
                    );
                }
            }
            // Conservation: labels exact, weight up to deleted carve residue.
            let (sem_after, inst_after) = label_count_totals(&coll);
            assert_eq!((sem_before, inst_before), (sem_after, inst_after));
            assert!(
                (tsdf_weight_total(&coll) + report.deleted_tsdf_weight - weight_before).abs()
                    < 1e-6
            );

            // Idempotence: a second full pass changes nothing.
            let frozen = snapshot(&coll);
            let live: Vec<SubmapId> = coll.ids();
            for pair in find_overlaps(&coll, &live) {
                resolve_overlaps(&mut coll, &pair, &ManagerParams::default()).unwrap();
            }
            let report2 = reassign_voxels(&mut coll, &live, &ManagerParams::default()).unwrap();
            assert_eq!(report2.moved, 0);
            assert_eq!(snapshot(&coll), frozen);
        }
    }

    #[test]
    fn moved_voxels_stay_inside_the_target_bounding_sphere() {
        let mut coll = collection();
        let a = coll.create_submap(2).unwrap();
        let b = coll.create_submap(2).unwrap();
        let g = Vector3::new(40, 40, 40);
        observe_voxel(coll.get_mut(a).unwrap(), g);
        observe_voxel(coll.get_mut(b).unwrap(), Vector3::new(0, 0, 0));
        coll.get_mut(a).unwrap().labels.mutate(&g, |v| {
            v.instance_counts.add(b, 9);
            v.recompute_cache();
        });
        for s in coll.iter_mut() {
            s.active = false;
        }
        reassign_voxels(&mut coll, &[a, b], &ManagerParams::default()).unwrap();
        let sb = coll.get(b).unwrap();
        let c = voxel_center(&g, 0.1);
        assert!(
            (c - sb.bounding_sphere.center).norm() + sb.cell_half_diagonal()
                <= sb.bounding_sphere.radius + 1e-9
        );
        // CachedLabel still refers to the merged counts.
        let v = sb.labels.voxel(&g).unwrap();
        let CachedLabel { instance_id, .. } = v.cached.unwrap();
        assert_eq!(instance_id, b);
    }
}
