//! Spatial segment↔submap association: each incoming segment is matched to
//! the submap whose surface it overlaps best, or spawns a new one.
//!
//! Thing segments compete on voxel-set IoU across all thing submaps; stuff
//! segments attach to the single stuff submap of their class. Segments that
//! match nothing and are too small are dropped as noise.

use std::collections::HashSet;

use crate::block::{global_voxel_from_point, DetState, GlobalVoxelIndex};
use crate::error::Result;
use crate::ingest::Segment;
use crate::submap::{Submap, SubmapCollection};
use crate::voxel::{ClassId, SubmapId};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerParams {
    /// Minimum voxel-set IoU for a thing segment to join an existing submap.
    pub tau_iou: f64,
    /// Minimum point count for an unmatched segment to found a new submap.
    pub n_min: usize,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams {
            tau_iou: 0.25,
            n_min: 50,
        }
    }
}

impl TrackerParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_iou) {
            return Err(crate::error::Error::InvalidConfig(format!(
                "tau_iou must be in [0,1], got {}",
                self.tau_iou
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackingOutcome {
    MatchedSubmap(SubmapId),
    NewSubmap,
    Discarded,
}

/// The tracker's verdict for one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingDecision {
    /// Which segment this is about (class + within-frame instance id).
    pub semantic_class: ClassId,
    pub frame_instance_id: u16,
    pub outcome: TrackingOutcome,
    /// Best overlap found: the winning IoU for matched things, 1.0 for
    /// matched stuff, the best losing IoU otherwise.
    pub overlap_score: f64,
}

/// Voxel-set IoU between a segment and a submap's surface voxels:
/// |S ∩ V| / |S ∪ V| with S = distinct submap-grid voxels containing segment
/// points and V = the submap's surface voxels. Points outside the bounding
/// sphere skip the voxel lookup — the sphere covers every surface cell, so
/// they cannot intersect.
pub fn compute_overlap_iou(segment: &Segment, submap: &Submap) -> f64 {
    let t_inv = submap.transform.inverse();
    let inv = submap.tsdf.voxel_size_inv();
    let sphere = submap.bounding_sphere;
    let mut seen: HashSet<GlobalVoxelIndex, DetState> = HashSet::default();
    let mut inter = 0u64;
    for p in &segment.points {
        let local = t_inv.apply(p);
        let g = global_voxel_from_point(&local, inv);
        if !seen.insert(g) {
            continue;
        }
        if (p - sphere.center).norm() > sphere.radius {
            continue;
        }
        if submap.labels.voxel(&g).map_or(false, |v| v.surface) {
            inter += 1;
        }
    }
    let union = seen.len() as u64 + submap.surface_voxel_count() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Decides a segment's fate against the current collection.
///
/// Stuff segments match the unique stuff submap of their class when one
/// exists. Thing segments match the highest-IoU thing submap (any class)
/// when that IoU reaches `tau_iou`, smaller submap id winning ties. Anything
/// unmatched founds a new submap if it has at least `n_min` points and is
/// discarded otherwise. Stuff never matches things and vice versa.
pub fn associate_segment(
    segment: &Segment,
    collection: &SubmapCollection,
    params: &TrackerParams,
) -> Result<TrackingDecision> {
    let is_thing = collection.class_table.is_thing(segment.semantic_class)?;
    let decision = |outcome, overlap_score| TrackingDecision {
        semantic_class: segment.semantic_class,
        frame_instance_id: segment.frame_instance_id,
        outcome,
        overlap_score,
    };

    let mut best_score = 0.0;
    if is_thing {
        // Ascending-id iteration plus a strict `>` keeps the smallest id on
        // ties.
        let mut best: Option<(SubmapId, f64)> = None;
        for s in collection.iter().filter(|s| s.is_thing) {
            let iou = compute_overlap_iou(segment, s);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((s.id(), iou));
            }
        }
        if let Some((id, iou)) = best {
            if iou >= params.tau_iou {
                return Ok(decision(TrackingOutcome::MatchedSubmap(id), iou));
            }
            best_score = iou;
        }
    } else if let Some(id) = collection.stuff_submap_of_class(segment.semantic_class) {
        return Ok(decision(TrackingOutcome::MatchedSubmap(id), 1.0));
    }

    if segment.points.len() >= params.n_min {
        Ok(decision(TrackingOutcome::NewSubmap, best_score))
    } else {
        Ok(decision(TrackingOutcome::Discarded, best_score))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::{integrate_segment, WeightMode};
    use crate::submap::tests::{observe_voxel, test_class_table};
    use crate::voxel::Rgb;
    use nalgebra::{Point3, Vector3};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn collection() -> SubmapCollection {
        SubmapCollection::new(test_class_table(), 0.1, 0.2)
    }

    fn segment_at(points: Vec<Point3<f64>>, class: ClassId) -> Segment {
        let colors = vec![Rgb::new(90, 90, 90); points.len()];
        Segment {
            points,
            colors,
            semantic_class: class,
            frame_instance_id: 0,
            sensor_origin: Point3::new(0.0, 0.0, 3.0),
        }
    }

    fn center(x: i32, y: i32, z: i32) -> Point3<f64> {
        Point3::new(
            x as f64 * 0.1 + 0.05,
            y as f64 * 0.1 + 0.05,
            z as f64 * 0.1 + 0.05,
        )
    }

    #[test]
    fn reobserving_the_same_segment_gives_iou_one() {
        let mut coll = collection();
        let id = coll.create_submap(2).unwrap();
        let pts: Vec<Point3<f64>> = (0..60).map(|i| center(i % 8, i / 8, 0)).collect();
        let seg = segment_at(pts, 2);
        integrate_segment(coll.get_mut(id).unwrap(), &seg, WeightMode::Constant).unwrap();
        let iou = compute_overlap_iou(&seg, coll.get(id).unwrap());
        assert_eq!(iou, 1.0);
    }

    #[test]
    fn segment_outside_bounding_sphere_scores_zero() {
        let mut coll = collection();
        let id = coll.create_submap(2).unwrap();
        observe_voxel(coll.get_mut(id).unwrap(), Vector3::new(0, 0, 0));
        let far: Vec<Point3<f64>> = (0..10).map(|i| center(100 + i, 100, 100)).collect();
        assert_eq!(compute_overlap_iou(&segment_at(far, 2), coll.get(id).unwrap()), 0.0);
    }

    #[test]
    fn hand_built_overlaps_pick_the_higher_iou_submap() {
        let mut coll = collection();
        let a = coll.create_submap(2).unwrap();
        let b = coll.create_submap(2).unwrap();
        // Segment covers voxels x=0..8 in row y=0. A's surface: x=0..8 row
        // y=0 shifted so 6 coincide (x=0..6 plus 2 elsewhere) → IoU 6/10.
        // B's surface: x=0..2 row y=0 plus 2 elsewhere → IoU 2/10.
        for x in 0..6 {
            observe_voxel(coll.get_mut(a).unwrap(), Vector3::new(x, 0, 0));
        }
        observe_voxel(coll.get_mut(a).unwrap(), Vector3::new(0, 5, 0));
        observe_voxel(coll.get_mut(a).unwrap(), Vector3::new(1, 5, 0));
        for x in 0..2 {
            observe_voxel(coll.get_mut(b).unwrap(), Vector3::new(x, 0, 0));
        }
        observe_voxel(coll.get_mut(b).unwrap(), Vector3::new(0, 7, 0));
        observe_voxel(coll.get_mut(b).unwrap(), Vector3::new(1, 7, 0));

        let seg = segment_at((0..8).map(|x| center(x, 0, 0)).collect(), 2);
        let iou_a = compute_overlap_iou(&seg, coll.get(a).unwrap());
        let iou_b = compute_overlap_iou(&seg, coll.get(b).unwrap());
        assert!((iou_a - 0.6).abs() < 1e-12, "iou_a = {iou_a}");
        assert!((iou_b - 0.2).abs() < 1e-12, "iou_b = {iou_b}");

        let d = associate_segment(&seg, &coll, &TrackerParams::default()).unwrap();
        assert_eq!(d.outcome, TrackingOutcome::MatchedSubmap(a));
        assert!((d.overlap_score - 0.6).abs() < 1e-12);
    }

    #[test]
    fn iou_matches_exhaustive_set_oracle() {
        let mut rng = StdRng::seed_from_u64(21);
        for round in 0..20 {
            let mut coll = collection();
            let id = coll.create_submap(2).unwrap();
            {
                let s = coll.get_mut(id).unwrap();
                let pts: Vec<Point3<f64>> = (0..200)
                    .map(|_| {
                        Point3::new(
                            rng.gen_range(-0.5..0.5),
                            rng.gen_range(-0.5..0.5),
                            rng.gen_range(-0.2..0.2),
                        )
                    })
                    .collect();
                integrate_segment(s, &segment_at(pts, 2), WeightMode::Constant).unwrap();
            }
            // Shift the submap to exercise the local-frame conversion.
            if round % 2 == 1 {
                let t = crate::math::RigidTransform::from_translation(Vector3::new(
                    0.17, -0.02, 0.31,
                ));
                coll.apply_submap_transform(id, &t).unwrap();
            }
            let query: Vec<Point3<f64>> = (0..150)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-0.8..0.8),
                        rng.gen_range(-0.8..0.8),
                        rng.gen_range(-0.4..0.4),
                    )
                })
                .collect();
            let seg = segment_at(query, 2);
            let submap = coll.get(id).unwrap();
            let got = compute_overlap_iou(&seg, submap);

            // Oracle: build both voxel-index sets in full and intersect.
            let t_inv = submap.transform.inverse();
            let s_set: std::collections::BTreeSet<(i32, i32, i32)> = seg
                .points
                .iter()
                .map(|p| {
                    let g = global_voxel_from_point(&t_inv.apply(p), 10.0);
                    (g.x, g.y, g.z)
                })
                .collect();
            let v_set: std::collections::BTreeSet<(i32, i32, i32)> = submap
                .labels
                .as_layer()
                .iter_voxels()
                .filter(|(_, v)| v.surface)
                .map(|(g, _)| (g.x, g.y, g.z))
                .collect();
            let inter = s_set.intersection(&v_set).count() as f64;
            let union = (s_set.len() + v_set.len()) as f64 - inter;
            assert_eq!(got, inter / union);
        }
    }

    #[test]
    fn stuff_segments_reuse_the_class_submap_and_ignore_things() {
        let mut coll = collection();
        let thing = coll.create_submap(2).unwrap();
        // Heavy overlap with the thing submap must not capture a stuff
        // segment.
        for x in 0..10 {
            observe_voxel(coll.get_mut(thing).unwrap(), Vector3::new(x, 0, 0));
        }
        let pts: Vec<Point3<f64>> = (0..60).map(|i| center(i % 10, 0, 0)).collect();
        let stuff_seg = segment_at(pts.clone(), 1);
        let d = associate_segment(&stuff_seg, &coll, &TrackerParams::default()).unwrap();
        assert_eq!(d.outcome, TrackingOutcome::NewSubmap);

        let floor = coll.create_submap(1).unwrap();
        let d = associate_segment(&stuff_seg, &coll, &TrackerParams::default()).unwrap();
        assert_eq!(d.outcome, TrackingOutcome::MatchedSubmap(floor));
        assert_eq!(d.overlap_score, 1.0);

        // And a thing segment never matches the stuff submap, even with
        // perfect overlap.
        for x in 0..10 {
            observe_voxel(coll.get_mut(floor).unwrap(), Vector3::new(x, 3, 0));
        }
        coll.remove_submap(thing).unwrap();
        let thing_seg = segment_at((0..60).map(|i| center(i % 10, 3, 0)).collect(), 2);
        let d = associate_segment(&thing_seg, &coll, &TrackerParams::default()).unwrap();
        assert_eq!(d.outcome, TrackingOutcome::NewSubmap);
    }

    #[test]
    fn thing_matching_is_class_agnostic() {
        let mut coll = collection();
        let chair = coll.create_submap(2).unwrap();
        for x in 0..10 {
            observe_voxel(coll.get_mut(chair).unwrap(), Vector3::new(x, 0, 0));
        }
        // A table-class segment with strong overlap still matches the chair
        // submap.
        let seg = segment_at((0..60).map(|i| center(i % 10, 0, 0)).collect(), 3);
        let d = associate_segment(&seg, &coll, &TrackerParams::default()).unwrap();
        assert_eq!(d.outcome, TrackingOutcome::MatchedSubmap(chair));
    }

    #[test]
    fn small_unmatched_segments_are_discarded() {
        let coll = collection();
        let params = TrackerParams::default();
        let small = segment_at((0..30).map(|i| center(i, 0, 0)).collect(), 2);
        let d = associate_segment(&small, &coll, &params).unwrap();
        assert_eq!(d.outcome, TrackingOutcome::Discarded);
        let big = segment_at((0..50).map(|i| center(i, 0, 0)).collect(), 2);
        let d = associate_segment(&big, &coll, &params).unwrap();
        assert_eq!(d.outcome, TrackingOutcome::NewSubmap);
    }

    #[test]
    fn ties_resolve_to_the_smaller_submap_id() {
        let mut coll = collection();
        let a = coll.create_submap(2).unwrap();
        let b = coll.create_submap(2).unwrap();
        for x in 0..4 {
            observe_voxel(coll.get_mut(a).unwrap(), Vector3::new(x, 0, 0));
            observe_voxel(coll.get_mut(b).unwrap(), Vector3::new(x, 1, 0));
        }
        // Segment covers both rows equally → identical IoUs.
        let mut pts = Vec::new();
        for x in 0..4 {
            pts.push(center(x, 0, 0));
            pts.push(center(x, 1, 0));
        }
        pts.extend((0..50).map(|i| center(i, 9, 0)));
        let seg = segment_at(pts, 2);
        let iou_a = compute_overlap_iou(&seg, coll.get(a).unwrap());
        let iou_b = compute_overlap_iou(&seg, coll.get(b).unwrap());
        assert_eq!(iou_a, iou_b);
        let params = TrackerParams {
            tau_iou: iou_a / 2.0,
            n_min: 50,
        };
        let d = associate_segment(&seg, &coll, &params).unwrap();
        assert_eq!(d.outcome, TrackingOutcome::MatchedSubmap(a.min(b)));
    }

    #[test]
    fn growing_overlap_with_a_submap_never_switches_away_from_it() {
        let mut coll = collection();
        let a = coll.create_submap(2).unwrap();
        let b = coll.create_submap(2).unwrap();
        for x in 0..20 {
            observe_voxel(coll.get_mut(a).unwrap(), Vector3::new(x, 0, 0));
        }
        for x in 0..5 {
            observe_voxel(coll.get_mut(b).unwrap(), Vector3::new(x, 10, 0));
        }
        // Base segment: fixed overlap with B, growing overlap with A.
        let mut matched_a = false;
        for k in 0..=20 {
            let mut pts: Vec<Point3<f64>> = (0..3).map(|x| center(x, 10, 0)).collect();
            pts.extend((0..k).map(|x| center(x, 0, 0)));
            pts.extend((0..60).map(|i| center(i % 8, 20, 0)));
            let seg = segment_at(pts, 2);
            let d = associate_segment(&seg, &coll, &TrackerParams::default()).unwrap();
            if matched_a {
                assert_eq!(
                    d.outcome,
                    TrackingOutcome::MatchedSubmap(a),
                    "decision left A after k={k}"
                );
            } else if d.outcome == TrackingOutcome::MatchedSubmap(a) {
                matched_a = true;
            }
        }
        assert!(matched_a, "overlap never became large enough");
    }

    #[test]
    fn association_is_deterministic() {
        let mut rng = StdRng::seed_from_u64(33);
        let mut coll = collection();
        for class in [1u16, 2, 3] {
            let id = coll.create_submap(class).unwrap();
            for _ in 0..30 {
                observe_voxel(
                    coll.get_mut(id).unwrap(),
                    Vector3::new(rng.gen_range(0..10), rng.gen_range(0..10), class as i32),
                );
            }
        }
        let segs: Vec<Segment> = (0..20)
            .map(|i| {
                let pts: Vec<Point3<f64>> = (0..rng.gen_range(10..120))
                    .map(|_| {
                        Point3::new(
                            rng.gen_range(0.0..1.0),
                            rng.gen_range(0.0..1.0),
                            rng.gen_range(0.0..0.4),
                        )
                    })
                    .collect();
                segment_at(pts, 1 + (i % 3) as u16)
            })
            .collect();
        let params = TrackerParams::default();
        let first: Vec<TrackingDecision> = segs
            .iter()
            .map(|s| associate_segment(s, &coll, &params).unwrap())
            .collect();
        let second: Vec<TrackingDecision> = segs
            .iter()
            .map(|s| associate_segment(s, &coll, &params).unwrap())
            .collect();
        assert_eq!(first, second);
    }
}
