//! Map evaluation: panoptic/semantic/instance label metrics over ground-truth
//! points, and surface-distance metrics against reference geometry.
//!
//! The evaluation domain is the ground-truth point set: each GT point is
//! assigned the panoptic label of the submap it lands in (with a bounded
//! nearest-voxel fallback), and all label metrics are computed point-wise.

use std::collections::HashMap;

use nalgebra::{Point3, Vector3};

use crate::block::{voxel_center, DetState};
use crate::error::{Error, Result};
use crate::submap::{ClassTable, SubmapCollection};
use crate::voxel::{ClassId, PanopticLabel};

/// Reference labels: world points with true (class, instance) pairs. Stuff
/// points use instance id 0. The points themselves double as the reference
/// surface for geometry metrics.
#[derive(Debug, Clone, Default)]
pub struct PanopticGroundTruth {
    pub points: Vec<Point3<f64>>,
    pub labels: Vec<PanopticLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryMetrics {
    /// Mean predicted→GT nearest distance (meters).
    pub accuracy: f64,
    /// Mean GT→predicted nearest distance (meters).
    pub completion: f64,
    /// (accuracy + completion) / 2.
    pub chamfer_l1: f64,
    /// Harmonic mean of precision/recall at `threshold`, scaled ×100.
    pub f_score: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct PerClassPanoptic {
    pub class_id: ClassId,
    pub pq: f64,
    pub rq: f64,
    pub sq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone)]
pub struct PanopticQuality {
    pub pq: f64,
    pub rq: f64,
    pub sq: f64,
    pub per_class: Vec<PerClassPanoptic>,
}

/// Full evaluation output, printable as a structured text block.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub panoptic: PanopticQuality,
    pub miou: f64,
    pub accuracy: f64,
    /// (IoU threshold, mAP) pairs.
    pub map: Vec<(f64, f64)>,
    pub geometry: Option<GeometryMetrics>,
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "PQ {:.4}  RQ {:.4}  SQ {:.4}",
            self.panoptic.pq, self.panoptic.rq, self.panoptic.sq
        )?;
        for c in &self.panoptic.per_class {
            writeln!(
                f,
                "  class {:>3}: PQ {:.4}  RQ {:.4}  SQ {:.4}  (TP {} FP {} FN {})",
                c.class_id, c.pq, c.rq, c.sq, c.tp, c.fp, c.fn_
            )?;
        }
        writeln!(f, "mIoU {:.4}  accuracy {:.4}", self.miou, self.accuracy)?;
        for (thr, v) in &self.map {
            writeln!(f, "mAP@{:.1} {:.4}", thr, v)?;
        }
        if let Some(g) = &self.geometry {
            writeln!(
                f,
                "Acc {:.4} m  Comp {:.4} m  C-L1 {:.4} m  F-score {:.2} @ {:.3} m",
                g.accuracy, g.completion, g.chamfer_l1, g.f_score, g.threshold
            )?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Prediction assignment
// ---------------------------------------------------------------------------

/// Labels each GT point with the panoptic label of the submap whose observed
/// voxel contains it; if no submap contains it, falls back to the nearest
/// observed voxel within `2 × voxel_size` (smallest submap id on exact ties);
/// otherwise the point stays unlabeled (`None` = Void).
pub fn assign_predictions(
    gt: &PanopticGroundTruth,
    collection: &SubmapCollection,
) -> Vec<Option<PanopticLabel>> {
    let max_dist = 2.0 * collection.voxel_size();
    gt.points
        .iter()
        .map(|p| {
            let hits = collection.lookup_point(p);
            if let Some((id, _, _)) = hits.first() {
                let s = collection.get(*id).unwrap();
                return Some(s.panoptic_label());
            }
            // Bounded nearest-voxel fallback.
            let mut best: Option<(f64, PanopticLabel)> = None;
            for s in collection.iter() {
                let reach = s.bounding_sphere.radius + max_dist;
                if (p - s.bounding_sphere.center).norm() > reach {
                    continue;
                }
                let local = s.transform.inverse().apply(p);
                let g0 = s.tsdf.global_index_from_point(&local);
                for dz in -2..=2i32 {
                    for dy in -2..=2i32 {
                        for dx in -2..=2i32 {
                            let g = g0 + Vector3::new(dx, dy, dz);
                            let Some(v) = s.tsdf.voxel(&g) else { continue };
                            if !v.is_near_surface(collection.truncation()) {
                                continue;
                            }
                            let c = voxel_center(&g, s.tsdf.voxel_size());
                            let d = (s.transform.apply(&c) - p).norm();
                            if d <= max_dist && best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                                best = Some((d, s.panoptic_label()));
                            }
                        }
                    }
                }
            }
            best.map(|(_, l)| l)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Panoptic quality
// ---------------------------------------------------------------------------

/// Segment key: things keep their instance, stuff merges per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum SegKey {
    Thing(ClassId, u16),
    Stuff(ClassId),
}

impl SegKey {
    fn from_label(l: &PanopticLabel, classes: &ClassTable) -> SegKey {
        if classes.is_thing(l.class_id).unwrap_or(false) {
            SegKey::Thing(l.class_id, l.instance_id)
        } else {
            SegKey::Stuff(l.class_id)
        }
    }

    fn class(&self) -> ClassId {
        match self {
            SegKey::Thing(c, _) | SegKey::Stuff(c) => *c,
        }
    }
}

/// PQ/RQ/SQ per class, averaged over classes present in the ground truth.
/// A GT segment and prediction match iff same class and IoU > 0.5.
pub fn compute_panoptic_quality(
    gt: &[PanopticLabel],
    pred: &[Option<PanopticLabel>],
    classes: &ClassTable,
) -> Result<PanopticQuality> {
    if gt.is_empty() {
        return Err(Error::EmptyInput("panoptic ground truth"));
    }
    assert_eq!(gt.len(), pred.len());
    let mut gt_sizes: HashMap<SegKey, usize, DetState> = HashMap::default();
    let mut pred_sizes: HashMap<SegKey, usize, DetState> = HashMap::default();
    let mut inter: HashMap<(SegKey, SegKey), usize, DetState> = HashMap::default();
    for (g, p) in gt.iter().zip(pred) {
        let gk = SegKey::from_label(g, classes);
        *gt_sizes.entry(gk).or_default() += 1;
        if let Some(p) = p {
            let pk = SegKey::from_label(p, classes);
            *pred_sizes.entry(pk).or_default() += 1;
            *inter.entry((gk, pk)).or_default() += 1;
        }
    }

    // Unique matching at IoU > 0.5 (the threshold makes overlaps exclusive).
    let mut matched_gt: HashMap<SegKey, f64, DetState> = HashMap::default();
    let mut matched_pred: Vec<SegKey> = Vec::new();
    for ((gk, pk), &i) in inter.iter() {
        if gk.class() != pk.class() {
            continue;
        }
        let union = gt_sizes[gk] + pred_sizes[pk] - i;
        let iou = i as f64 / union as f64;
        if iou > 0.5 {
            matched_gt.insert(*gk, iou);
            matched_pred.push(*pk);
        }
    }

    let mut gt_classes: Vec<ClassId> = gt_sizes.keys().map(|k| k.class()).collect();
    gt_classes.sort_unstable();
    gt_classes.dedup();

    let mut per_class = Vec::new();
    for &c in &gt_classes {
        let gt_of_c: Vec<&SegKey> = gt_sizes.keys().filter(|k| k.class() == c).collect();
        let pred_of_c: Vec<&SegKey> = pred_sizes.keys().filter(|k| k.class() == c).collect();
        let tp_ious: Vec<f64> = gt_of_c
            .iter()
            .filter_map(|k| matched_gt.get(k).copied())
            .collect();
        let tp = tp_ious.len();
        let fn_ = gt_of_c.len() - tp;
        let fp = pred_of_c
            .iter()
            .filter(|k| !matched_pred.contains(**k))
            .count();
        let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
        let iou_sum: f64 = tp_ious.iter().sum();
        let (pq, rq, sq) = if denom > 0.0 {
            (
                iou_sum / denom,
                tp as f64 / denom,
                if tp > 0 { iou_sum / tp as f64 } else { 0.0 },
            )
        } else {
            (0.0, 0.0, 0.0)
        };
        per_class.push(PerClassPanoptic {
            class_id: c,
            pq,
            rq,
            sq,
            tp,
            fp,
            fn_,
        });
    }
    let n = per_class.len() as f64;
    Ok(PanopticQuality {
        pq: per_class.iter().map(|c| c.pq).sum::<f64>() / n,
        rq: per_class.iter().map(|c| c.rq).sum::<f64>() / n,
        sq: per_class.iter().map(|c| c.sq).sum::<f64>() / n,
        per_class,
    })
}

// ---------------------------------------------------------------------------
// Semantic metrics
// ---------------------------------------------------------------------------

/// (mIoU over GT-present classes, pointwise accuracy). Void predictions count
/// as wrong everywhere.
pub fn compute_semantic_metrics(
    gt: &[PanopticLabel],
    pred: &[Option<PanopticLabel>],
) -> Result<(f64, f64)> {
    if gt.is_empty() {
        return Err(Error::EmptyInput("semantic ground truth"));
    }
    assert_eq!(gt.len(), pred.len());
    let mut inter: HashMap<ClassId, usize, DetState> = HashMap::default();
    let mut gt_count: HashMap<ClassId, usize, DetState> = HashMap::default();
    let mut pred_count: HashMap<ClassId, usize, DetState> = HashMap::default();
    let mut correct = 0usize;
    for (g, p) in gt.iter().zip(pred) {
        *gt_count.entry(g.class_id).or_default() += 1;
        if let Some(p) = p {
            *pred_count.entry(p.class_id).or_default() += 1;
            if p.class_id == g.class_id {
                *inter.entry(g.class_id).or_default() += 1;
                correct += 1;
            }
        }
    }
    let mut classes: Vec<ClassId> = gt_count.keys().copied().collect();
    classes.sort_unstable();
    let mut iou_sum = 0.0;
    for c in &classes {
        let i = *inter.get(c).unwrap_or(&0);
        let union = gt_count[c] + pred_count.get(c).unwrap_or(&0) - i;
        iou_sum += i as f64 / union as f64;
    }
    Ok((
        iou_sum / classes.len() as f64,
        correct as f64 / gt.len() as f64,
    ))
}

// ---------------------------------------------------------------------------
// Instance mAP
// ---------------------------------------------------------------------------

/// Mean average precision over thing classes at each IoU threshold.
/// Predictions are ranked by point count (descending; smaller instance id on
/// ties) and matched greedily to the best still-unmatched GT instance.
pub fn compute_instance_map(
    gt: &[PanopticLabel],
    pred: &[Option<PanopticLabel>],
    thresholds: &[f64],
    classes: &ClassTable,
) -> Result<Vec<(f64, f64)>> {
    if gt.is_empty() {
        return Err(Error::EmptyInput("instance ground truth"));
    }
    assert_eq!(gt.len(), pred.len());
    // Group point indices per (class, instance) on both sides, things only.
    let mut gt_inst: HashMap<(ClassId, u16), Vec<u32>, DetState> = HashMap::default();
    let mut pred_inst: HashMap<(ClassId, u16), Vec<u32>, DetState> = HashMap::default();
    for (i, (g, p)) in gt.iter().zip(pred).enumerate() {
        if classes.is_thing(g.class_id).unwrap_or(false) {
            gt_inst
                .entry((g.class_id, g.instance_id))
                .or_default()
                .push(i as u32);
        }
        if let Some(p) = p {
            if classes.is_thing(p.class_id).unwrap_or(false) {
                pred_inst
                    .entry((p.class_id, p.instance_id))
                    .or_default()
                    .push(i as u32);
            }
        }
    }
    let mut thing_classes: Vec<ClassId> = gt_inst.keys().map(|k| k.0).collect();
    thing_classes.sort_unstable();
    thing_classes.dedup();
    if thing_classes.is_empty() {
        return Err(Error::EmptyInput("no thing classes in ground truth"));
    }

    let iou = |a: &[u32], b: &[u32]| -> f64 {
        // Index lists are built in ascending order; merge-count the overlap.
        let (mut i, mut j, mut inter) = (0usize, 0usize, 0usize);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    inter += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        inter as f64 / (a.len() + b.len() - inter) as f64
    };

    let mut out = Vec::new();
    for &thr in thresholds {
        let mut ap_sum = 0.0;
        for &c in &thing_classes {
            let gts: Vec<(&u16, &Vec<u32>)> = gt_inst
                .iter()
                .filter(|((cc, _), _)| *cc == c)
                .map(|((_, inst), pts)| (inst, pts))
                .collect();
            let mut preds: Vec<(&u16, &Vec<u32>)> = pred_inst
                .iter()
                .filter(|((cc, _), _)| *cc == c)
                .map(|((_, inst), pts)| (inst, pts))
                .collect();
            preds.sort_by_key(|(inst, pts)| (std::cmp::Reverse(pts.len()), **inst));

            let mut gt_taken = vec![false; gts.len()];
            let mut tps = 0usize;
            let mut fps = 0usize;
            let mut ap = 0.0;
            let n_gt = gts.len();
            for (_, p_pts) in &preds {
                let mut best: Option<(f64, usize)> = None;
                for (gi, (_, g_pts)) in gts.iter().enumerate() {
                    if gt_taken[gi] {
                        continue;
                    }
                    let v = iou(p_pts, g_pts);
                    if v >= thr && best.map_or(true, |(bv, _)| v > bv) {
                        best = Some((v, gi));
                    }
                }
                match best {
                    Some((_, gi)) => {
                        gt_taken[gi] = true;
                        tps += 1;
                        // Uninterpolated AP: precision at each new recall step.
                        let precision = tps as f64 / (tps + fps) as f64;
                        ap += precision / n_gt as f64;
                    }
                    None => fps += 1,
                }
            }
            ap_sum += ap;
        }
        out.push((thr, ap_sum / thing_classes.len() as f64));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Geometry metrics
// ---------------------------------------------------------------------------

/// Uniform-grid nearest-neighbor index over a fixed point set.
pub struct NearestGrid {
    cell: f64,
    inv: f64,
    buckets: HashMap<Vector3<i32>, Vec<u32>, DetState>,
    points: Vec<Point3<f64>>,
    min_cell: Vector3<i32>,
    max_cell: Vector3<i32>,
}

impl NearestGrid {
    pub fn build(points: &[Point3<f64>], cell: f64) -> NearestGrid {
        assert!(cell > 0.0);
        let inv = 1.0 / cell;
        let mut buckets: HashMap<Vector3<i32>, Vec<u32>, DetState> = HashMap::default();
        let mut min_cell = Vector3::new(i32::MAX, i32::MAX, i32::MAX);
        let mut max_cell = Vector3::new(i32::MIN, i32::MIN, i32::MIN);
        for (i, p) in points.iter().enumerate() {
            let c = Vector3::new(
                (p.x * inv).floor() as i32,
                (p.y * inv).floor() as i32,
                (p.z * inv).floor() as i32,
            );
            min_cell = min_cell.inf(&c);
            max_cell = max_cell.sup(&c);
            buckets.entry(c).or_default().push(i as u32);
        }
        NearestGrid {
            cell,
            inv,
            buckets,
            points: points.to_vec(),
            min_cell,
            max_cell,
        }
    }

    /// Index and distance of the closest stored point, by expanding-ring
    /// search (exact: stops once closer rings are impossible).
    pub fn nearest(&self, q: &Point3<f64>) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let qc = Vector3::new(
            (q.x * self.inv).floor() as i32,
            (q.y * self.inv).floor() as i32,
            (q.z * self.inv).floor() as i32,
        );
        // Ring radius needed to provably reach any occupied cell.
        let mut max_ring = 1;
        for a in 0..3 {
            max_ring = max_ring
                .max((qc[a] - self.min_cell[a]).abs())
                .max((qc[a] - self.max_cell[a]).abs());
        }
        let mut best: Option<(usize, f64)> = None;
        for ring in 0..=max_ring {
            if let Some((_, bd)) = best {
                if (ring - 1).max(0) as f64 * self.cell > bd {
                    break;
                }
            }
            self.for_ring_cells(&qc, ring, |cell| {
                if let Some(idx) = self.buckets.get(&cell) {
                    for &i in idx {
                        let d = (self.points[i as usize] - q).norm();
                        if best.map_or(true, |(_, bd)| d < bd) {
                            best = Some((i as usize, d));
                        }
                    }
                }
            });
        }
        best
    }

    fn for_ring_cells(&self, center: &Vector3<i32>, ring: i32, mut f: impl FnMut(Vector3<i32>)) {
        if ring == 0 {
            f(*center);
            return;
        }
        for dx in -ring..=ring {
            for dy in -ring..=ring {
                for dz in -ring..=ring {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                        continue;
                    }
                    f(center + Vector3::new(dx, dy, dz));
                }
            }
        }
    }
}

/// Accuracy / Completion / Chamfer-L1 / F-score between a predicted point set
/// (e.g. mesh vertices) and reference surface points.
pub fn compute_geometry_metrics(
    pred: &[Point3<f64>],
    gt: &[Point3<f64>],
    f_threshold: f64,
) -> Result<GeometryMetrics> {
    if pred.is_empty() {
        return Err(Error::EmptyInput("predicted surface points"));
    }
    if gt.is_empty() {
        return Err(Error::EmptyInput("ground-truth surface points"));
    }
    let cell = f_threshold.max(1e-6);
    let gt_grid = NearestGrid::build(gt, cell);
    let pred_grid = NearestGrid::build(pred, cell);

    let mut acc_sum = 0.0;
    let mut within_pred = 0usize;
    for p in pred {
        let (_, d) = gt_grid.nearest(p).unwrap();
        acc_sum += d;
        if d <= f_threshold {
            within_pred += 1;
        }
    }
    let mut comp_sum = 0.0;
    let mut within_gt = 0usize;
    for p in gt {
        let (_, d) = pred_grid.nearest(p).unwrap();
        comp_sum += d;
        if d <= f_threshold {
            within_gt += 1;
        }
    }
    let accuracy = acc_sum / pred.len() as f64;
    let completion = comp_sum / gt.len() as f64;
    let precision = within_pred as f64 / pred.len() as f64;
    let recall = within_gt as f64 / gt.len() as f64;
    let f_score = if precision + recall > 0.0 {
        100.0 * 2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(GeometryMetrics {
        accuracy,
        completion,
        chamfer_l1: 0.5 * (accuracy + completion),
        f_score,
        threshold: f_threshold,
    })
}
