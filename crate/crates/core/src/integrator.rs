//! Bundled ray-tracing integration: fuse a segment into its submap's TSDF
//! and label layers.
//!
//! A segment's points are grouped by the voxel containing them; each group
//! casts one weighted ray from the sensor origin. TSDF updates run along the
//! whole ray (carving observed free space); label counts only accumulate in
//! voxels within the truncation band around the endpoint, and the endpoint
//! voxel itself is flagged as a surface voxel once enough points land in it
//! (`min_surface_points`, 1 by default).

use nalgebra::{Point3, Vector3};
use std::collections::HashMap;

use crate::block::{voxel_center, DetState, GlobalVoxelIndex};
use crate::error::{Error, Result};
use crate::ingest::Segment;
use crate::layer::Layer;
use crate::submap::{ClassTable, Submap};
use crate::voxel::{ClassId, CountTable, LabelVoxel, Rgb, SubmapId, TsdfVoxel};

/// Fusion weights saturate here; further observations stop moving the mean.
pub const WEIGHT_CAP: f64 = 1.0e4;

/// Per-point observation weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// Every point contributes weight 1 (bundle weight = point count).
    #[default]
    Constant,
    /// Weight 1/z² with z = sensor-to-point distance (clamped near zero).
    InverseSquareDepth,
}

/// Knobs for segment integration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrateParams {
    pub weight_mode: WeightMode,
    /// A bundle flags its end voxel as surface only when it carries at least
    /// this many points. Raising it keeps isolated mislabeled points out of
    /// the surface skin that tracking overlaps are computed against; counts
    /// and TSDF are unaffected. Values below 1 behave as 1.
    pub min_surface_points: u32,
}

impl Default for IntegrateParams {
    fn default() -> Self {
        IntegrateParams { weight_mode: WeightMode::default(), min_surface_points: 1 }
    }
}

impl From<WeightMode> for IntegrateParams {
    fn from(weight_mode: WeightMode) -> Self {
        IntegrateParams { weight_mode, ..IntegrateParams::default() }
    }
}

/// One ray: all segment points that landed in `end_voxel`, reduced to a
/// weighted-mean endpoint and color.
#[derive(Debug, Clone)]
pub struct RayBundle {
    pub end_voxel: GlobalVoxelIndex,
    /// Weighted mean of the bundled points (layer-local frame).
    pub endpoint: Point3<f64>,
    /// Sum of per-point weights (== point count in constant mode).
    pub weight: f64,
    /// Number of bundled points; the label-count increment.
    pub point_count: u32,
    /// Weighted mean color, rounded per channel.
    pub color: Rgb,
}

/// Groups points by containing voxel. Points and the sensor origin must
/// already be in the layer's frame. Bundles come back sorted by end voxel so
/// integration order is deterministic.
pub fn bundle_points(
    points: &[Point3<f64>],
    colors: &[Rgb],
    sensor_origin: &Point3<f64>,
    layer: &Layer<TsdfVoxel>,
    mode: WeightMode,
) -> Vec<RayBundle> {
    assert_eq!(points.len(), colors.len());
    #[derive(Default)]
    struct Acc {
        pos: Vector3<f64>,
        rgb: Vector3<f64>,
        weight: f64,
        count: u32,
    }
    let mut groups: HashMap<GlobalVoxelIndex, Acc, DetState> = HashMap::default();
    for (p, c) in points.iter().zip(colors) {
        let w = match mode {
            WeightMode::Constant => 1.0,
            WeightMode::InverseSquareDepth => {
                1.0 / (p - sensor_origin).norm_squared().max(1e-6)
            }
        };
        let acc = groups.entry(layer.global_index_from_point(p)).or_default();
        acc.pos += p.coords * w;
        acc.rgb += Vector3::new(c.r as f64, c.g as f64, c.b as f64) * w;
        acc.weight += w;
        acc.count += 1;
    }
    let mut bundles: Vec<RayBundle> = groups
        .into_iter()
        .map(|(g, acc)| RayBundle {
            end_voxel: g,
            endpoint: Point3::from(acc.pos / acc.weight),
            weight: acc.weight,
            point_count: acc.count,
            color: Rgb::new(
                (acc.rgb.x / acc.weight).round().clamp(0.0, 255.0) as u8,
                (acc.rgb.y / acc.weight).round().clamp(0.0, 255.0) as u8,
                (acc.rgb.z / acc.weight).round().clamp(0.0, 255.0) as u8,
            ),
        })
        .collect();
    bundles.sort_unstable_by_key(|b| (b.end_voxel.x, b.end_voxel.y, b.end_voxel.z));
    bundles
}

/// Exact ordered grid traversal from `origin` to `endpoint` extended by
/// `truncation` along the ray direction: every voxel the extended segment
/// crosses, no skips, no duplicates.
pub fn traverse_ray(
    origin: &Point3<f64>,
    endpoint: &Point3<f64>,
    truncation: f64,
    layer: &Layer<TsdfVoxel>,
) -> Result<Vec<GlobalVoxelIndex>> {
    let mut out = Vec::new();
    traverse_ray_into(origin, endpoint, truncation, layer.voxel_size_inv(), &mut out)?;
    Ok(out)
}

fn traverse_ray_into(
    origin: &Point3<f64>,
    endpoint: &Point3<f64>,
    truncation: f64,
    voxel_size_inv: f64,
    out: &mut Vec<GlobalVoxelIndex>,
) -> Result<()> {
    out.clear();
    let dir = endpoint - origin;
    let len = dir.norm();
    if len <= 0.0 {
        return Err(Error::EmptyInput("zero-length ray"));
    }
    let target = endpoint + dir * (truncation / len);

    // Amanatides–Woo DDA in units of the full origin→target segment.
    let mut g = crate::block::global_voxel_from_point(origin, voxel_size_inv);
    let g_end = crate::block::global_voxel_from_point(&target, voxel_size_inv);
    let span = target - origin;
    let mut step = Vector3::new(0i32, 0, 0);
    let mut t_max = Vector3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut t_delta = Vector3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for a in 0..3 {
        if span[a] > 0.0 {
            step[a] = 1;
            let boundary = (g[a] + 1) as f64 / voxel_size_inv;
            t_max[a] = (boundary - origin[a]) / span[a];
            t_delta[a] = 1.0 / (voxel_size_inv * span[a]);
        } else if span[a] < 0.0 {
            step[a] = -1;
            let boundary = g[a] as f64 / voxel_size_inv;
            t_max[a] = (boundary - origin[a]) / span[a];
            t_delta[a] = -1.0 / (voxel_size_inv * span[a]);
        }
    }
    let max_steps =
        ((g_end - g).abs().sum() + 3) as usize;
    out.push(g);
    for _ in 0..max_steps {
        if g == g_end {
            break;
        }
        let axis = if t_max.x <= t_max.y && t_max.x <= t_max.z {
            0
        } else if t_max.y <= t_max.z {
            1
        } else {
            2
        };
        g[axis] += step[axis];
        t_max[axis] += t_delta[axis];
        out.push(g);
    }
    Ok(())
}

/// One TSDF fusion step: weighted running average of the signed distance,
/// clamped to ±truncation, with capped weight and blended color.
pub fn update_tsdf_voxel(
    voxel: &mut TsdfVoxel,
    sdf_obs: f64,
    w_obs: f64,
    color_obs: Rgb,
    truncation: f64,
) {
    debug_assert!(w_obs > 0.0);
    let w = voxel.weight;
    let fused = (voxel.distance * w + sdf_obs * w_obs) / (w + w_obs);
    voxel.distance = fused.clamp(-truncation, truncation);
    voxel.color = voxel.color.blend(w, &color_obs, w_obs);
    voxel.weight = (w + w_obs).min(WEIGHT_CAP);
}

/// Records `increment` observations of (class, submap) in a label voxel and
/// refreshes its cached argmax.
pub fn update_label_voxel(
    voxel: &mut LabelVoxel,
    segment_class: ClassId,
    submap_id: SubmapId,
    increment: u32,
) {
    debug_assert!(increment >= 1);
    voxel.add_observation(segment_class, submap_id, increment);
}

/// Integrates a whole segment into `submap` (its tracked home): bundles the
/// points, casts one ray per bundle, carves TSDF along the full traversal,
/// and accumulates label counts within the truncation band. Grows the
/// bounding sphere over every near-surface or labeled cell it touches.
pub fn integrate_segment(submap: &mut Submap, segment: &Segment, mode: WeightMode) -> Result<()> {
    integrate_segment_with(submap, segment, &mode.into())
}

/// `integrate_segment` with the full knob set.
pub fn integrate_segment_with(
    submap: &mut Submap,
    segment: &Segment,
    params: &IntegrateParams,
) -> Result<()> {
    if segment.points.is_empty() {
        return Err(Error::EmptyInput("segment without points"));
    }
    let min_surface_points = params.min_surface_points.max(1);
    let t_inv = submap.transform.inverse();
    let origin = t_inv.apply(&segment.sensor_origin);
    let local: Vec<Point3<f64>> = segment.points.iter().map(|p| t_inv.apply(p)).collect();
    let bundles =
        bundle_points(&local, &segment.colors, &origin, &submap.tsdf, params.weight_mode);

    let truncation = submap.tsdf.truncation();
    let voxel_size = submap.tsdf.voxel_size();
    let inv = submap.tsdf.voxel_size_inv();
    let transform = submap.transform;
    let half_diag = submap.cell_half_diagonal();
    let class_id = segment.semantic_class;
    let submap_id = submap.id();

    let mut ray = Vec::new();
    for b in &bundles {
        let to_end = b.endpoint - origin;
        let len = to_end.norm();
        if len <= 1e-12 {
            continue; // endpoint coincides with the sensor; nothing to trace
        }
        let dir = to_end / len;
        traverse_ray_into(&origin, &b.endpoint, truncation, inv, &mut ray)?;
        for g in &ray {
            let center = voxel_center(g, voxel_size);
            let sdf_obs = dir.dot(&(b.endpoint - center));
            let near_surface = {
                let v = submap.tsdf.voxel_mut_or_allocate(g);
                update_tsdf_voxel(v, sdf_obs, b.weight, b.color, truncation);
                v.is_near_surface(truncation)
            };
            let labeled = sdf_obs.abs() <= truncation;
            if labeled {
                let is_end = *g == b.end_voxel && b.point_count >= min_surface_points;
                submap.labels.mutate_or_allocate(g, |v| {
                    update_label_voxel(v, class_id, submap_id, b.point_count);
                    v.surface |= is_end;
                });
            }
            if near_surface || labeled {
                let c_world = transform.apply(&center);
                let needed = (c_world - submap.bounding_sphere.center).norm() + half_diag;
                if needed > submap.bounding_sphere.radius {
                    submap.bounding_sphere.radius = needed;
                }
            }
        }
    }
    Ok(())
}

/// One-ray-per-point integrator: the simple baseline the bundled path is
/// validated against (and benchmarked against).
pub fn integrate_segment_unbundled(
    submap: &mut Submap,
    segment: &Segment,
    mode: WeightMode,
) -> Result<()> {
    integrate_segment_unbundled_with(submap, segment, &mode.into())
}

/// `integrate_segment_unbundled` with the full knob set. Every ray carries a
/// single point, so a `min_surface_points` above 1 disables surface flagging
/// entirely on this path.
pub fn integrate_segment_unbundled_with(
    submap: &mut Submap,
    segment: &Segment,
    params: &IntegrateParams,
) -> Result<()> {
    if segment.points.is_empty() {
        return Err(Error::EmptyInput("segment without points"));
    }
    let mode = params.weight_mode;
    let flag_surface = params.min_surface_points.max(1) <= 1;
    let t_inv = submap.transform.inverse();
    let origin = t_inv.apply(&segment.sensor_origin);
    let truncation = submap.tsdf.truncation();
    let voxel_size = submap.tsdf.voxel_size();
    let inv = submap.tsdf.voxel_size_inv();
    let transform = submap.transform;
    let half_diag = submap.cell_half_diagonal();
    let class_id = segment.semantic_class;
    let submap_id = submap.id();

    // Same canonical ray order as the bundled path: the clamp makes fusion
    // order-dependent, so both integrators must agree on it.
    let mut order: Vec<(GlobalVoxelIndex, usize)> = segment
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| (crate::block::global_voxel_from_point(&t_inv.apply(p), inv), i))
        .collect();
    order.sort_by_key(|(g, i)| (g.x, g.y, g.z, *i));

    let mut ray = Vec::new();
    for (end_voxel, i) in order {
        let (p, c) = (&segment.points[i], &segment.colors[i]);
        let endpoint = t_inv.apply(p);
        let to_end = endpoint - origin;
        let len = to_end.norm();
        if len <= 1e-12 {
            continue;
        }
        let w = match mode {
            WeightMode::Constant => 1.0,
            WeightMode::InverseSquareDepth => 1.0 / len.powi(2).max(1e-6),
        };
        let dir = to_end / len;
        traverse_ray_into(&origin, &endpoint, truncation, inv, &mut ray)?;
        for g in &ray {
            let center = voxel_center(g, voxel_size);
            let sdf_obs = dir.dot(&(endpoint - center));
            let near_surface = {
                let v = submap.tsdf.voxel_mut_or_allocate(g);
                update_tsdf_voxel(v, sdf_obs, w, *c, truncation);
                v.is_near_surface(truncation)
            };
            let labeled = sdf_obs.abs() <= truncation;
            if labeled {
                let is_end = *g == end_voxel && flag_surface;
                submap.labels.mutate_or_allocate(g, |v| {
                    update_label_voxel(v, class_id, submap_id, 1);
                    v.surface |= is_end;
                });
            }
            if near_surface || labeled {
                let c_world = transform.apply(&center);
                let needed = (c_world - submap.bounding_sphere.center).norm() + half_diag;
                if needed > submap.bounding_sphere.radius {
                    submap.bounding_sphere.radius = needed;
                }
            }
        }
    }
    Ok(())
}

/// Argmax of both count tables with smallest-id tie-break; `None` when the
/// voxel has no observations. Probabilities are count ratios.
pub fn voxel_label_argmax(voxel: &LabelVoxel) -> Option<(ClassId, SubmapId, f64, f64)> {
    let (class_id, cn) = voxel.semantic_counts.argmax()?;
    let (inst_id, inn) = voxel.instance_counts.argmax()?;
    Some((
        class_id,
        inst_id,
        cn as f64 / voxel.semantic_counts.total() as f64,
        inn as f64 / voxel.instance_counts.total() as f64,
    ))
}

/// Recomputes the submap's semantic class as the mode over its labeled
/// voxels' cached semantic labels (smallest class id on ties), considering
/// only classes of the submap's own kind. The thing/stuff kind is part of a
/// submap's identity — stuff submaps are unique per class — so it never
/// changes here; voxels whose labels point across the divide are the
/// reassignment pass's business. With no same-kind labeled voxels the label
/// is retained. The instance id never changes — it is the submap id.
pub fn refresh_submap_label(submap: &mut Submap, classes: &ClassTable) -> Result<()> {
    let mut histogram = CountTable::new();
    for (_, v) in submap.labels.iter_observed() {
        if let Some(c) = &v.cached {
            if classes.is_thing(c.class_id)? == submap.is_thing {
                histogram.add(c.class_id, 1);
            }
        }
    }
    if let Some((class_id, _)) = histogram.argmax() {
        submap.class_id = class_id;
    }
    Ok(())
}
