//! Submaps — one volumetric unit per mapped entity — and the collection
//! indexing them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point3;

use crate::block::{voxel_center, GlobalVoxelIndex, VOXELS_PER_BLOCK};
use crate::error::{Error, Result};
use crate::layer::{LabelLayer, Layer};
use crate::math::{Aabb, BoundingSphere, RigidTransform};
use crate::voxel::{ClassId, LabelVoxel, PanopticLabel, Rgb, SubmapId, TsdfVoxel};

/// One row of the class table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassDef {
    pub class_id: ClassId,
    pub name: String,
    pub is_thing: bool,
    pub color: Rgb,
}

/// Semantic class registry: id → (name, thing/stuff, display color).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassTable {
    defs: BTreeMap<ClassId, ClassDef>,
}

impl ClassTable {
    pub fn from_defs(defs: impl IntoIterator<Item = ClassDef>) -> Self {
        ClassTable {
            defs: defs.into_iter().map(|d| (d.class_id, d)).collect(),
        }
    }

    pub fn get(&self, id: ClassId) -> Option<&ClassDef> {
        self.defs.get(&id)
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.defs.contains_key(&id)
    }

    pub fn is_thing(&self, id: ClassId) -> Result<bool> {
        self.defs
            .get(&id)
            .map(|d| d.is_thing)
            .ok_or(Error::UnknownClass(id))
    }

    pub fn by_name(&self, name: &str) -> Option<&ClassDef> {
        self.defs.values().find(|d| d.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassDef> {
        self.defs.values()
    }

    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    /// Parses the `id,name,thing|stuff,r,g,b` text format (# starts a comment).
    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::ClassTableParse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut defs = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 6 {
                return Err(err(line_no, format!("expected 6 fields, got {}", fields.len())));
            }
            let class_id: ClassId = fields[0]
                .parse()
                .map_err(|e| err(line_no, format!("bad class id: {e}")))?;
            let is_thing = match fields[2] {
                "thing" => true,
                "stuff" => false,
                other => return Err(err(line_no, format!("expected thing|stuff, got {other:?}"))),
            };
            let channel = |s: &str| -> Result<u8> {
                s.parse()
                    .map_err(|e| err(line_no, format!("bad color channel: {e}")))
            };
            let def = ClassDef {
                class_id,
                name: fields[1].to_string(),
                is_thing,
                color: Rgb::new(channel(fields[3])?, channel(fields[4])?, channel(fields[5])?),
            };
            if defs.insert(class_id, def).is_some() {
                return Err(err(line_no, format!("duplicate class id {class_id}")));
            }
        }
        Ok(ClassTable { defs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::from("# class_id,name,thing|stuff,r,g,b\n");
        for d in self.defs.values() {
            let kind = if d.is_thing { "thing" } else { "stuff" };
            writeln!(
                out,
                "{},{},{},{},{},{}",
                d.class_id, d.name, kind, d.color.r, d.color.g, d.color.b
            )
            .unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }
}

/// One entity's volumetric map: TSDF + label layers, panoptic label,
/// bounding sphere (world frame), rigid pose, and activity bookkeeping.
#[derive(Debug, Clone)]
pub struct Submap {
    id: SubmapId,
    pub class_id: ClassId,
    pub is_thing: bool,
    pub tsdf: Layer<TsdfVoxel>,
    pub labels: LabelLayer,
    /// World-frame sphere covering every observed voxel's whole cell.
    pub bounding_sphere: BoundingSphere,
    /// world_T_submap; identity until explicitly manipulated.
    pub transform: RigidTransform,
    pub frames_since_observed: u32,
    pub active: bool,
    /// Voxels whose instance label pointed at a deleted submap and had to be
    /// re-homed during reassignment (diagnostic only).
    pub orphan_relabels: u64,
}

impl Submap {
    fn new(id: SubmapId, class_id: ClassId, is_thing: bool, voxel_size: f64, truncation: f64) -> Self {
        Submap {
            id,
            class_id,
            is_thing,
            tsdf: Layer::new(voxel_size, truncation),
            labels: LabelLayer::new(voxel_size, truncation),
            bounding_sphere: BoundingSphere::empty_at(Point3::origin()),
            transform: RigidTransform::identity(),
            frames_since_observed: 0,
            active: true,
            orphan_relabels: 0,
        }
    }

    pub fn id(&self) -> SubmapId {
        self.id
    }

    pub fn panoptic_label(&self) -> PanopticLabel {
        PanopticLabel {
            class_id: self.class_id,
            instance_id: self.id,
        }
    }

    /// Half diagonal of one voxel cell — the sphere inflation that makes the
    /// sphere cover every point of an observed cell, not just its center.
    pub fn cell_half_diagonal(&self) -> f64 {
        self.tsdf.voxel_size() * 3f64.sqrt() / 2.0
    }

    pub fn tsdf_observed_count(&self) -> u64 {
        self.tsdf.iter_voxels().filter(|(_, v)| v.is_observed()).count() as u64
    }

    /// Total TSDF weight (mass-conservation bookkeeping).
    pub fn tsdf_weight_sum(&self) -> f64 {
        self.tsdf.iter_voxels().map(|(_, v)| v.weight).sum()
    }

    /// Number of voxels in the one-voxel surface skin (the set spatial
    /// overlap statistics run against).
    pub fn surface_voxel_count(&self) -> u64 {
        self.labels.surface_count()
    }

    /// True when the submap holds no label observations and no near-surface
    /// TSDF voxel — i.e. nothing but (possibly) carved free space. Such
    /// submaps are deleted during voxel reassignment.
    pub fn is_effectively_empty(&self) -> bool {
        self.labels.observed_count() == 0
            && !self
                .tsdf
                .iter_voxels()
                .any(|(_, v)| v.is_near_surface(self.tsdf.truncation()))
    }

    /// TSDF voxel at a world point, if allocated.
    pub fn tsdf_at_world(&self, p: &Point3<f64>) -> Option<&TsdfVoxel> {
        let local = self.transform.inverse().apply(p);
        self.tsdf.voxel_at_point(&local)
    }

    pub fn label_at_world(&self, p: &Point3<f64>) -> Option<&LabelVoxel> {
        let local = self.transform.inverse().apply(p);
        self.labels.as_layer().voxel_at_point(&local)
    }

    /// Grows the bounding sphere so the whole cell of submap-frame voxel `g`
    /// is covered (center fixed). Used on every integration write.
    pub fn grow_sphere_for_voxel(&mut self, g: &GlobalVoxelIndex) {
        let c_world = self
            .transform
            .apply(&voxel_center(g, self.tsdf.voxel_size()));
        let needed = (c_world - self.bounding_sphere.center).norm() + self.cell_half_diagonal();
        if needed > self.bounding_sphere.radius {
            self.bounding_sphere.radius = needed;
        }
    }

    /// Voxels the bounding sphere must cover: near-surface TSDF voxels plus
    /// every label-observed voxel. Carved far-field free space is excluded —
    /// spatial queries never report it as a hit.
    fn sphere_relevant_indices(&self) -> Vec<GlobalVoxelIndex> {
        let truncation = self.tsdf.truncation();
        let mut indices: Vec<GlobalVoxelIndex> = self
            .tsdf
            .iter_voxels()
            .filter(|(_, v)| v.is_near_surface(truncation))
            .map(|(g, _)| g)
            .collect();
        indices.extend(self.labels.iter_observed().map(|(g, _)| g));
        indices
    }

    /// Exact recompute: center at the AABB center of the covered voxel
    /// centers, radius reaching the farthest one plus half a cell diagonal.
    /// Empty submap → zero radius at the transform origin.
    pub fn update_bounding_sphere(&mut self) {
        let indices = self.sphere_relevant_indices();
        let mut aabb = Aabb::new_empty();
        for g in &indices {
            aabb.insert(&voxel_center(g, self.tsdf.voxel_size()));
        }
        if aabb.is_empty() {
            self.bounding_sphere =
                BoundingSphere::empty_at(Point3::from(self.transform.translation));
            return;
        }
        let center = aabb.center();
        let mut r2: f64 = 0.0;
        for g in &indices {
            let d2 = (voxel_center(g, self.tsdf.voxel_size()) - center).norm_squared();
            r2 = r2.max(d2);
        }
        self.bounding_sphere = BoundingSphere {
            center: self.transform.apply(&center),
            radius: r2.sqrt() + self.cell_half_diagonal(),
        };
    }

    /// Drops label blocks with no observations, then TSDF blocks that are
    /// both unobserved and not backing a label block (keeps every label
    /// block paired with a TSDF block at the same index).
    pub fn prune_empty_blocks(&mut self) {
        self.labels.prune_unobserved_blocks();
        let label_blocks: std::collections::HashSet<_> = self
            .labels
            .as_layer()
            .iter_blocks()
            .map(|(bi, _)| *bi)
            .collect();
        self.tsdf.retain_blocks(|bi, block| {
            label_blocks.contains(bi)
                || (0..VOXELS_PER_BLOCK).any(|i| block.voxel(i).is_observed())
        });
    }
}

/// The map: all submaps plus the class registry and grid parameters shared
/// by every submap layer.
#[derive(Debug, Clone)]
pub struct SubmapCollection {
    pub class_table: ClassTable,
    voxel_size: f64,
    truncation: f64,
    submaps: BTreeMap<SubmapId, Submap>,
    next_id: SubmapId,
}

impl SubmapCollection {
    pub fn new(class_table: ClassTable, voxel_size: f64, truncation: f64) -> Self {
        SubmapCollection {
            class_table,
            voxel_size,
            truncation,
            submaps: BTreeMap::new(),
            next_id: 1,
        }
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn len(&self) -> usize {
        self.submaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.submaps.is_empty()
    }

    /// Creates a fresh submap for `class_id`. Ids are never reused.
    pub fn create_submap(&mut self, class_id: ClassId) -> Result<SubmapId> {
        let is_thing = self.class_table.is_thing(class_id)?;
        let id = self.next_id;
        if id == SubmapId::MAX {
            return Err(Error::InvariantViolation("submap id space exhausted".into()));
        }
        self.next_id += 1;
        self.submaps.insert(
            id,
            Submap::new(id, class_id, is_thing, self.voxel_size, self.truncation),
        );
        Ok(id)
    }

    /// Deep-copies a submap under a fresh id. Instance counts and cached
    /// instance labels that referred to the source id are remapped to the new
    /// id so the copy satisfies the instance-agreement invariant on its own.
    pub fn duplicate_submap(&mut self, id: SubmapId) -> Result<SubmapId> {
        let src = self.submaps.get(&id).ok_or(Error::UnknownSubmap(id))?;
        let mut copy = src.clone();
        let new_id = self.next_id;
        if new_id == SubmapId::MAX {
            return Err(Error::InvariantViolation("submap id space exhausted".into()));
        }
        self.next_id += 1;
        copy.id = new_id;
        let indices: Vec<GlobalVoxelIndex> =
            copy.labels.iter_observed().map(|(g, _)| g).collect();
        for g in indices {
            copy.labels.mutate(&g, |v| {
                let n = v.instance_counts.get(id);
                if n > 0 {
                    let mut rebuilt = crate::voxel::CountTable::new();
                    for (other, count) in v.instance_counts.iter() {
                        rebuilt.add(if other == id { new_id } else { other }, count);
                    }
                    v.instance_counts = rebuilt;
                }
                let refined = v.refined;
                match v.cached {
                    Some(c) if c.instance_id == id => {
                        if refined {
                            v.override_cache(c.class_id, new_id);
                        } else {
                            v.recompute_cache();
                        }
                    }
                    _ => {}
                }
            });
        }
        self.submaps.insert(new_id, copy);
        Ok(new_id)
    }

    pub fn remove_submap(&mut self, id: SubmapId) -> Option<Submap> {
        self.submaps.remove(&id)
    }

    pub fn get(&self, id: SubmapId) -> Option<&Submap> {
        self.submaps.get(&id)
    }

    pub fn get_mut(&mut self, id: SubmapId) -> Option<&mut Submap> {
        self.submaps.get_mut(&id)
    }

    pub fn contains(&self, id: SubmapId) -> bool {
        self.submaps.contains_key(&id)
    }

    /// Submaps in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = &Submap> {
        self.submaps.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Submap> {
        self.submaps.values_mut()
    }

    pub fn ids(&self) -> Vec<SubmapId> {
        self.submaps.keys().copied().collect()
    }

    /// The unique stuff submap of a class, if one exists.
    pub fn stuff_submap_of_class(&self, class_id: ClassId) -> Option<SubmapId> {
        self.submaps
            .values()
            .find(|s| !s.is_thing && s.class_id == class_id)
            .map(|s| s.id)
    }

    /// All submaps holding a near-surface voxel at world point `p`, in id
    /// order. Carved free space is not a hit: a query in observed-empty air
    /// returns nothing. The bounding sphere is a pure accelerator here:
    /// sphere maintenance guarantees it covers every near-surface and
    /// label-carrying cell, so the result equals a full scan of all submaps.
    pub fn lookup_point(
        &self,
        p: &Point3<f64>,
    ) -> Vec<(SubmapId, &TsdfVoxel, Option<&LabelVoxel>)> {
        let mut hits = Vec::new();
        for s in self.submaps.values() {
            if !s.bounding_sphere.contains(p) {
                continue;
            }
            let local = s.transform.inverse().apply(p);
            let g = s.tsdf.global_index_from_point(&local);
            if let Some(v) = s.tsdf.voxel(&g) {
                if v.is_near_surface(self.truncation) {
                    hits.push((s.id, v, s.labels.voxel(&g).filter(|l| l.is_observed())));
                }
            }
        }
        hits
    }

    /// Re-poses a submap: `transform := delta ∘ transform`. Voxel data is
    /// untouched; the world-frame sphere center moves with the map.
    pub fn apply_submap_transform(&mut self, id: SubmapId, delta: &RigidTransform) -> Result<()> {
        delta.validate_rigid(1e-6)?;
        let s = self.submaps.get_mut(&id).ok_or(Error::UnknownSubmap(id))?;
        s.transform = delta.compose(&s.transform);
        s.bounding_sphere.center = delta.apply(&s.bounding_sphere.center);
        Ok(())
    }

    /// Rebuilds a collection shell with the same parameters but no submaps.
    pub fn empty_like(&self) -> SubmapCollection {
        SubmapCollection::new(self.class_table.clone(), self.voxel_size, self.truncation)
    }

    pub(crate) fn insert_raw(&mut self, submap: Submap) {
        self.next_id = self.next_id.max(submap.id + 1);
        self.submaps.insert(submap.id, submap);
    }

    pub(crate) fn make_submap_raw(
        id: SubmapId,
        class_id: ClassId,
        is_thing: bool,
        voxel_size: f64,
        truncation: f64,
    ) -> Submap {
        Submap::new(id, class_id, is_thing, voxel_size, truncation)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    pub(crate) fn test_class_table() -> ClassTable {
        ClassTable::from_defs([
            ClassDef {
                class_id: 1,
                name: "floor".into(),
                is_thing: false,
                color: Rgb::new(120, 120, 120),
            },
            ClassDef {
                class_id: 2,
                name: "chair".into(),
                is_thing: true,
                color: Rgb::new(200, 60, 60),
            },
            ClassDef {
                class_id: 3,
                name: "table".into(),
                is_thing: true,
                color: Rgb::new(60, 60, 200),
            },
        ])
    }

    pub(crate) fn observe_voxel(s: &mut Submap, g: GlobalVoxelIndex) {
        let v = s.tsdf.voxel_mut_or_allocate(&g);
        v.distance = 0.01;
        v.weight = 1.0;
        let (class_id, id) = (s.class_id, s.id());
        s.labels.mutate_or_allocate(&g, |l| {
            l.add_observation(class_id, id, 1);
            l.surface = true;
        });
        s.grow_sphere_for_voxel(&g);
    }

    #[test]
    fn class_table_round_trips_through_text() {
        let table = test_class_table();
        let text = table.to_file_string();
        let back = ClassTable::parse_str(&text, Path::new("mem")).unwrap();
        assert_eq!(table, back);
    }

    #[test]
    fn class_table_rejects_malformed_rows() {
        for bad in [
            "1,floor,stuff,1,2",          // short row
            "x,floor,stuff,1,2,3",        // bad id
            "1,floor,neither,1,2,3",      // bad kind
            "1,floor,stuff,1,2,999",      // channel out of range
            "1,a,stuff,1,2,3\n1,b,thing,0,0,0", // duplicate id
        ] {
            assert!(ClassTable::parse_str(bad, Path::new("mem")).is_err(), "{bad}");
        }
    }

    #[test]
    fn submap_ids_are_unique_and_never_reused() {
        let mut coll = SubmapCollection::new(test_class_table(), 0.1, 0.2);
        let a = coll.create_submap(2).unwrap();
        let b = coll.create_submap(2).unwrap();
        assert_ne!(a, b);
        coll.remove_submap(b);
        let c = coll.create_submap(3).unwrap();
        assert!(c > b);
    }

    #[test]
    fn create_rejects_unknown_class() {
        let mut coll = SubmapCollection::new(test_class_table(), 0.1, 0.2);
        assert!(matches!(coll.create_submap(42), Err(Error::UnknownClass(42))));
    }

    #[test]
    fn empty_submap_sphere_is_zero_at_origin() {
        let mut coll = SubmapCollection::new(test_class_table(), 0.1, 0.2);
        let id = coll.create_submap(2).unwrap();
        let s = coll.get_mut(id).unwrap();
        s.update_bounding_sphere();
        assert_eq!(s.bounding_sphere.radius, 0.0);
        assert_eq!(s.bounding_sphere.center, Point3::origin());
    }

    #[test]
    fn single_voxel_sphere_is_tight() {
        let mut coll = SubmapCollection::new(test_class_table(), 0.1, 0.2);
        let id = coll.create_submap(2).unwrap();
        let s = coll.get_mut(id).unwrap();
        let g = Vector3::new(7, -3, 2);
        observe_voxel(s, g);
        s.update_bounding_sphere();
        let c = voxel_center(&g, 0.1);
        assert!((s.bounding_sphere.center - c).norm() <= 0.1);
        assert!(s.bounding_sphere.radius <= 0.1);
    }

    /// Exact minimum enclosing sphere (Welzl) used as the tightness oracle.
    mod welzl {
        use nalgebra::{Matrix3, Point3, Vector3};

        fn sphere_from(support: &[Point3<f64>]) -> (Point3<f64>, f64) {
            match support.len() {
                0 => (Point3::origin(), 0.0),
                1 => (support[0], 0.0),
                2 => {
                    let c = nalgebra::center(&support[0], &support[1]);
                    (c, (support[0] - c).norm())
                }
                3 => {
                    let (a, b, c) = (support[0], support[1], support[2]);
                    let ab = b - a;
                    let ac = c - a;
                    let n = ab.cross(&ac);
                    let nn = n.norm_squared();
                    if nn < 1e-18 {
                        return sphere_from(&[a, b]);
                    }
                    let to_center =
                        (ac.norm_squared() * n.cross(&ab) + ab.norm_squared() * ac.cross(&n))
                            / (2.0 * nn);
                    let center = a + to_center;
                    (center, (a - center).norm())
                }
                _ => {
                    let a = support[0];
                    let rows: Vec<Vector3<f64>> =
                        (1..4).map(|i| support[i] - a).collect();
                    let m = Matrix3::from_rows(&[
                        rows[0].transpose(),
                        rows[1].transpose(),
                        rows[2].transpose(),
                    ]);
                    let rhs = Vector3::new(
                        rows[0].norm_squared() / 2.0,
                        rows[1].norm_squared() / 2.0,
                        rows[2].norm_squared() / 2.0,
                    );
                    match m.lu().solve(&rhs) {
                        Some(x) => {
                            let center = a + x;
                            (center, (a - center).norm())
                        }
                        None => sphere_from(&support[..3]),
                    }
                }
            }
        }

        fn contains(c: &Point3<f64>, r: f64, p: &Point3<f64>) -> bool {
            (p - c).norm() <= r * (1.0 + 1e-10) + 1e-12
        }

        fn welzl_rec(
            points: &mut Vec<Point3<f64>>,
            n: usize,
            support: &mut Vec<Point3<f64>>,
        ) -> (Point3<f64>, f64) {
            if n == 0 || support.len() == 4 {
                return sphere_from(support);
            }
            let p = points[n - 1];
            let (c, r) = welzl_rec(points, n - 1, support);
            if contains(&c, r, &p) {
                return (c, r);
            }
            support.push(p);
            let result = welzl_rec(points, n - 1, support);
            support.pop();
            result
        }

        pub fn min_enclosing_sphere(points: &[Point3<f64>]) -> (Point3<f64>, f64) {
            let mut pts = points.to_vec();
            // Shuffle-free deterministic order is fine at this scale.
            let n = pts.len();
            welzl_rec(&mut pts, n, &mut Vec::new())
        }
    }

    #[test]
    fn recomputed_sphere_contains_all_voxels_and_stays_near_minimal() {
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..20 {
            let mut coll = SubmapCollection::new(test_class_table(), 0.1, 0.2);
            let id = coll.create_submap(2).unwrap();
            let s = coll.get_mut(id).unwrap();
            let mut centers = Vec::new();
            for _ in 0..100 {
                let g = Vector3::new(
                    rng.gen_range(-30..30),
                    rng.gen_range(-30..30),
                    rng.gen_range(-30..30),
                );
                observe_voxel(s, g);
                centers.push(voxel_center(&g, 0.1));
            }
            s.update_bounding_sphere();
            let sphere = s.bounding_sphere;
            for c in &centers {
                assert!(
                    (c - sphere.center).norm() <= sphere.radius + 1e-12,
                    "voxel center escaped the sphere"
                );
            }
            let (_, r_min) = welzl::min_enclosing_sphere(&centers);
            // Approximate recompute: allowed 2x the minimal radius plus the
            // half-cell inflation slack.
            assert!(
                sphere.radius <= 2.0 * r_min + 0.1,
                "radius {} vs minimal {}",
                sphere.radius,
                r_min
            );
        }
    }

    #[test]
    fn grow_only_sphere_always_contains_observed_cells() {
        let mut rng = StdRng::seed_from_u64(33);
        let mut coll = SubmapCollection::new(test_class_table(), 0.1, 0.2);
        let id = coll.create_submap(2).unwrap();
        let s = coll.get_mut(id).unwrap();
        for _ in 0..500 {
            let g = Vector3::new(
                rng.gen_range(-20..20),
                rng.gen_range(-20..20),
                rng.gen_range(-20..20),
            );
            observe_voxel(s, g);
        }
        let sphere = s.bounding_sphere;
        for (g, v) in s.tsdf.iter_voxels() {
            if v.is_observed() {
                // Sample the cell corners, not just the center.
                let c = voxel_center(&g, 0.1);
                for dx in [-0.05, 0.05] {
                    for dy in [-0.05, 0.05] {
                        for dz in [-0.05, 0.05] {
                            let p = Point3::new(c.x + dx, c.y + dy, c.z + dz);
                            assert!(sphere.contains(&p));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn lookup_point_matches_full_scan_on_overlapping_submaps() {
        let mut rng = StdRng::seed_from_u64(8);
        let mut coll = SubmapCollection::new(test_class_table(), 0.1, 0.2);
        for _ in 0..5 {
            let id = coll.create_submap(2).unwrap();
            let s = coll.get_mut(id).unwrap();
            for _ in 0..200 {
                let g = Vector3::new(
                    rng.gen_range(-10..10),
                    rng.gen_range(-10..10),
                    rng.gen_range(-10..10),
                );
                observe_voxel(s, g);
            }
        }
        for _ in 0..2000 {
            let p = Point3::new(
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
            );
            let fast: Vec<SubmapId> = coll.lookup_point(&p).iter().map(|h| h.0).collect();
            // Oracle: scan every submap without the sphere prefilter.
            let mut slow = Vec::new();
            for s in coll.iter() {
                let local = s.transform.inverse().apply(&p);
                if let Some(v) = s.tsdf.voxel_at_point(&local) {
                    if v.is_near_surface(0.2) {
                        slow.push(s.id());
                    }
                }
            }
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn carved_free_space_is_not_a_lookup_hit() {
        let mut coll = SubmapCollection::new(test_class_table(), 0.1, 0.2);
        let id = coll.create_submap(2).unwrap();
        let s = coll.get_mut(id).unwrap();
        observe_voxel(s, Vector3::new(0, 0, 0));
        // A carved voxel: observed but pinned at +truncation.
        let g = Vector3::new(4, 0, 0);
        let v = s.tsdf.voxel_mut_or_allocate(&g);
        v.distance = 0.2;
        v.weight = 5.0;
        s.grow_sphere_for_voxel(&g);
        assert!(coll.lookup_point(&Point3::new(0.05, 0.05, 0.05)).len() == 1);
        assert!(coll.lookup_point(&Point3::new(0.45, 0.05, 0.05)).is_empty());
    }

    #[test]
    fn point_outside_every_sphere_returns_nothing() {
        let mut coll = SubmapCollection::new(test_class_table(), 0.1, 0.2);
        let id = coll.create_submap(2).unwrap();
        observe_voxel(coll.get_mut(id).unwrap(), Vector3::new(0, 0, 0));
        assert!(coll.lookup_point(&Point3::new(50.0, 0.0, 0.0)).is_empty());
    }

    #[test]
    fn identity_transform_leaves_lookups_unchanged() {
        let mut coll = SubmapCollection::new(test_class_table(), 0.1, 0.2);
        let id = coll.create_submap(2).unwrap();
        observe_voxel(coll.get_mut(id).unwrap(), Vector3::new(3, 3, 3));
        let p = Point3::new(0.35, 0.35, 0.35);
        let before = coll.lookup_point(&p).len();
        coll.apply_submap_transform(id, &RigidTransform::identity())
            .unwrap();
        assert_eq!(coll.lookup_point(&p).len(), before);
        assert_eq!(before, 1);
    }

    #[test]
    fn translated_submap_answers_at_shifted_points() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut coll = SubmapCollection::new(test_class_table(), 0.1, 0.2);
        let id = coll.create_submap(2).unwrap();
        let s = coll.get_mut(id).unwrap();
        for _ in 0..100 {
            let g = Vector3::new(
                rng.gen_range(-10..10),
                rng.gen_range(-10..10),
                rng.gen_range(-10..10),
            );
            observe_voxel(s, g);
        }
        let t = Vector3::new(2.0, -1.0, 0.5);
        let mut samples = Vec::new();
        for _ in 0..500 {
            let p = Point3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            samples.push((p, coll.lookup_point(&p).len()));
        }
        coll.apply_submap_transform(id, &RigidTransform::from_translation(t))
            .unwrap();
        for (p, hits_before) in samples {
            let shifted = Point3::from(p.coords + t);
            assert_eq!(coll.lookup_point(&shifted).len(), hits_before);
        }
    }

    #[test]
    fn duplicate_remaps_instance_identity_and_leaves_source_alone() {
        let mut coll = SubmapCollection::new(test_class_table(), 0.1, 0.2);
        let id = coll.create_submap(2).unwrap();
        let s = coll.get_mut(id).unwrap();
        observe_voxel(s, Vector3::new(1, 1, 1));
        observe_voxel(s, Vector3::new(2, 1, 1));
        let copy_id = coll.duplicate_submap(id).unwrap();
        assert_ne!(copy_id, id);

        let copy = coll.get(copy_id).unwrap();
        assert_eq!(copy.labels.observed_count(), 2);
        for (_, v) in copy.labels.iter_observed() {
            assert_eq!(v.cached.unwrap().instance_id, copy_id);
            assert_eq!(v.instance_counts.get(copy_id), 1);
            assert_eq!(v.instance_counts.get(id), 0);
        }
        let src = coll.get(id).unwrap();
        for (_, v) in src.labels.iter_observed() {
            assert_eq!(v.cached.unwrap().instance_id, id);
        }
    }

    #[test]
    fn non_rigid_delta_is_rejected() {
        let mut coll = SubmapCollection::new(test_class_table(), 0.1, 0.2);
        let id = coll.create_submap(2).unwrap();
        let mut bad = RigidTransform::identity();
        bad.rotation[(1, 1)] = 2.0;
        assert!(coll.apply_submap_transform(id, &bad).is_err());
    }
}
