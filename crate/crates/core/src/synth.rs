//! Synthetic labeled-scene generator: analytic geometry (ground plane,
//! boxes, spheres) observed by an orbiting sensor, with optional panoptic
//! label corruption and exact per-point ground truth.
//!
//! Points are produced by sampling a target on an entity surface
//! (area-weighted) and casting a ray from the sensor to it; the *first* hit
//! along the ray is emitted, so occlusion behaves like a real range sensor.
//! Thing instance ids are re-permuted every frame, which is what forces the
//! tracker to associate spatially rather than by id.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Point3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::PanopticGroundTruth;
use crate::ingest::manifest_to_string;
use crate::math::RigidTransform;
use crate::ply::{self, LabeledPoint};
use crate::submap::{ClassDef, ClassTable};
use crate::voxel::{ClassId, PanopticLabel, Rgb};

#[derive(Debug, Clone, Copy)]
pub enum Shape {
    Box {
        center: Point3<f64>,
        half_extents: Vector3<f64>,
    },
    Sphere {
        center: Point3<f64>,
        radius: f64,
    },
}

#[derive(Debug, Clone)]
pub struct ThingSpec {
    pub class_id: ClassId,
    pub color: Rgb,
    pub shape: Shape,
}

#[derive(Debug, Clone)]
pub struct GroundPlaneSpec {
    pub class_id: ClassId,
    pub color: Rgb,
    /// Square half side length; the plane spans [-h, h]² at height `z`.
    pub half_extent: f64,
    pub z: f64,
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub class_table: ClassTable,
    pub ground: Option<GroundPlaneSpec>,
    pub things: Vec<ThingSpec>,
    pub frames: usize,
    pub points_per_frame: usize,
    pub orbit_radius: f64,
    pub orbit_height: f64,
    pub orbit_height_amplitude: f64,
    /// Probability of flipping a point's panoptic label to a random other
    /// entity's label.
    pub label_noise: f64,
    pub seed: u64,
}

/// Everything a scene run needs plus the exact ground truth.
#[derive(Debug)]
pub struct SyntheticScene {
    pub manifest_path: PathBuf,
    pub class_table_path: PathBuf,
    pub class_table: ClassTable,
    pub ground_truth: PanopticGroundTruth,
    pub total_points: usize,
}

struct Entity {
    class_id: ClassId,
    color: Rgb,
    /// 0 for the stuff ground plane, 1.. for things.
    gt_instance: u16,
    geom: Geom,
}

enum Geom {
    Plane { z: f64, half: f64 },
    Box { min: Point3<f64>, max: Point3<f64> },
    Sphere { center: Point3<f64>, radius: f64 },
}

impl Geom {
    fn area(&self) -> f64 {
        match self {
            Geom::Plane { half, .. } => (2.0 * half) * (2.0 * half),
            Geom::Box { min, max } => {
                let e = max - min;
                2.0 * (e.x * e.y + e.y * e.z + e.x * e.z)
            }
            Geom::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
        }
    }

    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> Point3<f64> {
        match self {
            Geom::Plane { z, half } => Point3::new(
                rng.gen_range(-half..*half),
                rng.gen_range(-half..*half),
                *z,
            ),
            Geom::Box { min, max } => {
                let e = max - min;
                let faces = [e.y * e.z, e.y * e.z, e.x * e.z, e.x * e.z, e.x * e.y, e.x * e.y];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.gen_range(0.0..total);
                let mut face = 0;
                for (i, a) in faces.iter().enumerate() {
                    if pick < *a {
                        face = i;
                        break;
                    }
                    pick -= a;
                }
                let u = rng.gen_range(0.0..1.0);
                let v = rng.gen_range(0.0..1.0);
                match face {
                    0 => Point3::new(min.x, min.y + u * e.y, min.z + v * e.z),
                    1 => Point3::new(max.x, min.y + u * e.y, min.z + v * e.z),
                    2 => Point3::new(min.x + u * e.x, min.y, min.z + v * e.z),
                    3 => Point3::new(min.x + u * e.x, max.y, min.z + v * e.z),
                    4 => Point3::new(min.x + u * e.x, min.y + v * e.y, min.z),
                    _ => Point3::new(min.x + u * e.x, min.y + v * e.y, max.z),
                }
            }
            Geom::Sphere { center, radius } => {
                // Archimedes: z uniform, azimuth uniform → uniform on the sphere.
                let z: f64 = rng.gen_range(-1.0..1.0);
                let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let s = (1.0 - z * z).sqrt();
                Point3::new(
                    center.x + radius * s * phi.cos(),
                    center.y + radius * s * phi.sin(),
                    center.z + radius * z,
                )
            }
        }
    }

    /// Smallest ray parameter t > eps where the ray hits this surface.
    fn raycast(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        const EPS: f64 = 1e-9;
        match self {
            Geom::Plane { z, half } => {
                if dir.z.abs() < 1e-12 {
                    return None;
                }
                let t = (z - origin.z) / dir.z;
                if t <= EPS {
                    return None;
                }
                let p = origin + dir * t;
                (p.x.abs() <= *half && p.y.abs() <= *half).then_some(t)
            }
            Geom::Box { min, max } => {
                let mut t_enter = f64::NEG_INFINITY;
                let mut t_exit = f64::INFINITY;
                for axis in 0..3 {
                    if dir[axis].abs() < 1e-12 {
                        if origin[axis] < min[axis] || origin[axis] > max[axis] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[axis];
                    let (t0, t1) = {
                        let a = (min[axis] - origin[axis]) * inv;
                        let b = (max[axis] - origin[axis]) * inv;
                        if a < b { (a, b) } else { (b, a) }
                    };
                    t_enter = t_enter.max(t0);
                    t_exit = t_exit.min(t1);
                    if t_enter > t_exit {
                        return None;
                    }
                }
                (t_enter > EPS).then_some(t_enter)
            }
            Geom::Sphere { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = -b - sq;
                if t > EPS {
                    Some(t)
                } else {
                    let t2 = -b + sq;
                    (t2 > EPS).then_some(t2)
                }
            }
        }
    }

    fn center(&self) -> Point3<f64> {
        match self {
            Geom::Plane { z, .. } => Point3::new(0.0, 0.0, *z),
            Geom::Box { min, max } => nalgebra::center(min, max),
            Geom::Sphere { center, .. } => *center,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let entity_count = self.things.len() + usize::from(self.ground.is_some());
        if entity_count == 0 {
            return Err(Error::DegenerateScene("no entities in scene".into()));
        }
        if self.frames == 0 || self.points_per_frame == 0 {
            return Err(Error::DegenerateScene(
                "frames and points_per_frame must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::DegenerateScene(format!(
                "label noise {} outside [0,1)",
                self.label_noise
            )));
        }
        if self.orbit_radius <= 0.0 {
            return Err(Error::DegenerateScene("orbit radius must be positive".into()));
        }
        for t in &self.things {
            if !self.class_table.is_thing(t.class_id).unwrap_or(false) {
                return Err(Error::DegenerateScene(format!(
                    "thing entity uses class {} which is not a thing class",
                    t.class_id
                )));
            }
        }
        if let Some(g) = &self.ground {
            if self.class_table.is_thing(g.class_id).unwrap_or(true) {
                return Err(Error::DegenerateScene(format!(
                    "ground plane uses class {} which is not a stuff class",
                    g.class_id
                )));
            }
        }
        Ok(())
    }

    fn entities(&self) -> Vec<Entity> {
        let mut out = Vec::new();
        if let Some(g) = &self.ground {
            out.push(Entity {
                class_id: g.class_id,
                color: g.color,
                gt_instance: 0,
                geom: Geom::Plane {
                    z: g.z,
                    half: g.half_extent,
                },
            });
        }
        for (i, t) in self.things.iter().enumerate() {
            let geom = match t.shape {
                Shape::Box {
                    center,
                    half_extents,
                } => Geom::Box {
                    min: center - half_extents,
                    max: center + half_extents,
                },
                Shape::Sphere { center, radius } => Geom::Sphere { center, radius },
            };
            out.push(Entity {
                class_id: t.class_id,
                color: t.color,
                gt_instance: (i + 1) as u16,
                geom,
            });
        }
        out
    }
}

/// Right-handed sensor pose at `position` with +z looking at `target`.
fn look_at_pose(position: Point3<f64>, target: Point3<f64>) -> RigidTransform {
    let forward = (target - position).normalize();
    let up = if forward.cross(&Vector3::z()).norm() > 1e-6 {
        Vector3::z()
    } else {
        Vector3::y()
    };
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right).normalize();
    let rotation = Matrix3::from_columns(&[right, down, forward]);
    RigidTransform::from_parts(rotation, position.coords)
}

/// Generates the scene under `out_dir`: `classes.txt`, `manifest.txt`, and
/// one PLY per frame under `points/`. Deterministic for a fixed spec.
pub fn generate_synthetic_scene(spec: &SceneSpec, out_dir: &Path) -> Result<SyntheticScene> {
    spec.validate()?;
    let points_dir = out_dir.join("points");
    std::fs::create_dir_all(&points_dir).map_err(|e| Error::io(&points_dir, e))?;

    let class_table_path = out_dir.join("classes.txt");
    spec.class_table.save(&class_table_path)?;

    let entities = spec.entities();
    let areas: Vec<f64> = entities.iter().map(|e| e.geom.area()).collect();
    let total_area: f64 = areas.iter().sum();
    let focus = {
        let sum: Vector3<f64> = entities.iter().map(|e| e.geom.center().coords).sum();
        Point3::from(sum / entities.len() as f64)
    };
    let n_things = spec.things.len();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.frames);
    let mut gt_points = Vec::with_capacity(spec.frames * spec.points_per_frame);
    let mut gt_labels = Vec::with_capacity(spec.frames * spec.points_per_frame);

    for frame_idx in 0..spec.frames {
        let theta = std::f64::consts::TAU * frame_idx as f64 / spec.frames as f64;
        let position = Point3::new(
            spec.orbit_radius * theta.cos(),
            spec.orbit_radius * theta.sin(),
            spec.orbit_height + spec.orbit_height_amplitude * (2.0 * theta).sin(),
        );
        let pose = look_at_pose(position, focus);
        let pose_inv = pose.inverse();

        // Fresh thing-instance permutation each frame: gt instance k (1-based)
        // appears as frame instance perm[k-1].
        let mut perm: Vec<u16> = (1..=n_things as u16).collect();
        perm.shuffle(&mut rng);
        let frame_instance_of = |entity: &Entity| -> u16 {
            if entity.gt_instance == 0 {
                0
            } else {
                perm[(entity.gt_instance - 1) as usize]
            }
        };

        let mut points = Vec::with_capacity(spec.points_per_frame);
        let mut emitted = 0;
        let mut attempts = 0usize;
        while emitted < spec.points_per_frame {
            attempts += 1;
            if attempts > spec.points_per_frame * 50 {
                return Err(Error::DegenerateScene(
                    "sensor cannot see the scene (raycast keeps missing)".into(),
                ));
            }
            // Area-weighted target, then first hit toward it.
            let mut pick = rng.gen_range(0.0..total_area);
            let mut target_entity = 0;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    target_entity = i;
                    break;
                }
                pick -= a;
            }
            let target = entities[target_entity].geom.sample_surface(&mut rng);
            let to_target = target - position;
            if to_target.norm() < 1e-9 {
                continue;
            }
            let dir = to_target.normalize();
            let mut hit: Option<(f64, usize)> = None;
            for (i, e) in entities.iter().enumerate() {
                if let Some(t) = e.geom.raycast(&position, &dir) {
                    if hit.map_or(true, |(best, _)| t < best) {
                        hit = Some((t, i));
                    }
                }
            }
            let Some((t, hit_entity)) = hit else { continue };
            let p_world = position + dir * t;

            // Label corruption: flip to a uniformly chosen *other* entity.
            let label_entity = if spec.label_noise > 0.0
                && entities.len() > 1
                && rng.gen_bool(spec.label_noise)
            {
                let mut k = rng.gen_range(0..entities.len() - 1);
                if k >= hit_entity {
                    k += 1;
                }
                k
            } else {
                hit_entity
            };

            let p_sensor = pose_inv.apply(&p_world);
            let stored = [p_sensor.x as f32, p_sensor.y as f32, p_sensor.z as f32];
            points.push(LabeledPoint {
                position: stored,
                color: entities[hit_entity].color,
                semantic_id: entities[label_entity].class_id,
                instance_id: frame_instance_of(&entities[label_entity]),
            });
            // Ground truth mirrors exactly what ingestion will reconstruct:
            // the f32-rounded sensor-frame point mapped back to world.
            let p_rt = pose.apply(&Point3::new(
                stored[0] as f64,
                stored[1] as f64,
                stored[2] as f64,
            ));
            gt_points.push(p_rt);
            gt_labels.push(PanopticLabel {
                class_id: entities[hit_entity].class_id,
                instance_id: entities[hit_entity].gt_instance,
            });
            emitted += 1;
        }

        let rel = format!("points/frame_{frame_idx:05}.ply");
        ply::write_labeled_points(&out_dir.join(&rel), &points)?;
        records.push((frame_idx as u64, pose, rel));
    }

    let manifest_path = out_dir.join("manifest.txt");
    std::fs::write(&manifest_path, manifest_to_string(&records))
        .map_err(|e| Error::io(&manifest_path, e))?;

    let total_points = gt_points.len();
    Ok(SyntheticScene {
        manifest_path,
        class_table_path,
        class_table: spec.class_table.clone(),
        ground_truth: PanopticGroundTruth {
            points: gt_points,
            labels: gt_labels,
        },
        total_points,
    })
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Rgb {
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 % 6 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    Rgb::new(
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    )
}

/// Well-separated palette for thing entities.
pub fn instance_palette(i: usize) -> Rgb {
    hsv_to_rgb((i as f64 * 137.508) % 360.0, 0.85, 0.95)
}

/// The class table every built-in preset uses: stuff `floor`, things
/// `chair`, `table`, `ball`.
pub fn standard_class_table() -> ClassTable {
    ClassTable::from_defs([
        ClassDef {
            class_id: 1,
            name: "floor".into(),
            is_thing: false,
            color: Rgb::new(128, 128, 128),
        },
        ClassDef {
            class_id: 2,
            name: "chair".into(),
            is_thing: true,
            color: Rgb::new(220, 60, 60),
        },
        ClassDef {
            class_id: 3,
            name: "table".into(),
            is_thing: true,
            color: Rgb::new(60, 60, 220),
        },
        ClassDef {
            class_id: 4,
            name: "ball".into(),
            is_thing: true,
            color: Rgb::new(60, 220, 60),
        },
    ])
}

impl SceneSpec {
    /// A 3.6 m × 3.6 m ground plane with `n_boxes` boxes (≤ 25) on a
    /// jittered grid — the standard tracked-and-refined test scene. Grid
    /// spacing is 0.7 m and box reach stays below 0.29 m per axis, so boxes
    /// never touch each other and always sit inside the plane.
    pub fn cluttered(n_boxes: usize, seed: u64) -> Result<SceneSpec> {
        if n_boxes == 0 || n_boxes > 25 {
            return Err(Error::DegenerateScene(format!(
                "cluttered scene supports 1..=25 boxes, asked for {n_boxes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9));
        let mut cells: Vec<(f64, f64)> = Vec::new();
        for ix in 0..5 {
            for iy in 0..5 {
                cells.push((-1.4 + 0.7 * ix as f64, -1.4 + 0.7 * iy as f64));
            }
        }
        cells.shuffle(&mut rng);
        let mut things = Vec::new();
        for (i, (cx, cy)) in cells.into_iter().take(n_boxes).enumerate() {
            let hx = rng.gen_range(0.14..0.24);
            let hy = rng.gen_range(0.14..0.24);
            let hz = rng.gen_range(0.14..0.26);
            let jx = rng.gen_range(-0.05..0.05);
            let jy = rng.gen_range(-0.05..0.05);
            things.push(ThingSpec {
                class_id: if i % 2 == 0 { 2 } else { 3 },
                color: instance_palette(i),
                shape: Shape::Box {
                    center: Point3::new(cx + jx, cy + jy, hz),
                    half_extents: Vector3::new(hx, hy, hz),
                },
            });
        }
        Ok(SceneSpec {
            class_table: standard_class_table(),
            ground: Some(GroundPlaneSpec {
                class_id: 1,
                color: Rgb::new(128, 128, 128),
                half_extent: 1.8,
                z: 0.0,
            }),
            things,
            frames: 50,
            points_per_frame: 8000,
            orbit_radius: 3.0,
            orbit_height: 1.6,
            orbit_height_amplitude: 0.5,
            label_noise: 0.0,
            seed,
        })
    }

    /// An analytic sphere (r = 0.5 m) and one box, no ground — the geometry
    /// reconstruction scene.
    pub fn sphere_and_box(seed: u64) -> SceneSpec {
        SceneSpec {
            class_table: standard_class_table(),
            ground: None,
            things: vec![
                ThingSpec {
                    class_id: 4,
                    color: instance_palette(0),
                    shape: Shape::Sphere {
                        center: Point3::new(-0.8, 0.0, 0.6),
                        radius: 0.5,
                    },
                },
                ThingSpec {
                    class_id: 2,
                    color: instance_palette(1),
                    shape: Shape::Box {
                        center: Point3::new(0.8, 0.0, 0.35),
                        half_extents: Vector3::new(0.3, 0.25, 0.35),
                    },
                },
            ],
            frames: 40,
            points_per_frame: 5000,
            orbit_radius: 3.0,
            orbit_height: 0.8,
            orbit_height_amplitude: 0.6,
            label_noise: 0.0,
            seed,
        }
    }
}
