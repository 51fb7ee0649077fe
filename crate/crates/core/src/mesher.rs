//! Triangle mesh extraction from TSDF submaps via marching cubes, with
//! per-vertex color and panoptic label, plus scene-level PLY export.
//!
//! Cells are the cubes spanned by 2×2×2 neighborhoods of voxel centers. A
//! cell is meshed only when all 8 corners carry at least `min_weight` of
//! integration weight, so never-observed space stays open. Vertices on
//! shared cell edges are welded, and triangles are wound so normals point
//! toward positive distance (out of the surface).

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use crate::block::{global_from_block_local, local_from_linear, voxel_center, DetState};
use crate::error::Result;
use crate::mc_tables::{EDGE_CORNERS, EDGE_TABLE, TRIANGLE_TABLE};
use crate::ply::{self, LabeledPoint};
use crate::submap::{Submap, SubmapCollection};
use crate::voxel::{PanopticLabel, Rgb, SubmapId};

/// Corners below this weight make their cells ineligible for meshing.
pub const DEFAULT_MIN_WEIGHT: f64 = 1e-4;

/// Grid offsets of the 8 cell corners, in case-table order.
const CORNER_OFFSETS: [Vector3<i32>; 8] = [
    Vector3::new(0, 0, 0),
    Vector3::new(1, 0, 0),
    Vector3::new(1, 1, 0),
    Vector3::new(0, 1, 0),
    Vector3::new(0, 0, 1),
    Vector3::new(1, 0, 1),
    Vector3::new(1, 1, 1),
    Vector3::new(0, 1, 1),
];

/// For each cell edge: (corner holding the smaller coordinate, axis). Keys
/// vertices so neighboring cells weld to the identical vertex.
const EDGE_ORIGIN_AXIS: [(usize, usize); 12] = [
    (0, 0),
    (1, 1),
    (3, 0),
    (0, 1),
    (4, 0),
    (5, 1),
    (7, 0),
    (4, 1),
    (0, 2),
    (1, 2),
    (2, 2),
    (3, 2),
];

/// A triangle mesh with one color and one panoptic label per vertex.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledMesh {
    /// World-frame vertex positions.
    pub vertices: Vec<Point3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub colors: Vec<Rgb>,
    pub labels: Vec<PanopticLabel>,
}

impl LabeledMesh {
    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

/// Marches over the submap's TSDF and extracts the zero isosurface.
/// Vertex colors interpolate the corner voxels' fused colors; every vertex
/// carries the submap's panoptic label. Output order is a deterministic
/// function of the layer contents.
pub fn extract_submap_mesh(submap: &Submap, min_weight: f64) -> LabeledMesh {
    let layer = &submap.tsdf;
    let vs = layer.voxel_size();
    let mut mesh = LabeledMesh::default();
    let label = PanopticLabel {
        class_id: submap.class_id,
        instance_id: submap.id(),
    };
    // Welded vertex index per canonical edge (origin voxel, axis).
    let mut edge_vertices: HashMap<(i32, i32, i32, usize), u32, DetState> = HashMap::default();

    for key in layer.sorted_block_indices() {
        let block = layer.block(&key).unwrap();
        for (linear, base) in block.iter() {
            if base.weight < min_weight {
                continue;
            }
            let g = global_from_block_local(&key, &local_from_linear(linear));

            let mut distances = [0.0f64; 8];
            let mut colors = [Rgb::default(); 8];
            let mut eligible = true;
            for (i, off) in CORNER_OFFSETS.iter().enumerate() {
                match layer.voxel(&(g + off)) {
                    Some(v) if v.weight >= min_weight => {
                        distances[i] = v.distance;
                        colors[i] = v.color;
                    }
                    _ => {
                        eligible = false;
                        break;
                    }
                }
            }
            if !eligible {
                continue;
            }

            let mut config = 0usize;
            for (i, d) in distances.iter().enumerate() {
                if *d < 0.0 {
                    config |= 1 << i;
                }
            }
            if config == 0 || config == 255 {
                continue;
            }

            // One welded vertex per crossed edge.
            let mut cell_vertices = [0u32; 12];
            for (edge, &(origin_corner, axis)) in EDGE_ORIGIN_AXIS.iter().enumerate() {
                if EDGE_TABLE[config] & (1 << edge) == 0 {
                    continue;
                }
                let origin = g + CORNER_OFFSETS[origin_corner];
                let entry = edge_vertices
                    .entry((origin.x, origin.y, origin.z, axis))
                    .or_insert_with(|| {
                        let [ca, cb] = EDGE_CORNERS[edge];
                        // Interpolate from the canonical (origin → +axis)
                        // orientation so both adjacent cells agree exactly.
                        let (d0, d1, c0, c1) = if CORNER_OFFSETS[ca] == origin - g {
                            (distances[ca], distances[cb], colors[ca], colors[cb])
                        } else {
                            (distances[cb], distances[ca], colors[cb], colors[ca])
                        };
                        let t = d0 / (d0 - d1);
                        let mut p = voxel_center(&origin, vs);
                        p[axis] += t * vs;
                        let lerp = |a: u8, b: u8| {
                            (a as f64 + t * (b as f64 - a as f64)).round() as u8
                        };
                        mesh.vertices.push(submap.transform.apply(&p));
                        mesh.colors.push(Rgb::new(
                            lerp(c0.r, c1.r),
                            lerp(c0.g, c1.g),
                            lerp(c0.b, c1.b),
                        ));
                        mesh.labels.push(label);
                        (mesh.vertices.len() - 1) as u32
                    });
                cell_vertices[edge] = *entry;
            }

            // Case-table triangles are wound toward negative distance; swap
            // to face the positive (outside) direction.
            let row = &TRIANGLE_TABLE[config];
            for tri in row.chunks(3) {
                if tri[0] < 0 {
                    break;
                }
                mesh.triangles.push([
                    cell_vertices[tri[0] as usize],
                    cell_vertices[tri[2] as usize],
                    cell_vertices[tri[1] as usize],
                ]);
            }
        }
    }
    mesh
}

/// Vertex color source for scene export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshColorMode {
    /// Fused TSDF colors.
    Color,
    /// Class-table display color of the vertex's semantic class.
    Semantic,
    /// Deterministic per-submap palette color.
    Instance,
}

/// Evenly scattered hue wheel keyed by submap id.
pub fn instance_palette(id: SubmapId) -> Rgb {
    let hue = (id as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let (s, v) = (0.65f64, 0.95f64);
    let c = v * s;
    let x = c * (1.0 - (hue.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hue as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let ch = |f: f64| ((f + m) * 255.0).round() as u8;
    Rgb::new(ch(r), ch(g), ch(b))
}

/// Extracts every submap's mesh (in parallel) and writes one concatenated
/// PLY file, submaps in ascending id order. Returns (vertices, triangles)
/// written. An empty collection produces a valid empty mesh file.
pub fn export_scene_mesh(
    collection: &SubmapCollection,
    mode: MeshColorMode,
    path: &Path,
    min_weight: f64,
) -> Result<(usize, usize)> {
    let ids = collection.ids();
    let meshes: Vec<LabeledMesh> = ids
        .par_iter()
        .map(|&id| extract_submap_mesh(collection.get(id).unwrap(), min_weight))
        .collect();

    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for mesh in &meshes {
        let offset = vertices.len() as u32;
        for ((p, color), label) in mesh.vertices.iter().zip(&mesh.colors).zip(&mesh.labels) {
            let color = match mode {
                MeshColorMode::Color => *color,
                MeshColorMode::Semantic => collection
                    .class_table
                    .get(label.class_id)
                    .map_or_else(Rgb::default, |d| d.color),
                MeshColorMode::Instance => instance_palette(label.instance_id),
            };
            vertices.push(LabeledPoint {
                position: [p.x as f32, p.y as f32, p.z as f32],
                color,
                semantic_id: label.class_id,
                instance_id: label.instance_id,
            });
        }
        for t in &mesh.triangles {
            triangles.push([t[0] + offset, t[1] + offset, t[2] + offset]);
        }
    }
    ply::write_labeled_mesh(path, &vertices, &triangles)?;
    Ok((vertices.len(), triangles.len()))
}
