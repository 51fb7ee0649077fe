//! Frame ingestion: manifest parsing and grouping labeled points into
//! world-frame segments.
//!
//! A manifest is one text record per frame: `frame_id`, the 16 row-major
//! entries of world_T_sensor, and a relative path to the frame's PLY point
//! file. Floats are written with shortest round-trip formatting, so
//! write → parse reproduces poses bit-exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::math::RigidTransform;
use crate::ply::{self, LabeledPoint};
use crate::submap::ClassTable;
use crate::voxel::{ClassId, Rgb};

/// One posed, panoptically-labeled input frame. Point positions are in the
/// sensor frame, exactly as stored on disk.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub frame_id: u64,
    pub world_t_sensor: RigidTransform,
    pub points: Vec<LabeledPoint>,
}

/// All points of one frame sharing a (class, frame instance) pair, mapped to
/// the world frame — the unit of tracking and integration.
#[derive(Debug, Clone)]
pub struct Segment {
    pub points: Vec<Point3<f64>>,
    pub colors: Vec<Rgb>,
    pub semantic_class: ClassId,
    pub frame_instance_id: u16,
    pub sensor_origin: Point3<f64>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Serializes manifest records for the given (frame_id, pose, relative path)
/// triples.
pub fn manifest_to_string(records: &[(u64, RigidTransform, String)]) -> String {
    let mut out = String::new();
    for (frame_id, pose, rel_path) in records {
        write!(out, "{frame_id}").unwrap();
        for v in pose.to_matrix_row_major() {
            write!(out, " {v}").unwrap();
        }
        writeln!(out, " {rel_path}").unwrap();
    }
    out
}

/// Lazily yields frames in manifest order, loading each point file on demand.
pub struct FrameStream {
    base_dir: PathBuf,
    manifest_path: PathBuf,
    records: std::vec::IntoIter<(usize, String)>,
    class_table: ClassTable,
}

impl FrameStream {
    /// Opens a manifest; `class_table` is used to validate per-point classes.
    pub fn open(manifest_path: &Path, class_table: &ClassTable) -> Result<FrameStream> {
        let text =
            std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let records: Vec<(usize, String)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.to_string()))
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .collect();
        Ok(FrameStream {
            base_dir: manifest_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .to_path_buf(),
            manifest_path: manifest_path.to_path_buf(),
            records: records.into_iter(),
            class_table: class_table.clone(),
        })
    }

    pub fn len_remaining(&self) -> usize {
        self.records.len()
    }

    fn parse_record(&self, line_no: usize, line: &str) -> Result<FrameInput> {
        let parse_err = |message: String| Error::ManifestParse {
            path: self.manifest_path.clone(),
            line: line_no,
            message,
        };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 18 {
            return Err(parse_err(format!(
                "expected 18 fields (frame_id, 16 pose entries, path), got {}",
                tokens.len()
            )));
        }
        let frame_id: u64 = tokens[0]
            .parse()
            .map_err(|e| parse_err(format!("bad frame id: {e}")))?;
        let mut m = [0f64; 16];
        for (i, v) in m.iter_mut().enumerate() {
            *v = tokens[1 + i]
                .parse()
                .map_err(|e| parse_err(format!("bad pose entry {i}: {e}")))?;
        }
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(parse_err("pose bottom row must be 0 0 0 1".into()));
        }
        let pose = RigidTransform::from_matrix_row_major(&m);
        pose.validate_rigid(1e-4).map_err(|e| Error::FrameInput {
            frame_id,
            message: e.to_string(),
        })?;

        let point_path = self.base_dir.join(tokens[17]);
        let points = ply::read_labeled_points(&point_path)?;
        if points.is_empty() {
            return Err(Error::FrameInput {
                frame_id,
                message: "frame has no points".into(),
            });
        }
        for p in &points {
            if !self.class_table.contains(p.semantic_id) {
                return Err(Error::FrameInput {
                    frame_id,
                    message: Error::UnknownClass(p.semantic_id).to_string(),
                });
            }
        }
        Ok(FrameInput {
            frame_id,
            world_t_sensor: pose,
            points,
        })
    }
}

impl Iterator for FrameStream {
    type Item = Result<FrameInput>;

    fn next(&mut self) -> Option<Self::Item> {
        let (line_no, line) = self.records.next()?;
        Some(self.parse_record(line_no, &line))
    }
}

/// Groups a frame's points by (semantic class, frame instance id) and maps
/// them into the world frame. Segments come out sorted by that key.
pub fn frame_to_segments(frame: &FrameInput) -> Vec<Segment> {
    let mut groups: BTreeMap<(ClassId, u16), (Vec<Point3<f64>>, Vec<Rgb>)> = BTreeMap::new();
    for p in &frame.points {
        let world = frame.world_t_sensor.apply(&Point3::new(
            p.position[0] as f64,
            p.position[1] as f64,
            p.position[2] as f64,
        ));
        let entry = groups
            .entry((p.semantic_id, p.instance_id))
            .or_default();
        entry.0.push(world);
        entry.1.push(p.color);
    }
    let origin = Point3::from(frame.world_t_sensor.translation);
    groups
        .into_iter()
        .map(|((class, instance), (points, colors))| Segment {
            points,
            colors,
            semantic_class: class,
            frame_instance_id: instance,
            sensor_origin: origin,
        })
        .collect()
}
