//! Binary little-endian PLY reader/writer for labeled points and meshes.
//!
//! Vertex schema (19 bytes): x,y,z float32 · red,green,blue uint8 ·
//! semantic_id,instance_id uint16. Meshes add a face element of uchar-counted
//! int index lists (triangles only). The reader is strict about this schema
//! so round trips are bit-exact by construction.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::voxel::Rgb;

/// One labeled vertex/point record as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub position: [f32; 3],
    pub color: Rgb,
    pub semantic_id: u16,
    pub instance_id: u16,
}

const VERTEX_PROPERTIES: [(&str, &str); 8] = [
    ("float", "x"),
    ("float", "y"),
    ("float", "z"),
    ("uchar", "red"),
    ("uchar", "green"),
    ("uchar", "blue"),
    ("ushort", "semantic_id"),
    ("ushort", "instance_id"),
];

fn ply_err(path: &Path, message: impl Into<String>) -> Error {
    Error::PlyFormat {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn write_header(w: &mut impl Write, n_vertices: usize, n_faces: Option<usize>) -> std::io::Result<()> {
    write!(w, "ply\nformat binary_little_endian 1.0\n")?;
    write!(w, "element vertex {n_vertices}\n")?;
    for (ty, name) in VERTEX_PROPERTIES {
        write!(w, "property {ty} {name}\n")?;
    }
    if let Some(n) = n_faces {
        write!(w, "element face {n}\n")?;
        write!(w, "property list uchar int vertex_indices\n")?;
    }
    write!(w, "end_header\n")
}

fn write_vertices(w: &mut impl Write, points: &[LabeledPoint]) -> std::io::Result<()> {
    for p in points {
        for c in p.position {
            w.write_f32::<LittleEndian>(c)?;
        }
        w.write_all(&[p.color.r, p.color.g, p.color.b])?;
        w.write_u16::<LittleEndian>(p.semantic_id)?;
        w.write_u16::<LittleEndian>(p.instance_id)?;
    }
    Ok(())
}

pub fn write_labeled_points(path: &Path, points: &[LabeledPoint]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    (|| {
        write_header(&mut w, points.len(), None)?;
        write_vertices(&mut w, points)?;
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

pub fn write_labeled_mesh(
    path: &Path,
    vertices: &[LabeledPoint],
    triangles: &[[u32; 3]],
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    (|| {
        write_header(&mut w, vertices.len(), Some(triangles.len()))?;
        write_vertices(&mut w, vertices)?;
        for t in triangles {
            w.write_u8(3)?;
            for &i in t {
                w.write_i32::<LittleEndian>(i as i32)?;
            }
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

struct Header {
    n_vertices: usize,
    n_faces: Option<usize>,
}

/// Reads and validates the ASCII header, leaving `r` at the binary payload.
fn read_header(r: &mut impl Read, path: &Path) -> Result<Header> {
    // Headers are tiny; read byte-wise until "end_header\n".
    let mut text = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte).map_err(|e| Error::io(path, e))? == 0 {
            return Err(ply_err(path, "unterminated header"));
        }
        text.push(byte[0] as char);
        if text.ends_with("end_header\n") {
            break;
        }
        if text.len() > 4096 {
            return Err(ply_err(path, "header too large"));
        }
    }
    let mut lines = text.lines().filter(|l| !l.starts_with("comment"));
    if lines.next() != Some("ply") {
        return Err(ply_err(path, "missing ply magic"));
    }
    if lines.next() != Some("format binary_little_endian 1.0") {
        return Err(ply_err(path, "expected format binary_little_endian 1.0"));
    }
    let vertex_line = lines.next().unwrap_or("");
    let n_vertices: usize = vertex_line
        .strip_prefix("element vertex ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| ply_err(path, format!("expected vertex element, got {vertex_line:?}")))?;
    for (ty, name) in VERTEX_PROPERTIES {
        let line = lines.next().unwrap_or("");
        if line != format!("property {ty} {name}") {
            return Err(ply_err(
                path,
                format!("expected property {ty} {name}, got {line:?}"),
            ));
        }
    }
    let mut n_faces = None;
    match lines.next() {
        Some("end_header") => {}
        Some(face_line) => {
            let n: usize = face_line
                .strip_prefix("element face ")
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| ply_err(path, format!("unexpected line {face_line:?}")))?;
            if lines.next() != Some("property list uchar int vertex_indices") {
                return Err(ply_err(path, "unexpected face property layout"));
            }
            if lines.next() != Some("end_header") {
                return Err(ply_err(path, "trailing header content"));
            }
            n_faces = Some(n);
        }
        None => return Err(ply_err(path, "truncated header")),
    }
    Ok(Header { n_vertices, n_faces })
}

fn read_vertices(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<LabeledPoint>> {
    let truncated = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ply_err(path, "point payload shorter than header promises")
        } else {
            Error::io(path, e)
        }
    };
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let mut position = [0f32; 3];
        for c in &mut position {
            *c = r.read_f32::<LittleEndian>().map_err(truncated)?;
            if !c.is_finite() {
                return Err(ply_err(path, "non-finite vertex coordinate"));
            }
        }
        let mut rgb = [0u8; 3];
        r.read_exact(&mut rgb).map_err(truncated)?;
        let semantic_id = r.read_u16::<LittleEndian>().map_err(truncated)?;
        let instance_id = r.read_u16::<LittleEndian>().map_err(truncated)?;
        points.push(LabeledPoint {
            position,
            color: Rgb::new(rgb[0], rgb[1], rgb[2]),
            semantic_id,
            instance_id,
        });
    }
    Ok(points)
}

pub fn read_labeled_points(path: &Path) -> Result<Vec<LabeledPoint>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let header = read_header(&mut r, path)?;
    if header.n_faces.is_some() {
        return Err(ply_err(path, "expected a point cloud, found a mesh"));
    }
    read_vertices(&mut r, header.n_vertices, path)
}

pub fn read_labeled_mesh(path: &Path) -> Result<(Vec<LabeledPoint>, Vec<[u32; 3]>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let header = read_header(&mut r, path)?;
    let vertices = read_vertices(&mut r, header.n_vertices, path)?;
    let n_faces = header.n_faces.unwrap_or(0);
    let truncated = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ply_err(path, "face payload shorter than header promises")
        } else {
            Error::io(path, e)
        }
    };
    let mut triangles = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let count = r.read_u8().map_err(truncated)?;
        if count != 3 {
            return Err(ply_err(path, format!("non-triangle face of {count} indices")));
        }
        let mut tri = [0u32; 3];
        for i in &mut tri {
            let idx = r.read_i32::<LittleEndian>().map_err(truncated)?;
            if idx < 0 || idx as usize >= vertices.len() {
                return Err(ply_err(path, format!("face index {idx} out of range")));
            }
            *i = idx as u32;
        }
        triangles.push(tri);
    }
    Ok((vertices, triangles))
}
