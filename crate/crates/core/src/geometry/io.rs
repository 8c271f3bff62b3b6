//! Mesh and point-cloud file formats: ASCII OBJ and binary little-endian PLY.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Point3, Vector3};

use super::mesh::TriangleMesh;
use crate::error::{Error, Result};

pub fn write_obj<W: Write>(mesh: &TriangleMesh, mut w: W) -> Result<()> {
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for f in &mesh.faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

pub fn read_obj<R: Read>(r: R) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Format(format!("obj line {}: {e}", lineno + 1)))?;
                if c.len() != 3 {
                    return Err(Error::Format(format!(
                        "obj line {}: short vertex",
                        lineno + 1
                    )));
                }
                vertices.push(Point3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|s| {
                        s.split('/')
                            .next()
                            .unwrap_or("")
                            .parse::<u32>()
                            .ok()
                            .filter(|&i| i >= 1)
                            .map(|i| i - 1)
                    })
                    .collect::<Option<_>>()
                    .ok_or_else(|| Error::Format(format!("obj line {}: bad face", lineno + 1)))?;
                if idx.len() < 3 {
                    return Err(Error::Format(format!(
                        "obj line {}: short face",
                        lineno + 1
                    )));
                }
                // fan-triangulate polygons
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces)
}

pub fn write_ply<W: Write>(mesh: &TriangleMesh, mut w: W) -> Result<()> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.faces.len()
    )?;
    for v in &mesh.vertices {
        for c in [v.x, v.y, v.z] {
            w.write_f64::<LittleEndian>(c)?;
        }
    }
    for f in &mesh.faces {
        w.write_u8(3)?;
        for &i in f {
            w.write_i32::<LittleEndian>(i as i32)?;
        }
    }
    Ok(())
}

/// Point cloud with a per-point vector attribute (`vx vy vz`), e.g. a motion field.
pub fn write_vector_ply<W: Write>(
    points: &[Point3<f64>],
    vectors: &[Vector3<f64>],
    mut w: W,
) -> Result<()> {
    if points.len() != vectors.len() {
        return Err(Error::mismatch(
            "vector ply",
            format!("{} points vs {} vectors", points.len(), vectors.len()),
        ));
    }
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nproperty double vx\nproperty double vy\nproperty double vz\nend_header\n",
        points.len()
    )?;
    for (p, v) in points.iter().zip(vectors) {
        for c in [p.x, p.y, p.z, v.x, v.y, v.z] {
            w.write_f64::<LittleEndian>(c)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    F32,
    F64,
    U8,
    I32,
    U32,
}

impl Scalar {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            "uchar" | "uint8" => Scalar::U8,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            other => return Err(Error::Format(format!("unsupported ply type `{other}`"))),
        })
    }

    fn read<R: Read>(self, r: &mut R) -> Result<f64> {
        Ok(match self {
            Scalar::F32 => r.read_f32::<LittleEndian>()? as f64,
            Scalar::F64 => r.read_f64::<LittleEndian>()?,
            Scalar::U8 => r.read_u8()? as f64,
            Scalar::I32 => r.read_i32::<LittleEndian>()? as f64,
            Scalar::U32 => r.read_u32::<LittleEndian>()? as f64,
        })
    }
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    // (name, scalar) or list (name, count type, item type)
    props: Vec<(String, Scalar, Option<Scalar>)>,
}

/// Parsed binary PLY: vertex positions, optional `vx vy vz` vectors, faces.
#[derive(Debug, Clone, Default)]
pub struct PlyData {
    pub vertices: Vec<Point3<f64>>,
    pub vectors: Option<Vec<Vector3<f64>>>,
    pub faces: Vec<[u32; 3]>,
}

pub fn read_ply<R: Read>(r: R) -> Result<PlyData> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut header_lines = 0;
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("ply header not terminated".into()));
        }
        header_lines += 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["ply"] if header_lines == 1 => {}
            _ if header_lines == 1 => return Err(Error::Format("missing ply magic".into())),
            ["format", "binary_little_endian", _] => {}
            ["format", other, _] => {
                return Err(Error::Format(format!("unsupported ply format `{other}`")))
            }
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::Format("bad element count".into()))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, name] => elements
                .last_mut()
                .ok_or_else(|| Error::Format("property before element".into()))?
                .props
                .push((
                    name.to_string(),
                    Scalar::parse(ct)?,
                    Some(Scalar::parse(it)?),
                )),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| Error::Format("property before element".into()))?
                .props
                .push((name.to_string(), Scalar::parse(ty)?, None)),
            ["end_header"] => break,
            _ => {}
        }
    }
    let mut out = PlyData::default();
    for el in &elements {
        match el.name.as_str() {
            "vertex" => {
                let names: Vec<&str> = el.props.iter().map(|p| p.0.as_str()).collect();
                let has_vec = ["vx", "vy", "vz"].iter().all(|n| names.contains(n));
                let mut vecs = Vec::new();
                for _ in 0..el.count {
                    let mut vals = std::collections::HashMap::new();
                    for (name, ty, list) in &el.props {
                        if list.is_some() {
                            return Err(Error::Format("list property on vertex".into()));
                        }
                        vals.insert(name.as_str(), ty.read(&mut r)?);
                    }
                    let get = |k: &str| {
                        vals.get(k)
                            .copied()
                            .ok_or_else(|| Error::Format(format!("vertex lacks `{k}`")))
                    };
                    out.vertices
                        .push(Point3::new(get("x")?, get("y")?, get("z")?));
                    if has_vec {
                        vecs.push(Vector3::new(get("vx")?, get("vy")?, get("vz")?));
                    }
                }
                if has_vec {
                    out.vectors = Some(vecs);
                }
            }
            "face" => {
                for _ in 0..el.count {
                    for (_, ct, list) in &el.props {
                        let Some(it) = list else {
                            ct.read(&mut r)?;
                            continue;
                        };
                        let n = ct.read(&mut r)? as usize;
                        let idx: Vec<u32> = (0..n)
                            .map(|_| it.read(&mut r).map(|v| v as u32))
                            .collect::<Result<_>>()?;
                        if n < 3 {
                            return Err(Error::Format("face with fewer than 3 vertices".into()));
                        }
                        for k in 1..n - 1 {
                            out.faces.push([idx[0], idx[k], idx[k + 1]]);
                        }
                    }
                }
            }
            other => {
                return Err(Error::Format(format!("unsupported ply element `{other}`")));
            }
        }
    }
    Ok(out)
}

pub fn read_ply_mesh<R: Read>(r: R) -> Result<TriangleMesh> {
    let data = read_ply(r)?;
    TriangleMesh::new(data.vertices, data.faces)
}

/// Writes by extension: `.obj` or `.ply`.
pub fn save_mesh(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => write_obj(mesh, file),
        Some("ply") => write_ply(mesh, file),
        _ => Err(Error::Format(format!(
            "unknown mesh extension: {}",
            path.display()
        ))),
    }
}

pub fn load_mesh(path: &Path) -> Result<TriangleMesh> {
    let file = std::fs::File::open(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => read_obj(file),
        Some("ply") => read_ply_mesh(file),
        _ => Err(Error::Format(format!(
            "unknown mesh extension: {}",
            path.display()
        ))),
    }
}
