//! Sequence container (`F4D1`) and dataset directories.
//!
//! Container layout, all little-endian:
//! magic `F4D1`, u32 frame count T, u32 points per frame N, u8 flags
//! (bit 0 ids, bit 1 rest points), u32 id length + UTF-8 sequence id,
//! u32 length + JSON shape (empty when absent), T f64 times, T*N*3 f64
//! coordinates, then N u32 ids and N*3 f64 rest points when flagged.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use super::{DeformingShape, PointCloudFrame, PointCloudSequence, TemporalMode};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"F4D1";
pub const EXTENSION: &str = "f4d";

/// Generation settings stored next to every sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSidecar {
    pub format: String,
    pub id: String,
    pub shape: Option<DeformingShape>,
    pub frames: usize,
    pub n_points: usize,
    pub temporal_mode: TemporalMode,
    pub noise_sigma: f64,
    pub seed: u64,
}

pub fn write_sequence<W: Write>(seq: &PointCloudSequence, mut w: W) -> Result<()> {
    let n = seq.points_per_frame();
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(seq.frames.len() as u32)?;
    w.write_u32::<LittleEndian>(n as u32)?;
    let flags = seq.correspondence_ids.is_some() as u8 | ((seq.rest_points.is_some() as u8) << 1);
    w.write_u8(flags)?;
    w.write_u32::<LittleEndian>(seq.id.len() as u32)?;
    w.write_all(seq.id.as_bytes())?;
    let shape = match &seq.shape {
        Some(s) => serde_json::to_vec(s)?,
        None => Vec::new(),
    };
    w.write_u32::<LittleEndian>(shape.len() as u32)?;
    w.write_all(&shape)?;
    for f in &seq.frames {
        w.write_f64::<LittleEndian>(f.time)?;
    }
    for f in &seq.frames {
        write_points(&mut w, &f.points)?;
    }
    if let Some(ids) = &seq.correspondence_ids {
        for &id in ids {
            w.write_u32::<LittleEndian>(id)?;
        }
    }
    if let Some(rest) = &seq.rest_points {
        write_points(&mut w, rest)?;
    }
    Ok(())
}

fn write_points<W: Write>(w: &mut W, points: &[Point3<f64>]) -> Result<()> {
    for p in points {
        for a in 0..3 {
            w.write_f64::<LittleEndian>(p[a])?;
        }
    }
    Ok(())
}

fn read_points<R: Read>(r: &mut R, n: usize) -> Result<Vec<Point3<f64>>> {
    let mut buf = vec![0.0; n * 3];
    r.read_f64_into::<LittleEndian>(&mut buf)?;
    Ok(buf
        .chunks_exact(3)
        .map(|c| Point3::new(c[0], c[1], c[2]))
        .collect())
}

pub fn read_sequence<R: Read>(mut r: R) -> Result<PointCloudSequence> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an F4D1 sequence".into()));
    }
    let t = r.read_u32::<LittleEndian>()? as usize;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let flags = r.read_u8()?;
    let id_len = r.read_u32::<LittleEndian>()? as usize;
    let mut id = vec![0u8; id_len];
    r.read_exact(&mut id)?;
    let id = String::from_utf8(id).map_err(|_| Error::Format("bad sequence id".into()))?;
    let shape_len = r.read_u32::<LittleEndian>()? as usize;
    let mut shape = vec![0u8; shape_len];
    r.read_exact(&mut shape)?;
    let shape = if shape.is_empty() {
        None
    } else {
        Some(serde_json::from_slice(&shape)?)
    };
    let mut times = vec![0.0; t];
    r.read_f64_into::<LittleEndian>(&mut times)?;
    let mut frames = Vec::with_capacity(t);
    for &time in &times {
        frames.push(PointCloudFrame {
            points: read_points(&mut r, n)?,
            time,
        });
    }
    let ids = if flags & 1 != 0 {
        let mut ids = vec![0u32; n];
        r.read_u32_into::<LittleEndian>(&mut ids)?;
        Some(ids)
    } else {
        None
    };
    let rest = if flags & 2 != 0 {
        Some(read_points(&mut r, n)?)
    } else {
        None
    };
    PointCloudSequence::new(id, frames, ids, shape, rest)
}

pub fn save_sequence(path: &Path, seq: &PointCloudSequence) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_sequence(seq, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_sequence(path: &Path) -> Result<PointCloudSequence> {
    read_sequence(BufReader::new(File::open(path)?))
}

/// Writes `<dir>/<id>.f4d` and `<dir>/<id>.json`.
pub fn save_to_dataset(
    dir: &Path,
    seq: &PointCloudSequence,
    sidecar: &SequenceSidecar,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.{EXTENSION}", seq.id));
    save_sequence(&path, seq)?;
    fs::write(
        dir.join(format!("{}.json", seq.id)),
        serde_json::to_string_pretty(sidecar)?,
    )?;
    Ok(path)
}

/// Sequence files of a dataset directory in sorted order.
pub fn list_dataset(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::InvalidArgument(format!(
            "dataset directory {} does not exist",
            dir.display()
        )));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == EXTENSION))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<PointCloudSequence>> {
    list_dataset(dir)?
        .iter()
        .map(|p| load_sequence(p))
        .collect()
}

pub fn load_sidecar(sequence_path: &Path) -> Result<SequenceSidecar> {
    let text = fs::read_to_string(sequence_path.with_extension("json"))?;
    Ok(serde_json::from_str(&text)?)
}
